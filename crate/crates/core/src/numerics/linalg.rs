use crate::error::{Error, Result};

fn check(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            left: a,
            right: b,
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check("dot", a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) -> Result<()> {
    check("axpy", x.len(), y.len())?;
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
    Ok(())
}

pub fn sub(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check("sub", a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// Euclidean norm, scaled by the largest entry so huge finite vectors
/// do not overflow.
pub fn norm2(a: &[f64]) -> f64 {
    let scale = max_abs(a);
    if scale == 0.0 || !scale.is_finite() {
        return a.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    scale * a.iter().map(|v| (v / scale) * (v / scale)).sum::<f64>().sqrt()
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `Σ_k weights[k] * vectors[k]`, accumulated in index order.
pub fn weighted_sum<V: AsRef<[f64]>>(vectors: &[V], weights: &[f64]) -> Result<Vec<f64>> {
    check("weighted_sum", vectors.len(), weights.len())?;
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("weighted sum over no vectors"))?;
    let mut out = vec![0.0; first.as_ref().len()];
    for (v, &w) in vectors.iter().zip(weights) {
        axpy(w, v.as_ref(), &mut out)?;
    }
    Ok(out)
}

/// Normwise relative error `max_k |a_k - b_k| / max(‖a‖∞, ‖b‖∞)`.
///
/// Returns the absolute error when both vectors are (near) zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> Result<f64> {
    check("relative_error", a.len(), b.len())?;
    let diff = a
        .iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = max_abs(a).max(max_abs(b));
    Ok(if scale > 1e-12 { diff / scale } else { diff })
}

/// Borrowed row-major matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatRef<'a> {
    rows: usize,
    cols: usize,
    data: &'a [f64],
}

impl<'a> MatRef<'a> {
    pub fn new(rows: usize, cols: usize, data: &'a [f64]) -> Result<Self> {
        check("MatRef::new", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &'a [f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `out = self · x + bias`
    pub fn affine(&self, x: &[f64], bias: &[f64], out: &mut [f64]) -> Result<()> {
        check("affine(x)", self.cols, x.len())?;
        check("affine(bias)", self.rows, bias.len())?;
        check("affine(out)", self.rows, out.len())?;
        for (r, o) in out.iter_mut().enumerate() {
            *o = bias[r] + self.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(())
    }

    /// `out = selfᵀ · v`
    pub fn transpose_mul(&self, v: &[f64], out: &mut [f64]) -> Result<()> {
        check("transpose_mul(v)", self.rows, v.len())?;
        check("transpose_mul(out)", self.cols, out.len())?;
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &vr) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += vr * a;
            }
        }
        Ok(())
    }
}
