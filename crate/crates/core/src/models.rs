//! Softmax regression and a one-hidden-layer tanh MLP with hand-derived
//! cross-entropy gradients, plus a central-difference oracle.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::numerics::{self, MatRef, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Arch {
    SoftmaxRegression { inputs: usize, classes: usize },
    Mlp { inputs: usize, hidden: usize, classes: usize },
}

impl Arch {
    pub fn inputs(&self) -> usize {
        match *self {
            Arch::SoftmaxRegression { inputs, .. } | Arch::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Arch::SoftmaxRegression { classes, .. } | Arch::Mlp { classes, .. } => classes,
        }
    }

    pub fn num_params(&self) -> usize {
        match *self {
            Arch::SoftmaxRegression { inputs, classes } => inputs * classes + classes,
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => inputs * hidden + hidden + hidden * classes + classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Arch::SoftmaxRegression { inputs, classes } => inputs > 0 && classes >= 2,
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => inputs > 0 && hidden > 0 && classes >= 2,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate architecture {self}")))
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::SoftmaxRegression { inputs, classes } => write!(f, "softmax_regression {inputs} {classes}"),
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => write!(f, "mlp {inputs} {hidden} {classes}"),
        }
    }
}

/// Flat parameter vector plus the architecture that interprets it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Arch,
    theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl ModelParams {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(rng: &mut Rng, arch: Arch) -> Self {
        let mut theta = vec![0.0; arch.num_params()];
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in slice {
                *v = bound * (2.0 * rng.uniform() - 1.0);
            }
        };
        match arch {
            Arch::SoftmaxRegression { inputs, classes } => fill(&mut theta[..inputs * classes], inputs),
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                fill(&mut theta[..inputs * hidden], inputs);
                let w2 = inputs * hidden + hidden;
                fill(&mut theta[w2..w2 + hidden * classes], hidden);
            }
        }
        Self { arch, theta }
    }

    pub fn zeros(arch: Arch) -> Self {
        Self {
            arch,
            theta: vec![0.0; arch.num_params()],
        }
    }

    pub fn from_vec(arch: Arch, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != arch.num_params() {
            return Err(Error::ShapeMismatch {
                op: "ModelParams::from_vec",
                left: theta.len(),
                right: arch.num_params(),
            });
        }
        Ok(Self { arch, theta })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        Self::from_vec(self.arch, theta.to_vec())
    }

    /// Class scores (logits) for one input.
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut ws = Workspace::new(self.arch);
        self.forward(x, &mut ws)?;
        Ok(ws.logits)
    }

    fn forward(&self, x: &[f64], ws: &mut Workspace) -> Result<()> {
        let t = &self.theta;
        match self.arch {
            Arch::SoftmaxRegression { inputs, classes } => {
                let w = MatRef::new(classes, inputs, &t[..inputs * classes])?;
                w.affine(x, &t[inputs * classes..], &mut ws.logits)
            }
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let (w1, rest) = t.split_at(inputs * hidden);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden * classes);
                MatRef::new(hidden, inputs, w1)?.affine(x, b1, &mut ws.hidden)?;
                ws.hidden.iter_mut().for_each(|v| *v = v.tanh());
                MatRef::new(classes, hidden, w2)?.affine(&ws.hidden, b2, &mut ws.logits)
            }
        }
    }

    /// Adds `scale · ∂ℓ/∂θ` for one sample whose softmax residual is in `ws.logits`.
    fn backward(&self, x: &[f64], ws: &mut Workspace, scale: f64, grad: &mut [f64]) -> Result<()> {
        let dz = &ws.logits;
        match self.arch {
            Arch::SoftmaxRegression { inputs, classes } => {
                let (gw, gb) = grad.split_at_mut(inputs * classes);
                for c in 0..classes {
                    let r = scale * dz[c];
                    gb[c] += r;
                    for (g, xi) in gw[c * inputs..(c + 1) * inputs].iter_mut().zip(x) {
                        *g += r * xi;
                    }
                }
            }
            Arch::Mlp {
                inputs,
                hidden,
                classes,
            } => {
                let w2 = &self.theta[inputs * hidden + hidden..inputs * hidden + hidden + hidden * classes];
                MatRef::new(classes, hidden, w2)?.transpose_mul(dz, &mut ws.dhidden)?;
                let (gw1, rest) = grad.split_at_mut(inputs * hidden);
                let (gb1, rest) = rest.split_at_mut(hidden);
                let (gw2, gb2) = rest.split_at_mut(hidden * classes);
                for c in 0..classes {
                    let r = scale * dz[c];
                    gb2[c] += r;
                    for (g, h) in gw2[c * hidden..(c + 1) * hidden].iter_mut().zip(&ws.hidden) {
                        *g += r * h;
                    }
                }
                for k in 0..hidden {
                    let h = ws.hidden[k];
                    let da = scale * ws.dhidden[k] * (1.0 - h * h);
                    gb1[k] += da;
                    for (g, xi) in gw1[k * inputs..(k + 1) * inputs].iter_mut().zip(x) {
                        *g += da * xi;
                    }
                }
            }
        }
        Ok(())
    }

    /// Writes the checkpoint: architecture line, parameter count, then one
    /// IEEE-754 bit pattern per line in hex.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "arch {}", self.arch)?;
        writeln!(out, "d {}", self.theta.len())?;
        for v in &self.theta {
            writeln!(out, "{:016x}", v.to_bits())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(input: R, path: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let lines: Vec<String> = input
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| Error::io(path, e))?;
        let arch_line = lines.first().ok_or_else(|| err(1, "empty checkpoint".into()))?;
        let tok: Vec<&str> = arch_line.split_whitespace().collect();
        let nums = |s: &[&str]| -> Result<Vec<usize>> {
            s.iter()
                .map(|t| t.parse::<usize>().map_err(|e| err(1, format!("bad arch field: {e}"))))
                .collect()
        };
        let arch = match tok.as_slice() {
            ["arch", "softmax_regression", rest @ ..] if rest.len() == 2 => {
                let n = nums(rest)?;
                Arch::SoftmaxRegression {
                    inputs: n[0],
                    classes: n[1],
                }
            }
            ["arch", "mlp", rest @ ..] if rest.len() == 3 => {
                let n = nums(rest)?;
                Arch::Mlp {
                    inputs: n[0],
                    hidden: n[1],
                    classes: n[2],
                }
            }
            _ => return Err(err(1, format!("unrecognized arch line {arch_line:?}"))),
        };
        let d = lines
            .get(1)
            .and_then(|l| l.strip_prefix("d "))
            .and_then(|v| v.trim().parse::<usize>().ok())
            .ok_or_else(|| err(2, "expected `d <count>`".into()))?;
        let theta = lines[2..]
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                u64::from_str_radix(l.trim(), 16)
                    .map(f64::from_bits)
                    .map_err(|e| err(i + 3, format!("bad hex float: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if theta.len() != d {
            return Err(err(2, format!("declared {d} parameters, found {}", theta.len())));
        }
        Self::from_vec(arch, theta)
    }
}

struct Workspace {
    hidden: Vec<f64>,
    dhidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Workspace {
    fn new(arch: Arch) -> Self {
        let hidden = match arch {
            Arch::Mlp { hidden, .. } => hidden,
            Arch::SoftmaxRegression { .. } => 0,
        };
        Self {
            hidden: vec![0.0; hidden],
            dhidden: vec![0.0; hidden],
            logits: vec![0.0; arch.classes()],
        }
    }
}

/// Per-sample loss weights: `1/n` each, or in class-weighted mode
/// `w_y / (count_y · Σ_{present j} w_j)` so the loss is the `w`-weighted
/// mix of per-class mean losses over the classes present in the batch.
/// `None` when the batch carries no weight.
pub(crate) fn sample_weights(batch: &[Sample], class_weights: Option<&[f64]>) -> Option<Vec<f64>> {
    if batch.is_empty() {
        return None;
    }
    match class_weights {
        None => Some(vec![1.0 / batch.len() as f64; batch.len()]),
        Some(w) => {
            let mut counts = vec![0usize; w.len()];
            for s in batch {
                counts[s.y] += 1;
            }
            let present: f64 = w
                .iter()
                .zip(&counts)
                .filter(|(_, &c)| c > 0)
                .map(|(wj, _)| wj)
                .sum();
            if !(present > 0.0) {
                return None;
            }
            Some(
                batch
                    .iter()
                    .map(|s| w[s.y] / (counts[s.y] as f64 * present))
                    .collect(),
            )
        }
    }
}

fn check_batch(params: &ModelParams, batch: &[Sample], class_weights: Option<&[f64]>) -> Result<Vec<f64>> {
    let arch = params.arch;
    if let Some(w) = class_weights {
        if w.len() != arch.classes() {
            return Err(Error::ShapeMismatch {
                op: "class weights",
                left: w.len(),
                right: arch.classes(),
            });
        }
    }
    for s in batch {
        if s.x.len() != arch.inputs() {
            return Err(Error::ShapeMismatch {
                op: "sample features",
                left: s.x.len(),
                right: arch.inputs(),
            });
        }
        if s.y >= arch.classes() {
            return Err(Error::invalid(format!("label {} out of range for {}", s.y, arch)));
        }
    }
    sample_weights(batch, class_weights)
        .ok_or_else(|| Error::invalid("batch is empty or carries zero class weight"))
}

/// Mean (or class-weighted) cross-entropy and its exact gradient.
pub fn loss_and_grad(params: &ModelParams, batch: &[Sample], class_weights: Option<&[f64]>) -> Result<LossGrad> {
    let weights = check_batch(params, batch, class_weights)?;
    let mut ws = Workspace::new(params.arch);
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    for (s, &sw) in batch.iter().zip(&weights) {
        params.forward(&s.x, &mut ws)?;
        let z_y = ws.logits[s.y];
        let lse = numerics::softmax_in_place(&mut ws.logits);
        loss += sw * (lse - z_y);
        ws.logits[s.y] -= 1.0;
        params.backward(&s.x, &mut ws, sw, &mut grad)?;
    }
    Ok(LossGrad { loss, grad })
}

pub fn loss(params: &ModelParams, batch: &[Sample], class_weights: Option<&[f64]>) -> Result<f64> {
    let weights = check_batch(params, batch, class_weights)?;
    let mut ws = Workspace::new(params.arch);
    let mut loss = 0.0;
    for (s, &sw) in batch.iter().zip(&weights) {
        params.forward(&s.x, &mut ws)?;
        let z_y = ws.logits[s.y];
        let lse = numerics::softmax_in_place(&mut ws.logits);
        loss += sw * (lse - z_y);
    }
    Ok(loss)
}

/// Argmax prediction, ties resolved toward the lowest class index.
pub fn predict(params: &ModelParams, x: &[f64]) -> Result<usize> {
    let logits = params.logits(x)?;
    let mut best = 0;
    for (c, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = c;
        }
    }
    Ok(best)
}

pub fn accuracy(params: &ModelParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("accuracy of an empty sample list"));
    }
    let mut hits = 0usize;
    for s in samples {
        if predict(params, &s.x)? == s.y {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// `Σ_j w_j · acc_j` over classes present in `samples`, renormalized over
/// their total weight.
pub fn weighted_accuracy(params: &ModelParams, samples: &[Sample], class_weights: &[f64]) -> Result<f64> {
    let weights = sample_weights(samples, Some(class_weights))
        .ok_or_else(|| Error::invalid("weighted accuracy over samples with no class weight"))?;
    let mut acc = 0.0;
    for (s, w) in samples.iter().zip(weights) {
        if predict(params, &s.x)? == s.y {
            acc += w;
        }
    }
    Ok(acc)
}

/// Central-difference gradient of [`loss`].
pub fn finite_diff_grad(
    params: &ModelParams,
    batch: &[Sample],
    class_weights: Option<&[f64]>,
    eps: f64,
) -> Result<Vec<f64>> {
    check_batch(params, batch, class_weights)?;
    let arch = params.arch;
    numerics::central_difference(
        |theta| {
            let p = ModelParams {
                arch,
                theta: theta.to_vec(),
            };
            loss(&p, batch, class_weights).expect("batch validated above")
        },
        &params.theta,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::make_gaussian_mixture;

    fn random_batch(rng: &mut Rng, n: usize, inputs: usize, classes: usize) -> Vec<Sample> {
        (0..n)
            .map(|_| Sample {
                x: (0..inputs).map(|_| rng.normal()).collect(),
                y: rng.below(classes),
            })
            .collect()
    }

    fn perturbed(rng: &mut Rng, arch: Arch) -> ModelParams {
        let mut p = ModelParams::init(rng, arch);
        for v in p.theta_mut() {
            *v += 0.5 * rng.normal();
        }
        p
    }

    #[test]
    fn parameter_counts() {
        let s = Arch::SoftmaxRegression { inputs: 3, classes: 2 };
        let m = Arch::Mlp {
            inputs: 3,
            hidden: 4,
            classes: 2,
        };
        assert_eq!(ModelParams::init(&mut Rng::new(0), s).len(), 8);
        assert_eq!(ModelParams::init(&mut Rng::new(0), m).len(), 26);
        assert_eq!(ModelParams::init(&mut Rng::new(3), m), ModelParams::init(&mut Rng::new(3), m));
        assert!(ModelParams::from_vec(s, vec![0.0; 7]).is_err());
    }

    #[test]
    fn zero_params_give_log_c() {
        let mut rng = Rng::new(1);
        for arch in [
            Arch::SoftmaxRegression { inputs: 4, classes: 5 },
            Arch::Mlp {
                inputs: 4,
                hidden: 3,
                classes: 5,
            },
        ] {
            let batch = random_batch(&mut rng, 20, 4, 5);
            let l = loss(&ModelParams::zeros(arch), &batch, None).unwrap();
            assert!((l - 5f64.ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let archs = [
            Arch::SoftmaxRegression { inputs: 3, classes: 4 },
            Arch::Mlp {
                inputs: 3,
                hidden: 5,
                classes: 3,
            },
        ];
        for trial in 0..100 {
            let arch = archs[trial % 2];
            let params = perturbed(&mut rng, arch);
            let m = 1 + rng.below(12);
            let batch = random_batch(&mut rng, m, arch.inputs(), arch.classes());
            let cw: Vec<f64> = (0..arch.classes()).map(|_| rng.uniform() + 0.1).collect();
            let cw = (trial % 3 == 0).then_some(cw.as_slice());
            let lg = loss_and_grad(&params, &batch, cw).unwrap();
            assert!(lg.loss >= 0.0);
            let fd = finite_diff_grad(&params, &batch, cw, 1e-5).unwrap();
            let err = numerics::relative_error(&lg.grad, &fd).unwrap();
            assert!(err <= 1e-5, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn duplicated_batch_is_invariant() {
        let mut rng = Rng::new(2);
        let arch = Arch::SoftmaxRegression { inputs: 2, classes: 3 };
        let params = perturbed(&mut rng, arch);
        let batch = random_batch(&mut rng, 7, 2, 3);
        let doubled: Vec<Sample> = batch.iter().flat_map(|s| [s.clone(), s.clone()]).collect();
        let a = loss_and_grad(&params, &batch, None).unwrap();
        let b = loss_and_grad(&params, &doubled, None).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-14);
        assert!(numerics::relative_error(&a.grad, &b.grad).unwrap() < 1e-13);
    }

    #[test]
    fn frequency_weights_reproduce_the_mean_loss() {
        let mut rng = Rng::new(4);
        let arch = Arch::Mlp {
            inputs: 2,
            hidden: 3,
            classes: 3,
        };
        let params = perturbed(&mut rng, arch);
        let batch = random_batch(&mut rng, 40, 2, 3);
        let mut freq = vec![0.0; 3];
        for s in &batch {
            freq[s.y] += 1.0 / 40.0;
        }
        let a = loss(&params, &batch, None).unwrap();
        let b = loss(&params, &batch, Some(&freq)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let params = ModelParams::zeros(Arch::SoftmaxRegression { inputs: 3, classes: 2 });
        let batch = vec![Sample { x: vec![1.0], y: 0 }];
        assert!(loss_and_grad(&params, &batch, None).is_err());
        assert!(loss_and_grad(&params, &[], None).is_err());
        assert!(finite_diff_grad(&params, &[Sample { x: vec![0.0; 3], y: 0 }], None, 0.0).is_err());
    }

    #[test]
    fn accuracy_tie_break_and_complement() {
        let zero = ModelParams::zeros(Arch::SoftmaxRegression { inputs: 2, classes: 3 });
        let samples: Vec<Sample> = (0..5).map(|i| Sample { x: vec![i as f64, 1.0], y: 0 }).collect();
        assert_eq!(accuracy(&zero, &samples).unwrap(), 1.0);
        assert!(accuracy(&zero, &[]).is_err());

        // w = I picks the larger coordinate
        let ident = ModelParams::from_vec(
            Arch::SoftmaxRegression { inputs: 2, classes: 2 },
            vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        )
        .unwrap();
        let right = vec![Sample { x: vec![2.0, 0.0], y: 0 }, Sample { x: vec![0.0, 2.0], y: 1 }];
        let wrong: Vec<Sample> = right.iter().map(|s| Sample { x: s.x.clone(), y: 1 - s.y }).collect();
        assert_eq!(accuracy(&ident, &right).unwrap(), 1.0);
        assert_eq!(accuracy(&ident, &wrong).unwrap(), 0.0);
    }

    #[test]
    fn trained_model_separates_distant_gaussians() {
        let mut rng = Rng::new(21);
        let pool = make_gaussian_mixture(&mut rng, 2, 2, 100, 10.0).unwrap();
        let arch = Arch::SoftmaxRegression { inputs: 2, classes: 2 };
        let mut params = ModelParams::init(&mut rng, arch);
        for _ in 0..50 {
            let g = loss_and_grad(&params, pool.samples(), None).unwrap();
            numerics::axpy(-0.1, &g.grad, params.theta_mut()).unwrap();
        }
        let test = make_gaussian_mixture(&mut Rng::new(22), 2, 2, 100, 10.0).unwrap();
        assert!(accuracy(&params, test.samples()).unwrap() >= 0.95);
        assert_eq!(accuracy(&params, test.samples()).unwrap(), 1.0);
    }

    #[test]
    fn indistinguishable_classes_sit_near_chance() {
        let mut rng = Rng::new(31);
        let pool = make_gaussian_mixture(&mut rng, 2, 2, 500, 0.0).unwrap();
        let arch = Arch::SoftmaxRegression { inputs: 2, classes: 2 };
        let mut params = ModelParams::init(&mut rng, arch);
        for _ in 0..100 {
            let g = loss_and_grad(&params, pool.samples(), None).unwrap();
            numerics::axpy(-0.5, &g.grad, params.theta_mut()).unwrap();
        }
        let test = make_gaussian_mixture(&mut Rng::new(32), 2, 2, 500, 0.0).unwrap();
        let acc = accuracy(&params, test.samples()).unwrap();
        assert!((acc - 0.5).abs() < 0.06, "{acc}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = perturbed(
            &mut Rng::new(8),
            Arch::Mlp {
                inputs: 2,
                hidden: 3,
                classes: 2,
            },
        );
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let back = ModelParams::read_checkpoint(buf.as_slice(), Path::new("mem")).unwrap();
        assert_eq!(back, p);
    }
}
