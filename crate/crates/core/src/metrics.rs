//! Client-level fairness statistics and the suffering / well-performing
//! comparison against a baseline run. Accuracies are in percent.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregate::tail_count;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub worst: f64,
    pub worst10: f64,
    pub worst20: f64,
    pub best10: f64,
    pub best: f64,
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean of the `ceil(k% · n)` smallest values.
pub fn worst_k_pct(accuracies: &[f64], k: f64) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::invalid("no accuracies"));
    }
    let s = sorted(accuracies);
    Ok(mean(&s[..tail_count(k / 100.0, s.len())]))
}

/// Mean of the `ceil(k% · n)` largest values.
pub fn best_k_pct(accuracies: &[f64], k: f64) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::invalid("no accuracies"));
    }
    let s = sorted(accuracies);
    Ok(mean(&s[s.len() - tail_count(k / 100.0, s.len())..]))
}

pub fn fairness_report(accuracies: &[f64]) -> Result<FairnessReport> {
    if accuracies.is_empty() {
        return Err(Error::invalid("fairness report needs at least one client"));
    }
    let s = sorted(accuracies);
    let m = mean(&s);
    let var = s.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / s.len() as f64;
    Ok(FairnessReport {
        accuracies: accuracies.to_vec(),
        mean: m,
        std: var.sqrt(),
        worst: s[0],
        worst10: worst_k_pct(&s, 10.0)?,
        worst20: worst_k_pct(&s, 20.0)?,
        best10: best_k_pct(&s, 10.0)?,
        best: s[s.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline_run: String,
    pub candidate_run: String,
    /// Clients whose baseline accuracy is below the baseline mean.
    pub suffering: Vec<usize>,
    pub well_performing: Vec<usize>,
    /// Share (%) of suffering clients whose accuracy strictly increased.
    pub pct_suffering_improved: f64,
    /// Mean accuracy change over suffering clients.
    pub suffering_mean_delta: f64,
    /// Share (%) of well-performing clients whose accuracy strictly decreased.
    pub pct_well_performing_degraded: f64,
    /// Mean accuracy change over well-performing clients.
    pub well_performing_mean_delta: f64,
    pub overall_mean_delta: f64,
}

pub fn comparison_report(
    baseline_run: &str,
    baseline: &[f64],
    candidate_run: &str,
    candidate: &[f64],
) -> Result<ComparisonReport> {
    if baseline.len() != candidate.len() {
        return Err(Error::invalid(format!(
            "baseline has {} clients, candidate has {}",
            baseline.len(),
            candidate.len()
        )));
    }
    if baseline.is_empty() {
        return Err(Error::invalid("comparison over zero clients"));
    }
    let base_mean = mean(baseline);
    let delta: Vec<f64> = candidate.iter().zip(baseline).map(|(c, b)| c - b).collect();
    let (suffering, well_performing): (Vec<usize>, Vec<usize>) =
        (0..baseline.len()).partition(|&i| baseline[i] < base_mean);

    let share = |set: &[usize], pred: &dyn Fn(f64) -> bool| {
        if set.is_empty() {
            0.0
        } else {
            100.0 * set.iter().filter(|&&i| pred(delta[i])).count() as f64 / set.len() as f64
        }
    };
    let avg = |set: &[usize]| {
        if set.is_empty() {
            0.0
        } else {
            set.iter().map(|&i| delta[i]).sum::<f64>() / set.len() as f64
        }
    };
    Ok(ComparisonReport {
        baseline_run: baseline_run.to_string(),
        candidate_run: candidate_run.to_string(),
        pct_suffering_improved: share(&suffering, &|d| d > 0.0),
        suffering_mean_delta: avg(&suffering),
        pct_well_performing_degraded: share(&well_performing, &|d| d < 0.0),
        well_performing_mean_delta: avg(&well_performing),
        overall_mean_delta: mean(&delta),
        suffering,
        well_performing,
    })
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub strategy: String,
    pub seed: u64,
    pub report: FairnessReport,
}

pub const METRICS_HEADER: &str = "run_id,strategy,seed,mean,std,worst,worst10,worst20,best10";

/// Parsed `metrics.csv` row (summary statistics only).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub strategy: String,
    pub seed: u64,
    pub mean: f64,
    pub std: f64,
    pub worst: f64,
    pub worst10: f64,
    pub worst20: f64,
    pub best10: f64,
}

impl From<&MetricsRow> for MetricsRecord {
    fn from(r: &MetricsRow) -> Self {
        let f = &r.report;
        Self {
            run_id: r.run_id.clone(),
            strategy: r.strategy.clone(),
            seed: r.seed,
            mean: f.mean,
            std: f.std,
            worst: f.worst,
            worst10: f.worst10,
            worst20: f.worst20,
            best10: f.best10,
        }
    }
}

fn parse_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line() as usize),
        msg: e.to_string(),
    }
}

fn check_header<R: Read>(reader: &mut csv::Reader<R>, expected: &str, path: &Path) -> Result<()> {
    let header = reader.headers().map_err(|e| parse_error(path, e))?;
    if header.iter().ne(expected.split(',')) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>().join(",")),
        });
    }
    Ok(())
}

pub fn write_metrics_csv<W: Write>(out: W, rows: &[MetricsRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(METRICS_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(MetricsRecord::from(r))?;
    }
    w.flush()
}

pub fn read_metrics_csv<R: Read>(input: R, path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    check_header(&mut reader, METRICS_HEADER, path)?;
    reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_error(path, e))
}

#[derive(Serialize, Deserialize)]
struct AccuracyRecord {
    client_id: usize,
    accuracy: f64,
}

const ACCURACIES_HEADER: &str = "client_id,accuracy";

/// `client_id,accuracy` rows in client order.
pub fn write_accuracies<W: Write>(out: W, accuracies: &[f64]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if accuracies.is_empty() {
        w.write_record(ACCURACIES_HEADER.split(','))?;
    }
    for (client_id, &accuracy) in accuracies.iter().enumerate() {
        w.serialize(AccuracyRecord { client_id, accuracy })?;
    }
    w.flush()
}

pub fn read_accuracies<R: Read>(input: R, path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_reader(input);
    check_header(&mut reader, ACCURACIES_HEADER, path)?;
    let mut out = Vec::new();
    for rec in reader.deserialize::<AccuracyRecord>() {
        let rec = rec.map_err(|e| parse_error(path, e))?;
        if rec.client_id != out.len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: out.len() + 2,
                msg: format!("client ids must be dense, expected {}", out.len()),
            });
        }
        out.push(rec.accuracy);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_report() {
        let r = fairness_report(&[42.0; 6]).unwrap();
        for v in [r.mean, r.worst, r.worst10, r.worst20, r.best10, r.best] {
            assert_eq!(v, 42.0);
        }
        assert_eq!(r.std, 0.0);
        assert!(fairness_report(&[]).is_err());
    }

    #[test]
    fn ten_client_tails() {
        let acc: Vec<f64> = (1..=10).map(|i| 10.0 * i as f64).collect();
        let r = fairness_report(&acc).unwrap();
        assert_eq!((r.worst10, r.worst20, r.best10, r.mean), (10.0, 15.0, 100.0, 55.0));
        let mut shuffled = acc.clone();
        shuffled.reverse();
        shuffled.swap(2, 7);
        let s = fairness_report(&shuffled).unwrap();
        assert_eq!(
            (s.mean, s.std, s.worst10, s.worst20, s.best10),
            (r.mean, r.std, r.worst10, r.worst20, r.best10)
        );
    }

    #[test]
    fn comparison_cases() {
        let base = [10.0, 20.0, 60.0, 70.0];
        let same = comparison_report("a", &base, "a", &base).unwrap();
        assert_eq!(same.pct_suffering_improved, 0.0);
        assert_eq!(same.pct_well_performing_degraded, 0.0);
        assert_eq!(same.overall_mean_delta, 0.0);

        let shifted: Vec<f64> = base.iter().map(|b| b + 5.0).collect();
        let up = comparison_report("a", &base, "b", &shifted).unwrap();
        assert_eq!(up.pct_suffering_improved, 100.0);
        assert_eq!(up.suffering_mean_delta, 5.0);
        assert_eq!(up.pct_well_performing_degraded, 0.0);
        assert_eq!(up.overall_mean_delta, 5.0);

        let r = comparison_report("a", &base, "b", &[15.0, 18.0, 59.0, 72.0]).unwrap();
        assert_eq!(r.suffering, vec![0, 1]);
        assert_eq!(r.well_performing, vec![2, 3]);
        assert_eq!(r.pct_suffering_improved, 50.0);
        assert!((r.suffering_mean_delta - 1.5).abs() < 1e-12);
        assert_eq!(r.pct_well_performing_degraded, 50.0);
        assert!((r.well_performing_mean_delta - 0.5).abs() < 1e-12);
        assert!((r.overall_mean_delta - 1.0).abs() < 1e-12);

        assert!(comparison_report("a", &base, "b", &base[..3]).is_err());
    }

    #[test]
    fn csv_round_trips() {
        let report = fairness_report(&[12.5, 80.0, 33.3]).unwrap();
        let rows = vec![MetricsRow {
            run_id: "r0".into(),
            strategy: "semivred".into(),
            seed: 3,
            report: report.clone(),
        }];
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let back = read_metrics_csv(buf.as_slice(), Path::new("m")).unwrap();
        assert_eq!(back[0].worst10, report.worst10);
        assert_eq!(back[0].std, report.std);

        let mut buf = Vec::new();
        write_accuracies(&mut buf, &report.accuracies).unwrap();
        assert_eq!(read_accuracies(buf.as_slice(), Path::new("a")).unwrap(), report.accuracies);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn ordering_chain(acc in proptest::collection::vec(0.0f64..=100.0, 1..60)) {
                let r = fairness_report(&acc).unwrap();
                let tol = 1e-9;
                prop_assert!(r.worst <= r.worst10 + tol);
                prop_assert!(r.worst10 <= r.worst20 + tol);
                prop_assert!(r.worst20 <= r.mean + tol);
                prop_assert!(r.mean <= r.best10 + tol);
                prop_assert!(r.best10 <= r.best + tol);
                let mut prev = f64::NEG_INFINITY;
                for k in (5..=50).step_by(5) {
                    let w = worst_k_pct(&acc, k as f64).unwrap();
                    prop_assert!(w + tol >= prev);
                    prev = w;
                }
            }

            #[test]
            fn self_comparison_is_neutral(acc in proptest::collection::vec(0.0f64..=100.0, 1..30)) {
                let r = comparison_report("x", &acc, "x", &acc).unwrap();
                prop_assert_eq!(r.pct_suffering_improved, 0.0);
                prop_assert_eq!(r.pct_well_performing_degraded, 0.0);
                prop_assert_eq!(r.overall_mean_delta, 0.0);
                prop_assert_eq!(r.suffering.len() + r.well_performing.len(), acc.len());
            }
        }
    }
}
