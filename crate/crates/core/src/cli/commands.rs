//! Command implementations behind the `fairfed` binary.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use crate::aggregate::Strategy;
use crate::datagen::{self, Federation};
use crate::engine::output::{self, RunWriter};
use crate::engine::{self, RunState};
use crate::error::{Error, Result};
use crate::localtrain::{local_sgd, LocalConfig};
use crate::metrics::{self, ComparisonReport, FairnessReport, MetricsRow};
use crate::models::ModelParams;
use crate::numerics::{self, Rng};
use crate::oracles;

use super::spec::ExperimentSpec;

pub const SUMMARY: &str = "summary.csv";
pub const DATA_DIR: &str = "data";

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub report: FairnessReport,
}

fn resolved(spec: &ExperimentSpec, seed: u64) -> ExperimentSpec {
    let mut s = spec.clone();
    s.seed = Some(seed);
    s.data.seed = Some(spec.data.seed.unwrap_or(seed));
    s
}

/// Runs one experiment into `out`. The experiment must have an empty sweep grid.
pub fn run(spec: &ExperimentSpec, out: &Path, seed: Option<u64>, dump_data: bool) -> Result<RunSummary> {
    if !spec.sweep.is_empty() {
        return Err(Error::Config("spec has a [sweep] table; use the sweep command".into()));
    }
    let seed = seed.or(spec.seed).unwrap_or(0);
    let run_id = spec
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{}-seed{seed}", spec.strategy.tag()));
    run_resolved(&resolved(spec, seed), out, &run_id, dump_data)
}

fn run_resolved(spec: &ExperimentSpec, out: &Path, run_id: &str, dump_data: bool) -> Result<RunSummary> {
    spec.validate()?;
    let seed = spec.seed.unwrap_or(0);
    let federation = spec
        .build_federation(seed)
        .map_err(|e| Error::Config(format!("data: {e}")))?;
    let cfg = spec.run_config(seed);
    let arch = spec.arch();

    let mut writer = RunWriter::create(out, &spec.to_toml())?;
    if dump_data {
        dump_federation(&out.join(DATA_DIR), &federation)?;
    }
    info!("{run_id}: {} clients, {} rounds, {}", federation.len(), cfg.rounds, arch);
    let result = engine::run_experiment_with(&federation, arch, &cfg, |trace| {
        if let Some(eval) = &trace.eval {
            info!(
                "{run_id} round {}: mean loss {:.4}, mean acc {:.2}, worst10 {:.2}",
                trace.round, trace.mean_loss, eval.mean, eval.worst10
            );
        }
        writer.push_trace(trace)
    });
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            writer.flush()?;
            return Err(e);
        }
    };
    writer.finish(
        run_id,
        cfg.strategy.tag(),
        seed,
        &outcome.params,
        &outcome.accuracies,
        &outcome.report,
    )?;
    Ok(RunSummary {
        run_id: run_id.to_string(),
        seed,
        dir: out.to_path_buf(),
        report: outcome.report,
    })
}

/// Writes each client's train and test samples plus a manifest of weights
/// and class marginals.
pub fn dump_federation(dir: &Path, federation: &Federation) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join("clients.csv");
    let mut out = BufWriter::new(fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?);
    let write_manifest = |out: &mut BufWriter<fs::File>| -> std::io::Result<()> {
        writeln!(out, "client_id,weight,n_train,n_test,class_marginal")?;
        for c in &federation.clients {
            let marginal: Vec<String> = c.class_marginal.iter().map(|m| m.to_string()).collect();
            writeln!(
                out,
                "{},{},{},{},{}",
                c.client_id,
                c.weight,
                c.train.len(),
                c.test.len(),
                marginal.join(" ")
            )?;
        }
        out.flush()
    };
    write_manifest(&mut out).map_err(|e| Error::io(&manifest, e))?;
    for c in &federation.clients {
        for (name, samples) in [("train", &c.train), ("test", &c.test)] {
            let path = dir.join(format!("client{}_{name}.txt", c.client_id));
            let mut f = BufWriter::new(fs::File::create(&path).map_err(|e| Error::io(&path, e))?);
            datagen::write_samples(&mut f, samples, federation.dim, federation.num_classes)
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Aggregate statistics of one grid point across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSummary {
    pub label: String,
    pub point: Vec<(String, f64)>,
    pub runs: usize,
    pub worst10_mean: f64,
    pub worst10_std: f64,
    pub mean_mean: f64,
    pub mean_std: f64,
    pub worst20_mean: f64,
    pub best10_mean: f64,
    pub std_mean: f64,
}

pub fn grid_label(point: &[(String, f64)]) -> String {
    if point.is_empty() {
        return "default".to_string();
    }
    point
        .iter()
        .map(|(k, v)| format!("{k}_{v}"))
        .collect::<Vec<_>>()
        .join("-")
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Runs every grid point for every seed under `out/<label>/seed<s>`, then
/// writes `out/metrics.csv` (one row per run) and `out/summary.csv`
/// (grid points ranked by mean worst-10% accuracy, best first).
pub fn sweep(spec: &ExperimentSpec, out: &Path, seeds: &[u64]) -> Result<Vec<GridSummary>> {
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let grid = spec.grid();
    let points: Vec<ExperimentSpec> = grid.iter().map(|p| spec.at_grid_point(p)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (point, pspec) in grid.iter().zip(&points) {
        let label = grid_label(point);
        let mut reports = Vec::new();
        for &seed in seeds {
            let run_id = format!("{label}/seed{seed}");
            let dir = out.join(&label).join(format!("seed{seed}"));
            let summary = run_resolved(&resolved(pspec, seed), &dir, &run_id, false)?;
            rows.push(MetricsRow {
                run_id,
                strategy: pspec.strategy.tag().to_string(),
                seed,
                report: summary.report.clone(),
            });
            reports.push(summary.report);
        }
        let col = |f: fn(&FairnessReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
        let (worst10_mean, worst10_std) = mean_std(&col(|r| r.worst10));
        let (mean_mean, mean_std_) = mean_std(&col(|r| r.mean));
        summaries.push(GridSummary {
            label,
            point: point.clone(),
            runs: reports.len(),
            worst10_mean,
            worst10_std,
            mean_mean,
            mean_std: mean_std_,
            worst20_mean: mean_std(&col(|r| r.worst20)).0,
            best10_mean: mean_std(&col(|r| r.best10)).0,
            std_mean: mean_std(&col(|r| r.std)).0,
        });
    }
    output::write_metrics(&out.join(output::METRICS), &rows)?;
    // stable sort keeps grid order among ties
    summaries.sort_by(|a, b| b.worst10_mean.total_cmp(&a.worst10_mean));
    write_summary(&out.join(SUMMARY), &summaries)?;
    Ok(summaries)
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    rank: usize,
    grid_point: &'a str,
    runs: usize,
    worst10_mean: f64,
    worst10_std: f64,
    mean_mean: f64,
    mean_std: f64,
    worst20_mean: f64,
    best10_mean: f64,
    std_mean: f64,
}

pub fn write_summary(path: &Path, summaries: &[GridSummary]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut body = || -> csv::Result<()> {
        for (i, s) in summaries.iter().enumerate() {
            w.serialize(SummaryRecord {
                rank: i + 1,
                grid_point: &s.label,
                runs: s.runs,
                worst10_mean: s.worst10_mean,
                worst10_std: s.worst10_std,
                mean_mean: s.mean_mean,
                mean_std: s.mean_std,
                worst20_mean: s.worst20_mean,
                best10_mean: s.best10_mean,
                std_mean: s.std_mean,
            })?;
        }
        w.flush()?;
        Ok(())
    };
    body().map_err(|e| Error::io(path, e.into()))
}

/// Per-client comparison of two finished runs.
pub fn compare(baseline: &Path, candidate: &Path) -> Result<ComparisonReport> {
    let base = output::read_accuracies(baseline)?;
    let cand = output::read_accuracies(candidate)?;
    metrics::comparison_report(
        &baseline.display().to_string(),
        &base,
        &candidate.display().to_string(),
        &cand,
    )
}

/// One invariant check performed by [`verify`].
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

/// Checks the configured strategy against independent oracles at the
/// initial parameters: weights sum to one, and a one-step full-batch
/// round moves along the objective's finite-difference gradient.
pub fn verify(spec: &ExperimentSpec, seed: Option<u64>) -> Result<Vec<Check>> {
    let seed = seed.or(spec.seed).unwrap_or(0);
    let spec = resolved(spec, seed);
    let federation = spec
        .build_federation(seed)
        .map_err(|e| Error::Config(format!("data: {e}")))?;
    let eta = 1.0;
    let mut cfg = spec.run_config(seed);
    cfg.local = LocalConfig::full_batch_step(eta);
    cfg.participation = 1.0;
    let state = RunState::new(&federation, spec.arch(), &cfg)?;
    let params: ModelParams = state.params.clone();

    let mut checks = Vec::new();
    let losses = federation.train_losses(&params)?;
    let p = federation.weights();
    checks.push(Check::at_most("client weights sum to 1", (p.iter().sum::<f64>() - 1.0).abs(), 1e-12));

    let mut agg = crate::aggregate::Aggregator::new(cfg.strategy.clone(), &p)?;
    let mut rng = Rng::new(seed);
    let reports = federation
        .clients
        .iter()
        .map(|c| local_sgd(&params, c, &cfg.local, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let outcome = agg.aggregate(&reports)?;
    if let Some(w) = &outcome.weights {
        checks.push(Check::at_most("aggregation weights sum to 1", (w.iter().sum::<f64>() - 1.0).abs(), 1e-9));
    }
    if let Strategy::VRed { beta } = cfg.strategy {
        let direct = oracles::eval_objective(&cfg.strategy, &losses, &p)?;
        if p.iter().all(|w| (w - p[0]).abs() < 1e-12) {
            let pairwise = oracles::vred_sum_form(&losses, beta);
            checks.push(Check::at_most(
                "variance objective equals pairwise form",
                (direct - pairwise).abs() / direct.abs().max(1e-12),
                1e-10,
            ));
        }
    }
    if !matches!(cfg.strategy, Strategy::Afl { .. }) {
        let fd = oracles::objective_gradient_fd(&cfg.strategy, &params, &federation, 1e-6)?;
        let step: Vec<f64> = outcome.delta.iter().map(|d| d / eta).collect();
        let exact = matches!(
            cfg.strategy,
            Strategy::FedAvg
                | Strategy::VRed { .. }
                | Strategy::SemiVRed { .. }
                | Strategy::GiFair { .. }
                | Strategy::Term { .. }
                | Strategy::DeltaFl { .. }
        );
        if exact {
            checks.push(Check::at_most(
                "one-step update equals objective gradient",
                numerics::relative_error(&step, &fd)?,
                1e-5,
            ));
        } else {
            let cos = numerics::dot(&step, &fd)? / (numerics::norm2(&step) * numerics::norm2(&fd)).max(f64::MIN_POSITIVE);
            checks.push(Check::at_most("one-step update parallel to objective gradient", 1.0 - cos, 1e-6));
        }
    }
    Ok(checks)
}
