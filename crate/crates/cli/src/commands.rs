use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use icp_core::datasets::FactorDataset;
use icp_core::experiment::{
    ablation_csv, ablation_table, ablation_text, best_of_grid, head_errors, medians_by_point, mig_reports,
    reconstruction_quality, run_jobs, AblationRow, EvalPlan, GridPoint, RunMetrics, RunResult,
};
use icp_core::metrics::{bundle_heatmap, latent_traversal, write_heatmap, write_traversal, Part, DEFAULT_MIG_BINS};
use icp_core::networks::{Head, Mode, ModelBundle};
use icp_core::objectives::{IcpHyperparams, Variant};
use icp_core::trainer::{load_checkpoint, metrics_path, train_on, CheckpointManifest};
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::config::ExperimentConfig;
use crate::manifest::{unix_now, ExperimentManifest};
use crate::CliError;

/// Rows scored for reconstruction metrics.
const RECONSTRUCTION_ROWS: usize = 1024;

fn io(context: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{context} `{}`: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io("cannot create directory", parent, e))?;
    }
    fs::write(path, text).map_err(|e| io("cannot write", path, e))
}

fn relative(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| path.to_path_buf())
}

/// Train and evaluation sets under the configured split.
pub fn load_split(config: &ExperimentConfig) -> Result<(FactorDataset, FactorDataset), CliError> {
    let ds = config.dataset_ref()?.load(config.trainer.seed)?;
    if config.data.test_fraction > 0.0 {
        Ok(ds.split(config.data.test_fraction, config.data.split_seed)?)
    } else {
        Ok((ds.clone(), ds))
    }
}

/// Runs (or resumes) training into `output_dir` and records the manifest.
pub fn train(config: &ExperimentConfig, output_dir: &Path, resume: Option<&Path>) -> Result<ExperimentManifest, CliError> {
    let started = Instant::now();
    let mut manifest = ExperimentManifest::new("train", config);
    if resume.is_some() {
        if let Some(prev) = ExperimentManifest::read(output_dir)? {
            if prev.config_hash != manifest.config_hash {
                return Err(CliError::Config(format!(
                    "config hash {} differs from the run's recorded {}; resume needs the identical configuration",
                    manifest.config_hash, prev.config_hash
                )));
            }
            manifest.started_unix_s = prev.started_unix_s;
        }
    }
    let (train_set, _) = load_split(config)?;
    let tc = config.train_config(train_set.image_shape, output_dir)?;
    fs::create_dir_all(output_dir).map_err(|e| io("cannot create output directory", output_dir, e))?;
    manifest.artifacts.metrics_log = Some(relative(&metrics_path(output_dir), output_dir));
    manifest.artifacts.checkpoints = Some(PathBuf::from("checkpoints"));
    manifest.write(output_dir)?;

    let result = train_on(&tc, &train_set, resume);
    manifest.finished_unix_s = unix_now();
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    match result {
        Ok(out) => {
            manifest.status = "completed".into();
            manifest.steps_completed = Some(out.steps_completed);
            manifest.artifacts.final_checkpoint = Some(relative(&out.final_checkpoint, output_dir));
            manifest.write(output_dir)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.status = match e {
                icp_core::Error::Divergence { .. } => "diverged".into(),
                _ => "failed".into(),
            };
            manifest.write(output_dir)?;
            Err(e.into())
        }
    }
}

/// Run directory owning a checkpoint (`<run>/checkpoints/<step>`).
pub fn run_dir_of(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint.parent()?.parent().map(Path::to_path_buf)
}

/// Loaded checkpoint plus the data it should be scored on.
pub struct LoadedRun {
    pub bundle: ModelBundle<f32>,
    pub manifest: CheckpointManifest,
    pub eval_set: FactorDataset,
    /// `test` when a held-out split was configured, else `all`.
    pub split: &'static str,
}

pub fn load_run(checkpoint: &Path, dataset_override: Option<&Path>) -> Result<LoadedRun, CliError> {
    let (state, manifest) = load_checkpoint(checkpoint)?;
    let run = run_dir_of(checkpoint).map(|d| ExperimentManifest::read(&d)).transpose()?.flatten();
    let (eval_set, split) = match (dataset_override, run) {
        (Some(path), _) => (icp_core::datasets::load_cache(path)?, "all"),
        (None, Some(run)) if run.config.data.test_fraction > 0.0 => (load_split(&run.config)?.1, "test"),
        (None, _) => (manifest.dataset.load(manifest.seed)?, "all"),
    };
    if eval_set.image_shape != manifest.arch.input_shape {
        return Err(CliError::Config(format!(
            "dataset images are {:?}, checkpoint expects {:?}",
            eval_set.image_shape, manifest.arch.input_shape
        )));
    }
    Ok(LoadedRun {
        bundle: state.bundle,
        manifest,
        eval_set,
        split,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Error,
    Mig,
    Mse,
    Ssim,
}

impl Metric {
    pub fn parse_list(text: &str) -> Result<Vec<Metric>, CliError> {
        let mut out = Vec::new();
        for name in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let m = match name.to_ascii_lowercase().as_str() {
                "error" => Metric::Error,
                "mig" => Metric::Mig,
                "mse" => Metric::Mse,
                "ssim" => Metric::Ssim,
                other => {
                    return Err(CliError::Config(format!(
                        "unknown metric `{other}` (expected error, mig, mse, ssim)"
                    )))
                }
            };
            if !out.contains(&m) {
                out.push(m);
            }
        }
        if out.is_empty() {
            return Err(CliError::Config("no metrics requested".into()));
        }
        Ok(out)
    }

    fn name(self) -> &'static str {
        match self {
            Metric::Error => "error",
            Metric::Mig => "mig",
            Metric::Mse => "mse",
            Metric::Ssim => "ssim",
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

/// JSON report with one block per requested metric, keyed by head.
pub fn eval(run: &LoadedRun, metrics: &[Metric]) -> Result<Value, CliError> {
    let mode = run.manifest.arch.mode;
    let ds = &run.eval_set;
    for &m in metrics {
        let ok = match m {
            Metric::Error => mode == Mode::Supervised && ds.labels.is_some(),
            Metric::Mig => !ds.scored_factors().is_empty(),
            Metric::Mse | Metric::Ssim => mode == Mode::SelfSupervised,
        };
        if !ok {
            let why = match m {
                Metric::Error => "needs a supervised checkpoint and a labeled dataset",
                Metric::Mig => "needs a dataset with scored ground-truth factors",
                _ => "needs a self-supervised checkpoint",
            };
            return Err(CliError::Config(format!("metric `{}` {why} (checkpoint mode: {mode})", m.name())));
        }
    }
    let mut out = Map::new();
    out.insert("step".into(), json!(run.manifest.step));
    out.insert("variant".into(), json!(run.manifest.hp.variant.name()));
    out.insert("mode".into(), json!(mode.to_string()));
    out.insert("split".into(), json!(run.split));
    out.insert("n_samples".into(), json!(ds.len()));
    let seed = run.manifest.seed;
    let recon: Option<Vec<_>> = metrics
        .iter()
        .any(|m| matches!(m, Metric::Mse | Metric::Ssim))
        .then(|| {
            Head::ALL
                .iter()
                .map(|&h| reconstruction_quality(&run.bundle, ds, h, RECONSTRUCTION_ROWS, seed).map(|q| (h, q)))
                .collect::<icp_core::Result<Vec<_>>>()
        })
        .transpose()?;
    for &m in metrics {
        let block = match m {
            Metric::Error => to_value(&head_errors(&run.bundle, ds)?),
            Metric::Mig => to_value(&mig_reports(&run.bundle, ds, DEFAULT_MIG_BINS, seed)?),
            Metric::Mse | Metric::Ssim => {
                let mut heads = Map::new();
                for (h, q) in recon.as_ref().expect("computed above") {
                    let v = if m == Metric::Mse { Some(q.mse) } else { q.ssim };
                    heads.insert(h.name().into(), json!(v));
                }
                Value::Object(heads)
            }
        };
        out.insert(m.name().into(), block);
    }
    Ok(Value::Object(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    Heatmap,
    Traversal,
}

impl std::str::FromStr for FigureKind {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s.to_ascii_lowercase().as_str() {
            "heatmap" => Ok(FigureKind::Heatmap),
            "traversal" => Ok(FigureKind::Traversal),
            other => Err(CliError::Config(format!(
                "unknown figure kind `{other}` (expected heatmap, traversal)"
            ))),
        }
    }
}

/// `all`, or a comma list such as `z0,y2`.
pub fn parse_dims(text: &str, d_z: usize, d_y: usize) -> Result<Vec<(Part, usize)>, CliError> {
    if text.trim().eq_ignore_ascii_case("all") {
        return Ok((0..d_z).map(|d| (Part::Z, d)).chain((0..d_y).map(|d| (Part::Y, d))).collect());
    }
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let bad = || CliError::Config(format!("bad dimension `{item}` (expected z<k>, y<k> or all)"));
            let (part, limit) = match item.chars().next() {
                Some('z') | Some('Z') => (Part::Z, d_z),
                Some('y') | Some('Y') => (Part::Y, d_y),
                _ => return Err(bad()),
            };
            let dim: usize = item[1..].parse().map_err(|_| bad())?;
            if dim >= limit {
                return Err(CliError::Config(format!("`{item}` out of range: {} has {limit} dimensions", part.name())));
            }
            Ok((part, dim))
        })
        .collect()
}

pub struct FigureOptions {
    pub kind: FigureKind,
    pub dims: String,
    pub steps: usize,
    /// Dataset row used as the traversal source.
    pub index: usize,
}

/// Writes figure files into `out_dir` and returns their paths.
pub fn figures(run: &LoadedRun, opts: &FigureOptions, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let arch = &run.manifest.arch;
    let step = run.manifest.step;
    let mut written = Vec::new();
    match opts.kind {
        FigureKind::Heatmap => {
            if arch.mode != Mode::Supervised {
                return Err(CliError::Config("heatmap figures need a supervised checkpoint".into()));
            }
            let stem = format!("heatmap_step_{step:08}");
            write_heatmap(&bundle_heatmap(&run.bundle)?, arch.d_z, out_dir, &stem)?;
            written.extend(["csv", "png"].map(|ext| out_dir.join(format!("{stem}.{ext}"))));
        }
        FigureKind::Traversal => {
            if arch.mode != Mode::SelfSupervised {
                return Err(CliError::Config("traversal figures need a self-supervised checkpoint".into()));
            }
            if opts.steps < 2 {
                return Err(CliError::Config("traversal needs at least 2 steps".into()));
            }
            let ds = &run.eval_set;
            if opts.index >= ds.len() {
                return Err(CliError::Config(format!(
                    "image index {} out of range for {} samples",
                    opts.index,
                    ds.len()
                )));
            }
            for (part, dim) in parse_dims(&opts.dims, arch.d_z, arch.d_y)? {
                let t = latent_traversal(&run.bundle, ds.images.row(opts.index), part, dim, opts.steps)?;
                let stem = format!("traversal_step_{step:08}_{}{dim}", part.name());
                write_traversal(&t, ds.image_shape, out_dir, &stem)?;
                written.extend(["csv", "png"].map(|ext| out_dir.join(format!("{stem}.{ext}"))));
            }
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMetric {
    Error,
    Mig,
    Mse,
}

impl AblationMetric {
    fn resolve(text: &str, mode: Mode) -> Result<Self, CliError> {
        match (text.to_ascii_lowercase().as_str(), mode) {
            ("auto", Mode::Supervised) | ("error", Mode::Supervised) => Ok(AblationMetric::Error),
            ("auto", Mode::SelfSupervised) | ("mig", _) => Ok(AblationMetric::Mig),
            ("mse", Mode::SelfSupervised) => Ok(AblationMetric::Mse),
            (other, _) => Err(CliError::Config(format!(
                "ablation.metric `{other}` is not available in {mode} mode"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            AblationMetric::Error => "error_r",
            AblationMetric::Mig => "mig_r",
            AblationMetric::Mse => "mse_r",
        }
    }

    fn lower_is_better(self) -> bool {
        !matches!(self, AblationMetric::Mig)
    }

    fn plan(self) -> EvalPlan {
        EvalPlan {
            errors: self == AblationMetric::Error,
            mig: self == AblationMetric::Mig,
            reconstruction: self == AblationMetric::Mse,
            probe: false,
        }
    }

    fn extract(self, m: &RunMetrics) -> Option<f64> {
        match self {
            AblationMetric::Error => m.errors.map(|e| e.r),
            AblationMetric::Mig => m.mig.as_ref().map(|b| b.r.score),
            AblationMetric::Mse => m.reconstruction.map(|q| q.mse),
        }
    }
}

pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub text: String,
    pub manifest: ExperimentManifest,
}

/// Every variant x grid point x seed; one table row per variant with its
/// best per-point median. Rows with any failed run are marked failed.
pub fn ablation(config: &ExperimentConfig, output_dir: &Path) -> Result<AblationReport, CliError> {
    let started = Instant::now();
    let mut manifest = ExperimentManifest::new("ablation", config);
    let variants = config.variants()?;
    if variants.is_empty() || config.ablation.seeds.is_empty() {
        return Err(CliError::Config("ablation needs at least one variant and one seed".into()));
    }
    let metric = AblationMetric::resolve(&config.ablation.metric, config.mode()?)?;
    let (train_set, eval_set) = load_split(config)?;
    let base = config.train_config(train_set.image_shape, output_dir)?;
    let hp = base.hp;
    let points: Vec<GridPoint> = if config.ablation.grid.is_empty() {
        variants.iter().map(|&variant| point(variant, &hp)).collect()
    } else {
        icp_core::experiment::variant_grid(&variants, &hp, &config.ablation.grid)
    };
    fs::create_dir_all(output_dir).map_err(|e| io("cannot create output directory", output_dir, e))?;

    let jobs = run_jobs(&base, &train_set, &eval_set, &points, &config.ablation.seeds, &metric.plan())?;
    let mut runs = Vec::new();
    let mut failed: Vec<Variant> = Vec::new();
    let mut results: Vec<RunResult> = Vec::new();
    for j in jobs {
        let entry = match &j.result {
            Ok(m) => json!({"point": j.point, "seed": j.seed, "metrics": m}),
            Err(e) => json!({"point": j.point, "seed": j.seed, "error": e.to_string()}),
        };
        runs.push(entry);
        match j.result {
            Ok(metrics) => results.push(RunResult {
                point: j.point,
                seed: j.seed,
                metrics,
            }),
            Err(_) if !failed.contains(&j.point.variant) => failed.push(j.point.variant),
            Err(_) => {}
        }
    }
    let ok: Vec<RunResult> = results.into_iter().filter(|r| !failed.contains(&r.point.variant)).collect();
    let best = best_of_grid(&medians_by_point(&ok, |m| metric.extract(m)), metric.lower_is_better());
    let table = ablation_table(&best, Variant::IcpAll);
    let rows: Vec<AblationRow> = variants
        .iter()
        .map(|&v| {
            table
                .iter()
                .find(|r| r.variant == v)
                .cloned()
                .unwrap_or_else(|| AblationRow::failed(v))
        })
        .collect();

    let text = ablation_text(&rows, metric.name());
    let files = [
        ("ablation.csv", ablation_csv(&rows, metric.name())),
        ("ablation.txt", text.clone()),
        ("ablation_runs.json", serde_json::to_string_pretty(&runs).expect("runs serialize") + "\n"),
    ];
    for (name, body) in &files {
        write_file(&output_dir.join(name), body)?;
        manifest.artifacts.tables.push(PathBuf::from(name));
    }
    manifest.finished_unix_s = unix_now();
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    manifest.status = if rows.iter().any(AblationRow::is_failed) { "failed" } else { "completed" }.into();
    manifest.write(output_dir)?;
    Ok(AblationReport { rows, text, manifest })
}

fn point(variant: Variant, hp: &IcpHyperparams) -> GridPoint {
    GridPoint {
        variant,
        alpha: hp.alpha,
        beta: hp.beta,
        gamma: hp.gamma,
    }
}
