//! Two-phase alternating optimization, checkpointing and metric logging.
//!
//! Each step first updates the discriminator and the cross predictor on
//! constant encoder outputs, then updates encoder and solvers on the
//! weighted objective with those two networks held fixed.

pub mod checkpoint;
pub mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datasets::{
    generate_synthetic, load_cache, load_dsprites, make_classification_set, Batch, BatchSampler, FactorDataset,
    FactorSpec, LabelRule, Target,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Group, Real, Var};
use crate::networks::{ArchSpec, Direction, Head, Mode, ModelBundle};
use crate::objectives::{
    assemble_loss_nodes, capped_predictability_error, js_mi_estimate, mi_min_upper_bound, predictability_loss,
    random_derangement, reconstruction_loss, shuffle_pairs, supervised_inference_loss, IcpHyperparams, TermBreakdown,
    TermNodes, INDEPENDENCE_CAP,
};

pub use checkpoint::{checkpoint_dir, load_checkpoint, save_checkpoint, CheckpointManifest};
pub use optim::Adam;

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetRef {
    Synthetic {
        spec: FactorSpec,
        /// Present for supervised sets.
        #[serde(default)]
        labels: Option<LabelSpec>,
    },
    Dsprites {
        path: PathBuf,
        #[serde(default)]
        max_samples: Option<usize>,
    },
    Cache {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSpec {
    pub num_classes: usize,
    pub rule: LabelRule,
}

impl DatasetRef {
    pub fn load(&self, seed: u64) -> Result<FactorDataset> {
        match self {
            DatasetRef::Synthetic { spec, labels: None } => generate_synthetic(spec),
            DatasetRef::Synthetic { spec, labels: Some(l) } => make_classification_set(spec, l.num_classes, &l.rule),
            DatasetRef::Dsprites { path, max_samples } => load_dsprites(path, *max_samples, seed),
            DatasetRef::Cache { path } => load_cache(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hp: IcpHyperparams,
    /// Architecture before any variant-specific widening.
    pub arch: ArchSpec,
    pub dataset: DatasetRef,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_main: f64,
    pub lr_d: f64,
    pub lr_h: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    pub output_dir: PathBuf,
    /// Discriminator updates per step.
    pub d_steps: usize,
    /// Predictor updates per step.
    pub h_steps: usize,
    /// Stop after this many logged records without a new best total.
    pub patience: Option<usize>,
    /// Write elapsed seconds into the metrics log (breaks byte-identical
    /// reruns; `wall_time_s` is `null` otherwise).
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(hp: IcpHyperparams, arch: ArchSpec, dataset: DatasetRef, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            hp,
            arch,
            dataset,
            batch_size: 64,
            steps: 1000,
            lr_main: 1e-3,
            lr_d: 1e-4,
            lr_h: 1e-4,
            seed: 0,
            log_every: 10,
            checkpoint_every: 500,
            output_dir: output_dir.into(),
            d_steps: 1,
            h_steps: 1,
            patience: None,
            record_wall_time: false,
        }
    }

    /// Architecture trained for the configured variant.
    pub fn effective_arch(&self) -> ArchSpec {
        self.hp.variant.effective_arch(&self.arch)
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.effective_arch().validate()?;
        if self.batch_size < 2 {
            return Err(Error::config("trainer.batch_size", "must be at least 2"));
        }
        for (field, lr) in [
            ("trainer.lr_main", self.lr_main),
            ("trainer.lr_d", self.lr_d),
            ("trainer.lr_h", self.lr_h),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::config(field, format!("must be positive, got {lr}")));
            }
        }
        for (field, v) in [
            ("trainer.log_every", self.log_every),
            ("trainer.checkpoint_every", self.checkpoint_every),
            ("trainer.d_steps", self.d_steps as u64),
            ("trainer.h_steps", self.h_steps as u64),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.patience == Some(0) {
            return Err(Error::config("trainer.patience", "must be positive when set"));
        }
        Ok(())
    }

    /// Rejects datasets whose images or labels do not fit the architecture.
    pub fn check_dataset(&self, ds: &FactorDataset) -> Result<()> {
        let arch = &self.arch;
        if ds.image_shape != arch.input_shape {
            return Err(Error::config(
                "arch.input_shape",
                format!("dataset images are {:?}, architecture expects {:?}", ds.image_shape, arch.input_shape),
            ));
        }
        if arch.mode == Mode::Supervised {
            match (ds.num_classes, arch.num_classes) {
                (Some(d), Some(a)) if d == a => {}
                (None, _) => return Err(Error::config("data.num_classes", "supervised training needs labels")),
                (d, a) => {
                    return Err(Error::config(
                        "arch.num_classes",
                        format!("dataset has {d:?} classes, architecture expects {a:?}"),
                    ))
                }
            }
        }
        if self.batch_size > ds.len() {
            return Err(Error::config(
                "trainer.batch_size",
                format!("batch size {} exceeds dataset size {}", self.batch_size, ds.len()),
            ));
        }
        Ok(())
    }
}

/// Model plus optimizer state: everything needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub bundle: ModelBundle<f32>,
    pub opt_main: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub opt_h: Adam<f32>,
    /// Completed steps.
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::build(&config.effective_arch(), config.seed)?;
        Ok(Self::from_bundle(bundle, config))
    }

    pub fn from_bundle(bundle: ModelBundle<f32>, config: &TrainConfig) -> Self {
        let p = &bundle.params;
        Self {
            opt_main: Adam::new(p, Group::Main, config.lr_main),
            opt_d: Adam::new(p, Group::Discriminator, config.lr_d),
            opt_h: Adam::new(p, Group::Predictor, config.lr_h),
            bundle,
            step: 0,
            seed: config.seed,
        }
    }
}

/// Randomness consumed by one step, replayable from `(seed, step)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepNoise {
    /// `batch x d_z` standard normal draws for the reparameterized `z`.
    pub noise: Array2<f32>,
    /// Derangement pairing each `x` with another sample's `y`.
    pub perm: Vec<usize>,
}

impl StepNoise {
    pub fn draw(seed: u64, step: u64, batch: usize, d_z: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(step);
        let noise = Array2::from_shape_simple_fn((batch, d_z), || StandardNormal.sample(&mut rng));
        let perm = random_derangement(&mut rng, batch)?;
        Ok(Self { noise, perm })
    }
}

/// Losses reported by one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub breakdown: TermBreakdown,
    /// Negated JS estimate minimized by the discriminator (0 if unused).
    pub d_loss: f64,
    /// Predictor loss over both directions (0 if unused).
    pub h_loss: f64,
}

fn labels_of(batch: &Batch) -> Option<&[usize]> {
    match &batch.target {
        Target::Labels(l) => Some(l),
        Target::Images(_) => None,
    }
}

/// Builds the encoder/solver objective on a fresh graph and returns the
/// graph, its total node and the term breakdown. `labels` selects
/// classification; without them every head reconstructs `x`.
pub fn main_loss<F: Real>(
    bundle: &ModelBundle<F>,
    hp: &IcpHyperparams,
    x: &Array2<F>,
    labels: Option<&[usize]>,
    noise: &Array2<F>,
    perm: &[usize],
) -> Result<(Graph<F>, Var, TermBreakdown)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let nv = g.input(noise.clone());
    let enc = bundle.encode_nodes(&mut g, xv, nv)?;
    let active = hp.variant.active();
    let task = |g: &mut Graph<F>, head: Head, rep: Var| -> Result<Var> {
        let out = bundle.solve_node(g, head, rep)?;
        match labels {
            Some(l) => supervised_inference_loss(g, out, l),
            None => reconstruction_loss(g, out, xv),
        }
    };
    let mut t = TermNodes::default();
    if active.synergy {
        let r = g.concat_cols(enc.z, enc.y)?;
        t.infer_r = Some(task(&mut g, Head::R, r)?);
    }
    if active.infer_z {
        t.infer_z = Some(task(&mut g, Head::Z, enc.z)?);
    }
    if active.infer_y {
        t.infer_y = Some(task(&mut g, Head::Y, enc.y)?);
    }
    if active.mi_min {
        t.mi_min = Some(mi_min_upper_bound(&mut g, enc.z_post)?);
    }
    if active.mi_max {
        let y_neg = shuffle_pairs(&mut g, enc.y, perm)?;
        let d_pos = bundle.discriminate_node(&mut g, enc.features, enc.y)?;
        let d_neg = bundle.discriminate_node(&mut g, enc.features, y_neg)?;
        t.js_estimate = Some(js_mi_estimate(&mut g, d_pos, d_neg)?);
    }
    if active.independence {
        let y_hat = bundle.predict_cross_node(&mut g, enc.z, Direction::ZToY)?;
        let zy = capped_predictability_error(&mut g, y_hat, enc.y, INDEPENDENCE_CAP)?;
        let z_hat = bundle.predict_cross_node(&mut g, enc.y, Direction::YToZ)?;
        let yz = capped_predictability_error(&mut g, z_hat, enc.z, INDEPENDENCE_CAP)?;
        t.pred_error = Some(g.add(zy, yz)?);
    }
    let (total, breakdown) = assemble_loss_nodes(&mut g, &t, hp)?;
    Ok((g, total, breakdown))
}

/// Discriminator objective (the JS estimate D maximizes) on constant
/// features and `y`.
pub fn discriminator_objective<F: Real>(
    bundle: &ModelBundle<F>,
    features: &Array2<F>,
    y: &Array2<F>,
    perm: &[usize],
) -> Result<(Graph<F>, Var)> {
    let mut g = Graph::new();
    let f = g.input(features.clone());
    let yv = g.input(y.clone());
    let y_neg = shuffle_pairs(&mut g, yv, perm)?;
    let d_pos = bundle.discriminate_node(&mut g, f, yv)?;
    let d_neg = bundle.discriminate_node(&mut g, f, y_neg)?;
    let js = js_mi_estimate(&mut g, d_pos, d_neg)?;
    Ok((g, js))
}

/// Predictor loss over both directions on constant `z` and `y`.
pub fn predictor_loss<F: Real>(bundle: &ModelBundle<F>, z: &Array2<F>, y: &Array2<F>) -> Result<(Graph<F>, Var)> {
    let mut g = Graph::new();
    let zv = g.input(z.clone());
    let yv = g.input(y.clone());
    let y_hat = bundle.predict_cross_node(&mut g, zv, Direction::ZToY)?;
    let zy = predictability_loss(&mut g, y_hat, yv)?;
    let z_hat = bundle.predict_cross_node(&mut g, yv, Direction::YToZ)?;
    let yz = predictability_loss(&mut g, z_hat, zv)?;
    let total = g.add(zy, yz)?;
    Ok((g, total))
}

fn diverged(step: u64, breakdown: TermBreakdown, last_finite: Option<TermBreakdown>) -> Error {
    Error::Divergence {
        step,
        breakdown: Box::new(breakdown),
        last_finite: last_finite.map(Box::new),
    }
}

/// Phase 1: discriminator and predictor updates on constant encoder
/// outputs. Returns `(d_loss, h_loss)` measured before the last update.
pub fn phase_one(state: &mut TrainState, config: &TrainConfig, batch: &Batch, rnd: &StepNoise) -> Result<(f64, f64)> {
    let active = config.hp.variant.active();
    if !(active.mi_max || active.independence) {
        return Ok((0.0, 0.0));
    }
    let enc = state.bundle.encode(&batch.x, &rnd.noise)?;
    let step = state.step + 1;
    // Phase-1 failures carry the offending loss in the breakdown fields.
    let nan = |d: f64, h: f64| {
        let b = TermBreakdown {
            mi_max: d,
            independence: -h,
            total: f64::NAN,
            ..TermBreakdown::default()
        };
        diverged(step, b, None)
    };
    let (mut d_loss, mut h_loss) = (0.0, 0.0);
    if active.mi_max {
        for _ in 0..config.d_steps {
            let (mut g, js) = discriminator_objective(&state.bundle, &enc.features, &enc.y, &rnd.perm)?;
            d_loss = -g.scalar(js).to_f64();
            if !d_loss.is_finite() {
                return Err(nan(d_loss, h_loss));
            }
            let loss = g.scale(js, -1.0);
            let grads = g.backward(loss)?;
            state.opt_d.step(&mut state.bundle.params, &grads);
        }
    }
    if active.independence {
        for _ in 0..config.h_steps {
            let (g, loss) = predictor_loss(&state.bundle, &enc.z, &enc.y)?;
            h_loss = g.scalar(loss).to_f64();
            if !h_loss.is_finite() {
                return Err(nan(d_loss, h_loss));
            }
            let grads = g.backward(loss)?;
            state.opt_h.step(&mut state.bundle.params, &grads);
        }
    }
    Ok((d_loss, h_loss))
}

/// Phase 2: encoder and solver update on the weighted objective.
pub fn phase_two(state: &mut TrainState, config: &TrainConfig, batch: &Batch, rnd: &StepNoise) -> Result<TermBreakdown> {
    let built = main_loss(&state.bundle, &config.hp, &batch.x, labels_of(batch), &rnd.noise, &rnd.perm);
    let (g, total, breakdown) = match built {
        Ok(v) => v,
        Err(Error::Divergence { breakdown, .. }) => return Err(diverged(state.step + 1, *breakdown, None)),
        Err(e) => return Err(e),
    };
    let grads = g.backward(total)?;
    state.opt_main.step(&mut state.bundle.params, &grads);
    Ok(breakdown)
}

/// One full training step on `batch`; advances `state.step`.
pub fn train_step(state: &mut TrainState, config: &TrainConfig, batch: &Batch) -> Result<StepReport> {
    if batch.x.ncols() != state.bundle.arch.input_len() {
        return Err(Error::config(
            "arch.input_shape",
            format!(
                "batch rows have {} values, architecture expects {}",
                batch.x.ncols(),
                state.bundle.arch.input_len()
            ),
        ));
    }
    let want_labels = state.bundle.arch.mode == Mode::Supervised;
    if want_labels != labels_of(batch).is_some() {
        return Err(Error::config("arch.mode", "batch targets do not match the training mode"));
    }
    let rnd = StepNoise::draw(state.seed, state.step, batch.len(), state.bundle.arch.d_z)?;
    let (d_loss, h_loss) = phase_one(state, config, batch, &rnd)?;
    let breakdown = phase_two(state, config, batch, &rnd)?;
    state.step += 1;
    Ok(StepReport {
        step: state.step,
        breakdown,
        d_loss,
        h_loss,
    })
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub total: f64,
    pub synergy: f64,
    pub mi_max: f64,
    pub mi_min: f64,
    pub infer_z: f64,
    pub infer_y: f64,
    pub independence: f64,
    pub d_loss: f64,
    pub h_loss: f64,
    pub wall_time_s: Option<f64>,
}

impl MetricsRecord {
    pub fn new(r: &StepReport, wall_time_s: Option<f64>) -> Self {
        let b = &r.breakdown;
        Self {
            step: r.step,
            total: b.total,
            synergy: b.synergy,
            mi_max: b.mi_max,
            mi_min: b.mi_min,
            infer_z: b.infer_z,
            infer_y: b.infer_y,
            independence: b.independence,
            d_loss: r.d_loss,
            h_loss: r.h_loss,
            wall_time_s,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io("cannot read metrics log", path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Ingestion(format!("{}: bad metrics record: {e}", path.display())))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    pub steps_completed: u64,
    pub stopped_early: bool,
    pub last_report: Option<StepReport>,
}

pub fn metrics_path(output_dir: &Path) -> PathBuf {
    output_dir.join("metrics.jsonl")
}

/// Runs `config.steps` steps from a fresh initialization.
pub fn train(config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = config.dataset.load(config.seed)?;
    train_on(config, &ds, None)
}

/// Continues a run from `checkpoint`; the metrics log is cut back to the
/// checkpoint's step first, so the result matches an uninterrupted run.
pub fn resume(config: &TrainConfig, checkpoint: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let ds = config.dataset.load(config.seed)?;
    train_on(config, &ds, Some(checkpoint))
}

/// [`train`] / [`resume`] with an already loaded dataset.
pub fn train_on(config: &TrainConfig, ds: &FactorDataset, checkpoint: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    config.check_dataset(ds)?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io("cannot create output directory", out, e))?;
    let log_path = metrics_path(out);

    let mut state = match checkpoint {
        None => {
            let state = TrainState::new(config)?;
            fs::write(&log_path, b"").map_err(|e| Error::io("cannot create metrics log", &log_path, e))?;
            save_checkpoint(&state, config, &checkpoint_dir(out, 0))?;
            state
        }
        Some(path) => {
            let (state, manifest) = load_checkpoint(path)?;
            manifest.check_compatible(config, path)?;
            truncate_log(&log_path, state.step)?;
            state
        }
    };

    let mut log = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .map_err(|e| Error::io("cannot open metrics log", &log_path, e))?;
    let mut sampler = BatchSampler::new(ds, config.batch_size, config.seed, config.arch.mode)?;
    let started = Instant::now();
    let mut last_finite: Option<TermBreakdown> = None;
    let mut last_report = None;
    let mut last_saved = state.step;
    let (mut best, mut stale, mut stopped_early) = (f64::INFINITY, 0usize, false);

    while state.step < config.steps {
        let batch = sampler.batch(state.step);
        let report = match train_step(&mut state, config, &batch) {
            Ok(r) => r,
            Err(Error::Divergence { step, breakdown, .. }) => {
                let diag = out.join("checkpoints").join(format!("diverged_step_{step:08}"));
                save_checkpoint(&state, config, &diag)?;
                return Err(Error::Divergence {
                    step,
                    breakdown,
                    last_finite: last_finite.map(Box::new),
                });
            }
            Err(e) => return Err(e),
        };
        last_finite = Some(report.breakdown);
        last_report = Some(report);

        if state.step % config.log_every == 0 {
            let wall = config.record_wall_time.then(|| started.elapsed().as_secs_f64());
            let line = serde_json::to_string(&MetricsRecord::new(&report, wall)).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io("cannot append to metrics log", &log_path, e))?;
            if let Some(p) = config.patience {
                if report.breakdown.total < best {
                    (best, stale) = (report.breakdown.total, 0);
                } else {
                    stale += 1;
                    stopped_early = stale >= p;
                }
            }
        }
        if state.step % config.checkpoint_every == 0 {
            save_checkpoint(&state, config, &checkpoint_dir(out, state.step))?;
            last_saved = state.step;
        }
        if stopped_early {
            break;
        }
    }
    log.flush().map_err(|e| Error::io("cannot flush metrics log", &log_path, e))?;
    let final_checkpoint = checkpoint_dir(out, state.step);
    if last_saved != state.step || !final_checkpoint.exists() {
        save_checkpoint(&state, config, &final_checkpoint)?;
    }
    Ok(TrainOutcome {
        final_checkpoint,
        metrics_log: log_path,
        steps_completed: state.step,
        stopped_early,
        last_report,
    })
}

fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let keep: Vec<String> = if path.exists() {
        let text = fs::read_to_string(path).map_err(|e| Error::io("cannot read metrics log", path, e))?;
        text.lines()
            .filter(|l| {
                serde_json::from_str::<MetricsRecord>(l)
                    .map(|r| r.step <= step)
                    .unwrap_or(false)
            })
            .map(|l| format!("{l}\n"))
            .collect()
    } else {
        Vec::new()
    };
    fs::write(path, keep.concat()).map_err(|e| Error::io("cannot rewrite metrics log", path, e))
}

/// Trains in memory without touching the filesystem; returns the final
/// state and every step's report.
pub fn train_in_memory(config: &TrainConfig, ds: &FactorDataset) -> Result<(TrainState, Vec<StepReport>)> {
    config.validate()?;
    config.check_dataset(ds)?;
    let mut state = TrainState::new(config)?;
    let mut sampler = BatchSampler::new(ds, config.batch_size, config.seed, config.arch.mode)?;
    let mut reports = Vec::with_capacity(config.steps as usize);
    while state.step < config.steps {
        let batch = sampler.batch(state.step);
        reports.push(train_step(&mut state, config, &batch)?);
    }
    Ok((state, reports))
}

/// Posterior-mean `[z, y]` codes of every row of `images`, in chunks.
pub fn encode_dataset(bundle: &ModelBundle<f32>, images: &Array2<f32>, chunk: usize) -> Result<(Array2<f32>, Array2<f32>)> {
    let (mut zs, mut ys) = (Vec::new(), Vec::new());
    for block in images.axis_chunks_iter(Axis(0), chunk.max(1)) {
        let enc = bundle.encode_mean(&block.to_owned())?;
        zs.push(enc.z_post.mean);
        ys.push(enc.y);
    }
    let cat = |parts: &[Array2<f32>], d: usize| {
        if parts.is_empty() {
            return Array2::zeros((0, d));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("matching widths")
    };
    Ok((cat(&zs, bundle.arch.d_z), cat(&ys, bundle.arch.d_y)))
}

#[cfg(test)]
mod tests;
