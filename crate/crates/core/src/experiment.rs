//! Evaluation of trained bundles and seeded hyperparameter sweeps.

use std::fmt::Write as _;

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::FactorDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Group};
use crate::metrics::{classification_error, mig_score, mse, ssim, MIGReport, DEFAULT_MIG_BINS};
use crate::networks::{Direction, Head, Mode, ModelBundle};
use crate::objectives::{predictability_loss, IcpHyperparams, Variant};
use crate::trainer::{encode_dataset, train_in_memory, Adam, TrainConfig};

/// Upper bound on rows used for MIG estimation.
pub const MIG_SAMPLES: usize = 10_000;
const ENCODE_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadErrors {
    pub z: f64,
    pub y: f64,
    pub r: f64,
}

/// Classification error (%) of each head on `ds`, with `z` at its
/// posterior mean.
pub fn head_errors(bundle: &ModelBundle<f32>, ds: &FactorDataset) -> Result<HeadErrors> {
    if bundle.arch.mode != Mode::Supervised {
        return Err(Error::contract("classification error needs a supervised model"));
    }
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| Error::contract("classification error needs a labeled dataset"))?;
    let (z, y) = encode_dataset(bundle, &ds.images, ENCODE_CHUNK)?;
    let r = concatenate(Axis(1), &[z.view(), y.view()]).expect("same rows");
    let err = |head: Head, rep: &Array2<f32>| classification_error(bundle.solve(head, rep)?.view(), labels);
    Ok(HeadErrors {
        z: err(Head::Z, &z)?,
        y: err(Head::Y, &y)?,
        r: err(Head::R, &r)?,
    })
}

/// MIG of `z`, `y` and the concatenation `r`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigBlock {
    pub z: MIGReport,
    pub y: MIGReport,
    pub r: MIGReport,
}

fn sample_rows(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = idx[..max].to_vec();
    keep.sort_unstable();
    keep
}

/// MIG over the dataset's scored factors using posterior means. Small
/// datasets use at most one bin per sample.
pub fn mig_reports(bundle: &ModelBundle<f32>, ds: &FactorDataset, bins: usize, seed: u64) -> Result<MigBlock> {
    let rows = sample_rows(ds.len(), MIG_SAMPLES, seed);
    let sub = ds.subset(&rows);
    let bins = bins.min(sub.len());
    let (z, y) = encode_dataset(bundle, &sub.images, ENCODE_CHUNK)?;
    let (z, y) = (z.mapv(f64::from), y.mapv(f64::from));
    let r = concatenate(Axis(1), &[z.view(), y.view()]).expect("same rows");
    let mask = sub.scored_factors();
    let mig = |lat: &Array2<f64>| mig_score(lat.view(), sub.factor_values.view(), &sub.factor_names, &mask, bins);
    Ok(MigBlock {
        z: mig(&z)?,
        y: mig(&y)?,
        r: mig(&r)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionQuality {
    pub mse: f64,
    pub ssim: Option<f64>,
}

/// MSE (and SSIM when images are large enough) of one decoder on up to
/// `max_rows` rows.
pub fn reconstruction_quality(
    bundle: &ModelBundle<f32>,
    ds: &FactorDataset,
    head: Head,
    max_rows: usize,
    seed: u64,
) -> Result<ReconstructionQuality> {
    if bundle.arch.mode != Mode::SelfSupervised {
        return Err(Error::contract("reconstruction metrics need a self-supervised model"));
    }
    let rows = sample_rows(ds.len(), max_rows, seed);
    let x = ds.images.select(Axis(0), &rows);
    let (z, y) = encode_dataset(bundle, &x, ENCODE_CHUNK)?;
    let x_hat = match head {
        Head::Z => bundle.solve(head, &z)?,
        Head::Y => bundle.solve(head, &y)?,
        Head::R => bundle.solve(head, &concatenate(Axis(1), &[z.view(), y.view()]).expect("same rows"))?,
    };
    let (_, h, w) = ds.image_shape;
    let ssim = if h >= 11 && w >= 11 {
        Some(ssim(x_hat.view(), x.view(), ds.image_shape)?)
    } else {
        None
    };
    Ok(ReconstructionQuality {
        mse: mse(x_hat.view(), x.view())?,
        ssim,
    })
}

/// Settings of the post-hoc independence probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Trains a fresh predictor `z -> y` on the frozen encoder's posterior-mean
/// codes and returns its mean squared error per `y` coordinate over the
/// (sampled) dataset. Both codes are standardized per coordinate first, so
/// the result is comparable across runs whose `y` scales differ; a constant
/// coordinate stays centred at zero.
pub fn probe_predictability(bundle: &ModelBundle<f32>, ds: &FactorDataset, settings: &ProbeSettings) -> Result<f64> {
    let rows = sample_rows(ds.len(), MIG_SAMPLES, settings.seed);
    let (z, y) = encode_dataset(bundle, &ds.images.select(Axis(0), &rows), ENCODE_CHUNK)?;
    let (z, y) = (standardize(z), standardize(y));
    let n = z.nrows();
    let bs = settings.batch_size.min(n);
    if bs == 0 {
        return Err(Error::contract("probe needs at least one sample"));
    }
    let mut probe = ModelBundle::<f32>::build(&bundle.arch, settings.seed ^ 0x9e37_79b9_7f4a_7c15)?;
    let mut opt = Adam::new(&probe.params, Group::Predictor, settings.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    for _ in 0..settings.steps {
        if cursor + bs > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bs];
        cursor += bs;
        let mut g = Graph::new();
        let zv = g.input(z.select(Axis(0), idx));
        let yv = g.input(y.select(Axis(0), idx));
        let pred = probe.predict_cross_node(&mut g, zv, Direction::ZToY)?;
        let loss = predictability_loss(&mut g, pred, yv)?;
        let grads = g.backward(loss)?;
        opt.step(&mut probe.params, &grads);
    }
    let pred = probe.predict_cross(&z, Direction::ZToY)?;
    mse(pred.view(), y.view())
}

fn standardize(mut a: Array2<f32>) -> Array2<f32> {
    for mut col in a.columns_mut() {
        let n = col.len().max(1) as f64;
        let mean = col.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = col.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        col.mapv_inplace(|v| ((v as f64 - mean) / scale) as f32);
    }
    a
}

/// One hyperparameter setting of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub variant: Variant,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl GridPoint {
    pub fn hp(&self) -> IcpHyperparams {
        IcpHyperparams {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            variant: self.variant,
        }
    }

    pub fn label(&self) -> String {
        format!("{} a={} b={} g={}", self.variant, self.alpha, self.beta, self.gamma)
    }
}

/// The sweep: `beta` over `grid` for variants with a KL term, `gamma` over
/// `grid` for variants with the independence term; other weights stay at
/// `base`.
pub fn variant_grid(variants: &[Variant], base: &IcpHyperparams, grid: &[f64]) -> Vec<GridPoint> {
    let mut points = Vec::new();
    for &variant in variants {
        let active = variant.active();
        let betas = if active.mi_min { grid.to_vec() } else { vec![base.beta] };
        let gammas = if active.independence { grid.to_vec() } else { vec![base.gamma] };
        for &beta in &betas {
            for &gamma in &gammas {
                points.push(GridPoint {
                    variant,
                    alpha: base.alpha,
                    beta,
                    gamma,
                });
            }
        }
    }
    points
}

/// Everything measured after one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub errors: Option<HeadErrors>,
    pub mig: Option<MigBlock>,
    pub reconstruction: Option<ReconstructionQuality>,
    pub probe_mse: Option<f64>,
}

/// Which evaluations to run after training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalPlan {
    pub errors: bool,
    pub mig: bool,
    pub reconstruction: bool,
    pub probe: bool,
}

pub fn evaluate(bundle: &ModelBundle<f32>, ds: &FactorDataset, plan: &EvalPlan, seed: u64) -> Result<RunMetrics> {
    Ok(RunMetrics {
        errors: plan.errors.then(|| head_errors(bundle, ds)).transpose()?,
        mig: plan.mig.then(|| mig_reports(bundle, ds, DEFAULT_MIG_BINS, seed)).transpose()?,
        reconstruction: plan
            .reconstruction
            .then(|| reconstruction_quality(bundle, ds, Head::R, 512, seed))
            .transpose()?,
        probe_mse: plan
            .probe
            .then(|| probe_predictability(bundle, ds, &ProbeSettings { seed, ..ProbeSettings::default() }))
            .transpose()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub point: GridPoint,
    pub seed: u64,
    pub metrics: RunMetrics,
}

/// Worker count for sweeps: `ICP_LAB_THREADS` if set, else all cores.
pub fn sweep_threads() -> usize {
    std::env::var("ICP_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One `(point, seed)` job of a sweep, kept even when it failed.
#[derive(Debug)]
pub struct JobOutcome {
    pub point: GridPoint,
    pub seed: u64,
    pub result: Result<RunMetrics>,
}

/// Trains on `train` and evaluates on `eval` for every `(point, seed)` pair.
/// Jobs are independent and come back in input order regardless of thread
/// count; a failed job does not stop the others.
pub fn run_jobs(
    base: &TrainConfig,
    train: &FactorDataset,
    eval: &FactorDataset,
    points: &[GridPoint],
    seeds: &[u64],
    plan: &EvalPlan,
) -> Result<Vec<JobOutcome>> {
    let jobs: Vec<(GridPoint, u64)> = points
        .iter()
        .flat_map(|&p| seeds.iter().map(move |&s| (p, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads())
        .build()
        .map_err(|e| Error::contract(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|&(point, seed)| {
                let mut cfg = base.clone();
                cfg.hp = point.hp();
                cfg.seed = seed;
                let result = train_in_memory(&cfg, train).and_then(|(state, _)| evaluate(&state.bundle, eval, plan, seed));
                JobOutcome { point, seed, result }
            })
            .collect()
    }))
}

/// [`run_jobs`], failing on the first failed job.
pub fn run_sweep(
    base: &TrainConfig,
    train: &FactorDataset,
    eval: &FactorDataset,
    points: &[GridPoint],
    seeds: &[u64],
    plan: &EvalPlan,
) -> Result<Vec<RunResult>> {
    run_jobs(base, train, eval, points, seeds, plan)?
        .into_iter()
        .map(|j| {
            Ok(RunResult {
                point: j.point,
                seed: j.seed,
                metrics: j.result?,
            })
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Median over seeds of `metric` for each grid point, in first-seen order.
pub fn medians_by_point(results: &[RunResult], metric: impl Fn(&RunMetrics) -> Option<f64>) -> Vec<(GridPoint, f64)> {
    let mut points: Vec<GridPoint> = Vec::new();
    for r in results {
        if !points.contains(&r.point) {
            points.push(r.point);
        }
    }
    points
        .into_iter()
        .map(|p| {
            let vals: Vec<f64> = results
                .iter()
                .filter(|r| r.point == p)
                .filter_map(|r| metric(&r.metrics))
                .collect();
            (p, median(&vals))
        })
        .collect()
}

/// Best (largest, or smallest when `lower_is_better`) per-point median for
/// each variant.
pub fn best_of_grid(medians: &[(GridPoint, f64)], lower_is_better: bool) -> Vec<(Variant, GridPoint, f64)> {
    let mut best: Vec<(Variant, GridPoint, f64)> = Vec::new();
    for &(p, v) in medians {
        let better = |old: f64| if lower_is_better { v < old } else { v > old };
        match best.iter_mut().find(|b| b.0 == p.variant) {
            Some(b) if better(b.2) => *b = (p.variant, p, v),
            Some(_) => {}
            None => best.push((p.variant, p, v)),
        }
    }
    best
}

/// Ablation table row: a variant's best grid point and its difference from
/// the reference variant (normally ICP_ALL). Failed rows carry no values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub point: Option<GridPoint>,
    pub value: Option<f64>,
    pub delta: Option<f64>,
}

impl AblationRow {
    pub fn failed(variant: Variant) -> Self {
        Self {
            variant,
            point: None,
            value: None,
            delta: None,
        }
    }

    pub fn is_failed(&self) -> bool {
        self.value.is_none()
    }
}

pub fn ablation_table(best: &[(Variant, GridPoint, f64)], reference: Variant) -> Vec<AblationRow> {
    let base = best.iter().find(|b| b.0 == reference).map(|b| b.2);
    best.iter()
        .map(|&(variant, point, value)| AblationRow {
            variant,
            point: Some(point),
            value: Some(value),
            delta: base.map(|b| value - b),
        })
        .collect()
}

fn cell(v: Option<f64>, f: impl Fn(f64) -> String) -> String {
    v.map(f).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow], metric: &str) -> String {
    let mut out = format!("variant,alpha,beta,gamma,{metric},delta,status\n");
    for r in rows {
        let p = |f: fn(&GridPoint) -> f64| cell(r.point.as_ref().map(f), |v| v.to_string());
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.variant,
            p(|p| p.alpha),
            p(|p| p.beta),
            p(|p| p.gamma),
            cell(r.value, |v| format!("{v:.6}")),
            cell(r.delta, |v| format!("{v:.6}")),
            if r.is_failed() { "failed" } else { "ok" }
        )
        .unwrap();
    }
    out
}

pub fn ablation_text(rows: &[AblationRow], metric: &str) -> String {
    let mut out = format!("{:<12} {:>8} {:>8} {:>8} {:>10} {:>10}\n", "variant", "alpha", "beta", "gamma", metric, "delta");
    for r in rows {
        let dash = || "-".to_string();
        let p = |f: fn(&GridPoint) -> f64| r.point.as_ref().map(|q| f(q).to_string()).unwrap_or_else(dash);
        writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8} {:>10} {:>10}",
            r.variant.name(),
            p(|p| p.alpha),
            p(|p| p.beta),
            p(|p| p.gamma),
            r.value.map(|v| format!("{v:.4}")).unwrap_or_else(|| "FAILED".into()),
            r.delta.map(|d| format!("{d:+.4}")).unwrap_or_else(dash)
        )
        .unwrap();
    }
    out
}

/// First `n` rows of `x` as a separate array (evaluation helper).
pub fn head_rows(x: &Array2<f32>, n: usize) -> Array2<f32> {
    x.slice(s![..n.min(x.nrows()), ..]).to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{make_classification_set, FactorKind, FactorSpec, LabelRule, Renderer};
    use crate::networks::{Activation, ArchSpec, TrunkKind};
    use crate::trainer::{DatasetRef, LabelSpec};

    #[test]
    fn grid_shapes() {
        let base = IcpHyperparams::default();
        let grid = [0.01, 0.1, 1.0];
        let pts = variant_grid(&[Variant::IcpAll, Variant::IcpCom, Variant::Icp], &base, &grid);
        let count = |v| pts.iter().filter(|p| p.variant == v).count();
        assert_eq!((count(Variant::IcpAll), count(Variant::IcpCom), count(Variant::Icp)), (1, 3, 9));
    }

    #[test]
    fn median_and_best() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let p = |variant, beta| GridPoint {
            variant,
            alpha: 1e-3,
            beta,
            gamma: 0.1,
        };
        let meds = vec![(p(Variant::Icp, 0.1), 0.3), (p(Variant::Icp, 1.0), 0.5), (p(Variant::IcpAll, 0.1), 0.2)];
        let best = best_of_grid(&meds, false);
        assert_eq!(best[0].2, 0.5);
        let mut rows = ablation_table(&best, Variant::IcpAll);
        assert!((rows[0].delta.unwrap() - 0.3).abs() < 1e-12);
        rows.push(AblationRow::failed(Variant::Vib));
        let csv = ablation_csv(&rows, "mig");
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.ends_with("VIB,,,,,,failed\n"), "{csv}");
        let text = ablation_text(&rows, "mig");
        assert!(text.contains("ICP_ALL") && text.contains("FAILED"));
    }

    #[test]
    fn sweep_is_deterministic_and_ordered() {
        let spec = FactorSpec::new(&[(FactorKind::PosX, 4), (FactorKind::PosY, 4)], (16, 16), Renderer::Square);
        let labels = LabelSpec {
            num_classes: 2,
            rule: LabelRule::FactorModulo { factor: FactorKind::PosX },
        };
        let ds = make_classification_set(&spec, 2, &labels.rule).unwrap();
        let arch = ArchSpec {
            input_shape: (1, 16, 16),
            d_z: 2,
            d_y: 2,
            num_classes: Some(2),
            trunk_widths: vec![8],
            mode: Mode::Supervised,
            trunk: TrunkKind::Mlp,
            activation: Activation::Relu,
            disc_width: 4,
            pred_width: 4,
        };
        let mut cfg = TrainConfig::new(
            IcpHyperparams::default(),
            arch,
            DatasetRef::Synthetic { spec, labels: Some(labels) },
            "unused",
        );
        cfg.batch_size = 8;
        cfg.steps = 5;
        let pts = variant_grid(&[Variant::IcpAll, Variant::Icp], &IcpHyperparams::default(), &[0.1]);
        let plan = EvalPlan {
            errors: true,
            mig: true,
            probe: true,
            ..EvalPlan::default()
        };
        let a = run_sweep(&cfg, &ds, &ds, &pts, &[0, 1], &plan).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!((a[0].point.variant, a[0].seed, a[3].seed), (Variant::IcpAll, 0, 1));
        assert_eq!(a, run_sweep(&cfg, &ds, &ds, &pts, &[0, 1], &plan).unwrap());
        assert!(a.iter().all(|r| r.metrics.errors.is_some() && r.metrics.probe_mse.unwrap() >= 0.0));
    }
}
