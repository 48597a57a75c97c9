//! Evaluation metrics and figure artifacts.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Real;
use crate::networks::{Head, Mode, ModelBundle};

pub const DEFAULT_MIG_BINS: usize = 20;
pub const TRAVERSAL_RANGE: (f64, f64) = (-3.0, 3.0);

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Plug-in entropy (nats) of a sequence of codes.
pub fn discrete_entropy(a: &[usize]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::contract("entropy of an empty sequence"));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    a.iter().for_each(|&v| *counts.entry(v).or_default() += 1);
    let n = a.len() as f64;
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    Ok(c.iter()
        .map(|&k| {
            let p = k as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// Plug-in mutual information (nats) of the empirical joint of `a` and `b`.
pub fn discrete_mutual_information(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "mutual information of sequences with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::contract("mutual information of empty sequences"));
    }
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pa: HashMap<usize, usize> = HashMap::new();
    let mut pb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *joint.entry((x, y)).or_default() += 1;
        *pa.entry(x).or_default() += 1;
        *pb.entry(y).or_default() += 1;
    }
    let n = a.len() as f64;
    // Sorted, and symmetric in (a, b), so the sum is order-independent.
    let mut cells: Vec<(usize, usize, usize)> = joint
        .into_iter()
        .map(|((x, y), c)| {
            let (ca, cb) = (pa[&x], pb[&y]);
            (c, ca.min(cb), ca.max(cb))
        })
        .collect();
    cells.sort_unstable();
    let mi: f64 = cells
        .iter()
        .map(|&(c, ca, cb)| {
            let p = c as f64 / n;
            p * ((c as f64 * n) / (ca as f64 * cb as f64)).ln()
        })
        .sum();
    Ok(mi.max(0.0))
}

/// Equal-occupancy bins: a value's bin is `floor(r * bins / N)` where `r`
/// is the smallest rank among values equal to it.
pub fn quantile_bins(values: ArrayView1<'_, f64>, bins: usize) -> Result<Vec<usize>> {
    if bins < 2 {
        return Err(Error::config("metrics.bins", format!("need at least 2 bins, got {bins}")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::contract("cannot bin NaN latent values"));
    }
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut codes = vec![0; n];
    let mut start = 0;
    while start < n {
        let v = values[order[start]];
        let mut end = start;
        while end < n && values[order[end]] == v {
            end += 1;
        }
        let bin = start * bins / n;
        order[start..end].iter().for_each(|&i| codes[i] = bin);
        start = end;
    }
    Ok(codes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorGap {
    pub factor: String,
    pub best_latent: usize,
    /// Normalized gap `(I_max - I_second) / H(factor)`.
    pub gap: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MIGReport {
    pub score: f64,
    pub per_factor: Vec<FactorGap>,
    pub bins: usize,
    pub n_samples: usize,
}

/// Mutual information gap of `latents` (`N x D`) against discrete
/// `factor_values` (`N x K`), over the factors listed in `factor_mask`.
pub fn mig_score(
    latents: ArrayView2<'_, f64>,
    factor_values: ArrayView2<'_, usize>,
    factor_names: &[String],
    factor_mask: &[usize],
    bins: usize,
) -> Result<MIGReport> {
    let (n, d) = latents.dim();
    if bins < 2 {
        return Err(Error::config("metrics.bins", format!("need at least 2 bins, got {bins}")));
    }
    if factor_values.nrows() != n {
        return Err(Error::contract(format!(
            "{n} latent rows but {} factor rows",
            factor_values.nrows()
        )));
    }
    if n < bins {
        return Err(Error::contract(format!("{n} samples cannot fill {bins} bins")));
    }
    if d == 0 || factor_mask.is_empty() {
        return Err(Error::contract("MIG needs at least one latent and one factor"));
    }
    if factor_names.len() != factor_values.ncols() {
        return Err(Error::contract("factor names do not match factor columns"));
    }
    if let Some(&k) = factor_mask.iter().find(|&&k| k >= factor_values.ncols()) {
        return Err(Error::contract(format!("factor index {k} out of range")));
    }

    let codes: Vec<Vec<usize>> = (0..d)
        .map(|j| quantile_bins(latents.column(j), bins))
        .collect::<Result<_>>()?;
    let mut per_factor = Vec::with_capacity(factor_mask.len());
    for &k in factor_mask {
        let f = factor_values.column(k).to_vec();
        let entropy = discrete_entropy(&f)?;
        if entropy <= 0.0 {
            return Err(Error::contract(format!("factor `{}` is constant", factor_names[k])));
        }
        let mut mi: Vec<(usize, f64)> = codes
            .iter()
            .enumerate()
            .map(|(j, c)| Ok((j, discrete_mutual_information(c, &f)?)))
            .collect::<Result<_>>()?;
        mi.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let second = mi.get(1).map_or(0.0, |m| m.1);
        per_factor.push(FactorGap {
            factor: factor_names[k].clone(),
            best_latent: mi[0].0,
            gap: (mi[0].1 - second) / entropy,
            entropy,
        });
    }
    let score = per_factor.iter().map(|g| g.gap).sum::<f64>() / per_factor.len() as f64;
    Ok(MIGReport {
        score,
        per_factor,
        bins,
        n_samples: n,
    })
}

/// `100 * (1 - accuracy)` of row-wise argmax (lowest index wins ties).
pub fn classification_error<F: Real>(logits: ArrayView2<'_, F>, labels: &[usize]) -> Result<f64> {
    if logits.nrows() == 0 {
        return Err(Error::contract("classification error of an empty batch"));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::contract(format!(
            "{} logit rows but {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    let wrong = logits
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &l)| argmax(*row) != l)
        .count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

fn argmax<F: Real>(row: ArrayView1<'_, F>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_same_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::contract(format!("shape mismatch: {a:?} vs {b:?}")));
    }
    Ok(())
}

pub fn mse(x_hat: ArrayView2<'_, f32>, x: ArrayView2<'_, f32>) -> Result<f64> {
    check_same_shape(x_hat.dim(), x.dim())?;
    if x.is_empty() {
        return Err(Error::contract("mse of empty arrays"));
    }
    let sum: f64 = x_hat.iter().zip(x).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(sum / x.len() as f64)
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

fn ssim_single(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, win: &[f64]) -> f64 {
    let (h, w) = a.dim();
    let k = win.len();
    let mut total = 0.0;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..k {
                for v in 0..k {
                    let wt = win[u] * win[v];
                    let (x, y) = (a[[i + u, j + v]], b[[i + u, j + v]]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
        }
    }
    total / ((h - k + 1) * (w - k + 1)) as f64
}

/// Mean local SSIM over valid 11x11 Gaussian windows, averaged over images
/// and channels. Rows are flattened `(C, H, W)` images.
pub fn ssim(x_hat: ArrayView2<'_, f32>, x: ArrayView2<'_, f32>, image_shape: (usize, usize, usize)) -> Result<f64> {
    check_same_shape(x_hat.dim(), x.dim())?;
    let (c, h, w) = image_shape;
    if x.ncols() != c * h * w {
        return Err(Error::contract(format!(
            "rows of length {} are not {c}x{h}x{w} images",
            x.ncols()
        )));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    if x.nrows() == 0 {
        return Err(Error::contract("ssim of an empty batch"));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    for (ra, rb) in x_hat.rows().into_iter().zip(x.rows()) {
        for ch in 0..c {
            let span = ch * h * w..(ch + 1) * h * w;
            let a = ra.slice(s![span.clone()]).mapv(f64::from).into_shape_with_order((h, w)).expect("sized");
            let b = rb.slice(s![span]).mapv(f64::from).into_shape_with_order((h, w)).expect("sized");
            // Average the two orders so the result is exactly symmetric.
            total += 0.5 * (ssim_single(a.view(), b.view(), &win) + ssim_single(b.view(), a.view(), &win));
        }
    }
    Ok(total / (x.nrows() * c) as f64)
}

/// `|W|` max-normalized per row. `weights` is `classes x (d_z + d_y)`.
pub fn weight_correlation_heatmap(weights: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = weights.mapv(f64::abs);
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(0.0, f64::max);
        if m > 0.0 {
            row.mapv_inplace(|v| v / m);
        }
    }
    out
}

/// Heatmap of the joint head's first-layer weights, transposed to
/// `classes x (d_z + d_y)` with z columns first.
pub fn bundle_heatmap<F: Real>(bundle: &ModelBundle<F>) -> Result<Array2<f64>> {
    if bundle.arch.mode != Mode::Supervised {
        return Err(Error::contract("weight heatmaps need a supervised model"));
    }
    let w = bundle.solver_input_weights(Head::R).t().mapv(Real::to_f64);
    Ok(weight_correlation_heatmap(w.view()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io("cannot create directory", parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io("cannot write", path, e))
}

fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io("cannot create directory", parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io("cannot write image", path, std::io::Error::other(e)))
}

/// Writes `stem.csv` and `stem.png` (darker cells are larger values).
pub fn write_heatmap(heatmap: &Array2<f64>, d_z: usize, dir: &Path, stem: &str) -> Result<()> {
    let (rows, cols) = heatmap.dim();
    let mut csv = String::from("class");
    for j in 0..cols {
        if j < d_z {
            write!(csv, ",z{j}").unwrap();
        } else {
            write!(csv, ",y{}", j - d_z).unwrap();
        }
    }
    csv.push('\n');
    for (i, row) in heatmap.rows().into_iter().enumerate() {
        write!(csv, "{i}").unwrap();
        for v in row {
            write!(csv, ",{v:.6}").unwrap();
        }
        csv.push('\n');
    }
    write_text(&dir.join(format!("{stem}.csv")), &csv)?;

    const CELL: u32 = 16;
    let img = GrayImage::from_fn(cols as u32 * CELL, rows as u32 * CELL, |x, y| {
        let v = heatmap[[(y / CELL) as usize, (x / CELL) as usize]].clamp(0.0, 1.0);
        Luma([(255.0 * (1.0 - v)).round() as u8])
    });
    save_png(&img, &dir.join(format!("{stem}.png")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Z,
    Y,
}

impl Part {
    pub fn name(self) -> &'static str {
        match self {
            Part::Z => "z",
            Part::Y => "y",
        }
    }
}

/// Decoded frames for one swept coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct Traversal {
    pub part: Part,
    pub dim: usize,
    pub values: Vec<f64>,
    /// Encoded value of the swept coordinate.
    pub encoded_value: f64,
    /// `steps x input_len`.
    pub frames: Array2<f32>,
    pub reconstruction: Array1<f32>,
}

/// `steps` evenly spaced values over the traversal range.
pub fn traversal_values(steps: usize) -> Vec<f64> {
    let (lo, hi) = TRAVERSAL_RANGE;
    match steps {
        0 => vec![],
        1 => vec![0.0],
        n => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

pub fn latent_traversal(bundle: &ModelBundle<f32>, x: ArrayView1<'_, f32>, part: Part, dim: usize, steps: usize) -> Result<Traversal> {
    if steps == 0 {
        return Err(Error::contract("traversal needs at least one step"));
    }
    latent_traversal_at(bundle, x, part, dim, &traversal_values(steps))
}

/// Decodes `x`'s code with coordinate `dim` of `part` replaced by each of
/// `values`; `z` is taken at its posterior mean.
pub fn latent_traversal_at(
    bundle: &ModelBundle<f32>,
    x: ArrayView1<'_, f32>,
    part: Part,
    dim: usize,
    values: &[f64],
) -> Result<Traversal> {
    if bundle.arch.mode != Mode::SelfSupervised {
        return Err(Error::contract("latent traversal needs a self-supervised model"));
    }
    let (d_z, d_y) = (bundle.arch.d_z, bundle.arch.d_y);
    let (limit, offset) = match part {
        Part::Z => (d_z, 0),
        Part::Y => (d_y, d_z),
    };
    if dim >= limit {
        return Err(Error::contract(format!(
            "{} has {limit} dimensions, cannot traverse dimension {dim}",
            part.name()
        )));
    }
    let enc = bundle.encode_mean(&x.to_owned().insert_axis(Axis(0)))?;
    let mut code = Array2::zeros((1, d_z + d_y));
    code.slice_mut(s![.., ..d_z]).assign(&enc.z_post.mean);
    code.slice_mut(s![.., d_z..]).assign(&enc.y);
    let encoded_value = code[[0, offset + dim]] as f64;
    let reconstruction = bundle.solve(Head::R, &code)?.row(0).to_owned();

    let mut codes = Array2::zeros((values.len(), d_z + d_y));
    for (i, &v) in values.iter().enumerate() {
        codes.row_mut(i).assign(&code.row(0));
        codes[[i, offset + dim]] = v as f32;
    }
    let frames = bundle.solve(Head::R, &codes)?;
    Ok(Traversal {
        part,
        dim,
        values: values.to_vec(),
        encoded_value,
        frames,
        reconstruction,
    })
}

/// Writes `stem.png` (reconstruction, then one tile per frame, left to
/// right; channels are averaged) and `stem.csv` (one row per frame).
pub fn write_traversal(t: &Traversal, image_shape: (usize, usize, usize), dir: &Path, stem: &str) -> Result<()> {
    let (c, h, w) = image_shape;
    let tiles: Vec<ArrayView1<'_, f32>> = std::iter::once(t.reconstruction.view()).chain(t.frames.rows()).collect();
    let gap = 2;
    let width = tiles.len() * (w + gap) - gap;
    let mut img = GrayImage::from_pixel(width as u32, h as u32, Luma([128]));
    for (k, tile) in tiles.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let v: f32 = (0..c).map(|ch| tile[ch * h * w + i * w + j]).sum::<f32>() / c as f32;
                let px = (255.0 * v.clamp(0.0, 1.0)).round() as u8;
                img.put_pixel((k * (w + gap) + j) as u32, i as u32, Luma([px]));
            }
        }
    }
    save_png(&img, &dir.join(format!("{stem}.png")))?;

    let mut csv = String::from("frame,value");
    for p in 0..t.frames.ncols() {
        write!(csv, ",p{p}").unwrap();
    }
    csv.push('\n');
    let mut row = |label: &str, value: f64, pixels: ArrayView1<'_, f32>| {
        write!(csv, "{label},{value}").unwrap();
        for v in pixels {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    };
    row("reconstruction", t.encoded_value, t.reconstruction.view());
    for (i, (&v, frame)) in t.values.iter().zip(t.frames.rows()).enumerate() {
        row(&i.to_string(), v, frame);
    }
    write_text(&dir.join(format!("{stem}.csv")), &csv)
}

pub fn write_mig_report(report: &MIGReport, path: &Path) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(report).expect("report serializes"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Activation, ArchSpec, TrunkKind};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mi_examples() {
        let a: Vec<usize> = (0..100).map(|i| i % 4).collect();
        assert_eq!(discrete_mutual_information(&a, &[7; 100]).unwrap(), 0.0);
        assert!((discrete_mutual_information(&a, &a).unwrap() - 4f64.ln()).abs() < 1e-12);
        // Joint counts [[2,1],[1,2]].
        let x = [0, 0, 0, 1, 1, 1];
        let y = [0, 0, 1, 0, 1, 1];
        let oracle = 2.0 * (2.0 / 6.0) * ((2.0 / 6.0) / 0.25f64).ln() + 2.0 * (1.0 / 6.0) * ((1.0 / 6.0) / 0.25f64).ln();
        assert!((discrete_mutual_information(&x, &y).unwrap() - oracle).abs() < 1e-12);
        assert!(discrete_mutual_information(&x, &y[..5]).is_err());
    }

    #[test]
    fn quantile_binning_ties_and_occupancy() {
        let v = array![3.0, 1.0, 1.0, 2.0, 5.0, 4.0, 4.0, 0.0];
        assert_eq!(quantile_bins(v.view(), 4).unwrap(), vec![2, 0, 0, 1, 3, 2, 2, 0]);
        let constant = Array1::from_elem(10, 0.5);
        assert!(quantile_bins(constant.view(), 5).unwrap().iter().all(|&c| c == 0));
        assert!(matches!(quantile_bins(v.view(), 1), Err(Error::Config { .. })));
    }

    fn grid_factors() -> Array2<usize> {
        let mut f = Array2::zeros((6 * 8, 2));
        for i in 0..48 {
            f[[i, 0]] = i / 8;
            f[[i, 1]] = i % 8;
        }
        f
    }

    #[test]
    fn mig_one_to_one_is_one() {
        let f = grid_factors();
        let latents = f.mapv(|v| v as f64);
        let names = vec!["a".to_string(), "b".to_string()];
        let r = mig_score(latents.view(), f.view(), &names, &[0, 1], 20).unwrap();
        assert!((r.score - 1.0).abs() < 1e-12, "{r:?}");
        assert_eq!(r.per_factor[1].best_latent, 1);
        assert!(matches!(mig_score(latents.view(), f.view(), &names, &[0], 1), Err(Error::Config { .. })));
    }

    #[test]
    fn mig_noise_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 10_000;
        let f = Array2::from_shape_fn((n, 2), |(i, k)| if k == 0 { i % 6 } else { (i / 6) % 16 });
        let latents = Array2::from_shape_simple_fn((n, 4), || rng.random::<f64>());
        let names = vec!["a".to_string(), "b".to_string()];
        let r = mig_score(latents.view(), f.view(), &names, &[0, 1], 20).unwrap();
        assert!(r.score < 0.05, "{r:?}");
    }

    #[test]
    fn classification_error_counts() {
        let logits = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [2.0, 1.0]];
        assert_eq!(classification_error(logits.view(), &[0, 1, 0, 1]).unwrap(), 25.0);
        assert_eq!(classification_error(logits.view(), &[0, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(classification_error(logits.view(), &[1, 0, 1, 1]).unwrap(), 100.0);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(classification_error(empty.view(), &[]).is_err());
    }

    #[test]
    fn mse_and_ssim_basics() {
        let x = Array2::from_shape_fn((2, 16 * 16), |(i, j)| ((i * 7 + j * 13) % 17) as f32 / 16.0);
        assert_eq!(mse(x.view(), x.view()).unwrap(), 0.0);
        assert_eq!(ssim(x.view(), x.view(), (1, 16, 16)).unwrap(), 1.0);
        let zeros = Array2::zeros((2, 256));
        let ones = Array2::ones((2, 256));
        assert_eq!(mse(zeros.view(), ones.view()).unwrap(), 1.0);
        assert!(mse(zeros.view(), ones.slice(s![..1, ..]).view()).is_err());
        assert!(ssim(x.view(), x.view(), (1, 8, 32)).is_err());
    }

    #[test]
    fn heatmap_examples() {
        let id = Array2::<f64>::eye(3);
        assert_eq!(weight_correlation_heatmap(id.view()), id);
        let row = array![[-2.0, 1.0], [0.0, 0.0]];
        assert_eq!(weight_correlation_heatmap(row.view()), array![[1.0, 0.5], [0.0, 0.0]]);
    }

    #[test]
    fn traversal_identity_and_errors() {
        let arch = ArchSpec {
            input_shape: (1, 4, 4),
            d_z: 3,
            d_y: 2,
            num_classes: None,
            trunk_widths: vec![8],
            mode: Mode::SelfSupervised,
            trunk: TrunkKind::Mlp,
            activation: Activation::Relu,
            disc_width: 4,
            pred_width: 4,
        };
        let bundle = ModelBundle::<f32>::build(&arch, 0).unwrap();
        let x = Array1::from_shape_fn(16, |i| (i % 3) as f32 / 2.0);
        let t = latent_traversal(&bundle, x.view(), Part::Z, 1, 7).unwrap();
        assert_eq!(t.frames.dim(), (7, 16));
        assert!(t.frames.iter().all(|v| (0.0..=1.0).contains(v)));
        let id = latent_traversal_at(&bundle, x.view(), Part::Y, 0, &[0.0]).unwrap();
        let id = latent_traversal_at(&bundle, x.view(), Part::Y, 0, &[id.encoded_value]).unwrap();
        let diff = (&id.frames.row(0) - &id.reconstruction).mapv(f32::abs).fold(0f32, |a, &b| a.max(b));
        assert!(diff <= 1e-6);
        assert!(latent_traversal(&bundle, x.view(), Part::Y, 2, 3).is_err());

        let dir = tempfile::tempdir().unwrap();
        write_traversal(&t, (1, 4, 4), dir.path(), "z1").unwrap();
        let png = image::open(dir.path().join("z1.png")).unwrap();
        assert_eq!((png.width(), png.height()), (8 * 4 + 7 * 2, 4));
    }

    proptest! {
        #[test]
        fn mi_symmetric_nonnegative_bounded(
            pairs in proptest::collection::vec((0usize..5, 0usize..4), 1..200)
        ) {
            let (a, b): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let ab = discrete_mutual_information(&a, &b).unwrap();
            let ba = discrete_mutual_information(&b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
            let bound = discrete_entropy(&a).unwrap().min(discrete_entropy(&b).unwrap());
            prop_assert!(ab <= bound + 1e-12);
        }

        #[test]
        fn mig_invariant_to_monotone_transform(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = grid_factors();
            let latents = Array2::from_shape_fn((48, 3), |(i, j)| {
                if j < 2 { f[[i, j]] as f64 + rng.random_range(-0.4..0.4) } else { rng.random_range(-1.0..1.0) }
            });
            let names = vec!["a".to_string(), "b".to_string()];
            let before = mig_score(latents.view(), f.view(), &names, &[0, 1], 5).unwrap();
            let cubed = latents.mapv(|v| v * v * v);
            let after = mig_score(cubed.view(), f.view(), &names, &[0, 1], 5).unwrap();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn ssim_symmetric_and_bounded(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Array2::from_shape_simple_fn((1, 144), || rng.random::<f32>());
            let b = Array2::from_shape_simple_fn((1, 144), || rng.random::<f32>());
            let ab = ssim(a.view(), b.view(), (1, 12, 12)).unwrap();
            prop_assert_eq!(ab, ssim(b.view(), a.view(), (1, 12, 12)).unwrap());
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn heatmap_row_scale_invariant(row in proptest::collection::vec(-5.0f64..5.0, 1..6), c in 0.01f64..100.0) {
            let w = Array2::from_shape_vec((1, row.len()), row).unwrap();
            let a = weight_correlation_heatmap(w.view());
            let b = weight_correlation_heatmap((&w * c).view());
            prop_assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
            prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
