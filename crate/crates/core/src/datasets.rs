//! Factor-controlled sprite images, dSprites ingestion, labeled
//! classification sets, and seed-deterministic batching.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Mode;

/// Number of images in the published dSprites archive.
pub const DSPRITES_LEN: usize = 737_280;
/// dSprites factor cardinalities: shape, scale, rotation, posX, posY.
pub const DSPRITES_CARDINALITIES: [usize; 5] = [3, 6, 40, 32, 32];
const DSPRITES_NAMES: [&str; 5] = ["shape", "scale", "rotation", "posX", "posY"];

/// Stream offset separating batch shuffles from per-step training noise.
const EPOCH_STREAM: u64 = 1 << 63;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FactorKind {
    #[serde(rename = "scale")]
    Scale,
    #[serde(rename = "rotation")]
    Rotation,
    #[serde(rename = "posX")]
    PosX,
    #[serde(rename = "posY")]
    PosY,
}

impl FactorKind {
    pub fn name(self) -> &'static str {
        match self {
            FactorKind::Scale => "scale",
            FactorKind::Rotation => "rotation",
            FactorKind::PosX => "posX",
            FactorKind::PosY => "posY",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "").as_str() {
            "scale" => Ok(FactorKind::Scale),
            "rotation" | "orientation" => Ok(FactorKind::Rotation),
            "posx" => Ok(FactorKind::PosX),
            "posy" => Ok(FactorKind::PosY),
            other => Err(Error::config(
                "data.factors",
                format!("unknown factor `{other}` (expected scale, rotation, posX, posY)"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renderer {
    Square,
    Ellipse,
}

/// Quantized generative factors and the canvas they are rendered on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSpec {
    /// Ordered `(factor, cardinality)` pairs; the first varies slowest.
    pub factors: Vec<(FactorKind, usize)>,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    pub renderer: Renderer,
}

impl FactorSpec {
    pub fn new(factors: &[(FactorKind, usize)], image_size: (usize, usize), renderer: Renderer) -> Self {
        Self {
            factors: factors.to_vec(),
            image_size,
            renderer,
        }
    }

    pub fn len(&self) -> usize {
        self.factors.iter().map(|&(_, c)| c).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h < 4 || w < 4 {
            return Err(Error::config("data.image_size", "images must be at least 4x4"));
        }
        for (i, &(kind, card)) in self.factors.iter().enumerate() {
            if card < 2 {
                return Err(Error::config(
                    "data.factors",
                    format!("factor `{}` needs cardinality >= 2, got {card}", kind.name()),
                ));
            }
            if self.factors[..i].iter().any(|&(k, _)| k == kind) {
                return Err(Error::config("data.factors", format!("factor `{}` listed twice", kind.name())));
            }
        }
        let geom = Geometry::new(self);
        for (kind, card) in &self.factors {
            geom.check_resolution(*kind, *card)?;
        }
        Ok(())
    }

    fn cardinality(&self, kind: FactorKind) -> Option<usize> {
        self.factors.iter().find(|&&(k, _)| k == kind).map(|&(_, c)| c)
    }
}

/// Maps factor indices to sprite placement.
///
/// Sides grow linearly from 10% to 25% of the short image edge, centres
/// sweep 20%..80% of each axis, and rotation covers one full turn.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    scale: Option<usize>,
    rotation: Option<usize>,
    pos_x: Option<usize>,
    pos_y: Option<usize>,
}

impl Geometry {
    fn new(spec: &FactorSpec) -> Self {
        Self {
            h: spec.image_size.0,
            w: spec.image_size.1,
            scale: spec.cardinality(FactorKind::Scale),
            rotation: spec.cardinality(FactorKind::Rotation),
            pos_x: spec.cardinality(FactorKind::PosX),
            pos_y: spec.cardinality(FactorKind::PosY),
        }
    }

    fn side(&self, idx: usize) -> usize {
        let short = self.h.min(self.w) as f64;
        let (lo, hi) = (0.10 * short, 0.25 * short);
        let t = match self.scale {
            Some(n) => idx as f64 / (n - 1) as f64,
            None => 0.5,
        };
        ((lo + t * (hi - lo)).round() as usize).max(1)
    }

    fn centre_fraction(card: Option<usize>, idx: usize) -> f64 {
        match card {
            Some(n) => 0.2 + 0.6 * idx as f64 / (n - 1) as f64,
            None => 0.5,
        }
    }

    /// Integer top-left corner of the unrotated sprite box along one axis.
    fn origin(extent: usize, card: Option<usize>, idx: usize, side: usize) -> i64 {
        (Self::centre_fraction(card, idx) * extent as f64 - side as f64 / 2.0).round() as i64
    }

    fn angle(&self, idx: usize) -> f64 {
        match self.rotation {
            Some(n) => 2.0 * std::f64::consts::PI * idx as f64 / n as f64,
            None => 0.0,
        }
    }

    fn check_resolution(&self, kind: FactorKind, card: usize) -> Result<()> {
        let distinct = |vals: Vec<i64>| {
            let mut v = vals.clone();
            v.dedup();
            v.len() == vals.len()
        };
        let ok = match kind {
            FactorKind::Scale => distinct((0..card).map(|i| self.side(i) as i64).collect()),
            FactorKind::PosX => 0.6 * self.w as f64 / (card - 1) as f64 >= 1.0,
            FactorKind::PosY => 0.6 * self.h as f64 / (card - 1) as f64 >= 1.0,
            FactorKind::Rotation => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(
                "data.factors",
                format!(
                    "factor `{}` with {card} values is not resolvable on a {}x{} canvas",
                    kind.name(),
                    self.h,
                    self.w
                ),
            ))
        }
    }
}

/// Images paired with ground-truth factor indices.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDataset {
    /// `N x (C*H*W)`, values in `[0, 1]`.
    pub images: Array2<f32>,
    /// `(C, H, W)`.
    pub image_shape: (usize, usize, usize),
    /// `N x K` factor indices.
    pub factor_values: Array2<usize>,
    pub factor_names: Vec<String>,
    pub factor_cardinalities: Vec<usize>,
    /// Factors excluded from disentanglement scoring.
    pub nuisance: Vec<bool>,
    pub spec: Option<FactorSpec>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: Option<usize>,
}

impl FactorDataset {
    pub fn len(&self) -> usize {
        self.images.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.nrows() == 0
    }

    /// Indices of the factors that count toward disentanglement scores.
    pub fn scored_factors(&self) -> Vec<usize> {
        (0..self.factor_names.len()).filter(|&k| !self.nuisance[k]).collect()
    }

    pub fn class_counts(&self) -> Option<Vec<usize>> {
        let (labels, c) = (self.labels.as_ref()?, self.num_classes?);
        let mut counts = vec![0; c];
        labels.iter().for_each(|&l| counts[l] += 1);
        Some(counts)
    }

    /// Rows `index` as a new dataset (same metadata).
    pub fn subset(&self, index: &[usize]) -> Self {
        Self {
            images: self.images.select(Axis(0), index),
            factor_values: self.factor_values.select(Axis(0), index),
            labels: self.labels.as_ref().map(|l| index.iter().map(|&i| l[i]).collect()),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Self {
        Self {
            images: Array2::zeros((0, self.images.ncols())),
            image_shape: self.image_shape,
            factor_values: Array2::zeros((0, self.factor_values.ncols())),
            factor_names: self.factor_names.clone(),
            factor_cardinalities: self.factor_cardinalities.clone(),
            nuisance: self.nuisance.clone(),
            spec: self.spec.clone(),
            labels: None,
            num_classes: self.num_classes,
        }
    }

    /// Deterministic `(train, test)` split with `test_fraction` of the rows
    /// held out.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::config("data.test_fraction", "must lie in [0, 1)"));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.len() as f64 * test_fraction).round() as usize;
        let (test, train) = idx.split_at(n_test);
        let (mut train, mut test) = (train.to_vec(), test.to_vec());
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

/// Renders every factor combination, in row-major order over factor indices.
pub fn generate_synthetic(spec: &FactorSpec) -> Result<FactorDataset> {
    spec.validate()?;
    let (h, w) = spec.image_size;
    let cards: Vec<usize> = spec.factors.iter().map(|&(_, c)| c).collect();
    let n = spec.len();
    let geom = Geometry::new(spec);
    let rendered: Vec<(Vec<usize>, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|flat| {
            let idx = unravel(flat, &cards);
            let img = render(spec, &geom, &idx)?;
            Ok((idx, img))
        })
        .collect::<Result<_>>()?;

    let k = cards.len();
    let mut images = Array2::zeros((n, h * w));
    let mut factor_values = Array2::zeros((n, k));
    for (i, (idx, img)) in rendered.into_iter().enumerate() {
        images.row_mut(i).assign(&ndarray::ArrayView1::from(&img));
        factor_values.row_mut(i).assign(&ndarray::ArrayView1::from(&idx));
    }
    Ok(FactorDataset {
        images,
        image_shape: (1, h, w),
        factor_values,
        factor_names: spec.factors.iter().map(|(k, _)| k.name().to_string()).collect(),
        factor_cardinalities: cards,
        nuisance: vec![false; k],
        spec: Some(spec.clone()),
        labels: None,
        num_classes: None,
    })
}

fn unravel(mut flat: usize, cards: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; cards.len()];
    for (slot, &c) in idx.iter_mut().zip(cards).rev() {
        *slot = flat % c;
        flat /= c;
    }
    idx
}

fn render(spec: &FactorSpec, geom: &Geometry, idx: &[usize]) -> Result<Vec<f32>> {
    let get = |kind: FactorKind| {
        spec.factors
            .iter()
            .position(|&(k, _)| k == kind)
            .map(|p| idx[p])
            .unwrap_or(0)
    };
    let (h, w) = (geom.h, geom.w);
    let side = geom.side(get(FactorKind::Scale));
    let left = Geometry::origin(w, geom.pos_x, get(FactorKind::PosX), side);
    let top = Geometry::origin(h, geom.pos_y, get(FactorKind::PosY), side);
    let theta = geom.angle(get(FactorKind::Rotation));
    let (cy, cx) = (top as f64 + side as f64 / 2.0, left as f64 + side as f64 / 2.0);

    let combo = || {
        spec.factors
            .iter()
            .zip(idx)
            .map(|((k, _), i)| format!("{}={i}", k.name()))
            .collect::<Vec<_>>()
            .join(", ")
    };
    // Half-extent of the (possibly rotated) sprite's bounding box.
    let (cos, sin) = (theta.cos(), theta.sin());
    let (half_w, half_h) = match spec.renderer {
        Renderer::Square => {
            let e = side as f64 / 2.0 * (cos.abs() + sin.abs());
            (e, e)
        }
        Renderer::Ellipse => {
            let (a, b) = (side as f64 / 2.0, side as f64 / 4.0);
            (
                ((a * cos).powi(2) + (b * sin).powi(2)).sqrt(),
                ((a * sin).powi(2) + (b * cos).powi(2)).sqrt(),
            )
        }
    };
    let tol = 1e-9;
    if cx - half_w < -tol || cy - half_h < -tol || cx + half_w > w as f64 + tol || cy + half_h > h as f64 + tol {
        return Err(Error::Generation(format!("sprite leaves the {h}x{w} frame at ({})", combo())));
    }

    let mut img = vec![0f32; h * w];
    match spec.renderer {
        Renderer::Square if theta == 0.0 => {
            for i in top as usize..top as usize + side {
                img[i * w + left as usize..i * w + left as usize + side].fill(1.0);
            }
        }
        Renderer::Square => {
            // Bilinear sample of the upright square at inverse-rotated pixel centres.
            let inside = |i: i64, j: i64| i >= top && i < top + side as i64 && j >= left && j < left + side as i64;
            for i in 0..h {
                for j in 0..w {
                    let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                    let sy = cy + (-sin * dx + cos * dy) - 0.5;
                    let sx = cx + (cos * dx + sin * dy) - 0.5;
                    let (y0, x0) = (sy.floor(), sx.floor());
                    let (fy, fx) = (sy - y0, sx - x0);
                    let (y0, x0) = (y0 as i64, x0 as i64);
                    let px = |yy: i64, xx: i64| if inside(yy, xx) { 1.0 } else { 0.0 };
                    let v = (1.0 - fy) * ((1.0 - fx) * px(y0, x0) + fx * px(y0, x0 + 1))
                        + fy * ((1.0 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
                    img[i * w + j] = v as f32;
                }
            }
        }
        Renderer::Ellipse => {
            let (a, b) = (side as f64 / 2.0, side as f64 / 4.0);
            for i in 0..h {
                for j in 0..w {
                    let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                    let u = cos * dx + sin * dy;
                    let v = -sin * dx + cos * dy;
                    if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                        img[i * w + j] = 1.0;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// How factor tuples map to class labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LabelRule {
    /// `index(factor) mod num_classes`.
    FactorModulo { factor: FactorKind },
    /// Which half of the canvas the sprite centre falls in, along posX and
    /// posY: `2 * [posY upper half] + [posX upper half]`.
    Quadrant,
}

impl LabelRule {
    fn label(&self, spec: &FactorSpec, idx: &[usize], num_classes: usize) -> Result<usize> {
        let index_of = |kind: FactorKind| {
            spec.factors
                .iter()
                .position(|&(k, _)| k == kind)
                .map(|p| (idx[p], spec.factors[p].1))
                .ok_or_else(|| Error::config("data.label_rule", format!("factor `{}` not in dataset", kind.name())))
        };
        match self {
            LabelRule::FactorModulo { factor } => Ok(index_of(*factor)?.0 % num_classes),
            LabelRule::Quadrant => {
                let (x, cx) = index_of(FactorKind::PosX)?;
                let (y, cy) = index_of(FactorKind::PosY)?;
                Ok(2 * usize::from(2 * y >= cy) + usize::from(2 * x >= cx))
            }
        }
    }
}

/// Synthetic set with labels assigned by `rule`.
pub fn make_classification_set(spec: &FactorSpec, num_classes: usize, rule: &LabelRule) -> Result<FactorDataset> {
    let rule = rule.clone();
    let spec_c = spec.clone();
    make_classification_set_with(spec, num_classes, move |idx| rule.label(&spec_c, idx, num_classes))
}

/// Synthetic set with labels assigned by an arbitrary total function of
/// the factor tuple.
pub fn make_classification_set_with<R>(spec: &FactorSpec, num_classes: usize, rule: R) -> Result<FactorDataset>
where
    R: Fn(&[usize]) -> Result<usize>,
{
    if num_classes < 2 {
        return Err(Error::config("data.num_classes", "need at least two classes"));
    }
    let mut ds = generate_synthetic(spec)?;
    let labels = ds
        .factor_values
        .rows()
        .into_iter()
        .map(|row| {
            let idx = row.to_vec();
            let l = rule(&idx)?;
            if l >= num_classes {
                return Err(Error::config(
                    "data.label_rule",
                    format!("rule maps {idx:?} to class {l}, outside 0..{num_classes}"),
                ));
            }
            Ok(l)
        })
        .collect::<Result<Vec<_>>>()?;
    ds.labels = Some(labels);
    ds.num_classes = Some(num_classes);
    Ok(ds)
}

/// Inputs and targets of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f32>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Labels(Vec<usize>),
    /// Self-supervised: the inputs themselves.
    Images(Array2<f32>),
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EPOCH_STREAM | epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

fn check_batching(ds: &FactorDataset, batch_size: usize, mode: Mode) -> Result<()> {
    if batch_size < 2 {
        return Err(Error::config("trainer.batch_size", "must be at least 2"));
    }
    if batch_size > ds.len() {
        return Err(Error::config(
            "trainer.batch_size",
            format!("batch size {batch_size} exceeds dataset size {}", ds.len()),
        ));
    }
    if mode == Mode::Supervised && ds.labels.is_none() {
        return Err(Error::config("arch.mode", "supervised training needs a labeled dataset"));
    }
    Ok(())
}

fn make_batch(ds: &FactorDataset, rows: &[usize], mode: Mode) -> Batch {
    let x = ds.images.select(Axis(0), rows);
    let target = match mode {
        Mode::Supervised => {
            let labels = ds.labels.as_ref().expect("checked by check_batching");
            Target::Labels(rows.iter().map(|&i| labels[i]).collect())
        }
        Mode::SelfSupervised => Target::Images(x.clone()),
    };
    Batch { x, target }
}

/// Number of full batches per epoch (the short remainder is dropped).
pub fn batches_per_epoch(ds: &FactorDataset, batch_size: usize) -> usize {
    ds.len() / batch_size
}

/// The batch consumed at global `step`, independent of any earlier steps.
pub fn batch_for_step(ds: &FactorDataset, batch_size: usize, seed: u64, step: u64, mode: Mode) -> Result<Batch> {
    check_batching(ds, batch_size, mode)?;
    let per_epoch = batches_per_epoch(ds, batch_size) as u64;
    let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
    let perm = epoch_permutation(ds.len(), seed, epoch);
    Ok(make_batch(ds, &perm[k * batch_size..(k + 1) * batch_size], mode))
}

/// Step-indexed batch source that keeps the current epoch's permutation.
/// `sampler.batch(k)` equals [`batch_for_step`] at step `k`.
#[derive(Debug)]
pub struct BatchSampler<'a> {
    ds: &'a FactorDataset,
    batch_size: usize,
    seed: u64,
    mode: Mode,
    epoch: Option<(u64, Vec<usize>)>,
}

impl<'a> BatchSampler<'a> {
    pub fn new(ds: &'a FactorDataset, batch_size: usize, seed: u64, mode: Mode) -> Result<Self> {
        check_batching(ds, batch_size, mode)?;
        Ok(Self {
            ds,
            batch_size,
            seed,
            mode,
            epoch: None,
        })
    }

    pub fn batch(&mut self, step: u64) -> Batch {
        let per_epoch = batches_per_epoch(self.ds, self.batch_size) as u64;
        let (epoch, k) = (step / per_epoch, (step % per_epoch) as usize);
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.epoch = Some((epoch, epoch_permutation(self.ds.len(), self.seed, epoch)));
        }
        let perm = &self.epoch.as_ref().expect("set above").1;
        make_batch(self.ds, &perm[k * self.batch_size..(k + 1) * self.batch_size], self.mode)
    }
}

/// All batches of `epochs` passes, shuffled per epoch from `seed`.
pub fn batches(
    ds: &FactorDataset,
    batch_size: usize,
    seed: u64,
    epochs: usize,
    mode: Mode,
) -> Result<impl Iterator<Item = Batch> + '_> {
    check_batching(ds, batch_size, mode)?;
    let per_epoch = batches_per_epoch(ds, batch_size);
    Ok((0..epochs as u64).flat_map(move |epoch| {
        let perm = epoch_permutation(ds.len(), seed, epoch);
        (0..per_epoch).map(move |k| make_batch(ds, &perm[k * batch_size..(k + 1) * batch_size], mode))
    }))
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    n: usize,
    image_shape: (usize, usize, usize),
    factor_names: Vec<String>,
    factor_cardinalities: Vec<usize>,
    nuisance: Vec<bool>,
    spec: Option<FactorSpec>,
    num_classes: Option<usize>,
    has_labels: bool,
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io("cannot create", path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io("cannot write", path, e))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let file = fs::File::open(path).map_err(|e| Error::io("cannot open", path, e))?;
    let mut buf = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io("cannot read", path, e))?;
    Ok(buf)
}

/// Writes `data.bin` (f32 LE images), `factors.bin` (i32 LE), optional
/// `labels.bin` (i32 LE) and `spec.json` under `dir`.
pub fn save_cache(ds: &FactorDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io("cannot create directory", dir, e))?;
    let data: Vec<u8> = ds.images.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(&dir.join("data.bin"), &data)?;
    let factors: Vec<u8> = ds.factor_values.iter().flat_map(|&v| (v as i32).to_le_bytes()).collect();
    write_bytes(&dir.join("factors.bin"), &factors)?;
    if let Some(labels) = &ds.labels {
        let bytes: Vec<u8> = labels.iter().flat_map(|&v| (v as i32).to_le_bytes()).collect();
        write_bytes(&dir.join("labels.bin"), &bytes)?;
    }
    let meta = CacheMeta {
        n: ds.len(),
        image_shape: ds.image_shape,
        factor_names: ds.factor_names.clone(),
        factor_cardinalities: ds.factor_cardinalities.clone(),
        nuisance: ds.nuisance.clone(),
        spec: ds.spec.clone(),
        num_classes: ds.num_classes,
        has_labels: ds.labels.is_some(),
    };
    let json = serde_json::to_vec_pretty(&meta).expect("metadata serializes");
    write_bytes(&dir.join("spec.json"), &json)
}

pub fn load_cache(dir: &Path) -> Result<FactorDataset> {
    let meta_path = dir.join("spec.json");
    let meta: CacheMeta = serde_json::from_slice(&read_bytes(&meta_path)?)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", meta_path.display())))?;
    let (c, h, w) = meta.image_shape;
    let k = meta.factor_names.len();
    let ints = |name: &str, count: usize| -> Result<Vec<usize>> {
        let bytes = read_bytes(&dir.join(name))?;
        if bytes.len() != count * 4 {
            return Err(Error::Ingestion(format!(
                "{name}: expected {} bytes, found {}",
                count * 4,
                bytes.len()
            )));
        }
        bytes
            .chunks_exact(4)
            .map(|b| {
                let v = i32::from_le_bytes(b.try_into().expect("4 bytes"));
                usize::try_from(v).map_err(|_| Error::Ingestion(format!("{name}: negative index {v}")))
            })
            .collect()
    };
    let data = read_bytes(&dir.join("data.bin"))?;
    if data.len() != meta.n * c * h * w * 4 {
        return Err(Error::Ingestion(format!(
            "data.bin: expected {} bytes, found {}",
            meta.n * c * h * w * 4,
            data.len()
        )));
    }
    let pixels: Vec<f32> = data
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    let factors = ints("factors.bin", meta.n * k)?;
    let labels = if meta.has_labels {
        Some(ints("labels.bin", meta.n)?)
    } else {
        None
    };
    Ok(FactorDataset {
        images: Array2::from_shape_vec((meta.n, c * h * w), pixels).expect("length checked"),
        image_shape: meta.image_shape,
        factor_values: Array2::from_shape_vec((meta.n, k), factors).expect("length checked"),
        factor_names: meta.factor_names,
        factor_cardinalities: meta.factor_cardinalities,
        nuisance: meta.nuisance,
        spec: meta.spec,
        labels,
        num_classes: meta.num_classes,
    })
}

/// Loads the dSprites `.npz` archive (`imgs`: `N x 64 x 64` u8,
/// `latents_classes`: `N x 6` i64 with a constant colour column first).
///
/// With `max_samples`, a seed-determined subset of rows is kept (sorted), so
/// the full archive need not be expanded to floats.
pub fn load_dsprites(path: &Path, max_samples: Option<usize>, seed: u64) -> Result<FactorDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io("cannot open dSprites archive", path, e))?;
    let mut npz = ndarray_npy::NpzReader::new(BufReader::new(file))
        .map_err(|e| Error::Ingestion(format!("{}: not a readable npz archive: {e}", path.display())))?;
    let names = npz.names().map_err(|e| Error::Ingestion(e.to_string()))?;
    for required in ["imgs", "latents_classes"] {
        if !names.iter().any(|n| n == required) {
            return Err(Error::Ingestion(format!(
                "missing array `{required}` (expected imgs, latents_classes; found {})",
                names.join(", ")
            )));
        }
    }
    let imgs: Array3<u8> = npz
        .by_name("imgs")
        .map_err(|e| Error::Ingestion(format!("imgs: expected a u8 array of shape (N, 64, 64): {e}")))?;
    let latents: Array2<i64> = npz
        .by_name("latents_classes")
        .map_err(|e| Error::Ingestion(format!("latents_classes: expected an i64 array of shape (N, 6): {e}")))?;
    let n = imgs.shape()[0];
    if imgs.shape()[1..] != [64, 64] {
        return Err(Error::Ingestion(format!(
            "imgs: expected shape (N, 64, 64), found {:?}",
            imgs.shape()
        )));
    }
    if latents.dim() != (n, 6) {
        return Err(Error::Ingestion(format!(
            "latents_classes: expected shape ({n}, 6), found {:?}",
            latents.dim()
        )));
    }
    if latents.iter().any(|&v| v < 0) {
        return Err(Error::Ingestion("latents_classes: negative class index".into()));
    }
    // Cardinalities come from the archive itself.
    let cards: Vec<usize> = (1..6)
        .map(|c| latents.column(c).iter().copied().max().unwrap_or(0) as usize + 1)
        .collect();
    if cards.iter().product::<usize>() != n {
        return Err(Error::Ingestion(format!(
            "factor cardinalities {cards:?} do not enumerate {n} images"
        )));
    }

    let rows: Vec<usize> = match max_samples {
        Some(m) if m < n => {
            let mut all: Vec<usize> = (0..n).collect();
            all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut keep = all[..m].to_vec();
            keep.sort_unstable();
            keep
        }
        _ => (0..n).collect(),
    };
    let mut images = Array2::zeros((rows.len(), 64 * 64));
    let mut factor_values = Array2::zeros((rows.len(), 5));
    for (dst, &src) in rows.iter().enumerate() {
        for (o, &v) in images.row_mut(dst).iter_mut().zip(imgs.index_axis(Axis(0), src).iter()) {
            *o = f32::from(v);
        }
        for k in 0..5 {
            factor_values[[dst, k]] = latents[[src, k + 1]] as usize;
        }
    }
    Ok(FactorDataset {
        images,
        image_shape: (1, 64, 64),
        factor_values,
        factor_names: DSPRITES_NAMES.iter().map(|s| s.to_string()).collect(),
        factor_cardinalities: cards,
        nuisance: vec![true, false, false, false, false],
        spec: None,
        labels: None,
        num_classes: None,
    })
}
