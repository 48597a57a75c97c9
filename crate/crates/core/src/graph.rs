//! Reverse-mode automatic differentiation over row-major 2-D arrays.
//!
//! Every tensor is a matrix whose rows are batch samples. Images are
//! flattened channel-major (`C*H*W` columns) and the convolution ops carry
//! their own geometry. A [`Graph`] is built fresh for each forward pass and
//! consumed by [`Graph::backward`].

use std::collections::HashMap;
use std::fmt;

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type usable by the graph (`f32` for training,
/// `f64` for gradient checks).
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + std::ops::AddAssign
    + std::iter::Sum
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Optimizer group a parameter belongs to. Each group is stepped by its own
/// optimizer and the groups never share a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    /// Encoder trunk, representation heads and task solvers.
    Main,
    Discriminator,
    Predictor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub group: Group,
    pub value: Array2<F>,
}

/// Owns every trainable tensor of a model, in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, group: Group, value: Array2<F>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<F> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, group: Group) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(id, _)| id)
            .collect()
    }

    /// Concatenation of all values in `group`, in registration order.
    pub fn flatten_group(&self, group: Group) -> Vec<F> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    pub fn num_scalars(&self, group: Group) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.value.len())
            .sum()
    }

    /// Element-wise cast into another precision, keeping names and groups.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.mapv(|v| G::from_f64(v.to_f64())),
                })
                .collect(),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a strided, zero-padded square-kernel convolution between a
/// "large" image and a "small" one. `conv2d` maps large → small and
/// `conv_transpose2d` maps small → large.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub large_c: usize,
    pub large_h: usize,
    pub large_w: usize,
    pub small_c: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Geometry of a downsampling convolution from `(c, h, w)` to `out_c`
    /// channels.
    pub fn down(c: usize, h: usize, w: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let span_h = h + 2 * pad;
        let span_w = w + 2 * pad;
        if span_h < kernel || span_w < kernel || stride == 0 {
            return Err(Error::contract(format!(
                "convolution kernel {kernel} does not fit a {h}x{w} input with padding {pad}"
            )));
        }
        Ok(Self {
            large_c: c,
            large_h: h,
            large_w: w,
            small_c: out_c,
            small_h: (span_h - kernel) / stride + 1,
            small_w: (span_w - kernel) / stride + 1,
            kernel,
            stride,
            pad,
        })
    }

    /// Geometry of an upsampling (transposed) convolution from `(c, h, w)` to
    /// `out_c` channels.
    pub fn up(c: usize, h: usize, w: usize, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::contract("transposed convolution input is empty"));
        }
        let grow_h = (h - 1) * stride + kernel;
        let grow_w = (w - 1) * stride + kernel;
        if grow_h <= 2 * pad || grow_w <= 2 * pad {
            return Err(Error::contract("transposed convolution output would be empty"));
        }
        Ok(Self {
            large_c: out_c,
            large_h: grow_h - 2 * pad,
            large_w: grow_w - 2 * pad,
            small_c: c,
            small_h: h,
            small_w: w,
            kernel,
            stride,
            pad,
        })
    }

    pub fn large_len(&self) -> usize {
        self.large_c * self.large_h * self.large_w
    }

    pub fn small_len(&self) -> usize {
        self.small_c * self.small_h * self.small_w
    }

    fn patch_len(&self) -> usize {
        self.large_c * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.small_h * self.small_w
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    AddChannel { x: Var, bias: Var, spatial: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, F),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Clamp(Var, F, F),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Array2<F> },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Array2<F> },
    ConvT2d { x: Var, w: Var, geom: ConvGeom, x_mat: Array2<F> },
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
    /// False when no parameter or differentiable input feeds this node.
    needs_grad: bool,
}

/// A single forward computation recorded for differentiation.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

/// Gradients of a scalar root with respect to every node that feeds it.
#[derive(Debug)]
pub struct Grads<F> {
    nodes: Vec<Option<Array2<F>>>,
    params: HashMap<ParamId, Array2<F>>,
}

impl<F: Real> Grads<F> {
    /// Gradient of a parameter; `None` when the root does not depend on it.
    pub fn param(&self, id: ParamId) -> Option<&Array2<F>> {
        self.params.get(&id)
    }

    /// Gradient with respect to an arbitrary node (e.g. a constant input).
    pub fn wrt(&self, v: Var) -> Option<&Array2<F>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }
}

fn shape_eq<F>(a: &Array2<F>, b: &Array2<F>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        let g = |v: &Var| self.nodes[v.0].needs_grad;
        let needs_grad = match &op {
            Op::Leaf | Op::Param(_) => true,
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::ConcatCols(a, b) => {
                g(a) || g(b)
            }
            Op::AddChannel { x, bias, .. } => g(x) || g(bias),
            Op::Affine(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Ln(a)
            | Op::Clamp(a, _, _)
            | Op::SliceCols(a, _)
            | Op::GatherRows(a, _)
            | Op::Sum(a) => g(a),
            Op::CrossEntropy { logits, .. } => g(logits),
            Op::Conv2d { x, w, .. } | Op::ConvT2d { x, w, .. } => g(x) || g(w),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    /// Value of a `1x1` node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Input that gradients may flow into but that is not a parameter.
    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, value: F) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    /// Input that never receives a gradient; backward skips work feeding
    /// only such nodes.
    pub fn input(&mut self, value: Array2<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::contract(format!(
                "matmul: inner dimensions differ ({:?} x {:?})",
                av.dim(),
                bv.dim()
            )));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(Error::contract(format!(
                "add_row: bias {:?} does not broadcast over {:?}",
                rv.dim(),
                av.dim()
            )));
        }
        let out = av + rv;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// Adds a per-channel `1 x C` bias to channel-major flattened images.
    pub fn add_channel(&mut self, x: Var, bias: Var, channels: usize) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.dim() != (1, channels) || channels == 0 || xv.ncols() % channels != 0 {
            return Err(Error::contract(format!(
                "add_channel: bias {:?} incompatible with {} channels over {:?}",
                bv.dim(),
                channels,
                xv.dim()
            )));
        }
        let spatial = xv.ncols() / channels;
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            for (c, chunk) in row.as_slice_mut().expect("row-major").chunks_mut(spatial).enumerate() {
                let b = bv[[0, c]];
                chunk.iter_mut().for_each(|v| *v += b);
            }
        }
        Ok(self.push(out, Op::AddChannel { x, bias, spatial }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        shape_eq(self.value(a), self.value(b), "add")?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        shape_eq(self.value(a), self.value(b), "sub")?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        shape_eq(self.value(a), self.value(b), "mul")?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a * scale + shift`, element-wise.
    pub fn affine(&mut self, a: Var, scale: F, shift: F) -> Var {
        let out = self.value(a).mapv(|v| v * scale + shift);
        self.push(out, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, scale: F) -> Var {
        self.affine(a, scale, F::zero())
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| if v > F::zero() { v } else { F::zero() });
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.exp());
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.ln());
        self.push(out, Op::Ln(a))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        let out = self.value(a).mapv(|v| v.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.nrows() != bv.nrows() {
            return Err(Error::contract(format!(
                "concat: row counts differ ({} vs {})",
                av.nrows(),
                bv.nrows()
            )));
        }
        let out = ndarray::concatenate(Axis(1), &[av.view(), bv.view()]).expect("rows checked");
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.ncols() || len == 0 {
            return Err(Error::contract(format!(
                "slice: columns {start}..{} out of {}",
                start + len,
                av.ncols()
            )));
        }
        let out = av.slice(ndarray::s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    /// Output row `i` is input row `index[i]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= av.nrows()) {
            return Err(Error::contract(format!("gather: row {bad} out of {}", av.nrows())));
        }
        let out = av.select(Axis(0), index);
        Ok(self.push(out, Op::GatherRows(a, index.to_vec())))
    }

    /// Sum of all entries as a `1x1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::Sum(a))
    }

    /// Mean over rows of per-row sums: the batch reduction used by every loss.
    pub fn batch_mean_of_sums(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).nrows();
        if n == 0 {
            return Err(Error::contract("empty batch"));
        }
        let s = self.sum(a);
        Ok(self.scale(s, F::one() / F::from_f64(n as f64)))
    }

    /// Mean softmax cross-entropy of `logits` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = lv.dim();
        if n == 0 || n != labels.len() {
            return Err(Error::contract(format!(
                "cross entropy: {n} logit rows for {} labels",
                labels.len()
            )));
        }
        if c < 2 {
            return Err(Error::contract("cross entropy needs at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::contract(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Array2::zeros((n, c));
        let mut total = F::zero();
        for (i, row) in lv.rows().into_iter().enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            total += lse - row[labels[i]];
            for (j, &v) in row.iter().enumerate() {
                probs[[i, j]] = (v - lse).exp();
            }
        }
        let mean = total / F::from_f64(n as f64);
        Ok(self.push(
            Array2::from_elem((1, 1), mean),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Downsampling convolution. `w` is `(C_in*k*k) x C_out`.
    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ncols() != geom.large_len() || wv.dim() != (geom.patch_len(), geom.small_c) {
            return Err(Error::contract(format!(
                "conv2d: input {:?} / weight {:?} do not match geometry {geom:?}",
                xv.dim(),
                wv.dim()
            )));
        }
        let n = xv.nrows();
        let cols = im2col(xv, &geom);
        let out_mat = cols.dot(wv);
        let out = positions_to_rows(&out_mat, n, geom.small_c, geom.positions());
        Ok(self.push(out, Op::Conv2d { x, w, geom, cols }))
    }

    /// Upsampling (transposed) convolution. `w` is `C_in x (C_out*k*k)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, geom: ConvGeom) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.ncols() != geom.small_len() || wv.dim() != (geom.small_c, geom.patch_len()) {
            return Err(Error::contract(format!(
                "conv_transpose2d: input {:?} / weight {:?} do not match geometry {geom:?}",
                xv.dim(),
                wv.dim()
            )));
        }
        let n = xv.nrows();
        let x_mat = rows_to_positions(xv, geom.small_c, geom.positions());
        let cols = x_mat.dot(wv);
        let out = col2im(&cols, n, &geom);
        Ok(self.push(out, Op::ConvT2d { x, w, geom, x_mat }))
    }

    /// Backpropagates from a `1x1` root.
    pub fn backward(&self, root: Var) -> Result<Grads<F>> {
        if self.value(root).dim() != (1, 1) {
            return Err(Error::contract("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Array2<F>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::from_elem((1, 1), F::one()));
        let mut params = HashMap::new();

        let acc = |grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            // Leaf gradients stay in place for `Grads::wrt`.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Param(id) => match params.entry(*id) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        let slot: &mut Array2<F> = e.get_mut();
                        *slot += &g;
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                },
                Op::MatMul(a, b) => {
                    if self.needs_grad(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.needs_grad(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::AddChannel { x, bias, spatial } => {
                    let channels = g.ncols() / spatial;
                    let mut gb = Array2::zeros((1, channels));
                    for row in g.rows() {
                        for (c, chunk) in row.as_slice().expect("row-major").chunks(*spatial).enumerate() {
                            gb[[0, c]] += chunk.iter().copied().sum::<F>();
                        }
                    }
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.mapv(|v| -v));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Affine(a, scale) => acc(&mut grads, *a, g.mapv(|v| v * *scale)),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| if x <= F::zero() { *gv = F::zero() });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv = *gv * (F::one() - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv = *gv * y * (F::one() - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = &g * &node.value;
                    acc(&mut grads, *a, ga);
                }
                Op::Ln(a) => {
                    let ga = &g / self.value(*a);
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        if x < *lo || x > *hi {
                            *gv = F::zero()
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    let ga = g.slice(ndarray::s![.., ..split]).to_owned();
                    let gb = g.slice(ndarray::s![.., split..]).to_owned();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(ndarray::s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, index) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (out_row, &src) in index.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(out_row);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(self.value(*a).dim(), s));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let scale = g[[0, 0]] / F::from_f64(labels.len() as f64);
                    let mut gl = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        gl[[i, l]] = gl[[i, l]] - F::one();
                    }
                    gl.mapv_inplace(|v| v * scale);
                    acc(&mut grads, *logits, gl);
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let n = g.nrows();
                    let g_mat = rows_to_positions(&g, geom.small_c, geom.positions());
                    if self.needs_grad(*w) {
                        acc(&mut grads, *w, cols.t().dot(&g_mat));
                    }
                    if self.needs_grad(*x) {
                        let gcols = g_mat.dot(&self.value(*w).t());
                        acc(&mut grads, *x, col2im(&gcols, n, geom));
                    }
                }
                Op::ConvT2d { x, w, geom, x_mat } => {
                    let n = g.nrows();
                    let gcols = im2col(&g, geom);
                    if self.needs_grad(*w) {
                        acc(&mut grads, *w, x_mat.t().dot(&gcols));
                    }
                    if self.needs_grad(*x) {
                        let gx_mat = gcols.dot(&self.value(*w).t());
                        acc(&mut grads, *x, positions_to_rows(&gx_mat, n, geom.small_c, geom.positions()));
                    }
                }
            }
        }
        Ok(Grads { nodes: grads, params })
    }
}

pub(crate) fn sigmoid<F: Real>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// `(N*P) x C` position-major matrix → `N x (C*P)` channel-major rows.
fn positions_to_rows<F: Real>(m: &Array2<F>, n: usize, channels: usize, positions: usize) -> Array2<F> {
    let mut out = Array2::zeros((n, channels * positions));
    for s in 0..n {
        for p in 0..positions {
            let src = m.row(s * positions + p);
            for c in 0..channels {
                out[[s, c * positions + p]] = src[c];
            }
        }
    }
    out
}

/// Inverse of [`positions_to_rows`].
fn rows_to_positions<F: Real>(x: &Array2<F>, channels: usize, positions: usize) -> Array2<F> {
    let n = x.nrows();
    let mut out = Array2::zeros((n * positions, channels));
    for s in 0..n {
        let row = x.row(s);
        for c in 0..channels {
            for p in 0..positions {
                out[[s * positions + p, c]] = row[c * positions + p];
            }
        }
    }
    out
}

/// Patches of the large image, one row per (sample, small-image position);
/// columns ordered `(channel, ki, kj)`.
fn im2col<F: Real>(x: &Array2<F>, geom: &ConvGeom) -> Array2<F> {
    let n = x.nrows();
    let k = geom.kernel;
    let mut cols = Array2::zeros((n * geom.positions(), geom.patch_len()));
    for s in 0..n {
        let img = x.row(s);
        for oi in 0..geom.small_h {
            for oj in 0..geom.small_w {
                let r = s * geom.positions() + oi * geom.small_w + oj;
                let mut dst = cols.row_mut(r);
                for c in 0..geom.large_c {
                    for ki in 0..k {
                        let ii = (oi * geom.stride + ki) as isize - geom.pad as isize;
                        if ii < 0 || ii >= geom.large_h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * geom.stride + kj) as isize - geom.pad as isize;
                            if jj < 0 || jj >= geom.large_w as isize {
                                continue;
                            }
                            dst[(c * k + ki) * k + kj] =
                                img[(c * geom.large_h + ii as usize) * geom.large_w + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch rows back into large images (adjoint of [`im2col`]).
fn col2im<F: Real>(cols: &Array2<F>, n: usize, geom: &ConvGeom) -> Array2<F> {
    let k = geom.kernel;
    let mut out = Array2::zeros((n, geom.large_len()));
    for s in 0..n {
        let mut img = out.row_mut(s);
        for oi in 0..geom.small_h {
            for oj in 0..geom.small_w {
                let src = cols.row(s * geom.positions() + oi * geom.small_w + oj);
                for c in 0..geom.large_c {
                    for ki in 0..k {
                        let ii = (oi * geom.stride + ki) as isize - geom.pad as isize;
                        if ii < 0 || ii >= geom.large_h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * geom.stride + kj) as isize - geom.pad as isize;
                            if jj < 0 || jj >= geom.large_w as isize {
                                continue;
                            }
                            img[(c * geom.large_h + ii as usize) * geom.large_w + jj as usize] +=
                                src[(c * k + ki) * k + kj];
                        }
                    }
                }
            }
        }
    }
    out
}
