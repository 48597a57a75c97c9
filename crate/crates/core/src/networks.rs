//! Miniature architectures: shared encoder trunk with `z` / `y` heads, task
//! solvers, the pair discriminator and the cross predictors.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{sample_reparam_nodes, GaussianBatch, GaussianNodes};
use crate::error::{Error, Result};
use crate::graph::{ConvGeom, Graph, Group, ParamId, ParamStore, Real, Var};

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    SelfSupervised,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrunkKind {
    /// Stride-2 4x4 convolutions; decoders mirror them with transposed
    /// convolutions.
    Conv,
    /// Fully connected layers; decoders mirror them.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

macro_rules! snake_enum_str {
    ($ty:ty, $field:literal, $($s:literal => $v:expr),+) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
                    $($s => Ok($v),)+
                    other => Err(Error::config($field, format!(
                        "unknown value `{other}` (expected one of {})", [$($s),+].join(", ")))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $(v if *v == $v => $s,)+ _ => unreachable!() };
                f.write_str(s)
            }
        }
    };
}

snake_enum_str!(Mode, "arch.mode", "supervised" => Mode::Supervised, "self_supervised" => Mode::SelfSupervised);
snake_enum_str!(TrunkKind, "arch.trunk", "conv" => TrunkKind::Conv, "mlp" => TrunkKind::Mlp);
snake_enum_str!(Activation, "arch.activation", "relu" => Activation::Relu, "tanh" => Activation::Tanh);

fn default_disc_width() -> usize {
    256
}

fn default_pred_width() -> usize {
    128
}

/// Shape contract of a [`ModelBundle`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// `(channels, height, width)`.
    pub input_shape: (usize, usize, usize),
    pub d_z: usize,
    pub d_y: usize,
    /// Present exactly in supervised mode.
    pub num_classes: Option<usize>,
    pub trunk_widths: Vec<usize>,
    pub mode: Mode,
    pub trunk: TrunkKind,
    pub activation: Activation,
    #[serde(default = "default_disc_width")]
    pub disc_width: usize,
    #[serde(default = "default_pred_width")]
    pub pred_width: usize,
}

impl ArchSpec {
    /// Conv trunk 32/64/64 with the default head widths.
    pub fn desk_scale(input_shape: (usize, usize, usize), d_z: usize, d_y: usize, num_classes: Option<usize>) -> Self {
        Self {
            input_shape,
            d_z,
            d_y,
            num_classes,
            trunk_widths: vec![32, 64, 64],
            mode: if num_classes.is_some() {
                Mode::Supervised
            } else {
                Mode::SelfSupervised
            },
            trunk: TrunkKind::Conv,
            activation: Activation::Relu,
            disc_width: default_disc_width(),
            pred_width: default_pred_width(),
        }
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("arch.input_shape", "all dimensions must be positive"));
        }
        if self.d_z == 0 {
            return Err(Error::config("arch.d_z", "must be at least 1"));
        }
        if self.d_y == 0 {
            return Err(Error::config("arch.d_y", "must be at least 1"));
        }
        match (self.mode, self.num_classes) {
            (Mode::Supervised, None) => {
                return Err(Error::config("arch.num_classes", "required in supervised mode"))
            }
            (Mode::Supervised, Some(n)) if n < 2 => {
                return Err(Error::config("arch.num_classes", "need at least two classes"))
            }
            (Mode::SelfSupervised, Some(_)) => {
                return Err(Error::config("arch.num_classes", "must be absent in self-supervised mode"))
            }
            _ => {}
        }
        if self.trunk_widths.contains(&0) {
            return Err(Error::config("arch.trunk_widths", "widths must be positive"));
        }
        if self.disc_width == 0 {
            return Err(Error::config("arch.disc_width", "must be positive"));
        }
        if self.pred_width == 0 {
            return Err(Error::config("arch.pred_width", "must be positive"));
        }
        if self.trunk == TrunkKind::Conv {
            let factor = 1usize << self.trunk_widths.len();
            if h % factor != 0 || w % factor != 0 {
                return Err(Error::config(
                    "arch.trunk_widths",
                    format!(
                        "{} stride-2 layers need height and width divisible by {factor}, got {h}x{w}",
                        self.trunk_widths.len()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Representation part selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Z,
    Y,
    R,
}

impl Head {
    pub const ALL: [Head; 3] = [Head::Z, Head::Y, Head::R];

    pub fn name(self) -> &'static str {
        match self {
            Head::Z => "z",
            Head::Y => "y",
            Head::R => "r",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ZToY,
    YToZ,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Layer {
    Dense { w: ParamId, b: ParamId },
    Conv { w: ParamId, b: ParamId, geom: ConvGeom },
    ConvT { w: ParamId, b: ParamId, geom: ConvGeom },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Output {
    Linear,
    Activated,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq)]
struct Stack {
    layers: Vec<Layer>,
    in_dim: usize,
    out_dim: usize,
    output: Output,
}

impl Stack {
    fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, act: Activation, x: Var) -> Result<Var> {
        if g.shape(x).1 != self.in_dim {
            return Err(Error::contract(format!(
                "layer stack expects {} input features, got {}",
                self.in_dim,
                g.shape(x).1
            )));
        }
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = match *layer {
                Layer::Dense { w, b } => {
                    let wv = g.param(store, w);
                    let bv = g.param(store, b);
                    let m = g.matmul(h, wv)?;
                    g.add_row(m, bv)?
                }
                Layer::Conv { w, b, geom } => {
                    let wv = g.param(store, w);
                    let bv = g.param(store, b);
                    let c = g.conv2d(h, wv, geom)?;
                    g.add_channel(c, bv, geom.small_c)?
                }
                Layer::ConvT { w, b, geom } => {
                    let wv = g.param(store, w);
                    let bv = g.param(store, b);
                    let c = g.conv_transpose2d(h, wv, geom)?;
                    g.add_channel(c, bv, geom.large_c)?
                }
            };
            if i < last || self.output == Output::Activated {
                h = activate(g, act, h);
            } else if self.output == Output::Sigmoid {
                h = g.sigmoid(h);
            }
        }
        Ok(h)
    }
}

fn activate<F: Real>(g: &mut Graph<F>, act: Activation, x: Var) -> Var {
    match act {
        Activation::Relu => g.relu(x),
        Activation::Tanh => g.tanh(x),
    }
}

struct Builder<'a, F> {
    store: &'a mut ParamStore<F>,
    rng: ChaCha8Rng,
}

impl<F: Real> Builder<'_, F> {
    fn glorot(&mut self, name: &str, group: Group, rows: usize, cols: usize, fan_in: usize, fan_out: usize, gain: f64) -> ParamId {
        let limit = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        let rng = &mut self.rng;
        let w = Array2::from_shape_simple_fn((rows, cols), || F::from_f64(rng.random_range(-limit..limit)));
        self.store.register(name, group, w)
    }

    fn bias(&mut self, name: &str, group: Group, n: usize) -> ParamId {
        self.store.register(name, group, Array2::zeros((1, n)))
    }

    fn dense(&mut self, name: &str, group: Group, inp: usize, out: usize, gain: f64) -> Layer {
        let w = self.glorot(&format!("{name}.w"), group, inp, out, inp, out, gain);
        let b = self.bias(&format!("{name}.b"), group, out);
        Layer::Dense { w, b }
    }

    fn mlp(&mut self, name: &str, group: Group, dims: &[usize], output: Output, last_gain: f64) -> Stack {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { last_gain } else { 1.0 };
                self.dense(&format!("{name}.{i}"), group, dims[i], dims[i + 1], gain)
            })
            .collect();
        Stack {
            layers,
            in_dim: dims[0],
            out_dim: dims[n],
            output,
        }
    }

    fn conv(&mut self, name: &str, geom: ConvGeom) -> Layer {
        let k2 = geom.kernel * geom.kernel;
        let w = self.glorot(
            &format!("{name}.w"),
            Group::Main,
            geom.large_c * k2,
            geom.small_c,
            geom.large_c * k2,
            geom.small_c * k2,
            1.0,
        );
        let b = self.bias(&format!("{name}.b"), Group::Main, geom.small_c);
        Layer::Conv { w, b, geom }
    }

    fn conv_t(&mut self, name: &str, geom: ConvGeom) -> Layer {
        let k2 = geom.kernel * geom.kernel;
        let w = self.glorot(
            &format!("{name}.w"),
            Group::Main,
            geom.small_c,
            geom.large_c * k2,
            geom.small_c * k2,
            geom.large_c * k2,
            1.0,
        );
        let b = self.bias(&format!("{name}.b"), Group::Main, geom.large_c);
        Layer::ConvT { w, b, geom }
    }

    fn trunk(&mut self, arch: &ArchSpec) -> Result<Stack> {
        let (c, h, w) = arch.input_shape;
        match arch.trunk {
            TrunkKind::Mlp => {
                let mut dims = vec![arch.input_len()];
                dims.extend(&arch.trunk_widths);
                if dims.len() == 1 {
                    return Ok(Stack {
                        layers: vec![],
                        in_dim: dims[0],
                        out_dim: dims[0],
                        output: Output::Linear,
                    });
                }
                Ok(self.mlp("trunk", Group::Main, &dims, Output::Activated, 1.0))
            }
            TrunkKind::Conv => {
                let (mut ch, mut hh, mut ww) = (c, h, w);
                let mut layers = Vec::new();
                for (i, &width) in arch.trunk_widths.iter().enumerate() {
                    let geom = ConvGeom::down(ch, hh, ww, width, KERNEL, STRIDE, PAD)?;
                    layers.push(self.conv(&format!("trunk.{i}"), geom));
                    (ch, hh, ww) = (width, geom.small_h, geom.small_w);
                }
                Ok(Stack {
                    layers,
                    in_dim: arch.input_len(),
                    out_dim: ch * hh * ww,
                    output: Output::Activated,
                })
            }
        }
    }

    fn solver(&mut self, name: &str, arch: &ArchSpec, in_dim: usize) -> Result<Stack> {
        match (arch.mode, arch.num_classes) {
            (Mode::Supervised, Some(classes)) => Ok(self.mlp(name, Group::Main, &[in_dim, classes], Output::Linear, 1.0)),
            (Mode::Supervised, None) => Err(Error::config("arch.num_classes", "required in supervised mode")),
            (Mode::SelfSupervised, _) => self.decoder(name, arch, in_dim),
        }
    }

    fn decoder(&mut self, name: &str, arch: &ArchSpec, in_dim: usize) -> Result<Stack> {
        let (c, h, w) = arch.input_shape;
        match arch.trunk {
            TrunkKind::Mlp => {
                let mut dims = vec![in_dim];
                dims.extend(arch.trunk_widths.iter().rev());
                dims.push(arch.input_len());
                Ok(self.mlp(name, Group::Main, &dims, Output::Sigmoid, 1.0))
            }
            TrunkKind::Conv => {
                let depth = arch.trunk_widths.len();
                if depth == 0 {
                    return Ok(self.mlp(name, Group::Main, &[in_dim, arch.input_len()], Output::Sigmoid, 1.0));
                }
                let (mut hh, mut ww) = (h >> depth, w >> depth);
                let mut ch = arch.trunk_widths[depth - 1];
                let mut layers = vec![self.dense(&format!("{name}.proj"), Group::Main, in_dim, ch * hh * ww, 1.0)];
                for i in (0..depth).rev() {
                    let out_c = if i == 0 { c } else { arch.trunk_widths[i - 1] };
                    let geom = ConvGeom::up(ch, hh, ww, out_c, KERNEL, STRIDE, PAD)?;
                    layers.push(self.conv_t(&format!("{name}.up{i}"), geom));
                    (ch, hh, ww) = (out_c, geom.large_h, geom.large_w);
                }
                debug_assert_eq!((ch, hh, ww), (c, h, w));
                Ok(Stack {
                    layers,
                    in_dim,
                    out_dim: arch.input_len(),
                    output: Output::Sigmoid,
                })
            }
        }
    }
}

/// Every trainable part of the model. Parameters live in one
/// [`ParamStore`], tagged by optimizer group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<F> {
    pub arch: ArchSpec,
    pub params: ParamStore<F>,
    trunk: Stack,
    z_mean: Stack,
    z_log_var: Stack,
    y_head: Stack,
    solver_z: Stack,
    solver_y: Stack,
    solver_r: Stack,
    discriminator: Stack,
    predictor_zy: Stack,
    predictor_yz: Stack,
}

/// Encoder outputs as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct EncodedNodes {
    pub features: Var,
    pub z: Var,
    pub z_post: GaussianNodes,
    pub y: Var,
}

/// Encoder outputs as values.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded<F> {
    pub features: Array2<F>,
    pub z: Array2<F>,
    pub z_post: GaussianBatch<F>,
    pub y: Array2<F>,
}

impl<F: Real> ModelBundle<F> {
    /// Deterministic initialization from `seed`.
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let trunk = b.trunk(arch)?;
        let feat = trunk.out_dim;
        let z_mean = b.mlp("z_head.mean", Group::Main, &[feat, arch.d_z], Output::Linear, 1.0);
        let z_log_var = b.mlp("z_head.log_var", Group::Main, &[feat, arch.d_z], Output::Linear, 0.1);
        let y_head = b.mlp("y_head", Group::Main, &[feat, arch.d_y], Output::Linear, 1.0);
        let solver_z = b.solver("solver_z", arch, arch.d_z)?;
        let solver_y = b.solver("solver_y", arch, arch.d_y)?;
        let solver_r = b.solver("solver_r", arch, arch.d_z + arch.d_y)?;
        // Small final layer keeps the initial discriminator near 1/2.
        let discriminator = b.mlp(
            "discriminator",
            Group::Discriminator,
            &[feat + arch.d_y, arch.disc_width, 1],
            Output::Sigmoid,
            0.05,
        );
        let predictor_zy = b.mlp(
            "predictor_zy",
            Group::Predictor,
            &[arch.d_z, arch.pred_width, arch.d_y],
            Output::Linear,
            1.0,
        );
        let predictor_yz = b.mlp(
            "predictor_yz",
            Group::Predictor,
            &[arch.d_y, arch.pred_width, arch.d_z],
            Output::Linear,
            1.0,
        );
        Ok(Self {
            arch: arch.clone(),
            params,
            trunk,
            z_mean,
            z_log_var,
            y_head,
            solver_z,
            solver_y,
            solver_r,
            discriminator,
            predictor_zy,
            predictor_yz,
        })
    }

    /// Same architecture and values in another precision.
    pub fn cast<G: Real>(&self) -> ModelBundle<G> {
        ModelBundle {
            arch: self.arch.clone(),
            params: self.params.cast(),
            trunk: self.trunk.clone(),
            z_mean: self.z_mean.clone(),
            z_log_var: self.z_log_var.clone(),
            y_head: self.y_head.clone(),
            solver_z: self.solver_z.clone(),
            solver_y: self.solver_y.clone(),
            solver_r: self.solver_r.clone(),
            discriminator: self.discriminator.clone(),
            predictor_zy: self.predictor_zy.clone(),
            predictor_yz: self.predictor_yz.clone(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.out_dim
    }

    pub fn solver_input_dim(&self, which: Head) -> usize {
        self.solver(which).in_dim
    }

    pub fn solver_output_dim(&self, which: Head) -> usize {
        self.solver(which).out_dim
    }

    fn solver(&self, which: Head) -> &Stack {
        match which {
            Head::Z => &self.solver_z,
            Head::Y => &self.solver_y,
            Head::R => &self.solver_r,
        }
    }

    /// Weight matrix (`input x units`) of the first layer of a solver head.
    pub fn solver_input_weights(&self, which: Head) -> &Array2<F> {
        match self.solver(which).layers[0] {
            Layer::Dense { w, .. } => self.params.value(w),
            _ => unreachable!("solver heads start with a dense layer"),
        }
    }

    fn act(&self) -> Activation {
        self.arch.activation
    }

    pub fn features_node(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        self.trunk.forward(g, &self.params, self.act(), x)
    }

    /// Trunk features plus both representation parts; `z` is the
    /// reparameterized sample driven by `noise`.
    pub fn encode_nodes(&self, g: &mut Graph<F>, x: Var, noise: Var) -> Result<EncodedNodes> {
        let (n, _) = g.shape(x);
        if g.shape(noise) != (n, self.arch.d_z) {
            return Err(Error::contract(format!(
                "noise shape {:?} does not match ({n}, {})",
                g.shape(noise),
                self.arch.d_z
            )));
        }
        let features = self.features_node(g, x)?;
        let mean = self.z_mean.forward(g, &self.params, self.act(), features)?;
        let log_var = self.z_log_var.forward(g, &self.params, self.act(), features)?;
        let z_post = GaussianNodes { mean, log_var };
        let z = sample_reparam_nodes(g, z_post, noise)?;
        let y = self.y_head.forward(g, &self.params, self.act(), features)?;
        Ok(EncodedNodes { features, z, z_post, y })
    }

    pub fn solve_node(&self, g: &mut Graph<F>, which: Head, representation: Var) -> Result<Var> {
        let head = self.solver(which);
        if g.shape(representation).1 != head.in_dim {
            return Err(Error::contract(format!(
                "{} head expects a {}-dimensional representation, got {}",
                which.name(),
                head.in_dim,
                g.shape(representation).1
            )));
        }
        head.forward(g, &self.params, self.act(), representation)
    }

    pub fn discriminate_node(&self, g: &mut Graph<F>, features: Var, y: Var) -> Result<Var> {
        if g.shape(features).0 != g.shape(y).0 {
            return Err(Error::contract("discriminator inputs have different batch sizes"));
        }
        if g.shape(features).1 != self.feature_dim() || g.shape(y).1 != self.arch.d_y {
            return Err(Error::contract(format!(
                "discriminator expects ({}, {}) features, got ({}, {})",
                self.feature_dim(),
                self.arch.d_y,
                g.shape(features).1,
                g.shape(y).1
            )));
        }
        let pair = g.concat_cols(features, y)?;
        self.discriminator.forward(g, &self.params, self.act(), pair)
    }

    pub fn predict_cross_node(&self, g: &mut Graph<F>, source: Var, direction: Direction) -> Result<Var> {
        let net = match direction {
            Direction::ZToY => &self.predictor_zy,
            Direction::YToZ => &self.predictor_yz,
        };
        net.forward(g, &self.params, self.act(), source)
    }

    fn check_input(&self, x: &Array2<F>) -> Result<()> {
        if x.ncols() != self.arch.input_len() {
            return Err(Error::contract(format!(
                "input has {} columns, architecture expects {}",
                x.ncols(),
                self.arch.input_len()
            )));
        }
        Ok(())
    }

    pub fn features(&self, x: &Array2<F>) -> Result<Array2<F>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let f = self.features_node(&mut g, xv)?;
        Ok(g.value(f).clone())
    }

    pub fn encode(&self, x: &Array2<F>, noise: &Array2<F>) -> Result<Encoded<F>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let nv = g.input(noise.clone());
        let e = self.encode_nodes(&mut g, xv, nv)?;
        Ok(Encoded {
            features: g.value(e.features).clone(),
            z: g.value(e.z).clone(),
            z_post: GaussianBatch::new(g.value(e.z_post.mean).clone(), g.value(e.z_post.log_var).clone())?,
            y: g.value(e.y).clone(),
        })
    }

    /// Deterministic encoding: posterior means for `z`, plus `y`.
    pub fn encode_mean(&self, x: &Array2<F>) -> Result<Encoded<F>> {
        self.encode(x, &Array2::zeros((x.nrows(), self.arch.d_z)))
    }

    pub fn solve(&self, which: Head, representation: &Array2<F>) -> Result<Array2<F>> {
        let mut g = Graph::new();
        let r = g.input(representation.clone());
        let out = self.solve_node(&mut g, which, r)?;
        Ok(g.value(out).clone())
    }

    pub fn discriminate(&self, features: &Array2<F>, y: &Array2<F>) -> Result<Array2<F>> {
        let mut g = Graph::new();
        let f = g.input(features.clone());
        let yv = g.input(y.clone());
        let d = self.discriminate_node(&mut g, f, yv)?;
        Ok(g.value(d).clone())
    }

    pub fn predict_cross(&self, source: &Array2<F>, direction: Direction) -> Result<Array2<F>> {
        let mut g = Graph::new();
        let s = g.input(source.clone());
        let p = self.predict_cross_node(&mut g, s, direction)?;
        Ok(g.value(p).clone())
    }
}
