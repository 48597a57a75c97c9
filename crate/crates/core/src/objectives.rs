//! Term estimators of the competing objective and the loss assembler for
//! the full method and its ablations.
//!
//! Every estimator returns a minimization-oriented scalar node reduced as
//! "sum over feature dimensions, mean over the batch", so the regularization
//! weights do not depend on batch size.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{kl_to_standard_nodes, GaussianNodes};
use crate::error::{Error, Result};
use crate::graph::{Graph, Real, Var};
use crate::networks::ArchSpec;

/// Margin keeping discriminator probabilities inside `(0, 1)` before logs.
pub const PROB_EPS: f64 = 1e-7;

/// Per-dimension cap on the squared error the encoder is rewarded for.
pub const INDEPENDENCE_CAP: f64 = 10.0;

/// Which terms of the competing objective are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// All six terms: synergy, both per-part inference terms, KL bound,
    /// JS surrogate, and the independence adversary.
    #[serde(rename = "ICP")]
    Icp,
    /// Joint inference only.
    #[serde(rename = "ICP_ALL")]
    IcpAll,
    /// Joint inference plus the two information constraints, no competition.
    #[serde(rename = "ICP_COM")]
    IcpCom,
    /// `z` branch only: inference from `z` plus the KL bound.
    #[serde(rename = "VIB")]
    Vib,
    /// `y` branch only: inference from `y` plus the JS surrogate.
    #[serde(rename = "DIM_STAR")]
    DimStar,
    /// [`Variant::Vib`] with `z` widened to the full representation width.
    #[serde(rename = "VIB_X2")]
    VibX2,
    /// [`Variant::DimStar`] with `y` widened to the full representation width.
    #[serde(rename = "DIM_STAR_X2")]
    DimStarX2,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::IcpAll,
        Variant::Vib,
        Variant::DimStar,
        Variant::VibX2,
        Variant::DimStarX2,
        Variant::IcpCom,
        Variant::Icp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Icp => "ICP",
            Variant::IcpAll => "ICP_ALL",
            Variant::IcpCom => "ICP_COM",
            Variant::Vib => "VIB",
            Variant::DimStar => "DIM_STAR",
            Variant::VibX2 => "VIB_X2",
            Variant::DimStarX2 => "DIM_STAR_X2",
        }
    }

    /// Coefficients of each minimization term; zero marks an inactive term.
    pub fn weights(self, hp: &IcpHyperparams) -> TermWeights {
        let zero = TermWeights::default();
        match self {
            Variant::Icp => TermWeights {
                synergy: 1.0,
                infer_z: 1.0,
                infer_y: 1.0,
                mi_min: hp.beta,
                mi_max: hp.alpha,
                independence: hp.gamma,
            },
            Variant::IcpAll => TermWeights { synergy: 1.0, ..zero },
            Variant::IcpCom => TermWeights {
                synergy: 1.0,
                mi_min: hp.beta,
                mi_max: hp.alpha,
                ..zero
            },
            Variant::Vib | Variant::VibX2 => TermWeights {
                infer_z: 1.0,
                mi_min: hp.beta,
                ..zero
            },
            Variant::DimStar | Variant::DimStarX2 => TermWeights {
                infer_y: 1.0,
                mi_max: hp.alpha,
                ..zero
            },
        }
    }

    /// Which terms the variant optimizes, independent of weight values.
    pub fn active(self) -> ActiveTerms {
        let one = IcpHyperparams {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            variant: self,
        };
        let w = self.weights(&one);
        ActiveTerms {
            synergy: w.synergy != 0.0,
            infer_z: w.infer_z != 0.0,
            infer_y: w.infer_y != 0.0,
            mi_min: w.mi_min != 0.0,
            mi_max: w.mi_max != 0.0,
            independence: w.independence != 0.0,
        }
    }

    /// Architecture actually trained for this variant: the `x2` baselines
    /// widen their single branch to the full `d_z + d_y` width.
    pub fn effective_arch(self, arch: &ArchSpec) -> ArchSpec {
        let mut out = arch.clone();
        match self {
            Variant::VibX2 => out.d_z = arch.d_z + arch.d_y,
            Variant::DimStarX2 => out.d_y = arch.d_z + arch.d_y,
            _ => {}
        }
        out
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s
            .trim()
            .to_ascii_uppercase()
            .replace('-', "_")
            .replace("DIM*", "DIM_STAR")
            .replace('×', "_X");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| {
                Error::config(
                    "hp.variant",
                    format!(
                        "unknown variant `{s}` (expected one of {})",
                        Variant::ALL.map(|v| v.name()).join(", ")
                    ),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTerms {
    pub synergy: bool,
    pub infer_z: bool,
    pub infer_y: bool,
    pub mi_min: bool,
    pub mi_max: bool,
    pub independence: bool,
}

/// Regularization weights and the variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IcpHyperparams {
    /// Weight of the JS surrogate for `I(y, x)`.
    pub alpha: f64,
    /// Weight of the KL bound on `I(z, x)`.
    pub beta: f64,
    /// Weight of the independence adversary on `I(z, y)`.
    pub gamma: f64,
    pub variant: Variant,
}

impl Default for IcpHyperparams {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta: 0.1,
            gamma: 0.1,
            variant: Variant::Icp,
        }
    }
}

impl IcpHyperparams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("hp.alpha", self.alpha), ("hp.beta", self.beta), ("hp.gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermWeights {
    pub synergy: f64,
    pub infer_z: f64,
    pub infer_y: f64,
    pub mi_min: f64,
    pub mi_max: f64,
    pub independence: f64,
}

/// Raw estimator values feeding [`assemble_loss`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct TermInputs {
    /// Cross-entropy or reconstruction loss of the joint head.
    pub infer_r: f64,
    pub infer_z: f64,
    pub infer_y: f64,
    /// Batch-mean KL bound.
    pub mi_min: f64,
    /// [`js_mi_estimate`] value (non-positive).
    pub js_estimate: f64,
    /// Predictor squared error (capped) that the encoder wants to increase.
    pub pred_error: f64,
}

/// Per-term minimization losses and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub synergy: f64,
    /// `-js_estimate`.
    pub mi_max: f64,
    pub mi_min: f64,
    pub infer_z: f64,
    pub infer_y: f64,
    /// `-pred_error`.
    pub independence: f64,
    pub total: f64,
}

impl TermBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.synergy,
            self.mi_max,
            self.mi_min,
            self.infer_z,
            self.infer_y,
            self.independence,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Weighted sum of the variant's active terms; inactive terms are reported
/// as zero.
pub fn assemble_loss(terms: &TermInputs, hp: &IcpHyperparams) -> Result<TermBreakdown> {
    let w = hp.variant.weights(hp);
    let active = hp.variant.active();
    let pick = |on: bool, v: f64| if on { v } else { 0.0 };
    let mut b = TermBreakdown {
        synergy: pick(active.synergy, terms.infer_r),
        mi_max: pick(active.mi_max, -terms.js_estimate),
        mi_min: pick(active.mi_min, terms.mi_min),
        infer_z: pick(active.infer_z, terms.infer_z),
        infer_y: pick(active.infer_y, terms.infer_y),
        independence: pick(active.independence, -terms.pred_error),
        total: 0.0,
    };
    b.total = weighted_total(&b, &w);
    if !b.is_finite() {
        return Err(Error::Divergence {
            step: 0,
            breakdown: Box::new(b),
            last_finite: None,
        });
    }
    Ok(b)
}

/// Summation order shared by the value path and the graph path.
fn weighted_total(b: &TermBreakdown, w: &TermWeights) -> f64 {
    let mut t = 0.0;
    for (weight, term) in [
        (w.synergy, b.synergy),
        (w.infer_z, b.infer_z),
        (w.infer_y, b.infer_y),
        (w.mi_min, b.mi_min),
        (w.mi_max, b.mi_max),
        (w.independence, b.independence),
    ] {
        if weight != 0.0 {
            t += weight * term;
        }
    }
    t
}

/// Graph nodes of the raw estimators; `None` marks a term not computed.
#[derive(Debug, Clone, Copy, Default)]
pub struct TermNodes {
    pub infer_r: Option<Var>,
    pub infer_z: Option<Var>,
    pub infer_y: Option<Var>,
    pub mi_min: Option<Var>,
    pub js_estimate: Option<Var>,
    pub pred_error: Option<Var>,
}

/// Differentiable counterpart of [`assemble_loss`]: the weighted total as a
/// graph node, plus the value breakdown.
pub fn assemble_loss_nodes<F: Real>(
    g: &mut Graph<F>,
    terms: &TermNodes,
    hp: &IcpHyperparams,
) -> Result<(Var, TermBreakdown)> {
    let w = hp.variant.weights(hp);
    let value = |g: &Graph<F>, v: Option<Var>| v.map(|v| g.scalar(v).to_f64()).unwrap_or(0.0);
    let inputs = TermInputs {
        infer_r: value(g, terms.infer_r),
        infer_z: value(g, terms.infer_z),
        infer_y: value(g, terms.infer_y),
        mi_min: value(g, terms.mi_min),
        js_estimate: value(g, terms.js_estimate),
        pred_error: value(g, terms.pred_error),
    };
    let breakdown = assemble_loss(&inputs, hp)?;

    let mut total: Option<Var> = None;
    for (weight, node, sign, name) in [
        (w.synergy, terms.infer_r, 1.0, "infer_r"),
        (w.infer_z, terms.infer_z, 1.0, "infer_z"),
        (w.infer_y, terms.infer_y, 1.0, "infer_y"),
        (w.mi_min, terms.mi_min, 1.0, "mi_min"),
        (w.mi_max, terms.js_estimate, -1.0, "js_estimate"),
        (w.independence, terms.pred_error, -1.0, "pred_error"),
    ] {
        if weight == 0.0 {
            continue;
        }
        let node = node.ok_or_else(|| Error::contract(format!("active term `{name}` was not computed")))?;
        let scaled = g.scale(node, F::from_f64(sign * weight));
        total = Some(match total {
            Some(t) => g.add(t, scaled)?,
            None => scaled,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.scalar_constant(F::zero()),
    };
    Ok((total, breakdown))
}

/// Batch mean of the per-sample KL to the standard normal prior: the
/// tractable upper bound on `I(z, x)`.
pub fn mi_min_upper_bound<F: Real>(g: &mut Graph<F>, posteriors: GaussianNodes) -> Result<Var> {
    if g.shape(posteriors.mean).0 == 0 {
        return Err(Error::contract("empty posterior batch"));
    }
    let per = kl_to_standard_nodes(g, posteriors)?;
    g.batch_mean_of_sums(per)
}

/// Validates that `perm` is a derangement of `0..n`.
pub fn check_derangement(perm: &[usize], n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::contract(format!("no derangement of a batch of {n}")));
    }
    if perm.len() != n {
        return Err(Error::contract(format!("permutation has {} entries for a batch of {n}", perm.len())));
    }
    let mut seen = vec![false; n];
    for (i, &p) in perm.iter().enumerate() {
        if p >= n || seen[p] {
            return Err(Error::contract("index sequence is not a permutation"));
        }
        if p == i {
            return Err(Error::contract(format!("permutation fixes index {i}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Uniformly random derangement of `0..n` by rejection sampling.
pub fn random_derangement<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::contract(format!("no derangement of a batch of {n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

/// Reindexes `y` by a derangement so row `i` pairs with another sample's
/// `x`, giving draws from the product of marginals.
pub fn shuffle_pairs<F: Real>(g: &mut Graph<F>, y: Var, permutation: &[usize]) -> Result<Var> {
    check_derangement(permutation, g.shape(y).0)?;
    g.gather_rows(y, permutation)
}

/// `mean(log d_pos) + mean(log(1 - d_neg))`, the variational JS surrogate.
/// Probabilities are clamped to `[eps, 1 - eps]`.
pub fn js_mi_estimate<F: Real>(g: &mut Graph<F>, d_pos: Var, d_neg: Var) -> Result<Var> {
    let (np, nn) = (g.shape(d_pos).0, g.shape(d_neg).0);
    if np == 0 || nn == 0 {
        return Err(Error::contract("empty discriminator batch"));
    }
    let eps = F::from_f64(PROB_EPS);
    let hi = F::one() - eps;
    let p = g.clamp(d_pos, eps, hi);
    let lp = g.ln(p);
    let pos = g.batch_mean_of_sums(lp)?;
    let q = g.clamp(d_neg, eps, hi);
    let one_minus = g.affine(q, -F::one(), F::one());
    let lq = g.ln(one_minus);
    let neg = g.batch_mean_of_sums(lq)?;
    g.add(pos, neg)
}

/// Mean cross-entropy of logits against class labels.
pub fn supervised_inference_loss<F: Real>(g: &mut Graph<F>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Summed squared pixel error, averaged over the batch.
pub fn reconstruction_loss<F: Real>(g: &mut Graph<F>, x_hat: Var, x: Var) -> Result<Var> {
    squared_error(g, x_hat, x, None)
}

/// Summed squared error of a prediction against a target that receives no
/// gradient, averaged over the batch.
pub fn predictability_loss<F: Real>(g: &mut Graph<F>, prediction: Var, target: Var) -> Result<Var> {
    let t = g.detach(target);
    squared_error(g, prediction, t, None)
}

/// [`predictability_loss`] with each squared entry capped at `cap`: the
/// quantity the encoder maximizes.
pub fn capped_predictability_error<F: Real>(
    g: &mut Graph<F>,
    prediction: Var,
    target: Var,
    cap: f64,
) -> Result<Var> {
    let t = g.detach(target);
    squared_error(g, prediction, t, Some(cap))
}

fn squared_error<F: Real>(g: &mut Graph<F>, a: Var, b: Var, cap: Option<f64>) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::contract(format!(
            "squared error: shape mismatch {:?} vs {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    let d = g.sub(a, b)?;
    let sq = g.mul(d, d)?;
    let sq = match cap {
        Some(c) => g.clamp(sq, F::zero(), F::from_f64(c)),
        None => sq,
    };
    g.batch_mean_of_sums(sq)
}
