//! Diagonal Gaussian posteriors, reparameterized sampling, and the KL
//! divergence to the standard normal prior.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::graph::{Graph, Real, Var};

/// `N(mean, diag(exp(log_var)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian<F> {
    mean: Array1<F>,
    log_var: Array1<F>,
}

impl<F: Real> DiagGaussian<F> {
    pub fn new(mean: Array1<F>, log_var: Array1<F>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::contract(format!(
                "gaussian mean has {} entries but log_var has {}",
                mean.len(),
                log_var.len()
            )));
        }
        if mean.iter().chain(log_var.iter()).any(|v| !v.is_finite()) {
            return Err(Error::contract("gaussian parameters must be finite"));
        }
        Ok(Self { mean, log_var })
    }

    pub fn from_slices(mean: &[F], log_var: &[F]) -> Result<Self> {
        Self::new(Array1::from(mean.to_vec()), Array1::from(log_var.to_vec()))
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            log_var: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<F> {
        &self.mean
    }

    pub fn log_var(&self) -> &Array1<F> {
        &self.log_var
    }

    /// Log-density at `z`.
    pub fn log_density(&self, z: &[F]) -> Result<F> {
        self.check_dim(z.len())?;
        let half = F::from_f64(0.5);
        let ln_2pi = F::from_f64((2.0 * std::f64::consts::PI).ln());
        Ok(z
            .iter()
            .zip(self.mean.iter().zip(self.log_var.iter()))
            .map(|(&zi, (&m, &lv))| {
                let d = zi - m;
                -half * (ln_2pi + lv + d * d / lv.exp())
            })
            .sum())
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::contract(format!(
                "expected a vector of dimension {}, got {n}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// `mean + exp(log_var / 2) * noise`, with `noise ~ N(0, I)` supplied by the
/// caller.
pub fn sample_reparam<F: Real>(g: &DiagGaussian<F>, noise: &[F]) -> Result<Array1<F>> {
    g.check_dim(noise.len())?;
    let half = F::from_f64(0.5);
    Ok(g.mean
        .iter()
        .zip(g.log_var.iter())
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect())
}

/// `KL[g || N(0, I)]`, summed over dimensions.
pub fn kl_to_standard<F: Real>(g: &DiagGaussian<F>) -> F {
    let half = F::from_f64(0.5);
    g.mean
        .iter()
        .zip(g.log_var.iter())
        .map(|(&m, &lv)| half * (m * m + lv.exp() - F::one() - lv))
        .sum()
}

/// A batch of diagonal Gaussians, one per row, as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct GaussianNodes {
    pub mean: Var,
    pub log_var: Var,
}

/// A batch of diagonal Gaussians, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBatch<F> {
    pub mean: Array2<F>,
    pub log_var: Array2<F>,
}

impl<F: Real> GaussianBatch<F> {
    pub fn new(mean: Array2<F>, log_var: Array2<F>) -> Result<Self> {
        if mean.dim() != log_var.dim() {
            return Err(Error::contract(format!(
                "posterior batch shapes differ: {:?} vs {:?}",
                mean.dim(),
                log_var.dim()
            )));
        }
        Ok(Self { mean, log_var })
    }

    pub fn from_posteriors(posteriors: &[DiagGaussian<F>]) -> Result<Self> {
        let first = posteriors
            .first()
            .ok_or_else(|| Error::contract("empty posterior batch"))?;
        let d = first.dim();
        let mut mean = Array2::zeros((posteriors.len(), d));
        let mut log_var = Array2::zeros((posteriors.len(), d));
        for (i, p) in posteriors.iter().enumerate() {
            p.check_dim(d)?;
            mean.row_mut(i).assign(&p.mean);
            log_var.row_mut(i).assign(&p.log_var);
        }
        Ok(Self { mean, log_var })
    }

    pub fn len(&self) -> usize {
        self.mean.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.nrows() == 0
    }

    pub fn get(&self, i: usize) -> DiagGaussian<F> {
        DiagGaussian {
            mean: self.mean.row(i).to_owned(),
            log_var: self.log_var.row(i).to_owned(),
        }
    }
}

/// Differentiable reparameterized sample of a posterior batch.
pub fn sample_reparam_nodes<F: Real>(g: &mut Graph<F>, post: GaussianNodes, noise: Var) -> Result<Var> {
    let half_lv = g.scale(post.log_var, F::from_f64(0.5));
    let std = g.exp(half_lv);
    let scaled = g.mul(std, noise)?;
    g.add(post.mean, scaled)
}

/// Per-element KL contributions `0.5 (m^2 + e^lv - 1 - lv)` of a posterior
/// batch; summing a row gives that sample's KL to the standard normal.
pub fn kl_to_standard_nodes<F: Real>(g: &mut Graph<F>, post: GaussianNodes) -> Result<Var> {
    let m2 = g.mul(post.mean, post.mean)?;
    let var = g.exp(post.log_var);
    let a = g.add(m2, var)?;
    let b = g.sub(a, post.log_var)?;
    Ok(g.affine(b, F::from_f64(0.5), F::from_f64(-0.5)))
}
