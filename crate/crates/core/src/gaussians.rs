//! Diagonal-Gaussian algebra on tensors.
//!
//! A [`DiagGaussian`] holds either one distribution (`[d]` mean/log-variance)
//! or a batch of independent ones (`[B, d]`, one per row). Densities reduce
//! over the last axis, so they return `[]` or `[B]` respectively. Everything
//! is built from tape primitives and stays differentiable.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const LOG_VAR_MIN: f64 = -20.0;
pub const LOG_VAR_MAX: f64 = 20.0;

/// `½ ln 2π`.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug)]
pub struct DiagGaussian {
    mean: Tensor,
    log_var: Tensor,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    match t.data().iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::Domain { op, index, value: t.data()[index] }),
        None => Ok(()),
    }
}

impl DiagGaussian {
    /// Builds a Gaussian, clamping `log_var` into `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub fn new(mean: Tensor, log_var: Tensor) -> Result<Self> {
        if mean.shape() != log_var.shape() || mean.rank() == 0 {
            return Err(Error::shape(
                "diag_gaussian",
                format!("mean {:?} vs log_var {:?}", mean.shape(), log_var.shape()),
            ));
        }
        check_finite("diag_gaussian.mean", &mean)?;
        check_finite("diag_gaussian.log_var", &log_var)?;
        let log_var = log_var.clamp(LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(DiagGaussian { mean, log_var })
    }

    pub fn from_vecs(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        let (d, e) = (mean.len(), log_var.len());
        DiagGaussian::new(Tensor::new(mean, &[d])?, Tensor::new(log_var, &[e])?)
    }

    /// Standard normal over `d` dimensions.
    pub fn standard(d: usize) -> Result<Self> {
        DiagGaussian::from_vecs(vec![0.0; d], vec![0.0; d])
    }

    /// Standard normal with the same (batch) shape as `self`.
    pub fn standard_like(&self) -> Result<Self> {
        let shape = self.mean.shape().to_vec();
        DiagGaussian::new(Tensor::zeros(&shape)?, Tensor::zeros(&shape)?)
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn log_var(&self) -> &Tensor {
        &self.log_var
    }

    pub fn dim(&self) -> usize {
        self.mean.cols()
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub fn variance(&self) -> Result<Tensor> {
        self.log_var.exp()
    }

    pub fn precision(&self) -> Result<Tensor> {
        self.log_var.neg()?.exp()
    }

    pub fn detach(&self) -> DiagGaussian {
        DiagGaussian { mean: self.mean.detach(), log_var: self.log_var.detach() }
    }
}

/// A reparameterized draw together with the name of the distribution it came from.
#[derive(Clone, Debug)]
pub struct LatentSample {
    pub z: Tensor,
    pub source: String,
}

/// `z = mean + exp(0.5 · log_var) ⊙ noise`.
pub fn sample_reparam(g: &DiagGaussian, noise: &Tensor, source: impl Into<String>) -> Result<LatentSample> {
    if noise.shape() != g.shape() {
        return Err(Error::shape("sample_reparam", format!("noise {:?} vs gaussian {:?}", noise.shape(), g.shape())));
    }
    let std = g.log_var.scale(0.5)?.exp()?;
    let z = g.mean.add(&std.mul(noise)?)?;
    Ok(LatentSample { z, source: source.into() })
}

/// `Σ_i −½ ln 2π − ½ log_var_i − ½ (z_i − μ_i)² / exp(log_var_i)`.
pub fn log_prob_diag(g: &DiagGaussian, z: &Tensor) -> Result<Tensor> {
    if z.cols() != g.dim() || (z.rank() == 2 && g.mean.rank() == 2 && z.rows() != g.mean.rows()) {
        return Err(Error::shape("log_prob_diag", format!("z {:?} vs gaussian {:?}", z.shape(), g.shape())));
    }
    check_finite("log_prob_diag.z", z)?;
    let sq = z.sub(&g.mean)?.square()?;
    let maha = sq.mul(&g.log_var.neg()?.exp()?)?;
    let per_dim = maha.add(&g.log_var)?.scale(-0.5)?.add_scalar(-HALF_LN_2PI)?;
    per_dim.sum_axis(per_dim.rank() - 1)
}

/// Closed-form `KL(q ‖ p)` for diagonal Gaussians.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<Tensor> {
    if q.dim() != p.dim() {
        return Err(Error::shape("kl_diag", format!("{:?} vs {:?}", q.shape(), p.shape())));
    }
    let var_q = q.log_var.exp()?;
    let inv_var_p = p.log_var.neg()?.exp()?;
    let diff_sq = q.mean.sub(&p.mean)?.square()?;
    let ratio = var_q.add(&diff_sq)?.mul(&inv_var_p)?;
    let per_dim = p.log_var.sub(&q.log_var)?.add(&ratio)?.add_scalar(-1.0)?.scale(0.5)?;
    per_dim.sum_axis(per_dim.rank() - 1)
}

/// Precision-weighted product of experts, optionally with a standard-normal prior expert.
pub fn poe_fuse(experts: &[DiagGaussian], include_standard_prior: bool) -> Result<DiagGaussian> {
    let first = experts.first().ok_or_else(|| Error::contract("poe_fuse needs at least one expert"))?;
    check_same_dims("poe_fuse", experts)?;
    let mut precision = first.precision()?;
    let mut weighted = precision.mul(&first.mean)?;
    for e in &experts[1..] {
        let p = e.precision()?;
        weighted = weighted.add(&p.mul(&e.mean)?)?;
        precision = precision.add(&p)?;
    }
    if include_standard_prior {
        precision = precision.add_scalar(1.0)?;
    }
    let mean = weighted.div(&precision)?;
    let log_var = precision.log()?.neg()?;
    DiagGaussian::new(mean, log_var)
}

/// Arithmetic mean of means and of variances.
pub fn moment_average(experts: &[DiagGaussian]) -> Result<DiagGaussian> {
    let first = experts.first().ok_or_else(|| Error::contract("moment_average needs at least one expert"))?;
    check_same_dims("moment_average", experts)?;
    if experts.len() == 1 {
        return Ok(first.clone());
    }
    let k = experts.len() as f64;
    let mut mean = first.mean.clone();
    let mut var = first.variance()?;
    for e in &experts[1..] {
        mean = mean.add(&e.mean)?;
        var = var.add(&e.variance()?)?;
    }
    DiagGaussian::new(mean.scale(1.0 / k)?, var.scale(1.0 / k)?.log()?)
}

fn check_same_dims(op: &'static str, gs: &[DiagGaussian]) -> Result<()> {
    let shape = gs[0].shape();
    if gs.iter().any(|g| g.shape() != shape) {
        let shapes: Vec<_> = gs.iter().map(|g| g.shape().to_vec()).collect();
        return Err(Error::shape(op, format!("experts disagree on shape: {shapes:?}")));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GaussianMixture {
    components: Vec<DiagGaussian>,
    weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<DiagGaussian>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::contract("mixture needs at least one component"));
        }
        if weights.len() != components.len() {
            return Err(Error::shape("mixture", format!("{} weights for {} components", weights.len(), components.len())));
        }
        check_same_dims("mixture", &components)?;
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("mixture weights must be a probability vector, got {weights:?}")));
        }
        Ok(GaussianMixture { components, weights })
    }

    pub fn uniform(components: Vec<DiagGaussian>) -> Result<Self> {
        let k = components.len().max(1);
        GaussianMixture::new(components, vec![1.0 / k as f64; k])
    }

    pub fn components(&self) -> &[DiagGaussian] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// Weighted average of component means.
    pub fn mean(&self) -> Result<Tensor> {
        let mut acc = self.components[0].mean.scale(self.weights[0])?;
        for (c, w) in self.components.iter().zip(&self.weights).skip(1) {
            acc = acc.add(&c.mean.scale(*w)?)?;
        }
        Ok(acc)
    }
}

/// `log Σ_k w_k exp(log_prob_diag(comp_k, z))`, via log-sum-exp.
pub fn mixture_log_prob(m: &GaussianMixture, z: &Tensor) -> Result<Tensor> {
    if z.cols() != m.dim() {
        return Err(Error::shape("mixture_log_prob", format!("z {:?} vs dim {}", z.shape(), m.dim())));
    }
    let per_comp: Vec<Tensor> = m.components.iter().map(|c| log_prob_diag(c, z)).collect::<Result<_>>()?;
    let out_shape = per_comp[0].shape().to_vec();
    let stacked = Tensor::stack_cols(&per_comp)?;
    let log_w = Tensor::vector(m.weights.iter().map(|w| w.ln()).collect());
    let lse = stacked.add(&log_w)?.logsumexp()?;
    lse.reshape(&out_shape)
}
