//! Multimodal VAEs: per-modality MLP encoders and decoders, and the
//! independent, aggregated and MMVM training objectives.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, joint_sample, AggregationKind, ComponentSelector};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::gaussians::{kl_diag, log_prob_diag, sample_reparam, DiagGaussian, LatentSample, HALF_LN_2PI};
use crate::nn::{as_batch, mlp_forward, mlp_shapes};

mod train;

pub use train::{
    conditional_generate, encode, extract_representations, load_model, prior_generate, save_model, train_model,
    Representation, TrainConfig, TrainedModel, TrainingLog,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Likelihood {
    /// Gaussian with fixed standard deviation; the decoder outputs the mean.
    Gaussian { sigma: f64 },
    /// Independent Bernoulli per coordinate; the decoder outputs logits.
    Bernoulli,
}

impl Default for Likelihood {
    fn default() -> Self {
        Likelihood::Gaussian { sigma: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelKind {
    Independent,
    Aggregated(AggregationKind),
    Mmvm,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Independent,
        ModelKind::Aggregated(AggregationKind::Avg),
        ModelKind::Aggregated(AggregationKind::Poe),
        ModelKind::Aggregated(AggregationKind::Moe),
        ModelKind::Aggregated(AggregationKind::Mopoe),
        ModelKind::Mmvm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Independent => "independent",
            ModelKind::Aggregated(k) => k.as_str(),
            ModelKind::Mmvm => "mmvm",
        }
    }

    /// Whether a joint representation exists for this kind.
    pub fn has_joint(self) -> bool {
        matches!(self, ModelKind::Aggregated(_))
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(ModelKind::Independent),
            "mmvm" => Ok(ModelKind::Mmvm),
            other => other
                .parse::<AggregationKind>()
                .map(ModelKind::Aggregated)
                .map_err(|_| Error::contract(format!("unknown model kind {other:?}"))),
        }
    }
}

impl TryFrom<String> for ModelKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelKind> for String {
    fn from(k: ModelKind) -> String {
        k.as_str().to_string()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixtureSampling {
    /// One sample from every mixture component, objectives averaged over them.
    #[default]
    Stratified,
    /// One uniformly drawn component per row.
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub modality_dims: Vec<usize>,
    pub latent_dim: usize,
    pub hidden_sizes: Vec<usize>,
    #[serde(default)]
    pub likelihood: Likelihood,
    #[serde(default = "default_beta")]
    pub beta: f64,
    pub kind: ModelKind,
    /// Stop gradients through the mixture prior of the MMVM objective.
    #[serde(default)]
    pub detach_prior: bool,
    #[serde(default)]
    pub mixture_sampling: MixtureSampling,
}

fn default_beta() -> f64 {
    1.0
}

impl ModelSpec {
    pub fn new(modality_dims: Vec<usize>, latent_dim: usize, hidden_sizes: Vec<usize>, kind: ModelKind) -> Self {
        ModelSpec {
            modality_dims,
            latent_dim,
            hidden_sizes,
            likelihood: Likelihood::default(),
            beta: 1.0,
            kind,
            detach_prior: false,
            mixture_sampling: MixtureSampling::Stratified,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.modality_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.modality_dims.is_empty() || self.modality_dims.contains(&0) {
            return Err(Error::contract(format!("modality dims must be non-empty and positive: {:?}", self.modality_dims)));
        }
        if self.latent_dim == 0 {
            return Err(Error::contract("latent_dim must be at least 1"));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::contract("hidden sizes must be positive"));
        }
        if let Likelihood::Gaussian { sigma } = self.likelihood {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::contract(format!("gaussian sigma must be positive, got {sigma}")));
            }
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::contract(format!("beta must be finite and >= 0, got {}", self.beta)));
        }
        if self.num_modalities() >= 16 {
            return Err(Error::contract("at most 15 modalities are supported"));
        }
        Ok(())
    }

    /// Noise blocks consumed per step: enough for MMVM/independent (one per
    /// modality) and for stratified MoPoE (one per subset), whatever the kind.
    pub fn noise_blocks(&self) -> usize {
        let m = self.num_modalities();
        m.max((1usize << m) - 1)
    }

    fn layers_per_net(&self) -> usize {
        self.hidden_sizes.len() + 1
    }

    pub fn encoder_sizes(&self, m: usize) -> Vec<usize> {
        let mut s = vec![self.modality_dims[m]];
        s.extend(&self.hidden_sizes);
        s.push(2 * self.latent_dim);
        s
    }

    pub fn decoder_sizes(&self, m: usize) -> Vec<usize> {
        let mut s = vec![self.latent_dim];
        s.extend(self.hidden_sizes.iter().rev());
        s.push(self.modality_dims[m]);
        s
    }

    /// All parameter shapes: every encoder, then every decoder.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let m = self.num_modalities();
        let enc = (0..m).flat_map(|i| mlp_shapes(&self.encoder_sizes(i)));
        let dec = (0..m).flat_map(|i| mlp_shapes(&self.decoder_sizes(i)));
        enc.chain(dec).collect()
    }

    /// Indices of encoder `m`'s tensors within `param_shapes()`.
    pub fn encoder_range(&self, m: usize) -> std::ops::Range<usize> {
        let n = 2 * self.layers_per_net();
        m * n..(m + 1) * n
    }

    pub fn decoder_range(&self, m: usize) -> std::ops::Range<usize> {
        let n = 2 * self.layers_per_net();
        let off = self.num_modalities() * n;
        off + m * n..off + (m + 1) * n
    }
}

/// Reparameterization noise for one step: `noise_blocks()` standard-normal
/// `[B, d]` blocks, plus per-row component choices for categorical sampling.
#[derive(Clone, Debug)]
pub struct StepNoise {
    pub blocks: Vec<Tensor>,
    pub components: Option<Vec<usize>>,
}

impl StepNoise {
    pub fn draw<R: Rng>(spec: &ModelSpec, rows: usize, rng: &mut R) -> Result<Self> {
        let d = spec.latent_dim;
        let blocks = (0..spec.noise_blocks())
            .map(|_| Tensor::new((0..rows * d).map(|_| rng.sample(StandardNormal)).collect(), &[rows, d]))
            .collect::<Result<_>>()?;
        Ok(StepNoise { blocks, components: None })
    }

    pub fn zeros(spec: &ModelSpec, rows: usize) -> Result<Self> {
        let blocks = (0..spec.noise_blocks())
            .map(|_| Tensor::zeros(&[rows, spec.latent_dim]))
            .collect::<Result<_>>()?;
        Ok(StepNoise { blocks, components: None })
    }

    fn block(&self, i: usize) -> Result<&Tensor> {
        self.blocks
            .get(i)
            .ok_or_else(|| Error::contract(format!("noise block {i} missing ({} supplied)", self.blocks.len())))
    }
}

/// A model's parameters bound as tensors (constants or tape leaves).
pub struct Net<'a> {
    spec: &'a ModelSpec,
    params: Vec<Tensor>,
}

/// Per-modality one-sample `log q_m(z_m) − log h_m(z_m)` values, each of shape `[B]`, and their sum.
#[derive(Clone, Debug)]
pub struct MmvmRegularizer {
    pub per_modality: Vec<Tensor>,
    pub total: Tensor,
}

impl<'a> Net<'a> {
    pub fn new(spec: &'a ModelSpec, params: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, s)| p.shape() != s.as_slice()) {
            return Err(Error::contract("parameter tensors do not match the model spec"));
        }
        Ok(Net { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        self.spec
    }

    fn check_modality(&self, m: usize) -> Result<()> {
        if m >= self.spec.num_modalities() {
            return Err(Error::contract(format!("modality {m} out of range for {} modalities", self.spec.num_modalities())));
        }
        Ok(())
    }

    /// Posterior `q(z | x_m)` for a batch `[B, D_m]` (or a single row `[D_m]`).
    pub fn encode(&self, m: usize, x: &Tensor) -> Result<DiagGaussian> {
        self.check_modality(m)?;
        let x = as_batch(x)?;
        if x.cols() != self.spec.modality_dims[m] {
            return Err(Error::shape(
                "encode",
                format!("modality {m} expects dim {}, got {:?}", self.spec.modality_dims[m], x.shape()),
            ));
        }
        let h = mlp_forward(&x, &self.params[self.spec.encoder_range(m)])?;
        let d = self.spec.latent_dim;
        DiagGaussian::new(h.slice(1, 0, d)?, h.slice(1, d, 2 * d)?)
    }

    /// Raw decoder output: the mean (gaussian) or logits (bernoulli), `[B, D_m]`.
    pub fn decode_raw(&self, m: usize, z: &Tensor) -> Result<Tensor> {
        self.check_modality(m)?;
        let z = as_batch(z)?;
        if z.cols() != self.spec.latent_dim {
            return Err(Error::shape("decode", format!("latent dim {} vs z {:?}", self.spec.latent_dim, z.shape())));
        }
        mlp_forward(&z, &self.params[self.spec.decoder_range(m)])
    }

    /// Decoder mean in data space.
    pub fn decode_mean(&self, m: usize, z: &Tensor) -> Result<Tensor> {
        let raw = self.decode_raw(m, z)?;
        match self.spec.likelihood {
            Likelihood::Gaussian { .. } => Ok(raw),
            Likelihood::Bernoulli => raw.sigmoid(),
        }
    }

    /// Per-row `log p(x_m | z)`, shape `[B]`.
    pub fn decode_loglik(&self, m: usize, z: &Tensor, x: &Tensor) -> Result<Tensor> {
        let out = self.decode_raw(m, z)?;
        let x = as_batch(x)?;
        if x.shape() != out.shape() {
            return Err(Error::shape("decode_loglik", format!("x {:?} vs decoder output {:?}", x.shape(), out.shape())));
        }
        match self.spec.likelihood {
            Likelihood::Gaussian { sigma } => {
                let d = x.cols() as f64;
                let norm = d * (HALF_LN_2PI + sigma.ln());
                let sq = x.sub(&out)?.square()?.sum_axis(1)?;
                sq.scale(-0.5 / (sigma * sigma))?.add_scalar(-norm)
            }
            Likelihood::Bernoulli => {
                if let Some(i) = x.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Domain { op: "bernoulli loglik", index: i, value: x.data()[i] });
                }
                // x·l − softplus(l) = x ln σ(l) + (1 − x) ln(1 − σ(l))
                x.mul(&out)?.sub(&out.softplus()?)?.sum_axis(1)
            }
        }
    }

    fn check_inputs(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        if xs.len() != self.spec.num_modalities() {
            return Err(Error::contract(format!("{} modality inputs for {} modalities", xs.len(), self.spec.num_modalities())));
        }
        let xs: Vec<Tensor> = xs.iter().map(as_batch).collect::<Result<_>>()?;
        if xs.iter().any(|x| x.rows() != xs[0].rows()) {
            return Err(Error::shape("objective", "modalities disagree on batch size"));
        }
        Ok(xs)
    }

    fn encode_all(&self, xs: &[Tensor]) -> Result<Vec<DiagGaussian>> {
        xs.iter().enumerate().map(|(m, x)| self.encode(m, x)).collect()
    }

    fn reconstruction(&self, z: &Tensor, xs: &[Tensor]) -> Result<Tensor> {
        let mut acc = self.decode_loglik(0, z, &xs[0])?;
        for (m, x) in xs.iter().enumerate().skip(1) {
            acc = acc.add(&self.decode_loglik(m, z, x)?)?;
        }
        Ok(acc)
    }

    /// Batch mean of `Σ_m [log p(x_m | z_m) − β KL(q_m ‖ N(0, I))]`, one sample `z_m` per modality.
    pub fn elbo_independent(&self, xs: &[Tensor], noise: &StepNoise) -> Result<Tensor> {
        if self.spec.kind != ModelKind::Independent {
            return Err(Error::contract(format!("elbo_independent called on a {} model", self.spec.kind)));
        }
        let xs = self.check_inputs(xs)?;
        let mut total: Option<Tensor> = None;
        for (m, x) in xs.iter().enumerate() {
            let q = self.encode(m, x)?;
            let z = sample_reparam(&q, noise.block(m)?, format!("q{m}"))?.z;
            let kl = kl_diag(&q, &q.standard_like()?)?;
            let term = self.decode_loglik(m, &z, x)?.sub(&kl.scale(self.spec.beta)?)?;
            total = Some(match total {
                None => term,
                Some(t) => t.add(&term)?,
            });
        }
        total.expect("at least one modality").mean()
    }

    /// Batch mean of the joint ELBO under the aggregated posterior.
    ///
    /// Single-Gaussian posteriors use the closed-form KL to the prior. Mixtures
    /// use the one-sample `log p(z) − log q(z)` per drawn component, averaged
    /// over components when sampling is stratified.
    pub fn elbo_aggregated(&self, xs: &[Tensor], noise: &StepNoise) -> Result<Tensor> {
        let ModelKind::Aggregated(kind) = self.spec.kind else {
            return Err(Error::contract(format!("elbo_aggregated called on a {} model", self.spec.kind)));
        };
        let xs = self.check_inputs(xs)?;
        let qs = self.encode_all(&xs)?;
        let jp = aggregate(kind, &qs)?;
        let beta = self.spec.beta;
        if let Some(g) = jp.as_gaussian() {
            let z = sample_reparam(g, noise.block(0)?, kind.as_str())?.z;
            let kl = kl_diag(g, &g.standard_like()?)?;
            return self.reconstruction(&z, &xs)?.sub(&kl.scale(beta)?)?.mean();
        }
        let selector = match self.spec.mixture_sampling {
            MixtureSampling::Stratified => ComponentSelector::Stratified,
            MixtureSampling::Categorical => ComponentSelector::Categorical(
                noise
                    .components
                    .clone()
                    .ok_or_else(|| Error::contract("categorical sampling needs component choices"))?,
            ),
        };
        let draws = joint_sample(&jp, &noise.blocks, &selector)?;
        let prior = qs[0].standard_like()?;
        let n = draws.len() as f64;
        let mut acc: Option<Tensor> = None;
        for d in &draws {
            let z = &d.sample.z;
            let log_ratio = log_prob_diag(&prior, z)?.sub(&jp.log_prob(z)?)?;
            let term = self.reconstruction(z, &xs)?.add(&log_ratio.scale(beta)?)?;
            acc = Some(match acc {
                None => term,
                Some(a) => a.add(&term)?,
            });
        }
        acc.expect("at least one draw").scale(1.0 / n)?.mean()
    }

    /// Batch mean of `Σ_m log p(x_m | z_m) − β Σ_m [log q_m(z_m) − log h_m(z_m)]`.
    pub fn mmvm_objective(&self, xs: &[Tensor], noise: &StepNoise) -> Result<Tensor> {
        if self.spec.kind != ModelKind::Mmvm {
            return Err(Error::contract(format!("mmvm_objective called on a {} model", self.spec.kind)));
        }
        let xs = self.check_inputs(xs)?;
        let qs = self.encode_all(&xs)?;
        let samples: Vec<LatentSample> = qs
            .iter()
            .enumerate()
            .map(|(m, q)| sample_reparam(q, noise.block(m)?, format!("q{m}")))
            .collect::<Result<_>>()?;
        let mut rec = self.decode_loglik(0, &samples[0].z, &xs[0])?;
        for m in 1..xs.len() {
            rec = rec.add(&self.decode_loglik(m, &samples[m].z, &xs[m])?)?;
        }
        let reg = mmvm_regularizer_with(&qs, &samples, self.spec.detach_prior)?;
        rec.sub(&reg.total.scale(self.spec.beta)?)?.mean()
    }

    /// The spec's training objective (to maximize).
    pub fn objective(&self, xs: &[Tensor], noise: &StepNoise) -> Result<Tensor> {
        match self.spec.kind {
            ModelKind::Independent => self.elbo_independent(xs, noise),
            ModelKind::Aggregated(_) => self.elbo_aggregated(xs, noise),
            ModelKind::Mmvm => self.mmvm_objective(xs, noise),
        }
    }
}

/// One-sample estimate of `Σ_m KL(q_m ‖ h_m)` with `h_m = (1/M) Σ_k q_k`.
pub fn mmvm_regularizer(posteriors: &[DiagGaussian], samples: &[LatentSample]) -> Result<MmvmRegularizer> {
    mmvm_regularizer_with(posteriors, samples, false)
}

/// As [`mmvm_regularizer`], optionally treating the mixture `h` as a constant.
///
/// Each term is evaluated as `ln M − lse_k(log q_k(z_m) − log q_m(z_m))`.
/// The `k = m` entry is exactly 0, so the log-sum-exp is never negative and
/// every term is at most `ln M` in floating point too; identical posteriors
/// give exactly 0.
pub fn mmvm_regularizer_with(
    posteriors: &[DiagGaussian],
    samples: &[LatentSample],
    detach_prior: bool,
) -> Result<MmvmRegularizer> {
    if posteriors.is_empty() || posteriors.len() != samples.len() {
        return Err(Error::contract(format!(
            "mmvm_regularizer needs one sample per posterior, got {} posteriors and {} samples",
            posteriors.len(),
            samples.len()
        )));
    }
    let m_count = posteriors.len();
    let ln_m = (m_count as f64).ln();
    let h: Vec<DiagGaussian> =
        if detach_prior { posteriors.iter().map(DiagGaussian::detach).collect() } else { posteriors.to_vec() };
    let mut per_modality = Vec::with_capacity(m_count);
    for (m, (q, s)) in posteriors.iter().zip(samples).enumerate() {
        let z = as_batch(&s.z)?;
        let own = log_prob_diag(q, &z)?;
        let diffs: Vec<Tensor> = h
            .iter()
            .enumerate()
            .map(|(k, hk)| if k == m && !detach_prior { own.scale(0.0) } else { log_prob_diag(hk, &z)?.sub(&own) })
            .collect::<Result<_>>()?;
        let lse = Tensor::stack_cols(&diffs)?.logsumexp()?;
        per_modality.push(lse.neg()?.add_scalar(ln_m)?);
    }
    let mut total = per_modality[0].clone();
    for t in &per_modality[1..] {
        total = total.add(t)?;
    }
    Ok(MmvmRegularizer { per_modality, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    #[test]
    fn kind_strings_round_trip() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(serde_json::from_str::<ModelKind>(&json).unwrap(), k);
        }
        assert!("vae".parse::<ModelKind>().is_err());
    }

    #[test]
    fn param_layout_shapes() {
        let spec = ModelSpec::new(vec![5, 7], 2, vec![4, 3], ModelKind::Mmvm);
        let shapes = spec.param_shapes();
        assert_eq!(shapes.len(), 4 * 3 * 2);
        assert_eq!(shapes[0], vec![5, 4]);
        assert_eq!(shapes[5], vec![4]);
        assert_eq!(shapes[6], vec![7, 4]);
        assert_eq!(shapes[12], vec![2, 3]);
        assert_eq!(shapes[23], vec![7]);
        assert_eq!(spec.noise_blocks(), 3);
    }

    #[test]
    fn spec_validation() {
        let ok = ModelSpec::new(vec![3], 1, vec![], ModelKind::Independent);
        assert!(ok.validate().is_ok());
        let mut bad = ok.clone();
        bad.latent_dim = 0;
        assert!(bad.validate().is_err());
        let mut bad = ok.clone();
        bad.likelihood = Likelihood::Gaussian { sigma: 0.0 };
        assert!(bad.validate().is_err());
        let mut bad = ok;
        bad.beta = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn regularizer_zero_for_identical_and_single() {
        let q = DiagGaussian::new(
            Tensor::new(vec![0.3, -0.2, 1.0, 0.5], &[2, 2]).unwrap(),
            Tensor::new(vec![0.1, -0.4, 0.0, 0.7], &[2, 2]).unwrap(),
        )
        .unwrap();
        let mut r = rng(5);
        for m in 1..=4 {
            let qs = vec![q.clone(); m];
            let samples: Vec<_> = (0..m)
                .map(|_| {
                    let eps = Tensor::new((0..4).map(|_| r.sample(StandardNormal)).collect(), &[2, 2]).unwrap();
                    sample_reparam(&q, &eps, "q").unwrap()
                })
                .collect();
            for detach in [false, true] {
                let reg = mmvm_regularizer_with(&qs, &samples, detach).unwrap();
                assert!(reg.total.data().iter().all(|&v| v == 0.0), "M={m}: {:?}", reg.total.data());
            }
        }
        assert!(mmvm_regularizer(&[q.clone()], &[]).is_err());
    }
}
