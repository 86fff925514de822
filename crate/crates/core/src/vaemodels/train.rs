use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{MixtureSampling, ModelSpec, Net, StepNoise};
use crate::aggregation::{aggregate, ComponentSelector};
use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CheckpointKind};
use crate::diffcore::{backward, reset_tape, AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::gaussians::{sample_reparam, DiagGaussian};
use crate::matrix::Matrix;
use crate::nn::{init_mlp, rows_tensor, tensor_to_matrix, Params};
use crate::seed::{child_rng, StreamDigest};

/// Rows per forward pass when running inference over a whole dataset.
const INFERENCE_CHUNK: usize = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    /// Mean objective (to maximize) per epoch, weighted by batch size.
    pub epoch_objectives: Vec<f64>,
    /// SHA-256 of every noise value consumed, in order.
    pub noise_digest: String,
    /// SHA-256 of every batch ordering used, in order.
    pub batch_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub params: Params,
    pub log: TrainingLog,
}

impl TrainedModel {
    /// Freshly initialized model; weights depend only on `seed` and the spec.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = child_rng(seed, "init", 0);
        let mut values = Vec::new();
        for m in 0..spec.num_modalities() {
            values.extend(init_mlp(&spec.encoder_sizes(m), &mut rng));
        }
        for m in 0..spec.num_modalities() {
            values.extend(init_mlp(&spec.decoder_sizes(m), &mut rng));
        }
        Ok(TrainedModel {
            spec: spec.clone(),
            params: Params { shapes: spec.param_shapes(), values },
            log: TrainingLog::default(),
        })
    }

    /// Parameters as constants.
    pub fn net(&self) -> Net<'_> {
        Net::new(&self.spec, self.params.constants()).expect("params built from the spec")
    }

    /// Zero the last layer of every encoder, so each posterior is N(0, I).
    pub fn zero_encoder_heads(&mut self) {
        for m in 0..self.spec.num_modalities() {
            let r = self.spec.encoder_range(m);
            for v in &mut self.params.values[r.end - 2..r.end] {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn is_trained(&self) -> bool {
        !self.log.epoch_objectives.is_empty()
    }
}

fn check_dataset(spec: &ModelSpec, data: &[Matrix]) -> Result<usize> {
    if data.len() != spec.num_modalities() {
        return Err(Error::contract(format!("{} modality matrices for {} modalities", data.len(), spec.num_modalities())));
    }
    let n = data[0].rows();
    for (m, x) in data.iter().enumerate() {
        if x.rows() != n {
            return Err(Error::shape("dataset", "modalities disagree on sample count"));
        }
        if x.cols() != spec.modality_dims[m] {
            return Err(Error::shape("dataset", format!("modality {m}: dim {} vs spec {}", x.cols(), spec.modality_dims[m])));
        }
    }
    Ok(n)
}

/// Adam ascent on the spec's objective.
///
/// Streams: initialization from `(seed, "init")`, batch order per epoch from
/// `(seed, "batches", epoch)`, reparameterization noise from `(seed, "noise")`
/// and categorical component choices from `(seed, "components")`. Every kind
/// draws the same number of noise blocks per step, so all kinds trained with
/// one seed see identical batch orders and noise.
pub fn train_model(spec: &ModelSpec, data: &[Matrix], cfg: &TrainConfig) -> Result<TrainedModel> {
    let mut model = TrainedModel::init(spec, cfg.seed)?;
    let n = check_dataset(spec, data)?;
    if n == 0 {
        return Err(Error::contract("training set is empty"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::contract(format!("batch_size and lr must be positive, got {} and {}", cfg.batch_size, cfg.lr)));
    }
    let sizes: Vec<usize> = model.params.values.iter().map(Vec::len).collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &sizes);
    let mut noise_rng = child_rng(cfg.seed, "noise", 0);
    let mut comp_rng = child_rng(cfg.seed, "components", 0);
    let mut noise_digest = StreamDigest::new();
    let mut batch_digest = StreamDigest::new();
    let k = spec.num_modalities();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut child_rng(cfg.seed, "batches", epoch as u64));
        batch_digest.update_usize(&order);
        let mut sum = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let fail = |msg: String| Error::NumericFailure { epoch: epoch + 1, batch: b + 1, msg };
            let mut noise = StepNoise::draw(spec, rows.len(), &mut noise_rng)?;
            for blk in &noise.blocks {
                noise_digest.update_f64(blk.data());
            }
            if spec.mixture_sampling == MixtureSampling::Categorical {
                let kc = match spec.kind {
                    super::ModelKind::Aggregated(a) => a.component_count(k),
                    _ => 1,
                };
                if let ComponentSelector::Categorical(c) = ComponentSelector::categorical(&mut comp_rng, kc, rows.len()) {
                    noise.components = Some(c);
                }
            }
            let xs: Vec<Tensor> = data.iter().map(|x| rows_tensor(x, rows)).collect::<Result<_>>()?;

            reset_tape();
            let leaves = model.params.leaves();
            let net = Net::new(spec, leaves.clone())?;
            let obj = net.objective(&xs, &noise).map_err(|e| match e {
                Error::Domain { .. } => fail(e.to_string()),
                other => other,
            })?;
            let value = obj.item();
            if !value.is_finite() {
                return Err(fail(format!("objective is {value}")));
            }
            let grads = backward(&obj.neg()?)?;
            let g: Vec<Vec<f64>> = leaves.iter().map(|l| grads.get(l)).collect();
            if g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(fail("non-finite gradient".into()));
            }
            let mut slices: Vec<&mut [f64]> = model.params.values.iter_mut().map(|v| v.as_mut_slice()).collect();
            adam.step(&mut slices, &g)?;
            sum += value * rows.len() as f64;
        }
        reset_tape();
        model.log.epoch_objectives.push(sum / n as f64);
    }
    model.log.noise_digest = noise_digest.hex();
    model.log.batch_digest = batch_digest.hex();
    Ok(model)
}

/// Posterior of modality `m` for every row of `x`.
pub fn encode(model: &TrainedModel, m: usize, x: &Tensor) -> Result<DiagGaussian> {
    model.net().encode(m, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Representation {
    /// Posterior mean of one modality's encoder.
    Modality(usize),
    /// Mean of the aggregated joint posterior (mixture mean for MoE/MoPoE).
    Joint,
}

/// Sampling-free `n × d` representations.
pub fn extract_representations(model: &TrainedModel, data: &[Matrix], which: Representation) -> Result<Matrix> {
    let n = check_dataset(&model.spec, data)?;
    let net = model.net();
    let kind = match (which, model.spec.kind) {
        (Representation::Joint, super::ModelKind::Aggregated(a)) => Some(a),
        (Representation::Joint, other) => {
            return Err(Error::contract(format!("no joint representation for {other} models")));
        }
        (Representation::Modality(m), _) if m >= model.spec.num_modalities() => {
            return Err(Error::contract(format!("modality {m} out of range")));
        }
        _ => None,
    };
    let d = model.spec.latent_dim;
    let mut out = Vec::with_capacity(n * d);
    let idx: Vec<usize> = (0..n).collect();
    for rows in idx.chunks(INFERENCE_CHUNK) {
        let mean = match (which, kind) {
            (Representation::Modality(m), _) => net.encode(m, &rows_tensor(&data[m], rows)?)?.mean().clone(),
            (Representation::Joint, Some(a)) => {
                let qs = data
                    .iter()
                    .enumerate()
                    .map(|(m, x)| net.encode(m, &rows_tensor(x, rows)?))
                    .collect::<Result<Vec<_>>>()?;
                aggregate(a, &qs)?.mean()?
            }
            (Representation::Joint, None) => unreachable!("checked above"),
        };
        out.extend_from_slice(mean.data());
    }
    Matrix::new(n, d, out)
}

/// Decode modality `target` from a sample of `q(z | x_source)`.
///
/// `noise` is `n × d` standard-normal noise; `None` decodes the posterior mean.
/// Aggregated kinds build their joint posterior from the source modality alone,
/// which for every aggregation reduces to the source posterior.
pub fn conditional_generate(
    model: &TrainedModel,
    source: usize,
    x_source: &Matrix,
    target: usize,
    noise: Option<&Matrix>,
) -> Result<Matrix> {
    let m = model.spec.num_modalities();
    if source >= m || target >= m {
        return Err(Error::contract(format!("modalities {source} -> {target} out of range for {m}")));
    }
    if x_source.cols() != model.spec.modality_dims[source] {
        return Err(Error::shape("conditional_generate", format!("source dim {} vs {}", x_source.cols(), model.spec.modality_dims[source])));
    }
    let n = x_source.rows();
    let d = model.spec.latent_dim;
    if let Some(e) = noise {
        if e.rows() != n || e.cols() != d {
            return Err(Error::shape("conditional_generate", format!("noise {}x{} vs {n}x{d}", e.rows(), e.cols())));
        }
    }
    let net = model.net();
    let mut out = Vec::with_capacity(n * model.spec.modality_dims[target]);
    let idx: Vec<usize> = (0..n).collect();
    for rows in idx.chunks(INFERENCE_CHUNK) {
        let q = net.encode(source, &rows_tensor(x_source, rows)?)?;
        let q = match model.spec.kind {
            super::ModelKind::Aggregated(a) => {
                aggregate(a, &[q])?.as_gaussian().cloned().expect("single-modality aggregation is Gaussian")
            }
            _ => q,
        };
        let eps = match noise {
            Some(e) => rows_tensor(e, rows)?,
            None => Tensor::zeros(&[rows.len(), d])?,
        };
        let z = sample_reparam(&q, &eps, "conditional")?.z;
        out.extend_from_slice(net.decode_mean(target, &z)?.data());
    }
    Matrix::new(n, model.spec.modality_dims[target], out)
}

/// Decode modality `target` from prior samples `z = noise`.
pub fn prior_generate(model: &TrainedModel, target: usize, noise: &Matrix) -> Result<Matrix> {
    if noise.cols() != model.spec.latent_dim {
        return Err(Error::shape("prior_generate", format!("noise dim {} vs latent {}", noise.cols(), model.spec.latent_dim)));
    }
    if target >= model.spec.num_modalities() {
        return Err(Error::contract(format!("modality {target} out of range")));
    }
    if noise.rows() == 0 {
        return Ok(Matrix::zeros(0, model.spec.modality_dims[target]));
    }
    let z = Tensor::new(noise.data().to_vec(), &[noise.rows(), noise.cols()])?;
    tensor_to_matrix(&model.net().decode_mean(target, &z)?)
}

pub fn save_model(path: &Path, model: &TrainedModel) -> Result<()> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Vae,
        spec: serde_json::to_value(&model.spec).expect("spec serializes"),
        log: serde_json::to_value(&model.log).expect("log serializes"),
        shapes: model.params.shapes.clone(),
    };
    write_checkpoint(path, &header, &model.params.values)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let (header, values) = read_checkpoint(path)?;
    if header.kind != CheckpointKind::Vae {
        return Err(Error::parse(path, "checkpoint does not hold a VAE"));
    }
    let spec: ModelSpec = serde_json::from_value(header.spec).map_err(|e| Error::parse(path, format!("spec: {e}")))?;
    spec.validate()?;
    let log: TrainingLog = serde_json::from_value(header.log).map_err(|e| Error::parse(path, format!("log: {e}")))?;
    let params = Params { shapes: header.shapes, values };
    params.check_shapes(&spec.param_shapes()).map_err(|_| Error::parse(path, "parameter shapes do not match spec"))?;
    Ok(TrainedModel { spec, params, log })
}
