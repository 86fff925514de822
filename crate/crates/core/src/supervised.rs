//! Fully supervised multi-label baselines: unimodal MLP classifiers, their
//! score-averaging ensemble, and a late-fusion bimodal classifier.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader, CheckpointKind};
use crate::diffcore::{backward, reset_tape, AdamConfig, AdamState, Tensor};
use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::matrix::Matrix;
use crate::nn::{init_mlp, mlp_shapes, rows_tensor, Params};
use crate::seed::child_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    None,
    /// Average the per-modality trunk features, then apply one shared head.
    LateFusion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisedConfig {
    /// Trunk layer sizes; the last one is the feature dimension.
    pub hidden_sizes: Vec<usize>,
    /// Upper bound on epochs.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Stop after this many epochs without a better validation score.
    pub patience: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig { hidden_sizes: vec![64, 64], epochs: 60, batch_size: 64, lr: 1e-3, patience: 10 }
    }
}

/// Input matrices (one per used modality) and an `n × L` 0/1 label matrix.
#[derive(Clone, Copy, Debug)]
pub struct LabeledSet<'a> {
    pub xs: &'a [Matrix],
    pub labels: &'a Matrix,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SupervisedLog {
    pub train_loss: Vec<f64>,
    /// Validation macro-AUROC (or negated BCE when no label has both classes) per epoch.
    pub val_score: Vec<f64>,
    /// Epoch (1-based) whose parameters were kept; 0 for the initialization.
    pub best_epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub input_dims: Vec<usize>,
    pub hidden_sizes: Vec<usize>,
    pub label_count: usize,
    pub fusion: Fusion,
    pub params: Params,
    pub log: SupervisedLog,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Layout {
    input_dims: Vec<usize>,
    hidden_sizes: Vec<usize>,
    label_count: usize,
    fusion: Fusion,
}

impl ClassifierParams {
    /// Random initialization from `(seed, "init")`.
    pub fn init(input_dims: &[usize], hidden_sizes: &[usize], label_count: usize, fusion: Fusion, seed: u64) -> Result<Self> {
        match (fusion, input_dims.len()) {
            (Fusion::None, 1) | (Fusion::LateFusion, 2..) => {}
            (Fusion::None, n) => return Err(Error::contract(format!("an unfused classifier takes 1 modality, got {n}"))),
            (Fusion::LateFusion, n) => return Err(Error::contract(format!("late fusion needs at least 2 modalities, got {n}"))),
        }
        if label_count == 0 || input_dims.contains(&0) || hidden_sizes.contains(&0) {
            return Err(Error::contract("classifier dims must be positive"));
        }
        let feat: Vec<usize> = input_dims.iter().map(|&d| hidden_sizes.last().copied().unwrap_or(d)).collect();
        if feat.iter().any(|&f| f != feat[0]) {
            return Err(Error::contract("late fusion needs equal feature sizes; set hidden_sizes"));
        }
        let mut rng = child_rng(seed, "init", 0);
        let mut shapes = Vec::new();
        let mut values = Vec::new();
        for &d in input_dims {
            let sizes = trunk_sizes(d, hidden_sizes);
            shapes.extend(mlp_shapes(&sizes));
            values.extend(init_mlp(&sizes, &mut rng));
        }
        let head = [feat[0], label_count];
        shapes.extend(mlp_shapes(&head));
        values.extend(init_mlp(&head, &mut rng));
        Ok(ClassifierParams {
            input_dims: input_dims.to_vec(),
            hidden_sizes: hidden_sizes.to_vec(),
            label_count,
            fusion,
            params: Params { shapes, values },
            log: SupervisedLog::default(),
        })
    }

    pub fn net(&self) -> ClassifierNet<'_> {
        ClassifierNet { p: self, t: self.params.constants() }
    }

    /// Zero the head so every logit is 0.
    pub fn zero_head(&mut self) {
        let n = self.params.len();
        for v in &mut self.params.values[n - 2..] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    fn trunk_len(&self) -> usize {
        2 * self.hidden_sizes.len()
    }
}

fn trunk_sizes(d: usize, hidden: &[usize]) -> Vec<usize> {
    let mut s = vec![d];
    s.extend(hidden);
    s
}

/// Parameters bound as tensors.
pub struct ClassifierNet<'a> {
    p: &'a ClassifierParams,
    t: Vec<Tensor>,
}

impl ClassifierNet<'_> {
    /// Trunk features of input `i`: every layer followed by ReLU.
    pub fn features(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let d = *self
            .p
            .input_dims
            .get(i)
            .ok_or_else(|| Error::contract(format!("input {i} out of range")))?;
        if x.rank() != 2 || x.cols() != d {
            return Err(Error::shape("classifier", format!("input {i} expects [n, {d}], got {:?}", x.shape())));
        }
        let k = self.p.trunk_len();
        let mut h = x.clone();
        for layer in self.t[i * k..(i + 1) * k].chunks_exact(2) {
            h = h.matmul(&layer[0])?.add(&layer[1])?.relu()?;
        }
        Ok(h)
    }

    pub fn head(&self, features: &Tensor) -> Result<Tensor> {
        let n = self.t.len();
        features.matmul(&self.t[n - 2])?.add(&self.t[n - 1])
    }

    /// `[n, L]` logits; late fusion averages trunk features before the head.
    pub fn logits(&self, xs: &[Tensor]) -> Result<Tensor> {
        if xs.len() != self.p.input_dims.len() {
            return Err(Error::contract(format!("{} inputs for {} modalities", xs.len(), self.p.input_dims.len())));
        }
        let mut f = self.features(0, &xs[0])?;
        for (i, x) in xs.iter().enumerate().skip(1) {
            f = f.add(&self.features(i, x)?)?;
        }
        self.head(&f.scale(1.0 / xs.len() as f64)?)
    }
}

/// Mean over rows and labels of `softplus(l) − y·l`, the binary cross-entropy on logits.
pub fn bce_with_logits(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    if logits.shape() != labels.shape() {
        return Err(Error::shape("bce", format!("{:?} vs {:?}", logits.shape(), labels.shape())));
    }
    logits.softplus()?.sub(&labels.mul(logits)?)?.mean()
}

fn check_set(p: &ClassifierParams, set: &LabeledSet<'_>) -> Result<usize> {
    let n = set.labels.rows();
    if set.labels.cols() != p.label_count {
        return Err(Error::shape("supervised", format!("{} label columns, expected {}", set.labels.cols(), p.label_count)));
    }
    if set.xs.len() != p.input_dims.len() {
        return Err(Error::contract(format!("{} inputs for {} modalities", set.xs.len(), p.input_dims.len())));
    }
    for (x, &d) in set.xs.iter().zip(&p.input_dims) {
        if x.rows() != n || x.cols() != d {
            return Err(Error::shape("supervised", format!("input {}x{} vs {n}x{d}", x.rows(), x.cols())));
        }
    }
    if set.labels.data().iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::contract("labels must be 0/1"));
    }
    Ok(n)
}

/// Macro-AUROC over labels with both classes present, or `None` if there are none.
pub fn macro_auroc(scores: &Matrix, labels: &Matrix) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut k = 0;
    for j in 0..labels.cols() {
        let y: Vec<u8> = labels.column(j).iter().map(|&v| v as u8).collect();
        let pos = y.iter().filter(|&&v| v == 1).count();
        if pos == 0 || pos == y.len() {
            continue;
        }
        sum += auroc(&scores.column(j), &y)?.value;
        k += 1;
    }
    Ok((k > 0).then(|| sum / k as f64))
}

fn validation_score(p: &ClassifierParams, val: &LabeledSet<'_>) -> Result<f64> {
    let scores = predict_scores(p, val.xs)?;
    if let Some(a) = macro_auroc(&scores, val.labels)? {
        return Ok(a);
    }
    let eps = 1e-12;
    let bce: f64 = scores
        .data()
        .iter()
        .zip(val.labels.data())
        .map(|(&s, &y)| -(y * s.max(eps).ln() + (1.0 - y) * (1.0 - s).max(eps).ln()))
        .sum::<f64>()
        / scores.data().len() as f64;
    Ok(-bce)
}

/// Adam on mean BCE; keeps the parameters of the epoch with the best
/// validation score and stops after `patience` epochs without improvement.
pub fn train_supervised(
    cfg: &SupervisedConfig,
    train: &LabeledSet<'_>,
    val: Option<&LabeledSet<'_>>,
    fusion: Fusion,
    seed: u64,
) -> Result<ClassifierParams> {
    let dims: Vec<usize> = train.xs.iter().map(Matrix::cols).collect();
    let mut p = ClassifierParams::init(&dims, &cfg.hidden_sizes, train.labels.cols(), fusion, seed)?;
    let n = check_set(&p, train)?;
    if n == 0 {
        return Err(Error::contract("labeled training set is empty"));
    }
    if let Some(v) = val {
        check_set(&p, v)?;
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::contract("batch_size and lr must be positive"));
    }
    let sizes: Vec<usize> = p.params.values.iter().map(Vec::len).collect();
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), &sizes);
    let mut best = match val {
        Some(v) => Some((validation_score(&p, v)?, p.params.clone())),
        None => None,
    };
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut child_rng(seed, "batches", epoch as u64));
        let mut loss_sum = 0.0;
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let xs: Vec<Tensor> = train.xs.iter().map(|x| rows_tensor(x, rows)).collect::<Result<_>>()?;
            let y = rows_tensor(train.labels, rows)?;
            reset_tape();
            let leaves = p.params.leaves();
            let net = ClassifierNet { p: &p, t: leaves.clone() };
            let loss = bce_with_logits(&net.logits(&xs)?, &y)?;
            if !loss.item().is_finite() {
                return Err(Error::NumericFailure { epoch: epoch + 1, batch: b + 1, msg: format!("loss is {}", loss.item()) });
            }
            let grads = backward(&loss)?;
            let g: Vec<Vec<f64>> = leaves.iter().map(|l| grads.get(l)).collect();
            drop(net);
            let mut slices: Vec<&mut [f64]> = p.params.values.iter_mut().map(|v| v.as_mut_slice()).collect();
            adam.step(&mut slices, &g)?;
            loss_sum += loss.item() * rows.len() as f64;
        }
        reset_tape();
        p.log.train_loss.push(loss_sum / n as f64);
        if let Some(v) = val {
            let score = validation_score(&p, v)?;
            p.log.val_score.push(score);
            let (best_score, best_params) = best.as_mut().expect("set when val is present");
            if score > *best_score {
                *best_score = score;
                *best_params = p.params.clone();
                p.log.best_epoch = epoch + 1;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    break;
                }
            }
        } else {
            p.log.best_epoch = epoch + 1;
        }
    }
    if let Some((_, params)) = best {
        p.params = params;
    }
    Ok(p)
}

/// Per-label probabilities `sigmoid(logits)`, `n × L`.
pub fn predict_scores(p: &ClassifierParams, xs: &[Matrix]) -> Result<Matrix> {
    if xs.len() != p.input_dims.len() {
        return Err(Error::contract(format!("{} inputs for {} modalities", xs.len(), p.input_dims.len())));
    }
    let n = xs[0].rows();
    for (x, &d) in xs.iter().zip(&p.input_dims) {
        if x.cols() != d || x.rows() != n {
            return Err(Error::shape("predict_scores", format!("input {}x{} vs [{n}, {d}]", x.rows(), x.cols())));
        }
    }
    let net = p.net();
    let idx: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(n * p.label_count);
    for rows in idx.chunks(1024) {
        let ts: Vec<Tensor> = xs.iter().map(|x| rows_tensor(x, rows)).collect::<Result<_>>()?;
        out.extend_from_slice(net.logits(&ts)?.sigmoid()?.data());
    }
    Matrix::new(n, p.label_count, out)
}

/// Elementwise mean of equally shaped score matrices.
pub fn ensemble_scores(scores: &[Matrix]) -> Result<Matrix> {
    let first = scores.first().ok_or_else(|| Error::contract("ensemble needs at least one score matrix"))?;
    if scores.iter().any(|s| s.rows() != first.rows() || s.cols() != first.cols()) {
        return Err(Error::shape("ensemble_scores", "score matrices differ in shape"));
    }
    if scores.len() == 1 {
        return Ok(first.clone());
    }
    let k = scores.len() as f64;
    let data = (0..first.data().len())
        .map(|i| scores.iter().map(|s| s.data()[i]).sum::<f64>() / k)
        .collect();
    Matrix::new(first.rows(), first.cols(), data)
}

pub fn save_classifier(path: &Path, p: &ClassifierParams) -> Result<()> {
    let layout = Layout {
        input_dims: p.input_dims.clone(),
        hidden_sizes: p.hidden_sizes.clone(),
        label_count: p.label_count,
        fusion: p.fusion,
    };
    let header = CheckpointHeader {
        kind: CheckpointKind::Supervised,
        spec: serde_json::to_value(&layout).expect("layout serializes"),
        log: serde_json::to_value(&p.log).expect("log serializes"),
        shapes: p.params.shapes.clone(),
    };
    write_checkpoint(path, &header, &p.params.values)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierParams> {
    let (header, values) = read_checkpoint(path)?;
    if header.kind != CheckpointKind::Supervised {
        return Err(Error::parse(path, "checkpoint does not hold a supervised classifier"));
    }
    let layout: Layout = serde_json::from_value(header.spec).map_err(|e| Error::parse(path, format!("spec: {e}")))?;
    let log: SupervisedLog = serde_json::from_value(header.log).map_err(|e| Error::parse(path, format!("log: {e}")))?;
    let mut p = ClassifierParams::init(&layout.input_dims, &layout.hidden_sizes, layout.label_count, layout.fusion, 0)?;
    let params = Params { shapes: header.shapes, values };
    params.check_shapes(&p.params.shapes).map_err(|_| Error::parse(path, "parameter shapes do not match layout"))?;
    p.params = params;
    p.log = log;
    Ok(p)
}
