//! The experiment pipelines: training every (kind, seed) job, latent probes,
//! the label-availability sweep and cross-modal generation.

use std::path::Path;

use mmvm_core::data::{
    generate_synthetic, load_dataset, subject_split, write_pgm, DataForm, Dataset, GrayImage, FRONTAL, LATERAL,
};
use mmvm_core::eval::{auroc, cap_rows, label_subsample, rf_predict, rf_train};
use mmvm_core::seed::{child_rng, derive_seed};
use mmvm_core::supervised::{ensemble_scores, predict_scores, train_supervised, Fusion, LabeledSet};
use mmvm_core::vaemodels::{
    conditional_generate, extract_representations, prior_generate, train_model, Likelihood, ModelKind, ModelSpec,
    Representation, TrainConfig, TrainedModel,
};
use mmvm_core::{Error as CoreError, Matrix};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::{DataSource, ExperimentConfig, ProbeConfig};
use crate::error::{Context, HarnessError, Result};
use crate::report::{write_matrix_csv, ResultRow, ResultTable};

/// Representation names used in result tables.
pub const Z_F: &str = "z_f";
pub const Z_L: &str = "z_l";
pub const Z_J: &str = "z_j";

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Load or generate the full dataset.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = match &cfg.data {
        DataSource::Synthetic { config } => generate_synthetic(config, derive_seed(cfg.root_seed, "data", 0)),
        DataSource::Manifest { path, load } => load_dataset(path, load),
    };
    data.map_err(|e| HarnessError::Data(format!("loading dataset: {e}")))
}

pub fn prepare_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let data = load_data(cfg)?;
    let [train, val, test] = subject_split(&data, cfg.split, derive_seed(cfg.root_seed, "split", 0))
        .map_err(|e| HarnessError::Data(format!("splitting dataset: {e}")))?;
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::Data("training or test split is empty".into()));
    }
    Ok(Splits { train, val, test })
}

pub fn model_spec(cfg: &ExperimentConfig, kind: ModelKind, data: &Dataset) -> ModelSpec {
    let v = &cfg.vae;
    let mut spec = ModelSpec::new(data.dims().to_vec(), v.latent_dim, v.hidden_sizes.clone(), kind);
    spec.likelihood = v.likelihood.unwrap_or(match data.form {
        DataForm::Vector => Likelihood::Gaussian { sigma: 1.0 },
        DataForm::Image { .. } => Likelihood::Bernoulli,
    });
    spec.beta = v.beta;
    spec.detach_prior = v.detach_prior;
    spec.mixture_sampling = v.mixture_sampling;
    spec
}

/// Training seed for repetition `seed`; shared by every model kind.
pub fn train_seed(cfg: &ExperimentConfig, seed: u64) -> u64 {
    derive_seed(cfg.root_seed, "train", seed)
}

fn probe_seed(cfg: &ExperimentConfig, seed: u64) -> u64 {
    derive_seed(cfg.root_seed, "probe", seed)
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub kind: ModelKind,
    pub seed: u64,
    pub model: TrainedModel,
}

/// Train every `(kind, seed)` pair on the training split, in parallel.
/// Results come back kind-major, seeds in config order.
pub fn train_all(cfg: &ExperimentConfig, train: &Dataset, kinds: &[ModelKind]) -> Result<Vec<TrainedRun>> {
    let xs = train.modalities().map_err(|e| HarnessError::Data(e.to_string()))?;
    let jobs: Vec<(ModelKind, u64)> = kinds.iter().flat_map(|&k| cfg.seeds.iter().map(move |&s| (k, s))).collect();
    jobs.par_iter()
        .map(|&(kind, seed)| {
            let spec = model_spec(cfg, kind, train);
            let tc = TrainConfig {
                epochs: cfg.vae.epochs,
                batch_size: cfg.vae.batch_size,
                lr: cfg.vae.lr,
                seed: train_seed(cfg, seed),
            };
            let model = train_model(&spec, &xs, &tc).context(|| format!("training {kind} (seed {seed})"))?;
            eprintln!("trained {kind} seed {seed}: final objective {:.4}", model.log.epoch_objectives.last().unwrap_or(&f64::NAN));
            Ok(TrainedRun { kind, seed, model })
        })
        .collect()
}

/// Every kind trained with one seed must have consumed the same batch orders
/// and noise.
pub fn check_fairness(runs: &[TrainedRun]) -> Result<()> {
    for a in runs {
        for b in runs.iter().filter(|b| b.seed == a.seed) {
            if a.model.log.noise_digest != b.model.log.noise_digest || a.model.log.batch_digest != b.model.log.batch_digest {
                return Err(HarnessError::Internal(format!(
                    "{} and {} saw different randomness with seed {}",
                    a.kind, b.kind, a.seed
                )));
            }
        }
    }
    Ok(())
}

fn representations(kind: ModelKind) -> Vec<(&'static str, Representation)> {
    let mut reps = vec![(Z_F, Representation::Modality(FRONTAL)), (Z_L, Representation::Modality(LATERAL))];
    if matches!(kind, ModelKind::Aggregated(_)) {
        reps.push((Z_J, Representation::Joint));
    }
    reps
}

/// Per-label test AUROC of random forests fit on rows `rows` of `z_train`.
///
/// Training sets above the configured cap are uniformly subsampled. A label
/// with a single class among the training rows yields constant scores; a
/// label with a single class in the test split is undefined and returned as
/// `None`.
fn probe(
    cfg: &ProbeConfig,
    z_train: &Matrix,
    train: &Dataset,
    rows: &[usize],
    z_test: &Matrix,
    test: &Dataset,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    let kept: Vec<usize> = cap_rows(rows.len(), cfg.max_train_representations, seed).into_iter().map(|i| rows[i]).collect();
    let x = z_train.select_rows(&kept);
    let rf = cfg.rf();
    (0..train.num_labels())
        .map(|j| {
            let y: Vec<u8> = kept.iter().map(|&i| train.samples[i].labels[j]).collect();
            let scores = if y.contains(&0) && y.contains(&1) {
                let forest = rf_train(&x, &y, &rf, derive_seed(seed, "label", j as u64))?;
                rf_predict(&forest, z_test)?
            } else {
                vec![0.5; z_test.rows()]
            };
            score_label(&scores, &test.label_column(j), &train.label_names[j])
        })
        .collect::<std::result::Result<_, CoreError>>()
        .context(|| "probing representations".into())
}

fn score_label(scores: &[f64], labels: &[u8], name: &str) -> std::result::Result<Option<f64>, CoreError> {
    match auroc(scores, labels) {
        Ok(r) => Ok(Some(r.value)),
        Err(CoreError::Degenerate(_)) => {
            eprintln!("warning: label {name:?} has one class in the test split; skipped");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

fn push_rows(out: &mut Vec<ResultRow>, method: &str, rep: &str, data: &Dataset, seed: u64, size: Option<usize>, aurocs: &[Option<f64>]) {
    for (j, a) in aurocs.iter().enumerate() {
        if let Some(v) = a {
            out.push(ResultRow {
                method: method.to_string(),
                representation: rep.to_string(),
                label: data.label_names[j].clone(),
                seed,
                size,
                auroc: *v,
            });
        }
    }
}

fn rep_rank(rep: &str) -> usize {
    [Z_F, Z_L, Z_J].iter().position(|r| *r == rep).unwrap_or(3)
}

/// Fit one probe per label on the training representations of every run and
/// score it on the test split.
pub fn run_latent_experiment(cfg: &ExperimentConfig, splits: &Splits, runs: &[TrainedRun]) -> Result<ResultTable> {
    let xtr = splits.train.modalities().map_err(|e| HarnessError::Data(e.to_string()))?;
    let xte = splits.test.modalities().map_err(|e| HarnessError::Data(e.to_string()))?;
    let all: Vec<usize> = (0..splits.train.len()).collect();
    let jobs: Vec<(&TrainedRun, &str, Representation)> =
        runs.iter().flat_map(|r| representations(r.kind).into_iter().map(move |(n, rep)| (r, n, rep))).collect();
    let parts = jobs
        .par_iter()
        .map(|&(run, name, rep)| {
            let ctx = || format!("latent probe for {} (seed {}) {name}", run.kind, run.seed);
            let ztr = extract_representations(&run.model, &xtr, rep).context(ctx)?;
            let zte = extract_representations(&run.model, &xte, rep).context(ctx)?;
            let aurocs = probe(&cfg.probe, &ztr, &splits.train, &all, &zte, &splits.test, probe_seed(cfg, run.seed))?;
            let mut rows = Vec::new();
            push_rows(&mut rows, run.kind.as_str(), name, &splits.train, run.seed, None, &aurocs);
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<ResultRow> = parts.into_iter().flatten().collect();
    sort_rows(&mut rows, cfg, &splits.train);
    Ok(ResultTable { rows })
}

/// Stable order: method (config order, then baselines), size, representation,
/// label (dataset order), seed (config order).
fn sort_rows(rows: &mut [ResultRow], cfg: &ExperimentConfig, data: &Dataset) {
    let method_rank = |m: &str| {
        cfg.models
            .iter()
            .position(|k| k.as_str() == m)
            .or_else(|| SUPERVISED_METHODS.iter().position(|s| *s == m).map(|i| cfg.models.len() + i))
            .unwrap_or(usize::MAX)
    };
    let label_rank = |l: &str| data.label_names.iter().position(|n| n == l).unwrap_or(usize::MAX);
    let seed_rank = |s: u64| cfg.seeds.iter().position(|&x| x == s).unwrap_or(usize::MAX);
    rows.sort_by_key(|r| {
        (method_rank(&r.method), r.size, rep_rank(&r.representation), label_rank(&r.label), seed_rank(r.seed))
    });
}

/// Supervised baseline method names: per-modality classifiers, their score
/// ensemble, and the late-fusion classifier.
pub const SUPERVISED_METHODS: [&str; 3] = ["supervised_unimodal", "supervised_ensemble", "supervised_multimodal"];

/// Labeled indices for sweep point `size` and repetition `seed`; nested in `size`.
pub fn sweep_subset(cfg: &ExperimentConfig, n: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    label_subsample(n, size, derive_seed(cfg.root_seed, "sweep", seed)).context(|| format!("label subset of size {size}"))
}

/// Label-availability sweep. `mmvm_runs` must hold one trained MMVM model per
/// configured seed; its probes see only the labeled subset. The supervised
/// baselines train on the same subsets of raw inputs.
pub fn run_label_sweep(cfg: &ExperimentConfig, splits: &Splits, mmvm_runs: &[TrainedRun]) -> Result<ResultTable> {
    let train = &splits.train;
    let test = &splits.test;
    let sizes = cfg.sweep.resolve(train.len())?;
    let xtr = train.modalities().map_err(|e| HarnessError::Data(e.to_string()))?;
    let xte = test.modalities().map_err(|e| HarnessError::Data(e.to_string()))?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let run = mmvm_runs
            .iter()
            .find(|r| r.seed == seed && r.kind == ModelKind::Mmvm)
            .ok_or_else(|| HarnessError::Config(format!("no trained mmvm model for seed {seed}")))?;
        let reps = [(Z_F, Representation::Modality(FRONTAL)), (Z_L, Representation::Modality(LATERAL))];
        let z = reps
            .iter()
            .map(|&(_, rep)| {
                let ctx = || format!("mmvm representations (seed {seed})");
                Ok((extract_representations(&run.model, &xtr, rep).context(ctx)?, extract_representations(&run.model, &xte, rep).context(ctx)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let jobs: Vec<(usize, usize)> = (0..sizes.len()).flat_map(|i| (0..reps.len()).map(move |r| (i, r))).collect();
        let parts = jobs
            .par_iter()
            .map(|&(i, r)| {
                let idx = sweep_subset(cfg, train.len(), sizes[i], seed)?;
                let aurocs = probe(&cfg.probe, &z[r].0, train, &idx, &z[r].1, test, probe_seed(cfg, seed))?;
                let mut out = Vec::new();
                push_rows(&mut out, ModelKind::Mmvm.as_str(), reps[r].0, train, seed, Some(sizes[i]), &aurocs);
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.extend(parts.into_iter().flatten());
        if cfg.sweep.supervised {
            let parts = (0..sizes.len())
                .into_par_iter()
                .map(|i| supervised_point(cfg, splits, &xtr, &xte, sizes[i], i, seed))
                .collect::<Result<Vec<_>>>()?;
            rows.extend(parts.into_iter().flatten());
        }
        eprintln!("label sweep: seed {seed} done");
    }
    sort_rows(&mut rows, cfg, train);
    Ok(ResultTable { rows })
}

fn supervised_point(
    cfg: &ExperimentConfig,
    splits: &Splits,
    xtr: &[Matrix],
    xte: &[Matrix],
    size: usize,
    point: usize,
    seed: u64,
) -> Result<Vec<ResultRow>> {
    let (train, val, test) = (&splits.train, &splits.val, &splits.test);
    let idx = sweep_subset(cfg, train.len(), size, seed)?;
    let labeled: Vec<Matrix> = xtr.iter().map(|x| x.select_rows(&idx)).collect();
    let y = train.subset(&idx).label_matrix()?;
    let xval = val.modalities().map_err(|e| HarnessError::Data(e.to_string()))?;
    let yval = val.label_matrix()?;
    let root = derive_seed(cfg.root_seed, "supervised", seed);
    let ctx = |what: &str| format!("supervised {what} at |L| = {size} (seed {seed})");
    let fit = |name: &str, xs: &[Matrix], vxs: &[Matrix], fusion| {
        let set = LabeledSet { xs, labels: &y };
        let vset = LabeledSet { xs: vxs, labels: &yval };
        let val = (!val.is_empty()).then_some(&vset);
        train_supervised(&cfg.supervised, &set, val, fusion, derive_seed(root, name, point as u64)).context(|| ctx(name))
    };
    let mut uni = Vec::new();
    for m in [FRONTAL, LATERAL] {
        let name = if m == FRONTAL { "unimodal_frontal" } else { "unimodal_lateral" };
        let p = fit(name, &labeled[m..=m], &xval[m..=m], Fusion::None)?;
        uni.push(predict_scores(&p, &xte[m..=m]).context(|| ctx(name))?);
    }
    let ens = ensemble_scores(&uni).context(|| ctx("ensemble"))?;
    let late = fit("multimodal", &labeled, &xval, Fusion::LateFusion)?;
    let multi = predict_scores(&late, xte).context(|| ctx("multimodal"))?;

    let mut rows = Vec::new();
    let mut emit = |method: &str, rep: &str, s: &Matrix| -> Result<()> {
        let aurocs = (0..test.num_labels())
            .map(|j| score_label(&s.column(j), &test.label_column(j), &test.label_names[j]))
            .collect::<std::result::Result<Vec<_>, _>>()
            .context(|| ctx(method))?;
        push_rows(&mut rows, method, rep, train, seed, Some(size), &aurocs);
        Ok(())
    };
    emit(SUPERVISED_METHODS[0], Z_F, &uni[0])?;
    emit(SUPERVISED_METHODS[0], Z_L, &uni[1])?;
    emit(SUPERVISED_METHODS[1], Z_J, &ens)?;
    emit(SUPERVISED_METHODS[2], Z_J, &multi)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRow {
    pub method: String,
    pub seed: u64,
    pub count: usize,
    /// MSE of decoding the target from the source's posterior mean.
    pub mse_conditional: f64,
    /// MSE of decoding the target from a prior sample.
    pub mse_prior: f64,
}

fn standard_normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::new(rows, cols, data).expect("length matches shape")
}

fn mse(a: &Matrix, b: &Matrix) -> f64 {
    let n = a.data().len();
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64
}

/// Translate the first `count` test samples from the source to the target
/// modality with every run's model and compare against decoding prior draws.
/// When `out` is given, writes source/target/generated/prior arrays as CSV
/// (and PGMs for image data) under `out/generation/`.
pub fn run_generation_demo(
    cfg: &ExperimentConfig,
    test: &Dataset,
    runs: &[TrainedRun],
    count: usize,
    out: Option<&Path>,
) -> Result<Vec<GenerationRow>> {
    let g = &cfg.generation;
    if count > test.len() {
        return Err(HarnessError::Config(format!("generation count {count} exceeds the {} test samples", test.len())));
    }
    let sub = test.subset(&(0..count).collect::<Vec<_>>());
    let dims = test.dims();
    let (source, target) = if count == 0 {
        (Matrix::zeros(0, dims[g.source]), Matrix::zeros(0, dims[g.target]))
    } else {
        let err = |e: CoreError| HarnessError::Data(e.to_string());
        (sub.modality(g.source).map_err(err)?, sub.modality(g.target).map_err(err)?)
    };
    let mut rows = Vec::new();
    for run in runs {
        let ctx = || format!("generation with {} (seed {})", run.kind, run.seed);
        if !run.model.is_trained() {
            return Err(CoreError::Contract("model is untrained".into())).context(ctx);
        }
        let generated = conditional_generate(&run.model, g.source, &source, g.target, None).context(ctx)?;
        let mut rng = child_rng(derive_seed(cfg.root_seed, "generation", run.seed), "prior", 0);
        let noise = standard_normal_matrix(&mut rng, count, run.model.spec.latent_dim);
        let prior = prior_generate(&run.model, g.target, &noise).context(ctx)?;
        if let Some(dir) = out {
            let stem = format!("{}_seed{}", run.kind, run.seed);
            let dir = dir.join("generation");
            for (role, m) in [("source", &source), ("target", &target), ("generated", &generated), ("prior", &prior)] {
                write_matrix_csv(&dir.join(format!("{stem}_{role}.csv")), m)?;
                if let DataForm::Image { side } = test.form {
                    for i in 0..m.rows() {
                        let pixels = m.row(i).iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
                        let img = GrayImage { width: side, height: side, pixels };
                        let path = dir.join(&stem).join(format!("{i:04}_{role}.pgm"));
                        write_pgm(&path, &img).context(ctx)?;
                    }
                }
            }
        }
        if count > 0 {
            rows.push(GenerationRow {
                method: run.kind.as_str().to_string(),
                seed: run.seed,
                count,
                mse_conditional: mse(&generated, &target),
                mse_prior: mse(&prior, &target),
            });
        }
    }
    Ok(rows)
}
