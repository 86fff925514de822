//! JSON experiment configuration. Every field has a default; unknown keys are rejected.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use mmvm_core::data::{LoadOptions, SyntheticConfig};
use mmvm_core::eval::RfConfig;
use mmvm_core::supervised::SupervisedConfig;
use mmvm_core::vaemodels::{Likelihood, MixtureSampling, ModelKind};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root of every derived seed (data, splits, training, probes).
    pub root_seed: u64,
    /// Repetitions; each seed trains every model kind once.
    pub seeds: Vec<u64>,
    pub data: DataSource,
    /// Train/validation/test fractions of subjects.
    pub split: [f64; 3],
    pub models: Vec<ModelKind>,
    pub vae: VaeConfig,
    pub probe: ProbeConfig,
    pub supervised: SupervisedConfig,
    pub sweep: SweepConfig,
    pub generation: GenerationConfig,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            root_seed: 0,
            seeds: vec![0, 1, 2],
            data: DataSource::default(),
            split: [0.8, 0.1, 0.1],
            models: ModelKind::ALL.to_vec(),
            vae: VaeConfig::default(),
            probe: ProbeConfig::default(),
            supervised: SupervisedConfig::default(),
            sweep: SweepConfig::default(),
            generation: GenerationConfig::default(),
            out_dir: None,
            threads: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        config: SyntheticConfig,
    },
    Manifest {
        path: PathBuf,
        #[serde(default)]
        load: LoadOptions,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic { config: SyntheticConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    pub latent_dim: usize,
    pub hidden_sizes: Vec<usize>,
    /// Defaults to gaussian σ = 1 for vector data and bernoulli for images.
    pub likelihood: Option<Likelihood>,
    pub beta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub detach_prior: bool,
    pub mixture_sampling: MixtureSampling,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            latent_dim: 16,
            hidden_sizes: vec![64, 64],
            likelihood: None,
            beta: 1.0,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            detach_prior: false,
            mixture_sampling: MixtureSampling::Stratified,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub n_estimators: usize,
    pub max_depth: usize,
    /// Random-forest training sets larger than this are uniformly subsampled.
    pub max_train_representations: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        let rf = RfConfig::default();
        ProbeConfig { n_estimators: rf.n_estimators, max_depth: rf.max_depth, max_train_representations: 20_000 }
    }
}

impl ProbeConfig {
    pub fn rf(&self) -> RfConfig {
        RfConfig { n_estimators: self.n_estimators, max_depth: self.max_depth }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Labeled-set sizes as fractions of the training split (ignored when `sizes` is set).
    pub fractions: Vec<f64>,
    /// Absolute labeled-set sizes.
    pub sizes: Option<Vec<usize>>,
    /// Also train the three supervised baselines at every size.
    pub supervised: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { fractions: vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0], sizes: None, supervised: true }
    }
}

impl SweepConfig {
    /// Concrete sizes for a training split of `n` samples.
    pub fn resolve(&self, n: usize) -> Result<Vec<usize>> {
        let sizes: Vec<usize> = match &self.sizes {
            Some(s) => s.clone(),
            None => self.fractions.iter().map(|f| ((f * n as f64).round() as usize).max(1)).collect(),
        };
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::Config(format!(
                "sweep sizes {sizes:?} for {n} training samples are not strictly increasing"
            )));
        }
        if let Some(&last) = sizes.last() {
            if last > n {
                return Err(HarnessError::Config(format!("sweep size {last} exceeds the {n} training samples")));
            }
        }
        Ok(sizes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    /// Number of test samples to translate.
    pub count: usize,
    /// Source modality (0 frontal, 1 lateral).
    pub source: usize,
    pub target: usize,
    /// Model kinds to compare; defaults to `models`.
    pub methods: Option<Vec<ModelKind>>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig { count: 64, source: 1, target: 0, methods: None }
    }
}

fn distinct<T: std::hash::Hash + Eq>(items: &[T]) -> bool {
    let mut seen = HashSet::new();
    items.iter().all(|i| seen.insert(i))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn generation_methods(&self) -> Vec<ModelKind> {
        self.generation.methods.clone().unwrap_or_else(|| self.models.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() || !distinct(&self.seeds) {
            return fail(format!("seeds must be non-empty and distinct, got {:?}", self.seeds));
        }
        if self.models.is_empty() || !distinct(&self.models) {
            return fail("models must be non-empty and distinct".into());
        }
        if self.split.iter().any(|r| !(*r > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail(format!("split fractions must be positive and sum to 1, got {:?}", self.split));
        }
        let v = &self.vae;
        if v.latent_dim == 0 || v.epochs == 0 || v.batch_size == 0 || !(v.lr > 0.0) || !(v.beta >= 0.0) {
            return fail("vae latent_dim, epochs, batch_size and lr must be positive, beta non-negative".into());
        }
        if self.probe.n_estimators == 0 || self.probe.max_train_representations < 2 {
            return fail("probe needs n_estimators >= 1 and max_train_representations >= 2".into());
        }
        let s = &self.supervised;
        if s.epochs == 0 || s.batch_size == 0 || !(s.lr > 0.0) {
            return fail("supervised epochs, batch_size and lr must be positive".into());
        }
        match &self.sweep.sizes {
            Some(sizes) if sizes.is_empty() || sizes.contains(&0) || sizes.windows(2).any(|w| w[0] >= w[1]) => {
                return fail(format!("sweep sizes must be positive and strictly increasing, got {sizes:?}"));
            }
            None if self.sweep.fractions.is_empty()
                || self.sweep.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0))
                || self.sweep.fractions.windows(2).any(|w| w[0] >= w[1]) =>
            {
                return fail(format!(
                    "sweep fractions must lie in (0, 1] and strictly increase, got {:?}",
                    self.sweep.fractions
                ));
            }
            _ => {}
        }
        let g = &self.generation;
        if g.source > 1 || g.target > 1 {
            return fail("generation source/target must be 0 (frontal) or 1 (lateral)".into());
        }
        if let Some(m) = &g.methods {
            if m.is_empty() || !distinct(m) {
                return fail("generation methods must be non-empty and distinct".into());
            }
        }
        if self.threads == Some(0) {
            return fail("threads must be positive".into());
        }
        if let DataSource::Synthetic { config } = &self.data {
            config.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        Ok(())
    }
}
