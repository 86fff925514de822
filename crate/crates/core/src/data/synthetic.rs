use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{pair_studies, DataForm, Dataset, Study, View, DEFAULT_LABELS};
use crate::diffcore::sigmoid;
use crate::error::{Error, Result};
use crate::seed::{child_rng, Rng as SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", deny_unknown_fields)]
pub enum OutputForm {
    Vector { dim_f: usize, dim_l: usize },
    Image { side: usize },
}

/// Generative story per subject: labels `y ~ Bernoulli(base_rates)`, shared
/// factor `u ~ N(W y, I_k)`; per view `x_m = g(A_m u + B_m v_m) + σ_m ε` with
/// per-view nuisance `v_m ~ N(0, I)` and `g = tanh` (vectors) or the logistic
/// function followed by clipping and 8-bit quantization (images).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    /// Inclusive `[min, max]` ranges.
    pub studies_per_subject: [usize; 2],
    pub frontal_per_study: [usize; 2],
    pub lateral_per_study: [usize; 2],
    pub factor_dim: usize,
    pub label_count: usize,
    /// Per-label prevalence; empty means evenly spaced in [0.1, 0.4].
    pub base_rates: Vec<f64>,
    /// Scale of the label-to-factor map `W`.
    pub label_signal: f64,
    pub sigma_f: f64,
    pub sigma_l: f64,
    pub nuisance_dim_f: usize,
    pub nuisance_dim_l: usize,
    /// Scale of the nuisance maps `B_m` relative to the shared maps `A_m`.
    pub nuisance_scale: f64,
    /// Scale of the lateral shared map relative to the frontal one.
    pub lateral_signal: f64,
    pub output: OutputForm,
    /// Defaults to the 14 chest X-ray labels when `label_count` is 14.
    pub label_names: Vec<String>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_subjects: 2000,
            studies_per_subject: [1, 2],
            frontal_per_study: [1, 2],
            lateral_per_study: [0, 2],
            factor_dim: 4,
            label_count: 14,
            base_rates: Vec::new(),
            label_signal: 1.0,
            sigma_f: 0.1,
            sigma_l: 0.2,
            nuisance_dim_f: 8,
            nuisance_dim_l: 8,
            nuisance_scale: 1.5,
            lateral_signal: 0.7,
            output: OutputForm::Vector { dim_f: 32, dim_l: 24 },
            label_names: Vec::new(),
        }
    }
}

impl SyntheticConfig {
    pub fn rates(&self) -> Vec<f64> {
        if !self.base_rates.is_empty() {
            return self.base_rates.clone();
        }
        let l = self.label_count;
        (0..l).map(|j| if l == 1 { 0.25 } else { 0.1 + 0.3 * j as f64 / (l - 1) as f64 }).collect()
    }

    pub fn names(&self) -> Vec<String> {
        if !self.label_names.is_empty() {
            self.label_names.clone()
        } else if self.label_count == DEFAULT_LABELS.len() {
            DEFAULT_LABELS.iter().map(|s| s.to_string()).collect()
        } else {
            (0..self.label_count).map(|j| format!("label_{j}")).collect()
        }
    }

    pub fn dims(&self) -> [usize; 2] {
        match self.output {
            OutputForm::Vector { dim_f, dim_l } => [dim_f, dim_l],
            OutputForm::Image { side } => [side * side; 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::contract(format!("synthetic config: {msg}")));
        for (name, [lo, hi]) in [
            ("studies_per_subject", self.studies_per_subject),
            ("frontal_per_study", self.frontal_per_study),
            ("lateral_per_study", self.lateral_per_study),
        ] {
            if lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if self.n_subjects == 0 || self.factor_dim == 0 || self.label_count == 0 {
            return bad("n_subjects, factor_dim and label_count must be positive".into());
        }
        if self.studies_per_subject[1] == 0 || self.frontal_per_study[1] == 0 || self.lateral_per_study[1] == 0 {
            return bad("every range must allow at least one item".into());
        }
        let rates = self.rates();
        if rates.len() != self.label_count || rates.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return bad(format!("need {} base rates in (0, 1), got {rates:?}", self.label_count));
        }
        if self.names().len() != self.label_count {
            return bad("label_names length differs from label_count".into());
        }
        for (name, v) in [
            ("sigma_f", self.sigma_f),
            ("sigma_l", self.sigma_l),
            ("label_signal", self.label_signal),
            ("nuisance_scale", self.nuisance_scale),
            ("lateral_signal", self.lateral_signal),
        ] {
            if !(v > 0.0) || v.is_nan() {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.dims().contains(&0) {
            return bad("modality dims must be positive".into());
        }
        Ok(())
    }
}

fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `[rows, cols] · v`
fn matvec(m: &[f64], cols: usize, v: &[f64]) -> Vec<f64> {
    m.chunks_exact(cols).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

struct Maps {
    w: Vec<f64>,
    a: [Vec<f64>; 2],
    b: [Vec<f64>; 2],
}

/// Generate a dataset; identical for identical `(config, seed)`.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let k = cfg.factor_dim;
    let l = cfg.label_count;
    let dims = cfg.dims();
    let nuis = [cfg.nuisance_dim_f, cfg.nuisance_dim_l];
    let sigma = [cfg.sigma_f, cfg.sigma_l];
    let mut mr = child_rng(seed, "maps", 0);
    let w = gaussian_matrix(&mut mr, k, l, cfg.label_signal);
    let ks = 1.0 / (k as f64).sqrt();
    let a = [gaussian_matrix(&mut mr, dims[0], k, ks), gaussian_matrix(&mut mr, dims[1], k, ks * cfg.lateral_signal)];
    let b = std::array::from_fn(|m| {
        let s = if nuis[m] == 0 { 0.0 } else { cfg.nuisance_scale / (nuis[m] as f64).sqrt() };
        gaussian_matrix(&mut mr, dims[m], nuis[m], s)
    });
    let maps = Maps { w, a, b };
    let rates = cfg.rates();
    let ext = match cfg.output {
        OutputForm::Vector { .. } => "vec",
        OutputForm::Image { .. } => "pgm",
    };

    let mut studies = Vec::new();
    for s in 0..cfg.n_subjects {
        let mut r = child_rng(seed, "subject", s as u64);
        let subject_id = format!("p{s:05}");
        let labels: Vec<u8> = rates.iter().map(|&p| u8::from(r.random::<f64>() < p)).collect();
        let y: Vec<f64> = labels.iter().map(|&v| v as f64).collect();
        let center = matvec(&maps.w, l, &y);
        let u: Vec<f64> = center.iter().map(|c| c + r.sample::<f64, _>(StandardNormal)).collect();
        let n_studies = r.random_range(cfg.studies_per_subject[0]..=cfg.studies_per_subject[1]);
        for t in 0..n_studies {
            let study_id = format!("{subject_id}-s{t}");
            let counts = [
                r.random_range(cfg.frontal_per_study[0]..=cfg.frontal_per_study[1]),
                r.random_range(cfg.lateral_per_study[0]..=cfg.lateral_per_study[1]),
            ];
            let mut views: [Vec<View>; 2] = Default::default();
            for m in 0..2 {
                let shared = matvec(&maps.a[m], k, &u);
                for i in 0..counts[m] {
                    let v: Vec<f64> = (0..nuis[m]).map(|_| r.sample(StandardNormal)).collect();
                    let nuisance = if nuis[m] == 0 { vec![0.0; dims[m]] } else { matvec(&maps.b[m], nuis[m], &v) };
                    let values = shared
                        .iter()
                        .zip(&nuisance)
                        .map(|(s, n)| {
                            let eps: f64 = r.sample(StandardNormal);
                            match cfg.output {
                                OutputForm::Vector { .. } => (s + n).tanh() + sigma[m] * eps,
                                OutputForm::Image { .. } => {
                                    let p = (sigmoid(s + n) + sigma[m] * eps).clamp(0.0, 1.0);
                                    (p * 255.0).round() / 255.0
                                }
                            }
                        })
                        .collect();
                    let tag = if m == 0 { "frontal" } else { "lateral" };
                    views[m].push(View { source: format!("{tag}/{study_id}-{}{i}.{ext}", &tag[..1]), values });
                }
            }
            let [frontal, lateral] = views;
            studies.push(Study { subject_id: subject_id.clone(), study_id, frontal, lateral, labels: labels.clone() });
        }
    }
    let form = match cfg.output {
        OutputForm::Vector { .. } => DataForm::Vector,
        OutputForm::Image { side } => DataForm::Image { side },
    };
    Ok(Dataset { label_names: cfg.names(), form, samples: pair_studies(&studies) })
}
