//! Bimodal (frontal/lateral) datasets: synthetic generation, study pairing,
//! label binarization, subject-grouped splits and on-disk manifests.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::child_rng;

mod io;
mod synthetic;

pub use io::{
    binarize_label, binarize_labels, center_crop, load_dataset, read_pgm, read_vector, resize_bilinear,
    write_dataset, write_pgm, write_vector, GrayImage, LoadOptions, MANIFEST_NAME,
};
pub use synthetic::{generate_synthetic, OutputForm, SyntheticConfig};

/// The 14 chest X-ray finding labels, in manifest column order.
pub const DEFAULT_LABELS: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Enlarged Cardiomediastinum",
    "Fracture",
    "Lung Lesion",
    "Lung Opacity",
    "No Finding",
    "Pleural Effusion",
    "Pleural Other",
    "Pneumonia",
    "Pneumothorax",
    "Support Devices",
];

pub const FRONTAL: usize = 0;
pub const LATERAL: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BimodalSample {
    pub sample_id: String,
    pub subject_id: String,
    pub study_id: String,
    pub frontal_source: String,
    pub lateral_source: String,
    pub x_f: Vec<f64>,
    pub x_l: Vec<f64>,
    pub labels: Vec<u8>,
}

/// How modality values are laid out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum DataForm {
    Vector,
    /// Square grayscale images, row-major, values in [0, 1].
    Image { side: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub label_names: Vec<String>,
    pub form: DataForm,
    pub samples: Vec<BimodalSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn dims(&self) -> [usize; 2] {
        self.samples.first().map_or([0, 0], |s| [s.x_f.len(), s.x_l.len()])
    }

    /// `n × D_m` matrix of modality `m` (0 frontal, 1 lateral).
    pub fn modality(&self, m: usize) -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = match m {
            FRONTAL => self.samples.iter().map(|s| s.x_f.clone()).collect(),
            LATERAL => self.samples.iter().map(|s| s.x_l.clone()).collect(),
            _ => return Err(Error::contract(format!("modality {m} out of range for bimodal data"))),
        };
        Matrix::from_rows(&rows)
    }

    /// Both modalities, frontal first.
    pub fn modalities(&self) -> Result<Vec<Matrix>> {
        Ok(vec![self.modality(FRONTAL)?, self.modality(LATERAL)?])
    }

    pub fn label_column(&self, j: usize) -> Vec<u8> {
        self.samples.iter().map(|s| s.labels[j]).collect()
    }

    /// `n × L` matrix of 0/1 labels.
    pub fn label_matrix(&self) -> Result<Matrix> {
        let data = self.samples.iter().flat_map(|s| s.labels.iter().map(|&y| y as f64)).collect();
        Matrix::new(self.len(), self.num_labels(), data)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            label_names: self.label_names.clone(),
            form: self.form,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn subject_ids(&self) -> BTreeSet<String> {
        self.samples.iter().map(|s| s.subject_id.clone()).collect()
    }

    /// Checks the per-sample invariants: binary labels of the right count,
    /// consistent dims, unique `(study, frontal, lateral)` tuples.
    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        let mut seen = HashSet::new();
        for (i, s) in self.samples.iter().enumerate() {
            if s.labels.len() != self.num_labels() || s.labels.iter().any(|&y| y > 1) {
                return Err(Error::contract(format!("sample {i} ({}) has invalid labels", s.sample_id)));
            }
            if [s.x_f.len(), s.x_l.len()] != dims || dims.contains(&0) {
                return Err(Error::contract(format!("sample {i} ({}) has inconsistent dims", s.sample_id)));
            }
            if !seen.insert((&s.study_id, &s.frontal_source, &s.lateral_source)) {
                return Err(Error::contract(format!("duplicate tuple for sample {}", s.sample_id)));
            }
        }
        Ok(())
    }
}

/// One image (or vector) with the identifier of its source file.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub source: String,
    pub values: Vec<f64>,
}

/// All views acquired in one study.
#[derive(Clone, Debug, PartialEq)]
pub struct Study {
    pub subject_id: String,
    pub study_id: String,
    pub frontal: Vec<View>,
    pub lateral: Vec<View>,
    pub labels: Vec<u8>,
}

/// Every frontal view of a study paired with every lateral view of the same
/// study. Studies missing either view contribute nothing.
pub fn pair_studies(studies: &[Study]) -> Vec<BimodalSample> {
    let mut out = Vec::new();
    for st in studies {
        for (i, f) in st.frontal.iter().enumerate() {
            for (j, l) in st.lateral.iter().enumerate() {
                out.push(BimodalSample {
                    sample_id: format!("{}-f{i}-l{j}", st.study_id),
                    subject_id: st.subject_id.clone(),
                    study_id: st.study_id.clone(),
                    frontal_source: f.source.clone(),
                    lateral_source: l.source.clone(),
                    x_f: f.values.clone(),
                    x_l: l.values.clone(),
                    labels: st.labels.clone(),
                });
            }
        }
    }
    out
}

/// Subject counts per split: floor of `ratio · n`, remainders handed out
/// largest-first (ties to the earlier split), then every split topped up to
/// at least one subject from the largest split.
fn split_counts(n: usize, ratios: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in 0..counts.len() {
        if counts[i] == 0 {
            let big = (0..counts.len()).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).expect("non-empty");
            counts[big] -= 1;
            counts[i] = 1;
        }
    }
    counts
}

/// Train/validation/test split by subject: subjects are shuffled by `seed`
/// and cut into consecutive runs of the sizes from `ratios`.
pub fn subject_split(data: &Dataset, ratios: [f64; 3], seed: u64) -> Result<[Dataset; 3]> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
    }
    let mut subjects: Vec<String> = data.subject_ids().into_iter().collect();
    if subjects.len() < 3 {
        return Err(Error::contract(format!("{} subjects cannot fill 3 splits", subjects.len())));
    }
    subjects.shuffle(&mut child_rng(seed, "split", 0));
    let counts = split_counts(subjects.len(), &ratios);
    let mut assignment = std::collections::HashMap::new();
    let mut start = 0;
    for (split, &c) in counts.iter().enumerate() {
        for s in &subjects[start..start + c] {
            assignment.insert(s.clone(), split);
        }
        start += c;
    }
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (i, s) in data.samples.iter().enumerate() {
        parts[assignment[&s.subject_id]].push(i);
    }
    Ok(parts.map(|idx| data.subset(&idx)))
}
