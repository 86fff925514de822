//! Joint posteriors built from per-modality posteriors.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::gaussians::{
    log_prob_diag, mixture_log_prob, moment_average, poe_fuse, sample_reparam, DiagGaussian, GaussianMixture,
    LatentSample,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationKind {
    Avg,
    Poe,
    Moe,
    Mopoe,
}

impl AggregationKind {
    pub const ALL: [AggregationKind; 4] =
        [AggregationKind::Avg, AggregationKind::Poe, AggregationKind::Moe, AggregationKind::Mopoe];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregationKind::Avg => "avg",
            AggregationKind::Poe => "poe",
            AggregationKind::Moe => "moe",
            AggregationKind::Mopoe => "mopoe",
        }
    }

    /// Number of mixture components (1 for single-Gaussian kinds) for `m` modalities.
    pub fn component_count(self, m: usize) -> usize {
        match self {
            AggregationKind::Avg | AggregationKind::Poe => 1,
            AggregationKind::Moe => m,
            AggregationKind::Mopoe => (1usize << m) - 1,
        }
    }
}

impl fmt::Display for AggregationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(AggregationKind::Avg),
            "poe" => Ok(AggregationKind::Poe),
            "moe" => Ok(AggregationKind::Moe),
            "mopoe" => Ok(AggregationKind::Mopoe),
            other => Err(Error::contract(format!("unknown aggregation kind {other:?} (expected avg|poe|moe|mopoe)"))),
        }
    }
}

/// Every non-empty subset of `0..m` in binary-counting order of the subset mask.
pub fn enumerate_subsets(m: usize) -> Result<Vec<Vec<usize>>> {
    if m == 0 {
        return Err(Error::contract("need at least one modality"));
    }
    if m >= usize::BITS as usize {
        return Err(Error::contract(format!("{m} modalities is too many to enumerate")));
    }
    Ok((1..(1usize << m))
        .map(|mask| (0..m).filter(|i| mask & (1 << i) != 0).collect())
        .collect())
}

#[derive(Clone, Debug)]
pub enum JointForm {
    Gaussian(DiagGaussian),
    Mixture(GaussianMixture),
}

#[derive(Clone, Debug)]
pub struct JointPosterior {
    pub form: JointForm,
    pub kind: AggregationKind,
    /// Modality subset behind each component, in component order.
    pub subsets: Vec<Vec<usize>>,
}

impl JointPosterior {
    pub fn num_components(&self) -> usize {
        match &self.form {
            JointForm::Gaussian(_) => 1,
            JointForm::Mixture(m) => m.components().len(),
        }
    }

    pub fn component(&self, k: usize) -> Option<&DiagGaussian> {
        match &self.form {
            JointForm::Gaussian(g) if k == 0 => Some(g),
            JointForm::Gaussian(_) => None,
            JointForm::Mixture(m) => m.components().get(k),
        }
    }

    /// The posterior as one Gaussian when it is one (including 1-component mixtures).
    pub fn as_gaussian(&self) -> Option<&DiagGaussian> {
        match &self.form {
            JointForm::Gaussian(g) => Some(g),
            JointForm::Mixture(m) if m.components().len() == 1 => Some(&m.components()[0]),
            JointForm::Mixture(_) => None,
        }
    }

    pub fn log_prob(&self, z: &Tensor) -> Result<Tensor> {
        match &self.form {
            JointForm::Gaussian(g) => log_prob_diag(g, z),
            JointForm::Mixture(m) => mixture_log_prob(m, z),
        }
    }

    /// Mean of the posterior; for mixtures the weighted average of component means.
    pub fn mean(&self) -> Result<Tensor> {
        match &self.form {
            JointForm::Gaussian(g) => Ok(g.mean().clone()),
            JointForm::Mixture(m) => m.mean(),
        }
    }
}

/// Include the standard-normal prior expert only when two or more experts
/// are multiplied, so a single-modality subset stays its unimodal posterior.
fn product(experts: &[DiagGaussian]) -> Result<DiagGaussian> {
    poe_fuse(experts, experts.len() >= 2)
}

pub fn aggregate(kind: AggregationKind, posteriors: &[DiagGaussian]) -> Result<JointPosterior> {
    if posteriors.is_empty() {
        return Err(Error::contract("aggregate needs at least one posterior"));
    }
    let m = posteriors.len();
    let all: Vec<usize> = (0..m).collect();
    let (form, subsets) = match kind {
        AggregationKind::Avg => (JointForm::Gaussian(moment_average(posteriors)?), vec![all]),
        AggregationKind::Poe => (JointForm::Gaussian(product(posteriors)?), vec![all]),
        AggregationKind::Moe => (
            JointForm::Mixture(GaussianMixture::uniform(posteriors.to_vec())?),
            all.iter().map(|&i| vec![i]).collect(),
        ),
        AggregationKind::Mopoe => {
            let subsets = enumerate_subsets(m)?;
            let comps = subsets
                .iter()
                .map(|s| product(&s.iter().map(|&i| posteriors[i].clone()).collect::<Vec<_>>()))
                .collect::<Result<Vec<_>>>()?;
            (JointForm::Mixture(GaussianMixture::uniform(comps)?), subsets)
        }
    };
    Ok(JointPosterior { form, kind, subsets })
}

/// How mixture components are chosen when sampling a joint posterior.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ComponentSelector {
    /// One sample from every component; component `k` uses `noise[k]`.
    Stratified,
    /// One sample per row from the listed component; uses `noise[0]`.
    Categorical(Vec<usize>),
}

impl ComponentSelector {
    /// Uniform categorical draw of one component per row.
    pub fn categorical<R: Rng>(rng: &mut R, components: usize, rows: usize) -> Self {
        ComponentSelector::Categorical((0..rows).map(|_| rng.random_range(0..components)).collect())
    }
}

#[derive(Clone, Debug)]
pub struct JointDraw {
    pub sample: LatentSample,
    /// Component used for each row.
    pub components: Vec<usize>,
}

pub fn joint_sample(jp: &JointPosterior, noise: &[Tensor], selector: &ComponentSelector) -> Result<Vec<JointDraw>> {
    let k = jp.num_components();
    let first = jp.component(0).expect("at least one component");
    let rows = if first.mean().rank() == 2 { first.mean().rows() } else { 1 };
    match selector {
        ComponentSelector::Stratified => {
            if noise.len() < k {
                return Err(Error::contract(format!("stratified sampling of {k} components needs {k} noise blocks, got {}", noise.len())));
            }
            (0..k)
                .map(|c| {
                    let g = jp.component(c).expect("index in range");
                    let sample = sample_reparam(g, &noise[c], format!("{}[{c}]", jp.kind))?;
                    Ok(JointDraw { sample, components: vec![c; rows] })
                })
                .collect()
        }
        ComponentSelector::Categorical(choice) => {
            if choice.len() != rows {
                return Err(Error::contract(format!("{} component choices for {rows} rows", choice.len())));
            }
            if let Some(bad) = choice.iter().find(|&&c| c >= k) {
                return Err(Error::contract(format!("component {bad} out of range for {k} components")));
            }
            let eps = noise.first().ok_or_else(|| Error::contract("categorical sampling needs one noise block"))?;
            let mut z: Option<Tensor> = None;
            for c in 0..k {
                if !choice.contains(&c) {
                    continue;
                }
                let zc = sample_reparam(jp.component(c).expect("index in range"), eps, "")?.z;
                let part = if k == 1 {
                    zc
                } else {
                    let mask: Vec<f64> = choice.iter().map(|&s| if s == c { 1.0 } else { 0.0 }).collect();
                    let mask = if zc.rank() == 2 { Tensor::new(mask, &[rows, 1])? } else { Tensor::new(mask, &[1])? };
                    zc.mul(&mask)?
                };
                z = Some(match z {
                    None => part,
                    Some(acc) => acc.add(&part)?,
                });
            }
            let z = z.expect("at least one row");
            Ok(vec![JointDraw { sample: LatentSample { z, source: format!("{}[categorical]", jp.kind) }, components: choice.clone() }])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_check, reset_tape};
    use rand::SeedableRng;
    use rand_distr::StandardNormal;

    fn g1(mean: f64, var: f64) -> DiagGaussian {
        DiagGaussian::from_vecs(vec![mean], vec![var.ln()]).unwrap()
    }

    #[test]
    fn subsets_in_binary_counting_order() {
        assert_eq!(enumerate_subsets(1).unwrap(), vec![vec![0]]);
        assert_eq!(enumerate_subsets(2).unwrap(), vec![vec![0], vec![1], vec![0, 1]]);
        assert_eq!(enumerate_subsets(3).unwrap().len(), 7);
        assert!(enumerate_subsets(0).is_err());
    }

    #[test]
    fn parse_is_closed() {
        for k in AggregationKind::ALL {
            assert_eq!(k.as_str().parse::<AggregationKind>().unwrap(), k);
        }
        for bad in ["", "AVG", "mmvm", "product", "moe "] {
            assert!(bad.parse::<AggregationKind>().is_err(), "{bad:?} parsed");
        }
    }

    #[test]
    fn single_modality_is_identity_for_every_kind() {
        let q = DiagGaussian::from_vecs(vec![0.4, -1.2], vec![0.3, -0.5]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for kind in AggregationKind::ALL {
            let jp = aggregate(kind, &[q.clone()]).unwrap();
            assert_eq!(jp.num_components(), 1);
            for _ in 0..20 {
                let z = Tensor::vector(vec![rng.sample(StandardNormal), rng.sample(StandardNormal)]);
                let a = jp.log_prob(&z).unwrap().item();
                let b = log_prob_diag(&q, &z).unwrap().item();
                assert!((a - b).abs() < 1e-12, "{kind}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn mopoe_and_moe_structure() {
        let a = g1(0.0, 1.0);
        let b = g1(2.0, 1.0);
        let jp = aggregate(AggregationKind::Mopoe, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(jp.num_components(), 3);
        let third = jp.component(2).unwrap();
        assert!((third.mean().item() - 2.0 / 3.0).abs() < 1e-15);
        assert!((third.variance().unwrap().item() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jp.component(0).unwrap().mean().data(), a.mean().data());
        assert_eq!(jp.component(1).unwrap().mean().data(), b.mean().data());

        let moe = aggregate(AggregationKind::Moe, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(moe.num_components(), 2);
        assert_eq!(moe.component(1).unwrap().log_var().data(), b.log_var().data());
        match &moe.form {
            JointForm::Mixture(m) => assert_eq!(m.weights(), &[0.5, 0.5]),
            _ => panic!("MoE must be a mixture"),
        }

        for m in 1..=4 {
            let qs: Vec<_> = (0..m).map(|i| g1(i as f64, 1.0 + i as f64)).collect();
            assert_eq!(aggregate(AggregationKind::Mopoe, &qs).unwrap().num_components(), (1 << m) - 1);
        }
        assert!(aggregate(AggregationKind::Avg, &[]).is_err());
    }

    #[test]
    fn mixture_mean_is_weighted_component_mean() {
        let jp = aggregate(AggregationKind::Moe, &[g1(0.0, 0.5), g1(2.0, 3.0)]).unwrap();
        assert!((jp.mean().unwrap().item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn poe_variance_below_every_expert() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let qs: Vec<_> = (0..3)
                .map(|_| {
                    DiagGaussian::from_vecs(
                        (0..4).map(|_| rng.random_range(-2.0..2.0)).collect(),
                        (0..4).map(|_| rng.random_range(-3.0..3.0)).collect(),
                    )
                    .unwrap()
                })
                .collect();
            let jp = aggregate(AggregationKind::Poe, &qs).unwrap();
            let fused = jp.as_gaussian().unwrap().variance().unwrap();
            for q in &qs {
                let v = q.variance().unwrap();
                assert!(fused.data().iter().zip(v.data()).all(|(f, e)| f <= e));
            }
        }
    }

    #[test]
    fn stratified_and_categorical_sampling() {
        let jp = aggregate(AggregationKind::Moe, &[g1(-1.0, 1.0), g1(3.0, 1.0)]).unwrap();
        let zero = Tensor::vector(vec![0.0]);
        let draws = joint_sample(&jp, &[zero.clone(), zero.clone()], &ComponentSelector::Stratified).unwrap();
        assert_eq!(draws.len(), 2);
        assert_eq!(draws[0].sample.z.item(), -1.0);
        assert_eq!(draws[1].sample.z.item(), 3.0);
        assert!(joint_sample(&jp, &[zero.clone()], &ComponentSelector::Stratified).is_err());
        assert!(joint_sample(&jp, &[zero.clone()], &ComponentSelector::Categorical(vec![2])).is_err());

        let single = aggregate(AggregationKind::Poe, &[g1(0.5, 2.0), g1(0.5, 2.0)]).unwrap();
        let d = joint_sample(&single, &[zero], &ComponentSelector::Stratified).unwrap();
        assert_eq!(d.len(), 1);
        assert!((d[0].sample.z.item() - single.mean().unwrap().item()).abs() < 1e-15);
    }

    #[test]
    fn categorical_draws_match_mixture_density() {
        let jp = aggregate(AggregationKind::Moe, &[g1(-1.5, 0.6), g1(1.0, 1.2)]).unwrap();
        let n = 100_000;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        // batch the 1-d mixture into n rows
        let comps: Vec<DiagGaussian> = (0..2)
            .map(|c| {
                let g = jp.component(c).unwrap();
                DiagGaussian::new(
                    Tensor::full(g.mean().item(), &[n, 1]).unwrap(),
                    Tensor::full(g.log_var().item(), &[n, 1]).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let batched = aggregate(AggregationKind::Moe, &comps).unwrap();
        let sel = ComponentSelector::categorical(&mut rng, 2, n);
        let draws = joint_sample(&batched, &[Tensor::new(noise, &[n, 1]).unwrap()], &sel).unwrap();
        let z = draws[0].sample.z.to_vec();

        let edges: Vec<f64> = (0..=16).map(|i| -5.0 + 0.625 * i as f64).collect();
        for w in edges.windows(2) {
            let count = z.iter().filter(|&&v| v >= w[0] && v < w[1]).count() as f64;
            let steps = 200;
            let h = (w[1] - w[0]) / steps as f64;
            let p: f64 = (0..steps)
                .map(|i| {
                    let x = w[0] + (i as f64 + 0.5) * h;
                    jp.log_prob(&Tensor::vector(vec![x])).unwrap().item().exp() * h
                })
                .sum();
            let se = (n as f64 * p * (1.0 - p)).sqrt().max(1.0);
            assert!((count - n as f64 * p).abs() < 3.0 * se, "bin {w:?}: {count} vs {}", n as f64 * p);
        }
    }

    #[test]
    fn aggregation_is_differentiable() {
        for kind in AggregationKind::ALL {
            let point = vec![
                (vec![0.2, -0.5], vec![2]),
                (vec![-0.3, 0.4], vec![2]),
                (vec![1.2, 0.5], vec![2]),
                (vec![0.1, -0.2], vec![2]),
            ];
            let z = Tensor::vector(vec![0.7, -0.1]);
            let r = finite_diff_check(
                |t| {
                    let q1 = DiagGaussian::new(t[0].clone(), t[1].clone())?;
                    let q2 = DiagGaussian::new(t[2].clone(), t[3].clone())?;
                    let jp = aggregate(kind, &[q1, q2])?;
                    jp.log_prob(&z)?.add(&jp.mean()?.sum()?)
                },
                &point,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "{kind}: {}", r.max_rel_error);
        }
        reset_tape();
    }
}
