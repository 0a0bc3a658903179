//! The joint space: where ID/OOD decisions are made.
//!
//! Labeled features are standardized, then enclosed by a sphere centred on
//! their mean whose radius reaches the furthest sample. Tangent hyperplanes at
//! the `N` furthest samples (pushed out onto the sphere) are the initial
//! binary classifiers; a sample is ID under candidate `j` when its signed
//! distance to hyperplane `j` lies within [`DETECTION_TAU`] of the labeled
//! mean. The candidate flagging the most unlabeled samples seeds the OOD
//! center, after which decisions come from the Apollonius circle
//! `d(f, k_ic) / d(f, k_oc) ≤ λ`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::losses::distance;
use crate::{Error, Result};

/// Deviation threshold of the initial tangent-plane detector (inclusive).
pub const DETECTION_TAU: f64 = 0.1;
/// Floor applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-8;
/// Added to the OOD-center distance in [`ApolloniusClassifier::ood_score`].
pub const SCORE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decision {
    Id,
    Ood,
}

fn mean_of(features: &[Vec<f64>]) -> Vec<f64> {
    let dim = features[0].len();
    let mut m = vec![0.0; dim];
    for f in features {
        m.iter_mut().zip(f).for_each(|(a, b)| *a += b);
    }
    let n = features.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

fn check_dims(features: &[Vec<f64>], dim: usize) -> Result<()> {
    match features.iter().find(|f| f.len() != dim) {
        Some(f) => Err(Error::shape(dim, f.len())),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStandardizer {
    /// Per-dimension mean and population standard deviation, floored at [`STD_FLOOR`].
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(Error::Invalid(format!(
                "standardizer needs at least 2 features, got {}",
                features.len()
            )));
        }
        check_dims(features, features[0].len())?;
        let mean = mean_of(features);
        let n = features.len() as f64;
        let std = (0..mean.len())
            .map(|d| {
                let var = features.iter().map(|f| (f[d] - mean[d]).powi(2)).sum::<f64>() / n;
                var.sqrt().max(STD_FLOOR)
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn standardize_all(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        features.iter().map(|f| self.standardize(f)).collect()
    }

    /// Chain rule through [`standardize`](Self::standardize): divides by the std.
    pub fn backprop(&self, grad_standardized: &[f64]) -> Vec<f64> {
        grad_standardized.iter().zip(&self.std).map(|(g, s)| g / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdCluster {
    pub center: Vec<f64>,
    pub radius: f64,
    pub count: usize,
}

impl IdCluster {
    /// Mean center and the distance to the furthest fitting feature as radius.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::Invalid("cannot fit an ID cluster to no features".into()));
        }
        check_dims(features, features[0].len())?;
        let center = mean_of(features);
        let radius = features
            .iter()
            .map(|f| distance(f, &center))
            .fold(0.0, f64::max);
        if !radius.is_finite() {
            return Err(Error::NonFinite("ID cluster radius".into()));
        }
        Ok(Self {
            center,
            radius,
            count: features.len(),
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.radius == 0.0
    }
}

/// A tangent hyperplane of the ID sphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateClassifier {
    /// 1-based; candidate 1 is anchored at the furthest labeled sample.
    pub index: usize,
    pub anchor: Vec<f64>,
    pub normal: Vec<f64>,
    /// Mean of [`score`](Self::score) over the labeled features.
    pub reference_mean: f64,
}

impl CandidateClassifier {
    /// Signed distance to the hyperplane, positive on the outside.
    pub fn score(&self, f: &[f64]) -> f64 {
        f.iter()
            .zip(&self.anchor)
            .zip(&self.normal)
            .map(|((x, a), n)| (x - a) * n)
            .sum()
    }

    pub fn detect_with_tau(&self, f: &[f64], tau: f64) -> Decision {
        if (self.score(f) - self.reference_mean).abs() <= tau {
            Decision::Id
        } else {
            Decision::Ood
        }
    }

    pub fn detect(&self, f: &[f64]) -> Decision {
        self.detect_with_tau(f, DETECTION_TAU)
    }
}

/// Indices of the `n` features furthest from `center`, ties by ascending index.
pub fn furthest_indices(center: &[f64], features: &[Vec<f64>], n: usize) -> Vec<usize> {
    let mut order: Vec<(usize, f64)> = features
        .iter()
        .enumerate()
        .map(|(i, f)| (i, distance(f, center)))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    order.into_iter().take(n).map(|(i, _)| i).collect()
}

pub fn build_candidates(
    cluster: &IdCluster,
    labeled: &[Vec<f64>],
    n: usize,
) -> Result<Vec<CandidateClassifier>> {
    if cluster.is_degenerate() {
        return Err(Error::DegenerateCluster("ID cluster radius is zero".into()));
    }
    if n == 0 || n > labeled.len() {
        return Err(Error::Invalid(format!(
            "need 1 ≤ N ≤ {} candidates, got {n}",
            labeled.len()
        )));
    }
    check_dims(labeled, cluster.center.len())?;
    furthest_indices(&cluster.center, labeled, n)
        .into_iter()
        .enumerate()
        .map(|(j, i)| {
            let f = &labeled[i];
            let d = distance(f, &cluster.center);
            if d == 0.0 {
                return Err(Error::DegenerateCluster(format!(
                    "candidate sample {i} sits on the cluster center"
                )));
            }
            let normal: Vec<f64> = f
                .iter()
                .zip(&cluster.center)
                .map(|(x, c)| (x - c) / d)
                .collect();
            let anchor = cluster
                .center
                .iter()
                .zip(&normal)
                .map(|(c, u)| c + cluster.radius * u)
                .collect();
            let mut cand = CandidateClassifier {
                index: j + 1,
                anchor,
                normal,
                reference_mean: 0.0,
            };
            cand.reference_mean =
                labeled.iter().map(|f| cand.score(f)).sum::<f64>() / labeled.len() as f64;
            Ok(cand)
        })
        .collect()
}

pub fn detect_initial(candidate: &CandidateClassifier, unlabeled: &[Vec<f64>]) -> Vec<Decision> {
    unlabeled.iter().map(|f| candidate.detect(f)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSelection {
    /// Position in the candidate list (0-based).
    pub chosen: usize,
    pub rates: Vec<f64>,
}

/// OOD rate per candidate; the highest rate wins, ties to the lowest index.
pub fn select_candidate(
    candidates: &[CandidateClassifier],
    unlabeled: &[Vec<f64>],
) -> Result<CandidateSelection> {
    if unlabeled.is_empty() {
        return Err(Error::Invalid("candidate selection needs unlabeled features".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidates to select from".into()));
    }
    let m = unlabeled.len() as f64;
    let rates: Vec<f64> = candidates
        .iter()
        .map(|c| {
            let n_ood = unlabeled
                .iter()
                .filter(|f| c.detect(f) == Decision::Ood)
                .count();
            n_ood as f64 / m
        })
        .collect();
    let mut chosen = 0;
    for (j, &r) in rates.iter().enumerate() {
        if r > rates[chosen] {
            chosen = j;
        }
    }
    Ok(CandidateSelection { chosen, rates })
}

/// Binary ID/OOD classifier bounded by an Apollonius circle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApolloniusClassifier {
    pub id_center: Vec<f64>,
    pub ood_center: Vec<f64>,
    pub lambda: f64,
    pub id_count: usize,
    pub ood_count: usize,
}

impl ApolloniusClassifier {
    pub fn new(
        id_center: Vec<f64>,
        ood_center: Vec<f64>,
        lambda: f64,
        id_count: usize,
        ood_count: usize,
    ) -> Result<Self> {
        if id_center.len() != ood_center.len() {
            return Err(Error::shape(id_center.len(), ood_center.len()));
        }
        if id_center == ood_center {
            return Err(Error::Invalid("ID and OOD centers coincide".into()));
        }
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::Config(format!("λ must lie in (0, 1], got {lambda}")));
        }
        Ok(Self {
            id_center,
            ood_center,
            lambda,
            id_count,
            ood_count,
        })
    }

    pub fn classify(&self, f: &[f64]) -> Decision {
        let d1 = distance(f, &self.id_center);
        let d2 = distance(f, &self.ood_center);
        // d1 ≤ λ·d2 is the ratio test without dividing by a zero d2.
        if d1 <= self.lambda * d2 {
            Decision::Id
        } else {
            Decision::Ood
        }
    }

    /// `d1 / (d2 + ε)`; higher means more OOD.
    pub fn ood_score(&self, f: &[f64]) -> f64 {
        distance(f, &self.id_center) / (distance(f, &self.ood_center) + SCORE_EPS)
    }

    /// Folds newly detected features into the running means of both centers.
    pub fn update_centers(&mut self, new_id: &[Vec<f64>], new_ood: &[Vec<f64>]) {
        fold_into(&mut self.id_center, &mut self.id_count, new_id);
        fold_into(&mut self.ood_center, &mut self.ood_count, new_ood);
    }

    pub fn radius(&self) -> Result<f64> {
        apollonius_radius(&self.id_center, &self.ood_center, self.lambda)
    }
}

fn fold_into(center: &mut [f64], count: &mut usize, features: &[Vec<f64>]) {
    if features.is_empty() {
        return;
    }
    let old = *count as f64;
    let total = old + features.len() as f64;
    for (d, c) in center.iter_mut().enumerate() {
        let sum: f64 = features.iter().map(|f| f[d]).sum();
        *c = (*c * old + sum) / total;
    }
    *count += features.len();
}

/// Seeds the OOD center from the chosen candidate's detections. When nothing
/// is detected the ID band is narrowed once (τ halved) before giving up.
pub fn init_ood_center(
    chosen: &CandidateClassifier,
    cluster: &IdCluster,
    unlabeled: &[Vec<f64>],
    lambda: f64,
) -> Result<ApolloniusClassifier> {
    let mut tau = DETECTION_TAU;
    for attempt in 0..2 {
        let detected: Vec<Vec<f64>> = unlabeled
            .iter()
            .filter(|f| chosen.detect_with_tau(f, tau) == Decision::Ood)
            .cloned()
            .collect();
        if !detected.is_empty() {
            return ApolloniusClassifier::new(
                cluster.center.clone(),
                mean_of(&detected),
                lambda,
                cluster.count,
                detected.len(),
            );
        }
        if attempt == 0 {
            warn!(
                "candidate {} detected no OOD samples at τ = {tau}; retrying at τ = {}",
                chosen.index,
                tau / 2.0
            );
            tau /= 2.0;
        }
    }
    Err(Error::NoOodEvidence { tau })
}

/// `λ / (1 − λ²) · ‖k_ic − k_oc‖`.
pub fn apollonius_radius(k_ic: &[f64], k_oc: &[f64], lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Config(format!(
            "Apollonius radius needs 0 < λ < 1, got {lambda}"
        )));
    }
    Ok(lambda / (1.0 - lambda * lambda) * distance(k_ic, k_oc))
}

/// `(k_ic − λ²·k_oc) / (1 − λ²)`.
pub fn apollonius_center(k_ic: &[f64], k_oc: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Config(format!(
            "Apollonius center needs 0 < λ < 1, got {lambda}"
        )));
    }
    let l2 = lambda * lambda;
    Ok(k_ic
        .iter()
        .zip(k_oc)
        .map(|(a, b)| (a - l2 * b) / (1.0 - l2))
        .collect())
}

/// Everything the joint space holds after fine-tuning, as written to
/// `jointspace.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpaceState {
    pub standardizer: FeatureStandardizer,
    pub cluster: IdCluster,
    pub candidates: Vec<CandidateClassifier>,
    pub selection: Option<CandidateSelection>,
    pub apollonius: Option<ApolloniusClassifier>,
}
