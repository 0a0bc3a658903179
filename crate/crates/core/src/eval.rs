//! AUROC, closed-set accuracy and run comparison.
//!
//! This is the only module that reads the hidden ID/OOD ground truth.

use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, TruthTag};
use crate::{Error, Result};

/// Ground truth of a sample. Training code never calls this.
pub fn truth_tag(sample: &ImageSample) -> TruthTag {
    sample.truth
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub ood_score: f64,
    pub truth: TruthTag,
    pub predicted: Option<usize>,
    pub actual: Option<usize>,
}

/// Mann–Whitney AUROC with OOD as the positive class: the fraction of
/// (OOD, ID) pairs where the OOD score is higher, ties counting one half.
///
/// Sort-based, O(n log n); tied scores share their average rank.
pub fn auroc(scored: &[ScoredSample]) -> Result<f64> {
    if let Some(s) = scored.iter().find(|s| !s.ood_score.is_finite()) {
        return Err(Error::NonFinite(format!("OOD score {}", s.ood_score)));
    }
    let n_pos = scored.iter().filter(|s| s.truth == TruthTag::Ood).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Invalid(format!(
            "AUROC needs both classes, got {n_pos} OOD and {n_neg} ID samples"
        )));
    }
    let mut order: Vec<&ScoredSample> = scored.iter().collect();
    order.sort_by(|a, b| a.ood_score.total_cmp(&b.ood_score));
    // Twice the rank sum keeps tie ranks integral.
    let mut pos_rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && order[j].ood_score == order[i].ood_score {
            j += 1;
        }
        // ranks i+1..=j, average (i+1+j)/2
        let avg_x2 = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|s| s.truth == TruthTag::Ood).count() as u128;
        pos_rank_sum_x2 += avg_x2 * pos_in_group;
        i = j;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let u_x2 = pos_rank_sum_x2 - p * (p + 1);
    Ok(u_x2 as f64 / (2 * p * n) as f64)
}

/// Fraction of ID samples whose predicted class equals the true class.
pub fn closed_set_accuracy(scored: &[ScoredSample]) -> Result<f64> {
    let id: Vec<&ScoredSample> = scored.iter().filter(|s| s.truth == TruthTag::Id).collect();
    if id.is_empty() {
        return Err(Error::Invalid("accuracy needs at least one ID sample".into()));
    }
    let mut correct = 0usize;
    for s in &id {
        match (s.predicted, s.actual) {
            (Some(p), Some(a)) => correct += usize::from(p == a),
            _ => {
                return Err(Error::Invalid(
                    "ID samples need predicted and true classes".into(),
                ))
            }
        }
    }
    Ok(correct as f64 / id.len() as f64)
}

/// `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub accuracy: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl Metrics {
    pub fn from_scored(scored: &[ScoredSample], seed: u64, config_hash: String) -> Result<Self> {
        Ok(Self {
            auroc: auroc(scored)?,
            accuracy: closed_set_accuracy(scored)?,
            n_id: scored.iter().filter(|s| s.truth == TruthTag::Id).count(),
            n_ood: scored.iter().filter(|s| s.truth == TruthTag::Ood).count(),
            seed,
            config_hash,
        })
    }
}

/// One evaluated run, as fed to [`compare_variants`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub split_checksum: String,
    pub auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedDelta {
    pub seed: u64,
    pub auroc_a: f64,
    pub auroc_b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (n − 1); std is 0 for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub name_a: String,
    pub name_b: String,
    pub per_seed: Vec<SeedDelta>,
    pub a: MeanStd,
    pub b: MeanStd,
    pub delta: MeanStd,
}

/// Pairs runs by seed and reports AUROC `a − b` per seed plus mean ± std.
pub fn compare_variants(
    name_a: &str,
    runs_a: &[RunRecord],
    name_b: &str,
    runs_b: &[RunRecord],
) -> Result<VariantReport> {
    if runs_a.is_empty() || runs_a.len() != runs_b.len() {
        return Err(Error::Invalid(format!(
            "need the same non-zero number of runs per variant, got {} and {}",
            runs_a.len(),
            runs_b.len()
        )));
    }
    let mut per_seed = Vec::with_capacity(runs_a.len());
    for a in runs_a {
        let b = runs_b
            .iter()
            .find(|b| b.seed == a.seed)
            .ok_or_else(|| Error::Invalid(format!("seed {} missing from {name_b}", a.seed)))?;
        if a.split_checksum != b.split_checksum {
            return Err(Error::Invalid(format!(
                "split mismatch for seed {}: {} vs {}",
                a.seed, a.split_checksum, b.split_checksum
            )));
        }
        per_seed.push(SeedDelta {
            seed: a.seed,
            auroc_a: a.auroc,
            auroc_b: b.auroc,
            delta: a.auroc - b.auroc,
        });
    }
    let col = |f: fn(&SeedDelta) -> f64| per_seed.iter().map(f).collect::<Vec<_>>();
    Ok(VariantReport {
        name_a: name_a.to_string(),
        name_b: name_b.to_string(),
        a: MeanStd::of(&col(|s| s.auroc_a)),
        b: MeanStd::of(&col(|s| s.auroc_b)),
        delta: MeanStd::of(&col(|s| s.delta)),
        per_seed,
    })
}

impl VariantReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("seed,{},{},delta\n", self.name_a, self.name_b);
        for s in &self.per_seed {
            out += &format!("{},{:.6},{:.6},{:.6}\n", s.seed, s.auroc_a, s.auroc_b, s.delta);
        }
        out += &format!("mean,{:.6},{:.6},{:.6}\n", self.a.mean, self.b.mean, self.delta.mean);
        out += &format!("std,{:.6},{:.6},{:.6}\n", self.a.std, self.b.std, self.delta.std);
        out
    }

    pub fn to_markdown(&self) -> String {
        let pct = |m: &MeanStd| format!("{:.1} ± {:.1}", 100.0 * m.mean, 100.0 * m.std);
        let mut out = String::from("| variant | AUROC (%) |\n|---|---|\n");
        out += &format!("| {} | {} |\n", self.name_a, pct(&self.a));
        out += &format!("| {} | {} |\n", self.name_b, pct(&self.b));
        out += &format!("| Δ ({} − {}) | {} |\n", self.name_a, self.name_b, pct(&self.delta));
        out += &format!("\n| seed | {} | {} | Δ |\n|---|---|---|---|\n", self.name_a, self.name_b);
        for s in &self.per_seed {
            out += &format!("| {} | {:.4} | {:.4} | {:+.4} |\n", s.seed, s.auroc_a, s.auroc_b, s.delta);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scored(scores: &[f64], tags: &[TruthTag]) -> Vec<ScoredSample> {
        scores
            .iter()
            .zip(tags)
            .map(|(&s, &t)| ScoredSample { ood_score: s, truth: t, predicted: None, actual: None })
            .collect()
    }

    fn brute_force(s: &[ScoredSample]) -> f64 {
        let pos: Vec<f64> = s.iter().filter(|x| x.truth == TruthTag::Ood).map(|x| x.ood_score).collect();
        let neg: Vec<f64> = s.iter().filter(|x| x.truth == TruthTag::Id).map(|x| x.ood_score).collect();
        let mut wins = 0.0;
        for p in &pos {
            for n in &neg {
                wins += if p > n { 1.0 } else if p == n { 0.5 } else { 0.0 };
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    use TruthTag::{Id, Ood};

    #[test]
    fn auroc_reference_values() {
        assert_eq!(auroc(&scored(&[0.9, 0.8, 0.3, 0.1], &[Ood, Id, Ood, Id])).unwrap(), 0.75);
        assert_eq!(auroc(&scored(&[5.0, 6.0, 1.0, 2.0], &[Ood, Ood, Id, Id])).unwrap(), 1.0);
        assert_eq!(auroc(&scored(&[0.4; 6], &[Ood, Id, Ood, Id, Id, Id])).unwrap(), 0.5);
        assert!(auroc(&scored(&[1.0, 2.0], &[Id, Id])).is_err());
        assert!(auroc(&scored(&[f64::NAN, 2.0], &[Id, Ood])).is_err());
    }

    #[test]
    fn accuracy_cases() {
        let rows = |pairs: &[(usize, usize)]| -> Vec<ScoredSample> {
            pairs
                .iter()
                .map(|&(p, a)| ScoredSample { ood_score: 0.0, truth: Id, predicted: Some(p), actual: Some(a) })
                .collect()
        };
        assert_eq!(closed_set_accuracy(&rows(&[(0, 0), (1, 1), (2, 2)])).unwrap(), 1.0);
        // every fourth row is mislabeled
        let pairs: Vec<(usize, usize)> = (0..20).map(|i| (i % 3, if i % 4 == 0 { (i + 1) % 3 } else { i % 3 })).collect();
        let expected = pairs.iter().filter(|(p, a)| p == a).count() as f64 / 20.0;
        assert_eq!(expected, 15.0 / 20.0);
        let mut r = rows(&pairs);
        r.push(ScoredSample { ood_score: 1.0, truth: Ood, predicted: Some(1), actual: Some(7) });
        assert_eq!(closed_set_accuracy(&r).unwrap(), expected);
        assert!(closed_set_accuracy(&scored(&[1.0], &[Ood])).is_err());
    }

    #[test]
    fn chance_level_accuracy() {
        let k = 4;
        let rows: Vec<ScoredSample> = (0..4000)
            .map(|i| ScoredSample { ood_score: 0.0, truth: Id, predicted: Some((i * 7 + i / 13) % k), actual: Some(i % k) })
            .collect();
        let acc = closed_set_accuracy(&rows).unwrap();
        assert!((acc - 1.0 / k as f64).abs() < 0.05, "{acc}");
    }

    fn rec(seed: u64, auroc: f64) -> RunRecord {
        RunRecord { seed, split_checksum: format!("s{seed}"), auroc }
    }

    #[test]
    fn compare_identity_and_antisymmetry() {
        let a = vec![rec(1, 0.9), rec(2, 0.95), rec(3, 0.8)];
        let b = vec![rec(1, 0.85), rec(2, 0.97), rec(3, 0.7)];
        let same = compare_variants("a", &a, "a", &a).unwrap();
        assert!(same.per_seed.iter().all(|s| s.delta == 0.0));
        let ab = compare_variants("a", &a, "b", &b).unwrap();
        let ba = compare_variants("b", &b, "a", &a).unwrap();
        for (x, y) in ab.per_seed.iter().zip(&ba.per_seed) {
            assert_eq!(x.delta, -y.delta);
        }
        let deltas = [0.05, -0.02, 0.1];
        let mean = deltas.iter().sum::<f64>() / 3.0;
        let std = (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!((ab.delta.mean - mean).abs() < 1e-12 && (ab.delta.std - std).abs() < 1e-12);
        assert!(ab.to_csv().starts_with("seed,a,b,delta\n1,"));
        assert!(ab.to_markdown().contains("| a |"));
        let mut bad = b.clone();
        bad[0].split_checksum = "other".into();
        assert!(compare_variants("a", &a, "b", &bad).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_brute_force(rows in prop::collection::vec((0u8..20, any::<bool>()), 2..500)) {
            let s: Vec<ScoredSample> = rows.iter().map(|&(v, o)| ScoredSample {
                ood_score: v as f64 / 4.0, truth: if o { Ood } else { Id }, predicted: None, actual: None,
            }).collect();
            let has_both = s.iter().any(|x| x.truth == Ood) && s.iter().any(|x| x.truth == Id);
            prop_assume!(has_both);
            prop_assert_eq!(auroc(&s).unwrap(), brute_force(&s));
        }

        #[test]
        fn auroc_monotone_transform_and_negation(rows in prop::collection::vec((-100.0f64..100.0, any::<bool>()), 2..100)) {
            let s: Vec<ScoredSample> = rows.iter().map(|&(v, o)| ScoredSample {
                ood_score: v, truth: if o { Ood } else { Id }, predicted: None, actual: None,
            }).collect();
            prop_assume!(s.iter().any(|x| x.truth == Ood) && s.iter().any(|x| x.truth == Id));
            let base = auroc(&s).unwrap();
            let t: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { ood_score: (x.ood_score / 50.0).exp() * 3.0 + 1.0, ..*x }).collect();
            prop_assert!((auroc(&t).unwrap() - base).abs() < 1e-12);
            let mut sorted: Vec<f64> = s.iter().map(|x| x.ood_score).collect();
            sorted.sort_by(f64::total_cmp);
            let ties = sorted.windows(2).any(|w| w[0] == w[1]);
            if !ties {
                let neg: Vec<ScoredSample> = s.iter().map(|x| ScoredSample { ood_score: -x.ood_score, ..*x }).collect();
                prop_assert!((auroc(&neg).unwrap() + base - 1.0).abs() < 1e-12);
            }
        }
    }
}
