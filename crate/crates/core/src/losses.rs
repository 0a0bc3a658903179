//! Supervised, consistency and prompt-contrastive objectives.
//!
//! Each loss comes with its gradient with respect to the quantities the
//! student branch is differentiated through. Teacher-side inputs are treated
//! as fixed targets.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub fn softmax(logits: &[impl Into<f64> + Copy]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|&l| l.into())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l.into() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_label(logits: &[f64], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(Error::Invalid(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(())
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_label(logits, label)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `softmax(logits) − onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    check_label(logits, label)?;
    let mut p = softmax(logits);
    p[label] -= 1.0;
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelOutcome {
    pub loss: f64,
    pub n_confident: usize,
    /// Pseudo-label per sample, `None` below the threshold.
    pub labels: Vec<Option<usize>>,
    /// Gradient w.r.t. each row of the strong logits.
    pub grad_strong: Vec<Vec<f64>>,
}

/// Thresholded pseudo-labeling: weak logits pick the target when their top
/// probability reaches `eta`; the strong logits are trained toward it. The loss
/// is the mean CE over confident samples and 0 when none are confident.
pub fn pseudo_label_loss(
    weak_logits: &[Vec<f64>],
    strong_logits: &[Vec<f64>],
    eta: f64,
) -> Result<PseudoLabelOutcome> {
    if weak_logits.len() != strong_logits.len() {
        return Err(Error::shape(weak_logits.len(), strong_logits.len()));
    }
    let labels: Vec<Option<usize>> = weak_logits
        .iter()
        .map(|w| {
            let p = softmax(w);
            let (arg, &max) = p
                .iter()
                .enumerate()
                .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
            (max >= eta).then_some(arg)
        })
        .collect();
    let n_confident = labels.iter().flatten().count();
    let mut loss = 0.0;
    let mut grad_strong = Vec::with_capacity(strong_logits.len());
    for (strong, label) in strong_logits.iter().zip(&labels) {
        match label {
            Some(y) => {
                loss += cross_entropy(strong, *y)?;
                let mut g = cross_entropy_grad(strong, *y)?;
                g.iter_mut().for_each(|v| *v /= n_confident as f64);
                grad_strong.push(g);
            }
            None => grad_strong.push(vec![0.0; strong.len()]),
        }
    }
    if n_confident > 0 {
        loss /= n_confident as f64;
    }
    Ok(PseudoLabelOutcome {
        loss,
        n_confident,
        labels,
        grad_strong,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyMode {
    /// `d(k_ic,f_s) + d(k_oc,f_s) − d(k_ic,f_t) − d(k_oc,f_t)`; unbounded below.
    Literal,
    /// `|d(k_ic,f_s) − d(k_ic,f_t)| + |d(k_oc,f_s) − d(k_oc,f_t)|`.
    #[default]
    Absolute,
}

impl std::str::FromStr for ConsistencyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(Self::Literal),
            "absolute" => Ok(Self::Absolute),
            other => Err(Error::Config(format!("unknown consistency mode {other:?}"))),
        }
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn unit_from(center: &[f64], f: &[f64]) -> Vec<f64> {
    let d = distance(center, f);
    if d == 0.0 {
        return vec![0.0; f.len()];
    }
    f.iter().zip(center).map(|(x, c)| (x - c) / d).collect()
}

pub fn consistency_loss(
    f_s: &[f64],
    f_t: &[f64],
    k_ic: &[f64],
    k_oc: &[f64],
    mode: ConsistencyMode,
) -> f64 {
    let (si, so) = (distance(k_ic, f_s), distance(k_oc, f_s));
    let (ti, to) = (distance(k_ic, f_t), distance(k_oc, f_t));
    match mode {
        ConsistencyMode::Literal => si + so - ti - to,
        ConsistencyMode::Absolute => (si - ti).abs() + (so - to).abs(),
    }
}

/// Gradient of [`consistency_loss`] w.r.t. the student feature. At a kink
/// (zero distance or zero difference) the zero subgradient is used.
pub fn consistency_grad(
    f_s: &[f64],
    f_t: &[f64],
    k_ic: &[f64],
    k_oc: &[f64],
    mode: ConsistencyMode,
) -> Vec<f64> {
    let mut grad = vec![0.0; f_s.len()];
    for center in [k_ic, k_oc] {
        let weight = match mode {
            ConsistencyMode::Literal => 1.0,
            ConsistencyMode::Absolute => {
                let diff = distance(center, f_s) - distance(center, f_t);
                if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        };
        if weight != 0.0 {
            let u = unit_from(center, f_s);
            grad.iter_mut().zip(&u).for_each(|(g, u)| *g += weight * u);
        }
    }
    grad
}

fn norms_and_dot(v: &[f64], w: &[f64]) -> Result<(f64, f64, f64)> {
    if v.len() != w.len() {
        return Err(Error::shape(v.len(), w.len()));
    }
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nv == 0.0 || nw == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero-norm prompt".into()));
    }
    let dot = v.iter().zip(w).map(|(a, b)| a * b).sum();
    Ok((nv, nw, dot))
}

/// `1 − cos(v, v̄)`, in `[0, 2]`.
pub fn contrastive_prompt_loss(v: &[f64], v_bar: &[f64]) -> Result<f64> {
    let (nv, nw, dot) = norms_and_dot(v, v_bar)?;
    Ok((1.0 - dot / (nv * nw)).clamp(0.0, 2.0))
}

/// Gradients of [`contrastive_prompt_loss`] w.r.t. `v` and `v̄`.
pub fn contrastive_prompt_grad(v: &[f64], v_bar: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (nv, nw, dot) = norms_and_dot(v, v_bar)?;
    let cos = dot / (nv * nw);
    // d cos / dv = v̄/(|v||v̄|) − cos·v/|v|²
    let gv = v
        .iter()
        .zip(v_bar)
        .map(|(a, b)| -(b / (nv * nw) - cos * a / (nv * nv)))
        .collect();
    let gw = v
        .iter()
        .zip(v_bar)
        .map(|(a, b)| -(a / (nv * nw) - cos * b / (nw * nw)))
        .collect();
    Ok((gv, gw))
}

/// Per-term weights of the unlabeled objective. A negative weight on the
/// contrastive term turns its minimization into maximization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub supervised: f64,
    pub consistency: f64,
    pub contrastive: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            supervised: 1.0,
            consistency: 1.0,
            contrastive: 1.0,
        }
    }
}

/// Weighted contributions of each term; `total` is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_c: f64,
    pub l_cl: f64,
    pub total: f64,
    pub n_confident: usize,
}

pub fn total_unlabeled_loss(
    l_s: f64,
    l_c: f64,
    l_cl: f64,
    n_confident: usize,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    for (name, v) in [("l_s", l_s), ("l_c", l_c), ("l_cl", l_cl)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    let l_s = weights.supervised * l_s;
    let l_c = weights.consistency * l_c;
    let l_cl = weights.contrastive * l_cl;
    Ok(LossBreakdown {
        l_s,
        l_c,
        l_cl,
        total: l_s + l_c + l_cl,
        n_confident,
    })
}
