//! Browser demo: Apollonius decision maps, prompted images and ROC curves.
//!
//! The plain functions are the testable core; `web` wraps them for
//! `wasm-bindgen` when compiled to wasm32.

use ossl_core::data::{class_template, TruthTag};
use ossl_core::eval::{auroc, ScoredSample};
use ossl_core::joint_space::{apollonius_center, apollonius_radius, ApolloniusClassifier, Decision};
use ossl_core::prompt::{param_count, PromptRole, VisualPrompt};
use ossl_core::Geometry;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

pub type DemoResult<T> = Result<T, String>;

const ID_RGB: [f64; 3] = [47.0, 110.0, 200.0];
const OOD_RGB: [f64; 3] = [230.0, 120.0, 40.0];

/// Square world window `[-extent, extent]²` rendered into `width × height`.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub width: usize,
    pub height: usize,
    pub extent: f64,
}

impl View {
    /// World coordinates of a pixel center; y grows upwards.
    pub fn world(&self, px: usize, py: usize) -> [f64; 2] {
        let x = ((px as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * self.extent;
        let y = (1.0 - (py as f64 + 0.5) / self.height as f64 * 2.0) * self.extent;
        [x, y]
    }
}

fn shade(rgb: [f64; 3], t: f64) -> [u8; 4] {
    let mix = |c: f64| (255.0 + (c - 255.0) * t).round().clamp(0.0, 255.0) as u8;
    [mix(rgb[0]), mix(rgb[1]), mix(rgb[2]), 255]
}

/// RGBA map of ID (blue) / OOD (orange) decisions. Colour intensity
/// follows the OOD score, so the boundary sits where it crosses λ.
pub fn decision_map(k_ic: [f64; 2], k_oc: [f64; 2], lambda: f64, view: View) -> DemoResult<Vec<u8>> {
    if view.width == 0 || view.height == 0 || view.extent.is_nan() || view.extent <= 0.0 {
        return Err(format!("empty view {view:?}"));
    }
    let clf = ApolloniusClassifier::new(k_ic.to_vec(), k_oc.to_vec(), lambda, 1, 1).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(view.width * view.height * 4);
    for py in 0..view.height {
        for px in 0..view.width {
            let f = view.world(px, py);
            let score = clf.ood_score(&f);
            let (rgb, t) = match clf.classify(&f) {
                Decision::Id => (ID_RGB, 0.35 + 0.65 * (1.0 - score / lambda)),
                Decision::Ood => (OOD_RGB, 0.35 + 0.3 * (1.0 - lambda / score).min(1.0)),
            };
            out.extend_from_slice(&shade(rgb, t));
        }
    }
    Ok(out)
}

/// `[cx, cy, r]` of the Apollonius circle `d1 = λ·d2`.
pub fn circle(k_ic: [f64; 2], k_oc: [f64; 2], lambda: f64) -> DemoResult<[f64; 3]> {
    let c = apollonius_center(&k_ic, &k_oc, lambda).map_err(|e| e.to_string())?;
    let r = apollonius_radius(&k_ic, &k_oc, lambda).map_err(|e| e.to_string())?;
    Ok([c[0], c[1], r])
}

/// Number of learnable values in a width-`p` border prompt.
pub fn prompt_params(channels: usize, height: usize, width: usize, p: usize) -> DemoResult<usize> {
    param_count(p, Geometry::new(channels, height, width)).map_err(|e| e.to_string())
}

/// RGBA rendering of a synthetic class template with a random border prompt
/// of width `p` and values in `±amplitude` added on top.
pub fn prompted_image(side: usize, p: usize, class: usize, seed: u64, amplitude: f64) -> DemoResult<Vec<u8>> {
    let g = Geometry::square(3, side);
    let n = param_count(p, g).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<f32> = (0..n)
        .map(|_| if amplitude > 0.0 { rng.gen_range(-amplitude..=amplitude) as f32 } else { 0.0 })
        .collect();
    let prompt = VisualPrompt::from_params(PromptRole::OodSpecific, p, g, params).map_err(|e| e.to_string())?;
    let image = prompt.apply(&class_template(seed, class, g)).map_err(|e| e.to_string())?;
    let plane = side * side;
    let data = image.data();
    let mut out = Vec::with_capacity(plane * 4);
    for i in 0..plane {
        for c in 0..3 {
            out.push((data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)` from (0,0) to (1,1); OOD is positive.
    pub points: Vec<[f64; 2]>,
    pub auroc: f64,
}

/// ROC of OOD scores. Tied scores form one diagonal step.
pub fn roc(id_scores: &[f64], ood_scores: &[f64]) -> DemoResult<RocCurve> {
    let mut scored: Vec<ScoredSample> = id_scores
        .iter()
        .map(|&s| (s, TruthTag::Id))
        .chain(ood_scores.iter().map(|&s| (s, TruthTag::Ood)))
        .map(|(ood_score, truth)| ScoredSample {
            ood_score,
            truth,
            predicted: None,
            actual: None,
        })
        .collect();
    let auroc = auroc(&scored).map_err(|e| e.to_string())?;
    scored.sort_by(|a, b| b.ood_score.total_cmp(&a.ood_score));
    let (n_id, n_ood) = (id_scores.len() as f64, ood_scores.len() as f64);
    let (mut fp, mut tp) = (0usize, 0usize);
    let mut points = vec![[0.0, 0.0]];
    for (i, s) in scored.iter().enumerate() {
        match s.truth {
            TruthTag::Ood => tp += 1,
            TruthTag::Id => fp += 1,
        }
        if scored.get(i + 1).is_none_or(|next| next.ood_score != s.ood_score) {
            points.push([fp as f64 / n_id, tp as f64 / n_ood]);
        }
    }
    Ok(RocCurve { points, auroc })
}

/// Gaussian ID scores around 0 and OOD scores around `separation`.
pub fn gaussian_scores(separation: f64, spread: f64, n: usize, seed: u64) -> DemoResult<(Vec<f64>, Vec<f64>)> {
    let normal = Normal::new(0.0, spread).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let ood = (0..n).map(|_| separation + normal.sample(&mut rng)).collect();
    Ok((id, ood))
}

#[cfg(target_arch = "wasm32")]
mod web {
    use wasm_bindgen::prelude::*;

    use super::View;

    fn js<T>(r: super::DemoResult<T>) -> Result<T, JsValue> {
        r.map_err(|e| JsValue::from_str(&e))
    }

    #[wasm_bindgen]
    #[allow(clippy::too_many_arguments)]
    pub fn decision_map(
        kx: f64,
        ky: f64,
        ox: f64,
        oy: f64,
        lambda: f64,
        width: usize,
        height: usize,
        extent: f64,
    ) -> Result<Vec<u8>, JsValue> {
        js(super::decision_map([kx, ky], [ox, oy], lambda, View { width, height, extent }))
    }

    #[wasm_bindgen]
    pub fn apollonius_circle(kx: f64, ky: f64, ox: f64, oy: f64, lambda: f64) -> Result<Vec<f64>, JsValue> {
        js(super::circle([kx, ky], [ox, oy], lambda)).map(Vec::from)
    }

    #[wasm_bindgen]
    pub fn prompt_params(channels: usize, height: usize, width: usize, p: usize) -> Result<usize, JsValue> {
        js(super::prompt_params(channels, height, width, p))
    }

    #[wasm_bindgen]
    pub fn prompted_image(side: usize, p: usize, class: usize, seed: u32, amplitude: f64) -> Result<Vec<u8>, JsValue> {
        js(super::prompted_image(side, p, class, seed as u64, amplitude))
    }

    /// JSON `{points, auroc}` for Gaussian scores with the given separation.
    #[wasm_bindgen]
    pub fn roc_curve(separation: f64, spread: f64, n: usize, seed: u32) -> Result<String, JsValue> {
        let (id, ood) = js(super::gaussian_scores(separation, spread, n, seed as u64))?;
        let curve = js(super::roc(&id, &ood))?;
        serde_json::to_string(&curve).map_err(|e| JsValue::from_str(&e.to_string()))
    }
}
