//! Two-stage training: supervised pre-training of backbone and ID prompt,
//! then prompt-only fine-tuning on unlabeled data with OOD detection.

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{push_model, push_prompt, take_model, take_prompt, Checkpoint};
use crate::data::{sha256_hex, AugmentDraw, ImageSample, Strength};
use crate::joint_space::{
    build_candidates, init_ood_center, select_candidate, ApolloniusClassifier, CandidateClassifier,
    CandidateSelection, Decision, FeatureStandardizer, IdCluster, JointSpaceState,
};
use crate::losses::{
    consistency_grad, consistency_loss, contrastive_prompt_grad, contrastive_prompt_loss,
    cross_entropy, cross_entropy_grad, pseudo_label_loss, softmax, ConsistencyMode, LossBreakdown,
    LossWeights,
};
use crate::nnet::{Architecture, Branch, Forward, Gradients, MiniModel, Sgd, TeacherStudent};
use crate::prompt::{param_count, PromptRole, VisualPrompt};
use crate::{Error, Geometry, Image, Result};

const ID_PROMPT: &str = "id_prompt";
const OOD_PROMPT: &str = "ood_prompt";

/// Flat configuration shared by both stages; serialized as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Prompt width.
    pub p: usize,
    /// Side of the square frame inputs are resized to.
    pub frame: usize,
    pub n_candidates: usize,
    pub lambda: f64,
    pub eta: f64,
    pub lr: f64,
    pub momentum: f64,
    pub ema_decay: f64,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub feature_dim: usize,
    pub consistency_mode: ConsistencyMode,
    /// Sign of the contrastive term in the total loss.
    pub cl_sign: f64,
    pub use_cl: bool,
    pub cl_weight: f64,
    /// Also train on a labeled batch at every fine-tuning step.
    pub replay_labeled: bool,
    /// Fine-tuning epoch at which the learning rate drops by `lr_decay_factor`.
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            p: 4,
            frame: 32,
            n_candidates: 5,
            lambda: 0.5,
            eta: 0.7,
            lr: 0.03,
            momentum: 0.9,
            ema_decay: 0.99,
            epochs_pretrain: 10,
            epochs_finetune: 5,
            batch_size: 32,
            feature_dim: 32,
            consistency_mode: ConsistencyMode::Absolute,
            cl_sign: -1.0,
            use_cl: true,
            cl_weight: 1.0,
            replay_labeled: false,
            lr_decay_epoch: None,
            lr_decay_factor: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.p == 0 || 2 * self.p > self.frame {
            return bad(format!("prompt width p = {} must satisfy 0 < 2p ≤ frame = {}", self.p, self.frame));
        }
        if self.n_candidates == 0 {
            return bad("N must be positive".into());
        }
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("λ must lie in (0, 1), got {}", self.lambda));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad(format!("η must lie in (0, 1], got {}", self.eta));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("EMA decay must lie in [0, 1], got {}", self.ema_decay));
        }
        if self.batch_size == 0 || self.feature_dim == 0 {
            return bad("batch size and feature dimension must be positive".into());
        }
        if self.cl_sign != 1.0 && self.cl_sign != -1.0 {
            return bad(format!("cl_sign must be +1 or -1, got {}", self.cl_sign));
        }
        if !(self.cl_weight >= 0.0 && self.cl_weight.is_finite()) {
            return bad(format!("cl_weight must be non-negative, got {}", self.cl_weight));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return bad(format!("lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            contrastive: if self.use_cl { self.cl_sign * self.cl_weight } else { 0.0 },
            ..LossWeights::default()
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

mod streams {
    pub const MODEL_INIT: u64 = 10;
    pub const PRETRAIN_ORDER: u64 = 11;
    pub const PRETRAIN_AUGMENT: u64 = 12;
    pub const OOD_PROMPT_INIT: u64 = 20;
    pub const FINETUNE_ORDER: u64 = 21;
    pub const FINETUNE_AUGMENT: u64 = 22;
    pub const REPLAY_ORDER: u64 = 23;
}

/// Per-sample work runs in parallel; results keep input order so every
/// reduction afterwards is sequential and deterministic.
fn map_samples<I, O, F>(items: &[I], f: F) -> Result<Vec<O>>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> Result<O> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// [`map_samples`] for owned inputs.
fn map_owned<I, O, F>(items: Vec<I>, f: F) -> Result<Vec<O>>
where
    I: Send,
    O: Send,
    F: Fn(I) -> Result<O> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Prompted pixels are mapped from [0, 1] to [−1, 1] before encoding.
const PIXEL_CENTER: f32 = 0.5;
const PIXEL_SCALE: f32 = 2.0;

fn encode(model: &MiniModel<f32>, image: &Image<f32>, prompt: &VisualPrompt<f32>) -> Result<Forward<f32>> {
    let mut x = prompt.apply(image)?;
    x.data_mut().iter_mut().for_each(|v| *v = (*v - PIXEL_CENTER) * PIXEL_SCALE);
    model.forward(&x)
}

fn prompt_grad(prompt: &VisualPrompt<f32>, input_grad: &[f32]) -> Result<Vec<f32>> {
    let mut g = prompt.gradient_from_slice(input_grad)?;
    g.iter_mut().for_each(|v| *v *= PIXEL_SCALE);
    Ok(g)
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn frame_geometry(cfg: &TrainConfig, channels: usize) -> Geometry {
    Geometry::square(channels, cfg.frame)
}

/// Resizes to the prompt frame when needed.
fn to_frame(image: &Image<f32>, frame: Geometry) -> Result<Image<f32>> {
    let g = image.geometry();
    if g.channels != frame.channels {
        return Err(Error::shape(frame, g));
    }
    if g == frame {
        Ok(image.clone())
    } else {
        Ok(image.resize_nearest(frame.height, frame.width))
    }
}

fn divergence(stage: &'static str, epoch: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(detail) => Error::Divergence { stage, epoch, step, detail },
        other => other,
    }
}

fn add_scaled(acc: &mut [f32], g: &[f32], scale: f32) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a += scale * b);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Output of pre-training: frozen backbone, trained ID prompt and the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedState {
    pub model: MiniModel<f32>,
    pub id_prompt: VisualPrompt<f32>,
    pub standardizer: FeatureStandardizer,
    pub cluster: IdCluster,
    pub candidates: Vec<CandidateClassifier>,
    pub id_classes: Vec<usize>,
    pub history: Vec<PretrainEpoch>,
}

fn local_labels(labeled: &[ImageSample], id_classes: &[usize]) -> Result<Vec<usize>> {
    labeled
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let class = s.label.ok_or_else(|| Error::Invalid(format!("labeled sample {i} has no label")))?;
            id_classes
                .iter()
                .position(|&c| c == class)
                .ok_or_else(|| Error::Invalid(format!("label {class} of sample {i} is not an ID class")))
        })
        .collect()
}

/// One supervised CE step on prompted inputs; returns (loss sum, correct count,
/// summed gradients).
fn supervised_pass(
    model: &MiniModel<f32>,
    prompt: &VisualPrompt<f32>,
    batch: &[(Image<f32>, usize)],
) -> Result<(f64, usize, Gradients<f32>, Vec<f32>)> {
    let per_sample = map_samples(batch, |(image, label)| {
        let fwd = encode(model, image, prompt)?;
        let logits = to_f64(&fwd.logits);
        let loss = cross_entropy(&logits, *label)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy".into()));
        }
        let correct = argmax(&logits) == *label;
        let g = to_f32(&cross_entropy_grad(&logits, *label)?);
        let grads = model.backward(fwd.tape, None, Some(&g))?;
        let g_prompt = prompt_grad(prompt, &grads.input)?;
        Ok((loss, correct, grads, g_prompt))
    })?;
    let mut loss = 0.0;
    let mut correct = 0;
    let mut total: Option<Gradients<f32>> = None;
    let mut g_prompt = vec![0.0f32; prompt.len()];
    for (l, c, g, gp) in per_sample {
        loss += l;
        correct += usize::from(c);
        add_scaled(&mut g_prompt, &gp, 1.0);
        match &mut total {
            Some(t) => t.accumulate(&g),
            None => total = Some(g),
        }
    }
    let total = total.ok_or_else(|| Error::Invalid("empty batch".into()))?;
    Ok((loss, correct, total, g_prompt))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Prompted, unaugmented features of `samples` as f64.
pub fn features(
    model: &MiniModel<f32>,
    prompt: &VisualPrompt<f32>,
    samples: &[ImageSample],
) -> Result<Vec<Vec<f64>>> {
    let frame = prompt.geometry();
    map_samples(samples, |s| {
        let image = to_frame(&s.pixels, frame)?;
        Ok(to_f64(&encode(model, &image, prompt)?.feature))
    })
}

/// Trains encoder, classifier and ID prompt with CE on weakly augmented,
/// prompted inputs, then builds the joint space and freezes the backbone.
pub fn pretrain(labeled: &[ImageSample], id_classes: &[usize], cfg: &TrainConfig) -> Result<PretrainedState> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Invalid("pre-training needs labeled samples".into()));
    }
    if id_classes.is_empty() {
        return Err(Error::Invalid("pre-training needs at least one ID class".into()));
    }
    let labels = local_labels(labeled, id_classes)?;
    let channels = labeled[0].pixels.geometry().channels;
    let frame = frame_geometry(cfg, channels);
    let images: Vec<Image<f32>> = labeled.iter().map(|s| to_frame(&s.pixels, frame)).collect::<Result<_>>()?;

    let arch = Architecture::new(frame, cfg.feature_dim, id_classes.len());
    let mut model = MiniModel::<f32>::init(arch, &mut rng_for(cfg.seed, streams::MODEL_INIT))?;
    let mut prompt = VisualPrompt::<f32>::zeros(PromptRole::IdSpecific, cfg.p, frame)?;
    let mut sgd_model = Sgd::<f32>::new(cfg.lr, cfg.momentum)?;
    let mut sgd_prompt = Sgd::<f32>::new(cfg.lr, cfg.momentum)?;
    let mut order_rng = rng_for(cfg.seed, streams::PRETRAIN_ORDER);
    let mut aug_rng = rng_for(cfg.seed, streams::PRETRAIN_AUGMENT);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs_pretrain);

    for epoch in 0..cfg.epochs_pretrain {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<(Image<f32>, usize)> = chunk
                .iter()
                .map(|&i| (AugmentDraw::sample(Strength::Weak, frame, &mut aug_rng).apply(&images[i]), labels[i]))
                .collect();
            let (loss, c, mut grads, mut g_prompt) =
                supervised_pass(&model, &prompt, &batch).map_err(divergence("pretrain", epoch, step))?;
            let scale = 1.0 / batch.len() as f32;
            grads.scale(scale);
            g_prompt.iter_mut().for_each(|g| *g *= scale);
            sgd_model.step_model(&mut model, &grads).map_err(divergence("pretrain", epoch, step))?;
            sgd_prompt
                .step(ID_PROMPT, prompt.params_mut(), &g_prompt)
                .map_err(divergence("pretrain", epoch, step))?;
            loss_sum += loss;
            correct += c;
        }
        let n = labeled.len() as f64;
        info!("pretrain epoch {epoch}: loss {:.4}, accuracy {:.3}", loss_sum / n, correct as f64 / n);
        history.push(PretrainEpoch { epoch, loss: loss_sum / n, accuracy: correct as f64 / n });
    }

    let raw = features(&model, &prompt, labeled)?;
    let standardizer = FeatureStandardizer::fit(&raw)?;
    let z = standardizer.standardize_all(&raw);
    let cluster = IdCluster::fit(&z)?;
    let candidates = build_candidates(&cluster, &z, cfg.n_candidates)?;
    model.freeze_all();
    Ok(PretrainedState {
        model,
        id_prompt: prompt,
        standardizer,
        cluster,
        candidates,
        id_classes: id_classes.to_vec(),
        history,
    })
}

/// Closed-set accuracy of the pre-trained model on unaugmented labeled data.
pub fn training_accuracy(state: &PretrainedState, labeled: &[ImageSample]) -> Result<f64> {
    let labels = local_labels(labeled, &state.id_classes)?;
    let frame = state.id_prompt.geometry();
    let hits = map_samples(&labeled.iter().zip(&labels).collect::<Vec<_>>(), |(s, &y)| {
        let fwd = encode(&state.model, &to_frame(&s.pixels, frame)?, &state.id_prompt)?;
        Ok(usize::from(argmax(&to_f64(&fwd.logits)) == y))
    })?;
    Ok(hits.iter().sum::<usize>() as f64 / labeled.len() as f64)
}

/// One row of `losses.csv`; `l_cl` is the signed, weighted contribution so
/// that `total = l_s + l_c + l_cl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub l_s: f64,
    pub l_c: f64,
    pub l_cl: f64,
    pub total: f64,
    pub n_confident: usize,
    pub n_detected_id: usize,
    pub n_detected_ood: usize,
    /// Mean L_C of the OOD-prompt updates at the end of the epoch.
    pub ood_prompt_loss: Option<f64>,
    pub lr: f64,
}

/// How test-time OOD scores are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreKind {
    /// `d(f, k_ic) / d(f, k_oc)`.
    Apollonius,
    /// `d(f, k_ic) / r` when no OOD center could be initialized.
    ClusterDistance,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetunedState {
    pub branches: TeacherStudent<f32>,
    pub standardizer: FeatureStandardizer,
    pub cluster: IdCluster,
    pub candidates: Vec<CandidateClassifier>,
    pub selection: Option<CandidateSelection>,
    pub apollonius: Option<ApolloniusClassifier>,
    pub id_classes: Vec<usize>,
    pub losses: Vec<LossRow>,
    pub epochs: Vec<EpochReport>,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Softmax over the ID classes, in `id_classes` order.
    pub probabilities: Vec<f64>,
    pub ood_score: f64,
}

impl Prediction {
    pub fn class(&self) -> usize {
        argmax(&self.probabilities)
    }
}

impl FinetunedState {
    pub fn score_kind(&self) -> ScoreKind {
        if self.apollonius.is_some() {
            ScoreKind::Apollonius
        } else {
            ScoreKind::ClusterDistance
        }
    }

    /// Parameters updated during fine-tuning: both student prompts.
    pub fn num_trainable(&self) -> usize {
        let s = &self.branches.student;
        s.model.num_trainable() + s.id_prompt.len() + s.ood_prompt.len()
    }

    pub fn joint_space(&self) -> JointSpaceState {
        JointSpaceState {
            standardizer: self.standardizer.clone(),
            cluster: self.cluster.clone(),
            candidates: self.candidates.clone(),
            selection: self.selection.clone(),
            apollonius: self.apollonius.clone(),
        }
    }

    fn score(&self, z: &[f64]) -> f64 {
        match &self.apollonius {
            Some(a) => a.ood_score(z),
            None => crate::losses::distance(z, &self.cluster.center) / self.cluster.radius,
        }
    }

    /// Teacher branch with the ID prompt: class probabilities and OOD score.
    pub fn predict(&self, image: &Image<f32>) -> Result<Prediction> {
        let t = &self.branches.teacher;
        let frame = t.id_prompt.geometry();
        let fwd = encode(&t.model, &to_frame(image, frame)?, &t.id_prompt)?;
        let z = self.standardizer.standardize(&to_f64(&fwd.feature));
        Ok(Prediction {
            probabilities: softmax(&fwd.logits),
            ood_score: self.score(&z),
        })
    }

    pub fn predict_all(&self, samples: &[ImageSample]) -> Result<Vec<Prediction>> {
        map_samples(samples, |s| self.predict(&s.pixels))
    }
}

struct StudentOut {
    z_t: Vec<f64>,
    logits_t: Vec<f64>,
    f_s: Vec<f64>,
    logits_s: Vec<f64>,
    tape: crate::nnet::Tape<f32>,
}

/// Prompt-only fine-tuning on unlabeled data.
///
/// `labeled` is only read when `cfg.replay_labeled` is set. `on_epoch` sees
/// each epoch's report together with a snapshot of the state so far.
pub fn finetune(
    state: &PretrainedState,
    unlabeled: &[ImageSample],
    labeled: Option<&[ImageSample]>,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochReport, &FinetunedState),
) -> Result<FinetunedState> {
    cfg.validate()?;
    if unlabeled.is_empty() {
        return Err(Error::Invalid("fine-tuning needs unlabeled samples".into()));
    }
    let frame = state.id_prompt.geometry();
    if state.id_prompt.width() != cfg.p || frame.height != cfg.frame {
        return Err(Error::Config(format!(
            "config prompt (p = {}, frame {}) does not match the pre-trained prompt (p = {}, frame {})",
            cfg.p,
            cfg.frame,
            state.id_prompt.width(),
            frame.height
        )));
    }
    let replay = match (cfg.replay_labeled, labeled) {
        (false, _) => None,
        (true, Some(l)) if !l.is_empty() => {
            let labels = local_labels(l, &state.id_classes)?;
            let images: Vec<Image<f32>> = l.iter().map(|s| to_frame(&s.pixels, frame)).collect::<Result<_>>()?;
            Some((images, labels))
        }
        (true, _) => return Err(Error::Config("replay_labeled needs labeled samples".into())),
    };
    let images: Vec<Image<f32>> = unlabeled.iter().map(|s| to_frame(&s.pixels, frame)).collect::<Result<_>>()?;

    let mut model = state.model.clone();
    model.freeze_all();
    let ood_prompt =
        VisualPrompt::<f32>::init(PromptRole::OodSpecific, cfg.p, frame, &mut rng_for(cfg.seed, streams::OOD_PROMPT_INIT))?;
    let student = Branch { model, id_prompt: state.id_prompt.clone(), ood_prompt };
    let mut out = FinetunedState {
        branches: TeacherStudent::new(student, cfg.ema_decay)?,
        standardizer: state.standardizer.clone(),
        cluster: state.cluster.clone(),
        candidates: state.candidates.clone(),
        selection: None,
        apollonius: None,
        id_classes: state.id_classes.clone(),
        losses: Vec::new(),
        epochs: Vec::new(),
        events: Vec::new(),
    };

    // Candidate selection, once, on teacher features of the raw unlabeled set.
    let t = &out.branches.teacher;
    let z0 = out.standardizer.standardize_all(&features(&t.model, &t.id_prompt, unlabeled)?);
    let selection = select_candidate(&out.candidates, &z0)?;
    out.events.push(format!(
        "candidate selection: chose D_{} with OOD rates {:?}",
        out.candidates[selection.chosen].index, selection.rates
    ));
    match init_ood_center(&out.candidates[selection.chosen], &out.cluster, &z0, cfg.lambda) {
        Ok(a) => {
            out.events.push(format!("OOD center initialized from {} detections", a.ood_count));
            out.apollonius = Some(a);
        }
        Err(Error::NoOodEvidence { tau }) => {
            let msg = format!(
                "no OOD samples detected even at τ = {tau}; contrastive term disabled, scores fall back to cluster distance"
            );
            warn!("{msg}");
            out.events.push(msg);
        }
        Err(e) => return Err(e),
    }
    out.selection = Some(selection);

    let weights = LossWeights {
        contrastive: if out.apollonius.is_some() { cfg.weights().contrastive } else { 0.0 },
        ..cfg.weights()
    };
    let mut sgd = Sgd::<f32>::new(cfg.lr, cfg.momentum)?;
    let mut order_rng = rng_for(cfg.seed, streams::FINETUNE_ORDER);
    let mut aug_rng = rng_for(cfg.seed, streams::FINETUNE_AUGMENT);
    let mut replay_rng = rng_for(cfg.seed, streams::REPLAY_ORDER);
    let mut replay_order: Vec<usize> = replay.as_ref().map(|(i, _)| (0..i.len()).collect()).unwrap_or_default();
    let mut replay_at = replay_order.len();
    let mut order: Vec<usize> = (0..unlabeled.len()).collect();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs_finetune {
        if cfg.lr_decay_epoch == Some(epoch) {
            sgd.set_lr(cfg.lr * cfg.lr_decay_factor);
            out.events.push(format!("epoch {epoch}: learning rate decayed to {}", sgd.lr()));
        }
        order.shuffle(&mut order_rng);
        let mut ood_queue: Vec<usize> = Vec::new();
        let mut sums = LossBreakdown::default();
        let (mut n_id, mut n_ood, mut n_steps) = (0usize, 0usize, 0usize);

        for chunk in order.chunks(cfg.batch_size) {
            let ctx = divergence("finetune", epoch, step);
            let pairs: Vec<(Image<f32>, Image<f32>)> = chunk
                .iter()
                .map(|&i| {
                    let weak = AugmentDraw::sample(Strength::Weak, frame, &mut aug_rng).apply(&images[i]);
                    let strong = AugmentDraw::sample(Strength::Strong, frame, &mut aug_rng).apply(&images[i]);
                    (weak, strong)
                })
                .collect();
            let (teacher, student) = (&out.branches.teacher, &out.branches.student);
            let standardizer = &out.standardizer;
            let outs = map_samples(&pairs, |(weak, strong)| {
                let ft = encode(&teacher.model, weak, &teacher.id_prompt)?;
                let fs = encode(&student.model, strong, &student.id_prompt)?;
                Ok(StudentOut {
                    z_t: standardizer.standardize(&to_f64(&ft.feature)),
                    logits_t: to_f64(&ft.logits),
                    f_s: to_f64(&fs.feature),
                    logits_s: to_f64(&fs.logits),
                    tape: fs.tape,
                })
            })
            .map_err(&ctx)?;

            let decisions: Vec<Decision> = outs
                .iter()
                .map(|o| out.apollonius.as_ref().map_or(Decision::Id, |a| a.classify(&o.z_t)))
                .collect();
            let id_idx: Vec<usize> = (0..outs.len()).filter(|&k| decisions[k] == Decision::Id).collect();
            for (k, &i) in chunk.iter().enumerate() {
                if decisions[k] == Decision::Ood {
                    ood_queue.push(i);
                }
            }
            n_id += id_idx.len();
            n_ood += outs.len() - id_idx.len();

            // L_S and L_C over the samples judged ID.
            let weak: Vec<Vec<f64>> = id_idx.iter().map(|&k| outs[k].logits_t.clone()).collect();
            let strong: Vec<Vec<f64>> = id_idx.iter().map(|&k| outs[k].logits_s.clone()).collect();
            let pl = pseudo_label_loss(&weak, &strong, cfg.eta)?;
            let (k_ic, k_oc) = match &out.apollonius {
                Some(a) => (a.id_center.clone(), a.ood_center.clone()),
                None => (out.cluster.center.clone(), out.cluster.center.clone()),
            };
            let mut l_c = 0.0;
            let mut seeds: Vec<Option<(Vec<f32>, Vec<f32>)>> = (0..outs.len()).map(|_| None).collect();
            let inv_id = if id_idx.is_empty() { 0.0 } else { 1.0 / id_idx.len() as f64 };
            for (j, &k) in id_idx.iter().enumerate() {
                let o = &outs[k];
                let z_s = out.standardizer.standardize(&o.f_s);
                l_c += consistency_loss(&z_s, &o.z_t, &k_ic, &k_oc, cfg.consistency_mode) * inv_id;
                let g_z = consistency_grad(&z_s, &o.z_t, &k_ic, &k_oc, cfg.consistency_mode);
                let g_f: Vec<f32> =
                    out.standardizer.backprop(&g_z).iter().map(|g| (g * inv_id * weights.consistency) as f32).collect();
                let g_l: Vec<f32> = pl.grad_strong[j].iter().map(|g| (g * weights.supervised) as f32).collect();
                seeds[k] = Some((g_f, g_l));
            }
            let (mut new_id, mut new_ood) = (Vec::new(), Vec::new());
            let mut work = Vec::with_capacity(outs.len());
            for ((o, seed), d) in outs.into_iter().zip(seeds).zip(&decisions) {
                match d {
                    Decision::Id => new_id.push(o.z_t),
                    Decision::Ood => new_ood.push(o.z_t),
                }
                work.push((o.tape, seed));
            }
            let student = &out.branches.student;
            let prompt_grads = map_owned(work, |(tape, seed)| match seed {
                Some((g_f, g_l)) => {
                    let g = student.model.backward(tape, Some(&g_f), Some(&g_l))?;
                    prompt_grad(&student.id_prompt, &g.input).map(Some)
                }
                None => Ok(None),
            })
            .map_err(&ctx)?;
            let mut g_v = vec![0.0f32; student.id_prompt.len()];
            for g in prompt_grads.iter().flatten() {
                add_scaled(&mut g_v, g, 1.0);
            }

            let mut l_s = pl.loss;
            if let Some((r_images, r_labels)) = &replay {
                let mut batch = Vec::with_capacity(cfg.batch_size);
                while batch.len() < cfg.batch_size.min(r_images.len()) {
                    if replay_at == replay_order.len() {
                        replay_order.shuffle(&mut replay_rng);
                        replay_at = 0;
                    }
                    let i = replay_order[replay_at];
                    replay_at += 1;
                    batch.push((AugmentDraw::sample(Strength::Weak, frame, &mut aug_rng).apply(&r_images[i]), r_labels[i]));
                }
                let (loss, _, _, gp) = supervised_pass(&student.model, &student.id_prompt, &batch).map_err(&ctx)?;
                let scale = 1.0 / batch.len() as f32;
                l_s += loss * scale as f64;
                add_scaled(&mut g_v, &gp, scale * weights.supervised as f32);
            }

            let mut l_cl = 0.0;
            if weights.contrastive != 0.0 {
                let v = to_f64(student.id_prompt.params());
                let v_bar = to_f64(student.ood_prompt.params());
                if let (Ok(loss), Ok((gv, _))) = (contrastive_prompt_loss(&v, &v_bar), contrastive_prompt_grad(&v, &v_bar)) {
                    l_cl = loss;
                    add_scaled(&mut g_v, &to_f32(&gv), weights.contrastive as f32);
                }
            }

            let breakdown = crate::losses::total_unlabeled_loss(l_s, l_c, l_cl, pl.n_confident, weights).map_err(&ctx)?;
            let student = &mut out.branches.student;
            sgd.step(ID_PROMPT, student.id_prompt.params_mut(), &g_v).map_err(&ctx)?;
            out.branches.ema_update()?;

            if let Some(a) = &mut out.apollonius {
                a.update_centers(&new_id, &new_ood);
            }
            out.losses.push(LossRow { step, epoch, loss: breakdown });
            sums.l_s += breakdown.l_s;
            sums.l_c += breakdown.l_c;
            sums.l_cl += breakdown.l_cl;
            sums.total += breakdown.total;
            sums.n_confident += breakdown.n_confident;
            n_steps += 1;
            step += 1;
        }

        let ood_prompt_loss = match &out.apollonius {
            Some(a) if !ood_queue.is_empty() => {
                ood_queue.sort_unstable();
                Some(train_ood_prompt(&mut out.branches, &mut sgd, &images, &ood_queue, a, &out.standardizer, weights, cfg, &mut aug_rng)
                    .map_err(divergence("finetune", epoch, step))?)
            }
            _ => None,
        };

        let n = n_steps.max(1) as f64;
        let report = EpochReport {
            epoch,
            l_s: sums.l_s / n,
            l_c: sums.l_c / n,
            l_cl: sums.l_cl / n,
            total: sums.total / n,
            n_confident: sums.n_confident,
            n_detected_id: n_id,
            n_detected_ood: n_ood,
            ood_prompt_loss,
            lr: sgd.lr(),
        };
        info!(
            "finetune epoch {epoch}: L_S {:.4} L_C {:.4} L_CL {:.4}, {n_id} ID / {n_ood} OOD",
            report.l_s, report.l_c, report.l_cl
        );
        out.epochs.push(report.clone());
        on_epoch(&report, &out);
    }
    Ok(out)
}

/// Re-feeds the queued OOD samples through the OOD prompt and pulls their
/// features onto `k_oc` with the absolute consistency loss (teacher target
/// replaced by the OOD center), plus the contrastive coupling with the ID
/// prompt. Returns the mean consistency loss.
#[allow(clippy::too_many_arguments)]
fn train_ood_prompt(
    branches: &mut TeacherStudent<f32>,
    sgd: &mut Sgd<f32>,
    images: &[Image<f32>],
    queue: &[usize],
    apollonius: &ApolloniusClassifier,
    standardizer: &FeatureStandardizer,
    weights: LossWeights,
    cfg: &TrainConfig,
    aug_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (k_ic, k_oc) = (&apollonius.id_center, &apollonius.ood_center);
    let frame = branches.student.ood_prompt.geometry();
    let mut loss_sum = 0.0;
    for chunk in queue.chunks(cfg.batch_size) {
        let batch: Vec<Image<f32>> = chunk
            .iter()
            .map(|&i| AugmentDraw::sample(Strength::Weak, frame, aug_rng).apply(&images[i]))
            .collect();
        let student = &branches.student;
        let inv = 1.0 / batch.len() as f64;
        let per_sample = map_samples(&batch, |image| {
            let fwd = encode(&student.model, image, &student.ood_prompt)?;
            let z = standardizer.standardize(&to_f64(&fwd.feature));
            let loss = consistency_loss(&z, k_oc, k_ic, k_oc, ConsistencyMode::Absolute);
            let g_z = consistency_grad(&z, k_oc, k_ic, k_oc, ConsistencyMode::Absolute);
            let g_f: Vec<f32> = standardizer.backprop(&g_z).iter().map(|g| (g * inv) as f32).collect();
            let g = student.model.backward(fwd.tape, Some(&g_f), None)?;
            Ok((loss, prompt_grad(&student.ood_prompt, &g.input)?))
        })?;
        let mut g_bar = vec![0.0f32; student.ood_prompt.len()];
        for (loss, g) in &per_sample {
            loss_sum += loss;
            add_scaled(&mut g_bar, g, 1.0);
        }
        if weights.contrastive != 0.0 {
            let v = to_f64(student.id_prompt.params());
            let v_bar = to_f64(student.ood_prompt.params());
            if let Ok((_, gw)) = contrastive_prompt_grad(&v, &v_bar) {
                add_scaled(&mut g_bar, &to_f32(&gw), weights.contrastive as f32);
            }
        }
        sgd.step(OOD_PROMPT, branches.student.ood_prompt.params_mut(), &g_bar)?;
        branches.ema_update()?;
    }
    Ok(loss_sum / queue.len() as f64)
}

/// SHA-256 over every backbone tensor, in storage order.
pub fn backbone_checksum(model: &MiniModel<f32>) -> String {
    let bytes: Vec<u8> = model
        .tensors()
        .iter()
        .flat_map(|t| t.data.iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    sha256_hex(&bytes)
}

/// Trainable parameters during fine-tuning for a config: the two prompts.
pub fn finetune_trainable_count(cfg: &TrainConfig, channels: usize) -> Result<usize> {
    Ok(2 * param_count(cfg.p, frame_geometry(cfg, channels))?)
}

pub const PRETRAINED_KIND: &str = "pretrained";
pub const FINETUNED_KIND: &str = "finetuned";

impl PretrainedState {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ckpt = Checkpoint::new(PRETRAINED_KIND);
        push_model(&mut ckpt, "model", &self.model)?;
        push_prompt(&mut ckpt, ID_PROMPT, &self.id_prompt)?;
        ckpt.set_meta("standardizer", &self.standardizer)?;
        ckpt.set_meta("cluster", &self.cluster)?;
        ckpt.set_meta("candidates", &self.candidates)?;
        ckpt.set_meta("id_classes", &self.id_classes)?;
        ckpt.set_meta("history", &self.history)?;
        ckpt.write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ckpt = Checkpoint::read(path, PRETRAINED_KIND)?;
        let artifact = |e: Error| Error::Artifact { path: path.to_path_buf(), reason: e.to_string() };
        (|| {
            Ok(Self {
                model: take_model(&ckpt, "model")?,
                id_prompt: take_prompt(&ckpt, ID_PROMPT)?,
                standardizer: ckpt.meta("standardizer")?,
                cluster: ckpt.meta("cluster")?,
                candidates: ckpt.meta("candidates")?,
                id_classes: ckpt.meta("id_classes")?,
                history: ckpt.meta("history")?,
            })
        })()
        .map_err(artifact)
    }
}

impl FinetunedState {
    /// Teacher and student share the frozen backbone, so it is stored once.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let (t, s) = (&self.branches.teacher, &self.branches.student);
        if t.model != s.model {
            return Err(Error::Invalid("teacher and student backbones diverged".into()));
        }
        let mut ckpt = Checkpoint::new(FINETUNED_KIND);
        push_model(&mut ckpt, "model", &s.model)?;
        push_prompt(&mut ckpt, "student.id_prompt", &s.id_prompt)?;
        push_prompt(&mut ckpt, "student.ood_prompt", &s.ood_prompt)?;
        push_prompt(&mut ckpt, "teacher.id_prompt", &t.id_prompt)?;
        push_prompt(&mut ckpt, "teacher.ood_prompt", &t.ood_prompt)?;
        ckpt.set_meta("ema_decay", &self.branches.ema_decay)?;
        ckpt.set_meta("joint_space", &self.joint_space())?;
        ckpt.set_meta("id_classes", &self.id_classes)?;
        ckpt.set_meta("epochs", &self.epochs)?;
        ckpt.set_meta("events", &self.events)?;
        ckpt.write(path)
    }

    /// Loss rows are not part of the checkpoint; they live in `losses.csv`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let ckpt = Checkpoint::read(path, FINETUNED_KIND)?;
        let artifact = |e: Error| Error::Artifact { path: path.to_path_buf(), reason: e.to_string() };
        (|| {
            let model = take_model(&ckpt, "model")?;
            let branch = |who: &str| -> Result<Branch<f32>> {
                Ok(Branch {
                    model: model.clone(),
                    id_prompt: take_prompt(&ckpt, &format!("{who}.id_prompt"))?,
                    ood_prompt: take_prompt(&ckpt, &format!("{who}.ood_prompt"))?,
                })
            };
            let js: JointSpaceState = ckpt.meta("joint_space")?;
            Ok(Self {
                branches: TeacherStudent { student: branch("student")?, teacher: branch("teacher")?, ema_decay: ckpt.meta("ema_decay")? },
                standardizer: js.standardizer,
                cluster: js.cluster,
                candidates: js.candidates,
                selection: js.selection,
                apollonius: js.apollonius,
                id_classes: ckpt.meta("id_classes")?,
                losses: Vec::new(),
                epochs: ckpt.meta("epochs")?,
                events: ckpt.meta("events")?,
            })
        })()
        .map_err(artifact)
    }
}
