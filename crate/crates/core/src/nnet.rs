//! Small convolutional encoder E(·) and linear closed-set classifier C(·).
//!
//! Layout: conv3x3/2 → ReLU → conv3x3/2 → ReLU → global average pool →
//! linear (feature, D-dim) → linear (logits). Reverse mode is written out by
//! hand for this fixed architecture; every forward pass returns a [`Tape`]
//! that [`MiniModel::backward`] consumes.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::prompt::VisualPrompt;
use crate::{Error, Geometry, Image, Real, Result};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

pub const CONV1_W: usize = 0;
pub const CONV1_B: usize = 1;
pub const CONV2_W: usize = 2;
pub const CONV2_B: usize = 3;
pub const FC_W: usize = 4;
pub const FC_B: usize = 5;
pub const CLS_W: usize = 6;
pub const CLS_B: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub input: Geometry,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(input: Geometry, feature_dim: usize, num_classes: usize) -> Self {
        Self {
            input,
            conv1_channels: 8,
            conv2_channels: 16,
            feature_dim,
            num_classes,
        }
    }

    fn conv1_out(&self) -> Geometry {
        Geometry::new(
            self.conv1_channels,
            conv_out(self.input.height),
            conv_out(self.input.width),
        )
    }

    fn conv2_out(&self) -> Geometry {
        let g = self.conv1_out();
        Geometry::new(self.conv2_channels, conv_out(g.height), conv_out(g.width))
    }

    fn validate(&self) -> Result<()> {
        if self.input.is_empty()
            || self.conv1_channels == 0
            || self.conv2_channels == 0
            || self.feature_dim == 0
            || self.num_classes == 0
        {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    /// (name, group, shape) for every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(&'static str, ParamGroup, Vec<usize>)> {
        let (c, c1, c2, d, k) = (
            self.input.channels,
            self.conv1_channels,
            self.conv2_channels,
            self.feature_dim,
            self.num_classes,
        );
        use ParamGroup::*;
        vec![
            ("conv1.weight", Encoder, vec![c1, c, KERNEL, KERNEL]),
            ("conv1.bias", Encoder, vec![c1]),
            ("conv2.weight", Encoder, vec![c2, c1, KERNEL, KERNEL]),
            ("conv2.bias", Encoder, vec![c2]),
            ("fc.weight", Encoder, vec![d, c2]),
            ("fc.bias", Encoder, vec![d]),
            ("classifier.weight", Classifier, vec![k, d]),
            ("classifier.bias", Classifier, vec![k]),
        ]
    }
}

fn conv_out(n: usize) -> usize {
    (n + 2 * PAD - KERNEL) / STRIDE + 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub name: &'static str,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Encoder + classifier parameters and per-group frozen flags.
#[derive(Debug, Clone)]
pub struct MiniModel<T = f32> {
    arch: Architecture,
    tensors: Vec<ParamTensor<T>>,
    frozen: BTreeMap<ParamGroup, bool>,
    generation: u64,
}

impl<T: Real> PartialEq for MiniModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.tensors == other.tensors && self.frozen == other.frozen
    }
}

/// Intermediates of one forward pass, consumed by [`MiniModel::backward`].
#[derive(Debug)]
pub struct Tape<T> {
    generation: u64,
    input: Vec<T>,
    z1: Vec<T>,
    a1: Vec<T>,
    z2: Vec<T>,
    pooled: Vec<T>,
    feature: Vec<T>,
}

#[derive(Debug)]
pub struct Forward<T> {
    pub feature: Vec<T>,
    pub logits: Vec<T>,
    pub tape: Tape<T>,
}

/// Parameter gradients (`None` for frozen tensors) and the input-image gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub params: Vec<Option<Vec<T>>>,
    pub input: Vec<T>,
}

impl<T: Real> Gradients<T> {
    /// Elementwise sum; both sides must come from the same model.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            match (a, b) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += *y),
                (a @ None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
        self.input.iter_mut().zip(&other.input).for_each(|(x, y)| *x += *y);
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.params.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
        self.input.iter_mut().for_each(|v| *v *= factor);
    }
}

impl<T: Real> MiniModel<T> {
    /// He-normal convolution and feature weights, scaled-normal classifier, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, group, shape)| {
                let len: usize = shape.iter().product();
                let data = if shape.len() == 1 {
                    vec![T::zero(); len]
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let gain = if group == ParamGroup::Classifier { 1.0 } else { 2.0 };
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
                    (0..len).map(|_| T::of(normal.sample(rng))).collect()
                };
                ParamTensor {
                    name,
                    group,
                    shape,
                    data,
                }
            })
            .collect();
        Ok(Self::assemble(arch, tensors))
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, group, shape)| ParamTensor {
                name,
                group,
                data: vec![T::zero(); shape.iter().product()],
                shape,
            })
            .collect();
        Ok(Self::assemble(arch, tensors))
    }

    /// Rebuilds a model from raw per-tensor buffers in [`Architecture::layout`] order.
    pub fn from_buffers(arch: Architecture, buffers: Vec<Vec<T>>) -> Result<Self> {
        let mut model = Self::zeros(arch)?;
        if buffers.len() != model.tensors.len() {
            return Err(Error::shape(
                format!("{} parameter tensors", model.tensors.len()),
                buffers.len(),
            ));
        }
        for (tensor, data) in model.tensors.iter_mut().zip(buffers) {
            if tensor.data.len() != data.len() {
                return Err(Error::shape(
                    format!("{} values for {}", tensor.data.len(), tensor.name),
                    data.len(),
                ));
            }
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(tensor.name.into()));
            }
            tensor.data = data;
        }
        Ok(model)
    }

    fn assemble(arch: Architecture, tensors: Vec<ParamTensor<T>>) -> Self {
        Self {
            arch,
            tensors,
            frozen: [(ParamGroup::Encoder, false), (ParamGroup::Classifier, false)].into(),
            generation: 0,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[ParamTensor<T>] {
        &self.tensors
    }

    /// Mutable access to the parameters; invalidates outstanding tapes.
    pub fn tensors_mut(&mut self) -> &mut [ParamTensor<T>] {
        self.generation += 1;
        &mut self.tensors
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen[&group]
    }

    pub fn set_frozen(&mut self, group: ParamGroup, frozen: bool) {
        self.frozen.insert(group, frozen);
    }

    pub fn freeze_all(&mut self) {
        self.set_frozen(ParamGroup::Encoder, true);
        self.set_frozen(ParamGroup::Classifier, true);
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| !self.is_frozen(t.group))
            .map(|t| t.data.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> MiniModel<U> {
        MiniModel {
            arch: self.arch,
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name,
                    group: t.group,
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::of(v.as_f64())).collect(),
                })
                .collect(),
            frozen: self.frozen.clone(),
            generation: 0,
        }
    }

    fn t(&self, idx: usize) -> &[T] {
        &self.tensors[idx].data
    }

    pub fn forward(&self, image: &Image<T>) -> Result<Forward<T>> {
        if image.geometry() != self.arch.input {
            return Err(Error::shape(self.arch.input, image.geometry()));
        }
        let input = image.data().to_vec();
        let g1 = self.arch.conv1_out();
        let z1 = conv_forward(&input, self.arch.input, self.t(CONV1_W), self.t(CONV1_B), g1);
        check_finite(&z1, "conv1")?;
        let a1: Vec<T> = z1.iter().map(|&v| v.max(T::zero())).collect();
        let g2 = self.arch.conv2_out();
        let z2 = conv_forward(&a1, g1, self.t(CONV2_W), self.t(CONV2_B), g2);
        check_finite(&z2, "conv2")?;
        let area = T::of((g2.height * g2.width) as f64);
        let pooled: Vec<T> = z2
            .chunks(g2.height * g2.width)
            .map(|ch| ch.iter().map(|&v| v.max(T::zero())).sum::<T>() / area)
            .collect();
        let feature = linear(self.t(FC_W), self.t(FC_B), &pooled);
        check_finite(&feature, "fc")?;
        let logits = linear(self.t(CLS_W), self.t(CLS_B), &feature);
        check_finite(&logits, "classifier")?;
        Ok(Forward {
            feature: feature.clone(),
            logits,
            tape: Tape {
                generation: self.generation,
                input,
                z1,
                a1,
                z2,
                pooled,
                feature,
            },
        })
    }

    /// Forward with a prompt added to the image first.
    pub fn forward_prompted(&self, image: &Image<T>, prompt: &VisualPrompt<T>) -> Result<Forward<T>> {
        self.forward(&prompt.apply(image)?)
    }

    /// Reverse pass for a scalar loss whose gradient w.r.t. the feature and
    /// logits of this tape's forward pass is given. Either may be omitted.
    pub fn backward(
        &self,
        tape: Tape<T>,
        grad_feature: Option<&[T]>,
        grad_logits: Option<&[T]>,
    ) -> Result<Gradients<T>> {
        if tape.generation != self.generation {
            return Err(Error::StaleTape {
                tape: tape.generation,
                model: self.generation,
            });
        }
        let d = self.arch.feature_dim;
        let k = self.arch.num_classes;
        let enc = !self.is_frozen(ParamGroup::Encoder);
        let cls = !self.is_frozen(ParamGroup::Classifier);
        let mut params: Vec<Option<Vec<T>>> = vec![None; self.tensors.len()];

        let mut d_feature = match grad_feature {
            Some(g) if g.len() != d => return Err(Error::shape(d, g.len())),
            Some(g) => g.to_vec(),
            None => vec![T::zero(); d],
        };
        if let Some(gl) = grad_logits {
            if gl.len() != k {
                return Err(Error::shape(k, gl.len()));
            }
            let w = self.t(CLS_W);
            for (i, &g) in gl.iter().enumerate() {
                for (j, df) in d_feature.iter_mut().enumerate() {
                    *df += w[i * d + j] * g;
                }
            }
            if cls {
                let mut dw = vec![T::zero(); k * d];
                for (i, &g) in gl.iter().enumerate() {
                    for (j, &f) in tape.feature.iter().enumerate() {
                        dw[i * d + j] = g * f;
                    }
                }
                params[CLS_W] = Some(dw);
                params[CLS_B] = Some(gl.to_vec());
            }
        } else if cls {
            params[CLS_W] = Some(vec![T::zero(); k * d]);
            params[CLS_B] = Some(vec![T::zero(); k]);
        }

        let c2 = self.arch.conv2_channels;
        let fc_w = self.t(FC_W);
        let mut d_pooled = vec![T::zero(); c2];
        for (i, &g) in d_feature.iter().enumerate() {
            for (j, dp) in d_pooled.iter_mut().enumerate() {
                *dp += fc_w[i * c2 + j] * g;
            }
        }
        if enc {
            let mut dw = vec![T::zero(); d * c2];
            for (i, &g) in d_feature.iter().enumerate() {
                for (j, &p) in tape.pooled.iter().enumerate() {
                    dw[i * c2 + j] = g * p;
                }
            }
            params[FC_W] = Some(dw);
            params[FC_B] = Some(d_feature.clone());
        }

        let g1 = self.arch.conv1_out();
        let g2 = self.arch.conv2_out();
        let area = g2.height * g2.width;
        let inv_area = T::one() / T::of(area as f64);
        let dz2: Vec<T> = tape
            .z2
            .iter()
            .enumerate()
            .map(|(i, &z)| if z > T::zero() { d_pooled[i / area] * inv_area } else { T::zero() })
            .collect();
        let (da1, dw2, db2) = conv_backward(&dz2, &tape.a1, g1, self.t(CONV2_W), g2, enc);
        let dz1: Vec<T> = da1
            .iter()
            .zip(&tape.z1)
            .map(|(&g, &z)| if z > T::zero() { g } else { T::zero() })
            .collect();
        let (dx, dw1, db1) = conv_backward(&dz1, &tape.input, self.arch.input, self.t(CONV1_W), g1, enc);
        if enc {
            params[CONV2_W] = dw2;
            params[CONV2_B] = db2;
            params[CONV1_W] = dw1;
            params[CONV1_B] = db1;
        }
        Ok(Gradients { params, input: dx })
    }
}

fn check_finite<T: Real>(values: &[T], layer: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{layer} activations")))
    }
}

fn linear<T: Real>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(i, &bias)| {
            let row = &w[i * n_in..(i + 1) * n_in];
            bias + row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>()
        })
        .collect()
}

/// Input pixel index for output position `o` and kernel tap `k`, if inside the image.
#[inline]
fn tap(o: usize, k: usize, n: usize) -> Option<usize> {
    (o * STRIDE + k).checked_sub(PAD).filter(|&i| i < n)
}

fn conv_forward<T: Real>(x: &[T], gin: Geometry, w: &[T], b: &[T], gout: Geometry) -> Vec<T> {
    let mut out = Vec::with_capacity(gout.len());
    let ksz = KERNEL * KERNEL;
    for oc in 0..gout.channels {
        let w_oc = &w[oc * gin.channels * ksz..(oc + 1) * gin.channels * ksz];
        for oy in 0..gout.height {
            for ox in 0..gout.width {
                let mut acc = b[oc];
                for ky in 0..KERNEL {
                    let Some(iy) = tap(oy, ky, gin.height) else { continue };
                    for kx in 0..KERNEL {
                        let Some(ix) = tap(ox, kx, gin.width) else { continue };
                        for ic in 0..gin.channels {
                            acc += w_oc[ic * ksz + ky * KERNEL + kx] * x[gin.offset(ic, iy, ix)];
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

type ConvGrads<T> = (Vec<T>, Option<Vec<T>>, Option<Vec<T>>);

fn conv_backward<T: Real>(
    dout: &[T],
    x: &[T],
    gin: Geometry,
    w: &[T],
    gout: Geometry,
    want_params: bool,
) -> ConvGrads<T> {
    let ksz = KERNEL * KERNEL;
    let mut dx = vec![T::zero(); gin.len()];
    let mut dw = want_params.then(|| vec![T::zero(); w.len()]);
    let mut db = want_params.then(|| vec![T::zero(); gout.channels]);
    for oc in 0..gout.channels {
        let base = oc * gin.channels * ksz;
        for oy in 0..gout.height {
            for ox in 0..gout.width {
                let g = dout[gout.offset(oc, oy, ox)];
                if g == T::zero() {
                    continue;
                }
                if let Some(db) = db.as_mut() {
                    db[oc] += g;
                }
                for ky in 0..KERNEL {
                    let Some(iy) = tap(oy, ky, gin.height) else { continue };
                    for kx in 0..KERNEL {
                        let Some(ix) = tap(ox, kx, gin.width) else { continue };
                        for ic in 0..gin.channels {
                            let wi = base + ic * ksz + ky * KERNEL + kx;
                            let xi = gin.offset(ic, iy, ix);
                            dx[xi] += w[wi] * g;
                            if let Some(dw) = dw.as_mut() {
                                dw[wi] += x[xi] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// SGD with heavy-ball momentum: `v ← μ·v + g; θ ← θ − lr·v`.
///
/// Velocity buffers are keyed by parameter name and created on first use.
#[derive(Debug, Clone)]
pub struct Sgd<T = f32> {
    lr: f64,
    momentum: f64,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn velocity(&self, key: &str) -> Option<&[T]> {
        self.velocity.get(key).map(Vec::as_slice)
    }

    pub fn step(&mut self, key: &str, params: &mut [T], grad: &[T]) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::shape(params.len(), grad.len()));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient for {key}")));
        }
        let v = self
            .velocity
            .entry(key.to_string())
            .or_insert_with(|| vec![T::zero(); params.len()]);
        if v.len() != params.len() {
            return Err(Error::shape(v.len(), params.len()));
        }
        let mu = T::of(self.momentum);
        let lr = T::of(self.lr);
        for ((p, v), &g) in params.iter_mut().zip(v.iter_mut()).zip(grad) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }

    /// Steps every unfrozen tensor of `model`; frozen tensors are never touched.
    pub fn step_model(&mut self, model: &mut MiniModel<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.params.len() != model.tensors.len() {
            return Err(Error::shape(model.tensors.len(), grads.params.len()));
        }
        let frozen = model.frozen.clone();
        for (tensor, grad) in model.tensors_mut().iter_mut().zip(&grads.params) {
            if frozen[&tensor.group] {
                continue;
            }
            if let Some(g) = grad {
                self.step(tensor.name, &mut tensor.data, g)?;
            }
        }
        Ok(())
    }
}

/// `θ_t ← α·θ_t + (1 − α)·θ_s`, evaluated as `θ_t + (1 − α)(θ_s − θ_t)` so that
/// equal entries stay bit-identical.
pub fn ema_blend<T: Real>(teacher: &mut [T], student: &[T], alpha: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::shape(teacher.len(), student.len()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA decay must lie in [0, 1], got {alpha}")));
    }
    if alpha == 0.0 {
        teacher.copy_from_slice(student);
        return Ok(());
    }
    let rate = T::of(1.0 - alpha);
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t += rate * (s - *t);
    }
    Ok(())
}

/// One side of the teacher-student pair: backbone plus both prompts.
#[derive(Debug, Clone)]
pub struct Branch<T = f32> {
    pub model: MiniModel<T>,
    pub id_prompt: VisualPrompt<T>,
    pub ood_prompt: VisualPrompt<T>,
}

impl<T: Real> PartialEq for Branch<T> {
    fn eq(&self, other: &Self) -> bool {
        self.model == other.model && self.id_prompt == other.id_prompt && self.ood_prompt == other.ood_prompt
    }
}

#[derive(Debug, Clone)]
pub struct TeacherStudent<T = f32> {
    pub student: Branch<T>,
    pub teacher: Branch<T>,
    pub ema_decay: f64,
}

impl<T: Real> PartialEq for TeacherStudent<T> {
    fn eq(&self, other: &Self) -> bool {
        self.student == other.student && self.teacher == other.teacher && self.ema_decay == other.ema_decay
    }
}

impl<T: Real> TeacherStudent<T> {
    pub fn new(student: Branch<T>, ema_decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&ema_decay) {
            return Err(Error::Config(format!("EMA decay must lie in [0, 1], got {ema_decay}")));
        }
        Ok(Self {
            teacher: student.clone(),
            student,
            ema_decay,
        })
    }

    /// Moves every teacher parameter group, prompts included, toward the student.
    pub fn ema_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.ema_decay)
    }
}

pub fn ema_update<T: Real>(teacher: &mut Branch<T>, student: &Branch<T>, alpha: f64) -> Result<()> {
    if teacher.model.arch != student.model.arch {
        return Err(Error::shape(
            format!("{:?}", student.model.arch),
            format!("{:?}", teacher.model.arch),
        ));
    }
    // Groups frozen on both sides stay untouched, so the tape generation survives.
    let skip = |g| teacher.model.is_frozen(g) && student.model.is_frozen(g);
    if !(skip(ParamGroup::Encoder) && skip(ParamGroup::Classifier)) {
        let frozen: Vec<bool> = teacher.model.tensors.iter().map(|t| skip(t.group)).collect();
        for ((t, s), frozen) in teacher.model.tensors_mut().iter_mut().zip(&student.model.tensors).zip(frozen) {
            if !frozen {
                ema_blend(&mut t.data, &s.data, alpha)?;
            }
        }
    }
    ema_blend(teacher.id_prompt.params_mut(), student.id_prompt.params(), alpha)?;
    ema_blend(teacher.ood_prompt.params_mut(), student.ood_prompt.params(), alpha)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses;
    use crate::prompt::PromptRole;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_arch() -> Architecture {
        Architecture {
            input: Geometry::square(2, 8),
            conv1_channels: 3,
            conv2_channels: 4,
            feature_dim: 5,
            num_classes: 4,
        }
    }

    fn random_image(g: Geometry, rng: &mut ChaCha8Rng) -> Image<f64> {
        Image::new(g, (0..g.len()).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_logits() {
        let model = MiniModel::<f64>::zeros(toy_arch()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = model.forward(&random_image(toy_arch().input, &mut rng)).unwrap();
        assert!(out.logits.iter().all(|&l| l == out.logits[0]));
        let p = losses::softmax(&out.logits);
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = toy_arch();
        let a = MiniModel::<f32>::init(arch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = MiniModel::<f32>::init(arch, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let img = random_image(arch.input, &mut ChaCha8Rng::seed_from_u64(1)).cast::<f32>();
        let fa = a.forward(&img).unwrap();
        let fb = b.forward(&img.clone()).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&fa.feature), bits(&fb.feature));
        assert_eq!(bits(&fa.logits), bits(&fb.logits));
    }

    #[test]
    fn shape_mismatch_and_non_finite_input() {
        let model = MiniModel::<f64>::init(toy_arch(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(
            model.forward(&Image::zeros(Geometry::square(2, 9))),
            Err(Error::Shape { .. })
        ));
        let mut bad = Image::zeros(toy_arch().input);
        bad.data_mut()[0] = f64::NAN;
        match model.forward(&bad) {
            Err(Error::NonFinite(layer)) => assert!(layer.contains("conv1")),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = MiniModel::<f64>::init(toy_arch(), &mut rng).unwrap();
        let fwd = model.forward(&random_image(toy_arch().input, &mut rng)).unwrap();
        let grads = model
            .backward(fwd.tape, Some(&[0.0; 5]), Some(&[0.0; 4]))
            .unwrap();
        assert!(grads.params.iter().flatten().flatten().all(|&g| g == 0.0));
        assert!(grads.input.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = MiniModel::<f64>::init(toy_arch(), &mut rng).unwrap();
        let fwd = model.forward(&random_image(toy_arch().input, &mut rng)).unwrap();
        model.tensors_mut()[CLS_B].data[0] += 1.0;
        assert!(matches!(
            model.backward(fwd.tape, None, Some(&[1.0; 4])),
            Err(Error::StaleTape { .. })
        ));
    }

    #[test]
    fn frozen_groups_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = MiniModel::<f64>::init(toy_arch(), &mut rng).unwrap();
        model.set_frozen(ParamGroup::Encoder, true);
        let fwd = model.forward(&random_image(toy_arch().input, &mut rng)).unwrap();
        let grads = model.backward(fwd.tape, None, Some(&[1.0, 0.0, 0.0, -1.0])).unwrap();
        for (t, g) in model.tensors().iter().zip(&grads.params) {
            assert_eq!(g.is_some(), t.group == ParamGroup::Classifier, "{}", t.name);
        }
        assert!(grads.input.iter().any(|&g| g != 0.0));
    }

    /// Scalar loss over a batch: CE on logits plus a quadratic on the feature.
    fn toy_loss(model: &MiniModel<f64>, batch: &[(Image<f64>, usize)]) -> f64 {
        batch
            .iter()
            .map(|(x, y)| {
                let out = model.forward(x).unwrap();
                let q: f64 = out.feature.iter().enumerate().map(|(i, f)| 0.1 * (i as f64 + 1.0) * f * f).sum();
                losses::cross_entropy(&out.logits, *y).unwrap() + q
            })
            .sum()
    }

    fn toy_grads(model: &MiniModel<f64>, batch: &[(Image<f64>, usize)]) -> Vec<Gradients<f64>> {
        batch
            .iter()
            .map(|(x, y)| {
                let out = model.forward(x).unwrap();
                let gl = losses::cross_entropy_grad(&out.logits, *y).unwrap();
                let gf: Vec<f64> = out.feature.iter().enumerate().map(|(i, f)| 0.2 * (i as f64 + 1.0) * f).collect();
                model.backward(out.tape, Some(&gf), Some(&gl)).unwrap()
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arch = toy_arch();
        let model = MiniModel::<f64>::init(arch, &mut rng).unwrap();
        let batch: Vec<_> = (0..4).map(|y| (random_image(arch.input, &mut rng), y)).collect();
        let mut total = toy_grads(&model, &batch).into_iter().reduce(|mut a, b| {
            a.accumulate(&b);
            a
        }).unwrap();
        total.scale(1.0);
        let eps = 1e-3;
        for (ti, tensor) in model.tensors().iter().enumerate() {
            let analytic = total.params[ti].as_ref().unwrap();
            for i in 0..tensor.data.len() {
                let mut plus = model.clone();
                plus.tensors_mut()[ti].data[i] += eps;
                let mut minus = model.clone();
                minus.tensors_mut()[ti].data[i] -= eps;
                let fd = (toy_loss(&plus, &batch) - toy_loss(&minus, &batch)) / (2.0 * eps);
                // ReLU kinks make a handful of entries non-smooth at ε; those
                // show up as tiny absolute errors, so compare with an absolute floor.
                assert!(
                    rel_err(fd, analytic[i]) <= 1e-4 || (fd - analytic[i]).abs() < 1e-7,
                    "{}[{i}]: fd {fd} analytic {}",
                    tensor.name,
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let arch = toy_arch();
        let model = MiniModel::<f64>::init(arch, &mut rng).unwrap();
        let x = random_image(arch.input, &mut rng);
        let batch = vec![(x.clone(), 2usize)];
        let grads = toy_grads(&model, &batch).remove(0);
        let eps = 1e-3;
        for _ in 0..10 {
            let i = rng.gen_range(0..arch.input.len());
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            let fd = (toy_loss(&model, &[(plus, 2)]) - toy_loss(&model, &[(minus, 2)])) / (2.0 * eps);
            assert!(
                rel_err(fd, grads.input[i]) <= 1e-4 || (fd - grads.input[i]).abs() < 1e-7,
                "pixel {i}: fd {fd} analytic {}",
                grads.input[i]
            );
        }
    }

    #[test]
    fn conv_adjoint_dot_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gin = Geometry::new(3, 7, 8);
        let gout = Geometry::new(4, conv_out(7), conv_out(8));
        let w: Vec<f64> = (0..4 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zero_b = vec![0.0; 4];
        let x: Vec<f64> = (0..gin.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..gout.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = conv_forward(&x, gin, &w, &zero_b, gout);
        let (dx, dw, _) = conv_backward(&u, &x, gin, &w, gout, true);
        let lhs: f64 = y.iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs_x: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let rhs_w: f64 = w.iter().zip(dw.as_ref().unwrap()).map(|(a, b)| a * b).sum();
        // Convolution is bilinear: <conv(x, w), u> = <x, ∂x> = <w, ∂w>.
        assert!((lhs - rhs_x).abs() <= 1e-10);
        assert!((lhs - rhs_w).abs() <= 1e-10);
    }

    #[test]
    fn sgd_reference_steps() {
        let mut opt = Sgd::<f64>::new(1.0, 0.0).unwrap();
        let mut theta = vec![0.5, -2.0];
        let g = theta.clone();
        opt.step("a", &mut theta, &g).unwrap();
        assert_eq!(theta, vec![0.0, 0.0]);

        let mut opt = Sgd::<f64>::new(0.1, 0.9).unwrap();
        let mut theta = vec![3.0];
        opt.step("b", &mut theta, &[0.0]).unwrap();
        assert_eq!(theta, vec![3.0]);

        let mut theta = vec![0.0];
        opt.step("c", &mut theta, &[1.0]).unwrap();
        opt.step("c", &mut theta, &[1.0]).unwrap();
        assert!((theta[0] + 0.29).abs() < 1e-12, "{}", theta[0]);

        assert!(opt.step("c", &mut theta, &[f64::NAN]).is_err());
        assert!(Sgd::<f64>::new(0.0, 0.5).is_err());
        assert!(Sgd::<f64>::new(0.1, 1.0).is_err());
    }

    #[test]
    fn sgd_skips_frozen_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = MiniModel::<f32>::init(toy_arch(), &mut rng).unwrap();
        let before = model.clone();
        model.set_frozen(ParamGroup::Encoder, true);
        let grads = Gradients {
            params: model.tensors().iter().map(|t| Some(vec![1.0f32; t.data.len()])).collect(),
            input: vec![],
        };
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step_model(&mut model, &grads).unwrap();
        for (a, b) in model.tensors().iter().zip(before.tensors()) {
            assert_eq!(a.data == b.data, a.group == ParamGroup::Encoder, "{}", a.name);
        }
    }

    fn branch(seed: u64) -> Branch<f64> {
        let arch = toy_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Branch {
            model: MiniModel::init(arch, &mut rng).unwrap(),
            id_prompt: VisualPrompt::init(PromptRole::OodSpecific, 1, arch.input, &mut rng).unwrap(),
            ood_prompt: VisualPrompt::init(PromptRole::OodSpecific, 1, arch.input, &mut rng).unwrap(),
        }
    }

    #[test]
    fn ema_endpoints() {
        let student = branch(1);
        let mut teacher = branch(2);
        let original = teacher.clone();
        ema_update(&mut teacher, &student, 1.0).unwrap();
        assert_eq!(teacher, original);
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher, student);
    }

    #[test]
    fn ema_gap_halves() {
        let student = vec![1.0f64, -3.0];
        let mut teacher = vec![5.0f64, 1.0];
        for k in 1..=10 {
            ema_blend(&mut teacher, &student, 0.5).unwrap();
            let expected = 4.0 * 0.5f64.powi(k);
            assert!((teacher[0] - student[0] - expected).abs() < 1e-12);
        }
        assert!(ema_blend(&mut teacher, &[1.0], 0.5).is_err());
    }

    proptest! {
        #[test]
        fn ema_contracts(seed in any::<u64>(), alpha in 0.0f64..0.999) {
            let student = branch(seed);
            let mut teacher = branch(seed.wrapping_add(1));
            let gap = |t: &Branch<f64>| -> f64 {
                t.model.tensors().iter().zip(student.model.tensors())
                    .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)))
                    .chain(t.id_prompt.params().iter().zip(student.id_prompt.params()).map(|(x, y)| (x - y).powi(2)))
                    .sum::<f64>().sqrt()
            };
            let mut last = gap(&teacher);
            for _ in 0..5 {
                ema_update(&mut teacher, &student, alpha).unwrap();
                let now = gap(&teacher);
                prop_assert!(now <= last + 1e-12);
                last = now;
            }
        }

        #[test]
        fn ema_keeps_equal_entries_bit_identical(x in -1e6f32..1e6, alpha in 0.0f64..=1.0) {
            let mut t = vec![x];
            ema_blend(&mut t, &[x], alpha).unwrap();
            prop_assert_eq!(t[0].to_bits(), x.to_bits());
        }
    }
}
