//! Padding-template visual prompts.
//!
//! A prompt of width `p` owns every pixel within `p` of the image border, in
//! every channel, and is added to the input before encoding. The interior is
//! never touched. Parameters are laid out channel-major; within a channel the
//! top band comes first, then the bottom band, then the left and right strips
//! of each interior row.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Geometry, Image, Real, Result};

/// Standard deviation of the Gaussian used to initialize OOD-specific prompts.
pub const OOD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptRole {
    IdSpecific,
    OodSpecific,
}

fn check_geometry(width: usize, geometry: Geometry) -> Result<()> {
    let min_side = geometry.height.min(geometry.width);
    if 2 * width > min_side {
        return Err(Error::PromptGeometry {
            double_width: 2 * width,
            min_side,
        });
    }
    Ok(())
}

/// Number of learnable values in a padding prompt: `2·C·p·(H + W − 2p)`.
pub fn param_count(width: usize, geometry: Geometry) -> Result<usize> {
    check_geometry(width, geometry)?;
    let Geometry {
        channels: c,
        height: h,
        width: w,
    } = geometry;
    Ok(2 * c * width * (h + w - 2 * width))
}

/// Pixel coordinate owned by one prompt parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BorderCoord {
    pub channel: usize,
    pub row: usize,
    pub col: usize,
}

/// Ordered mapping from parameter index to border pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BorderMap {
    geometry: Geometry,
    coords: Vec<BorderCoord>,
    offsets: Vec<usize>,
}

impl BorderMap {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[BorderCoord] {
        &self.coords
    }

    /// Flat offsets into a C×H×W buffer, aligned with [`coords`](Self::coords).
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }
}

pub fn index_map(width: usize, geometry: Geometry) -> Result<BorderMap> {
    let count = param_count(width, geometry)?;
    let Geometry {
        channels,
        height,
        width: cols,
    } = geometry;
    let mut coords = Vec::with_capacity(count);
    for channel in 0..channels {
        let bands = (0..width).chain(height - width..height);
        for row in bands {
            for col in 0..cols {
                coords.push(BorderCoord { channel, row, col });
            }
        }
        for row in width..height - width {
            for col in (0..width).chain(cols - width..cols) {
                coords.push(BorderCoord { channel, row, col });
            }
        }
    }
    debug_assert_eq!(coords.len(), count);
    let offsets = coords
        .iter()
        .map(|c| geometry.offset(c.channel, c.row, c.col))
        .collect();
    Ok(BorderMap {
        geometry,
        coords,
        offsets,
    })
}

/// A learnable additive border of width `p` on a fixed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualPrompt<T = f32> {
    width: usize,
    role: PromptRole,
    map: BorderMap,
    params: Vec<T>,
}

impl<T: Real> VisualPrompt<T> {
    pub fn zeros(role: PromptRole, width: usize, geometry: Geometry) -> Result<Self> {
        if width == 0 {
            return Err(Error::Config("prompt width must be positive".into()));
        }
        let map = index_map(width, geometry)?;
        let params = vec![T::zero(); map.len()];
        Ok(Self {
            width,
            role,
            map,
            params,
        })
    }

    pub fn from_params(
        role: PromptRole,
        width: usize,
        geometry: Geometry,
        params: Vec<T>,
    ) -> Result<Self> {
        let mut prompt = Self::zeros(role, width, geometry)?;
        if params.len() != prompt.params.len() {
            return Err(Error::shape(
                format!("{} prompt parameters", prompt.params.len()),
                params.len(),
            ));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt parameters".into()));
        }
        prompt.params = params;
        Ok(prompt)
    }

    /// ID prompts start at zero so the prompted input equals the raw input;
    /// OOD prompts start as small i.i.d. Gaussian noise.
    pub fn init<R: Rng + ?Sized>(
        role: PromptRole,
        width: usize,
        geometry: Geometry,
        rng: &mut R,
    ) -> Result<Self> {
        let mut prompt = Self::zeros(role, width, geometry)?;
        if role == PromptRole::OodSpecific {
            let normal = Normal::new(0.0, OOD_INIT_STD).expect("valid std");
            for v in &mut prompt.params {
                *v = T::of(normal.sample(rng));
            }
        }
        Ok(prompt)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn role(&self) -> PromptRole {
        self.role
    }

    pub fn geometry(&self) -> Geometry {
        self.map.geometry
    }

    pub fn map(&self) -> &BorderMap {
        &self.map
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    fn check_image(&self, geometry: Geometry) -> Result<()> {
        if geometry != self.map.geometry {
            return Err(Error::shape(self.map.geometry, geometry));
        }
        Ok(())
    }

    /// `x + v` on border pixels; no clamping.
    pub fn apply(&self, image: &Image<T>) -> Result<Image<T>> {
        self.check_image(image.geometry())?;
        let mut out = image.clone();
        let data = out.data_mut();
        for (&offset, &v) in self.map.offsets.iter().zip(&self.params) {
            data[offset] += v;
        }
        Ok(out)
    }

    /// Adjoint of [`apply`](Self::apply) with respect to the parameters:
    /// gathers the upstream image gradient at each border coordinate.
    pub fn gradient(&self, upstream: &Image<T>) -> Result<Vec<T>> {
        self.check_image(upstream.geometry())?;
        self.gradient_from_slice(upstream.data())
    }

    pub(crate) fn gradient_from_slice(&self, upstream: &[T]) -> Result<Vec<T>> {
        if upstream.len() != self.map.geometry.len() {
            return Err(Error::shape(self.map.geometry.len(), upstream.len()));
        }
        Ok(self.map.offsets.iter().map(|&o| upstream[o]).collect())
    }

    pub fn cast<U: Real>(&self) -> VisualPrompt<U> {
        VisualPrompt {
            width: self.width,
            role: self.role,
            map: self.map.clone(),
            params: self.params.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}
