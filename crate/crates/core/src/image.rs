use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Channel-major image geometry (C×H×W).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn square(channels: usize, side: usize) -> Self {
        Self::new(channels, side, side)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn offset(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.height + row) * self.width + col
    }
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Dense C×H×W pixel tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T = f32> {
    geometry: Geometry,
    data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn new(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::shape(
                format!("{} values for {geometry}", geometry.len()),
                data.len(),
            ));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self {
            geometry,
            data: vec![T::zero(); geometry.len()],
        }
    }

    pub fn filled(geometry: Geometry, value: T) -> Self {
        Self {
            geometry,
            data: vec![value; geometry.len()],
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, channel: usize, row: usize, col: usize) -> T {
        self.data[self.geometry.offset(channel, row, col)]
    }

    #[inline]
    pub fn set(&mut self, channel: usize, row: usize, col: usize, value: T) {
        let i = self.geometry.offset(channel, row, col);
        self.data[i] = value;
    }

    pub fn cast<U: Real>(&self) -> Image<U> {
        Image {
            geometry: self.geometry,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Nearest-neighbour resize to `height`×`width`, keeping the channel count.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        let src = self.geometry;
        if src.height == height && src.width == width {
            return self.clone();
        }
        let dst = Geometry::new(src.channels, height, width);
        let mut out = Vec::with_capacity(dst.len());
        for c in 0..src.channels {
            for r in 0..height {
                let sr = (r * src.height / height).min(src.height - 1);
                for col in 0..width {
                    let sc = (col * src.width / width).min(src.width - 1);
                    out.push(self.get(c, sr, sc));
                }
            }
        }
        Self {
            geometry: dst,
            data: out,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
