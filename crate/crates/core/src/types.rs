//! Core value types: images, sinograms, and radial k-space stacks.

use num_complex::Complex;

use crate::error::{Result, TomoError};
use crate::geometry::Geometry;
use crate::real::Real;

/// Square pixel grid of attenuation coefficients (1/px) or normalized MR
/// magnitudes, row-major. Pixel `(r, c)` sits at world position
/// `(c - (size-1)/2, r - (size-1)/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D<T> {
    pub size: usize,
    pub data: Vec<T>,
}

impl<T: Real> Image2D<T> {
    pub fn zeros(size: usize) -> Self {
        Self {
            size,
            data: vec![T::zero(); size * size],
        }
    }

    pub fn from_vec(size: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != size * size {
            return Err(TomoError::Dimension(format!(
                "image payload {} does not match {size}x{size}",
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.size + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.size + c] = v;
    }

    /// World coordinate of a pixel center along one axis.
    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        i as f64 - (self.size as f64 - 1.0) / 2.0
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Image2D<U> {
        Image2D {
            size: self.size,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Stack of projections: `n_angles x n_detectors`, row per view.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram<T> {
    pub geometry: Geometry,
    pub data: Vec<T>,
}

impl<T: Real> Sinogram<T> {
    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.n_angles() * geometry.n_detectors();
        Self {
            geometry,
            data: vec![T::zero(); n],
        }
    }

    pub fn from_vec(geometry: Geometry, data: Vec<T>) -> Result<Self> {
        if data.len() != geometry.n_angles() * geometry.n_detectors() {
            return Err(TomoError::Dimension(format!(
                "sinogram payload {} does not match {}x{}",
                data.len(),
                geometry.n_angles(),
                geometry.n_detectors()
            )));
        }
        Ok(Self { geometry, data })
    }

    pub fn n_angles(&self) -> usize {
        self.geometry.n_angles()
    }

    pub fn n_detectors(&self) -> usize {
        self.geometry.n_detectors()
    }

    pub fn row(&self, a: usize) -> &[T] {
        let n = self.n_detectors();
        &self.data[a * n..(a + 1) * n]
    }

    pub fn row_mut(&mut self, a: usize) -> &mut [T] {
        let n = self.n_detectors();
        &mut self.data[a * n..(a + 1) * n]
    }

    pub fn cast<U: Real>(&self) -> Sinogram<U> {
        Sinogram {
            geometry: self.geometry.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Complex radial k-space samples: one row per spoke, frequencies along the
/// row in increasing order with DC at index `samples_per_spoke / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialKSpace<T> {
    pub n_spokes: usize,
    pub samples_per_spoke: usize,
    pub spoke_angles: Vec<f64>,
    pub data: Vec<Complex<T>>,
}

impl<T: Real> RadialKSpace<T> {
    pub fn zeros(n_spokes: usize, samples_per_spoke: usize) -> Self {
        let spoke_angles = (0..n_spokes)
            .map(|j| j as f64 * std::f64::consts::PI / n_spokes as f64)
            .collect();
        Self {
            n_spokes,
            samples_per_spoke,
            spoke_angles,
            data: vec![Complex::new(T::zero(), T::zero()); n_spokes * samples_per_spoke],
        }
    }

    pub fn spoke(&self, j: usize) -> &[Complex<T>] {
        let n = self.samples_per_spoke;
        &self.data[j * n..(j + 1) * n]
    }

    pub fn spoke_mut(&mut self, j: usize) -> &mut [Complex<T>] {
        let n = self.samples_per_spoke;
        &mut self.data[j * n..(j + 1) * n]
    }

    /// Signed frequency (cycles per pixel) of sample `m` along a spoke.
    #[inline]
    pub fn frequency(&self, m: usize) -> f64 {
        (m as f64 - (self.samples_per_spoke / 2) as f64) / self.samples_per_spoke as f64
    }
}
