//! Fourier-slice bridge between images, radial k-space, and sinograms.
//!
//! Radial k-space is produced by an exact direct-summation DTFT of the pixel
//! grid at radial frequency positions (a desk-scale stand-in for a gridding
//! NUFFT). Each spoke converts to one parallel-beam projection by a 1D
//! inverse FFT with an exact frequency-domain sub-pixel shift, then a central
//! crop to the detector grid.

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Result, TomoError};
use crate::geometry::{Geometry, ParallelGeometry, SparsityPattern};
use crate::real::Real;
use crate::types::{Image2D, RadialKSpace, Sinogram};

/// Phase table for one spoke: `phase[m][i] = exp(sign * 2*pi*i * nu_m * coord_i * axis)`.
fn axis_phases<T: Real>(
    n_samples: usize,
    size: usize,
    axis: f64,
    sign: f64,
) -> Vec<Complex<T>> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(n_samples * size);
    for m in 0..n_samples {
        let nu = (m as f64 - (n_samples / 2) as f64) / n_samples as f64;
        for i in 0..size {
            let arg = sign * std::f64::consts::TAU * nu * (i as f64 - half) * axis;
            out.push(Complex::new(T::of(arg.cos()), T::of(arg.sin())));
        }
    }
    out
}

/// Exact radial DTFT of `img`: `n_spokes` spokes at angles `j * pi / n_spokes`
/// with `samples_per_spoke` frequencies, DC at index `samples_per_spoke / 2`.
pub fn image_to_radial_kspace<T: Real>(
    img: &Image2D<T>,
    n_spokes: usize,
    samples_per_spoke: usize,
) -> RadialKSpace<T> {
    let size = img.size;
    let mut k = RadialKSpace::zeros(n_spokes, samples_per_spoke);
    for j in 0..n_spokes {
        let phi = k.spoke_angles[j];
        let col_phase = axis_phases::<T>(samples_per_spoke, size, phi.cos(), -1.0);
        let row_phase = axis_phases::<T>(samples_per_spoke, size, phi.sin(), -1.0);
        let spoke = k.spoke_mut(j);
        for m in 0..samples_per_spoke {
            let cp = &col_phase[m * size..(m + 1) * size];
            let rp = &row_phase[m * size..(m + 1) * size];
            let mut acc = Complex::new(T::zero(), T::zero());
            for r in 0..size {
                let row = &img.data[r * size..(r + 1) * size];
                let mut inner = Complex::new(T::zero(), T::zero());
                for (v, p) in row.iter().zip(cp) {
                    inner = inner + p.scale(*v);
                }
                acc = acc + inner * rp[r];
            }
            spoke[m] = acc;
        }
    }
    k
}

/// Converts spokes to a parallel-beam sinogram: per-spoke inverse FFT along
/// the frequency axis with an exact sinc (frequency-domain linear phase)
/// sub-pixel shift, then a crop to the central `target_detectors` bins.
///
/// The shift places the spatial samples onto the detector grid whose bins
/// center at `(i - (target-1)/2)`: half a detector pixel for even targets,
/// zero for odd ones.
pub fn spokes_to_sinogram<T: Real>(
    k: &RadialKSpace<T>,
    target_detectors: usize,
) -> Result<Sinogram<T>> {
    let shift = if target_detectors % 2 == 0 { 0.5 } else { 0.0 };
    spokes_to_sinogram_with_shift(k, target_detectors, shift)
}

/// As [`spokes_to_sinogram`] with an explicit sub-pixel shift in detector
/// pixels.
pub fn spokes_to_sinogram_with_shift<T: Real>(
    k: &RadialKSpace<T>,
    target_detectors: usize,
    shift_px: f64,
) -> Result<Sinogram<T>> {
    let n = k.samples_per_spoke;
    if target_detectors > n {
        return Err(TomoError::Dimension(format!(
            "cannot crop {target_detectors} detectors out of {n} spoke samples"
        )));
    }
    let geom = Geometry::Parallel(ParallelGeometry {
        n_angles: k.n_spokes,
        angle_start: k.spoke_angles.first().copied().unwrap_or(0.0),
        angle_step: if k.n_spokes > 1 {
            k.spoke_angles[1] - k.spoke_angles[0]
        } else {
            std::f64::consts::PI
        },
        n_detectors: target_detectors,
        detector_spacing: 1.0,
    });
    let mut sino = Sinogram::zeros(geom);

    let mut planner = FftPlanner::<T>::new();
    let ifft = planner.plan_fft_inverse(n);
    let inv_n = T::of(1.0 / n as f64);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];

    // crop start so that the output grid t = (i - (target-1)/2) - shift
    // lands on the periodic iFFT grid t' = jj - n/2
    let start = n / 2 - target_detectors / 2;

    for j in 0..k.n_spokes {
        let spoke = k.spoke(j);
        // reorder from DC-centered to FFT order while applying the shift phase
        for (p, slot) in buf.iter_mut().enumerate() {
            let m = (p + n / 2) % n;
            let nu = k.frequency(m);
            let arg = std::f64::consts::TAU * nu * shift_px;
            let phase = Complex::new(T::of(arg.cos()), T::of(arg.sin()));
            *slot = spoke[m] * phase;
        }
        ifft.process(&mut buf);
        let row = sino.row_mut(j);
        for (i, out) in row.iter_mut().enumerate() {
            // fftshift: spatial index jj corresponds to t' = jj - n/2
            let jj = (start + i + n / 2) % n;
            *out = buf[jj].re * inv_n;
        }
    }
    Ok(sino)
}

/// Largest imaginary residue of the inverse FFT relative to the real peak;
/// near zero when the k-space came from a real image.
pub fn imaginary_residue<T: Real>(k: &RadialKSpace<T>) -> f64 {
    let n = k.samples_per_spoke;
    let mut planner = FftPlanner::<T>::new();
    let ifft = planner.plan_fft_inverse(n);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
    let mut max_im = 0.0f64;
    let mut max_re = 0.0f64;
    for j in 0..k.n_spokes {
        let spoke = k.spoke(j);
        for (p, slot) in buf.iter_mut().enumerate() {
            *slot = spoke[(p + n / 2) % n];
        }
        ifft.process(&mut buf);
        for v in &buf {
            max_im = max_im.max(v.im.as_f64().abs());
            max_re = max_re.max(v.re.as_f64().abs());
        }
    }
    if max_re == 0.0 {
        0.0
    } else {
        max_im / max_re
    }
}

/// Keeps only the spokes named by `pattern`.
pub fn sparsify_spokes<T: Real>(
    k: &RadialKSpace<T>,
    pattern: &SparsityPattern,
) -> Result<RadialKSpace<T>> {
    if pattern
        .kept_indices
        .last()
        .is_some_and(|&i| i >= k.n_spokes)
    {
        return Err(TomoError::Dimension(
            "sparsity pattern exceeds spoke count".into(),
        ));
    }
    let n = k.samples_per_spoke;
    let mut data = Vec::with_capacity(pattern.kept_indices.len() * n);
    let mut angles = Vec::with_capacity(pattern.kept_indices.len());
    for &j in &pattern.kept_indices {
        data.extend_from_slice(k.spoke(j));
        angles.push(k.spoke_angles[j]);
    }
    Ok(RadialKSpace {
        n_spokes: pattern.kept_indices.len(),
        samples_per_spoke: n,
        spoke_angles: angles,
        data,
    })
}

/// Density-compensated adjoint of [`image_to_radial_kspace`]: the classic
/// regridding-free reference reconstruction for radial data. Compensation is
/// the analytic ramp `|nu|` with the DC bin set to half the first nonzero
/// weight.
pub fn adjoint_nufft_recon<T: Real>(k: &RadialKSpace<T>, out_size: usize) -> Image2D<T> {
    let n = k.samples_per_spoke;
    let d_nu = 1.0 / n as f64;
    let d_phi = if k.n_spokes > 1 {
        (k.spoke_angles[1] - k.spoke_angles[0]).abs()
    } else {
        std::f64::consts::PI
    };
    let mut acc = vec![Complex::new(T::zero(), T::zero()); out_size * out_size];
    for j in 0..k.n_spokes {
        let phi = k.spoke_angles[j];
        let col_phase = axis_phases::<T>(n, out_size, phi.cos(), 1.0);
        let row_phase = axis_phases::<T>(n, out_size, phi.sin(), 1.0);
        let spoke = k.spoke(j);
        for m in 0..n {
            let nu = k.frequency(m);
            let w = if nu == 0.0 { 0.5 * d_nu } else { nu.abs() };
            let sample = spoke[m].scale(T::of(w * d_nu * d_phi));
            if sample.norm_sqr() == T::zero() {
                continue;
            }
            let cp = &col_phase[m * out_size..(m + 1) * out_size];
            let rp = &row_phase[m * out_size..(m + 1) * out_size];
            for r in 0..out_size {
                let srp = sample * rp[r];
                let row = &mut acc[r * out_size..(r + 1) * out_size];
                for (slot, p) in row.iter_mut().zip(cp) {
                    *slot = *slot + srp * *p;
                }
            }
        }
    }
    Image2D {
        size: out_size,
        data: acc.into_iter().map(|v| v.re).collect(),
    }
}
