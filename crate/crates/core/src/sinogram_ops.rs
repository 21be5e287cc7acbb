//! Sparsification, angular upsampling, and the normalization protocol used
//! around every learned model.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};
use crate::geometry::SparsityPattern;
use crate::real::Real;
use crate::types::{Image2D, Sinogram};

/// Normalization state captured from one sparse input and reused for every
/// de-normalization of the same forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    /// Sinogram mean.
    pub mu_s: f64,
    /// Sinogram standard deviation, always positive.
    pub sigma_s: f64,
    /// Image-space scale: 99th percentile over the training corpus.
    pub p99: f64,
}

/// Keeps only the rows named by `pattern`; the output geometry carries the
/// widened angle step.
pub fn sparsify<T: Real>(sino: &Sinogram<T>, pattern: &SparsityPattern) -> Result<Sinogram<T>> {
    let n_angles = sino.n_angles();
    if pattern
        .kept_indices
        .last()
        .is_some_and(|&i| i >= n_angles)
    {
        return Err(TomoError::Dimension(format!(
            "sparsity pattern reaches row {} of a {}-row sinogram",
            pattern.kept_indices.last().unwrap(),
            n_angles
        )));
    }
    let mut out = Sinogram::zeros(sino.geometry.sparsified(pattern));
    for (j, &src) in pattern.kept_indices.iter().enumerate() {
        out.row_mut(j).copy_from_slice(sino.row(src));
    }
    Ok(out)
}

/// Linear interpolation along the angle axis back onto the `target_angles`
/// full grid. Rows at kept positions are copied verbatim. For a periodic
/// angle axis (full-rotation fan data) the final gap wraps around to row 0;
/// otherwise it clamps to the last row.
pub fn upsample_bilinear<T: Real>(sino: &Sinogram<T>, target_angles: usize) -> Result<Sinogram<T>> {
    let n_src = sino.n_angles();
    if target_angles < n_src {
        return Err(TomoError::Dimension(format!(
            "cannot upsample {n_src} angles down to {target_angles}"
        )));
    }
    // the sparsity factor that placed these rows on the full grid
    let factor = (1..=target_angles)
        .find(|f| target_angles.div_ceil(*f) == n_src)
        .ok_or_else(|| {
            TomoError::Dimension(format!(
                "{n_src} rows do not embed in a {target_angles}-angle grid by uniform sparsification"
            ))
        })?;
    let mut out = Sinogram::zeros(sino.geometry.upsampled(target_angles, factor));
    let n_det = sino.n_detectors();
    let periodic = sino.geometry.angle_axis_periodic();
    let last_kept = (n_src - 1) * factor;
    for i in 0..target_angles {
        let j0 = i / factor;
        let (a, b, frac) = if i % factor == 0 {
            (j0, j0, 0.0)
        } else if j0 + 1 < n_src {
            (j0, j0 + 1, (i % factor) as f64 / factor as f64)
        } else if periodic {
            let gap = target_angles - last_kept;
            (n_src - 1, 0, (i - last_kept) as f64 / gap as f64)
        } else {
            (n_src - 1, n_src - 1, 0.0)
        };
        let (ra, rb) = (sino.row(a), sino.row(b));
        let w = T::of(frac);
        let row = out.row_mut(i);
        for d in 0..n_det {
            row[d] = ra[d] + (rb[d] - ra[d]) * w;
        }
    }
    Ok(out)
}

/// Z-score normalization of a sinogram; the returned stats (with a unit
/// image scale) invert it via [`denorm`].
pub fn znorm<T: Real>(sino: &Sinogram<T>) -> Result<(Sinogram<T>, NormStats)> {
    let stats = znorm_stats(sino)?;
    Ok((apply_znorm(sino, &stats), stats))
}

/// Mean/std of a sinogram's entries, failing on constant input.
pub fn znorm_stats<T: Real>(sino: &Sinogram<T>) -> Result<NormStats> {
    let n = sino.data.len() as f64;
    let mu = sino.data.iter().map(|v| v.as_f64()).sum::<f64>() / n;
    let var = sino
        .data
        .iter()
        .map(|v| {
            let d = v.as_f64() - mu;
            d * d
        })
        .sum::<f64>()
        / n;
    let sigma = var.sqrt();
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(TomoError::DegenerateInput(
            "constant sinogram has zero standard deviation".into(),
        ));
    }
    Ok(NormStats {
        mu_s: mu,
        sigma_s: sigma,
        p99: 1.0,
    })
}

/// `(S - mu) / sigma` with stats computed elsewhere.
pub fn apply_znorm<T: Real>(sino: &Sinogram<T>, stats: &NormStats) -> Sinogram<T> {
    let mu = T::of(stats.mu_s);
    let inv = T::of(1.0 / stats.sigma_s);
    Sinogram {
        geometry: sino.geometry.clone(),
        data: sino.data.iter().map(|&v| (v - mu) * inv).collect(),
    }
}

/// `S * sigma + mu`, the inverse of [`apply_znorm`].
pub fn denorm<T: Real>(sino: &Sinogram<T>, stats: &NormStats) -> Sinogram<T> {
    let mu = T::of(stats.mu_s);
    let sigma = T::of(stats.sigma_s);
    Sinogram {
        geometry: sino.geometry.clone(),
        data: sino.data.iter().map(|&v| v * sigma + mu).collect(),
    }
}

/// Divides by the corpus-level 99th percentile scale.
pub fn image_norm<T: Real>(img: &Image2D<T>, p99: f64) -> Image2D<T> {
    let inv = T::of(1.0 / p99);
    Image2D {
        size: img.size,
        data: img.data.iter().map(|&v| v * inv).collect(),
    }
}

/// Inverse of [`image_norm`].
pub fn image_denorm<T: Real>(img: &Image2D<T>, p99: f64) -> Image2D<T> {
    let s = T::of(p99);
    Image2D {
        size: img.size,
        data: img.data.iter().map(|&v| v * s).collect(),
    }
}

/// Percentile by linear interpolation between order statistics,
/// `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(TomoError::DegenerateInput(
            "percentile of an empty set".into(),
        ));
    }
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}
