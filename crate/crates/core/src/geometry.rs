//! Acquisition geometries, angle grids, and angular sparsity patterns.
//!
//! Angles are stored in radians everywhere inside the library; degrees only
//! appear at CLI and JSON boundaries. Detector bin `i` centers at
//! `(i - (n_detectors - 1) / 2) * spacing`, so the detector array is centered
//! on the isocenter for both beam types.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};

/// Parallel-beam geometry: `n_angles` equiangular views, flat detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelGeometry {
    pub n_angles: usize,
    pub angle_start: f64,
    pub angle_step: f64,
    pub n_detectors: usize,
    pub detector_spacing: f64,
}

/// Fan-beam geometry: equiangular gantry angles, flat equally-spaced detector.
#[derive(Debug, Clone, PartialEq)]
pub struct FanGeometry {
    pub n_angles: usize,
    pub angle_step: f64,
    pub n_detectors: usize,
    pub detector_spacing: f64,
    pub source_iso_dist: f64,
    pub detector_iso_dist: f64,
}

/// Either beam geometry, as carried by sinograms.
#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Parallel(ParallelGeometry),
    Fan(FanGeometry),
}

impl ParallelGeometry {
    pub fn new(n_angles: usize, angle_start: f64, angle_step: f64, n_detectors: usize) -> Self {
        assert!(n_angles >= 1 && n_detectors >= 1);
        Self {
            n_angles,
            angle_start,
            angle_step,
            n_detectors,
            detector_spacing: 1.0,
        }
    }

    pub fn angle(&self, i: usize) -> f64 {
        self.angle_start + i as f64 * self.angle_step
    }

    /// Detector coordinate of bin `i`, centered on the array middle.
    pub fn detector_pos(&self, i: usize) -> f64 {
        (i as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }
}

impl FanGeometry {
    pub fn angle(&self, i: usize) -> f64 {
        i as f64 * self.angle_step
    }

    pub fn detector_pos(&self, i: usize) -> f64 {
        (i as f64 - (self.n_detectors as f64 - 1.0) / 2.0) * self.detector_spacing
    }

    /// Source-to-detector distance.
    pub fn source_det_dist(&self) -> f64 {
        self.source_iso_dist + self.detector_iso_dist
    }

    pub fn fan_half_angle(&self) -> f64 {
        let half_width = self.n_detectors as f64 * self.detector_spacing / 2.0;
        (half_width / self.source_det_dist()).atan()
    }
}

impl Geometry {
    pub fn n_angles(&self) -> usize {
        match self {
            Geometry::Parallel(g) => g.n_angles,
            Geometry::Fan(g) => g.n_angles,
        }
    }

    pub fn n_detectors(&self) -> usize {
        match self {
            Geometry::Parallel(g) => g.n_detectors,
            Geometry::Fan(g) => g.n_detectors,
        }
    }

    pub fn detector_spacing(&self) -> f64 {
        match self {
            Geometry::Parallel(g) => g.detector_spacing,
            Geometry::Fan(g) => g.detector_spacing,
        }
    }

    pub fn angle(&self, i: usize) -> f64 {
        match self {
            Geometry::Parallel(g) => g.angle(i),
            Geometry::Fan(g) => g.angle(i),
        }
    }

    pub fn angle_step(&self) -> f64 {
        match self {
            Geometry::Parallel(g) => g.angle_step,
            Geometry::Fan(g) => g.angle_step,
        }
    }

    /// Fan sinograms cover a full rotation, so the angle axis is periodic.
    pub fn angle_axis_periodic(&self) -> bool {
        matches!(self, Geometry::Fan(_))
    }

    /// Geometry with the same rays but only every `factor`-th angle retained.
    pub fn sparsified(&self, pattern: &SparsityPattern) -> Geometry {
        match self {
            Geometry::Parallel(g) => Geometry::Parallel(ParallelGeometry {
                n_angles: pattern.kept_indices.len(),
                angle_step: g.angle_step * pattern.factor as f64,
                ..g.clone()
            }),
            Geometry::Fan(g) => Geometry::Fan(FanGeometry {
                n_angles: pattern.kept_indices.len(),
                angle_step: g.angle_step * pattern.factor as f64,
                ..g.clone()
            }),
        }
    }

    /// Geometry with the angle grid refined back to `target_angles` views.
    pub fn upsampled(&self, target_angles: usize, factor: usize) -> Geometry {
        assert_eq!(target_angles.div_ceil(factor), self.n_angles());
        match self {
            Geometry::Parallel(g) => Geometry::Parallel(ParallelGeometry {
                n_angles: target_angles,
                angle_step: g.angle_step / factor as f64,
                ..g.clone()
            }),
            Geometry::Fan(g) => Geometry::Fan(FanGeometry {
                n_angles: target_angles,
                angle_step: g.angle_step / factor as f64,
                ..g.clone()
            }),
        }
    }
}

/// Default fan-beam setup: 360 views at 1 degree, 511 detector pixels,
/// source-to-isocenter 400 px, detector-to-isocenter 150 px.
pub fn make_fan_default() -> FanGeometry {
    FanGeometry {
        n_angles: 360,
        angle_step: 1f64.to_radians(),
        n_detectors: 511,
        detector_spacing: 1.0,
        source_iso_dist: 400.0,
        detector_iso_dist: 150.0,
    }
}

/// Default parallel-beam setup: 180 views at 1 degree, 363 detector pixels.
pub fn make_parallel_default() -> ParallelGeometry {
    ParallelGeometry {
        n_angles: 180,
        angle_start: 0.0,
        angle_step: 1f64.to_radians(),
        n_detectors: 363,
        detector_spacing: 1.0,
    }
}

/// Fan geometry for a square image of `size` pixels: the default 256-px setup
/// with all lengths scaled by `size / 256`, preserving the fan angle. The
/// detector count is rounded up to the next even number.
pub fn fan_for_size(size: usize, n_angles: usize) -> FanGeometry {
    let s = size as f64 / 256.0;
    let n_detectors = (511.0 * s).ceil() as usize;
    FanGeometry {
        n_angles,
        angle_step: std::f64::consts::TAU / n_angles as f64,
        n_detectors,
        detector_spacing: 1.0,
        source_iso_dist: 400.0 * s,
        detector_iso_dist: 150.0 * s,
    }
}

/// Parallel geometry for a square image of `size` pixels covering the full
/// diagonal, detector count rounded up to odd so bin centers land on integers.
pub fn parallel_for_size(size: usize, n_angles: usize) -> ParallelGeometry {
    let mut n_detectors = (363.0 * size as f64 / 256.0).ceil() as usize;
    if n_detectors % 2 == 0 {
        n_detectors += 1;
    }
    ParallelGeometry {
        n_angles,
        angle_start: 0.0,
        angle_step: std::f64::consts::PI / n_angles as f64,
        n_detectors,
        detector_spacing: 1.0,
    }
}

/// Which angle indices survive "keep every n-th view" subsampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    pub factor: usize,
    pub kept_indices: Vec<usize>,
}

/// Indices `{0, n, 2n, ...}` retained when keeping every `factor`-th of
/// `n_angles` views.
pub fn sparsify_indices(n_angles: usize, factor: usize) -> Result<SparsityPattern> {
    if factor == 0 || factor > n_angles {
        return Err(TomoError::InvalidSparsity { factor, n_angles });
    }
    Ok(SparsityPattern {
        factor,
        kept_indices: (0..n_angles).step_by(factor).collect(),
    })
}

/// JSON sidecar representation (angles in degrees at the file boundary).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeometryJson {
    #[serde(rename = "type")]
    pub kind: String,
    pub n_angles: usize,
    pub angle_step_deg: f64,
    pub n_detectors: usize,
    pub detector_spacing: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_start_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_iso_dist: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detector_iso_dist: Option<f64>,
}

impl Geometry {
    pub fn to_json(&self) -> GeometryJson {
        match self {
            Geometry::Parallel(g) => GeometryJson {
                kind: "parallel".into(),
                n_angles: g.n_angles,
                angle_step_deg: g.angle_step.to_degrees(),
                n_detectors: g.n_detectors,
                detector_spacing: g.detector_spacing,
                angle_start_deg: Some(g.angle_start.to_degrees()),
                source_iso_dist: None,
                detector_iso_dist: None,
            },
            Geometry::Fan(g) => GeometryJson {
                kind: "fan".into(),
                n_angles: g.n_angles,
                angle_step_deg: g.angle_step.to_degrees(),
                n_detectors: g.n_detectors,
                detector_spacing: g.detector_spacing,
                angle_start_deg: None,
                source_iso_dist: Some(g.source_iso_dist),
                detector_iso_dist: Some(g.detector_iso_dist),
            },
        }
    }

    pub fn from_json(j: &GeometryJson) -> Result<Geometry> {
        match j.kind.as_str() {
            "parallel" => Ok(Geometry::Parallel(ParallelGeometry {
                n_angles: j.n_angles,
                angle_start: j.angle_start_deg.unwrap_or(0.0).to_radians(),
                angle_step: j.angle_step_deg.to_radians(),
                n_detectors: j.n_detectors,
                detector_spacing: j.detector_spacing,
            })),
            "fan" => Ok(Geometry::Fan(FanGeometry {
                n_angles: j.n_angles,
                angle_step: j.angle_step_deg.to_radians(),
                n_detectors: j.n_detectors,
                detector_spacing: j.detector_spacing,
                source_iso_dist: j
                    .source_iso_dist
                    .ok_or_else(|| TomoError::Schema("fan geometry missing source_iso_dist".into()))?,
                detector_iso_dist: j.detector_iso_dist.ok_or_else(|| {
                    TomoError::Schema("fan geometry missing detector_iso_dist".into())
                })?,
            })),
            other => Err(TomoError::Schema(format!("unknown geometry type {other:?}"))),
        }
    }
}
