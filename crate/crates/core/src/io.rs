//! File formats: raw little-endian 32-bit float payloads with JSON sidecars
//! for arrays, a manifest-plus-payload checkpoint format for trained models,
//! and PGM rendering for metric maps.
//!
//! An array saved to `foo.raw` gets its sidecar at `foo.raw.json`. Loading
//! validates schema, kind, endianness, and payload length before touching
//! the data, so corrupted files surface as typed errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Shape};
use crate::error::{Result, TomoError};
use crate::geometry::{Geometry, GeometryJson};
use crate::models::ModelConfig;
use crate::real::Real;
use crate::sinogram_ops::NormStats;
use crate::types::{Image2D, RadialKSpace, Sinogram};
use num_complex::Complex;

const ARRAY_SCHEMA: &str = "tomo-array-v1";
const CHECKPOINT_SCHEMA: &str = "tomo-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArraySidecar {
    schema: String,
    kind: String,
    dtype: String,
    endianness: String,
    shape: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    unit: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    geometry: Option<GeometryJson>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spoke_angles: Option<Vec<f64>>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    s.into()
}

fn write_payload<T: Real>(path: &Path, data: &[T]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_payload(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expected_len * 4 {
        return Err(TomoError::Truncated {
            expected: expected_len * 4,
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn load_sidecar(path: &Path, expect_kind: &str) -> Result<ArraySidecar> {
    let text = fs::read_to_string(sidecar_path(path))?;
    let sc: ArraySidecar = serde_json::from_str(&text)?;
    if sc.schema != ARRAY_SCHEMA {
        return Err(TomoError::Schema(format!(
            "unknown schema {:?}, expected {ARRAY_SCHEMA:?}",
            sc.schema
        )));
    }
    if sc.kind != expect_kind {
        return Err(TomoError::Schema(format!(
            "file holds a {:?}, not a {expect_kind:?}",
            sc.kind
        )));
    }
    if sc.endianness != "little" {
        return Err(TomoError::Schema(format!(
            "unsupported endianness {:?}",
            sc.endianness
        )));
    }
    Ok(sc)
}

pub fn save_image<T: Real>(path: &Path, img: &Image2D<T>) -> Result<()> {
    let sc = ArraySidecar {
        schema: ARRAY_SCHEMA.into(),
        kind: "image".into(),
        dtype: "f32".into(),
        endianness: "little".into(),
        shape: vec![img.size, img.size],
        unit: Some("attenuation/px".into()),
        geometry: None,
        spoke_angles: None,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sc)?)?;
    write_payload(path, &img.data)
}

pub fn load_image<T: Real>(path: &Path) -> Result<Image2D<T>> {
    let sc = load_sidecar(path, "image")?;
    if sc.dtype != "f32" {
        return Err(TomoError::Schema(format!("image dtype {:?}", sc.dtype)));
    }
    if sc.shape.len() != 2 || sc.shape[0] != sc.shape[1] || sc.shape[0] == 0 {
        return Err(TomoError::Schema(format!(
            "image shape {:?} is not square",
            sc.shape
        )));
    }
    let size = sc.shape[0];
    let raw = read_payload(path, size * size)?;
    Image2D::from_vec(size, raw.iter().map(|&v| T::of(v as f64)).collect())
}

pub fn save_sinogram<T: Real>(path: &Path, sino: &Sinogram<T>) -> Result<()> {
    let sc = ArraySidecar {
        schema: ARRAY_SCHEMA.into(),
        kind: "sinogram".into(),
        dtype: "f32".into(),
        endianness: "little".into(),
        shape: vec![sino.n_angles(), sino.n_detectors()],
        unit: Some("line-integral".into()),
        geometry: Some(sino.geometry.to_json()),
        spoke_angles: None,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sc)?)?;
    write_payload(path, &sino.data)
}

pub fn load_sinogram<T: Real>(path: &Path) -> Result<Sinogram<T>> {
    let sc = load_sidecar(path, "sinogram")?;
    if sc.dtype != "f32" {
        return Err(TomoError::Schema(format!("sinogram dtype {:?}", sc.dtype)));
    }
    let gj = sc
        .geometry
        .as_ref()
        .ok_or_else(|| TomoError::Schema("sinogram sidecar lacks geometry".into()))?;
    let geom = Geometry::from_json(gj)?;
    if sc.shape != [geom.n_angles(), geom.n_detectors()] {
        return Err(TomoError::Schema(format!(
            "sinogram shape {:?} disagrees with geometry {}x{}",
            sc.shape,
            geom.n_angles(),
            geom.n_detectors()
        )));
    }
    let raw = read_payload(path, geom.n_angles() * geom.n_detectors())?;
    Sinogram::from_vec(geom, raw.iter().map(|&v| T::of(v as f64)).collect())
}

pub fn save_kspace<T: Real>(path: &Path, k: &RadialKSpace<T>) -> Result<()> {
    let sc = ArraySidecar {
        schema: ARRAY_SCHEMA.into(),
        kind: "kspace".into(),
        dtype: "c64".into(),
        endianness: "little".into(),
        shape: vec![k.n_spokes, k.samples_per_spoke],
        unit: None,
        geometry: None,
        spoke_angles: Some(k.spoke_angles.clone()),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sc)?)?;
    // complex samples stored as interleaved re/im pairs
    let mut flat = Vec::with_capacity(k.data.len() * 2);
    for v in &k.data {
        flat.push(v.re);
        flat.push(v.im);
    }
    write_payload(path, &flat)
}

pub fn load_kspace<T: Real>(path: &Path) -> Result<RadialKSpace<T>> {
    let sc = load_sidecar(path, "kspace")?;
    if sc.dtype != "c64" {
        return Err(TomoError::Schema(format!("kspace dtype {:?}", sc.dtype)));
    }
    if sc.shape.len() != 2 {
        return Err(TomoError::Schema(format!("kspace shape {:?}", sc.shape)));
    }
    let (n_spokes, samples) = (sc.shape[0], sc.shape[1]);
    let angles = sc
        .spoke_angles
        .ok_or_else(|| TomoError::Schema("kspace sidecar lacks spoke angles".into()))?;
    if angles.len() != n_spokes {
        return Err(TomoError::Schema(format!(
            "{} spoke angles for {} spokes",
            angles.len(),
            n_spokes
        )));
    }
    let raw = read_payload(path, n_spokes * samples * 2)?;
    let data = raw
        .chunks_exact(2)
        .map(|c| Complex::new(T::of(c[0] as f64), T::of(c[1] as f64)))
        .collect();
    Ok(RadialKSpace {
        n_spokes,
        samples_per_spoke: samples,
        spoke_angles: angles,
        data,
    })
}

/// FNV-1a over a byte string; identifies the architecture config inside
/// checkpoint manifests.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: [usize; 3],
    /// Offset of the value block in f32 elements; the Adam moment blocks
    /// follow immediately after it.
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    schema: String,
    config: ModelConfig,
    config_hash: String,
    step: usize,
    norm_stats: NormStats,
    params: Vec<ParamRecord>,
}

/// Writes parameters plus Adam state next to a JSON manifest.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    store: &ParamStore<T>,
    config: &ModelConfig,
    norm_stats: &NormStats,
) -> Result<()> {
    let mut records = Vec::new();
    let mut flat: Vec<T> = Vec::new();
    for (name, shape, value, m, v) in store.export() {
        records.push(ParamRecord {
            name,
            shape: [shape.c, shape.h, shape.w],
            offset: flat.len(),
        });
        flat.extend_from_slice(&value);
        flat.extend_from_slice(&m);
        flat.extend_from_slice(&v);
    }
    let config_json = serde_json::to_string(config)?;
    let manifest = CheckpointManifest {
        schema: CHECKPOINT_SCHEMA.into(),
        config: config.clone(),
        config_hash: format!("{:016x}", fnv1a(config_json.as_bytes())),
        step: store.step,
        norm_stats: *norm_stats,
        params: records,
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&manifest)?)?;
    write_payload(path, &flat)
}

/// Restores a checkpoint; the returned store carries optimizer state, so
/// training can resume.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(ParamStore<T>, ModelConfig, NormStats)> {
    let text = fs::read_to_string(sidecar_path(path))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.schema != CHECKPOINT_SCHEMA {
        return Err(TomoError::Schema(format!(
            "unknown checkpoint schema {:?}",
            manifest.schema
        )));
    }
    let config_json = serde_json::to_string(&manifest.config)?;
    let hash = format!("{:016x}", fnv1a(config_json.as_bytes()));
    if hash != manifest.config_hash {
        return Err(TomoError::Schema(format!(
            "config hash {} does not match manifest {}",
            hash, manifest.config_hash
        )));
    }
    let total: usize = manifest
        .params
        .iter()
        .map(|r| 3 * r.shape.iter().product::<usize>())
        .sum();
    let raw = read_payload(path, total)?;
    let mut store = ParamStore::new();
    for r in &manifest.params {
        let n: usize = r.shape.iter().product();
        if r.offset + 3 * n > raw.len() {
            return Err(TomoError::Schema(format!(
                "parameter {} overruns the payload",
                r.name
            )));
        }
        let take = |start: usize| -> Vec<T> {
            raw[start..start + n].iter().map(|&v| T::of(v as f64)).collect()
        };
        store.import(
            &r.name,
            Shape::new(r.shape[0], r.shape[1], r.shape[2]),
            take(r.offset),
            take(r.offset + n),
            take(r.offset + 2 * n),
        )?;
    }
    store.step = manifest.step;
    Ok((store, manifest.config, manifest.norm_stats))
}

/// Sidecar describing the window/level used when rendering a PGM.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderSidecar {
    pub schema: String,
    pub window_low: f64,
    pub window_high: f64,
    pub source: String,
}

/// 8-bit binary PGM with a fixed linear window, plus a sidecar recording it.
pub fn write_pgm<T: Real>(
    path: &Path,
    img: &Image2D<T>,
    low: f64,
    high: f64,
    source: &str,
) -> Result<()> {
    if !(high > low) {
        return Err(TomoError::Config("render window must have high > low".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", img.size, img.size).into_bytes();
    for v in &img.data {
        let t = ((v.as_f64() - low) / (high - low)).clamp(0.0, 1.0);
        out.push((t * 255.0).round() as u8);
    }
    fs::write(path, out)?;
    let sc = RenderSidecar {
        schema: "tomo-render-v1".into(),
        window_low: low,
        window_high: high,
        source: source.to_string(),
    };
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&sc)?)?;
    Ok(())
}
