//! Ellipse-based phantom generation: the classic head phantom plus seeded
//! random ellipse phantoms used as the desk-scale training corpus.
//!
//! Ellipse boundaries are rendered with an analytic soft edge about one pixel
//! wide. Band-limiting the edges keeps the Fourier-domain pipelines (radial
//! k-space, slice-theorem checks) comparable to the ray-driven projector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::real::Real;
use crate::types::Image2D;

/// One ellipse in normalized coordinates (image spans [-1, 1]).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Ellipse {
    pub intensity: f64,
    pub semi_a: f64,
    pub semi_b: f64,
    pub center_x: f64,
    pub center_y: f64,
    pub rotation: f64,
}

/// Seeded random phantom description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub n_ellipses: usize,
    pub intensity_min: f64,
    pub intensity_max: f64,
    pub size: usize,
}

impl PhantomSpec {
    pub fn new(seed: u64, size: usize) -> Self {
        Self {
            seed,
            n_ellipses: 6,
            intensity_min: 0.1,
            intensity_max: 0.5,
            size,
        }
    }
}

/// Standard ten-ellipse head phantom table (contrast-enhanced variant).
pub fn head_phantom_ellipses() -> Vec<Ellipse> {
    let e = |intensity: f64, a: f64, b: f64, x: f64, y: f64, deg: f64| Ellipse {
        intensity,
        semi_a: a,
        semi_b: b,
        center_x: x,
        center_y: y,
        rotation: deg.to_radians(),
    };
    vec![
        e(1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
        e(-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
        e(-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
        e(-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
        e(0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
        e(0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
        e(0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
        e(0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
        e(0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
        e(0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
    ]
}

/// Renders a list of ellipses onto a `size`-pixel grid with soft edges.
pub fn render_ellipses<T: Real>(ellipses: &[Ellipse], size: usize) -> Image2D<T> {
    let mut img: Image2D<T> = Image2D::zeros(size);
    let scale = 2.0 / size as f64; // pixel width in normalized units
    for e in ellipses {
        let (sin_p, cos_p) = e.rotation.sin_cos();
        // soft-edge half width: about one pixel measured along the steeper axis
        let w = scale / e.semi_a.min(e.semi_b);
        for r in 0..size {
            let y = img.coord(r) * scale;
            for c in 0..size {
                let x = img.coord(c) * scale;
                let dx = x - e.center_x;
                let dy = y - e.center_y;
                let u = (dx * cos_p + dy * sin_p) / e.semi_a;
                let v = (-dx * sin_p + dy * cos_p) / e.semi_b;
                let d = (u * u + v * v).sqrt();
                let coverage = (0.5 + (1.0 - d) / w * 0.5).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let old = img.get(r, c).as_f64();
                    img.set(r, c, T::of(old + e.intensity * coverage));
                }
            }
        }
    }
    img
}

/// The classic head phantom at the requested resolution, values in [0, 1].
pub fn shepp_logan<T: Real>(size: usize) -> Image2D<T> {
    render_ellipses(&head_phantom_ellipses(), size)
}

/// Random ellipse set for `spec`: an outer body ellipse plus `n_ellipses`
/// interior features, deterministic in the seed.
pub fn phantom_ellipses(spec: &PhantomSpec) -> Vec<Ellipse> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.n_ellipses + 1);
    if spec.n_ellipses == 0 {
        return out;
    }
    out.push(Ellipse {
        intensity: 0.25,
        semi_a: rng.gen_range(0.75..0.9),
        semi_b: rng.gen_range(0.75..0.9),
        center_x: rng.gen_range(-0.03..0.03),
        center_y: rng.gen_range(-0.03..0.03),
        rotation: rng.gen_range(0.0..std::f64::consts::PI),
    });
    for _ in 0..spec.n_ellipses {
        let a: f64 = rng.gen_range(0.06..0.45);
        let b: f64 = rng.gen_range(0.06..0.45);
        let reach = 0.68 - a.max(b); // keep features inside the body
        let radius = rng.gen_range(0.0..reach.max(0.01));
        let phi = rng.gen_range(0.0..std::f64::consts::TAU);
        out.push(Ellipse {
            intensity: rng.gen_range(spec.intensity_min..spec.intensity_max),
            semi_a: a,
            semi_b: b,
            center_x: radius * phi.cos(),
            center_y: radius * phi.sin(),
            rotation: rng.gen_range(0.0..std::f64::consts::PI),
        });
    }
    out
}

/// Deterministic phantom for `spec`, clamped to [0, 1].
pub fn generate_phantom<T: Real>(spec: &PhantomSpec) -> Image2D<T> {
    let mut img = render_ellipses::<T>(&phantom_ellipses(spec), spec.size);
    for v in img.data.iter_mut() {
        *v = v.max(T::zero()).min(T::one());
    }
    img
}
