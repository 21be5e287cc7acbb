//! The four reconstruction networks: an image-space UNet, a sinogram-space
//! residual UNet, the unrolled primal-dual network with convolutional primal
//! blocks, and its variant with a UNet primal block.
//!
//! All models share the normalization protocol: sinogram-space tensors are
//! z-normalized with statistics taken once from the sparse input, image-space
//! tensors are scaled by the corpus 99th-percentile, and the final output is
//! de-normalized exactly once. Counters record every protocol step per
//! forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Shape, Tape, TensorId};
use crate::error::{Result, TomoError};
use crate::geometry::{Geometry, SparsityPattern};
use crate::projectors::fbp;
use crate::real::Real;
use crate::sinogram_ops::{znorm_stats, NormStats};
use crate::types::{Image2D, Sinogram};

/// UNet layout: `depth` stride-2 stages below the input resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
}

/// Which block updates the image iterate in the unrolled scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimalBlockKind {
    ConvStack,
    Unet,
}

/// Unrolled primal-dual layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PDConfig {
    pub n_iterations: usize,
    pub primal_memory: usize,
    pub dual_memory: usize,
    /// Hidden width of the fully-convolutional blocks.
    pub conv_channels: usize,
    pub primal_block: PrimalBlockKind,
    /// Primal UNet layout (used when `primal_block` is `Unet`).
    pub unet_base_channels: usize,
    pub unet_depth: usize,
    /// Start the image iterate from zeros instead of the filtered
    /// back-projection of the input.
    pub zero_init: bool,
}

impl PDConfig {
    pub fn conv_default() -> Self {
        Self {
            n_iterations: 2,
            primal_memory: 5,
            dual_memory: 5,
            conv_channels: 32,
            primal_block: PrimalBlockKind::ConvStack,
            unet_base_channels: 32,
            unet_depth: 3,
            zero_init: false,
        }
    }

    pub fn unet_default() -> Self {
        Self {
            primal_block: PrimalBlockKind::Unet,
            ..Self::conv_default()
        }
    }
}

/// Serializable architecture description stored with checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    ReconUnet { unet: UNetConfig },
    SinoUnet { unet: UNetConfig },
    PdNet { pd: PDConfig },
    PdUnet { pd: PDConfig },
}

/// Normalization and block-application counts for one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Trace {
    pub stats_objects: usize,
    pub znorm_calls: usize,
    pub zdenorm_calls: usize,
    pub img_norm_calls: usize,
    pub img_denorm_calls: usize,
    pub dual_blocks: usize,
    pub primal_blocks: usize,
    pub fbp_calls: usize,
}

fn kaiming_uniform<T: Real>(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect()
}

fn register_conv<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    in_c: usize,
    out_c: usize,
    kernel: usize,
) {
    let fan_in = in_c * kernel * kernel;
    let n = out_c * fan_in;
    let w = kaiming_uniform(rng, fan_in, n);
    store.register(&format!("{name}.w"), Shape::new(out_c, fan_in, 1), || w);
    store.register(&format!("{name}.b"), Shape::new(out_c, 1, 1), || {
        vec![T::zero(); out_c]
    });
}

fn register_prelu<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) {
    store.register(&format!("{name}.a"), Shape::new(channels, 1, 1), || {
        vec![T::of(0.25); channels]
    });
}

fn conv_layer<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    name: &str,
    x: TensorId,
    kernel: usize,
    stride: usize,
) -> Result<TensorId> {
    let w = tape.param(store, &format!("{name}.w"))?;
    let b = tape.param(store, &format!("{name}.b"))?;
    tape.conv2d(x, w, b, kernel, stride)
}

fn prelu_layer<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    name: &str,
    x: TensorId,
) -> Result<TensorId> {
    let a = tape.param(store, &format!("{name}.a"))?;
    tape.prelu(x, a)
}

/// UNet parameter block reusable across models; `prefix` namespaces the
/// weights inside a store.
#[derive(Debug, Clone)]
struct UNetParams {
    prefix: String,
    cfg: UNetConfig,
}

impl UNetParams {
    fn width(&self, level: usize) -> usize {
        self.cfg.base_channels << level
    }

    fn register<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
        let p = &self.prefix;
        register_conv(store, rng, &format!("{p}.enc0"), self.cfg.in_channels, self.width(0), 3);
        for d in 1..=self.cfg.depth {
            register_conv(store, rng, &format!("{p}.down{d}"), self.width(d - 1), self.width(d), 3);
            register_conv(store, rng, &format!("{p}.feat{d}"), self.width(d), self.width(d), 3);
        }
        for d in (0..self.cfg.depth).rev() {
            // transposed conv halves the channel count while doubling space
            let fan_in = self.width(d + 1) * 4;
            let n = self.width(d) * fan_in;
            let w = kaiming_uniform(rng, fan_in, n);
            store.register(
                &format!("{p}.up{d}.w"),
                Shape::new(self.width(d), fan_in, 1),
                || w,
            );
            store.register(&format!("{p}.up{d}.b"), Shape::new(self.width(d), 1, 1), || {
                vec![T::zero(); self.width(d)]
            });
            register_conv(store, rng, &format!("{p}.dec{d}"), 2 * self.width(d), self.width(d), 3);
        }
        register_conv(store, rng, &format!("{p}.head"), self.width(0), self.cfg.out_channels, 1);
    }

    /// Runs the UNet; spatial dims must be divisible by `2^depth`.
    fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: TensorId,
    ) -> Result<TensorId> {
        let shape = tape.shape(x);
        let div = 1 << self.cfg.depth;
        if shape.h % div != 0 || shape.w % div != 0 {
            return Err(TomoError::Config(format!(
                "spatial size {}x{} not divisible by 2^{}",
                shape.h, shape.w, self.cfg.depth
            )));
        }
        let p = &self.prefix;
        let mut feats = Vec::with_capacity(self.cfg.depth);
        let mut cur = conv_layer(tape, store, &format!("{p}.enc0"), x, 3, 1)?;
        cur = tape.relu(cur);
        feats.push(cur);
        for d in 1..=self.cfg.depth {
            cur = conv_layer(tape, store, &format!("{p}.down{d}"), cur, 3, 2)?;
            cur = tape.relu(cur);
            cur = conv_layer(tape, store, &format!("{p}.feat{d}"), cur, 3, 1)?;
            cur = tape.relu(cur);
            if d < self.cfg.depth {
                feats.push(cur);
            }
        }
        for d in (0..self.cfg.depth).rev() {
            let w = tape.param(store, &format!("{p}.up{d}.w"))?;
            let b = tape.param(store, &format!("{p}.up{d}.b"))?;
            cur = tape.conv_transpose2(cur, w, b)?;
            cur = tape.concat_channels(cur, feats[d])?;
            cur = conv_layer(tape, store, &format!("{p}.dec{d}"), cur, 3, 1)?;
            cur = tape.relu(cur);
        }
        conv_layer(tape, store, &format!("{p}.head"), cur, 1, 1)
    }
}

/// Image-space UNet trained on filtered back-projections of sparse data.
pub struct ReconUNet<T: Real> {
    pub cfg: UNetConfig,
    pub store: ParamStore<T>,
    /// Corpus-level image scale for normalization.
    pub p99: f64,
    pub trace: Trace,
    unet: UNetParams,
}

impl<T: Real> ReconUNet<T> {
    pub fn new(cfg: UNetConfig, p99: f64, seed: u64) -> Self {
        let unet = UNetParams {
            prefix: "recon".into(),
            cfg,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        unet.register(&mut store, &mut rng);
        Self {
            cfg,
            store,
            p99,
            trace: Trace::default(),
            unet,
        }
    }

    /// Graph from a normalized input image tensor to the normalized output.
    pub fn forward_tape(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        self.unet.forward(tape, &self.store, x)
    }

    /// Full protocol: normalize, run, de-normalize.
    pub fn reconstruct(&mut self, img_fbp: &Image2D<T>) -> Result<Image2D<T>> {
        self.trace = Trace::default();
        let mut tape = Tape::new();
        let x = tape.leaf_image(img_fbp);
        let xn = tape.affine(x, 1.0 / self.p99, 0.0);
        self.trace.img_norm_calls += 1;
        let y = self.forward_tape(&mut tape, xn)?;
        let out = tape.affine(y, self.p99, 0.0);
        self.trace.img_denorm_calls += 1;
        Ok(Image2D {
            size: img_fbp.size,
            data: tape.value(out).to_vec(),
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig::ReconUnet { unet: self.cfg }
    }
}

/// Sinogram-space UNet refining bilinearly upsampled sinograms; the head
/// adds a residual onto its input.
pub struct SinoUNet<T: Real> {
    pub cfg: UNetConfig,
    pub store: ParamStore<T>,
    pub trace: Trace,
    unet: UNetParams,
}

impl<T: Real> SinoUNet<T> {
    pub fn new(cfg: UNetConfig, seed: u64) -> Self {
        let unet = UNetParams {
            prefix: "sino".into(),
            cfg,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        unet.register(&mut store, &mut rng);
        Self {
            cfg,
            store,
            trace: Trace::default(),
            unet,
        }
    }

    /// Graph over a z-normalized sinogram tensor; pads both axes to the
    /// UNet grid and crops back, then adds the input residually.
    pub fn forward_tape(&self, tape: &mut Tape<T>, x: TensorId) -> Result<TensorId> {
        let shape = tape.shape(x);
        let div = 1 << self.cfg.depth;
        let ph = shape.h.div_ceil(div) * div;
        let pw = shape.w.div_ceil(div) * div;
        let padded = tape.pad_to(x, ph, pw)?;
        let refined = self.unet.forward(tape, &self.store, padded)?;
        let cropped = tape.crop_to(refined, shape.h, shape.w)?;
        tape.add(x, cropped)
    }

    /// Full protocol: z-normalize with the input's own stats, refine,
    /// de-normalize.
    pub fn refine(&mut self, sino_up: &Sinogram<T>) -> Result<Sinogram<T>> {
        self.trace = Trace::default();
        let stats = znorm_stats(sino_up)?;
        self.trace.stats_objects += 1;
        let mut tape = Tape::new();
        let x = tape.leaf_sinogram(sino_up);
        let xz = tape.affine(x, 1.0 / stats.sigma_s, -stats.mu_s / stats.sigma_s);
        self.trace.znorm_calls += 1;
        let y = self.forward_tape(&mut tape, xz)?;
        let out = tape.affine(y, stats.sigma_s, stats.mu_s);
        self.trace.zdenorm_calls += 1;
        Ok(Sinogram {
            geometry: sino_up.geometry.clone(),
            data: tape.value(out).to_vec(),
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig::SinoUnet { unet: self.cfg }
    }
}

/// Unrolled primal-dual network; the primal block is either a small
/// fully-convolutional stack or a UNet, selected by the config.
pub struct PrimalDual<T: Real> {
    pub cfg: PDConfig,
    pub store: ParamStore<T>,
    pub p99: f64,
    pub trace: Trace,
    primal_unets: Vec<UNetParams>,
}

impl<T: Real> PrimalDual<T> {
    pub fn new(cfg: PDConfig, p99: f64, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut primal_unets = Vec::new();
        for i in 0..cfg.n_iterations {
            let dual_in = cfg.dual_memory + 2;
            register_conv(&mut store, &mut rng, &format!("it{i}.dual.c0"), dual_in, cfg.conv_channels, 3);
            register_prelu(&mut store, &format!("it{i}.dual.c0"), cfg.conv_channels);
            register_conv(&mut store, &mut rng, &format!("it{i}.dual.c1"), cfg.conv_channels, cfg.conv_channels, 3);
            register_prelu(&mut store, &format!("it{i}.dual.c1"), cfg.conv_channels);
            register_conv(&mut store, &mut rng, &format!("it{i}.dual.c2"), cfg.conv_channels, cfg.dual_memory, 3);
            let primal_in = cfg.primal_memory + 1;
            match cfg.primal_block {
                PrimalBlockKind::ConvStack => {
                    register_conv(&mut store, &mut rng, &format!("it{i}.primal.c0"), primal_in, cfg.conv_channels, 3);
                    register_prelu(&mut store, &format!("it{i}.primal.c0"), cfg.conv_channels);
                    register_conv(&mut store, &mut rng, &format!("it{i}.primal.c1"), cfg.conv_channels, cfg.conv_channels, 3);
                    register_prelu(&mut store, &format!("it{i}.primal.c1"), cfg.conv_channels);
                    register_conv(&mut store, &mut rng, &format!("it{i}.primal.c2"), cfg.conv_channels, cfg.primal_memory, 3);
                }
                PrimalBlockKind::Unet => {
                    let unet = UNetParams {
                        prefix: format!("it{i}.primal.unet"),
                        cfg: UNetConfig {
                            in_channels: primal_in,
                            out_channels: cfg.primal_memory,
                            base_channels: cfg.unet_base_channels,
                            depth: cfg.unet_depth,
                        },
                    };
                    unet.register(&mut store, &mut rng);
                    primal_unets.push(unet);
                }
            }
        }
        Self {
            cfg,
            store,
            p99,
            trace: Trace::default(),
            primal_unets,
        }
    }

    fn dual_block(&self, tape: &mut Tape<T>, i: usize, x: TensorId) -> Result<TensorId> {
        let mut cur = conv_layer(tape, &self.store, &format!("it{i}.dual.c0"), x, 3, 1)?;
        cur = prelu_layer(tape, &self.store, &format!("it{i}.dual.c0"), cur)?;
        cur = conv_layer(tape, &self.store, &format!("it{i}.dual.c1"), cur, 3, 1)?;
        cur = prelu_layer(tape, &self.store, &format!("it{i}.dual.c1"), cur)?;
        conv_layer(tape, &self.store, &format!("it{i}.dual.c2"), cur, 3, 1)
    }

    fn primal_block(&self, tape: &mut Tape<T>, i: usize, x: TensorId) -> Result<TensorId> {
        match self.cfg.primal_block {
            PrimalBlockKind::ConvStack => {
                let mut cur = conv_layer(tape, &self.store, &format!("it{i}.primal.c0"), x, 3, 1)?;
                cur = prelu_layer(tape, &self.store, &format!("it{i}.primal.c0"), cur)?;
                cur = conv_layer(tape, &self.store, &format!("it{i}.primal.c1"), cur, 3, 1)?;
                cur = prelu_layer(tape, &self.store, &format!("it{i}.primal.c1"), cur)?;
                conv_layer(tape, &self.store, &format!("it{i}.primal.c2"), cur, 3, 1)
            }
            PrimalBlockKind::Unet => self.primal_unets[i].forward(tape, &self.store, x),
        }
    }

    fn broadcast_channels(
        &self,
        tape: &mut Tape<T>,
        x: TensorId,
        channels: usize,
    ) -> Result<TensorId> {
        let mut cur = x;
        for _ in 1..channels {
            cur = tape.concat_channels(cur, x)?;
        }
        Ok(cur)
    }

    /// Builds the unrolled graph. Returns the normalized output image
    /// tensor plus the single stats object driving the protocol.
    pub fn forward_tape(
        &mut self,
        tape: &mut Tape<T>,
        sino_sparse: &Sinogram<T>,
        pattern: &SparsityPattern,
        geom_full: &Geometry,
        out_size: usize,
    ) -> Result<(TensorId, NormStats)> {
        self.trace = Trace::default();
        if pattern.kept_indices.len() != sino_sparse.n_angles() {
            return Err(TomoError::Dimension(format!(
                "pattern keeps {} angles, sinogram has {}",
                pattern.kept_indices.len(),
                sino_sparse.n_angles()
            )));
        }
        if sino_sparse.n_detectors() != geom_full.n_detectors() {
            return Err(TomoError::Dimension(
                "sparse and full geometries disagree on detectors".into(),
            ));
        }
        let stats = znorm_stats(sino_sparse)?;
        self.trace.stats_objects += 1;

        // image iterate start: filtered back-projection of the sparse input
        let f0_img = if self.cfg.zero_init {
            Image2D::zeros(out_size)
        } else {
            self.trace.fbp_calls += 1;
            fbp(sino_sparse, &sino_sparse.geometry, out_size)?
        };
        let f0 = tape.leaf_image(&f0_img);
        let f0 = tape.affine(f0, 1.0 / self.p99, 0.0);
        self.trace.img_norm_calls += 1;
        let mut f = self.broadcast_channels(tape, f0, self.cfg.primal_memory)?;

        // measured data on the full angle grid: z-normalize the sparse rows
        // once, scatter them, leave missing rows at zero
        let mut g_full = Sinogram::zeros(geom_full.clone());
        for (j, &src) in pattern.kept_indices.iter().enumerate() {
            let row = sino_sparse.row(j);
            let dst = g_full.row_mut(src);
            for (d, &v) in row.iter().enumerate() {
                dst[d] = (v - T::of(stats.mu_s)) / T::of(stats.sigma_s);
            }
        }
        self.trace.znorm_calls += 1;
        let g = tape.leaf_sinogram(&g_full);

        let zero_h = Sinogram::zeros(geom_full.clone());
        let h0 = tape.leaf_sinogram(&zero_h);
        let mut h = self.broadcast_channels(tape, h0, self.cfg.dual_memory)?;

        // geometric weight folding the adjoint onto the image scale
        let bp_scale = geom_full.angle_step().abs() * 0.5;

        for i in 0..self.cfg.n_iterations {
            // dual update from (h, P f_2, g)
            let f2 = tape.slice_channels(f, 1.min(self.cfg.primal_memory - 1), 1)?;
            let f2_img = tape.affine(f2, self.p99, 0.0);
            self.trace.img_denorm_calls += 1;
            let pf = tape.project(f2_img, geom_full)?;
            let pf_z = tape.affine(pf, 1.0 / stats.sigma_s, -stats.mu_s / stats.sigma_s);
            self.trace.znorm_calls += 1;
            let din = tape.concat_channels(h, pf_z)?;
            let din = tape.concat_channels(din, g)?;
            let dh = self.dual_block(tape, i, din)?;
            self.trace.dual_blocks += 1;
            h = tape.add(h, dh)?;

            // primal update from (f, P^T h_1)
            let h1 = tape.slice_channels(h, 0, 1)?;
            let bp = tape.backproject(h1, geom_full, out_size)?;
            let bp_n = tape.affine(bp, bp_scale / self.p99, 0.0);
            self.trace.img_norm_calls += 1;
            let pin = tape.concat_channels(f, bp_n)?;
            let df = self.primal_block(tape, i, pin)?;
            self.trace.primal_blocks += 1;
            f = tape.add(f, df)?;
        }
        let out = tape.slice_channels(f, 0, 1)?;
        Ok((out, stats))
    }

    /// Full protocol: run the graph and de-normalize the output once.
    pub fn reconstruct(
        &mut self,
        sino_sparse: &Sinogram<T>,
        pattern: &SparsityPattern,
        geom_full: &Geometry,
        out_size: usize,
    ) -> Result<Image2D<T>> {
        let mut tape = Tape::new();
        let (out, _) = self.forward_tape(&mut tape, sino_sparse, pattern, geom_full, out_size)?;
        let denormed = tape.affine(out, self.p99, 0.0);
        self.trace.img_denorm_calls += 1;
        Ok(Image2D {
            size: out_size,
            data: tape.value(denormed).to_vec(),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self.cfg.primal_block {
            PrimalBlockKind::ConvStack => ModelConfig::PdNet { pd: self.cfg },
            PrimalBlockKind::Unet => ModelConfig::PdUnet { pd: self.cfg },
        }
    }
}
