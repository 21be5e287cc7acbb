//! Dataset assembly and training: phantom corpus generation, per-task
//! example construction (fan CT, parallel CT, radial MR), the gradient
//! accumulation training loop with validation-based checkpoint selection,
//! and the synthetic needle experiment.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::error::{Result, TomoError};
use crate::fourier::{image_to_radial_kspace, sparsify_spokes, spokes_to_sinogram};
use crate::geometry::{
    fan_for_size, parallel_for_size, sparsify_indices, Geometry, SparsityPattern,
};
use crate::models::{PrimalDual, ReconUNet, SinoUNet};
use crate::phantom::PhantomSpec;
use crate::projectors::{fbp, forward_project};
use crate::real::Real;
use crate::sinogram_ops::{percentile, sparsify, upsample_bilinear, znorm_stats};
use crate::types::{Image2D, Sinogram};

/// Acquisition task being simulated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    CtFan,
    CtParallel,
    MriRadial,
}

impl std::str::FromStr for Task {
    type Err = TomoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ct-fan" => Ok(Task::CtFan),
            "ct-parallel" => Ok(Task::CtParallel),
            "mri-radial" => Ok(Task::MriRadial),
            other => Err(TomoError::Config(format!("unknown task {other:?}"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Task::CtFan => "ct-fan",
            Task::CtParallel => "ct-parallel",
            Task::MriRadial => "mri-radial",
        };
        f.write_str(s)
    }
}

/// Full-grid acquisition geometry for a task at a given image size. For the
/// radial MR task the full spoke count is twice the image resolution.
pub fn task_geometry(task: Task, size: usize, n_angles: Option<usize>) -> Geometry {
    match task {
        Task::CtFan => Geometry::Fan(fan_for_size(size, n_angles.unwrap_or(360))),
        Task::CtParallel => Geometry::Parallel(parallel_for_size(size, n_angles.unwrap_or(180))),
        Task::MriRadial => {
            let n_spokes = n_angles.unwrap_or(2 * size);
            let det = parallel_for_size(size, n_spokes).n_detectors;
            let mut g = parallel_for_size(size, n_spokes);
            g.angle_step = std::f64::consts::PI / n_spokes as f64;
            g.n_detectors = det;
            Geometry::Parallel(g)
        }
    }
}

/// One training/evaluation item: every representation a model might need.
#[derive(Debug, Clone)]
pub struct Example<T> {
    pub image: Image2D<T>,
    pub geom_full: Geometry,
    pub pattern: SparsityPattern,
    pub full_sino: Sinogram<T>,
    pub sparse_sino: Sinogram<T>,
    pub upsampled_sino: Sinogram<T>,
    /// Filtered back-projection of the sparse sinogram.
    pub sparse_fbp: Image2D<T>,
}

/// Simulates one example: CT tasks project with rays, the MR task goes
/// through radial k-space and the Fourier-slice conversion.
pub fn make_example<T: Real>(
    img: &Image2D<T>,
    task: Task,
    factor: usize,
    n_angles: Option<usize>,
) -> Result<Example<T>> {
    let geom_full = task_geometry(task, img.size, n_angles);
    let n_full = geom_full.n_angles();
    let pattern = sparsify_indices(n_full, factor)?;
    let (full_sino, sparse_sino) = match task {
        Task::CtFan | Task::CtParallel => {
            let full = forward_project(img, &geom_full);
            let sparse = sparsify(&full, &pattern)?;
            (full, sparse)
        }
        Task::MriRadial => {
            let k = image_to_radial_kspace(img, n_full, 2 * img.size);
            let n_det = geom_full.n_detectors();
            let full = spokes_to_sinogram(&k, n_det)?;
            let k_sparse = sparsify_spokes(&k, &pattern)?;
            let sparse = spokes_to_sinogram(&k_sparse, n_det)?;
            (full, sparse)
        }
    };
    let upsampled_sino = upsample_bilinear(&sparse_sino, n_full)?;
    let sparse_fbp = fbp(&sparse_sino, &sparse_sino.geometry, img.size)?;
    Ok(Example {
        image: img.clone(),
        geom_full,
        pattern,
        full_sino,
        sparse_sino,
        upsampled_sino,
        sparse_fbp,
    })
}

/// Classical baseline: upsample the sparse sinogram bilinearly, then FBP.
pub fn bilinear_fbp<T: Real>(ex: &Example<T>) -> Result<Image2D<T>> {
    fbp(&ex.upsampled_sino, &ex.geom_full, ex.image.size)
}

/// Deterministic phantom corpus with a train/validation/test split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Corpus {
    pub seed: u64,
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub specs: Vec<PhantomSpec>,
}

pub fn make_corpus(seed: u64, size: usize, n_train: usize, n_val: usize, n_test: usize) -> Corpus {
    let specs = (0..n_train + n_val + n_test)
        .map(|i| PhantomSpec::new(seed.wrapping_add(i as u64), size))
        .collect();
    Corpus {
        seed,
        size,
        n_train,
        n_val,
        n_test,
        specs,
    }
}

impl Corpus {
    pub fn train_specs(&self) -> &[PhantomSpec] {
        &self.specs[..self.n_train]
    }

    pub fn val_specs(&self) -> &[PhantomSpec] {
        &self.specs[self.n_train..self.n_train + self.n_val]
    }

    pub fn test_specs(&self) -> &[PhantomSpec] {
        &self.specs[self.n_train + self.n_val..]
    }

    pub fn manifest_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Corpus-level image normalization scale: the 99th percentile of all
/// training and validation pixel values.
pub fn corpus_p99<T: Real>(images: &[Image2D<T>]) -> Result<f64> {
    let values: Vec<f64> = images
        .iter()
        .flat_map(|img| img.data.iter().map(|v| v.as_f64()))
        .collect();
    let p = percentile(&values, 99.0)?;
    if p <= 0.0 {
        return Err(TomoError::DegenerateInput(
            "corpus 99th percentile is not positive".into(),
        ));
    }
    Ok(p)
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub effective_batch: usize,
    pub actual_batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub sparsity: usize,
    pub task: Task,
}

impl TrainConfig {
    pub fn defaults(task: Task, sparsity: usize) -> Self {
        Self {
            epochs: 30,
            effective_batch: 32,
            actual_batch: 1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            sparsity,
            task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.actual_batch == 0 || self.effective_batch % self.actual_batch != 0 {
            return Err(TomoError::Config(format!(
                "effective batch {} not divisible by actual batch {}",
                self.effective_batch, self.actual_batch
            )));
        }
        Ok(())
    }
}

/// A trainable model plus the glue mapping examples onto its inputs.
pub enum Model<T: Real> {
    Recon(ReconUNet<T>),
    Sino(SinoUNet<T>),
    Pd(PrimalDual<T>),
}

impl<T: Real> Model<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Model::Recon(_) => "recon-unet",
            Model::Sino(_) => "sino-unet",
            Model::Pd(m) => match m.config() {
                crate::models::ModelConfig::PdNet { .. } => "pd-net",
                _ => "pd-unet",
            },
        }
    }

    pub fn store(&self) -> &crate::autodiff::ParamStore<T> {
        match self {
            Model::Recon(m) => &m.store,
            Model::Sino(m) => &m.store,
            Model::Pd(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut crate::autodiff::ParamStore<T> {
        match self {
            Model::Recon(m) => &mut m.store,
            Model::Sino(m) => &mut m.store,
            Model::Pd(m) => &mut m.store,
        }
    }

    pub fn config(&self) -> crate::models::ModelConfig {
        match self {
            Model::Recon(m) => m.config(),
            Model::Sino(m) => m.config(),
            Model::Pd(m) => m.config(),
        }
    }

    /// Appends the normalized-space training loss for one example.
    pub fn loss_node(&mut self, tape: &mut Tape<T>, ex: &Example<T>) -> Result<TensorId> {
        match self {
            Model::Recon(m) => {
                let x = tape.leaf_image(&ex.sparse_fbp);
                let xn = tape.affine(x, 1.0 / m.p99, 0.0);
                let y = m.forward_tape(tape, xn)?;
                let t = tape.leaf_image(&ex.image);
                let tn = tape.affine(t, 1.0 / m.p99, 0.0);
                tape.l1_loss(y, tn)
            }
            Model::Sino(m) => {
                let stats = znorm_stats(&ex.upsampled_sino)?;
                let x = tape.leaf_sinogram(&ex.upsampled_sino);
                let xz = tape.affine(x, 1.0 / stats.sigma_s, -stats.mu_s / stats.sigma_s);
                let y = m.forward_tape(tape, xz)?;
                let t = tape.leaf_sinogram(&ex.full_sino);
                let tz = tape.affine(t, 1.0 / stats.sigma_s, -stats.mu_s / stats.sigma_s);
                tape.l1_loss(y, tz)
            }
            Model::Pd(m) => {
                let (y, _) = m.forward_tape(
                    tape,
                    &ex.sparse_sino,
                    &ex.pattern,
                    &ex.geom_full,
                    ex.image.size,
                )?;
                let t = tape.leaf_image(&ex.image);
                let tn = tape.affine(t, 1.0 / m.p99, 0.0);
                tape.l1_loss(y, tn)
            }
        }
    }

    /// Loss value only (no backward), for validation.
    pub fn eval_loss(&mut self, ex: &Example<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.loss_node(&mut tape, ex)?;
        Ok(tape.value(l)[0].as_f64())
    }

    /// End-to-end reconstruction to image space for evaluation.
    pub fn reconstruct(&mut self, ex: &Example<T>) -> Result<Image2D<T>> {
        match self {
            Model::Recon(m) => m.reconstruct(&ex.sparse_fbp),
            Model::Sino(m) => {
                let refined = m.refine(&ex.upsampled_sino)?;
                fbp(&refined, &ex.geom_full, ex.image.size)
            }
            Model::Pd(m) => m.reconstruct(&ex.sparse_sino, &ex.pattern, &ex.geom_full, ex.image.size),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_l1: f64,
    pub val_l1: f64,
    pub wall_secs: f64,
}

/// Training history plus the validation-selected parameters.
pub struct TrainOutcome<T> {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_l1: f64,
    /// Per-optimizer-step mean training loss, in step order.
    pub step_losses: Vec<f64>,
    /// Parameter values at the best epoch, name to payload.
    pub best_params: Vec<(String, Vec<T>)>,
}

pub fn training_log_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_l1,val_l1,wall_secs\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.train_l1, r.val_l1, r.wall_secs
        ));
    }
    out
}

/// Epoch loop with gradient accumulation: each optimizer step sees the mean
/// loss of `effective_batch` examples, accumulated over
/// `effective_batch / actual_batch` backward passes. Validation after every
/// epoch selects the reported parameters.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[Example<T>],
    val_set: &[Example<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TomoError::DegenerateInput("empty training set".into()));
    }
    let accum_groups = cfg.effective_batch / cfg.actual_batch;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(usize, f64, Vec<(String, Vec<T>)>)> = None;

    model.store_mut().zero_grads();
    for epoch in 0..cfg.epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_count = 0usize;
        let mut group_in_step = 0usize;
        let mut step_loss = 0.0;
        for chunk in order.chunks(cfg.actual_batch) {
            // one tape per actual batch; losses scaled so a full effective
            // batch sums to the mean example loss
            let mut tape = Tape::new();
            let mut combined: Option<TensorId> = None;
            for &idx in chunk {
                let l = model.loss_node(&mut tape, &train_set[idx])?;
                let raw = tape.value(l)[0].as_f64();
                if !raw.is_finite() {
                    return Err(TomoError::NonFinite(format!(
                        "training loss diverged at epoch {epoch}"
                    )));
                }
                epoch_loss += raw;
                step_loss += raw;
                epoch_count += 1;
                let scaled = tape.affine(l, 1.0 / cfg.effective_batch as f64, 0.0);
                combined = Some(match combined {
                    None => scaled,
                    Some(c) => tape.add(c, scaled)?,
                });
            }
            let loss = combined.expect("nonempty chunk");
            tape.backward(loss)?;
            model.store_mut().accumulate_from(&tape);
            group_in_step += 1;
            if group_in_step == accum_groups {
                model
                    .store_mut()
                    .adam_step(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, true);
                step_losses.push(step_loss / (accum_groups * cfg.actual_batch) as f64);
                group_in_step = 0;
                step_loss = 0.0;
            }
        }
        if group_in_step > 0 {
            // leftover partial step at epoch end
            model
                .store_mut()
                .adam_step(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, true);
            step_losses.push(step_loss / (group_in_step * cfg.actual_batch) as f64);
        }
        let train_l1 = epoch_loss / epoch_count.max(1) as f64;
        let mut val_l1 = 0.0;
        for ex in val_set {
            val_l1 += model.eval_loss(ex)?;
        }
        val_l1 /= val_set.len().max(1) as f64;
        if !val_l1.is_finite() {
            return Err(TomoError::NonFinite(format!(
                "validation loss diverged at epoch {epoch}"
            )));
        }
        let improved = best.as_ref().map_or(true, |(_, v, _)| val_l1 < *v);
        if improved {
            let snapshot = model
                .store()
                .export()
                .into_iter()
                .map(|(n, _, v, _, _)| (n, v))
                .collect();
            best = Some((epoch, val_l1, snapshot));
        }
        history.push(EpochRecord {
            epoch,
            train_l1,
            val_l1,
            wall_secs: t0.elapsed().as_secs_f64(),
        });
    }
    let (best_epoch, best_val_l1, best_params) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_l1,
        step_losses,
        best_params,
    })
}

/// Instantiates a model for the given architecture description.
pub fn build_model<T: Real>(config: &crate::models::ModelConfig, p99: f64, seed: u64) -> Model<T> {
    use crate::models::ModelConfig;
    match config {
        ModelConfig::ReconUnet { unet } => Model::Recon(ReconUNet::new(*unet, p99, seed)),
        ModelConfig::SinoUnet { unet } => Model::Sino(SinoUNet::new(*unet, seed)),
        ModelConfig::PdNet { pd } | ModelConfig::PdUnet { pd } => {
            Model::Pd(PrimalDual::new(*pd, p99, seed))
        }
    }
}

/// Rebuilds a model, including optimizer state, from a checkpoint file.
pub fn model_from_checkpoint<T: Real>(
    path: &std::path::Path,
) -> Result<(Model<T>, crate::sinogram_ops::NormStats)> {
    let (store, config, stats) = crate::io::load_checkpoint(path)?;
    let mut model = build_model(&config, stats.p99, 0);
    *model.store_mut() = store;
    Ok((model, stats))
}

/// Copies a best-epoch snapshot back into the model.
pub fn restore_params<T: Real>(model: &mut Model<T>, params: &[(String, Vec<T>)]) -> Result<()> {
    for (name, value) in params {
        model.store_mut().set_value(name, value.clone())?;
    }
    Ok(())
}

/// Synthetic rigid needle: a line segment of the given width and
/// attenuation added onto the image.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NeedleSpec {
    /// Tip position in pixel coordinates.
    pub tip_row: f64,
    pub tip_col: f64,
    /// Direction from the tip toward the shaft, radians.
    pub angle: f64,
    pub length: f64,
    pub width: f64,
    /// Added attenuation; default twice the soft-tissue maximum.
    pub attenuation: f64,
}

impl NeedleSpec {
    pub fn default_for(size: usize) -> Self {
        Self {
            tip_row: size as f64 * 0.45,
            tip_col: size as f64 * 0.55,
            angle: 0.6,
            length: size as f64 * 0.3,
            width: 1.5,
            attenuation: 2.0,
        }
    }

    /// Integer ROI center for metric patches.
    pub fn roi_center(&self) -> (usize, usize) {
        (self.tip_row.round() as usize, self.tip_col.round() as usize)
    }
}

/// Adds the needle attenuation onto a copy of the image.
pub fn insert_needle<T: Real>(img: &Image2D<T>, spec: &NeedleSpec) -> Result<Image2D<T>> {
    let size = img.size as f64;
    let (dr, dc) = (spec.angle.sin(), spec.angle.cos());
    let (er, ec) = (
        spec.tip_row + dr * spec.length,
        spec.tip_col + dc * spec.length,
    );
    for (r, c) in [(spec.tip_row, spec.tip_col), (er, ec)] {
        if r < 0.0 || c < 0.0 || r > size - 1.0 || c > size - 1.0 {
            return Err(TomoError::Placement(format!(
                "needle endpoint ({r:.1}, {c:.1}) outside {0}x{0} image",
                img.size
            )));
        }
    }
    let mut out = img.clone();
    let half = spec.width / 2.0;
    for r in 0..img.size {
        for c in 0..img.size {
            // distance from the pixel center to the segment
            let (pr, pc) = (r as f64, c as f64);
            let (vr, vc) = (er - spec.tip_row, ec - spec.tip_col);
            let len2 = vr * vr + vc * vc;
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((pr - spec.tip_row) * vr + (pc - spec.tip_col) * vc) / len2).clamp(0.0, 1.0)
            };
            let (qr, qc) = (spec.tip_row + t * vr, spec.tip_col + t * vc);
            let d = ((pr - qr) * (pr - qr) + (pc - qc) * (pc - qc)).sqrt();
            // soft edge one pixel wide
            let cover = (half + 0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                let old = out.get(r, c);
                out.set(r, c, old + T::of(spec.attenuation * cover));
            }
        }
    }
    Ok(out)
}
