//! `tomo`: experiment driver for the reconstruction toolkit.
//!
//! Subcommands cover the full loop: simulate a phantom corpus, reconstruct
//! with classical or learned methods, train the networks, score predictions,
//! and benchmark inference speed. Every run writes a single manifest.json
//! into its output directory; reruns with the same arguments reproduce the
//! outputs bitwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tomo_core::error::{Result, TomoError};
use tomo_core::fourier::{adjoint_nufft_recon, image_to_radial_kspace, sparsify_spokes};
use tomo_core::io;
use tomo_core::metrics::{self, MetricsReport};
use tomo_core::models::{ModelConfig, PDConfig, UNetConfig};
use tomo_core::phantom::{generate_phantom, PhantomSpec};
use tomo_core::pipeline::{
    bilinear_fbp, build_model, corpus_p99, make_example, model_from_checkpoint, restore_params,
    train, training_log_csv, Example, Model, Task, TrainConfig,
};
use tomo_core::sinogram_ops::{percentile, NormStats};
use tomo_core::types::Image2D;

/// Production floating-point width.
type R = f32;

#[derive(Parser)]
#[command(name = "tomo", version, about = "Sparse-view CT/MR reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom corpus with full and sparse sinograms.
    Simulate(SimulateArgs),
    /// Reconstruct simulated inputs with a classical or learned method.
    Reconstruct(ReconstructArgs),
    /// Train one of the four network models.
    Train(TrainArgs),
    /// Score predictions against ground truth and run rank tests.
    Evaluate(EvaluateArgs),
    /// Time batched inference across projection counts.
    Bench(BenchArgs),
}

#[derive(Args, Serialize, Clone)]
struct CommonSim {
    /// Acquisition task: ct-fan, ct-parallel, or mri-radial.
    #[arg(long, default_value = "ct-parallel")]
    task: String,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Keep every k-th projection angle.
    #[arg(long, default_value_t = 8)]
    sparsity: usize,
    /// Override the full projection/spoke count.
    #[arg(long)]
    n_angles: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker cap; 1 guarantees bitwise reproducibility.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Serialize, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonSim,
    /// Number of phantoms.
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct ReconstructArgs {
    #[command(flatten)]
    common: CommonSim,
    /// fbp, bilinear-fbp, nufft-adjoint, sino-unet, recon-unet, pdnet, pdunet.
    #[arg(long)]
    method: String,
    /// Directory produced by `tomo simulate`.
    #[arg(long)]
    input: PathBuf,
    /// Required for learned methods.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonSim,
    /// recon-unet, sino-unet, pdnet, or pdunet.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    train_count: usize,
    #[arg(long, default_value_t = 4)]
    val_count: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    effective_batch: usize,
    #[arg(long, default_value_t = 1)]
    actual_batch: usize,
    /// Channel width of the convolutional blocks.
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// UNet depth (number of downsampling levels).
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// Unrolled iteration count for the primal-dual models.
    #[arg(long, default_value_t = 2)]
    iterations: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct EvaluateArgs {
    /// Ground-truth directory (img_*.bin from `tomo simulate`).
    #[arg(long)]
    gt: PathBuf,
    /// Prediction set as name=dir; repeatable.
    #[arg(long = "pred", required = true)]
    preds: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct BenchArgs {
    /// Comma-separated model names.
    #[arg(long, default_value = "pdnet,pdunet")]
    models: String,
    /// Comma-separated projection counts.
    #[arg(long, default_value = "45,90,180,360")]
    projections: String,
    #[arg(long, default_value = "ct-fan")]
    task: String,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    iterations: usize,
    /// Timed repetitions per configuration.
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: serde_json::Value,
    seed: u64,
    threads: usize,
    inputs: Vec<String>,
    out_dir: String,
    code_version: String,
    wall_secs: f64,
}

fn write_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    threads: usize,
    inputs: Vec<String>,
    wall_secs: f64,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        config,
        seed,
        threads,
        inputs,
        out_dir: out.display().to_string(),
        code_version: env!("CARGO_PKG_VERSION").into(),
        wall_secs,
    };
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(TomoError::from)?,
    )?;
    Ok(())
}

fn check_threads(threads: usize) -> Result<()> {
    if threads == 0 {
        return Err(TomoError::Config("--threads must be at least 1".into()));
    }
    Ok(())
}

fn parse_task(s: &str) -> Result<Task> {
    s.parse()
}

/// Architecture for a model name at the requested width/depth.
fn model_config(name: &str, width: usize, depth: usize, iterations: usize) -> Result<ModelConfig> {
    let unet = UNetConfig {
        in_channels: 1,
        out_channels: 1,
        base_channels: width,
        depth,
    };
    Ok(match name {
        "recon-unet" => ModelConfig::ReconUnet { unet },
        "sino-unet" => ModelConfig::SinoUnet { unet },
        "pdnet" => {
            let mut pd = PDConfig::conv_default();
            pd.conv_channels = width;
            pd.n_iterations = iterations;
            ModelConfig::PdNet { pd }
        }
        "pdunet" => {
            let mut pd = PDConfig::unet_default();
            pd.conv_channels = width;
            pd.unet_base_channels = width;
            pd.unet_depth = depth;
            pd.n_iterations = iterations;
            ModelConfig::PdUnet { pd }
        }
        other => {
            return Err(TomoError::Config(format!(
                "unknown model {other:?} (expected recon-unet, sino-unet, pdnet, pdunet)"
            )))
        }
    })
}

fn expected_model_name(method: &str) -> &'static str {
    match method {
        "pdnet" => "pd-net",
        "pdunet" => "pd-unet",
        "recon-unet" => "recon-unet",
        _ => "sino-unet",
    }
}

/// Phantom images for seeds seed..seed+count.
fn corpus_images(seed: u64, size: usize, count: usize) -> Vec<Image2D<R>> {
    (0..count)
        .map(|i| generate_phantom(&PhantomSpec::new(seed.wrapping_add(i as u64), size)))
        .collect()
}

fn indexed_files(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with(prefix) && name.ends_with(".bin") {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(TomoError::Config(format!(
            "no {prefix}*.bin files in {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    check_threads(args.common.threads)?;
    let task = parse_task(&args.common.task)?;
    let t0 = Instant::now();
    fs::create_dir_all(&args.out)?;
    for i in 0..args.count {
        let img = generate_phantom(&PhantomSpec::new(
            args.common.seed.wrapping_add(i as u64),
            args.common.size,
        ));
        let ex: Example<R> = make_example(&img, task, args.common.sparsity, args.common.n_angles)?;
        io::save_image(&args.out.join(format!("img_{i:04}.bin")), &img)?;
        io::save_sinogram(&args.out.join(format!("full_{i:04}.bin")), &ex.full_sino)?;
        io::save_sinogram(&args.out.join(format!("sparse_{i:04}.bin")), &ex.sparse_sino)?;
    }
    write_manifest(
        &args.out,
        "simulate",
        serde_json::to_value(args).map_err(TomoError::from)?,
        args.common.seed,
        args.common.threads,
        vec![],
        t0.elapsed().as_secs_f64(),
    )?;
    println!(
        "simulated {} phantoms ({}, {}x{}, sparse {})",
        args.count, task, args.common.size, args.common.size, args.common.sparsity
    );
    Ok(())
}

fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    check_threads(args.common.threads)?;
    let task = parse_task(&args.common.task)?;
    let learned = matches!(
        args.method.as_str(),
        "sino-unet" | "recon-unet" | "pdnet" | "pdunet"
    );
    if !learned && !matches!(args.method.as_str(), "fbp" | "bilinear-fbp" | "nufft-adjoint") {
        return Err(TomoError::Config(format!(
            "unknown method {:?}",
            args.method
        )));
    }
    let mut model: Option<Model<R>> = None;
    if learned {
        let path = args.checkpoint.as_ref().ok_or_else(|| {
            TomoError::Config(format!("method {} needs --checkpoint", args.method))
        })?;
        let (m, _) = model_from_checkpoint::<R>(path)?;
        if m.name() != expected_model_name(&args.method) {
            return Err(TomoError::Config(format!(
                "checkpoint holds a {} model, method is {}",
                m.name(),
                args.method
            )));
        }
        model = Some(m);
    }
    if args.method == "nufft-adjoint" && task != Task::MriRadial {
        return Err(TomoError::Config(
            "nufft-adjoint applies to --task mri-radial only".into(),
        ));
    }
    let t0 = Instant::now();
    fs::create_dir_all(&args.out)?;
    let inputs = indexed_files(&args.input, "img_")?;
    for (i, path) in inputs.iter().enumerate() {
        let img: Image2D<R> = io::load_image(path)?;
        let ex = make_example(&img, task, args.common.sparsity, args.common.n_angles)?;
        let recon = match args.method.as_str() {
            "fbp" => ex.sparse_fbp.clone(),
            "bilinear-fbp" => bilinear_fbp(&ex)?,
            "nufft-adjoint" => {
                let k = image_to_radial_kspace(&img, ex.geom_full.n_angles(), 2 * img.size);
                let ks = sparsify_spokes(&k, &ex.pattern)?;
                adjoint_nufft_recon(&ks, img.size)
            }
            _ => model.as_mut().expect("loaded above").reconstruct(&ex)?,
        };
        io::save_image(&args.out.join(format!("recon_{i:04}.bin")), &recon)?;
    }
    write_manifest(
        &args.out,
        "reconstruct",
        serde_json::to_value(args).map_err(TomoError::from)?,
        args.common.seed,
        args.common.threads,
        inputs.iter().map(|p| p.display().to_string()).collect(),
        t0.elapsed().as_secs_f64(),
    )?;
    println!("reconstructed {} items with {}", inputs.len(), args.method);
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    check_threads(args.common.threads)?;
    let task = parse_task(&args.common.task)?;
    let t0 = Instant::now();
    fs::create_dir_all(&args.out)?;
    let images = corpus_images(
        args.common.seed,
        args.common.size,
        args.train_count + args.val_count,
    );
    let p99 = corpus_p99(&images)?;
    let examples: Vec<Example<R>> = images
        .iter()
        .map(|img| make_example(img, task, args.common.sparsity, args.common.n_angles))
        .collect::<Result<_>>()?;
    let (train_set, val_set) = examples.split_at(args.train_count);
    let config = model_config(&args.model, args.width, args.depth, args.iterations)?;
    let mut model: Model<R> = build_model(&config, p99, args.common.seed.wrapping_add(1));
    let cfg = TrainConfig {
        epochs: args.epochs,
        effective_batch: args.effective_batch,
        actual_batch: args.actual_batch,
        lr: args.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        seed: args.common.seed,
        sparsity: args.common.sparsity,
        task,
    };
    let outcome = train(&mut model, train_set, val_set, &cfg)?;
    restore_params(&mut model, &outcome.best_params)?;
    let stats = NormStats {
        mu_s: 0.0,
        sigma_s: 1.0,
        p99,
    };
    io::save_checkpoint(
        &args.out.join("checkpoint.bin"),
        model.store(),
        &model.config(),
        &stats,
    )?;
    fs::write(
        args.out.join("training_log.csv"),
        training_log_csv(&outcome.history),
    )?;
    write_manifest(
        &args.out,
        "train",
        serde_json::json!({
            "args": serde_json::to_value(args).map_err(TomoError::from)?,
            "train": serde_json::to_value(&cfg).map_err(TomoError::from)?,
            "model": serde_json::to_value(&model.config()).map_err(TomoError::from)?,
            "best_epoch": outcome.best_epoch,
            "best_val_l1": outcome.best_val_l1,
        }),
        args.common.seed,
        args.common.threads,
        vec![],
        t0.elapsed().as_secs_f64(),
    )?;
    println!(
        "trained {} for {} epochs; best epoch {} (val L1 {:.5})",
        args.model, args.epochs, outcome.best_epoch, outcome.best_val_l1
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let t0 = Instant::now();
    fs::create_dir_all(&args.out)?;
    let gt_files = indexed_files(&args.gt, "img_")?;
    let gts: Vec<Image2D<R>> = gt_files
        .iter()
        .map(|p| io::load_image(p))
        .collect::<Result<_>>()?;
    let mut report = MetricsReport::new();
    let mut qual: Vec<(String, Image2D<R>)> = Vec::new();
    for spec in &args.preds {
        let (name, dir) = spec.split_once('=').ok_or_else(|| {
            TomoError::Config(format!("--pred wants name=dir, got {spec:?}"))
        })?;
        let pred_files = indexed_files(Path::new(dir), "recon_")?;
        if pred_files.len() != gts.len() {
            return Err(TomoError::Dimension(format!(
                "{name}: {} predictions vs {} ground-truth items",
                pred_files.len(),
                gts.len()
            )));
        }
        let mut ssim = Vec::new();
        let mut rmse = Vec::new();
        let mut preds = Vec::new();
        for (p, gt) in pred_files.iter().zip(&gts) {
            let img: Image2D<R> = io::load_image(p)?;
            ssim.push(metrics::ssim(&img, gt)?);
            rmse.push(metrics::rmse(&img, gt)?);
            preds.push(img);
        }
        // qualitative dump: the item closest to this method's median SSIM
        let med = {
            let mut s = ssim.clone();
            s.sort_by(|a, b| a.total_cmp(b));
            s[s.len() / 2]
        };
        let pick = ssim
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - med).abs().total_cmp(&(b.1 - med).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        qual.push((name.to_string(), preds[pick].clone()));
        report.add_method(name, ssim, rmse);
    }
    report.run_pairwise_tests()?;
    fs::write(args.out.join("report.csv"), report.to_csv())?;
    fs::write(args.out.join("report.json"), report.to_json()?)?;
    let window_hi = gts
        .iter()
        .flat_map(|g| g.data.iter())
        .fold(0.0f64, |m, v| m.max(f64::from(*v)))
        .max(1e-6);
    io::write_pgm(&args.out.join("qual_gt.pgm"), &gts[0], 0.0, window_hi, "gt")?;
    for (name, img) in &qual {
        io::write_pgm(
            &args.out.join(format!("qual_{name}.pgm")),
            img,
            0.0,
            window_hi,
            name,
        )?;
    }
    write_manifest(
        &args.out,
        "evaluate",
        serde_json::to_value(args).map_err(TomoError::from)?,
        0,
        1,
        gt_files.iter().map(|p| p.display().to_string()).collect(),
        t0.elapsed().as_secs_f64(),
    )?;
    for m in &report.methods {
        println!(
            "{}: SSIM {:.4} +- {:.4}, RMSE {:.5} +- {:.5}",
            m.method, m.ssim_mean, m.ssim_std, m.rmse_mean, m.rmse_std
        );
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    check_threads(args.threads)?;
    let task = parse_task(&args.task)?;
    let t0 = Instant::now();
    fs::create_dir_all(&args.out)?;
    let proj_counts: Vec<usize> = args
        .projections
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| TomoError::Config(format!("bad projection count {s:?}")))
        })
        .collect::<Result<_>>()?;
    let batch = 4usize;
    let images = corpus_images(args.seed, args.size, batch);
    let mut csv = String::from("model,n_projections,reps,median_secs,iqr_secs\n");
    println!("model        n_proj   median_s    iqr_s");
    for name in args.models.split(',') {
        let name = name.trim();
        let config = model_config(name, args.width, 3, args.iterations)?;
        let mut model: Model<R> = build_model(&config, 1.0, args.seed.wrapping_add(1));
        for &n_proj in &proj_counts {
            let examples: Vec<Example<R>> = images
                .iter()
                .map(|img| make_example(img, task, 1, Some(n_proj)))
                .collect::<Result<_>>()?;
            for _ in 0..args.warmup {
                for ex in &examples {
                    model.reconstruct(ex)?;
                }
            }
            let mut times = Vec::with_capacity(args.reps);
            for _ in 0..args.reps {
                let t = Instant::now();
                for ex in &examples {
                    model.reconstruct(ex)?;
                }
                times.push(t.elapsed().as_secs_f64());
            }
            let median = percentile(&times, 50.0)?;
            let iqr = percentile(&times, 75.0)? - percentile(&times, 25.0)?;
            println!("{name:<12} {n_proj:>6} {median:>10.4} {iqr:>8.4}");
            csv.push_str(&format!("{name},{n_proj},{},{median},{iqr}\n", args.reps));
        }
    }
    fs::write(args.out.join("bench.csv"), csv)?;
    write_manifest(
        &args.out,
        "bench",
        serde_json::to_value(args).map_err(TomoError::from)?,
        args.seed,
        args.threads,
        vec![],
        t0.elapsed().as_secs_f64(),
    )?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Reconstruct(a) => cmd_reconstruct(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
        Cmd::Bench(a) => cmd_bench(a),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        let code = match &e {
            TomoError::Config(_) | TomoError::InvalidSparsity { .. } => 2,
            TomoError::NonFinite(_) => 3,
            _ => 1,
        };
        std::process::exit(code);
    }
}
