use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tomo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tomo"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = tomo(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

#[test]
fn simulate_reruns_bitwise_and_writes_one_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for out in [&a, &b] {
        ok(&[
            "simulate",
            "--task",
            "ct-parallel",
            "--size",
            "16",
            "--count",
            "2",
            "--sparsity",
            "2",
            "--n-angles",
            "12",
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let fa = dir_bytes(&a);
    let fb = dir_bytes(&b);
    assert_eq!(fa.len(), fb.len());
    let manifests = fa.iter().filter(|(n, _)| n == "manifest.json").count();
    assert_eq!(manifests, 1);
    for ((na, ba), (nb, bb)) in fa.iter().zip(&fb) {
        assert_eq!(na, nb);
        if na == "manifest.json" {
            continue; // contains wall-clock timing and the output path
        }
        assert_eq!(ba, bb, "{na} differs between reruns");
    }
}

#[test]
fn factor_one_bilinear_fbp_matches_plain_fbp_bitwise() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    ok(&[
        "simulate", "--task", "ct-parallel", "--size", "16", "--count", "2", "--sparsity", "1",
        "--n-angles", "12", "--out", sim.to_str().unwrap(),
    ]);
    let mut recons = Vec::new();
    for method in ["fbp", "bilinear-fbp"] {
        let out = tmp.path().join(method);
        ok(&[
            "reconstruct", "--task", "ct-parallel", "--size", "16", "--sparsity", "1",
            "--n-angles", "12", "--method", method,
            "--input", sim.to_str().unwrap(), "--out", out.to_str().unwrap(),
        ]);
        recons.push(fs::read(out.join("recon_0000.bin")).unwrap());
    }
    assert_eq!(recons[0], recons[1]);
}

#[test]
fn evaluate_gt_against_itself_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    ok(&[
        "simulate", "--task", "ct-parallel", "--size", "16", "--count", "3", "--sparsity", "2",
        "--n-angles", "12", "--out", sim.to_str().unwrap(),
    ]);
    let pred = tmp.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for i in 0..3 {
        for ext in ["bin", "bin.json"] {
            fs::copy(
                sim.join(format!("img_{i:04}.{ext}")),
                pred.join(format!("recon_{i:04}.{ext}")),
            )
            .unwrap();
        }
    }
    let out = tmp.path().join("eval");
    let pred_arg = format!("ideal={}", pred.display());
    ok(&[
        "evaluate", "--gt", sim.to_str().unwrap(), "--pred", &pred_arg,
        "--out", out.to_str().unwrap(),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let method = &report["methods"][0];
    for s in method["ssim"].as_array().unwrap() {
        assert!((s.as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
    for r in method["rmse"].as_array().unwrap() {
        assert!(r.as_f64().unwrap() < 1e-12);
    }

    // summary must match recomputation from the per-item CSV
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let ssims: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    let mean = ssims.iter().sum::<f64>() / ssims.len() as f64;
    assert!((method["ssim_mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!(out.join("qual_ideal.pgm").exists());
    assert!(out.join("qual_gt.pgm").exists());
}

#[test]
fn unknown_method_and_model_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    ok(&[
        "simulate", "--task", "ct-parallel", "--size", "16", "--count", "1", "--sparsity", "2",
        "--n-angles", "12", "--out", sim.to_str().unwrap(),
    ]);
    let out = tomo(&[
        "reconstruct", "--method", "magic", "--input", sim.to_str().unwrap(),
        "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = tomo(&[
        "train", "--model", "magic", "--out", tmp.path().join("y").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let out = tomo(&[
        "reconstruct", "--method", "pdnet", "--input", sim.to_str().unwrap(),
        "--out", tmp.path().join("z").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "learned method without checkpoint");
}

#[test]
fn train_then_reconstruct_from_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    ok(&[
        "train", "--model", "pdnet", "--task", "ct-parallel", "--size", "16",
        "--sparsity", "2", "--n-angles", "12", "--epochs", "1",
        "--train-count", "2", "--val-count", "1", "--effective-batch", "2",
        "--width", "4", "--iterations", "1", "--out", run.to_str().unwrap(),
    ]);
    let log = fs::read_to_string(run.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2); // header + one epoch
    let sim = tmp.path().join("sim");
    ok(&[
        "simulate", "--task", "ct-parallel", "--size", "16", "--count", "1", "--sparsity", "2",
        "--n-angles", "12", "--seed", "99", "--out", sim.to_str().unwrap(),
    ]);
    let rec = tmp.path().join("rec");
    ok(&[
        "reconstruct", "--task", "ct-parallel", "--size", "16", "--sparsity", "2",
        "--n-angles", "12", "--method", "pdnet",
        "--checkpoint", run.join("checkpoint.bin").to_str().unwrap(),
        "--input", sim.to_str().unwrap(), "--out", rec.to_str().unwrap(),
    ]);
    assert!(rec.join("recon_0000.bin").exists());

    // a sino-unet checkpoint must be rejected by the pdunet method
    let out = tomo(&[
        "reconstruct", "--task", "ct-parallel", "--size", "16", "--sparsity", "2",
        "--n-angles", "12", "--method", "pdunet",
        "--checkpoint", run.join("checkpoint.bin").to_str().unwrap(),
        "--input", sim.to_str().unwrap(), "--out", tmp.path().join("w").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_emits_timing_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    ok(&[
        "bench", "--models", "pdnet", "--projections", "6,12", "--task", "ct-fan",
        "--size", "16", "--width", "4", "--iterations", "1",
        "--reps", "3", "--warmup", "1", "--out", out.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("pdnet,6,3,"));
    assert!(rows[2].starts_with("pdnet,12,3,"));
}
