//! End-to-end run of every subcommand against a synthetic corpus.

use std::path::Path;
use std::process::Command;

use ndarray::Array3;

use dgn_core::data::{save_image_tensor, CurationManifest, Verdict};
use dgn_core::rng::{rng_from_seed, standard_normal};

fn dgn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dgn"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn dgn");
    assert!(
        out.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn textured(seed: u64, bias: f32) -> Array3<f32> {
    let mut rng = rng_from_seed(seed);
    let (fx, fy) = (2.0 + (seed % 5) as f32, 3.0 + (seed % 3) as f32);
    let flip = if seed.is_multiple_of(2) { 1.0 } else { -1.0 };
    let mut img = Array3::<f32>::zeros((3, 32, 32));
    for y in 0..32 {
        for x in 0..32 {
            for c in 0..3 {
                let s = (flip * (x as f32) / fx + (y as f32) / fy + c as f32).sin();
                let n = 0.05 * standard_normal::<f64>(&mut rng) as f32;
                img[[c, y, x]] = (bias + 0.3 * s + n).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn write_corpus(dir: &Path) {
    let a = textured(1, 0.5);
    save_image_tensor(&dir.join("plant_a.png"), &a).unwrap();
    save_image_tensor(&dir.join("plant_b.png"), &textured(2, 0.55)).unwrap();
    // near-duplicate: small uniform brightness shift of plant_a
    let dup = a.mapv(|v| (v + 0.02).clamp(0.0, 1.0));
    save_image_tensor(&dir.join("plant_z_dup.png"), &dup).unwrap();
    // too dark for the brightness filter
    let dark = textured(3, 0.5).mapv(|v| v * 0.05);
    save_image_tensor(&dir.join("too_dark.png"), &dark).unwrap();
}

const CONFIG: &str = r#"
[model]
num_groups = 1
blocks_per_group = 1
channels = 8
base_window = 8
ratios = [0.5]
scale = 4
task = "sr"
depth_enabled = true
lambda1 = 0.01
lambda2 = 0.01

[model.lsh]
num_rounds = 1
num_buckets = 4
chunk_size = 16
seed = 0

[train]
total_iters = 8
batch_size = 1
patch_size = 16
checkpoint_every = 4
"#;

#[test]
fn full_pipeline_through_the_binary() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    write_corpus(&corpus);
    let config = tmp.path().join("tiny.toml");
    std::fs::write(&config, CONFIG).unwrap();

    // curate: duplicate collapses onto plant_a, dark image dropped
    let manifest_path = tmp.path().join("manifest.txt");
    run_ok(dgn()
        .arg("curate")
        .args(["--input-dir", corpus.to_str().unwrap()])
        .args(["--manifest-out", manifest_path.to_str().unwrap()])
        .args(["--patch-size", "16x16"])
        .arg("--normalize-brightness"));
    let manifest =
        CurationManifest::from_text(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    let verdict = |id: &str| {
        manifest
            .entries
            .iter()
            .find(|e| e.image_id == id)
            .unwrap_or_else(|| panic!("{id} missing from manifest"))
            .verdict
            .clone()
    };
    assert_eq!(verdict("plant_a"), Verdict::Kept);
    assert_eq!(verdict("plant_b"), Verdict::Kept);
    assert_eq!(
        verdict("plant_z_dup"),
        Verdict::DroppedDuplicate("plant_a".into())
    );
    assert_eq!(verdict("too_dark"), Verdict::DroppedDark);
    // hash field renders as exactly 16 lowercase hex digits
    for e in &manifest.entries {
        let hex = e.hash.to_string();
        assert_eq!(hex.len(), 16);
        assert!(hex.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
    }

    // degrade: LQ images and both synthetic sidecars appear
    let degraded = tmp.path().join("degraded");
    run_ok(dgn()
        .arg("degrade")
        .args(["--config", config.to_str().unwrap()])
        .args(["--input-dir", corpus.to_str().unwrap()])
        .args(["--out-dir", degraded.to_str().unwrap()])
        .arg("--synthetic-depth"));
    for name in ["plant_a.lq.png", "plant_a.lqdepth", "plant_a.hqdepth"] {
        assert!(degraded.join(name).exists(), "{name} missing");
    }

    // train a few iterations
    let run_dir = tmp.path().join("run");
    let out = run_ok(dgn()
        .arg("train")
        .args(["--config", config.to_str().unwrap()])
        .args(["--data-dir", corpus.to_str().unwrap()])
        .args(["--out-dir", run_dir.to_str().unwrap()])
        .arg("--synthetic-depth")
        .args(["--seed", "5"]));
    assert!(out.contains("trained 8 iterations"), "stdout: {out}");
    let ckpt = run_dir.join("checkpoint_latest.dgn");
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(run_dir.join("train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 8);
    for line in log.lines() {
        assert_eq!(line.split_whitespace().count(), 6, "log record: {line}");
    }

    // eval: per-image rows, baseline rows and means, 4-decimal formatting
    let report_path = tmp.path().join("report.txt");
    let out = run_ok(dgn()
        .arg("eval")
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--eval-dir", corpus.to_str().unwrap()])
        .arg("--synthetic-depth")
        .args(["--report-out", report_path.to_str().unwrap()]));
    assert!(out.contains("plant_a,"));
    let report = std::fs::read_to_string(&report_path).unwrap();
    // 4 images x (model row + baseline row) + mean + mean#bicubic
    assert_eq!(report.lines().count(), 10);
    for line in report.lines() {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3, "report record: {line}");
        for v in &fields[1..] {
            let dot = v.find('.').expect("fixed-point metric");
            assert_eq!(v.len() - dot - 1, 4, "4 decimals in `{v}`");
        }
    }
    assert!(report.lines().any(|l| l.starts_with("plant_a#bicubic,")));
    assert!(report.lines().last().unwrap().starts_with("mean#bicubic,"));
    // mean psnr equals the arithmetic mean of the per-image rows (at the
    // printed precision)
    let model_rows: Vec<f64> = report
        .lines()
        .filter(|l| !l.contains("#bicubic") && !l.starts_with("mean"))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    let mean_row: f64 = report
        .lines()
        .find(|l| l.starts_with("mean,"))
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    let mean = model_rows.iter().sum::<f64>() / model_rows.len() as f64;
    assert!((mean - mean_row).abs() < 5e-5 + 1e-9);

    // infer: x4 output written, repeat runs byte-identical
    let restored1 = tmp.path().join("restored1.png");
    let out = run_ok(dgn()
        .arg("infer")
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--image", degraded.join("plant_a.lq.png").to_str().unwrap()])
        .args(["--out", restored1.to_str().unwrap()])
        .arg("--synthetic-depth"));
    assert!(out.contains("(32x32)"), "8x8 lq -> 32x32 sr: {out}");
    let restored2 = tmp.path().join("restored2.png");
    run_ok(dgn()
        .arg("infer")
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--image", degraded.join("plant_a.lq.png").to_str().unwrap()])
        .args(["--out", restored2.to_str().unwrap()])
        .arg("--synthetic-depth"));
    assert_eq!(
        std::fs::read(&restored1).unwrap(),
        std::fs::read(&restored2).unwrap()
    );

    // sidecar depth path: infer picks up the .lqdepth next to the image
    let restored3 = tmp.path().join("restored3.png");
    run_ok(dgn()
        .arg("infer")
        .args(["--checkpoint", ckpt.to_str().unwrap()])
        .args(["--image", degraded.join("plant_a.lq.png").to_str().unwrap()])
        .args(["--depth", degraded.join("plant_a.lqdepth").to_str().unwrap()])
        .args(["--out", restored3.to_str().unwrap()]));
}

#[test]
fn eval_rejects_missing_sidecars_without_synthetic_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    write_corpus(&corpus);
    let config = tmp.path().join("tiny.toml");
    std::fs::write(&config, CONFIG).unwrap();

    let run_dir = tmp.path().join("run");
    run_ok(dgn()
        .arg("train")
        .args(["--config", config.to_str().unwrap()])
        .args(["--data-dir", corpus.to_str().unwrap()])
        .args(["--out-dir", run_dir.to_str().unwrap()])
        .arg("--synthetic-depth")
        .args(["--iters", "1"]));

    let out = dgn()
        .arg("eval")
        .args([
            "--checkpoint",
            run_dir.join("checkpoint_latest.dgn").to_str().unwrap(),
        ])
        .args(["--eval-dir", corpus.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing depth sidecar"), "stderr: {stderr}");
}
