//! End-to-end checks of the umbra binary: subcommand wiring, artifact
//! layout, exit codes, and the config/override plumbing.

use std::path::Path;
use std::process::{Command, Output};

fn umbra() -> Command {
    Command::new(env!("CARGO_BIN_EXE_umbra"))
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn umbra");
    assert!(
        out.status.success(),
        "command failed: {:?}\nstdout: {}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(cmd: &mut Command) -> i32 {
    cmd.output().expect("spawn umbra").status.code().unwrap_or(-1)
}

fn make_synth(dir: &Path, count: usize, size: usize) {
    run_ok(umbra()
        .args(["make-synth", "--count", &count.to_string(), "--size", &size.to_string(), "--out"])
        .arg(dir));
}

/// Tiny-model override so CLI training finishes in seconds.
const TINY: [&str; 5] = [
    "--set",
    "base_channels=8",
    "--set",
    "blocks_per_level=1,1,1",
    "--set",
];

fn tiny_args(cmd: &mut Command) -> &mut Command {
    cmd.args(TINY)
        .arg("refiner_levels=2")
        .args(["--set", "refiner_channels=8"])
}

#[test]
fn make_synth_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    make_synth(&a, 2, 32);
    make_synth(&b, 2, 32);
    let fa = std::fs::read(a.join("input/0000.png")).unwrap();
    let fb = std::fs::read(b.join("input/0000.png")).unwrap();
    assert_eq!(fa, fb);
}

#[test]
fn train_infer_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_synth(&data, 2, 48);
    let out = dir.path().join("run");

    // full recipe, tiny model, few steps
    let mut cmd = umbra();
    tiny_args(&mut cmd)
        .args(["--set", "stage1_steps=4", "--set", "stage2_steps=2", "train"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out);
    run_ok(&mut cmd);
    assert!(out.join("ckpt_stage1_step4").is_file());
    assert!(out.join("ckpt_stage2_step2").is_file());
    let csv = std::fs::read_to_string(out.join("losses.csv")).unwrap();
    assert!(csv.starts_with("step,stage,l1,ssim_term,percep,adv,total,lr\n"));
    assert_eq!(csv.lines().count(), 1 + 4 + 2);

    // inference keeps sizes, writes one png per input
    let infer_out = dir.path().join("restored");
    let mut cmd = umbra();
    cmd.arg("infer")
        .arg("--input")
        .arg(data.join("input"))
        .arg("--ckpt")
        .arg(out.join("ckpt_stage2_step2"))
        .arg("--out")
        .arg(&infer_out);
    run_ok(&mut cmd);
    assert!(infer_out.join("0000.png").is_file());
    assert!(infer_out.join("0001.png").is_file());
    let img = image::open(infer_out.join("0000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (48, 48));

    // evaluation emits the report csv
    let report = dir.path().join("report.csv");
    let mut cmd = umbra();
    cmd.arg("evaluate")
        .arg("--data")
        .arg(&data)
        .arg("--ckpt")
        .arg(out.join("ckpt_stage2_step2"))
        .arg("--out")
        .arg(&report);
    run_ok(&mut cmd);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("id,psnr_db,ssim\n"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn infer_pads_odd_sizes_transparently() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_synth(&data, 1, 48);
    let out = dir.path().join("run");
    let mut cmd = umbra();
    tiny_args(&mut cmd)
        .args(["--set", "stage1_steps=1", "train", "--stage", "1"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out);
    run_ok(&mut cmd);

    // hand the pipeline a 100x100 image
    let odd = dir.path().join("odd");
    make_synth(&odd, 1, 100);
    let infer_out = dir.path().join("restored");
    let mut cmd = umbra();
    cmd.arg("infer")
        .arg("--input")
        .arg(odd.join("input/0000.png"))
        .arg("--ckpt")
        .arg(out.join("ckpt_stage1_step1"))
        .arg("--out")
        .arg(&infer_out);
    run_ok(&mut cmd);
    let img = image::open(infer_out.join("0000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (100, 100));
}

#[test]
fn selfcheck_passes_both_variants_and_fails_when_corrupted() {
    for variant in ["matrix", "elementwise"] {
        let out = run_ok(umbra().args(["selfcheck", "--ffa-variant", variant]));
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("all 16 checks passed"), "variant {variant}: {text}");
        assert!(!text.contains("[FAIL]"));
    }

    let out = umbra()
        .args(["selfcheck", "--corrupt-dft-sign"])
        .output()
        .expect("spawn umbra");
    assert_eq!(out.status.code(), Some(4), "numeric failures must exit 4");
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("[FAIL] ffa_fast_vs_naive"), "must name the failing oracle: {text}");
}

#[test]
fn exit_codes_follow_failure_classes() {
    let dir = tempfile::tempdir().unwrap();

    // config error: unknown key
    assert_eq!(exit_code(umbra().args(["selfcheck", "--set", "bogus_key=1"])), 2);
    // config error: both branches off
    assert_eq!(
        exit_code(umbra().args([
            "selfcheck",
            "--set",
            "enable_unet_branch=false",
            "--set",
            "enable_dwtffc_branch=false",
        ])),
        2
    );
    // data error: missing dataset directory
    let mut cmd = umbra();
    cmd.args(["train", "--data"])
        .arg(dir.path().join("nope"))
        .arg("--out")
        .arg(dir.path().join("out"));
    assert_eq!(exit_code(&mut cmd), 3);
    // io error: checkpoint file that is not an archive
    let fake = dir.path().join("fake.ckpt");
    std::fs::write(&fake, b"garbage").unwrap();
    let data = dir.path().join("data");
    make_synth(&data, 1, 48);
    let mut cmd = umbra();
    cmd.arg("infer")
        .arg("--input")
        .arg(data.join("input/0000.png"))
        .arg("--ckpt")
        .arg(&fake)
        .arg("--out")
        .arg(dir.path().join("x"));
    assert_eq!(exit_code(&mut cmd), 5);
    // config error: lpips flag without backend
    let mut cmd = umbra();
    cmd.arg("evaluate")
        .arg("--data")
        .arg(&data)
        .arg("--ckpt")
        .arg(&fake)
        .arg("--out")
        .arg(dir.path().join("r.csv"))
        .arg("--with-lpips");
    assert_eq!(exit_code(&mut cmd), 2);
}

#[test]
fn stage2_requires_resume_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_synth(&data, 1, 48);
    let mut cmd = umbra();
    cmd.args(["train", "--stage", "2", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("out"));
    assert_eq!(exit_code(&mut cmd), 2);
}

#[test]
fn set_overrides_reach_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_synth(&data, 1, 48);
    let out = dir.path().join("run");
    let mut cmd = umbra();
    tiny_args(&mut cmd)
        .args(["--set", "stage1_steps=2", "--set", "alpha=0.5", "train", "--stage", "1"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out);
    run_ok(&mut cmd);
    // the alpha override is embedded in the checkpoint config snapshot
    let bytes = std::fs::read(out.join("ckpt_stage1_step2")).unwrap();
    let text = String::from_utf8_lossy(&bytes);
    assert!(text.contains("alpha = 0.5"));
}

#[cfg(unix)]
#[test]
fn evaluate_with_lpips_backend_adds_column() {
    use std::os::unix::fs::PermissionsExt;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_synth(&data, 1, 48);
    let out = dir.path().join("run");
    let mut cmd = umbra();
    tiny_args(&mut cmd)
        .args(["--set", "stage1_steps=1", "train", "--stage", "1"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out);
    run_ok(&mut cmd);

    let backend = dir.path().join("lpips.sh");
    std::fs::write(&backend, "#!/bin/sh\necho 0.25\n").unwrap();
    std::fs::set_permissions(&backend, std::fs::Permissions::from_mode(0o755)).unwrap();
    let report = dir.path().join("report.csv");
    let mut cmd = umbra();
    cmd.arg("evaluate")
        .arg("--data")
        .arg(&data)
        .arg("--ckpt")
        .arg(out.join("ckpt_stage1_step1"))
        .arg("--out")
        .arg(&report)
        .arg("--with-lpips")
        .arg("--lpips-backend")
        .arg(&backend);
    run_ok(&mut cmd);
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("id,psnr_db,ssim,lpips\n"));
    assert!(text.lines().nth(1).unwrap().ends_with("0.250000"));
}

#[test]
fn ablate_writes_four_finite_rows() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_synth(&data, 2, 48);
    let out = dir.path().join("ablation");
    let mut cmd = umbra();
    tiny_args(&mut cmd)
        .args(["ablate", "--steps", "2", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&out);
    run_ok(&mut cmd);
    let text = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(text.starts_with("config,psnr_db,ssim\n"));
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let mut parts = row.split(',');
        let name = parts.next().unwrap();
        assert!(["full", "wo_refinement", "only_unet", "only_dwtffc"].contains(&name));
        for v in parts {
            assert!(v.parse::<f64>().unwrap().is_finite(), "non-finite metric in {row}");
        }
    }

    // same seed, same CSV
    let out2 = dir.path().join("ablation2");
    let mut cmd = umbra();
    tiny_args(&mut cmd)
        .args(["ablate", "--steps", "2", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&out2);
    run_ok(&mut cmd);
    let text2 = std::fs::read_to_string(out2.join("ablation.csv")).unwrap();
    assert_eq!(text, text2);
}

#[test]
fn resume_continues_training() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_synth(&data, 2, 48);
    let out = dir.path().join("run");
    let mut cmd = umbra();
    tiny_args(&mut cmd)
        .args(["--set", "stage1_steps=3", "train", "--stage", "1"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out);
    run_ok(&mut cmd);

    let out2 = dir.path().join("resumed");
    let mut cmd = umbra();
    tiny_args(&mut cmd)
        .args(["--set", "stage1_steps=5", "train", "--stage", "1"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&out2)
        .arg("--resume")
        .arg(out.join("ckpt_stage1_step3"));
    run_ok(&mut cmd);
    assert!(out2.join("ckpt_stage1_step5").is_file());
    let csv = std::fs::read_to_string(out2.join("losses.csv")).unwrap();
    // only the resumed steps are in this invocation's csv
    assert_eq!(csv.lines().count(), 1 + 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("3,1,"));
}
