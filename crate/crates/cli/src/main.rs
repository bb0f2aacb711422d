//! Single entry point for the shadow-removal toolkit.
//!
//! Subcommands: make-synth, train, infer, evaluate, ablate, selfcheck.
//! Exit codes: 0 success, 2 config, 3 data, 4 numeric, 5 io.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use umbra_core::config::ABLATION_NAMES;
use umbra_core::data::{load_image, load_paired_dataset, save_image, synth_generate};
use umbra_core::metrics::{evaluate, report_csv, EvalOptions};
use umbra_core::pipeline::Pipeline;
use umbra_core::selfcheck::{run_all, SelfCheckOptions};
use umbra_core::trainer::{
    load_checkpoint, losses_csv, save_checkpoint, train_stage1, train_stage2, Checkpoint,
    StepRecord, TrainResult,
};
use umbra_core::{Config, Error, Result, RunSeed};

#[derive(Parser)]
#[command(name = "umbra", version, about = "Mask-free shadow removal toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand.
#[derive(Args, Clone)]
struct Common {
    /// Config file (key = value lines, # comments)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set alpha=0.5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed; every random draw derives from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic shadow/clean training pairs
    MakeSynth {
        #[command(flatten)]
        common: Common,
        /// Number of pairs
        #[arg(long)]
        count: usize,
        /// Square image size in pixels (>= 32)
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Output directory (input/ and gt/ created inside)
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the two-stage training recipe
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root (input/ + gt/)
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and losses.csv
        #[arg(long)]
        out: PathBuf,
        /// Train a single stage instead of the full recipe
        #[arg(long)]
        stage: Option<u8>,
        /// Resume from a checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Remove shadows from an image or a directory of images
    Infer {
        #[command(flatten)]
        common: Common,
        /// Input image or directory
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint to run
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a paired dataset (PSNR/SSIM, optional LPIPS)
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Report CSV path
        #[arg(long)]
        out: PathBuf,
        /// Include the pluggable perceptual metric column
        #[arg(long, default_value_t = false)]
        with_lpips: bool,
        /// External metric backend: executable called as `backend pred.png gt.png`
        #[arg(long)]
        lpips_backend: Option<PathBuf>,
    },
    /// Train and score every branch/refiner configuration
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training steps per stage for each configuration
        #[arg(long, default_value_t = 200)]
        steps: usize,
    },
    /// Run every numeric oracle and invariant check
    Selfcheck {
        #[command(flatten)]
        common: Common,
        /// Attention correlation reading to check (matrix | elementwise)
        #[arg(long)]
        ffa_variant: Option<String>,
        /// Fault-injection hook for the failure path (hidden)
        #[arg(long, hide = true, default_value_t = false)]
        corrupt_dft_sign: bool,
    },
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::io(format!("cannot create {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::io(format!("cannot write {}: {e}", path.display())))
}

fn save_stage(out: &Path, result: &TrainResult) -> Result<PathBuf> {
    let ckpt = &result.checkpoint;
    let path = out.join(format!("ckpt_stage{}_step{}", ckpt.stage, ckpt.step));
    save_checkpoint(ckpt, &path)?;
    Ok(path)
}

fn cmd_train(
    common: &Common,
    data: &Path,
    out: &Path,
    stage: Option<u8>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let cfg = common.load()?;
    let seed = RunSeed(common.seed);
    let ds = load_paired_dataset(data)?;
    ensure_dir(out)?;
    let resume_ckpt: Option<Checkpoint> = resume.map(|p| load_checkpoint(&p)).transpose()?;
    let mut records: Vec<StepRecord> = Vec::new();
    let mut artifacts: Vec<PathBuf> = Vec::new();

    match stage {
        Some(1) => {
            let r = train_stage1(&ds, &cfg, seed, resume_ckpt, None)?;
            records.extend(r.records.iter().cloned());
            artifacts.push(save_stage(out, &r)?);
        }
        Some(2) => {
            let start = resume_ckpt.ok_or_else(|| {
                Error::config("--stage 2 needs --resume with a stage-1 (or stage-2) checkpoint")
            })?;
            let r = train_stage2(start, &ds, &cfg, seed, None)?;
            records.extend(r.records.iter().cloned());
            artifacts.push(save_stage(out, &r)?);
        }
        Some(s) => return Err(Error::config(format!("--stage must be 1 or 2, got {s}"))),
        None => {
            let r1 = match &resume_ckpt {
                Some(c) if c.stage == 2 => {
                    return Err(Error::config(
                        "full-recipe training cannot resume from a stage-2 checkpoint; use --stage 2",
                    ))
                }
                _ => train_stage1(&ds, &cfg, seed, resume_ckpt, None)?,
            };
            records.extend(r1.records.iter().cloned());
            artifacts.push(save_stage(out, &r1)?);
            if cfg.model.enable_refiner {
                let r2 = train_stage2(r1.checkpoint, &ds, &cfg, seed, None)?;
                records.extend(r2.records.iter().cloned());
                artifacts.push(save_stage(out, &r2)?);
            }
        }
    }

    let csv_path = out.join("losses.csv");
    write_text(&csv_path, &losses_csv(&records))?;
    artifacts.push(csv_path);
    println!("trained {} steps", records.len());
    for a in &artifacts {
        println!("wrote {}", a.display());
    }
    Ok(())
}

fn cmd_infer(common: &Common, input: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let _ = common.load()?; // overrides must parse; the checkpoint pins the model
    let checkpoint = load_checkpoint(ckpt)?;
    let pipe = Pipeline::from_checkpoint(&checkpoint)?;
    ensure_dir(out)?;
    let inputs: Vec<PathBuf> = if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(format!("cannot list {}: {e}", input.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        files
    } else {
        vec![input.to_path_buf()]
    };
    if inputs.is_empty() {
        return Err(Error::data(format!("no input images in {}", input.display())));
    }
    for path in &inputs {
        let img = load_image(path)?;
        let restored = pipe.restore_image(&img)?;
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::data(format!("bad file name {}", path.display())))?;
        let out_path = out.join(format!("{stem}.png"));
        save_image(&restored, &out_path)?;
    }
    println!("restored {} image(s) into {}", inputs.len(), out.display());
    Ok(())
}

fn cmd_evaluate(
    common: &Common,
    data: &Path,
    ckpt: &Path,
    out: &Path,
    with_lpips: bool,
    lpips_backend: Option<PathBuf>,
) -> Result<()> {
    let cfg = common.load()?;
    if with_lpips && lpips_backend.is_none() {
        return Err(Error::config("--with-lpips requires --lpips-backend PATH"));
    }
    let ds = load_paired_dataset(data)?;
    let checkpoint = load_checkpoint(ckpt)?;
    let pipe = Pipeline::from_checkpoint(&checkpoint)?;
    let opts = EvalOptions {
        ssim_mode: cfg.ssim_mode,
        lpips_backend: with_lpips.then_some(lpips_backend).flatten(),
    };
    let report = evaluate(&ds, &pipe, &opts)?;
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    write_text(out, &report_csv(&report))?;
    match report.mean_lpips {
        Some(l) => println!(
            "{} images: mean PSNR {:.4} dB, mean SSIM {:.4}, mean LPIPS {:.4}",
            report.count, report.mean_psnr_db, report.mean_ssim, l
        ),
        None => println!(
            "{} images: mean PSNR {:.4} dB, mean SSIM {:.4}",
            report.count, report.mean_psnr_db, report.mean_ssim
        ),
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_ablate(common: &Common, data: &Path, out: &Path, steps: usize) -> Result<()> {
    let base = common.load()?;
    let seed = RunSeed(common.seed);
    let ds = load_paired_dataset(data)?;
    ensure_dir(out)?;
    let mut rows = Vec::new();
    for name in ABLATION_NAMES {
        let mut cfg = base.ablation(name)?;
        cfg.schedule.stage1_steps = steps;
        cfg.schedule.stage2_steps = steps;
        let r1 = train_stage1(&ds, &cfg, seed, None, None)?;
        let final_ckpt = if cfg.model.enable_refiner {
            train_stage2(r1.checkpoint, &ds, &cfg, seed, None)?.checkpoint
        } else {
            r1.checkpoint
        };
        let pipe = Pipeline::from_checkpoint(&final_ckpt)?;
        let opts = EvalOptions { ssim_mode: cfg.ssim_mode, ..Default::default() };
        let report = evaluate(&ds, &pipe, &opts)?;
        println!("{name}: PSNR {:.4} dB, SSIM {:.4}", report.mean_psnr_db, report.mean_ssim);
        rows.push((name, report.mean_psnr_db, report.mean_ssim));
    }
    let mut csv = String::from("config,psnr_db,ssim\n");
    for (name, p, s) in &rows {
        csv.push_str(&format!("{name},{p:.6},{s:.6}\n"));
    }
    let path = out.join("ablation.csv");
    write_text(&path, &csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_selfcheck(
    common: &Common,
    ffa_variant: Option<String>,
    corrupt_dft_sign: bool,
) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(v) = ffa_variant {
        cfg.set("ffa_variant", &v)?;
    }
    let outcomes = run_all(&SelfCheckOptions { config: cfg, corrupt_dft_sign });
    let mut failed = Vec::new();
    for o in &outcomes {
        println!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        if !o.passed {
            failed.push(o.name);
        }
    }
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(Error::numeric(format!("self-check failed: {}", failed.join(", "))))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::MakeSynth { common, count, size, out } => {
            let _ = common.load()?;
            synth_generate(count, size, RunSeed(common.seed), &out)?;
            println!("wrote {count} pairs under {}", out.display());
            Ok(())
        }
        Cmd::Train { common, data, out, stage, resume } => {
            cmd_train(&common, &data, &out, stage, resume)
        }
        Cmd::Infer { common, input, ckpt, out } => cmd_infer(&common, &input, &ckpt, &out),
        Cmd::Evaluate { common, data, ckpt, out, with_lpips, lpips_backend } => {
            cmd_evaluate(&common, &data, &ckpt, &out, with_lpips, lpips_backend)
        }
        Cmd::Ablate { common, data, out, steps } => cmd_ablate(&common, &data, &out, steps),
        Cmd::Selfcheck { common, ffa_variant, corrupt_dft_sign } => {
            cmd_selfcheck(&common, ffa_variant, corrupt_dft_sign)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
