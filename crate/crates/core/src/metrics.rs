//! Quantitative evaluation: PSNR and SSIM over a paired dataset, with a
//! pluggable external backend for the optional perceptual metric.

use std::path::{Path, PathBuf};

use crate::config::SsimMode;
use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::kernels::{conv2d_fwd, ConvSpec};
use crate::losses::{gaussian_window, SSIM_C1, SSIM_C2};
use crate::tensor::Tensor;

/// PSNR cap for (near-)identical images; keeps CSV output finite.
pub const PSNR_CAP_DB: f64 = 99.0;

fn check_pair(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::numeric(format!(
            "metric shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    for (name, t) in [("pred", pred), ("target", target)] {
        if t.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::numeric(format!("{name} values must lie in [0, 1]")));
        }
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB at peak 1.0, capped at 99.
pub fn psnr(pred: &Tensor<f32>, target: &Tensor<f32>) -> Result<f64> {
    check_pair(pred, target)?;
    let mse: f64 = pred
        .as_slice()
        .iter()
        .zip(target.as_slice().iter())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / pred.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn to_luma(t: &Tensor<f64>) -> Tensor<f64> {
    let [n, _, h, w] = t.shape();
    let s = t.as_slice();
    let mut out = vec![0f64; n * h * w];
    for ni in 0..n {
        for p in 0..h * w {
            let r = s[(ni * 3) * h * w + p];
            let g = s[(ni * 3 + 1) * h * w + p];
            let b = s[(ni * 3 + 2) * h * w + p];
            out[ni * h * w + p] = 0.299 * r + 0.587 * g + 0.114 * b;
        }
    }
    Tensor::new([n, 1, h, w], out)
}

/// Mean local SSIM: Gaussian window 11 / sigma 1.5, valid windows only,
/// per channel and averaged (or on luma).
pub fn ssim(pred: &Tensor<f32>, target: &Tensor<f32>, mode: SsimMode) -> Result<f64> {
    check_pair(pred, target)?;
    let [_, _, h, w] = pred.shape();
    if h < 11 || w < 11 {
        return Err(Error::numeric(format!("ssim needs at least 11x11 pixels, got {h}x{w}")));
    }
    let mut x = pred.cast::<f64>();
    let mut y = target.cast::<f64>();
    if mode == SsimMode::Luma {
        x = to_luma(&x);
        y = to_luma(&y);
    }
    let c = x.c();
    let win = gaussian_window::<f64>(c);
    let spec = ConvSpec { stride: 1, pad: 0, groups: c };
    let gconv = |t: &Tensor<f64>| conv2d_fwd(t, &win, None, spec);

    let mu_x = gconv(&x);
    let mu_y = gconv(&y);
    let e_xx = gconv(&x.zip(&x, |a, b| a * b));
    let e_yy = gconv(&y.zip(&y, |a, b| a * b));
    let e_xy = gconv(&x.zip(&y, |a, b| a * b));

    let n = mu_x.numel();
    let mut acc = 0.0f64;
    for i in 0..n {
        let (mx, my) = (mu_x.as_slice()[i], mu_y.as_slice()[i]);
        let sx = e_xx.as_slice()[i] - mx * mx;
        let sy = e_yy.as_slice()[i] - my * my;
        let sxy = e_xy.as_slice()[i] - mx * my;
        let l = (2.0 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1);
        let cs = (2.0 * sxy + SSIM_C2) / (sx + sy + SSIM_C2);
        acc += l * cs;
    }
    Ok(acc / n as f64)
}

/// Anything that maps a shadow image to a prediction.
pub trait Restorer {
    fn restore(&self, shadow: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn describe(&self) -> String;
}

/// Pass-through "model"; evaluating it against ground truth pins the
/// metric ceiling (PSNR cap, SSIM 1).
pub struct IdentityModel;

impl Restorer for IdentityModel {
    fn restore(&self, shadow: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(shadow.clone())
    }

    fn describe(&self) -> String {
        "identity".into()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<PerImageMetrics>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_lpips: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub ssim_mode: SsimMode,
    /// External executable: called as `backend pred.png gt.png`, must print
    /// one float on stdout.
    pub lpips_backend: Option<PathBuf>,
}

fn run_lpips_backend(backend: &Path, pred_png: &Path, gt_png: &Path) -> Result<f64> {
    let out = std::process::Command::new(backend)
        .arg(pred_png)
        .arg(gt_png)
        .output()
        .map_err(|e| Error::io(format!("lpips backend {}: {e}", backend.display())))?;
    if !out.status.success() {
        return Err(Error::io(format!(
            "lpips backend {} failed with status {}",
            backend.display(),
            out.status
        )));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    text.trim()
        .parse::<f64>()
        .map_err(|_| Error::io(format!("lpips backend printed '{}', expected a float", text.trim())))
}

/// Run a model over the dataset and score every prediction against its
/// ground truth. Order is stable (samples are id-sorted).
pub fn evaluate(
    ds: &PairedDataset,
    model: &dyn Restorer,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::data("evaluate: dataset is empty"));
    }
    let tmp = if opts.lpips_backend.is_some() {
        Some(
            tempfile::tempdir()
                .map_err(|e| Error::io(format!("cannot create temp dir: {e}")))?,
        )
    } else {
        None
    };
    let mut per_image = Vec::with_capacity(ds.len());
    for sample in &ds.samples {
        let pred = model.restore(&sample.shadow)?;
        let psnr_db = psnr(&pred, &sample.clean)?;
        let ssim_v = ssim(&pred, &sample.clean, opts.ssim_mode)?;
        let lpips = match (&opts.lpips_backend, &tmp) {
            (Some(backend), Some(dir)) => {
                let pred_png = dir.path().join(format!("{}_pred.png", sample.id));
                let gt_png = dir.path().join(format!("{}_gt.png", sample.id));
                crate::data::save_image(&pred, &pred_png)?;
                crate::data::save_image(&sample.clean, &gt_png)?;
                Some(run_lpips_backend(backend, &pred_png, &gt_png)?)
            }
            _ => None,
        };
        per_image.push(PerImageMetrics { id: sample.id.clone(), psnr_db, ssim: ssim_v, lpips });
    }
    let count = per_image.len();
    let mean = |f: &dyn Fn(&PerImageMetrics) -> f64| {
        per_image.iter().map(|p| f(p)).sum::<f64>() / count as f64
    };
    let mean_lpips = per_image[0]
        .lpips
        .is_some()
        .then(|| mean(&|p| p.lpips.unwrap_or(0.0)));
    Ok(MetricsReport {
        mean_psnr_db: mean(&|p| p.psnr_db),
        mean_ssim: mean(&|p| p.ssim),
        mean_lpips,
        count,
        per_image,
    })
}

/// CSV form: `id,psnr_db,ssim[,lpips]`, one row per image.
pub fn report_csv(report: &MetricsReport) -> String {
    let with_lpips = report.mean_lpips.is_some();
    let mut out = String::from(if with_lpips { "id,psnr_db,ssim,lpips" } else { "id,psnr_db,ssim" });
    out.push('\n');
    for p in &report.per_image {
        if with_lpips {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6}\n",
                p.id,
                p.psnr_db,
                p.ssim,
                p.lpips.unwrap_or(f64::NAN)
            ));
        } else {
            out.push_str(&format!("{},{:.6},{:.6}\n", p.id, p.psnr_db, p.ssim));
        }
    }
    out
}
