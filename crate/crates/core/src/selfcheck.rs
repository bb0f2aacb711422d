//! The self-check suite: every transform, gradient, identity, and schedule
//! claim verified against an independent oracle, runnable on demand.
//!
//! Oracles are deliberately dumb: direct DFT sums, central finite
//! differences, per-window SSIM loops. The fast paths are only trusted
//! because these agree with them.

use rand::Rng;

use crate::config::{Config, LossWeights, ModelConfig};
use crate::fft::{dft_w_real, haar_dwt2, haar_idwt2, DftMode};
use crate::losses::{
    combine_terms, l1_loss, ms_ssim_loss, perceptual_loss, total_loss, RandomConvExtractor, Stage,
    MSSSIM_TERM_FLOOR, MSSSIM_WEIGHTS, SSIM_C1, SSIM_C2,
};
use crate::nn::{Ctx, ParamReg, ParamStore};
use crate::refiner::{FfaAttention, FfatBlock, Refiner};
use crate::removal::{ConvNextBlock, FfcBlock, UNet};
use crate::rng::{rng_at, RunSeed, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::trainer::lr_at;

/// One named check result.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn pass(name: &'static str, detail: impl Into<String>) -> Self {
        CheckOutcome { name, passed: true, detail: detail.into() }
    }

    fn from_result(name: &'static str, r: Result<String, String>) -> Self {
        match r {
            Ok(detail) => CheckOutcome::pass(name, detail),
            Err(detail) => CheckOutcome { name, passed: false, detail },
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelfCheckOptions {
    pub config: Config,
    /// Fault-injection hook: run the fast DFT with a flipped imaginary sign
    /// so the oracle comparison must fail.
    pub corrupt_dft_sign: bool,
}

impl Default for SelfCheckOptions {
    fn default() -> Self {
        SelfCheckOptions { config: Config::default(), corrupt_dft_sign: false }
    }
}

fn randt(shape: Shape, tag: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = rng_at(RunSeed(0xC0FFEE), Stream::Check, &[tag]);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Central-difference gradient check of a scalar-valued graph against the
/// analytic gradient at `x0`. Probes every element, or a deterministic
/// subset of `probes` elements for larger inputs. Returns the relative
/// error max_i |ga_i - gf_i| / max(||ga||_inf, 1e-12).
pub fn gradcheck(
    x0: &Tensor<f64>,
    probes: Option<usize>,
    build: impl Fn(&mut Tape<f64>, Var) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let xv = tape.leaf(x0.clone());
    let loss = build(&mut tape, xv);
    assert_eq!(tape.value(loss).numel(), 1, "gradcheck needs a scalar objective");
    let grads = tape.backward(loss);
    let analytic = grads.get(xv).expect("objective does not depend on the input").clone();

    let eval = |t: &Tensor<f64>| -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(t.clone());
        let l = build(&mut tape, v);
        tape.value(l).as_slice()[0]
    };

    let n = x0.numel();
    let indices: Vec<usize> = match probes {
        Some(k) if k < n => {
            let mut rng = rng_at(RunSeed(0xC0FFEE), Stream::Check, &[n as u64]);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            idx.truncate(k);
            idx
        }
        _ => (0..n).collect(),
    };

    let h = 1e-5;
    let denom = analytic.max_abs().max(1e-12);
    let base = x0.as_slice().to_vec();
    let mut worst = 0.0f64;
    for &i in &indices {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fd = (eval(&Tensor::new(x0.shape(), plus)) - eval(&Tensor::new(x0.shape(), minus)))
            / (2.0 * h);
        let err = (analytic.as_slice()[i] - fd).abs() / denom;
        worst = worst.max(err);
    }
    worst
}

fn bound(name: &str, got: f64, tol: f64) -> Result<String, String> {
    if got.is_finite() && got <= tol {
        Ok(format!("{name} = {got:.3e} (tolerance {tol:.0e})"))
    } else {
        Err(format!("{name} = {got:.3e} exceeds tolerance {tol:.0e}"))
    }
}

fn small_model(cfg: &ModelConfig) -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        blocks_per_level: [1, 1, 1],
        refiner_levels: 2,
        refiner_channels: 8,
        ..cfg.clone()
    }
}

// ---- individual checks ----------------------------------------------------

fn check_ffa_fast_vs_naive(opts: &SelfCheckOptions) -> Result<String, String> {
    let fast_mode = if opts.corrupt_dft_sign { DftMode::FastBadSign } else { DftMode::Fast };
    // Raw transform layer first. The correlation matrix of real inputs is
    // exactly real under the non-conjugated product, so a pure sign fault
    // can cancel inside the composite; at the transform level it cannot.
    let mut raw_worst = 0.0f64;
    for tag in 0..4u64 {
        let x = randt([1, 2, 4, 16], 500 + tag, -1.0, 1.0);
        let fast = dft_w_real(&x, fast_mode);
        let naive = dft_w_real(&x, DftMode::Naive);
        raw_worst = raw_worst.max(fast.sub(&naive).max_abs());
        let p = randt([1, 4, 4, 8], 600 + tag, -1.0, 1.0);
        let fast_i = crate::fft::idft_w_packed(&p, fast_mode);
        let naive_i = crate::fft::idft_w_packed(&p, DftMode::Naive);
        raw_worst = raw_worst.max(fast_i.sub(&naive_i).max_abs());
    }
    if raw_worst > 1e-6 {
        return Err(format!(
            "raw DFT fast-vs-naive max abs diff {raw_worst:.3e} exceeds tolerance 1e-6"
        ));
    }
    let variant = opts.config.model.ffa_variant;
    let attn = FfaAttention::new("check.attn", 1, variant);
    let mut store = ParamStore::<f64>::new();
    attn.register(&mut ParamReg::new(&mut store, RunSeed(0)));
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        for (i, shape) in [[1, 8, 8, 8], [2, 16, 8, 16]].into_iter().enumerate() {
            let q = randt(shape, 1000 + 10 * seed + i as u64, -1.0, 1.0);
            let k = randt(shape, 2000 + 10 * seed + i as u64, -1.0, 1.0);
            let v = randt(shape, 3000 + 10 * seed + i as u64, -1.0, 1.0);
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, |_| false);
            let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
            let fast = attn
                .forward(&mut Ctx::new(&mut tape, &vars), qv, kv, vv, fast_mode)
                .map_err(|e| e.to_string())?;
            let naive = attn
                .forward(&mut Ctx::new(&mut tape, &vars), qv, kv, vv, DftMode::Naive)
                .map_err(|e| e.to_string())?;
            worst = worst.max(tape.value(fast).sub(tape.value(naive)).max_abs());
        }
    }
    bound(
        &format!("fast-vs-naive max abs diff over 20 seeds ({} variant)", variant.as_str()),
        worst,
        1e-6,
    )
}

fn check_ffa_gradcheck(opts: &SelfCheckOptions) -> Result<String, String> {
    let variant = opts.config.model.ffa_variant;
    let attn = FfaAttention::new("check.attn", 1, variant);
    let mut store = ParamStore::<f64>::new();
    attn.register(&mut ParamReg::new(&mut store, RunSeed(0)));
    let q0 = randt([1, 4, 4, 4], 10, -1.0, 1.0);
    let k0 = randt([1, 4, 4, 4], 11, -1.0, 1.0);
    let v0 = randt([1, 4, 4, 4], 12, -1.0, 1.0);
    let dir = randt([1, 4, 4, 4], 13, -1.0, 1.0);
    let mut worst = 0.0f64;
    for probe in 0..3 {
        let (q0, k0, v0) = (q0.clone(), k0.clone(), v0.clone());
        let (store, attn, dir) = (store.clone(), attn.clone(), dir.clone());
        let x0 = [&q0, &k0, &v0][probe].clone();
        let err = gradcheck(&x0, None, move |tape, x| {
            let vars = store.bind(tape, |_| false);
            let fixed: Vec<Var> = [&q0, &k0, &v0]
                .iter()
                .map(|t| tape.constant((*t).clone()))
                .collect();
            let pick = |i: usize, x: Var| if i == probe { x } else { fixed[i] };
            let (qv, kv, vv) = (pick(0, x), pick(1, x), pick(2, x));
            let mut ctx = Ctx::new(tape, &vars);
            let fa = attn.forward(&mut ctx, qv, kv, vv, DftMode::Fast).expect("valid shapes");
            let d = tape.constant(dir.clone());
            let proj = tape.mul(fa, d);
            tape.mean_all(proj)
        });
        worst = worst.max(err);
    }
    bound("attention gradient rel err (Q, K, V)", worst, 1e-4)
}

fn check_convnext_gradcheck() -> Result<String, String> {
    let blk = ConvNextBlock::new("check.cnx", 8);
    let mut store = ParamStore::<f64>::new();
    blk.register(&mut ParamReg::new(&mut store, RunSeed(1)));
    let x0 = randt([1, 8, 6, 6], 20, -1.0, 1.0);
    let dir = randt([1, 8, 6, 6], 21, -1.0, 1.0);
    let err = gradcheck(&x0, None, move |tape, x| {
        let vars = store.bind(tape, |_| false);
        let mut ctx = Ctx::new(tape, &vars);
        let y = blk.forward(&mut ctx, x);
        let d = tape.constant(dir.clone());
        let proj = tape.mul(y, d);
        tape.mean_all(proj)
    });
    bound("ConvNext block input-gradient rel err", err, 1e-4)
}

fn check_ffc_gradcheck() -> Result<String, String> {
    let blk = FfcBlock::new("check.ffc", 8);
    let mut store = ParamStore::<f64>::new();
    blk.register(&mut ParamReg::new(&mut store, RunSeed(2)));
    let x0 = randt([1, 8, 6, 6], 30, -1.0, 1.0);
    let dir = randt([1, 8, 6, 6], 31, -1.0, 1.0);
    let err = gradcheck(&x0, None, move |tape, x| {
        let vars = store.bind(tape, |_| false);
        let mut ctx = Ctx::new(tape, &vars);
        let y = blk.forward(&mut ctx, x);
        let d = tape.constant(dir.clone());
        let proj = tape.mul(y, d);
        tape.mean_all(proj)
    });
    bound("FFC block input-gradient rel err", err, 1e-4)
}

fn check_ffat_gradcheck(opts: &SelfCheckOptions) -> Result<String, String> {
    let variant = opts.config.model.ffa_variant;
    let blk = FfatBlock::new("check.ffat", 8, 2, variant);
    let mut store = ParamStore::<f64>::new();
    blk.register(&mut ParamReg::new(&mut store, RunSeed(3)));
    let x0 = randt([1, 8, 4, 4], 40, -1.0, 1.0);
    let dir = randt([1, 8, 4, 4], 41, -1.0, 1.0);
    let err = gradcheck(&x0, None, move |tape, x| {
        let vars = store.bind(tape, |_| false);
        let mut ctx = Ctx::new(tape, &vars);
        let y = blk.forward(&mut ctx, x, DftMode::Fast).expect("valid shapes");
        let d = tape.constant(dir.clone());
        let proj = tape.mul(y, d);
        tape.mean_all(proj)
    });
    bound("FFAT block input-gradient rel err", err, 1e-4)
}

fn check_unet_gradcheck() -> Result<String, String> {
    let unet = UNet::new("check.unet", 8, [1, 1, 1]);
    let mut store = ParamStore::<f64>::new();
    unet.register(&mut ParamReg::new(&mut store, RunSeed(4)));
    let x0 = randt([1, 3, 16, 16], 50, 0.0, 1.0);
    let dir = randt([1, 8, 16, 16], 51, -1.0, 1.0);
    let err = gradcheck(&x0, Some(96), move |tape, x| {
        let vars = store.bind(tape, |_| false);
        let mut ctx = Ctx::new(tape, &vars);
        let y = unet.forward(&mut ctx, x);
        let d = tape.constant(dir.clone());
        let proj = tape.mul(y, d);
        tape.mean_all(proj)
    });
    bound("U-Net end-to-end input-gradient rel err", err, 1e-3)
}

fn check_stage2_loss_gradcheck() -> Result<String, String> {
    let ext = RandomConvExtractor::<f64>::new();
    // Keep |pred - target| away from the L1 kink so central differences
    // stay valid at h = 1e-5.
    let target = randt([1, 3, 16, 16], 60, 0.3, 0.7);
    let offset = randt([1, 3, 16, 16], 61, 0.05, 0.25);
    let pred0 = target.zip(&offset, |t, o| (t + o).min(0.999));
    let weights = LossWeights::default();
    let err = gradcheck(&pred0, Some(96), move |tape, pred| {
        let tv = tape.constant(target.clone());
        let l1 = l1_loss(tape, pred, tv).expect("shapes match");
        let ssim = ms_ssim_loss(tape, pred, tv).expect("large enough");
        let percep = perceptual_loss(tape, pred, tv, &ext).expect("extractor ok");
        combine_terms(tape, l1, ssim, percep, None, &weights)
    });
    bound("stage-2 total-loss gradient rel err", err, 1e-3)
}

fn check_dwt_roundtrip() -> Result<String, String> {
    let x = randt([1, 3, 32, 32], 70, -1.0, 1.0);
    let sub = haar_dwt2(&x).map_err(|e| e.to_string())?;
    let back = haar_idwt2(&sub).map_err(|e| e.to_string())?;
    bound("DWT roundtrip max abs error", back.sub(&x).max_abs(), 1e-6)
}

fn check_dwt_parseval() -> Result<String, String> {
    let x = randt([1, 3, 32, 32], 71, -1.0, 1.0);
    let sub = haar_dwt2(&x).map_err(|e| e.to_string())?;
    let energy = x.sq_norm();
    let sub_energy = sub.ll.sq_norm() + sub.lh.sq_norm() + sub.hl.sq_norm() + sub.hh.sq_norm();
    bound(
        "DWT energy identity relative error",
        (energy - sub_energy).abs() / energy,
        1e-5,
    )
}

fn check_parseval_crosscheck() -> Result<String, String> {
    // For real Q, K: Re(F(Q) conj(F(K))^T) == Q K^T under a unitary DFT.
    // This is the conjugated variant - it validates the transform plumbing
    // independently of the non-conjugated correlation the attention uses.
    let (ch, s) = (8usize, 32usize);
    let q = randt([1, 1, ch, s], 80, -1.0, 1.0);
    let k = randt([1, 1, ch, s], 81, -1.0, 1.0);
    let qf = dft_w_real(&q, DftMode::Fast);
    let kf = dft_w_real(&k, DftMode::Fast);
    let get = |t: &Tensor<f64>, c: usize, i: usize, j: usize| t.at(0, c, i, j);
    let mut worst = 0.0f64;
    for i in 0..ch {
        for j in 0..ch {
            let mut direct = 0.0;
            for t in 0..s {
                direct += get(&q, 0, i, t) * get(&k, 0, j, t);
            }
            let mut spectral = 0.0;
            for t in 0..s {
                // Re(a * conj(b)) = a_re b_re + a_im b_im
                spectral += get(&qf, 0, i, t) * get(&kf, 0, j, t)
                    + get(&qf, 1, i, t) * get(&kf, 1, j, t);
            }
            worst = worst.max((direct - spectral).abs());
        }
    }
    bound("Parseval cross-check max abs error", worst, 1e-6)
}

fn check_convnext_identity() -> Result<String, String> {
    let blk = ConvNextBlock::new("check.cnx", 8);
    let mut store = ParamStore::<f64>::new();
    blk.register(&mut ParamReg::new(&mut store, RunSeed(5)));
    store.set(&blk.contraction_weight(), Tensor::zeros([8, 32, 1, 1]));
    let x = randt([1, 8, 8, 8], 90, -1.0, 1.0);
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, |_| false);
    let xv = tape.constant(x.clone());
    let y = blk.forward(&mut Ctx::new(&mut tape, &vars), xv);
    bound(
        "ConvNext residual identity max abs deviation",
        tape.value(y).sub(&x).max_abs(),
        1e-6,
    )
}

fn check_ffat_identity(opts: &SelfCheckOptions) -> Result<String, String> {
    let variant = opts.config.model.ffa_variant;
    let blk = FfatBlock::new("check.ffat", 8, 1, variant);
    let mut store = ParamStore::<f64>::new();
    blk.register(&mut ParamReg::new(&mut store, RunSeed(6)));
    let x = randt([1, 8, 4, 4], 91, -1.0, 1.0);
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, |_| false);
    let xv = tape.constant(x.clone());
    let y = blk
        .forward(&mut Ctx::new(&mut tape, &vars), xv, DftMode::Fast)
        .map_err(|e| e.to_string())?;
    bound(
        "FFAT zero-projection identity max abs deviation",
        tape.value(y).sub(&x).max_abs(),
        1e-6,
    )
}

fn check_refiner_identity(opts: &SelfCheckOptions) -> Result<String, String> {
    let model = small_model(&opts.config.model);
    let refiner = Refiner::new(&model);
    let mut store = ParamStore::<f32>::new();
    refiner.register(&mut ParamReg::new(&mut store, RunSeed(7)));
    let y = randt([1, 3, 16, 16], 92, 0.0, 1.0).cast::<f32>();
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, |_| false);
    let yv = tape.constant(y.clone());
    let out = refiner
        .forward(&mut Ctx::new(&mut tape, &vars), yv, DftMode::Fast)
        .map_err(|e| e.to_string())?;
    bound(
        "fresh-refiner identity max abs deviation",
        tape.value(out).sub(&y).max_abs() as f64,
        1e-6,
    )
}

fn check_loss_breakdown(opts: &SelfCheckOptions) -> Result<String, String> {
    let weights = opts.config.loss;
    // Worked composition: all four raw terms at 1.0 through the production
    // combination path.
    let mut tape = Tape::<f64>::new();
    let one = tape.constant(Tensor::scalar(1.0));
    let total = combine_terms(&mut tape, one, one, one, Some(one), &LossWeights::default());
    let worked = tape.value(total).as_slice()[0];
    if (worked - 1.2105).abs() > 1e-7 {
        return Err(format!("worked example total {worked} != 1.2105"));
    }
    let total2 = combine_terms(&mut tape, one, one, one, None, &LossWeights::default());
    let worked2 = tape.value(total2).as_slice()[0];
    if (worked2 - 1.21).abs() > 1e-7 {
        return Err(format!("stage-2 worked example total {worked2} != 1.21"));
    }

    // Identity on a real evaluation.
    let ext = RandomConvExtractor::<f64>::new();
    let disc = crate::losses::Discriminator::new();
    let mut store = ParamStore::<f64>::new();
    disc.register(&mut ParamReg::new(&mut store, RunSeed(8)));
    let pred = randt([1, 3, 64, 64], 93, 0.0, 1.0);
    let target = randt([1, 3, 64, 64], 94, 0.0, 1.0);
    let mut tape = Tape::new();
    let vars = store.bind(&mut tape, |_| false);
    let p = tape.constant(pred);
    let t = tape.constant(target);
    let mut worst = 0.0f64;
    for stage in [Stage::One, Stage::Two] {
        let lv = total_loss(
            &mut Ctx::new(&mut tape, &vars),
            p,
            t,
            &weights,
            stage,
            &ext,
            (stage == Stage::One).then_some(&disc),
        )
        .map_err(|e| e.to_string())?;
        let bd = crate::losses::read_breakdown(&tape, &lv);
        worst = worst.max(bd.identity_residual(&weights));
    }
    bound("loss breakdown identity residual", worst, 1e-7)
}

/// Brute-force MS-SSIM: per-window loops, its own Gaussian weights, its own
/// pooling. Shares only the pinned definition with the implementation.
pub fn msssim_bruteforce(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    fn gauss1d() -> [f64; 11] {
        let mut g = [0f64; 11];
        let mut sum = 0.0;
        for (i, v) in g.iter_mut().enumerate() {
            let d = i as f64 - 5.0;
            *v = (-d * d / 4.5).exp(); // 2 * 1.5^2
            sum += *v;
        }
        for v in g.iter_mut() {
            *v /= sum;
        }
        g
    }
    fn downsample(t: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
        t.iter()
            .map(|ch| {
                let (h, w) = (ch.len() / 2, ch[0].len() / 2);
                (0..h)
                    .map(|i| {
                        (0..w)
                            .map(|j| {
                                (ch[2 * i][2 * j]
                                    + ch[2 * i][2 * j + 1]
                                    + ch[2 * i + 1][2 * j]
                                    + ch[2 * i + 1][2 * j + 1])
                                    / 4.0
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
    fn to_nested(t: &Tensor<f64>) -> Vec<Vec<Vec<f64>>> {
        let [_, c, h, w] = t.shape();
        (0..c)
            .map(|ci| (0..h).map(|i| (0..w).map(|j| t.at(0, ci, i, j)).collect()).collect())
            .collect()
    }

    let g = gauss1d();
    let [_, _, h0, w0] = x.shape();
    let scales = crate::losses::feasible_scales(h0, w0);
    assert!(scales > 0, "image too small for one window");
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();

    let mut xs = to_nested(x);
    let mut ys = to_nested(y);
    let mut product = 1.0f64;
    for scale in 0..scales {
        let (h, w) = (xs[0].len(), xs[0][0].len());
        let mut cs_sum = 0.0;
        let mut ssim_sum = 0.0;
        let mut count = 0usize;
        for (xc, yc) in xs.iter().zip(ys.iter()) {
            for i in 0..h - 10 {
                for j in 0..w - 10 {
                    let (mut mx, mut my) = (0.0, 0.0);
                    let (mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0);
                    for a in 0..11 {
                        for b in 0..11 {
                            let wgt = g[a] * g[b];
                            let xv = xc[i + a][j + b];
                            let yv = yc[i + a][j + b];
                            mx += wgt * xv;
                            my += wgt * yv;
                            exx += wgt * xv * xv;
                            eyy += wgt * yv * yv;
                            exy += wgt * xv * yv;
                        }
                    }
                    let (sx, sy, sxy) = (exx - mx * mx, eyy - my * my, exy - mx * my);
                    let l = (2.0 * mx * my + SSIM_C1) / (mx * mx + my * my + SSIM_C1);
                    let cs = (2.0 * sxy + SSIM_C2) / (sx + sy + SSIM_C2);
                    cs_sum += cs;
                    ssim_sum += l * cs;
                    count += 1;
                }
            }
        }
        let exponent = MSSSIM_WEIGHTS[scale] / wsum;
        let term = if scale + 1 == scales { ssim_sum } else { cs_sum } / count as f64;
        product *= term.max(MSSSIM_TERM_FLOOR).powf(exponent);
        if scale + 1 < scales {
            if xs[0].len() % 2 != 0 || xs[0][0].len() % 2 != 0 {
                for t in [&mut xs, &mut ys] {
                    for ch in t.iter_mut() {
                        ch.truncate(ch.len() & !1);
                        for row in ch.iter_mut() {
                            row.truncate(row.len() & !1);
                        }
                    }
                }
            }
            xs = downsample(&xs);
            ys = downsample(&ys);
        }
    }
    1.0 - product
}

fn check_msssim_oracle() -> Result<String, String> {
    let mut worst = 0.0f64;
    for tag in 0..3u64 {
        let x = randt([1, 3, 32, 32], 200 + tag, 0.0, 1.0);
        let y = randt([1, 3, 32, 32], 300 + tag, 0.0, 1.0);
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let l = ms_ssim_loss(&mut tape, a, b).map_err(|e| e.to_string())?;
        let got = tape.value(l).as_slice()[0];
        let want = msssim_bruteforce(&x, &y);
        worst = worst.max((got - want).abs());
    }
    bound("MS-SSIM vs brute-force window oracle", worst, 1e-5)
}

fn check_lr_endpoints(opts: &SelfCheckOptions) -> Result<String, String> {
    let sched = &opts.config.schedule;
    let t = sched.stage1_steps;
    let start = lr_at(0, sched, Stage::One).map_err(|e| e.to_string())?;
    let end = lr_at(t, sched, Stage::One).map_err(|e| e.to_string())?;
    if start != sched.lr1_start {
        return Err(format!("lr at step 0 is {start}, expected {}", sched.lr1_start));
    }
    if end != sched.lr1_end {
        return Err(format!("lr at step {t} is {end}, expected {}", sched.lr1_end));
    }
    let mid = lr_at(t / 2, sched, Stage::One).map_err(|e| e.to_string())?;
    let want_mid = 0.5 * (sched.lr1_start + sched.lr1_end);
    if t % 2 == 0 && (mid - want_mid).abs() > 1e-18 {
        return Err(format!("lr at midpoint is {mid}, expected {want_mid}"));
    }
    let mut prev = f64::INFINITY;
    for s in 0..=t {
        let lr = lr_at(s, sched, Stage::One).map_err(|e| e.to_string())?;
        if lr > prev + 1e-18 {
            return Err(format!("lr not monotone at step {s}"));
        }
        prev = lr;
    }
    let lr2 = lr_at(0, sched, Stage::Two).map_err(|e| e.to_string())?;
    if lr2 != sched.lr2 {
        return Err(format!("stage-2 lr is {lr2}, expected {}", sched.lr2));
    }
    Ok(format!("endpoints {start:.1e} -> {end:.1e}, constant stage-2 {lr2:.1e}"))
}

/// Run every check; the report is printable one line per check.
pub fn run_all(opts: &SelfCheckOptions) -> Vec<CheckOutcome> {
    vec![
        CheckOutcome::from_result("ffa_fast_vs_naive", check_ffa_fast_vs_naive(opts)),
        CheckOutcome::from_result("ffa_gradcheck", check_ffa_gradcheck(opts)),
        CheckOutcome::from_result("convnext_gradcheck", check_convnext_gradcheck()),
        CheckOutcome::from_result("ffc_gradcheck", check_ffc_gradcheck()),
        CheckOutcome::from_result("ffat_gradcheck", check_ffat_gradcheck(opts)),
        CheckOutcome::from_result("unet_gradcheck", check_unet_gradcheck()),
        CheckOutcome::from_result("stage2_loss_gradcheck", check_stage2_loss_gradcheck()),
        CheckOutcome::from_result("dwt_roundtrip", check_dwt_roundtrip()),
        CheckOutcome::from_result("dwt_parseval", check_dwt_parseval()),
        CheckOutcome::from_result("parseval_crosscheck", check_parseval_crosscheck()),
        CheckOutcome::from_result("convnext_identity", check_convnext_identity()),
        CheckOutcome::from_result("ffat_identity", check_ffat_identity(opts)),
        CheckOutcome::from_result("refiner_identity", check_refiner_identity(opts)),
        CheckOutcome::from_result("loss_breakdown", check_loss_breakdown(opts)),
        CheckOutcome::from_result("msssim_oracle", check_msssim_oracle()),
        CheckOutcome::from_result("lr_endpoints", check_lr_endpoints(opts)),
    ]
}
