//! The training objective: L1 + alpha * MS-SSIM + beta * perceptual +
//! gamma * adversarial, with the patch discriminator behind the last term.
//! Stage 2 drops the adversarial term.

use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::nn::{Conv2d, Ctx, ParamReg, ParamStore};
use crate::rng::RunSeed;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Which training stage the loss is evaluated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn as_u8(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Stage> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(Error::config(format!("stage must be 1 or 2, got {v}"))),
        }
    }
}

fn check_same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::numeric(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    check_same_shape(tape, pred, target, "l1_loss")?;
    let d = tape.sub(pred, target);
    let a = tape.abs(d);
    Ok(tape.mean_all(a))
}

/// 11-tap Gaussian window (sigma 1.5) replicated per channel for a grouped
/// convolution: shape (C, 1, 11, 11), normalized to sum 1.
pub fn gaussian_window<T: Real>(channels: usize) -> Tensor<T> {
    let sigma = 1.5f64;
    let mut g1 = [0.0f64; 11];
    let mut sum = 0.0;
    for (i, v) in g1.iter_mut().enumerate() {
        let x = i as f64 - 5.0;
        *v = (-x * x / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in g1.iter_mut() {
        *v /= sum;
    }
    let mut w = vec![T::zero(); channels * 121];
    for c in 0..channels {
        for i in 0..11 {
            for j in 0..11 {
                w[c * 121 + i * 11 + j] = T::cast_f64(g1[i] * g1[j]);
            }
        }
    }
    Tensor::new([channels, 1, 11, 11], w)
}

pub const SSIM_C1: f64 = 1e-4; // (0.01)^2 at peak 1
pub const SSIM_C2: f64 = 9e-4; // (0.03)^2 at peak 1
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
/// Terms are clamped here before the fractional powers; a negative mean
/// covariance on noise-like inputs would otherwise produce NaN.
pub const MSSSIM_TERM_FLOOR: f64 = 1e-6;

/// Luminance and contrast-structure maps over valid 11x11 Gaussian windows.
fn ssim_maps<T: Real>(tape: &mut Tape<T>, x: Var, y: Var, window: Var) -> (Var, Var) {
    let c = tape.shape(x)[1];
    let spec = ConvSpec { stride: 1, pad: 0, groups: c };
    let mu_x = tape.conv2d(x, window, None, spec);
    let mu_y = tape.conv2d(y, window, None, spec);
    let xx = tape.mul(x, x);
    let yy = tape.mul(y, y);
    let xy = tape.mul(x, y);
    let e_xx = tape.conv2d(xx, window, None, spec);
    let e_yy = tape.conv2d(yy, window, None, spec);
    let e_xy = tape.conv2d(xy, window, None, spec);
    let mu_xx = tape.mul(mu_x, mu_x);
    let mu_yy = tape.mul(mu_y, mu_y);
    let mu_xy = tape.mul(mu_x, mu_y);
    let sx = tape.sub(e_xx, mu_xx);
    let sy = tape.sub(e_yy, mu_yy);
    let sxy = tape.sub(e_xy, mu_xy);

    let c1 = T::cast_f64(SSIM_C1);
    let c2 = T::cast_f64(SSIM_C2);
    let two = T::cast_f64(2.0);

    let l_num = tape.scale(mu_xy, two);
    let l_num = tape.add_const(l_num, c1);
    let l_den = tape.add(mu_xx, mu_yy);
    let l_den = tape.add_const(l_den, c1);
    let l_den_inv = tape.recip(l_den);
    let l_map = tape.mul(l_num, l_den_inv);

    let cs_num = tape.scale(sxy, two);
    let cs_num = tape.add_const(cs_num, c2);
    let cs_den = tape.add(sx, sy);
    let cs_den = tape.add_const(cs_den, c2);
    let cs_den_inv = tape.recip(cs_den);
    let cs_map = tape.mul(cs_num, cs_den_inv);
    (l_map, cs_map)
}

/// Largest multi-scale depth (max 5) whose coarsest level still fits one
/// 11x11 window: min(H, W) >= 11 * 2^(scales-1).
pub fn feasible_scales(h: usize, w: usize) -> usize {
    let m = h.min(w);
    let mut scales = 0;
    while scales < 5 && m >= (11 << scales) {
        scales += 1;
    }
    scales
}

/// 1 - MS-SSIM with Gaussian window 11 / sigma 1.5, standard five-scale
/// exponents renormalized when the image only supports fewer scales.
pub fn ms_ssim_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    check_same_shape(tape, pred, target, "ms_ssim_loss")?;
    let [_, c, h, w] = tape.shape(pred);
    let scales = feasible_scales(h, w);
    if scales == 0 {
        return Err(Error::numeric(format!(
            "ms_ssim_loss: image {h}x{w} is smaller than one 11x11 window"
        )));
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let window = tape.constant(gaussian_window::<T>(c));
    let mut x = pred;
    let mut y = target;
    let mut prod: Option<Var> = None;
    for j in 0..scales {
        let (l_map, cs_map) = ssim_maps(tape, x, y, window);
        let exponent = MSSSIM_WEIGHTS[j] / wsum;
        let term = if j + 1 == scales {
            let ssim_map = tape.mul(l_map, cs_map);
            tape.mean_all(ssim_map)
        } else {
            tape.mean_all(cs_map)
        };
        let term = tape.clamp_min(term, T::cast_f64(MSSSIM_TERM_FLOOR));
        let powered = tape.powf_const(term, exponent);
        prod = Some(match prod {
            Some(p) => tape.mul(p, powered),
            None => powered,
        });
        if j + 1 < scales {
            let [_, _, ch_, cw_] = tape.shape(x);
            let (eh, ew) = (ch_ & !1, cw_ & !1);
            if (eh, ew) != (ch_, cw_) {
                x = tape.crop_hw(x, eh, ew);
                y = tape.crop_hw(y, eh, ew);
            }
            x = tape.avg_pool2(x);
            y = tape.avg_pool2(y);
        }
    }
    let msssim = prod.expect("at least one scale");
    let neg = tape.neg(msssim);
    Ok(tape.add_const(neg, T::one()))
}

/// Anything that yields feature maps for the perceptual distance.
pub trait FeatureExtractor<T: Real> {
    fn features(&self, tape: &mut Tape<T>, x: Var) -> Vec<Var>;
    fn describe(&self) -> String;
}

/// Default extractor: a frozen 5-layer strided conv stack whose weights are
/// drawn from literal seed 0, so it is one fixed function everywhere and the
/// repository needs no pretrained files.
pub struct RandomConvExtractor<T: Real> {
    store: ParamStore<T>,
    layers: Vec<Conv2d>,
}

impl<T: Real> Default for RandomConvExtractor<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> RandomConvExtractor<T> {
    pub fn new() -> Self {
        let widths = [3usize, 16, 32, 64, 128, 256];
        let layers: Vec<Conv2d> = (0..5)
            .map(|i| {
                Conv2d::new(
                    format!("percep.layer{i}"),
                    widths[i],
                    widths[i + 1],
                    3,
                    ConvSpec { stride: 2, pad: 1, groups: 1 },
                )
            })
            .collect();
        let mut store = ParamStore::new();
        let mut reg = ParamReg::new(&mut store, RunSeed(0));
        for l in &layers {
            l.register(&mut reg);
        }
        RandomConvExtractor { store, layers }
    }
}

impl<T: Real> FeatureExtractor<T> for RandomConvExtractor<T> {
    fn features(&self, tape: &mut Tape<T>, x: Var) -> Vec<Var> {
        let vars = self.store.bind(tape, |_| false);
        let mut ctx = Ctx::new(tape, &vars);
        let mut f = x;
        let mut taps = Vec::with_capacity(5);
        for l in &self.layers {
            f = l.forward(&mut ctx, f);
            f = ctx.tape.gelu(f);
            taps.push(f);
        }
        taps
    }

    fn describe(&self) -> String {
        "seed-0 random 5-layer conv stack".into()
    }
}

/// VGG-16 layout: (name, in, out) per conv layer, pools between stages.
const VGG_LAYERS: [(&str, usize, usize); 13] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv4_1", 256, 512),
    ("conv4_2", 512, 512),
    ("conv4_3", 512, 512),
    ("conv5_1", 512, 512),
    ("conv5_2", 512, 512),
    ("conv5_3", 512, 512),
];

/// Taps: the five stage outputs.
pub const VGG_TAPS: [&str; 5] = ["conv1_2", "conv2_2", "conv3_3", "conv4_3", "conv5_3"];

/// VGG-16 feature trunk fed from an external weights archive.
pub struct VggExtractor<T: Real> {
    store: ParamStore<T>,
}

impl<T: Real> VggExtractor<T> {
    /// Validate tensor names and shapes against the VGG-16 layout.
    pub fn from_store(store: ParamStore<T>) -> Result<Self> {
        for (name, ci, co) in VGG_LAYERS {
            let w = store
                .try_get(&format!("{name}.weight"))
                .ok_or_else(|| Error::config(format!("vgg weights: missing {name}.weight")))?;
            if w.shape() != [co, ci, 3, 3] {
                return Err(Error::config(format!(
                    "vgg weights: {name}.weight has shape {:?}, expected {:?}",
                    w.shape(),
                    [co, ci, 3, 3]
                )));
            }
            let b = store
                .try_get(&format!("{name}.bias"))
                .ok_or_else(|| Error::config(format!("vgg weights: missing {name}.bias")))?;
            if b.shape() != [1, co, 1, 1] {
                return Err(Error::config(format!(
                    "vgg weights: {name}.bias has shape {:?}, expected {:?}",
                    b.shape(),
                    [1, co, 1, 1]
                )));
            }
        }
        Ok(VggExtractor { store })
    }
}

impl<T: Real> FeatureExtractor<T> for VggExtractor<T> {
    fn features(&self, tape: &mut Tape<T>, x: Var) -> Vec<Var> {
        let vars = self.store.bind(tape, |_| false);
        let mut ctx = Ctx::new(tape, &vars);
        let mut f = x;
        let mut taps = Vec::with_capacity(5);
        for (name, ci, co) in VGG_LAYERS {
            let conv = Conv2d::new(name, ci, co, 3, ConvSpec { stride: 1, pad: 1, groups: 1 });
            f = conv.forward(&mut ctx, f);
            f = ctx.tape.leaky_relu(f, 0.0);
            if VGG_TAPS.contains(&name) {
                taps.push(f);
                if name != "conv5_3" {
                    f = ctx.tape.max_pool2(f);
                }
            }
        }
        taps
    }

    fn describe(&self) -> String {
        "vgg16 trunk from weights archive".into()
    }
}

/// Mean of per-tap L1 distances between pred and target features.
pub fn perceptual_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    target: Var,
    extractor: &dyn FeatureExtractor<T>,
) -> Result<Var> {
    check_same_shape(tape, pred, target, "perceptual_loss")?;
    let fp = extractor.features(tape, pred);
    let ft = extractor.features(tape, target);
    if fp.is_empty() || fp.len() != ft.len() {
        return Err(Error::numeric("feature extractor returned no usable feature maps"));
    }
    let k = fp.len();
    let mut acc: Option<Var> = None;
    for (p, t) in fp.into_iter().zip(ft.into_iter()) {
        let d = l1_loss(tape, p, t)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, d),
            None => d,
        });
    }
    Ok(tape.scale(acc.expect("nonempty"), T::cast_f64(1.0 / k as f64)))
}

/// Minimum input extent for the patch discriminator (its receptive field).
pub const DISC_MIN_SIZE: usize = 70;
/// Parameter-name prefix for the discriminator.
pub const DISC_PREFIX: &str = "disc.";

/// 70x70-receptive-field patch discriminator: k4 convs, three stride-2 and
/// one stride-1 feature layers, stride-1 logit head, LeakyReLU(0.2).
#[derive(Debug, Clone)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
}

impl Default for Discriminator {
    fn default() -> Self {
        Self::new()
    }
}

impl Discriminator {
    pub fn new() -> Self {
        let widths = [3usize, 64, 128, 256, 512, 1];
        let strides = [2usize, 2, 2, 1, 1];
        let convs = (0..5)
            .map(|i| {
                Conv2d::new(
                    format!("disc.conv{i}"),
                    widths[i],
                    widths[i + 1],
                    4,
                    ConvSpec { stride: strides[i], pad: 1, groups: 1 },
                )
            })
            .collect();
        Discriminator { convs }
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        for c in &self.convs {
            c.register(reg);
        }
    }

    fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let mut f = x;
        for (i, c) in self.convs.iter().enumerate() {
            f = c.forward(ctx, f);
            if i + 1 < self.convs.len() {
                f = ctx.tape.leaky_relu(f, 0.2);
            }
        }
        f
    }

    /// Patch logit map; the input must cover at least one receptive field.
    pub fn try_forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.shape(x);
        if c != 3 {
            return Err(Error::numeric(format!("discriminator expects RGB, got {c} channels")));
        }
        if h < DISC_MIN_SIZE || w < DISC_MIN_SIZE {
            return Err(Error::numeric(format!(
                "discriminator input must be at least {DISC_MIN_SIZE}x{DISC_MIN_SIZE}, got {h}x{w}"
            )));
        }
        Ok(self.forward(ctx, x))
    }
}

/// Reflect-pad a batch up to the discriminator's minimum extent.
fn pad_to_disc_size<T: Real>(ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
    let [_, _, h, w] = ctx.tape.shape(x);
    if h >= DISC_MIN_SIZE && w >= DISC_MIN_SIZE {
        return Ok(x);
    }
    let need_h = DISC_MIN_SIZE.saturating_sub(h);
    let need_w = DISC_MIN_SIZE.saturating_sub(w);
    if need_h >= h || need_w >= w {
        return Err(Error::numeric(format!(
            "image {h}x{w} too small to reflect-pad up to {DISC_MIN_SIZE}"
        )));
    }
    let pads = [need_h / 2, need_h - need_h / 2, need_w / 2, need_w - need_w / 2];
    Ok(ctx.tape.pad_reflect(x, pads))
}

/// Non-saturating GAN pair on patch logits. Inputs smaller than the
/// discriminator's receptive field are reflect-padded up to it first.
/// Only `g_loss` feeds the generator objective; `d_loss` sees the
/// prediction through a gradient stop.
pub fn adversarial_losses<T: Real>(
    ctx: &mut Ctx<T>,
    disc: &Discriminator,
    pred: Var,
    real: Var,
) -> Result<(Var, Var)> {
    check_same_shape(ctx.tape, pred, real, "adversarial_losses")?;
    let pred_p = pad_to_disc_size(ctx, pred)?;
    let real_p = pad_to_disc_size(ctx, real)?;

    let fake_logits = disc.try_forward(ctx, pred_p)?;
    let ones = Tensor::full(ctx.tape.shape(fake_logits), T::one());
    let zeros = Tensor::zeros(ctx.tape.shape(fake_logits));
    let g_loss = ctx.tape.bce_with_logits_mean(fake_logits, &ones);

    let real_logits = disc.try_forward(ctx, real_p)?;
    let d_real = ctx.tape.bce_with_logits_mean(real_logits, &ones);
    let pred_detached = ctx.tape.detach(pred_p);
    let fake_detached_logits = disc.try_forward(ctx, pred_detached)?;
    let d_fake = ctx.tape.bce_with_logits_mean(fake_detached_logits, &zeros);
    let d_loss = ctx.tape.add(d_real, d_fake);
    Ok((g_loss, d_loss))
}

/// Graph handles for the composite loss.
pub struct LossVars {
    pub l1: Var,
    pub ssim: Var,
    pub percep: Var,
    /// Generator-side adversarial term; absent in stage 2.
    pub adv: Option<Var>,
    /// Discriminator objective; absent in stage 2.
    pub d_loss: Option<Var>,
    pub total: Var,
}

/// Numeric record of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub ssim_term: f64,
    pub percep: f64,
    pub adv: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// |total - (l1 + a*ssim + b*percep + g*adv)|
    pub fn identity_residual(&self, w: &LossWeights) -> f64 {
        (self.total
            - (self.l1
                + w.alpha as f64 * self.ssim_term
                + w.beta as f64 * self.percep
                + w.gamma as f64 * self.adv))
            .abs()
    }
}

/// Weighted combination: l1 + alpha*ssim + beta*percep (+ gamma*adv).
/// The one place the sum is formed, for the loss and its identity check.
pub fn combine_terms<T: Real>(
    tape: &mut Tape<T>,
    l1: Var,
    ssim: Var,
    percep: Var,
    adv: Option<Var>,
    weights: &LossWeights,
) -> Var {
    let ws = tape.scale(ssim, T::cast_f64(weights.alpha as f64));
    let wp = tape.scale(percep, T::cast_f64(weights.beta as f64));
    let mut total = tape.add(l1, ws);
    total = tape.add(total, wp);
    if let Some(g_loss) = adv {
        let wg = tape.scale(g_loss, T::cast_f64(weights.gamma as f64));
        total = tape.add(total, wg);
    }
    total
}

/// The full objective. Stage 1 includes all four terms (and returns the
/// discriminator loss for its own update); stage 2 sets the adversarial
/// term to zero and never evaluates the discriminator.
pub fn total_loss<T: Real>(
    ctx: &mut Ctx<T>,
    pred: Var,
    target: Var,
    weights: &LossWeights,
    stage: Stage,
    extractor: &dyn FeatureExtractor<T>,
    disc: Option<&Discriminator>,
) -> Result<LossVars> {
    check_same_shape(ctx.tape, pred, target, "total_loss")?;
    let l1 = l1_loss(ctx.tape, pred, target)?;
    let ssim = ms_ssim_loss(ctx.tape, pred, target)?;
    let percep = perceptual_loss(ctx.tape, pred, target, extractor)?;

    let (adv, d_loss) = match stage {
        Stage::One => {
            let disc = disc.ok_or_else(|| {
                Error::numeric("stage 1 total loss needs the discriminator parameters")
            })?;
            let (g_loss, d_loss) = adversarial_losses(ctx, disc, pred, target)?;
            (Some(g_loss), Some(d_loss))
        }
        Stage::Two => (None, None),
    };
    let total = combine_terms(ctx.tape, l1, ssim, percep, adv, weights);

    Ok(LossVars { l1, ssim, percep, adv, d_loss, total })
}

/// Read the numeric breakdown off the tape.
pub fn read_breakdown<T: Real>(tape: &Tape<T>, v: &LossVars) -> LossBreakdown {
    let scalar = |var: Var| tape.value(var).as_slice()[0].as_f64();
    LossBreakdown {
        l1: scalar(v.l1),
        ssim_term: scalar(v.ssim),
        percep: scalar(v.percep),
        adv: v.adv.map(scalar).unwrap_or(0.0),
        total: scalar(v.total),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;
    use crate::rng::{rng_at, Stream};
    use rand::Rng;

    fn randt(shape: [usize; 4], tag: u64) -> Tensor<f64> {
        let mut rng = rng_at(RunSeed(17), Stream::Check, &[tag]);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn l1_golden_values() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full([1, 3, 4, 4], 0.75));
        let b = tape.constant(Tensor::full([1, 3, 4, 4], 0.5));
        let l = l1_loss(&mut tape, a, b).unwrap();
        assert!((tape.value(l).as_slice()[0] - 0.25).abs() < 1e-12);
        // symmetric
        let l2 = l1_loss(&mut tape, b, a).unwrap();
        assert_eq!(tape.value(l).as_slice()[0], tape.value(l2).as_slice()[0]);
        // identical -> 0
        let l3 = l1_loss(&mut tape, a, a).unwrap();
        assert_eq!(tape.value(l3).as_slice()[0], 0.0);
    }

    #[test]
    fn l1_rejects_shape_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([1, 3, 4, 4]));
        let b = tape.constant(Tensor::zeros([1, 3, 4, 5]));
        assert!(l1_loss(&mut tape, a, b).is_err());
    }

    #[test]
    fn msssim_identical_images_give_zero() {
        let x = randt([1, 3, 32, 32], 0);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x);
        let l = ms_ssim_loss(&mut tape, a, b).unwrap();
        assert!(tape.value(l).as_slice()[0].abs() < 1e-9);
    }

    #[test]
    fn msssim_constant_images_match_closed_form() {
        // 16x16 supports a single scale; for constants the contrast and
        // structure terms are exactly 1, leaving the luminance ratio.
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full([1, 3, 16, 16], 0.5));
        let b = tape.constant(Tensor::full([1, 3, 16, 16], 0.25));
        let l = ms_ssim_loss(&mut tape, a, b).unwrap();
        let lum = (2.0 * 0.5 * 0.25 + SSIM_C1) / (0.25 + 0.0625 + SSIM_C1);
        let got = tape.value(l).as_slice()[0];
        assert!((got - (1.0 - lum)).abs() < 1e-9, "got {got}, want {}", 1.0 - lum);
        assert!((got - 0.19993).abs() < 5e-5);
    }

    #[test]
    fn msssim_too_small_image_errors() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([1, 3, 8, 8]));
        let b = tape.constant(Tensor::zeros([1, 3, 8, 8]));
        assert!(ms_ssim_loss(&mut tape, a, b).is_err());
    }

    #[test]
    fn scale_count_follows_image_size() {
        assert_eq!(feasible_scales(10, 10), 0);
        assert_eq!(feasible_scales(16, 16), 1);
        assert_eq!(feasible_scales(32, 32), 2);
        assert_eq!(feasible_scales(64, 64), 3);
        assert_eq!(feasible_scales(1024, 1024), 5);
    }

    #[test]
    fn perceptual_zero_for_identical_positive_otherwise() {
        let ext = RandomConvExtractor::<f64>::new();
        let x = randt([1, 3, 16, 16], 1);
        let y = randt([1, 3, 16, 16], 2);
        let mut tape = Tape::new();
        let a = tape.constant(x.clone());
        let b = tape.constant(x);
        let c = tape.constant(y);
        let same = perceptual_loss(&mut tape, a, b, &ext).unwrap();
        assert_eq!(tape.value(same).as_slice()[0], 0.0);
        let diff = perceptual_loss(&mut tape, a, c, &ext).unwrap();
        assert!(tape.value(diff).as_slice()[0] > 0.0);
    }

    #[test]
    fn default_extractor_is_fixed_across_instances() {
        let a = RandomConvExtractor::<f32>::new();
        let b = RandomConvExtractor::<f32>::new();
        assert_eq!(
            a.store.get("percep.layer0.weight").as_slice(),
            b.store.get("percep.layer0.weight").as_slice()
        );
    }

    #[test]
    fn vgg_extractor_tap_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut reg = ParamReg::new(&mut store, RunSeed(0));
        for (name, ci, co) in VGG_LAYERS {
            reg.param(&format!("{name}.weight"), [co, ci, 3, 3], Init::TruncNormal(0.02));
            reg.param(&format!("{name}.bias"), [1, co, 1, 1], Init::Zeros);
        }
        let ext = VggExtractor::from_store(store).unwrap();
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 3, 64, 64], 0.5f32));
        let taps = ext.features(&mut tape, x);
        let shapes: Vec<_> = taps.iter().map(|&t| tape.shape(t)).collect();
        assert_eq!(
            shapes,
            vec![
                [1, 64, 64, 64],
                [1, 128, 32, 32],
                [1, 256, 16, 16],
                [1, 512, 8, 8],
                [1, 512, 4, 4]
            ]
        );
    }

    #[test]
    fn vgg_extractor_rejects_wrong_shapes() {
        let mut store = ParamStore::<f32>::new();
        store.set("conv1_1.weight", Tensor::zeros([64, 3, 3, 3]));
        assert!(VggExtractor::from_store(store).is_err());
    }

    #[test]
    fn discriminator_logit_map_shape_and_size_check() {
        let disc = Discriminator::new();
        let mut store = ParamStore::<f32>::new();
        disc.register(&mut ParamReg::new(&mut store, RunSeed(0)));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::full([1, 3, 128, 128], 0.4f32));
        let y = disc.try_forward(&mut Ctx::new(&mut tape, &vars), x).unwrap();
        let [n, c, h, w] = tape.shape(y);
        assert_eq!((n, c), (1, 1));
        assert!(h > 1 && h < 128 && w > 1 && w < 128);

        let small = tape.constant(Tensor::full([1, 3, 64, 64], 0.4f32));
        assert!(disc.try_forward(&mut Ctx::new(&mut tape, &vars), small).is_err());
    }

    #[test]
    fn adversarial_golden_values_at_zero_logits() {
        // All-zero discriminator weights emit logit 0 everywhere.
        let disc = Discriminator::new();
        let mut store = ParamStore::<f32>::new();
        disc.register(&mut ParamReg::new(&mut store, RunSeed(0)));
        for name in ["disc.conv0", "disc.conv1", "disc.conv2", "disc.conv3", "disc.conv4"] {
            let w = store.get(&format!("{name}.weight")).shape();
            store.set(&format!("{name}.weight"), Tensor::zeros(w));
        }
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let pred = tape.constant(Tensor::full([1, 3, 64, 64], 0.3f32));
        let real = tape.constant(Tensor::full([1, 3, 64, 64], 0.6f32));
        let (g, d) =
            adversarial_losses(&mut Ctx::new(&mut tape, &vars), &disc, pred, real).unwrap();
        let ln2 = std::f32::consts::LN_2;
        assert!((tape.value(g).as_slice()[0] - ln2).abs() < 1e-6);
        assert!((tape.value(d).as_slice()[0] - 2.0 * ln2).abs() < 1e-6);
    }

    #[test]
    fn adversarial_gradient_routing() {
        let disc = Discriminator::new();
        let mut store = ParamStore::<f32>::new();
        disc.register(&mut ParamReg::new(&mut store, RunSeed(0)));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| true);
        let pred_leaf = tape.leaf(randt([1, 3, 64, 64], 3).cast::<f32>());
        let real = tape.constant(randt([1, 3, 64, 64], 4).cast::<f32>());
        let (g_loss, d_loss) =
            adversarial_losses(&mut Ctx::new(&mut tape, &vars), &disc, pred_leaf, real).unwrap();

        // g_loss reaches the prediction
        let g = tape.backward(g_loss);
        assert!(g.get(pred_leaf).is_some());
        // d_loss never reaches the prediction, but reaches every D parameter
        let d = tape.backward(d_loss);
        assert!(d.get(pred_leaf).is_none());
        for (name, var) in vars.iter() {
            let grad = d.get(*var).unwrap_or_else(|| panic!("no d-grad for {name}"));
            assert!(grad.max_abs() > 0.0, "dead discriminator parameter {name}");
        }
    }

    #[test]
    fn total_loss_breakdown_identity_and_stage2_zero() {
        let ext = RandomConvExtractor::<f64>::new();
        let disc = Discriminator::new();
        let mut store = ParamStore::<f64>::new();
        disc.register(&mut ParamReg::new(&mut store, RunSeed(0)));
        let w = LossWeights::default();
        let pred_t = randt([1, 3, 64, 64], 5);
        let target_t = randt([1, 3, 64, 64], 6);

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let pred = tape.constant(pred_t.clone());
        let target = tape.constant(target_t.clone());
        let lv = total_loss(&mut Ctx::new(&mut tape, &vars), pred, target, &w, Stage::One, &ext, Some(&disc)).unwrap();
        let bd = read_breakdown(&tape, &lv);
        assert!(bd.identity_residual(&w) < 1e-12);
        assert!(bd.l1 >= 0.0 && bd.ssim_term >= 0.0 && bd.percep >= 0.0);

        // stage 2: adversarial term zero, total excludes it
        let lv2 = total_loss(&mut Ctx::new(&mut tape, &vars), pred, target, &w, Stage::Two, &ext, None).unwrap();
        let bd2 = read_breakdown(&tape, &lv2);
        assert_eq!(bd2.adv, 0.0);
        assert!(bd2.identity_residual(&w) < 1e-12);

        // pred == target in stage 2 -> exactly zero
        let same = total_loss(&mut Ctx::new(&mut tape, &vars), pred, pred, &w, Stage::Two, &ext, None).unwrap();
        let bd3 = read_breakdown(&tape, &same);
        assert_eq!(bd3.total, 0.0);
    }
}
