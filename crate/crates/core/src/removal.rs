//! The Shadow Removal network: a ConvNext-based U-Net primary branch plus a
//! frequency branch (Haar split, fast-Fourier-convolution blocks on the
//! low band), fused into a shadow-free RGB prediction.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fft::DftMode;
use crate::kernels::ConvSpec;
use crate::nn::{AttentionBlock, ChannelLn, Conv2d, Ctx, ParamReg};
use crate::tape::Var;
use crate::tensor::Real;

/// Residual block: x + pw2(GELU(pw1(LN(dw7(x))))), shape preserving,
/// single nonlinearity.
#[derive(Debug, Clone)]
pub struct ConvNextBlock {
    pub channels: usize,
    dw7: Conv2d,
    ln: ChannelLn,
    pw1: Conv2d,
    pw2: Conv2d,
}

impl ConvNextBlock {
    pub fn new(name: &str, c: usize) -> Self {
        ConvNextBlock {
            channels: c,
            dw7: Conv2d::new(
                format!("{name}.dw7"),
                c,
                c,
                7,
                ConvSpec { stride: 1, pad: 3, groups: c },
            ),
            ln: ChannelLn::new(format!("{name}.ln"), c),
            pw1: Conv2d::new(format!("{name}.pw1"), c, 4 * c, 1, ConvSpec::unit()),
            pw2: Conv2d::new(format!("{name}.pw2"), 4 * c, c, 1, ConvSpec::unit()),
        }
    }

    /// Name of the contraction weight (zeroing it makes the block an identity).
    pub fn contraction_weight(&self) -> String {
        format!("{}.weight", self.pw2.name)
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        self.dw7.register(reg);
        self.ln.register(reg);
        self.pw1.register(reg);
        self.pw2.register(reg);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let h = self.dw7.forward(ctx, x);
        let h = self.ln.forward(ctx, h);
        let h = self.pw1.forward(ctx, h);
        let h = ctx.tape.gelu(h);
        let h = self.pw2.forward(ctx, h);
        ctx.tape.add(x, h)
    }

    /// Contract-checked entry point.
    pub fn try_forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x)[1];
        if c != self.channels {
            return Err(Error::numeric(format!(
                "ConvNext block expects {} channels, got {c}",
                self.channels
            )));
        }
        Ok(self.forward(ctx, x))
    }
}

/// Fast-Fourier-convolution block: local 3x3 half, global spectral half
/// (real 2D FFT -> pointwise map on stacked real/imag channels -> GELU ->
/// inverse FFT), concatenated, 1x1 fused, residual.
#[derive(Debug, Clone)]
pub struct FfcBlock {
    pub channels: usize,
    local: Conv2d,
    spectral: Conv2d,
    fuse: Conv2d,
}

impl FfcBlock {
    pub fn new(name: &str, c: usize) -> Self {
        assert!(c % 2 == 0, "FFC block needs an even channel count");
        let half = c / 2;
        FfcBlock {
            channels: c,
            local: Conv2d::new(format!("{name}.local"), half, half, 3, ConvSpec { stride: 1, pad: 1, groups: 1 }),
            // packed spectrum of the global half has 2 * (c/2) = c channels
            spectral: Conv2d::new(format!("{name}.spectral"), c, c, 1, ConvSpec::unit()),
            fuse: Conv2d::new(format!("{name}.fuse"), c, c, 1, ConvSpec::unit()),
        }
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        self.local.register(reg);
        self.spectral.register(reg);
        self.fuse.register(reg);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let half = self.channels / 2;
        let w = ctx.tape.shape(x)[3];
        let xl = ctx.tape.slice_c(x, 0, half);
        let xg = ctx.tape.slice_c(x, half, half);
        let local = self.local.forward(ctx, xl);
        let spec = ctx.tape.rfft2(xg);
        let h = self.spectral.forward(ctx, spec);
        let h = ctx.tape.gelu(h);
        let global = ctx.tape.irfft2(h, w);
        let joined = ctx.tape.concat_c(&[local, global]);
        let fused = self.fuse.forward(ctx, joined);
        ctx.tape.add(x, fused)
    }

    pub fn try_forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x)[1];
        if c % 2 != 0 {
            return Err(Error::numeric(format!("FFC block needs even channels, got {c}")));
        }
        if c != self.channels {
            return Err(Error::numeric(format!(
                "FFC block expects {} channels, got {c}",
                self.channels
            )));
        }
        Ok(self.forward(ctx, x))
    }
}

/// ConvNext U-Net: stem, three channel-doubling stride-2 downsamples each
/// followed by ConvNext blocks, attention bottleneck, three pixel-shuffle
/// upsamples with additive skips and attention, latent out at input size.
#[derive(Debug, Clone)]
pub struct UNet {
    pub base: usize,
    stem: Conv2d,
    down_ln: Vec<ChannelLn>,
    down_conv: Vec<Conv2d>,
    enc_blocks: Vec<Vec<ConvNextBlock>>,
    bot_attn: AttentionBlock,
    up_expand: Vec<Conv2d>,
    up_attn: Vec<AttentionBlock>,
}

impl UNet {
    pub fn new(name: &str, base: usize, blocks_per_level: [usize; 3]) -> Self {
        let mut down_ln = Vec::new();
        let mut down_conv = Vec::new();
        let mut enc_blocks = Vec::new();
        let mut c = base;
        for i in 0..3 {
            down_ln.push(ChannelLn::new(format!("{name}.down{i}.ln"), c));
            down_conv.push(Conv2d::new(
                format!("{name}.down{i}.conv"),
                c,
                2 * c,
                2,
                ConvSpec { stride: 2, pad: 0, groups: 1 },
            ));
            c *= 2;
            enc_blocks.push(
                (0..blocks_per_level[i])
                    .map(|b| ConvNextBlock::new(&format!("{name}.enc{i}.blk{b}"), c))
                    .collect(),
            );
        }
        let mut up_expand = Vec::new();
        let mut up_attn = Vec::new();
        for i in 0..3 {
            // c -> 2c, pixel shuffle -> c/2 at doubled resolution
            up_expand.push(Conv2d::new(format!("{name}.up{i}.expand"), c, 2 * c, 1, ConvSpec::unit()));
            c /= 2;
            up_attn.push(AttentionBlock::new(&format!("{name}.up{i}.attn"), c));
        }
        UNet {
            base,
            stem: Conv2d::new(format!("{name}.stem"), 3, base, 3, ConvSpec { stride: 1, pad: 1, groups: 1 }),
            down_ln,
            down_conv,
            enc_blocks,
            bot_attn: AttentionBlock::new(&format!("{name}.bot.attn"), 8 * base),
            up_expand,
            up_attn,
        }
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        self.stem.register(reg);
        for i in 0..3 {
            self.down_ln[i].register(reg);
            self.down_conv[i].register(reg);
            for b in &self.enc_blocks[i] {
                b.register(reg);
            }
            self.up_expand[i].register(reg);
            self.up_attn[i].register(reg);
        }
        self.bot_attn.register(reg);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let mut f = self.stem.forward(ctx, x);
        let mut skips = vec![f];
        for i in 0..3 {
            let n = self.down_ln[i].forward(ctx, f);
            f = self.down_conv[i].forward(ctx, n);
            for b in &self.enc_blocks[i] {
                f = b.forward(ctx, f);
            }
            if i < 2 {
                skips.push(f);
            }
        }
        f = self.bot_attn.forward(ctx, f);
        for i in 0..3 {
            f = self.up_expand[i].forward(ctx, f);
            f = ctx.tape.pixel_shuffle2(f);
            let skip = skips[2 - i];
            f = ctx.tape.add(f, skip);
            f = self.up_attn[i].forward(ctx, f);
        }
        f
    }

    pub fn try_forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.shape(x);
        if c != 3 {
            return Err(Error::numeric(format!("U-Net expects RGB input, got {c} channels")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::numeric(format!(
                "U-Net input size must be divisible by 16, got {h}x{w}"
            )));
        }
        Ok(self.forward(ctx, x))
    }
}

/// The frequency branch: one Haar level; the LL band runs through two FFC
/// blocks, the three detail bands through a 3x3 stem; both halves are
/// upsampled back and merged pointwise.
#[derive(Debug, Clone)]
pub struct DwtFfcBranch {
    pub out_channels: usize,
    ll_stem: Conv2d,
    ffc: Vec<FfcBlock>,
    high_stem: Conv2d,
    merge: Conv2d,
}

impl DwtFfcBranch {
    pub fn new(name: &str, c: usize) -> Self {
        DwtFfcBranch {
            out_channels: c,
            ll_stem: Conv2d::new(format!("{name}.ll_stem"), 3, c, 3, ConvSpec { stride: 1, pad: 1, groups: 1 }),
            ffc: (0..2).map(|i| FfcBlock::new(&format!("{name}.ffc{i}"), c)).collect(),
            high_stem: Conv2d::new(format!("{name}.high_stem"), 9, c, 3, ConvSpec { stride: 1, pad: 1, groups: 1 }),
            merge: Conv2d::new(format!("{name}.merge"), 2 * c, c, 1, ConvSpec::unit()),
        }
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        self.ll_stem.register(reg);
        for f in &self.ffc {
            f.register(reg);
        }
        self.high_stem.register(reg);
        self.merge.register(reg);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let sub = ctx.tape.haar_dwt2(x); // (N, 12, H/2, W/2): [ll | lh | hl | hh]
        let ll = ctx.tape.slice_c(sub, 0, 3);
        let high = ctx.tape.slice_c(sub, 3, 9);
        let mut low = self.ll_stem.forward(ctx, ll);
        low = ctx.tape.gelu(low);
        for f in &self.ffc {
            low = f.forward(ctx, low);
        }
        let mut hi = self.high_stem.forward(ctx, high);
        hi = ctx.tape.gelu(hi);
        let low_up = ctx.tape.upsample2(low);
        let hi_up = ctx.tape.upsample2(hi);
        let joined = ctx.tape.concat_c(&[low_up, hi_up]);
        self.merge.forward(ctx, joined)
    }
}

/// The full Shadow Removal module: enabled branches produce full-resolution
/// latents, fused by a 3x3 convolution to RGB and squashed with a sigmoid.
#[derive(Debug, Clone)]
pub struct RemovalNet {
    pub unet: Option<UNet>,
    pub dwtffc: Option<DwtFfcBranch>,
    fuse: Conv2d,
}

/// Parameter-name prefix for the removal module.
pub const REMOVAL_PREFIX: &str = "removal.";

impl RemovalNet {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        if !cfg.enable_unet_branch && !cfg.enable_dwtffc_branch {
            return Err(Error::config(
                "removal network needs at least one of the U-Net / DWT-FFC branches",
            ));
        }
        if cfg.enable_dwtffc_branch && cfg.base_channels % 2 != 0 {
            return Err(Error::config(
                "key 'base_channels': must be even when the DWT-FFC branch is enabled",
            ));
        }
        let b = cfg.base_channels;
        let unet = cfg
            .enable_unet_branch
            .then(|| UNet::new("removal.unet", b, cfg.blocks_per_level));
        let dwtffc = cfg.enable_dwtffc_branch.then(|| DwtFfcBranch::new("removal.dwtffc", b));
        let branches = unet.is_some() as usize + dwtffc.is_some() as usize;
        Ok(RemovalNet {
            unet,
            dwtffc,
            fuse: Conv2d::new("removal.fuse", branches * b, 3, 3, ConvSpec { stride: 1, pad: 1, groups: 1 }),
        })
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        if let Some(u) = &self.unet {
            u.register(reg);
        }
        if let Some(d) = &self.dwtffc {
            d.register(reg);
        }
        self.fuse.register(reg);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.shape(x);
        if c != 3 {
            return Err(Error::numeric(format!("removal network expects RGB input, got {c} channels")));
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::numeric(format!(
                "removal network input size must be divisible by 16, got {h}x{w}"
            )));
        }
        let mut latents = Vec::new();
        if let Some(u) = &self.unet {
            latents.push(u.forward(ctx, x));
        }
        if let Some(d) = &self.dwtffc {
            latents.push(d.forward(ctx, x));
        }
        let joined =
            if latents.len() == 1 { latents[0] } else { ctx.tape.concat_c(&latents) };
        let rgb = self.fuse.forward(ctx, joined);
        Ok(ctx.tape.sigmoid(rgb))
    }
}

/// Keep the naive-vs-fast switch in one place for the frequency branch.
pub const REMOVAL_DFT_MODE: DftMode = DftMode::Fast;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Ctx, ParamReg, ParamStore};
    use crate::rng::{rng_at, RunSeed, Stream};
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn randt(shape: [usize; 4], tag: u64) -> Tensor<f32> {
        let mut rng = rng_at(RunSeed(9), Stream::Check, &[tag]);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn convnext_block_preserves_shape_and_zero_pw2_is_identity() {
        let blk = ConvNextBlock::new("blk", 32);
        let mut store = ParamStore::<f32>::new();
        blk.register(&mut ParamReg::new(&mut store, RunSeed(0)));
        let x = randt([1, 32, 16, 16], 0);

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let y = blk.try_forward(&mut Ctx::new(&mut tape, &vars), xv).unwrap();
        assert_eq!(tape.shape(y), [1, 32, 16, 16]);

        // zero the contraction -> exact identity
        store.set(&blk.contraction_weight(), Tensor::zeros([32, 128, 1, 1]));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let y = blk.forward(&mut Ctx::new(&mut tape, &vars), xv);
        assert_eq!(tape.value(y).sub(&x).max_abs(), 0.0);
    }

    #[test]
    fn convnext_block_rejects_channel_mismatch() {
        let blk = ConvNextBlock::new("blk", 8);
        let mut store = ParamStore::<f32>::new();
        blk.register(&mut ParamReg::new(&mut store, RunSeed(0)));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let xv = tape.constant(randt([1, 4, 8, 8], 1));
        assert!(blk.try_forward(&mut Ctx::new(&mut tape, &vars), xv).is_err());
    }

    #[test]
    fn unet_shapes_and_divisibility() {
        let unet = UNet::new("u", 8, [1, 1, 1]);
        let mut store = ParamStore::<f32>::new();
        unet.register(&mut ParamReg::new(&mut store, RunSeed(0)));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let xv = tape.constant(randt([1, 3, 64, 64], 2));
        let y = unet.try_forward(&mut Ctx::new(&mut tape, &vars), xv).unwrap();
        assert_eq!(tape.shape(y), [1, 8, 64, 64]);

        let bad = tape.constant(randt([1, 3, 48, 64], 3));
        // 48 is divisible by 16; 63 is not
        let worse = tape.constant(randt([1, 3, 63, 64], 4).map(|v| v.clamp(0.0, 1.0)));
        assert!(unet.try_forward(&mut Ctx::new(&mut tape, &vars), bad).is_ok());
        assert!(unet.try_forward(&mut Ctx::new(&mut tape, &vars), worse).is_err());
    }

    #[test]
    fn ffc_block_shape_and_zeroed_global_reduces_to_local() {
        let blk = FfcBlock::new("ffc", 8);
        let mut store = ParamStore::<f32>::new();
        blk.register(&mut ParamReg::new(&mut store, RunSeed(0)));
        let x = randt([1, 8, 16, 16], 5);

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let y = blk.try_forward(&mut Ctx::new(&mut tape, &vars), xv).unwrap();
        assert_eq!(tape.shape(y), [1, 8, 16, 16]);

        // Zero the spectral map and make the fusion a pass-through: the block
        // must then equal x + fuse(concat(local(xl), 0)) = local residual.
        store.set("ffc.spectral.weight", Tensor::zeros([8, 8, 1, 1]));
        store.set("ffc.spectral.bias", Tensor::zeros([1, 8, 1, 1]));
        let mut v = vec![0.0f32; 64];
        for i in 0..8 {
            v[i * 8 + i] = 1.0;
        }
        store.set("ffc.fuse.weight", Tensor::new([8, 8, 1, 1], v));
        store.set("ffc.fuse.bias", Tensor::zeros([1, 8, 1, 1]));

        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let y = blk.forward(&mut Ctx::new(&mut tape, &vars), xv);

        // reference: local conv on the first half, zero second half, + x
        let mut tape2 = Tape::new();
        let vars2 = store.bind(&mut tape2, |_| false);
        let xv2 = tape2.constant(x.clone());
        let xl = tape2.slice_c(xv2, 0, 4);
        let lw = vars2["ffc.local.weight"];
        let lb = vars2["ffc.local.bias"];
        let local = tape2.conv2d(xl, lw, Some(lb), ConvSpec { stride: 1, pad: 1, groups: 1 });
        let zero = tape2.constant(Tensor::zeros([1, 4, 16, 16]));
        let cat = tape2.concat_c(&[local, zero]);
        let want = tape2.add(xv2, cat);

        let diff = tape.value(y).sub(tape2.value(want)).max_abs();
        assert!(diff < 2e-6, "zeroed global branch diff {diff}");
    }

    #[test]
    fn removal_forward_all_branch_configs() {
        for (unet, dwt) in [(true, true), (true, false), (false, true)] {
            let cfg = ModelConfig {
                base_channels: 8,
                blocks_per_level: [1, 1, 1],
                enable_unet_branch: unet,
                enable_dwtffc_branch: dwt,
                ..ModelConfig::default()
            };
            let net = RemovalNet::new(&cfg).unwrap();
            let mut store = ParamStore::<f32>::new();
            net.register(&mut ParamReg::new(&mut store, RunSeed(0)));
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, |_| false);
            let xv = tape.constant(randt([1, 3, 32, 32], 6));
            let y = net.forward(&mut Ctx::new(&mut tape, &vars), xv).unwrap();
            assert_eq!(tape.shape(y), [1, 3, 32, 32]);
            let out = tape.value(y);
            assert!(out.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn removal_rejects_disabled_branches_and_bad_sizes() {
        let cfg = ModelConfig {
            enable_unet_branch: false,
            enable_dwtffc_branch: false,
            ..ModelConfig::default()
        };
        assert!(RemovalNet::new(&cfg).is_err());

        let net = RemovalNet::new(&ModelConfig {
            base_channels: 8,
            blocks_per_level: [1, 1, 1],
            ..ModelConfig::default()
        })
        .unwrap();
        let mut store = ParamStore::<f32>::new();
        net.register(&mut ParamReg::new(&mut store, RunSeed(0)));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let xv = tape.constant(randt([1, 3, 30, 32], 7));
        assert!(net.forward(&mut Ctx::new(&mut tape, &vars), xv).is_err());
    }

    #[test]
    fn every_parameter_gets_gradient_in_each_branch_config() {
        for (unet, dwt) in [(true, true), (true, false), (false, true)] {
            let cfg = ModelConfig {
                base_channels: 8,
                blocks_per_level: [1, 1, 1],
                enable_unet_branch: unet,
                enable_dwtffc_branch: dwt,
                ..ModelConfig::default()
            };
            let net = RemovalNet::new(&cfg).unwrap();
            let mut store = ParamStore::<f32>::new();
            net.register(&mut ParamReg::new(&mut store, RunSeed(0)));
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, |_| true);
            let xv = tape.constant(randt([1, 3, 32, 32], 8));
            let target = tape.constant(randt([1, 3, 32, 32], 9));
            let y = net.forward(&mut Ctx::new(&mut tape, &vars), xv).unwrap();
            let d = tape.sub(y, target);
            let a = tape.abs(d);
            let loss = tape.mean_all(a);
            let grads = tape.backward(loss);
            for (name, var) in vars.iter() {
                let g = grads
                    .get(*var)
                    .unwrap_or_else(|| panic!("no gradient for {name} (unet={unet}, dwt={dwt})"));
                assert!(
                    g.max_abs() > 0.0,
                    "dead parameter {name} (unet={unet}, dwt={dwt})"
                );
            }
        }
    }
}
