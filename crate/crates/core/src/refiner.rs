//! The refinement module: an encoder-decoder transformer whose blocks
//! compute attention between Fourier-transformed query/key features.
//!
//! Two readings of the correlation step exist and both are implemented:
//! `matrix` (the default) contracts the frequency axis into a channel-by-
//! channel matrix and applies the inverse transform along its rows;
//! `elementwise` multiplies the spectra per frequency, giving a circular
//! correlation map that gates the values. Each runs in `fast` (FFT) or
//! `naive` (direct DFT sum) mode, and the two modes must agree - that
//! equivalence is part of the self-check suite.

use crate::config::{FfaVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::fft::DftMode;
use crate::kernels::ConvSpec;
use crate::nn::{ChannelLn, Conv2d, Ctx, Init, ParamReg};
use crate::tape::Var;
use crate::tensor::Real;

const TAU_FLOOR: f64 = 1e-3;

/// Q/K/V projection: pointwise 1x1 then depthwise 3x3, no biases.
#[derive(Debug, Clone)]
pub struct QkvProj {
    pw: Conv2d,
    dw: Conv2d,
}

impl QkvProj {
    pub fn new(name: &str, c: usize) -> Self {
        QkvProj {
            pw: Conv2d::new(format!("{name}.pw"), c, c, 1, ConvSpec::unit()).no_bias(),
            dw: Conv2d::new(format!("{name}.dw"), c, c, 3, ConvSpec { stride: 1, pad: 1, groups: c })
                .no_bias(),
        }
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        self.pw.register(reg);
        self.dw.register(reg);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let h = self.pw.forward(ctx, x);
        self.dw.forward(ctx, h)
    }
}

/// The frequency attention core. Parameters: a learnable temperature
/// (floor-clamped) and a scalar affine for the layer norm on the
/// correlation map.
#[derive(Debug, Clone)]
pub struct FfaAttention {
    pub name: String,
    pub heads: usize,
    pub variant: FfaVariant,
}

impl FfaAttention {
    pub fn new(name: impl Into<String>, heads: usize, variant: FfaVariant) -> Self {
        FfaAttention { name: name.into(), heads, variant }
    }

    fn tau_name(&self) -> String {
        format!("{}.tau", self.name)
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        reg.param(&self.tau_name(), [1, 1, 1, 1], Init::Ones);
        reg.param(&format!("{}.ln.scale", self.name), [1, 1, 1, 1], Init::Ones);
        reg.param(&format!("{}.ln.offset", self.name), [1, 1, 1, 1], Init::Zeros);
    }

    /// Aggregate values by the frequency correlation of Q and K.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        q: Var,
        k: Var,
        v: Var,
        mode: DftMode,
    ) -> Result<Var> {
        let shape = ctx.tape.shape(q);
        if ctx.tape.shape(k) != shape || ctx.tape.shape(v) != shape {
            return Err(Error::numeric("Q, K, V must share one shape"));
        }
        let [n, c, h, w] = shape;
        if c % self.heads != 0 {
            return Err(Error::numeric(format!(
                "channel count {c} not divisible by {} heads",
                self.heads
            )));
        }
        let ch = c / self.heads;
        let s = h * w;

        // Fold heads into the batch axis: (N, heads*ch, H, W) -> (N*heads, 1, ch, S).
        let fold = [n * self.heads, 1, ch, s];
        let qm = ctx.tape.reshape(q, fold);
        let km = ctx.tape.reshape(k, fold);
        let vm = ctx.tape.reshape(v, fold);

        // Unitary DFT along the flattened spatial axis.
        let qf = ctx.tape.dft_w(qm, mode);
        let kf = ctx.tape.dft_w(km, mode);
        let qre = ctx.tape.slice_c(qf, 0, 1);
        let qim = ctx.tape.slice_c(qf, 1, 1);
        let kre = ctx.tape.slice_c(kf, 0, 1);
        let kim = ctx.tape.slice_c(kf, 1, 1);

        // Complex correlation, transpose without conjugation.
        let (are, aim, idft_axis_packed) = match self.variant {
            FfaVariant::Matrix => {
                let rr = ctx.tape.matmul(qre, kre, true);
                let ii = ctx.tape.matmul(qim, kim, true);
                let ri = ctx.tape.matmul(qre, kim, true);
                let ir = ctx.tape.matmul(qim, kre, true);
                let are = ctx.tape.sub(rr, ii);
                let aim = ctx.tape.add(ri, ir);
                (are, aim, true)
            }
            FfaVariant::Elementwise => {
                let rr = ctx.tape.mul(qre, kre);
                let ii = ctx.tape.mul(qim, kim);
                let ri = ctx.tape.mul(qre, kim);
                let ir = ctx.tape.mul(qim, kre);
                let are = ctx.tape.sub(rr, ii);
                let aim = ctx.tape.add(ri, ir);
                (are, aim, false)
            }
        };
        let _ = idft_axis_packed;

        // Learnable temperature, floored to stay positive.
        let tau = ctx.p(&self.tau_name());
        let tau = ctx.tape.clamp_min(tau, T::cast_f64(TAU_FLOOR));
        let inv_tau = ctx.tape.recip(tau);
        let are = ctx.tape.mul(are, inv_tau);
        let aim = ctx.tape.mul(aim, inv_tau);

        // Back to space: unitary inverse DFT along the last axis
        // (rows of the ch x ch matrix, or the S axis for the
        // elementwise variant), real part, layer norm over the map.
        let af = ctx.tape.concat_c(&[are, aim]);
        let ai = ctx.tape.idft_w(af, mode);
        let re = ctx.tape.slice_c(ai, 0, 1);
        let normed = ctx.tape.standardize_chw(re, crate::nn::LN_EPS);
        let scale = ctx.p(&format!("{}.ln.scale", self.name));
        let offset = ctx.p(&format!("{}.ln.offset", self.name));
        let a = ctx.tape.mul(normed, scale);
        let a = ctx.tape.add(a, offset);

        // Aggregate the values.
        let fa = match self.variant {
            FfaVariant::Matrix => ctx.tape.matmul(a, vm, false),
            FfaVariant::Elementwise => ctx.tape.mul(a, vm),
        };
        Ok(ctx.tape.reshape(fa, [n, c, h, w]))
    }
}

/// One transformer block: frequency attention with a residual 1x1 output
/// projection, then a gated feed-forward with its own residual. Output
/// projections start at zero so a fresh block is an exact identity.
#[derive(Debug, Clone)]
pub struct FfatBlock {
    pub channels: usize,
    q: QkvProj,
    k: QkvProj,
    v: QkvProj,
    attn: FfaAttention,
    out: Conv2d,
    ff_ln: ChannelLn,
    ff_expand: Conv2d,
    ff_contract: Conv2d,
}

impl FfatBlock {
    pub fn new(name: &str, c: usize, heads: usize, variant: FfaVariant) -> Self {
        FfatBlock {
            channels: c,
            q: QkvProj::new(&format!("{name}.q"), c),
            k: QkvProj::new(&format!("{name}.k"), c),
            v: QkvProj::new(&format!("{name}.v"), c),
            attn: FfaAttention::new(format!("{name}.attn"), heads, variant),
            out: Conv2d::new(format!("{name}.out"), c, c, 1, ConvSpec::unit()).zero_init(),
            ff_ln: ChannelLn::new(format!("{name}.ff.ln"), c),
            ff_expand: Conv2d::new(format!("{name}.ff.expand"), c, 2 * c, 1, ConvSpec::unit()),
            ff_contract: Conv2d::new(format!("{name}.ff.contract"), c, c, 1, ConvSpec::unit())
                .zero_init(),
        }
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        self.q.register(reg);
        self.k.register(reg);
        self.v.register(reg);
        self.attn.register(reg);
        self.out.register(reg);
        self.ff_ln.register(reg);
        self.ff_expand.register(reg);
        self.ff_contract.register(reg);
    }

    /// Project the block input into Q, K, V.
    pub fn project_qkv<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> (Var, Var, Var) {
        (self.q.forward(ctx, x), self.k.forward(ctx, x), self.v.forward(ctx, x))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, mode: DftMode) -> Result<Var> {
        let (q, k, v) = self.project_qkv(ctx, x);
        let fa = self.attn.forward(ctx, q, k, v, mode)?;
        let o = self.out.forward(ctx, fa);
        let f1 = ctx.tape.add(x, o);
        // gated feed-forward
        let u = self.ff_ln.forward(ctx, f1);
        let e = self.ff_expand.forward(ctx, u);
        let gate = ctx.tape.slice_c(e, 0, self.channels);
        let val = ctx.tape.slice_c(e, self.channels, self.channels);
        let g = ctx.tape.gelu(gate);
        let h = ctx.tape.mul(g, val);
        let o2 = self.ff_contract.forward(ctx, h);
        Ok(ctx.tape.add(f1, o2))
    }

    pub fn try_forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, mode: DftMode) -> Result<Var> {
        let c = ctx.tape.shape(x)[1];
        if c != self.channels {
            return Err(Error::numeric(format!(
                "FFAT block expects {} channels, got {c}",
                self.channels
            )));
        }
        self.forward(ctx, x, mode)
    }
}

/// Encoder-decoder refiner: two FFAT blocks per resolution level on each
/// path, strided-conv downsampling, pixel-shuffle upsampling, concatenation
/// skips with 1x1 reduction, and a zero-initialized global correction head,
/// so a fresh refiner is the identity on [0,1] images.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub levels: usize,
    stem: Conv2d,
    enc_blocks: Vec<Vec<FfatBlock>>,
    downs: Vec<Conv2d>,
    bottom: Vec<FfatBlock>,
    up_expand: Vec<Conv2d>,
    skip_reduce: Vec<Conv2d>,
    dec_blocks: Vec<Vec<FfatBlock>>,
    head: Conv2d,
}

/// Parameter-name prefix for the refiner module.
pub const REFINER_PREFIX: &str = "refiner.";

impl Refiner {
    pub fn new(cfg: &ModelConfig) -> Self {
        let name = "refiner";
        let levels = cfg.refiner_levels;
        let c0 = cfg.refiner_channels;
        let heads = cfg.ffa_heads;
        let variant = cfg.ffa_variant;
        let blk = |nm: String, c: usize| FfatBlock::new(&nm, c, heads, variant);

        let mut enc_blocks = Vec::new();
        let mut downs = Vec::new();
        let mut c = c0;
        for i in 0..levels.saturating_sub(1) {
            enc_blocks.push(vec![
                blk(format!("{name}.enc{i}.blk0"), c),
                blk(format!("{name}.enc{i}.blk1"), c),
            ]);
            downs.push(Conv2d::new(
                format!("{name}.down{i}"),
                c,
                2 * c,
                2,
                ConvSpec { stride: 2, pad: 0, groups: 1 },
            ));
            c *= 2;
        }
        let bottom = vec![
            blk(format!("{name}.bottom.blk0"), c),
            blk(format!("{name}.bottom.blk1"), c),
        ];
        let mut up_expand = Vec::new();
        let mut skip_reduce = Vec::new();
        let mut dec_blocks = Vec::new();
        for i in (0..levels.saturating_sub(1)).rev() {
            // c -> 2c then shuffle -> c/2 at doubled resolution
            up_expand.push(Conv2d::new(format!("{name}.up{i}.expand"), c, 2 * c, 1, ConvSpec::unit()));
            c /= 2;
            skip_reduce.push(Conv2d::new(format!("{name}.up{i}.reduce"), 2 * c, c, 1, ConvSpec::unit()));
            dec_blocks.push(vec![
                blk(format!("{name}.dec{i}.blk0"), c),
                blk(format!("{name}.dec{i}.blk1"), c),
            ]);
        }
        Refiner {
            levels,
            stem: Conv2d::new(format!("{name}.stem"), 3, c0, 3, ConvSpec { stride: 1, pad: 1, groups: 1 }),
            enc_blocks,
            downs,
            bottom,
            up_expand,
            skip_reduce,
            dec_blocks,
            head: Conv2d::new(format!("{name}.head"), c0, 3, 3, ConvSpec { stride: 1, pad: 1, groups: 1 })
                .zero_init(),
        }
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        self.stem.register(reg);
        for blks in self.enc_blocks.iter().chain(self.dec_blocks.iter()) {
            for b in blks {
                b.register(reg);
            }
        }
        for d in &self.downs {
            d.register(reg);
        }
        for b in &self.bottom {
            b.register(reg);
        }
        for u in self.up_expand.iter().chain(self.skip_reduce.iter()) {
            u.register(reg);
        }
        self.head.register(reg);
    }

    /// Refine a removal output; the network predicts a correction added to
    /// the input, clamped back to [0, 1].
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, y: Var, mode: DftMode) -> Result<Var> {
        let [_, c, h, w] = ctx.tape.shape(y);
        if c != 3 {
            return Err(Error::numeric(format!("refiner expects RGB input, got {c} channels")));
        }
        let div = 1usize << (self.levels - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::numeric(format!(
                "refiner input size must be divisible by {div}, got {h}x{w}"
            )));
        }
        let mut f = self.stem.forward(ctx, y);
        let mut skips = Vec::new();
        for i in 0..self.levels - 1 {
            for b in &self.enc_blocks[i] {
                f = b.forward(ctx, f, mode)?;
            }
            skips.push(f);
            f = self.downs[i].forward(ctx, f);
        }
        for b in &self.bottom {
            f = b.forward(ctx, f, mode)?;
        }
        for (j, i) in (0..self.levels - 1).rev().enumerate() {
            f = self.up_expand[j].forward(ctx, f);
            f = ctx.tape.pixel_shuffle2(f);
            let skip = skips[i];
            let cat = ctx.tape.concat_c(&[f, skip]);
            f = self.skip_reduce[j].forward(ctx, cat);
            for b in &self.dec_blocks[j] {
                f = b.forward(ctx, f, mode)?;
            }
        }
        let corr = self.head.forward(ctx, f);
        let sum = ctx.tape.add(y, corr);
        Ok(ctx.tape.clamp01(sum))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Ctx, ParamStore};
    use crate::rng::{rng_at, RunSeed, Stream};
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use rand::Rng;

    fn randt(shape: [usize; 4], tag: u64) -> Tensor<f64> {
        let mut rng = rng_at(RunSeed(21), Stream::Check, &[tag]);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn block_with_params(c: usize, heads: usize, variant: FfaVariant) -> (FfatBlock, ParamStore<f64>) {
        let blk = FfatBlock::new("blk", c, heads, variant);
        let mut store = ParamStore::new();
        blk.register(&mut ParamReg::new(&mut store, RunSeed(5)));
        (blk, store)
    }

    #[test]
    fn qkv_is_linear_and_shape_preserving() {
        let (blk, store) = block_with_params(8, 1, FfaVariant::Matrix);
        let x = randt([1, 8, 4, 4], 0);
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let x2 = tape.constant(x.scale(2.0));
        let mut ctx = Ctx::new(&mut tape, &vars);
        let (q, k, v) = blk.project_qkv(&mut ctx, xv);
        for t in [q, k, v] {
            assert_eq!(tape.shape(t), [1, 8, 4, 4]);
        }
        let mut ctx = Ctx::new(&mut tape, &vars);
        let (q2, _, _) = blk.project_qkv(&mut ctx, x2);
        let doubled = tape.value(q).scale(2.0);
        assert!(tape.value(q2).sub(&doubled).max_abs() < 1e-12);

        // zero input -> zero projections (no biases anywhere)
        let zero = tape.constant(Tensor::zeros([1, 8, 4, 4]));
        let mut ctx = Ctx::new(&mut tape, &vars);
        let (qz, kz, vz) = blk.project_qkv(&mut ctx, zero);
        for t in [qz, kz, vz] {
            assert_eq!(tape.value(t).max_abs(), 0.0);
        }
    }

    #[test]
    fn attention_fast_matches_naive_both_variants() {
        for variant in [FfaVariant::Matrix, FfaVariant::Elementwise] {
            let attn = FfaAttention::new("a", 2, variant);
            let mut store = ParamStore::<f64>::new();
            attn.register(&mut ParamReg::new(&mut store, RunSeed(0)));
            let q = randt([1, 8, 8, 8], 1);
            let k = randt([1, 8, 8, 8], 2);
            let v = randt([1, 8, 8, 8], 3);
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, |_| false);
            let (qv, kv, vv) = (tape.constant(q), tape.constant(k), tape.constant(v));
            let fast = attn
                .forward(&mut Ctx::new(&mut tape, &vars), qv, kv, vv, DftMode::Fast)
                .unwrap();
            let naive = attn
                .forward(&mut Ctx::new(&mut tape, &vars), qv, kv, vv, DftMode::Naive)
                .unwrap();
            let d = tape.value(fast).sub(tape.value(naive)).max_abs();
            assert!(d < 1e-10, "variant {variant:?}: fast vs naive {d}");
        }
    }

    #[test]
    fn attention_annihilates_zero_query() {
        for variant in [FfaVariant::Matrix, FfaVariant::Elementwise] {
            let attn = FfaAttention::new("a", 1, variant);
            let mut store = ParamStore::<f64>::new();
            attn.register(&mut ParamReg::new(&mut store, RunSeed(0)));
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, |_| false);
            let q = tape.constant(Tensor::zeros([1, 4, 4, 4]));
            let k = tape.constant(randt([1, 4, 4, 4], 4));
            let v = tape.constant(randt([1, 4, 4, 4], 5));
            let fa = attn
                .forward(&mut Ctx::new(&mut tape, &vars), q, k, v, DftMode::Fast)
                .unwrap();
            assert!(tape.value(fa).max_abs() < 1e-12, "variant {variant:?}");
        }
    }

    #[test]
    fn head_count_never_changes_shapes() {
        for heads in [1, 2, 4] {
            let attn = FfaAttention::new("a", heads, FfaVariant::Matrix);
            let mut store = ParamStore::<f64>::new();
            attn.register(&mut ParamReg::new(&mut store, RunSeed(0)));
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, |_| false);
            let q = tape.constant(randt([2, 8, 4, 6], 6));
            let k = tape.constant(randt([2, 8, 4, 6], 7));
            let v = tape.constant(randt([2, 8, 4, 6], 8));
            let fa = attn
                .forward(&mut Ctx::new(&mut tape, &vars), q, k, v, DftMode::Fast)
                .unwrap();
            assert_eq!(tape.shape(fa), [2, 8, 4, 6]);
        }
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let attn = FfaAttention::new("a", 3, FfaVariant::Matrix);
        let mut store = ParamStore::<f64>::new();
        attn.register(&mut ParamReg::new(&mut store, RunSeed(0)));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let q = tape.constant(randt([1, 8, 2, 2], 9));
        let k = tape.constant(randt([1, 8, 2, 2], 10));
        let v = tape.constant(randt([1, 8, 2, 2], 11));
        assert!(attn.forward(&mut Ctx::new(&mut tape, &vars), q, k, v, DftMode::Fast).is_err());
    }

    #[test]
    fn zero_projections_make_block_identity() {
        for variant in [FfaVariant::Matrix, FfaVariant::Elementwise] {
            let (blk, store) = block_with_params(8, 2, variant);
            // out and ff_contract are zero-initialized by construction
            let x = randt([1, 8, 4, 4], 12);
            let mut tape = Tape::new();
            let vars = store.bind(&mut tape, |_| false);
            let xv = tape.constant(x.clone());
            let y = blk.forward(&mut Ctx::new(&mut tape, &vars), xv, DftMode::Fast).unwrap();
            assert_eq!(tape.value(y).sub(&x).max_abs(), 0.0, "variant {variant:?}");
        }
    }

    #[test]
    fn fresh_refiner_is_identity_on_images() {
        let cfg = ModelConfig {
            refiner_levels: 3,
            refiner_channels: 8,
            ffa_heads: 2,
            ..ModelConfig::default()
        };
        let refiner = Refiner::new(&cfg);
        let mut store = ParamStore::<f32>::new();
        refiner.register(&mut ParamReg::new(&mut store, RunSeed(3)));
        let mut rng = rng_at(RunSeed(30), Stream::Check, &[0]);
        let y = Tensor::from_fn([1, 3, 16, 16], |_| rng.gen_range(0.0..1.0f32));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let yv = tape.constant(y.clone());
        let out = refiner.forward(&mut Ctx::new(&mut tape, &vars), yv, DftMode::Fast).unwrap();
        assert_eq!(tape.value(out).sub(&y).max_abs(), 0.0);
    }

    #[test]
    fn refiner_shapes_and_size_check() {
        let cfg = ModelConfig {
            refiner_levels: 3,
            refiner_channels: 8,
            ffa_heads: 1,
            ..ModelConfig::default()
        };
        let refiner = Refiner::new(&cfg);
        let mut store = ParamStore::<f32>::new();
        refiner.register(&mut ParamReg::new(&mut store, RunSeed(3)));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let ok = tape.constant(Tensor::full([1, 3, 16, 12], 0.5f32));
        let out = refiner.forward(&mut Ctx::new(&mut tape, &vars), ok, DftMode::Fast).unwrap();
        assert_eq!(tape.shape(out), [1, 3, 16, 12]);
        let bad = tape.constant(Tensor::full([1, 3, 14, 16], 0.5f32));
        assert!(refiner.forward(&mut Ctx::new(&mut tape, &vars), bad, DftMode::Fast).is_err());
    }
}
