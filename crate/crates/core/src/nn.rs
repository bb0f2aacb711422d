//! Parameter storage, deterministic initialization, and the small layer
//! vocabulary shared by the networks (convolutions, layer norms, the
//! channel/pixel attention gate pair).

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::kernels::ConvSpec;
use crate::rng::{rng_named, RunSeed, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Named parameter tensors, ordered by name so every walk is reproducible.
#[derive(Clone)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn from_map(params: BTreeMap<String, Tensor<T>>) -> Self {
        ParamStore { params }
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not registered"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn set(&mut self, name: &str, t: Tensor<T>) {
        self.params.insert(name.to_string(), t);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }

    /// Bind every parameter onto a tape. Names matched by `trainable` become
    /// differentiable leaves; the rest are constants.
    pub fn bind(
        &self,
        tape: &mut Tape<T>,
        trainable: impl Fn(&str) -> bool,
    ) -> HashMap<String, Var> {
        self.params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect()
    }
}

/// Initialization rules. Convolution weights default to truncated normal
/// (sigma 0.02, cut at 2 sigma); residual output projections use zeros so
/// blocks start as identities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
}

/// Registers parameters into a store, drawing each tensor's values from a
/// stream keyed only by (seed, parameter name) - registration order never
/// matters.
pub struct ParamReg<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub seed: RunSeed,
}

impl<'a, T: Real> ParamReg<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: RunSeed) -> Self {
        ParamReg { store, seed }
    }

    pub fn param(&mut self, name: &str, shape: Shape, init: Init) {
        if self.store.try_get(name).is_some() {
            return;
        }
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::TruncNormal(sigma) => {
                let mut rng = rng_named(self.seed, Stream::Init, name);
                Tensor::from_fn(shape, |_| {
                    loop {
                        let z: f64 = rng.sample(StandardNormal);
                        if z.abs() <= 2.0 {
                            return T::cast_f64(z * sigma);
                        }
                    }
                })
            }
        };
        self.store.set(name, t);
    }
}

/// Forward-pass context: the tape plus the name->Var binding.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a HashMap<String, Var>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, vars: &'a HashMap<String, Var>) -> Self {
        Ctx { tape, vars }
    }

    pub fn p(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound on this tape"))
    }
}

const WEIGHT_SIGMA: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

/// 2D convolution layer description.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub ci: usize,
    pub co: usize,
    pub k: usize,
    pub spec: ConvSpec,
    pub bias: bool,
    pub init: Init,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, ci: usize, co: usize, k: usize, spec: ConvSpec) -> Self {
        Conv2d { name: name.into(), ci, co, k, spec, bias: true, init: Init::TruncNormal(WEIGHT_SIGMA) }
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn zero_init(mut self) -> Self {
        self.init = Init::Zeros;
        self
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        let shape = [self.co, self.ci / self.spec.groups, self.k, self.k];
        reg.param(&self.weight_name(), shape, self.init);
        if self.bias {
            reg.param(&self.bias_name(), [1, self.co, 1, 1], Init::Zeros);
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let w = ctx.p(&self.weight_name());
        let b = self.bias.then(|| ctx.p(&self.bias_name()));
        ctx.tape.conv2d(x, w, b, self.spec)
    }
}

/// Channel layer norm (normalize over C per spatial position, learnable
/// per-channel affine).
#[derive(Debug, Clone)]
pub struct ChannelLn {
    pub name: String,
    pub c: usize,
}

impl ChannelLn {
    pub fn new(name: impl Into<String>, c: usize) -> Self {
        ChannelLn { name: name.into(), c }
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        reg.param(&format!("{}.scale", self.name), [1, self.c, 1, 1], Init::Ones);
        reg.param(&format!("{}.offset", self.name), [1, self.c, 1, 1], Init::Zeros);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let y = ctx.tape.standardize_c(x, LN_EPS);
        let s = ctx.p(&format!("{}.scale", self.name));
        let o = ctx.p(&format!("{}.offset", self.name));
        let scaled = ctx.tape.mul(y, s);
        ctx.tape.add(scaled, o)
    }
}

/// Whole-map layer norm (normalize over C, H, W per sample, scalar affine).
#[derive(Debug, Clone)]
pub struct MapLn {
    pub name: String,
}

impl MapLn {
    pub fn new(name: impl Into<String>) -> Self {
        MapLn { name: name.into() }
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        reg.param(&format!("{}.scale", self.name), [1, 1, 1, 1], Init::Ones);
        reg.param(&format!("{}.offset", self.name), [1, 1, 1, 1], Init::Zeros);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        let y = ctx.tape.standardize_chw(x, LN_EPS);
        let s = ctx.p(&format!("{}.scale", self.name));
        let o = ctx.p(&format!("{}.offset", self.name));
        let scaled = ctx.tape.mul(y, s);
        ctx.tape.add(scaled, o)
    }
}

/// Channel attention followed by pixel attention (the decoder gate pair).
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    ca_squeeze: Conv2d,
    ca_excite: Conv2d,
    pa_squeeze: Conv2d,
    pa_excite: Conv2d,
}

impl AttentionBlock {
    pub fn new(name: &str, c: usize) -> Self {
        let r = (c / 8).max(1);
        AttentionBlock {
            ca_squeeze: Conv2d::new(format!("{name}.ca.squeeze"), c, r, 1, ConvSpec::unit()),
            ca_excite: Conv2d::new(format!("{name}.ca.excite"), r, c, 1, ConvSpec::unit()),
            pa_squeeze: Conv2d::new(format!("{name}.pa.squeeze"), c, r, 1, ConvSpec::unit()),
            pa_excite: Conv2d::new(format!("{name}.pa.excite"), r, 1, 1, ConvSpec::unit()),
        }
    }

    pub fn register<T: Real>(&self, reg: &mut ParamReg<T>) {
        self.ca_squeeze.register(reg);
        self.ca_excite.register(reg);
        self.pa_squeeze.register(reg);
        self.pa_excite.register(reg);
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Var {
        // channel gate from global average pooling
        let pooled = ctx.tape.mean_hw(x);
        let h = self.ca_squeeze.forward(ctx, pooled);
        let h = ctx.tape.gelu(h);
        let h = self.ca_excite.forward(ctx, h);
        let gate = ctx.tape.sigmoid(h);
        let x = ctx.tape.mul(x, gate);
        // pixel gate
        let h = self.pa_squeeze.forward(ctx, x);
        let h = ctx.tape.gelu(h);
        let h = self.pa_excite.forward(ctx, h);
        let gate = ctx.tape.sigmoid(h);
        ctx.tape.mul(x, gate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_position_keyed_not_order_keyed() {
        let mut a = ParamStore::<f32>::new();
        let mut reg = ParamReg::new(&mut a, RunSeed(0));
        reg.param("x", [1, 1, 2, 2], Init::TruncNormal(0.02));
        reg.param("y", [1, 1, 2, 2], Init::TruncNormal(0.02));

        let mut b = ParamStore::<f32>::new();
        let mut reg = ParamReg::new(&mut b, RunSeed(0));
        reg.param("y", [1, 1, 2, 2], Init::TruncNormal(0.02));
        reg.param("x", [1, 1, 2, 2], Init::TruncNormal(0.02));

        assert_eq!(a.get("x").as_slice(), b.get("x").as_slice());
        assert_eq!(a.get("y").as_slice(), b.get("y").as_slice());
        assert_ne!(a.get("x").as_slice(), a.get("y").as_slice());
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = ParamStore::<f32>::new();
        ParamReg::new(&mut a, RunSeed(0)).param("w", [4, 4, 3, 3], Init::TruncNormal(0.02));
        let mut b = ParamStore::<f32>::new();
        ParamReg::new(&mut b, RunSeed(1)).param("w", [4, 4, 3, 3], Init::TruncNormal(0.02));
        assert_ne!(a.get("w").as_slice(), b.get("w").as_slice());
    }

    #[test]
    fn trunc_normal_respects_cut() {
        let mut s = ParamStore::<f64>::new();
        ParamReg::new(&mut s, RunSeed(0)).param("w", [8, 8, 3, 3], Init::TruncNormal(0.02));
        assert!(s.get("w").max_abs() <= 0.04);
    }

    #[test]
    fn attention_block_preserves_shape() {
        let mut store = ParamStore::<f32>::new();
        let blk = AttentionBlock::new("attn", 16);
        blk.register(&mut ParamReg::new(&mut store, RunSeed(0)));
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| true);
        let x = tape.constant(Tensor::full([2, 16, 5, 5], 0.3));
        let mut ctx = Ctx::new(&mut tape, &vars);
        let y = blk.forward(&mut ctx, x);
        assert_eq!(tape.shape(y), [2, 16, 5, 5]);
    }
}
