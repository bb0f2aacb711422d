//! Reverse-mode autodiff on a flat tape.
//!
//! Ops push one node each: the forward value plus a closure that turns the
//! output cotangent into parent cotangents. Nodes whose inputs carry no
//! gradient push no closure, so frozen branches (targets, constants, the
//! detached discriminator input) cost nothing on the way back.

use crate::fft::{
    dft_w_real, dft_w_real_adjoint, haar_dwt2_packed, haar_idwt2_packed, idft_w_packed,
    idft_w_packed_adjoint, irfft2, irfft2_adjoint, rfft2, rfft2_adjoint, DftMode,
};
use crate::kernels::{
    avg_pool2_bwd, avg_pool2_fwd, conv2d_bwd_bias, conv2d_bwd_input, conv2d_bwd_weight,
    conv2d_fwd, matmul, matmul_nt, matmul_tn, pad_reflect_bwd, pad_reflect_fwd,
    pixel_shuffle2_bwd, pixel_shuffle2_fwd, transpose_last2, upsample2_bwd, upsample2_fwd,
    ConvSpec,
};
use crate::tensor::{numel, Real, Shape, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<(Var, Tensor<T>)>>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    back: Option<BackFn<T>>,
}

/// Gradients keyed by tape node.
pub struct Grads<T> {
    g: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Elementwise combine with NumPy-style broadcasting over the 4 axes
/// (each axis must match or be 1). The shapes the networks actually use
/// (same shape, per-plane scalars, per-sample spatial planes) take
/// contiguous fast paths.
fn bcast_zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return a.zip(b, f);
    }
    let out_shape: Shape = std::array::from_fn(|i| {
        assert!(
            sa[i] == sb[i] || sa[i] == 1 || sb[i] == 1,
            "broadcast mismatch {sa:?} vs {sb:?}"
        );
        sa[i].max(sb[i])
    });
    let (av, bv) = (a.as_slice(), b.as_slice());
    if sa == out_shape {
        let [n, c, h, w] = sa;
        let hw = h * w;
        // b supplies one scalar per (n, c) plane
        if sb[2] == 1 && sb[3] == 1 && (sb[0] == 1 || sb[0] == n) && (sb[1] == 1 || sb[1] == c) {
            let mut out = Vec::with_capacity(a.numel());
            for nc in 0..n * c {
                let (ni, ci) = (nc / c, nc % c);
                let scalar = bv[(ni % sb[0]) * sb[1] + ci % sb[1]];
                out.extend(av[nc * hw..(nc + 1) * hw].iter().map(|&x| f(x, scalar)));
            }
            return Tensor::new(out_shape, out);
        }
        // b supplies one spatial plane per sample, shared across channels
        if sb[1] == 1 && sb[2] == h && sb[3] == w && (sb[0] == 1 || sb[0] == n) {
            let mut out = Vec::with_capacity(a.numel());
            for nc in 0..n * c {
                let ni = nc / c;
                let plane = &bv[(ni % sb[0]) * hw..(ni % sb[0]) * hw + hw];
                out.extend(
                    av[nc * hw..(nc + 1) * hw].iter().zip(plane.iter()).map(|(&x, &y)| f(x, y)),
                );
            }
            return Tensor::new(out_shape, out);
        }
    }
    let mut out = vec![T::zero(); numel(out_shape)];
    let mut i = 0;
    for n in 0..out_shape[0] {
        for c in 0..out_shape[1] {
            for h in 0..out_shape[2] {
                for w in 0..out_shape[3] {
                    let ia =
                        a.idx(n.min(sa[0] - 1), c.min(sa[1] - 1), h.min(sa[2] - 1), w.min(sa[3] - 1));
                    let ib =
                        b.idx(n.min(sb[0] - 1), c.min(sb[1] - 1), h.min(sb[2] - 1), w.min(sb[3] - 1));
                    out[i] = f(av[ia], bv[ib]);
                    i += 1;
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Sum `g` down to `shape` along axes that were broadcast up from size 1.
fn reduce_to<T: Real>(g: &Tensor<T>, shape: Shape) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let gs = g.shape();
    let gv = g.as_slice();
    let [n, c, h, w] = gs;
    let hw = h * w;
    // per-(n, c)-plane scalar targets
    if shape[2] == 1 && shape[3] == 1 && (shape[0] == 1 || shape[0] == n) && (shape[1] == 1 || shape[1] == c)
    {
        let mut acc = vec![T::zero(); numel(shape)];
        for nc in 0..n * c {
            let (ni, ci) = (nc / c, nc % c);
            let s: T = gv[nc * hw..(nc + 1) * hw].iter().copied().sum();
            let idx = (ni % shape[0]) * shape[1] + ci % shape[1];
            acc[idx] = acc[idx] + s;
        }
        return Tensor::new(shape, acc);
    }
    // per-sample spatial plane targets
    if shape[1] == 1 && shape[2] == h && shape[3] == w && (shape[0] == 1 || shape[0] == n) {
        let mut acc = vec![T::zero(); numel(shape)];
        for nc in 0..n * c {
            let ni = nc / c;
            let dst = &mut acc[(ni % shape[0]) * hw..(ni % shape[0]) * hw + hw];
            for (d, &s) in dst.iter_mut().zip(gv[nc * hw..(nc + 1) * hw].iter()) {
                *d = *d + s;
            }
        }
        return Tensor::new(shape, acc);
    }
    let mut acc = vec![T::zero(); numel(shape)];
    let mut i = 0;
    for n in 0..gs[0] {
        for c in 0..gs[1] {
            for h in 0..gs[2] {
                for w in 0..gs[3] {
                    let idx = ((n.min(shape[0] - 1) * shape[1] + c.min(shape[1] - 1)) * shape[2]
                        + h.min(shape[2] - 1))
                        * shape[3]
                        + w.min(shape[3] - 1);
                    acc[idx] = acc[idx] + gv[i];
                    i += 1;
                }
            }
        }
    }
    Tensor::new(shape, acc)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, back: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node { value, requires_grad, back });
        Var(self.nodes.len() - 1)
    }

    /// Value without gradient tracking.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, false, None)
    }

    /// Differentiable leaf (parameter or probed input).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, true, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    fn unary(
        &mut self,
        a: Var,
        value: Tensor<T>,
        back: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var {
        let req = self.requires_grad(a);
        let f: Option<BackFn<T>> =
            if req { Some(Box::new(move |g| vec![(a, back(g))])) } else { None };
        self.push(value, req, f)
    }

    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut g: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(Tensor::scalar(T::one()));
        for id in (0..=loss.0).rev() {
            let grad = match g[id].take() {
                Some(gr) => gr,
                None => continue,
            };
            if let Some(back) = &self.nodes[id].back {
                for (pv, contrib) in back(&grad) {
                    if !self.nodes[pv.0].requires_grad {
                        continue;
                    }
                    g[pv.0] = Some(match g[pv.0].take() {
                        Some(prev) => prev.add(&contrib),
                        None => contrib,
                    });
                }
            }
            // Leaves keep their gradient.
            if self.nodes[id].back.is_none() && self.nodes[id].requires_grad {
                g[id] = Some(grad);
            }
        }
        Grads { g }
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = bcast_zip(self.value(a), self.value(b), |x, y| x + y);
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        let f: Option<BackFn<T>> = (na || nb).then(|| {
            Box::new(move |g: &Tensor<T>| {
                let mut outs = Vec::with_capacity(2);
                if na {
                    outs.push((a, reduce_to(g, sa)));
                }
                if nb {
                    outs.push((b, reduce_to(g, sb)));
                }
                outs
            }) as BackFn<T>
        });
        self.push(out, na || nb, f)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = bcast_zip(self.value(a), self.value(b), |x, y| x - y);
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        let f: Option<BackFn<T>> = (na || nb).then(|| {
            Box::new(move |g: &Tensor<T>| {
                let mut outs = Vec::with_capacity(2);
                if na {
                    outs.push((a, reduce_to(g, sa)));
                }
                if nb {
                    outs.push((b, reduce_to(&g.scale(-T::one()), sb)));
                }
                outs
            }) as BackFn<T>
        });
        self.push(out, na || nb, f)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let out = bcast_zip(&av, &bv, |x, y| x * y);
        let (sa, sb) = (av.shape(), bv.shape());
        let (na, nb) = (self.requires_grad(a), self.requires_grad(b));
        let f: Option<BackFn<T>> = (na || nb).then(|| {
            Box::new(move |g: &Tensor<T>| {
                let mut outs = Vec::with_capacity(2);
                if na {
                    outs.push((a, reduce_to(&bcast_zip(g, &bv, |x, y| x * y), sa)));
                }
                if nb {
                    outs.push((b, reduce_to(&bcast_zip(g, &av, |x, y| x * y), sb)));
                }
                outs
            }) as BackFn<T>
        });
        self.push(out, na || nb, f)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| T::one() / x);
        let saved = out.clone();
        self.unary(a, out, move |g| g.zip(&saved, |gv, y| -gv * y * y))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        self.unary(a, out, move |g| g.scale(s))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.unary(a, out, |g| g.clone())
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = av.map(|x| x.abs());
        self.unary(a, out, move |g| {
            g.zip(&av, |gv, x| if x >= T::zero() { gv } else { -gv })
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn powf_const(&mut self, a: Var, p: f64) -> Var {
        let av = self.value(a).clone();
        let pe = T::cast_f64(p);
        let out = av.map(|x| x.powf(pe));
        self.unary(a, out, move |g| {
            g.zip(&av, |gv, x| gv * pe * x.powf(pe - T::one()))
        })
    }

    pub fn clamp_min(&mut self, a: Var, m: T) -> Var {
        let av = self.value(a).clone();
        let out = av.map(|x| x.max(m));
        self.unary(a, out, move |g| {
            g.zip(&av, |gv, x| if x > m { gv } else { T::zero() })
        })
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        let av = self.value(a).clone();
        let out = av.map(|x| x.max(T::zero()).min(T::one()));
        self.unary(a, out, move |g| {
            g.zip(&av, |gv, x| if x > T::zero() && x < T::one() { gv } else { T::zero() })
        })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        // tanh form; smooth everywhere so central differences stay honest.
        let av = self.value(a).clone();
        let c = T::cast_f64(0.7978845608028654); // sqrt(2/pi)
        let k = T::cast_f64(0.044715);
        let half = T::cast_f64(0.5);
        let out = av.map(|x| {
            let t = (c * (x + k * x * x * x)).tanh_bulk();
            half * x * (T::one() + t)
        });
        self.unary(a, out, move |g| {
            g.zip(&av, |gv, x| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh_bulk();
                let du = c * (T::one() + T::cast_f64(3.0) * k * x * x);
                gv * (half * (T::one() + t) + half * x * (T::one() - t * t) * du)
            })
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        // sigma(x) = (1 + tanh(x/2)) / 2, sharing the bulk tanh path.
        let half = T::cast_f64(0.5);
        let out = self
            .value(a)
            .map(|x| half * (T::one() + (half * x).tanh_bulk()));
        let saved = out.clone();
        self.unary(a, out, move |g| g.zip(&saved, |gv, y| gv * y * (T::one() - y)))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let av = self.value(a).clone();
        let s = T::cast_f64(slope);
        let out = av.map(|x| if x >= T::zero() { x } else { s * x });
        self.unary(a, out, move |g| {
            g.zip(&av, |gv, x| if x >= T::zero() { gv } else { s * gv })
        })
    }

    pub fn detach(&mut self, a: Var) -> Var {
        self.push(self.nodes[a.0].value.clone(), false, None)
    }

    // ---- reductions ------------------------------------------------------

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let inv = T::cast_f64(1.0 / n as f64);
        let shape = self.shape(a);
        let out = Tensor::scalar(self.value(a).sum() * inv);
        self.unary(a, out, move |g| {
            let gs = g.as_slice()[0] * inv;
            Tensor::full(shape, gs)
        })
    }

    /// Mean over (H, W), keeping (N, C, 1, 1). Global average pooling.
    pub fn mean_hw(&mut self, a: Var) -> Var {
        let [n, c, h, w] = self.shape(a);
        let inv = T::cast_f64(1.0 / (h * w) as f64);
        let av = self.value(a).as_slice();
        let out: Vec<T> = (0..n * c)
            .map(|nc| av[nc * h * w..(nc + 1) * h * w].iter().copied().sum::<T>() * inv)
            .collect();
        self.unary(a, Tensor::new([n, c, 1, 1], out), move |g| {
            let mut dx = vec![T::zero(); n * c * h * w];
            for (nc, chunk) in dx.chunks_mut(h * w).enumerate() {
                let gv = g.as_slice()[nc] * inv;
                for v in chunk.iter_mut() {
                    *v = gv;
                }
            }
            Tensor::new([n, c, h, w], dx)
        })
    }

    // ---- normalization ---------------------------------------------------

    /// Zero-mean unit-variance over the channel axis, per (n, h, w) position.
    /// Channel-contiguous passes; positions accumulate in spatial buffers.
    pub fn standardize_c(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a).clone();
        let [n, c, h, w] = x.shape();
        let epst = T::cast_f64(eps);
        let invc = T::cast_f64(1.0 / c as f64);
        let hw = h * w;
        let xs = x.as_slice();
        let mut y = vec![T::zero(); x.numel()];
        let mut inv_sigma = vec![T::zero(); n * hw];
        let mut mean = vec![T::zero(); hw];
        let mut var = vec![T::zero(); hw];
        for ni in 0..n {
            mean.iter_mut().for_each(|v| *v = T::zero());
            var.iter_mut().for_each(|v| *v = T::zero());
            for ci in 0..c {
                let plane = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for (m, &v) in mean.iter_mut().zip(plane.iter()) {
                    *m = *m + v;
                }
            }
            for m in mean.iter_mut() {
                *m = *m * invc;
            }
            for ci in 0..c {
                let plane = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for ((va, &m), &v) in var.iter_mut().zip(mean.iter()).zip(plane.iter()) {
                    let d = v - m;
                    *va = *va + d * d;
                }
            }
            let is_buf = &mut inv_sigma[ni * hw..(ni + 1) * hw];
            for (is, &va) in is_buf.iter_mut().zip(var.iter()) {
                *is = T::one() / (va * invc + epst).sqrt();
            }
            for ci in 0..c {
                let plane = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                let out = &mut y[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                for (((o, &v), &m), &is) in
                    out.iter_mut().zip(plane.iter()).zip(mean.iter()).zip(is_buf.iter())
                {
                    *o = (v - m) * is;
                }
            }
        }
        let yt = Tensor::new([n, c, h, w], y);
        let ysaved = yt.clone();
        self.unary(a, yt, move |g| {
            let gs = g.as_slice();
            let ys = ysaved.as_slice();
            let mut dx = vec![T::zero(); gs.len()];
            let mut gm = vec![T::zero(); hw];
            let mut gym = vec![T::zero(); hw];
            for ni in 0..n {
                gm.iter_mut().for_each(|v| *v = T::zero());
                gym.iter_mut().for_each(|v| *v = T::zero());
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let gp = &gs[base..base + hw];
                    let yp = &ys[base..base + hw];
                    for ((acc_g, acc_gy), (&gv, &yv)) in
                        gm.iter_mut().zip(gym.iter_mut()).zip(gp.iter().zip(yp.iter()))
                    {
                        *acc_g = *acc_g + gv;
                        *acc_gy = *acc_gy + gv * yv;
                    }
                }
                for v in gm.iter_mut() {
                    *v = *v * invc;
                }
                for v in gym.iter_mut() {
                    *v = *v * invc;
                }
                let is_buf = &inv_sigma[ni * hw..(ni + 1) * hw];
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        dx[base + p] =
                            (gs[base + p] - gm[p] - ys[base + p] * gym[p]) * is_buf[p];
                    }
                }
            }
            Tensor::new([n, c, h, w], dx)
        })
    }

    /// Zero-mean unit-variance over all of (C, H, W), per sample.
    pub fn standardize_chw(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a).clone();
        let [n, c, h, w] = x.shape();
        let m = c * h * w;
        let epst = T::cast_f64(eps);
        let invm = T::cast_f64(1.0 / m as f64);
        let xs = x.as_slice();
        let mut y = vec![T::zero(); x.numel()];
        let mut inv_sigma = vec![T::zero(); n];
        for ni in 0..n {
            let chunk = &xs[ni * m..(ni + 1) * m];
            let mean = chunk.iter().copied().sum::<T>() * invm;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * invm;
            let is = T::one() / (var + epst).sqrt();
            inv_sigma[ni] = is;
            for (o, &v) in y[ni * m..(ni + 1) * m].iter_mut().zip(chunk.iter()) {
                *o = (v - mean) * is;
            }
        }
        let yt = Tensor::new([n, c, h, w], y);
        let ysaved = yt.clone();
        self.unary(a, yt, move |g| {
            let gs = g.as_slice();
            let ys = ysaved.as_slice();
            let mut dx = vec![T::zero(); gs.len()];
            for ni in 0..n {
                let gr = &gs[ni * m..(ni + 1) * m];
                let yr = &ys[ni * m..(ni + 1) * m];
                let gm = gr.iter().copied().sum::<T>() * invm;
                let gym = gr.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<T>() * invm;
                let is = inv_sigma[ni];
                for i in 0..m {
                    dx[ni * m + i] = (gr[i] - gm - yr[i] * gym) * is;
                }
            }
            Tensor::new([n, c, h, w], dx)
        })
    }

    // ---- shape ops --------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Shape) -> Var {
        let from = self.shape(a);
        let out = self.value(a).reshape(shape);
        self.unary(a, out, move |g| g.reshape(from))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Var {
        let out = transpose_last2(self.value(a));
        self.unary(a, out, move |g| transpose_last2(g))
    }

    pub fn concat_c(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tensors: Vec<Tensor<T>> = parts.iter().map(|&v| self.value(v).clone()).collect();
        let [n, _, h, w] = tensors[0].shape();
        let cs: Vec<usize> = tensors.iter().map(|t| t.c()).collect();
        for t in &tensors {
            assert_eq!(t.n(), n);
            assert_eq!(t.h(), h);
            assert_eq!(t.w(), w);
        }
        let c_total: usize = cs.iter().sum();
        let mut out = vec![T::zero(); n * c_total * h * w];
        for ni in 0..n {
            let mut c_off = 0;
            for t in &tensors {
                let tc = t.c();
                let src = &t.as_slice()[ni * tc * h * w..(ni + 1) * tc * h * w];
                out[(ni * c_total + c_off) * h * w..(ni * c_total + c_off + tc) * h * w]
                    .copy_from_slice(src);
                c_off += tc;
            }
        }
        let req = parts.iter().any(|&v| self.requires_grad(v));
        let parts_owned: Vec<Var> = parts.to_vec();
        let f: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &Tensor<T>| {
                let mut outs = Vec::with_capacity(parts_owned.len());
                let mut c_off = 0;
                for (&v, &tc) in parts_owned.iter().zip(cs.iter()) {
                    let mut part = vec![T::zero(); n * tc * h * w];
                    for ni in 0..n {
                        let src = &g.as_slice()
                            [(ni * c_total + c_off) * h * w..(ni * c_total + c_off + tc) * h * w];
                        part[ni * tc * h * w..(ni + 1) * tc * h * w].copy_from_slice(src);
                    }
                    outs.push((v, Tensor::new([n, tc, h, w], part)));
                    c_off += tc;
                }
                outs
            }) as BackFn<T>
        });
        self.push(Tensor::new([n, c_total, h, w], out), req, f)
    }

    pub fn slice_c(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a).clone();
        let [n, c, h, w] = x.shape();
        assert!(start + len <= c);
        let mut out = vec![T::zero(); n * len * h * w];
        for ni in 0..n {
            let src = &x.as_slice()[(ni * c + start) * h * w..(ni * c + start + len) * h * w];
            out[ni * len * h * w..(ni + 1) * len * h * w].copy_from_slice(src);
        }
        self.unary(a, Tensor::new([n, len, h, w], out), move |g| {
            let mut dx = vec![T::zero(); n * c * h * w];
            for ni in 0..n {
                let dst = &mut dx[(ni * c + start) * h * w..(ni * c + start + len) * h * w];
                dst.copy_from_slice(&g.as_slice()[ni * len * h * w..(ni + 1) * len * h * w]);
            }
            Tensor::new([n, c, h, w], dx)
        })
    }

    // ---- structured ops ---------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let bv = b.map(|bb| self.value(bb).clone());
        let out = conv2d_fwd(&xv, &wv, bv.as_ref(), spec);
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let need_b = b.map(|bb| self.requires_grad(bb)).unwrap_or(false);
        let req = need_x || need_w || need_b;
        let (xs, ws) = (xv.shape(), wv.shape());
        let f: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &Tensor<T>| {
                let mut outs = Vec::with_capacity(3);
                if need_x {
                    outs.push((x, conv2d_bwd_input(g, &wv, xs, spec)));
                }
                if need_w {
                    outs.push((w, conv2d_bwd_weight(g, &xv, ws, spec)));
                }
                if need_b {
                    outs.push((b.expect("bias var"), conv2d_bwd_bias(g)));
                }
                outs
            }) as BackFn<T>
        });
        self.push(out, req, f)
    }

    /// Batched matrix product over the last two axes; batch = (N, C).
    /// `tb` multiplies by the transpose of `b` (shapes (B,C,M,K)x(B,C,N,K)).
    pub fn matmul(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let [ba, ca, m, k] = av.shape();
        let [bb, cb, r0, r1] = bv.shape();
        assert_eq!((ba, ca), (bb, cb), "matmul batch mismatch");
        let n = if tb {
            assert_eq!(r1, k, "matmul inner dim");
            r0
        } else {
            assert_eq!(r0, k, "matmul inner dim");
            r1
        };
        let batches = ba * ca;
        let mut out = vec![T::zero(); batches * m * n];
        for i in 0..batches {
            let asl = &av.as_slice()[i * m * k..(i + 1) * m * k];
            let bsl = &bv.as_slice()[i * r0 * r1..(i + 1) * r0 * r1];
            let y = if tb { matmul_nt(asl, bsl, m, k, n) } else { matmul(asl, bsl, m, k, n) };
            out[i * m * n..(i + 1) * m * n].copy_from_slice(&y);
        }
        let (need_a, need_b) = (self.requires_grad(a), self.requires_grad(b));
        let req = need_a || need_b;
        let f: Option<BackFn<T>> = req.then(|| {
            Box::new(move |g: &Tensor<T>| {
                let gs = g.as_slice();
                let mut da = vec![T::zero(); if need_a { av.numel() } else { 0 }];
                let mut db = vec![T::zero(); if need_b { bv.numel() } else { 0 }];
                for i in 0..batches {
                    let gsl = &gs[i * m * n..(i + 1) * m * n];
                    let asl = &av.as_slice()[i * m * k..(i + 1) * m * k];
                    let bsl = &bv.as_slice()[i * r0 * r1..(i + 1) * r0 * r1];
                    if tb {
                        // y = a * b^T: da = g * b, db = g^T * a
                        if need_a {
                            da[i * m * k..(i + 1) * m * k]
                                .copy_from_slice(&matmul(gsl, bsl, m, n, k));
                        }
                        if need_b {
                            db[i * r0 * r1..(i + 1) * r0 * r1]
                                .copy_from_slice(&matmul_tn(gsl, asl, n, m, k));
                        }
                    } else {
                        // y = a * b: da = g * b^T, db = a^T * g
                        if need_a {
                            da[i * m * k..(i + 1) * m * k]
                                .copy_from_slice(&matmul_nt(gsl, bsl, m, n, k));
                        }
                        if need_b {
                            db[i * r0 * r1..(i + 1) * r0 * r1]
                                .copy_from_slice(&matmul_tn(asl, gsl, k, m, n));
                        }
                    }
                }
                let mut outs = Vec::with_capacity(2);
                if need_a {
                    outs.push((a, Tensor::new([ba, ca, m, k], da)));
                }
                if need_b {
                    outs.push((b, Tensor::new([bb, cb, r0, r1], db)));
                }
                outs
            }) as BackFn<T>
        });
        self.push(Tensor::new([ba, ca, m, n], out), req, f)
    }

    pub fn avg_pool2(&mut self, a: Var) -> Var {
        let xs = self.shape(a);
        let out = avg_pool2_fwd(self.value(a));
        self.unary(a, out, move |g| avg_pool2_bwd(g, xs))
    }

    pub fn pixel_shuffle2(&mut self, a: Var) -> Var {
        let out = pixel_shuffle2_fwd(self.value(a));
        self.unary(a, out, move |g| pixel_shuffle2_bwd(g))
    }

    pub fn upsample2(&mut self, a: Var) -> Var {
        let xs = self.shape(a);
        let out = upsample2_fwd(self.value(a));
        self.unary(a, out, move |g| upsample2_bwd(g, xs))
    }

    pub fn pad_reflect(&mut self, a: Var, pads: [usize; 4]) -> Var {
        let xs = self.shape(a);
        let out = pad_reflect_fwd(self.value(a), pads);
        self.unary(a, out, move |g| pad_reflect_bwd(g, xs, pads))
    }

    /// Keep the top-left (h, w) region; cotangent is zero-embedded back.
    pub fn crop_hw(&mut self, a: Var, h: usize, w: usize) -> Var {
        let [n, c, xh, xw] = self.shape(a);
        assert!(h <= xh && w <= xw);
        let out = crate::kernels::crop_to(self.value(a), h, w);
        self.unary(a, out, move |g| {
            let mut dx = vec![T::zero(); n * c * xh * xw];
            for nc in 0..n * c {
                for yy in 0..h {
                    let src = &g.as_slice()[nc * h * w + yy * w..nc * h * w + (yy + 1) * w];
                    dx[nc * xh * xw + yy * xw..nc * xh * xw + yy * xw + w].copy_from_slice(src);
                }
            }
            Tensor::new([n, c, xh, xw], dx)
        })
    }

    /// 2x2 stride-2 max pooling; cotangent routes to each window's argmax.
    pub fn max_pool2(&mut self, a: Var) -> Var {
        let x = self.value(a).clone();
        let [n, c, h, w] = x.shape();
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (oh, ow) = (h / 2, w / 2);
        let mut y = vec![T::zero(); n * c * oh * ow];
        let mut arg = vec![0usize; n * c * oh * ow];
        for nc in 0..n * c {
            let xc = &x.as_slice()[nc * h * w..(nc + 1) * h * w];
            for yo in 0..oh {
                for xo in 0..ow {
                    let base = 2 * yo * w + 2 * xo;
                    let cand = [base, base + 1, base + w, base + w + 1];
                    let mut best = cand[0];
                    for &i in &cand[1..] {
                        if xc[i] > xc[best] {
                            best = i;
                        }
                    }
                    y[nc * oh * ow + yo * ow + xo] = xc[best];
                    arg[nc * oh * ow + yo * ow + xo] = best;
                }
            }
        }
        self.unary(a, Tensor::new([n, c, oh, ow], y), move |g| {
            let mut dx = vec![T::zero(); n * c * h * w];
            for nc in 0..n * c {
                for i in 0..oh * ow {
                    let idx = nc * h * w + arg[nc * oh * ow + i];
                    dx[idx] = dx[idx] + g.as_slice()[nc * oh * ow + i];
                }
            }
            Tensor::new([n, c, h, w], dx)
        })
    }

    // ---- frequency ops ----------------------------------------------------

    pub fn dft_w(&mut self, a: Var, mode: DftMode) -> Var {
        let out = dft_w_real(self.value(a), mode);
        self.unary(a, out, move |g| dft_w_real_adjoint(g, mode))
    }

    pub fn idft_w(&mut self, a: Var, mode: DftMode) -> Var {
        let out = idft_w_packed(self.value(a), mode);
        self.unary(a, out, move |g| idft_w_packed_adjoint(g, mode))
    }

    pub fn rfft2(&mut self, a: Var) -> Var {
        let w = self.shape(a)[3];
        let out = rfft2(self.value(a));
        self.unary(a, out, move |g| rfft2_adjoint(g, w))
    }

    pub fn irfft2(&mut self, a: Var, w: usize) -> Var {
        let out = irfft2(self.value(a), w);
        self.unary(a, out, move |g| irfft2_adjoint(g))
    }

    pub fn haar_dwt2(&mut self, a: Var) -> Var {
        let out = haar_dwt2_packed(self.value(a));
        self.unary(a, out, move |g| haar_idwt2_packed(g))
    }

    pub fn haar_idwt2(&mut self, a: Var) -> Var {
        let out = haar_idwt2_packed(self.value(a));
        self.unary(a, out, move |g| haar_dwt2_packed(g))
    }

    // ---- losses -----------------------------------------------------------

    /// Mean binary cross-entropy on logits against a constant target,
    /// computed in the numerically stable max(z,0) - z t + log(1 + e^-|z|) form.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: &Tensor<T>) -> Var {
        let z = self.value(logits).clone();
        assert_eq!(z.shape(), target.shape());
        let n = T::cast_f64(z.numel() as f64);
        let total: T = z
            .as_slice()
            .iter()
            .zip(target.as_slice().iter())
            .map(|(&zv, &tv)| zv.max(T::zero()) - zv * tv + (T::one() + (-zv.abs()).exp()).ln())
            .sum();
        let tsaved = target.clone();
        self.unary(logits, Tensor::scalar(total / n), move |g| {
            let gs = g.as_slice()[0] / n;
            z.zip(&tsaved, |zv, tv| {
                let sig = T::one() / (T::one() + (-zv).exp());
                gs * (sig - tv)
            })
        })
    }
}
