//! Raw compute kernels on row-major buffers.
//!
//! Everything here is deterministic under any thread count: parallel loops
//! only ever write disjoint output rows and accumulate in a fixed order
//! within each row, so results are bit-identical run to run.

use rayon::prelude::*;

use crate::tensor::{numel, Real, Shape, Tensor};

/// Below this many multiply-adds a parallel dispatch costs more than it buys.
const PAR_THRESHOLD: usize = 1 << 17;


/// Run `f` over blocks of up to 4 output rows, in parallel when the work
/// justifies it. Row blocking keeps each B row in registers for four
/// accumulator rows at once.
fn par_row_blocks<T: Send, F: Fn(usize, &mut [T]) + Sync>(
    out: &mut [T],
    row_len: usize,
    work: usize,
    f: F,
) {
    let block = 4 * row_len;
    if work < PAR_THRESHOLD || block == 0 {
        for (i, rows) in out.chunks_mut(block).enumerate() {
            f(4 * i, rows);
        }
    } else {
        // Coarse scheduling: a handful of tasks, not one per block, so the
        // fork-join overhead stays negligible next to the arithmetic.
        let blocks = out.len().div_ceil(block);
        let min_len = blocks.div_ceil(4 * rayon::current_num_threads()).max(1);
        out.par_chunks_mut(block)
            .with_min_len(min_len)
            .enumerate()
            .for_each(|(i, rows)| f(4 * i, rows));
    }
}

/// Accumulator tile width: 4 rows x 512 columns of f32 stay inside L1.
const N_TILE: usize = 512;

/// C(m,n) = A(m,k) * B(k,n)
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    par_row_blocks(&mut c, n, m * k * n, |row0, crows| {
        let rows = crows.len() / n;
        match rows {
            4 => {
                let (c0, rest) = crows.split_at_mut(n);
                let (c1, rest) = rest.split_at_mut(n);
                let (c2, c3) = rest.split_at_mut(n);
                let (a0, a1) = (&a[row0 * k..(row0 + 1) * k], &a[(row0 + 1) * k..(row0 + 2) * k]);
                let (a2, a3) =
                    (&a[(row0 + 2) * k..(row0 + 3) * k], &a[(row0 + 3) * k..(row0 + 4) * k]);
                let mut j0 = 0;
                while j0 < n {
                    let jn = (j0 + N_TILE).min(n);
                    let t0 = &mut c0[j0..jn];
                    let t1 = &mut c1[j0..jn];
                    let t2 = &mut c2[j0..jn];
                    let t3 = &mut c3[j0..jn];
                    for kk in 0..k {
                        let brow = &b[kk * n + j0..kk * n + jn];
                        let (v0, v1, v2, v3) = (a0[kk], a1[kk], a2[kk], a3[kk]);
                        let it = t0
                            .iter_mut()
                            .zip(t1.iter_mut())
                            .zip(t2.iter_mut())
                            .zip(t3.iter_mut())
                            .zip(brow.iter());
                        for ((((cv0, cv1), cv2), cv3), &bv) in it {
                            *cv0 = *cv0 + v0 * bv;
                            *cv1 = *cv1 + v1 * bv;
                            *cv2 = *cv2 + v2 * bv;
                            *cv3 = *cv3 + v3 * bv;
                        }
                    }
                    j0 = jn;
                }
            }
            _ => {
                for (r, crow) in crows.chunks_mut(n).enumerate() {
                    let arow = &a[(row0 + r) * k..(row0 + r + 1) * k];
                    for (kk, &av) in arow.iter().enumerate() {
                        let brow = &b[kk * n..(kk + 1) * n];
                        for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                            *cv = *cv + av * bv;
                        }
                    }
                }
            }
        }
    });
    c
}

/// Cache-blocked out-of-place transpose of a (rows, cols) matrix.
fn transpose_mat<T: Real>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    const TILE: usize = 32;
    let mut dst = vec![T::zero(); rows * cols];
    let mut r0 = 0;
    while r0 < rows {
        let r1 = (r0 + TILE).min(rows);
        let mut c0 = 0;
        while c0 < cols {
            let c1 = (c0 + TILE).min(cols);
            for r in r0..r1 {
                for c in c0..c1 {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
            c0 = c1;
        }
        r0 = r1;
    }
    dst
}

/// C(m,n) = A(m,k) * B(n,k)^T. Dot-product loops cannot autovectorize
/// (no float reassociation), so transpose B once and reuse the saxpy form.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose_mat(b, n, k);
    matmul(a, &bt, m, k, n)
}

/// C(m,n) = A(k,m)^T * B(k,n)
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    par_row_blocks(&mut c, n, m * k * n, |row0, crows| {
        let rows = crows.len() / n;
        if rows == 4 {
            let (c0, rest) = crows.split_at_mut(n);
            let (c1, rest) = rest.split_at_mut(n);
            let (c2, c3) = rest.split_at_mut(n);
            let mut j0 = 0;
            while j0 < n {
                let jn = (j0 + N_TILE).min(n);
                let t0 = &mut c0[j0..jn];
                let t1 = &mut c1[j0..jn];
                let t2 = &mut c2[j0..jn];
                let t3 = &mut c3[j0..jn];
                for kk in 0..k {
                    let brow = &b[kk * n + j0..kk * n + jn];
                    let base = kk * m + row0;
                    let (v0, v1, v2, v3) = (a[base], a[base + 1], a[base + 2], a[base + 3]);
                    let it = t0
                        .iter_mut()
                        .zip(t1.iter_mut())
                        .zip(t2.iter_mut())
                        .zip(t3.iter_mut())
                        .zip(brow.iter());
                    for ((((cv0, cv1), cv2), cv3), &bv) in it {
                        *cv0 = *cv0 + v0 * bv;
                        *cv1 = *cv1 + v1 * bv;
                        *cv2 = *cv2 + v2 * bv;
                        *cv3 = *cv3 + v3 * bv;
                    }
                }
                j0 = jn;
            }
        } else {
            for (r, crow) in crows.chunks_mut(n).enumerate() {
                for kk in 0..k {
                    let av = a[kk * m + row0 + r];
                    let brow = &b[kk * n..(kk + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                        *cv = *cv + av * bv;
                    }
                }
            }
        }
    });
    c
}

/// Convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn unit() -> Self {
        ConvSpec { stride: 1, pad: 0, groups: 1 }
    }

    pub fn out_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - kh) / self.stride + 1;
        let ow = (w + 2 * self.pad - kw) / self.stride + 1;
        (oh, ow)
    }
}

fn im2col<T: Real>(
    x: &[T],
    (ci, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    spec: ConvSpec,
    (oh, ow): (usize, usize),
) -> Vec<T> {
    let mut col = vec![T::zero(); ci * kh * kw * oh * ow];
    let owh = oh * ow;
    for c in 0..ci {
        for i in 0..kh {
            for j in 0..kw {
                let dst = &mut col[((c * kh + i) * kw + j) * owh..((c * kh + i) * kw + j + 1) * owh];
                for yo in 0..oh {
                    let yi = (yo * spec.stride + i) as isize - spec.pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    let src_row = &x[(c * h + yi as usize) * w..(c * h + yi as usize + 1) * w];
                    for xo in 0..ow {
                        let xi = (xo * spec.stride + j) as isize - spec.pad as isize;
                        if xi >= 0 && xi < w as isize {
                            dst[yo * ow + xo] = src_row[xi as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im_add<T: Real>(
    col: &[T],
    (ci, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    spec: ConvSpec,
    (oh, ow): (usize, usize),
    x: &mut [T],
) {
    let owh = oh * ow;
    let min_len = ci.div_ceil(4 * rayon::current_num_threads()).max(1);
    x.par_chunks_mut(h * w).with_min_len(min_len).enumerate().for_each(|(c, xc)| {
        for i in 0..kh {
            for j in 0..kw {
                let src = &col[((c * kh + i) * kw + j) * owh..((c * kh + i) * kw + j + 1) * owh];
                for yo in 0..oh {
                    let yi = (yo * spec.stride + i) as isize - spec.pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for xo in 0..ow {
                        let xi = (xo * spec.stride + j) as isize - spec.pad as isize;
                        if xi >= 0 && xi < w as isize {
                            let idx = (yi as usize) * w + xi as usize;
                            xc[idx] = xc[idx] + src[yo * ow + xo];
                        }
                    }
                }
            }
        }
    });
}

fn is_depthwise(xs: Shape, ws: Shape, spec: ConvSpec) -> bool {
    spec.groups == xs[1] && ws[0] == xs[1] && ws[1] == 1
}

/// One depthwise output tap with full bounds checking (border path).
#[inline]
fn dw_tap_checked<T: Real>(
    xc: &[T],
    wc: &[T],
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    spec: ConvSpec,
    yo: usize,
    xo: usize,
) -> T {
    let mut acc = T::zero();
    for i in 0..kh {
        let yi = (yo * spec.stride + i) as isize - spec.pad as isize;
        if yi < 0 || yi >= h as isize {
            continue;
        }
        for j in 0..kw {
            let xi = (xo * spec.stride + j) as isize - spec.pad as isize;
            if xi >= 0 && xi < wd as isize {
                acc = acc + xc[(yi as usize) * wd + xi as usize] * wc[i * kw + j];
            }
        }
    }
    acc
}

fn is_pointwise(ws: Shape, spec: ConvSpec) -> bool {
    ws[2] == 1 && ws[3] == 1 && spec.stride == 1 && spec.pad == 0 && spec.groups == 1
}

/// Forward convolution. `x` is (N, Ci, H, W), `w` is (Co, Ci/groups, kh, kw).
pub fn conv2d_fwd<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Tensor<T> {
    let [n, ci, h, wd] = x.shape();
    let [co, cig, kh, kw] = w.shape();
    assert_eq!(ci % spec.groups, 0, "channels not divisible by groups");
    assert_eq!(co % spec.groups, 0, "out channels not divisible by groups");
    assert_eq!(cig, ci / spec.groups, "weight shape does not match input channels");
    let (oh, ow) = spec.out_hw(h, wd, kh, kw);
    let mut y = vec![T::zero(); n * co * oh * ow];

    if is_depthwise(x.shape(), w.shape(), spec) {
        let ws = w.as_slice();
        let planes = n * co;
        let min_len = planes.div_ceil(4 * rayon::current_num_threads()).max(1);
        y.par_chunks_mut(oh * ow).with_min_len(min_len).enumerate().for_each(|(nc, yc)| {
            let (ni, c) = (nc / co, nc % co);
            let xc = &x.as_slice()[(ni * ci + c) * h * wd..(ni * ci + c + 1) * h * wd];
            let wc = &ws[c * kh * kw..(c + 1) * kh * kw];
            // Interior columns where every tap lands in bounds; rows and the
            // border fall back to the checked loop.
            let x_lo = spec.pad.div_ceil(spec.stride).min(ow);
            let x_hi = if wd + spec.pad >= kw {
                ((wd + spec.pad - kw) / spec.stride + 1).min(ow)
            } else {
                0
            };
            for yo in 0..oh {
                let y_base = yo * spec.stride;
                let all_rows_in = y_base >= spec.pad && y_base + kh <= h + spec.pad
                    && y_base + kh - spec.pad <= h;
                if all_rows_in && x_lo < x_hi {
                    let yi0 = y_base - spec.pad;
                    // left border
                    for xo in 0..x_lo {
                        yc[yo * ow + xo] = dw_tap_checked(xc, wc, h, wd, kh, kw, spec, yo, xo);
                    }
                    if spec.stride == 1 {
                        // interior as one saxpy per tap: whole rows vectorize
                        let width = x_hi - x_lo;
                        let dst = &mut yc[yo * ow + x_lo..yo * ow + x_hi];
                        for i in 0..kh {
                            for j in 0..kw {
                                let wv = wc[i * kw + j];
                                let src_start = (yi0 + i) * wd + x_lo + j - spec.pad;
                                let src = &xc[src_start..src_start + width];
                                for (d, &xv) in dst.iter_mut().zip(src.iter()) {
                                    *d = *d + wv * xv;
                                }
                            }
                        }
                    } else {
                        for xo in x_lo..x_hi {
                            let xi0 = xo * spec.stride - spec.pad;
                            let mut acc = T::zero();
                            for i in 0..kh {
                                let xrow = &xc[(yi0 + i) * wd + xi0..(yi0 + i) * wd + xi0 + kw];
                                let wrow = &wc[i * kw..(i + 1) * kw];
                                for (xv, wv) in xrow.iter().zip(wrow.iter()) {
                                    acc = acc + *xv * *wv;
                                }
                            }
                            yc[yo * ow + xo] = acc;
                        }
                    }
                    // right border
                    for xo in x_hi..ow {
                        yc[yo * ow + xo] = dw_tap_checked(xc, wc, h, wd, kh, kw, spec, yo, xo);
                    }
                } else {
                    for xo in 0..ow {
                        yc[yo * ow + xo] = dw_tap_checked(xc, wc, h, wd, kh, kw, spec, yo, xo);
                    }
                }
            }
        });
    } else if is_pointwise(w.shape(), spec) {
        for ni in 0..n {
            let xn = &x.as_slice()[ni * ci * h * wd..(ni + 1) * ci * h * wd];
            let yn = matmul(w.as_slice(), xn, co, ci, h * wd);
            y[ni * co * oh * ow..(ni + 1) * co * oh * ow].copy_from_slice(&yn);
        }
    } else {
        let cog = co / spec.groups;
        let ckk = cig * kh * kw;
        for ni in 0..n {
            for g in 0..spec.groups {
                let xg = &x.as_slice()
                    [(ni * ci + g * cig) * h * wd..(ni * ci + (g + 1) * cig) * h * wd];
                let col = im2col(xg, (cig, h, wd), (kh, kw), spec, (oh, ow));
                let wg = &w.as_slice()[g * cog * ckk..(g + 1) * cog * ckk];
                let yg = matmul(wg, &col, cog, ckk, oh * ow);
                y[(ni * co + g * cog) * oh * ow..(ni * co + (g + 1) * cog) * oh * ow]
                    .copy_from_slice(&yg);
            }
        }
    }

    if let Some(b) = bias {
        assert_eq!(b.numel(), co);
        let bs = b.as_slice();
        for (nc, yc) in y.chunks_mut(oh * ow).enumerate() {
            let bv = bs[nc % co];
            for v in yc.iter_mut() {
                *v = *v + bv;
            }
        }
    }
    Tensor::new([n, co, oh, ow], y)
}

/// Gradient with respect to the convolution input.
pub fn conv2d_bwd_input<T: Real>(
    dy: &Tensor<T>,
    w: &Tensor<T>,
    xs: Shape,
    spec: ConvSpec,
) -> Tensor<T> {
    let [n, ci, h, wd] = xs;
    let [co, cig, kh, kw] = w.shape();
    let [dn, dco, oh, ow] = dy.shape();
    assert_eq!((dn, dco), (n, co));
    let mut dx = vec![T::zero(); numel(xs)];

    if is_depthwise(xs, w.shape(), spec) {
        if spec.stride == 1 && oh + kh == h + 2 * spec.pad + 1 {
            // Stride-1 full correlation: the input cotangent is a forward
            // depthwise convolution of dy with flipped taps and mirrored pad.
            let [cw0, cw1, _, _] = w.shape();
            let mut flipped = vec![T::zero(); w.numel()];
            let wsl = w.as_slice();
            for c in 0..cw0 {
                for i in 0..kh {
                    for j in 0..kw {
                        flipped[c * kh * kw + (kh - 1 - i) * kw + (kw - 1 - j)] =
                            wsl[c * kh * kw + i * kw + j];
                    }
                }
            }
            let wf = Tensor::new([cw0, cw1, kh, kw], flipped);
            let back_spec = ConvSpec { stride: 1, pad: kh - 1 - spec.pad, groups: spec.groups };
            return conv2d_fwd(dy, &wf, None, back_spec);
        }
        let ws = w.as_slice();
        let min_len = (n * ci).div_ceil(4 * rayon::current_num_threads()).max(1);
        dx.par_chunks_mut(h * wd).with_min_len(min_len).enumerate().for_each(|(nc, dxc)| {
            let (ni, c) = (nc / ci, nc % ci);
            let dyc = &dy.as_slice()[(ni * co + c) * oh * ow..(ni * co + c + 1) * oh * ow];
            let wc = &ws[c * kh * kw..(c + 1) * kh * kw];
            for yo in 0..oh {
                for i in 0..kh {
                    let yi = (yo * spec.stride + i) as isize - spec.pad as isize;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for xo in 0..ow {
                        let g = dyc[yo * ow + xo];
                        for j in 0..kw {
                            let xi = (xo * spec.stride + j) as isize - spec.pad as isize;
                            if xi >= 0 && xi < wd as isize {
                                let idx = (yi as usize) * wd + xi as usize;
                                dxc[idx] = dxc[idx] + g * wc[i * kw + j];
                            }
                        }
                    }
                }
            }
        });
    } else if is_pointwise(w.shape(), spec) {
        for ni in 0..n {
            let dyn_ = &dy.as_slice()[ni * co * oh * ow..(ni + 1) * co * oh * ow];
            let dxn = matmul_tn(w.as_slice(), dyn_, ci, co, oh * ow);
            dx[ni * ci * h * wd..(ni + 1) * ci * h * wd].copy_from_slice(&dxn);
        }
    } else {
        let cog = co / spec.groups;
        let ckk = cig * kh * kw;
        for ni in 0..n {
            for g in 0..spec.groups {
                let dyg =
                    &dy.as_slice()[(ni * co + g * cog) * oh * ow..(ni * co + (g + 1) * cog) * oh * ow];
                let wg = &w.as_slice()[g * cog * ckk..(g + 1) * cog * ckk];
                let dcol = matmul_tn(wg, dyg, ckk, cog, oh * ow);
                let dxg = &mut dx
                    [(ni * ci + g * cig) * h * wd..(ni * ci + (g + 1) * cig) * h * wd];
                col2im_add(&dcol, (cig, h, wd), (kh, kw), spec, (oh, ow), dxg);
            }
        }
    }
    Tensor::new(xs, dx)
}

/// Gradient with respect to the convolution weights.
pub fn conv2d_bwd_weight<T: Real>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    ws: Shape,
    spec: ConvSpec,
) -> Tensor<T> {
    let [n, ci, h, wd] = x.shape();
    let [co, cig, kh, kw] = ws;
    let [_, _, oh, ow] = dy.shape();
    let mut dw = vec![T::zero(); numel(ws)];

    if is_depthwise(x.shape(), ws, spec) {
        let min_len = co.div_ceil(4 * rayon::current_num_threads()).max(1);
        dw.par_chunks_mut(kh * kw).with_min_len(min_len).enumerate().for_each(|(c, dwc)| {
            for ni in 0..n {
                let xc = &x.as_slice()[(ni * ci + c) * h * wd..(ni * ci + c + 1) * h * wd];
                let dyc = &dy.as_slice()[(ni * co + c) * oh * ow..(ni * co + c + 1) * oh * ow];
                for i in 0..kh {
                    for j in 0..kw {
                        let mut acc = T::zero();
                        for yo in 0..oh {
                            let yi = (yo * spec.stride + i) as isize - spec.pad as isize;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            for xo in 0..ow {
                                let xi = (xo * spec.stride + j) as isize - spec.pad as isize;
                                if xi >= 0 && xi < wd as isize {
                                    acc = acc
                                        + dyc[yo * ow + xo]
                                            * xc[(yi as usize) * wd + xi as usize];
                                }
                            }
                        }
                        dwc[i * kw + j] = dwc[i * kw + j] + acc;
                    }
                }
            }
        });
    } else if is_pointwise(ws, spec) {
        for ni in 0..n {
            let xn = &x.as_slice()[ni * ci * h * wd..(ni + 1) * ci * h * wd];
            let dyn_ = &dy.as_slice()[ni * co * oh * ow..(ni + 1) * co * oh * ow];
            let dwn = matmul_nt(dyn_, xn, co, oh * ow, ci);
            for (d, s) in dw.iter_mut().zip(dwn.iter()) {
                *d = *d + *s;
            }
        }
    } else {
        let cog = co / spec.groups;
        let ckk = cig * kh * kw;
        for ni in 0..n {
            for g in 0..spec.groups {
                let xg = &x.as_slice()
                    [(ni * ci + g * cig) * h * wd..(ni * ci + (g + 1) * cig) * h * wd];
                let col = im2col(xg, (cig, h, wd), (kh, kw), spec, (oh, ow));
                let dyg =
                    &dy.as_slice()[(ni * co + g * cog) * oh * ow..(ni * co + (g + 1) * cog) * oh * ow];
                let dwg = matmul_nt(dyg, &col, cog, oh * ow, ckk);
                let dst = &mut dw[g * cog * ckk..(g + 1) * cog * ckk];
                for (d, s) in dst.iter_mut().zip(dwg.iter()) {
                    *d = *d + *s;
                }
            }
        }
    }
    Tensor::new(ws, dw)
}

/// Gradient with respect to the per-channel bias.
pub fn conv2d_bwd_bias<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, co, oh, ow] = dy.shape();
    let mut db = vec![T::zero(); co];
    for ni in 0..n {
        for c in 0..co {
            let s: T = dy.as_slice()[(ni * co + c) * oh * ow..(ni * co + c + 1) * oh * ow]
                .iter()
                .copied()
                .sum();
            db[c] = db[c] + s;
        }
    }
    Tensor::new([1, co, 1, 1], db)
}

/// 2x2 stride-2 average pooling (H, W must be even).
pub fn avg_pool2_fwd<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::cast_f64(0.25);
    let mut y = vec![T::zero(); n * c * oh * ow];
    for (nc, yc) in y.chunks_mut(oh * ow).enumerate() {
        let xc = &x.as_slice()[nc * h * w..(nc + 1) * h * w];
        for yo in 0..oh {
            for xo in 0..ow {
                let base = 2 * yo * w + 2 * xo;
                yc[yo * ow + xo] =
                    (xc[base] + xc[base + 1] + xc[base + w] + xc[base + w + 1]) * quarter;
            }
        }
    }
    Tensor::new([n, c, oh, ow], y)
}

pub fn avg_pool2_bwd<T: Real>(dy: &Tensor<T>, xs: Shape) -> Tensor<T> {
    let [n, c, h, w] = xs;
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::cast_f64(0.25);
    let mut dx = vec![T::zero(); numel(xs)];
    for (nc, dxc) in dx.chunks_mut(h * w).enumerate() {
        let dyc = &dy.as_slice()[nc * oh * ow..(nc + 1) * oh * ow];
        for yo in 0..oh {
            for xo in 0..ow {
                let g = dyc[yo * ow + xo] * quarter;
                let base = 2 * yo * w + 2 * xo;
                dxc[base] = g;
                dxc[base + 1] = g;
                dxc[base + w] = g;
                dxc[base + w + 1] = g;
            }
        }
    }
    let _ = (n, c);
    Tensor::new(xs, dx)
}

/// Pixel shuffle x2: (N, 4C, H, W) -> (N, C, 2H, 2W).
pub fn pixel_shuffle2_fwd<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c4, h, w] = x.shape();
    assert_eq!(c4 % 4, 0, "pixel shuffle needs channels divisible by 4");
    let c = c4 / 4;
    let mut y = vec![T::zero(); n * c * 4 * h * w];
    let (oh, ow) = (2 * h, 2 * w);
    for ni in 0..n {
        for cc in 0..c {
            for dy_ in 0..2usize {
                for dx_ in 0..2usize {
                    let src = (ni * c4 + cc * 4 + dy_ * 2 + dx_) * h * w;
                    for yy in 0..h {
                        for xx in 0..w {
                            y[(ni * c + cc) * oh * ow + (2 * yy + dy_) * ow + (2 * xx + dx_)] =
                                x.as_slice()[src + yy * w + xx];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, c, oh, ow], y)
}

/// Adjoint of pixel shuffle x2: (N, C, 2H, 2W) -> (N, 4C, H, W).
pub fn pixel_shuffle2_bwd<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh / 2, ow / 2);
    let c4 = c * 4;
    let mut dx = vec![T::zero(); n * c4 * h * w];
    for ni in 0..n {
        for cc in 0..c {
            for dy_ in 0..2usize {
                for dx_ in 0..2usize {
                    let dst = (ni * c4 + cc * 4 + dy_ * 2 + dx_) * h * w;
                    for yy in 0..h {
                        for xx in 0..w {
                            dx[dst + yy * w + xx] = dy.as_slice()
                                [(ni * c + cc) * oh * ow + (2 * yy + dy_) * ow + (2 * xx + dx_)];
                        }
                    }
                }
            }
        }
    }
    Tensor::new([n, c4, h, w], dx)
}

/// Nearest-neighbour x2 upsampling.
pub fn upsample2_fwd<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![T::zero(); n * c * oh * ow];
    for (nc, yc) in y.chunks_mut(oh * ow).enumerate() {
        let xc = &x.as_slice()[nc * h * w..(nc + 1) * h * w];
        for yy in 0..oh {
            for xx in 0..ow {
                yc[yy * ow + xx] = xc[(yy / 2) * w + xx / 2];
            }
        }
    }
    Tensor::new([n, c, oh, ow], y)
}

pub fn upsample2_bwd<T: Real>(dy: &Tensor<T>, xs: Shape) -> Tensor<T> {
    let [_, _, h, w] = xs;
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); numel(xs)];
    for (nc, dxc) in dx.chunks_mut(h * w).enumerate() {
        let dyc = &dy.as_slice()[nc * oh * ow..(nc + 1) * oh * ow];
        for yy in 0..oh {
            for xx in 0..ow {
                let idx = (yy / 2) * w + xx / 2;
                dxc[idx] = dxc[idx] + dyc[yy * ow + xx];
            }
        }
    }
    Tensor::new(xs, dx)
}

/// Reflective padding (no edge repeat): pads are (top, bottom, left, right),
/// each strictly smaller than the corresponding input extent.
pub fn pad_reflect_fwd<T: Real>(x: &Tensor<T>, pads: [usize; 4]) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let [pt, pb, pl, pr] = pads;
    assert!(pt < h && pb < h && pl < w && pr < w, "reflect pad larger than image");
    let (oh, ow) = (h + pt + pb, w + pl + pr);
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= len {
            i = 2 * (len - 1) - i;
        }
        i as usize
    };
    let mut y = vec![T::zero(); n * c * oh * ow];
    for (nc, yc) in y.chunks_mut(oh * ow).enumerate() {
        let xc = &x.as_slice()[nc * h * w..(nc + 1) * h * w];
        for yy in 0..oh {
            let sy = reflect(yy as isize - pt as isize, h);
            for xx in 0..ow {
                let sx = reflect(xx as isize - pl as isize, w);
                yc[yy * ow + xx] = xc[sy * w + sx];
            }
        }
    }
    Tensor::new([n, c, oh, ow], y)
}

/// Adjoint of reflective padding (scatter-add back into the source).
pub fn pad_reflect_bwd<T: Real>(dy: &Tensor<T>, xs: Shape, pads: [usize; 4]) -> Tensor<T> {
    let [_, _, h, w] = xs;
    let [pt, pb, pl, pr] = pads;
    let (oh, ow) = (h + pt + pb, w + pl + pr);
    let reflect = |i: isize, len: usize| -> usize {
        let len = len as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= len {
            i = 2 * (len - 1) - i;
        }
        i as usize
    };
    let mut dx = vec![T::zero(); numel(xs)];
    for (nc, dxc) in dx.chunks_mut(h * w).enumerate() {
        let dyc = &dy.as_slice()[nc * oh * ow..(nc + 1) * oh * ow];
        for yy in 0..oh {
            let sy = reflect(yy as isize - pt as isize, h);
            for xx in 0..ow {
                let sx = reflect(xx as isize - pl as isize, w);
                dxc[sy * w + sx] = dxc[sy * w + sx] + dyc[yy * ow + xx];
            }
        }
    }
    Tensor::new(xs, dx)
}

/// Crop the top-left (h, w) region.
pub fn crop_to<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let [n, c, xh, xw] = x.shape();
    assert!(h <= xh && w <= xw);
    let mut y = vec![T::zero(); n * c * h * w];
    for (nc, yc) in y.chunks_mut(h * w).enumerate() {
        let xc = &x.as_slice()[nc * xh * xw..(nc + 1) * xh * xw];
        for yy in 0..h {
            yc[yy * w..(yy + 1) * w].copy_from_slice(&xc[yy * xw..yy * xw + w]);
        }
    }
    Tensor::new([n, c, h, w], y)
}

/// Swap the last two axes: (N, C, H, W) -> (N, C, W, H).
pub fn transpose_last2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut y = vec![T::zero(); x.numel()];
    for (nc, yc) in y.chunks_mut(h * w).enumerate() {
        let xc = &x.as_slice()[nc * h * w..(nc + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                yc[j * h + i] = xc[i * w + j];
            }
        }
    }
    Tensor::new([n, c, w, h], y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64) * 0.37 - 1.1).collect()
    }

    /// Reference convolution: direct summation, no fast paths.
    #[allow(unused_variables)]
    fn conv2d_naive(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        spec: ConvSpec,
    ) -> Tensor<f64> {
        let [n, ci, h, wd] = x.shape();
        let [co, cig, kh, kw] = w.shape();
        let (oh, ow) = spec.out_hw(h, wd, kh, kw);
        let cog = co / spec.groups;
        let mut y = Tensor::zeros([n, co, oh, ow]);
        let mut out = y.as_slice().to_vec();
        for ni in 0..n {
            for c_out in 0..co {
                let g = c_out / cog;
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b.as_slice()[c_out]);
                        for cc in 0..cig {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let yi = (yo * spec.stride + i) as isize - spec.pad as isize;
                                    let xi = (xo * spec.stride + j) as isize - spec.pad as isize;
                                    if yi >= 0 && yi < h as isize && xi >= 0 && xi < wd as isize {
                                        acc += x.at(ni, g * cig + cc, yi as usize, xi as usize)
                                            * w.at(c_out, cc, i, j);
                                    }
                                }
                            }
                        }
                        out[((ni * co + c_out) * oh + yo) * ow + xo] = acc;
                    }
                }
            }
        }
        y = Tensor::new([n, co, oh, ow], out);
        y
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64) {
        assert_eq!(a.shape(), b.shape());
        let d = a.sub(b).max_abs();
        assert!(d <= tol, "max abs diff {d} > {tol}");
    }

    #[test]
    fn matmul_variants_agree() {
        let (m, k, n) = (5, 7, 4);
        let a = seq(m * k);
        let b = seq(k * n);
        let c = matmul(&a, &b, m, k, n);
        // A * B == (A^T)^T * B via tn, and == A * (B^T)^T via nt
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        let mut bt = vec![0.0; n * k];
        for i in 0..k {
            for j in 0..n {
                bt[j * k + i] = b[i * n + j];
            }
        }
        let c_tn = matmul_tn(&at, &b, m, k, n);
        let c_nt = matmul_nt(&a, &bt, m, k, n);
        for i in 0..m * n {
            assert!((c[i] - c_tn[i]).abs() < 1e-12);
            assert!((c[i] - c_nt[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_fast_paths_match_naive() {
        let cases: Vec<(Shape, Shape, ConvSpec)> = vec![
            // pointwise
            ([2, 6, 5, 4], [3, 6, 1, 1], ConvSpec::unit()),
            // depthwise 7x7 same
            ([1, 4, 8, 8], [4, 1, 7, 7], ConvSpec { stride: 1, pad: 3, groups: 4 }),
            // strided 2x2 downsample
            ([1, 3, 8, 8], [6, 3, 2, 2], ConvSpec { stride: 2, pad: 0, groups: 1 }),
            // 4x4 stride 2 pad 1 (discriminator style)
            ([1, 3, 9, 9], [5, 3, 4, 4], ConvSpec { stride: 2, pad: 1, groups: 1 }),
            // grouped 3x3
            ([1, 4, 6, 6], [4, 2, 3, 3], ConvSpec { stride: 1, pad: 1, groups: 2 }),
        ];
        for (xs, ws, spec) in cases {
            let x = Tensor::new(xs, seq(numel(xs)));
            let w = Tensor::new(ws, seq(numel(ws)).iter().map(|v| v * 0.1).collect());
            let b = Tensor::new([1, ws[0], 1, 1], seq(ws[0]));
            let fast = conv2d_fwd(&x, &w, Some(&b), spec);
            let slow = conv2d_naive(&x, &w, Some(&b), spec);
            assert_close(&fast, &slow, 1e-10);
        }
    }

    #[test]
    fn conv_backward_is_adjoint_of_forward() {
        // <conv(x), dy> == <x, conv_bwd_input(dy)> and likewise for weights.
        let cases: Vec<(Shape, Shape, ConvSpec)> = vec![
            ([1, 4, 6, 6], [4, 1, 3, 3], ConvSpec { stride: 1, pad: 1, groups: 4 }),
            ([2, 3, 7, 7], [5, 3, 2, 2], ConvSpec { stride: 2, pad: 0, groups: 1 }),
            ([1, 6, 5, 5], [4, 6, 1, 1], ConvSpec::unit()),
            ([1, 3, 9, 9], [5, 3, 4, 4], ConvSpec { stride: 2, pad: 1, groups: 1 }),
        ];
        for (xs, ws, spec) in cases {
            let x = Tensor::new(xs, seq(numel(xs)));
            let w = Tensor::new(ws, seq(numel(ws)).iter().map(|v| v * 0.07).collect());
            let y = conv2d_fwd(&x, &w, None, spec);
            let dy = Tensor::new(y.shape(), seq(y.numel()).iter().map(|v| v * 0.3).collect());
            let dx = conv2d_bwd_input(&dy, &w, xs, spec);
            let dw = conv2d_bwd_weight(&dy, &x, ws, spec);
            let lhs: f64 = y.as_slice().iter().zip(dy.as_slice()).map(|(a, b)| a * b).sum();
            let rhs_x: f64 = x.as_slice().iter().zip(dx.as_slice()).map(|(a, b)| a * b).sum();
            let rhs_w: f64 = w.as_slice().iter().zip(dw.as_slice()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_x).abs() < 1e-9 * lhs.abs().max(1.0), "input adjoint broken");
            // <y, dy> as a bilinear form in w with x fixed:
            let wy: f64 = conv2d_fwd(&x, &w, None, spec)
                .as_slice()
                .iter()
                .zip(dy.as_slice())
                .map(|(a, b)| a * b)
                .sum();
            assert!((wy - rhs_w).abs() < 1e-9 * wy.abs().max(1.0), "weight adjoint broken");
        }
    }

    #[test]
    fn pixel_shuffle_roundtrip() {
        let x = Tensor::new([1, 8, 3, 2], seq(48));
        let y = pixel_shuffle2_fwd(&x);
        assert_eq!(y.shape(), [1, 2, 6, 4]);
        let back = pixel_shuffle2_bwd(&y);
        assert_close(&back, &x, 0.0);
    }

    #[test]
    fn reflect_pad_matches_expected_row() {
        let x = Tensor::new([1, 1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]);
        let y = pad_reflect_fwd(&x, [0, 0, 2, 1]);
        assert_eq!(y.as_slice(), &[2.0, 1.0, 0.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn transpose_last2_involution() {
        let x = Tensor::new([2, 3, 4, 5], seq(120));
        let y = transpose_last2(&transpose_last2(&x));
        assert_close(&y, &x, 0.0);
    }
}
