//! Frequency-domain transforms and their adjoints.
//!
//! Complex tensors are packed as channel pairs: a (B, C, H, W) complex field
//! is stored as (B, 2C, H, W) with real parts in channels [0, C) and
//! imaginary parts in channels [C, 2C).
//!
//! Every transform comes in two modes: `Fast` (rustfft) and `Naive` (direct
//! O(n^2) summation). The naive mode is the independent oracle - the fast
//! path is only trusted because the two agree. Adjoints are exact transposes
//! of the forward maps, so gradient checks validate them directly.

use rayon::prelude::*;
use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Which DFT implementation to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DftMode {
    /// FFT via rustfft.
    Fast,
    /// Direct O(n^2) summation; the reference the fast path is checked against.
    Naive,
    /// Fault-injection hook: fast path with the imaginary sign flipped.
    /// Only reachable through the self-check corruption option.
    FastBadSign,
}

const PAR_FFT_WORK: usize = 1 << 14;

/// Run an in-place complex FFT over consecutive rows of `buf`.
fn rows_fft<T: Real>(buf: &mut [Complex<T>], len: usize, inverse: bool) {
    let plan = T::fft_plan(len, inverse);
    let rows = buf.len() / len;
    if buf.len() >= PAR_FFT_WORK && rows >= 2 {
        let min_rows = rows.div_ceil(4 * rayon::current_num_threads()).max(1);
        buf.par_chunks_mut(len * min_rows).for_each_init(
            || vec![Complex::new(T::zero(), T::zero()); plan.get_inplace_scratch_len()],
            |scratch, chunk| {
                for row in chunk.chunks_mut(len) {
                    plan.process_with_scratch(row, scratch);
                }
            },
        );
    } else {
        let mut scratch = vec![Complex::new(T::zero(), T::zero()); plan.get_inplace_scratch_len()];
        for row in buf.chunks_mut(len) {
            plan.process_with_scratch(row, &mut scratch);
        }
    }
}

/// Direct-sum DFT of one row (reference path).
fn naive_dft_row<T: Real>(row: &[Complex<T>], inverse: bool) -> Vec<Complex<T>> {
    let len = row.len();
    let sign = if inverse { 1.0 } else { -1.0 };
    (0..len)
        .map(|k| {
            let mut acc = Complex::new(T::zero(), T::zero());
            for (n, &v) in row.iter().enumerate() {
                let ang = sign * 2.0 * std::f64::consts::PI * (k as f64) * (n as f64) / len as f64;
                let tw = Complex::new(T::cast_f64(ang.cos()), T::cast_f64(ang.sin()));
                acc = acc + v * tw;
            }
            acc
        })
        .collect()
}

fn rows_dft<T: Real>(buf: &mut [Complex<T>], len: usize, inverse: bool, mode: DftMode) {
    match mode {
        DftMode::Fast => rows_fft(buf, len, inverse),
        DftMode::FastBadSign => {
            rows_fft(buf, len, inverse);
            for v in buf.iter_mut() {
                v.im = -v.im;
            }
        }
        DftMode::Naive => {
            for row in buf.chunks_mut(len) {
                let out = naive_dft_row(row, inverse);
                row.copy_from_slice(&out);
            }
        }
    }
}

fn unpack_rows<T: Real>(x: &Tensor<T>) -> (usize, usize, Vec<Complex<T>>) {
    let [b, c2, h, w] = x.shape();
    assert_eq!(c2 % 2, 0, "packed complex tensor needs even channel count");
    let c = c2 / 2;
    let xs = x.as_slice();
    let mut rows = vec![Complex::new(T::zero(), T::zero()); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                let re = &xs[((bi * c2 + ci) * h + hi) * w..((bi * c2 + ci) * h + hi) * w + w];
                let im = &xs
                    [((bi * c2 + c + ci) * h + hi) * w..((bi * c2 + c + ci) * h + hi) * w + w];
                let dst = &mut rows[((bi * c + ci) * h + hi) * w..((bi * c + ci) * h + hi) * w + w];
                for (d, (&r, &i)) in dst.iter_mut().zip(re.iter().zip(im.iter())) {
                    *d = Complex::new(r, i);
                }
            }
        }
    }
    (c, w, rows)
}

fn pack_rows<T: Real>(rows: &[Complex<T>], b: usize, c: usize, h: usize, w: usize) -> Tensor<T> {
    let c2 = 2 * c;
    let mut out = vec![T::zero(); b * c2 * h * w];
    for bi in 0..b {
        for ci in 0..c {
            for hi in 0..h {
                let src = &rows[((bi * c + ci) * h + hi) * w..((bi * c + ci) * h + hi) * w + w];
                for (wi, v) in src.iter().enumerate() {
                    out[((bi * c2 + ci) * h + hi) * w + wi] = v.re;
                    out[((bi * c2 + c + ci) * h + hi) * w + wi] = v.im;
                }
            }
        }
    }
    Tensor::new([b, c2, h, w], out)
}

/// Unitary DFT along the W axis of a real tensor: (B, C, H, W) -> packed
/// (B, 2C, H, W). Scale 1/sqrt(W).
pub fn dft_w_real<T: Real>(x: &Tensor<T>, mode: DftMode) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let mut rows: Vec<Complex<T>> =
        x.as_slice().iter().map(|&v| Complex::new(v, T::zero())).collect();
    rows_dft(&mut rows, w, false, mode);
    let s = T::cast_f64(1.0 / (w as f64).sqrt());
    for v in rows.iter_mut() {
        *v = *v * s;
    }
    pack_rows(&rows, b, c, h, w)
}

/// Adjoint of `dft_w_real`: packed cotangent -> real cotangent.
/// grad_x = Re(F(g_re - i*g_im)) with the same unitary scale.
pub fn dft_w_real_adjoint<T: Real>(g: &Tensor<T>, mode: DftMode) -> Tensor<T> {
    let [b, c2, h, w] = g.shape();
    let c = c2 / 2;
    let (_, _, mut rows) = unpack_rows(g);
    for v in rows.iter_mut() {
        v.im = -v.im;
    }
    rows_dft(&mut rows, w, false, mode);
    let s = T::cast_f64(1.0 / (w as f64).sqrt());
    let mut out = vec![T::zero(); b * c * h * w];
    for (o, v) in out.iter_mut().zip(rows.iter()) {
        *o = v.re * s;
    }
    Tensor::new([b, c, h, w], out)
}

/// Unitary inverse DFT along the W axis of a packed complex tensor.
/// Scale 1/sqrt(W).
pub fn idft_w_packed<T: Real>(x: &Tensor<T>, mode: DftMode) -> Tensor<T> {
    let [b, c2, h, w] = x.shape();
    let c = c2 / 2;
    let (_, _, mut rows) = unpack_rows(x);
    rows_dft(&mut rows, w, true, mode);
    let s = T::cast_f64(1.0 / (w as f64).sqrt());
    for v in rows.iter_mut() {
        *v = *v * s;
    }
    pack_rows(&rows, b, c, h, w)
}

/// Adjoint of `idft_w_packed`: the unitary forward DFT applied to the packed
/// cotangent (the inverse-DFT matrix is symmetric, so its adjoint is its
/// conjugate, i.e. the forward transform).
pub fn idft_w_packed_adjoint<T: Real>(g: &Tensor<T>, mode: DftMode) -> Tensor<T> {
    let [b, c2, h, w] = g.shape();
    let c = c2 / 2;
    let (_, _, mut rows) = unpack_rows(g);
    rows_dft(&mut rows, w, false, mode);
    let s = T::cast_f64(1.0 / (w as f64).sqrt());
    for v in rows.iter_mut() {
        *v = *v * s;
    }
    pack_rows(&rows, b, c, h, w)
}

/// Half-spectrum width of a real FFT.
pub fn rfft_width(w: usize) -> usize {
    w / 2 + 1
}

/// Real 2D FFT over space: (B, C, H, W) -> packed (B, 2C, H, W/2+1).
/// Rows first (half spectrum kept), then a full complex FFT down columns.
/// Unnormalized; `irfft2` carries the 1/(HW).
pub fn rfft2<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    let wh = rfft_width(w);
    // Row pass.
    let mut rows: Vec<Complex<T>> =
        x.as_slice().iter().map(|&v| Complex::new(v, T::zero())).collect();
    rows_dft(&mut rows, w, false, DftMode::Fast);
    // Keep bins 0..wh, then column pass.
    let mut cols = vec![Complex::new(T::zero(), T::zero()); b * c * h * wh];
    for r in 0..b * c * h {
        for k in 0..wh {
            cols[r * wh + k] = rows[r * w + k];
        }
    }
    fft_columns(&mut cols, b * c, h, wh, false, false);
    pack_rows(&cols, b, c, h, wh)
}

/// Inverse of `rfft2`: packed (B, 2C, H, W/2+1) -> real (B, C, H, W).
pub fn irfft2<T: Real>(x: &Tensor<T>, w: usize) -> Tensor<T> {
    let [b, c2, h, wh] = x.shape();
    let c = c2 / 2;
    assert_eq!(wh, rfft_width(w));
    let (_, _, mut cols) = unpack_rows(x);
    // Column inverse with 1/H.
    fft_columns(&mut cols, b * c, h, wh, true, true);
    // Row pass: Hermitian-extend each half row to length w, inverse FFT, 1/W.
    let mut full = vec![Complex::new(T::zero(), T::zero()); b * c * h * w];
    for r in 0..b * c * h {
        let src = &cols[r * wh..(r + 1) * wh];
        let dst = &mut full[r * w..(r + 1) * w];
        dst[0] = Complex::new(src[0].re, T::zero());
        for k in 1..wh {
            if 2 * k == w {
                dst[k] = Complex::new(src[k].re, T::zero());
            } else {
                dst[k] = src[k];
                dst[w - k] = src[k].conj();
            }
        }
    }
    rows_dft(&mut full, w, true, DftMode::Fast);
    let s = T::cast_f64(1.0 / w as f64);
    let out: Vec<T> = full.iter().map(|v| v.re * s).collect();
    Tensor::new([b, c, h, w], out)
}

/// Adjoint of `rfft2`: packed cotangent (B, 2C, H, W/2+1) -> real (B, C, H, W).
pub fn rfft2_adjoint<T: Real>(g: &Tensor<T>, w: usize) -> Tensor<T> {
    let [b, c2, h, wh] = g.shape();
    let c = c2 / 2;
    let (_, _, mut cols) = unpack_rows(g);
    // Adjoint of the unnormalized column DFT = unnormalized column IDFT.
    fft_columns(&mut cols, b * c, h, wh, true, false);
    // Adjoint of row truncation + r2c: zero-pad, conjugate, forward DFT, Re.
    let mut full = vec![Complex::new(T::zero(), T::zero()); b * c * h * w];
    for r in 0..b * c * h {
        for k in 0..wh {
            full[r * w + k] = cols[r * wh + k].conj();
        }
    }
    rows_dft(&mut full, w, false, DftMode::Fast);
    let out: Vec<T> = full.iter().map(|v| v.re).collect();
    Tensor::new([b, c, h, w], out)
}

/// Adjoint of `irfft2`: real cotangent (B, C, H, W) -> packed (B, 2C, H, W/2+1).
pub fn irfft2_adjoint<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = g.shape();
    let wh = rfft_width(w);
    // Adjoint of the Hermitian c2r row map.
    let mut rows: Vec<Complex<T>> =
        g.as_slice().iter().map(|&v| Complex::new(v, T::zero())).collect();
    rows_dft(&mut rows, w, false, DftMode::Fast);
    let inv_w = 1.0 / w as f64;
    let mut cols = vec![Complex::new(T::zero(), T::zero()); b * c * h * wh];
    for r in 0..b * c * h {
        for k in 0..wh {
            let dup_bin = k == 0 || 2 * k == w;
            let scale = T::cast_f64(if dup_bin { inv_w } else { 2.0 * inv_w });
            let v = rows[r * w + k] * scale;
            cols[r * wh + k] = if dup_bin { Complex::new(v.re, T::zero()) } else { v };
        }
    }
    // Adjoint of the 1/H column IDFT = 1/H column DFT.
    fft_columns(&mut cols, b * c, h, wh, false, true);
    pack_rows(&cols, b, c, h, wh)
}

/// FFT down the columns of (groups, h, w)-shaped complex data.
/// `normalize` divides by h (used by the inverse).
fn fft_columns<T: Real>(
    buf: &mut [Complex<T>],
    groups: usize,
    h: usize,
    w: usize,
    inverse: bool,
    normalize: bool,
) {
    let mut col = vec![Complex::new(T::zero(), T::zero()); h];
    let plan = T::fft_plan(h, inverse);
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); plan.get_inplace_scratch_len()];
    let s = T::cast_f64(1.0 / h as f64);
    for g in 0..groups {
        let base = g * h * w;
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[base + y * w + x];
            }
            plan.process_with_scratch(&mut col, &mut scratch);
            for y in 0..h {
                buf[base + y * w + x] = if normalize { col[y] * s } else { col[y] };
            }
        }
    }
}

/// The four orthonormal Haar subbands of an even-sized image.
pub struct DwtSubbands<T> {
    pub ll: Tensor<T>,
    pub lh: Tensor<T>,
    pub hl: Tensor<T>,
    pub hh: Tensor<T>,
}

/// Orthonormal 2D Haar analysis packed as channel blocks:
/// (B, C, H, W) -> (B, 4C, H/2, W/2) ordered [ll | lh | hl | hh].
pub fn haar_dwt2_packed<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [b, c, h, w] = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "Haar DWT needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let half = T::cast_f64(0.5);
    let mut out = vec![T::zero(); b * 4 * c * oh * ow];
    let xs = x.as_slice();
    for bi in 0..b {
        for ci in 0..c {
            let src = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for yo in 0..oh {
                for xo in 0..ow {
                    let a = src[2 * yo * w + 2 * xo];
                    let bb = src[2 * yo * w + 2 * xo + 1];
                    let cc = src[(2 * yo + 1) * w + 2 * xo];
                    let dd = src[(2 * yo + 1) * w + 2 * xo + 1];
                    let pos = yo * ow + xo;
                    out[((bi * 4 * c + ci) * oh * ow) + pos] = (a + bb + cc + dd) * half;
                    out[((bi * 4 * c + c + ci) * oh * ow) + pos] = (a - bb + cc - dd) * half;
                    out[((bi * 4 * c + 2 * c + ci) * oh * ow) + pos] = (a + bb - cc - dd) * half;
                    out[((bi * 4 * c + 3 * c + ci) * oh * ow) + pos] = (a - bb - cc + dd) * half;
                }
            }
        }
    }
    Tensor::new([b, 4 * c, oh, ow], out)
}

/// Orthonormal 2D Haar synthesis: (B, 4C, H/2, W/2) -> (B, C, H, W).
/// Exact inverse (and adjoint) of `haar_dwt2_packed`.
pub fn haar_idwt2_packed<T: Real>(s: &Tensor<T>) -> Tensor<T> {
    let [b, c4, oh, ow] = s.shape();
    assert_eq!(c4 % 4, 0);
    let c = c4 / 4;
    let (h, w) = (2 * oh, 2 * ow);
    let half = T::cast_f64(0.5);
    let mut out = vec![T::zero(); b * c * h * w];
    let ss = s.as_slice();
    for bi in 0..b {
        for ci in 0..c {
            let dst = &mut out[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for yo in 0..oh {
                for xo in 0..ow {
                    let pos = yo * ow + xo;
                    let ll = ss[((bi * c4 + ci) * oh * ow) + pos];
                    let lh = ss[((bi * c4 + c + ci) * oh * ow) + pos];
                    let hl = ss[((bi * c4 + 2 * c + ci) * oh * ow) + pos];
                    let hh = ss[((bi * c4 + 3 * c + ci) * oh * ow) + pos];
                    dst[2 * yo * w + 2 * xo] = (ll + lh + hl + hh) * half;
                    dst[2 * yo * w + 2 * xo + 1] = (ll - lh + hl - hh) * half;
                    dst[(2 * yo + 1) * w + 2 * xo] = (ll + lh - hl - hh) * half;
                    dst[(2 * yo + 1) * w + 2 * xo + 1] = (ll - lh - hl + hh) * half;
                }
            }
        }
    }
    Tensor::new([b, c, h, w], out)
}

/// Haar analysis with the subbands split out; errors on odd spatial sizes.
pub fn haar_dwt2<T: Real>(x: &Tensor<T>) -> Result<DwtSubbands<T>> {
    let [b, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::numeric(format!(
            "Haar DWT requires even spatial size, got {h}x{w}"
        )));
    }
    let packed = haar_dwt2_packed(x);
    let slice_block = |i: usize| {
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![T::zero(); b * c * oh * ow];
        for bi in 0..b {
            let src = (bi * 4 * c + i * c) * oh * ow;
            out[bi * c * oh * ow..(bi + 1) * c * oh * ow]
                .copy_from_slice(&packed.as_slice()[src..src + c * oh * ow]);
        }
        Tensor::new([b, c, oh, ow], out)
    };
    Ok(DwtSubbands {
        ll: slice_block(0),
        lh: slice_block(1),
        hl: slice_block(2),
        hh: slice_block(3),
    })
}

/// Haar synthesis from split subbands.
pub fn haar_idwt2<T: Real>(s: &DwtSubbands<T>) -> Result<Tensor<T>> {
    let [b, c, oh, ow] = s.ll.shape();
    for t in [&s.lh, &s.hl, &s.hh] {
        if t.shape() != s.ll.shape() {
            return Err(Error::numeric("DWT subbands must share one shape"));
        }
    }
    let mut packed = vec![T::zero(); b * 4 * c * oh * ow];
    for bi in 0..b {
        for (i, t) in [&s.ll, &s.lh, &s.hl, &s.hh].iter().enumerate() {
            let dst = (bi * 4 * c + i * c) * oh * ow;
            packed[dst..dst + c * oh * ow]
                .copy_from_slice(&t.as_slice()[bi * c * oh * ow..(bi + 1) * c * oh * ow]);
        }
    }
    Ok(haar_idwt2_packed(&Tensor::new([b, 4 * c, oh, ow], packed)))
}
