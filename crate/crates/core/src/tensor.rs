//! Dense 4-axis tensors, the single data currency of the toolkit.
//!
//! Every value — RGB batches, latent features, parameters, packed complex
//! spectra — lives in an (N, C, H, W) tensor. Matrices are (B, 1, M, K),
//! scalars are (1, 1, 1, 1). Storage is row-major behind an `Arc`, so clones
//! are cheap and the autodiff tape can hold many views of the same buffer.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Scalar type the whole engine is generic over. Training runs in f32;
/// self-checks and gradient oracles request f64.
pub trait Real:
    num_traits::Float + rustfft::FftNum + Send + Sync + std::iter::Sum + std::fmt::Display + 'static
{
    const NAME: &'static str;
    fn cast_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Planned FFT of the given length (cached per thread per length).
    fn fft_plan(len: usize, inverse: bool) -> Arc<dyn rustfft::Fft<Self>>;
    /// tanh for bulk activation maps. f32 uses a rational approximation
    /// (max error ~1e-7) whose pure arithmetic autovectorizes; f64 keeps
    /// libm so the double-precision oracle paths stay exact.
    fn tanh_bulk(self) -> Self;
}

/// Rational tanh (the classic 135135 Pade table), exact at 0, clamped to
/// the saturation region; error under 2e-7 across the range.
#[inline]
fn tanh_rational_f32(x: f32) -> f32 {
    let t = x.clamp(-9.0, 9.0);
    let s = t * t;
    let num = t * (135135.0 + s * (17325.0 + s * (378.0 + s)));
    let den = 135135.0 + s * (62370.0 + s * (3150.0 + s * 28.0));
    num / den
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $cache:ident, $tanh:expr) => {
        impl Real for $t {
            const NAME: &'static str = $name;
            fn cast_f64(v: f64) -> Self {
                v as $t
            }
            fn as_f64(self) -> f64 {
                self as f64
            }
            fn tanh_bulk(self) -> Self {
                ($tanh)(self)
            }
            fn fft_plan(len: usize, inverse: bool) -> Arc<dyn rustfft::Fft<Self>> {
                use std::cell::RefCell;
                use std::collections::HashMap;
                thread_local! {
                    static $cache: RefCell<(rustfft::FftPlanner<$t>, HashMap<(usize, bool), Arc<dyn rustfft::Fft<$t>>>)> =
                        RefCell::new((rustfft::FftPlanner::new(), HashMap::new()));
                }
                $cache.with(|c| {
                    let (planner, cache) = &mut *c.borrow_mut();
                    cache
                        .entry((len, inverse))
                        .or_insert_with(|| {
                            if inverse {
                                planner.plan_fft_inverse(len)
                            } else {
                                planner.plan_fft_forward(len)
                            }
                        })
                        .clone()
                })
            }
        }
    };
}

impl_real!(f32, "f32", FFT_CACHE_F32, tanh_rational_f32);
impl_real!(f64, "f64", FFT_CACHE_F64, f64::tanh);

/// Shape as (batch, channels, height, width).
pub type Shape = [usize; 4];

pub fn numel(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2] * shape[3]
}

/// Dense row-major 4-axis tensor with shared storage.
#[derive(Clone)]
pub struct Tensor<T> {
    shape: Shape,
    data: Arc<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape, data: Arc::new(data) }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::new(shape, vec![T::zero(); numel(shape)])
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor::new(shape, vec![v; numel(shape)])
    }

    pub fn scalar(v: T) -> Self {
        Tensor::new([1, 1, 1, 1], vec![v])
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Tensor::new(shape, (0..numel(shape)).map(|i| f(i)).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Offset of element (n, c, h, w).
    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.idx(n, c, h, w)]
    }

    /// Same storage under a different shape (element count must match).
    pub fn reshape(&self, shape: Shape) -> Tensor<T> {
        assert_eq!(numel(shape), self.numel(), "reshape {:?} -> {:?}", self.shape, shape);
        Tensor { shape, data: Arc::clone(&self.data) }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor::new(self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        assert_eq!(self.shape, other.shape, "zip shape mismatch");
        Tensor::new(
            self.shape,
            self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::cast_f64(self.numel() as f64)
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::new(self.shape, self.data.iter().map(|&x| U::cast_f64(x.as_f64())).collect())
    }

    /// Broadcast-compatibility: every axis matches or is 1 on `self`.
    pub fn broadcasts_to(&self, shape: Shape) -> bool {
        self.shape.iter().zip(shape.iter()).all(|(&a, &b)| a == b || a == 1)
    }
}

/// A batch of images or latent features. RGB batches (C = 3 at the pipeline
/// boundary) must be finite and inside [0, 1]; latents are unconstrained.
#[derive(Clone)]
pub struct ImageBatch {
    data: Tensor<f32>,
}

impl ImageBatch {
    /// Wrap an RGB batch, validating the image invariants.
    pub fn new_rgb(data: Tensor<f32>) -> Result<Self> {
        if data.c() != 3 {
            return Err(Error::numeric(format!(
                "RGB batch must have 3 channels, got {}",
                data.c()
            )));
        }
        if data.h() == 0 || data.w() == 0 {
            return Err(Error::numeric("image batch must have H >= 1 and W >= 1"));
        }
        if !data.all_finite() {
            return Err(Error::numeric("image batch contains non-finite values"));
        }
        if data.as_slice().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::numeric("RGB image values must lie in [0, 1]"));
        }
        Ok(ImageBatch { data })
    }

    /// Wrap a latent batch (no range constraint, still finite).
    pub fn new_latent(data: Tensor<f32>) -> Result<Self> {
        if !data.all_finite() {
            return Err(Error::numeric("latent batch contains non-finite values"));
        }
        Ok(ImageBatch { data })
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn shape(&self) -> Shape {
        self.data.shape()
    }
}
