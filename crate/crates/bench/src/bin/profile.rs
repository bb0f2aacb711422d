//! Quick wall-clock breakdown of one training step's components.
//! Run: cargo run -p umbra-bench --bin profile --release

use std::time::Instant;

use umbra_core::config::Config;
use umbra_core::losses::{total_loss, Discriminator, RandomConvExtractor, Stage};
use umbra_core::nn::{Ctx, ParamStore};
use umbra_core::removal::REMOVAL_DFT_MODE;
use umbra_core::rng::{rng_at, Stream};
use umbra_core::tape::Tape;
use umbra_core::tensor::Tensor;
use umbra_core::trainer::build_models;
use umbra_core::RunSeed;
use rand::Rng;

fn timeit<R>(label: &str, reps: usize, mut f: impl FnMut() -> R) -> R {
    let mut out = None;
    let start = Instant::now();
    for _ in 0..reps {
        out = Some(f());
    }
    let per = start.elapsed().as_secs_f64() / reps as f64;
    println!("{label:40} {:8.1} ms", per * 1e3);
    out.unwrap()
}

fn kernel_bench() {
    use umbra_core::kernels::{conv2d_fwd, conv2d_bwd_input, conv2d_bwd_weight, matmul, ConvSpec};
    let mk = |n: usize, tag: u64| -> Tensor<f32> {
        let mut rng = rng_at(RunSeed(tag), Stream::Check, &[0]);
        Tensor::from_fn([1, 1, 1, n], |_| rng.gen_range(-1.0..1.0f32)).reshape([1, 1, 1, n])
    };
    // raw matmul throughput: discriminator C512 layer shape
    let a = mk(512 * 4096, 1).reshape([1, 1, 512, 4096]);
    let b = mk(4096 * 49, 2).reshape([1, 1, 4096, 49]);
    let flops = 2.0 * 512.0 * 4096.0 * 49.0;
    let start = std::time::Instant::now();
    let reps = 20;
    for _ in 0..reps {
        let _ = matmul(a.as_slice(), b.as_slice(), 512, 4096, 49);
    }
    let el = start.elapsed().as_secs_f64() / reps as f64;
    println!("matmul 512x4096x49: {:6.1} ms  {:6.2} GFLOP/s", el * 1e3, flops / el / 1e9);

    // square-ish matmul: attention A_F shape
    let a2 = mk(32 * 4096, 3).reshape([1, 1, 32, 4096]);
    let b2 = mk(4096 * 32, 4).reshape([1, 1, 4096, 32]);
    let flops2 = 2.0 * 32.0 * 4096.0 * 32.0;
    let start = std::time::Instant::now();
    for _ in 0..200 {
        let _ = matmul(a2.as_slice(), b2.as_slice(), 32, 4096, 32);
    }
    let el = start.elapsed().as_secs_f64() / 200.0;
    println!("matmul 32x4096x32:  {:6.3} ms  {:6.2} GFLOP/s", el * 1e3, flops2 / el / 1e9);

    // big pointwise conv: unet pw1 at level1 (64ch, 32x32) -> 256
    let x = mk(64 * 1024, 5).reshape([1, 64, 32, 32]);
    let w = mk(256 * 64, 6).reshape([256, 64, 1, 1]);
    let flops3 = 2.0 * 256.0 * 64.0 * 1024.0;
    let start = std::time::Instant::now();
    for _ in 0..100 {
        let _ = conv2d_fwd(&x, &w, None, ConvSpec::unit());
    }
    let el = start.elapsed().as_secs_f64() / 100.0;
    println!("pw conv 64->256@32: {:6.3} ms  {:6.2} GFLOP/s", el * 1e3, flops3 / el / 1e9);

    // k4s2 conv like discriminator layer 2: 64->128 @ 35x35
    let x = mk(64 * 35 * 35, 7).reshape([1, 64, 35, 35]);
    let w = mk(128 * 64 * 16, 8).reshape([128, 64, 4, 4]);
    let spec = ConvSpec { stride: 2, pad: 1, groups: 1 };
    let y = conv2d_fwd(&x, &w, None, spec);
    let ys = y.shape();
    let flops4 = 2.0 * 128.0 * 64.0 * 16.0 * (ys[2] * ys[3]) as f64;
    let start = std::time::Instant::now();
    for _ in 0..50 {
        let _ = conv2d_fwd(&x, &w, None, spec);
    }
    let el = start.elapsed().as_secs_f64() / 50.0;
    println!("conv k4s2 64->128:  {:6.3} ms  {:6.2} GFLOP/s (fwd)", el * 1e3, flops4 / el / 1e9);
    let dy = mk(y.numel(), 9).reshape(ys);
    let start = std::time::Instant::now();
    for _ in 0..50 {
        let _ = conv2d_bwd_input(&dy, &w, x.shape(), spec);
        let _ = conv2d_bwd_weight(&dy, &x, w.shape(), spec);
    }
    let el = start.elapsed().as_secs_f64() / 50.0;
    println!("conv k4s2 bwd both: {:6.3} ms  {:6.2} GFLOP/s", el * 1e3, 2.0 * flops4 / el / 1e9);

    // depthwise 7x7 @ 64ch 32x32
    let x = mk(64 * 1024, 10).reshape([1, 64, 32, 32]);
    let w = mk(64 * 49, 11).reshape([64, 1, 7, 7]);
    let spec = ConvSpec { stride: 1, pad: 3, groups: 64 };
    let flops5 = 2.0 * 64.0 * 1024.0 * 49.0;
    let start = std::time::Instant::now();
    for _ in 0..100 {
        let _ = conv2d_fwd(&x, &w, None, spec);
    }
    let el = start.elapsed().as_secs_f64() / 100.0;
    println!("dw7x7 conv @64ch:   {:6.3} ms  {:6.2} GFLOP/s", el * 1e3, flops5 / el / 1e9);
}

fn ffat_bench() {
    use umbra_core::config::FfaVariant;
    use umbra_core::refiner::FfatBlock;
    use umbra_core::nn::ParamReg;
    let blk = FfatBlock::new("p.blk", 32, 1, FfaVariant::Matrix);
    let mut store = ParamStore::<f32>::new();
    blk.register(&mut ParamReg::new(&mut store, RunSeed(0)));
    let mut rng = rng_at(RunSeed(2), Stream::Check, &[1]);
    let x_t = Tensor::from_fn([1, 32, 64, 64], |_| rng.gen_range(-1.0..1.0f32));

    timeit("ffat block fwd @32ch 64x64", 10, || {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let x = tape.constant(x_t.clone());
        blk.forward(&mut Ctx::new(&mut tape, &vars), x, REMOVAL_DFT_MODE).unwrap();
    });
    timeit("ffat block fwd+bwd @32ch 64x64", 10, || {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |n| n.starts_with("p."));
        let x = tape.constant(x_t.clone());
        let mut ctx = Ctx::new(&mut tape, &vars);
        let y = blk.forward(&mut ctx, x, REMOVAL_DFT_MODE).unwrap();
        let l = tape.mean_all(y);
        tape.backward(l);
    });
    // attention core pieces
    use umbra_core::refiner::FfaAttention;
    let attn = FfaAttention::new("p.attn", 1, FfaVariant::Matrix);
    let mut store2 = ParamStore::<f32>::new();
    attn.register(&mut ParamReg::new(&mut store2, RunSeed(0)));
    timeit("ffa attention core fwd @32ch", 10, || {
        let mut tape = Tape::new();
        let vars = store2.bind(&mut tape, |_| false);
        let q = tape.constant(x_t.clone());
        let k = tape.constant(x_t.clone());
        let v = tape.constant(x_t.clone());
        attn.forward(&mut Ctx::new(&mut tape, &vars), q, k, v, REMOVAL_DFT_MODE).unwrap();
    });
    // raw dft cost
    timeit("dft_w 32x4096 fwd", 20, || {
        let _ = umbra_core::fft::dft_w_real(&x_t.reshape([1, 1, 32, 4096]), umbra_core::fft::DftMode::Fast);
    });
}

fn attn_pieces() {
    use umbra_core::fft::DftMode;
    let mut rng = rng_at(RunSeed(3), Stream::Check, &[2]);
    let q_t = Tensor::from_fn([1, 1, 32, 4096], |_| rng.gen_range(-1.0f32..1.0));

    timeit("  dft op (tape)", 20, || {
        let mut tape = Tape::<f32>::new();
        let q = tape.constant(q_t.clone());
        tape.dft_w(q, DftMode::Fast);
    });
    timeit("  slice_c x2 of packed", 20, || {
        let mut tape = Tape::<f32>::new();
        let p = tape.constant(q_t.reshape([1, 2, 16, 4096]).clone());
        tape.slice_c(p, 0, 1);
        tape.slice_c(p, 1, 1);
    });
    timeit("  matmul 32x4096 nt x4", 20, || {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(q_t.clone());
        let b = tape.constant(q_t.clone());
        for _ in 0..4 {
            tape.matmul(a, b, true);
        }
    });
    timeit("  standardize_chw 32x32", 20, || {
        let mut tape = Tape::<f32>::new();
        let small = tape.constant(Tensor::full([1, 1, 32, 32], 0.3f32));
        tape.standardize_chw(small, 1e-6);
    });
    timeit("  fa matmul 32x32 * 32x4096", 20, || {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::full([1, 1, 32, 32], 0.3f32));
        let v = tape.constant(q_t.clone());
        tape.matmul(a, v, false);
    });
    timeit("  gelu on 64x4096", 20, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 64, 64, 64], 0.3f32));
        tape.gelu(x);
    });
    timeit("  pw conv 32->32 @4096", 20, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 32, 64, 64], 0.3f32));
        let w = tape.constant(Tensor::full([32, 32, 1, 1], 0.01f32));
        tape.conv2d(x, w, None, umbra_core::kernels::ConvSpec::unit());
    });
    timeit("  dw3 conv @32ch 64x64", 20, || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full([1, 32, 64, 64], 0.3f32));
        let w = tape.constant(Tensor::full([32, 1, 3, 3], 0.1f32));
        tape.conv2d(x, w, None, umbra_core::kernels::ConvSpec { stride: 1, pad: 1, groups: 32 });
    });
}

fn main() {
    attn_pieces();
    ffat_bench();
    kernel_bench();
    let cfg = Config::default();
    let mut store = ParamStore::<f32>::new();
    let models = build_models(&cfg, RunSeed(0), &mut store).unwrap();
    let mut rng = rng_at(RunSeed(1), Stream::Check, &[0]);
    let x_t = Tensor::from_fn([1, 3, 64, 64], |_| rng.gen_range(0.0..1.0f32));
    let y_t = Tensor::from_fn([1, 3, 64, 64], |_| rng.gen_range(0.0..1.0f32));
    let ext = RandomConvExtractor::<f32>::new();
    let disc = Discriminator::new();

    timeit("removal forward", 5, || {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let x = tape.constant(x_t.clone());
        models.removal.forward(&mut Ctx::new(&mut tape, &vars), x).unwrap();
    });

    timeit("removal fwd+bwd", 5, || {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |n| n.starts_with("removal."));
        let x = tape.constant(x_t.clone());
        let mut ctx = Ctx::new(&mut tape, &vars);
        let pred = models.removal.forward(&mut ctx, x).unwrap();
        let y = tape.constant(y_t.clone());
        let d = tape.sub(pred, y);
        let a = tape.abs(d);
        let l = tape.mean_all(a);
        tape.backward(l);
    });

    timeit("refiner fwd+bwd", 5, || {
        let refiner = models.refiner.as_ref().unwrap();
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |n| n.starts_with("refiner."));
        let x = tape.constant(x_t.clone());
        let mut ctx = Ctx::new(&mut tape, &vars);
        let out = refiner.forward(&mut ctx, x, REMOVAL_DFT_MODE).unwrap();
        let y = tape.constant(y_t.clone());
        let d = tape.sub(out, y);
        let a = tape.abs(d);
        let l = tape.mean_all(a);
        tape.backward(l);
    });

    timeit("stage1 losses fwd (incl disc)", 5, || {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |n| n.starts_with("disc."));
        let p = tape.leaf(x_t.clone());
        let y = tape.constant(y_t.clone());
        let mut ctx = Ctx::new(&mut tape, &vars);
        total_loss(&mut ctx, p, y, &cfg.loss, Stage::One, &ext, Some(&disc)).unwrap();
    });

    timeit("stage1 losses fwd+both bwd", 5, || {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |n| n.starts_with("disc."));
        let p = tape.leaf(x_t.clone());
        let y = tape.constant(y_t.clone());
        let mut ctx = Ctx::new(&mut tape, &vars);
        let lv = total_loss(&mut ctx, p, y, &cfg.loss, Stage::One, &ext, Some(&disc)).unwrap();
        tape.backward(lv.total);
        tape.backward(lv.d_loss.unwrap());
    });

    timeit("stage2 losses fwd+bwd", 5, || {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |_| false);
        let p = tape.leaf(x_t.clone());
        let y = tape.constant(y_t.clone());
        let mut ctx = Ctx::new(&mut tape, &vars);
        let lv = total_loss(&mut ctx, p, y, &cfg.loss, Stage::Two, &ext, None).unwrap();
        tape.backward(lv.total);
    });
}
