//! Checkpoint-backed inference: reflect-pad to the required multiple, run
//! removal (and the refiner when enabled), crop back.

use crate::config::Config;
use crate::error::Result;
use crate::kernels::{crop_to, pad_reflect_fwd};
use crate::metrics::Restorer;
use crate::nn::{Ctx, ParamStore};
use crate::refiner::Refiner;
use crate::removal::{RemovalNet, REMOVAL_DFT_MODE};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trainer::{build_models, Checkpoint};
use crate::rng::RunSeed;

/// A frozen model snapshot ready for batch inference.
pub struct Pipeline {
    pub config: Config,
    store: ParamStore<f32>,
    removal: RemovalNet,
    refiner: Option<Refiner>,
}

impl Pipeline {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut store = ckpt.params.clone();
        let models = build_models(&ckpt.config, RunSeed(ckpt.seed), &mut store)?;
        Ok(Pipeline {
            config: ckpt.config.clone(),
            store,
            removal: models.removal,
            refiner: models.refiner,
        })
    }

    /// Spatial multiple the padded input must satisfy.
    fn size_multiple(&self) -> usize {
        let refiner_div = 1usize << (self.config.model.refiner_levels.saturating_sub(1));
        16usize.max(refiner_div)
    }

    /// Run the full pipeline on one (1, 3, H, W) image of any size.
    pub fn restore_image(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [_, _, h, w] = img.shape();
        let mult = self.size_multiple();
        let ph = h.next_multiple_of(mult) - h;
        let pw = w.next_multiple_of(mult) - w;
        let padded = if ph == 0 && pw == 0 {
            img.clone()
        } else {
            if ph >= h || pw >= w {
                return Err(crate::error::Error::data(format!(
                    "image {h}x{w} too small to pad to a multiple of {mult}"
                )));
            }
            pad_reflect_fwd(img, [0, ph, 0, pw])
        };
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, |_| false);
        let x = tape.constant(padded);
        let mut ctx = Ctx::new(&mut tape, &vars);
        let mut out = self.removal.forward(&mut ctx, x)?;
        if let Some(refiner) = &self.refiner {
            out = refiner.forward(&mut ctx, out, REMOVAL_DFT_MODE)?;
        }
        Ok(crop_to(tape.value(out), h, w))
    }
}

impl Restorer for Pipeline {
    fn restore(&self, shadow: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.restore_image(shadow)
    }

    fn describe(&self) -> String {
        format!(
            "pipeline(refiner {})",
            if self.refiner.is_some() { "on" } else { "off" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::rng::{rng_at, Stream};
    use crate::trainer::AdamState;
    use rand::Rng;

    fn tiny_checkpoint(enable_refiner: bool) -> Checkpoint {
        let mut cfg = Config::default();
        cfg.model.base_channels = 8;
        cfg.model.blocks_per_level = [1, 1, 1];
        cfg.model.refiner_levels = 2;
        cfg.model.refiner_channels = 8;
        cfg.model.enable_refiner = enable_refiner;
        let mut store = ParamStore::new();
        build_models(&cfg, RunSeed(0), &mut store).unwrap();
        Checkpoint { config: cfg, seed: 0, stage: 1, step: 0, params: store, opt: AdamState::new() }
    }

    #[test]
    fn restores_arbitrary_sizes_transparently() {
        let pipe = Pipeline::from_checkpoint(&tiny_checkpoint(true)).unwrap();
        let mut rng = rng_at(RunSeed(50), Stream::Check, &[0]);
        for (h, w) in [(100, 100), (64, 64), (48, 33)] {
            let img = Tensor::from_fn([1, 3, h, w], |_| rng.gen_range(0.0..1.0f32));
            let out = pipe.restore_image(&img).unwrap();
            assert_eq!(out.shape(), [1, 3, h, w]);
            assert!(out.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn identity_refiner_matches_removal_only() {
        // Fresh refiner projections are zero, so the refined pipeline must
        // equal the removal-only pipeline on the same checkpoint.
        let with = Pipeline::from_checkpoint(&tiny_checkpoint(true)).unwrap();
        let mut without_ckpt = tiny_checkpoint(true);
        without_ckpt.config.model.enable_refiner = false;
        let without = Pipeline::from_checkpoint(&without_ckpt).unwrap();
        let mut rng = rng_at(RunSeed(51), Stream::Check, &[0]);
        let img = Tensor::from_fn([1, 3, 32, 32], |_| rng.gen_range(0.0..1.0f32));
        let a = with.restore_image(&img).unwrap();
        let b = without.restore_image(&img).unwrap();
        assert_eq!(a.sub(&b).max_abs(), 0.0);
    }
}
