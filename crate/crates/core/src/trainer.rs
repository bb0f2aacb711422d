//! The two-stage optimization recipe.
//!
//! Stage I trains the Shadow Removal module (and its discriminator,
//! alternating one D step per generator step) under the full composite loss,
//! cosine-decaying the learning rate between the published endpoints.
//! Stage II attaches the refiner, drops the adversarial term, and runs at a
//! constant learning rate - jointly updating the removal module by default,
//! or keeping it frozen via `stage2_joint = false`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::archive::{read_archive, write_archive};
use crate::config::{Config, ModelConfig};
use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::losses::{
    read_breakdown, total_loss, Discriminator, RandomConvExtractor, Stage, DISC_PREFIX,
};
use crate::nn::{Ctx, ParamReg, ParamStore};
use crate::refiner::{Refiner, REFINER_PREFIX};
use crate::removal::{RemovalNet, REMOVAL_PREFIX, REMOVAL_DFT_MODE};
use crate::rng::RunSeed;
use crate::tape::{Grads, Tape, Var};
use crate::tensor::Tensor;

/// Learning rate at a step. Stage 1 follows a cosine from lr1_start to
/// lr1_end; stage 2 is constant. Endpoints are returned exactly.
pub fn lr_at(step: usize, schedule: &crate::config::StageSchedule, stage: Stage) -> Result<f64> {
    let total = match stage {
        Stage::One => schedule.stage1_steps,
        Stage::Two => schedule.stage2_steps,
    };
    if step > total {
        return Err(Error::config(format!(
            "lr_at: step {step} out of range 0..={total} for stage {}",
            stage.as_u8()
        )));
    }
    match stage {
        Stage::Two => Ok(schedule.lr2),
        Stage::One => {
            if step == 0 {
                Ok(schedule.lr1_start)
            } else if step == total {
                Ok(schedule.lr1_end)
            } else {
                let t = step as f64 / total as f64;
                Ok(schedule.lr1_end
                    + 0.5 * (schedule.lr1_start - schedule.lr1_end)
                        * (1.0 + (std::f64::consts::PI * t).cos()))
            }
        }
    }
}

const ADAM_EPS: f64 = 1e-8;

/// Adam moments for one optimizer instance.
#[derive(Clone, Default)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    /// One Adam update over the parameters selected by `filter`, with
    /// optional global-norm gradient clipping. Uses bias correction at
    /// timestep `self.t + 1`; the caller advances `t` once per step.
    pub fn apply(
        &mut self,
        store: &mut ParamStore<f32>,
        vars: &HashMap<String, Var>,
        grads: &Grads<f32>,
        filter: impl Fn(&str) -> bool,
        lr: f64,
        schedule: &crate::config::StageSchedule,
    ) {
        let mut updates: Vec<(&String, &Tensor<f32>)> = Vec::new();
        let mut names: Vec<&String> = vars.keys().filter(|n| filter(n)).collect();
        names.sort();
        for name in names {
            if let Some(g) = grads.get(vars[name]) {
                updates.push((name, g));
            }
        }
        let mut scale = 1.0f64;
        if schedule.clip_norm > 0.0 {
            let sq: f64 = updates.iter().map(|(_, g)| g.sq_norm() as f64).sum();
            let norm = sq.sqrt();
            if norm > schedule.clip_norm {
                scale = schedule.clip_norm / norm;
            }
        }
        let t = (self.t + 1) as i32;
        let b1 = schedule.adam_beta1;
        let b2 = schedule.adam_beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, g) in updates {
            let g = if scale != 1.0 { g.scale(scale as f32) } else { g.clone() };
            let shape = g.shape();
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(shape));
            let new_m = m.zip(&g, |mv, gv| (b1 as f32) * mv + (1.0 - b1 as f32) * gv);
            let new_v = v.zip(&g, |vv, gv| (b2 as f32) * vv + (1.0 - b2 as f32) * gv * gv);
            let p = store.get(name);
            let updated = Tensor::from_fn(shape, |i| {
                let mh = new_m.as_slice()[i] as f64 / bc1;
                let vh = new_v.as_slice()[i] as f64 / bc2;
                (p.as_slice()[i] as f64 - lr * mh / (vh.sqrt() + ADAM_EPS)) as f32
            });
            *m = new_m;
            *v = new_v;
            store.set(name, updated);
        }
    }
}

/// Full trainable state: parameters, moments, position in the recipe.
#[derive(Clone)]
pub struct Checkpoint {
    pub config: Config,
    pub seed: u64,
    pub stage: u8,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub opt: AdamState,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut meta = BTreeMap::new();
    meta.insert("kind".to_string(), "checkpoint".to_string());
    meta.insert("config".to_string(), ckpt.config.to_canonical_string());
    meta.insert("seed".to_string(), ckpt.seed.to_string());
    meta.insert("stage".to_string(), ckpt.stage.to_string());
    meta.insert("step".to_string(), ckpt.step.to_string());
    meta.insert("adam_t".to_string(), ckpt.opt.t.to_string());
    let mut tensors = BTreeMap::new();
    for (name, t) in ckpt.params.iter() {
        tensors.insert(format!("param.{name}"), t.clone());
    }
    for (name, t) in &ckpt.opt.m {
        tensors.insert(format!("adam_m.{name}"), t.clone());
    }
    for (name, t) in &ckpt.opt.v {
        tensors.insert(format!("adam_v.{name}"), t.clone());
    }
    write_archive(path, &meta, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (meta, tensors) = read_archive(path)?;
    let need = |key: &str| -> Result<&String> {
        meta.get(key)
            .ok_or_else(|| Error::io(format!("{}: missing '{key}' in checkpoint", path.display())))
    };
    let config = Config::parse(need("config")?)?;
    let seed: u64 = need("seed")?
        .parse()
        .map_err(|_| Error::io("checkpoint: bad seed".to_string()))?;
    let stage: u8 = need("stage")?
        .parse()
        .map_err(|_| Error::io("checkpoint: bad stage".to_string()))?;
    let step: u64 = need("step")?
        .parse()
        .map_err(|_| Error::io("checkpoint: bad step".to_string()))?;
    let adam_t: u64 = need("adam_t")?
        .parse()
        .map_err(|_| Error::io("checkpoint: bad adam_t".to_string()))?;
    let mut params = ParamStore::new();
    let mut opt = AdamState { t: adam_t, ..AdamState::default() };
    for (name, t) in tensors {
        if let Some(p) = name.strip_prefix("param.") {
            params.set(p, t);
        } else if let Some(p) = name.strip_prefix("adam_m.") {
            opt.m.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix("adam_v.") {
            opt.v.insert(p.to_string(), t);
        } else {
            return Err(Error::io(format!("checkpoint: unexpected tensor '{name}'")));
        }
    }
    Ok(Checkpoint { config, seed, stage, step, params, opt })
}

/// Architectures must match exactly for a checkpoint to be usable.
pub fn validate_compat(ckpt: &ModelConfig, runtime: &ModelConfig) -> Result<()> {
    macro_rules! check {
        ($field:ident) => {
            if ckpt.$field != runtime.$field {
                return Err(Error::config(format!(
                    "checkpoint config mismatch on '{}': checkpoint has {:?}, runtime has {:?}",
                    stringify!($field),
                    ckpt.$field,
                    runtime.$field
                )));
            }
        };
    }
    check!(base_channels);
    check!(blocks_per_level);
    check!(refiner_levels);
    check!(refiner_channels);
    check!(enable_unet_branch);
    check!(enable_dwtffc_branch);
    check!(enable_refiner);
    check!(ffa_heads);
    check!(ffa_variant);
    Ok(())
}

/// One CSV row of training telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub stage: u8,
    pub l1: f64,
    pub ssim_term: f64,
    pub percep: f64,
    pub adv: f64,
    pub total: f64,
    pub lr: f64,
}

pub const LOSSES_CSV_HEADER: &str = "step,stage,l1,ssim_term,percep,adv,total,lr";

pub fn losses_csv(records: &[StepRecord]) -> String {
    let mut out = String::from(LOSSES_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.step, r.stage, r.l1, r.ssim_term, r.percep, r.adv, r.total, r.lr
        ));
    }
    out
}

/// Networks plus their shared parameter store.
pub struct Models {
    pub removal: RemovalNet,
    pub refiner: Option<Refiner>,
    pub disc: Discriminator,
}

/// Build the networks for a config and make sure every parameter exists in
/// the store (drawn from the seed if missing).
pub fn build_models(cfg: &Config, seed: RunSeed, store: &mut ParamStore<f32>) -> Result<Models> {
    let removal = RemovalNet::new(&cfg.model)?;
    let refiner = cfg.model.enable_refiner.then(|| Refiner::new(&cfg.model));
    let disc = Discriminator::new();
    let mut reg = ParamReg::new(store, seed);
    removal.register(&mut reg);
    if let Some(r) = &refiner {
        r.register(&mut reg);
    }
    disc.register(&mut reg);
    Ok(Models { removal, refiner, disc })
}

pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub records: Vec<StepRecord>,
}

fn training_crop(ds: &PairedDataset, cfg: &Config) -> Result<(usize, bool)> {
    let (eff, clamped) = ds.effective_crop(cfg.augment.crop_size);
    let eff16 = eff & !15;
    if eff16 < 16 {
        return Err(Error::data(format!(
            "images too small to train on: usable crop {eff} < 16"
        )));
    }
    Ok((eff16, clamped || eff16 != cfg.augment.crop_size))
}

fn check_finite(bd: &crate::losses::LossBreakdown, stage: u8, step: u64) -> Result<()> {
    if !bd.total.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite loss at stage {stage} step {step}: {bd:?}"
        )));
    }
    Ok(())
}

/// Stage I: optimize the removal module and discriminator under the full
/// loss. The refiner is registered but never touched.
pub fn train_stage1(
    ds: &PairedDataset,
    cfg: &Config,
    seed: RunSeed,
    resume: Option<Checkpoint>,
    stop_step: Option<u64>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::data("stage 1: dataset is empty"));
    }
    let mut store;
    let mut opt;
    let start_step;
    match resume {
        Some(ckpt) => {
            validate_compat(&ckpt.config.model, &cfg.model)?;
            if ckpt.stage != 1 {
                return Err(Error::config(format!(
                    "stage 1 resume needs a stage-1 checkpoint, got stage {}",
                    ckpt.stage
                )));
            }
            start_step = ckpt.step;
            store = ckpt.params;
            opt = ckpt.opt;
        }
        None => {
            store = ParamStore::new();
            opt = AdamState::new();
            start_step = 0;
        }
    }
    let models = build_models(cfg, seed, &mut store)?;
    let (crop, clamped) = training_crop(ds, cfg)?;
    if clamped {
        eprintln!(
            "note: crop_size {} clamped to {crop} to fit the dataset",
            cfg.augment.crop_size
        );
    }
    let ext = RandomConvExtractor::<f32>::new();
    let sched = &cfg.schedule;
    let end_step = stop_step.unwrap_or(sched.stage1_steps as u64).min(sched.stage1_steps as u64);
    let mut records = Vec::new();

    for step in start_step..end_step {
        let lr = lr_at(step as usize, sched, Stage::One)?;
        let (shadow, clean) =
            ds.train_batch(seed, 1, step, sched.batch_size, &cfg.augment, crop)?;
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |n| {
            n.starts_with(REMOVAL_PREFIX) || n.starts_with(DISC_PREFIX)
        });
        let x = tape.constant(shadow);
        let y = tape.constant(clean);
        let mut ctx = Ctx::new(&mut tape, &vars);
        let pred = models.removal.forward(&mut ctx, x)?;
        let lv = total_loss(&mut ctx, pred, y, &cfg.loss, Stage::One, &ext, Some(&models.disc))?;
        let bd = read_breakdown(&tape, &lv);
        check_finite(&bd, 1, step)?;

        let gen_grads = tape.backward(lv.total);
        opt.apply(&mut store, &vars, &gen_grads, |n| n.starts_with(REMOVAL_PREFIX), lr, sched);
        let d_loss = lv.d_loss.expect("stage 1 always has a discriminator loss");
        let disc_grads = tape.backward(d_loss);
        opt.apply(&mut store, &vars, &disc_grads, |n| n.starts_with(DISC_PREFIX), lr, sched);
        opt.t += 1;

        records.push(StepRecord {
            step,
            stage: 1,
            l1: bd.l1,
            ssim_term: bd.ssim_term,
            percep: bd.percep,
            adv: bd.adv,
            total: bd.total,
            lr,
        });
    }

    Ok(TrainResult {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            seed: seed.0,
            stage: 1,
            step: end_step,
            params: store,
            opt,
        },
        records,
    })
}

/// Stage II: refine. The pipeline is refiner(removal(x)); the adversarial
/// term is dropped and the discriminator frozen. A stage-1 checkpoint starts
/// the stage fresh (new Adam moments); a stage-2 checkpoint resumes.
pub fn train_stage2(
    start: Checkpoint,
    ds: &PairedDataset,
    cfg: &Config,
    seed: RunSeed,
    stop_step: Option<u64>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::data("stage 2: dataset is empty"));
    }
    if !cfg.model.enable_refiner {
        return Err(Error::config("stage 2 requires enable_refiner = true"));
    }
    validate_compat(&start.config.model, &cfg.model)?;
    let (mut store, mut opt, start_step) = match start.stage {
        1 => (start.params, AdamState::new(), 0u64),
        2 => (start.params, start.opt, start.step),
        s => return Err(Error::config(format!("cannot start stage 2 from stage {s}"))),
    };
    let models = build_models(cfg, seed, &mut store)?;
    let refiner = models.refiner.as_ref().expect("refiner enabled");
    let (crop, _) = training_crop(ds, cfg)?;
    let ext = RandomConvExtractor::<f32>::new();
    let sched = &cfg.schedule;
    let end_step = stop_step.unwrap_or(sched.stage2_steps as u64).min(sched.stage2_steps as u64);
    let joint = sched.stage2_joint;
    let mut records = Vec::new();

    for step in start_step..end_step {
        let lr = lr_at(step as usize, sched, Stage::Two)?;
        let (shadow, clean) =
            ds.train_batch(seed, 2, step, sched.batch_size, &cfg.augment, crop)?;
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, |n| {
            n.starts_with(REFINER_PREFIX) || (joint && n.starts_with(REMOVAL_PREFIX))
        });
        let x = tape.constant(shadow);
        let y = tape.constant(clean);
        let mut ctx = Ctx::new(&mut tape, &vars);
        let coarse = models.removal.forward(&mut ctx, x)?;
        let refined = refiner.forward(&mut ctx, coarse, REMOVAL_DFT_MODE)?;
        let lv = total_loss(&mut ctx, refined, y, &cfg.loss, Stage::Two, &ext, None)?;
        let bd = read_breakdown(&tape, &lv);
        check_finite(&bd, 2, step)?;

        let grads = tape.backward(lv.total);
        opt.apply(
            &mut store,
            &vars,
            &grads,
            |n| n.starts_with(REFINER_PREFIX) || (joint && n.starts_with(REMOVAL_PREFIX)),
            lr,
            sched,
        );
        opt.t += 1;

        records.push(StepRecord {
            step,
            stage: 2,
            l1: bd.l1,
            ssim_term: bd.ssim_term,
            percep: bd.percep,
            adv: 0.0,
            total: bd.total,
            lr,
        });
    }

    Ok(TrainResult {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            seed: seed.0,
            stage: 2,
            step: end_step,
            params: store,
            opt,
        },
        records,
    })
}
