//! Model bundle and the two training stages.
//!
//! Stage one trains the prior encoder together with the deblurring and
//! reblurring networks. Stage two freezes the encoder and trains the
//! diffusion model to regenerate its prior, jointly with the cycle networks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use log::info;

use crate::checkpoint::{Checkpoint, Metadata};
use crate::config::Config;
use crate::cycle::loss::{
    domain_discriminator_loss, gan_and_cycle, l1, scalar, stage1_total, wave_generator_loss, wave_loss,
};
use crate::cycle::{CycleImages, PatchDiscriminator, ReblurNet};
use crate::data::{synthetic_pairs, split_unpaired, PatchSampler, ScenePair, UnpairedSplit};
use crate::deblur::DeblurNet;
use crate::diffusion::{
    derive_seed, diffuse_with, sample_chain, ConditionExtractor, Denoiser, DiffusionSchedule, NoiseSource,
};
use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;
use crate::nn::{Adam, ParamStore};
use crate::tpe::{TexturePriorEncoder, PRIOR_DOWNSCALE};

/// Parameter groups, in checkpoint order.
pub const GROUPS: [&str; 5] = ["tpe", "deblur", "reblur", "disc", "diffusion"];

pub const TRAIN_DTYPE: DType = DType::F32;

/// Every network of the method with its parameter stores.
pub struct Models {
    pub config: Config,
    pub schedule: DiffusionSchedule,
    pub stores: BTreeMap<&'static str, ParamStore>,
    pub tpe: TexturePriorEncoder,
    pub deblur: DeblurNet,
    pub reblur: ReblurNet,
    pub d_sharp: PatchDiscriminator,
    pub d_blurry: PatchDiscriminator,
    pub d_wave: PatchDiscriminator,
    pub condition: ConditionExtractor,
    pub denoiser: Denoiser,
}

impl Models {
    pub fn new(config: &Config, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, TRAIN_DTYPE)
    }

    pub fn with_dtype(config: &Config, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = |i: u64| ParamStore::new(dtype, derive_seed(seed, &[0x9a7a, i]));
        let (mut tpe_s, mut deb_s, mut reb_s, mut disc_s, mut dif_s) = (store(0), store(1), store(2), store(3), store(4));
        let pc = config.deblur.prior_channels;
        let tpe = TexturePriorEncoder::new(&mut tpe_s.root(), pc, config.memory_size)?;
        let deblur = DeblurNet::new(&mut deb_s.root(), &config.deblur, config.ablation.injection())?;
        let reblur = ReblurNet::new(&mut reb_s.root(), config.reblur_channels)?;
        let dc = config.disc_channels;
        let d_sharp = PatchDiscriminator::new(&mut disc_s.root().pp("sharp"), 3, dc, false)?;
        let d_blurry = PatchDiscriminator::new(&mut disc_s.root().pp("blurry"), 3, dc, false)?;
        let d_wave = PatchDiscriminator::new(&mut disc_s.root().pp("wave"), 9, dc, true)?;
        let condition = ConditionExtractor::new(&mut dif_s.root().pp("condition"), pc)?;
        let denoiser = Denoiser::new(&mut dif_s.root().pp("denoiser"), pc, config.diffusion.steps, config.diffusion.blocks)?;
        let stores = BTreeMap::from([
            ("tpe", tpe_s),
            ("deblur", deb_s),
            ("reblur", reb_s),
            ("disc", disc_s),
            ("diffusion", dif_s),
        ]);
        Ok(Self {
            config: config.clone(),
            schedule: config.diffusion.schedule()?,
            stores,
            tpe,
            deblur,
            reblur,
            d_sharp,
            d_blurry,
            d_wave,
            condition,
            denoiser,
        })
    }

    pub fn store(&self, group: &str) -> &ParamStore {
        &self.stores[group]
    }

    /// `(group/name, var)` for the given groups.
    pub fn vars(&self, groups: &[&str]) -> Vec<(String, Var)> {
        groups
            .iter()
            .flat_map(|g| {
                self.stores[g]
                    .vars()
                    .iter()
                    .map(move |(n, v)| (format!("{g}/{n}"), v.clone()))
            })
            .collect()
    }

    /// Prior from the encoder, or from its plain blurry branch when the
    /// memory is ablated.
    fn encoder_prior(&self, s: &Tensor, b: &Tensor) -> Result<Tensor> {
        if self.config.ablation.tpe {
            self.tpe.forward(s, b)
        } else {
            self.tpe.plain(b)
        }
    }

    /// Restores `b` with a prior generated from noise; never touches the
    /// encoder or the reblurring network.
    pub fn restore(&self, b: &Tensor, seed: u64) -> Result<Tensor> {
        restore_with(&self.deblur, &self.condition, &self.denoiser, &self.schedule, self.config.ablation.diffusion, b, seed)
    }
}

/// Inference path shared by the full bundle and the inference-only loader.
pub fn restore_with(
    deblur: &DeblurNet,
    condition: &ConditionExtractor,
    denoiser: &Denoiser,
    schedule: &DiffusionSchedule,
    use_diffusion: bool,
    b: &Tensor,
    seed: u64,
) -> Result<Tensor> {
    if !use_diffusion {
        return deblur.forward(b, None);
    }
    let c = condition.forward(b)?;
    let z = crate::diffusion::generate_prior(&c, schedule, denoiser, seed)?;
    deblur.forward(b, Some(&z))
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLog {
    pub step: u64,
    /// Generator objective.
    pub total: f64,
    pub gan: f64,
    pub cyc: f64,
    pub wave: f64,
    /// Discriminator objective (minimized form).
    pub disc: f64,
    /// Prior reconstruction error (stage two).
    pub diff: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,total,gan,cyc,wave,disc,diff";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step, self.total, self.gan, self.cyc, self.wave, self.disc, self.diff
        )
    }
}

pub fn write_loss_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut text = String::from(StepLog::CSV_HEADER);
    text.push('\n');
    for row in log {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    crate::data::io::write_atomic(path, text.as_bytes())
}

/// Synthetic corpus for `config`: an unpaired split plus held-out pairs.
pub fn prepare_data(config: &Config, seed: u64) -> Result<(UnpairedSplit, Vec<ScenePair>)> {
    let mut pairs = synthetic_pairs(config.data.count, config.data.size, &config.data.blur_spec(), seed)?;
    let holdout = pairs.split_off(pairs.len() - config.data.holdout);
    let split = split_unpaired(&pairs, (config.data.ratio, 1.0 - config.data.ratio), seed)?;
    Ok((split, holdout))
}

/// Live training state: models, optimizers and counters.
pub struct TrainState {
    pub models: Models,
    pub gen_opt: Adam,
    pub disc_opt: Adam,
    pub stage: u32,
    pub step: u64,
    pub seed: u64,
    pub log: Vec<StepLog>,
    frozen_tpe: Option<String>,
}

fn generator_groups(config: &Config, stage: u32) -> Vec<&'static str> {
    match stage {
        1 => vec!["tpe", "deblur", "reblur"],
        _ if config.ablation.joint_train => vec!["deblur", "reblur", "diffusion"],
        _ => vec!["diffusion"],
    }
}

impl TrainState {
    /// Fresh stage-one state.
    pub fn stage1(config: &Config, seed: u64) -> Result<Self> {
        let models = Models::new(config, seed)?;
        Self::assemble(models, 1, seed)
    }

    fn assemble(models: Models, stage: u32, seed: u64) -> Result<Self> {
        let cfg = models.config.optim;
        let gen_opt = Adam::new(models.vars(&generator_groups(&models.config, stage)), cfg)?;
        let disc_opt = Adam::new(models.vars(&["disc"]), cfg)?;
        let frozen_tpe = if stage == 2 { Some(models.store("tpe").digest()?) } else { None };
        Ok(Self {
            models,
            gen_opt,
            disc_opt,
            stage,
            step: 0,
            seed,
            log: Vec::new(),
            frozen_tpe,
        })
    }

    /// Stage-two state initialized from a stage-one checkpoint. The encoder
    /// is frozen; discriminators keep their optimizer moments.
    pub fn stage2_from(ck: &Checkpoint, config: &Config, seed: u64) -> Result<Self> {
        if !config.ablation.diffusion {
            return Err(Error::Config("stage two needs the diffusion model (ablation.diffusion = true)".into()));
        }
        let models = Models::new(config, ck.meta.seed)?;
        for g in ["tpe", "deblur", "reblur", "disc"] {
            ck.load_store(g, models.store(g))?;
        }
        let mut st = Self::assemble(models, 2, seed)?;
        if ck.has_group("optim.disc") {
            let steps = ck.meta.optimizer_steps.get("disc").copied().unwrap_or(0);
            st.disc_opt.load_state(steps, &ck.group("optim.disc")?)?;
        }
        Ok(st)
    }

    /// Restores a state saved by [`TrainState::checkpoint`] to continue the same stage.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let config = Config::parse(&ck.meta.config)?;
        let models = Models::new(&config, ck.meta.seed)?;
        for g in GROUPS {
            ck.load_store(g, models.store(g))?;
        }
        let mut st = Self::assemble(models, ck.meta.stage, ck.meta.seed)?;
        if ck.meta.stage == 2 {
            if let Some(d) = ck.meta.digests.get("tpe") {
                st.frozen_tpe = Some(d.clone());
            }
        }
        let steps = |k: &str| ck.meta.optimizer_steps.get(k).copied().unwrap_or(0);
        st.gen_opt.load_state(steps("gen"), &ck.group("optim.gen")?)?;
        st.disc_opt.load_state(steps("disc"), &ck.group("optim.disc")?)?;
        st.step = ck.meta.step;
        Ok(st)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let m = &self.models;
        let mut ck = Checkpoint::new(Metadata {
            stage: self.stage,
            step: self.step,
            seed: self.seed,
            config: m.config.to_text(),
            schedule: Some(m.schedule.clone()),
            frozen: if self.stage == 2 { vec!["tpe".into()] } else { vec![] },
            digests: BTreeMap::new(),
            optimizer_steps: BTreeMap::from([
                ("gen".to_string(), self.gen_opt.steps_taken()),
                ("disc".to_string(), self.disc_opt.steps_taken()),
            ]),
        });
        for g in GROUPS {
            ck.add_store(g, m.store(g))?;
        }
        ck.add_tensors("optim.gen", self.gen_opt.state());
        ck.add_tensors("optim.disc", self.disc_opt.state());
        Ok(ck)
    }

    /// Fails if the frozen encoder changed since stage two began.
    pub fn check_frozen(&self) -> Result<()> {
        if let Some(expected) = &self.frozen_tpe {
            if &self.models.store("tpe").digest()? != expected {
                return Err(Error::FrozenChanged("tpe".into()));
            }
        }
        Ok(())
    }

    fn to_batch(&self, maps: &[FeatureMap]) -> Result<Tensor> {
        FeatureMap::stack(maps, TRAIN_DTYPE, &Device::Cpu)
    }

    /// One optimization step on a `(blurry, sharp)` batch.
    pub fn train_step(&mut self, blurry: &[FeatureMap], sharp: &[FeatureMap]) -> Result<StepLog> {
        let b = self.to_batch(blurry)?;
        let s = self.to_batch(sharp)?;
        self.step += 1;
        let step = self.step;
        let res = if self.stage == 1 { self.stage1_step(&s, &b) } else { self.stage2_step(&s, &b) };
        let mut log = res.map_err(|e| match e {
            Error::NonFinite { stage } => Error::NonFinite {
                stage: format!("{stage} at training step {step}"),
            },
            other => other,
        })?;
        log.step = step;
        self.log.push(log);
        Ok(log)
    }

    fn discriminator_update(&mut self, x: &CycleImages) -> Result<f64> {
        let m = &self.models;
        let mut loss = domain_discriminator_loss(&m.d_sharp, &m.d_blurry, x)?;
        if m.config.ablation.wave_loss {
            loss = (loss - wave_loss(&m.d_wave, &x.s, &x.s_b.detach())?)?;
        }
        let v = scalar(&loss, "discriminator loss")?;
        self.disc_opt.step(&loss.backward()?)?;
        Ok(v)
    }

    /// Generator-side terms `(gan, cyc, wave)` as tensors.
    fn generator_terms(&self, x: &CycleImages) -> Result<(Tensor, Tensor, Tensor)> {
        let m = &self.models;
        let (gan, cyc) = gan_and_cycle(&m.d_sharp, &m.d_blurry, x)?;
        let wave = if m.config.ablation.wave_loss {
            wave_generator_loss(&m.d_wave, &x.s_b)?
        } else {
            gan.zeros_like()?
        };
        Ok((gan, cyc, wave))
    }

    fn stage1_step(&mut self, s: &Tensor, b: &Tensor) -> Result<StepLog> {
        let m = &self.models;
        let z = m.encoder_prior(s, b)?;
        let s_b = m.deblur.forward(b, Some(&z))?;
        let b_s = m.reblur.forward(s)?;
        let z2 = m.encoder_prior(&s_b, &b_s)?;
        let s_hat = m.deblur.forward(&b_s, Some(&z2))?;
        let b_hat = m.reblur.forward(&s_b)?;
        let x = CycleImages {
            s: s.clone(),
            b: b.clone(),
            s_b,
            b_s,
            s_hat,
            b_hat,
        };
        let disc = self.discriminator_update(&x)?;
        let (gan, cyc, wave) = self.generator_terms(&x)?;
        let total = stage1_total(&gan, &cyc, &wave, &self.models.config.loss)?;
        let log = StepLog {
            total: scalar(&total, "stage-one objective")?,
            gan: scalar(&gan, "adversarial loss")?,
            cyc: scalar(&cyc, "cycle loss")?,
            wave: scalar(&wave, "wavelet loss")?,
            disc,
            ..Default::default()
        };
        self.gen_opt.step(&total.backward()?)?;
        Ok(log)
    }

    /// Diffuses the encoder prior `z` and regenerates it conditioned on `cond_src`.
    fn regenerate(&self, z: &Tensor, cond_src: &Tensor, half: u64) -> Result<Tensor> {
        let m = &self.models;
        let mut noise = NoiseSource::new(derive_seed(self.seed, &[2, self.step, half]));
        let eps = noise.sample(z.dims(), z.dtype(), z.device())?;
        let z_t = diffuse_with(z, &m.schedule, m.schedule.steps(), &eps)?;
        let c = m.condition.forward(cond_src)?;
        sample_chain(&z_t, &c, &m.schedule, &m.denoiser, &mut noise)
    }

    fn stage2_step(&mut self, s: &Tensor, b: &Tensor) -> Result<StepLog> {
        let m = &self.models;
        let joint = m.config.ablation.joint_train;
        let z = m.encoder_prior(s, b)?.detach();
        let z_hat = self.regenerate(&z, b, 0)?;
        let s_b = m.deblur.forward(b, Some(&z_hat))?;
        let b_s = m.reblur.forward(s)?;
        let z2 = m.encoder_prior(&s_b, &b_s)?.detach();
        let z2_hat = self.regenerate(&z2, &b_s, 1)?;
        let diff = ((l1(&z, &z_hat)? + l1(&z2, &z2_hat)?)? * 0.5)?;
        let diff_v = scalar(&diff, "diffusion loss")?;
        if !joint {
            let total = (&diff * m.config.loss.diff)?;
            let log = StepLog {
                total: scalar(&total, "stage-two objective")?,
                diff: diff_v,
                ..Default::default()
            };
            self.gen_opt.step(&total.backward()?)?;
            return Ok(log);
        }
        let s_hat = m.deblur.forward(&b_s, Some(&z2_hat))?;
        let b_hat = m.reblur.forward(&s_b)?;
        let x = CycleImages {
            s: s.clone(),
            b: b.clone(),
            s_b,
            b_s,
            s_hat,
            b_hat,
        };
        let disc = self.discriminator_update(&x)?;
        let (gan, cyc, wave) = self.generator_terms(&x)?;
        let w = self.models.config.loss;
        let total = (stage1_total(&gan, &cyc, &wave, &w)? + (&diff * w.diff)?)?;
        let log = StepLog {
            total: scalar(&total, "stage-two objective")?,
            gan: scalar(&gan, "adversarial loss")?,
            cyc: scalar(&cyc, "cycle loss")?,
            wave: scalar(&wave, "wavelet loss")?,
            disc,
            diff: diff_v,
            step: 0,
        };
        self.gen_opt.step(&total.backward()?)?;
        Ok(log)
    }

    /// Runs `steps` steps drawing batches from `split`. Checkpoints and the
    /// loss CSV go to `out` when given.
    pub fn run(&mut self, split: &UnpairedSplit, steps: usize, out: Option<&Path>) -> Result<()> {
        let t = &self.models.config.train;
        let sampler = PatchSampler::new(split, t.patch, t.batch, t.flips, derive_seed(self.seed, &[1, self.stage as u64]))?;
        let every = t.checkpoint_every as u64;
        let start = self.step;
        for batch in sampler.prefetch(start, 2).take(steps) {
            let (blurry, sharp) = batch?;
            let log = self.train_step(&blurry, &sharp)?;
            if log.step == start + 1 || log.step % 25 == 0 {
                info!(
                    "stage {} step {}: total {:.4} gan {:.4} cyc {:.4} wave {:.4} disc {:.4} diff {:.4}",
                    self.stage, log.step, log.total, log.gan, log.cyc, log.wave, log.disc, log.diff
                );
            }
            if let Some(dir) = out {
                if log.step % every == 0 {
                    self.save(dir, Some(log.step))?;
                }
            }
        }
        self.check_frozen()?;
        if let Some(dir) = out {
            self.save(dir, None)?;
        }
        Ok(())
    }

    /// Writes `stage{n}.ckpt` (or `stage{n}_step{k}.ckpt`) and `stage{n}_losses.csv`.
    pub fn save(&self, dir: &Path, step: Option<u64>) -> Result<PathBuf> {
        self.check_frozen()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = match step {
            Some(k) => format!("stage{}_step{k}.ckpt", self.stage),
            None => format!("stage{}.ckpt", self.stage),
        };
        let path = dir.join(name);
        self.checkpoint()?.save(&path)?;
        write_loss_csv(&dir.join(format!("stage{}_losses.csv", self.stage)), &self.log)?;
        Ok(path)
    }
}

/// Stage one from scratch.
pub fn train_stage1(config: &Config, split: &UnpairedSplit, seed: u64, out: Option<&Path>) -> Result<TrainState> {
    let mut st = TrainState::stage1(config, seed)?;
    st.run(split, config.train.stage1_steps, out)?;
    Ok(st)
}

/// Stage two from a stage-one checkpoint.
pub fn train_stage2(
    config: &Config,
    split: &UnpairedSplit,
    stage1: &Checkpoint,
    seed: u64,
    out: Option<&Path>,
) -> Result<TrainState> {
    let mut st = TrainState::stage2_from(stage1, config, seed)?;
    st.run(split, config.train.stage2_steps, out)?;
    Ok(st)
}

/// Networks needed at inference only: deblurring, condition and denoiser.
pub struct InferenceModel {
    pub config: Config,
    pub schedule: DiffusionSchedule,
    pub deblur: DeblurNet,
    pub condition: ConditionExtractor,
    pub denoiser: Denoiser,
    _stores: (ParamStore, ParamStore),
}

impl InferenceModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = Config::parse(&ck.meta.config)?;
        let pc = config.deblur.prior_channels;
        let mut deb_s = ParamStore::new(TRAIN_DTYPE, 0);
        let mut dif_s = ParamStore::new(TRAIN_DTYPE, 0);
        let deblur = DeblurNet::new(&mut deb_s.root(), &config.deblur, config.ablation.injection())?;
        let condition = ConditionExtractor::new(&mut dif_s.root().pp("condition"), pc)?;
        let denoiser = Denoiser::new(&mut dif_s.root().pp("denoiser"), pc, config.diffusion.steps, config.diffusion.blocks)?;
        ck.load_store("deblur", &deb_s)?;
        if config.ablation.diffusion {
            ck.load_store("diffusion", &dif_s)?;
        }
        let schedule = match &ck.meta.schedule {
            Some(s) => s.clone(),
            None => config.diffusion.schedule()?,
        };
        Ok(Self {
            config,
            schedule,
            deblur,
            condition,
            denoiser,
            _stores: (deb_s, dif_s),
        })
    }

    pub fn restore(&self, b: &Tensor, seed: u64) -> Result<Tensor> {
        restore_with(&self.deblur, &self.condition, &self.denoiser, &self.schedule, self.config.ablation.diffusion, b, seed)
    }

    /// Restores one image; sides are padded by reflection up to the network's
    /// granularity and cropped back.
    pub fn restore_image(&self, b: &FeatureMap, seed: u64) -> Result<FeatureMap> {
        let g = 8.max(PRIOR_DOWNSCALE);
        let (h, w, _) = b.shape();
        let (ph, pw) = (h.div_ceil(g) * g, w.div_ceil(g) * g);
        let padded = if (ph, pw) == (h, w) { b.clone() } else { reflect_pad(b, ph, pw) };
        let out = self.restore(&padded.to_tensor(TRAIN_DTYPE, &Device::Cpu)?, seed)?;
        FeatureMap::from_tensor(&out)?.crop(0, 0, h, w)
    }
}

fn reflect_pad(m: &FeatureMap, ph: usize, pw: usize) -> FeatureMap {
    let (h, w, c) = m.shape();
    let refl = |i: usize, n: usize| if i < n { i } else { (2 * n - 2 - i).min(n - 1) };
    FeatureMap::from_fn(ph, pw, c, |y, x, ch| m.get(refl(y, h), refl(x, w), ch))
}
