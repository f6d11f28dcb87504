use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::data::{make_batch, CropPolicy, ImageRecord};
use crate::degradation::DegradationSpec;
use crate::error::{Error, Result};
use crate::model::{save_generator, Checkpoint, Discriminator, Generator, SpectralState};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

use super::adam::{adam_step, clip_gradients, AdamState};
use super::config::{lr_schedule, Stage, TrainConfig};
use super::loss::{discriminator_loss, total_loss, FeatureExtractor, LossComponents};
use super::validation::{validate, ValidationResult, ValidationSet};

pub const CHECKPOINT_FILE: &str = "checkpoint.nlcu";
pub const LOG_FILE: &str = "train_log.csv";
const LOG_HEADER: &str = "iteration,lr,loss,l1,perc,adv,disc_loss,val_l1,val_psnr";

const ADAM_PREFIX: &str = "adam.";
const DISC_ADAM_PREFIX: &str = "dadam.";
const SPECTRAL_PREFIX: &str = "sn.";

/// Where training batches come from.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub records: &'a [ImageRecord],
    pub policy: CropPolicy,
    pub spec: DegradationSpec,
}

pub struct TrainContext<'a> {
    pub generator: &'a Generator,
    pub config: &'a TrainConfig,
    pub data: TrainData<'a>,
    pub validation: Option<&'a ValidationSet>,
    pub extractor: Option<&'a dyn FeatureExtractor<f32>>,
    /// Receives `checkpoint.nlcu` (with its config sidecar) and `train_log.csv`.
    pub output: Option<&'a Path>,
}

/// One log row. Training rows carry the loss of the step taken at
/// `iteration`; validation, when present, was measured before that step. The
/// closing row of a run has no loss and validates the final parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub iteration: u64,
    pub lr: f64,
    pub loss: Option<LossComponents>,
    pub disc_loss: Option<f64>,
    pub validation: Option<ValidationResult>,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let l = self.loss;
        let v = self.validation;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.lr,
            opt(l.map(|c| c.total)),
            opt(l.map(|c| c.l1)),
            opt(l.map(|c| c.perc)),
            opt(l.map(|c| c.adv)),
            opt(self.disc_loss),
            opt(v.map(|r| r.l1)),
            opt(v.map(|r| r.psnr)),
        )
    }
}

/// Optimizer state of the PSNR stage.
#[derive(Clone, Debug)]
pub struct PsnrState {
    /// Completed steps.
    pub iteration: u64,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

impl PsnrState {
    pub fn new(params: ParamStore<f32>) -> Self {
        Self {
            iteration: 0,
            adam: AdamState::new(&params),
            params,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut state = ParamStore::new();
        self.adam.write_to(&mut state, ADAM_PREFIX);
        Checkpoint {
            iteration: self.iteration,
            params: self.params.clone(),
            state,
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let adam = AdamState::read_from(&ckpt.state, ADAM_PREFIX, &ckpt.params)?;
        Ok(Self {
            iteration: ckpt.iteration,
            params: ckpt.params,
            adam,
        })
    }
}

/// Generator and discriminator state of the adversarial stage.
#[derive(Clone, Debug)]
pub struct GanState {
    pub iteration: u64,
    pub generator: ParamStore<f32>,
    pub generator_adam: AdamState<f32>,
    pub discriminator: ParamStore<f32>,
    pub discriminator_adam: AdamState<f32>,
    pub spectral: SpectralState,
}

impl GanState {
    /// Fresh stage from trained generator weights.
    pub fn from_generator(generator: ParamStore<f32>, disc: &Discriminator, seed: u64) -> Self {
        let discriminator = disc.init::<f32>(seed);
        Self {
            iteration: 0,
            generator_adam: AdamState::new(&generator),
            generator,
            discriminator_adam: AdamState::new(&discriminator),
            discriminator,
            spectral: disc.init_power(seed),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut state = ParamStore::new();
        self.generator_adam.write_to(&mut state, ADAM_PREFIX);
        for (n, t) in self.discriminator.iter() {
            state.insert(n, t.clone());
        }
        self.discriminator_adam.write_to(&mut state, DISC_ADAM_PREFIX);
        self.spectral.write_to(&mut state, SPECTRAL_PREFIX);
        Checkpoint {
            iteration: self.iteration,
            params: self.generator.clone(),
            state,
        }
    }

    /// Resumes a GAN checkpoint, or starts the stage from a PSNR checkpoint
    /// (one without discriminator weights).
    pub fn from_checkpoint(ckpt: Checkpoint, disc: &Discriminator, seed: u64) -> Result<Self> {
        let template = disc.init::<f32>(seed);
        let first = template.iter().next().map(|(n, _)| n.to_string()).expect("discriminator has weights");
        if ckpt.state.get(&first).is_none() {
            return Ok(Self::from_generator(ckpt.params, disc, seed));
        }
        let mut discriminator = ParamStore::new();
        for (n, t) in template.iter() {
            let saved = ckpt
                .state
                .get(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing discriminator weight `{n}`")))?;
            if saved.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("`{n}` has shape {:?}", saved.shape())));
            }
            discriminator.insert(n, saved.clone());
        }
        let spectral = SpectralState::read_from(&ckpt.state, SPECTRAL_PREFIX)?;
        if spectral.vectors.len() != disc.init_power(seed).vectors.len() {
            return Err(Error::Checkpoint("incomplete spectral-norm state".into()));
        }
        Ok(Self {
            iteration: ckpt.iteration,
            generator_adam: AdamState::read_from(&ckpt.state, ADAM_PREFIX, &ckpt.params)?,
            discriminator_adam: AdamState::read_from(&ckpt.state, DISC_ADAM_PREFIX, &discriminator)?,
            generator: ckpt.params,
            discriminator,
            spectral,
        })
    }
}

struct Log {
    file: Option<File>,
}

impl Log {
    /// Appends to an existing log unless the run starts from iteration 0.
    fn open(dir: Option<&Path>, fresh: bool) -> Result<Self> {
        let Some(dir) = dir else {
            return Ok(Self { file: None });
        };
        fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        if fresh && path.exists() {
            fs::remove_file(&path)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            writeln!(file, "{LOG_HEADER}")?;
        }
        Ok(Self { file: Some(file) })
    }

    fn write(&mut self, r: &StepRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", r.csv_row())?;
        }
        Ok(())
    }
}

fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

/// Generator update; returns the loss terms and the detached output.
fn generator_step(
    ctx: &TrainContext<'_>,
    params: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    batch: &(Tensor<f32>, Tensor<f32>),
    iteration: u64,
    lr: f64,
    adversary: Option<(&Discriminator, &ParamStore<f32>, &mut SpectralState)>,
) -> Result<(LossComponents, Tensor<f32>)> {
    let tape = Tape::new();
    let p = params.bind(&tape);
    let x = tape.constant(batch.0.clone());
    let y = tape.constant(batch.1.clone());
    let sr = ctx.generator.forward(&x, &p)?;
    let logits = match adversary {
        Some((disc, dp, spectral)) => Some(disc.forward(&sr, &dp.bind_frozen(&tape), spectral)?),
        None => None,
    };
    let (loss, comps) = total_loss(&sr, &y, logits.as_ref(), ctx.extractor, &ctx.config.weights)?;
    if !comps.total.is_finite() {
        return Err(Error::NonFinite(format!("generator loss at iteration {iteration}")));
    }
    let grads = loss.backward()?;
    let mut g = p.gradients(&grads);
    if let Some(c) = ctx.config.clip_grad_norm {
        clip_gradients(&mut g, c);
    }
    adam_step(params, &g, adam, lr, iteration + 1, &ctx.config.adam)?;
    Ok((comps, sr.value().clone()))
}

fn discriminator_step(
    ctx: &TrainContext<'_>,
    disc: &Discriminator,
    state: &mut GanState,
    hr: &Tensor<f32>,
    fake: Tensor<f32>,
    lr: f64,
) -> Result<f64> {
    let tape = Tape::new();
    let dp = state.discriminator.bind(&tape);
    let real = disc.forward(&tape.constant(hr.clone()), &dp, &mut state.spectral)?;
    let fake = disc.forward_frozen(&tape.constant(fake), &dp, &state.spectral)?;
    let loss = discriminator_loss(&real, &fake)?;
    let value = loss.value().data()[0] as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("discriminator loss at iteration {}", state.iteration)));
    }
    let grads = loss.backward()?;
    let mut g = dp.gradients(&grads);
    if let Some(c) = ctx.config.clip_grad_norm {
        clip_gradients(&mut g, c);
    }
    adam_step(
        &mut state.discriminator,
        &g,
        &mut state.discriminator_adam,
        lr,
        state.iteration + 1,
        &ctx.config.adam,
    )?;
    Ok(value)
}

/// What the shared loop needs from a stage.
trait StageState {
    fn iteration(&self) -> u64;
    fn generator_params(&self) -> &ParamStore<f32>;
    fn checkpoint(&self) -> Checkpoint;
    /// One full update at `self.iteration()`; must leave the state untouched
    /// on error.
    fn step(&mut self, ctx: &TrainContext<'_>, lr: f64) -> Result<(LossComponents, Option<f64>)>;
}

impl StageState for PsnrState {
    fn iteration(&self) -> u64 {
        self.iteration
    }

    fn generator_params(&self) -> &ParamStore<f32> {
        &self.params
    }

    fn checkpoint(&self) -> Checkpoint {
        self.to_checkpoint()
    }

    fn step(&mut self, ctx: &TrainContext<'_>, lr: f64) -> Result<(LossComponents, Option<f64>)> {
        let d = ctx.data;
        let batch = make_batch(d.records, &d.policy, &d.spec, ctx.config.batch, self.iteration)?;
        let (comps, _) = generator_step(ctx, &mut self.params, &mut self.adam, &batch, self.iteration, lr, None)?;
        self.iteration += 1;
        Ok((comps, None))
    }
}

struct GanStep<'s> {
    disc: &'s Discriminator,
    state: &'s mut GanState,
}

impl StageState for GanStep<'_> {
    fn iteration(&self) -> u64 {
        self.state.iteration
    }

    fn generator_params(&self) -> &ParamStore<f32> {
        &self.state.generator
    }

    fn checkpoint(&self) -> Checkpoint {
        self.state.to_checkpoint()
    }

    fn step(&mut self, ctx: &TrainContext<'_>, lr: f64) -> Result<(LossComponents, Option<f64>)> {
        let d = ctx.data;
        let s = &mut *self.state;
        let batch = make_batch(d.records, &d.policy, &d.spec, ctx.config.batch, s.iteration)?;
        // work on copies so a failed step leaves the state as it was
        let mut gen = s.generator.clone();
        let mut gen_adam = s.generator_adam.clone();
        let mut spectral = s.spectral.clone();
        let (comps, fake) = generator_step(
            ctx,
            &mut gen,
            &mut gen_adam,
            &batch,
            s.iteration,
            lr,
            Some((self.disc, &s.discriminator, &mut spectral)),
        )?;
        let mut next = GanState {
            iteration: s.iteration,
            generator: gen,
            generator_adam: gen_adam,
            discriminator: s.discriminator.clone(),
            discriminator_adam: s.discriminator_adam.clone(),
            spectral,
        };
        let disc_loss = discriminator_step(ctx, self.disc, &mut next, &batch.1, fake, lr)?;
        next.iteration += 1;
        *s = next;
        Ok((comps, Some(disc_loss)))
    }
}

fn run_stage(ctx: &TrainContext<'_>, stage: Stage, state: &mut dyn StageState) -> Result<Vec<StepRecord>> {
    let config = ctx.config;
    config.validate()?;
    if config.stage != stage {
        return Err(Error::Config(format!(
            "config is for the {:?} stage, not {:?}",
            config.stage, stage
        )));
    }
    let save = |state: &dyn StageState| -> Result<()> {
        match ctx.output {
            Some(dir) => save_generator(&checkpoint_path(dir), ctx.generator.config(), &state.checkpoint()),
            None => Ok(()),
        }
    };
    let mut log = Log::open(ctx.output, state.iteration() == 0)?;
    let mut records = Vec::new();
    while state.iteration() < config.iterations {
        let it = state.iteration();
        let lr = lr_schedule(config, it);
        let validation = match ctx.validation {
            Some(set) if config.validate_every > 0 && it.is_multiple_of(config.validate_every) => {
                Some(validate(ctx.generator, state.generator_params(), set)?)
            }
            _ => None,
        };
        let (loss, disc_loss) = match state.step(ctx, lr) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                save(state)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let rec = StepRecord {
            iteration: it,
            lr,
            loss: Some(loss),
            disc_loss,
            validation,
        };
        log.write(&rec)?;
        if it.is_multiple_of(100) {
            log::info!("iteration {it}: loss {:.6}", loss.total);
        }
        records.push(rec);
        if config.checkpoint_every > 0 && state.iteration().is_multiple_of(config.checkpoint_every) {
            save(state)?;
        }
    }
    let validation = match ctx.validation {
        Some(set) => Some(validate(ctx.generator, state.generator_params(), set)?),
        None => None,
    };
    let rec = StepRecord {
        iteration: state.iteration(),
        lr: lr_schedule(config, state.iteration()),
        loss: None,
        disc_loss: None,
        validation,
    };
    log.write(&rec)?;
    records.push(rec);
    save(state)?;
    Ok(records)
}

/// L1 (plus optional perceptual) training up to `config.iterations`,
/// continuing from `state.iteration`.
pub fn train_psnr_stage(ctx: &TrainContext<'_>, state: &mut PsnrState) -> Result<Vec<StepRecord>> {
    run_stage(ctx, Stage::Psnr, state)
}

/// Alternating 1:1 generator and discriminator updates at a constant rate.
pub fn train_gan_stage(ctx: &TrainContext<'_>, disc: &Discriminator, state: &mut GanState) -> Result<Vec<StepRecord>> {
    run_stage(ctx, Stage::Gan, &mut GanStep { disc, state })
}

/// Fraction of logits on the correct side of zero: positive for `real`,
/// negative for `fake`, counted per pixel.
pub fn discriminator_accuracy(
    disc: &Discriminator,
    params: &ParamStore<f32>,
    spectral: &SpectralState,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
) -> Result<f64> {
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let r = disc.forward_frozen(&tape.constant(real.clone()), &p, spectral)?;
    let f = disc.forward_frozen(&tape.constant(fake.clone()), &p, spectral)?;
    let hits = r.value().data().iter().filter(|&&v| v > 0.0).count() + f.value().data().iter().filter(|&&v| v < 0.0).count();
    Ok(hits as f64 / (r.value().numel() + f.value().numel()) as f64)
}
