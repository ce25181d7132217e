//! Adversarial few-step training (and the reconstruction-only baseline).
//!
//! One UFOGen step on a batch `(x0, y)`:
//!
//! 1. draw `n ~ U{1..N}` per example, `x_{t_{n−1}}` from the bridge marginal
//!    and `x_{t_n}` from the forward transition;
//! 2. predict `x'_0 = G(x_{t_n}, y, t_n)` and re-noise it through the
//!    marginal to get a fake `x'_{t_{n−1}}`;
//! 3. update D on real `x_{t_{n−1}}` against that fake;
//! 4. re-noise `x'_0` with fresh noise, score it with the updated D and update
//!    G on `adv_weight·L_adv + λ_recon·L_recon`; then update the EMA.
//!
//! `G` is evaluated once per step: the same prediction feeds the D update as
//! a constant and the G update as a graph, which is equivalent because G's
//! parameters do not change in between.

pub mod data;
pub mod losses;

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Checkpoint, Ema, Tape, Tensor, Var};
use crate::bridge::{marginal_sample, transition_sample, ufogen_infer, Denoiser, SamplerMode};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{Enhancer, TestItem};
use crate::nets::{Discriminator, Generator, ParamSet};
use crate::rng::{derive_seed, normal_vec, stream, StreamRng};
use crate::schedule::ScheduleParams;
use crate::signal::synth::Task;
use data::{normalization_gain, BatchSource, DataConfig};
use losses::{d_loss, g_adv_loss, recon_loss, MelLossConfig, ReconConfig, ReconDomain};

const PURPOSE_INIT_G: u64 = 1;
const PURPOSE_INIT_D: u64 = 2;
const PURPOSE_PATH: u64 = 3;
const PURPOSE_FAKE_D: u64 = 4;
const PURPOSE_FAKE_G: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    SbUfogen,
    SbBaseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub mode: TrainMode,
    pub task: Task,
    pub lambda_recon: f64,
    pub alpha_l1: f64,
    pub recon_domain: ReconDomain,
    /// Used for dereverberation only.
    pub mel: MelLossConfig,
    pub adv_weight: f64,
    /// R1 penalty weight. Only 0 is supported.
    pub r1_weight: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub gen_optimizer: AdamWConfig,
    pub disc_optimizer: AdamWConfig,
    pub ema_decay: f64,
    pub log_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::SbUfogen,
            task: Task::Denoise,
            lambda_recon: 100.0,
            alpha_l1: 1e-3,
            recon_domain: ReconDomain::Spectral,
            mel: MelLossConfig::default(),
            adv_weight: 1.0,
            r1_weight: 0.0,
            batch_size: 16,
            total_steps: 20_000,
            gen_optimizer: AdamWConfig::default(),
            disc_optimizer: AdamWConfig::default(),
            ema_decay: 0.999,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_recon, self.alpha_l1, self.mel.weight, self.adv_weight];
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {weights:?}")));
        }
        if self.r1_weight != 0.0 {
            return Err(Error::Config("r1_weight > 0 is not supported; set it to 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// Losses and gradient norms of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u64,
    /// NaN-free: 0 when the step has no discriminator update.
    pub d_loss: f64,
    pub g_adv: f64,
    pub recon: f64,
    pub g_total: f64,
    pub grad_norm_g: f64,
    pub grad_norm_d: f64,
}

impl StepStats {
    fn check(&self) -> Result<()> {
        let vals = [self.d_loss, self.g_adv, self.recon, self.g_total, self.grad_norm_g, self.grad_norm_d];
        if vals.iter().all(|v| v.is_finite()) {
            return Ok(());
        }
        Err(Error::NonFinite {
            step: self.step,
            detail: format!(
                "d_loss={} g_adv={} recon={} g_total={} grad_norm_g={} grad_norm_d={}",
                self.d_loss, self.g_adv, self.recon, self.g_total, self.grad_norm_g, self.grad_norm_d
            ),
        })
    }
}

fn grad_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
}

fn rows(x: &Tensor) -> Result<(usize, usize)> {
    x.dims2()
}

/// Applies `f` to every row of a `[B, L]` tensor pair with that row's time.
fn map_rows(
    a: &Tensor,
    b: &Tensor,
    mut f: impl FnMut(&Tensor, &Tensor, usize) -> Result<Tensor>,
) -> Result<Tensor> {
    let (n, len) = rows(a)?;
    b.expect_shape(a.shape())?;
    let mut out = Vec::with_capacity(n * len);
    for i in 0..n {
        let ra = Tensor::vector(a.row(i).to_vec());
        let rb = Tensor::vector(b.row(i).to_vec());
        out.extend_from_slice(f(&ra, &rb, i)?.data());
    }
    Tensor::new([n, len], out)
}

/// `[B, L]` tensor holding `vals[i]` along row `i`.
fn row_constant(vals: &[f64], len: usize) -> Tensor {
    let data = vals.iter().flat_map(|&v| std::iter::repeat_n(v, len)).collect();
    Tensor::new([vals.len(), len], data).expect("row constant shape")
}

pub struct DiscState {
    pub net: Discriminator,
    pub params: ParamSet,
    pub opt: AdamW,
}

/// Networks, optimizers and the step counter of one run.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub sched: ScheduleParams,
    pub recon: ReconConfig,
    pub generator: Generator,
    pub gen_params: ParamSet,
    pub gen_opt: AdamW,
    pub ema: Ema,
    pub disc: Option<DiscState>,
    pub step: u64,
}

pub fn recon_config(cfg: &ExperimentConfig) -> ReconConfig {
    let sample_rate = match &cfg.data {
        DataConfig::Synth(s) => s.sample_rate as f64,
        DataConfig::Mixture(_) => 1.0,
    };
    ReconConfig {
        domain: cfg.train.recon_domain,
        stft: cfg.generator.stft,
        compression: cfg.generator.compression,
        alpha_l1: cfg.train.alpha_l1,
        mel: (cfg.train.task == Task::Dereverb).then(|| cfg.train.mel.clone()),
        sample_rate,
    }
}

impl Trainer {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let (generator, gen_params) = Generator::new(&config.generator, derive_seed(seed, &[PURPOSE_INIT_G]))?;
        let gen_opt = AdamW::new(config.train.gen_optimizer, &gen_params.tensors);
        let ema = Ema::new(config.train.ema_decay, &gen_params.tensors)?;
        let disc = match config.train.mode {
            TrainMode::SbBaseline => None,
            TrainMode::SbUfogen => {
                let (net, params) = Discriminator::new(&config.discriminator, derive_seed(seed, &[PURPOSE_INIT_D]))?;
                let opt = AdamW::new(config.train.disc_optimizer, &params.tensors);
                Some(DiscState { net, params, opt })
            }
        };
        Ok(Self {
            config: config.clone(),
            sched: config.schedule,
            recon: recon_config(config),
            generator,
            gen_params,
            gen_opt,
            ema,
            disc,
            step: 0,
        })
    }

    fn rng(&self, purpose: u64) -> StreamRng {
        stream(self.config.seed, &[purpose, self.step])
    }

    /// Grid indices `n ~ U{1..N}`, one per example, for the current step.
    pub fn draw_indices(&self, batch: usize) -> Vec<usize> {
        let mut rng = self.rng(PURPOSE_PATH);
        (0..batch).map(|_| rng.random_range(1..=self.sched.n_steps)).collect()
    }

    /// One optimisation step on `(x0, y)`, each `[B, L]`.
    pub fn step(&mut self, x0: &Tensor, y: &Tensor) -> Result<StepStats> {
        let stats = match self.config.train.mode {
            TrainMode::SbUfogen => self.ufogen_step(x0, y)?,
            TrainMode::SbBaseline => self.baseline_step(x0, y)?,
        };
        self.step += 1;
        Ok(stats)
    }

    fn ufogen_step(&mut self, x0: &Tensor, y: &Tensor) -> Result<StepStats> {
        let (b, len) = rows(x0)?;
        y.expect_shape(x0.shape())?;
        let idx = self.draw_indices(b);
        let t_n: Vec<f64> = idx.iter().map(|&n| self.sched.grid_time(n)).collect();
        let t_prev: Vec<f64> = idx.iter().map(|&n| self.sched.grid_time(n - 1)).collect();

        let mut rng = self.rng(PURPOSE_PATH);
        let sched = self.sched;
        let x_prev = map_rows(x0, y, |a, yy, i| marginal_sample(a, yy, t_prev[i], &sched, &mut rng))?;
        let x_tn = map_rows(&x_prev, y, |a, yy, i| transition_sample(a, yy, t_prev[i], t_n[i], &sched, &mut rng))?;

        let gtape = Tape::new();
        let gp = gtape.leaves(&self.gen_params.tensors);
        let y_g = gtape.constant(y.clone());
        let x0_hat = self.generator.forward(&gp, gtape.constant(x_tn), y_g, &t_n)?;
        let x0_hat_val = (*x0_hat.value()).clone();

        let coeffs = t_prev.iter().map(|&t| sched.marginal_coeffs(t)).collect::<Result<Vec<_>>>()?;
        let w_x = row_constant(&coeffs.iter().map(|c| c.w_x).collect::<Vec<_>>(), len);
        let w_y = row_constant(&coeffs.iter().map(|c| c.w_y).collect::<Vec<_>>(), len);
        let s_x = row_constant(&coeffs.iter().map(|c| c.sigma_x).collect::<Vec<_>>(), len);
        // w_x·x0 + w_y·y + σ_x·z with fresh z from the given purpose stream.
        let (seed, step) = (self.config.seed, self.step);
        let renoise_offset = |purpose: u64| -> Result<Tensor> {
            let z = Tensor::new([b, len], normal_vec(&mut stream(seed, &[purpose, step]), b * len))?;
            let wy_y = w_y.zip_map(y, |a, b| a * b)?;
            let sz = s_x.zip_map(&z, |a, b| a * b)?;
            wy_y.zip_map(&sz, |a, b| a + b)
        };
        let adv_weight = self.config.train.adv_weight;

        let disc = self.disc.as_mut().ok_or_else(|| Error::Contract("UFOGen step without discriminator".into()))?;
        let fake_d = w_x.zip_map(&x0_hat_val, |a, b| a * b)?.zip_map(&renoise_offset(PURPOSE_FAKE_D)?, |a, b| a + b)?;
        let (d_val, grad_norm_d) = {
            let dtape = Tape::new();
            let dp = dtape.leaves(&disc.params.tensors);
            let y_d = dtape.constant(y.clone());
            let real = disc.net.forward(&dp, dtape.constant(x_prev), y_d, &t_prev)?;
            let fake = disc.net.forward(&dp, dtape.constant(fake_d), y_d, &t_prev)?;
            let loss = d_loss(&real, &fake)?;
            let val = loss.value().item();
            let grads = dtape.backward(loss)?.collect(&dp);
            let norm = grad_norm(&grads);
            if !(val.is_finite() && norm.is_finite()) {
                return Err(Error::NonFinite {
                    step: self.step,
                    detail: format!("d_loss={val} grad_norm_d={norm} before the discriminator update"),
                });
            }
            disc.opt.update(&mut disc.params.tensors, &grads)?;
            (val, norm)
        };

        let recon = recon_loss(x0_hat, gtape.constant(x0.clone()), &self.recon)?;
        let recon_val = recon.value().item();
        let mut total = recon.scale(self.config.train.lambda_recon);
        let mut g_adv_val = 0.0;
        if adv_weight > 0.0 {
            let offset = gtape.constant(renoise_offset(PURPOSE_FAKE_G)?);
            let fake_g = x0_hat.mul(gtape.constant(w_x.clone()))?.add(offset)?;
            let dp = gtape.constants(&disc.params.tensors);
            let logits = disc.net.forward(&dp, fake_g, y_g, &t_prev)?;
            let adv = g_adv_loss(&logits)?;
            g_adv_val = adv.value().item();
            total = total.add(adv.scale(adv_weight))?;
        }
        let stats = self.apply_generator_update(&gtape, &gp, total, StepStats {
            step: self.step,
            d_loss: d_val,
            g_adv: g_adv_val,
            recon: recon_val,
            g_total: 0.0,
            grad_norm_g: 0.0,
            grad_norm_d,
        })?;
        Ok(stats)
    }

    fn baseline_step(&mut self, x0: &Tensor, y: &Tensor) -> Result<StepStats> {
        let (b, _) = rows(x0)?;
        y.expect_shape(x0.shape())?;
        let idx = self.draw_indices(b);
        let t: Vec<f64> = idx.iter().map(|&n| self.sched.grid_time(n)).collect();
        let mut rng = self.rng(PURPOSE_PATH);
        let sched = self.sched;
        let x_t = map_rows(x0, y, |a, yy, i| marginal_sample(a, yy, t[i], &sched, &mut rng))?;

        let tape = Tape::new();
        let gp = tape.leaves(&self.gen_params.tensors);
        let x0_hat = self.generator.forward(&gp, tape.constant(x_t), tape.constant(y.clone()), &t)?;
        let recon = recon_loss(x0_hat, tape.constant(x0.clone()), &self.recon)?;
        let recon_val = recon.value().item();
        let total = recon.scale(self.config.train.lambda_recon);
        self.apply_generator_update(&tape, &gp, total, StepStats {
            step: self.step,
            d_loss: 0.0,
            g_adv: 0.0,
            recon: recon_val,
            g_total: 0.0,
            grad_norm_g: 0.0,
            grad_norm_d: 0.0,
        })
    }

    fn apply_generator_update(&mut self, tape: &Tape, gp: &[Var<'_>], total: Var<'_>, mut stats: StepStats) -> Result<StepStats> {
        stats.g_total = total.value().item();
        let grads = tape.backward(total)?.collect(gp);
        stats.grad_norm_g = grad_norm(&grads);
        stats.check()?;
        self.gen_opt.update(&mut self.gen_params.tensors, &grads)?;
        self.ema.update(&self.gen_params.tensors)?;
        Ok(stats)
    }

    /// Full state as an `SBUF1` container.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        let names = &self.gen_params.names;
        ck.push_tensors("gen", names, &self.gen_params.tensors);
        ck.push_tensors("gen_ema", names, &self.ema.shadow);
        ck.push_tensors("opt.gen.m", names, &self.gen_opt.m);
        ck.push_tensors("opt.gen.v", names, &self.gen_opt.v);
        ck.push_tensor("opt.gen.step", &Tensor::vector(vec![self.gen_opt.step as f64]));
        if let Some(d) = &self.disc {
            ck.push_tensors("disc", &d.params.names, &d.params.tensors);
            ck.push_tensors("opt.disc.m", &d.params.names, &d.opt.m);
            ck.push_tensors("opt.disc.v", &d.params.names, &d.opt.v);
            ck.push_tensor("opt.disc.step", &Tensor::vector(vec![d.opt.step as f64]));
        }
        ck.push_tensor("meta/step", &Tensor::vector(vec![self.step as f64]));
        ck.push_bytes("meta/config", self.config.to_toml()?.as_bytes());
        Ok(ck)
    }

    /// Restores a run saved with [`Self::to_checkpoint`].
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = config_from_checkpoint(ck)?;
        let mut tr = Self::new(&config)?;
        let names = tr.gen_params.names.clone();
        tr.gen_params.tensors = ck.tensors("gen", &names)?;
        tr.ema.shadow = ck.tensors("gen_ema", &names)?;
        tr.gen_opt.m = ck.tensors("opt.gen.m", &names)?;
        tr.gen_opt.v = ck.tensors("opt.gen.v", &names)?;
        tr.gen_opt.step = ck.tensor("opt.gen.step")?.item() as u64;
        if let Some(d) = tr.disc.as_mut() {
            let names = d.params.names.clone();
            d.params.tensors = ck.tensors("disc", &names)?;
            d.opt.m = ck.tensors("opt.disc.m", &names)?;
            d.opt.v = ck.tensors("opt.disc.v", &names)?;
            d.opt.step = ck.tensor("opt.disc.step")?.item() as u64;
        }
        tr.step = ck.tensor("meta/step")?.item() as u64;
        Ok(tr)
    }

    /// EMA generator ready for inference.
    pub fn inference_model(&self) -> Result<InferenceModel> {
        InferenceModel::new(&self.config, self.generator.clone(), self.ema.shadow.clone())
    }
}

pub fn config_from_checkpoint(ck: &Checkpoint) -> Result<ExperimentConfig> {
    let text = std::str::from_utf8(ck.bytes("meta/config")?)
        .map_err(|_| Error::Format("checkpoint config is not utf-8".into()))?;
    ExperimentConfig::from_toml(text)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    #[serde(flatten)]
    pub stats: StepStats,
    pub wall_s: f64,
}

/// Runs `trainer` up to `train.total_steps`, writing a JSON line every
/// `log_every` steps and calling `on_checkpoint` every `checkpoint_every`
/// steps and at the end.
pub fn run_training(
    trainer: &mut Trainer,
    source: &mut dyn BatchSource,
    log: &mut dyn Write,
    mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
) -> Result<Vec<StepStats>> {
    let start = Instant::now();
    let cfg = trainer.config.train.clone();
    let mut history = Vec::with_capacity(cfg.total_steps.saturating_sub(trainer.step) as usize);
    while trainer.step < cfg.total_steps {
        let (x0, y) = source.batch(trainer.step, cfg.batch_size)?;
        let stats = trainer.step(&x0, &y)?;
        history.push(stats);
        let done = trainer.step;
        if cfg.log_every > 0 && (done % cfg.log_every == 0 || done == cfg.total_steps) {
            let rec = LogRecord { stats, wall_s: start.elapsed().as_secs_f64() };
            let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(log, "{line}")?;
            log::info!(
                "step {done}: d={:.4} adv={:.4} recon={:.4}",
                stats.d_loss,
                stats.g_adv,
                stats.recon
            );
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != cfg.total_steps {
            on_checkpoint(trainer)?;
        }
    }
    on_checkpoint(trainer)?;
    Ok(history)
}

/// Generator with fixed (usually EMA) parameters.
#[derive(Debug, Clone)]
pub struct InferenceModel {
    pub generator: Generator,
    pub params: Vec<Tensor>,
    /// Grid whose resolution bounds the number of inference steps.
    pub sched: ScheduleParams,
    /// Scale inputs to unit RMS and outputs back.
    pub normalize: bool,
    pub calls: usize,
}

impl InferenceModel {
    pub fn new(config: &ExperimentConfig, generator: Generator, params: Vec<Tensor>) -> Result<Self> {
        let n = config.schedule.n_steps.max(config.eval.max_steps);
        Ok(Self {
            generator,
            params,
            sched: config.schedule.with_steps(n)?,
            normalize: matches!(config.data, DataConfig::Synth(_)),
            calls: 0,
        })
    }

    /// Loads the EMA generator of a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ExperimentConfig)> {
        let config = config_from_checkpoint(ck)?;
        let (generator, params) = Generator::new(&config.generator, 0)?;
        let ema = ck.tensors("gen_ema", &params.names)?;
        Ok((Self::new(&config, generator, ema)?, config))
    }

    /// Enhances a batch `[B, L]` of degraded signals.
    pub fn enhance_batch(&mut self, y: &Tensor, n_steps: usize, mode: SamplerMode, rng: &mut impl Rng) -> Result<Tensor> {
        let (b, len) = rows(y)?;
        let gains: Vec<f64> = (0..b).map(|i| if self.normalize { normalization_gain(y.row(i)) } else { 1.0 }).collect();
        let g = row_constant(&gains, len);
        let yn = y.zip_map(&g, |a, b| a * b)?;
        let sched = self.sched;
        let out = ufogen_infer(&yn, self, n_steps, &sched, rng, mode)?;
        out.zip_map(&g, |a, b| a / b)
    }

    pub fn enhance(&mut self, y: &[f64], n_steps: usize, mode: SamplerMode, rng: &mut impl Rng) -> Result<Vec<f64>> {
        Ok(self.enhance_batch(&Tensor::new([1, y.len()], y.to_vec())?, n_steps, mode, rng)?.into_data())
    }
}

impl Denoiser for InferenceModel {
    fn denoise(&mut self, x_t: &Tensor, y: &Tensor, t: f64) -> Result<Tensor> {
        self.calls += 1;
        let tape = Tape::new();
        let p = tape.constants(&self.params);
        let b = x_t.shape()[0];
        let out = self.generator.forward(&p, tape.constant(x_t.clone()), tape.constant(y.clone()), &vec![t; b])?;
        Ok((*out.value()).clone())
    }
}

impl Enhancer for InferenceModel {
    fn enhance_item(&mut self, item: &TestItem, n_steps: usize, mode: SamplerMode, rng: &mut StreamRng) -> Result<Vec<f64>> {
        self.enhance(&item.degraded, n_steps, mode, rng)
    }
}
