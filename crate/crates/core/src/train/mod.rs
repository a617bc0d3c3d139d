//! Two-stage training: a spectral VAE objective, then adversarial fine-tuning
//! of the decoder against a multi-scale discriminator.

mod data;
mod losses;

pub use data::{delayed, Augment, Dataset};
pub use losses::{
    beta_schedule, discriminator_loss, generator_loss, hinge_discriminator, hinge_generator,
    kl_loss, spectral_loss,
};

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Adam, AdamConfig, Graph, ParamId, Tensor};
use crate::dsp::{spectral_distance, SpectralConfig, Waveform};
use crate::error::{config_err, Error, Result};
use crate::model::{feature_matching, update_running_stats, Ctx, Mode, Rave};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub spectral: f64,
    pub feature_matching: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spectral: 1.0,
            feature_matching: 10.0,
            adversarial: 1.0,
        }
    }
}

/// Moving-average plateau test used to end stage 1 early.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plateau {
    pub window: usize,
    /// Minimum relative improvement between consecutive windows.
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub beta: f64,
    pub beta_warmup_steps: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub crop: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub freeze_encoder_stage2: bool,
    pub weights: LossWeights,
    pub spectral: SpectralConfig,
    pub augment: Augment,
    pub checkpoint_every: usize,
    pub plateau: Option<Plateau>,
}

impl TrainConfig {
    /// Desk-scale defaults for a model at `sample_rate`.
    pub fn desk(sample_rate: u32) -> Self {
        Self {
            beta: 0.1,
            beta_warmup_steps: 200,
            stage1_steps: 2000,
            stage2_steps: 500,
            batch_size: 8,
            crop: 8192,
            adam: AdamConfig::default(),
            seed: 0,
            freeze_encoder_stage2: true,
            weights: LossWeights::default(),
            spectral: SpectralConfig::for_sample_rate(sample_rate),
            augment: Augment::default(),
            checkpoint_every: 0,
            plateau: None,
        }
    }

    /// Warmup at 10% of stage 1.
    pub fn with_stage1_steps(mut self, steps: usize) -> Self {
        self.stage1_steps = steps;
        self.beta_warmup_steps = steps / 10;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(config_err!(
                "batch_size must be at least 2 for batch normalisation"
            ));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(config_err!("beta must be finite and nonnegative"));
        }
        if self.crop == 0 {
            return Err(config_err!("crop must be positive"));
        }
        self.spectral.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Representation,
    Adversarial,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Representation => 1,
            Stage::Adversarial => 2,
        }
    }
}

/// One row of the metrics log. Absent components are left empty in CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub step: usize,
    pub stage: Stage,
    pub spectral: f64,
    pub kl: Option<f64>,
    pub beta: Option<f64>,
    pub discriminator: Option<f64>,
    pub generator: Option<f64>,
    pub feature_matching: Option<f64>,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "step,stage,spectral,kl,beta,loss_dis,loss_gen,loss_fm,total";

impl Metrics {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.stage.number(),
            self.spectral,
            opt(self.kl),
            opt(self.beta),
            opt(self.discriminator),
            opt(self.generator),
            opt(self.feature_matching),
            self.total
        )
    }

    fn check_finite(&self) -> Result<()> {
        let vals = [
            Some(self.spectral),
            self.kl,
            self.discriminator,
            self.generator,
            self.feature_matching,
            Some(self.total),
        ];
        if vals.iter().flatten().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!(
                "non-finite loss at step {} (stage {}): {}",
                self.step,
                self.stage.number(),
                self.csv_row()
            )))
        }
    }
}

pub fn metrics_csv(rows: &[Metrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Everything besides the parameters needed to continue a run exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    /// Step at which stage 2 began, once it has.
    pub stage2_start: Option<usize>,
    pub rng: ChaCha8Rng,
    pub encoder_opt: Adam,
    pub decoder_opt: Adam,
    pub discriminator_opt: Adam,
    pub history: VecDeque<f64>,
}

pub struct Trainer {
    pub model: Rave,
    pub config: TrainConfig,
    pub state: TrainState,
}

struct Sampled {
    x: Tensor<f32>,
    target: Tensor<f32>,
    eps: Tensor<f32>,
    noise_seed: u64,
}

impl Trainer {
    pub fn new(model: Rave, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let f = model.config.total_downsampling();
        if !config.crop.is_multiple_of(f) {
            return Err(config_err!(
                "crop {} is not a multiple of the downsampling factor {f}",
                config.crop
            ));
        }
        let state = TrainState {
            step: 0,
            stage2_start: None,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            encoder_opt: Adam::new(config.adam, &model.params, model.encoder_params()),
            decoder_opt: Adam::new(config.adam, &model.params, model.decoder_params()),
            discriminator_opt: Adam::new(config.adam, &model.params, model.discriminator_params()),
            history: VecDeque::new(),
        };
        Ok(Self {
            model,
            config,
            state,
        })
    }

    pub fn stage(&self) -> Stage {
        if self.state.stage2_start.is_some() || self.state.step >= self.config.stage1_steps {
            Stage::Adversarial
        } else {
            Stage::Representation
        }
    }

    pub fn total_steps(&self) -> usize {
        let s1 = self.state.stage2_start.unwrap_or(self.config.stage1_steps);
        s1 + self.config.stage2_steps
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    pub fn beta(&self) -> f64 {
        beta_schedule(
            self.config.beta,
            self.config.beta_warmup_steps,
            self.state.step,
        )
    }

    fn sample(&mut self, data: &Dataset) -> Result<Sampled> {
        let cfg = &self.config;
        let rng = &mut self.state.rng;
        let x = data.sample_batch(cfg.batch_size, cfg.crop, &cfg.augment, rng)?;
        let frames = cfg.crop / self.model.config.total_downsampling();
        let n = cfg.batch_size * self.model.config.latent_dim * frames;
        let eps: Vec<f32> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let eps = Tensor::from_vec(&[cfg.batch_size, self.model.config.latent_dim, frames], eps)?;
        let noise_seed = rng.gen();
        let target = delayed(&x, self.model.latency());
        Ok(Sampled {
            x,
            target,
            eps,
            noise_seed,
        })
    }

    /// Spectral ELBO step on encoder and decoder. Gradients stay in the store
    /// until the next step.
    fn stage1(&mut self, s: &Sampled) -> Result<Metrics> {
        let beta = self.beta();
        let model = &self.model;
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &model.params, Mode::Train);
        let xv = cx.g.constant(s.x.clone());
        let post = model.encode_vars(&mut cx, xv)?;
        let z = reparameterized(cx.g, post.mean, post.logvar, &s.eps)?;
        let (_, audio) = model.decode_vars(&mut cx, z, s.noise_seed)?;
        let stats = std::mem::take(&mut cx.bn_stats);
        let spec = spectral_loss(&mut g, &s.target, audio, &self.config.spectral)?;
        let kl = kl_loss(&mut g, post.mean, post.logvar)?;
        let wkl = g.scale(kl, beta as f32);
        let total = g.add(spec, wkl)?;
        let metrics = Metrics {
            step: self.state.step,
            stage: Stage::Representation,
            spectral: g.value(spec).item() as f64,
            kl: Some(g.value(kl).item() as f64),
            beta: Some(beta),
            discriminator: None,
            generator: None,
            feature_matching: None,
            total: g.value(total).item() as f64,
        };
        metrics.check_finite()?;
        self.model.params.zero_grad();
        g.backward(total, &mut self.model.params)?;
        update_running_stats(&mut self.model.params, &stats);
        self.state.encoder_opt.step(&mut self.model.params);
        self.state.decoder_opt.step(&mut self.model.params);
        Ok(metrics)
    }

    /// Discriminator update on real crops against detached reconstructions.
    fn discriminator_step(&mut self, s: &Sampled) -> Result<f64> {
        let model = &self.model;
        let mut g = Graph::new();
        let fake = {
            let mut cx = Ctx::new(&mut g, &model.params, Mode::Eval).frozen(true);
            let xv = cx.g.constant(s.x.clone());
            let post = model.encode_vars(&mut cx, xv)?;
            let z = reparameterized(cx.g, post.mean, post.logvar, &s.eps)?;
            let (_, audio) = model.decode_vars(&mut cx, z, s.noise_seed)?;
            g.value(audio).clone()
        };
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, &model.params, Mode::Train);
        let real = cx.g.constant(s.target.clone());
        let fake = cx.g.constant(fake);
        let dr = model.discriminator.forward(&mut cx, real)?;
        let df = model.discriminator.forward(&mut cx, fake)?;
        let loss = discriminator_loss(&mut g, &dr.logits, &df.logits)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite discriminator loss at step {}",
                self.state.step
            )));
        }
        self.model.params.zero_grad();
        g.backward(loss, &mut self.model.params)?;
        self.state.discriminator_opt.step(&mut self.model.params);
        Ok(value)
    }

    fn generator_step(&mut self, s: &Sampled, dis: f64) -> Result<Metrics> {
        let frozen = self.config.freeze_encoder_stage2;
        let beta = self.beta();
        let w = self.config.weights;
        let model = &self.model;
        let mut g = Graph::new();
        let (post, stats) = {
            let mode = if frozen { Mode::Eval } else { Mode::Train };
            let mut cx = Ctx::new(&mut g, &model.params, mode).frozen(frozen);
            let xv = cx.g.constant(s.x.clone());
            let post = model.encode_vars(&mut cx, xv)?;
            (post, cx.bn_stats)
        };
        let mut cx = Ctx::new(&mut g, &model.params, Mode::Train);
        let z = reparameterized(cx.g, post.mean, post.logvar, &s.eps)?;
        let (_, audio) = model.decode_vars(&mut cx, z, s.noise_seed)?;
        let mut dcx = Ctx::new(&mut g, &model.params, Mode::Train).frozen(true);
        let real = dcx.g.constant(s.target.clone());
        let dr = model.discriminator.forward(&mut dcx, real)?;
        let df = model.discriminator.forward(&mut dcx, audio)?;
        let adv = generator_loss(&mut g, &df.logits)?;
        let fm = feature_matching(&mut g, &dr, &df)?;
        let spec = spectral_loss(&mut g, &s.target, audio, &self.config.spectral)?;
        let a = g.scale(adv, w.adversarial as f32);
        let b = g.scale(spec, w.spectral as f32);
        let c = g.scale(fm, w.feature_matching as f32);
        let ab = g.add(a, b)?;
        let mut total = g.add(ab, c)?;
        let mut kl_value = None;
        if !frozen {
            let kl = kl_loss(&mut g, post.mean, post.logvar)?;
            kl_value = Some(g.value(kl).item() as f64);
            let wkl = g.scale(kl, beta as f32);
            total = g.add(total, wkl)?;
        }
        let metrics = Metrics {
            step: self.state.step,
            stage: Stage::Adversarial,
            spectral: g.value(spec).item() as f64,
            kl: kl_value,
            beta: (!frozen).then_some(beta),
            discriminator: Some(dis),
            generator: Some(g.value(adv).item() as f64),
            feature_matching: Some(g.value(fm).item() as f64),
            total: g.value(total).item() as f64,
        };
        metrics.check_finite()?;
        self.model.params.zero_grad();
        g.backward(total, &mut self.model.params)?;
        self.state.decoder_opt.step(&mut self.model.params);
        if !frozen {
            update_running_stats(&mut self.model.params, &stats);
            self.state.encoder_opt.step(&mut self.model.params);
        }
        Ok(metrics)
    }

    /// Runs one training iteration (stage 2: discriminator then generator).
    pub fn step(&mut self, data: &Dataset) -> Result<Metrics> {
        if data.sample_rate != self.model.config.sample_rate {
            return Err(Error::Data(format!(
                "dataset rate {} differs from model rate {}",
                data.sample_rate, self.model.config.sample_rate
            )));
        }
        let s = self.sample(data)?;
        let m = match self.stage() {
            Stage::Representation => self.stage1(&s)?,
            Stage::Adversarial => {
                if self.state.stage2_start.is_none() {
                    self.state.stage2_start = Some(self.state.step);
                }
                let dis = self.discriminator_step(&s)?;
                self.generator_step(&s, dis)?
            }
        };
        self.state.step += 1;
        if m.stage == Stage::Representation {
            self.observe_plateau(m.total);
        }
        Ok(m)
    }

    fn observe_plateau(&mut self, loss: f64) {
        let Some(p) = self.config.plateau else { return };
        let h = &mut self.state.history;
        h.push_back(loss);
        if h.len() > 2 * p.window {
            h.pop_front();
        }
        if h.len() == 2 * p.window {
            let old: f64 = h.iter().take(p.window).sum::<f64>() / p.window as f64;
            let new: f64 = h.iter().skip(p.window).sum::<f64>() / p.window as f64;
            if (old - new) < p.tolerance * old.abs() {
                self.state.stage2_start = Some(self.state.step);
            }
        }
    }

    /// Trains until both stages complete, appending metrics and writing
    /// checkpoints every `checkpoint_every` steps when `out_dir` is given.
    pub fn run(&mut self, data: &Dataset, out_dir: Option<&Path>) -> Result<Vec<Metrics>> {
        self.run_until(data, out_dir, usize::MAX)
    }

    pub fn run_until(
        &mut self,
        data: &Dataset,
        out_dir: Option<&Path>,
        max_step: usize,
    ) -> Result<Vec<Metrics>> {
        let mut rows = Vec::new();
        let mut log = match out_dir {
            Some(dir) => Some(crate::formats::MetricsLog::open(
                &dir.join("metrics.csv"),
                self.state.step,
            )?),
            None => None,
        };
        while !self.is_done() && self.state.step < max_step {
            let m = match self.step(data) {
                Ok(m) => m,
                Err(e) => {
                    if let (Some(dir), Error::Numeric(msg)) = (out_dir, &e) {
                        let path = dir.join("nan_dump.txt");
                        std::fs::write(&path, format!("{msg}\n{}", self.diagnostics()))
                            .map_err(|io| Error::io(&path, io))?;
                    }
                    return Err(e);
                }
            };
            if let Some(log) = log.as_mut() {
                log.append(&m)?;
            }
            rows.push(m);
            let every = self.config.checkpoint_every;
            if let Some(dir) = out_dir {
                if every > 0 && self.state.step.is_multiple_of(every) {
                    crate::formats::save_checkpoint(&dir.join("checkpoint.rave"), self, None)?;
                }
            }
        }
        if let Some(dir) = out_dir {
            crate::formats::save_checkpoint(&dir.join("checkpoint.rave"), self, None)?;
        }
        Ok(rows)
    }

    /// Per-parameter value and gradient magnitudes, for failure reports.
    pub fn diagnostics(&self) -> String {
        let mut s = String::new();
        for e in self.model.params.entries() {
            let gmax = e
                .grad
                .as_ref()
                .map(|g| g.iter().fold(0.0f32, |m, v| m.max(v.abs())))
                .unwrap_or(0.0);
            let _ = writeln!(s, "{} |w|max={} |g|max={}", e.name, e.value.max_abs(), gmax);
        }
        s
    }

    pub fn parameter_groups(&self) -> [(&'static str, Vec<ParamId>); 3] {
        [
            ("encoder", self.model.encoder_params()),
            ("decoder", self.model.decoder_params()),
            ("discriminator", self.model.discriminator_params()),
        ]
    }
}

fn reparameterized(
    g: &mut Graph<f32>,
    mean: crate::autograd::Var,
    logvar: crate::autograd::Var,
    eps: &Tensor<f32>,
) -> Result<crate::autograd::Var> {
    let half = g.scale(logvar, 0.5);
    let std = g.exp(half);
    let e = g.constant(eps.clone());
    let n = g.mul(std, e)?;
    g.add(mean, n)
}

/// Multiscale spectral distance between a clip (delayed by the model latency)
/// and its reconstruction from the posterior mode.
pub fn reconstruction_distance(
    model: &Rave,
    clip: &Waveform,
    cfg: &SpectralConfig,
    noise_seed: u64,
) -> Result<f64> {
    let (mean, _) = model.encode(&[&clip.samples])?;
    let y = model.decode(&mean, noise_seed)?;
    let x = Tensor::from_vec(&[1, 1, clip.len()], clip.samples.clone())?;
    let target = delayed(&x, model.latency());
    spectral_distance(
        &Waveform::new(target.into_data(), clip.sample_rate)?,
        &Waveform::new(y.into_data(), clip.sample_rate)?,
        cfg,
    )
}

/// Mean [`reconstruction_distance`] over clips.
pub fn mean_reconstruction_distance(
    model: &Rave,
    clips: &[Waveform],
    cfg: &SpectralConfig,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::Data("no clips to evaluate".into()));
    }
    let mut total = 0.0;
    for (i, c) in clips.iter().enumerate() {
        total += reconstruction_distance(model, c, cfg, i as u64)?;
    }
    Ok(total / clips.len() as f64)
}
