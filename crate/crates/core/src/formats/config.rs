//! Typed configuration keys.
//!
//! Model keys (prefix `model.`): `sample_rate`, `bands`, `pqmf_taps`,
//! `encoder_hidden`, `encoder_strides`, `latent_dim`, `decoder_hidden`,
//! `decoder_ratios`, `residual_dilations`, `noise_bands`, `noise_ratios`,
//! `discriminator_scales`, `discriminator_channels`, `discriminator_kernel`,
//! `seed`. Lists are comma separated.
//!
//! Training keys (prefix `train.`): `beta`, `beta_warmup_steps`,
//! `stage1_steps`, `stage2_steps`, `batch_size`, `crop`, `lr`, `adam_beta1`,
//! `adam_beta2`, `adam_eps`, `seed`, `freeze_encoder_stage2`,
//! `weight_spectral`, `weight_feature_matching`, `weight_adversarial`,
//! `spectral_scales`, `spectral_epsilon`, `spectral_window` (`hann` or
//! `rectangular`), `allpass_prob`, `dequantize_bits` (`none` or 8..24),
//! `checkpoint_every`, `plateau_window` and `plateau_tolerance` (`none`
//! disables).
//!
//! Corpus keys (prefix `corpus.`): `seed`, `n_clips`, `duration`,
//! `sample_rate`, `f0_min`, `f0_max`, `max_voices`, `harmonic_cap`,
//! `noise_floor`.

use super::corpus::CorpusSpec;
use super::kv::{parse_bool, parse_list, parse_value, render_list, KeyValues};
use crate::dsp::WindowKind;
use crate::error::{config_err, Result};
use crate::model::ModelConfig;
use crate::train::{Plateau, TrainConfig};

pub fn model_to_kv(c: &ModelConfig, out: &mut KeyValues, prefix: &str) {
    let p = |k: &str| format!("{prefix}{k}");
    out.push(&p("sample_rate"), c.sample_rate);
    out.push(&p("bands"), c.bands);
    out.push(&p("pqmf_taps"), c.pqmf_taps);
    out.push(&p("encoder_hidden"), render_list(&c.encoder_hidden));
    out.push(&p("encoder_strides"), render_list(&c.encoder_strides));
    out.push(&p("latent_dim"), c.latent_dim);
    out.push(&p("decoder_hidden"), render_list(&c.decoder_hidden));
    out.push(&p("decoder_ratios"), render_list(&c.decoder_ratios));
    out.push(&p("residual_dilations"), render_list(&c.residual_dilations));
    out.push(&p("noise_bands"), c.noise_bands);
    out.push(&p("noise_ratios"), render_list(&c.noise_ratios));
    out.push(&p("discriminator_scales"), c.discriminator_scales);
    out.push(
        &p("discriminator_channels"),
        render_list(&c.discriminator_channels),
    );
    out.push(&p("discriminator_kernel"), c.discriminator_kernel);
    out.push(&p("seed"), c.seed);
}

/// Applies one model key; `Ok(false)` if the key is not a model key.
pub fn apply_model_key(c: &mut ModelConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "sample_rate" => c.sample_rate = parse_value(key, v)?,
        "bands" => c.bands = parse_value(key, v)?,
        "pqmf_taps" => c.pqmf_taps = parse_value(key, v)?,
        "encoder_hidden" => c.encoder_hidden = parse_list(key, v)?,
        "encoder_strides" => c.encoder_strides = parse_list(key, v)?,
        "latent_dim" => c.latent_dim = parse_value(key, v)?,
        "decoder_hidden" => c.decoder_hidden = parse_list(key, v)?,
        "decoder_ratios" => c.decoder_ratios = parse_list(key, v)?,
        "residual_dilations" => c.residual_dilations = parse_list(key, v)?,
        "noise_bands" => c.noise_bands = parse_value(key, v)?,
        "noise_ratios" => c.noise_ratios = parse_list(key, v)?,
        "discriminator_scales" => c.discriminator_scales = parse_value(key, v)?,
        "discriminator_channels" => c.discriminator_channels = parse_list(key, v)?,
        "discriminator_kernel" => c.discriminator_kernel = parse_value(key, v)?,
        "seed" => c.seed = parse_value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "none".to_string(), |x| x.to_string())
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        parse_value(key, v).map(Some)
    }
}

pub fn train_to_kv(c: &TrainConfig, out: &mut KeyValues, prefix: &str) {
    let p = |k: &str| format!("{prefix}{k}");
    out.push(&p("beta"), c.beta);
    out.push(&p("beta_warmup_steps"), c.beta_warmup_steps);
    out.push(&p("stage1_steps"), c.stage1_steps);
    out.push(&p("stage2_steps"), c.stage2_steps);
    out.push(&p("batch_size"), c.batch_size);
    out.push(&p("crop"), c.crop);
    out.push(&p("lr"), c.adam.lr);
    out.push(&p("adam_beta1"), c.adam.beta1);
    out.push(&p("adam_beta2"), c.adam.beta2);
    out.push(&p("adam_eps"), c.adam.eps);
    out.push(&p("seed"), c.seed);
    out.push(&p("freeze_encoder_stage2"), c.freeze_encoder_stage2);
    out.push(&p("weight_spectral"), c.weights.spectral);
    out.push(&p("weight_feature_matching"), c.weights.feature_matching);
    out.push(&p("weight_adversarial"), c.weights.adversarial);
    out.push(&p("spectral_scales"), render_list(&c.spectral.scales));
    out.push(&p("spectral_epsilon"), c.spectral.epsilon);
    let window = match c.spectral.window {
        WindowKind::Hann => "hann",
        WindowKind::Rectangular => "rectangular",
    };
    out.push(&p("spectral_window"), window);
    out.push(&p("allpass_prob"), c.augment.allpass_prob);
    out.push(&p("dequantize_bits"), opt(c.augment.dequantize_bits));
    out.push(&p("checkpoint_every"), c.checkpoint_every);
    out.push(&p("plateau_window"), opt(c.plateau.map(|p| p.window)));
    out.push(&p("plateau_tolerance"), opt(c.plateau.map(|p| p.tolerance)));
}

pub fn apply_train_key(c: &mut TrainConfig, key: &str, v: &str) -> Result<bool> {
    match key {
        "beta" => c.beta = parse_value(key, v)?,
        "beta_warmup_steps" => c.beta_warmup_steps = parse_value(key, v)?,
        "stage1_steps" => c.stage1_steps = parse_value(key, v)?,
        "stage2_steps" => c.stage2_steps = parse_value(key, v)?,
        "batch_size" => c.batch_size = parse_value(key, v)?,
        "crop" => c.crop = parse_value(key, v)?,
        "lr" => c.adam.lr = parse_value(key, v)?,
        "adam_beta1" => c.adam.beta1 = parse_value(key, v)?,
        "adam_beta2" => c.adam.beta2 = parse_value(key, v)?,
        "adam_eps" => c.adam.eps = parse_value(key, v)?,
        "seed" => c.seed = parse_value(key, v)?,
        "freeze_encoder_stage2" => c.freeze_encoder_stage2 = parse_bool(key, v)?,
        "weight_spectral" => c.weights.spectral = parse_value(key, v)?,
        "weight_feature_matching" => c.weights.feature_matching = parse_value(key, v)?,
        "weight_adversarial" => c.weights.adversarial = parse_value(key, v)?,
        "spectral_scales" => c.spectral.scales = parse_list(key, v)?,
        "spectral_epsilon" => c.spectral.epsilon = parse_value(key, v)?,
        "spectral_window" => {
            c.spectral.window = match v {
                "hann" => WindowKind::Hann,
                "rectangular" => WindowKind::Rectangular,
                _ => return Err(config_err!("invalid value {v:?} for {key}")),
            }
        }
        "allpass_prob" => c.augment.allpass_prob = parse_value(key, v)?,
        "dequantize_bits" => c.augment.dequantize_bits = parse_opt(key, v)?,
        "checkpoint_every" => c.checkpoint_every = parse_value(key, v)?,
        "plateau_window" => match parse_opt::<usize>(key, v)? {
            None => c.plateau = None,
            Some(window) => {
                let tolerance = c.plateau.map_or(0.01, |p| p.tolerance);
                c.plateau = Some(Plateau { window, tolerance });
            }
        },
        "plateau_tolerance" => match parse_opt::<f64>(key, v)? {
            None => c.plateau = None,
            Some(tolerance) => {
                let window = c.plateau.map_or(100, |p| p.window);
                c.plateau = Some(Plateau { window, tolerance });
            }
        },
        _ => return Ok(false),
    }
    Ok(true)
}

pub fn corpus_to_kv(c: &CorpusSpec, out: &mut KeyValues, prefix: &str) {
    let p = |k: &str| format!("{prefix}{k}");
    out.push(&p("seed"), c.seed);
    out.push(&p("n_clips"), c.n_clips);
    out.push(&p("duration"), c.duration);
    out.push(&p("sample_rate"), c.sample_rate);
    out.push(&p("f0_min"), c.f0_min);
    out.push(&p("f0_max"), c.f0_max);
    out.push(&p("max_voices"), c.max_voices);
    out.push(&p("harmonic_cap"), c.harmonic_cap);
    out.push(&p("noise_floor"), c.noise_floor);
}

pub fn apply_corpus_key(c: &mut CorpusSpec, key: &str, v: &str) -> Result<bool> {
    match key {
        "seed" => c.seed = parse_value(key, v)?,
        "n_clips" => c.n_clips = parse_value(key, v)?,
        "duration" => c.duration = parse_value(key, v)?,
        "sample_rate" => c.sample_rate = parse_value(key, v)?,
        "f0_min" => c.f0_min = parse_value(key, v)?,
        "f0_max" => c.f0_max = parse_value(key, v)?,
        "max_voices" => c.max_voices = parse_value(key, v)?,
        "harmonic_cap" => c.harmonic_cap = parse_value(key, v)?,
        "noise_floor" => c.noise_floor = parse_value(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    WavDir(std::path::PathBuf),
    Synthetic(CorpusSpec),
}

/// Contents of a training config file.
///
/// Top-level keys: `preset` (`desk` or `studio`, applied first), `data`
/// (folder of mono WAV files; otherwise the `corpus.` keys describe a
/// synthetic corpus), `holdout` (clips kept out of training, default 0).
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub holdout: usize,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let preset = kv.get("preset").unwrap_or("desk");
        let model = match preset {
            "desk" => ModelConfig::desk(),
            "studio" => ModelConfig::studio(),
            _ => return Err(config_err!("unknown preset {preset:?}")),
        };
        let mut cfg = Self::from_preset(model);
        let mut data = None;
        let mut corpus_keys = Vec::new();
        let mut unknown = Vec::new();
        for (k, v) in &kv.pairs {
            let handled = if let Some(rest) = k.strip_prefix("model.") {
                apply_model_key(&mut cfg.model, rest, v)?
            } else if let Some(rest) = k.strip_prefix("train.") {
                apply_train_key(&mut cfg.train, rest, v)?
            } else if let Some(rest) = k.strip_prefix("corpus.") {
                corpus_keys.push((rest, v.as_str()));
                let mut probe = CorpusSpec::desk(16_000);
                apply_corpus_key(&mut probe, rest, v)?
            } else {
                match k.as_str() {
                    "preset" => true,
                    "data" => {
                        data = Some(std::path::PathBuf::from(v));
                        true
                    }
                    "holdout" => {
                        cfg.holdout = parse_value(k, v)?;
                        true
                    }
                    _ => false,
                }
            };
            if !handled {
                unknown.push(k.clone());
            }
        }
        if !unknown.is_empty() {
            return Err(config_err!("unknown config keys: {}", unknown.join(", ")));
        }
        let corpus = (!corpus_keys.is_empty()).then(|| {
            let mut c = CorpusSpec::desk(cfg.model.sample_rate);
            for (k, v) in &corpus_keys {
                apply_corpus_key(&mut c, k, v).expect("checked above");
            }
            c
        });
        cfg.data = match (data, corpus) {
            (Some(_), Some(_)) => {
                return Err(config_err!("give either data or corpus.* keys, not both"))
            }
            (Some(p), None) => DataSource::WavDir(p),
            (None, Some(c)) => DataSource::Synthetic(c),
            (None, None) => DataSource::Synthetic(CorpusSpec::desk(cfg.model.sample_rate)),
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn from_preset(model: ModelConfig) -> Self {
        let train = TrainConfig::desk(model.sample_rate);
        let data = DataSource::Synthetic(CorpusSpec::desk(model.sample_rate));
        Self {
            model,
            train,
            data,
            holdout: 0,
        }
    }

    pub fn render(&self) -> String {
        let mut kv = KeyValues::default();
        match &self.data {
            DataSource::WavDir(p) => kv.push("data", p.display()),
            DataSource::Synthetic(c) => corpus_to_kv(c, &mut kv, "corpus."),
        }
        kv.push("holdout", self.holdout);
        model_to_kv(&self.model, &mut kv, "model.");
        train_to_kv(&self.train, &mut kv, "train.");
        kv.render()
    }
}
