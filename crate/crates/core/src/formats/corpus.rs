//! Seeded synthetic corpus: notes from 1 to `max_voices` harmonic voices with
//! percussive envelopes over an optional low-passed noise floor.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::corpus_to_kv;
use super::kv::KeyValues;
use super::wav::{write_wav, WavFormat};
use crate::dsp::Waveform;
use crate::error::{config_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub seed: u64,
    pub n_clips: usize,
    /// Seconds per clip.
    pub duration: f64,
    pub sample_rate: u32,
    pub f0_min: f64,
    pub f0_max: f64,
    pub max_voices: usize,
    /// Partials at or above this frequency (Hz) are dropped.
    pub harmonic_cap: f64,
    /// Peak amplitude of the noise floor; 0 disables it.
    pub noise_floor: f64,
}

const MAX_PARTIALS: usize = 4;
const NOTE_MIN_S: f64 = 0.25;
const NOTE_MAX_S: f64 = 1.0;
const ATTACK_S: f64 = 0.01;
const PEAK: f64 = 0.8;
const NOISE_CUTOFF_HZ: f64 = 1000.0;

impl CorpusSpec {
    pub fn desk(sample_rate: u32) -> Self {
        Self {
            seed: 0,
            n_clips: 64,
            duration: 2.0,
            sample_rate,
            f0_min: 80.0,
            f0_max: 2000.0,
            max_voices: 4,
            harmonic_cap: 4000.0,
            noise_floor: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0
            || self.duration.is_nan()
            || self.duration <= 0.0
            || self.sample_rate == 0
        {
            return Err(config_err!(
                "corpus needs clips, a positive duration and sample rate"
            ));
        }
        if !(self.f0_min > 0.0 && self.f0_min <= self.f0_max) {
            return Err(config_err!(
                "corpus f0 range [{}, {}] is invalid",
                self.f0_min,
                self.f0_max
            ));
        }
        if self.max_voices == 0 {
            return Err(config_err!("corpus needs at least one voice"));
        }
        if self.noise_floor.is_nan() || self.noise_floor < 0.0 {
            return Err(config_err!("noise floor must be nonnegative"));
        }
        Ok(())
    }

    pub fn clip_len(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    pub fn render(&self) -> String {
        let mut kv = KeyValues::default();
        corpus_to_kv(self, &mut kv, "");
        kv.render()
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.render().as_bytes()))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Clip `index` of the corpus; each clip has its own random stream.
pub fn synthesize_clip(spec: &CorpusSpec, index: usize) -> Result<Waveform> {
    spec.validate()?;
    let sr = spec.sample_rate as f64;
    let n = spec.clip_len();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let cap = spec.harmonic_cap.min(0.45 * sr);
    let mut out = vec![0.0f64; n];
    let voices = rng.gen_range(1..=spec.max_voices);
    for _ in 0..voices {
        let gain = rng.gen_range(0.3..1.0);
        let mut start = 0usize;
        while start < n {
            let len = ((rng.gen_range(NOTE_MIN_S..NOTE_MAX_S) * sr) as usize).max(1);
            let f0 = (rng.gen_range(spec.f0_min.ln()..=spec.f0_max.ln())).exp();
            let decay = rng.gen_range(2.0..8.0);
            let partials = rng.gen_range(1..=MAX_PARTIALS);
            let phase: f64 = rng.gen_range(0.0..TAU);
            for (i, o) in out[start..(start + len).min(n)].iter_mut().enumerate() {
                let t = i as f64 / sr;
                let env = (t / ATTACK_S).min(1.0) * (-decay * t).exp();
                let mut v = 0.0;
                for k in 1..=partials {
                    let f = f0 * k as f64;
                    if f < cap {
                        v += (TAU * f * t + phase * k as f64).sin() / k as f64;
                    }
                }
                *o += gain * env * v;
            }
            start += len;
        }
    }
    if spec.noise_floor > 0.0 {
        let a = (-TAU * NOISE_CUTOFF_HZ / sr).exp();
        // Restores the variance the one-pole smoother removes.
        let unit = ((1.0 + a) / (1.0 - a)).sqrt();
        let mut state = 0.0;
        for o in out.iter_mut() {
            let w: f64 = rng.gen_range(-1.0..1.0);
            state = a * state + (1.0 - a) * w;
            *o += spec.noise_floor * unit * state;
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = if peak > 0.0 { PEAK / peak } else { 0.0 };
    Waveform::new(
        out.iter().map(|v| (v * norm) as f32).collect(),
        spec.sample_rate,
    )
}

pub fn synthesize_corpus(spec: &CorpusSpec) -> Result<Vec<Waveform>> {
    (0..spec.n_clips)
        .map(|i| synthesize_clip(spec, i))
        .collect()
}

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn clip_name(index: usize) -> String {
    format!("clip_{index:05}.wav")
}

/// Writes the clips as float32 WAV files plus a manifest holding the corpus spec,
/// its hash and the hash of every file. Returns the manifest text.
pub fn write_corpus(spec: &CorpusSpec, dir: &Path) -> Result<String> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = spec.render();
    manifest.push_str(&format!("spec_sha256={}\n", spec.hash()));
    for i in 0..spec.n_clips {
        let path = dir.join(clip_name(i));
        write_wav(&path, &synthesize_clip(spec, i)?, WavFormat::Float32)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!(
            "file.{}={}\n",
            clip_name(i),
            hex(&Sha256::digest(&bytes))
        ));
    }
    let path = dir.join(MANIFEST_NAME);
    std::fs::write(&path, &manifest).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
