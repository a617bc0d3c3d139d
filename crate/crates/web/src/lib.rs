//! Browser bindings: PQMF band responses, the multiscale spectral distance
//! between two tones, and the fidelity/rank curve of a singular-value profile.
//!
//! The exports are thin wrappers over plain functions, which are what the
//! native tests call.

use rave_core::dsp::{spectral_distance, SpectralConfig, Waveform};
use rave_core::latent::rank_for_fidelity;
use rave_core::pqmf::PqmfBank;
use rave_core::Result;
use wasm_bindgen::prelude::*;

/// Magnitude response in dB of every analysis filter, band-major, at
/// `points` frequencies from 0 to Nyquist.
pub fn band_responses(bands: usize, taps: usize, points: usize) -> Result<Vec<f32>> {
    let bank = PqmfBank::design(bands, taps)?;
    let mut out = Vec::with_capacity(bands * points);
    for h in bank.filters() {
        for p in 0..points {
            let w = std::f64::consts::PI * p as f64 / (points.max(2) - 1) as f64;
            let (re, im) = h.iter().enumerate().fold((0.0, 0.0), |(re, im), (n, &c)| {
                let a = w * n as f64;
                (re + c * a.cos(), im - c * a.sin())
            });
            let mag = (re * re + im * im).sqrt();
            out.push((20.0 * mag.max(1e-12).log10()) as f32);
        }
    }
    Ok(out)
}

/// One second of a decaying tone with four harmonics.
pub fn tone(f0: f64, sample_rate: u32) -> Waveform {
    let sr = sample_rate as f64;
    let samples = (0..sample_rate as usize)
        .map(|i| {
            let t = i as f64 / sr;
            let s: f64 = (1..=4)
                .filter(|&k| k as f64 * f0 < 0.45 * sr)
                .map(|k| (2.0 * std::f64::consts::PI * k as f64 * f0 * t).sin() / k as f64)
                .sum();
            (0.4 * s * (-2.0 * t).exp()) as f32
        })
        .collect();
    Waveform {
        samples,
        sample_rate,
    }
}

pub fn tone_distance(f0_a: f64, f0_b: f64, sample_rate: u32) -> Result<f64> {
    let cfg = SpectralConfig::for_sample_rate(sample_rate);
    spectral_distance(&tone(f0_a, sample_rate), &tone(f0_b, sample_rate), &cfg)
}

/// `r_f` at `points` evenly spaced fidelities in [0, 1].
pub fn fidelity_curve(singular_values: &[f64], points: usize) -> Result<Vec<u32>> {
    (0..points)
        .map(|i| {
            let f = i as f64 / (points.max(2) - 1) as f64;
            rank_for_fidelity(singular_values, f.min(1.0)).map(|r| r as u32)
        })
        .collect()
}

fn js(e: rave_core::Error) -> JsError {
    JsError::new(&format!("{}: {e}", e.class()))
}

#[wasm_bindgen(js_name = bandResponses)]
pub fn band_responses_js(
    bands: usize,
    taps: usize,
    points: usize,
) -> std::result::Result<Vec<f32>, JsError> {
    band_responses(bands, taps, points).map_err(js)
}

#[wasm_bindgen(js_name = toneDistance)]
pub fn tone_distance_js(
    f0_a: f64,
    f0_b: f64,
    sample_rate: u32,
) -> std::result::Result<f64, JsError> {
    tone_distance(f0_a, f0_b, sample_rate).map_err(js)
}

#[wasm_bindgen(js_name = fidelityCurve)]
pub fn fidelity_curve_js(
    singular_values: &[f64],
    points: usize,
) -> std::result::Result<Vec<u32>, JsError> {
    fidelity_curve(singular_values, points).map_err(js)
}
