use rave_core::dsp::{SpectralConfig, Waveform};
use rave_core::model::Rave;
use rave_core::train::{Augment, Dataset, TrainConfig};

use super::grad_cases::composed;

pub fn tiny_model(seed: u64) -> Rave {
    composed::tiny_model(seed)
}

/// Decaying sines at a few pitches.
pub fn sine_clips(sample_rate: u32, n: usize, len: usize) -> Vec<Waveform> {
    (0..n)
        .map(|i| {
            let f = 110.0 * (1.0 + i as f64 * 0.37);
            let s = (0..len)
                .map(|t| {
                    let t = t as f64 / sample_rate as f64;
                    (0.6 * (2.0 * std::f64::consts::PI * f * t).sin() * (-1.5 * t).exp()) as f32
                })
                .collect();
            Waveform::new(s, sample_rate).unwrap()
        })
        .collect()
}

pub fn tiny_dataset() -> Dataset {
    Dataset::new(sine_clips(8000, 4, 2048)).unwrap()
}

pub fn tiny_train_config(stage1: usize, stage2: usize) -> TrainConfig {
    let mut c = TrainConfig::desk(8000).with_stage1_steps(stage1);
    c.stage2_steps = stage2;
    c.batch_size = 2;
    c.crop = 512;
    c.spectral = SpectralConfig {
        scales: vec![128, 64, 32],
        ..SpectralConfig::default()
    };
    c.augment = Augment::default();
    c.adam.lr = 1e-3;
    c.seed = 11;
    c
}
