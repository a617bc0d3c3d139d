use rand::Rng;

use crate::autograd::Tensor;
use crate::dsp::{dequantize, random_allpass, random_crop, Waveform};
use crate::error::{Error, Result};

/// Training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augment {
    /// Probability of passing a crop through a random allpass cascade.
    pub allpass_prob: f64,
    pub dequantize_bits: Option<u32>,
}

impl Default for Augment {
    fn default() -> Self {
        Self {
            allpass_prob: 0.5,
            dequantize_bits: Some(16),
        }
    }
}

impl Augment {
    pub fn none() -> Self {
        Self {
            allpass_prob: 0.0,
            dequantize_bits: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub clips: Vec<Waveform>,
    pub sample_rate: u32,
}

impl Dataset {
    pub fn new(clips: Vec<Waveform>) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Data("dataset is empty".into()))?;
        let sample_rate = first.sample_rate;
        if let Some(c) = clips.iter().find(|c| c.sample_rate != sample_rate) {
            return Err(Error::Data(format!(
                "mixed sample rates in dataset: {} and {}",
                sample_rate, c.sample_rate
            )));
        }
        Ok(Self { clips, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn shortest(&self) -> usize {
        self.clips.iter().map(Waveform::len).min().unwrap_or(0)
    }

    /// Draws `batch` augmented random crops as a `[batch, 1, crop]` tensor.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        batch: usize,
        crop: usize,
        augment: &Augment,
        rng: &mut R,
    ) -> Result<Tensor<f32>> {
        if self.shortest() < crop {
            return Err(Error::Data(format!(
                "clips must hold at least {crop} samples, the shortest has {}",
                self.shortest()
            )));
        }
        let mut data = Vec::with_capacity(batch * crop);
        for _ in 0..batch {
            let clip = &self.clips[rng.gen_range(0..self.clips.len())];
            let mut x = random_crop(clip, crop, rng)?;
            if augment.allpass_prob > 0.0 && rng.gen_bool(augment.allpass_prob) {
                x = random_allpass(&x, rng);
            }
            if let Some(bits) = augment.dequantize_bits {
                x = dequantize(&x, bits, rng)?;
            }
            data.extend_from_slice(&x.samples);
        }
        Tensor::from_vec(&[batch, 1, crop], data)
    }
}

/// `x` delayed by `delay` samples, zero-filled, same length.
pub fn delayed(x: &Tensor<f32>, delay: usize) -> Tensor<f32> {
    let n = *x.shape().last().unwrap_or(&0);
    let mut out = Tensor::zeros(x.shape());
    for (dst, src) in out
        .data_mut()
        .chunks_mut(n.max(1))
        .zip(x.data().chunks(n.max(1)))
    {
        if delay < n {
            dst[delay..].copy_from_slice(&src[..n - delay]);
        }
    }
    out
}
