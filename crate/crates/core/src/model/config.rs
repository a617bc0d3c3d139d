use crate::error::{config_err, Result};
use crate::pqmf::default_taps;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub sample_rate: u32,
    pub bands: usize,
    pub pqmf_taps: usize,
    /// Input width of each strided encoder block; the last block doubles its width.
    pub encoder_hidden: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub latent_dim: usize,
    /// Width after the decoder input convolution and after every upsampling stage.
    pub decoder_hidden: Vec<usize>,
    pub decoder_ratios: Vec<usize>,
    pub residual_dilations: Vec<usize>,
    pub noise_bands: usize,
    /// Strides of the noise-head convolutions; their product is the noise frame.
    pub noise_ratios: Vec<usize>,
    pub discriminator_scales: usize,
    /// Width after the discriminator input layer and after each strided layer.
    pub discriminator_channels: Vec<usize>,
    pub discriminator_kernel: usize,
    pub seed: u64,
}

pub const LEAKY_SLOPE: f64 = 0.2;
pub const LOGVAR_MIN: f64 = -14.0;
pub const LOGVAR_MAX: f64 = 6.0;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const DISCRIMINATOR_STRIDE: usize = 4;

impl ModelConfig {
    /// 48 kHz, 16 bands, 128-dimensional latent.
    pub fn studio() -> Self {
        Self {
            sample_rate: 48_000,
            bands: 16,
            pqmf_taps: default_taps(16),
            encoder_hidden: vec![64, 128, 256, 512],
            encoder_strides: vec![4, 4, 4, 2],
            latent_dim: 128,
            decoder_hidden: vec![1024, 512, 256, 128, 64],
            decoder_ratios: vec![2, 4, 4, 4],
            residual_dilations: vec![1, 3, 9],
            noise_bands: 16,
            noise_ratios: vec![4, 4, 4],
            discriminator_scales: 3,
            discriminator_channels: vec![16, 64, 256, 1024, 1024],
            discriminator_kernel: 41,
            seed: 0,
        }
    }

    /// 16 kHz desk-scale preset with the same structure.
    pub fn desk() -> Self {
        Self {
            sample_rate: 16_000,
            bands: 8,
            pqmf_taps: default_taps(8),
            encoder_hidden: vec![32, 64, 128],
            encoder_strides: vec![4, 4, 2],
            latent_dim: 32,
            decoder_hidden: vec![256, 128, 64, 32],
            decoder_ratios: vec![2, 4, 4],
            residual_dilations: vec![1, 3, 9],
            noise_bands: 16,
            noise_ratios: vec![4, 4, 2],
            discriminator_scales: 3,
            discriminator_channels: vec![16, 32, 64, 128, 128],
            discriminator_kernel: 21,
            seed: 0,
        }
    }

    /// Single-band variant for the throughput ablation: no filter bank, and the
    /// first upsampling ratio (and first encoder stride) absorbs the band count so
    /// the downsampling factor is unchanged.
    pub fn without_multiband(&self) -> Self {
        let mut c = self.clone();
        if let Some(r) = c.decoder_ratios.first_mut() {
            *r *= self.bands;
        }
        if let Some(s) = c.encoder_strides.first_mut() {
            *s *= self.bands;
        }
        c.bands = 1;
        c.pqmf_taps = 1;
        c
    }

    pub fn total_downsampling(&self) -> usize {
        self.bands * self.encoder_strides.iter().product::<usize>()
    }

    /// Band samples per latent frame.
    pub fn band_hop(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn latent_rate(&self) -> f64 {
        self.sample_rate as f64 / self.total_downsampling() as f64
    }

    pub fn noise_frame(&self) -> usize {
        self.noise_ratios.iter().product()
    }

    pub fn last_hidden(&self) -> usize {
        *self.decoder_hidden.last().expect("validated")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: &[usize]| -> Result<()> {
            if v.is_empty() || v.contains(&0) {
                return Err(config_err!(
                    "{name} must be a nonempty list of positive integers"
                ));
            }
            Ok(())
        };
        positive("encoder_hidden", &self.encoder_hidden)?;
        positive("encoder_strides", &self.encoder_strides)?;
        positive("decoder_hidden", &self.decoder_hidden)?;
        positive("decoder_ratios", &self.decoder_ratios)?;
        positive("residual_dilations", &self.residual_dilations)?;
        positive("noise_ratios", &self.noise_ratios)?;
        positive("discriminator_channels", &self.discriminator_channels)?;
        if self.sample_rate == 0 || self.bands == 0 || self.latent_dim == 0 || self.noise_bands == 0
        {
            return Err(config_err!(
                "sample_rate, bands, latent_dim and noise_bands must be positive"
            ));
        }
        if self.encoder_hidden.len() != self.encoder_strides.len() {
            return Err(config_err!(
                "encoder_hidden has {} entries but encoder_strides has {}",
                self.encoder_hidden.len(),
                self.encoder_strides.len()
            ));
        }
        if self.decoder_hidden.len() != self.decoder_ratios.len() + 1 {
            return Err(config_err!(
                "decoder_hidden needs one more entry than decoder_ratios"
            ));
        }
        let up: usize = self.decoder_ratios.iter().product();
        if up != self.band_hop() {
            return Err(config_err!(
                "decoder upsampling {up} does not match encoder downsampling {}",
                self.band_hop()
            ));
        }
        if !self.band_hop().is_multiple_of(self.noise_frame()) {
            return Err(config_err!(
                "noise frame {} must divide the {} band samples per latent frame",
                self.noise_frame(),
                self.band_hop()
            ));
        }
        if self.bands > 1 && self.pqmf_taps < 8 * self.bands {
            return Err(config_err!("pqmf_taps must be at least 8 x bands"));
        }
        if self.discriminator_scales == 0 || self.discriminator_channels.len() < 2 {
            return Err(config_err!(
                "discriminator needs at least one scale and two widths"
            ));
        }
        if self.discriminator_kernel.is_multiple_of(2) {
            return Err(config_err!("discriminator_kernel must be odd"));
        }
        for w in self.discriminator_channels.windows(2) {
            let groups = (w[0] / 4).max(1);
            if w[0] % groups != 0 || w[1] % groups != 0 {
                return Err(config_err!(
                    "discriminator widths {} -> {} not divisible into groups",
                    w[0],
                    w[1]
                ));
            }
        }
        Ok(())
    }
}
