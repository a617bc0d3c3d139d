use rand::Rng;

use super::config::{ModelConfig, LEAKY_SLOPE};
use super::layers::{Conv, Ctx, Upsample};
use crate::autograd::{ParamId, ParamStore, Real, Tensor, Var};
use crate::error::Result;

pub const DECODER_INPUT_KERNEL: usize = 7;
pub const RESIDUAL_KERNEL: usize = 3;
pub const WAVE_KERNEL: usize = 7;
pub const LOUDNESS_KERNEL: usize = 3;
/// Offset applied to the noise-head output before the sigmoid, so a freshly
/// initialised decoder starts almost noise-free.
pub const NOISE_BIAS: f64 = -5.0;

#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub dilated: Conv,
    pub pointwise: Conv,
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub upsample: Upsample,
    pub units: Vec<ResidualUnit>,
}

/// Latent frames to a multiband signal: upsampling stages followed by a
/// waveform head gated by a loudness head, plus a filtered-noise head.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub input: Conv,
    pub stages: Vec<Stage>,
    pub wave: Conv,
    pub loudness: Conv,
    pub noise: Vec<Conv>,
    pub bands: usize,
    pub noise_bands: usize,
    pub noise_frame: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    /// Sum of the gated waveform and the noise, `[B, M, T]`.
    pub bands: Var,
    /// `tanh(wave) * sigmoid(loudness)`.
    pub harmonic: Var,
    pub noise: Var,
    /// Noise filter amplitudes `[B, M * noise_bands, T / noise_frame]`.
    pub noise_amplitudes: Var,
}

impl Decoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let h = &cfg.decoder_hidden;
        let input = Conv::causal(
            store,
            "decoder.input",
            (cfg.latent_dim, h[0]),
            DECODER_INPUT_KERNEL,
            1,
            1,
            rng,
        );
        let mut stages = Vec::new();
        for (i, &r) in cfg.decoder_ratios.iter().enumerate() {
            let name = format!("decoder.stage{i}");
            let upsample = Upsample::new(store, &format!("{name}.up"), h[i], h[i + 1], r, rng);
            let units = cfg
                .residual_dilations
                .iter()
                .enumerate()
                .map(|(j, &d)| ResidualUnit {
                    dilated: Conv::causal(
                        store,
                        &format!("{name}.res{j}.a"),
                        (h[i + 1], h[i + 1]),
                        RESIDUAL_KERNEL,
                        1,
                        d,
                        rng,
                    ),
                    pointwise: Conv::causal(
                        store,
                        &format!("{name}.res{j}.b"),
                        (h[i + 1], h[i + 1]),
                        RESIDUAL_KERNEL,
                        1,
                        1,
                        rng,
                    ),
                })
                .collect();
            stages.push(Stage { upsample, units });
        }
        let last = cfg.last_hidden();
        let wave = Conv::causal(
            store,
            "decoder.wave",
            (last, cfg.bands),
            WAVE_KERNEL,
            1,
            1,
            rng,
        );
        let loudness = Conv::causal(
            store,
            "decoder.loudness",
            (last, 1),
            LOUDNESS_KERNEL,
            1,
            1,
            rng,
        );
        let n = cfg.noise_ratios.len();
        let noise = cfg
            .noise_ratios
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                let cout = if i + 1 == n {
                    cfg.bands * cfg.noise_bands
                } else {
                    last
                };
                Conv::causal(
                    store,
                    &format!("decoder.noise{i}"),
                    (last, cout),
                    2 * r + 1,
                    r,
                    1,
                    rng,
                )
            })
            .collect();
        Self {
            input,
            stages,
            wave,
            loudness,
            noise,
            bands: cfg.bands,
            noise_bands: cfg.noise_bands,
            noise_frame: cfg.noise_frame(),
        }
    }

    /// `noise` is white excitation shaped `[B, M, T]` with `T` the band length.
    pub fn forward<T: Real>(
        &self,
        cx: &mut Ctx<'_, T>,
        z: Var,
        noise: Tensor<T>,
    ) -> Result<DecoderVars> {
        let mut h = self.input.forward(cx, z)?;
        for stage in &self.stages {
            h = cx.g.leaky_relu(h, LEAKY_SLOPE);
            h = stage.upsample.forward(cx, h)?;
            for unit in &stage.units {
                let a = cx.g.leaky_relu(h, LEAKY_SLOPE);
                let a = unit.dilated.forward(cx, a)?;
                let a = cx.g.leaky_relu(a, LEAKY_SLOPE);
                let a = unit.pointwise.forward(cx, a)?;
                h = cx.g.add(h, a)?;
            }
        }
        let h = cx.g.leaky_relu(h, LEAKY_SLOPE);
        let wave = self.wave.forward(cx, h)?;
        let wave = cx.g.tanh(wave);
        let loud = self.loudness.forward(cx, h)?;
        let loud = cx.g.sigmoid(loud);
        let harmonic = cx.g.mul_channel(wave, loud)?;

        let mut a = h;
        for (i, conv) in self.noise.iter().enumerate() {
            if i > 0 {
                a = cx.g.leaky_relu(a, LEAKY_SLOPE);
            }
            a = conv.forward(cx, a)?;
        }
        let a = cx.g.offset(a, T::of(NOISE_BIAS));
        let amplitudes = cx.g.sigmoid(a);
        let noise =
            cx.g.filtered_noise(amplitudes, noise, self.noise_bands, self.noise_frame, false)?;
        let bands = cx.g.add(harmonic, noise)?;
        Ok(DecoderVars {
            bands,
            harmonic,
            noise,
            noise_amplitudes: amplitudes,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.input.params();
        for s in &self.stages {
            p.extend(s.upsample.params());
            for u in &s.units {
                p.extend(u.dilated.params());
                p.extend(u.pointwise.params());
            }
        }
        p.extend(self.wave.params());
        p.extend(self.loudness.params());
        for c in &self.noise {
            p.extend(c.params());
        }
        p
    }
}
