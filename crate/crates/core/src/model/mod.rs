//! Encoder, decoder with noise synthesis, and multi-scale discriminator over a
//! PQMF front end. Every layer of the encoder and decoder is causal.

mod config;
mod decoder;
mod discriminator;
mod encoder;
mod layers;

pub use config::*;
pub use decoder::{Decoder, DecoderVars, ResidualUnit, Stage, NOISE_BIAS};
pub use discriminator::{Discriminator, DiscriminatorVars, ScaleDiscriminator};
pub use encoder::{Encoder, EncoderBlock, PosteriorVars};
pub use layers::{update_running_stats, BatchNorm, BatchStats, Conv, Ctx, Mode, Upsample};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvSpec, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{shape_err, Result};
use crate::pqmf::PqmfBank;

/// Uniform white excitation in `[-1, 1)` for noise frames
/// `[frame_start, frame_start + frames)`. Every frame has its own ChaCha stream,
/// so any block partition of a signal sees the same noise.
pub fn noise_block<T: Real>(
    seed: u64,
    batch: usize,
    bands: usize,
    frame_start: usize,
    frames: usize,
    frame_len: usize,
) -> Tensor<T> {
    let t = frames * frame_len;
    let mut data = vec![T::zero(); batch * bands * t];
    for f in 0..frames {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((frame_start + f) as u64);
        for b in 0..batch {
            for m in 0..bands {
                let row = (b * bands + m) * t + f * frame_len;
                for v in &mut data[row..row + frame_len] {
                    *v = T::of(rng.gen_range(-1.0..1.0));
                }
            }
        }
    }
    Tensor::from_vec(&[batch, bands, t], data).expect("sized")
}

/// A complete model: configuration, filter bank and parameters.
#[derive(Debug, Clone)]
pub struct Rave {
    pub config: ModelConfig,
    pub pqmf: PqmfBank,
    pub params: ParamStore<f32>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    pqmf_kernel: Vec<f64>,
}

impl Rave {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let pqmf = PqmfBank::design(config.bands, config.pqmf_taps)?;
        Self::with_bank(config, pqmf)
    }

    /// Skips the filter design, reusing a bank built for the same band count.
    pub fn with_bank(config: ModelConfig, pqmf: PqmfBank) -> Result<Self> {
        config.validate()?;
        if pqmf.bands() != config.bands || pqmf.filter_len() != config.pqmf_taps {
            return Err(crate::error::Error::Config(format!(
                "filter bank has {} bands and {} taps, config wants {} and {}",
                pqmf.bands(),
                pqmf.filter_len(),
                config.bands,
                config.pqmf_taps
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config, &mut rng);
        let decoder = Decoder::new(&mut params, &config, &mut rng);
        let discriminator = Discriminator::new(&mut params, &config, &mut rng);
        let pqmf_kernel = pqmf.synthesis_kernel();
        Ok(Self {
            config,
            pqmf,
            params,
            encoder,
            decoder,
            discriminator,
            pqmf_kernel,
        })
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.params()
    }

    pub fn decoder_params(&self) -> Vec<ParamId> {
        self.decoder.params()
    }

    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.discriminator.params()
    }

    /// Trainable scalars of the encoder and decoder.
    pub fn parameter_count(&self) -> usize {
        let mut ids = self.encoder_params();
        ids.extend(self.decoder_params());
        self.params.count(&ids)
    }

    /// Round-trip latency of the filter bank, in samples.
    pub fn latency(&self) -> usize {
        self.pqmf.group_delay()
    }

    fn pqmf_weight<T: Real>(&self, g: &mut Graph<T>) -> Var {
        let t = Tensor::from_f64(
            &[self.config.bands, 1, self.pqmf.filter_len()],
            &self.pqmf_kernel,
        )
        .expect("sized");
        g.constant(t)
    }

    /// Audio `[B, 1, N]` to bands `[B, M, N / M]` (causal analysis).
    pub fn analysis<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = self.pqmf_weight(g);
        let l = self.pqmf.filter_len();
        let spec = ConvSpec::causal(l, self.config.bands, 1);
        g.conv1d(x, w, None, spec)
    }

    /// Bands `[B, M, T]` to audio `[B, 1, M * T]` (causal synthesis).
    pub fn synthesis<T: Real>(&self, g: &mut Graph<T>, bands: Var) -> Result<Var> {
        let w = self.pqmf_weight(g);
        let t = *g.shape(bands).last().unwrap_or(&0);
        let m = self.config.bands;
        g.conv_transpose1d(bands, w, None, m, 0, t * m)
    }

    pub fn check_aligned(&self, len: usize) -> Result<()> {
        let f = self.config.total_downsampling();
        if len == 0 || !len.is_multiple_of(f) {
            return Err(shape_err!(
                "input length {len} is not a positive multiple of {f}"
            ));
        }
        Ok(())
    }

    /// Audio `[B, 1, N]` to the posterior over `[B, latent_dim, N / factor]`.
    pub fn encode_vars<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<PosteriorVars> {
        self.check_aligned(*cx.g.shape(x).last().unwrap_or(&0))?;
        let bands = self.analysis(cx.g, x)?;
        self.encoder.forward(cx, bands)
    }

    /// Latents `[B, latent_dim, F]` to the decoder outputs and audio `[B, 1, F * factor]`.
    pub fn decode_vars<T: Real>(
        &self,
        cx: &mut Ctx<'_, T>,
        z: Var,
        noise_seed: u64,
    ) -> Result<(DecoderVars, Var)> {
        let (b, d, frames) = cx.g.value(z).dims3()?;
        if d != self.config.latent_dim {
            return Err(shape_err!(
                "latent has {d} channels, model expects {}",
                self.config.latent_dim
            ));
        }
        let nf = self.config.noise_frame();
        let band_len = frames * self.config.band_hop();
        let noise = noise_block(noise_seed, b, self.config.bands, 0, band_len / nf, nf);
        let out = self.decoder.forward(cx, z, noise)?;
        let audio = self.synthesis(cx.g, out.bands)?;
        Ok((out, audio))
    }

    /// Eval-mode posterior `(mean, logvar)` of audio clips of equal length.
    pub fn encode(&self, clips: &[&[f32]]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let n = clips.first().map_or(0, |c| c.len());
        if clips.iter().any(|c| c.len() != n) {
            return Err(shape_err!("clips in a batch must have equal length"));
        }
        let data: Vec<f32> = clips.iter().flat_map(|c| c.iter().copied()).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[clips.len(), 1, n], data)?);
        let mut cx = Ctx::new(&mut g, &self.params, Mode::Eval).frozen(true);
        let post = self.encode_vars(&mut cx, x)?;
        Ok((g.value(post.mean).clone(), g.value(post.logvar).clone()))
    }

    /// Decodes latents `[B, latent_dim, F]` to audio `[B, 1, F * factor]`.
    pub fn decode(&self, z: &Tensor<f32>, noise_seed: u64) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let zv = g.constant(z.clone());
        let mut cx = Ctx::new(&mut g, &self.params, Mode::Eval).frozen(true);
        let (_, audio) = self.decode_vars(&mut cx, zv, noise_seed)?;
        Ok(g.value(audio).clone())
    }
}

/// Mean over scales and layers of the mean absolute feature difference.
pub fn feature_matching<T: Real>(
    g: &mut Graph<T>,
    real: &DiscriminatorVars,
    fake: &DiscriminatorVars,
) -> Result<Var> {
    if real.features.len() != fake.features.len()
        || real
            .features
            .iter()
            .zip(&fake.features)
            .any(|(a, b)| a.len() != b.len())
    {
        return Err(shape_err!("discriminator outputs have different structure"));
    }
    let mut terms = Vec::new();
    for (rs, fs) in real.features.iter().zip(&fake.features) {
        for (&r, &f) in rs.iter().zip(fs) {
            let d = g.sub(f, r)?;
            let d = g.abs(d);
            terms.push(g.mean(d));
        }
    }
    mean_of(g, &terms)
}

/// Average of scalar nodes.
pub fn mean_of<T: Real>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let (first, rest) = terms
        .split_first()
        .ok_or_else(|| shape_err!("no terms to average"))?;
    let mut acc = *first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, T::of(1.0 / terms.len() as f64)))
}
