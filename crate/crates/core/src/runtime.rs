//! Block-wise decoding with cached convolution state, the throughput
//! benchmark and timbre transfer.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{ConvSpec, Graph, ParamStore, Tensor, Var};
use crate::dsp::Waveform;
use crate::error::{config_err, shape_err, Error, Result};
use crate::latent::{kl_report_from_posteriors, KlReport};
use crate::model::{noise_block, Conv, Rave, Upsample, LEAKY_SLOPE, NOISE_BIAS};

/// Streaming decoder state: the left context of every causal layer, the
/// pending tail of the noise filters and the position in the stream.
#[derive(Debug, Clone)]
pub struct StreamState {
    noise_seed: u64,
    frames: usize,
    batch: Option<usize>,
    tails: Vec<Tensor<f32>>,
    noise_tail: Option<Tensor<f32>>,
    latent_dim: usize,
    bands: usize,
}

impl StreamState {
    pub fn new(model: &Rave, noise_seed: u64) -> Self {
        Self {
            noise_seed,
            frames: 0,
            batch: None,
            tails: Vec::new(),
            noise_tail: None,
            latent_dim: model.config.latent_dim,
            bands: model.config.bands,
        }
    }

    /// Back to the state of a fresh stream.
    pub fn reset(&mut self) {
        self.frames = 0;
        self.batch = None;
        self.tails.clear();
        self.noise_tail = None;
    }

    /// Latent frames decoded so far.
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Cached samples per layer, in evaluation order (empty before the first block).
    pub fn cache_sizes(&self) -> Vec<usize> {
        self.tails.iter().map(|t| t.shape()[2]).collect()
    }
}

/// Left context of a cached layer whose inputs advance `stride` per output.
pub fn transposed_context(kernel: usize, stride: usize) -> usize {
    kernel.div_ceil(stride) - 1
}

struct Cursor<'a> {
    g: Graph<f32>,
    store: &'a ParamStore<f32>,
    tails: &'a mut Vec<Tensor<f32>>,
    slot: usize,
}

impl Cursor<'_> {
    /// Prepends the cached context of the next layer to `x` and stores the
    /// new context.
    fn with_tail(&mut self, x: Var, ctx: usize) -> Result<Var> {
        let xv = self.g.value(x).clone();
        let (b, c, _) = xv.dims3()?;
        if self.slot == self.tails.len() {
            self.tails.push(Tensor::zeros(&[b, c, ctx]));
        }
        let tail = &self.tails[self.slot];
        if tail.shape() != [b, c, ctx] {
            return Err(shape_err!("stream state does not match this model"));
        }
        let joined = tail.concat_time(&xv)?;
        let t = joined.shape()[2];
        self.tails[self.slot] = joined.slice_time(t - ctx, ctx)?;
        self.slot += 1;
        Ok(self.g.constant(joined))
    }

    fn conv(&mut self, conv: &Conv, x: Var) -> Result<Var> {
        let joined = self.with_tail(x, conv.context())?;
        let w = self.g.param_const(self.store, conv.weight);
        let b = conv.bias.map(|b| self.g.param_const(self.store, b));
        let spec = ConvSpec {
            pad_left: 0,
            pad_right: 0,
            ..conv.spec
        };
        self.g.conv1d(joined, w, b, spec)
    }

    fn upsample(&mut self, up: &Upsample, x: Var) -> Result<Var> {
        let ctx = transposed_context(Upsample::kernel_for(up.ratio), up.ratio);
        let t = self.g.shape(x)[2];
        let joined = self.with_tail(x, ctx)?;
        let w = self.g.param_const(self.store, up.weight);
        let b = self.g.param_const(self.store, up.bias);
        let y = self
            .g
            .conv_transpose1d(joined, w, Some(b), up.ratio, 0, (ctx + t) * up.ratio)?;
        self.g.slice_time(y, ctx * up.ratio, t * up.ratio)
    }
}

/// Decodes the next block `[B, latent_dim, F]` of a stream into
/// `[B, 1, F * factor]` audio. The concatenated output equals an offline
/// decode of the concatenated latents with the same noise seed.
pub fn stream_decode(
    model: &Rave,
    state: &mut StreamState,
    z: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let (b, d, frames) = z.dims3()?;
    if state.latent_dim != model.config.latent_dim || state.bands != model.config.bands {
        return Err(Error::Config(
            "stream state was created for a different model".into(),
        ));
    }
    if d != model.config.latent_dim {
        return Err(shape_err!(
            "latent has {d} channels, model expects {}",
            model.config.latent_dim
        ));
    }
    if frames == 0 {
        return Err(shape_err!("stream block needs at least one frame"));
    }
    if state.batch.is_some_and(|sb| sb != b) {
        return Err(shape_err!(
            "stream batch changed from {:?} to {b}",
            state.batch
        ));
    }
    state.batch = Some(b);
    let dec = &model.decoder;
    let cfg = &model.config;
    let mut cur = Cursor {
        g: Graph::new(),
        store: &model.params,
        tails: &mut state.tails,
        slot: 0,
    };
    let zv = cur.g.constant(z.clone());
    let mut h = cur.conv(&dec.input, zv)?;
    for stage in &dec.stages {
        h = cur.g.leaky_relu(h, LEAKY_SLOPE);
        h = cur.upsample(&stage.upsample, h)?;
        for unit in &stage.units {
            let a = cur.g.leaky_relu(h, LEAKY_SLOPE);
            let a = cur.conv(&unit.dilated, a)?;
            let a = cur.g.leaky_relu(a, LEAKY_SLOPE);
            let a = cur.conv(&unit.pointwise, a)?;
            h = cur.g.add(h, a)?;
        }
    }
    let h = cur.g.leaky_relu(h, LEAKY_SLOPE);
    let wave = cur.conv(&dec.wave, h)?;
    let wave = cur.g.tanh(wave);
    let loud = cur.conv(&dec.loudness, h)?;
    let loud = cur.g.sigmoid(loud);
    let harmonic = cur.g.mul_channel(wave, loud)?;
    let mut a = h;
    for (i, conv) in dec.noise.iter().enumerate() {
        if i > 0 {
            a = cur.g.leaky_relu(a, LEAKY_SLOPE);
        }
        a = cur.conv(conv, a)?;
    }
    let a = cur.g.offset(a, NOISE_BIAS as f32);
    let amp = cur.g.sigmoid(a);

    let nf = cfg.noise_frame();
    let band_len = frames * cfg.band_hop();
    let start = state.frames * cfg.band_hop() / nf;
    let excitation = noise_block(state.noise_seed, b, cfg.bands, start, band_len / nf, nf);
    let noise = cur
        .g
        .filtered_noise(amp, excitation, dec.noise_bands, nf, true)?;
    let mut nv = cur.g.value(noise).clone();
    let pending_len = nv.shape()[2] - band_len;
    if let Some(p) = &state.noise_tail {
        for (row, prow) in nv
            .data_mut()
            .chunks_mut(band_len + pending_len)
            .zip(p.data().chunks(pending_len))
        {
            row[..pending_len]
                .iter_mut()
                .zip(prow)
                .for_each(|(o, v)| *o += v);
        }
    }
    state.noise_tail = Some(nv.slice_time(band_len, pending_len)?);
    let noise = cur.g.constant(nv.slice_time(0, band_len)?);
    let bands = cur.g.add(harmonic, noise)?;

    let l = model.pqmf.filter_len();
    let m = cfg.bands;
    let ctx = transposed_context(l, m);
    let joined = cur.with_tail(bands, ctx)?;
    let kernel = Tensor::from_f64(&[m, 1, l], &model.pqmf.synthesis_kernel())?;
    let w = cur.g.constant(kernel);
    let y = cur
        .g
        .conv_transpose1d(joined, w, None, m, 0, (ctx + band_len) * m)?;
    let y = cur.g.slice_time(y, ctx * m, band_len * m)?;
    state.frames += frames;
    Ok(cur.g.value(y).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Full,
    /// Single-band variant of the same configuration, decoding at full rate.
    NoMultiband,
}

pub const DEFAULT_TRIALS: usize = 100;
pub const WARMUP_TRIALS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub sample_rate: u32,
    pub samples_per_trial: usize,
    /// Seconds per timed trial.
    pub timings: Vec<f64>,
}

impl BenchReport {
    pub fn trials(&self) -> usize {
        self.timings.len()
    }

    pub fn samples_per_second(&self) -> f64 {
        let total: f64 = self.timings.iter().sum();
        self.samples_per_trial as f64 * self.timings.len() as f64 / total
    }

    pub fn realtime_factor(&self) -> f64 {
        self.samples_per_second() / self.sample_rate as f64
    }

    pub fn coefficient_of_variation(&self) -> f64 {
        let n = self.timings.len() as f64;
        let mean = self.timings.iter().sum::<f64>() / n;
        let var = self.timings.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
        var.sqrt() / mean
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("trial,seconds,samples_per_second\n");
        for (i, t) in self.timings.iter().enumerate() {
            s.push_str(&format!("{i},{t},{}\n", self.samples_per_trial as f64 / t));
        }
        let mean = self.timings.iter().sum::<f64>() / self.timings.len() as f64;
        s.push_str(&format!("mean,{mean},{}\n", self.samples_per_second()));
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{} trials of {} samples: {:.0} samples/s, {:.2}x realtime at {} Hz (cv {:.1}%)",
            self.trials(),
            self.samples_per_trial,
            self.samples_per_second(),
            self.realtime_factor(),
            self.sample_rate,
            100.0 * self.coefficient_of_variation()
        )
    }
}

/// Times decoding of one second of audio from random latents, after
/// [`WARMUP_TRIALS`] untimed runs.
pub fn bench_decoder(model: &Rave, trials: usize, seed: u64) -> Result<BenchReport> {
    if trials == 0 {
        return Err(config_err!("benchmark needs at least one trial"));
    }
    let f = model.config.total_downsampling();
    let frames = (model.config.sample_rate as usize).div_ceil(f);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.config.latent_dim;
    let mut timings = Vec::with_capacity(trials);
    for i in 0..WARMUP_TRIALS + trials {
        let z: Vec<f32> = (0..d * frames)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let z = Tensor::from_vec(&[1, d, frames], z)?;
        let t0 = Instant::now();
        let y = model.decode(&z, i as u64)?;
        let dt = t0.elapsed().as_secs_f64();
        std::hint::black_box(y);
        if i >= WARMUP_TRIALS {
            timings.push(dt);
        }
    }
    Ok(BenchReport {
        sample_rate: model.config.sample_rate,
        samples_per_trial: frames * f,
        timings,
    })
}

/// [`bench_decoder`] on `model` or on its single-band counterpart.
pub fn bench_throughput(
    model: &Rave,
    mode: BenchMode,
    trials: usize,
    seed: u64,
) -> Result<BenchReport> {
    match mode {
        BenchMode::Full => bench_decoder(model, trials, seed),
        BenchMode::NoMultiband => {
            let variant = Rave::new(model.config.without_multiband())?;
            bench_decoder(&variant, trials, seed)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Transfer {
    /// Same length as the input; delayed by the model latency.
    pub output: Waveform,
    pub kl: KlReport,
}

/// Reconstructs `x` from the posterior mode. The input is zero-padded to a
/// multiple of the downsampling factor and the output trimmed back.
pub fn timbre_transfer(model: &Rave, x: &Waveform, noise_seed: u64) -> Result<Transfer> {
    if x.sample_rate != model.config.sample_rate {
        return Err(Error::Data(format!(
            "input rate {} differs from model rate {}",
            x.sample_rate, model.config.sample_rate
        )));
    }
    if x.is_empty() {
        return Err(Error::Data("empty input".into()));
    }
    let f = model.config.total_downsampling();
    let mut padded = x.samples.clone();
    padded.resize(x.len().div_ceil(f) * f, 0.0);
    let (mean, logvar) = model.encode(&[&padded])?;
    let kl = kl_report_from_posteriors(&[(mean.clone(), logvar)])?;
    let mut y = model.decode(&mean, noise_seed)?.into_data();
    y.truncate(x.len());
    Ok(Transfer {
        output: Waveform::new(y, x.sample_rate)?,
        kl,
    })
}
