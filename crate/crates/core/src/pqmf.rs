//! Pseudo-QMF multiband decomposition.
//!
//! The bank is built from a Kaiser-windowed sinc prototype `p` whose cosine
//! modulations give the analysis filters
//!
//! ```text
//! h_k[n] = 2 p[n] cos((2k + 1) (pi / 2M) (n - (L - 1) / 2) + (-1)^k pi / 4)
//! ```
//!
//! and the synthesis filters are their time reversals. Both directions are
//! scaled by `sqrt(M)` so that the sub-band energies sum to the input energy.
//! Analysis and synthesis run in polyphase form: a prototype filtering stage on
//! the `2M` polyphase branches followed by an `M × 2M` cosine modulation matrix.
//! The offline functions drive the same streaming kernels as the runtime, so a
//! block-wise pass is bit-identical to a single pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{config_err, shape_err, Error, Result};

/// Modified Bessel function of the first kind, order zero (power series).
pub fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..500 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

pub fn kaiser_window(len: usize, beta: f64) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = bessel_i0(beta);
    (0..len)
        .map(|n| {
            let r = 2.0 * n as f64 / (len - 1) as f64 - 1.0;
            bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / denom
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeFilter {
    pub taps: Vec<f64>,
    pub kaiser_beta: f64,
    /// Cutoff as a fraction of the Nyquist frequency.
    pub cutoff: f64,
}

impl PrototypeFilter {
    /// Kaiser-windowed ideal lowpass with unit DC gain.
    pub fn kaiser_sinc(len: usize, beta: f64, cutoff: f64) -> Self {
        let center = (len as f64 - 1.0) / 2.0;
        let window = kaiser_window(len, beta);
        let taps = window
            .iter()
            .enumerate()
            .map(|(n, w)| {
                let t = n as f64 - center;
                let sinc = if t == 0.0 {
                    cutoff
                } else {
                    (std::f64::consts::PI * cutoff * t).sin() / (std::f64::consts::PI * t)
                };
                sinc * w
            })
            .collect();
        Self {
            taps,
            kaiser_beta: beta,
            cutoff,
        }
    }

    /// Identity prototype used by the degenerate single-band bank.
    pub fn identity() -> Self {
        Self {
            taps: vec![1.0],
            kaiser_beta: 0.0,
            cutoff: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Worst deviation of `|P(w)|^2 + |P(pi/M - w)|^2` from one over `[0, pi/M]`,
    /// the power-complementarity condition between adjacent bands.
    pub fn flatness_error(&self, bands: usize) -> f64 {
        let nfft = (self.taps.len() * 16).next_power_of_two().max(4096);
        let mut buf: Vec<Complex<f64>> = (0..nfft)
            .map(|i| Complex::new(self.taps.get(i).copied().unwrap_or(0.0), 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
        // pi/M in bins
        let edge = nfft / (2 * bands);
        (0..=edge)
            .map(|i| (buf[i].norm_sqr() + buf[edge - i].norm_sqr() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Search parameters for [`design_prototype`].
#[derive(Debug, Clone, PartialEq)]
pub struct DesignConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_step: f64,
    /// Relative half-width of the cutoff search interval around `1/(2M)`.
    pub cutoff_span: f64,
    pub cutoff_iterations: usize,
    /// White-noise probe length, in units of filter length.
    pub probe_filters: usize,
    pub seed: u64,
    pub snr_floor_db: f64,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self {
            beta_min: 1.0,
            beta_max: 18.0,
            beta_step: 0.1,
            cutoff_span: 0.25,
            cutoff_iterations: 40,
            probe_filters: 16,
            seed: 0x5eed,
            snr_floor_db: 60.0,
        }
    }
}

pub const TAPS_PER_BAND: usize = 32;

pub fn default_taps(bands: usize) -> usize {
    if bands == 1 {
        1
    } else {
        TAPS_PER_BAND * bands
    }
}

/// Designs the prototype lowpass for an `bands`-band bank by grid search over the
/// Kaiser shape parameter. For each `beta` the cutoff is tuned around `1/(2M)` to
/// minimise [`PrototypeFilter::flatness_error`]; the returned filter is the grid
/// point with the best white-noise analysis/synthesis round trip.
pub fn design_prototype(bands: usize, taps: usize, cfg: &DesignConfig) -> Result<PrototypeFilter> {
    if bands == 0 {
        return Err(config_err!("filter bank needs at least one band"));
    }
    if bands == 1 {
        return Ok(PrototypeFilter::identity());
    }
    if taps < 8 * bands {
        return Err(config_err!(
            "prototype needs at least {} taps for {bands} bands, got {taps}",
            8 * bands
        ));
    }
    if cfg.beta_step.is_nan() || cfg.beta_step <= 0.0 || cfg.beta_max < cfg.beta_min {
        return Err(config_err!("invalid kaiser beta grid"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let probe_len = (cfg.probe_filters * taps).div_ceil(bands) * bands;
    let probe: Vec<f64> = (0..probe_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let nominal = 1.0 / (2.0 * bands as f64);
    let mut best: Option<(f64, PrototypeFilter)> = None;
    let steps = ((cfg.beta_max - cfg.beta_min) / cfg.beta_step).round() as usize;
    for i in 0..=steps {
        let beta = cfg.beta_min + i as f64 * cfg.beta_step;
        let proto = tune_cutoff(bands, taps, beta, nominal, cfg);
        let snr = PqmfBank::new(proto.clone(), bands)?.round_trip_snr(&probe);
        if best.as_ref().is_none_or(|(s, _)| snr > *s) {
            best = Some((snr, proto));
        }
    }
    let (snr, proto) = best.expect("grid has at least one point");
    if snr < cfg.snr_floor_db {
        return Err(Error::Design(format!(
            "best round-trip SNR {snr:.2} dB (beta {:.1}, cutoff {:.6}) below floor {:.1} dB for {bands} bands / {taps} taps",
            proto.kaiser_beta, proto.cutoff, cfg.snr_floor_db
        )));
    }
    Ok(proto)
}

fn tune_cutoff(
    bands: usize,
    taps: usize,
    beta: f64,
    nominal: f64,
    cfg: &DesignConfig,
) -> PrototypeFilter {
    let eval = |c: f64| PrototypeFilter::kaiser_sinc(taps, beta, c).flatness_error(bands);
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    let mut lo = nominal * (1.0 - cfg.cutoff_span);
    let mut hi = nominal * (1.0 + cfg.cutoff_span);
    let mut a = hi - golden * (hi - lo);
    let mut b = lo + golden * (hi - lo);
    let (mut fa, mut fb) = (eval(a), eval(b));
    for _ in 0..cfg.cutoff_iterations {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - golden * (hi - lo);
            fa = eval(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + golden * (hi - lo);
            fb = eval(b);
        }
    }
    PrototypeFilter::kaiser_sinc(taps, beta, if fa < fb { a } else { b })
}

/// An `M`-band cosine-modulated bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PqmfBank {
    bands: usize,
    prototype: PrototypeFilter,
    /// Analysis filters `h_k`, one row per band.
    filters: Vec<Vec<f64>>,
    /// Prototype zero-padded to a multiple of `2M`.
    padded: Vec<f64>,
    analysis_mod: Vec<f64>,
    synthesis_mod: Vec<f64>,
}

impl PqmfBank {
    pub fn new(prototype: PrototypeFilter, bands: usize) -> Result<Self> {
        if bands == 0 || prototype.is_empty() {
            return Err(config_err!("empty filter bank"));
        }
        let len = prototype.len();
        let center = (len as f64 - 1.0) / 2.0;
        let phase_step = std::f64::consts::PI / (2.0 * bands as f64);
        let modulation = |k: usize, n: f64, sign: f64| -> f64 {
            if bands == 1 {
                return 1.0;
            }
            let phi = if k.is_multiple_of(2) { 1.0 } else { -1.0 } * std::f64::consts::FRAC_PI_4;
            2.0 * ((2 * k + 1) as f64 * phase_step * (n - center) + sign * phi).cos()
        };
        let filters = (0..bands)
            .map(|k| {
                prototype
                    .taps
                    .iter()
                    .enumerate()
                    .map(|(n, p)| p * modulation(k, n as f64, 1.0))
                    .collect()
            })
            .collect();
        let branches = if bands == 1 { 1 } else { 2 * bands };
        let mut padded = prototype.taps.clone();
        padded.resize(len.div_ceil(branches) * branches, 0.0);
        let mut analysis_mod = Vec::with_capacity(bands * branches);
        let mut synthesis_mod = Vec::with_capacity(bands * branches);
        for k in 0..bands {
            for r in 0..branches {
                analysis_mod.push(modulation(k, r as f64, 1.0));
                synthesis_mod.push(modulation(k, r as f64, -1.0));
            }
        }
        Ok(Self {
            bands,
            prototype,
            filters,
            padded,
            analysis_mod,
            synthesis_mod,
        })
    }

    /// Designs the prototype with [`design_prototype`] and modulates it.
    pub fn design(bands: usize, taps: usize) -> Result<Self> {
        Self::new(
            design_prototype(bands, taps, &DesignConfig::default())?,
            bands,
        )
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn prototype(&self) -> &PrototypeFilter {
        &self.prototype
    }

    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    pub fn filter_len(&self) -> usize {
        self.prototype.len()
    }

    /// Latency of an analysis/synthesis round trip, in samples.
    pub fn group_delay(&self) -> usize {
        self.prototype.len() - 1
    }

    fn branches(&self) -> usize {
        if self.bands == 1 {
            1
        } else {
            2 * self.bands
        }
    }

    fn gain(&self) -> f64 {
        (self.bands as f64).sqrt()
    }

    /// Synthesis filters `sqrt(M) g_k` laid out `[band][tap]`, with `g_k` the time
    /// reversal of `h_k`. Used as a fixed transposed-convolution kernel in training.
    pub fn synthesis_kernel(&self) -> Vec<f64> {
        let g = self.gain();
        self.filters
            .iter()
            .flat_map(|h| h.iter().rev().map(move |v| v * g))
            .collect()
    }

    /// Analysis filters as a strided-convolution kernel `[band][tap]`: correlating
    /// the left-padded input with `sqrt(M) g_k` is the causal filtering by `h_k`.
    pub fn analysis_kernel(&self) -> Vec<f64> {
        self.synthesis_kernel()
    }

    pub fn analyze(&self, x: &[f32]) -> MultibandSignal {
        let mut x = x.to_vec();
        x.resize(x.len().div_ceil(self.bands) * self.bands, 0.0);
        let mut state = AnalysisState::new(self);
        state.process(self, &x)
    }

    pub fn synthesize(&self, mb: &MultibandSignal) -> Result<Vec<f32>> {
        if mb.bands.len() != self.bands {
            return Err(shape_err!(
                "multiband signal has {} bands, bank has {}",
                mb.bands.len(),
                self.bands
            ));
        }
        let mut state = SynthesisState::new(self);
        state.process(self, mb)
    }

    /// Round-trip SNR (dB) against the input delayed by the group delay.
    pub fn round_trip_snr(&self, x: &[f64]) -> f64 {
        let mut xs = x.to_vec();
        xs.resize(xs.len().div_ceil(self.bands) * self.bands, 0.0);
        let bands = AnalysisState::new(self).process_f64(self, &xs);
        let y = SynthesisState::new(self).process_f64(self, &bands);
        delayed_snr_db(&xs, &y, self.group_delay())
    }
}

/// SNR of `y` against `x` delayed by `delay` samples over their overlap.
pub fn delayed_snr_db(x: &[f64], y: &[f64], delay: usize) -> f64 {
    let mut sig = 0.0;
    let mut err = 0.0;
    for n in delay..y.len().min(x.len() + delay) {
        let r = x[n - delay];
        sig += r * r;
        err += (y[n] - r) * (y[n] - r);
    }
    10.0 * (sig / err.max(1e-300)).log10()
}

/// `M` decimated sub-band signals.
#[derive(Debug, Clone, PartialEq)]
pub struct MultibandSignal {
    pub bands: Vec<Vec<f32>>,
    pub band_rate: f64,
}

impl MultibandSignal {
    pub fn zeros(bands: usize, len: usize) -> Self {
        Self {
            bands: vec![vec![0.0; len]; bands],
            band_rate: 0.0,
        }
    }

    pub fn band_len(&self) -> usize {
        self.bands.first().map_or(0, Vec::len)
    }

    pub fn energy(&self) -> f64 {
        self.bands
            .iter()
            .flatten()
            .map(|&v| v as f64 * v as f64)
            .sum()
    }
}

/// Streaming analysis: keeps the last `L - 1` input samples.
#[derive(Debug, Clone)]
pub struct AnalysisState {
    history: Vec<f64>,
}

impl AnalysisState {
    pub fn new(bank: &PqmfBank) -> Self {
        Self {
            history: vec![0.0; bank.padded.len() - 1],
        }
    }

    pub fn reset(&mut self) {
        self.history.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Consumes a block whose length is a multiple of `M`.
    pub fn process(&mut self, bank: &PqmfBank, block: &[f32]) -> MultibandSignal {
        let x: Vec<f64> = block.iter().map(|&v| v as f64).collect();
        let bands = self.process_f64(bank, &x);
        MultibandSignal {
            bands: bands
                .into_iter()
                .map(|b| b.into_iter().map(|v| v as f32).collect())
                .collect(),
            band_rate: 0.0,
        }
    }

    fn process_f64(&mut self, bank: &PqmfBank, block: &[f64]) -> Vec<Vec<f64>> {
        let m = bank.bands;
        debug_assert_eq!(block.len() % m, 0);
        let frames = block.len() / m;
        let branches = bank.branches();
        let hist = self.history.len();
        let mut buf = Vec::with_capacity(hist + block.len());
        buf.extend_from_slice(&self.history);
        buf.extend_from_slice(block);
        let gain = bank.gain();
        let mut out = vec![vec![0.0; frames]; m];
        let mut u = vec![0.0; branches];
        let groups = bank.padded.len() / branches;
        for f in 0..frames {
            let now = hist + f * m;
            for (r, slot) in u.iter_mut().enumerate() {
                let mut acc = 0.0;
                for q in 0..groups {
                    let n = q * branches + r;
                    let v = bank.padded[n] * buf[now - n];
                    if q % 2 == 0 {
                        acc += v;
                    } else {
                        acc -= v;
                    }
                }
                *slot = acc;
            }
            for (k, band) in out.iter_mut().enumerate() {
                let row = &bank.analysis_mod[k * branches..(k + 1) * branches];
                band[f] = gain * row.iter().zip(&u).map(|(c, v)| c * v).sum::<f64>();
            }
        }
        self.history.copy_from_slice(&buf[buf.len() - hist..]);
        out
    }
}

/// Streaming synthesis: carries the overlap-add tail between blocks.
#[derive(Debug, Clone)]
pub struct SynthesisState {
    tail: Vec<f64>,
}

impl SynthesisState {
    pub fn new(bank: &PqmfBank) -> Self {
        Self {
            tail: vec![0.0; bank.padded.len()],
        }
    }

    pub fn reset(&mut self) {
        self.tail.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn process(&mut self, bank: &PqmfBank, mb: &MultibandSignal) -> Result<Vec<f32>> {
        if mb.bands.len() != bank.bands {
            return Err(shape_err!(
                "expected {} bands, got {}",
                bank.bands,
                mb.bands.len()
            ));
        }
        let len = mb.band_len();
        if mb.bands.iter().any(|b| b.len() != len) {
            return Err(shape_err!("sub-bands have unequal lengths"));
        }
        let bands: Vec<Vec<f64>> = mb
            .bands
            .iter()
            .map(|b| b.iter().map(|&v| v as f64).collect())
            .collect();
        Ok(self
            .process_f64(bank, &bands)
            .into_iter()
            .map(|v| v as f32)
            .collect())
    }

    fn process_f64(&mut self, bank: &PqmfBank, bands: &[Vec<f64>]) -> Vec<f64> {
        let m = bank.bands;
        let frames = bands.first().map_or(0, Vec::len);
        let branches = bank.branches();
        let taps = bank.padded.len();
        let mut acc = vec![0.0; frames * m + taps];
        acc[..taps].copy_from_slice(&self.tail);
        let gain = bank.gain();
        let mut w = vec![0.0; branches];
        for f in 0..frames {
            for (r, slot) in w.iter_mut().enumerate() {
                let mut s = 0.0;
                for (k, band) in bands.iter().enumerate() {
                    s += bank.synthesis_mod[k * branches + r] * band[f];
                }
                *slot = gain * s;
            }
            let base = f * m;
            for (j, &p) in bank.padded.iter().enumerate() {
                let v = p * w[j % branches];
                if (j / branches).is_multiple_of(2) {
                    acc[base + j] += v;
                } else {
                    acc[base + j] -= v;
                }
            }
        }
        self.tail.copy_from_slice(&acc[frames * m..]);
        acc.truncate(frames * m);
        acc
    }
}
