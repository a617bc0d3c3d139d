//! Signal mathematics shared by training, analysis and the runtime: amplitude
//! STFT, the multiscale spectral distance, diagonal-Gaussian helpers and the
//! waveform augmentations.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{config_err, shape_err, Error, Result};

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(config_err!("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn rms(&self) -> f64 {
        rms(&self.samples)
    }
}

pub fn rms(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64).sqrt()
}

/// Tapering function applied to each STFT frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// Periodic Hann.
    Hann,
    Rectangular,
}

impl WindowKind {
    pub fn coefficients<T: num_traits::Float>(self, n: usize) -> Vec<T> {
        match self {
            WindowKind::Rectangular => vec![T::one(); n],
            WindowKind::Hann => (0..n)
                .map(|i| {
                    let phase = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    T::from(0.5 - 0.5 * phase.cos()).unwrap()
                })
                .collect(),
        }
    }
}

/// Set of STFT window sizes and the log floor of the spectral distance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConfig {
    pub scales: Vec<usize>,
    pub epsilon: f64,
    pub window: WindowKind,
}

pub const SPECTRAL_EPSILON: f64 = 1e-7;

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            scales: vec![2048, 1024, 512, 256, 128],
            epsilon: SPECTRAL_EPSILON,
            window: WindowKind::Hann,
        }
    }
}

impl SpectralConfig {
    /// Default scales (tuned for 48 kHz) rescaled to `sample_rate` and rounded to the
    /// nearest power of two in the log domain, never below 32.
    pub fn for_sample_rate(sample_rate: u32) -> Self {
        let ratio = sample_rate as f64 / 48_000.0;
        let scales = Self::default()
            .scales
            .iter()
            .map(|&n| {
                let exp = (n as f64 * ratio).log2().round().max(5.0);
                1usize << exp as u32
            })
            .collect();
        Self {
            scales,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(config_err!("spectral config needs at least one scale"));
        }
        for &n in &self.scales {
            if !n.is_power_of_two() || n < 32 {
                return Err(config_err!("STFT scale {n} must be a power of two >= 32"));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(config_err!("spectral epsilon must be positive"));
        }
        Ok(())
    }

    pub fn max_scale(&self) -> usize {
        self.scales.iter().copied().max().unwrap_or(0)
    }
}

/// STFT hop for window size `n`.
pub fn hop_for(n: usize) -> usize {
    (n / 4).max(1)
}

/// Number of frames for a signal of `len` samples: the tail is zero-padded so that
/// every sample is covered, and signals shorter than one window yield one frame.
pub fn frame_count(len: usize, n: usize) -> usize {
    let hop = hop_for(n);
    if len <= n {
        1
    } else {
        (len - n).div_ceil(hop) + 1
    }
}

/// `|STFT_n(x)|`, row-major `[frames × bins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeSpectrogram {
    pub magnitudes: Vec<f64>,
    pub frames: usize,
    pub bins: usize,
    pub scale: usize,
}

impl AmplitudeSpectrogram {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.magnitudes[i * self.bins..(i + 1) * self.bins]
    }
}

pub fn stft_amplitude(x: &[f32], n: usize, window: WindowKind) -> Result<AmplitudeSpectrogram> {
    if !n.is_power_of_two() || n < 2 {
        return Err(config_err!("STFT window size {n} is not a power of two"));
    }
    let hop = hop_for(n);
    let frames = frame_count(x.len(), n);
    let bins = n / 2 + 1;
    let taper: Vec<f64> = window.coefficients(n);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut magnitudes = Vec::with_capacity(frames * bins);
    for f in 0..frames {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            let v = x.get(start + i).copied().unwrap_or(0.0) as f64;
            *slot = Complex::new(v * taper[i], 0.0);
        }
        fft.process(&mut buf);
        magnitudes.extend(buf[..bins].iter().map(|c| c.norm()));
    }
    Ok(AmplitudeSpectrogram {
        magnitudes,
        frames,
        bins,
        scale: n,
    })
}

/// Per-scale terms of the multiscale spectral distance.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralTerms {
    pub scale: usize,
    pub relative_frobenius: f64,
    pub log_l1: f64,
}

pub fn spectral_terms(
    x: &Waveform,
    y: &Waveform,
    cfg: &SpectralConfig,
) -> Result<Vec<SpectralTerms>> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(shape_err!(
            "spectral distance on lengths {} and {}",
            x.len(),
            y.len()
        ));
    }
    if x.sample_rate != y.sample_rate {
        return Err(shape_err!(
            "spectral distance on sample rates {} and {}",
            x.sample_rate,
            y.sample_rate
        ));
    }
    cfg.scales
        .iter()
        .map(|&n| {
            let sx = stft_amplitude(&x.samples, n, cfg.window)?;
            let sy = stft_amplitude(&y.samples, n, cfg.window)?;
            let mut diff_sq = 0.0;
            let mut ref_sq = 0.0;
            let mut l1 = 0.0;
            for (a, b) in sx.magnitudes.iter().zip(&sy.magnitudes) {
                let d = a - b;
                diff_sq += d * d;
                ref_sq += a * a;
                l1 += d.abs();
            }
            Ok(SpectralTerms {
                scale: n,
                relative_frobenius: diff_sq.sqrt() / (ref_sq.sqrt() + cfg.epsilon),
                log_l1: (l1 + cfg.epsilon).ln(),
            })
        })
        .collect()
}

/// Multiscale spectral distance between a reference `x` and an estimate `y`:
/// the sum over scales of the relative Frobenius error plus the log L1 error of
/// the amplitude spectrograms.
pub fn spectral_distance(x: &Waveform, y: &Waveform, cfg: &SpectralConfig) -> Result<f64> {
    Ok(spectral_terms(x, y, cfg)?
        .iter()
        .map(|t| t.relative_frobenius + t.log_l1)
        .sum())
}

/// Diagonal Gaussian posterior `N(mean, exp(log_variance))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGaussian {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(shape_err!(
                "gaussian mean has {} entries, log-variance {}",
                mean.len(),
                log_variance.len()
            ));
        }
        if mean.iter().chain(&log_variance).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite gaussian parameter".into()));
        }
        Ok(Self { mean, log_variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// The posterior mode, which for a Gaussian is its mean.
    pub fn mode(&self) -> &[f64] {
        &self.mean
    }
}

/// Per-dimension `KL(q || N(0, I))`.
pub fn kl_diag_gaussian(q: &DiagonalGaussian) -> Vec<f64> {
    q.mean
        .iter()
        .zip(&q.log_variance)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - lv - 1.0))
        .collect()
}

pub fn reparameterize(q: &DiagonalGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != q.dim() {
        return Err(shape_err!(
            "noise has {} entries for a {}-d posterior",
            noise.len(),
            q.dim()
        ));
    }
    Ok(q.mean
        .iter()
        .zip(&q.log_variance)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect())
}

/// Adds uniform dither of one quantization step at `bits` resolution, then clips.
pub fn dequantize<R: Rng + ?Sized>(x: &Waveform, bits: u32, rng: &mut R) -> Result<Waveform> {
    if !(8..=24).contains(&bits) {
        return Err(config_err!("dequantization bits {bits} outside [8, 24]"));
    }
    let q = 2f64.powi(1 - bits as i32);
    let dist = Uniform::new_inclusive(-q / 2.0, q / 2.0);
    let samples = x
        .samples
        .iter()
        .map(|&s| (s as f64 + dist.sample(rng)).clamp(-1.0, 1.0) as f32)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: x.sample_rate,
    })
}

pub const ALLPASS_SECTIONS: usize = 4;
pub const ALLPASS_MAX_COEFF: f64 = 0.9;

/// Cascade of first-order allpass sections `(a + z^-1) / (1 + a z^-1)`.
pub fn allpass_cascade(x: &[f32], coeffs: &[f64]) -> Vec<f32> {
    let mut signal: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    for &a in coeffs {
        let mut prev_in = 0.0;
        let mut prev_out = 0.0;
        for s in signal.iter_mut() {
            let input = *s;
            let out = a * input + prev_in - a * prev_out;
            prev_in = input;
            prev_out = out;
            *s = out;
        }
    }
    signal.into_iter().map(|v| v as f32).collect()
}

pub fn random_allpass<R: Rng + ?Sized>(x: &Waveform, rng: &mut R) -> Waveform {
    let dist = Uniform::new_inclusive(-ALLPASS_MAX_COEFF, ALLPASS_MAX_COEFF);
    let coeffs: Vec<f64> = (0..ALLPASS_SECTIONS).map(|_| dist.sample(rng)).collect();
    Waveform {
        samples: allpass_cascade(&x.samples, &coeffs),
        sample_rate: x.sample_rate,
    }
}

pub fn random_crop<R: Rng + ?Sized>(x: &Waveform, length: usize, rng: &mut R) -> Result<Waveform> {
    if x.len() < length {
        return Err(Error::Data(format!(
            "cannot crop {length} samples from a clip of {}",
            x.len()
        )));
    }
    let offset = rng.gen_range(0..=x.len() - length);
    Ok(Waveform {
        samples: x.samples[offset..offset + length].to_vec(),
        sample_rate: x.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
    }

    fn sine(freq: f64, sr: u32, len: usize) -> Vec<f32> {
        (0..len)
            .map(|t| (2.0 * std::f64::consts::PI * freq * t as f64 / sr as f64).sin() as f32 * 0.5)
            .collect()
    }

    #[test]
    fn stft_of_silence_is_zero() {
        let s = stft_amplitude(&[0.0; 300], 64, WindowKind::Hann).unwrap();
        assert!(s.magnitudes.iter().all(|&m| m == 0.0));
        assert_eq!(s.bins, 33);
    }

    #[test]
    fn stft_single_cosine_concentrates_on_its_bin() {
        let n = 64;
        // k = n/4 keeps every sample exactly representable in f32
        let k = 16;
        let x: Vec<f32> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64).cos() as f32)
            .collect();
        let s = stft_amplitude(&x, n, WindowKind::Rectangular).unwrap();
        assert_eq!(s.frames, 1);
        // direct DFT oracle
        for bin in 0..s.bins {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (t, &v) in x.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * (bin * t) as f64 / n as f64;
                re += v as f64 * ph.cos();
                im += v as f64 * ph.sin();
            }
            assert!((s.magnitudes[bin] - re.hypot(im)).abs() < 1e-9);
        }
        let peak = s.magnitudes[k];
        assert!((peak - n as f64 / 2.0).abs() < 1e-4);
        for (bin, &m) in s.magnitudes.iter().enumerate() {
            if bin != k {
                assert!(m < 1e-9 * peak, "bin {bin} leaked {m}");
            }
        }
    }

    #[test]
    fn stft_frame_count_follows_hop() {
        let s = stft_amplitude(&noise(256, 1), 128, WindowKind::Hann).unwrap();
        assert_eq!(s.frames, 5);
        assert_eq!(frame_count(10, 64), 1);
        assert_eq!(frame_count(65, 64), 2);
    }

    #[test]
    fn stft_rejects_non_power_of_two() {
        assert!(matches!(
            stft_amplitude(&[0.0; 100], 100, WindowKind::Hann),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn stft_concatenation_is_framewise_union() {
        let n = 64;
        let a = noise(256, 2);
        let b = noise(256, 3);
        let joined: Vec<f32> = a.iter().chain(&b).copied().collect();
        let sa = stft_amplitude(&a, n, WindowKind::Hann).unwrap();
        let sb = stft_amplitude(&b, n, WindowKind::Hann).unwrap();
        let sj = stft_amplitude(&joined, n, WindowKind::Hann).unwrap();
        // frames fully inside a, then frames fully inside b (start at 256 = 16 hops)
        for f in 0..sa.frames {
            assert_eq!(sj.frame(f), sa.frame(f));
        }
        for f in 0..sb.frames {
            assert_eq!(sj.frame(f + 16), sb.frame(f));
        }
    }

    #[test]
    fn spectral_distance_identical_inputs() {
        let cfg = SpectralConfig::for_sample_rate(16_000);
        let x = Waveform::new(noise(4096, 4), 16_000).unwrap();
        let terms = spectral_terms(&x, &x, &cfg).unwrap();
        assert!(terms.iter().all(|t| t.relative_frobenius == 0.0));
        let d = spectral_distance(&x, &x, &cfg).unwrap();
        let expected = cfg.scales.len() as f64 * cfg.epsilon.ln();
        assert!((d - expected).abs() < 1e-9);
    }

    #[test]
    fn spectral_distance_sign_flip_is_invisible() {
        let cfg = SpectralConfig::for_sample_rate(16_000);
        let x = Waveform::new(noise(4096, 5), 16_000).unwrap();
        let neg = Waveform::new(x.samples.iter().map(|v| -v).collect(), 16_000).unwrap();
        let a = spectral_distance(&x, &x, &cfg).unwrap();
        let b = spectral_distance(&x, &neg, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spectral_distance_circular_hop_shift() {
        let cfg = SpectralConfig::for_sample_rate(16_000);
        let y = Waveform::new(noise(8192, 6), 16_000).unwrap();
        let x = Waveform::new(sine(300.0, 16_000, 8192), 16_000).unwrap();
        let hop = hop_for(*cfg.scales.iter().min().unwrap());
        let mut shifted = y.samples.clone();
        shifted.rotate_right(hop);
        let mut xs = x.samples.clone();
        xs.rotate_right(hop);
        let a = spectral_distance(&x, &y, &cfg).unwrap();
        let b = spectral_distance(
            &Waveform::new(xs, 16_000).unwrap(),
            &Waveform::new(shifted, 16_000).unwrap(),
            &cfg,
        )
        .unwrap();
        assert!((a - b).abs() <= 1e-3 * a.abs(), "{a} vs {b}");
    }

    /// Straight-line recomputation with a naive DFT per frame.
    fn naive_spectral_distance(x: &[f32], y: &[f32], scales: &[usize], eps: f64) -> f64 {
        let mut total = 0.0;
        for &n in scales {
            let hop = n / 4;
            let frames = if x.len() <= n {
                1
            } else {
                (x.len() - n).div_ceil(hop) + 1
            };
            let mut d2 = 0.0;
            let mut r2 = 0.0;
            let mut l1 = 0.0;
            for f in 0..frames {
                for k in 0..=n / 2 {
                    let (mut xr, mut xi, mut yr, mut yi) = (0.0, 0.0, 0.0, 0.0);
                    for t in 0..n {
                        let idx = f * hop + t;
                        let w =
                            0.5 - 0.5 * (2.0 * std::f64::consts::PI * t as f64 / n as f64).cos();
                        let ph = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                        let xv = x.get(idx).map_or(0.0, |&v| v as f64) * w;
                        let yv = y.get(idx).map_or(0.0, |&v| v as f64) * w;
                        xr += xv * ph.cos();
                        xi += xv * ph.sin();
                        yr += yv * ph.cos();
                        yi += yv * ph.sin();
                    }
                    let (mx, my) = (xr.hypot(xi), yr.hypot(yi));
                    d2 += (mx - my).powi(2);
                    r2 += mx * mx;
                    l1 += (mx - my).abs();
                }
            }
            total += d2.sqrt() / (r2.sqrt() + eps) + (l1 + eps).ln();
        }
        total
    }

    #[test]
    fn spectral_distance_matches_naive_recompute() {
        let sr = 16_000;
        // one second is expensive for an O(n^2) DFT; a quarter second exercises the same path
        let len = sr as usize / 4;
        let x = sine(440.0, sr, len);
        let y = sine(880.0, sr, len);
        let cfg = SpectralConfig {
            scales: vec![2048, 1024, 512],
            ..SpectralConfig::default()
        };
        let fast = spectral_distance(
            &Waveform::new(x.clone(), sr).unwrap(),
            &Waveform::new(y.clone(), sr).unwrap(),
            &cfg,
        )
        .unwrap();
        let slow = naive_spectral_distance(&x, &y, &cfg.scales, cfg.epsilon);
        assert!((fast - slow).abs() <= 1e-6 * slow.abs(), "{fast} vs {slow}");
    }

    #[test]
    fn spectral_distance_length_mismatch() {
        let cfg = SpectralConfig::default();
        let a = Waveform::silence(4096, 16_000);
        let b = Waveform::silence(4000, 16_000);
        assert!(matches!(
            spectral_distance(&a, &b, &cfg),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn spectral_distance_silent_reference_is_finite() {
        let cfg = SpectralConfig::for_sample_rate(16_000);
        let a = Waveform::silence(4096, 16_000);
        let b = Waveform::new(noise(4096, 9), 16_000).unwrap();
        assert!(spectral_distance(&a, &b, &cfg).unwrap().is_finite());
    }

    #[test]
    fn scales_for_low_rates() {
        assert_eq!(
            SpectralConfig::for_sample_rate(48_000).scales,
            vec![2048, 1024, 512, 256, 128]
        );
        assert_eq!(
            SpectralConfig::for_sample_rate(16_000).scales,
            vec![512, 256, 128, 64, 32]
        );
        SpectralConfig::for_sample_rate(8_000).validate().unwrap();
    }

    #[test]
    fn kl_closed_form_values() {
        let q = DiagonalGaussian::new(vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 4f64.ln()]).unwrap();
        let kl = kl_diag_gaussian(&q);
        assert_eq!(kl[0], 0.0);
        assert!((kl[1] - 0.5).abs() < 1e-15);
        assert!((kl[2] - 0.5 * (4.0 - 4f64.ln() - 1.0)).abs() < 1e-12);
        assert!((kl[2] - 0.8069).abs() < 1e-4);
    }

    #[test]
    fn reparameterize_limits() {
        let q = DiagonalGaussian::new(vec![0.3, -1.2], vec![-40.0, -40.0]).unwrap();
        let z = reparameterize(&q, &[1.5, -2.0]).unwrap();
        assert!((z[0] - 0.3).abs() < 1e-8 && (z[1] + 1.2).abs() < 1e-8);
        assert_eq!(reparameterize(&q, &[0.0, 0.0]).unwrap(), vec![0.3, -1.2]);
        let unit = DiagonalGaussian::new(vec![0.0, 0.0], vec![0.0, 0.0]).unwrap();
        assert_eq!(
            reparameterize(&unit, &[1.0, -1.0]).unwrap(),
            vec![1.0, -1.0]
        );
        assert!(reparameterize(&unit, &[1.0]).is_err());
    }

    #[test]
    fn dequantize_bounds_and_determinism() {
        let x = Waveform::silence(10_000, 16_000);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y = dequantize(&x, 16, &mut rng).unwrap();
        let bound = 2f32.powi(-16);
        assert!(y.samples.iter().all(|v| v.abs() <= bound));
        let y2 = dequantize(&x, 16, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(y, y2);
        assert!(dequantize(&x, 7, &mut rng).is_err());
        assert!(dequantize(&x, 25, &mut rng).is_err());
    }

    #[test]
    fn dequantize_noise_is_centered() {
        let n = 1_000_000;
        let x = Waveform::silence(n, 16_000);
        let bits = 8;
        let y = dequantize(&x, bits, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let q = 2f64.powi(1 - bits as i32);
        let mean = y.samples.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * q / (12.0 * n as f64).sqrt());
    }

    #[test]
    fn zero_coefficient_allpass_is_a_delay() {
        let x = noise(100, 13);
        let y = allpass_cascade(&x, &[0.0; ALLPASS_SECTIONS]);
        assert!(y[..ALLPASS_SECTIONS].iter().all(|&v| v == 0.0));
        assert_eq!(&y[ALLPASS_SECTIONS..], &x[..100 - ALLPASS_SECTIONS]);
    }

    #[test]
    fn allpass_preserves_sine_amplitude() {
        let x = sine(1000.0, 16_000, 32_000);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..10 {
            let y = random_allpass(&Waveform::new(x.clone(), 16_000).unwrap(), &mut rng);
            let a = rms(&x[8000..24000]);
            let b = rms(&y.samples[8000..24000]);
            assert!((a - b).abs() / a < 0.01, "{a} vs {b}");
            assert_eq!(y.len(), x.len());
        }
    }

    #[test]
    fn allpass_preserves_white_noise_spectrum() {
        let len = 1 << 16;
        let x = noise(len, 15);
        let y = allpass_cascade(&x, &[0.7, -0.4, 0.85, -0.9]);
        // Welch average of power spectra over 256-sample segments, 8 coarse bands
        let welch = |s: &[f32]| {
            let seg = 256;
            let mut acc = vec![0.0; seg / 2 + 1];
            let mut count = 0;
            for start in (seg..len - seg).step_by(seg / 2) {
                let spec = stft_amplitude(&s[start..start + seg], seg, WindowKind::Hann).unwrap();
                for (a, m) in acc.iter_mut().zip(&spec.magnitudes) {
                    *a += m * m;
                }
                count += 1;
            }
            acc.iter().map(|a| a / count as f64).collect::<Vec<_>>()
        };
        let px = welch(&x);
        let py = welch(&y);
        for band in 0..8 {
            let r = 1 + band * 16..1 + (band + 1) * 16;
            let ex: f64 = px[r.clone()].iter().sum();
            let ey: f64 = py[r].iter().sum();
            let db = 10.0 * (ey / ex).log10();
            assert!(db.abs() < 0.5, "band {band}: {db} dB");
        }
    }

    #[test]
    fn crop_identity_and_reproducibility() {
        let x = Waveform::new(noise(1000, 16), 16_000).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_crop(&x, 1000, &mut rng).unwrap(), x);
        let a = random_crop(&x, 100, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = random_crop(&x, 100, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            random_crop(&x, 1001, &mut rng),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn crop_offsets_are_uniform() {
        // index samples so the crop's first value reveals its offset
        let x = Waveform::new((0..1000).map(|i| i as f32).collect(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let bins = 10;
        let mut counts = vec![0usize; bins];
        let draws = 10_000;
        for _ in 0..draws {
            let c = random_crop(&x, 100, &mut rng).unwrap();
            let offset = c.samples[0] as usize;
            assert!(offset <= 900);
            counts[(offset * bins / 901).min(bins - 1)] += 1;
        }
        let expected = draws as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // chi-square critical value, 9 degrees of freedom, alpha = 0.01
        assert!(chi2 < 21.666, "chi2 = {chi2}");
    }

    #[test]
    fn waveform_rejects_nan() {
        assert!(Waveform::new(vec![0.0, f32::NAN], 16_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }
}
