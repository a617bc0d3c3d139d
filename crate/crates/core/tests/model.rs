mod common;

use common::grad_cases::composed::tiny_model;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rave_core::autograd::kernels::noise_fir_basis;
use rave_core::autograd::{Graph, Tensor};
use rave_core::model::{
    feature_matching, noise_block, Ctx, DiscriminatorVars, Mode, ModelConfig, Rave,
};
use rave_core::pqmf::MultibandSignal;

fn desk() -> Rave {
    Rave::new(ModelConfig::desk()).unwrap()
}

fn noise_clip(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

#[test]
fn studio_structure() {
    let cfg = ModelConfig::studio();
    cfg.validate().unwrap();
    assert_eq!(cfg.total_downsampling(), 2048);
    assert_eq!(cfg.latent_rate(), 23.4375);
    assert_eq!(48_000 / cfg.total_downsampling(), 23);
    assert_eq!(
        cfg.decoder_ratios.iter().product::<usize>() * cfg.bands,
        2048
    );
}

#[test]
fn studio_model_size_and_decode_length() {
    let model = Rave::new(ModelConfig::studio()).unwrap();
    let n = model.parameter_count();
    assert!((15_000_000..=20_000_000).contains(&n), "{n} parameters");
    let z = Tensor::zeros(&[1, 128, 10]);
    let audio = model.decode(&z, 0).unwrap();
    assert_eq!(audio.shape(), &[1, 1, 20480]);
}

#[test]
fn graph_filter_bank_matches_the_polyphase_bank() {
    let model = desk();
    let x = noise_clip(2048, 1);
    let mut g: Graph<f32> = Graph::new();
    let xv = g.constant(Tensor::from_vec(&[1, 1, x.len()], x.clone()).unwrap());
    let bands = model.analysis(&mut g, xv).unwrap();
    let reference = model.pqmf.analyze(&x);
    let m = model.config.bands;
    let got = g.value(bands).data();
    for k in 0..m {
        for (i, &r) in reference.bands[k].iter().enumerate() {
            assert!((got[k * reference.band_len() + i] - r).abs() < 1e-4);
        }
    }
    let audio = model.synthesis(&mut g, bands).unwrap();
    let sig = MultibandSignal {
        bands: reference.bands.clone(),
        band_rate: 0.0,
    };
    let back = model.pqmf.synthesize(&sig).unwrap();
    for (a, b) in g.value(audio).data().iter().zip(&back) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn encode_decode_round_trip_shape() {
    let model = desk();
    let f = model.config.total_downsampling();
    let x = noise_clip(4 * f, 2);
    let (mean, logvar) = model.encode(&[&x]).unwrap();
    assert_eq!(mean.shape(), &[1, 32, 4]);
    assert_eq!(logvar.shape(), &[1, 32, 4]);
    assert!(logvar.data().iter().all(|v| (-14.0..=6.0).contains(v)));
    let y = model.decode(&mean, 3).unwrap();
    assert_eq!(y.len(), x.len());
}

#[test]
fn misaligned_input_is_a_shape_error() {
    let model = desk();
    let x = noise_clip(model.config.total_downsampling() + 3, 2);
    assert_eq!(model.encode(&[&x]).unwrap_err().class(), "ShapeError");
}

#[test]
fn eval_encoding_ignores_batch_companions() {
    let model = desk();
    let n = 2 * model.config.total_downsampling();
    let zero = vec![0.0; n];
    let other = noise_clip(n, 5);
    let (alone, _) = model.encode(&[&zero]).unwrap();
    let (paired, _) = model.encode(&[&zero, &other]).unwrap();
    assert_eq!(alone.data(), &paired.data()[..alone.len()]);
}

#[test]
fn wrong_latent_width_is_rejected() {
    let model = desk();
    assert!(model.decode(&Tensor::zeros(&[1, 5, 2]), 0).is_err());
}

#[test]
fn closed_loudness_gate_leaves_only_noise() {
    let mut model = desk();
    let bias = model.decoder.loudness.bias.unwrap();
    model.params.value_mut(bias).data_mut()[0] = -1e4;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z = Tensor::from_vec(
        &[1, 32, 3],
        (0..96).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let mut g = Graph::new();
    let zv = g.constant(z);
    let mut cx = Ctx::new(&mut g, &model.params, Mode::Eval);
    let (out, _) = model.decode_vars(&mut cx, zv, 11).unwrap();
    assert!(g.value(out.harmonic).data().iter().all(|v| *v == 0.0));
    assert_eq!(g.value(out.bands), g.value(out.noise));
}

#[test]
fn gated_waveform_is_bounded() {
    let model = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = Tensor::from_vec(
        &[2, 32, 4],
        (0..256).map(|_| rng.gen_range(-20.0..20.0)).collect(),
    )
    .unwrap();
    let mut g = Graph::new();
    let zv = g.constant(z);
    let mut cx = Ctx::new(&mut g, &model.params, Mode::Eval);
    let (out, _) = model.decode_vars(&mut cx, zv, 0).unwrap();
    assert!(g.value(out.harmonic).max_abs() <= 1.0);
}

fn run_noise(amp: Tensor<f64>, noise: Tensor<f64>, nb: usize, frame: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let a = g.constant(amp);
    let y = g.filtered_noise(a, noise, nb, frame, false).unwrap();
    g.value(y).data().to_vec()
}

fn spectrum(x: &[f64], n: usize) -> Vec<f64> {
    // averaged periodogram with a rectangular window, by direct DFT
    let mut acc = vec![0.0; n / 2 + 1];
    for seg in x.chunks_exact(n) {
        for (k, slot) in acc.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, &v) in seg.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            *slot += re * re + im * im;
        }
    }
    acc
}

#[test]
fn zero_amplitudes_give_silence() {
    let noise = noise_block::<f64>(1, 1, 1, 0, 8, 64);
    let y = run_noise(Tensor::zeros(&[1, 16, 8]), noise, 16, 64);
    assert!(y.iter().all(|v| *v == 0.0));
}

#[test]
fn flat_amplitudes_give_a_flat_spectrum() {
    let frames = 256;
    let noise = noise_block::<f64>(2, 1, 1, 0, frames, 64);
    let y = run_noise(Tensor::full(&[1, 16, frames], 1.0), noise, 16, 64);
    let s = spectrum(&y[64..], 64);
    let inner = &s[1..32];
    let mean = inner.iter().sum::<f64>() / inner.len() as f64;
    for (k, v) in inner.iter().enumerate() {
        let db = 10.0 * (v / mean).log10();
        assert!(db.abs() < 3.0, "bin {}: {db:.2} dB", k + 1);
    }
}

#[test]
fn single_noise_band_peaks_inside_its_band() {
    let nb = 16;
    let frames = 256;
    for band in [2, 5, 11] {
        let mut amp = Tensor::zeros(&[1, nb, frames]);
        for f in 0..frames {
            amp.data_mut()[band * frames + f] = 1.0;
        }
        let noise = noise_block::<f64>(3, 1, 1, 0, frames, 64);
        let y = run_noise(amp, noise, nb, 64);
        let n = 256;
        let s = spectrum(&y[64..], n);
        let peak = s
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0 as f64
            / n as f64;
        let centre = band as f64 / (2 * nb) as f64;
        assert!(
            (peak - centre).abs() <= 0.5 / (2 * nb) as f64,
            "band {band}: peak at {peak}"
        );
    }
}

#[test]
fn noise_in_one_filter_bank_band_stays_in_that_band() {
    let model = desk();
    let m = model.config.bands;
    let nb = model.config.noise_bands;
    let frame = model.config.noise_frame();
    let frames = 128;
    for band in [0, 3, m - 1] {
        let mut amp = Tensor::<f64>::zeros(&[1, m * nb, frames]);
        for j in 0..nb {
            for f in 0..frames {
                amp.data_mut()[(band * nb + j) * frames + f] = 1.0;
            }
        }
        let noise = noise_block::<f64>(4, 1, m, 0, frames, frame);
        let mut g = Graph::new();
        let a = g.constant(amp);
        let y = g.filtered_noise(a, noise, nb, frame, false).unwrap();
        let per_band: Vec<f64> = g
            .value(y)
            .data()
            .chunks(frames * frame)
            .map(|c| c.iter().map(|v| v * v).sum())
            .collect();
        let total: f64 = per_band.iter().sum();
        assert!(per_band[band] / total >= 0.9);
        let audio = model.synthesis(&mut g, y).unwrap();
        let x = &g.value(audio).data()[model.latency()..];
        let n = 512;
        let s = spectrum(x, n);
        let total: f64 = s.iter().sum();
        let width = n as f64 / (2 * m) as f64;
        let lo = (band as f64 * width) as usize;
        let hi = ((band + 1) as f64 * width) as usize;
        let inside: f64 = s[lo..=hi.min(n / 2)].iter().sum();
        assert!(inside / total >= 0.9, "band {band}: {:.3}", inside / total);
    }
}

#[test]
fn noise_basis_has_the_expected_length() {
    assert_eq!(noise_fir_basis(16).len(), 16 * 33);
}

#[test]
fn noise_blocks_compose_across_partitions() {
    let whole = noise_block::<f32>(9, 2, 3, 0, 6, 4);
    let a = noise_block::<f32>(9, 2, 3, 0, 2, 4);
    let b = noise_block::<f32>(9, 2, 3, 2, 4, 4);
    assert_eq!(&a.concat_time(&b).unwrap(), &whole);
}

fn discriminate(model: &Rave, x: &Tensor<f32>) -> (Vec<Tensor<f32>>, Vec<Vec<Tensor<f32>>>) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let mut cx = Ctx::new(&mut g, &model.params, Mode::Eval);
    let out = model.discriminator.forward(&mut cx, xv).unwrap();
    (
        out.logits.iter().map(|v| g.value(*v).clone()).collect(),
        out.features
            .iter()
            .map(|fs| fs.iter().map(|v| g.value(*v).clone()).collect())
            .collect(),
    )
}

#[test]
fn discriminator_shapes() {
    let model = desk();
    let x = Tensor::from_vec(&[1, 1, 8192], noise_clip(8192, 6)).unwrap();
    let (logits, features) = discriminate(&model, &x);
    assert_eq!(logits.len(), 3);
    let lens: Vec<usize> = logits.iter().map(|l| l.shape()[2]).collect();
    assert_eq!(lens, vec![32, 16, 8]);
    for f in &features {
        assert_eq!(f.len(), model.discriminator.scales[0].layers.len() - 1);
    }
    let (again, _) = discriminate(&model, &x);
    assert_eq!(logits, again);
}

#[test]
fn discriminator_rejects_short_input() {
    let model = desk();
    let mut g = Graph::new();
    let xv = g.constant(Tensor::<f32>::zeros(&[1, 1, 4]));
    let mut cx = Ctx::new(&mut g, &model.params, Mode::Eval);
    assert!(model.discriminator.forward(&mut cx, xv).is_err());
}

fn fm_value(real: &[Vec<Tensor<f64>>], fake: &[Vec<Tensor<f64>>]) -> f64 {
    let mut g = Graph::new();
    let wrap = |g: &mut Graph<f64>, t: &[Vec<Tensor<f64>>]| DiscriminatorVars {
        logits: vec![],
        features: t
            .iter()
            .map(|fs| fs.iter().map(|f| g.constant(f.clone())).collect())
            .collect(),
    };
    let r = wrap(&mut g, real);
    let f = wrap(&mut g, fake);
    let v = feature_matching(&mut g, &r, &f).unwrap();
    g.value(v).item()
}

fn random_features(rng: &mut ChaCha8Rng) -> Vec<Vec<Tensor<f64>>> {
    let lens = [[5usize, 3], [4, 2]];
    lens.iter()
        .map(|ls| {
            ls.iter()
                .map(|&l| {
                    Tensor::from_vec(
                        &[1, 2, l],
                        (0..2 * l).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    )
                    .unwrap()
                })
                .collect()
        })
        .collect()
}

#[test]
fn feature_matching_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let real = random_features(&mut rng);
    assert_eq!(fm_value(&real, &real), 0.0);
    let shifted: Vec<Vec<Tensor<f64>>> = real
        .iter()
        .map(|fs| {
            fs.iter()
                .map(|f| {
                    Tensor::from_vec(f.shape(), f.data().iter().map(|v| v + 1.0).collect()).unwrap()
                })
                .collect()
        })
        .collect();
    assert!((fm_value(&real, &shifted) - 1.0).abs() < 1e-12);
    let fake = random_features(&mut rng);
    let mut layer_means = Vec::new();
    for (rs, fs) in real.iter().zip(&fake) {
        for (r, f) in rs.iter().zip(fs) {
            let s: f64 = r
                .data()
                .iter()
                .zip(f.data())
                .map(|(a, b)| (a - b).abs())
                .sum();
            layer_means.push(s / r.len() as f64);
        }
    }
    let oracle = layer_means.iter().sum::<f64>() / layer_means.len() as f64;
    assert!((fm_value(&real, &fake) - oracle).abs() < 1e-6);
}

#[test]
fn feature_matching_rejects_structure_mismatch() {
    let mut g: Graph<f64> = Graph::new();
    let a = g.constant(Tensor::zeros(&[1, 1, 2]));
    let r = DiscriminatorVars {
        logits: vec![],
        features: vec![vec![a, a]],
    };
    let f = DiscriminatorVars {
        logits: vec![],
        features: vec![vec![a]],
    };
    assert!(feature_matching(&mut g, &r, &f).is_err());
}

#[test]
fn tiny_model_initialisation_is_seeded() {
    let a = tiny_model(3);
    let b = tiny_model(3);
    let c = tiny_model(4);
    let w = a.decoder.wave.weight;
    assert_eq!(a.params.value(w), b.params.value(w));
    assert_ne!(a.params.value(w), c.params.value(w));
}
