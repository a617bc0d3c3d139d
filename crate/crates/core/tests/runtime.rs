mod common;

use common::fixtures::{sine_clips, tiny_model};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rave_core::autograd::Tensor;
use rave_core::dsp::Waveform;
use rave_core::model::{ModelConfig, Rave};
use rave_core::runtime::{
    bench_decoder, bench_throughput, stream_decode, timbre_transfer, transposed_context, BenchMode,
    BenchReport, StreamState,
};
use rave_core::Error;

fn latents(seed: u64, d: usize, frames: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(
        &[1, d, frames],
        (0..d * frames).map(|_| rng.gen_range(-2.0..2.0)).collect(),
    )
    .unwrap()
}

fn streamed(model: &Rave, z: &Tensor<f32>, sizes: &[usize], seed: u64) -> Vec<f32> {
    let mut state = StreamState::new(model, seed);
    let mut out = Vec::new();
    let mut start = 0;
    for &n in sizes {
        let block = z.slice_time(start, n).unwrap();
        let y = stream_decode(model, &mut state, &block).unwrap();
        assert_eq!(y.shape()[2], n * model.config.total_downsampling());
        out.extend_from_slice(y.data());
        start += n;
    }
    out
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

#[test]
fn streaming_matches_offline_decode_on_tiny_model() {
    let model = tiny_model(1);
    let z = latents(2, 2, 14);
    let offline = model.decode(&z, 9).unwrap();
    for sizes in [
        vec![1; 14],
        vec![2; 7],
        vec![4, 4, 4, 2],
        vec![7, 7],
        vec![3, 1, 5, 5],
    ] {
        let s = streamed(&model, &z, &sizes, 9);
        assert!(max_diff(&s, offline.data()) < 1e-5, "{sizes:?}");
    }
}

#[test]
fn streaming_matches_offline_decode_on_desk_model() {
    let model = Rave::new(ModelConfig::desk()).unwrap();
    let z = latents(3, 32, 16);
    let offline = model.decode(&z, 4).unwrap();
    let s = streamed(&model, &z, &[4, 4, 4, 4], 4);
    assert!(max_diff(&s, offline.data()) < 1e-5);
}

#[test]
fn cache_sizes_follow_layer_contexts() {
    let model = tiny_model(1);
    let mut state = StreamState::new(&model, 0);
    assert!(state.cache_sizes().is_empty());
    stream_decode(&model, &mut state, &latents(1, 2, 1)).unwrap();
    let sizes = state.cache_sizes();
    let dec = &model.decoder;
    assert_eq!(sizes[0], dec.input.context());
    assert_eq!(sizes[1], transposed_context(4, 2));
    assert_eq!(sizes[2], dec.stages[0].units[0].dilated.context());
    assert_eq!(
        *sizes.last().unwrap(),
        transposed_context(model.pqmf.filter_len(), model.config.bands)
    );
    assert_eq!(transposed_context(8, 4), 1);
    assert_eq!(transposed_context(256, 8), 31);
    assert_eq!(state.frames(), 1);
}

#[test]
fn reset_restores_a_fresh_stream() {
    let model = tiny_model(2);
    let z = latents(5, 2, 3);
    let mut a = StreamState::new(&model, 1);
    let first = stream_decode(&model, &mut a, &z).unwrap();
    stream_decode(&model, &mut a, &z).unwrap();
    a.reset();
    let again = stream_decode(&model, &mut a, &z).unwrap();
    assert_eq!(first, again);
    let mut b = StreamState::new(&model, 1);
    assert_eq!(stream_decode(&model, &mut b, &z).unwrap(), first);
}

#[test]
fn silence_latent_gives_bounded_output() {
    let model = Rave::new(ModelConfig::desk()).unwrap();
    let silence = vec![0.0f32; 4 * model.config.total_downsampling()];
    let (mean, _) = model.encode(&[&silence]).unwrap();
    let mut state = StreamState::new(&model, 0);
    let y = stream_decode(&model, &mut state, &mean).unwrap();
    assert!(y.max_abs() <= 1.0);
}

#[test]
fn stream_errors() {
    let model = tiny_model(3);
    let mut state = StreamState::new(&model, 0);
    assert!(matches!(
        stream_decode(&model, &mut state, &latents(0, 3, 2)),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        stream_decode(&model, &mut state, &latents(0, 2, 0)),
        Err(Error::Shape(_))
    ));
    let other = Rave::new(ModelConfig::desk()).unwrap();
    assert!(matches!(
        stream_decode(&other, &mut state, &latents(0, 32, 1)),
        Err(Error::Config(_))
    ));
}

#[test]
fn bench_report_arithmetic() {
    let r = BenchReport {
        sample_rate: 16000,
        samples_per_trial: 16000,
        timings: vec![0.1, 0.1],
    };
    assert!((r.samples_per_second() - 160_000.0).abs() < 1e-6);
    assert!((r.realtime_factor() - 10.0).abs() < 1e-9);
    assert_eq!(r.trials(), 2);
    assert_eq!(r.coefficient_of_variation(), 0.0);
    assert_eq!(r.csv().lines().count(), 1 + 2 + 1);
}

#[test]
fn bench_runs_both_modes() {
    let model = tiny_model(4);
    let full = bench_throughput(&model, BenchMode::Full, 3, 0).unwrap();
    assert_eq!(full.trials(), 3);
    assert!(full.samples_per_trial >= 8000);
    assert!(full.realtime_factor() > 0.0);
    let single = bench_throughput(&model, BenchMode::NoMultiband, 2, 0).unwrap();
    assert_eq!(single.samples_per_trial, full.samples_per_trial);
    assert!(matches!(bench_decoder(&model, 0, 0), Err(Error::Config(_))));
}

#[test]
fn transfer_keeps_length_and_is_deterministic() {
    let model = tiny_model(5);
    let x = sine_clips(8000, 1, 1003).remove(0);
    let a = timbre_transfer(&model, &x, 3).unwrap();
    let b = timbre_transfer(&model, &x, 3).unwrap();
    assert_eq!(a.output.len(), x.len());
    assert_eq!(a.output.samples, b.output.samples);
    assert!(a.kl.mean() >= 0.0);
    let wrong = Waveform::new(vec![0.0; 64], 16000).unwrap();
    assert!(matches!(
        timbre_transfer(&model, &wrong, 0),
        Err(Error::Data(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn any_partition_matches_offline(seed in 0u64..1000, cuts in prop::collection::vec(1usize..5, 1..6)) {
        let model = tiny_model(7);
        let frames: usize = cuts.iter().sum();
        let z = latents(seed, 2, frames);
        let offline = model.decode(&z, seed).unwrap();
        let s = streamed(&model, &z, &cuts, seed);
        prop_assert!(max_diff(&s, offline.data()) < 1e-5);
    }
}
