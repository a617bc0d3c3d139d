//! Randomized finite-difference cases for every graph operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rave_core::autograd::check::{check_inputs, GradReport};
use rave_core::autograd::{ConvSpec, Graph, Tensor, Var};
use rave_core::dsp::WindowKind;
use rave_core::Result;

pub const H: f64 = 1e-4;
/// Step for whole networks: with hundreds of leaky-ReLU units a 1e-4 step
/// regularly straddles a kink, which corrupts the difference quotient.
pub const H_NETWORK: f64 = 1e-7;

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Uniform values with magnitude in [lo, 1], random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.2..2.0)).collect()).unwrap()
}

/// Scalarizes `v` as `sum(v * w)` for a fixed random `w`.
fn project(g: &mut Graph<f64>, v: Var, w: &Tensor<f64>) -> Result<Var> {
    let c = g.constant(w.clone());
    let p = g.mul(v, c)?;
    Ok(g.sum(p))
}

fn unary_case(seed: u64, kind: &str) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 5];
    let x = match kind {
        "log" | "sqrt" => positive(&mut rng, &shape),
        "abs" | "leaky_relu" | "relu" => away_from_zero(&mut rng, &shape, 0.01),
        "clamp" => {
            // keep clear of the bounds at +-0.5
            let mut t = randn(&mut rng, &shape);
            for v in t.data_mut() {
                if (v.abs() - 0.5).abs() < 0.01 {
                    *v += 0.05;
                }
            }
            t
        }
        _ => randn(&mut rng, &shape),
    };
    let w = randn(&mut rng, &shape);
    let kind = kind.to_string();
    check_inputs(&[x], H, move |g, v| {
        let y = match kind.as_str() {
            "exp" => g.exp(v[0]),
            "log" => g.log(v[0]),
            "sqrt" => g.sqrt(v[0]),
            "abs" => g.abs(v[0]),
            "tanh" => g.tanh(v[0]),
            "sigmoid" => g.sigmoid(v[0]),
            "leaky_relu" => g.leaky_relu(v[0], 0.2),
            "relu" => g.relu(v[0]),
            "clamp" => g.clamp(v[0], -0.5, 0.5),
            "square" => g.square(v[0]),
            "scale" => g.scale(v[0], -1.7),
            "offset" => g.offset(v[0], 0.3),
            other => panic!("unknown unary {other}"),
        };
        project(g, y, &w)
    })
}

fn binary_case(seed: u64, kind: &str) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 4];
    let a = randn(&mut rng, &shape);
    let b = if kind == "div" {
        positive(&mut rng, &shape)
    } else {
        randn(&mut rng, &shape)
    };
    let w = randn(&mut rng, &shape);
    let kind = kind.to_string();
    check_inputs(&[a, b], H, move |g, v| {
        let y = match kind.as_str() {
            "add" => g.add(v[0], v[1])?,
            "sub" => g.sub(v[0], v[1])?,
            "mul" => g.mul(v[0], v[1])?,
            "div" => g.div(v[0], v[1])?,
            other => panic!("unknown binary {other}"),
        };
        project(g, y, &w)
    })
}

fn mul_channel_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = randn(&mut rng, &[2, 3, 6]);
    let e = randn(&mut rng, &[2, 1, 6]);
    let w = randn(&mut rng, &[2, 3, 6]);
    check_inputs(&[a, e], H, move |g, v| {
        let y = g.mul_channel(v[0], v[1])?;
        project(g, y, &w)
    })
}

fn reduction_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, &[3, 2, 4]);
    let w = randn(&mut rng, &[3]);
    check_inputs(&[x], H, move |g, v| {
        let rows = g.sum_rows(v[0]);
        let a = project(g, rows, &w)?;
        let m = g.mean(v[0]);
        let sq = g.square(v[0]);
        let s = g.sum(sq);
        let t = g.add(a, m)?;
        g.add(t, s)
    })
}

fn layout_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = rng.gen_range(4..10);
    let start = rng.gen_range(0..t / 2);
    let len = rng.gen_range(1..=t - start);
    let a = randn(&mut rng, &[2, 3, t]);
    let b = randn(&mut rng, &[2, 3, 3]);
    let pooled_len = (len + 3) / 2;
    let w = randn(&mut rng, &[2, 3, pooled_len]);
    let w2 = randn(&mut rng, &[6, t]);
    check_inputs(&[a, b], H, move |g, v| {
        let s = g.slice_time(v[0], start, len)?;
        let c = g.concat_time(s, v[1])?;
        let p = g.avg_pool2(c)?;
        let first = project(g, p, &w)?;
        let r = g.reshape(v[0], &[6, t])?;
        let second = project(g, r, &w2)?;
        g.add(first, second)
    })
}

fn conv_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = [1, 2][rng.gen_range(0..2)];
    let cin = 2 * groups;
    let cout = 2 * groups;
    let k = rng.gen_range(1..5);
    let stride = rng.gen_range(1..4);
    let dilation = rng.gen_range(1..3);
    let spec = ConvSpec {
        stride,
        pad_left: rng.gen_range(0..3),
        pad_right: rng.gen_range(0..3),
        dilation,
        groups,
    };
    let t = dilation * (k - 1) + rng.gen_range(1..12);
    let t_out = spec.out_len(t, k).unwrap();
    let x = randn(&mut rng, &[2, cin, t]);
    let wt = randn(&mut rng, &[cout, cin / groups, k]);
    let b = randn(&mut rng, &[cout]);
    let w = randn(&mut rng, &[2, cout, t_out]);
    check_inputs(&[x, wt, b], H, move |g, v| {
        let y = g.conv1d(v[0], v[1], Some(v[2]), spec)?;
        project(g, y, &w)
    })
}

fn conv_transpose_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let stride = rng.gen_range(1..4);
    let k = rng.gen_range(1..7);
    let t = rng.gen_range(2..6);
    let trim = rng.gen_range(0..k);
    let out_len = t * stride;
    let x = randn(&mut rng, &[2, cin, t]);
    let wt = randn(&mut rng, &[cin, cout, k]);
    let b = randn(&mut rng, &[cout]);
    let w = randn(&mut rng, &[2, cout, out_len]);
    check_inputs(&[x, wt, b], H, move |g, v| {
        let y = g.conv_transpose1d(v[0], v[1], Some(v[2]), stride, trim, out_len)?;
        project(g, y, &w)
    })
}

fn batch_norm_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, &[3, 2, 5]);
    let gamma = randn(&mut rng, &[2]);
    let beta = randn(&mut rng, &[2]);
    let w = randn(&mut rng, &[3, 2, 5]);
    let w2 = randn(&mut rng, &[3, 2, 5]);
    let rm = vec![0.1, -0.2];
    let rv = vec![0.7, 1.3];
    check_inputs(&[x, gamma, beta], H, move |g, v| {
        let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
        let a = project(g, y, &w)?;
        let e = g.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)?;
        let b = project(g, e, &w2)?;
        g.add(a, b)
    })
}

fn stft_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = [8, 16][rng.gen_range(0..2)];
    let len = rng.gen_range(n / 2..3 * n);
    let x = randn(&mut rng, &[2, 1, len]);
    let frames = rave_core::dsp::frame_count(len, n);
    let w = randn(&mut rng, &[2, frames, n / 2 + 1]);
    check_inputs(&[x], H, move |g, v| {
        let s = g.stft_magnitude(v[0], n, WindowKind::Hann)?;
        project(g, s, &w)
    })
}

fn filtered_noise_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (bands, nb, frames, frame) = (2, 3, 3, 4);
    let amp = randn(&mut rng, &[2, bands * nb, frames]);
    let noise = randn(&mut rng, &[2, bands, frames * frame]);
    let with_tail = rng.gen_bool(0.5);
    let out_len = frames * frame + if with_tail { 2 * nb } else { 0 };
    let w = randn(&mut rng, &[2, bands, out_len]);
    check_inputs(&[amp], H, move |g, v| {
        let y = g.filtered_noise(v[0], noise.clone(), nb, frame, with_tail)?;
        project(g, y, &w)
    })
}

/// Three convolutions with nonlinearities and a squared loss.
fn conv_net_case(seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = randn(&mut rng, &[2, 2, 16]);
    let w1 = randn(&mut rng, &[4, 2, 3]);
    let w2 = randn(&mut rng, &[4, 4, 3]);
    let w3 = randn(&mut rng, &[1, 4, 1]);
    let target = randn(&mut rng, &[2, 1, 8]);
    check_inputs(&[x, w1, w2, w3], H, move |g, v| {
        let h = g.conv1d(v[0], v[1], None, ConvSpec::causal(3, 1, 1))?;
        let h = g.tanh(h);
        let h = g.conv1d(h, v[2], None, ConvSpec::causal(3, 2, 1))?;
        let h = g.sigmoid(h);
        let y = g.conv1d(h, v[3], None, ConvSpec::unit())?;
        let t = g.constant(target.clone());
        let d = g.sub(y, t)?;
        let d = g.square(d);
        Ok(g.mean(d))
    })
}

pub type Case = (&'static str, fn(u64) -> Result<GradReport>);

pub fn cases() -> Vec<Case> {
    vec![
        ("exp", |s| unary_case(s, "exp")),
        ("log", |s| unary_case(s, "log")),
        ("sqrt", |s| unary_case(s, "sqrt")),
        ("abs", |s| unary_case(s, "abs")),
        ("tanh", |s| unary_case(s, "tanh")),
        ("sigmoid", |s| unary_case(s, "sigmoid")),
        ("leaky_relu", |s| unary_case(s, "leaky_relu")),
        ("relu", |s| unary_case(s, "relu")),
        ("clamp", |s| unary_case(s, "clamp")),
        ("square", |s| unary_case(s, "square")),
        ("scale", |s| unary_case(s, "scale")),
        ("offset", |s| unary_case(s, "offset")),
        ("add", |s| binary_case(s, "add")),
        ("sub", |s| binary_case(s, "sub")),
        ("mul", |s| binary_case(s, "mul")),
        ("div", |s| binary_case(s, "div")),
        ("mul_channel", mul_channel_case),
        ("reductions", reduction_case),
        ("layout", layout_case),
        ("conv1d", conv_case),
        ("conv_transpose1d", conv_transpose_case),
        ("batch_norm", batch_norm_case),
        ("stft_magnitude", stft_case),
        ("filtered_noise", filtered_noise_case),
        ("conv_net", conv_net_case),
        ("encoder_decoder", composed::encoder_decoder),
        ("discriminator", composed::discriminator),
    ]
}

/// Worst relative error of every case over `seeds` seeds.
pub fn run_all(seeds: u64) -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|(name, f)| {
            let worst = (0..seeds)
                .map(|s| {
                    f(s).unwrap_or_else(|e| panic!("{name} seed {s}: {e}"))
                        .max_rel_error
                })
                .fold(0.0, f64::max);
            (name, worst)
        })
        .collect()
}

pub mod composed {
    use super::*;
    use rave_core::autograd::check::check_params;
    use rave_core::autograd::ParamStore;
    use rave_core::model::{feature_matching, Ctx, Mode, ModelConfig, Rave};
    use rave_core::pqmf::{PqmfBank, PrototypeFilter};

    /// A few-channel model that exercises every layer type.
    pub fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            sample_rate: 8000,
            bands: 2,
            pqmf_taps: 16,
            encoder_hidden: vec![3, 4],
            encoder_strides: vec![2, 2],
            latent_dim: 2,
            decoder_hidden: vec![4, 3, 3],
            decoder_ratios: vec![2, 2],
            residual_dilations: vec![1, 3],
            noise_bands: 2,
            noise_ratios: vec![2],
            discriminator_scales: 2,
            discriminator_channels: vec![4, 4, 8],
            discriminator_kernel: 5,
            seed,
        }
    }

    pub fn tiny_model(seed: u64) -> Rave {
        let bank = PqmfBank::new(PrototypeFilter::kaiser_sinc(16, 5.0, 0.25), 2).unwrap();
        Rave::with_bank(tiny_config(seed), bank).unwrap()
    }

    fn inputs(seed: u64) -> (Rave, ParamStore<f64>, Tensor<f64>, Tensor<f64>, ChaCha8Rng) {
        let model = tiny_model(seed);
        let store = model.params.cast::<f64>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
        let x = randn(&mut rng, &[2, 1, 32]);
        let eps = randn(&mut rng, &[2, 2, 4]);
        (model, store, x, eps, rng)
    }

    pub fn encoder_decoder(seed: u64) -> Result<GradReport> {
        let (model, mut store, x, eps, mut rng) = inputs(seed);
        let w = randn(&mut rng, &[2, 1, 32]);
        let mut ids = model.encoder_params();
        ids.extend(model.decoder_params());
        check_params(&mut store, &ids, 3, H_NETWORK, &mut rng, |g, st| {
            let mut cx = Ctx::new(g, st, Mode::Train);
            let xv = cx.g.constant(x.clone());
            let post = model.encode_vars(&mut cx, xv)?;
            let half = cx.g.scale(post.logvar, 0.5);
            let std = cx.g.exp(half);
            let e = cx.g.constant(eps.clone());
            let noise = cx.g.mul(std, e)?;
            let z = cx.g.add(post.mean, noise)?;
            let (_, audio) = model.decode_vars(&mut cx, z, 7)?;
            let wv = cx.g.constant(w.clone());
            let p = cx.g.mul(audio, wv)?;
            let p = cx.g.sum(p);
            let m2 = cx.g.square(post.mean);
            let kl = cx.g.mean(m2);
            cx.g.add(p, kl)
        })
    }

    pub fn discriminator(seed: u64) -> Result<GradReport> {
        let (model, mut store, _, _, mut rng) = inputs(seed);
        let len = model.discriminator.min_input_len().next_multiple_of(16);
        let real = randn(&mut rng, &[2, 1, len]);
        let fake = randn(&mut rng, &[2, 1, len]);
        let ids = model.discriminator_params();
        check_params(&mut store, &ids, 3, H_NETWORK, &mut rng, |g, st| {
            let mut cx = Ctx::new(g, st, Mode::Train);
            let r = cx.g.constant(real.clone());
            let f = cx.g.constant(fake.clone());
            let dr = model.discriminator.forward(&mut cx, r)?;
            let df = model.discriminator.forward(&mut cx, f)?;
            let fm = feature_matching(cx.g, &dr, &df)?;
            let mut acc = fm;
            for (&a, &b) in dr.logits.iter().zip(&df.logits) {
                let d = cx.g.sub(a, b)?;
                let s = cx.g.mean(d);
                acc = cx.g.add(acc, s)?;
            }
            Ok(acc)
        })
    }
}
