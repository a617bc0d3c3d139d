use crate::autograd::{Graph, Real, Tensor, Var};
use crate::dsp::SpectralConfig;
use crate::error::{shape_err, Result};
use crate::model::mean_of;

/// `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))`.
pub fn hinge_discriminator(real: &[f64], fake: &[f64]) -> f64 {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| {
        v.iter().map(|&x| f(x)).sum::<f64>() / v.len().max(1) as f64
    };
    mean(real, &|r| (1.0 - r).max(0.0)) + mean(fake, &|f| (1.0 + f).max(0.0))
}

/// `-mean(fake)`.
pub fn hinge_generator(fake: &[f64]) -> f64 {
    -fake.iter().sum::<f64>() / fake.len().max(1) as f64
}

/// KL weight at `step`: linear ramp from 0, reaching `beta` at `warmup`.
pub fn beta_schedule(beta: f64, warmup: usize, step: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        beta
    } else {
        beta * step as f64 / warmup as f64
    }
}

/// Batch mean of the multiscale spectral distance between a fixed `target`
/// (`[B, 1, N]`) and the graph audio `y`.
pub fn spectral_loss<T: Real>(
    g: &mut Graph<T>,
    target: &Tensor<T>,
    y: Var,
    cfg: &SpectralConfig,
) -> Result<Var> {
    cfg.validate()?;
    if g.shape(y) != target.shape() {
        return Err(shape_err!(
            "spectral loss on {:?} and {:?}",
            target.shape(),
            g.shape(y)
        ));
    }
    let (b, _, _) = target.dims3()?;
    let eps = T::of(cfg.epsilon);
    let xt = g.constant(target.clone());
    let mut per_scale = Vec::new();
    for &n in &cfg.scales {
        let xs = g.stft_magnitude(xt, n, cfg.window)?;
        let norms: Vec<T> = g
            .value(xs)
            .data()
            .chunks(g.value(xs).len() / b)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt() + eps)
            .collect();
        let ys = g.stft_magnitude(y, n, cfg.window)?;
        let diff = g.sub(xs, ys)?;
        let sq = g.square(diff);
        let fro = g.sum_rows(sq);
        let fro = g.sqrt(fro);
        let denom = g.constant(Tensor::from_vec(&[b], norms)?);
        let rel = g.div(fro, denom)?;
        let ab = g.abs(diff);
        let l1 = g.sum_rows(ab);
        let l1 = g.offset(l1, eps);
        let lg = g.log(l1);
        let term = g.add(rel, lg)?;
        per_scale.push(g.mean(term));
    }
    let avg = mean_of(g, &per_scale)?;
    // mean over scales times the scale count is the sum over scales
    Ok(g.scale(avg, T::of(cfg.scales.len() as f64)))
}

/// KL to the standard normal: summed over latent channels, averaged over
/// batch and frames.
pub fn kl_loss<T: Real>(g: &mut Graph<T>, mean: Var, logvar: Var) -> Result<Var> {
    let (b, _, f) = g.value(mean).dims3()?;
    let m2 = g.square(mean);
    let ev = g.exp(logvar);
    let a = g.add(m2, ev)?;
    let a = g.sub(a, logvar)?;
    let a = g.offset(a, -T::one());
    let s = g.sum(a);
    Ok(g.scale(s, T::of(0.5 / (b * f).max(1) as f64)))
}

/// Hinge discriminator loss averaged over scales.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, real: &[Var], fake: &[Var]) -> Result<Var> {
    let mut terms = Vec::new();
    for (&r, &f) in real.iter().zip(fake) {
        let nr = g.scale(r, -T::one());
        let nr = g.offset(nr, T::one());
        let nr = g.relu(nr);
        let a = g.mean(nr);
        let pf = g.offset(f, T::one());
        let pf = g.relu(pf);
        let b = g.mean(pf);
        terms.push(g.add(a, b)?);
    }
    mean_of(g, &terms)
}

/// Negative mean fake logit, averaged over scales.
pub fn generator_loss<T: Real>(g: &mut Graph<T>, fake: &[Var]) -> Result<Var> {
    let terms: Vec<Var> = fake.iter().map(|&f| g.mean(f)).collect();
    let m = mean_of(g, &terms)?;
    Ok(g.scale(m, -T::one()))
}
