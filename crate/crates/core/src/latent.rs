//! Latent compaction: a PCA basis of posterior means, the rank needed for a
//! given fidelity, and projection to and from compact coordinates.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::Tensor;
use crate::dsp::{kl_diag_gaussian, DiagonalGaussian, Waveform};
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::Rave;

/// Frames sampled across a dataset to fit the basis.
pub const DEFAULT_BASIS_FRAMES: usize = 4096;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Singular value decomposition `A = U S V^T` of an `n x d` matrix given as
/// `d` columns of length `n`. Returns `(s, v)` with `v` row-major `d x d`
/// (column `j` pairs with `s[j]`), sorted by decreasing singular value.
pub fn svd_values_vectors(columns: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = columns.len();
    let mut a: Vec<Vec<f64>> = columns.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = a.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                for row in v.chunks_mut(d) {
                    let (xp, yq) = (row[p], row[q]);
                    row[p] = c * xp - s * yq;
                    row[q] = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));
    let s = order.iter().map(|&j| norms[j]).collect();
    let mut vs = vec![0.0; d * d];
    for (new, &old) in order.iter().enumerate() {
        let first = (0..d)
            .map(|i| v[i * d + old])
            .find(|x| x.abs() > 1e-12)
            .unwrap_or(1.0);
        let sign = if first < 0.0 { -1.0 } else { 1.0 };
        for i in 0..d {
            vs[i * d + new] = sign * v[i * d + old];
        }
    }
    (s, vs)
}

/// PCA basis of latent frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityBasis {
    pub mean: Vec<f64>,
    /// Row-major `d x d`; column `j` is the `j`-th principal direction.
    pub components: Vec<f64>,
    pub singular_values: Vec<f64>,
}

impl FidelityBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.components.len() != d * d || self.singular_values.len() != d {
            return Err(shape_err!(
                "basis of dim {d} has {} components and {} singular values",
                self.components.len(),
                self.singular_values.len()
            ));
        }
        validate_singular_values(&self.singular_values)
    }

    pub fn rank(&self, fidelity: f64) -> Result<usize> {
        rank_for_fidelity(&self.singular_values, fidelity)
    }
}

fn validate_singular_values(s: &[f64]) -> Result<()> {
    if s.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Numeric(
            "singular values must be finite and nonnegative".into(),
        ));
    }
    if s.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Numeric(
            "singular values must be sorted in decreasing order".into(),
        ));
    }
    Ok(())
}

/// Smallest `r` whose leading singular values hold at least a fraction
/// `fidelity` of the total.
pub fn rank_for_fidelity(singular_values: &[f64], fidelity: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&fidelity) {
        return Err(config_err!("fidelity {fidelity} outside [0, 1]"));
    }
    validate_singular_values(singular_values)?;
    let d = singular_values.len();
    if d == 0 || fidelity == 0.0 {
        return Ok(0);
    }
    let total: f64 = singular_values.iter().sum();
    if total == 0.0 {
        return Ok(1);
    }
    if fidelity == 1.0 {
        // Trailing zeros add nothing; rounding must not stop the scan early.
        return Ok(singular_values
            .iter()
            .rposition(|&v| v > 0.0)
            .map_or(1, |i| i + 1));
    }
    let mut acc = 0.0;
    for (i, &s) in singular_values.iter().enumerate() {
        acc += s;
        if acc / total >= fidelity {
            return Ok(i + 1);
        }
    }
    Ok(d)
}

/// Fits the basis to latent frames (one `d`-vector per frame).
pub fn fit_basis(frames: &[Vec<f64>]) -> Result<FidelityBasis> {
    let d = frames
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::Data("no latent frames".into()))?;
    if frames.iter().any(|f| f.len() != d) {
        return Err(shape_err!("latent frames have different widths"));
    }
    let n = frames.len() as f64;
    let mean: Vec<f64> = (0..d)
        .map(|j| frames.iter().map(|f| f[j]).sum::<f64>() / n)
        .collect();
    let columns: Vec<Vec<f64>> = (0..d)
        .map(|j| frames.iter().map(|f| f[j] - mean[j]).collect())
        .collect();
    let (singular_values, components) = svd_values_vectors(&columns);
    Ok(FidelityBasis {
        mean,
        components,
        singular_values,
    })
}

/// Posterior means of every clip, as frames, subsampled to at most
/// `max_frames` (in dataset order).
pub fn collect_latents<R: Rng + ?Sized>(
    model: &Rave,
    clips: &[Waveform],
    max_frames: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if clips.is_empty() {
        return Err(Error::Data("no clips to collect latents from".into()));
    }
    let mut frames = Vec::new();
    for clip in clips {
        let (mean, _) = model.encode(&[&clip.samples])?;
        frames.extend(tensor_frames(&mean)?);
    }
    if frames.len() > max_frames {
        let mut keep = sample(rng, frames.len(), max_frames).into_vec();
        keep.sort_unstable();
        frames = keep
            .into_iter()
            .map(|i| std::mem::take(&mut frames[i]))
            .collect();
    }
    Ok(frames)
}

/// `[1, d, T]` latents as `T` frames.
pub fn tensor_frames(z: &Tensor<f32>) -> Result<Vec<Vec<f64>>> {
    let (b, d, t) = z.dims3()?;
    let x = z.data();
    let mut out = Vec::with_capacity(b * t);
    for bi in 0..b {
        for ti in 0..t {
            out.push((0..d).map(|c| x[(bi * d + c) * t + ti] as f64).collect());
        }
    }
    Ok(out)
}

/// Frames back to a `[1, d, T]` tensor.
pub fn frames_tensor(frames: &[Vec<f64>]) -> Result<Tensor<f32>> {
    let t = frames.len();
    let d = frames.first().map_or(0, Vec::len);
    let mut data = vec![0.0f32; d * t];
    for (ti, f) in frames.iter().enumerate() {
        if f.len() != d {
            return Err(shape_err!("latent frames have different widths"));
        }
        for (c, &v) in f.iter().enumerate() {
            data[c * t + ti] = v as f32;
        }
    }
    Tensor::from_vec(&[1, d, t], data)
}

/// First `rank` coordinates of `(z - mean) V`.
pub fn project(z: &[f64], basis: &FidelityBasis, rank: usize) -> Result<Vec<f64>> {
    let d = basis.dim();
    if z.len() != d {
        return Err(shape_err!("latent has {} dims, basis has {d}", z.len()));
    }
    if rank > d {
        return Err(shape_err!("rank {rank} exceeds latent dim {d}"));
    }
    Ok((0..rank)
        .map(|j| {
            (0..d)
                .map(|i| (z[i] - basis.mean[i]) * basis.components[i * d + j])
                .sum()
        })
        .collect())
}

/// Inverse of [`project`] given explicit trailing coordinates.
pub fn reconstruct_with(
    compact: &[f64],
    trailing: &[f64],
    basis: &FidelityBasis,
) -> Result<Vec<f64>> {
    let d = basis.dim();
    if compact.len() + trailing.len() != d {
        return Err(shape_err!(
            "{} compact and {} trailing coordinates for a {d}-d basis",
            compact.len(),
            trailing.len()
        ));
    }
    let coords: Vec<f64> = compact.iter().chain(trailing).copied().collect();
    Ok((0..d)
        .map(|i| {
            basis.mean[i]
                + (0..d)
                    .map(|j| basis.components[i * d + j] * coords[j])
                    .sum::<f64>()
        })
        .collect())
}

/// Fills the discarded coordinates with standard normal draws.
pub fn reconstruct<R: Rng + ?Sized>(
    compact: &[f64],
    basis: &FidelityBasis,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let d = basis.dim();
    if compact.len() > d {
        return Err(shape_err!("rank {} exceeds latent dim {d}", compact.len()));
    }
    let trailing: Vec<f64> = (compact.len()..d)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    reconstruct_with(compact, &trailing, basis)
}

/// Mean KL divergence to the prior per latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct KlReport {
    pub per_dim: Vec<f64>,
}

impl KlReport {
    pub fn count_above(&self, threshold: f64) -> usize {
        self.per_dim.iter().filter(|&&k| k > threshold).count()
    }

    /// Dimension indices by decreasing KL.
    pub fn sorted(&self) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self.per_dim.iter().copied().enumerate().collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        v
    }

    pub fn mean(&self) -> f64 {
        self.per_dim.iter().sum::<f64>() / self.per_dim.len().max(1) as f64
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("rank,dim,kl\n");
        for (r, (i, k)) in self.sorted().into_iter().enumerate() {
            s.push_str(&format!("{r},{i},{k}\n"));
        }
        s.push_str(&format!(
            "# above_0.01={} above_0.1={}\n",
            self.count_above(0.01),
            self.count_above(0.1)
        ));
        s
    }
}

/// KL of posterior frames `(mean, logvar)`, averaged over frames.
pub fn kl_report_from_posteriors(posteriors: &[(Tensor<f32>, Tensor<f32>)]) -> Result<KlReport> {
    let mut sum: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for (mean, logvar) in posteriors {
        let mf = tensor_frames(mean)?;
        let lf = tensor_frames(logvar)?;
        for (m, l) in mf.into_iter().zip(lf) {
            let kl = kl_diag_gaussian(&DiagonalGaussian::new(m, l)?);
            if sum.is_empty() {
                sum = vec![0.0; kl.len()];
            }
            if kl.len() != sum.len() {
                return Err(shape_err!("posteriors have different widths"));
            }
            sum.iter_mut().zip(&kl).for_each(|(s, k)| *s += k);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("no posterior frames".into()));
    }
    Ok(KlReport {
        per_dim: sum.into_iter().map(|s| s / count as f64).collect(),
    })
}

pub fn kl_report(model: &Rave, clips: &[Waveform]) -> Result<KlReport> {
    let posteriors = clips
        .iter()
        .map(|c| model.encode(&[&c.samples]))
        .collect::<Result<Vec<_>>>()?;
    kl_report_from_posteriors(&posteriors)
}

/// Projects every frame of `[1, d, T]` latents to `[1, rank, T]`.
pub fn project_tensor(z: &Tensor<f32>, basis: &FidelityBasis, rank: usize) -> Result<Tensor<f32>> {
    let frames = tensor_frames(z)?
        .iter()
        .map(|f| project(f, basis, rank))
        .collect::<Result<Vec<_>>>()?;
    compact_tensor(&frames, rank)
}

fn compact_tensor(frames: &[Vec<f64>], rank: usize) -> Result<Tensor<f32>> {
    if rank == 0 {
        return Tensor::from_vec(&[1, 0, frames.len()], Vec::new());
    }
    frames_tensor(frames)
}

/// Reconstructs `[1, rank, T]` compact latents to `[1, d, T]`.
pub fn reconstruct_tensor<R: Rng + ?Sized>(
    zf: &Tensor<f32>,
    basis: &FidelityBasis,
    rng: &mut R,
) -> Result<Tensor<f32>> {
    let (_, r, t) = zf.dims3()?;
    let frames: Vec<Vec<f64>> = if r == 0 {
        vec![Vec::new(); t]
    } else {
        tensor_frames(zf)?
    };
    let full = frames
        .iter()
        .map(|f| reconstruct(f, basis, rng))
        .collect::<Result<Vec<_>>>()?;
    frames_tensor(&full)
}
