//! Raw numeric kernels shared by the graph ops. All layouts are row-major
//! `[batch, channels, time]`; weights follow the usual `[out, in/groups, k]`
//! (convolution) and `[in, out, k]` (transposed convolution) conventions.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::tensor::{gemm, Mat, Real};
use crate::dsp::{frame_count, hop_for, WindowKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn unit() -> Self {
        Self {
            stride: 1,
            pad_left: 0,
            pad_right: 0,
            dilation: 1,
            groups: 1,
        }
    }

    /// Left-only padding so that output `t` sees inputs up to `t * stride`.
    pub fn causal(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            stride,
            pad_left: dilation * (kernel - 1),
            pad_right: 0,
            dilation,
            groups: 1,
        }
    }

    /// Symmetric padding of `(k - 1) * dilation / 2` per side.
    pub fn centered(kernel: usize, stride: usize, dilation: usize) -> Self {
        let total = dilation * (kernel - 1);
        Self {
            stride,
            pad_left: total / 2,
            pad_right: total - total / 2,
            dilation,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn out_len(&self, t: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = t + self.pad_left + self.pad_right;
        (padded >= span).then(|| (padded - span) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub kernel: usize,
}

fn im2col<T: Real>(x: &[T], cin_g: usize, t_in: usize, d: &ConvDims, s: &ConvSpec, cols: &mut [T]) {
    let k = d.kernel;
    let t_out = d.t_out;
    for ci in 0..cin_g {
        let row = &x[ci * t_in..(ci + 1) * t_in];
        for kk in 0..k {
            let dst = &mut cols[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
            let offset = (kk * s.dilation) as isize - s.pad_left as isize;
            for (to, slot) in dst.iter_mut().enumerate() {
                let idx = (to * s.stride) as isize + offset;
                *slot = if idx >= 0 && (idx as usize) < t_in {
                    row[idx as usize]
                } else {
                    T::zero()
                };
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    cin_g: usize,
    t_in: usize,
    d: &ConvDims,
    s: &ConvSpec,
    dx: &mut [T],
) {
    let k = d.kernel;
    let t_out = d.t_out;
    for ci in 0..cin_g {
        let row = &mut dx[ci * t_in..(ci + 1) * t_in];
        for kk in 0..k {
            let src = &cols[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
            let offset = (kk * s.dilation) as isize - s.pad_left as isize;
            for (to, &v) in src.iter().enumerate() {
                let idx = (to * s.stride) as isize + offset;
                if idx >= 0 && (idx as usize) < t_in {
                    row[idx as usize] += v;
                }
            }
        }
    }
}

fn is_pointwise(d: &ConvDims, s: &ConvSpec) -> bool {
    d.kernel == 1 && s.stride == 1 && s.pad_left == 0 && s.pad_right == 0
}

pub fn conv1d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    s: &ConvSpec,
) -> Vec<T> {
    let g = s.groups;
    let (cin_g, cout_g) = (d.cin / g, d.cout / g);
    let ck = cin_g * d.kernel;
    let mut out = vec![T::zero(); d.batch * d.cout * d.t_out];
    let mut cols = vec![T::zero(); if is_pointwise(d, s) { 0 } else { ck * d.t_out }];
    for b in 0..d.batch {
        for gi in 0..g {
            let xs = &x[(b * d.cin + gi * cin_g) * d.t_in..(b * d.cin + (gi + 1) * cin_g) * d.t_in];
            let colv: &[T] = if is_pointwise(d, s) {
                xs
            } else {
                im2col(xs, cin_g, d.t_in, d, s, &mut cols);
                &cols
            };
            let wg = &w[gi * cout_g * ck..(gi + 1) * cout_g * ck];
            let o = &mut out
                [(b * d.cout + gi * cout_g) * d.t_out..(b * d.cout + (gi + 1) * cout_g) * d.t_out];
            gemm(
                Mat::row_major(wg, cout_g, ck),
                Mat::row_major(colv, ck, d.t_out),
                o,
                T::zero(),
            );
        }
        if let Some(bias) = bias {
            for (c, &bv) in bias.iter().enumerate() {
                let o = &mut out[(b * d.cout + c) * d.t_out..(b * d.cout + c + 1) * d.t_out];
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &ConvDims,
    s: &ConvSpec,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let g = s.groups;
    let (cin_g, cout_g) = (d.cin / g, d.cout / g);
    let ck = cin_g * d.kernel;
    let pointwise = is_pointwise(d, s);
    let mut dx = need.0.then(|| vec![T::zero(); d.batch * d.cin * d.t_in]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut cols = vec![T::zero(); if pointwise { 0 } else { ck * d.t_out }];
    let mut dcols = vec![T::zero(); ck * d.t_out];
    for b in 0..d.batch {
        for gi in 0..g {
            let xs = &x[(b * d.cin + gi * cin_g) * d.t_in..(b * d.cin + (gi + 1) * cin_g) * d.t_in];
            let dys = &dy
                [(b * d.cout + gi * cout_g) * d.t_out..(b * d.cout + (gi + 1) * cout_g) * d.t_out];
            let wg = &w[gi * cout_g * ck..(gi + 1) * cout_g * ck];
            if let Some(dw) = dw.as_mut() {
                let colv: &[T] = if pointwise {
                    xs
                } else {
                    im2col(xs, cin_g, d.t_in, d, s, &mut cols);
                    &cols
                };
                gemm(
                    Mat::row_major(dys, cout_g, d.t_out),
                    Mat::row_major(colv, ck, d.t_out).t(),
                    &mut dw[gi * cout_g * ck..(gi + 1) * cout_g * ck],
                    T::one(),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx
                    [(b * d.cin + gi * cin_g) * d.t_in..(b * d.cin + (gi + 1) * cin_g) * d.t_in];
                if pointwise {
                    gemm(
                        Mat::row_major(wg, cout_g, ck).t(),
                        Mat::row_major(dys, cout_g, d.t_out),
                        dxs,
                        T::one(),
                    );
                } else {
                    gemm(
                        Mat::row_major(wg, cout_g, ck).t(),
                        Mat::row_major(dys, cout_g, d.t_out),
                        &mut dcols,
                        T::zero(),
                    );
                    col2im(&dcols, cin_g, d.t_in, d, s, dxs);
                }
            }
        }
    }
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); d.cout];
        for b in 0..d.batch {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dy[(b * d.cout + c) * d.t_out..(b * d.cout + c + 1) * d.t_out]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

/// Transposed convolution: `y[co, m*stride + k - trim] += x[ci, m] w[ci, co, k]`
/// for output positions in `[0, t_out)`.
pub fn conv_transpose1d_forward<T: Real>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    d: &ConvDims,
    stride: usize,
    trim: usize,
) -> Vec<T> {
    let ck = d.cout * d.kernel;
    let mut out = vec![T::zero(); d.batch * d.cout * d.t_out];
    let mut cols = vec![T::zero(); ck * d.t_in];
    for b in 0..d.batch {
        let xs = &x[b * d.cin * d.t_in..(b + 1) * d.cin * d.t_in];
        gemm(
            Mat::row_major(w, d.cin, ck).t(),
            Mat::row_major(xs, d.cin, d.t_in),
            &mut cols,
            T::zero(),
        );
        let o = &mut out[b * d.cout * d.t_out..(b + 1) * d.cout * d.t_out];
        for co in 0..d.cout {
            let orow = &mut o[co * d.t_out..(co + 1) * d.t_out];
            for kk in 0..d.kernel {
                let src = &cols[(co * d.kernel + kk) * d.t_in..(co * d.kernel + kk + 1) * d.t_in];
                for (m, &v) in src.iter().enumerate() {
                    let idx = (m * stride + kk) as isize - trim as isize;
                    if idx >= 0 && (idx as usize) < d.t_out {
                        orow[idx as usize] += v;
                    }
                }
            }
            if let Some(bias) = bias {
                orow.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

pub fn conv_transpose1d_backward<T: Real>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &ConvDims,
    stride: usize,
    trim: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let ck = d.cout * d.kernel;
    let mut dx = need.0.then(|| vec![T::zero(); d.batch * d.cin * d.t_in]);
    let mut dw = need.1.then(|| vec![T::zero(); w.len()]);
    let mut dcols = vec![T::zero(); ck * d.t_in];
    for b in 0..d.batch {
        let dys = &dy[b * d.cout * d.t_out..(b + 1) * d.cout * d.t_out];
        for co in 0..d.cout {
            let drow = &dys[co * d.t_out..(co + 1) * d.t_out];
            for kk in 0..d.kernel {
                let dst =
                    &mut dcols[(co * d.kernel + kk) * d.t_in..(co * d.kernel + kk + 1) * d.t_in];
                for (m, slot) in dst.iter_mut().enumerate() {
                    let idx = (m * stride + kk) as isize - trim as isize;
                    *slot = if idx >= 0 && (idx as usize) < d.t_out {
                        drow[idx as usize]
                    } else {
                        T::zero()
                    };
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                Mat::row_major(w, d.cin, ck),
                Mat::row_major(&dcols, ck, d.t_in),
                &mut dx[b * d.cin * d.t_in..(b + 1) * d.cin * d.t_in],
                T::zero(),
            );
        }
        if let Some(dw) = dw.as_mut() {
            let xs = &x[b * d.cin * d.t_in..(b + 1) * d.cin * d.t_in];
            gemm(
                Mat::row_major(xs, d.cin, d.t_in),
                Mat::row_major(&dcols, ck, d.t_in).t(),
                dw,
                T::one(),
            );
        }
    }
    let db = need.2.then(|| {
        let mut db = vec![T::zero(); d.cout];
        for b in 0..d.batch {
            for (c, acc) in db.iter_mut().enumerate() {
                *acc += dy[(b * d.cout + c) * d.t_out..(b * d.cout + c + 1) * d.t_out]
                    .iter()
                    .copied()
                    .sum::<T>();
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

/// Per-channel statistics over batch and time.
pub fn channel_moments<T: Real>(x: &[T], b: usize, c: usize, t: usize) -> (Vec<T>, Vec<T>) {
    let n = T::of((b * t) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for bi in 0..b {
            s += x[(bi * c + ch) * t..(bi * c + ch + 1) * t]
                .iter()
                .copied()
                .sum::<T>();
        }
        let m = s / n;
        let mut v = T::zero();
        for bi in 0..b {
            for &xv in &x[(bi * c + ch) * t..(bi * c + ch + 1) * t] {
                v += (xv - m) * (xv - m);
            }
        }
        mean[ch] = m;
        var[ch] = v / n;
    }
    (mean, var)
}

/// Amplitude STFT of each row of `x` (`rows × len`), output `[rows, frames, bins]`.
/// The modulus is smoothed as `sqrt(re^2 + im^2 + eps^2)`.
pub struct StftPlan<T: Real> {
    pub n: usize,
    pub hop: usize,
    pub frames: usize,
    pub bins: usize,
    pub window: Vec<T>,
    forward: std::sync::Arc<dyn rustfft::Fft<T>>,
    inverse: std::sync::Arc<dyn rustfft::Fft<T>>,
}

pub const MODULUS_EPS: f64 = 1e-12;

impl<T: Real> StftPlan<T> {
    pub fn new(n: usize, len: usize, window: WindowKind) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            hop: hop_for(n),
            frames: frame_count(len, n),
            bins: n / 2 + 1,
            window: window.coefficients(n),
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    /// Returns magnitudes plus the complex spectra needed by the backward pass.
    pub fn forward(&self, x: &[T], rows: usize, len: usize) -> (Vec<T>, Vec<Complex<T>>) {
        let eps2 = T::of(MODULUS_EPS * MODULUS_EPS);
        let mut mags = Vec::with_capacity(rows * self.frames * self.bins);
        let mut spectra = Vec::with_capacity(rows * self.frames * self.bins);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.n];
        for r in 0..rows {
            let row = &x[r * len..(r + 1) * len];
            for f in 0..self.frames {
                let start = f * self.hop;
                for (i, slot) in buf.iter_mut().enumerate() {
                    let v = row.get(start + i).copied().unwrap_or(T::zero());
                    *slot = Complex::new(v * self.window[i], T::zero());
                }
                self.forward.process(&mut buf);
                for c in &buf[..self.bins] {
                    mags.push((c.re * c.re + c.im * c.im + eps2).sqrt());
                    spectra.push(*c);
                }
            }
        }
        (mags, spectra)
    }

    pub fn backward(
        &self,
        spectra: &[Complex<T>],
        mags: &[T],
        dmag: &[T],
        rows: usize,
        len: usize,
    ) -> Vec<T> {
        let mut dx = vec![T::zero(); rows * len];
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.n];
        for r in 0..rows {
            for f in 0..self.frames {
                let base = (r * self.frames + f) * self.bins;
                buf.iter_mut()
                    .for_each(|c| *c = Complex::new(T::zero(), T::zero()));
                for k in 0..self.bins {
                    let scale = dmag[base + k] / mags[base + k];
                    buf[k] = spectra[base + k] * scale;
                }
                // d|X_k|/du_n = Re(X_k e^{+i 2 pi k n / N}) / |X_k|
                self.inverse.process(&mut buf);
                let start = f * self.hop;
                let row = &mut dx[r * len..(r + 1) * len];
                for (i, c) in buf.iter().enumerate() {
                    if start + i < len {
                        row[start + i] += c.re * self.window[i];
                    }
                }
            }
        }
        dx
    }
}

/// Linear-phase FIR synthesis basis for the filtered-noise generator: the FIR
/// of band amplitudes `a` is `sum_j a_j basis[j]`, obtained by frequency
/// sampling on `2 * bands` points (the last amplitude also covers Nyquist)
/// followed by a Hann taper. Length `2 * bands + 1`.
pub fn noise_fir_basis(bands: usize) -> Vec<f64> {
    let n = 2 * bands;
    let len = n + 1;
    let center = bands as f64;
    let taper: Vec<f64> = (0..len)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos())
        .collect();
    let mut basis = vec![0.0; bands * len];
    for j in 0..bands {
        for i in 0..len {
            let t = i as f64 - center;
            let mut v = if j == 0 {
                1.0
            } else {
                2.0 * (2.0 * std::f64::consts::PI * j as f64 * t / n as f64).cos()
            };
            if j == bands - 1 {
                v += (std::f64::consts::PI * t).cos();
            }
            basis[j * len + i] = taper[i] * v / n as f64;
        }
    }
    basis
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseDims {
    pub batch: usize,
    pub bands: usize,
    pub filter_bands: usize,
    pub frames: usize,
    pub frame: usize,
}

impl NoiseDims {
    pub fn taps(&self) -> usize {
        2 * self.filter_bands + 1
    }

    pub fn out_len(&self, with_tail: bool) -> usize {
        self.frames * self.frame + if with_tail { self.taps() - 1 } else { 0 }
    }
}

fn noise_firs<T: Real>(
    amp: &[T],
    basis: &[T],
    d: &NoiseDims,
    b: usize,
    m: usize,
    f: usize,
    fir: &mut [T],
) {
    let taps = d.taps();
    fir.iter_mut().for_each(|v| *v = T::zero());
    for j in 0..d.filter_bands {
        let a = amp[((b * d.bands + m) * d.filter_bands + j) * d.frames + f];
        for (slot, &bv) in fir.iter_mut().zip(&basis[j * taps..(j + 1) * taps]) {
            *slot += a * bv;
        }
    }
}

/// Frame-wise FIR filtering of `noise` (`[B, M, F*frame]`) by the filters
/// described by `amp` (`[B, M*bands, F]`), overlap-added.
pub fn filtered_noise_forward<T: Real>(
    amp: &[T],
    noise: &[T],
    basis: &[T],
    d: &NoiseDims,
    with_tail: bool,
) -> Vec<T> {
    let taps = d.taps();
    let t_in = d.frames * d.frame;
    let t_out = d.out_len(with_tail);
    let mut out = vec![T::zero(); d.batch * d.bands * t_out];
    let mut fir = vec![T::zero(); taps];
    for b in 0..d.batch {
        for m in 0..d.bands {
            let e = &noise[(b * d.bands + m) * t_in..(b * d.bands + m + 1) * t_in];
            let o = &mut out[(b * d.bands + m) * t_out..(b * d.bands + m + 1) * t_out];
            for f in 0..d.frames {
                noise_firs(amp, basis, d, b, m, f, &mut fir);
                let base = f * d.frame;
                for u in 0..d.frame {
                    let ev = e[base + u];
                    for (n, &h) in fir.iter().enumerate() {
                        let idx = base + u + n;
                        if idx < t_out {
                            o[idx] += ev * h;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn filtered_noise_backward<T: Real>(
    noise: &[T],
    basis: &[T],
    dy: &[T],
    d: &NoiseDims,
    with_tail: bool,
) -> Vec<T> {
    let taps = d.taps();
    let t_in = d.frames * d.frame;
    let t_out = d.out_len(with_tail);
    let mut damp = vec![T::zero(); d.batch * d.bands * d.filter_bands * d.frames];
    let mut dfir = vec![T::zero(); taps];
    for b in 0..d.batch {
        for m in 0..d.bands {
            let e = &noise[(b * d.bands + m) * t_in..(b * d.bands + m + 1) * t_in];
            let g = &dy[(b * d.bands + m) * t_out..(b * d.bands + m + 1) * t_out];
            for f in 0..d.frames {
                let base = f * d.frame;
                dfir.iter_mut().for_each(|v| *v = T::zero());
                for u in 0..d.frame {
                    let ev = e[base + u];
                    for (n, slot) in dfir.iter_mut().enumerate() {
                        let idx = base + u + n;
                        if idx < t_out {
                            *slot += ev * g[idx];
                        }
                    }
                }
                for j in 0..d.filter_bands {
                    let s: T = dfir
                        .iter()
                        .zip(&basis[j * taps..(j + 1) * taps])
                        .map(|(&a, &bv)| a * bv)
                        .sum();
                    damp[((b * d.bands + m) * d.filter_bands + j) * d.frames + f] += s;
                }
            }
        }
    }
    damp
}
