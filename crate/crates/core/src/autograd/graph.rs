use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex;

use super::kernels::{self, ConvDims, ConvSpec, NoiseDims, StftPlan};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::dsp::WindowKind;
use crate::error::{shape_err, Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub enum Unary<T> {
    Exp,
    Log,
    Sqrt,
    Abs,
    Tanh,
    Sigmoid,
    LeakyRelu(T),
    Relu,
    Clamp(T, T),
    Square,
}

enum Op<T: Real> {
    Constant,
    Input,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MulChannel(usize, usize),
    Scale(usize, T),
    Offset(usize),
    Unary(usize, Unary<T>),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    Reshape(usize),
    SliceTime(usize, usize),
    ConcatTime(usize, usize),
    AvgPool2(usize),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
        dims: ConvDims,
    },
    ConvTranspose {
        x: usize,
        w: usize,
        b: Option<usize>,
        stride: usize,
        trim: usize,
        dims: ConvDims,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        invstd: Vec<T>,
    },
    BatchNormEval {
        x: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<T>,
        invstd: Vec<T>,
    },
    Stft {
        x: usize,
        plan: Box<StftPlan<T>>,
        spectra: Vec<Complex<T>>,
        rows: usize,
        len: usize,
    },
    FilteredNoise {
        amp: usize,
        noise: Vec<T>,
        basis: Vec<T>,
        dims: NoiseDims,
        with_tail: bool,
    },
}

struct Node<T: Real> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Dynamic reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order, so the backward pass is one reverse sweep.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    input_grads: HashMap<usize, Vec<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            input_grads: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Leaf whose gradient is kept by the graph (see [`Graph::grad`]).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Parameter leaf; gradients flow into the store on [`Graph::backward`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push_shared(store.shared(id), Op::Param(id), trainable)
    }

    /// Parameter value used without gradient tracking.
    pub fn param_const(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push_shared(store.shared(id), Op::Constant, false)
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, name)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(v, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(v, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(v, Op::Mul(a.0, b.0), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "div", |x, y| x / y)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(v, Op::Div(a.0, b.0), ng))
    }

    /// `a [B, C, T] * b [B, 1, T]`, broadcasting `b` over channels.
    pub fn mul_channel(&mut self, a: Var, b: Var) -> Result<Var> {
        let (bs, c, t) = self.value(a).dims3()?;
        let (bb, cb, tb) = self.value(b).dims3()?;
        if bs != bb || cb != 1 || t != tb {
            return Err(shape_err!(
                "mul_channel: {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len());
        for bi in 0..bs {
            let env = &db[bi * t..(bi + 1) * t];
            for ci in 0..c {
                let row = &da[(bi * c + ci) * t..(bi * c + ci + 1) * t];
                out.extend(row.iter().zip(env).map(|(&x, &e)| x * e));
            }
        }
        let v = Tensor::from_vec(&[bs, c, t], out)?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(v, Op::MulChannel(a.0, b.0), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let ta = self.value(a);
        let v = Tensor::from_vec(ta.shape(), ta.data().iter().map(|&x| x * s).collect())
            .expect("same shape");
        let ng = self.ng(a.0);
        self.push(v, Op::Scale(a.0, s), ng)
    }

    pub fn offset(&mut self, a: Var, s: T) -> Var {
        let ta = self.value(a);
        let v = Tensor::from_vec(ta.shape(), ta.data().iter().map(|&x| x + s).collect())
            .expect("same shape");
        let ng = self.ng(a.0);
        self.push(v, Op::Offset(a.0), ng)
    }

    pub fn unary(&mut self, a: Var, kind: Unary<T>) -> Var {
        let ta = self.value(a);
        let f = |x: T| -> T {
            match kind {
                Unary::Exp => x.exp(),
                Unary::Log => x.ln(),
                Unary::Sqrt => x.sqrt(),
                Unary::Abs => x.abs(),
                Unary::Tanh => x.tanh(),
                Unary::Sigmoid => T::one() / (T::one() + (-x).exp()),
                Unary::LeakyRelu(s) => {
                    if x > T::zero() {
                        x
                    } else {
                        x * s
                    }
                }
                Unary::Relu => x.max(T::zero()),
                Unary::Clamp(lo, hi) => x.max(lo).min(hi),
                Unary::Square => x * x,
            }
        };
        let v = Tensor::from_vec(ta.shape(), ta.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let ng = self.ng(a.0);
        self.push(v, Op::Unary(a.0, kind), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(T::of(slope)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Unary::Clamp(T::of(lo), T::of(hi)))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::of(t.len().max(1) as f64);
        let ng = self.ng(a.0);
        self.push(Tensor::scalar(s), Op::Mean(a.0), ng)
    }

    /// Sums everything but the leading axis: `[R, ...] -> [R]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let rows = t.shape()[0];
        let per = t.len() / rows.max(1);
        let data: Vec<T> = t
            .data()
            .chunks(per.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let ng = self.ng(a.0);
        self.push(
            Tensor::from_vec(&[rows], data).expect("rows"),
            Op::SumRows(a.0),
            ng,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a.0);
        Ok(self.push(v, Op::Reshape(a.0), ng))
    }

    pub fn slice_time(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_time(start, len)?;
        let ng = self.ng(a.0);
        Ok(self.push(v, Op::SliceTime(a.0, start), ng))
    }

    pub fn concat_time(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_time(self.value(b))?;
        let ng = self.ng(a.0) || self.ng(b.0);
        Ok(self.push(v, Op::ConcatTime(a.0, b.0), ng))
    }

    /// Non-overlapping average of sample pairs along time.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let (b, c, t) = self.value(a).dims3()?;
        let half = t / 2;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(b * c * half);
        for row in src.chunks(t) {
            out.extend((0..half).map(|i| (row[2 * i] + row[2 * i + 1]) * T::of(0.5)));
        }
        let ng = self.ng(a.0);
        Ok(self.push(Tensor::from_vec(&[b, c, half], out)?, Op::AvgPool2(a.0), ng))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (batch, cin, t_in) = self.value(x).dims3()?;
        let (cout, cin_g, kernel) = self.value(w).dims3()?;
        if spec.stride == 0 || spec.dilation == 0 || spec.groups == 0 {
            return Err(shape_err!(
                "conv1d: stride, dilation and groups must be positive"
            ));
        }
        if cin % spec.groups != 0 || cout % spec.groups != 0 || cin / spec.groups != cin_g {
            return Err(shape_err!(
                "conv1d: input {:?} incompatible with weight {:?} and {} groups",
                self.shape(x),
                self.shape(w),
                spec.groups
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err!(
                    "conv1d: bias shape {:?} for {cout} outputs",
                    self.shape(b)
                ));
            }
        }
        let t_out = spec
            .out_len(t_in, kernel)
            .ok_or_else(|| shape_err!("conv1d: input length {t_in} shorter than kernel span"))?;
        let dims = ConvDims {
            batch,
            cin,
            cout,
            t_in,
            t_out,
            kernel,
        };
        let out = kernels::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
            &spec,
        );
        let ng = self.ng(x.0) || self.ng(w.0) || bias.is_some_and(|b| self.ng(b.0));
        let v = Tensor::from_vec(&[batch, cout, t_out], out)?;
        Ok(self.push(
            v,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: bias.map(|b| b.0),
                spec,
                dims,
            },
            ng,
        ))
    }

    /// Transposed convolution with weight `[Cin, Cout, K]`; the output covers full-
    /// output positions `[trim, trim + out_len)`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        trim: usize,
        out_len: usize,
    ) -> Result<Var> {
        let (batch, cin, t_in) = self.value(x).dims3()?;
        let (cin_w, cout, kernel) = self.value(w).dims3()?;
        if cin != cin_w || stride == 0 {
            return Err(shape_err!(
                "conv_transpose1d: input {:?} incompatible with weight {:?}",
                self.shape(x),
                self.shape(w)
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err!(
                    "conv_transpose1d: bias shape {:?}",
                    self.shape(b)
                ));
            }
        }
        let dims = ConvDims {
            batch,
            cin,
            cout,
            t_in,
            t_out: out_len,
            kernel,
        };
        let out = kernels::conv_transpose1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
            &dims,
            stride,
            trim,
        );
        let ng = self.ng(x.0) || self.ng(w.0) || bias.is_some_and(|b| self.ng(b.0));
        let v = Tensor::from_vec(&[batch, cout, out_len], out)?;
        Ok(self.push(
            v,
            Op::ConvTranspose {
                x: x.0,
                w: w.0,
                b: bias.map(|b| b.0),
                stride,
                trim,
                dims,
            },
            ng,
        ))
    }

    /// Training-mode batch normalisation. Returns the output together with the
    /// batch mean and biased variance per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (b, c, t) = self.value(x).dims3()?;
        if b < 2 {
            return Err(Error::Numeric(
                "batch normalisation in training mode needs a batch of at least 2".into(),
            ));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "batch_norm: affine parameters must have {c} entries"
            ));
        }
        let xs = self.value(x).data();
        let (mean, var) = kernels::channel_moments(xs, b, c, t);
        let invstd: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xs.len());
        let mut out = Vec::with_capacity(xs.len());
        for bi in 0..b {
            for ch in 0..c {
                for &v in &xs[(bi * c + ch) * t..(bi * c + ch + 1) * t] {
                    let h = (v - mean[ch]) * invstd[ch];
                    xhat.push(h);
                    out.push(g[ch] * h + bt[ch]);
                }
            }
        }
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        let v = Tensor::from_vec(&[b, c, t], out)?;
        let node = self.push(
            v,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                invstd,
            },
            ng,
        );
        Ok((node, mean, var))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (b, c, t) = self.value(x).dims3()?;
        if running_mean.len() != c || running_var.len() != c || self.shape(gamma) != [c] {
            return Err(shape_err!("batch_norm: statistics must have {c} entries"));
        }
        let invstd: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::of(eps)).sqrt())
            .collect();
        let xs = self.value(x).data();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xs.len());
        for bi in 0..b {
            for ch in 0..c {
                for &v in &xs[(bi * c + ch) * t..(bi * c + ch + 1) * t] {
                    out.push(g[ch] * (v - running_mean[ch]) * invstd[ch] + bt[ch]);
                }
            }
        }
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        let v = Tensor::from_vec(&[b, c, t], out)?;
        Ok(self.push(
            v,
            Op::BatchNormEval {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                mean: running_mean.to_vec(),
                invstd,
            },
            ng,
        ))
    }

    /// Amplitude STFT of every row along the last axis; output `[rows, frames, bins]`.
    pub fn stft_magnitude(&mut self, x: Var, n: usize, window: WindowKind) -> Result<Var> {
        if !n.is_power_of_two() {
            return Err(Error::Config(format!(
                "STFT window size {n} is not a power of two"
            )));
        }
        let shape = self.shape(x).to_vec();
        let len = *shape
            .last()
            .ok_or_else(|| shape_err!("stft of a rank-0 tensor"))?;
        let rows = self.value(x).len() / len.max(1);
        let plan = StftPlan::new(n, len, window);
        let (mags, spectra) = plan.forward(self.value(x).data(), rows, len);
        let v = Tensor::from_vec(&[rows, plan.frames, plan.bins], mags)?;
        let ng = self.ng(x.0);
        Ok(self.push(
            v,
            Op::Stft {
                x: x.0,
                plan: Box::new(plan),
                spectra: if ng { spectra } else { Vec::new() },
                rows,
                len,
            },
            ng,
        ))
    }

    /// Filters frames of fixed `noise` by linear-phase FIRs built from the band
    /// amplitudes `amp` (`[B, M*filter_bands, F]`); see [`kernels::noise_fir_basis`].
    pub fn filtered_noise(
        &mut self,
        amp: Var,
        noise: Tensor<T>,
        filter_bands: usize,
        frame: usize,
        with_tail: bool,
    ) -> Result<Var> {
        let (batch, ch, frames) = self.value(amp).dims3()?;
        let (nb, bands, nt) = noise.dims3()?;
        if nb != batch || ch != bands * filter_bands || nt != frames * frame {
            return Err(shape_err!(
                "filtered_noise: amplitudes {:?} incompatible with noise {:?}",
                self.shape(amp),
                noise.shape()
            ));
        }
        let dims = NoiseDims {
            batch,
            bands,
            filter_bands,
            frames,
            frame,
        };
        let basis: Vec<T> = kernels::noise_fir_basis(filter_bands)
            .iter()
            .map(|&v| T::of(v))
            .collect();
        let out = kernels::filtered_noise_forward(
            self.value(amp).data(),
            noise.data(),
            &basis,
            &dims,
            with_tail,
        );
        let v = Tensor::from_vec(&[batch, bands, dims.out_len(with_tail)], out)?;
        let ng = self.ng(amp.0);
        Ok(self.push(
            v,
            Op::FilteredNoise {
                amp: amp.0,
                noise: if ng { noise.into_data() } else { Vec::new() },
                basis,
                dims,
                with_tail,
            },
            ng,
        ))
    }

    /// Gradient of an [`Graph::input`] leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.input_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Back-propagates a scalar `loss`. Parameter gradients accumulate into
    /// `params`; input-leaf gradients accumulate inside the graph.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, params);
        }
        Ok(())
    }

    fn propagate(
        &mut self,
        i: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        params: &mut ParamStore<T>,
    ) {
        let nodes = &self.nodes;
        let ng = |j: usize| nodes[j].needs_grad;
        let val = |j: usize| nodes[j].value.data();
        let mut acc = |j: usize, contrib: &mut dyn FnMut(&mut [T])| {
            if !nodes[j].needs_grad {
                return;
            }
            let slot = grads[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.len()]);
            contrib(slot);
        };
        let out = val(i);
        match &nodes[i].op {
            Op::Constant => {}
            Op::Input => {
                let e = self
                    .input_grads
                    .entry(i)
                    .or_insert_with(|| vec![T::zero(); g.len()]);
                e.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
            }
            Op::Param(id) => params.accumulate_grad(*id, g),
            Op::Add(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(x, &d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((x, &d), &o) in s.iter_mut().zip(g).zip(vb) {
                        *x += d * o;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, &d), &o) in s.iter_mut().zip(g).zip(va) {
                        *x += d * o;
                    }
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for ((x, &d), &o) in s.iter_mut().zip(g).zip(vb) {
                        *x += d / o;
                    }
                });
                acc(*b, &mut |s| {
                    for (((x, &d), &num), &den) in s.iter_mut().zip(g).zip(va).zip(vb) {
                        *x -= d * num / (den * den);
                    }
                });
            }
            Op::MulChannel(a, b) => {
                let (bs, c, t) = nodes[*a].value.dims3().expect("rank 3");
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |s| {
                    for bi in 0..bs {
                        for ci in 0..c {
                            let base = (bi * c + ci) * t;
                            for k in 0..t {
                                s[base + k] += g[base + k] * vb[bi * t + k];
                            }
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for bi in 0..bs {
                        for ci in 0..c {
                            let base = (bi * c + ci) * t;
                            for k in 0..t {
                                s[bi * t + k] += g[base + k] * va[base + k];
                            }
                        }
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(x, &d)| *x += d * *k)
            }),
            Op::Offset(a) | Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &d)| *x += d))
            }
            Op::Unary(a, kind) => {
                let vin = val(*a);
                let kind = *kind;
                acc(*a, &mut |s| {
                    for (((x, &d), &xi), &yo) in s.iter_mut().zip(g).zip(vin).zip(out) {
                        let local = match kind {
                            Unary::Exp => yo,
                            Unary::Log => T::one() / xi,
                            Unary::Sqrt => T::of(0.5) / yo,
                            Unary::Abs => {
                                if xi > T::zero() {
                                    T::one()
                                } else if xi < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Tanh => T::one() - yo * yo,
                            Unary::Sigmoid => yo * (T::one() - yo),
                            Unary::LeakyRelu(sl) => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    sl
                                }
                            }
                            Unary::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Clamp(lo, hi) => {
                                if xi >= lo && xi <= hi {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Square => xi + xi,
                        };
                        *x += d * local;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = T::of(nodes[*a].value.len().max(1) as f64);
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::SumRows(a) => {
                let rows = g.len();
                let per = nodes[*a].value.len() / rows.max(1);
                acc(*a, &mut |s| {
                    for (r, chunk) in s.chunks_mut(per.max(1)).enumerate() {
                        chunk.iter_mut().for_each(|x| *x += g[r]);
                    }
                });
            }
            Op::SliceTime(a, start) => {
                let t_in = *nodes[*a].value.shape().last().expect("rank 3");
                let len = *nodes[i].value.shape().last().expect("rank 3");
                acc(*a, &mut |s| {
                    for (dst, src) in s.chunks_mut(t_in).zip(g.chunks(len.max(1))) {
                        dst[*start..*start + len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &d)| *x += d);
                    }
                });
            }
            Op::ConcatTime(a, b) => {
                let ta = *nodes[*a].value.shape().last().expect("rank 3");
                let tb = *nodes[*b].value.shape().last().expect("rank 3");
                let t = ta + tb;
                acc(*a, &mut |s| {
                    if ta > 0 {
                        for (dst, src) in s.chunks_mut(ta).zip(g.chunks(t)) {
                            dst.iter_mut().zip(&src[..ta]).for_each(|(x, &d)| *x += d);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    if tb > 0 {
                        for (dst, src) in s.chunks_mut(tb).zip(g.chunks(t)) {
                            dst.iter_mut().zip(&src[ta..]).for_each(|(x, &d)| *x += d);
                        }
                    }
                });
            }
            Op::AvgPool2(a) => {
                let t_in = *nodes[*a].value.shape().last().expect("rank 3");
                let half = t_in / 2;
                acc(*a, &mut |s| {
                    for (dst, src) in s.chunks_mut(t_in).zip(g.chunks(half.max(1))) {
                        for k in 0..half {
                            let d = src[k] * T::of(0.5);
                            dst[2 * k] += d;
                            dst[2 * k + 1] += d;
                        }
                    }
                });
            }
            Op::Conv {
                x,
                w,
                b,
                spec,
                dims,
            } => {
                let need = (ng(*x), ng(*w), b.is_some_and(ng));
                let grads_c = kernels::conv1d_backward(val(*x), val(*w), g, dims, spec, need);
                if let Some(dx) = grads_c.dx {
                    acc(*x, &mut |s| {
                        s.iter_mut().zip(&dx).for_each(|(a, &d)| *a += d)
                    });
                }
                if let Some(dw) = grads_c.dw {
                    acc(*w, &mut |s| {
                        s.iter_mut().zip(&dw).for_each(|(a, &d)| *a += d)
                    });
                }
                if let (Some(bi), Some(db)) = (b, grads_c.db) {
                    acc(*bi, &mut |s| {
                        s.iter_mut().zip(&db).for_each(|(a, &d)| *a += d)
                    });
                }
            }
            Op::ConvTranspose {
                x,
                w,
                b,
                stride,
                trim,
                dims,
            } => {
                let need = (ng(*x), ng(*w), b.is_some_and(ng));
                let grads_c = kernels::conv_transpose1d_backward(
                    val(*x),
                    val(*w),
                    g,
                    dims,
                    *stride,
                    *trim,
                    need,
                );
                if let Some(dx) = grads_c.dx {
                    acc(*x, &mut |s| {
                        s.iter_mut().zip(&dx).for_each(|(a, &d)| *a += d)
                    });
                }
                if let Some(dw) = grads_c.dw {
                    acc(*w, &mut |s| {
                        s.iter_mut().zip(&dw).for_each(|(a, &d)| *a += d)
                    });
                }
                if let (Some(bi), Some(db)) = (b, grads_c.db) {
                    acc(*bi, &mut |s| {
                        s.iter_mut().zip(&db).for_each(|(a, &d)| *a += d)
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            } => {
                let (bs, c, t) = nodes[*x].value.dims3().expect("rank 3");
                let gm = val(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxhat = vec![T::zero(); c];
                let mut sum_dxhat_xhat = vec![T::zero(); c];
                for bi in 0..bs {
                    for ch in 0..c {
                        for k in 0..t {
                            let idx = (bi * c + ch) * t + k;
                            dgamma[ch] += g[idx] * xhat[idx];
                            dbeta[ch] += g[idx];
                            let dh = g[idx] * gm[ch];
                            sum_dxhat[ch] += dh;
                            sum_dxhat_xhat[ch] += dh * xhat[idx];
                        }
                    }
                }
                let n = T::of((bs * t) as f64);
                acc(*x, &mut |s| {
                    for bi in 0..bs {
                        for ch in 0..c {
                            for k in 0..t {
                                let idx = (bi * c + ch) * t + k;
                                let dh = g[idx] * gm[ch];
                                s[idx] += invstd[ch] / n
                                    * (n * dh - sum_dxhat[ch] - xhat[idx] * sum_dxhat_xhat[ch]);
                            }
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    s.iter_mut().zip(&dgamma).for_each(|(a, &d)| *a += d)
                });
                acc(*beta, &mut |s| {
                    s.iter_mut().zip(&dbeta).for_each(|(a, &d)| *a += d)
                });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let (bs, c, t) = nodes[*x].value.dims3().expect("rank 3");
                let (gm, xv) = (val(*gamma), val(*x));
                acc(*x, &mut |s| {
                    for bi in 0..bs {
                        for ch in 0..c {
                            for k in 0..t {
                                let idx = (bi * c + ch) * t + k;
                                s[idx] += g[idx] * gm[ch] * invstd[ch];
                            }
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for bi in 0..bs {
                        for ch in 0..c {
                            for k in 0..t {
                                let idx = (bi * c + ch) * t + k;
                                s[ch] += g[idx] * (xv[idx] - mean[ch]) * invstd[ch];
                            }
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for bi in 0..bs {
                        for ch in 0..c {
                            for k in 0..t {
                                s[ch] += g[(bi * c + ch) * t + k];
                            }
                        }
                    }
                });
            }
            Op::Stft {
                x,
                plan,
                spectra,
                rows,
                len,
            } => {
                let dx = plan.backward(spectra, out, g, *rows, *len);
                acc(*x, &mut |s| {
                    s.iter_mut().zip(&dx).for_each(|(a, &d)| *a += d)
                });
            }
            Op::FilteredNoise {
                amp,
                noise,
                basis,
                dims,
                with_tail,
            } => {
                let damp = kernels::filtered_noise_backward(noise, basis, g, dims, *with_tail);
                acc(*amp, &mut |s| {
                    s.iter_mut().zip(&damp).for_each(|(a, &d)| *a += d)
                });
            }
        }
    }
}
