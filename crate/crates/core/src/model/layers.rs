use rand::Rng;

use super::config::{BN_EPS, BN_MOMENTUM};
use crate::autograd::{ConvSpec, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::Result;

/// Whether batch normalisation uses batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Graph-building context shared by the layers.
pub struct Ctx<'a, T: Real> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    /// When set, parameters enter the graph as constants.
    pub frozen: bool,
    pub mode: Mode,
    pub bn_stats: Vec<BatchStats<T>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            g,
            store,
            frozen: false,
            mode,
            bn_stats: Vec::new(),
        }
    }

    pub fn frozen(mut self, frozen: bool) -> Self {
        self.frozen = frozen;
        self
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if self.frozen {
            self.g.param_const(self.store, id)
        } else {
            self.g.param(self.store, id)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin / spec.groups * kernel;
        let weight = store.add_kaiming(
            &format!("{name}.weight"),
            &[cout, cin / spec.groups, kernel],
            fan_in,
            rng,
        );
        let bias = bias.then(|| store.add_kaiming(&format!("{name}.bias"), &[cout], fan_in, rng));
        Self {
            weight,
            bias,
            spec,
            cin,
            cout,
            kernel,
        }
    }

    /// Causal convolution: output `t` sees inputs up to `t * stride`.
    pub fn causal<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        stride: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Self {
        Self::new(
            store,
            name,
            cin,
            cout,
            kernel,
            ConvSpec::causal(kernel, stride, dilation),
            true,
            rng,
        )
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.g.conv1d(x, w, b, self.spec)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }

    /// Samples of left context carried between streaming blocks.
    pub fn context(&self) -> usize {
        self.spec.pad_left
    }
}

/// Transposed convolution with kernel `2 * ratio`, keeping the first
/// `ratio * T` outputs so each output depends only on past inputs.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub weight: ParamId,
    pub bias: ParamId,
    pub ratio: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Upsample {
    pub fn kernel_for(ratio: usize) -> usize {
        2 * ratio
    }

    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        ratio: usize,
        rng: &mut R,
    ) -> Self {
        let k = Self::kernel_for(ratio);
        let fan_in = cout * k;
        Self {
            weight: store.add_kaiming(&format!("{name}.weight"), &[cin, cout, k], fan_in, rng),
            bias: store.add_kaiming(&format!("{name}.bias"), &[cout], fan_in, rng),
            ratio,
            cin,
            cout,
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let t = *cx.g.shape(x).last().unwrap_or(&0);
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        cx.g.conv_transpose1d(x, w, Some(b), self.ratio, 0, t * self.ratio)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Batch statistics produced by a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub layer: BatchNorm,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(
                &format!("{name}.gamma"),
                Tensor::full(&[channels], T::one()),
            ),
            beta: store.add(&format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store
                .add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(
                &format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
            ),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        match cx.mode {
            Mode::Train => {
                let (b, _, t) = cx.g.value(x).dims3()?;
                let (y, mean, var) = cx.g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                cx.bn_stats.push(BatchStats {
                    layer: *self,
                    mean,
                    var,
                    count: b * t,
                });
                Ok(y)
            }
            Mode::Eval => {
                let rm = cx.store.value(self.running_mean).data().to_vec();
                let rv = cx.store.value(self.running_var).data().to_vec();
                cx.g.batch_norm_eval(x, gamma, beta, &rm, &rv, BN_EPS)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta, self.running_mean, self.running_var]
    }
}

/// Folds batch statistics into the running estimates (unbiased variance).
pub fn update_running_stats<T: Real>(store: &mut ParamStore<T>, stats: &[BatchStats<T>]) {
    let m = T::of(BN_MOMENTUM);
    for s in stats {
        let unbias = T::of(s.count as f64 / (s.count.max(2) - 1) as f64);
        for (r, &v) in store
            .value_mut(s.layer.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&s.mean)
        {
            *r = (T::one() - m) * *r + m * v;
        }
        for (r, &v) in store
            .value_mut(s.layer.running_var)
            .data_mut()
            .iter_mut()
            .zip(&s.var)
        {
            *r = (T::one() - m) * *r + m * v * unbias;
        }
    }
}
