use rand::Rng;

use super::config::{ModelConfig, DISCRIMINATOR_STRIDE, LEAKY_SLOPE};
use super::layers::{Conv, Ctx};
use crate::autograd::{ConvSpec, ParamId, ParamStore, Real, Var};
use crate::error::{shape_err, Result};

pub const DISCRIMINATOR_INPUT_KERNEL: usize = 15;
pub const DISCRIMINATOR_POST_KERNEL: usize = 5;
pub const DISCRIMINATOR_LOGIT_KERNEL: usize = 3;

/// Convolution stack on one time scale. Every layer but the last yields a
/// feature map; the last yields the logits.
#[derive(Debug, Clone)]
pub struct ScaleDiscriminator {
    pub layers: Vec<Conv>,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub scales: Vec<ScaleDiscriminator>,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorVars {
    pub logits: Vec<Var>,
    pub features: Vec<Vec<Var>>,
}

fn same(kernel: usize, stride: usize, groups: usize) -> ConvSpec {
    ConvSpec::centered(kernel, stride, 1).with_groups(groups)
}

impl ScaleDiscriminator {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let ch = &cfg.discriminator_channels;
        let mut layers = vec![Conv::new(
            store,
            &format!("{name}.input"),
            1,
            ch[0],
            DISCRIMINATOR_INPUT_KERNEL,
            same(DISCRIMINATOR_INPUT_KERNEL, 1, 1),
            true,
            rng,
        )];
        for (i, w) in ch.windows(2).enumerate() {
            let groups = (w[0] / 4).max(1);
            let k = cfg.discriminator_kernel;
            layers.push(Conv::new(
                store,
                &format!("{name}.down{i}"),
                w[0],
                w[1],
                k,
                same(k, DISCRIMINATOR_STRIDE, groups),
                true,
                rng,
            ));
        }
        let top = ch[ch.len() - 1];
        layers.push(Conv::new(
            store,
            &format!("{name}.post"),
            top,
            top,
            DISCRIMINATOR_POST_KERNEL,
            same(DISCRIMINATOR_POST_KERNEL, 1, 1),
            true,
            rng,
        ));
        layers.push(Conv::new(
            store,
            &format!("{name}.logits"),
            top,
            1,
            DISCRIMINATOR_LOGIT_KERNEL,
            same(DISCRIMINATOR_LOGIT_KERNEL, 1, 1),
            true,
            rng,
        ));
        Self { layers }
    }

    /// Input samples seen by one logit.
    pub fn receptive_field(&self) -> usize {
        let mut rf = 1;
        let mut jump = 1;
        for l in &self.layers {
            rf += (l.kernel - 1) * l.spec.dilation * jump;
            jump *= l.spec.stride;
        }
        rf
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut h = x;
        let mut features = Vec::new();
        let (last, body) = self.layers.split_last().expect("nonempty");
        for layer in body {
            h = layer.forward(cx, h)?;
            h = cx.g.leaky_relu(h, LEAKY_SLOPE);
            features.push(h);
        }
        Ok((last.forward(cx, h)?, features))
    }
}

impl Discriminator {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        Self {
            scales: (0..cfg.discriminator_scales)
                .map(|s| {
                    ScaleDiscriminator::new(store, &format!("discriminator.scale{s}"), cfg, rng)
                })
                .collect(),
        }
    }

    /// `x` is audio `[B, 1, N]`; scale `s` sees it average-pooled `s` times.
    /// Shortest accepted input: the receptive field of the full-rate scale.
    pub fn min_input_len(&self) -> usize {
        self.scales
            .first()
            .map_or(1, ScaleDiscriminator::receptive_field)
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<DiscriminatorVars> {
        let len = *cx.g.shape(x).last().unwrap_or(&0);
        if len < self.min_input_len() {
            return Err(shape_err!(
                "discriminator input of {len} samples is shorter than its receptive field {}",
                self.min_input_len()
            ));
        }
        let mut logits = Vec::new();
        let mut features = Vec::new();
        let mut input = x;
        for (s, scale) in self.scales.iter().enumerate() {
            if s > 0 {
                input = cx.g.avg_pool2(input)?;
            }
            let (l, f) = scale.forward(cx, input)?;
            logits.push(l);
            features.push(f);
        }
        Ok(DiscriminatorVars { logits, features })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.scales
            .iter()
            .flat_map(|s| s.layers.iter().flat_map(Conv::params))
            .collect()
    }
}
