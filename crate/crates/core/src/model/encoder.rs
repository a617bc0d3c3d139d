use rand::Rng;

use super::config::{ModelConfig, LEAKY_SLOPE, LOGVAR_MAX, LOGVAR_MIN};
use super::layers::{BatchNorm, Conv, Ctx};
use crate::autograd::{ParamId, ParamStore, Real, Var};
use crate::error::Result;

pub const ENCODER_INPUT_KERNEL: usize = 7;

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub norm: BatchNorm,
    pub conv: Conv,
}

/// Multiband signal to the parameters of a diagonal Gaussian per latent frame.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub input: Conv,
    pub blocks: Vec<EncoderBlock>,
    pub mean: Conv,
    pub logvar: Conv,
}

#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub mean: Var,
    pub logvar: Var,
}

impl Encoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Self {
        let h = &cfg.encoder_hidden;
        let input = Conv::causal(
            store,
            "encoder.input",
            (cfg.bands, h[0]),
            ENCODER_INPUT_KERNEL,
            1,
            1,
            rng,
        );
        let mut blocks = Vec::new();
        for (i, &stride) in cfg.encoder_strides.iter().enumerate() {
            let cin = h[i];
            let cout = h.get(i + 1).copied().unwrap_or(2 * cin);
            let name = format!("encoder.block{i}");
            blocks.push(EncoderBlock {
                norm: BatchNorm::new(store, &format!("{name}.norm"), cin),
                conv: Conv::causal(
                    store,
                    &format!("{name}.conv"),
                    (cin, cout),
                    2 * stride + 1,
                    stride,
                    1,
                    rng,
                ),
            });
        }
        let top = 2 * h[h.len() - 1];
        Self {
            input,
            blocks,
            mean: Conv::causal(store, "encoder.mean", (top, cfg.latent_dim), 1, 1, 1, rng),
            logvar: Conv::causal(store, "encoder.logvar", (top, cfg.latent_dim), 1, 1, 1, rng),
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, bands: Var) -> Result<PosteriorVars> {
        let mut h = self.input.forward(cx, bands)?;
        for b in &self.blocks {
            h = b.norm.forward(cx, h)?;
            h = cx.g.leaky_relu(h, LEAKY_SLOPE);
            h = b.conv.forward(cx, h)?;
        }
        let h = cx.g.leaky_relu(h, LEAKY_SLOPE);
        let mean = self.mean.forward(cx, h)?;
        let raw = self.logvar.forward(cx, h)?;
        let logvar = cx.g.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
        Ok(PosteriorVars { mean, logvar })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.input.params();
        for b in &self.blocks {
            p.extend(b.norm.params());
            p.extend(b.conv.params());
        }
        p.extend(self.mean.params());
        p.extend(self.logvar.params());
        p
    }
}
