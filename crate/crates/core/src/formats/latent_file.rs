//! Latent trajectories on disk: `RAVL`, then little-endian `u32` version,
//! flags, dim, frame rate (milli-Hz) and frame count, then `f32` frames
//! channel-major.

use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const LATENT_MAGIC: &[u8; 4] = b"RAVL";
pub const LATENT_VERSION: u32 = 1;
/// Set when the frames are coordinates in a fidelity basis.
pub const FLAG_COMPACT: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFile {
    pub compact: bool,
    pub frame_rate_millihz: u32,
    /// `[1, dim, frames]`.
    pub latents: Tensor<f32>,
}

impl LatentFile {
    pub fn dim(&self) -> usize {
        self.latents.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.latents.shape()[2]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (b, d, t) = self.latents.dims3()?;
        if b != 1 {
            return Err(Error::Format(format!(
                "latent file holds one sequence, got batch {b}"
            )));
        }
        let mut out = Vec::with_capacity(24 + 4 * d * t);
        out.extend_from_slice(LATENT_MAGIC);
        let flags = if self.compact { FLAG_COMPACT } else { 0 };
        for v in [
            LATENT_VERSION,
            flags,
            d as u32,
            self.frame_rate_millihz,
            t as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.latents.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 24 || &bytes[..4] != LATENT_MAGIC {
            return Err(Error::Format(
                "not a latent file (missing RAVL header)".into(),
            ));
        }
        let word =
            |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let (version, flags, d, rate, t) = (
            word(0),
            word(1),
            word(2) as usize,
            word(3),
            word(4) as usize,
        );
        if version != LATENT_VERSION {
            return Err(Error::Format(format!(
                "unsupported latent file version {version}"
            )));
        }
        if flags & !FLAG_COMPACT != 0 {
            return Err(Error::Format(format!(
                "unknown latent file flags {flags:#x}"
            )));
        }
        let payload = &bytes[24..];
        if payload.len() != 4 * d * t {
            return Err(Error::Format(format!(
                "latent file declares {d} x {t} frames but holds {} bytes",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self {
            compact: flags & FLAG_COMPACT != 0,
            frame_rate_millihz: rate,
            latents: Tensor::from_vec(&[1, d, t], data)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Latent frame rate rounded to milli-Hz.
pub fn millihz(rate_hz: f64) -> u32 {
    (rate_hz * 1000.0).round() as u32
}
