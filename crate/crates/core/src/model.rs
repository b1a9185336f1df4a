//! Dose labels and the architecture dimensions shared by both stages.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dose {
    Low,
    Standard,
}

impl Dose {
    pub fn as_str(self) -> &'static str {
        match self {
            Dose::Low => "L",
            Dose::Standard => "S",
        }
    }
}

impl fmt::Display for Dose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dose {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L" | "l" | "lpet" => Ok(Dose::Low),
            "S" | "s" | "spet" => Ok(Dose::Standard),
            _ => Err(Error::Invalid(format!("unknown dose label {s:?}"))),
        }
    }
}

/// Token width `dim`, block count `depth`, attention `heads`, patch side and
/// slice side. The decoders upsample the token grid ×8, so Stage II needs
/// `patch = 8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub slice: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            dim: 64,
            depth: 4,
            heads: 4,
            patch: 8,
            slice: 64,
        }
    }
}

pub const DECODER_UPSCALE: usize = 8;

impl ModelDims {
    pub fn grid(&self) -> usize {
        self.slice / self.patch
    }

    pub fn n_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model.d = {} must be a positive multiple of model.h = {}",
                self.dim, self.heads
            )));
        }
        if self.patch == 0 || self.slice == 0 || !self.slice.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "slice side {} is not a multiple of patch side {}",
                self.slice, self.patch
            )));
        }
        Ok(())
    }

    /// Extra constraints of the bilateral Stage-II network.
    pub fn validate_stage2(&self) -> Result<()> {
        self.validate()?;
        if self.patch != DECODER_UPSCALE {
            return Err(Error::config(format!(
                "decoders upsample x{DECODER_UPSCALE}, so the patch side must be {DECODER_UPSCALE}, got {}",
                self.patch
            )));
        }
        if !self.dim.is_multiple_of(4) {
            return Err(Error::config(format!(
                "model.d = {} must be divisible by 4",
                self.dim
            )));
        }
        Ok(())
    }
}

/// Repeats an `[n, d]` table `batch` times along the rows.
pub(crate) fn tile_rows(t: &Tensor, batch: usize) -> Tensor {
    let (n, d) = t.dims2();
    let mut data = Vec::with_capacity(batch * n * d);
    for _ in 0..batch {
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[batch * n, d], data).expect("tiled dims are consistent")
}
