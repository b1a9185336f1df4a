//! Slices ⇄ patch sequences, sinusoidal positions, random patch masking and
//! the linear patch embedding.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::params::Linear;
use crate::tensor::Tensor;
use crate::volume::ImageSlice;

/// Non-overlapping `P×P` tiles of a slice in row-major tile order; each
/// patch is stored row-major within the tile.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub n_patches: usize,
    pub patch: usize,
    pub data: Vec<f32>,
}

impl PatchSequence {
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn get(&self, k: usize) -> &[f32] {
        let pd = self.patch_dim();
        &self.data[k * pd..(k + 1) * pd]
    }

    /// `[n_patches, patch_dim]` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[self.n_patches, self.patch_dim()],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("patch sequence dims are consistent")
    }
}

/// `n_tokens × dim` real matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub n_tokens: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl TokenSequence {
    pub fn new(n_tokens: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_tokens * dim {
            return Err(Error::shape(format!(
                "{n_tokens}x{dim} tokens need {} values, got {}",
                n_tokens * dim,
                values.len()
            )));
        }
        Ok(Self {
            n_tokens,
            dim,
            values,
        })
    }

    pub fn zeros(n_tokens: usize, dim: usize) -> Self {
        Self {
            n_tokens,
            dim,
            values: vec![0.0; n_tokens * dim],
        }
    }

    pub fn token(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn get(&self, k: usize, c: usize) -> f64 {
        self.values[k * self.dim + c]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.n_tokens, self.dim], self.values.clone()).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::shape(format!(
                "tokens from tensor of shape {:?}",
                t.shape()
            )));
        }
        let (n, d) = t.dims2();
        Self::new(n, d, t.data().to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn patchify(slice: &ImageSlice, patch: usize) -> Result<PatchSequence> {
    let (h, w) = (slice.height, slice.width);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::config(format!(
            "{h}x{w} slice is not divisible into {patch}x{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w);
    for ty in 0..gh {
        for tx in 0..gw {
            for r in 0..patch {
                let row = ty * patch + r;
                let start = row * w + tx * patch;
                data.extend_from_slice(&slice.data[start..start + patch]);
            }
        }
    }
    Ok(PatchSequence {
        n_patches: gh * gw,
        patch,
        data,
    })
}

pub fn unpatchify(
    patches: &PatchSequence,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<ImageSlice> {
    if patch == 0
        || patch != patches.patch
        || !height.is_multiple_of(patch)
        || !width.is_multiple_of(patch)
    {
        return Err(Error::shape(format!(
            "cannot tile {height}x{width} with {patch}x{patch} patches"
        )));
    }
    if patches.n_patches * patch * patch != height * width || patches.data.len() != height * width {
        return Err(Error::shape(format!(
            "{} patches of {patch}x{patch} do not cover {height}x{width}",
            patches.n_patches
        )));
    }
    let gw = width / patch;
    let mut data = vec![0.0f32; height * width];
    for k in 0..patches.n_patches {
        let (ty, tx) = (k / gw, k % gw);
        let src = patches.get(k);
        for r in 0..patch {
            let start = (ty * patch + r) * width + tx * patch;
            data[start..start + patch].copy_from_slice(&src[r * patch..(r + 1) * patch]);
        }
    }
    ImageSlice::new(height, width, data)
}

/// Fixed 2-D sin-cos table for a `grid_side × grid_side` token grid.
///
/// The first half of the channels encodes the tile row, the second half the
/// tile column; each half is `[sin(pos·ω_i)…, cos(pos·ω_i)…]` with
/// `ω_i = 10000^(-2i/(dim/2))`.
pub fn positional_table(grid_side: usize, dim: usize) -> Result<TokenSequence> {
    if dim == 0 || !dim.is_multiple_of(4) {
        return Err(Error::config(format!(
            "positional embedding width {dim} is not divisible by 4"
        )));
    }
    let quarter = dim / 4;
    let half = dim / 2;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(2.0 * i as f64 / half as f64))
        .collect();
    let n = grid_side * grid_side;
    let mut values = vec![0.0; n * dim];
    for k in 0..n {
        let coords = [(k / grid_side) as f64, (k % grid_side) as f64];
        let row = &mut values[k * dim..(k + 1) * dim];
        for (axis, &pos) in coords.iter().enumerate() {
            let base = axis * half;
            for (i, w) in omega.iter().enumerate() {
                row[base + i] = (pos * w).sin();
                row[base + quarter + i] = (pos * w).cos();
            }
        }
    }
    TokenSequence::new(n, dim, values)
}

/// Visible/masked partition of `0..n`, both sorted.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub keep_ratio: f64,
}

impl MaskPlan {
    pub fn n_tokens(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// Visible-patch count for `n` patches at `keep_ratio`, never below one.
    pub fn visible_count(n: usize, keep_ratio: f64) -> usize {
        ((keep_ratio * n as f64).round() as usize).clamp(1, n.max(1))
    }
}

pub fn sample_mask(n: usize, keep_ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::config(format!(
            "keep ratio {keep_ratio} outside (0, 1]"
        )));
    }
    if n == 0 {
        return Err(Error::config("cannot mask an empty patch sequence"));
    }
    let n_visible = MaskPlan::visible_count(n, keep_ratio);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut visible = order[..n_visible].to_vec();
    let mut masked = order[n_visible..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    Ok(MaskPlan {
        visible,
        masked,
        keep_ratio,
    })
}

/// `token_k = projection(patch_k) + pos_k`.
pub fn embed(
    patches: &PatchSequence,
    projection: &Linear,
    pos: &TokenSequence,
) -> Result<TokenSequence> {
    if projection.inputs() != patches.patch_dim()
        || pos.n_tokens != patches.n_patches
        || pos.dim != projection.outputs()
    {
        return Err(Error::shape(format!(
            "embedding {} patches of dim {} with a {}x{} projection and {}x{} positions",
            patches.n_patches,
            patches.patch_dim(),
            projection.outputs(),
            projection.inputs(),
            pos.n_tokens,
            pos.dim
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(patches.to_tensor());
    let y = projection.forward(&mut tape, x)?;
    let p = tape.constant(pos.to_tensor());
    let out = tape.add(y, p)?;
    TokenSequence::from_tensor(tape.value(out))
}
