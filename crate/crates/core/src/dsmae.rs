//! Dose-specific masked autoencoder: embed the visible patches, encode them,
//! put every token back in place (mask token + position at hidden slots) and
//! reconstruct each patch with one affine head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::datagen::stream_seed;
use crate::encoder::{init_encoder, EncoderParams, INIT_STD};
use crate::error::{Error, Result};
use crate::model::{tile_rows, Dose, ModelDims};
use crate::params::{join, Linear, ParamKind, Parameters};
use crate::tensor::Tensor;
use crate::tokenizer::{
    patchify, positional_table, sample_mask, unpatchify, MaskPlan, PatchSequence,
};
use crate::volume::ImageSlice;

pub const SPET_KEEP_RATIO: f64 = 0.25;
pub const LPET_KEEP_RATIO: f64 = 0.15;

pub fn default_keep_ratio(dose: Dose) -> f64 {
    match dose {
        Dose::Low => LPET_KEEP_RATIO,
        Dose::Standard => SPET_KEEP_RATIO,
    }
}

/// LPET must be masked more heavily than SPET.
pub fn check_keep_ratios(lpet: f64, spet: f64) -> Result<()> {
    for (name, r) in [("lpet", lpet), ("spet", spet)] {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::config(format!(
                "{name} keep ratio {r} outside (0, 1]"
            )));
        }
    }
    if lpet >= spet {
        return Err(Error::config(format!(
            "lpet keep ratio {lpet} must be below spet keep ratio {spet}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsmaeParams {
    pub dose: Dose,
    pub keep_ratio: f64,
    pub dims: ModelDims,
    pub embed: Linear,
    pub encoder: EncoderParams,
    pub mask_token: Tensor,
    pub head: Linear,
}

impl DsmaeParams {
    pub fn init(seed: u64, dims: ModelDims, dose: Dose, keep_ratio: f64) -> Result<Self> {
        dims.validate()?;
        if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
            return Err(Error::config(format!(
                "keep ratio {keep_ratio} outside (0, 1]"
            )));
        }
        let encoder = init_encoder(
            stream_seed(seed, "encoder"),
            dims.dim,
            dims.depth,
            dims.heads,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "mae"));
        let pd = dims.patch_dim();
        Ok(Self {
            dose,
            keep_ratio,
            dims,
            embed: Linear::init(&mut rng, pd, dims.dim, INIT_STD),
            encoder,
            mask_token: Tensor::trunc_normal(&[dims.dim], INIT_STD, &mut rng),
            head: Linear::init(&mut rng, dims.dim, pd, INIT_STD),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.mask_token.all_finite() {
            return Err(Error::numeric("dsmae", "mask token is not finite"));
        }
        Ok(())
    }
}

/// Predicted patches `[batch·N, P²]` for `batch` slices stacked row-wise in
/// `patches`, masked per `plans[b]`.
pub fn mae_graph<'p>(
    tape: &mut Tape<'p>,
    params: &'p DsmaeParams,
    patches: Var,
    plans: &[MaskPlan],
) -> Result<Var> {
    let dims = params.dims;
    let n = dims.n_tokens();
    let batch = plans.len();
    let (rows, cols) = tape.value(patches).dims2();
    if rows != batch * n || cols != dims.patch_dim() {
        return Err(Error::shape(format!(
            "{rows}x{cols} patch matrix for {batch} slices of {n} patches of dim {}",
            dims.patch_dim()
        )));
    }
    let n_visible = plans.first().map_or(0, |p| p.visible.len());
    let mut visible = Vec::with_capacity(batch * n_visible);
    for (b, plan) in plans.iter().enumerate() {
        if plan.n_tokens() != n || plan.visible.len() != n_visible {
            return Err(Error::shape("mask plans disagree in size within a batch"));
        }
        visible.extend(plan.visible.iter().map(|&k| b * n + k));
    }
    let pos = tile_rows(&positional_table(dims.grid(), dims.dim)?.to_tensor(), batch);
    let d = dims.dim;
    let mut pos_visible = Vec::with_capacity(visible.len() * d);
    for &r in &visible {
        pos_visible.extend_from_slice(&pos.data()[r * d..(r + 1) * d]);
    }
    let mut pos_masked = pos.clone();
    for &r in &visible {
        pos_masked.data_mut()[r * d..(r + 1) * d].fill(0.0);
    }

    let x = tape.gather_rows(patches, &visible)?;
    let x = params.embed.forward(tape, x)?;
    let pv = tape.constant(Tensor::new(&[visible.len(), d], pos_visible)?);
    let x = tape.add(x, pv)?;
    if !tape.value(x).all_finite() {
        return Err(Error::numeric("dsmae embedding", "non-finite token"));
    }
    let x = params.encoder.forward(tape, x, batch)?;
    let fill = tape.param(&params.mask_token);
    let full = tape.scatter_rows(x, fill, &visible, batch * n)?;
    let pm = tape.constant(pos_masked);
    let full = tape.add(full, pm)?;
    let out = params.head.forward(tape, full)?;
    if !tape.value(out).all_finite() {
        return Err(Error::numeric("dsmae head", "non-finite reconstruction"));
    }
    Ok(out)
}

/// Reconstructs `slice` from the patches left visible by the plan drawn with
/// `seed`. Values come straight from the linear head and are not clamped.
pub fn mae_forward(
    slice: &ImageSlice,
    params: &DsmaeParams,
    seed: u64,
) -> Result<(ImageSlice, MaskPlan)> {
    let dims = params.dims;
    if slice.height != dims.slice || slice.width != dims.slice {
        return Err(Error::shape(format!(
            "{}x{} slice fed to a {}x{} model",
            slice.height, slice.width, dims.slice, dims.slice
        )));
    }
    let patches = patchify(slice, dims.patch)?;
    let plan = sample_mask(patches.n_patches, params.keep_ratio, seed)?;
    let mut tape = Tape::new();
    let x = tape.constant(patches.to_tensor());
    let y = mae_graph(&mut tape, params, x, std::slice::from_ref(&plan))?;
    let recon = PatchSequence {
        n_patches: patches.n_patches,
        patch: dims.patch,
        data: tape.value(y).data().iter().map(|&v| v as f32).collect(),
    };
    Ok((
        unpatchify(&recon, dims.slice, dims.slice, dims.patch)?,
        plan,
    ))
}

/// Mean absolute pixel difference over the whole image.
pub fn stage1_loss(recon: &ImageSlice, target: &ImageSlice) -> Result<f64> {
    if recon.height != target.height || recon.width != target.width {
        return Err(Error::shape(format!(
            "{}x{} reconstruction vs {}x{} target",
            recon.height, recon.width, target.height, target.width
        )));
    }
    let sum: f64 = recon
        .data
        .iter()
        .zip(&target.data)
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(sum / recon.data.len() as f64)
}

impl Parameters for DsmaeParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.embed.visit(&join(prefix, "embed"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        f(
            join(prefix, "mask_token"),
            &self.mask_token,
            ParamKind::Learnable,
        );
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        f(
            join(prefix, "mask_token"),
            &mut self.mask_token,
            ParamKind::Learnable,
        );
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
