use crate::autograd::Tape;
use crate::datagen::stream_seed;
use crate::dsmae::{mae_forward, mae_graph, stage1_loss, DsmaeParams};
use crate::error::{Error, Result};
use crate::model::Dose;
use crate::tensor::Tensor;
use crate::tokenizer::{patchify, sample_mask, MaskPlan};
use crate::volume::ImageSlice;

use super::{
    adam_step, collect_grads, dims_meta, parse_dims_meta, schedule, Checkpoint, OptimizerState,
    Stage, TrainConfig,
};

pub struct Stage1Run {
    pub params: DsmaeParams,
    pub checkpoint: Checkpoint,
    /// Batch loss before each optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl Stage1Run {
    /// `step,loss` lines with a header.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.step_losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

fn patch_matrix(slices: &[&ImageSlice], patch: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for s in slices {
        let p = patchify(s, patch)?;
        rows += p.n_patches;
        data.extend(p.data.iter().map(|&v| v as f64));
    }
    Tensor::new(&[rows, patch * patch], data)
}

pub fn pretrain_stage1(slices: &[ImageSlice], dose: Dose, cfg: &TrainConfig) -> Result<Stage1Run> {
    if slices.is_empty() {
        return Err(Error::Invalid(
            "Stage-I pretraining needs at least one slice".into(),
        ));
    }
    cfg.validate()?;
    let keep = match dose {
        Dose::Low => cfg.keep_lpet,
        Dose::Standard => cfg.keep_spet,
    };
    let mut params = DsmaeParams::init(
        stream_seed(cfg.seed, &format!("init/{dose}")),
        cfg.dims,
        dose,
        keep,
    )?;
    let mut state = OptimizerState::new(&params);
    let n = cfg.dims.n_tokens();
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let batches_per_epoch = slices.len().div_ceil(cfg.batch_size);
    for (step, batch) in schedule(slices.len(), cfg).iter().enumerate() {
        let chosen: Vec<&ImageSlice> = batch.iter().map(|&i| &slices[i]).collect();
        let x = patch_matrix(&chosen, cfg.dims.patch)?;
        let plans = batch
            .iter()
            .enumerate()
            .map(|(b, _)| {
                sample_mask(
                    n,
                    keep,
                    stream_seed(cfg.seed, &format!("mask/{dose}/{step}/{b}")),
                )
            })
            .collect::<Result<Vec<MaskPlan>>>()?;
        let grads = {
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let recon = mae_graph(&mut tape, &params, xv, &plans)?;
            let loss = tape.mean_abs_diff(recon, xv)?;
            step_losses.push(tape.value(loss).data()[0]);
            let g = tape.backward(loss)?;
            collect_grads(&tape, &g, &params)
        };
        adam_step(&mut params, &grads, &mut state, cfg.learning_rate)?;
        if (step + 1) % batches_per_epoch == 0 {
            let tail = &step_losses[step + 1 - batches_per_epoch..];
            epoch_losses.push(tail.iter().sum::<f64>() / tail.len() as f64);
        }
    }
    let checkpoint = Checkpoint::from_model(Stage::One, &cfg.hash(), step_losses.len(), &params)
        .with_meta("dose", dose)
        .with_meta("keep_ratio", keep)
        .with_meta("dims", dims_meta(&cfg.dims));
    Ok(Stage1Run {
        params,
        checkpoint,
        step_losses,
        epoch_losses,
    })
}

pub fn dsmae_from_checkpoint(ckpt: &Checkpoint) -> Result<DsmaeParams> {
    if ckpt.stage != Stage::One {
        return Err(Error::Invalid(format!(
            "expected a Stage-I checkpoint, got stage {}",
            ckpt.stage.as_str()
        )));
    }
    let dose: Dose = ckpt.meta("dose")?.parse()?;
    let keep: f64 = ckpt
        .meta("keep_ratio")?
        .parse()
        .map_err(|_| Error::Invalid("bad keep_ratio metadata".into()))?;
    let dims = parse_dims_meta(ckpt.meta("dims")?)?;
    let mut p = DsmaeParams::init(0, dims, dose, keep)?;
    ckpt.load_into(&mut p)?;
    Ok(p)
}

/// Mean full-image L1 over `slices`, masking slice `i` with a plan derived
/// from `seed` and `i`.
pub fn stage1_eval_loss(params: &DsmaeParams, slices: &[ImageSlice], seed: u64) -> Result<f64> {
    if slices.is_empty() {
        return Err(Error::Invalid("no slices to evaluate".into()));
    }
    let mut total = 0.0;
    for (i, s) in slices.iter().enumerate() {
        let (recon, _) = mae_forward(s, params, stream_seed(seed, &format!("eval/{i}")))?;
        total += stage1_loss(&recon, s)?;
    }
    Ok(total / slices.len() as f64)
}
