use crate::autograd::Tape;
use crate::datagen::stream_seed;
use crate::decoder::Mode;
use crate::error::{Error, Result};
use crate::model::Dose;
use crate::objectives::LossReport;
use crate::volume::{ImageSlice, ImageVolume};

use super::{
    adam_step, collect_grads, dims_meta, dsmae_from_checkpoint, parse_dims_meta, schedule,
    Checkpoint, OptimizerState, S3petNet, SliceBatch, Stage, TrainConfig, Variant,
};

const INFER_CHUNK: usize = 8;

/// Co-registered LPET/SPET slices, `lpet[i]` paired with `spet[i]`.
#[derive(Clone, Debug, Default)]
pub struct PairedSlices {
    pub lpet: Vec<ImageSlice>,
    pub spet: Vec<ImageSlice>,
}

impl PairedSlices {
    pub fn from_volumes(pairs: &[(ImageVolume, ImageVolume)]) -> Result<Self> {
        let mut out = Self::default();
        for (l, s) in pairs {
            if (l.depth, l.height, l.width) != (s.depth, s.height, s.width) {
                return Err(Error::shape("paired volumes differ in size"));
            }
            out.lpet.extend(l.slices());
            out.spet.extend(s.slices());
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.lpet.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lpet.is_empty()
    }
}

pub struct Stage2Run {
    pub net: S3petNet,
    pub checkpoint: Checkpoint,
    /// Loss components before each optimizer step.
    pub log: Vec<LossReport>,
}

/// `step,align,transfer,rec,total` lines with a header.
pub fn stage2_log_csv(log: &[LossReport]) -> String {
    let mut out = String::from("step,align,transfer,rec,total\n");
    for (i, r) in log.iter().enumerate() {
        out.push_str(&r.csv_row(i));
        out.push('\n');
    }
    out
}

/// Fine-tunes from two Stage-I checkpoints. The baseline variant checks the
/// checkpoints for compatibility but starts from random encoders.
pub fn finetune_stage2(
    data: &PairedSlices,
    ckpt_l: &Checkpoint,
    ckpt_s: &Checkpoint,
    cfg: &TrainConfig,
) -> Result<Stage2Run> {
    let lpet = dsmae_from_checkpoint(ckpt_l)?;
    let spet = dsmae_from_checkpoint(ckpt_s)?;
    if lpet.dose != Dose::Low || spet.dose != Dose::Standard {
        return Err(Error::config(format!(
            "checkpoints carry doses {} and {}, expected L then S",
            lpet.dose, spet.dose
        )));
    }
    for p in [&lpet, &spet] {
        if p.dims != cfg.dims {
            return Err(Error::config(format!(
                "checkpoint dims {:?} differ from configured {:?}",
                p.dims, cfg.dims
            )));
        }
    }
    let seed = stream_seed(cfg.seed, "init/stage2");
    let net = if cfg.variant.pretrained() {
        S3petNet::from_pretrained(seed, &lpet, &spet, cfg.variant)?
    } else {
        S3petNet::init(seed, cfg.dims, cfg.variant)?
    };
    finetune_from(net, data, cfg)
}

/// Runs the Stage-II loop on an already assembled network.
pub fn finetune_from(
    mut net: S3petNet,
    data: &PairedSlices,
    cfg: &TrainConfig,
) -> Result<Stage2Run> {
    cfg.validate()?;
    if data.is_empty() || data.lpet.len() != data.spet.len() {
        return Err(Error::Invalid(format!(
            "{} LPET and {} SPET slices; need equal, non-zero counts",
            data.lpet.len(),
            data.spet.len()
        )));
    }
    if net.dims != cfg.dims || net.variant != cfg.variant {
        return Err(Error::config(
            "network does not match the training configuration",
        ));
    }
    net.set_mode(Mode::Train);
    let mut state = OptimizerState::new(&net);
    let mut log = Vec::new();
    for batch in schedule(data.len(), cfg) {
        let l: Vec<&ImageSlice> = batch.iter().map(|&i| &data.lpet[i]).collect();
        let s: Vec<&ImageSlice> = batch.iter().map(|&i| &data.spet[i]).collect();
        let (lb, sb) = (
            SliceBatch::new(&l, &cfg.dims)?,
            SliceBatch::new(&s, &cfg.dims)?,
        );
        let (grads, pass_stats) = {
            let mut tape = Tape::new();
            let pass = net.forward(&mut tape, &lb, &sb, &cfg.weights)?;
            log.push(pass.report);
            let g = tape.backward(pass.loss)?;
            (
                collect_grads(&tape, &g, &net),
                (pass.aux_stats, pass.master_stats),
            )
        };
        adam_step(&mut net, &grads, &mut state, cfg.learning_rate)?;
        net.aux.update_running(&pass_stats.0)?;
        net.master.update_running(&pass_stats.1)?;
    }
    net.set_mode(Mode::Eval);
    let checkpoint = Checkpoint::from_model(Stage::Two, &cfg.hash(), log.len(), &net)
        .with_meta("variant", net.variant)
        .with_meta("dims", dims_meta(&net.dims));
    Ok(Stage2Run {
        net,
        checkpoint,
        log,
    })
}

pub fn net_from_checkpoint(ckpt: &Checkpoint) -> Result<S3petNet> {
    if ckpt.stage != Stage::Two {
        return Err(Error::Invalid(format!(
            "inference needs a Stage-II checkpoint, got stage {}",
            ckpt.stage.as_str()
        )));
    }
    let variant: Variant = ckpt.meta("variant")?.parse()?;
    let dims = parse_dims_meta(ckpt.meta("dims")?)?;
    let mut net = S3petNet::init(0, dims, variant)?;
    ckpt.load_into(&mut net)?;
    net.set_mode(Mode::Eval);
    Ok(net)
}

/// Master-branch RPET slices from LPET slices, eval-mode normalization.
pub fn infer_slices(net: &S3petNet, lpet: &[ImageSlice]) -> Result<Vec<ImageSlice>> {
    if net.master.mode != Mode::Eval {
        return Err(Error::Invalid(
            "inference requires eval-mode decoders".into(),
        ));
    }
    let mut out = Vec::with_capacity(lpet.len());
    for chunk in lpet.chunks(INFER_CHUNK) {
        let refs: Vec<&ImageSlice> = chunk.iter().collect();
        out.extend(net.reconstruct(&refs)?);
    }
    Ok(out)
}

pub fn infer(lpet: &ImageVolume, ckpt: &Checkpoint) -> Result<ImageVolume> {
    let net = net_from_checkpoint(ckpt)?;
    let slices = infer_slices(&net, &lpet.slices())?;
    let mut data = Vec::with_capacity(lpet.data.len());
    for s in &slices {
        data.extend_from_slice(&s.data);
    }
    ImageVolume::new(lpet.depth, lpet.height, lpet.width, 1, data)
}
