//! Stage-I pretraining, Stage-II fine-tuning, inference and checkpoints.

mod ablation;
mod adam;
mod checkpoint;
mod gradcheck;
mod network;
mod stage1;
mod stage2;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use ablation::{
    ablation_csv, evaluate_net, lpet_baseline, run_ablation, AblationData, AblationRow, EvalCase,
};
pub use adam::{adam_step, OptimizerState, BETA1, BETA2, EPSILON};
pub use checkpoint::{entry_tensor, load_checkpoint, save_checkpoint, Checkpoint, Entry, Stage};
pub use gradcheck::{
    gradient_check, measure_gradients, GradCheckConfig, GradCheckReport, GradSample, SharedCheck,
};
pub use network::{DoseEncoder, Overrides, S3petNet, SliceBatch, Stage2Pass, Variant};
pub use stage1::{dsmae_from_checkpoint, pretrain_stage1, stage1_eval_loss, Stage1Run};
pub use stage2::{
    finetune_from, finetune_stage2, infer, infer_slices, net_from_checkpoint, stage2_log_csv,
    PairedSlices, Stage2Run,
};

use crate::autograd::{Gradients, Tape};
use crate::datagen::stream_seed;
use crate::dsmae::{check_keep_ratios, LPET_KEEP_RATIO, SPET_KEEP_RATIO};
use crate::error::{Error, Result};
use crate::model::ModelDims;
use crate::objectives::LossWeights;
use crate::params::{ParamKind, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub keep_lpet: f64,
    pub keep_spet: f64,
    pub dims: ModelDims,
    pub variant: Variant,
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: Stage::One,
            epochs: 300,
            max_steps: None,
            batch_size: 32,
            learning_rate: 2e-4,
            seed: 0,
            weights: LossWeights::default(),
            keep_lpet: LPET_KEEP_RATIO,
            keep_spet: SPET_KEEP_RATIO,
            dims: ModelDims::default(),
            variant: Variant::Full,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: Stage::Two,
            epochs: 100,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_steps == Some(0) {
            return Err(Error::config(
                "epochs, batch size and step cap must be positive",
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::config(format!(
                "learning rate {} is invalid",
                self.learning_rate
            )));
        }
        self.weights.validate()?;
        check_keep_ratios(self.keep_lpet, self.keep_spet)?;
        match self.stage {
            Stage::One => self.dims.validate(),
            Stage::Two => self.dims.validate_stage2(),
        }
    }

    /// Hex SHA-256 prefix of the full configuration.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(format!("{self:?}").as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Slice order of one epoch.
fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
        seed,
        &format!("epoch/{epoch}"),
    )));
    order
}

/// Batches of every epoch in training order, truncated at the step cap.
fn schedule(n: usize, cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for epoch in 0..cfg.epochs {
        for chunk in epoch_order(n, cfg.seed, epoch).chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| out.len() >= m) {
                return out;
            }
            out.push(chunk.to_vec());
        }
    }
    out
}

/// Gradient of each learnable tensor of `model`, in visit order.
pub fn collect_grads<P: Parameters + ?Sized>(
    tape: &Tape<'_>,
    grads: &Gradients,
    model: &P,
) -> Vec<Option<Vec<f64>>> {
    let mut out = Vec::new();
    model.visit("", &mut |_, t, kind| {
        if kind == ParamKind::Learnable {
            out.push(
                tape.param_var(t)
                    .and_then(|v| grads.get(v))
                    .map(<[f64]>::to_vec),
            );
        }
    });
    out
}

pub(crate) fn dims_meta(d: &ModelDims) -> String {
    format!("{},{},{},{},{}", d.dim, d.depth, d.heads, d.patch, d.slice)
}

pub(crate) fn parse_dims_meta(s: &str) -> Result<ModelDims> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Invalid(format!("bad dims metadata {s:?}")))?;
    let [dim, depth, heads, patch, slice] = v[..] else {
        return Err(Error::Invalid(format!("bad dims metadata {s:?}")));
    };
    Ok(ModelDims {
        dim,
        depth,
        heads,
        patch,
        slice,
    })
}
