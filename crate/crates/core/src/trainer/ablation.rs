use crate::datagen::stream_seed;
use crate::error::{Error, Result};
use crate::metrics::{mean_report, restack, MetricReport};
use crate::model::Dose;
use crate::volume::{ImageSlice, ImageVolume};

use super::{
    finetune_stage2, infer_slices, pretrain_stage1, PairedSlices, S3petNet, Stage, TrainConfig,
    Variant,
};

/// One held-out pair: LPET input and SPET reference.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub id: String,
    pub lpet: ImageVolume,
    pub spet: ImageVolume,
}

/// Inputs of an ablation run.
#[derive(Clone, Debug)]
pub struct AblationData {
    /// Stage-I slices per dose.
    pub pretrain_lpet: Vec<ImageSlice>,
    pub pretrain_spet: Vec<ImageSlice>,
    pub train: PairedSlices,
    pub eval: Vec<EvalCase>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: Variant,
    /// Mean over evaluation cases.
    pub metrics: MetricReport,
}

/// Per-case metrics of `net` on `cases`, restacking slices per volume.
pub fn evaluate_net(net: &S3petNet, cases: &[EvalCase], max_val: f64) -> Result<Vec<MetricReport>> {
    cases
        .iter()
        .map(|c| {
            let pred = restack(&infer_slices(net, &c.lpet.slices())?)?;
            MetricReport::evaluate(&c.id, &pred, &c.spet, max_val)
        })
        .collect()
}

/// LPET-vs-SPET metrics averaged over the cases.
pub fn lpet_baseline(cases: &[EvalCase], max_val: f64) -> Result<MetricReport> {
    let reports = cases
        .iter()
        .map(|c| MetricReport::evaluate(&c.id, &c.lpet, &c.spet, max_val))
        .collect::<Result<Vec<_>>>()?;
    mean_report("lpet", &reports)
}

/// Pretrains both dose autoencoders once, then fine-tunes and evaluates the
/// four variants from them, in ladder order.
pub fn run_ablation(
    data: &AblationData,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    max_val: f64,
) -> Result<Vec<AblationRow>> {
    if data.eval.is_empty() {
        return Err(Error::Invalid(
            "ablation needs at least one evaluation case".into(),
        ));
    }
    if stage1.stage != Stage::One || stage2.stage != Stage::Two {
        return Err(Error::config(
            "ablation needs a Stage-I and a Stage-II configuration",
        ));
    }
    let seed = stage2.seed;
    let c1 = TrainConfig {
        seed: stream_seed(seed, "ablation/stage1"),
        ..stage1.clone()
    };
    let l = pretrain_stage1(&data.pretrain_lpet, Dose::Low, &c1)?.checkpoint;
    let s = pretrain_stage1(&data.pretrain_spet, Dose::Standard, &c1)?.checkpoint;
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let cfg = TrainConfig {
            variant,
            ..stage2.clone()
        };
        let run = finetune_stage2(&data.train, &l, &s, &cfg)?;
        let reports = evaluate_net(&run.net, &data.eval, max_val)?;
        rows.push(AblationRow {
            seed,
            variant,
            metrics: mean_report(variant.as_str(), &reports)?,
        });
    }
    Ok(rows)
}

/// `variant,psnr,ssim,nmse`, one row per variant in ladder order, averaged
/// over every seed present in `rows`.
pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut out = String::from("variant,psnr,ssim,nmse\n");
    for v in Variant::ALL {
        let of: Vec<MetricReport> = rows
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.metrics.clone())
            .collect();
        let m = mean_report(v.as_str(), &of)?;
        out.push_str(&format!("{},{},{},{}\n", v, m.psnr, m.ssim, m.nmse));
    }
    Ok(out)
}
