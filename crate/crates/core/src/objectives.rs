//! Stage-II composite losses.

use crate::autograd::{Tape, Var};
use crate::dsmae::stage1_loss;
use crate::error::{Error, Result};
use crate::volume::ImageSlice;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda1: 1.0,
            lambda2: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("gamma", self.gamma),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(format!(
                    "loss.{name} = {w} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub align: f64,
    pub transfer: f64,
    pub rec: f64,
    pub total: f64,
}

impl LossReport {
    /// `step,align,transfer,rec,total`
    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{}",
            self.align, self.transfer, self.rec, self.total
        )
    }

    pub fn is_consistent(&self, w: &LossWeights, tol: f64) -> bool {
        (self.total - (self.align + w.lambda1 * self.transfer + w.lambda2 * self.rec)).abs() <= tol
    }
}

/// `mean|x̃_L − x_L| + γ·mean|x̃_S − x_S|`.
pub fn rec_loss(
    pred_l: &ImageSlice,
    target_l: &ImageSlice,
    pred_s: &ImageSlice,
    target_s: &ImageSlice,
    gamma: f64,
) -> Result<f64> {
    Ok(stage1_loss(pred_l, target_l)? + gamma * stage1_loss(pred_s, target_s)?)
}

pub fn stage2_loss(align: f64, transfer: f64, rec: f64, w: &LossWeights) -> LossReport {
    LossReport {
        align,
        transfer,
        rec,
        total: align + w.lambda1 * transfer + w.lambda2 * rec,
    }
}

/// Graph terms of one Stage-II step; absent terms contribute zero.
pub struct LossTerms {
    pub align: Option<Var>,
    pub transfer: Option<Var>,
    pub rec: Var,
}

/// Builds the weighted total on the tape and the matching report.
pub fn stage2_graph(
    tape: &mut Tape<'_>,
    terms: &LossTerms,
    w: &LossWeights,
) -> Result<(Var, LossReport)> {
    let scalar = |tape: &Tape<'_>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).data()[0]);
    let report = stage2_loss(
        scalar(tape, terms.align),
        scalar(tape, terms.transfer),
        scalar(tape, Some(terms.rec)),
        w,
    );
    let mut total = terms.align;
    let weighted = [
        terms.transfer.map(|t| (t, w.lambda1)),
        Some((terms.rec, w.lambda2)),
    ];
    for (v, weight) in weighted.into_iter().flatten() {
        let v = tape.scale(v, weight);
        total = Some(match total {
            Some(acc) => tape.add(acc, v)?,
            None => v,
        });
    }
    let total = total.expect("rec term is always present");
    if !report.total.is_finite() {
        return Err(Error::numeric("stage II loss", format!("{report:?}")));
    }
    Ok((total, report))
}

/// `mean|x̃_L − x_L| + γ·mean|x̃_S − x_S|` on the tape.
pub fn rec_graph(
    tape: &mut Tape<'_>,
    pred_l: Var,
    target_l: Var,
    pred_s: Var,
    target_s: Var,
    gamma: f64,
) -> Result<Var> {
    let l = tape.mean_abs_diff(pred_l, target_l)?;
    let s = tape.mean_abs_diff(pred_s, target_s)?;
    let s = tape.scale(s, gamma);
    tape.add(l, s)
}
