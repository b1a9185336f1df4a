//! Analytic gradients of both stage losses against central finite
//! differences on a tiny model.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Tape;
use crate::datagen::stream_seed;
use crate::decoder::Mode;
use crate::dsmae::{mae_graph, DsmaeParams};
use crate::error::{Error, Result};
use crate::model::{Dose, ModelDims};
use crate::objectives::LossWeights;
use crate::params::{named_tensors, Linear, ParamKind, Parameters};
use crate::tensor::Tensor;
use crate::tokenizer::{sample_mask, MaskPlan};
use crate::volume::ImageSlice;

use super::{Overrides, S3petNet, SliceBatch, Stage, Variant};

const STAGE2_GROUPS: [&str; 6] = ["lpet", "spet", "dkd", "dkl", "aux", "master"];
const STAGE1_GROUPS: [&str; 4] = ["embed", "encoder", "mask_token", "head"];
/// Stage-I keep ratio of the check. With four tokens the training ratios
/// leave one visible token, where attention is constant and its query and
/// key weights get no gradient at all.
const CHECK_KEEP_RATIO: f64 = 0.5;
/// Redraws allowed per sample when a perturbation crosses a kink.
const MAX_REDRAWS: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub seed: u64,
    pub dims: ModelDims,
    pub batch: usize,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound of the relative-error denominator, so that two
    /// near-zero gradients compare as equal.
    pub floor: f64,
    pub samples_per_group: usize,
    pub shared_samples: usize,
    /// Half-width of the uniform noise added to every learnable parameter,
    /// so that zero biases and unit gains don't make the check degenerate.
    pub jitter: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: ModelDims {
                dim: 8,
                depth: 1,
                heads: 2,
                patch: 8,
                slice: 16,
            },
            batch: 2,
            step: 1e-4,
            tolerance: 1e-5,
            floor: 1e-6,
            samples_per_group: 4,
            shared_samples: 4,
            jitter: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSample {
    pub stage: Stage,
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Gradient of the shared invariant projector against the sum of the
/// finite differences taken through each dose branch separately.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric_l: f64,
    pub numeric_s: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
    pub shared: Vec<SharedCheck>,
    /// Draws discarded because the perturbation flipped a ReLU or L1 sign.
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples
            .iter()
            .map(|s| s.rel_error)
            .chain(self.shared.iter().map(|s| s.rel_error))
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    fn offenders(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .samples
            .iter()
            .filter(|s| s.rel_error.is_nan() || s.rel_error >= self.tolerance)
            .map(|s| {
                format!(
                    "{}[{}] (stage {}, rel {:.3e})",
                    s.name,
                    s.index,
                    s.stage.as_str(),
                    s.rel_error
                )
            })
            .collect();
        out.extend(
            self.shared
                .iter()
                .filter(|s| s.rel_error.is_nan() || s.rel_error >= self.tolerance)
                .map(|s| format!("{}[{}] (shared, rel {:.3e})", s.name, s.index, s.rel_error)),
        );
        out
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "stage  parameter                         analytic        numeric         rel_error"
        )?;
        for s in &self.samples {
            writeln!(
                f,
                "{:<6} {:<33} {:>+.8e} {:>+.8e} {:.3e}",
                s.stage.as_str(),
                format!("{}[{}]", s.name, s.index),
                s.analytic,
                s.numeric,
                s.rel_error
            )?;
        }
        for s in &self.shared {
            writeln!(
                f,
                "shared {:<33} {:>+.8e} {:>+.8e} {:.3e}  (L {:+.3e}, S {:+.3e})",
                format!("{}[{}]", s.name, s.index),
                s.analytic,
                s.numeric_l + s.numeric_s,
                s.rel_error,
                s.numeric_l,
                s.numeric_s
            )?;
        }
        writeln!(
            f,
            "{} samples, {} shared, {} redrawn at kinks; max relative error {:.3e} (tolerance {:.0e}): {}",
            self.samples.len(),
            self.shared.len(),
            self.skipped,
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn nudge<M: Parameters>(model: &mut M, name: &str, index: usize, delta: f64) {
    model.visit_mut("", &mut |n, t, _| {
        if n == name {
            t.data_mut()[index] += delta;
        }
    });
}

fn jitter<M: Parameters>(model: &mut M, amount: f64, rng: &mut ChaCha8Rng) {
    if amount <= 0.0 {
        return;
    }
    model.visit_mut("", &mut |_, t, kind| {
        if kind == ParamKind::Learnable {
            for v in t.data_mut() {
                *v += rng.random_range(-amount..amount);
            }
        }
    });
}

fn random_slices(n: usize, side: usize, rng: &mut ChaCha8Rng) -> Vec<ImageSlice> {
    (0..n)
        .map(|_| ImageSlice {
            height: side,
            width: side,
            data: (0..side * side).map(|_| rng.random::<f32>()).collect(),
        })
        .collect()
}

/// Learnable tensors whose name starts with `group`, with their lengths.
fn group_tensors<M: Parameters>(model: &M, group: &str) -> Vec<(String, usize)> {
    named_tensors(model, "")
        .into_iter()
        .filter(|(n, _, k)| {
            *k == ParamKind::Learnable && (n == group || n.starts_with(&format!("{group}.")))
        })
        .map(|(n, t, _)| (n, t.len()))
        .collect()
}

type Eval<'a, M> = dyn Fn(&M) -> Result<(f64, Vec<bool>)> + 'a;

/// Central difference of `eval` along one scalar, or `None` when either
/// side of the stencil lands on a different linear piece than the base.
fn central<M: Parameters + Clone>(
    model: &M,
    name: &str,
    index: usize,
    h: f64,
    base_sig: &[bool],
    eval: &Eval<'_, M>,
) -> Result<Option<f64>> {
    let mut plus = model.clone();
    nudge(&mut plus, name, index, h);
    let (fp, sp) = eval(&plus)?;
    let mut minus = model.clone();
    nudge(&mut minus, name, index, -h);
    let (fm, sm) = eval(&minus)?;
    if sp != base_sig || sm != base_sig {
        return Ok(None);
    }
    Ok(Some((fp - fm) / (2.0 * h)))
}

struct Sampler<'a, M> {
    model: &'a M,
    grads: &'a HashMap<String, Vec<f64>>,
    base_sig: Vec<bool>,
    eval: &'a Eval<'a, M>,
}

impl<M: Parameters + Clone> Sampler<'_, M> {
    fn run(
        &self,
        stage: Stage,
        groups: &[&str],
        cfg: &GradCheckConfig,
        rng: &mut ChaCha8Rng,
        skipped: &mut usize,
    ) -> Result<Vec<GradSample>> {
        let mut out = Vec::new();
        for group in groups {
            let tensors = group_tensors(self.model, group);
            if tensors.is_empty() {
                return Err(Error::config(format!("no learnable tensors under {group}")));
            }
            for _ in 0..cfg.samples_per_group {
                let mut found = None;
                for _ in 0..MAX_REDRAWS {
                    let (name, len) = &tensors[rng.random_range(0..tensors.len())];
                    let index = rng.random_range(0..*len);
                    match central(self.model, name, index, cfg.step, &self.base_sig, self.eval)? {
                        Some(numeric) => {
                            found = Some((name.clone(), index, numeric));
                            break;
                        }
                        None => *skipped += 1,
                    }
                }
                let (name, index, numeric) = found.ok_or_else(|| {
                    Error::GradientCheck(format!(
                        "every draw in {group} crossed a kink; shrink the step"
                    ))
                })?;
                let analytic = self.grads.get(&name).map_or(0.0, |g| g[index]);
                out.push(GradSample {
                    stage,
                    rel_error: rel_error(analytic, numeric, cfg.floor),
                    name,
                    index,
                    analytic,
                    numeric,
                });
            }
        }
        Ok(out)
    }
}

fn analytic_by_name<M: Parameters>(
    tape: &Tape<'_>,
    grads: &crate::autograd::Gradients,
    model: &M,
) -> HashMap<String, Vec<f64>> {
    let mut out = HashMap::new();
    model.visit("", &mut |n, t, kind| {
        if kind == ParamKind::Learnable {
            if let Some(g) = tape.param_var(t).and_then(|v| grads.get(v)) {
                out.insert(n, g.to_vec());
            }
        }
    });
    out
}

struct Stage2Fixture {
    net: S3petNet,
    l: SliceBatch,
    s: SliceBatch,
    weights: LossWeights,
    /// Value of `s_ds` at the base point, held fixed as the transfer target.
    target: Tensor,
}

impl Stage2Fixture {
    fn new(cfg: &GradCheckConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "gradcheck/stage2"));
        let mut net = S3petNet::init(
            stream_seed(cfg.seed, "gradcheck/net"),
            cfg.dims,
            Variant::Full,
        )?;
        jitter(&mut net, cfg.jitter, &mut rng);
        net.set_mode(Mode::Train);
        let ls = random_slices(cfg.batch, cfg.dims.slice, &mut rng);
        let ss = random_slices(cfg.batch, cfg.dims.slice, &mut rng);
        let l = SliceBatch::new(&ls.iter().collect::<Vec<_>>(), &cfg.dims)?;
        let s = SliceBatch::new(&ss.iter().collect::<Vec<_>>(), &cfg.dims)?;
        let weights = LossWeights::default();
        let target = {
            let mut tape = Tape::new();
            let pass = net.forward(&mut tape, &l, &s, &weights)?;
            let v = pass
                .spet_specific
                .ok_or_else(|| Error::config("full variant has no transfer target"))?;
            tape.value(v).clone()
        };
        Ok(Self {
            net,
            l,
            s,
            weights,
            target,
        })
    }

    fn loss(
        &self,
        net: &S3petNet,
        invariants: Option<(&Linear, &Linear)>,
    ) -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let overrides = Overrides {
            invariant_l: invariants.map(|p| p.0),
            invariant_s: invariants.map(|p| p.1),
            transfer_target: Some(self.target.clone()),
        };
        let pass = net.forward_with(&mut tape, &self.l, &self.s, &self.weights, overrides)?;
        Ok((tape.value(pass.loss).data()[0], tape.kink_signature()))
    }
}

fn check_stage2(
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
    skipped: &mut usize,
) -> Result<(Vec<GradSample>, Vec<SharedCheck>)> {
    let fx = Stage2Fixture::new(cfg)?;
    let (grads, base_sig) = {
        let mut tape = Tape::new();
        let pass = fx.net.forward(&mut tape, &fx.l, &fx.s, &fx.weights)?;
        let g = tape.backward(pass.loss)?;
        (analytic_by_name(&tape, &g, &fx.net), tape.kink_signature())
    };
    let eval = |n: &S3petNet| fx.loss(n, None);
    let sampler = Sampler {
        model: &fx.net,
        grads: &grads,
        base_sig: base_sig.clone(),
        eval: &eval,
    };
    let samples = sampler.run(Stage::Two, &STAGE2_GROUPS, cfg, rng, skipped)?;

    // Untie the shared projector and perturb one branch at a time.
    let shared = fx.net.dkd.invariant(Dose::Low).clone();
    let tensors: Vec<(String, usize)> = named_tensors(&shared, "")
        .into_iter()
        .map(|(n, t, _)| (n, t.len()))
        .collect();
    let mut checks = Vec::new();
    'outer: for _ in 0..cfg.shared_samples {
        for _ in 0..MAX_REDRAWS {
            let (name, len) = &tensors[rng.random_range(0..tensors.len())];
            let index = rng.random_range(0..*len);
            let branch = |which: Dose| -> Result<Option<f64>> {
                let mut side = [0.0; 2];
                for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                    let mut moved = shared.clone();
                    nudge(&mut moved, name, index, sign * cfg.step);
                    let pair = match which {
                        Dose::Low => (&moved, &shared),
                        Dose::Standard => (&shared, &moved),
                    };
                    let (f, sig) = fx.loss(&fx.net, Some(pair))?;
                    if sig != base_sig {
                        return Ok(None);
                    }
                    side[k] = f;
                }
                Ok(Some((side[0] - side[1]) / (2.0 * cfg.step)))
            };
            let (Some(numeric_l), Some(numeric_s)) = (branch(Dose::Low)?, branch(Dose::Standard)?)
            else {
                *skipped += 1;
                continue;
            };
            let full_name = format!("dkd.invariant.{name}");
            let analytic = grads.get(&full_name).map_or(0.0, |g| g[index]);
            checks.push(SharedCheck {
                rel_error: rel_error(analytic, numeric_l + numeric_s, cfg.floor),
                name: full_name,
                index,
                analytic,
                numeric_l,
                numeric_s,
            });
            continue 'outer;
        }
        return Err(Error::GradientCheck(
            "shared projector draws all crossed kinks".into(),
        ));
    }
    Ok((samples, checks))
}

fn check_stage1(
    cfg: &GradCheckConfig,
    rng: &mut ChaCha8Rng,
    skipped: &mut usize,
) -> Result<Vec<GradSample>> {
    let mut data_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "gradcheck/stage1"));
    let mut params = DsmaeParams::init(
        stream_seed(cfg.seed, "gradcheck/mae"),
        cfg.dims,
        Dose::Standard,
        CHECK_KEEP_RATIO,
    )?;
    jitter(&mut params, cfg.jitter, &mut data_rng);
    let slices = random_slices(cfg.batch, cfg.dims.slice, &mut data_rng);
    let refs: Vec<&ImageSlice> = slices.iter().collect();
    let patches = SliceBatch::new(&refs, &cfg.dims)?.patches;
    let plans = (0..cfg.batch)
        .map(|b| {
            sample_mask(
                cfg.dims.n_tokens(),
                CHECK_KEEP_RATIO,
                stream_seed(cfg.seed, &format!("gradcheck/mask/{b}")),
            )
        })
        .collect::<Result<Vec<MaskPlan>>>()?;
    let eval = |p: &DsmaeParams| -> Result<(f64, Vec<bool>)> {
        let mut tape = Tape::new();
        let x = tape.constant(patches.clone());
        let recon = mae_graph(&mut tape, p, x, &plans)?;
        let loss = tape.mean_abs_diff(recon, x)?;
        Ok((tape.value(loss).data()[0], tape.kink_signature()))
    };
    let (grads, base_sig) = {
        let mut tape = Tape::new();
        let x = tape.constant(patches.clone());
        let recon = mae_graph(&mut tape, &params, x, &plans)?;
        let loss = tape.mean_abs_diff(recon, x)?;
        let g = tape.backward(loss)?;
        (analytic_by_name(&tape, &g, &params), tape.kink_signature())
    };
    let sampler = Sampler {
        model: &params,
        grads: &grads,
        base_sig,
        eval: &eval,
    };
    sampler.run(Stage::One, &STAGE1_GROUPS, cfg, rng, skipped)
}

/// Runs both stage checks and reports every comparison, pass or fail.
pub fn measure_gradients(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if cfg.step <= 0.0 || cfg.samples_per_group == 0 || cfg.batch == 0 {
        return Err(Error::config(
            "gradient check needs a positive step, batch and sample count",
        ));
    }
    cfg.dims.validate_stage2()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, "gradcheck/draws"));
    let mut skipped = 0;
    let (mut samples, shared) = check_stage2(cfg, &mut rng, &mut skipped)?;
    samples.extend(check_stage1(cfg, &mut rng, &mut skipped)?);
    Ok(GradCheckReport {
        samples,
        shared,
        skipped,
        tolerance: cfg.tolerance,
    })
}

/// Like [`measure_gradients`], but any comparison at or above tolerance is
/// an error naming the offending parameters.
pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let report = measure_gradients(cfg)?;
    if report.passed() {
        Ok(report)
    } else {
        Err(Error::GradientCheck(format!(
            "max relative error {:.3e} >= {:.0e} at {}",
            report.max_rel_error(),
            report.tolerance,
            report.offenders().join(", ")
        )))
    }
}
