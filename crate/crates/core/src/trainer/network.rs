//! The bilateral Stage-II network and its ablation variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, Tape, Var};
use crate::datagen::stream_seed;
use crate::decoder::{fuse_graph, DecoderParams, Mode};
use crate::dkd::{Decoupled, DkdParams};
use crate::dkl::{token_swap, transfer_loss_graph, TransferParams};
use crate::dsmae::DsmaeParams;
use crate::encoder::{init_encoder, EncoderParams, INIT_STD};
use crate::error::{Error, Result};
use crate::model::{tile_rows, Dose, ModelDims};
use crate::objectives::{rec_graph, stage2_graph, LossReport, LossTerms, LossWeights};
use crate::params::{join, Linear, ParamKind, Parameters};
use crate::tensor::Tensor;
use crate::tokenizer::{patchify, positional_table};
use crate::volume::ImageSlice;

/// Ablation ladder: Stage II alone, then pretrained encoders, then
/// decoupling, then the full model with swap and transfer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Baseline,
    Dsmae,
    Dkd,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Dsmae,
        Variant::Dkd,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Dsmae => "+dsmae",
            Variant::Dkd => "+dkd",
            Variant::Full => "+dkl",
        }
    }

    pub fn pretrained(self) -> bool {
        self != Variant::Baseline
    }

    pub fn decouples(self) -> bool {
        matches!(self, Variant::Dkd | Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| {
                v.as_str() == s
                    || v.as_str().trim_start_matches('+') == s
                    || (s == "full" && *v == Variant::Full)
            })
            .ok_or_else(|| Error::Invalid(format!("unknown variant {s:?}")))
    }
}

/// Patch embedding plus transformer encoder of one dose.
#[derive(Clone, Debug, PartialEq)]
pub struct DoseEncoder {
    pub embed: Linear,
    pub encoder: EncoderParams,
}

impl DoseEncoder {
    pub fn init(seed: u64, dims: &ModelDims) -> Result<Self> {
        let encoder = init_encoder(
            stream_seed(seed, "encoder"),
            dims.dim,
            dims.depth,
            dims.heads,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "embed"));
        Ok(Self {
            embed: Linear::init(&mut rng, dims.patch_dim(), dims.dim, INIT_STD),
            encoder,
        })
    }

    pub fn from_dsmae(p: &DsmaeParams) -> Self {
        Self {
            embed: p.embed.clone(),
            encoder: p.encoder.clone(),
        }
    }

    /// Tokens `[batch·N, d]` of all patches (no masking).
    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        patches: Var,
        batch: usize,
        pos: &Tensor,
    ) -> Result<Var> {
        let x = self.embed.forward(tape, patches)?;
        let p = tape.constant(tile_rows(pos, batch));
        let x = tape.add(x, p)?;
        self.encoder.forward(tape, x, batch)
    }
}

impl Parameters for DoseEncoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.embed.visit(&join(prefix, "embed"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
    }
}

/// Slices of a batch as patch matrices `[batch·N, P²]` and images
/// `[batch, 1, S, S]`.
#[derive(Clone, Debug)]
pub struct SliceBatch {
    pub batch: usize,
    pub patches: Tensor,
    pub images: Tensor,
}

impl SliceBatch {
    pub fn new(slices: &[&ImageSlice], dims: &ModelDims) -> Result<Self> {
        if slices.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let s = dims.slice;
        let mut patches = Vec::with_capacity(slices.len() * s * s);
        let mut images = Vec::with_capacity(slices.len() * s * s);
        for sl in slices {
            if sl.height != s || sl.width != s {
                return Err(Error::shape(format!(
                    "{}x{} slice for a {s}x{s} model",
                    sl.height, sl.width
                )));
            }
            patches.extend(patchify(sl, dims.patch)?.data.iter().map(|&v| v as f64));
            images.extend(sl.data.iter().map(|&v| v as f64));
        }
        let b = slices.len();
        Ok(Self {
            batch: b,
            patches: Tensor::new(&[b * dims.n_tokens(), dims.patch_dim()], patches)?,
            images: Tensor::new(&[b, 1, s, s], images)?,
        })
    }
}

/// Verification hooks for `S3petNet::forward_with`. A separate projector
/// per dose unties the shared invariant projector; a fixed transfer target
/// replaces the detached `s_ds`.
#[derive(Default)]
pub struct Overrides<'p> {
    pub invariant_l: Option<&'p Linear>,
    pub invariant_s: Option<&'p Linear>,
    pub transfer_target: Option<Tensor>,
}

/// Graph handles of one training pass.
pub struct Stage2Pass {
    pub loss: Var,
    pub report: LossReport,
    pub terms: LossTerms,
    pub pred_l: Var,
    pub pred_s: Var,
    /// `s_ds`, the transfer target, in the full variant.
    pub spet_specific: Option<Var>,
    pub aux_stats: Vec<BatchStats>,
    pub master_stats: Vec<BatchStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct S3petNet {
    pub dims: ModelDims,
    pub variant: Variant,
    pub lpet: DoseEncoder,
    pub spet: DoseEncoder,
    pub dkd: DkdParams,
    pub dkl: TransferParams,
    pub aux: DecoderParams,
    pub master: DecoderParams,
}

impl S3petNet {
    pub fn init(seed: u64, dims: ModelDims, variant: Variant) -> Result<Self> {
        dims.validate_stage2()?;
        Ok(Self {
            dims,
            variant,
            lpet: DoseEncoder::init(stream_seed(seed, "lpet"), &dims)?,
            spet: DoseEncoder::init(stream_seed(seed, "spet"), &dims)?,
            dkd: DkdParams::init(stream_seed(seed, "dkd"), dims.dim),
            dkl: TransferParams::init(stream_seed(seed, "dkl"), dims.dim),
            aux: DecoderParams::init(stream_seed(seed, "aux"), dims.dim)?,
            master: DecoderParams::init(stream_seed(seed, "master"), dims.dim)?,
        })
    }

    /// Encoders taken from the two pretrained autoencoders; everything else
    /// freshly initialized.
    pub fn from_pretrained(
        seed: u64,
        lpet: &DsmaeParams,
        spet: &DsmaeParams,
        variant: Variant,
    ) -> Result<Self> {
        if lpet.dose != Dose::Low || spet.dose != Dose::Standard {
            return Err(Error::config(format!(
                "pretrained encoders have doses {} and {}, expected L and S",
                lpet.dose, spet.dose
            )));
        }
        if lpet.dims != spet.dims {
            return Err(Error::config(format!(
                "pretrained encoders disagree in dims: {:?} vs {:?}",
                lpet.dims, spet.dims
            )));
        }
        let mut net = Self::init(seed, lpet.dims, variant)?;
        net.lpet = DoseEncoder::from_dsmae(lpet);
        net.spet = DoseEncoder::from_dsmae(spet);
        Ok(net)
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.aux.mode = mode;
        self.master.mode = mode;
    }

    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        l: &SliceBatch,
        s: &SliceBatch,
        w: &LossWeights,
    ) -> Result<Stage2Pass> {
        self.forward_with(tape, l, s, w, Overrides::default())
    }

    pub fn forward_with<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        l: &SliceBatch,
        s: &SliceBatch,
        w: &LossWeights,
        overrides: Overrides<'p>,
    ) -> Result<Stage2Pass> {
        let shared = self.dkd.invariant(Dose::Low);
        let inv_l = overrides.invariant_l.unwrap_or(shared);
        let inv_s = overrides.invariant_s.unwrap_or(shared);
        if l.batch != s.batch {
            return Err(Error::shape(format!(
                "{} LPET vs {} SPET slices",
                l.batch, s.batch
            )));
        }
        let b = l.batch;
        let grid = self.dims.grid();
        let pos = positional_table(grid, self.dims.dim)?.to_tensor();
        let xl = tape.constant(l.patches.clone());
        let e_l = self.lpet.forward(tape, xl, b, &pos)?;

        let mut spet_specific = None;
        let (aux_in, master_in, align, transfer) = if self.variant.decouples() {
            let xs = tape.constant(s.patches.clone());
            let e_s = self.spet.forward(tape, xs, b, &pos)?;
            let ld = Decoupled {
                specific: self.dkd.specific(Dose::Low).forward(tape, e_l)?,
                invariant: inv_l.forward(tape, e_l)?,
                dose: Dose::Low,
            };
            let sd = Decoupled {
                specific: self.dkd.specific(Dose::Standard).forward(tape, e_s)?,
                invariant: inv_s.forward(tape, e_s)?,
                dose: Dose::Standard,
            };
            let align = tape.token_js(ld.invariant, sd.invariant)?;
            if self.variant == Variant::Full {
                let (l_sw, s_sw) = token_swap(&ld, &sd);
                let predicted = self.dkl.forward(tape, ld.specific)?;
                let transfer = match overrides.transfer_target {
                    Some(t) => {
                        let target = tape.constant(t);
                        tape.token_js(target, predicted)?
                    }
                    None => transfer_loss_graph(tape, sd.specific, predicted)?,
                };
                spet_specific = Some(sd.specific);
                (
                    (s_sw.specific, s_sw.invariant),
                    (predicted, l_sw.invariant),
                    Some(align),
                    Some(transfer),
                )
            } else {
                (
                    (ld.specific, ld.invariant),
                    (ld.specific, ld.invariant),
                    Some(align),
                    None,
                )
            }
        } else {
            ((e_l, e_l), (e_l, e_l), None, None)
        };

        let fa = fuse_graph(tape, aux_in.0, aux_in.1, b, grid)?;
        let (pred_l, aux_stats) = self.aux.forward(tape, fa)?;
        let fm = fuse_graph(tape, master_in.0, master_in.1, b, grid)?;
        let (pred_s, master_stats) = self.master.forward(tape, fm)?;
        let tl = tape.constant(l.images.clone());
        let ts = tape.constant(s.images.clone());
        let rec = rec_graph(tape, pred_l, tl, pred_s, ts, w.gamma)?;
        let terms = LossTerms {
            align,
            transfer,
            rec,
        };
        let (loss, report) = stage2_graph(tape, &terms, w)?;
        Ok(Stage2Pass {
            loss,
            report,
            terms,
            pred_l,
            pred_s,
            spet_specific,
            aux_stats,
            master_stats,
        })
    }

    /// Master-branch reconstruction from LPET alone, in the decoders' current
    /// normalization mode.
    pub fn reconstruct(&self, lpet: &[&ImageSlice]) -> Result<Vec<ImageSlice>> {
        let batch = SliceBatch::new(lpet, &self.dims)?;
        let b = batch.batch;
        let grid = self.dims.grid();
        let pos = positional_table(grid, self.dims.dim)?.to_tensor();
        let mut tape = Tape::new();
        let x = tape.constant(batch.patches);
        let e_l = self.lpet.forward(&mut tape, x, b, &pos)?;
        let (a, c) = if self.variant.decouples() {
            let spec = self.dkd.specific(Dose::Low).forward(&mut tape, e_l)?;
            let inv = self.dkd.invariant(Dose::Low).forward(&mut tape, e_l)?;
            if self.variant == Variant::Full {
                (self.dkl.forward(&mut tape, spec)?, inv)
            } else {
                (spec, inv)
            }
        } else {
            (e_l, e_l)
        };
        let fm = fuse_graph(&mut tape, a, c, b, grid)?;
        let (y, _) = self.master.forward(&mut tape, fm)?;
        let s = self.dims.slice;
        Ok(tape
            .value(y)
            .data()
            .chunks(s * s)
            .map(|c| ImageSlice {
                height: s,
                width: s,
                data: c.iter().map(|&v| v as f32).collect(),
            })
            .collect())
    }

    pub fn update_running(&mut self, pass: &Stage2Pass) -> Result<()> {
        if self.aux.mode == Mode::Train {
            self.aux.update_running(&pass.aux_stats)?;
            self.master.update_running(&pass.master_stats)?;
        }
        Ok(())
    }
}

impl Parameters for S3petNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.lpet.visit(&join(prefix, "lpet"), f);
        self.spet.visit(&join(prefix, "spet"), f);
        self.dkd.visit(&join(prefix, "dkd"), f);
        self.dkl.visit(&join(prefix, "dkl"), f);
        self.aux.visit(&join(prefix, "aux"), f);
        self.master.visit(&join(prefix, "master"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.lpet.visit_mut(&join(prefix, "lpet"), f);
        self.spet.visit_mut(&join(prefix, "spet"), f);
        self.dkd.visit_mut(&join(prefix, "dkd"), f);
        self.dkl.visit_mut(&join(prefix, "dkl"), f);
        self.aux.visit_mut(&join(prefix, "aux"), f);
        self.master.visit_mut(&join(prefix, "master"), f);
    }
}
