//! Dose-specific knowledge learning: swap the specific streams of a paired
//! LPET/SPET sample and learn an affine LPET→SPET map of specific tokens.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::dkd::{token_js_mean, Decoupled, DecoupledTokens};
use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::params::{join, Linear, ParamKind, Parameters};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct TransferParams {
    pub map: Linear,
}

impl TransferParams {
    pub fn init(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            map: Linear::init(&mut rng, dim, dim, INIT_STD),
        }
    }

    pub fn dim(&self) -> usize {
        self.map.inputs()
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, l_ds: Var) -> Result<Var> {
        self.map.forward(tape, l_ds)
    }
}

impl Parameters for TransferParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.map.visit(&join(prefix, "map"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.map.visit_mut(&join(prefix, "map"), f);
    }
}

/// Exchanges the specific streams: LPET keeps its invariant tokens but takes
/// SPET's specific ones, and vice versa.
pub fn token_swap<T: Clone>(l: &Decoupled<T>, s: &Decoupled<T>) -> (Decoupled<T>, Decoupled<T>) {
    (
        Decoupled {
            specific: s.specific.clone(),
            invariant: l.invariant.clone(),
            dose: l.dose,
        },
        Decoupled {
            specific: l.specific.clone(),
            invariant: s.invariant.clone(),
            dose: s.dose,
        },
    )
}

/// Shape-checked swap of concrete token streams.
pub fn swap_tokens(
    l: &DecoupledTokens,
    s: &DecoupledTokens,
) -> Result<(DecoupledTokens, DecoupledTokens)> {
    let shape = |t: &TokenSequence| (t.n_tokens, t.dim);
    let reference = shape(&l.specific);
    if [&l.invariant, &s.specific, &s.invariant]
        .iter()
        .any(|t| shape(t) != reference)
    {
        return Err(Error::shape("token swap needs four equally shaped streams"));
    }
    Ok(token_swap(l, s))
}

/// `s̃_ds`: the affine map applied to every LPET-specific token.
pub fn transfer(l_ds: &TokenSequence, params: &TransferParams) -> Result<TokenSequence> {
    if l_ds.dim != params.dim() {
        return Err(Error::shape(format!(
            "width-{} tokens fed to a width-{} transfer map",
            l_ds.dim,
            params.dim()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(l_ds.to_tensor());
    let y = params.forward(&mut tape, x)?;
    TokenSequence::from_tensor(tape.value(y))
}

/// Token-mean JS between the (constant) SPET-specific target and the
/// transferred prediction.
pub fn transfer_loss(s_ds: &TokenSequence, s_ds_pred: &TokenSequence) -> Result<f64> {
    token_js_mean(s_ds, s_ds_pred)
}

/// Graph form: the target is detached so no gradient reaches the SPET side.
pub fn transfer_loss_graph(tape: &mut Tape<'_>, s_ds: Var, s_ds_pred: Var) -> Result<Var> {
    let target = tape.detach(s_ds);
    tape.token_js(target, s_ds_pred)
}
