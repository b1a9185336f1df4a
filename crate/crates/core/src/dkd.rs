//! Dose knowledge decoupling: per-dose specific projectors, one invariant
//! projector shared by both doses, and the JS alignment of invariant tokens.

use std::f64::consts::LN_2;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{js_pair, Tape, Var};
use crate::encoder::INIT_STD;
use crate::error::{Error, Result};
use crate::model::Dose;
use crate::params::{join, Linear, ParamKind, Parameters};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

const NORMALIZATION_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct DkdParams {
    pub specific_l: Linear,
    pub specific_s: Linear,
    invariant: Linear,
}

impl DkdParams {
    pub fn init(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            specific_l: Linear::init(&mut rng, dim, dim, INIT_STD),
            specific_s: Linear::init(&mut rng, dim, dim, INIT_STD),
            invariant: Linear::init(&mut rng, dim, dim, INIT_STD),
        }
    }

    pub fn from_parts(specific_l: Linear, specific_s: Linear, invariant: Linear) -> Result<Self> {
        let d = invariant.inputs();
        for l in [&specific_l, &specific_s, &invariant] {
            if l.inputs() != d || l.outputs() != d {
                return Err(Error::shape(format!(
                    "projector {}x{} in a width-{d} decoupler",
                    l.outputs(),
                    l.inputs()
                )));
            }
        }
        Ok(Self {
            specific_l,
            specific_s,
            invariant,
        })
    }

    pub fn dim(&self) -> usize {
        self.invariant.inputs()
    }

    pub fn specific(&self, dose: Dose) -> &Linear {
        match dose {
            Dose::Low => &self.specific_l,
            Dose::Standard => &self.specific_s,
        }
    }

    pub fn specific_mut(&mut self, dose: Dose) -> &mut Linear {
        match dose {
            Dose::Low => &mut self.specific_l,
            Dose::Standard => &mut self.specific_s,
        }
    }

    /// Both doses resolve to the same storage.
    pub fn invariant(&self, _dose: Dose) -> &Linear {
        &self.invariant
    }

    pub fn invariant_mut(&mut self, _dose: Dose) -> &mut Linear {
        &mut self.invariant
    }
}

impl Parameters for DkdParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.specific_l.visit(&join(prefix, "specific_l"), f);
        self.specific_s.visit(&join(prefix, "specific_s"), f);
        self.invariant.visit(&join(prefix, "invariant"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.specific_l.visit_mut(&join(prefix, "specific_l"), f);
        self.specific_s.visit_mut(&join(prefix, "specific_s"), f);
        self.invariant.visit_mut(&join(prefix, "invariant"), f);
    }
}

/// Dose-specific and dose-invariant streams of one dose branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoupled<T> {
    pub specific: T,
    pub invariant: T,
    pub dose: Dose,
}

pub type DecoupledTokens = Decoupled<TokenSequence>;

pub fn decouple_graph<'p>(
    tape: &mut Tape<'p>,
    e: Var,
    dose: Dose,
    params: &'p DkdParams,
) -> Result<Decoupled<Var>> {
    let specific = params.specific(dose).forward(tape, e)?;
    let invariant = params.invariant(dose).forward(tape, e)?;
    Ok(Decoupled {
        specific,
        invariant,
        dose,
    })
}

pub fn decouple(e: &TokenSequence, dose: Dose, params: &DkdParams) -> Result<DecoupledTokens> {
    if e.dim != params.dim() {
        return Err(Error::shape(format!(
            "width-{} tokens fed to a width-{} decoupler",
            e.dim,
            params.dim()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(e.to_tensor());
    let out = decouple_graph(&mut tape, x, dose, params)?;
    let out = Decoupled {
        specific: TokenSequence::from_tensor(tape.value(out.specific))?,
        invariant: TokenSequence::from_tensor(tape.value(out.invariant))?,
        dose,
    };
    if !out.specific.all_finite() || !out.invariant.all_finite() {
        return Err(Error::numeric("dkd", "non-finite projection"));
    }
    Ok(out)
}

/// Channel-wise softmax of every token.
pub fn token_softmax(t: &TokenSequence) -> TokenSequence {
    let mut out = t.clone();
    for row in out.values.chunks_mut(t.dim.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&v| !v.is_finite() || v < 0.0) {
        return Err(Error::Invalid(format!(
            "{name} has a negative or non-finite entry"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Invalid(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// Jensen-Shannon divergence (natural log), probabilities floored at `JS_EPS`
/// inside the logarithms.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(js_pair(p, q).clamp(0.0, LN_2))
}

/// Mean over tokens of the JS divergence between row-wise softmaxes.
pub fn token_js_mean(a: &TokenSequence, b: &TokenSequence) -> Result<f64> {
    if a.n_tokens != b.n_tokens || a.dim != b.dim {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{} tokens",
            a.n_tokens, a.dim, b.n_tokens, b.dim
        )));
    }
    if a.n_tokens == 0 {
        return Err(Error::shape("empty token sequences"));
    }
    let (pa, pb) = (token_softmax(a), token_softmax(b));
    let mut total = 0.0;
    for k in 0..a.n_tokens {
        total += js_divergence(pa.token(k), pb.token(k))?;
    }
    Ok(total / a.n_tokens as f64)
}

pub fn alignment_loss(l_di: &TokenSequence, s_di: &TokenSequence) -> Result<f64> {
    token_js_mean(l_di, s_di)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_tokens(n: usize, d: usize, seed: u64, scale: f64) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenSequence::new(
            n,
            d,
            (0..n * d)
                .map(|_| scale * rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    fn random_linear(d: usize, seed: u64) -> Linear {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = Linear::init(&mut rng, d, d, 0.5);
        l.bias
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-1.0..1.0));
        l
    }

    #[test]
    fn zero_projectors_give_zero_streams() {
        let p = DkdParams::from_parts(
            Linear::zeros(4, 4),
            Linear::zeros(4, 4),
            Linear::zeros(4, 4),
        )
        .unwrap();
        let out = decouple(&random_tokens(3, 4, 1, 1.0), Dose::Low, &p).unwrap();
        assert!(out
            .specific
            .values
            .iter()
            .chain(&out.invariant.values)
            .all(|&v| v == 0.0));
    }

    #[test]
    fn identity_invariant_projector_passes_tokens() {
        let p = DkdParams::from_parts(
            Linear::zeros(4, 4),
            Linear::zeros(4, 4),
            Linear::identity(4),
        )
        .unwrap();
        let e = random_tokens(5, 4, 2, 1.0);
        assert_eq!(decouple(&e, Dose::Standard, &p).unwrap().invariant, e);
    }

    #[test]
    fn projections_match_matvec_oracle() {
        let d = 6;
        let p = DkdParams::from_parts(
            random_linear(d, 1),
            random_linear(d, 2),
            random_linear(d, 3),
        )
        .unwrap();
        let e = random_tokens(4, d, 4, 1.0);
        for dose in [Dose::Low, Dose::Standard] {
            let out = decouple(&e, dose, &p).unwrap();
            for (lin, got) in [
                (p.specific(dose), &out.specific),
                (p.invariant(dose), &out.invariant),
            ] {
                for k in 0..4 {
                    for o in 0..d {
                        let mut acc = lin.bias.data()[o];
                        for i in 0..d {
                            acc += lin.weight.data()[o * d + i] * e.get(k, i);
                        }
                        assert!((got.get(k, o) - acc).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn invariant_projector_is_shared_storage() {
        let mut p = DkdParams::init(1, 4);
        assert!(std::ptr::eq(
            p.invariant(Dose::Low),
            p.invariant(Dose::Standard)
        ));
        p.invariant_mut(Dose::Low).bias.data_mut()[2] = 3.5;
        assert_eq!(p.invariant(Dose::Standard).bias.data()[2], 3.5);
    }

    #[test]
    fn softmax_cases() {
        let t = TokenSequence::new(1, 4, vec![2.0; 4]).unwrap();
        assert!(token_softmax(&t)
            .values
            .iter()
            .all(|&v| (v - 0.25).abs() < 1e-15));

        let a = random_tokens(3, 5, 7, 3.0);
        let mut shifted = a.clone();
        shifted.values.iter_mut().for_each(|v| *v += 40.0);
        let (pa, ps) = (token_softmax(&a), token_softmax(&shifted));
        for (x, y) in pa.values.iter().zip(&ps.values) {
            assert!((x - y).abs() < 1e-7);
        }
        for k in 0..3 {
            let row = a.token(k);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            for (c, v) in row.iter().enumerate() {
                assert!((pa.get(k, c) - v.exp() / z).abs() < 1e-7);
            }
            assert!((pa.token(k).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let t = TokenSequence::new(1, 3, vec![1e300, 0.0, -1e300]).unwrap();
        let p = token_softmax(&t);
        assert!(p.all_finite());
        assert_eq!(p.values[0], 1.0);
    }

    #[test]
    fn js_closed_forms() {
        let p = [0.2, 0.3, 0.5];
        assert!(js_divergence(&p, &p).unwrap() < 1e-12);
        assert!((js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - LN_2).abs() < 1e-6);
        assert!(js_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn alignment_cases() {
        let l = random_tokens(6, 8, 1, 2.0);
        let s = random_tokens(6, 8, 2, 2.0);
        assert!(alignment_loss(&l, &l).unwrap() < 1e-10);
        let ab = alignment_loss(&l, &s).unwrap();
        assert!((ab - alignment_loss(&s, &l).unwrap()).abs() < 1e-12);

        let (pl, ps) = (token_softmax(&l), token_softmax(&s));
        let mut oracle = 0.0;
        for k in 0..6 {
            let mut js = 0.0;
            for c in 0..8 {
                let (a, b) = (pl.get(k, c), ps.get(k, c));
                let m = 0.5 * (a + b);
                js += 0.5 * a * (a / m).ln() + 0.5 * b * (b / m).ln();
            }
            oracle += js;
        }
        assert!((ab - oracle / 6.0).abs() < 1e-9);
        assert!(alignment_loss(&l, &random_tokens(5, 8, 3, 1.0)).is_err());
    }

    fn distribution(raw: &[f64]) -> Vec<f64> {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    proptest! {
        #[test]
        fn js_symmetric_and_bounded(
            a in prop::collection::vec(0.0f64..1.0, 16),
            b in prop::collection::vec(0.0f64..1.0, 16),
        ) {
            prop_assume!(a.iter().sum::<f64>() > 1e-3 && b.iter().sum::<f64>() > 1e-3);
            let (p, q) = (distribution(&a), distribution(&b));
            let pq = js_divergence(&p, &q).unwrap();
            prop_assert!((pq - js_divergence(&q, &p).unwrap()).abs() < 1e-9);
            prop_assert!((0.0..=LN_2).contains(&pq));
        }

        #[test]
        fn zero_alignment_iff_equal_softmax(shift in -5.0f64..5.0, seed in 0u64..1000) {
            let l = random_tokens(4, 6, seed, 2.0);
            let mut s = l.clone();
            s.values.iter_mut().for_each(|v| *v += shift);
            prop_assert!(alignment_loss(&l, &s).unwrap() < 1e-8);
        }
    }
}
