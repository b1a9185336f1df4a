//! Pre-norm transformer encoder shared by the low- and standard-dose branches
//! (each branch owns its own parameters).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{join, LayerNormParams, Linear, ParamKind, Parameters};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

pub const INIT_STD: f64 = 0.02;
const FFN_EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub norm1: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub blocks: Vec<EncoderBlock>,
    pub heads: usize,
    pub dim: usize,
}

pub fn init_encoder(seed: u64, dim: usize, depth: usize, heads: usize) -> Result<EncoderParams> {
    if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "embedding width {dim} is not divisible by {heads} heads"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = (0..depth)
        .map(|_| EncoderBlock {
            norm1: LayerNormParams::new(dim),
            query: Linear::init(&mut rng, dim, dim, INIT_STD),
            key: Linear::init(&mut rng, dim, dim, INIT_STD),
            value: Linear::init(&mut rng, dim, dim, INIT_STD),
            out: Linear::init(&mut rng, dim, dim, INIT_STD),
            norm2: LayerNormParams::new(dim),
            fc1: Linear::init(&mut rng, dim, FFN_EXPANSION * dim, INIT_STD),
            fc2: Linear::init(&mut rng, FFN_EXPANSION * dim, dim, INIT_STD),
        })
        .collect();
    Ok(EncoderParams { blocks, heads, dim })
}

impl EncoderBlock {
    fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        x: Var,
        batch: usize,
        heads: usize,
    ) -> Result<Var> {
        let h = self.norm1.forward(tape, x)?;
        let q = self.query.forward(tape, h)?;
        let k = self.key.forward(tape, h)?;
        let v = self.value.forward(tape, h)?;
        let a = tape.attention(q, k, v, batch, heads)?;
        let a = self.out.forward(tape, a)?;
        let x = tape.add(x, a)?;
        let h = self.norm2.forward(tape, x)?;
        let h = self.fc1.forward(tape, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, h)?;
        tape.add(x, h)
    }
}

impl EncoderParams {
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Runs every block over `batch` sequences stacked row-wise in `x`.
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var, batch: usize) -> Result<Var> {
        let (_, d) = tape.value(x).dims2();
        if d != self.dim {
            return Err(Error::shape(format!(
                "encoder width {} fed {d}-wide tokens",
                self.dim
            )));
        }
        let mut x = x;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, x, batch, self.heads)?;
            if !tape.value(x).all_finite() {
                return Err(Error::numeric(
                    format!("encoder block {i}"),
                    "non-finite activation",
                ));
            }
        }
        Ok(x)
    }
}

pub fn encode(tokens: &TokenSequence, params: &EncoderParams) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let x = tape.constant(tokens.to_tensor());
    let y = params.forward(&mut tape, x, 1)?;
    TokenSequence::from_tensor(tape.value(y))
}

impl Parameters for EncoderBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.query.visit(&join(prefix, "attn.query"), f);
        self.key.visit(&join(prefix, "attn.key"), f);
        self.value.visit(&join(prefix, "attn.value"), f);
        self.out.visit(&join(prefix, "attn.out"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit(&join(prefix, "mlp.fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.query.visit_mut(&join(prefix, "attn.query"), f);
        self.key.visit_mut(&join(prefix, "attn.key"), f);
        self.value.visit_mut(&join(prefix, "attn.value"), f);
        self.out.visit_mut(&join(prefix, "attn.out"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "mlp.fc1"), f);
        self.fc2.visit_mut(&join(prefix, "mlp.fc2"), f);
    }
}

impl Parameters for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::named_tensors;
    use rand::Rng;

    fn random_tokens(n: usize, d: usize, seed: u64) -> TokenSequence {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        TokenSequence::new(
            n,
            d,
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Random non-trivial parameters (init leaves biases at zero).
    fn randomized(mut p: EncoderParams, seed: u64) -> EncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.visit_mut("", &mut |_, t, _| {
            t.data_mut()
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-0.3..0.3));
        });
        p
    }

    #[test]
    fn empty_stack_is_identity() {
        let p = init_encoder(1, 8, 0, 2).unwrap();
        let x = random_tokens(5, 8, 2);
        assert_eq!(encode(&x, &p).unwrap(), x);
    }

    #[test]
    fn shape_is_preserved() {
        let p = init_encoder(1, 16, 2, 4).unwrap();
        let y = encode(&random_tokens(7, 16, 3), &p).unwrap();
        assert_eq!((y.n_tokens, y.dim), (7, 16));
    }

    #[test]
    fn permutation_equivariant() {
        let p = randomized(init_encoder(4, 8, 1, 2).unwrap(), 5);
        let x = random_tokens(6, 8, 6);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut xp = TokenSequence::zeros(6, 8);
        for (dst, &src) in perm.iter().enumerate() {
            xp.values[dst * 8..(dst + 1) * 8].copy_from_slice(x.token(src));
        }
        let y = encode(&x, &p).unwrap();
        let yp = encode(&xp, &p).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp.get(dst, c) - y.get(src, c)).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_encoder(9, 64, 2, 4).unwrap();
        assert_eq!(a, init_encoder(9, 64, 2, 4).unwrap());
        for (name, t, _) in named_tensors(&a, "") {
            if name.ends_with(".bias") || name.ends_with(".offset") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gain") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn init_weight_std_in_band() {
        let p = init_encoder(3, 64, 4, 4).unwrap();
        let w: Vec<f64> = named_tensors(&p, "")
            .into_iter()
            .filter(|(n, _, _)| n.ends_with(".weight"))
            .flat_map(|(_, t, _)| t.data().to_vec())
            .collect();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((0.015..=0.025).contains(&std), "std {std}");
    }

    #[test]
    fn indivisible_heads_rejected() {
        assert!(matches!(init_encoder(0, 10, 1, 4), Err(Error::Config(_))));
    }

    #[test]
    fn non_finite_reports_block() {
        let mut p = init_encoder(1, 8, 2, 2).unwrap();
        p.blocks[1].fc2.bias.data_mut()[0] = f64::INFINITY;
        let err = encode(&random_tokens(3, 8, 1), &p).unwrap_err();
        assert!(err.to_string().contains("encoder block 1"), "{err}");
    }
}
