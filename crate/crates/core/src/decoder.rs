//! Convolutional dose decoders: fused token grid → full-resolution slice.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{join, ParamKind, Parameters};
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;
use crate::volume::ImageSlice;

pub const BN_MOMENTUM: f64 = 0.1;
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated by the caller.
    Train,
    /// Running statistics only.
    Eval,
}

/// `channels × side × side`, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.side + i) * self.side + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.side, self.side], self.data.clone())
            .expect("consistent dims")
    }
}

pub(crate) fn grid_side(n_tokens: usize) -> Result<usize> {
    let side = (n_tokens as f64).sqrt().round() as usize;
    if side == 0 || side * side != n_tokens {
        return Err(Error::shape(format!(
            "{n_tokens} tokens do not form a square grid"
        )));
    }
    Ok(side)
}

/// Concatenates the two streams along the embedding axis and lays token
/// `i·side + j` at spatial position `(i, j)`.
pub fn fuse_tokens(specific: &TokenSequence, invariant: &TokenSequence) -> Result<FeatureMap> {
    if specific.n_tokens != invariant.n_tokens || specific.dim != invariant.dim {
        return Err(Error::shape(format!(
            "fusing {}x{} with {}x{} tokens",
            specific.n_tokens, specific.dim, invariant.n_tokens, invariant.dim
        )));
    }
    let side = grid_side(specific.n_tokens)?;
    let mut tape = Tape::new();
    let a = tape.constant(specific.to_tensor());
    let b = tape.constant(invariant.to_tensor());
    let m = fuse_graph(&mut tape, a, b, 1, side)?;
    Ok(FeatureMap {
        channels: 2 * specific.dim,
        side,
        data: tape.value(m).data().to_vec(),
    })
}

/// Batched graph fusion of `[batch·side², d]` streams → `[batch, 2d, side, side]`.
pub fn fuse_graph(
    tape: &mut Tape<'_>,
    specific: Var,
    invariant: Var,
    batch: usize,
    side: usize,
) -> Result<Var> {
    let cat = tape.concat_cols(specific, invariant)?;
    tape.tokens_to_map(cat, batch, side)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    /// `[out, in, 3, 3]`; no bias, batch normalization follows.
    pub weight: Tensor,
    pub bn_gain: Tensor,
    pub bn_offset: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl ConvBlock {
    fn init(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Self {
        Self {
            weight: kaiming(rng, &[outputs, inputs, KERNEL, KERNEL], 2.0),
            bn_gain: Tensor::full(&[outputs], 1.0),
            bn_offset: Tensor::zeros(&[outputs]),
            running_mean: Tensor::zeros(&[outputs]),
            running_var: Tensor::full(&[outputs], 1.0),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Momentum update with the unbiased batch variance.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let n = stats.count as f64;
        let correction = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, &m) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        for (r, &v) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }
}

/// He-normal weights, `std = sqrt(gain / fan_in)`.
fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], gain: f64) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("consistent dims")
}

/// Four conv-BN-ReLU blocks with ×2 nearest upsampling between them, then a
/// 1×1 convolution and a sigmoid. Channels `2d → d → d/2 → d/4 → d/4 → 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub blocks: [ConvBlock; 4],
    pub head_weight: Tensor,
    pub head_bias: Tensor,
    pub mode: Mode,
}

impl DecoderParams {
    pub fn init(seed: u64, dim: usize) -> Result<Self> {
        if dim < 4 || !dim.is_multiple_of(4) {
            return Err(Error::config(format!(
                "decoder width {dim} must be a positive multiple of 4"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = [2 * dim, dim, dim / 2, dim / 4, dim / 4];
        let blocks = std::array::from_fn(|i| ConvBlock::init(&mut rng, plan[i], plan[i + 1]));
        Ok(Self {
            blocks,
            head_weight: kaiming(&mut rng, &[1, dim / 4, 1, 1], 1.0),
            head_bias: Tensor::zeros(&[1]),
            mode: Mode::Train,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.blocks[0].inputs()
    }

    /// Output `[batch, 1, 8·side, 8·side]` plus per-block batch statistics
    /// (empty in eval mode).
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, fmap: Var) -> Result<(Var, Vec<BatchStats>)> {
        let shape = tape.value(fmap).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.input_channels() {
            return Err(Error::shape(format!(
                "decoder expects {} input channels, got shape {shape:?}",
                self.input_channels()
            )));
        }
        let mut x = fmap;
        let mut stats = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                x = tape.upsample2x(x)?;
            }
            let w = tape.param(&block.weight);
            let zero = tape.constant(Tensor::zeros(&[block.outputs()]));
            x = tape.conv2d(x, w, zero)?;
            let g = tape.param(&block.bn_gain);
            let o = tape.param(&block.bn_offset);
            x = match self.mode {
                Mode::Train => {
                    let (y, s) = tape.batch_norm_train(x, g, o)?;
                    stats.push(s);
                    y
                }
                Mode::Eval => tape.batch_norm_eval(
                    x,
                    g,
                    o,
                    block.running_mean.data(),
                    block.running_var.data(),
                )?,
            };
            if !tape.value(x).all_finite() {
                return Err(Error::numeric(
                    format!("decoder block {i}"),
                    "non-finite activation",
                ));
            }
            x = tape.relu(x);
        }
        let w = tape.param(&self.head_weight);
        let b = tape.param(&self.head_bias);
        let x = tape.conv2d(x, w, b)?;
        Ok((tape.sigmoid(x), stats))
    }

    pub fn update_running(&mut self, stats: &[BatchStats]) -> Result<()> {
        if stats.len() != self.blocks.len() {
            return Err(Error::shape(format!(
                "{} batch statistics for 4 blocks",
                stats.len()
            )));
        }
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            b.update_running(s);
        }
        Ok(())
    }
}

/// Decodes one feature map in the decoder's current mode. Running statistics
/// are left untouched.
pub fn decode(fmap: &FeatureMap, params: &DecoderParams) -> Result<ImageSlice> {
    let mut tape = Tape::new();
    let x = tape.constant(fmap.to_tensor());
    let (y, _) = params.forward(&mut tape, x)?;
    let side = tape.value(y).shape()[2];
    ImageSlice::new(
        side,
        side,
        tape.value(y).data().iter().map(|&v| v as f32).collect(),
    )
}

impl Parameters for ConvBlock {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(
            join(prefix, "conv.weight"),
            &self.weight,
            ParamKind::Learnable,
        );
        f(join(prefix, "bn.gain"), &self.bn_gain, ParamKind::Learnable);
        f(
            join(prefix, "bn.offset"),
            &self.bn_offset,
            ParamKind::Learnable,
        );
        f(
            join(prefix, "bn.running_mean"),
            &self.running_mean,
            ParamKind::Buffer,
        );
        f(
            join(prefix, "bn.running_var"),
            &self.running_var,
            ParamKind::Buffer,
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(
            join(prefix, "conv.weight"),
            &mut self.weight,
            ParamKind::Learnable,
        );
        f(
            join(prefix, "bn.gain"),
            &mut self.bn_gain,
            ParamKind::Learnable,
        );
        f(
            join(prefix, "bn.offset"),
            &mut self.bn_offset,
            ParamKind::Learnable,
        );
        f(
            join(prefix, "bn.running_mean"),
            &mut self.running_mean,
            ParamKind::Buffer,
        );
        f(
            join(prefix, "bn.running_var"),
            &mut self.running_var,
            ParamKind::Buffer,
        );
    }
}

impl Parameters for DecoderParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        f(
            join(prefix, "head.weight"),
            &self.head_weight,
            ParamKind::Learnable,
        );
        f(
            join(prefix, "head.bias"),
            &self.head_bias,
            ParamKind::Learnable,
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        f(
            join(prefix, "head.weight"),
            &mut self.head_weight,
            ParamKind::Learnable,
        );
        f(
            join(prefix, "head.bias"),
            &mut self.head_bias,
            ParamKind::Learnable,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
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

    #[test]
    fn fuse_shapes_and_indexing() {
        let (a, b) = (random_tokens(64, 64, 1), random_tokens(64, 64, 2));
        let m = fuse_tokens(&a, &b).unwrap();
        assert_eq!((m.channels, m.side), (128, 8));
        for (i, j, c) in [(0, 0, 0), (3, 5, 17), (7, 7, 63)] {
            assert_eq!(m.get(c, i, j), a.get(i * 8 + j, c));
            assert_eq!(m.get(64 + c, i, j), b.get(i * 8 + j, c));
        }
        let swapped = fuse_tokens(&b, &a).unwrap();
        let half = 64 * 64;
        assert_eq!(swapped.data[..half], m.data[half..]);
        assert_eq!(swapped.data[half..], m.data[..half]);
    }

    #[test]
    fn fuse_rejects_non_square() {
        assert!(fuse_tokens(&random_tokens(6, 4, 1), &random_tokens(6, 4, 2)).is_err());
    }

    #[test]
    fn desk_output_shape() {
        let mut p = DecoderParams::init(1, 64).unwrap();
        p.mode = Mode::Eval;
        let m = fuse_tokens(&random_tokens(64, 64, 1), &random_tokens(64, 64, 2)).unwrap();
        let y = decode(&m, &p).unwrap();
        assert_eq!((y.height, y.width), (64, 64));
        assert!(y.data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(decode(&m, &p).unwrap(), y);
    }

    #[test]
    fn zero_weights_give_half() {
        let mut p = DecoderParams::init(1, 8).unwrap();
        p.visit_mut("", &mut |name, t, kind| {
            if kind == ParamKind::Learnable && !name.ends_with("bn.gain") {
                t.data_mut().fill(0.0);
            }
        });
        let m = fuse_tokens(&random_tokens(4, 8, 1), &random_tokens(4, 8, 2)).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            p.mode = mode;
            let y = decode(&m, &p).unwrap();
            assert_eq!((y.height, y.width), (16, 16));
            assert!(y.data.iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn identical_batch_members_agree_in_both_modes() {
        let mut p = DecoderParams::init(2, 8).unwrap();
        let m = fuse_tokens(&random_tokens(4, 8, 1), &random_tokens(4, 8, 2)).unwrap();
        let mut batch = m.data.clone();
        batch.extend_from_slice(&m.data);
        for mode in [Mode::Train, Mode::Eval] {
            p.mode = mode;
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(&[2, 16, 2, 2], batch.clone()).unwrap());
            let (y, _) = p.forward(&mut tape, x).unwrap();
            let out = tape.value(y).data();
            assert_eq!(out[..256], out[256..]);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut p = DecoderParams::init(3, 8).unwrap();
        let m = fuse_tokens(&random_tokens(4, 8, 1), &random_tokens(4, 8, 2)).unwrap();
        let stats = {
            let mut tape = Tape::new();
            let x = tape.constant(m.to_tensor());
            p.forward(&mut tape, x).unwrap().1
        };
        assert_eq!(stats.len(), 4);
        p.update_running(&stats).unwrap();
        let s = &stats[0];
        let n = s.count as f64;
        assert!((p.blocks[0].running_mean.data()[0] - 0.1 * s.mean[0]).abs() < 1e-15);
        let expect = 0.9 + 0.1 * s.var[0] * n / (n - 1.0);
        assert!((p.blocks[0].running_var.data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn non_finite_reports_block() {
        let mut p = DecoderParams::init(3, 8).unwrap();
        p.mode = Mode::Eval;
        p.blocks[2].bn_offset.data_mut()[0] = f64::NAN;
        let m = fuse_tokens(&random_tokens(4, 8, 1), &random_tokens(4, 8, 2)).unwrap();
        let err = decode(&m, &p).unwrap_err();
        assert!(err.to_string().contains("decoder block 2"), "{err}");
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let p = DecoderParams::init(3, 8).unwrap();
        let m = fuse_tokens(&random_tokens(4, 4, 1), &random_tokens(4, 4, 2)).unwrap();
        assert!(decode(&m, &p).is_err());
    }
}
