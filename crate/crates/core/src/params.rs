//! Learnable parameter containers and the named-visitor used by the
//! optimizer and checkpoints.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    /// Non-learned state that still belongs in a checkpoint (running stats).
    Buffer,
}

/// Visits every tensor of a module under a dotted name, in a fixed order.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// All tensors with their names, in visit order.
pub fn named_tensors<'a, P: Parameters + ?Sized>(
    m: &'a P,
    prefix: &str,
) -> Vec<(String, &'a Tensor, ParamKind)> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |n, t, k| out.push((n, t, k)));
    out
}

pub fn learnable_count<P: Parameters + ?Sized>(m: &P) -> usize {
    named_tensors(m, "")
        .iter()
        .filter(|(_, _, k)| *k == ParamKind::Learnable)
        .map(|(_, t, _)| t.len())
        .sum()
}

/// Per-row affine map, weight stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, inputs: usize, outputs: usize, std: f64) -> Self {
        Self {
            weight: Tensor::trunc_normal(&[outputs, inputs], std, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        Self {
            weight: w,
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.linear(x, w, b)
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(join(prefix, "weight"), &self.weight, ParamKind::Learnable);
        f(join(prefix, "bias"), &self.bias, ParamKind::Learnable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(
            join(prefix, "weight"),
            &mut self.weight,
            ParamKind::Learnable,
        );
        f(join(prefix, "bias"), &mut self.bias, ParamKind::Learnable);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub offset: Tensor,
}

impl LayerNormParams {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: Tensor::full(&[dim], 1.0),
            offset: Tensor::zeros(&[dim]),
        }
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let o = tape.param(&self.offset);
        tape.layer_norm(x, g, o)
    }
}

impl Parameters for LayerNormParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor, ParamKind)) {
        f(join(prefix, "gain"), &self.gain, ParamKind::Learnable);
        f(join(prefix, "offset"), &self.offset, ParamKind::Learnable);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor, ParamKind)) {
        f(join(prefix, "gain"), &mut self.gain, ParamKind::Learnable);
        f(
            join(prefix, "offset"),
            &mut self.offset,
            ParamKind::Learnable,
        );
    }
}
