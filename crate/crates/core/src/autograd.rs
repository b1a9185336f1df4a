//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and appends a node; [`Tape::backward`]
//! walks the nodes in reverse. Parameters are bound by address, so binding the
//! same tensor twice yields the same [`Var`] and gradients from every use are
//! summed into one leaf.

use std::collections::HashMap;
use std::marker::PhantomData;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor, View};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;
/// Probability floor applied before logarithms in JS terms.
pub const JS_EPS: f64 = 1e-8;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterRows {
        src: Var,
        fill: Var,
        rows: Vec<usize>,
    },
    ConcatCols(Var, Var),
    TokensToMap {
        x: Var,
        batch: usize,
        grid: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gain: Var,
        offset: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Upsample2x(Var),
    Reshape(Var),
    MeanAbsDiff(Var, Var),
    TokenJs {
        a: Var,
        b: Var,
        pa: Vec<f64>,
        pb: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-channel statistics of one training-mode batch normalization call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance over batch and spatial positions.
    pub var: Vec<f64>,
    pub count: usize,
}

pub struct Tape<'p> {
    nodes: Vec<Node>,
    bound: HashMap<*const Tensor, Var>,
    _params: PhantomData<&'p Tensor>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

/// JS divergence between two probability rows, natural log, with the
/// `JS_EPS` floor inside the logarithms.
pub(crate) fn js_pair(p: &[f64], q: &[f64]) -> f64 {
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let ln_m = (0.5 * (pi + qi)).max(JS_EPS).ln();
        total += 0.5 * pi * (pi.max(JS_EPS).ln() - ln_m);
        total += 0.5 * qi * (qi.max(JS_EPS).ln() - ln_m);
    }
    total
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &[f64], ci: usize, h: usize, w: usize, k: usize, col: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        dst[y * w..(y + 1) * w].fill(0.0);
                        continue;
                    }
                    let src = &x[c * hw + sy as usize * w..c * hw + (sy as usize + 1) * w];
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - pad as isize;
                        dst[y * w + xo] = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], ci: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = k / 2;
    let hw = h * w;
    for c in 0..ci {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = c * hw + sy as usize * w;
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dx[base + sx as usize] += src[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            _params: PhantomData,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Binds a learnable tensor. The same tensor always maps to the same leaf.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        let key = t as *const Tensor;
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.push(t.clone(), Op::Leaf, true);
        self.bound.insert(key, v);
        v
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies the value of `v` into a gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn param_var(&self, t: &Tensor) -> Option<Var> {
        self.bound.get(&(t as *const Tensor)).copied()
    }

    /// `op(a) · op(b)` where `op` optionally transposes a row-major matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2();
        let (rb, cb) = self.value(b).dims2();
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        if k != kb {
            return Err(Error::shape(format!("matmul inner dims {k} vs {kb}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            View::rm(self.value(a).data(), ca, ta),
            View::rm(self.value(b).data(), cb, tb),
            0.0,
            &mut out,
            n,
            1,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, ng))
    }

    /// Affine map applied per row: `x · weightᵀ + bias`, weight stored `[out, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul_t(x, weight, false, true)?;
        self.add_bias(y, bias)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(bias).len() != n {
            return Err(Error::shape(format!(
                "bias of length {} for {n} columns",
                self.value(bias).len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for row in out.chunks_mut(n).take(m) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBias { x, bias }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "add")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "sub")?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Sub(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        if self.value(gain).len() != n || self.value(offset).len() != n {
            return Err(Error::shape("layer norm parameter width"));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let o = self.value(offset).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + o[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(offset);
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    /// Multi-head scaled dot-product attention over `batch` independent
    /// sequences stacked row-wise in `q`, `k`, `v` (each `[batch·n, d]`).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rows, d) = self.value(q).dims2();
        check_same(self.value(q), self.value(k), "attention k")?;
        check_same(self.value(q), self.value(v), "attention v")?;
        if batch == 0 || rows % batch != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!(
                "attention over {rows}x{d} with batch {batch}, heads {heads}"
            )));
        }
        let n = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * n * n];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; n * n];
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        for b in 0..batch {
            for h in 0..heads {
                let off = b * n * d + h * dh;
                gemm(
                    n,
                    dh,
                    n,
                    scale,
                    View::strided(qd, off, d, 1),
                    View::strided(kd, off, 1, d),
                    0.0,
                    &mut scores,
                    n,
                    1,
                );
                let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                for r in 0..n {
                    softmax_row(&scores[r * n..(r + 1) * n], &mut p[r * n..(r + 1) * n]);
                }
                gemm(
                    n,
                    n,
                    dh,
                    1.0,
                    View::rm(p, n, false),
                    View::strided(vd, off, d, 1),
                    0.0,
                    &mut out[off..],
                    d,
                    1,
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            Tensor::new(&[rows, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Row-wise softmax of the attention weights recorded by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::shape(format!("row {r} out of {m}")));
            }
            out.extend_from_slice(&src[r * n..(r + 1) * n]);
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[rows.len(), n], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Builds an `n_rows × d` matrix whose row `rows[i]` is `src[i]`; every
    /// other row is a copy of the `fill` vector.
    pub fn scatter_rows(
        &mut self,
        src: Var,
        fill: Var,
        rows: &[usize],
        n_rows: usize,
    ) -> Result<Var> {
        let (k, d) = self.value(src).dims2();
        if k != rows.len() || self.value(fill).len() != d {
            return Err(Error::shape("scatter_rows operand widths"));
        }
        let f = self.value(fill).data();
        let mut out = Vec::with_capacity(n_rows * d);
        for _ in 0..n_rows {
            out.extend_from_slice(f);
        }
        let s = self.value(src).data();
        let mut seen = vec![false; n_rows];
        for (i, &r) in rows.iter().enumerate() {
            if r >= n_rows || seen[r] {
                return Err(Error::shape(format!("scatter target row {r} invalid")));
            }
            seen[r] = true;
            out[r * d..(r + 1) * d].copy_from_slice(&s[i * d..(i + 1) * d]);
        }
        let ng = self.ng(src) || self.ng(fill);
        Ok(self.push(
            Tensor::new(&[n_rows, d], out)?,
            Op::ScatterRows {
                src,
                fill,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, na) = self.value(a).dims2();
        let (mb, nb) = self.value(b).dims2();
        if m != mb {
            return Err(Error::shape(format!("concat rows {m} vs {mb}")));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            out.extend_from_slice(&ad[r * na..(r + 1) * na]);
            out.extend_from_slice(&bd[r * nb..(r + 1) * nb]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[m, na + nb], out)?, Op::ConcatCols(a, b), ng))
    }

    /// `[batch·grid², c]` token rows → `[batch, c, grid, grid]` feature maps,
    /// token `i·grid + j` landing at spatial position `(i, j)`.
    pub fn tokens_to_map(&mut self, x: Var, batch: usize, grid: usize) -> Result<Var> {
        let (m, c) = self.value(x).dims2();
        let g2 = grid * grid;
        if m != batch * g2 {
            return Err(Error::shape(format!(
                "{m} tokens do not form {batch} grids of {grid}x{grid}"
            )));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; m * c];
        for b in 0..batch {
            for t in 0..g2 {
                let row = &src[(b * g2 + t) * c..(b * g2 + t + 1) * c];
                for (ch, &val) in row.iter().enumerate() {
                    out[(b * c + ch) * g2 + t] = val;
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[batch, c, grid, grid], out)?,
            Op::TokensToMap { x, batch, grid },
            ng,
        ))
    }

    /// Stride-1 same-padding convolution with an odd square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4
            || ws.len() != 4
            || ws[1] != xs[1]
            || ws[2] != ws[3]
            || ws[2].is_multiple_of(2)
        {
            return Err(Error::shape(format!("conv2d input {xs:?} kernel {ws:?}")));
        }
        let (bn, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        if self.value(b).len() != co {
            return Err(Error::shape("conv2d bias length"));
        }
        let hw = h * wd;
        let ckk = ci * k * k;
        let mut out = vec![0.0; bn * co * hw];
        let mut col = if k == 1 {
            Vec::new()
        } else {
            vec![0.0; ckk * hw]
        };
        let (xd, wdat, bd) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        for s in 0..bn {
            let xin = &xd[s * ci * hw..(s + 1) * ci * hw];
            let cols: &[f64] = if k == 1 {
                xin
            } else {
                im2col(xin, ci, h, wd, k, &mut col);
                &col
            };
            let o = &mut out[s * co * hw..(s + 1) * co * hw];
            for (c, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.fill(bd[c]);
            }
            gemm(
                co,
                ckk,
                hw,
                1.0,
                View::rm(wdat, ckk, false),
                View::rm(cols, hw, false),
                1.0,
                o,
                hw,
                1,
            );
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::new(&[bn, co, h, wd], out)?,
            Op::Conv2d { x, w, b },
            ng,
        ))
    }

    /// Training-mode batch normalization over `(batch, h, w)` per channel.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gain: Var,
        offset: Var,
    ) -> Result<(Var, BatchStats)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || self.value(gain).len() != xs[1] || self.value(offset).len() != xs[1] {
            return Err(Error::shape(format!("batch norm input {xs:?}")));
        }
        let (bn, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let count = bn * hw;
        let src = self.value(x).data();
        let (g, o) = (self.value(gain).data(), self.value(offset).data());
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..bn {
                s += src[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .sum::<f64>();
            }
            let mu = s / count as f64;
            let mut v = 0.0;
            for b in 0..bn {
                v += src[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|x| (x - mu) * (x - mu))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            var[ch] = v / count as f64;
        }
        let rstd: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
            .collect();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for b in 0..bn {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    let h = (src[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + o[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(offset);
        let v = self.push(
            Tensor::new(&xs, out)?,
            Op::BatchNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            },
            ng,
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch normalization using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        offset: Var,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4
            || self.value(gain).len() != xs[1]
            || running_mean.len() != xs[1]
            || running_var.len() != xs[1]
        {
            return Err(Error::shape(format!("batch norm input {xs:?}")));
        }
        let (bn, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let rstd: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt())
            .collect();
        let src = self.value(x).data();
        let (g, o) = (self.value(gain).data(), self.value(offset).data());
        let mut out = vec![0.0; src.len()];
        for b in 0..bn {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = (src[i] - running_mean[ch]) * rstd[ch] * g[ch] + o[ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(offset);
        Ok(self.push(
            Tensor::new(&xs, out)?,
            Op::BatchNormEval {
                x,
                gain,
                offset,
                mean: running_mean.to_vec(),
                rstd,
            },
            ng,
        ))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("upsample input {xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; planes * 4 * h * w];
        for p in 0..planes {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    out[(p * 2 * h + y) * 2 * w + xo] = src[(p * h + y / 2) * w + xo / 2];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::new(&[xs[0], xs[1], 2 * h, 2 * w], out)?,
            Op::Upsample2x(x),
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Mean absolute difference over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "mean_abs_diff")?;
        let n = self.value(a).len();
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::MeanAbsDiff(a, b), ng))
    }

    /// Mean over rows of JS(softmax(a_r), softmax(b_r)).
    pub fn token_js(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same(self.value(a), self.value(b), "token_js")?;
        let (m, d) = self.value(a).dims2();
        let mut pa = vec![0.0; m * d];
        let mut pb = vec![0.0; m * d];
        let mut total = 0.0;
        for r in 0..m {
            softmax_row(
                &self.value(a).data()[r * d..(r + 1) * d],
                &mut pa[r * d..(r + 1) * d],
            );
            softmax_row(
                &self.value(b).data()[r * d..(r + 1) * d],
                &mut pb[r * d..(r + 1) * d],
            );
            total += js_pair(&pa[r * d..(r + 1) * d], &pb[r * d..(r + 1) * d]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::scalar(total / m as f64),
            Op::TokenJs { a, b, pa, pb },
            ng,
        ))
    }

    /// Sign pattern of every non-differentiable point on the tape: ReLU
    /// inputs and absolute-difference arguments. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => out.extend(self.value(x).data().iter().map(|&v| v > 0.0)),
                Op::MeanAbsDiff(a, b) => out.extend(
                    self.value(a)
                        .data()
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(x, y)| x > y),
                ),
                _ => {}
            }
        }
        out
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ra, ca) = self.value(*a).dims2();
                let (_, cb) = self.value(*b).dims2();
                let (m, k) = if *ta { (ca, ra) } else { (ra, ca) };
                let n = node.value.shape()[1];
                let gv = View::rm(g, n, false);
                if let Some(da) = self.slot(grads, *a) {
                    let (rs, cs) = if *ta { (1, m) } else { (k, 1) };
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        gv,
                        View::rm(self.value(*b).data(), cb, !*tb),
                        1.0,
                        da,
                        rs,
                        cs,
                    );
                }
                if let Some(db) = self.slot(grads, *b) {
                    let (rs, cs) = if *tb { (1, k) } else { (n, 1) };
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        View::rm(self.value(*a).data(), ca, !*ta),
                        gv,
                        1.0,
                        db,
                        rs,
                        cs,
                    );
                }
            }
            Op::AddBias { x, bias } => {
                let n = self.value(*bias).len();
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, gg)| *d += gg);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, gg)| *d += gg);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(d, gg)| *d += gg);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, gg)| *d += gg);
                }
                if let Some(d) = self.slot(grads, *b) {
                    d.iter_mut().zip(g).for_each(|(d, gg)| *d -= gg);
                }
            }
            Op::Scale(a, c) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(d, gg)| *d += c * gg);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let gn = self.value(*gain).data();
                if let Some(dx) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let xh = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            dxhat[c] = gr[c] * gn[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xh[c];
                        }
                        let (s1, s2) = (s1 / n as f64, s2 / n as f64);
                        for c in 0..n {
                            dx[r * n + c] += rs * (dxhat[c] - s1 - xh[c] * s2);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (gr, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            dg[c] += gr[c] * xh[c];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *offset) {
                    for gr in g.chunks(n) {
                        db.iter_mut().zip(gr).for_each(|(d, gg)| *d += gg);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..d.len() {
                        if xv[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(d) = self.slot(grads, *x) {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *batch, *heads, probs, g, grads),
            Op::GatherRows { x, rows } => {
                let n = node.value.shape()[1];
                if let Some(dx) = self.slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..n {
                            dx[r * n + c] += g[i * n + c];
                        }
                    }
                }
            }
            Op::ScatterRows { src, fill, rows } => {
                let (n_rows, d) = node.value.dims2();
                if let Some(ds) = self.slot(grads, *src) {
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            ds[i * d + c] += g[r * d + c];
                        }
                    }
                }
                if let Some(df) = self.slot(grads, *fill) {
                    let mut filled = vec![false; n_rows];
                    for &r in rows {
                        filled[r] = true;
                    }
                    for (r, _) in filled.iter().enumerate().filter(|(_, f)| !**f) {
                        for c in 0..d {
                            df[c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let na = self.value(*a).shape()[1];
                let nb = self.value(*b).shape()[1];
                let w = na + nb;
                if let Some(da) = self.slot(grads, *a) {
                    for (r, row) in g.chunks(w).enumerate() {
                        for c in 0..na {
                            da[r * na + c] += row[c];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for (r, row) in g.chunks(w).enumerate() {
                        for c in 0..nb {
                            db[r * nb + c] += row[na + c];
                        }
                    }
                }
            }
            Op::TokensToMap { x, batch, grid } => {
                let c = self.value(*x).shape()[1];
                let g2 = grid * grid;
                if let Some(dx) = self.slot(grads, *x) {
                    for b in 0..*batch {
                        for t in 0..g2 {
                            for ch in 0..c {
                                dx[(b * g2 + t) * c + ch] += g[(b * c + ch) * g2 + t];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b } => self.conv_backward(node, *x, *w, *b, g, grads),
            Op::BatchNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            } => {
                let xs = node.value.shape();
                let (bn, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let count = (bn * hw) as f64;
                let gn = self.value(*gain).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..bn {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for b in 0..bn {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let k = gn[ch] * rstd[ch] / count;
                            for i in base..base + hw {
                                dx[i] += k * (count * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    dg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
                }
                if let Some(db) = self.slot(grads, *offset) {
                    db.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
                }
            }
            Op::BatchNormEval {
                x,
                gain,
                offset,
                mean,
                rstd,
            } => {
                let xs = node.value.shape();
                let (bn, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let gn = self.value(*gain).data();
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for b in 0..bn {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                dx[i] += g[i] * gn[ch] * rstd[ch];
                            }
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for b in 0..bn {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            for i in base..base + hw {
                                dg[ch] += g[i] * (xv[i] - mean[ch]) * rstd[ch];
                            }
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *offset) {
                    for b in 0..bn {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            db[ch] += g[base..base + hw].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                let xs = self.value(*x).shape();
                let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                if let Some(dx) = self.slot(grads, *x) {
                    for p in 0..planes {
                        for y in 0..2 * h {
                            for xo in 0..2 * w {
                                dx[(p * h + y / 2) * w + xo / 2] += g[(p * 2 * h + y) * 2 * w + xo];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(d, gg)| *d += gg);
                }
            }
            Op::MeanAbsDiff(a, b) => {
                let n = self.value(*a).len() as f64;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let sign: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let k = g[0] / n;
                if let Some(da) = self.slot(grads, *a) {
                    da.iter_mut().zip(&sign).for_each(|(d, s)| *d += k * s);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(&sign).for_each(|(d, s)| *d -= k * s);
                }
            }
            Op::TokenJs { a, b, pa, pb } => {
                let (m, d) = self.value(*a).dims2();
                let k = g[0] / m as f64;
                let mut gp = vec![0.0; d];
                for (v, own, other) in [(a, pa, pb), (b, pb, pa)] {
                    let Some(dv) = self.slot(grads, *v) else {
                        continue;
                    };
                    for r in 0..m {
                        let p = &own[r * d..(r + 1) * d];
                        let q = &other[r * d..(r + 1) * d];
                        let mut dot = 0.0;
                        for i in 0..d {
                            let mi = (0.5 * (p[i] + q[i])).max(JS_EPS);
                            gp[i] = k * 0.5 * (p[i].max(JS_EPS) / mi).ln();
                            dot += gp[i] * p[i];
                        }
                        for i in 0..d {
                            dv[r * d + i] += p[i] * (gp[i] - dot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, d) = self.value(q).dims2();
        let n = rows / batch;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let fresh = |var: Var| self.nodes[var.0].needs_grad.then(|| vec![0.0; rows * d]);
        let mut dq = fresh(q);
        let mut dk = fresh(k);
        let mut dv = fresh(v);
        let mut dp = vec![0.0; n * n];
        for b in 0..batch {
            for h in 0..heads {
                let off = b * n * d + h * dh;
                let p = &probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
                let go = View::strided(g, off, d, 1);
                if let Some(dv) = dv.as_mut() {
                    gemm(
                        n,
                        n,
                        dh,
                        1.0,
                        View::rm(p, n, true),
                        go,
                        1.0,
                        &mut dv[off..],
                        d,
                        1,
                    );
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                gemm(
                    n,
                    dh,
                    n,
                    1.0,
                    go,
                    View::strided(vd, off, 1, d),
                    0.0,
                    &mut dp,
                    n,
                    1,
                );
                for r in 0..n {
                    let pr = &p[r * n..(r + 1) * n];
                    let row = &mut dp[r * n..(r + 1) * n];
                    let dot: f64 = row.iter().zip(pr).map(|(a, b)| a * b).sum();
                    for (x, pp) in row.iter_mut().zip(pr) {
                        *x = pp * (*x - dot);
                    }
                }
                if let Some(dq) = dq.as_mut() {
                    gemm(
                        n,
                        n,
                        dh,
                        scale,
                        View::rm(&dp, n, false),
                        View::strided(kd, off, d, 1),
                        1.0,
                        &mut dq[off..],
                        d,
                        1,
                    );
                }
                if let Some(dk) = dk.as_mut() {
                    gemm(
                        n,
                        n,
                        dh,
                        scale,
                        View::rm(&dp, n, true),
                        View::strided(qd, off, d, 1),
                        1.0,
                        &mut dk[off..],
                        d,
                        1,
                    );
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let (Some(buf), Some(slot)) = (buf, self.slot(grads, var)) {
                slot.iter_mut().zip(&buf).for_each(|(s, b)| *s += b);
            }
        }
    }

    fn conv_backward(
        &self,
        node: &Node,
        x: Var,
        w: Var,
        b: Var,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let (bn, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        let hw = h * wd;
        let ckk = ci * k * k;
        debug_assert_eq!(node.value.len(), bn * co * hw);
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        if let Some(db) = self.slot(grads, b) {
            for s in 0..bn {
                for c in 0..co {
                    let base = (s * co + c) * hw;
                    db[c] += g[base..base + hw].iter().sum::<f64>();
                }
            }
        }
        let mut col = vec![0.0; if k == 1 { 0 } else { ckk * hw }];
        if self.nodes[w.0].needs_grad {
            let mut dw = vec![0.0; self.value(w).len()];
            for s in 0..bn {
                let xin = &xd[s * ci * hw..(s + 1) * ci * hw];
                let cols: &[f64] = if k == 1 {
                    xin
                } else {
                    im2col(xin, ci, h, wd, k, &mut col);
                    &col
                };
                gemm(
                    co,
                    hw,
                    ckk,
                    1.0,
                    View::rm(&g[s * co * hw..(s + 1) * co * hw], hw, false),
                    View::rm(cols, hw, true),
                    1.0,
                    &mut dw,
                    ckk,
                    1,
                );
            }
            if let Some(slot) = self.slot(grads, w) {
                slot.iter_mut().zip(&dw).for_each(|(s, b)| *s += b);
            }
        }
        if let Some(dx) = self.slot(grads, x) {
            let mut dcol = vec![0.0; ckk * hw];
            for s in 0..bn {
                gemm(
                    ckk,
                    co,
                    hw,
                    1.0,
                    View::rm(wdat, ckk, true),
                    View::rm(&g[s * co * hw..(s + 1) * co * hw], hw, false),
                    0.0,
                    &mut dcol,
                    hw,
                    1,
                );
                let dxs = &mut dx[s * ci * hw..(s + 1) * ci * hw];
                if k == 1 {
                    dxs.iter_mut().zip(&dcol).for_each(|(d, c)| *d += c);
                } else {
                    col2im_add(&dcol, ci, h, wd, k, dxs);
                }
            }
        }
    }
}
