use std::collections::BTreeMap;

use super::ops::{self, Conv1dDims, Conv2dDims, LayerNormCache};
use super::{ParameterSet, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Probability floor applied before the logs of the cross-entropy.
pub const BCE_CLAMP: f64 = 1e-12;

enum Op {
    Leaf,
    Add(usize, usize),
    AddBcast(usize, usize),
    Mul(usize, usize),
    MulBcast(usize, usize),
    Scale(usize, f64),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Bmm {
        a: usize,
        b: usize,
        trans_b: bool,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Softmax(usize, usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        cache: LayerNormCache,
    },
    Gelu(usize),
    Relu(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Narrow {
        x: usize,
        axis: usize,
        start: usize,
    },
    MeanAxis {
        x: usize,
        axis: usize,
    },
    Expand(usize),
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        dims: Conv1dDims,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        dims: Conv2dDims,
    },
    Bce {
        pred: usize,
        labels: Vec<f64>,
    },
    Sum(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape for one forward pass.
///
/// Nodes are appended in evaluation order, so the tape is topologically
/// sorted by construction and cannot contain cycles.
pub struct Graph {
    nodes: Vec<Node>,
    bound: BTreeMap<String, Var>,
    frozen: bool,
    sabotage: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            frozen: false,
            sabotage: false,
        }
    }

    /// A graph whose parameters are bound as constants; nothing receives gradients.
    pub fn frozen() -> Self {
        Self {
            frozen: true,
            ..Self::new()
        }
    }

    /// Corrupts the weight gradient of every linear layer by 1%.
    ///
    /// Only exists so gradient verification has a negative control.
    pub fn with_sabotaged_gradients(mut self) -> Self {
        self.sabotage = true;
        self
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter; repeated binds of one name share a node.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?
            .clone();
        let v = self.push(value, Op::Leaf, !self.frozen);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn unary(&mut self, x: Var, value: Tensor, op: Op) -> Var {
        let rg = self.rg(x.0);
        self.push(value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn suffix_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::Shape(format!(
                "{what}: {sb:?} does not broadcast onto {sa:?}"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_shape(a, b, "add_bcast")?;
        let bd = self.value(b).data();
        let n = bd.len();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::AddBcast(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.suffix_shape(a, b, "mul_bcast")?;
        let bd = self.value(b).data();
        let n = bd.len();
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bd[i % n])
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(value, Op::MulBcast(a.0, b.0), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.unary(x, value, Op::Scale(x.0, c)))
    }

    /// `x · wᵀ + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(TensorError::Shape(format!("linear {sx:?} by weight {sw:?}")));
        }
        let (out_dim, in_dim) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(TensorError::Shape(format!(
                    "linear bias {:?} for {out_dim} outputs",
                    self.shape(b)
                )));
            }
        }
        let rows = self.value(x).len() / in_dim;
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                out[r * out_dim..(r + 1) * out_dim].copy_from_slice(bd);
            }
        }
        ops::gemm(
            rows,
            in_dim,
            out_dim,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            b.is_some(),
        );
        let mut shape = sx;
        *shape.last_mut().unwrap() = out_dim;
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            value,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            rg,
        ))
    }

    /// Batched matrix product of `[B, n, k]` with `[B, k, m]`, or with
    /// `[B, m, k]` transposed when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(TensorError::Shape(format!(
                "bmm {sa:?} by {sb:?} (trans_b {trans_b})"
            )));
        }
        let (batch, n, k) = (sa[0], sa[1], sa[2]);
        let m = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * n * m];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            ops::gemm(
                n,
                k,
                m,
                &ad[i * n * k..(i + 1) * n * k],
                false,
                &bd[i * k * m..(i + 1) * k * m],
                trans_b,
                &mut out[i * n * m..(i + 1) * n * m],
                false,
            );
        }
        let value = Tensor::new(vec![batch, n, m], out)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            value,
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape(x.0)))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid(format!("bad permutation {perm:?}")));
        }
        let (data, new_shape) = ops::permute(self.value(x).data(), shape, perm);
        let value = Tensor::new(new_shape, data)?;
        Ok(self.unary(x, value, Op::Permute(x.0, perm.to_vec())))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = ops::softmax(self.value(x), axis)?;
        Ok(self.unary(x, value, Op::Softmax(x.0, axis)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let width = *self.shape(x).last().unwrap();
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return Err(TensorError::Shape(format!(
                "layer norm width {width}, gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        if eps <= 0.0 {
            return Err(TensorError::Invalid("layer norm eps must be positive".into()));
        }
        let (out, cache) = ops::layer_norm_forward(
            self.value(x).data(),
            width,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
        );
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                cache,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| ops::gelu(v)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.unary(x, value, Op::Gelu(x.0)))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.unary(x, value, Op::Relu(x.0)))
    }

    /// Which side of the kink every rectifier input fell on, in tape order.
    pub fn rectifier_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(&self.nodes[x].value),
                _ => None,
            })
            .flat_map(|t| t.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = ops::split_axis(&base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::Shape(format!("concat {s:?} with {base:?}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let n = self.shape(*p)[axis];
                let d = self.value(*p).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = ops::split_axis(&shape, axis)?;
        if len == 0 || start + len > n {
            return Err(TensorError::Shape(format!(
                "narrow [{start}, {}) of extent {n}",
                start + len
            )));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.unary(
            x,
            value,
            Op::Narrow {
                x: x.0,
                axis,
                start,
            },
        ))
    }

    /// Mean along `axis`, which is removed from the shape (rank-1 inputs give `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = ops::split_axis(&shape, axis)?;
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * n + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let value = Tensor::new(new_shape, out)?;
        Ok(self.unary(x, value, Op::MeanAxis { x: x.0, axis }))
    }

    /// Tiles `x` along new leading axes: shape becomes `lead ++ shape(x)`.
    pub fn expand(&mut self, x: Var, lead: &[usize]) -> Result<Var> {
        let reps: usize = lead.iter().product();
        let mut shape = lead.to_vec();
        shape.extend_from_slice(self.shape(x));
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(reps * d.len());
        for _ in 0..reps {
            out.extend_from_slice(d);
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.unary(x, value, Op::Expand(x.0)))
    }

    /// Batched 1-d cross-correlation: `x [B, C_in, T]`, `w [C_out, C_in, K]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(TensorError::Shape(format!("conv1d {sx:?} by {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(TensorError::Shape("conv1d bias".into()));
            }
        }
        let out_len = ops::conv_output_len(sx[2], sw[2], stride, padding)?;
        let dims = Conv1dDims {
            batch: sx[0],
            c_in: sx[1],
            len: sx[2],
            c_out: sw[0],
            kernel: sw[2],
            stride,
            padding,
            out_len,
        };
        let out = ops::conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let value = Tensor::new(vec![dims.batch, dims.c_out, out_len], out)?;
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            value,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                dims,
            },
            rg,
        ))
    }

    /// Batched 2-d cross-correlation: `x [N, C_in, H, W]`, `w [C_out, C_in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::Shape(format!("conv2d {sx:?} by {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(TensorError::Shape("conv2d bias".into()));
            }
        }
        let oh = ops::conv_output_len(sx[2], sw[2], stride, padding)?;
        let ow = ops::conv_output_len(sx[3], sw[3], stride, padding)?;
        let dims = Conv2dDims {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sw[0],
            kh: sw[2],
            kw: sw[3],
            stride,
            padding,
            oh,
            ow,
        };
        let out = ops::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &dims,
        );
        let value = Tensor::new(vec![dims.batch, dims.c_out, oh, ow], out)?;
        let rg = self.rg(x.0) || self.rg(w.0) || b.is_some_and(|b| self.rg(b.0));
        Ok(self.push(
            value,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                dims,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `pred` against 0/1 `labels`.
    pub fn bce(&mut self, pred: Var, labels: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.is_empty() || p.len() != labels.len() {
            return Err(TensorError::Shape(format!(
                "bce with {} predictions and {} labels",
                p.len(),
                labels.len()
            )));
        }
        let loss = bce_value(p, labels);
        let value = Tensor::scalar(loss);
        Ok(self.unary(
            pred,
            value,
            Op::Bce {
                pred: pred.0,
                labels: labels.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        Ok(self.unary(x, Tensor::scalar(s), Op::Sum(x.0)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            bound: self.bound.clone(),
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.data();
        let shp = |j: usize| self.nodes[j].value.shape();
        let mut acc = |j: usize, delta: Vec<f64>| {
            if !self.nodes[j].requires_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => existing.iter_mut().zip(delta).for_each(|(e, d)| *e += d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::AddBcast(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, fold_suffix(g, val(*b).len()));
            }
            Op::Mul(a, b) => {
                acc(*a, zip_map(g, val(*b), |x, y| x * y));
                acc(*b, zip_map(g, val(*a), |x, y| x * y));
            }
            Op::MulBcast(a, b) => {
                let bd = val(*b);
                let n = bd.len();
                acc(*a, g.iter().enumerate().map(|(k, &x)| x * bd[k % n]).collect());
                let prod = zip_map(g, val(*a), |x, y| x * y);
                acc(*b, fold_suffix(&prod, n));
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|v| v * c).collect()),
            Op::Linear { x, w, b } => {
                let sw = shp(*w);
                let (out_dim, in_dim) = (sw[0], sw[1]);
                let rows = g.len() / out_dim;
                if self.nodes[*x].requires_grad {
                    let mut dx = vec![0.0; rows * in_dim];
                    ops::gemm(rows, out_dim, in_dim, g, false, val(*w), false, &mut dx, false);
                    acc(*x, dx);
                }
                if self.nodes[*w].requires_grad {
                    let mut dw = vec![0.0; out_dim * in_dim];
                    ops::gemm(out_dim, rows, in_dim, g, true, val(*x), false, &mut dw, false);
                    if self.sabotage {
                        dw.iter_mut().for_each(|v| *v *= 1.01);
                    }
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    acc(*b, fold_suffix(g, out_dim));
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (batch, n, k) = (sa[0], sa[1], sa[2]);
                let m = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (val(*a), val(*b));
                if self.nodes[*a].requires_grad {
                    let mut da = vec![0.0; ad.len()];
                    for t in 0..batch {
                        ops::gemm(
                            n,
                            m,
                            k,
                            &g[t * n * m..(t + 1) * n * m],
                            false,
                            &bd[t * k * m..(t + 1) * k * m],
                            !*trans_b,
                            &mut da[t * n * k..(t + 1) * n * k],
                            false,
                        );
                    }
                    acc(*a, da);
                }
                if self.nodes[*b].requires_grad {
                    let mut db = vec![0.0; bd.len()];
                    for t in 0..batch {
                        let gs = &g[t * n * m..(t + 1) * n * m];
                        let as_ = &ad[t * n * k..(t + 1) * n * k];
                        let out = &mut db[t * k * m..(t + 1) * k * m];
                        if *trans_b {
                            ops::gemm(m, n, k, gs, true, as_, false, out, false);
                        } else {
                            ops::gemm(k, n, m, as_, true, gs, false, out, false);
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute(x, perm) => {
                let (back, _) = ops::permute(g, node.value.shape(), &ops::inverse_perm(perm));
                acc(*x, back);
            }
            Op::Softmax(x, axis) => {
                acc(
                    *x,
                    ops::softmax_backward(node.value.data(), g, node.value.shape(), *axis),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            } => {
                let width = val(*gain).len();
                let (dx, dg, db) = ops::layer_norm_backward(g, width, val(*gain), cache);
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Gelu(x) => acc(*x, zip_map(g, val(*x), |gv, xv| gv * ops::gelu_grad(xv))),
            Op::Relu(x) => acc(
                *x,
                zip_map(g, val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            ),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) =
                    ops::split_axis(node.value.shape(), *axis).expect("checked in forward");
                let mut offset = 0;
                for &p in parts {
                    let n = shp(p)[*axis];
                    if self.nodes[p].requires_grad {
                        let mut d = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            d.extend_from_slice(&g[s..s + n * inner]);
                        }
                        acc(p, d);
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = ops::split_axis(shp(*x), *axis).expect("checked");
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    d[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, d);
            }
            Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = ops::split_axis(shp(*x), *axis).expect("checked");
                let mut d = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    for j in 0..n {
                        for i2 in 0..inner {
                            d[(o * n + j) * inner + i2] = g[o * inner + i2] / n as f64;
                        }
                    }
                }
                acc(*x, d);
            }
            Op::Expand(x) => acc(*x, fold_suffix(g, val(*x).len())),
            Op::Conv1d { x, w, b, dims } => {
                let (dx, mut dw, db) = ops::conv1d_backward(g, val(*x), val(*w), dims);
                if self.sabotage {
                    dw.iter_mut().for_each(|v| *v *= 1.01);
                }
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let (dx, dw, db) = ops::conv2d_backward(g, val(*x), val(*w), dims);
                acc(*x, dx);
                acc(*w, dw);
                if let Some(b) = b {
                    acc(*b, db);
                }
            }
            Op::Bce { pred, labels } => {
                let p = val(*pred);
                let n = p.len() as f64;
                let d = p
                    .iter()
                    .zip(labels)
                    .map(|(&pv, &y)| {
                        if pv <= BCE_CLAMP || pv >= 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            -g[0] / n * (y / pv - (1.0 - y) / (1.0 - pv))
                        }
                    })
                    .collect();
                acc(*pred, d);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
        }
    }
}

/// Clamped mean binary cross-entropy.
pub(crate) fn bce_value(pred: &[f64], labels: &[f64]) -> f64 {
    let n = pred.len() as f64;
    -pred
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / n
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// Sums a buffer into its trailing `n`-element block (broadcast adjoint).
fn fold_suffix(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    bound: BTreeMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a recorded node; zero when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient for every parameter of `params`, zero for parameters the
    /// forward pass never touched.
    pub fn for_params(&self, params: &ParameterSet) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .map(|(name, t)| {
                let g = match self.bound.get(name) {
                    Some(&v) => self.get(v),
                    None => Tensor::zeros(t.shape()),
                };
                (name.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).data(), &[6.0]);
    }

    #[test]
    fn unused_parameter_gets_zero() {
        let mut params = ParameterSet::new();
        params.insert("a", Tensor::scalar(2.0));
        params.insert("b", Tensor::vector(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let a = g.param(&params, "a").unwrap();
        let y = g.mul(a, a).unwrap();
        let grads = g.backward(y).unwrap().for_params(&params);
        assert_eq!(grads["a"].data(), &[4.0]);
        assert_eq!(grads["b"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn frozen_graph_records_no_gradients() {
        let mut params = ParameterSet::new();
        params.insert("w", Tensor::scalar(2.0));
        let mut g = Graph::frozen();
        let w = g.param(&params, "w").unwrap();
        let y = g.mul(w, w).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(w).data(), &[0.0]);
    }

    #[test]
    fn bce_clamps_saturated_predictions() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::vector(vec![0.0, 1.0]));
        let l = g.bce(p, &[1.0, 0.0]).unwrap();
        let v = g.value(l).data()[0];
        assert!(v.is_finite());
        assert!((v + BCE_CLAMP.ln()).abs() < 1e-3);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).data(), &[0.0, 0.0]);
    }
}
