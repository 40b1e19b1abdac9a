//! Reverse-mode automatic differentiation over a fixed operation set.
//!
//! A [`Tape`] records every operation in execution order. Leaves either borrow
//! parameter tensors (so many tapes can share one set of read-only weights) or
//! own constant inputs. [`Tape::backward`] walks the record in reverse and
//! returns one gradient per tracked leaf.

use super::ops::{self, AttnGeom, ConvGeom};
use super::tensor::{gemm, Element, MatRef, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p, T> {
    Owned(Tensor<T>),
    Borrowed(&'p Tensor<T>),
}

impl<T> Value<'_, T> {
    fn get(&self) -> &Tensor<T> {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    RowScale(Var, Vec<T>),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var, Vec<T>),
    Relu(Var),
    Log(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: f64,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    MeanRowGroups {
        x: Var,
        group: usize,
    },
    Permute {
        x: Var,
        src: Vec<usize>,
    },
    Reshape(Var),
    Attention {
        qkv: Var,
        geom: AttnGeom,
        probs: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    UpsampleRows {
        x: Var,
        batch: usize,
        from: (usize, usize),
        to: (usize, usize),
    },
}

struct Node<'p, T> {
    value: Value<'p, T>,
    op: Op<T>,
    tracked: bool,
}

/// Operation record for one forward pass. Single owner; not shared across threads
/// while recording.
pub struct Tape<'p, T: Element = f32> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Element> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by the leaf [`Var`]s.
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for `v`, or zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

fn add_into<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<'p, T: Element> Tape<'p, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Gradient-tracked leaf borrowing `t`.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Gradient-tracked leaf owning `t`.
    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(t),
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Post-softmax probabilities `[batch, heads, seq, seq]` saved by an
    /// [`attention`](Self::attention) node.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), tr))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let mut out = x.clone();
        out.add_assign(y);
        let tr = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), tr))
    }

    /// `x [m, n] + y [k, n]` with `y` tiled over row blocks (`k` divides `m`).
    /// A bias vector of length `n` is treated as `[1, n]`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xv, yv) = (self.value(x), self.value(y));
        let n = xv.cols();
        if yv.cols() != n || yv.numel() == 0 || xv.rows() % yv.rows() != 0 || xv.ndim() < 1 {
            return Err(Error::shape("add_broadcast", xv.shape(), yv.shape()));
        }
        let mut out = xv.clone();
        let yd = yv.data();
        for block in out.data_mut().chunks_mut(yd.len()) {
            for (o, &v) in block.iter_mut().zip(yd) {
                *o = *o + v;
            }
        }
        let tr = self.tracked(&[x, y]);
        Ok(self.push(out, Op::AddBroadcast(x, y), tr))
    }

    /// `x W + b` for row-major `x [m, in]`, `W [in, out]`, `b [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_broadcast(h, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let tr = self.tracked(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), tr))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let out = self.value(x).map(|v| v * c);
        let tr = self.tracked(&[x]);
        self.push(out, Op::Scale(x, c), tr)
    }

    /// Multiplies row `r` of `x` by the constant `factors[r]`.
    pub fn row_scale(&mut self, x: Var, factors: Vec<T>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.rows() {
            return Err(Error::shape("row_scale", xv.shape(), &[factors.len()]));
        }
        let n = xv.cols();
        let mut out = xv.clone();
        for (row, &f) in out.data_mut().chunks_mut(n).zip(&factors) {
            row.iter_mut().for_each(|v| *v = *v * f);
        }
        let tr = self.tracked(&[x]);
        Ok(self.push(out, Op::RowScale(x, factors), tr))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = ops::softmax(self.value(x), axis)?;
        let tr = self.tracked(&[x]);
        Ok(self.push(out, Op::Softmax { x, axis }, tr))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, saved) =
            ops::layer_norm_fwd(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let tr = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: saved.xhat,
                rstd: saved.rstd,
            },
            tr,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let tr = self.tracked(&[x]);
        let cdf: Vec<T> = xv.data().iter().map(|&v| ops::phi_cdf(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), xv.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect())
            .expect("same shape");
        let saved = if tr { cdf } else { Vec::new() };
        self.push(out, Op::Gelu(x, saved), tr)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let tr = self.tracked(&[x]);
        self.push(out, Op::Relu(x), tr)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.ln());
        let tr = self.tracked(&[x]);
        self.push(out, Op::Log(x), tr)
    }

    /// Mean cross-entropy between row logits and class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_smoothed(logits, targets, 0.0)
    }

    pub fn cross_entropy_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(format!("label smoothing {smoothing} not in [0,1)")));
        }
        let (loss, probs) = ops::cross_entropy_fwd(self.value(logits), targets, smoothing)?;
        let tr = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            tr,
        ))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        if p.shape() != t.shape() {
            return Err(Error::shape("mse", p.shape(), t.shape()));
        }
        let n = p.numel().max(1) as f64;
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b).as_f64().powi(2))
            .sum();
        let tr = self.tracked(&[pred, target]);
        Ok(self.push(Tensor::scalar(T::from_f64(s / n)), Op::Mse(pred, target), tr))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let tr = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tr)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / T::from_f64(v.numel().max(1) as f64);
        let tr = self.tracked(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), tr)
    }

    /// Selects rows of `x` (viewed as `[rows, cols]`); indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in &index {
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new([index.len(), n], data)?;
        let tr = self.tracked(&[x]);
        Ok(self.push(out, Op::GatherRows { x, index }, tr))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new([rows, n], data)?;
        let tr = self.tracked(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), tr))
    }

    /// Averages each consecutive block of `group` rows: `[b*group, n] -> [b, n]`.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, n) = (xv.rows(), xv.cols());
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("mean_row_groups", xv.shape(), &[group]));
        }
        let inv = T::from_f64(1.0 / group as f64);
        let mut out = Tensor::zeros([rows / group, n]);
        for r in 0..rows {
            let src = xv.row(r);
            let dst = &mut out.data_mut()[(r / group) * n..(r / group + 1) * n];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s * inv;
            }
        }
        let tr = self.tracked(&[x]);
        Ok(self.push(out, Op::MeanRowGroups { x, group }, tr))
    }

    /// Element permutation: `out.flat[i] = x.flat[src[i]]`.
    fn permute(&mut self, x: Var, src: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let xd = self.value(x).data();
        let data = src.iter().map(|&i| xd[i]).collect();
        let out = Tensor::new(shape, data)?;
        let tr = self.tracked(&[x]);
        Ok(self.push(out, Op::Permute { x, src }, tr))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let tr = self.tracked(&[x]);
        Ok(self.push(out, Op::Reshape(x), tr))
    }

    /// `[B, C, H, W] -> [B*H*W, C]`.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, c, h, w] = s[..] else {
            return Err(Error::shape("nchw_to_rows", &s, &[0, 0, 0, 0]));
        };
        let mut src = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for y in 0..h {
                for xi in 0..w {
                    for ci in 0..c {
                        src.push(((bi * c + ci) * h + y) * w + xi);
                    }
                }
            }
        }
        self.permute(x, src, vec![b * h * w, c])
    }

    /// `[B*H*W, C] -> [B, C, H, W]`.
    pub fn rows_to_nchw(&mut self, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != b * h * w {
            return Err(Error::shape("rows_to_nchw", &s, &[b * h * w]));
        }
        let c = s[1];
        let mut src = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for y in 0..h {
                    for xi in 0..w {
                        src.push(((bi * h + y) * w + xi) * c + ci);
                    }
                }
            }
        }
        self.permute(x, src, vec![b, c, h, w])
    }

    /// Depth-to-space: `[B, C*r*r, H, W] -> [B, C, H*r, W*r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, cr, h, w] = s[..] else {
            return Err(Error::shape("pixel_shuffle", &s, &[0, 0, 0, 0]));
        };
        if r == 0 || cr % (r * r) != 0 {
            return Err(Error::shape("pixel_shuffle", &s, &[r, r]));
        }
        let c = cr / (r * r);
        let (ho, wo) = (h * r, w * r);
        let mut src = Vec::with_capacity(b * cr * h * w);
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let ch = ci * r * r + (oy % r) * r + (ox % r);
                        src.push(((bi * cr + ch) * h + oy / r) * w + ox / r);
                    }
                }
            }
        }
        self.permute(x, src, vec![b, c, ho, wo])
    }

    /// Fused multi-head self-attention. `qkv` is `[batch*seq, 3*dim]` with
    /// per-row layout `[q | k | v]`; the result is `[batch*seq, dim]`.
    pub fn attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(qkv).to_vec();
        if s.len() != 2 || s[0] != batch * seq || s[1] % 3 != 0 || (s[1] / 3) % heads != 0 {
            return Err(Error::shape("attention", &s, &[batch * seq, heads]));
        }
        let geom = AttnGeom {
            batch,
            seq,
            heads,
            dim: s[1] / 3,
        };
        let (out, probs) = geom.forward(self.value(qkv).data());
        let out = Tensor::new([batch * seq, geom.dim], out)?;
        let tr = self.tracked(&[qkv]);
        Ok(self.push(out, Op::Attention { qkv, geom, probs }, tr))
    }

    /// 2-D convolution over NCHW input with square kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bad = || Error::shape("conv2d", &xs, &ws);
        let (&[batch, in_ch, height, width], &[out_ch, wc, kh, kw]) = (&xs[..], &ws[..]) else {
            return Err(bad());
        };
        if wc != in_ch || kh != kw || stride == 0 || self.value(b).numel() != out_ch {
            return Err(bad());
        }
        if height + 2 * pad < kh || width + 2 * pad < kw {
            return Err(bad());
        }
        let geom = ConvGeom {
            batch,
            in_ch,
            height,
            width,
            out_ch,
            kernel: kh,
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let data = geom.forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let out = Tensor::new([batch, out_ch, ho, wo], data)?;
        let tr = self.tracked(&[x, w, b]);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, tr))
    }

    /// Bilinear resize of per-cell rows: `[batch*h*w, C] -> [batch*H*W, C]`.
    pub fn upsample_bilinear_rows(
        &mut self,
        x: Var,
        batch: usize,
        from: (usize, usize),
        to: (usize, usize),
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || xv.rows() != batch * from.0 * from.1 || to.0 == 0 || to.1 == 0 {
            return Err(Error::shape(
                "upsample_bilinear_rows",
                xv.shape(),
                &[batch, from.0, from.1],
            ));
        }
        let c = xv.cols();
        let mut out = Tensor::zeros([batch * to.0 * to.1, c]);
        for_each_bilinear_tap(batch, from, to, |dst, src, wgt| {
            let wgt = T::from_f64(wgt);
            let s = &xv.data()[src * c..(src + 1) * c];
            let d = &mut out.data_mut()[dst * c..(dst + 1) * c];
            for (o, &v) in d.iter_mut().zip(s) {
                *o = *o + v * wgt;
            }
        });
        let tr = self.tracked(&[x]);
        Ok(self.push(out, Op::UpsampleRows { x, batch, from, to }, tr))
    }

    /// Reverse pass from the scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let n = self.nodes.len();
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.get().shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads)?;
        }
        // Only leaves keep their gradients.
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.tracked {
                *slot = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(
        &self,
        node: &Node<'p, T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let out = node.value.get();
        let val = |v: Var| self.value(v);
        let tr = |v: Var| self.nodes[v.0].tracked;
        let mut send = |v: Var, t: Tensor<T>| {
            if self.nodes[v.0].tracked {
                add_into(&mut grads[v.0], t);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, nn) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if tr(*a) {
                    let mut da = Tensor::zeros([m, k]);
                    gemm(
                        g.data(),
                        MatRef::dense(m, nn),
                        bv.data(),
                        MatRef::dense(k, nn).t(),
                        da.data_mut(),
                        MatRef::dense(m, k),
                        false,
                    );
                    send(*a, da);
                }
                if tr(*b) {
                    let mut db = Tensor::zeros([k, nn]);
                    gemm(
                        av.data(),
                        MatRef::dense(m, k).t(),
                        g.data(),
                        MatRef::dense(m, nn),
                        db.data_mut(),
                        MatRef::dense(k, nn),
                        false,
                    );
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                if tr(*a) {
                    send(*a, g.clone());
                }
                send(*b, g);
            }
            Op::AddBroadcast(x, y) => {
                if tr(*y) {
                    let yv = val(*y);
                    let mut dy = vec![T::zero(); yv.numel()];
                    for block in g.data().chunks(dy.len()) {
                        for (d, &gv) in dy.iter_mut().zip(block) {
                            *d = *d + gv;
                        }
                    }
                    send(*y, Tensor::new(yv.shape().to_vec(), dy)?);
                }
                send(*x, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if tr(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&p, &q)| p * q).collect();
                    send(*a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if tr(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&p, &q)| p * q).collect();
                    send(*b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(x, c) => send(*x, g.map(|v| v * *c)),
            Op::RowScale(x, f) => {
                let n = g.cols();
                let mut d = g;
                for (row, &fv) in d.data_mut().chunks_mut(n).zip(f) {
                    row.iter_mut().for_each(|v| *v = *v * fv);
                }
                send(*x, d);
            }
            Op::Softmax { x, axis } => {
                let (outer, nn, inner) = ops::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut d = g;
                let dd = d.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * nn * inner + i;
                        let mut dot = T::zero();
                        for j in 0..nn {
                            dot = dot + dd[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..nn {
                            let idx = base + j * inner;
                            dd[idx] = y[idx] * (dd[idx] - dot);
                        }
                    }
                }
                send(*x, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let nn = g.cols();
                let gam = val(*gamma).data();
                if tr(*gamma) || tr(*beta) {
                    let mut dg = vec![T::zero(); nn];
                    let mut db = vec![T::zero(); nn];
                    for (gr, xr) in g.data().chunks(nn).zip(xhat.chunks(nn)) {
                        for j in 0..nn {
                            dg[j] = dg[j] + gr[j] * xr[j];
                            db[j] = db[j] + gr[j];
                        }
                    }
                    send(*gamma, Tensor::new(val(*gamma).shape().to_vec(), dg)?);
                    send(*beta, Tensor::new(val(*beta).shape().to_vec(), db)?);
                }
                if tr(*x) {
                    let inv_n = T::from_f64(1.0 / nn as f64);
                    let mut dx = Tensor::zeros(g.shape().to_vec());
                    let mut dxhat = vec![T::zero(); nn];
                    for (r, ((gr, xr), dr)) in g
                        .data()
                        .chunks(nn)
                        .zip(xhat.chunks(nn))
                        .zip(dx.data_mut().chunks_mut(nn))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..nn {
                            dxhat[j] = gr[j] * gam[j];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * xr[j];
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        for j in 0..nn {
                            dr[j] = rstd[r] * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::Gelu(x, cdf) => {
                let xv = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(cdf)
                    .map(|((&gv, &xv), &c)| gv * ops::gelu_grad_with_cdf(xv, c))
                    .collect();
                send(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Relu(x) => {
                let xv = val(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                send(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Log(x) => {
                let xv = val(*x);
                let d = g.data().iter().zip(xv.data()).map(|(&gv, &xv)| gv / xv).collect();
                send(*x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let lv = val(*logits);
                let (rows, k) = (lv.shape()[0], lv.shape()[1]);
                let scale = g.item() / T::from_f64(rows.max(1) as f64);
                let off = T::from_f64(smoothing / k as f64);
                let on = T::from_f64(1.0 - smoothing);
                let mut d: Vec<T> = probs.iter().map(|&p| (p - off) * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] = d[r * k + t] - on * scale;
                }
                send(*logits, Tensor::new([rows, k], d)?);
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let c = g.item() * T::from_f64(2.0 / pv.numel().max(1) as f64);
                let d: Vec<T> = pv.data().iter().zip(tv.data()).map(|(&a, &b)| (a - b) * c).collect();
                if tr(*t) {
                    let neg = d.iter().map(|&v| -v).collect();
                    send(*t, Tensor::new(pv.shape().to_vec(), neg)?);
                }
                send(*p, Tensor::new(pv.shape().to_vec(), d)?);
            }
            Op::Sum(x) => send(*x, Tensor::full(val(*x).shape().to_vec(), g.item())),
            Op::Mean(x) => {
                let xv = val(*x);
                let v = g.item() / T::from_f64(xv.numel().max(1) as f64);
                send(*x, Tensor::full(xv.shape().to_vec(), v));
            }
            Op::GatherRows { x, index } => {
                let xv = val(*x);
                let nn = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (r, &i) in index.iter().enumerate() {
                    let src = &g.data()[r * nn..(r + 1) * nn];
                    let dst = &mut dx.data_mut()[i * nn..(i + 1) * nn];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                send(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let len = pv.numel();
                    if tr(p) {
                        let d = g.data()[offset..offset + len].to_vec();
                        send(p, Tensor::new(pv.shape().to_vec(), d)?);
                    }
                    offset += len;
                }
            }
            Op::MeanRowGroups { x, group } => {
                let xv = val(*x);
                let nn = xv.cols();
                let inv = T::from_f64(1.0 / *group as f64);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for (r, dst) in dx.data_mut().chunks_mut(nn).enumerate() {
                    let src = g.row(r / group);
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = s * inv;
                    }
                }
                send(*x, dx);
            }
            Op::Permute { x, src } => {
                let xv = val(*x);
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                let dd = dx.data_mut();
                for (&s, &gv) in src.iter().zip(g.data()) {
                    dd[s] = dd[s] + gv;
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g.reshape(val(*x).shape().to_vec())?),
            Op::Attention { qkv, geom, probs } => {
                let qv = val(*qkv);
                let mut d = Tensor::zeros(qv.shape().to_vec());
                geom.backward(qv.data(), probs, g.data(), d.data_mut());
                send(*qkv, d);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv, bv) = (val(*x), val(*w), val(*b));
                let mut dx = tr(*x).then(|| Tensor::zeros(xv.shape().to_vec()));
                let mut dw = tr(*w).then(|| Tensor::zeros(wv.shape().to_vec()));
                let mut db = tr(*b).then(|| Tensor::zeros(bv.shape().to_vec()));
                geom.backward(
                    xv.data(),
                    wv.data(),
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = dx {
                    send(*x, t);
                }
                if let Some(t) = dw {
                    send(*w, t);
                }
                if let Some(t) = db {
                    send(*b, t);
                }
            }
            Op::UpsampleRows { x, batch, from, to } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape().to_vec());
                for_each_bilinear_tap(*batch, *from, *to, |dst, src, wgt| {
                    let wgt = T::from_f64(wgt);
                    let gs = &g.data()[dst * c..(dst + 1) * c];
                    let d = &mut dx.data_mut()[src * c..(src + 1) * c];
                    for (o, &v) in d.iter_mut().zip(gs) {
                        *o = *o + v * wgt;
                    }
                });
                send(*x, dx);
            }
        }
        Ok(())
    }
}

/// Calls `f(dst_row, src_row, weight)` for every nonzero bilinear tap.
fn for_each_bilinear_tap(
    batch: usize,
    from: (usize, usize),
    to: (usize, usize),
    mut f: impl FnMut(usize, usize, f64),
) {
    let ty = ops::bilinear_taps(from.0, to.0);
    let tx = ops::bilinear_taps(from.1, to.1);
    for b in 0..batch {
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let dst = (b * to.0 + oy) * to.1 + ox;
                let src = |y: usize, x: usize| (b * from.0 + y) * from.1 + x;
                for (s, w) in [
                    (src(y0, x0), (1.0 - wy) * (1.0 - wx)),
                    (src(y0, x1), (1.0 - wy) * wx),
                    (src(y1, x0), wy * (1.0 - wx)),
                    (src(y1, x1), wy * wx),
                ] {
                    if w != 0.0 {
                        f(dst, s, w);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::<f64>::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let s = tape.sum(xv);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(xv), Tensor::ones([2, 3]));
    }

    #[test]
    fn disconnected_parameter_gets_zero_gradient() {
        let x = Tensor::<f64>::ones([2]);
        let unused = Tensor::<f64>::ones([3]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        let uv = tape.param(&unused);
        let s = tape.sum(xv);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(uv), Tensor::zeros([3]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f64>::ones([2]);
        let mut tape = Tape::new();
        let xv = tape.param(&x);
        assert!(tape.backward(xv).is_err());
    }

    #[test]
    fn permutations_round_trip() {
        let x = Tensor::<f64>::from_f64([1, 8, 2, 2], &(0..32).map(f64::from).collect::<Vec<_>>())
            .unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let rows = tape.nchw_to_rows(xv).unwrap();
        assert_eq!(tape.shape(rows), &[4, 8]);
        let back = tape.rows_to_nchw(rows, 1, 2, 2).unwrap();
        assert_eq!(tape.value(back), &x);
        let ps = tape.pixel_shuffle(xv, 2).unwrap();
        assert_eq!(tape.shape(ps), &[1, 2, 4, 4]);
        // channel 0 at (0,1) comes from input channel 1 at (0,0).
        assert_eq!(tape.value(ps).data()[1], x.data()[4]);
    }
}
