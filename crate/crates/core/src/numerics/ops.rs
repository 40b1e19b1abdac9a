//! Forward kernels. The tape records these and supplies the matching
//! backward passes; they are also usable directly on plain tensors.

use super::tensor::{gemm, Element, MatRef, Tensor};
use crate::error::{Error, Result};

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros([m, n]);
    gemm(
        a.data(),
        MatRef::dense(m, k),
        b.data(),
        MatRef::dense(k, n),
        out.data_mut(),
        MatRef::dense(m, n),
        false,
    );
    Ok(out)
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::invalid(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(d[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (d[base + j * inner] - max).exp();
                d[base + j * inner] = e;
                total = total + e;
            }
            for j in 0..n {
                d[base + j * inner] = d[base + j * inner] / total;
            }
        }
    }
    Ok(out)
}

/// Row-wise log-softmax over the last axis.
pub fn log_softmax_rows<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.cols();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n.max(1)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    out
}

pub(crate) struct LayerNormSaved<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_fwd<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormSaved<T>)> {
    let n = x.cols();
    if gamma.numel() != n || beta.numel() != n {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    let eps = T::from_f64(eps);
    let inv_n = T::from_f64(1.0 / n as f64);
    let rows = x.rows();
    let mut out = Tensor::zeros(x.shape().to_vec());
    let mut xhat = vec![T::zero(); x.numel()];
    let mut rstd = Vec::with_capacity(rows);
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().copied().sum::<T>() * inv_n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rs = (var + eps).sqrt().recip();
        rstd.push(rs);
        let o = &mut out.data_mut()[r * n..(r + 1) * n];
        let xh = &mut xhat[r * n..(r + 1) * n];
        for j in 0..n {
            xh[j] = (xr[j] - mean) * rs;
            o[j] = xh[j] * g[j] + b[j];
        }
    }
    Ok((out, LayerNormSaved { xhat, rstd }))
}

/// Normalizes each row over the last axis, then applies `gamma * xhat + beta`.
pub fn layer_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    Ok(layer_norm_fwd(x, gamma, beta, eps)?.0)
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn phi_cdf<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_scalar<T: Element>(x: T) -> T {
    x * phi_cdf(x)
}

pub(crate) fn gelu_grad_with_cdf<T: Element>(x: T, cdf: T) -> T {
    cdf + x * T::from_f64(FRAC_1_SQRT_2PI) * (T::from_f64(-0.5) * x * x).exp()
}

/// `x * Phi(x)` with the exact Gaussian CDF.
pub fn gelu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub(crate) fn check_targets(targets: &[usize], rows: usize, classes: usize) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::shape("cross_entropy", &[rows, classes], &[targets.len()]));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::TargetOutOfRange {
            index: bad,
            classes,
        });
    }
    Ok(())
}

/// Mean cross-entropy and the softmax probabilities. With `smoothing > 0`
/// the target distribution is `(1 - smoothing) * onehot + smoothing / K`.
pub(crate) fn cross_entropy_fwd<T: Element>(
    logits: &Tensor<T>,
    targets: &[usize],
    smoothing: f64,
) -> Result<(T, Vec<T>)> {
    if logits.ndim() != 2 {
        return Err(Error::shape("cross_entropy", logits.shape(), &[targets.len()]));
    }
    let (rows, k) = (logits.shape()[0], logits.shape()[1]);
    check_targets(targets, rows, k)?;
    let logp = log_softmax_rows(logits);
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        let row = logp.row(r);
        let mut l = -(1.0 - smoothing) * row[t].as_f64();
        if smoothing > 0.0 {
            let mean_lp: f64 = row.iter().map(|v| v.as_f64()).sum::<f64>() / k as f64;
            l -= smoothing * mean_lp;
        }
        total += l;
    }
    let probs = logp.data().iter().map(|v| v.exp()).collect();
    let loss = if rows == 0 { 0.0 } else { total / rows as f64 };
    Ok((T::from_f64(loss), probs))
}

/// Mean negative log-softmax of the target entries, as a scalar tensor.
pub fn cross_entropy_from_logits<T: Element>(
    logits: &Tensor<T>,
    targets: &[usize],
) -> Result<Tensor<T>> {
    Ok(Tensor::scalar(cross_entropy_fwd(logits, targets, 0.0)?.0))
}

/// Geometry of a 2-D convolution over NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Unfolds image `b` of `x` into a `[C*k*k, Ho*Wo]` column matrix.
    pub fn im2col<T: Element>(&self, x: &[T], b: usize, cols: &mut [T]) {
        let (ho, wo) = self.out_hw();
        let img = &x[b * self.in_ch * self.height * self.width..];
        for c in 0..self.in_ch {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * wo + ox] = if iy < 0
                                || ix < 0
                                || iy >= self.height as isize
                                || ix >= self.width as isize
                            {
                                T::zero()
                            } else {
                                img[(c * self.height + iy as usize) * self.width + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`]: scatters columns back into image `b` of `dx`.
    pub fn col2im<T: Element>(&self, cols: &[T], b: usize, dx: &mut [T]) {
        let (ho, wo) = self.out_hw();
        let img = &mut dx[b * self.in_ch * self.height * self.width..];
        for c in 0..self.in_ch {
            for ky in 0..self.kernel {
                for kx in 0..self.kernel {
                    let row = (c * self.kernel + ky) * self.kernel + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let dst = &mut img[(c * self.height + iy as usize) * self.width
                                + ix as usize];
                            *dst = *dst + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Element>(&self, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
        let (ho, wo) = self.out_hw();
        let hw = ho * wo;
        let kk = self.col_rows();
        let mut out = vec![T::zero(); self.batch * self.out_ch * hw];
        let mut cols = vec![T::zero(); kk * hw];
        for b in 0..self.batch {
            self.im2col(x, b, &mut cols);
            let ob = &mut out[b * self.out_ch * hw..(b + 1) * self.out_ch * hw];
            for (o, chunk) in ob.chunks_mut(hw).enumerate() {
                chunk.fill(bias[o]);
            }
            gemm(
                w,
                MatRef::dense(self.out_ch, kk),
                &cols,
                MatRef::dense(kk, hw),
                ob,
                MatRef::dense(self.out_ch, hw),
                true,
            );
        }
        out
    }

    /// Accumulates gradients for input, weight and bias.
    pub fn backward<T: Element>(
        &self,
        x: &[T],
        w: &[T],
        dout: &[T],
        dx: Option<&mut [T]>,
        dw: Option<&mut [T]>,
        db: Option<&mut [T]>,
    ) {
        let (ho, wo) = self.out_hw();
        let hw = ho * wo;
        let kk = self.col_rows();
        let mut cols = vec![T::zero(); kk * hw];
        let mut dx = dx;
        let mut dw = dw;
        if let Some(db) = db {
            for b in 0..self.batch {
                for o in 0..self.out_ch {
                    let s: T = dout[(b * self.out_ch + o) * hw..(b * self.out_ch + o + 1) * hw]
                        .iter()
                        .copied()
                        .sum();
                    db[o] = db[o] + s;
                }
            }
        }
        for b in 0..self.batch {
            let db_ = &dout[b * self.out_ch * hw..(b + 1) * self.out_ch * hw];
            if let Some(dw) = dw.as_deref_mut() {
                self.im2col(x, b, &mut cols);
                gemm(
                    db_,
                    MatRef::dense(self.out_ch, hw),
                    &cols,
                    MatRef::dense(kk, hw).t(),
                    dw,
                    MatRef::dense(self.out_ch, kk),
                    true,
                );
            }
            if let Some(dx) = dx.as_deref_mut() {
                gemm(
                    w,
                    MatRef::dense(self.out_ch, kk).t(),
                    db_,
                    MatRef::dense(self.out_ch, hw),
                    &mut cols,
                    MatRef::dense(kk, hw),
                    false,
                );
                self.col2im(&cols, b, dx);
            }
        }
    }
}

/// Two-tap linear interpolation weights along one axis (half-pixel centers).
pub(crate) fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Geometry of fused multi-head self-attention over `batch` sequences stacked
/// row-wise, reading `[q | k | v]` from one `[batch*seq, 3*dim]` matrix.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub dim: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn view(&self, b: usize, part: usize, h: usize) -> MatRef {
        let dh = self.head_dim();
        MatRef {
            offset: b * self.seq * 3 * self.dim + part * self.dim + h * dh,
            rows: self.seq,
            cols: dh,
            row_stride: 3 * self.dim,
            col_stride: 1,
        }
    }

    fn out_view(&self, b: usize, h: usize) -> MatRef {
        let dh = self.head_dim();
        MatRef {
            offset: b * self.seq * self.dim + h * dh,
            rows: self.seq,
            cols: dh,
            row_stride: self.dim,
            col_stride: 1,
        }
    }

    /// Returns `(output [batch*seq, dim], probs [batch, heads, seq, seq])`.
    pub fn forward<T: Element>(&self, qkv: &[T]) -> (Vec<T>, Vec<T>) {
        let s = self.seq;
        let scale = T::from_f64(1.0 / (self.head_dim() as f64).sqrt());
        let mut out = vec![T::zero(); self.batch * s * self.dim];
        let mut probs = vec![T::zero(); self.batch * self.heads * s * s];
        for b in 0..self.batch {
            for h in 0..self.heads {
                let p_off = (b * self.heads + h) * s * s;
                let p = &mut probs[p_off..p_off + s * s];
                gemm(
                    qkv,
                    self.view(b, 0, h),
                    qkv,
                    self.view(b, 1, h).t(),
                    p,
                    MatRef::dense(s, s),
                    false,
                );
                for row in p.chunks_mut(s) {
                    let mut max = T::neg_infinity();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                        max = max.max(*v);
                    }
                    let mut total = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total = total + *v;
                    }
                    for v in row.iter_mut() {
                        *v = *v / total;
                    }
                }
                gemm(
                    p,
                    MatRef::dense(s, s),
                    qkv,
                    self.view(b, 2, h),
                    &mut out,
                    self.out_view(b, h),
                    false,
                );
            }
        }
        (out, probs)
    }

    pub fn backward<T: Element>(&self, qkv: &[T], probs: &[T], dout: &[T], dqkv: &mut [T]) {
        let s = self.seq;
        let scale = T::from_f64(1.0 / (self.head_dim() as f64).sqrt());
        let mut dp = vec![T::zero(); s * s];
        for b in 0..self.batch {
            for h in 0..self.heads {
                let p_off = (b * self.heads + h) * s * s;
                let p = &probs[p_off..p_off + s * s];
                // dV = P^T dO
                gemm(
                    p,
                    MatRef::dense(s, s).t(),
                    dout,
                    self.out_view(b, h),
                    dqkv,
                    self.view(b, 2, h),
                    true,
                );
                // dP = dO V^T
                gemm(
                    dout,
                    self.out_view(b, h),
                    qkv,
                    self.view(b, 2, h).t(),
                    &mut dp,
                    MatRef::dense(s, s),
                    false,
                );
                // dS = P * (dP - rowsum(dP * P)), folded with the score scale.
                for (dr, pr) in dp.chunks_mut(s).zip(p.chunks(s)) {
                    let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in dr.iter_mut().zip(pr) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                // dQ = dS K ; dK = dS^T Q
                gemm(
                    &dp,
                    MatRef::dense(s, s),
                    qkv,
                    self.view(b, 1, h),
                    dqkv,
                    self.view(b, 0, h),
                    true,
                );
                gemm(
                    &dp,
                    MatRef::dense(s, s).t(),
                    qkv,
                    self.view(b, 0, h),
                    dqkv,
                    self.view(b, 1, h),
                    true,
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn matmul_identity_and_hand_product() {
        let a = Tensor::<f32>::from_f64([2, 2], &[1., 2., 3., 4.]).unwrap();
        assert_eq!(matmul(&Tensor::eye(2), &a).unwrap(), a);
        let b = Tensor::<f32>::from_f64([2, 2], &[5., 6., 7., 8.]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_rejects_bad_inner_extent() {
        let a = Tensor::<f32>::zeros([2, 3]);
        let err = matmul(&a, &a).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::<f64>::from(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let x = Tensor::<f64>::from(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]);
        let s = softmax(&x, 0).unwrap();
        for (got, want) in s.data().iter().zip([1. / 6., 2. / 6., 3. / 6.]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        let shifted = softmax(&x.map(|v| v + 100.0), 0).unwrap();
        assert!(s.max_abs_diff(&shifted) < 1e-12);
    }

    #[test]
    fn softmax_inner_axis() {
        let x = Tensor::<f64>::from_f64([2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap();
        let s = softmax(&x, 0).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(s.data()[j] + s.data()[3 + j], 1.0, epsilon = 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn layer_norm_limits() {
        let x = Tensor::<f64>::full([2, 4], 3.0);
        let y = layer_norm(&x, &Tensor::ones([4]), &Tensor::zeros([4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));
        let x = Tensor::<f64>::from_f64([1, 3], &[1., -2., 7.]).unwrap();
        let beta = Tensor::from(vec![0.1, 0.2, 0.3]);
        let y = layer_norm(&x, &Tensor::zeros([3]), &beta, 1e-5).unwrap();
        assert_eq!(y.data(), beta.data());
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        // Phi(1) from the erf series.
        assert_abs_diff_eq!(gelu_scalar(1.0), 0.841_344_746_068_542_9, epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let k = 8192;
        let logits = Tensor::<f64>::zeros([1, k]);
        let l = cross_entropy_from_logits(&logits, &[5]).unwrap().item();
        assert_abs_diff_eq!(l, (k as f64).ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(l, 9.0109, epsilon = 1e-4);

        let mut sat = vec![0.0; 4];
        sat[2] = 30.0;
        let l = cross_entropy_from_logits(&Tensor::<f64>::from_f64([1, 4], &sat).unwrap(), &[2])
            .unwrap()
            .item();
        assert!(l < 1e-9);

        let x = Tensor::<f64>::from_f64([1, 3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        let l = cross_entropy_from_logits(&x, &[2]).unwrap().item();
        assert_abs_diff_eq!(l, 2f64.ln(), epsilon = 1e-12);

        assert!(matches!(
            cross_entropy_from_logits(&x, &[3]),
            Err(Error::TargetOutOfRange { index: 3, classes: 3 })
        ));
    }

    #[test]
    fn bilinear_taps_identity_at_scale_one() {
        for (o, (i0, _, w)) in bilinear_taps(5, 5).into_iter().enumerate() {
            assert_eq!((i0, w), (o, 0.0));
        }
    }
}
