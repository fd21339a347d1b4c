//! Forward implementations of every tensor operation.
//!
//! All operations are methods on [`Tape`]: they validate shapes, compute
//! the result, and (on a recording tape, when an input is tracked) append
//! the matching backward record. Values are always computed — recording
//! only controls whether gradient history is kept.

use super::op::{axpy, permute_data, valid_ox_range, Op};
use super::{Mode, Tape, Tensor};
use crate::error::{Error, Result};

/// Output extent of a convolution along one spatial axis.
pub fn conv2d_output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("conv2d stride must be >= 1"));
    }
    let padded = extent + 2 * padding;
    if padded < kernel {
        return Err(Error::config(format!(
            "conv2d kernel {kernel} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Per-channel running statistics owned by a batch-normalization layer.
///
/// `momentum` is the retained fraction: after a train-mode forward,
/// `running = momentum * running + (1 - momentum) * batch`, with the
/// biased (population) batch variance.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl RunningStats {
    /// Fresh statistics: zero mean, unit variance, momentum 0.9, eps 1e-5.
    pub fn new(channels: usize) -> RunningStats {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.9,
            eps: 1e-5,
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::config(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn expect_rank4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::config(format!("{what}: expected rank-4 tensor, got shape {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3]])
}

impl Tape {
    // ── Elementwise binary ──────────────────────────────────────────────

    pub fn add(&self, lhs: &Tensor, rhs: &Tensor) -> Result<Tensor> {
        same_shape(lhs, rhs, "add")?;
        let data = lhs.data().iter().zip(rhs.data().iter()).map(|(a, b)| a + b).collect();
        let (l, r) = (lhs.clone(), rhs.clone());
        Ok(self.finish(&[lhs, rhs], || Op::Add { lhs: l, rhs: r }, lhs.shape().to_vec(), data))
    }

    pub fn sub(&self, lhs: &Tensor, rhs: &Tensor) -> Result<Tensor> {
        same_shape(lhs, rhs, "sub")?;
        let data = lhs.data().iter().zip(rhs.data().iter()).map(|(a, b)| a - b).collect();
        let (l, r) = (lhs.clone(), rhs.clone());
        Ok(self.finish(&[lhs, rhs], || Op::Sub { lhs: l, rhs: r }, lhs.shape().to_vec(), data))
    }

    pub fn mul(&self, lhs: &Tensor, rhs: &Tensor) -> Result<Tensor> {
        same_shape(lhs, rhs, "mul")?;
        let data = lhs.data().iter().zip(rhs.data().iter()).map(|(a, b)| a * b).collect();
        let (l, r) = (lhs.clone(), rhs.clone());
        Ok(self.finish(&[lhs, rhs], || Op::Mul { lhs: l, rhs: r }, lhs.shape().to_vec(), data))
    }

    pub fn div(&self, lhs: &Tensor, rhs: &Tensor) -> Result<Tensor> {
        same_shape(lhs, rhs, "div")?;
        let data = lhs.data().iter().zip(rhs.data().iter()).map(|(a, b)| a / b).collect();
        let (l, r) = (lhs.clone(), rhs.clone());
        Ok(self.finish(&[lhs, rhs], || Op::Div { lhs: l, rhs: r }, lhs.shape().to_vec(), data))
    }

    // ── Scalar forms (the only broadcasting in the crate) ───────────────

    pub fn add_scalar(&self, input: &Tensor, value: f64) -> Tensor {
        let data = input.data().iter().map(|a| a + value).collect();
        let i = input.clone();
        self.finish(&[input], || Op::AddScalar { input: i }, input.shape().to_vec(), data)
    }

    pub fn mul_scalar(&self, input: &Tensor, factor: f64) -> Tensor {
        let data = input.data().iter().map(|a| a * factor).collect();
        let i = input.clone();
        self.finish(&[input], || Op::MulScalar { input: i, factor }, input.shape().to_vec(), data)
    }

    pub fn neg(&self, input: &Tensor) -> Tensor {
        self.mul_scalar(input, -1.0)
    }

    /// `value - input`, elementwise.
    pub fn scalar_sub(&self, value: f64, input: &Tensor) -> Tensor {
        self.add_scalar(&self.neg(input), value)
    }

    // ── Elementwise unary ───────────────────────────────────────────────

    pub fn relu(&self, input: &Tensor) -> Tensor {
        let data = input.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let i = input.clone();
        self.finish(&[input], || Op::Relu { input: i }, input.shape().to_vec(), data)
    }

    pub fn sigmoid(&self, input: &Tensor) -> Tensor {
        let data = input.data().iter().map(|&a| sigmoid(a)).collect();
        let i = input.clone();
        self.finish(&[input], || Op::Sigmoid { input: i }, input.shape().to_vec(), data)
    }

    pub fn exp(&self, input: &Tensor) -> Tensor {
        let data = input.data().iter().map(|&a| a.exp()).collect();
        let i = input.clone();
        self.finish(&[input], || Op::Exp { input: i }, input.shape().to_vec(), data)
    }

    /// Natural logarithm. The caller is responsible for keeping the domain
    /// positive; this crate only applies it to sums of exponentials.
    pub fn log(&self, input: &Tensor) -> Tensor {
        let data = input.data().iter().map(|&a| a.ln()).collect();
        let i = input.clone();
        self.finish(&[input], || Op::Log { input: i }, input.shape().to_vec(), data)
    }

    // ── Reductions ──────────────────────────────────────────────────────

    /// Sum of all elements; shape `[1]`.
    pub fn sum_all(&self, input: &Tensor) -> Tensor {
        let total: f64 = input.data().iter().sum();
        let i = input.clone();
        self.finish(&[input], || Op::SumAll { input: i }, vec![1], vec![total])
    }

    /// Mean of all elements; shape `[1]`.
    pub fn mean_all(&self, input: &Tensor) -> Tensor {
        let n = input.numel() as f64;
        let s = self.sum_all(input);
        self.mul_scalar(&s, 1.0 / n)
    }

    /// Sum along one axis, keeping it with extent 1.
    pub fn sum_axis(&self, input: &Tensor, axis: usize) -> Result<Tensor> {
        let shape = input.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::config(format!(
                "sum_axis: axis {axis} out of range for shape {shape:?}"
            )));
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        let x = input.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..axis_len {
                let base = (o * axis_len + a) * inner;
                axpy(&mut data[o * inner..(o + 1) * inner], &x[base..base + inner], 1.0);
            }
        }
        drop(x);
        let i = input.clone();
        Ok(self.finish(&[input], || Op::SumAxis { input: i, axis }, out_shape, data))
    }

    // ── Shape surgery ───────────────────────────────────────────────────

    /// Concatenate along `axis`; all other extents must match. The inverse
    /// is a sequence of `slice` calls along the same axis.
    pub fn concat(&self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::config("concat: at least one input required"));
        }
        let first = parts[0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::config(format!(
                "concat: axis {axis} out of range for shape {first:?}"
            )));
        }
        let mut total_axis = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() {
                return Err(Error::config("concat: rank mismatch between inputs"));
            }
            for (d, (&a, &b)) in first.iter().zip(s.iter()).enumerate() {
                if d != axis && a != b {
                    return Err(Error::config(format!(
                        "concat: non-axis extent mismatch at dim {d}: {first:?} vs {s:?}"
                    )));
                }
            }
            total_axis += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_axis;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; outer * total_axis * inner];
        let mut offset = 0;
        for p in parts {
            let part_axis = p.shape()[axis];
            let src = p.data();
            for o in 0..outer {
                let dst = (o * total_axis + offset) * inner;
                let s = o * part_axis * inner;
                let n = part_axis * inner;
                data[dst..dst + n].copy_from_slice(&src[s..s + n]);
            }
            offset += part_axis;
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(self.finish(parts, || Op::Concat { parts: owned, axis }, out_shape, data))
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, input: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = input.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::config(format!(
                "slice: axis {axis} out of range for shape {shape:?}"
            )));
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::config(format!(
                "slice: range {start}..{} out of bounds for extent {}",
                start + len,
                shape[axis]
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let in_axis = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let x = input.data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * in_axis + start) * inner;
            let dst = o * len * inner;
            let n = len * inner;
            data[dst..dst + n].copy_from_slice(&x[src..src + n]);
        }
        drop(x);
        let i = input.clone();
        Ok(self.finish(&[input], || Op::Slice { input: i, axis, start }, out_shape, data))
    }

    /// Same elements, new shape (element counts must agree).
    pub fn reshape(&self, input: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if new_shape.iter().any(|&d| d == 0) || n != input.numel() {
            return Err(Error::config(format!(
                "reshape: cannot view {:?} as {new_shape:?}",
                input.shape()
            )));
        }
        let data = input.to_vec();
        let i = input.clone();
        Ok(self.finish(&[input], || Op::Reshape { input: i }, new_shape.to_vec(), data))
    }

    /// Reorder axes: output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, input: &Tensor, perm: &[usize]) -> Result<Tensor> {
        let rank = input.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::config(format!(
                "permute: {perm:?} is not a permutation of 0..{rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&d| input.shape()[d]).collect();
        let data = permute_data(&input.data(), input.shape(), perm);
        let i = input.clone();
        let perm_owned = perm.to_vec();
        Ok(self.finish(&[input], || Op::Permute { input: i, perm: perm_owned }, out_shape, data))
    }

    // ── Spatial operations on [B, C, H, W] ──────────────────────────────

    /// 2-D cross-correlation with bias: `input` `[B, Ci, H, W]` with
    /// `kernel` `[Co, Ci, K, K]` and `bias` `[Co]`, zero padding on all
    /// sides. Output extents follow [`conv2d_output_extent`].
    pub fn conv2d(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        bias: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let [b, c_in, h, w] = expect_rank4(input, "conv2d input")?;
        let [c_out, kc, k, k2] = expect_rank4(kernel, "conv2d kernel")?;
        if k != k2 {
            return Err(Error::config(format!("conv2d: kernel must be square, got {k}x{k2}")));
        }
        if kc != c_in {
            return Err(Error::config(format!(
                "conv2d: kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if bias.shape() != [c_out] {
            return Err(Error::config(format!(
                "conv2d: bias shape {:?} does not match {c_out} output channels",
                bias.shape()
            )));
        }
        let oh = conv2d_output_extent(h, k, stride, padding)?;
        let ow = conv2d_output_extent(w, k, stride, padding)?;

        let x = input.data();
        let kd = kernel.data();
        let bd = bias.data();
        let mut out = vec![0.0; b * c_out * oh * ow];
        for bi in 0..b {
            for oc in 0..c_out {
                let out_plane = (bi * c_out + oc) * oh * ow;
                out[out_plane..out_plane + oh * ow].fill(bd[oc]);
                for ic in 0..c_in {
                    let x_plane = (bi * c_in + ic) * h * w;
                    for kh in 0..k {
                        for kw in 0..k {
                            let wgt = kd[((oc * c_in + ic) * k + kh) * k + kw];
                            let (lo, hi) = valid_ox_range(w, ow, stride, padding, kw);
                            if lo >= hi {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * stride + kh) as isize - padding as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                let x_row = &x[x_plane + iy as usize * w..][..w];
                                let out_row = &mut out[out_plane + oy * ow..][..ow];
                                if stride == 1 {
                                    let ix_lo = lo + kw - padding;
                                    axpy(&mut out_row[lo..hi], &x_row[ix_lo..ix_lo + (hi - lo)], wgt);
                                } else {
                                    for ox in lo..hi {
                                        out_row[ox] += wgt * x_row[ox * stride + kw - padding];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        drop(kd);
        drop(bd);
        let (i, kt, bt) = (input.clone(), kernel.clone(), bias.clone());
        Ok(self.finish(
            &[input, kernel, bias],
            || Op::Conv2d { input: i, kernel: kt, bias: bt, stride, padding },
            vec![b, c_out, oh, ow],
            out,
        ))
    }

    /// Transposed 2-D convolution (fractionally-strided upsampling).
    ///
    /// `input` `[B, Ci, H, W]`, `kernel` `[Ci, Co, K, K]`; output extent is
    /// `(H-1)*stride + K - 2*padding`. With `K = stride + 2*padding` that
    /// is exactly `stride * H`, which is how the decoder doubles extents
    /// (`K=2, stride=2, padding=0`). Under this layout the operation is the
    /// exact adjoint of [`Tape::conv2d`]: applying it to an output gradient
    /// with the same (axis-swapped) kernel yields conv2d's input gradient.
    pub fn conv2d_transpose(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let [b, c_in, h, w] = expect_rank4(input, "conv2d_transpose input")?;
        let [kc, c_out, k, k2] = expect_rank4(kernel, "conv2d_transpose kernel")?;
        if k != k2 {
            return Err(Error::config(format!(
                "conv2d_transpose: kernel must be square, got {k}x{k2}"
            )));
        }
        if kc != c_in {
            return Err(Error::config(format!(
                "conv2d_transpose: kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d_transpose stride must be >= 1"));
        }
        let extent = |e: usize| -> Result<usize> {
            let grown = (e - 1) * stride + k;
            if grown <= 2 * padding {
                return Err(Error::config(format!(
                    "conv2d_transpose: padding {padding} consumes the whole {grown} output extent"
                )));
            }
            Ok(grown - 2 * padding)
        };
        let oh = extent(h)?;
        let ow = extent(w)?;

        let x = input.data();
        let kd = kernel.data();
        let mut out = vec![0.0; b * c_out * oh * ow];
        for bi in 0..b {
            for ic in 0..c_in {
                let x_plane = (bi * c_in + ic) * h * w;
                for oc in 0..c_out {
                    let out_plane = (bi * c_out + oc) * oh * ow;
                    for kh in 0..k {
                        for kw in 0..k {
                            let wgt = kd[((ic * c_out + oc) * k + kh) * k + kw];
                            let (lo, hi) = valid_ox_range(ow, w, stride, padding, kw);
                            if lo >= hi {
                                continue;
                            }
                            for iy in 0..h {
                                let oy = (iy * stride + kh) as isize - padding as isize;
                                if oy < 0 || oy as usize >= oh {
                                    continue;
                                }
                                let x_row = &x[x_plane + iy * w..][..w];
                                let out_row = &mut out[out_plane + oy as usize * ow..][..ow];
                                for ix in lo..hi {
                                    out_row[ix * stride + kw - padding] += wgt * x_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        drop(x);
        drop(kd);
        let (i, kt) = (input.clone(), kernel.clone());
        Ok(self.finish(
            &[input, kernel],
            || Op::ConvTranspose2d { input: i, kernel: kt, stride, padding },
            vec![b, c_out, oh, ow],
            out,
        ))
    }

    /// Batch normalization over `[B, C, H, W]` with per-channel `gamma` and
    /// `beta` (shape `[C]`).
    ///
    /// Train mode normalizes with the batch statistics (biased variance)
    /// and folds them into `stats` under its momentum; infer mode applies
    /// the frozen running statistics and leaves `stats` untouched, so each
    /// sample's output is independent of the rest of the batch.
    pub fn batch_norm(
        &self,
        input: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Tensor> {
        let [b, c, h, w] = expect_rank4(input, "batch_norm input")?;
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::config(format!(
                "batch_norm: gamma/beta shapes {:?}/{:?} do not match {c} channels",
                gamma.shape(),
                beta.shape()
            )));
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::config(format!(
                "batch_norm: running stats cover {} channels, input has {c}",
                stats.mean.len()
            )));
        }
        let plane = h * w;
        let m = b * plane;
        let x = input.data();
        let g = gamma.data();
        let bt = beta.data();
        let mut x_hat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];

        match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::config(
                        "batch_norm: train mode needs at least 2 values per channel for statistics",
                    ));
                }
                let mut inv_std = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        sum += x[base..base + plane].iter().sum::<f64>();
                    }
                    let mean = sum / m as f64;
                    let mut var_sum = 0.0;
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        var_sum += x[base..base + plane].iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = var_sum / m as f64;
                    let inv = 1.0 / (var + stats.eps).sqrt();
                    inv_std[ch] = inv;
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        for idx in base..base + plane {
                            let xh = (x[idx] - mean) * inv;
                            x_hat[idx] = xh;
                            out[idx] = g[ch] * xh + bt[ch];
                        }
                    }
                    stats.mean[ch] = stats.momentum * stats.mean[ch] + (1.0 - stats.momentum) * mean;
                    stats.var[ch] = stats.momentum * stats.var[ch] + (1.0 - stats.momentum) * var;
                }
                drop(x);
                drop(g);
                drop(bt);
                let (i, gt, btt) = (input.clone(), gamma.clone(), beta.clone());
                Ok(self.finish(
                    &[input, gamma, beta],
                    move || Op::BatchNormTrain { input: i, gamma: gt, beta: btt, x_hat, inv_std },
                    vec![b, c, h, w],
                    out,
                ))
            }
            Mode::Infer => {
                let mut inv_run = vec![0.0; c];
                for ch in 0..c {
                    let inv = 1.0 / (stats.var[ch] + stats.eps).sqrt();
                    inv_run[ch] = inv;
                    let mean = stats.mean[ch];
                    for bi in 0..b {
                        let base = (bi * c + ch) * plane;
                        for idx in base..base + plane {
                            let xh = (x[idx] - mean) * inv;
                            x_hat[idx] = xh;
                            out[idx] = g[ch] * xh + bt[ch];
                        }
                    }
                }
                drop(x);
                drop(g);
                drop(bt);
                let (i, gt, btt) = (input.clone(), gamma.clone(), beta.clone());
                Ok(self.finish(
                    &[input, gamma, beta],
                    move || Op::BatchNormInfer { input: i, gamma: gt, beta: btt, x_hat, inv_run },
                    vec![b, c, h, w],
                    out,
                ))
            }
        }
    }

    /// Average-pool `[B, C, H, W]` down to `[B, C, target_h, target_w]`.
    /// The target extents must divide the input extents exactly; anything
    /// else is a config error rather than a silent interpolation.
    pub fn spatial_downsample(&self, input: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
        let [b, c, h, w] = expect_rank4(input, "spatial_downsample input")?;
        if target_h == 0 || target_w == 0 || h % target_h != 0 || w % target_w != 0 {
            return Err(Error::config(format!(
                "spatial_downsample: target {target_h}x{target_w} does not divide input {h}x{w}"
            )));
        }
        let (fh, fw) = (h / target_h, w / target_w);
        let x = input.data();
        let scale = 1.0 / (fh * fw) as f64;
        let mut out = vec![0.0; b * c * target_h * target_w];
        for plane_idx in 0..b * c {
            let in_plane = plane_idx * h * w;
            let out_plane = plane_idx * target_h * target_w;
            for ty in 0..target_h {
                for tx in 0..target_w {
                    let mut acc = 0.0;
                    for dy in 0..fh {
                        let row = in_plane + (ty * fh + dy) * w + tx * fw;
                        acc += x[row..row + fw].iter().sum::<f64>();
                    }
                    out[out_plane + ty * target_w + tx] = acc * scale;
                }
            }
        }
        drop(x);
        let i = input.clone();
        Ok(self.finish(
            &[input],
            || Op::AvgPool2d { input: i, fh, fw },
            vec![b, c, target_h, target_w],
            out,
        ))
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`] on the open interval (0, 1).
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[cfg(test)]
mod tests {
    use super::super::{Mode, Tape, Tensor};
    use super::{conv2d_output_extent, RunningStats};

    fn ramp(n: usize) -> Vec<f64> {
        (1..=n).map(|v| v as f64).collect()
    }

    #[test]
    fn conv2d_identity_kernel_reproduces_input() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 1, 3, 3], ramp(9)).unwrap();
        let k = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = tape.conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.to_vec(), ramp(9));
    }

    #[test]
    fn conv2d_ones_kernel_padded_matches_hand_computed_sums() {
        // 3x3 ramp, 3x3 ones kernel, stride 1, padding 1: each output is
        // the sum of the zero-padded 3x3 neighborhood.
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 1, 3, 3], ramp(9)).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = tape.conv2d(&x, &k, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(
            y.to_vec(),
            vec![12.0, 21.0, 16.0, 27.0, 45.0, 33.0, 24.0, 39.0, 28.0]
        );
    }

    #[test]
    fn conv2d_all_ones_3x3_with_ramp_gives_scalar_sum() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 1, 3, 3], ramp(9)).unwrap();
        let k = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        let y = tape.conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 45.0);
    }

    #[test]
    fn conv2d_stride2_halves_even_extents() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[2, 3, 8, 8]).unwrap();
        let k = Tensor::zeros(&[5, 3, 3, 3]).unwrap();
        let b = Tensor::zeros(&[5]).unwrap();
        let y = tape.conv2d(&x, &k, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[2, 5, 4, 4]);
        assert_eq!(conv2d_output_extent(8, 3, 2, 1).unwrap(), 4);
    }

    #[test]
    fn conv2d_bias_broadcasts_per_output_channel() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        let k = Tensor::zeros(&[2, 1, 1, 1]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap();
        let y = tape.conv2d(&x, &k, &b, 1, 0).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 0.5, 0.5, 0.5, -1.5, -1.5, -1.5, -1.5]);
    }

    #[test]
    fn conv2d_rejects_kernel_larger_than_padded_input() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[1, 1, 2, 2]).unwrap();
        let k = Tensor::zeros(&[1, 1, 5, 5]).unwrap();
        let b = Tensor::zeros(&[1]).unwrap();
        assert!(tape.conv2d(&x, &k, &b, 1, 0).is_err());
    }

    #[test]
    fn conv2d_transpose_broadcasts_single_value() {
        // One input value v with a 2x2 ones kernel at stride 2 paints a
        // 2x2 block of v.
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let k = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0; 4]).unwrap();
        let y = tape.conv2d_transpose(&x, &k, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![3.0; 4]);
    }

    #[test]
    fn conv2d_transpose_doubles_extents_with_k2_s2() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[1, 4, 5, 7]).unwrap();
        let k = Tensor::zeros(&[4, 2, 2, 2]).unwrap();
        let y = tape.conv2d_transpose(&x, &k, 2, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 10, 14]);
    }

    #[test]
    fn conv2d_transpose_is_adjoint_of_conv2d_input_gradient() {
        // Feeding an upstream gradient through conv2d's backward and
        // through conv2d_transpose with the same kernel must agree.
        let tape = Tape::new();
        let x = Tensor::param(&[1, 2, 5, 5], (0..50).map(|v| (v as f64) * 0.1 - 2.0).collect()).unwrap();
        let k_data: Vec<f64> = (0..2 * 3 * 9).map(|v| ((v * 7 % 11) as f64) * 0.3 - 1.0).collect();
        let k = Tensor::from_vec(&[3, 2, 3, 3], k_data.clone()).unwrap();
        let b = Tensor::zeros(&[3]).unwrap();
        let y = tape.conv2d(&x, &k, &b, 1, 1).unwrap();
        let loss = tape.sum_all(&y);
        tape.backward(&loss).unwrap();
        let via_backward = x.grad().unwrap();

        // sum_all's upstream gradient is all-ones over y's shape. The
        // transpose kernel layout [Ci, Co, K, K] takes Ci = conv's Co, so
        // the conv kernel's buffer is reused as-is — the leading pair of
        // axes lines up positionally ([3, 2, 3, 3] both ways here).
        let ones = Tensor::from_vec(y.shape(), vec![1.0; y.numel()]).unwrap();
        let kt = Tensor::from_vec(&[3, 2, 3, 3], k_data).unwrap();
        let tape2 = Tape::inference();
        let via_transpose = tape2.conv2d_transpose(&ones, &kt, 1, 1).unwrap();
        for (a, b) in via_backward.iter().zip(via_transpose.to_vec()) {
            assert!((a - b).abs() < 1e-12, "adjoint mismatch: {a} vs {b}");
        }
    }

    #[test]
    fn batch_norm_train_normalizes_and_updates_running_stats() {
        let tape = Tape::new();
        // One channel, 4 values: mean 2.5, biased var 1.25.
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut stats = RunningStats::new(1);
        let y = tape.batch_norm(&x, &gamma, &beta, &mut stats, Mode::Train).unwrap();
        let out = y.to_vec();
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((stats.mean[0] - (0.9 * 0.0 + 0.1 * 2.5)).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 * 1.0 + 0.1 * 1.25)).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_infer_matches_frozen_affine_oracle() {
        let tape = Tape::inference();
        let x = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let gamma = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        let mut stats = RunningStats::new(1);
        stats.mean[0] = 1.5;
        stats.var[0] = 4.0;
        let y = tape.batch_norm(&x, &gamma, &beta, &mut stats, Mode::Infer).unwrap();
        let inv = 1.0 / (4.0f64 + 1e-5).sqrt();
        for (v, x_orig) in y.to_vec().iter().zip([1.0, 2.0, 3.0]) {
            let expect = 2.0 * (x_orig - 1.5) * inv + 0.5;
            assert!((v - expect).abs() < 1e-12);
        }
        // Infer mode must not move the running statistics.
        assert_eq!(stats.mean[0], 1.5);
        assert_eq!(stats.var[0], 4.0);
    }

    #[test]
    fn batch_norm_train_rejects_single_element_statistics() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let gamma = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let beta = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let mut stats = RunningStats::new(1);
        assert!(tape.batch_norm(&x, &gamma, &beta, &mut stats, Mode::Train).is_err());
    }

    #[test]
    fn spatial_downsample_averages_blocks() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 1, 4, 4], ramp(16)).unwrap();
        let y = tape.spatial_downsample(&x, 2, 2).unwrap();
        // Block means of a 1..16 ramp.
        assert_eq!(y.to_vec(), vec![3.5, 5.5, 11.5, 13.5]);
    }

    #[test]
    fn spatial_downsample_rejects_indivisible_extents() {
        let tape = Tape::new();
        let x = Tensor::zeros(&[1, 1, 6, 6]).unwrap();
        assert!(tape.spatial_downsample(&x, 4, 4).is_err());
        assert!(tape.spatial_downsample(&x, 3, 3).is_ok());
    }

    #[test]
    fn concat_then_slice_recovers_both_operands() {
        let tape = Tape::new();
        let a = Tensor::from_vec(&[1, 2, 2, 2], ramp(8)).unwrap();
        let b = Tensor::from_vec(&[1, 3, 2, 2], (9..=20).map(|v| v as f64).collect()).unwrap();
        let cat = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(cat.shape(), &[1, 5, 2, 2]);
        let a2 = tape.slice(&cat, 1, 0, 2).unwrap();
        let b2 = tape.slice(&cat, 1, 2, 3).unwrap();
        assert_eq!(a2.to_vec(), a.to_vec());
        assert_eq!(b2.to_vec(), b.to_vec());
    }

    #[test]
    fn permute_moves_channels_last() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // [B, C, H, W] -> [B, H, W, C]
        let y = tape.permute(&x, &[0, 2, 3, 1]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_vec(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn sum_axis_keeps_reduced_axis() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[2, 3], ramp(6)).unwrap();
        let y = tape.sum_axis(&x, 1).unwrap();
        assert_eq!(y.shape(), &[2, 1]);
        assert_eq!(y.to_vec(), vec![6.0, 15.0]);
        let z = tape.sum_axis(&x, 0).unwrap();
        assert_eq!(z.shape(), &[1, 3]);
        assert_eq!(z.to_vec(), vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn elementwise_ops_require_equal_shapes() {
        let tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]).unwrap();
        let b = Tensor::zeros(&[3, 2]).unwrap();
        assert!(tape.add(&a, &b).is_err());
        assert!(tape.mul(&a, &b).is_err());
    }

    #[test]
    fn relu_zeroes_negatives_only() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[4], vec![-2.0, -0.0, 1.5, 3.0]).unwrap();
        let y = tape.relu(&x);
        assert_eq!(y.to_vec(), vec![0.0, 0.0, 1.5, 3.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let tape = Tape::new();
        let x = Tensor::from_vec(&[3], vec![-800.0, 0.0, 800.0]).unwrap();
        let y = tape.sigmoid(&x).to_vec();
        assert_eq!(y[0], 0.0);
        assert_eq!(y[1], 0.5);
        assert_eq!(y[2], 1.0);
    }

    #[test]
    fn logit_inverts_sigmoid_in_the_interior() {
        for &v in &[-6.0, -1.0, 0.0, 0.5, 4.0] {
            let p = super::sigmoid(v);
            assert!((super::logit(p) - v).abs() < 1e-12);
        }
    }
}
