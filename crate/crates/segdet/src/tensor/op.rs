//! Backward rules for every recorded operation.
//!
//! Each [`Op`] variant owns handles to the tensors its backward pass needs
//! (inputs, and for a few ops cached statistics from the forward pass).
//! `backward` receives the upstream gradient together with the recorded
//! output tensor, computes one contribution per differentiable input, and
//! hands them to the [`GradSink`]. Contributions are fully materialized
//! *before* any of them is accumulated, so an op may legitimately receive
//! the same tensor for two of its inputs.

use super::{GradSink, Tensor};

pub(super) enum Op {
    Conv2d {
        input: Tensor,
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Tensor,
        kernel: Tensor,
        stride: usize,
        padding: usize,
    },
    /// Train-mode batch normalization; caches the normalized activations
    /// and the per-channel inverse standard deviation of the batch.
    BatchNormTrain {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        x_hat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Infer-mode batch normalization is an affine map with frozen
    /// statistics; caches the running-stat-normalized activations.
    BatchNormInfer {
        input: Tensor,
        gamma: Tensor,
        beta: Tensor,
        x_hat: Vec<f64>,
        inv_run: Vec<f64>,
    },
    Relu { input: Tensor },
    Sigmoid { input: Tensor },
    Exp { input: Tensor },
    Log { input: Tensor },
    Add { lhs: Tensor, rhs: Tensor },
    Sub { lhs: Tensor, rhs: Tensor },
    Mul { lhs: Tensor, rhs: Tensor },
    Div { lhs: Tensor, rhs: Tensor },
    AddScalar { input: Tensor },
    MulScalar { input: Tensor, factor: f64 },
    SumAll { input: Tensor },
    SumAxis { input: Tensor, axis: usize },
    Concat { parts: Vec<Tensor>, axis: usize },
    Slice { input: Tensor, axis: usize, start: usize },
    Reshape { input: Tensor },
    Permute { input: Tensor, perm: Vec<usize> },
    AvgPool2d { input: Tensor, fh: usize, fw: usize },
}

/// `dst += a * src`, the elementwise workhorse of the conv loops.
#[inline]
pub(super) fn axpy(dst: &mut [f64], src: &[f64], a: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

#[inline]
pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Range of output columns `ox` for which `ox*stride + kw - padding` lands
/// inside `[0, in_w)`, clipped to `[0, out_w)`. Shared by every conv loop.
#[inline]
pub(super) fn valid_ox_range(in_w: usize, out_w: usize, stride: usize, padding: usize, kw: usize) -> (usize, usize) {
    let lo = if padding > kw {
        (padding - kw + stride - 1) / stride
    } else {
        0
    };
    let top = in_w - 1 + padding;
    if top < kw {
        return (0, 0);
    }
    let hi = ((top - kw) / stride + 1).min(out_w);
    (lo.min(hi), hi)
}

pub(super) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

pub(super) fn permute_data(input: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&d| in_shape[d]).collect();
    let mut out = vec![0.0; input.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut flat = 0;
        for d in 0..rank {
            flat += idx[d] * in_strides[perm[d]];
        }
        *slot = input[flat];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

impl Op {
    pub(super) fn backward(&self, grad_out: &[f64], output: &Tensor, sink: &mut GradSink<'_>) {
        match self {
            Op::Conv2d { input, kernel, bias, stride, padding } => {
                backward_conv2d(input, kernel, bias, *stride, *padding, grad_out, output, sink);
            }
            Op::ConvTranspose2d { input, kernel, stride, padding } => {
                backward_conv_transpose2d(input, kernel, *stride, *padding, grad_out, output, sink);
            }
            Op::BatchNormTrain { input, gamma, beta, x_hat, inv_std } => {
                backward_batch_norm_train(input, gamma, beta, x_hat, inv_std, grad_out, sink);
            }
            Op::BatchNormInfer { input, gamma, beta, x_hat, inv_run } => {
                backward_batch_norm_infer(input, gamma, beta, x_hat, inv_run, grad_out, sink);
            }
            Op::Relu { input } => {
                let x = input.data();
                let contrib: Vec<f64> = x
                    .iter()
                    .zip(grad_out)
                    .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
                    .collect();
                drop(x);
                sink.add(input, contrib);
            }
            Op::Sigmoid { input } => {
                let y = output.data();
                let contrib: Vec<f64> = y.iter().zip(grad_out).map(|(&yi, &g)| g * yi * (1.0 - yi)).collect();
                drop(y);
                sink.add(input, contrib);
            }
            Op::Exp { input } => {
                let y = output.data();
                let contrib: Vec<f64> = y.iter().zip(grad_out).map(|(&yi, &g)| g * yi).collect();
                drop(y);
                sink.add(input, contrib);
            }
            Op::Log { input } => {
                let x = input.data();
                let contrib: Vec<f64> = x.iter().zip(grad_out).map(|(&xi, &g)| g / xi).collect();
                drop(x);
                sink.add(input, contrib);
            }
            Op::Add { lhs, rhs } => {
                sink.add(lhs, grad_out.to_vec());
                sink.add(rhs, grad_out.to_vec());
            }
            Op::Sub { lhs, rhs } => {
                sink.add(lhs, grad_out.to_vec());
                sink.add(rhs, grad_out.iter().map(|g| -g).collect());
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (lhs.data(), rhs.data());
                let da: Vec<f64> = grad_out.iter().zip(b.iter()).map(|(g, &bv)| g * bv).collect();
                let db: Vec<f64> = grad_out.iter().zip(a.iter()).map(|(g, &av)| g * av).collect();
                drop(a);
                drop(b);
                sink.add(lhs, da);
                sink.add(rhs, db);
            }
            Op::Div { lhs, rhs } => {
                let (a, b) = (lhs.data(), rhs.data());
                let da: Vec<f64> = grad_out.iter().zip(b.iter()).map(|(g, &bv)| g / bv).collect();
                let db: Vec<f64> = grad_out
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(g, (&av, &bv))| -g * av / (bv * bv))
                    .collect();
                drop(a);
                drop(b);
                sink.add(lhs, da);
                sink.add(rhs, db);
            }
            Op::AddScalar { input } => {
                sink.add(input, grad_out.to_vec());
            }
            Op::MulScalar { input, factor } => {
                sink.add(input, grad_out.iter().map(|g| g * factor).collect());
            }
            Op::SumAll { input } => {
                sink.add(input, vec![grad_out[0]; input.numel()]);
            }
            Op::SumAxis { input, axis } => {
                let shape = input.shape().to_vec();
                let axis_len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let mut contrib = vec![0.0; input.numel()];
                for o in 0..outer {
                    let g_base = o * inner;
                    for a in 0..axis_len {
                        let x_base = (o * axis_len + a) * inner;
                        contrib[x_base..x_base + inner].copy_from_slice(&grad_out[g_base..g_base + inner]);
                    }
                }
                sink.add(input, contrib);
            }
            Op::Concat { parts, axis } => {
                let out_shape = output.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0;
                for part in parts {
                    let part_axis = part.shape()[*axis];
                    let mut contrib = vec![0.0; part.numel()];
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * part_axis * inner;
                        let n = part_axis * inner;
                        contrib[dst..dst + n].copy_from_slice(&grad_out[src..src + n]);
                    }
                    offset += part_axis;
                    sink.add(part, contrib);
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = input.shape().to_vec();
                let out_axis = output.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let in_axis = in_shape[*axis];
                let mut contrib = vec![0.0; input.numel()];
                for o in 0..outer {
                    let dst = (o * in_axis + start) * inner;
                    let src = o * out_axis * inner;
                    let n = out_axis * inner;
                    contrib[dst..dst + n].copy_from_slice(&grad_out[src..src + n]);
                }
                sink.add(input, contrib);
            }
            Op::Reshape { input } => {
                sink.add(input, grad_out.to_vec());
            }
            Op::Permute { input, perm } => {
                // Gradient flows back through the inverse permutation.
                let mut inv = vec![0usize; perm.len()];
                for (d, &p) in perm.iter().enumerate() {
                    inv[p] = d;
                }
                let contrib = permute_data(grad_out, output.shape(), &inv);
                sink.add(input, contrib);
            }
            Op::AvgPool2d { input, fh, fw } => {
                let [b, c, h, w] = four(input.shape());
                let (th, tw) = (h / fh, w / fw);
                let scale = 1.0 / (fh * fw) as f64;
                let mut contrib = vec![0.0; input.numel()];
                for bi in 0..b * c {
                    let in_plane = bi * h * w;
                    let out_plane = bi * th * tw;
                    for ty in 0..th {
                        for tx in 0..tw {
                            let g = grad_out[out_plane + ty * tw + tx] * scale;
                            for dy in 0..*fh {
                                let row = in_plane + (ty * fh + dy) * w + tx * fw;
                                for slot in &mut contrib[row..row + *fw] {
                                    *slot += g;
                                }
                            }
                        }
                    }
                }
                sink.add(input, contrib);
            }
        }
    }
}

#[inline]
fn four(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

#[allow(clippy::too_many_arguments)]
fn backward_conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &[f64],
    output: &Tensor,
    sink: &mut GradSink<'_>,
) {
    let [b, c_in, h, w] = four(input.shape());
    let [c_out, _, k, _] = four(kernel.shape());
    let [_, _, oh, ow] = four(output.shape());
    let x = input.data();
    let kd = kernel.data();

    // d(bias): plain sum of the upstream gradient over batch and space.
    let mut d_bias = vec![0.0; c_out];
    for bi in 0..b {
        for oc in 0..c_out {
            let base = (bi * c_out + oc) * oh * ow;
            d_bias[oc] += grad_out[base..base + oh * ow].iter().sum::<f64>();
        }
    }

    // d(input): scatter each output-gradient row back through the kernel,
    // mirroring the forward loop structure (and its valid ranges) exactly.
    let mut d_input = vec![0.0; input.numel()];
    for bi in 0..b {
        for oc in 0..c_out {
            let go_plane = (bi * c_out + oc) * oh * ow;
            for ic in 0..c_in {
                let dx_plane = (bi * c_in + ic) * h * w;
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
                            let go_row = &grad_out[go_plane + oy * ow..][..ow];
                            let dx_row = &mut d_input[dx_plane + iy as usize * w..][..w];
                            if stride == 1 {
                                // ix = ox + kw - padding; lo already clips ox
                                // so that ix_lo is non-negative.
                                let ix_lo = lo + kw - padding;
                                axpy(&mut dx_row[ix_lo..ix_lo + (hi - lo)], &go_row[lo..hi], wgt);
                            } else {
                                for ox in lo..hi {
                                    let ix = ox * stride + kw - padding;
                                    dx_row[ix] += wgt * go_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    // d(kernel): correlation of the input with the output gradient.
    let mut d_kernel = vec![0.0; kernel.numel()];
    for oc in 0..c_out {
        for ic in 0..c_in {
            for kh in 0..k {
                for kw in 0..k {
                    let (lo, hi) = valid_ox_range(w, ow, stride, padding, kw);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for bi in 0..b {
                        let go_plane = (bi * c_out + oc) * oh * ow;
                        let x_plane = (bi * c_in + ic) * h * w;
                        for oy in 0..oh {
                            let iy = (oy * stride + kh) as isize - padding as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            let go_row = &grad_out[go_plane + oy * ow..][..ow];
                            let x_row = &x[x_plane + iy as usize * w..][..w];
                            if stride == 1 {
                                let ix_lo = lo + kw - padding;
                                acc += dot(&go_row[lo..hi], &x_row[ix_lo..ix_lo + (hi - lo)]);
                            } else {
                                for ox in lo..hi {
                                    acc += go_row[ox] * x_row[ox * stride + kw - padding];
                                }
                            }
                        }
                    }
                    d_kernel[((oc * c_in + ic) * k + kh) * k + kw] = acc;
                }
            }
        }
    }

    drop(x);
    drop(kd);
    sink.add(input, d_input);
    sink.add(kernel, d_kernel);
    sink.add(bias, d_bias);
}

fn backward_conv_transpose2d(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &[f64],
    output: &Tensor,
    sink: &mut GradSink<'_>,
) {
    let [b, c_in, h, w] = four(input.shape());
    let [_, c_out, k, _] = four(kernel.shape());
    let [_, _, oh, ow] = four(output.shape());
    let x = input.data();
    let kd = kernel.data();

    // d(input): gather back from the output positions this input fed,
    // which are exactly the positions the forward scatter wrote.
    let mut d_input = vec![0.0; input.numel()];
    let mut d_kernel = vec![0.0; kernel.numel()];
    for bi in 0..b {
        for ic in 0..c_in {
            let x_plane = (bi * c_in + ic) * h * w;
            for oc in 0..c_out {
                let go_plane = (bi * c_out + oc) * oh * ow;
                for kh in 0..k {
                    for kw in 0..k {
                        let kidx = ((ic * c_out + oc) * k + kh) * k + kw;
                        let wgt = kd[kidx];
                        let (lo, hi) = valid_ox_range(ow, w, stride, padding, kw);
                        if lo >= hi {
                            continue;
                        }
                        let mut k_acc = 0.0;
                        for iy in 0..h {
                            let oy = (iy * stride + kh) as isize - padding as isize;
                            if oy < 0 || oy as usize >= oh {
                                continue;
                            }
                            let go_row = &grad_out[go_plane + oy as usize * ow..][..ow];
                            let x_row = &x[x_plane + iy * w..][..w];
                            let dx_row = &mut d_input[x_plane + iy * w..][..w];
                            for ix in lo..hi {
                                let ox = ix * stride + kw - padding;
                                dx_row[ix] += wgt * go_row[ox];
                                k_acc += x_row[ix] * go_row[ox];
                            }
                        }
                        d_kernel[kidx] += k_acc;
                    }
                }
            }
        }
    }

    drop(x);
    drop(kd);
    sink.add(input, d_input);
    sink.add(kernel, d_kernel);
}

fn backward_batch_norm_train(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    x_hat: &[f64],
    inv_std: &[f64],
    grad_out: &[f64],
    sink: &mut GradSink<'_>,
) {
    let [b, c, h, w] = four(input.shape());
    let plane = h * w;
    let m = (b * plane) as f64;
    let g = gamma.data();

    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let go = &grad_out[base..base + plane];
            let xh = &x_hat[base..base + plane];
            d_beta[ch] += go.iter().sum::<f64>();
            d_gamma[ch] += dot(go, xh);
        }
    }

    // dx = (gamma * inv_std / m) * (m*dy - sum(dy) - x_hat * sum(dy*x_hat))
    let mut d_input = vec![0.0; input.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let coef = g[ch] * inv_std[ch] / m;
            let (sum_dy, sum_dy_xh) = (d_beta[ch], d_gamma[ch]);
            for i in 0..plane {
                let dy = grad_out[base + i];
                d_input[base + i] = coef * (m * dy - sum_dy - x_hat[base + i] * sum_dy_xh);
            }
        }
    }

    drop(g);
    sink.add(input, d_input);
    sink.add(gamma, d_gamma);
    sink.add(beta, d_beta);
}

fn backward_batch_norm_infer(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    x_hat: &[f64],
    inv_run: &[f64],
    grad_out: &[f64],
    sink: &mut GradSink<'_>,
) {
    let [b, c, h, w] = four(input.shape());
    let plane = h * w;
    let g = gamma.data();

    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    let mut d_input = vec![0.0; input.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * plane;
            let go = &grad_out[base..base + plane];
            let xh = &x_hat[base..base + plane];
            d_beta[ch] += go.iter().sum::<f64>();
            d_gamma[ch] += dot(go, xh);
            let coef = g[ch] * inv_run[ch];
            for i in 0..plane {
                d_input[base + i] = go[i] * coef;
            }
        }
    }

    drop(g);
    sink.add(input, d_input);
    sink.add(gamma, d_gamma);
    sink.add(beta, d_beta);
}
