//! Encoder–decoder segmentation network with a multi-scale feature tap.
//!
//! The network follows the familiar hourglass layout: an encoder that halves
//! the spatial extent per stage using stride-2 convolutions (no pooling), a
//! bottleneck, and a decoder that mirrors the encoder with transposed
//! convolutions and skip concatenations. Every convolution is followed by
//! batch normalization and a ReLU. A final 1×1 convolution plus sigmoid
//! produces the soft mask.
//!
//! Besides the mask, [`SegNet::forward`] returns a second output: the
//! bottleneck activation concatenated with every decoder stage output
//! average-pooled down to the bottleneck grid. This "feature tap" is a
//! multi-scale summary of the same activations that produce the mask, and it
//! is what the detection head consumes — detection rides on segmentation
//! features instead of a separate backbone.
//!
//! The soft-overlap loss lives here too ([`seg_loss`] and its per-image
//! weighted variant), since it is the network's native training signal.

use std::cell::RefCell;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Mode, RunningStats, Tape, Tensor};

/// Architecture hyper-parameters. All layer shapes derive from these.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    /// Input images are `input_size` × `input_size` pixels (power of two).
    pub input_size: usize,
    /// Image channels (1 for grayscale, 3 for color).
    pub in_channels: usize,
    /// Number of downsampling stages; the bottleneck sits at
    /// `input_size / 2^depth`.
    pub depth: usize,
    /// Channel count of the first stage.
    pub base_channels: usize,
    /// Multiplicative channel growth per downsampling.
    pub channel_growth: usize,
    /// Spatial extent of the main convolution kernels (odd).
    pub kernel_size: usize,
}

impl Default for SegNetConfig {
    fn default() -> SegNetConfig {
        SegNetConfig {
            input_size: 64,
            in_channels: 1,
            depth: 3,
            base_channels: 8,
            channel_growth: 2,
            kernel_size: 3,
        }
    }
}

impl SegNetConfig {
    /// Validate the invariants the layer-shape arithmetic relies on.
    pub fn validate(&self) -> Result<()> {
        if !self.input_size.is_power_of_two() {
            return Err(Error::config(format!(
                "input_size must be a power of two, got {}",
                self.input_size
            )));
        }
        if self.depth == 0 {
            return Err(Error::config("depth must be at least 1"));
        }
        if self.input_size >> self.depth < 2 {
            return Err(Error::config(format!(
                "input_size {} leaves a bottleneck smaller than 2×2 at depth {}",
                self.input_size, self.depth
            )));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.channel_growth == 0 {
            return Err(Error::config("channel_growth must be positive"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config(format!(
                "kernel_size must be odd so padding can preserve extents, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Channels of stage `level` (0 = full resolution, `depth` = bottleneck).
    pub fn stage_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_growth.pow(level as u32)
    }

    /// Spatial extent of the bottleneck (and of the feature tap).
    pub fn grid_size(&self) -> usize {
        self.input_size >> self.depth
    }

    /// Channel count of the feature tap: bottleneck plus one entry per
    /// decoder stage.
    pub fn feature_channels(&self) -> usize {
        let mut n = self.stage_channels(self.depth);
        for level in 0..self.depth {
            n += self.stage_channels(level);
        }
        n
    }
}

/// The two outputs of a forward pass.
pub struct SegNetOutput {
    /// Soft mask in (0,1), shape `[B, 1, input_size, input_size]`.
    pub soft_mask: Tensor,
    /// Multi-scale feature tap, shape `[B, N, S, S]` with
    /// `N = feature_channels()` and `S = grid_size()`.
    pub features: Tensor,
}

/// Convolution → batch norm → ReLU, the only block the network is made of.
struct ConvBlock {
    kernel: Tensor,
    bias: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RefCell<RunningStats>,
    stride: usize,
    padding: usize,
}

impl ConvBlock {
    fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> ConvBlock {
        let weights = init_conv_kernel(rng, &[c_out, c_in, kernel, kernel]);
        ConvBlock {
            kernel: weights,
            bias: Tensor::param(&[c_out], vec![0.0; c_out]).expect("bias shape"),
            gamma: Tensor::param(&[c_out], vec![1.0; c_out]).expect("gamma shape"),
            beta: Tensor::param(&[c_out], vec![0.0; c_out]).expect("beta shape"),
            stats: RefCell::new(RunningStats::new(c_out)),
            stride,
            padding,
        }
    }

    fn forward(&self, tape: &Tape, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let conv = tape.conv2d(input, &self.kernel, &self.bias, self.stride, self.padding)?;
        let normed = tape.batch_norm(
            &conv,
            &self.gamma,
            &self.beta,
            &mut self.stats.borrow_mut(),
            mode,
        )?;
        Ok(tape.relu(&normed))
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.kernel"), self.kernel.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

/// Transposed convolution (2×2, stride 2) → batch norm → ReLU: one
/// resolution doubling in the decoder.
struct UpBlock {
    kernel: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RefCell<RunningStats>,
}

impl UpBlock {
    fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> UpBlock {
        UpBlock {
            kernel: init_conv_kernel(rng, &[c_in, c_out, 2, 2]),
            gamma: Tensor::param(&[c_out], vec![1.0; c_out]).expect("gamma shape"),
            beta: Tensor::param(&[c_out], vec![0.0; c_out]).expect("beta shape"),
            stats: RefCell::new(RunningStats::new(c_out)),
        }
    }

    fn forward(&self, tape: &Tape, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let up = tape.conv2d_transpose(input, &self.kernel, 2, 0)?;
        let normed = tape.batch_norm(
            &up,
            &self.gamma,
            &self.beta,
            &mut self.stats.borrow_mut(),
            mode,
        )?;
        Ok(tape.relu(&normed))
    }

    fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.kernel"), self.kernel.clone()));
        out.push((format!("{prefix}.gamma"), self.gamma.clone()));
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

struct EncoderStage {
    /// Stride-2 convolution that halves the extent.
    down: ConvBlock,
    convs: [ConvBlock; 2],
}

struct DecoderStage {
    up: UpBlock,
    /// First conv absorbs the skip concatenation (2·C → C), second refines.
    convs: [ConvBlock; 2],
}

/// The segmentation network. Parameters are created once in [`SegNet::build`]
/// and shared by handle thereafter, so optimizer updates are visible to
/// every forward pass.
pub struct SegNet {
    config: SegNetConfig,
    stem: [ConvBlock; 2],
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    mask_kernel: Tensor,
    mask_bias: Tensor,
}

impl SegNet {
    /// Build a network with deterministic parameter initialization: kernel
    /// weights from a fan-in-scaled truncated normal, biases and batch-norm
    /// shifts zero, batch-norm scales one.
    pub fn build(config: &SegNetConfig, seed: u64) -> Result<SegNet> {
        config.validate()?;
        let mut rng = crate::rng::seeded(seed);
        let k = config.kernel_size;
        let pad = k / 2;

        let stem = [
            ConvBlock::new(
                &mut rng,
                config.in_channels,
                config.stage_channels(0),
                k,
                1,
                pad,
            ),
            ConvBlock::new(
                &mut rng,
                config.stage_channels(0),
                config.stage_channels(0),
                k,
                1,
                pad,
            ),
        ];

        let mut encoder = Vec::with_capacity(config.depth);
        for level in 1..=config.depth {
            let c_in = config.stage_channels(level - 1);
            let c_out = config.stage_channels(level);
            encoder.push(EncoderStage {
                down: ConvBlock::new(&mut rng, c_in, c_out, 3, 2, 1),
                convs: [
                    ConvBlock::new(&mut rng, c_out, c_out, k, 1, pad),
                    ConvBlock::new(&mut rng, c_out, c_out, k, 1, pad),
                ],
            });
        }

        // Decoder stages are stored deepest-first; `level` is the resolution
        // they restore (depth-1 down to 0).
        let mut decoder = Vec::with_capacity(config.depth);
        for level in (0..config.depth).rev() {
            let c_in = config.stage_channels(level + 1);
            let c_out = config.stage_channels(level);
            decoder.push(DecoderStage {
                up: UpBlock::new(&mut rng, c_in, c_out),
                convs: [
                    ConvBlock::new(&mut rng, 2 * c_out, c_out, k, 1, pad),
                    ConvBlock::new(&mut rng, c_out, c_out, k, 1, pad),
                ],
            });
        }

        let c0 = config.stage_channels(0);
        let mask_kernel = init_conv_kernel(&mut rng, &[1, c0, 1, 1]);
        let mask_bias = Tensor::param(&[1], vec![0.0]).expect("bias shape");

        Ok(SegNet {
            config: config.clone(),
            stem,
            encoder,
            decoder,
            mask_kernel,
            mask_bias,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    /// Spatial extent of the feature tap.
    pub fn grid_size(&self) -> usize {
        self.config.grid_size()
    }

    /// Channel count of the feature tap.
    pub fn feature_channels(&self) -> usize {
        self.config.feature_channels()
    }

    /// Run the network. Both outputs come from one pass over a shared trunk.
    pub fn forward(&self, tape: &Tape, images: &Tensor, mode: Mode) -> Result<SegNetOutput> {
        self.forward_with_skip_gain(tape, images, mode, 1.0)
    }

    /// [`SegNet::forward`] with every skip tensor scaled by `skip_gain`
    /// before concatenation. Gain 1.0 is the network proper; gain 0.0
    /// ablates the skips — a diagnostic for catching wiring mistakes, since
    /// a correctly connected network must change its output.
    pub fn forward_with_skip_gain(
        &self,
        tape: &Tape,
        images: &Tensor,
        mode: Mode,
        skip_gain: f64,
    ) -> Result<SegNetOutput> {
        let shape = images.shape();
        if shape.len() != 4
            || shape[1] != self.config.in_channels
            || shape[2] != self.config.input_size
            || shape[3] != self.config.input_size
        {
            return Err(Error::config(format!(
                "expected images of shape [B, {}, {}, {}], got {:?}",
                self.config.in_channels, self.config.input_size, self.config.input_size, shape
            )));
        }

        let mut x = self.stem[0].forward(tape, images, mode)?;
        x = self.stem[1].forward(tape, &x, mode)?;

        let mut skips = Vec::with_capacity(self.config.depth);
        for stage in &self.encoder {
            skips.push(x.clone());
            x = stage.down.forward(tape, &x, mode)?;
            x = stage.convs[0].forward(tape, &x, mode)?;
            x = stage.convs[1].forward(tape, &x, mode)?;
        }

        // Bottleneck first; decoder outputs append in deepest-first order.
        let mut taps = vec![x.clone()];
        for (stage, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            x = stage.up.forward(tape, &x, mode)?;
            let skip = if skip_gain == 1.0 {
                skip.clone()
            } else {
                tape.mul_scalar(skip, skip_gain)
            };
            x = tape.concat(&[&x, &skip], 1)?;
            x = stage.convs[0].forward(tape, &x, mode)?;
            x = stage.convs[1].forward(tape, &x, mode)?;
            taps.push(x.clone());
        }

        let logits = tape.conv2d(&x, &self.mask_kernel, &self.mask_bias, 1, 0)?;
        let soft_mask = tape.sigmoid(&logits);

        let s = self.grid_size();
        let mut pooled = Vec::with_capacity(taps.len());
        for tap in &taps {
            if tap.shape()[2] == s {
                pooled.push(tap.clone());
            } else {
                pooled.push(tape.spatial_downsample(tap, s, s)?);
            }
        }
        let refs: Vec<&Tensor> = pooled.iter().collect();
        let features = tape.concat(&refs, 1)?;

        Ok(SegNetOutput {
            soft_mask,
            features,
        })
    }

    /// Every trainable parameter, under a stable name. The order is fixed by
    /// construction and is part of the checkpoint contract.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.stem[0].collect_params("stem.0", &mut out);
        self.stem[1].collect_params("stem.1", &mut out);
        for (i, stage) in self.encoder.iter().enumerate() {
            let level = i + 1;
            stage.down.collect_params(&format!("enc{level}.down"), &mut out);
            stage.convs[0].collect_params(&format!("enc{level}.conv0"), &mut out);
            stage.convs[1].collect_params(&format!("enc{level}.conv1"), &mut out);
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            let level = self.config.depth - 1 - i;
            stage.up.collect_params(&format!("dec{level}.up"), &mut out);
            stage.convs[0].collect_params(&format!("dec{level}.conv0"), &mut out);
            stage.convs[1].collect_params(&format!("dec{level}.conv1"), &mut out);
        }
        out.push(("mask.kernel".into(), self.mask_kernel.clone()));
        out.push(("mask.bias".into(), self.mask_bias.clone()));
        out
    }

    /// Every batch-norm running-statistics buffer, under a stable name.
    /// These are state, not parameters: checkpoints persist them so that
    /// inference after a reload is bit-identical.
    pub fn named_stats(&self) -> Vec<(String, &RefCell<RunningStats>)> {
        let mut out = Vec::new();
        out.push(("stem.0".to_string(), &self.stem[0].stats));
        out.push(("stem.1".to_string(), &self.stem[1].stats));
        for (i, stage) in self.encoder.iter().enumerate() {
            let level = i + 1;
            out.push((format!("enc{level}.down"), &stage.down.stats));
            out.push((format!("enc{level}.conv0"), &stage.convs[0].stats));
            out.push((format!("enc{level}.conv1"), &stage.convs[1].stats));
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            let level = self.config.depth - 1 - i;
            out.push((format!("dec{level}.up"), &stage.up.stats));
            out.push((format!("dec{level}.conv0"), &stage.convs[0].stats));
            out.push((format!("dec{level}.conv1"), &stage.convs[1].stats));
        }
        out
    }
}

/// Fan-in-scaled truncated normal: N(0, √(2/fan_in)) resampled beyond two
/// standard deviations. Kernel layout decides fan-in: all axes but the first.
pub(crate) fn init_conv_kernel(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            data.push(v);
        }
    }
    Tensor::param(shape, data).expect("kernel shape")
}

/// Soft-overlap loss of a predicted soft mask against a binary target:
/// `1 − Σ(t∘p) / (Σ(t+p) − Σ(t∘p))`, averaged per image over the batch.
///
/// The loss is 0 exactly when the prediction equals a binary target and 1
/// when a nonzero prediction is disjoint from a nonzero target. An image
/// whose target and prediction are both identically zero has no defined
/// overlap; it counts as perfect agreement (contribution 0) and logs a
/// warning.
pub fn seg_loss(tape: &Tape, prediction: &Tensor, target: &Tensor) -> Result<Tensor> {
    let batch = prediction.shape().first().copied().unwrap_or(0);
    seg_loss_weighted(tape, prediction, target, &vec![1.0; batch])
}

/// [`seg_loss`] with a per-image weight, used to drop the segmentation term
/// of images that carry no mask annotation inside a mixed batch. The result
/// is `Σ_b w_b·loss_b / Σ_b w_b`; when every weight is zero the loss is the
/// constant 0 (nothing in the batch is mask-supervised).
pub fn seg_loss_weighted(
    tape: &Tape,
    prediction: &Tensor,
    target: &Tensor,
    weights: &[f64],
) -> Result<Tensor> {
    if prediction.shape() != target.shape() {
        return Err(Error::usage(format!(
            "mask loss: prediction shape {:?} differs from target shape {:?}",
            prediction.shape(),
            target.shape()
        )));
    }
    if prediction.rank() != 4 {
        return Err(Error::usage(format!(
            "mask loss expects [B, C, H, W] tensors, got rank {}",
            prediction.rank()
        )));
    }
    let batch = prediction.shape()[0];
    if weights.len() != batch {
        return Err(Error::usage(format!(
            "mask loss: {} weights for a batch of {batch}",
            weights.len()
        )));
    }
    if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::usage("mask loss weights must be finite and ≥ 0"));
    }
    let per_image = prediction.numel() / batch;

    {
        let t = target.data();
        if t.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::usage("mask loss target must be binary (0/1)"));
        }
        let p = prediction.data();
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::usage("mask loss prediction must lie in [0, 1]"));
        }
    }

    let total_weight: f64 = weights.iter().sum();
    if total_weight == 0.0 {
        return Ok(Tensor::scalar(0.0));
    }

    // Per-image scale for the numerator, and a denominator guard for images
    // where target and prediction are both identically zero: their overlap
    // ratio is 0/0, so the guard pins the denominator to 1 and the scale of 0
    // pins the contribution to 0 (perfect agreement). Their weight still
    // counts toward the mean, matching the "contribution 0" reading.
    let mut lane_scale = vec![0.0; batch];
    let mut guard = vec![0.0; batch];
    {
        let p = prediction.data();
        let t = target.data();
        for b in 0..batch {
            let range = b * per_image..(b + 1) * per_image;
            let p_sum: f64 = p[range.clone()].iter().sum();
            let t_sum: f64 = t[range].iter().sum();
            if p_sum == 0.0 && t_sum == 0.0 {
                guard[b] = 1.0;
                if weights[b] > 0.0 {
                    log::warn!(
                        "mask loss: image {b} has an all-zero target and an all-zero \
                         prediction; counting it as perfect agreement"
                    );
                }
            } else {
                lane_scale[b] = weights[b];
            }
        }
    }

    let flat_pred = tape.reshape(prediction, &[batch, per_image])?;
    let flat_target = tape.reshape(target, &[batch, per_image])?;
    let inter = tape.sum_axis(&tape.mul(&flat_pred, &flat_target)?, 1)?;
    let total = tape.sum_axis(&tape.add(&flat_pred, &flat_target)?, 1)?;
    let union = tape.sub(&total, &inter)?;
    let union = tape.add(&union, &Tensor::from_vec(&[batch, 1], guard)?)?;
    let overlap = tape.div(&inter, &union)?;
    let per_image_loss = tape.scalar_sub(1.0, &overlap);
    let weighted = tape.mul(
        &per_image_loss,
        &Tensor::from_vec(&[batch, 1], lane_scale)?,
    )?;
    Ok(tape.mul_scalar(&tape.sum_all(&weighted), 1.0 / total_weight))
}
