//! Single-shot detection head over the segmentation feature tap.
//!
//! The image is divided into an S×S grid of cells, each carrying A anchor
//! boxes (template shapes clustered from the training boxes). One 1×1
//! convolution maps the feature tap to A·(C+5) channels per cell, reshaped
//! so the last axis holds one anchor's prediction record:
//!
//! ```text
//! [x̂, ŷ, ŵ, ĥ, ĉ, class logits…]
//! ```
//!
//! A record decodes into a box through fixed squashing maps — the center
//! lands strictly inside its cell through a sigmoid, the dimensions scale
//! the anchor through an exponential — so the decode has an exact analytic
//! inverse on those five channels, which target assignment uses to build
//! raw-space regression targets.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::{logit, sigmoid, Tape, Tensor};

/// Clamp for center fractions before the logit preimage, so ground-truth
/// centers that sit exactly on a cell edge still have a finite raw target.
const EDGE: f64 = 1e-7;

/// The cell lattice and its anchor shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    /// Grid extent (the image is S×S cells).
    pub s: usize,
    /// Anchors per cell.
    pub a: usize,
    /// Object classes.
    pub c: usize,
    /// Anchor shapes (width, height) in grid-cell units, one per anchor.
    pub priors: Vec<(f64, f64)>,
}

impl AnchorGrid {
    pub fn new(s: usize, c: usize, priors: Vec<(f64, f64)>) -> Result<AnchorGrid> {
        if s == 0 || c == 0 || priors.is_empty() {
            return Err(Error::config("anchor grid needs s ≥ 1, c ≥ 1, priors ≥ 1"));
        }
        if priors.iter().any(|(w, h)| *w <= 0.0 || *h <= 0.0) {
            return Err(Error::config("anchor priors must be strictly positive"));
        }
        Ok(AnchorGrid {
            s,
            a: priors.len(),
            c,
            priors,
        })
    }

    /// Entries of one anchor record: x̂, ŷ, ŵ, ĥ, ĉ, then C class logits.
    pub fn record_len(&self) -> usize {
        self.c + 5
    }

    /// Side of one grid cell in pixels, for an `input_size`-pixel image.
    pub fn cell_pixels(&self, input_size: usize) -> f64 {
        input_size as f64 / self.s as f64
    }
}

/// Output of the detection head: `[B, S, S, A, C+5]`, last axis as
/// documented on [`AnchorGrid`].
pub struct RawPrediction {
    pub y: Tensor,
}

/// One decoded anchor prediction, in grid-cell units.
#[derive(Debug, Clone)]
pub struct DecodedBox {
    /// Box center; lies strictly inside the source cell.
    pub cx: f64,
    pub cy: f64,
    /// Box dimensions (positive).
    pub w: f64,
    pub h: f64,
    /// Objectness in (0,1).
    pub confidence: f64,
    /// Softmax class distribution, length C.
    pub class_probs: Vec<f64>,
    /// Source cell (row, column) — the decode provenance, kept for
    /// deterministic tie-breaking.
    pub cell: (usize, usize),
    /// Source anchor index.
    pub anchor: usize,
}

impl DecodedBox {
    /// Selection score for one class: objectness times class probability.
    pub fn score(&self, class: usize) -> f64 {
        self.confidence * self.class_probs[class]
    }
}

/// One ground-truth box in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// A ground-truth box translated into the grid: which (cell, anchor) answers
/// for it, and the raw-space record that decodes back to it.
#[derive(Debug, Clone)]
pub struct ResponsibleAnchor {
    /// Cell (row, column).
    pub cell: (usize, usize),
    pub anchor: usize,
    /// Exact decode preimage of the box: [x̂, ŷ, ŵ, ĥ].
    pub raw: [f64; 4],
    pub class: usize,
}

/// Per-image assignment of ground truth onto the grid. At most one box per
/// (cell, anchor) — a collision is a data error, not a silent overwrite.
#[derive(Debug, Clone, Default)]
pub struct DetectionTarget {
    pub responsible: Vec<ResponsibleAnchor>,
}

/// The 1×1 convolution that turns the feature tap into anchor records.
pub struct DetHead {
    grid: AnchorGrid,
    in_channels: usize,
    kernel: Tensor,
    bias: Tensor,
}

impl DetHead {
    /// Deterministically initialized head over `in_channels` feature maps.
    pub fn build(grid: AnchorGrid, in_channels: usize, seed: u64) -> Result<DetHead> {
        if in_channels == 0 {
            return Err(Error::config("detection head needs at least one input channel"));
        }
        let out = grid.a * grid.record_len();
        let mut rng = crate::rng::seeded(seed);
        let kernel = crate::segnet::init_conv_kernel(&mut rng, &[out, in_channels, 1, 1]);
        let bias = Tensor::param(&[out], vec![0.0; out]).expect("bias shape");
        Ok(DetHead {
            grid,
            in_channels,
            kernel,
            bias,
        })
    }

    pub fn grid(&self) -> &AnchorGrid {
        &self.grid
    }

    /// Map features `[B, N, S, S]` to raw records `[B, S, S, A, C+5]`.
    pub fn forward(&self, tape: &Tape, features: &Tensor) -> Result<RawPrediction> {
        let shape = features.shape();
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::config(format!(
                "detection head expects [B, {}, S, S] features, got {shape:?}",
                self.in_channels
            )));
        }
        if shape[2] != self.grid.s || shape[3] != self.grid.s {
            return Err(Error::config(format!(
                "feature extent {}×{} does not match the {}×{} grid",
                shape[2], shape[3], self.grid.s, self.grid.s
            )));
        }
        let b = shape[0];
        let conv = tape.conv2d(features, &self.kernel, &self.bias, 1, 0)?;
        let cells_last = tape.permute(&conv, &[0, 2, 3, 1])?;
        let y = tape.reshape(
            &cells_last,
            &[b, self.grid.s, self.grid.s, self.grid.a, self.grid.record_len()],
        )?;
        Ok(RawPrediction { y })
    }

    /// Trainable parameters under stable names (checkpoint contract).
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        vec![
            ("head.kernel".to_string(), self.kernel.clone()),
            ("head.bias".to_string(), self.bias.clone()),
        ]
    }
}

impl AnchorGrid {
    fn check_raw_shape(&self, raw: &RawPrediction) -> Result<usize> {
        let shape = raw.y.shape();
        let expect = [self.s, self.s, self.a, self.record_len()];
        if shape.len() != 5 || shape[1..] != expect {
            return Err(Error::usage(format!(
                "raw prediction shape {shape:?} does not match grid [B, {}, {}, {}, {}]",
                expect[0], expect[1], expect[2], expect[3]
            )));
        }
        Ok(shape[0])
    }

    /// Decode every anchor record of every image. Output: per image, the
    /// S·S·A boxes in row-major (cell row, cell column, anchor) order.
    pub fn decode(&self, raw: &RawPrediction) -> Result<Vec<Vec<DecodedBox>>> {
        let batch = self.check_raw_shape(raw)?;
        let data = raw.y.data();
        let rec = self.record_len();
        let mut out = Vec::with_capacity(batch);
        let mut offset = 0;
        for _ in 0..batch {
            let mut boxes = Vec::with_capacity(self.s * self.s * self.a);
            for i in 0..self.s {
                for j in 0..self.s {
                    for k in 0..self.a {
                        let r = &data[offset..offset + rec];
                        offset += rec;
                        let (pw, ph) = self.priors[k];
                        let logits = &r[5..];
                        boxes.push(DecodedBox {
                            cx: sigmoid(r[0]) + j as f64,
                            cy: sigmoid(r[1]) + i as f64,
                            w: pw * r[2].exp(),
                            h: ph * r[3].exp(),
                            confidence: sigmoid(r[4]),
                            class_probs: softmax(logits),
                            cell: (i, j),
                            anchor: k,
                        });
                    }
                }
            }
            out.push(boxes);
        }
        Ok(out)
    }

    /// Exact preimage of the decode for the five box/confidence channels.
    /// The class distribution has no unique logit preimage (softmax is
    /// shift-invariant), so it is not part of the inverse.
    pub fn encode(&self, decoded: &DecodedBox) -> Result<[f64; 5]> {
        let (i, j) = decoded.cell;
        let k = decoded.anchor;
        if i >= self.s || j >= self.s || k >= self.a {
            return Err(Error::usage(format!(
                "cell ({i}, {j}) anchor {k} outside an S={} A={} grid",
                self.s, self.a
            )));
        }
        let fx = decoded.cx - j as f64;
        let fy = decoded.cy - i as f64;
        if !(0.0..=1.0).contains(&fx) || !(0.0..=1.0).contains(&fy) {
            return Err(Error::usage(format!(
                "box center ({}, {}) lies outside cell ({i}, {j})",
                decoded.cx, decoded.cy
            )));
        }
        if decoded.w <= 0.0 || decoded.h <= 0.0 {
            return Err(Error::usage("box dimensions must be positive"));
        }
        if !(0.0 < decoded.confidence && decoded.confidence < 1.0) {
            return Err(Error::usage("confidence must lie strictly in (0, 1)"));
        }
        let (pw, ph) = self.priors[k];
        Ok([
            logit(fx.clamp(EDGE, 1.0 - EDGE)),
            logit(fy.clamp(EDGE, 1.0 - EDGE)),
            (decoded.w / pw).ln(),
            (decoded.h / ph).ln(),
            logit(decoded.confidence),
        ])
    }

    /// Place ground-truth boxes (pixel coordinates, `input_size`-pixel
    /// image) onto the grid: the cell containing the center answers for the
    /// box, through the prior of highest shape overlap.
    pub fn assign_targets(
        &self,
        gt_boxes: &[GtBox],
        input_size: usize,
    ) -> Result<DetectionTarget> {
        let cell = self.cell_pixels(input_size);
        let mut target = DetectionTarget::default();
        let mut claimed: Vec<Option<usize>> = vec![None; self.s * self.s * self.a];
        for (idx, gt) in gt_boxes.iter().enumerate() {
            if gt.class >= self.c {
                return Err(Error::data(format!(
                    "box {idx} has class {} but the grid knows {} classes",
                    gt.class, self.c
                )));
            }
            let size = input_size as f64;
            if !(0.0..=size).contains(&gt.cx) || !(0.0..=size).contains(&gt.cy) {
                return Err(Error::data(format!(
                    "box {idx} center ({}, {}) outside the {input_size}px image",
                    gt.cx, gt.cy
                )));
            }
            if gt.w <= 0.0 || gt.h <= 0.0 {
                return Err(Error::data(format!("box {idx} has non-positive dimensions")));
            }
            let gx = gt.cx / cell;
            let gy = gt.cy / cell;
            let gw = gt.w / cell;
            let gh = gt.h / cell;
            let j = (gx.floor() as usize).min(self.s - 1);
            let i = (gy.floor() as usize).min(self.s - 1);
            let k = self.best_prior(gw, gh);
            let slot = (i * self.s + j) * self.a + k;
            if let Some(other) = claimed[slot] {
                let mut msg = String::new();
                let _ = write!(
                    msg,
                    "cell ({i}, {j}) anchor {k} claimed twice: box {other} {:?} and box {idx} {:?}",
                    gt_boxes[other], gt
                );
                return Err(Error::data(msg));
            }
            claimed[slot] = Some(idx);
            let (pw, ph) = self.priors[k];
            target.responsible.push(ResponsibleAnchor {
                cell: (i, j),
                anchor: k,
                raw: [
                    logit((gx - j as f64).clamp(EDGE, 1.0 - EDGE)),
                    logit((gy - i as f64).clamp(EDGE, 1.0 - EDGE)),
                    (gw / pw).ln(),
                    (gh / ph).ln(),
                ],
                class: gt.class,
            });
        }
        Ok(target)
    }

    /// Prior with the highest overlap against a co-centered (w, h) shape;
    /// ties go to the lowest index.
    fn best_prior(&self, w: f64, h: f64) -> usize {
        let mut best = 0;
        let mut best_iou = -1.0;
        for (k, (pw, ph)) in self.priors.iter().enumerate() {
            let iou = shape_iou((w, h), (*pw, *ph));
            if iou > best_iou {
                best_iou = iou;
                best = k;
            }
        }
        best
    }

    /// Keep the single highest-scoring box per class (score = confidence ×
    /// class probability). Ties break toward the lowest (cell row, cell
    /// column, anchor), which makes the selection independent of input
    /// order.
    pub fn select_best(&self, boxes: &[DecodedBox]) -> Vec<Option<DecodedBox>> {
        let mut best: Vec<Option<&DecodedBox>> = vec![None; self.c];
        for candidate in boxes {
            for (class, slot) in best.iter_mut().enumerate() {
                let score = candidate.score(class);
                let replace = match slot {
                    None => true,
                    Some(held) => {
                        let held_score = held.score(class);
                        score > held_score
                            || (score == held_score
                                && (candidate.cell, candidate.anchor) < (held.cell, held.anchor))
                    }
                };
                if replace {
                    *slot = Some(candidate);
                }
            }
        }
        best.into_iter().map(|b| b.cloned()).collect()
    }
}

/// Overlap of two co-centered shapes: min-dimension intersection over union.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    inter / union
}

/// Loss weights. `no_object` scales the confidence penalty of anchors that
/// answer for no box, inside the confidence term.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetLossWeights {
    pub centers: f64,
    pub dimensions: f64,
    pub confidence: f64,
    pub classes: f64,
    pub no_object: f64,
}

impl Default for DetLossWeights {
    fn default() -> DetLossWeights {
        DetLossWeights {
            centers: 5.0,
            dimensions: 5.0,
            confidence: 1.0,
            classes: 1.0,
            no_object: 0.5,
        }
    }
}

/// Unweighted values of the four loss terms, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetLossBreakdown {
    pub centers: f64,
    pub dimensions: f64,
    pub confidence: f64,
    pub classes: f64,
}

/// Four-term detection loss over a batch.
///
/// With R the responsible (cell, anchor) slots of the batch:
/// - centers: mean over R of the squared center error, in squashed space
///   (σ of the raw values against σ of the raw targets);
/// - dimensions: mean over R of the squared raw log-scale error;
/// - confidence: mean over R of (σ(ĉ)−1)² plus `no_object` times the mean
///   over all other slots of σ(ĉ)²;
/// - classes: mean over R of softmax cross-entropy against the target class.
///
/// The total is the weighted sum; the unweighted terms come back alongside
/// for logging. With no responsible slot in the batch, the three
/// ground-truth-bound terms are 0 and the confidence term still pushes every
/// anchor toward "no object".
pub fn det_loss(
    tape: &Tape,
    grid: &AnchorGrid,
    raw: &RawPrediction,
    targets: &[DetectionTarget],
    weights: &DetLossWeights,
) -> Result<(Tensor, DetLossBreakdown)> {
    let batch = grid.check_raw_shape(raw)?;
    if targets.len() != batch {
        return Err(Error::usage(format!(
            "{} targets for a batch of {batch}",
            targets.len()
        )));
    }

    let slots = grid.s * grid.s * grid.a;
    let c = grid.c;
    let mut resp = vec![0.0; batch * slots];
    let mut target_raw = vec![0.0; batch * slots * 4];
    let mut target_class = vec![0.0; batch * slots * c];
    let mut n_resp = 0usize;
    for (b, target) in targets.iter().enumerate() {
        for entry in &target.responsible {
            let (i, j) = entry.cell;
            if i >= grid.s || j >= grid.s || entry.anchor >= grid.a || entry.class >= c {
                return Err(Error::usage("target entry outside the grid"));
            }
            let slot = b * slots + (i * grid.s + j) * grid.a + entry.anchor;
            if resp[slot] != 0.0 {
                return Err(Error::usage("two target entries share one (cell, anchor)"));
            }
            resp[slot] = 1.0;
            target_raw[slot * 4..slot * 4 + 4].copy_from_slice(&entry.raw);
            target_class[slot * c + entry.class] = 1.0;
            n_resp += 1;
        }
    }

    let rec = grid.record_len();
    let flat = tape.reshape(&raw.y, &[batch * slots, rec])?;
    let xy_raw = tape.slice(&flat, 1, 0, 2)?;
    let wh_raw = tape.slice(&flat, 1, 2, 2)?;
    let conf_raw = tape.slice(&flat, 1, 4, 1)?;
    let logits = tape.slice(&flat, 1, 5, c)?;

    let resp_1 = Tensor::from_vec(&[batch * slots, 1], resp.clone())?;
    let resp_2 = {
        let mut doubled = Vec::with_capacity(batch * slots * 2);
        for r in &resp {
            doubled.push(*r);
            doubled.push(*r);
        }
        Tensor::from_vec(&[batch * slots, 2], doubled)?
    };
    let noobj_1 = Tensor::from_vec(
        &[batch * slots, 1],
        resp.iter().map(|r| 1.0 - r).collect(),
    )?;

    // Centers: squared error of σ(raw) against σ(raw target), responsible
    // slots only. The target enters as a plain number — σ of the stored
    // preimage — so the graph only differentiates the prediction.
    let mut center_targets = Vec::with_capacity(batch * slots * 2);
    let mut dim_targets = Vec::with_capacity(batch * slots * 2);
    for slot in 0..batch * slots {
        center_targets.push(sigmoid(target_raw[slot * 4]));
        center_targets.push(sigmoid(target_raw[slot * 4 + 1]));
        dim_targets.push(target_raw[slot * 4 + 2]);
        dim_targets.push(target_raw[slot * 4 + 3]);
    }
    let center_targets = Tensor::from_vec(&[batch * slots, 2], center_targets)?;
    let dim_targets = Tensor::from_vec(&[batch * slots, 2], dim_targets)?;

    let resp_norm = 1.0 / n_resp.max(1) as f64;
    let center_diff = tape.sub(&tape.sigmoid(&xy_raw), &center_targets)?;
    let center_sq = tape.mul(&center_diff, &center_diff)?;
    let centers = tape.mul_scalar(&tape.sum_all(&tape.mul(&center_sq, &resp_2)?), resp_norm);

    let dim_diff = tape.sub(&wh_raw, &dim_targets)?;
    let dim_sq = tape.mul(&dim_diff, &dim_diff)?;
    let dimensions = tape.mul_scalar(&tape.sum_all(&tape.mul(&dim_sq, &resp_2)?), resp_norm);

    // Confidence: responsible anchors pulled to 1, the rest pushed to 0.
    let conf = tape.sigmoid(&conf_raw);
    let conf_err = tape.scalar_sub(1.0, &conf);
    let conf_err_sq = tape.mul(&conf_err, &conf_err)?;
    let obj_term = tape.mul_scalar(
        &tape.sum_all(&tape.mul(&conf_err_sq, &resp_1)?),
        resp_norm,
    );
    let n_noobj = batch * slots - n_resp;
    let conf_sq = tape.mul(&conf, &conf)?;
    let noobj_term = tape.mul_scalar(
        &tape.sum_all(&tape.mul(&conf_sq, &noobj_1)?),
        weights.no_object / n_noobj.max(1) as f64,
    );
    let confidence = tape.add(&obj_term, &noobj_term)?;

    // Classes: softmax cross-entropy via log-sum-exp. The per-slot max is
    // lifted out as a constant for numeric range only; it cancels in the
    // gradient, so treating it as constant is exact.
    let max_per_slot: Vec<f64> = {
        let data = logits.data();
        (0..batch * slots)
            .map(|slot| {
                data[slot * c..(slot + 1) * c]
                    .iter()
                    .fold(f64::NEG_INFINITY, |m, v| m.max(*v))
            })
            .collect()
    };
    let mut max_wide = Vec::with_capacity(batch * slots * c);
    for m in &max_per_slot {
        max_wide.extend(std::iter::repeat(*m).take(c));
    }
    let max_wide = Tensor::from_vec(&[batch * slots, c], max_wide)?;
    let max_narrow = Tensor::from_vec(&[batch * slots, 1], max_per_slot)?;
    let shifted = tape.exp(&tape.sub(&logits, &max_wide)?);
    let lse = tape.add(&tape.log(&tape.sum_axis(&shifted, 1)?), &max_narrow)?;
    let target_class = Tensor::from_vec(&[batch * slots, c], target_class)?;
    let picked = tape.sum_axis(&tape.mul(&logits, &target_class)?, 1)?;
    let ce = tape.sub(&lse, &picked)?;
    let classes = tape.mul_scalar(&tape.sum_all(&tape.mul(&ce, &resp_1)?), resp_norm);

    let breakdown = DetLossBreakdown {
        centers: centers.item(),
        dimensions: dimensions.item(),
        confidence: confidence.item(),
        classes: classes.item(),
    };

    let mut total = tape.mul_scalar(&centers, weights.centers);
    total = tape.add(&total, &tape.mul_scalar(&dimensions, weights.dimensions))?;
    total = tape.add(&total, &tape.mul_scalar(&confidence, weights.confidence))?;
    total = tape.add(&total, &tape.mul_scalar(&classes, weights.classes))?;
    Ok((total, breakdown))
}

/// Cluster box shapes into `k` anchor priors by overlap distance
/// (1 − shape IoU), centroids updated as per-cluster means. When the input
/// holds at most `k` distinct shapes the clustering degenerates to exactly
/// those shapes. Returned priors are sorted by area so the anchor order is
/// reproducible.
pub fn cluster_priors(shapes: &[(f64, f64)], k: usize) -> Result<Vec<(f64, f64)>> {
    if k == 0 {
        return Err(Error::config("cannot cluster into zero priors"));
    }
    if shapes.is_empty() {
        return Err(Error::config("cannot cluster an empty shape list"));
    }
    if shapes.iter().any(|(w, h)| *w <= 0.0 || *h <= 0.0) {
        return Err(Error::config("box shapes must be strictly positive"));
    }

    let mut distinct: Vec<(f64, f64)> = Vec::new();
    for s in shapes {
        if !distinct.contains(s) {
            distinct.push(*s);
        }
    }
    let by_area = |a: &(f64, f64), b: &(f64, f64)| {
        (a.0 * a.1, a.0, a.1)
            .partial_cmp(&(b.0 * b.1, b.0, b.1))
            .expect("finite shapes")
    };
    if distinct.len() <= k {
        distinct.sort_by(by_area);
        return Ok(distinct);
    }

    // Deterministic seeding: spread the initial centroids over the
    // area-sorted distinct shapes.
    distinct.sort_by(by_area);
    let mut centroids: Vec<(f64, f64)> = (0..k)
        .map(|i| distinct[i * (distinct.len() - 1) / (k - 1).max(1)])
        .collect();

    let mut assignment = vec![usize::MAX; shapes.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (n, shape) in shapes.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = 1.0 - shape_iou(*shape, *centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[n] != best {
                assignment[n] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<(f64, f64)> = shapes
                .iter()
                .zip(&assignment)
                .filter(|(_, a)| **a == c)
                .map(|(s, _)| *s)
                .collect();
            if !members.is_empty() {
                let n = members.len() as f64;
                *centroid = (
                    members.iter().map(|m| m.0).sum::<f64>() / n,
                    members.iter().map(|m| m.1).sum::<f64>() / n,
                );
            }
        }
    }
    centroids.sort_by(by_area);
    Ok(centroids)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn small_grid() -> AnchorGrid {
        AnchorGrid::new(8, 2, vec![(1.0, 1.0), (2.0, 2.0)]).unwrap()
    }

    fn zero_raw(tape: &Tape, grid: &AnchorGrid, batch: usize) -> RawPrediction {
        let _ = tape;
        let numel = batch * grid.s * grid.s * grid.a * grid.record_len();
        RawPrediction {
            y: Tensor::from_vec(
                &[batch, grid.s, grid.s, grid.a, grid.record_len()],
                vec![0.0; numel],
            )
            .unwrap(),
        }
    }

    #[test]
    fn head_output_shape_matches_grid() {
        let grid = small_grid();
        let head = DetHead::build(grid, 24, 3).unwrap();
        let tape = Tape::new();
        let features = Tensor::from_vec(&[2, 24, 8, 8], vec![0.1; 2 * 24 * 64]).unwrap();
        let raw = head.forward(&tape, &features).unwrap();
        assert_eq!(raw.y.shape(), &[2, 8, 8, 2, 7]);
    }

    #[test]
    fn zero_head_decodes_to_cell_centers_with_prior_dims() {
        let grid = small_grid();
        let head = DetHead::build(grid, 4, 3).unwrap();
        head.kernel.set_data(vec![0.0; head.kernel.numel()]);
        let tape = Tape::inference();
        let features = Tensor::from_vec(&[1, 4, 8, 8], vec![0.3; 4 * 64]).unwrap();
        let raw = head.forward(&tape, &features).unwrap();
        let boxes = head.grid().decode(&raw).unwrap();
        for b in &boxes[0] {
            let (i, j) = b.cell;
            assert!((b.cx - (j as f64 + 0.5)).abs() < 1e-12);
            assert!((b.cy - (i as f64 + 0.5)).abs() < 1e-12);
            let prior = head.grid().priors[b.anchor];
            assert_eq!((b.w, b.h), prior);
            assert!((b.confidence - 0.5).abs() < 1e-12);
            assert!((b.class_probs[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn head_forward_matches_per_cell_matmul() {
        let grid = AnchorGrid::new(2, 1, vec![(1.0, 1.0)]).unwrap();
        let head = DetHead::build(grid, 3, 9).unwrap();
        let tape = Tape::inference();
        let features =
            Tensor::from_vec(&[1, 3, 2, 2], (0..12).map(|i| i as f64 * 0.25).collect()).unwrap();
        let raw = head.forward(&tape, &features).unwrap();

        let kernel = head.kernel.to_vec(); // [out, 3, 1, 1]
        let bias = head.bias.to_vec();
        let feat = features.to_vec();
        let out_ch = bias.len();
        let data = raw.y.to_vec();
        for i in 0..2 {
            for j in 0..2 {
                for o in 0..out_ch {
                    let mut acc = bias[o];
                    for ci in 0..3 {
                        acc += kernel[o * 3 + ci] * feat[ci * 4 + i * 2 + j];
                    }
                    let got = data[((i * 2 + j) * 1 + 0) * out_ch + o];
                    assert!((acc - got).abs() < 1e-12, "cell ({i},{j}) channel {o}");
                }
            }
        }
    }

    #[test]
    fn decode_center_and_prior_scaling() {
        let grid = AnchorGrid::new(8, 1, vec![(1.5, 1.5)]).unwrap();
        let rec = grid.record_len();
        let mut data = vec![0.0; 8 * 8 * rec];
        // Cell (i=2, j=3): ŵ = ln 2 on top of the zero record.
        let slot = (2 * 8 + 3) * rec;
        data[slot + 2] = 2.0_f64.ln();
        let raw = RawPrediction {
            y: Tensor::from_vec(&[1, 8, 8, 1, rec], data).unwrap(),
        };
        let boxes = grid.decode(&raw).unwrap();
        let b = &boxes[0][2 * 8 + 3];
        assert_eq!(b.cell, (2, 3));
        assert!((b.cx - 3.5).abs() < 1e-12);
        assert!((b.cy - 2.5).abs() < 1e-12);
        assert!((b.w - 3.0).abs() < 1e-12, "ŵ = ln 2 doubles the 1.5 prior");
        assert!((b.h - 1.5).abs() < 1e-12);
    }

    #[test]
    fn encode_inverts_decode() {
        let grid = small_grid();
        let mut rng = crate::rng::seeded(17);
        use rand::Rng;
        let rec = grid.record_len();
        let n = grid.s * grid.s * grid.a * rec;
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-6.0..6.0)).collect();
        let raw = RawPrediction {
            y: Tensor::from_vec(&[1, grid.s, grid.s, grid.a, rec], data.clone()).unwrap(),
        };
        for (idx, decoded) in grid.decode(&raw).unwrap()[0].iter().enumerate() {
            let back = grid.encode(decoded).unwrap();
            for (ch, value) in back.iter().enumerate() {
                assert!(
                    (value - data[idx * rec + ch]).abs() < 1e-9,
                    "slot {idx} channel {ch}"
                );
            }
            let (i, j) = decoded.cell;
            assert!(decoded.cx > j as f64 && decoded.cx < (j + 1) as f64);
            assert!(decoded.cy > i as f64 && decoded.cy < (i + 1) as f64);
        }
    }

    #[test]
    fn assignment_picks_center_cell_and_best_prior() {
        let grid = small_grid();
        // 64px image, 8px cells: center (40, 40) falls in cell (5, 5).
        let gt = GtBox {
            class: 0,
            cx: 40.0,
            cy: 40.0,
            w: 16.0,
            h: 16.0,
        };
        let target = grid.assign_targets(&[gt], 64).unwrap();
        assert_eq!(target.responsible.len(), 1);
        let entry = &target.responsible[0];
        assert_eq!(entry.cell, (5, 5));
        // 16px = 2 cells: the (2, 2) prior wins over (1, 1).
        assert_eq!(entry.anchor, 1);
    }

    #[test]
    fn larger_prior_wins_for_larger_boxes() {
        // 256px image, S=8 → 32px cells; priors of 1 and 2 cells are 32px
        // and 64px boxes. A 64px ground truth must take the larger prior.
        let grid = small_grid();
        let gt = GtBox {
            class: 1,
            cx: 100.0,
            cy: 100.0,
            w: 64.0,
            h: 64.0,
        };
        let target = grid.assign_targets(&[gt], 256).unwrap();
        assert_eq!(target.responsible[0].anchor, 1);
    }

    #[test]
    fn assignment_round_trips_through_decode() {
        let grid = small_grid();
        let gt = GtBox {
            class: 1,
            cx: 41.3,
            cy: 13.9,
            w: 10.0,
            h: 7.0,
        };
        let target = grid.assign_targets(&[gt.clone()], 64).unwrap();
        let entry = &target.responsible[0];
        let cell_px = grid.cell_pixels(64);
        let (i, j) = entry.cell;
        let cx = (sigmoid(entry.raw[0]) + j as f64) * cell_px;
        let cy = (sigmoid(entry.raw[1]) + i as f64) * cell_px;
        let w = grid.priors[entry.anchor].0 * entry.raw[2].exp() * cell_px;
        let h = grid.priors[entry.anchor].1 * entry.raw[3].exp() * cell_px;
        assert!((cx - gt.cx).abs() < 1e-9);
        assert!((cy - gt.cy).abs() < 1e-9);
        assert!((w - gt.w).abs() < 1e-9);
        assert!((h - gt.h).abs() < 1e-9);
    }

    #[test]
    fn colliding_boxes_raise_an_error_naming_both() {
        let grid = small_grid();
        let a = GtBox {
            class: 0,
            cx: 12.0,
            cy: 12.0,
            w: 16.0,
            h: 16.0,
        };
        let b = GtBox {
            class: 1,
            cx: 13.0,
            cy: 13.0,
            w: 15.0,
            h: 15.0,
        };
        let err = grid.assign_targets(&[a, b], 64).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("box 0"), "{msg}");
        assert!(msg.contains("box 1"), "{msg}");
    }

    #[test]
    fn perfect_prediction_zeroes_the_target_bound_terms() {
        let grid = small_grid();
        let gt = GtBox {
            class: 1,
            cx: 20.5,
            cy: 36.25,
            w: 12.0,
            h: 18.0,
        };
        let target = grid.assign_targets(&[gt], 64).unwrap();
        let entry = target.responsible[0].clone();

        let tape = Tape::new();
        let rec = grid.record_len();
        let mut data = vec![0.0; grid.s * grid.s * grid.a * rec];
        let (i, j) = entry.cell;
        let slot = ((i * grid.s + j) * grid.a + entry.anchor) * rec;
        data[slot..slot + 4].copy_from_slice(&entry.raw);
        data[slot + 4] = 40.0; // σ ≈ 1: confident
        data[slot + 5 + entry.class] = 40.0; // softmax ≈ one-hot
        let raw = RawPrediction {
            y: Tensor::from_vec(&[1, grid.s, grid.s, grid.a, rec], data).unwrap(),
        };
        let (_, breakdown) = det_loss(
            &tape,
            &grid,
            &raw,
            &[target],
            &DetLossWeights::default(),
        )
        .unwrap();
        assert!(breakdown.centers < 1e-18);
        assert!(breakdown.dimensions < 1e-18);
        assert!(breakdown.classes < 1e-12);
    }

    #[test]
    fn empty_batch_penalizes_only_confidence() {
        let grid = small_grid();
        let tape = Tape::new();
        let raw = zero_raw(&tape, &grid, 1);
        let weights = DetLossWeights::default();
        let (total, breakdown) = det_loss(
            &tape,
            &grid,
            &raw,
            &[DetectionTarget::default()],
            &weights,
        )
        .unwrap();
        assert_eq!(breakdown.centers, 0.0);
        assert_eq!(breakdown.dimensions, 0.0);
        assert_eq!(breakdown.classes, 0.0);
        // Every anchor sits at σ(0) = 0.5; the no-object scale halves the
        // 0.25 mean square.
        assert!((breakdown.confidence - 0.125).abs() < 1e-12);
        assert!((total.item() - weights.confidence * 0.125).abs() < 1e-12);
    }

    #[test]
    fn det_loss_matches_a_scalar_loop_oracle() {
        let grid = AnchorGrid::new(2, 2, vec![(1.0, 1.0), (0.5, 2.0)]).unwrap();
        let rec = grid.record_len();
        let mut rng = crate::rng::seeded(23);
        use rand::Rng;
        let data: Vec<f64> = (0..2 * 2 * 2 * 2 * rec)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let tape = Tape::new();
        let raw = RawPrediction {
            y: Tensor::from_vec(&[2, 2, 2, 2, rec], data.clone()).unwrap(),
        };
        // One box in image 0, none in image 1.
        let gt = GtBox {
            class: 1,
            cx: 9.0,
            cy: 5.0,
            w: 8.0,
            h: 10.0,
        };
        let targets = vec![
            grid.assign_targets(&[gt], 16).unwrap(),
            DetectionTarget::default(),
        ];
        let weights = DetLossWeights::default();
        let (total, breakdown) = det_loss(&tape, &grid, &raw, &targets, &weights).unwrap();

        // Scalar reimplementation, one loop per term.
        let entry = &targets[0].responsible[0];
        let (i, j) = entry.cell;
        let slot0 = ((i * 2 + j) * 2 + entry.anchor) * rec;
        let r = &data[slot0..slot0 + rec];
        let centers = (sigmoid(r[0]) - sigmoid(entry.raw[0])).powi(2)
            + (sigmoid(r[1]) - sigmoid(entry.raw[1])).powi(2);
        let dims = (r[2] - entry.raw[2]).powi(2) + (r[3] - entry.raw[3]).powi(2);
        let mut conf_obj = 0.0;
        let mut conf_noobj = 0.0;
        for image in 0..2 {
            for slot in 0..8 {
                let base = image * 8 * rec + slot * rec;
                let cval = sigmoid(data[base + 4]);
                if image == 0 && base == slot0 {
                    conf_obj += (cval - 1.0).powi(2);
                } else {
                    conf_noobj += cval * cval;
                }
            }
        }
        let confidence = conf_obj / 1.0 + 0.5 * conf_noobj / 15.0;
        let logits = &r[5..7];
        let max = logits[0].max(logits[1]);
        let lse = max + ((logits[0] - max).exp() + (logits[1] - max).exp()).ln();
        let classes = lse - logits[1];
        let expected_total =
            5.0 * centers + 5.0 * dims + 1.0 * confidence + 1.0 * classes;

        assert!((breakdown.centers - centers).abs() < 1e-12);
        assert!((breakdown.dimensions - dims).abs() < 1e-12);
        assert!((breakdown.confidence - confidence).abs() < 1e-12);
        assert!((breakdown.classes - classes).abs() < 1e-12);
        assert!((total.item() - expected_total).abs() < 1e-12);
    }

    #[test]
    fn select_best_takes_argmax_and_breaks_ties_by_position() {
        let grid = small_grid();
        let mk = |cell: (usize, usize), anchor, conf: f64, p0: f64| DecodedBox {
            cx: cell.1 as f64 + 0.5,
            cy: cell.0 as f64 + 0.5,
            w: 1.0,
            h: 1.0,
            confidence: conf,
            class_probs: vec![p0, 1.0 - p0],
            cell,
            anchor,
        };
        let a = mk((0, 0), 0, 0.9, 1.0);
        let b = mk((1, 1), 0, 0.8, 1.0);
        let picked = grid.select_best(&[a.clone(), b.clone()]);
        assert_eq!(picked[0].as_ref().unwrap().cell, (0, 0));

        // Equal scores: the lower (row, col, anchor) wins regardless of
        // input order.
        let t1 = mk((2, 3), 1, 0.7, 1.0);
        let t2 = mk((2, 3), 0, 0.7, 1.0);
        let forward = grid.select_best(&[t1.clone(), t2.clone()]);
        let backward = grid.select_best(&[t2, t1]);
        assert_eq!(forward[0].as_ref().unwrap().anchor, 0);
        assert_eq!(backward[0].as_ref().unwrap().anchor, 0);
    }

    #[test]
    fn select_best_returns_a_box_per_class_even_at_low_scores() {
        let grid = small_grid();
        let lone = DecodedBox {
            cx: 0.5,
            cy: 0.5,
            w: 1.0,
            h: 1.0,
            confidence: 0.01,
            class_probs: vec![0.9, 0.1],
            cell: (0, 0),
            anchor: 0,
        };
        let picked = grid.select_best(&[lone]);
        assert!(picked[0].is_some());
        assert!(picked[1].is_some());
    }

    #[test]
    fn clustering_two_distinct_sizes_returns_them_exactly() {
        let shapes = vec![(1.0, 1.0), (2.0, 2.0), (1.0, 1.0), (2.0, 2.0), (1.0, 1.0)];
        let priors = cluster_priors(&shapes, 2).unwrap();
        assert_eq!(priors, vec![(1.0, 1.0), (2.0, 2.0)]);
    }

    #[test]
    fn clustering_converges_to_mode_centroids() {
        let mut shapes = Vec::new();
        for n in 0..10 {
            let jitter = n as f64 * 0.01;
            shapes.push((1.0 + jitter, 1.0 + jitter));
            shapes.push((3.0 + jitter, 3.0 + jitter));
        }
        let priors = cluster_priors(&shapes, 2).unwrap();
        assert!((priors[0].0 - 1.045).abs() < 1e-9, "{priors:?}");
        assert!((priors[1].0 - 3.045).abs() < 1e-9, "{priors:?}");
    }

    #[test]
    fn shape_iou_is_one_on_equal_shapes_and_symmetric() {
        assert!((shape_iou((2.0, 3.0), (2.0, 3.0)) - 1.0).abs() < 1e-12);
        let ab = shape_iou((1.0, 2.0), (2.0, 1.0));
        let ba = shape_iou((2.0, 1.0), (1.0, 2.0));
        assert_eq!(ab, ba);
        assert!((ab - 1.0 / 3.0).abs() < 1e-12);
    }
}
