//! The joint model: the encoder–decoder mask network and the box head that
//! reads its fused decoder features, plus inference-time evaluation.

use crate::data::{self, Sample};
use crate::dethead::{AnchorGrid, DecodedBox, DetHead, RawPrediction};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport, EvalRow};
use crate::segnet::{SegNet, SegNetConfig, SegNetOutput};
use crate::tensor::{Mode, Tape, Tensor};

/// Everything needed to rebuild the model architecture. Stored alongside the
/// weights in checkpoints so a saved model is self-describing.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub segnet: SegNetConfig,
    /// Number of object classes predicted by the box head.
    pub classes: usize,
    /// Anchor prior sides in pixels, (width, height) per anchor, sorted by
    /// area. These are converted to grid-cell units internally.
    pub priors: Vec<(f64, f64)>,
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            segnet: SegNetConfig::default(),
            classes: data::NUM_CLASSES,
            // One prior per class scale: the spot box side and the disc box
            // side at the default 64-pixel extent.
            priors: vec![(8.0, 8.0), (16.0, 16.0)],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.segnet.validate()?;
        if self.classes == 0 {
            return Err(Error::config("at least one class is required"));
        }
        if self.priors.is_empty() {
            return Err(Error::config("at least one anchor prior is required"));
        }
        for (w, h) in &self.priors {
            if !(w.is_finite() && h.is_finite()) || *w <= 0.0 || *h <= 0.0 {
                return Err(Error::config(format!("invalid anchor prior ({w}, {h})")));
            }
        }
        Ok(())
    }

    /// Pixels per grid cell.
    pub fn cell_pixels(&self) -> f64 {
        self.segnet.input_size as f64 / self.segnet.grid_size() as f64
    }

    /// The anchor grid implied by this configuration.
    pub fn grid(&self) -> Result<AnchorGrid> {
        let cell = self.cell_pixels();
        let priors = self
            .priors
            .iter()
            .map(|(w, h)| (w / cell, h / cell))
            .collect();
        AnchorGrid::new(self.segnet.grid_size(), self.classes, priors)
    }
}

/// One sample's inference outputs, in pixel coordinates.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub id: String,
    /// Soft mask in `[0, 1]`, row-major `height × width`.
    pub soft_mask: Vec<f64>,
    /// The soft mask thresholded to exact {0, 1}.
    pub mask: Vec<f64>,
    /// Best box per class (pixel units), if any anchor was decoded.
    pub boxes: Vec<Option<DecodedBox>>,
}

/// The mask network and box head, trained jointly.
pub struct Model {
    config: ModelConfig,
    pub segnet: SegNet,
    pub head: DetHead,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let segnet = SegNet::build(&config.segnet, crate::rng::derive(seed, "segnet", 0))?;
        let head = DetHead::build(
            config.grid()?,
            segnet.feature_channels(),
            crate::rng::derive(seed, "dethead", 0),
        )?;
        Ok(Model {
            config: config.clone(),
            segnet,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Run both branches: the soft mask and the raw box records.
    pub fn forward(
        &self,
        tape: &Tape,
        images: &Tensor,
        mode: Mode,
    ) -> Result<(SegNetOutput, RawPrediction)> {
        let seg = self.segnet.forward(tape, images, mode)?;
        let raw = self.head.forward(tape, &seg.features)?;
        Ok((seg, raw))
    }

    /// All trainable parameters, named uniquely across both branches.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut params = self.segnet.named_params();
        params.extend(self.head.named_params());
        params
    }

    /// Convert a decoded box from grid-cell units to pixels.
    pub fn to_pixel_box(&self, b: &DecodedBox) -> DecodedBox {
        let cell = self.config.cell_pixels();
        DecodedBox {
            cx: b.cx * cell,
            cy: b.cy * cell,
            w: b.w * cell,
            h: b.h * cell,
            ..b.clone()
        }
    }

    /// Inference on one sample: soft mask, thresholded mask, and the best
    /// box per class in pixel units.
    pub fn predict(&self, sample: &Sample, mask_threshold: f64) -> Result<Prediction> {
        let tape = Tape::inference();
        let images = data::batch_images(&[sample])?;
        let (seg, raw) = self
            .forward(&tape, &images, Mode::Infer)
            .map_err(|e| Error::data(format!("sample {}: {e}", sample.id)))?;
        let soft_mask = seg.soft_mask.to_vec();
        let mask = metrics::binarize(&soft_mask, mask_threshold);
        let grid = self.head.grid();
        let decoded = grid.decode(&raw)?;
        let boxes = grid
            .select_best(&decoded[0])
            .into_iter()
            .map(|b| b.map(|b| self.to_pixel_box(&b)))
            .collect();
        Ok(Prediction {
            id: sample.id.clone(),
            soft_mask,
            mask,
            boxes,
        })
    }

    /// Evaluate on a set of samples. Segmentation metrics are computed only
    /// for mask-annotated samples; detection metrics only for classes with a
    /// ground-truth box. The disc radius for distance normalization comes
    /// from the sample annotation, falling back to the mask area.
    pub fn evaluate(&self, samples: &[&Sample], mask_threshold: f64) -> Result<EvalReport> {
        let mut rows = Vec::with_capacity(samples.len());
        for sample in samples {
            let pred = self.predict(sample, mask_threshold)?;
            let (iou, dice) = match &sample.mask {
                Some(gt) => {
                    let m = metrics::overlap_metrics(&pred.mask, gt)
                        .map_err(|e| Error::data(format!("sample {}: {e}", sample.id)))?;
                    (Some(m.iou), Some(m.dice))
                }
                None => (None, None),
            };
            let radius = sample.disc_radius.or_else(|| {
                sample
                    .mask
                    .as_ref()
                    .and_then(|m| metrics::od_radius_from_mask(m).ok())
            });
            let detections = (0..self.config.classes)
                .map(|class| {
                    let gt = sample.boxes.iter().find(|b| b.class == class);
                    metrics::assess_detection(pred.boxes[class].as_ref(), gt, radius)
                })
                .collect();
            rows.push(EvalRow {
                id: sample.id.clone(),
                iou,
                dice,
                detections,
            });
        }
        Ok(EvalReport::new(rows, self.config.classes))
    }
}
