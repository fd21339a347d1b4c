//! Evaluation metrics: mask overlap (IoU, Dice), center-distance detection
//! metrics, and the per-sample evaluation report with CSV output.
//!
//! Overlap metrics are computed by exact pixel counting, so two
//! implementations that agree on the binarized masks agree on the metrics
//! bit for bit. Detection distances are in pixels of the preprocessed image;
//! normalized distances divide by the image's disc radius, and a detection
//! counts as a hit when its center lies within one disc radius of the ground
//! truth center (inclusive).

use std::fmt::Write as _;

use crate::data;
use crate::dethead::{DecodedBox, GtBox};
use crate::error::{Error, Result};

/// Threshold a soft mask at `threshold` (inclusive) to exact {0, 1} values.
pub fn binarize(soft: &[f64], threshold: f64) -> Vec<f64> {
    soft.iter()
        .map(|v| if *v >= threshold { 1.0 } else { 0.0 })
        .collect()
}

fn require_binary(name: &str, mask: &[f64]) -> Result<()> {
    if mask.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::data(format!("{name} mask is not binary")));
    }
    Ok(())
}

/// Intersection-over-union and Dice of two binary masks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapMetrics {
    pub iou: f64,
    pub dice: f64,
    /// Both masks were empty; the metrics are reported as perfect agreement.
    pub both_empty: bool,
}

/// Exact-count overlap between equal-length binary masks.
pub fn overlap_metrics(pred: &[f64], gt: &[f64]) -> Result<OverlapMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::data(format!(
            "mask lengths differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    require_binary("predicted", pred)?;
    require_binary("ground-truth", gt)?;
    let mut inter = 0u64;
    let mut pred_count = 0u64;
    let mut gt_count = 0u64;
    for (p, g) in pred.iter().zip(gt) {
        if *p == 1.0 {
            pred_count += 1;
        }
        if *g == 1.0 {
            gt_count += 1;
        }
        if *p == 1.0 && *g == 1.0 {
            inter += 1;
        }
    }
    let union = pred_count + gt_count - inter;
    if union == 0 {
        return Ok(OverlapMetrics {
            iou: 1.0,
            dice: 1.0,
            both_empty: true,
        });
    }
    Ok(OverlapMetrics {
        iou: inter as f64 / union as f64,
        dice: 2.0 * inter as f64 / (pred_count + gt_count) as f64,
        both_empty: false,
    })
}

/// Disc radius implied by a binary mask's area (`√(area/π)`).
pub fn od_radius_from_mask(mask: &[f64]) -> Result<f64> {
    require_binary("disc", mask)?;
    let area = mask.iter().filter(|v| **v == 1.0).count();
    if area == 0 {
        return Err(Error::data("cannot derive a radius from an empty mask"));
    }
    Ok((area as f64 / std::f64::consts::PI).sqrt())
}

/// Detection quality for one class of one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DetectionOutcome {
    /// Center distance in pixels; `None` when there was no ground truth or
    /// no detection to measure.
    pub distance: Option<f64>,
    /// Distance divided by the disc radius; needs both a detection and a
    /// known radius.
    pub normalized: Option<f64>,
    /// Whether the center landed within one disc radius. `Some(false)` also
    /// covers a missing detection for present ground truth.
    pub hit: Option<bool>,
    /// Score of the selected box, when there is one.
    pub confidence: Option<f64>,
}

/// Compare the best detection for a class against its ground truth box.
pub fn assess_detection(
    pred: Option<&DecodedBox>,
    gt: Option<&GtBox>,
    radius: Option<f64>,
) -> DetectionOutcome {
    let Some(gt) = gt else {
        return DetectionOutcome::default();
    };
    match pred {
        None => DetectionOutcome {
            hit: Some(false),
            ..DetectionOutcome::default()
        },
        Some(p) => {
            let distance = ((p.cx - gt.cx).powi(2) + (p.cy - gt.cy).powi(2)).sqrt();
            DetectionOutcome {
                distance: Some(distance),
                normalized: radius.map(|r| distance / r),
                hit: radius.map(|r| distance <= r),
                confidence: Some(p.confidence),
            }
        }
    }
}

/// Evaluation of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    /// One outcome per class, indexed by class id.
    pub detections: Vec<DetectionOutcome>,
}

/// Aggregate statistics over the rows of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalAggregate {
    pub mean_iou: Option<f64>,
    pub mean_dice: Option<f64>,
    /// Per class: mean distance over measured detections.
    pub mean_distance: Vec<Option<f64>>,
    /// Per class: mean normalized distance over measured detections.
    pub mean_normalized: Vec<Option<f64>>,
    /// Per class: percentage of evaluated samples whose detection hit
    /// (missing detections count as misses).
    pub hit_rate_percent: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub classes: usize,
}

impl EvalReport {
    pub fn new(rows: Vec<EvalRow>, classes: usize) -> EvalReport {
        EvalReport { rows, classes }
    }

    pub fn aggregate(&self) -> EvalAggregate {
        let mean = |values: Vec<f64>| -> Option<f64> {
            if values.is_empty() {
                None
            } else {
                Some(values.iter().sum::<f64>() / values.len() as f64)
            }
        };
        let mut agg = EvalAggregate {
            mean_iou: mean(self.rows.iter().filter_map(|r| r.iou).collect()),
            mean_dice: mean(self.rows.iter().filter_map(|r| r.dice).collect()),
            mean_distance: Vec::new(),
            mean_normalized: Vec::new(),
            hit_rate_percent: Vec::new(),
        };
        for class in 0..self.classes {
            let outcomes: Vec<&DetectionOutcome> = self
                .rows
                .iter()
                .filter_map(|r| r.detections.get(class))
                .collect();
            agg.mean_distance
                .push(mean(outcomes.iter().filter_map(|o| o.distance).collect()));
            agg.mean_normalized
                .push(mean(outcomes.iter().filter_map(|o| o.normalized).collect()));
            let evaluated = outcomes.iter().filter(|o| o.hit.is_some()).count();
            let hits = outcomes.iter().filter(|o| o.hit == Some(true)).count();
            agg.hit_rate_percent.push(if evaluated == 0 {
                None
            } else {
                Some(100.0 * hits as f64 / evaluated as f64)
            });
        }
        agg
    }

    /// Render the report as CSV: a units comment, a header, one row per
    /// sample, and a final aggregate row. Absent values are empty cells.
    pub fn to_csv(&self) -> String {
        fn cell<T: std::fmt::Display>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        let mut out = String::new();
        out.push_str(
            "# distances in pixels of the preprocessed image; dist_norm divides by the \
             disc radius; hit means the center landed within one disc radius\n",
        );
        out.push_str("id,iou,dice");
        for class in 0..self.classes {
            let name = data::class_name(class);
            write!(out, ",{name}_dist,{name}_dist_norm,{name}_hit,{name}_conf").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "{},{},{}", row.id, cell(row.iou), cell(row.dice)).unwrap();
            for class in 0..self.classes {
                let d = row.detections.get(class).copied().unwrap_or_default();
                write!(
                    out,
                    ",{},{},{},{}",
                    cell(d.distance),
                    cell(d.normalized),
                    cell(d.hit.map(|h| if h { 1 } else { 0 })),
                    cell(d.confidence)
                )
                .unwrap();
            }
            out.push('\n');
        }
        let agg = self.aggregate();
        write!(
            out,
            "aggregate,{},{}",
            cell(agg.mean_iou),
            cell(agg.mean_dice)
        )
        .unwrap();
        for class in 0..self.classes {
            write!(
                out,
                ",{},{},{},",
                cell(agg.mean_distance[class]),
                cell(agg.mean_normalized[class]),
                cell(agg.hit_rate_percent[class])
            )
            .unwrap();
        }
        out.push('\n');
        out
    }
}
