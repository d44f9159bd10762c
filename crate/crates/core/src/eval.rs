//! Detection decoding, IoU, and mean average precision.
//!
//! Scoring follows the usual single-dataset protocol: detections are
//! matched to ground truth greedily in descending confidence order,
//! each ground-truth box may be claimed once, a match requires IoU at
//! or above the threshold, and average precision integrates the
//! precision envelope over all recall points. The mean runs over the
//! classes that actually appear in the ground truth.

use crate::error::{Error, Result};
use crate::fusion::sigmoid;
use crate::nets::DetectionGrid;

/// Axis-aligned ground-truth box with a class label. Coordinates are
/// `(x1, y1, x2, y2)` corners in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub class: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Scored detection in the same coordinate convention as [`GtBox`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl GtBox {
    fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

impl Detection {
    fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union of two corner-format boxes. Degenerate
/// boxes (non-positive extent) have zero area and zero overlap.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| ((r[2] - r[0]).max(0.0)) * ((r[3] - r[1]).max(0.0));
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Mean average precision over `num_classes` classes at one IoU
/// threshold. `detections[f]` and `ground_truth[f]` describe frame `f`
/// and the two lists must have equal length. Classes absent from the
/// ground truth are excluded from the mean; if no ground-truth box
/// exists at all the score is undefined and an error is returned.
pub fn compute_map(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GtBox>],
    num_classes: usize,
    iou_threshold: f64,
) -> Result<f64> {
    if detections.len() != ground_truth.len() {
        return Err(Error::Shape {
            op: "compute_map",
            detail: format!(
                "{} frames of detections vs {} frames of ground truth",
                detections.len(),
                ground_truth.len()
            ),
        });
    }
    if !(0.0..=1.0).contains(&iou_threshold) {
        return Err(Error::Config(format!("IoU threshold must be in [0, 1], got {iou_threshold}")));
    }
    for frame in detections {
        for d in frame {
            if !d.score.is_finite() {
                return Err(Error::NonFinite { stage: "detection scores".into() });
            }
            if d.class >= num_classes {
                return Err(Error::Config(format!(
                    "detection class {} out of range for {num_classes} classes",
                    d.class
                )));
            }
        }
    }
    for frame in ground_truth {
        for g in frame {
            if g.class >= num_classes {
                return Err(Error::Config(format!(
                    "ground-truth class {} out of range for {num_classes} classes",
                    g.class
                )));
            }
        }
    }

    let mut sum = 0.0;
    let mut classes_with_gt = 0usize;
    for class in 0..num_classes {
        let gt_count: usize =
            ground_truth.iter().map(|f| f.iter().filter(|g| g.class == class).count()).sum();
        if gt_count == 0 {
            continue;
        }
        classes_with_gt += 1;
        sum += average_precision(detections, ground_truth, class, gt_count, iou_threshold);
    }
    if classes_with_gt == 0 {
        return Err(Error::Empty("ground truth contains no boxes"));
    }
    Ok(sum / classes_with_gt as f64)
}

/// True/false-positive flags for one class, in descending score order.
fn match_flags(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GtBox>],
    class: usize,
    iou_threshold: f64,
) -> Vec<bool> {
    // (frame, detection) pairs of this class, sorted by score
    // descending; ties keep frame order then listing order so results
    // never depend on sort internals.
    let mut dets: Vec<(usize, usize, f64)> = Vec::new();
    for (f, frame) in detections.iter().enumerate() {
        for (i, d) in frame.iter().enumerate() {
            if d.class == class {
                dets.push((f, i, d.score));
            }
        }
    }
    dets.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });

    let mut claimed: Vec<Vec<bool>> =
        ground_truth.iter().map(|f| vec![false; f.len()]).collect();
    let mut flags = Vec::with_capacity(dets.len());
    for &(f, i, _) in &dets {
        let det = &detections[f][i];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in ground_truth[f].iter().enumerate() {
            if g.class != class || claimed[f][gi] {
                continue;
            }
            let overlap = iou(det.corners(), g.corners());
            if overlap >= iou_threshold && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, _)) => {
                claimed[f][gi] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

fn average_precision(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<GtBox>],
    class: usize,
    gt_count: usize,
    iou_threshold: f64,
) -> f64 {
    let flags = match_flags(detections, ground_truth, class, iou_threshold);
    if flags.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(flags.len());
    let mut recalls = Vec::with_capacity(flags.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for &hit in &flags {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precisions.push(tp as f64 / (tp + fp) as f64);
        recalls.push(tp as f64 / gt_count as f64);
    }
    // Precision envelope: each point takes the best precision achieved
    // at its recall or beyond.
    for i in (0..precisions.len() - 1).rev() {
        if precisions[i + 1] > precisions[i] {
            precisions[i] = precisions[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precisions.iter().zip(&recalls) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Turns a detection grid into scored boxes.
///
/// Each cell proposes at most one detection: its objectness
/// probability times the probability of its best class, with the box
/// decoded from the four regression channels (`dx`, `dy` offset the
/// cell centre; `log_w`, `log_h` size the box), all in feature-stride
/// units. Proposals below `score_floor` are dropped, then a per-class
/// greedy non-maximum suppression removes overlaps above `nms_iou`.
pub fn decode_detections(
    grid: &DetectionGrid,
    stride: usize,
    score_floor: f64,
    nms_iou: f64,
) -> Vec<Detection> {
    let mut proposals: Vec<Detection> = Vec::new();
    let s = stride as f64;
    for y in 0..grid.height() {
        for x in 0..grid.width() {
            let obj = sigmoid(grid.objectness_logit(y, x));
            // Softmax over class logits, tracking the best class.
            let mut max_logit = f64::NEG_INFINITY;
            for c in 0..grid.num_classes {
                max_logit = max_logit.max(grid.class_logit(c, y, x));
            }
            let mut denom = 0.0;
            let mut best_class = 0;
            let mut best_exp = 0.0;
            for c in 0..grid.num_classes {
                let e = (grid.class_logit(c, y, x) - max_logit).exp();
                denom += e;
                if e > best_exp {
                    best_exp = e;
                    best_class = c;
                }
            }
            let score = obj * best_exp / denom;
            if score < score_floor {
                continue;
            }
            let [dx, dy, log_w, log_h] = grid.box_offsets(y, x);
            let cx = (x as f64 + 0.5 + dx) * s;
            let cy = (y as f64 + 0.5 + dy) * s;
            let w = log_w.exp() * s;
            let h = log_h.exp() * s;
            proposals.push(Detection {
                class: best_class,
                score,
                x1: cx - 0.5 * w,
                y1: cy - 0.5 * h,
                x2: cx + 0.5 * w,
                y2: cy + 0.5 * h,
            });
        }
    }
    nms(proposals, nms_iou)
}

/// Greedy per-class non-maximum suppression; ties break toward the
/// earlier proposal so the output is deterministic.
fn nms(mut proposals: Vec<Detection>, nms_iou: f64) -> Vec<Detection> {
    proposals.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut keep: Vec<Detection> = Vec::new();
    'outer: for p in proposals {
        for k in &keep {
            if k.class == p.class && iou(k.corners(), p.corners()) > nms_iou {
                continue 'outer;
            }
        }
        keep.push(p);
    }
    keep
}
