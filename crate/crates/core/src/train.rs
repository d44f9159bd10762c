//! End-to-end training on synthetic clips.
//!
//! Each step samples a frame triplet from one clip: an older keyframe,
//! a newer keyframe and the frame detections are scored on. The graph
//! mirrors inference across one keyframe boundary — warp the old
//! keyframe's features onto the new one, blend by estimated quality,
//! warp the blend onto the scored frame, detect — so every network
//! (feature, flow, scale, quality, task) receives gradient from a
//! single detection loss. Running means over longer histories are
//! deliberately left out of the graph: the two-keyframe slice is the
//! part trackable with a loss on one frame, and inference composes the
//! same pieces recurrently.
//!
//! The first `pretrain_iters` steps use degenerate triplets (all three
//! frames equal), which trains detection through the full machinery
//! before motion is introduced; with `freeze_backbone` the feature and
//! flow networks never update at all, measuring what only the heads
//! can do on top of random features.

use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamGrads, Tape};
use crate::error::{Error, Result};
use crate::eval::GtBox;
use crate::nets::{save_params, NetId, Params};
use crate::synth::VideoClip;
use crate::tensor::{concat_channels, Tensor};

// ---------------------------------------------------------------------------
// Triplet sampling
// ---------------------------------------------------------------------------

/// Frame indices used by one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TripletIndices {
    pub key_old: usize,
    pub key_new: usize,
    pub cur: usize,
}

/// Draws the two keyframe offsets relative to the scored frame for
/// segment length `l`: the old keyframe lands in `[-l, -ceil(l/2)]`
/// and the new one in `[-floor(l/2), +floor(l/2)]`, both uniform. The
/// ranges reproduce, over random scored frames, the keyframe distances
/// inference actually sees with one keyframe per `l` frames.
pub fn sample_offsets(segment_len: usize, rng: &mut ChaCha8Rng) -> Result<(i64, i64)> {
    if segment_len == 0 {
        return Err(Error::Config("segment length must be at least 1".into()));
    }
    let l = segment_len as i64;
    let half_up = (l + 1) / 2;
    let half_down = l / 2;
    let d_old = rng.gen_range(-l..=-half_up);
    let d_new = rng.gen_range(-half_down..=half_down);
    Ok((d_old, d_new))
}

/// Samples a full triplet for a clip with `frames` frames, clamping
/// both keyframes into range (so early frames simply reuse frame 0 as
/// their history). The old keyframe never lands after the new one.
pub fn sample_triplet(
    frames: usize,
    segment_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TripletIndices> {
    if frames == 0 {
        return Err(Error::Empty("clip"));
    }
    let cur = rng.gen_range(0..frames) as i64;
    let (d_old, d_new) = sample_offsets(segment_len, rng)?;
    let last = frames as i64 - 1;
    Ok(TripletIndices {
        key_old: (cur + d_old).clamp(0, last) as usize,
        key_new: (cur + d_new).clamp(0, last) as usize,
        cur: cur as usize,
    })
}

// ---------------------------------------------------------------------------
// Detection loss
// ---------------------------------------------------------------------------

/// Relative weight of each loss component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub objectness: f64,
    pub class: f64,
    pub box_l1: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { objectness: 1.0, class: 1.0, box_l1: 0.5 }
    }
}

/// Per-cell supervision on a detection grid. A cell is positive when
/// its centre (in image pixels) falls inside a ground-truth box; where
/// boxes overlap, the later box in the list wins.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTargets {
    pub height: usize,
    pub width: usize,
    /// 0/1 objectness target per cell, row-major.
    pub objectness: Vec<f64>,
    pub positive: Vec<bool>,
    /// Class index per cell; meaningful only where positive.
    pub class: Vec<usize>,
    /// `(dx, dy, log_w, log_h)` regression targets in feature-stride
    /// units, relative to the cell centre; meaningful only where
    /// positive.
    pub boxes: Vec<[f64; 4]>,
}

/// Builds loss targets for one frame's ground truth on a `grid_h` x
/// `grid_w` grid whose cells are `stride` pixels wide.
pub fn build_targets(
    gt: &[GtBox],
    grid_h: usize,
    grid_w: usize,
    stride: usize,
    num_classes: usize,
) -> Result<LossTargets> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    for b in gt {
        if b.class >= num_classes {
            return Err(Error::Config(format!(
                "ground-truth class {} out of range for {num_classes} classes",
                b.class
            )));
        }
        if !(b.x2 > b.x1 && b.y2 > b.y1) {
            return Err(Error::Config(format!(
                "degenerate ground-truth box ({}, {}, {}, {})",
                b.x1, b.y1, b.x2, b.y2
            )));
        }
    }
    let cells = grid_h * grid_w;
    let s = stride as f64;
    let mut targets = LossTargets {
        height: grid_h,
        width: grid_w,
        objectness: vec![0.0; cells],
        positive: vec![false; cells],
        class: vec![0; cells],
        boxes: vec![[0.0; 4]; cells],
    };
    for y in 0..grid_h {
        for x in 0..grid_w {
            let cx = (x as f64 + 0.5) * s;
            let cy = (y as f64 + 0.5) * s;
            for b in gt {
                if cx >= b.x1 && cx <= b.x2 && cy >= b.y1 && cy <= b.y2 {
                    let i = y * grid_w + x;
                    targets.objectness[i] = 1.0;
                    targets.positive[i] = true;
                    targets.class[i] = b.class;
                    targets.boxes[i] = [
                        (b.x1 + b.x2) / 2.0 / s - (x as f64 + 0.5),
                        (b.y1 + b.y2) / 2.0 / s - (y as f64 + 0.5),
                        ((b.x2 - b.x1) / s).ln(),
                        ((b.y2 - b.y1) / s).ln(),
                    ];
                }
            }
        }
    }
    Ok(targets)
}

/// Detection loss on a raw grid tensor and its gradient with respect
/// to that tensor.
///
/// Components: binary cross-entropy on the objectness logit, averaged
/// over all cells; cross-entropy over class logits and an L1 penalty
/// on the four box channels, both averaged over positive cells (and
/// absent when the frame has none). With zero-initialised heads the
/// objectness component starts at exactly `ln 2`.
pub fn detection_loss(
    raw: &Tensor,
    num_classes: usize,
    targets: &LossTargets,
    weights: &LossWeights,
) -> Result<(f64, Tensor)> {
    let (c, h, w) = raw.shape();
    if c != num_classes + 5 {
        return Err(Error::Shape {
            op: "detection_loss",
            detail: format!("{c} channels cannot hold {num_classes} classes plus 5"),
        });
    }
    if h != targets.height || w != targets.width {
        return Err(Error::Shape {
            op: "detection_loss",
            detail: format!(
                "grid {h}x{w} vs targets {}x{}",
                targets.height, targets.width
            ),
        });
    }
    let cells = h * w;
    if targets.objectness.len() != cells || targets.positive.len() != cells {
        return Err(Error::DataLength { expected: cells, got: targets.objectness.len() });
    }

    let mut grad = vec![0.0; raw.len()];
    let n_pos = targets.positive.iter().filter(|&&p| p).count();

    // Objectness: mean BCE-with-logits over every cell.
    let mut loss_obj = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let z = raw.at(0, y, x);
            let t = targets.objectness[i];
            loss_obj += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
            let sig = 1.0 / (1.0 + (-z).exp());
            grad[raw.flat_index(0, y, x)] = weights.objectness * (sig - t) / cells as f64;
        }
    }
    loss_obj /= cells as f64;

    // Class and box terms: means over positive cells.
    let mut loss_cls = 0.0;
    let mut loss_box = 0.0;
    if n_pos > 0 {
        let base = 1 + num_classes;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !targets.positive[i] {
                    continue;
                }
                let target_class = targets.class[i];
                if target_class >= num_classes {
                    return Err(Error::Config(format!(
                        "target class {target_class} out of range"
                    )));
                }
                let logits: Vec<f64> =
                    (0..num_classes).map(|k| raw.at(1 + k, y, x)).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
                loss_cls += lse - logits[target_class];
                for (k, l) in logits.iter().enumerate() {
                    let p = (l - lse).exp();
                    let ind = if k == target_class { 1.0 } else { 0.0 };
                    grad[raw.flat_index(1 + k, y, x)] =
                        weights.class * (p - ind) / n_pos as f64;
                }

                let t = targets.boxes[i];
                for (k, tk) in t.iter().enumerate() {
                    let r = raw.at(base + k, y, x) - tk;
                    loss_box += r.abs();
                    let sign = if r > 0.0 {
                        1.0
                    } else if r < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    grad[raw.flat_index(base + k, y, x)] =
                        weights.box_l1 * sign / n_pos as f64;
                }
            }
        }
        loss_cls /= n_pos as f64;
        loss_box /= n_pos as f64;
    }

    let total =
        weights.objectness * loss_obj + weights.class * loss_cls + weights.box_l1 * loss_box;
    Ok((total, Tensor::from_vec(c, h, w, grad)?))
}

// ---------------------------------------------------------------------------
// One training step
// ---------------------------------------------------------------------------

/// Everything one step produces: the loss, parameter gradients, the
/// mean blend weight given to the new keyframe, and the distance to
/// the nearest non-smooth point of the graph (relu kinks, bilinear
/// cell boundaries, L1 corners) — finite-difference checks skip
/// instances whose margin is too small for two-sided differences.
#[derive(Debug)]
pub struct TrainStep {
    pub loss: f64,
    pub grads: ParamGrads,
    pub mean_weight: f64,
    pub kink_margin: f64,
}

/// Smallest distance of any displacement value to an integer: bilinear
/// interpolation is non-differentiable exactly at cell boundaries.
fn integer_margin(flow: &Tensor) -> f64 {
    flow.data().iter().map(|v| (v - v.round()).abs()).fold(f64::INFINITY, f64::min)
}

/// Smallest |prediction - target| over the box channels of positive
/// cells; the L1 penalty has a corner at zero residual.
fn box_residual_margin(raw: &Tensor, num_classes: usize, targets: &LossTargets) -> f64 {
    let base = 1 + num_classes;
    let mut margin = f64::INFINITY;
    for y in 0..targets.height {
        for x in 0..targets.width {
            let i = y * targets.width + x;
            if !targets.positive[i] {
                continue;
            }
            for (k, tk) in targets.boxes[i].iter().enumerate() {
                margin = margin.min((raw.at(base + k, y, x) - tk).abs());
            }
        }
    }
    margin
}

/// Builds the full training graph for one triplet of images, runs it
/// forward and backward, and returns the step summary. `gt_cur` is the
/// ground truth of the scored frame.
pub fn forward_backward(
    params: &Params,
    key_old: &Tensor,
    key_new: &Tensor,
    cur: &Tensor,
    gt_cur: &[GtBox],
    weights: &LossWeights,
) -> Result<TrainStep> {
    let mut tape = Tape::new(params);
    let i_old = tape.input(key_old.clone());
    let i_new = tape.input(key_new.clone());

    let f_old = tape.stack(NetId::Feature, i_old)?;
    let f_new = tape.stack(NetId::Feature, i_new)?;

    // Carry the old keyframe's features onto the new keyframe.
    let pair_keys = tape.input(concat_channels(key_new, key_old)?);
    let trunk_keys = tape.stack(NetId::FlowTrunk, pair_keys)?;
    let flow_keys = tape.conv_layer(NetId::FlowHead, 0, trunk_keys)?;
    let scale_keys = tape.conv_layer(NetId::ScaleHead, 0, trunk_keys)?;
    let f_old_warped = tape.warp(f_old, flow_keys, scale_keys)?;

    // Blend by estimated quality.
    let q_old = tape.stack(NetId::Quality, f_old_warped)?;
    let q_new = tape.stack(NetId::Quality, f_new)?;
    let w = tape.pair_softmax(q_old, q_new)?;
    let f_task = tape.fuse(f_old_warped, f_new, w)?;

    // Carry the blend onto the scored frame and detect there.
    let pair_cur = tape.input(concat_channels(cur, key_new)?);
    let trunk_cur = tape.stack(NetId::FlowTrunk, pair_cur)?;
    let flow_cur = tape.conv_layer(NetId::FlowHead, 0, trunk_cur)?;
    let scale_cur = tape.conv_layer(NetId::ScaleHead, 0, trunk_cur)?;
    let f_cur = tape.warp(f_task, flow_cur, scale_cur)?;

    let grid = tape.stack(NetId::Task, f_cur)?;

    let raw = tape.value(grid);
    let targets =
        build_targets(gt_cur, raw.height(), raw.width(), params.feature_stride(), params.num_classes())?;
    let (loss, grad) = detection_loss(raw, params.num_classes(), &targets, weights)?;

    let mean_weight = tape.value(w).mean();
    let kink_margin = tape
        .min_relu_margin()
        .min(integer_margin(tape.value(flow_keys)))
        .min(integer_margin(tape.value(flow_cur)))
        .min(box_residual_margin(tape.value(grid), params.num_classes(), &targets));

    let root = tape.loss(grid, loss, grad)?;
    let grads = tape.backward(root)?;
    Ok(TrainStep { loss, grads, mean_weight, kink_margin })
}

/// [`forward_backward`] on frames of a clip.
pub fn triplet_step(
    params: &Params,
    clip: &VideoClip,
    t: TripletIndices,
    weights: &LossWeights,
) -> Result<TrainStep> {
    let n = clip.frames.len();
    if t.key_old >= n || t.key_new >= n || t.cur >= n {
        return Err(Error::Config(format!(
            "triplet ({}, {}, {}) out of range for a {n}-frame clip",
            t.key_old, t.key_new, t.cur
        )));
    }
    forward_backward(
        params,
        &clip.frames[t.key_old],
        &clip.frames[t.key_new],
        &clip.frames[t.cur],
        &clip.ground_truth[t.cur],
        weights,
    )
}

// ---------------------------------------------------------------------------
// The optimiser loop
// ---------------------------------------------------------------------------

/// One learning-rate phase: applies while the iteration counter is
/// below `until`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrPhase {
    pub until: usize,
    pub lr: f64,
}

/// Parses a schedule of the form `"1400:0.02,2000:0.004"`.
pub fn parse_schedule(s: &str) -> Result<Vec<LrPhase>> {
    let mut phases = Vec::new();
    for part in s.split(',') {
        let (until, lr) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("bad schedule phase '{part}', want UNTIL:LR")))?;
        let until = until
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Config(format!("bad iteration count '{until}': {e}")))?;
        let lr = lr
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::Config(format!("bad learning rate '{lr}': {e}")))?;
        phases.push(LrPhase { until, lr });
    }
    Ok(phases)
}

/// Learning rate in force at `iter`: the rate of the first phase whose
/// `until` bound has not been reached.
pub fn lr_at(schedule: &[LrPhase], iter: usize) -> Result<f64> {
    schedule
        .iter()
        .find(|p| iter < p.until)
        .map(|p| p.lr)
        .ok_or_else(|| Error::Config(format!("iteration {iter} past the end of the schedule")))
}

/// Full training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Segment length the triplet offsets are drawn for.
    pub segment_len: usize,
    /// Leading iterations that use degenerate (single-frame) triplets.
    pub pretrain_iters: usize,
    /// Learning-rate phases over the whole run; the last `until` is
    /// the total iteration count.
    pub schedule: Vec<LrPhase>,
    pub weights: LossWeights,
    /// Learning-rate multiplier for the quality network. Its gradient
    /// arrives through the blend-weight sigmoid and is orders of
    /// magnitude smaller than the backbone's; at multiplier 1 the
    /// blend stays near one half for any feasible iteration budget.
    pub quality_lr_boost: f64,
    /// Keep the feature and flow networks at their initial (random)
    /// values for the whole run, training only the quality and task
    /// heads. Exists to measure how much end-to-end optimisation of
    /// the backbone is worth.
    pub freeze_backbone: bool,
    /// Trace sampling period for the loss curve.
    pub log_every: usize,
    /// When set, a checkpoint is written into this directory at every
    /// learning-rate phase boundary, and the last finite state is
    /// saved if the loss diverges.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    /// Defaults sized for the desk-scale model on 48x48 clips: two
    /// thousand iterations at 1e-2, then one thousand at 1e-3, plain
    /// SGD, one triplet per step.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            seed,
            segment_len: 10,
            pretrain_iters: 400,
            schedule: vec![LrPhase { until: 2000, lr: 0.01 }, LrPhase { until: 3000, lr: 0.001 }],
            weights: LossWeights::default(),
            quality_lr_boost: 10.0,
            freeze_backbone: false,
            log_every: 50,
            checkpoint_dir: None,
        }
    }

    pub fn total_iters(&self) -> usize {
        self.schedule.last().map(|p| p.until).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 {
            return Err(Error::Config("segment length must be at least 1".into()));
        }
        if self.schedule.is_empty() {
            return Err(Error::Config("empty learning-rate schedule".into()));
        }
        let mut prev = 0;
        for p in &self.schedule {
            if p.until <= prev {
                return Err(Error::Config(
                    "schedule phase boundaries must be strictly increasing".into(),
                ));
            }
            if !(p.lr.is_finite() && p.lr > 0.0) {
                return Err(Error::Config(format!("bad learning rate {}", p.lr)));
            }
            prev = p.until;
        }
        if self.pretrain_iters > self.total_iters() {
            return Err(Error::Config(format!(
                "warm-up ({}) exceeds the total iteration count ({})",
                self.pretrain_iters,
                self.total_iters()
            )));
        }
        if !(self.quality_lr_boost.is_finite() && self.quality_lr_boost > 0.0) {
            return Err(Error::Config(format!(
                "quality learning-rate boost must be positive, got {}",
                self.quality_lr_boost
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Loss at every iteration, in order.
    pub losses: Vec<f64>,
    /// Sampled `(iter, loss, lr)` rows for the loss curve.
    pub trace: Vec<LossPoint>,
}

impl TrainReport {
    /// Mean loss over the last `window` iterations.
    pub fn final_mean(&self, window: usize) -> f64 {
        let n = self.losses.len();
        let w = window.min(n).max(1);
        self.losses[n - w..].iter().sum::<f64>() / w as f64
    }

    /// Mean loss over the first `window` iterations.
    pub fn initial_mean(&self, window: usize) -> f64 {
        let w = window.min(self.losses.len()).max(1);
        self.losses[..w].iter().sum::<f64>() / w as f64
    }
}

/// Applies one plain SGD update. With `freeze_backbone` the feature
/// and flow networks are skipped and only the quality and task heads
/// move; fixed biases are never touched (their gradient slots are zero
/// anyway, this just avoids the writes).
pub fn sgd_step(params: &mut Params, grads: &ParamGrads, lr: f64, freeze_backbone: bool) {
    const BACKBONE: [NetId; 4] =
        [NetId::Feature, NetId::FlowTrunk, NetId::FlowHead, NetId::ScaleHead];
    for lg in grads.layers() {
        if freeze_backbone && BACKBONE.contains(&lg.net) {
            continue;
        }
        let layer = params.layer_mut(lg.net, lg.index);
        for (v, g) in layer.bank.weights_mut().iter_mut().zip(&lg.weights) {
            *v -= lr * g;
        }
        if layer.train_bias {
            for (v, g) in layer.bias.iter_mut().zip(&lg.bias) {
                *v -= lr * g;
            }
        }
    }
}

/// Runs the optimiser loop over a set of clips, updating `params` in
/// place and marking them trained. Deterministic for a given seed.
pub fn train(params: &mut Params, clips: &[VideoClip], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    params.validate()?;
    if clips.is_empty() {
        return Err(Error::Empty("training clips"));
    }
    for clip in clips {
        if clip.frames.is_empty() {
            return Err(Error::Empty("training clip frames"));
        }
        if clip.ground_truth.len() != clip.frames.len() {
            return Err(Error::DataLength {
                expected: clip.frames.len(),
                got: clip.ground_truth.len(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total = cfg.total_iters();
    let mut losses = Vec::with_capacity(total);
    let mut trace = Vec::new();

    for iter in 0..total {
        let lr = lr_at(&cfg.schedule, iter)?;
        let clip = &clips[rng.gen_range(0..clips.len())];
        let triplet = if iter < cfg.pretrain_iters {
            let t = rng.gen_range(0..clip.frames.len());
            TripletIndices { key_old: t, key_new: t, cur: t }
        } else {
            sample_triplet(clip.frames.len(), cfg.segment_len, &mut rng)?
        };
        let mut step = triplet_step(params, clip, triplet, &cfg.weights)?;
        if cfg.quality_lr_boost != 1.0 {
            step.grads.scale_net(NetId::Quality, cfg.quality_lr_boost);
        }
        if !step.loss.is_finite() || !step.grads.is_finite() {
            // `params` still holds the last state that produced a
            // finite loss; preserve it before bailing out.
            if let Some(dir) = &cfg.checkpoint_dir {
                let mut snapshot = params.clone();
                snapshot.trained = true;
                save_params(dir.join("checkpoint-abort.ckpt"), &snapshot)?;
            }
            return Err(Error::NonFinite { stage: format!("training iteration {iter}") });
        }
        sgd_step(params, &step.grads, lr, cfg.freeze_backbone);
        losses.push(step.loss);
        if iter % cfg.log_every == 0 || iter + 1 == total {
            trace.push(LossPoint { iter, loss: step.loss, lr });
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.schedule.iter().any(|p| p.until == iter + 1) {
                let mut snapshot = params.clone();
                snapshot.trained = true;
                save_params(dir.join(format!("checkpoint-{:06}.ckpt", iter + 1)), &snapshot)?;
            }
        }
    }

    params.trained = true;
    Ok(TrainReport { losses, trace })
}

/// Writes the sampled loss curve as CSV.
pub fn write_loss_csv<W: Write>(w: &mut W, report: &TrainReport) -> Result<()> {
    writeln!(w, "iteration,loss,lr")?;
    for p in &report.trace {
        writeln!(w, "{},{:.6},{}", p.iter, p.loss, p.lr)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck::first_grad_mismatch;
    use crate::nets::{desk_params, tiny_params};
    use crate::synth::{render, training_suite};
    use rand_distr::{Distribution, Normal};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn offsets_cover_their_ranges_roughly_uniformly() {
        let mut r = rng(11);
        let l = 10usize;
        let mut old_counts = std::collections::HashMap::new();
        let mut new_counts = std::collections::HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            let (d_old, d_new) = sample_offsets(l, &mut r).unwrap();
            assert!((-10..=-5).contains(&d_old), "old offset {d_old} out of range");
            assert!((-5..=5).contains(&d_new), "new offset {d_new} out of range");
            *old_counts.entry(d_old).or_insert(0usize) += 1;
            *new_counts.entry(d_new).or_insert(0usize) += 1;
        }
        assert_eq!(old_counts.len(), 6, "every old offset should appear");
        assert_eq!(new_counts.len(), 11, "every new offset should appear");
        for (d, n) in &old_counts {
            let expected = draws / 6;
            assert!(
                (*n as i64 - expected as i64).abs() < 300,
                "old offset {d} drawn {n} times, expected about {expected}"
            );
        }
        for (d, n) in &new_counts {
            let expected = draws / 11;
            assert!(
                (*n as i64 - expected as i64).abs() < 250,
                "new offset {d} drawn {n} times, expected about {expected}"
            );
        }
    }

    #[test]
    fn triplets_stay_in_range_and_ordered() {
        let mut r = rng(3);
        for _ in 0..2_000 {
            let t = sample_triplet(30, 10, &mut r).unwrap();
            assert!(t.key_old <= t.key_new, "old keyframe after new: {t:?}");
            assert!(t.key_new < 30 && t.cur < 30, "index out of range: {t:?}");
        }
        // A one-frame clip degenerates to a still image.
        let t = sample_triplet(1, 10, &mut r).unwrap();
        assert_eq!((t.key_old, t.key_new, t.cur), (0, 0, 0));
    }

    #[test]
    fn targets_mark_cells_whose_centres_fall_inside_the_box() {
        let gt = vec![GtBox { class: 1, x1: 4.0, y1: 4.0, x2: 12.0, y2: 12.0 }];
        let t = build_targets(&gt, 4, 4, 4, 2).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = (1..=2).contains(&x) && (1..=2).contains(&y);
                assert_eq!(
                    t.positive[y * 4 + x],
                    want,
                    "cell ({y}, {x}) positive flag should be {want}"
                );
            }
        }
        let i = 4 + 1; // cell (1, 1), centre at pixel (6, 6)
        assert_eq!(t.class[i], 1);
        let b = t.boxes[i];
        assert!((b[0] - 0.5).abs() < 1e-12, "dx target was {}", b[0]);
        assert!((b[1] - 0.5).abs() < 1e-12, "dy target was {}", b[1]);
        assert!((b[2] - (2.0f64).ln()).abs() < 1e-12, "log-width target was {}", b[2]);
    }

    #[test]
    fn later_boxes_overwrite_earlier_ones() {
        let gt = vec![
            GtBox { class: 0, x1: 0.0, y1: 0.0, x2: 16.0, y2: 16.0 },
            GtBox { class: 1, x1: 0.0, y1: 0.0, x2: 8.0, y2: 8.0 },
        ];
        let t = build_targets(&gt, 4, 4, 4, 2).unwrap();
        assert_eq!(t.class[0], 1, "cell (0,0) lies in both boxes; the later one wins");
        assert_eq!(t.class[3 * 4 + 3], 0, "cell (3,3) lies only in the first box");
    }

    #[test]
    fn loss_on_zero_grid_without_objects_is_exactly_log_two() {
        let raw = Tensor::zeros(7, 4, 4);
        let t = build_targets(&[], 4, 4, 4, 2).unwrap();
        let (loss, grad) = detection_loss(&raw, 2, &t, &LossWeights::default()).unwrap();
        assert!(
            (loss - std::f64::consts::LN_2).abs() < 1e-12,
            "all-negative objectness at zero logits should cost ln 2, got {loss}"
        );
        // Gradient only on the objectness channel.
        for y in 0..4 {
            for x in 0..4 {
                assert!((grad.at(0, y, x) - 0.5 / 16.0).abs() < 1e-12);
                for c in 1..7 {
                    assert_eq!(grad.at(c, y, x), 0.0);
                }
            }
        }
    }

    #[test]
    fn loss_on_zero_grid_with_objects_matches_hand_computation() {
        // One box covering exactly the four centre cells of a 4x4 grid.
        let gt = vec![GtBox { class: 1, x1: 4.0, y1: 4.0, x2: 12.0, y2: 12.0 }];
        let t = build_targets(&gt, 4, 4, 4, 2).unwrap();
        let raw = Tensor::zeros(7, 4, 4);
        let weights = LossWeights { objectness: 1.0, class: 1.0, box_l1: 0.5 };
        let (loss, _) = detection_loss(&raw, 2, &t, &weights).unwrap();
        // Objectness: ln 2 everywhere (BCE at logit 0 for either target).
        let want_obj = std::f64::consts::LN_2;
        // Class: ln 2 at zero logits over two classes.
        let want_cls = std::f64::consts::LN_2;
        // Box: |0 - t| summed over channels, identical in all 4 positive
        // cells: |dx| + |dy| + 2 |ln 2|.
        let want_box = 0.5 + 0.5 + 2.0 * std::f64::consts::LN_2;
        let want = want_obj + want_cls + 0.5 * want_box;
        assert!((loss - want).abs() < 1e-12, "loss {loss} should be {want}");
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut r = rng(21);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let raw = Tensor::from_fn(9, 5, 6, |_, _, _| normal.sample(&mut r));
        let gt = vec![
            GtBox { class: 2, x1: 3.0, y1: 2.0, x2: 13.0, y2: 11.0 },
            GtBox { class: 0, x1: 10.0, y1: 10.0, x2: 22.0, y2: 19.0 },
        ];
        let t = build_targets(&gt, 5, 6, 4, 4).unwrap();
        let weights = LossWeights { objectness: 1.0, class: 0.7, box_l1: 0.4 };
        let (_, grad) = detection_loss(&raw, 4, &t, &weights).unwrap();
        let xs: Vec<f64> = raw.data().to_vec();
        let mismatch = first_grad_mismatch(&xs, grad.data(), 1e-6, 1e-6, 1, |v| {
            let raw = Tensor::from_vec(9, 5, 6, v.to_vec()).unwrap();
            detection_loss(&raw, 4, &t, &weights).unwrap().0
        });
        assert!(mismatch.is_none(), "loss gradient disagrees with finite differences: {mismatch:?}");
    }

    /// Deterministic pair of 8x8 test images with gentle structure.
    fn test_images() -> (Tensor, Tensor, Tensor) {
        let img = |phase: f64| {
            Tensor::from_fn(3, 8, 8, |c, y, x| {
                0.4 + 0.3 * ((x as f64 * 0.7 + y as f64 * 1.3 + c as f64 + phase).sin())
            })
        };
        (img(0.0), img(0.35), img(0.7))
    }

    #[test]
    fn composed_graph_gradients_match_finite_differences() {
        // Random parameters rather than the zero-initialised heads, so
        // every path (including boxes and flow) carries signal. Central
        // differences are meaningless within h of a relu kink or an L1
        // corner, so walk noise seeds deterministically until the graph
        // sits clear of every non-smooth point.
        let (a, b, c) = test_images();
        let gt = vec![GtBox { class: 1, x1: 1.5, y1: 2.0, x2: 6.5, y2: 6.0 }];
        let weights = LossWeights::default();
        let (params, step) = (40..80)
            .find_map(|noise_seed| {
                let mut params = tiny_params(3);
                let mut r = rng(noise_seed);
                let normal = Normal::new(0.0, 0.05).unwrap();
                let mut values = params.trainable_values();
                for v in &mut values {
                    *v += normal.sample(&mut r);
                }
                params.set_trainable_values(&values).unwrap();
                let step = forward_backward(&params, &a, &b, &c, &gt, &weights).unwrap();
                (step.kink_margin > 1e-3).then_some((params, step))
            })
            .expect("some noise seed should produce a kink-free instance");
        let values = params.trainable_values();
        assert!(step.mean_weight > 0.0 && step.mean_weight < 1.0);

        // Flatten analytic gradients in trainable order.
        let mut analytic = Vec::with_capacity(values.len());
        for (net, index, layer) in params.layers() {
            let lg = step.grads.layer(net, index);
            analytic.extend_from_slice(&lg.weights);
            if layer.train_bias {
                analytic.extend_from_slice(&lg.bias);
            }
        }
        assert_eq!(analytic.len(), values.len());

        let base = params.clone();
        let mismatch = first_grad_mismatch(&values, &analytic, 1e-5, 1e-4, 1, |v| {
            let mut p = base.clone();
            p.set_trainable_values(v).unwrap();
            forward_backward(&p, &a, &b, &c, &gt, &weights).unwrap().loss
        });
        assert!(
            mismatch.is_none(),
            "graph gradient disagrees with finite differences: {mismatch:?}"
        );
    }

    #[test]
    fn short_run_reduces_the_loss() {
        let clips: Vec<_> =
            training_suite(7, 2).iter().map(|s| render(s).unwrap()).collect();
        let mut params = desk_params(7);
        let cfg = TrainConfig {
            seed: 5,
            segment_len: 10,
            pretrain_iters: 80,
            schedule: vec![LrPhase { until: 160, lr: 0.02 }, LrPhase { until: 220, lr: 0.005 }],
            weights: LossWeights::default(),
            quality_lr_boost: 10.0,
            freeze_backbone: false,
            log_every: 40,
            checkpoint_dir: None,
        };
        let report = train(&mut params, &clips, &cfg).unwrap();
        assert!(params.trained, "training must mark the parameters trained");
        assert_eq!(report.losses.len(), 220);
        let start = report.initial_mean(20);
        let end = report.final_mean(20);
        assert!(
            end < 0.7 * start,
            "loss should drop by at least 30%: started near {start:.4}, ended near {end:.4}"
        );
        let last = report.trace.last().unwrap();
        assert_eq!(last.iter, 219, "trace must include the final iteration");
    }

    #[test]
    fn frozen_backbone_does_not_move() {
        let clips: Vec<_> =
            training_suite(9, 1).iter().map(|s| render(s).unwrap()).collect();
        let mut params = desk_params(2);
        let before: Vec<f64> = params
            .feature
            .iter()
            .chain(&params.flow_trunk)
            .chain(std::iter::once(&params.flow_head))
            .flat_map(|l| l.bank.weights().to_vec())
            .collect();
        let task_before: Vec<f64> =
            params.task.iter().flat_map(|l| l.bank.weights().to_vec()).collect();
        let cfg = TrainConfig {
            seed: 1,
            segment_len: 10,
            pretrain_iters: 0,
            schedule: vec![LrPhase { until: 25, lr: 0.01 }],
            weights: LossWeights::default(),
            quality_lr_boost: 10.0,
            freeze_backbone: true,
            log_every: 10,
            checkpoint_dir: None,
        };
        train(&mut params, &clips, &cfg).unwrap();
        let after: Vec<f64> = params
            .feature
            .iter()
            .chain(&params.flow_trunk)
            .chain(std::iter::once(&params.flow_head))
            .flat_map(|l| l.bank.weights().to_vec())
            .collect();
        let task_after: Vec<f64> =
            params.task.iter().flat_map(|l| l.bank.weights().to_vec()).collect();
        assert_eq!(before, after, "frozen feature and flow weights must stay bit-identical");
        assert_ne!(task_before, task_after, "task head should still learn");
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let clips: Vec<_> =
            training_suite(4, 1).iter().map(|s| render(s).unwrap()).collect();
        let cfg = TrainConfig {
            seed: 8,
            segment_len: 5,
            pretrain_iters: 5,
            schedule: vec![LrPhase { until: 15, lr: 0.02 }],
            weights: LossWeights::default(),
            quality_lr_boost: 10.0,
            freeze_backbone: false,
            log_every: 5,
            checkpoint_dir: None,
        };
        let mut p1 = desk_params(0);
        let r1 = train(&mut p1, &clips, &cfg).unwrap();
        let mut p2 = desk_params(0);
        let r2 = train(&mut p2, &clips, &cfg).unwrap();
        assert_eq!(r1.losses, r2.losses, "loss sequences must match bit for bit");
        assert_eq!(
            p1.trainable_values(),
            p2.trainable_values(),
            "trained parameters must match bit for bit"
        );
    }

    #[test]
    fn schedule_parsing_round_trips_and_rejects_garbage() {
        let phases = parse_schedule("100:0.01, 200:0.001").unwrap();
        assert_eq!(
            phases,
            vec![LrPhase { until: 100, lr: 0.01 }, LrPhase { until: 200, lr: 0.001 }]
        );
        assert!(parse_schedule("abc").is_err(), "missing colon must be rejected");
        assert!(parse_schedule("10:fast").is_err(), "non-numeric rate must be rejected");
    }

    #[test]
    fn config_validation_rejects_inconsistencies() {
        let mut cfg = TrainConfig::desk(0);
        cfg.schedule = vec![];
        assert!(cfg.validate().is_err(), "empty schedule");

        let mut cfg = TrainConfig::desk(0);
        cfg.schedule = vec![LrPhase { until: 100, lr: 0.1 }, LrPhase { until: 100, lr: 0.01 }];
        assert!(cfg.validate().is_err(), "non-increasing boundaries");

        let mut cfg = TrainConfig::desk(0);
        cfg.pretrain_iters = cfg.total_iters() + 1;
        assert!(cfg.validate().is_err(), "warm-up longer than the run");

        assert!(TrainConfig::desk(0).validate().is_ok());
    }

    #[test]
    fn loss_csv_has_header_and_rows() {
        let report = TrainReport {
            losses: vec![1.0, 0.5],
            trace: vec![
                LossPoint { iter: 0, loss: 1.0, lr: 0.02 },
                LossPoint { iter: 1, loss: 0.5, lr: 0.02 },
            ],
        };
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &report).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,loss,lr\n"));
        assert_eq!(text.lines().count(), 3);
    }
}
