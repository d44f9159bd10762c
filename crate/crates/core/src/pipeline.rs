//! Sparse-keyframe inference over whole clips.
//!
//! The expensive feature network runs only on one keyframe per
//! segment. Every other frame receives the keyframe's task feature
//! through a cheap displacement estimate and a bilinear warp. Across
//! segment boundaries the carried state is not replaced outright:
//! the previous state is warped onto the new keyframe, both are scored
//! by the quality network, blended with the resulting per-cell weights,
//! and a scalar memory gate decides how much of the blend (as opposed
//! to the fresh feature) is carried forward. Ablation modes switch the
//! individual ingredients off so their contribution can be measured.

use std::io::Write;

use crate::error::{Error, Result};
use crate::eval::{compute_map, decode_detections, Detection};
use crate::fusion::{adaptive_weights, fuse, impression_update};
use crate::nets::Params;
use crate::synth::VideoClip;
use crate::tensor::Tensor;
use crate::warp::{bilinear_warp, unit_scale};

/// How per-frame features are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Feature network on every frame; nothing is propagated.
    PerFrame,
    /// Keyframe features are warped to the other frames, but each new
    /// keyframe replaces the carried state outright.
    Propagate,
    /// Like the full mechanism, with the quality comparison replaced
    /// by a fixed blend weight.
    FixedBlend,
    /// Quality-weighted blending plus the memory gate.
    Impression,
}

impl Mode {
    pub const ALL: [Mode; 4] =
        [Mode::PerFrame, Mode::Propagate, Mode::FixedBlend, Mode::Impression];

    pub fn name(self) -> &'static str {
        match self {
            Mode::PerFrame => "per-frame",
            Mode::Propagate => "propagate",
            Mode::FixedBlend => "fixed-blend",
            Mode::Impression => "impression",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        Ok(match s {
            "per-frame" | "perframe" => Mode::PerFrame,
            "propagate" | "dff" => Mode::Propagate,
            "fixed-blend" | "fixed" => Mode::FixedBlend,
            "impression" => Mode::Impression,
            other => {
                return Err(Error::Config(format!(
                    "unknown mode '{other}' (expected per-frame, propagate, fixed-blend or impression)"
                )))
            }
        })
    }
}

/// Where displacement fields come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowSource {
    /// The trained displacement network.
    Learned,
    /// Exact fields derived from the synthetic scene's motion. Useful
    /// for isolating aggregation behaviour from flow-estimation error.
    Oracle,
}

impl FlowSource {
    pub fn parse(s: &str) -> Result<FlowSource> {
        Ok(match s {
            "learned" => FlowSource::Learned,
            "oracle" => FlowSource::Oracle,
            other => {
                return Err(Error::Config(format!(
                    "unknown flow source '{other}' (expected learned or oracle)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Segment length: one keyframe per this many frames.
    pub segment_len: usize,
    /// Keyframe position within each segment, clamped on a short tail.
    pub keyframe_offset: usize,
    /// Memory gate in [0, 1]: 0 carries only the fresh keyframe
    /// feature forward, 1 carries only the blend.
    pub memory_gate: f64,
    /// Blend weight used by [`Mode::FixedBlend`].
    pub fixed_blend_weight: f64,
    pub flow_source: FlowSource,
    /// Objectness score below which decoded boxes are dropped.
    pub score_floor: f64,
    pub nms_iou: f64,
}

impl PipelineConfig {
    pub fn new(mode: Mode) -> Self {
        PipelineConfig {
            mode,
            segment_len: 10,
            keyframe_offset: 4,
            memory_gate: 0.7,
            fixed_blend_weight: 0.5,
            flow_source: FlowSource::Learned,
            score_floor: 0.3,
            nms_iou: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segment_len == 0 {
            return Err(Error::Config("segment length must be at least 1".into()));
        }
        if self.keyframe_offset >= self.segment_len {
            return Err(Error::Config(format!(
                "keyframe offset {} must be less than the segment length {}",
                self.keyframe_offset, self.segment_len
            )));
        }
        for (name, v) in [
            ("memory gate", self.memory_gate),
            ("fixed blend weight", self.fixed_blend_weight),
            ("nms iou", self.nms_iou),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !self.score_floor.is_finite() {
            return Err(Error::Config("score floor must be finite".into()));
        }
        Ok(())
    }
}

/// Network invocation counts over a run — the cost story in one place.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EvalCounts {
    pub feature: usize,
    pub flow: usize,
    pub quality: usize,
    pub task: usize,
    pub warp: usize,
}

/// One keyframe replacement: the blend weight its fresh feature won.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub segment: usize,
    pub key_frame: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame: usize,
    pub segment: usize,
    pub is_keyframe: bool,
    /// Mean blend weight given to the fresh keyframe feature when this
    /// frame is a keyframe with a transition; 1.0 otherwise.
    pub blend_weight: f64,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub frames: Vec<FrameResult>,
    pub counts: EvalCounts,
    pub transitions: Vec<Transition>,
}

impl RunSummary {
    pub fn mean_transition_weight(&self) -> Option<f64> {
        if self.transitions.is_empty() {
            return None;
        }
        Some(self.transitions.iter().map(|t| t.weight).sum::<f64>() / self.transitions.len() as f64)
    }

    /// Detections grouped per frame, in frame order.
    pub fn detections_per_frame(&self) -> Vec<Vec<Detection>> {
        self.frames.iter().map(|f| f.detections.clone()).collect()
    }
}

fn flow_between(
    params: &Params,
    clip: &VideoClip,
    source: FlowSource,
    target: usize,
    reference: usize,
    counts: &mut EvalCounts,
) -> Result<(Tensor, Tensor)> {
    counts.flow += 1;
    match source {
        FlowSource::Learned => {
            params.flow_forward(&clip.frames[target], &clip.frames[reference])
        }
        FlowSource::Oracle => {
            let flow = clip.oracle_flow(target, reference, params.feature_stride())?;
            let scale = unit_scale(flow.height(), flow.width());
            Ok((flow, scale))
        }
    }
}

/// Runs one clip. Parameters must have been trained (freshly
/// initialised heads output nothing meaningful, so this is almost
/// always a caller mistake rather than an interesting run).
pub fn run_clip(params: &Params, clip: &VideoClip, cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    params.validate()?;
    if !params.trained {
        return Err(Error::UntrainedParams);
    }
    let n = clip.frames.len();
    if n == 0 {
        return Err(Error::Empty("clip"));
    }

    let stride = params.feature_stride();
    let mut counts = EvalCounts::default();
    let mut frames_out: Vec<FrameResult> = Vec::with_capacity(n);
    let mut transitions = Vec::new();

    if cfg.mode == Mode::PerFrame {
        for t in 0..n {
            let f = params.feature_forward(&clip.frames[t])?;
            counts.feature += 1;
            let grid = params.task_forward(&f)?;
            counts.task += 1;
            frames_out.push(FrameResult {
                frame: t,
                segment: t,
                is_keyframe: true,
                blend_weight: 1.0,
                detections: decode_detections(&grid, stride, cfg.score_floor, cfg.nms_iou),
            });
        }
        return Ok(RunSummary { frames: frames_out, counts, transitions });
    }

    // Carried state: the impression feature and the keyframe it lives on.
    let mut memory: Option<(Tensor, usize)> = None;
    let mut segment = 0usize;
    let mut start = 0usize;
    while start < n {
        let seg_len = cfg.segment_len.min(n - start);
        let key = start + cfg.keyframe_offset.min(seg_len - 1);

        let f_key = params.feature_forward(&clip.frames[key])?;
        counts.feature += 1;

        // Aggregate the carried state with the fresh keyframe feature.
        let (f_task, blend_weight) = match &memory {
            None => (f_key.clone(), 1.0),
            Some(_) if cfg.mode == Mode::Propagate => (f_key.clone(), 1.0),
            Some((f_imp, prev_key)) => {
                let (flow, scale) =
                    flow_between(params, clip, cfg.flow_source, key, *prev_key, &mut counts)?;
                let f_imp_warped = bilinear_warp(f_imp, &flow, &scale)?;
                counts.warp += 1;
                let w_map = match cfg.mode {
                    Mode::FixedBlend => Tensor::constant(
                        1,
                        f_key.height(),
                        f_key.width(),
                        cfg.fixed_blend_weight,
                    ),
                    Mode::Impression => {
                        let q_old = params.quality_forward(&f_imp_warped)?;
                        let q_new = params.quality_forward(&f_key)?;
                        counts.quality += 2;
                        adaptive_weights(&q_old, &q_new)?
                    }
                    Mode::PerFrame | Mode::Propagate => unreachable!(),
                };
                let f_task = fuse(&f_imp_warped, &f_key, &w_map)?;
                (f_task, w_map.mean())
            }
        };
        if memory.is_some() {
            transitions.push(Transition { segment, key_frame: key, weight: blend_weight });
        }

        // What the next segment will see.
        let next_memory = match cfg.mode {
            Mode::Propagate => f_key.clone(),
            _ => impression_update(&f_key, &f_task, cfg.memory_gate)?,
        };

        for t in start..start + seg_len {
            let (feature, weight_here) = if t == key {
                (f_task.clone(), blend_weight)
            } else {
                let (flow, scale) =
                    flow_between(params, clip, cfg.flow_source, t, key, &mut counts)?;
                counts.warp += 1;
                (bilinear_warp(&f_task, &flow, &scale)?, 1.0)
            };
            let grid = params.task_forward(&feature)?;
            counts.task += 1;
            frames_out.push(FrameResult {
                frame: t,
                segment,
                is_keyframe: t == key,
                blend_weight: weight_here,
                detections: decode_detections(&grid, stride, cfg.score_floor, cfg.nms_iou),
            });
        }

        memory = Some((next_memory, key));
        segment += 1;
        start += seg_len;
    }

    Ok(RunSummary { frames: frames_out, counts, transitions })
}

/// Aggregate over a set of clips: detection quality against ground
/// truth pooled across every frame of every clip, plus summed
/// invocation counts and the pooled mean transition weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEval {
    pub map: f64,
    pub counts: EvalCounts,
    pub summaries: Vec<RunSummary>,
}

impl SuiteEval {
    pub fn mean_transition_weight(&self) -> Option<f64> {
        let weights: Vec<f64> = self
            .summaries
            .iter()
            .flat_map(|s| s.transitions.iter().map(|t| t.weight))
            .collect();
        if weights.is_empty() {
            return None;
        }
        Some(weights.iter().sum::<f64>() / weights.len() as f64)
    }
}

/// Runs every clip and scores the pooled detections.
pub fn evaluate_suite(
    params: &Params,
    clips: &[VideoClip],
    cfg: &PipelineConfig,
    iou_threshold: f64,
) -> Result<SuiteEval> {
    if clips.is_empty() {
        return Err(Error::Empty("evaluation clips"));
    }
    let mut all_detections = Vec::new();
    let mut all_gt = Vec::new();
    let mut counts = EvalCounts::default();
    let mut summaries = Vec::with_capacity(clips.len());
    for clip in clips {
        let summary = run_clip(params, clip, cfg)?;
        all_detections.extend(summary.detections_per_frame());
        all_gt.extend(clip.ground_truth.iter().cloned());
        counts.feature += summary.counts.feature;
        counts.flow += summary.counts.flow;
        counts.quality += summary.counts.quality;
        counts.task += summary.counts.task;
        counts.warp += summary.counts.warp;
        summaries.push(summary);
    }
    let map = compute_map(&all_detections, &all_gt, params.num_classes(), iou_threshold)?;
    Ok(SuiteEval { map, counts, summaries })
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

/// One row per frame: schedule position and blend weight.
pub fn write_frames_csv<W: Write>(w: &mut W, summary: &RunSummary) -> Result<()> {
    writeln!(w, "frame,segment,is_keyframe,blend_weight,detections")?;
    for f in &summary.frames {
        writeln!(
            w,
            "{},{},{},{:.6},{}",
            f.frame,
            f.segment,
            u8::from(f.is_keyframe),
            f.blend_weight,
            f.detections.len()
        )?;
    }
    Ok(())
}

/// One row per decoded box.
pub fn write_detections_csv<W: Write>(w: &mut W, summary: &RunSummary) -> Result<()> {
    writeln!(w, "frame,class,score,x1,y1,x2,y2")?;
    for f in &summary.frames {
        for d in &f.detections {
            writeln!(
                w,
                "{},{},{:.6},{:.3},{:.3},{:.3},{:.3}",
                f.frame, d.class, d.score, d.x1, d.y1, d.x2, d.y2
            )?;
        }
    }
    Ok(())
}
