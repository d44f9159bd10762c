//! Keyframe placement analysis and the runtime cost model.
//!
//! Placement: within a segment of `l` consecutive frames served by one
//! keyframe, every frame receives its feature through some number of
//! frame-steps of displacement — non-key frames pull from the keyframe
//! across their temporal distance, and the aggregate carried from the
//! previous segment travels one full segment. The *mean feature
//! displacement* summarises how far features travel on average, and
//! picking the keyframe that minimises it is a free accuracy win: the
//! central frame beats the conventional first frame.
//!
//! Cost: sparse-keyframe inference replaces per-frame feature
//! extraction with one extraction per segment plus per-frame flow,
//! warp and task-head work. [`CostModel`] captures per-component costs
//! in arbitrary units (FLOPs when calibrated from a model) and
//! predicts the cost ratio relative to per-frame inference.

use crate::error::{Error, Result};
use crate::nets::{stack_flops, Params};

/// Mean number of frame-steps features travel to serve a segment of
/// length `l` with its keyframe at position `k` (0-based).
///
/// Frames at distance `d` from the keyframe contribute `d` steps on
/// each side, and the aggregate handed over from the previous segment
/// contributes a full `l` steps; the total is averaged over the `l`
/// frames. For `l = 1` the only frame is the keyframe and the mean is
/// exactly the hand-over term, 1.
pub fn mean_feature_displacement(l: usize, k: usize) -> Result<f64> {
    if l == 0 {
        return Err(Error::Config("segment length must be at least 1".into()));
    }
    if k >= l {
        return Err(Error::Config(format!(
            "keyframe position {k} is outside a segment of length {l}"
        )));
    }
    // Sum of distances 1..=m on each side of the keyframe; an edge
    // keyframe (k = 0 or k = l-1) degenerates to a single side.
    let tri = |m: usize| (m * (m + 1) / 2) as f64;
    let travel = tri(k) + tri(l - 1 - k);
    Ok((travel + l as f64) / l as f64)
}

/// Keyframe position minimising [`mean_feature_displacement`] for a
/// segment of length `l`; ties resolve to the smaller position. This
/// is the central frame, `floor((l - 1) / 2)`.
pub fn optimal_keyframe(l: usize) -> Result<usize> {
    if l == 0 {
        return Err(Error::Config("segment length must be at least 1".into()));
    }
    let mut best_k = 0;
    let mut best = f64::INFINITY;
    for k in 0..l {
        let d = mean_feature_displacement(l, k)?;
        if d < best {
            best = d;
            best_k = k;
        }
    }
    Ok(best_k)
}

/// Per-component cost of one application of each pipeline stage, in a
/// shared arbitrary unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    /// Feature network on one image.
    pub c_feat: f64,
    /// Flow network on one image pair (both heads).
    pub c_flow: f64,
    /// Task head on one feature map.
    pub c_task: f64,
    /// One aggregation event: two quality passes, the two-way softmax
    /// and both blend updates.
    pub c_agg: f64,
    /// One bilinear warp of a feature map, including rescaling.
    pub c_warp: f64,
}

impl CostModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_feat", self.c_feat),
            ("c_flow", self.c_flow),
            ("c_task", self.c_task),
            ("c_agg", self.c_agg),
            ("c_warp", self.c_warp),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.c_feat <= 0.0 || self.c_task < 0.0 {
            return Err(Error::Config("c_feat must be strictly positive".into()));
        }
        Ok(())
    }

    /// Exact steady-state cost ratio of sparse-keyframe inference to
    /// per-frame inference for segments of length `l`.
    ///
    /// Per segment, the sparse pipeline pays one feature extraction,
    /// one aggregation event, and per-frame flow + warp + task work
    /// (the keyframe trades its own flow/warp for the hand-over
    /// propagation, so the per-frame terms stay uniform). Per-frame
    /// inference pays feature extraction plus the task head on every
    /// frame.
    pub fn ratio_exact(&self, l: usize) -> Result<f64> {
        self.validate()?;
        if l == 0 {
            return Err(Error::Config("segment length must be at least 1".into()));
        }
        let l = l as f64;
        let sparse = self.c_feat + self.c_agg + l * (self.c_flow + self.c_warp + self.c_task);
        let perframe = l * (self.c_feat + self.c_task);
        Ok(sparse / perframe)
    }

    /// First-order approximation of [`Self::ratio_exact`], keeping
    /// only the two dominant terms: the flow network's share of a
    /// feature extraction, plus the amortised extraction itself.
    pub fn ratio_approx(&self, l: usize) -> Result<f64> {
        self.validate()?;
        if l == 0 {
            return Err(Error::Config("segment length must be at least 1".into()));
        }
        Ok(self.c_flow / self.c_feat + 1.0 / l as f64)
    }

    /// Calibrates component costs from FLOP counts of a concrete model
    /// applied to `(h, w)` images.
    ///
    /// Warp and aggregation elementwise costs use fixed per-element
    /// estimates (a bilinear tap costs four corner multiply-adds plus
    /// weight arithmetic; fusion touches each feature element a
    /// handful of times). Both are small next to any network pass, so
    /// the estimates' precision does not drive the ratio.
    pub fn from_params(params: &Params, h: usize, w: usize) -> Result<CostModel> {
        params.validate()?;
        let (c_feat, (fh, fw)) = stack_flops(&params.feature, h, w)?;
        let (trunk, (th, tw)) = stack_flops(&params.flow_trunk, h, w)?;
        if (th, tw) != (fh, fw) {
            return Err(Error::Config(
                "flow trunk output does not align with the feature grid".into(),
            ));
        }
        let (head_f, _) = stack_flops(std::slice::from_ref(&params.flow_head), th, tw)?;
        let (head_s, _) = stack_flops(std::slice::from_ref(&params.scale_head), th, tw)?;
        let c_flow = trunk + head_f + head_s;
        let (c_quality, _) = stack_flops(&params.quality, fh, fw)?;
        let (c_task, _) = stack_flops(&params.task, fh, fw)?;
        let plane = (fh * fw) as f64;
        let cf = params.feature_channels() as f64;
        let c_agg = 2.0 * c_quality + (7.0 * cf + 4.0) * plane;
        let c_warp = (17.0 * cf + 6.0) * plane;
        let model = CostModel { c_feat, c_flow, c_task, c_agg, c_warp };
        model.validate()?;
        Ok(model)
    }
}
