//! Differentiable feature warping.
//!
//! A feature map sampled at a reference time is moved to a target time
//! by *backward* warping: every target position `p` looks up the
//! reference feature at `p + flow(p)` with bilinear interpolation, then
//! multiplies by a per-position scale. Samples that land outside the
//! map read zero, matching zero padding.
//!
//! Flow fields are `(2, H, W)` tensors: channel 0 carries the x
//! displacement, channel 1 the y displacement, both in feature cells.
//! Scale maps are `(1, H, W)`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_field_shapes(feature: &Tensor, flow: &Tensor, scale: &Tensor) -> Result<()> {
    let (h, w) = (feature.height(), feature.width());
    if flow.shape() != (2, h, w) {
        return Err(Error::Shape {
            op: "bilinear_warp",
            detail: format!("flow must be (2, {h}, {w}), got {:?}", flow.shape()),
        });
    }
    if scale.shape() != (1, h, w) {
        return Err(Error::Shape {
            op: "bilinear_warp",
            detail: format!("scale must be (1, {h}, {w}), got {:?}", scale.shape()),
        });
    }
    Ok(())
}

/// The four bilinear corners around a source coordinate, with weights.
/// Corners outside the `(h, w)` box are dropped (their sample is zero).
#[inline]
fn corners(src_y: f64, src_x: f64, h: usize, w: usize) -> ([(isize, isize, f64); 4], f64, f64) {
    let y0 = src_y.floor();
    let x0 = src_x.floor();
    let wy = src_y - y0;
    let wx = src_x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let list = [
        (y0, x0, (1.0 - wy) * (1.0 - wx)),
        (y0, x0 + 1, (1.0 - wy) * wx),
        (y0 + 1, x0, wy * (1.0 - wx)),
        (y0 + 1, x0 + 1, wy * wx),
    ];
    let _ = (h, w);
    (list, wy, wx)
}

#[inline]
fn in_bounds(y: isize, x: isize, h: usize, w: usize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w
}

/// Warps `feature` along `flow` and applies `scale`.
///
/// `out(c, y, x) = scale(y, x) * bilinear(feature_c, y + flow_y(y, x), x + flow_x(y, x))`
///
/// With zero flow and unit scale this is an exact identity (bit for
/// bit), because the interpolation weights collapse to a single corner
/// with weight one.
pub fn bilinear_warp(feature: &Tensor, flow: &Tensor, scale: &Tensor) -> Result<Tensor> {
    check_field_shapes(feature, flow, scale)?;
    let (c_n, h, w) = feature.shape();
    let mut out = vec![0.0; c_n * h * w];
    for y in 0..h {
        for x in 0..w {
            let src_x = x as f64 + flow.at(0, y, x);
            let src_y = y as f64 + flow.at(1, y, x);
            let s = scale.at(0, y, x);
            let (pts, _, _) = corners(src_y, src_x, h, w);
            for c in 0..c_n {
                let mut acc = 0.0;
                for &(cy, cx, wgt) in &pts {
                    if wgt != 0.0 && in_bounds(cy, cx, h, w) {
                        acc += wgt * feature.at(c, cy as usize, cx as usize);
                    }
                }
                out[(c * h + y) * w + x] = s * acc;
            }
        }
    }
    Tensor::from_vec(c_n, h, w, out)
}

/// Gradients of [`bilinear_warp`] with respect to all three inputs.
#[derive(Debug, Clone)]
pub struct WarpGrads {
    pub feature: Tensor,
    pub flow: Tensor,
    pub scale: Tensor,
}

/// Reverse-mode derivative of [`bilinear_warp`].
///
/// `upstream` holds `dL/d out`. The flow gradient uses the analytic
/// derivative of the interpolation weights, which is the one-sided
/// derivative when a source coordinate sits exactly on a grid line.
pub fn bilinear_warp_backward(
    feature: &Tensor,
    flow: &Tensor,
    scale: &Tensor,
    upstream: &Tensor,
) -> Result<WarpGrads> {
    check_field_shapes(feature, flow, scale)?;
    if upstream.shape() != feature.shape() {
        return Err(Error::Shape {
            op: "bilinear_warp_backward",
            detail: format!(
                "upstream {:?} must match feature {:?}",
                upstream.shape(),
                feature.shape()
            ),
        });
    }
    let (c_n, h, w) = feature.shape();
    let mut d_feature = vec![0.0; c_n * h * w];
    let mut d_flow = vec![0.0; 2 * h * w];
    let mut d_scale = vec![0.0; h * w];

    for y in 0..h {
        for x in 0..w {
            let src_x = x as f64 + flow.at(0, y, x);
            let src_y = y as f64 + flow.at(1, y, x);
            let s = scale.at(0, y, x);
            let (pts, wy, wx) = corners(src_y, src_x, h, w);
            let y0 = src_y.floor() as isize;
            let x0 = src_x.floor() as isize;

            // Corner samples, zero outside the map.
            let sample = |c: usize, cy: isize, cx: isize| -> f64 {
                if in_bounds(cy, cx, h, w) {
                    feature.at(c, cy as usize, cx as usize)
                } else {
                    0.0
                }
            };

            let mut d_s = 0.0;
            let mut d_sx = 0.0;
            let mut d_sy = 0.0;
            for c in 0..c_n {
                let u = upstream.at(c, y, x);
                if u == 0.0 && s == 0.0 {
                    continue;
                }
                let f00 = sample(c, y0, x0);
                let f01 = sample(c, y0, x0 + 1);
                let f10 = sample(c, y0 + 1, x0);
                let f11 = sample(c, y0 + 1, x0 + 1);
                let interp = (1.0 - wy) * ((1.0 - wx) * f00 + wx * f01)
                    + wy * ((1.0 - wx) * f10 + wx * f11);
                d_s += u * interp;
                let us = u * s;
                // d interp / d src_x and / d src_y.
                d_sx += us * ((1.0 - wy) * (f01 - f00) + wy * (f11 - f10));
                d_sy += us * ((1.0 - wx) * (f10 - f00) + wx * (f11 - f01));
                for &(cy, cx, wgt) in &pts {
                    if wgt != 0.0 && in_bounds(cy, cx, h, w) {
                        d_feature[(c * h + cy as usize) * w + cx as usize] += us * wgt;
                    }
                }
            }
            d_scale[y * w + x] = d_s;
            d_flow[y * w + x] = d_sx;
            d_flow[(h + y) * w + x] = d_sy;
        }
    }

    Ok(WarpGrads {
        feature: Tensor::from_vec(c_n, h, w, d_feature)?,
        flow: Tensor::from_vec(2, h, w, d_flow)?,
        scale: Tensor::from_vec(1, h, w, d_scale)?,
    })
}

/// Constant displacement field `(dx, dy)` over an `(h, w)` grid.
pub fn translation_flow(h: usize, w: usize, dx: f64, dy: f64) -> Tensor {
    Tensor::from_fn(2, h, w, |c, _, _| if c == 0 { dx } else { dy })
}

/// All-ones scale map over an `(h, w)` grid.
pub fn unit_scale(h: usize, w: usize) -> Tensor {
    Tensor::constant(1, h, w, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck;
    use crate::tensor::{axpy, hadamard};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Flow whose entries stay clear of integer values, so bilinear
    /// weights are differentiable at every probe.
    fn safe_flow(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(2, h, w, |_, _, _| {
            let mag = rng.gen_range(0.1..1.4);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let v: f64 = sign * mag;
            // Keep at least 0.05 away from every integer.
            let frac = v - v.floor();
            if frac < 0.05 {
                v + 0.05
            } else if frac > 0.95 {
                v - 0.05
            } else {
                v
            }
        })
    }

    #[test]
    fn zero_flow_unit_scale_is_bit_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feature = random_tensor(&mut rng, 4, 6, 5);
        let flow = translation_flow(6, 5, 0.0, 0.0);
        let scale = unit_scale(6, 5);
        let out = bilinear_warp(&feature, &flow, &scale).unwrap();
        assert_eq!(out, feature);
    }

    #[test]
    fn integer_translation_matches_index_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (h, w) = (7, 6);
        let feature = random_tensor(&mut rng, 3, h, w);
        for (dx, dy) in [(1i64, 0i64), (0, -2), (-1, 1), (3, 2)] {
            let flow = translation_flow(h, w, dx as f64, dy as f64);
            let out = bilinear_warp(&feature, &flow, &unit_scale(h, w)).unwrap();
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as i64 + dy;
                        let sx = x as i64 + dx;
                        let expect = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w
                        {
                            feature.at(c, sy as usize, sx as usize)
                        } else {
                            0.0
                        };
                        assert_eq!(out.at(c, y, x), expect, "c={c} y={y} x={x} d=({dx},{dy})");
                    }
                }
            }
        }
    }

    #[test]
    fn scale_map_multiplies_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (h, w) = (5, 5);
        let feature = random_tensor(&mut rng, 2, h, w);
        let flow = safe_flow(&mut rng, h, w);
        let scale = Tensor::from_fn(1, h, w, |_, _, _| rng.gen_range(0.2..2.0));
        let scaled = bilinear_warp(&feature, &flow, &scale).unwrap();
        let unscaled = bilinear_warp(&feature, &flow, &unit_scale(h, w)).unwrap();
        let expect = hadamard(&unscaled, &scale).unwrap();
        assert_eq!(scaled, expect);
    }

    #[test]
    fn out_of_bounds_samples_read_zero() {
        let feature = Tensor::constant(1, 4, 4, 1.0);
        // Push every sample two cells past the right edge.
        let flow = translation_flow(4, 4, 5.0, 0.0);
        let out = bilinear_warp(&feature, &flow, &unit_scale(4, 4)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (c_n, h, w) = (2, 5, 4);
        for trial in 0..5 {
            let feature = random_tensor(&mut rng, c_n, h, w);
            let flow = safe_flow(&mut rng, h, w);
            let scale = Tensor::from_fn(1, h, w, |_, _, _| rng.gen_range(0.3..1.7));
            let upstream = random_tensor(&mut rng, c_n, h, w);

            let grads = bilinear_warp_backward(&feature, &flow, &scale, &upstream).unwrap();

            // Scalar objective: <upstream, warp(...)>.
            let loss = |f: &Tensor, fl: &Tensor, sc: &Tensor| -> f64 {
                let out = bilinear_warp(f, fl, sc).unwrap();
                out.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
            };

            let check = |buf: &[f64], analytic: &Tensor, rebuild: &dyn Fn(Vec<f64>) -> f64| {
                for i in (0..buf.len()).step_by(3) {
                    let fd = fdcheck::central_diff(buf, i, 1e-5, |xs| rebuild(xs.to_vec()));
                    let err = fdcheck::rel_err(analytic.data()[i], fd);
                    assert!(
                        err < 1e-6,
                        "trial {trial}: index {i} analytic {} vs fd {fd}",
                        analytic.data()[i]
                    );
                }
            };

            let (fc, fh, fw) = feature.shape();
            check(feature.data(), &grads.feature, &|xs| {
                loss(&Tensor::from_vec(fc, fh, fw, xs).unwrap(), &flow, &scale)
            });
            check(flow.data(), &grads.flow, &|xs| {
                loss(&feature, &Tensor::from_vec(2, fh, fw, xs).unwrap(), &scale)
            });
            check(scale.data(), &grads.scale, &|xs| {
                loss(&feature, &flow, &Tensor::from_vec(1, fh, fw, xs).unwrap())
            });
        }
    }

    #[test]
    fn shape_validation_is_enforced() {
        let feature = Tensor::zeros(2, 4, 4);
        let bad_flow = Tensor::zeros(1, 4, 4);
        let scale = unit_scale(4, 4);
        assert!(bilinear_warp(&feature, &bad_flow, &scale).is_err());
        let flow = translation_flow(4, 4, 0.0, 0.0);
        let bad_scale = Tensor::zeros(2, 4, 4);
        assert!(bilinear_warp(&feature, &flow, &bad_scale).is_err());
        let bad_up = Tensor::zeros(2, 3, 4);
        assert!(bilinear_warp_backward(&feature, &flow, &scale, &bad_up).is_err());
    }

    proptest! {
        /// Warping is linear in the feature argument.
        #[test]
        fn warp_is_linear_in_features(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (h, w) = (5, 6);
            let f1 = random_tensor(&mut rng, 3, h, w);
            let f2 = random_tensor(&mut rng, 3, h, w);
            let flow = safe_flow(&mut rng, h, w);
            let scale = Tensor::from_fn(1, h, w, |_, _, _| rng.gen_range(0.2..1.8));
            let mixed = axpy(beta, &f2, &f1.map(|v| alpha * v)).unwrap();
            let lhs = bilinear_warp(&mixed, &flow, &scale).unwrap();
            let w1 = bilinear_warp(&f1, &flow, &scale).unwrap();
            let w2 = bilinear_warp(&f2, &flow, &scale).unwrap();
            let rhs = axpy(beta, &w2, &w1.map(|v| alpha * v)).unwrap();
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!(fdcheck::rel_err(*a, *b) < 1e-10);
            }
        }
    }
}
