//! Quality-weighted feature fusion and the running-aggregate update.
//!
//! At every new keyframe the pipeline holds two candidate features per
//! position: the aggregate carried over from the past (warped to the
//! new keyframe) and the freshly extracted keyframe feature. A shared
//! quality network scores both; a per-position two-way softmax turns
//! the score difference into a blend weight; and the blend produces
//! the feature the task head consumes. A separate scalar *memory gate*
//! `g` controls how much of that blended feature is kept in the
//! aggregate that flows into the future: `g = 0` remembers only the
//! latest keyframe, `g = 1` keeps the full blend.

use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_pair(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { op, detail: format!("{:?} vs {:?}", a.shape(), b.shape()) });
    }
    Ok(())
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-position softmax over a pair of quality logit maps.
///
/// Returns the weight of the *new* candidate: positions where
/// `q_new > q_old` get weight above one half. Equal logits give
/// exactly one half. The two-way softmax collapses to
/// `sigmoid(q_new - q_old)`.
pub fn adaptive_weights(q_old: &Tensor, q_new: &Tensor) -> Result<Tensor> {
    check_pair("adaptive_weights", q_old, q_new)?;
    if q_old.channels() != 1 {
        return Err(Error::Shape {
            op: "adaptive_weights",
            detail: format!("quality maps must have one channel, got {}", q_old.channels()),
        });
    }
    let data = q_old
        .data()
        .iter()
        .zip(q_new.data())
        .map(|(&old, &new)| sigmoid(new - old))
        .collect();
    Tensor::from_vec(1, q_old.height(), q_old.width(), data)
}

/// Gradients of [`adaptive_weights`] given `dL/dw`.
///
/// With `w = sigmoid(q_new - q_old)`: `dw/dq_new = w (1 - w)` and
/// `dw/dq_old = -w (1 - w)`.
pub fn adaptive_weights_backward(w: &Tensor, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
    check_pair("adaptive_weights_backward", w, upstream)?;
    let mut d_old = Vec::with_capacity(w.len());
    let mut d_new = Vec::with_capacity(w.len());
    for (&wi, &ui) in w.data().iter().zip(upstream.data()) {
        let d = ui * wi * (1.0 - wi);
        d_new.push(d);
        d_old.push(-d);
    }
    Ok((
        Tensor::from_vec(1, w.height(), w.width(), d_old)?,
        Tensor::from_vec(1, w.height(), w.width(), d_new)?,
    ))
}

/// Convex per-position blend `out = (1 - w) * old + w * new`, with the
/// single-channel weight map broadcast across feature channels.
pub fn fuse(f_old: &Tensor, f_new: &Tensor, w: &Tensor) -> Result<Tensor> {
    check_pair("fuse", f_old, f_new)?;
    if w.shape() != (1, f_old.height(), f_old.width()) {
        return Err(Error::Shape {
            op: "fuse",
            detail: format!(
                "weight map must be (1, {}, {}), got {:?}",
                f_old.height(),
                f_old.width(),
                w.shape()
            ),
        });
    }
    let (c_n, h, wd) = f_old.shape();
    let plane = h * wd;
    let mut data = Vec::with_capacity(f_old.len());
    for c in 0..c_n {
        let base = c * plane;
        for i in 0..plane {
            let wi = w.data()[i];
            data.push((1.0 - wi) * f_old.data()[base + i] + wi * f_new.data()[base + i]);
        }
    }
    Tensor::from_vec(c_n, h, wd, data)
}

/// Gradients of [`fuse`] given `dL/d out`: returns
/// `(d f_old, d f_new, d w)` where the weight gradient sums the
/// channelwise difference `new - old` against the upstream signal.
pub fn fuse_backward(
    f_old: &Tensor,
    f_new: &Tensor,
    w: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_pair("fuse_backward", f_old, upstream)?;
    let (c_n, h, wd) = f_old.shape();
    let plane = h * wd;
    let mut d_old = Vec::with_capacity(f_old.len());
    let mut d_new = Vec::with_capacity(f_old.len());
    let mut d_w = vec![0.0; plane];
    for c in 0..c_n {
        let base = c * plane;
        for i in 0..plane {
            let wi = w.data()[i];
            let u = upstream.data()[base + i];
            d_old.push(u * (1.0 - wi));
            d_new.push(u * wi);
            d_w[i] += u * (f_new.data()[base + i] - f_old.data()[base + i]);
        }
    }
    Ok((
        Tensor::from_vec(c_n, h, wd, d_old)?,
        Tensor::from_vec(c_n, h, wd, d_new)?,
        Tensor::from_vec(1, h, wd, d_w)?,
    ))
}

/// Updates the running aggregate: `imp = (1 - g) * f_new + g * f_task`.
///
/// `g` is the memory gate; it must lie in `[0, 1]`.
pub fn impression_update(f_new: &Tensor, f_task: &Tensor, g: f64) -> Result<Tensor> {
    check_pair("impression_update", f_new, f_task)?;
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::Config(format!("memory gate must be in [0, 1], got {g}")));
    }
    let data = f_new
        .data()
        .iter()
        .zip(f_task.data())
        .map(|(&n, &t)| (1.0 - g) * n + g * t)
        .collect();
    let (c, h, w) = f_new.shape();
    Tensor::from_vec(c, h, w, data)
}

/// Expands the keyframe-fusion recurrence symbolically, assuming every
/// blend uses the same scalar weight `w`, warping is the identity, and
/// the memory gate is `g`. Returns, for a clip of `n` segments, how
/// much each past keyframe contributes to the carried memory feature
/// after the most recent segment: entry `m` is the coefficient of the
/// keyframe `m` segments back (entry 0 is the current keyframe). With
/// the gate closed (`g = 0`) the memory is rebuilt from the current
/// keyframe alone; opening the gate shifts mass onto older keyframes,
/// and every offset `m >= 1` gains monotonically in `g` whenever
/// `w >= 1/2`.
///
/// The recurrence is `task_i = (1 - w) * agg_{i-1} + w * key_i` and
/// `agg_i = (1 - g) * key_i + g * task_i`, seeded with
/// `task_0 = agg_0 = key_0`. Coefficients are convex: they are
/// non-negative and sum to one for any valid `g`, `w`, `n`.
pub fn contribution_profile(g: f64, w: f64, n: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::Config(format!("memory gate must be in [0, 1], got {g}")));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Config(format!("blend weight must be in [0, 1], got {w}")));
    }
    if n == 0 {
        return Err(Error::Empty("contribution profile needs at least one segment"));
    }
    // Coefficient vectors over keyframes 0..n, newest last.
    let mut task = vec![0.0; n];
    let mut agg = vec![0.0; n];
    task[0] = 1.0;
    agg[0] = 1.0;
    for i in 1..n {
        for k in 0..n {
            task[k] = (1.0 - w) * agg[k];
        }
        task[i] += w;
        for k in 0..n {
            agg[k] = g * task[k];
        }
        agg[i] += 1.0 - g;
    }
    Ok((0..n).map(|m| agg[n - 1 - m]).collect())
}

/// Writes a profile as CSV with an `offset,coefficient` header.
pub fn write_contribution_csv<W: Write>(out: &mut W, profile: &[f64]) -> Result<()> {
    writeln!(out, "offset,coefficient")?;
    for (m, c) in profile.iter().enumerate() {
        writeln!(out, "{m},{c}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdcheck;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn equal_logits_split_evenly() {
        let q = Tensor::constant(1, 3, 3, 0.7);
        let w = adaptive_weights(&q, &q).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn weights_favour_the_higher_logit() {
        let q_old = Tensor::from_vec(1, 1, 3, vec![0.0, 2.0, -1.0]).unwrap();
        let q_new = Tensor::from_vec(1, 1, 3, vec![1.0, 0.0, -1.0]).unwrap();
        let w = adaptive_weights(&q_old, &q_new).unwrap();
        assert!(w.at(0, 0, 0) > 0.5);
        assert!(w.at(0, 0, 1) < 0.5);
        assert_eq!(w.at(0, 0, 2), 0.5);
        // Two-way softmax equals the logistic of the difference.
        assert!((w.at(0, 0, 0) - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn weights_survive_extreme_logits() {
        let q_old = Tensor::from_vec(1, 1, 2, vec![800.0, -800.0]).unwrap();
        let q_new = Tensor::from_vec(1, 1, 2, vec![-800.0, 800.0]).unwrap();
        let w = adaptive_weights(&q_old, &q_new).unwrap();
        assert!(w.at(0, 0, 0) >= 0.0 && w.at(0, 0, 0) < 1e-100);
        assert!((w.at(0, 0, 1) - 1.0).abs() < 1e-12);
        assert!(w.is_finite());
    }

    #[test]
    fn fuse_endpoints_select_each_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let old = random_tensor(&mut rng, 3, 4, 4);
        let new = random_tensor(&mut rng, 3, 4, 4);
        let zero = Tensor::zeros(1, 4, 4);
        let one = Tensor::constant(1, 4, 4, 1.0);
        assert_eq!(fuse(&old, &new, &zero).unwrap(), old);
        assert_eq!(fuse(&old, &new, &one).unwrap(), new);
        let half = Tensor::constant(1, 4, 4, 0.5);
        let mid = fuse(&old, &new, &half).unwrap();
        for ((&a, &b), &m) in old.data().iter().zip(new.data()).zip(mid.data()) {
            assert!((m - 0.5 * (a + b)).abs() < 1e-15);
            assert!(m >= a.min(b) - 1e-15 && m <= a.max(b) + 1e-15, "convexity");
        }
    }

    #[test]
    fn impression_update_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let key = random_tensor(&mut rng, 2, 3, 3);
        let task = random_tensor(&mut rng, 2, 3, 3);
        assert_eq!(impression_update(&key, &task, 0.0).unwrap(), key);
        assert_eq!(impression_update(&key, &task, 1.0).unwrap(), task);
        assert!(matches!(impression_update(&key, &task, 1.5), Err(Error::Config(_))));
        assert!(matches!(impression_update(&key, &task, -0.1), Err(Error::Config(_))));
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (h, w) = (3, 4);
        let f_old = random_tensor(&mut rng, 2, h, w);
        let f_new = random_tensor(&mut rng, 2, h, w);
        let q_old = random_tensor(&mut rng, 1, h, w);
        let q_new = random_tensor(&mut rng, 1, h, w);
        let upstream = random_tensor(&mut rng, 2, h, w);

        // Composite objective: <upstream, fuse(f_old, f_new, softmax(q))>.
        let loss = |qo: &Tensor, qn: &Tensor, fo: &Tensor, fn_: &Tensor| -> f64 {
            let wmap = adaptive_weights(qo, qn).unwrap();
            let out = fuse(fo, fn_, &wmap).unwrap();
            out.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
        };

        let wmap = adaptive_weights(&q_old, &q_new).unwrap();
        let (d_old, d_new, d_w) = fuse_backward(&f_old, &f_new, &wmap, &upstream).unwrap();
        let (dq_old, dq_new) = adaptive_weights_backward(&wmap, &d_w).unwrap();

        for (buf, analytic, which) in [
            (q_old.data(), &dq_old, 0),
            (q_new.data(), &dq_new, 1),
            (f_old.data(), &d_old, 2),
            (f_new.data(), &d_new, 3),
        ] {
            for i in 0..buf.len() {
                let fd = fdcheck::central_diff(buf, i, 1e-5, |xs| {
                    let t = |c, hh, ww| Tensor::from_vec(c, hh, ww, xs.to_vec()).unwrap();
                    match which {
                        0 => loss(&t(1, h, w), &q_new, &f_old, &f_new),
                        1 => loss(&q_old, &t(1, h, w), &f_old, &f_new),
                        2 => loss(&q_old, &q_new, &t(2, h, w), &f_new),
                        _ => loss(&q_old, &q_new, &f_old, &t(2, h, w)),
                    }
                });
                let err = fdcheck::rel_err(analytic.data()[i], fd);
                assert!(err < 1e-7, "arg {which} index {i}: {} vs {fd}", analytic.data()[i]);
            }
        }
    }

    #[test]
    fn profile_matches_hand_expanded_cases() {
        // Full memory, even blending, three segments: the current key
        // takes half, the two older keys split the rest.
        let p = contribution_profile(1.0, 0.5, 3).unwrap();
        assert_eq!(p.len(), 3);
        for (got, want) in p.iter().zip([0.5, 0.25, 0.25]) {
            assert!((got - want).abs() < 1e-12, "{p:?}");
        }
        // Gate closed: the memory is rebuilt from the current key alone.
        let p = contribution_profile(0.0, 0.5, 4).unwrap();
        for (got, want) in p.iter().zip([1.0, 0.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-12, "{p:?}");
        }
        // A single segment is the keyframe itself.
        assert_eq!(contribution_profile(0.3, 0.9, 1).unwrap(), vec![1.0]);
    }

    #[test]
    fn profile_closed_forms_hold() {
        let (g, w, n) = (0.7, 0.3, 6);
        let u = g * (1.0 - w);
        let p = contribution_profile(g, w, n).unwrap();
        // Current keyframe: the fresh share plus the gated blend share.
        assert!((p[0] - (1.0 - u)).abs() < 1e-12);
        // Oldest keyframe: (g * (1-w))^(n-1).
        assert!((p[n - 1] - u.powi((n - 1) as i32)).abs() < 1e-12);
        // Interior: (g * (1-w))^m * (1 - g*(1-w)).
        for m in 1..n - 1 {
            let want = u.powi(m as i32) * (1.0 - u);
            assert!((p[m] - want).abs() < 1e-12, "m={m}");
        }
    }

    #[test]
    fn profile_offsets_gain_with_gate_at_even_blend() {
        let gates = [0.0, 0.25, 0.5, 0.75, 1.0];
        for n in 2..8 {
            for m in 1..n {
                let mut prev = -1.0;
                for &g in &gates {
                    let c = contribution_profile(g, 0.5, n).unwrap()[m];
                    assert!(c >= prev - 1e-15, "offset {m} dipped at g={g}, n={n}");
                    prev = c;
                }
            }
        }
    }

    #[test]
    fn profile_rejects_out_of_range_inputs() {
        assert!(contribution_profile(1.1, 0.5, 3).is_err());
        assert!(contribution_profile(0.5, -0.1, 3).is_err());
        assert!(contribution_profile(0.5, 0.5, 0).is_err());
    }

    #[test]
    fn profile_csv_has_header_and_rows() {
        let p = contribution_profile(1.0, 0.5, 3).unwrap();
        let mut buf = Vec::new();
        write_contribution_csv(&mut buf, &p).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "offset,coefficient");
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "0,0.5");
    }

    proptest! {
        /// Profiles are convex combinations for all valid parameters.
        #[test]
        fn profile_is_convex(g in 0.0f64..=1.0, w in 0.0f64..=1.0, n in 1usize..12) {
            let p = contribution_profile(g, w, n).unwrap();
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for &c in &p {
                prop_assert!(c >= -1e-15);
            }
        }

        /// Older tail mass never shrinks as the memory gate opens.
        #[test]
        fn tail_mass_grows_with_gate(w in 0.05f64..0.95, n in 2usize..10) {
            let gates = [0.0, 0.25, 0.5, 0.75, 1.0];
            for m in 1..n {
                let mut prev = -1.0;
                for &g in &gates {
                    let p = contribution_profile(g, w, n).unwrap();
                    let tail: f64 = p[m..].iter().sum();
                    prop_assert!(tail >= prev - 1e-12, "tail at offset {m} dipped: g={g}");
                    prev = tail;
                }
            }
        }
    }
}
