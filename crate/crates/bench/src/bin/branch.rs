//! Temporary diagnostics: on blur-contrastive triplets, which fusion
//! branch does the detection loss actually prefer?

use anyhow::Result;
use impression_core::fusion::{adaptive_weights, fuse};
use impression_core::nets::{load_params, Params};
use impression_core::synth::{render, training_suite, VideoClip};
use impression_core::tensor::Tensor;
use impression_core::train::{build_targets, detection_loss, sample_triplet, LossWeights};
use impression_core::warp::{bilinear_warp, unit_scale};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn branch_losses(
    params: &Params,
    clip: &VideoClip,
    key_old: usize,
    key_new: usize,
    cur: usize,
) -> Result<(f64, f64, f64, f64, f64, f64, f64)> {
    let f_old = params.feature_forward(&clip.frames[key_old])?;
    let f_new = params.feature_forward(&clip.frames[key_new])?;
    let (flow_k, scale_k) = params.flow_forward(&clip.frames[key_new], &clip.frames[key_old])?;
    let f_old_w = bilinear_warp(&f_old, &flow_k, &scale_k)?;
    let q_old = params.quality_forward(&f_old_w)?;
    let q_new = params.quality_forward(&f_new)?;
    let w = adaptive_weights(&q_old, &q_new)?;

    // counterfactual: perfectly aligned, unscaled old branch
    let oracle_k = clip.oracle_flow(key_new, key_old, params.feature_stride())?;
    let f_old_oracle =
        bilinear_warp(&f_old, &oracle_k, &unit_scale(oracle_k.height(), oracle_k.width()))?;
    let flow_err: f64 = flow_k
        .data()
        .iter()
        .zip(oracle_k.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / flow_k.data().len() as f64;

    let weights = LossWeights::default();
    let loss_at = |f_old_branch: &Tensor, wmap: &Tensor| -> Result<f64> {
        let f_task = fuse(f_old_branch, &f_new, wmap)?;
        let (flow_c, scale_c) =
            params.flow_forward(&clip.frames[cur], &clip.frames[key_new])?;
        let f_cur = bilinear_warp(&f_task, &flow_c, &scale_c)?;
        let grid = params.task_forward(&f_cur)?;
        let targets = build_targets(
            &clip.ground_truth[cur],
            grid.raw.height(),
            grid.raw.width(),
            params.feature_stride(),
            params.num_classes(),
        )?;
        Ok(detection_loss(&grid.raw, params.num_classes(), &targets, &weights)?.0)
    };

    let (c, h, wd) = w.shape();
    let quarter = Tensor::constant(c, h, wd, 0.25);
    let three_q = Tensor::constant(c, h, wd, 0.75);
    // mean w over cells whose center falls inside a ground-truth box
    let targets = build_targets(
        &clip.ground_truth[cur],
        h,
        wd,
        params.feature_stride(),
        params.num_classes(),
    )?;
    let mut w_obj = 0.0;
    let mut n_obj = 0usize;
    for y in 0..h {
        for x in 0..wd {
            if targets.positive[y * wd + x] {
                w_obj += w.at(0, y, x);
                n_obj += 1;
            }
        }
    }
    let w_obj = if n_obj > 0 { w_obj / n_obj as f64 } else { f64::NAN };
    let _ = flow_err;
    Ok((
        loss_at(&f_old_w, &w)?,
        loss_at(&f_old_w, &quarter)?,
        loss_at(&f_old_w, &three_q)?,
        loss_at(&f_old_oracle, &quarter)?,
        loss_at(&f_old_oracle, &three_q)?,
        w.mean(),
        w_obj,
    ))
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let params = load_params(&args[1])?;
    let clips: Vec<_> =
        training_suite(7, 4).iter().map(|s| render(s).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(123);

    // categories: 0 new blurred / 1 new noisy / 2 new clean+old degraded
    const N_PER: usize = 25;
    let mut acc = [[0.0f64; 7]; 3];
    let mut n = [0usize; 3];
    let mut tries = 0;
    while n.iter().any(|&k| k < N_PER) && tries < 60_000 {
        tries += 1;
        let clip = &clips[tries % clips.len()];
        let t = sample_triplet(clip.frames.len(), 10, &mut rng)?;
        let (so, sn) =
            (clip.degrade_severity_at(t.key_old), clip.degrade_severity_at(t.key_new));
        let cat = if sn >= 2.0 && so < 1.0 {
            if clip.blur_severity_at(t.key_new) >= 2.0 { 0 } else { 1 }
        } else if sn < 1.0 && so >= 2.0 {
            2
        } else {
            continue;
        };
        if n[cat] >= N_PER {
            continue;
        }
        let vals = branch_losses(&params, clip, t.key_old, t.key_new, t.cur)?;
        let row = [vals.0, vals.1, vals.2, vals.3, vals.4, vals.5, vals.6];
        if row[6].is_nan() {
            continue;
        }
        for (a, v) in acc[cat].iter_mut().zip(row) {
            *a += v;
        }
        n[cat] += 1;
    }
    for (cat, label) in [
        (0usize, "new blurred, old clean"),
        (1, "new noisy, old clean"),
        (2, "new clean, old degraded"),
    ] {
        let k = n[cat] as f64;
        println!(
            "{label:26} n={:2}  loss(w)={:.4} w=.25:{:.4} w=.75:{:.4} aligned w=.25:{:.4} w=.75:{:.4}  w_mean={:.3} w_obj={:.3}",
            n[cat],
            acc[cat][0] / k,
            acc[cat][1] / k,
            acc[cat][2] / k,
            acc[cat][3] / k,
            acc[cat][4] / k,
            acc[cat][5] / k,
            acc[cat][6] / k
        );
    }
    Ok(())
}
