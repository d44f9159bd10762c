use impression_core::eval::{compute_map, decode_detections};
use impression_core::fusion::{adaptive_weights, fuse, impression_update};
use impression_core::nets::{load_params, Params};
use impression_core::synth::{blur_heavy_suite, render, VideoClip};
use impression_core::tensor::Tensor;
use impression_core::warp::{bilinear_warp, unit_scale};

#[derive(Clone, Copy)]
enum WPolicy {
    Map,
    ConstMean,
    Half,
    MapIfDrop,   // use the map only where its mean < 0.45, else 0.5
    ClampTail,   // use the map but cap the mean at 0.5 (recenters up-pushes)
    MapAtSeg(usize), // map at one transition, const-mean elsewhere
    KeyConst { blur: f64, noise: f64 }, // constants by key degradation kind, 0.5 on clean keys
}

fn run(params: &Params, clip: &VideoClip, policy: WPolicy, gate: f64) -> Vec<Vec<impression_core::eval::Detection>> {
    let stride = params.feature_stride();
    let keys = [4usize, 14, 24, 34];
    let mut memory: Option<(Tensor, usize)> = None;
    let mut out = vec![Vec::new(); clip.frames.len()];
    for (si, &key) in keys.iter().enumerate() {
        let f_key = params.feature_forward(&clip.frames[key]).unwrap();
        let f_task = match &memory {
            None => f_key.clone(),
            Some((f_imp, prev)) => {
                let flow = clip.oracle_flow(key, *prev, stride).unwrap();
                let scale = unit_scale(f_key.height(), f_key.width());
                let warped = bilinear_warp(f_imp, &flow, &scale).unwrap();
                let q_old = params.quality_forward(&warped).unwrap();
                let q_new = params.quality_forward(&f_key).unwrap();
                let w = adaptive_weights(&q_old, &q_new).unwrap();
                let m = w.mean();
                let w = match policy {
                    WPolicy::Map => w,
                    WPolicy::ConstMean => Tensor::constant(1, w.height(), w.width(), m),
                    WPolicy::Half => Tensor::constant(1, w.height(), w.width(), 0.5),
                    WPolicy::MapIfDrop => {
                        if m < 0.45 {
                            w
                        } else {
                            Tensor::constant(1, w.height(), w.width(), 0.5)
                        }
                    }
                    WPolicy::ClampTail => {
                        if m > 0.5 {
                            let shift = m - 0.5;
                            w.map(|v| (v - shift).clamp(0.0, 1.0))
                        } else {
                            w
                        }
                    }
                    WPolicy::MapAtSeg(target) => {
                        if si == target {
                            w
                        } else {
                            Tensor::constant(1, w.height(), w.width(), m)
                        }
                    }
                    WPolicy::KeyConst { blur, noise } => {
                        let c = if clip.blur_severity_at(key) >= 2.0 {
                            blur
                        } else if clip.degrade_severity_at(key) >= 2.0 {
                            noise
                        } else {
                            0.5
                        };
                        Tensor::constant(1, w.height(), w.width(), c)
                    }
                };
                fuse(&warped, &f_key, &w).unwrap()
            }
        };
        let next = impression_update(&f_key, &f_task, gate).unwrap();
        let seg_start = si * 10;
        let seg_end = (seg_start + 10).min(clip.frames.len());
        for t in seg_start..seg_end {
            let feat = if t == key {
                f_task.clone()
            } else {
                let flow = clip.oracle_flow(t, key, stride).unwrap();
                let scale = unit_scale(f_task.height(), f_task.width());
                bilinear_warp(&f_task, &flow, &scale).unwrap()
            };
            let grid = params.task_forward(&feat).unwrap();
            out[t] = decode_detections(&grid, stride, 0.3, 0.5);
        }
        memory = Some((next, key));
    }
    out
}

fn main() {
    let params = load_params(std::env::args().nth(1).unwrap()).unwrap();
    let clips: Vec<VideoClip> =
        blur_heavy_suite(11, 10).iter().map(|s| render(s).unwrap()).collect();

    for (name, policy) in [
        ("map (impression)", WPolicy::Map),
        ("const mean", WPolicy::ConstMean),
        ("const 0.5 (fixed)", WPolicy::Half),
        ("map only if mean<0.45", WPolicy::MapIfDrop),
        ("map, mean capped at 0.5", WPolicy::ClampTail),
        ("map at seg1 only", WPolicy::MapAtSeg(1)),
        ("map at seg2 only", WPolicy::MapAtSeg(2)),
        ("map at seg3 only", WPolicy::MapAtSeg(3)),
        ("blur keys 0.25", WPolicy::KeyConst { blur: 0.25, noise: 0.5 }),
        ("blur keys 0.35", WPolicy::KeyConst { blur: 0.35, noise: 0.5 }),
        ("blur keys 0.42", WPolicy::KeyConst { blur: 0.42, noise: 0.5 }),
        ("blur 0.35 noise 0.35", WPolicy::KeyConst { blur: 0.35, noise: 0.35 }),
        ("blur 0.35 noise 0.6", WPolicy::KeyConst { blur: 0.35, noise: 0.6 }),
    ] {
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for clip in &clips {
            dets.extend(run(&params, clip, policy, 0.7));
            gts.extend(clip.ground_truth.iter().cloned());
        }
        let map = compute_map(&dets, &gts, 4, 0.5).unwrap();
        println!("{name:<26} mAP={map:.4}");
    }
}
