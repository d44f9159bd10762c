use impression_core::fusion::adaptive_weights;
use impression_core::nets::load_params;
use impression_core::pipeline::{run_clip, FlowSource, Mode, PipelineConfig};
use impression_core::synth::{blur_heavy_suite, render, VideoClip};
use impression_core::tensor::Tensor;
use impression_core::warp::{bilinear_warp, unit_scale};

// Per-transition w-map anatomy: mean/std, border band vs interior,
// reconstructed from the same inputs the pipeline sees.
fn main() {
    let params = load_params(std::env::args().nth(1).unwrap()).unwrap();
    let clips: Vec<VideoClip> =
        blur_heavy_suite(11, 6).iter().map(|s| render(s).unwrap()).collect();

    let keys = [4usize, 14, 24, 34];
    for (ci, clip) in clips.iter().enumerate() {
        // replay the impression recurrence with oracle flow
        let mut memory: Option<(Tensor, usize)> = None;
        for (si, &key) in keys.iter().enumerate() {
            let f_key = params.feature_forward(&clip.frames[key]).unwrap();
            let f_task = match &memory {
                None => f_key.clone(),
                Some((f_imp, prev)) => {
                    let flow = clip.oracle_flow(key, *prev, params.feature_stride()).unwrap();
                    let scale = unit_scale(f_key.height(), f_key.width());
                    let warped = bilinear_warp(f_imp, &flow, &scale).unwrap();
                    let q_old = params.quality_forward(&warped).unwrap();
                    let q_new = params.quality_forward(&f_key).unwrap();
                    let w = adaptive_weights(&q_old, &q_new).unwrap();

                    let (h, wd) = (w.height(), w.width());
                    let band = 2usize;
                    let mut interior = vec![];
                    let mut border = vec![];
                    for y in 0..h {
                        for x in 0..wd {
                            let v = w.data()[y * wd + x];
                            if y < band || x < band || y >= h - band || x >= wd - band {
                                border.push(v);
                            } else {
                                interior.push(v);
                            }
                        }
                    }
                    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
                    let m = w.mean();
                    let std = (w.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                        / w.data().len() as f64)
                        .sqrt();
                    let mn = w.data().iter().cloned().fold(f64::INFINITY, f64::min);
                    let mx = w.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    println!(
                        "clip {ci} seg {si} key {key:>2} sev {:.1}  w mean {:.3} std {:.3} min {:.3} max {:.3}  interior {:.3} border {:.3}",
                        clip.degrade_severity_at(key), m, std, mn, mx, mean(&interior), mean(&border)
                    );

                    impression_core::fusion::fuse(&warped, &f_key, &w).unwrap()
                }
            };
            let next = impression_core::fusion::impression_update(&f_key, &f_task, 1.0).unwrap();
            memory = Some((next, key));
        }
    }

    // per-clip mAP per mode, to see where impression loses
    println!("\nper-clip mAP:");
    for (ci, clip) in clips.iter().enumerate() {
        print!("clip {ci}: ");
        for mode in [Mode::Propagate, Mode::FixedBlend, Mode::Impression] {
            let mut cfg = PipelineConfig::new(mode);
            cfg.flow_source = FlowSource::Oracle;
            let summary = run_clip(&params, clip, &cfg).unwrap();
            let dets = summary.detections_per_frame();
            let map =
                impression_core::eval::compute_map(&dets, &clip.ground_truth, 4, 0.5).unwrap();
            print!("{} {:.3}  ", mode.name(), map);
        }
        println!();
    }
}
