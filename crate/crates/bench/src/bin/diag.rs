//! Temporary training diagnostics: per-net gradient norms, blend-weight
//! split by keyframe blur, and learned-flow endpoint error.

use impression_core::nets::{desk_params, NetId};
use impression_core::synth::{render, training_suite};
use impression_core::train::{
    lr_at, parse_schedule, sample_triplet, sgd_step, triplet_step, LossWeights, TripletIndices,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let warmup: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(400);
    let clips_n: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(4);

    let specs = training_suite(7, clips_n);
    let clips: Vec<_> = specs.iter().map(|s| render(s).unwrap()).collect();
    let mut params = desk_params(0);
    let schedule = parse_schedule(&format!("{}:0.01,{}:0.001", iters * 2 / 3, iters))?;
    let weights = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let segment_len = 10usize;

    // accumulators for blend-weight split over a window
    let (mut w_blur, mut n_blur, mut w_clean, mut n_clean) = (0.0f64, 0usize, 0.0f64, 0usize);
    let mut norm_acc: [f64; 6] = [0.0; 6];
    let mut norm_n = 0usize;

    for iter in 0..iters {
        let clip = &clips[iter % clips.len()];
        let t = if iter < warmup {
            let f = rng.gen_range(0..clip.frames.len());
            TripletIndices { key_old: f, key_new: f, cur: f }
        } else {
            sample_triplet(clip.frames.len(), segment_len, &mut rng)?
        };
        let step = triplet_step(&params, clip, t, &weights)?;
        if iter >= warmup {
            let sev_new = clip.blur_severity_at(t.key_new);
            let sev_old = clip.blur_severity_at(t.key_old);
            // only count contrastive triplets: new blurred & old clean or vice versa
            if sev_new >= 2.0 && sev_old < 1.0 {
                w_blur += step.mean_weight;
                n_blur += 1;
            } else if sev_new < 1.0 && sev_old >= 2.0 {
                w_clean += step.mean_weight;
                n_clean += 1;
            }
        }
        for (i, net) in NetId::ALL.iter().enumerate() {
            let mut sq = 0.0;
            for li in 0..params.net_len(*net) {
                let lg = step.grads.layer(*net, li);
                sq += lg.weights.iter().map(|v| v * v).sum::<f64>();
                sq += lg.bias.iter().map(|v| v * v).sum::<f64>();
            }
            norm_acc[i] += sq.sqrt();
        }
        norm_n += 1;
        let lr = lr_at(&schedule, iter)?;
        sgd_step(&mut params, &step.grads, lr, false);

        if (iter + 1) % 200 == 0 {
            print!("iter {:4} loss {:.4} |", iter + 1, step.loss);
            for (i, net) in NetId::ALL.iter().enumerate() {
                print!(" {:?}={:.2e}", net, norm_acc[i] / norm_n as f64);
            }
            println!(
                " | w(new blurred)={} n={}  w(new clean,old blurred)={} n={}",
                if n_blur > 0 { format!("{:.3}", w_blur / n_blur as f64) } else { "-".into() },
                n_blur,
                if n_clean > 0 { format!("{:.3}", w_clean / n_clean as f64) } else { "-".into() },
                n_clean
            );
            norm_acc = [0.0; 6];
            norm_n = 0;
            (w_blur, n_blur, w_clean, n_clean) = (0.0, 0, 0.0, 0);
        }
    }

    // Learned flow endpoint error on a benchmark-style moving pair.
    let bench = render(&impression_core::synth::blur_heavy_suite(11, 1)[0])?;
    let stride = params.feature_stride();
    for (t, r) in [(14usize, 4usize), (9, 4), (24, 14)] {
        let (flow, scale) = params.flow_forward(&bench.frames[t], &bench.frames[r])?;
        let oracle = bench.oracle_flow(t, r, stride)?;
        let n = flow.data().len();
        let mae: f64 =
            flow.data().iter().zip(oracle.data()).map(|(a, b)| (a - b).abs()).sum::<f64>()
                / n as f64;
        let mag: f64 = oracle.data().iter().map(|v| v.abs()).sum::<f64>() / n as f64;
        let smean = scale.data().iter().sum::<f64>() / scale.data().len() as f64;
        println!(
            "flow({t}->{r}): learned-vs-oracle MAE={:.3} oracle-mean|v|={:.3} scale-mean={:.3}",
            mae, mag, smean
        );
    }
    Ok(())
}
