use impression_core::nets::load_params;
use impression_core::pipeline::{evaluate_suite, FlowSource, Mode, PipelineConfig};
use impression_core::synth::{blur_heavy_suite, render};

fn main() {
    let params = load_params(std::env::args().nth(1).unwrap()).unwrap();
    let flow = match std::env::args().nth(2).as_deref() {
        Some("oracle") => FlowSource::Oracle,
        _ => FlowSource::Learned,
    };
    let clips: Vec<_> = blur_heavy_suite(11, 10).iter().map(|s| render(s).unwrap()).collect();

    let gate = std::env::args().nth(3).and_then(|a| a.parse::<f64>().ok());
    for mode in [Mode::PerFrame, Mode::Propagate, Mode::FixedBlend, Mode::Impression] {
        let mut cfg = PipelineConfig::new(mode);
        cfg.flow_source = flow;
        cfg.score_floor = 0.3;
        if let Some(g) = gate {
            cfg.memory_gate = g;
        }
        let eval = evaluate_suite(&params, &clips, &cfg, 0.5).unwrap();
        // split transition weights by the NEW keyframe's degradation kind
        let mut clean = vec![];
        let mut blur = vec![];
        let mut noise = vec![];
        for (clip, summary) in clips.iter().zip(&eval.summaries) {
            for t in &summary.transitions {
                if clip.blur_severity_at(t.key_frame) >= 2.0 {
                    blur.push(t.weight);
                } else if clip.degrade_severity_at(t.key_frame) >= 2.0 {
                    noise.push(t.weight);
                } else {
                    clean.push(t.weight);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        println!(
            "{:<12} mAP={:.4}  w_clean={:.4} (n={})  w_blur={:.4} (n={})  w_noise={:.4} (n={})",
            mode.name(),
            eval.map,
            mean(&clean),
            clean.len(),
            mean(&blur),
            blur.len(),
            mean(&noise),
            noise.len()
        );
    }
}
