//! Command-line front end: train on synthetic clips, run the
//! sparse-keyframe detector, sweep schedules, print keyframe-placement
//! tables, and self-check the numerics.
//!
//! Every command is deterministic under a fixed seed; CSV artifacts
//! and the stdout summary never contain wall-clock values (those go to
//! stderr), so identical invocations produce identical bytes.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use impression_core::eval::compute_map;
use impression_core::nets::{desk_params, load_params, save_params, Params};
use impression_core::pipeline::{
    evaluate_suite, run_clip, write_detections_csv, write_frames_csv, FlowSource, Mode,
    PipelineConfig, RunSummary,
};
use impression_core::schedule::{mean_feature_displacement, optimal_keyframe, CostModel};
use impression_core::synth::{blur_heavy_suite, parse_scene, render, training_suite, VideoClip};
use impression_core::train::{parse_schedule, train, write_loss_csv, LossWeights, TrainConfig};
use impression_core::verify::{all_passed, run_all};
use impression_core::Error as CoreError;

#[derive(Parser)]
#[command(
    name = "impression",
    version,
    about = "Sparse-keyframe video object detection on synthetic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one clip through the detector and write CSV artifacts.
    Run(RunArgs),
    /// Train parameters on synthetic clips and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a grid of segment lengths and memory gates.
    Sweep(SweepArgs),
    /// Print keyframe-placement tables for given segment lengths.
    Schedule(ScheduleArgs),
    /// Run the built-in self checks.
    Verify,
}

#[derive(Args)]
struct RunArgs {
    /// Checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scene description file; a built-in benchmark scene is used when
    /// absent.
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Seed for the built-in scene.
    #[arg(long)]
    seed: Option<u64>,
    /// per-frame | propagate | fixed-blend | impression
    #[arg(long)]
    mode: Option<String>,
    /// Segment length: one keyframe per this many frames.
    #[arg(long = "l")]
    l: Option<usize>,
    /// Keyframe position within each segment (default: the placement
    /// minimising mean displacement).
    #[arg(long = "k")]
    k: Option<usize>,
    /// Memory gate in [0, 1].
    #[arg(long = "g")]
    g: Option<f64>,
    /// learned | oracle
    #[arg(long)]
    flow: Option<String>,
    /// Objectness score floor for decoded boxes.
    #[arg(long)]
    score_floor: Option<f64>,
    /// Overlap threshold for suppressing duplicate boxes.
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Output directory for CSV artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value file supplying defaults for any flag of this command.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Number of synthetic training clips.
    #[arg(long)]
    clips: Option<usize>,
    /// Learning-rate schedule, e.g. "2000:0.01,3000:0.001" (the last
    /// count is the total number of iterations).
    #[arg(long)]
    iters: Option<String>,
    /// Leading iterations on still frames before motion is introduced.
    #[arg(long)]
    warmup: Option<usize>,
    /// Segment length the keyframe offsets are drawn for.
    #[arg(long = "l")]
    l: Option<usize>,
    /// Train only the quality and task heads, leaving the feature and
    /// flow networks at their random initial values.
    #[arg(long)]
    freeze_backbone: bool,
    /// Learning-rate multiplier for the quality network.
    #[arg(long)]
    quality_boost: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Seed for the benchmark suite.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of benchmark clips.
    #[arg(long)]
    clips: Option<usize>,
    /// Comma-separated segment lengths, e.g. "1,2,5,10,20".
    #[arg(long = "l")]
    l: Option<String>,
    /// Comma-separated memory gates, e.g. "0.0,0.5,1.0".
    #[arg(long = "g")]
    g: Option<String>,
    /// per-frame | propagate | fixed-blend | impression
    #[arg(long)]
    mode: Option<String>,
    /// learned | oracle
    #[arg(long)]
    flow: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Comma-separated segment lengths.
    #[arg(long = "l", default_value = "10")]
    l: String,
    /// Write the table as CSV here instead of printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successes; everything else is a
            // validation failure.
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Train(args) => cmd_train(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Schedule(args) => cmd_schedule(args),
        Command::Verify => cmd_verify(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<CoreError>(), Some(CoreError::NonFinite { .. })));
            ExitCode::from(if numerical { 2 } else { 1 })
        }
    }
}

// ---------------------------------------------------------------------------
// Config-file overlay: every command flag can be supplied as a
// `key = value` line; explicit flags win.
// ---------------------------------------------------------------------------

struct Overlay {
    values: HashMap<String, String>,
}

impl Overlay {
    fn load(path: Option<&Path>) -> anyhow::Result<Overlay> {
        let mut values = HashMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').with_context(|| {
                    format!("config line {} is not key = value: '{line}'", lineno + 1)
                })?;
                values.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Overlay { values })
    }

    fn string(&self, key: &str, flag: Option<String>) -> Option<String> {
        flag.or_else(|| self.values.get(key).cloned())
    }

    fn path(&self, key: &str, flag: Option<PathBuf>) -> Option<PathBuf> {
        flag.or_else(|| self.values.get(key).map(PathBuf::from))
    }

    fn parse<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> anyhow::Result<T>
    where
        T::Err: Display,
    {
        Ok(self.parse_opt(key, flag)?.unwrap_or(default))
    }

    fn parse_opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> anyhow::Result<Option<T>>
    where
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.values.get(key) {
            None => Ok(None),
            Some(s) => match s.parse() {
                Ok(v) => Ok(Some(v)),
                Err(e) => bail!("config key '{key}': cannot parse '{s}': {e}"),
            },
        }
    }
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: Display,
{
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        match part.parse() {
            Ok(v) => out.push(v),
            Err(e) => bail!("bad {what} '{part}': {e}"),
        }
    }
    if out.is_empty() {
        bail!("empty {what} list");
    }
    Ok(out)
}

fn load_checkpoint(path: Option<&Path>) -> anyhow::Result<Params> {
    let path = path.context("a checkpoint is required (train one with `impression train`)")?;
    let params =
        load_params(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(params)
}

fn out_dir(path: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let dir = path.unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

/// Predicted per-frame cost table for a finished run, in FLOPs of the
/// calibrated cost model. Deterministic, unlike a wall-clock column.
fn write_cost_csv(
    path: &Path,
    summary: &RunSummary,
    model: &CostModel,
    mode: Mode,
) -> anyhow::Result<()> {
    let mut rows = String::from("frame,segment,is_keyframe,predicted_flops\n");
    for f in &summary.frames {
        let cost = match mode {
            Mode::PerFrame => model.c_feat + model.c_task,
            _ if f.is_keyframe => {
                let transition = summary.transitions.iter().any(|t| t.key_frame == f.frame);
                let agg = if transition {
                    model.c_flow + model.c_warp + model.c_agg
                } else {
                    0.0
                };
                model.c_feat + agg + model.c_task
            }
            _ => model.c_flow + model.c_warp + model.c_task,
        };
        rows.push_str(&format!(
            "{},{},{},{:.0}\n",
            f.frame,
            f.segment,
            u8::from(f.is_keyframe),
            cost
        ));
    }
    fs::write(path, rows).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_run(args: RunArgs) -> anyhow::Result<ExitCode> {
    let cfg_file = Overlay::load(args.config.as_deref())?;
    let params = load_checkpoint(cfg_file.path("checkpoint", args.checkpoint).as_deref())?;

    let seed = cfg_file.parse("seed", args.seed, 0u64)?;
    let clip = match cfg_file.path("scene", args.scene) {
        Some(path) => {
            let text = fs::read_to_string(&path)
                .with_context(|| format!("reading scene {}", path.display()))?;
            render(&parse_scene(&text)?)?
        }
        None => render(&blur_heavy_suite(seed, 1)[0])?,
    };

    let mode = Mode::parse(&cfg_file.string("mode", args.mode).unwrap_or("impression".into()))?;
    let l = cfg_file.parse("l", args.l, 10usize)?;
    let k = match cfg_file.parse_opt("k", args.k)? {
        Some(k) => k,
        None => optimal_keyframe(l)?,
    };
    let mut pipeline = PipelineConfig::new(mode);
    pipeline.segment_len = l;
    pipeline.keyframe_offset = k;
    pipeline.memory_gate = cfg_file.parse("g", args.g, pipeline.memory_gate)?;
    pipeline.flow_source =
        FlowSource::parse(&cfg_file.string("flow", args.flow).unwrap_or("learned".into()))?;
    pipeline.score_floor = cfg_file.parse("score-floor", args.score_floor, pipeline.score_floor)?;
    pipeline.nms_iou = cfg_file.parse("nms-iou", args.nms_iou, pipeline.nms_iou)?;

    let dir = out_dir(cfg_file.path("out", args.out))?;

    let started = Instant::now();
    let summary = run_clip(&params, &clip, &pipeline)?;
    let elapsed = started.elapsed();

    let map = compute_map(
        &summary.detections_per_frame(),
        &clip.ground_truth,
        params.num_classes(),
        0.5,
    )?;

    let (_, h, w) = clip.frames[0].shape();
    let model = CostModel::from_params(&params, h, w)?;
    let ratio = match mode {
        Mode::PerFrame => 1.0,
        _ => model.ratio_exact(l)?,
    };

    let mut frames_csv = Vec::new();
    write_frames_csv(&mut frames_csv, &summary)?;
    fs::write(dir.join("frames.csv"), frames_csv)?;
    let mut det_csv = Vec::new();
    write_detections_csv(&mut det_csv, &summary)?;
    fs::write(dir.join("detections.csv"), det_csv)?;
    write_cost_csv(&dir.join("costs.csv"), &summary, &model, mode)?;

    let mean_w = summary
        .mean_transition_weight()
        .map(|w| format!("{w:.4}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "mode={} frames={} mAP@0.5={:.4} mean_blend_weight={} feature_evals={} flow_evals={} predicted_cost_ratio={:.4}",
        mode.name(),
        summary.frames.len(),
        map,
        mean_w,
        summary.counts.feature,
        summary.counts.flow,
        ratio
    );
    eprintln!(
        "runtime: {:.1} ms ({:.2} ms/frame)",
        elapsed.as_secs_f64() * 1e3,
        elapsed.as_secs_f64() * 1e3 / summary.frames.len() as f64
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn cmd_train(args: TrainArgs) -> anyhow::Result<ExitCode> {
    let cfg_file = Overlay::load(args.config.as_deref())?;
    let seed = cfg_file.parse("seed", args.seed, 0u64)?;
    let clips_n = cfg_file.parse("clips", args.clips, 4usize)?;
    let schedule_text =
        cfg_file.string("iters", args.iters).unwrap_or_else(|| "2000:0.01,3000:0.001".into());
    let warmup = cfg_file.parse("warmup", args.warmup, 400usize)?;
    let l = cfg_file.parse("l", args.l, 10usize)?;
    let freeze = args.freeze_backbone
        || cfg_file.values.get("freeze-backbone").map(|v| v == "true").unwrap_or(false);
    let dir = out_dir(cfg_file.path("out", args.out))?;

    let cfg = TrainConfig {
        seed,
        segment_len: l,
        pretrain_iters: warmup,
        schedule: parse_schedule(&schedule_text)?,
        weights: LossWeights::default(),
        quality_lr_boost: cfg_file.parse("quality-boost", args.quality_boost, 10.0)?,
        freeze_backbone: freeze,
        log_every: 25,
        checkpoint_dir: Some(dir.clone()),
    };

    let clips: Vec<VideoClip> = training_suite(seed, clips_n)
        .iter()
        .map(render)
        .collect::<impression_core::Result<_>>()?;

    let mut params = desk_params(seed);
    let started = Instant::now();
    let report = train(&mut params, &clips, &cfg)?;
    let elapsed = started.elapsed();

    save_params(dir.join("checkpoint.ckpt"), &params)?;
    let mut loss_csv = Vec::new();
    write_loss_csv(&mut loss_csv, &report)?;
    fs::write(dir.join("loss.csv"), loss_csv)?;

    println!(
        "trained {} iterations on {} clips: loss {:.4} -> {:.4} (checkpoint.ckpt, loss.csv)",
        report.losses.len(),
        clips.len(),
        report.initial_mean(25),
        report.final_mean(25)
    );
    eprintln!("runtime: {:.1} s", elapsed.as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn cmd_sweep(args: SweepArgs) -> anyhow::Result<ExitCode> {
    let cfg_file = Overlay::load(args.config.as_deref())?;
    let params = load_checkpoint(cfg_file.path("checkpoint", args.checkpoint).as_deref())?;
    let seed = cfg_file.parse("seed", args.seed, 0u64)?;
    let clips_n = cfg_file.parse("clips", args.clips, 4usize)?;
    let lengths: Vec<usize> = parse_list(
        &cfg_file.string("l", args.l).unwrap_or_else(|| "1,2,5,10,20".into()),
        "segment length",
    )?;
    let gates: Vec<f64> =
        parse_list(&cfg_file.string("g", args.g).unwrap_or_else(|| "0.7".into()), "memory gate")?;
    let mode = Mode::parse(&cfg_file.string("mode", args.mode).unwrap_or("impression".into()))?;
    let flow =
        FlowSource::parse(&cfg_file.string("flow", args.flow).unwrap_or("learned".into()))?;
    let dir = out_dir(cfg_file.path("out", args.out))?;

    let clips: Vec<VideoClip> = blur_heavy_suite(seed, clips_n)
        .iter()
        .map(render)
        .collect::<impression_core::Result<_>>()?;
    let (_, h, w) = clips[0].frames[0].shape();
    let model = CostModel::from_params(&params, h, w)?;

    let mut csv = String::from(
        "l,g,k,map,mean_blend_weight,predicted_cost_ratio,mean_displacement\n",
    );
    let mut rows = 0usize;
    for &l in &lengths {
        let k = optimal_keyframe(l)?;
        for &g in &gates {
            let mut pipeline = PipelineConfig::new(mode);
            pipeline.segment_len = l;
            pipeline.keyframe_offset = k;
            pipeline.memory_gate = g;
            pipeline.flow_source = flow;
            let eval = evaluate_suite(&params, &clips, &pipeline, 0.5)?;
            let ratio = match mode {
                Mode::PerFrame => 1.0,
                _ => model.ratio_exact(l)?,
            };
            let mean_w = eval
                .mean_transition_weight()
                .map(|v| format!("{v:.6}"))
                .unwrap_or_else(|| "".into());
            csv.push_str(&format!(
                "{},{},{},{:.6},{},{:.6},{:.6}\n",
                l,
                g,
                k,
                eval.map,
                mean_w,
                ratio,
                mean_feature_displacement(l, k)?
            ));
            rows += 1;
        }
    }
    fs::write(dir.join("sweep.csv"), &csv)?;
    println!("swept {} configurations over {} clips (sweep.csv)", rows, clips.len());
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// schedule
// ---------------------------------------------------------------------------

fn cmd_schedule(args: ScheduleArgs) -> anyhow::Result<ExitCode> {
    let lengths: Vec<usize> = parse_list(&args.l, "segment length")?;
    let mut csv = String::from("l,k,mean_displacement,is_optimal\n");
    let mut table = String::new();
    for &l in &lengths {
        let best = optimal_keyframe(l)?;
        table.push_str(&format!("segment length {l} (optimal keyframe position: {best})\n"));
        for k in 0..l {
            let d = mean_feature_displacement(l, k)?;
            csv.push_str(&format!("{},{},{},{}\n", l, k, d, u8::from(k == best)));
            table.push_str(&format!(
                "  k = {k:>2}  mean displacement = {d:.4}{}\n",
                if k == best { "  <- optimal" } else { "" }
            ));
        }
    }
    match args.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
        }
        None => print!("{table}"),
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

fn cmd_verify() -> anyhow::Result<ExitCode> {
    let results = run_all();
    for r in &results {
        println!("{} {} ({})", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    if all_passed(&results) {
        println!("all {} checks passed", results.len());
        Ok(ExitCode::SUCCESS)
    } else {
        let failed = results.iter().filter(|r| !r.passed).count();
        println!("{failed} of {} checks failed", results.len());
        Ok(ExitCode::from(1))
    }
}
