//! Command-line front end. Every command is deterministic given its flags;
//! the only non-reproducible bytes are the `timing` field of evaluation
//! reports.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::anchors::cluster_anchors_traced;
use crate::augment::{mixup, mosaic, AnnotatedImage, LambdaSource, MixupConfig, MosaicConfig, PixelGrid, DEFAULT_MIN_BOX_AREA};
use crate::dataset::{
    class_histogram, class_loss_weights, image_sample_weights, inverse_freq_sample_weights, merge,
    resample_images, subsample_stride, CategoryId, ClassMap, Dataset, DEFAULT_FPS,
};
use crate::detection::{group_by_image, load_results};
use crate::error::{Error, Result};
use crate::eval::{coco_ap, pair_offline, pair_streaming, EvalConfig, EvalResult, NO_GT};
use crate::optimizer::{benchmark, write_benchmark_csv, BenchmarkConfig, Objective, OptimizerChoice};
use crate::reparam::{count_flops, count_params, equivalence_error, BlockDescription, FusedFile};
use crate::stream::{simulate_dataset, LatencyModel, PredictionTimeline, SchedulePolicy, StreamConfig};
use crate::synth::{generate, DegradeConfig, SynthConfig};

/// Equivalence error above which `fuse` fails.
pub const FUSE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(name = "streamap", version, about = "Streaming and offline AP evaluation harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic stream with perfect and degraded detections.
    Synth(SynthArgs),
    /// Score detections offline or in streaming mode.
    Evaluate(EvaluateArgs),
    /// Run the detector scheduler and dump the prediction timeline.
    Simulate(SimulateArgs),
    /// Fuse a multi-branch convolution block into one 3x3 convolution.
    Fuse(FuseArgs),
    /// Dataset utilities.
    #[command(subcommand)]
    Tools(ToolsCommand),
    /// Optimizer benchmark on an analytic objective.
    Bench(BenchArgs),
    /// Box-level Mosaic and Mixup.
    #[command(subcommand)]
    Augment(AugmentCommand),
    /// Quick numeric self-test of every module.
    Selfcheck(SelfcheckArgs),
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((
            a.parse().map_err(|e| format!("'{a}': {e}"))?,
            b.parse().map_err(|e| format!("'{b}': {e}"))?,
        )),
        _ => Err(format!("expected 'a,b', got '{s}'")),
    }
}

fn parse_u32_pair(s: &str) -> std::result::Result<(u32, u32), String> {
    let (a, b) = parse_pair(s)?;
    let ok = |v: f64| v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64;
    if ok(a) && ok(b) {
        Ok((a as u32, b as u32))
    } else {
        Err(format!("expected two non-negative integers, got '{s}'"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogNormalArg {
    pub mu: f64,
    pub sigma: f64,
    pub seed: u64,
}

fn parse_lognormal(s: &str) -> std::result::Result<LogNormalArg, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [mu, sigma, seed] => Ok(LogNormalArg {
            mu: mu.parse().map_err(|e| format!("mu '{mu}': {e}"))?,
            sigma: sigma.parse().map_err(|e| format!("sigma '{sigma}': {e}"))?,
            seed: seed.parse().map_err(|e| format!("seed '{seed}': {e}"))?,
        }),
        _ => Err(format!("expected 'mu,sigma,seed', got '{s}'")),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub objects: usize,
    #[arg(long, default_value_t = 60)]
    pub frames: usize,
    #[arg(long, default_value_t = DEFAULT_FPS)]
    pub fps: f64,
    /// Horizontal velocity range, px/frame.
    #[arg(long, value_parser = parse_pair, default_value = "0,0", allow_hyphen_values = true)]
    pub vx_range: (f64, f64),
    /// Vertical velocity range, px/frame.
    #[arg(long, value_parser = parse_pair, default_value = "0,0", allow_hyphen_values = true)]
    pub vy_range: (f64, f64),
    /// Box side range in pixels.
    #[arg(long, value_parser = parse_u32_pair, default_value = "32,160")]
    pub size_range: (u32, u32),
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DegradeConfig::default().jitter)]
    pub jitter: f64,
    #[arg(long, default_value_t = DegradeConfig::default().drop_probability)]
    pub drop_prob: f64,
    #[arg(long, default_value_t = DegradeConfig::default().false_positive_rate)]
    pub fp_rate: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Offline,
    Streaming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyArg {
    LatestBlocking,
    Queue,
}

impl From<PolicyArg> for SchedulePolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::LatestBlocking => SchedulePolicy::LatestBlocking,
            PolicyArg::Queue => SchedulePolicy::EveryFrameQueue,
        }
    }
}

#[derive(Debug, Args, Clone)]
#[group(id = "latency", multiple = false)]
pub struct LatencyArgs {
    /// Constant latency in seconds.
    #[arg(long, group = "latency")]
    pub latency_const: Option<f64>,
    /// CSV with header image_id,latency_seconds.
    #[arg(long, group = "latency")]
    pub latency_trace: Option<PathBuf>,
    /// Log-normal latency `mu,sigma,seed`.
    #[arg(long, group = "latency", value_parser = parse_lognormal, allow_hyphen_values = true)]
    pub latency_lognormal: Option<LogNormalArg>,
}

impl LatencyArgs {
    fn model(&self) -> Result<Option<LatencyModel>> {
        Ok(if let Some(c) = self.latency_const {
            Some(LatencyModel::Constant(c))
        } else if let Some(p) = &self.latency_trace {
            Some(LatencyModel::load_trace(p)?)
        } else {
            self.latency_lognormal.map(|l| LatencyModel::LogNormal {
                mu: l.mu,
                sigma: l.sigma,
                seed: l.seed,
            })
        })
    }

    fn echo(&self) -> serde_json::Value {
        if let Some(c) = self.latency_const {
            serde_json::json!({"kind": "constant", "seconds": c})
        } else if let Some(p) = &self.latency_trace {
            serde_json::json!({"kind": "trace", "path": p})
        } else if let Some(l) = self.latency_lognormal {
            serde_json::json!({"kind": "lognormal", "mu": l.mu, "sigma": l.sigma, "seed": l.seed})
        } else {
            serde_json::Value::Null
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub gt: PathBuf,
    /// COCO results file.
    #[arg(long, conflicts_with = "timeline")]
    pub dets: Option<PathBuf>,
    /// Timeline dump from `simulate` (streaming mode only).
    #[arg(long)]
    pub timeline: Option<PathBuf>,
    #[command(flatten)]
    pub latency: LatencyArgs,
    #[arg(long, value_enum, default_value = "latest-blocking")]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = DEFAULT_FPS)]
    pub fps: f64,
    /// Comma-separated IoU thresholds.
    #[arg(long, value_delimiter = ',')]
    pub iou_thrs: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100)]
    pub max_dets: usize,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional PR-curve CSV path.
    #[arg(long)]
    pub pr_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub dets: PathBuf,
    #[command(flatten)]
    pub latency: LatencyArgs,
    #[arg(long, value_enum, default_value = "latest-blocking")]
    pub policy: PolicyArg,
    #[arg(long, default_value_t = DEFAULT_FPS)]
    pub fps: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// Block description JSON.
    #[arg(long)]
    pub block: PathBuf,
    /// Fused weights JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Equivalence and cost report JSON; printed to stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Spatial size of the sampled inputs.
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum ToolsCommand {
    /// k-means anchor shapes over ground-truth boxes.
    Anchors {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 9)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class sampling and loss weights.
    Weights {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class annotation counts as CSV.
    Histogram {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep frames whose index is a multiple of the stride.
    Subsample {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        stride: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge sources onto the canonical classes.
    Merge {
        /// `name=path`, repeated.
        #[arg(long = "part", required = true)]
        parts: Vec<String>,
        #[arg(long)]
        class_map: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw image ids with inverse-frequency class weighting.
    Resample {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Sgd,
    Adam,
    LookaheadSgd,
    LookaheadAdam,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum, default_value = "quadratic")]
    pub objective: Objective,
    #[arg(long, value_enum, default_value = "lookahead-adam")]
    pub optimizer: OptimizerArg,
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Uniform start-point perturbation.
    #[arg(long, default_value_t = 0.0)]
    pub jitter: f64,
    /// CSV output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AugmentCommand {
    Mosaic {
        /// Four box records (JSON), comma-separated.
        #[arg(long, value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        /// Matching PGM/PPM images, comma-separated.
        #[arg(long, value_delimiter = ',')]
        images: Option<Vec<PathBuf>>,
        #[arg(long, value_parser = parse_u32_pair)]
        center: Option<(u32, u32)>,
        #[arg(long, default_value_t = DEFAULT_MIN_BOX_AREA)]
        min_box_area: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        image_out: Option<PathBuf>,
    },
    Mixup {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        image_a: Option<PathBuf>,
        #[arg(long)]
        image_b: Option<PathBuf>,
        /// Fixed blend weight; Beta(32, 32) when absent.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        image_out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    /// Optional JSON summary path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Tools(t) => cmd_tools(t),
        Command::Bench(a) => cmd_bench(a),
        Command::Augment(a) => cmd_augment(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<i32> {
    let cfg = SynthConfig {
        objects: a.objects,
        frames: a.frames,
        fps: a.fps,
        vx_range: a.vx_range,
        vy_range: a.vy_range,
        size_range: a.size_range,
        seed: a.seed,
        degrade: DegradeConfig {
            jitter: a.jitter,
            drop_probability: a.drop_prob,
            false_positive_rate: a.fp_rate,
        },
        ..SynthConfig::default()
    };
    let scenario = generate(&cfg)?;
    scenario.write(&a.out)?;
    println!(
        "wrote {} frames, {} annotations to {}",
        scenario.gt.images.len(),
        scenario.gt.annotations.len(),
        a.out.display()
    );
    Ok(0)
}

/// Evaluation report. Everything except `timing` is a pure function of the
/// inputs and flags.
#[derive(Debug, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub per_threshold: Vec<f64>,
    pub per_class: BTreeMap<String, f64>,
    pub frames: usize,
    pub snapshots: Option<usize>,
    pub config_echo: serde_json::Value,
    pub timing: Timing,
}

#[derive(Debug, Serialize)]
pub struct Timing {
    pub elapsed_seconds: f64,
}

fn check_result(r: &EvalResult) -> Result<()> {
    let in_range = |v: f64| v == NO_GT || (0.0..=100.0).contains(&v);
    let all = [r.ap, r.ap50, r.ap75, r.ap_small, r.ap_medium, r.ap_large];
    if all.iter().chain(r.per_threshold.iter()).chain(r.per_class.values()).all(|&v| in_range(v)) {
        Ok(())
    } else {
        Err(Error::Internal("AP value outside [0, 100]".into()))
    }
}

fn stream_config(fps: f64, frames: usize, policy: PolicyArg) -> StreamConfig {
    StreamConfig {
        fps,
        frame_count: frames.max(1),
        policy: policy.into(),
    }
}

fn simulated_timeline(gt: &Dataset, dets: &Path, latency: &LatencyArgs, policy: PolicyArg, fps: f64) -> Result<PredictionTimeline> {
    let model = latency
        .model()?
        .ok_or_else(|| Error::InvalidArgument("streaming from raw detections needs a latency flag".into()))?;
    let dets = group_by_image(load_results(dets)?);
    simulate_dataset(gt, &dets, &model, &stream_config(fps, gt.images.len(), policy))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<i32> {
    let started = Instant::now();
    let gt = Dataset::load_coco_with_fps(&a.gt, a.fps)?;
    let mut cfg = EvalConfig {
        max_dets: a.max_dets,
        ..EvalConfig::default()
    };
    if let Some(t) = &a.iou_thrs {
        cfg.iou_thresholds = t.clone();
    }
    cfg.validate()?;

    let (pairs, snapshots) = match a.mode {
        Mode::Offline => {
            if a.timeline.is_some() {
                return Err(Error::InvalidArgument("offline mode takes --dets, not --timeline".into()));
            }
            let path = a.dets.as_ref().ok_or_else(|| Error::InvalidArgument("offline mode needs --dets".into()))?;
            (pair_offline(&gt, &group_by_image(load_results(path)?)), None)
        }
        Mode::Streaming => {
            let timeline = match (&a.dets, &a.timeline) {
                (_, Some(t)) => PredictionTimeline::load(t)?,
                (Some(d), None) => simulated_timeline(&gt, d, &a.latency, a.policy, a.fps)?,
                (None, None) => {
                    return Err(Error::InvalidArgument("streaming mode needs --dets or --timeline".into()))
                }
            };
            (pair_streaming(&gt, &timeline)?, Some(timeline.len()))
        }
    };
    let result = coco_ap(&pairs, &gt.categories, &cfg)?;
    check_result(&result)?;

    if let Some(p) = &a.pr_csv {
        fs::write(p, result.pr_curves_csv(&cfg))?;
    }
    let per_class = result
        .per_class
        .iter()
        .map(|(c, v)| (gt.categories.get(c).cloned().unwrap_or_else(|| c.to_string()), *v))
        .collect();
    let config_echo = serde_json::json!({
        "gt": a.gt,
        "dets": a.dets,
        "timeline": a.timeline,
        "latency": if a.mode == Mode::Streaming && a.timeline.is_none() { a.latency.echo() } else { serde_json::Value::Null },
        "policy": a.policy,
        "fps": a.fps,
        "iou_thresholds": cfg.iou_thresholds,
        "recall_points": cfg.recall_points,
        "max_dets": cfg.max_dets,
    });
    let report = RunReport {
        mode: a.mode,
        ap: result.ap,
        ap50: result.ap50,
        ap75: result.ap75,
        ap_small: result.ap_small,
        ap_medium: result.ap_medium,
        ap_large: result.ap_large,
        per_threshold: result.per_threshold.clone(),
        per_class,
        frames: pairs.len(),
        snapshots,
        config_echo,
        timing: Timing {
            elapsed_seconds: started.elapsed().as_secs_f64(),
        },
    };
    write_json(&a.out, &report)?;
    println!(
        "{} AP {:.3} (AP50 {:.3}, AP75 {:.3}) over {} frames",
        match a.mode {
            Mode::Offline => "offline",
            Mode::Streaming => "streaming",
        },
        result.ap,
        result.ap50,
        result.ap75,
        pairs.len()
    );
    Ok(0)
}

fn cmd_simulate(a: SimulateArgs) -> Result<i32> {
    let gt = Dataset::load_coco_with_fps(&a.gt, a.fps)?;
    let timeline = simulated_timeline(&gt, &a.dets, &a.latency, a.policy, a.fps)?;
    timeline.save(&a.out)?;
    println!("{} snapshots over {} frames", timeline.len(), gt.images.len());
    Ok(0)
}

#[derive(Debug, Serialize)]
pub struct FuseReport {
    pub in_channels: usize,
    pub out_channels: usize,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    pub input_size: usize,
    pub trials: usize,
    pub seed: u64,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn cmd_fuse(a: FuseArgs) -> Result<i32> {
    let desc: BlockDescription = serde_json::from_str(&fs::read_to_string(&a.block)?)?;
    let block = desc.materialize()?;
    let fused = block.fuse()?;
    if a.size == 0 {
        return Err(Error::InvalidArgument("--size must be at least 1".into()));
    }
    let err = equivalence_error(&block, &fused, a.trials, a.size, a.size, a.seed)?;
    let report = FuseReport {
        in_channels: block.in_channels,
        out_channels: block.out_channels,
        params_before: count_params(&block),
        params_after: count_params(&fused),
        flops_before: count_flops(&block, a.size, a.size),
        flops_after: count_flops(&fused, a.size, a.size),
        input_size: a.size,
        trials: a.trials,
        seed: a.seed,
        max_abs_error: err,
        tolerance: FUSE_TOLERANCE,
        passed: err <= FUSE_TOLERANCE,
    };
    write_json(&a.out, &FusedFile::from(&fused))?;
    match &a.report {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if !report.passed {
        return Err(Error::Internal(format!(
            "fused block deviates by {err:e}, above {FUSE_TOLERANCE:e}"
        )));
    }
    Ok(0)
}

fn cmd_tools(t: ToolsCommand) -> Result<i32> {
    match t {
        ToolsCommand::Anchors { gt, k, seed, out } => {
            let d = Dataset::load_coco(gt)?;
            let outcome = cluster_anchors_traced(&d.boxes(), k, seed)?;
            write_json(
                &out,
                &serde_json::json!({
                    "k": k,
                    "seed": seed,
                    "anchors": outcome.anchors.anchors,
                    "objective": outcome.objective_trace.last(),
                    "iterations": outcome.iterations,
                }),
            )?;
        }
        ToolsCommand::Weights { gt, out } => {
            let d = Dataset::load_coco(gt)?;
            let h = class_histogram(&d);
            let named = |m: BTreeMap<CategoryId, f64>| -> BTreeMap<String, f64> {
                m.into_iter().map(|(c, v)| (d.categories[&c].clone(), v)).collect()
            };
            let counts: BTreeMap<String, u64> = h.counts.iter().map(|(c, n)| (d.categories[c].clone(), *n)).collect();
            write_json(
                &out,
                &serde_json::json!({
                    "counts": counts,
                    "inverse_freq_sample_weights": named(inverse_freq_sample_weights(&h)?),
                    "class_loss_weights": named(class_loss_weights(&h)?),
                }),
            )?;
        }
        ToolsCommand::Histogram { gt, out } => {
            let d = Dataset::load_coco(gt)?;
            let h = class_histogram(&d);
            let mut w = csv::Writer::from_path(&out)?;
            w.write_record(["category_id", "name", "count"])?;
            for (c, n) in &h.counts {
                let name = d.categories.get(c).map(String::as_str).unwrap_or("");
                w.write_record([c.to_string(), name.to_string(), n.to_string()])?;
            }
            w.flush()?;
        }
        ToolsCommand::Subsample { gt, stride, out } => {
            let d = Dataset::load_coco(gt)?;
            let s = subsample_stride(&d, stride)?;
            s.save_coco(&out)?;
            println!("kept {} of {} frames", s.images.len(), d.images.len());
        }
        ToolsCommand::Merge { parts, class_map, out } => {
            let map = ClassMap::load(class_map)?;
            let mut loaded = Vec::with_capacity(parts.len());
            for p in &parts {
                let (name, path) = p
                    .split_once('=')
                    .ok_or_else(|| Error::InvalidArgument(format!("--part expects name=path, got '{p}'")))?;
                loaded.push((name.to_string(), Dataset::load_coco(path)?));
            }
            let refs: Vec<(&str, &Dataset)> = loaded.iter().map(|(n, d)| (n.as_str(), d)).collect();
            let merged = merge(&refs, &map)?;
            merged.save_coco(&out)?;
            println!("merged {} frames", merged.images.len());
        }
        ToolsCommand::Resample { gt, n, seed, out } => {
            let d = Dataset::load_coco(gt)?;
            let weights = inverse_freq_sample_weights(&class_histogram(&d))?;
            let ids = resample_images(&image_sample_weights(&d, &weights), n, seed)?;
            write_json(&out, &ids)?;
        }
    }
    Ok(0)
}

fn cmd_bench(a: BenchArgs) -> Result<i32> {
    let (lr, k, alpha) = (a.lr, a.k, a.alpha);
    let optimizer = match a.optimizer {
        OptimizerArg::Sgd => OptimizerChoice::Sgd { lr },
        OptimizerArg::Adam => OptimizerChoice::Adam { lr },
        OptimizerArg::LookaheadSgd => OptimizerChoice::LookaheadSgd { lr, k, alpha },
        OptimizerArg::LookaheadAdam => OptimizerChoice::LookaheadAdam { lr, k, alpha },
    };
    let cfg = BenchmarkConfig {
        objective: a.objective,
        optimizer,
        steps: a.steps,
        seed: a.seed,
        jitter: a.jitter,
    };
    let result = benchmark(&cfg)?;
    write_benchmark_csv(BufWriter::new(fs::File::create(&a.out)?), &cfg, &result)?;
    if result.diverged {
        eprintln!("warning: run diverged after {} steps", result.losses.len() - 1);
    }
    println!("final loss {:e}", result.final_loss);
    Ok(0)
}

fn load_record(path: &Path, image: Option<&PathBuf>) -> Result<AnnotatedImage> {
    let mut rec: AnnotatedImage = serde_json::from_str(&fs::read_to_string(path)?)?;
    if let Some(p) = image {
        rec.pixels = Some(PixelGrid::load_pnm(p)?);
    }
    rec.normalized()
}

fn save_output(img: &AnnotatedImage, out: &Path, image_out: Option<&PathBuf>) -> Result<()> {
    write_json(out, img)?;
    match (image_out, &img.pixels) {
        (Some(p), Some(px)) => px.save_pnm(p),
        (Some(_), None) => Err(Error::InvalidArgument("--image-out needs pixel inputs".into())),
        _ => Ok(()),
    }
}

fn cmd_augment(a: AugmentCommand) -> Result<i32> {
    match a {
        AugmentCommand::Mosaic { inputs, images, center, min_box_area, seed, out, image_out } => {
            let counts = [Some(inputs.len()), images.as_ref().map(Vec::len)];
            if let Some(n) = counts.into_iter().flatten().find(|&n| n != 4) {
                return Err(Error::InvalidArgument(format!("mosaic takes exactly 4 inputs, got {n}")));
            }
            let recs = inputs
                .iter()
                .enumerate()
                .map(|(i, p)| load_record(p, images.as_ref().map(|v| &v[i])))
                .collect::<Result<Vec<_>>>()?;
            let cfg = MosaicConfig { center, min_box_area };
            let img = mosaic(&recs, &cfg, seed)?;
            save_output(&img, &out, image_out.as_ref())?;
        }
        AugmentCommand::Mixup { a, b, image_a, image_b, lambda, seed, out, image_out } => {
            let ra = load_record(&a, image_a.as_ref())?;
            let rb = load_record(&b, image_b.as_ref())?;
            let cfg = MixupConfig {
                lambda: lambda.map_or(LambdaSource::default(), |lambda| LambdaSource::Fixed { lambda }),
                ..MixupConfig::default()
            };
            let img = mixup(&ra, &rb, &cfg, seed)?;
            save_output(&img, &out, image_out.as_ref())?;
        }
    }
    Ok(0)
}

#[derive(Debug, Serialize)]
struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn selfchecks() -> Result<Vec<Check>> {
    use crate::attention::{scaled_attention, TokenMatrix};
    use crate::dataset::{FrameRecord, ImageId, SequenceId};
    use crate::optimizer::{lookahead_run, LookaheadConfig, ParamVector, Sgd};
    use crate::reparam::{Branch, BranchBlock, ConvSpec, IdentityBranch};
    use crate::stream::simulate;
    use ndarray::array;
    use rand::SeedableRng;

    let mut checks = Vec::new();

    let frames: Vec<FrameRecord> = (0..30)
        .map(|i| FrameRecord {
            image_id: ImageId(i),
            file_name: String::new(),
            sequence_id: SequenceId(0),
            frame_index: i,
            timestamp: i as f64 / DEFAULT_FPS,
            width: 1,
            height: 1,
            source: None,
        })
        .collect();
    let t = simulate(&frames, &Default::default(), &LatencyModel::Constant(0.05), &StreamConfig::new(30))?;
    let processed: Vec<u64> = t.snapshots.iter().map(|s| s.source_image_id.0).collect();
    let expected: Vec<u64> = (0..30).filter(|i| i % 3 != 2).collect();
    checks.push(Check {
        name: "scheduler hand trace",
        passed: processed == expected,
        detail: format!("{} frames processed", processed.len()),
    });

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let block = BranchBlock {
        in_channels: 4,
        out_channels: 4,
        branches: vec![
            Branch { conv: ConvSpec::random(4, 4, 3, true, &mut rng), bn: None },
            Branch { conv: ConvSpec::random(4, 4, 1, true, &mut rng), bn: None },
        ],
        identity: Some(IdentityBranch::default()),
    };
    let err = equivalence_error(&block, &block.fuse()?, 5, 8, 8, 0)?;
    checks.push(Check { name: "branch fusion", passed: err <= 1e-6, detail: format!("max error {err:e}") });

    let tm = |a| TokenMatrix::new(a);
    let out = scaled_attention(&tm(array![[1.0], [0.0]])?, &tm(array![[1.0], [0.0]])?, &tm(array![[2.0], [4.0]])?)?;
    let v = out.values();
    checks.push(Check {
        name: "attention hand case",
        passed: (v[[0, 0]] - 2.5379).abs() < 1e-4 && (v[[1, 0]] - 3.0).abs() < 1e-12,
        detail: format!("[{:.4}, {:.4}]", v[[0, 0]], v[[1, 0]]),
    });

    let phi = lookahead_run(
        &ParamVector(vec![1.0]),
        Sgd { lr: 0.1 },
        LookaheadConfig::default(),
        |p| Objective::Quadratic.grad(p),
        1,
    )?;
    checks.push(Check {
        name: "lookahead one sync",
        passed: (phi.0[0] - 0.66384).abs() <= 1e-12,
        detail: format!("phi = {}", phi.0[0]),
    });
    Ok(checks)
}

fn cmd_selfcheck(a: SelfcheckArgs) -> Result<i32> {
    let checks = selfchecks()?;
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if let Some(p) = &a.out {
        write_json(p, &checks)?;
    }
    if checks.iter().all(|c| c.passed) {
        Ok(0)
    } else {
        Err(Error::Internal("self-check failed".into()))
    }
}
