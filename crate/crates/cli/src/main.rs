//! Command-line driver for the exposure control experiments. Stages map
//! one-to-one onto subcommands so a full run is a sequence of invocations
//! sharing one --out-dir:
//!
//!   predex collect --round 1
//!   predex label   --round 1
//!   predex train   --round 1
//!   predex collect --round 2
//!   predex label   --round 2
//!   predex train   --round 2
//!   predex compare --controllers reactive_ae_ag,learned
//!   predex plot
//!
//! Exit status is zero on success, nonzero with a diagnostic on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use predex_core::config::ExperimentConfig;
use predex_core::error::{Error, Result};
use predex_core::eval::{segment_tags, SegmentTag};
use predex_core::io;
use predex_core::labeler::LabelMetric;
use predex_core::pipeline::{self, checkpoint_path};
use predex_core::sim::render_frame;

mod plot;

#[derive(Parser, Debug)]
#[command(
    name = "predex",
    about = "Predictive camera gain and exposure control experiments",
    version
)]
struct Cli {
    /// Experiment seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Summarize a scene and write its illumination profile.
    Scene(SceneArgs),
    /// Collect dual-camera episodes for one round.
    Collect(CollectArgs),
    /// Build labeled training windows from collected episodes.
    Label(LabelArgs),
    /// Train the controller network for one round.
    Train(TrainArgs),
    /// Run one controller over the held-out evaluation scenes.
    Eval(EvalArgs),
    /// Compare controllers on shared scenes and write the report.
    Compare(CompareArgs),
    /// Render match-count and parameter curves from trace files.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct SceneArgs {
    /// Scene index within the chosen stream.
    #[arg(long, default_value_t = 0)]
    episode: u64,

    /// Inspect the held-out evaluation stream instead of collection.
    #[arg(long)]
    eval: bool,

    /// Also render every Nth frame as a PGM preview (0 = none).
    #[arg(long, default_value_t = 0)]
    render_every: usize,
}

#[derive(Args, Debug)]
struct CollectArgs {
    /// Collection round; rounds past the first drive with the previous
    /// round's trained controller.
    #[arg(long, default_value_t = 1)]
    round: u8,

    /// Checkpoint for the driving controller; defaults to the previous
    /// round's model under --out-dir.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LabelArgs {
    #[arg(long, default_value_t = 1)]
    round: u8,

    /// Label target metric: feat, match, or hybrid.
    #[arg(long)]
    metric: Option<LabelMetric>,

    /// Hybrid blend weight in [0, 1].
    #[arg(long)]
    weight: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training round; pools labeled data from all rounds up to this one.
    #[arg(long, default_value_t = 1)]
    round: u8,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Controller id: fixed, reactive_ae_ag, gradient_metric, or learned.
    #[arg(long, default_value = "reactive_ae_ag")]
    controller: String,

    /// Checkpoint for the learned controller; defaults to the newest
    /// round's model under --out-dir.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Comma-separated controller ids (at least two).
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "fixed,reactive_ae_ag,gradient_metric"
    )]
    controllers: Vec<String>,

    /// Checkpoint for the learned controller; defaults to the newest
    /// round's model under --out-dir.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Trace CSVs to plot; defaults to every trace under
    /// --out-dir/compare, grouped by episode.
    #[arg(long)]
    traces: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The newest round checkpoint under the output root, if any round has
/// been trained.
fn latest_checkpoint(out_dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(u8, PathBuf)> = None;
    let entries = std::fs::read_dir(out_dir).ok()?;
    for entry in entries.flatten() {
        let name = entry.file_name();
        let Some(round) = name
            .to_str()
            .and_then(|n| n.strip_prefix("round"))
            .and_then(|n| n.parse::<u8>().ok())
        else {
            continue;
        };
        let ckpt = entry.path().join("model.ckpt");
        if ckpt.is_file() && best.as_ref().map_or(true, |(r, _)| round > *r) {
            best = Some((round, ckpt));
        }
    }
    best.map(|(_, p)| p)
}

/// Resolves the checkpoint for commands that may drive the learned
/// controller: an explicit path wins, otherwise the newest trained round.
fn resolve_checkpoint(
    explicit: Option<PathBuf>,
    out_dir: &Path,
    needed: bool,
) -> Result<Option<PathBuf>> {
    if explicit.is_some() {
        return Ok(explicit);
    }
    let found = latest_checkpoint(out_dir);
    if needed && found.is_none() {
        return Err(Error::InvalidConfig(format!(
            "the learned controller needs a checkpoint: none found under {} \
             (train a round first or pass --checkpoint)",
            out_dir.display()
        )));
    }
    Ok(found)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out_dir = cli.out_dir.clone();
    let quiet = cli.quiet;
    let progress = |msg: &str| {
        if !quiet {
            println!("{msg}");
        }
    };
    match cli.command {
        Command::Scene(args) => run_scene(&cfg, &args, &out_dir, progress),
        Command::Collect(args) => run_collect(&cfg, &args, &out_dir, progress),
        Command::Label(args) => run_label(&cfg, &args, &out_dir, progress),
        Command::Train(args) => run_train(&cfg, &args, &out_dir, progress),
        Command::Eval(args) => run_eval(&cfg, &args, &out_dir, progress),
        Command::Compare(args) => run_compare(&cfg, &args, &out_dir, progress),
        Command::Plot(args) => run_plot(&args, &out_dir, progress),
    }
}

fn run_scene(
    cfg: &ExperimentConfig,
    args: &SceneArgs,
    out_dir: &Path,
    progress: impl Fn(&str),
) -> Result<()> {
    let (scene, kind) = if args.eval {
        (pipeline::evaluation_scene(cfg, args.episode)?, "eval")
    } else {
        (pipeline::collection_scene(cfg, args.episode)?, "collect")
    };
    let tags = segment_tags(&scene.illumination, cfg.evaluation.dynamic_margin);
    let dynamic = tags.iter().filter(|t| **t == SegmentTag::Dynamic).count();
    let lo = scene.illumination.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scene.illumination.iter().cloned().fold(0.0f64, f64::max);
    progress(&format!(
        "scene {kind} {}: {} frames, viewport {} px, illumination {lo:.3e}..{hi:.3e}, \
         {dynamic} dynamic / {} static frames",
        args.episode,
        scene.len(),
        scene.viewport,
        scene.len() - dynamic,
    ));

    let dir = out_dir.join(format!("scene/{kind}_ep{:04}", args.episode));
    std::fs::create_dir_all(&dir)?;
    let mut csv = String::from("time_index,illumination,segment\n");
    for (t, (level, tag)) in scene.illumination.iter().zip(&tags).enumerate() {
        csv.push_str(&format!("{t},{level},{tag}\n"));
    }
    std::fs::write(dir.join("illumination.csv"), csv)?;

    if args.render_every > 0 {
        let params = cfg.reactive.initial;
        for t in (0..scene.len()).step_by(args.render_every) {
            // Noiseless render so previews depend only on the scene.
            let frame = render_frame(&scene, t, params, &cfg.camera, 1, None)?;
            frame.image.write_pgm(&dir.join(format!("preview_t{t:04}.pgm")))?;
        }
    }
    progress(&format!("wrote {}", dir.display()));
    Ok(())
}

fn run_collect(
    cfg: &ExperimentConfig,
    args: &CollectArgs,
    out_dir: &Path,
    progress: impl FnMut(&str),
) -> Result<()> {
    let checkpoint = if args.round >= 2 {
        match &args.checkpoint {
            Some(p) => Some(p.clone()),
            None => {
                let prev = checkpoint_path(out_dir, args.round - 1);
                if !prev.is_file() {
                    return Err(Error::Collection(format!(
                        "round {} collection needs the round {} checkpoint at {} \
                         (train that round first or pass --checkpoint)",
                        args.round,
                        args.round - 1,
                        prev.display()
                    )));
                }
                Some(prev)
            }
        }
    } else {
        None
    };
    pipeline::collect_round(cfg, args.round, checkpoint.as_deref(), out_dir, progress)?;
    Ok(())
}

fn run_label(
    cfg: &ExperimentConfig,
    args: &LabelArgs,
    out_dir: &Path,
    progress: impl FnMut(&str),
) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(metric) = args.metric {
        cfg.sampling.metric = metric;
    }
    if let Some(weight) = args.weight {
        if !(0.0..=1.0).contains(&weight) {
            return Err(Error::InvalidConfig(format!(
                "--weight {weight} is outside [0, 1]"
            )));
        }
        cfg.sampling.weight = weight;
    }
    pipeline::label_round(&cfg, args.round, out_dir, progress)?;
    Ok(())
}

fn run_train(
    cfg: &ExperimentConfig,
    args: &TrainArgs,
    out_dir: &Path,
    progress: impl FnMut(&str),
) -> Result<()> {
    if args.round == 0 {
        return Err(Error::Training("round must be >= 1".into()));
    }
    if args.round >= 2 {
        let prev = checkpoint_path(out_dir, args.round - 1);
        if !prev.is_file() {
            return Err(Error::Training(format!(
                "round {} training needs the round {} checkpoint at {}; \
                 run the earlier round to completion first",
                args.round,
                args.round - 1,
                prev.display()
            )));
        }
    }
    let mut data = Vec::new();
    for round in 1..=args.round {
        data.extend(pipeline::load_labeled_round(out_dir, round)?);
    }
    pipeline::train_round(cfg, args.round, &data, out_dir, progress)?;
    Ok(())
}

fn run_eval(
    cfg: &ExperimentConfig,
    args: &EvalArgs,
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<()> {
    let checkpoint = resolve_checkpoint(
        args.checkpoint.clone(),
        out_dir,
        args.controller == "learned",
    )?;
    let provider = pipeline::provider_for(cfg, &args.controller, checkpoint.as_deref())?;
    let eval_dir = out_dir.join("eval");
    let traces =
        pipeline::run_eval(cfg, provider.as_ref(), &eval_dir, &mut progress)?;
    for trace in &traces {
        for stats in predex_core::eval::segment_stats(
            trace,
            cfg.evaluation.failure_nfm_floor,
            cfg.evaluation.failure_run,
        ) {
            progress(&format!(
                "episode {} {}: median nfm {:.1}, min nfm {}, frames {}, failed {}",
                trace.episode_index,
                stats.tag,
                stats.median_nfm.unwrap_or(f64::NAN),
                stats.min_nfm.map_or("-".into(), |v| v.to_string()),
                stats.frames,
                stats.tracking_failed,
            ));
        }
    }
    progress(&format!("wrote {}", eval_dir.display()));
    Ok(())
}

fn run_compare(
    cfg: &ExperimentConfig,
    args: &CompareArgs,
    out_dir: &Path,
    progress: impl FnMut(&str),
) -> Result<()> {
    let checkpoint = resolve_checkpoint(
        args.checkpoint.clone(),
        out_dir,
        args.controllers.iter().any(|id| id == "learned"),
    )?;
    let report = pipeline::run_comparison(
        cfg,
        &args.controllers,
        checkpoint.as_deref(),
        out_dir,
        progress,
    )?;
    // The table is the product; print it even under --quiet.
    print!("{}", io::render_report_table(&report.rows));
    Ok(())
}

fn run_plot(args: &PlotArgs, out_dir: &Path, mut progress: impl FnMut(&str)) -> Result<()> {
    let paths = if args.traces.is_empty() {
        let compare_dir = out_dir.join("compare");
        let mut found: Vec<PathBuf> = std::fs::read_dir(&compare_dir)
            .map_err(|e| {
                Error::InvalidConfig(format!(
                    "no traces given and none found under {} ({e})",
                    compare_dir.display()
                ))
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|x| x == "csv")
                    && p.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("trace_"))
            })
            .collect();
        found.sort();
        found
    } else {
        args.traces.clone()
    };
    if paths.is_empty() {
        return Err(Error::InvalidConfig("no trace files to plot".into()));
    }
    let mut traces = Vec::with_capacity(paths.len());
    for path in &paths {
        traces.push(io::load_trace(path)?);
    }
    let dir = paths[0].parent().unwrap_or(Path::new(".")).to_path_buf();
    let written = plot::plot_traces(&traces, &dir)?;
    for path in written {
        progress(&format!("wrote {}", path.display()));
    }
    Ok(())
}
