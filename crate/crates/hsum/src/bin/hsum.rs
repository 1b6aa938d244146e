//! Command-line surface: synthesize datasets, train, evaluate, and produce
//! summaries, all driven by one JSON experiment config plus override flags.
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use clap::{Args, Parser, Subcommand, ValueEnum};
use hsum::config::ExperimentConfig;
use hsum::dataset::{load_manifest, load_sample, Split, SynthConfig, SynthLibrary};
use hsum::error::Result;
use hsum::metrics::F1Aggregate;
use hsum::summarizer::{summarize_video, SummaryMode};
use hsum::trainer::{evaluate, fit, load_checkpoint, EvalProtocol, ScoreSource};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "hsum",
    version,
    about = "Hierarchical multimodal video summarization",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic step-structured dataset
    Synth(SynthArgs),
    /// Train a model from an experiment config
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset split
    Eval(EvalArgs),
    /// Select a summary for one video from a trained checkpoint
    Summarize(SummarizeArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for features, labels and the manifest
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    videos: usize,
    /// Steps (scenes) per video
    #[arg(long, default_value_t = 4)]
    steps: usize,
    #[arg(long, default_value_t = 5)]
    frames_per_step: usize,
    /// Frame feature dimension
    #[arg(long, default_value_t = 32)]
    d_v: usize,
    /// Text feature dimension
    #[arg(long, default_value_t = 24)]
    d_t: usize,
    /// Videos assigned to the validation split
    #[arg(long, default_value_t = 0)]
    val: usize,
    /// Videos assigned to the test split
    #[arg(long, default_value_t = 0)]
    test: usize,
    /// Draw step content from a shared library of this many archetypes
    /// instead of fresh per-video latents
    #[arg(long)]
    library: Option<usize>,
    /// With --library: how many archetypes count as important
    #[arg(long, default_value_t = 2)]
    library_important: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON
    #[arg(long)]
    config: PathBuf,
    /// Dataset manifest or its directory (overrides the config)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint/log directory (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Parent-batch cadence G (0 disables parent steps)
    #[arg(long)]
    global_step: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest or its directory
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// MAP positive fractions, e.g. --map-rho 0.5 0.15
    #[arg(long = "map-rho", num_args = 1.., value_name = "RHO")]
    map_rho: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = AggArg::Mean)]
    f1_aggregate: AggArg,
    #[arg(long, value_enum, default_value_t = SourceArg::Auto)]
    score_source: SourceArg,
    /// Classifier probability at or above which a frame counts as selected
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Write the full report as JSON here (stdout always gets a summary)
    #[arg(long)]
    json: Option<PathBuf>,
    /// Write the per-video metric table as CSV here
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset manifest or its directory
    #[arg(long)]
    data: PathBuf,
    /// Which video to summarize
    #[arg(long)]
    video: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Knapsack)]
    mode: ModeArg,
    /// Knapsack duration budget as a fraction of the video
    #[arg(long, default_value_t = hsum::summarizer::DEFAULT_BUDGET_RATIO)]
    budget: f64,
    /// Fraction of frames kept in topk mode
    #[arg(long, default_value_t = hsum::summarizer::DEFAULT_TOPK_FRACTION)]
    fraction: f64,
    /// Write the summary JSON here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a per-frame score/selection table as CSV
    #[arg(long)]
    scores_csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(v: SplitArg) -> Split {
        match v {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AggArg {
    Mean,
    Max,
}

impl From<AggArg> for F1Aggregate {
    fn from(v: AggArg) -> F1Aggregate {
        match v {
            AggArg::Mean => F1Aggregate::Mean,
            AggArg::Max => F1Aggregate::Max,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Auto,
    Classifier,
    Replay,
}

impl From<SourceArg> for ScoreSource {
    fn from(v: SourceArg) -> ScoreSource {
        match v {
            SourceArg::Auto => ScoreSource::Auto,
            SourceArg::Classifier => ScoreSource::Classifier,
            SourceArg::Replay => ScoreSource::Replay,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Knapsack,
    Topk,
}

impl From<ModeArg> for SummaryMode {
    fn from(v: ModeArg) -> SummaryMode {
        match v {
            ModeArg::Knapsack => SummaryMode::Knapsack,
            ModeArg::Topk => SummaryMode::Topk,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Summarize(args) => cmd_summarize(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            eprintln!("  caused by: {s}");
            source = s.source();
        }
        std::process::exit(1);
    }
}

/// Accept either a manifest file or the dataset directory holding one.
fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| hsum::error::HsumError::io(path, e))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut config = SynthConfig::new(args.seed, args.videos);
    config.steps_per_video = args.steps;
    config.frames_per_step = args.frames_per_step;
    config.d_v = args.d_v;
    config.d_t = args.d_t;
    config.n_val = args.val;
    config.n_test = args.test;
    config.library = args.library.map(|n_archetypes| SynthLibrary {
        n_archetypes,
        n_important: args.library_important,
    });
    let manifest = hsum::dataset::synth_generate(&config, &args.out)?;
    println!(
        "wrote {} videos ({} train / {} val / {} test) to {}",
        manifest.entries.len(),
        manifest.split_ids(Split::Train).len(),
        manifest.split_ids(Split::Val).len(),
        manifest.split_ids(Split::Test).len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = ExperimentConfig::load(&args.config)?;
    if let Some(data) = args.data {
        config.dataset = Some(resolve_manifest(&data));
    }
    if let Some(out) = args.out {
        config.train.checkpoint_dir = Some(out);
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        config.train.epochs = epochs;
    }
    if let Some(g) = args.global_step {
        config.train.global_step = g;
    }
    if let Some(lr) = args.lr {
        config.train.learning_rate = lr;
    }
    config.validate()?;
    let dataset = config.dataset.clone().ok_or_else(|| {
        hsum::error::HsumError::Config(
            "no dataset: set \"dataset\" in the config or pass --data".into(),
        )
    })?;
    let manifest = load_manifest(&resolve_manifest(&dataset))?;
    let result = fit(&manifest, &config.model, &config.train)?;

    let last = result.history.steps.last();
    println!(
        "trained {} steps over {} epochs ({} parent steps skipped)",
        result.history.steps.len(),
        config.train.epochs,
        result.history.skipped_parent_steps
    );
    if let Some(step) = last {
        println!("final training loss {:.6}", step.total);
    }
    match (result.best_val_f1, result.best_epoch) {
        (Some(f1), Some(epoch)) => println!("best validation F1 {f1:.4} at epoch {epoch}"),
        _ => println!("no validation split: best checkpoint is the final state"),
    }
    if let Some(dir) = &config.train.checkpoint_dir {
        println!("checkpoints and history.jsonl in {}", dir.display());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (params, meta) = load_checkpoint(&args.checkpoint)?;
    let manifest = load_manifest(&resolve_manifest(&args.data))?;
    let split: Split = args.split.into();
    let ids = manifest.split_ids(split);
    if ids.is_empty() {
        return Err(hsum::error::HsumError::Invariant(format!(
            "split {split} holds no videos"
        )));
    }
    let samples: Result<Vec<_>> = ids
        .into_iter()
        .map(|id| Ok((id.clone(), load_sample(&manifest, &id)?)))
        .collect();
    let protocol = EvalProtocol {
        f1_aggregate: args.f1_aggregate.into(),
        map_rhos: args.map_rho.unwrap_or_else(|| vec![0.5, 0.15]),
        score_source: args.score_source.into(),
        threshold: args.threshold,
    };
    let report = evaluate(&params, &samples?, &protocol)?;

    println!(
        "checkpoint from epoch {} (step {}), split {split}, {} videos",
        meta.epoch,
        meta.step,
        report.videos.len()
    );
    println!("F1        {:.4}", report.mean_f1);
    if let Some(tau) = report.mean_kendall_tau {
        println!("tau       {tau:.4}");
    }
    if let Some(rho) = report.mean_spearman_rho {
        println!("rho       {rho:.4}");
    }
    for (rho, map) in protocol.map_rhos.iter().zip(&report.mean_map) {
        match map {
            Some(v) => println!("MAP@{rho}   {v:.4}"),
            None => println!("MAP@{rho}   undefined"),
        }
    }
    if let Some(rouge) = &report.mean_rouge {
        println!(
            "ROUGE-1/2/L {:.4} {:.4} {:.4}",
            rouge.rouge_1, rouge.rouge_2, rouge.rouge_l
        );
    }
    if let Some(cos) = report.mean_cosine {
        println!("cosine    {cos:.4}");
    }
    if let Some(path) = &args.json {
        let text = serde_json::to_string_pretty(&report).map_err(|e| {
            hsum::error::HsumError::Json {
                path: path.clone(),
                source: e,
            }
        })?;
        write_text(path, &text)?;
        println!("report JSON written to {}", path.display());
    }
    if let Some(path) = &args.csv {
        write_text(path, &report.csv())?;
        println!("per-video CSV written to {}", path.display());
    }
    Ok(())
}

fn cmd_summarize(args: SummarizeArgs) -> Result<()> {
    let (params, _) = load_checkpoint(&args.checkpoint)?;
    let manifest = load_manifest(&resolve_manifest(&args.data))?;
    let sample = load_sample(&manifest, &args.video)?;
    let mode: SummaryMode = args.mode.into();
    let ratio = match mode {
        SummaryMode::Knapsack => args.budget,
        SummaryMode::Topk => args.fraction,
    };
    let selection = summarize_video(&params, &sample, mode, ratio)?;

    let n_selected: usize = selection.selected_frames.iter().map(|&b| b as usize).sum();
    eprintln!(
        "{}: {} of {} frames selected, {} of {} sentences",
        args.video,
        n_selected,
        selection.selected_frames.len(),
        selection
            .selected_sentences
            .iter()
            .map(|&b| b as usize)
            .sum::<usize>(),
        selection.selected_sentences.len()
    );
    let json =
        serde_json::to_string_pretty(&selection).map_err(|e| hsum::error::HsumError::Json {
            path: args.out.clone().unwrap_or_else(|| PathBuf::from("stdout")),
            source: e,
        })?;
    match &args.out {
        Some(path) => {
            write_text(path, &json)?;
            eprintln!("summary JSON written to {}", path.display());
        }
        None => println!("{json}"),
    }
    if let Some(path) = &args.scores_csv {
        let mut csv = String::from("frame,score,selected\n");
        for (i, (&score, &sel)) in selection
            .frame_scores
            .iter()
            .zip(&selection.selected_frames)
            .enumerate()
        {
            csv.push_str(&format!("{i},{score:.6},{sel}\n"));
        }
        write_text(path, &csv)?;
        eprintln!("per-frame scores written to {}", path.display());
    }
    Ok(())
}
