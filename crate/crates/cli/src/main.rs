mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Config;

/// Usage errors exit with 1, data errors with 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(anyhow::Error),
}

impl<E: std::error::Error + Send + Sync + 'static> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Data(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "trackmine", version, about = "Mine object tracks from video proposals, cluster unknown tracks, evaluate and export training sets")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; stage seeds derive from it [default: 0].
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Link proposals into tracks and report mining statistics.
    BuildTracks(BuildTracksArgs),
    /// Cluster track embeddings.
    Discover(DiscoverArgs),
    /// Score an assignment against annotations with outlier-fraction sweeps.
    Eval(EvalArgs),
    /// Export positive and negative training anchors.
    Trainset(TrainsetArgs),
    /// Mining statistics from a counts file.
    Stats(StatsArgs),
}

#[derive(Args, Debug)]
pub struct BuildTracksArgs {
    #[arg(long)]
    proposals: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Optional annotations; they supply labeled and tracking-error counts.
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long)]
    iou_gate: Option<f64>,
    /// Minimum cosine similarity between consecutive crops, or `off`.
    #[arg(long)]
    embedding_gate: Option<String>,
    #[arg(long)]
    max_gap: Option<u64>,
    #[arg(long)]
    min_length: Option<usize>,
    #[arg(long)]
    confidence_threshold: Option<f64>,
    #[arg(long)]
    duration_hours: Option<f64>,
}

#[derive(Args, Debug)]
pub struct DiscoverArgs {
    /// Tracks file [default: <output-dir>/tracks.ndjson].
    #[arg(long)]
    tracks: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// kmeans or hdbscan [default: hdbscan].
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    min_cluster_size: Option<usize>,
    #[arg(long)]
    min_samples: Option<usize>,
    /// euclidean or cosine (hdbscan only).
    #[arg(long)]
    metric: Option<String>,
    /// Cluster every track, not only those labeled unknown.
    #[arg(long)]
    include_known: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Assignment CSV [default: <output-dir>/assignment.csv].
    #[arg(long)]
    assignment: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Comma-separated known categories [default: the 80 COCO classes].
    #[arg(long)]
    known_categories: Option<String>,
    /// Comma-separated outlier fractions [default: 0, 0.05, ..., 0.5].
    #[arg(long)]
    fractions: Option<String>,
    /// mean or max.
    #[arg(long)]
    normalizer: Option<String>,
}

#[derive(Args, Debug)]
pub struct TrainsetArgs {
    /// Tracks file [default: <output-dir>/tracks.ndjson].
    #[arg(long)]
    tracks: Option<PathBuf>,
    /// Assignment CSV, discover mode [default: <output-dir>/assignment.csv].
    #[arg(long)]
    assignment: Option<PathBuf>,
    /// JSON with `intrinsics` and `ground_plane`.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// finetune or discover [default: finetune].
    #[arg(long)]
    mode: Option<String>,
    /// Merge co-moving person/bicycle tracks into cyclists first.
    #[arg(long)]
    merge_riders: bool,
    /// Rider merge distance in meters [default: 1.0].
    #[arg(long)]
    max_distance: Option<f64>,
    #[arg(long)]
    stride: Option<u32>,
    #[arg(long)]
    iou_min: Option<f64>,
    #[arg(long)]
    iou_max: Option<f64>,
    #[arg(long)]
    free_fraction_min: Option<f64>,
    /// Negatives kept per frame (0 = all) [default: 256].
    #[arg(long)]
    max_negatives: Option<usize>,
    /// Also write the free-space mask as free_space.pgm.
    #[arg(long)]
    dump_mask: bool,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// JSON counts: frames, proposals_total, tracks_total, tracks_labeled,
    /// tracking_errors and optionally duration_hours, tracks_unknown,
    /// track_elements.
    #[arg(long)]
    counts: Option<PathBuf>,
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.global.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.set("seed", cli.global.seed);
    let seed: u64 = cfg.get_or("seed", 0)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.global.jobs)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", cli.global.jobs)))?;
    let out = cli.global.output_dir;
    std::fs::create_dir_all(&out)?;
    match cli.command {
        Command::BuildTracks(a) => commands::build_tracks(&mut cfg, a, seed, &out),
        Command::Discover(a) => commands::discover(&mut cfg, a, seed, &out),
        Command::Eval(a) => commands::eval(&mut cfg, a, seed, &out),
        Command::Trainset(a) => commands::trainset(&mut cfg, a, seed, &out),
        Command::Stats(a) => commands::stats(&mut cfg, a, seed, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
