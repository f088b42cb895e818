use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use trackmine::discovery::{discover_tracks, ClusterAssignment, DiscoveryParams, HdbscanParams, Method};
use trackmine::eval::{
    ami_outlier_sweep, default_fractions, dropped_count, mining_stats, restrict_non_known, restrict_valid, AmiNormalizer,
    MiningCounts, MiningStats, SweepCurve, COCO_CATEGORIES,
};
use trackmine::geom::{CameraIntrinsics, GroundPlane, Metric};
use trackmine::io::{
    read_annotations, read_assignment, read_embeddings, read_proposals, read_tracks, write_assignment,
    write_condensed_tree, write_sweep, write_tracks, GtLabel,
};
use trackmine::tracker::{build_tracks as run_tracker, merge_rider_tracks, TrackLabel, TrackerParams};
use trackmine::trainset::{
    build_training_set, export_training_set, free_space_mask, Mode, PositiveLabel, TrainsetParams,
};

use crate::config::Config;
use crate::manifest::{sub_seed, Manifest};
use crate::{BuildTracksArgs, CliError, CliResult, DiscoverArgs, EvalArgs, StatsArgs, TrainsetArgs};

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn data(e: anyhow::Error) -> CliError {
    CliError::Data(e)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Tracker settings from the merged config.
fn tracker_params(cfg: &Config) -> CliResult<TrackerParams> {
    let d = TrackerParams::default();
    let embedding_gate = match cfg.raw("tracker.embedding_gate") {
        None | Some("off") => None,
        Some(_) => cfg.get::<f64>("tracker.embedding_gate")?,
    };
    let p = TrackerParams {
        iou_gate: cfg.get_or("tracker.iou_gate", d.iou_gate)?,
        embedding_gate,
        max_gap: cfg.get_or("tracker.max_gap", d.max_gap)?,
        min_length: cfg.get_or("tracker.min_length", d.min_length)?,
        confidence_threshold: cfg.get_or("tracker.confidence_threshold", d.confidence_threshold)?,
    };
    p.validate().map_err(|e| usage(e.to_string()))?;
    Ok(p)
}

pub fn build_tracks(cfg: &mut Config, a: BuildTracksArgs, seed: u64, out: &Path) -> CliResult<()> {
    cfg.set("proposals", a.proposals.map(|p| p.display().to_string()));
    cfg.set("embeddings", a.embeddings.map(|p| p.display().to_string()));
    cfg.set("annotations", a.annotations.map(|p| p.display().to_string()));
    cfg.set("tracker.iou_gate", a.iou_gate);
    cfg.set("tracker.embedding_gate", a.embedding_gate);
    cfg.set("tracker.max_gap", a.max_gap);
    cfg.set("tracker.min_length", a.min_length);
    cfg.set("tracker.confidence_threshold", a.confidence_threshold);
    cfg.set("stats.duration_hours", a.duration_hours);

    let params = tracker_params(cfg)?;
    let proposals_path = cfg.require_path("proposals", "--proposals")?;
    let embeddings_path = cfg.path("embeddings");
    if params.embedding_gate.is_some() && embeddings_path.is_none() {
        return Err(usage("tracker.embedding_gate is enabled but no embeddings were given: pass --embeddings"));
    }
    let duration_hours: f64 = cfg.get_or("stats.duration_hours", 0.0)?;
    let mut manifest = Manifest::new("build-tracks", seed, cfg.snapshot());

    let embeddings = match &embeddings_path {
        Some(p) => {
            manifest.input("embeddings", p).with_context(|| format!("--embeddings {}", p.display())).map_err(data)?;
            Some(read_embeddings(p).with_context(|| format!("reading {}", p.display())).map_err(data)?)
        }
        None => None,
    };
    manifest.input("proposals", &proposals_path).with_context(|| format!("--proposals {}", proposals_path.display())).map_err(data)?;
    let proposals = read_proposals(&proposals_path, embeddings.as_ref().map(|m| m.count()))
        .with_context(|| format!("reading {}", proposals_path.display()))
        .map_err(data)?;
    info!("{} proposals in {} frames", proposals.len(), proposals.frame_count());

    let tracks = run_tracker(&proposals, embeddings.as_ref(), &params)?;
    let ids: HashSet<u64> = tracks.tracks.iter().map(|t| t.track_id).collect();
    let annotations = match cfg.path("annotations") {
        Some(p) => {
            manifest.input("annotations", &p).with_context(|| format!("--annotations {}", p.display())).map_err(data)?;
            read_annotations(&p, Some(&ids)).with_context(|| format!("reading {}", p.display())).map_err(data)?
        }
        None => Vec::new(),
    };
    let stats = mining_stats(
        &tracks,
        &annotations,
        proposals.frame_count() as u64,
        duration_hours,
        proposals.len() as u64,
    )?;

    let tracks_path = out.join("tracks.ndjson");
    write_tracks(&tracks, &tracks_path)?;
    manifest.output(&tracks_path);
    let stats_path = out.join("stats.json");
    write_json(&stats, &stats_path)?;
    manifest.output(&stats_path);
    manifest.write(out)?;
    print!("{}", stats.report());
    Ok(())
}

fn discovery_params(cfg: &Config) -> CliResult<DiscoveryParams> {
    let method: Method = cfg.get_or("discover.method", Method::Hdbscan)?;
    let k: Option<usize> = cfg.get("discover.k")?;
    match method {
        Method::Kmeans => {
            for key in ["discover.min_cluster_size", "discover.min_samples", "discover.metric"] {
                if cfg.has(key) {
                    return Err(usage(format!("{key} does not apply to method kmeans")));
                }
            }
            let k = k.ok_or_else(|| usage("method kmeans requires --k"))?;
            if k == 0 {
                return Err(usage("--k must be at least 1"));
            }
            Ok(DiscoveryParams::Kmeans { k })
        }
        Method::Hdbscan => {
            if k.is_some() {
                return Err(usage("--k does not apply to method hdbscan (use --min-cluster-size)"));
            }
            let d = HdbscanParams::default();
            let p = HdbscanParams {
                min_cluster_size: cfg.get_or("discover.min_cluster_size", d.min_cluster_size)?,
                min_samples: cfg.get("discover.min_samples")?,
                metric: cfg.get_or("discover.metric", Metric::Euclidean)?,
            };
            p.validate().map_err(|e| usage(e.to_string()))?;
            Ok(DiscoveryParams::Hdbscan(p))
        }
    }
}

fn input_or_default(cfg: &Config, key: &str, out: &Path, default: &str) -> PathBuf {
    cfg.path(key).unwrap_or_else(|| out.join(default))
}

pub fn discover(cfg: &mut Config, a: DiscoverArgs, seed: u64, out: &Path) -> CliResult<()> {
    cfg.set("tracks", a.tracks.map(|p| p.display().to_string()));
    cfg.set("embeddings", a.embeddings.map(|p| p.display().to_string()));
    cfg.set("discover.method", a.method);
    cfg.set("discover.k", a.k);
    cfg.set("discover.min_cluster_size", a.min_cluster_size);
    cfg.set("discover.min_samples", a.min_samples);
    cfg.set("discover.metric", a.metric);
    cfg.set_flag("discover.include_known", a.include_known);

    let params = discovery_params(cfg)?;
    let include_known = cfg.bool("discover.include_known")?;
    let embeddings_path = cfg.require_path("embeddings", "--embeddings")?;
    let tracks_path = input_or_default(cfg, "tracks", out, "tracks.ndjson");
    let mut manifest = Manifest::new("discover", seed, cfg.snapshot());

    manifest.input("tracks", &tracks_path).with_context(|| format!("tracks file {}", tracks_path.display())).map_err(data)?;
    manifest.input("embeddings", &embeddings_path).with_context(|| format!("--embeddings {}", embeddings_path.display())).map_err(data)?;
    let tracks = read_tracks(&tracks_path).with_context(|| format!("reading {}", tracks_path.display())).map_err(data)?;
    let embeddings = read_embeddings(&embeddings_path).with_context(|| format!("reading {}", embeddings_path.display())).map_err(data)?;

    let selected: Vec<_> = tracks.tracks.iter().filter(|t| include_known || t.label.is_unknown()).collect();
    info!("clustering {} of {} tracks", selected.len(), tracks.len());
    let result = discover_tracks(&selected, &embeddings, &params, sub_seed(seed, "discover"))?;
    if let Some(w) = &result.warning {
        warn!("{w}");
    }

    let assignment_path = out.join("assignment.csv");
    write_assignment(&result.assignment, &assignment_path)?;
    manifest.output(&assignment_path);
    manifest.output(&assignment_path.with_extension("meta.json"));
    if let Some(tree) = &result.tree {
        let edges = out.join("condensed_tree_edges.csv");
        let clusters = out.join("condensed_tree_clusters.csv");
        write_condensed_tree(tree, &edges, &clusters)?;
        manifest.output(&edges);
        manifest.output(&clusters);
    }
    manifest.write(out)?;
    println!(
        "method {}  tracks {}  clusters {}  noise {}",
        params.method(),
        result.assignment.len(),
        result.assignment.n_clusters(),
        result.assignment.n_noise()
    );
    Ok(())
}

fn subset(a: &ClusterAssignment, idx: &[usize]) -> ClusterAssignment {
    ClusterAssignment {
        track_ids: idx.iter().map(|&i| a.track_ids[i]).collect(),
        clusters: idx.iter().map(|&i| a.clusters[i]).collect(),
        outlier_scores: idx.iter().map(|&i| a.outlier_scores[i]).collect(),
        method: a.method,
        params: a.params.clone(),
    }
}

#[derive(Serialize)]
struct EvalReport {
    normalizer: String,
    known_categories: usize,
    tracks_assigned: usize,
    tracks_excluded_tracking_error: usize,
    tracks_all: usize,
    tracks_non_known: usize,
    ami_all: Option<f64>,
    ami_non_known: Option<f64>,
    sweep_all: SweepCurve,
    sweep_non_known: SweepCurve,
}

/// Sweep over the fractions that leave at least one point, or an empty
/// curve when there are no points.
fn sweep(a: &ClusterAssignment, gt: &[GtLabel], fractions: &[f64], norm: AmiNormalizer, name: &str) -> CliResult<SweepCurve> {
    if a.is_empty() {
        warn!("{name}: no tracks to evaluate");
        return Ok(SweepCurve::default());
    }
    let usable: Vec<f64> = fractions.iter().copied().filter(|&f| dropped_count(f, a.len()) < a.len()).collect();
    if usable.len() < fractions.len() {
        warn!("{name}: skipping {} fractions that would drop all {} tracks", fractions.len() - usable.len(), a.len());
    }
    Ok(ami_outlier_sweep(a, gt, &usable, norm)?)
}

pub fn eval(cfg: &mut Config, a: EvalArgs, seed: u64, out: &Path) -> CliResult<()> {
    cfg.set("assignment", a.assignment.map(|p| p.display().to_string()));
    cfg.set("annotations", a.annotations.map(|p| p.display().to_string()));
    cfg.set("eval.known_categories", a.known_categories);
    cfg.set("eval.fractions", a.fractions);
    cfg.set("eval.normalizer", a.normalizer);

    let normalizer = match cfg.raw("eval.normalizer").unwrap_or("mean") {
        "mean" => AmiNormalizer::Mean,
        "max" => AmiNormalizer::Max,
        other => return Err(usage(format!("invalid value '{other}' for eval.normalizer (expected mean or max)"))),
    };
    let fractions = cfg.list::<f64>("eval.fractions")?.unwrap_or_else(default_fractions);
    if fractions.is_empty() || fractions.windows(2).any(|w| w[1] <= w[0]) || fractions.iter().any(|f| !(0.0..1.0).contains(f)) {
        return Err(usage("eval.fractions must be strictly increasing values in [0, 1)"));
    }
    let known: BTreeSet<String> = match cfg.list::<String>("eval.known_categories")? {
        Some(v) => v.into_iter().collect(),
        None => COCO_CATEGORIES.iter().map(|s| s.to_string()).collect(),
    };
    let annotations_path = cfg.require_path("annotations", "--annotations")?;
    let assignment_path = input_or_default(cfg, "assignment", out, "assignment.csv");
    let mut manifest = Manifest::new("eval", seed, cfg.snapshot());

    manifest.input("assignment", &assignment_path).with_context(|| format!("assignment {}", assignment_path.display())).map_err(data)?;
    manifest.input("annotations", &annotations_path).with_context(|| format!("--annotations {}", annotations_path.display())).map_err(data)?;
    let assignment = read_assignment(&assignment_path).with_context(|| format!("reading {}", assignment_path.display())).map_err(data)?;
    let annotations = read_annotations(&annotations_path, None).with_context(|| format!("reading {}", annotations_path.display())).map_err(data)?;
    let by_track: HashMap<u64, &GtLabel> = annotations.iter().map(|r| (r.track_id, &r.gt_label)).collect();
    let gt: Vec<GtLabel> = assignment
        .track_ids
        .iter()
        .map(|id| by_track.get(id).map(|l| (*l).clone()).ok_or_else(|| anyhow!("track {id} is in the assignment but has no annotation")))
        .collect::<Result<_, _>>()
        .map_err(data)?;

    let valid = restrict_valid(&gt);
    let all = subset(&assignment, &valid);
    let gt_all: Vec<GtLabel> = valid.iter().map(|&i| gt[i].clone()).collect();
    let non_known_idx = restrict_non_known(&gt, &known);
    let non_known = subset(&assignment, &non_known_idx);
    let gt_non_known: Vec<GtLabel> = non_known_idx.iter().map(|&i| gt[i].clone()).collect();

    let sweep_all = sweep(&all, &gt_all, &fractions, normalizer, "all categories")?;
    let sweep_non_known = sweep(&non_known, &gt_non_known, &fractions, normalizer, "non-known categories")?;
    let at_zero = |c: &SweepCurve| c.points.iter().find(|p| p.fraction == 0.0).map(|p| p.ami);
    let report = EvalReport {
        normalizer: cfg.raw("eval.normalizer").unwrap_or("mean").to_owned(),
        known_categories: known.len(),
        tracks_assigned: assignment.len(),
        tracks_excluded_tracking_error: assignment.len() - valid.len(),
        tracks_all: all.len(),
        tracks_non_known: non_known.len(),
        ami_all: at_zero(&sweep_all),
        ami_non_known: at_zero(&sweep_non_known),
        sweep_all,
        sweep_non_known,
    };

    for (name, curve) in [("sweep_all.csv", &report.sweep_all), ("sweep_non_known.csv", &report.sweep_non_known)] {
        let p = out.join(name);
        write_sweep(curve, &p)?;
        manifest.output(&p);
    }
    let report_path = out.join("eval.json");
    write_json(&report, &report_path)?;
    manifest.output(&report_path);
    manifest.write(out)?;

    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_owned(), |x| format!("{x:.4}"));
    println!("tracks evaluated    {} ({} tracking errors excluded)", report.tracks_all, report.tracks_excluded_tracking_error);
    println!("AMI all             {}", fmt(report.ami_all));
    println!("AMI non-known       {} over {} tracks", fmt(report.ami_non_known), report.tracks_non_known);
    if let Some(p) = report.sweep_all.automatic {
        println!("automatic point     noise {:.3}  AMI {:.4}", p.fraction, p.ami);
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct Calibration {
    intrinsics: CameraIntrinsics,
    ground_plane: GroundPlane,
}

fn trainset_params(cfg: &Config) -> CliResult<TrainsetParams> {
    let d = TrainsetParams::default();
    let max_negatives = match cfg.get::<usize>("trainset.max_negatives")? {
        None => d.max_negatives_per_frame,
        Some(0) => None,
        Some(n) => Some(n),
    };
    let mut free_space = d.free_space.clone();
    free_space.ground_eps = cfg.get_or("trainset.ground_eps", free_space.ground_eps)?;
    free_space.max_height = cfg.get_or("trainset.max_height", free_space.max_height)?;
    let p = TrainsetParams {
        stride: cfg.get_or("trainset.stride", d.stride)?,
        scales: cfg.list("trainset.scales")?.unwrap_or(d.scales),
        ratios: cfg.list("trainset.ratios")?.unwrap_or(d.ratios),
        iou_min: cfg.get_or("trainset.iou_min", d.iou_min)?,
        iou_max: cfg.get_or("trainset.iou_max", d.iou_max)?,
        free_fraction_min: cfg.get_or("trainset.free_fraction_min", d.free_fraction_min)?,
        max_negatives_per_frame: max_negatives,
        free_space,
    };
    p.validate().map_err(|e| usage(e.to_string()))?;
    if p.stride == 0 || p.scales.is_empty() || p.ratios.is_empty() {
        return Err(usage("trainset.stride must be positive and scales/ratios non-empty"));
    }
    Ok(p)
}

pub fn trainset(cfg: &mut Config, a: TrainsetArgs, seed: u64, out: &Path) -> CliResult<()> {
    cfg.set("tracks", a.tracks.map(|p| p.display().to_string()));
    cfg.set("assignment", a.assignment.map(|p| p.display().to_string()));
    cfg.set("calibration", a.calibration.map(|p| p.display().to_string()));
    cfg.set("trainset.mode", a.mode);
    cfg.set_flag("trainset.merge_riders", a.merge_riders);
    cfg.set("trainset.max_distance", a.max_distance);
    cfg.set("trainset.stride", a.stride);
    cfg.set("trainset.iou_min", a.iou_min);
    cfg.set("trainset.iou_max", a.iou_max);
    cfg.set("trainset.free_fraction_min", a.free_fraction_min);
    cfg.set("trainset.max_negatives", a.max_negatives);
    cfg.set_flag("trainset.dump_mask", a.dump_mask);

    let mode: Mode = cfg.get_or("trainset.mode", Mode::Finetune)?;
    let params = trainset_params(cfg)?;
    let merge_riders = cfg.bool("trainset.merge_riders")?;
    let max_distance: f64 = cfg.get_or("trainset.max_distance", 1.0)?;
    if max_distance.is_nan() || max_distance < 0.0 {
        return Err(usage("trainset.max_distance must be non-negative"));
    }
    let dump_mask = cfg.bool("trainset.dump_mask")?;
    let calibration_path = cfg.require_path("calibration", "--calibration")?;
    let tracks_path = input_or_default(cfg, "tracks", out, "tracks.ndjson");
    let assignment_path = match mode {
        Mode::Discover => {
            let p = input_or_default(cfg, "assignment", out, "assignment.csv");
            if !p.exists() {
                return Err(usage(format!("discover mode needs a cluster assignment: pass --assignment ({} not found)", p.display())));
            }
            Some(p)
        }
        Mode::Finetune => None,
    };
    let mut manifest = Manifest::new("trainset", seed, cfg.snapshot());

    manifest.input("calibration", &calibration_path).with_context(|| format!("--calibration {}", calibration_path.display())).map_err(data)?;
    let calibration: Calibration = serde_json::from_reader(File::open(&calibration_path)?)
        .with_context(|| format!("parsing {}", calibration_path.display()))
        .map_err(data)?;
    manifest.input("tracks", &tracks_path).with_context(|| format!("tracks file {}", tracks_path.display())).map_err(data)?;
    let mut tracks = read_tracks(&tracks_path).with_context(|| format!("reading {}", tracks_path.display())).map_err(data)?;

    let labels: HashMap<u64, PositiveLabel> = match &assignment_path {
        Some(p) => {
            manifest.input("assignment", p)?;
            let assignment = read_assignment(p).with_context(|| format!("reading {}", p.display())).map_err(data)?;
            let ids: HashSet<u64> = tracks.tracks.iter().map(|t| t.track_id).collect();
            if let Some(id) = assignment.track_ids.iter().find(|id| !ids.contains(id)) {
                return Err(data(anyhow!("assignment references track {id}, which is not in {}", tracks_path.display())));
            }
            assignment
                .track_ids
                .iter()
                .zip(&assignment.clusters)
                .filter_map(|(&id, c)| c.map(|c| (id, PositiveLabel::ClusterId(c))))
                .collect()
        }
        None => HashMap::new(),
    };
    if merge_riders {
        let (merged, report) = merge_rider_tracks(&tracks, max_distance);
        info!("merged {} rider pairs", report.merged);
        if report.skipped_missing_centroids > 0 {
            warn!("{} person/bicycle pairs skipped for missing 3D centroids", report.skipped_missing_centroids);
        }
        tracks = merged;
    }
    let labels = match mode {
        Mode::Discover => labels,
        Mode::Finetune => tracks
            .tracks
            .iter()
            .filter_map(|t| match &t.label {
                TrackLabel::Known(c) => Some((t.track_id, PositiveLabel::Category(c.clone()))),
                TrackLabel::Unknown => None,
            })
            .collect(),
    };

    let set = build_training_set(
        &tracks,
        &labels,
        &calibration.intrinsics,
        &calibration.ground_plane,
        None,
        &params,
        sub_seed(seed, "trainset"),
    )?;
    let set_path = out.join("trainset.ndjson");
    let meta = export_training_set(&set, mode, &set_path)?;
    manifest.output(&set_path);
    if dump_mask {
        let mask = free_space_mask(&calibration.intrinsics, &calibration.ground_plane, None, &params.free_space)?;
        let mask_path = out.join("free_space.pgm");
        let mut w = BufWriter::new(File::create(&mask_path)?);
        mask.write_pgm(&mut w)?;
        w.flush()?;
        manifest.output(&mask_path);
    }
    manifest.write(out)?;

    println!("mode {mode}  positives {}  negatives {}", meta.positives, meta.negatives);
    let per_label: BTreeMap<_, _> = meta.per_label;
    for (label, n) in per_label {
        println!("  {label:<20} {n}");
    }
    Ok(())
}

pub fn stats(cfg: &mut Config, a: StatsArgs, seed: u64, out: &Path) -> CliResult<()> {
    cfg.set("counts", a.counts.map(|p| p.display().to_string()));
    let counts_path = cfg.require_path("counts", "--counts")?;
    let mut manifest = Manifest::new("stats", seed, cfg.snapshot());
    manifest.input("counts", &counts_path).with_context(|| format!("--counts {}", counts_path.display())).map_err(data)?;
    let counts: MiningCounts = serde_json::from_reader(File::open(&counts_path)?)
        .with_context(|| format!("parsing {}", counts_path.display()))
        .map_err(data)?;
    let stats = MiningStats::from_counts(&counts)?;
    let stats_path = out.join("stats.json");
    write_json(&stats, &stats_path)?;
    manifest.output(&stats_path);
    manifest.write(out)?;
    print!("{}", stats.report());
    Ok(())
}
