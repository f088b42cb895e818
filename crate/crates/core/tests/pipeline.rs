use std::collections::{BTreeSet, HashMap};

use trackmine::discovery::{discover_tracks, DiscoveryParams, HdbscanParams};
use trackmine::eval::{ami, ami_outlier_sweep, mining_stats, restrict_valid, AmiNormalizer};
use trackmine::geom::GroundPlane;
use trackmine::io::GtLabel;
use trackmine::synth::{scene, SceneConfig, KNOWN_CATEGORIES};
use trackmine::tracker::{build_tracks, merge_rider_tracks, TrackerParams};
use trackmine::trainset::{build_training_set, ExampleLabel, PositiveLabel, TrainsetParams};

#[test]
fn synthetic_scene_end_to_end() {
    let cfg = SceneConfig { sequences: 2, frames: 30, objects: 10, clutter: 90, ..Default::default() };
    let s = scene(&cfg, 7);
    // uniform clutter chains by chance under IoU alone; appearance breaks it
    let params = TrackerParams { embedding_gate: Some(0.5), ..Default::default() };
    let tracks = build_tracks(&s.proposals, Some(&s.embeddings), &params).unwrap();
    let annotations = s.annotate(&tracks);
    let stats = mining_stats(&tracks, &annotations, s.proposals.frame_count() as u64, 0.0, s.proposals.len() as u64).unwrap();
    assert_eq!(stats.proposals_per_frame, 100.0);
    assert!(stats.compression_per_frame > 5.0, "{}", stats.report());

    // every true object yields a track with its category
    let valid: Vec<&GtLabel> = annotations.iter().map(|a| &a.gt_label).filter(|l| **l != GtLabel::TrackingError).collect();
    assert!(valid.len() >= 2 * 10, "{} valid tracks", valid.len());

    let unknown: Vec<_> = tracks.tracks.iter().filter(|t| t.label.is_unknown()).collect();
    let p = DiscoveryParams::Hdbscan(HdbscanParams { min_cluster_size: 2, ..Default::default() });
    let d = discover_tracks(&unknown, &s.embeddings, &p, 1).unwrap();
    let gt: Vec<GtLabel> = unknown
        .iter()
        .map(|t| annotations.iter().find(|a| a.track_id == t.track_id).unwrap().gt_label.clone())
        .collect();
    let keep = restrict_valid(&gt);
    let pred: Vec<_> = keep.iter().map(|&i| d.assignment.clusters[i]).collect();
    let truth: Vec<_> = keep.iter().map(|&i| &gt[i]).collect();
    assert!(ami(&pred, &truth).unwrap() > 0.5);
    let curve = ami_outlier_sweep(&d.assignment, &gt, &[0.0, 0.1], AmiNormalizer::Mean).unwrap();
    assert_eq!(curve.points.len(), 2);
    assert!(curve.automatic.is_some());

    let labels: HashMap<u64, PositiveLabel> = tracks
        .tracks
        .iter()
        .filter_map(|t| t.label.category().map(|c| (t.track_id, PositiveLabel::Category(c.to_string()))))
        .collect();
    let set = build_training_set(&tracks, &labels, &cfg.intrinsics, &GroundPlane::level(1.7), None, &TrainsetParams::default(), 3).unwrap();
    assert!(!set.positives.is_empty() && !set.negatives.is_empty());
    let known: BTreeSet<&str> = KNOWN_CATEGORIES.into_iter().collect();
    for e in &set.positives {
        let ExampleLabel::Positive(PositiveLabel::Category(c)) = &e.label else { panic!("finetune positives carry categories") };
        assert!(known.contains(c.as_str()));
    }
    for n in &set.negatives {
        assert!(!set.positives.iter().any(|p| (p.sequence_id.as_str(), p.frame, p.anchor) == (n.sequence_id.as_str(), n.frame, n.anchor)));
    }
}

#[test]
fn riders_become_cyclists() {
    let cfg = SceneConfig { sequences: 1, frames: 20, objects: 2, clutter: 20, riders: 2, ..Default::default() };
    let s = scene(&cfg, 4);
    let tracks = build_tracks(&s.proposals, None, &TrackerParams::default()).unwrap();
    let (merged, report) = merge_rider_tracks(&tracks, 1.0);
    assert_eq!(report.merged, 2);
    assert_eq!(merged.tracks.iter().filter(|t| t.label.category() == Some("cyclist")).count(), 2);
    assert_eq!(merged.len(), tracks.len() - 2);
}
