//! Track formation from per-frame proposals.
//!
//! Association is greedy and IoU-based: in every frame the active tracks'
//! last boxes are matched against the frame's proposals in descending IoU
//! order. Tracks are then labeled known or unknown from the class scores of
//! their proposals.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, iou, BBox, Point3};
use crate::io::{EmbeddingMatrix, FrameGroup, ProposalRecord, ProposalSet};

/// Provenance tag of tracks produced by [`build_tracks`].
pub const GREEDY_SOURCE: &str = "greedy-iou";
/// Provenance tag of tracks produced by [`merge_rider_tracks`].
pub const MERGE_SOURCE: &str = "merge-riders";

#[derive(Debug, Error, PartialEq)]
pub enum TrackerError {
    #[error("embedding gate enabled but no embeddings were supplied (set --embeddings or disable tracker.embedding_gate)")]
    MissingEmbeddings,
    #[error("proposal {proposal} references embedding {index}, matrix has {count} rows")]
    EmbeddingIndex { proposal: usize, index: u64, count: usize },
    #[error("invalid tracker parameter: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackLabel {
    Known(String),
    Unknown,
}

impl TrackLabel {
    pub fn category(&self) -> Option<&str> {
        match self {
            TrackLabel::Known(c) => Some(c),
            TrackLabel::Unknown => None,
        }
    }

    pub fn is_unknown(&self) -> bool {
        matches!(self, TrackLabel::Unknown)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackElement {
    pub frame: u64,
    /// Position of the proposal in its [`ProposalSet`].
    pub proposal: u64,
    pub bbox: BBox,
    pub embedding_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid_3d: Option<Point3>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u64,
    pub sequence_id: String,
    pub label: TrackLabel,
    pub source: String,
    pub elements: Vec<TrackElement>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn element_at(&self, frame: u64) -> Option<&TrackElement> {
        self.elements.binary_search_by_key(&frame, |e| e.frame).ok().map(|i| &self.elements[i])
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackCollection {
    pub tracks: Vec<Track>,
}

impl TrackCollection {
    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn get(&self, track_id: u64) -> Option<&Track> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    /// Total number of (track, frame) elements.
    pub fn element_count(&self) -> usize {
        self.tracks.iter().map(Track::len).sum()
    }

    pub fn unknown_count(&self) -> usize {
        self.tracks.iter().filter(|t| t.label.is_unknown()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerParams {
    pub iou_gate: f64,
    /// Minimum cosine similarity between consecutive crops; `None` disables.
    pub embedding_gate: Option<f64>,
    /// Maximum number of skipped frames between consecutive elements.
    pub max_gap: u64,
    pub min_length: usize,
    pub confidence_threshold: f64,
}

impl Default for TrackerParams {
    fn default() -> Self {
        Self { iou_gate: 0.3, embedding_gate: None, max_gap: 2, min_length: 5, confidence_threshold: 0.3 }
    }
}

impl TrackerParams {
    pub fn validate(&self) -> Result<(), TrackerError> {
        let bad = |m: String| Err(TrackerError::InvalidParams(m));
        if !(0.0..=1.0).contains(&self.iou_gate) {
            return bad(format!("iou_gate {} outside [0, 1]", self.iou_gate));
        }
        if let Some(g) = self.embedding_gate {
            if !(-1.0..=1.0).contains(&g) {
                return bad(format!("embedding_gate {g} outside [-1, 1]"));
            }
        }
        if self.min_length == 0 {
            return bad("min_length must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return bad(format!("confidence_threshold {} outside [0, 1]", self.confidence_threshold));
        }
        Ok(())
    }
}

struct Building {
    last_frame: u64,
    last_box: BBox,
    last_embedding: u64,
    elements: Vec<TrackElement>,
}

fn element(rec: &ProposalRecord, proposal: usize) -> TrackElement {
    TrackElement {
        frame: rec.frame,
        proposal: proposal as u64,
        bbox: rec.bbox,
        embedding_index: rec.embedding_index,
        centroid_3d: rec.centroid_3d,
    }
}

fn cosine_similarity(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return f64::NEG_INFINITY;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Associates one sequence. Returns element chains in creation order.
fn track_sequence(
    records: &[ProposalRecord],
    groups: &[FrameGroup],
    embeddings: Option<&EmbeddingMatrix>,
    params: &TrackerParams,
) -> Vec<Vec<TrackElement>> {
    let mut built: Vec<Building> = Vec::new();
    let mut active: Vec<usize> = Vec::new();
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();

    for group in groups {
        let frame = group.frame;
        active.retain(|&t| frame - built[t].last_frame - 1 <= params.max_gap);

        candidates.clear();
        for &t in &active {
            let track = &built[t];
            for p in group.range.clone() {
                let rec = &records[p];
                let overlap = iou(&track.last_box, &rec.bbox);
                if overlap < params.iou_gate {
                    continue;
                }
                if let (Some(min_sim), Some(m)) = (params.embedding_gate, embeddings) {
                    let sim = cosine_similarity(m.row(track.last_embedding as usize), m.row(rec.embedding_index as usize));
                    if sim < min_sim {
                        continue;
                    }
                }
                candidates.push((overlap, t, p));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut track_taken = vec![false; built.len()];
        let mut proposal_taken = vec![false; group.range.len()];
        for &(_, t, p) in &candidates {
            let local = p - group.range.start;
            if track_taken[t] || proposal_taken[local] {
                continue;
            }
            track_taken[t] = true;
            proposal_taken[local] = true;
            let rec = &records[p];
            let track = &mut built[t];
            track.last_frame = frame;
            track.last_box = rec.bbox;
            track.last_embedding = rec.embedding_index;
            track.elements.push(element(rec, p));
        }
        for p in group.range.clone() {
            if proposal_taken[p - group.range.start] {
                continue;
            }
            let rec = &records[p];
            active.push(built.len());
            built.push(Building {
                last_frame: frame,
                last_box: rec.bbox,
                last_embedding: rec.embedding_index,
                elements: vec![element(rec, p)],
            });
        }
    }
    built.into_iter().map(|b| b.elements).filter(|e| e.len() >= params.min_length).collect()
}

/// Builds and labels tracks for every sequence. Track ids are assigned
/// contiguously in (sequence, creation) order after length filtering.
pub fn build_tracks(
    proposals: &ProposalSet,
    embeddings: Option<&EmbeddingMatrix>,
    params: &TrackerParams,
) -> Result<TrackCollection, TrackerError> {
    params.validate()?;
    if params.embedding_gate.is_some() {
        let m = embeddings.ok_or(TrackerError::MissingEmbeddings)?;
        if let Some((i, rec)) = proposals.records.iter().enumerate().find(|(_, r)| r.embedding_index >= m.count() as u64) {
            return Err(TrackerError::EmbeddingIndex { proposal: i, index: rec.embedding_index, count: m.count() });
        }
    }
    let embeddings = params.embedding_gate.and(embeddings);

    let per_sequence: Vec<(&str, Vec<Vec<TrackElement>>)> = proposals
        .sequences()
        .into_par_iter()
        .map(|(seq, groups)| (seq, track_sequence(&proposals.records, groups, embeddings, params)))
        .collect();

    let mut tracks = Vec::new();
    for (seq, chains) in per_sequence {
        for elements in chains {
            let scores: Vec<&BTreeMap<String, f64>> =
                elements.iter().map(|e| &proposals.records[e.proposal as usize].class_scores).collect();
            tracks.push(Track {
                track_id: tracks.len() as u64,
                sequence_id: seq.to_owned(),
                label: label_track(&scores, params.confidence_threshold),
                source: GREEDY_SOURCE.to_owned(),
                elements,
            });
        }
    }
    Ok(TrackCollection { tracks })
}

/// Highest-scoring category; ties go to the lexicographically smallest name.
fn top_category(scores: &BTreeMap<String, f64>) -> Option<(&str, f64)> {
    let mut best: Option<(&str, f64)> = None;
    for (name, &s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((name, s));
        }
    }
    best
}

/// An element is confident when its top class score reaches `threshold`.
/// With at least half of the elements confident, the track is labeled with
/// the most frequent confident category (ties: lexicographically smallest).
pub fn label_track(scores: &[&BTreeMap<String, f64>], threshold: f64) -> TrackLabel {
    let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
    let mut confident = 0;
    for s in scores {
        if let Some((cat, score)) = top_category(s) {
            if score >= threshold {
                confident += 1;
                *votes.entry(cat).or_default() += 1;
            }
        }
    }
    if confident == 0 || 2 * confident < scores.len() {
        return TrackLabel::Unknown;
    }
    let mut winner: Option<(&str, usize)> = None;
    for (cat, n) in votes {
        if winner.is_none_or(|(_, w)| n > w) {
            winner = Some((cat, n));
        }
    }
    TrackLabel::Known(winner.expect("confident > 0").0.to_owned())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MergeReport {
    pub merged: usize,
    /// Overlapping person/bicycle pairs skipped for missing centroids.
    pub skipped_missing_centroids: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median 3D distance over the frames both tracks cover. `Ok(None)` when
/// the tracks share no frame, `Err(())` when a shared frame lacks a centroid.
fn median_distance(a: &Track, b: &Track) -> Result<Option<f64>, ()> {
    let mut dists = Vec::new();
    let (mut i, mut j) = (0, 0);
    while i < a.elements.len() && j < b.elements.len() {
        let (ea, eb) = (&a.elements[i], &b.elements[j]);
        match ea.frame.cmp(&eb.frame) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let (Some(pa), Some(pb)) = (ea.centroid_3d, eb.centroid_3d) else {
                    return Err(());
                };
                dists.push(geom::squared_euclidean(&pa, &pb).sqrt());
                i += 1;
                j += 1;
            }
        }
    }
    Ok((!dists.is_empty()).then(|| median(&mut dists)))
}

fn merge_pair(person: &Track, bicycle: &Track) -> Track {
    let mut elements: Vec<TrackElement> = Vec::with_capacity(person.len() + bicycle.len());
    let (mut i, mut j) = (0, 0);
    while i < person.elements.len() || j < bicycle.elements.len() {
        let p = person.elements.get(i);
        let b = bicycle.elements.get(j);
        match (p, b) {
            (Some(p), Some(b)) if p.frame == b.frame => {
                elements.push(TrackElement { bbox: p.bbox.union_rect(&b.bbox), ..p.clone() });
                i += 1;
                j += 1;
            }
            (Some(p), Some(b)) if p.frame < b.frame => {
                elements.push(p.clone());
                i += 1;
            }
            (Some(p), None) => {
                elements.push(p.clone());
                i += 1;
            }
            (_, Some(b)) => {
                elements.push(b.clone());
                j += 1;
            }
            (None, None) => unreachable!(),
        }
    }
    Track {
        track_id: person.track_id.min(bicycle.track_id),
        sequence_id: person.sequence_id.clone(),
        label: TrackLabel::Known("cyclist".into()),
        source: MERGE_SOURCE.to_owned(),
        elements,
    }
}

/// Replaces co-located person/bicycle track pairs by a single cyclist track
/// whose boxes are the union rectangles. A track takes part in at most one
/// merge; closer pairs win.
pub fn merge_rider_tracks(collection: &TrackCollection, max_distance: f64) -> (TrackCollection, MergeReport) {
    let with_label = |cat: &str| -> Vec<usize> {
        (0..collection.tracks.len()).filter(|&i| collection.tracks[i].label.category() == Some(cat)).collect()
    };
    let persons = with_label("person");
    let bicycles = with_label("bicycle");

    let mut report = MergeReport::default();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for &p in &persons {
        for &b in &bicycles {
            let (tp, tb) = (&collection.tracks[p], &collection.tracks[b]);
            if tp.sequence_id != tb.sequence_id {
                continue;
            }
            match median_distance(tp, tb) {
                Ok(Some(d)) if d < max_distance => pairs.push((d, p, b)),
                Ok(_) => {}
                Err(()) => report.skipped_missing_centroids += 1,
            }
        }
    }
    if report.skipped_missing_centroids > 0 {
        log::warn!(
            "merge-riders: skipped {} person/bicycle pairs without centroids on shared frames",
            report.skipped_missing_centroids
        );
    }
    let id = |i: usize| collection.tracks[i].track_id;
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(id(x.1).cmp(&id(y.1))).then(id(x.2).cmp(&id(y.2))));

    let mut used = vec![false; collection.tracks.len()];
    let mut merged = Vec::new();
    for (_, p, b) in pairs {
        if used[p] || used[b] {
            continue;
        }
        used[p] = true;
        used[b] = true;
        merged.push(merge_pair(&collection.tracks[p], &collection.tracks[b]));
    }
    report.merged = merged.len();

    let mut tracks: Vec<Track> =
        collection.tracks.iter().zip(&used).filter(|(_, &u)| !u).map(|(t, _)| t.clone()).collect();
    tracks.extend(merged);
    tracks.sort_by_key(|t| t.track_id);
    (TrackCollection { tracks }, report)
}
