//! Clustering evaluation (adjusted mutual information, outlier-fraction
//! sweeps) and track mining statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discovery::ClusterAssignment;
use crate::io::{AnnotationRecord, GtLabel};
use crate::tracker::TrackCollection;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("labelings have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cannot evaluate an empty labeling")]
    Empty,
    #[error("invalid sweep fractions: {0}")]
    InvalidFractions(String),
    #[error("outlier fraction {fraction} removes all {n} points")]
    RemovesAll { fraction: f64, n: usize },
    #[error("mining statistics need at least one frame")]
    ZeroFrames,
    #[error("annotation references unknown track {0}")]
    UnknownTrack(u64),
}

/// Counts `n_ij` of points with label `i` in the first labeling and `j` in
/// the second. Labels are indexed in sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub rows: Vec<u64>,
    pub cols: Vec<u64>,
    pub total: u64,
}

fn dense_ids<T: Ord>(labels: &[T]) -> (Vec<usize>, usize) {
    let distinct: BTreeSet<&T> = labels.iter().collect();
    let index: BTreeMap<&T, usize> = distinct.into_iter().enumerate().map(|(i, l)| (l, i)).collect();
    (labels.iter().map(|l| index[l]).collect(), index.len())
}

impl ContingencyTable {
    pub fn new<A: Ord, B: Ord>(u: &[A], v: &[B]) -> Result<Self, EvalError> {
        if u.len() != v.len() {
            return Err(EvalError::LengthMismatch(u.len(), v.len()));
        }
        if u.is_empty() {
            return Err(EvalError::Empty);
        }
        let (ui, r) = dense_ids(u);
        let (vi, c) = dense_ids(v);
        let mut counts = vec![vec![0u64; c]; r];
        for (&i, &j) in ui.iter().zip(&vi) {
            counts[i][j] += 1;
        }
        Ok(Self::from_counts(counts))
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        let c = counts.first().map_or(0, Vec::len);
        let rows: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..c).map(|j| counts.iter().map(|r| r[j]).sum()).collect();
        let total = rows.iter().sum();
        Self { counts, rows, cols, total }
    }

    pub fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let mut mi = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &nij) in row.iter().enumerate() {
                if nij > 0 {
                    let nij = nij as f64;
                    mi += nij / n * (n * nij / (self.rows[i] as f64 * self.cols[j] as f64)).ln();
                }
            }
        }
        mi
    }

    /// Exact expectation of the mutual information over all labelings with
    /// these marginals (hypergeometric model).
    pub fn expected_mutual_information(&self) -> f64 {
        let n = self.total;
        let lf = log_factorials(n as usize);
        let nf = n as f64;
        let mut emi = 0.0;
        for &a in &self.rows {
            for &b in &self.cols {
                let lo = (a + b).saturating_sub(n).max(1);
                let hi = a.min(b);
                let fixed = lf[a as usize] + lf[b as usize] + lf[(n - a) as usize] + lf[(n - b) as usize] - lf[n as usize];
                for nij in lo..=hi {
                    let log_p = fixed
                        - lf[nij as usize]
                        - lf[(a - nij) as usize]
                        - lf[(b - nij) as usize]
                        - lf[(n + nij - a - b) as usize];
                    let x = nij as f64;
                    emi += x / nf * (nf * x / (a as f64 * b as f64)).ln() * log_p.exp();
                }
            }
        }
        emi
    }
}

fn log_factorials(n: usize) -> Vec<f64> {
    let mut lf = vec![0.0; n + 1];
    for i in 1..=n {
        lf[i] = lf[i - 1] + (i as f64).ln();
    }
    lf
}

/// Shannon entropy in nats of a labeling given its cluster sizes.
pub fn entropy(sizes: &[u64]) -> f64 {
    let n: u64 = sizes.iter().sum();
    let n = n as f64;
    sizes.iter().filter(|&&s| s > 0).map(|&s| s as f64 / n).map(|p| -p * p.ln()).sum()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AmiNormalizer {
    #[default]
    Mean,
    Max,
}

pub fn ami<A: Ord, B: Ord>(u: &[A], v: &[B]) -> Result<f64, EvalError> {
    ami_with(u, v, AmiNormalizer::Mean)
}

pub fn ami_with<A: Ord, B: Ord>(u: &[A], v: &[B], normalizer: AmiNormalizer) -> Result<f64, EvalError> {
    Ok(ami_from_table(&ContingencyTable::new(u, v)?, normalizer))
}

pub fn ami_from_table(table: &ContingencyTable, normalizer: AmiNormalizer) -> f64 {
    let (r, c) = (table.rows.len(), table.cols.len());
    let n = table.total as usize;
    // the same trivial partition on both sides
    if (r == 1 && c == 1) || (r == n && c == n) {
        return 1.0;
    }
    let mi = table.mutual_information();
    let emi = table.expected_mutual_information();
    let (hu, hv) = (entropy(&table.rows), entropy(&table.cols));
    let norm = match normalizer {
        AmiNormalizer::Mean => 0.5 * (hu + hv),
        AmiNormalizer::Max => hu.max(hv),
    };
    let denominator = norm - emi;
    if denominator.abs() < 1e-15 {
        return 0.0;
    }
    (mi - emi) / denominator
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub fraction: f64,
    pub ami: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    pub points: Vec<SweepPoint>,
    /// NOISE fraction and the AMI over non-NOISE points, for density-based
    /// assignments.
    pub automatic: Option<SweepPoint>,
}

pub fn default_fractions() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

/// Number of points dropped at fraction `f` of `n`.
pub fn dropped_count(fraction: f64, n: usize) -> usize {
    // tolerate representation error, e.g. 0.1 * 30
    (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize
}

/// AMI after globally dropping the most outlying points at each fraction.
/// `gt[i]` is the ground truth for `assignment` entry `i`. Ties in outlier
/// score drop the lower track id first. NOISE is one extra cluster.
pub fn ami_outlier_sweep<G: Ord>(
    assignment: &ClusterAssignment,
    gt: &[G],
    fractions: &[f64],
    normalizer: AmiNormalizer,
) -> Result<SweepCurve, EvalError> {
    let n = assignment.len();
    if gt.len() != n {
        return Err(EvalError::LengthMismatch(n, gt.len()));
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    for w in fractions.windows(2) {
        if w[1] <= w[0] {
            return Err(EvalError::InvalidFractions("fractions must be strictly increasing".into()));
        }
    }
    if let Some(f) = fractions.iter().find(|f| !(0.0..1.0).contains(*f)) {
        return Err(EvalError::InvalidFractions(format!("{f} is outside [0, 1)")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        assignment.outlier_scores[b]
            .total_cmp(&assignment.outlier_scores[a])
            .then(assignment.track_ids[a].cmp(&assignment.track_ids[b]))
    });
    let mut points = Vec::with_capacity(fractions.len());
    for &fraction in fractions {
        let drop = dropped_count(fraction, n);
        if drop >= n {
            return Err(EvalError::RemovesAll { fraction, n });
        }
        let mut kept: Vec<usize> = order[drop..].to_vec();
        kept.sort_unstable();
        let pred: Vec<Option<usize>> = kept.iter().map(|&i| assignment.clusters[i]).collect();
        let truth: Vec<&G> = kept.iter().map(|&i| &gt[i]).collect();
        points.push(SweepPoint { fraction, ami: ami_with(&pred, &truth, normalizer)? });
    }

    let automatic = if assignment.method.is_density_based() {
        let kept: Vec<usize> = (0..n).filter(|&i| assignment.clusters[i].is_some()).collect();
        if kept.is_empty() {
            None
        } else {
            let pred: Vec<Option<usize>> = kept.iter().map(|&i| assignment.clusters[i]).collect();
            let truth: Vec<&G> = kept.iter().map(|&i| &gt[i]).collect();
            Some(SweepPoint { fraction: assignment.n_noise() as f64 / n as f64, ami: ami_with(&pred, &truth, normalizer)? })
        }
    } else {
        None
    };
    Ok(SweepCurve { points, automatic })
}

/// Indices of labels that are neither a known category nor a tracking error.
pub fn restrict_non_known(gt: &[GtLabel], known: &BTreeSet<String>) -> Vec<usize> {
    gt.iter()
        .enumerate()
        .filter(|(_, l)| match l {
            GtLabel::Category(c) => !known.contains(c),
            GtLabel::UnknownValid => true,
            GtLabel::TrackingError => false,
        })
        .map(|(i, _)| i)
        .collect()
}

/// Indices of labels that are not tracking errors.
pub fn restrict_valid(gt: &[GtLabel]) -> Vec<usize> {
    gt.iter().enumerate().filter(|(_, l)| **l != GtLabel::TrackingError).map(|(i, _)| i).collect()
}

/// The 80 COCO detection categories; the default known set.
pub const COCO_CATEGORIES: [&str; 80] = [
    "person", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck", "boat",
    "traffic light", "fire hydrant", "stop sign", "parking meter", "bench", "bird", "cat", "dog",
    "horse", "sheep", "cow", "elephant", "bear", "zebra", "giraffe", "backpack", "umbrella",
    "handbag", "tie", "suitcase", "frisbee", "skis", "snowboard", "sports ball", "kite",
    "baseball bat", "baseball glove", "skateboard", "surfboard", "tennis racket", "bottle",
    "wine glass", "cup", "fork", "knife", "spoon", "bowl", "banana", "apple", "sandwich", "orange",
    "broccoli", "carrot", "hot dog", "pizza", "donut", "cake", "chair", "couch", "potted plant",
    "bed", "dining table", "toilet", "tv", "laptop", "mouse", "remote", "keyboard", "cell phone",
    "microwave", "oven", "toaster", "sink", "refrigerator", "book", "clock", "vase", "scissors",
    "teddy bear", "hair drier", "toothbrush",
];

/// Raw counts behind a mining report, as transcribed from a table or
/// tallied from a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningCounts {
    pub frames: u64,
    #[serde(default)]
    pub duration_hours: f64,
    pub proposals_total: u64,
    pub tracks_total: u64,
    pub tracks_labeled: u64,
    #[serde(default)]
    pub tracks_unknown: u64,
    pub tracking_errors: u64,
    /// Proposals kept inside tracks; defaults to `tracks_total` when absent.
    #[serde(default)]
    pub track_elements: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningStats {
    pub frames: u64,
    pub duration_hours: f64,
    pub proposals_total: u64,
    pub tracks_total: u64,
    pub tracks_labeled: u64,
    pub tracks_unknown: u64,
    pub tracking_errors: u64,
    pub proposals_per_frame: f64,
    /// Proposals per surviving track element, i.e. the mean per-frame
    /// reduction from proposals to active tracks.
    pub compression_per_frame: f64,
    /// Proposals per track.
    pub compression_per_sequence: f64,
    pub error_rate: f64,
    /// False when no track is labeled; `error_rate` is then reported as 0.
    pub error_rate_defined: bool,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MiningStats {
    /// Zero frames is an error unless everything else is zero too.
    pub fn from_counts(c: &MiningCounts) -> Result<Self, EvalError> {
        if c.frames == 0 && (c.proposals_total > 0 || c.tracks_total > 0) {
            return Err(EvalError::ZeroFrames);
        }
        Ok(Self {
            frames: c.frames,
            duration_hours: c.duration_hours,
            proposals_total: c.proposals_total,
            tracks_total: c.tracks_total,
            tracks_labeled: c.tracks_labeled,
            tracks_unknown: c.tracks_unknown,
            tracking_errors: c.tracking_errors,
            proposals_per_frame: ratio(c.proposals_total, c.frames),
            compression_per_frame: ratio(c.proposals_total, c.track_elements.unwrap_or(c.tracks_total)),
            compression_per_sequence: ratio(c.proposals_total, c.tracks_total),
            error_rate: ratio(c.tracking_errors, c.tracks_labeled),
            error_rate_defined: c.tracks_labeled > 0,
        })
    }

    /// Human-readable summary with rates rounded to one decimal percent.
    pub fn report(&self) -> String {
        let undefined = if self.error_rate_defined { "" } else { " (undefined: no labeled tracks)" };
        format!(
            "frames              {}\n\
             duration_hours      {:.2}\n\
             proposals_total     {}\n\
             tracks_total        {}\n\
             tracks_labeled      {}\n\
             tracks_unknown      {}\n\
             tracking_errors     {}\n\
             proposals_per_frame {:.1}\n\
             compression/frame   {:.1}x\n\
             compression/track   {:.1}x\n\
             error_rate          {}{undefined}\n",
            self.frames,
            self.duration_hours,
            self.proposals_total,
            self.tracks_total,
            self.tracks_labeled,
            self.tracks_unknown,
            self.tracking_errors,
            self.proposals_per_frame,
            self.compression_per_frame,
            self.compression_per_sequence,
            percent(self.error_rate),
        )
    }
}

pub fn percent(rate: f64) -> String {
    format!("{:.1}%", rate * 100.0)
}

/// Statistics for a mined collection. `tracks_unknown` counts tracks the
/// tracker labeled unknown; annotations supply the labeled and error counts.
pub fn mining_stats(
    tracks: &TrackCollection,
    annotations: &[AnnotationRecord],
    frames: u64,
    duration_hours: f64,
    proposals_total: u64,
) -> Result<MiningStats, EvalError> {
    let ids: HashMap<u64, ()> = tracks.tracks.iter().map(|t| (t.track_id, ())).collect();
    if let Some(a) = annotations.iter().find(|a| !ids.contains_key(&a.track_id)) {
        return Err(EvalError::UnknownTrack(a.track_id));
    }
    MiningStats::from_counts(&MiningCounts {
        frames,
        duration_hours,
        proposals_total,
        tracks_total: tracks.len() as u64,
        tracks_labeled: annotations.len() as u64,
        tracks_unknown: tracks.unknown_count() as u64,
        tracking_errors: annotations.iter().filter(|a| a.gt_label == GtLabel::TrackingError).count() as u64,
        track_elements: Some(tracks.element_count() as u64),
    })
}
