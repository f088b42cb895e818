//! Novel-category discovery: one representative embedding per track, then
//! k-means or HDBSCAN over the representatives.

mod hdbscan;
mod kmeans;
mod union_find;

pub use hdbscan::{
    core_distances, hdbscan, minimum_spanning_tree, mutual_reachability, ClusterNode, CondensedEdge,
    CondensedTree, HdbscanParams, HdbscanResult, MstEdge,
};
pub use kmeans::{kmeans, KMeansResult, KMEANS_MAX_ITER, KMEANS_TOL};
pub use union_find::UnionFind;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Embedding, GeomError};
use crate::io::EmbeddingMatrix;
use crate::tracker::Track;

#[derive(Debug, Error, PartialEq)]
pub enum DiscoveryError {
    #[error("k = {k} exceeds the number of points ({n})")]
    TooFewPoints { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("track {0} has no embedded elements")]
    NoEmbeddings(u64),
    #[error("track {track_id} references embedding {index}, matrix has {count} rows")]
    EmbeddingIndex { track_id: u64, index: u64, count: usize },
    #[error("points have inconsistent dimensions")]
    RaggedPoints,
    #[error("invalid clustering parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Kmeans,
    Hdbscan,
}

impl Method {
    /// Whether the method can leave points unassigned.
    pub fn is_density_based(self) -> bool {
        matches!(self, Method::Hdbscan)
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "kmeans" => Ok(Method::Kmeans),
            "hdbscan" => Ok(Method::Hdbscan),
            other => Err(format!("unknown method '{other}' (expected kmeans or hdbscan)")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Kmeans => "kmeans",
            Method::Hdbscan => "hdbscan",
        })
    }
}

/// Per-track clustering result. `clusters[i] == None` is NOISE.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub track_ids: Vec<u64>,
    pub clusters: Vec<Option<usize>>,
    pub outlier_scores: Vec<f64>,
    pub method: Method,
    pub params: BTreeMap<String, String>,
}

impl Default for ClusterAssignment {
    fn default() -> Self {
        Self {
            track_ids: Vec::new(),
            clusters: Vec::new(),
            outlier_scores: Vec::new(),
            method: Method::Hdbscan,
            params: BTreeMap::new(),
        }
    }
}

impl ClusterAssignment {
    pub fn len(&self) -> usize {
        self.track_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.track_ids.is_empty()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.iter().flatten().max().map_or(0, |m| m + 1)
    }

    pub fn n_noise(&self) -> usize {
        self.clusters.iter().filter(|c| c.is_none()).count()
    }

    pub fn cluster_of(&self, track_id: u64) -> Option<Option<usize>> {
        self.track_ids.iter().position(|&t| t == track_id).map(|i| self.clusters[i])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackEmbedding {
    pub track_id: u64,
    pub vector: Embedding,
    pub source_frame: u64,
    pub source_proposal: u64,
}

/// Index of the vector closest (euclidean) to the arithmetic mean of all
/// vectors; the earliest one wins ties.
pub fn closest_to_mean<V: AsRef<[f64]>>(vectors: &[V]) -> Option<usize> {
    let first = vectors.first()?.as_ref();
    let mut mean = vec![0.0; first.len()];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v.as_ref()) {
            *m += x;
        }
    }
    let n = vectors.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);

    let mut best = (0, f64::INFINITY);
    for (i, v) in vectors.iter().enumerate() {
        let d = geom::squared_euclidean(v.as_ref(), &mean);
        if d < best.1 {
            best = (i, d);
        }
    }
    Some(best.0)
}

/// Picks the crop whose embedding is nearest the track's mean embedding.
pub fn representative_embedding(track: &Track, embeddings: &EmbeddingMatrix) -> Result<TrackEmbedding, DiscoveryError> {
    let mut vectors = Vec::with_capacity(track.len());
    for e in &track.elements {
        let row = embeddings.get(e.embedding_index as usize).ok_or(DiscoveryError::EmbeddingIndex {
            track_id: track.track_id,
            index: e.embedding_index,
            count: embeddings.count(),
        })?;
        vectors.push(row.iter().map(|&v| f64::from(v)).collect::<Vec<f64>>());
    }
    let best = closest_to_mean(&vectors).ok_or(DiscoveryError::NoEmbeddings(track.track_id))?;
    let element = &track.elements[best];
    Ok(TrackEmbedding {
        track_id: track.track_id,
        vector: Embedding::new(vectors.swap_remove(best))?,
        source_frame: element.frame,
        source_proposal: element.proposal,
    })
}

/// Euclidean distance of each point to the centroid of its cluster; NOISE
/// points score `+inf` so they always rank as most outlying.
pub fn distance_to_center_outlier_scores(points: &[Vec<f64>], labels: &[Option<usize>]) -> Vec<f64> {
    assert_eq!(points.len(), labels.len(), "one label per point");
    let n_clusters = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; n_clusters];
    let mut counts = vec![0usize; n_clusters];
    for (p, l) in points.iter().zip(labels) {
        if let Some(c) = *l {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    points
        .iter()
        .zip(labels)
        .map(|(p, l)| match l {
            Some(c) => geom::squared_euclidean(p, &sums[*c]).sqrt(),
            None => f64::INFINITY,
        })
        .collect()
}

/// Which clustering to run, with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum DiscoveryParams {
    Kmeans { k: usize },
    Hdbscan(HdbscanParams),
}

impl DiscoveryParams {
    pub fn method(&self) -> Method {
        match self {
            DiscoveryParams::Kmeans { .. } => Method::Kmeans,
            DiscoveryParams::Hdbscan(_) => Method::Hdbscan,
        }
    }

    fn snapshot(&self, seed: u64) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        match self {
            DiscoveryParams::Kmeans { k } => {
                m.insert("k".into(), k.to_string());
                m.insert("seed".into(), seed.to_string());
            }
            DiscoveryParams::Hdbscan(p) => {
                m.insert("min_cluster_size".into(), p.min_cluster_size.to_string());
                m.insert("min_samples".into(), p.k().to_string());
                m.insert("metric".into(), p.metric.to_string());
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub assignment: ClusterAssignment,
    /// Condensed tree, for HDBSCAN runs.
    pub tree: Option<CondensedTree>,
    pub warning: Option<String>,
}

/// Clusters `points` (one per entry of `track_ids`) and scores every point
/// by its distance to its cluster center.
pub fn cluster_points(
    track_ids: Vec<u64>,
    points: &[Vec<f64>],
    params: &DiscoveryParams,
    seed: u64,
) -> Result<Discovery, DiscoveryError> {
    assert_eq!(track_ids.len(), points.len(), "one track id per point");
    let (clusters, tree, warning) = match params {
        DiscoveryParams::Kmeans { k } => {
            let r = kmeans(points, *k, seed)?;
            (r.labels.into_iter().map(Some).collect(), None, None)
        }
        DiscoveryParams::Hdbscan(p) => {
            let r = hdbscan(points, p)?;
            (r.labels, Some(r.tree), r.warning)
        }
    };
    let outlier_scores = distance_to_center_outlier_scores(points, &clusters);
    let assignment =
        ClusterAssignment { track_ids, clusters, outlier_scores, method: params.method(), params: params.snapshot(seed) };
    Ok(Discovery { assignment, tree, warning })
}

/// Representative embedding per track, then clustering.
pub fn discover_tracks(
    tracks: &[&Track],
    embeddings: &EmbeddingMatrix,
    params: &DiscoveryParams,
    seed: u64,
) -> Result<Discovery, DiscoveryError> {
    let reps: Vec<TrackEmbedding> =
        tracks.par_iter().map(|t| representative_embedding(t, embeddings)).collect::<Result<_, _>>()?;
    let ids = reps.iter().map(|r| r.track_id).collect();
    let points: Vec<Vec<f64>> = reps.into_iter().map(|r| r.vector.into_inner()).collect();
    cluster_points(ids, &points, params, seed)
}

pub(crate) fn check_points(points: &[Vec<f64>]) -> Result<usize, DiscoveryError> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(DiscoveryError::RaggedPoints);
    }
    for p in points {
        if let Some(i) = p.iter().position(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite(i).into());
        }
    }
    Ok(dim)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BBox;
    use crate::tracker::{TrackElement, TrackLabel};
    use proptest::prelude::*;

    fn track_with(n: usize) -> Track {
        Track {
            track_id: 42,
            sequence_id: "s".into(),
            label: TrackLabel::Unknown,
            source: "test".into(),
            elements: (0..n as u64)
                .map(|i| TrackElement {
                    frame: 10 + i,
                    proposal: 100 + i,
                    bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                    embedding_index: i,
                    centroid_3d: None,
                })
                .collect(),
        }
    }

    #[test]
    fn single_element_track() {
        let m = EmbeddingMatrix::new(1, 2, vec![3.0, 4.0]).unwrap();
        let r = representative_embedding(&track_with(1), &m).unwrap();
        assert_eq!(r.vector.as_slice(), &[3.0, 4.0]);
        assert_eq!((r.source_frame, r.source_proposal), (10, 100));
    }

    #[test]
    fn picks_crop_nearest_mean() {
        // mean (5/3, 1/3): distances ~ 1.700, 2.357, 0.943
        let m = EmbeddingMatrix::new(3, 2, vec![0.0, 0.0, 4.0, 0.0, 1.0, 1.0]).unwrap();
        let r = representative_embedding(&track_with(3), &m).unwrap();
        assert_eq!(r.vector.as_slice(), &[1.0, 1.0]);
        assert_eq!(r.source_frame, 12);
    }

    #[test]
    fn identical_crops_pick_earliest() {
        let m = EmbeddingMatrix::new(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(representative_embedding(&track_with(3), &m).unwrap().source_frame, 10);
    }

    #[test]
    fn empty_track_and_bad_index() {
        let m = EmbeddingMatrix::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(representative_embedding(&track_with(0), &m), Err(DiscoveryError::NoEmbeddings(42)));
        assert!(matches!(representative_embedding(&track_with(2), &m), Err(DiscoveryError::EmbeddingIndex { index: 1, .. })));
    }

    #[test]
    fn outlier_score_examples() {
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![5.0, 5.0], vec![9.0, 9.0]];
        let s = distance_to_center_outlier_scores(&pts, &[Some(0), Some(0), Some(1), None]);
        assert_eq!(s, vec![1.0, 1.0, 0.0, f64::INFINITY]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn representative_minimizes_distance_to_mean(
            rows in prop::collection::vec(prop::collection::vec(-5i32..5, 3), 1..12)
        ) {
            // integer-valued crops create many exact ties
            let vectors: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
            let best = closest_to_mean(&vectors).unwrap();
            let n = vectors.len() as f64;
            let mean: Vec<f64> = (0..3).map(|d| vectors.iter().map(|v| v[d]).sum::<f64>() / n).collect();
            let dist = |v: &Vec<f64>| v.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            for (i, v) in vectors.iter().enumerate() {
                prop_assert!(dist(&vectors[best]) <= dist(v) + 1e-12);
                if i < best {
                    prop_assert!(dist(v) > dist(&vectors[best]) - 1e-12);
                }
            }
        }
    }
}
