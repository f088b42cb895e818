//! Seeded synthetic fixtures: proposal streams with moving objects and
//! clutter, and labeled embedding blobs with scattered contaminants.

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geom::{BBox, CameraIntrinsics};
use crate::io::{AnnotationRecord, EmbeddingMatrix, GtLabel, ProposalRecord, ProposalSet};
use crate::tracker::TrackCollection;

fn normal<R: Rng>(rng: &mut R, mean: f64, std: f64) -> f64 {
    Normal::new(mean, std).expect("finite positive std").sample(rng)
}

pub const KNOWN_CATEGORIES: [&str; 4] = ["car", "person", "bicycle", "truck"];
pub const NOVEL_CATEGORIES: [&str; 3] = ["trash_bin", "traffic_cone", "stroller"];

#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub sequences: usize,
    pub frames: u64,
    /// True objects per sequence, visible in every frame.
    pub objects: usize,
    /// Random clutter proposals per frame.
    pub clutter: usize,
    /// Person/bicycle pairs riding together, per sequence.
    pub riders: usize,
    pub embedding_dim: usize,
    pub intrinsics: CameraIntrinsics,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            sequences: 2,
            frames: 40,
            objects: 10,
            clutter: 90,
            riders: 0,
            embedding_dim: 16,
            intrinsics: CameraIntrinsics { fx: 721.5, fy: 721.5, cx: 609.6, cy: 172.9, image_w: 1242, image_h: 375 },
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub proposals: ProposalSet,
    pub embeddings: EmbeddingMatrix,
    /// Per proposal (indexed like `proposals.records`): global object id.
    pub object_of: Vec<Option<usize>>,
    /// Per global object id: its category.
    pub object_category: Vec<String>,
}

struct Object {
    category: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
    vx: f64,
    depth: f64,
}

fn category_centers(dim: usize) -> HashMap<&'static str, Vec<f64>> {
    // fixed centers, independent of the scene seed
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    KNOWN_CATEGORIES
        .iter()
        .chain(NOVEL_CATEGORIES.iter())
        .map(|&c| (c, (0..dim).map(|_| normal(&mut rng, 0.0, 6.0)).collect()))
        .collect()
}

pub fn scene(cfg: &SceneConfig, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = category_centers(cfg.embedding_dim);
    let k = &cfg.intrinsics;
    let (img_w, img_h) = (k.image_w as f64, k.image_h as f64);

    let mut records = Vec::new();
    let mut object_of = Vec::new();
    let mut object_category = Vec::new();
    let mut rows: Vec<Vec<f32>> = Vec::new();

    for s in 0..cfg.sequences {
        let sequence_id = format!("{s:04}");
        let mut objects: Vec<(usize, Object)> = Vec::new();
        let mut spawn = |rng: &mut ChaCha8Rng, category: String, x: f64, depth: f64, objects: &mut Vec<(usize, Object)>| {
            let h = (1.6 * k.fy / depth).clamp(20.0, 200.0);
            let w = h * rng.random_range(0.5..1.5);
            let y = (k.cy + 1.0 * k.fy / depth - h).clamp(0.0, img_h - h);
            let obj = Object { category: category.clone(), x, y, w, h, vx: rng.random_range(-1.5..1.5), depth };
            objects.push((object_category.len(), obj));
            object_category.push(category);
        };
        for _ in 0..cfg.objects {
            let category = if rng.random_bool(0.5) {
                NOVEL_CATEGORIES.choose(&mut rng).unwrap()
            } else {
                KNOWN_CATEGORIES.choose(&mut rng).unwrap()
            };
            let x = rng.random_range(50.0..img_w - 250.0);
            let depth = rng.random_range(6.0..30.0);
            spawn(&mut rng, category.to_string(), x, depth, &mut objects);
        }
        for _ in 0..cfg.riders {
            let x = rng.random_range(50.0..img_w - 250.0);
            let depth = rng.random_range(6.0..20.0);
            spawn(&mut rng, "person".into(), x, depth, &mut objects);
            spawn(&mut rng, "bicycle".into(), x + 4.0, depth + 0.3, &mut objects);
            let vx = objects[objects.len() - 2].1.vx;
            objects.last_mut().unwrap().1.vx = vx;
        }

        for frame in 0..cfg.frames {
            for (id, obj) in &objects {
                let t = frame as f64;
                let jitter = |rng: &mut ChaCha8Rng| normal(rng, 0.0, 0.7);
                let x = (obj.x + obj.vx * t + jitter(&mut rng)).clamp(0.0, img_w - obj.w - 1.0);
                let y = (obj.y + jitter(&mut rng)).clamp(0.0, img_h - obj.h - 1.0);
                let bbox = BBox::new(x, y, obj.w, obj.h).unwrap();
                let (u, v) = bbox.center();
                let centroid = [(u - k.cx) * obj.depth / k.fx, (v - k.cy) * obj.depth / k.fy, obj.depth];
                let mut class_scores = BTreeMap::new();
                if KNOWN_CATEGORIES.contains(&obj.category.as_str()) {
                    class_scores.insert(obj.category.clone(), rng.random_range(0.55..0.95));
                } else {
                    class_scores.insert(KNOWN_CATEGORIES.choose(&mut rng).unwrap().to_string(), rng.random_range(0.0..0.2));
                }
                let center = &centers[obj.category.as_str()];
                rows.push(center.iter().map(|c| (c + normal(&mut rng, 0.0, 0.5)) as f32).collect());
                records.push(ProposalRecord {
                    sequence_id: sequence_id.clone(),
                    frame,
                    bbox,
                    objectness: rng.random_range(0.5..1.0),
                    class_scores,
                    embedding_index: (rows.len() - 1) as u64,
                    centroid_3d: Some(centroid),
                });
                object_of.push(Some(*id));
            }
            for _ in 0..cfg.clutter {
                let w = rng.random_range(10.0..120.0);
                let h = rng.random_range(10.0..120.0);
                let bbox = BBox::new(rng.random_range(0.0..img_w - w), rng.random_range(0.0..img_h - h), w, h).unwrap();
                let mut class_scores = BTreeMap::new();
                if rng.random_bool(0.3) {
                    class_scores.insert(KNOWN_CATEGORIES.choose(&mut rng).unwrap().to_string(), rng.random_range(0.0..0.5));
                }
                rows.push((0..cfg.embedding_dim).map(|_| normal(&mut rng, 0.0, 8.0) as f32).collect());
                records.push(ProposalRecord {
                    sequence_id: sequence_id.clone(),
                    frame,
                    bbox,
                    objectness: rng.random_range(0.0..0.6),
                    class_scores,
                    embedding_index: (rows.len() - 1) as u64,
                    centroid_3d: None,
                });
                object_of.push(None);
            }
        }
    }
    let proposals = ProposalSet::from_records(records).expect("generated frames are ordered");
    let embeddings = EmbeddingMatrix::from_rows(&rows).expect("generated rows share dim");
    Scene { proposals, embeddings, object_of, object_category }
}

impl Scene {
    /// Ground truth for mined tracks: a track whose elements mostly follow
    /// one object takes that object's category (`unknown_valid` is not
    /// produced); anything else is a tracking error.
    pub fn annotate(&self, tracks: &TrackCollection) -> Vec<AnnotationRecord> {
        tracks
            .tracks
            .iter()
            .map(|t| {
                let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
                for e in &t.elements {
                    if let Some(obj) = self.object_of[e.proposal as usize] {
                        *votes.entry(obj).or_default() += 1;
                    }
                }
                let best = votes.iter().max_by_key(|(obj, n)| (**n, std::cmp::Reverse(**obj)));
                let gt_label = match best {
                    Some((&obj, &n)) if 2 * n > t.len() => GtLabel::Category(self.object_category[obj].clone()),
                    _ => GtLabel::TrackingError,
                };
                AnnotationRecord { track_id: t.track_id, gt_label }
            })
            .collect()
    }
}

/// Gaussian blobs plus uniformly scattered contaminants.
#[derive(Debug, Clone)]
pub struct Blobs {
    pub points: Vec<Vec<f64>>,
    /// Blob index per point; `None` for contaminants.
    pub truth: Vec<Option<usize>>,
}

/// `blobs` clusters of `per_blob` points with standard deviation `sigma`
/// around centers spaced `separation` apart on distinct axes, plus
/// `contaminants` points drawn uniformly from a cube of half-width `spread`.
#[allow(clippy::too_many_arguments)]
pub fn blobs(
    blobs: usize,
    per_blob: usize,
    sigma: f64,
    separation: f64,
    contaminants: usize,
    spread: f64,
    dim: usize,
    seed: u64,
) -> Blobs {
    assert!(dim >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for b in 0..blobs {
        let mut center = vec![0.0; dim];
        // b-th center on axis (b mod dim), scaled so all pairwise distances >= separation
        center[b % dim] = separation * (1 + b / dim) as f64;
        for _ in 0..per_blob {
            points.push(center.iter().map(|c| c + normal(&mut rng, 0.0, sigma)).collect());
            truth.push(Some(b));
        }
    }
    for _ in 0..contaminants {
        points.push((0..dim).map(|_| rng.random_range(-spread..spread)).collect());
        truth.push(None);
    }
    Blobs { points, truth }
}
