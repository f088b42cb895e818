//! Auto-labeled detector training examples.
//!
//! Positives are dense anchors that overlap a mined track box well enough.
//! Negatives are anchors lying almost entirely in space assumed to be
//! object-free: ground pixels and anything more than 2.5 m above the ground
//! plane.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{backproject, height_above_plane, iou, BBox, CameraIntrinsics, GeomError, GroundPlane};
use crate::io::{IoError, SCHEMA_VERSION};
use crate::tracker::TrackCollection;

#[derive(Debug, Error)]
pub enum TrainsetError {
    #[error("invalid trainset parameter: {0}")]
    InvalidParams(String),
    #[error("depth map is {got_w}x{got_h}, image is {want_w}x{want_h}")]
    DepthSize { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("{mode} mode needs {expected} labels, example at {sequence_id}/{frame} has {found}")]
    ModeMismatch { mode: Mode, expected: &'static str, found: String, sequence_id: String, frame: u64 },
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Io(#[from] IoError),
}

impl From<std::io::Error> for TrainsetError {
    fn from(e: std::io::Error) -> Self {
        TrainsetError::Io(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub bbox: BBox,
    pub row: u32,
    pub col: u32,
    pub scale_index: u16,
    pub ratio_index: u16,
}

/// One anchor per (grid cell, scale, ratio), centered on the cell and
/// clipped to the image; `w = s * sqrt(r)`, `h = s / sqrt(r)`. Anchors left
/// narrower or shorter than one pixel are dropped. Ordered row-major, then
/// scale, then ratio.
pub fn generate_anchors(
    image_w: u32,
    image_h: u32,
    stride: u32,
    scales: &[f64],
    ratios: &[f64],
) -> Result<Vec<Anchor>, TrainsetError> {
    if stride == 0 {
        return Err(TrainsetError::InvalidParams("stride must be at least 1".into()));
    }
    if scales.is_empty() || ratios.is_empty() {
        return Err(TrainsetError::InvalidParams("scales and ratios must be non-empty".into()));
    }
    if let Some(v) = scales.iter().chain(ratios).find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(TrainsetError::InvalidParams(format!("scales and ratios must be positive, got {v}")));
    }
    let (rows, cols) = (image_h.div_ceil(stride), image_w.div_ceil(stride));
    let (w_img, h_img) = (image_w as f64, image_h as f64);
    let half = stride as f64 / 2.0;
    let mut out = Vec::with_capacity((rows * cols) as usize * scales.len() * ratios.len());
    for row in 0..rows {
        for col in 0..cols {
            let (cx, cy) = ((col * stride) as f64 + half, (row * stride) as f64 + half);
            for (si, &s) in scales.iter().enumerate() {
                for (ri, &r) in ratios.iter().enumerate() {
                    let (w, h) = (s * r.sqrt(), s / r.sqrt());
                    let raw = BBox { x: cx - w / 2.0, y: cy - h / 2.0, w, h };
                    let Some(bbox) = raw.clip(w_img, h_img) else { continue };
                    if bbox.w < 1.0 || bbox.h < 1.0 {
                        continue;
                    }
                    out.push(Anchor { bbox, row, col, scale_index: si as u16, ratio_index: ri as u16 });
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveLabel {
    Category(String),
    ClusterId(usize),
}

impl std::fmt::Display for PositiveLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PositiveLabel::Category(c) => write!(f, "{c}"),
            PositiveLabel::ClusterId(c) => write!(f, "cluster_{c}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "label", content = "target", rename_all = "lowercase")]
pub enum ExampleLabel {
    Positive(PositiveLabel),
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub sequence_id: String,
    pub frame: u64,
    /// Index into the anchor list the example was cut from.
    pub anchor: usize,
    pub bbox: BBox,
    #[serde(flatten)]
    pub label: ExampleLabel,
    pub track_id: Option<u64>,
}

/// A track's box in one frame, with the label its positives inherit
/// (`None` for tracks that only veto negatives).
#[derive(Debug, Clone, PartialEq)]
pub struct TrackBox {
    pub track_id: u64,
    pub bbox: BBox,
    pub label: Option<PositiveLabel>,
}

/// Anchors with IoU at least `iou_min` against a labeled box, each paired
/// with its best box (ties go to the lower track id). Returns
/// `(anchor index, box index)`.
pub fn match_positive_anchors(anchors: &[Anchor], boxes: &[TrackBox], iou_min: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (b, tb) in boxes.iter().enumerate() {
            if tb.label.is_none() {
                continue;
            }
            let v = iou(&anchor.bbox, &tb.bbox);
            if v < iou_min {
                continue;
            }
            let better = match best {
                None => true,
                Some((cur, cur_v)) => v > cur_v || (v == cur_v && tb.track_id < boxes[cur].track_id),
            };
            if better {
                best = Some((b, v));
            }
        }
        if let Some((b, _)) = best {
            out.push((a, b));
        }
    }
    out
}

pub fn select_positive_anchors(
    sequence_id: &str,
    frame: u64,
    anchors: &[Anchor],
    boxes: &[TrackBox],
    iou_min: f64,
) -> Vec<TrainingExample> {
    match_positive_anchors(anchors, boxes, iou_min)
        .into_iter()
        .map(|(a, b)| TrainingExample {
            sequence_id: sequence_id.to_owned(),
            frame,
            anchor: a,
            bbox: anchors[a].bbox,
            label: ExampleLabel::Positive(boxes[b].label.clone().expect("matched boxes are labeled")),
            track_id: Some(boxes[b].track_id),
        })
        .collect()
}

/// Per-pixel depth in meters, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.data[v * self.width + u]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeSpaceParams {
    /// Points at most this high count as ground.
    pub ground_eps: f64,
    /// Points at least this high are above any object.
    pub max_height: f64,
    /// Depth range searched along rays when no depth map is given.
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for FreeSpaceParams {
    fn default() -> Self {
        Self { ground_eps: 0.2, max_height: 2.5, z_min: 1.0, z_max: 60.0 }
    }
}

/// Image-sized mask, `true` where no object is expected. Pixel `(u, v)`
/// covers `[u, u+1) x [v, v+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreeSpaceMask {
    pub width: usize,
    pub height: usize,
    pub free: Vec<bool>,
}

impl FreeSpaceMask {
    pub fn get(&self, u: usize, v: usize) -> bool {
        self.free[v * self.width + u]
    }

    pub fn free_count(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }

    /// Binary PGM: 255 for free pixels, 0 otherwise.
    pub fn write_pgm<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.free.iter().map(|&f| if f { 255 } else { 0 }).collect();
        w.write_all(&bytes)?;
        w.flush()
    }
}

/// Free if the ray through the pixel meets the ground within
/// `[z_min, z_max]`, or stays above `max_height` over that whole range.
fn ray_is_free(k: &CameraIntrinsics, plane: &GroundPlane, pixel: (f64, f64), p: &FreeSpaceParams) -> bool {
    let r = k.ray(pixel);
    // height along the ray is linear in z
    let slope = plane.normal[0] * r[0] + plane.normal[1] * r[1] + plane.normal[2] * r[2];
    if slope != 0.0 {
        let z = -plane.offset / slope;
        if z >= p.z_min && z <= p.z_max {
            return true;
        }
    }
    let lowest = (plane.offset + slope * p.z_min).min(plane.offset + slope * p.z_max);
    lowest > p.max_height
}

pub fn free_space_mask(
    k: &CameraIntrinsics,
    plane: &GroundPlane,
    depth: Option<&DepthMap>,
    params: &FreeSpaceParams,
) -> Result<FreeSpaceMask, TrainsetError> {
    k.validate()?;
    plane.validate()?;
    let (width, height) = (k.image_w as usize, k.image_h as usize);
    if let Some(d) = depth {
        if (d.width, d.height) != (width, height) || d.data.len() != width * height {
            return Err(TrainsetError::DepthSize { got_w: d.width, got_h: d.height, want_w: width, want_h: height });
        }
    }
    let free: Vec<bool> = (0..width * height)
        .into_par_iter()
        .map(|i| {
            let (u, v) = (i % width, i / width);
            let pixel = (u as f64, v as f64);
            match depth {
                Some(d) => match backproject(pixel, f64::from(d.get(u, v)), k) {
                    Ok(p) => {
                        let h = height_above_plane(p, plane);
                        h <= params.ground_eps || h >= params.max_height
                    }
                    // missing or invalid depth is never assumed free
                    Err(_) => false,
                },
                None => ray_is_free(k, plane, pixel, params),
            }
        })
        .collect();
    Ok(FreeSpaceMask { width, height, free })
}

/// Summed-area table of free pixels for constant-time box counts.
pub struct FreeCounter {
    width: usize,
    height: usize,
    sums: Vec<u64>,
}

impl FreeCounter {
    pub fn new(mask: &FreeSpaceMask) -> Self {
        let (w, h) = (mask.width, mask.height);
        let mut sums = vec![0u64; (w + 1) * (h + 1)];
        for v in 0..h {
            let mut row = 0u64;
            for u in 0..w {
                row += u64::from(mask.get(u, v));
                sums[(v + 1) * (w + 1) + u + 1] = sums[v * (w + 1) + u + 1] + row;
            }
        }
        Self { width: w, height: h, sums }
    }

    fn pixel_range(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
        // pixels whose centers lie in [lo, hi)
        let a = (lo - 0.5).ceil().clamp(0.0, limit as f64) as usize;
        let b = (hi - 0.5).ceil().clamp(0.0, limit as f64) as usize;
        (a, b.max(a))
    }

    /// `(free pixels, total pixels)` among pixels centered inside `b`.
    pub fn count(&self, b: &BBox) -> (u64, u64) {
        let (u0, u1) = Self::pixel_range(b.x, b.right(), self.width);
        let (v0, v1) = Self::pixel_range(b.y, b.bottom(), self.height);
        let w = self.width + 1;
        let s = |u: usize, v: usize| self.sums[v * w + u];
        let free = s(u1, v1) + s(u0, v0) - s(u0, v1) - s(u1, v0);
        (free, ((u1 - u0) * (v1 - v0)) as u64)
    }

    pub fn free_fraction(&self, b: &BBox) -> f64 {
        match self.count(b) {
            (_, 0) => 0.0,
            (free, total) => free as f64 / total as f64,
        }
    }
}

/// Anchors whose free-pixel fraction reaches `free_fraction_min` and whose
/// IoU with every track box stays below `iou_max`.
pub fn select_negative_anchors(
    sequence_id: &str,
    frame: u64,
    anchors: &[Anchor],
    counter: &FreeCounter,
    boxes: &[TrackBox],
    free_fraction_min: f64,
    iou_max: f64,
) -> Vec<TrainingExample> {
    anchors
        .iter()
        .enumerate()
        .filter(|(_, a)| counter.free_fraction(&a.bbox) >= free_fraction_min)
        .filter(|(_, a)| boxes.iter().all(|b| iou(&a.bbox, &b.bbox) < iou_max))
        .map(|(i, a)| TrainingExample {
            sequence_id: sequence_id.to_owned(),
            frame,
            anchor: i,
            bbox: a.bbox,
            label: ExampleLabel::Negative,
            track_id: None,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Positives carry known category names.
    Finetune,
    /// Positives carry cluster ids.
    Discover,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Finetune => "finetune",
            Mode::Discover => "discover",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "finetune" => Ok(Mode::Finetune),
            "discover" => Ok(Mode::Discover),
            other => Err(format!("unknown mode '{other}' (expected finetune or discover)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainsetParams {
    pub stride: u32,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub iou_min: f64,
    pub free_fraction_min: f64,
    pub iou_max: f64,
    /// Negatives kept per frame after seeded subsampling; `None` keeps all.
    pub max_negatives_per_frame: Option<usize>,
    pub free_space: FreeSpaceParams,
}

impl Default for TrainsetParams {
    fn default() -> Self {
        Self {
            stride: 16,
            scales: vec![32.0, 64.0, 128.0, 256.0],
            ratios: vec![0.5, 1.0, 2.0],
            iou_min: 0.5,
            free_fraction_min: 0.9,
            iou_max: 0.1,
            max_negatives_per_frame: Some(256),
            free_space: FreeSpaceParams::default(),
        }
    }
}

impl TrainsetParams {
    pub fn validate(&self) -> Result<(), TrainsetError> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.iou_min) || !unit(self.iou_max) || !unit(self.free_fraction_min) {
            return Err(TrainsetError::InvalidParams("thresholds must lie in [0, 1]".into()));
        }
        if self.iou_max > self.iou_min {
            return Err(TrainsetError::InvalidParams(format!(
                "iou_max {} exceeds iou_min {}; an anchor could be both positive and negative",
                self.iou_max, self.iou_min
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingSet {
    pub positives: Vec<TrainingExample>,
    pub negatives: Vec<TrainingExample>,
}

/// Positives and negatives for every frame in which some track is present.
/// `labels` maps track ids to the label their positives carry; unlisted
/// tracks still veto negatives.
pub fn build_training_set(
    tracks: &TrackCollection,
    labels: &HashMap<u64, PositiveLabel>,
    k: &CameraIntrinsics,
    plane: &GroundPlane,
    depth: Option<&DepthMap>,
    params: &TrainsetParams,
    seed: u64,
) -> Result<TrainingSet, TrainsetError> {
    params.validate()?;
    let anchors = generate_anchors(k.image_w, k.image_h, params.stride, &params.scales, &params.ratios)?;
    let mask = free_space_mask(k, plane, depth, &params.free_space)?;
    let counter = FreeCounter::new(&mask);

    let mut frames: BTreeMap<(&str, u64), Vec<TrackBox>> = BTreeMap::new();
    for t in &tracks.tracks {
        for e in &t.elements {
            frames.entry((t.sequence_id.as_str(), e.frame)).or_default().push(TrackBox {
                track_id: t.track_id,
                bbox: e.bbox,
                label: labels.get(&t.track_id).cloned(),
            });
        }
    }
    let frames: Vec<_> = frames.into_iter().collect();
    let per_frame: Vec<(Vec<TrainingExample>, Vec<TrainingExample>)> = frames
        .par_iter()
        .enumerate()
        .map(|(i, ((seq, frame), boxes))| {
            let pos = select_positive_anchors(seq, *frame, &anchors, boxes, params.iou_min);
            let mut neg =
                select_negative_anchors(seq, *frame, &anchors, &counter, boxes, params.free_fraction_min, params.iou_max);
            if let Some(cap) = params.max_negatives_per_frame {
                if neg.len() > cap {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    let mut keep: Vec<usize> = (0..neg.len()).collect::<Vec<_>>().choose_multiple(&mut rng, cap).copied().collect();
                    keep.sort_unstable();
                    neg = keep.into_iter().map(|j| neg[j].clone()).collect();
                }
            }
            (pos, neg)
        })
        .collect();
    let mut set = TrainingSet::default();
    for (p, n) in per_frame {
        set.positives.extend(p);
        set.negatives.extend(n);
    }
    Ok(set)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSetMeta {
    pub schema_version: u64,
    pub mode: Option<Mode>,
    pub positives: u64,
    pub negatives: u64,
    pub per_label: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    metadata: TrainingSetMeta,
}

fn check_mode(mode: Mode, e: &TrainingExample) -> Result<(), TrainsetError> {
    let ok = matches!(
        (&e.label, mode),
        (ExampleLabel::Negative, _)
            | (ExampleLabel::Positive(PositiveLabel::Category(_)), Mode::Finetune)
            | (ExampleLabel::Positive(PositiveLabel::ClusterId(_)), Mode::Discover)
    );
    if ok {
        return Ok(());
    }
    let (expected, found) = match mode {
        Mode::Finetune => ("category", "a cluster id"),
        Mode::Discover => ("cluster id", "a category name"),
    };
    Err(TrainsetError::ModeMismatch {
        mode,
        expected,
        found: found.into(),
        sequence_id: e.sequence_id.clone(),
        frame: e.frame,
    })
}

/// Writes one JSON record per example, ordered by (sequence, frame,
/// anchor), then a trailing `{"metadata": ...}` line with counts.
pub fn write_training_set<W: Write>(set: &TrainingSet, mode: Mode, w: W) -> Result<TrainingSetMeta, TrainsetError> {
    for e in &set.positives {
        check_mode(mode, e)?;
    }
    let mut all: Vec<&TrainingExample> = set.positives.iter().chain(&set.negatives).collect();
    all.sort_by(|a, b| {
        (&a.sequence_id, a.frame, a.anchor)
            .cmp(&(&b.sequence_id, b.frame, b.anchor))
            .then_with(|| matches!(a.label, ExampleLabel::Negative).cmp(&matches!(b.label, ExampleLabel::Negative)))
    });
    let mut meta = TrainingSetMeta { schema_version: SCHEMA_VERSION, mode: Some(mode), ..Default::default() };
    let mut w = BufWriter::new(w);
    for e in all {
        serde_json::to_writer(&mut w, e).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        match &e.label {
            ExampleLabel::Positive(l) => {
                meta.positives += 1;
                *meta.per_label.entry(l.to_string()).or_default() += 1;
            }
            ExampleLabel::Negative => meta.negatives += 1,
        }
    }
    serde_json::to_writer(&mut w, &MetaLine { metadata: meta.clone() }).map_err(std::io::Error::from)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(meta)
}

pub fn export_training_set(set: &TrainingSet, mode: Mode, path: &Path) -> Result<TrainingSetMeta, TrainsetError> {
    let file = std::fs::File::create(path)?;
    write_training_set(set, mode, file)
}

pub fn read_training_set(path: &Path) -> Result<(Vec<TrainingExample>, TrainingSetMeta), TrainsetError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut examples = Vec::new();
    let mut meta = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| IoError::Parse { line: i + 1, message: e.to_string() };
        if meta.is_some() {
            return Err(IoError::Schema(format!("line {}: record after the metadata line", i + 1)).into());
        }
        if line.starts_with("{\"metadata\"") {
            meta = Some(serde_json::from_str::<MetaLine>(&line).map_err(parse_err)?.metadata);
        } else {
            examples.push(serde_json::from_str(&line).map_err(parse_err)?);
        }
    }
    let meta = meta.ok_or_else(|| IoError::Schema("missing trailing metadata line".into()))?;
    if meta.schema_version != SCHEMA_VERSION {
        return Err(IoError::UnsupportedVersion { found: meta.schema_version, supported: SCHEMA_VERSION }.into());
    }
    Ok((examples, meta))
}
