use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IoError, NdjsonReader, NdjsonWriter};

const KIND: &str = "annotations";

/// Manual ground truth for one mined track.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum GtLabel {
    Category(String),
    UnknownValid,
    TrackingError,
}

impl GtLabel {
    pub fn is_tracking_error(&self) -> bool {
        matches!(self, GtLabel::TrackingError)
    }

    pub fn as_str(&self) -> &str {
        match self {
            GtLabel::Category(c) => c,
            GtLabel::UnknownValid => "unknown_valid",
            GtLabel::TrackingError => "tracking_error",
        }
    }
}

impl From<String> for GtLabel {
    fn from(s: String) -> Self {
        match s.as_str() {
            "unknown_valid" => GtLabel::UnknownValid,
            "tracking_error" => GtLabel::TrackingError,
            _ => GtLabel::Category(s),
        }
    }
}

impl From<GtLabel> for String {
    fn from(l: GtLabel) -> Self {
        l.as_str().to_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub track_id: u64,
    pub gt_label: GtLabel,
}

/// Reads annotations; with `known_tracks`, every record must reference one
/// of those ids. A track may be annotated at most once.
pub fn read_annotations_from<R: BufRead>(
    reader: R,
    known_tracks: Option<&HashSet<u64>>,
) -> Result<Vec<AnnotationRecord>, IoError> {
    let mut stream = NdjsonReader::<_, AnnotationRecord>::new(reader, KIND);
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    while let Some(rec) = stream.next() {
        let rec = rec?;
        let line = stream.line();
        if let Some(ids) = known_tracks {
            if !ids.contains(&rec.track_id) {
                return Err(IoError::Parse { line, message: format!("annotation references unknown track {}", rec.track_id) });
            }
        }
        if !seen.insert(rec.track_id) {
            return Err(IoError::Parse { line, message: format!("track {} annotated twice", rec.track_id) });
        }
        if rec.gt_label.as_str().is_empty() {
            return Err(IoError::Parse { line, message: "empty gt_label".into() });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn read_annotations(path: &Path, known_tracks: Option<&HashSet<u64>>) -> Result<Vec<AnnotationRecord>, IoError> {
    read_annotations_from(BufReader::new(File::open(path)?), known_tracks)
}

pub fn write_annotations(records: &[AnnotationRecord], path: &Path) -> Result<(), IoError> {
    let mut w = NdjsonWriter::new(BufWriter::new(File::create(path)?), KIND)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()?.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_parse_specials() {
        let text = "{\"schema_version\":1,\"kind\":\"annotations\"}\n\
            {\"track_id\":0,\"gt_label\":\"car\"}\n\
            {\"track_id\":1,\"gt_label\":\"unknown_valid\"}\n\
            {\"track_id\":2,\"gt_label\":\"tracking_error\"}\n";
        let recs = read_annotations_from(text.as_bytes(), None).unwrap();
        assert_eq!(recs[0].gt_label, GtLabel::Category("car".into()));
        assert_eq!(recs[1].gt_label, GtLabel::UnknownValid);
        assert!(recs[2].gt_label.is_tracking_error());

        let ids: HashSet<u64> = [0, 1].into_iter().collect();
        let err = read_annotations_from(text.as_bytes(), Some(&ids)).unwrap_err();
        assert!(matches!(err, IoError::Parse { line: 4, .. }));
    }

    #[test]
    fn round_trip() {
        let recs = vec![
            AnnotationRecord { track_id: 3, gt_label: GtLabel::Category("trash bin".into()) },
            AnnotationRecord { track_id: 9, gt_label: GtLabel::TrackingError },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        write_annotations(&recs, &p).unwrap();
        assert_eq!(read_annotations(&p, None).unwrap(), recs);
    }
}
