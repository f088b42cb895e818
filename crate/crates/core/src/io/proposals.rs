use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IoError, NdjsonReader, NdjsonWriter};
use crate::geom::{BBox, Point3};

const KIND: &str = "proposals";

/// One per-frame candidate box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub sequence_id: String,
    pub frame: u64,
    pub bbox: BBox,
    pub objectness: f64,
    #[serde(default)]
    pub class_scores: BTreeMap<String, f64>,
    pub embedding_index: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid_3d: Option<Point3>,
}

/// Contiguous run of records sharing `(sequence_id, frame)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameGroup {
    pub sequence_id: String,
    pub frame: u64,
    pub range: Range<usize>,
}

/// Proposals grouped by sequence (in order of first appearance) and frame.
/// Within a group the file order is preserved; a record's position in
/// `records` is its proposal reference.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProposalSet {
    pub records: Vec<ProposalRecord>,
    pub groups: Vec<FrameGroup>,
}

impl ProposalSet {
    /// Groups records; frames must be non-decreasing within each sequence.
    pub fn from_records(records: Vec<ProposalRecord>) -> Result<Self, IoError> {
        let mut seq_order: HashMap<String, usize> = HashMap::new();
        let mut last_frame: Vec<u64> = Vec::new();
        let mut keyed = Vec::with_capacity(records.len());
        for (i, rec) in records.into_iter().enumerate() {
            let next = seq_order.len();
            let seq = *seq_order.entry(rec.sequence_id.clone()).or_insert(next);
            if seq == last_frame.len() {
                last_frame.push(rec.frame);
            } else if rec.frame < last_frame[seq] {
                return Err(IoError::Parse {
                    line: i + 2,
                    message: format!(
                        "frame {} after frame {} in sequence '{}': frames must be non-decreasing",
                        rec.frame, last_frame[seq], rec.sequence_id
                    ),
                });
            }
            last_frame[seq] = rec.frame;
            keyed.push((seq, rec));
        }
        // stable: preserves file order inside each (sequence, frame)
        keyed.sort_by_key(|(seq, rec)| (*seq, rec.frame));

        let mut groups: Vec<FrameGroup> = Vec::new();
        let mut out = Vec::with_capacity(keyed.len());
        for (i, (_, rec)) in keyed.into_iter().enumerate() {
            match groups.last_mut() {
                Some(g) if g.sequence_id == rec.sequence_id && g.frame == rec.frame => g.range.end = i + 1,
                _ => groups.push(FrameGroup {
                    sequence_id: rec.sequence_id.clone(),
                    frame: rec.frame,
                    range: i..i + 1,
                }),
            }
            out.push(rec);
        }
        Ok(Self { records: out, groups })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.groups.len()
    }

    /// Frame groups per sequence, sequences in first-appearance order.
    pub fn sequences(&self) -> Vec<(&str, &[FrameGroup])> {
        let mut out: Vec<(&str, &[FrameGroup])> = Vec::new();
        let mut start = 0;
        for i in 1..=self.groups.len() {
            if i == self.groups.len() || self.groups[i].sequence_id != self.groups[start].sequence_id {
                out.push((self.groups[start].sequence_id.as_str(), &self.groups[start..i]));
                start = i;
            }
        }
        out
    }
}

fn validate(rec: &ProposalRecord, line: usize) -> Result<(), IoError> {
    let unit = |v: f64| (0.0..=1.0).contains(&v);
    if !unit(rec.objectness) {
        return Err(IoError::Parse { line, message: format!("objectness {} outside [0, 1]", rec.objectness) });
    }
    if let Some((name, score)) = rec.class_scores.iter().find(|(_, s)| !unit(**s)) {
        return Err(IoError::Parse { line, message: format!("class score {name}={score} outside [0, 1]") });
    }
    if let Some(c) = rec.centroid_3d {
        if c.iter().any(|v| !v.is_finite()) {
            return Err(IoError::Parse { line, message: "non-finite centroid_3d".into() });
        }
    }
    Ok(())
}

/// Reads and groups proposals. When `embedding_count` is given, every
/// `embedding_index` must address a row of that matrix.
pub fn read_proposals_from<R: BufRead>(reader: R, embedding_count: Option<usize>) -> Result<ProposalSet, IoError> {
    let mut stream = NdjsonReader::<_, ProposalRecord>::new(reader, KIND);
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    while let Some(rec) = stream.next() {
        let rec = rec?;
        let line = stream.line();
        validate(&rec, line)?;
        if let Some(count) = embedding_count {
            if rec.embedding_index >= count as u64 {
                return Err(IoError::IndexOutOfRange { line, index: rec.embedding_index, count });
            }
        }
        if !seen.insert(rec.embedding_index) {
            return Err(IoError::DuplicateIndex { line, index: rec.embedding_index });
        }
        records.push(rec);
    }
    ProposalSet::from_records(records)
}

pub fn read_proposals(path: &Path, embedding_count: Option<usize>) -> Result<ProposalSet, IoError> {
    read_proposals_from(BufReader::new(File::open(path)?), embedding_count)
}

pub fn write_proposals<'a, I>(records: I, path: &Path) -> Result<(), IoError>
where
    I: IntoIterator<Item = &'a ProposalRecord>,
{
    let mut w = NdjsonWriter::new(BufWriter::new(File::create(path)?), KIND)?;
    for rec in records {
        w.write(rec)?;
    }
    w.finish()?.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"schema_version":1,"kind":"proposals"}
{"sequence_id":"s","frame":0,"bbox":[0,0,10,10],"objectness":0.9,"class_scores":{"car":0.8},"embedding_index":0}
{"sequence_id":"s","frame":0,"bbox":[20,0,10,10],"objectness":0.5,"embedding_index":1,"centroid_3d":[1.0,1.5,10.0]}
{"sequence_id":"s","frame":1,"bbox":[1,0,10,10],"objectness":0.8,"class_scores":{},"embedding_index":2}
"#;

    #[test]
    fn empty_file_is_empty_set() {
        let set = read_proposals_from(&b""[..], Some(0)).unwrap();
        assert!(set.is_empty());
        assert!(set.groups.is_empty());
    }

    #[test]
    fn fixture_groups_by_frame() {
        let set = read_proposals_from(FIXTURE.as_bytes(), Some(3)).unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.frame_count(), 2);
        assert_eq!(set.groups[0].range, 0..2);
        assert_eq!(set.groups[1].range, 2..3);
        assert_eq!(set.records[1].centroid_3d, Some([1.0, 1.5, 10.0]));
        assert_eq!(set.sequences().len(), 1);
    }

    #[test]
    fn index_out_of_range_is_reported() {
        let err = read_proposals_from(FIXTURE.as_bytes(), Some(2)).unwrap_err();
        assert!(matches!(err, IoError::IndexOutOfRange { line: 4, index: 2, count: 2 }), "{err}");
    }

    #[test]
    fn malformed_line_is_reported() {
        let text = FIXTURE.replace("\"objectness\":0.5", "\"objectness\":\"high\"");
        let err = read_proposals_from(text.as_bytes(), None).unwrap_err();
        assert!(matches!(err, IoError::Parse { line: 3, .. }), "{err}");
        let text = FIXTURE.replace("[20,0,10,10]", "[20,0,0,10]");
        assert!(read_proposals_from(text.as_bytes(), None).is_err());
    }

    #[test]
    fn duplicate_embedding_index_rejected() {
        let text = FIXTURE.replace("\"embedding_index\":2", "\"embedding_index\":1");
        let err = read_proposals_from(text.as_bytes(), None).unwrap_err();
        assert!(matches!(err, IoError::DuplicateIndex { line: 4, index: 1 }));
    }

    #[test]
    fn decreasing_frames_rejected() {
        let text = FIXTURE.replace("\"frame\":1", "\"frame\":0").replacen("\"frame\":0", "\"frame\":3", 1);
        assert!(read_proposals_from(text.as_bytes(), None).is_err());
    }

    #[test]
    fn interleaved_sequences_are_grouped_stably() {
        let rec = |seq: &str, frame, idx| ProposalRecord {
            sequence_id: seq.into(),
            frame,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            objectness: 0.5,
            class_scores: BTreeMap::new(),
            embedding_index: idx,
            centroid_3d: None,
        };
        let set = ProposalSet::from_records(vec![rec("a", 0, 0), rec("b", 0, 1), rec("a", 0, 2), rec("a", 1, 3)]).unwrap();
        let order: Vec<u64> = set.records.iter().map(|r| r.embedding_index).collect();
        assert_eq!(order, vec![0, 2, 3, 1]);
        let seqs = set.sequences();
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].1.len(), 2);
        assert_eq!(seqs[1].0, "b");
    }
}
