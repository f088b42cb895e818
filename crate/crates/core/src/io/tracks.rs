use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{IoError, NdjsonReader, NdjsonWriter};
use crate::tracker::{Track, TrackCollection};

const KIND: &str = "tracks";

pub fn write_tracks_to<W: Write>(collection: &TrackCollection, w: W) -> Result<(), IoError> {
    let mut w = NdjsonWriter::new(w, KIND)?;
    for t in &collection.tracks {
        w.write(t)?;
    }
    w.finish()?;
    Ok(())
}

pub fn write_tracks(collection: &TrackCollection, path: &Path) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tracks_to(collection, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_tracks_from<R: BufRead>(reader: R) -> Result<TrackCollection, IoError> {
    let mut stream = NdjsonReader::<_, Track>::new(reader, KIND);
    let mut tracks = Vec::new();
    let mut ids = HashSet::new();
    while let Some(track) = stream.next() {
        let track = track?;
        let line = stream.line();
        if !ids.insert(track.track_id) {
            return Err(IoError::Parse { line, message: format!("duplicate track_id {}", track.track_id) });
        }
        if track.elements.is_empty() {
            return Err(IoError::Parse { line, message: format!("track {} has no elements", track.track_id) });
        }
        if track.elements.windows(2).any(|w| w[0].frame >= w[1].frame) {
            return Err(IoError::Parse {
                line,
                message: format!("track {} frames not strictly increasing", track.track_id),
            });
        }
        tracks.push(track);
    }
    Ok(TrackCollection { tracks })
}

pub fn read_tracks(path: &Path) -> Result<TrackCollection, IoError> {
    read_tracks_from(BufReader::new(File::open(path)?))
}
