use std::io::{BufRead, Write};
use std::marker::PhantomData;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::IoError;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u64,
    kind: String,
}

/// Streaming reader: validates the header lazily on the first call to
/// `next`, then yields one record per non-blank line.
pub struct NdjsonReader<R, T> {
    reader: R,
    kind: &'static str,
    line: usize,
    header_seen: bool,
    buf: String,
    _marker: PhantomData<T>,
}

impl<R: BufRead, T: DeserializeOwned> NdjsonReader<R, T> {
    pub fn new(reader: R, kind: &'static str) -> Self {
        Self { reader, kind, line: 0, header_seen: false, buf: String::new(), _marker: PhantomData }
    }

    /// Line number of the most recently returned record.
    pub fn line(&self) -> usize {
        self.line
    }

    /// Advances to the next non-blank line, leaving it in `buf`.
    fn next_line(&mut self) -> Result<bool, IoError> {
        loop {
            self.buf.clear();
            if self.reader.read_line(&mut self.buf)? == 0 {
                return Ok(false);
            }
            self.line += 1;
            if !self.buf.trim().is_empty() {
                return Ok(true);
            }
        }
    }

    fn check_header(&mut self) -> Result<bool, IoError> {
        let kind = self.kind;
        if !self.next_line()? {
            return Ok(false);
        }
        let line = self.line;
        let header: Header = serde_json::from_str(self.buf.trim_end()).map_err(|e| IoError::Parse {
            line,
            message: format!("expected {kind} header with schema_version: {e}"),
        })?;
        if header.schema_version != SCHEMA_VERSION {
            return Err(IoError::UnsupportedVersion {
                found: header.schema_version,
                supported: SCHEMA_VERSION,
            });
        }
        if header.kind != kind {
            return Err(IoError::Schema(format!(
                "expected a {kind} file, header declares '{}'",
                header.kind
            )));
        }
        Ok(true)
    }
}

impl<R: BufRead, T: DeserializeOwned> Iterator for NdjsonReader<R, T> {
    type Item = Result<T, IoError>;

    fn next(&mut self) -> Option<Self::Item> {
        if !self.header_seen {
            self.header_seen = true;
            match self.check_header() {
                Ok(true) => {}
                Ok(false) => return None,
                Err(e) => return Some(Err(e)),
            }
        }
        match self.next_line() {
            Ok(true) => {}
            Ok(false) => return None,
            Err(e) => return Some(Err(e)),
        }
        let parsed = serde_json::from_str(self.buf.trim_end());
        Some(parsed.map_err(|e| IoError::Parse { line: self.line, message: e.to_string() }))
    }
}

pub struct NdjsonWriter<W> {
    writer: W,
}

impl<W: Write> NdjsonWriter<W> {
    pub fn new(mut writer: W, kind: &str) -> Result<Self, IoError> {
        let header = Header { schema_version: SCHEMA_VERSION, kind: kind.to_owned() };
        serde_json::to_writer(&mut writer, &header).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
        Ok(Self { writer })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), IoError> {
        serde_json::to_writer(&mut self.writer, record).map_err(std::io::Error::from)?;
        self.writer.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, IoError> {
        self.writer.flush()?;
        Ok(self.writer)
    }
}
