use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::IoError;

pub const EMBEDDING_MAGIC: [u8; 8] = *b"TMEMB\0\0\x01";
const HEADER_LEN: u64 = 16;

/// Row-major `count x dim` float32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    count: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(count: usize, dim: usize, data: Vec<f32>) -> Result<Self, IoError> {
        if count.checked_mul(dim) != Some(data.len()) {
            return Err(IoError::Schema(format!(
                "embedding matrix {count}x{dim} needs {} values, got {}",
                count.saturating_mul(dim),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(IoError::NonFinite { row: pos / dim, col: pos % dim });
        }
        Ok(Self { count, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, IoError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(IoError::Schema("rows of differing length".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, i: usize) -> Option<&[f32]> {
        (i < self.count).then(|| self.row(i))
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// Streams rows of an embedding file without holding the matrix.
pub struct EmbeddingReader<R> {
    reader: R,
    count: usize,
    dim: usize,
    next_row: usize,
    buf: Vec<u8>,
}

impl<R: Read> EmbeddingReader<R> {
    pub fn new(mut reader: R) -> Result<Self, IoError> {
        let mut header = [0u8; HEADER_LEN as usize];
        read_exact_or_truncated(&mut reader, &mut header, HEADER_LEN, 0)?;
        if header[..8] != EMBEDDING_MAGIC {
            return Err(IoError::BadMagic);
        }
        let count = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        Ok(Self { reader, count, dim, next_row: 0, buf: Vec::new() })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn payload_len(&self) -> u64 {
        (self.count as u64).saturating_mul(self.dim as u64).saturating_mul(4).saturating_add(HEADER_LEN)
    }

    /// Reads the next row into `out` (cleared first). `Ok(false)` after the
    /// last declared row.
    pub fn read_row(&mut self, out: &mut Vec<f32>) -> Result<bool, IoError> {
        if self.next_row == self.count {
            return Ok(false);
        }
        let done = HEADER_LEN + self.next_row as u64 * self.dim as u64 * 4;
        let expected = self.payload_len();
        let want = self.dim as u64 * 4;
        self.buf.clear();
        // grows with the bytes actually present
        (&mut self.reader).take(want).read_to_end(&mut self.buf)?;
        if (self.buf.len() as u64) < want {
            return Err(IoError::Truncated { expected, actual: done + self.buf.len() as u64 });
        }
        out.clear();
        for (col, chunk) in self.buf.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(IoError::NonFinite { row: self.next_row, col });
            }
            out.push(v);
        }
        self.next_row += 1;
        Ok(true)
    }
}

fn read_exact_or_truncated<R: Read>(reader: &mut R, buf: &mut [u8], expected: u64, done: u64) -> Result<(), IoError> {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => return Err(IoError::Truncated { expected, actual: done + filled as u64 }),
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Reads a whole matrix from a stream. Storage grows with the rows actually
/// read, so a lying header cannot force a large allocation.
pub fn read_embeddings_from<R: Read>(reader: R) -> Result<EmbeddingMatrix, IoError> {
    let mut rows = EmbeddingReader::new(reader)?;
    const PREALLOC_CAP: usize = 1 << 20;
    let mut data = Vec::with_capacity((rows.count() * rows.dim()).min(PREALLOC_CAP));
    let mut row = Vec::with_capacity(rows.dim());
    while rows.read_row(&mut row)? {
        data.extend_from_slice(&row);
    }
    let (count, dim) = (rows.count(), rows.dim());
    Ok(EmbeddingMatrix { count, dim, data })
}

/// Reads a matrix file; the declared size is checked against the file
/// length before the payload is allocated.
pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix, IoError> {
    let file = File::open(path)?;
    let actual = file.metadata()?.len();
    let mut reader = BufReader::new(file);
    let rows = EmbeddingReader::new(&mut reader)?;
    let expected = rows.payload_len();
    if actual < expected {
        return Err(IoError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(IoError::Schema(format!(
            "{} trailing bytes after {}x{} matrix",
            actual - expected,
            rows.count(),
            rows.dim()
        )));
    }
    let (count, dim) = (rows.count(), rows.dim());
    let mut data = Vec::with_capacity(count * dim);
    let mut rows = rows;
    let mut row = Vec::with_capacity(dim);
    while rows.read_row(&mut row)? {
        data.extend_from_slice(&row);
    }
    Ok(EmbeddingMatrix { count, dim, data })
}

pub fn write_embeddings_to<W: Write>(m: &EmbeddingMatrix, mut w: W) -> Result<(), IoError> {
    let count = u32::try_from(m.count).map_err(|_| IoError::Schema("count exceeds u32".into()))?;
    let dim = u32::try_from(m.dim).map_err(|_| IoError::Schema("dim exceeds u32".into()))?;
    w.write_all(&EMBEDDING_MAGIC)?;
    w.write_all(&count.to_le_bytes())?;
    w.write_all(&dim.to_le_bytes())?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: &Path) -> Result<(), IoError> {
    write_embeddings_to(m, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(m: &EmbeddingMatrix) -> Vec<u8> {
        let mut buf = Vec::new();
        write_embeddings_to(m, &mut buf).unwrap();
        buf
    }

    #[test]
    fn empty_matrix_keeps_dim() {
        let m = EmbeddingMatrix::new(0, 128, vec![]).unwrap();
        let back = read_embeddings_from(&encode(&m)[..]).unwrap();
        assert_eq!(back.count(), 0);
        assert_eq!(back.dim(), 128);
    }

    #[test]
    fn small_matrix_round_trips_via_file() {
        let m = EmbeddingMatrix::new(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-7, -1e7]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        write_embeddings(&m, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.row(1), &[0.0, 1e-7, -1e7]);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 24);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let m = EmbeddingMatrix::new(1, 1, vec![1.0]).unwrap();
        let mut bytes = encode(&m);
        bytes[0] = b'X';
        assert!(matches!(read_embeddings_from(&bytes[..]), Err(IoError::BadMagic)));
    }

    #[test]
    fn truncation_detected() {
        let m = EmbeddingMatrix::new(2, 2, vec![1.0; 4]).unwrap();
        let bytes = encode(&m);
        let err = read_embeddings_from(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, IoError::Truncated { expected: 32, actual: 29 }), "{err}");
        assert!(matches!(read_embeddings_from(&bytes[..10]), Err(IoError::Truncated { .. })));
    }

    #[test]
    fn huge_declared_count_does_not_allocate() {
        let mut bytes = EMBEDDING_MAGIC.to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 8]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lie.bin");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_embeddings(&path), Err(IoError::Truncated { .. })));
    }

    #[test]
    fn nan_rejected() {
        let mut bytes = encode(&EmbeddingMatrix::new(1, 2, vec![1.0, 2.0]).unwrap());
        bytes[20..24].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_embeddings_from(&bytes[..]), Err(IoError::NonFinite { row: 0, col: 1 })));
        assert!(EmbeddingMatrix::new(1, 1, vec![f32::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn write_read_identity(count in 0usize..6, dim in 1usize..9, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..count * dim).map(|_| rng.random_range(-1e3f32..1e3)).collect();
            let m = EmbeddingMatrix::new(count, dim, data).unwrap();
            let bytes = encode(&m);
            let back = read_embeddings_from(&bytes[..]).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
