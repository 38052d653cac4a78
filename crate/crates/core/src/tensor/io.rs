//! `TTB1` binary serialization.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "TTB1" | d | kind (0 = vector, 1 = operator) | row modes (d) | col modes (d)
//!        | ranks r_0..r_d (d + 1) | cores as little-endian f64
//! ```
//!
//! Vectors store their modes as row modes and 1 for every column mode.
//! Each core payload is `r_{k-1} * m_k * n_k * r_k` values in the row-major
//! `(left, mode, right)` layout, with the operator mode index `i_k + m_k j_k`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{QttError, Result};
use crate::tensor::scheme::{TensorizationScheme, MAX_MODE};
use crate::tensor::train::{Core, TTOperator, TTVector, TensorTrain};

const MAGIC: &[u8; 4] = b"TTB1";
const MAX_RANK: usize = 1 << 16;

/// Contents of a `TTB1` stream.
#[derive(Clone, Debug, PartialEq)]
pub enum TtFile {
    Vector(TTVector),
    Operator(TTOperator),
}

impl TtFile {
    pub fn into_vector(self) -> Result<TTVector> {
        match self {
            TtFile::Vector(v) => Ok(v),
            TtFile::Operator(_) => Err(QttError::Format("expected a vector, found an operator".into())),
        }
    }

    pub fn into_operator(self) -> Result<TTOperator> {
        match self {
            TtFile::Operator(a) => Ok(a),
            TtFile::Vector(_) => Err(QttError::Format("expected an operator, found a vector".into())),
        }
    }
}

pub fn write_vector(w: &mut impl Write, x: &TTVector) -> Result<()> {
    let modes = x.modes();
    let ones = vec![1usize; modes.len()];
    write_raw(w, 0, &modes, &ones, x.train())
}

pub fn write_operator(w: &mut impl Write, a: &TTOperator) -> Result<()> {
    write_raw(w, 1, &a.row_modes(), &a.col_modes(), a.train())
}

fn write_raw(
    w: &mut impl Write,
    kind: u32,
    row_modes: &[usize],
    col_modes: &[usize],
    train: &TensorTrain,
) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + train.payload_bytes());
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, train.depth())?;
    buf.extend_from_slice(&kind.to_le_bytes());
    for &m in row_modes.iter().chain(col_modes) {
        put_u32(&mut buf, m)?;
    }
    for r in train.ranks() {
        put_u32(&mut buf, r)?;
    }
    for core in train.cores() {
        for v in core.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| QttError::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Reads a complete `TTB1` stream; trailing bytes are an error.
pub fn read(r: &mut impl Read) -> Result<TtFile> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn decode(bytes: &[u8]) -> Result<TtFile> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(QttError::Format("bad magic".into()));
    }
    let d = cur.u32()? as usize;
    if d == 0 || d > 4096 {
        return Err(QttError::Format(format!("implausible depth {d}")));
    }
    let kind = cur.u32()?;
    if kind > 1 {
        return Err(QttError::Format(format!("unknown kind flag {kind}")));
    }
    let row_modes = cur.u32s(d)?;
    let col_modes = cur.u32s(d)?;
    let ranks = cur.u32s(d + 1)?;
    if row_modes.iter().chain(&col_modes).any(|&m| m == 0 || m > MAX_MODE) {
        return Err(QttError::Format("mode size out of range".into()));
    }
    if kind == 0 && col_modes.iter().any(|&m| m != 1) {
        return Err(QttError::Format("vector column modes must all be 1".into()));
    }
    if ranks[0] != 1 || ranks[d] != 1 || ranks.iter().any(|&r| r == 0 || r > MAX_RANK) {
        return Err(QttError::Format(format!("invalid rank vector {ranks:?}")));
    }
    let mut cores = Vec::with_capacity(d);
    for k in 0..d {
        let mode = row_modes[k] * col_modes[k];
        let count = ranks[k] * mode * ranks[k + 1];
        let raw = cur.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        cores.push(Core::new(ranks[k], mode, ranks[k + 1], data)?);
    }
    if cur.pos != bytes.len() {
        return Err(QttError::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - cur.pos
        )));
    }
    let train = TensorTrain::new(cores)?;
    Ok(if kind == 0 {
        TtFile::Vector(TTVector::new(train))
    } else {
        let scheme = TensorizationScheme::rectangular(row_modes, col_modes)?;
        TtFile::Operator(TTOperator::new(train, scheme)?)
    })
}

pub fn save_vector(path: impl AsRef<Path>, x: &TTVector) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_vector(&mut f, x)?;
    f.flush()?;
    Ok(())
}

pub fn save_operator(path: impl AsRef<Path>, a: &TTOperator) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_operator(&mut f, a)?;
    f.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TtFile> {
    decode(&std::fs::read(path)?)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            QttError::Format(format!(
                "truncated stream: need {n} bytes at offset {}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<usize>> {
        (0..n).map(|_| self.u32().map(|v| v as usize)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_operator() -> TTOperator {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scheme = TensorizationScheme::morton(1, 3).unwrap();
        let train = TensorTrain::random(&[4, 4, 4], &[1, 2, 3, 1], &mut rng).unwrap();
        TTOperator::new(train, scheme).unwrap()
    }

    #[test]
    fn operator_round_trip_is_bit_exact() {
        let a = sample_operator();
        let mut buf = Vec::new();
        write_operator(&mut buf, &a).unwrap();
        assert_eq!(&buf[..4], b"TTB1");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        let back = decode(&buf).unwrap().into_operator().unwrap();
        assert_eq!(back.train(), a.train());
        assert_eq!(back.row_modes(), vec![2, 2, 2]);
        let mut again = Vec::new();
        write_operator(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_layout() {
        let x = TTVector::new(TensorTrain::ones(&[2, 3]).unwrap());
        let mut buf = Vec::new();
        write_vector(&mut buf, &x).unwrap();
        let words: Vec<u32> = buf[4..]
            .chunks_exact(4)
            .take(2 + 2 + 2 + 3)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![2, 0, 2, 3, 1, 1, 1, 1, 1]);
        assert_eq!(buf.len(), 4 + 4 * 9 + 8 * 5);
        let back = decode(&buf).unwrap().into_vector().unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn rejects_mismatched_sizes() {
        let mut buf = Vec::new();
        write_operator(&mut buf, &sample_operator()).unwrap();
        assert!(decode(&buf[..buf.len() - 8]).is_err());
        let mut longer = buf.clone();
        longer.extend_from_slice(&[0; 8]);
        assert!(decode(&longer).is_err());
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic).is_err());
        // Corrupt r_0.
        let mut bad_rank = buf.clone();
        let r0 = 4 + 4 + 4 + 4 * 6;
        bad_rank[r0] = 2;
        assert!(decode(&bad_rank).is_err());
    }
}
