//! Dense counter vectors over a 2^m index space, plus snapshot files.
//!
//! Snapshot layout (little-endian): magic "ZCCV", m as u8, then 2^m u64
//! counts. Signed tables (sign tables, per-key correlation sums) reuse the
//! same layout with a one-byte kind tag after m and i64 entries.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"ZCCV";

/// Largest index space we will materialize in memory (2^28 u64 = 2 GiB).
pub const MAX_INDEX_BITS: u32 = 28;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CounterVector {
    index_bits: u32,
    counts: Vec<u64>,
}

impl CounterVector {
    pub fn zero(index_bits: u32) -> Result<Self> {
        if index_bits > MAX_INDEX_BITS {
            return Err(Error::IndexSpaceTooLarge {
                bits: index_bits,
                limit: MAX_INDEX_BITS,
            });
        }
        Ok(CounterVector {
            index_bits,
            counts: vec![0; 1usize << index_bits],
        })
    }

    pub fn from_counts(index_bits: u32, counts: Vec<u64>) -> Result<Self> {
        if index_bits > MAX_INDEX_BITS || counts.len() != 1usize << index_bits {
            return Err(Error::InvalidParameter(format!(
                "{} counts do not fill a 2^{index_bits} index space",
                counts.len()
            )));
        }
        Ok(CounterVector { index_bits, counts })
    }

    pub fn index_bits(&self) -> u32 {
        self.index_bits
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn add(&mut self, index: usize, count: u64) {
        self.counts[index] += count;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Fails unless the counters sum to exactly `expected` — stage
    /// applications must conserve the total.
    pub fn check_total(&self, expected: u64) -> Result<()> {
        let sum = self.total();
        if sum != expected {
            return Err(Error::CountMismatch { sum, expected });
        }
        Ok(())
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&[self.index_bits as u8])?;
        for &c in &self.counts {
            w.write_all(&c.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut head = [0u8; 5];
        r.read_exact(&mut head)
            .map_err(|e| Error::PairFile(format!("truncated snapshot header: {e}")))?;
        if &head[0..4] != SNAPSHOT_MAGIC {
            return Err(Error::PairFile("bad snapshot magic".into()));
        }
        let m = head[4] as u32;
        let mut v = CounterVector::zero(m)?;
        let mut buf = [0u8; 8];
        for i in 0..v.counts.len() {
            r.read_exact(&mut buf)
                .map_err(|e| Error::PairFile(format!("truncated snapshot entry {i}: {e}")))?;
            v.counts[i] = u64::from_le_bytes(buf);
        }
        Ok(v)
    }
}

/// Distinguishes signed-table snapshots sharing the counter layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignedKind {
    SignTable,
    KeyCorrelation,
}

impl SignedKind {
    fn tag(self) -> u8 {
        match self {
            SignedKind::SignTable => 1,
            SignedKind::KeyCorrelation => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(SignedKind::SignTable),
            2 => Ok(SignedKind::KeyCorrelation),
            t => Err(Error::PairFile(format!("unknown signed-snapshot kind {t}"))),
        }
    }
}

pub fn write_signed_snapshot(path: &Path, kind: SignedKind, values: &[i64]) -> Result<()> {
    if !values.len().is_power_of_two() {
        return Err(Error::InvalidParameter(
            "signed snapshot length must be a power of two".into(),
        ));
    }
    let m = values.len().trailing_zeros() as u8;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&[m, kind.tag()])?;
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_signed_snapshot(path: &Path) -> Result<(SignedKind, Vec<i64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut head = [0u8; 6];
    r.read_exact(&mut head)
        .map_err(|e| Error::PairFile(format!("truncated snapshot header: {e}")))?;
    if &head[0..4] != SNAPSHOT_MAGIC {
        return Err(Error::PairFile("bad snapshot magic".into()));
    }
    let kind = SignedKind::from_tag(head[5])?;
    let mut values = vec![0i64; 1usize << head[4]];
    let mut buf = [0u8; 8];
    for v in values.iter_mut() {
        r.read_exact(&mut buf)
            .map_err(|e| Error::PairFile(format!("truncated snapshot entry: {e}")))?;
        *v = i64::from_le_bytes(buf);
    }
    Ok((kind, values))
}
