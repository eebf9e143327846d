//! FFT technique: per-key correlations for all key guesses at once. The
//! evaluation matrix is circulant by XOR (its entry at (data, key) depends
//! only on data⊕key), so the matrix-vector product diagonalizes under the
//! fast Walsh–Hadamard transform: three transforms and one pointwise
//! product replace the 2^m × 2^m double loop.

use std::path::Path;

use rayon::prelude::*;

use crate::cipher::CipherProfile;
use crate::counters::{self, CounterVector, SignedKind, MAX_INDEX_BITS};
use crate::error::{Error, Result};

/// In-place Walsh–Hadamard transform, butterfly per bit level. Returns the
/// exact number of additions/subtractions performed (m·2^m).
pub fn fwht_i64(v: &mut [i64]) -> Result<u64> {
    let len = v.len();
    if len == 0 || !len.is_power_of_two() {
        return Err(Error::InvalidParameter(format!(
            "transform length {len} is not a power of two"
        )));
    }
    let m = len.trailing_zeros();
    let mut half = 1usize;
    while half < len {
        // Each level is a disjoint set of blocks: safe to parallelize.
        if len >= 1 << 16 {
            v.par_chunks_mut(half * 2).for_each(|chunk| {
                for i in 0..half {
                    let (a, b) = (chunk[i], chunk[i + half]);
                    chunk[i] = a + b;
                    chunk[i + half] = a - b;
                }
            });
        } else {
            for chunk in v.chunks_mut(half * 2) {
                for i in 0..half {
                    let (a, b) = (chunk[i], chunk[i + half]);
                    chunk[i] = a + b;
                    chunk[i + half] = a - b;
                }
            }
        }
        half <<= 1;
    }
    Ok(m as u64 * len as u64)
}

/// The generating row of the circulant matrix: entry y is (−1)^{g(y)},
/// bit-packed (set bit = −1).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignTable {
    m: u32,
    bits: Vec<u64>,
}

impl SignTable {
    pub fn build<G: Fn(usize) -> bool>(g: G, m: u32) -> Result<SignTable> {
        if m > MAX_INDEX_BITS {
            return Err(Error::IndexSpaceTooLarge {
                bits: m,
                limit: MAX_INDEX_BITS,
            });
        }
        let len = 1usize << m;
        let mut bits = vec![0u64; len.div_ceil(64)];
        for y in 0..len {
            if g(y) {
                bits[y >> 6] |= 1 << (y & 63);
            }
        }
        Ok(SignTable { m, bits })
    }

    pub fn index_bits(&self) -> u32 {
        self.m
    }

    pub fn len(&self) -> usize {
        1 << self.m
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// +1 or −1.
    pub fn sign(&self, y: usize) -> i64 {
        if self.bits[y >> 6] >> (y & 63) & 1 == 1 {
            -1
        } else {
            1
        }
    }

    pub fn to_i64(&self) -> Vec<i64> {
        (0..self.len()).map(|y| self.sign(y)).collect()
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        counters::write_signed_snapshot(path, SignedKind::SignTable, &self.to_i64())
    }

    pub fn read_snapshot(path: &Path) -> Result<SignTable> {
        let (kind, values) = counters::read_signed_snapshot(path)?;
        if kind != SignedKind::SignTable {
            return Err(Error::InvalidParameter(
                "snapshot does not hold a sign table".into(),
            ));
        }
        if values.iter().any(|&v| v != 1 && v != -1) {
            return Err(Error::InvalidParameter(
                "sign table entries must be ±1".into(),
            ));
        }
        let m = values.len().trailing_zeros();
        SignTable::build(|y| values[y] == -1, m)
    }
}

/// Places the data index inside the key index space: data cells occupy the
/// low coordinates; the remaining high coordinates (the combined keys that
/// have no data partner) are fixed to zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataEmbedding {
    data_bits: u32,
    index_bits: u32,
}

impl DataEmbedding {
    pub fn new(data_bits: u32, index_bits: u32) -> Result<DataEmbedding> {
        if data_bits > index_bits {
            return Err(Error::InvalidParameter(format!(
                "cannot embed {data_bits} data bits into {index_bits} index bits"
            )));
        }
        Ok(DataEmbedding {
            data_bits,
            index_bits,
        })
    }

    pub fn identity(bits: u32) -> DataEmbedding {
        DataEmbedding {
            data_bits: bits,
            index_bits: bits,
        }
    }

    pub fn data_bits(&self) -> u32 {
        self.data_bits
    }

    pub fn index_bits(&self) -> u32 {
        self.index_bits
    }

    pub fn embed(&self, x: usize) -> usize {
        debug_assert!(x < 1 << self.data_bits);
        x
    }
}

/// Exact per-key inner products ε[k] = Σ_x signs[embed(x)⊕k]·counters[x].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyCorrelationVector {
    pub m: u32,
    pub eps: Vec<i64>,
}

impl KeyCorrelationVector {
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        counters::write_signed_snapshot(path, SignedKind::KeyCorrelation, &self.eps)
    }
}

/// Addition/operation accounting for one convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConvolveCost {
    pub additions: u64,
    pub products: u64,
}

/// Three transforms and a pointwise product; exact integers throughout.
/// The 2^m scaling must divide exactly — anything else is a fault.
pub fn xor_convolve(
    signs: &SignTable,
    counters: &CounterVector,
    embed: &DataEmbedding,
) -> Result<(KeyCorrelationVector, ConvolveCost)> {
    let m = signs.index_bits();
    if embed.index_bits() != m {
        return Err(Error::Layout(format!(
            "embedding targets {} bits, sign table has {m}",
            embed.index_bits()
        )));
    }
    if counters.index_bits() != embed.data_bits() {
        return Err(Error::Layout(format!(
            "counters hold {} bits, embedding expects {}",
            counters.index_bits(),
            embed.data_bits()
        )));
    }
    let n = counters.total();
    // |fwht entries| ≤ 2^m·max ≤ 2^m·N; products ≤ 2^(2m)·N must fit i64.
    if m >= 26 || (n >> 10) >= 1u64 << (62 - 2 * m).min(63) {
        return Err(Error::IndexSpaceTooLarge {
            bits: m,
            limit: 26,
        });
    }
    let mut cost = ConvolveCost::default();
    let mut t = signs.to_i64();
    cost.additions += fwht_i64(&mut t)?;
    let mut u = vec![0i64; 1 << m];
    for (x, &c) in counters.counts().iter().enumerate() {
        u[embed.embed(x)] = c as i64;
    }
    cost.additions += fwht_i64(&mut u)?;
    for (a, &b) in u.iter_mut().zip(t.iter()) {
        *a *= b;
    }
    cost.products += 1 << m;
    cost.additions += fwht_i64(&mut u)?;
    let scale = 1i64 << m;
    let eps = u
        .into_iter()
        .map(|v| {
            if v % scale != 0 {
                return Err(Error::InvalidParameter(
                    "non-integral convolution result: transform fault".into(),
                ));
            }
            Ok(v / scale)
        })
        .collect::<Result<Vec<i64>>>()?;
    if eps.iter().any(|&e| e.unsigned_abs() > n) {
        return Err(Error::InvalidParameter(
            "|ε| exceeds the pair count: transform fault".into(),
        ));
    }
    Ok((KeyCorrelationVector { m, eps }, cost))
}

/// Reference semantics for xor_convolve: the naive double loop.
pub fn naive_convolve(
    signs: &SignTable,
    counters: &CounterVector,
    embed: &DataEmbedding,
) -> Result<KeyCorrelationVector> {
    let m = signs.index_bits();
    let eps = (0..1usize << m)
        .map(|k| {
            counters
                .counts()
                .iter()
                .enumerate()
                .map(|(x, &c)| signs.sign(embed.embed(x) ^ k) * c as i64)
                .sum()
        })
        .collect();
    Ok(KeyCorrelationVector { m, eps })
}

/// Per-key running statistic W = Σ_approximations (ε/N)², kept exact as
/// Σε² in 128-bit integers; W itself is Σε²/N².
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WAccumulator {
    pub m: u32,
    pub n: u64,
    pub approximations: u32,
    pub sum_sq: Vec<i128>,
}

impl WAccumulator {
    pub fn new(m: u32, n: u64) -> Result<WAccumulator> {
        if n == 0 {
            return Err(Error::InvalidParameter("N must be positive".into()));
        }
        Ok(WAccumulator {
            m,
            n,
            approximations: 0,
            sum_sq: vec![0; 1 << m],
        })
    }

    pub fn accumulate(&mut self, eps: &KeyCorrelationVector) -> Result<()> {
        if eps.m != self.m {
            return Err(Error::Layout(format!(
                "ε vector over {} bits, accumulator over {}",
                eps.m, self.m
            )));
        }
        for (w, &e) in self.sum_sq.iter_mut().zip(&eps.eps) {
            *w += (e as i128) * (e as i128);
        }
        self.approximations += 1;
        Ok(())
    }

    /// W[k] as a float: Σε²/N².
    pub fn w(&self, k: usize) -> f64 {
        self.sum_sq[k] as f64 / (self.n as f64 * self.n as f64)
    }
}

fn parity_w(mask: u8, value: u8) -> bool {
    (mask & value).count_ones() & 1 == 1
}

/// The 6-round circulant generator: g(y) over 11 cells y = (m1⊕k1 cells
/// 0,2,5,8,11,14,15 | m7⊕k7 cells 2,5,11,12), equal to the masked XOR of
/// first-round S-boxes (mask b) and inverse last-round S-boxes (mask h).
/// The masked round-6 key constant is dropped: it only flips every sign.
pub fn sign_fn_6round(
    profile: &CipherProfile,
    b: u8,
    h: u8,
) -> impl Fn(usize) -> bool + '_ {
    let w = profile.cell_width as usize;
    let mask = (1usize << w) - 1;
    let r = profile.rounds;
    move |y: usize| {
        let cell = |i: usize| ((y >> (w * i)) & mask) as u8;
        let mut sb = 0u8;
        for (j, &pos) in [0usize, 2, 5, 8, 11, 14, 15].iter().enumerate() {
            sb ^= profile.sub_cell(1, pos, false, cell(j));
        }
        let mut sh = 0u8;
        for (j, &pos) in [2usize, 5, 11, 12].iter().enumerate() {
            sh ^= profile.sub_cell(r, pos, true, cell(7 + j));
        }
        parity_w(b, sb) ^ parity_w(h, sh)
    }
}

/// The 7-round circulant generator: g(y) over 23 cells y = (m1⊕k1 cells
/// 0,2,5,8,11,14,15 | m8⊕k8 cells 1,2,3,4,6,7,9,10,11,12,14,15 | combined
/// keys k7,2 k7,5 k7,11 k7,12). Inner inverse last-round S-boxes feed the
/// four diffusion-row sums, each offset by its combined key, through the
/// round-6 inverse boxes.
pub fn sign_fn_7round(
    profile: &CipherProfile,
    b: u8,
    h: u8,
) -> impl Fn(usize) -> bool + '_ {
    let w = profile.cell_width as usize;
    let mask = (1usize << w) - 1;
    let r = profile.rounds;
    const M8: [usize; 12] = [1, 2, 3, 4, 6, 7, 9, 10, 11, 12, 14, 15];
    const ROWS: [(usize, [usize; 7]); 4] = [
        (2, [1, 4, 6, 10, 11, 12, 15]),
        (5, [1, 3, 4, 9, 10, 14, 15]),
        (11, [2, 3, 4, 7, 9, 12, 14]),
        (12, [1, 2, 6, 7, 9, 11, 12]),
    ];
    move |y: usize| {
        let cell = |i: usize| ((y >> (w * i)) & mask) as u8;
        let mut sb = 0u8;
        for (j, &pos) in [0usize, 2, 5, 8, 11, 14, 15].iter().enumerate() {
            sb ^= profile.sub_cell(1, pos, false, cell(j));
        }
        let mut inner = [0u8; 16];
        for (j, &pos) in M8.iter().enumerate() {
            inner[pos] = profile.sub_cell(r, pos, true, cell(7 + j));
        }
        let mut sh = 0u8;
        for (slot, (c, row)) in ROWS.iter().enumerate() {
            let acc = row.iter().fold(cell(19 + slot) as u8, |a, &i| a ^ inner[i]);
            sh ^= profile.sub_cell(r - 1, *c, true, acc);
        }
        parity_w(b, sb) ^ parity_w(h, sh)
    }
}
