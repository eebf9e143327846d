//! Width-parametric ARIA-style SPN: 16-cell state, two-table substitution
//! layers, the fixed 16x16 binary diffusion matrix, and round composition
//! with the last diffusion layer replaced by a key addition.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CELLS: usize = 16;

/// Rows of the diffusion matrix as 16-bit column masks (bit j = entry (i,j)).
/// The matrix is symmetric and involutory with row weight 7.
pub const DIFFUSION_ROWS: [u16; 16] = [
    row(&[3, 4, 6, 8, 9, 13, 14]),
    row(&[2, 5, 7, 8, 9, 12, 15]),
    row(&[1, 4, 6, 10, 11, 12, 15]),
    row(&[0, 5, 7, 10, 11, 13, 14]),
    row(&[0, 2, 5, 8, 11, 14, 15]),
    row(&[1, 3, 4, 9, 10, 14, 15]),
    row(&[0, 2, 7, 9, 10, 12, 13]),
    row(&[1, 3, 6, 8, 11, 12, 13]),
    row(&[0, 1, 4, 7, 10, 13, 15]),
    row(&[0, 1, 5, 6, 11, 12, 14]),
    row(&[2, 3, 5, 6, 8, 13, 15]),
    row(&[2, 3, 4, 7, 9, 12, 14]),
    row(&[1, 2, 6, 7, 9, 11, 12]),
    row(&[0, 3, 6, 7, 8, 10, 13]),
    row(&[0, 3, 4, 5, 9, 11, 14]),
    row(&[1, 2, 4, 5, 8, 10, 15]),
];

const fn row(cols: &[usize]) -> u16 {
    let mut m = 0u16;
    let mut i = 0;
    while i < cols.len() {
        m |= 1 << cols[i];
        i += 1;
    }
    m
}

/// Column support of the diffusion matrix (equal to the row support by
/// symmetry), as sorted cell indices.
pub fn diffusion_support(col: usize) -> Vec<usize> {
    (0..CELLS).filter(|&i| DIFFUSION_ROWS[i] >> col & 1 == 1).collect()
}

/// 16 cells, each holding a value below 2^w.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct State(pub [u8; CELLS]);

impl State {
    pub const ZERO: State = State([0; CELLS]);

    pub fn pack(&self, cell_width: u8) -> u128 {
        let mut v = 0u128;
        for (i, &c) in self.0.iter().enumerate() {
            v |= (c as u128) << (i as u32 * cell_width as u32);
        }
        v
    }

    pub fn unpack(v: u128, cell_width: u8) -> State {
        let mask = (1u16 << cell_width) as u128 - 1;
        let mut cells = [0u8; CELLS];
        for (i, c) in cells.iter_mut().enumerate() {
            *c = ((v >> (i as u32 * cell_width as u32)) & mask) as u8;
        }
        State(cells)
    }

    pub fn random<R: Rng>(rng: &mut R, cell_width: u8) -> State {
        let mut cells = [0u8; CELLS];
        for c in cells.iter_mut() {
            *c = rng.gen_range(0..1u16 << cell_width) as u8;
        }
        State(cells)
    }

    pub fn xor(&self, other: &State) -> State {
        let mut out = [0u8; CELLS];
        for i in 0..CELLS {
            out[i] = self.0[i] ^ other.0[i];
        }
        State(out)
    }

    pub fn is_valid(&self, cell_width: u8) -> bool {
        self.0.iter().all(|&c| (c as u16) < (1 << cell_width))
    }
}

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "State[")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{c:x}")?;
        }
        write!(f, "]")
    }
}

/// Which of the four table variants a substitution-layer position applies.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum SboxSel {
    S1,
    S2,
    S1Inv,
    S2Inv,
}

impl SboxSel {
    fn inverse(self) -> SboxSel {
        match self {
            SboxSel::S1 => SboxSel::S1Inv,
            SboxSel::S1Inv => SboxSel::S1,
            SboxSel::S2 => SboxSel::S2Inv,
            SboxSel::S2Inv => SboxSel::S2,
        }
    }
}

#[derive(Clone)]
struct Sbox {
    fwd: Vec<u8>,
    inv: Vec<u8>,
}

impl Sbox {
    fn new(table: Vec<u8>, cell_width: u8) -> Result<Sbox> {
        let size = 1usize << cell_width;
        if table.len() != size {
            return Err(Error::Profile(format!(
                "S-box table has {} entries, expected {size}",
                table.len()
            )));
        }
        let mut inv = vec![0xffu8; size];
        for (x, &y) in table.iter().enumerate() {
            if y as usize >= size || inv[y as usize] != 0xff {
                return Err(Error::Profile("S-box table is not a permutation".into()));
            }
            inv[y as usize] = x as u8;
        }
        Ok(Sbox { fwd: table, inv })
    }
}

/// Width, round count, S-box tables and substitution-layer arrangement.
///
/// Odd rounds use the type-1 layer (default pattern S1,S2,S1^-1,S2^-1 repeated
/// across the 16 positions), even rounds the cell-wise inverse arrangement.
#[derive(Clone)]
pub struct CipherProfile {
    pub cell_width: u8,
    pub rounds: usize,
    sbox1: Sbox,
    sbox2: Sbox,
    type1_pattern: [SboxSel; 4],
}

impl CipherProfile {
    pub fn new(
        cell_width: u8,
        rounds: usize,
        sbox1: Vec<u8>,
        sbox2: Vec<u8>,
        type1_pattern: [SboxSel; 4],
    ) -> Result<CipherProfile> {
        if !matches!(cell_width, 2 | 4 | 8) {
            return Err(Error::Profile(format!("unsupported cell width {cell_width}")));
        }
        if rounds == 0 {
            return Err(Error::Profile("round count must be at least 1".into()));
        }
        Ok(CipherProfile {
            cell_width,
            rounds,
            sbox1: Sbox::new(sbox1, cell_width)?,
            sbox2: Sbox::new(sbox2, cell_width)?,
            type1_pattern,
        })
    }

    const DEFAULT_PATTERN: [SboxSel; 4] = [SboxSel::S1, SboxSel::S2, SboxSel::S1Inv, SboxSel::S2Inv];

    /// 2-bit desk profile (both tables necessarily affine).
    pub fn desk_w2(rounds: usize) -> CipherProfile {
        CipherProfile::new(2, rounds, vec![0, 3, 1, 2], vec![1, 2, 3, 0], Self::DEFAULT_PATTERN)
            .expect("built-in profile")
    }

    /// 4-bit desk profile (PRESENT and PRINCE S-boxes).
    pub fn desk_w4(rounds: usize) -> CipherProfile {
        CipherProfile::new(
            4,
            rounds,
            vec![0xc, 5, 6, 0xb, 9, 0, 0xa, 0xd, 3, 0xe, 0xf, 8, 4, 7, 1, 2],
            vec![0xb, 0xf, 3, 2, 0xa, 0xc, 9, 1, 6, 7, 8, 0, 0xe, 5, 0xd, 4],
            Self::DEFAULT_PATTERN,
        )
        .expect("built-in profile")
    }

    /// Loads a profile from a plain-text `key = value` file with keys
    /// `width`, `rounds`, `sbox1`, `sbox2` and optional `pattern`
    /// (comma-separated s1/s2/s1i/s2i for the type-1 layer).
    pub fn from_file(path: &Path) -> Result<CipherProfile> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Profile(format!("{}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<CipherProfile> {
        let mut width = None;
        let mut rounds = None;
        let mut sbox1 = None;
        let mut sbox2 = None;
        let mut pattern = Self::DEFAULT_PATTERN;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Profile(format!("line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "width" => {
                    width = Some(value.parse::<u8>().map_err(|e| {
                        Error::Profile(format!("width: {e}"))
                    })?)
                }
                "rounds" => {
                    rounds = Some(value.parse::<usize>().map_err(|e| {
                        Error::Profile(format!("rounds: {e}"))
                    })?)
                }
                "sbox1" => sbox1 = Some(value.to_string()),
                "sbox2" => sbox2 = Some(value.to_string()),
                "pattern" => pattern = parse_pattern(value)?,
                other => return Err(Error::Profile(format!("unknown key `{other}`"))),
            }
        }
        let width = width.ok_or_else(|| Error::Profile("missing `width`".into()))?;
        let rounds = rounds.ok_or_else(|| Error::Profile("missing `rounds`".into()))?;
        let sbox1 = parse_table(&sbox1.ok_or_else(|| Error::Profile("missing `sbox1`".into()))?, width)?;
        let sbox2 = parse_table(&sbox2.ok_or_else(|| Error::Profile("missing `sbox2`".into()))?, width)?;
        CipherProfile::new(width, rounds, sbox1, sbox2, pattern)
    }

    pub fn codebook_log2(&self) -> u32 {
        16 * self.cell_width as u32
    }

    /// Table variant applied at `pos` in round `round` (1-based).
    pub fn layer_sel(&self, round: usize, pos: usize) -> SboxSel {
        let sel = self.type1_pattern[pos % 4];
        if round % 2 == 1 {
            sel
        } else {
            sel.inverse()
        }
    }

    fn table(&self, sel: SboxSel) -> &[u8] {
        match sel {
            SboxSel::S1 => &self.sbox1.fwd,
            SboxSel::S1Inv => &self.sbox1.inv,
            SboxSel::S2 => &self.sbox2.fwd,
            SboxSel::S2Inv => &self.sbox2.inv,
        }
    }

    /// Applies S_{round,pos} (or its inverse) to a single cell value.
    pub fn sub_cell(&self, round: usize, pos: usize, inverse: bool, x: u8) -> u8 {
        let sel = self.layer_sel(round, pos);
        let sel = if inverse { sel.inverse() } else { sel };
        self.table(sel)[x as usize]
    }

    fn check_round(&self, round: usize) -> Result<()> {
        if round == 0 || round > self.rounds {
            return Err(Error::RoundOutOfRange {
                round,
                rounds: self.rounds,
            });
        }
        Ok(())
    }
}

fn parse_pattern(value: &str) -> Result<[SboxSel; 4]> {
    let parts: Vec<_> = value.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return Err(Error::Profile("pattern needs exactly 4 entries".into()));
    }
    let mut out = [SboxSel::S1; 4];
    for (i, p) in parts.iter().enumerate() {
        out[i] = match *p {
            "s1" => SboxSel::S1,
            "s2" => SboxSel::S2,
            "s1i" => SboxSel::S1Inv,
            "s2i" => SboxSel::S2Inv,
            other => return Err(Error::Profile(format!("unknown pattern entry `{other}`"))),
        };
    }
    Ok(out)
}

fn parse_table(hex: &str, width: u8) -> Result<Vec<u8>> {
    let digits_per_entry = if width == 8 { 2 } else { 1 };
    let entries = 1usize << width;
    let hex: String = hex.chars().filter(|c| !c.is_whitespace()).collect();
    if hex.len() != entries * digits_per_entry {
        return Err(Error::Profile(format!(
            "S-box hex string has {} digits, expected {}",
            hex.len(),
            entries * digits_per_entry
        )));
    }
    let mut out = Vec::with_capacity(entries);
    for chunk in hex.as_bytes().chunks(digits_per_entry) {
        let s = std::str::from_utf8(chunk).unwrap();
        let v = u8::from_str_radix(s, 16)
            .map_err(|e| Error::Profile(format!("bad hex digit in S-box table: {e}")))?;
        out.push(v);
    }
    Ok(out)
}

/// One subkey per round plus the final addition that replaces the last
/// diffusion layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoundKeys {
    pub subkeys: Vec<State>,
}

impl RoundKeys {
    pub fn new(subkeys: Vec<State>, profile: &CipherProfile) -> Result<RoundKeys> {
        if subkeys.len() != profile.rounds + 1 {
            return Err(Error::KeyCountMismatch {
                expected: profile.rounds + 1,
                rounds: profile.rounds,
                got: subkeys.len(),
            });
        }
        Ok(RoundKeys { subkeys })
    }

    /// Independent uniform round keys; the real key schedule is not modelled.
    pub fn random<R: Rng>(rng: &mut R, profile: &CipherProfile) -> RoundKeys {
        RoundKeys {
            subkeys: (0..=profile.rounds)
                .map(|_| State::random(rng, profile.cell_width))
                .collect(),
        }
    }

    /// Subkey added at the start of round `round` (1-based); index
    /// `rounds + 1` is the final addition.
    pub fn subkey(&self, round: usize) -> &State {
        &self.subkeys[round - 1]
    }
}

/// Substitution layer of one round; `inverse` applies the inverse layer.
pub fn substitute(
    state: &State,
    round: usize,
    profile: &CipherProfile,
    inverse: bool,
) -> Result<State> {
    profile.check_round(round)?;
    let mut out = [0u8; CELLS];
    for (pos, o) in out.iter_mut().enumerate() {
        *o = profile.sub_cell(round, pos, inverse, state.0[pos]);
    }
    Ok(State(out))
}

/// Diffusion layer: cell-wise XOR by the fixed binary matrix. Self-inverse
/// and independent of the cell width.
pub fn diffuse(state: &State) -> State {
    let mut out = [0u8; CELLS];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0u8;
        let mut cols = DIFFUSION_ROWS[i];
        while cols != 0 {
            let j = cols.trailing_zeros() as usize;
            acc ^= state.0[j];
            cols &= cols - 1;
        }
        *o = acc;
    }
    State(out)
}

/// Full encryption: rounds 1..r-1 are KA,SL,DL; round r is KA,SL followed by
/// the final key addition.
pub fn encrypt(pt: &State, keys: &RoundKeys, profile: &CipherProfile) -> Result<State> {
    if keys.subkeys.len() != profile.rounds + 1 {
        return Err(Error::KeyCountMismatch {
            expected: profile.rounds + 1,
            rounds: profile.rounds,
            got: keys.subkeys.len(),
        });
    }
    let mut state = *pt;
    for round in 1..=profile.rounds {
        state = state.xor(keys.subkey(round));
        state = substitute(&state, round, profile, false)?;
        if round < profile.rounds {
            state = diffuse(&state);
        }
    }
    Ok(state.xor(keys.subkey(profile.rounds + 1)))
}

pub fn decrypt(ct: &State, keys: &RoundKeys, profile: &CipherProfile) -> Result<State> {
    if keys.subkeys.len() != profile.rounds + 1 {
        return Err(Error::KeyCountMismatch {
            expected: profile.rounds + 1,
            rounds: profile.rounds,
            got: keys.subkeys.len(),
        });
    }
    let mut state = ct.xor(keys.subkey(profile.rounds + 1));
    for round in (1..=profile.rounds).rev() {
        if round < profile.rounds {
            state = diffuse(&state);
        }
        state = substitute(&state, round, profile, true)?;
        state = state.xor(keys.subkey(round));
    }
    Ok(state)
}
