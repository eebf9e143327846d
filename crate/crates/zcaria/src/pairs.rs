//! Known-plaintext dataset generation and the binary pair-file format.
//!
//! Layout (little-endian): magic "ZCPF", version u8, cell_width u8,
//! rounds u8, reserved u8, record count u64, then `count` records of
//! (plaintext, ciphertext), each state packed w*16 bits with cell 0 in the
//! least significant position.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::cipher::{encrypt, CipherProfile, RoundKeys, State};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ZCPF";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairFileHeader {
    pub cell_width: u8,
    pub rounds: u8,
    pub count: u64,
}

fn state_bytes(cell_width: u8) -> usize {
    (16 * cell_width as usize) / 8
}

pub fn write_pairs(path: &Path, header: &PairFileHeader, records: &[(State, State)]) -> Result<()> {
    if records.len() as u64 != header.count {
        return Err(Error::PairFile(format!(
            "header count {} does not match {} records",
            header.count,
            records.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[FORMAT_VERSION, header.cell_width, header.rounds, 0])?;
    w.write_all(&header.count.to_le_bytes())?;
    let nb = state_bytes(header.cell_width);
    for (pt, ct) in records {
        w.write_all(&pt.pack(header.cell_width).to_le_bytes()[..nb])?;
        w.write_all(&ct.pack(header.cell_width).to_le_bytes()[..nb])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_header(r: &mut impl Read) -> Result<PairFileHeader> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|e| Error::PairFile(format!("truncated header: {e}")))?;
    if &head[0..4] != MAGIC {
        return Err(Error::PairFile("bad magic".into()));
    }
    if head[4] != FORMAT_VERSION {
        return Err(Error::PairFile(format!("unsupported version {}", head[4])));
    }
    if !matches!(head[5], 2 | 4 | 8) {
        return Err(Error::PairFile(format!("bad cell width {}", head[5])));
    }
    Ok(PairFileHeader {
        cell_width: head[5],
        rounds: head[6],
        count: u64::from_le_bytes(head[8..16].try_into().unwrap()),
    })
}

pub fn read_pairs(path: &Path) -> Result<(PairFileHeader, Vec<(State, State)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header(&mut r)?;
    let nb = state_bytes(header.cell_width);
    let mut records = Vec::with_capacity(header.count as usize);
    let mut buf = [0u8; 32];
    for i in 0..header.count {
        r.read_exact(&mut buf[..2 * nb])
            .map_err(|e| Error::PairFile(format!("truncated record {i}: {e}")))?;
        let mut pt = [0u8; 16];
        let mut ct = [0u8; 16];
        pt[..nb].copy_from_slice(&buf[..nb]);
        ct[..nb].copy_from_slice(&buf[nb..2 * nb]);
        records.push((
            State::unpack(u128::from_le_bytes(pt), header.cell_width),
            State::unpack(u128::from_le_bytes(ct), header.cell_width),
        ));
    }
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(Error::PairFile("trailing bytes after last record".into()));
    }
    Ok((header, records))
}

/// Seed-keyed bijection over the codebook used to enumerate distinct
/// plaintexts in any order: record i gets plaintext E_seed(i).
fn index_permutation_keys(profile: &CipherProfile, seed: u64) -> RoundKeys {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5a43_5046_7065_726d);
    RoundKeys::random(&mut rng, profile)
}

/// Generates `count` distinct-plaintext records under `keys`, deterministic
/// for a fixed seed and independent of how the index range is sharded.
pub fn generate_dataset(
    profile: &CipherProfile,
    keys: &RoundKeys,
    count: u64,
    seed: u64,
) -> Result<Vec<(State, State)>> {
    if count == 0 {
        return Err(Error::InvalidParameter("dataset count must be at least 1".into()));
    }
    let cb_log2 = profile.codebook_log2();
    if cb_log2 < 64 && count > 1u64 << cb_log2 {
        return Err(Error::InvalidParameter(format!(
            "count 2^{:.1} exceeds codebook size 2^{cb_log2}",
            (count as f64).log2()
        )));
    }
    let perm_keys = index_permutation_keys(profile, seed);
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let pt = encrypt(&State::unpack(i as u128, profile.cell_width), &perm_keys, profile)?;
        let ct = encrypt(&pt, keys, profile)?;
        out.push((pt, ct));
    }
    Ok(out)
}

pub fn generate_dataset_file(
    path: &Path,
    profile: &CipherProfile,
    keys: &RoundKeys,
    count: u64,
    seed: u64,
) -> Result<()> {
    let records = generate_dataset(profile, keys, count, seed)?;
    write_pairs(
        path,
        &PairFileHeader {
            cell_width: profile.cell_width,
            rounds: profile.rounds as u8,
            count,
        },
        &records,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cipher::decrypt;
    use std::collections::HashSet;

    fn setup() -> (CipherProfile, RoundKeys) {
        let profile = CipherProfile::desk_w4(6);
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let keys = RoundKeys::random(&mut rng, &profile);
        (profile, keys)
    }

    #[test]
    fn zero_count_rejected() {
        let (profile, keys) = setup();
        assert!(generate_dataset(&profile, &keys, 0, 1).is_err());
    }

    #[test]
    fn count_beyond_codebook_rejected() {
        let profile = CipherProfile::desk_w2(6);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let keys = RoundKeys::random(&mut rng, &profile);
        assert!(generate_dataset(&profile, &keys, (1u64 << 32) + 1, 1).is_err());
    }

    #[test]
    fn deterministic_and_byte_identical() {
        let (profile, keys) = setup();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.zcpf");
        let p2 = dir.path().join("b.zcpf");
        generate_dataset_file(&p1, &profile, &keys, 500, 77).unwrap();
        generate_dataset_file(&p2, &profile, &keys, 500, 77).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let p3 = dir.path().join("c.zcpf");
        generate_dataset_file(&p3, &profile, &keys, 500, 78).unwrap();
        assert_ne!(std::fs::read(&p1).unwrap(), std::fs::read(&p3).unwrap());
    }

    #[test]
    fn records_decrypt_and_plaintexts_distinct() {
        let (profile, keys) = setup();
        let records = generate_dataset(&profile, &keys, 1000, 5).unwrap();
        let mut seen = HashSet::new();
        for (pt, ct) in &records {
            assert_eq!(&decrypt(ct, &keys, &profile).unwrap(), pt);
            assert!(seen.insert(pt.pack(4)), "duplicate plaintext");
        }
    }

    #[test]
    fn file_round_trip_exact() {
        let (profile, keys) = setup();
        let records = generate_dataset(&profile, &keys, 64, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.zcpf");
        let header = PairFileHeader {
            cell_width: 4,
            rounds: 6,
            count: 64,
        };
        write_pairs(&path, &header, &records).unwrap();
        let (h2, r2) = read_pairs(&path).unwrap();
        assert_eq!(h2, header);
        assert_eq!(r2, records);
    }

    #[test]
    fn malformed_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.zcpf");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(read_pairs(&path).is_err());
        std::fs::write(&path, [b'Z', b'C', b'P', b'F', 1, 4, 6, 0, 2, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        assert!(read_pairs(&path).is_err(), "truncated records");
    }
}
