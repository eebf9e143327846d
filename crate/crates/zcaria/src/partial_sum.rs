//! Staged partial-sum engine: key cells are guessed one stage at a time
//! while a counter vector over a shrinking index layout is transformed, so
//! each key cell is enumerated against a compressed table instead of the
//! whole dataset. A per-pair naive oracle provides reference semantics.

use serde::{Deserialize, Serialize};

use crate::cipher::{CipherProfile, RoundKeys, State};
use crate::counters::CounterVector;
use crate::error::{Error, Result};

/// b-side accumulator: XOR of first-round S-box outputs.
pub const ACC_B: u8 = 0;
/// h-side accumulator: the value entering the statistic from the
/// ciphertext side.
pub const ACC_H: u8 = 1;
// Partial h-side accumulators for the 7-round attack are named by their
// diffusion row: 2, 5, 11, 12.

/// One w-bit field of a counter index. Field 0 is least significant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Field {
    /// Plaintext cell.
    Plain(usize),
    /// Ciphertext cell.
    Cipher(usize),
    /// Accumulator, by id.
    Acc(u8),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout(pub Vec<Field>);

impl Layout {
    pub fn bits(&self, cell_width: u8) -> u32 {
        self.0.len() as u32 * cell_width as u32
    }

    pub fn position(&self, field: Field) -> Option<usize> {
        self.0.iter().position(|&f| f == field)
    }
}

/// A guessed key cell: a concrete round-key cell or a named XOR of cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyCell {
    Round { round: usize, cell: usize },
    Combined(u8),
}

/// Definition of a combined key as the XOR of round-key cells.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CombinedKey {
    pub id: u8,
    pub round: usize,
    pub cells: Vec<usize>,
}

/// One S-box application folded into accumulators:
/// `S[sbox_round, sbox_pos]^(±1)(input ⊕ guess[key])` is XORed into every
/// target accumulator; `consume` drops the input field from the layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub sbox_round: usize,
    pub sbox_pos: usize,
    pub inverse: bool,
    pub input: Field,
    /// Index into the stage's guess list.
    pub key: usize,
    pub targets: Vec<u8>,
    pub consume: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuessStage {
    pub label: String,
    pub guesses: Vec<KeyCell>,
    pub folds: Vec<Fold>,
    pub input: Layout,
    pub output: Layout,
    /// Fixed guess values for desk-scale runs; None enumerates.
    pub pinned: Option<Vec<u8>>,
}

impl GuessStage {
    /// Number of guess combinations this stage enumerates.
    pub fn guess_space(&self, cell_width: u8) -> u64 {
        match &self.pinned {
            Some(_) => 1,
            None => 1u64 << (cell_width as u32 * self.guesses.len() as u32),
        }
    }

    fn guess_vector(&self, index: u64, cell_width: u8) -> Vec<u8> {
        if let Some(p) = &self.pinned {
            return p.clone();
        }
        let mask = (1u16 << cell_width) - 1;
        let k = self.guesses.len();
        (0..k)
            .map(|j| ((index >> (cell_width as u32 * (k - 1 - j) as u32)) as u16 & mask) as u8)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuessSchedule {
    pub stages: Vec<GuessStage>,
    pub init: Layout,
    pub terminal: Layout,
    pub combined: Vec<CombinedKey>,
}

impl GuessSchedule {
    pub fn total_guessed_cells(&self) -> usize {
        self.stages.iter().map(|s| s.guesses.len()).sum()
    }

    /// Pins a stage to fixed guess values.
    pub fn pin(&mut self, stage: usize, values: Vec<u8>) -> Result<()> {
        let s = self
            .stages
            .get_mut(stage)
            .ok_or_else(|| Error::InvalidParameter(format!("no stage {stage}")))?;
        if values.len() != s.guesses.len() {
            return Err(Error::InvalidParameter(format!(
                "stage {stage} needs {} guess values, got {}",
                s.guesses.len(),
                values.len()
            )));
        }
        s.pinned = Some(values);
        Ok(())
    }

    /// Pins a stage to the true key cells.
    pub fn pin_true(&mut self, stage: usize, keys: &RoundKeys) -> Result<()> {
        let values = self.stages[stage]
            .guesses
            .iter()
            .map(|g| self.key_value(g, keys))
            .collect::<Result<Vec<u8>>>()?;
        self.pin(stage, values)
    }

    /// Concrete value of a guessed cell under known round keys.
    pub fn key_value(&self, cell: &KeyCell, keys: &RoundKeys) -> Result<u8> {
        match cell {
            KeyCell::Round { round, cell } => Ok(keys.subkey(*round).0[*cell]),
            KeyCell::Combined(id) => {
                let def = self
                    .combined
                    .iter()
                    .find(|c| c.id == *id)
                    .ok_or_else(|| Error::InvalidParameter(format!("no combined key {id}")))?;
                Ok(def
                    .cells
                    .iter()
                    .fold(0, |acc, &i| acc ^ keys.subkey(def.round).0[i]))
            }
        }
    }
}

struct ScheduleBuilder {
    stages: Vec<GuessStage>,
    layout: Layout,
    init: Layout,
}

impl ScheduleBuilder {
    fn new(init: Layout) -> ScheduleBuilder {
        ScheduleBuilder {
            stages: Vec::new(),
            layout: init.clone(),
            init,
        }
    }

    fn stage(&mut self, label: &str, guesses: Vec<KeyCell>, folds: Vec<Fold>) {
        let input = self.layout.clone();
        let mut fields: Vec<Field> = input
            .0
            .iter()
            .filter(|f| {
                !folds.iter().any(|fold| fold.consume && fold.input == **f)
            })
            .copied()
            .collect();
        for fold in &folds {
            for &t in &fold.targets {
                if !fields.contains(&Field::Acc(t)) {
                    fields.push(Field::Acc(t));
                }
            }
        }
        let output = Layout(fields);
        assert!(
            output.0.len() <= input.0.len(),
            "stage {label} must not grow the index space"
        );
        self.layout = output.clone();
        self.stages.push(GuessStage {
            label: label.to_string(),
            guesses,
            folds,
            input,
            output,
            pinned: None,
        });
    }

    fn finish(self, combined: Vec<CombinedKey>) -> GuessSchedule {
        GuessSchedule {
            terminal: self.layout,
            stages: self.stages,
            init: self.init,
            combined,
        }
    }
}

fn k(round: usize, cell: usize) -> KeyCell {
    KeyCell::Round { round, cell }
}

/// The 6-round schedule: the last-round key cells over the h-side columns
/// are guessed first, folding inverse last-round S-boxes into the h
/// accumulator; then the seven first-round key cells over the b-side
/// column, folding first-round S-boxes into the b accumulator. Terminal
/// layout is (h, b).
pub fn schedule_6round(profile: &CipherProfile) -> GuessSchedule {
    let r = profile.rounds;
    let init = Layout(
        [0usize, 2, 5, 8, 11, 14, 15]
            .iter()
            .map(|&c| Field::Plain(c))
            .chain([2usize, 5, 11, 12].iter().map(|&c| Field::Cipher(c)))
            .collect(),
    );
    let mut b = ScheduleBuilder::new(init);
    for cell in [2usize, 5, 11, 12] {
        b.stage(
            &format!("k{}[{cell}]", r + 1),
            vec![k(r + 1, cell)],
            vec![Fold {
                sbox_round: r,
                sbox_pos: cell,
                inverse: true,
                input: Field::Cipher(cell),
                key: 0,
                targets: vec![ACC_H],
                consume: true,
            }],
        );
    }
    for cell in [0usize, 2, 5, 8, 11, 14, 15] {
        b.stage(
            &format!("k1[{cell}]"),
            vec![k(1, cell)],
            vec![Fold {
                sbox_round: 1,
                sbox_pos: cell,
                inverse: false,
                input: Field::Plain(cell),
                key: 0,
                targets: vec![ACC_B],
                consume: true,
            }],
        );
    }
    b.finish(Vec::new())
}

/// The 7-round schedule: a bulk stage guesses the first-round cell 0 and
/// eight last-round cells, folding inverse last-round S-boxes into the four
/// partial accumulators named by diffusion rows 2, 5, 11, 12; four
/// single-cell stages finish those accumulators; six stages complete the b
/// accumulator; four combined-key stages fold the round-6 inverse S-boxes
/// into the h accumulator. Terminal layout is (b, h).
pub fn schedule_7round(profile: &CipherProfile) -> GuessSchedule {
    let r = profile.rounds; // 7 in the full-scale attack
    let init = Layout(
        [0usize, 2, 5, 8, 11, 14, 15]
            .iter()
            .map(|&c| Field::Plain(c))
            .chain(
                [1usize, 2, 3, 4, 6, 7, 9, 10, 11, 12, 14, 15]
                    .iter()
                    .map(|&c| Field::Cipher(c)),
            )
            .collect(),
    );
    let acc_rows: [(u8, &[usize]); 4] = [
        (2, &[1, 4, 6, 10, 11, 12, 15]),
        (5, &[1, 3, 4, 9, 10, 14, 15]),
        (11, &[2, 3, 4, 7, 9, 12, 14]),
        (12, &[1, 2, 6, 7, 9, 11, 12]),
    ];
    let targets_of = |cell: usize| -> Vec<u8> {
        acc_rows
            .iter()
            .filter(|(_, rows)| rows.contains(&cell))
            .map(|(id, _)| *id)
            .collect()
    };
    let mut b = ScheduleBuilder::new(init);

    let bulk_cells = [1usize, 2, 3, 4, 6, 7, 9, 10];
    let mut guesses = vec![k(1, 0)];
    guesses.extend(bulk_cells.iter().map(|&c| k(r + 1, c)));
    let mut folds = vec![Fold {
        sbox_round: 1,
        sbox_pos: 0,
        inverse: false,
        input: Field::Plain(0),
        key: 0,
        targets: vec![ACC_B],
        consume: true,
    }];
    for (j, &cell) in bulk_cells.iter().enumerate() {
        folds.push(Fold {
            sbox_round: r,
            sbox_pos: cell,
            inverse: true,
            input: Field::Cipher(cell),
            key: j + 1,
            targets: targets_of(cell),
            consume: true,
        });
    }
    b.stage("bulk k1[0], k8[1,2,3,4,6,7,9,10]", guesses, folds);

    for cell in [11usize, 12, 14, 15] {
        b.stage(
            &format!("k{}[{cell}]", r + 1),
            vec![k(r + 1, cell)],
            vec![Fold {
                sbox_round: r,
                sbox_pos: cell,
                inverse: true,
                input: Field::Cipher(cell),
                key: 0,
                targets: targets_of(cell),
                consume: true,
            }],
        );
    }
    for cell in [2usize, 5, 8, 11, 14, 15] {
        b.stage(
            &format!("k1[{cell}]"),
            vec![k(1, cell)],
            vec![Fold {
                sbox_round: 1,
                sbox_pos: cell,
                inverse: false,
                input: Field::Plain(cell),
                key: 0,
                targets: vec![ACC_B],
                consume: true,
            }],
        );
    }
    let combined: Vec<CombinedKey> = acc_rows
        .iter()
        .map(|(id, cells)| CombinedKey {
            id: *id,
            round: r,
            cells: cells.to_vec(),
        })
        .collect();
    for (id, _) in acc_rows {
        b.stage(
            &format!("combined k{r},{id}"),
            vec![KeyCell::Combined(id)],
            vec![Fold {
                sbox_round: r - 1,
                sbox_pos: id as usize,
                inverse: true,
                input: Field::Acc(id),
                key: 0,
                targets: vec![ACC_H],
                consume: true,
            }],
        );
    }
    b.finish(combined)
}

fn field_value(field: Field, pt: &State, ct: &State, accs: &[u8; 256]) -> u8 {
    match field {
        Field::Plain(c) => pt.0[c],
        Field::Cipher(c) => ct.0[c],
        Field::Acc(id) => accs[id as usize],
    }
}

/// Applies the folds of one stage to scalar state (one pair), updating the
/// accumulator bank.
pub(crate) fn run_folds_scalar(
    stage: &GuessStage,
    guess: &[u8],
    profile: &CipherProfile,
    pt: &State,
    ct: &State,
    accs: &mut [u8; 256],
) {
    for fold in &stage.folds {
        let input = field_value(fold.input, pt, ct, accs);
        let folded = profile.sub_cell(
            fold.sbox_round,
            fold.sbox_pos,
            fold.inverse,
            input ^ guess[fold.key],
        );
        for &t in &fold.targets {
            accs[t as usize] ^= folded;
        }
        if let Field::Acc(id) = fold.input {
            if fold.consume {
                accs[id as usize] = 0;
            }
        }
    }
}

fn index_of_layout(
    layout: &Layout,
    cell_width: u8,
    pt: &State,
    ct: &State,
    accs: &[u8; 256],
) -> usize {
    let mut x = 0usize;
    for (i, &f) in layout.0.iter().enumerate() {
        x |= (field_value(f, pt, ct, accs) as usize) << (cell_width as usize * i);
    }
    x
}

/// Counters over the layout reached after running `prefix` stages with
/// their pinned guesses directly on each pair. `prefix = 0` is plain
/// extraction over the schedule's initial layout.
pub fn extract_counters(
    pairs: &[(State, State)],
    schedule: &GuessSchedule,
    prefix: usize,
    profile: &CipherProfile,
) -> Result<CounterVector> {
    let layout = if prefix == 0 {
        &schedule.init
    } else {
        &schedule
            .stages
            .get(prefix - 1)
            .ok_or_else(|| Error::Layout(format!("prefix {prefix} exceeds stage count")))?
            .output
    };
    for s in &schedule.stages[..prefix] {
        if s.pinned.is_none() {
            return Err(Error::Layout(format!(
                "stage `{}` must be pinned to be pre-folded",
                s.label
            )));
        }
    }
    let mut v = CounterVector::zero(layout.bits(profile.cell_width))?;
    let mut accs = [0u8; 256];
    for (pt, ct) in pairs {
        accs.fill(0);
        for s in &schedule.stages[..prefix] {
            run_folds_scalar(s, s.pinned.as_ref().unwrap(), profile, pt, ct, &mut accs);
        }
        v.add(index_of_layout(layout, profile.cell_width, pt, ct, &accs), 1);
    }
    Ok(v)
}

/// Counters over an explicit data-cell layout (no folding).
pub fn init_counters(
    pairs: &[(State, State)],
    layout: &Layout,
    profile: &CipherProfile,
) -> Result<CounterVector> {
    if layout.0.iter().any(|f| matches!(f, Field::Acc(_))) {
        return Err(Error::Layout(
            "initial extraction layout may only hold data cells".into(),
        ));
    }
    let mut v = CounterVector::zero(layout.bits(profile.cell_width))?;
    let accs = [0u8; 256];
    for (pt, ct) in pairs {
        v.add(index_of_layout(layout, profile.cell_width, pt, ct, &accs), 1);
    }
    Ok(v)
}

/// One partial-sum step: for every input index, decode fields, fold under
/// the guess, and add the count at the re-encoded output index. Conserves
/// the total exactly.
pub fn apply_stage(
    v_in: &CounterVector,
    stage: &GuessStage,
    guess: &[u8],
    profile: &CipherProfile,
) -> Result<CounterVector> {
    let w = profile.cell_width;
    if v_in.index_bits() != stage.input.bits(w) {
        return Err(Error::Layout(format!(
            "stage `{}` expects a 2^{} input space, got 2^{}",
            stage.label,
            stage.input.bits(w),
            v_in.index_bits()
        )));
    }
    if guess.len() != stage.guesses.len() {
        return Err(Error::Layout(format!(
            "stage `{}` needs {} guess values",
            stage.label,
            stage.guesses.len()
        )));
    }
    let mask = (1u16 << w) as usize - 1;
    // Precompute: position of every output field in the input, or the acc
    // id it aggregates.
    let mut v_out = CounterVector::zero(stage.output.bits(w))?;
    let in_fields = &stage.input.0;
    let out_fields = &stage.output.0;
    for (x, &count) in v_in.counts().iter().enumerate() {
        if count == 0 {
            continue;
        }
        let decode =
            |f: Field| -> u8 { ((x >> (w as usize * stage.input.position(f).unwrap())) & mask) as u8 };
        let mut acc_delta = [0u8; 256];
        for fold in &stage.folds {
            let folded = profile.sub_cell(
                fold.sbox_round,
                fold.sbox_pos,
                fold.inverse,
                decode(fold.input) ^ guess[fold.key],
            );
            for &t in &fold.targets {
                acc_delta[t as usize] ^= folded;
            }
        }
        let mut y = 0usize;
        for (i, &f) in out_fields.iter().enumerate() {
            let val = match f {
                Field::Acc(id) => {
                    let base = if in_fields.contains(&f)
                        && !stage
                            .folds
                            .iter()
                            .any(|fd| fd.consume && fd.input == f)
                    {
                        decode(f)
                    } else {
                        0
                    };
                    base ^ acc_delta[id as usize]
                }
                other => decode(other),
            };
            y |= (val as usize) << (w as usize * i);
        }
        v_out.add(y, count);
    }
    v_out.check_total(v_in.total())?;
    Ok(v_out)
}

/// Peak-memory instrumentation for a schedule run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunStats {
    /// Maximum number of counter vectors alive at once.
    pub max_live_vectors: usize,
    /// Terminal vectors emitted.
    pub emitted: u64,
}

/// Depth-first enumeration over the guesses of stages `from..`, holding one
/// counter vector per depth. Emits every full guess combination (pinned
/// stages contribute their fixed values) with its terminal counters, in
/// lexicographic guess order.
pub fn run_schedule<F>(
    v0: &CounterVector,
    schedule: &GuessSchedule,
    from: usize,
    profile: &CipherProfile,
    mut emit: F,
) -> Result<RunStats>
where
    F: FnMut(&[Vec<u8>], &CounterVector),
{
    let stages = &schedule.stages[from..];
    let mut stats = RunStats::default();
    let mut guesses: Vec<Vec<u8>> = Vec::new();
    fn descend<F>(
        v: &CounterVector,
        stages: &[GuessStage],
        depth: usize,
        profile: &CipherProfile,
        guesses: &mut Vec<Vec<u8>>,
        stats: &mut RunStats,
        emit: &mut F,
    ) -> Result<()>
    where
        F: FnMut(&[Vec<u8>], &CounterVector),
    {
        stats.max_live_vectors = stats.max_live_vectors.max(depth + 1);
        if depth == stages.len() {
            stats.emitted += 1;
            emit(guesses, v);
            return Ok(());
        }
        let stage = &stages[depth];
        for gi in 0..stage.guess_space(profile.cell_width) {
            let guess = stage.guess_vector(gi, profile.cell_width);
            let next = apply_stage(v, stage, &guess, profile)?;
            guesses.push(guess);
            descend(&next, stages, depth + 1, profile, guesses, stats, emit)?;
            guesses.pop();
        }
        Ok(())
    }
    descend(v0, stages, 0, profile, &mut guesses, &mut stats, &mut emit)?;
    Ok(stats)
}

/// Reference semantics: evaluates the full circuit per pair under one
/// complete guess assignment and counts terminal values directly.
pub fn naive_oracle(
    pairs: &[(State, State)],
    schedule: &GuessSchedule,
    full_guess: &[Vec<u8>],
    profile: &CipherProfile,
) -> Result<CounterVector> {
    if full_guess.len() != schedule.stages.len() {
        return Err(Error::Layout(format!(
            "need guesses for all {} stages",
            schedule.stages.len()
        )));
    }
    let mut v = CounterVector::zero(schedule.terminal.bits(profile.cell_width))?;
    let mut accs = [0u8; 256];
    for (pt, ct) in pairs {
        accs.fill(0);
        for (s, g) in schedule.stages.iter().zip(full_guess) {
            run_folds_scalar(s, g, profile, pt, ct, &mut accs);
        }
        v.add(
            index_of_layout(&schedule.terminal, profile.cell_width, pt, ct, &accs),
            1,
        );
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::generate_dataset;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn setup(seed: u64) -> (CipherProfile, RoundKeys, Vec<(State, State)>) {
        let profile = CipherProfile::desk_w4(6);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let keys = RoundKeys::random(&mut rng, &profile);
        let pairs = generate_dataset(&profile, &keys, 1 << 12, seed).unwrap();
        (profile, keys, pairs)
    }

    #[test]
    fn six_round_schedule_structure() {
        let profile = CipherProfile::desk_w4(6);
        let s = schedule_6round(&profile);
        assert_eq!(s.stages.len(), 11);
        assert_eq!(s.total_guessed_cells(), 11);
        assert_eq!(s.init.0.len(), 11);
        assert_eq!(s.terminal.0, vec![Field::Acc(ACC_H), Field::Acc(ACC_B)]);
        // Index space shrinks monotonically from 11 cells to 2.
        let sizes: Vec<usize> = s.stages.iter().map(|st| st.output.0.len()).collect();
        assert_eq!(sizes, vec![11, 10, 9, 8, 8, 7, 6, 5, 4, 3, 2]);
        // Third stage folds the inverse round-6 box at position 11.
        let f = &s.stages[2].folds[0];
        assert_eq!((f.sbox_round, f.sbox_pos, f.inverse), (6, 11, true));
        assert_eq!(s.stages[2].guesses, vec![k(7, 11)]);
    }

    #[test]
    fn seven_round_schedule_structure() {
        let profile = CipherProfile::desk_w4(7);
        let s = schedule_7round(&profile);
        assert_eq!(s.stages.len(), 15);
        assert_eq!(s.total_guessed_cells(), 23);
        assert_eq!(s.init.0.len(), 19);
        assert_eq!(s.terminal.0, vec![Field::Acc(ACC_B), Field::Acc(ACC_H)]);
        // Bulk stage: 9 guesses, output 15 cells.
        assert_eq!(s.stages[0].guesses.len(), 9);
        assert_eq!(s.stages[0].output.0.len(), 15);
        // Combined-key definitions are the diffusion rows.
        let k75 = s.combined.iter().find(|c| c.id == 5).unwrap();
        assert_eq!(k75.cells, vec![1, 3, 4, 9, 10, 14, 15]);
        assert_eq!(k75.round, 7);
        // Last stage: I12 = I11 ⊕ S⁻¹_{6,12}(acc ⊕ k7,12).
        let last = s.stages.last().unwrap();
        assert_eq!(last.guesses, vec![KeyCell::Combined(12)]);
        let f = &last.folds[0];
        assert_eq!((f.sbox_round, f.sbox_pos, f.inverse), (6, 12, true));
        assert_eq!(f.input, Field::Acc(12));
        assert_eq!(f.targets, vec![ACC_H]);
    }

    #[test]
    fn combined_key_value() {
        let profile = CipherProfile::desk_w4(7);
        let s = schedule_7round(&profile);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let keys = RoundKeys::random(&mut rng, &profile);
        let want = [1usize, 4, 6, 10, 11, 12, 15]
            .iter()
            .fold(0u8, |a, &i| a ^ keys.subkey(7).0[i]);
        assert_eq!(s.key_value(&KeyCell::Combined(2), &keys).unwrap(), want);
    }

    #[test]
    fn init_counters_trivial_cases() {
        let profile = CipherProfile::desk_w4(6);
        let layout = Layout(vec![Field::Plain(0), Field::Cipher(3)]);
        let v = init_counters(&[], &layout, &profile).unwrap();
        assert_eq!(v.total(), 0);
        let pt = State::unpack(0x1234, 4);
        let ct = State::unpack(0x9abc, 4);
        let v = init_counters(&[(pt, ct)], &layout, &profile).unwrap();
        assert_eq!(v.total(), 1);
        // index = pt[0] | ct[3] << 4
        let idx = (pt.0[0] as usize) | (ct.0[3] as usize) << 4;
        assert_eq!(v.counts()[idx], 1);
        assert!(init_counters(&[], &Layout(vec![Field::Acc(0)]), &profile).is_err());
    }

    #[test]
    fn init_counters_matches_recount() {
        let (profile, _, pairs) = setup(31);
        let layout = Layout(vec![
            Field::Plain(0),
            Field::Plain(5),
            Field::Cipher(2),
            Field::Cipher(12),
        ]);
        let v = init_counters(&pairs, &layout, &profile).unwrap();
        assert_eq!(v.total(), pairs.len() as u64);
        // Direct two-pass recount.
        for (x, &c) in v.counts().iter().enumerate() {
            let n = pairs
                .iter()
                .filter(|(pt, ct)| {
                    (pt.0[0] as usize
                        | (pt.0[5] as usize) << 4
                        | (ct.0[2] as usize) << 8
                        | (ct.0[12] as usize) << 12)
                        == x
                })
                .count() as u64;
            assert_eq!(c, n);
        }
    }

    #[test]
    fn apply_stage_single_point_hand_evaluation() {
        let profile = CipherProfile::desk_w2(6);
        let schedule = schedule_6round(&profile);
        let stage = &schedule.stages[0]; // guess k7[2], fold S⁻¹_6,2 into h
        let mut v = CounterVector::zero(stage.input.bits(2)).unwrap();
        // One pair with m7[2] = 3 sitting at field 7 of the layout.
        let m7_2 = 3_usize;
        let x = m7_2 << (2 * 7);
        v.add(x, 1);
        let guess = [0x1u8];
        let out = apply_stage(&v, stage, &guess, &profile).unwrap();
        assert_eq!(out.total(), 1);
        let folded = profile.sub_cell(6, 2, true, 3 ^ 1);
        let y = (folded as usize) << (2 * 10); // acc appended after 10 fields
        assert_eq!(out.counts()[y], 1);
        // Zero input stays zero.
        let z = CounterVector::zero(stage.input.bits(2)).unwrap();
        assert_eq!(apply_stage(&z, stage, &guess, &profile).unwrap().total(), 0);
    }

    #[test]
    fn stage_conserves_total_and_checks_layout() {
        let (profile, keys, pairs) = setup(7);
        let mut schedule = schedule_6round(&profile);
        for i in 0..8 {
            schedule.pin_true(i, &keys).unwrap();
        }
        let v = extract_counters(&pairs, &schedule, 8, &profile).unwrap();
        assert_eq!(v.total(), pairs.len() as u64);
        let out = apply_stage(&v, &schedule.stages[8], &[3], &profile).unwrap();
        assert_eq!(out.total(), pairs.len() as u64);
        assert!(apply_stage(&out, &schedule.stages[8], &[3], &profile).is_err());
    }

    #[test]
    fn zero_stage_schedule_emits_input() {
        let profile = CipherProfile::desk_w2(6);
        let schedule = schedule_6round(&profile);
        let v = CounterVector::from_counts(4, (0..16u64).collect()).unwrap();
        // Running from the end = no stages left.
        let mut seen = Vec::new();
        run_schedule(&v, &schedule, schedule.stages.len(), &profile, |g, out| {
            seen.push((g.to_vec(), out.clone()));
        })
        .unwrap();
        assert_eq!(seen.len(), 1);
        assert!(seen[0].0.is_empty());
        assert_eq!(seen[0].1, v);
    }

    #[test]
    fn one_stage_w2_has_four_guesses_conserving_totals() {
        let profile = CipherProfile::desk_w2(6);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let keys = RoundKeys::random(&mut rng, &profile);
        let pairs = generate_dataset(&profile, &keys, 200, 3).unwrap();
        let mut schedule = schedule_6round(&profile);
        for i in 0..10 {
            schedule.pin_true(i, &keys).unwrap();
        }
        let v = extract_counters(&pairs, &schedule, 10, &profile).unwrap();
        let mut n = 0;
        let stats = run_schedule(&v, &schedule, 10, &profile, |g, out| {
            assert_eq!(g.len(), 1);
            assert_eq!(out.total(), 200);
            n += 1;
        })
        .unwrap();
        assert_eq!(n, 4);
        assert_eq!(stats.emitted, 4);
        assert_eq!(stats.max_live_vectors, 2);
    }

    /// The module's central test: staged compression equals the per-pair
    /// oracle exactly, for every guess, on randomized reduced instances.
    #[test]
    fn run_schedule_matches_naive_oracle() {
        for seed in 0..6 {
            let (profile, keys, pairs) = setup(100 + seed);
            let mut schedule = schedule_6round(&profile);
            let pinned = 9; // leave two enumerated cells
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            for i in 0..pinned {
                // Mix true values with random ones; equivalence must hold
                // for any fixed assignment.
                if rng.gen_bool(0.5) {
                    schedule.pin_true(i, &keys).unwrap();
                } else {
                    schedule.pin(i, vec![rng.gen_range(0..16) as u8]).unwrap();
                }
            }
            let v = extract_counters(&pairs, &schedule, pinned, &profile).unwrap();
            run_schedule(&v, &schedule, pinned, &profile, |tail_guess, out| {
                let full: Vec<Vec<u8>> = schedule.stages[..pinned]
                    .iter()
                    .map(|s| s.pinned.clone().unwrap())
                    .chain(tail_guess.iter().cloned())
                    .collect();
                let want = naive_oracle(&pairs, &schedule, &full, &profile).unwrap();
                assert_eq!(out, &want);
            })
            .unwrap();
        }
    }

    /// Permuting independent stages leaves terminal counters unchanged.
    #[test]
    fn guess_order_independence() {
        let (profile, keys, pairs) = setup(55);
        let mut a = schedule_6round(&profile);
        for i in 0..11 {
            a.pin_true(i, &keys).unwrap();
        }
        let mut b = a.clone();
        b.stages.swap(1, 2); // two h-side stages commute
        b.stages.swap(5, 7); // two b-side stages commute
        let va = extract_counters(&pairs, &a, 11, &profile).unwrap();
        let vb = extract_counters(&pairs, &b, 11, &profile).unwrap();
        assert_eq!(va, vb);
    }

    #[test]
    fn seven_round_oracle_equivalence_reduced() {
        let profile = CipherProfile::desk_w4(7);
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let keys = RoundKeys::random(&mut rng, &profile);
        let pairs = generate_dataset(&profile, &keys, 1 << 12, 9).unwrap();
        let mut schedule = schedule_7round(&profile);
        let pinned = 13; // enumerate the last two combined keys
        for i in 0..pinned {
            schedule.pin_true(i, &keys).unwrap();
        }
        let v = extract_counters(&pairs, &schedule, pinned, &profile).unwrap();
        let mut count = 0;
        run_schedule(&v, &schedule, pinned, &profile, |tail, out| {
            count += 1;
            let full: Vec<Vec<u8>> = schedule.stages[..pinned]
                .iter()
                .map(|s| s.pinned.clone().unwrap())
                .chain(tail.iter().cloned())
                .collect();
            let want = naive_oracle(&pairs, &schedule, &full, &profile).unwrap();
            assert_eq!(out, &want);
        })
        .unwrap();
        assert_eq!(count, 256);
    }

    #[test]
    fn schedule_json_round_trip() {
        let profile = CipherProfile::desk_w4(7);
        let s = schedule_7round(&profile);
        let text = serde_json::to_string_pretty(&s).unwrap();
        let back: GuessSchedule = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unpinned_prefix_rejected() {
        let (profile, _, pairs) = setup(1);
        let schedule = schedule_6round(&profile);
        assert!(extract_counters(&pairs, &schedule, 3, &profile).is_err());
    }
}
