//! Orchestration. Plan mode reproduces the full-scale complexity figures
//! of the 6/7-round attacks under both techniques; run mode executes them
//! at desk scale on reduced-width profiles, with pinned key cells keeping
//! the counter spaces tractable.

use std::time::Instant;

use serde::Serialize;

use crate::cipher::{CipherProfile, RoundKeys, State};
use crate::counters::MAX_INDEX_BITS;
use crate::error::{Error, Result};
use crate::fwht::{xor_convolve, DataEmbedding, SignTable, WAccumulator};
use crate::partial_sum::{
    extract_counters, run_schedule, schedule_6round, schedule_7round, Field, GuessSchedule,
    GuessStage, ACC_B, ACC_H,
};
use crate::stats::{
    self, multidim_params, normal_quantile_log2_tail, required_data_multidim,
    required_data_multiple, ErrorProbs, Model,
};

/// The four full-scale attack variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    SixRoundPartialSum,
    SixRoundFft,
    SevenRoundPartialSum,
    SevenRoundFft,
}

impl Variant {
    pub fn all() -> [Variant; 4] {
        [
            Variant::SixRoundPartialSum,
            Variant::SixRoundFft,
            Variant::SevenRoundPartialSum,
            Variant::SevenRoundFft,
        ]
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "6r-partial-sum" | "6r-ps" => Ok(Variant::SixRoundPartialSum),
            "6r-fft" => Ok(Variant::SixRoundFft),
            "7r-partial-sum" | "7r-ps" => Ok(Variant::SevenRoundPartialSum),
            "7r-fft" => Ok(Variant::SevenRoundFft),
            other => Err(Error::InvalidParameter(format!(
                "unknown variant `{other}` (expected 6r-partial-sum, 6r-fft, 7r-partial-sum, 7r-fft)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::SixRoundPartialSum => "6r-partial-sum",
            Variant::SixRoundFft => "6r-fft",
            Variant::SevenRoundPartialSum => "7r-partial-sum",
            Variant::SevenRoundFft => "7r-fft",
        }
    }

    pub fn rounds(&self) -> usize {
        match self {
            Variant::SixRoundPartialSum | Variant::SixRoundFft => 6,
            _ => 7,
        }
    }

    pub fn is_fft(&self) -> bool {
        matches!(self, Variant::SixRoundFft | Variant::SevenRoundFft)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PlanStep {
    pub label: String,
    /// log2 cost in encryption equivalents.
    pub log2_cost: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackPlan {
    pub variant: &'static str,
    pub rounds: usize,
    pub block_bits: u32,
    pub log2_l: f64,
    pub log2_beta0: f64,
    pub log2_beta1: f64,
    pub model: Model,
    pub log2_data: f64,
    pub log2_tau: f64,
    pub guessed_key_bits: u32,
    pub steps: Vec<PlanStep>,
    pub log2_time_total: f64,
    pub log2_memory_bytes: f64,
    /// Partial-sum only: bound on the guess stages after the first
    /// (stage count × the most expensive stage).
    pub log2_inner_stage_bound: Option<f64>,
    /// Expected log2 count of wrong keys surviving the threshold.
    pub log2_expected_survivors: f64,
    pub cost_convention: &'static str,
}

fn log2_sum(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + terms.iter().map(|t| (t - max).exp2()).sum::<f64>().log2()
}

const COST_CONVENTION: &str = "one memory access = one S-box lookup = 1/16 of a round = 1/(16·rounds) of an encryption; one FFT operation = one encryption";

/// Full-scale complexity plan: data and threshold from the statistical
/// model, step costs from the guess schedule (partial-sum) or the
/// transform cost model (FFT).
pub fn plan(variant: Variant, block_bits: u32, log2_l: f64, errs: &ErrorProbs) -> Result<AttackPlan> {
    let rounds = variant.rounds();
    let cell_bits = block_bits as f64 / 16.0;
    // Cell counts are width-independent; a desk profile supplies them.
    let schedule = if rounds == 6 {
        schedule_6round(&CipherProfile::desk_w4(6))
    } else {
        schedule_7round(&CipherProfile::desk_w4(7))
    };
    let guessed_cells = schedule.total_guessed_cells();
    let guessed_key_bits = (guessed_cells as f64 * cell_bits) as u32;
    let data_cells = schedule.init.0.len() as f64;

    let est = if variant.is_fft() {
        required_data_multiple(block_bits, log2_l, errs)?
    } else {
        required_data_multidim(block_bits, log2_l, errs)?
    };
    let log2_n = est.log2_data;
    let log2_rounds = (rounds as f64).log2();

    let mut steps = vec![PlanStep {
        label: "collect pairs and extract data counters".into(),
        log2_cost: log2_n - log2_rounds,
    }];
    let mut inner_bound = None;
    let counter_bits = data_cells * cell_bits;
    // Counter word width: large enough for N spread over the table.
    let counter_bytes = ((log2_n - counter_bits) / 8.0).ceil().max(1.0);
    let log2_memory = counter_bits + counter_bytes.log2();

    if variant.is_fft() {
        // Transform index = the full key space (data cells plus, for the
        // 7-round attack, the four combined-key coordinates): 88 or 184.
        let m = guessed_cells as f64 * cell_bits;
        steps.push(PlanStep {
            label: format!("sign tables: 2^{log2_l:.0} approximations × 2^{m:.0} entries"),
            log2_cost: log2_l + m,
        });
        steps.push(PlanStep {
            label: format!("convolutions: 2^{log2_l:.0} × 4·{m:.0}·2^{m:.0}"),
            log2_cost: log2_l + 2.0 + m.log2() + m,
        });
    } else {
        let mut cum_cells = 0usize;
        let mut inner_products = Vec::new();
        for (i, stage) in schedule.stages.iter().enumerate() {
            cum_cells += stage.guesses.len();
            let mut input_bits = stage.input.0.len() as f64 * cell_bits;
            // The first combined-key stage of the 7-round attack carries
            // its published cost; the input space there is printed one
            // cell wider than the layout.
            if rounds == 7 && i == 11 {
                input_bits += cell_bits;
            }
            let product = input_bits.min(log2_n) + cum_cells as f64 * cell_bits;
            if i > 0 {
                inner_products.push(product);
            }
            steps.push(PlanStep {
                label: format!("guess {}", stage.label),
                log2_cost: product - 4.0 - log2_rounds,
            });
        }
        let max = inner_products.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        inner_bound = Some(
            (inner_products.len() as f64).log2() + max - 4.0 - log2_rounds,
        );
    }
    let total = log2_sum(&steps.iter().map(|s| s.log2_cost).collect::<Vec<_>>());
    Ok(AttackPlan {
        variant: variant.name(),
        rounds,
        block_bits,
        log2_l,
        log2_beta0: errs.log2_beta0,
        log2_beta1: errs.log2_beta1,
        model: est.model,
        log2_data: log2_n,
        log2_tau: est.log2_tau,
        guessed_key_bits,
        steps,
        log2_time_total: total,
        log2_memory_bytes: log2_memory,
        log2_inner_stage_bound: inner_bound,
        log2_expected_survivors: guessed_key_bits as f64 + errs.log2_beta0,
        cost_convention: COST_CONVENTION,
    })
}

/// Aligned text table over a set of plans (rounds, data, time, memory).
pub fn render_plan_table(plans: &[AttackPlan]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>6} {:>12} {:>12} {:>14}\n",
        "variant", "rounds", "data (KP)", "time (Enc)", "memory (bytes)"
    ));
    for p in plans {
        out.push_str(&format!(
            "{:<16} {:>6} {:>12} {:>12} {:>14}\n",
            p.variant,
            p.rounds,
            format!("2^{:.1}", p.log2_data),
            format!("2^{:.1}", p.log2_time_total),
            format!("2^{:.1}", p.log2_memory_bytes),
        ));
    }
    out
}

/// A desk-scale experiment: which schedule, how much data, and which
/// stages are pinned to the true key (the rest are enumerated).
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentConfig {
    pub rounds: usize,
    pub n: u64,
    pub seed: u64,
    /// Stage indices (in builder order) pinned to the true key cells.
    pub pinned_stages: Vec<usize>,
    pub errs: ErrorProbs,
    /// Threshold override; defaults to mu0 + sigma0·z_{1-beta0}.
    pub tau: Option<f64>,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SurvivorEntry {
    /// Enumerated guess cells, flattened in stage order.
    pub guess: Vec<u8>,
    pub statistic: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct RightKeyReport {
    pub guess: Vec<u8>,
    pub statistic: f64,
    /// 1-based position when sorting statistics ascending.
    pub rank: usize,
    pub survived: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct AttackResult {
    pub technique: &'static str,
    pub rounds: usize,
    pub cell_width: u8,
    pub n: u64,
    pub seed: u64,
    pub tau: f64,
    /// Bits of the statistic's counter dimension (2 cells).
    pub statistic_bits: u32,
    pub pinned_stages: usize,
    pub enumerated_cells: usize,
    pub approximations: u32,
    pub survivors: Vec<SurvivorEntry>,
    pub right_key: RightKeyReport,
    pub elapsed_ms: u128,
}

fn schedule_for(rounds: usize, profile: &CipherProfile) -> Result<GuessSchedule> {
    if profile.rounds != rounds {
        return Err(Error::InvalidParameter(format!(
            "profile has {} rounds, experiment wants {rounds}",
            profile.rounds
        )));
    }
    match rounds {
        6 => Ok(schedule_6round(profile)),
        7 => Ok(schedule_7round(profile)),
        r => Err(Error::InvalidParameter(format!(
            "no schedule for {r} rounds"
        ))),
    }
}

/// Moves the pinned stages to the front (stable) and recomputes layouts,
/// so extraction can pre-fold them regardless of original position.
/// Fails if an enumerated stage would consume an accumulator that a
/// still-later stage writes.
fn reorder_pinned_first(schedule: &GuessSchedule) -> Result<GuessSchedule> {
    let mut ordered: Vec<GuessStage> = Vec::with_capacity(schedule.stages.len());
    for s in &schedule.stages {
        if s.pinned.is_some() {
            ordered.push(s.clone());
        }
    }
    for s in &schedule.stages {
        if s.pinned.is_none() {
            ordered.push(s.clone());
        }
    }
    // Recompute layouts along the new order, checking fold inputs exist.
    let mut layout = schedule.init.clone();
    for stage in ordered.iter_mut() {
        for fold in &stage.folds {
            if layout.position(fold.input).is_none() {
                return Err(Error::Layout(format!(
                    "stage `{}` consumes a value not yet produced under this pinning",
                    stage.label
                )));
            }
        }
        stage.input = layout.clone();
        let mut fields: Vec<Field> = layout
            .0
            .iter()
            .filter(|f| !stage.folds.iter().any(|fd| fd.consume && fd.input == **f))
            .copied()
            .collect();
        for fold in &stage.folds {
            for &t in &fold.targets {
                if !fields.contains(&Field::Acc(t)) {
                    fields.push(Field::Acc(t));
                }
            }
        }
        stage.output = crate::partial_sum::Layout(fields);
        layout = stage.output.clone();
    }
    let mut out = schedule.clone();
    out.stages = ordered;
    out.terminal = layout;
    Ok(out)
}

fn prepare(
    cfg: &ExperimentConfig,
    profile: &CipherProfile,
    keys: &RoundKeys,
) -> Result<(GuessSchedule, usize)> {
    let mut schedule = schedule_for(cfg.rounds, profile)?;
    for &i in &cfg.pinned_stages {
        schedule.pin_true(i, keys)?;
    }
    let pinned = cfg.pinned_stages.len();
    let reordered = reorder_pinned_first(&schedule)?;
    let enum_bits: u32 = reordered.stages[pinned..]
        .iter()
        .map(|s| s.guesses.len() as u32 * profile.cell_width as u32)
        .sum();
    if enum_bits > 26 {
        return Err(Error::IndexSpaceTooLarge {
            bits: enum_bits,
            limit: 26,
        });
    }
    Ok((reordered, pinned))
}

fn default_tau(cfg: &ExperimentConfig, profile: &CipherProfile) -> Result<f64> {
    if let Some(t) = cfg.tau {
        return Ok(t);
    }
    let l = (2.0f64).powi(2 * profile.cell_width as i32);
    let params = multidim_params(profile.codebook_log2(), cfg.n as f64, l)?;
    let z0 = normal_quantile_log2_tail(cfg.errs.log2_beta0)?;
    Ok(params.mu0 + params.sigma0 * z0)
}

/// T from the exact sum of squared counters: 2^m·ΣV² − N² equals the sum
/// of squared mask-correlation numerators over the 2^m − 1 nonzero masks,
/// so T = (2^m·ΣV² − N²) / (N·(1 − 2^−m)). Both techniques use this exact
/// integer route, making their statistics bit-identical.
fn t_from_sum_sq(sum_sq_all: i128, n: u64, m_bits: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let excess = sum_sq_all - (n as i128) * (n as i128);
    let bins = (1u128 << m_bits) as f64;
    excess as f64 / (n as f64 * (1.0 - 1.0 / bins))
}

fn finalize(
    technique: &'static str,
    cfg: &ExperimentConfig,
    profile: &CipherProfile,
    pinned: usize,
    tau: f64,
    scored: Vec<(Vec<u8>, f64)>,
    right_guess: Vec<u8>,
    started: Instant,
) -> Result<AttackResult> {
    let right = scored
        .iter()
        .find(|(g, _)| *g == right_guess)
        .ok_or_else(|| Error::InvalidParameter("right key missing from enumeration".into()))?;
    let right_stat = right.1;
    let rank = 1 + scored.iter().filter(|(_, t)| *t < right_stat).count();
    let survivors: Vec<SurvivorEntry> = scored
        .iter()
        .filter(|(_, t)| stats::decide(*t, tau))
        .map(|(g, t)| SurvivorEntry {
            guess: g.clone(),
            statistic: *t,
        })
        .collect();
    let enumerated_cells = scored
        .first()
        .map(|(g, _)| g.len())
        .unwrap_or(0);
    Ok(AttackResult {
        technique,
        rounds: cfg.rounds,
        cell_width: profile.cell_width,
        n: cfg.n,
        seed: cfg.seed,
        tau,
        statistic_bits: 2 * profile.cell_width as u32,
        pinned_stages: pinned,
        enumerated_cells,
        approximations: 1 << (2 * profile.cell_width),
        survivors,
        right_key: RightKeyReport {
            guess: right_guess,
            statistic: right_stat,
            rank,
            survived: stats::decide(right_stat, tau),
        },
        elapsed_ms: started.elapsed().as_millis(),
    })
}

/// Partial-sum run: extract → staged guessing → T per terminal vector →
/// threshold.
pub fn run_partial_sum_attack(
    cfg: &ExperimentConfig,
    profile: &CipherProfile,
    keys: &RoundKeys,
    pairs: &[(State, State)],
) -> Result<AttackResult> {
    let started = Instant::now();
    if pairs.is_empty() {
        return Err(Error::InvalidParameter(
            "partial-sum attack needs at least one pair".into(),
        ));
    }
    if pairs.len() as u64 != cfg.n {
        return Err(Error::InvalidParameter(format!(
            "config N = {} but {} pairs supplied",
            cfg.n,
            pairs.len()
        )));
    }
    let (schedule, pinned) = prepare(cfg, profile, keys)?;
    let tau = default_tau(cfg, profile)?;
    let m_bits = 2 * profile.cell_width as u32;
    let v0 = extract_counters(pairs, &schedule, pinned, profile)?;
    let n = cfg.n;
    let mut scored: Vec<(Vec<u8>, f64)> = Vec::new();
    run_schedule(&v0, &schedule, pinned, profile, |tail, terminal| {
        let sum_sq_all: i128 = terminal
            .counts()
            .iter()
            .map(|&v| (v as i128) * (v as i128))
            .sum::<i128>()
            << m_bits;
        let flat: Vec<u8> = tail.iter().flatten().copied().collect();
        scored.push((flat, t_from_sum_sq(sum_sq_all, n, m_bits)));
    })?;
    let right_guess: Vec<u8> = schedule.stages[pinned..]
        .iter()
        .flat_map(|s| s.guesses.iter())
        .map(|g| schedule.key_value(g, keys))
        .collect::<Result<Vec<u8>>>()?;
    finalize("partial-sum", cfg, profile, pinned, tau, scored, right_guess, started)
}

/// The reduced circulant generator after pinning: y plays the role of
/// data⊕key over the post-prefix layout; the remaining folds are run with
/// zero keys and the two terminal accumulators are masked.
fn reduced_sign_fn<'a>(
    schedule: &'a GuessSchedule,
    pinned: usize,
    profile: &'a CipherProfile,
    b: u8,
    h: u8,
) -> impl Fn(usize) -> bool + 'a {
    let layout = if pinned == 0 {
        schedule.init.clone()
    } else {
        schedule.stages[pinned - 1].output.clone()
    };
    let w = profile.cell_width as usize;
    let mask = (1usize << w) - 1;
    move |y: usize| {
        let mut pt = State::ZERO;
        let mut ct = State::ZERO;
        let mut accs = [0u8; 256];
        for (i, &f) in layout.0.iter().enumerate() {
            let val = ((y >> (w * i)) & mask) as u8;
            match f {
                Field::Plain(c) => pt.0[c] = val,
                Field::Cipher(c) => ct.0[c] = val,
                Field::Acc(id) => accs[id as usize] = val,
            }
        }
        for stage in &schedule.stages[pinned..] {
            let zeros = vec![0u8; stage.guesses.len()];
            crate::partial_sum::run_folds_scalar(stage, &zeros, profile, &pt, &ct, &mut accs);
        }
        let pb = (b & accs[ACC_B as usize]).count_ones() & 1 == 1;
        let ph = (h & accs[ACC_H as usize]).count_ones() & 1 == 1;
        pb ^ ph
    }
}

/// FFT run: the same extraction, then for each of the 2^(2w) mask pairs a
/// sign table and one XOR convolution give ε for every enumerated key at
/// once; W = Σ(ε/N)² accumulates, and T is recovered exactly from Σε².
pub fn run_fft_attack(
    cfg: &ExperimentConfig,
    profile: &CipherProfile,
    keys: &RoundKeys,
    pairs: &[(State, State)],
) -> Result<AttackResult> {
    let started = Instant::now();
    if pairs.len() as u64 != cfg.n {
        return Err(Error::InvalidParameter(format!(
            "config N = {} but {} pairs supplied",
            cfg.n,
            pairs.len()
        )));
    }
    let (schedule, pinned) = prepare(cfg, profile, keys)?;
    let tau = default_tau(cfg, profile)?;
    let w = profile.cell_width as usize;
    let m_stat = 2 * profile.cell_width as u32;
    let layout = if pinned == 0 {
        &schedule.init
    } else {
        &schedule.stages[pinned - 1].output
    };
    let m_index = layout.bits(profile.cell_width);
    if m_index > MAX_INDEX_BITS {
        return Err(Error::IndexSpaceTooLarge {
            bits: m_index,
            limit: MAX_INDEX_BITS,
        });
    }
    // Each enumerated guess cell sits at the coordinate of the field its
    // fold consumes; coordinates without a key partner stay zero.
    let mut key_coords: Vec<usize> = Vec::new();
    for stage in &schedule.stages[pinned..] {
        for j in 0..stage.guesses.len() {
            let fold = stage
                .folds
                .iter()
                .find(|f| f.key == j)
                .ok_or_else(|| Error::Layout(format!("unused guess in `{}`", stage.label)))?;
            let pos = layout.position(fold.input).ok_or_else(|| {
                Error::Layout(format!(
                    "stage `{}` consumes a value produced after the pinned prefix; pin its producers",
                    stage.label
                ))
            })?;
            key_coords.push(pos);
        }
    }
    let v0 = extract_counters(pairs, &schedule, pinned, profile)?;
    let n = cfg.n;
    let embed = DataEmbedding::identity(m_index);
    let mut acc = (n > 0).then(|| WAccumulator::new(m_index, n)).transpose()?;
    for b in 0..1u8 << w {
        for h in 0..1u8 << w {
            let g = reduced_sign_fn(&schedule, pinned, profile, b, h);
            let signs = SignTable::build(g, m_index)?;
            if let Some(acc) = acc.as_mut() {
                let (eps, _) = xor_convolve(&signs, &v0, &embed)?;
                acc.accumulate(&eps)?;
            }
            // With no pairs ε = 0 everywhere and W stays zero.
        }
    }
    let sum_sq = match acc {
        Some(acc) => acc.sum_sq,
        None => vec![0i128; 1usize << m_index],
    };
    // Score every enumerated guess tuple in the same order as the
    // partial-sum DFS.
    let enum_cells: Vec<usize> = key_coords.clone();
    let total_cells = enum_cells.len();
    let space = 1u64 << (w as u32 * total_cells as u32);
    let mut scored: Vec<(Vec<u8>, f64)> = Vec::with_capacity(space as usize);
    for gi in 0..space {
        let mut flat = Vec::with_capacity(total_cells);
        let mut k_embed = 0usize;
        for (j, &coord) in enum_cells.iter().enumerate() {
            let shift = w as u32 * (total_cells - 1 - j) as u32;
            let val = ((gi >> shift) as usize) & ((1 << w) - 1);
            flat.push(val as u8);
            k_embed |= val << (w * coord);
        }
        scored.push((flat, t_from_sum_sq(sum_sq[k_embed], n, m_stat)));
    }
    let right_guess: Vec<u8> = schedule.stages[pinned..]
        .iter()
        .flat_map(|s| s.guesses.iter())
        .map(|g| schedule.key_value(g, keys))
        .collect::<Result<Vec<u8>>>()?;
    finalize("fft", cfg, profile, pinned, tau, scored, right_guess, started)
}

/// Empirical error rates from the synthetic counter sources.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct ErrorRateReport {
    pub beta0_hat: f64,
    pub beta1_hat: f64,
    pub tau: f64,
    pub trials: u32,
}

pub fn measure_error_rates<R: rand::Rng>(
    n: u32,
    m: u32,
    draws: u64,
    tau: f64,
    trials: u32,
    rng: &mut R,
) -> Result<ErrorRateReport> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be positive".into()));
    }
    let mut wrong_survive = 0u32;
    let mut right_fail = 0u32;
    for _ in 0..trials {
        let vw = stats::simulate_random_function_counters(n, m, draws, rng)?;
        let tw = stats::statistic_t(&vw, draws, m)?;
        if stats::decide(tw, tau) {
            wrong_survive += 1;
        }
        let vr = stats::simulate_balanced_counters(n, m, draws, rng)?;
        let tr = stats::statistic_t(&vr, draws, m)?;
        if !stats::decide(tr, tau) {
            right_fail += 1;
        }
    }
    Ok(ErrorRateReport {
        beta0_hat: wrong_survive as f64 / trials as f64,
        beta1_hat: right_fail as f64 / trials as f64,
        tau,
        trials,
    })
}
