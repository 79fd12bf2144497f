//! Procedural token tasks with paired corrupted inputs.
//!
//! Every task emits fixed-length sequences over its own exclusive vocabulary
//! region plus the two shared structural tokens. Each sample carries a clean
//! sequence, a corrupted twin that differs before the answer position, the
//! answer position itself, and the correct/incorrect answer tokens needed by
//! logit-difference metrics and interchange ablation.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{derive_seed, seeded_rng};

/// Shared structural filler token.
pub const FILL: u32 = 0;
/// Shared structural separator token.
pub const SEP: u32 = 1;
/// First token id available to task regions.
pub const FIRST_REGION_TOKEN: u32 = 2;

/// A half-open token-id range `[start, start + len)` owned by one task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabRegion {
    pub start: u32,
    pub len: u32,
}

impl VocabRegion {
    pub fn new(start: u32, len: u32) -> Self {
        VocabRegion { start, len }
    }

    pub fn end(&self) -> u32 {
        self.start + self.len
    }

    pub fn contains(&self, tok: u32) -> bool {
        tok >= self.start && tok < self.end()
    }

    pub fn overlaps(&self, other: &VocabRegion) -> bool {
        self.start < other.end() && other.start < self.end()
    }
}

/// One clean/corrupted input pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchedPair {
    pub clean: Vec<u32>,
    pub corrupted: Vec<u32>,
    pub answer_pos: usize,
    pub correct_token: u32,
    pub incorrect_token: u32,
}

impl PatchedPair {
    pub fn validate(&self) -> Result<()> {
        if self.clean.len() != self.corrupted.len() {
            return Err(Error::InvalidArgument("pair length mismatch".into()));
        }
        if self.answer_pos >= self.clean.len() {
            return Err(Error::InvalidArgument("answer_pos out of range".into()));
        }
        let differs_before = self.clean[..self.answer_pos]
            .iter()
            .zip(&self.corrupted[..self.answer_pos])
            .any(|(a, b)| a != b);
        if !differs_before {
            return Err(Error::InvalidArgument(
                "corruption must differ before the answer position".into(),
            ));
        }
        if self.correct_token == self.incorrect_token {
            return Err(Error::InvalidArgument("correct == incorrect token".into()));
        }
        Ok(())
    }
}

/// Task definition. All variants produce sequences of their `seq_len`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum TaskSpec {
    /// `[.., A, B, .., A] -> B`: recall the token that followed the earlier
    /// occurrence of the repeated token.
    Induction { region: VocabRegion, seq_len: usize, seed: u64 },
    /// `[v1..vk, SEP, vk..v2] -> v1`: continue emitting the list reversed.
    Reverse { region: VocabRegion, list_len: usize, seed: u64 },
    /// `[.., YEAR(y), SEP] -> YEAR(y+1)`: continue past the start year.
    GreaterThan { region: VocabRegion, seq_len: usize, seed: u64 },
    /// Parenthesized and/or/not expression over truth tokens -> truth token.
    BoolExpr { region: VocabRegion, seq_len: usize, seed: u64 },
    /// `[.., Da, OP, Db, EQ] -> D((a op b) mod m)` with op in {+, -}.
    ArithmeticMod { region: VocabRegion, modulus: u32, seq_len: usize, seed: u64 },
    /// `[A, B, .., B, SEP] -> A`: name the non-repeated entity.
    IoiLike { region: VocabRegion, seq_len: usize, seed: u64 },
    /// Weighted blend of component tasks sharing one sequence length.
    Mixture { components: Vec<(TaskSpec, f64)>, seed: u64 },
}

// bool_expr token offsets within its region
const B_TRUE: u32 = 0;
const B_FALSE: u32 = 1;
const B_AND: u32 = 2;
const B_OR: u32 = 3;
const B_NOT: u32 = 4;
const B_LP: u32 = 5;
const B_RP: u32 = 6;
pub const BOOL_REGION_LEN: u32 = 7;

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let check_region = |r: &VocabRegion, min_len: u32, what: &str| -> Result<()> {
            if r.start < FIRST_REGION_TOKEN {
                return Err(Error::InvalidArgument(format!(
                    "{what}: region must start at or after {FIRST_REGION_TOKEN}"
                )));
            }
            if r.len < min_len {
                return Err(Error::InvalidArgument(format!(
                    "{what}: vocab region too small ({} < {min_len})",
                    r.len
                )));
            }
            Ok(())
        };
        match self {
            TaskSpec::Induction { region, seq_len, .. } => {
                if *seq_len < 4 {
                    return Err(Error::InvalidArgument("induction needs seq_len >= 4".into()));
                }
                let m_max = (seq_len.div_ceil(2)).max(seq_len - 2) as u32;
                check_region(region, m_max.max(3), "induction")?;
            }
            TaskSpec::Reverse { region, list_len, .. } => {
                if *list_len < 2 {
                    return Err(Error::InvalidArgument("reverse needs list_len >= 2".into()));
                }
                check_region(region, *list_len as u32, "reverse")?;
            }
            TaskSpec::GreaterThan { region, seq_len, .. } => {
                check_region(region, 3, "greater_than")?;
                if *seq_len < 3 {
                    return Err(Error::InvalidArgument("greater_than needs seq_len >= 3".into()));
                }
            }
            TaskSpec::BoolExpr { region, seq_len, .. } => {
                check_region(region, BOOL_REGION_LEN, "bool_expr")?;
                if *seq_len < 8 {
                    return Err(Error::InvalidArgument("bool_expr needs seq_len >= 8".into()));
                }
            }
            TaskSpec::ArithmeticMod { region, modulus, seq_len, .. } => {
                if *modulus < 2 {
                    return Err(Error::InvalidArgument("modulus must be >= 2".into()));
                }
                check_region(region, modulus + 3, "arithmetic_mod")?;
                if *seq_len < 4 {
                    return Err(Error::InvalidArgument("arithmetic_mod needs seq_len >= 4".into()));
                }
            }
            TaskSpec::IoiLike { region, seq_len, .. } => {
                check_region(region, 2, "ioi_like")?;
                if *seq_len < 4 {
                    return Err(Error::InvalidArgument("ioi_like needs seq_len >= 4".into()));
                }
            }
            TaskSpec::Mixture { components, .. } => {
                if components.is_empty() {
                    return Err(Error::InvalidArgument("empty mixture".into()));
                }
                let total: f64 = components.iter().map(|(_, w)| w).sum();
                if (total - 1.0).abs() > 1e-9 || components.iter().any(|(_, w)| *w <= 0.0) {
                    return Err(Error::InvalidArgument(
                        "mixture weights must be positive and sum to 1".into(),
                    ));
                }
                let len = components[0].0.seq_len();
                for (c, _) in components {
                    c.validate()?;
                    if c.seq_len() != len {
                        return Err(Error::InvalidArgument(
                            "mixture components must share one sequence length".into(),
                        ));
                    }
                    if matches!(c, TaskSpec::Mixture { .. }) {
                        return Err(Error::InvalidArgument("nested mixtures not supported".into()));
                    }
                }
                for i in 0..components.len() {
                    for j in (i + 1)..components.len() {
                        let (a, b) = (components[i].0.region(), components[j].0.region());
                        if a.overlaps(&b) {
                            return Err(Error::InvalidArgument(
                                "mixture component vocab regions overlap".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        match self {
            TaskSpec::Induction { seq_len, .. }
            | TaskSpec::GreaterThan { seq_len, .. }
            | TaskSpec::BoolExpr { seq_len, .. }
            | TaskSpec::ArithmeticMod { seq_len, .. }
            | TaskSpec::IoiLike { seq_len, .. } => *seq_len,
            TaskSpec::Reverse { list_len, .. } => 2 * list_len,
            TaskSpec::Mixture { components, .. } => components[0].0.seq_len(),
        }
    }

    fn region(&self) -> VocabRegion {
        match self {
            TaskSpec::Induction { region, .. }
            | TaskSpec::Reverse { region, .. }
            | TaskSpec::GreaterThan { region, .. }
            | TaskSpec::BoolExpr { region, .. }
            | TaskSpec::ArithmeticMod { region, .. }
            | TaskSpec::IoiLike { region, .. } => *region,
            TaskSpec::Mixture { .. } => unreachable!("mixture has no single region"),
        }
    }

    fn base_seed(&self) -> u64 {
        match self {
            TaskSpec::Induction { seed, .. }
            | TaskSpec::Reverse { seed, .. }
            | TaskSpec::GreaterThan { seed, .. }
            | TaskSpec::BoolExpr { seed, .. }
            | TaskSpec::ArithmeticMod { seed, .. }
            | TaskSpec::IoiLike { seed, .. }
            | TaskSpec::Mixture { seed, .. } => *seed,
        }
    }

    /// Smallest vocabulary size that accommodates this task's tokens.
    pub fn min_vocab_size(&self) -> usize {
        match self {
            TaskSpec::Mixture { components, .. } => components
                .iter()
                .map(|(c, _)| c.min_vocab_size())
                .max()
                .unwrap_or(FIRST_REGION_TOKEN as usize),
            _ => self.region().end() as usize,
        }
    }

    /// Deterministic sample set for `(self, n, seed)`.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Vec<PatchedPair>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidArgument("need n >= 1 samples".into()));
        }
        let root = derive_seed(seed, &format!("taskgen.{}", self.base_seed()));
        (0..n)
            .map(|i| {
                let mut rng = seeded_rng(root, &format!("sample.{i}"));
                self.sample(&mut rng)
            })
            .collect()
    }

    fn sample(&self, rng: &mut ChaCha12Rng) -> Result<PatchedPair> {
        match self {
            TaskSpec::Mixture { components, .. } => {
                let mut pick: f64 = rng.gen_range(0.0..1.0);
                for (c, w) in components {
                    pick -= w;
                    if pick <= 0.0 {
                        return c.sample(rng);
                    }
                }
                components.last().unwrap().0.sample(rng)
            }
            _ => {
                // A freshly sampled clean sequence is almost always
                // corruptible; the rare exception (a boolean expression
                // insensitive to its pre-answer leaves) is resampled.
                for _ in 0..100 {
                    let clean = self.sample_clean(rng)?;
                    let Ok((corrupted, incorrect)) = self.corrupt(&clean, rng) else {
                        continue;
                    };
                    let pair = PatchedPair {
                        answer_pos: clean.len() - 1,
                        correct_token: self
                            .solve(&clean)
                            .expect("generator output must be solvable"),
                        clean,
                        corrupted,
                        incorrect_token: incorrect,
                    };
                    pair.validate()?;
                    return Ok(pair);
                }
                Err(Error::InvalidArgument(
                    "could not sample a corruptible sequence".into(),
                ))
            }
        }
    }

    fn sample_clean(&self, rng: &mut ChaCha12Rng) -> Result<Vec<u32>> {
        match self {
            TaskSpec::Induction { region, seq_len, .. } => {
                // a distinct random segment followed by its own repetition,
                // cut off right before the answer; the repetition offset
                // varies per sample so position alone never gives the answer
                let len = *seq_len;
                let m_lo = len.div_ceil(2);
                let m_hi = m_lo.max(len - 2);
                let m = rng.gen_range(m_lo..=m_hi);
                let mut pool: Vec<u32> = (region.start..region.end()).collect();
                pool.shuffle(rng);
                let segment = &pool[..m];
                let mut seq = Vec::with_capacity(len);
                seq.extend_from_slice(segment);
                for j in 0..(len - m) {
                    seq.push(segment[j]);
                }
                Ok(seq)
            }
            TaskSpec::Reverse { region, list_len, .. } => {
                let mut all: Vec<u32> = (region.start..region.end()).collect();
                all.shuffle(rng);
                let values = &all[..*list_len];
                Ok(reverse_template(values))
            }
            TaskSpec::GreaterThan { region, seq_len, .. } => {
                let y = rng.gen_range(0..region.len - 1);
                let mut seq = vec![FILL; *seq_len];
                seq[*seq_len - 2] = region.start + y;
                seq[*seq_len - 1] = SEP;
                Ok(seq)
            }
            TaskSpec::BoolExpr { region, seq_len, .. } => {
                let leaf = |rng: &mut ChaCha12Rng| {
                    region.start + if rng.gen_bool(0.5) { B_TRUE } else { B_FALSE }
                };
                let op = |rng: &mut ChaCha12Rng| {
                    region.start + if rng.gen_bool(0.5) { B_AND } else { B_OR }
                };
                let template = rng.gen_range(0..4u8);
                let (x1, x2, x3) = (leaf(rng), leaf(rng), leaf(rng));
                let (o1, o2) = (op(rng), op(rng));
                let (lp, rp, not) =
                    (region.start + B_LP, region.start + B_RP, region.start + B_NOT);
                let expr = match template {
                    0 => vec![lp, x1, o1, x2, rp, o2, x3],
                    1 => vec![lp, not, x1, o1, x2, rp, o2, x3],
                    2 => vec![x1, o1, lp, x2, o2, x3, rp],
                    _ => vec![not, lp, x1, o1, x2, rp, o2, x3],
                };
                if expr.len() > *seq_len {
                    return Err(Error::InvalidArgument("bool_expr seq_len too small".into()));
                }
                let mut seq = vec![FILL; seq_len - expr.len()];
                seq.extend(expr);
                Ok(seq)
            }
            TaskSpec::ArithmeticMod { region, modulus, seq_len, .. } => {
                let a = rng.gen_range(0..*modulus);
                let b = rng.gen_range(0..*modulus);
                let op = if rng.gen_bool(0.5) { *modulus } else { *modulus + 1 };
                let mut seq = vec![FILL; *seq_len];
                let base = seq_len - 4;
                seq[base] = region.start + a;
                seq[base + 1] = region.start + op;
                seq[base + 2] = region.start + b;
                seq[base + 3] = region.start + modulus + 2; // EQ
                Ok(seq)
            }
            TaskSpec::IoiLike { region, seq_len, .. } => {
                let a = region.start + rng.gen_range(0..region.len);
                let b = loop {
                    let t = region.start + rng.gen_range(0..region.len);
                    if t != a {
                        break t;
                    }
                };
                let mut seq = vec![FILL; *seq_len];
                seq[0] = a;
                seq[1] = b;
                seq[*seq_len - 2] = b;
                seq[*seq_len - 1] = SEP;
                Ok(seq)
            }
            TaskSpec::Mixture { .. } => unreachable!("handled in sample"),
        }
    }

    /// Corrupt a clean sequence by the task's rule; returns the corrupted
    /// sequence and the incorrect answer token it induces.
    fn corrupt(&self, clean: &[u32], rng: &mut ChaCha12Rng) -> Result<(Vec<u32>, u32)> {
        match self {
            TaskSpec::Induction { region, .. } => {
                let a = *clean.last().unwrap();
                let p = clean.iter().position(|&t| t == a).unwrap();
                let b = clean[p + 1];
                let b_new = sample_excluding(rng, region, &[a, b]);
                let mut corrupted = clean.to_vec();
                corrupted[p + 1] = b_new;
                Ok((corrupted, b_new))
            }
            TaskSpec::Reverse { list_len, .. } => {
                let values = &clean[..*list_len];
                let mut permuted = values.to_vec();
                loop {
                    permuted.shuffle(rng);
                    if permuted[0] != values[0] {
                        break;
                    }
                }
                Ok((reverse_template(&permuted), permuted[0]))
            }
            TaskSpec::GreaterThan { region, seq_len, .. } => {
                let y = clean[*seq_len - 2] - region.start;
                let y_new = loop {
                    let t = rng.gen_range(0..region.len - 1);
                    if t != y {
                        break t;
                    }
                };
                let mut corrupted = clean.to_vec();
                corrupted[*seq_len - 2] = region.start + y_new;
                Ok((corrupted, region.start + y_new + 1))
            }
            TaskSpec::BoolExpr { region, .. } => {
                let truth = self.solve(clean).ok_or_else(|| {
                    Error::InvalidArgument("unparseable boolean expression".into())
                })?;
                let leaf_positions: Vec<usize> = clean
                    .iter()
                    .enumerate()
                    .filter(|(_, &t)| t == region.start + B_TRUE || t == region.start + B_FALSE)
                    .map(|(i, _)| i)
                    .collect();
                let answer_pos = clean.len() - 1;
                let flip_leaf = |t: u32| {
                    if t == region.start + B_TRUE {
                        region.start + B_FALSE
                    } else {
                        region.start + B_TRUE
                    }
                };
                let flip = |seq: &[u32], mask: u32| -> Vec<u32> {
                    let mut out = seq.to_vec();
                    for (bit, &pos) in leaf_positions.iter().enumerate() {
                        if mask & (1 << bit) != 0 {
                            out[pos] = flip_leaf(out[pos]);
                        }
                    }
                    out
                };
                // a valid flip set changes the induced truth value and
                // touches at least one leaf before the answer position
                let touches_pre_answer = |mask: u32| {
                    leaf_positions
                        .iter()
                        .enumerate()
                        .any(|(bit, &pos)| mask & (1 << bit) != 0 && pos < answer_pos)
                };
                let limit = 1u32 << leaf_positions.len();
                let try_mask = |mask: u32| -> Option<(Vec<u32>, u32)> {
                    if !touches_pre_answer(mask) {
                        return None;
                    }
                    let cand = flip(clean, mask);
                    let t = self.solve(&cand)?;
                    (t != truth).then_some((cand, t))
                };
                // random flip sets first, exhaustive fallback
                for _ in 0..64 {
                    if let Some(found) = try_mask(rng.gen_range(1..limit)) {
                        return Ok(found);
                    }
                }
                for mask in 1..limit {
                    if let Some(found) = try_mask(mask) {
                        return Ok(found);
                    }
                }
                Err(Error::InvalidArgument(
                    "expression insensitive to pre-answer leaves".into(),
                ))
            }
            TaskSpec::ArithmeticMod { region, modulus, seq_len, .. } => {
                let base = seq_len - 4;
                let a = clean[base] - region.start;
                let a_new = loop {
                    let t = rng.gen_range(0..*modulus);
                    if t != a {
                        break t;
                    }
                };
                let mut corrupted = clean.to_vec();
                corrupted[base] = region.start + a_new;
                let induced = self.solve(&corrupted).expect("corrupted arithmetic parses");
                Ok((corrupted, induced))
            }
            TaskSpec::IoiLike { seq_len, .. } => {
                let (a, b) = (clean[0], clean[1]);
                let mut corrupted = clean.to_vec();
                corrupted[*seq_len - 2] = a; // repeat the other name instead
                Ok((corrupted, b))
            }
            TaskSpec::Mixture { .. } => unreachable!("mixture pairs delegate to components"),
        }
    }

    /// Rule-based solver: the correct answer token for a clean sequence, or
    /// `None` when the sequence does not belong to this task.
    pub fn solve(&self, clean: &[u32]) -> Option<u32> {
        match self {
            TaskSpec::Induction { region, seq_len, .. } => {
                if clean.len() != *seq_len {
                    return None;
                }
                let a = *clean.last().unwrap();
                if !region.contains(a) {
                    return None;
                }
                let p = clean[..seq_len - 1].iter().position(|&t| t == a)?;
                clean.get(p + 1).copied().filter(|t| region.contains(*t))
            }
            TaskSpec::Reverse { region, list_len, .. } => {
                if clean.len() != 2 * list_len || clean[*list_len] != SEP {
                    return None;
                }
                if !clean[..*list_len].iter().all(|t| region.contains(*t)) {
                    return None;
                }
                // the template has emitted v_k .. v_2; next comes v_1
                Some(clean[0])
            }
            TaskSpec::GreaterThan { region, seq_len, .. } => {
                if clean.len() != *seq_len || clean[seq_len - 1] != SEP {
                    return None;
                }
                let y_tok = clean[seq_len - 2];
                if !region.contains(y_tok) || y_tok + 1 >= region.end() {
                    return None;
                }
                Some(y_tok + 1)
            }
            TaskSpec::BoolExpr { region, .. } => {
                let toks: Vec<u32> = clean
                    .iter()
                    .filter(|&&t| t != FILL)
                    .map(|&t| {
                        if region.contains(t) {
                            Some(t - region.start)
                        } else {
                            None
                        }
                    })
                    .collect::<Option<Vec<u32>>>()?;
                let value = eval_bool(&toks)?;
                Some(region.start + if value { B_TRUE } else { B_FALSE })
            }
            TaskSpec::ArithmeticMod { region, modulus, seq_len, .. } => {
                if clean.len() != *seq_len {
                    return None;
                }
                let base = seq_len - 4;
                let rel = |i: usize| clean[base + i].checked_sub(region.start);
                let (a, op, b) = (rel(0)?, rel(1)?, rel(2)?);
                let m = *modulus;
                if a >= m || b >= m || rel(3)? != m + 2 {
                    return None;
                }
                let result = if op == m {
                    (a + b) % m
                } else if op == m + 1 {
                    (a + m - b) % m
                } else {
                    return None;
                };
                Some(region.start + result)
            }
            TaskSpec::IoiLike { region, seq_len, .. } => {
                if clean.len() != *seq_len || clean[seq_len - 1] != SEP {
                    return None;
                }
                let (a, b) = (clean[0], clean[1]);
                if !region.contains(a) || !region.contains(b) || a == b {
                    return None;
                }
                let repeated = clean[seq_len - 2];
                if repeated == b {
                    Some(a)
                } else if repeated == a {
                    Some(b)
                } else {
                    None
                }
            }
            TaskSpec::Mixture { components, .. } => {
                components.iter().find_map(|(c, _)| c.solve(clean))
            }
        }
    }

    /// Fresh corruption of an existing pair under the task's rule.
    pub fn resample_corruption(&self, pair: &PatchedPair, seed: u64) -> Result<PatchedPair> {
        pair.validate()?;
        match self {
            TaskSpec::Mixture { components, .. } => {
                for (c, _) in components {
                    if c.solve(&pair.clean).is_some() {
                        return c.resample_corruption(pair, seed);
                    }
                }
                Err(Error::InvalidArgument("pair matches no mixture component".into()))
            }
            _ => {
                if self.solve(&pair.clean) != Some(pair.correct_token) {
                    return Err(Error::InvalidArgument(
                        "pair does not belong to this task".into(),
                    ));
                }
                let mut rng = seeded_rng(seed, "resample");
                let (corrupted, incorrect) = self.corrupt(&pair.clean, &mut rng)?;
                let out = PatchedPair {
                    clean: pair.clean.clone(),
                    corrupted,
                    answer_pos: pair.answer_pos,
                    correct_token: pair.correct_token,
                    incorrect_token: incorrect,
                };
                out.validate()?;
                Ok(out)
            }
        }
    }
}

fn sample_excluding(rng: &mut ChaCha12Rng, region: &VocabRegion, exclude: &[u32]) -> u32 {
    loop {
        let t = region.start + rng.gen_range(0..region.len);
        if !exclude.contains(&t) {
            return t;
        }
    }
}

/// The reverse task's surface form: list, separator, then the reversal
/// revealed up to (not including) its final element, which is the answer.
fn reverse_template(values: &[u32]) -> Vec<u32> {
    let k = values.len();
    let mut seq = Vec::with_capacity(2 * k);
    seq.extend_from_slice(values);
    seq.push(SEP);
    for i in (1..k).rev() {
        seq.push(values[i]);
    }
    seq
}

/// Plain list reversal, the label rule for the reverse task.
pub fn reversed(values: &[u32]) -> Vec<u32> {
    values.iter().rev().copied().collect()
}

/// Evaluate a region-relative bool_expr token string.
///
/// Grammar: `expr := term ((AND|OR) term)*`, left associative;
/// `term := NOT term | TRUE | FALSE | LP expr RP`.
fn eval_bool(toks: &[u32]) -> Option<bool> {
    fn parse(toks: &[u32], pos: &mut usize) -> Option<bool> {
        let mut acc = term(toks, pos)?;
        while *pos < toks.len() && (toks[*pos] == B_AND || toks[*pos] == B_OR) {
            let op = toks[*pos];
            *pos += 1;
            let rhs = term(toks, pos)?;
            acc = if op == B_AND { acc && rhs } else { acc || rhs };
        }
        Some(acc)
    }
    fn term(toks: &[u32], pos: &mut usize) -> Option<bool> {
        if toks.get(*pos) == Some(&B_NOT) {
            *pos += 1;
            return Some(!term(toks, pos)?);
        }
        match toks.get(*pos)? {
            &B_TRUE => {
                *pos += 1;
                Some(true)
            }
            &B_FALSE => {
                *pos += 1;
                Some(false)
            }
            &B_LP => {
                *pos += 1;
                let v = parse(toks, pos)?;
                if toks.get(*pos) != Some(&B_RP) {
                    return None;
                }
                *pos += 1;
                Some(v)
            }
            _ => None,
        }
    }
    let mut pos = 0;
    let v = parse(toks, &mut pos)?;
    (pos == toks.len()).then_some(v)
}

/// Disjoint uniform subsets of the requested fractions, deterministic per
/// seed.
pub fn split(
    dataset: &[PatchedPair],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Vec<PatchedPair>>> {
    if fractions.is_empty() {
        return Err(Error::InvalidArgument("no fractions given".into()));
    }
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| *f <= 0.0) || total > 1.0 + 1e-9 {
        return Err(Error::InvalidArgument(
            "fractions must be positive and sum to at most 1".into(),
        ));
    }
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = seeded_rng(seed, "split");
    indices.shuffle(&mut rng);
    let mut out = Vec::with_capacity(fractions.len());
    let mut cursor = 0;
    for f in fractions {
        let size = (f * dataset.len() as f64).floor() as usize;
        if size == 0 {
            return Err(Error::InvalidArgument(format!(
                "fraction {f} yields an empty subset of {} samples",
                dataset.len()
            )));
        }
        let subset = indices[cursor..cursor + size]
            .iter()
            .map(|&i| dataset[i].clone())
            .collect();
        cursor += size;
        out.push(subset);
    }
    Ok(out)
}

/// One JSON object per line.
pub fn dump_jsonl<W: Write>(pairs: &[PatchedPair], mut writer: W) -> Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut writer, p)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_jsonl<R: BufRead>(reader: R) -> Result<Vec<PatchedPair>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pair: PatchedPair = serde_json::from_str(&line)?;
        pair.validate()?;
        out.push(pair);
    }
    Ok(out)
}
