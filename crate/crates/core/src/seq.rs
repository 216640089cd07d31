//! Sequence, mask-set, and schedule types with the forward masking process.
//!
//! A length-`L` sequence over a vocabulary of `K` tokens is progressively
//! masked by a size schedule `{s_t}` with `sum s_t = L`: at forward step `t` a
//! uniformly random set of `s_t` still-visible positions is replaced by the
//! mask symbol. The realized nested mask sets form a [`MaskTrajectory`]; the
//! reverse (generation) process walks the trajectory backwards.

use std::fmt;

use rand::Rng;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::util::trajectory_count;
use crate::{Error, Result};

/// Token ids are 0-based integers in `[0, K)`. The mask is deliberately an
/// out-of-band sentinel (`None` in [`MaskedSequence`]), never the integer `K`,
/// so it cannot alias a token id when `K` varies.
pub type Token = usize;

/// Token alphabet of size `K >= 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size must be at least 2, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Iterator over all token ids.
    pub fn tokens(&self) -> std::ops::Range<Token> {
        0..self.size
    }

    pub fn contains(&self, token: Token) -> bool {
        token < self.size
    }
}

/// Fully observed length-`L` token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sequence {
    tokens: Vec<Token>,
}

impl Sequence {
    pub fn new(tokens: Vec<Token>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn get(&self, i: usize) -> Token {
        self.tokens[i]
    }

    pub fn set(&mut self, i: usize, token: Token) {
        self.tokens[i] = token;
    }
}

impl fmt::Display for Sequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, t) in self.tokens.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Length-`L` sequence in which each position is either a token or the mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedSequence {
    entries: Vec<Option<Token>>,
}

impl MaskedSequence {
    pub fn all_masked(len: usize) -> Self {
        Self {
            entries: vec![None; len],
        }
    }

    pub fn from_entries(entries: Vec<Option<Token>>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `Some(token)` if position `i` is observed, `None` if masked.
    pub fn entry(&self, i: usize) -> Option<Token> {
        self.entries[i]
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.entries[i].is_none()
    }

    pub fn set(&mut self, i: usize, token: Token) {
        self.entries[i] = Some(token);
    }

    pub fn clear(&mut self, i: usize) {
        self.entries[i] = None;
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.is_none().then_some(i))
    }

    pub fn unmasked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter_map(|(i, e)| e.is_some().then_some(i))
    }

    pub fn num_masked(&self) -> usize {
        self.entries.iter().filter(|e| e.is_none()).count()
    }

    /// Converts to a [`Sequence`]; errors if any position is still masked.
    pub fn into_sequence(self) -> Result<Sequence> {
        let tokens = self
            .entries
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::InvalidArgument("sequence still contains masks".into()))?;
        Ok(Sequence::new(tokens))
    }
}

impl fmt::Display for MaskedSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.entries.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            match e {
                Some(t) => write!(f, "{t}")?,
                None => write!(f, "_")?,
            }
        }
        Ok(())
    }
}

/// Projects `x` onto the index set `keep`: position `i` holds `x[i]` if
/// `i` is in `keep`, and the mask otherwise.
pub fn project(x: &Sequence, keep: &[usize]) -> Result<MaskedSequence> {
    let mut out = MaskedSequence::all_masked(x.len());
    for &i in keep {
        if i >= x.len() {
            return Err(Error::InvalidArgument(format!(
                "projection index {i} out of range for length {}",
                x.len()
            )));
        }
        out.set(i, x.get(i));
    }
    Ok(out)
}

/// Mask size schedule `{s_t}`, `t = 1..T`, with `sum s_t = L` and every
/// `s_t >= 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskSchedule {
    sizes: Vec<usize>,
}

impl MaskSchedule {
    /// Validates `sum sizes = len` and all sizes positive.
    pub fn new(sizes: Vec<usize>, len: usize) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidSchedule("schedule has no steps".into()));
        }
        if let Some(&bad) = sizes.iter().find(|&&s| s == 0) {
            return Err(Error::InvalidSchedule(format!(
                "schedule sizes must be positive, got {bad}"
            )));
        }
        let total: usize = sizes.iter().sum();
        if total != len {
            return Err(Error::InvalidSchedule(format!(
                "schedule sizes sum to {total}, expected sequence length {len}"
            )));
        }
        Ok(Self { sizes })
    }

    /// Balanced schedule: all sizes in `{floor(L/T), ceil(L/T)}` with exactly
    /// `L mod T` of the larger size, larger steps first. A fixed order keeps
    /// runs reproducible; the bounds are order-insensitive.
    pub fn balanced(len: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps > len {
            return Err(Error::InvalidArgument(format!(
                "step count must satisfy 1 <= T <= L, got T={steps}, L={len}"
            )));
        }
        let base = len / steps;
        let extra = len % steps;
        let sizes = (0..steps)
            .map(|t| if t < extra { base + 1 } else { base })
            .collect();
        Self::new(sizes, len)
    }

    /// Adversarial schedule with sizes drawn i.i.d. uniform from
    /// `{s_max, s_max/2}` until the running sum exceeds `L - s_max`; the
    /// remainder (either 0 or `s_max/2`) is filled with `s_max/2` so the sizes
    /// sum to `L` exactly and every size stays in `{s_max, s_max/2}`.
    pub fn lower_bound<R: Rng + ?Sized>(len: usize, s_max: usize, rng: &mut R) -> Result<Self> {
        if s_max < 2 || !s_max.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "s_max must be an even power of two, got {s_max}"
            )));
        }
        let half = s_max / 2;
        if !len.is_multiple_of(half) {
            return Err(Error::InvalidArgument(format!(
                "sequence length {len} must be divisible by s_max/2 = {half}"
            )));
        }
        if len < s_max {
            return Err(Error::InvalidArgument(format!(
                "sequence length {len} must be at least s_max = {s_max}"
            )));
        }
        let mut sizes = Vec::new();
        let mut total = 0usize;
        while total + s_max <= len {
            let s = if rng.random_bool(0.5) { s_max } else { half };
            sizes.push(s);
            total += s;
        }
        while total < len {
            sizes.push(half);
            total += half;
        }
        Self::new(sizes, len)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Number of steps `T`.
    pub fn steps(&self) -> usize {
        self.sizes.len()
    }

    /// Maximum step size.
    pub fn s_max(&self) -> usize {
        *self.sizes.iter().max().expect("schedule is nonempty")
    }

    /// Sequence length `L = sum s_t`.
    pub fn len(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Cumulative mask counts `|M_t| = s_1 + ... + s_t` for `t = 1..T`.
    pub fn cumulative(&self) -> Vec<usize> {
        let mut acc = 0;
        self.sizes
            .iter()
            .map(|s| {
                acc += s;
                acc
            })
            .collect()
    }
}

/// Realized nested mask sets of a forward masking run.
///
/// `increments[t]` (sorted) holds the positions masked at forward step `t+1`,
/// so the mask set after step `t+1` is the union of `increments[0..=t]`. The
/// reverse process reveals `increments[T-1]` first and `increments[0]` last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTrajectory {
    increments: Vec<Vec<usize>>,
    schedule: MaskSchedule,
}

impl MaskTrajectory {
    /// Builds a trajectory from forward-time increments, validating that they
    /// are disjoint, cover `[L]`, stay in range, and match the schedule sizes.
    pub fn new(mut increments: Vec<Vec<usize>>, schedule: MaskSchedule) -> Result<Self> {
        if increments.len() != schedule.steps() {
            return Err(Error::InvalidArgument(format!(
                "trajectory has {} increments, schedule has {} steps",
                increments.len(),
                schedule.steps()
            )));
        }
        let len = schedule.len();
        let mut seen = vec![false; len];
        for (t, inc) in increments.iter_mut().enumerate() {
            inc.sort_unstable();
            if inc.len() != schedule.sizes()[t] {
                return Err(Error::InvalidArgument(format!(
                    "increment {t} has {} positions, schedule requires {}",
                    inc.len(),
                    schedule.sizes()[t]
                )));
            }
            for &i in inc.iter() {
                if i >= len {
                    return Err(Error::InvalidArgument(format!(
                        "trajectory position {i} out of range for length {len}"
                    )));
                }
                if seen[i] {
                    return Err(Error::InvalidArgument(format!(
                        "trajectory masks position {i} twice"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(Self {
            increments,
            schedule,
        })
    }

    /// Samples the forward process: each increment is a uniformly random
    /// `s_t`-subset of the positions not yet masked.
    pub fn sample<R: Rng + ?Sized>(schedule: &MaskSchedule, rng: &mut R) -> Self {
        let mut remaining: Vec<usize> = (0..schedule.len()).collect();
        let mut increments = Vec::with_capacity(schedule.steps());
        for &s in schedule.sizes() {
            let chosen = rand::seq::index::sample(rng, remaining.len(), s);
            let mut take = vec![false; remaining.len()];
            for idx in chosen.iter() {
                take[idx] = true;
            }
            let mut inc = Vec::with_capacity(s);
            let mut keep = Vec::with_capacity(remaining.len() - s);
            for (idx, &pos) in remaining.iter().enumerate() {
                if take[idx] {
                    inc.push(pos);
                } else {
                    keep.push(pos);
                }
            }
            increments.push(inc);
            remaining = keep;
        }
        Self {
            increments,
            schedule: schedule.clone(),
        }
    }

    pub fn schedule(&self) -> &MaskSchedule {
        &self.schedule
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    pub fn len(&self) -> usize {
        self.schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Positions masked at forward step `t+1` (0-based `t < T`), sorted.
    pub fn increment(&self, t: usize) -> &[usize] {
        &self.increments[t]
    }

    /// Mask set `M_t` after forward step `t` (`t` in `0..=T`), sorted.
    pub fn mask_set(&self, t: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.increments[..t].iter().flatten().copied().collect();
        out.sort_unstable();
        out
    }

    /// Unmasked set `W_t` after forward step `t` (`t` in `0..=T`), sorted.
    pub fn unmasked_set(&self, t: usize) -> Vec<usize> {
        let mut masked = vec![false; self.len()];
        for inc in &self.increments[..t] {
            for &i in inc {
                masked[i] = true;
            }
        }
        (0..self.len()).filter(|&i| !masked[i]).collect()
    }

    /// For each position, the 0-based forward step at which it was masked.
    pub fn step_of(&self) -> Vec<usize> {
        let mut out = vec![0; self.len()];
        for (t, inc) in self.increments.iter().enumerate() {
            for &i in inc {
                out[i] = t;
            }
        }
        out
    }

    /// Increments in reverse-time (reveal) order: `D_T` first, `D_1` last.
    pub fn reveal_order(&self) -> impl Iterator<Item = (usize, &[usize])> + '_ {
        self.increments
            .iter()
            .enumerate()
            .rev()
            .map(|(t, inc)| (t, inc.as_slice()))
    }
}

// Trajectories serialize as the increments in reverse-time (reveal) order:
// [D_T, ..., D_1], each a sorted index array. The schedule is recovered from
// the increment lengths.
impl Serialize for MaskTrajectory {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let reversed: Vec<&Vec<usize>> = self.increments.iter().rev().collect();
        reversed.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for MaskTrajectory {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let mut increments: Vec<Vec<usize>> = Vec::deserialize(deserializer)?;
        increments.reverse();
        let len = increments.iter().map(Vec::len).sum();
        let sizes: Vec<usize> = increments.iter().map(Vec::len).collect();
        let schedule = MaskSchedule::new(sizes, len).map_err(D::Error::custom)?;
        MaskTrajectory::new(increments, schedule).map_err(D::Error::custom)
    }
}

/// Guard for exact trajectory enumeration.
pub const TRAJECTORY_ENUM_GUARD: u128 = 1_000_000;

/// Enumerates every trajectory of the uniform forward process together with
/// its exact probability. Probabilities sum to 1.
pub fn enumerate_trajectories(schedule: &MaskSchedule) -> Result<TrajectoryIter> {
    let count = trajectory_count(schedule.sizes())
        .filter(|&c| c <= TRAJECTORY_ENUM_GUARD)
        .ok_or_else(|| {
            Error::TooLarge(format!(
                "trajectory count for schedule {:?} exceeds {}",
                schedule.sizes(),
                TRAJECTORY_ENUM_GUARD
            ))
        })?;
    Ok(TrajectoryIter::new(schedule.clone(), count))
}

/// Depth-first enumerator over mask trajectories; see
/// [`enumerate_trajectories`].
pub struct TrajectoryIter {
    schedule: MaskSchedule,
    probability: f64,
    // One frame per forward step: the positions still unmasked before the
    // step, and the enumerator over s_t-subsets of them.
    stack: Vec<Frame>,
    chosen: Vec<Vec<usize>>,
}

struct Frame {
    remaining: Vec<usize>,
    combos: CombinationIter,
}

impl TrajectoryIter {
    fn new(schedule: MaskSchedule, count: u128) -> Self {
        let remaining: Vec<usize> = (0..schedule.len()).collect();
        let combos = CombinationIter::new(remaining.len(), schedule.sizes()[0]);
        Self {
            probability: 1.0 / count as f64,
            schedule,
            stack: vec![Frame { remaining, combos }],
            chosen: Vec::new(),
        }
    }
}

impl Iterator for TrajectoryIter {
    type Item = (MaskTrajectory, f64);

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let depth = self.stack.len();
            if depth == 0 {
                return None;
            }
            self.chosen.truncate(depth - 1);
            let frame = self.stack.last_mut().expect("stack nonempty");
            match frame.combos.next() {
                None => {
                    self.stack.pop();
                }
                Some(picked) => {
                    let inc: Vec<usize> = picked.iter().map(|&k| frame.remaining[k]).collect();
                    let rest: Vec<usize> = frame
                        .remaining
                        .iter()
                        .enumerate()
                        .filter_map(|(k, &pos)| (!picked.contains(&k)).then_some(pos))
                        .collect();
                    self.chosen.push(inc);
                    if depth == self.schedule.steps() {
                        let traj = MaskTrajectory {
                            increments: self.chosen.clone(),
                            schedule: self.schedule.clone(),
                        };
                        return Some((traj, self.probability));
                    }
                    let combos = CombinationIter::new(rest.len(), self.schedule.sizes()[depth]);
                    self.stack.push(Frame {
                        remaining: rest,
                        combos,
                    });
                }
            }
        }
    }
}

/// Lexicographic k-subsets of `0..n`.
struct CombinationIter {
    n: usize,
    indices: Vec<usize>,
    started: bool,
    exhausted: bool,
}

impl CombinationIter {
    fn new(n: usize, k: usize) -> Self {
        Self {
            n,
            indices: (0..k).collect(),
            started: false,
            exhausted: k > n,
        }
    }
}

impl Iterator for CombinationIter {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.exhausted {
            return None;
        }
        if !self.started {
            self.started = true;
            return Some(self.indices.clone());
        }
        let k = self.indices.len();
        if k == 0 {
            self.exhausted = true;
            return None;
        }
        // Advance rightmost index that can still move.
        let mut i = k;
        loop {
            if i == 0 {
                self.exhausted = true;
                return None;
            }
            i -= 1;
            if self.indices[i] + (k - i) < self.n {
                self.indices[i] += 1;
                for j in i + 1..k {
                    self.indices[j] = self.indices[j - 1] + 1;
                }
                return Some(self.indices.clone());
            }
        }
    }
}
