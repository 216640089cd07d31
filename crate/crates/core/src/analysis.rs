//! Sampling-error measurement and convergence-bound evaluation.
//!
//! The sampling error of a run is `E_M[KL(p_data || p_out(.|M))]`: the KL
//! divergence between the data law and the output law given the mask
//! trajectory, averaged over trajectory randomness. At brute-force scale it
//! is computed three independent ways (trajectory enumeration, the per-step
//! total-correlation decomposition, and Monte Carlo), which serve as mutual
//! oracles. The bound evaluators compute the mutual-information upper and
//! lower envelopes that the measured error is compared against.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::dist::{
    auto_subset_averaging, expected_mi_random_subset, Categorical, SequenceDistribution,
    SubsetAveraging, TABLE_GUARD,
};
use crate::predictor::{training_error, MaskPredictor, TrainingErrorMode};
use crate::sampler::{adaptive_trajectory_for, output_log_prob, UnmaskPolicy};
use crate::seq::{enumerate_trajectories, MaskSchedule, MaskTrajectory, MaskedSequence, Sequence};
use crate::util::{mean_stderr, stream_rng, table_size, trajectory_count};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlMethod {
    ExactEnumeration,
    Decomposition,
    MonteCarlo,
}

/// `(T, s_max)` of the schedule a KL value was measured under. `steps` is
/// `None` when the schedule itself was randomized per replicate.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ScheduleSummary {
    pub steps: Option<usize>,
    pub s_max: usize,
}

/// A sampling-error measurement.
#[derive(Debug, Clone, Serialize)]
pub struct KlReport {
    /// Estimate of `E_M[KL(p_data || p_out(.|M))]` in nats.
    pub estimate: f64,
    /// Standard error (0 for exact methods).
    pub stderr: f64,
    pub n_samples: u64,
    pub method: KlMethod,
    pub schedule_summary: ScheduleSummary,
}

// ---------------------------------------------------------------------------
// Brute-force enumeration helpers
// ---------------------------------------------------------------------------

/// Shape of a guarded brute-force enumeration over `K^L` sequences.
struct SeqSpace {
    k: usize,
    len: usize,
    rows: usize,
}

impl SeqSpace {
    fn guarded(d: &dyn SequenceDistribution) -> Result<Self> {
        let k = d.vocab().size();
        let len = d.seq_len();
        let rows = table_size(k, len)
            .filter(|&r| r <= TABLE_GUARD)
            .ok_or_else(|| {
                Error::TooLarge(format!("K^L = {k}^{len} exceeds guard {TABLE_GUARD}"))
            })?;
        Ok(Self { k, len, rows })
    }

    fn decode_into(&self, idx: usize, x: &mut Sequence) {
        let mut rest = idx;
        for i in (0..self.len).rev() {
            x.set(i, rest % self.k);
            rest /= self.k;
        }
    }
}

/// Memoizes per-position predictor conditionals by (position, context).
/// Contexts are packed base-(K+1); the brute-force guards keep the key well
/// inside u128.
struct CondCache<'a> {
    predictor: MaskPredictor<'a>,
    base: u128,
    map: HashMap<(usize, u128), Categorical>,
}

impl<'a> CondCache<'a> {
    fn new(predictor: MaskPredictor<'a>) -> Self {
        Self {
            base: predictor.oracle().vocab().size() as u128 + 1,
            predictor,
            map: HashMap::new(),
        }
    }

    fn key(&self, observed: &MaskedSequence) -> u128 {
        let mut key = 0u128;
        for i in 0..observed.len() {
            let digit = match observed.entry(i) {
                None => 0u128,
                Some(t) => t as u128 + 1,
            };
            key = key * self.base + digit;
        }
        key
    }

    fn log_prob(
        &mut self,
        position: usize,
        observed: &MaskedSequence,
        token: usize,
    ) -> Result<f64> {
        let key = (position, self.key(observed));
        if let Some(c) = self.map.get(&key) {
            return Ok(c.log_prob(token));
        }
        let c = self.predictor.token_conditional(position, observed)?;
        let lp = c.log_prob(token);
        self.map.insert(key, c);
        Ok(lp)
    }
}

/// `log p_out(x | trajectory)` evaluated through the cache.
fn output_log_prob_cached(
    x: &Sequence,
    traj: &MaskTrajectory,
    cache: &mut CondCache,
) -> Result<f64> {
    let mut y = MaskedSequence::all_masked(x.len());
    let mut total = 0.0;
    for (_, inc) in traj.reveal_order() {
        for &i in inc {
            total += cache.log_prob(i, &y, x.get(i))?;
        }
        for &i in inc {
            y.set(i, x.get(i));
        }
    }
    Ok(total)
}

fn kl_given_mask_cached(
    d: &dyn SequenceDistribution,
    traj: &MaskTrajectory,
    space: &SeqSpace,
    cache: &mut CondCache,
) -> Result<f64> {
    let mut total = 0.0;
    let mut x = Sequence::new(vec![0; space.len]);
    for idx in 0..space.rows {
        space.decode_into(idx, &mut x);
        let lp = d.log_prob(&x);
        if lp == f64::NEG_INFINITY {
            continue;
        }
        let lq = output_log_prob_cached(&x, traj, cache)?;
        total += lp.exp() * (lp - lq);
    }
    Ok(total)
}

/// Exact `KL(p_data || p_out(.|m))` for one fixed trajectory by enumeration
/// over all `K^L` sequences.
pub fn kl_given_mask_exact(
    d: &dyn SequenceDistribution,
    p: &MaskPredictor,
    traj: &MaskTrajectory,
) -> Result<f64> {
    let space = SeqSpace::guarded(d)?;
    let mut cache = CondCache::new(*p);
    kl_given_mask_cached(d, traj, &space, &mut cache)
}

/// Exact `E_M[KL(p_data || p_out(.|M))]` by enumerating every trajectory with
/// its probability.
pub fn kl_expected_exact(
    d: &dyn SequenceDistribution,
    p: &MaskPredictor,
    schedule: &MaskSchedule,
) -> Result<KlReport> {
    let space = SeqSpace::guarded(d)?;
    let mut cache = CondCache::new(*p);
    let mut total = 0.0;
    for (traj, prob) in enumerate_trajectories(schedule)? {
        total += prob * kl_given_mask_cached(d, &traj, &space, &mut cache)?;
    }
    Ok(KlReport {
        estimate: total,
        stderr: 0.0,
        n_samples: 0,
        method: KlMethod::ExactEnumeration,
        schedule_summary: ScheduleSummary {
            steps: Some(schedule.steps()),
            s_max: schedule.s_max(),
        },
    })
}

// ---------------------------------------------------------------------------
// Per-step decomposition
// ---------------------------------------------------------------------------

/// Joint and context marginals for one (context set, reveal set) pair,
/// accumulated over the full table.
struct StepTables {
    joint: HashMap<(u128, u128), f64>,
    ctx: HashMap<u128, f64>,
}

fn pack_values(x: &Sequence, positions: &[usize], k: u128) -> u128 {
    let mut key = 0u128;
    for &i in positions {
        key = key * k + x.get(i) as u128;
    }
    key
}

fn step_tables(
    d: &dyn SequenceDistribution,
    space: &SeqSpace,
    ctx_set: &[usize],
    reveal_set: &[usize],
) -> StepTables {
    let k = space.k as u128;
    let mut joint = HashMap::new();
    let mut ctx = HashMap::new();
    let mut x = Sequence::new(vec![0; space.len]);
    for idx in 0..space.rows {
        space.decode_into(idx, &mut x);
        let p = d.log_prob(&x).exp();
        if p == 0.0 {
            continue;
        }
        let ck = pack_values(&x, ctx_set, k);
        let vk = pack_values(&x, reveal_set, k);
        *joint.entry((ck, vk)).or_insert(0.0) += p;
        *ctx.entry(ck).or_insert(0.0) += p;
    }
    StepTables { joint, ctx }
}

/// `E_x[ log p(x∘reveal | x∘ctx) - sum_{i in reveal} log p*_i(x_i | x∘ctx) ]`
/// — the expected gap between the joint conditional and the product of
/// per-position conditionals for one step.
fn step_total_correlation(
    d: &dyn SequenceDistribution,
    space: &SeqSpace,
    ctx_set: &[usize],
    reveal_set: &[usize],
    cache: &mut CondCache,
) -> Result<f64> {
    let tables = step_tables(d, space, ctx_set, reveal_set);
    let k = space.k as u128;
    let mut total = 0.0;
    let mut x = Sequence::new(vec![0; space.len]);
    for idx in 0..space.rows {
        space.decode_into(idx, &mut x);
        let p = d.log_prob(&x).exp();
        if p == 0.0 {
            continue;
        }
        let ck = pack_values(&x, ctx_set, k);
        let vk = pack_values(&x, reveal_set, k);
        let log_joint = (tables.joint[&(ck, vk)] / tables.ctx[&ck]).ln();
        let observed = crate::seq::project(&x, ctx_set)?;
        let mut log_product = 0.0;
        for &i in reveal_set {
            log_product += cache.log_prob(i, &observed, x.get(i))?;
        }
        total += p * (log_joint - log_product);
    }
    Ok(total)
}

/// [`kl_decomposition_exact`] wrapped in a report.
pub fn kl_decomposition_report(
    d: &dyn SequenceDistribution,
    schedule: &MaskSchedule,
) -> Result<KlReport> {
    Ok(KlReport {
        estimate: kl_decomposition_exact(d, schedule)?,
        stderr: 0.0,
        n_samples: 0,
        method: KlMethod::Decomposition,
        schedule_summary: ScheduleSummary {
            steps: Some(schedule.steps()),
            s_max: schedule.s_max(),
        },
    })
}

/// Exact `E_M[KL]` for the optimal predictor via the per-step decomposition:
/// the trajectory-weighted sum over steps of the expected conditional total
/// correlation (joint conditional of the revealed batch vs the product of
/// per-position conditionals). Independent of [`kl_expected_exact`]'s route.
pub fn kl_decomposition_exact(d: &dyn SequenceDistribution, schedule: &MaskSchedule) -> Result<f64> {
    let space = SeqSpace::guarded(d)?;
    let mut cache = CondCache::new(MaskPredictor::optimal(d));
    let mut total = 0.0;
    for (traj, prob) in enumerate_trajectories(schedule)? {
        for t in 0..traj.steps() {
            let ctx = traj.unmasked_set(t + 1);
            let reveal = traj.increment(t).to_vec();
            total += prob * step_total_correlation(d, &space, &ctx, &reveal, &mut cache)?;
        }
    }
    Ok(total)
}

/// Checks the two-batch split identity on every step of the trajectory with
/// at least two revealed positions: the step's total correlation must equal
/// first-batch total correlation + second-batch total correlation at the
/// enlarged context + the conditional mutual information between the second
/// batch's tokens and the first batch. Returns the largest absolute residual
/// (0 if no step has `s_t >= 2`).
pub fn two_batch_identity_check(
    d: &dyn SequenceDistribution,
    traj: &MaskTrajectory,
    rng: &mut dyn rand::RngCore,
) -> Result<f64> {
    let space = SeqSpace::guarded(d)?;
    let mut cache = CondCache::new(MaskPredictor::optimal(d));
    let mut worst = 0.0f64;
    for t in 0..traj.steps() {
        let reveal = traj.increment(t);
        let s = reveal.len();
        if s < 2 {
            continue;
        }
        let ctx = traj.unmasked_set(t + 1);
        // Random split: first batch ceil(s/2), second batch floor(s/2).
        let first_size = s.div_ceil(2);
        let picked = rand::seq::index::sample(rng, s, first_size);
        let mut in_first = vec![false; s];
        for i in picked.iter() {
            in_first[i] = true;
        }
        let first: Vec<usize> = (0..s).filter(|&i| in_first[i]).map(|i| reveal[i]).collect();
        let second: Vec<usize> = (0..s).filter(|&i| !in_first[i]).map(|i| reveal[i]).collect();
        let mut mid_ctx = ctx.clone();
        mid_ctx.extend_from_slice(&first);
        mid_ctx.sort_unstable();

        let lhs = step_total_correlation(d, &space, &ctx, reveal, &mut cache)?;
        let t1 = step_total_correlation(d, &space, &ctx, &first, &mut cache)?;
        let t2 = step_total_correlation(d, &space, &mid_ctx, &second, &mut cache)?;
        // Conditional mutual information per second-batch token:
        // E_x[log p_i(x_i | x∘mid) - log p_i(x_i | x∘ctx)].
        let mut t3 = 0.0;
        let mut x = Sequence::new(vec![0; space.len]);
        for idx in 0..space.rows {
            space.decode_into(idx, &mut x);
            let p = d.log_prob(&x).exp();
            if p == 0.0 {
                continue;
            }
            let obs_ctx = crate::seq::project(&x, &ctx)?;
            let obs_mid = crate::seq::project(&x, &mid_ctx)?;
            for &i in &second {
                t3 += p
                    * (cache.log_prob(i, &obs_mid, x.get(i))?
                        - cache.log_prob(i, &obs_ctx, x.get(i))?);
            }
        }
        worst = worst.max((lhs - (t1 + t2 + t3)).abs());
    }
    Ok(worst)
}

/// Checks the training-error decoupling identity exactly:
/// `E_M[KL(p || p_out)] - E_M[KL(p || p_out*)] = eps_train`, where `p_out*`
/// uses the optimal predictor and `eps_train` is evaluated by independent
/// subset enumeration. Returns the absolute residual.
pub fn decoupling_check(
    d: &dyn SequenceDistribution,
    p: &MaskPredictor,
    schedule: &MaskSchedule,
) -> Result<f64> {
    let with_predictor = kl_expected_exact(d, p, schedule)?.estimate;
    let with_optimal = kl_expected_exact(d, &MaskPredictor::optimal(d), schedule)?.estimate;
    let eps = training_error(p, d, schedule, TrainingErrorMode::Exact)?.value;
    Ok(((with_predictor - with_optimal) - eps).abs())
}

// ---------------------------------------------------------------------------
// Monte Carlo estimator
// ---------------------------------------------------------------------------

/// Schedule used by the Monte Carlo estimator.
#[derive(Debug, Clone, Copy)]
pub enum ScheduleSource<'a> {
    Fixed(&'a MaskSchedule),
    /// Draw a fresh adversarial schedule per replicate (sizes i.i.d. from
    /// `{s_max, s_max/2}`), so the estimate averages over schedule
    /// randomness as well.
    LowerBound { len: usize, s_max: usize },
}

/// Unbiased Monte Carlo estimate of `E_M[KL(p_data || p_out(.|M))]`: draw
/// `(x ~ p_data, trajectory ~ forward law)` independently `n` times and
/// average `log p_data(x) - log p_out(x | trajectory)`. Replicas run in
/// parallel on per-replica RNG streams and are aggregated in fixed order, so
/// the result is bit-identical for a given seed regardless of thread count.
///
/// Under the entropy-adaptive policy the trajectory is the deterministic
/// adaptive order for `x` and the estimate measures the KL to the adaptive
/// output law (a diagnostic; the bounds assume the uniform policy).
pub fn kl_mc(
    d: &dyn SequenceDistribution,
    p: &MaskPredictor,
    source: ScheduleSource,
    policy: UnmaskPolicy,
    n: usize,
    seed: u64,
) -> Result<KlReport> {
    if n < 2 {
        return Err(Error::InvalidArgument("kl_mc needs n >= 2".into()));
    }
    if let ScheduleSource::Fixed(schedule) = source {
        if schedule.len() != d.seq_len() {
            return Err(Error::InvalidArgument(
                "schedule length does not match distribution".into(),
            ));
        }
    }
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let mut rng = stream_rng(seed, r as u64);
            let owned;
            let schedule = match source {
                ScheduleSource::Fixed(s) => s,
                ScheduleSource::LowerBound { len, s_max } => {
                    owned = MaskSchedule::lower_bound(len, s_max, &mut rng)?;
                    &owned
                }
            };
            let x = d.sample_sequence(&mut rng);
            let traj = match policy {
                UnmaskPolicy::UniformForwardConsistent => MaskTrajectory::sample(schedule, &mut rng),
                UnmaskPolicy::EntropyAdaptive => adaptive_trajectory_for(&x, schedule, p)?,
            };
            let lq = output_log_prob(&x, &traj, p)?;
            Ok(d.log_prob(&x) - lq)
        })
        .enumerate()
        .map(|(r, res)| {
            res.map_err(|e| Error::AtSample {
                index: r as u64,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let (estimate, stderr) = mean_stderr(&values);
    let schedule_summary = match source {
        ScheduleSource::Fixed(s) => ScheduleSummary {
            steps: Some(s.steps()),
            s_max: s.s_max(),
        },
        ScheduleSource::LowerBound { s_max, .. } => ScheduleSummary {
            steps: None,
            s_max,
        },
    };
    Ok(KlReport {
        estimate,
        stderr,
        n_samples: n as u64,
        method: KlMethod::MonteCarlo,
        schedule_summary,
    })
}

// ---------------------------------------------------------------------------
// Bounds
// ---------------------------------------------------------------------------

/// `sum_i I(X_i; X_{-i})` in nats.
pub fn mi_sum(d: &dyn SequenceDistribution) -> f64 {
    (0..d.seq_len()).map(|i| d.mi_token_rest(i)).sum()
}

/// Upper bound `(2^ceil(log2 s_max) - 1)/L * mi_sum + eps_train`.
pub fn thm1_bound(d: &dyn SequenceDistribution, schedule: &MaskSchedule, eps_train: f64) -> f64 {
    let s_max = schedule.s_max();
    let prefactor = (s_max.next_power_of_two() as f64 - 1.0) / d.seq_len() as f64;
    prefactor * mi_sum(d) + eps_train
}

/// Balanced-schedule form `(C_1 / T) * mi_sum + eps_train` with
/// `C_1 = T * s_max / sum_t s_t`.
pub fn corollary_bound(
    d: &dyn SequenceDistribution,
    schedule: &MaskSchedule,
    eps_train: f64,
) -> f64 {
    let c1 = schedule.steps() as f64 * schedule.s_max() as f64 / schedule.len() as f64;
    c1 / schedule.steps() as f64 * mi_sum(d) + eps_train
}

/// Schedule-ratio constant `C_1` of the balanced-schedule bound.
pub fn corollary_c1(schedule: &MaskSchedule) -> f64 {
    schedule.steps() as f64 * schedule.s_max() as f64 / schedule.len() as f64
}

/// Subset-expectation strategy for the hierarchical bounds.
#[derive(Debug, Clone, Copy)]
pub enum SubsetMode {
    /// Exact when the subset count permits, Monte Carlo otherwise.
    Auto,
    /// Exact enumeration only (errors when infeasible).
    Exact,
    MonteCarlo { n_subsets: usize },
}

/// A bound evaluation. `applicable` is false when the bound's premise does
/// not hold (e.g. `s_max = 1`), in which case `value` degrades to the
/// training error alone.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BoundValue {
    pub value: f64,
    /// Standard error contributed by Monte Carlo subset averaging (0 when all
    /// levels are exact).
    pub stderr: f64,
    pub applicable: bool,
}

/// The hierarchical mutual-information term shared by the refined upper
/// bound and the lower bound: following the halving recursion
/// `s_0 = s_max, s_{j+1} = ceil(s_j / 2)` down to 1, it accumulates
/// `(s_j / 2L) * sum_i E_W[I(X_i; X∘W)]` with `|W| = L - s_{j+1}` at level
/// `j`. For power-of-two `s_max` this is
/// `(s_max/2L) * sum_i sum_j 2^-j E[I(X_i; X∘W_j)]` with
/// `|W_j| = L - s_max * 2^-(j+1)`.
fn hierarchical_mi_part(
    d: &dyn SequenceDistribution,
    s_max: usize,
    mode: SubsetMode,
    seed: u64,
) -> Result<(f64, f64)> {
    let len = d.seq_len();
    let mut value = 0.0;
    let mut variance = 0.0;
    let mut s = s_max;
    let mut level = 0u64;
    while s > 1 {
        let next = s.div_ceil(2);
        let subset_size = len - next;
        let coefficient = s as f64 / (2.0 * len as f64);
        let averaging = match mode {
            SubsetMode::Auto => auto_subset_averaging(len, subset_size),
            SubsetMode::Exact => SubsetAveraging::Exact,
            SubsetMode::MonteCarlo { n_subsets } => SubsetAveraging::MonteCarlo { n_subsets },
        };
        let per_token: Vec<(f64, f64)> = (0..len)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(seed, level * len as u64 + i as u64);
                let est = expected_mi_random_subset(d, i, subset_size, averaging, &mut rng)?;
                Ok((est.value, est.stderr))
            })
            .collect::<Result<Vec<_>>>()?;
        for (v, se) in per_token {
            value += coefficient * v;
            variance += (coefficient * se) * (coefficient * se);
        }
        s = next;
        level += 1;
    }
    Ok((value, variance.sqrt()))
}

/// Refined upper bound: hierarchical MI term plus the training error. For
/// `s_max = 1` the MI term is empty and the bound degrades to `eps_train`
/// with `applicable = false`.
pub fn refined_bound(
    d: &dyn SequenceDistribution,
    s_max: usize,
    eps_train: f64,
    mode: SubsetMode,
    seed: u64,
) -> Result<BoundValue> {
    if s_max == 0 || s_max > d.seq_len() {
        return Err(Error::InvalidArgument(format!(
            "s_max must be in 1..=L, got {s_max}"
        )));
    }
    let (part, stderr) = hierarchical_mi_part(d, s_max, mode, seed)?;
    Ok(BoundValue {
        value: part + eps_train,
        stderr,
        applicable: s_max > 1,
    })
}

/// Lower bound for the adversarial schedule: one eighth of the refined
/// bound's MI term plus the training error. Requires `s_max` a power of two
/// greater than 1 (the adversarial schedule draws sizes from
/// `{s_max, s_max/2}`).
pub fn lower_bound_value(
    d: &dyn SequenceDistribution,
    s_max: usize,
    eps_train: f64,
    mode: SubsetMode,
    seed: u64,
) -> Result<BoundValue> {
    if s_max < 2 || !s_max.is_power_of_two() || s_max > d.seq_len() {
        return Err(Error::InvalidArgument(format!(
            "lower bound needs s_max a power of two in 2..=L, got {s_max}"
        )));
    }
    let (part, stderr) = hierarchical_mi_part(d, s_max, mode, seed)?;
    Ok(BoundValue {
        value: part / 8.0 + eps_train,
        stderr: stderr / 8.0,
        applicable: true,
    })
}

/// All bound values for one instance and schedule.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub mi_sum: f64,
    pub eps_train: f64,
    pub thm1_upper: f64,
    pub corollary_upper: f64,
    pub corollary_c1: f64,
    pub refined_upper: f64,
    pub refined_stderr: f64,
    pub refined_applicable: bool,
    /// Lower bound evaluated at `lower_s_max` (the largest power of two not
    /// exceeding the schedule's maximum size); diagnostic when the schedule
    /// is not the adversarial one.
    pub lower_bound: f64,
    pub lower_stderr: f64,
    pub lower_s_max: usize,
    pub lower_applicable: bool,
}

/// Evaluates every bound for the given schedule and training error.
pub fn bound_report(
    d: &dyn SequenceDistribution,
    schedule: &MaskSchedule,
    eps_train: f64,
    mode: SubsetMode,
    seed: u64,
) -> Result<BoundReport> {
    let s_max = schedule.s_max();
    let refined = refined_bound(d, s_max, eps_train, mode, seed)?;
    let lower_s_max = prev_power_of_two(s_max);
    let lower = if lower_s_max > 1 {
        lower_bound_value(d, lower_s_max, eps_train, mode, seed)?
    } else {
        BoundValue {
            value: eps_train,
            stderr: 0.0,
            applicable: false,
        }
    };
    Ok(BoundReport {
        mi_sum: mi_sum(d),
        eps_train,
        thm1_upper: thm1_bound(d, schedule, eps_train),
        corollary_upper: corollary_bound(d, schedule, eps_train),
        corollary_c1: corollary_c1(schedule),
        refined_upper: refined.value,
        refined_stderr: refined.stderr,
        refined_applicable: refined.applicable,
        lower_bound: lower.value,
        lower_stderr: lower.stderr,
        lower_s_max,
        lower_applicable: lower.applicable,
    })
}

fn prev_power_of_two(s: usize) -> usize {
    debug_assert!(s >= 1);
    if s.is_power_of_two() {
        s
    } else {
        s.next_power_of_two() / 2
    }
}

// ---------------------------------------------------------------------------
// Token error rate
// ---------------------------------------------------------------------------

/// Exact token-error-rate gap between the output law and the data law.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TerGap {
    /// `log2 TER(p_out) - log2 TER(p_data)` in bits per token.
    pub gap_bits: f64,
    /// Residual between the direct gap and the KL route
    /// `KL(p_data || p_out) / (L ln 2)`; the two are algebraically equal.
    pub residual: f64,
}

/// Exact TER gap: the output marginal `p_out = E_M[p_out(.|M)]` is built by
/// full trajectory enumeration, then the gap is computed both directly from
/// the per-token log-perplexities and through the KL route.
pub fn ter_gap_exact(
    d: &dyn SequenceDistribution,
    p: &MaskPredictor,
    schedule: &MaskSchedule,
) -> Result<TerGap> {
    let space = SeqSpace::guarded(d)?;
    let count = trajectory_count(schedule.sizes()).unwrap_or(u128::MAX);
    if count.saturating_mul(space.rows as u128) > TABLE_GUARD as u128 {
        return Err(Error::TooLarge(format!(
            "{count} trajectories x {} rows exceeds guard {TABLE_GUARD}",
            space.rows
        )));
    }
    let mut cache = CondCache::new(*p);
    let mut out_prob = vec![0.0f64; space.rows];
    let mut x = Sequence::new(vec![0; space.len]);
    for (traj, prob) in enumerate_trajectories(schedule)? {
        for (idx, acc) in out_prob.iter_mut().enumerate() {
            space.decode_into(idx, &mut x);
            *acc += prob * output_log_prob_cached(&x, &traj, &mut cache)?.exp();
        }
    }
    let ln2 = std::f64::consts::LN_2;
    let l = space.len as f64;
    let mut direct = 0.0;
    let mut kl = 0.0;
    for (idx, q) in out_prob.iter().enumerate() {
        space.decode_into(idx, &mut x);
        let lp = d.log_prob(&x);
        if lp == f64::NEG_INFINITY {
            continue;
        }
        let px = lp.exp();
        let lq = q.ln();
        direct += px * (-(lq / ln2) / l) - px * (-(lp / ln2) / l);
        kl += px * (lp - lq);
    }
    let kl_route = kl / (l * ln2);
    Ok(TerGap {
        gap_bits: direct,
        residual: (direct - kl_route).abs(),
    })
}

/// Monte Carlo TER-gap estimate: draws `n` data sequences and plugs in an
/// `n_trajectories`-sample estimate of the output marginal at each. The
/// plug-in log makes this consistent but biased, unlike [`kl_mc`]; scale
/// diagnostics only. Returns `(gap_bits, stderr)`.
pub fn ter_gap_mc(
    d: &dyn SequenceDistribution,
    p: &MaskPredictor,
    schedule: &MaskSchedule,
    n: usize,
    n_trajectories: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n < 2 || n_trajectories == 0 {
        return Err(Error::InvalidArgument(
            "ter_gap_mc needs n >= 2 and at least one trajectory draw".into(),
        ));
    }
    let ln2 = std::f64::consts::LN_2;
    let l = d.seq_len() as f64;
    let values: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let mut rng = stream_rng(seed, r as u64);
            let x = d.sample_sequence(&mut rng);
            let mut acc = 0.0;
            for _ in 0..n_trajectories {
                let traj = MaskTrajectory::sample(schedule, &mut rng);
                acc += output_log_prob(&x, &traj, p)?.exp();
            }
            let lq = (acc / n_trajectories as f64).ln();
            Ok((d.log_prob(&x) - lq) / (l * ln2))
        })
        .enumerate()
        .map(|(r, res)| {
            res.map_err(|e| Error::AtSample {
                index: r as u64,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_stderr(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{PottsChain, TabularDistribution};
    use crate::seq::Vocabulary;
    use approx::assert_abs_diff_eq;

    fn vocab(k: usize) -> Vocabulary {
        Vocabulary::new(k).unwrap()
    }

    fn ln3() -> f64 {
        3.0f64.ln()
    }

    fn pair_mi() -> f64 {
        0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln()
    }

    #[test]
    fn all_ones_schedule_has_zero_error() {
        let mut rng = stream_rng(201, 0);
        let d = TabularDistribution::random(vocab(2), 4, 0.8, &mut rng).unwrap();
        let p = MaskPredictor::optimal(&d);
        let schedule = MaskSchedule::new(vec![1; 4], 4).unwrap();
        let report = kl_expected_exact(&d, &p, &schedule).unwrap();
        assert!(report.estimate.abs() <= 1e-12, "{}", report.estimate);
        assert_eq!(report.stderr, 0.0);
    }

    #[test]
    fn single_step_pair_error_is_the_mutual_information() {
        let d = PottsChain::new(vocab(2), 2, ln3()).unwrap();
        let p = MaskPredictor::optimal(&d);
        let schedule = MaskSchedule::new(vec![2], 2).unwrap();
        let traj = MaskTrajectory::new(vec![vec![0, 1]], schedule.clone()).unwrap();
        let kl = kl_given_mask_exact(&d, &p, &traj).unwrap();
        assert_abs_diff_eq!(kl, pair_mi(), epsilon = 1e-12);
        let expected = kl_expected_exact(&d, &p, &schedule).unwrap();
        assert_abs_diff_eq!(expected.estimate, kl, epsilon = 1e-15);
    }

    #[test]
    fn product_distribution_has_zero_error_for_any_trajectory() {
        let d = TabularDistribution::product(
            vocab(2),
            &[vec![0.2, 0.8], vec![0.5, 0.5], vec![0.7, 0.3]],
        )
        .unwrap();
        let p = MaskPredictor::optimal(&d);
        for sizes in [vec![3], vec![2, 1], vec![1, 2]] {
            let schedule = MaskSchedule::new(sizes, 3).unwrap();
            for (traj, _) in enumerate_trajectories(&schedule).unwrap() {
                assert!(kl_given_mask_exact(&d, &p, &traj).unwrap().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn enumeration_agrees_with_decomposition() {
        let mut rng = stream_rng(203, 0);
        let d = TabularDistribution::random(vocab(2), 3, 0.7, &mut rng).unwrap();
        let p = MaskPredictor::optimal(&d);
        for sizes in [vec![3], vec![2, 1], vec![1, 2], vec![1, 1, 1]] {
            let schedule = MaskSchedule::new(sizes.clone(), 3).unwrap();
            let a = kl_expected_exact(&d, &p, &schedule).unwrap().estimate;
            let b = kl_decomposition_exact(&d, &schedule).unwrap();
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn decomposition_is_zero_for_independent_tokens() {
        let d = PottsChain::new(vocab(3), 4, 0.0).unwrap();
        for sizes in [vec![4], vec![2, 2], vec![3, 1]] {
            let schedule = MaskSchedule::new(sizes, 4).unwrap();
            assert!(kl_decomposition_exact(&d, &schedule).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn perturbed_error_exceeds_optimal_by_training_error() {
        let mut rng = stream_rng(205, 0);
        let d = TabularDistribution::random(vocab(2), 3, 0.6, &mut rng).unwrap();
        let schedule = MaskSchedule::new(vec![2, 1], 3).unwrap();
        for alpha in [0.0, 0.3, 1.0] {
            let p = MaskPredictor::perturbed(&d, alpha).unwrap();
            let residual = decoupling_check(&d, &p, &schedule).unwrap();
            assert!(residual < 1e-9, "alpha {alpha}: residual {residual}");
        }
    }

    #[test]
    fn two_batch_identity_small_cases() {
        let mut rng = stream_rng(207, 0);
        let d3 = TabularDistribution::random(vocab(2), 3, 0.7, &mut rng).unwrap();
        let schedule = MaskSchedule::new(vec![2, 1], 3).unwrap();
        for (traj, _) in enumerate_trajectories(&schedule).unwrap() {
            let mut split_rng = stream_rng(208, 0);
            let r = two_batch_identity_check(&d3, &traj, &mut split_rng).unwrap();
            assert!(r < 1e-10, "residual {r}");
        }

        let d4 = TabularDistribution::random(vocab(2), 4, 0.7, &mut rng).unwrap();
        let schedule = MaskSchedule::new(vec![4], 4).unwrap();
        let traj = MaskTrajectory::new(vec![vec![0, 1, 2, 3]], schedule).unwrap();
        let mut split_rng = stream_rng(209, 0);
        let r = two_batch_identity_check(&d4, &traj, &mut split_rng).unwrap();
        assert!(r < 1e-10, "residual {r}");

        let indep = PottsChain::new(vocab(2), 3, 0.0).unwrap();
        let schedule = MaskSchedule::new(vec![2, 1], 3).unwrap();
        for (traj, _) in enumerate_trajectories(&schedule).unwrap() {
            let mut split_rng = stream_rng(210, 0);
            let r = two_batch_identity_check(&indep, &traj, &mut split_rng).unwrap();
            assert!(r < 1e-12, "residual {r}");
        }
    }

    #[test]
    fn mc_matches_exact_on_pair() {
        let d = PottsChain::new(vocab(2), 2, ln3()).unwrap();
        let p = MaskPredictor::optimal(&d);
        let schedule = MaskSchedule::new(vec![2], 2).unwrap();
        let report = kl_mc(
            &d,
            &p,
            ScheduleSource::Fixed(&schedule),
            UnmaskPolicy::UniformForwardConsistent,
            100_000,
            99,
        )
        .unwrap();
        assert!(
            (report.estimate - pair_mi()).abs() <= 3.0 * report.stderr,
            "{} vs {} +- {}",
            report.estimate,
            pair_mi(),
            report.stderr
        );
        assert_eq!(report.method, KlMethod::MonteCarlo);
        assert_eq!(report.n_samples, 100_000);
    }

    #[test]
    fn mc_near_zero_for_all_ones() {
        let d = PottsChain::new(vocab(2), 4, ln3()).unwrap();
        let p = MaskPredictor::optimal(&d);
        let schedule = MaskSchedule::new(vec![1; 4], 4).unwrap();
        let report = kl_mc(
            &d,
            &p,
            ScheduleSource::Fixed(&schedule),
            UnmaskPolicy::UniformForwardConsistent,
            20_000,
            7,
        )
        .unwrap();
        assert!(report.estimate.abs() <= 3.0 * report.stderr + 1e-12);
    }

    #[test]
    fn mc_agrees_with_exact_enumeration() {
        let mut rng = stream_rng(211, 0);
        let d = TabularDistribution::random(vocab(2), 4, 0.8, &mut rng).unwrap();
        let p = MaskPredictor::optimal(&d);
        let schedule = MaskSchedule::new(vec![2, 2], 4).unwrap();
        let exact = kl_expected_exact(&d, &p, &schedule).unwrap().estimate;
        let mc = kl_mc(
            &d,
            &p,
            ScheduleSource::Fixed(&schedule),
            UnmaskPolicy::UniformForwardConsistent,
            100_000,
            5,
        )
        .unwrap();
        assert!(
            (mc.estimate - exact).abs() <= 3.0 * mc.stderr,
            "mc {} vs exact {exact} +- {}",
            mc.estimate,
            mc.stderr
        );
    }

    #[test]
    fn mc_is_deterministic_across_thread_counts() {
        let d = PottsChain::new(vocab(3), 6, 1.0).unwrap();
        let p = MaskPredictor::optimal(&d);
        let schedule = MaskSchedule::new(vec![3, 2, 1], 6).unwrap();
        let run = || {
            kl_mc(
                &d,
                &p,
                ScheduleSource::Fixed(&schedule),
                UnmaskPolicy::UniformForwardConsistent,
                2_000,
                1234,
            )
            .unwrap()
            .estimate
        };
        let a = run();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(run);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn thm1_bound_values() {
        let d = PottsChain::new(vocab(2), 2, ln3()).unwrap();
        // s_max = 1: prefactor 0, bound equals eps.
        let ones = MaskSchedule::new(vec![1, 1], 2).unwrap();
        assert_abs_diff_eq!(thm1_bound(&d, &ones, 0.25), 0.25, epsilon = 1e-15);
        // s_max = 2 on the pair: (1/2) * 2I = I, tight.
        let single = MaskSchedule::new(vec![2], 2).unwrap();
        assert_abs_diff_eq!(thm1_bound(&d, &single, 0.0), pair_mi(), epsilon = 1e-12);
        // Independent tokens: bound equals eps for any schedule.
        let indep = PottsChain::new(vocab(2), 2, 0.0).unwrap();
        assert_abs_diff_eq!(thm1_bound(&indep, &single, 0.125), 0.125, epsilon = 1e-15);
    }

    #[test]
    fn corollary_constants() {
        let balanced = MaskSchedule::balanced(100, 10).unwrap();
        assert_abs_diff_eq!(corollary_c1(&balanced), 1.0, epsilon = 1e-15);
        let uneven = MaskSchedule::new(vec![4, 2, 2], 8).unwrap();
        assert_abs_diff_eq!(corollary_c1(&uneven), 1.5, epsilon = 1e-15);
        let indep = PottsChain::new(vocab(2), 8, 0.0).unwrap();
        assert_abs_diff_eq!(corollary_bound(&indep, &uneven, 0.5), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn refined_bound_edge_cases() {
        let d = PottsChain::new(vocab(2), 4, ln3()).unwrap();
        let b = refined_bound(&d, 1, 0.125, SubsetMode::Exact, 0).unwrap();
        assert!(!b.applicable);
        assert_abs_diff_eq!(b.value, 0.125, epsilon = 1e-15);

        let indep = PottsChain::new(vocab(2), 4, 0.0).unwrap();
        let b = refined_bound(&indep, 4, 0.125, SubsetMode::Exact, 0).unwrap();
        assert!(b.applicable);
        assert_abs_diff_eq!(b.value, 0.125, epsilon = 1e-12);

        assert!(refined_bound(&d, 5, 0.0, SubsetMode::Exact, 0).is_err());
        assert!(refined_bound(&d, 0, 0.0, SubsetMode::Exact, 0).is_err());
    }

    #[test]
    fn refined_dominated_by_thm1() {
        for case in 0..20 {
            let mut rng = stream_rng(213, case);
            let d = TabularDistribution::random(vocab(2), 4, 0.7, &mut rng).unwrap();
            for s_max in [2usize, 4] {
                let sizes = match s_max {
                    2 => vec![2, 2],
                    _ => vec![4],
                };
                let schedule = MaskSchedule::new(sizes, 4).unwrap();
                let refined = refined_bound(&d, s_max, 0.0, SubsetMode::Exact, 0)
                    .unwrap()
                    .value;
                let thm1 = thm1_bound(&d, &schedule, 0.0);
                assert!(
                    refined <= thm1 + 1e-10,
                    "case {case}, s_max {s_max}: refined {refined} > thm1 {thm1}"
                );
            }
        }
    }

    #[test]
    fn lower_bound_is_an_eighth_of_refined_mi_part() {
        let d = PottsChain::new(vocab(2), 4, ln3()).unwrap();
        let eps = 0.0625;
        for s_max in [2usize, 4] {
            let refined = refined_bound(&d, s_max, eps, SubsetMode::Exact, 0).unwrap();
            let lower = lower_bound_value(&d, s_max, eps, SubsetMode::Exact, 0).unwrap();
            assert_abs_diff_eq!(
                lower.value - eps,
                (refined.value - eps) / 8.0,
                epsilon = 1e-12
            );
        }
        assert!(lower_bound_value(&d, 3, 0.0, SubsetMode::Exact, 0).is_err());
        assert!(lower_bound_value(&d, 1, 0.0, SubsetMode::Exact, 0).is_err());
    }

    #[test]
    fn lower_bound_for_independent_tokens_is_eps() {
        let indep = PottsChain::new(vocab(2), 4, 0.0).unwrap();
        let b = lower_bound_value(&indep, 2, 0.5, SubsetMode::Exact, 0).unwrap();
        assert_abs_diff_eq!(b.value, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn measured_error_respects_lower_bound() {
        let d = PottsChain::new(vocab(2), 4, ln3()).unwrap();
        let p = MaskPredictor::optimal(&d);
        let lower = lower_bound_value(&d, 2, 0.0, SubsetMode::Exact, 0).unwrap();
        let measured = kl_mc(
            &d,
            &p,
            ScheduleSource::LowerBound { len: 4, s_max: 2 },
            UnmaskPolicy::UniformForwardConsistent,
            100_000,
            17,
        )
        .unwrap();
        assert!(
            measured.estimate >= lower.value - 3.0 * measured.stderr,
            "measured {} vs lower {}",
            measured.estimate,
            lower.value
        );
    }

    #[test]
    fn mi_sum_small_cases() {
        let indep = PottsChain::new(vocab(2), 5, 0.0).unwrap();
        assert!(mi_sum(&indep).abs() < 1e-12);
        let pair = PottsChain::new(vocab(2), 2, ln3()).unwrap();
        assert_abs_diff_eq!(mi_sum(&pair), 2.0 * pair_mi(), epsilon = 1e-12);
    }

    #[test]
    fn mi_sum_matches_three_token_window_at_scale() {
        // The Markov reduction for an interior token only involves adjacent
        // neighbors, so a direct small-joint computation must agree.
        let d = PottsChain::new(vocab(10), 100, 2.0).unwrap();
        let small = PottsChain::new(vocab(10), 3, 2.0).unwrap();
        let interior = small.mi_token_rest(1);
        let boundary = small.mi_token_rest(0);
        let expected = 98.0 * interior + 2.0 * boundary;
        assert!(mi_sum(&d) > 0.0);
        assert_abs_diff_eq!(mi_sum(&d), expected, epsilon = 1e-9);
    }

    #[test]
    fn ter_gap_zero_when_output_matches_data() {
        let d = PottsChain::new(vocab(2), 3, ln3()).unwrap();
        let p = MaskPredictor::optimal(&d);
        let schedule = MaskSchedule::new(vec![1, 1, 1], 3).unwrap();
        let gap = ter_gap_exact(&d, &p, &schedule).unwrap();
        assert!(gap.gap_bits.abs() < 1e-12);
        assert!(gap.residual < 1e-12);
    }

    #[test]
    fn uniform_baseline_gap_at_most_log2_k() {
        let d = PottsChain::new(vocab(3), 3, ln3()).unwrap();
        let p = MaskPredictor::perturbed(&d, 1.0).unwrap();
        let schedule = MaskSchedule::new(vec![3], 3).unwrap();
        let gap = ter_gap_exact(&d, &p, &schedule).unwrap();
        assert!(gap.gap_bits <= 3.0f64.log2() + 1e-12);
        assert!(gap.gap_bits >= 0.0);
        assert!(gap.residual < 1e-9);
    }

    #[test]
    fn ter_gap_dominated_by_expected_kl() {
        // Convexity: KL(p || E_M q_M) <= E_M KL(p || q_M).
        let d = PottsChain::new(vocab(2), 3, ln3()).unwrap();
        let p = MaskPredictor::optimal(&d);
        let schedule = MaskSchedule::new(vec![2, 1], 3).unwrap();
        let gap = ter_gap_exact(&d, &p, &schedule).unwrap();
        let expected_kl = kl_expected_exact(&d, &p, &schedule).unwrap().estimate;
        let ln2 = std::f64::consts::LN_2;
        assert!(gap.gap_bits * 3.0 * ln2 <= expected_kl + 1e-9);
        assert!(gap.residual < 1e-9);
    }
}
