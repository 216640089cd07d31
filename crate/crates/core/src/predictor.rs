//! Mask predictors: factorized models `p̂ = Π p̂_i` that map a partially
//! masked sequence to per-position token distributions.
//!
//! The optimal predictor returns the oracle's true conditional at every
//! masked position. The perturbed predictor mixes that conditional with the
//! uniform distribution, `(1 - α)·p* + α·uniform`, giving a predictor whose
//! training error has known magnitude and closed-form endpoints (α = 0 is
//! optimal, α = 1 is uniform). Fitting a parametric predictor from samples is
//! out of scope; the theory only consumes the training-error value.

use rand::distr::Distribution as _;
use rand::RngCore;
use std::collections::BTreeMap;

use itertools::Itertools;

use crate::dist::{Categorical, SequenceDistribution, EXACT_SUBSET_LIMIT, TABLE_GUARD};
use crate::seq::{project, MaskSchedule, MaskedSequence, Sequence};
use crate::util::{binomial, mean_stderr, table_size};
use crate::{Error, Result};

/// A factorized mask predictor backed by an exact oracle.
#[derive(Clone, Copy)]
pub enum MaskPredictor<'a> {
    /// The minimizer of the masked-prediction objective: the oracle's true
    /// conditional at every masked position.
    Optimal { oracle: &'a dyn SequenceDistribution },
    /// `(1 - alpha)·optimal + alpha·uniform` at every masked position.
    Perturbed {
        oracle: &'a dyn SequenceDistribution,
        alpha: f64,
    },
}

impl<'a> MaskPredictor<'a> {
    pub fn optimal(oracle: &'a dyn SequenceDistribution) -> Self {
        Self::Optimal { oracle }
    }

    pub fn perturbed(oracle: &'a dyn SequenceDistribution, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be in [0, 1], got {alpha}"
            )));
        }
        Ok(Self::Perturbed { oracle, alpha })
    }

    pub fn oracle(&self) -> &'a dyn SequenceDistribution {
        match self {
            Self::Optimal { oracle } | Self::Perturbed { oracle, .. } => *oracle,
        }
    }

    /// Mixture weight on the uniform distribution (0 for the optimal
    /// predictor).
    pub fn alpha(&self) -> f64 {
        match self {
            Self::Optimal { .. } => 0.0,
            Self::Perturbed { alpha, .. } => *alpha,
        }
    }

    /// Per-position prediction `p̂_i(· | observed)` at a masked position.
    pub fn token_conditional(
        &self,
        position: usize,
        observed: &MaskedSequence,
    ) -> Result<Categorical> {
        let base = self.oracle().conditional_token(position, observed)?;
        Ok(match self {
            Self::Optimal { .. } => base,
            Self::Perturbed { alpha, .. } => base.mix_with_uniform(*alpha),
        })
    }
}

impl std::fmt::Debug for MaskPredictor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Optimal { .. } => write!(f, "MaskPredictor::Optimal"),
            Self::Perturbed { alpha, .. } => {
                write!(f, "MaskPredictor::Perturbed {{ alpha: {alpha} }}")
            }
        }
    }
}

/// Predictions for every masked position of `y`, keyed by position.
pub fn predict(
    p: &MaskPredictor,
    y: &MaskedSequence,
) -> Result<BTreeMap<usize, Categorical>> {
    let positions: Vec<usize> = y.masked_positions().collect();
    if positions.is_empty() {
        return Err(Error::InvalidArgument(
            "sequence has no masked positions".into(),
        ));
    }
    positions
        .into_iter()
        .map(|i| Ok((i, p.token_conditional(i, y)?)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMethod {
    Exact,
    MonteCarlo,
}

/// Expected log-likelihood gap between the optimal and the deployed
/// predictor, in nats. Nonnegative for any predictor.
#[derive(Debug, Clone, Copy)]
pub struct TrainingError {
    pub value: f64,
    /// 0 for the exact method.
    pub stderr: f64,
    pub method: EvalMethod,
    pub n_samples: u64,
}

/// Evaluation mode for [`training_error`].
pub enum TrainingErrorMode<'r> {
    Exact,
    MonteCarlo { n: usize, rng: &'r mut dyn RngCore },
}

/// Evaluates the training error: the expectation over a step `τ` drawn with
/// probability `s_τ / L`, a data sequence, and a uniformly random mask set of
/// size `|M_τ| = s_1 + ... + s_τ`, of
/// `(L/|M_τ|) Σ_{i in M_τ} log(p*_i / p̂_i)` at the masked positions.
///
/// Exact mode enumerates all three expectations (guarded); Monte Carlo mode
/// samples them jointly `n` times and reports a standard error.
pub fn training_error(
    p: &MaskPredictor,
    d: &dyn SequenceDistribution,
    schedule: &MaskSchedule,
    mode: TrainingErrorMode,
) -> Result<TrainingError> {
    let len = d.seq_len();
    if schedule.len() != len {
        return Err(Error::InvalidArgument(format!(
            "schedule length {} does not match sequence length {len}",
            schedule.len()
        )));
    }
    let alpha = p.alpha();
    let cumulative = schedule.cumulative();
    match mode {
        TrainingErrorMode::Exact => {
            let k = d.vocab().size();
            let rows = table_size(k, len)
                .filter(|&s| s <= TABLE_GUARD)
                .ok_or_else(|| Error::TooLarge(format!("K^L = {k}^{len} exceeds guard")))?;
            for &c in &cumulative {
                if binomial(len, c).is_none_or(|n| n > EXACT_SUBSET_LIMIT) {
                    return Err(Error::TooLarge(format!(
                        "C({len}, {c}) mask sets exceed guard {EXACT_SUBSET_LIMIT}"
                    )));
                }
            }
            let mut total = 0.0;
            for (t, &c) in cumulative.iter().enumerate() {
                let step_weight = schedule.sizes()[t] as f64 / len as f64;
                let n_masks = binomial(len, c).expect("guarded") as f64;
                for mask in (0..len).combinations(c) {
                    let keep: Vec<usize> = (0..len).filter(|i| !mask.contains(i)).collect();
                    let mut inner = 0.0;
                    let mut tokens = vec![0usize; len];
                    for idx in 0..rows {
                        decode(idx, k, &mut tokens);
                        let x = Sequence::new(tokens.clone());
                        let px = d.log_prob(&x).exp();
                        if px == 0.0 {
                            continue;
                        }
                        let observed = project(&x, &keep)?;
                        let mut gap = 0.0;
                        for &i in &mask {
                            let base = d.conditional_token(i, &observed)?;
                            let lp_star = base.log_prob(x.get(i));
                            let lp_hat = base.mix_with_uniform(alpha).log_prob(x.get(i));
                            gap += lp_star - lp_hat;
                        }
                        inner += px * gap;
                    }
                    total += step_weight / n_masks * (len as f64 / c as f64) * inner;
                }
            }
            Ok(TrainingError {
                value: total,
                stderr: 0.0,
                method: EvalMethod::Exact,
                n_samples: 0,
            })
        }
        TrainingErrorMode::MonteCarlo { n, rng } => {
            if n < 2 {
                return Err(Error::InvalidArgument(
                    "Monte Carlo mode needs n >= 2".into(),
                ));
            }
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                let u: f64 = rand::distr::StandardUniform.sample(rng);
                let mut acc = 0.0;
                let mut step = schedule.steps() - 1;
                for (t, &s) in schedule.sizes().iter().enumerate() {
                    acc += s as f64 / len as f64;
                    if u < acc {
                        step = t;
                        break;
                    }
                }
                let c = cumulative[step];
                let x = d.sample_sequence(rng);
                let picked = rand::seq::index::sample(rng, len, c);
                let mut is_masked = vec![false; len];
                for i in picked.iter() {
                    is_masked[i] = true;
                }
                let keep: Vec<usize> = (0..len).filter(|&i| !is_masked[i]).collect();
                let observed = project(&x, &keep)?;
                let mut gap = 0.0;
                for i in (0..len).filter(|&i| is_masked[i]) {
                    let base = d.conditional_token(i, &observed)?;
                    let lp_star = base.log_prob(x.get(i));
                    let lp_hat = base.mix_with_uniform(alpha).log_prob(x.get(i));
                    gap += lp_star - lp_hat;
                }
                values.push(len as f64 / c as f64 * gap);
            }
            let (value, stderr) = mean_stderr(&values);
            Ok(TrainingError {
                value,
                stderr,
                method: EvalMethod::MonteCarlo,
                n_samples: n as u64,
            })
        }
    }
}

fn decode(idx: usize, k: usize, tokens: &mut [usize]) {
    let mut rest = idx;
    for t in tokens.iter_mut().rev() {
        *t = rest % k;
        rest /= k;
    }
}
