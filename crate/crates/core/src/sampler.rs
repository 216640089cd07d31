//! The reverse (generation) process: starting from the fully masked sequence,
//! reveal positions step by step, drawing each revealed token independently
//! from the predictor's conditional given the current partial sequence.
//!
//! Two unmasking policies are provided. The uniform policy chooses reveal
//! sets uniformly at random among masked positions, which reproduces the
//! forward trajectory law exactly; the convergence bounds apply only under
//! this policy. The entropy-adaptive policy reveals the positions whose
//! predictor conditional has the lowest entropy (ties broken by ascending
//! index) and is reported as a diagnostic.

use rand::RngCore;

use crate::predictor::MaskPredictor;
use crate::seq::{MaskSchedule, MaskTrajectory, MaskedSequence, Sequence};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnmaskPolicy {
    /// Reveal sets drawn uniformly at random; matches the forward process.
    UniformForwardConsistent,
    /// Reveal the masked positions with the lowest conditional entropy.
    EntropyAdaptive,
}

/// One reverse-process run.
#[derive(Debug, Clone)]
pub struct SampleRun {
    /// The fully unmasked output `Y_0`.
    pub output: Sequence,
    /// The realized trajectory (forward-time increments).
    pub trajectory: MaskTrajectory,
    /// `Σ_{i in D_t} log p̂_i` per step, in reveal order (the step that
    /// reveals from the all-masked sequence comes first). Their sum is the
    /// log probability of `output` given the trajectory.
    pub per_step_log_probs: Vec<f64>,
}

/// Runs the reverse process for one sample.
pub fn sample(
    p: &MaskPredictor,
    schedule: &MaskSchedule,
    policy: UnmaskPolicy,
    rng: &mut dyn RngCore,
) -> Result<SampleRun> {
    let len = schedule.len();
    let mut y = MaskedSequence::all_masked(len);
    let mut increments_rev: Vec<Vec<usize>> = Vec::with_capacity(schedule.steps());
    let mut per_step = Vec::with_capacity(schedule.steps());
    for &s in schedule.sizes().iter().rev() {
        let mut positions = match policy {
            UnmaskPolicy::UniformForwardConsistent => {
                let masked: Vec<usize> = y.masked_positions().collect();
                let picked = rand::seq::index::sample(rng, masked.len(), s);
                picked.iter().map(|k| masked[k]).collect::<Vec<_>>()
            }
            UnmaskPolicy::EntropyAdaptive => adaptive_trajectory_step(p, &y, s)?,
        };
        positions.sort_unstable();
        // All conditionals for this step are taken against the same context,
        // then the revealed tokens are written back.
        let conds = positions
            .iter()
            .map(|&i| p.token_conditional(i, &y))
            .collect::<Result<Vec<_>>>()?;
        let mut step_lp = 0.0;
        for (&i, cond) in positions.iter().zip(&conds) {
            let token = cond.sample(rng);
            step_lp += cond.log_prob(token);
            y.set(i, token);
        }
        per_step.push(step_lp);
        increments_rev.push(positions);
    }
    increments_rev.reverse();
    let trajectory = MaskTrajectory::new(increments_rev, schedule.clone())?;
    Ok(SampleRun {
        output: y.into_sequence()?,
        trajectory,
        per_step_log_probs: per_step,
    })
}

/// Exact log probability of producing `x` given a fixed trajectory:
/// the sum over reveal steps of `Σ_{i in D_t} log p̂_i(x_i | x∘W_t)`.
pub fn output_log_prob(x: &Sequence, traj: &MaskTrajectory, p: &MaskPredictor) -> Result<f64> {
    Ok(output_step_log_probs(x, traj, p)?.into_iter().sum())
}

/// Per-step terms of [`output_log_prob`], in reveal order.
pub fn output_step_log_probs(
    x: &Sequence,
    traj: &MaskTrajectory,
    p: &MaskPredictor,
) -> Result<Vec<f64>> {
    if x.len() != traj.len() {
        return Err(Error::InvalidArgument(
            "sequence and trajectory lengths differ".into(),
        ));
    }
    let mut y = MaskedSequence::all_masked(x.len());
    let mut out = Vec::with_capacity(traj.steps());
    for (_, inc) in traj.reveal_order() {
        let mut step_lp = 0.0;
        for &i in inc {
            let cond = p.token_conditional(i, &y)?;
            step_lp += cond.log_prob(x.get(i));
        }
        for &i in inc {
            y.set(i, x.get(i));
        }
        out.push(step_lp);
    }
    Ok(out)
}

/// Entropy-adaptive reveal choice: the `s` masked positions whose predictor
/// conditional has the smallest entropy, ties broken by ascending index.
pub fn adaptive_trajectory_step(
    p: &MaskPredictor,
    y: &MaskedSequence,
    s: usize,
) -> Result<Vec<usize>> {
    let masked: Vec<usize> = y.masked_positions().collect();
    if masked.len() < s {
        return Err(Error::InvalidArgument(format!(
            "need {s} masked positions, only {} left",
            masked.len()
        )));
    }
    let mut ranked: Vec<(f64, usize)> = masked
        .into_iter()
        .map(|i| Ok((p.token_conditional(i, y)?.entropy(), i)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite entropy").then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = ranked[..s].iter().map(|&(_, i)| i).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// The trajectory the entropy-adaptive policy takes when the revealed values
/// come from `x`. It is a deterministic function of `x`, which makes the
/// adaptive output law an adaptive-order factorization whose density at `x`
/// can be evaluated exactly.
pub fn adaptive_trajectory_for(
    x: &Sequence,
    schedule: &MaskSchedule,
    p: &MaskPredictor,
) -> Result<MaskTrajectory> {
    let mut y = MaskedSequence::all_masked(x.len());
    let mut increments_rev = Vec::with_capacity(schedule.steps());
    for &s in schedule.sizes().iter().rev() {
        let positions = adaptive_trajectory_step(p, &y, s)?;
        for &i in &positions {
            y.set(i, x.get(i));
        }
        increments_rev.push(positions);
    }
    increments_rev.reverse();
    MaskTrajectory::new(increments_rev, schedule.clone())
}
