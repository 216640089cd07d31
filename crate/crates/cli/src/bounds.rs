//! The `bounds` command: evaluate every convergence-bound value for the
//! configured instance and emit them as JSON.

use serde::Serialize;

use maskdiff_core::analysis::{self, BoundReport, SubsetMode};
use maskdiff_core::predictor::{training_error, MaskPredictor, TrainingErrorMode};
use maskdiff_core::util::{derive_seed, stream_rng};

use crate::config::ExperimentConfig;
use crate::Result;

#[derive(Debug, Clone, Serialize)]
pub struct BoundsOutput {
    pub schedule: Vec<usize>,
    pub t: usize,
    pub s_max: usize,
    pub k: usize,
    pub l: usize,
    pub predictor: String,
    pub eps_train_stderr: f64,
    #[serde(flatten)]
    pub bounds: BoundReport,
}

pub fn run_bounds(config: &ExperimentConfig, seed: u64) -> Result<BoundsOutput> {
    let d = config.distribution.build()?;
    let mut schedule_rng = stream_rng(derive_seed(seed, 0), 0);
    let schedule = config.schedule.build(d.seq_len(), &mut schedule_rng)?;
    let p = config.predictor.build(d.as_ref())?;
    let (eps, eps_stderr) = if matches!(p, MaskPredictor::Optimal { .. }) {
        (0.0, 0.0)
    } else {
        match training_error(&p, d.as_ref(), &schedule, TrainingErrorMode::Exact) {
            Ok(e) => (e.value, 0.0),
            Err(maskdiff_core::Error::TooLarge(_)) => {
                let mut rng = stream_rng(derive_seed(seed, 1), 0);
                let e = training_error(
                    &p,
                    d.as_ref(),
                    &schedule,
                    TrainingErrorMode::MonteCarlo {
                        n: config.n_samples,
                        rng: &mut rng,
                    },
                )?;
                (e.value, e.stderr)
            }
            Err(e) => return Err(e.into()),
        }
    };
    let bounds = analysis::bound_report(
        d.as_ref(),
        &schedule,
        eps,
        SubsetMode::Auto,
        derive_seed(seed, 2),
    )?;
    Ok(BoundsOutput {
        t: schedule.steps(),
        s_max: schedule.s_max(),
        schedule: schedule.sizes().to_vec(),
        k: d.vocab().size(),
        l: d.seq_len(),
        predictor: config.predictor.label(),
        eps_train_stderr: eps_stderr,
        bounds,
    })
}
