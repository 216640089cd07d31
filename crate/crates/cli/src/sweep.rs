//! Sweep commands: sampling error vs iteration count (`sweep-t`) and vs
//! mutual information (`sweep-j`), with plot-ready CSV rows and fitted
//! summaries.

use serde::Serialize;

use maskdiff_core::analysis::{self, ScheduleSource, SubsetMode};
use maskdiff_core::predictor::{training_error, MaskPredictor, TrainingErrorMode};
use maskdiff_core::seq::MaskSchedule;
use maskdiff_core::util::{derive_seed, stream_rng};
use maskdiff_core::SequenceDistribution;

use crate::config::{DistributionSpec, ExperimentConfig, PredictorSpec};
use crate::output::{csv_line, fmt_f64};
use crate::stats::{ols, pearson};
use crate::{CliError, Result};

/// Default iteration grid for `sweep-t`.
pub const DEFAULT_T_GRID: &[usize] = &[2, 4, 5, 10, 20, 25, 50];

/// Default coupling grid for `sweep-j`.
pub const DEFAULT_J_GRID: &[f64] = &[0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

/// Points with `estimate < 5 * stderr` are excluded from log-log fits; their
/// logarithm is dominated by noise.
pub const LOG_FIT_SNR: f64 = 5.0;

/// Estimates below this are numerically zero (pure floating-point residuals
/// whose tiny sample spread defeats the signal-to-noise rule) and are
/// likewise excluded from log fits.
pub const LOG_FIT_FLOOR: f64 = 1e-12;

/// One sweep measurement.
#[derive(Debug, Clone, Serialize)]
pub struct SweepResultRow {
    pub k: usize,
    pub l: usize,
    pub j: f64,
    pub t: usize,
    pub s_max: usize,
    pub policy: String,
    pub n_samples: usize,
    pub seed: u64,
    pub kl_estimate: f64,
    pub kl_stderr: f64,
    pub mi_sum: f64,
    pub eps_train: f64,
    pub thm1_upper: f64,
    pub corollary_upper: f64,
    pub refined_upper: f64,
    pub lower_bound: f64,
}

pub const CSV_HEADER: &str = "k,l,j,t,s_max,policy,n_samples,seed,kl_estimate,kl_stderr,mi_sum,eps_train,thm1_upper,corollary_upper,refined_upper,lower_bound";

impl SweepResultRow {
    pub fn to_csv(&self) -> String {
        csv_line(&[
            self.k.to_string(),
            self.l.to_string(),
            fmt_f64(self.j),
            self.t.to_string(),
            self.s_max.to_string(),
            self.policy.clone(),
            self.n_samples.to_string(),
            self.seed.to_string(),
            fmt_f64(self.kl_estimate),
            fmt_f64(self.kl_stderr),
            fmt_f64(self.mi_sum),
            fmt_f64(self.eps_train),
            fmt_f64(self.thm1_upper),
            fmt_f64(self.corollary_upper),
            fmt_f64(self.refined_upper),
            fmt_f64(self.lower_bound),
        ])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    /// OLS slope of ln(kl) on ln(T) (`sweep-t` only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slope_stderr: Option<f64>,
    /// Pearson correlation of kl with mi_sum (`sweep-j` only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pearson_r: Option<f64>,
    /// T values excluded from the log-log fit as too noisy.
    pub excluded_t: Vec<usize>,
    /// Set when a summary statistic is undefined.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepOutput {
    pub rows: Vec<SweepResultRow>,
    pub summary: SweepSummary,
}

impl SweepOutput {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.to_csv());
            out.push('\n');
        }
        out
    }
}

fn potts_params(config: &ExperimentConfig) -> Result<(usize, usize, f64)> {
    match config.distribution {
        DistributionSpec::Potts { k, l, j } => Ok((k, l, j)),
        _ => Err(CliError::Config(
            "sweeps require a potts distribution".into(),
        )),
    }
}

/// Training error for the configured predictor: identically zero for the
/// optimal predictor, exact when the brute-force guards allow, Monte Carlo
/// otherwise.
fn eps_train_for(
    d: &dyn SequenceDistribution,
    predictor: &PredictorSpec,
    schedule: &MaskSchedule,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let p = predictor.build(d)?;
    if matches!(p, MaskPredictor::Optimal { .. }) {
        return Ok(0.0);
    }
    match training_error(&p, d, schedule, TrainingErrorMode::Exact) {
        Ok(e) => Ok(e.value),
        Err(maskdiff_core::Error::TooLarge(_)) => {
            let mut rng = stream_rng(seed, 0);
            let e = training_error(
                &p,
                d,
                schedule,
                TrainingErrorMode::MonteCarlo {
                    n: n_samples,
                    rng: &mut rng,
                },
            )?;
            Ok(e.value)
        }
        Err(e) => Err(e.into()),
    }
}

fn measure_row(
    config: &ExperimentConfig,
    d: &dyn SequenceDistribution,
    schedule: &MaskSchedule,
    j: f64,
    master_seed: u64,
    row_index: u64,
) -> Result<SweepResultRow> {
    let p = config.predictor.build(d)?;
    let row_seed = derive_seed(master_seed, row_index);
    let eps = eps_train_for(
        d,
        &config.predictor,
        schedule,
        config.n_samples,
        derive_seed(row_seed, 1),
    )?;
    let report = analysis::kl_mc(
        d,
        &p,
        ScheduleSource::Fixed(schedule),
        config.policy.to_policy(),
        config.n_samples,
        row_seed,
    )?;
    let bounds = analysis::bound_report(d, schedule, eps, SubsetMode::Auto, derive_seed(row_seed, 2))?;
    Ok(SweepResultRow {
        k: d.vocab().size(),
        l: d.seq_len(),
        j,
        t: schedule.steps(),
        s_max: schedule.s_max(),
        policy: config.policy.label().to_string(),
        n_samples: config.n_samples,
        seed: master_seed,
        kl_estimate: report.estimate,
        kl_stderr: report.stderr,
        mi_sum: bounds.mi_sum,
        eps_train: eps,
        thm1_upper: bounds.thm1_upper,
        corollary_upper: bounds.corollary_upper,
        refined_upper: bounds.refined_upper,
        lower_bound: bounds.lower_bound,
    })
}

/// One row per T with a Monte Carlo KL estimate and all bound values, plus
/// the OLS slope of ln(kl) on ln(T).
pub fn sweep_t(config: &ExperimentConfig, t_grid: &[usize], seed: u64) -> Result<SweepOutput> {
    let (_, l, j) = potts_params(config)?;
    if t_grid.is_empty() {
        return Err(CliError::Config("empty T grid".into()));
    }
    for &t in t_grid {
        if t == 0 || t > l {
            return Err(CliError::Config(format!(
                "T = {t} does not give a valid balanced schedule for L = {l}"
            )));
        }
    }
    let d = config.distribution.build()?;
    let mut rows = Vec::with_capacity(t_grid.len());
    for (i, &t) in t_grid.iter().enumerate() {
        let schedule = MaskSchedule::balanced(l, t)?;
        rows.push(measure_row(config, d.as_ref(), &schedule, j, seed, i as u64)?);
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut excluded = Vec::new();
    for row in &rows {
        if row.kl_estimate >= LOG_FIT_FLOOR && row.kl_estimate >= LOG_FIT_SNR * row.kl_stderr {
            xs.push((row.t as f64).ln());
            ys.push(row.kl_estimate.ln());
        } else {
            excluded.push(row.t);
        }
    }
    let fit = ols(&xs, &ys);
    let summary = SweepSummary {
        slope: fit.map(|f| f.slope),
        slope_stderr: fit.map(|f| f.slope_stderr),
        pearson_r: None,
        excluded_t: excluded,
        flag: if fit.is_none() {
            Some("slope undefined: fewer than two usable points".into())
        } else {
            None
        },
    };
    Ok(SweepOutput { rows, summary })
}

/// One row per J at a fixed T, plus the Pearson correlation between the KL
/// estimate and the total mutual information.
pub fn sweep_j(
    config: &ExperimentConfig,
    j_grid: &[f64],
    t: usize,
    seed: u64,
) -> Result<SweepOutput> {
    let (k, l, _) = potts_params(config)?;
    if j_grid.is_empty() {
        return Err(CliError::Config("empty J grid".into()));
    }
    if t == 0 || t > l {
        return Err(CliError::Config(format!(
            "T = {t} does not give a valid balanced schedule for L = {l}"
        )));
    }
    let schedule = MaskSchedule::balanced(l, t)?;
    let mut rows = Vec::with_capacity(j_grid.len());
    for (i, &j) in j_grid.iter().enumerate() {
        let spec = DistributionSpec::Potts { k, l, j };
        let d = spec.build()?;
        let mut row_config = config.clone();
        row_config.distribution = spec;
        rows.push(measure_row(&row_config, d.as_ref(), &schedule, j, seed, i as u64)?);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.mi_sum).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.kl_estimate).collect();
    let r = pearson(&xs, &ys);
    let summary = SweepSummary {
        slope: None,
        slope_stderr: None,
        pearson_r: r,
        excluded_t: Vec::new(),
        flag: if r.is_none() {
            Some("pearson r undefined: need at least two J points with variation".into())
        } else {
            None
        },
    };
    Ok(SweepOutput { rows, summary })
}
