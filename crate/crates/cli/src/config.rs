//! Experiment configuration: JSON schema and construction of the configured
//! distribution, predictor, and schedule.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use maskdiff_core::analysis::ScheduleSource;
use maskdiff_core::dist::{PottsChain, TabularDistribution};
use maskdiff_core::predictor::MaskPredictor;
use maskdiff_core::sampler::UnmaskPolicy;
use maskdiff_core::seq::{MaskSchedule, Vocabulary};
use maskdiff_core::SequenceDistribution;

use crate::{CliError, Result};

/// Environment variable that overrides the config seed (itself overridden by
/// the `--seed` flag).
pub const SEED_ENV: &str = "MASKDIFF_SEED";

fn default_n_samples() -> usize {
    200_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub distribution: DistributionSpec,
    #[serde(default)]
    pub predictor: PredictorSpec,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub policy: PolicySpec,
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(CliError::Config("n_samples must be at least 2".into()));
        }
        self.schedule.validate(self.distribution.seq_len()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistributionSpec {
    Potts {
        k: usize,
        l: usize,
        j: f64,
    },
    Tabular {
        path: PathBuf,
        #[serde(default)]
        k: Option<usize>,
    },
}

impl DistributionSpec {
    pub fn build(&self) -> Result<Box<dyn SequenceDistribution>> {
        match self {
            DistributionSpec::Potts { k, l, j } => {
                let vocab = Vocabulary::new(*k)?;
                Ok(Box::new(PottsChain::new(vocab, *l, *j)?))
            }
            DistributionSpec::Tabular { path, k } => {
                if !path.exists() {
                    return Err(CliError::Config(format!(
                        "tabular file {} does not exist",
                        path.display()
                    )));
                }
                let vocab = k.map(Vocabulary::new).transpose()?;
                let table = if path.extension().is_some_and(|e| e == "json") {
                    TabularDistribution::from_json_file(path, vocab)?
                } else {
                    TabularDistribution::from_csv_file(path, vocab)?
                };
                Ok(Box::new(table))
            }
        }
    }

    /// Sequence length without building (needs a file peek for tabular).
    pub fn seq_len(&self) -> Result<usize> {
        match self {
            DistributionSpec::Potts { l, .. } => Ok(*l),
            DistributionSpec::Tabular { .. } => Ok(self.build()?.seq_len()),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PredictorSpec {
    #[default]
    Optimal,
    Perturbed {
        alpha: f64,
    },
}

impl PredictorSpec {
    pub fn build<'a>(&self, d: &'a dyn SequenceDistribution) -> Result<MaskPredictor<'a>> {
        Ok(match self {
            PredictorSpec::Optimal => MaskPredictor::optimal(d),
            PredictorSpec::Perturbed { alpha } => MaskPredictor::perturbed(d, *alpha)?,
        })
    }

    pub fn label(&self) -> String {
        match self {
            PredictorSpec::Optimal => "optimal".into(),
            PredictorSpec::Perturbed { alpha } => format!("perturbed({alpha})"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Balanced {
        t: usize,
    },
    Explicit {
        sizes: Vec<usize>,
    },
    #[serde(rename = "lower-bound")]
    LowerBound {
        s_max: usize,
    },
}

impl ScheduleSpec {
    pub fn validate(&self, l: usize) -> Result<()> {
        match self {
            ScheduleSpec::Balanced { t } => {
                MaskSchedule::balanced(l, *t)?;
            }
            ScheduleSpec::Explicit { sizes } => {
                MaskSchedule::new(sizes.clone(), l)?;
            }
            ScheduleSpec::LowerBound { s_max } => {
                let mut rng = maskdiff_core::util::stream_rng(0, 0);
                MaskSchedule::lower_bound(l, *s_max, &mut rng)?;
            }
        }
        Ok(())
    }

    /// Draws a concrete schedule (randomized only for the lower-bound kind).
    pub fn build(&self, l: usize, rng: &mut dyn maskdiff_core::rand::RngCore) -> Result<MaskSchedule> {
        Ok(match self {
            ScheduleSpec::Balanced { t } => MaskSchedule::balanced(l, *t)?,
            ScheduleSpec::Explicit { sizes } => MaskSchedule::new(sizes.clone(), l)?,
            ScheduleSpec::LowerBound { s_max } => MaskSchedule::lower_bound(l, *s_max, rng)?,
        })
    }

    /// The schedule source for Monte Carlo KL: lower-bound specs redraw per
    /// replicate.
    pub fn source<'a>(&self, l: usize, fixed: &'a MaskSchedule) -> ScheduleSource<'a> {
        match self {
            ScheduleSpec::LowerBound { s_max } => ScheduleSource::LowerBound { len: l, s_max: *s_max },
            _ => ScheduleSource::Fixed(fixed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicySpec {
    #[default]
    Uniform,
    EntropyAdaptive,
}

impl PolicySpec {
    pub fn to_policy(self) -> UnmaskPolicy {
        match self {
            PolicySpec::Uniform => UnmaskPolicy::UniformForwardConsistent,
            PolicySpec::EntropyAdaptive => UnmaskPolicy::EntropyAdaptive,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PolicySpec::Uniform => "uniform",
            PolicySpec::EntropyAdaptive => "entropy-adaptive",
        }
    }
}

/// Seed precedence: `--seed` flag, then `MASKDIFF_SEED`, then the config.
pub fn resolve_seed(flag: Option<u64>, config_seed: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(text) => text
            .parse::<u64>()
            .map_err(|e| CliError::Config(format!("{SEED_ENV}={text}: {e}"))),
        Err(_) => Ok(config_seed),
    }
}
