//! `key = value` run configuration.
//!
//! Resolution order, later wins: built-in defaults, the `--config` file, the
//! `SSLCHRONO_SEED` environment variable, command-line flags.

use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use crate::cohort::{CohortParams, Feature, SplitConfig, ADAPTATION_SIZES, CHANNELS, WINDOW_DAYS};
use crate::derive_seed;
use crate::evaluation::SweepConfig;
use crate::training::TrainConfig;
use crate::transformer::{HeadKind, ModelConfig};

pub const SEED_ENV: &str = "SSLCHRONO_SEED";

/// Label mixed into the master seed for the cohort and split seeds.
const COHORT_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Every setting a command needs, fully resolved.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Master seed; every run seed derives from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub cohort: CohortParams,
    pub split_seed: u64,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub objectives: Vec<Feature>,
    pub negatives_per_positive: usize,
    pub baseline: bool,
    /// Objective of `pretrain`.
    pub objective: Option<Feature>,
    /// Adaptation size of `finetune`.
    pub n_adapt: Option<usize>,
    /// Input checkpoint of `finetune` and `evaluate`.
    pub checkpoint: Option<PathBuf>,
    /// Sweep CSV read by `plot`.
    pub input: Option<PathBuf>,
}

/// Settings before the seed-dependent defaults are filled in.
#[derive(Clone, Debug)]
pub struct ConfigBuilder {
    config: RunConfig,
    cohort_seed: Option<u64>,
    split_seed: Option<u64>,
}

impl Default for ConfigBuilder {
    fn default() -> Self {
        let cohort = CohortParams {
            n_participants: 964,
            prevalence: 0.5,
            ..CohortParams::default()
        };
        Self {
            config: RunConfig {
                seed: 0,
                output_dir: PathBuf::from("sslchrono-out"),
                cohort,
                split_seed: 0,
                split: SplitConfig {
                    adaptation_sizes: ADAPTATION_SIZES.to_vec(),
                    ..SplitConfig::default()
                },
                model: ModelConfig::default(),
                pretrain: TrainConfig::pretrain(Feature::Rhr, 0),
                finetune: TrainConfig::finetune(0),
                objectives: Feature::ALL.to_vec(),
                negatives_per_positive: 5,
                baseline: false,
                objective: None,
                n_adapt: None,
                checkpoint: None,
                input: None,
            },
            cohort_seed: None,
            split_seed: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3], ConfigError> {
    let v: Vec<f64> = parse_list(key, value)?;
    v.try_into().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: "expected three comma-separated numbers (rhr,tib,cal)".into(),
    })
}

fn parse_feature(key: &str, value: &str) -> Result<Feature, ConfigError> {
    Feature::parse(value).ok_or_else(|| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: "expected rhr, tib or cal".into(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected true or false".into(),
        }),
    }
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn train_set(t: &mut TrainConfig, key: &str, field: &str, value: &str) -> Result<bool, ConfigError> {
    match field {
        "epochs" => t.epochs = parse(key, value)?,
        "batch_size" => t.batch_size = parse(key, value)?,
        "lr0" => t.lr0 = parse(key, value)?,
        "clip" => t.clip = parse(key, value)?,
        "beta1" => t.beta1 = parse(key, value)?,
        "beta2" => t.beta2 = parse(key, value)?,
        "eps" => t.eps = parse(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_lines(prefix: &str, t: &TrainConfig) -> Vec<(String, String)> {
    [
        ("epochs", t.epochs.to_string()),
        ("batch_size", t.batch_size.to_string()),
        ("lr0", t.lr0.to_string()),
        ("clip", t.clip.to_string()),
        ("beta1", t.beta1.to_string()),
        ("beta2", t.beta2.to_string()),
        ("eps", t.eps.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (format!("{prefix}.{k}"), v))
    .collect()
}

impl ConfigBuilder {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        let c = &mut self.config;
        match key {
            "seed" => c.seed = parse(key, value)?,
            "output_dir" => c.output_dir = PathBuf::from(value),
            "cohort.n_participants" => c.cohort.n_participants = parse(key, value)?,
            "cohort.horizon_days" => c.cohort.horizon_days = parse(key, value)?,
            "cohort.seed" => self.cohort_seed = Some(parse(key, value)?),
            "cohort.baseline_mean" => c.cohort.baseline_mean = parse_triple(key, value)?,
            "cohort.baseline_sd" => c.cohort.baseline_sd = parse_triple(key, value)?,
            "cohort.daily_sd" => c.cohort.daily_sd = parse_triple(key, value)?,
            "cohort.weekly_amplitude" => c.cohort.weekly_amplitude = parse_triple(key, value)?,
            "cohort.rhr_delta" => c.cohort.rhr_delta = parse(key, value)?,
            "cohort.tib_delta" => c.cohort.tib_delta = parse(key, value)?,
            "cohort.cal_multiplier" => c.cohort.cal_multiplier = parse(key, value)?,
            "cohort.prevalence" => c.cohort.prevalence = parse(key, value)?,
            "cohort.base_missingness" => c.cohort.base_missingness = parse(key, value)?,
            "cohort.illness_missingness_boost" => c.cohort.illness_missingness_boost = parse(key, value)?,
            "split.seed" => self.split_seed = Some(parse(key, value)?),
            "split.adaptation_sizes" => c.split.adaptation_sizes = parse_list(key, value)?,
            "split.test_size" => c.split.test_size = parse(key, value)?,
            "split.min_ssl" => c.split.min_ssl = parse(key, value)?,
            "model.n_blocks" => c.model.n_blocks = parse(key, value)?,
            "model.d_model" => c.model.d_model = parse(key, value)?,
            "model.n_heads" => c.model.n_heads = parse(key, value)?,
            "model.dropout_p" => c.model.dropout_p = parse(key, value)?,
            "model.residual" => c.model.residual = parse_bool(key, value)?,
            "sweep.objectives" => {
                c.objectives = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_feature(key, s))
                    .collect::<Result<_, _>>()?
            }
            "sweep.negatives_per_positive" => c.negatives_per_positive = parse(key, value)?,
            "sweep.baseline" => c.baseline = parse_bool(key, value)?,
            "task.objective" => c.objective = Some(parse_feature(key, value)?),
            "task.n_adapt" => c.n_adapt = Some(parse(key, value)?),
            "task.checkpoint" => c.checkpoint = Some(PathBuf::from(value)),
            "task.input" => c.input = Some(PathBuf::from(value)),
            _ => {
                let handled = match key.split_once('.') {
                    Some(("pretrain", field)) => train_set(&mut c.pretrain, key, field, value)?,
                    Some(("finetune", field)) => train_set(&mut c.finetune, key, field, value)?,
                    _ => false,
                };
                if !handled {
                    return Err(ConfigError::UnknownKey(key.into()));
                }
            }
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override from the command line.
    pub fn apply_override(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (key, value) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: pair.to_string(),
        })?;
        self.set(key.trim(), value)
    }

    /// Fills seed-dependent defaults and validates.
    pub fn resolve(self) -> Result<RunConfig, ConfigError> {
        let mut c = self.config;
        c.cohort.seed = self.cohort_seed.unwrap_or_else(|| derive_seed(c.seed, &[COHORT_STREAM]));
        c.split_seed = self.split_seed.unwrap_or_else(|| derive_seed(c.seed, &[SPLIT_STREAM]));
        c.model.seq_len = WINDOW_DAYS;
        c.model.n_channels = CHANNELS;
        c.model.head_kind = HeadKind::Regression;
        c.pretrain.seed = c.seed;
        c.finetune.seed = c.seed;
        c.split.adaptation_sizes.sort_unstable();
        c.split.adaptation_sizes.dedup();
        let invalid = |e: &dyn Display| ConfigError::Invalid(e.to_string());
        c.cohort.validate().map_err(|e| invalid(&e))?;
        c.model.validate().map_err(|e| invalid(&e))?;
        c.pretrain.validate().map_err(|e| invalid(&e))?;
        c.finetune.validate().map_err(|e| invalid(&e))?;
        if c.objectives.is_empty() {
            return Err(ConfigError::Invalid("sweep.objectives is empty".into()));
        }
        if c.split.adaptation_sizes.is_empty() || c.split.adaptation_sizes[0] == 0 {
            return Err(ConfigError::Invalid("split.adaptation_sizes needs positive sizes".into()));
        }
        if c.negatives_per_positive == 0 {
            return Err(ConfigError::Invalid("sweep.negatives_per_positive must be at least 1".into()));
        }
        Ok(c)
    }
}

impl RunConfig {
    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let c = &self.cohort;
        let mut out: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("output_dir".into(), self.output_dir.display().to_string()),
            ("cohort.n_participants".into(), c.n_participants.to_string()),
            ("cohort.horizon_days".into(), c.horizon_days.to_string()),
            ("cohort.seed".into(), c.seed.to_string()),
            ("cohort.baseline_mean".into(), join(&c.baseline_mean)),
            ("cohort.baseline_sd".into(), join(&c.baseline_sd)),
            ("cohort.daily_sd".into(), join(&c.daily_sd)),
            ("cohort.weekly_amplitude".into(), join(&c.weekly_amplitude)),
            ("cohort.rhr_delta".into(), c.rhr_delta.to_string()),
            ("cohort.tib_delta".into(), c.tib_delta.to_string()),
            ("cohort.cal_multiplier".into(), c.cal_multiplier.to_string()),
            ("cohort.prevalence".into(), c.prevalence.to_string()),
            ("cohort.base_missingness".into(), c.base_missingness.to_string()),
            ("cohort.illness_missingness_boost".into(), c.illness_missingness_boost.to_string()),
            ("split.seed".into(), self.split_seed.to_string()),
            ("split.adaptation_sizes".into(), join(&self.split.adaptation_sizes)),
            ("split.test_size".into(), self.split.test_size.to_string()),
            ("split.min_ssl".into(), self.split.min_ssl.to_string()),
            ("model.n_blocks".into(), self.model.n_blocks.to_string()),
            ("model.d_model".into(), self.model.d_model.to_string()),
            ("model.n_heads".into(), self.model.n_heads.to_string()),
            ("model.dropout_p".into(), self.model.dropout_p.to_string()),
            ("model.residual".into(), self.model.residual.to_string()),
        ];
        out.extend(train_lines("pretrain", &self.pretrain));
        out.extend(train_lines("finetune", &self.finetune));
        let objectives: Vec<&str> = self.objectives.iter().map(|f| f.as_str()).collect();
        out.push(("sweep.objectives".into(), objectives.join(",")));
        out.push(("sweep.negatives_per_positive".into(), self.negatives_per_positive.to_string()));
        out.push(("sweep.baseline".into(), self.baseline.to_string()));
        if let Some(f) = self.objective {
            out.push(("task.objective".into(), f.as_str().into()));
        }
        if let Some(n) = self.n_adapt {
            out.push(("task.n_adapt".into(), n.to_string()));
        }
        if let Some(p) = &self.checkpoint {
            out.push(("task.checkpoint".into(), p.display().to_string()));
        }
        if let Some(p) = &self.input {
            out.push(("task.input".into(), p.display().to_string()));
        }
        out
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut b = ConfigBuilder::default();
        b.apply_text(text)?;
        b.resolve()
    }

    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            model: self.model.clone(),
            pretrain: self.pretrain.clone(),
            finetune: self.finetune.clone(),
            objectives: self.objectives.clone(),
            sizes: self.split.adaptation_sizes.clone(),
            negatives_per_positive: self.negatives_per_positive,
            baseline: self.baseline,
            seed: self.seed,
        }
    }
}
