//! Experiment configuration files (TOML or JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{DEFAULT_BATCH_SIZE, DEFAULT_CLASS_SEPARATION};
use crate::participation::{DEFAULT_MEAN_PARTICIPATION, DEFAULT_P_MIN};
use crate::weighting::{theoretical_k_schedule, Strategy, DEFAULT_EMA_BETA};

pub const DEFAULT_CADENCE: u64 = 10;
pub const DEFAULT_LOCAL_LR: f64 = 0.05;
pub const DEFAULT_GLOBAL_LR: f64 = 1.0;
pub const DEFAULT_LOCAL_STEPS: usize = 5;

/// Names accepted wherever a strategy is chosen by name.
pub const STRATEGY_NAMES: [&str; 9] = [
    "fedau_finite_k",
    "fedau_infinite_k",
    "fedau_ema",
    "constant_one",
    "known_prob",
    "average_participating",
    "average_all",
    "fedvarp",
    "mifa",
];

fn default_seed() -> u64 {
    0
}
fn default_cadence() -> u64 {
    DEFAULT_CADENCE
}
fn default_workers() -> usize {
    1
}
fn default_local_lr() -> f64 {
    DEFAULT_LOCAL_LR
}
fn default_global_lr() -> f64 {
    DEFAULT_GLOBAL_LR
}
fn default_local_steps() -> usize {
    DEFAULT_LOCAL_STEPS
}
fn default_one() -> f64 {
    1.0
}
fn default_classes() -> usize {
    10
}
fn default_alpha() -> f64 {
    0.1
}
fn default_mean_participation() -> f64 {
    DEFAULT_MEAN_PARTICIPATION
}
fn default_p_min() -> f64 {
    DEFAULT_P_MIN
}
fn default_features() -> usize {
    10
}
fn default_samples() -> usize {
    50
}
fn default_separation() -> f64 {
    DEFAULT_CLASS_SEPARATION
}
fn default_batch() -> usize {
    DEFAULT_BATCH_SIZE
}
fn default_curvature() -> [f64; 2] {
    [1.0, 4.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Number of clients `N`.
    pub clients: usize,
    /// Number of rounds `T`.
    pub rounds: u64,
    /// Local SGD steps per round `I`.
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    /// Local step size `γ`.
    #[serde(default = "default_local_lr")]
    pub local_lr: f64,
    /// Global step size `η`.
    #[serde(default = "default_global_lr")]
    pub global_lr: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Metrics are sampled every `cadence` rounds.
    #[serde(default = "default_cadence")]
    pub cadence: u64,
    /// Initial model; zero when absent.
    #[serde(default)]
    pub initial: Option<Vec<f64>>,
    /// Threads used for client updates within a round.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
    #[serde(default)]
    pub lr_decay: Option<StepDecay>,
    /// Compute local updates for every client and mask them by the
    /// participation indicator instead of skipping non-participants.
    #[serde(default)]
    pub compute_all_clients: bool,
    pub aggregator: AggregatorConfig,
    pub objective: ObjectiveConfig,
    pub population: PopulationConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

/// Multiplies the local step size by `factor` every `every` rounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub factor: f64,
    pub every: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Weighted,
    AverageParticipating,
    AverageAll,
    Fedvarp,
    Mifa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyName {
    FedauFiniteK,
    FedauInfiniteK,
    FedauEma,
    ConstantOne,
    KnownProb,
}

/// Cutoff setting: an integer or `"theoretical"` for `round(T^{1/9})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CutoffSetting {
    Fixed(u64),
    Named(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregatorConfig {
    pub kind: AggregatorKind,
    #[serde(default)]
    pub strategy: Option<StrategyName>,
    #[serde(default)]
    pub k: Option<CutoffSetting>,
    #[serde(default)]
    pub beta: Option<f64>,
    /// Multiplies every weight; pair with a divided `global_lr` to leave the
    /// update unchanged.
    #[serde(default = "default_one")]
    pub weight_scale: f64,
}

impl AggregatorConfig {
    /// Aggregator selected by one of [`STRATEGY_NAMES`]. Cutoff and EMA
    /// settings are taken from `base` when present.
    pub fn from_name(name: &str, base: &AggregatorConfig) -> Result<Self> {
        let weighted = |s: StrategyName| AggregatorConfig {
            kind: AggregatorKind::Weighted,
            strategy: Some(s),
            k: base.k.clone(),
            beta: base.beta,
            weight_scale: 1.0,
        };
        let plain = |kind| AggregatorConfig {
            kind,
            strategy: None,
            k: None,
            beta: None,
            weight_scale: 1.0,
        };
        Ok(match name {
            "fedau_finite_k" => {
                let mut a = weighted(StrategyName::FedauFiniteK);
                if a.k.is_none() {
                    a.k = Some(CutoffSetting::Fixed(50));
                }
                a
            }
            "fedau_infinite_k" => weighted(StrategyName::FedauInfiniteK),
            "fedau_ema" => weighted(StrategyName::FedauEma),
            "constant_one" => weighted(StrategyName::ConstantOne),
            "known_prob" => weighted(StrategyName::KnownProb),
            "average_participating" => plain(AggregatorKind::AverageParticipating),
            "average_all" => plain(AggregatorKind::AverageAll),
            "fedvarp" => plain(AggregatorKind::Fedvarp),
            "mifa" => plain(AggregatorKind::Mifa),
            other => {
                return Err(Error::config(format!(
                    "unknown strategy `{other}`; valid names: {}",
                    STRATEGY_NAMES.join(", ")
                )))
            }
        })
    }

    /// Short label for reports.
    pub fn label(&self) -> String {
        match (self.kind, self.strategy) {
            (AggregatorKind::Weighted, Some(s)) => match s {
                StrategyName::FedauFiniteK => "fedau_finite_k".into(),
                StrategyName::FedauInfiniteK => "fedau_infinite_k".into(),
                StrategyName::FedauEma => "fedau_ema".into(),
                StrategyName::ConstantOne => "constant_one".into(),
                StrategyName::KnownProb => "known_prob".into(),
            },
            (AggregatorKind::Weighted, None) => "weighted".into(),
            (AggregatorKind::AverageParticipating, _) => "average_participating".into(),
            (AggregatorKind::AverageAll, _) => "average_all".into(),
            (AggregatorKind::Fedvarp, _) => "fedvarp".into(),
            (AggregatorKind::Mifa, _) => "mifa".into(),
        }
    }

    fn cutoff(&self, horizon: u64) -> Result<Option<u64>> {
        match &self.k {
            None => Ok(None),
            Some(CutoffSetting::Fixed(0)) => Err(Error::config("aggregator.k must be a positive integer")),
            Some(CutoffSetting::Fixed(k)) => Ok(Some(*k)),
            Some(CutoffSetting::Named(s)) if s == "theoretical" => Ok(Some(theoretical_k_schedule(horizon))),
            Some(CutoffSetting::Named(s)) => Err(Error::config(format!(
                "aggregator.k must be a positive integer or \"theoretical\", got \"{s}\""
            ))),
        }
    }

    /// Weighting strategy for `kind = weighted`.
    pub fn weighting_strategy(&self, horizon: u64) -> Result<Strategy> {
        let name = self
            .strategy
            .ok_or_else(|| Error::config("aggregator.strategy is required when kind = \"weighted\""))?;
        let k = self.cutoff(horizon)?;
        Ok(match name {
            StrategyName::FedauFiniteK => Strategy::FedauFiniteK {
                k: k.ok_or_else(|| Error::config("aggregator.k is required for fedau_finite_k"))?,
            },
            StrategyName::FedauInfiniteK => Strategy::FedauInfiniteK,
            StrategyName::FedauEma => Strategy::FedauEma {
                k,
                beta: self.beta.unwrap_or(DEFAULT_EMA_BETA),
            },
            StrategyName::ConstantOne => Strategy::ConstantOne,
            StrategyName::KnownProb => Strategy::KnownProb,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    QuadraticIsotropic {
        #[serde(default)]
        dim: Option<usize>,
        /// Explicit centers; drawn as `center_scale · N(0, I)` when absent.
        #[serde(default)]
        centers: Option<Vec<Vec<f64>>>,
        #[serde(default = "default_one")]
        center_scale: f64,
        #[serde(default)]
        noise_sigma: f64,
    },
    QuadraticGeneral {
        #[serde(default)]
        dim: Option<usize>,
        #[serde(default)]
        centers: Option<Vec<Vec<f64>>>,
        /// Explicit Hessians; diagonal with entries uniform in
        /// `curvature_range` when absent.
        #[serde(default)]
        hessians: Option<Vec<Vec<Vec<f64>>>>,
        #[serde(default = "default_curvature")]
        curvature_range: [f64; 2],
        #[serde(default = "default_one")]
        center_scale: f64,
        #[serde(default)]
        noise_sigma: f64,
    },
    LogisticSynthetic {
        #[serde(default = "default_features")]
        features: usize,
        #[serde(default = "default_samples")]
        samples_per_client: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_batch")]
        batch_size: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PopulationConfig {
    Manual {
        p: Vec<f64>,
        #[serde(default)]
        kappa: Option<Vec<Vec<f64>>>,
        #[serde(default = "default_classes")]
        classes: usize,
    },
    Generated {
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_alpha")]
        alpha_data: f64,
        #[serde(default = "default_alpha")]
        alpha_participation: f64,
        #[serde(default = "default_mean_participation")]
        mean_participation: f64,
        #[serde(default = "default_p_min")]
        p_min: f64,
    },
    /// A population JSON document written by `fedau population`.
    File { path: PathBuf },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsConfig {
    /// Fixed weights `α_n` defining the reweighted objective; all ones when
    /// absent.
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
    /// Run the numerical minimizer for logistic objectives so the distance
    /// columns are populated.
    #[serde(default)]
    pub logistic_oracle: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.json` file as JSON and anything else as TOML. Relative
    /// population file paths are resolved against the config's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
        .map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        if let PopulationConfig::File { path: pop } = &mut cfg.population {
            if pop.is_relative() {
                if let Some(dir) = path.parent() {
                    *pop = dir.join(&*pop);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients < 1 {
            return Err(Error::config("`clients` must be at least 1"));
        }
        if self.local_steps < 1 {
            return Err(Error::config("`local_steps` must be at least 1"));
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return Err(Error::config("`local_lr` must be positive"));
        }
        if !(self.global_lr > 0.0 && self.global_lr.is_finite()) {
            return Err(Error::config("`global_lr` must be positive"));
        }
        if self.cadence < 1 {
            return Err(Error::config("`cadence` must be at least 1"));
        }
        if self.workers < 1 {
            return Err(Error::config("`workers` must be at least 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("`checkpoint_every` must be at least 1"));
        }
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0 && d.factor.is_finite()) || d.every == 0 {
                return Err(Error::config("`lr_decay` needs factor > 0 and every >= 1"));
            }
        }
        let agg = &self.aggregator;
        if !(agg.weight_scale > 0.0 && agg.weight_scale.is_finite()) {
            return Err(Error::config("`aggregator.weight_scale` must be positive"));
        }
        if agg.kind == AggregatorKind::Weighted {
            agg.weighting_strategy(self.rounds)?;
        } else if agg.strategy.is_some() {
            return Err(Error::config(format!(
                "`aggregator.strategy` only applies to kind = \"weighted\", not {:?}",
                agg.label()
            )));
        }
        if let PopulationConfig::Manual { p, .. } = &self.population {
            if p.len() != self.clients {
                return Err(Error::config(format!(
                    "`population.p` has {} entries but `clients` = {}",
                    p.len(),
                    self.clients
                )));
            }
        }
        match &self.objective {
            ObjectiveConfig::QuadraticIsotropic { centers, .. } | ObjectiveConfig::QuadraticGeneral { centers, .. } => {
                if let Some(c) = centers {
                    if c.len() != self.clients {
                        return Err(Error::config(format!(
                            "`objective.centers` has {} entries but `clients` = {}",
                            c.len(),
                            self.clients
                        )));
                    }
                }
            }
            ObjectiveConfig::LogisticSynthetic { .. } => {}
        }
        if let Some(alpha) = &self.metrics.alpha {
            if alpha.len() != self.clients || alpha.iter().any(|a| !(*a > 0.0)) {
                return Err(Error::config("`metrics.alpha` needs one positive entry per client"));
            }
        }
        Ok(())
    }
}
