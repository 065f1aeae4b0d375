//! Experiment configuration: a TOML file with one table per module, plus
//! `section.key=value` overrides applied before validation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{GamblersRuinConfig, GridWorldConfig};
use crate::error::{Error, Result};
use crate::risk::{scale_constraint, PenaltyFunction, RiskFunction, RiskKind, RiskSpec, DEFAULT_SQRT_DERIVATIVE_CLAMP};
use crate::shaping::{RiskTarget, ShapingConfig};
use crate::trainer::{ArcvcConfig, PenaltyMethod, ReferenceGradient, ReferenceMethod, StepSchedule, ValueTraining};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    RiskComparison,
    ReferenceStudy,
    PenaltyStudy,
    Shaping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    /// Write final network snapshots for every run.
    pub checkpoints: bool,
    /// Additional snapshots every this many episodes; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self { seeds: (0..5).collect(), checkpoints: true, checkpoint_every: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub width: usize,
    pub height: usize,
    pub p_mine: f64,
    pub p_noise: f64,
    pub r_mine: f64,
    pub r_target: f64,
    pub start: [usize; 2],
    pub target: [usize; 2],
    pub max_steps: usize,
    pub layout_seed: u64,
    pub mine_features: bool,
}

impl Default for EnvSection {
    fn default() -> Self {
        let g = GridWorldConfig::default();
        Self {
            width: g.width,
            height: g.height,
            p_mine: g.p_mine,
            p_noise: g.p_noise,
            r_mine: g.r_mine,
            r_target: g.r_target,
            start: [g.start.0, g.start.1],
            target: [g.target.0, g.target.1],
            max_steps: g.max_steps,
            layout_seed: g.layout_seed,
            mine_features: g.mine_features,
        }
    }
}

impl EnvSection {
    pub fn grid(&self, layout_seed: u64) -> GridWorldConfig {
        GridWorldConfig {
            width: self.width,
            height: self.height,
            p_mine: self.p_mine,
            p_noise: self.p_noise,
            r_mine: self.r_mine,
            r_target: self.r_target,
            start: (self.start[0], self.start[1]),
            target: (self.target[0], self.target[1]),
            max_steps: self.max_steps,
            layout_seed,
            mine_features: self.mine_features,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskSection {
    /// Risk function of single-kind experiments.
    pub kind: String,
    /// Risk functions compared by the risk-comparison study.
    pub kinds: Vec<String>,
    /// Constraint level.
    pub d: f64,
    /// Treat `d` as a level on the one-sided absolute scale and convert it per kind.
    pub scale_d: bool,
    pub lambda: f64,
    pub penalty: String,
    pub sqrt_clamp: f64,
    pub shaped_b: f64,
    pub shaped_c: f64,
}

impl Default for RiskSection {
    fn default() -> Self {
        Self {
            kind: "abs".into(),
            kinds: vec!["var".into(), "abs".into(), "sqrt".into()],
            d: 0.1,
            scale_d: true,
            lambda: 10.0,
            penalty: "risk_network".into(),
            sqrt_clamp: DEFAULT_SQRT_DERIVATIVE_CLAMP,
            shaped_b: 1.0,
            shaped_c: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub reference: String,
    pub reference_constant: f64,
    pub global_initial: f64,
    /// `decaying` or `constant`.
    pub global_schedule: String,
    pub global_delta: f64,
    pub global_alpha: f64,
    pub gamma: f64,
    /// Reward-to-go horizon; 0 means the whole episode.
    pub tau: usize,
    pub episodes: usize,
    pub episodes_per_update: usize,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub hidden: usize,
    pub actor_lr: f64,
    pub value_lr: f64,
    pub risk_lr: f64,
    pub critic_steps: usize,
    /// Gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub baseline: bool,
    /// `mc` or `td`.
    pub value_training: String,
    pub td_refresh: usize,
    /// `likelihood_ratio` or `critic_baseline`.
    pub reference_gradient: String,
    /// Averaging rate of the correction coefficient across single-episode updates.
    pub correction_rate: f64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            reference: "state_value".into(),
            reference_constant: 0.0,
            global_initial: 0.0,
            global_schedule: "decaying".into(),
            global_delta: 0.5,
            global_alpha: 0.01,
            gamma: 0.9,
            tau: 0,
            episodes: 1000,
            episodes_per_update: 1,
            batch_size: 100,
            replay_capacity: 10_000,
            hidden: 64,
            actor_lr: 1e-3,
            value_lr: 1e-3,
            risk_lr: 1e-3,
            critic_steps: 1,
            grad_clip: 10.0,
            baseline: false,
            value_training: "mc".into(),
            td_refresh: 100,
            reference_gradient: "likelihood_ratio".into(),
            correction_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceStudySection {
    pub gammas: Vec<f64>,
}

impl Default for ReferenceStudySection {
    fn default() -> Self {
        Self { gammas: vec![0.1, 0.3, 0.5, 0.7, 0.9, 0.99] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Trailing window of the violation and success rates.
    pub window: usize,
    pub n_states: usize,
    pub n_episodes: usize,
    pub stationary_steps: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { window: 100, n_states: 50, n_episodes: 100, stationary_steps: 100_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub b: f64,
    pub c: f64,
    pub sigma: f64,
    pub n: usize,
    pub z_min: f64,
    pub z_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapingSection {
    pub k: usize,
    /// Episode truncation; 0 means `k`.
    pub horizon: usize,
    pub gamma: f64,
    pub fortune_min: u64,
    pub fortune_max: u64,
    pub n_per_state: usize,
    pub n_value_episodes: usize,
    /// `exact` or `empirical`.
    pub target: String,
    /// Replaces the gambler's-ruin samples with draws from a planted model.
    pub synthetic: Option<SyntheticSection>,
}

impl Default for ShapingSection {
    fn default() -> Self {
        Self {
            k: 10,
            horizon: 0,
            gamma: 1.0,
            fortune_min: 1,
            fortune_max: 25,
            n_per_state: 200,
            n_value_episodes: 200,
            target: "exact".into(),
            synthetic: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub env: EnvSection,
    pub risk: RiskSection,
    pub trainer: TrainerSection,
    pub reference_study: ReferenceStudySection,
    pub metrics: MetricsSection,
    pub shaping: ShapingSection,
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key inserted above"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `section.key=value` override; values use TOML syntax and fall
/// back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for key in parents {
        let entry = node.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}` descends into a non-table value")))?;
    }
    node.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

fn parse_kind(s: &str) -> Result<RiskKind> {
    s.parse().map_err(|_| Error::Config(format!("unknown risk kind `{s}`")))
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))
    }

    /// Reads `path` (or starts from defaults) and applies the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    /// Checks everything `kind` will use, before any compute starts.
    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if kind == ExperimentKind::Shaping {
            self.shaping_config(self.experiment.seeds[0])?;
            if let Some(s) = &self.shaping.synthetic {
                if !(s.b > 0.0 && s.sigma >= 0.0 && s.n >= 3 && s.z_min < s.z_max) {
                    return Err(Error::Config("synthetic shaping needs b > 0, sigma >= 0, n >= 3 and z_min < z_max".into()));
                }
            }
            return Ok(());
        }
        check_probability("env.p_mine", self.env.p_mine)?;
        check_probability("env.p_noise", self.env.p_noise)?;
        self.env.grid(self.env.layout_seed).validate()?;
        if !(self.risk.lambda > 0.0) {
            return Err(Error::Config(format!("risk.lambda must be positive, got {}", self.risk.lambda)));
        }
        if self.metrics.window == 0 || self.metrics.n_states == 0 || self.metrics.n_episodes == 0 || self.metrics.stationary_steps == 0 {
            return Err(Error::Config("metrics counts must be positive".into()));
        }
        match kind {
            ExperimentKind::RiskComparison => {
                if self.risk.kinds.is_empty() {
                    return Err(Error::Config("risk.kinds is empty".into()));
                }
                for k in &self.risk.kinds {
                    let kind = parse_kind(k)?;
                    if !matches!(kind, RiskKind::Var | RiskKind::Abs | RiskKind::Sqrt) {
                        return Err(Error::Config(format!("risk comparison supports var, abs and sqrt, got `{k}`")));
                    }
                    self.arcvc_config(kind, self.trainer.gamma, 0)?;
                }
            }
            ExperimentKind::ReferenceStudy => {
                if self.reference_study.gammas.is_empty() {
                    return Err(Error::Config("reference_study.gammas is empty".into()));
                }
                for &g in &self.reference_study.gammas {
                    if !(g > 0.0 && g < 1.0) {
                        return Err(Error::Config(format!("reference-study gammas must lie strictly inside (0, 1), got {g}")));
                    }
                    self.arcvc_config(parse_kind(&self.risk.kind)?, g, 0)?;
                }
            }
            ExperimentKind::PenaltyStudy => {
                self.arcvc_config(parse_kind(&self.risk.kind)?, self.trainer.gamma, 0)?;
            }
            ExperimentKind::Shaping => unreachable!("handled above"),
        }
        Ok(())
    }

    pub fn risk_function(&self, kind: RiskKind) -> Result<RiskFunction> {
        Ok(match kind {
            RiskKind::Sqrt => RiskFunction::OneSidedSqrt { clamp: self.risk.sqrt_clamp },
            RiskKind::Shaped => RiskFunction::shaped(self.risk.shaped_b, self.risk.shaped_c)?,
            RiskKind::Custom => return Err(Error::Config("custom risk functions cannot be configured from a file".into())),
            k => RiskFunction::one_sided(k)?,
        })
    }

    pub fn risk_spec(&self, kind: RiskKind) -> Result<RiskSpec> {
        let f = self.risk_function(kind)?;
        let d = if self.risk.scale_d { scale_constraint(self.risk.d, &f).map_err(|e| Error::Config(e.to_string()))? } else { self.risk.d };
        RiskSpec::new(f, PenaltyFunction::SquaredHinge, d, self.risk.lambda)
    }

    pub fn penalty(&self) -> Result<PenaltyMethod> {
        match self.risk.penalty.as_str() {
            "risk_network" => Ok(PenaltyMethod::RiskNetwork),
            "sample_based" => Ok(PenaltyMethod::SampleBased),
            other => Err(Error::Config(format!("unknown penalty method `{other}`"))),
        }
    }

    pub fn reference(&self) -> Result<ReferenceMethod> {
        let t = &self.trainer;
        Ok(match t.reference.as_str() {
            "state_value" => ReferenceMethod::StateValue,
            "bootstrapped" => ReferenceMethod::Bootstrapped,
            "constant" => ReferenceMethod::Constant(t.reference_constant),
            "global_mean" => ReferenceMethod::GlobalMean {
                initial: t.global_initial,
                schedule: match t.global_schedule.as_str() {
                    "decaying" => StepSchedule::Decaying { delta: t.global_delta },
                    "constant" => StepSchedule::Constant(t.global_alpha),
                    other => return Err(Error::Config(format!("unknown step schedule `{other}`"))),
                },
            },
            other => return Err(Error::Config(format!("unknown reference method `{other}`"))),
        })
    }

    /// Trainer configuration for one run.
    pub fn arcvc_config(&self, kind: RiskKind, gamma: f64, seed: u64) -> Result<ArcvcConfig> {
        let t = &self.trainer;
        let config = ArcvcConfig {
            reference: self.reference()?,
            penalty: self.penalty()?,
            gamma,
            tau: (t.tau > 0).then_some(t.tau),
            episodes: t.episodes,
            episodes_per_update: t.episodes_per_update,
            batch_size: t.batch_size,
            replay_capacity: t.replay_capacity,
            hidden: t.hidden,
            actor_lr: t.actor_lr,
            value_lr: t.value_lr,
            risk_lr: t.risk_lr,
            critic_steps: t.critic_steps,
            grad_clip: (t.grad_clip > 0.0).then_some(t.grad_clip),
            baseline: t.baseline,
            value_training: match t.value_training.as_str() {
                "mc" => ValueTraining::MonteCarlo,
                "td" => ValueTraining::TemporalDifference { target_refresh: t.td_refresh },
                other => return Err(Error::Config(format!("unknown value training mode `{other}`"))),
            },
            reference_gradient: match t.reference_gradient.as_str() {
                "likelihood_ratio" => ReferenceGradient::LikelihoodRatio,
                "critic_baseline" => ReferenceGradient::CriticBaseline,
                other => return Err(Error::Config(format!("unknown reference gradient `{other}`"))),
            },
            correction_rate: t.correction_rate,
            seed,
            ..ArcvcConfig::new(self.risk_spec(kind)?)
        };
        if t.episodes == 0 {
            return Err(Error::Config("trainer.episodes must be positive".into()));
        }
        config.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })?;
        Ok(config)
    }

    pub fn shaping_config(&self, seed: u64) -> Result<ShapingConfig> {
        let s = &self.shaping;
        let config = ShapingConfig {
            ruin: GamblersRuinConfig {
                initial_fortune: s.fortune_min,
                lookahead: s.k,
                horizon: if s.horizon == 0 { s.k } else { s.horizon },
                gamma: s.gamma,
                ..Default::default()
            },
            fortunes: s.fortune_min..=s.fortune_max,
            n_per_state: s.n_per_state,
            n_value_episodes: s.n_value_episodes,
            target: match s.target.as_str() {
                "exact" => RiskTarget::Exact,
                "empirical" => RiskTarget::Empirical,
                other => return Err(Error::Config(format!("unknown shaping target `{other}`"))),
            },
            seed,
        };
        config.validate()?;
        Ok(config)
    }
}
