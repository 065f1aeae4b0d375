//! Actor / value-critic / risk-critic training.
//!
//! The actor ascends the soft-constrained objective
//! `eta = J - lambda * g(R - D)` with `R = E[f(B - nu)]`, where the reference
//! `nu` comes from one of the [`ReferenceMethod`]s and the penalty argument
//! either from the risk critic or from the episode's own sample risk.
//!
//! Per episode `i` with initial return `B_i`, score sum `S_i` (the sum of
//! `grad log mu(u_t | x_t)` over the steps that enter `B_i`) and reference
//! `nu_i`, the gradient estimate is
//!
//! ```text
//! risk network:  w_i = B_i - lambda g'(R_hat - D) f(B_i - nu_i)
//!                c_i = lambda g'(R_hat - D) f'(B_i - nu_i)
//! sample based:  w_i = B_i - lambda g(f(B_i - nu_i) - D)
//!                c_i = lambda g'(f(B_i - nu_i) - D) f'(B_i - nu_i)
//! grad eta ~= mean(w_i S_i) + mean(c_i) * grad_nu
//! ```
//!
//! `grad_nu` is only non-zero for the state-value reference, where it is the
//! likelihood-ratio estimate `mean(B_i S_i)` of `grad J`. Bootstrapped, global
//! and constant references are treated as fixed targets. The product of the
//! two means is formed without pairing an episode with itself; see
//! [`CorrectionWeight`].

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::metrics::RunRecord;
use crate::nn::{Adam, AdamConfig, Head, Mlp, ParamVector};
use crate::risk::RiskSpec;
use crate::trajectory::{rollout, EpisodeBatch, ReplayBuffer};

/// Probabilities below this are counted as clipped by [`ArcvcAgent::score_function`].
pub const MIN_PROBABILITY: f64 = 1e-12;

/// Step size schedule of the global-mean stochastic approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepSchedule {
    Constant(f64),
    /// `alpha_t = t^-delta`, `t = 1, 2, ...`.
    Decaying { delta: f64 },
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StepSchedule::Constant(a) if a > 0.0 && a <= 1.0 => Ok(()),
            StepSchedule::Decaying { delta } if (0.5..=1.0).contains(&delta) => Ok(()),
            other => Err(Error::Config(format!("invalid step schedule {other:?}"))),
        }
    }

    pub fn alpha(&self, t: u64) -> f64 {
        match *self {
            StepSchedule::Constant(a) => a,
            StepSchedule::Decaying { delta } => (t.max(1) as f64).powf(-delta),
        }
    }
}

/// Running scalar `J_bar_{t+1} = J_bar_t + alpha_t (sample - J_bar_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMean {
    value: f64,
    updates: u64,
    schedule: StepSchedule,
}

impl GlobalMean {
    pub fn new(initial: f64, schedule: StepSchedule) -> Self {
        Self { value: initial, updates: 0, schedule }
    }

    pub fn observe(&mut self, sample: f64) {
        self.updates += 1;
        self.value += self.schedule.alpha(self.updates) * (sample - self.value);
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }
}

/// Source of the reference `nu(x)` inside the risk.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceMethod {
    /// Value critic estimate of `J(x)`.
    StateValue,
    /// Critic estimate of the penalised objective itself.
    Bootstrapped,
    /// Scalar stochastic-approximation estimate of the stationary mean of `J`,
    /// fed with the per-step returns `B_t`.
    GlobalMean { initial: f64, schedule: StepSchedule },
    Constant(f64),
}

impl ReferenceMethod {
    pub fn needs_value_critic(&self) -> bool {
        matches!(self, ReferenceMethod::StateValue | ReferenceMethod::Bootstrapped)
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReferenceMethod::StateValue => "state_value",
            ReferenceMethod::Bootstrapped => "bootstrapped",
            ReferenceMethod::GlobalMean { .. } => "global_mean",
            ReferenceMethod::Constant(_) => "constant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PenaltyMethod {
    RiskNetwork,
    SampleBased,
}

impl PenaltyMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PenaltyMethod::RiskNetwork => "risk_network",
            PenaltyMethod::SampleBased => "sample_based",
        }
    }
}

/// How the value critic is fitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueTraining {
    /// Regress onto the stored Monte-Carlo returns.
    MonteCarlo,
    /// Squared one-step TD error against a frozen copy refreshed every
    /// `target_refresh` updates.
    TemporalDifference { target_refresh: usize },
}

/// Estimator of `grad J` inside the state-value correction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceGradient {
    /// `mean(B_i S_i)`.
    LikelihoodRatio,
    /// `mean((B_i - J_hat(x_0)) S_i)`, using the critic as a baseline.
    CriticBaseline,
}

#[derive(Debug, Clone)]
pub struct ArcvcConfig {
    pub risk: RiskSpec,
    pub reference: ReferenceMethod,
    pub penalty: PenaltyMethod,
    pub gamma: f64,
    /// Reward-to-go horizon; `None` uses the whole episode.
    pub tau: Option<usize>,
    pub episodes: usize,
    /// Episodes averaged into one actor update.
    pub episodes_per_update: usize,
    /// Replay minibatch size for value-critic updates.
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub hidden: usize,
    pub actor_lr: f64,
    pub value_lr: f64,
    pub risk_lr: f64,
    /// Optimizer steps per update for each critic.
    pub critic_steps: usize,
    pub grad_clip: Option<f64>,
    /// Subtract the reference from `B` in the main likelihood-ratio term.
    pub baseline: bool,
    pub value_training: ValueTraining,
    pub reference_gradient: ReferenceGradient,
    /// Averaging rate of the correction coefficient carried across
    /// single-episode updates.
    pub correction_rate: f64,
    pub seed: u64,
}

impl ArcvcConfig {
    pub fn new(risk: RiskSpec) -> Self {
        Self {
            risk,
            reference: ReferenceMethod::StateValue,
            penalty: PenaltyMethod::RiskNetwork,
            gamma: 0.9,
            tau: None,
            episodes: 1000,
            episodes_per_update: 1,
            batch_size: 100,
            replay_capacity: 10_000,
            hidden: 64,
            actor_lr: 1e-3,
            value_lr: 1e-3,
            risk_lr: 1e-3,
            critic_steps: 1,
            grad_clip: Some(10.0),
            baseline: false,
            value_training: ValueTraining::MonteCarlo,
            reference_gradient: ReferenceGradient::LikelihoodRatio,
            correction_rate: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.risk.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if self.batch_size == 0 || self.episodes_per_update == 0 || self.replay_capacity == 0 {
            return bad("batch size, episodes per update and replay capacity must be positive".into());
        }
        if self.hidden == 0 || self.critic_steps == 0 {
            return bad("hidden width and critic steps must be positive".into());
        }
        if self.tau == Some(0) {
            return bad("tau must be positive".into());
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("value_lr", self.value_lr), ("risk_lr", self.risk_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("gradient clip must be positive, got {c}"));
            }
        }
        if !(self.correction_rate > 0.0 && self.correction_rate <= 1.0) {
            return bad(format!("correction rate must lie in (0, 1], got {}", self.correction_rate));
        }
        if let ValueTraining::TemporalDifference { target_refresh: 0 } = self.value_training {
            return bad("TD target refresh interval must be positive".into());
        }
        if let ReferenceMethod::GlobalMean { schedule, initial } = &self.reference {
            schedule.validate()?;
            if !initial.is_finite() {
                return bad("global mean initial value must be finite".into());
            }
        }
        if let ReferenceMethod::Constant(v) = self.reference {
            if !v.is_finite() {
                return bad("constant reference must be finite".into());
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.tau.unwrap_or(usize::MAX)
    }
}

/// Derives an independent generator for one purpose of one run.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const INIT_STREAM: u64 = 0;
pub const ROLLOUT_STREAM: u64 = 1;
pub const REPLAY_STREAM: u64 = 2;

/// A scalar critic with its optimizer and, for TD training, a frozen copy.
#[derive(Debug, Clone)]
pub struct Critic {
    pub net: Mlp,
    opt: Adam,
    target: Option<Mlp>,
    updates: u64,
}

impl Critic {
    pub fn new(net: Mlp, lr: f64) -> Self {
        let opt = Adam::new(net.params().len(), AdamConfig::with_lr(lr));
        Self { net, opt, target: None, updates: 0 }
    }

    pub fn value(&self, features: &[f64]) -> Result<f64> {
        self.net.scalar(features)
    }

    /// One Adam step on `mean (critic(x) - y)^2`; returns the pre-step loss.
    pub fn regress(&mut self, samples: &[(&[f64], f64)]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Usage("critic regression needs at least one sample".into()));
        }
        let n = samples.len() as f64;
        let mut grad = self.net.params().zeros_like();
        let mut loss = 0.0;
        for (x, y) in samples {
            let trace = self.net.forward_trace(x)?;
            let err = trace.output()[0] - y;
            loss += err * err;
            self.net.accumulate_logit_grad(&trace, &[2.0 * err / n], 1.0, &mut grad)?;
        }
        self.opt.step(self.net.params_mut(), &grad)?;
        self.updates += 1;
        if !self.net.params().is_finite() {
            return Err(Error::Training("critic parameters became non-finite".into()));
        }
        Ok(loss / n)
    }
}

/// The three networks of one run and their optimizer state.
#[derive(Debug, Clone)]
pub struct ArcvcAgent {
    pub actor: Mlp,
    actor_opt: Adam,
    pub value_critic: Option<Critic>,
    pub risk_critic: Option<Critic>,
    pub global_mean: Option<GlobalMean>,
    clipped_probabilities: u64,
}

impl ArcvcAgent {
    /// Allocates the actor, plus a value critic for state-based references and
    /// a risk critic for the risk-network penalty.
    pub fn new<R: Rng + ?Sized>(feature_dim: usize, num_actions: usize, config: &ArcvcConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let actor = Mlp::init(&[feature_dim, h, num_actions], Head::Softmax, rng)?;
        let actor_opt = Adam::new(actor.params().len(), AdamConfig::with_lr(config.actor_lr));
        let critic_sizes = [feature_dim, h, h, 1];
        let value_critic = if config.reference.needs_value_critic() {
            Some(Critic::new(Mlp::init(&critic_sizes, Head::Linear, rng)?, config.value_lr))
        } else {
            None
        };
        let risk_critic = if config.penalty == PenaltyMethod::RiskNetwork {
            Some(Critic::new(Mlp::init(&critic_sizes, Head::Linear, rng)?, config.risk_lr))
        } else {
            None
        };
        let global_mean = match &config.reference {
            ReferenceMethod::GlobalMean { initial, schedule } => Some(GlobalMean::new(*initial, *schedule)),
            _ => None,
        };
        Ok(Self { actor, actor_opt, value_critic, risk_critic, global_mean, clipped_probabilities: 0 })
    }

    pub fn clipped_probabilities(&self) -> u64 {
        self.clipped_probabilities
    }

    /// `grad_theta log mu(action | x)`; for a softmax head the logit gradient is
    /// `onehot(action) - mu`.
    pub fn score_function(&mut self, features: &[f64], action: usize) -> Result<ParamVector> {
        let mut grad = self.actor.params().zeros_like();
        self.accumulate_score(features, action, &mut grad)?;
        Ok(grad)
    }

    fn accumulate_score(&mut self, features: &[f64], action: usize, grad: &mut ParamVector) -> Result<()> {
        let trace = self.actor.forward_trace(features)?;
        let probs = trace.output();
        let p = *probs
            .get(action)
            .ok_or_else(|| Error::Usage(format!("action {action} out of range")))?;
        if p < MIN_PROBABILITY {
            self.clipped_probabilities += 1;
        }
        let logit_grad: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(a, q)| if a == action { 1.0 - q } else { -q })
            .collect();
        self.actor.accumulate_logit_grad(&trace, &logit_grad, 1.0, grad)
    }

    /// Sum of scores over the first `min(horizon + 1, len)` steps.
    pub fn score_sum(&mut self, episode: &EpisodeBatch, horizon: usize) -> Result<ParamVector> {
        let mut grad = self.actor.params().zeros_like();
        let n = episode.len().min(horizon.saturating_add(1));
        for t in &episode.transitions[..n] {
            self.accumulate_score(&t.features, t.action, &mut grad)?;
        }
        Ok(grad)
    }

    pub fn reference_value(&self, method: &ReferenceMethod, features: &[f64]) -> Result<f64> {
        match method {
            ReferenceMethod::StateValue | ReferenceMethod::Bootstrapped => self
                .value_critic
                .as_ref()
                .ok_or_else(|| Error::Usage("reference needs a value critic".into()))?
                .value(features),
            ReferenceMethod::GlobalMean { .. } => Ok(self
                .global_mean
                .as_ref()
                .ok_or_else(|| Error::Usage("global mean reference not initialised".into()))?
                .value()),
            ReferenceMethod::Constant(v) => Ok(*v),
        }
    }

    pub fn risk_estimate(&self, features: &[f64]) -> Result<Option<f64>> {
        self.risk_critic.as_ref().map(|c| c.value(features)).transpose()
    }

    /// Regression target for the value critic at one replayed step.
    fn value_target(&self, config: &ArcvcConfig, item: &crate::trajectory::ReplayItem) -> Result<f64> {
        let critic = self.value_critic.as_ref().expect("checked by caller");
        match (&config.reference, config.value_training) {
            (ReferenceMethod::Bootstrapped, _) => {
                let nu = critic.value(&item.features)?;
                Ok(bootstrapped_target(&config.risk, item.ret, nu))
            }
            (_, ValueTraining::MonteCarlo) => Ok(item.ret),
            (_, ValueTraining::TemporalDifference { .. }) => {
                let next = if item.terminal {
                    0.0
                } else {
                    critic.target.as_ref().unwrap_or(&critic.net).scalar(&item.next_features)?
                };
                Ok(item.reward + config.gamma * next)
            }
        }
    }

    /// One minibatch update of the value critic from replay; returns the mean loss.
    pub fn update_value_critic<R: Rng + ?Sized>(&mut self, replay: &ReplayBuffer, config: &ArcvcConfig, rng: &mut R) -> Result<f64> {
        if self.value_critic.is_none() {
            return Err(Error::Usage("no value critic allocated for this reference method".into()));
        }
        if replay.is_empty() {
            return Err(Error::Usage("replay buffer is empty".into()));
        }
        if let ValueTraining::TemporalDifference { target_refresh } = config.value_training {
            let critic = self.value_critic.as_mut().expect("checked above");
            if critic.target.is_none() || critic.updates.is_multiple_of(target_refresh as u64) {
                critic.target = Some(critic.net.clone());
            }
        }
        let batch = replay.sample(config.batch_size, rng);
        let samples = batch
            .iter()
            .map(|item| Ok((item.features.as_slice(), self.value_target(config, item)?)))
            .collect::<Result<Vec<_>>>()?;
        self.value_critic.as_mut().expect("checked above").regress(&samples)
    }

    /// Fits the risk critic to `rho_t = f(B_t - nu_t)` over one episode.
    pub fn update_risk_critic(&mut self, episode: &EpisodeBatch, spec: &RiskSpec, references: &[f64]) -> Result<f64> {
        let critic = self
            .risk_critic
            .as_mut()
            .ok_or_else(|| Error::Usage("risk critic update requested with the sample-based penalty".into()))?;
        if episode.is_empty() || references.len() != episode.len() {
            return Err(Error::Usage("risk critic update needs one reference per step".into()));
        }
        let samples: Vec<(&[f64], f64)> = episode
            .transitions
            .iter()
            .zip(&episode.returns)
            .zip(references)
            .map(|((t, b), nu)| (t.features.as_slice(), spec.sample_risk(*b, *nu)))
            .collect();
        critic.regress(&samples)
    }

    /// Writes `actor.params` and, when allocated, `value.params` / `risk.params`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("actor.params"), self.actor.to_snapshot())?;
        if let Some(c) = &self.value_critic {
            fs::write(dir.join("value.params"), c.net.to_snapshot())?;
        }
        if let Some(c) = &self.risk_critic {
            fs::write(dir.join("risk.params"), c.net.to_snapshot())?;
        }
        Ok(())
    }

    fn step_actor(&mut self, ascent: &ParamVector) -> Result<()> {
        let mut descent = ascent.clone();
        descent.scale(-1.0);
        self.actor_opt.step(self.actor.params_mut(), &descent)?;
        if !self.actor.params().is_finite() {
            return Err(Error::Training("actor parameters became non-finite".into()));
        }
        Ok(())
    }
}

/// Per-sample target of the bootstrapped reference:
/// `B - lambda (f(B - nu) - D) g(f(B - nu) - D)`.
pub fn bootstrapped_target(spec: &RiskSpec, b: f64, nu: f64) -> f64 {
    let excess = spec.f.eval(b - nu) - spec.d;
    b - spec.lambda * excess * spec.g.eval(excess)
}

/// Inputs of the gradient estimator for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeTerms {
    pub b0: f64,
    pub reference: f64,
    /// Risk-critic output at the initial state (risk-network penalty only).
    pub risk_estimate: Option<f64>,
    pub score_sum: ParamVector,
}

/// Batch gradient estimate with per-coordinate delta-method standard errors.
#[derive(Debug, Clone)]
pub struct GradientEstimate {
    pub mean: ParamVector,
    pub std_err: Vec<f64>,
    /// Batch mean of the correction coefficients `c_i`.
    pub mean_correction: f64,
}

/// How `mean(c_i)` is formed in the `mean(c_i) * grad_nu` term.
///
/// Both factors are estimated from episodes, and `c_i` and `B_i S_i` from the
/// same episode are correlated, so their product must not pair an episode
/// with itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CorrectionWeight {
    /// Pair every episode's `c_i` with the other episodes' `grad_nu`; needs at
    /// least two episodes.
    LeaveOneOut,
    /// A coefficient estimated outside the batch, e.g. from earlier updates.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorOptions {
    pub penalty: PenaltyMethod,
    /// `Some` only when the reference depends on the actor (the state-value reference).
    pub reference_gradient: Option<ReferenceGradient>,
    pub baseline: bool,
    pub correction: CorrectionWeight,
}

/// Ascent direction for the penalised objective; see the module docs.
pub fn policy_gradient_estimate(terms: &[EpisodeTerms], spec: &RiskSpec, options: &EstimatorOptions) -> Result<GradientEstimate> {
    let first = terms.first().ok_or_else(|| Error::Usage("empty episode batch".into()))?;
    let n = terms.len() as f64;
    let lambda = spec.lambda;
    let mut weights = Vec::with_capacity(terms.len());
    let mut coefs = Vec::with_capacity(terms.len());
    for t in terms {
        let z = t.b0 - t.reference;
        let f = spec.f.eval(z);
        let fp = spec.f.derivative(z);
        let main = if options.baseline { t.b0 - t.reference } else { t.b0 };
        let (w, c) = if lambda == 0.0 {
            (main, 0.0)
        } else {
            match options.penalty {
                PenaltyMethod::RiskNetwork => {
                    let r_hat = t
                        .risk_estimate
                        .ok_or_else(|| Error::Usage("risk-network penalty needs a risk estimate".into()))?;
                    let gp = spec.g.derivative(r_hat - spec.d);
                    (main - lambda * gp * f, lambda * gp * fp)
                }
                PenaltyMethod::SampleBased => {
                    let excess = f - spec.d;
                    (main - lambda * spec.g.eval(excess), lambda * spec.g.derivative(excess) * fp)
                }
            }
        };
        weights.push(w);
        coefs.push(c);
    }
    let c_sum: f64 = coefs.iter().sum();
    let c_bar = c_sum / n;

    let mut mean = first.score_sum.zeros_like();
    for (t, w) in terms.iter().zip(&weights) {
        mean.add_scaled(*w, &t.score_sum);
    }
    mean.scale(1.0 / n);

    let nu_terms: Option<Vec<f64>> = options.reference_gradient.filter(|_| lambda != 0.0).map(|kind| {
        terms
            .iter()
            .map(|t| match kind {
                ReferenceGradient::LikelihoodRatio => t.b0,
                ReferenceGradient::CriticBaseline => t.b0 - t.reference,
            })
            .collect()
    });
    // coefficient applied to the batch-mean grad_nu in the influence terms below
    let mut c_used = c_bar;
    let mut grad_nu = None;
    if let Some(nu_w) = &nu_terms {
        let mut g = first.score_sum.zeros_like();
        for (t, w) in terms.iter().zip(nu_w) {
            g.add_scaled(*w, &t.score_sum);
        }
        match options.correction {
            CorrectionWeight::LeaveOneOut => {
                if terms.len() < 2 {
                    return Err(Error::Usage("leave-one-out correction needs at least two episodes".into()));
                }
                // (sum_i c_i sum_{j != i} g_j) / (n (n - 1))
                let mut own = first.score_sum.zeros_like();
                for ((t, w), c) in terms.iter().zip(nu_w).zip(&coefs) {
                    own.add_scaled(w * c, &t.score_sum);
                }
                let den = n * (n - 1.0);
                mean.add_scaled(c_sum / den, &g);
                mean.add_scaled(-1.0 / den, &own);
            }
            CorrectionWeight::Fixed(c) => {
                mean.add_scaled(c / n, &g);
                c_used = c;
            }
        }
        g.scale(1.0 / n);
        grad_nu = Some(g);
    }
    if !mean.is_finite() {
        return Err(Error::Training("non-finite policy gradient estimate".into()));
    }

    // influence_i = w_i S_i + c_i grad_nu + c nu_w_i S_i, with c_i grad_nu
    // dropped when the coefficient is fixed
    let fixed = matches!(options.correction, CorrectionWeight::Fixed(_));
    let dim = mean.len();
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    for (i, t) in terms.iter().enumerate() {
        let s = t.score_sum.values();
        for k in 0..dim {
            let mut v = weights[i] * s[k];
            if let (Some(g), Some(nu_w)) = (&grad_nu, &nu_terms) {
                if !fixed {
                    v += coefs[i] * g.values()[k];
                }
                v += c_used * nu_w[i] * s[k];
            }
            sum[k] += v;
            sum_sq[k] += v * v;
        }
    }
    let std_err = sum
        .iter()
        .zip(&sum_sq)
        .map(|(s, sq)| {
            if terms.len() < 2 {
                0.0
            } else {
                let m = s / n;
                ((sq / n - m * m).max(0.0) * n / (n - 1.0) / n).sqrt()
            }
        })
        .collect();
    Ok(GradientEstimate { mean, std_err, mean_correction: c_bar })
}

/// Outcome of [`train`]; `failure` is set when the run diverged.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub records: Vec<RunRecord>,
    pub failure: Option<String>,
    pub agent: ArcvcAgent,
}

/// Stateful training loop over one environment.
pub struct Trainer<'a, E: Environment> {
    env: &'a E,
    config: ArcvcConfig,
    agent: ArcvcAgent,
    replay: Option<ReplayBuffer>,
    rollout_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    records: Vec<RunRecord>,
    /// Running mean of the correction coefficients, used with single-episode updates.
    correction_mean: f64,
}

impl<'a, E: Environment> Trainer<'a, E> {
    pub fn new(env: &'a E, config: ArcvcConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = stream_rng(config.seed, INIT_STREAM);
        let agent = ArcvcAgent::new(env.feature_dim(), env.num_actions(), &config, &mut init_rng)?;
        let replay = if config.reference.needs_value_critic() { Some(ReplayBuffer::new(config.replay_capacity)?) } else { None };
        Ok(Self {
            env,
            rollout_rng: stream_rng(config.seed, ROLLOUT_STREAM),
            replay_rng: stream_rng(config.seed, REPLAY_STREAM),
            config,
            agent,
            replay,
            records: Vec::new(),
            correction_mean: 0.0,
        })
    }

    pub fn agent(&self) -> &ArcvcAgent {
        &self.agent
    }

    pub fn records(&self) -> &[RunRecord] {
        &self.records
    }

    pub fn config(&self) -> &ArcvcConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.records.len() >= self.config.episodes
    }

    /// Collects one update's worth of episodes and applies the actor, value
    /// critic and risk critic updates in that order.
    pub fn step(&mut self) -> Result<&[RunRecord]> {
        let start_len = self.records.len();
        let n = self.config.episodes_per_update.min(self.config.episodes - start_len);
        if n == 0 {
            return Ok(&[]);
        }
        let horizon = self.config.horizon();
        let gamma = self.config.gamma;
        let mut episodes = Vec::with_capacity(n);
        let mut timers = Vec::with_capacity(n);
        for _ in 0..n {
            let started = Instant::now();
            let ep = rollout(self.env, &self.agent.actor, gamma, horizon, usize::MAX, &mut self.rollout_rng)?;
            timers.push((started, started.elapsed()));
            episodes.push(ep);
        }

        // references and risk estimates from the networks as they were during collection
        let mut step_refs = Vec::with_capacity(n);
        let mut terms = Vec::with_capacity(n);
        let mut pending = Vec::with_capacity(n);
        for ep in &episodes {
            let refs = ep
                .transitions
                .iter()
                .map(|t| self.agent.reference_value(&self.config.reference, &t.features))
                .collect::<Result<Vec<f64>>>()?;
            let x0 = match ep.transitions.first() {
                Some(t) => t.features.clone(),
                None => self.env.encode(&self.env.initial_state()),
            };
            let nu0 = match refs.first() {
                Some(v) => *v,
                None => self.agent.reference_value(&self.config.reference, &x0)?,
            };
            let b0 = ep.initial_return();
            let sample_risk = self.config.risk.sample_risk(b0, nu0);
            pending.push((b0, nu0, sample_risk));
            if !ep.is_empty() {
                terms.push(EpisodeTerms {
                    b0,
                    reference: nu0,
                    risk_estimate: self.agent.risk_estimate(&x0)?,
                    score_sum: self.agent.score_sum(ep, horizon)?,
                });
            }
            step_refs.push(refs);
        }

        if !terms.is_empty() {
            let pathway = match self.config.reference {
                ReferenceMethod::StateValue => Some(self.config.reference_gradient),
                _ => None,
            };
            let correction = if terms.len() >= 2 { CorrectionWeight::LeaveOneOut } else { CorrectionWeight::Fixed(self.correction_mean) };
            let options = EstimatorOptions { penalty: self.config.penalty, reference_gradient: pathway, baseline: self.config.baseline, correction };
            let estimate = policy_gradient_estimate(&terms, &self.config.risk, &options)?;
            self.correction_mean += self.config.correction_rate * (estimate.mean_correction - self.correction_mean);
            let mut grad = estimate.mean;
            if let Some(clip) = self.config.grad_clip {
                grad.clip_norm(clip);
            }
            self.agent.step_actor(&grad)?;
        }

        if let Some(replay) = self.replay.as_mut() {
            for ep in &episodes {
                replay.push_episode(ep);
            }
            if !replay.is_empty() {
                for _ in 0..self.config.critic_steps {
                    self.agent.update_value_critic(replay, &self.config, &mut self.replay_rng)?;
                }
            }
        }
        if let Some(gm) = self.agent.global_mean.as_mut() {
            for ep in &episodes {
                for b in &ep.returns {
                    gm.observe(*b);
                }
            }
        }
        if self.agent.risk_critic.is_some() {
            for (ep, refs) in episodes.iter().zip(&step_refs) {
                if !ep.is_empty() {
                    for _ in 0..self.config.critic_steps {
                        self.agent.update_risk_critic(ep, &self.config.risk, refs)?;
                    }
                }
            }
        }

        for (i, (ep, (b0, nu0, sample_risk))) in episodes.iter().zip(pending).enumerate() {
            let (started, rollout_time) = timers[i];
            let wall = if i + 1 == n { started.elapsed() } else { rollout_time };
            self.records.push(RunRecord {
                episode: start_len + i,
                total_reward: ep.total_reward(),
                b0,
                violation: self.config.risk.is_violation(sample_risk),
                success: ep.success,
                sample_risk,
                reference: nu0,
                wall_ms: wall.as_secs_f64() * 1e3,
            });
        }
        Ok(&self.records[start_len..])
    }

    /// Runs to completion, calling `on_update` after every update with the
    /// number of finished episodes. Divergence stops the loop and is reported
    /// in [`TrainingRun::failure`].
    pub fn run_with<F>(mut self, mut on_update: F) -> Result<TrainingRun>
    where
        F: FnMut(usize, &ArcvcAgent) -> Result<()>,
    {
        let mut failure = None;
        while !self.is_finished() {
            match self.step() {
                Ok(_) => on_update(self.records.len(), &self.agent)?,
                Err(Error::Training(msg)) => {
                    failure = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(TrainingRun { records: self.records, failure, agent: self.agent })
    }

    pub fn run(self) -> Result<TrainingRun> {
        self.run_with(|_, _| Ok(()))
    }
}

/// Trains a fresh agent on `env` for `config.episodes` episodes.
pub fn train<E: Environment>(env: &E, config: &ArcvcConfig) -> Result<TrainingRun> {
    Trainer::new(env, config.clone())?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{FiniteMdp, GridWorld, GridWorldConfig};
    use crate::nn::softmax;
    use crate::risk::{PenaltyFunction, RiskFunction};
    use crate::trajectory::ReplayItem;

    fn abs_spec(lambda: f64) -> RiskSpec {
        RiskSpec::new(RiskFunction::OneSidedAbs, PenaltyFunction::SquaredHinge, 0.1, lambda).unwrap()
    }

    fn tabular_agent(config: &ArcvcConfig, states: usize, actions: usize) -> ArcvcAgent {
        ArcvcAgent::new(states, actions, config, &mut stream_rng(1, 0)).unwrap()
    }

    #[test]
    fn expected_score_is_zero() {
        let config = ArcvcConfig { hidden: 5, ..ArcvcConfig::new(abs_spec(1.0)) };
        let mut agent = tabular_agent(&config, 3, 4);
        let x = [0.2, -0.4, 0.9];
        let probs = agent.actor.forward(&x).unwrap();
        let mut total = agent.actor.params().zeros_like();
        for (a, p) in probs.iter().enumerate() {
            total.add_scaled(*p, &agent.score_function(&x, a).unwrap());
        }
        assert!(total.values().iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn score_of_free_logits_is_onehot_minus_probs() {
        // a bias-only softmax over actions: one-hot input of width 1 with zero weights
        let config = ArcvcConfig::new(abs_spec(1.0));
        let mut agent = tabular_agent(&config, 1, 3);
        let mut params = ParamVector::zeros(&[1, 3]).unwrap();
        params.values_mut().copy_from_slice(&[0.0, 0.0, 0.0, 0.5, -1.0, 2.0]);
        agent.actor = Mlp::from_params(&[1, 3], Head::Softmax, params).unwrap();
        let mu = softmax(&[0.5, -1.0, 2.0]);
        let score = agent.score_function(&[0.0], 1).unwrap();
        let expected = [0.0 - mu[0], 1.0 - mu[1], 0.0 - mu[2]];
        for (s, e) in score.values()[3..].iter().zip(expected) {
            assert!((s - e).abs() < 1e-15);
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let config = ArcvcConfig { hidden: 6, ..ArcvcConfig::new(abs_spec(1.0)) };
        let mut agent = tabular_agent(&config, 2, 4);
        let x = [0.7, -0.3];
        let score = agent.score_function(&x, 2).unwrap();
        let h = 1e-6;
        for i in 0..agent.actor.params().len() {
            let mut plus = agent.actor.clone();
            plus.params_mut().values_mut()[i] += h;
            let mut minus = agent.actor.clone();
            minus.params_mut().values_mut()[i] -= h;
            let fd = (plus.forward(&x).unwrap()[2].ln() - minus.forward(&x).unwrap()[2].ln()) / (2.0 * h);
            let s = score.values()[i];
            assert!((fd - s).abs() <= 1e-4 * s.abs().max(1e-3), "{i}: {fd} vs {s}");
        }
    }

    #[test]
    fn tiny_probabilities_are_counted() {
        let config = ArcvcConfig::new(abs_spec(1.0));
        let mut agent = tabular_agent(&config, 1, 2);
        let mut params = ParamVector::zeros(&[1, 2]).unwrap();
        params.values_mut().copy_from_slice(&[0.0, 0.0, 0.0, 40.0]);
        agent.actor = Mlp::from_params(&[1, 2], Head::Softmax, params).unwrap();
        let s = agent.score_function(&[1.0], 0).unwrap();
        assert!(s.is_finite());
        assert_eq!(agent.clipped_probabilities(), 1);
    }

    fn opts(penalty: PenaltyMethod, pathway: bool, correction: CorrectionWeight) -> EstimatorOptions {
        EstimatorOptions { penalty, reference_gradient: pathway.then_some(ReferenceGradient::LikelihoodRatio), baseline: false, correction }
    }

    fn terms_for(b: &[f64], scores: &[[f64; 2]]) -> Vec<EpisodeTerms> {
        b.iter()
            .zip(scores)
            .map(|(b0, s)| {
                let mut p = ParamVector::zeros(&[1, 1]).unwrap();
                p.values_mut().copy_from_slice(s);
                EpisodeTerms { b0: *b0, reference: 0.5, risk_estimate: Some(0.4), score_sum: p }
            })
            .collect()
    }

    #[test]
    fn zero_penalty_reduces_to_reinforce() {
        let terms = terms_for(&[1.0, -2.0, 0.25], &[[1.0, 2.0], [-1.0, 0.5], [3.0, -4.0]]);
        let expected = [(1.0 + 2.0 + 0.75) / 3.0, (2.0 - 1.0 - 1.0) / 3.0];
        for penalty in [PenaltyMethod::RiskNetwork, PenaltyMethod::SampleBased] {
            let est = policy_gradient_estimate(&terms, &abs_spec(0.0), &opts(penalty, true, CorrectionWeight::LeaveOneOut)).unwrap();
            for (v, e) in est.mean.values().iter().zip(expected) {
                assert!((v - e).abs() < 1e-15);
            }
        }
        // a risk that is identically zero leaves only the return term
        let zero = RiskSpec::new(RiskFunction::shaped(1.0, 0.0).unwrap(), PenaltyFunction::SquaredHinge, 0.1, 10.0).unwrap();
        let zero = RiskSpec { f: RiskFunction::Custom(std::sync::Arc::new(Zero)), ..zero };
        for penalty in [PenaltyMethod::RiskNetwork, PenaltyMethod::SampleBased] {
            let mut t = terms.clone();
            t.iter_mut().for_each(|x| x.risk_estimate = Some(0.0));
            let est = policy_gradient_estimate(&t, &zero, &opts(penalty, true, CorrectionWeight::LeaveOneOut)).unwrap();
            for (v, e) in est.mean.values().iter().zip(expected) {
                assert!((v - e).abs() < 1e-15);
            }
        }
    }

    #[derive(Debug)]
    struct Zero;

    impl crate::risk::RiskShape for Zero {
        fn name(&self) -> &str {
            "zero"
        }
        fn value(&self, _: f64) -> f64 {
            0.0
        }
        fn derivative(&self, _: f64) -> f64 {
            0.0
        }
    }

    #[derive(Debug)]
    struct ConstantAt(f64);

    impl crate::risk::RiskShape for ConstantAt {
        fn name(&self) -> &str {
            "constant"
        }
        fn value(&self, _: f64) -> f64 {
            self.0
        }
        fn derivative(&self, _: f64) -> f64 {
            0.0
        }
    }

    #[test]
    fn hand_computed_penalised_estimate() {
        // f = Abs, D = 0.1, lambda = 2, nu = 0.5, R_hat = 0.4 -> g'(0.3) = 0.6
        let spec = RiskSpec::new(RiskFunction::OneSidedAbs, PenaltyFunction::SquaredHinge, 0.1, 2.0).unwrap();
        let terms = terms_for(&[0.0, 1.0], &[[1.0, 0.0], [0.0, 1.0]]);
        let est = policy_gradient_estimate(&terms, &spec, &opts(PenaltyMethod::RiskNetwork, true, CorrectionWeight::LeaveOneOut)).unwrap();
        // w = [0 - 2*0.6*0.5, 1 - 0] = [-0.6, 1]; c = [2*0.6*(-1), 0]; B S = [[0, 0], [0, 1]]
        // leave-one-out: c_0 * (B_1 S_1) / 2 = [0, -0.6]
        let expected = [-0.6 / 2.0, 1.0 / 2.0 - 0.6];
        for (v, e) in est.mean.values().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
        assert!((est.mean_correction + 0.6).abs() < 1e-12);
        // a fixed coefficient multiplies the batch mean grad_nu = [0, 0.5]
        let est = policy_gradient_estimate(&terms, &spec, &opts(PenaltyMethod::RiskNetwork, true, CorrectionWeight::Fixed(-0.6))).unwrap();
        let expected = [-0.6 / 2.0, 1.0 / 2.0 - 0.6 * 0.5];
        for (v, e) in est.mean.values().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
        assert!(policy_gradient_estimate(&terms[..1], &spec, &opts(PenaltyMethod::RiskNetwork, true, CorrectionWeight::LeaveOneOut)).is_err());
        // sample based: f = [0.5, 0] -> g(0.4) = 0.16, g'(0.4) = 0.8
        let est = policy_gradient_estimate(&terms, &spec, &opts(PenaltyMethod::SampleBased, false, CorrectionWeight::LeaveOneOut)).unwrap();
        let expected = [(0.0 - 2.0 * 0.16) / 2.0, 0.5];
        for (v, e) in est.mean.values().iter().zip(expected) {
            assert!((v - e).abs() < 1e-12, "{v} vs {e}");
        }
        let missing = vec![EpisodeTerms { risk_estimate: None, ..terms[0].clone() }];
        assert!(policy_gradient_estimate(&missing, &spec, &opts(PenaltyMethod::RiskNetwork, false, CorrectionWeight::Fixed(0.0))).is_err());
        assert!(policy_gradient_estimate(&[], &spec, &opts(PenaltyMethod::SampleBased, false, CorrectionWeight::Fixed(0.0))).is_err());
    }

    #[test]
    fn bootstrapped_target_collapses_when_risk_equals_level() {
        let base = abs_spec(10.0);
        let degenerate = RiskSpec { f: RiskFunction::Custom(std::sync::Arc::new(ConstantAt(base.d))), ..base.clone() };
        for b in [-3.0, 0.0, 0.7, 12.5] {
            assert_eq!(bootstrapped_target(&degenerate, b, 1.3), b);
        }
        // an active constraint pulls the target below B
        assert!(bootstrapped_target(&base, -2.0, 0.0) < -2.0);
    }

    #[test]
    fn global_mean_tracks_constant_samples() {
        let mut gm = GlobalMean::new(5.0, StepSchedule::Decaying { delta: 0.5 });
        for _ in 0..100_000 {
            gm.observe(-0.3);
        }
        assert!((gm.value() + 0.3).abs() < 1e-3);
        assert!(StepSchedule::Decaying { delta: 0.4 }.validate().is_err());
        assert!(StepSchedule::Constant(0.0).validate().is_err());
        let s = StepSchedule::Decaying { delta: 0.75 };
        assert!(s.alpha(1) == 1.0 && s.alpha(10) < s.alpha(9));
    }

    #[test]
    fn reference_values() {
        let config = ArcvcConfig { reference: ReferenceMethod::Constant(0.0), ..ArcvcConfig::new(abs_spec(1.0)) };
        let agent = tabular_agent(&config, 2, 2);
        assert!(agent.value_critic.is_none());
        assert_eq!(agent.reference_value(&config.reference, &[1.0, 0.0]).unwrap(), 0.0);
        let config = ArcvcConfig::new(abs_spec(1.0));
        let mut agent = tabular_agent(&config, 2, 2);
        agent.value_critic.as_mut().unwrap().net.params_mut().fill(0.0);
        assert_eq!(agent.reference_value(&config.reference, &[0.3, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn network_presence_follows_methods() {
        for reference in [
            ReferenceMethod::StateValue,
            ReferenceMethod::Bootstrapped,
            ReferenceMethod::GlobalMean { initial: 0.0, schedule: StepSchedule::Constant(0.1) },
            ReferenceMethod::Constant(1.0),
        ] {
            for penalty in [PenaltyMethod::RiskNetwork, PenaltyMethod::SampleBased] {
                let config = ArcvcConfig { reference: reference.clone(), penalty, ..ArcvcConfig::new(abs_spec(1.0)) };
                let agent = tabular_agent(&config, 2, 2);
                assert_eq!(agent.value_critic.is_some(), reference.needs_value_critic());
                assert_eq!(agent.risk_critic.is_some(), penalty == PenaltyMethod::RiskNetwork);
                assert_eq!(agent.global_mean.is_some(), matches!(reference, ReferenceMethod::GlobalMean { .. }));
            }
        }
    }

    fn replay_with(targets: &[(Vec<f64>, f64, f64)]) -> ReplayBuffer {
        let mut replay = ReplayBuffer::new(100).unwrap();
        for (x, r, b) in targets {
            replay.push(ReplayItem { features: x.clone(), reward: *r, action: 0, next_features: x.clone(), terminal: false, ret: *b });
        }
        replay
    }

    #[test]
    fn value_critic_fits_constant_targets() {
        let config = ArcvcConfig { hidden: 16, value_lr: 1e-2, batch_size: 20, ..ArcvcConfig::new(abs_spec(1.0)) };
        let mut agent = tabular_agent(&config, 2, 2);
        let replay = replay_with(&[(vec![1.0, 0.0], 0.0, 0.7), (vec![0.0, 1.0], 0.0, 0.7), (vec![0.5, 0.5], 0.0, 0.7)]);
        let mut rng = stream_rng(3, 2);
        for _ in 0..1500 {
            agent.update_value_critic(&replay, &config, &mut rng).unwrap();
        }
        for x in [[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]] {
            assert!((agent.reference_value(&config.reference, &x).unwrap() - 0.7).abs() < 1e-2);
        }
    }

    #[test]
    fn value_critic_zero_targets() {
        let config = ArcvcConfig { hidden: 16, value_lr: 1e-2, batch_size: 20, ..ArcvcConfig::new(abs_spec(1.0)) };
        let mut agent = tabular_agent(&config, 2, 2);
        let replay = replay_with(&[(vec![1.0, 0.0], 0.0, 0.0), (vec![0.0, 1.0], 0.0, 0.0)]);
        let mut rng = stream_rng(3, 2);
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            loss = agent.update_value_critic(&replay, &config, &mut rng).unwrap();
        }
        assert!(loss < 1e-4, "{loss}");
    }

    #[test]
    fn td_with_zero_discount_regresses_on_reward() {
        let config = ArcvcConfig {
            hidden: 16,
            value_lr: 1e-2,
            batch_size: 20,
            gamma: 0.0,
            value_training: ValueTraining::TemporalDifference { target_refresh: 10 },
            ..ArcvcConfig::new(abs_spec(1.0))
        };
        let mut agent = tabular_agent(&config, 2, 2);
        // returns deliberately differ from rewards
        let replay = replay_with(&[(vec![1.0, 0.0], 0.4, 9.0), (vec![0.0, 1.0], -0.2, 9.0)]);
        let mut rng = stream_rng(3, 2);
        for _ in 0..2000 {
            agent.update_value_critic(&replay, &config, &mut rng).unwrap();
        }
        assert!((agent.reference_value(&config.reference, &[1.0, 0.0]).unwrap() - 0.4).abs() < 1e-2);
        assert!((agent.reference_value(&config.reference, &[0.0, 1.0]).unwrap() + 0.2).abs() < 1e-2);
    }

    fn single_state_episode(returns: &[f64]) -> EpisodeBatch {
        EpisodeBatch {
            transitions: returns
                .iter()
                .map(|_| crate::trajectory::Transition {
                    features: vec![1.0],
                    action: 0,
                    reward: 0.0,
                    next_features: vec![1.0],
                    terminal: false,
                    coords: vec![0],
                })
                .collect(),
            returns: returns.to_vec(),
            success: false,
        }
    }

    #[test]
    fn risk_critic_learns_mean_sample_risk() {
        let config = ArcvcConfig { hidden: 8, risk_lr: 3e-3, ..ArcvcConfig::new(abs_spec(1.0)) };
        let mut agent = tabular_agent(&config, 1, 2);
        // rho = |B| on the negative side: targets 0, 1, 2, 3 with mean 1.5
        let ep = single_state_episode(&[0.5, -1.0, -2.0, -3.0]);
        let refs = vec![0.0; 4];
        for _ in 0..4000 {
            agent.update_risk_critic(&ep, &config.risk, &refs).unwrap();
        }
        let r = agent.risk_estimate(&[1.0]).unwrap().unwrap();
        let targets = [0.0, 1.0, 2.0, 3.0f64];
        let sd = (targets.iter().map(|t| (t - 1.5) * (t - 1.5)).sum::<f64>() / 3.0).sqrt();
        assert!((r - 1.5).abs() < 2.0 * sd / 2.0, "{r}");
        assert!(r >= -0.05);
    }

    #[test]
    fn risk_critic_zero_risk_and_usage_error() {
        let zero = RiskSpec { f: RiskFunction::Custom(std::sync::Arc::new(Zero)), ..abs_spec(1.0) };
        let config = ArcvcConfig { hidden: 8, risk_lr: 1e-2, ..ArcvcConfig::new(zero.clone()) };
        let mut agent = tabular_agent(&config, 1, 2);
        let ep = single_state_episode(&[0.5, -1.0]);
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            loss = agent.update_risk_critic(&ep, &zero, &[0.0, 0.0]).unwrap();
        }
        assert!(loss < 1e-4);
        let config = ArcvcConfig { penalty: PenaltyMethod::SampleBased, ..config };
        let mut agent = tabular_agent(&config, 1, 2);
        assert!(matches!(agent.update_risk_critic(&ep, &zero, &[0.0, 0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let env = GridWorld::new(GridWorldConfig { width: 6, height: 5, target: (0, 4), max_steps: 60, layout_seed: 2, ..Default::default() }).unwrap();
        let config = ArcvcConfig { episodes: 12, hidden: 8, batch_size: 16, seed: 5, ..ArcvcConfig::new(abs_spec(10.0)) };
        let strip = |run: TrainingRun| run.records.into_iter().map(|r| RunRecord { wall_ms: 0.0, ..r }).collect::<Vec<_>>();
        let a = strip(train(&env, &config).unwrap());
        let b = strip(train(&env, &config).unwrap());
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        let c = strip(train(&env, &ArcvcConfig { seed: 6, ..config }).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn all_method_combinations_train() {
        let mdp = FiniteMdp::new(
            vec![vec![vec![0.7, 0.3], vec![0.2, 0.8]], vec![vec![0.5, 0.5], vec![0.9, 0.1]]],
            vec![vec![1.0, 0.0], vec![-1.0, 0.5]],
            0,
            3,
        )
        .unwrap();
        for reference in [
            ReferenceMethod::StateValue,
            ReferenceMethod::Bootstrapped,
            ReferenceMethod::GlobalMean { initial: 0.0, schedule: StepSchedule::Decaying { delta: 1.0 } },
            ReferenceMethod::Constant(0.2),
        ] {
            for penalty in [PenaltyMethod::RiskNetwork, PenaltyMethod::SampleBased] {
                let config = ArcvcConfig {
                    reference: reference.clone(),
                    penalty,
                    episodes: 7,
                    episodes_per_update: 3,
                    hidden: 4,
                    batch_size: 8,
                    ..ArcvcConfig::new(abs_spec(10.0))
                };
                let run = train(&mdp, &config).unwrap();
                assert!(run.failure.is_none());
                assert_eq!(run.records.len(), 7);
                assert_eq!(run.records.iter().map(|r| r.episode).collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());
            }
        }
    }
}
