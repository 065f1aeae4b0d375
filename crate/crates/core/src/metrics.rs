//! Per-episode records and the evaluation measures built on them.

use std::collections::HashMap;

use rand::Rng;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::risk::RiskFunction;
use crate::trajectory::{rollout_from, sample_action, Estimate, Policy};

/// Metrics of one training episode.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub episode: usize,
    /// Undiscounted sum of rewards.
    pub total_reward: f64,
    /// Discounted return from the initial state.
    pub b0: f64,
    /// Whether the sample risk exceeded the constraint level.
    pub violation: bool,
    pub success: bool,
    /// `f(B_0 - nu)`.
    pub sample_risk: f64,
    /// Reference `nu` the sample risk was measured against.
    pub reference: f64,
    pub wall_ms: f64,
}

fn trailing(records: &[RunRecord], window: usize) -> Result<&[RunRecord]> {
    if window == 0 || records.is_empty() {
        return Err(Error::Usage("metric window is empty".into()));
    }
    if window > records.len() {
        return Err(Error::Usage(format!("window {window} exceeds the {} available records", records.len())));
    }
    Ok(&records[records.len() - window..])
}

/// Fraction of the trailing `window` episodes that violated the constraint.
pub fn violation_rate(records: &[RunRecord], window: usize) -> Result<f64> {
    let tail = trailing(records, window)?;
    Ok(tail.iter().filter(|r| r.violation).count() as f64 / window as f64)
}

/// Fraction of the trailing `window` episodes that reached the goal.
pub fn success_rate(records: &[RunRecord], window: usize) -> Result<f64> {
    let tail = trailing(records, window)?;
    Ok(tail.iter().filter(|r| r.success).count() as f64 / window as f64)
}

/// `|a - b| / max(a, b)`, defined as 0 when both are zero.
pub fn normalized_gap(a: f64, b: f64) -> f64 {
    let den = a.max(b);
    if den == 0.0 {
        0.0
    } else {
        (a - b).abs() / den
    }
}

/// Global-reference versus state-reference risk comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonBarSample {
    pub gamma: f64,
    /// Risk measured against the stationary mean of `J`.
    pub eps_global: Estimate,
    /// Risk measured against each state's own `J`.
    pub eps_state: Estimate,
    pub eps_bar: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonBarConfig {
    /// States drawn from the visit distribution.
    pub n_states: usize,
    /// Rollouts per drawn state.
    pub n_episodes: usize,
    /// Length of the rollout whose visit counts approximate the stationary distribution.
    pub stationary_steps: usize,
    pub tau: usize,
    pub max_steps: usize,
}

impl Default for EpsilonBarConfig {
    fn default() -> Self {
        Self { n_states: 50, n_episodes: 100, stationary_steps: 100_000, tau: usize::MAX, max_steps: usize::MAX }
    }
}

/// Visit frequencies of a long rollout under `policy`, restarting after each episode.
/// Returned in first-visit order.
pub fn state_visits<E, P, R>(env: &E, policy: &P, steps: usize, rng: &mut R) -> Result<Vec<(E::State, usize)>>
where
    E: Environment,
    P: Policy + ?Sized,
    R: Rng,
{
    let mut order = Vec::new();
    let mut counts: HashMap<E::State, usize> = HashMap::new();
    let mut state = env.initial_state();
    for _ in 0..steps {
        if env.is_terminal(&state) {
            state = env.initial_state();
        }
        let key = env.position(&state);
        let c = counts.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            0
        });
        *c += 1;
        let action = sample_action(&policy.probabilities(&env.encode(&state))?, rng)?;
        state = env.step(&state, action, rng)?.next;
    }
    Ok(order.into_iter().map(|s| {
        let c = counts[&s];
        (s, c)
    }).collect())
}

/// Estimates `eps_bar = |eps_G - eps_pi| / max(eps_G, eps_pi)` for `policy`.
pub fn epsilon_bar<E, P, R>(
    env: &E,
    policy: &P,
    f: &RiskFunction,
    gamma: f64,
    config: &EpsilonBarConfig,
    rng: &mut R,
) -> Result<EpsilonBarSample>
where
    E: Environment,
    P: Policy + ?Sized,
    R: Rng,
{
    if config.n_states == 0 || config.n_episodes == 0 || config.stationary_steps == 0 {
        return Err(Error::Config("epsilon_bar needs positive state, episode and step counts".into()));
    }
    let visits = state_visits(env, policy, config.stationary_steps, rng)?;
    let total: usize = visits.iter().map(|(_, c)| c).sum();
    let mut returns_per_state = Vec::with_capacity(config.n_states);
    for _ in 0..config.n_states {
        let mut pick = rng.random_range(0..total);
        let state = visits
            .iter()
            .find(|(_, c)| {
                if pick < *c {
                    true
                } else {
                    pick -= c;
                    false
                }
            })
            .map(|(s, _)| s.clone())
            .expect("pick below total visit count");
        let returns = (0..config.n_episodes)
            .map(|_| Ok(rollout_from(env, policy, state.clone(), gamma, config.tau, config.max_steps, rng)?.initial_return()))
            .collect::<Result<Vec<f64>>>()?;
        returns_per_state.push(returns);
    }
    let values: Vec<f64> = returns_per_state.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let global = values.iter().sum::<f64>() / values.len() as f64;
    let per_state = |reference: &dyn Fn(usize) -> f64| -> Vec<f64> {
        returns_per_state
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().map(|b| f.eval(b - reference(i))).sum::<f64>() / r.len() as f64)
            .collect()
    };
    let eps_global = Estimate::from_samples(&per_state(&|_| global));
    let eps_state = Estimate::from_samples(&per_state(&|i| values[i]));
    Ok(EpsilonBarSample { gamma, eps_global, eps_state, eps_bar: normalized_gap(eps_global.mean, eps_state.mean) })
}
