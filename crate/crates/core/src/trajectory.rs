//! Rollouts, discounted reward-to-go and the two buffers used in training.

use std::collections::VecDeque;
use std::io::Write;

use rand::Rng;

use crate::env::Environment;
use crate::error::{Error, Result};
use crate::nn::{Head, Mlp};

/// Anything that maps features to a probability vector over actions.
pub trait Policy {
    fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>>;
}

impl Policy for Mlp {
    fn probabilities(&self, features: &[f64]) -> Result<Vec<f64>> {
        if self.head() != Head::Softmax {
            return Err(Error::Config("a policy network needs a softmax head".into()));
        }
        self.forward(features)
    }
}

/// Uniform choice over `n` actions.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy(pub usize);

impl Policy for UniformPolicy {
    fn probabilities(&self, _: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![1.0 / self.0 as f64; self.0])
    }
}

/// The same distribution in every state.
#[derive(Debug, Clone)]
pub struct FixedPolicy(pub Vec<f64>);

impl Policy for FixedPolicy {
    fn probabilities(&self, _: &[f64]) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

/// Draws an action index from `probs`.
pub fn sample_action<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> Result<usize> {
    if probs.is_empty() || probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Training(format!("invalid policy output {probs:?}")));
    }
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    // rounding left u above the cumulative total; take the last positive entry
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
}

/// `sum_{t=0}^{min(tau, len-1)} gamma^t r_t`.
pub fn reward_to_go(rewards: &[f64], gamma: f64, tau: usize) -> f64 {
    let n = rewards.len().min(tau.saturating_add(1));
    rewards[..n].iter().rev().fold(0.0, |acc, r| r + gamma * acc)
}

/// Per-step returns `B_t` over the window `t..=t+tau`, truncated at the episode end.
pub fn returns_to_go(rewards: &[f64], gamma: f64, tau: usize) -> Vec<f64> {
    let n = rewards.len();
    if tau.saturating_add(1) >= n {
        let mut out = vec![0.0; n];
        let mut acc = 0.0;
        for t in (0..n).rev() {
            acc = rewards[t] + gamma * acc;
            out[t] = acc;
        }
        return out;
    }
    (0..n).map(|t| reward_to_go(&rewards[t..], gamma, tau)).collect()
}

/// Bounded FIFO holding the most recent `capacity` rewards.
#[derive(Debug, Clone)]
pub struct FiniteTimeBuffer {
    capacity: usize,
    items: VecDeque<f64>,
}

impl FiniteTimeBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("finite time buffer needs a positive capacity".into()));
        }
        Ok(Self { capacity, items: VecDeque::with_capacity(capacity) })
    }

    /// Appends `reward`, returning the evicted oldest entry when full.
    pub fn push(&mut self, reward: f64) -> Option<f64> {
        let evicted = if self.items.len() == self.capacity { self.items.pop_front() } else { None };
        self.items.push_back(reward);
        evicted
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.items.iter()
    }

    /// Discounted sum of the buffered rewards, oldest first.
    pub fn discounted_sum(&self, gamma: f64) -> f64 {
        self.items.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub features: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_features: Vec<f64>,
    pub terminal: bool,
    /// Environment coordinates of the state the action was taken in.
    pub coords: Vec<i64>,
}

/// One episode with its per-step discounted returns.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    pub transitions: Vec<Transition>,
    pub returns: Vec<f64>,
    pub success: bool,
}

impl EpisodeBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    /// `B_0`, the return from the episode's first state.
    pub fn initial_return(&self) -> f64 {
        self.returns.first().copied().unwrap_or(0.0)
    }

    pub fn total_reward(&self) -> f64 {
        self.transitions.iter().map(|t| t.reward).sum()
    }

    /// Writes `step,coords..,action,reward,b_t` rows.
    pub fn write_trace<W: Write>(&self, out: W, coord_names: &[&str]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step"];
        header.extend_from_slice(coord_names);
        header.extend_from_slice(&["action", "reward", "b_t"]);
        w.write_record(&header)?;
        for (t, (tr, b)) in self.transitions.iter().zip(&self.returns).enumerate() {
            let mut row = vec![t.to_string()];
            row.extend(tr.coords.iter().map(|c| c.to_string()));
            row.push(tr.action.to_string());
            row.push(tr.reward.to_string());
            row.push(b.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs one episode from `start`, sampling actions from `policy`.
pub fn rollout_from<E, P, R>(
    env: &E,
    policy: &P,
    start: E::State,
    gamma: f64,
    tau: usize,
    max_steps: usize,
    rng: &mut R,
) -> Result<EpisodeBatch>
where
    E: Environment,
    P: Policy + ?Sized,
    R: Rng,
{
    let mut transitions = Vec::new();
    let mut state = start;
    let mut features = env.encode(&state);
    while !env.is_terminal(&state) && transitions.len() < max_steps {
        let probs = policy.probabilities(&features)?;
        if probs.len() != env.num_actions() {
            return Err(Error::Dimension { expected: env.num_actions(), got: probs.len() });
        }
        let action = sample_action(&probs, rng)?;
        let step = env.step(&state, action, rng)?;
        let next_features = env.encode(&step.next);
        transitions.push(Transition {
            features,
            action,
            reward: step.reward,
            next_features: next_features.clone(),
            terminal: step.terminal,
            coords: env.coords(&state),
        });
        state = step.next;
        features = next_features;
    }
    let rewards: Vec<f64> = transitions.iter().map(|t| t.reward).collect();
    Ok(EpisodeBatch { returns: returns_to_go(&rewards, gamma, tau), success: env.is_success(&state), transitions })
}

pub fn rollout<E, P, R>(env: &E, policy: &P, gamma: f64, tau: usize, max_steps: usize, rng: &mut R) -> Result<EpisodeBatch>
where
    E: Environment,
    P: Policy + ?Sized,
    R: Rng,
{
    rollout_from(env, policy, env.initial_state(), gamma, tau, max_steps, rng)
}

/// Sample mean and standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self { mean: f64::NAN, std_err: f64::NAN, n };
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let std_err = if n > 1 {
            let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_err, n }
    }
}

/// Monte-Carlo estimate of `J(state)` from `n_episodes` rollouts.
pub fn monte_carlo_value<E, P, R>(
    env: &E,
    policy: &P,
    state: &E::State,
    n_episodes: usize,
    gamma: f64,
    tau: usize,
    max_steps: usize,
    rng: &mut R,
) -> Result<Estimate>
where
    E: Environment,
    P: Policy + ?Sized,
    R: Rng,
{
    if n_episodes == 0 {
        return Err(Error::Config("monte_carlo_value needs at least one episode".into()));
    }
    let samples = (0..n_episodes)
        .map(|_| Ok(rollout_from(env, policy, state.clone(), gamma, tau, max_steps, rng)?.initial_return()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&samples))
}

/// Replay entry `(x_t, r_t, a_t, x_{t+1}, B_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    pub features: Vec<f64>,
    pub reward: f64,
    pub action: usize,
    pub next_features: Vec<f64>,
    pub terminal: bool,
    pub ret: f64,
}

/// Bounded replay store with FIFO eviction and uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<ReplayItem>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay buffer needs a positive capacity".into()));
        }
        Ok(Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) })
    }

    pub fn push(&mut self, item: ReplayItem) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn push_episode(&mut self, episode: &EpisodeBatch) {
        for (t, b) in episode.transitions.iter().zip(&episode.returns) {
            self.push(ReplayItem {
                features: t.features.clone(),
                reward: t.reward,
                action: t.action,
                next_features: t.next_features.clone(),
                terminal: t.terminal,
                ret: *b,
            });
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, index: usize) -> Option<&ReplayItem> {
        self.items.get(index)
    }

    /// Uniform sample of `n` indices, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..n).map(|_| rng.random_range(0..self.items.len())).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&ReplayItem> {
        self.sample_indices(n, rng).into_iter().map(|i| &self.items[i]).collect()
    }
}
