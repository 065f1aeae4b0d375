//! Risk shaping: fitting `1 / (1 + b (z - c)^2)` to `(B - J, p_k(m))` pairs
//! collected from the gambler's-ruin process.

use std::io::Write;
use std::ops::RangeInclusive;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::env::{bankruptcy_probability, GamblersRuin, GamblersRuinConfig};
use crate::error::{Error, Result};
use crate::risk::RiskFunction;
use crate::trainer::stream_rng;
use crate::trajectory::{monte_carlo_value, rollout_from, UniformPolicy};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapingSample {
    /// Realization of `B - J(m)`.
    pub z: f64,
    /// Risk target for the source fortune.
    pub y: f64,
    pub m: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapedFit {
    pub b: f64,
    pub c: f64,
    pub rss: f64,
    pub n: usize,
}

/// Where the per-fortune risk target comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RiskTarget {
    /// The exact `p_k(m)` from dynamic programming.
    #[default]
    Exact,
    /// Fraction of the drawn episodes that went bankrupt within `k` bets.
    Empirical,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapingConfig {
    pub ruin: GamblersRuinConfig,
    pub fortunes: RangeInclusive<u64>,
    pub n_per_state: usize,
    /// Rollouts used to estimate `J(m)`.
    pub n_value_episodes: usize,
    pub target: RiskTarget,
    pub seed: u64,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        Self {
            ruin: GamblersRuinConfig { lookahead: 10, horizon: 10, gamma: 1.0, ..Default::default() },
            fortunes: 1..=25,
            n_per_state: 200,
            n_value_episodes: 200,
            target: RiskTarget::Exact,
            seed: 0,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        self.ruin.validate()?;
        if self.fortunes.is_empty() || *self.fortunes.start() == 0 {
            return Err(Error::Config("fortunes must be a non-empty range starting at 1 or above".into()));
        }
        if self.n_per_state == 0 || self.n_value_episodes == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// Draws `n_per_state` realizations of `B - J(m)` for every fortune `m`, each
/// paired with that fortune's risk target. Fortune `m` uses its own random
/// stream, so the result does not depend on how the work is scheduled.
pub fn collect_shaping_samples(config: &ShapingConfig) -> Result<Vec<ShapingSample>> {
    config.validate()?;
    let env = GamblersRuin::new(config.ruin.clone())?;
    let k = config.ruin.lookahead;
    let gamma = config.ruin.gamma;
    let per_fortune = config
        .fortunes
        .clone()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|m| {
            let mut rng = stream_rng(config.seed, m);
            let start = env.state(m);
            let policy = UniformPolicy(1);
            let j = monte_carlo_value(&env, &policy, &start, config.n_value_episodes, gamma, usize::MAX, usize::MAX, &mut rng)?.mean;
            let mut zs = Vec::with_capacity(config.n_per_state);
            let mut ruined = 0usize;
            for _ in 0..config.n_per_state {
                let ep = rollout_from(&env, &policy, start, gamma, usize::MAX, usize::MAX, &mut rng)?;
                let final_fortune = m as i64 + ep.transitions.iter().map(|t| t.reward as i64).sum::<i64>();
                if final_fortune == 0 && ep.len() <= k {
                    ruined += 1;
                }
                zs.push(ep.initial_return() - j);
            }
            let y = match config.target {
                RiskTarget::Exact => bankruptcy_probability(m, k),
                RiskTarget::Empirical => ruined as f64 / config.n_per_state as f64,
            };
            Ok(zs.into_iter().map(|z| ShapingSample { z, y, m }).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_fortune.into_iter().flatten().collect())
}

fn model(b: f64, c: f64, z: f64) -> f64 {
    1.0 / (1.0 + b * (z - c) * (z - c))
}

fn rss(samples: &[ShapingSample], b: f64, c: f64) -> f64 {
    samples.iter().map(|s| (s.y - model(b, c, s.z)).powi(2)).sum()
}

const GRID_LOG_B: usize = 61;
const GRID_C: usize = 101;
const MAX_ITERATIONS: usize = 500;

fn check_samples(samples: &[ShapingSample]) -> Result<(f64, f64)> {
    if samples.len() < 3 {
        return Err(Error::DegenerateFit(format!("need at least 3 samples, got {}", samples.len())));
    }
    if samples.iter().any(|s| !s.z.is_finite() || !s.y.is_finite()) {
        return Err(Error::DegenerateFit("samples must be finite".into()));
    }
    let lo = samples.iter().map(|s| s.z).fold(f64::INFINITY, f64::min);
    let hi = samples.iter().map(|s| s.z).fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::DegenerateFit(format!("all samples share z = {lo}")));
    }
    Ok((lo, hi))
}

/// Best point of the coarse grid: `b` log-spaced over `[1e-3, 1e3]`, `c` over
/// the sample range of `z`.
pub fn grid_search(samples: &[ShapingSample]) -> Result<ShapedFit> {
    let (lo, hi) = check_samples(samples)?;
    let mut best = ShapedFit { b: 1.0, c: lo, rss: f64::INFINITY, n: samples.len() };
    for i in 0..GRID_LOG_B {
        let b = 10f64.powf(-3.0 + 6.0 * i as f64 / (GRID_LOG_B - 1) as f64);
        for j in 0..GRID_C {
            let c = lo + (hi - lo) * j as f64 / (GRID_C - 1) as f64;
            let r = rss(samples, b, c);
            if r < best.rss {
                best = ShapedFit { b, c, rss: r, n: samples.len() };
            }
        }
    }
    Ok(best)
}

/// Least-squares fit of the shaped model: grid search followed by
/// Levenberg-damped Gauss-Newton on `(ln b, c)`. Only improving steps are
/// accepted, so the result is never worse than the best grid point.
pub fn fit_shaped_model(samples: &[ShapingSample]) -> Result<ShapedFit> {
    let start = grid_search(samples)?;
    let (mut lb, mut c, mut cur) = (start.b.ln(), start.c, start.rss);
    let mut damping = 1e-3;
    for _ in 0..MAX_ITERATIONS {
        // normal equations for residual r = y - h, with dh/dlnb = -b d^2 h^2, dh/dc = 2 b d h^2
        let b = lb.exp();
        let (mut a00, mut a01, mut a11, mut g0, mut g1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for s in samples {
            let d = s.z - c;
            let h = model(b, c, s.z);
            let j0 = -b * d * d * h * h;
            let j1 = 2.0 * b * d * h * h;
            let r = s.y - h;
            a00 += j0 * j0;
            a01 += j0 * j1;
            a11 += j1 * j1;
            g0 += j0 * r;
            g1 += j1 * r;
        }
        let mut improved = false;
        while damping < 1e12 {
            let m00 = a00 + damping * a00.max(1e-12);
            let m11 = a11 + damping * a11.max(1e-12);
            let det = m00 * m11 - a01 * a01;
            if det.abs() < 1e-300 {
                damping *= 10.0;
                continue;
            }
            let step_lb = (m11 * g0 - a01 * g1) / det;
            let step_c = (m00 * g1 - a01 * g0) / det;
            let (nlb, nc) = (lb + step_lb, c + step_c);
            let next = rss(samples, nlb.exp(), nc);
            if next.is_finite() && next < cur {
                let small = step_lb.abs() < 1e-14 * (1.0 + lb.abs()) && step_c.abs() < 1e-14 * (1.0 + c.abs());
                lb = nlb;
                c = nc;
                cur = next;
                damping = (damping / 10.0).max(1e-12);
                improved = !small;
                break;
            }
            damping *= 10.0;
        }
        if !improved {
            break;
        }
    }
    Ok(ShapedFit { b: lb.exp(), c, rss: cur, n: samples.len() })
}

pub fn shaped_risk_from_fit(fit: &ShapedFit) -> Result<RiskFunction> {
    RiskFunction::shaped(fit.b, fit.c)
}

/// Noisy draws from a known model, for checking the fitter. `z` is uniform on
/// `z_range` and `y = 1 / (1 + b (z - c)^2) + N(0, sigma^2)`.
pub fn synthetic_samples<R: Rng + ?Sized>(b: f64, c: f64, sigma: f64, n: usize, z_range: (f64, f64), rng: &mut R) -> Result<Vec<ShapingSample>> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise level: {e}")))?;
    Ok((0..n)
        .map(|_| {
            let z = rng.random_range(z_range.0..=z_range.1);
            ShapingSample { z, y: model(b, c, z) + noise.sample(rng), m: 0 }
        })
        .collect())
}

pub const SAMPLES_SCHEMA: &str = "#schema=shaping_samples v1";
pub const FIT_SCHEMA: &str = "#schema=shaping_fit v1";

pub fn write_samples_csv<W: Write>(mut out: W, samples: &[ShapingSample]) -> Result<()> {
    writeln!(out, "{SAMPLES_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["z", "y", "m"])?;
    for s in samples {
        w.write_record([s.z.to_string(), s.y.to_string(), s.m.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_fit_csv<W: Write>(mut out: W, fit: &ShapedFit) -> Result<()> {
    writeln!(out, "{FIT_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["b", "c", "rss", "n"])?;
    w.write_record([fit.b.to_string(), fit.c.to_string(), fit.rss.to_string(), fit.n.to_string()])?;
    w.flush()?;
    Ok(())
}
