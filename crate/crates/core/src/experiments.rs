//! The four experiment sweeps and their CSV outputs.
//!
//! Every task of a sweep is an independent single-threaded run with its own
//! seeded streams; tasks execute on a worker pool and their results are
//! collected in task order, so outputs do not depend on the worker count.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::env::GridWorld;
use crate::error::{Error, Result};
use crate::metrics::{epsilon_bar, success_rate, violation_rate, EpsilonBarConfig, EpsilonBarSample, RunRecord};
use crate::risk::RiskKind;
use crate::shaping::{collect_shaping_samples, fit_shaped_model, synthetic_samples, ShapedFit, ShapingSample};
use crate::trainer::{stream_rng, ArcvcConfig, PenaltyMethod, Trainer, TrainingRun};
use crate::trajectory::Estimate;

/// Random stream used for post-training evaluation.
pub const EVAL_STREAM: u64 = 3;

/// Files written by a sweep and the runs that diverged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepReport {
    pub files: Vec<PathBuf>,
    pub failures: Vec<String>,
}

/// One finished training run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub records: Vec<RunRecord>,
    pub failure: Option<String>,
}

impl RunOutcome {
    fn from_run(seed: u64, run: TrainingRun) -> Self {
        Self { seed, records: run.records, failure: run.failure }
    }

    pub fn status(&self) -> &'static str {
        if self.failure.is_some() {
            "diverged"
        } else {
            "ok"
        }
    }

    /// Violation and success rate over the trailing `window` episodes, or all
    /// episodes when fewer were run.
    pub fn rates(&self, window: usize) -> Option<(f64, f64)> {
        let w = window.min(self.records.len());
        if w == 0 {
            return None;
        }
        Some((violation_rate(&self.records, w).ok()?, success_rate(&self.records, w).ok()?))
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Trains on a grid world, writing snapshots under `checkpoint_dir` when given.
pub fn train_grid(env: &GridWorld, config: &ArcvcConfig, checkpoint_dir: Option<&Path>, every: usize) -> Result<TrainingRun> {
    let mut next = every;
    let run = Trainer::new(env, config.clone())?.run_with(|done, agent| {
        if let Some(dir) = checkpoint_dir {
            if every > 0 && done >= next {
                agent.save_checkpoint(&dir.join(format!("episode_{done}")))?;
                next += every;
            }
        }
        Ok(())
    })?;
    if let Some(dir) = checkpoint_dir {
        run.agent.save_checkpoint(&dir.join("final"))?;
    }
    Ok(run)
}

fn checkpoint_dir(cfg: &ExperimentConfig, out: Option<&Path>, parts: &[String]) -> Option<PathBuf> {
    let out = out?;
    if !cfg.experiment.checkpoints {
        return None;
    }
    let mut dir = out.join("checkpoints");
    for p in parts {
        dir.push(p);
    }
    Some(dir)
}

fn csv_writer(path: &Path, schema: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "#schema={schema} v1")?;
    Ok(csv::Writer::from_writer(file))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_episodes(path: &Path, rows: &[(String, &RunOutcome)]) -> Result<()> {
    let mut w = csv_writer(path, "episodes")?;
    w.write_record(["label", "seed", "episode", "total_reward", "b0", "violation", "success", "sample_risk", "reference", "wall_ms"])?;
    for (label, run) in rows {
        for r in &run.records {
            w.write_record([
                label.clone(),
                run.seed.to_string(),
                r.episode.to_string(),
                r.total_reward.to_string(),
                r.b0.to_string(),
                (r.violation as u8).to_string(),
                (r.success as u8).to_string(),
                r.sample_risk.to_string(),
                r.reference.to_string(),
                r.wall_ms.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Risk comparison

#[derive(Debug, Clone)]
pub struct RiskComparison {
    /// `(kind, run)` in kind-major, seed-minor order.
    pub runs: Vec<(RiskKind, RunOutcome)>,
    pub window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KindSummary {
    pub kind: RiskKind,
    pub violation: Estimate,
    pub success: Estimate,
}

impl RiskComparison {
    /// Seed mean and standard error of the rates per kind, over runs that finished.
    pub fn summaries(&self) -> Vec<KindSummary> {
        let mut kinds: Vec<RiskKind> = Vec::new();
        for (k, _) in &self.runs {
            if !kinds.contains(k) {
                kinds.push(*k);
            }
        }
        kinds
            .into_iter()
            .map(|kind| {
                let rates: Vec<(f64, f64)> = self
                    .runs
                    .iter()
                    .filter(|(k, r)| *k == kind && r.failure.is_none())
                    .filter_map(|(_, r)| r.rates(self.window))
                    .collect();
                let v: Vec<f64> = rates.iter().map(|r| r.0).collect();
                let s: Vec<f64> = rates.iter().map(|r| r.1).collect();
                KindSummary { kind, violation: Estimate::from_samples(&v), success: Estimate::from_samples(&s) }
            })
            .collect()
    }
}

/// Trains every configured risk kind on every seed. The grid layout is fixed
/// by `env.layout_seed`; the run seed drives initialisation and sampling.
pub fn risk_comparison(cfg: &ExperimentConfig, workers: usize, out: Option<&Path>) -> Result<RiskComparison> {
    cfg.validate(ExperimentKind::RiskComparison)?;
    let env = GridWorld::new(cfg.env.grid(cfg.env.layout_seed))?;
    let kinds = cfg.risk.kinds.iter().map(|k| k.parse::<RiskKind>().map_err(|_| Error::Config(format!("unknown risk kind `{k}`")))).collect::<Result<Vec<_>>>()?;
    let tasks: Vec<(RiskKind, u64)> = kinds.iter().flat_map(|k| cfg.experiment.seeds.iter().map(move |s| (*k, *s))).collect();
    let runs = pool(workers)?.install(|| {
        tasks
            .par_iter()
            .map(|&(kind, seed)| {
                let config = cfg.arcvc_config(kind, cfg.trainer.gamma, seed)?;
                let dir = checkpoint_dir(cfg, out, &[kind.as_str().to_string(), format!("seed_{seed}")]);
                let run = train_grid(&env, &config, dir.as_deref(), cfg.experiment.checkpoint_every)?;
                Ok((kind, RunOutcome::from_run(seed, run)))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(RiskComparison { runs, window: cfg.metrics.window })
}

pub fn write_risk_comparison(result: &RiskComparison, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let summary = out.join("risk_comparison.csv");
    let mut w = csv_writer(&summary, "risk_comparison")?;
    w.write_record(["row_type", "risk", "seed", "violation_rate", "violation_se", "success_rate", "success_se", "n", "status"])?;
    for (kind, run) in &result.runs {
        let rates = run.rates(result.window);
        w.write_record([
            "run".into(),
            kind.as_str().to_string(),
            run.seed.to_string(),
            opt(rates.map(|r| r.0)),
            String::new(),
            opt(rates.map(|r| r.1)),
            String::new(),
            "1".into(),
            run.status().to_string(),
        ])?;
    }
    for s in result.summaries() {
        w.write_record([
            "summary".into(),
            s.kind.as_str().to_string(),
            String::new(),
            s.violation.mean.to_string(),
            s.violation.std_err.to_string(),
            s.success.mean.to_string(),
            s.success.std_err.to_string(),
            s.violation.n.to_string(),
            String::new(),
        ])?;
    }
    w.flush()?;
    let episodes = out.join("episodes.csv");
    let rows: Vec<(String, &RunOutcome)> = result.runs.iter().map(|(k, r)| (k.as_str().to_string(), r)).collect();
    write_episodes(&episodes, &rows)?;
    Ok(vec![summary, episodes])
}

pub fn run_risk_comparison(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<SweepReport> {
    let result = risk_comparison(cfg, workers, Some(out))?;
    let files = write_risk_comparison(&result, out)?;
    let failures = result
        .runs
        .iter()
        .filter_map(|(k, r)| r.failure.as_ref().map(|f| format!("{} seed {}: {f}", k.as_str(), r.seed)))
        .collect();
    Ok(SweepReport { files, failures })
}

// ---------------------------------------------------------------------------
// Reference study

#[derive(Debug, Clone)]
pub struct ReferenceRun {
    pub gamma: f64,
    pub seed: u64,
    pub sample: Option<EpsilonBarSample>,
    pub failure: Option<String>,
}

/// Per `(gamma, seed)`: train with discount `gamma`, then measure the global
/// versus per-state reference gap of the trained policy.
pub fn reference_study(cfg: &ExperimentConfig, workers: usize, out: Option<&Path>) -> Result<Vec<ReferenceRun>> {
    cfg.validate(ExperimentKind::ReferenceStudy)?;
    let env = GridWorld::new(cfg.env.grid(cfg.env.layout_seed))?;
    let kind: RiskKind = cfg.risk.kind.parse().map_err(|_| Error::Config(format!("unknown risk kind `{}`", cfg.risk.kind)))?;
    let f = cfg.risk_function(kind)?;
    let tasks: Vec<(f64, u64)> = cfg.reference_study.gammas.iter().flat_map(|g| cfg.experiment.seeds.iter().map(move |s| (*g, *s))).collect();
    pool(workers)?.install(|| {
        tasks
            .par_iter()
            .map(|&(gamma, seed)| {
                let config = cfg.arcvc_config(kind, gamma, seed)?;
                let dir = checkpoint_dir(cfg, out, &[format!("gamma_{gamma}"), format!("seed_{seed}")]);
                let run = train_grid(&env, &config, dir.as_deref(), cfg.experiment.checkpoint_every)?;
                if let Some(failure) = run.failure {
                    return Ok(ReferenceRun { gamma, seed, sample: None, failure: Some(failure) });
                }
                let eb = EpsilonBarConfig {
                    n_states: cfg.metrics.n_states,
                    n_episodes: cfg.metrics.n_episodes,
                    stationary_steps: cfg.metrics.stationary_steps,
                    tau: config.horizon(),
                    max_steps: usize::MAX,
                };
                let mut rng = stream_rng(seed, EVAL_STREAM);
                let sample = epsilon_bar(&env, &run.agent.actor, &f, gamma, &eb, &mut rng)?;
                Ok(ReferenceRun { gamma, seed, sample: Some(sample), failure: None })
            })
            .collect()
    })
}

/// Mean and standard error of the gap per gamma, in first-seen gamma order.
pub fn reference_summaries(runs: &[ReferenceRun]) -> Vec<(f64, Estimate)> {
    let mut gammas: Vec<f64> = Vec::new();
    for r in runs {
        if !gammas.contains(&r.gamma) {
            gammas.push(r.gamma);
        }
    }
    gammas
        .into_iter()
        .map(|g| {
            let v: Vec<f64> = runs.iter().filter(|r| r.gamma == g).filter_map(|r| r.sample.map(|s| s.eps_bar)).collect();
            (g, Estimate::from_samples(&v))
        })
        .collect()
}

pub fn write_reference_study(runs: &[ReferenceRun], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let path = out.join("reference_study.csv");
    let mut w = csv_writer(&path, "reference_study")?;
    w.write_record(["row_type", "gamma", "seed", "eps_bar", "eps_bar_se", "eps_global", "eps_global_se", "eps_state", "eps_state_se", "status"])?;
    for r in runs {
        let s = r.sample;
        w.write_record([
            "run".into(),
            r.gamma.to_string(),
            r.seed.to_string(),
            opt(s.map(|s| s.eps_bar)),
            String::new(),
            opt(s.map(|s| s.eps_global.mean)),
            opt(s.map(|s| s.eps_global.std_err)),
            opt(s.map(|s| s.eps_state.mean)),
            opt(s.map(|s| s.eps_state.std_err)),
            if r.failure.is_some() { "diverged" } else { "ok" }.to_string(),
        ])?;
    }
    for (g, e) in reference_summaries(runs) {
        w.write_record(["summary".into(), g.to_string(), String::new(), e.mean.to_string(), e.std_err.to_string(), String::new(), String::new(), String::new(), String::new(), String::new()])?;
    }
    w.flush()?;
    Ok(vec![path])
}

pub fn run_reference_study(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<SweepReport> {
    let runs = reference_study(cfg, workers, Some(out))?;
    let files = write_reference_study(&runs, out)?;
    let failures = runs.iter().filter_map(|r| r.failure.as_ref().map(|f| format!("gamma {} seed {}: {f}", r.gamma, r.seed))).collect();
    Ok(SweepReport { files, failures })
}

// ---------------------------------------------------------------------------
// Penalty study

#[derive(Debug, Clone)]
pub struct PenaltyPair {
    /// Seeds both the mine layout and the training run of both arms.
    pub layout: u64,
    pub network: RunOutcome,
    pub sample: RunOutcome,
}

/// Trains both penalty methods on each layout with matched seeds.
pub fn penalty_study(cfg: &ExperimentConfig, workers: usize, out: Option<&Path>) -> Result<Vec<PenaltyPair>> {
    cfg.validate(ExperimentKind::PenaltyStudy)?;
    let kind: RiskKind = cfg.risk.kind.parse().map_err(|_| Error::Config(format!("unknown risk kind `{}`", cfg.risk.kind)))?;
    let tasks: Vec<(u64, PenaltyMethod)> = cfg
        .experiment
        .seeds
        .iter()
        .flat_map(|s| [(*s, PenaltyMethod::RiskNetwork), (*s, PenaltyMethod::SampleBased)])
        .collect();
    let runs = pool(workers)?.install(|| {
        tasks
            .par_iter()
            .map(|&(seed, penalty)| {
                let env = GridWorld::new(cfg.env.grid(seed))?;
                let config = ArcvcConfig { penalty, ..cfg.arcvc_config(kind, cfg.trainer.gamma, seed)? };
                let dir = checkpoint_dir(cfg, out, &[format!("layout_{seed}"), penalty.name().to_string()]);
                let run = train_grid(&env, &config, dir.as_deref(), cfg.experiment.checkpoint_every)?;
                Ok(RunOutcome::from_run(seed, run))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut it = runs.into_iter();
    let mut pairs = Vec::new();
    while let (Some(network), Some(sample)) = (it.next(), it.next()) {
        pairs.push(PenaltyPair { layout: network.seed, network, sample });
    }
    Ok(pairs)
}

pub fn write_penalty_study(pairs: &[PenaltyPair], window: usize, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let path = out.join("penalty_study.csv");
    let mut w = csv_writer(&path, "penalty_study")?;
    w.write_record(["layout", "penalty", "episode", "total_reward", "accumulated_reward", "violation", "violation_rate", "success"])?;
    for pair in pairs {
        for (name, run) in [("risk_network", &pair.network), ("sample_based", &pair.sample)] {
            let mut acc = 0.0;
            for (i, r) in run.records.iter().enumerate() {
                acc += r.total_reward;
                let rate = violation_rate(&run.records[..=i], window.min(i + 1))?;
                w.write_record([
                    pair.layout.to_string(),
                    name.to_string(),
                    r.episode.to_string(),
                    r.total_reward.to_string(),
                    acc.to_string(),
                    (r.violation as u8).to_string(),
                    rate.to_string(),
                    (r.success as u8).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(vec![path])
}

pub fn run_penalty_study(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<SweepReport> {
    let pairs = penalty_study(cfg, workers, Some(out))?;
    let files = write_penalty_study(&pairs, cfg.metrics.window, out)?;
    let failures = pairs
        .iter()
        .flat_map(|p| [&p.network, &p.sample])
        .zip(["risk_network", "sample_based"].into_iter().cycle())
        .filter_map(|(r, name)| r.failure.as_ref().map(|f| format!("layout {} {name}: {f}", r.seed)))
        .collect();
    Ok(SweepReport { files, failures })
}

// ---------------------------------------------------------------------------
// Shaping

#[derive(Debug, Clone)]
pub struct ShapingRun {
    pub seed: u64,
    pub samples: Vec<ShapingSample>,
    pub fit: ShapedFit,
}

/// Collects (or synthesises) samples for each seed and fits the shaped model.
pub fn shaping(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<ShapingRun>> {
    cfg.validate(ExperimentKind::Shaping)?;
    pool(workers)?.install(|| {
        cfg.experiment
            .seeds
            .iter()
            .map(|&seed| {
                let samples = match &cfg.shaping.synthetic {
                    Some(s) => synthetic_samples(s.b, s.c, s.sigma, s.n, (s.z_min, s.z_max), &mut stream_rng(seed, 0))?,
                    None => collect_shaping_samples(&cfg.shaping_config(seed)?)?,
                };
                let fit = fit_shaped_model(&samples)?;
                Ok(ShapingRun { seed, samples, fit })
            })
            .collect()
    })
}

pub fn write_shaping(runs: &[ShapingRun], out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let samples = out.join("shaping_samples.csv");
    let mut w = csv_writer(&samples, "shaping_samples")?;
    w.write_record(["seed", "z", "y", "m"])?;
    for r in runs {
        for s in &r.samples {
            w.write_record([r.seed.to_string(), s.z.to_string(), s.y.to_string(), s.m.to_string()])?;
        }
    }
    w.flush()?;
    let fit = out.join("shaping_fit.csv");
    let mut w = csv_writer(&fit, "shaping_fit")?;
    w.write_record(["seed", "b", "c", "rss", "n"])?;
    for r in runs {
        w.write_record([r.seed.to_string(), r.fit.b.to_string(), r.fit.c.to_string(), r.fit.rss.to_string(), r.fit.n.to_string()])?;
    }
    w.flush()?;
    Ok(vec![samples, fit])
}

pub fn run_shaping(cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<SweepReport> {
    let runs = shaping(cfg, workers)?;
    Ok(SweepReport { files: write_shaping(&runs, out)?, failures: Vec::new() })
}

/// Dispatches to the runner of `kind`.
pub fn run(kind: ExperimentKind, cfg: &ExperimentConfig, out: &Path, workers: usize) -> Result<SweepReport> {
    match kind {
        ExperimentKind::RiskComparison => run_risk_comparison(cfg, out, workers),
        ExperimentKind::ReferenceStudy => run_reference_study(cfg, out, workers),
        ExperimentKind::PenaltyStudy => run_penalty_study(cfg, out, workers),
        ExperimentKind::Shaping => run_shaping(cfg, out, workers),
    }
}
