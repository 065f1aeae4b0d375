//! Simulation domains: the mined grid world, the gambler's-ruin reward
//! process and a small tabular MDP used for exact enumeration checks.

use std::fmt;
use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Step<S> {
    pub next: S,
    pub reward: f64,
    pub terminal: bool,
}

/// An episodic environment with a finite action set.
///
/// Environments are immutable; the state is passed in and out explicitly so a
/// single instance can be shared by concurrent rollouts.
pub trait Environment {
    type State: Clone + Eq + Hash + fmt::Debug;

    fn num_actions(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    fn encode(&self, state: &Self::State) -> Vec<f64>;
    fn is_terminal(&self, state: &Self::State) -> bool;
    fn step(&self, state: &Self::State, action: usize, rng: &mut dyn rand::RngCore) -> Result<Step<Self::State>>;

    /// Whether an episode ending in `state` counts as a success.
    fn is_success(&self, _state: &Self::State) -> bool {
        false
    }

    /// State with any time bookkeeping stripped, used to pool visits when
    /// estimating the stationary distribution. Rollouts may start from it.
    fn position(&self, state: &Self::State) -> Self::State {
        state.clone()
    }

    /// Integer coordinates written to episode traces.
    fn coords(&self, state: &Self::State) -> Vec<i64>;
}

// ---------------------------------------------------------------------------
// Grid world

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Up,
    Down,
    Right,
    Left,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Right, Action::Left];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Usage(format!("action index {i} out of range")))
    }

    /// `(dx, dy)` with `y` growing downwards.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Right => (1, 0),
            Action::Left => (-1, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridWorldConfig {
    pub width: usize,
    pub height: usize,
    pub p_mine: f64,
    pub p_noise: f64,
    pub r_mine: f64,
    pub r_target: f64,
    pub start: (usize, usize),
    pub target: (usize, usize),
    pub max_steps: usize,
    pub layout_seed: u64,
    /// Append mine indicators of the four neighbouring cells to the features.
    pub mine_features: bool,
}

impl Default for GridWorldConfig {
    fn default() -> Self {
        Self {
            width: 20,
            height: 25,
            p_mine: 0.2,
            p_noise: 0.1,
            r_mine: -1.0,
            r_target: 1.0,
            start: (0, 0),
            target: (0, 24),
            max_steps: 500,
            layout_seed: 0,
            mine_features: true,
        }
    }
}

impl GridWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width < 2 || self.height < 1 {
            return bad(format!("grid must be at least 2x1, got {}x{}", self.width, self.height));
        }
        for (name, p) in [("p_mine", self.p_mine), ("p_noise", self.p_noise)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.r_mine < 0.0) {
            return bad(format!("r_mine must be negative, got {}", self.r_mine));
        }
        if !(self.r_target > 0.0) {
            return bad(format!("r_target must be positive, got {}", self.r_target));
        }
        for (name, (x, y)) in [("start", self.start), ("target", self.target)] {
            if x >= self.width || y >= self.height {
                return bad(format!("{name} ({x}, {y}) lies outside the grid"));
            }
        }
        if self.start == self.target {
            return bad("start and target must differ".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be positive".into());
        }
        Ok(())
    }

    pub fn x_max(&self) -> usize {
        self.width - 1
    }

    pub fn y_max(&self) -> usize {
        self.height - 1
    }

    /// Probability that column `x` holds a mine: `p_mine * (x_max - x) / x_max`.
    pub fn mine_probability(&self, x: usize) -> f64 {
        let x_max = self.x_max() as f64;
        self.p_mine * (x_max - x as f64) / x_max
    }
}

/// Mine placement of one grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    width: usize,
    height: usize,
    mines: Vec<bool>,
    start: (usize, usize),
    target: (usize, usize),
}

impl Layout {
    pub fn empty(width: usize, height: usize, start: (usize, usize), target: (usize, usize)) -> Self {
        Self { width, height, mines: vec![false; width * height], start, target }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn start(&self) -> (usize, usize) {
        self.start
    }

    pub fn target(&self) -> (usize, usize) {
        self.target
    }

    pub fn is_mine(&self, x: usize, y: usize) -> bool {
        self.mines[y * self.width + x]
    }

    pub fn set_mine(&mut self, x: usize, y: usize, mine: bool) -> Result<()> {
        if (x, y) == self.start || (x, y) == self.target {
            return Err(Error::Config(format!("cell ({x}, {y}) is the start or target")));
        }
        self.mines[y * self.width + x] = mine;
        Ok(())
    }

    pub fn mine_count(&self) -> usize {
        self.mines.iter().filter(|&&m| m).count()
    }

    /// One row per line: `.` empty, `M` mine, `S` start, `T` target.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(if (x, y) == self.start {
                    'S'
                } else if (x, y) == self.target {
                    'T'
                } else if self.is_mine(x, y) {
                    'M'
                } else {
                    '.'
                });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim_end).filter(|l| !l.is_empty()).collect();
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.chars().count());
        if width == 0 || rows.iter().any(|r| r.chars().count() != width) {
            return Err(Error::Parse("layout rows must be non-empty and of equal length".into()));
        }
        let mut mines = vec![false; width * height];
        let (mut start, mut target) = (None, None);
        for (y, row) in rows.iter().enumerate() {
            for (x, ch) in row.chars().enumerate() {
                match ch {
                    '.' => {}
                    'M' => mines[y * width + x] = true,
                    'S' if start.is_none() => start = Some((x, y)),
                    'T' if target.is_none() => target = Some((x, y)),
                    other => return Err(Error::Parse(format!("unexpected layout cell `{other}` at ({x}, {y})"))),
                }
            }
        }
        match (start, target) {
            (Some(start), Some(target)) => Ok(Self { width, height, mines, start, target }),
            _ => Err(Error::Parse("layout needs exactly one S and one T".into())),
        }
    }
}

/// Samples a layout; each cell other than start and target independently
/// holds a mine with [`GridWorldConfig::mine_probability`].
pub fn generate_layout(config: &GridWorldConfig) -> Result<Layout> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.layout_seed);
    let mut layout = Layout::empty(config.width, config.height, config.start, config.target);
    for y in 0..config.height {
        for x in 0..config.width {
            let mine = rng.random::<f64>() < config.mine_probability(x);
            if (x, y) != config.start && (x, y) != config.target {
                layout.mines[y * config.width + x] = mine;
            }
        }
    }
    Ok(layout)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridState {
    pub x: usize,
    pub y: usize,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct GridWorld {
    config: GridWorldConfig,
    layout: Layout,
}

impl GridWorld {
    pub fn new(config: GridWorldConfig) -> Result<Self> {
        let layout = generate_layout(&config)?;
        Ok(Self { config, layout })
    }

    pub fn with_layout(config: GridWorldConfig, layout: Layout) -> Result<Self> {
        config.validate()?;
        if layout.width != config.width || layout.height != config.height {
            return Err(Error::Config("layout size does not match config".into()));
        }
        if layout.start != config.start || layout.target != config.target {
            return Err(Error::Config("layout start/target do not match config".into()));
        }
        Ok(Self { config, layout })
    }

    pub fn config(&self) -> &GridWorldConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    fn cell_reward(&self, x: usize, y: usize) -> f64 {
        if (x, y) == self.config.target {
            self.config.r_target
        } else if self.layout.is_mine(x, y) {
            self.config.r_mine
        } else {
            0.0
        }
    }

    /// One move. With probability `p_noise` the direction is replaced by a
    /// uniformly random one; moves off the grid leave the position unchanged.
    pub fn grid_step<R: Rng + ?Sized>(&self, state: &GridState, action: Action, rng: &mut R) -> Result<Step<GridState>> {
        if self.is_terminal(state) {
            return Err(Error::Usage("cannot step a terminal grid episode".into()));
        }
        let direction = if rng.random::<f64>() < self.config.p_noise {
            Action::ALL[rng.random_range(0..4)]
        } else {
            action
        };
        let (dx, dy) = direction.delta();
        let nx = state.x as i64 + dx;
        let ny = state.y as i64 + dy;
        let (x, y) = if nx < 0 || ny < 0 || nx > self.config.x_max() as i64 || ny > self.config.y_max() as i64 {
            (state.x, state.y)
        } else {
            (nx as usize, ny as usize)
        };
        let next = GridState { x, y, steps: state.steps + 1 };
        Ok(Step { reward: self.cell_reward(x, y), terminal: self.is_terminal(&next), next })
    }
}

impl Environment for GridWorld {
    type State = GridState;

    fn num_actions(&self) -> usize {
        4
    }

    fn feature_dim(&self) -> usize {
        if self.config.mine_features {
            6
        } else {
            2
        }
    }

    fn initial_state(&self) -> GridState {
        GridState { x: self.config.start.0, y: self.config.start.1, steps: 0 }
    }

    /// `(x / x_max, y / y_max)` followed by the up/down/right/left mine flags.
    fn encode(&self, s: &GridState) -> Vec<f64> {
        let mut out = Vec::with_capacity(6);
        out.push(s.x as f64 / self.config.x_max() as f64);
        out.push(if self.config.y_max() == 0 { 0.0 } else { s.y as f64 / self.config.y_max() as f64 });
        if self.config.mine_features {
            for a in Action::ALL {
                let (dx, dy) = a.delta();
                let (nx, ny) = (s.x as i64 + dx, s.y as i64 + dy);
                let inside = nx >= 0 && ny >= 0 && nx <= self.config.x_max() as i64 && ny <= self.config.y_max() as i64;
                out.push(if inside && self.layout.is_mine(nx as usize, ny as usize) { 1.0 } else { 0.0 });
            }
        }
        out
    }

    fn is_terminal(&self, s: &GridState) -> bool {
        (s.x, s.y) == self.config.target || s.steps >= self.config.max_steps
    }

    fn step(&self, state: &GridState, action: usize, rng: &mut dyn rand::RngCore) -> Result<Step<GridState>> {
        self.grid_step(state, Action::from_index(action)?, rng)
    }

    fn is_success(&self, s: &GridState) -> bool {
        (s.x, s.y) == self.config.target
    }

    fn position(&self, s: &GridState) -> GridState {
        GridState { steps: 0, ..*s }
    }

    fn coords(&self, s: &GridState) -> Vec<i64> {
        vec![s.x as i64, s.y as i64]
    }
}

// ---------------------------------------------------------------------------
// Gambler's ruin

#[derive(Debug, Clone, PartialEq)]
pub struct GamblersRuinConfig {
    pub initial_fortune: u64,
    /// Risk look-ahead `k`.
    pub lookahead: usize,
    /// Trajectory truncation `T_max`.
    pub horizon: usize,
    pub gamma: f64,
    /// Fortune that maps to feature value 1.
    pub fortune_cap: u64,
}

impl Default for GamblersRuinConfig {
    fn default() -> Self {
        Self { initial_fortune: 5, lookahead: 10, horizon: 10, gamma: 1.0, fortune_cap: 100 }
    }
}

impl GamblersRuinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lookahead == 0 {
            return Err(Error::Config("look-ahead k must be positive".into()));
        }
        if self.horizon < self.lookahead {
            return Err(Error::Config(format!(
                "horizon T_max = {} must be at least k = {}",
                self.horizon, self.lookahead
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if self.fortune_cap == 0 {
            return Err(Error::Config("fortune cap must be positive".into()));
        }
        Ok(())
    }
}

/// One fair bet: fortune moves by +-1 with probability 1/2 each, and the
/// reward is the change in fortune.
pub fn ruin_step<R: Rng + ?Sized>(fortune: u64, rng: &mut R) -> Result<(u64, f64)> {
    if fortune == 0 {
        return Err(Error::Usage("a bankrupt gambler cannot bet".into()));
    }
    if rng.random::<bool>() {
        Ok((fortune + 1, 1.0))
    } else {
        Ok((fortune - 1, -1.0))
    }
}

/// Probability of hitting zero within `k` bets from fortune `m`, by dynamic
/// programming over the birth-death chain.
pub fn bankruptcy_probability(m: u64, k: usize) -> f64 {
    if m == 0 {
        return 1.0;
    }
    if m as usize > k {
        return 0.0;
    }
    // p[j] = probability of ruin within the remaining steps from fortune j;
    // fortunes above k can never reach zero in time.
    let top = k + 1;
    let mut p = vec![0.0; top + 1];
    p[0] = 1.0;
    for _ in 0..k {
        let mut next = vec![0.0; top + 1];
        next[0] = 1.0;
        for j in 1..top {
            next[j] = 0.5 * (p[j - 1] + p[j + 1]);
        }
        p = next;
    }
    p[m as usize]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RuinState {
    pub fortune: u64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct GamblersRuin {
    config: GamblersRuinConfig,
}

impl GamblersRuin {
    pub fn new(config: GamblersRuinConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &GamblersRuinConfig {
        &self.config
    }

    pub fn state(&self, fortune: u64) -> RuinState {
        RuinState { fortune, steps: 0 }
    }
}

impl Environment for GamblersRuin {
    type State = RuinState;

    fn num_actions(&self) -> usize {
        1
    }

    fn feature_dim(&self) -> usize {
        1
    }

    fn initial_state(&self) -> RuinState {
        self.state(self.config.initial_fortune)
    }

    fn encode(&self, s: &RuinState) -> Vec<f64> {
        vec![s.fortune.min(self.config.fortune_cap) as f64 / self.config.fortune_cap as f64]
    }

    fn is_terminal(&self, s: &RuinState) -> bool {
        s.fortune == 0 || s.steps >= self.config.horizon
    }

    fn step(&self, state: &RuinState, action: usize, rng: &mut dyn rand::RngCore) -> Result<Step<RuinState>> {
        if action != 0 {
            return Err(Error::Usage(format!("gambler's ruin has a single action, got {action}")));
        }
        if state.steps >= self.config.horizon {
            return Err(Error::Usage("episode already truncated".into()));
        }
        let (fortune, reward) = ruin_step(state.fortune, rng)?;
        let next = RuinState { fortune, steps: state.steps + 1 };
        Ok(Step { reward, terminal: self.is_terminal(&next), next })
    }

    fn position(&self, s: &RuinState) -> RuinState {
        RuinState { steps: 0, ..*s }
    }

    fn coords(&self, s: &RuinState) -> Vec<i64> {
        vec![s.fortune as i64]
    }
}

// ---------------------------------------------------------------------------
// Tabular MDP

/// Finite MDP with deterministic rewards `r(x, u)` and a fixed episode length.
/// States are one-hot encoded.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    /// `transitions[x][u][y]` = P(y | x, u).
    transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[x][u]`.
    rewards: Vec<Vec<f64>>,
    start: usize,
    horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MdpState {
    pub index: usize,
    pub steps: usize,
}

impl FiniteMdp {
    pub fn new(transitions: Vec<Vec<Vec<f64>>>, rewards: Vec<Vec<f64>>, start: usize, horizon: usize) -> Result<Self> {
        let n = transitions.len();
        if n == 0 || rewards.len() != n || start >= n || horizon == 0 {
            return Err(Error::Config("finite MDP needs states, matching rewards, a valid start and horizon".into()));
        }
        let n_actions = transitions[0].len();
        for (x, row) in transitions.iter().enumerate() {
            if row.len() != n_actions || rewards[x].len() != n_actions || n_actions == 0 {
                return Err(Error::Config(format!("state {x} has inconsistent action count")));
            }
            for dist in row {
                let total: f64 = dist.iter().sum();
                if dist.len() != n || dist.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-12 {
                    return Err(Error::Config(format!("state {x} has an invalid transition distribution")));
                }
            }
        }
        Ok(Self { transitions, rewards, start, horizon })
    }

    pub fn num_states(&self) -> usize {
        self.transitions.len()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn transition(&self, x: usize, u: usize, y: usize) -> f64 {
        self.transitions[x][u][y]
    }

    pub fn reward(&self, x: usize, u: usize) -> f64 {
        self.rewards[x][u]
    }
}

impl Environment for FiniteMdp {
    type State = MdpState;

    fn num_actions(&self) -> usize {
        self.transitions[0].len()
    }

    fn feature_dim(&self) -> usize {
        self.num_states()
    }

    fn initial_state(&self) -> MdpState {
        MdpState { index: self.start, steps: 0 }
    }

    fn encode(&self, s: &MdpState) -> Vec<f64> {
        let mut v = vec![0.0; self.num_states()];
        v[s.index] = 1.0;
        v
    }

    fn is_terminal(&self, s: &MdpState) -> bool {
        s.steps >= self.horizon
    }

    fn step(&self, state: &MdpState, action: usize, rng: &mut dyn rand::RngCore) -> Result<Step<MdpState>> {
        if self.is_terminal(state) {
            return Err(Error::Usage("cannot step a finished episode".into()));
        }
        if action >= self.num_actions() {
            return Err(Error::Usage(format!("action {action} out of range")));
        }
        let u: f64 = rng.random();
        let dist = &self.transitions[state.index][action];
        let mut acc = 0.0;
        let mut index = dist.len() - 1;
        for (y, &p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                index = y;
                break;
            }
        }
        let next = MdpState { index, steps: state.steps + 1 };
        Ok(Step { reward: self.rewards[state.index][action], terminal: self.is_terminal(&next), next })
    }

    fn position(&self, s: &MdpState) -> MdpState {
        MdpState { steps: 0, ..*s }
    }

    fn coords(&self, s: &MdpState) -> Vec<i64> {
        vec![s.index as i64]
    }
}
