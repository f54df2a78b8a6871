//! Gate-control environment.
//!
//! The agent sees 90 binary sensors laid out in 15 rows of 6 and opens the
//! top gate, the bottom gate or both. An episode ends once every sensor of
//! the central row reports resin. Rows are paired by their distance from the
//! central row; completing a pair is what the agent is rewarded for.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field_gen::{generate_field, FieldConfig, PermeabilityField};
use crate::flow_sim::{sim_step, FlowState, SolverConfig};

pub const SENSOR_COLS: usize = 6;
pub const SENSOR_ROWS: usize = 15;
pub const SENSOR_COUNT: usize = SENSOR_COLS * SENSOR_ROWS;
/// Sensor row of the central band; also the vertical target for the centroid.
pub const CENTER_ROW: usize = SENSOR_ROWS / 2;
/// Rows equidistant from the central row, `(r, 14 - r)` for `r < 7`.
pub const PAIR_COUNT: usize = SENSOR_ROWS / 2;
pub const ACTION_COUNT: usize = 3;

/// Fill fraction at which a sensor reports resin.
pub const SENSOR_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateAction {
    TopOnly,
    BottomOnly,
    Both,
}

impl GateAction {
    pub const ALL: [GateAction; ACTION_COUNT] =
        [GateAction::TopOnly, GateAction::BottomOnly, GateAction::Both];

    /// `(top_open, bottom_open)`.
    pub fn gates(self) -> (bool, bool) {
        match self {
            GateAction::TopOnly => (true, false),
            GateAction::BottomOnly => (false, true),
            GateAction::Both => (true, true),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Usage(format!("action index {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            GateAction::TopOnly => "top",
            GateAction::BottomOnly => "bottom",
            GateAction::Both => "both",
        }
    }
}

/// Placement of the sensors on the simulation grid.
///
/// Rows mirror about the horizontal midline. The central sensor row sits
/// on the midline itself and reads the larger fill of the two cells that
/// straddle it.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorGrid {
    width: usize,
    rows: [[usize; 2]; SENSOR_ROWS],
    cols: [usize; SENSOR_COLS],
}

impl SensorGrid {
    pub fn new(width: usize, height: usize) -> Self {
        let upper = |r: usize| ((r as f64 + 0.5) * height as f64 / SENSOR_ROWS as f64) as usize;
        let mut rows = [[0; 2]; SENSOR_ROWS];
        for (r, slot) in rows.iter_mut().enumerate() {
            *slot = match r.cmp(&CENTER_ROW) {
                std::cmp::Ordering::Less => [upper(r); 2],
                std::cmp::Ordering::Greater => [height - 1 - upper(SENSOR_ROWS - 1 - r); 2],
                std::cmp::Ordering::Equal => [height / 2 - 1, height / 2],
            };
        }
        let mut cols = [0; SENSOR_COLS];
        for (c, slot) in cols.iter_mut().enumerate() {
            *slot = ((c as f64 + 0.5) * width as f64 / SENSOR_COLS as f64) as usize;
        }
        Self { width, rows, cols }
    }

    /// Grid rows read by sensor row `r`.
    pub fn grid_rows(&self, r: usize) -> [usize; 2] {
        self.rows[r]
    }

    pub fn grid_col(&self, c: usize) -> usize {
        self.cols[c]
    }

    pub fn observe(&self, state: &FlowState) -> Observation {
        let mut bits = [0u8; SENSOR_COUNT];
        for (r, rows) in self.rows.iter().enumerate() {
            for (c, &col) in self.cols.iter().enumerate() {
                let fill = rows
                    .iter()
                    .map(|&row| state.fill[row * self.width + col])
                    .fold(0.0, f64::max);
                bits[r * SENSOR_COLS + c] = u8::from(fill >= SENSOR_THRESHOLD);
            }
        }
        Observation { bits }
    }
}

/// Binary sensor readings, row-major with sensor row 0 nearest the top gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Observation {
    pub bits: [u8; SENSOR_COUNT],
}

impl Default for Observation {
    fn default() -> Self {
        Self {
            bits: [0; SENSOR_COUNT],
        }
    }
}

impl Observation {
    pub fn from_bits(bits: [u8; SENSOR_COUNT]) -> Self {
        Self { bits }
    }

    #[inline]
    pub fn active(&self, row: usize, col: usize) -> bool {
        self.bits[row * SENSOR_COLS + col] != 0
    }

    pub fn row_complete(&self, row: usize) -> bool {
        (0..SENSOR_COLS).all(|c| self.active(row, c))
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    /// Network input, one float per sensor.
    pub fn to_input(&self) -> [f64; SENSOR_COUNT] {
        self.bits.map(f64::from)
    }
}

/// True once every sensor of the central row is active.
pub fn termination_check(obs: &Observation) -> bool {
    obs.row_complete(CENTER_ROW)
}

/// Mean sensor-grid position of the active sensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub c_x: f64,
    pub c_y: f64,
    pub c_center: f64,
}

impl Centroid {
    pub fn deviation(&self) -> f64 {
        (self.c_y - self.c_center).abs()
    }
}

pub fn compute_centroid(obs: &Observation) -> Result<Centroid> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
    for r in 0..SENSOR_ROWS {
        for c in 0..SENSOR_COLS {
            if obs.active(r, c) {
                sx += c as f64;
                sy += r as f64;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::UndefinedCentroid);
    }
    Ok(Centroid {
        c_x: sx / n as f64,
        c_y: sy / n as f64,
        c_center: CENTER_ROW as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// +1 per newly completed symmetric row pair.
    SymmetricRows,
    /// Symmetric rows plus a terminal penalty on the centroid offset.
    SymmetricPlusCentroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub mode: RewardMode,
    /// Score lost per half-height (7 sensor rows) of terminal centroid offset.
    pub alpha: f64,
    /// Reward a pair only when both rows complete on the same step.
    pub strict_simultaneous: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            mode: RewardMode::SymmetricPlusCentroid,
            alpha: 2.0,
            strict_simultaneous: false,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("reward.alpha", "must be positive"));
        }
        Ok(())
    }
}

/// Normalized score from the number of completed pairs and, for the
/// centroid variant, the terminal centroid.
pub fn outcome_score(cfg: &RewardConfig, pairs: usize, terminal: Option<&Centroid>) -> f64 {
    let base = pairs as f64 / PAIR_COUNT as f64;
    let penalty = match (cfg.mode, terminal) {
        (RewardMode::SymmetricPlusCentroid, Some(c)) => {
            cfg.alpha * c.deviation() / CENTER_ROW as f64
        }
        _ => 0.0,
    };
    (base - penalty).clamp(0.0, 1.0)
}

/// Episode score from the per-step rewards of a finished episode.
pub fn episode_score(rewards: &[f64]) -> f64 {
    rewards.iter().sum::<f64>().clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub field: FieldConfig,
    pub solver: SolverConfig,
    pub reward: RewardConfig,
    /// Control steps after which an episode is cut off with score 0.
    pub step_cap: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            field: FieldConfig::default(),
            solver: SolverConfig::default(),
            reward: RewardConfig::default(),
            step_cap: DEFAULT_STEP_CAP,
        }
    }
}

/// Ten times the target episode length of 70 control steps.
pub const DEFAULT_STEP_CAP: usize = 700;

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.field.validate()?;
        self.solver.validate()?;
        self.reward.validate()?;
        if self.field.grid_width < SENSOR_COLS {
            return Err(Error::config("field.grid_width", "must be at least 6 to host the sensors"));
        }
        if self.field.grid_height < 2 * SENSOR_ROWS {
            return Err(Error::config("field.grid_height", "must be at least 30 to host the sensors"));
        }
        if self.step_cap == 0 {
            return Err(Error::config("step_cap", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// 1-based index of the step just taken.
    pub step_index: usize,
    pub centroid: Option<Centroid>,
    /// Observation indices that switched on during this step.
    pub newly_activated: Vec<usize>,
    /// Symmetric pairs completed this step (unnormalized reward).
    pub raw_reward: f64,
    pub pairs_completed: usize,
    /// The step cap ended the episode.
    pub truncated: bool,
    /// Final normalized score, set on the last step.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    /// Normalized reward; an episode's rewards sum to its score.
    pub reward: f64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone)]
pub struct Environment {
    cfg: EnvConfig,
    sensors: SensorGrid,
    field: PermeabilityField,
    state: FlowState,
    obs: Observation,
    /// A pair is settled once rewarded, or once it can no longer be (strict mode).
    pair_settled: [bool; PAIR_COUNT],
    pairs_completed: usize,
    steps: usize,
    cumulative: f64,
    done: bool,
}

impl Environment {
    pub fn new(cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let (w, h) = (cfg.field.grid_width, cfg.field.grid_height);
        let field = PermeabilityField::uniform(w, h, cfg.field.base_perm)?;
        Ok(Self {
            sensors: SensorGrid::new(w, h),
            state: FlowState::empty(w, h),
            field,
            cfg,
            obs: Observation::default(),
            pair_settled: [false; PAIR_COUNT],
            pairs_completed: 0,
            steps: 0,
            cumulative: 0.0,
            done: true,
        })
    }

    /// Start an episode on a freshly sampled field.
    pub fn reset(&mut self, seed: u64) -> Result<Observation> {
        let field = generate_field(seed, &self.cfg.field)?;
        self.reset_with_field(field)
    }

    /// Start an episode on a given field (must match the configured grid).
    pub fn reset_with_field(&mut self, field: PermeabilityField) -> Result<Observation> {
        if field.width() != self.cfg.field.grid_width || field.height() != self.cfg.field.grid_height {
            return Err(Error::Usage("field does not match the configured grid".into()));
        }
        self.state = FlowState::for_field(&field);
        self.field = field;
        self.obs = self.sensors.observe(&self.state);
        self.pair_settled = [false; PAIR_COUNT];
        self.pairs_completed = 0;
        self.steps = 0;
        self.cumulative = 0.0;
        self.done = false;
        Ok(self.obs)
    }

    pub fn step(&mut self, action: GateAction) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Usage("episode is finished; call reset".into()));
        }
        sim_step(&self.field, &mut self.state, action, &self.cfg.solver)?;
        self.steps += 1;

        let prev = self.obs;
        let obs = self.sensors.observe(&self.state);
        let newly_activated: Vec<usize> = (0..SENSOR_COUNT)
            .filter(|&i| obs.bits[i] != 0 && prev.bits[i] == 0)
            .collect();

        let mut new_pairs = 0;
        for p in 0..PAIR_COUNT {
            if self.pair_settled[p] {
                continue;
            }
            let (a, b) = (p, SENSOR_ROWS - 1 - p);
            if !(obs.row_complete(a) && obs.row_complete(b)) {
                continue;
            }
            self.pair_settled[p] = true;
            let simultaneous = !prev.row_complete(a) && !prev.row_complete(b);
            if simultaneous || !self.cfg.reward.strict_simultaneous {
                new_pairs += 1;
            }
        }
        self.pairs_completed += new_pairs;
        self.obs = obs;

        let centroid = compute_centroid(&obs).ok();
        let terminated = termination_check(&obs);
        let truncated = !terminated && self.steps >= self.cfg.step_cap;
        let mut reward = new_pairs as f64 / PAIR_COUNT as f64;
        let mut score = None;
        if terminated || truncated {
            let final_score = if truncated {
                0.0
            } else {
                outcome_score(&self.cfg.reward, self.pairs_completed, centroid.as_ref())
            };
            reward = final_score - self.cumulative;
            score = Some(final_score);
            self.done = true;
        }
        self.cumulative += reward;

        Ok(StepOutcome {
            observation: obs,
            reward,
            done: self.done,
            info: StepInfo {
                step_index: self.steps,
                centroid,
                newly_activated,
                raw_reward: new_pairs as f64,
                pairs_completed: self.pairs_completed,
                truncated,
                score,
            },
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn field(&self) -> &PermeabilityField {
        &self.field
    }

    pub fn state(&self) -> &FlowState {
        &self.state
    }

    pub fn sensors(&self) -> &SensorGrid {
        &self.sensors
    }

    pub fn observation(&self) -> Observation {
        self.obs
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs_with_rows(rows: &[usize]) -> Observation {
        let mut bits = [0u8; SENSOR_COUNT];
        for &r in rows {
            for c in 0..SENSOR_COLS {
                bits[r * SENSOR_COLS + c] = 1;
            }
        }
        Observation::from_bits(bits)
    }

    #[test]
    fn sensor_rows_mirror_about_midline() {
        let g = SensorGrid::new(24, 60);
        for r in 0..SENSOR_ROWS {
            let [a, b] = g.grid_rows(r);
            let [ma, mb] = g.grid_rows(SENSOR_ROWS - 1 - r);
            assert_eq!(a + mb, 59);
            assert_eq!(b + ma, 59);
        }
        assert_eq!(g.grid_rows(CENTER_ROW), [29, 30]);
        assert_eq!(g.grid_rows(0), [2, 2]);
        assert_eq!((0..6).map(|c| g.grid_col(c)).collect::<Vec<_>>(), vec![2, 6, 10, 14, 18, 22]);
    }

    #[test]
    fn termination_only_on_full_central_row() {
        assert!(termination_check(&obs_with_rows(&[CENTER_ROW])));
        assert!(termination_check(&obs_with_rows(&(0..SENSOR_ROWS).collect::<Vec<_>>())));
        for c in 0..SENSOR_COLS {
            let mut o = obs_with_rows(&[CENTER_ROW]);
            o.bits[CENTER_ROW * SENSOR_COLS + c] = 0;
            assert!(!termination_check(&o));
        }
        assert!(!termination_check(&Observation::default()));
    }

    #[test]
    fn centroid_cases() {
        let c = compute_centroid(&obs_with_rows(&[0, 14])).unwrap();
        assert_eq!(c.c_y, 7.0);
        assert_eq!(c.c_y, c.c_center);
        assert_eq!(c.c_x, 2.5);
        assert_eq!(compute_centroid(&obs_with_rows(&[0])).unwrap().c_y, 0.0);
        assert!(matches!(
            compute_centroid(&Observation::default()),
            Err(Error::UndefinedCentroid)
        ));
    }

    #[test]
    fn centroid_matches_index_average() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let mut bits = [0u8; SENSOR_COUNT];
            for b in bits.iter_mut() {
                *b = u8::from(rng.random_bool(0.3));
            }
            let active: Vec<usize> = (0..SENSOR_COUNT).filter(|&i| bits[i] == 1).collect();
            if active.is_empty() {
                continue;
            }
            let n = active.len() as f64;
            let ry = active.iter().map(|&i| (i / 6) as f64).sum::<f64>() / n;
            let rx = active.iter().map(|&i| (i % 6) as f64).sum::<f64>() / n;
            let c = compute_centroid(&Observation::from_bits(bits)).unwrap();
            assert!((c.c_y - ry).abs() < 1e-12 && (c.c_x - rx).abs() < 1e-12);
        }
    }

    #[test]
    fn score_formula() {
        let r1 = RewardConfig {
            mode: RewardMode::SymmetricRows,
            ..Default::default()
        };
        let r2 = RewardConfig::default();
        let centered = Centroid { c_x: 2.5, c_y: 7.0, c_center: 7.0 };
        let off = Centroid { c_x: 2.5, c_y: 8.4, c_center: 7.0 };
        assert_eq!(outcome_score(&r1, 7, Some(&off)), 1.0);
        assert_eq!(outcome_score(&r1, 0, None), 0.0);
        assert_eq!(outcome_score(&r2, 7, Some(&centered)), 1.0);
        assert!((outcome_score(&r2, 7, Some(&off)) - 0.6).abs() < 1e-12);
        // Clamped at zero.
        let far = Centroid { c_x: 0.0, c_y: 0.0, c_center: 7.0 };
        assert_eq!(outcome_score(&r2, 1, Some(&far)), 0.0);
        assert_eq!(episode_score(&[0.5, 0.7]), 1.0);
        assert_eq!(episode_score(&[0.2, -0.5]), 0.0);
    }

    #[test]
    fn reset_gives_empty_observation() {
        let mut env = Environment::new(EnvConfig::default()).unwrap();
        for seed in [0, 17, 123456] {
            let o = env.reset(seed).unwrap();
            assert_eq!(o, Observation::default());
        }
    }

    #[test]
    fn stepping_finished_episode_is_usage_error() {
        let mut env = Environment::new(EnvConfig::default()).unwrap();
        assert!(matches!(env.step(GateAction::Both), Err(Error::Usage(_))));
    }

    fn symmetric_env(reward: RewardConfig) -> Environment {
        let cfg = EnvConfig {
            reward,
            ..Default::default()
        };
        let mut env = Environment::new(cfg).unwrap();
        let field = PermeabilityField::uniform(24, 60, 1.0).unwrap();
        env.reset_with_field(field).unwrap();
        env
    }

    #[test]
    fn symmetric_field_rewards_pairs_and_centers() {
        let mut env = symmetric_env(RewardConfig::default());
        let mut rewards = Vec::new();
        let mut first_pair_step = None;
        loop {
            let out = env.step(GateAction::Both).unwrap();
            if out.info.raw_reward > 0.0 && first_pair_step.is_none() {
                first_pair_step = Some(out.info.step_index);
                let obs = out.observation;
                assert!(obs.row_complete(0) && obs.row_complete(14));
                assert_eq!(out.info.raw_reward, 1.0);
                assert!((out.reward - 1.0 / 7.0).abs() < 1e-15);
            }
            rewards.push(out.reward);
            if out.done {
                let c = out.info.centroid.unwrap();
                assert!(c.deviation() < 1e-12);
                assert_eq!(out.info.pairs_completed, PAIR_COUNT);
                assert!((out.info.score.unwrap() - 1.0).abs() < 1e-12);
                break;
            }
        }
        assert!((episode_score(&rewards) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_sided_rows_earn_nothing() {
        let mut env = symmetric_env(RewardConfig {
            mode: RewardMode::SymmetricRows,
            ..Default::default()
        });
        for _ in 0..30 {
            let out = env.step(GateAction::TopOnly).unwrap();
            if out.done {
                break;
            }
            assert_eq!(out.reward, 0.0);
        }
        assert!(env.observation().row_complete(0));
    }

    #[test]
    fn strict_mode_refuses_staggered_pairs() {
        let reward = RewardConfig {
            mode: RewardMode::SymmetricRows,
            strict_simultaneous: true,
            alpha: 2.0,
        };
        let mut env = symmetric_env(reward.clone());
        // Complete row 0 alone, then let the bottom catch up.
        while !env.observation().row_complete(0) {
            env.step(GateAction::TopOnly).unwrap();
        }
        let mut total = 0.0;
        while !env.observation().row_complete(14) {
            total += env.step(GateAction::BottomOnly).unwrap().reward;
        }
        assert_eq!(total, 0.0);

        let mut relaxed = symmetric_env(RewardConfig {
            strict_simultaneous: false,
            ..reward
        });
        while !relaxed.observation().row_complete(0) {
            relaxed.step(GateAction::TopOnly).unwrap();
        }
        let mut total = 0.0;
        while !relaxed.observation().row_complete(14) {
            total += relaxed.step(GateAction::BottomOnly).unwrap().reward;
        }
        assert!((total - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn step_cap_truncates_with_zero_score() {
        let cfg = EnvConfig {
            step_cap: 3,
            ..Default::default()
        };
        let mut env = Environment::new(cfg).unwrap();
        env.reset(1).unwrap();
        let mut rewards = Vec::new();
        loop {
            let out = env.step(GateAction::TopOnly).unwrap();
            rewards.push(out.reward);
            if out.done {
                assert!(out.info.truncated);
                assert_eq!(out.info.score, Some(0.0));
                break;
            }
        }
        assert_eq!(rewards.len(), 3);
        assert_eq!(episode_score(&rewards), 0.0);
    }

    #[test]
    fn action_index_round_trip() {
        for a in GateAction::ALL {
            assert_eq!(GateAction::from_index(a.index()).unwrap(), a);
        }
        assert!(GateAction::from_index(3).is_err());
    }
}
