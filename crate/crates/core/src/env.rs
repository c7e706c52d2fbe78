//! Closed-loop episode simulator tying dynamics, coverage, masking, reward
//! and observations together.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{
    default_timeout, generate_scenario_with, min_initial_battery, FovConfig, FovTable,
    GeneratorConfig, Objective, Scenario, TargetMap,
};
use crate::dynamics::{step, Action, BatteryModel, CrashReason, UavState};
use crate::error::{Error, Result};
use crate::grid::{landing_distance_field, Cell, DistanceField, GridMap};
use crate::observation::{build_observation, history_layer, Observation, ObservationConfig, PositionHistory};
use crate::reward::{reward, RewardConfig};
use crate::safety::{mask, ActionMask, MaskLevel};
use crate::trace::TraceRecord;

/// Per-map precomputation shared read-only by every episode on that map.
#[derive(Debug)]
pub struct World {
    pub name: String,
    pub map: Arc<GridMap>,
    pub dfield: DistanceField,
    pub fov_table: FovTable,
}

impl World {
    pub fn new(name: impl Into<String>, map: Arc<GridMap>, fov: FovConfig) -> Self {
        Self {
            name: name.into(),
            dfield: landing_distance_field(&map),
            fov_table: FovTable::new(&map, fov),
            map,
        }
    }

    pub fn fov(&self) -> FovConfig {
        self.fov_table.fov()
    }
}

/// Settings that shape an episode, independent of the scenario drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub battery: BatteryModel,
    pub reward: RewardConfig,
    pub mask: MaskLevel,
    pub observation: ObservationConfig,
    pub objective: Objective,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            battery: BatteryModel::default(),
            reward: RewardConfig::default(),
            mask: MaskLevel::Invariant,
            observation: ObservationConfig::default(),
            objective: Objective::Recharge,
        }
    }
}

/// Take-off/landing segment of a trajectory and the cells it covered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pass {
    /// Step index of the take-off action; `None` when the episode began airborne.
    pub takeoff: Option<u32>,
    /// Step index of the landing action; `None` when the episode ended airborne.
    pub landing: Option<u32>,
    pub covered: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub reward: f64,
    pub covered: usize,
    pub crash: Option<CrashReason>,
    pub solved: bool,
    pub terminated: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone)]
pub struct Env {
    world: Arc<World>,
    cfg: EnvConfig,
    scenario: Scenario,
    state: UavState,
    targets: TargetMap,
    history: PositionHistory,
    t: u32,
    done: bool,
    solved: bool,
    crash: Option<CrashReason>,
    covered_total: usize,
    passes: Vec<Pass>,
    open_pass: Option<Pass>,
    ground_covered: usize,
    obs_rng: ChaCha8Rng,
    trace: Option<Vec<TraceRecord>>,
}

impl Env {
    /// Starts an episode at `p0`. Coverage is evaluated at the position
    /// reached by each step, so cells seen from `p0` are credited on the
    /// first step (every non-move action keeps the position).
    pub fn new(world: Arc<World>, cfg: EnvConfig, scenario: Scenario, obs_seed: u64) -> Self {
        let state = UavState::new(scenario.p0, scenario.b0, scenario.l0);
        let targets = scenario.targets0.clone();
        let history = PositionHistory::new(&world.map, scenario.p0, cfg.observation.alpha);
        let open_pass = (!state.landed).then_some(Pass {
            takeoff: None,
            landing: None,
            covered: 0,
        });
        let mut env = Self {
            world,
            cfg,
            scenario,
            state,
            targets,
            history,
            t: 0,
            done: false,
            solved: false,
            crash: None,
            covered_total: 0,
            passes: Vec::new(),
            ground_covered: 0,
            open_pass,
            obs_rng: ChaCha8Rng::seed_from_u64(obs_seed),
            trace: None,
        };
        env.check_done();
        env
    }

    /// Records a trace from this point on; the first record is the initial
    /// state and carries the map and target layout.
    pub fn with_trace(mut self) -> Self {
        let mut first = self.record(None, None);
        first.map = Some(self.world.map.body_rows());
        first.targets = Some(self.scenario.targets0.cells(&self.world.map).collect());
        first.fov = Some(self.world.fov());
        first.b_max = Some(self.cfg.battery.b_max);
        self.trace = Some(vec![first]);
        self
    }

    /// Draws a scenario from `source` with a rng seeded by `seed`. The same
    /// seed always gives the same episode, observation noise included.
    pub fn from_source(source: &dyn ScenarioSource, cfg: EnvConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (world, s) = source.sample(&mut rng)?;
        Ok(Self::new(world, cfg, s, crate::par::derive_seed(seed, 1)))
    }

    /// Starts over on the same world with a new scenario and returns the
    /// first observation. Tracing stays on if it was on.
    pub fn reset(&mut self, scenario: Scenario, obs_seed: u64) -> Observation {
        let mut env = Env::new(self.world.clone(), self.cfg, scenario, obs_seed);
        if self.trace.is_some() {
            env = env.with_trace();
        }
        *self = env;
        self.observe()
    }

    fn record(&self, action: Option<Action>, res: Option<&StepResult>) -> TraceRecord {
        TraceRecord {
            t: self.t,
            p: self.state.position,
            b: self.state.battery,
            l: self.state.landed,
            action,
            remaining: self.targets.len(),
            reward: res.map(|r| r.reward),
            terminated: res.map(|r| r.terminated),
            truncated: res.map(|r| r.truncated),
            map: None,
            targets: None,
            fov: None,
            b_max: None,
        }
    }

    pub fn world(&self) -> &Arc<World> {
        &self.world
    }

    pub fn map(&self) -> &GridMap {
        &self.world.map
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn state(&self) -> &UavState {
        &self.state
    }

    pub fn targets(&self) -> &TargetMap {
        &self.targets
    }

    pub fn history(&self) -> &PositionHistory {
        &self.history
    }

    pub fn t(&self) -> u32 {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_solved(&self) -> bool {
        self.solved
    }

    pub fn crash(&self) -> Option<CrashReason> {
        self.crash
    }

    /// Undiscounted return so far, computed from event counts rather than
    /// by summing step rewards, so `r_c * covered - r_m * t` holds exactly.
    pub fn episode_return(&self) -> f64 {
        let r = &self.cfg.reward;
        let crash = if self.crash.is_some() { r.r_s } else { 0.0 };
        r.r_c * self.covered_total as f64 - r.r_m * self.t as f64 - crash
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.trace.as_deref()
    }

    pub fn take_trace(&mut self) -> Option<Vec<TraceRecord>> {
        self.trace.take()
    }

    pub fn mask(&self) -> ActionMask {
        self.mask_at(self.cfg.mask)
    }

    pub fn mask_at(&self, level: MaskLevel) -> ActionMask {
        mask(
            &self.world.map,
            &self.world.dfield,
            &self.state,
            level,
            self.cfg.battery.b_max,
        )
    }

    /// Builds the observation for the current state. Draws fresh noise in
    /// random-layer mode.
    pub fn observe(&mut self) -> Observation {
        let layer = history_layer(self.cfg.observation.history, &self.history, &mut self.obs_rng);
        build_observation(
            &self.world.map,
            &self.targets,
            &layer,
            &self.state,
            self.cfg.battery.b_max,
            &self.cfg.observation,
        )
    }

    fn check_done(&mut self) {
        let terminal = match self.cfg.objective {
            Objective::Recharge => self.state.landed && self.targets.is_empty(),
            Objective::NoRecharge => self.state.landed,
        };
        if terminal {
            self.done = true;
            self.solved = self.targets.is_empty();
        }
    }

    /// Applies `action` without consulting the mask; constraint violations
    /// end the episode as a crash.
    pub fn step(&mut self, action: Action) -> StepResult {
        assert!(!self.done, "step called on a finished episode");
        let prev = self.targets.len();
        let outcome = step(&self.world.map, &self.state, action, self.cfg.battery);
        self.state = outcome.next;
        let step_index = self.t;
        self.t += 1;

        let covered = if outcome.crashed() {
            0
        } else {
            self.targets
                .cover(&self.world.fov_table, self.world.map.index(self.state.position))
        };
        self.history.update(self.state.position);

        match action {
            Action::TakeOff if !outcome.crashed() => {
                self.open_pass = Some(Pass {
                    takeoff: Some(step_index),
                    landing: None,
                    covered: std::mem::take(&mut self.ground_covered) + covered,
                });
            }
            Action::Land if !outcome.crashed() => {
                if let Some(mut pass) = self.open_pass.take() {
                    pass.landing = Some(step_index);
                    pass.covered += covered;
                    self.passes.push(pass);
                }
            }
            _ => match self.open_pass.as_mut() {
                Some(pass) => pass.covered += covered,
                None => self.ground_covered += covered,
            },
        }

        let r = reward(prev, self.targets.len(), outcome.crashed(), &self.cfg.reward);
        self.covered_total += covered;
        self.crash = outcome.crash;
        if outcome.crashed() {
            self.done = true;
        } else {
            self.check_done();
        }
        let truncated = !self.done && self.t >= self.scenario.timeout;
        if truncated {
            self.done = true;
        }
        let res = StepResult {
            reward: r,
            covered,
            crash: outcome.crash,
            solved: self.solved,
            terminated: self.done && !truncated,
            truncated,
        };
        if self.trace.is_some() {
            let rec = self.record(Some(action), Some(&res));
            self.trace.get_or_insert_default().push(rec);
        }
        res
    }

    /// Pass decomposition so far, including any open segment.
    pub fn passes(&self) -> Vec<Pass> {
        let mut out = self.passes.clone();
        if let Some(p) = self.open_pass {
            out.push(p);
        }
        if self.ground_covered > 0 {
            out.push(Pass {
                takeoff: None,
                landing: None,
                covered: self.ground_covered,
            });
        }
        out
    }

    pub fn coverage_ratio(&self) -> f64 {
        match self.targets.total0() {
            0 => 1.0,
            n => 1.0 - self.targets.len() as f64 / n as f64,
        }
    }
}

/// Where training and evaluation episodes come from.
pub trait ScenarioSource: Send + Sync {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(Arc<World>, Scenario)>;
}

/// Random target patches on a map drawn uniformly per episode.
#[derive(Debug, Clone)]
pub struct GeneratedScenarios {
    pub worlds: Vec<Arc<World>>,
    pub generator: GeneratorConfig,
    pub b_max: u32,
    pub beta: f64,
}

impl ScenarioSource for GeneratedScenarios {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(Arc<World>, Scenario)> {
        if self.worlds.is_empty() {
            return Err(Error::Config("no maps to sample from".into()));
        }
        let world = self.worlds[rng.random_range(0..self.worlds.len())].clone();
        let s = generate_scenario_with(world.map.clone(), rng, &self.generator, self.b_max, self.beta)?;
        Ok((world, s))
    }
}

/// A fixed target set; spawn cell and initial battery are drawn per episode.
#[derive(Debug, Clone)]
pub struct FixedTargets {
    pub world: Arc<World>,
    pub targets: Vec<Cell>,
    pub b_max: u32,
    pub beta: f64,
    pub objective: Objective,
    pub timeout: Option<u32>,
}

impl ScenarioSource for FixedTargets {
    fn sample(&self, rng: &mut ChaCha8Rng) -> Result<(Arc<World>, Scenario)> {
        let map = self.world.map.clone();
        let landing = map.landing_cells();
        if landing.is_empty() {
            return Err(Error::InvalidMap("map has no landing cells".into()));
        }
        let p0 = landing[rng.random_range(0..landing.len())];
        let b0 = rng.random_range(min_initial_battery(self.b_max, self.beta)..=self.b_max);
        let s = Scenario {
            targets0: TargetMap::from_cells(&map, &self.targets)?,
            p0,
            b0,
            l0: self.objective == Objective::Recharge,
            timeout: self.timeout.unwrap_or_else(|| default_timeout(map.size())),
            map,
        };
        Ok((self.world.clone(), s))
    }
}
