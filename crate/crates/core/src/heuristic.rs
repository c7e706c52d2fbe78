//! Greedy model-based baseline planner.
//!
//! Each call produces a short open-loop plan:
//!
//! 1. landed: charge to full, then take off;
//! 2. nothing left to cover: fly to the nearest landing cell and land;
//! 3. otherwise find the cells of interest (non-NFZ cells that see at least
//!    one remaining target) and keep those from which a landing cell is
//!    still reachable on the current battery; fly to the nearest one;
//! 4. if none are reachable, fly to the reachable landing cell closest to
//!    any cell of interest and land there to recharge.
//!
//! All argmins break ties by row-major cell index.

use std::collections::VecDeque;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::{FovTable, Scenario, TargetMap};
use crate::dynamics::{Action, BatteryModel, UavState};
use crate::env::{Env, EnvConfig, World};
use crate::error::{Error, Result};
use crate::eval::{rollout, Actor, Rollout};
use crate::grid::{bfs, Cell, DistanceField, GridMap, UNREACHABLE};
use crate::safety::ActionMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intent {
    RechargeTakeoff,
    GotoAndLand,
    GotoCover,
    FinishLand,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Plan {
    pub actions: Vec<Action>,
    pub intent: Intent,
    /// Cell the plan ends at.
    pub goal: Cell,
}

fn moves_along(cells: &[Cell]) -> Vec<Action> {
    cells
        .windows(2)
        .map(|w| {
            let d = (w[1].x - w[0].x, w[1].y - w[0].y);
            Action::ALL[..4]
                .iter()
                .copied()
                .find(|a| a.motion() == d)
                .expect("consecutive path cells are 4-adjacent")
        })
        .collect()
}

fn argmin_index(values: impl Iterator<Item = (usize, u32)>) -> Option<usize> {
    values
        .filter(|&(_, v)| v != UNREACHABLE)
        .min_by_key(|&(i, v)| (v, i))
        .map(|(i, _)| i)
}

/// Cells of interest: not no-fly, and some remaining target is visible.
pub fn interest_cells(map: &GridMap, table: &FovTable, targets: &TargetMap) -> Vec<bool> {
    let mut interest = vec![false; map.n_cells()];
    // Visibility is symmetric: the cells that see x are the cells x sees.
    for x in targets.indices() {
        for &p in table.visible_from(x) {
            interest[p as usize] = true;
        }
    }
    for (i, flag) in interest.iter_mut().enumerate() {
        if map.nfz_layer()[i] {
            *flag = false;
        }
    }
    interest
}

/// Plans from `state`. Targets already visible from the current cell are
/// treated as covered.
pub fn plan(
    map: &GridMap,
    dfield: &DistanceField,
    state: &UavState,
    targets: &TargetMap,
    table: &FovTable,
    battery: BatteryModel,
) -> Result<Plan> {
    let p = state.position;
    if state.landed {
        let missing = battery.b_max.saturating_sub(state.battery);
        let charges = missing.div_ceil(battery.b_c.max(1));
        let mut actions = vec![Action::Charge; charges as usize];
        actions.push(Action::TakeOff);
        return Ok(Plan {
            actions,
            intent: Intent::RechargeTakeoff,
            goal: p,
        });
    }

    let mut remaining = targets.clone();
    remaining.cover(table, map.index(p));
    let from_p = bfs(map, p);
    let dist_p = from_p.distances();

    let go_land = |goal_index: usize, intent: Intent| {
        let goal = map.cell(goal_index);
        let path = from_p.path_to(goal).expect("goal reachable");
        let mut actions = moves_along(&path);
        actions.push(Action::Land);
        Plan {
            actions,
            intent,
            goal,
        }
    };

    if remaining.is_empty() {
        let x = argmin_index(
            (0..map.n_cells())
                .filter(|&i| map.landing_layer()[i])
                .map(|i| (i, dist_p[i])),
        )
        .ok_or_else(|| Error::Planner(format!("no landing cell reachable from {p}")))?;
        return Ok(go_land(x, Intent::FinishLand));
    }

    let interest = interest_cells(map, table, &remaining);
    let b = state.battery;
    let reachable = (0..map.n_cells()).filter(|&i| {
        interest[i]
            && dist_p[i] != UNREACHABLE
            && dfield.raw()[i] != UNREACHABLE
            && dfield.raw()[i] + dist_p[i] < b
    });
    if let Some(y) = argmin_index(reachable.map(|i| (i, dist_p[i]))) {
        let goal = map.cell(y);
        let path = from_p.path_to(goal).expect("goal reachable");
        return Ok(Plan {
            actions: moves_along(&path),
            intent: Intent::GotoCover,
            goal,
        });
    }

    // Distance from every cell to its nearest cell of interest.
    let to_interest = multi_source_bfs(map, &interest);
    let x = argmin_index(
        (0..map.n_cells())
            .filter(|&i| map.landing_layer()[i] && dist_p[i] != UNREACHABLE && dist_p[i] < b)
            .map(|i| (i, to_interest[i])),
    )
    .ok_or_else(|| {
        Error::Planner(format!(
            "no reachable landing cell leads towards a cell of interest from {p} with b = {b}"
        ))
    })?;
    Ok(go_land(x, Intent::GotoAndLand))
}

fn multi_source_bfs(map: &GridMap, sources: &[bool]) -> Vec<u32> {
    let mut d = vec![UNREACHABLE; map.n_cells()];
    let mut queue = VecDeque::new();
    for (i, &s) in sources.iter().enumerate() {
        if s {
            d[i] = 0;
            queue.push_back(map.cell(i));
        }
    }
    while let Some(c) = queue.pop_front() {
        let next = d[map.index(c)] + 1;
        for n in map.flyable_neighbours(c) {
            let j = map.index(n);
            if d[j] == UNREACHABLE {
                d[j] = next;
                queue.push_back(n);
            }
        }
    }
    d
}

/// Closed-loop executor: replans whenever the current plan runs out.
#[derive(Debug, Default, Clone)]
pub struct HeuristicActor {
    queue: VecDeque<Action>,
    pub plans: Vec<Intent>,
}

impl Actor for HeuristicActor {
    fn reset(&mut self) {
        self.queue.clear();
        self.plans.clear();
    }

    fn act(&mut self, env: &Env, _mask: &ActionMask, _rng: &mut ChaCha8Rng) -> Result<Action> {
        if self.queue.is_empty() {
            let world = env.world();
            let p = plan(
                &world.map,
                &world.dfield,
                env.state(),
                env.targets(),
                &world.fov_table,
                env.config().battery,
            )?;
            self.plans.push(p.intent);
            self.queue.extend(p.actions);
        }
        self.queue
            .pop_front()
            .ok_or_else(|| Error::Planner("empty plan".into()))
    }
}

/// Runs the heuristic on one scenario until solved or timed out.
pub fn run_heuristic(
    world: Arc<World>,
    scenario: Scenario,
    cfg: EnvConfig,
    record_trace: bool,
) -> Result<Rollout> {
    let mut actor = HeuristicActor::default();
    rollout(world, scenario, cfg, &mut actor, 0, record_trace)
}
