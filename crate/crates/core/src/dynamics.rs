//! Agent state, the seven-action space and the deterministic transition.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::grid::{Cell, GridMap};

pub const N_ACTIONS: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    East,
    North,
    West,
    South,
    TakeOff,
    Land,
    Charge,
}

impl Action {
    pub const ALL: [Action; N_ACTIONS] = [
        Action::East,
        Action::North,
        Action::West,
        Action::South,
        Action::TakeOff,
        Action::Land,
        Action::Charge,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn is_move(self) -> bool {
        self.index() < 4
    }

    /// Position offset of the action.
    pub fn motion(self) -> (i32, i32) {
        match self {
            Action::East => (1, 0),
            Action::North => (0, 1),
            Action::West => (-1, 0),
            Action::South => (0, -1),
            Action::TakeOff | Action::Land | Action::Charge => (0, 0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::East => "east",
            Action::North => "north",
            Action::West => "west",
            Action::South => "south",
            Action::TakeOff => "take_off",
            Action::Land => "land",
            Action::Charge => "charge",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Action::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .or_else(|| s.parse::<usize>().ok().and_then(Action::from_index))
            .ok_or_else(|| format!("unknown action `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UavState {
    pub position: Cell,
    /// Remaining flight steps.
    pub battery: u32,
    pub landed: bool,
}

impl UavState {
    pub fn new(position: Cell, battery: u32, landed: bool) -> Self {
        Self {
            position,
            battery,
            landed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashReason {
    NfzEntry,
    BatteryEmpty,
    InvalidAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub next: UavState,
    pub crash: Option<CrashReason>,
}

impl StepOutcome {
    pub fn crashed(&self) -> bool {
        self.crash.is_some()
    }
}

/// Battery and map constants shared by every transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryModel {
    pub b_max: u32,
    /// Charge added per `charge` action.
    pub b_c: u32,
}

impl Default for BatteryModel {
    fn default() -> Self {
        Self { b_max: 100, b_c: 2 }
    }
}

/// Action constraint: take off only when landed, charge only when landed
/// and not full, move only when flying, land only when flying over a
/// landing cell.
pub fn is_action_valid(state: &UavState, action: Action, map: &GridMap, b_max: u32) -> bool {
    match action {
        Action::TakeOff => state.landed,
        Action::Charge => state.landed && state.battery < b_max,
        Action::Land => !state.landed && map.is_landing(state.position),
        _ => !state.landed,
    }
}

/// Applies `action` unconditionally and reports constraint violations as a
/// crash. Moves off the map count as no-fly entries and leave the position
/// unchanged.
pub fn step(map: &GridMap, state: &UavState, action: Action, battery: BatteryModel) -> StepOutcome {
    let valid = is_action_valid(state, action, map, battery.b_max);

    let (dx, dy) = action.motion();
    let target = state.position.offset(dx, dy);
    let position = if map.contains(target) {
        target
    } else {
        state.position
    };

    let landed = match action {
        Action::Land => true,
        Action::TakeOff => false,
        _ => state.landed,
    };

    let (battery_next, drained) = match action {
        Action::Charge => ((state.battery + battery.b_c).min(battery.b_max), false),
        _ => match state.battery.checked_sub(1) {
            Some(b) => (b, false),
            None => (0, true),
        },
    };

    let crash = if !valid {
        Some(CrashReason::InvalidAction)
    } else if map.is_nfz(target) {
        Some(CrashReason::NfzEntry)
    } else if (battery_next == 0 && !landed) || drained {
        Some(CrashReason::BatteryEmpty)
    } else {
        None
    };

    StepOutcome {
        next: UavState {
            position,
            battery: battery_next,
            landed,
        },
        crash,
    }
}
