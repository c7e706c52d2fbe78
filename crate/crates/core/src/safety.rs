//! Action masks: valid, immediate and invariant, plus `none` for ablations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dynamics::{is_action_valid, Action, UavState, N_ACTIONS};
use crate::grid::{DistanceField, GridMap};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum MaskLevel {
    None,
    Valid,
    Immediate,
    #[default]
    Invariant,
}

impl MaskLevel {
    pub const ALL: [MaskLevel; 4] = [
        MaskLevel::None,
        MaskLevel::Valid,
        MaskLevel::Immediate,
        MaskLevel::Invariant,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MaskLevel::None => "none",
            MaskLevel::Valid => "valid",
            MaskLevel::Immediate => "immediate",
            MaskLevel::Invariant => "invariant",
        }
    }
}

impl fmt::Display for MaskLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        MaskLevel::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| format!("unknown mask level `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMask {
    pub allowed: [bool; N_ACTIONS],
    pub level: MaskLevel,
}

impl ActionMask {
    pub fn all(level: MaskLevel) -> Self {
        Self {
            allowed: [true; N_ACTIONS],
            level,
        }
    }

    pub fn allows(&self, a: Action) -> bool {
        self.allowed[a.index()]
    }

    pub fn is_empty(&self) -> bool {
        !self.allowed.iter().any(|&a| a)
    }

    pub fn count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    pub fn actions(&self) -> impl Iterator<Item = Action> + '_ {
        Action::ALL.into_iter().filter(|a| self.allows(*a))
    }

    /// `self` allows nothing that `other` forbids.
    pub fn is_subset_of(&self, other: &ActionMask) -> bool {
        self.allowed
            .iter()
            .zip(other.allowed)
            .all(|(&a, b)| !a || b)
    }
}

/// Computes the allowed action set at `level`.
///
/// The invariant level keeps an action only when its successor cell is at
/// most `b - 1` steps (landing included) from a landing cell. `charge` and
/// `land` are exempt from that test: charging strictly raises the battery
/// and a landed successor can always recharge, so applying the test to them
/// would only create dead states (a landed agent with `b <= 1`).
pub fn mask(
    map: &GridMap,
    dfield: &DistanceField,
    state: &UavState,
    level: MaskLevel,
    b_max: u32,
) -> ActionMask {
    let mut out = ActionMask::all(level);
    if level == MaskLevel::None {
        return out;
    }
    for a in Action::ALL {
        let (dx, dy) = a.motion();
        let next = state.position.offset(dx, dy);
        let allowed = is_action_valid(state, a, map, b_max)
            && (level < MaskLevel::Immediate || !map.is_nfz(next))
            && (level < MaskLevel::Invariant
                || matches!(a, Action::Charge | Action::Land)
                || dfield
                    .get(next)
                    .is_some_and(|d| d < state.battery));
        out.allowed[a.index()] = allowed;
    }
    out
}
