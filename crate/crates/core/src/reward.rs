//! Step reward and discount-factor scheduling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Reward per newly covered cell.
    pub r_c: f64,
    /// Penalty per step.
    pub r_m: f64,
    /// Crash penalty. Only reachable below the invariant mask level.
    pub r_s: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            r_c: 0.01,
            r_m: 0.02,
            r_s: 5.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.r_c, self.r_m, self.r_s]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config("rewards must be finite and >= 0".into()));
        }
        Ok(())
    }
}

pub fn reward(prev_count: usize, next_count: usize, crashed: bool, cfg: &RewardConfig) -> f64 {
    debug_assert!(next_count <= prev_count);
    let r = cfg.r_c * (prev_count - next_count) as f64 - cfg.r_m;
    if crashed {
        r - cfg.r_s
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DiscountSchedule {
    Constant { gamma: f64 },
    /// `1 - (1 - gamma0) * gamma_r^(s / gamma_s)`
    Scheduled {
        gamma0: f64,
        gamma_r: f64,
        gamma_s: f64,
    },
}

impl Default for DiscountSchedule {
    fn default() -> Self {
        DiscountSchedule::Scheduled {
            gamma0: 0.99,
            gamma_r: 0.1,
            gamma_s: 2e7,
        }
    }
}

impl DiscountSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DiscountSchedule::Constant { gamma } => gamma > 0.0 && gamma <= 1.0,
            DiscountSchedule::Scheduled {
                gamma0,
                gamma_r,
                gamma_s,
            } => gamma0 > 0.0 && gamma0 <= 1.0 && gamma_r > 0.0 && gamma_r < 1.0 && gamma_s > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid discount schedule {self:?}")))
        }
    }
}

/// Discount factor after `s` interaction steps.
pub fn discount(s: u64, sched: &DiscountSchedule) -> f64 {
    match *sched {
        DiscountSchedule::Constant { gamma } => gamma,
        DiscountSchedule::Scheduled {
            gamma0,
            gamma_r,
            gamma_s,
        } => 1.0 - (1.0 - gamma0) * gamma_r.powf(s as f64 / gamma_s),
    }
}
