//! Episode rollouts, batch evaluation and baseline actors.

use std::io::Write;
use std::sync::Arc;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coverage::Scenario;
use crate::dynamics::{Action, CrashReason};
use crate::env::{Env, EnvConfig, Pass, World};
use crate::error::{Error, Result};
use crate::observation::Observation;
use crate::par::{derive_seed, map_range, Execution};
use crate::safety::ActionMask;
use crate::trace::TraceRecord;

/// Anything that picks actions in a running episode.
pub trait Actor {
    fn reset(&mut self) {}
    fn act(&mut self, env: &Env, mask: &ActionMask, rng: &mut ChaCha8Rng) -> Result<Action>;
}

/// Uniform over the allowed actions.
#[derive(Debug, Default, Clone, Copy)]
pub struct RandomActor;

impl Actor for RandomActor {
    fn act(&mut self, _env: &Env, mask: &ActionMask, rng: &mut ChaCha8Rng) -> Result<Action> {
        mask.actions().choose(rng).ok_or(Error::EmptyMask)
    }
}

/// Stays on the ground charging; airborne it lands as soon as it can.
#[derive(Debug, Default, Clone, Copy)]
pub struct GroundedActor;

impl Actor for GroundedActor {
    fn act(&mut self, env: &Env, mask: &ActionMask, _rng: &mut ChaCha8Rng) -> Result<Action> {
        for a in [Action::Charge, Action::Land] {
            if mask.allows(a) {
                return Ok(a);
            }
        }
        let _ = env;
        mask.actions().next().ok_or(Error::EmptyMask)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: u32,
    pub solved: bool,
    pub crashed: bool,
    pub crash_reason: Option<CrashReason>,
    pub truncated: bool,
    /// The actor gave up (planner failure).
    pub aborted: bool,
    pub coverage_ratio: f64,
    pub n_passes: usize,
    #[serde(rename = "return")]
    pub ret: f64,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub stats: EpisodeStats,
    pub actions: Vec<Action>,
    pub passes: Vec<Pass>,
    pub trace: Option<Vec<TraceRecord>>,
}

fn finish(mut env: Env, actions: Vec<Action>, truncated: bool, aborted: bool) -> Rollout {
    let passes = env.passes();
    let stats = EpisodeStats {
        steps: env.t(),
        solved: env.is_solved(),
        crashed: env.crash().is_some(),
        crash_reason: env.crash(),
        truncated,
        aborted,
        coverage_ratio: env.coverage_ratio(),
        n_passes: passes.iter().filter(|p| p.takeoff.is_some() || p.landing.is_some()).count(),
        ret: env.episode_return(),
    };
    Rollout {
        stats,
        actions,
        passes,
        trace: env.take_trace(),
    }
}

/// Runs one episode to completion. Every chosen action is checked against
/// the configured mask; a violation is an error, not a crash.
pub fn rollout<A: Actor + ?Sized>(
    world: Arc<World>,
    scenario: Scenario,
    cfg: EnvConfig,
    actor: &mut A,
    seed: u64,
    record_trace: bool,
) -> Result<Rollout> {
    let mut env = Env::new(world, cfg, scenario, derive_seed(seed, 1));
    if record_trace {
        env = env.with_trace();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    actor.reset();
    let mut actions = Vec::new();
    let mut aborted = false;
    let mut truncated = false;
    while !env.is_done() {
        let mask = env.mask();
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        let a = match actor.act(&env, &mask, &mut rng) {
            Ok(a) => a,
            Err(Error::Planner(msg)) => {
                log::debug!("episode aborted at t = {}: {msg}", env.t());
                aborted = true;
                break;
            }
            Err(e) => return Err(e),
        };
        if !mask.allows(a) {
            return Err(Error::MaskViolation {
                action: a.name(),
                step: env.t() as u64,
            });
        }
        actions.push(a);
        truncated = env.step(a).truncated;
    }
    Ok(finish(env, actions, truncated, aborted))
}

/// Plays a fixed action script under the configured mask and hands every
/// observation, the initial one included, to `on_obs`. Stops early once the
/// episode ends; a masked action is an error.
pub fn replay(
    world: Arc<World>,
    scenario: Scenario,
    cfg: EnvConfig,
    script: &[Action],
    obs_seed: u64,
    mut on_obs: impl FnMut(&Observation) -> Result<()>,
) -> Result<Rollout> {
    let mut env = Env::new(world, cfg, scenario, obs_seed).with_trace();
    on_obs(&env.observe())?;
    let mut actions = Vec::new();
    let mut truncated = false;
    for &a in script {
        if env.is_done() {
            break;
        }
        if !env.mask().allows(a) {
            return Err(Error::MaskViolation {
                action: a.name(),
                step: env.t() as u64,
            });
        }
        actions.push(a);
        truncated = env.step(a).truncated;
        on_obs(&env.observe())?;
    }
    Ok(finish(env, actions, truncated, false))
}

/// Relative percentage deviation of `steps` from `reference`, as a fraction.
pub fn rpd(steps: u32, reference: u32) -> f64 {
    (steps as f64 - reference as f64) / reference as f64
}

/// Runs every scenario once with a fresh actor. Episode `i` uses a seed
/// derived from `(seed, i)`, so two actors evaluated with the same seed see
/// paired randomness.
pub fn batch_eval<A, F>(
    scenarios: &[(Arc<World>, Scenario)],
    cfg: EnvConfig,
    make_actor: F,
    seed: u64,
    exec: Execution,
) -> Result<Vec<EpisodeStats>>
where
    A: Actor,
    F: Fn() -> A + Sync + Send,
{
    map_range(exec, scenarios.len(), |i| {
        let (w, s) = &scenarios[i];
        let mut actor = make_actor();
        rollout(w.clone(), s.clone(), cfg, &mut actor, derive_seed(seed, i as u64), false)
            .map(|r| r.stats)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub episodes: usize,
    pub solved_rate: f64,
    pub crash_rate: f64,
    pub aborted: usize,
    pub mean_steps: f64,
    pub std_steps: f64,
    pub mean_coverage: f64,
    pub mean_return: f64,
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

pub fn summarize(stats: &[EpisodeStats]) -> Summary {
    let n = stats.len().max(1) as f64;
    let (mean_steps, std_steps) = mean_std(stats.iter().map(|s| s.steps as f64));
    Summary {
        episodes: stats.len(),
        solved_rate: stats.iter().filter(|s| s.solved).count() as f64 / n,
        crash_rate: stats.iter().filter(|s| s.crashed).count() as f64 / n,
        aborted: stats.iter().filter(|s| s.aborted).count(),
        mean_steps,
        std_steps,
        mean_coverage: stats.iter().map(|s| s.coverage_ratio).sum::<f64>() / n,
        mean_return: stats.iter().map(|s| s.ret).sum::<f64>() / n,
    }
}

/// Step-count deviation over the episodes both actors solved.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RpdSummary {
    pub joint: usize,
    pub mean: f64,
    pub std: f64,
}

pub fn paired_rpd(candidate: &[EpisodeStats], reference: &[EpisodeStats]) -> RpdSummary {
    assert_eq!(candidate.len(), reference.len(), "unpaired evaluation");
    let vals: Vec<f64> = candidate
        .iter()
        .zip(reference)
        .filter(|(c, r)| c.solved && r.solved && r.steps > 0)
        .map(|(c, r)| rpd(c.steps, r.steps))
        .collect();
    let (mean, std) = mean_std(vals.iter().copied());
    RpdSummary {
        joint: vals.len(),
        mean,
        std,
    }
}

#[derive(Debug, Serialize)]
struct Row<'a> {
    episode: usize,
    actor: &'a str,
    steps: u32,
    solved: bool,
    crashed: bool,
    crash_reason: Option<CrashReason>,
    truncated: bool,
    aborted: bool,
    coverage_ratio: f64,
    n_passes: usize,
    #[serde(rename = "return")]
    ret: f64,
}

/// One CSV row per episode and actor, under a single header.
pub fn write_csv<W: Write>(w: W, runs: &[(&str, &[EpisodeStats])]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for &(actor, stats) in runs {
        for (episode, s) in stats.iter().enumerate() {
            out.serialize(Row {
                episode,
                actor,
                steps: s.steps,
                solved: s.solved,
                crashed: s.crashed,
                crash_reason: s.crash_reason,
                truncated: s.truncated,
                aborted: s.aborted,
                coverage_ratio: s.coverage_ratio,
                n_passes: s.n_passes,
                ret: s.ret,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::{FovConfig, TargetMap};
    use crate::grid::{parse_map, Cell};
    use crate::safety::MaskLevel;

    fn setup() -> (Arc<World>, Scenario) {
        let map = Arc::new(
            parse_map("cpp-map v1\nsize 4\nL...\n....\n....\n....\n").unwrap(),
        );
        let w = Arc::new(World::new("t", map.clone(), FovConfig::default()));
        let s = Scenario {
            targets0: TargetMap::from_cells(&map, &[Cell::new(3, 3)]).unwrap(),
            map,
            p0: Cell::new(0, 0),
            b0: 30,
            l0: true,
            timeout: 40,
        };
        (w, s)
    }

    #[test]
    fn replay_enforces_mask_and_stops_at_the_end() {
        let (w, s) = setup();
        let cfg = EnvConfig {
            observation: crate::observation::ObservationConfig {
                l: 3,
                ..Default::default()
            },
            ..Default::default()
        };
        let err = replay(w.clone(), s.clone(), cfg, &[Action::East], 0, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::MaskViolation { action: "east", step: 0 }));

        let mut script = vec![Action::TakeOff];
        script.extend([Action::North; 3]);
        script.extend([Action::East, Action::West]);
        script.extend([Action::South; 3]);
        script.extend([Action::Land, Action::Charge, Action::Charge]);
        let mut n_obs = 0;
        let r = replay(w, s, cfg, &script, 0, |_| {
            n_obs += 1;
            Ok(())
        })
        .unwrap();
        assert!(r.stats.solved);
        assert_eq!(r.actions.len(), 10);
        assert_eq!(n_obs, 11);
        assert_eq!(r.trace.unwrap().len(), 11);
    }

    #[test]
    fn rpd_example() {
        assert!((rpd(166, 266) + 0.375_939_85).abs() < 1e-6);
        assert_eq!(rpd(10, 10), 0.0);
    }

    #[test]
    fn random_actor_never_crashes_under_invariant_mask() {
        let (w, s) = setup();
        for seed in 0..50 {
            let r = rollout(w.clone(), s.clone(), EnvConfig::default(), &mut RandomActor, seed, false).unwrap();
            assert!(!r.stats.crashed);
            assert_eq!(r.stats.steps as usize, r.actions.len());
        }
    }

    #[test]
    fn grounded_actor_times_out() {
        let (w, mut s) = setup();
        s.targets0 = TargetMap::from_cells(&w.map, &[Cell::new(3, 3)]).unwrap();
        s.b0 = 30;
        // Half-width 2 from the landing cell does not reach (3, 3).
        let r = rollout(w, s, EnvConfig::default(), &mut GroundedActor, 0, false).unwrap();
        assert!(r.stats.truncated && !r.stats.solved);
        assert_eq!(r.stats.steps, 40);
    }

    #[test]
    fn mask_violation_is_an_error() {
        struct Bad;
        impl Actor for Bad {
            fn act(&mut self, _: &Env, _: &ActionMask, _: &mut ChaCha8Rng) -> Result<Action> {
                Ok(Action::East)
            }
        }
        let (w, s) = setup();
        let err = rollout(w, s, EnvConfig::default(), &mut Bad, 0, false).unwrap_err();
        assert!(matches!(err, Error::MaskViolation { action: "east", step: 0 }));
    }

    #[test]
    fn batch_is_deterministic_and_paired() {
        let (w, s) = setup();
        let scen: Vec<_> = (0..16).map(|_| (w.clone(), s.clone())).collect();
        let cfg = EnvConfig {
            mask: MaskLevel::Invariant,
            ..Default::default()
        };
        let a = batch_eval(&scen, cfg, || RandomActor, 9, Execution::Parallel).unwrap();
        let b = batch_eval(&scen, cfg, || RandomActor, 9, Execution::Sequential).unwrap();
        assert_eq!(a, b);
        let r = paired_rpd(&a, &b);
        assert!(r.joint == a.iter().filter(|s| s.solved).count());
        if r.joint > 0 {
            assert_eq!(r.mean, 0.0);
        }
        let mut buf = Vec::new();
        write_csv(&mut buf, &[("random", &a), ("again", &b)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("episode,actor,steps,solved,crashed,crash_reason,truncated,aborted,coverage_ratio,n_passes,return"));
        assert_eq!(text.lines().count(), 33);
    }
}
