//! Batched on-policy training loop with data-parallel experience collection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gae::{compute_advantages, normalize};
use super::policy::{masked_distribution, sample_action, PolicyModel};
use super::ppo::{loss_and_grad, PpoParams, Sample};
use crate::dynamics::Action;
use crate::env::{Env, EnvConfig, ScenarioSource};
use crate::error::{Error, Result};
use crate::par::{derive_seed, for_each_mut, Execution};
use crate::reward::{discount, DiscountSchedule};
use crate::safety::ActionMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub workers: usize,
    /// Transitions each worker collects per iteration.
    pub steps_per_worker: usize,
    pub epochs: usize,
    pub minibatches: usize,
    pub lr_pi: f64,
    pub lr_v: f64,
    pub lambda: f64,
    pub ppo: PpoParams,
    pub discount: DiscountSchedule,
    pub normalize_advantages: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            workers: 8,
            steps_per_worker: 256,
            epochs: 4,
            minibatches: 4,
            lr_pi: 0.5,
            lr_v: 0.5,
            lambda: 0.8,
            ppo: PpoParams::default(),
            discount: DiscountSchedule::default(),
            normalize_advantages: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.iterations == 0 || self.workers == 0 || self.steps_per_worker == 0 {
            return bad("iterations, workers and steps_per_worker must be positive");
        }
        if self.epochs == 0 || self.minibatches == 0 {
            return bad("epochs and minibatches must be positive");
        }
        if !(self.lr_pi > 0.0 && self.lr_v > 0.0 && self.lr_pi.is_finite() && self.lr_v.is_finite()) {
            return bad("learning rates must be positive and finite");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if !(self.ppo.clip > 0.0 && self.ppo.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if self.ppo.value_coef < 0.0 || self.ppo.entropy_coef < 0.0 {
            return bad("loss coefficients must be >= 0");
        }
        self.discount.validate()
    }
}

/// One row of the learning curve.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    /// Interaction steps so far.
    pub step: u64,
    pub gamma: f64,
    /// Episodes finished during this iteration; the ratios below average
    /// over them.
    pub episodes: usize,
    pub coverage_ratio: f64,
    pub crash_ratio: f64,
    pub solved_ratio: f64,
    pub episode_steps: f64,
    pub mean_return: f64,
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinishedEpisode {
    pub ret: f64,
    pub steps: u32,
    pub solved: bool,
    pub crashed: bool,
    pub coverage_ratio: f64,
}

struct Segment<I> {
    inputs: Vec<I>,
    masks: Vec<ActionMask>,
    actions: Vec<Action>,
    logps: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
}

impl<I: Clone> Segment<I> {
    fn close(&mut self, bootstrap: f64, gamma: f64, lambda: f64, out: &mut Vec<Sample<I>>) {
        if self.rewards.is_empty() {
            return;
        }
        self.values.push(bootstrap);
        let (adv, ret) = compute_advantages(&self.rewards, &self.values, gamma, lambda);
        for t in 0..self.rewards.len() {
            out.push(Sample {
                input: self.inputs[t].clone(),
                mask: self.masks[t],
                action: self.actions[t],
                logp_old: self.logps[t],
                advantage: adv[t],
                ret: ret[t],
            });
        }
        self.inputs.clear();
        self.masks.clear();
        self.actions.clear();
        self.logps.clear();
        self.values.clear();
        self.rewards.clear();
    }
}

/// Experience collector with its own environment and random stream. An
/// episode cut off by the end of a batch resumes in the next one.
pub struct Worker<M: PolicyModel> {
    env: Option<Env>,
    rng: ChaCha8Rng,
    batch: Result<Vec<Sample<M::Input>>>,
    finished: Vec<FinishedEpisode>,
}

impl<M: PolicyModel> Worker<M> {
    pub fn new(seed: u64) -> Self {
        Self {
            env: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch: Ok(Vec::new()),
            finished: Vec::new(),
        }
    }

    /// Rolls out `steps` transitions with `model` and returns them with
    /// advantages computed at discount `gamma`.
    pub fn collect(
        &mut self,
        model: &M,
        source: &dyn ScenarioSource,
        env_cfg: &EnvConfig,
        steps: usize,
        gamma: f64,
        lambda: f64,
    ) -> Result<Vec<Sample<M::Input>>> {
        let mut out = Vec::with_capacity(steps);
        let mut seg = Segment::<M::Input> {
            inputs: Vec::new(),
            masks: Vec::new(),
            actions: Vec::new(),
            logps: Vec::new(),
            values: Vec::new(),
            rewards: Vec::new(),
        };
        let mut collected = 0;
        let mut empty_episodes = 0;
        while collected < steps {
            if self.env.as_ref().is_none_or(|e| e.is_done()) {
                let (world, scenario) = source.sample(&mut self.rng)?;
                let obs_seed = self.rng.random();
                self.env = Some(Env::new(world, *env_cfg, scenario, obs_seed));
            }
            let env = self.env.as_mut().expect("environment present");
            if env.is_done() {
                // Solved before the first step; nothing to learn from.
                empty_episodes += 1;
                if empty_episodes > 1000 {
                    return Err(Error::InvalidScenario("every sampled episode is already solved".into()));
                }
                continue;
            }
            collected += 1;
            let x = model.encode(env);
            let mask = env.mask();
            let p = masked_distribution(&model.logits(&x), &mask);
            let a = sample_action(&p, &mut self.rng).ok_or(Error::EmptyMask)?;
            seg.values.push(model.value(&x));
            seg.logps.push(p[a.index()].ln());
            seg.inputs.push(x);
            seg.masks.push(mask);
            seg.actions.push(a);
            let r = env.step(a);
            seg.rewards.push(r.reward);
            if r.terminated || r.truncated {
                let boot = if r.truncated { model.value(&model.encode(env)) } else { 0.0 };
                seg.close(boot, gamma, lambda, &mut out);
                self.finished.push(FinishedEpisode {
                    ret: env.episode_return(),
                    steps: env.t(),
                    solved: env.is_solved(),
                    crashed: r.crash.is_some(),
                    coverage_ratio: env.coverage_ratio(),
                });
            }
        }
        if let Some(env) = self.env.as_ref().filter(|e| !e.is_done()) {
            let boot = model.value(&model.encode(env));
            seg.close(boot, gamma, lambda, &mut out);
        }
        Ok(out)
    }

    pub fn take_finished(&mut self) -> Vec<FinishedEpisode> {
        std::mem::take(&mut self.finished)
    }
}

pub struct TrainReport<M> {
    pub model: M,
    pub curves: Vec<CurveRow>,
    pub env_steps: u64,
}

/// Trains `model` in place of a fresh copy and returns it with the learning
/// curve. Output depends only on the seed, not on the thread count.
pub fn train<M: PolicyModel>(
    mut model: M,
    source: &dyn ScenarioSource,
    env_cfg: &EnvConfig,
    cfg: &TrainConfig,
    exec: Execution,
    mut progress: impl FnMut(&CurveRow),
) -> Result<TrainReport<M>> {
    cfg.validate()?;
    let mut workers: Vec<Worker<M>> = (0..cfg.workers)
        .map(|w| Worker::new(derive_seed(cfg.seed, w as u64)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX));
    let mut env_steps = 0u64;
    let mut curves = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let gamma = discount(env_steps, &cfg.discount);
        {
            let model = &model;
            for_each_mut(exec, &mut workers, |_, w| {
                w.batch = w.collect(model, source, env_cfg, cfg.steps_per_worker, gamma, cfg.lambda);
            });
        }
        let mut batch = Vec::with_capacity(cfg.workers * cfg.steps_per_worker);
        let mut finished = Vec::new();
        for w in &mut workers {
            batch.append(&mut std::mem::replace(&mut w.batch, Ok(Vec::new()))?);
            finished.append(&mut w.take_finished());
        }
        env_steps += batch.len() as u64;
        if cfg.normalize_advantages {
            let mut adv: Vec<f64> = batch.iter().map(|s| s.advantage).collect();
            normalize(&mut adv);
            for (s, a) in batch.iter_mut().zip(adv) {
                s.advantage = a;
            }
        }

        let mut row = CurveRow {
            iteration,
            step: env_steps,
            gamma,
            episodes: finished.len(),
            ..Default::default()
        };
        if !finished.is_empty() {
            let n = finished.len() as f64;
            row.mean_return = finished.iter().map(|e| e.ret).sum::<f64>() / n;
            row.coverage_ratio = finished.iter().map(|e| e.coverage_ratio).sum::<f64>() / n;
            row.crash_ratio = finished.iter().filter(|e| e.crashed).count() as f64 / n;
            row.solved_ratio = finished.iter().filter(|e| e.solved).count() as f64 / n;
            row.episode_steps = finished.iter().map(|e| e.steps as f64).sum::<f64>() / n;
        }

        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mb = batch.len().div_ceil(cfg.minibatches).max(1);
        let mut updates = 0usize;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(mb) {
                let minibatch: Vec<Sample<M::Input>> = chunk.iter().map(|&i| batch[i].clone()).collect();
                let (parts, grad) = loss_and_grad(&model, &minibatch, &cfg.ppo);
                if !parts.is_finite() {
                    return Err(Error::NonFiniteLoss);
                }
                model.apply(&grad, cfg.lr_pi, cfg.lr_v);
                row.loss += parts.total;
                row.policy_loss += parts.policy;
                row.value_loss += parts.value;
                row.entropy += parts.entropy;
                updates += 1;
            }
        }
        if updates > 0 {
            let u = updates as f64;
            row.loss /= u;
            row.policy_loss /= u;
            row.value_loss /= u;
            row.entropy /= u;
        }
        log::info!(
            "iter {iteration}: steps {env_steps}, gamma {gamma:.5}, episodes {}, return {:.3}, solved {:.2}",
            row.episodes,
            row.mean_return,
            row.solved_ratio
        );
        progress(&row);
        curves.push(row);
    }
    Ok(TrainReport {
        model,
        curves,
        env_steps,
    })
}

pub fn write_curves<W: Write>(w: W, rows: &[CurveRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::FovConfig;
    use crate::env::{FixedTargets, World};
    use crate::grid::{parse_map, Cell};
    use crate::trainer::policy::TabularPolicy;
    use std::sync::Arc;

    fn source() -> FixedTargets {
        let map = Arc::new(parse_map("cpp-map v1\nsize 4\nL...\n....\n....\n....\n").unwrap());
        let world = Arc::new(World::new(
            "t",
            map,
            FovConfig {
                half_width: 1,
                ..Default::default()
            },
        ));
        FixedTargets {
            world,
            targets: vec![Cell::new(3, 3)],
            b_max: 20,
            beta: 0.5,
            objective: Default::default(),
            timeout: Some(60),
        }
    }

    fn env_cfg() -> EnvConfig {
        EnvConfig {
            battery: crate::dynamics::BatteryModel { b_max: 20, b_c: 2 },
            ..Default::default()
        }
    }

    fn small() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            workers: 3,
            steps_per_worker: 40,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_across_execution_modes() {
        let src = source();
        let a = train(TabularPolicy::new(), &src, &env_cfg(), &small(), Execution::Parallel, |_| {}).unwrap();
        let b = train(TabularPolicy::new(), &src, &env_cfg(), &small(), Execution::Sequential, |_| {}).unwrap();
        assert_eq!(a.curves, b.curves);
        assert_eq!(a.model, b.model);
        assert_eq!(a.env_steps, 3 * 3 * 40);
    }

    #[test]
    fn collected_samples_respect_the_mask() {
        let src = source();
        let model = TabularPolicy::new();
        let mut w = Worker::<TabularPolicy>::new(1);
        let batch = w.collect(&model, &src, &env_cfg(), 500, 0.99, 0.8).unwrap();
        assert_eq!(batch.len(), 500);
        assert!(batch.iter().all(|s| s.mask.allows(s.action)));
        assert!(!w.take_finished().is_empty());
    }

    #[test]
    fn curves_csv_has_header() {
        let mut buf = Vec::new();
        write_curves(&mut buf, &[CurveRow::default()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,step,gamma,episodes,coverage_ratio,crash_ratio,solved_ratio,episode_steps"));
    }

    #[test]
    fn rejects_bad_config() {
        let mut c = small();
        c.lambda = 1.5;
        assert!(c.validate().is_err());
        c = small();
        c.workers = 0;
        assert!(c.validate().is_err());
    }
}
