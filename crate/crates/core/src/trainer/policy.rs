//! Policy/value models and the masked action distribution.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Action, N_ACTIONS};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::eval::Actor;
use crate::grid::Cell;
use crate::safety::ActionMask;

/// Softmax restricted to the allowed actions; masked entries are exactly 0.
pub fn masked_distribution(logits: &[f64; N_ACTIONS], mask: &ActionMask) -> [f64; N_ACTIONS] {
    let max = logits
        .iter()
        .zip(mask.allowed)
        .filter(|(_, a)| *a)
        .map(|(z, _)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; N_ACTIONS];
    if max == f64::NEG_INFINITY {
        return p;
    }
    let mut sum = 0.0;
    for k in 0..N_ACTIONS {
        if mask.allowed[k] {
            p[k] = (logits[k] - max).exp();
            sum += p[k];
        }
    }
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// Entropy of a distribution over the allowed actions.
pub fn entropy(p: &[f64; N_ACTIONS]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

/// Highest allowed logit; ties go to the lowest action index.
pub fn greedy_action(logits: &[f64; N_ACTIONS], mask: &ActionMask) -> Option<Action> {
    let mut best: Option<usize> = None;
    for k in 0..N_ACTIONS {
        if mask.allowed[k] && best.is_none_or(|b| logits[k] > logits[b]) {
            best = Some(k);
        }
    }
    best.and_then(Action::from_index)
}

pub fn sample_action(p: &[f64; N_ACTIONS], rng: &mut ChaCha8Rng) -> Option<Action> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (k, &pk) in p.iter().enumerate() {
        if pk > 0.0 {
            acc += pk;
            last = Some(k);
            if u < acc {
                return Action::from_index(k);
            }
        }
    }
    last.and_then(Action::from_index)
}

/// A differentiable policy/value model.
pub trait PolicyModel: Clone + Send + Sync {
    type Input: Clone + Send + Sync;
    type Grad: Clone + Send;

    fn encode(&self, env: &Env) -> Self::Input;
    fn logits(&self, x: &Self::Input) -> [f64; N_ACTIONS];
    fn value(&self, x: &Self::Input) -> f64;

    fn zero_grad(&self) -> Self::Grad;
    /// Adds the chain-rule contribution of one sample, given the loss
    /// derivative with respect to its logits and value.
    fn accumulate(
        &self,
        x: &Self::Input,
        dlogits: &[f64; N_ACTIONS],
        dvalue: f64,
        grad: &mut Self::Grad,
    );
    /// One optimiser step along `-grad`, with separate rates for the policy
    /// and value heads.
    fn apply(&mut self, grad: &Self::Grad, lr_pi: f64, lr_v: f64);
    /// Exact `params += alpha * grad`, bypassing optimiser state.
    fn add_scaled(&mut self, grad: &Self::Grad, alpha: f64);

    /// Flat view of a gradient, in a layout fixed by `grad` itself.
    fn flatten(&self, grad: &Self::Grad) -> Vec<f64>;
    /// Inverse of [`PolicyModel::flatten`] for the layout of `like`.
    fn unflatten(&self, like: &Self::Grad, flat: &[f64]) -> Self::Grad;
}

/// Exact agent state plus the remaining-target bitset.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateKey {
    pub position: Cell,
    pub battery: u32,
    pub landed: bool,
    pub targets: Vec<u64>,
}

impl StateKey {
    pub fn of(env: &Env) -> Self {
        let s = env.state();
        Self {
            position: s.position,
            battery: s.battery,
            landed: s.landed,
            targets: env.targets().bits(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub logits: [f64; N_ACTIONS],
    pub value: f64,
}

/// One logit vector and value per visited state. Unseen states read as
/// all-zero entries: uniform over the mask, value 0.
///
/// Updates use Adam with per-entry moments and step counts, so a state's
/// step size does not depend on how often it appears in a minibatch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TabularPolicy {
    table: HashMap<StateKey, TableEntry>,
    moments: HashMap<StateKey, Moments>,
}

const N_PARAMS: usize = N_ACTIONS + 1;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Moments {
    m: [f64; N_PARAMS],
    v: [f64; N_PARAMS],
    t: i32,
}

/// Sparse gradient over table entries, kept in first-touch order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TableGrad {
    index: HashMap<StateKey, usize>,
    entries: Vec<(StateKey, TableEntry)>,
}

impl TableGrad {
    fn slot(&mut self, key: &StateKey) -> &mut TableEntry {
        let i = match self.index.get(key) {
            Some(&i) => i,
            None => {
                self.entries.push((key.clone(), TableEntry::default()));
                self.index.insert(key.clone(), self.entries.len() - 1);
                self.entries.len() - 1
            }
        };
        &mut self.entries[i].1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    entries: Vec<(StateKey, TableEntry)>,
}

const CHECKPOINT_FORMAT: &str = "cpp-tabular v1";

impl TabularPolicy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn entry(&self, key: &StateKey) -> TableEntry {
        self.table.get(key).copied().unwrap_or_default()
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        let mut entries: Vec<_> = self.table.iter().map(|(k, v)| (k.clone(), *v)).collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        serde_json::to_writer(
            w,
            &Checkpoint {
                format: CHECKPOINT_FORMAT.into(),
                entries,
            },
        )?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(r)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck
            .entries
            .iter()
            .any(|(_, e)| !e.value.is_finite() || e.logits.iter().any(|z| !z.is_finite()))
        {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            table: ck.entries.into_iter().collect(),
            moments: HashMap::new(),
        })
    }
}

impl PolicyModel for TabularPolicy {
    type Input = StateKey;
    type Grad = TableGrad;

    fn encode(&self, env: &Env) -> StateKey {
        StateKey::of(env)
    }

    fn logits(&self, x: &StateKey) -> [f64; N_ACTIONS] {
        self.entry(x).logits
    }

    fn value(&self, x: &StateKey) -> f64 {
        self.entry(x).value
    }

    fn zero_grad(&self) -> TableGrad {
        TableGrad::default()
    }

    fn accumulate(&self, x: &StateKey, dlogits: &[f64; N_ACTIONS], dvalue: f64, grad: &mut TableGrad) {
        let e = grad.slot(x);
        for (g, d) in e.logits.iter_mut().zip(dlogits) {
            *g += d;
        }
        e.value += dvalue;
    }

    fn apply(&mut self, grad: &TableGrad, lr_pi: f64, lr_v: f64) {
        for (k, g) in &grad.entries {
            let mo = self.moments.entry(k.clone()).or_default();
            mo.t += 1;
            let c1 = 1.0 - BETA1.powi(mo.t);
            let c2 = 1.0 - BETA2.powi(mo.t);
            let e = self.table.entry(k.clone()).or_default();
            for i in 0..N_PARAMS {
                let (gi, lr) = if i < N_ACTIONS { (g.logits[i], lr_pi) } else { (g.value, lr_v) };
                mo.m[i] = BETA1 * mo.m[i] + (1.0 - BETA1) * gi;
                mo.v[i] = BETA2 * mo.v[i] + (1.0 - BETA2) * gi * gi;
                let step = lr * (mo.m[i] / c1) / ((mo.v[i] / c2).sqrt() + ADAM_EPS);
                if i < N_ACTIONS {
                    e.logits[i] -= step;
                } else {
                    e.value -= step;
                }
            }
        }
    }

    fn add_scaled(&mut self, grad: &TableGrad, alpha: f64) {
        for (k, g) in &grad.entries {
            let e = self.table.entry(k.clone()).or_default();
            for (z, d) in e.logits.iter_mut().zip(g.logits) {
                *z += alpha * d;
            }
            e.value += alpha * g.value;
        }
    }

    fn flatten(&self, grad: &TableGrad) -> Vec<f64> {
        grad.entries
            .iter()
            .flat_map(|(_, e)| e.logits.iter().copied().chain([e.value]))
            .collect()
    }

    fn unflatten(&self, like: &TableGrad, flat: &[f64]) -> TableGrad {
        let mut out = like.clone();
        for (i, (_, e)) in out.entries.iter_mut().enumerate() {
            let chunk = &flat[i * (N_ACTIONS + 1)..(i + 1) * (N_ACTIONS + 1)];
            e.logits.copy_from_slice(&chunk[..N_ACTIONS]);
            e.value = chunk[N_ACTIONS];
        }
        out
    }
}

/// Acts with a trained model: samples from the masked distribution, or takes
/// the greedy action when `deterministic`.
#[derive(Debug, Clone)]
pub struct PolicyActor<'a, M> {
    pub model: &'a M,
    pub deterministic: bool,
}

impl<M: PolicyModel> Actor for PolicyActor<'_, M> {
    fn act(&mut self, env: &Env, mask: &ActionMask, rng: &mut ChaCha8Rng) -> Result<Action> {
        let z = self.model.logits(&self.model.encode(env));
        let a = if self.deterministic {
            greedy_action(&z, mask)
        } else {
            sample_action(&masked_distribution(&z, mask), rng)
        };
        a.ok_or(Error::EmptyMask)
    }
}
