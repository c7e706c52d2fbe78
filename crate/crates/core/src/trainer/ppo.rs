//! Clipped-surrogate loss restricted to the action mask, with its analytic
//! gradient.

use serde::{Deserialize, Serialize};

use super::policy::{entropy, masked_distribution, PolicyModel};
use crate::dynamics::{Action, N_ACTIONS};
use crate::safety::ActionMask;

#[derive(Debug, Clone)]
pub struct Sample<I> {
    pub input: I,
    pub mask: ActionMask,
    pub action: Action,
    /// Log-probability under the behaviour policy.
    pub logp_old: f64,
    pub advantage: f64,
    /// Value target.
    pub ret: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoParams {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for PpoParams {
    fn default() -> Self {
        Self {
            clip: 0.1,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.policy.is_finite() && self.value.is_finite()
    }
}

/// Loss only, for finite-difference checks.
pub fn loss<M: PolicyModel>(model: &M, batch: &[Sample<M::Input>], hp: &PpoParams) -> LossParts {
    evaluate(model, batch, hp, None)
}

/// Loss and its gradient with respect to the model parameters.
pub fn loss_and_grad<M: PolicyModel>(
    model: &M,
    batch: &[Sample<M::Input>],
    hp: &PpoParams,
) -> (LossParts, M::Grad) {
    let mut grad = model.zero_grad();
    let parts = evaluate(model, batch, hp, Some(&mut grad));
    (parts, grad)
}

fn evaluate<M: PolicyModel>(
    model: &M,
    batch: &[Sample<M::Input>],
    hp: &PpoParams,
    mut grad: Option<&mut M::Grad>,
) -> LossParts {
    let n = batch.len().max(1) as f64;
    let mut parts = LossParts::default();
    for s in batch {
        let z = model.logits(&s.input);
        let v = model.value(&s.input);
        let p = masked_distribution(&z, &s.mask);
        let a = s.action.index();
        let ratio = (p[a].ln() - s.logp_old).exp();
        let clipped = ratio.clamp(1.0 - hp.clip, 1.0 + hp.clip);
        let unclipped_term = ratio * s.advantage;
        let clipped_term = clipped * s.advantage;
        let h = entropy(&p);
        parts.policy -= unclipped_term.min(clipped_term) / n;
        parts.value += (v - s.ret).powi(2) / n;
        parts.entropy += h / n;

        if let Some(g) = grad.as_deref_mut() {
            let mut dz = [0.0; N_ACTIONS];
            let policy_active = unclipped_term <= clipped_term;
            for k in 0..N_ACTIONS {
                if !s.mask.allowed[k] {
                    continue;
                }
                let onehot = if k == a { 1.0 } else { 0.0 };
                if policy_active {
                    dz[k] -= s.advantage * ratio * (onehot - p[k]);
                }
                // d(-c_e H)/dz_k = c_e * p_k (ln p_k + H)
                if p[k] > 0.0 {
                    dz[k] += hp.entropy_coef * p[k] * (p[k].ln() + h);
                }
                dz[k] /= n;
            }
            let dv = 2.0 * hp.value_coef * (v - s.ret) / n;
            model.accumulate(&s.input, &dz, dv, g);
        }
    }
    parts.total = parts.policy + hp.value_coef * parts.value - hp.entropy_coef * parts.entropy;
    parts
}

/// Relative error `|g - g_fd| / max(|g|, |g_fd|)` between the analytic
/// gradient and central finite differences over every parameter the batch
/// touches.
pub fn gradient_check<M: PolicyModel>(
    model: &M,
    batch: &[Sample<M::Input>],
    hp: &PpoParams,
    eps: f64,
) -> f64 {
    let (_, g) = loss_and_grad(model, batch, hp);
    let analytic = model.flatten(&g);
    let mut numeric = vec![0.0; analytic.len()];
    for i in 0..analytic.len() {
        let mut unit = vec![0.0; analytic.len()];
        unit[i] = eps;
        let step = model.unflatten(&g, &unit);
        let mut plus = model.clone();
        plus.add_scaled(&step, 1.0);
        let mut minus = model.clone();
        minus.add_scaled(&step, -1.0);
        numeric[i] = (loss(&plus, batch, hp).total - loss(&minus, batch, hp).total) / (2.0 * eps);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let scale = norm(&analytic).max(norm(&numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Cell;
    use crate::safety::MaskLevel;
    use crate::trainer::policy::{StateKey, TabularPolicy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> (TabularPolicy, Vec<Sample<StateKey>>) {
        let mut model = TabularPolicy::new();
        let keys: Vec<StateKey> = (0..6)
            .map(|i| StateKey {
                position: Cell::new(i, 0),
                battery: 10,
                landed: false,
                targets: vec![],
            })
            .collect();
        let mut g = model.zero_grad();
        for k in &keys {
            let mut z = [0.0; N_ACTIONS];
            for v in &mut z {
                *v = rng.random_range(-1.0..1.0);
            }
            model.accumulate(k, &z, rng.random_range(-1.0..1.0), &mut g);
        }
        model.add_scaled(&g, 1.0);
        let batch = (0..n)
            .map(|_| {
                let mut allowed = [false; N_ACTIONS];
                for a in &mut allowed {
                    *a = rng.random_bool(0.6);
                }
                let a = rng.random_range(0..N_ACTIONS);
                allowed[a] = true;
                Sample {
                    input: keys[rng.random_range(0..keys.len())].clone(),
                    mask: ActionMask {
                        allowed,
                        level: MaskLevel::Invariant,
                    },
                    action: Action::from_index(a).unwrap(),
                    logp_old: -rng.random_range(0.2..2.0),
                    advantage: rng.random_range(-1.0..1.0),
                    ret: rng.random_range(-1.0..1.0),
                }
            })
            .collect();
        (model, batch)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let (model, batch) = random_batch(&mut rng, 32);
            let err = gradient_check(&model, &batch, &PpoParams::default(), 1e-6);
            assert!(err <= 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn masked_logits_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (model, batch) = random_batch(&mut rng, 1);
        let (_, g) = loss_and_grad(&model, &batch, &PpoParams::default());
        let flat = model.flatten(&g);
        for (k, &allowed) in batch[0].mask.allowed.iter().enumerate() {
            if !allowed {
                assert_eq!(flat[k], 0.0);
            }
        }
    }

    #[test]
    fn on_policy_loss_at_uniform() {
        let model = TabularPolicy::new();
        let key = StateKey {
            position: Cell::new(0, 0),
            battery: 1,
            landed: true,
            targets: vec![],
        };
        let mask = ActionMask::all(MaskLevel::Invariant);
        let s = Sample {
            input: key,
            mask,
            action: Action::East,
            logp_old: -(N_ACTIONS as f64).ln(),
            advantage: 2.0,
            ret: 1.0,
        };
        let hp = PpoParams::default();
        let l = loss(&model, &[s], &hp);
        assert!((l.policy + 2.0).abs() < 1e-12);
        assert!((l.value - 1.0).abs() < 1e-12);
        assert!((l.entropy - (N_ACTIONS as f64).ln()).abs() < 1e-12);
    }
}
