//! Named, role-tagged parameter storage and the Adam optimizer.
//!
//! Roles partition the trainable surface: the optimizer only ever steps
//! parameters whose role is in the requested set, which is what keeps critic
//! updates out of the generator (and the teacher frozen) during interleaved
//! training.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Real, Tape, Var};

static STORE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Which optimization arrow may touch a parameter.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// θ — transfer model (content encoder, fusion, decoder, shared embeddings).
    TransferModel,
    /// φ — style generator.
    StyleGenerator,
    /// 𝒲_s — style critic.
    StyleCritic,
    /// 𝒲_t — text critic.
    TextCritic,
    /// Frozen style classifier.
    Teacher,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub role: Role,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<F>,
    pub grad: Vec<F>,
    adam_m: Vec<F>,
    adam_v: Vec<F>,
    adam_step: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        // WGAN-friendly betas
        AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

pub struct ParameterStore<F> {
    id: u64,
    entries: Vec<ParamEntry<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParameterStore<F> {
    pub fn new() -> Self {
        ParameterStore {
            id: STORE_COUNTER.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, name: &str, role: Role, rows: usize, cols: usize, values: Vec<F>) -> ParamId {
        assert_eq!(values.len(), rows * cols, "parameter `{name}` shape/value mismatch");
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name `{name}`"
        );
        let n = values.len();
        let idx = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            role,
            rows,
            cols,
            values,
            grad: vec![F::ZERO; n],
            adam_m: vec![F::ZERO; n],
            adam_v: vec![F::ZERO; n],
            adam_step: 0,
        });
        self.by_name.insert(name.to_string(), idx);
        ParamId(idx)
    }

    /// Uniform ±√(6/(fan_in+fan_out)) init for matrices.
    pub fn add_glorot(&mut self, name: &str, role: Role, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols)
            .map(|_| F::from_f64(rng.random_range(-bound..bound)))
            .collect();
        self.add(name, role, rows, cols, values)
    }

    pub fn add_zeros(&mut self, name: &str, role: Role, rows: usize, cols: usize) -> ParamId {
        self.add(name, role, rows, cols, vec![F::ZERO; rows * cols])
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<F> {
        &mut self.entries[id.0]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<F>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn values(&self, id: ParamId) -> &[F] {
        &self.entries[id.0].values
    }

    pub fn set_values(&mut self, id: ParamId, values: Vec<F>) {
        let e = &mut self.entries[id.0];
        assert_eq!(values.len(), e.values.len());
        e.values = values;
    }

    /// Binds the parameter onto a tape as a gradient-tracked leaf.
    pub fn bind<'a>(&self, tape: &mut Tape<F>, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        tape.bind(self.id, id.0, || (e.rows, e.cols, e.values.clone()), true)
    }

    /// Binds without gradient tracking (frozen phase for this model).
    pub fn bind_frozen(&self, tape: &mut Tape<F>, id: ParamId) -> Var {
        let e = &self.entries[id.0];
        tape.bind(self.id, id.0, || (e.rows, e.cols, e.values.clone()), false)
    }

    /// Adds the tape gradients of this store's bound parameters into the
    /// store's gradient accumulators, scaled by `scale`.
    pub fn accumulate_grads(&mut self, tape: &Tape<F>, grads: &crate::tensor::Gradients, scale: f64) {
        let s = F::from_f64(scale);
        let mut touched: Vec<(usize, Var)> = tape
            .bound_params()
            .filter(|((store_id, _), _)| *store_id == self.id)
            .map(|((_, idx), &var)| (*idx, var))
            .collect();
        touched.sort_by_key(|(idx, _)| *idx);
        for (idx, var) in touched {
            if let Some(gvar) = grads.get(var) {
                let gv = tape.values(gvar);
                let acc = &mut self.entries[idx].grad;
                for (a, &g) in acc.iter_mut().zip(gv.iter()) {
                    *a += g * s;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            for g in &mut e.grad {
                *g = F::ZERO;
            }
        }
    }

    /// One bias-corrected Adam update over parameters whose role is in `roles`.
    /// Gradients of stepped parameters are cleared afterwards.
    pub fn adam_step(&mut self, roles: &[Role], cfg: &AdamConfig) -> Result<(), OptimError> {
        for e in &mut self.entries {
            if !roles.contains(&e.role) {
                continue;
            }
            for &g in &e.grad {
                if !g.is_finite() {
                    return Err(OptimError::NonFiniteGradient(e.name.clone()));
                }
            }
            e.adam_step += 1;
            let t = e.adam_step;
            let b1 = F::from_f64(cfg.beta1);
            let b2 = F::from_f64(cfg.beta2);
            let one = F::ONE;
            let corr1 = F::from_f64(1.0 - cfg.beta1.powi(t as i32));
            let corr2 = F::from_f64(1.0 - cfg.beta2.powi(t as i32));
            let lr = F::from_f64(cfg.lr);
            let eps = F::from_f64(cfg.eps);
            for i in 0..e.values.len() {
                let g = e.grad[i];
                e.adam_m[i] = b1 * e.adam_m[i] + (one - b1) * g;
                e.adam_v[i] = b2 * e.adam_v[i] + (one - b2) * g * g;
                let m_hat = e.adam_m[i] / corr1;
                let v_hat = e.adam_v[i] / corr2;
                e.values[i] = e.values[i] - lr * m_hat / (v_hat.powf(0.5) + eps);
            }
            for g in &mut e.grad {
                *g = F::ZERO;
            }
        }
        Ok(())
    }

    /// Snapshot of all values (for best-checkpoint tracking and frozen-teacher assertions).
    pub fn snapshot(&self) -> Vec<Vec<F>> {
        self.entries.iter().map(|e| e.values.clone()).collect()
    }

    pub fn restore(&mut self, snap: &[Vec<F>]) {
        assert_eq!(snap.len(), self.entries.len());
        for (e, v) in self.entries.iter_mut().zip(snap.iter()) {
            assert_eq!(e.values.len(), v.len());
            e.values.copy_from_slice(v);
        }
    }

    /// Optimizer state access for checkpointing.
    pub fn optim_state(&self, id: ParamId) -> (&[F], &[F], u64) {
        let e = &self.entries[id.0];
        (&e.adam_m, &e.adam_v, e.adam_step)
    }

    pub fn set_optim_state(&mut self, id: ParamId, m: Vec<F>, v: Vec<F>, step: u64) {
        let e = &mut self.entries[id.0];
        assert_eq!(m.len(), e.values.len());
        assert_eq!(v.len(), e.values.len());
        e.adam_m = m;
        e.adam_v = v;
        e.adam_step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_first_step_hand_computed() {
        // scalar param, g = 1, β1 = 0.5, β2 = 0.98, lr = 1e-4:
        // m̂ = v̂ = 1 after bias correction, so the update is lr/(1+ε) ≈ 1e-4
        let mut store: ParameterStore<f64> = ParameterStore::new();
        let p = store.add("w", Role::TransferModel, 1, 1, vec![0.0]);
        store.get_mut(p).grad[0] = 1.0;
        let cfg = AdamConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.98,
            eps: 1e-8,
        };
        store.adam_step(&[Role::TransferModel], &cfg).unwrap();
        let v = store.values(p)[0];
        assert!((v + 1e-4).abs() < 1e-9, "update was {v}");
    }

    #[test]
    fn zero_gradient_leaves_values_untouched_but_advances_step() {
        let mut store: ParameterStore<f32> = ParameterStore::new();
        let p = store.add("w", Role::StyleCritic, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        store.adam_step(&[Role::StyleCritic], &AdamConfig::default()).unwrap();
        assert_eq!(store.values(p), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(store.optim_state(p).2, 1);
    }

    #[test]
    fn role_filter_is_exact() {
        let mut store: ParameterStore<f32> = ParameterStore::new();
        let a = store.add("theta", Role::TransferModel, 1, 1, vec![1.0]);
        let b = store.add("critic", Role::StyleCritic, 1, 1, vec![1.0]);
        store.get_mut(a).grad[0] = 1.0;
        store.get_mut(b).grad[0] = 1.0;
        store.adam_step(&[Role::StyleCritic], &AdamConfig::default()).unwrap();
        assert_eq!(store.values(a), &[1.0]);
        assert!(store.values(b)[0] != 1.0);
    }

    #[test]
    fn non_finite_gradient_is_diagnosed() {
        let mut store: ParameterStore<f32> = ParameterStore::new();
        let p = store.add("w", Role::TextCritic, 1, 1, vec![0.0]);
        store.get_mut(p).grad[0] = f32::NAN;
        let err = store.adam_step(&[Role::TextCritic], &AdamConfig::default()).unwrap_err();
        assert!(err.to_string().contains("w"));
    }

    #[test]
    fn identical_stores_step_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s1: ParameterStore<f32> = ParameterStore::new();
        let p1 = s1.add_glorot("w", Role::TransferModel, 3, 3, &mut rng);
        let mut s2: ParameterStore<f32> = ParameterStore::new();
        let p2 = s2.add("w", Role::TransferModel, 3, 3, s1.values(p1).to_vec());
        for (i, g) in s1.get_mut(p1).grad.iter_mut().enumerate() {
            *g = i as f32 * 0.1 - 0.3;
        }
        for (i, g) in s2.get_mut(p2).grad.iter_mut().enumerate() {
            *g = i as f32 * 0.1 - 0.3;
        }
        let cfg = AdamConfig::default();
        s1.adam_step(&[Role::TransferModel], &cfg).unwrap();
        s2.adam_step(&[Role::TransferModel], &cfg).unwrap();
        assert_eq!(s1.values(p1), s2.values(p2));
    }
}
