//! Central-difference gradient verification.
//!
//! Runs the checked subgraph in `f64` so the 1e-3 tolerance is about the
//! gradient math, not about accumulated single-precision noise.

use crate::params::ParameterStore;
use crate::tensor::{Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum GradCheckError {
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    /// index of the worst scalar inside the parameter
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() <= tol
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Checks every parameter of `store` against central differences of `loss_fn`.
///
/// `loss_fn` must build a scalar loss on the given tape, binding whatever
/// parameters it uses via `store.bind`. It is re-invoked for each probe, so
/// it must be deterministic (dropout off).
pub fn gradient_check<L>(
    store: &mut ParameterStore<f64>,
    step: f64,
    mut loss_fn: L,
) -> Result<GradCheckReport, GradCheckError>
where
    L: FnMut(&mut Tape<f64>, &ParameterStore<f64>) -> Var,
{
    let eval = |store: &ParameterStore<f64>, loss_fn: &mut L| -> Result<f64, GradCheckError> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store);
        let v = tape.scalar_value(loss);
        if !v.is_finite() {
            return Err(GradCheckError::NonFiniteLoss(v));
        }
        Ok(v)
    };

    // analytic pass
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store);
    let base = tape.scalar_value(loss);
    if !base.is_finite() {
        return Err(GradCheckError::NonFiniteLoss(base));
    }
    let grads = tape.backward(loss);
    let mut analytic: Vec<(usize, Vec<f64>)> = Vec::new();
    let ids: Vec<_> = store.entries().map(|(id, e)| (id, e.name.clone(), e.values.len())).collect();
    for (id, _, len) in &ids {
        let bound = store.bind(&mut tape, *id); // cached binding if used by loss_fn
        let g = grads
            .get(bound)
            .map(|gv| tape.values(gv).to_vec())
            .unwrap_or_else(|| vec![0.0; *len]);
        analytic.push((id.0, g));
    }

    let mut per_param = Vec::new();
    for ((id, name, len), (_, g)) in ids.iter().zip(analytic.iter()) {
        let mut worst = 0.0;
        let mut worst_index = 0;
        for i in 0..*len {
            let orig = store.values(*id)[i];
            store.get_mut(*id).values[i] = orig + step;
            let up = eval(store, &mut loss_fn)?;
            store.get_mut(*id).values[i] = orig - step;
            let down = eval(store, &mut loss_fn)?;
            store.get_mut(*id).values[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let e = rel_err(g[i], numeric);
            if e > worst {
                worst = e;
                worst_index = i;
            }
        }
        per_param.push(ParamCheck {
            name: name.clone(),
            max_rel_err: worst,
            worst_index,
        });
    }
    Ok(GradCheckReport { per_param })
}
