//! Adam with linear warmup, parameter EMA and the generic train step.

use imf_autodiff::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::{contract, LabError, Result};
use crate::objectives::LossReport;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Fraction of total steps spent in linear warmup.
    pub warmup_frac: f64,
    pub ema_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-4,
            betas: [0.9, 0.95],
            eps: 1e-8,
            // 10 warmup epochs out of a 240-epoch schedule
            warmup_frac: 10.0 / 240.0,
            ema_decay: 0.9999,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let [b1, b2] = self.betas;
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(contract("optimizer needs lr >= 0 and betas in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(0.0..=1.0).contains(&self.warmup_frac) || !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(contract("optimizer needs eps > 0, warmup_frac and ema_decay in [0, 1]"));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` of `total` steps.
    pub fn lr_at(&self, step: u64, total: u64) -> f64 {
        let warm = (self.warmup_frac * total as f64).ceil() as u64;
        if step < warm {
            self.lr * (step + 1) as f64 / warm as f64
        } else {
            self.lr
        }
    }

    /// EMA decay used after `step` updates: the configured decay, capped by
    /// `(1 + step) / (10 + step)` so short runs are not dominated by init.
    pub fn ema_decay_at(&self, step: u64) -> f64 {
        let s = step as f64;
        self.ema_decay.min((1.0 + s) / (10.0 + s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        AdamState { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update, no weight decay.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, st: &mut AdamState, lr: f64, cfg: &OptimConfig) -> Result<()> {
    params.check_compatible(grads)?;
    params.check_compatible(&st.m)?;
    st.step += 1;
    let [b1, b2] = cfg.betas;
    let c1 = 1.0 - b1.powi(st.step as i32);
    let c2 = 1.0 - b2.powi(st.step as i32);
    for (((_, p), (_, g)), ((_, m), (_, v))) in params
        .iter_mut()
        .zip(grads.iter())
        .zip(st.m.iter_mut().zip(st.v.iter_mut()))
    {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `shadow = decay * shadow + (1 - decay) * params`.
pub fn ema_update(shadow: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    shadow
        .check_compatible(params)
        .map_err(|e| contract(format!("EMA key mismatch: {e}")))?;
    for ((_, s), (_, p)) in shadow.iter_mut().zip(params.iter()) {
        for (si, &pi) in s.data_mut().iter_mut().zip(p.data()) {
            *si = decay * *si + (1.0 - decay) * pi;
        }
    }
    Ok(())
}

/// Raw weights, their EMA shadow and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub ema: ParamStore,
    pub adam: AdamState,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        TrainState { ema: params.clone(), adam: AdamState::new(&params), params, step: 0 }
    }
}

/// Runs `loss_fn` for gradients, then one Adam update and one EMA update.
/// A non-finite loss or gradient aborts the step and leaves `state` untouched.
pub fn train_step<F>(state: &mut TrainState, cfg: &OptimConfig, total_steps: u64, loss_fn: F) -> Result<LossReport>
where
    F: FnOnce(&ParamStore) -> Result<(LossReport, ParamStore)>,
{
    let (report, grads) = match loss_fn(&state.params) {
        Ok(v) => v,
        Err(LabError::Autodiff(e)) => {
            return Err(LabError::Numeric { step: state.step as usize, what: e.to_string() });
        }
        Err(e) => return Err(e),
    };
    if !report.total.is_finite() {
        return Err(LabError::Numeric { step: state.step as usize, what: format!("loss = {}", report.total) });
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(LabError::Numeric { step: state.step as usize, what: format!("non-finite gradient for `{name}`") });
    }
    let lr = cfg.lr_at(state.step, total_steps);
    adam_step(&mut state.params, &grads, &mut state.adam, lr, cfg)?;
    state.step += 1;
    ema_update(&mut state.ema, &state.params, cfg.ema_decay_at(state.step))?;
    Ok(report)
}
