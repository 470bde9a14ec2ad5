//! Classifier-free guidance folded into training: the network is told the
//! guidance scale and interval, and regresses a guided velocity target.

use imf_autodiff::{ParamStore, Tape, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{contract, Result};
use crate::nets::{CondBatch, NetConfig};
use crate::objectives::{
    dual_u_loss, eval_v_boundary, interpolate, sample_t_r, AdaptiveWeight, Form, LossInputs, LossReport,
    TimeSamplerConfig,
};
use crate::optim::{train_step, OptimConfig, TrainState};
use crate::rng::{stream, Domain};

/// `p(omega) ∝ omega^-beta` on `[1, omega_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OmegaDist {
    pub omega_max: f64,
    pub beta: f64,
}

impl Default for OmegaDist {
    fn default() -> Self {
        OmegaDist { omega_max: 8.0, beta: 1.0 }
    }
}

impl OmegaDist {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega_max > 1.0) || !(self.beta >= 0.0) {
            return Err(contract("omega distribution needs omega_max > 1 and beta >= 0"));
        }
        Ok(())
    }

    /// Inverse CDF at `u` in `[0, 1]`.
    pub fn quantile(&self, u: f64) -> f64 {
        let om = self.omega_max;
        if self.beta == 1.0 {
            om.powf(u)
        } else {
            let a = 1.0 - self.beta;
            (1.0 + u * (om.powf(a) - 1.0)).powf(1.0 / a)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub omega: OmegaDist,
    pub class_drop: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig { omega: OmegaDist::default(), class_drop: 0.1 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.omega.validate()?;
        if !(0.0..=1.0).contains(&self.class_drop) {
            return Err(contract("class_drop must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSample {
    pub omega: f64,
    pub t_min: f64,
    pub t_max: f64,
}

pub fn sample_omega<R: Rng>(rng: &mut R, dist: &OmegaDist) -> f64 {
    dist.quantile(rng.random::<f64>()).clamp(1.0, dist.omega_max)
}

/// `t_min ~ U[0, 0.5]`, `t_max ~ U[0.5, 1]`.
pub fn sample_interval<R: Rng>(rng: &mut R) -> (f64, f64) {
    let a = 0.5 * rng.random::<f64>();
    let b = 0.5 + 0.5 * rng.random::<f64>();
    (a, b)
}

/// `omega` inside the closed interval `[t_min, t_max]`, 1 outside.
pub fn effective_omega(t: f64, g: &GuidanceSample) -> f64 {
    if g.t_min <= t && t <= g.t_max {
        g.omega
    } else {
        1.0
    }
}

/// `v_g = (e - x) + (1 - 1/omega) (v_cond - v_uncond)`, one `omega` per row.
pub fn cfg_target(x: &Tensor, e: &Tensor, v_cond: &Tensor, v_uncond: &Tensor, omega: &[f64]) -> Result<Tensor> {
    let shape = x.shape();
    if e.shape() != shape || v_cond.shape() != shape || v_uncond.shape() != shape || shape[0] != omega.len() {
        return Err(contract("cfg_target: shape mismatch"));
    }
    if let Some(w) = omega.iter().find(|w| !(**w >= 1.0)) {
        return Err(contract(format!("cfg_target: omega {w} < 1")));
    }
    let d = shape[1];
    let data = (0..x.len())
        .map(|i| {
            let k = 1.0 - 1.0 / omega[i / d];
            (e.data()[i] - x.data()[i]) + k * (v_cond.data()[i] - v_uncond.data()[i])
        })
        .collect();
    Ok(Tensor::from_vec(shape.to_vec(), data))
}

/// Replace each label by the null class with probability `p`.
pub fn drop_classes<R: Rng>(rng: &mut R, labels: &[usize], p: f64) -> Vec<Option<usize>> {
    labels.iter().map(|&c| if rng.random::<f64>() < p { None } else { Some(c) }).collect()
}

/// Conditions for one guided step: times, guidance draw and class drop, each
/// from its own counter-indexed stream.
pub fn draw_guided_conditions(
    seed: u64,
    counter: u64,
    labels: &[usize],
    times: &TimeSamplerConfig,
    g: &GuidanceConfig,
) -> CondBatch {
    let n = labels.len();
    let (t, r) = sample_t_r(&mut stream(seed, Domain::Time, counter), n, times);
    let mut grng = stream(seed, Domain::Guidance, counter);
    let mut omega = Vec::with_capacity(n);
    let mut t_min = Vec::with_capacity(n);
    let mut t_max = Vec::with_capacity(n);
    for _ in 0..n {
        omega.push(sample_omega(&mut grng, &g.omega));
        let (a, b) = sample_interval(&mut grng);
        t_min.push(a);
        t_max.push(b);
    }
    let class = drop_classes(&mut stream(seed, Domain::ClassDrop, counter), labels, g.class_drop);
    CondBatch { r, t, class, omega, t_min, t_max }
}

/// Per-row effective guidance scale.
pub fn effective_omegas(cond: &CondBatch) -> Vec<f64> {
    (0..cond.len())
        .map(|i| {
            let c = cond.get(i);
            effective_omega(c.t, &GuidanceSample { omega: c.omega, t_min: c.t_min, t_max: c.t_max })
        })
        .collect()
}

/// `(v_g, v_c)`: the guided target and the conditional boundary velocity
/// used as the JVP tangent.
pub fn guided_targets(net: &NetConfig, params: &ParamStore, batch: &Batch, cond: &CondBatch) -> Result<(Tensor, Tensor)> {
    if !net.omega_conditioning {
        return Err(contract("guided training needs an omega-conditioned network"));
    }
    let z = interpolate(&batch.x, &batch.e, &cond.t)?;
    let v_c = eval_v_boundary(net, params, &z, cond)?;
    let v_u = eval_v_boundary(net, params, &z, &cond.with_class(vec![None; cond.len()]))?;
    let v_g = cfg_target(&batch.x, &batch.e, &v_c, &v_u, &effective_omegas(cond))?;
    Ok((v_g, v_c))
}

fn guided_build(
    net: &NetConfig,
    params: &ParamStore,
    batch: &Batch,
    cond: &CondBatch,
    aw: &AdaptiveWeight,
    track: bool,
) -> Result<(LossReport, Option<ParamStore>)> {
    let (v_g, v_c) = guided_targets(net, params, batch, cond)?;
    let inp = LossInputs { batch, cond };
    let tape = Tape::new();
    let p = if track { params.on_tape(&tape) } else { params.on_tape_frozen(&tape) };
    let (loss, per_sample) = dual_u_loss(net, &p, &tape, &inp, v_c, v_g, Form::Compound, aw)?;
    if let Some(e) = tape.fault() {
        return Err(e.into());
    }
    let report = LossReport {
        total: loss.value().item(),
        per_sample,
        mask_r_neq_t: cond.r.iter().zip(&cond.t).map(|(r, t)| r != t).collect(),
        aux: None,
    };
    let grads = if track { Some(p.collect_grads(&tape.backward(loss)?)) } else { None };
    Ok((report, grads))
}

pub fn guided_loss_and_grad(
    net: &NetConfig,
    params: &ParamStore,
    batch: &Batch,
    cond: &CondBatch,
    aw: &AdaptiveWeight,
) -> Result<(LossReport, ParamStore)> {
    let (r, g) = guided_build(net, params, batch, cond, aw, true)?;
    Ok((r, g.expect("tracked")))
}

pub fn guided_loss(net: &NetConfig, params: &ParamStore, batch: &Batch, cond: &CondBatch, aw: &AdaptiveWeight) -> Result<LossReport> {
    Ok(guided_build(net, params, batch, cond, aw, false)?.0)
}

/// One guided optimizer step on `batch` with pre-drawn conditions.
pub fn train_step_guided(
    net: &NetConfig,
    state: &mut TrainState,
    batch: &Batch,
    cond: &CondBatch,
    aw: &AdaptiveWeight,
    opt: &OptimConfig,
    total_steps: u64,
) -> Result<LossReport> {
    train_step(state, opt, total_steps, |p| guided_loss_and_grad(net, p, batch, cond, aw))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn median(mut v: Vec<f64>) -> f64 {
        v.sort_by(|a, b| a.total_cmp(b));
        let n = v.len();
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }

    #[test]
    fn omega_medians() {
        let mut rng = stream(3, Domain::Test, 0);
        for (beta, expect) in [(1.0, 8f64.sqrt()), (2.0, 16.0 / 9.0)] {
            let d = OmegaDist { omega_max: 8.0, beta };
            let draws: Vec<f64> = (0..1_000_000).map(|_| sample_omega(&mut rng, &d)).collect();
            assert!(draws.iter().all(|w| (1.0..=8.0).contains(w)));
            let m = median(draws);
            assert!((m / expect - 1.0).abs() < 0.01, "beta {beta}: {m} vs {expect}");
        }
    }

    #[test]
    fn quantile_endpoints() {
        for beta in [0.0, 0.5, 1.0, 2.0, 3.0] {
            let d = OmegaDist { omega_max: 8.0, beta };
            assert!((d.quantile(0.0) - 1.0).abs() < 1e-12);
            assert!((d.quantile(1.0) - 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_moments() {
        let mut rng = stream(4, Domain::Test, 0);
        let n = 1_000_000;
        let (mut a, mut b) = (0.0, 0.0);
        for _ in 0..n {
            let (lo, hi) = sample_interval(&mut rng);
            assert!(lo <= 0.5 && 0.5 <= hi);
            a += lo;
            b += hi;
        }
        assert!((a / n as f64 - 0.25).abs() < 0.005);
        assert!((b / n as f64 - 0.75).abs() < 0.005);
    }

    #[test]
    fn effective_omega_is_closed_interval() {
        let g = GuidanceSample { omega: 3.0, t_min: 0.2, t_max: 0.7 };
        assert_eq!(effective_omega(0.5, &g), 3.0);
        assert_eq!(effective_omega(0.2, &g), 3.0);
        assert_eq!(effective_omega(0.7, &g), 3.0);
        assert_eq!(effective_omega(0.1, &g), 1.0);
        assert_eq!(effective_omega(0.9, &g), 1.0);
    }

    #[test]
    fn cfg_target_cases() {
        let x = Tensor::from_vec(vec![1, 2], vec![1.0, -2.0]);
        let e = Tensor::from_vec(vec![1, 2], vec![0.3, 0.7]);
        let vc = Tensor::from_vec(vec![1, 2], vec![2.0, 5.0]);
        let vu = Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]);
        let base = e.zip_map(&x, |e, x| e - x);
        assert_eq!(cfg_target(&x, &e, &vc, &vu, &[1.0]).unwrap(), base);
        let half = cfg_target(&x, &e, &vc, &vu, &[2.0]).unwrap();
        assert!(half.max_abs_diff(&base.zip_map(&Tensor::from_vec(vec![1, 2], vec![1.0, 4.0]), |a, d| a + 0.5 * d)) < 1e-15);
        let big = cfg_target(&x, &e, &vc, &vu, &[1e6]).unwrap();
        assert!(big.max_abs_diff(&base.zip_map(&Tensor::from_vec(vec![1, 2], vec![1.0, 4.0]), |a, d| a + d)) < 1e-5);
        assert!(cfg_target(&x, &e, &vc, &vu, &[0.5]).is_err());
    }

    #[test]
    fn class_drop_rate() {
        let mut rng = stream(5, Domain::Test, 0);
        let labels = vec![3usize; 100_000];
        let dropped = drop_classes(&mut rng, &labels, 0.1).iter().filter(|c| c.is_none()).count();
        let f = dropped as f64 / 1e5;
        assert!((f - 0.10).abs() < 0.005, "{f}");
    }
}
