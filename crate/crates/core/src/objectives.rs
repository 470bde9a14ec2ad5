//! Training losses: flow matching, the original MeanFlow target, its
//! V-loss reparameterization and the improved compound objective.
//!
//! All MeanFlow-style losses share one shape: evaluate `u(z | r, t)` as a dual
//! pass with tangent `(v, 0, 1)` over `(z, r, t)` (conditions get zero
//! tangent), take `dudt` as a constant, and regress.

use imf_autodiff::{ParamStore, ParamVars, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{contract, Result};
use crate::nets::{forward_u, forward_v_auxhead, forward_v_boundary, CondBatch, CondVars, NetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeSamplerConfig {
    pub mu: f64,
    pub sigma: f64,
    pub ratio_r_neq_t: f64,
}

impl Default for TimeSamplerConfig {
    fn default() -> Self {
        TimeSamplerConfig { mu: -0.4, sigma: 1.0, ratio_r_neq_t: 0.5 }
    }
}

impl TimeSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio_r_neq_t) || !(self.sigma > 0.0) || !self.mu.is_finite() {
            return Err(contract("time sampler needs sigma > 0 and ratio in [0, 1]"));
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `(t, r)` with `r <= t`: two logit-normal draws sorted, then `r := t` with
/// probability `1 - ratio_r_neq_t`.
pub fn sample_t_r<R: Rng>(rng: &mut R, n: usize, cfg: &TimeSamplerConfig) -> (Vec<f64>, Vec<f64>) {
    let mut t = Vec::with_capacity(n);
    let mut r = Vec::with_capacity(n);
    for _ in 0..n {
        let a = sigmoid(cfg.mu + cfg.sigma * rng.sample::<f64, _>(StandardNormal));
        let b = sigmoid(cfg.mu + cfg.sigma * rng.sample::<f64, _>(StandardNormal));
        let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
        let keep = rng.random::<f64>() < cfg.ratio_r_neq_t;
        t.push(hi);
        r.push(if keep { lo } else { hi });
    }
    (t, r)
}

/// `z = (1 - t) x + t e`, with one `t` per row.
pub fn interpolate(x: &Tensor, e: &Tensor, t: &[f64]) -> Result<Tensor> {
    if x.shape() != e.shape() || x.ndim() != 2 || x.shape()[0] != t.len() {
        return Err(contract(format!(
            "interpolate: x {:?}, e {:?}, {} times",
            x.shape(),
            e.shape(),
            t.len()
        )));
    }
    let d = x.shape()[1];
    let data = x
        .data()
        .iter()
        .zip(e.data())
        .enumerate()
        .map(|(i, (&xi, &ei))| {
            let ti = t[i / d];
            (1.0 - ti) * xi + ti * ei
        })
        .collect();
    Ok(Tensor::from_vec(x.shape().to_vec(), data))
}

/// `w = 1 / (|err|^2 + c)^p`, held constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveWeight {
    pub p: f64,
    pub c: f64,
}

impl Default for AdaptiveWeight {
    fn default() -> Self {
        AdaptiveWeight { p: 1.0, c: 1e-3 }
    }
}

impl AdaptiveWeight {
    pub fn plain() -> Self {
        AdaptiveWeight { p: 0.0, c: 1e-3 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(contract(format!("adaptive weight c must be > 0, got {}", self.c)));
        }
        if !(self.p >= 0.0) {
            return Err(contract(format!("adaptive weight p must be >= 0, got {}", self.p)));
        }
        Ok(())
    }
}

/// Weighted mean of per-row squared error norms. Returns the scalar loss
/// and the unweighted per-row `|err_i|^2`.
pub fn adaptive_weight<'t>(err: Var<'t>, aw: &AdaptiveWeight) -> Result<(Var<'t>, Vec<f64>)> {
    aw.validate()?;
    let sq = err.square().sum_axis(1);
    let per_sample = sq.value().data().to_vec();
    if aw.p == 0.0 {
        return Ok((sq.mean(), per_sample));
    }
    let w: Vec<f64> = per_sample.iter().map(|&s| 1.0 / (s + aw.c).powf(aw.p)).collect();
    let w = err.tape().constant(Tensor::vector(w));
    Ok(((sq * w).mean(), per_sample))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VMode {
    Boundary,
    AuxHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Fm,
    Mf,
    ImfBoundary,
    ImfAuxhead,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Scalar that was differentiated (main plus auxiliary term).
    pub total: f64,
    /// Unweighted `|err_i|^2` of the main term.
    pub per_sample: Vec<f64>,
    pub mask_r_neq_t: Vec<bool>,
    /// Auxiliary v-head loss, when present (already included in `total`).
    pub aux: Option<f64>,
}

impl LossReport {
    /// Mean and (population) variance of `per_sample` over rows with `r != t`.
    pub fn r_neq_t_stats(&self) -> Option<(f64, f64)> {
        let vals: Vec<f64> = self
            .per_sample
            .iter()
            .zip(&self.mask_r_neq_t)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .collect();
        if vals.is_empty() {
            return None;
        }
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some((mean, var))
    }
}

/// Per-batch inputs shared by every loss.
#[derive(Debug, Clone)]
pub struct LossInputs<'a> {
    pub batch: &'a Batch,
    pub cond: &'a CondBatch,
}

impl LossInputs<'_> {
    fn check(&self) -> Result<()> {
        let n = self.batch.len();
        if self.cond.len() != n {
            return Err(contract(format!("{} conditions for {} samples", self.cond.len(), n)));
        }
        if let Some(i) = (0..n).find(|&i| !(self.cond.r[i] <= self.cond.t[i])) {
            return Err(contract(format!("r > t at row {i}")));
        }
        Ok(())
    }

    fn z(&self) -> Result<Tensor> {
        interpolate(&self.batch.x, &self.batch.e, &self.cond.t)
    }

    fn velocity_target(&self) -> Tensor {
        self.batch.e.zip_map(&self.batch.x, |e, x| e - x)
    }

    fn mask(&self) -> Vec<bool> {
        self.cond.r.iter().zip(&self.cond.t).map(|(r, t)| r != t).collect()
    }

    fn gap(&self) -> Tensor {
        let g: Vec<f64> = self.cond.t.iter().zip(&self.cond.r).map(|(t, r)| t - r).collect();
        Tensor::from_vec(vec![g.len(), 1], g)
    }
}

/// Which regression the dual `u` pass feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Form {
    /// `|u - sg((e - x) - (t - r) dudt)|^2`
    MfTarget,
    /// `|u + (t - r) sg(dudt) - target|^2`
    Compound,
}

/// Builds the main loss on `tape`. `tangent` is the `z`-direction of the
/// JVP; `target` is what the compound predictor regresses to.
pub(crate) fn dual_u_loss<'t>(
    net: &NetConfig,
    p: &ParamVars<'t>,
    tape: &'t Tape,
    inp: &LossInputs<'_>,
    tangent: Tensor,
    target: Tensor,
    form: Form,
    aw: &AdaptiveWeight,
) -> Result<(Var<'t>, Vec<f64>)> {
    let z = tape.dual(inp.z()?, tangent);
    let cv = CondVars::with_unit_time_tangent(tape, inp.cond);
    let u = forward_u(net, p, z, &cv)?;
    let dudt = u.tangent_const();
    let gap = tape.constant(inp.gap());
    let target = tape.constant(target);
    let err = match form {
        Form::MfTarget => u - (target - gap * dudt).stopgrad(),
        Form::Compound => (u + gap * dudt) - target,
    };
    adaptive_weight(err, aw)
}

/// Boundary velocity `u(z, t, t)` without gradient tracking.
pub(crate) fn eval_v_boundary(net: &NetConfig, params: &ParamStore, z: &Tensor, cond: &CondBatch) -> Result<Tensor> {
    let tape = Tape::new();
    let p = params.on_tape_frozen(&tape);
    let cv = CondVars::constant(&tape, cond);
    let v = forward_v_boundary(net, &p, tape.constant(z.clone()), &cv)?;
    if let Some(e) = tape.fault() {
        return Err(e.into());
    }
    Ok((*v.value()).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    Fm(VMode),
    Mf,
    VReparam,
    Imf(VMode),
}

impl From<Objective> for Loss {
    fn from(o: Objective) -> Self {
        match o {
            Objective::Fm => Loss::Fm(VMode::Boundary),
            Objective::Mf => Loss::Mf,
            Objective::ImfBoundary => Loss::Imf(VMode::Boundary),
            Objective::ImfAuxhead => Loss::Imf(VMode::AuxHead),
        }
    }
}

fn v_pass<'t>(
    net: &NetConfig,
    p: &ParamVars<'t>,
    tape: &'t Tape,
    z: &Tensor,
    cond: &CondBatch,
    mode: VMode,
) -> Result<Var<'t>> {
    let cv = CondVars::constant(tape, cond);
    let z = tape.constant(z.clone());
    match mode {
        VMode::Boundary => forward_v_boundary(net, p, z, &cv),
        VMode::AuxHead => forward_v_auxhead(net, p, z, &cv),
    }
}

/// Records `loss` on `tape` with `params` tracked; returns the scalar and a
/// report.
pub fn build_loss<'t>(
    net: &NetConfig,
    params: &ParamStore,
    p: &ParamVars<'t>,
    tape: &'t Tape,
    inp: &LossInputs<'_>,
    loss: Loss,
    aw: &AdaptiveWeight,
) -> Result<(Var<'t>, LossReport)> {
    inp.check()?;
    aw.validate()?;
    let target = inp.velocity_target();
    let mut aux = None;
    let (main, per_sample) = match loss {
        Loss::Fm(mode) => {
            let v = v_pass(net, p, tape, &inp.z()?, inp.cond, mode)?;
            adaptive_weight(v - tape.constant(target), aw)?
        }
        Loss::Mf => dual_u_loss(net, p, tape, inp, target.clone(), target, Form::MfTarget, aw)?,
        Loss::VReparam => dual_u_loss(net, p, tape, inp, target.clone(), target, Form::Compound, aw)?,
        Loss::Imf(VMode::Boundary) => {
            let v = eval_v_boundary(net, params, &inp.z()?, inp.cond)?;
            dual_u_loss(net, p, tape, inp, v, target, Form::Compound, aw)?
        }
        Loss::Imf(VMode::AuxHead) => {
            let v = v_pass(net, p, tape, &inp.z()?, inp.cond, VMode::AuxHead)?;
            let (aux_loss, _) = adaptive_weight(v - tape.constant(target.clone()), aw)?;
            let tangent = (*v.value()).clone();
            let (main, ps) = dual_u_loss(net, p, tape, inp, tangent, target, Form::Compound, aw)?;
            aux = Some(aux_loss);
            (main, ps)
        }
    };
    let total = match aux {
        Some(a) => main + a,
        None => main,
    };
    if let Some(e) = tape.fault() {
        return Err(e.into());
    }
    let report = LossReport {
        total: total.value().item(),
        per_sample,
        mask_r_neq_t: inp.mask(),
        aux: aux.map(|a| a.value().item()),
    };
    Ok((total, report))
}

/// Loss report and parameter gradients.
pub fn loss_and_grad(
    net: &NetConfig,
    params: &ParamStore,
    inp: &LossInputs<'_>,
    loss: Loss,
    aw: &AdaptiveWeight,
) -> Result<(LossReport, ParamStore)> {
    let tape = Tape::new();
    let p = params.on_tape(&tape);
    let (total, report) = build_loss(net, params, &p, &tape, inp, loss, aw)?;
    let grads = tape.backward(total)?;
    Ok((report, p.collect_grads(&grads)))
}

/// Loss report only (parameters frozen).
pub fn loss_report(
    net: &NetConfig,
    params: &ParamStore,
    inp: &LossInputs<'_>,
    loss: Loss,
    aw: &AdaptiveWeight,
) -> Result<LossReport> {
    let tape = Tape::new();
    let p = params.on_tape_frozen(&tape);
    Ok(build_loss(net, params, &p, &tape, inp, loss, aw)?.1)
}

pub fn fm_loss(net: &NetConfig, params: &ParamStore, inp: &LossInputs<'_>, mode: VMode, aw: &AdaptiveWeight) -> Result<LossReport> {
    loss_report(net, params, inp, Loss::Fm(mode), aw)
}

pub fn mf_loss(net: &NetConfig, params: &ParamStore, inp: &LossInputs<'_>, aw: &AdaptiveWeight) -> Result<LossReport> {
    loss_report(net, params, inp, Loss::Mf, aw)
}

pub fn v_loss_mf_reparam(net: &NetConfig, params: &ParamStore, inp: &LossInputs<'_>, aw: &AdaptiveWeight) -> Result<LossReport> {
    loss_report(net, params, inp, Loss::VReparam, aw)
}

pub fn imf_loss(net: &NetConfig, params: &ParamStore, inp: &LossInputs<'_>, mode: VMode, aw: &AdaptiveWeight) -> Result<LossReport> {
    loss_report(net, params, inp, Loss::Imf(mode), aw)
}
