//! Reproducible runs: training loop with metrics and checkpoints, plus the
//! sampling, evaluation, identity-check and sweep drivers behind the CLI.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use imf_autodiff::{ParamStore, Tensor};

use crate::checkpoint::{write_atomic, Checkpoint};
use crate::config::{Precision, RunConfig};
use crate::data::{sample_batch, Batch, DatasetSpec};
use crate::error::{contract, Result};
use crate::guidance::{draw_guided_conditions, guided_loss_and_grad, GuidanceSample};
use crate::metrics::{cfg_sweep, conditional_eval, self_distance, SweepRow};
use crate::nets::{init_params, inference_params, CondBatch, ConditionSet};
use crate::objectives::{loss_and_grad, sample_t_r, LossInputs, LossReport};
use crate::optim::{train_step, TrainState};
use crate::oracle::{marginal_v, verify_identity_with, GaussianSpec, TrajectoryConfig};
use crate::rng::{stream, Domain};
use crate::sampler::{sample_1nfe, sample_nstep};

pub const METRICS_HEADER: &str = "step,loss_total,loss_r_neq_t_mean,loss_r_neq_t_var,lr,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    /// Optimizer steps completed.
    pub step: u64,
    pub loss_total: f64,
    /// Over `r != t` rows of the batch; `None` when the batch had none.
    pub loss_r_neq_t_mean: Option<f64>,
    pub loss_r_neq_t_var: Option<f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.loss_total,
            opt(self.loss_r_neq_t_mean),
            opt(self.loss_r_neq_t_var),
            self.lr,
            self.wall_ms
        )
    }
}

fn round_store(p: &mut ParamStore, prec: Precision) {
    if prec == Precision::F32 {
        for (_, t) in p.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = prec.round(*v));
        }
    }
}

/// Training loop state machine; one call to [`Trainer::step`] per update.
pub struct Trainer {
    pub cfg: RunConfig,
    pub state: TrainState,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = init_params(&cfg.net, cfg.seed)?;
        round_store(&mut params, cfg.precision);
        Ok(Trainer { state: TrainState::new(params), cfg })
    }

    pub fn batch(&self, counter: u64) -> Result<Batch> {
        let mut b = sample_batch(&self.cfg.dataset, self.cfg.batch_size, self.cfg.seed, counter)?;
        if self.cfg.precision == Precision::F32 {
            b.x = b.x.map(|v| Precision::F32.round(v));
            b.e = b.e.map(|v| Precision::F32.round(v));
        }
        Ok(b)
    }

    /// Conditions for step `counter` of a run (guided or not).
    pub fn conditions(&self, batch: &Batch, counter: u64) -> CondBatch {
        let cfg = &self.cfg;
        let n = batch.len();
        let labels: Vec<usize> = batch.labels.clone().unwrap_or_else(|| vec![0; n]);
        if let Some(g) = &cfg.guidance {
            return draw_guided_conditions(cfg.seed, counter, &labels, &cfg.time_sampler, g);
        }
        let (t, r) = sample_t_r(&mut stream(cfg.seed, Domain::Time, counter), n, &cfg.time_sampler);
        let class = if cfg.net.num_classes > 0 { labels.into_iter().map(Some).collect() } else { vec![None; n] };
        CondBatch { r, t, class, omega: vec![1.0; n], t_min: vec![0.0; n], t_max: vec![1.0; n] }
    }

    /// One optimizer update; returns the batch report and the learning rate used.
    pub fn step(&mut self) -> Result<(LossReport, f64)> {
        let counter = self.state.step;
        let batch = self.batch(counter)?;
        let cond = self.conditions(&batch, counter);
        let cfg = &self.cfg;
        let lr = cfg.optimizer.lr_at(counter, cfg.steps);
        let report = if cfg.guidance.is_some() {
            train_step(&mut self.state, &cfg.optimizer, cfg.steps, |p| {
                guided_loss_and_grad(&cfg.net, p, &batch, &cond, &cfg.adaptive_weight)
            })?
        } else {
            let inp = LossInputs { batch: &batch, cond: &cond };
            train_step(&mut self.state, &cfg.optimizer, cfg.steps, |p| {
                loss_and_grad(&cfg.net, p, &inp, cfg.objective.into(), &cfg.adaptive_weight)
            })?
        };
        round_store(&mut self.state.params, cfg.precision);
        round_store(&mut self.state.ema, cfg.precision);
        Ok((report, lr))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.state.step,
            params: self.state.params.clone(),
            ema: self.state.ema.clone(),
        }
    }

    fn row(&self, report: &LossReport, lr: f64, wall_ms: u64) -> MetricsRow {
        let stats = report.r_neq_t_stats();
        MetricsRow {
            step: self.state.step,
            loss_total: report.total,
            loss_r_neq_t_mean: stats.map(|s| s.0),
            loss_r_neq_t_var: stats.map(|s| s.1),
            lr,
            wall_ms: if self.cfg.record_wall_time { wall_ms } else { 0 },
        }
    }
}

/// Train without touching the filesystem; returns the final state and one
/// metrics row per logged step.
pub fn train_in_memory(cfg: &RunConfig) -> Result<(TrainState, Vec<MetricsRow>)> {
    let mut tr = Trainer::new(cfg.clone())?;
    let start = Instant::now();
    let mut rows = Vec::new();
    while tr.state.step < cfg.steps {
        let (report, lr) = tr.step()?;
        if tr.state.step % cfg.log_every == 0 {
            rows.push(tr.row(&report, lr, start.elapsed().as_millis() as u64));
        }
    }
    Ok((tr.state, rows))
}

#[derive(Debug)]
pub struct TrainSummary {
    pub rows: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:08}.imf")
}

/// Full training run into `out_dir`: resolved config first, then metrics,
/// periodic checkpoints and `final.imf`. A numeric failure writes
/// `abort.imf` and the metrics so far before returning the error.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join("config.resolved.json"), (cfg.to_json() + "\n").as_bytes())?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    write_atomic(&metrics_path, csv.as_bytes())?;

    let mut tr = Trainer::new(cfg.clone())?;
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    while tr.state.step < cfg.steps {
        let (report, lr) = match tr.step() {
            Ok(v) => v,
            Err(e) => {
                write_atomic(&metrics_path, csv.as_bytes())?;
                tr.checkpoint().save(&out_dir.join("abort.imf"))?;
                return Err(e);
            }
        };
        if tr.state.step % cfg.log_every == 0 {
            let row = tr.row(&report, lr, start.elapsed().as_millis() as u64);
            let _ = writeln!(csv, "{}", row.csv_line());
            rows.push(row);
        }
        if cfg.checkpoint_every > 0 && tr.state.step % cfg.checkpoint_every == 0 && tr.state.step < cfg.steps {
            let p = out_dir.join(checkpoint_name(tr.state.step));
            write_atomic(&metrics_path, csv.as_bytes())?;
            tr.checkpoint().save(&p)?;
            checkpoints.push(p);
        }
    }
    write_atomic(&metrics_path, csv.as_bytes())?;
    let final_checkpoint = out_dir.join("final.imf");
    tr.checkpoint().save(&final_checkpoint)?;
    Ok(TrainSummary { rows, checkpoints, final_checkpoint })
}

/// Sampling request against a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRequest {
    pub class: Option<usize>,
    pub omega: Option<f64>,
    pub t_min: Option<f64>,
    pub t_max: Option<f64>,
    pub nfe: usize,
    pub m: usize,
    pub seed: u64,
    /// Use raw weights instead of the EMA shadow.
    pub raw: bool,
}

impl Default for SampleRequest {
    fn default() -> Self {
        SampleRequest { class: None, omega: None, t_min: None, t_max: None, nfe: 1, m: 1000, seed: 0, raw: false }
    }
}

pub fn eval_weights(ck: &Checkpoint, raw: bool) -> ParamStore {
    inference_params(if raw { &ck.params } else { &ck.ema })
}

pub fn cmd_sample(ck: &Checkpoint, req: &SampleRequest) -> Result<Tensor> {
    let net = &ck.config.net;
    let omega_flags = req.omega.is_some() || req.t_min.is_some() || req.t_max.is_some();
    if omega_flags && !net.omega_conditioning {
        return Err(contract("guidance flags given but the checkpoint has no omega conditioning"));
    }
    if req.class.is_some() && net.num_classes == 0 {
        return Err(contract("class given but the checkpoint is unconditional"));
    }
    let tpl = ConditionSet::new(0.0, 1.0)
        .with_class(req.class)
        .with_guidance(req.omega.unwrap_or(1.0), req.t_min.unwrap_or(0.0), req.t_max.unwrap_or(1.0));
    tpl.validate()?;
    let params = eval_weights(ck, req.raw);
    let run = if req.nfe == 1 {
        sample_1nfe(net, &params, &tpl, req.m, req.seed)?
    } else {
        sample_nstep(net, &params, &tpl, req.m, req.nfe, req.seed)?
    };
    Ok(run.samples)
}

/// One row per sample, `x0..x{d-1}` header.
pub fn samples_csv(samples: &Tensor) -> String {
    let d = samples.shape()[1];
    let mut out = (0..d).map(|j| format!("x{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..samples.shape()[0] {
        let row: Vec<String> = samples.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub sw2: f64,
    pub self_distance: f64,
}

/// 1-NFE quality against held-out data under one guidance setting.
pub fn cmd_eval(ck: &Checkpoint, g: &GuidanceSample, m: usize, seed: u64, raw: bool) -> Result<EvalReport> {
    let ds = &ck.config.dataset;
    let params = eval_weights(ck, raw);
    let sw2 = conditional_eval(&ck.config.net, &params, ds, g, m, seed)?;
    Ok(EvalReport { sw2, self_distance: self_distance(ds, m, seed)? })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub max_residual: f64,
    pub checked: usize,
    /// Grid rows with `r == t`, where the identity is trivial.
    pub skipped: usize,
}

/// Checks the average/instantaneous velocity identity on a grid of
/// `(z, r, t)`. `bias` is added to the instantaneous velocity only, which
/// breaks the identity on purpose.
pub fn cmd_verify(
    spec: &GaussianSpec,
    zs: &[Vec<f64>],
    times: &[(f64, f64)],
    traj: &TrajectoryConfig,
    bias: f64,
) -> Result<VerifyReport> {
    let field = |z: &[f64], t: f64| marginal_v(z, t, spec);
    let claimed = |z: &[f64], t: f64| marginal_v(z, t, spec).map(|v| v.into_iter().map(|x| x + bias).collect());
    let mut report = VerifyReport { max_residual: 0.0, checked: 0, skipped: 0 };
    for &(r, t) in times {
        if r == t {
            report.skipped += zs.len();
            continue;
        }
        for z in zs {
            let res = verify_identity_with(z, r, t, traj, field, claimed)?;
            report.max_residual = report.max_residual.max(res);
            report.checked += 1;
        }
    }
    Ok(report)
}

pub const SWEEP_HEADER: &str = "omega,t_min,t_max,sw2";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.omega, r.t_min, r.t_max, r.sw2);
    }
    out
}

/// Scatter of `sw2` against `omega`, one colour per interval.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const PAD: f64 = 40.0;
    let colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let (mut x0, mut x1, y0, mut y1) = (f64::MAX, f64::MIN, 0.0f64, f64::MIN);
    for r in rows {
        x0 = x0.min(r.omega);
        x1 = x1.max(r.omega);
        y1 = y1.max(r.sw2);
    }
    if rows.is_empty() {
        (x0, x1, y1) = (1.0, 2.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n");
    let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", H - PAD, W - PAD, H - PAD);
    let _ = writeln!(s, "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>", H - PAD);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" font-size=\"12\">omega</text>", W / 2.0, H - 8.0);
    let _ = writeln!(s, "<text x=\"4\" y=\"{}\" font-size=\"12\">sw2</text>", PAD - 8.0);
    let mut intervals: Vec<(f64, f64)> = Vec::new();
    for r in rows {
        if !intervals.contains(&(r.t_min, r.t_max)) {
            intervals.push((r.t_min, r.t_max));
        }
        let k = intervals.iter().position(|iv| *iv == (r.t_min, r.t_max)).unwrap_or(0);
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"><title>[{}, {}] omega={} sw2={}</title></circle>",
            sx(r.omega),
            sy(r.sw2),
            colours[k % colours.len()],
            r.t_min,
            r.t_max,
            r.omega,
            r.sw2
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn cmd_sweep(
    ck: &Checkpoint,
    omegas: &[f64],
    intervals: &[(f64, f64)],
    m: usize,
    seed: u64,
    raw: bool,
) -> Result<(Vec<SweepRow>, usize)> {
    cfg_sweep(&ck.config.net, &eval_weights(ck, raw), omegas, intervals, &ck.config.dataset, m, seed)
}

/// Held-out data for `dataset`, exposed for scripts comparing samples.
pub fn data_csv(dataset: &DatasetSpec, m: usize, seed: u64) -> String {
    samples_csv(&crate::metrics::reference_set(dataset, m, seed, 0))
}
