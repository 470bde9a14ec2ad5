use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use imf_core::checkpoint::{write_atomic, Checkpoint};
use imf_core::config::RunConfig;
use imf_core::guidance::GuidanceSample;
use imf_core::oracle::{GaussianSpec, TrajectoryConfig};
use imf_core::run::{cmd_eval, cmd_sample, cmd_sweep, cmd_train, cmd_verify, samples_csv, sweep_csv, sweep_svg, SampleRequest};

#[derive(Parser)]
#[command(name = "imf-lab", version, about = "Train and probe one-step average-velocity generators on toy data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate samples from a checkpoint as CSV.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class: Option<usize>,
        #[command(flatten)]
        guidance: GuidanceFlags,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 1000)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use raw weights instead of the EMA shadow.
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sliced Wasserstein distance of 1-NFE samples to held-out data.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        guidance: GuidanceFlags,
        #[arg(long, default_value_t = 10_000)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        raw: bool,
    },
    /// Check the average/instantaneous velocity identity on Gaussian data.
    Verify(VerifyArgs),
    /// Evaluate one guidance-conditioned model over a grid of scales and intervals.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated guidance scales.
        #[arg(long, default_value = "1,1.5,2,3,4,6,8")]
        omegas: String,
        /// Comma-separated `t_min:t_max` intervals.
        #[arg(long, default_value = "0:1")]
        intervals: String,
        #[arg(long, default_value_t = 2000)]
        m: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        raw: bool,
        #[arg(long)]
        out: PathBuf,
        /// Optional scatter plot of the table.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GuidanceFlags {
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    t_min: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Data mean, one entry per dimension.
    #[arg(long, default_value = "2.0")]
    mu: String,
    /// Data std; 0 is a point mass.
    #[arg(long, default_value_t = 0.0)]
    sigma_x: f64,
    /// Scalar `z` values (applied to every coordinate).
    #[arg(long, default_value = "-2,-1,0,0.5,1,2,3")]
    z: String,
    #[arg(long, default_value = "0.1,0.3,0.5,0.7")]
    r: String,
    #[arg(long, default_value = "0.3,0.5,0.8,1.0")]
    t: String,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    fd_step: f64,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    /// Added to the instantaneous velocity only (a deliberately broken field).
    #[arg(long, default_value_t = 0.0)]
    bias: f64,
}

fn floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("not a number: `{p}`")))
        .collect()
}

fn intervals(s: &str) -> Result<Vec<(f64, f64)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p.split_once(':').with_context(|| format!("interval `{p}` is not t_min:t_max"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

fn load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn guidance(ck: &Checkpoint, g: &GuidanceFlags) -> Result<GuidanceSample> {
    if (g.omega.is_some() || g.t_min.is_some() || g.t_max.is_some()) && !ck.config.net.omega_conditioning {
        bail!("guidance flags given but the checkpoint has no omega conditioning");
    }
    Ok(GuidanceSample { omega: g.omega.unwrap_or(1.0), t_min: g.t_min.unwrap_or(0.0), t_max: g.t_max.unwrap_or(1.0) })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Train { config, out } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = RunConfig::from_json(&text)?;
            let s = cmd_train(&cfg, &out)?;
            let last = s.rows.last();
            eprintln!(
                "trained {} steps; final loss {}; checkpoint {}",
                cfg.steps,
                last.map(|r| r.loss_total.to_string()).unwrap_or_else(|| "-".into()),
                s.final_checkpoint.display()
            );
        }
        Cmd::Sample { ckpt, class, guidance: g, nfe, m, seed, raw, out } => {
            let ck = load(&ckpt)?;
            let req = SampleRequest { class, omega: g.omega, t_min: g.t_min, t_max: g.t_max, nfe, m, seed, raw };
            let samples = cmd_sample(&ck, &req)?;
            write_atomic(&out, samples_csv(&samples).as_bytes())?;
        }
        Cmd::Eval { ckpt, guidance: g, m, seed, raw } => {
            let ck = load(&ckpt)?;
            let gs = guidance(&ck, &g)?;
            let r = cmd_eval(&ck, &gs, m, seed, raw)?;
            println!("sw2 {}\nself_distance {}\nratio {}", r.sw2, r.self_distance, r.sw2 / r.self_distance);
        }
        Cmd::Verify(a) => {
            let spec = GaussianSpec { mu: floats(&a.mu)?, sigma_x: a.sigma_x };
            let d = spec.dim();
            let zs: Vec<Vec<f64>> = floats(&a.z)?.into_iter().map(|z| vec![z; d]).collect();
            let mut times = Vec::new();
            for &t in &floats(&a.t)? {
                for &r in &floats(&a.r)? {
                    if r <= t {
                        times.push((r, t));
                    }
                }
            }
            let traj = TrajectoryConfig { steps: a.steps, fd_step: a.fd_step, ..TrajectoryConfig::default() };
            let rep = cmd_verify(&spec, &zs, &times, &traj, a.bias)?;
            if rep.skipped > 0 {
                eprintln!("skipped {} grid rows with r == t (identity holds trivially)", rep.skipped);
            }
            println!("checked {} points; max residual {:e}", rep.checked, rep.max_residual);
            if rep.max_residual > a.tol {
                eprintln!("residual exceeds tolerance {:e}", a.tol);
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Sweep { ckpt, omegas, intervals: iv, m, seed, raw, out, svg } => {
            let ck = load(&ckpt)?;
            let (rows, dups) = cmd_sweep(&ck, &floats(&omegas)?, &intervals(&iv)?, m, seed, raw)?;
            if dups > 0 {
                eprintln!("warning: dropped {dups} duplicate grid entries");
            }
            write_atomic(&out, sweep_csv(&rows).as_bytes())?;
            if let Some(p) = svg {
                write_atomic(&p, sweep_svg(&rows).as_bytes())?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
