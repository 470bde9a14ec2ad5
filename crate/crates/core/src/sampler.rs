//! One-step and few-step generation from an average-velocity field.

use imf_autodiff::{ParamStore, Tensor};

use crate::data::randn;
use crate::error::{contract, Result};
use crate::nets::{eval_u, CondBatch, ConditionSet, NetConfig};
use crate::par::map_indexed;
use crate::rng::{stream, Domain};

/// Rows per network call; fixed so results do not depend on thread count.
const CHUNK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRun {
    pub samples: Tensor,
    pub cond: ConditionSet,
    pub nfe: usize,
    pub seed: u64,
}

/// Prior draws `z_1 ~ N(0, I)` of shape `[m, d]`.
pub fn prior(m: usize, d: usize, seed: u64) -> Tensor {
    randn(&mut stream(seed, Domain::Prior, 0), &[m, d])
}

/// Applies `f` to row chunks of `z` in parallel and reassembles.
fn chunked<F>(z: &Tensor, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let m = z.shape()[0];
    if m == 0 {
        return Ok(z.clone());
    }
    let jobs = m.div_ceil(CHUNK);
    let parts = map_indexed(jobs, |j| {
        let lo = j * CHUNK;
        let hi = (lo + CHUNK).min(m);
        f(&z.slice_axis(0, lo, hi))
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 0))
}

fn cond_at(template: &ConditionSet, r: f64, t: f64, m: usize) -> CondBatch {
    CondBatch::repeat(&ConditionSet { r, t, ..*template }, m)
}

/// `z_0 = z_1 - u(z_1 | r = 0, t = 1, cond)` with an arbitrary field.
pub fn sample_1nfe_with<U>(u: U, d: usize, template: &ConditionSet, m: usize, seed: u64) -> Result<SampleRun>
where
    U: Fn(&Tensor, &CondBatch) -> Result<Tensor> + Sync,
{
    let z1 = prior(m, d, seed);
    let z0 = chunked(&z1, |z| {
        let out = u(z, &cond_at(template, 0.0, 1.0, z.shape()[0]))?;
        Ok(z.zip_map(&out, |a, b| a - b))
    })?;
    Ok(SampleRun { samples: z0, cond: *template, nfe: 1, seed })
}

/// Uniform grid `1 = t_0 > ... > t_n = 0`, stepping
/// `z <- z - (t_i - t_{i+1}) u(z | t_{i+1}, t_i)`.
pub fn sample_nstep_with<U>(u: U, d: usize, template: &ConditionSet, m: usize, n_steps: usize, seed: u64) -> Result<SampleRun>
where
    U: Fn(&Tensor, &CondBatch) -> Result<Tensor> + Sync,
{
    if n_steps == 0 {
        return Err(contract("n_steps must be >= 1"));
    }
    let grid: Vec<f64> = (0..=n_steps).map(|i| 1.0 - i as f64 / n_steps as f64).collect();
    let z1 = prior(m, d, seed);
    let z0 = chunked(&z1, |z| {
        let mut z = z.clone();
        for w in grid.windows(2) {
            let (t, r) = (w[0], w[1]);
            let out = u(&z, &cond_at(template, r, t, z.shape()[0]))?;
            let h = t - r;
            z = z.zip_map(&out, |a, b| a - h * b);
        }
        Ok(z)
    })?;
    Ok(SampleRun { samples: z0, cond: *template, nfe: n_steps, seed })
}

/// One-step samples from a network (pass EMA weights for evaluation).
pub fn sample_1nfe(net: &NetConfig, params: &ParamStore, template: &ConditionSet, m: usize, seed: u64) -> Result<SampleRun> {
    net.validate()?;
    sample_1nfe_with(|z, c| eval_u(net, params, z, c), net.data_dim, template, m, seed)
}

pub fn sample_nstep(
    net: &NetConfig,
    params: &ParamStore,
    template: &ConditionSet,
    m: usize,
    n_steps: usize,
    seed: u64,
) -> Result<SampleRun> {
    net.validate()?;
    sample_nstep_with(|z, c| eval_u(net, params, z, c), net.data_dim, template, m, n_steps, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero(z: &Tensor, _: &CondBatch) -> Result<Tensor> {
        Ok(Tensor::zeros(z.shape()))
    }

    /// Exact average velocity for a point mass at `mu`: `(z - mu) / t`.
    fn point_mass(mu: f64) -> impl Fn(&Tensor, &CondBatch) -> Result<Tensor> + Sync {
        move |z, c| {
            let d = z.shape()[1];
            let data = z.data().iter().enumerate().map(|(i, &v)| (v - mu) / c.t[i / d]).collect();
            Ok(Tensor::from_vec(z.shape().to_vec(), data))
        }
    }

    #[test]
    fn zero_field_returns_prior() {
        let tpl = ConditionSet::new(0.0, 1.0);
        let s = sample_1nfe_with(zero, 2, &tpl, 1000, 7).unwrap();
        assert_eq!(s.samples, prior(1000, 2, 7));
        for n in [1, 2, 5] {
            assert_eq!(sample_nstep_with(zero, 2, &tpl, 1000, n, 7).unwrap().samples, prior(1000, 2, 7));
        }
    }

    #[test]
    fn point_mass_lands_exactly() {
        let tpl = ConditionSet::new(0.0, 1.0);
        let s = sample_1nfe_with(point_mass(2.0), 1, &tpl, 500, 1).unwrap();
        assert!(s.samples.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        for n in [2, 3, 8] {
            let k = sample_nstep_with(point_mass(2.0), 1, &tpl, 500, n, 1).unwrap();
            assert!(k.samples.max_abs_diff(&s.samples) < 1e-12, "n = {n}");
        }
    }

    #[test]
    fn one_step_grid_matches_1nfe_bitwise() {
        let tpl = ConditionSet::new(0.0, 1.0);
        let f = |z: &Tensor, _: &CondBatch| Ok(z.map(|v| (v * 1.3).sin()));
        let a = sample_1nfe_with(f, 3, &tpl, 1500, 2).unwrap();
        let b = sample_nstep_with(f, 3, &tpl, 1500, 1, 2).unwrap();
        assert_eq!(a.samples, b.samples);
        assert!(sample_nstep_with(f, 3, &tpl, 10, 0, 2).is_err());
    }

    #[test]
    fn empty_request() {
        let s = sample_1nfe_with(zero, 2, &ConditionSet::new(0.0, 1.0), 0, 1).unwrap();
        assert_eq!(s.samples.shape(), &[0, 2]);
    }
}
