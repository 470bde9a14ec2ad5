//! Closed-form and quadrature ground truth for isotropic Gaussian data.
//!
//! With `x ~ N(mu, sigma_x^2 I)`, `e ~ N(0, I)` and `z_t = (1-t) x + t e`,
//! the triple `(x, e, z_t)` is jointly Gaussian, so `E[e - x | z_t]` is affine
//! in `z_t`. The average velocity is obtained by integrating that field with
//! RK4 and differencing the endpoints.

use serde::{Deserialize, Serialize};

use crate::error::{contract, LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianSpec {
    pub mu: Vec<f64>,
    /// Isotropic data std; 0 is a point mass.
    pub sigma_x: f64,
}

impl GaussianSpec {
    pub fn point_mass(mu: Vec<f64>) -> Self {
        GaussianSpec { mu, sigma_x: 0.0 }
    }

    pub fn standard(d: usize) -> Self {
        GaussianSpec { mu: vec![0.0; d], sigma_x: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub integrator: Integrator,
    pub steps: usize,
    pub fd_step: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig { integrator: Integrator::Rk4, steps: 1000, fd_step: 1e-4 }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 16 {
            return Err(contract(format!("trajectory steps must be >= 16, got {}", self.steps)));
        }
        if !(self.fd_step > 0.0) {
            return Err(contract("fd_step must be > 0"));
        }
        Ok(())
    }
}

/// `E[e - x | z_t = z]`.
pub fn marginal_v(z: &[f64], t: f64, spec: &GaussianSpec) -> Result<Vec<f64>> {
    if z.len() != spec.dim() {
        return Err(contract(format!("point has {} dims, spec {}", z.len(), spec.dim())));
    }
    let s2 = spec.sigma_x * spec.sigma_x;
    let var_z = (1.0 - t) * (1.0 - t) * s2 + t * t;
    if !(var_z > 0.0) || !(0.0..=1.0).contains(&t) {
        return Err(contract(format!("marginal velocity undefined at t={t} for sigma_x={}", spec.sigma_x)));
    }
    // Cov(e - x, z_t) / Var(z_t)
    let gain = (t - (1.0 - t) * s2) / var_z;
    Ok(z.iter()
        .zip(&spec.mu)
        .map(|(&zi, &m)| -m + gain * (zi - (1.0 - t) * m))
        .collect())
}

fn axpy(a: &[f64], k: f64, b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + k * y).collect()
}

fn rk4_step<F>(field: &F, z: &[f64], tau: f64, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let k1 = field(z, tau)?;
    let k2 = field(&axpy(z, 0.5 * h, &k1), tau + 0.5 * h)?;
    let k3 = field(&axpy(z, 0.5 * h, &k2), tau + 0.5 * h)?;
    let k4 = field(&axpy(z, h, &k3), tau + h)?;
    Ok(z.iter()
        .enumerate()
        .map(|(i, zi)| zi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// RK4 from `from` to `to` (either direction) in `steps` uniform steps.
fn integrate<F>(z0: &[f64], from: f64, to: f64, steps: usize, field: &F) -> Result<Vec<(f64, Vec<f64>)>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    let h = (to - from) / steps as f64;
    let mut path = Vec::with_capacity(steps + 1);
    let mut z = z0.to_vec();
    path.push((from, z.clone()));
    for i in 0..steps {
        let tau = from + h * i as f64;
        // land exactly on `to` so the last stage never leaves [0, 1]
        let tau_next = if i + 1 == steps { to } else { from + h * (i + 1) as f64 };
        z = rk4_step(field, &z, tau, tau_next - tau)?;
        if z.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Numeric { step: i, what: "non-finite trajectory state".into() });
        }
        path.push((tau_next, z.clone()));
    }
    Ok(path)
}

/// Integrate `dz/dtau = field(z, tau)` backward from `t` to `r`; returns the
/// full path, starting at `(t, z_t)` and ending at `(r, z_r)`.
pub fn solve_trajectory<F>(
    z_t: &[f64],
    t: f64,
    r: f64,
    field: F,
    cfg: &TrajectoryConfig,
) -> Result<Vec<(f64, Vec<f64>)>>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    if r > t {
        return Err(contract(format!("need r <= t, got r={r}, t={t}")));
    }
    integrate(z_t, t, r, cfg.steps, &field)
}

/// `(1/(t-r)) * integral_r^t v(z_tau, tau) dtau` along the flow through
/// `(t, z)`, evaluated as the endpoint displacement per unit time.
pub fn average_u_quadrature(
    z: &[f64],
    r: f64,
    t: f64,
    spec: &GaussianSpec,
    cfg: &TrajectoryConfig,
) -> Result<Vec<f64>> {
    if r > t {
        return Err(contract(format!("need r <= t, got r={r}, t={t}")));
    }
    if r == t {
        return marginal_v(z, t, spec);
    }
    let path = solve_trajectory(z, t, r, |zz, tau| marginal_v(zz, tau, spec), cfg)?;
    let z_r = &path.last().unwrap().1;
    Ok(z.iter().zip(z_r).map(|(a, b)| (a - b) / (t - r)).collect())
}

/// Residual `max_i |u - (v - (t-r) du/dt)|` of the average/instantaneous
/// velocity identity, with `du/dt` the total derivative along the flow
/// (central difference with co-moving `z`).
pub fn verify_identity(
    z: &[f64],
    r: f64,
    t: f64,
    spec: &GaussianSpec,
    cfg: &TrajectoryConfig,
) -> Result<f64> {
    let field = |zz: &[f64], tau: f64| marginal_v(zz, tau, spec);
    verify_identity_with(z, r, t, cfg, field, field)
}

/// [`verify_identity`] with `u` built from `field` and the instantaneous
/// term taken from `claimed_v`. The identity holds for any field when the two
/// agree, so a mismatch shows up directly in the residual.
pub fn verify_identity_with<F, G>(
    z: &[f64],
    r: f64,
    t: f64,
    cfg: &TrajectoryConfig,
    field: F,
    claimed_v: G,
) -> Result<f64>
where
    F: Fn(&[f64], f64) -> Result<Vec<f64>>,
    G: Fn(&[f64], f64) -> Result<Vec<f64>>,
{
    cfg.validate()?;
    if !(r < t) {
        return Err(contract(format!("identity check needs r < t, got r={r}, t={t}")));
    }
    let h = cfg.fd_step;
    let avg = |zz: &[f64], tt: f64| -> Result<Vec<f64>> {
        let path = integrate(zz, tt, r, cfg.steps, &field)?;
        let z_r = &path.last().unwrap().1;
        Ok(zz.iter().zip(z_r).map(|(a, b)| (a - b) / (tt - r)).collect())
    };
    let u = avg(z, t)?;
    let v = claimed_v(z, t)?;
    // u at time t + k*h, following the flow from (t, z)
    let shifted = |k: f64| -> Result<Vec<f64>> {
        let zz = integrate(z, t, t + k * h, 4, &field)?.pop().unwrap().1;
        avg(&zz, t + k * h)
    };
    // Second-order stencils; one-sided when t is near 1 or near r.
    let dudt: Vec<f64> = if t + h <= 1.0 && t - h > r {
        let (p, m) = (shifted(1.0)?, shifted(-1.0)?);
        (0..z.len()).map(|i| (p[i] - m[i]) / (2.0 * h)).collect()
    } else if t - 2.0 * h > r {
        let (m1, m2) = (shifted(-1.0)?, shifted(-2.0)?);
        (0..z.len()).map(|i| (3.0 * u[i] - 4.0 * m1[i] + m2[i]) / (2.0 * h)).collect()
    } else if t + 2.0 * h <= 1.0 {
        let (p1, p2) = (shifted(1.0)?, shifted(2.0)?);
        (0..z.len()).map(|i| (-3.0 * u[i] + 4.0 * p1[i] - p2[i]) / (2.0 * h)).collect()
    } else {
        return Err(contract(format!("fd_step {h} too large for r={r}, t={t}")));
    };
    Ok((0..z.len()).map(|i| (u[i] - (v[i] - (t - r) * dudt[i])).abs()).fold(0.0, f64::max))
}
