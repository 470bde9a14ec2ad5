//! Synthetic desk-scale datasets.

use imf_autodiff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::oracle::GaussianSpec;
use crate::rng::{stream, Domain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetKind {
    Gaussian { spec: GaussianSpec },
    GaussianMixture { k: usize, radius: f64, comp_sigma: f64 },
    TwoMoons { noise: f64 },
    Checkerboard { cells: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub dim: usize,
    #[serde(default)]
    pub labeled: bool,
}

impl DatasetSpec {
    /// The default conditional task: eight components on a radius-4 circle.
    pub fn eight_gaussians() -> Self {
        DatasetSpec {
            kind: DatasetKind::GaussianMixture { k: 8, radius: 4.0, comp_sigma: 0.3 },
            dim: 2,
            labeled: true,
        }
    }

    pub fn point_mass_1d(mu: f64) -> Self {
        DatasetSpec {
            kind: DatasetKind::Gaussian { spec: GaussianSpec { mu: vec![mu], sigma_x: 0.0 } },
            dim: 1,
            labeled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(contract(format!("dataset dim must be 1 or 2, got {}", self.dim)));
        }
        match &self.kind {
            DatasetKind::Gaussian { spec } => {
                if spec.mu.len() != self.dim {
                    return Err(contract("gaussian mu length must equal dim"));
                }
                if !(spec.sigma_x >= 0.0) {
                    return Err(contract("sigma_x must be >= 0"));
                }
                if self.labeled {
                    return Err(contract("a single gaussian has no discrete components to label"));
                }
            }
            DatasetKind::GaussianMixture { k, radius, comp_sigma } => {
                if *k < 2 {
                    return Err(contract("gaussian_mixture needs k >= 2"));
                }
                if self.dim != 2 {
                    return Err(contract("gaussian_mixture is 2-D"));
                }
                if !(*radius > 0.0) || !(*comp_sigma >= 0.0) {
                    return Err(contract("gaussian_mixture needs radius > 0 and comp_sigma >= 0"));
                }
            }
            DatasetKind::TwoMoons { noise } => {
                if self.dim != 2 || self.labeled || !(*noise >= 0.0) {
                    return Err(contract("two_moons is unlabeled 2-D with noise >= 0"));
                }
            }
            DatasetKind::Checkerboard { cells } => {
                if self.dim != 2 || self.labeled || *cells < 2 {
                    return Err(contract("checkerboard is unlabeled 2-D with cells >= 2"));
                }
            }
        }
        Ok(())
    }

    /// Number of classes when labeled, else 0.
    pub fn num_classes(&self) -> usize {
        match (&self.kind, self.labeled) {
            (DatasetKind::GaussianMixture { k, .. }, true) => *k,
            _ => 0,
        }
    }

    /// Component means of a mixture.
    pub fn mixture_means(&self) -> Vec<[f64; 2]> {
        match &self.kind {
            DatasetKind::GaussianMixture { k, radius, .. } => (0..*k)
                .map(|i| {
                    let a = 2.0 * std::f64::consts::PI * i as f64 / *k as f64;
                    [radius * a.cos(), radius * a.sin()]
                })
                .collect(),
            _ => vec![],
        }
    }

    /// Draw `n` points; `class` pins the mixture component.
    pub fn sample_points(
        &self,
        n: usize,
        class: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> (Tensor, Vec<usize>) {
        let d = self.dim;
        let mut xs = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let normal = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
        for _ in 0..n {
            match &self.kind {
                DatasetKind::Gaussian { spec } => {
                    for j in 0..d {
                        xs.push(spec.mu[j] + spec.sigma_x * normal(rng));
                    }
                    labels.push(0);
                }
                DatasetKind::GaussianMixture { k, radius, comp_sigma } => {
                    let c = class.unwrap_or_else(|| rng.random_range(0..*k));
                    let a = 2.0 * std::f64::consts::PI * c as f64 / *k as f64;
                    xs.push(radius * a.cos() + comp_sigma * normal(rng));
                    xs.push(radius * a.sin() + comp_sigma * normal(rng));
                    labels.push(c);
                }
                DatasetKind::TwoMoons { noise } => {
                    let theta = rng.random_range(0.0..std::f64::consts::PI);
                    let (px, py) = if rng.random_bool(0.5) {
                        (theta.cos(), theta.sin())
                    } else {
                        (1.0 - theta.cos(), 0.5 - theta.sin())
                    };
                    xs.push(px + noise * normal(rng));
                    xs.push(py + noise * normal(rng));
                    labels.push(0);
                }
                DatasetKind::Checkerboard { cells } => {
                    let cells = *cells;
                    let side = 4.0 / cells as f64;
                    let (ix, iy) = loop {
                        let ix = rng.random_range(0..cells);
                        let iy = rng.random_range(0..cells);
                        if (ix + iy) % 2 == 0 {
                            break (ix, iy);
                        }
                    };
                    xs.push(-2.0 + side * (ix as f64 + rng.random::<f64>()));
                    xs.push(-2.0 + side * (iy as f64 + rng.random::<f64>()));
                    labels.push(0);
                }
            }
        }
        (Tensor::from_vec(vec![n, d], xs), labels)
    }
}

/// Paired data, prior noise and optional labels for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub e: Tensor,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// `n` i.i.d. data draws with fresh standard-normal noise. Data and noise
/// come from separate streams keyed by `(seed, counter)`.
pub fn sample_batch(spec: &DatasetSpec, n: usize, seed: u64, counter: u64) -> Result<Batch> {
    if n == 0 {
        return Err(contract("batch size must be >= 1"));
    }
    let mut data_rng = stream(seed, Domain::Data, counter);
    let (x, labels) = spec.sample_points(n, None, &mut data_rng);
    let e = randn(&mut stream(seed, Domain::Noise, counter), &[n, spec.dim]);
    Ok(Batch { x, e, labels: spec.labeled.then_some(labels) })
}
