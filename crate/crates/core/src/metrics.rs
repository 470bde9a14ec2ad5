//! Sample-quality metrics, loss-series statistics and guidance sweeps.

use imf_autodiff::{pairwise_sum, ParamStore, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::DatasetSpec;
use crate::error::{contract, Result};
use crate::guidance::GuidanceSample;
use crate::nets::{ConditionSet, NetConfig};
use crate::par::map_indexed;
use crate::rng::{stream, Domain};
use crate::sampler::sample_1nfe;

pub const DEFAULT_PROJECTIONS: usize = 128;

/// Exact 2-Wasserstein distance between equal-size 1D empirical sets.
fn w2_sorted(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let sq: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).collect();
    (pairwise_sum(&sq) / a.len() as f64).sqrt()
}

fn project(x: &Tensor, dir: &[f64]) -> Vec<f64> {
    (0..x.shape()[0]).map(|i| x.row(i).iter().zip(dir).map(|(a, b)| a * b).sum()).collect()
}

/// Mean over `n_proj` random unit directions of the 1D W2 distance between
/// the projected sets. One-dimensional inputs use the exact sorted distance.
pub fn sliced_wasserstein(a: &Tensor, b: &Tensor, n_proj: usize, seed: u64) -> Result<f64> {
    if a.ndim() != 2 || b.ndim() != 2 || a.shape() != b.shape() {
        return Err(contract(format!("sliced_wasserstein: shapes {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (m, d) = (a.shape()[0], a.shape()[1]);
    if m == 0 || d == 0 {
        return Err(contract("sliced_wasserstein: empty sets"));
    }
    if d == 1 {
        return Ok(w2_sorted(a.data().to_vec(), b.data().to_vec()));
    }
    if n_proj == 0 {
        return Err(contract("sliced_wasserstein: n_proj must be >= 1"));
    }
    let mut rng = stream(seed, Domain::Projections, 0);
    let dirs: Vec<Vec<f64>> = (0..n_proj)
        .map(|_| loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect();
    let per = map_indexed(n_proj, |k| w2_sorted(project(a, &dirs[k]), project(b, &dirs[k])));
    Ok(pairwise_sum(&per) / n_proj as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesStats {
    /// Unbiased sample variance.
    pub variance: f64,
    /// Least-squares slope against the index.
    pub slope: f64,
    pub n: usize,
}

pub fn loss_series_stats(series: &[f64]) -> Result<SeriesStats> {
    let n = series.len();
    if n < 2 {
        return Err(contract("loss series needs at least 2 points"));
    }
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;
    let xm = (nf - 1.0) / 2.0;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for (i, &y) in series.iter().enumerate() {
        let dx = i as f64 - xm;
        sxx += dx * dx;
        sxy += dx * (y - mean);
        syy += (y - mean) * (y - mean);
    }
    Ok(SeriesStats { variance: syy / (nf - 1.0), slope: sxy / sxx, n })
}

/// Per-class quota for `m` samples: `m / C` each, remainder to the first
/// classes. Unlabeled data is one unconditional group.
fn quotas(dataset: &DatasetSpec, m: usize) -> Vec<(Option<usize>, usize)> {
    let c = dataset.num_classes();
    if c == 0 {
        return vec![(None, m)];
    }
    (0..c).map(|k| (Some(k), m / c + usize::from(k < m % c))).collect()
}

/// Held-out data matching the evaluation quotas; `draw` selects an
/// independent copy.
pub fn reference_set(dataset: &DatasetSpec, m: usize, seed: u64, draw: u64) -> Tensor {
    let parts: Vec<Tensor> = quotas(dataset, m)
        .iter()
        .enumerate()
        .map(|(j, &(class, q))| {
            let mut rng = stream(seed, Domain::Eval, draw.wrapping_mul(1 << 20).wrapping_add(j as u64));
            dataset.sample_points(q, class, &mut rng).0
        })
        .collect();
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Distance between two independent data draws of size `m`.
pub fn self_distance(dataset: &DatasetSpec, m: usize, seed: u64) -> Result<f64> {
    sliced_wasserstein(&reference_set(dataset, m, seed, 0), &reference_set(dataset, m, seed, 1), DEFAULT_PROJECTIONS, seed)
}

/// 1-NFE samples with the evaluation quotas under guidance setting `g`.
pub fn generate_eval_set(
    net: &NetConfig,
    params: &ParamStore,
    dataset: &DatasetSpec,
    g: &GuidanceSample,
    m: usize,
    seed: u64,
) -> Result<Tensor> {
    let mut parts = Vec::new();
    for (j, (class, q)) in quotas(dataset, m).into_iter().enumerate() {
        let tpl = ConditionSet::new(0.0, 1.0).with_class(class).with_guidance(g.omega, g.t_min, g.t_max);
        let s = sample_1nfe(net, params, &tpl, q, seed ^ ((j as u64 + 1) << 40))?;
        parts.push(s.samples);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(Tensor::concat(&refs, 0))
}

/// Sliced W2 between generated samples and held-out data.
pub fn conditional_eval(
    net: &NetConfig,
    params: &ParamStore,
    dataset: &DatasetSpec,
    g: &GuidanceSample,
    m: usize,
    seed: u64,
) -> Result<f64> {
    if net.data_dim != dataset.dim {
        return Err(contract("network and dataset dimensions differ"));
    }
    let gen = generate_eval_set(net, params, dataset, g, m, seed)?;
    sliced_wasserstein(&gen, &reference_set(dataset, m, seed, 0), DEFAULT_PROJECTIONS, seed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub omega: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub sw2: f64,
}

/// Cartesian grid sorted by `(t_min, t_max, omega)` with duplicates removed;
/// also returns how many duplicates were dropped.
pub fn sweep_points(omegas: &[f64], intervals: &[(f64, f64)]) -> (Vec<GuidanceSample>, usize) {
    let mut pts: Vec<GuidanceSample> = intervals
        .iter()
        .flat_map(|&(t_min, t_max)| omegas.iter().map(move |&omega| GuidanceSample { omega, t_min, t_max }))
        .collect();
    let key = |g: &GuidanceSample| (g.t_min, g.t_max, g.omega);
    pts.sort_by(|a, b| {
        let (x, y) = (key(a), key(b));
        x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)).then(x.2.total_cmp(&y.2))
    });
    let before = pts.len();
    pts.dedup_by(|a, b| key(a) == key(b));
    let dups = before - pts.len();
    (pts, dups)
}

/// One model, many guidance settings: sliced W2 for each grid point.
pub fn cfg_sweep(
    net: &NetConfig,
    params: &ParamStore,
    omegas: &[f64],
    intervals: &[(f64, f64)],
    dataset: &DatasetSpec,
    m: usize,
    seed: u64,
) -> Result<(Vec<SweepRow>, usize)> {
    if !net.omega_conditioning {
        return Err(contract("cfg_sweep needs an omega-conditioned model"));
    }
    let (pts, dups) = sweep_points(omegas, intervals);
    for g in &pts {
        ConditionSet::new(0.0, 1.0).with_guidance(g.omega, g.t_min, g.t_max).validate()?;
    }
    let mut rows = Vec::with_capacity(pts.len());
    for g in pts {
        let sw2 = conditional_eval(net, params, dataset, &g, m, seed)?;
        rows.push(SweepRow { omega: g.omega, t_min: g.t_min, t_max: g.t_max, sw2 });
    }
    Ok((rows, dups))
}
