//! Loss-level oracles: stop-gradient placement, head isolation, guidance
//! degeneracy and which inputs carry a tangent.

use imf_autodiff::{grad, ParamStore, Tape, Tensor};
use imf_core::data::{sample_batch, Batch, DatasetSpec};
use imf_core::guidance::{guided_loss_and_grad, guided_targets, GuidanceConfig};
use imf_core::nets::{forward_u, init_params, Arch, CondBatch, CondVars, ConditioningMode, NetConfig, TokenCounts};
use imf_core::objectives::{adaptive_weight, loss_and_grad, sample_t_r, AdaptiveWeight, Loss, LossInputs, TimeSamplerConfig, VMode};
use imf_core::rng::{stream, Domain};
use rand::Rng;
use rand_distr::StandardNormal;

fn net(arch: Arch, mode: ConditioningMode, aux: usize) -> NetConfig {
    NetConfig {
        arch,
        depth: 3,
        width: 8,
        heads: 2,
        data_dim: 2,
        conditioning_mode: mode,
        tokens_per_condition: TokenCounts { class: 2, time: 1, guidance: 1, interval: 1 },
        aux_head_depth: aux,
        num_classes: 8,
        embed_dim: 4,
        omega_conditioning: true,
        mlp_ratio: 2,
    }
}

/// Init plus Gaussian noise everywhere, so zero-initialized gates are live.
fn live_params(cfg: &NetConfig, seed: u64) -> ParamStore {
    let mut p = init_params(cfg, seed).unwrap();
    let mut rng = stream(seed, Domain::Test, 1);
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += 0.2 * rng.sample::<f64, _>(StandardNormal));
    }
    p
}

fn guided_inputs(seed: u64, n: usize) -> (Batch, CondBatch) {
    let ds = DatasetSpec::eight_gaussians();
    let batch = sample_batch(&ds, n, seed, 0).unwrap();
    let labels = batch.labels.clone().unwrap();
    let cond = imf_core::guidance::draw_guided_conditions(seed, 0, &labels, &TimeSamplerConfig::default(), &GuidanceConfig::default());
    (batch, cond)
}

fn max_abs_diff(a: &ParamStore, b: &ParamStore) -> f64 {
    a.iter()
        .map(|(k, t)| t.data().iter().zip(b.get(k).unwrap().data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .fold(0.0, f64::max)
}

#[test]
fn adaptive_weight_carries_no_gradient() {
    let aw = AdaptiveWeight { p: 1.0, c: 1e-3 };
    let mut store = ParamStore::new();
    let err = Tensor::from_vec(vec![3, 2], vec![0.3, -1.2, 0.05, 0.4, 2.0, -0.7]);
    store.insert("err", err.clone());
    let g = grad(|_, p| adaptive_weight(p.get("err"), &aw).unwrap().0, &store).unwrap();
    let g = g.get("err").unwrap();
    // Oracle with the weight treated as a constant: 2 w_i err_ij / n.
    for i in 0..3 {
        let row = err.row(i);
        let sq: f64 = row.iter().map(|v| v * v).sum();
        let w = 1.0 / (sq + aw.c);
        for j in 0..2 {
            let expect = 2.0 * w * row[j] / 3.0;
            assert!((g.data()[i * 2 + j] - expect).abs() < 1e-12);
        }
    }
    // Differentiating through the weight would give a near-zero gradient here
    // (the loss is almost flat in err); central differences see exactly that.
    let full = |e: &Tensor| {
        (0..3)
            .map(|i| {
                let sq: f64 = e.row(i).iter().map(|v| v * v).sum();
                sq / (sq + aw.c)
            })
            .sum::<f64>()
            / 3.0
    };
    let h = 1e-6;
    let mut plus = err.clone();
    plus.data_mut()[0] += h;
    let mut minus = err.clone();
    minus.data_mut()[0] -= h;
    let fd = (full(&plus) - full(&minus)) / (2.0 * h);
    assert!((g.data()[0] - fd).abs() > 0.1, "grad {} fd {}", g.data()[0], fd);
}

#[test]
fn boundary_mode_ignores_aux_head() {
    for arch in [Arch::Mlp, Arch::Transformer] {
        let cfg = net(arch, ConditioningMode::InContext, 1);
        let params = live_params(&cfg, 4);
        let (batch, cond) = guided_inputs(4, 6);
        let inp = LossInputs { batch: &batch, cond: &cond };
        let aw = AdaptiveWeight::default();
        let (r0, g0) = loss_and_grad(&cfg, &params, &inp, Loss::Imf(VMode::Boundary), &aw).unwrap();
        let mut moved = params.clone();
        for (name, t) in moved.iter_mut() {
            if name.starts_with("aux.") {
                t.data_mut().iter_mut().for_each(|v| *v = 3.0 - *v);
            }
        }
        let (r1, g1) = loss_and_grad(&cfg, &moved, &inp, Loss::Imf(VMode::Boundary), &aw).unwrap();
        assert_eq!(r0, r1);
        for (name, t) in g0.iter() {
            if name.starts_with("aux.") {
                assert!(t.data().iter().all(|v| *v == 0.0), "{name}");
            } else {
                assert_eq!(t, g1.get(name).unwrap(), "{name}");
            }
        }
        // The aux-head objective does train those weights.
        let (_, ga) = loss_and_grad(&cfg, &params, &inp, Loss::Imf(VMode::AuxHead), &aw).unwrap();
        assert!(ga.iter().any(|(n, t)| n.starts_with("aux.") && t.data().iter().any(|v| *v != 0.0)));
    }
}

#[test]
fn unit_guidance_matches_unguided_objective() {
    for (arch, mode) in [(Arch::Mlp, ConditioningMode::AdalnZero), (Arch::Transformer, ConditioningMode::InContext)] {
        let cfg = net(arch, mode, 0);
        let params = live_params(&cfg, 9);
        let (batch, mut cond) = guided_inputs(9, 8);
        cond.omega = vec![1.0; cond.len()];
        let aw = AdaptiveWeight::default();
        let (rg, gg) = guided_loss_and_grad(&cfg, &params, &batch, &cond, &aw).unwrap();
        let inp = LossInputs { batch: &batch, cond: &cond };
        let (ru, gu) = loss_and_grad(&cfg, &params, &inp, Loss::Imf(VMode::Boundary), &aw).unwrap();
        assert!((rg.total - ru.total).abs() <= 1e-12 * ru.total.abs().max(1.0));
        assert!(max_abs_diff(&gg, &gu) <= 1e-12);
        let (v_g, _) = guided_targets(&cfg, &params, &batch, &cond).unwrap();
        assert_eq!(v_g, batch.e.zip_map(&batch.x, |e, x| e - x));
    }
}

#[test]
fn guidance_inputs_enter_with_zero_tangent() {
    let cfg = net(Arch::Transformer, ConditioningMode::InContext, 0);
    let params = live_params(&cfg, 2);
    let (batch, cond) = guided_inputs(2, 5);
    let n = cond.len();
    let z = batch.x.clone();
    let v = batch.e.clone();
    let col = |c: &[f64]| Tensor::from_vec(vec![c.len(), 1], c.to_vec());

    let tape = Tape::new();
    let p = params.on_tape_frozen(&tape);
    let u = forward_u(&cfg, &p, tape.dual(z.clone(), v.clone()), &CondVars::with_unit_time_tangent(&tape, &cond)).unwrap();
    let reference = u.tangent();

    // Same call with every condition made an explicit dual; only t moves.
    let zeros = Tensor::zeros(&[n, 1]);
    let explicit = CondVars {
        r: tape.dual(col(&cond.r), zeros.clone()),
        t: tape.dual(col(&cond.t), Tensor::ones(&[n, 1])),
        class: cond.class.clone(),
        omega: tape.dual(col(&cond.omega), zeros.clone()),
        t_min: tape.dual(col(&cond.t_min), zeros.clone()),
        t_max: tape.dual(col(&cond.t_max), zeros),
    };
    let u2 = forward_u(&cfg, &p, tape.dual(z.clone(), v.clone()), &explicit).unwrap();
    // Zero tangents contribute nothing (up to summation order).
    for (a, b) in u2.tangent().data().iter().zip(reference.data()) {
        assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
    }

    // Oracle: central difference along (z + h v, t + h) with r, omega and the
    // interval held fixed.
    let h = 1e-5;
    let shifted = |s: f64| {
        let mut c = cond.clone();
        c.t.iter_mut().for_each(|t| *t += s);
        let zz = z.zip_map(&v, |a, b| a + s * b);
        imf_core::nets::eval_u(&cfg, &params, &zz, &c).unwrap()
    };
    let fd = shifted(h).zip_map(&shifted(-h), |a, b| (a - b) / (2.0 * h));
    for (a, b) in reference.data().iter().zip(fd.data()) {
        assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{a} vs {b}");
    }

    // And omega does influence u, so a nonzero omega tangent would change the result.
    let tape = Tape::new();
    let p = params.on_tape_frozen(&tape);
    let with_omega = CondVars { omega: tape.dual(col(&cond.omega), Tensor::ones(&[n, 1])), ..CondVars::with_unit_time_tangent(&tape, &cond) };
    let u3 = forward_u(&cfg, &p, tape.dual(z, v), &with_omega).unwrap();
    assert_ne!(u3.tangent(), reference);
}

#[test]
fn time_sampler_respects_ordering_for_any_ratio() {
    let mut rng = stream(5, Domain::Test, 0);
    for ratio in [0.0, 0.25, 1.0] {
        let cfg = TimeSamplerConfig { ratio_r_neq_t: ratio, ..Default::default() };
        let (t, r) = sample_t_r(&mut rng, 20_000, &cfg);
        assert!(t.iter().zip(&r).all(|(t, r)| 0.0 <= *r && r <= t && *t <= 1.0));
        let frac = t.iter().zip(&r).filter(|(t, r)| t != r).count() as f64 / 20_000.0;
        assert!((frac - ratio).abs() < 0.02, "{ratio}: {frac}");
    }
}
