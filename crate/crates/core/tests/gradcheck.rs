mod common;

use common::{random_tensor, rng};
use farfield_core::gradcheck::{
    assess_convergence, constant_logits, derivative_report, directional_derivative, fit_direction,
    random_direction, random_interior_masks, scalar_loss, smoothness_sweep_at, summarize, LossKind, ProbeActivation,
    ProbeConfig, ProbeLoss, ProbePipeline, ProbePoint, Verdict,
};
use farfield_core::simulation::SceneConfig;
use farfield_core::{Error, MaskKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(pipeline: ProbePipeline, activation: ProbeActivation) -> ProbeConfig {
    ProbeConfig {
        pipeline,
        activation,
        loss: LossKind::StftMse,
        n_directions: 3,
        scene: SceneConfig { seed: 3, channels: 2, duration: 1.0, ..SceneConfig::default() },
        ..ProbeConfig::default()
    }
}

#[test]
fn loss_oracles() {
    let mut r = rng(1);
    let x = random_tensor(&mut r, 5, 16, 2);
    let target = random_tensor(&mut r, 5, 16, 1);
    let mut acc = 0.0;
    for t in 0..5 {
        for b in 0..x.bins() {
            for m in 0..2 {
                acc += (x.get(t, b, m) - target.get(t, b, 0)).norm_sqr();
            }
        }
    }
    let n = (5 * x.bins() * 2) as f64;
    let got = scalar_loss(&x, &ProbeLoss::StftMse(target)).unwrap();
    assert!((got - acc / n).abs() < 1e-13 * (acc / n));
    let power: f64 = x.data().iter().map(|v| v.norm_sqr()).sum::<f64>() / n;
    assert!((scalar_loss(&x, &ProbeLoss::OutputPower).unwrap() - power).abs() < 1e-13 * power);
    assert_eq!(scalar_loss(&x, &ProbeLoss::StftMse(x.clone())).unwrap(), 0.0);
}

#[test]
fn difference_quotient_symmetries() {
    let probe = small(ProbePipeline::Full, ProbeActivation::Sigmoid).build().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let w = random_interior_masks(&probe, &mut r, false);
    let d = random_direction(&w, &mut r);
    let zero = d.scaled(0.0);
    assert_eq!(directional_derivative(&probe, &w, &zero, 1e-2).unwrap(), 0.0);
    let a = directional_derivative(&probe, &w, &d, 1e-2).unwrap();
    let b = directional_derivative(&probe, &w, &d.scaled(-1.0), 1e-2).unwrap();
    assert_eq!(a, -b);
    assert!((d.norm() - 1.0).abs() < 1e-12);
}

#[test]
fn convergence_verdicts() {
    let h = [0.4, 0.2, 0.1, 0.05];
    let flat = [2.0; 4];
    assert_eq!(assess_convergence(&h, &flat, &[1e-12; 4]), (None, Verdict::Exact));
    let quad: Vec<f64> = h.iter().map(|x| 1.0 + x * x).collect();
    let (order, verdict) = assess_convergence(&h, &quad, &[0.0; 4]);
    assert!((order.unwrap() - 2.0).abs() < 1e-9);
    assert_eq!(verdict, Verdict::Smooth);
    // Central differences of |x| at x = 0.03: quotients change abruptly once h passes the kink.
    let kink: Vec<f64> = h.iter().map(|&s| ((0.03f64 + s).abs() - (0.03f64 - s).abs()) / (2.0 * s)).collect();
    assert_eq!(assess_convergence(&h, &kink, &[0.0; 4]).1, Verdict::NonSmooth);
}

#[test]
fn interior_sigmoid_probes_converge() {
    for pipeline in [ProbePipeline::WpeOnly, ProbePipeline::MvdrOnly, ProbePipeline::Full] {
        let reports = small(pipeline, ProbeActivation::Sigmoid).run().unwrap();
        assert_eq!(reports.len(), 3);
        for r in &reports {
            assert!(matches!(r.verdict, Verdict::Smooth | Verdict::Exact), "{pipeline:?}: {:?}", r);
            assert!(r.order.map_or(true, |p| p >= 1.9));
            assert!(!r.flags.any());
            let last = *r.quotients.last().unwrap();
            assert!((r.extrapolated - last).abs() <= 1e-2 * last.abs().max(1e-12));
        }
    }
}

#[test]
fn clamp_boundary_is_flagged() {
    let cfg = ProbeConfig {
        pin_logit: Some(1.0),
        mask_kind: MaskKind::Sad,
        ..small(ProbePipeline::MvdrOnly, ProbeActivation::ClippedRelu1)
    };
    let reports = cfg.run().unwrap();
    assert!(reports.iter().all(|r| r.flags.activation_clamp));
    let s = summarize(&reports);
    assert_eq!(s.unexplained, 0);
    assert_eq!(s.probes, 3);
    assert_eq!(s.smooth + s.exact + s.flagged, 3);
}

#[test]
fn identity_probes_stay_in_range() {
    let probe = small(ProbePipeline::WpeOnly, ProbeActivation::Identity).build().unwrap();
    let w = constant_logits(&probe, 1.0, false);
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let d = random_direction(&w, &mut r);
    assert!(matches!(directional_derivative(&probe, &w, &d, 0.4), Err(Error::PerturbationOutOfRange)));
    let fitted = fit_direction(&w, &d, 0.4);
    assert!(directional_derivative(&probe, &w, &fitted, 0.4).is_ok());
    let report = derivative_report(&probe, &w, &fitted, 0).unwrap();
    assert_eq!(report.quotients.len(), probe.step_sizes.len());
    assert!(smoothness_sweep_at(&probe, 0, false, ProbePoint::RandomInterior).unwrap().is_empty());
}

#[test]
fn invalid_step_ladders_rejected() {
    for steps in [vec![0.1, 0.05], vec![0.1, 0.2, 0.05], vec![0.1, 0.05, 0.0]] {
        let cfg = ProbeConfig { step_sizes: steps, ..small(ProbePipeline::WpeOnly, ProbeActivation::Sigmoid) };
        assert!(cfg.build().is_err());
    }
}
