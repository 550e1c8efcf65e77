use orbitlite_core::softbody::{
    build_cloth, simulate_beam, xpbd_step, BeamScenario, ParticleSystem, BEAM_DT, BEAM_DURATION, BEAM_ITERATIONS,
};
use orbitlite_core::spatial::Vec3;
use proptest::prelude::*;

fn perturbed_cloth(offsets: &[f64]) -> ParticleSystem {
    let mut s = build_cloth(5, 4, 0.1, 0.5, 0.0).unwrap();
    s.gravity = Vec3::zeros();
    for (i, p) in s.x.iter_mut().enumerate() {
        p.z += offsets[i % offsets.len()];
        p.x += 0.5 * offsets[(i + 3) % offsets.len()];
    }
    s
}

#[test]
fn residual_decreases_across_iterations() {
    let mut s = perturbed_cloth(&[0.01, -0.02, 0.015, 0.0, -0.01, 0.02, 0.005]);
    let dt = 1e-3;
    s.predict(dt);
    let mut last = s.max_residual();
    for _ in 0..30 {
        s.iterate(dt);
        let r = s.max_residual();
        assert!(r <= last + 1e-15, "{r} > {last}");
        last = r;
    }
    assert!(last < 1e-3);
}

#[test]
fn beam_oscillation_decays() {
    let scenario = BeamScenario::default();
    let r = simulate_beam(&scenario, BEAM_DURATION, BEAM_DT, BEAM_ITERATIONS, 10).unwrap();
    assert!(r.peaks.len() >= 3, "{:?}", r.peaks);
    assert!(r.peaks.windows(2).all(|w| w[1] < w[0]));
    assert!(r.static_sag > 0.0);
    assert!(r.decay_ratio > 0.0 && r.decay_ratio < 1.0);
}

#[test]
fn undamped_beam_keeps_oscillating() {
    let mut scenario = BeamScenario::default();
    scenario.damping = 0.0;
    let r = simulate_beam(&scenario, 2.0, BEAM_DT, BEAM_ITERATIONS, 10).unwrap();
    let damped = simulate_beam(&BeamScenario::default(), 2.0, BEAM_DT, BEAM_ITERATIONS, 10).unwrap();
    assert!(r.decay_ratio > damped.decay_ratio);
}

#[test]
fn beam_sag_converges_with_resolution() {
    let base = BeamScenario::default();
    let s8 = simulate_beam(&base.with_resolution(8), BEAM_DURATION, BEAM_DT, BEAM_ITERATIONS, 10).unwrap();
    let s16 = simulate_beam(&base.with_resolution(16), BEAM_DURATION, BEAM_DT, BEAM_ITERATIONS, 10).unwrap();
    let gap = (s8.static_sag - s16.static_sag).abs() / s16.static_sag;
    assert!(gap < 0.10, "{} vs {}", s8.static_sag, s16.static_sag);
}

#[test]
fn beam_sag_matches_refined_step() {
    let scenario = BeamScenario::default();
    let coarse = simulate_beam(&scenario, BEAM_DURATION, BEAM_DT, BEAM_ITERATIONS, 10).unwrap();
    let fine = simulate_beam(&scenario, BEAM_DURATION, BEAM_DT / 10.0, 4 * BEAM_ITERATIONS, 100).unwrap();
    let gap = (coarse.static_sag - fine.static_sag).abs() / fine.static_sag;
    assert!(gap < 0.05, "{} vs {}", coarse.static_sag, fine.static_sag);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn free_cloth_conserves_center_of_mass(offsets in proptest::collection::vec(-0.02f64..0.02, 7), iters in 1usize..20) {
        let mut s = perturbed_cloth(&offsets);
        let c0 = s.center_of_mass();
        for _ in 0..5 {
            xpbd_step(&mut s, 1e-3, iters).unwrap();
        }
        prop_assert!((s.center_of_mass() - c0).norm() < 1e-12);
    }

    #[test]
    fn constraint_projection_is_deterministic(offsets in proptest::collection::vec(-0.02f64..0.02, 7)) {
        let mut a = perturbed_cloth(&offsets);
        let mut b = a.clone();
        for _ in 0..10 {
            xpbd_step(&mut a, 1e-3, 8).unwrap();
            xpbd_step(&mut b, 1e-3, 8).unwrap();
        }
        prop_assert_eq!(a.x, b.x);
    }
}
