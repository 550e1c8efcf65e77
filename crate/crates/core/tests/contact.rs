use orbitlite_core::dynamics::{integrate, DynamicsSettings, DynamicsWorkspace, GroundContact, RigidParams};
use orbitlite_core::fixtures;
use orbitlite_core::sensing::foot_contact_read;
use orbitlite_core::spatial::Transform;

fn standing_pose() -> Vec<f64> {
    let mut q = vec![0.0; 18];
    q[2] = 2.0 * 0.25 * 0.6f64.cos();
    for leg in 0..4 {
        q[6 + 3 * leg + 1] = 0.6;
        q[6 + 3 * leg + 2] = -1.2;
    }
    q
}

#[test]
fn standing_quadruped_feet_carry_its_weight() {
    let m = fixtures::load("quadruped").unwrap();
    let params = RigidParams::nominal(&m);
    let settings = DynamicsSettings {
        ground: Some(GroundContact::default()),
        ..Default::default()
    };
    let mut ws = DynamicsWorkspace::new(&m);
    let target = standing_pose();
    let mut q = target.clone();
    q[2] += 0.02;
    let mut qd = vec![0.0; 18];
    let mut tau = vec![0.0; 18];
    for _ in 0..3000 {
        for d in 6..18 {
            tau[d] = 300.0 * (target[d] - q[d]) - 4.0 * qd[d];
        }
        integrate(&m, &params, &settings, &Transform::identity(), &mut q, &mut qd, &tau, &[], &[], 1e-3, &mut ws).unwrap();
    }
    let feet = foot_contact_read(&ws.contacts);
    assert!(feet.iter().all(|&(c, f)| c && f >= 0.0));
    let total: f64 = feet.iter().map(|f| f.1).sum();
    let weight = m.total_mass() * 9.81;
    assert!((total - weight).abs() < 0.02 * weight, "{total} vs {weight}");
}

#[test]
fn airborne_quadruped_reports_no_contact() {
    let m = fixtures::load("quadruped").unwrap();
    let params = RigidParams::nominal(&m);
    let settings = DynamicsSettings {
        ground: Some(GroundContact::default()),
        ..Default::default()
    };
    let mut ws = DynamicsWorkspace::new(&m);
    let mut q = standing_pose();
    q[2] += 1.0;
    let mut qd = vec![0.0; 18];
    integrate(&m, &params, &settings, &Transform::identity(), &mut q, &mut qd, &[0.0; 18], &[], &[], 1e-3, &mut ws).unwrap();
    assert!(foot_contact_read(&ws.contacts).iter().all(|&(c, f)| !c && f == 0.0));
}
