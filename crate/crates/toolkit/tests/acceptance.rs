//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs without the libtest harness so every line reaches the terminal.
//! Exits nonzero when a criterion fails on hardware it applies to.

use std::f64::consts::PI;
use std::time::Instant;

use nalgebra::DMatrix;
use orbitlite_core::dynamics::{forward_dynamics, inverse_dynamics, step, total_energy, DynamicsSettings, RigidParams};
use orbitlite_core::fixtures;
use orbitlite_core::model::{forward_kinematics, geometric_jacobian, BatchConfiguration, RobotDescription};
use orbitlite_core::sensing::{SensorKind, SensorSpec};
use orbitlite_core::softbody::*;
use orbitlite_core::spatial::{rotation_vector, Vec3};
use orbitlite_core::tasks::*;
use orbitlite_core::world::*;
use orbitlite_toolkit::{bench, episode_log, record};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_FIXTURES: [&str; 4] = ["pendulum", "planar2", "panda", "ur6"];
/// Cores of the reference machine the throughput criterion assumes.
const REFERENCE_CORES: usize = 8;

struct Outcome {
    pass: bool,
    detail: String,
    /// False when the criterion is stated for hardware this run lacks.
    applies: bool,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail, applies: true }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-s..s)).collect()
}

fn cfg1(n: usize, q: Vec<f64>, qd: Vec<f64>) -> BatchConfiguration {
    BatchConfiguration::from_arrays(1, n, q, qd).unwrap()
}

fn dynamics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut round_trip = 0.0f64;
    for name in ORACLE_FIXTURES {
        let m = fixtures::load(name).unwrap();
        let n = m.num_dofs();
        for _ in 0..100 {
            let cfg = cfg1(n, uniform(&mut rng, n, 1.5), uniform(&mut rng, n, 2.0));
            let qdd = uniform(&mut rng, n, 5.0);
            let tau = inverse_dynamics(&m, &cfg, &qdd).unwrap();
            let back = forward_dynamics(&m, &cfg, &tau).unwrap();
            round_trip = back.iter().zip(&qdd).fold(round_trip, |w, (a, b)| w.max((a - b).abs()));
        }
    }
    // unit point mass on a unit massless rod
    let pend = fixtures::load("pendulum").unwrap();
    let mut gravity = 0.0f64;
    for _ in 0..100 {
        let th = rng.gen_range(-PI..PI);
        let tau = inverse_dynamics(&pend, &cfg1(1, vec![th], vec![0.0]), &[0.0]).unwrap();
        gravity = gravity.max((tau[0] - 1.0 * 9.81 * 1.0 * th.sin()).abs());
    }
    let params = RigidParams::nominal(&pend);
    let settings = DynamicsSettings::default();
    let mut cfg = cfg1(1, vec![1.0], vec![0.0]);
    let e0 = total_energy(&pend, &params, &cfg.q, &cfg.qd, &settings.gravity);
    let scale = 9.81 * (1.0 - 1.0f64.cos());
    let mut drift = 0.0f64;
    for _ in 0..10_000 {
        step(&pend, &mut cfg, &[0.0], 1e-3, &settings).unwrap();
        drift = drift.max((total_energy(&pend, &params, &cfg.q, &cfg.qd, &settings.gravity) - e0).abs() / scale);
    }
    outcome(
        round_trip < 1e-8 && gravity < 1e-9 && drift < 0.01,
        format!("round trip {round_trip:.2e} (< 1e-8), gravity torque {gravity:.2e} (< 1e-9), energy drift {:.3}% (< 1%)", 100.0 * drift),
    )
}

fn fd_jacobian(m: &RobotDescription, q: &[f64], link: usize, point: &Vec3) -> DMatrix<f64> {
    let n = m.num_dofs();
    let h = 1e-6;
    let mut out = DMatrix::zeros(6, n);
    for d in 0..n {
        let (mut qp, mut qm) = (q.to_vec(), q.to_vec());
        qp[d] += h;
        qm[d] -= h;
        let pp = forward_kinematics(m, &cfg1(n, qp, vec![0.0; n])).unwrap();
        let pm = forward_kinematics(m, &cfg1(n, qm, vec![0.0; n])).unwrap();
        let lin = (pp[link].transform_point(point) - pm[link].transform_point(point)) / (2.0 * h);
        let ang = rotation_vector(&(pp[link].orientation * pm[link].orientation.inverse())) / (2.0 * h);
        for r in 0..3 {
            out[(r, d)] = lin[r];
            out[(r + 3, d)] = ang[r];
        }
    }
    out
}

fn jacobian_fd() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for name in fixtures::NAMES {
        let m = fixtures::load(name).unwrap();
        let n = m.num_dofs();
        let tip = m.links.len() - 1;
        for _ in 0..100 {
            let q = uniform(&mut rng, n, 1.5);
            let point = Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            let j = geometric_jacobian(&m, &cfg1(n, q.clone(), vec![0.0; n]), &m.links[tip].name, &point).unwrap().remove(0);
            let fd = fd_jacobian(&m, &q, tip, &point);
            worst = worst.max((&j - &fd).norm() / j.norm().max(1.0));
        }
    }
    outcome(worst < 1e-5, format!("worst relative error {worst:.2e} (< 1e-5)"))
}

fn multirate_scene() -> SceneConfig {
    let mut panda = RobotSpec::fixture("panda", "panda");
    panda.initial_q = Some(arm_info("panda").unwrap().home);
    SceneConfig {
        world: WorldConfig {
            physics_rate: 1000.0,
            gravity: [0.0, 0.0, -9.81],
            ground_contact: false,
            table_height: 0.0,
            robots: vec![panda],
            objects: vec![],
            sensors: vec![SensorSpec::new("joints", SensorKind::JointState, &[], 200.0)],
            markers: vec![],
            grasp: GraspSettings::default(),
        },
        graph: GraphConfig {
            nodes: vec![NodeSpec {
                name: "ik".into(),
                kind: NodeKind::Action,
                rate: 50.0,
                op: NodeOp::DiffIk {
                    robot: "panda".into(),
                    group: "arm".into(),
                    link: "panda_tcp".into(),
                    offset: [0.0; 3],
                    params: Default::default(),
                    command: PoseCommand::Delta,
                },
            }],
            edges: vec![EdgeSpec::new("ik.joint_targets", "actuator:panda.arm")],
        },
        env: EnvConfig {
            action_port: vec!["ik.command".into()],
            observation_ports: vec!["sensor:joints".into()],
            reward: "none".into(),
            termination: "none".into(),
            control_rate: 50.0,
            episode_length: 1000,
            randomization: vec![],
        },
    }
}

fn multirate() -> Outcome {
    let mut env = Env::build(&multirate_scene(), 1, &HookRegistry::default()).unwrap();
    let mut exact = true;
    for k in 0..25 {
        env.reset_counters();
        let s = 1e-3 * (k as f64).sin();
        env.step(&[s, -s, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let c = env.counters(0);
        exact &= c.substeps == 20 && c.ik_solves == 1 && c.sensor_refreshes == [4];
    }
    outcome(exact, format!("decimation {}, per control step: 20 substeps, 1 IK solve, 4 sensor refreshes over 25 steps", env.decimation()))
}

fn goal_of(view: &EnvView) -> Vec3 {
    let g = view.port("goal.value").unwrap();
    Vec3::new(g[0], g[1], g[2])
}

fn reach() -> Outcome {
    let cfg = TaskConfig::new(TaskId::Reach);
    let n = 100;
    let mut env = make_task(&cfg, n).unwrap();
    env.seed(2024);
    let mut pool = ExpertPool::new(&cfg, n).unwrap();
    let limit = (2.0 * cfg.control_rate) as usize;
    let mut best = vec![f64::INFINITY; n];
    let mut live = vec![true; n];
    for _ in 0..limit {
        let r = env.step(&pool.act(&env)).unwrap();
        for i in 0..n {
            if live[i] && r.dones[i] {
                live[i] = false;
            }
            if live[i] {
                let v = env.view(i);
                let d = (v.gripper_pose(0).unwrap().position - goal_of(&v)).norm();
                best[i] = best[i].min(d);
            }
        }
    }
    let ok = best.iter().filter(|d| **d < 1e-3).count();
    outcome(ok >= 99, format!("{ok}/100 episodes within 1e-3 m inside 2 s (>= 99)"))
}

/// Successes in the first episode of every env, and those that also saw
/// the cabinet seal break.
fn expert_episodes(task: TaskId, n: usize, seed: u64) -> (usize, usize) {
    let cfg = TaskConfig::new(task);
    let mut env = make_task(&cfg, n).unwrap();
    env.seed(seed);
    let mut pool = ExpertPool::new(&cfg, n).unwrap();
    let cab = env.view(0).articulation(CABINET);
    let mut live = vec![true; n];
    let mut broke = vec![false; n];
    let (mut successes, mut with_break) = (0, 0);
    while live.iter().any(|l| *l) {
        let r = env.step(&pool.act(&env)).unwrap();
        pool.observe_dones(&r.dones);
        for i in 0..n {
            if !live[i] {
                continue;
            }
            if r.dones[i] {
                live[i] = false;
                if r.infos[i].success {
                    successes += 1;
                    with_break += broke[i] as usize;
                }
            } else if let Some(c) = cab {
                broke[i] |= env.view(i).seal_broken(c, 0) == Some(true);
            }
        }
    }
    (successes, with_break)
}

fn experts() -> Outcome {
    let (lift, _) = expert_episodes(TaskId::Lift, 100, 7);
    let (drawer, broke) = expert_episodes(TaskId::DrawerOpen, 100, 7);
    outcome(
        lift >= 95 && drawer >= 95 && broke == drawer,
        format!("lift {lift}/100, drawer {drawer}/100 (>= 95); breakaway seen in {broke}/{drawer} drawer successes"),
    )
}

fn throughput() -> Outcome {
    let sizes = [1, 4, 16, 64, 256, 1024];
    let rows = bench::bench(&TaskConfig::new(TaskId::Reach), &sizes, 100, 0);
    let rates: Vec<f64> = rows.iter().map(|r| r.env_steps_per_sec).collect();
    let through_256 = &rates[..5];
    let monotone = through_256.windows(2).all(|w| w[1] >= w[0]);
    let speedup = rates[4] / rates[0];
    let cores = worker_count();
    let table: Vec<String> = sizes.iter().zip(&rates).map(|(n, r)| format!("{n}:{r:.0}")).collect();
    Outcome {
        pass: monotone && speedup >= 5.0 && rows.iter().all(|r| r.error.is_empty()),
        detail: format!(
            "env-steps/s {} ; non-decreasing to 256: {monotone}; 256 vs 1 = {speedup:.2}x (>= 5x); {cores} worker(s), reference {REFERENCE_CORES}",
            table.join(" ")
        ),
        applies: cores >= REFERENCE_CORES,
    }
}

fn soft_body() -> Outcome {
    let base = BeamScenario::default();
    let s8 = simulate_beam(&base.with_resolution(8), BEAM_DURATION, BEAM_DT, BEAM_ITERATIONS, 10).unwrap();
    let s16 = simulate_beam(&base.with_resolution(16), BEAM_DURATION, BEAM_DT, BEAM_ITERATIONS, 10).unwrap();
    let fine = simulate_beam(&base.with_resolution(8), BEAM_DURATION, BEAM_DT / 10.0, 4 * BEAM_ITERATIONS, 100).unwrap();
    let decreasing = s8.peaks.len() >= 3 && s8.peaks.windows(2).all(|w| w[1] < w[0]);
    let convergence = (s8.static_sag - s16.static_sag).abs() / s16.static_sag;
    let oracle = (s8.static_sag - fine.static_sag).abs() / fine.static_sag;

    let mut s = ParticleSystem::new(vec![Vec3::zeros(), Vec3::new(1.2, 0.0, 0.0)], vec![1.0, 1.0]);
    s.gravity = Vec3::zeros();
    s.connect(0, 1, 0.0, ConstraintKind::Structural);
    s.constraints[0].rest = 1.0;
    xpbd_step(&mut s, 0.01, 1).unwrap();
    // each particle moves half the 0.2 m violation; lambda = -C / (w1 + w2)
    let hand = (s.x[0] - Vec3::new(0.1, 0.0, 0.0))
        .norm()
        .max((s.x[1] - Vec3::new(1.1, 0.0, 0.0)).norm())
        .max((s.lambda[0] + 0.1).abs());
    outcome(
        decreasing && convergence < 0.10 && oracle < 0.05 && hand < 1e-12,
        format!(
            "{} peaks strictly decreasing: {decreasing}; sag m8 vs m16 {:.2}% (< 10%); vs dt/10 oracle {:.2}% (< 5%); two-particle error {hand:.1e} (< 1e-12)",
            s8.peaks.len(),
            100.0 * convergence,
            100.0 * oracle
        ),
    )
}

fn determinism() -> Outcome {
    let cfg = TaskConfig::new(TaskId::Lift);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (lo, hi) = action_bounds(&cfg).unwrap();
    let actions: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..4).flat_map(|_| lo.iter().zip(&hi).map(|(l, h)| rng.gen_range(*l..=*h)).collect::<Vec<_>>()).collect())
        .collect();
    let run = || {
        let mut env = make_task(&cfg, 4).unwrap();
        env.seed(99);
        let mut trace: Vec<u64> = Vec::new();
        for a in &actions {
            let r = env.step(a).unwrap();
            trace.extend(r.observations.iter().chain(&r.rewards).map(|x| x.to_bits()));
        }
        trace
    };
    let identical = run() == run();

    let mut buf = Vec::new();
    let summary = record::record(&cfg, record::PolicyKind::Expert, 10, 5, &mut buf, None).unwrap();
    let log = episode_log::read_log(buf.as_slice()).unwrap();
    let same = record::replay(&log, true, None).unwrap();
    let other = record::replay(&log, true, Some(6)).unwrap();
    let dev = same.max_obs_deviation.unwrap();
    let neg = other.max_obs_deviation.unwrap();
    outcome(
        identical && summary.episodes == 10 && dev == 0.0 && neg > 0.0,
        format!(
            "two runs bitwise identical: {identical}; replay of {}-episode lift log deviation {dev:e}; perturbed seed deviation {neg:.3e} (> 0)",
            summary.episodes
        ),
    )
}

fn randomization() -> Outcome {
    let scene = SceneConfig {
        world: WorldConfig {
            physics_rate: 1000.0,
            gravity: [0.0, 0.0, -9.81],
            ground_contact: true,
            table_height: 0.0,
            robots: vec![RobotSpec::fixture("quad", "quadruped")],
            objects: vec![],
            sensors: vec![],
            markers: vec![],
            grasp: GraspSettings::default(),
        },
        graph: GraphConfig::default(),
        env: EnvConfig {
            action_port: vec!["actuator:quad.legs".into()],
            observation_ports: vec![],
            reward: "none".into(),
            termination: "none".into(),
            control_rate: 50.0,
            episode_length: 100,
            randomization: vec![RandomizationEntry {
                target: RandTarget::LinkMass { robot: "quad".into(), link: "base".into() },
                distribution: Distribution::uniform(22.0 - 5.0, 22.0 + 5.0),
            }],
        },
    };
    let n = 100;
    let mut env = Env::build(&scene, n, &HookRegistry::default()).unwrap();
    env.seed(8);
    let ids: Vec<usize> = (0..n).collect();
    let mut masses = Vec::with_capacity(10_000);
    for _ in 0..100 {
        env.reset(&ids).unwrap();
        masses.extend((0..n).map(|i| env.link_mass(i, 0, "base").unwrap()));
    }
    let inside = masses.iter().all(|m| *m > 17.0 && *m < 27.0);
    let mean = masses.iter().sum::<f64>() / masses.len() as f64;
    let (min, max) = masses.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), m| (a.min(*m), b.max(*m)));
    outcome(
        inside && (mean - 22.0).abs() < 0.2,
        format!("{} resets, range [{min:.3}, {max:.3}] inside (17, 27): {inside}; mean {mean:.4} (|mean - 22| < 0.2)", masses.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("dynamics oracle suite", dynamics_oracles),
        ("jacobian finite differences", jacobian_fd),
        ("multi-rate semantics", multirate),
        ("reach convergence", reach),
        ("expert task success", experts),
        ("throughput scaling", throughput),
        ("soft-body validation", soft_body),
        ("determinism and replay", determinism),
        ("randomization bounds", randomization),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let o = check();
        let secs = start.elapsed().as_secs_f64();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && !o.applies { " [below reference hardware]" } else { "" };
        println!("{verdict} {name}: {}{note} ({secs:.1} s)", o.detail);
        failed += (!o.pass && o.applies) as usize;
    }
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
