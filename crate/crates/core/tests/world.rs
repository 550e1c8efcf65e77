use orbitlite_core::sensing::{NoiseKind, NoiseSpec, SensorKind, SensorSpec};
use orbitlite_core::world::*;
use proptest::prelude::*;

const HOME: [f64; 8] = [0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785, 0.04];

fn panda() -> RobotSpec {
    let mut r = RobotSpec::fixture("panda", "panda");
    r.initial_q = Some(HOME.to_vec());
    r.gripper = Some(GripperSpec {
        link: "panda_tcp".into(),
        group: "gripper".into(),
        open: 0.04,
        closed: 0.0,
    });
    r
}

fn node(name: &str, kind: NodeKind, rate: f64, op: NodeOp) -> NodeSpec {
    NodeSpec {
        name: name.into(),
        kind,
        rate,
        op,
    }
}

fn ik_node(rate: f64) -> NodeSpec {
    node(
        "ik",
        NodeKind::Action,
        rate,
        NodeOp::DiffIk {
            robot: "panda".into(),
            group: "arm".into(),
            link: "panda_tcp".into(),
            offset: [0.0; 3],
            params: Default::default(),
            command: PoseCommand::Delta,
        },
    )
}

fn noisy_joints() -> SensorSpec {
    SensorSpec::new("joints", SensorKind::JointState, &[], 200.0).with_noise(NoiseSpec {
        kind: NoiseKind::Gaussian,
        std: vec![1e-3],
        bias_std: vec![],
    })
}

/// Panda with a differential IK node at 50 Hz; control at 50 Hz.
fn ik_scene() -> SceneConfig {
    SceneConfig {
        world: WorldConfig {
            physics_rate: 1000.0,
            gravity: [0.0, 0.0, -9.81],
            ground_contact: false,
            table_height: 0.0,
            robots: vec![panda()],
            objects: vec![],
            sensors: vec![
                noisy_joints(),
                SensorSpec::new("tcp", SensorKind::BodyPose, &["panda_tcp"], 100.0),
            ],
            markers: vec![],
            grasp: GraspSettings::default(),
        },
        graph: GraphConfig {
            nodes: vec![ik_node(50.0)],
            edges: vec![EdgeSpec::new("ik.joint_targets", "actuator:panda.arm")],
        },
        env: EnvConfig {
            action_port: vec!["ik.command".into()],
            observation_ports: vec!["sensor:joints".into(), "sensor:tcp".into()],
            reward: "none".into(),
            termination: "none".into(),
            control_rate: 50.0,
            episode_length: 1000,
            randomization: vec![],
        },
    }
}

fn build(scene: &SceneConfig, n: usize) -> Env {
    Env::build(scene, n, &HookRegistry::default()).unwrap()
}

fn build_err(scene: &SceneConfig) -> WorldError {
    match Env::build(scene, 1, &HookRegistry::default()) {
        Err(e) => e,
        Ok(_) => panic!("scene should be rejected"),
    }
}

fn small_motion(n: usize, k: usize) -> Vec<f64> {
    (0..n)
        .flat_map(|e| {
            let s = 1e-3 * ((k + e) as f64 * 0.7).sin();
            [s, -s, 0.5 * s, 0.0, 0.0, 0.0]
        })
        .collect()
}

#[test]
fn decimation_and_rates_are_counted() {
    let mut env = build(&ik_scene(), 1);
    assert_eq!(env.decimation(), 20);
    assert_eq!(env.obs_dim(), 16 + 7);
    assert_eq!(env.act_dim(), 6);
    env.reset_counters();
    for k in 0..10 {
        env.step(&small_motion(1, k)).unwrap();
    }
    let c = env.counters(0);
    assert_eq!(c.control_steps, 10);
    assert_eq!(c.substeps, 200);
    assert_eq!(c.ik_solves, 10);
    assert_eq!(c.sensor_refreshes, vec![40, 20]);
}

#[test]
fn node_rates_below_control_rate() {
    let mut scene = ik_scene();
    scene.graph.nodes.push(node("slow", NodeKind::Perception, 25.0, NodeOp::Passthrough { width: 16 }));
    scene.graph.nodes.push(node("fast", NodeKind::Perception, 50.0, NodeOp::Passthrough { width: 16 }));
    scene.graph.edges.push(EdgeSpec::new("sensor:joints", "slow.in"));
    scene.graph.edges.push(EdgeSpec::new("sensor:joints", "fast.in"));
    let mut env = build(&scene, 1);
    env.reset_counters();
    for k in 0..10 {
        env.step(&small_motion(1, k)).unwrap();
    }
    assert_eq!(env.counters(0).node_runs, vec![10, 5, 10]);
}

#[test]
fn passthrough_delivers_action_unchanged() {
    let mut scene = ik_scene();
    scene.graph.nodes = vec![node("pass", NodeKind::Action, 50.0, NodeOp::Passthrough { width: 7 })];
    scene.graph.edges = vec![EdgeSpec::new("pass.out", "actuator:panda.arm")];
    scene.env.action_port = vec!["pass.in".into()];
    scene.env.observation_ports = vec!["pass.out".into()];
    let mut env = build(&scene, 1);
    let action = [0.1, -0.7, 0.05, -2.3, 0.02, 1.6, 0.8];
    let r = env.step(&action).unwrap();
    assert_eq!(r.observations, action.to_vec());
}

#[test]
fn terminal_observation_precedes_reset() {
    let mut scene = ik_scene();
    scene.env.episode_length = 3;
    scene.env.observation_ports = vec!["sensor:tcp".into()];
    let mut env = build(&scene, 1);
    let initial = env.observations();
    let push = [0.01, 0.0, 0.0, 0.0, 0.0, 0.0];
    for _ in 0..2 {
        let r = env.step(&push).unwrap();
        assert!(!r.dones[0]);
        assert!(r.infos[0].terminal_observation.is_none());
    }
    let r = env.step(&push).unwrap();
    assert!(r.dones[0]);
    assert!(r.infos[0].truncated);
    let terminal = r.infos[0].terminal_observation.clone().unwrap();
    assert_eq!(r.observations, initial);
    assert!((terminal[0] - initial[0]).abs() > 1e-3);
    assert_eq!(env.view(0).step(), 0);
}

#[test]
fn resetting_one_env_leaves_others_untouched() {
    let mut env = build(&ik_scene(), 3);
    env.set_threads(1);
    for k in 0..5 {
        env.step(&small_motion(3, k)).unwrap();
    }
    let before: Vec<u64> = (0..3).map(|i| env.checksum(i)).collect();
    env.reset(&[1]).unwrap();
    assert_eq!(env.checksum(0), before[0]);
    assert_eq!(env.checksum(2), before[2]);
    assert_ne!(env.checksum(1), before[1]);
}

#[test]
fn markers_do_not_touch_physics_or_other_envs() {
    let mut a = build(&ik_scene(), 2);
    let mut b = build(&ik_scene(), 2);
    a.set_marker(
        0,
        MarkerSpec {
            name: "goal".into(),
            kind: MarkerKind::Sphere,
            pose: Default::default(),
            scale: [0.02; 3],
            color: [0.0, 1.0, 0.0, 1.0],
        },
    );
    assert_eq!(a.markers(0).len(), 1);
    assert!(a.markers(1).is_empty());
    for k in 0..5 {
        a.step(&small_motion(2, k)).unwrap();
        b.step(&small_motion(2, k)).unwrap();
    }
    assert_eq!(a.checksum(0), b.checksum(0));
    a.remove_marker(0, "goal");
    assert!(a.markers(0).is_empty());
}

#[test]
fn graph_cut_placement_does_not_change_physics() {
    let mut ik = build(&ik_scene(), 1);
    let mut scene = ik_scene();
    scene.graph = GraphConfig::default();
    scene.env.action_port = vec!["actuator:panda.arm".into()];
    let mut direct = build(&scene, 1);
    for k in 0..15 {
        ik.step(&small_motion(1, k)).unwrap();
        let targets = ik.view(0).port("ik.joint_targets").unwrap().to_vec();
        direct.step(&targets).unwrap();
        assert_eq!(ik.view(0).q(0), direct.view(0).q(0));
    }
}

#[test]
fn non_finite_action_faults_and_resets() {
    let mut env = build(&ik_scene(), 2);
    let mut act = small_motion(2, 0);
    act[0] = f64::NAN;
    let r = env.step(&act).unwrap();
    assert_eq!(r.dones, vec![true, false]);
    assert!(r.infos[0].faulted);
    assert_eq!(r.rewards[0], 0.0);
    assert_eq!(env.counters(0).faults, 1);
    assert!(r.observations.iter().all(|v| v.is_finite()));
}

#[test]
fn action_dimension_is_checked() {
    let mut env = build(&ik_scene(), 2);
    assert!(matches!(env.step(&[0.0; 6]), Err(WorldError::ActionDim { expected: 12, got: 6 })));
}

#[test]
fn dangling_input_is_rejected() {
    let mut scene = ik_scene();
    scene.graph.nodes.push(node("orphan", NodeKind::Perception, 50.0, NodeOp::Passthrough { width: 3 }));
    assert!(matches!(build_err(&scene), WorldError::DanglingPort(p) if p == "orphan.in"));
}

#[test]
fn cycles_are_rejected() {
    let mut scene = ik_scene();
    for n in ["a", "b"] {
        scene.graph.nodes.push(node(n, NodeKind::Perception, 50.0, NodeOp::Passthrough { width: 3 }));
    }
    scene.graph.edges.push(EdgeSpec::new("a.out", "b.in"));
    scene.graph.edges.push(EdgeSpec::new("b.out", "a.in"));
    assert!(matches!(build_err(&scene), WorldError::Cycle(_)));
}

#[test]
fn non_divisible_rates_are_rejected() {
    let mut scene = ik_scene();
    scene.graph.nodes[0].rate = 300.0;
    assert!(matches!(build_err(&scene), WorldError::Rate { .. }));
    let mut scene = ik_scene();
    scene.env.control_rate = 70.0;
    assert!(matches!(build_err(&scene), WorldError::Rate { .. }));
}

#[test]
fn width_and_port_errors_are_reported() {
    let mut scene = ik_scene();
    scene.graph.edges = vec![EdgeSpec::new("sensor:tcp", "ik.command")];
    scene.env.action_port = vec!["actuator:panda.gripper".into()];
    assert!(matches!(build_err(&scene), WorldError::Width { expected: 6, got: 7, .. }));
    let mut scene = ik_scene();
    scene.env.observation_ports.push("nowhere.out".into());
    assert!(matches!(build_err(&scene), WorldError::UnknownPort(_)));
    let mut scene = ik_scene();
    scene.env.action_port.push("actuator:panda.arm".into());
    assert!(matches!(build_err(&scene), WorldError::MultipleProducers(_)));
}

#[test]
fn scene_round_trips_through_json() {
    let scene = ik_scene();
    assert_eq!(SceneConfig::from_json(&scene.to_json()).unwrap(), scene);
}

fn quadruped_scene(lo: f64, hi: f64) -> SceneConfig {
    SceneConfig {
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
                target: RandTarget::LinkMass {
                    robot: "quad".into(),
                    link: "base".into(),
                },
                distribution: Distribution::uniform(lo, hi),
            }],
        },
    }
}

#[test]
fn randomized_masses_stay_in_range_and_vary() {
    let mut env = build(&quadruped_scene(17.0, 27.0), 64);
    env.seed(11);
    let masses: Vec<f64> = (0..64).map(|i| env.link_mass(i, 0, "base").unwrap()).collect();
    assert!(masses.iter().all(|&m| (17.0..27.0).contains(&m)), "{masses:?}");
    let mean = masses.iter().sum::<f64>() / 64.0;
    assert!((mean - 22.0).abs() < 1.5, "{mean}");
    assert!(masses.windows(2).any(|w| w[0] != w[1]));
    assert_eq!(env.model(0).links[env.model(0).link_index("base").unwrap()].mass, 22.0);
}

#[test]
fn inverted_uniform_range_is_rejected() {
    assert!(matches!(build_err(&quadruped_scene(27.0, 17.0)), WorldError::Invalid(_)));
}

#[test]
fn seeding_is_reproducible() {
    let mut a = build(&quadruped_scene(17.0, 27.0), 4);
    let mut b = build(&quadruped_scene(17.0, 27.0), 4);
    a.seed(5);
    b.seed(5);
    assert_eq!((0..4).map(|i| a.checksum(i)).collect::<Vec<_>>(), (0..4).map(|i| b.checksum(i)).collect::<Vec<_>>());
    b.seed(6);
    assert_ne!(a.checksum(0), b.checksum(0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn thread_count_does_not_change_results(seed in 0u64..1000, threads in 2usize..6) {
        let mut scene = ik_scene();
        scene.env.randomization.push(RandomizationEntry {
            target: RandTarget::InitialQ { robot: "panda".into(), joints: vec![] },
            distribution: Distribution::uniform(-0.05, 0.05),
        });
        let mut serial = build(&scene, 6);
        let mut parallel = build(&scene, 6);
        serial.set_threads(1);
        parallel.set_threads(threads);
        let o1 = serial.seed(seed);
        let o2 = parallel.seed(seed);
        prop_assert_eq!(o1, o2);
        for k in 0..4 {
            let a = serial.step(&small_motion(6, k)).unwrap();
            let b = parallel.step(&small_motion(6, k)).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn sampled_link_masses_respect_bounds(seed in 0u64..10_000, lo in 5.0f64..20.0, span in 0.0f64..10.0) {
        let mut env = build(&quadruped_scene(lo, lo + span), 8);
        env.seed(seed);
        for i in 0..8 {
            let m = env.link_mass(i, 0, "base").unwrap();
            prop_assert!(m >= lo && m <= lo + span, "{m} outside [{lo}, {}]", lo + span);
        }
    }
}
