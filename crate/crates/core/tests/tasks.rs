use orbitlite_core::tasks::*;
use orbitlite_core::world::Env;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(task: TaskId) -> TaskConfig {
    TaskConfig::new(task)
}

fn random_actions(cfg: &TaskConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (lo, hi) = action_bounds(cfg).unwrap();
    (0..n).flat_map(|_| lo.iter().zip(&hi).map(|(l, h)| rng.gen_range(*l..=*h)).collect::<Vec<_>>()).collect()
}

/// Mean undiscounted return of the first episode in every env.
fn mean_return(cfg: &TaskConfig, n: usize, seed: u64, mut policy: impl FnMut(&Env) -> Vec<f64>) -> (f64, usize) {
    let mut env = make_task(cfg, n).unwrap();
    env.seed(seed);
    let mut ret = vec![0.0; n];
    let mut live = vec![true; n];
    let mut successes = 0;
    for _ in 0..cfg.episode_length() {
        let a = policy(&env);
        let r = env.step(&a).unwrap();
        for i in 0..n {
            if live[i] {
                ret[i] += r.rewards[i];
                if r.dones[i] {
                    live[i] = false;
                    successes += r.infos[i].success as usize;
                }
            }
        }
        if !live.iter().any(|l| *l) {
            break;
        }
    }
    (ret.iter().sum::<f64>() / n as f64, successes)
}

#[test]
fn reach_with_ik_takes_a_pose_delta() {
    let c = cfg(TaskId::Reach).with_mode(ControlMode::TaskSpaceIk);
    let mut env = make_task(&c, 2).unwrap();
    assert_eq!(env.act_dim(), 6);
    assert_eq!(env.decimation(), 20);
    env.reset_counters();
    env.step(&vec![0.0; 12]).unwrap();
    assert_eq!(env.counters(0).ik_solves, 1);
    assert_eq!(env.counters(0).substeps, 20);
}

#[test]
fn lift_in_joint_space_commands_arm_and_gripper() {
    let env = make_task(&cfg(TaskId::Lift).with_mode(ControlMode::JointPosition), 1).unwrap();
    assert_eq!(env.act_dim(), 7 + 1);
    let env = make_task(&cfg(TaskId::Lift).with_mode(ControlMode::JointPosition).with_robot("ur6"), 1).unwrap();
    assert_eq!(env.act_dim(), 6 + 1);
}

#[test]
fn drawer_seal_is_intact_after_reset() {
    let mut env = make_task(&cfg(TaskId::DrawerOpen), 4).unwrap();
    for seed in 0..3 {
        env.seed(seed);
        for i in 0..4 {
            let v = env.view(i);
            let cab = v.articulation(CABINET).unwrap();
            assert_eq!(v.seal_broken(cab, 0), Some(false));
        }
    }
}

#[test]
fn reward_at_goal_is_the_bonus() {
    assert_eq!(reach_reward(&cfg(TaskId::Reach), 0.0), 1.0);
    let c = cfg(TaskId::Reach);
    assert_eq!(reach_reward(&c, 0.1), -(0.1 * 0.1));
}

#[test]
fn drawer_fully_open_scores_one() {
    let c = cfg(TaskId::DrawerOpen);
    assert_eq!(drawer_reward(&c, 0.3, 0.3, false), 1.0);
    assert_eq!(drawer_reward(&c, 0.45, 0.3, false), 1.0);
    assert_eq!(drawer_reward(&c, 0.3, 0.3, true), 2.0);
    assert_eq!(drawer_reward(&c, 0.0, 0.3, false), 0.0);
}

#[test]
fn unknown_task_and_robot_are_rejected() {
    assert!(matches!("stack".parse::<TaskId>(), Err(TaskError::UnknownTask(_))));
    let r = make_task(&cfg(TaskId::Reach).with_robot("nope"), 1);
    assert!(matches!(r, Err(TaskError::UnknownRobot(_))));
    let r = make_task(&cfg(TaskId::Reach).with_robot("quadruped"), 1);
    assert!(matches!(r, Err(TaskError::Incompatible { .. })));
    let mut bad = cfg(TaskId::Lift);
    bad.lift_height = 0.0;
    assert!(make_task(&bad, 1).is_err());
}

#[test]
fn every_task_builds_for_two_robots_and_three_modes() {
    for task in TaskId::ALL {
        for robot in ["panda", "ur6"] {
            for mode in [ControlMode::TaskSpaceIk, ControlMode::JointPosition, ControlMode::Osc] {
                let c = cfg(task).with_robot(robot).with_mode(mode);
                let mut env = make_task(&c, 1).unwrap_or_else(|e| panic!("{task} {robot} {mode}: {e}"));
                let (lo, _) = action_bounds(&c).unwrap();
                assert_eq!(lo.len(), env.act_dim());
                let r = env.step(&vec![0.0; env.act_dim()]).unwrap();
                assert!(r.observations.iter().all(|x| x.is_finite()));
            }
        }
    }
}

#[test]
fn rewards_stay_in_bounds_under_random_actions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for task in TaskId::ALL {
        let c = cfg(task);
        let (lo, hi) = reward_bounds(&c);
        let mut env = make_task(&c, 2).unwrap();
        env.seed(5);
        for _ in 0..40 {
            let a = random_actions(&c, 2, &mut rng);
            let r = env.step(&a).unwrap();
            for &x in &r.rewards {
                assert!(x >= lo && x <= hi, "{task}: {x} outside [{lo}, {hi}]");
            }
        }
    }
}

#[test]
fn expert_actions_are_finite_and_bounded() {
    for task in TaskId::ALL {
        for mode in [ControlMode::TaskSpaceIk, ControlMode::JointPosition] {
            let c = cfg(task).with_mode(mode);
            let (lo, hi) = action_bounds(&c).unwrap();
            let mut env = make_task(&c, 2).unwrap();
            env.seed(11);
            let mut pool = ExpertPool::new(&c, 2).unwrap();
            for _ in 0..60 {
                let a = pool.act(&env);
                for (k, x) in a.iter().enumerate() {
                    let j = k % lo.len();
                    assert!(x.is_finite() && *x >= lo[j] && *x <= hi[j], "{task} {mode}: {x}");
                }
                let r = env.step(&a).unwrap();
                pool.observe_dones(&r.dones);
            }
        }
    }
}

#[test]
fn lift_expert_approaches_five_centimetres_above_the_cube() {
    let c = cfg(TaskId::Lift);
    let mut env = make_task(&c, 1).unwrap();
    env.seed(2);
    let mut ex = Expert::new(&c).unwrap();
    assert_eq!(ex.phase(), Phase::Approach);
    for _ in 0..c.episode_length() {
        let a = ex.act(&env.view(0));
        if ex.phase() != Phase::Approach {
            break;
        }
        env.step(&a).unwrap();
    }
    let v = env.view(0);
    let cube = v.body(v.box_index(CUBE).unwrap()).pose.position;
    let tcp = v.gripper_pose(0).unwrap().position;
    assert!((tcp - cube - nalgebra::Vector3::new(0.0, 0.0, 0.05)).norm() < 0.01);
}

#[test]
fn expert_return_dominates_random() {
    for task in TaskId::ALL {
        let c = cfg(task);
        let n = 4;
        let mut pool = ExpertPool::new(&c, n).unwrap();
        let (expert, successes) = mean_return(&c, n, 21, |env| pool.act(env));
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (random, _) = mean_return(&c, n, 21, |_| random_actions(&c, n, &mut rng));
        assert_eq!(successes, n, "{task}");
        // with negative returns the expert has to be five times closer to zero
        let dominates = if random > 0.0 { expert >= 5.0 * random } else { expert > 0.0 || random <= 5.0 * expert };
        assert!(dominates, "{task}: expert {expert} random {random}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ungrasped_lift_reward_is_the_reaching_term(d1 in 0.0f64..1.5, d2 in 0.0f64..1.5, goal in 0.0f64..1.0) {
        let c = cfg(TaskId::Lift);
        let t1 = lift_terms(&c, d1, false, 0.0, goal);
        prop_assert_eq!(&t1[1..], &[0.0, 0.0, 0.0]);
        prop_assert_eq!(lift_reward(&c, &t1), c.weights.reach * t1[0]);
        let t2 = lift_terms(&c, d2, false, 0.0, goal);
        if d1 + 1e-3 < d2 {
            prop_assert!(lift_reward(&c, &t1) > lift_reward(&c, &t2));
        }
    }
}
