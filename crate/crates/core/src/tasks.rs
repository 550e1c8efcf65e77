//! Task catalog and hand-crafted state-machine experts.
//!
//! Every task is a [`SceneConfig`] built from a [`TaskConfig`] plus a reward
//! and termination hook registered under the task id. The same task logic
//! runs on either arm fixture and under any [`ControlMode`].

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::dynamics::AttachTarget;
use crate::actuation::{ActuatorGroupConfig, CommandType, Gains, TransmissionModel};
use crate::motiongen::{dls_ik_step, pose_error, IkParams, OscParams};
use crate::sensing::{SensorKind, SensorSpec};
use crate::softbody::BeamScenario;
use crate::spatial::{Transform, TransformDoc, Vec3};
use crate::world::*;

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown robot `{0}`")]
    UnknownRobot(String),
    #[error("control mode {mode} is not available for {robot}")]
    Incompatible { mode: ControlMode, robot: String },
    #[error(transparent)]
    World(#[from] WorldError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    Reach,
    Lift,
    DrawerOpen,
    ClothFold,
    BeamHold,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [TaskId::Reach, TaskId::Lift, TaskId::DrawerOpen, TaskId::ClothFold, TaskId::BeamHold];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Reach => "reach",
            TaskId::Lift => "lift",
            TaskId::DrawerOpen => "drawer_open",
            TaskId::ClothFold => "cloth_fold",
            TaskId::BeamHold => "beam_hold",
        }
    }

    /// Control steps per episode at 50 Hz.
    pub fn default_episode_length(self) -> usize {
        match self {
            TaskId::Reach => 100,
            TaskId::Lift => 500,
            TaskId::DrawerOpen => 400,
            TaskId::ClothFold => 500,
            TaskId::BeamHold => 400,
        }
    }

    fn uses_gripper(self) -> bool {
        self != TaskId::Reach
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| TaskError::UnknownTask(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    #[default]
    TaskSpaceIk,
    JointPosition,
    Osc,
}

impl ControlMode {
    pub const ALL: [ControlMode; 3] = [ControlMode::TaskSpaceIk, ControlMode::JointPosition, ControlMode::Osc];
}

impl fmt::Display for ControlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControlMode::TaskSpaceIk => "task_space_ik",
            ControlMode::JointPosition => "joint_position",
            ControlMode::Osc => "osc",
        })
    }
}

impl FromStr for ControlMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ControlMode::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| format!("unknown control mode `{s}`"))
    }
}

/// Fixture facts the task layer needs about an arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmInfo {
    pub fixture: &'static str,
    pub arm_joints: usize,
    pub tcp: &'static str,
    pub home: Vec<f64>,
    pub gripper_open: f64,
    pub gripper_closed: f64,
}

pub fn arm_info(fixture: &str) -> Option<ArmInfo> {
    match fixture {
        "panda" => Some(ArmInfo {
            fixture: "panda",
            arm_joints: 7,
            tcp: "panda_tcp",
            home: vec![0.0, -0.785, 0.0, -2.356, 0.0, 1.571, 0.785, 0.04],
            gripper_open: 0.04,
            gripper_closed: 0.0,
        }),
        "ur6" => Some(ArmInfo {
            fixture: "ur6",
            arm_joints: 6,
            tcp: "ur_tcp",
            home: vec![-0.3171, 0.1459, 1.0526, -2.7694, 1.5708, 1.2533, 0.04],
            gripper_open: 0.04,
            gripper_closed: 0.0,
        }),
        _ => None,
    }
}

pub const ROBOT: &str = "robot";
pub const CUBE: &str = "cube";
pub const CABINET: &str = "cabinet";
pub const CLOTH: &str = "cloth";
pub const BEAM: &str = "beam";

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RewardWeights {
    pub reach: f64,
    pub grasp: f64,
    pub lift: f64,
    pub goal: f64,
    pub drawer_open: f64,
    pub drawer_break: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            reach: 1.0,
            grasp: 1.0,
            lift: 1.0,
            goal: 1.0,
            drawer_open: 1.0,
            drawer_break: 1.0,
        }
    }
}

/// Everything that selects and parameterizes a task.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TaskConfig {
    pub task: TaskId,
    pub robot: String,
    pub mode: ControlMode,
    pub physics_rate: f64,
    pub control_rate: f64,
    /// Task default when absent.
    pub episode_length: Option<usize>,
    /// Domain randomization of object poses, goals, gains, and initial joints.
    pub randomize: bool,
    pub weights: RewardWeights,
    pub reach_threshold: f64,
    pub lift_height: f64,
    pub drawer_fraction: f64,
    pub fold_threshold: f64,
    pub hold_threshold: f64,
    /// Largest translation of a task-space command, m.
    pub max_translation: f64,
    /// Largest rotation of a task-space command, rad.
    pub max_rotation: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            task: TaskId::Reach,
            robot: "panda".into(),
            mode: ControlMode::TaskSpaceIk,
            physics_rate: 1000.0,
            control_rate: 50.0,
            episode_length: None,
            randomize: true,
            weights: RewardWeights::default(),
            reach_threshold: 0.02,
            lift_height: 0.10,
            drawer_fraction: 0.75,
            fold_threshold: 0.03,
            hold_threshold: 0.005,
            max_translation: 0.05,
            max_rotation: 0.5,
        }
    }
}

impl TaskConfig {
    pub fn new(task: TaskId) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    pub fn with_robot(mut self, robot: &str) -> Self {
        self.robot = robot.to_string();
        self
    }

    pub fn with_mode(mut self, mode: ControlMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_randomization(mut self, on: bool) -> Self {
        self.randomize = on;
        self
    }

    pub fn episode_length(&self) -> usize {
        self.episode_length.unwrap_or_else(|| self.task.default_episode_length())
    }

    fn validate(&self) -> Result<ArmInfo, TaskError> {
        let arm = arm_info(&self.robot).ok_or_else(|| match crate::fixtures::document(&self.robot) {
            Some(_) => TaskError::Incompatible {
                mode: self.mode,
                robot: self.robot.clone(),
            },
            None => TaskError::UnknownRobot(self.robot.clone()),
        })?;
        let positive = [
            self.reach_threshold,
            self.lift_height,
            self.drawer_fraction,
            self.fold_threshold,
            self.hold_threshold,
            self.max_translation,
            self.max_rotation,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(WorldError::Invalid("task thresholds must be positive".into()).into());
        }
        Ok(arm)
    }
}

fn pose_doc(pos: [f64; 3], yaw: f64) -> TransformDoc {
    let q = UnitQuaternion::from_euler_angles(0.0, 0.0, yaw);
    TransformDoc {
        pos,
        quat: [q.w, q.i, q.j, q.k],
    }
}

// Object placement, shared by the scene builder and the hooks.
const CUBE_SIZE: f64 = 0.05;
const CUBE_AT: [f64; 2] = [0.5, 0.0];
const CABINET_AT: [f64; 3] = [0.75, 0.0, 0.3];
const CLOTH_CELLS: usize = 5;
const CLOTH_SPACING: f64 = 0.05;
const CLOTH_AT: [f64; 3] = [0.4, -0.1, 0.002];
const BEAM_AT: [f64; 3] = [0.2, 0.0, 0.0];
const BEAM_HEIGHT: f64 = 0.35;

fn beam_scenario() -> BeamScenario {
    BeamScenario {
        height: BEAM_HEIGHT,
        ..BeamScenario::default()
    }
}

/// Cloth corner pairs (moving, target) of the half fold along the middle
/// row. The expert grasps the first corner of the first pair.
pub fn fold_pairs() -> [(usize, usize); 2] {
    let n = CLOTH_CELLS;
    [(0, n * (n - 1)), (n - 1, n * n - 1)]
}

fn uniform(target: RandTarget, lo: Vec<f64>, hi: Vec<f64>) -> RandomizationEntry {
    RandomizationEntry {
        target,
        distribution: Distribution::uniform(lo, hi),
    }
}

/// Assembles the world, agent graph, and graph cut of a task.
pub fn make_scene(cfg: &TaskConfig) -> Result<SceneConfig, TaskError> {
    let arm = cfg.validate()?;
    let mut robot = RobotSpec::fixture(ROBOT, arm.fixture);
    robot.initial_q = Some(arm.home.clone());
    robot.gripper = Some(GripperSpec {
        link: arm.tcp.into(),
        group: "gripper".into(),
        open: arm.gripper_open,
        closed: arm.gripper_closed,
    });
    let model = crate::fixtures::load(arm.fixture).map_err(WorldError::from)?;
    let arm_group = model
        .actuator_groups
        .iter()
        .find(|g| g.name == "arm")
        .cloned()
        .ok_or_else(|| TaskError::Incompatible {
            mode: cfg.mode,
            robot: cfg.robot.clone(),
        })?;
    if cfg.mode == ControlMode::Osc {
        robot.groups.push(ActuatorGroupConfig {
            command_type: CommandType::Torque,
            model: TransmissionModel::Ideal,
            gains: Gains::default(),
            gravity_compensation: false,
            ..arm_group.clone()
        });
    }

    let mut objects = Vec::new();
    let mut sensors = vec![
        SensorSpec::new("joints", SensorKind::JointState, &[], cfg.control_rate),
        SensorSpec::new("ee", SensorKind::BodyPose, &[arm.tcp], cfg.control_rate),
    ];
    let mut observations = vec!["sensor:joints".to_string(), "sensor:ee".to_string()];
    let mut randomization = Vec::new();
    let mut goal = None;
    match cfg.task {
        TaskId::Reach => {
            goal = Some(vec![0.45, 0.0, 0.3]);
            randomization.push(uniform(
                RandTarget::Goal { node: "goal".into() },
                vec![0.35, -0.2, 0.15],
                vec![0.6, 0.2, 0.5],
            ));
        }
        TaskId::Lift => {
            objects.push(ObjectSpec::Box {
                name: CUBE.into(),
                size: [CUBE_SIZE; 3],
                mass: 0.2,
                pose: pose_doc([CUBE_AT[0], CUBE_AT[1], 0.5 * CUBE_SIZE], 0.0),
            });
            sensors.push(SensorSpec::new("object", SensorKind::BodyPose, &[CUBE], cfg.control_rate));
            observations.push("sensor:object".into());
            goal = Some(vec![CUBE_AT[0], CUBE_AT[1], 0.25]);
            randomization.push(uniform(
                RandTarget::ObjectPose { object: CUBE.into() },
                vec![-0.08, -0.1, 0.0],
                vec![0.08, 0.1, 0.0],
            ));
            randomization.push(uniform(
                RandTarget::Goal { node: "goal".into() },
                vec![0.4, -0.15, 0.2],
                vec![0.55, 0.15, 0.3],
            ));
        }
        TaskId::DrawerOpen => {
            let mut cabinet = RobotSpec::fixture(CABINET, "drawer_cabinet");
            cabinet.base = pose_doc(CABINET_AT, std::f64::consts::PI);
            cabinet.graspable_links = vec!["handle".into()];
            objects.push(ObjectSpec::Articulation(cabinet));
            sensors.push(SensorSpec::new("handle", SensorKind::BodyPose, &["handle"], cfg.control_rate).on_robot(CABINET));
            sensors.push(SensorSpec::new("drawer", SensorKind::JointState, &["drawer_slide"], cfg.control_rate).on_robot(CABINET));
            observations.push("sensor:handle".into());
            observations.push("sensor:drawer".into());
            randomization.push(uniform(
                RandTarget::ObjectPose { object: CABINET.into() },
                vec![-0.03, -0.1, -0.05],
                vec![0.05, 0.1, 0.05],
            ));
            randomization.push(uniform(
                RandTarget::JointDamping {
                    robot: CABINET.into(),
                    joint: "drawer_slide".into(),
                },
                vec![3.0],
                vec![8.0],
            ));
        }
        TaskId::ClothFold => {
            objects.push(ObjectSpec::Cloth {
                name: CLOTH.into(),
                nx: CLOTH_CELLS,
                ny: CLOTH_CELLS,
                spacing: CLOTH_SPACING,
                mass: 0.1,
                compliance: 1e-4,
                bending_compliance: Some(1.0),
                origin: CLOTH_AT,
                damping: 1.0,
                iterations: 40,
            });
            let n = CLOTH_CELLS;
            let corners = [0, n - 1, n * (n - 1), n * n - 1];
            sensors.push(SensorSpec::new("corners", SensorKind::Particles, &[CLOTH], cfg.control_rate).with_indices(&corners));
            observations.push("sensor:corners".into());
            randomization.push(uniform(
                RandTarget::ObjectPose { object: CLOTH.into() },
                vec![-0.04, -0.05, 0.0],
                vec![0.04, 0.05, 0.0],
            ));
        }
        TaskId::BeamHold => {
            let scenario = beam_scenario();
            let tip = scenario.tip();
            objects.push(ObjectSpec::Beam {
                name: BEAM.into(),
                scenario,
                origin: BEAM_AT,
                iterations: crate::softbody::BEAM_ITERATIONS,
            });
            sensors.push(SensorSpec::new("tip", SensorKind::Particles, &[BEAM], cfg.control_rate).with_indices(&tip));
            observations.push("sensor:tip".into());
        }
    }
    if goal.is_some() {
        observations.push("goal.value".into());
    }
    if cfg.randomize {
        let arm_joints: Vec<String> = arm_group.joints.clone();
        randomization.push(uniform(
            RandTarget::InitialQ {
                robot: ROBOT.into(),
                joints: arm_joints,
            },
            vec![-0.05],
            vec![0.05],
        ));
        if cfg.mode != ControlMode::Osc {
            randomization.push(uniform(
                RandTarget::ActuatorGains {
                    robot: ROBOT.into(),
                    group: "arm".into(),
                },
                vec![0.8],
                vec![1.2],
            ));
        }
    } else {
        randomization.clear();
    }

    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut action_port = Vec::new();
    let control = cfg.control_rate;
    match cfg.mode {
        ControlMode::TaskSpaceIk => {
            nodes.push(NodeSpec {
                name: "ik".into(),
                kind: NodeKind::Action,
                rate: control,
                op: NodeOp::DiffIk {
                    robot: ROBOT.into(),
                    group: "arm".into(),
                    link: arm.tcp.into(),
                    offset: [0.0; 3],
                    params: IkParams::default(),
                    command: PoseCommand::Delta,
                },
            });
            edges.push(EdgeSpec::new("ik.joint_targets", &format!("actuator:{ROBOT}.arm")));
            action_port.push("ik.command".to_string());
        }
        ControlMode::Osc => {
            let mut params = OscParams::default();
            params.posture = Some(arm.home.clone());
            nodes.push(NodeSpec {
                name: "osc".into(),
                kind: NodeKind::Action,
                rate: cfg.physics_rate,
                op: NodeOp::Osc {
                    robot: ROBOT.into(),
                    group: "arm".into(),
                    link: arm.tcp.into(),
                    offset: [0.0; 3],
                    params,
                    command: PoseCommand::Delta,
                },
            });
            edges.push(EdgeSpec::new("osc.torques", &format!("actuator:{ROBOT}.arm")));
            action_port.push("osc.command".to_string());
        }
        ControlMode::JointPosition => action_port.push(format!("actuator:{ROBOT}.arm")),
    }
    if cfg.task.uses_gripper() {
        if cfg.mode == ControlMode::JointPosition {
            action_port.push(format!("actuator:{ROBOT}.gripper"));
        } else {
            nodes.push(NodeSpec {
                name: "grip".into(),
                kind: NodeKind::Action,
                rate: control,
                op: NodeOp::Gripper {
                    robot: ROBOT.into(),
                    group: "gripper".into(),
                    open: arm.gripper_open,
                    closed: arm.gripper_closed,
                },
            });
            edges.push(EdgeSpec::new("grip.targets", &format!("actuator:{ROBOT}.gripper")));
            action_port.push("grip.command".into());
        }
    }
    if let Some(value) = goal {
        nodes.push(NodeSpec {
            name: "goal".into(),
            kind: NodeKind::Perception,
            rate: control,
            op: NodeOp::Goal { value },
        });
    }

    Ok(SceneConfig {
        world: WorldConfig {
            physics_rate: cfg.physics_rate,
            gravity: [0.0, 0.0, -crate::dynamics::STANDARD_GRAVITY],
            ground_contact: false,
            table_height: 0.0,
            robots: vec![robot],
            objects,
            sensors,
            markers: Vec::new(),
            grasp: GraspSettings::default(),
        },
        graph: GraphConfig { nodes, edges },
        env: EnvConfig {
            action_port,
            observation_ports: observations,
            reward: cfg.task.as_str().into(),
            termination: cfg.task.as_str().into(),
            control_rate: control,
            episode_length: cfg.episode_length(),
            randomization,
        },
    })
}

/// Hook registry with the reward and termination of `cfg.task`.
pub fn hooks(cfg: &TaskConfig) -> HookRegistry {
    let mut reg = HookRegistry::default();
    reg.register(cfg.task.as_str(), Arc::new(TaskLogic { cfg: cfg.clone() }));
    reg
}

pub fn make_task(cfg: &TaskConfig, num_envs: usize) -> Result<Env, TaskError> {
    let scene = make_scene(cfg)?;
    Ok(Env::build(&scene, num_envs, &hooks(cfg))?)
}

/// Per-step reward range of a task.
pub fn reward_bounds(cfg: &TaskConfig) -> (f64, f64) {
    let w = &cfg.weights;
    match cfg.task {
        // distances are bounded by the arm's reach, well under 2 m
        TaskId::Reach => (-4.0 * w.reach, w.reach),
        TaskId::Lift => (0.0, w.reach + w.grasp + w.lift + w.goal),
        TaskId::DrawerOpen => (0.0, w.drawer_open + w.drawer_break),
        TaskId::ClothFold | TaskId::BeamHold => (-2.0, 0.0),
    }
}

fn ee(view: &EnvView) -> Transform {
    view.gripper_pose(0).expect("task robots carry a gripper")
}

fn goal(view: &EnvView) -> Vec3 {
    let g = view.port("goal.value").expect("goal node");
    Vec3::new(g[0], g[1], g[2])
}

fn cube(view: &EnvView) -> Vec3 {
    view.body(view.box_index(CUBE).expect("cube")).pose.position
}

fn drawer(view: &EnvView) -> (usize, f64, f64) {
    let a = view.articulation(CABINET).expect("cabinet");
    let upper = view.model(a).dof_joint(0).limits.upper;
    (a, view.q(a)[0], upper)
}

fn cloth_gap(view: &EnvView) -> f64 {
    let s = view.particles(view.system_index(CLOTH).expect("cloth"));
    let pairs = fold_pairs();
    pairs.iter().map(|&(a, b)| (s.x[a] - s.x[b]).norm()).sum::<f64>() / pairs.len() as f64
}

fn beam_tip(view: &EnvView) -> Vec3 {
    let s = view.particles(view.system_index(BEAM).expect("beam"));
    beam_scenario().tip().iter().map(|&i| s.x[i]).sum::<Vec3>() / 4.0
}

fn is_grasped(view: &EnvView, target: Option<AttachTarget>) -> bool {
    target.is_some() && view.held(0) == target
}

/// Reach reward at end-effector distance `d` from the goal.
pub fn reach_reward(cfg: &TaskConfig, d: f64) -> f64 {
    let bonus = if d < cfg.reach_threshold { 1.0 } else { 0.0 };
    cfg.weights.reach * (bonus - d * d)
}

/// Unweighted lift terms: reaching, grasp indicator, height fraction, goal
/// tracking. `height` is the cube bottom above the table.
pub fn lift_terms(cfg: &TaskConfig, ee_dist: f64, grasped: bool, height: f64, goal_dist: f64) -> [f64; 4] {
    let g = if grasped { 1.0 - (5.0 * goal_dist).tanh() } else { 0.0 };
    [
        1.0 - (5.0 * ee_dist).tanh(),
        grasped as u8 as f64,
        height.clamp(0.0, cfg.lift_height) / cfg.lift_height,
        g,
    ]
}

pub fn lift_reward(cfg: &TaskConfig, terms: &[f64; 4]) -> f64 {
    let w = &cfg.weights;
    w.reach * terms[0] + w.grasp * terms[1] + w.lift * terms[2] + w.goal * terms[3]
}

pub fn drawer_reward(cfg: &TaskConfig, q: f64, upper: f64, broken: bool) -> f64 {
    let w = &cfg.weights;
    w.drawer_open * (q / upper).clamp(0.0, 1.0) + w.drawer_break * broken as u8 as f64
}

struct TaskLogic {
    cfg: TaskConfig,
}

impl TaskLogic {
    fn lift_terms(&self, view: &EnvView) -> [f64; 4] {
        let c = cube(view);
        let grasped = is_grasped(view, view.box_index(CUBE).map(AttachTarget::Body));
        lift_terms(
            &self.cfg,
            (ee(view).position - c).norm(),
            grasped,
            c.z - 0.5 * CUBE_SIZE - view.table_height(),
            (c - goal(view)).norm(),
        )
    }
}

impl TaskHook for TaskLogic {
    fn on_reset(&self, view: &EnvView) -> Vec<f64> {
        match self.cfg.task {
            // straight tip position before the beam sags
            TaskId::BeamHold => beam_tip(view).as_slice().to_vec(),
            _ => Vec::new(),
        }
    }

    fn reward(&self, view: &EnvView) -> f64 {
        match self.cfg.task {
            TaskId::Reach => reach_reward(&self.cfg, (ee(view).position - goal(view)).norm()),
            TaskId::Lift => lift_reward(&self.cfg, &self.lift_terms(view)),
            TaskId::DrawerOpen => {
                let (a, q, upper) = drawer(view);
                drawer_reward(&self.cfg, q, upper, view.seal_broken(a, 0).unwrap_or(false))
            }
            TaskId::ClothFold => -cloth_gap(view).min(2.0),
            TaskId::BeamHold => {
                let rest = Vec3::from_column_slice(view.data());
                -(beam_tip(view) - rest).norm().min(2.0)
            }
        }
    }

    fn termination(&self, view: &EnvView) -> Outcome {
        let success = match self.cfg.task {
            TaskId::Reach => (ee(view).position - goal(view)).norm() < self.cfg.reach_threshold,
            TaskId::Lift => {
                let grasped = is_grasped(view, view.box_index(CUBE).map(AttachTarget::Body));
                grasped && cube(view).z - 0.5 * CUBE_SIZE - view.table_height() >= self.cfg.lift_height
            }
            TaskId::DrawerOpen => {
                let (a, q, upper) = drawer(view);
                view.seal_broken(a, 0) == Some(true) && q / upper >= self.cfg.drawer_fraction
            }
            TaskId::ClothFold => view.held(0).is_none() && cloth_gap(view) < self.cfg.fold_threshold,
            TaskId::BeamHold => {
                let rest = Vec3::from_column_slice(view.data());
                view.held(0).is_some() && (beam_tip(view) - rest).norm() < self.cfg.hold_threshold
            }
        };
        Outcome {
            // once released the folded cloth is left alone; the other tasks
            // keep running so the expert holds the goal state
            terminated: success && self.cfg.task == TaskId::ClothFold,
            success,
        }
    }
}

/// Bounds of the flat action vector.
pub fn action_bounds(cfg: &TaskConfig) -> Result<(Vec<f64>, Vec<f64>), TaskError> {
    let arm = cfg.validate()?;
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    match cfg.mode {
        ControlMode::TaskSpaceIk | ControlMode::Osc => {
            for i in 0..6 {
                let b = if i < 3 { cfg.max_translation } else { cfg.max_rotation };
                lo.push(-b);
                hi.push(b);
            }
        }
        ControlMode::JointPosition => {
            let model = crate::fixtures::load(arm.fixture).map_err(WorldError::from)?;
            for d in 0..arm.arm_joints {
                let l = model.dof_joint(d).limits;
                lo.push(l.lower);
                hi.push(l.upper);
            }
        }
    }
    if cfg.task.uses_gripper() {
        match cfg.mode {
            ControlMode::JointPosition => {
                lo.push(arm.gripper_closed.min(arm.gripper_open));
                hi.push(arm.gripper_closed.max(arm.gripper_open));
            }
            _ => {
                lo.push(-1.0);
                hi.push(1.0);
            }
        }
    }
    Ok((lo, hi))
}

/// Converts a grasp-frame target into an action for any control mode.
#[derive(Clone, Debug)]
pub struct ActionMapper {
    cfg: TaskConfig,
    arm: ArmInfo,
    lo: Vec<f64>,
    hi: Vec<f64>,
    ik: IkParams,
}

impl ActionMapper {
    pub fn new(cfg: &TaskConfig) -> Result<Self, TaskError> {
        let arm = cfg.validate()?;
        let (lo, hi) = action_bounds(cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            arm,
            lo,
            hi,
            ik: IkParams::default(),
        })
    }

    /// Action moving the grasp frame toward `target` at most `speed` m per
    /// control step, with the gripper `closed` or open.
    pub fn action(&self, view: &EnvView, target: &Transform, speed: f64, closed: bool) -> Vec<f64> {
        let frame = ee(view);
        let mut err = pose_error(&frame, target);
        let lin = err.fixed_rows::<3>(0).norm();
        let cap = speed.min(self.cfg.max_translation);
        if lin > cap {
            err.fixed_rows_mut::<3>(0).scale_mut(cap / lin);
        }
        let ang = err.fixed_rows::<3>(3).norm();
        if ang > self.cfg.max_rotation {
            err.fixed_rows_mut::<3>(3).scale_mut(self.cfg.max_rotation / ang);
        }
        let mut out: Vec<f64> = match self.cfg.mode {
            ControlMode::TaskSpaceIk | ControlMode::Osc => err.as_slice().to_vec(),
            ControlMode::JointPosition => {
                let model = view.model(0);
                let tcp = model.link_index(self.arm.tcp).expect("tcp link");
                let full = model.point_jacobian(view.link_poses(0), tcp, &frame.position);
                let n = self.arm.arm_joints;
                let j = DMatrix::from_fn(6, n, |r, c| full[(r, c)]);
                let dq = dls_ik_step(&j, err.as_slice(), &self.ik).unwrap_or_else(|_| nalgebra::DVector::zeros(n));
                (0..n).map(|d| view.q(0)[d] + dq[d]).collect()
            }
        };
        if self.cfg.task.uses_gripper() {
            out.push(match (self.cfg.mode, closed) {
                (ControlMode::JointPosition, true) => self.arm.gripper_closed,
                (ControlMode::JointPosition, false) => self.arm.gripper_open,
                (_, true) => 1.0,
                (_, false) => -1.0,
            });
        }
        for ((v, lo), hi) in out.iter_mut().zip(&self.lo).zip(&self.hi) {
            *v = if v.is_finite() { v.clamp(*lo, *hi) } else { 0.0 };
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Approach,
    Descend,
    Grasp,
    Transport,
    Release,
    Hold,
}

/// Hand-crafted state machine for one environment.
#[derive(Clone, Debug)]
pub struct Expert {
    mapper: ActionMapper,
    task: TaskId,
    phase: Phase,
    timer: usize,
    /// Grasp target captured when the grasp phase starts.
    anchor: Vec3,
    /// Where the carried corner started, for the fold arc.
    start: Vec3,
    orientation: Option<UnitQuaternion<f64>>,
}

const SPEED: f64 = 0.04;
const SLOW: f64 = 0.02;

impl Expert {
    pub fn new(cfg: &TaskConfig) -> Result<Self, TaskError> {
        Ok(Self {
            mapper: ActionMapper::new(cfg)?,
            task: cfg.task,
            phase: Phase::Approach,
            timer: 0,
            anchor: Vec3::zeros(),
            start: Vec3::zeros(),
            orientation: None,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn reset(&mut self) {
        self.phase = Phase::Approach;
        self.timer = 0;
        self.orientation = None;
    }

    fn advance(&mut self, next: Phase) {
        if next > self.phase {
            self.phase = next;
            self.timer = 0;
        }
    }

    /// Next action from the current state of the environment.
    pub fn act(&mut self, view: &EnvView) -> Vec<f64> {
        let frame = ee(view);
        let rot = *self.orientation.get_or_insert(frame.orientation);
        let at = |p: Vec3| Transform::new(p, rot);
        let close = |p: Vec3, tol: f64| (frame.position - p).norm() < tol;
        self.timer += 1;
        let (target, speed, closed) = match self.task {
            TaskId::Reach => (goal(view), 1.0, false),
            TaskId::Lift => {
                let c = cube(view);
                let above = c + Vec3::new(0.0, 0.0, 0.05);
                match self.phase {
                    Phase::Approach => {
                        if close(above, 0.01) {
                            self.advance(Phase::Descend);
                        }
                        (above, SPEED, false)
                    }
                    Phase::Descend => {
                        if close(c, 0.006) || self.timer > 60 {
                            self.advance(Phase::Grasp);
                        }
                        (c, SLOW, false)
                    }
                    Phase::Grasp => {
                        if self.timer >= 3 {
                            self.advance(Phase::Transport);
                        }
                        (frame.position, SLOW, true)
                    }
                    _ => (goal(view), SPEED, true),
                }
            }
            TaskId::DrawerOpen => {
                let a = view.articulation(CABINET).expect("cabinet");
                let handle = view.link_pose(a, view.model(a).link_index("handle").expect("handle")).position;
                // the drawer opens along the cabinet's +x axis
                let axis = view.link_pose(a, 0).orientation * Vec3::x();
                let front = handle + 0.05 * axis;
                match self.phase {
                    Phase::Approach => {
                        if close(front, 0.01) {
                            self.advance(Phase::Descend);
                        }
                        (front, SPEED, false)
                    }
                    Phase::Descend => {
                        if close(handle, 0.006) || self.timer > 60 {
                            self.advance(Phase::Grasp);
                        }
                        (handle, SLOW, false)
                    }
                    Phase::Grasp => {
                        if self.timer >= 3 {
                            self.anchor = handle;
                            self.advance(Phase::Transport);
                        }
                        (frame.position, SLOW, true)
                    }
                    _ => {
                        let (_, _, upper) = drawer(view);
                        (self.anchor + 0.95 * upper * axis, SLOW, true)
                    }
                }
            }
            TaskId::ClothFold => {
                let s = view.particles(view.system_index(CLOTH).expect("cloth"));
                let (a, b) = fold_pairs()[0];
                let corner = s.x[a];
                let dest = s.x[b];
                let lift = Vec3::new(0.0, 0.0, 0.06);
                match self.phase {
                    Phase::Approach => {
                        if close(corner + lift, 0.01) {
                            self.advance(Phase::Descend);
                        }
                        (corner + lift, SPEED, false)
                    }
                    Phase::Descend => {
                        if close(corner, 0.006) || self.timer > 60 {
                            self.advance(Phase::Grasp);
                        }
                        (corner, SLOW, false)
                    }
                    Phase::Grasp => {
                        if self.timer >= 3 {
                            self.anchor = dest;
                            self.start = corner;
                            self.advance(Phase::Transport);
                        }
                        (frame.position, SLOW, true)
                    }
                    Phase::Transport => {
                        // lookahead point on a half-circle arc from start to the far corner
                        let span = self.anchor - self.start;
                        let flat = Vec3::new(span.x, span.y, 0.0);
                        let len = flat.norm().max(1e-9);
                        let done = (Vec3::new(corner.x, corner.y, 0.0) - Vec3::new(self.start.x, self.start.y, 0.0)).dot(&flat) / (len * len);
                        let p = (done.clamp(0.0, 1.0) + 0.15).min(1.0);
                        let height = 0.5 * len * (std::f64::consts::PI * p).sin() + 0.02;
                        let target = self.start + flat * p + Vec3::new(0.0, 0.0, height);
                        if p >= 1.0 && close(target, 0.012) || self.timer > 250 {
                            self.anchor = dest;
                            self.advance(Phase::Release);
                        }
                        (target, SPEED, true)
                    }
                    Phase::Release => {
                        let low = self.anchor + Vec3::new(0.0, 0.0, 0.01);
                        let done = close(low, 0.006) || self.timer > 50;
                        if done && self.timer > 1 {
                            self.advance(Phase::Hold);
                        }
                        (low, SLOW, !done)
                    }
                    _ => (self.anchor + lift, SLOW, false),
                }
            }
            TaskId::BeamHold => {
                let s = view.particles(view.system_index(BEAM).expect("beam"));
                let tip = beam_scenario().tip();
                let grip = tip
                    .iter()
                    .copied()
                    .min_by(|&i, &j| (s.x[i] - frame.position).norm().total_cmp(&(s.x[j] - frame.position).norm()))
                    .expect("tip particles");
                let p = s.x[grip];
                match self.phase {
                    Phase::Approach => {
                        let above = p + Vec3::new(0.0, 0.0, 0.05);
                        if close(above, 0.01) {
                            self.advance(Phase::Descend);
                        }
                        (above, SPEED, false)
                    }
                    Phase::Descend => {
                        if close(p, 0.006) || self.timer > 60 {
                            self.advance(Phase::Grasp);
                        }
                        (p, SLOW, false)
                    }
                    Phase::Grasp => {
                        if self.timer >= 3 {
                            self.advance(Phase::Transport);
                        }
                        (frame.position, SLOW, true)
                    }
                    _ => {
                        // raise the tip back onto its straight position
                        let rest = Vec3::from_column_slice(view.data());
                        let tip_now = beam_tip(view);
                        (frame.position + (rest - tip_now), SLOW, true)
                    }
                }
            }
        };
        self.mapper.action(view, &at(target), speed, closed)
    }
}

/// One expert per environment of a vectorized task.
pub struct ExpertPool {
    experts: Vec<Expert>,
}

impl ExpertPool {
    pub fn new(cfg: &TaskConfig, num_envs: usize) -> Result<Self, TaskError> {
        let e = Expert::new(cfg)?;
        Ok(Self {
            experts: vec![e; num_envs],
        })
    }

    pub fn act(&mut self, env: &Env) -> Vec<f64> {
        self.experts
            .iter_mut()
            .enumerate()
            .flat_map(|(i, e)| e.act(&env.view(i)))
            .collect()
    }

    /// Restarts the state machines of finished environments.
    pub fn observe_dones(&mut self, dones: &[bool]) {
        for (e, &d) in self.experts.iter_mut().zip(dones) {
            if d {
                e.reset();
            }
        }
    }

    pub fn expert(&self, env: usize) -> &Expert {
        &self.experts[env]
    }
}
