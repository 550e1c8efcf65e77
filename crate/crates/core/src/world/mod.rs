//! World container, agent computation graph, and the vectorized environment.
//!
//! An [`Env`] owns `num_envs` independent slots. A control step latches the
//! action at the graph cut, then runs `D = physics_rate / control_rate`
//! substeps. Each substep runs the due agent nodes in topological order,
//! computes actuator torques, integrates articulations, free bodies and
//! particle systems, and advances the sensor timers. Reward and termination
//! hooks are evaluated once per control step; finished slots reset in place.

mod config;
mod graph;

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use nalgebra::{DMatrix, UnitQuaternion};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

pub use config::*;
pub use graph::{divisor, GraphLayout, PortDef, Source, WorldCatalog};

use crate::actuation::{ActuationError, ActuatorGroup, CommandType, GroupState};
use crate::dynamics::{
    integrate, with_payloads, AttachTarget, AttachmentTable, BreakawaySeal, DynamicsSettings, DynamicsWorkspace,
    FreeBody, GroundContact, PointLoad, RigidParams,
};
use crate::model::{parse_robot_description, BreakawaySpec, ModelError, RobotDescription};
use crate::motiongen::{dls_ik_step, osc_torques, pose_error, QuinticUpsampler};
use crate::sensing::{SensorBuffer, SensorError, SensorKind};
use crate::softbody::{build_cloth, ConstraintKind, xpbd_step, ParticleSystem, SoftError};
use crate::spatial::{SpatialInertia, Transform, Vec3};
use crate::streams::stream;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Actuation(#[from] ActuationError),
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Soft(#[from] SoftError),
    #[error("dangling port `{0}`: no producer and not part of the action")]
    DanglingPort(String),
    #[error("unknown port `{0}`")]
    UnknownPort(String),
    #[error("port `{0}` has more than one producer")]
    MultipleProducers(String),
    #[error("agent graph has a cycle through node `{0}`")]
    Cycle(String),
    #[error("`{what}` rate {rate} Hz does not divide the physics rate {physics} Hz")]
    Rate { what: String, rate: f64, physics: f64 },
    #[error("width mismatch on `{port}`: expected {expected}, got {got}")]
    Width { port: String, expected: usize, got: usize },
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("action dimension mismatch: expected {expected}, got {got}")]
    ActionDim { expected: usize, got: usize },
    #[error("environment index {0} out of range")]
    EnvIndex(usize),
}

/// Episode outcome reported by a termination hook.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Outcome {
    pub terminated: bool,
    pub success: bool,
}

/// Reward or termination logic evaluated after every control step.
pub trait TaskHook: Send + Sync {
    /// Per-episode data made available through [`EnvView::data`].
    fn on_reset(&self, _view: &EnvView) -> Vec<f64> {
        Vec::new()
    }
    fn reward(&self, _view: &EnvView) -> f64 {
        0.0
    }
    fn termination(&self, _view: &EnvView) -> Outcome {
        Outcome::default()
    }
}

struct NoHook;

impl TaskHook for NoHook {}

/// Named reward and termination hooks. `none` is always present.
#[derive(Clone)]
pub struct HookRegistry {
    hooks: HashMap<String, Arc<dyn TaskHook>>,
}

impl Default for HookRegistry {
    fn default() -> Self {
        let mut hooks: HashMap<String, Arc<dyn TaskHook>> = HashMap::new();
        hooks.insert("none".into(), Arc::new(NoHook));
        Self { hooks }
    }
}

impl HookRegistry {
    pub fn register(&mut self, name: &str, hook: Arc<dyn TaskHook>) {
        self.hooks.insert(name.to_string(), hook);
    }

    pub fn get(&self, name: &str) -> Option<Arc<dyn TaskHook>> {
        self.hooks.get(name).cloned()
    }
}

/// Worker count: `ORBITLITE_THREADS` when set, else the available cores.
pub fn worker_count() -> usize {
    std::env::var("ORBITLITE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug)]
struct GripperDef {
    link: usize,
    offset: Transform,
    group: usize,
    open: f64,
    closed: f64,
}

#[derive(Clone, Debug)]
struct Articulation {
    name: String,
    model: RobotDescription,
    base: Transform,
    groups: Vec<ActuatorGroup>,
    initial_q: Vec<f64>,
    gripper: Option<GripperDef>,
    graspable: Vec<usize>,
    seals: Vec<(usize, BreakawaySpec)>,
    gravity_ff: bool,
    nominal: RigidParams,
}

#[derive(Clone, Debug)]
struct BoxDef {
    name: String,
    size: Vec3,
    body: FreeBody,
}

#[derive(Clone, Debug)]
struct SystemDef {
    name: String,
    template: ParticleSystem,
    iterations: usize,
}

#[derive(Clone, Debug)]
enum SensorSource {
    Joints { art: usize, dofs: Vec<usize> },
    Link { art: usize, link: usize },
    Body(usize),
    Attachment { art: usize },
    Feet { art: usize },
    Actuator { art: usize, group: usize },
    Particles { system: usize, indices: Vec<usize> },
}

#[derive(Clone, Debug)]
struct SensorDef {
    spec: crate::sensing::SensorSpec,
    source: SensorSource,
    width: usize,
}

#[derive(Clone, Debug)]
enum ObjectRef {
    Box(usize),
    Articulation(usize),
    System(usize),
}

struct Shared {
    config: SceneConfig,
    physics_rate: f64,
    dt: f64,
    decimation: u64,
    settings: DynamicsSettings,
    grasp: GraspSettings,
    articulations: Vec<Articulation>,
    boxes: Vec<BoxDef>,
    systems: Vec<SystemDef>,
    sensors: Vec<SensorDef>,
    objects: HashMap<String, ObjectRef>,
    graph: GraphLayout,
    reward: Arc<dyn TaskHook>,
    termination: Arc<dyn TaskHook>,
}

impl Shared {
    fn articulation(&self, name: &str) -> Option<usize> {
        self.articulations.iter().position(|a| a.name == name)
    }

    fn art_or_err(&self, name: &str) -> Result<usize, WorldError> {
        self.articulation(name).ok_or_else(|| WorldError::Unknown {
            kind: "robot",
            name: name.to_string(),
        })
    }
}

struct Catalog<'a> {
    arts: &'a [Articulation],
    sensors: &'a [SensorDef],
}

impl WorldCatalog for Catalog<'_> {
    fn group(&self, robot: &str, group: &str) -> Option<(usize, usize, usize)> {
        let a = self.arts.iter().position(|a| a.name == robot)?;
        let g = self.arts[a].groups.iter().position(|g| g.config.name == group)?;
        Some((a, g, self.arts[a].groups[g].size()))
    }

    fn sensor(&self, name: &str) -> Option<(usize, usize)> {
        let i = self.sensors.iter().position(|s| s.spec.name == name)?;
        Some((i, self.sensors[i].width))
    }
}

/// Lifetime instrumentation of one slot; survives resets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Counters {
    pub control_steps: u64,
    pub substeps: u64,
    pub node_runs: Vec<u64>,
    pub ik_solves: u64,
    pub sensor_refreshes: Vec<u64>,
    pub resets: u64,
    pub faults: u64,
}

#[derive(Clone, Debug)]
struct ArtState {
    q: Vec<f64>,
    qd: Vec<f64>,
    params: RigidParams,
    ws: DynamicsWorkspace,
    groups: Vec<GroupState>,
    broken: Vec<bool>,
    poses: Vec<Transform>,
    tau: Vec<f64>,
    base: Transform,
    gripper_closed: bool,
    /// Force the gripper weld exerts on the held object.
    weld_force: Vec3,
}

#[derive(Clone, Debug)]
enum NodeState {
    Stateless,
    Osc { target: Transform, seen: u64 },
    Quintic { up: QuinticUpsampler, seen: u64 },
}

#[derive(Clone, Debug)]
struct EnvSlot {
    index: usize,
    time: f64,
    substep: u64,
    step: usize,
    arts: Vec<ArtState>,
    bodies: Vec<FreeBody>,
    systems: Vec<ParticleSystem>,
    attachments: AttachmentTable,
    sensors: Vec<SensorBuffer>,
    ports: Vec<f64>,
    stamps: Vec<u64>,
    write_seq: u64,
    nodes: Vec<NodeState>,
    markers: Vec<MarkerSpec>,
    rng: ChaCha8Rng,
    reward_data: Vec<f64>,
    termination_data: Vec<f64>,
    counters: Counters,
    faulted: bool,
    success: bool,
    episode_return: f64,
}

/// Read-only view of one slot for hooks, policies, and tools.
pub struct EnvView<'a> {
    shared: &'a Shared,
    slot: &'a EnvSlot,
    data: &'a [f64],
}

impl<'a> EnvView<'a> {
    pub fn env_index(&self) -> usize {
        self.slot.index
    }

    pub fn time(&self) -> f64 {
        self.slot.time
    }

    /// Control steps taken in the current episode.
    pub fn step(&self) -> usize {
        self.slot.step
    }

    pub fn data(&self) -> &[f64] {
        self.data
    }

    pub fn articulation(&self, name: &str) -> Option<usize> {
        self.shared.articulation(name)
    }

    pub fn model(&self, art: usize) -> &'a RobotDescription {
        &self.shared.articulations[art].model
    }

    pub fn q(&self, art: usize) -> &'a [f64] {
        &self.slot.arts[art].q
    }

    pub fn qd(&self, art: usize) -> &'a [f64] {
        &self.slot.arts[art].qd
    }

    pub fn base(&self, art: usize) -> &'a Transform {
        &self.slot.arts[art].base
    }

    pub fn link_poses(&self, art: usize) -> &'a [Transform] {
        &self.slot.arts[art].poses
    }

    pub fn link_pose(&self, art: usize, link: usize) -> &'a Transform {
        &self.slot.arts[art].poses[link]
    }

    /// Grasp frame of an articulation's gripper.
    pub fn gripper_pose(&self, art: usize) -> Option<Transform> {
        let g = self.shared.articulations[art].gripper.as_ref()?;
        Some(self.slot.arts[art].poses[g.link].compose(&g.offset))
    }

    pub fn gripper_closed(&self, art: usize) -> bool {
        self.slot.arts[art].gripper_closed
    }

    /// Object held by an articulation's gripper.
    pub fn held(&self, art: usize) -> Option<AttachTarget> {
        let g = self.shared.articulations[art].gripper.as_ref()?;
        self.slot.attachments.active((art, g.link)).map(|a| a.object)
    }

    pub fn box_index(&self, name: &str) -> Option<usize> {
        self.shared.boxes.iter().position(|b| b.name == name)
    }

    pub fn body(&self, b: usize) -> &'a FreeBody {
        &self.slot.bodies[b]
    }

    pub fn box_size(&self, b: usize) -> Vec3 {
        self.shared.boxes[b].size
    }

    pub fn system_index(&self, name: &str) -> Option<usize> {
        self.shared.systems.iter().position(|s| s.name == name)
    }

    pub fn particles(&self, s: usize) -> &'a ParticleSystem {
        &self.slot.systems[s]
    }

    /// Broken flag of the seal on coordinate `dof`.
    pub fn seal_broken(&self, art: usize, dof: usize) -> Option<bool> {
        let i = self.shared.articulations[art].seals.iter().position(|(d, _)| *d == dof)?;
        Some(self.slot.arts[art].broken[i])
    }

    pub fn port(&self, name: &str) -> Option<&'a [f64]> {
        let p = &self.shared.graph.ports[self.shared.graph.port(name)?];
        Some(&self.slot.ports[p.offset..p.offset + p.width])
    }

    pub fn sensor(&self, name: &str) -> Option<(&'a [f64], f64)> {
        let i = self.shared.sensors.iter().position(|s| s.spec.name == name)?;
        Some(self.slot.sensors[i].read())
    }

    pub fn table_height(&self) -> f64 {
        self.shared.config.world.table_height
    }

    pub fn counters(&self) -> &'a Counters {
        &self.slot.counters
    }
}

/// Per-environment extras of one control step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepInfo {
    /// Observation before the automatic reset, for finished episodes.
    pub terminal_observation: Option<Vec<f64>>,
    pub success: bool,
    pub faulted: bool,
    /// Ended by the episode length limit.
    pub truncated: bool,
    /// Undiscounted return of the finished episode.
    pub episode_return: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepResult {
    /// `[num_envs × obs_dim]`, after automatic resets.
    pub observations: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub infos: Vec<StepInfo>,
}

/// Everything a viewer draws for one environment.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub time: f64,
    pub bodies: Vec<(String, Transform)>,
    pub joints: Vec<(String, f64)>,
    pub markers: Vec<MarkerSpec>,
    pub particles: Vec<(String, Vec<[f64; 3]>)>,
}

/// Vectorized environment over one world definition and one graph cut.
pub struct Env {
    shared: Arc<Shared>,
    slots: Vec<EnvSlot>,
    pool: Option<rayon::ThreadPool>,
    threads: usize,
    seed: u64,
    obs_dim: usize,
    act_dim: usize,
}

fn load_description(spec: &RobotSpec) -> Result<RobotDescription, WorldError> {
    let model = match (&spec.description, &spec.fixture) {
        (Some(doc), _) => parse_robot_description(&doc.to_string())?,
        (None, Some(f)) => crate::fixtures::load(f)?,
        (None, None) => {
            return Err(WorldError::Invalid(format!(
                "articulation `{}` needs a fixture or a description",
                spec.name
            )))
        }
    };
    spec.groups.iter().try_fold(model, |m, g| m.with_group(g.clone()).map_err(WorldError::from))
}

fn build_articulation(spec: &RobotSpec, physics_rate: f64) -> Result<Articulation, WorldError> {
    let model = load_description(spec)?;
    let mut groups = Vec::new();
    for g in &model.actuator_groups {
        let dofs = model.group_dofs(g);
        let effort = dofs.iter().map(|&d| model.dof_joint(d).limits.effort).collect();
        groups.push(ActuatorGroup::new(g.clone(), dofs, effort, physics_rate)?);
    }
    let n = model.num_dofs();
    let mut initial_q = match &spec.initial_q {
        Some(q) if q.len() == n => q.clone(),
        Some(q) => return Err(WorldError::Width {
            port: format!("{}.initial_q", spec.name),
            expected: n,
            got: q.len(),
        }),
        None => model.neutral_configuration(),
    };
    model.clamp_to_limits(&mut initial_q);
    let gripper = match &spec.gripper {
        Some(g) => Some(GripperDef {
            link: model.link(&g.link)?,
            offset: Transform::identity(),
            group: groups.iter().position(|x| x.config.name == g.group).ok_or_else(|| WorldError::Unknown {
                kind: "group",
                name: g.group.clone(),
            })?,
            open: g.open,
            closed: g.closed,
        }),
        None => None,
    };
    let graspable = spec.graspable_links.iter().map(|l| model.link(l)).collect::<Result<_, _>>()?;
    let seals = model
        .joints
        .iter()
        .filter_map(|j| Some((j.dof?, j.breakaway?)))
        .collect();
    let gravity_ff = groups.iter().any(|g| g.config.gravity_compensation);
    let nominal = RigidParams::nominal(&model);
    Ok(Articulation {
        name: spec.name.clone(),
        base: spec.base.into(),
        model,
        groups,
        initial_q,
        gripper,
        graspable,
        seals,
        gravity_ff,
        nominal,
    })
}

fn sensor_def(spec: &crate::sensing::SensorSpec, sh: &Shared) -> Result<SensorDef, WorldError> {
    let target_err = |t: &str| {
        WorldError::Sensor(SensorError::Target {
            name: spec.name.clone(),
            target: t.to_string(),
        })
    };
    let art = |sh: &Shared| -> Result<usize, WorldError> {
        match &spec.robot {
            Some(r) => sh.art_or_err(r),
            None if !sh.articulations.is_empty() => Ok(0),
            None => Err(target_err("robot")),
        }
    };
    let first = spec.target.first().map(String::as_str);
    let (source, width) = match spec.kind {
        SensorKind::JointState => {
            let a = art(sh)?;
            let m = &sh.articulations[a].model;
            let dofs: Vec<usize> = if spec.target.is_empty() {
                (0..m.num_dofs()).collect()
            } else {
                spec.target
                    .iter()
                    .map(|j| m.dof_of_joint(j).ok_or_else(|| target_err(j)))
                    .collect::<Result<_, _>>()?
            };
            let w = 2 * dofs.len();
            (SensorSource::Joints { art: a, dofs }, w)
        }
        SensorKind::BodyPose => {
            let t = first.ok_or_else(|| target_err(""))?;
            if let Some(b) = sh.boxes.iter().position(|b| b.name == t) {
                (SensorSource::Body(b), 7)
            } else {
                let a = art(sh)?;
                let link = sh.articulations[a].model.link_index(t).ok_or_else(|| target_err(t))?;
                (SensorSource::Link { art: a, link }, 7)
            }
        }
        SensorKind::AttachmentForce => (SensorSource::Attachment { art: art(sh)? }, 3),
        SensorKind::FootContact => {
            let a = art(sh)?;
            let w = 2 * sh.articulations[a].model.contact_points.len();
            (SensorSource::Feet { art: a }, w)
        }
        SensorKind::ActuatorDebug => {
            let a = art(sh)?;
            let t = first.ok_or_else(|| target_err(""))?;
            let g = sh.articulations[a]
                .groups
                .iter()
                .position(|g| g.config.name == t)
                .ok_or_else(|| target_err(t))?;
            let w = 3 * sh.articulations[a].groups[g].size();
            (SensorSource::Actuator { art: a, group: g }, w)
        }
        SensorKind::Particles => {
            let t = first.ok_or_else(|| target_err(""))?;
            let s = sh.systems.iter().position(|s| s.name == t).ok_or_else(|| target_err(t))?;
            let n = sh.systems[s].template.len();
            if let Some(&bad) = spec.indices.iter().find(|&&i| i >= n) {
                return Err(target_err(&bad.to_string()));
            }
            let w = 3 * spec.indices.len();
            (SensorSource::Particles {
                system: s,
                indices: spec.indices.clone(),
            }, w)
        }
    };
    Ok(SensorDef {
        spec: spec.clone(),
        source,
        width,
    })
}

fn randomization_width(entry: &RandomizationEntry, sh: &Shared) -> Result<usize, WorldError> {
    let unknown = |kind, name: &str| WorldError::Unknown {
        kind,
        name: name.to_string(),
    };
    Ok(match &entry.target {
        RandTarget::LinkMass { robot, link } => {
            sh.articulations[sh.art_or_err(robot)?].model.link(link)?;
            1
        }
        RandTarget::JointDamping { robot, joint } | RandTarget::JointFriction { robot, joint } => {
            let m = &sh.articulations[sh.art_or_err(robot)?].model;
            m.dof_of_joint(joint).ok_or_else(|| unknown("joint", joint))?;
            1
        }
        RandTarget::ActuatorGains { robot, group } => {
            let a = &sh.articulations[sh.art_or_err(robot)?];
            a.groups.iter().find(|g| &g.config.name == group).ok_or_else(|| unknown("group", group))?;
            1
        }
        RandTarget::InitialQ { robot, joints } | RandTarget::InitialQd { robot, joints } => {
            let m = &sh.articulations[sh.art_or_err(robot)?].model;
            for j in joints {
                m.dof_of_joint(j).ok_or_else(|| unknown("joint", j))?;
            }
            if joints.is_empty() {
                m.num_dofs()
            } else {
                joints.len()
            }
        }
        RandTarget::ObjectPose { object } => {
            if !sh.objects.contains_key(object) {
                return Err(unknown("object", object));
            }
            3
        }
        RandTarget::Goal { node } => sh
            .graph
            .nodes
            .iter()
            .find_map(|n| match (&n.spec.op, n.spec.name == *node) {
                (NodeOp::Goal { value }, true) => Some(value.len()),
                _ => None,
            })
            .ok_or_else(|| unknown("goal node", node))?,
    })
}

fn check_distribution(d: &Distribution, width: usize) -> Result<(), WorldError> {
    let (a, b) = match d {
        Distribution::Uniform { lo, hi } => (&lo.0, &hi.0),
        Distribution::Gaussian { mean, std } => (&mean.0, &std.0),
    };
    for v in [a, b] {
        if !(v.len() == 1 || v.len() == width) {
            return Err(WorldError::Invalid(format!(
                "distribution has {} components for width {width}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(WorldError::Invalid("non-finite distribution bound".into()));
        }
    }
    let ok = match d {
        Distribution::Uniform { .. } => (0..width).all(|i| pick(a, i) <= pick(b, i)),
        Distribution::Gaussian { .. } => (0..width).all(|i| pick(b, i) >= 0.0),
    };
    if !ok {
        return Err(WorldError::Invalid("empty uniform range or negative std".into()));
    }
    Ok(())
}

fn pick(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

/// Draws `width` components from `d`.
pub fn sample_distribution(d: &Distribution, width: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..width)
        .map(|i| match d {
            Distribution::Uniform { lo, hi } => {
                let (a, b) = (pick(&lo.0, i), pick(&hi.0, i));
                a + (b - a) * rng.gen::<f64>()
            }
            Distribution::Gaussian { mean, std } => {
                let z: f64 = rng.sample(StandardNormal);
                pick(&mean.0, i) + pick(&std.0, i) * z
            }
        })
        .collect()
}

impl Env {
    pub fn build(scene: &SceneConfig, num_envs: usize, hooks: &HookRegistry) -> Result<Env, WorldError> {
        if num_envs == 0 {
            return Err(WorldError::Invalid("num_envs must be positive".into()));
        }
        let w = &scene.world;
        if !(w.physics_rate > 0.0 && w.physics_rate.is_finite()) {
            return Err(WorldError::Invalid(format!("physics rate {}", w.physics_rate)));
        }
        let decimation = divisor(w.physics_rate, scene.env.control_rate).ok_or_else(|| WorldError::Rate {
            what: "control".into(),
            rate: scene.env.control_rate,
            physics: w.physics_rate,
        })?;
        let mut articulations = Vec::new();
        let mut boxes = Vec::new();
        let mut systems = Vec::new();
        let mut objects = HashMap::new();
        for r in &w.robots {
            articulations.push(build_articulation(r, w.physics_rate)?);
        }
        for o in &w.objects {
            let entry = match o {
                ObjectSpec::Articulation(r) => {
                    articulations.push(build_articulation(r, w.physics_rate)?);
                    ObjectRef::Articulation(articulations.len() - 1)
                }
                ObjectSpec::Box { name, size, mass, pose } => {
                    if !(*mass > 0.0 && size.iter().all(|&s| s > 0.0)) {
                        return Err(WorldError::Invalid(format!("box `{name}` needs positive mass and size")));
                    }
                    let (x, y, z) = (size[0], size[1], size[2]);
                    let k = mass / 12.0;
                    let inertia = crate::spatial::Mat3::from_diagonal(&Vec3::new(
                        k * (y * y + z * z),
                        k * (x * x + z * z),
                        k * (x * x + y * y),
                    ));
                    boxes.push(BoxDef {
                        name: name.clone(),
                        size: Vec3::from(*size),
                        body: FreeBody {
                            pose: (*pose).into(),
                            lin_vel: Vec3::zeros(),
                            ang_vel: Vec3::zeros(),
                            inertia: SpatialInertia::new(*mass, Vec3::zeros(), inertia),
                            support_height: w.table_height + 0.5 * z,
                        },
                    });
                    ObjectRef::Box(boxes.len() - 1)
                }
                ObjectSpec::Cloth {
                    name,
                    nx,
                    ny,
                    spacing,
                    mass,
                    compliance,
                    bending_compliance,
                    origin,
                    damping,
                    iterations,
                } => {
                    let mut s = build_cloth(*nx, *ny, *spacing, *mass, *compliance)?;
                    if let Some(b) = bending_compliance {
                        for c in s.constraints.iter_mut().filter(|c| c.kind == ConstraintKind::Bending) {
                            c.compliance = *b;
                        }
                    }
                    let o = Vec3::from(*origin);
                    s.x.iter_mut().for_each(|p| *p += o);
                    s.prev.clone_from(&s.x);
                    s.damping = *damping;
                    s.gravity = Vec3::from(w.gravity);
                    s.plane = Some(crate::softbody::ParticlePlane {
                        height: w.table_height,
                        friction: 1.0,
                    });
                    systems.push(SystemDef {
                        name: name.clone(),
                        template: s,
                        iterations: (*iterations).max(1),
                    });
                    ObjectRef::System(systems.len() - 1)
                }
                ObjectSpec::Beam {
                    name,
                    scenario,
                    origin,
                    iterations,
                } => {
                    let mut s = scenario.build()?;
                    let o = Vec3::from(*origin);
                    s.x.iter_mut().for_each(|p| *p += o);
                    s.prev.clone_from(&s.x);
                    s.gravity = Vec3::from(w.gravity);
                    systems.push(SystemDef {
                        name: name.clone(),
                        template: s,
                        iterations: (*iterations).max(1),
                    });
                    ObjectRef::System(systems.len() - 1)
                }
            };
            if objects.insert(o.name().to_string(), entry).is_some() {
                return Err(WorldError::Invalid(format!("duplicate object `{}`", o.name())));
            }
        }
        let mut names: Vec<&str> = articulations.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|p| p[0] == p[1]) {
            return Err(WorldError::Invalid("duplicate articulation name".into()));
        }
        let lookup = |name: &str| {
            hooks.get(name).ok_or_else(|| WorldError::Unknown {
                kind: "hook",
                name: name.to_string(),
            })
        };
        let mut shared = Shared {
            config: scene.clone(),
            physics_rate: w.physics_rate,
            dt: 1.0 / w.physics_rate,
            decimation,
            settings: DynamicsSettings {
                gravity: Vec3::from(w.gravity),
                ground: w.ground_contact.then(GroundContact::default),
            },
            grasp: w.grasp,
            articulations,
            boxes,
            systems,
            sensors: Vec::new(),
            objects,
            graph: GraphLayout::default(),
            reward: lookup(&scene.env.reward)?,
            termination: lookup(&scene.env.termination)?,
        };
        let mut seen = std::collections::HashSet::new();
        for s in &w.sensors {
            if !seen.insert(s.name.clone()) {
                return Err(WorldError::Invalid(format!("duplicate sensor `{}`", s.name)));
            }
            let def = sensor_def(s, &shared)?;
            // validates rate and noise widths
            SensorBuffer::new(s, def.width, shared.physics_rate, stream(0, 0, "probe"))?;
            shared.sensors.push(def);
        }
        shared.graph = GraphLayout::build(
            &scene.graph,
            &scene.env,
            w.physics_rate,
            &Catalog {
                arts: &shared.articulations,
                sensors: &shared.sensors,
            },
        )?;
        for e in &scene.env.randomization {
            let width = randomization_width(e, &shared)?;
            check_distribution(&e.distribution, width)?;
        }
        if scene.env.episode_length == 0 {
            return Err(WorldError::Invalid("episode_length must be positive".into()));
        }
        let obs_dim = shared.graph.observation_width();
        let act_dim = shared.graph.action_width();
        let shared = Arc::new(shared);
        let slots = (0..num_envs).map(|i| new_slot(&shared, i, 0)).collect::<Result<Vec<_>, _>>()?;
        let mut env = Env {
            shared,
            slots,
            pool: None,
            threads: 1,
            seed: 0,
            obs_dim,
            act_dim,
        };
        env.set_threads(worker_count());
        env.seed(0);
        Ok(env)
    }

    /// Caps the worker count; 1 runs every slot on the calling thread.
    pub fn set_threads(&mut self, threads: usize) {
        let threads = threads.max(1);
        self.threads = threads;
        self.pool = (threads > 1)
            .then(|| rayon::ThreadPoolBuilder::new().num_threads(threads).build().ok())
            .flatten();
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    pub fn num_envs(&self) -> usize {
        self.slots.len()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn decimation(&self) -> u64 {
        self.shared.decimation
    }

    pub fn physics_rate(&self) -> f64 {
        self.shared.physics_rate
    }

    pub fn control_rate(&self) -> f64 {
        self.shared.config.env.control_rate
    }

    pub fn dt(&self) -> f64 {
        self.shared.dt
    }

    pub fn config(&self) -> &SceneConfig {
        &self.shared.config
    }

    pub fn current_seed(&self) -> u64 {
        self.seed
    }

    pub fn observation_layout(&self) -> Vec<(String, usize)> {
        self.shared.graph.observations.iter().map(|(n, _, w)| (n.clone(), *w)).collect()
    }

    pub fn action_layout(&self) -> Vec<(String, usize)> {
        let g = &self.shared.graph;
        g.action_ports.iter().map(|&p| (g.ports[p].name.clone(), g.ports[p].width)).collect()
    }

    pub fn node_names(&self) -> Vec<String> {
        self.shared.graph.nodes.iter().map(|n| n.spec.name.clone()).collect()
    }

    pub fn sensor_names(&self) -> Vec<String> {
        self.shared.sensors.iter().map(|s| s.spec.name.clone()).collect()
    }

    pub fn articulation_index(&self, name: &str) -> Option<usize> {
        self.shared.articulation(name)
    }

    pub fn model(&self, art: usize) -> &RobotDescription {
        &self.shared.articulations[art].model
    }

    /// Recreates every random stream from `seed` and resets all slots.
    pub fn seed(&mut self, seed: u64) -> Vec<f64> {
        self.seed = seed;
        for slot in self.slots.iter_mut() {
            let counters = std::mem::take(&mut slot.counters);
            let markers = std::mem::take(&mut slot.markers);
            *slot = new_slot(&self.shared, slot.index, seed).expect("slot layout validated at build");
            slot.counters = counters;
            slot.markers = markers;
        }
        let all: Vec<usize> = (0..self.slots.len()).collect();
        self.reset(&all).expect("indices in range")
    }

    /// Resets the given slots, continuing their random streams. Returns their
    /// observations in the order given.
    pub fn reset(&mut self, ids: &[usize]) -> Result<Vec<f64>, WorldError> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.slots.len()) {
            return Err(WorldError::EnvIndex(bad));
        }
        let mut out = Vec::with_capacity(ids.len() * self.obs_dim);
        for &i in ids {
            reset_slot(&self.shared, &mut self.slots[i]);
            out.extend(observe(&self.shared, &self.slots[i]));
        }
        Ok(out)
    }

    pub fn observations(&self) -> Vec<f64> {
        self.slots.iter().flat_map(|s| observe(&self.shared, s)).collect()
    }

    pub fn observation(&self, env: usize) -> Vec<f64> {
        observe(&self.shared, &self.slots[env])
    }

    /// One control step for every slot; `actions` is `[num_envs × act_dim]`.
    pub fn step(&mut self, actions: &[f64]) -> Result<StepResult, WorldError> {
        let n = self.slots.len();
        let a = self.act_dim;
        if actions.len() != n * a {
            return Err(WorldError::ActionDim {
                expected: n * a,
                got: actions.len(),
            });
        }
        let chunks: Vec<&[f64]> = (0..n).map(|i| &actions[i * a..(i + 1) * a]).collect();
        let shared = &self.shared;
        let run = |slots: &mut Vec<EnvSlot>| -> Vec<(Vec<f64>, f64, bool, StepInfo)> {
            slots
                .par_iter_mut()
                .zip(chunks.par_iter())
                .map(|(s, act)| step_slot(shared, s, act))
                .collect()
        };
        let results = match &self.pool {
            Some(pool) => pool.install(|| run(&mut self.slots)),
            None => self
                .slots
                .iter_mut()
                .zip(&chunks)
                .map(|(s, act)| step_slot(shared, s, act))
                .collect(),
        };
        let mut out = StepResult {
            observations: Vec::with_capacity(n * self.obs_dim),
            rewards: Vec::with_capacity(n),
            dones: Vec::with_capacity(n),
            infos: Vec::with_capacity(n),
        };
        for (obs, r, d, info) in results {
            out.observations.extend(obs);
            out.rewards.push(r);
            out.dones.push(d);
            out.infos.push(info);
        }
        Ok(out)
    }

    pub fn view(&self, env: usize) -> EnvView<'_> {
        EnvView {
            shared: &self.shared,
            slot: &self.slots[env],
            data: &self.slots[env].reward_data,
        }
    }

    /// Mass of a link in one environment, after randomization.
    pub fn link_mass(&self, env: usize, art: usize, link: &str) -> Option<f64> {
        let l = self.shared.articulations.get(art)?.model.link_index(link)?;
        Some(self.slots.get(env)?.arts[art].params.inertias[l].mass)
    }

    pub fn counters(&self, env: usize) -> &Counters {
        &self.slots[env].counters
    }

    pub fn reset_counters(&mut self) {
        for s in self.slots.iter_mut() {
            s.counters = Counters {
                node_runs: vec![0; s.counters.node_runs.len()],
                sensor_refreshes: vec![0; s.counters.sensor_refreshes.len()],
                ..Counters::default()
            };
        }
    }

    /// Hash of the physical state of one slot (markers excluded).
    pub fn checksum(&self, env: usize) -> u64 {
        let s = &self.slots[env];
        let mut h = DefaultHasher::new();
        let mut put = |v: f64| v.to_bits().hash(&mut h);
        put(s.time);
        for a in &s.arts {
            a.q.iter().chain(&a.qd).for_each(|&v| put(v));
            a.params.damping.iter().chain(&a.params.friction).for_each(|&v| put(v));
            a.params.inertias.iter().for_each(|i| put(i.mass));
            a.base.to_pose7().iter().for_each(|&v| put(v));
            for g in &a.groups {
                g.active().iter().chain(g.latched()).for_each(|&v| put(v));
                put(g.gain_scale);
            }
            a.broken.iter().for_each(|&b| put(b as u8 as f64));
        }
        for b in &s.bodies {
            b.pose.to_pose7().iter().for_each(|&v| put(v));
            b.lin_vel.iter().chain(b.ang_vel.iter()).for_each(|&v| put(v));
        }
        for sys in &s.systems {
            sys.x.iter().chain(&sys.v).flat_map(|p| p.iter()).for_each(|&v| put(v));
        }
        for e in &s.attachments.entries {
            e.relative.to_pose7().iter().for_each(|&v| put(v));
        }
        h.finish()
    }

    pub fn markers(&self, env: usize) -> &[MarkerSpec] {
        &self.slots[env].markers
    }

    /// Adds or replaces a marker by name.
    pub fn set_marker(&mut self, env: usize, marker: MarkerSpec) {
        let m = &mut self.slots[env].markers;
        match m.iter_mut().find(|x| x.name == marker.name) {
            Some(x) => *x = marker,
            None => m.push(marker),
        }
    }

    pub fn remove_marker(&mut self, env: usize, name: &str) {
        self.slots[env].markers.retain(|m| m.name != name);
    }

    pub fn snapshot(&self, env: usize) -> Snapshot {
        let s = &self.slots[env];
        let sh = &self.shared;
        let mut bodies = Vec::new();
        let mut joints = Vec::new();
        for (a, art) in sh.articulations.iter().enumerate() {
            for (l, link) in art.model.links.iter().enumerate() {
                bodies.push((format!("{}/{}", art.name, link.name), s.arts[a].poses[l]));
            }
            for j in &art.model.joints {
                if let Some(d) = j.dof {
                    joints.push((format!("{}/{}", art.name, j.name), s.arts[a].q[d]));
                }
            }
        }
        for (b, def) in sh.boxes.iter().enumerate() {
            bodies.push((def.name.clone(), s.bodies[b].pose));
        }
        let particles = sh
            .systems
            .iter()
            .zip(&s.systems)
            .map(|(d, sys)| (d.name.clone(), sys.x.iter().map(|p| [p.x, p.y, p.z]).collect()))
            .collect();
        Snapshot {
            time: s.time,
            bodies,
            joints,
            markers: s.markers.clone(),
            particles,
        }
    }
}

fn new_slot(sh: &Shared, index: usize, seed: u64) -> Result<EnvSlot, WorldError> {
    let arts = sh
        .articulations
        .iter()
        .map(|a| {
            let n = a.model.num_dofs();
            ArtState {
                q: a.initial_q.clone(),
                qd: vec![0.0; n],
                params: a.nominal.clone(),
                ws: DynamicsWorkspace::new(&a.model),
                groups: a.groups.iter().map(ActuatorGroup::new_state).collect(),
                broken: vec![false; a.seals.len()],
                poses: a.model.link_poses(&a.base, &a.initial_q),
                tau: vec![0.0; n],
                base: a.base,
                gripper_closed: false,
                weld_force: Vec3::zeros(),
            }
        })
        .collect();
    let sensors = sh
        .sensors
        .iter()
        .map(|d| SensorBuffer::new(&d.spec, d.width, sh.physics_rate, stream(seed, index, &format!("sensor/{}", d.spec.name))))
        .collect::<Result<Vec<_>, _>>()?;
    let nodes = sh
        .graph
        .nodes
        .iter()
        .map(|n| match &n.spec.op {
            NodeOp::Osc { .. } => NodeState::Osc {
                target: Transform::identity(),
                seen: 0,
            },
            NodeOp::Quintic { command_rate, .. } => NodeState::Quintic {
                up: QuinticUpsampler::new(*command_rate),
                seen: 0,
            },
            _ => NodeState::Stateless,
        })
        .collect();
    Ok(EnvSlot {
        index,
        time: 0.0,
        substep: 0,
        step: 0,
        arts,
        bodies: sh.boxes.iter().map(|b| b.body).collect(),
        systems: sh.systems.iter().map(|s| s.template.clone()).collect(),
        attachments: AttachmentTable::new(index),
        sensors,
        ports: vec![0.0; sh.graph.width],
        stamps: vec![0; sh.graph.ports.len()],
        write_seq: 0,
        nodes,
        markers: sh.config.world.markers.clone(),
        rng: stream(seed, index, "reset"),
        reward_data: Vec::new(),
        termination_data: Vec::new(),
        counters: Counters {
            node_runs: vec![0; sh.graph.nodes.len()],
            sensor_refreshes: vec![0; sh.sensors.len()],
            ..Counters::default()
        },
        faulted: false,
        success: false,
        episode_return: 0.0,
    })
}

fn apply_randomization(sh: &Shared, slot: &mut EnvSlot) {
    for e in &sh.config.env.randomization {
        let width = randomization_width(e, sh).expect("validated at build");
        let v = sample_distribution(&e.distribution, width, &mut slot.rng);
        match &e.target {
            RandTarget::LinkMass { robot, link } => {
                let a = sh.art_or_err(robot).expect("validated");
                let l = sh.articulations[a].model.link(link).expect("validated");
                let nominal = sh.articulations[a].nominal.inertias[l];
                slot.arts[a].params.inertias[l] = nominal.with_mass(v[0]);
            }
            RandTarget::JointDamping { robot, joint } | RandTarget::JointFriction { robot, joint } => {
                let a = sh.art_or_err(robot).expect("validated");
                let d = sh.articulations[a].model.dof_of_joint(joint).expect("validated");
                let p = &mut slot.arts[a].params;
                match e.target {
                    RandTarget::JointDamping { .. } => p.damping[d] = v[0],
                    _ => p.friction[d] = v[0],
                }
            }
            RandTarget::ActuatorGains { robot, group } => {
                let a = sh.art_or_err(robot).expect("validated");
                let g = sh.articulations[a].groups.iter().position(|g| &g.config.name == group).expect("validated");
                slot.arts[a].groups[g].gain_scale = v[0];
            }
            RandTarget::InitialQ { robot, joints } | RandTarget::InitialQd { robot, joints } => {
                let a = sh.art_or_err(robot).expect("validated");
                let m = &sh.articulations[a].model;
                let dofs: Vec<usize> = if joints.is_empty() {
                    (0..m.num_dofs()).collect()
                } else {
                    joints.iter().map(|j| m.dof_of_joint(j).expect("validated")).collect()
                };
                let st = &mut slot.arts[a];
                let target = if matches!(e.target, RandTarget::InitialQ { .. }) {
                    &mut st.q
                } else {
                    &mut st.qd
                };
                for (d, x) in dofs.into_iter().zip(v) {
                    target[d] += x;
                }
            }
            RandTarget::ObjectPose { object } => {
                let off = Vec3::new(v[0], v[1], v[2]);
                match sh.objects[object] {
                    ObjectRef::Box(b) => slot.bodies[b].pose.position += off,
                    ObjectRef::Articulation(a) => slot.arts[a].base.position += off,
                    ObjectRef::System(s) => {
                        let sys = &mut slot.systems[s];
                        sys.x.iter_mut().for_each(|p| *p += off);
                        sys.prev.clone_from(&sys.x);
                    }
                }
            }
            RandTarget::Goal { node } => {
                let port = sh.graph.port(&format!("{node}.value")).expect("goal port");
                let p = &sh.graph.ports[port];
                slot.ports[p.offset..p.offset + p.width].copy_from_slice(&v);
            }
        }
    }
}

fn reset_slot(sh: &Shared, slot: &mut EnvSlot) {
    for (a, art) in sh.articulations.iter().enumerate() {
        let st = &mut slot.arts[a];
        st.q.clone_from(&art.initial_q);
        st.qd.fill(0.0);
        st.params.clone_from(&art.nominal);
        st.base = art.base;
        st.broken.fill(false);
        st.weld_force = Vec3::zeros();
        for g in st.groups.iter_mut() {
            g.gain_scale = 1.0;
        }
    }
    for (b, def) in sh.boxes.iter().enumerate() {
        slot.bodies[b] = def.body;
    }
    for (s, def) in sh.systems.iter().enumerate() {
        slot.systems[s].clone_from(&def.template);
    }
    slot.ports.fill(0.0);
    slot.stamps.fill(0);
    slot.write_seq = 0;
    for node in &sh.graph.nodes {
        if let NodeOp::Goal { value } = &node.spec.op {
            let p = &sh.graph.ports[node.outputs[0]];
            slot.ports[p.offset..p.offset + p.width].copy_from_slice(value);
        }
    }

    apply_randomization(sh, slot);

    for (a, art) in sh.articulations.iter().enumerate() {
        let st = &mut slot.arts[a];
        art.model.clamp_to_limits(&mut st.q);
        art.model.link_poses_into(&st.base, &st.q, &mut st.poses);
        for (g, gs) in art.groups.iter().zip(st.groups.iter_mut()) {
            g.reset(gs, &st.q, &st.qd);
        }
        st.gripper_closed = art.gripper.as_ref().is_some_and(|g| gripper_is_closed(g, &art.groups[g.group], &st.groups[g.group]));
    }
    slot.attachments.clear();

    // position-group ports start at the held joint positions
    for (port, bound) in sh.graph.bindings.iter().enumerate() {
        for &(a, g) in bound {
            let group = &sh.articulations[a].groups[g];
            if group.config.command_type == CommandType::Position {
                let p = &sh.graph.ports[port];
                let held = slot.arts[a].groups[g].latched().to_vec();
                slot.ports[p.offset..p.offset + p.width].copy_from_slice(&held);
            }
        }
    }
    for (i, node) in sh.graph.nodes.iter().enumerate() {
        match (&node.spec.op, &mut slot.nodes[i]) {
            (NodeOp::Osc { robot, link, offset, .. }, NodeState::Osc { target, seen }) => {
                let a = sh.art_or_err(robot).expect("validated");
                let l = sh.articulations[a].model.link_index(link).unwrap_or(0);
                *target = slot.arts[a].poses[l].compose(&Transform::from_translation(Vec3::from(*offset)));
                *seen = 0;
            }
            (NodeOp::Quintic { width, robot, group, .. }, NodeState::Quintic { up, seen }) => {
                let start = match (robot, group) {
                    (Some(r), Some(g)) => {
                        let a = sh.art_or_err(r).expect("validated");
                        let grp = sh.articulations[a].groups.iter().find(|x| &x.config.name == g);
                        grp.map(|grp| grp.dofs.iter().map(|&d| slot.arts[a].q[d]).collect())
                            .unwrap_or_else(|| vec![0.0; *width])
                    }
                    _ => vec![0.0; *width],
                };
                up.reset(&start);
                *seen = 0;
                let p = &sh.graph.ports[node.outputs[0]];
                slot.ports[p.offset..p.offset + p.width].copy_from_slice(&start);
            }
            _ => {}
        }
    }

    slot.time = 0.0;
    slot.substep = 0;
    slot.step = 0;
    slot.faulted = false;
    slot.success = false;
    slot.episode_return = 0.0;
    let mut truth = Vec::new();
    for i in 0..sh.sensors.len() {
        sensor_truth(sh, slot, i, &mut truth);
        slot.sensors[i].reset(&truth, 0.0);
    }
    let view = EnvView {
        shared: sh,
        slot,
        data: &[],
    };
    let reward_data = sh.reward.on_reset(&view);
    let termination_data = sh.termination.on_reset(&view);
    slot.reward_data = reward_data;
    slot.termination_data = termination_data;
    slot.counters.resets += 1;
}

fn gripper_is_closed(g: &GripperDef, group: &ActuatorGroup, state: &GroupState) -> bool {
    let cmd = state.active();
    if group.size() == 0 {
        return false;
    }
    let mean = cmd.iter().sum::<f64>() / cmd.len() as f64;
    (mean - g.closed).abs() < (mean - g.open).abs()
}

fn sensor_truth(sh: &Shared, slot: &EnvSlot, i: usize, out: &mut Vec<f64>) {
    out.clear();
    match &sh.sensors[i].source {
        SensorSource::Joints { art, dofs } => {
            let st = &slot.arts[*art];
            out.extend(dofs.iter().map(|&d| st.q[d]));
            out.extend(dofs.iter().map(|&d| st.qd[d]));
        }
        SensorSource::Link { art, link } => out.extend(slot.arts[*art].poses[*link].to_pose7()),
        SensorSource::Body(b) => out.extend(slot.bodies[*b].pose.to_pose7()),
        SensorSource::Attachment { art } => out.extend(slot.arts[*art].weld_force.iter()),
        SensorSource::Feet { art } => {
            for c in &slot.arts[*art].ws.contacts {
                out.push(if c.in_contact { 1.0 } else { 0.0 });
                out.push(c.normal_force.max(0.0));
            }
        }
        SensorSource::Actuator { art, group } => {
            let g = &slot.arts[*art].groups[*group];
            out.extend(g.latched());
            out.extend(&g.applied);
            out.extend(g.sea.iter().map(|s| s.motor_pos));
        }
        SensorSource::Particles { system, indices } => {
            let x = &slot.systems[*system].x;
            for &p in indices {
                out.extend(x[p].iter());
            }
        }
    }
}

fn observe(sh: &Shared, slot: &EnvSlot) -> Vec<f64> {
    let mut out = Vec::with_capacity(sh.graph.observation_width());
    for (_, src, _) in &sh.graph.observations {
        out.extend_from_slice(read_source(sh, slot, *src));
    }
    out
}

fn read_source<'a>(sh: &Shared, slot: &'a EnvSlot, src: Source) -> &'a [f64] {
    match src {
        Source::Port(id) => {
            let p = &sh.graph.ports[id];
            &slot.ports[p.offset..p.offset + p.width]
        }
        Source::Sensor(s) => slot.sensors[s].read().0,
    }
}

/// Writes a port and forwards it to any actuator group bound to it.
fn write_port(sh: &Shared, slot: &mut EnvSlot, port: usize, values: &[f64]) -> Result<(), ()> {
    let p = &sh.graph.ports[port];
    slot.ports[p.offset..p.offset + p.width].copy_from_slice(values);
    slot.write_seq += 1;
    slot.stamps[port] = slot.write_seq;
    for &(a, g) in &sh.graph.bindings[port] {
        let name = &sh.articulations[a].groups[g].config.name;
        slot.arts[a].groups[g].set_command(name, values).map_err(|_| ())?;
    }
    Ok(())
}

fn run_node(sh: &Shared, slot: &mut EnvSlot, ni: usize) -> Result<(), ()> {
    let node = &sh.graph.nodes[ni];
    let input: Vec<f64> = node.inputs.first().map(|&s| read_source(sh, slot, s).to_vec()).unwrap_or_default();
    let input_stamp = match node.inputs.first() {
        Some(Source::Port(p)) => slot.stamps[*p],
        Some(Source::Sensor(s)) => slot.counters.sensor_refreshes[*s],
        None => 0,
    };
    if input.iter().any(|v| !v.is_finite()) {
        return Err(());
    }
    let node_dt = node.divisor as f64 * sh.dt;
    let output: Vec<f64> = match &node.spec.op {
        NodeOp::DiffIk {
            robot,
            group,
            link,
            offset,
            params,
            command,
        } => {
            let a = sh.art_or_err(robot).map_err(|_| ())?;
            let art = &sh.articulations[a];
            let g = art.groups.iter().find(|x| &x.config.name == group).ok_or(())?;
            let l = art.model.link_index(link).ok_or(())?;
            let st = &slot.arts[a];
            let frame = st.poses[l].compose(&Transform::from_translation(Vec3::from(*offset)));
            let err: Vec<f64> = match command {
                PoseCommand::Delta => input.clone(),
                PoseCommand::Absolute => pose_error(&frame, &Transform::from_pose7(&input)).as_slice().to_vec(),
            };
            let full = art.model.point_jacobian(&st.poses, l, &frame.position);
            let j = DMatrix::from_fn(6, g.dofs.len(), |r, c| full[(r, g.dofs[c])]);
            let dq = dls_ik_step(&j, &err, params).map_err(|_| ())?;
            slot.counters.ik_solves += 1;
            g.dofs.iter().zip(dq.iter()).map(|(&d, dq)| st.q[d] + dq).collect()
        }
        NodeOp::Osc {
            robot,
            group,
            link,
            offset,
            params,
            command,
        } => {
            let a = sh.art_or_err(robot).map_err(|_| ())?;
            let art = &sh.articulations[a];
            let g = art.groups.iter().find(|x| &x.config.name == group).ok_or(())?;
            let l = art.model.link_index(link).ok_or(())?;
            let off = Transform::from_translation(Vec3::from(*offset));
            let NodeState::Osc { target, seen } = &mut slot.nodes[ni] else {
                return Err(());
            };
            let st = &mut slot.arts[a];
            if input_stamp != *seen {
                *seen = input_stamp;
                let frame = st.poses[l].compose(&off);
                *target = match command {
                    PoseCommand::Delta => {
                        let rot = UnitQuaternion::from_scaled_axis(Vec3::new(input[3], input[4], input[5]));
                        Transform::new(frame.position + Vec3::new(input[0], input[1], input[2]), rot * frame.orientation)
                    }
                    PoseCommand::Absolute => Transform::from_pose7(&input),
                };
            }
            let target = *target;
            let tau = osc_torques(
                &art.model,
                &st.params,
                &sh.settings.gravity,
                &st.base,
                &st.q,
                &st.qd,
                l,
                &off,
                &target,
                &nalgebra::Vector6::zeros(),
                params,
                &mut st.ws,
            )
            .map_err(|_| ())?;
            g.dofs.iter().map(|&d| tau[d]).collect()
        }
        NodeOp::Gripper { open, closed, .. } => {
            let width = sh.graph.ports[node.outputs[0]].width;
            vec![if input[0] > 0.0 { *closed } else { *open }; width]
        }
        NodeOp::Passthrough { .. } => input,
        NodeOp::Quintic { .. } => {
            let NodeState::Quintic { up, seen } = &mut slot.nodes[ni] else {
                return Err(());
            };
            if input_stamp != *seen {
                *seen = input_stamp;
                up.push(&input).map_err(|_| ())?;
            }
            match up.sample(node_dt) {
                Some((q, _, _)) => q,
                None => read_source(sh, slot, Source::Port(node.outputs[0])).to_vec(),
            }
        }
        NodeOp::Goal { .. } => {
            slot.counters.node_runs[ni] += 1;
            return Ok(());
        }
    };
    slot.counters.node_runs[ni] += 1;
    if output.iter().any(|v| !v.is_finite()) {
        return Err(());
    }
    write_port(sh, slot, node.outputs[0], &output)
}

/// Updates grasps after the articulations moved.
fn update_grasps(sh: &Shared, slot: &mut EnvSlot) {
    for (a, art) in sh.articulations.iter().enumerate() {
        let Some(g) = &art.gripper else { continue };
        let closed = gripper_is_closed(g, &art.groups[g.group], &slot.arts[a].groups[g.group]);
        let was = slot.arts[a].gripper_closed;
        slot.arts[a].gripper_closed = closed;
        let gid = (a, g.link);
        let gpose = slot.arts[a].poses[g.link].compose(&g.offset);
        if closed && !was && slot.attachments.active(gid).is_none() {
            let mut best: Option<(f64, AttachTarget, Transform)> = None;
            let consider = |t: AttachTarget, pose: Transform, best: &mut Option<(f64, AttachTarget, Transform)>| {
                let d = (pose.position - gpose.position).norm();
                if best.as_ref().map_or(true, |b| d < b.0) {
                    *best = Some((d, t, pose));
                }
            };
            for (b, body) in slot.bodies.iter().enumerate() {
                if !slot.attachments.is_held(AttachTarget::Body(b)) {
                    consider(AttachTarget::Body(b), body.pose, &mut best);
                }
            }
            for (oa, other) in sh.articulations.iter().enumerate() {
                for &l in &other.graspable {
                    if oa != a && !slot.attachments.is_held(AttachTarget::Link(oa, l)) {
                        consider(AttachTarget::Link(oa, l), slot.arts[oa].poses[l], &mut best);
                    }
                }
            }
            for (s, sys) in slot.systems.iter().enumerate() {
                for (p, x) in sys.x.iter().enumerate() {
                    if sys.w[p] > 0.0 && sys.kinematic[p].is_none() {
                        consider(AttachTarget::Particle(s, p), Transform::from_translation(*x), &mut best);
                    }
                }
            }
            if let Some((_, target, pose)) = best {
                if slot.attachments.attach(gid, &gpose, target, &pose, true, sh.grasp.radius).is_ok() {
                    if let AttachTarget::Particle(s, p) = target {
                        slot.systems[s].kinematic[p] = Some(pose.position);
                    }
                }
            }
        } else if !closed && was {
            if let Some(att) = slot.attachments.detach(gid) {
                if let AttachTarget::Particle(s, p) = att.object {
                    slot.systems[s].kinematic[p] = None;
                }
            }
            slot.arts[a].weld_force = Vec3::zeros();
        }
    }
}

/// Grasp frame pose of articulation `a`'s gripper.
fn gripper_frame(sh: &Shared, slot: &EnvSlot, a: usize) -> Transform {
    let g = sh.articulations[a].gripper.as_ref().expect("attachment implies gripper");
    slot.arts[a].poses[g.link].compose(&g.offset)
}

fn integrate_articulation(sh: &Shared, slot: &mut EnvSlot, a: usize) -> Result<(), ()> {
    let art = &sh.articulations[a];
    let gravity = sh.settings.gravity;
    // spring welds pulling held links of this articulation
    let welds: Vec<(usize, usize, Vec3)> = slot
        .attachments
        .entries
        .iter()
        .filter_map(|e| match e.object {
            AttachTarget::Link(oa, l) if oa == a && e.active => {
                Some((e.gripper.0, l, gripper_frame(sh, slot, e.gripper.0).compose(&e.relative).position))
            }
            _ => None,
        })
        .collect();
    // held boxes ride on the gripper link
    let payloads: Vec<(usize, SpatialInertia, Transform)> = match &art.gripper {
        Some(g) => match slot.attachments.active((a, g.link)).map(|e| (e.object, e.relative)) {
            Some((AttachTarget::Body(b), rel)) => vec![(g.link, slot.bodies[b].inertia, g.offset.compose(&rel))],
            _ => Vec::new(),
        },
        None => Vec::new(),
    };
    let mut weld_forces = Vec::new();
    let st = &mut slot.arts[a];
    let carried;
    let params = if payloads.is_empty() {
        &st.params
    } else {
        carried = RigidParams {
            inertias: with_payloads(&st.params.inertias, &payloads),
            ..st.params.clone()
        };
        &carried
    };
    st.tau.fill(0.0);
    let needs_kin = art.gravity_ff || !welds.is_empty() || !art.seals.is_empty();
    if needs_kin {
        st.ws.update_kinematics(&art.model, &st.base, &st.q, &params.inertias);
    }
    if art.gravity_ff {
        st.ws.compute_gravity_torque(&art.model, &gravity);
    }
    st.ws.armature.fill(0.0);
    for (g, gs) in art.groups.iter().zip(st.groups.iter_mut()) {
        let ff = g.config.gravity_compensation.then_some(st.ws.gravity_torque.as_slice());
        g.compute_torques_implicit(gs, &st.q, &st.qd, ff, sh.dt, &mut st.tau, &mut st.ws.armature);
    }
    let mut loads = Vec::with_capacity(welds.len());
    if !welds.is_empty() {
        st.ws.update_velocities(&art.model, &st.qd);
        for &(holder, l, target) in &welds {
            let (p, v) = st.ws.point_state(l, &Vec3::zeros());
            let f = sh.grasp.weld_stiffness * (target - p) - sh.grasp.weld_damping * v;
            loads.push(PointLoad { link: l, point: p, force: f });
            weld_forces.push((holder, f));
        }
    }
    let mut locked = Vec::new();
    if !art.seals.is_empty() {
        let mut generalized = vec![0.0; art.model.num_dofs()];
        for load in &loads {
            st.ws.add_point_force(&art.model, load.link, &load.point, &load.force, &mut generalized);
        }
        for (si, (dof, spec)) in art.seals.iter().enumerate() {
            let mut seal = BreakawaySeal {
                broken: st.broken[si],
                hold_torque: spec.hold_torque,
                break_threshold: spec.break_threshold,
            };
            let r = seal.update(st.tau[*dof] + generalized[*dof]);
            st.broken[si] = seal.broken;
            if r.locked {
                locked.push(*dof);
            } else {
                st.tau[*dof] += r.torque;
            }
        }
    }
    let tau = std::mem::take(&mut st.tau);
    let res = integrate(
        &art.model,
        params,
        &sh.settings,
        &st.base,
        &mut st.q,
        &mut st.qd,
        &tau,
        &loads,
        &locked,
        sh.dt,
        &mut st.ws,
    );
    st.tau = tau;
    art.model.link_poses_into(&st.base, &st.q, &mut st.poses);
    for (holder, f) in weld_forces {
        slot.arts[holder].weld_force = f;
    }
    res.map_err(|_| ())
}

fn substep(sh: &Shared, slot: &mut EnvSlot) -> Result<(), ()> {
    for &ni in &sh.graph.order {
        if slot.substep % sh.graph.nodes[ni].divisor == 0 {
            run_node(sh, slot, ni)?;
        }
    }
    for a in 0..sh.articulations.len() {
        integrate_articulation(sh, slot, a)?;
    }
    update_grasps(sh, slot);

    let gravity = sh.settings.gravity;
    for b in 0..slot.bodies.len() {
        let holder = slot
            .attachments
            .entries
            .iter()
            .find(|e| e.active && e.object == AttachTarget::Body(b))
            .map(|e| (e.gripper.0, e.relative));
        match holder {
            Some((a, rel)) => {
                let target = gripper_frame(sh, slot, a).compose(&rel);
                let body = &mut slot.bodies[b];
                let v0 = body.lin_vel;
                body.follow(&target, sh.dt);
                let m = body.inertia.mass;
                slot.arts[a].weld_force = m * ((body.lin_vel - v0) / sh.dt - gravity);
            }
            None => slot.bodies[b].integrate(&gravity, sh.dt),
        }
    }
    for s in 0..slot.systems.len() {
        let held: Vec<(usize, usize, Transform)> = slot
            .attachments
            .entries
            .iter()
            .filter_map(|e| match e.object {
                AttachTarget::Particle(ps, p) if ps == s && e.active => Some((e.gripper.0, p, e.relative)),
                _ => None,
            })
            .collect();
        for (a, p, rel) in held {
            slot.systems[s].kinematic[p] = Some(gripper_frame(sh, slot, a).compose(&rel).position);
        }
        xpbd_step(&mut slot.systems[s], sh.dt, sh.systems[s].iterations).map_err(|_| ())?;
    }

    slot.substep += 1;
    slot.time = slot.substep as f64 * sh.dt;
    slot.counters.substeps += 1;
    let mut truth = Vec::new();
    for i in 0..slot.sensors.len() {
        if slot.sensors[i].advance(sh.dt) {
            sensor_truth(sh, slot, i, &mut truth);
            let t = slot.time;
            slot.sensors[i].refresh(&truth, t);
            slot.counters.sensor_refreshes[i] += 1;
        }
    }
    Ok(())
}

fn step_slot(sh: &Shared, slot: &mut EnvSlot, action: &[f64]) -> (Vec<f64>, f64, bool, StepInfo) {
    let mut ok = action.iter().all(|v| v.is_finite());
    if ok {
        let mut offset = 0;
        for &port in &sh.graph.action_ports {
            let w = sh.graph.ports[port].width;
            if write_port(sh, slot, port, &action[offset..offset + w]).is_err() {
                ok = false;
                break;
            }
            offset += w;
        }
    }
    if ok {
        for _ in 0..sh.decimation {
            if substep(sh, slot).is_err() {
                ok = false;
                break;
            }
        }
    }
    slot.step += 1;
    slot.counters.control_steps += 1;
    let mut info = StepInfo::default();
    let (reward, outcome) = if ok {
        let rv = EnvView {
            shared: sh,
            slot,
            data: &slot.reward_data,
        };
        let reward = sh.reward.reward(&rv);
        let tv = EnvView {
            shared: sh,
            slot,
            data: &slot.termination_data,
        };
        (reward, sh.termination.termination(&tv))
    } else {
        slot.faulted = true;
        slot.counters.faults += 1;
        info.faulted = true;
        (0.0, Outcome::default())
    };
    let reward = if reward.is_finite() { reward } else { 0.0 };
    slot.episode_return += reward;
    slot.success |= outcome.success;
    info.success = slot.success;
    info.truncated = ok && !outcome.terminated && slot.step >= sh.config.env.episode_length;
    let done = info.faulted || outcome.terminated || info.truncated;
    if done {
        info.terminal_observation = Some(observe(sh, slot));
        info.episode_return = Some(slot.episode_return);
        reset_slot(sh, slot);
    }
    (observe(sh, slot), reward, done, info)
}
