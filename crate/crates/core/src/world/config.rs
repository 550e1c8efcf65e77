//! Scene and task configuration documents.

use serde::{Deserialize, Deserializer, Serialize};

use crate::actuation::ActuatorGroupConfig;
use crate::motiongen::{IkParams, OscParams};
use crate::sensing::SensorSpec;
use crate::softbody::BeamScenario;
use crate::spatial::TransformDoc;

/// A complete scene: world, agent graph, and the graph cut.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SceneConfig {
    pub world: WorldConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    pub env: EnvConfig,
}

impl SceneConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

fn default_physics_rate() -> f64 {
    1000.0
}

fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -crate::dynamics::STANDARD_GRAVITY]
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct WorldConfig {
    #[serde(default = "default_physics_rate")]
    pub physics_rate: f64,
    #[serde(default = "default_gravity")]
    pub gravity: [f64; 3],
    /// Penalty contact between robot contact points and the plane z = 0.
    #[serde(default)]
    pub ground_contact: bool,
    /// Support height for boxes and cloth.
    #[serde(default)]
    pub table_height: f64,
    pub robots: Vec<RobotSpec>,
    #[serde(default)]
    pub objects: Vec<ObjectSpec>,
    #[serde(default)]
    pub sensors: Vec<SensorSpec>,
    #[serde(default)]
    pub markers: Vec<MarkerSpec>,
    #[serde(default)]
    pub grasp: GraspSettings,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct GraspSettings {
    pub radius: f64,
    /// Spring welding a grasped articulation link to the gripper, N/m.
    pub weld_stiffness: f64,
    pub weld_damping: f64,
}

impl Default for GraspSettings {
    fn default() -> Self {
        Self {
            radius: crate::dynamics::DEFAULT_GRASP_RADIUS,
            weld_stiffness: 2000.0,
            weld_damping: 100.0,
        }
    }
}

/// An articulation instance, either a robot or an articulated object.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RobotSpec {
    pub name: String,
    /// Name of a shipped fixture; ignored when `description` is given.
    #[serde(default)]
    pub fixture: Option<String>,
    /// Inline robot description document.
    #[serde(default)]
    pub description: Option<serde_json::Value>,
    #[serde(default)]
    pub base: TransformDoc,
    /// Reset configuration; the neutral configuration when absent.
    #[serde(default)]
    pub initial_q: Option<Vec<f64>>,
    /// Replacements for groups of the description, matched by name.
    #[serde(default)]
    pub groups: Vec<ActuatorGroupConfig>,
    #[serde(default)]
    pub gripper: Option<GripperSpec>,
    /// Links a gripper may weld to.
    #[serde(default)]
    pub graspable_links: Vec<String>,
}

impl RobotSpec {
    pub fn fixture(name: &str, fixture: &str) -> Self {
        Self {
            name: name.to_string(),
            fixture: Some(fixture.to_string()),
            description: None,
            base: TransformDoc::default(),
            initial_q: None,
            groups: Vec::new(),
            gripper: None,
            graspable_links: Vec::new(),
        }
    }
}

/// Grasp frame and the group whose command opens and closes it.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GripperSpec {
    pub link: String,
    pub group: String,
    pub open: f64,
    pub closed: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectSpec {
    /// Free rigid box resting on the table.
    Box {
        name: String,
        size: [f64; 3],
        mass: f64,
        pose: TransformDoc,
    },
    Articulation(RobotSpec),
    Cloth {
        name: String,
        nx: usize,
        ny: usize,
        spacing: f64,
        mass: f64,
        #[serde(default)]
        compliance: f64,
        /// Compliance of the bending pairs; `compliance` when absent.
        #[serde(default)]
        bending_compliance: Option<f64>,
        /// Position of particle (0, 0).
        origin: [f64; 3],
        #[serde(default = "default_cloth_damping")]
        damping: f64,
        #[serde(default = "default_cloth_iterations")]
        iterations: usize,
    },
    Beam {
        name: String,
        #[serde(default)]
        scenario: BeamScenario,
        /// Offset added to the scenario geometry.
        #[serde(default)]
        origin: [f64; 3],
        #[serde(default = "default_beam_iterations")]
        iterations: usize,
    },
}

fn default_cloth_damping() -> f64 {
    1.0
}

fn default_cloth_iterations() -> usize {
    10
}

fn default_beam_iterations() -> usize {
    crate::softbody::BEAM_ITERATIONS
}

impl ObjectSpec {
    pub fn name(&self) -> &str {
        match self {
            ObjectSpec::Box { name, .. } | ObjectSpec::Cloth { name, .. } | ObjectSpec::Beam { name, .. } => name,
            ObjectSpec::Articulation(r) => &r.name,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    Sphere,
    Box,
    Frame,
}

/// Visualization-only primitive.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MarkerSpec {
    pub name: String,
    pub kind: MarkerKind,
    #[serde(default)]
    pub pose: TransformDoc,
    #[serde(default = "default_marker_scale")]
    pub scale: [f64; 3],
    #[serde(default = "default_marker_color")]
    pub color: [f64; 4],
}

fn default_marker_scale() -> [f64; 3] {
    [0.02; 3]
}

fn default_marker_color() -> [f64; 4] {
    [1.0, 0.5, 0.0, 1.0]
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct GraphConfig {
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Perception,
    Action,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NodeSpec {
    pub name: String,
    pub kind: NodeKind,
    pub rate: f64,
    pub op: NodeOp,
}

/// How a pose command is read.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum PoseCommand {
    /// Six values: translation and rotation vector relative to the current frame pose.
    #[default]
    Delta,
    /// Seven values: position and (w,x,y,z) orientation in the world.
    Absolute,
}

impl PoseCommand {
    pub fn width(self) -> usize {
        match self {
            PoseCommand::Delta => 6,
            PoseCommand::Absolute => 7,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeOp {
    /// Input `command`; output `joint_targets` for a position group.
    DiffIk {
        robot: String,
        group: String,
        link: String,
        #[serde(default)]
        offset: [f64; 3],
        #[serde(default)]
        params: IkParams,
        #[serde(default)]
        command: PoseCommand,
    },
    /// Input `command`; output `torques` for a torque group.
    Osc {
        robot: String,
        group: String,
        link: String,
        #[serde(default)]
        offset: [f64; 3],
        #[serde(default)]
        params: OscParams,
        #[serde(default)]
        command: PoseCommand,
    },
    /// Input `command` (positive closes); output `targets`.
    Gripper { robot: String, group: String, open: f64, closed: f64 },
    /// Input `in`; output `out`.
    Passthrough { width: usize },
    /// Input `command` arriving at `command_rate`; output `targets` sampled
    /// at the node rate. Starts from the group's joint positions when given.
    Quintic {
        width: usize,
        command_rate: f64,
        #[serde(default)]
        robot: Option<String>,
        #[serde(default)]
        group: Option<String>,
    },
    /// Output `value`, constant within an episode.
    Goal { value: Vec<f64> },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EdgeSpec {
    /// `node.port` or `sensor:name`.
    pub from: String,
    /// `node.port` or `actuator:robot.group`.
    pub to: String,
}

impl EdgeSpec {
    pub fn new(from: &str, to: &str) -> Self {
        Self {
            from: from.to_string(),
            to: to.to_string(),
        }
    }
}

fn default_reward() -> String {
    "none".to_string()
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<String>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(String),
        Many(Vec<String>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(s) => vec![s],
        OneOrMany::Many(v) => v,
    })
}

/// The graph cut.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EnvConfig {
    /// Ports fed by the external action, concatenated in order.
    #[serde(deserialize_with = "one_or_many")]
    pub action_port: Vec<String>,
    pub observation_ports: Vec<String>,
    #[serde(default = "default_reward")]
    pub reward: String,
    #[serde(default = "default_reward")]
    pub termination: String,
    pub control_rate: f64,
    /// Control steps per episode.
    pub episode_length: usize,
    #[serde(default)]
    pub randomization: Vec<RandomizationEntry>,
}

/// Scalar or per-component values.
#[derive(Clone, Debug, Serialize, PartialEq)]
#[serde(transparent)]
pub struct Values(pub Vec<f64>);

impl<'de> Deserialize<'de> for Values {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            One(f64),
            Many(Vec<f64>),
        }
        Ok(Values(match Raw::deserialize(d)? {
            Raw::One(v) => vec![v],
            Raw::Many(v) => v,
        }))
    }
}

impl From<f64> for Values {
    fn from(v: f64) -> Self {
        Values(vec![v])
    }
}

impl From<Vec<f64>> for Values {
    fn from(v: Vec<f64>) -> Self {
        Values(v)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Distribution {
    Uniform { lo: Values, hi: Values },
    Gaussian { mean: Values, std: Values },
}

impl Distribution {
    pub fn uniform(lo: impl Into<Values>, hi: impl Into<Values>) -> Self {
        Distribution::Uniform { lo: lo.into(), hi: hi.into() }
    }

    pub fn gaussian(mean: impl Into<Values>, std: impl Into<Values>) -> Self {
        Distribution::Gaussian {
            mean: mean.into(),
            std: std.into(),
        }
    }
}

/// What a randomization entry writes. Masses, damping, friction, and goals
/// are absolute; gains are a scale factor on kp and kd; initial state and
/// object poses are offsets from the nominal values.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RandTarget {
    LinkMass { robot: String, link: String },
    JointDamping { robot: String, joint: String },
    JointFriction { robot: String, joint: String },
    ActuatorGains { robot: String, group: String },
    /// All DoFs when `joints` is empty.
    InitialQ {
        robot: String,
        #[serde(default)]
        joints: Vec<String>,
    },
    InitialQd {
        robot: String,
        #[serde(default)]
        joints: Vec<String>,
    },
    /// xyz offset of a box, particle system, or articulated object base.
    ObjectPose { object: String },
    Goal { node: String },
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RandomizationEntry {
    pub target: RandTarget,
    pub distribution: Distribution,
}
