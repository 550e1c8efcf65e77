//! Robot and scene descriptions, forward kinematics, and geometric Jacobians.
//!
//! A [`RobotDescription`] is parsed from a JSON document with top-level keys
//! `name`, `units`, `links`, `joints`, `actuator_groups`, and optionally
//! `contact_points`. Joint coordinates are numbered in document order over the
//! non-fixed joints. All quantities are SI; the `units` block must say so.

use std::collections::HashMap;

use nalgebra::{DMatrix, UnitQuaternion, Unit};
use serde::{Deserialize, Serialize};

use crate::actuation::{ActuatorGroupConfig, TransmissionModel};
use crate::spatial::{spatial, Mat3, SpatialInertia, SpatialVec, Transform, TransformDoc, Vec3};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("malformed description: {0}")]
    Malformed(String),
    #[error("cycle in link tree: {0}")]
    Cycle(String),
    #[error("joint `{joint}` references unknown link `{link}`")]
    UnknownLink { joint: String, link: String },
    #[error("limit violation: {0}")]
    Limits(String),
    #[error("unsupported {quantity} unit `{found}` (expected `{expected}`)")]
    Units {
        quantity: &'static str,
        found: String,
        expected: &'static str,
    },
    #[error("invalid mass properties for link `{0}`")]
    MassProperties(String),
    #[error("actuator groups: {0}")]
    Groups(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no link named `{0}`")]
    NoSuchLink(String),
    #[error("no joint named `{0}`")]
    NoSuchJoint(String),
    #[error("unknown fixture `{0}`")]
    UnknownFixture(String),
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum JointType {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct JointLimits {
    pub lower: f64,
    pub upper: f64,
    pub velocity: f64,
    pub effort: f64,
}

/// Magnetic-seal style hinge: holds until the applied load exceeds the threshold.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct BreakawaySpec {
    pub hold_torque: f64,
    pub break_threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Link {
    pub name: String,
    pub mass: f64,
    pub com: Vec3,
    pub inertia: Mat3,
}

impl Link {
    pub fn spatial_inertia(&self) -> SpatialInertia {
        SpatialInertia::new(self.mass, self.com, self.inertia)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub joint_type: JointType,
    pub parent: usize,
    pub child: usize,
    pub origin: Transform,
    pub axis: Vec3,
    pub limits: JointLimits,
    pub damping: f64,
    pub dry_friction: f64,
    /// Unactuated joints (virtual floating-base joints, object hinges) belong to no group.
    pub actuated: bool,
    pub breakaway: Option<BreakawaySpec>,
    pub dof: Option<usize>,
}

impl Joint {
    /// Child frame relative to the joint origin for coordinate `q`.
    pub fn motion(&self, q: f64) -> Transform {
        match self.joint_type {
            JointType::Revolute => Transform::new(
                Vec3::zeros(),
                UnitQuaternion::from_axis_angle(&Unit::new_unchecked(self.axis), q),
            ),
            JointType::Prismatic => Transform::from_translation(self.axis * q),
            JointType::Fixed => Transform::identity(),
        }
    }
}

/// A point on a link that interacts with the ground plane (feet).
#[derive(Clone, Debug, PartialEq)]
pub struct ContactPoint {
    pub name: String,
    pub link: usize,
    pub point: Vec3,
}

/// Immutable articulation model.
#[derive(Clone, Debug, PartialEq)]
pub struct RobotDescription {
    pub name: String,
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    pub actuator_groups: Vec<ActuatorGroupConfig>,
    pub contact_points: Vec<ContactPoint>,
    root: usize,
    link_parent_joint: Vec<Option<usize>>,
    link_parent: Vec<Option<usize>>,
    topo_links: Vec<usize>,
    dof_joints: Vec<usize>,
    link_support: Vec<Vec<usize>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    name: String,
    units: RawUnits,
    links: Vec<RawLink>,
    joints: Vec<RawJoint>,
    #[serde(default)]
    actuator_groups: Vec<ActuatorGroupConfig>,
    #[serde(default)]
    contact_points: Vec<RawContact>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUnits {
    length: String,
    angle: String,
    mass: String,
    time: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    name: String,
    mass: f64,
    #[serde(default)]
    com: [f64; 3],
    inertia: [[f64; 3]; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJoint {
    name: String,
    #[serde(rename = "type")]
    joint_type: JointType,
    parent: String,
    child: String,
    #[serde(default)]
    origin: TransformDoc,
    #[serde(default = "default_axis")]
    axis: [f64; 3],
    #[serde(default)]
    limits: Option<JointLimits>,
    #[serde(default)]
    damping: f64,
    #[serde(default)]
    dry_friction: f64,
    #[serde(default = "default_true")]
    actuated: bool,
    #[serde(default)]
    breakaway: Option<BreakawaySpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawContact {
    name: String,
    link: String,
    point: [f64; 3],
}

fn default_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_true() -> bool {
    true
}

fn check_unit(quantity: &'static str, found: &str, expected: &'static str) -> Result<(), ModelError> {
    if found == expected {
        Ok(())
    } else {
        Err(ModelError::Units {
            quantity,
            found: found.to_string(),
            expected,
        })
    }
}

/// Parses and validates a robot description document.
pub fn parse_robot_description(text: &str) -> Result<RobotDescription, ModelError> {
    let raw: RawDoc =
        serde_json::from_str(text).map_err(|e| ModelError::Malformed(e.to_string()))?;
    check_unit("length", &raw.units.length, "m")?;
    check_unit("angle", &raw.units.angle, "rad")?;
    check_unit("mass", &raw.units.mass, "kg")?;
    check_unit("time", &raw.units.time, "s")?;

    let mut link_index = HashMap::new();
    let mut links = Vec::with_capacity(raw.links.len());
    for (i, l) in raw.links.iter().enumerate() {
        if link_index.insert(l.name.clone(), i).is_some() {
            return Err(ModelError::Malformed(format!("duplicate link `{}`", l.name)));
        }
        let inertia = Mat3::from_fn(|r, c| l.inertia[r][c]);
        if !(l.mass > 0.0 && l.mass.is_finite()) {
            return Err(ModelError::MassProperties(l.name.clone()));
        }
        if (inertia - inertia.transpose()).abs().max() > 1e-12 * (1.0 + inertia.abs().max())
            || inertia.symmetric_eigen().eigenvalues.min() < -1e-12
        {
            return Err(ModelError::MassProperties(l.name.clone()));
        }
        links.push(Link {
            name: l.name.clone(),
            mass: l.mass,
            com: Vec3::from(l.com),
            inertia,
        });
    }
    if links.is_empty() {
        return Err(ModelError::Malformed("no links".into()));
    }

    let mut joints = Vec::with_capacity(raw.joints.len());
    let mut joint_names = HashMap::new();
    let mut link_parent_joint: Vec<Option<usize>> = vec![None; links.len()];
    let mut dof = 0usize;
    let mut dof_joints = Vec::new();
    for (ji, j) in raw.joints.iter().enumerate() {
        if joint_names.insert(j.name.clone(), ji).is_some() {
            return Err(ModelError::Malformed(format!("duplicate joint `{}`", j.name)));
        }
        let lookup = |name: &str| {
            link_index.get(name).copied().ok_or_else(|| ModelError::UnknownLink {
                joint: j.name.clone(),
                link: name.to_string(),
            })
        };
        let parent = lookup(&j.parent)?;
        let child = lookup(&j.child)?;
        if parent == child {
            return Err(ModelError::Cycle(format!(
                "joint `{}` connects link `{}` to itself",
                j.name, j.parent
            )));
        }
        if let Some(prev) = link_parent_joint[child] {
            return Err(ModelError::Cycle(format!(
                "link `{}` has two parent joints (`{}` and `{}`)",
                j.child, raw.joints[prev].name, j.name
            )));
        }
        link_parent_joint[child] = Some(ji);

        let axis = Vec3::from(j.axis);
        let n = axis.norm();
        if j.joint_type != JointType::Fixed && !(n > 1e-12 && n.is_finite()) {
            return Err(ModelError::Malformed(format!("joint `{}` has a zero axis", j.name)));
        }
        let q = j.origin.quat;
        let qn = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if !(qn > 1e-9 && qn.is_finite()) {
            return Err(ModelError::Malformed(format!(
                "joint `{}` origin quaternion has zero norm",
                j.name
            )));
        }
        let limits = match (j.joint_type, j.limits) {
            (JointType::Fixed, l) => l.unwrap_or(JointLimits {
                lower: 0.0,
                upper: 0.0,
                velocity: 0.0,
                effort: 0.0,
            }),
            (_, Some(l)) => l,
            (_, None) => {
                return Err(ModelError::Limits(format!("joint `{}` has no limits", j.name)))
            }
        };
        let finite = [limits.lower, limits.upper, limits.velocity, limits.effort]
            .iter()
            .all(|v| v.is_finite());
        if !finite || limits.lower > limits.upper || limits.velocity < 0.0 || limits.effort < 0.0 {
            return Err(ModelError::Limits(format!(
                "joint `{}`: lower ≤ upper and non-negative velocity/effort required",
                j.name
            )));
        }
        if j.damping < 0.0 || j.dry_friction < 0.0 {
            return Err(ModelError::Limits(format!(
                "joint `{}`: damping and friction must be non-negative",
                j.name
            )));
        }
        if let Some(b) = j.breakaway {
            if !(b.hold_torque >= 0.0 && b.break_threshold > 0.0) {
                return Err(ModelError::Limits(format!(
                    "joint `{}`: breakaway torques must be positive",
                    j.name
                )));
            }
        }
        let dof_index = if j.joint_type == JointType::Fixed {
            None
        } else {
            dof_joints.push(ji);
            dof += 1;
            Some(dof - 1)
        };
        joints.push(Joint {
            name: j.name.clone(),
            joint_type: j.joint_type,
            parent,
            child,
            origin: j.origin.into(),
            axis: if j.joint_type == JointType::Fixed { axis } else { axis / n },
            limits,
            damping: j.damping,
            dry_friction: j.dry_friction,
            actuated: j.actuated && j.joint_type != JointType::Fixed,
            breakaway: j.breakaway,
            dof: dof_index,
        });
    }

    let roots: Vec<usize> = (0..links.len())
        .filter(|&l| link_parent_joint[l].is_none())
        .collect();
    if roots.len() != 1 {
        if roots.is_empty() {
            return Err(ModelError::Cycle("every link has a parent".into()));
        }
        return Err(ModelError::Malformed(format!(
            "expected a single base link, found {} roots",
            roots.len()
        )));
    }
    let root = roots[0];

    // breadth-first order from the root; unreachable links sit on a cycle
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); links.len()];
    for j in &joints {
        children[j.parent].push(j.child);
    }
    let mut topo_links = vec![root];
    let mut head = 0;
    while head < topo_links.len() {
        let l = topo_links[head];
        head += 1;
        topo_links.extend(children[l].iter().copied());
    }
    if topo_links.len() != links.len() {
        let stray = (0..links.len())
            .find(|l| !topo_links.contains(l))
            .map(|l| links[l].name.clone())
            .unwrap_or_default();
        return Err(ModelError::Cycle(format!(
            "link `{stray}` is not reachable from base `{}`",
            links[root].name
        )));
    }

    let link_parent: Vec<Option<usize>> = link_parent_joint
        .iter()
        .map(|pj| pj.map(|j| joints[j].parent))
        .collect();
    let mut link_support: Vec<Vec<usize>> = vec![Vec::new(); links.len()];
    for &l in &topo_links {
        if let Some(j) = link_parent_joint[l] {
            let mut s = link_support[joints[j].parent].clone();
            if let Some(d) = joints[j].dof {
                s.push(d);
            }
            link_support[l] = s;
        }
    }

    let mut contact_points = Vec::new();
    for c in &raw.contact_points {
        let link = *link_index
            .get(&c.link)
            .ok_or_else(|| ModelError::NoSuchLink(c.link.clone()))?;
        contact_points.push(ContactPoint {
            name: c.name.clone(),
            link,
            point: Vec3::from(c.point),
        });
    }

    let model = RobotDescription {
        name: raw.name,
        links,
        joints,
        actuator_groups: raw.actuator_groups,
        contact_points,
        root,
        link_parent_joint,
        link_parent,
        topo_links,
        dof_joints,
        link_support,
    };
    model.validate_groups()?;
    Ok(model)
}

impl RobotDescription {
    fn validate_groups(&self) -> Result<(), ModelError> {
        let mut owner: Vec<Option<&str>> = vec![None; self.num_dofs()];
        let mut names = std::collections::HashSet::new();
        for g in &self.actuator_groups {
            if !names.insert(g.name.as_str()) {
                return Err(ModelError::Groups(format!("duplicate group `{}`", g.name)));
            }
            if g.joints.is_empty() {
                return Err(ModelError::Groups(format!("group `{}` has no joints", g.name)));
            }
            g.validate().map_err(ModelError::Groups)?;
            for jn in &g.joints {
                let ji = self
                    .joint_index(jn)
                    .ok_or_else(|| ModelError::Groups(format!("group `{}`: no joint `{jn}`", g.name)))?;
                let joint = &self.joints[ji];
                let d = match joint.dof {
                    Some(d) if joint.actuated => d,
                    _ => {
                        return Err(ModelError::Groups(format!(
                            "group `{}`: joint `{jn}` is not actuated",
                            g.name
                        )))
                    }
                };
                if let Some(prev) = owner[d] {
                    return Err(ModelError::Groups(format!(
                        "joint `{jn}` is claimed by groups `{prev}` and `{}`",
                        g.name
                    )));
                }
                owner[d] = Some(&g.name);
            }
        }
        for (d, o) in owner.iter().enumerate() {
            let j = &self.joints[self.dof_joints[d]];
            if j.actuated && o.is_none() && !self.actuator_groups.is_empty() {
                return Err(ModelError::Groups(format!(
                    "actuated joint `{}` belongs to no group",
                    j.name
                )));
            }
        }
        Ok(())
    }

    pub fn num_dofs(&self) -> usize {
        self.dof_joints.len()
    }

    pub fn num_links(&self) -> usize {
        self.links.len()
    }

    pub fn num_actuated(&self) -> usize {
        self.joints.iter().filter(|j| j.actuated).count()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Links ordered so that every parent precedes its children.
    pub fn topological_links(&self) -> &[usize] {
        &self.topo_links
    }

    pub fn parent_joint(&self, link: usize) -> Option<usize> {
        self.link_parent_joint[link]
    }

    pub fn parent_link(&self, link: usize) -> Option<usize> {
        self.link_parent[link]
    }

    /// Joint coordinates that move `link`, root first.
    pub fn support(&self, link: usize) -> &[usize] {
        &self.link_support[link]
    }

    pub fn dof_joint(&self, dof: usize) -> &Joint {
        &self.joints[self.dof_joints[dof]]
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn dof_of_joint(&self, name: &str) -> Option<usize> {
        self.joint_index(name).and_then(|j| self.joints[j].dof)
    }

    pub fn link(&self, name: &str) -> Result<usize, ModelError> {
        self.link_index(name)
            .ok_or_else(|| ModelError::NoSuchLink(name.to_string()))
    }

    pub fn group(&self, name: &str) -> Option<&ActuatorGroupConfig> {
        self.actuator_groups.iter().find(|g| g.name == name)
    }

    /// Joint coordinate indices of a group's joints, in group order.
    pub fn group_dofs(&self, group: &ActuatorGroupConfig) -> Vec<usize> {
        group
            .joints
            .iter()
            .filter_map(|j| self.dof_of_joint(j))
            .collect()
    }

    pub fn nominal_inertias(&self) -> Vec<SpatialInertia> {
        self.links.iter().map(Link::spatial_inertia).collect()
    }

    /// Mass of every link that moves with the joints (the root is excluded).
    pub fn total_mass(&self) -> f64 {
        self.links
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.root)
            .map(|(_, l)| l.mass)
            .sum()
    }

    /// Zero configuration clamped into the joint limits.
    pub fn neutral_configuration(&self) -> Vec<f64> {
        (0..self.num_dofs())
            .map(|d| {
                let l = self.dof_joint(d).limits;
                0.0f64.clamp(l.lower, l.upper)
            })
            .collect()
    }

    pub fn clamp_to_limits(&self, q: &mut [f64]) {
        for (d, v) in q.iter_mut().enumerate() {
            let l = self.dof_joint(d).limits;
            *v = v.clamp(l.lower, l.upper);
        }
    }

    /// Replaces one actuator group's configuration; used by task assembly to
    /// switch a group between position and torque control.
    pub fn with_group(&self, group: ActuatorGroupConfig) -> Result<RobotDescription, ModelError> {
        let mut out = self.clone();
        match out.actuator_groups.iter_mut().find(|g| g.name == group.name) {
            Some(g) => *g = group,
            None => return Err(ModelError::Groups(format!("no group `{}`", group.name))),
        }
        out.validate_groups()?;
        Ok(out)
    }

    /// Same model with one link's mass replaced (inertia scaled along with it).
    pub fn with_link_mass(&self, link: usize, mass: f64) -> RobotDescription {
        let mut out = self.clone();
        let l = &mut out.links[link];
        let s = mass / l.mass;
        l.mass = mass;
        l.inertia *= s;
        out
    }

    pub fn has_transmission(&self, pred: impl Fn(&TransmissionModel) -> bool) -> bool {
        self.actuator_groups.iter().any(|g| pred(&g.model))
    }

    /// World poses of every link for configuration `q`, base placed at `base`.
    pub fn link_poses_into(&self, base: &Transform, q: &[f64], out: &mut [Transform]) {
        debug_assert_eq!(out.len(), self.links.len());
        out[self.root] = *base;
        for &l in &self.topo_links[1..] {
            let j = &self.joints[self.link_parent_joint[l].expect("non-root link")];
            let qj = j.dof.map_or(0.0, |d| q[d]);
            out[l] = out[j.parent].compose(&j.origin).compose(&j.motion(qj));
        }
    }

    pub fn link_poses(&self, base: &Transform, q: &[f64]) -> Vec<Transform> {
        let mut out = vec![Transform::identity(); self.links.len()];
        self.link_poses_into(base, q, &mut out);
        out
    }

    /// World-frame motion subspace of joint coordinate `dof` given link poses.
    pub fn motion_subspace(&self, dof: usize, poses: &[Transform]) -> SpatialVec {
        let j = self.dof_joint(dof);
        let frame = &poses[j.child];
        let a = frame.orientation * j.axis;
        match j.joint_type {
            JointType::Revolute => spatial(&a, &frame.position.cross(&a)),
            JointType::Prismatic => spatial(&Vec3::zeros(), &a),
            JointType::Fixed => SpatialVec::zeros(),
        }
    }

    /// 6×n Jacobian (rows: linear xyz, angular xyz) of a world point rigidly
    /// attached to `link`.
    pub fn point_jacobian(&self, poses: &[Transform], link: usize, point_world: &Vec3) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(6, self.num_dofs());
        for &d in self.support(link) {
            let j = self.dof_joint(d);
            let frame = &poses[j.child];
            let a = frame.orientation * j.axis;
            let (lin, ang) = match j.joint_type {
                JointType::Revolute => (a.cross(&(point_world - frame.position)), a),
                JointType::Prismatic => (a, Vec3::zeros()),
                JointType::Fixed => continue,
            };
            for r in 0..3 {
                jac[(r, d)] = lin[r];
                jac[(r + 3, d)] = ang[r];
            }
        }
        jac
    }
}

/// Joint positions and velocities of `num_envs` environments, flat and row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchConfiguration {
    pub num_envs: usize,
    pub num_dofs: usize,
    pub q: Vec<f64>,
    pub qd: Vec<f64>,
}

impl BatchConfiguration {
    pub fn zeros(num_envs: usize, num_dofs: usize) -> Self {
        Self {
            num_envs,
            num_dofs,
            q: vec![0.0; num_envs * num_dofs],
            qd: vec![0.0; num_envs * num_dofs],
        }
    }

    pub fn from_arrays(
        num_envs: usize,
        num_dofs: usize,
        q: Vec<f64>,
        qd: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let expected = num_envs * num_dofs;
        for len in [q.len(), qd.len()] {
            if len != expected {
                return Err(ModelError::DimensionMismatch { expected, got: len });
            }
        }
        Ok(Self {
            num_envs,
            num_dofs,
            q,
            qd,
        })
    }

    pub fn q(&self, env: usize) -> &[f64] {
        &self.q[env * self.num_dofs..(env + 1) * self.num_dofs]
    }

    pub fn qd(&self, env: usize) -> &[f64] {
        &self.qd[env * self.num_dofs..(env + 1) * self.num_dofs]
    }

    pub fn q_mut(&mut self, env: usize) -> &mut [f64] {
        &mut self.q[env * self.num_dofs..(env + 1) * self.num_dofs]
    }

    pub fn qd_mut(&mut self, env: usize) -> &mut [f64] {
        &mut self.qd[env * self.num_dofs..(env + 1) * self.num_dofs]
    }

    pub fn check(&self, model: &RobotDescription) -> Result<(), ModelError> {
        if self.num_dofs != model.num_dofs() {
            return Err(ModelError::DimensionMismatch {
                expected: model.num_dofs(),
                got: self.num_dofs,
            });
        }
        let expected = self.num_envs * self.num_dofs;
        for len in [self.q.len(), self.qd.len()] {
            if len != expected {
                return Err(ModelError::DimensionMismatch { expected, got: len });
            }
        }
        Ok(())
    }

    /// Clamps positions into the joint limits and zeroes velocity components
    /// that point further out of range.
    pub fn clamp_to_limits(&mut self, model: &RobotDescription) {
        let n = self.num_dofs;
        for (q, qd) in self.q.chunks_mut(n).zip(self.qd.chunks_mut(n)) {
            for d in 0..n {
                let l = model.dof_joint(d).limits;
                if q[d] <= l.lower {
                    q[d] = l.lower;
                    qd[d] = qd[d].max(0.0);
                } else if q[d] >= l.upper {
                    q[d] = l.upper;
                    qd[d] = qd[d].min(0.0);
                }
            }
        }
    }
}

/// Link poses for every environment, `[num_envs × num_links]` row-major.
pub fn forward_kinematics(
    model: &RobotDescription,
    cfg: &BatchConfiguration,
) -> Result<Vec<Transform>, ModelError> {
    cfg.check(model)?;
    let nl = model.num_links();
    let mut out = vec![Transform::identity(); cfg.num_envs * nl];
    for (env, poses) in out.chunks_mut(nl).enumerate() {
        model.link_poses_into(&Transform::identity(), cfg.q(env), poses);
    }
    Ok(out)
}

/// Geometric Jacobian of `point` (in `link`'s frame) for every environment.
pub fn geometric_jacobian(
    model: &RobotDescription,
    cfg: &BatchConfiguration,
    link: &str,
    point: &Vec3,
) -> Result<Vec<DMatrix<f64>>, ModelError> {
    let li = model.link(link)?;
    cfg.check(model)?;
    let mut poses = vec![Transform::identity(); model.num_links()];
    Ok((0..cfg.num_envs)
        .map(|env| {
            model.link_poses_into(&Transform::identity(), cfg.q(env), &mut poses);
            let p = poses[li].transform_point(point);
            model.point_jacobian(&poses, li, &p)
        })
        .collect())
}
