//! Articulated rigid-body dynamics for fixed-base trees.
//!
//! The recursive algorithms (composite rigid body, recursive Newton–Euler,
//! articulated body) run on world-frame spatial vectors about the world
//! origin, so quantities pass between parent and child without coordinate
//! transforms. [`DynamicsWorkspace`] holds all per-environment scratch
//! storage; after construction nothing in the substep path allocates.
//!
//! Contact is limited to penalty springs between declared contact points and
//! the plane `z = 0`. Grasping is a kinematic weld ([`AttachmentTable`]).

use nalgebra::{DMatrix, DVector, UnitQuaternion};

use crate::model::{BatchConfiguration, ModelError, RobotDescription};
use crate::spatial::{
    cross_force, cross_motion, linear, point_velocity, spatial, SpatialInertia, SpatialMat, SpatialVec,
    Transform, Vec3,
};

pub const STANDARD_GRAVITY: f64 = 9.81;
/// Velocity scale of the smooth dry-friction model, rad/s (or m/s).
pub const FRICTION_EPS: f64 = 1e-3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("time step must be positive, got {0}")]
    TimeStep(f64),
    #[error("non-finite state")]
    NonFinite,
    #[error("object is {distance:.4} m from the gripper frame (grasp radius {radius} m)")]
    OutOfReach { distance: f64, radius: f64 },
    #[error("gripper is not closed")]
    GripperOpen,
    #[error("gripper already holds an object")]
    AlreadyAttached,
}

/// Penalty contact against the plane `z = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundContact {
    pub stiffness: f64,
    pub damping: f64,
    /// Tangential viscous friction, N·s/m.
    pub friction: f64,
}

impl Default for GroundContact {
    fn default() -> Self {
        Self {
            stiffness: 5000.0,
            damping: 100.0,
            friction: 100.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicsSettings {
    pub gravity: Vec3,
    pub ground: Option<GroundContact>,
}

impl Default for DynamicsSettings {
    fn default() -> Self {
        Self {
            gravity: Vec3::new(0.0, 0.0, -STANDARD_GRAVITY),
            ground: None,
        }
    }
}

/// Per-environment physical parameters that randomization may change.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidParams {
    /// Link mass properties in link frames.
    pub inertias: Vec<SpatialInertia>,
    pub damping: Vec<f64>,
    pub friction: Vec<f64>,
}

impl RigidParams {
    pub fn nominal(model: &RobotDescription) -> Self {
        Self {
            inertias: model.nominal_inertias(),
            damping: (0..model.num_dofs()).map(|d| model.dof_joint(d).damping).collect(),
            friction: (0..model.num_dofs())
                .map(|d| model.dof_joint(d).dry_friction)
                .collect(),
        }
    }
}

/// Contact state of one declared contact point after the last substep.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ContactReading {
    pub in_contact: bool,
    pub normal_force: f64,
}

/// Scratch arrays for one environment, sized once from the model.
#[derive(Clone, Debug)]
pub struct DynamicsWorkspace {
    pub poses: Vec<Transform>,
    pub subspace: Vec<SpatialVec>,
    pub inertia: Vec<SpatialMat>,
    pub vel: Vec<SpatialVec>,
    acc: Vec<SpatialVec>,
    force: Vec<SpatialVec>,
    bias: Vec<SpatialVec>,
    art_inertia: Vec<SpatialMat>,
    art_bias: Vec<SpatialVec>,
    u_vec: Vec<SpatialVec>,
    d_inv: Vec<f64>,
    u_scalar: Vec<f64>,
    pub tau: Vec<f64>,
    pub qdd: Vec<f64>,
    pub gravity_torque: Vec<f64>,
    pub contacts: Vec<ContactReading>,
    /// Extra joint-space inertia per DoF, used by the articulated body algorithm.
    pub armature: Vec<f64>,
    zeros: Vec<f64>,
}

impl DynamicsWorkspace {
    pub fn new(model: &RobotDescription) -> Self {
        let nl = model.num_links();
        let n = model.num_dofs();
        Self {
            poses: vec![Transform::identity(); nl],
            subspace: vec![SpatialVec::zeros(); n],
            inertia: vec![SpatialMat::zeros(); nl],
            vel: vec![SpatialVec::zeros(); nl],
            acc: vec![SpatialVec::zeros(); nl],
            force: vec![SpatialVec::zeros(); nl],
            bias: vec![SpatialVec::zeros(); nl],
            art_inertia: vec![SpatialMat::zeros(); nl],
            art_bias: vec![SpatialVec::zeros(); nl],
            u_vec: vec![SpatialVec::zeros(); n],
            d_inv: vec![0.0; n],
            u_scalar: vec![0.0; n],
            tau: vec![0.0; n],
            qdd: vec![0.0; n],
            gravity_torque: vec![0.0; n],
            contacts: vec![ContactReading::default(); model.contact_points.len()],
            armature: vec![0.0; n],
            zeros: vec![0.0; n],
        }
    }

    /// Link poses, joint motion subspaces, and world-frame link inertias.
    pub fn update_kinematics(&mut self, model: &RobotDescription, base: &Transform, q: &[f64], inertias: &[SpatialInertia]) {
        model.link_poses_into(base, q, &mut self.poses);
        for d in 0..model.num_dofs() {
            self.subspace[d] = model.motion_subspace(d, &self.poses);
        }
        for (l, body) in inertias.iter().enumerate() {
            self.inertia[l] = body.transformed(&self.poses[l]).matrix();
        }
    }

    /// Link spatial velocities (requires [`update_kinematics`](Self::update_kinematics)).
    pub fn update_velocities(&mut self, model: &RobotDescription, qd: &[f64]) {
        let root = model.root();
        self.vel[root] = SpatialVec::zeros();
        for &l in &model.topological_links()[1..] {
            let j = &model.joints[model.parent_joint(l).unwrap()];
            self.vel[l] = match j.dof {
                Some(d) => self.vel[j.parent] + self.subspace[d] * qd[d],
                None => self.vel[j.parent],
            };
        }
    }

    /// Recursive Newton–Euler; kinematics must be current.
    pub fn rnea(&mut self, model: &RobotDescription, qd: &[f64], qdd: &[f64], gravity: &Vec3, tau: &mut [f64]) {
        let root = model.root();
        self.vel[root] = SpatialVec::zeros();
        self.acc[root] = spatial(&Vec3::zeros(), &-gravity);
        let topo = model.topological_links();
        for &l in &topo[1..] {
            let j = &model.joints[model.parent_joint(l).unwrap()];
            let p = j.parent;
            match j.dof {
                Some(d) => {
                    let vj = self.subspace[d] * qd[d];
                    self.vel[l] = self.vel[p] + vj;
                    self.acc[l] = self.acc[p] + cross_motion(&self.vel[l], &vj) + self.subspace[d] * qdd[d];
                }
                None => {
                    self.vel[l] = self.vel[p];
                    self.acc[l] = self.acc[p];
                }
            }
            let iv = self.inertia[l] * self.vel[l];
            self.force[l] = self.inertia[l] * self.acc[l] + cross_force(&self.vel[l], &iv);
        }
        for &l in topo[1..].iter().rev() {
            let j = &model.joints[model.parent_joint(l).unwrap()];
            if let Some(d) = j.dof {
                tau[d] = self.subspace[d].dot(&self.force[l]);
            }
            let f = self.force[l];
            if j.parent != root {
                self.force[j.parent] += f;
            }
        }
    }

    /// Joint-space gravity torque g(q) into `gravity_torque`.
    pub fn compute_gravity_torque(&mut self, model: &RobotDescription, gravity: &Vec3) {
        let mut g = std::mem::take(&mut self.gravity_torque);
        let zeros = std::mem::take(&mut self.zeros);
        self.rnea(model, &zeros, &zeros, gravity, &mut g);
        self.gravity_torque = g;
        self.zeros = zeros;
    }

    /// Composite rigid body algorithm; kinematics must be current.
    pub fn crba(&mut self, model: &RobotDescription, m: &mut DMatrix<f64>) {
        m.fill(0.0);
        let topo = model.topological_links();
        for &l in topo {
            self.art_inertia[l] = self.inertia[l];
        }
        for &l in topo[1..].iter().rev() {
            let p = model.parent_link(l).unwrap();
            let c = self.art_inertia[l];
            self.art_inertia[p] += c;
        }
        for &l in &topo[1..] {
            let j = &model.joints[model.parent_joint(l).unwrap()];
            let Some(d) = j.dof else { continue };
            let f = self.art_inertia[l] * self.subspace[d];
            m[(d, d)] = self.subspace[d].dot(&f);
            for &a in model.support(l) {
                if a != d {
                    let v = self.subspace[a].dot(&f);
                    m[(a, d)] = v;
                    m[(d, a)] = v;
                }
            }
        }
    }

    /// Articulated body algorithm; kinematics must be current. Result in `qdd`.
    pub fn aba(&mut self, model: &RobotDescription, qd: &[f64], tau: &[f64], gravity: &Vec3) {
        let root = model.root();
        let topo = model.topological_links();
        self.vel[root] = SpatialVec::zeros();
        for &l in &topo[1..] {
            let j = &model.joints[model.parent_joint(l).unwrap()];
            match j.dof {
                Some(d) => {
                    let vj = self.subspace[d] * qd[d];
                    self.vel[l] = self.vel[j.parent] + vj;
                    self.bias[l] = cross_motion(&self.vel[l], &vj);
                }
                None => {
                    self.vel[l] = self.vel[j.parent];
                    self.bias[l] = SpatialVec::zeros();
                }
            }
            self.art_inertia[l] = self.inertia[l];
            let iv = self.inertia[l] * self.vel[l];
            self.art_bias[l] = cross_force(&self.vel[l], &iv);
        }
        for &l in topo[1..].iter().rev() {
            let j = &model.joints[model.parent_joint(l).unwrap()];
            let (ia, pa) = match j.dof {
                Some(d) => {
                    let s = self.subspace[d];
                    let u = self.art_inertia[l] * s;
                    let dd = s.dot(&u) + self.armature[d];
                    let d_inv = 1.0 / dd;
                    let us = tau[d] - s.dot(&self.art_bias[l]);
                    self.u_vec[d] = u;
                    self.d_inv[d] = d_inv;
                    self.u_scalar[d] = us;
                    let ia = self.art_inertia[l] - u * u.transpose() * d_inv;
                    let pa = self.art_bias[l] + ia * self.bias[l] + u * (us * d_inv);
                    (ia, pa)
                }
                None => (self.art_inertia[l], self.art_bias[l]),
            };
            if j.parent != root {
                self.art_inertia[j.parent] += ia;
                self.art_bias[j.parent] += pa;
            }
        }
        self.acc[root] = spatial(&Vec3::zeros(), &-gravity);
        for &l in &topo[1..] {
            let j = &model.joints[model.parent_joint(l).unwrap()];
            let a = self.acc[j.parent] + self.bias[l];
            self.acc[l] = match j.dof {
                Some(d) => {
                    let qdd = (self.u_scalar[d] - self.u_vec[d].dot(&a)) * self.d_inv[d];
                    self.qdd[d] = qdd;
                    a + self.subspace[d] * qdd
                }
                None => a,
            };
        }
    }

    /// Adds `Jᵀ·F` for a world-frame force applied at a world point on `link`.
    pub fn add_point_force(&self, model: &RobotDescription, link: usize, point: &Vec3, force: &Vec3, tau: &mut [f64]) {
        let wrench = spatial(&point.cross(force), force);
        for &d in model.support(link) {
            tau[d] += self.subspace[d].dot(&wrench);
        }
    }

    /// World position and velocity of a point fixed in `link`'s frame;
    /// velocities must be current.
    pub fn point_state(&self, link: usize, local: &Vec3) -> (Vec3, Vec3) {
        let p = self.poses[link].transform_point(local);
        (p, point_velocity(&self.vel[link], &p))
    }
}

/// Smooth joint friction and viscous damping torque opposing `qd`.
pub fn passive_torque(damping: f64, dry_friction: f64, qd: f64) -> f64 {
    -damping * qd - dry_friction * (qd / FRICTION_EPS).tanh()
}

/// External point load on one articulation link, world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointLoad {
    pub link: usize,
    pub point: Vec3,
    pub force: Vec3,
}

/// Semi-implicit Euler substep of one environment.
///
/// `tau` holds actuator (and breakaway) torques; passive joint torques,
/// ground contact, and point loads are added here. Coordinates listed in
/// `locked` keep their position and have zero velocity afterwards. On a
/// non-finite result the state is restored, velocities zeroed, and
/// [`DynamicsError::NonFinite`] returned.
#[allow(clippy::too_many_arguments)]
pub fn integrate(
    model: &RobotDescription,
    params: &RigidParams,
    settings: &DynamicsSettings,
    base: &Transform,
    q: &mut [f64],
    qd: &mut [f64],
    tau: &[f64],
    loads: &[PointLoad],
    locked: &[usize],
    dt: f64,
    ws: &mut DynamicsWorkspace,
) -> Result<(), DynamicsError> {
    let n = model.num_dofs();
    ws.update_kinematics(model, base, q, &params.inertias);
    let mut total = std::mem::take(&mut ws.tau);
    for d in 0..n {
        total[d] = tau[d] + passive_torque(params.damping[d], params.friction[d], qd[d]);
    }
    if !model.contact_points.is_empty() || !loads.is_empty() {
        ws.update_velocities(model, qd);
    }
    if let Some(ground) = settings.ground {
        for (ci, c) in model.contact_points.iter().enumerate() {
            let (p, v) = ws.point_state(c.link, &c.point);
            let reading = if p.z <= 0.0 {
                let normal = (-ground.stiffness * p.z - ground.damping * v.z).max(0.0);
                let f = Vec3::new(-ground.friction * v.x, -ground.friction * v.y, normal);
                ws.add_point_force(model, c.link, &p, &f, &mut total);
                ContactReading {
                    in_contact: true,
                    normal_force: normal,
                }
            } else {
                ContactReading::default()
            };
            ws.contacts[ci] = reading;
        }
    }
    for load in loads {
        ws.add_point_force(model, load.link, &load.point, &load.force, &mut total);
    }
    ws.aba(model, qd, &total, &settings.gravity);
    ws.tau = total;

    let mut finite = true;
    for d in 0..n {
        let v = qd[d] + ws.qdd[d] * dt;
        let x = q[d] + v * dt;
        finite &= v.is_finite() && x.is_finite();
        ws.qdd[d] = v; // reuse as scratch for the new velocity
        ws.tau[d] = x;
    }
    if !finite {
        qd.fill(0.0);
        return Err(DynamicsError::NonFinite);
    }
    for d in 0..n {
        if locked.contains(&d) {
            qd[d] = 0.0;
            continue;
        }
        let l = model.dof_joint(d).limits;
        let (mut x, mut v) = (ws.tau[d], ws.qdd[d]);
        if x <= l.lower {
            x = l.lower;
            v = v.max(0.0);
        } else if x >= l.upper {
            x = l.upper;
            v = v.min(0.0);
        }
        q[d] = x;
        qd[d] = v;
    }
    Ok(())
}

fn single_env(model: &RobotDescription, cfg: &BatchConfiguration) -> Result<(RigidParams, DynamicsWorkspace), ModelError> {
    cfg.check(model)?;
    Ok((RigidParams::nominal(model), DynamicsWorkspace::new(model)))
}

fn check_len(expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::DimensionMismatch { expected, got })
    }
}

/// Joint-space inertia matrices, one per environment.
pub fn mass_matrix(model: &RobotDescription, cfg: &BatchConfiguration) -> Result<Vec<DMatrix<f64>>, ModelError> {
    let (params, mut ws) = single_env(model, cfg)?;
    let n = model.num_dofs();
    Ok((0..cfg.num_envs)
        .map(|env| {
            ws.update_kinematics(model, &Transform::identity(), cfg.q(env), &params.inertias);
            let mut m = DMatrix::zeros(n, n);
            ws.crba(model, &mut m);
            m
        })
        .collect())
}

/// Torques `[num_envs × n]` realizing `qdd` under standard gravity.
pub fn inverse_dynamics(model: &RobotDescription, cfg: &BatchConfiguration, qdd: &[f64]) -> Result<Vec<f64>, ModelError> {
    inverse_dynamics_with(model, cfg, qdd, &DynamicsSettings::default().gravity)
}

pub fn inverse_dynamics_with(
    model: &RobotDescription,
    cfg: &BatchConfiguration,
    qdd: &[f64],
    gravity: &Vec3,
) -> Result<Vec<f64>, ModelError> {
    let (params, mut ws) = single_env(model, cfg)?;
    check_len(cfg.q.len(), qdd.len())?;
    let n = model.num_dofs();
    let mut out = vec![0.0; qdd.len()];
    for env in 0..cfg.num_envs {
        ws.update_kinematics(model, &Transform::identity(), cfg.q(env), &params.inertias);
        let r = env * n..(env + 1) * n;
        ws.rnea(model, cfg.qd(env), &qdd[r.clone()], gravity, &mut out[r]);
    }
    Ok(out)
}

/// Accelerations `[num_envs × n]` under torques `tau` and standard gravity.
pub fn forward_dynamics(model: &RobotDescription, cfg: &BatchConfiguration, tau: &[f64]) -> Result<Vec<f64>, ModelError> {
    forward_dynamics_with(model, cfg, tau, &DynamicsSettings::default().gravity)
}

pub fn forward_dynamics_with(
    model: &RobotDescription,
    cfg: &BatchConfiguration,
    tau: &[f64],
    gravity: &Vec3,
) -> Result<Vec<f64>, ModelError> {
    let (params, mut ws) = single_env(model, cfg)?;
    check_len(cfg.q.len(), tau.len())?;
    let n = model.num_dofs();
    let mut out = vec![0.0; tau.len()];
    for env in 0..cfg.num_envs {
        ws.update_kinematics(model, &Transform::identity(), cfg.q(env), &params.inertias);
        ws.aba(model, cfg.qd(env), &tau[env * n..(env + 1) * n], gravity);
        out[env * n..(env + 1) * n].copy_from_slice(&ws.qdd);
    }
    Ok(out)
}

/// Advances every environment by one substep with nominal parameters.
/// Returns the per-environment fault flags.
pub fn step(
    model: &RobotDescription,
    cfg: &mut BatchConfiguration,
    tau: &[f64],
    dt: f64,
    settings: &DynamicsSettings,
) -> Result<Vec<bool>, DynamicsError> {
    if !(dt > 0.0) {
        return Err(DynamicsError::TimeStep(dt));
    }
    cfg.check(model)?;
    check_len(cfg.q.len(), tau.len())?;
    let params = RigidParams::nominal(model);
    let mut ws = DynamicsWorkspace::new(model);
    let n = model.num_dofs();
    let mut faulted = vec![false; cfg.num_envs];
    for env in 0..cfg.num_envs {
        let r = env * n..(env + 1) * n;
        let (q, qd) = (&mut cfg.q[r.clone()], &mut cfg.qd[r.clone()]);
        faulted[env] = integrate(model, &params, settings, &Transform::identity(), q, qd, &tau[r], &[], &[], dt, &mut ws).is_err();
    }
    Ok(faulted)
}

/// Hybrid joint that holds until loaded past its threshold, then frees for
/// the rest of the episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BreakawaySeal {
    pub broken: bool,
    pub hold_torque: f64,
    pub break_threshold: f64,
}

/// Result of one seal update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SealResponse {
    /// Resisting torque to add to the joint.
    pub torque: f64,
    /// The joint is held in place this substep.
    pub locked: bool,
}

impl BreakawaySeal {
    pub fn new(hold_torque: f64, break_threshold: f64) -> Self {
        Self {
            broken: false,
            hold_torque,
            break_threshold,
        }
    }

    pub fn update(&mut self, applied: f64) -> SealResponse {
        if !self.broken && applied.abs() > self.break_threshold {
            self.broken = true;
        }
        if self.broken {
            return SealResponse {
                torque: 0.0,
                locked: false,
            };
        }
        SealResponse {
            torque: -applied.clamp(-self.hold_torque, self.hold_torque),
            locked: applied.abs() <= self.hold_torque,
        }
    }

    pub fn reset(&mut self) {
        self.broken = false;
    }
}

/// Seal state of one breakaway joint across environments.
#[derive(Clone, Debug, PartialEq)]
pub struct BreakawayJointState {
    pub broken: Vec<bool>,
    pub hold_torque: f64,
    pub break_threshold: f64,
    /// Joint region where the seal would re-engage; unused, seals never re-engage.
    pub engage_band: f64,
}

impl BreakawayJointState {
    pub fn new(num_envs: usize, hold_torque: f64, break_threshold: f64) -> Self {
        Self {
            broken: vec![false; num_envs],
            hold_torque,
            break_threshold,
            engage_band: 0.0,
        }
    }

    /// Per-environment hold torque contributions for the given applied loads.
    pub fn update(&mut self, applied: &[f64]) -> Vec<SealResponse> {
        self.broken
            .iter_mut()
            .zip(applied)
            .map(|(b, &a)| {
                let mut seal = BreakawaySeal {
                    broken: *b,
                    hold_torque: self.hold_torque,
                    break_threshold: self.break_threshold,
                };
                let r = seal.update(a);
                *b = seal.broken;
                r
            })
            .collect()
    }

    pub fn reset(&mut self, env: usize) {
        self.broken[env] = false;
    }
}

/// Unconstrained rigid body resting on, or falling toward, the plane
/// `z = support_height` beneath its origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreeBody {
    pub pose: Transform,
    pub lin_vel: Vec3,
    pub ang_vel: Vec3,
    pub inertia: SpatialInertia,
    /// Height of the body origin above the table when resting.
    pub support_height: f64,
}

impl FreeBody {
    pub fn integrate(&mut self, gravity: &Vec3, dt: f64) {
        self.lin_vel += gravity * dt;
        self.pose.position += self.lin_vel * dt;
        let w = self.ang_vel * dt;
        self.pose.orientation = UnitQuaternion::from_scaled_axis(w) * self.pose.orientation;
        if self.pose.position.z <= self.support_height {
            self.pose.position.z = self.support_height;
            // resting contact with static friction
            self.lin_vel = Vec3::zeros();
            self.ang_vel = Vec3::zeros();
        }
    }

    /// Kinematic weld: moves to `target` and takes the finite-difference velocity.
    pub fn follow(&mut self, target: &Transform, dt: f64) {
        self.lin_vel = (target.position - self.pose.position) / dt;
        let rel = target.orientation * self.pose.orientation.inverse();
        self.ang_vel = rel.scaled_axis() / dt;
        self.pose = *target;
    }
}

/// What an attachment holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttachTarget {
    /// Free rigid body by index.
    Body(usize),
    /// Link of an articulated object: (articulation index, link index).
    Link(usize, usize),
    /// Particle of a particle system: (system index, particle index).
    Particle(usize, usize),
}

/// Gripper frame identity: (articulation index, link index).
pub type GripperId = (usize, usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Attachment {
    pub env: usize,
    pub gripper: GripperId,
    pub object: AttachTarget,
    /// Object pose relative to the gripper frame at attach time.
    pub relative: Transform,
    pub active: bool,
}

/// Kinematic grasp bookkeeping for one environment.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttachmentTable {
    pub env: usize,
    pub entries: Vec<Attachment>,
}

pub const DEFAULT_GRASP_RADIUS: f64 = 0.05;

impl AttachmentTable {
    pub fn new(env: usize) -> Self {
        Self {
            env,
            entries: Vec::new(),
        }
    }

    pub fn active(&self, gripper: GripperId) -> Option<&Attachment> {
        self.entries.iter().find(|a| a.active && a.gripper == gripper)
    }

    pub fn is_held(&self, object: AttachTarget) -> bool {
        self.entries.iter().any(|a| a.active && a.object == object)
    }

    /// Welds `object` to the gripper when it lies within `grasp_radius` of
    /// the gripper frame and the gripper is closed.
    pub fn attach(
        &mut self,
        gripper: GripperId,
        gripper_pose: &Transform,
        object: AttachTarget,
        object_pose: &Transform,
        closed: bool,
        grasp_radius: f64,
    ) -> Result<Attachment, DynamicsError> {
        if !closed {
            return Err(DynamicsError::GripperOpen);
        }
        if self.active(gripper).is_some() {
            return Err(DynamicsError::AlreadyAttached);
        }
        let distance = (object_pose.position - gripper_pose.position).norm();
        if distance > grasp_radius {
            return Err(DynamicsError::OutOfReach {
                distance,
                radius: grasp_radius,
            });
        }
        let a = Attachment {
            env: self.env,
            gripper,
            object,
            relative: gripper_pose.inverse().compose(object_pose),
            active: true,
        };
        self.entries.retain(|e| e.active);
        self.entries.push(a);
        Ok(a)
    }

    pub fn detach(&mut self, gripper: GripperId) -> Option<Attachment> {
        let i = self.entries.iter().position(|a| a.active && a.gripper == gripper)?;
        let mut a = self.entries.remove(i);
        a.active = false;
        Some(a)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Mass properties of the articulation with held bodies merged into their
/// gripper links (each body expressed in its gripper frame).
pub fn with_payloads(base: &[SpatialInertia], payloads: &[(usize, SpatialInertia, Transform)]) -> Vec<SpatialInertia> {
    let mut out = base.to_vec();
    for (link, body, relative) in payloads {
        out[*link] = out[*link].combine(&body.transformed(relative));
    }
    out
}

/// Kinetic plus potential energy of one environment.
pub fn total_energy(model: &RobotDescription, params: &RigidParams, q: &[f64], qd: &[f64], gravity: &Vec3) -> f64 {
    let mut ws = DynamicsWorkspace::new(model);
    ws.update_kinematics(model, &Transform::identity(), q, &params.inertias);
    let n = model.num_dofs();
    let mut m = DMatrix::zeros(n, n);
    ws.crba(model, &mut m);
    let v = DVector::from_column_slice(qd);
    let kinetic = 0.5 * v.dot(&(&m * &v));
    let potential: f64 = params
        .inertias
        .iter()
        .zip(&ws.poses)
        .map(|(b, pose)| -b.mass * gravity.dot(&pose.transform_point(&b.com)))
        .sum();
    kinetic + potential
}

/// Linear velocity part of a spatial velocity.
pub fn linear_part(v: &SpatialVec) -> Vec3 {
    linear(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn cfg1(q: &[f64], qd: &[f64]) -> BatchConfiguration {
        BatchConfiguration::from_arrays(1, q.len(), q.to_vec(), qd.to_vec()).unwrap()
    }

    #[test]
    fn point_pendulum_mass_matrix() {
        let m = fixtures::load("pendulum").unwrap();
        let mm = &mass_matrix(&m, &cfg1(&[0.3], &[0.0])).unwrap()[0];
        assert!((mm[(0, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mass_matrix_symmetric_and_linear_in_mass() {
        let m = fixtures::load("planar2").unwrap();
        let mut heavy = m.clone();
        for l in 1..heavy.links.len() {
            heavy = heavy.with_link_mass(l, 2.0 * m.links[l].mass);
        }
        let cfg = cfg1(&[0.4, -1.1], &[0.0, 0.0]);
        let a = &mass_matrix(&m, &cfg).unwrap()[0];
        let b = &mass_matrix(&heavy, &cfg).unwrap()[0];
        assert!((a - a.transpose()).abs().max() < 1e-10);
        assert!((b - a * 2.0).abs().max() < 1e-12);
    }

    #[test]
    fn pendulum_gravity_torque() {
        let m = fixtures::load("pendulum").unwrap();
        let tau = inverse_dynamics(&m, &cfg1(&[FRAC_PI_2], &[0.0]), &[0.0]).unwrap();
        assert!((tau[0] - 9.81).abs() < 1e-9);
        let free = inverse_dynamics_with(&m, &cfg1(&[FRAC_PI_2], &[0.0]), &[0.0], &Vec3::zeros()).unwrap();
        assert_eq!(free[0], 0.0);
    }

    #[test]
    fn pendulum_forward_dynamics() {
        let m = fixtures::load("pendulum").unwrap();
        let rest = forward_dynamics(&m, &cfg1(&[0.0], &[0.0]), &[0.0]).unwrap();
        assert!(rest[0].abs() < 1e-12);
        let horizontal = forward_dynamics(&m, &cfg1(&[FRAC_PI_2], &[0.0]), &[0.0]).unwrap();
        assert!((horizontal[0] + 9.81).abs() < 1e-9);
    }

    #[test]
    fn forward_matches_linear_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in ["planar2", "panda", "quadruped"] {
            let m = fixtures::load(name).unwrap();
            let n = m.num_dofs();
            for _ in 0..50 {
                let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let qd: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let tau: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let cfg = cfg1(&q, &qd);
                let mm = mass_matrix(&m, &cfg).unwrap().remove(0);
                let bias = inverse_dynamics(&m, &cfg, &vec![0.0; n]).unwrap();
                let rhs = DVector::from_vec(tau.iter().zip(&bias).map(|(t, b)| t - b).collect());
                let oracle = mm.cholesky().expect("SPD").solve(&rhs);
                let qdd = forward_dynamics(&m, &cfg, &tau).unwrap();
                for d in 0..n {
                    assert!((qdd[d] - oracle[d]).abs() < 1e-8 * (1.0 + oracle[d].abs()), "{name}");
                }
            }
        }
    }

    #[test]
    fn step_fixed_point_without_forces() {
        let m = fixtures::load("planar2").unwrap();
        let mut cfg = cfg1(&[0.3, 0.2], &[0.0, 0.0]);
        let before = cfg.clone();
        let settings = DynamicsSettings {
            gravity: Vec3::zeros(),
            ground: None,
        };
        step(&m, &mut cfg, &[0.0, 0.0], 1e-3, &settings).unwrap();
        assert_eq!(cfg, before);
    }

    #[test]
    fn step_clamps_at_upper_limit() {
        let m = fixtures::load("drawer_cabinet").unwrap();
        let mut cfg = cfg1(&[0.3], &[0.5]);
        step(&m, &mut cfg, &[0.0], 1e-3, &DynamicsSettings::default()).unwrap();
        assert_eq!(cfg.q[0], 0.3);
        assert!(cfg.qd[0] <= 0.0);
    }

    #[test]
    fn non_finite_torque_faults_env() {
        let m = fixtures::load("pendulum").unwrap();
        let mut cfg = BatchConfiguration::from_arrays(2, 1, vec![0.1, 0.1], vec![0.0, 0.0]).unwrap();
        let faulted = step(&m, &mut cfg, &[f64::NAN, 0.0], 1e-3, &DynamicsSettings::default()).unwrap();
        assert_eq!(faulted, vec![true, false]);
        assert!(cfg.q.iter().chain(&cfg.qd).all(|v| v.is_finite()));
        assert!(matches!(
            step(&m, &mut cfg, &[0.0, 0.0], 0.0, &DynamicsSettings::default()),
            Err(DynamicsError::TimeStep(_))
        ));
    }

    #[test]
    fn breakaway_hold_and_break() {
        let mut s = BreakawayJointState::new(2, 20.0, 20.0);
        let r = s.update(&[10.0, 30.0]);
        assert!(r[0].locked && r[0].torque == -10.0);
        assert_eq!(s.broken, vec![false, true]);
        // once broken, small loads no longer hold
        let r = s.update(&[0.0, 1.0]);
        assert!(!r[1].locked && r[1].torque == 0.0);
        assert!(s.broken[1]);
        s.reset(1);
        assert!(!s.broken[1]);
    }

    #[test]
    fn attach_rules() {
        let mut t = AttachmentTable::new(0);
        let g = Transform::from_translation(Vec3::new(0.5, 0.0, 0.2));
        let obj = Transform::from_translation(Vec3::new(0.5, 0.0, 0.2));
        assert_eq!(
            t.attach((0, 3), &g, AttachTarget::Body(0), &obj, false, 0.05),
            Err(DynamicsError::GripperOpen)
        );
        let far = Transform::from_translation(Vec3::new(0.5, 0.0, 0.3));
        assert!(matches!(
            t.attach((0, 3), &g, AttachTarget::Body(0), &far, true, 0.05),
            Err(DynamicsError::OutOfReach { .. })
        ));
        let a = t.attach((0, 3), &g, AttachTarget::Body(0), &obj, true, 0.05).unwrap();
        assert!(a.relative.position.norm() < 1e-15);
        assert!(a.relative.orientation.angle() < 1e-12);
        assert_eq!(
            t.attach((0, 3), &g, AttachTarget::Body(1), &obj, true, 0.05),
            Err(DynamicsError::AlreadyAttached)
        );
        assert!(t.detach((0, 3)).is_some());
        assert!(t.active((0, 3)).is_none());
    }

    #[test]
    fn free_body_rests_on_support() {
        let mut b = FreeBody {
            pose: Transform::from_translation(Vec3::new(0.0, 0.0, 0.1)),
            lin_vel: Vec3::zeros(),
            ang_vel: Vec3::zeros(),
            inertia: SpatialInertia::new(0.2, Vec3::zeros(), crate::spatial::Mat3::identity() * 1e-4),
            support_height: 0.025,
        };
        for _ in 0..2000 {
            b.integrate(&DynamicsSettings::default().gravity, 1e-3);
        }
        assert_eq!(b.pose.position.z, 0.025);
        assert_eq!(b.lin_vel, Vec3::zeros());
    }
}
