//! Motion generators: damped least-squares differential IK, operational
//! space control, and quintic joint-command interpolation.

use nalgebra::{DMatrix, DVector, Vector6};
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsWorkspace, RigidParams};
use crate::model::RobotDescription;
use crate::spatial::{rotation_vector, Transform, Vec3};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MotionError {
    #[error("singular damped system")]
    Singular,
    #[error("segment duration must be positive, got {0}")]
    Duration(f64),
    #[error("boundary vectors differ in length")]
    Dimension,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct IkParams {
    pub damping: f64,
    pub position_gain: f64,
    pub orientation_gain: f64,
    /// Largest joint step norm per solve (rad).
    pub max_step: f64,
}

impl Default for IkParams {
    fn default() -> Self {
        Self {
            damping: 0.05,
            position_gain: 1.0,
            orientation_gain: 1.0,
            max_step: 0.2,
        }
    }
}

/// Six-vector from `current` to `desired`: linear part first, then the
/// shortest-path axis-angle of `R_des · R_curᵀ`.
pub fn pose_error(current: &Transform, desired: &Transform) -> Vector6<f64> {
    let lin = desired.position - current.position;
    let ang = if desired.orientation == current.orientation {
        Vec3::zeros()
    } else {
        rotation_vector(&(desired.orientation * current.orientation.inverse()))
    };
    Vector6::new(lin.x, lin.y, lin.z, ang.x, ang.y, ang.z)
}

/// Damped least-squares step `Jᵀ(JJᵀ + λ²I)⁻¹·(gains ⊙ err)`, norm-clamped.
///
/// `j` may be 6×n (position and orientation) or 3×n (position only).
pub fn dls_ik_step(j: &DMatrix<f64>, err: &[f64], params: &IkParams) -> Result<DVector<f64>, MotionError> {
    let rows = j.nrows();
    if err.len() != rows {
        return Err(MotionError::Dimension);
    }
    let e = DVector::from_iterator(
        rows,
        err.iter()
            .enumerate()
            .map(|(i, v)| v * if i < 3 { params.position_gain } else { params.orientation_gain }),
    );
    let mut a = j * j.transpose();
    for i in 0..rows {
        a[(i, i)] += params.damping * params.damping;
    }
    let y = a.lu().solve(&e).ok_or(MotionError::Singular)?;
    let mut dq = j.transpose() * y;
    if !dq.iter().all(|v| v.is_finite()) {
        return Err(MotionError::Singular);
    }
    let norm = dq.norm();
    if norm > params.max_step {
        dq *= params.max_step / norm;
    }
    Ok(dq)
}

/// Batched [`dls_ik_step`]; failed environments get a zero step and are
/// reported in the second vector.
pub fn dls_ik_step_batch(
    js: &[DMatrix<f64>],
    errs: &[Vector6<f64>],
    params: &IkParams,
) -> (Vec<DVector<f64>>, Vec<usize>) {
    let mut faulted = Vec::new();
    let steps = js
        .iter()
        .zip(errs)
        .enumerate()
        .map(|(env, (j, e))| {
            dls_ik_step(j, e.as_slice(), params).unwrap_or_else(|_| {
                faulted.push(env);
                DVector::zeros(j.ncols())
            })
        })
        .collect();
    (steps, faulted)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OscParams {
    pub kp: [f64; 6],
    pub kd: [f64; 6],
    pub nullspace_kp: f64,
    pub nullspace_kd: f64,
    /// Posture target; `None` disables the nullspace term.
    pub posture: Option<Vec<f64>>,
    /// Regularizer added to `J M⁻¹ Jᵀ` before inversion.
    pub epsilon: f64,
    pub gravity_compensation: bool,
}

impl Default for OscParams {
    fn default() -> Self {
        Self {
            kp: [150.0; 6],
            kd: [2.0 * 150f64.sqrt(); 6],
            nullspace_kp: 10.0,
            nullspace_kd: 2.0 * 10f64.sqrt(),
            posture: None,
            epsilon: 1e-4,
            gravity_compensation: true,
        }
    }
}

/// Operational-space torques from explicit dynamics quantities.
///
/// `err` and `xdot` have one entry per row of `j`; `kp`/`kd` are taken from
/// the first rows of the parameter arrays.
#[allow(clippy::too_many_arguments)]
pub fn osc_kernel(
    m: &DMatrix<f64>,
    j: &DMatrix<f64>,
    g: &DVector<f64>,
    err: &DVector<f64>,
    xdot: &DVector<f64>,
    q: &[f64],
    qd: &[f64],
    params: &OscParams,
) -> Result<DVector<f64>, MotionError> {
    let n = m.nrows();
    let rows = j.nrows();
    let m_inv = m.clone().cholesky().ok_or(MotionError::Singular)?.inverse();
    let mut lambda_inv = j * &m_inv * j.transpose();
    for i in 0..rows {
        lambda_inv[(i, i)] += params.epsilon;
    }
    let lambda = lambda_inv.try_inverse().ok_or(MotionError::Singular)?;
    let f_task = DVector::from_iterator(rows, (0..rows).map(|i| params.kp[i] * err[i] - params.kd[i] * xdot[i]));
    let force = &lambda * f_task;
    let mut tau = j.transpose() * force;
    if params.gravity_compensation {
        tau += g;
    }
    if let Some(posture) = &params.posture {
        let null = DVector::from_iterator(
            n,
            (0..n).map(|d| params.nullspace_kp * (posture[d] - q[d]) - params.nullspace_kd * qd[d]),
        );
        let j_bar = &m_inv * j.transpose() * &lambda;
        let projector = DMatrix::identity(n, n) - j.transpose() * j_bar.transpose();
        tau += projector * null;
    }
    Ok(tau)
}

/// Operational-space torques for a frame fixed in `link` at `point` (link frame).
#[allow(clippy::too_many_arguments)]
pub fn osc_torques(
    model: &RobotDescription,
    params_rigid: &RigidParams,
    gravity: &Vec3,
    base: &Transform,
    q: &[f64],
    qd: &[f64],
    link: usize,
    offset: &Transform,
    desired: &Transform,
    desired_vel: &Vector6<f64>,
    params: &OscParams,
    ws: &mut DynamicsWorkspace,
) -> Result<DVector<f64>, MotionError> {
    let n = model.num_dofs();
    ws.update_kinematics(model, base, q, &params_rigid.inertias);
    let mut m = DMatrix::zeros(n, n);
    ws.crba(model, &mut m);
    ws.compute_gravity_torque(model, gravity);
    let g = DVector::from_column_slice(&ws.gravity_torque);
    let frame = ws.poses[link].compose(offset);
    let j = model.point_jacobian(&ws.poses, link, &frame.position);
    let e = pose_error(&frame, desired);
    let xdot = &j * DVector::from_column_slice(qd) - DVector::from_column_slice(desired_vel.as_slice());
    osc_kernel(
        &m,
        &j,
        &g,
        &DVector::from_column_slice(e.as_slice()),
        &xdot,
        q,
        qd,
        params,
    )
}

/// Fifth-order polynomial per DoF on `[0, duration]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuinticSegment {
    pub coeffs: Vec<[f64; 6]>,
    pub duration: f64,
}

/// The unique quintic per DoF matching position, velocity and acceleration at both ends.
pub fn quintic_fit(
    q0: &[f64],
    v0: &[f64],
    a0: &[f64],
    q1: &[f64],
    v1: &[f64],
    a1: &[f64],
    duration: f64,
) -> Result<QuinticSegment, MotionError> {
    if !(duration > 0.0) {
        return Err(MotionError::Duration(duration));
    }
    let n = q0.len();
    if [v0.len(), a0.len(), q1.len(), v1.len(), a1.len()].iter().any(|&l| l != n) {
        return Err(MotionError::Dimension);
    }
    let t = duration;
    let coeffs = (0..n)
        .map(|i| {
            let h = q1[i] - q0[i];
            [
                q0[i],
                v0[i],
                0.5 * a0[i],
                (20.0 * h - (8.0 * v1[i] + 12.0 * v0[i]) * t - (3.0 * a0[i] - a1[i]) * t * t) / (2.0 * t.powi(3)),
                (-30.0 * h + (14.0 * v1[i] + 16.0 * v0[i]) * t + (3.0 * a0[i] - 2.0 * a1[i]) * t * t)
                    / (2.0 * t.powi(4)),
                (12.0 * h - 6.0 * (v1[i] + v0[i]) * t + (a1[i] - a0[i]) * t * t) / (2.0 * t.powi(5)),
            ]
        })
        .collect();
    Ok(QuinticSegment { coeffs, duration })
}

/// Position, velocity, and acceleration at `t`, clamped into `[0, T]`.
pub fn quintic_sample(seg: &QuinticSegment, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let t = t.clamp(0.0, seg.duration);
    let mut q = Vec::with_capacity(seg.coeffs.len());
    let mut v = Vec::with_capacity(seg.coeffs.len());
    let mut a = Vec::with_capacity(seg.coeffs.len());
    for c in &seg.coeffs {
        q.push(c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5])))));
        v.push(c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5]))));
        a.push(2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5])));
    }
    (q, v, a)
}

/// Upsamples a fixed-rate command stream into C² joint targets.
///
/// Each incoming command starts a segment from the current interpolated
/// state to that command; its end velocity and acceleration are backward
/// finite differences of the stream. Output lags the stream by one period.
#[derive(Clone, Debug)]
pub struct QuinticUpsampler {
    period: f64,
    history: Vec<Vec<f64>>,
    segment: Option<QuinticSegment>,
    elapsed: f64,
}

impl QuinticUpsampler {
    pub fn new(command_rate: f64) -> Self {
        Self {
            period: 1.0 / command_rate,
            history: Vec::new(),
            segment: None,
            elapsed: 0.0,
        }
    }

    pub fn reset(&mut self, q: &[f64]) {
        self.history = vec![q.to_vec()];
        self.segment = None;
        self.elapsed = 0.0;
    }

    pub fn segment(&self) -> Option<&QuinticSegment> {
        self.segment.as_ref()
    }

    /// Accepts the next stream sample.
    pub fn push(&mut self, command: &[f64]) -> Result<(), MotionError> {
        let (q0, v0, a0) = match &self.segment {
            Some(seg) => quintic_sample(seg, self.elapsed),
            None => {
                let start = self.history.last().cloned().unwrap_or_else(|| command.to_vec());
                let z = vec![0.0; start.len()];
                (start, z.clone(), z)
            }
        };
        if q0.len() != command.len() {
            return Err(MotionError::Dimension);
        }
        self.history.push(command.to_vec());
        if self.history.len() > 3 {
            self.history.remove(0);
        }
        let h = &self.history;
        let t = self.period;
        let n = command.len();
        let (v1, a1) = match h.len() {
            3 => (
                (0..n).map(|i| (h[2][i] - h[1][i]) / t).collect(),
                (0..n).map(|i| (h[2][i] - 2.0 * h[1][i] + h[0][i]) / (t * t)).collect(),
            ),
            2 => ((0..n).map(|i| (h[1][i] - h[0][i]) / t).collect(), vec![0.0; n]),
            _ => (vec![0.0; n], vec![0.0; n]),
        };
        self.segment = Some(quintic_fit(&q0, &v0, &a0, command, &v1, &a1, t)?);
        self.elapsed = 0.0;
        Ok(())
    }

    /// Advances by `dt` and returns the interpolated (q, v, a).
    pub fn sample(&mut self, dt: f64) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.elapsed = (self.elapsed + dt).min(self.period);
        self.segment.as_ref().map(|s| quintic_sample(s, self.elapsed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DynamicsSettings;
    use crate::fixtures;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn pose_error_examples() {
        let t = Transform::from_parts([0.1, 0.2, 0.3], [0.9, 0.1, 0.2, 0.3]);
        assert_eq!(pose_error(&t, &t), Vector6::zeros());
        let moved = Transform::new(t.position + Vec3::new(0.1, 0.0, 0.0), t.orientation);
        assert!((pose_error(&t, &moved) - Vector6::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0)).norm() < 1e-15);
        let yaw = Transform::new(Vec3::zeros(), UnitQuaternion::from_axis_angle(&Vector3::z_axis(), FRAC_PI_2));
        let e = pose_error(&Transform::identity(), &yaw);
        assert!((e - Vector6::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2)).norm() < 1e-9);
    }

    #[test]
    fn identity_jacobian_step() {
        let p = IkParams {
            damping: 0.0,
            ..Default::default()
        };
        let dq = dls_ik_step(&DMatrix::identity(3, 3), &[0.1, 0.0, 0.0], &p).unwrap();
        assert_eq!(dq.as_slice(), &[0.1, 0.0, 0.0]);
        let dq = dls_ik_step(&DMatrix::identity(3, 3), &[0.0; 3], &p).unwrap();
        assert_eq!(dq.norm(), 0.0);
    }

    #[test]
    fn singular_without_damping_fails() {
        let p = IkParams {
            damping: 0.0,
            ..Default::default()
        };
        assert_eq!(
            dls_ik_step(&DMatrix::zeros(3, 3), &[0.1, 0.0, 0.0], &p),
            Err(MotionError::Singular)
        );
    }

    #[test]
    fn damped_step_matches_svd_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = IkParams {
            damping: 0.05,
            max_step: f64::INFINITY,
            ..Default::default()
        };
        for _ in 0..200 {
            let mut j = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
            // squash one singular value to make the Jacobian nearly singular
            let svd = j.clone().svd(true, true);
            let mut s = svd.singular_values.clone();
            s[2] = rng.gen_range(0.0..1e-3);
            j = svd.u.as_ref().unwrap() * DMatrix::from_diagonal(&s) * svd.v_t.as_ref().unwrap();
            let err: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.1..0.1)).collect();
            let dq = dls_ik_step(&j, &err, &p).unwrap();
            let svd = j.clone().svd(true, true);
            let u = svd.u.unwrap();
            let vt = svd.v_t.unwrap();
            let e = DVector::from_vec(err.clone());
            let mut oracle = DVector::zeros(3);
            for k in 0..3 {
                let sigma = svd.singular_values[k];
                let coeff = sigma / (sigma * sigma + p.damping * p.damping) * u.column(k).dot(&e);
                oracle += vt.row(k).transpose() * coeff;
            }
            assert!((&dq - &oracle).norm() < 1e-10 * (1.0 + oracle.norm()));
            assert!(dq.norm() <= e.norm() / (2.0 * p.damping) + 1e-12);
        }
    }

    #[test]
    fn step_is_norm_clamped() {
        let p = IkParams {
            damping: 0.0,
            max_step: 0.05,
            ..Default::default()
        };
        let dq = dls_ik_step(&DMatrix::identity(3, 3), &[1.0, 1.0, 0.0], &p).unwrap();
        assert!((dq.norm() - 0.05).abs() < 1e-15);
    }

    #[test]
    fn dls_step_reduces_arm_pose_error() {
        let m = fixtures::load("panda").unwrap();
        let tcp = m.link("panda_tcp").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let params = IkParams {
            position_gain: 0.2,
            orientation_gain: 0.2,
            ..Default::default()
        };
        let mut failures = 0;
        for _ in 0..1000 {
            let mut q = m.neutral_configuration();
            for v in q.iter_mut().take(7) {
                *v += rng.gen_range(-0.3..0.3);
            }
            let mut target_q = q.clone();
            for v in target_q.iter_mut().take(7) {
                *v += rng.gen_range(-0.1..0.1);
            }
            let target = m.link_poses(&Transform::identity(), &target_q)[tcp];
            let poses = m.link_poses(&Transform::identity(), &q);
            let e0 = pose_error(&poses[tcp], &target);
            let j = m.point_jacobian(&poses, tcp, &poses[tcp].position);
            let dq = dls_ik_step(&j, e0.as_slice(), &params).unwrap();
            for d in 0..m.num_dofs() {
                q[d] += dq[d];
            }
            let e1 = pose_error(&m.link_poses(&Transform::identity(), &q)[tcp], &target);
            if e1.norm() > e0.norm() {
                failures += 1;
            }
        }
        assert!(failures < 10, "{failures}");
    }

    #[test]
    fn osc_at_target_is_gravity_plus_nullspace() {
        let m = fixtures::load("panda").unwrap();
        let params_rigid = RigidParams::nominal(&m);
        let q = m.neutral_configuration();
        let tcp = m.link("panda_tcp").unwrap();
        let mut ws = DynamicsWorkspace::new(&m);
        let g = DynamicsSettings::default().gravity;
        let target = m.link_poses(&Transform::identity(), &q)[tcp];
        let op = OscParams {
            posture: None,
            ..Default::default()
        };
        let zero = vec![0.0; m.num_dofs()];
        let tau = osc_torques(
            &m, &params_rigid, &g, &Transform::identity(), &q, &zero, tcp, &Transform::identity(), &target,
            &Vector6::zeros(), &op, &mut ws,
        )
        .unwrap();
        ws.update_kinematics(&m, &Transform::identity(), &q, &params_rigid.inertias);
        ws.compute_gravity_torque(&m, &g);
        for d in 0..m.num_dofs() {
            assert!((tau[d] - ws.gravity_torque[d]).abs() < 1e-9);
        }
    }

    #[test]
    fn osc_without_nullspace_lies_in_range_of_jt() {
        let m = fixtures::load("panda").unwrap();
        let params_rigid = RigidParams::nominal(&m);
        let tcp = m.link("panda_tcp").unwrap();
        let mut ws = DynamicsWorkspace::new(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let op = OscParams {
            posture: None,
            gravity_compensation: false,
            ..Default::default()
        };
        for _ in 0..20 {
            let mut q = m.neutral_configuration();
            for v in q.iter_mut().take(7) {
                *v += rng.gen_range(-0.5..0.5);
            }
            let qd: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.2..0.2)).collect();
            let target = Transform::from_parts([0.4, 0.1, 0.4], [0.0, 1.0, 0.0, 0.0]);
            let tau = osc_torques(
                &m, &params_rigid, &Vec3::zeros(), &Transform::identity(), &q, &qd, tcp, &Transform::identity(),
                &target, &Vector6::zeros(), &op, &mut ws,
            )
            .unwrap();
            let poses = m.link_poses(&Transform::identity(), &q);
            let jt = m.point_jacobian(&poses, tcp, &poses[tcp].position).transpose();
            // least-squares projection onto range(Jᵀ)
            let coef = jt.clone().svd(true, true).solve(&tau, 1e-12).unwrap();
            let residual = &tau - &jt * coef;
            assert!(residual.norm() < 1e-8 * (1.0 + tau.norm()), "{}", residual.norm());
        }
    }

    #[test]
    fn one_dof_osc_equals_joint_pd() {
        let mass = DMatrix::from_element(1, 1, 1.0);
        let j = DMatrix::from_element(1, 1, 1.0);
        let g = DVector::from_element(1, 4.2);
        let op = OscParams {
            kp: [50.0; 6],
            kd: [3.0; 6],
            epsilon: 0.0,
            posture: None,
            ..Default::default()
        };
        let (q, q_des, qd) = (0.3, 0.7, -0.2);
        let tau = osc_kernel(
            &mass,
            &j,
            &g,
            &DVector::from_element(1, q_des - q),
            &DVector::from_element(1, qd),
            &[q],
            &[qd],
            &op,
        )
        .unwrap();
        let pd = 50.0 * (q_des - q) - 3.0 * qd + 4.2;
        assert!((tau[0] - pd).abs() < 1e-9);
    }

    #[test]
    fn quintic_examples() {
        let seg = quintic_fit(&[0.0], &[0.0], &[0.0], &[1.0], &[0.0], &[0.0], 1.0).unwrap();
        assert!((quintic_sample(&seg, 0.5).0[0] - 0.5).abs() < 1e-15);
        let seg = quintic_fit(&[0.2], &[-1.0], &[3.0], &[1.5], &[0.5], &[-2.0], 0.3).unwrap();
        let (q, v, a) = quintic_sample(&seg, 0.0);
        assert_eq!((q[0], v[0], a[0]), (0.2, -1.0, 3.0));
        let (q, v, a) = quintic_sample(&seg, 0.3);
        assert!((q[0] - 1.5).abs() < 1e-12 && (v[0] - 0.5).abs() < 1e-12 && (a[0] + 2.0).abs() < 1e-10);
        assert_eq!(
            quintic_fit(&[0.0], &[0.0], &[0.0], &[1.0], &[0.0], &[0.0], 0.0),
            Err(MotionError::Duration(0.0))
        );
    }

    #[test]
    fn upsampled_stream_is_c2_at_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut up = QuinticUpsampler::new(60.0);
        up.reset(&[0.0, 0.0]);
        let mut prev_end: Option<(Vec<f64>, Vec<f64>, Vec<f64>)> = None;
        let mut c = [0.0, 0.0];
        for _ in 0..200 {
            c[0] += rng.gen_range(-0.05..0.05);
            c[1] += rng.gen_range(-0.05..0.05);
            up.push(&c).unwrap();
            let seg = up.segment().unwrap().clone();
            let start = quintic_sample(&seg, 0.0);
            if let Some((q, v, a)) = &prev_end {
                for i in 0..2 {
                    assert!((start.0[i] - q[i]).abs() < 1e-9);
                    assert!((start.1[i] - v[i]).abs() < 1e-9);
                    assert!((start.2[i] - a[i]).abs() < 1e-9 * (1.0 + a[i].abs()));
                }
            }
            // play the segment at 1 kHz
            let mut last = None;
            for _ in 0..17 {
                last = up.sample(1e-3);
            }
            prev_end = last;
        }
    }
}
