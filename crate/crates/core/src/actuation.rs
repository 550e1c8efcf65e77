//! Actuator groups: command latching, joint-level control laws, and
//! transmission models (ideal, DC motor, series elastic, delayed).
//!
//! A group owns a subset of joints. Commands are latched with
//! [`GroupState::set_command`] and consumed on the group's own tick, which
//! fires every `physics_rate / update_rate` substeps. Between ticks the held
//! command is re-evaluated against fresh joint state every substep.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ActuationError {
    #[error("command dimension mismatch for group `{group}`: expected {expected}, got {got}")]
    DimensionMismatch {
        group: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite command for group `{0}`")]
    NonFinite(String),
    #[error("group `{group}` rate {rate} Hz does not divide the physics rate {physics} Hz")]
    Rate {
        group: String,
        rate: f64,
        physics: f64,
    },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum CommandType {
    Position,
    Velocity,
    Torque,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Gains {
    pub kp: f64,
    pub kd: f64,
}

/// Torque–speed envelope of a DC motor.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct DcParams {
    pub stall_torque: f64,
    pub no_load_speed: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct SeaParams {
    pub spring_k: f64,
    pub spring_d: f64,
    pub motor_inertia: f64,
    /// Motor-side position loop; falls back to the group gains.
    #[serde(default)]
    pub motor_gains: Option<Gains>,
    pub stall_torque: f64,
    pub no_load_speed: f64,
}

impl SeaParams {
    pub fn dc(&self) -> DcParams {
        DcParams {
            stall_torque: self.stall_torque,
            no_load_speed: self.no_load_speed,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TransmissionModel {
    Ideal,
    DcMotor(DcParams),
    Sea(SeaParams),
    Delayed {
        delay_ticks: usize,
        inner: Box<TransmissionModel>,
    },
}

impl TransmissionModel {
    pub fn delay_ticks(&self) -> usize {
        match self {
            TransmissionModel::Delayed { delay_ticks, inner } => delay_ticks + inner.delay_ticks(),
            _ => 0,
        }
    }

    /// The model with any delay wrappers removed.
    pub fn base(&self) -> &TransmissionModel {
        match self {
            TransmissionModel::Delayed { inner, .. } => inner.base(),
            m => m,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ActuatorGroupConfig {
    pub name: String,
    pub joints: Vec<String>,
    pub command_type: CommandType,
    pub model: TransmissionModel,
    #[serde(default)]
    pub gains: Gains,
    /// Defaults to the physics rate.
    #[serde(default)]
    pub update_rate: Option<f64>,
    /// Adds the joint-space gravity torque g(q) as feed-forward.
    #[serde(default)]
    pub gravity_compensation: bool,
}

impl ActuatorGroupConfig {
    pub fn validate(&self) -> Result<(), String> {
        let g = self.gains;
        if !(g.kp >= 0.0 && g.kd >= 0.0) {
            return Err(format!("group `{}`: gains must be non-negative", self.name));
        }
        if let Some(r) = self.update_rate {
            if !(r > 0.0 && r.is_finite()) {
                return Err(format!("group `{}`: update rate must be positive", self.name));
            }
        }
        let dc_ok = |p: &DcParams| p.stall_torque > 0.0 && p.no_load_speed > 0.0;
        match self.model.base() {
            TransmissionModel::DcMotor(p) if !dc_ok(p) => Err(format!(
                "group `{}`: stall torque and no-load speed must be positive",
                self.name
            )),
            TransmissionModel::Sea(p)
                if !(dc_ok(&p.dc()) && p.spring_k > 0.0 && p.spring_d >= 0.0 && p.motor_inertia > 0.0) =>
            {
                Err(format!("group `{}`: invalid series-elastic parameters", self.name))
            }
            _ => Ok(()),
        }
    }
}

/// DC motor torque limit. The driving quadrant derates linearly from the
/// stall torque at rest to zero at the no-load speed; braking is capped at
/// the stall torque.
pub fn dc_saturate(tau_cmd: f64, omega: f64, dc: &DcParams) -> f64 {
    let ts = dc.stall_torque;
    let derated = ts * (1.0 - omega.abs() / dc.no_load_speed).max(0.0);
    let (lower, upper) = if omega >= 0.0 { (-ts, derated) } else { (-derated, ts) };
    tau_cmd.clamp(lower, upper)
}

/// Motor-side state of one series-elastic joint.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SeaState {
    pub motor_pos: f64,
    pub motor_vel: f64,
    pub motor_torque: f64,
}

/// Advances one series-elastic actuator by `dt` and returns the spring torque
/// delivered to the joint at the start of the step.
pub fn sea_step(params: &SeaParams, state: &mut SeaState, tau_motor_cmd: f64, q: f64, qd: f64, dt: f64) -> f64 {
    let tau_joint = params.spring_k * (state.motor_pos - q) + params.spring_d * (state.motor_vel - qd);
    let tau_motor = dc_saturate(tau_motor_cmd, state.motor_vel, &params.dc());
    let acc = (tau_motor - tau_joint) / params.motor_inertia;
    state.motor_vel += acc * dt;
    state.motor_pos += state.motor_vel * dt;
    state.motor_torque = tau_motor;
    tau_joint
}

/// Static part of a group bound to a model: joint coordinates, tick divisor,
/// and effort limits.
#[derive(Clone, Debug)]
pub struct ActuatorGroup {
    pub config: ActuatorGroupConfig,
    pub dofs: Vec<usize>,
    pub effort: Vec<f64>,
    /// Physics substeps per group tick.
    pub divisor: u64,
}

impl ActuatorGroup {
    pub fn new(
        config: ActuatorGroupConfig,
        dofs: Vec<usize>,
        effort: Vec<f64>,
        physics_rate: f64,
    ) -> Result<Self, ActuationError> {
        let rate = config.update_rate.unwrap_or(physics_rate);
        let ratio = physics_rate / rate;
        let divisor = ratio.round();
        if !(divisor >= 1.0 && (ratio - divisor).abs() < 1e-9) {
            return Err(ActuationError::Rate {
                group: config.name.clone(),
                rate,
                physics: physics_rate,
            });
        }
        Ok(Self {
            config,
            dofs,
            effort,
            divisor: divisor as u64,
        })
    }

    pub fn size(&self) -> usize {
        self.dofs.len()
    }

    pub fn new_state(&self) -> GroupState {
        let n = self.size();
        GroupState {
            latched: vec![0.0; n],
            active: vec![0.0; n],
            fifo: vec![0.0; n * self.config.model.delay_ticks()],
            fifo_head: 0,
            sea: vec![SeaState::default(); n],
            applied: vec![0.0; n],
            substeps: 0,
            ticks: 0,
            gain_scale: 1.0,
        }
    }

    /// Clears the group and holds the given joint state: position groups hold
    /// `q`, velocity and torque groups hold zero.
    pub fn reset(&self, state: &mut GroupState, q: &[f64], qd: &[f64]) {
        for (i, &d) in self.dofs.iter().enumerate() {
            let hold = match self.config.command_type {
                CommandType::Position => q[d],
                _ => 0.0,
            };
            state.latched[i] = hold;
            state.active[i] = hold;
            state.sea[i] = SeaState {
                motor_pos: q[d],
                motor_vel: qd[d],
                motor_torque: 0.0,
            };
            state.applied[i] = 0.0;
        }
        let n = self.size();
        for slot in state.fifo.chunks_mut(n.max(1)) {
            slot.copy_from_slice(&state.latched[..slot.len()]);
        }
        state.fifo_head = 0;
        state.substeps = 0;
        state.ticks = 0;
    }

    /// Joint torques for the group's joints, written into the full torque
    /// vector `out` at the group's coordinates. Call exactly once per substep.
    pub fn compute_torques(
        &self,
        state: &mut GroupState,
        q: &[f64],
        qd: &[f64],
        feedforward: Option<&[f64]>,
        dt: f64,
        out: &mut [f64],
    ) {
        self.torques(state, q, qd, feedforward, dt, out, None);
    }

    /// Like [`compute_torques`](Self::compute_torques), but an ideal position
    /// drive is evaluated at the end-of-step velocity: the torque uses
    /// `q + dt·qd` and `kd·dt + kp·dt²` is written to `armature` for the
    /// solver to add to the joint inertia. Saturated joints stay explicit.
    #[allow(clippy::too_many_arguments)]
    pub fn compute_torques_implicit(
        &self,
        state: &mut GroupState,
        q: &[f64],
        qd: &[f64],
        feedforward: Option<&[f64]>,
        dt: f64,
        out: &mut [f64],
        armature: &mut [f64],
    ) {
        self.torques(state, q, qd, feedforward, dt, out, Some(armature));
    }

    #[allow(clippy::too_many_arguments)]
    fn torques(
        &self,
        state: &mut GroupState,
        q: &[f64],
        qd: &[f64],
        feedforward: Option<&[f64]>,
        dt: f64,
        out: &mut [f64],
        mut armature: Option<&mut [f64]>,
    ) {
        if state.substeps % self.divisor == 0 {
            state.tick(self.size());
        }
        state.substeps += 1;

        let gains = Gains {
            kp: self.config.gains.kp * state.gain_scale,
            kd: self.config.gains.kd * state.gain_scale,
        };
        let law = |cmd: f64, x: f64, v: f64, g: Gains| match self.config.command_type {
            CommandType::Position => g.kp * (cmd - x) + g.kd * (0.0 - v),
            CommandType::Velocity => g.kd * (cmd - v),
            CommandType::Torque => cmd,
        };
        let implicit = armature.is_some()
            && self.config.command_type == CommandType::Position
            && matches!(self.config.model, TransmissionModel::Ideal);
        for (i, &d) in self.dofs.iter().enumerate() {
            let ff = feedforward.map_or(0.0, |f| f[d]);
            let cmd = state.active[i];
            let e = self.effort[i];
            let clamp = |t: f64| if e > 0.0 { t.clamp(-e, e) } else { t };
            let tau = match self.config.model.base() {
                TransmissionModel::Ideal if implicit => {
                    let t = law(cmd, q[d] + dt * qd[d], qd[d], gains) + ff;
                    if e <= 0.0 || t.abs() <= e {
                        if let Some(a) = armature.as_deref_mut() {
                            a[d] = gains.kd * dt + gains.kp * dt * dt;
                        }
                        t
                    } else {
                        clamp(law(cmd, q[d], qd[d], gains) + ff)
                    }
                }
                TransmissionModel::Ideal => clamp(law(cmd, q[d], qd[d], gains) + ff),
                TransmissionModel::DcMotor(dc) => dc_saturate(law(cmd, q[d], qd[d], gains) + ff, qd[d], dc),
                TransmissionModel::Sea(p) => {
                    let s = state.sea[i];
                    let mg = p.motor_gains.unwrap_or(gains);
                    let motor_cmd = law(cmd, s.motor_pos, s.motor_vel, mg) + ff;
                    sea_step(p, &mut state.sea[i], motor_cmd, q[d], qd[d], dt)
                }
                TransmissionModel::Delayed { .. } => unreachable!("base() strips delays"),
            };
            state.applied[i] = tau;
            out[d] = tau;
        }
    }
}

/// Per-environment runtime state of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupState {
    latched: Vec<f64>,
    active: Vec<f64>,
    /// Ring buffer of `delay_ticks` pending commands.
    fifo: Vec<f64>,
    fifo_head: usize,
    pub sea: Vec<SeaState>,
    /// Torques applied on the last substep.
    pub applied: Vec<f64>,
    pub substeps: u64,
    pub ticks: u64,
    /// Per-episode multiplier on kp and kd; randomization sets it at reset.
    pub gain_scale: f64,
}

impl GroupState {
    /// Latches a command; it takes effect on the group's next tick.
    pub fn set_command(&mut self, name: &str, cmd: &[f64]) -> Result<(), ActuationError> {
        if cmd.len() != self.latched.len() {
            return Err(ActuationError::DimensionMismatch {
                group: name.to_string(),
                expected: self.latched.len(),
                got: cmd.len(),
            });
        }
        if cmd.iter().any(|v| !v.is_finite()) {
            return Err(ActuationError::NonFinite(name.to_string()));
        }
        self.latched.copy_from_slice(cmd);
        Ok(())
    }

    pub fn latched(&self) -> &[f64] {
        &self.latched
    }

    /// Command currently driving the control law.
    pub fn active(&self) -> &[f64] {
        &self.active
    }

    pub fn delay_len(&self) -> usize {
        if self.latched.is_empty() {
            0
        } else {
            self.fifo.len() / self.latched.len()
        }
    }

    fn tick(&mut self, n: usize) {
        self.ticks += 1;
        if self.fifo.is_empty() {
            self.active.copy_from_slice(&self.latched);
            return;
        }
        let slots = self.fifo.len() / n;
        let head = self.fifo_head * n;
        self.active.copy_from_slice(&self.fifo[head..head + n]);
        self.fifo[head..head + n].copy_from_slice(&self.latched);
        self.fifo_head = (self.fifo_head + 1) % slots;
    }
}

/// One group over a batch of environments.
#[derive(Clone, Debug)]
pub struct ActuatorBatch {
    pub group: ActuatorGroup,
    pub states: Vec<GroupState>,
}

impl ActuatorBatch {
    pub fn new(group: ActuatorGroup, num_envs: usize) -> Self {
        let states = (0..num_envs).map(|_| group.new_state()).collect();
        Self { group, states }
    }

    pub fn reset(&mut self, cfg: &crate::model::BatchConfiguration) {
        for (env, s) in self.states.iter_mut().enumerate() {
            self.group.reset(s, cfg.q(env), cfg.qd(env));
        }
    }

    /// Latches `[num_envs × group_size]` commands. Environments with
    /// non-finite commands are reported and keep their previous command.
    pub fn set_command(&mut self, commands: &[f64]) -> Result<Vec<usize>, ActuationError> {
        let n = self.group.size();
        let expected = n * self.states.len();
        if commands.len() != expected {
            return Err(ActuationError::DimensionMismatch {
                group: self.group.config.name.clone(),
                expected,
                got: commands.len(),
            });
        }
        let mut faulted = Vec::new();
        for (env, (s, c)) in self.states.iter_mut().zip(commands.chunks(n.max(1))).enumerate() {
            if let Err(ActuationError::NonFinite(_)) = s.set_command(&self.group.config.name, c) {
                faulted.push(env);
            }
        }
        Ok(faulted)
    }

    /// Torques `[num_envs × group_size]` for the current substep.
    pub fn compute_torques(&mut self, cfg: &crate::model::BatchConfiguration, dt: f64) -> Vec<f64> {
        let n = self.group.size();
        let mut full = vec![0.0; cfg.num_dofs];
        let mut out = Vec::with_capacity(n * self.states.len());
        for (env, s) in self.states.iter_mut().enumerate() {
            self.group
                .compute_torques(s, cfg.q(env), cfg.qd(env), None, dt, &mut full);
            out.extend(self.group.dofs.iter().map(|&d| full[d]));
        }
        out
    }
}
