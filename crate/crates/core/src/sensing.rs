//! Timer-driven sensors with sample-and-hold outputs and additive noise.
//!
//! Each [`SensorBuffer`] owns a phase accumulator measured in sensor periods.
//! Every physics substep adds `dt · rate`; when the phase reaches one the
//! sensor refreshes from ground truth and subtracts one, carrying the
//! remainder so non-divisible rates do not drift.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::ContactReading;

/// Phase tolerance so accumulated rounding never delays a due refresh.
const PHASE_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SensorError {
    #[error("sensor `{name}`: rate {rate} Hz must be in (0, {physics}] Hz")]
    Rate { name: String, rate: f64, physics: f64 },
    #[error("sensor `{name}`: {channels} noise channels for width {width}")]
    NoiseWidth { name: String, channels: usize, width: usize },
    #[error("unknown sensor `{0}`")]
    Unknown(String),
    #[error("sensor `{name}` target `{target}` not found")]
    Target { name: String, target: String },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    /// Positions then velocities of the target joints (all DoFs if none).
    JointState,
    /// Position and (w,x,y,z) orientation of the target link.
    BodyPose,
    /// Force the grasp weld exerts on the held object, world frame.
    AttachmentForce,
    /// Contact flag and normal force per target contact point.
    FootContact,
    /// Latched command, applied torque, and motor position per joint of the target group.
    ActuatorDebug,
    /// Positions of the listed particles of the target particle system.
    Particles,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    None,
    Gaussian,
    #[serde(rename = "gaussian+bias")]
    GaussianBias,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct NoiseSpec {
    #[serde(default)]
    pub kind: NoiseKind,
    /// Per-channel standard deviation; a single entry applies to all channels.
    #[serde(default)]
    pub std: Vec<f64>,
    #[serde(default)]
    pub bias_std: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SensorSpec {
    pub name: String,
    pub kind: SensorKind,
    #[serde(default)]
    pub target: Vec<String>,
    /// Robot the sensor reads; defaults to the first robot.
    #[serde(default)]
    pub robot: Option<String>,
    pub rate: f64,
    #[serde(default)]
    pub noise: NoiseSpec,
    /// Particle indices for [`SensorKind::Particles`].
    #[serde(default)]
    pub indices: Vec<usize>,
}

impl SensorSpec {
    pub fn new(name: &str, kind: SensorKind, target: &[&str], rate: f64) -> Self {
        Self {
            name: name.to_string(),
            kind,
            target: target.iter().map(|s| s.to_string()).collect(),
            robot: None,
            rate,
            noise: NoiseSpec::default(),
            indices: Vec::new(),
        }
    }

    pub fn on_robot(mut self, robot: &str) -> Self {
        self.robot = Some(robot.to_string());
        self
    }

    pub fn with_indices(mut self, indices: &[usize]) -> Self {
        self.indices = indices.to_vec();
        self
    }

    pub fn with_noise(mut self, noise: NoiseSpec) -> Self {
        self.noise = noise;
        self
    }
}

fn per_channel(values: &[f64], width: usize, name: &str) -> Result<Vec<f64>, SensorError> {
    match values.len() {
        0 => Ok(vec![0.0; width]),
        1 => Ok(vec![values[0]; width]),
        n if n == width => Ok(values.to_vec()),
        n => Err(SensorError::NoiseWidth {
            name: name.to_string(),
            channels: n,
            width,
        }),
    }
}

/// Sample-and-hold state of one sensor in one environment.
#[derive(Clone, Debug)]
pub struct SensorBuffer {
    pub name: String,
    pub rate: f64,
    kind: NoiseKind,
    std: Vec<f64>,
    bias_std: Vec<f64>,
    bias: Vec<f64>,
    value: Vec<f64>,
    stamp: f64,
    phase: f64,
    refreshes: u64,
    rng: ChaCha8Rng,
}

impl SensorBuffer {
    pub fn new(spec: &SensorSpec, width: usize, physics_rate: f64, rng: ChaCha8Rng) -> Result<Self, SensorError> {
        if !(spec.rate > 0.0 && spec.rate <= physics_rate * (1.0 + 1e-12)) {
            return Err(SensorError::Rate {
                name: spec.name.clone(),
                rate: spec.rate,
                physics: physics_rate,
            });
        }
        Ok(Self {
            name: spec.name.clone(),
            rate: spec.rate,
            kind: spec.noise.kind,
            std: per_channel(&spec.noise.std, width, &spec.name)?,
            bias_std: per_channel(&spec.noise.bias_std, width, &spec.name)?,
            bias: vec![0.0; width],
            value: vec![0.0; width],
            stamp: 0.0,
            phase: 0.0,
            refreshes: 0,
            rng,
        })
    }

    pub fn width(&self) -> usize {
        self.value.len()
    }

    /// Starts an episode: samples the bias, clears the timer, and fills the
    /// buffer from `truth` at `time`.
    pub fn reset(&mut self, truth: &[f64], time: f64) {
        self.phase = 0.0;
        self.refreshes = 0;
        if self.kind == NoiseKind::GaussianBias {
            for (b, &s) in self.bias.iter_mut().zip(&self.bias_std) {
                *b = sample(&mut self.rng, s);
            }
        } else {
            self.bias.fill(0.0);
        }
        self.store(truth, time);
    }

    /// Advances the timer by one substep; true when a refresh is due.
    pub fn advance(&mut self, dt: f64) -> bool {
        self.phase += dt * self.rate;
        if self.phase >= 1.0 - PHASE_EPS {
            self.phase -= 1.0;
            true
        } else {
            false
        }
    }

    /// Copies ground truth into the buffer and applies noise.
    pub fn refresh(&mut self, truth: &[f64], time: f64) {
        self.refreshes += 1;
        self.store(truth, time);
    }

    fn store(&mut self, truth: &[f64], time: f64) {
        debug_assert_eq!(truth.len(), self.value.len());
        self.stamp = time;
        for (i, v) in self.value.iter_mut().enumerate() {
            let noise = match self.kind {
                NoiseKind::None => 0.0,
                NoiseKind::Gaussian | NoiseKind::GaussianBias => sample(&mut self.rng, self.std[i]) + self.bias[i],
            };
            *v = truth[i] + noise;
        }
    }

    /// Held value and the sim time of its refresh.
    pub fn read(&self) -> (&[f64], f64) {
        (&self.value, self.stamp)
    }

    /// Timer-driven refreshes since the last reset.
    pub fn refresh_count(&self) -> u64 {
        self.refreshes
    }
}

fn sample(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).map(|n| n.sample(rng)).unwrap_or(0.0)
    } else {
        // keep stream consumption independent of the std value
        let _: f64 = rng.gen();
        0.0
    }
}

/// Per-foot contact flag and normal force (N).
pub fn foot_contact_read(contacts: &[ContactReading]) -> Vec<(bool, f64)> {
    contacts.iter().map(|c| (c.in_contact, c.normal_force.max(0.0))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::stream;

    fn buffer(rate: f64, physics: f64) -> SensorBuffer {
        let spec = SensorSpec::new("s", SensorKind::JointState, &[], rate);
        SensorBuffer::new(&spec, 2, physics, stream(0, 0, "s")).unwrap()
    }

    fn refresh_steps(rate: f64, physics: f64, steps: usize) -> Vec<usize> {
        let mut b = buffer(rate, physics);
        b.reset(&[0.0, 0.0], 0.0);
        (1..=steps).filter(|_| b.advance(1.0 / physics)).collect()
    }

    #[test]
    fn fifty_hz_on_two_hundred_hz_refreshes_every_fourth_substep() {
        assert_eq!(refresh_steps(50.0, 200.0, 16), vec![4, 8, 12, 16]);
    }

    #[test]
    fn physics_rate_sensor_refreshes_every_substep() {
        assert_eq!(refresh_steps(1000.0, 1000.0, 7).len(), 7);
    }

    #[test]
    fn sixty_hz_counts_exactly_per_second() {
        let mut b = buffer(60.0, 1000.0);
        b.reset(&[0.0, 0.0], 0.0);
        for second in 1..=10 {
            for _ in 0..1000 {
                if b.advance(1e-3) {
                    b.refresh(&[0.0, 0.0], 0.0);
                }
            }
            assert_eq!(b.refresh_count(), 60 * second);
        }
    }

    #[test]
    fn rate_bounds() {
        let spec = SensorSpec::new("s", SensorKind::JointState, &[], 2000.0);
        assert!(matches!(
            SensorBuffer::new(&spec, 2, 1000.0, stream(0, 0, "s")),
            Err(SensorError::Rate { .. })
        ));
        let spec = SensorSpec::new("s", SensorKind::JointState, &[], 0.0);
        assert!(SensorBuffer::new(&spec, 2, 1000.0, stream(0, 0, "s")).is_err());
    }

    #[test]
    fn reads_hold_between_refreshes() {
        let mut b = buffer(50.0, 1000.0);
        b.reset(&[1.0, 2.0], 0.0);
        b.advance(1e-3);
        let (v1, t1) = b.read();
        let (v1, t1) = (v1.to_vec(), t1);
        let (v2, t2) = b.read();
        assert_eq!((v1.as_slice(), t1), (v2, t2));
        assert_eq!(v1, vec![1.0, 2.0]);
    }

    #[test]
    fn gaussian_sample_std() {
        let spec = SensorSpec::new("s", SensorKind::JointState, &[], 100.0).with_noise(NoiseSpec {
            kind: NoiseKind::Gaussian,
            std: vec![0.01],
            bias_std: vec![],
        });
        let mut b = SensorBuffer::new(&spec, 1, 1000.0, stream(7, 0, "s")).unwrap();
        b.reset(&[0.0], 0.0);
        let xs: Vec<f64> = (0..10_000)
            .map(|_| {
                b.refresh(&[0.0], 0.0);
                b.read().0[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((var.sqrt() - 0.01).abs() < 0.001);
    }

    #[test]
    fn bias_constant_within_episode() {
        let spec = SensorSpec::new("s", SensorKind::JointState, &[], 100.0).with_noise(NoiseSpec {
            kind: NoiseKind::GaussianBias,
            std: vec![0.0],
            bias_std: vec![0.5],
        });
        let mut b = SensorBuffer::new(&spec, 1, 1000.0, stream(7, 0, "s")).unwrap();
        b.reset(&[0.0], 0.0);
        let first = b.read().0[0];
        assert!(first != 0.0);
        for _ in 0..10 {
            b.refresh(&[0.0], 0.0);
            assert_eq!(b.read().0[0], first);
        }
    }

    #[test]
    fn noise_width_checked() {
        let spec = SensorSpec::new("s", SensorKind::JointState, &[], 100.0).with_noise(NoiseSpec {
            kind: NoiseKind::Gaussian,
            std: vec![0.1, 0.2, 0.3],
            bias_std: vec![],
        });
        assert!(matches!(
            SensorBuffer::new(&spec, 2, 1000.0, stream(0, 0, "s")),
            Err(SensorError::NoiseWidth { .. })
        ));
    }

    #[test]
    fn no_contact_above_plane() {
        let r = foot_contact_read(&[ContactReading::default(); 4]);
        assert!(r.iter().all(|&(c, f)| !c && f == 0.0));
    }
}
