//! XPBD particle systems: cloth sheets and the clamped-beam scenario.
//!
//! Constraints are distance constraints solved Gauss–Seidel in construction
//! order. Multipliers restart from zero every substep.

use serde::{Deserialize, Serialize};

use crate::spatial::Vec3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SoftError {
    #[error("cloth needs at least 2×2 particles, got {0}×{1}")]
    ClothDims(usize, usize),
    #[error("time step must be positive, got {0}")]
    TimeStep(f64),
    #[error("iterations must be at least 1")]
    Iterations,
    #[error("non-finite particle state")]
    NonFinite,
    #[error("invalid beam: {0}")]
    Beam(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Structural,
    Shear,
    Bending,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceConstraint {
    pub i: usize,
    pub j: usize,
    pub rest: f64,
    /// Compliance α, m/N.
    pub compliance: f64,
    pub kind: ConstraintKind,
}

/// Frictional support plane `z = height` for particles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParticlePlane {
    pub height: f64,
    pub friction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    pub x: Vec<Vec3>,
    pub prev: Vec<Vec3>,
    pub v: Vec<Vec3>,
    /// Inverse masses; zero pins a particle.
    pub w: Vec<f64>,
    pub constraints: Vec<DistanceConstraint>,
    pub lambda: Vec<f64>,
    /// Velocity damping coefficient, 1/s.
    pub damping: f64,
    pub gravity: Vec3,
    pub plane: Option<ParticlePlane>,
    /// Kinematic targets for attached particles, applied each substep.
    pub kinematic: Vec<Option<Vec3>>,
    pub faulted: bool,
}

impl ParticleSystem {
    pub fn new(x: Vec<Vec3>, w: Vec<f64>) -> Self {
        let n = x.len();
        Self {
            prev: x.clone(),
            v: vec![Vec3::zeros(); n],
            x,
            w,
            constraints: Vec::new(),
            lambda: Vec::new(),
            damping: 0.0,
            gravity: Vec3::new(0.0, 0.0, -9.81),
            plane: None,
            kinematic: vec![None; n],
            faulted: false,
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Adds a constraint at the current separation of `i` and `j`.
    pub fn connect(&mut self, i: usize, j: usize, compliance: f64, kind: ConstraintKind) {
        let rest = (self.x[i] - self.x[j]).norm();
        self.constraints.push(DistanceConstraint {
            i,
            j,
            rest,
            compliance,
            kind,
        });
        self.lambda.push(0.0);
    }

    pub fn count(&self, kind: ConstraintKind) -> usize {
        self.constraints.iter().filter(|c| c.kind == kind).count()
    }

    pub fn center_of_mass(&self) -> Vec3 {
        let mut s = Vec3::zeros();
        let mut total = 0.0;
        for (x, &w) in self.x.iter().zip(&self.w) {
            if w > 0.0 {
                s += x / w;
                total += 1.0 / w;
            }
        }
        s / total
    }

    pub fn max_residual(&self) -> f64 {
        self.constraints
            .iter()
            .map(|c| ((self.x[c.i] - self.x[c.j]).norm() - c.rest).abs())
            .fold(0.0, f64::max)
    }

    /// Moves the particles forward under gravity and kinematic targets and
    /// clears the multipliers.
    pub fn predict(&mut self, dt: f64) {
        for i in 0..self.x.len() {
            self.prev[i] = self.x[i];
            if let Some(t) = self.kinematic[i] {
                self.x[i] = t;
            } else if self.w[i] > 0.0 {
                self.x[i] += self.v[i] * dt + self.gravity * (dt * dt);
            }
        }
        self.lambda.iter_mut().for_each(|l| *l = 0.0);
    }

    /// One Gauss–Seidel sweep over all constraints.
    pub fn iterate(&mut self, dt: f64) {
        let dt2 = dt * dt;
        for (k, c) in self.constraints.iter().enumerate() {
            let wi = if self.kinematic[c.i].is_some() { 0.0 } else { self.w[c.i] };
            let wj = if self.kinematic[c.j].is_some() { 0.0 } else { self.w[c.j] };
            let d = self.x[c.i] - self.x[c.j];
            let len = d.norm();
            if len < 1e-12 {
                continue;
            }
            let n = d / len;
            let alpha = c.compliance / dt2;
            let denom = wi + wj + alpha;
            if denom <= 0.0 {
                continue;
            }
            let dl = (-(len - c.rest) - alpha * self.lambda[k]) / denom;
            self.lambda[k] += dl;
            self.x[c.i] += n * (wi * dl);
            self.x[c.j] -= n * (wj * dl);
        }
    }

    fn collide(&mut self) {
        let Some(plane) = self.plane else { return };
        for i in 0..self.x.len() {
            let depth = plane.height - self.x[i].z;
            if depth > 0.0 && self.w[i] > 0.0 && self.kinematic[i].is_none() {
                self.x[i].z = plane.height;
                let mut slip = self.x[i] - self.prev[i];
                slip.z = 0.0;
                let s = slip.norm();
                if s > 0.0 {
                    let back = (plane.friction * depth / s).min(1.0);
                    self.x[i].x -= slip.x * back;
                    self.x[i].y -= slip.y * back;
                }
            }
        }
    }

    /// Derives velocities from the position change, applies damping and
    /// checks finiteness.
    pub fn finish(&mut self, dt: f64) -> Result<(), SoftError> {
        self.collide();
        let scale = (1.0 - self.damping * dt).max(0.0);
        for i in 0..self.x.len() {
            self.v[i] = (self.x[i] - self.prev[i]) / dt * scale;
        }
        if self.x.iter().chain(&self.v).any(|p| !p.iter().all(|c| c.is_finite())) {
            self.faulted = true;
            self.x.clone_from(&self.prev);
            self.v.iter_mut().for_each(|v| *v = Vec3::zeros());
            return Err(SoftError::NonFinite);
        }
        Ok(())
    }
}

/// Full XPBD substep.
pub fn xpbd_step(system: &mut ParticleSystem, dt: f64, iterations: usize) -> Result<(), SoftError> {
    if !(dt > 0.0) {
        return Err(SoftError::TimeStep(dt));
    }
    if iterations == 0 {
        return Err(SoftError::Iterations);
    }
    system.predict(dt);
    for _ in 0..iterations {
        system.iterate(dt);
    }
    system.finish(dt)
}

/// Rectangular cloth in the plane `z = 0` with structural, shear, and
/// two-hop bending constraints. Particle `(i, j)` has index `j·nx + i`.
pub fn build_cloth(nx: usize, ny: usize, spacing: f64, mass: f64, compliance: f64) -> Result<ParticleSystem, SoftError> {
    if nx < 2 || ny < 2 {
        return Err(SoftError::ClothDims(nx, ny));
    }
    let x = (0..ny)
        .flat_map(|j| (0..nx).map(move |i| Vec3::new(i as f64 * spacing, j as f64 * spacing, 0.0)))
        .collect();
    let w = vec![(nx * ny) as f64 / mass; nx * ny];
    let mut s = ParticleSystem::new(x, w);
    let id = |i: usize, j: usize| j * nx + i;
    for j in 0..ny {
        for i in 0..nx {
            if i + 1 < nx {
                s.connect(id(i, j), id(i + 1, j), compliance, ConstraintKind::Structural);
            }
            if j + 1 < ny {
                s.connect(id(i, j), id(i, j + 1), compliance, ConstraintKind::Structural);
            }
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            s.connect(id(i, j), id(i + 1, j + 1), compliance, ConstraintKind::Shear);
            s.connect(id(i + 1, j), id(i, j + 1), compliance, ConstraintKind::Shear);
        }
    }
    for j in 0..ny {
        for i in 0..nx {
            if i + 2 < nx {
                s.connect(id(i, j), id(i + 2, j), compliance, ConstraintKind::Bending);
            }
            if j + 2 < ny {
                s.connect(id(i, j), id(i, j + 2), compliance, ConstraintKind::Bending);
            }
        }
    }
    Ok(s)
}

/// Cantilever of square cross-section clamped at `x = 0`, discretized as an
/// `(m+1) × 2 × 2` particle lattice.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BeamScenario {
    pub length: f64,
    pub width: f64,
    pub resolution: usize,
    pub youngs_modulus: f64,
    pub density: f64,
    pub damping: f64,
    /// Height of the clamp above the ground, m.
    pub height: f64,
}

impl Default for BeamScenario {
    fn default() -> Self {
        Self {
            length: 0.3,
            width: 0.03,
            resolution: 8,
            youngs_modulus: 1.0e6,
            density: 1100.0,
            damping: 2.0,
            height: 0.5,
        }
    }
}

impl BeamScenario {
    pub fn with_resolution(&self, m: usize) -> Self {
        Self {
            resolution: m,
            ..self.clone()
        }
    }

    pub fn particle(&self, k: usize, a: usize, b: usize) -> usize {
        4 * k + 2 * a + b
    }

    /// Particles of the free end.
    pub fn tip(&self) -> [usize; 4] {
        let k = self.resolution;
        [self.particle(k, 0, 0), self.particle(k, 0, 1), self.particle(k, 1, 0), self.particle(k, 1, 1)]
    }

    pub fn build(&self) -> Result<ParticleSystem, SoftError> {
        let m = self.resolution;
        if m == 0 || !(self.length > 0.0 && self.width > 0.0 && self.youngs_modulus > 0.0 && self.density > 0.0) {
            return Err(SoftError::Beam(format!("{self:?}")));
        }
        let h = self.width;
        let dx = self.length / m as f64;
        let mut x = Vec::with_capacity(4 * (m + 1));
        for k in 0..=m {
            for a in 0..2 {
                for b in 0..2 {
                    x.push(Vec3::new(
                        k as f64 * dx,
                        (a as f64 - 0.5) * h,
                        self.height + (b as f64 - 0.5) * h,
                    ));
                }
            }
        }
        let particle_mass = self.density * self.length * h * h / x.len() as f64;
        let mut w = vec![1.0 / particle_mass; x.len()];
        for wi in w.iter_mut().take(4) {
            *wi = 0.0;
        }
        let mut s = ParticleSystem::new(x, w);
        s.damping = self.damping;
        // α = d / (E·A) with A = V/d, V the lattice volume the edge stands for
        let e = self.youngs_modulus;
        let link = |s: &mut ParticleSystem, i: usize, j: usize, volume: f64, kind| {
            let d2 = (s.x[i] - s.x[j]).norm_squared();
            s.connect(i, j, d2 / (e * volume), kind);
        };
        let p = |k, a, b| self.particle(k, a, b);
        let cell = dx * h * h;
        for k in 0..=m {
            let share = h * h * h / 6.0;
            link(&mut s, p(k, 0, 0), p(k, 0, 1), share, ConstraintKind::Structural);
            link(&mut s, p(k, 1, 0), p(k, 1, 1), share, ConstraintKind::Structural);
            link(&mut s, p(k, 0, 0), p(k, 1, 0), share, ConstraintKind::Structural);
            link(&mut s, p(k, 0, 1), p(k, 1, 1), share, ConstraintKind::Structural);
            link(&mut s, p(k, 0, 0), p(k, 1, 1), share, ConstraintKind::Shear);
            link(&mut s, p(k, 0, 1), p(k, 1, 0), share, ConstraintKind::Shear);
        }
        let corners = [(0, 0), (0, 1), (1, 1), (1, 0)];
        for k in 0..m {
            for &(a, b) in &corners {
                link(&mut s, p(k, a, b), p(k + 1, a, b), cell / 4.0, ConstraintKind::Structural);
            }
        }
        // diagonals span every slice gap up to one beam width, sharing the
        // cell volume, so the shear stiffness stays bounded as m grows
        let reach = ((h / dx).round() as usize).clamp(1, m.min(2));
        let share = cell / (12.0 * reach as f64);
        for span in 1..=reach {
            for k in 0..=m - span {
                let k1 = k + span;
                for c in 0..4 {
                    let (a0, b0) = corners[c];
                    let (a1, b1) = corners[(c + 1) % 4];
                    link(&mut s, p(k, a0, b0), p(k1, a1, b1), share, ConstraintKind::Shear);
                    link(&mut s, p(k, a1, b1), p(k1, a0, b0), share, ConstraintKind::Shear);
                }
                for &(a, b) in &corners[..2] {
                    link(&mut s, p(k, a, b), p(k1, 1 - a, 1 - b), share, ConstraintKind::Shear);
                    link(&mut s, p(k, 1 - a, 1 - b), p(k1, a, b), share, ConstraintKind::Shear);
                }
            }
        }
        Ok(s)
    }

    pub fn tip_z(&self, s: &ParticleSystem) -> f64 {
        self.tip().iter().map(|&i| s.x[i].z).sum::<f64>() / 4.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamReport {
    pub resolution: usize,
    pub dt: f64,
    pub iterations: usize,
    pub times: Vec<f64>,
    /// Tip height relative to the undeformed tip, m.
    pub tip_z: Vec<f64>,
    /// Mean downward tip deflection over the last 10% of the run, m.
    pub static_sag: f64,
    /// Local maxima of the tip height between crossings of the rest level.
    pub peaks: Vec<f64>,
    /// Mean ratio of successive peak amplitudes about the rest level.
    pub decay_ratio: f64,
}

/// Releases the straight beam under gravity and records the tip.
pub fn simulate_beam(
    scenario: &BeamScenario,
    duration: f64,
    dt: f64,
    iterations: usize,
    record_every: usize,
) -> Result<BeamReport, SoftError> {
    let mut s = scenario.build()?;
    let z0 = scenario.tip_z(&s);
    let steps = (duration / dt).round() as usize;
    let mut times = Vec::with_capacity(steps / record_every.max(1) + 1);
    let mut tip = Vec::with_capacity(times.capacity());
    let mut full = Vec::with_capacity(steps);
    for k in 1..=steps {
        xpbd_step(&mut s, dt, iterations)?;
        let z = scenario.tip_z(&s) - z0;
        full.push(z);
        if k % record_every.max(1) == 0 {
            times.push(k as f64 * dt);
            tip.push(z);
        }
    }
    let tail = &full[full.len() - (full.len() / 10).max(1)..];
    let rest = tail.iter().sum::<f64>() / tail.len() as f64;
    let peaks = oscillation_peaks(&full, rest);
    let amps: Vec<f64> = peaks.iter().map(|p| p - rest).collect();
    let ratios: Vec<f64> = amps.windows(2).map(|w| w[1] / w[0]).collect();
    let decay_ratio = if ratios.is_empty() {
        0.0
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    Ok(BeamReport {
        resolution: scenario.resolution,
        dt,
        iterations,
        times,
        tip_z: tip,
        static_sag: -rest,
        peaks,
        decay_ratio,
    })
}

/// Maxima of `z` over each excursion above `level`, ignoring excursions
/// smaller than 1% of the first one.
pub fn oscillation_peaks(z: &[f64], level: f64) -> Vec<f64> {
    let mut peaks = Vec::new();
    let mut current: Option<f64> = None;
    let mut seen_below = false;
    for &v in z {
        if v > level {
            if seen_below {
                current = Some(current.map_or(v, |c: f64| c.max(v)));
            }
        } else {
            seen_below = true;
            if let Some(c) = current.take() {
                peaks.push(c);
            }
        }
    }
    if let Some(&first) = peaks.first() {
        let floor = 0.01 * (first - level);
        peaks.retain(|p| p - level > floor);
    }
    peaks
}

/// Beam release for each resolution at the given step and iteration count.
pub fn run_beam_validation(
    base: &BeamScenario,
    resolutions: &[usize],
    duration: f64,
    dt: f64,
    iterations: usize,
) -> Result<Vec<BeamReport>, SoftError> {
    resolutions
        .iter()
        .map(|&m| simulate_beam(&base.with_resolution(m), duration, dt, iterations, 1))
        .collect()
}

pub const BEAM_DURATION: f64 = 6.0;
pub const BEAM_DT: f64 = 1e-3;
pub const BEAM_ITERATIONS: usize = 20;
