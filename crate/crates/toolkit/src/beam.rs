//! Cantilever beam validation as CSV.

use std::io::Write;

use orbitlite_core::softbody::{simulate_beam, BeamReport, BeamScenario, SoftError, BEAM_DT, BEAM_DURATION, BEAM_ITERATIONS};
use serde::Serialize;

/// Trajectory samples written per simulated second.
const SAMPLE_RATE: f64 = 100.0;

#[derive(Debug, Serialize)]
struct Row {
    kind: &'static str,
    m: usize,
    t: Option<f64>,
    tip_z: Option<f64>,
    static_sag: Option<f64>,
    decay_ratio: Option<f64>,
    peaks: Option<usize>,
}

pub fn validate_beam(resolutions: &[usize]) -> Result<Vec<BeamReport>, SoftError> {
    let every = ((1.0 / SAMPLE_RATE) / BEAM_DT).round().max(1.0) as usize;
    let base = BeamScenario::default();
    resolutions
        .iter()
        .map(|&m| simulate_beam(&base.with_resolution(m), BEAM_DURATION, BEAM_DT, BEAM_ITERATIONS, every))
        .collect()
}

/// `sample` rows carry the tip trajectory, one `summary` row closes each
/// resolution.
pub fn write_csv<W: Write>(reports: &[BeamReport], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        for (t, z) in r.times.iter().zip(&r.tip_z) {
            w.serialize(Row { kind: "sample", m: r.resolution, t: Some(*t), tip_z: Some(*z), static_sag: None, decay_ratio: None, peaks: None })?;
        }
        w.serialize(Row {
            kind: "summary",
            m: r.resolution,
            t: None,
            tip_z: None,
            static_sag: Some(r.static_sag),
            decay_ratio: Some(r.decay_ratio),
            peaks: Some(r.peaks.len()),
        })?;
    }
    w.flush()?;
    Ok(())
}
