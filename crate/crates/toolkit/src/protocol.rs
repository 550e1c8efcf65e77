//! Wire protocol between `serve` and a viewer. Every message is one JSON
//! text frame tagged by `type`.

use std::collections::BTreeMap;

use orbitlite_core::world::{MarkerKind, MarkerSpec, Snapshot};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BodyState {
    pub name: String,
    pub pos: [f64; 3],
    /// w, x, y, z
    pub quat: [f64; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MarkerState {
    pub name: String,
    pub kind: MarkerKind,
    pub pos: [f64; 3],
    pub quat: [f64; 4],
    pub scale: [f64; 3],
    pub color: [f64; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Frame {
    pub t: f64,
    pub bodies: Vec<BodyState>,
    pub joints: BTreeMap<String, f64>,
    pub markers: Vec<MarkerState>,
    pub particles: BTreeMap<String, Vec<[f64; 3]>>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ServerMsg {
    Hello { task: String, obs_layout: Vec<(String, usize)>, control_rate: f64 },
    Frame(Frame),
    Error { msg: String },
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Teleop {
    /// Linear m/s then angular rad/s, world frame.
    pub twist: [f64; 6],
    /// Closed when true.
    pub gripper: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMsg {
    Teleop(Teleop),
    SelectTarget { pos: [f64; 3] },
    Confirm {},
    Reset {},
}

impl ClientMsg {
    pub fn parse(text: &str) -> Result<ClientMsg, String> {
        let msg: ClientMsg = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let finite = match &msg {
            ClientMsg::Teleop(t) => t.twist.iter().all(|x| x.is_finite()),
            ClientMsg::SelectTarget { pos } => pos.iter().all(|x| x.is_finite()),
            _ => true,
        };
        if !finite {
            return Err("non-finite number".into());
        }
        Ok(msg)
    }
}

fn marker_state(m: &MarkerSpec) -> MarkerState {
    MarkerState {
        name: m.name.clone(),
        kind: m.kind,
        pos: m.pose.pos,
        quat: m.pose.quat,
        scale: m.scale,
        color: m.color,
    }
}

impl From<&Snapshot> for Frame {
    fn from(s: &Snapshot) -> Frame {
        Frame {
            t: s.time,
            bodies: s
                .bodies
                .iter()
                .map(|(name, tf)| BodyState { name: name.clone(), pos: tf.position_array(), quat: tf.quat_wxyz() })
                .collect(),
            joints: s.joints.iter().cloned().collect(),
            markers: s.markers.iter().map(marker_state).collect(),
            particles: s.particles.iter().cloned().collect(),
        }
    }
}
