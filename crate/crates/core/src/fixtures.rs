//! Canonical robot description documents shipped with the crate.

use crate::model::{parse_robot_description, ModelError, RobotDescription};

pub const NAMES: [&str; 6] = [
    "pendulum",
    "planar2",
    "panda",
    "ur6",
    "quadruped",
    "drawer_cabinet",
];

/// Raw document text of a fixture.
pub fn document(name: &str) -> Option<&'static str> {
    Some(match name {
        "pendulum" => include_str!("../fixtures/pendulum.json"),
        "planar2" => include_str!("../fixtures/planar2.json"),
        "panda" => include_str!("../fixtures/panda.json"),
        "ur6" => include_str!("../fixtures/ur6.json"),
        "quadruped" => include_str!("../fixtures/quadruped.json"),
        "drawer_cabinet" => include_str!("../fixtures/drawer_cabinet.json"),
        _ => return None,
    })
}

pub fn load(name: &str) -> Result<RobotDescription, ModelError> {
    let text = document(name).ok_or_else(|| ModelError::UnknownFixture(name.to_string()))?;
    parse_robot_description(text)
}
