//! Batched robot-learning simulation core.

pub mod actuation;
pub mod dynamics;
pub mod fixtures;
pub mod model;
pub mod motiongen;
pub mod sensing;
pub mod softbody;
pub mod spatial;
pub mod streams;
pub mod tasks;
pub mod world;
