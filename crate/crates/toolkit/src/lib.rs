//! Benchmarking, demonstration recording and replay, beam validation, and
//! the live streaming server.

pub mod beam;
pub mod bench;
pub mod episode_log;
pub mod protocol;
pub mod record;
pub mod serve;
