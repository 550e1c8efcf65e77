use std::io::Cursor;

use orbitlite_core::tasks::{make_scene, TaskConfig, TaskId};
use orbitlite_toolkit::episode_log::{config_hash, read_log, EpisodeLog};
use orbitlite_toolkit::record::*;

fn record_log(cfg: &TaskConfig, policy: PolicyKind, episodes: usize, seed: u64, teleop: Option<&str>) -> (RecordSummary, EpisodeLog) {
    let mut buf = Vec::new();
    let input = teleop.map(|t| Box::new(Cursor::new(t.to_string())) as Box<dyn std::io::BufRead>);
    let s = record(cfg, policy, episodes, seed, &mut buf, input).unwrap();
    (s, read_log(buf.as_slice()).unwrap())
}

#[test]
fn expert_lift_log_holds_three_finished_episodes() {
    let cfg = TaskConfig::new(TaskId::Lift);
    let (s, log) = record_log(&cfg, PolicyKind::Expert, 3, 4, None);
    assert_eq!(s.episodes, 3);
    assert_eq!(log.steps.iter().filter(|r| r.done).count(), 3);
    assert_eq!(log.header.config_hash, config_hash(&make_scene(&cfg).unwrap()));
    let width = log.header.obs_width();
    assert!(log.steps.iter().all(|r| r.obs.len() == width));
    assert!(log.steps.iter().enumerate().all(|(i, r)| r.step == i));
    assert_eq!(log.steps.last().unwrap().episode, 2);
}

#[test]
fn replay_is_exact_and_a_new_seed_is_not() {
    let cfg = TaskConfig::new(TaskId::Lift);
    let (_, log) = record_log(&cfg, PolicyKind::Random, 1, 9, None);
    let same = replay(&log, true, None).unwrap();
    assert_eq!(same.max_obs_deviation, Some(0.0));
    assert!(same.is_exact() && same.config_hash_matches);
    let other = replay(&log, true, Some(10)).unwrap();
    assert!(other.max_obs_deviation.unwrap() > 0.0);
    assert!(!other.is_exact());
    let preview = replay(&log, false, None).unwrap();
    assert_eq!(preview.max_obs_deviation, None);
    assert_eq!(preview.steps, log.steps.len());
}

#[test]
fn altered_config_warns_but_replays() {
    let cfg = TaskConfig::new(TaskId::Reach);
    let (_, mut log) = record_log(&cfg, PolicyKind::Random, 1, 1, None);
    log.header.config_hash = "ff".into();
    let r = replay(&log, true, None).unwrap();
    assert!(!r.config_hash_matches);
    assert_eq!(r.max_obs_deviation, Some(0.0));
}

#[test]
fn teleop_input_running_out_truncates() {
    let cfg = TaskConfig::new(TaskId::Reach);
    let line = r#"{"type":"teleop","twist":[0.1,0,0,0,0,0],"gripper":false}"#;
    let input = format!("{line}\n\n{line}\n{line}\n");
    let (s, log) = record_log(&cfg, PolicyKind::Teleop, 2, 0, Some(&input));
    assert!(s.truncated);
    assert_eq!(log.steps.len(), 3);
    assert_eq!(log.truncated, Some(0));
    // 0.1 m/s over one 50 Hz tick
    assert!((log.steps[0].action[0] - 0.002).abs() < 1e-15);
}

#[test]
fn bad_teleop_line_is_an_error() {
    let cfg = TaskConfig::new(TaskId::Reach);
    let r = record(&cfg, PolicyKind::Teleop, 1, 0, Vec::new(), Some(Box::new(Cursor::new("{\"type\":\"confirm\"}\n"))));
    assert!(matches!(r, Err(RecordError::Teleop { line: 1, .. })));
    assert!(matches!("planner".parse::<PolicyKind>(), Err(RecordError::UnknownPolicy(_))));
}
