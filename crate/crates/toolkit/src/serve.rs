//! Live streaming server.
//!
//! The simulation runs on its own thread and never waits for the network.
//! Frames go out through a small bounded queue and are dropped when it is
//! full. Commands come in through an unbounded queue and are applied
//! between control ticks.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender, TrySendError};
use nalgebra::DMatrix;
use orbitlite_core::motiongen::{dls_ik_step, pose_error, IkParams};
use orbitlite_core::spatial::{Transform, TransformDoc};
use orbitlite_core::tasks::{arm_info, make_task, ActionMapper, ControlMode, TaskConfig, TaskError, TaskId, ROBOT};
use orbitlite_core::world::{Env, EnvView, MarkerKind, MarkerSpec};
use tungstenite::{Message, WebSocket};

use crate::protocol::{ClientMsg, Frame, ServerMsg, Teleop};
use crate::record::teleop_action;

pub const TARGET_MARKER: &str = "target";
pub const GHOST_PREFIX: &str = "ghost/";
/// Frames buffered between the two threads.
const FRAME_QUEUE: usize = 4;
/// Kinematic preview iterations and how many of them become ghosts.
const PREVIEW_ITERS: usize = 200;
const GHOSTS: usize = 10;
/// Grasp-frame travel per control tick while executing a preview, m.
const EXEC_SPEED: f64 = 0.01;
const EXEC_TOLERANCE: f64 = 0.002;
const EXEC_TICKS: usize = 400;
/// Episode length for interactive sessions, long enough to never end.
const SESSION_STEPS: usize = 1_000_000_000;

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub task: TaskId,
    pub robot: String,
    pub port: u16,
    /// Frame cap, Hz of sim time.
    pub rate: f64,
    /// Pace ticks to wall clock.
    pub realtime: bool,
    pub seed: u64,
}

impl ServeOptions {
    pub fn new(task: TaskId, port: u16, rate: f64) -> Self {
        Self { task, robot: "panda".into(), port, rate, realtime: true, seed: 0 }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("stream rate must be positive, got {0}")]
    Rate(f64),
}

#[derive(Debug, Default)]
pub struct ServeStats {
    pub ticks: AtomicU64,
    pub frames_queued: AtomicU64,
    pub frames_dropped: AtomicU64,
    pub frames_sent: AtomicU64,
    pub commands: AtomicU64,
}

pub struct ServeHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    stats: Arc<ServeStats>,
    threads: Vec<JoinHandle<()>>,
}

impl ServeHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> &ServeStats {
        &self.stats
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until both threads exit.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

pub fn serve(opts: &ServeOptions) -> Result<ServeHandle, ServeError> {
    if !(opts.rate > 0.0) {
        return Err(ServeError::Rate(opts.rate));
    }
    let mut cfg = TaskConfig::new(opts.task).with_robot(&opts.robot).with_mode(ControlMode::TaskSpaceIk);
    cfg.episode_length = Some(SESSION_STEPS);
    let mut sim = Sim::new(&cfg, opts)?;
    let listener = TcpListener::bind(("127.0.0.1", opts.port))?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let hello = ServerMsg::Hello {
        task: opts.task.to_string(),
        obs_layout: sim.env.observation_layout(),
        control_rate: sim.env.control_rate(),
    };
    let stop = Arc::new(AtomicBool::new(false));
    let stats = Arc::new(ServeStats::default());
    let (frame_tx, frame_rx) = crossbeam_channel::bounded::<String>(FRAME_QUEUE);
    let (cmd_tx, cmd_rx) = crossbeam_channel::unbounded::<ClientMsg>();
    let sim_thread = {
        let stop = stop.clone();
        let stats = stats.clone();
        std::thread::Builder::new()
            .name("orbitlite-sim".into())
            .spawn(move || sim.run(&stop, &stats, &frame_tx, &cmd_rx))?
    };
    let net_thread = {
        let stop = stop.clone();
        let stats = stats.clone();
        std::thread::Builder::new()
            .name("orbitlite-net".into())
            .spawn(move || network(listener, hello, &stop, &stats, &frame_rx, &cmd_tx))?
    };
    log::info!("serving {} on ws://{addr}", opts.task);
    Ok(ServeHandle { addr, stop, stats, threads: vec![sim_thread, net_thread] })
}

enum Mode {
    Idle,
    Teleop(Teleop),
    Execute { target: Transform, ticks: usize },
}

struct Sim {
    env: Env,
    cfg: TaskConfig,
    mapper: ActionMapper,
    tcp: usize,
    arm_joints: usize,
    rate: f64,
    realtime: bool,
    mode: Mode,
    preview: Option<Transform>,
    gripper: bool,
}

impl Sim {
    fn new(cfg: &TaskConfig, opts: &ServeOptions) -> Result<Sim, ServeError> {
        let mut env = make_task(cfg, 1)?;
        env.seed(opts.seed);
        let arm = arm_info(&cfg.robot).ok_or_else(|| TaskError::UnknownRobot(cfg.robot.clone()))?;
        let art = env.articulation_index(ROBOT).expect("task scenes have a robot");
        let tcp = env.model(art).link_index(arm.tcp).expect("tcp link");
        Ok(Sim {
            mapper: ActionMapper::new(cfg)?,
            env,
            cfg: cfg.clone(),
            tcp,
            arm_joints: arm.arm_joints,
            rate: opts.rate,
            realtime: opts.realtime,
            mode: Mode::Idle,
            preview: None,
            gripper: false,
        })
    }

    fn run(&mut self, stop: &AtomicBool, stats: &ServeStats, frames: &Sender<String>, cmds: &Receiver<ClientMsg>) {
        let control_dt = 1.0 / self.env.control_rate();
        let frame_dt = 1.0 / self.rate;
        let start = Instant::now();
        let mut next_frame = 0.0;
        let mut tick: u64 = 0;
        while !stop.load(Ordering::Relaxed) {
            while let Ok(cmd) = cmds.try_recv() {
                stats.commands.fetch_add(1, Ordering::Relaxed);
                self.apply(cmd);
            }
            let action = self.action();
            if let Err(e) = self.env.step(&action) {
                log::warn!("step failed: {e}");
            }
            tick += 1;
            stats.ticks.fetch_add(1, Ordering::Relaxed);
            let t = self.env.view(0).time();
            if t + 1e-9 >= next_frame {
                next_frame = t + frame_dt;
                let msg = ServerMsg::Frame(Frame::from(&self.env.snapshot(0)));
                let text = serde_json::to_string(&msg).expect("frames serialize");
                match frames.try_send(text) {
                    Ok(()) => stats.frames_queued.fetch_add(1, Ordering::Relaxed),
                    Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => {
                        stats.frames_dropped.fetch_add(1, Ordering::Relaxed)
                    }
                };
            }
            if self.realtime {
                let due = start + Duration::from_secs_f64(tick as f64 * control_dt);
                let now = Instant::now();
                if due > now {
                    std::thread::sleep(due - now);
                }
            }
        }
    }

    fn apply(&mut self, cmd: ClientMsg) {
        match cmd {
            ClientMsg::Teleop(t) => {
                self.gripper = t.gripper;
                self.mode = Mode::Teleop(t);
            }
            ClientMsg::SelectTarget { pos } => {
                let frame = self.grasp_frame();
                let target = Transform::new(pos.into(), frame.orientation);
                self.show_preview(&target);
                self.preview = Some(target);
                self.mode = Mode::Idle;
            }
            ClientMsg::Confirm {} => {
                if let Some(target) = self.preview.take() {
                    self.mode = Mode::Execute { target, ticks: 0 };
                }
            }
            ClientMsg::Reset {} => {
                let _ = self.env.reset(&[0]);
                self.clear_preview();
                self.preview = None;
                self.mode = Mode::Idle;
            }
        }
    }

    fn action(&mut self) -> Vec<f64> {
        let dim = self.env.act_dim();
        if let Mode::Execute { target, ticks } = &mut self.mode {
            *ticks += 1;
            let (target, ticks) = (*target, *ticks);
            let reached = (self.grasp_frame().position - target.position).norm() < EXEC_TOLERANCE;
            if !reached && ticks <= EXEC_TICKS {
                return self.mapper.action(&self.env.view(0), &target, EXEC_SPEED, self.gripper);
            }
            self.mode = Mode::Idle;
            self.clear_preview();
        }
        let cmd = match &self.mode {
            Mode::Teleop(t) => *t,
            _ => Teleop { twist: [0.0; 6], gripper: self.gripper },
        };
        teleop_action(&self.cfg, &cmd, dim).unwrap_or_else(|_| vec![0.0; dim])
    }

    fn grasp_frame(&self) -> Transform {
        self.env.view(0).gripper_pose(0).expect("task robots carry a gripper")
    }

    fn show_preview(&mut self, target: &Transform) {
        self.clear_preview();
        self.env.set_marker(0, MarkerSpec {
            name: TARGET_MARKER.into(),
            kind: MarkerKind::Sphere,
            pose: TransformDoc { pos: target.position_array(), quat: target.quat_wxyz() },
            scale: [0.02; 3],
            color: [1.0, 0.2, 0.2, 1.0],
        });
        let view = self.env.view(0);
        let path = preview_path(&view, self.tcp, self.arm_joints, target, self.cfg.max_translation);
        let stride = (path.len() / GHOSTS).max(1);
        let ghosts: Vec<Transform> = path.iter().skip(stride - 1).step_by(stride).chain(path.last()).copied().collect();
        for (k, g) in ghosts.iter().enumerate() {
            self.env.set_marker(0, MarkerSpec {
                name: format!("{GHOST_PREFIX}{k}"),
                kind: MarkerKind::Frame,
                pose: TransformDoc { pos: g.position_array(), quat: g.quat_wxyz() },
                scale: [0.03; 3],
                color: [0.3, 0.6, 1.0, 0.5],
            });
        }
    }

    fn clear_preview(&mut self) {
        let names: Vec<String> = self
            .env
            .markers(0)
            .iter()
            .filter(|m| m.name == TARGET_MARKER || m.name.starts_with(GHOST_PREFIX))
            .map(|m| m.name.clone())
            .collect();
        for n in names {
            self.env.remove_marker(0, &n);
        }
    }
}

/// Grasp-frame poses of a kinematic-only IK rollout from the current
/// configuration toward `target`, one per iteration.
pub fn preview_path(view: &EnvView, tcp: usize, arm_joints: usize, target: &Transform, max_step: f64) -> Vec<Transform> {
    let model = view.model(0);
    let base = *view.base(0);
    let mut q = view.q(0).to_vec();
    let grasp = view.gripper_pose(0).expect("task robots carry a gripper");
    let offset = view.link_pose(0, tcp).inverse().compose(&grasp);
    let params = IkParams::default();
    let mut path = Vec::with_capacity(PREVIEW_ITERS);
    for _ in 0..PREVIEW_ITERS {
        let poses = model.link_poses(&base, &q);
        let frame = poses[tcp].compose(&offset);
        let mut err = pose_error(&frame, target);
        let lin = err.fixed_rows::<3>(0).norm();
        if lin > max_step {
            err.fixed_rows_mut::<3>(0).scale_mut(max_step / lin);
        }
        let full = model.point_jacobian(&poses, tcp, &frame.position);
        let j = DMatrix::from_fn(6, arm_joints, |r, c| full[(r, c)]);
        let Ok(dq) = dls_ik_step(&j, err.as_slice(), &params) else { break };
        for d in 0..arm_joints {
            q[d] += dq[d];
        }
        model.clamp_to_limits(&mut q);
        path.push(model.link_poses(&base, &q)[tcp].compose(&offset));
        if lin < 1e-4 {
            break;
        }
    }
    path
}

fn network(
    listener: TcpListener,
    hello: ServerMsg,
    stop: &AtomicBool,
    stats: &ServeStats,
    frames: &Receiver<String>,
    cmds: &Sender<ClientMsg>,
) {
    let hello = serde_json::to_string(&hello).expect("hello serializes");
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("client {peer} connected");
                match handshake(stream) {
                    Ok(ws) => session(ws, &hello, stop, stats, frames, cmds),
                    Err(e) => log::warn!("handshake with {peer} failed: {e}"),
                }
                log::info!("client {peer} left");
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                // nobody is watching; keep the queue from going stale
                while frames.try_recv().is_ok() {}
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn handshake(stream: TcpStream) -> Result<WebSocket<TcpStream>, Box<dyn std::error::Error>> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let ws = tungstenite::accept(stream).map_err(|e| e.to_string())?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(2)))?;
    Ok(ws)
}

fn session(
    mut ws: WebSocket<TcpStream>,
    hello: &str,
    stop: &AtomicBool,
    stats: &ServeStats,
    frames: &Receiver<String>,
    cmds: &Sender<ClientMsg>,
) {
    if ws.send(Message::text(hello)).is_err() {
        return;
    }
    while !stop.load(Ordering::Relaxed) {
        match ws.read() {
            Ok(Message::Text(text)) => match ClientMsg::parse(&text) {
                Ok(cmd) => {
                    let _ = cmds.send(cmd);
                }
                Err(msg) => {
                    let err = serde_json::to_string(&ServerMsg::Error { msg }).expect("errors serialize");
                    if ws.send(Message::text(err)).is_err() {
                        return;
                    }
                }
            },
            Ok(Message::Close(_)) => return,
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(_) => return,
        }
        while let Ok(frame) = frames.try_recv() {
            if ws.send(Message::text(frame)).is_err() {
                return;
            }
            stats.frames_sent.fetch_add(1, Ordering::Relaxed);
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
}
