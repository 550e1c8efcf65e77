//! Port allocation, graph-cut validation, and node ordering.

use std::collections::{BTreeMap, HashMap};

use super::config::{EnvConfig, GraphConfig, NodeKind, NodeOp, NodeSpec};
use super::WorldError;

/// Physics substeps per tick of something running at `rate`, if integral.
pub fn divisor(physics_rate: f64, rate: f64) -> Option<u64> {
    if !(rate > 0.0 && rate.is_finite()) {
        return None;
    }
    let r = physics_rate / rate;
    let d = r.round();
    (d >= 1.0 && (r - d).abs() < 1e-9).then_some(d as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PortDef {
    pub name: String,
    pub width: usize,
    pub offset: usize,
}

/// Where a node input or an observation reads from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Port(usize),
    Sensor(usize),
}

#[derive(Clone, Debug)]
pub struct NodeDef {
    pub spec: NodeSpec,
    pub divisor: u64,
    pub inputs: Vec<Source>,
    pub outputs: Vec<usize>,
}

/// Facts about the world the graph is checked against.
pub trait WorldCatalog {
    /// (articulation, group, size) of a group.
    fn group(&self, robot: &str, group: &str) -> Option<(usize, usize, usize)>;
    /// (index, width) of a sensor.
    fn sensor(&self, name: &str) -> Option<(usize, usize)>;
}

#[derive(Clone, Debug, Default)]
pub struct GraphLayout {
    pub ports: Vec<PortDef>,
    pub width: usize,
    pub nodes: Vec<NodeDef>,
    /// Topological execution order.
    pub order: Vec<usize>,
    pub action_ports: Vec<usize>,
    /// Groups commanded by each port: (articulation, group).
    pub bindings: Vec<Vec<(usize, usize)>>,
    pub observations: Vec<(String, Source, usize)>,
}

fn port_names(op: &NodeOp) -> (&'static [&'static str], &'static [&'static str]) {
    match op {
        NodeOp::DiffIk { .. } => (&["command"], &["joint_targets"]),
        NodeOp::Osc { .. } => (&["command"], &["torques"]),
        NodeOp::Gripper { .. } => (&["command"], &["targets"]),
        NodeOp::Passthrough { .. } => (&["in"], &["out"]),
        NodeOp::Quintic { .. } => (&["command"], &["targets"]),
        NodeOp::Goal { .. } => (&[], &["value"]),
    }
}

fn port_widths(op: &NodeOp, cat: &dyn WorldCatalog) -> Result<(Vec<usize>, Vec<usize>), WorldError> {
    let group = |robot: &str, group: &str| {
        cat.group(robot, group).map(|g| g.2).ok_or_else(|| WorldError::Unknown {
            kind: "group",
            name: format!("{robot}.{group}"),
        })
    };
    Ok(match op {
        NodeOp::DiffIk { robot, group: g, command, .. } | NodeOp::Osc { robot, group: g, command, .. } => {
            (vec![command.width()], vec![group(robot, g)?])
        }
        NodeOp::Gripper { robot, group: g, .. } => (vec![1], vec![group(robot, g)?]),
        NodeOp::Passthrough { width } | NodeOp::Quintic { width, .. } => (vec![*width], vec![*width]),
        NodeOp::Goal { value } => (vec![], vec![value.len()]),
    })
}

fn is_actuator(name: &str) -> Option<(&str, &str)> {
    name.strip_prefix("actuator:")?.split_once('.')
}

impl GraphLayout {
    pub fn build(graph: &GraphConfig, env: &EnvConfig, physics_rate: f64, cat: &dyn WorldCatalog) -> Result<Self, WorldError> {
        let mut layout = GraphLayout::default();
        let mut by_name: HashMap<String, usize> = HashMap::new();
        fn alloc(layout: &mut GraphLayout, by_name: &mut HashMap<String, usize>, name: String, width: usize) -> usize {
            let id = layout.ports.len();
            layout.ports.push(PortDef {
                name: name.clone(),
                width,
                offset: layout.width,
            });
            layout.width += width;
            by_name.insert(name, id);
            id
        }

        let mut node_index = HashMap::new();
        let mut input_widths = HashMap::new();
        let mut input_kinds = HashMap::new();
        for (i, spec) in graph.nodes.iter().enumerate() {
            if node_index.insert(spec.name.clone(), i).is_some() {
                return Err(WorldError::Invalid(format!("duplicate node `{}`", spec.name)));
            }
            let d = divisor(physics_rate, spec.rate).ok_or_else(|| WorldError::Rate {
                what: spec.name.clone(),
                rate: spec.rate,
                physics: physics_rate,
            })?;
            let (ins, outs) = port_names(&spec.op);
            let (iw, ow) = port_widths(&spec.op, cat)?;
            let outputs = outs
                .iter()
                .zip(&ow)
                .map(|(p, &w)| alloc(&mut layout, &mut by_name, format!("{}.{p}", spec.name), w))
                .collect();
            for (p, &w) in ins.iter().zip(&iw) {
                input_widths.insert(format!("{}.{p}", spec.name), w);
                input_kinds.insert(format!("{}.{p}", spec.name), spec.kind);
            }
            let action_only = matches!(
                spec.op,
                NodeOp::DiffIk { .. } | NodeOp::Osc { .. } | NodeOp::Gripper { .. } | NodeOp::Quintic { .. }
            );
            if action_only && spec.kind != NodeKind::Action {
                return Err(WorldError::Invalid(format!("node `{}` must be an action node", spec.name)));
            }
            layout.nodes.push(NodeDef {
                spec: spec.clone(),
                divisor: d,
                inputs: Vec::new(),
                outputs,
            });
        }

        // the cut: externally fed ports
        let mut actuator_ports: HashMap<(usize, usize), usize> = HashMap::new();
        for name in &env.action_port {
            if by_name.contains_key(name) {
                return Err(WorldError::MultipleProducers(name.clone()));
            }
            if let Some((robot, group)) = is_actuator(name) {
                let (a, g, w) = cat.group(robot, group).ok_or_else(|| WorldError::UnknownPort(name.clone()))?;
                let id = alloc(&mut layout, &mut by_name, name.clone(), w);
                actuator_ports.insert((a, g), id);
                layout.action_ports.push(id);
            } else {
                let w = *input_widths.get(name).ok_or_else(|| WorldError::UnknownPort(name.clone()))?;
                if input_kinds[name] != NodeKind::Action {
                    return Err(WorldError::Invalid(format!("action port `{name}` feeds a perception node")));
                }
                let id = alloc(&mut layout, &mut by_name, name.clone(), w);
                layout.action_ports.push(id);
            }
        }

        let resolve_source = |name: &str, by_name: &HashMap<String, usize>| -> Result<(Source, usize), WorldError> {
            if let Some(s) = name.strip_prefix("sensor:") {
                let (i, w) = cat.sensor(s).ok_or_else(|| WorldError::UnknownPort(name.to_string()))?;
                return Ok((Source::Sensor(i), w));
            }
            let id = *by_name.get(name).ok_or_else(|| WorldError::UnknownPort(name.to_string()))?;
            Ok((Source::Port(id), 0))
        };

        let mut producers: BTreeMap<String, Source> = BTreeMap::new();
        for e in &graph.edges {
            let (src, sw) = resolve_source(&e.from, &by_name)?;
            let sw = match src {
                Source::Port(id) => layout.ports[id].width,
                Source::Sensor(_) => sw,
            };
            let expected = if let Some((robot, group)) = is_actuator(&e.to) {
                let (a, g, w) = cat.group(robot, group).ok_or_else(|| WorldError::UnknownPort(e.to.clone()))?;
                let Source::Port(id) = src else {
                    return Err(WorldError::Invalid(format!("sensor `{}` cannot drive an actuator", e.from)));
                };
                if actuator_ports.insert((a, g), id).is_some() {
                    return Err(WorldError::MultipleProducers(e.to.clone()));
                }
                w
            } else {
                let w = *input_widths.get(&e.to).ok_or_else(|| WorldError::UnknownPort(e.to.clone()))?;
                if env.action_port.contains(&e.to) || producers.insert(e.to.clone(), src).is_some() {
                    return Err(WorldError::MultipleProducers(e.to.clone()));
                }
                w
            };
            if expected != sw {
                return Err(WorldError::Width {
                    port: e.to.clone(),
                    expected,
                    got: sw,
                });
            }
        }

        for node in layout.nodes.iter_mut() {
            let (ins, _) = port_names(&node.spec.op);
            for p in ins {
                let name = format!("{}.{p}", node.spec.name);
                let src = match by_name.get(&name) {
                    Some(&id) => Source::Port(id),
                    None => *producers.get(&name).ok_or_else(|| WorldError::DanglingPort(name.clone()))?,
                };
                node.inputs.push(src);
            }
        }

        layout.bindings = vec![Vec::new(); layout.ports.len()];
        let mut bound: Vec<_> = actuator_ports.into_iter().collect();
        bound.sort();
        for ((a, g), id) in bound {
            layout.bindings[id].push((a, g));
        }

        layout.order = topological_order(&layout)?;

        for name in &env.observation_ports {
            let (src, w) = resolve_source(name, &by_name)?;
            let w = match src {
                Source::Port(id) => layout.ports[id].width,
                Source::Sensor(_) => w,
            };
            layout.observations.push((name.clone(), src, w));
        }
        Ok(layout)
    }

    pub fn port(&self, name: &str) -> Option<usize> {
        self.ports.iter().position(|p| p.name == name)
    }

    pub fn observation_width(&self) -> usize {
        self.observations.iter().map(|o| o.2).sum()
    }

    pub fn action_width(&self) -> usize {
        self.action_ports.iter().map(|&p| self.ports[p].width).sum()
    }
}

/// Kahn's algorithm, ties broken by declaration order.
fn topological_order(layout: &GraphLayout) -> Result<Vec<usize>, WorldError> {
    let n = layout.nodes.len();
    let owner: HashMap<usize, usize> = layout
        .nodes
        .iter()
        .enumerate()
        .flat_map(|(i, node)| node.outputs.iter().map(move |&p| (p, i)))
        .collect();
    let mut deps = vec![Vec::new(); n];
    for (i, node) in layout.nodes.iter().enumerate() {
        for s in &node.inputs {
            if let Source::Port(p) = s {
                if let Some(&j) = owner.get(p) {
                    deps[i].push(j);
                }
            }
        }
    }
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let next = (0..n).find(|&i| !done[i] && deps[i].iter().all(|&j| done[j]));
        match next {
            Some(i) => {
                done[i] = true;
                order.push(i);
            }
            None => {
                let stuck = (0..n).find(|&i| !done[i]).unwrap_or(0);
                return Err(WorldError::Cycle(layout.nodes[stuck].spec.name.clone()));
            }
        }
    }
    Ok(order)
}
