//! DAG blueprints: operators, actor sockets, the two composition functions
//! and the deployability check.
//!
//! A [`Dag`] is a value. Composition never mutates its operands; it copies
//! both sides under fresh node identifiers, so one open DAG can be used any
//! number of times inside a larger one without its nodes aliasing.
//!
//! ```
//! use metastream::graph::{compose_vertical, Dag, OperatorSpec};
//! use metastream::registry;
//!
//! let evens = Dag::single(OperatorSpec::filter(registry::get("even").unwrap())).unwrap();
//! let squares = Dag::single(OperatorSpec::map(registry::get("square").unwrap())).unwrap();
//! let body = compose_vertical(&evens, &squares).unwrap();
//! assert_eq!((body.exposed_inputs().len(), body.exposed_outputs().len()), (1, 1));
//!
//! let program = body.close(&["input", "output"]).unwrap();
//! assert!(program.is_closed());
//! assert!(program.validate().is_ok());
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use petgraph::graph::DiGraph;

use crate::value::{Function, Value};

static NEXT_NODE: AtomicU64 = AtomicU64::new(1);

/// Identifier of a node. Identifiers are process-unique and increase
/// monotonically, so sorting by id yields insertion order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u64);

impl NodeId {
    pub fn fresh() -> NodeId {
        NodeId(NEXT_NODE.fetch_add(1, Ordering::Relaxed))
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Input,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortRef {
    pub node: NodeId,
    pub index: usize,
    pub direction: Direction,
}

impl PortRef {
    pub fn input(node: NodeId, index: usize) -> PortRef {
        PortRef {
            node,
            index,
            direction: Direction::Input,
        }
    }

    pub fn output(node: NodeId, index: usize) -> PortRef {
        PortRef {
            node,
            index,
            direction: Direction::Output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("invalid arity for {kind}: {detail}")]
    InvalidArity { kind: String, detail: String },
    #[error("invalid composition: left DAG has {outputs} output port(s), right DAG has {inputs} input port(s)")]
    ArityMismatch { outputs: usize, inputs: usize },
    #[error("closed DAGs cannot be composed")]
    ComposeClosed,
    #[error("expected {expected} socket label(s), got {got}")]
    LabelCount { expected: usize, got: usize },
    #[error("duplicate socket label {0:?}")]
    DuplicateLabel(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node} has no {direction:?} port {port}")]
    PortOutOfRange {
        node: NodeId,
        port: usize,
        direction: Direction,
    },
    #[error("{direction:?} port {port} of node {node} is already connected")]
    PortOccupied {
        node: NodeId,
        port: usize,
        direction: Direction,
    },
    #[error("no edge {0}")]
    NoSuchEdge(Edge),
    #[error("unknown operator kind {0:?}")]
    UnknownKind(String),
    #[error("operator {kind} does not take argument {argument}")]
    BadArgument { kind: String, argument: String },
}

/// One step of a fused operator.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Map(Function),
    Filter(Function),
}

#[derive(Clone, Debug, PartialEq)]
pub enum OperatorKind {
    Map(Function),
    Filter(Function),
    Scan { f: Function, init: Value },
    Dup(usize),
    Balance(usize),
    Merge(usize),
    Zip,
    /// A single-in single-out operator running several map/filter steps.
    Fused(Arc<[Stage]>),
}

/// The argument an operator kind was instantiated with.
#[derive(Clone, Debug, PartialEq)]
pub enum Argument {
    None,
    Function(Function),
    Count(usize),
    Accumulate { f: Function, init: Value },
    Stages(Arc<[Stage]>),
}

impl fmt::Display for Argument {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Argument::None => f.write_str("none"),
            Argument::Function(func) => write!(f, "{func}"),
            Argument::Count(n) => write!(f, "{n}"),
            Argument::Accumulate { f: func, init } => write!(f, "{func},{init}"),
            Argument::Stages(stages) => f.write_str(&stages_token(stages)),
        }
    }
}

fn stages_token(stages: &[Stage]) -> String {
    stages
        .iter()
        .map(|s| match s {
            Stage::Map(f) => format!("map:{f}"),
            Stage::Filter(f) => format!("filter:{f}"),
        })
        .collect::<Vec<_>>()
        .join(";")
}

impl OperatorKind {
    pub fn name(&self) -> &'static str {
        match self {
            OperatorKind::Map(_) => "map",
            OperatorKind::Filter(_) => "filter",
            OperatorKind::Scan { .. } => "scan",
            OperatorKind::Dup(_) => "dup",
            OperatorKind::Balance(_) => "balance",
            OperatorKind::Merge(_) => "merge",
            OperatorKind::Zip => "zip",
            OperatorKind::Fused(_) => "fused",
        }
    }

    /// `(inputs, outputs)`.
    pub fn arity(&self) -> (usize, usize) {
        match self {
            OperatorKind::Map(_)
            | OperatorKind::Filter(_)
            | OperatorKind::Scan { .. }
            | OperatorKind::Fused(_) => (1, 1),
            OperatorKind::Dup(n) | OperatorKind::Balance(n) => (1, *n),
            OperatorKind::Merge(n) => (*n, 1),
            OperatorKind::Zip => (2, 1),
        }
    }

    pub fn argument(&self) -> Argument {
        match self {
            OperatorKind::Map(f) | OperatorKind::Filter(f) => Argument::Function(f.clone()),
            OperatorKind::Scan { f, init } => Argument::Accumulate {
                f: f.clone(),
                init: init.clone(),
            },
            OperatorKind::Dup(n) | OperatorKind::Balance(n) | OperatorKind::Merge(n) => {
                Argument::Count(*n)
            }
            OperatorKind::Zip => Argument::None,
            OperatorKind::Fused(stages) => Argument::Stages(stages.clone()),
        }
    }

    /// Builds a kind from its name and argument, checking both.
    pub fn from_parts(name: &str, argument: Argument) -> Result<OperatorKind, GraphError> {
        let bad = |argument: &Argument| GraphError::BadArgument {
            kind: name.to_string(),
            argument: argument.to_string(),
        };
        let kind = match (name, argument) {
            ("map", Argument::Function(f)) => OperatorKind::Map(f),
            ("filter", Argument::Function(f)) => OperatorKind::Filter(f),
            ("scan", Argument::Accumulate { f, init }) => OperatorKind::Scan { f, init },
            ("dup", Argument::Count(n)) => OperatorKind::Dup(n),
            ("balance", Argument::Count(n)) => OperatorKind::Balance(n),
            ("merge", Argument::Count(n)) => OperatorKind::Merge(n),
            ("zip", Argument::None) => OperatorKind::Zip,
            ("fused", Argument::Stages(stages)) => OperatorKind::Fused(stages),
            ("map" | "filter" | "scan" | "dup" | "balance" | "merge" | "zip" | "fused", arg) => {
                return Err(bad(&arg))
            }
            (other, _) => return Err(GraphError::UnknownKind(other.to_string())),
        };
        kind.check()?;
        Ok(kind)
    }

    pub fn check(&self) -> Result<(), GraphError> {
        let invalid = |detail: &str| GraphError::InvalidArity {
            kind: self.name().to_string(),
            detail: detail.to_string(),
        };
        match self {
            OperatorKind::Dup(0) | OperatorKind::Balance(0) | OperatorKind::Merge(0) => {
                Err(invalid("n must be greater than 0"))
            }
            OperatorKind::Map(f) | OperatorKind::Filter(f) if f.arity() != 1 => {
                Err(invalid("function must take one argument"))
            }
            OperatorKind::Scan { f, .. } if f.arity() != 2 => {
                Err(invalid("function must take two arguments"))
            }
            OperatorKind::Fused(stages) if stages.is_empty() => Err(invalid("no stages")),
            _ => Ok(()),
        }
    }

    fn token(&self) -> String {
        match self {
            OperatorKind::Zip => "zip".to_string(),
            other => format!("{}({})", other.name(), other.argument()),
        }
    }
}

/// An operator instance inside a DAG.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    pub alias: Option<Arc<str>>,
    /// Marks the operator for the parallelization rewrite.
    pub parallel: bool,
}

impl OperatorSpec {
    pub fn new(kind: OperatorKind) -> Result<OperatorSpec, GraphError> {
        kind.check()?;
        Ok(OperatorSpec {
            kind,
            alias: None,
            parallel: false,
        })
    }

    pub fn map(f: Function) -> OperatorSpec {
        OperatorSpec::unchecked(OperatorKind::Map(f))
    }

    pub fn filter(f: Function) -> OperatorSpec {
        OperatorSpec::unchecked(OperatorKind::Filter(f))
    }

    pub fn scan(f: Function, init: Value) -> OperatorSpec {
        OperatorSpec::unchecked(OperatorKind::Scan { f, init })
    }

    pub fn zip() -> OperatorSpec {
        OperatorSpec::unchecked(OperatorKind::Zip)
    }

    pub fn dup(n: usize) -> Result<OperatorSpec, GraphError> {
        OperatorSpec::new(OperatorKind::Dup(n))
    }

    pub fn balance(n: usize) -> Result<OperatorSpec, GraphError> {
        OperatorSpec::new(OperatorKind::Balance(n))
    }

    pub fn merge(n: usize) -> Result<OperatorSpec, GraphError> {
        OperatorSpec::new(OperatorKind::Merge(n))
    }

    fn unchecked(kind: OperatorKind) -> OperatorSpec {
        OperatorSpec {
            kind,
            alias: None,
            parallel: false,
        }
    }

    pub fn with_alias(mut self, alias: impl AsRef<str>) -> OperatorSpec {
        self.alias = Some(Arc::from(alias.as_ref()));
        self
    }

    pub fn parallel(mut self) -> OperatorSpec {
        self.parallel = true;
        self
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn in_arity(&self) -> usize {
        self.kind.arity().0
    }

    pub fn out_arity(&self) -> usize {
        self.kind.arity().1
    }

    pub fn argument(&self) -> Argument {
        self.kind.argument()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SocketDirection {
    /// Feeds the DAG: one output port.
    Source,
    /// Drains the DAG: one input port.
    Sink,
}

/// Placeholder for an actor supplied at deployment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SocketSpec {
    pub label: Arc<str>,
    pub direction: SocketDirection,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    Operator(OperatorSpec),
    Socket(SocketSpec),
}

impl Node {
    pub fn in_arity(&self) -> usize {
        match self {
            Node::Operator(op) => op.in_arity(),
            Node::Socket(s) => usize::from(s.direction == SocketDirection::Sink),
        }
    }

    pub fn out_arity(&self) -> usize {
        match self {
            Node::Operator(op) => op.out_arity(),
            Node::Socket(s) => usize::from(s.direction == SocketDirection::Source),
        }
    }

    pub fn arity(&self, direction: Direction) -> usize {
        match direction {
            Direction::Input => self.in_arity(),
            Direction::Output => self.out_arity(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Node::Operator(op) => op.name(),
            Node::Socket(SocketSpec {
                direction: SocketDirection::Source,
                ..
            }) => "source",
            Node::Socket(_) => "sink",
        }
    }

    pub fn is_socket(&self) -> bool {
        matches!(self, Node::Socket(_))
    }

    pub fn as_operator(&self) -> Option<&OperatorSpec> {
        match self {
            Node::Operator(op) => Some(op),
            Node::Socket(_) => None,
        }
    }

    /// The operator alias, or the socket label.
    pub fn alias(&self) -> Option<&str> {
        match self {
            Node::Operator(op) => op.alias.as_deref(),
            Node::Socket(s) => Some(&s.label),
        }
    }

    /// Kind plus argument, e.g. `map(square)` or `dup(2)`.
    pub fn token(&self) -> String {
        match self {
            Node::Operator(op) if op.parallel => {
                format!("{}({},par)", op.name(), op.argument())
            }
            Node::Operator(op) => op.kind.token(),
            Node::Socket(_) => self.kind_name().to_string(),
        }
    }

    fn check(&self) -> Result<(), GraphError> {
        match self {
            Node::Operator(op) => op.kind.check(),
            Node::Socket(_) => Ok(()),
        }
    }

    /// Same kind, same argument (functions by identity), same alias.
    fn matches(&self, other: &Node) -> bool {
        self == other
    }
}

impl From<OperatorSpec> for Node {
    fn from(op: OperatorSpec) -> Node {
        Node::Operator(op)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub from: NodeId,
    pub from_port: usize,
    pub to: NodeId,
    pub to_port: usize,
}

impl Edge {
    pub fn new(from: NodeId, from_port: usize, to: NodeId, to_port: usize) -> Edge {
        Edge {
            from,
            from_port,
            to,
            to_port,
        }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}.{} -> {}.{}",
            self.from, self.from_port, self.to, self.to_port
        )
    }
}

/// The four deployability constraints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Constraint {
    /// Every input and output port of every operator is connected.
    PortsConnected = 1,
    /// Operators have exactly as many connections as ports.
    ConnectionCount = 2,
    /// Every actor socket has exactly one port connected.
    SocketConnected = 3,
    /// No cycles.
    Acyclic = 4,
}

impl Constraint {
    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub constraint: Constraint,
    pub node: NodeId,
    pub port: Option<PortRef>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "constraint {} violated at node {}",
            self.constraint.number(),
            self.node
        )?;
        if let Some(port) = self.port {
            let dir = match port.direction {
                Direction::Input => "input",
                Direction::Output => "output",
            };
            write!(f, " {dir} port {}", port.index)?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dag {
    nodes: BTreeMap<NodeId, Node>,
    edges: BTreeSet<Edge>,
}

impl Dag {
    pub fn new() -> Dag {
        Dag::default()
    }

    /// The smallest DAG: one operator, every port exposed.
    pub fn single(spec: OperatorSpec) -> Result<Dag, GraphError> {
        spec.kind.check()?;
        let mut dag = Dag::new();
        dag.nodes.insert(NodeId::fresh(), Node::Operator(spec));
        Ok(dag)
    }

    /// Assembles a DAG without any checks, e.g. to reproduce a broken
    /// blueprint for [`Dag::validate`].
    pub fn from_parts(
        nodes: impl IntoIterator<Item = (NodeId, Node)>,
        edges: impl IntoIterator<Item = Edge>,
    ) -> Dag {
        Dag {
            nodes: nodes.into_iter().collect(),
            edges: edges.into_iter().collect(),
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> + '_ {
        self.nodes.iter().map(|(id, node)| (*id, node))
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn edges(&self) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of nodes that are not actor sockets.
    pub fn operator_count(&self) -> usize {
        self.nodes.values().filter(|n| !n.is_socket()).count()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_sockets(&self) -> bool {
        self.nodes.values().any(Node::is_socket)
    }

    pub fn sockets(&self) -> impl Iterator<Item = (NodeId, &SocketSpec)> + '_ {
        self.nodes.iter().filter_map(|(id, n)| match n {
            Node::Socket(s) => Some((*id, s)),
            Node::Operator(_) => None,
        })
    }

    pub fn incoming(&self, id: NodeId) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.to == id)
    }

    pub fn outgoing(&self, id: NodeId) -> impl Iterator<Item = &Edge> + '_ {
        self.edges.iter().filter(move |e| e.from == id)
    }

    pub fn edge_at(&self, port: PortRef) -> Option<&Edge> {
        self.edges.iter().find(|e| match port.direction {
            Direction::Input => e.to == port.node && e.to_port == port.index,
            Direction::Output => e.from == port.node && e.from_port == port.index,
        })
    }

    fn covered(&self) -> HashSet<PortRef> {
        self.edges
            .iter()
            .flat_map(|e| {
                [
                    PortRef::output(e.from, e.from_port),
                    PortRef::input(e.to, e.to_port),
                ]
            })
            .collect()
    }

    fn exposed(&self, direction: Direction) -> Vec<PortRef> {
        let covered = self.covered();
        self.nodes
            .iter()
            .filter(|(_, n)| !n.is_socket())
            .flat_map(|(id, n)| {
                (0..n.arity(direction)).map(move |index| PortRef {
                    node: *id,
                    index,
                    direction,
                })
            })
            .filter(|p| !covered.contains(p))
            .collect()
    }

    /// Unconnected operator input ports, in node insertion order then port
    /// index.
    pub fn exposed_inputs(&self) -> Vec<PortRef> {
        self.exposed(Direction::Input)
    }

    pub fn exposed_outputs(&self) -> Vec<PortRef> {
        self.exposed(Direction::Output)
    }

    pub fn is_closed(&self) -> bool {
        self.exposed_inputs().is_empty() && self.exposed_outputs().is_empty()
    }

    pub fn is_open(&self) -> bool {
        !self.is_closed()
    }

    /// Inserts a node under a fresh identifier.
    pub fn add_node(&mut self, node: Node) -> Result<NodeId, GraphError> {
        let id = NodeId::fresh();
        self.insert_node(id, node)?;
        Ok(id)
    }

    /// Inserts a node under a given identifier, replacing nothing.
    pub fn insert_node(&mut self, id: NodeId, node: Node) -> Result<(), GraphError> {
        node.check()?;
        self.nodes.insert(id, node);
        Ok(())
    }

    /// Removes a node together with every edge touching it.
    pub fn remove_node(&mut self, id: NodeId) -> Result<Node, GraphError> {
        let node = self.nodes.remove(&id).ok_or(GraphError::UnknownNode(id))?;
        self.edges.retain(|e| e.from != id && e.to != id);
        Ok(node)
    }

    pub fn replace_node(&mut self, id: NodeId, node: Node) -> Result<Node, GraphError> {
        node.check()?;
        let slot = self.nodes.get_mut(&id).ok_or(GraphError::UnknownNode(id))?;
        Ok(std::mem::replace(slot, node))
    }

    fn check_port(&self, port: PortRef) -> Result<(), GraphError> {
        let node = self
            .nodes
            .get(&port.node)
            .ok_or(GraphError::UnknownNode(port.node))?;
        if port.index >= node.arity(port.direction) {
            return Err(GraphError::PortOutOfRange {
                node: port.node,
                port: port.index,
                direction: port.direction,
            });
        }
        if self.edge_at(port).is_some() {
            return Err(GraphError::PortOccupied {
                node: port.node,
                port: port.index,
                direction: port.direction,
            });
        }
        Ok(())
    }

    /// Adds an edge between existing, free ports. Cycles are not checked
    /// here; [`Dag::validate`] reports them.
    pub fn add_edge(&mut self, edge: Edge) -> Result<(), GraphError> {
        self.check_port(PortRef::output(edge.from, edge.from_port))?;
        self.check_port(PortRef::input(edge.to, edge.to_port))?;
        self.edges.insert(edge);
        Ok(())
    }

    pub fn remove_edge(&mut self, edge: &Edge) -> Result<(), GraphError> {
        if self.edges.remove(edge) {
            Ok(())
        } else {
            Err(GraphError::NoSuchEdge(*edge))
        }
    }

    /// Copies the DAG under fresh identifiers, preserving relative order.
    fn renamed(&self) -> (Dag, HashMap<NodeId, NodeId>) {
        let mapping: HashMap<NodeId, NodeId> =
            self.nodes.keys().map(|id| (*id, NodeId::fresh())).collect();
        let dag = Dag {
            nodes: self
                .nodes
                .iter()
                .map(|(id, n)| (mapping[id], n.clone()))
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|e| Edge::new(mapping[&e.from], e.from_port, mapping[&e.to], e.to_port))
                .collect(),
        };
        (dag, mapping)
    }

    fn absorb(&mut self, other: Dag) {
        self.nodes.extend(other.nodes);
        self.edges.extend(other.edges);
    }

    pub fn then(&self, next: &Dag) -> Result<Dag, GraphError> {
        compose_vertical(self, next)
    }

    pub fn beside(&self, other: &Dag) -> Result<Dag, GraphError> {
        compose_horizontal(self, other)
    }

    /// Plugs every exposed port into a fresh actor socket. Labels go to the
    /// exposed inputs first, then to the exposed outputs, in canonical order.
    pub fn close<S: AsRef<str>>(&self, labels: &[S]) -> Result<Dag, GraphError> {
        if self.has_sockets() {
            return Err(GraphError::ComposeClosed);
        }
        let (inputs, outputs) = (self.exposed_inputs(), self.exposed_outputs());
        if labels.len() != inputs.len() + outputs.len() {
            return Err(GraphError::LabelCount {
                expected: inputs.len() + outputs.len(),
                got: labels.len(),
            });
        }
        let mut seen = HashSet::new();
        for label in labels {
            if !seen.insert(label.as_ref()) {
                return Err(GraphError::DuplicateLabel(label.as_ref().to_string()));
            }
        }

        let socket = |label: &S, direction| {
            Node::Socket(SocketSpec {
                label: Arc::from(label.as_ref()),
                direction,
            })
        };
        let mut closed = Dag::new();
        let source_ids: Vec<NodeId> = labels[..inputs.len()]
            .iter()
            .map(|label| {
                let id = NodeId::fresh();
                closed.nodes.insert(id, socket(label, SocketDirection::Source));
                id
            })
            .collect();
        let (body, mapping) = self.renamed();
        closed.absorb(body);
        for (src, port) in source_ids.into_iter().zip(&inputs) {
            closed
                .edges
                .insert(Edge::new(src, 0, mapping[&port.node], port.index));
        }
        for (label, port) in labels[inputs.len()..].iter().zip(&outputs) {
            let id = NodeId::fresh();
            closed.nodes.insert(id, socket(label, SocketDirection::Sink));
            closed
                .edges
                .insert(Edge::new(mapping[&port.node], port.index, id, 0));
        }
        Ok(closed)
    }

    /// A closed DAG without operators: one source socket wired straight to
    /// one sink socket.
    pub fn wire(source: &str, sink: &str) -> Result<Dag, GraphError> {
        if source == sink {
            return Err(GraphError::DuplicateLabel(source.to_string()));
        }
        let (from, to) = (NodeId::fresh(), NodeId::fresh());
        let socket = |label: &str, direction| {
            Node::Socket(SocketSpec {
                label: Arc::from(label),
                direction,
            })
        };
        Ok(Dag::from_parts(
            [
                (from, socket(source, SocketDirection::Source)),
                (to, socket(sink, SocketDirection::Sink)),
            ],
            [Edge::new(from, 0, to, 0)],
        ))
    }

    /// Kahn's algorithm, ties broken by insertion order. Returns the nodes
    /// left over when the edges contain a cycle.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, Vec<NodeId>> {
        let mut indegree: BTreeMap<NodeId, usize> = self.nodes.keys().map(|id| (*id, 0)).collect();
        for e in &self.edges {
            if let Some(d) = indegree.get_mut(&e.to) {
                if self.nodes.contains_key(&e.from) {
                    *d += 1;
                }
            }
        }
        let mut ready: BTreeSet<NodeId> = indegree
            .iter()
            .filter(|(_, d)| **d == 0)
            .map(|(id, _)| *id)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop_first() {
            order.push(id);
            for e in self.edges.iter().filter(|e| e.from == id) {
                if let Some(d) = indegree.get_mut(&e.to) {
                    *d -= 1;
                    if *d == 0 {
                        ready.insert(e.to);
                    }
                }
            }
        }
        if order.len() == self.nodes.len() {
            Ok(order)
        } else {
            let done: HashSet<NodeId> = order.into_iter().collect();
            Err(self
                .nodes
                .keys()
                .filter(|id| !done.contains(id))
                .copied()
                .collect())
        }
    }

    /// Checks the four deployability constraints and returns every
    /// violation found.
    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut violations = Vec::new();
        let mut per_port: HashMap<PortRef, usize> = HashMap::new();
        let mut per_node: HashMap<NodeId, usize> = HashMap::new();

        for e in &self.edges {
            for port in [PortRef::output(e.from, e.from_port), PortRef::input(e.to, e.to_port)] {
                *per_port.entry(port).or_default() += 1;
                *per_node.entry(port.node).or_default() += 1;
                match self.nodes.get(&port.node) {
                    None => violations.push(Violation {
                        constraint: Constraint::ConnectionCount,
                        node: port.node,
                        port: Some(port),
                        detail: format!("edge {e} references a missing node"),
                    }),
                    Some(node) if port.index >= node.arity(port.direction) => {
                        let constraint = if node.is_socket() {
                            Constraint::SocketConnected
                        } else {
                            Constraint::ConnectionCount
                        };
                        violations.push(Violation {
                            constraint,
                            node: port.node,
                            port: Some(port),
                            detail: format!("edge {e} uses a port the node does not have"),
                        });
                    }
                    Some(_) => {}
                }
            }
        }

        for (id, node) in &self.nodes {
            match node {
                Node::Operator(op) => {
                    for direction in [Direction::Input, Direction::Output] {
                        for index in 0..node.arity(direction) {
                            let port = PortRef {
                                node: *id,
                                index,
                                direction,
                            };
                            match per_port.get(&port).copied().unwrap_or(0) {
                                0 => violations.push(Violation {
                                    constraint: Constraint::PortsConnected,
                                    node: *id,
                                    port: Some(port),
                                    detail: format!("{} port is not connected", op.name()),
                                }),
                                1 => {}
                                n => violations.push(Violation {
                                    constraint: Constraint::ConnectionCount,
                                    node: *id,
                                    port: Some(port),
                                    detail: format!("{} port carries {n} connections", op.name()),
                                }),
                            }
                        }
                    }
                }
                Node::Socket(socket) => {
                    let count = per_node.get(id).copied().unwrap_or(0);
                    if count != 1 {
                        violations.push(Violation {
                            constraint: Constraint::SocketConnected,
                            node: *id,
                            port: None,
                            detail: format!(
                                "socket {:?} has {count} connections, expected exactly 1",
                                socket.label
                            ),
                        });
                    }
                }
            }
        }

        if let Err(stuck) = self.topological_order() {
            violations.push(Violation {
                constraint: Constraint::Acyclic,
                node: stuck[0],
                port: None,
                detail: format!("{} node(s) lie on or behind a cycle", stuck.len()),
            });
        }

        violations.sort_by_key(|v| (v.constraint, v.node, v.port));
        violations.dedup();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    /// Bijection on nodes preserving kind, argument identity, alias and
    /// port-to-port edges.
    pub fn isomorphic(&self, other: &Dag) -> bool {
        if self.nodes.len() != other.nodes.len() || self.edges.len() != other.edges.len() {
            return false;
        }
        let (a, b) = (self.to_petgraph(), other.to_petgraph());
        petgraph::algo::is_isomorphic_matching(&a, &b, |x, y| x.matches(y), |x, y| x == y)
    }

    // Parallel edges between the same pair of nodes collapse into one edge
    // carrying every port pair.
    fn to_petgraph(&self) -> DiGraph<Node, Vec<(usize, usize)>> {
        let mut g = DiGraph::new();
        let index: HashMap<NodeId, _> = self
            .nodes
            .iter()
            .map(|(id, n)| (*id, g.add_node(n.clone())))
            .collect();
        let mut grouped: BTreeMap<(NodeId, NodeId), Vec<(usize, usize)>> = BTreeMap::new();
        for e in &self.edges {
            grouped
                .entry((e.from, e.to))
                .or_default()
                .push((e.from_port, e.to_port));
        }
        for ((from, to), ports) in grouped {
            if let (Some(f), Some(t)) = (index.get(&from), index.get(&to)) {
                g.add_edge(*f, *t, ports);
            }
        }
        g
    }

    /// Canonical position of every node (insertion order), used as the
    /// stable identifier in the textual form.
    pub fn canonical_index(&self) -> HashMap<NodeId, usize> {
        self.nodes.keys().enumerate().map(|(i, id)| (*id, i)).collect()
    }
}

/// `a ~> b`: the k-th exposed output of `a` feeds the k-th exposed input of
/// `b`.
pub fn compose_vertical(a: &Dag, b: &Dag) -> Result<Dag, GraphError> {
    if a.has_sockets() || b.has_sockets() {
        return Err(GraphError::ComposeClosed);
    }
    let (outputs, inputs) = (a.exposed_outputs(), b.exposed_inputs());
    if outputs.len() != inputs.len() {
        return Err(GraphError::ArityMismatch {
            outputs: outputs.len(),
            inputs: inputs.len(),
        });
    }
    let (mut left, left_map) = a.renamed();
    let (right, right_map) = b.renamed();
    left.absorb(right);
    for (out, inp) in outputs.iter().zip(&inputs) {
        left.edges.insert(Edge::new(
            left_map[&out.node],
            out.index,
            right_map[&inp.node],
            inp.index,
        ));
    }
    Ok(left)
}

/// `a ||| b`: disjoint union, `a`'s ports before `b`'s.
pub fn compose_horizontal(a: &Dag, b: &Dag) -> Result<Dag, GraphError> {
    if a.has_sockets() || b.has_sockets() {
        return Err(GraphError::ComposeClosed);
    }
    let (mut left, _) = a.renamed();
    left.absorb(b.renamed().0);
    Ok(left)
}

/// Folds `~>` over a non-empty list of DAGs.
pub fn chain<'a>(dags: impl IntoIterator<Item = &'a Dag>) -> Result<Dag, GraphError> {
    let mut iter = dags.into_iter();
    let first = iter.next().cloned().unwrap_or_default();
    iter.try_fold(first, |acc, next| compose_vertical(&acc, next))
}

/// Folds `|||` over a list of DAGs.
pub fn parallel<'a>(dags: impl IntoIterator<Item = &'a Dag>) -> Result<Dag, GraphError> {
    dags.into_iter()
        .try_fold(Dag::new(), |acc, next| compose_horizontal(&acc, next))
}

/// Textual form: one `node <id> <kind> [alias]` line per node, then one
/// `edge <id>.<port> -> <id>.<port>` line per edge, identifiers renumbered
/// from 0 in insertion order.
impl fmt::Display for Dag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let index = self.canonical_index();
        for (i, node) in self.nodes.values().enumerate() {
            write!(f, "node {i} {}", node.token())?;
            if let Some(alias) = node.alias() {
                write!(f, " {alias}")?;
            }
            writeln!(f)?;
        }
        let mut edges: Vec<(usize, usize, usize, usize)> = self
            .edges
            .iter()
            .map(|e| {
                let id = |n: &NodeId| index.get(n).copied().unwrap_or(usize::MAX);
                (id(&e.from), e.from_port, id(&e.to), e.to_port)
            })
            .collect();
        edges.sort_unstable();
        for (from, fp, to, tp) in edges {
            writeln!(f, "edge {from}.{fp} -> {to}.{tp}")?;
        }
        Ok(())
    }
}
