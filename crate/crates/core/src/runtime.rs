//! Deployment of closed DAGs and the stream protocol engine.
//!
//! Every node of a deployed DAG becomes a unit: a sequential message
//! processor that owns its state and talks to its neighbours only through
//! mailboxes. Messages between a fixed pair of units arrive in send order.
//!
//! A unit handles a message either directly ([`deploy_fast`]) or by pushing
//! a reified meta-event through the meta-DAG of a [`Behavior`] ([`deploy`]).
//! Two executors drive the units: a single-threaded deterministic scheduler
//! that can record a trace, and a worker pool.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Dag, Node, OperatorKind, SocketDirection, Violation};
use crate::metar::{Behavior, MetaCtx, MetaValue};
use crate::operators::{Action, Route, SinkSpec, SourceAction, SourceSpec};
use crate::value::{StreamError, Value};

/// Index of a unit inside one deployment.
pub type UnitRef = usize;

/// One end of a connection: a unit and one of its ports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Link {
    pub unit: UnitRef,
    pub port: usize,
}

/// A protocol message as delivered to a unit.
///
/// For `Next`, `Err` and `Complete`, `port` is the receiver's input port;
/// for `Demand` it is the receiver's output port the demand came through.
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Init,
    Next {
        value: Value,
        from: UnitRef,
        port: usize,
    },
    Err {
        error: StreamError,
        from: UnitRef,
        port: usize,
    },
    Complete {
        from: UnitRef,
        port: usize,
    },
    Tick,
    Demand {
        from: UnitRef,
        port: usize,
    },
}

impl Event {
    pub fn tag(&self) -> &'static str {
        match self {
            Event::Init => "init",
            Event::Next { .. } => "next",
            Event::Err { .. } => "err",
            Event::Complete { .. } => "complete",
            Event::Tick => "tick",
            Event::Demand { .. } => "demand",
        }
    }

    pub fn value(&self) -> Option<&Value> {
        match self {
            Event::Next { value, .. } => Some(value),
            _ => None,
        }
    }
}

impl fmt::Display for Event {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Event::Next { value, .. } => write!(f, "next {value}"),
            Event::Err { error, .. } => write!(f, "err {error}"),
            other => f.write_str(other.tag()),
        }
    }
}

/// A message before it is addressed to a particular neighbour.
#[derive(Clone, Debug, PartialEq)]
pub enum Signal {
    Next(Value),
    Err(StreamError),
    Complete,
    Tick,
    Demand,
}

impl Signal {
    pub fn address(self, from: UnitRef, port: usize) -> Event {
        match self {
            Signal::Next(value) => Event::Next { value, from, port },
            Signal::Err(error) => Event::Err { error, from, port },
            Signal::Complete => Event::Complete { from, port },
            Signal::Tick => Event::Tick,
            Signal::Demand => Event::Demand { from, port },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Initial,
    Running,
    Final,
}

/// The reified state of a unit handed to its meta-DAG.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub pid: UnitRef,
    /// Upstream per input port.
    pub us: Arc<[Link]>,
    /// Downstream per output port.
    pub ds: Arc<[Link]>,
    pub state: Value,
    pub meta_state: Value,
}

/// What a unit runs.
#[derive(Clone, Debug)]
pub enum Hosted {
    Operator(OperatorKind),
    Source(SourceSpec),
    Sink(SinkSpec),
}

impl Hosted {
    pub fn is_source(&self) -> bool {
        matches!(self, Hosted::Source(_))
    }

    pub fn is_sink(&self) -> bool {
        matches!(self, Hosted::Sink(_))
    }

    fn initial_state(&self) -> Value {
        match self {
            Hosted::Operator(kind) => kind.initial_state(),
            Hosted::Source(spec) => spec.initial_state(),
            Hosted::Sink(spec) => spec.initial_state(),
        }
    }
}

impl fmt::Display for Hosted {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hosted::Operator(kind) => {
                let node = Node::Operator(crate::graph::OperatorSpec {
                    kind: kind.clone(),
                    alias: None,
                    parallel: false,
                });
                f.write_str(&node.token())
            }
            Hosted::Source(spec) => write!(f, "{spec}"),
            Hosted::Sink(spec) => write!(f, "{spec:?}"),
        }
    }
}

/// The outcome of calling a unit's event handler.
#[derive(Clone, Debug, PartialEq)]
pub enum BaseResponse {
    Initialized,
    Emit { value: Value, route: Route },
    Skip,
    Complete,
    Fail(StreamError),
    TickValue(Value),
}

impl BaseResponse {
    pub fn tag(&self) -> &'static str {
        match self {
            BaseResponse::Initialized => "initialized",
            BaseResponse::Emit { .. } => "emit",
            BaseResponse::Skip => "skip",
            BaseResponse::Complete => "complete",
            BaseResponse::Fail(_) => "fail",
            BaseResponse::TickValue(_) => "tick",
        }
    }
}

/// Side effects of one message-processing turn.
#[derive(Clone, Debug, PartialEq)]
pub enum Effect {
    Send { to: UnitRef, event: Event },
    /// The unit stops processing messages.
    Finalize,
    /// A sink hands over its terminal result.
    Deliver(Result<Value, StreamError>),
}

/// Dispatches an event to the hosted handler.
pub fn call_base(hosted: &Hosted, state: Value, event: Event) -> (Value, BaseResponse) {
    let from_action = |state: Value, action: Action| {
        let response = match action {
            Action::Emit { value, route } => BaseResponse::Emit { value, route },
            Action::Skip => BaseResponse::Skip,
            Action::Complete => BaseResponse::Complete,
            Action::Fail(e) => BaseResponse::Fail(e),
        };
        (state, response)
    };
    match (hosted, event) {
        (_, Event::Init) => (hosted.initial_state(), BaseResponse::Initialized),
        (Hosted::Operator(kind), Event::Next { value, port, .. }) => {
            let r = kind.on_next(state, value, port);
            from_action(r.state, r.action)
        }
        (Hosted::Operator(kind), Event::Complete { port, .. }) => {
            let r = kind.on_complete(state, port);
            from_action(r.state, r.action)
        }
        (Hosted::Operator(kind), Event::Err { error, port, .. }) => {
            let r = kind.on_error(state, error, port);
            from_action(r.state, r.action)
        }
        (Hosted::Source(spec), Event::Tick) => {
            let r = spec.on_tick(state);
            match r.action {
                SourceAction::Produced(v) => (r.state, BaseResponse::TickValue(v)),
                SourceAction::Complete => (r.state, BaseResponse::Complete),
            }
        }
        (Hosted::Sink(spec), Event::Next { value, .. }) => {
            (spec.on_next(state, value), BaseResponse::Skip)
        }
        (Hosted::Sink(_), Event::Complete { .. }) => (state, BaseResponse::Complete),
        (Hosted::Sink(_), Event::Err { error, .. }) => (state, BaseResponse::Fail(error)),
        (_, _) => (state, BaseResponse::Skip),
    }
}

fn send_all(pid: UnitRef, links: &[Link], signal: Signal, out: &mut Vec<Effect>) {
    if let Some((last, rest)) = links.split_last() {
        for link in rest {
            out.push(Effect::Send {
                to: link.unit,
                event: signal.clone().address(pid, link.port),
            });
        }
        out.push(Effect::Send {
            to: last.unit,
            event: signal.address(pid, last.port),
        });
    }
}

/// Translates a handler response into protocol messages (push semantics).
pub fn default_effects(
    hosted: &Hosted,
    pid: UnitRef,
    ds: &[Link],
    state: &mut Value,
    response: BaseResponse,
    out: &mut Vec<Effect>,
) {
    match response {
        BaseResponse::Initialized => {
            if hosted.is_source() {
                out.push(Effect::Send {
                    to: pid,
                    event: Event::Tick,
                });
            }
        }
        BaseResponse::Emit { value, route } => match route {
            Route::All => send_all(pid, ds, Signal::Next(value), out),
            Route::Port(k) => {
                if let Some(link) = ds.get(k) {
                    send_all(pid, std::slice::from_ref(link), Signal::Next(value), out);
                }
            }
        },
        BaseResponse::Skip => {}
        BaseResponse::Complete => {
            match hosted {
                Hosted::Sink(spec) => {
                    out.push(Effect::Deliver(Ok(spec.outcome(std::mem::take(state)))))
                }
                _ => send_all(pid, ds, Signal::Complete, out),
            }
            out.push(Effect::Finalize);
        }
        BaseResponse::Fail(e) => {
            match hosted {
                Hosted::Sink(_) => out.push(Effect::Deliver(Err(e))),
                _ => send_all(pid, ds, Signal::Err(e), out),
            }
            out.push(Effect::Finalize);
        }
        BaseResponse::TickValue(v) => {
            send_all(pid, ds, Signal::Next(v), out);
            out.push(Effect::Send {
                to: pid,
                event: Event::Tick,
            });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NetworkError {
    #[error("meta-DAG is not deployable: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("meta-DAG needs exactly one source socket and one sink socket")]
    Sockets,
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Clone, Copy, Debug)]
enum Target {
    Node { idx: usize, port: usize },
    Out,
}

#[derive(Clone, Debug)]
struct LocalNode {
    kind: OperatorKind,
    state: Value,
    ds: Vec<Target>,
}

/// Synchronous driver for a closed DAG with one source and one sink socket.
///
/// Each [`push`](LocalNetwork::push) feeds one value in and runs the
/// network until no message is pending; operator state survives between
/// pushes. This is how meta-DAGs execute, both at compile time and inside
/// a unit's turn.
#[derive(Clone, Debug)]
pub struct LocalNetwork {
    nodes: Vec<LocalNode>,
    entry: Target,
    queue: VecDeque<(usize, usize, Value)>,
}

impl LocalNetwork {
    pub fn new(dag: &Dag) -> Result<LocalNetwork, NetworkError> {
        dag.validate().map_err(NetworkError::Invalid)?;
        let sockets: Vec<_> = dag.sockets().collect();
        let sources = sockets
            .iter()
            .filter(|(_, s)| s.direction == SocketDirection::Source)
            .count();
        if sockets.len() != 2 || sources != 1 {
            return Err(NetworkError::Sockets);
        }

        let mut index = HashMap::new();
        let mut nodes = Vec::new();
        for (id, node) in dag.nodes() {
            if let Node::Operator(op) = node {
                index.insert(id, nodes.len());
                nodes.push(LocalNode {
                    kind: op.kind.clone(),
                    state: op.kind.initial_state(),
                    ds: vec![Target::Out; op.out_arity()],
                });
            }
        }
        let mut entry = Target::Out;
        for e in dag.edges() {
            let target = match index.get(&e.to) {
                Some(&idx) => Target::Node {
                    idx,
                    port: e.to_port,
                },
                None => Target::Out,
            };
            match index.get(&e.from) {
                Some(&idx) => nodes[idx].ds[e.from_port] = target,
                None => entry = target,
            }
        }
        Ok(LocalNetwork {
            nodes,
            entry,
            queue: VecDeque::new(),
        })
    }

    // Filters are stateless, so they run as soon as a value is routed to
    // them. Copies made by a fan-out are dropped early that way, which
    // keeps the surviving copy uniquely owned.
    fn route(
        nodes: &[LocalNode],
        queue: &mut VecDeque<(usize, usize, Value)>,
        out: &mut Vec<Value>,
        mut target: Target,
        value: Value,
    ) -> Result<(), StreamError> {
        loop {
            match target {
                Target::Out => {
                    out.push(value);
                    return Ok(());
                }
                Target::Node { idx, port } => {
                    if let OperatorKind::Filter(p) = &nodes[idx].kind {
                        if !p.call_ref(&value)?.truthy() {
                            return Ok(());
                        }
                        target = nodes[idx].ds[0];
                        continue;
                    }
                    queue.push_back((idx, port, value));
                    return Ok(());
                }
            }
        }
    }

    /// Runs one value through the network and returns what reached the
    /// sink socket, in arrival order.
    pub fn push(&mut self, value: Value) -> Result<Vec<Value>, StreamError> {
        let mut out = Vec::new();
        let result = self.drive(value, &mut out);
        self.queue.clear();
        result.map(|()| out)
    }

    fn drive(&mut self, value: Value, out: &mut Vec<Value>) -> Result<(), StreamError> {
        let LocalNetwork {
            nodes,
            entry,
            queue,
        } = self;
        Self::route(nodes, queue, out, *entry, value)?;
        while let Some((idx, port, v)) = queue.pop_front() {
            let state = std::mem::take(&mut nodes[idx].state);
            let r = nodes[idx].kind.on_next(state, v, port);
            nodes[idx].state = r.state;
            match r.action {
                Action::Emit { value, route } => match route {
                    Route::Port(k) => {
                        let target = nodes[idx].ds[k];
                        Self::route(nodes, queue, out, target, value)?;
                    }
                    Route::All => {
                        let targets = nodes[idx].ds.clone();
                        if let Some((last, rest)) = targets.split_last() {
                            for t in rest {
                                Self::route(nodes, queue, out, *t, value.clone())?;
                            }
                            Self::route(nodes, queue, out, *last, value)?;
                        }
                    }
                },
                Action::Skip | Action::Complete => {}
                Action::Fail(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Number of operators in the network.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// What a socket is bound to at deployment.
#[derive(Clone, Debug)]
pub enum Endpoint {
    Source(SourceSpec),
    Sink(SinkSpec),
}

#[derive(Clone, Debug)]
pub struct DeployOptions {
    /// Single-threaded round-robin scheduling with a recorded trace.
    pub deterministic: bool,
    /// Picks where the round-robin starts.
    pub seed: u64,
    /// Record a trace (always on in deterministic mode).
    pub trace: bool,
    /// Aborts the deployment after this many delivered messages.
    pub budget: u64,
    /// Worker threads in concurrent mode.
    pub workers: usize,
}

impl Default for DeployOptions {
    fn default() -> DeployOptions {
        DeployOptions {
            deterministic: false,
            seed: 0,
            trace: false,
            budget: 50_000_000,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

impl DeployOptions {
    pub fn deterministic(seed: u64) -> DeployOptions {
        DeployOptions {
            deterministic: true,
            seed,
            trace: true,
            ..DeployOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DeployError {
    #[error("DAG is not deployable: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("socket {0:?} is not bound")]
    Unbound(String),
    #[error("label {0:?} does not name a socket")]
    UnknownLabel(String),
    #[error("socket {0:?} is bound twice")]
    BoundTwice(String),
    #[error("socket {0:?} is bound to an endpoint of the wrong direction")]
    Direction(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEntry {
    pub seq: u64,
    /// `None` for messages injected by the runtime.
    pub from: Option<UnitRef>,
    pub to: UnitRef,
    pub event: Event,
}

impl fmt::Display for TraceEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "seq {} ", self.seq)?;
        match self.from {
            Some(u) => write!(f, "u{u}")?,
            None => f.write_str("rt")?,
        }
        write!(f, " -> u{} {}", self.to, self.event)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnitReport {
    pub name: String,
    pub phase: Phase,
}

/// Everything a finished deployment produced.
#[derive(Clone, Debug)]
pub struct Outcome {
    /// Sink label and the result it delivered, in socket order.
    pub sinks: Vec<(String, Result<Value, StreamError>)>,
    pub trace: Vec<TraceEntry>,
    pub units: Vec<UnitReport>,
    pub messages: u64,
}

impl Outcome {
    /// The result of the only sink.
    pub fn into_single(self) -> Result<Value, StreamError> {
        match self.sinks.len() {
            1 => self.sinks.into_iter().next().map(|(_, r)| r).unwrap(),
            n => Err(StreamError::new(format!("expected one sink, found {n}"))),
        }
    }

    pub fn sink(&self, label: &str) -> Option<&Result<Value, StreamError>> {
        self.sinks.iter().find(|(l, _)| l == label).map(|(_, r)| r)
    }

    pub fn trace_text(&self) -> String {
        self.trace.iter().map(|e| format!("{e}\n")).collect()
    }
}

struct Unit {
    pid: UnitRef,
    hosted: Arc<Hosted>,
    us: Arc<[Link]>,
    ds: Arc<[Link]>,
    state: Value,
    meta_state: Value,
    phase: Phase,
    meta: Option<(LocalNetwork, Arc<MetaCtx>)>,
}

impl Unit {
    /// One message-processing turn. Effects are appended to `out`.
    fn step(&mut self, event: Event, out: &mut Vec<Effect>) {
        if self.phase == Phase::Final {
            return;
        }
        self.phase = Phase::Running;
        let start = out.len();
        match &mut self.meta {
            None => {
                let state = std::mem::take(&mut self.state);
                let (mut state, response) = call_base(&self.hosted, state, event);
                default_effects(&self.hosted, self.pid, &self.ds, &mut state, response, out);
                self.state = state;
            }
            Some((network, ctx)) => {
                let snapshot = Snapshot {
                    pid: self.pid,
                    us: self.us.clone(),
                    ds: self.ds.clone(),
                    state: std::mem::take(&mut self.state),
                    meta_state: std::mem::take(&mut self.meta_state),
                };
                let input = MetaValue::event(snapshot, event, ctx.clone());
                let done = match network.push(input) {
                    Ok(mut outputs) if outputs.len() == 1 => {
                        match outputs.pop().unwrap().downcast::<MetaValue>() {
                            Ok(MetaValue::Done { snapshot, .. }) => Some(snapshot),
                            _ => None,
                        }
                    }
                    _ => None,
                };
                let effects = ctx.take_effects();
                match done {
                    Some(snapshot) => {
                        self.state = snapshot.state;
                        self.meta_state = snapshot.meta_state;
                        out.extend(effects);
                    }
                    None => {
                        let fault = StreamError::new("meta fault");
                        match &*self.hosted {
                            Hosted::Sink(_) => out.push(Effect::Deliver(Err(fault))),
                            _ => send_all(self.pid, &self.ds, Signal::Err(fault), out),
                        }
                        out.push(Effect::Finalize);
                    }
                }
            }
        }
        if out[start..].contains(&Effect::Finalize) {
            self.phase = Phase::Final;
        }
    }
}

struct Plan {
    units: Vec<Unit>,
    names: Vec<String>,
    /// Sink label per unit, for sinks.
    sink_labels: Vec<Option<String>>,
}

fn plan(
    dag: &Dag,
    bindings: Vec<(String, Endpoint)>,
    behavior: Option<&Behavior>,
) -> Result<Plan, DeployError> {
    dag.validate().map_err(DeployError::Invalid)?;
    let mut bound: HashMap<String, Endpoint> = HashMap::new();
    for (label, endpoint) in bindings {
        if bound.contains_key(&label) {
            return Err(DeployError::BoundTwice(label));
        }
        bound.insert(label, endpoint);
    }

    let ids: Vec<_> = dag.nodes().map(|(id, _)| id).collect();
    let index: HashMap<_, _> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut hosted = Vec::with_capacity(ids.len());
    let mut sink_labels = Vec::with_capacity(ids.len());
    for (_, node) in dag.nodes() {
        match node {
            Node::Operator(op) => {
                hosted.push(Hosted::Operator(op.kind.clone()));
                sink_labels.push(None);
            }
            Node::Socket(socket) => {
                let label = socket.label.to_string();
                let endpoint = bound
                    .remove(&label)
                    .ok_or_else(|| DeployError::Unbound(label.clone()))?;
                match (socket.direction, endpoint) {
                    (SocketDirection::Source, Endpoint::Source(spec)) => {
                        hosted.push(Hosted::Source(spec));
                        sink_labels.push(None);
                    }
                    (SocketDirection::Sink, Endpoint::Sink(spec)) => {
                        hosted.push(Hosted::Sink(spec));
                        sink_labels.push(Some(label));
                    }
                    _ => return Err(DeployError::Direction(label)),
                }
            }
        }
    }
    if let Some(label) = bound.into_keys().min() {
        return Err(DeployError::UnknownLabel(label));
    }

    let placeholder = Link { unit: 0, port: 0 };
    let mut us: Vec<Vec<Link>> = dag
        .nodes()
        .map(|(_, n)| vec![placeholder; n.in_arity()])
        .collect();
    let mut ds: Vec<Vec<Link>> = dag
        .nodes()
        .map(|(_, n)| vec![placeholder; n.out_arity()])
        .collect();
    for e in dag.edges() {
        let (from, to) = (index[&e.from], index[&e.to]);
        ds[from][e.from_port] = Link {
            unit: to,
            port: e.to_port,
        };
        us[to][e.to_port] = Link {
            unit: from,
            port: e.from_port,
        };
    }

    let names = hosted.iter().map(ToString::to_string).collect();
    let units = hosted
        .into_iter()
        .zip(us.into_iter().zip(ds))
        .enumerate()
        .map(|(pid, (hosted, (us, ds)))| {
            let hosted = Arc::new(hosted);
            let meta = behavior.and_then(|b| b.instantiate(&hosted));
            Unit {
                pid,
                hosted,
                us: us.into(),
                ds: ds.into(),
                state: Value::Unit,
                meta_state: Value::Unit,
                phase: Phase::Initial,
                meta,
            }
        })
        .collect();
    Ok(Plan {
        units,
        names,
        sink_labels,
    })
}

/// Deploys a closed DAG with a run-time behavior. The behavior named
/// `none` takes the meta-free path.
pub fn deploy<S: AsRef<str>>(
    dag: &Dag,
    bindings: impl IntoIterator<Item = (S, Endpoint)>,
    behavior: &Behavior,
    options: DeployOptions,
) -> Result<StreamHandle, DeployError> {
    let bindings = bindings
        .into_iter()
        .map(|(l, e)| (l.as_ref().to_string(), e))
        .collect();
    let behavior = (!behavior.is_none()).then_some(behavior);
    let plan = plan(dag, bindings, behavior)?;
    Ok(launch(plan, options))
}

/// Deploys without any meta-level machinery.
pub fn deploy_fast<S: AsRef<str>>(
    dag: &Dag,
    bindings: impl IntoIterator<Item = (S, Endpoint)>,
    options: DeployOptions,
) -> Result<StreamHandle, DeployError> {
    let bindings = bindings
        .into_iter()
        .map(|(l, e)| (l.as_ref().to_string(), e))
        .collect();
    let plan = plan(dag, bindings, None)?;
    Ok(launch(plan, options))
}

fn launch(plan: Plan, options: DeployOptions) -> StreamHandle {
    if options.deterministic {
        StreamHandle {
            inner: HandleInner::Done(Box::new(run_deterministic(plan, &options))),
        }
    } else {
        spawn_concurrent(plan, &options)
    }
}

fn undelivered(aborted: bool) -> StreamError {
    if aborted {
        StreamError::new("message budget exceeded")
    } else {
        StreamError::new("stream stalled before the sink completed")
    }
}

fn collect_outcome(
    sink_labels: &[Option<String>],
    mut deliveries: Vec<Option<Result<Value, StreamError>>>,
    aborted: bool,
    trace: Vec<TraceEntry>,
    units: Vec<UnitReport>,
    messages: u64,
) -> Outcome {
    let sinks = sink_labels
        .iter()
        .enumerate()
        .filter_map(|(pid, label)| {
            let label = label.clone()?;
            let result = deliveries[pid].take().unwrap_or_else(|| Err(undelivered(aborted)));
            Some((label, result))
        })
        .collect();
    Outcome {
        sinks,
        trace,
        units,
        messages,
    }
}

fn run_deterministic(plan: Plan, options: &DeployOptions) -> Outcome {
    let Plan {
        mut units,
        names,
        sink_labels,
    } = plan;
    let n = units.len();
    let mut mailboxes: Vec<VecDeque<(Option<UnitRef>, Event)>> =
        (0..n).map(|_| VecDeque::from([(None, Event::Init)])).collect();
    let mut deliveries: Vec<Option<Result<Value, StreamError>>> = vec![None; n];
    let mut trace = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut cursor = if n > 0 { rng.gen_range(0..n) } else { 0 };
    let mut seq = 0u64;
    let mut aborted = false;
    let mut effects = Vec::new();

    'run: while n > 0 {
        let Some(pid) = (0..n)
            .map(|k| (cursor + k) % n)
            .find(|u| !mailboxes[*u].is_empty())
        else {
            break 'run;
        };
        cursor = (pid + 1) % n;
        let (from, event) = mailboxes[pid].pop_front().unwrap();
        seq += 1;
        if seq > options.budget {
            aborted = true;
            break 'run;
        }
        if options.trace {
            trace.push(TraceEntry {
                seq,
                from,
                to: pid,
                event: event.clone(),
            });
        }
        units[pid].step(event, &mut effects);
        for effect in effects.drain(..) {
            match effect {
                Effect::Send { to, event } => mailboxes[to].push_back((Some(pid), event)),
                Effect::Deliver(result) => {
                    deliveries[pid].get_or_insert(result);
                }
                Effect::Finalize => {}
            }
        }
    }

    let reports = units
        .iter()
        .zip(names)
        .map(|(u, name)| UnitReport {
            name,
            phase: u.phase,
        })
        .collect();
    collect_outcome(&sink_labels, deliveries, aborted, trace, reports, seq.min(options.budget))
}

const STOP: usize = usize::MAX;
const BATCH: usize = 64;

struct Shared {
    units: Vec<Mutex<Unit>>,
    mailboxes: Vec<Mutex<VecDeque<(Option<UnitRef>, Event)>>>,
    scheduled: Vec<AtomicBool>,
    in_flight: AtomicUsize,
    processed: AtomicU64,
    aborted: AtomicBool,
    budget: u64,
    workers: usize,
    run_queue: crossbeam_channel::Sender<usize>,
    deliveries: Mutex<Vec<Option<Result<Value, StreamError>>>>,
    trace: Option<Mutex<Vec<TraceEntry>>>,
    done: (Mutex<bool>, Condvar),
}

impl Shared {
    fn send(&self, from: Option<UnitRef>, to: UnitRef, event: Event) {
        self.in_flight.fetch_add(1, Ordering::SeqCst);
        self.mailboxes[to].lock().unwrap().push_back((from, event));
        self.schedule(to);
    }

    fn schedule(&self, unit: UnitRef) {
        if !self.scheduled[unit].swap(true, Ordering::SeqCst) {
            let _ = self.run_queue.send(unit);
        }
    }

    fn finish_one(&self) {
        if self.in_flight.fetch_sub(1, Ordering::SeqCst) == 1 {
            self.quiesce();
        }
    }

    fn quiesce(&self) {
        for _ in 0..self.workers {
            let _ = self.run_queue.send(STOP);
        }
        let (lock, cvar) = &self.done;
        *lock.lock().unwrap() = true;
        cvar.notify_all();
    }

    fn work(&self, run_queue: crossbeam_channel::Receiver<usize>) {
        let mut effects = Vec::new();
        while let Ok(pid) = run_queue.recv() {
            if pid == STOP {
                break;
            }
            let mut unit = self.units[pid].lock().unwrap();
            for _ in 0..BATCH {
                let message = self.mailboxes[pid].lock().unwrap().pop_front();
                let Some((from, event)) = message else { break };
                let seq = self.processed.fetch_add(1, Ordering::SeqCst) + 1;
                if seq > self.budget {
                    self.aborted.store(true, Ordering::SeqCst);
                }
                if !self.aborted.load(Ordering::Relaxed) {
                    if let Some(trace) = &self.trace {
                        trace.lock().unwrap().push(TraceEntry {
                            seq,
                            from,
                            to: pid,
                            event: event.clone(),
                        });
                    }
                    unit.step(event, &mut effects);
                    for effect in effects.drain(..) {
                        match effect {
                            Effect::Send { to, event } => self.send(Some(pid), to, event),
                            Effect::Deliver(result) => {
                                self.deliveries.lock().unwrap()[pid].get_or_insert(result);
                            }
                            Effect::Finalize => {}
                        }
                    }
                }
                self.finish_one();
            }
            drop(unit);
            self.scheduled[pid].store(false, Ordering::SeqCst);
            if !self.mailboxes[pid].lock().unwrap().is_empty() {
                self.schedule(pid);
            }
        }
    }
}

fn spawn_concurrent(plan: Plan, options: &DeployOptions) -> StreamHandle {
    let Plan {
        units,
        names,
        sink_labels,
    } = plan;
    let n = units.len();
    let workers = options.workers.max(1);
    let (tx, rx) = crossbeam_channel::unbounded();
    let shared = Arc::new(Shared {
        units: units.into_iter().map(Mutex::new).collect(),
        mailboxes: (0..n).map(|_| Mutex::new(VecDeque::new())).collect(),
        scheduled: (0..n).map(|_| AtomicBool::new(false)).collect(),
        in_flight: AtomicUsize::new(0),
        processed: AtomicU64::new(0),
        aborted: AtomicBool::new(false),
        budget: options.budget,
        workers,
        run_queue: tx,
        deliveries: Mutex::new(vec![None; n]),
        trace: options.trace.then(|| Mutex::new(Vec::new())),
        done: (Mutex::new(false), Condvar::new()),
    });

    if n == 0 {
        shared.quiesce();
    } else {
        // Count every Init before any of them can be processed.
        shared.in_flight.store(n, Ordering::SeqCst);
        for pid in 0..n {
            shared.mailboxes[pid].lock().unwrap().push_back((None, Event::Init));
        }
        for pid in 0..n {
            shared.schedule(pid);
        }
    }

    let threads = (0..workers)
        .map(|_| {
            let shared = shared.clone();
            let rx = rx.clone();
            std::thread::spawn(move || shared.work(rx))
        })
        .collect();
    StreamHandle {
        inner: HandleInner::Running {
            shared,
            threads,
            names,
            sink_labels,
        },
    }
}

enum HandleInner {
    Done(Box<Outcome>),
    Running {
        shared: Arc<Shared>,
        threads: Vec<JoinHandle<()>>,
        names: Vec<String>,
        sink_labels: Vec<Option<String>>,
    },
}

/// A deployed stream. Waiting on it yields the terminal outcome.
pub struct StreamHandle {
    inner: HandleInner,
}

impl StreamHandle {
    /// Blocks until no message is pending anywhere in the deployment.
    pub fn wait(self) -> Outcome {
        match self.inner {
            HandleInner::Done(outcome) => *outcome,
            HandleInner::Running {
                shared,
                threads,
                names,
                sink_labels,
            } => {
                {
                    let (lock, cvar) = &shared.done;
                    let mut done = lock.lock().unwrap();
                    while !*done {
                        done = cvar.wait(done).unwrap();
                    }
                }
                for t in threads {
                    t.join().expect("worker panicked");
                }
                let units = shared
                    .units
                    .iter()
                    .zip(names)
                    .map(|(u, name)| UnitReport {
                        name,
                        phase: u.lock().unwrap().phase,
                    })
                    .collect();
                let deliveries = std::mem::take(&mut *shared.deliveries.lock().unwrap());
                let trace = shared
                    .trace
                    .as_ref()
                    .map(|t| std::mem::take(&mut *t.lock().unwrap()))
                    .unwrap_or_default();
                let aborted = shared.aborted.load(Ordering::SeqCst);
                let messages = shared.processed.load(Ordering::SeqCst).min(shared.budget);
                collect_outcome(&sink_labels, deliveries, aborted, trace, units, messages)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{chain, OperatorSpec};
    use crate::registry;

    fn op(spec: OperatorSpec) -> Dag {
        Dag::single(spec).unwrap()
    }

    fn f(name: &str) -> crate::value::Function {
        registry::get(name).unwrap()
    }

    fn run(dag: &Dag, source: SourceSpec, options: DeployOptions) -> Outcome {
        deploy_fast(
            dag,
            [
                ("in", Endpoint::Source(source)),
                ("out", Endpoint::Sink(SinkSpec::CollectAll)),
            ],
            options,
        )
        .unwrap()
        .wait()
    }

    fn ints(v: &Value) -> Vec<i64> {
        v.as_list().unwrap().iter().map(|x| x.as_int().unwrap()).collect()
    }

    #[test]
    fn even_squares_on_both_executors() {
        let dag = chain([&op(OperatorSpec::filter(f("even"))), &op(OperatorSpec::map(f("square")))])
            .unwrap()
            .close(&["in", "out"])
            .unwrap();
        let expected: Vec<i64> = (1..=100).filter(|x| x % 2 == 0).map(|x| x * x).collect();
        for options in [DeployOptions::default(), DeployOptions::deterministic(3)] {
            let outcome = run(&dag, SourceSpec::range(1, 100), options);
            assert_eq!(ints(&outcome.into_single().unwrap()), expected);
        }
    }

    #[test]
    fn push_trace_of_small_range() {
        let dag = Dag::new().close::<&str>(&[]).unwrap();
        assert_eq!(dag.node_count(), 0);
        let dag = op(OperatorSpec::map(f("identity"))).close(&["in", "out"]).unwrap();
        let outcome = run(&dag, SourceSpec::range(1, 2), DeployOptions::deterministic(0));
        let ticks = outcome
            .trace
            .iter()
            .filter(|e| matches!(e.event, Event::Tick))
            .count();
        // two productions plus the tick answered by completion
        assert_eq!(ticks, 3);
        assert!(outcome.units.iter().all(|u| u.phase == Phase::Final));
    }

    #[test]
    fn errors_reach_the_sink_once() {
        let boom = crate::value::Function::unary("boom", |v| {
            if v.as_int() == Some(3) {
                Err(StreamError::new("three"))
            } else {
                Ok(v.clone())
            }
        });
        let dag = op(OperatorSpec::map(boom)).close(&["in", "out"]).unwrap();
        for options in [DeployOptions::default(), DeployOptions::deterministic(1)] {
            let outcome = run(&dag, SourceSpec::range(1, 10), options);
            assert_eq!(outcome.into_single(), Err(StreamError::new("three")));
        }
    }

    #[test]
    fn deploy_checks_bindings() {
        let dag = op(OperatorSpec::map(f("inc"))).close(&["in", "out"]).unwrap();
        let missing = deploy_fast(
            &dag,
            [("in", Endpoint::Source(SourceSpec::range(1, 2)))],
            DeployOptions::default(),
        );
        assert!(matches!(missing, Err(DeployError::Unbound(l)) if l == "out"));
        let swapped = deploy_fast(
            &dag,
            [
                ("out", Endpoint::Source(SourceSpec::range(1, 2))),
                ("in", Endpoint::Sink(SinkSpec::CollectAll)),
            ],
            DeployOptions::default(),
        );
        assert!(matches!(swapped, Err(DeployError::Direction(_))));
        let open = op(OperatorSpec::map(f("inc")));
        let r = deploy_fast(&open, Vec::<(&str, Endpoint)>::new(), DeployOptions::default());
        assert!(matches!(r, Err(DeployError::Invalid(_))));
    }

    #[test]
    fn final_units_drop_messages() {
        let hosted = Arc::new(Hosted::Operator(OperatorKind::Map(f("inc"))));
        let mut unit = Unit {
            pid: 0,
            hosted,
            us: Arc::from(vec![Link { unit: 1, port: 0 }]),
            ds: Arc::from(vec![Link { unit: 2, port: 0 }]),
            state: Value::Unit,
            meta_state: Value::Unit,
            phase: Phase::Initial,
            meta: None,
        };
        let mut out = Vec::new();
        unit.step(Event::Init, &mut out);
        unit.step(Event::Complete { from: 1, port: 0 }, &mut out);
        assert_eq!(unit.phase, Phase::Final);
        out.clear();
        unit.step(
            Event::Next {
                value: Value::Int(1),
                from: 1,
                port: 0,
            },
            &mut out,
        );
        assert!(out.is_empty());
    }

    #[test]
    fn budget_aborts() {
        let dag = op(OperatorSpec::map(f("identity"))).close(&["in", "out"]).unwrap();
        for deterministic in [false, true] {
            let options = DeployOptions {
                deterministic,
                budget: 20,
                ..DeployOptions::default()
            };
            let outcome = run(&dag, SourceSpec::range(1, 1000), options);
            assert_eq!(outcome.into_single(), Err(StreamError::new("message budget exceeded")));
        }
    }

    #[test]
    fn local_network_keeps_state() {
        let scan = op(OperatorSpec::scan(f("sum"), Value::Int(0)));
        let dag = chain([&op(OperatorSpec::filter(f("odd"))), &scan])
            .unwrap()
            .close(&["src", "snk"])
            .unwrap();
        let mut net = LocalNetwork::new(&dag).unwrap();
        assert_eq!(net.push(Value::Int(1)).unwrap(), vec![Value::Int(1)]);
        assert_eq!(net.push(Value::Int(2)).unwrap(), vec![]);
        assert_eq!(net.push(Value::Int(3)).unwrap(), vec![Value::Int(4)]);
    }

    #[test]
    fn local_network_fans_out_in_port_order() {
        let body = chain([
            &op(OperatorSpec::dup(2).unwrap()),
            &crate::graph::compose_horizontal(
                &op(OperatorSpec::map(f("inc"))),
                &op(OperatorSpec::map(f("double"))),
            )
            .unwrap(),
            &op(OperatorSpec::merge(2).unwrap()),
        ])
        .unwrap();
        let mut net = LocalNetwork::new(&body.close(&["src", "snk"]).unwrap()).unwrap();
        assert_eq!(net.push(Value::Int(5)).unwrap(), vec![Value::Int(6), Value::Int(10)]);
        let two_sinks = op(OperatorSpec::dup(2).unwrap()).close(&["a", "b", "c"]).unwrap();
        assert!(matches!(LocalNetwork::new(&two_sinks), Err(NetworkError::Sockets)));
    }
}
