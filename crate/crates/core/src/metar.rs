//! Run-time meta-protocol: behaviors that intercept the messages a unit
//! receives.
//!
//! Under a [`Behavior`] every message a unit receives is reified into a
//! [`MetaValue::Event`] and pushed through a meta-DAG. The meta-DAG decides
//! whether and how to call the base-level handler ([`call_base`]) and which
//! messages to send ([`propagate_down`], [`propagate_up`],
//! [`propagate_self`], [`apply_effects`]). It must emit exactly one
//! [`MetaValue::Done`], whose snapshot becomes the unit's new state.
//!
//! Meta-DAGs are ordinary DAGs over meta values, so they are built with the
//! same composition functions as base programs:
//!
//! ```
//! use metastream::graph::chain;
//! use metastream::metar::{base_dag, effects_dag, Behavior};
//!
//! let plain = chain([&base_dag(), &effects_dag()]).unwrap().close(&["src", "snk"]).unwrap();
//! let behavior = Behavior::new("plain", plain.clone(), plain.clone(), plain).unwrap();
//! assert_eq!(behavior.name(), "plain");
//! ```

use std::fmt;
use std::sync::{Arc, Mutex};

use crate::graph::{chain, compose_horizontal, Dag, OperatorSpec};
use crate::instrument;
use crate::runtime::{
    call_base as base_handler, default_effects, BaseResponse, Effect, Event, Hosted, Link,
    LocalNetwork, NetworkError, Signal, Snapshot, UnitRef,
};
use crate::value::{ExtValue, Function, StreamError, Value};

/// Per-unit context shared by every meta-event of that unit. Effects are
/// buffered here and flushed by the runtime once the meta run delivered
/// its snapshot.
pub struct MetaCtx {
    hosted: Arc<Hosted>,
    effects: Mutex<Vec<Effect>>,
}

impl MetaCtx {
    pub(crate) fn new(hosted: Arc<Hosted>) -> MetaCtx {
        MetaCtx {
            hosted,
            effects: Mutex::new(Vec::new()),
        }
    }

    pub fn hosted(&self) -> &Hosted {
        &self.hosted
    }

    fn push(&self, effect: Effect) {
        self.effects.lock().unwrap().push(effect);
    }

    pub(crate) fn take_effects(&self) -> Vec<Effect> {
        std::mem::take(&mut *self.effects.lock().unwrap())
    }
}

impl fmt::Debug for MetaCtx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ctx({})", self.hosted)
    }
}

/// Values flowing through a run-time meta-DAG.
#[derive(Clone)]
pub enum MetaValue {
    /// A reified incoming message.
    Event {
        snapshot: Snapshot,
        event: Event,
        ctx: Arc<MetaCtx>,
    },
    /// The base-level handler ran.
    Response {
        snapshot: Snapshot,
        event: Event,
        response: BaseResponse,
        ctx: Arc<MetaCtx>,
    },
    /// The final snapshot, installed as the unit's new state.
    Done { snapshot: Snapshot, ctx: Arc<MetaCtx> },
}

impl MetaValue {
    pub(crate) fn event(snapshot: Snapshot, event: Event, ctx: Arc<MetaCtx>) -> Value {
        instrument::meta_event_created();
        Value::ext(MetaValue::Event {
            snapshot,
            event,
            ctx,
        })
    }

    pub fn snapshot(&self) -> &Snapshot {
        match self {
            MetaValue::Event { snapshot, .. }
            | MetaValue::Response { snapshot, .. }
            | MetaValue::Done { snapshot, .. } => snapshot,
        }
    }

    pub fn snapshot_mut(&mut self) -> &mut Snapshot {
        match self {
            MetaValue::Event { snapshot, .. }
            | MetaValue::Response { snapshot, .. }
            | MetaValue::Done { snapshot, .. } => snapshot,
        }
    }

    pub fn ctx(&self) -> &Arc<MetaCtx> {
        match self {
            MetaValue::Event { ctx, .. }
            | MetaValue::Response { ctx, .. }
            | MetaValue::Done { ctx, .. } => ctx,
        }
    }

    /// The incoming message, unless the run already finished.
    pub fn incoming(&self) -> Option<&Event> {
        match self {
            MetaValue::Event { event, .. } | MetaValue::Response { event, .. } => Some(event),
            MetaValue::Done { .. } => None,
        }
    }

    pub fn response(&self) -> Option<&BaseResponse> {
        match self {
            MetaValue::Response { response, .. } => Some(response),
            _ => None,
        }
    }
}

impl fmt::Debug for MetaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pid = self.snapshot().pid;
        match self {
            MetaValue::Event { event, .. } => write!(f, "meta-event(u{pid} {event})"),
            MetaValue::Response { response, .. } => {
                write!(f, "meta-response(u{pid} {})", response.tag())
            }
            MetaValue::Done { .. } => write!(f, "meta-done(u{pid})"),
        }
    }
}

impl ExtValue for MetaValue {
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn into_any(self: Arc<Self>) -> Arc<dyn std::any::Any + Send + Sync> {
        self
    }
}

fn send(ctx: &MetaCtx, pid: UnitRef, links: &[Link], signal: &Signal) {
    for link in links {
        ctx.push(Effect::Send {
            to: link.unit,
            event: signal.clone().address(pid, link.port),
        });
    }
}

/// Sends `signal` to every operator connected to an output port.
pub fn propagate_down(ctx: &MetaCtx, snapshot: &Snapshot, signal: Signal) {
    send(ctx, snapshot.pid, &snapshot.ds, &signal);
}

/// Sends `signal` to every operator connected to an input port.
pub fn propagate_up(ctx: &MetaCtx, snapshot: &Snapshot, signal: Signal) {
    send(ctx, snapshot.pid, &snapshot.us, &signal);
}

/// Sends `signal` to the operators connected to the given input ports.
pub fn propagate_up_ports(ctx: &MetaCtx, snapshot: &Snapshot, ports: &[usize], signal: Signal) {
    for &p in ports {
        if let Some(link) = snapshot.us.get(p) {
            send(ctx, snapshot.pid, std::slice::from_ref(link), &signal);
        }
    }
}

pub fn propagate_self(ctx: &MetaCtx, snapshot: &Snapshot, signal: Signal) {
    ctx.push(Effect::Send {
        to: snapshot.pid,
        event: signal.address(snapshot.pid, 0),
    });
}

/// The operator state the meta value carries.
pub fn state(meta: &MetaValue) -> &Value {
    &meta.snapshot().state
}

fn unexpected(stage: &str, meta: &MetaValue) -> StreamError {
    StreamError::new(format!("{stage}: unexpected {meta:?}"))
}

/// Calls the base-level handler for the reified event.
pub fn call_base(meta: MetaValue) -> Result<MetaValue, StreamError> {
    match meta {
        MetaValue::Event {
            mut snapshot,
            event,
            ctx,
        } => {
            let state = std::mem::take(&mut snapshot.state);
            let (state, response) = base_handler(&ctx.hosted, state, event.clone());
            snapshot.state = state;
            Ok(MetaValue::Response {
                snapshot,
                event,
                response,
                ctx,
            })
        }
        other => Err(unexpected("base", &other)),
    }
}

/// Executes the default effects of a handler response.
pub fn apply_effects(meta: MetaValue) -> Result<MetaValue, StreamError> {
    match meta {
        MetaValue::Response {
            mut snapshot,
            response,
            ctx,
            ..
        } => {
            {
                let mut buffer = ctx.effects.lock().unwrap();
                default_effects(
                    &ctx.hosted,
                    snapshot.pid,
                    &snapshot.ds,
                    &mut snapshot.state,
                    response,
                    &mut buffer,
                );
            }
            Ok(MetaValue::Done { snapshot, ctx })
        }
        other => Err(unexpected("effects", &other)),
    }
}

/// Ends the run without any effects.
pub fn finish(meta: MetaValue) -> Result<MetaValue, StreamError> {
    match meta {
        MetaValue::Event { snapshot, ctx, .. } | MetaValue::Response { snapshot, ctx, .. } => {
            Ok(MetaValue::Done { snapshot, ctx })
        }
        done => Ok(done),
    }
}

/// A meta stage: a function over meta values that moves its input.
pub fn stage(
    name: &str,
    f: impl Fn(MetaValue) -> Result<MetaValue, StreamError> + Send + Sync + 'static,
) -> Function {
    let label = name.to_string();
    Function::owned(name, move |v| {
        let meta = v
            .downcast::<MetaValue>()
            .map_err(|v| StreamError::new(format!("{label}: expected a meta value, got {v}")))?;
        f(meta).map(Value::ext)
    })
}

/// A predicate over meta values; anything else is rejected.
pub fn when(name: &str, pred: impl Fn(&MetaValue) -> bool + Send + Sync + 'static) -> Function {
    Function::unary(name, move |v| {
        Ok(Value::Bool(v.downcast_ref::<MetaValue>().is_some_and(&pred)))
    })
}

fn map_dag(f: Function) -> Dag {
    Dag::single(OperatorSpec::map(f)).unwrap()
}

fn filter_dag(f: Function) -> Dag {
    Dag::single(OperatorSpec::filter(f)).unwrap()
}

/// `map(base)`: calls the event handler and yields its response.
pub fn base_dag() -> Dag {
    map_dag(stage("base", call_base))
}

/// `map(effects)`: executes the response and yields the final snapshot.
pub fn effects_dag() -> Dag {
    map_dag(stage("effects", apply_effects))
}

fn finish_dag() -> Dag {
    map_dag(stage("finish", finish))
}

/// Chains single-in single-out stages.
pub fn line(stages: &[&Dag]) -> Dag {
    chain(stages.iter().copied()).expect("meta stages are single-in single-out")
}

/// `filter(pred) ~> stages…`
pub fn arm(pred: Function, stages: &[&Dag]) -> Dag {
    let guard = filter_dag(pred);
    let mut all = vec![&guard];
    all.extend_from_slice(stages);
    line(&all)
}

/// `dup(k) ~> (arm_1 ||| … ||| arm_k) ~> merge(k)`. The arms' guards must
/// select exactly one arm per value.
pub fn branches(arms: Vec<Dag>) -> Dag {
    let k = arms.len();
    let body = arms
        .into_iter()
        .reduce(|acc, arm| compose_horizontal(&acc, &arm).unwrap())
        .expect("at least one arm");
    line(&[
        &Dag::single(OperatorSpec::dup(k).unwrap()).unwrap(),
        &body,
        &Dag::single(OperatorSpec::merge(k).unwrap()).unwrap(),
    ])
}

fn close(body: Dag) -> Dag {
    body.close(&["src", "snk"]).expect("meta body is single-in single-out")
}

fn standard() -> Dag {
    close(line(&[&base_dag(), &effects_dag()]))
}

struct Metas {
    operator: Dag,
    source: Dag,
    sink: Dag,
    networks: [LocalNetwork; 3],
}

/// A run-time behavior: one closed meta-DAG each for operators, sources and
/// sinks.
#[derive(Clone)]
pub struct Behavior {
    name: String,
    metas: Option<Arc<Metas>>,
}

impl fmt::Debug for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Behavior({})", self.name)
    }
}

impl Behavior {
    /// No meta level at all: deployments take the fast path.
    pub fn none() -> Behavior {
        Behavior {
            name: "none".to_string(),
            metas: None,
        }
    }

    pub fn new(
        name: impl Into<String>,
        operator: Dag,
        source: Dag,
        sink: Dag,
    ) -> Result<Behavior, NetworkError> {
        let networks = [
            LocalNetwork::new(&operator)?,
            LocalNetwork::new(&source)?,
            LocalNetwork::new(&sink)?,
        ];
        Ok(Behavior {
            name: name.into(),
            metas: Some(Arc::new(Metas {
                operator,
                source,
                sink,
                networks,
            })),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn is_none(&self) -> bool {
        self.metas.is_none()
    }

    /// The meta-DAGs for operators, sources and sinks.
    pub fn meta_dags(&self) -> Option<(&Dag, &Dag, &Dag)> {
        self.metas.as_ref().map(|m| (&m.operator, &m.source, &m.sink))
    }

    pub(crate) fn instantiate(&self, hosted: &Arc<Hosted>) -> Option<(LocalNetwork, Arc<MetaCtx>)> {
        let metas = self.metas.as_ref()?;
        let network = match **hosted {
            Hosted::Operator(_) => &metas.networks[0],
            Hosted::Source(_) => &metas.networks[1],
            Hosted::Sink(_) => &metas.networks[2],
        };
        Some((network.clone(), Arc::new(MetaCtx::new(hosted.clone()))))
    }
}

/// `src ~> base ~> effects ~> snk` everywhere, with the two stages fused
/// into one at construction.
pub fn identity() -> Behavior {
    let fused = crate::metac::compile(&standard(), Some(&crate::metac::fusion_meta()))
        .expect("base and effects fuse");
    Behavior::new("identity", fused.clone(), fused.clone(), fused).unwrap()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub unit: UnitRef,
    pub tag: &'static str,
    pub value: Value,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{} {} {}", self.unit, self.tag, self.value)
    }
}

/// Where the logging behavior writes its records.
#[derive(Clone, Debug)]
pub enum LogSink {
    Memory(Arc<Mutex<Vec<LogRecord>>>),
    Stderr,
}

impl LogSink {
    pub fn memory() -> LogSink {
        LogSink::Memory(Arc::default())
    }

    pub fn records(&self) -> Vec<LogRecord> {
        match self {
            LogSink::Memory(records) => records.lock().unwrap().clone(),
            LogSink::Stderr => Vec::new(),
        }
    }

    fn record(&self, record: LogRecord) {
        match self {
            LogSink::Memory(records) => records.lock().unwrap().push(record),
            LogSink::Stderr => eprintln!("{record}"),
        }
    }
}

/// Identity plus a tap recording every value a unit receives, and every
/// value a source produces.
pub fn logging(log: LogSink) -> Behavior {
    let incoming = {
        let log = log.clone();
        map_dag(stage("log_next", move |meta| {
            if let Some(Event::Next { value, .. }) = meta.incoming() {
                log.record(LogRecord {
                    unit: meta.snapshot().pid,
                    tag: "next",
                    value: value.clone(),
                });
            }
            Ok(meta)
        }))
    };
    let produced = map_dag(stage("log_tick", move |meta| {
        if let Some(BaseResponse::TickValue(value)) = meta.response() {
            log.record(LogRecord {
                unit: meta.snapshot().pid,
                tag: "next",
                value: value.clone(),
            });
        }
        Ok(meta)
    }));
    let consumer = close(line(&[&incoming, &base_dag(), &effects_dag()]));
    let source = close(line(&[&base_dag(), &produced, &effects_dag()]));
    Behavior::new("logging", consumer.clone(), source, consumer).unwrap()
}

fn is(tag: &'static str) -> Function {
    when(tag, move |m| m.incoming().is_some_and(|e| e.tag() == tag))
}

fn is_not(tags: &'static [&'static str]) -> Function {
    when("other", move |m| {
        m.incoming().is_some_and(|e| !tags.contains(&e.tag()))
    })
}

fn demand_upstream(meta: MetaValue) -> Result<MetaValue, StreamError> {
    propagate_up(meta.ctx(), meta.snapshot(), Signal::Demand);
    finish(meta)
}

/// Sources tick only when asked to.
fn pull_source() -> Dag {
    let tick_self = map_dag(stage("tick_self", |meta| {
        propagate_self(meta.ctx(), meta.snapshot(), Signal::Tick);
        finish(meta)
    }));
    let no_self_tick = map_dag(stage("emit_once", |meta| match meta {
        MetaValue::Response {
            snapshot,
            response: BaseResponse::TickValue(v),
            ctx,
            ..
        } => {
            propagate_down(&ctx, &snapshot, Signal::Next(v));
            Ok(MetaValue::Done { snapshot, ctx })
        }
        other => apply_effects(other),
    }));
    close(branches(vec![
        arm(is("init"), &[&base_dag(), &finish_dag()]),
        arm(is("demand"), &[&tick_self]),
        arm(is("tick"), &[&base_dag(), &no_self_tick]),
        arm(is_not(&["init", "demand", "tick"]), &[&base_dag(), &effects_dag()]),
    ]))
}

/// Sinks demand once initialised and after every value.
fn pull_sink() -> Dag {
    let demand_after = map_dag(stage("demand", |meta| {
        propagate_up(meta.ctx(), meta.snapshot(), Signal::Demand);
        Ok(meta)
    }));
    let is_init_or_next = when("init_or_next", |m| {
        m.incoming().is_some_and(|e| matches!(e, Event::Init | Event::Next { .. }))
    });
    close(branches(vec![
        arm(is_init_or_next, &[&base_dag(), &effects_dag(), &demand_after]),
        arm(is_not(&["init", "next"]), &[&base_dag(), &effects_dag()]),
    ]))
}

/// Pull-based propagation: sinks demand, operators forward demand
/// upstream, sources tick on demand.
pub fn pull() -> Behavior {
    let redemand_on_skip = map_dag(stage("redemand_on_skip", |meta| {
        if matches!(meta.response(), Some(BaseResponse::Skip)) {
            propagate_up(meta.ctx(), meta.snapshot(), Signal::Demand);
        }
        Ok(meta)
    }));
    let operator = close(branches(vec![
        arm(is("demand"), &[&map_dag(stage("demand_upstream", demand_upstream))]),
        arm(is("next"), &[&base_dag(), &redemand_on_skip, &effects_dag()]),
        arm(is_not(&["demand", "next"]), &[&base_dag(), &effects_dag()]),
    ]));
    Behavior::new("pull", operator, pull_source(), pull_sink()).unwrap()
}

/// Input ports with an outstanding demand, or closed for good.
fn demanded(snapshot: &Snapshot) -> Vec<usize> {
    snapshot
        .meta_state
        .as_list()
        .map(|ports| {
            ports
                .iter()
                .filter_map(Value::as_int)
                .map(|p| p as usize)
                .collect()
        })
        .unwrap_or_default()
}

fn set_demanded(snapshot: &mut Snapshot, mut ports: Vec<usize>) {
    ports.sort_unstable();
    ports.dedup();
    snapshot.meta_state = Value::list(ports.into_iter().map(|p| Value::Int(p as i64)));
}

/// Demands from every upstream that has no demand outstanding yet.
fn demand_missing(meta: &mut MetaValue) {
    let mut set = demanded(meta.snapshot());
    let missing: Vec<usize> = (0..meta.snapshot().us.len())
        .filter(|p| !set.contains(p))
        .collect();
    propagate_up_ports(meta.ctx(), meta.snapshot(), &missing, Signal::Demand);
    set.extend(missing);
    set_demanded(meta.snapshot_mut(), set);
}

fn incoming_port(meta: &MetaValue) -> Option<usize> {
    match meta.incoming()? {
        Event::Next { port, .. } | Event::Complete { port, .. } | Event::Err { port, .. } => {
            Some(*port)
        }
        _ => None,
    }
}

/// Pull that remembers which upstreams were already asked, so no upstream
/// ever holds two outstanding demands from the same operator.
pub fn smart_pull() -> Behavior {
    let demand = map_dag(stage("smart_demand", |mut meta| {
        demand_missing(&mut meta);
        finish(meta)
    }));
    let answered = map_dag(stage("answered", |mut meta| {
        if let Some(port) = incoming_port(&meta) {
            let set = demanded(meta.snapshot()).into_iter().filter(|p| *p != port).collect();
            set_demanded(meta.snapshot_mut(), set);
        }
        Ok(meta)
    }));
    let redemand_on_skip = map_dag(stage("smart_redemand", |mut meta| {
        if matches!(meta.response(), Some(BaseResponse::Skip)) {
            demand_missing(&mut meta);
        }
        Ok(meta)
    }));
    let closed_port = map_dag(stage("closed_port", |mut meta| {
        if let Some(port) = incoming_port(&meta) {
            let mut set = demanded(meta.snapshot());
            set.push(port);
            set_demanded(meta.snapshot_mut(), set);
        }
        Ok(meta)
    }));
    let operator = close(branches(vec![
        arm(is("demand"), &[&demand]),
        arm(is("next"), &[&answered, &base_dag(), &redemand_on_skip, &effects_dag()]),
        arm(is("complete"), &[&closed_port, &base_dag(), &effects_dag()]),
        arm(is_not(&["demand", "next", "complete"]), &[&base_dag(), &effects_dag()]),
    ]));
    Behavior::new("smartpull", operator, pull_source(), pull_sink()).unwrap()
}

/// A reversible value transformer.
pub trait Cipher: Send + Sync + 'static {
    fn encrypt(&self, value: Value) -> Value;
    fn decrypt(&self, value: Value) -> Value;
}

/// XOR of every integer with a key; tuples and lists are walked. XOR is
/// its own inverse.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct XorCipher(pub i64);

impl XorCipher {
    fn apply(&self, value: Value) -> Value {
        match value {
            Value::Int(i) => Value::Int(i ^ self.0),
            Value::Tuple(items) => {
                Value::Tuple(items.iter().cloned().map(|v| self.apply(v)).collect())
            }
            Value::List(items) => Value::list(items.iter().cloned().map(|v| self.apply(v))),
            other => other,
        }
    }
}

impl Cipher for XorCipher {
    fn encrypt(&self, value: Value) -> Value {
        self.apply(value)
    }

    fn decrypt(&self, value: Value) -> Value {
        self.apply(value)
    }
}

/// Values travel encrypted between units: sources encrypt what they
/// produce, operators decrypt before and encrypt after the handler, sinks
/// decrypt before the handler.
pub fn encryption(cipher: impl Cipher) -> Behavior {
    let cipher: Arc<dyn Cipher> = Arc::new(cipher);
    let decrypt = {
        let cipher = cipher.clone();
        map_dag(stage("decrypt", move |mut meta| {
            if let MetaValue::Event {
                event: Event::Next { value, .. },
                ..
            } = &mut meta
            {
                *value = cipher.decrypt(std::mem::take(value));
            }
            Ok(meta)
        }))
    };
    let encrypt = map_dag(stage("encrypt", move |mut meta| {
        if let MetaValue::Response { response, .. } = &mut meta {
            match response {
                BaseResponse::Emit { value, .. } | BaseResponse::TickValue(value) => {
                    *value = cipher.encrypt(std::mem::take(value));
                }
                _ => {}
            }
        }
        Ok(meta)
    }));
    let operator = close(line(&[&decrypt, &base_dag(), &encrypt, &effects_dag()]));
    let source = close(line(&[&base_dag(), &encrypt, &effects_dag()]));
    let sink = close(line(&[&decrypt, &base_dag(), &effects_dag()]));
    Behavior::new("encrypt", operator, source, sink).unwrap()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown behavior {0:?}; expected none, identity, logging, pull, smartpull or encrypt:<hexkey>")]
pub struct UnknownBehavior(pub String);

/// Looks a behavior up by name. `logging` writes to standard error.
pub fn by_name(name: &str) -> Result<Behavior, UnknownBehavior> {
    match name {
        "none" => Ok(Behavior::none()),
        "identity" => Ok(identity()),
        "logging" => Ok(logging(LogSink::Stderr)),
        "pull" => Ok(pull()),
        "smartpull" => Ok(smart_pull()),
        other => {
            let key = other
                .strip_prefix("encrypt:")
                .map(|k| k.trim_start_matches("0x").trim_start_matches("0X"))
                .and_then(|k| i64::from_str_radix(k, 16).ok())
                .ok_or_else(|| UnknownBehavior(other.to_string()))?;
            Ok(encryption(XorCipher(key)))
        }
    }
}
