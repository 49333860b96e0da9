//! Base-level event handlers.
//!
//! Every handler is a pure function of its argument, the operator state and
//! the incoming value. The runtime owns the state and turns the returned
//! [`Action`] into protocol messages.

use std::fmt;
use std::sync::Arc;

use crate::graph::{OperatorKind, Stage};
use crate::value::{Function, StreamError, Value};

/// Which output ports an emitted value goes to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Port(usize),
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Emit { value: Value, route: Route },
    Skip,
    Complete,
    Fail(StreamError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandlerResponse {
    pub state: Value,
    pub action: Action,
}

impl HandlerResponse {
    fn emit(state: Value, value: Value, route: Route) -> HandlerResponse {
        HandlerResponse {
            state,
            action: Action::Emit { value, route },
        }
    }

    fn skip(state: Value) -> HandlerResponse {
        HandlerResponse {
            state,
            action: Action::Skip,
        }
    }

    fn fail(state: Value, error: StreamError) -> HandlerResponse {
        HandlerResponse {
            state,
            action: Action::Fail(error),
        }
    }
}

pub fn map_on_next(f: &Function, state: Value, value: Value) -> HandlerResponse {
    match f.call(value) {
        Ok(out) => HandlerResponse::emit(state, out, Route::Port(0)),
        Err(e) => HandlerResponse::fail(state, e),
    }
}

pub fn filter_on_next(pred: &Function, state: Value, value: Value) -> HandlerResponse {
    match pred.call_ref(&value) {
        Ok(keep) if keep.truthy() => HandlerResponse::emit(state, value, Route::Port(0)),
        Ok(_) => HandlerResponse::skip(state),
        Err(e) => HandlerResponse::fail(state, e),
    }
}

/// Emits `f(acc, value)` and keeps it as the new accumulator. The seed
/// itself is never emitted.
pub fn scan_on_next(f: &Function, acc: Value, value: Value) -> HandlerResponse {
    match f.call2(&acc, &value) {
        Ok(next) => HandlerResponse::emit(next.clone(), next, Route::Port(0)),
        Err(e) => HandlerResponse::fail(acc, e),
    }
}

/// Copies the value to every output port, in ascending port order.
pub fn dup_on_next(_n: usize, state: Value, value: Value) -> HandlerResponse {
    HandlerResponse::emit(state, value, Route::All)
}

/// Round-robin over the output ports, starting at port 0.
pub fn balance_on_next(n: usize, cursor: Value, value: Value) -> HandlerResponse {
    let port = cursor.as_int().unwrap_or(0).rem_euclid(n.max(1) as i64);
    let next = Value::Int((port + 1) % n.max(1) as i64);
    HandlerResponse::emit(next, value, Route::Port(port as usize))
}

pub fn merge_on_next(_n: usize, state: Value, value: Value, _from_port: usize) -> HandlerResponse {
    HandlerResponse::emit(state, value, Route::Port(0))
}

fn zip_buffers(state: &Value) -> (Vec<Value>, Vec<Value>) {
    match state {
        Value::Tuple(parts) if parts.len() == 2 => {
            let take = |v: &Value| v.as_list().map(<[Value]>::to_vec).unwrap_or_default();
            (take(&parts[0]), take(&parts[1]))
        }
        _ => (Vec::new(), Vec::new()),
    }
}

fn zip_state(left: Vec<Value>, right: Vec<Value>) -> Value {
    Value::Tuple(Arc::from(vec![Value::list(left), Value::list(right)]))
}

/// Queues the value on its side and emits a pair once both sides hold one.
pub fn zip_on_next(buffers: Value, value: Value, from_port: usize) -> HandlerResponse {
    let (mut left, mut right) = zip_buffers(&buffers);
    if from_port == 0 {
        left.push(value);
    } else {
        right.push(value);
    }
    if !left.is_empty() && !right.is_empty() {
        let pair = Value::pair(left.remove(0), right.remove(0));
        HandlerResponse::emit(zip_state(left, right), pair, Route::Port(0))
    } else {
        HandlerResponse::skip(zip_state(left, right))
    }
}

/// Runs fused map/filter steps in order; a failing filter drops the value.
pub fn fused_on_next(stages: &[Stage], state: Value, value: Value) -> HandlerResponse {
    let mut current = value;
    for stage in stages {
        match stage {
            Stage::Map(f) => match f.call(current) {
                Ok(v) => current = v,
                Err(e) => return HandlerResponse::fail(state, e),
            },
            Stage::Filter(p) => match p.call_ref(&current) {
                Ok(keep) if keep.truthy() => {}
                Ok(_) => return HandlerResponse::skip(state),
                Err(e) => return HandlerResponse::fail(state, e),
            },
        }
    }
    HandlerResponse::emit(state, current, Route::Port(0))
}

impl OperatorKind {
    pub fn initial_state(&self) -> Value {
        match self {
            OperatorKind::Scan { init, .. } => init.clone(),
            OperatorKind::Balance(_) | OperatorKind::Merge(_) => Value::Int(0),
            OperatorKind::Zip => zip_state(Vec::new(), Vec::new()),
            _ => Value::Unit,
        }
    }

    pub fn on_next(&self, state: Value, value: Value, from_port: usize) -> HandlerResponse {
        match self {
            OperatorKind::Map(f) => map_on_next(f, state, value),
            OperatorKind::Filter(p) => filter_on_next(p, state, value),
            OperatorKind::Scan { f, .. } => scan_on_next(f, state, value),
            OperatorKind::Dup(n) => dup_on_next(*n, state, value),
            OperatorKind::Balance(n) => balance_on_next(*n, state, value),
            OperatorKind::Merge(n) => merge_on_next(*n, state, value, from_port),
            OperatorKind::Zip => zip_on_next(state, value, from_port),
            OperatorKind::Fused(stages) => fused_on_next(stages, state, value),
        }
    }

    /// Merge waits for every input to complete; everything else (zip
    /// included) completes on the first `complete`.
    pub fn on_complete(&self, state: Value, _from_port: usize) -> HandlerResponse {
        match self {
            OperatorKind::Merge(n) => {
                let done = state.as_int().unwrap_or(0) + 1;
                let action = if done >= *n as i64 {
                    Action::Complete
                } else {
                    Action::Skip
                };
                HandlerResponse {
                    state: Value::Int(done),
                    action,
                }
            }
            _ => HandlerResponse {
                state,
                action: Action::Complete,
            },
        }
    }

    /// The first error wins; the runtime stops the operator afterwards.
    pub fn on_error(&self, state: Value, error: StreamError, _from_port: usize) -> HandlerResponse {
        HandlerResponse::fail(state, error)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SourceAction {
    Produced(Value),
    Complete,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceResponse {
    pub state: Value,
    pub action: SourceAction,
}

/// Built-in source actors.
#[derive(Clone, Debug, PartialEq)]
pub enum SourceSpec {
    /// Every integer from `first` to `last`, both inclusive.
    Range { first: i64, last: i64 },
    List(Arc<Vec<Value>>),
}

impl SourceSpec {
    pub fn range(first: i64, last: i64) -> SourceSpec {
        SourceSpec::Range { first, last }
    }

    pub fn list(items: impl IntoIterator<Item = Value>) -> SourceSpec {
        SourceSpec::List(Arc::new(items.into_iter().collect()))
    }

    pub fn initial_state(&self) -> Value {
        match self {
            SourceSpec::Range { first, last } => Value::pair(Value::Int(*first), Value::Int(*last)),
            SourceSpec::List(_) => Value::Int(0),
        }
    }

    pub fn on_tick(&self, state: Value) -> SourceResponse {
        match self {
            SourceSpec::Range { .. } => source_range_on_tick(state),
            SourceSpec::List(items) => source_list_on_tick(items, state),
        }
    }
}

impl fmt::Display for SourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceSpec::Range { first, last } => write!(f, "range({first},{last})"),
            SourceSpec::List(items) => write!(f, "list({})", Value::List(items.clone())),
        }
    }
}

/// State is the pair `(next, last)`.
pub fn source_range_on_tick(state: Value) -> SourceResponse {
    let (next, last) = match &state {
        Value::Tuple(parts) if parts.len() == 2 => (parts[0].as_int(), parts[1].as_int()),
        _ => (None, None),
    };
    match (next, last) {
        (Some(next), Some(last)) if next <= last => SourceResponse {
            state: Value::pair(Value::Int(next + 1), Value::Int(last)),
            action: SourceAction::Produced(Value::Int(next)),
        },
        _ => SourceResponse {
            state,
            action: SourceAction::Complete,
        },
    }
}

/// State is the position of the next item to produce.
pub fn source_list_on_tick(items: &[Value], state: Value) -> SourceResponse {
    let pos = state.as_int().unwrap_or(0).max(0) as usize;
    match items.get(pos) {
        Some(item) => SourceResponse {
            state: Value::Int(pos as i64 + 1),
            action: SourceAction::Produced(item.clone()),
        },
        None => SourceResponse {
            state,
            action: SourceAction::Complete,
        },
    }
}

pub type Callback = Arc<dyn Fn(&Value) + Send + Sync>;

#[derive(Clone)]
pub enum SinkSpec {
    /// Accumulates every value and delivers the list once, on completion.
    CollectAll,
    /// Calls the callback for each value; delivers unit on completion.
    ForEach(Callback),
}

impl fmt::Debug for SinkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SinkSpec::CollectAll => f.write_str("collect"),
            SinkSpec::ForEach(_) => f.write_str("foreach"),
        }
    }
}

/// What a sink sees of the protocol.
#[derive(Clone, Debug, PartialEq)]
pub enum SinkEvent {
    Next(Value),
    Complete,
    Err(StreamError),
}

impl SinkSpec {
    pub fn for_each(callback: impl Fn(&Value) + Send + Sync + 'static) -> SinkSpec {
        SinkSpec::ForEach(Arc::new(callback))
    }

    pub fn initial_state(&self) -> Value {
        match self {
            SinkSpec::CollectAll => Value::list([]),
            SinkSpec::ForEach(_) => Value::Unit,
        }
    }

    pub fn on_next(&self, mut state: Value, value: Value) -> Value {
        match self {
            SinkSpec::CollectAll => {
                if state.push(value.clone()).is_err() {
                    state = Value::list([value]);
                }
                state
            }
            SinkSpec::ForEach(callback) => {
                callback(&value);
                state
            }
        }
    }

    /// The value delivered on completion.
    pub fn outcome(&self, state: Value) -> Value {
        match self {
            SinkSpec::CollectAll => state,
            SinkSpec::ForEach(_) => Value::Unit,
        }
    }
}

/// One sink step: the new state, plus the delivery if this event ends the
/// stream.
pub fn sink_step(
    spec: &SinkSpec,
    state: Value,
    event: SinkEvent,
) -> (Value, Option<Result<Value, StreamError>>) {
    match event {
        SinkEvent::Next(v) => (spec.on_next(state, v), None),
        SinkEvent::Complete => (Value::Unit, Some(Ok(spec.outcome(state)))),
        SinkEvent::Err(e) => (Value::Unit, Some(Err(e))),
    }
}
