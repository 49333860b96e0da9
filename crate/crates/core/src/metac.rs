//! Compile-time meta-protocol: DAG construction as a rewritable instruction
//! stream.
//!
//! A DAG is reified as a sequence of [`Instruction`]s. Compiling with a
//! structural behavior streams each instruction, paired with the DAG built
//! so far and the alias environment, through the behavior's meta-DAG. What
//! comes out is applied, and the final DAG has to pass validation.
//!
//! ```
//! use metastream::graph::{chain, Dag, OperatorSpec};
//! use metastream::metac::{compile, fusion_meta};
//! use metastream::registry;
//!
//! let square = Dag::single(OperatorSpec::map(registry::get("square").unwrap())).unwrap();
//! let inc = Dag::single(OperatorSpec::map(registry::get("inc").unwrap())).unwrap();
//! let program = chain([&square, &inc]).unwrap().close(&["in", "out"]).unwrap();
//!
//! let fused = compile(&program, Some(&fusion_meta())).unwrap();
//! assert_eq!(fused.operator_count(), 1);
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use crate::graph::{
    Dag, Edge, GraphError, Node, NodeId, OperatorKind, OperatorSpec, SocketDirection, Stage,
    Violation,
};
use crate::instrument;
use crate::metar::{arm, branches, line};
use crate::runtime::{LocalNetwork, NetworkError};
use crate::value::{ExtValue, Function, StreamError, Value};

/// How an instruction refers to a node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    Alias(String),
    Node(NodeId),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Alias(a) => f.write_str(a),
            Target::Node(id) => write!(f, "{id}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Instruction {
    /// Inserts an operator (or socket) node.
    AddOperator(Node),
    /// Aliases the node added last.
    NameIt(String),
    AddEdge {
        from: Target,
        from_port: usize,
        to: Target,
        to_port: usize,
    },
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Instruction::AddOperator(node) => {
                write!(f, "operator {}", node.token())?;
                if let Some(alias) = node.alias() {
                    write!(f, " {alias}")?;
                }
                Ok(())
            }
            Instruction::NameIt(alias) => write!(f, "name_it {alias}"),
            Instruction::AddEdge {
                from,
                from_port,
                to,
                to_port,
            } => write!(f, "edge {from}.{from_port} -> {to}.{to_port}"),
        }
    }
}

/// Aliases plus the node added last.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Env {
    pub aliases: BTreeMap<String, NodeId>,
    pub last: Option<NodeId>,
}

impl Env {
    /// Points every alias of `old` (and the last-added register) at `new`.
    pub fn rebind(&mut self, old: NodeId, new: NodeId) {
        for id in self.aliases.values_mut() {
            if *id == old {
                *id = new;
            }
        }
        if self.last == Some(old) {
            self.last = Some(new);
        }
    }
}

/// One datum of the compile-time meta stream.
#[derive(Clone, Debug)]
pub struct MetaItem {
    pub instr: Instruction,
    pub dag: Dag,
    pub env: Env,
}

impl MetaItem {
    pub fn new(instr: Instruction, dag: Dag, env: Env) -> MetaItem {
        instrument::meta_item_created();
        MetaItem { instr, dag, env }
    }
}

impl ExtValue for MetaItem {
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn into_any(self: Arc<Self>) -> Arc<dyn std::any::Any + Send + Sync> {
        self
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CompileError {
    #[error("unbound alias {0:?}")]
    UnknownAlias(String),
    #[error("node {0} no longer exists")]
    DeadNode(NodeId),
    #[error("name_it without a preceding operator")]
    NothingToName,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("meta-DAG failed: {0}")]
    Meta(StreamError),
    #[error("meta-DAG emitted {0}, expected instructions")]
    NotAnItem(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("program rejected: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Rejected(Vec<Violation>),
    #[error("cannot fuse {0} with {1}")]
    Unfusable(String, String),
    #[error("cannot swap {0} and {1}: arities differ")]
    SwapArity(String, String),
}

/// Reifies a DAG: nodes in topological order, each followed by a `name_it`
/// when an edge refers to it, then the edges ordered by their source node.
pub fn emit_instructions(dag: &Dag) -> Vec<Instruction> {
    let order = match dag.topological_order() {
        Ok(order) => order,
        Err(_) => dag.nodes().map(|(id, _)| id).collect(),
    };
    let position: BTreeMap<NodeId, usize> = order.iter().enumerate().map(|(i, id)| (*id, i)).collect();

    let mut uses: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, node) in dag.nodes() {
        if let Some(alias) = node.alias() {
            *uses.entry(alias).or_default() += 1;
        }
    }
    let mut taken: std::collections::BTreeSet<String> = uses
        .iter()
        .filter(|(_, n)| **n == 1)
        .map(|(a, _)| a.to_string())
        .collect();
    let mut names: BTreeMap<NodeId, String> = BTreeMap::new();
    for (k, id) in order.iter().enumerate() {
        let node = dag.node(*id).expect("ordered nodes exist");
        let name = match node.alias() {
            Some(alias) if uses[alias] == 1 => alias.to_string(),
            _ => {
                let mut name = format!("n{k}");
                while taken.contains(&name) {
                    name.push('\'');
                }
                taken.insert(name.clone());
                name
            }
        };
        names.insert(*id, name);
    }

    let connected: std::collections::BTreeSet<NodeId> =
        dag.edges().flat_map(|e| [e.from, e.to]).collect();
    let mut out = Vec::new();
    for id in &order {
        out.push(Instruction::AddOperator(dag.node(*id).unwrap().clone()));
        if connected.contains(id) {
            out.push(Instruction::NameIt(names[id].clone()));
        }
    }
    let mut edges: Vec<&Edge> = dag.edges().collect();
    edges.sort_by_key(|e| (position.get(&e.from), e.from_port, position.get(&e.to), e.to_port));
    for e in edges {
        out.push(Instruction::AddEdge {
            from: Target::Alias(names[&e.from].clone()),
            from_port: e.from_port,
            to: Target::Alias(names[&e.to].clone()),
            to_port: e.to_port,
        });
    }
    out
}

/// Resolves a reference to a live node.
pub fn resolve(dag: &Dag, env: &Env, target: &Target) -> Result<NodeId, CompileError> {
    let id = match target {
        Target::Alias(alias) => *env
            .aliases
            .get(alias)
            .ok_or_else(|| CompileError::UnknownAlias(alias.clone()))?,
        Target::Node(id) => *id,
    };
    if dag.contains(id) {
        Ok(id)
    } else {
        Err(CompileError::DeadNode(id))
    }
}

/// Applies one instruction to a partial DAG. A later `name_it` for an
/// existing alias shadows the earlier binding.
pub fn apply_instruction(
    instr: &Instruction,
    mut dag: Dag,
    mut env: Env,
) -> Result<(Dag, Env), CompileError> {
    match instr {
        Instruction::AddOperator(node) => {
            let id = dag.add_node(node.clone())?;
            env.last = Some(id);
        }
        Instruction::NameIt(alias) => {
            let last = env.last.ok_or(CompileError::NothingToName)?;
            env.aliases.insert(alias.clone(), last);
        }
        Instruction::AddEdge {
            from,
            from_port,
            to,
            to_port,
        } => {
            let from = resolve(&dag, &env, from)?;
            let to = resolve(&dag, &env, to)?;
            dag.add_edge(Edge::new(from, *from_port, to, *to_port))?;
        }
    }
    Ok((dag, env))
}

/// A structural behavior: a closed meta-DAG over [`MetaItem`] values.
#[derive(Clone, Debug)]
pub struct Structural {
    pub name: String,
    pub meta: Dag,
}

fn items(value: Value, out: &mut Vec<MetaItem>) -> Result<(), CompileError> {
    match value {
        Value::List(list) => {
            for v in Arc::try_unwrap(list).unwrap_or_else(|shared| (*shared).clone()) {
                items(v, out)?;
            }
            Ok(())
        }
        other => {
            let item = other
                .downcast::<MetaItem>()
                .map_err(|v| CompileError::NotAnItem(v.to_string()))?;
            out.push(item);
            Ok(())
        }
    }
}

/// Streams every instruction through the meta-DAG and applies whatever it
/// emits. The first item a step emits carries the working DAG forward;
/// further items of the same step are applied on top. A step that emits
/// nothing leaves the DAG as it was.
pub fn run_compile(instrs: Vec<Instruction>, meta: &Structural) -> Result<Dag, CompileError> {
    let mut network = LocalNetwork::new(&meta.meta)?;
    let (mut dag, mut env) = (Dag::new(), Env::default());
    for instr in instrs {
        let item = MetaItem::new(instr, dag.clone(), env.clone());
        let outputs = network.push(Value::ext(item)).map_err(CompileError::Meta)?;
        let mut emitted = Vec::new();
        for v in outputs {
            items(v, &mut emitted)?;
        }
        for (i, item) in emitted.into_iter().enumerate() {
            if i == 0 {
                dag = item.dag;
                env = item.env;
            }
            (dag, env) = apply_instruction(&item.instr, dag, env)?;
        }
    }
    dag.validate().map_err(CompileError::Rejected)?;
    Ok(dag)
}

/// Compiles a program. Without a structural behavior the meta pipeline is
/// bypassed entirely and only validation runs.
pub fn compile(dag: &Dag, structural: Option<&Structural>) -> Result<Dag, CompileError> {
    match structural {
        None => {
            dag.validate().map_err(CompileError::Rejected)?;
            Ok(dag.clone())
        }
        Some(meta) => run_compile(emit_instructions(dag), meta),
    }
}

/// An operator lifted out of the DAG.
#[derive(Clone, Debug, PartialEq)]
pub struct ReifiedOperator {
    pub id: NodeId,
    pub name: &'static str,
    pub node: Node,
}

impl ReifiedOperator {
    pub fn new(node: Node) -> ReifiedOperator {
        ReifiedOperator {
            id: NodeId::fresh(),
            name: node.kind_name(),
            node,
        }
    }

    fn label(&self) -> String {
        self.node
            .alias()
            .map(str::to_string)
            .unwrap_or_else(|| self.node.token())
    }
}

pub fn fetch(dag: &Dag, env: &Env, target: &Target) -> Result<ReifiedOperator, CompileError> {
    let id = resolve(dag, env, target)?;
    let node = dag.node(id).unwrap().clone();
    Ok(ReifiedOperator {
        id,
        name: node.kind_name(),
        node,
    })
}

fn stages_of(kind: &OperatorKind) -> Option<Vec<Stage>> {
    match kind {
        OperatorKind::Map(f) => Some(vec![Stage::Map(f.clone())]),
        OperatorKind::Filter(p) => Some(vec![Stage::Filter(p.clone())]),
        OperatorKind::Fused(stages) => Some(stages.to_vec()),
        _ => None,
    }
}

/// Fuses `a` followed by `b` into a fresh operator that is not yet part of
/// any DAG.
pub fn fuse(a: &ReifiedOperator, b: &ReifiedOperator) -> Result<ReifiedOperator, CompileError> {
    let unfusable = || CompileError::Unfusable(a.label(), b.label());
    let (Node::Operator(x), Node::Operator(y)) = (&a.node, &b.node) else {
        return Err(unfusable());
    };
    let kind = match (&x.kind, &y.kind) {
        (OperatorKind::Map(f), OperatorKind::Map(g)) => OperatorKind::Map(f.and_then(g)),
        (OperatorKind::Filter(p), OperatorKind::Filter(q)) => {
            let (p, q) = (p.clone(), q.clone());
            OperatorKind::Filter(Function::unary(format!("{p}&{q}"), move |v| {
                Ok(Value::Bool(p.call_ref(v)?.truthy() && q.call_ref(v)?.truthy()))
            }))
        }
        (k1, k2) => match (stages_of(k1), stages_of(k2)) {
            (Some(mut first), Some(second)) => {
                first.extend(second);
                OperatorKind::Fused(first.into())
            }
            _ => return Err(unfusable()),
        },
    };
    let spec = OperatorSpec::new(kind)?.with_alias(format!("fused({},{})", a.label(), b.label()));
    Ok(ReifiedOperator::new(Node::Operator(spec)))
}

/// Exchanges the payloads of two nodes; the edges stay where they are.
pub fn swap(dag: &mut Dag, a: NodeId, b: NodeId) -> Result<(), CompileError> {
    let na = dag.node(a).ok_or(GraphError::UnknownNode(a))?.clone();
    let nb = dag.node(b).ok_or(GraphError::UnknownNode(b))?.clone();
    if (na.in_arity(), na.out_arity()) != (nb.in_arity(), nb.out_arity()) {
        return Err(CompileError::SwapArity(na.token(), nb.token()));
    }
    dag.replace_node(a, nb)?;
    dag.replace_node(b, na)?;
    Ok(())
}

/// The nodes feeding `id`, by input port.
pub fn inputs(dag: &Dag, id: NodeId) -> Vec<ReifiedOperator> {
    let mut edges: Vec<&Edge> = dag.incoming(id).collect();
    edges.sort_by_key(|e| e.to_port);
    edges
        .into_iter()
        .filter_map(|e| {
            dag.node(e.from).map(|node| ReifiedOperator {
                id: e.from,
                name: node.kind_name(),
                node: node.clone(),
            })
        })
        .collect()
}

pub fn add(dag: &mut Dag, op: &ReifiedOperator) -> Result<(), CompileError> {
    dag.insert_node(op.id, op.node.clone())?;
    Ok(())
}

/// Removes a node and every edge touching it.
pub fn delete(dag: &mut Dag, id: NodeId) -> Result<ReifiedOperator, CompileError> {
    let node = dag.remove_node(id)?;
    Ok(ReifiedOperator {
        id,
        name: node.kind_name(),
        node,
    })
}

pub fn connect(
    dag: &mut Dag,
    from: NodeId,
    from_port: usize,
    to: NodeId,
    to_port: usize,
) -> Result<(), CompileError> {
    dag.add_edge(Edge::new(from, from_port, to, to_port))?;
    Ok(())
}

pub fn disconnect(
    dag: &mut Dag,
    from: NodeId,
    from_port: usize,
    to: NodeId,
    to_port: usize,
) -> Result<(), CompileError> {
    dag.remove_edge(&Edge::new(from, from_port, to, to_port))?;
    Ok(())
}

fn meta_error(e: CompileError) -> StreamError {
    StreamError::new(e.to_string())
}

/// A stage over meta items. It may return one item or a list of items.
pub fn item_stage(
    name: &str,
    f: impl Fn(MetaItem) -> Result<Value, CompileError> + Send + Sync + 'static,
) -> Function {
    let label = name.to_string();
    Function::owned(name, move |v| {
        let item = v
            .downcast::<MetaItem>()
            .map_err(|v| StreamError::new(format!("{label}: expected an instruction, got {v}")))?;
        f(item).map_err(meta_error)
    })
}

pub fn item_when(name: &str, pred: impl Fn(&MetaItem) -> bool + Send + Sync + 'static) -> Function {
    Function::unary(name, move |v| {
        Ok(Value::Bool(v.downcast_ref::<MetaItem>().is_some_and(&pred)))
    })
}

fn map_dag(f: Function) -> Dag {
    Dag::single(OperatorSpec::map(f)).unwrap()
}

fn proceed() -> Dag {
    map_dag(item_stage("proceed", |item| Ok(Value::ext(item))))
}

fn closed(body: Dag) -> Structural {
    Structural {
        name: String::new(),
        meta: body.close(&["src", "snk"]).expect("meta body is single-in single-out"),
    }
}

fn named(mut s: Structural, name: &str) -> Structural {
    s.name = name.to_string();
    s
}

/// Applies every instruction unchanged.
pub fn proceed_meta() -> Structural {
    named(closed(proceed()), "proceed")
}

/// Which operator pairs the fusion behavior merges.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionRules {
    /// `map ~> map` only.
    Maps,
    /// Any consecutive maps and filters.
    MapsAndFilters,
}

impl FusionRules {
    fn accepts(self, node: &Node) -> bool {
        match node {
            Node::Operator(op) if !op.parallel => match (self, &op.kind) {
                (_, OperatorKind::Map(_)) => true,
                (FusionRules::MapsAndFilters, OperatorKind::Filter(_) | OperatorKind::Fused(_)) => {
                    true
                }
                _ => false,
            },
            _ => false,
        }
    }
}

fn is_edge(item: &MetaItem) -> bool {
    matches!(item.instr, Instruction::AddEdge { .. })
}

/// Rewrites `edge a -> b` between fusable operators: both are deleted, the
/// fused operator takes their place, and the edge into `a` is redirected
/// to it. Aliases of `a` and `b` now name the fused operator, so a chain
/// collapses one edge at a time.
fn fuse_edge(rules: FusionRules, mut item: MetaItem) -> Result<Value, CompileError> {
    let Instruction::AddEdge { from, to, .. } = &item.instr else {
        return Ok(Value::ext(item));
    };
    let a = fetch(&item.dag, &item.env, from)?;
    let b = fetch(&item.dag, &item.env, to)?;
    let feeding: Vec<Edge> = item.dag.incoming(a.id).copied().collect();
    let fusable = a.id != b.id
        && rules.accepts(&a.node)
        && rules.accepts(&b.node)
        && feeding.len() == 1
        && item.dag.incoming(b.id).next().is_none()
        && item.dag.outgoing(a.id).next().is_none();
    if !fusable {
        return Ok(Value::ext(item));
    }
    let c = fuse(&a, &b)?;
    delete(&mut item.dag, a.id)?;
    delete(&mut item.dag, b.id)?;
    add(&mut item.dag, &c)?;
    item.env.rebind(a.id, c.id);
    item.env.rebind(b.id, c.id);
    item.instr = Instruction::AddEdge {
        from: Target::Node(feeding[0].from),
        from_port: feeding[0].from_port,
        to: Target::Node(c.id),
        to_port: 0,
    };
    Ok(Value::ext(item))
}

/// Fuses consecutive `map` operators.
pub fn fusion_meta() -> Structural {
    fusion_meta_with(FusionRules::Maps)
}

/// `src ~> dup(3) ~> (edge ||| operators ||| names) ~> merge(3) ~> proceed ~> snk`
pub fn fusion_meta_with(rules: FusionRules) -> Structural {
    let edge = map_dag(item_stage("fuse_edge", move |item| fuse_edge(rules, item)));
    let meta = line(&[
        &branches(vec![
            arm(item_when("edge", is_edge), &[&edge]),
            arm(
                item_when("operator", |i| matches!(i.instr, Instruction::AddOperator(_))),
                &[],
            ),
            arm(item_when("name", |i| matches!(i.instr, Instruction::NameIt(_))), &[]),
        ]),
        &proceed(),
    ]);
    let name = match rules {
        FusionRules::Maps => "fusion",
        FusionRules::MapsAndFilters => "fusion-all",
    };
    named(closed(meta), name)
}

fn parallel_edge(n: usize, mut item: MetaItem) -> Result<Value, CompileError> {
    let Instruction::AddEdge {
        from,
        from_port,
        to,
        to_port,
    } = item.instr.clone()
    else {
        return Ok(Value::ext(item));
    };
    let m = fetch(&item.dag, &item.env, &to)?;
    let spec = match &m.node {
        Node::Operator(op) if op.parallel && matches!(op.kind, OperatorKind::Map(_)) => op.clone(),
        _ => return Ok(Value::ext(item)),
    };
    if item.dag.incoming(m.id).next().is_some() || item.dag.outgoing(m.id).next().is_some() {
        return Ok(Value::ext(item));
    }
    delete(&mut item.dag, m.id)?;
    let balance = ReifiedOperator::new(Node::Operator(OperatorSpec::balance(n)?));
    let merge = ReifiedOperator::new(Node::Operator(OperatorSpec::merge(n)?));
    add(&mut item.dag, &balance)?;
    for k in 0..n {
        let copy = ReifiedOperator::new(Node::Operator(OperatorSpec {
            kind: spec.kind.clone(),
            alias: None,
            parallel: false,
        }));
        add(&mut item.dag, &copy)?;
        connect(&mut item.dag, balance.id, k, copy.id, 0)?;
    }
    add(&mut item.dag, &merge)?;
    let copies: Vec<NodeId> = item
        .dag
        .outgoing(balance.id)
        .map(|e| e.to)
        .collect();
    for (k, copy) in copies.into_iter().enumerate() {
        connect(&mut item.dag, copy, 0, merge.id, k)?;
    }
    item.env.rebind(m.id, merge.id);
    item.instr = Instruction::AddEdge {
        from,
        from_port,
        to: Target::Node(balance.id),
        to_port,
    };
    Ok(Value::ext(item))
}

/// Replaces every map flagged parallel with `balance(n) ~> n copies ~>
/// merge(n)`. Output order is not preserved.
pub fn parallel_meta(n: usize) -> Structural {
    let edge = map_dag(item_stage("parallelize", move |item| parallel_edge(n, item)));
    let meta = line(&[
        &branches(vec![
            arm(item_when("edge", is_edge), &[&edge]),
            arm(item_when("other", |i| !is_edge(i)), &[]),
        ]),
        &proceed(),
    ]);
    named(closed(meta), &format!("parallel:{n}"))
}

fn epoch() -> Instant {
    static EPOCH: OnceLock<Instant> = OnceLock::new();
    *EPOCH.get_or_init(Instant::now)
}

/// A payload plus the stamps it collected, oldest first.
#[derive(Clone, Debug, PartialEq)]
pub struct Stamped {
    pub payload: Value,
    /// Label of the stamping point and nanoseconds since process start.
    pub stamps: Vec<(Arc<str>, u64)>,
}

impl ExtValue for Stamped {
    fn as_any(&self) -> &dyn std::any::Any {
        self
    }

    fn into_any(self: Arc<Self>) -> Arc<dyn std::any::Any + Send + Sync> {
        self
    }

    fn ext_eq(&self, other: &dyn ExtValue) -> bool {
        other.as_any().downcast_ref::<Stamped>() == Some(self)
    }
}

/// The payload of a stamped value, or the value itself.
pub fn unstamp(value: &Value) -> Value {
    match value.downcast_ref::<Stamped>() {
        Some(s) => s.payload.clone(),
        None => value.clone(),
    }
}

fn stamp_fn(label: Arc<str>) -> Function {
    Function::owned(format!("stamp:{label}"), move |v| {
        let mut boxed = match v {
            Value::Tuple(parts) if parts.iter().all(|p| p.downcast_ref::<Stamped>().is_some()) => {
                let mut payload = Vec::with_capacity(parts.len());
                let mut stamps = Vec::new();
                for p in parts.iter() {
                    let s = p.downcast_ref::<Stamped>().unwrap();
                    payload.push(s.payload.clone());
                    stamps.extend(s.stamps.iter().cloned());
                }
                Stamped {
                    payload: Value::Tuple(payload.into()),
                    stamps,
                }
            }
            other => match other.downcast::<Stamped>() {
                Ok(s) => s,
                Err(plain) => Stamped {
                    payload: plain,
                    stamps: Vec::new(),
                },
            },
        };
        boxed
            .stamps
            .push((label.clone(), epoch().elapsed().as_nanos() as u64));
        Ok(Value::ext(boxed))
    })
}

fn wrap_unary(f: &Function) -> Function {
    let f = f.clone();
    Function::owned(format!("ts[{f}]"), move |v| match v.downcast::<Stamped>() {
        Ok(mut s) => {
            s.payload = f.call(s.payload)?;
            Ok(Value::ext(s))
        }
        Err(plain) => f.call(plain),
    })
}

fn wrap_predicate(p: &Function) -> Function {
    let p = p.clone();
    Function::unary(format!("ts[{p}]"), move |v| match v.downcast_ref::<Stamped>() {
        Some(s) => p.call_ref(&s.payload),
        None => p.call_ref(v),
    })
}

fn wrap_binary(f: &Function) -> Function {
    let f = f.clone();
    Function::binary(format!("ts[{f}]"), move |acc, v| {
        let acc = unstamp(acc);
        match v.downcast_ref::<Stamped>() {
            Some(s) => Ok(Value::ext(Stamped {
                payload: f.call2(&acc, &s.payload)?,
                stamps: s.stamps.clone(),
            })),
            None => f.call2(&acc, v),
        }
    })
}

fn wrap_kind(kind: &OperatorKind) -> OperatorKind {
    match kind {
        OperatorKind::Map(f) => OperatorKind::Map(wrap_unary(f)),
        OperatorKind::Filter(p) => OperatorKind::Filter(wrap_predicate(p)),
        OperatorKind::Scan { f, init } => OperatorKind::Scan {
            f: wrap_binary(f),
            init: init.clone(),
        },
        OperatorKind::Fused(stages) => OperatorKind::Fused(
            stages
                .iter()
                .map(|s| match s {
                    Stage::Map(f) => Stage::Map(wrap_unary(f)),
                    Stage::Filter(p) => Stage::Filter(wrap_predicate(p)),
                })
                .collect(),
        ),
        other => other.clone(),
    }
}

fn timestamp_item(mut item: MetaItem) -> Result<Value, CompileError> {
    match &item.instr {
        Instruction::AddOperator(Node::Operator(op)) => {
            let mut op = op.clone();
            op.kind = wrap_kind(&op.kind);
            item.instr = Instruction::AddOperator(Node::Operator(op));
            Ok(Value::ext(item))
        }
        Instruction::AddEdge {
            from,
            from_port,
            to,
            to_port,
        } => {
            let target = fetch(&item.dag, &item.env, to)?;
            let stamped_target = match &target.node {
                Node::Operator(_) => true,
                Node::Socket(s) => s.direction == SocketDirection::Sink,
            };
            if !stamped_target {
                return Ok(Value::ext(item));
            }
            let alias = format!("ts:{to}:{to_port}");
            let stamp = Node::Operator(OperatorSpec::map(stamp_fn(Arc::from(to.to_string()))));
            let (from, from_port, to, to_port) = (from.clone(), *from_port, to.clone(), *to_port);
            let MetaItem { dag, env, .. } = item;
            let expanded = vec![
                MetaItem::new(Instruction::AddOperator(stamp), dag, env),
                MetaItem::new(Instruction::NameIt(alias.clone()), Dag::new(), Env::default()),
                MetaItem::new(
                    Instruction::AddEdge {
                        from,
                        from_port,
                        to: Target::Alias(alias.clone()),
                        to_port: 0,
                    },
                    Dag::new(),
                    Env::default(),
                ),
                MetaItem::new(
                    Instruction::AddEdge {
                        from: Target::Alias(alias),
                        from_port: 0,
                        to,
                        to_port,
                    },
                    Dag::new(),
                    Env::default(),
                ),
            ];
            Ok(Value::list(expanded.into_iter().map(Value::ext)))
        }
        _ => Ok(Value::ext(item)),
    }
}

/// Puts a stamping map in front of every operator and sink, and wraps user
/// functions so they see the payload while the stamps travel along.
pub fn timestamp_meta() -> Structural {
    named(
        closed(map_dag(item_stage("timestamp", timestamp_item))),
        "timestamp",
    )
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown structural behavior {0:?}; expected none, fusion, fusion-all, parallel:<n> or timestamp")]
pub struct UnknownStructural(pub String);

/// `none` yields `None`: compile without any meta pipeline.
pub fn by_name(name: &str) -> Result<Option<Structural>, UnknownStructural> {
    match name {
        "none" => Ok(None),
        "proceed" => Ok(Some(proceed_meta())),
        "fusion" => Ok(Some(fusion_meta())),
        "fusion-all" => Ok(Some(fusion_meta_with(FusionRules::MapsAndFilters))),
        "timestamp" => Ok(Some(timestamp_meta())),
        other => other
            .strip_prefix("parallel:")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|n| *n > 0)
            .map(|n| Some(parallel_meta(n)))
            .ok_or_else(|| UnknownStructural(other.to_string())),
    }
}
