//! Turning an expression into a closed DAG.
//!
//! Stages are wired positionally. Mismatched arities are not an error
//! here: surplus ports stay unconnected and validation reports them, so
//! the user sees which constraint the expression breaks.

use std::sync::Arc;

use metastream::graph::{Dag, Edge, Node, OperatorSpec, PortRef, SocketDirection, SocketSpec};
use metastream::operators::{SinkSpec, SourceSpec};
use metastream::registry;
use metastream::value::Value;

use crate::parse::{Literal, PipelineExpr, SinkExpr, SourceExpr, StageExpr};

pub const INPUT: &str = "input";
pub const OUTPUT: &str = "output";

fn spec(stage: &StageExpr) -> OperatorSpec {
    let f = |name: &str| registry::get(name).expect("the parser checks names");
    let count = |spec: Result<OperatorSpec, _>| spec.expect("the parser checks counts");
    match stage {
        StageExpr::Map { function, parallel } => {
            let spec = OperatorSpec::map(f(function));
            if *parallel {
                spec.parallel()
            } else {
                spec
            }
        }
        StageExpr::Filter(function) => OperatorSpec::filter(f(function)),
        StageExpr::Scan(function, init) => OperatorSpec::scan(
            f(function),
            match init {
                Literal::Int(i) => Value::Int(*i),
                Literal::Bool(b) => Value::Bool(*b),
            },
        ),
        StageExpr::Dup(n) => count(OperatorSpec::dup(*n)),
        StageExpr::Balance(n) => count(OperatorSpec::balance(*n)),
        StageExpr::Merge(n) => count(OperatorSpec::merge(*n)),
        StageExpr::Zip => OperatorSpec::zip(),
        StageExpr::Group(_) => unreachable!("groups have no single operator"),
    }
}

fn connect(dag: &mut Dag, outputs: &[PortRef], inputs: &[PortRef]) {
    for (out, inp) in outputs.iter().zip(inputs) {
        dag.add_edge(Edge::new(out.node, out.index, inp.node, inp.index))
            .expect("fresh ports are free");
    }
}

/// Adds a stage; returns its open input and output ports.
fn stage(dag: &mut Dag, stage_expr: &StageExpr) -> (Vec<PortRef>, Vec<PortRef>) {
    match stage_expr {
        StageExpr::Group(segments) => {
            let (mut ins, mut outs) = (Vec::new(), Vec::new());
            for s in segments {
                let (i, o) = segment(dag, s);
                ins.extend(i);
                outs.extend(o);
            }
            (ins, outs)
        }
        other => {
            let spec = spec(other);
            let (n_in, n_out) = (spec.in_arity(), spec.out_arity());
            let id = dag.add_node(Node::Operator(spec)).expect("valid operator");
            (
                (0..n_in).map(|k| PortRef::input(id, k)).collect(),
                (0..n_out).map(|k| PortRef::output(id, k)).collect(),
            )
        }
    }
}

fn segment(dag: &mut Dag, stages: &[StageExpr]) -> (Vec<PortRef>, Vec<PortRef>) {
    let mut inputs = None;
    let mut frontier: Vec<PortRef> = Vec::new();
    for s in stages {
        let (ins, outs) = stage(dag, s);
        match inputs {
            None => inputs = Some(ins),
            Some(_) => connect(dag, &frontier, &ins),
        }
        frontier = outs;
    }
    (inputs.unwrap_or_default(), frontier)
}

/// Builds the DAG with sockets labelled [`INPUT`] and [`OUTPUT`]. The
/// result is not validated.
pub fn lower(expr: &PipelineExpr) -> Dag {
    let mut dag = Dag::new();
    let socket = |label: &str, direction| {
        Node::Socket(SocketSpec {
            label: Arc::from(label),
            direction,
        })
    };
    let src = dag.add_node(socket(INPUT, SocketDirection::Source)).unwrap();
    let (ins, outs) = segment(&mut dag, &expr.stages);
    let snk = dag.add_node(socket(OUTPUT, SocketDirection::Sink)).unwrap();
    if expr.stages.is_empty() {
        dag.add_edge(Edge::new(src, 0, snk, 0)).unwrap();
    } else {
        connect(&mut dag, &[PortRef::output(src, 0)], &ins);
        connect(&mut dag, &outs, &[PortRef::input(snk, 0)]);
    }
    dag
}

pub fn source(expr: &SourceExpr) -> SourceSpec {
    match expr {
        SourceExpr::Range(a, b) => SourceSpec::range(*a, *b),
        SourceExpr::List(items) => SourceSpec::list(items.iter().map(|i| Value::Int(*i))),
    }
}

pub fn sink(expr: SinkExpr) -> SinkSpec {
    match expr {
        SinkExpr::Collect => SinkSpec::CollectAll,
        SinkExpr::Print => SinkSpec::for_each(|v| println!("{}", metastream::metac::unstamp(v))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_pipeline;
    use metastream::graph::Constraint;

    fn lowered(text: &str) -> Dag {
        lower(&parse_pipeline(text).unwrap())
    }

    #[test]
    fn branches_validate() {
        let dag = lowered("range(1,4) ~> dup(2) ~> (map(inc) ||| map(double)) ~> merge(2) ~> collect");
        assert_eq!(dag.validate(), Ok(()));
        assert_eq!(dag.operator_count(), 4);
    }

    #[test]
    fn unfed_merge_is_reported() {
        let violations = lowered("range(1,4) ~> merge(2) ~> collect").validate().unwrap_err();
        assert!(violations.iter().any(|v| v.constraint == Constraint::PortsConnected));
    }

    #[test]
    fn no_stages_wires_source_to_sink() {
        assert_eq!(lowered("range(1,4) ~> collect").validate(), Ok(()));
    }
}
