#![allow(dead_code)]

use metastream::graph::{chain, Dag, OperatorSpec};
use metastream::metar::{self, Behavior, LogSink, XorCipher};
use metastream::operators::{SinkSpec, SourceSpec};
use metastream::registry;
use metastream::runtime::{deploy, DeployOptions, Endpoint, Outcome};
use metastream::value::{StreamError, Value};
use proptest::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Map(&'static str),
    Filter(&'static str),
    Scan(&'static str, i64),
}

pub fn step() -> impl Strategy<Value = Step> {
    prop_oneof![
        prop::sample::select(vec!["identity", "square", "inc", "double"]).prop_map(Step::Map),
        prop::sample::select(vec!["even", "odd", "gt0"]).prop_map(Step::Filter),
        (-5i64..5).prop_map(|init| Step::Scan("sum", init)),
    ]
}

pub fn pipeline(depth: usize) -> impl Strategy<Value = Vec<Step>> {
    prop::collection::vec(step(), 1..=depth)
}

pub fn input(len: usize) -> impl Strategy<Value = Vec<i64>> {
    prop::collection::vec(-1000i64..1000, 0..=len)
}

/// Plain sequential evaluation. `None` when some arithmetic overflows.
pub fn oracle(input: &[i64], steps: &[Step]) -> Option<Vec<i64>> {
    let mut values = input.to_vec();
    for s in steps {
        values = match s {
            Step::Map(name) => {
                let f = |x: i64| -> Option<i64> {
                    match *name {
                        "identity" => Some(x),
                        "square" => x.checked_mul(x),
                        "inc" => x.checked_add(1),
                        "double" => x.checked_mul(2),
                        _ => unreachable!(),
                    }
                };
                values.into_iter().map(f).collect::<Option<Vec<_>>>()?
            }
            Step::Filter(name) => values
                .into_iter()
                .filter(|x| match *name {
                    "even" => x % 2 == 0,
                    "odd" => x % 2 != 0,
                    "gt0" => *x > 0,
                    _ => unreachable!(),
                })
                .collect(),
            Step::Scan(_, init) => {
                let mut acc = *init;
                let mut out = Vec::with_capacity(values.len());
                for x in values {
                    acc = acc.checked_add(x)?;
                    out.push(acc);
                }
                out
            }
        };
    }
    Some(values)
}

pub fn spec(s: &Step) -> OperatorSpec {
    match s {
        Step::Map(name) => OperatorSpec::map(registry::get(name).unwrap()),
        Step::Filter(name) => OperatorSpec::filter(registry::get(name).unwrap()),
        Step::Scan(name, init) => OperatorSpec::scan(registry::get(name).unwrap(), Value::Int(*init)),
    }
}

pub fn op(spec: OperatorSpec) -> Dag {
    Dag::single(spec).unwrap()
}

pub fn f(name: &str) -> metastream::value::Function {
    registry::get(name).unwrap()
}

pub fn build(steps: &[Step]) -> Dag {
    let parts: Vec<Dag> = steps.iter().map(|s| op(spec(s))).collect();
    chain(&parts).unwrap().close(&["in", "out"]).unwrap()
}

pub fn ints(v: &Value) -> Vec<i64> {
    v.as_list()
        .expect("sink delivers a list")
        .iter()
        .map(|x| x.as_int().expect("integer"))
        .collect()
}

pub fn list(values: &[i64]) -> SourceSpec {
    SourceSpec::list(values.iter().map(|v| Value::Int(*v)))
}

pub fn run_with(
    dag: &Dag,
    source: SourceSpec,
    behavior: &Behavior,
    options: DeployOptions,
) -> Outcome {
    deploy(
        dag,
        [
            ("in", Endpoint::Source(source)),
            ("out", Endpoint::Sink(SinkSpec::CollectAll)),
        ],
        behavior,
        options,
    )
    .unwrap()
    .wait()
}

pub fn run(dag: &Dag, input: &[i64], behavior: &Behavior) -> Result<Vec<i64>, StreamError> {
    run_with(dag, list(input), behavior, DeployOptions::default())
        .into_single()
        .map(|v| ints(&v))
}

/// Every run-time behavior, "none" first.
pub fn behaviors() -> Vec<Behavior> {
    vec![
        Behavior::none(),
        metar::identity(),
        metar::logging(LogSink::memory()),
        metar::pull(),
        metar::smart_pull(),
        metar::encryption(XorCipher(0x5A)),
    ]
}

/// One growth step of a randomly composed DAG.
#[derive(Clone, Debug)]
pub enum Grow {
    /// Feed every exposed output into something that fits.
    Then(u8),
    /// Place a single operator beside what exists.
    Beside(u8),
}

fn leaf(choice: u8) -> Dag {
    let n = 1 + (choice as usize / 8) % 3;
    op(match choice % 8 {
        0 => OperatorSpec::map(f("inc")),
        1 => OperatorSpec::filter(f("even")),
        2 => OperatorSpec::scan(f("sum"), Value::Int(0)),
        3 => OperatorSpec::dup(n).unwrap(),
        4 => OperatorSpec::balance(n).unwrap(),
        5 => OperatorSpec::merge(n).unwrap(),
        6 => OperatorSpec::zip(),
        _ => OperatorSpec::map(f("double")),
    })
}

fn one_in(choice: u8) -> Dag {
    let n = 1 + (choice as usize / 5) % 3;
    op(match choice % 5 {
        0 => OperatorSpec::map(f("square")),
        1 => OperatorSpec::filter(f("odd")),
        2 => OperatorSpec::dup(n).unwrap(),
        3 => OperatorSpec::balance(n).unwrap(),
        _ => OperatorSpec::scan(f("sum"), Value::Int(1)),
    })
}

pub fn grow_plan() -> impl Strategy<Value = (u8, Vec<Grow>)> {
    (
        any::<u8>(),
        prop::collection::vec(
            prop_oneof![3 => any::<u8>().prop_map(Grow::Then), 1 => any::<u8>().prop_map(Grow::Beside)],
            0..6,
        ),
    )
}

/// An open DAG built only from `single`, `~>` and `|||`.
pub fn grown((first, plan): &(u8, Vec<Grow>)) -> Dag {
    let mut dag = leaf(*first);
    for g in plan {
        dag = match g {
            Grow::Beside(c) => metastream::graph::compose_horizontal(&dag, &leaf(*c)).unwrap(),
            Grow::Then(c) => {
                let k = dag.exposed_outputs().len();
                let next = match k {
                    0 => continue,
                    1 => one_in(*c),
                    _ if c % 2 == 0 => op(OperatorSpec::merge(k).unwrap()),
                    _ => {
                        let maps: Vec<Dag> = (0..k).map(|i| one_in(c.wrapping_add(i as u8))).collect();
                        metastream::graph::parallel(&maps).unwrap()
                    }
                };
                metastream::graph::compose_vertical(&dag, &next).unwrap()
            }
        };
    }
    dag
}

/// Closes every exposed port with labels `i<k>` and `o<k>`.
pub fn closed(dag: &Dag) -> Dag {
    let labels: Vec<String> = (0..dag.exposed_inputs().len())
        .map(|k| format!("i{k}"))
        .chain((0..dag.exposed_outputs().len()).map(|k| format!("o{k}")))
        .collect();
    dag.close(&labels).unwrap()
}
