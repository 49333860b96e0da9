//! One PASS/FAIL line per acceptance criterion; each test also fails on its own.

mod common;

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::*;
use metastream::graph::{chain, Constraint, Dag, Edge, Node, NodeId, OperatorSpec, SocketDirection, SocketSpec};
use metastream::instrument;
use metastream::metac::{compile, fusion_meta, parallel_meta};
use metastream::metar::{self, Behavior, XorCipher};
use metastream::operators::{SinkSpec, SourceSpec};
use metastream::runtime::{deploy, DeployOptions, Endpoint, Event, TraceEntry};
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};

/// Counters are process-wide, so criteria run one at a time.
static SERIAL: Mutex<()> = Mutex::new(());

fn report(criterion: u8, what: &str, outcome: Result<(), String>) {
    // straight to the process stdout so the line survives test capture
    let line = match &outcome {
        Ok(()) => format!("PASS {criterion}: {what}"),
        Err(why) => format!("FAIL {criterion}: {what}: {why}"),
    };
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    if let Err(why) = outcome {
        panic!("criterion {criterion} failed: {why}");
    }
}

fn ensure(ok: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(why())
    }
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new_with_rng(
        Config { cases, failure_persistence: None, ..Config::default() },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    )
}

fn even_squares() -> Dag {
    build(&[Step::Filter("even"), Step::Map("square")])
}

#[test]
fn even_squares_under_every_semantics() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let want: Vec<i64> = (1..=100).filter(|x| x % 2 == 0).map(|x| x * x).collect();
    let started = Instant::now();
    let mut outcome = Ok(());
    for behavior in [Behavior::none(), metar::identity(), metar::pull(), metar::smart_pull()] {
        let got = run_with(&even_squares(), SourceSpec::range(1, 100), &behavior, DeployOptions::default())
            .into_single()
            .map(|v| ints(&v));
        if got.as_ref() != Ok(&want) {
            outcome = Err(format!("{} delivered {got:?}", behavior.name()));
        }
    }
    let elapsed = started.elapsed();
    let outcome = outcome.and_then(|()| ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}")));
    report(1, "range(1,100) ~> filter(even) ~> map(square) gives the 50 even squares", outcome);
}

#[test]
fn random_pipelines_match_the_fold() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let behaviors = behaviors();
    let started = Instant::now();
    let result = runner(200).run(&(pipeline(8), input(1000)), |(steps, values)| {
        let dag = build(&steps);
        let want = oracle(&values, &steps);
        for behavior in &behaviors {
            let got = run(&dag, &values, behavior).ok();
            proptest::prop_assert_eq!(&got, &want, "{}", behavior.name());
        }
        Ok(())
    });
    let elapsed = started.elapsed();
    let outcome = result
        .map_err(|e| e.to_string())
        .and_then(|()| ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}")));
    report(2, "200 random map/filter/scan pipelines equal the sequential fold under every behavior", outcome);
}

#[test]
fn fusion_collapses_map_chains() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let check = || -> Result<(), String> {
        let dag = build(&[Step::Map("square"), Step::Map("inc")]);
        let fused = compile(&dag, Some(&fusion_meta())).map_err(|e| e.to_string())?;
        ensure(fused.operator_count() == 1, || format!("{} operators left", fused.operator_count()))?;
        let got = run(&fused, &[1, 2, 3, 4], &Behavior::none()).map_err(|e| e.to_string())?;
        ensure(got == [2, 5, 10, 17], || format!("got {got:?}"))?;

        let names = proptest::sample::select(vec!["identity", "square", "inc", "double"]);
        runner(100)
            .run(&(proptest::collection::vec(names, 1..=6), input(200)), |(names, values)| {
                let steps: Vec<Step> = names.into_iter().map(Step::Map).collect();
                let dag = build(&steps);
                let fused = compile(&dag, Some(&fusion_meta())).unwrap();
                proptest::prop_assert_eq!(fused.operator_count(), 1);
                proptest::prop_assert_eq!(
                    run(&fused, &values, &Behavior::none()).ok(),
                    run(&dag, &values, &Behavior::none()).ok()
                );
                Ok(())
            })
            .map_err(|e| e.to_string())
    };
    report(3, "fusion turns map chains into one operator with unchanged output", check());
}

#[test]
fn parallelization_keeps_the_multiset() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let check = || -> Result<(), String> {
        let want: Vec<i64> = (1..=50).map(|x| x * x).collect();
        for n in [1, 2, 4] {
            let dag = op(OperatorSpec::map(f("square")).parallel()).close(&["in", "out"]).unwrap();
            let compiled = compile(&dag, Some(&parallel_meta(n))).map_err(|e| e.to_string())?;
            let out = run_with(&compiled, SourceSpec::range(1, 50), &Behavior::none(), DeployOptions::default());
            let mut got = ints(&out.into_single().map_err(|e| e.to_string())?);
            got.sort();
            ensure(got == want, || format!("n = {n}: {got:?}"))?;
        }
        Ok(())
    };
    report(4, "parallel map over range(1,50) yields the squares for n in {1,2,4}", check());
}

fn zip_of_two(seed: u64) -> Vec<TraceEntry> {
    let dag = op(OperatorSpec::zip()).close(&["a", "b", "out"]).unwrap();
    deploy(
        &dag,
        [
            ("a", Endpoint::Source(SourceSpec::range(1, 6))),
            ("b", Endpoint::Source(SourceSpec::range(1, 4))),
            ("out", Endpoint::Sink(SinkSpec::CollectAll)),
        ],
        &metar::smart_pull(),
        DeployOptions::deterministic(seed),
    )
    .unwrap()
    .wait()
    .trace
}

#[test]
fn pull_traces() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let check = || -> Result<(), String> {
        let out = run_with(
            &Dag::wire("in", "out").unwrap(),
            SourceSpec::range(1, 3),
            &metar::pull(),
            DeployOptions::deterministic(0),
        );
        let sink = out.units.iter().position(|u| u.name == "collect").unwrap();
        let (mut demands, mut nexts) = (0, 0);
        for e in &out.trace {
            match e.event {
                Event::Demand { .. } if e.from == Some(sink) => demands += 1,
                Event::Next { .. } if e.to == sink => nexts += 1,
                _ => {}
            }
            ensure(nexts <= demands, || format!("next before demand at seq {}", e.seq))?;
        }
        let total = out.trace.iter().filter(|e| matches!(e.event, Event::Demand { .. })).count();
        ensure(total == 4, || format!("{total} demands"))?;

        for seed in 0..16 {
            let mut outstanding = std::collections::HashSet::new();
            for e in zip_of_two(seed) {
                let Some(from) = e.from else { continue };
                match e.event {
                    Event::Demand { .. } => {
                        ensure(outstanding.insert((from, e.to)), || {
                            format!("seed {seed}: u{from} demanded twice from u{}", e.to)
                        })?;
                    }
                    Event::Next { .. } | Event::Complete { .. } | Event::Err { .. } => {
                        outstanding.remove(&(e.to, from));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    };
    report(5, "pull demand accounting holds with 4 demands; smart pull over zip never demands twice", check());
}

#[test]
fn validation_names_each_constraint() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let check = || -> Result<(), String> {
        let socket = |label: &str, direction| Node::Socket(SocketSpec { label: label.into(), direction });
        let map = || Node::Operator(OperatorSpec::map(f("inc")));
        let (s, a, b, t) = (NodeId::fresh(), NodeId::fresh(), NodeId::fresh(), NodeId::fresh());
        let witnesses = [
            (
                Constraint::PortsConnected,
                Dag::from_parts([(s, socket("in", SocketDirection::Source)), (a, map())], [Edge::new(s, 0, a, 0)]),
            ),
            (
                Constraint::ConnectionCount,
                Dag::from_parts(
                    [
                        (s, socket("in", SocketDirection::Source)),
                        (a, map()),
                        (b, socket("x", SocketDirection::Sink)),
                        (t, socket("y", SocketDirection::Sink)),
                    ],
                    [Edge::new(s, 0, a, 0), Edge::new(a, 0, b, 0), Edge::new(a, 0, t, 0)],
                ),
            ),
            (
                Constraint::SocketConnected,
                Dag::from_parts(
                    [
                        (s, socket("in", SocketDirection::Source)),
                        (a, map()),
                        (b, socket("out", SocketDirection::Sink)),
                        (t, socket("spare", SocketDirection::Sink)),
                    ],
                    [Edge::new(s, 0, a, 0), Edge::new(a, 0, b, 0)],
                ),
            ),
            (
                Constraint::Acyclic,
                Dag::from_parts([(a, map()), (b, map())], [Edge::new(a, 0, b, 0), Edge::new(b, 0, a, 0)]),
            ),
        ];
        for (constraint, dag) in &witnesses {
            let violations = dag.validate().err().unwrap_or_default();
            ensure(
                violations.iter().any(|v| {
                    v.constraint == *constraint
                        && v.to_string().starts_with(&format!("constraint {}", constraint.number()))
                }),
                || format!("{constraint:?} not reported: {violations:?}"),
            )?;
        }
        runner(300)
            .run(&grow_plan(), |plan| {
                let dag = closed(&grown(&plan));
                proptest::prop_assert_eq!(dag.validate(), Ok(()));
                Ok(())
            })
            .map_err(|e| e.to_string())
    };
    report(6, "each of the four constraints has a rejected witness; composed DAGs validate", check());
}

#[test]
fn no_meta_objects_without_behaviors() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let check = || -> Result<(), String> {
        let program = chain([&op(OperatorSpec::filter(f("even"))), &op(OperatorSpec::map(f("square")))])
            .unwrap()
            .close(&["in", "out"])
            .unwrap();
        let before = instrument::counters();
        let compiled = compile(&program, None).map_err(|e| e.to_string())?;
        let behavior = metar::by_name("none").unwrap();
        run_with(&compiled, SourceSpec::range(1, 1000), &behavior, DeployOptions::default())
            .into_single()
            .map_err(|e| e.to_string())?;
        let used = instrument::counters().since(before);
        ensure(used.meta_events == 0 && used.meta_items == 0, || format!("{used:?}"))?;

        // The counters do move when meta levels are in use.
        let before = instrument::counters();
        let fused = compile(&program, Some(&fusion_meta())).map_err(|e| e.to_string())?;
        run_with(&fused, SourceSpec::range(1, 10), &metar::identity(), DeployOptions::default());
        let used = instrument::counters().since(before);
        ensure(used.meta_events > 0 && used.meta_items > 0, || format!("counters idle: {used:?}"))
    };
    report(8, "behavior none allocates zero meta events and zero meta items", check());
}

#[test]
fn encryption_is_transparent_and_hides_values() {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    const KEY: i64 = 0x5A;
    let encrypt = metar::encryption(XorCipher(KEY));
    let identity = metar::identity();
    let result = runner(50).run(&(pipeline(6), input(200), 0u64..1000), |(steps, values, seed)| {
        let dag = build(&steps);
        let options = DeployOptions::deterministic(seed);
        let secret = run_with(&dag, list(&values), &encrypt, options.clone());
        let plain = run_with(&dag, list(&values), &identity, options);
        proptest::prop_assert_eq!(&secret.sinks, &plain.sinks);
        proptest::prop_assert_eq!(secret.trace.len(), plain.trace.len());
        for (s, p) in secret.trace.iter().zip(&plain.trace) {
            if let (Event::Next { value: wire, .. }, Event::Next { value: clear, .. }) = (&s.event, &p.event) {
                let wire = wire.as_int().unwrap();
                proptest::prop_assert_ne!(wire ^ KEY, wire);
                proptest::prop_assert_eq!(wire ^ KEY, clear.as_int().unwrap());
            }
        }
        Ok(())
    });
    report(9, "XOR 0x5A keeps outputs and no Next payload travels in the clear", result.map_err(|e| e.to_string()));
}
