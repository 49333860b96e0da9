mod common;

use common::*;
use metastream::graph::{chain, OperatorSpec};
use metastream::operators::{SinkSpec, SourceSpec};
use metastream::runtime::{deploy_fast, DeployOptions, Endpoint};
use proptest::prelude::*;

fn check(steps: &[Step], values: &[i64]) -> Result<(), TestCaseError> {
    let dag = build(steps);
    let expected = oracle(values, steps);
    for behavior in behaviors() {
        let got = run(&dag, values, &behavior);
        match &expected {
            Some(want) => prop_assert_eq!(got.as_ref().ok(), Some(want), "{}", behavior.name()),
            None => prop_assert!(got.is_err(), "{} should fail", behavior.name()),
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn linear_pipelines_match_the_fold(steps in pipeline(8), values in input(1000)) {
        check(&steps, &values)?;
    }

    #[test]
    fn deterministic_schedule_agrees(steps in pipeline(4), values in input(50), seed in any::<u64>()) {
        let dag = build(&steps);
        for behavior in behaviors() {
            let got = run_with(&dag, list(&values), &behavior, DeployOptions::deterministic(seed))
                .into_single()
                .map(|v| ints(&v))
                .ok();
            prop_assert_eq!(got, oracle(&values, &steps), "{}", behavior.name());
        }
    }

    #[test]
    fn balanced_branches_keep_the_multiset(values in input(200), n in 1usize..5) {
        let inc = op(OperatorSpec::map(f("inc")));
        let branches: Vec<_> = (0..n).map(|_| inc.clone()).collect();
        let dag = chain([
            &op(OperatorSpec::balance(n).unwrap()),
            &metastream::graph::parallel(&branches).unwrap(),
            &op(OperatorSpec::merge(n).unwrap()),
        ])
        .unwrap()
        .close(&["in", "out"])
        .unwrap();
        let mut want: Vec<i64> = values.iter().map(|v| v + 1).collect();
        want.sort();
        for behavior in behaviors() {
            let mut got = run(&dag, &values, &behavior).unwrap();
            got.sort();
            prop_assert_eq!(&got, &want, "{}", behavior.name());
        }
    }
}

#[test]
fn empty_stream() {
    let dag = build(&[Step::Map("inc")]);
    for behavior in behaviors() {
        assert_eq!(run(&dag, &[], &behavior).unwrap(), Vec::<i64>::new());
    }
}

#[test]
fn overflow_reaches_the_sink_as_an_error() {
    let dag = build(&[Step::Map("square"), Step::Map("square"), Step::Map("square")]);
    let errors: Vec<String> = behaviors()
        .iter()
        .map(|b| run(&dag, &[1, 100_000], b).unwrap_err().to_string())
        .collect();
    assert!(errors.iter().all(|e| e == &errors[0]), "{errors:?}");
}

#[test]
fn fast_path_runs_concurrently_and_deterministically() {
    let dag = build(&[Step::Filter("even"), Step::Map("square")]);
    for options in [DeployOptions::default(), DeployOptions::deterministic(9)] {
        let out = deploy_fast(
            &dag,
            [
                ("in", Endpoint::Source(SourceSpec::range(1, 10))),
                ("out", Endpoint::Sink(SinkSpec::CollectAll)),
            ],
            options,
        )
        .unwrap()
        .wait();
        assert_eq!(out.into_single().unwrap().to_string(), "[4,16,36,64,100]");
    }
}
