use std::process::Command;

use metastream_cli::lower::lower;
use metastream_cli::parse::{parse_pipeline, Literal, PipelineExpr, SinkExpr, SourceExpr, StageExpr};
use metastream_cli::{run, RunOptions};
use proptest::prelude::*;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metastream"))
}

fn function(unary: bool) -> impl Strategy<Value = String> {
    let names = if unary {
        vec!["identity", "square", "inc", "double", "even", "odd", "gt0"]
    } else {
        vec!["sum", "pair"]
    };
    prop::sample::select(names).prop_map(str::to_string)
}

fn stage() -> impl Strategy<Value = StageExpr> {
    let leaf = prop_oneof![
        (function(true), any::<bool>()).prop_map(|(function, parallel)| StageExpr::Map { function, parallel }),
        function(true).prop_map(StageExpr::Filter),
        (function(false), prop_oneof![any::<i64>().prop_map(Literal::Int), any::<bool>().prop_map(Literal::Bool)])
            .prop_map(|(f, l)| StageExpr::Scan(f, l)),
        (1usize..5).prop_map(StageExpr::Dup),
        (1usize..5).prop_map(StageExpr::Balance),
        (1usize..5).prop_map(StageExpr::Merge),
        Just(StageExpr::Zip),
    ];
    leaf.prop_recursive(3, 24, 3, |inner| {
        prop::collection::vec(prop::collection::vec(inner, 1..3), 2..4).prop_map(StageExpr::Group)
    })
}

fn expr() -> impl Strategy<Value = PipelineExpr> {
    (
        prop_oneof![
            (any::<i64>(), any::<i64>()).prop_map(|(a, b)| SourceExpr::Range(a, b)),
            prop::collection::vec(any::<i64>(), 0..5).prop_map(SourceExpr::List),
        ],
        prop::collection::vec(stage(), 0..5),
        prop_oneof![Just(SinkExpr::Collect), Just(SinkExpr::Print)],
    )
        .prop_map(|(source, stages, sink)| PipelineExpr { source, stages, sink })
}

proptest! {
    #[test]
    fn print_then_parse_round_trips(e in expr()) {
        let text = e.to_string();
        prop_assert_eq!(parse_pipeline(&text).unwrap(), e);
    }

    #[test]
    fn accepted_expressions_validate_or_fail_early(e in expr()) {
        let dag = lower(&e);
        match dag.validate() {
            Ok(()) => prop_assert!(dag.is_closed()),
            Err(violations) => {
                prop_assert!(!violations.is_empty());
                let err = run(&e.to_string(), &RunOptions::default()).unwrap_err();
                prop_assert_eq!(err.exit_code(), 1);
            }
        }
    }

    #[test]
    fn spacing_is_irrelevant(e in expr()) {
        let squeezed = e.to_string().replace(' ', "");
        prop_assert_eq!(parse_pipeline(&squeezed).unwrap(), e);
    }
}

#[test]
fn even_squares_print_fifty_values() {
    for behavior in ["none", "identity", "pull", "smartpull", "logging", "encrypt:5a"] {
        let out = bin()
            .args(["run", "range(1,100) ~> filter(even) ~> map(square) ~> collect", "--behavior", behavior])
            .output()
            .unwrap();
        assert!(out.status.success(), "{behavior}");
        let want: Vec<String> = (1..=50).map(|k| (4 * k * k).to_string()).collect();
        assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), format!("[{}]", want.join(",")));
    }
}

#[test]
fn exit_codes() {
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    assert_eq!(code(&["validate", "range(1,4) ~> dup(2) ~> (map(inc) ||| map(double)) ~> merge(2) ~> collect"]), Some(0));
    assert_eq!(code(&["validate", "range(1,4) ~> merge(2) ~> collect"]), Some(1));
    assert_eq!(code(&["run", "range(1,4) ~> map(nope) ~> collect"]), Some(1));
    assert_eq!(code(&["run", "range(1,4) ~> collect", "--behavior", "shove"]), Some(1));
    assert_eq!(code(&["run", "list([5000000000]) ~> map(square) ~> collect"]), Some(2));
}

#[test]
fn trace_file_has_one_line_per_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.txt");
    let out = bin()
        .args(["run", "range(1,3) ~> collect", "--behavior", "pull", "--deterministic", "--seed", "4"])
        .arg("--trace")
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let trace = std::fs::read_to_string(&path).unwrap();
    let demands = trace.lines().filter(|l| l.ends_with(" demand")).count();
    assert_eq!(demands, 4);
    for (i, line) in trace.lines().enumerate() {
        assert!(line.starts_with(&format!("seq {} ", i + 1)), "{line}");
    }
}

#[test]
fn compile_prints_instructions_and_dag() {
    let out = bin()
        .args(["compile", "range(1,4) ~> map(square) ~> map(inc) ~> collect", "--behavior", "fusion"])
        .output()
        .unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# instructions\noperator source input\n"));
    assert!(text.contains("# dag\n"));
    assert_eq!(text.lines().filter(|l| l.starts_with("node ")).count(), 3);
}

#[test]
fn structural_and_runtime_behaviors_combine() {
    let options = |structural: &str| RunOptions {
        behavior: "smartpull".into(),
        structural: structural.into(),
        ..RunOptions::default()
    };
    let text = "range(1,10) ~> map(square,par) ~> map(inc) ~> collect";
    let mut want: Vec<i64> = (1..=10).map(|x| x * x + 1).collect();
    for structural in ["none", "fusion", "parallel:3", "timestamp"] {
        let got = run(text, &options(structural)).unwrap().unwrap();
        let mut got: Vec<i64> = got.as_list().unwrap().iter().map(|v| v.as_int().unwrap()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want, "{structural}");
    }
}

#[test]
fn bench_rejects_too_few_repetitions() {
    let out = bin()
        .args(["bench", "--mode", "load", "--ops", "2", "--values", "0..10", "--reps", "3"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn dagsize_starts_with_no_operators() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    let out = bin()
        .args(["bench", "--mode", "dagsize", "--ops", "0..20", "--values", "50", "--points", "3"])
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = metastream_cli::bench::read_csv(std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].ops, 0);
    assert!(rows.iter().all(|r| r.rep == 5 && r.elapsed_ms >= 0.0));
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.starts_with("ops,values,meta/fast\n"));
}
