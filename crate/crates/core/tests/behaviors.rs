mod common;

use std::sync::{Arc, Mutex};

use common::*;
use metastream::metar::{self, Behavior, LogSink, XorCipher};
use metastream::operators::{SinkSpec, SourceSpec};
use metastream::runtime::{deploy, DeployOptions, Endpoint, Event};
use metastream::value::Value;
use proptest::prelude::*;

#[test]
fn logging_records_three_values_per_unit() {
    let log = LogSink::memory();
    let dag = build(&[Step::Map("inc")]);
    let out = run_with(&dag, SourceSpec::range(1, 3), &metar::logging(log.clone()), DeployOptions::default());
    assert_eq!(out.clone().into_single().unwrap().to_string(), "[2,3,4]");
    let records = log.records();
    for unit in 0..out.units.len() {
        let mine: Vec<String> = records
            .iter()
            .filter(|r| r.unit == unit)
            .map(|r| r.value.to_string())
            .collect();
        assert_eq!(mine.len(), 3, "{}: {mine:?}", out.units[unit].name);
    }
    let inc = out.units.iter().position(|u| u.name == "map(inc)").unwrap();
    let seen: Vec<_> = records.iter().filter(|r| r.unit == inc).map(|r| r.value.clone()).collect();
    assert_eq!(seen, [Value::Int(1), Value::Int(2), Value::Int(3)]);
}

#[test]
fn logging_an_empty_stream_logs_nothing() {
    let log = LogSink::memory();
    let dag = build(&[Step::Map("inc")]);
    run_with(&dag, list(&[]), &metar::logging(log.clone()), DeployOptions::default());
    assert!(log.records().is_empty());
}

#[test]
fn encrypted_wire_values_differ_from_plain() {
    let key = 0x5A;
    let dag = build(&[Step::Map("inc"), Step::Filter("even"), Step::Map("double")]);
    let values: Vec<i64> = (0..100).collect();
    let out = run_with(&dag, list(&values), &metar::encryption(XorCipher(key)), DeployOptions::deterministic(4));
    let mut checked = 0;
    for e in &out.trace {
        if let Event::Next { value, .. } = &e.event {
            let plain = value.as_int().unwrap() ^ key;
            assert_ne!(plain, value.as_int().unwrap());
            checked += 1;
        }
    }
    assert!(checked > 100);
    let got = ints(&out.into_single().unwrap());
    assert_eq!(Some(got), oracle(&values, &[Step::Map("inc"), Step::Filter("even"), Step::Map("double")]));
}

#[test]
fn zero_key_behaves_like_identity() {
    let dag = build(&[Step::Map("square"), Step::Scan("sum", 0)]);
    let values: Vec<i64> = (-20..20).collect();
    let a = run_with(&dag, list(&values), &metar::encryption(XorCipher(0)), DeployOptions::deterministic(1));
    let b = run_with(&dag, list(&values), &metar::identity(), DeployOptions::deterministic(1));
    assert_eq!(a.trace, b.trace);
}

#[test]
fn foreach_sink_sees_every_value() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let sink = {
        let seen = seen.clone();
        SinkSpec::for_each(move |v| seen.lock().unwrap().push(v.as_int().unwrap()))
    };
    let dag = build(&[Step::Map("double")]);
    for behavior in behaviors() {
        seen.lock().unwrap().clear();
        deploy(
            &dag,
            [("in", Endpoint::Source(SourceSpec::range(1, 4))), ("out", Endpoint::Sink(sink.clone()))],
            &behavior,
            DeployOptions::default(),
        )
        .unwrap()
        .wait()
        .into_single()
        .unwrap();
        assert_eq!(*seen.lock().unwrap(), [2, 4, 6, 8], "{}", behavior.name());
    }
}

#[test]
fn registry_parses_keys() {
    for name in ["none", "identity", "logging", "pull", "smartpull", "encrypt:5a", "encrypt:0x5A"] {
        assert!(metar::by_name(name).is_ok(), "{name}");
    }
    assert!(metar::by_name("encrypt:zz").is_err());
    assert!(metar::by_name("push").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identity_is_transparent(steps in pipeline(6), values in input(200), seed in 0u64..50) {
        let dag = build(&steps);
        let fast = run_with(&dag, list(&values), &Behavior::none(), DeployOptions::deterministic(seed));
        let meta = run_with(&dag, list(&values), &metar::identity(), DeployOptions::deterministic(seed));
        prop_assert_eq!(fast.trace, meta.trace);
        prop_assert_eq!(fast.sinks, meta.sinks);
    }

    #[test]
    fn xor_roundtrips(v in any::<i64>(), key in any::<i64>()) {
        use metastream::metar::Cipher;
        let c = XorCipher(key);
        prop_assert_eq!(c.decrypt(c.encrypt(Value::Int(v))), Value::Int(v));
    }
}
