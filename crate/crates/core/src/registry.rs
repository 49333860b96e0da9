//! Named functions usable from textual pipelines.
//!
//! Closures cannot cross a text boundary, so the pipeline grammar refers to
//! functions by name. Every lookup of a name returns the same [`Function`]
//! instance, which keeps identity-based comparisons meaningful.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use crate::value::{FnResult, Function, StreamError, Value};

fn int(name: &str, v: &Value) -> Result<i64, StreamError> {
    v.as_int()
        .ok_or_else(|| StreamError::new(format!("{name}: expected an integer, got {v}")))
}

fn checked(name: &str, result: Option<i64>) -> FnResult {
    result
        .map(Value::Int)
        .ok_or_else(|| StreamError::new(format!("{name}: integer overflow")))
}

fn table() -> &'static BTreeMap<&'static str, Function> {
    static TABLE: OnceLock<BTreeMap<&'static str, Function>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let fns = [
            Function::unary("identity", |v| Ok(v.clone())),
            Function::unary("even", |v| Ok(Value::Bool(int("even", v)? % 2 == 0))),
            Function::unary("odd", |v| Ok(Value::Bool(int("odd", v)? % 2 != 0))),
            Function::unary("gt0", |v| Ok(Value::Bool(int("gt0", v)? > 0))),
            Function::unary("square", |v| {
                let i = int("square", v)?;
                checked("square", i.checked_mul(i))
            }),
            Function::unary("inc", |v| checked("inc", int("inc", v)?.checked_add(1))),
            Function::unary("double", |v| {
                checked("double", int("double", v)?.checked_mul(2))
            }),
            Function::binary("sum", |a, b| {
                checked("sum", int("sum", a)?.checked_add(int("sum", b)?))
            }),
            Function::binary("pair", |a, b| Ok(Value::pair(a.clone(), b.clone()))),
        ];
        let names = [
            "identity", "even", "odd", "gt0", "square", "inc", "double", "sum", "pair",
        ];
        names.into_iter().zip(fns).collect()
    })
}

pub fn get(name: &str) -> Option<Function> {
    table().get(name).cloned()
}

pub fn names() -> impl Iterator<Item = &'static str> {
    table().keys().copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookups_share_identity() {
        assert_eq!(get("square").unwrap(), get("square").unwrap());
        assert!(get("cube").is_none());
        assert_eq!(names().count(), 9);
    }

    #[test]
    fn arithmetic_is_checked() {
        let square = get("square").unwrap();
        assert_eq!(square.call(Value::Int(4)).unwrap(), Value::Int(16));
        assert!(square.call(Value::Int(i64::MAX)).is_err());
        assert!(get("even").unwrap().call(Value::Bool(true)).is_err());
        let sum = get("sum").unwrap();
        assert_eq!(sum.call2(&Value::Int(2), &Value::Int(3)).unwrap(), Value::Int(5));
    }
}
