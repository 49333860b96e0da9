//! Dynamic values that flow through streams, and the function arguments
//! operators are instantiated with.
//!
//! Base-level streams carry integers, booleans and tuples. Meta-level streams
//! carry reified instructions and events; those travel as [`Value::Ext`] so
//! that the exact same operators and engine can process them.

use std::any::Any;
use std::fmt;
use std::sync::Arc;

/// An error value travelling on the `err` path of the stream protocol.
#[derive(Clone, Debug, PartialEq, Eq, Hash, thiserror::Error)]
#[error("{0}")]
pub struct StreamError(Arc<str>);

impl StreamError {
    pub fn new(message: impl AsRef<str>) -> StreamError {
        StreamError(Arc::from(message.as_ref()))
    }

    pub fn message(&self) -> &str {
        &self.0
    }
}

/// Extension values: anything that is not plain data but still has to be
/// streamed, e.g. meta-level events.
pub trait ExtValue: Any + Send + Sync + fmt::Debug {
    fn as_any(&self) -> &dyn Any;

    fn into_any(self: Arc<Self>) -> Arc<dyn Any + Send + Sync>;

    /// Structural equality with another extension value. Defaults to never
    /// equal; [`Value`] equality falls back to pointer identity in that case.
    fn ext_eq(&self, _other: &dyn ExtValue) -> bool {
        false
    }
}

#[derive(Clone, Default)]
pub enum Value {
    #[default]
    Unit,
    Bool(bool),
    Int(i64),
    Str(Arc<str>),
    Tuple(Arc<[Value]>),
    List(Arc<Vec<Value>>),
    Ext(Arc<dyn ExtValue>),
}

impl Value {
    pub fn str(s: impl AsRef<str>) -> Value {
        Value::Str(Arc::from(s.as_ref()))
    }

    pub fn pair(left: Value, right: Value) -> Value {
        Value::Tuple(Arc::from(vec![left, right]))
    }

    pub fn list(items: impl IntoIterator<Item = Value>) -> Value {
        Value::List(Arc::new(items.into_iter().collect()))
    }

    pub fn ext<T: ExtValue>(value: T) -> Value {
        Value::Ext(Arc::new(value))
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(items) => Some(items),
            _ => None,
        }
    }

    /// Everything except `false` and unit is truthy.
    pub fn truthy(&self) -> bool {
        !matches!(self, Value::Bool(false) | Value::Unit)
    }

    pub fn downcast_ref<T: ExtValue>(&self) -> Option<&T> {
        match self {
            Value::Ext(ext) => ext.as_any().downcast_ref::<T>(),
            _ => None,
        }
    }

    /// Takes the extension payload out of the value, cloning only if the
    /// payload is shared.
    pub fn downcast<T: ExtValue + Clone>(self) -> Result<T, Value> {
        match self {
            Value::Ext(ext) if ext.as_any().is::<T>() => {
                let any = ext.into_any();
                let arc = any.downcast::<T>().expect("type checked above");
                Ok(Arc::try_unwrap(arc).unwrap_or_else(|shared| (*shared).clone()))
            }
            other => Err(other),
        }
    }

    /// Appends to a list value in place when the list is not shared.
    pub fn push(&mut self, item: Value) -> Result<(), StreamError> {
        match self {
            Value::List(items) => {
                Arc::make_mut(items).push(item);
                Ok(())
            }
            other => Err(StreamError::new(format!("cannot append to {other}"))),
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::Unit, Value::Unit) => true,
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Int(a), Value::Int(b)) => a == b,
            (Value::Str(a), Value::Str(b)) => a == b,
            (Value::Tuple(a), Value::Tuple(b)) => a == b,
            (Value::List(a), Value::List(b)) => a == b,
            (Value::Ext(a), Value::Ext(b)) => {
                std::ptr::addr_eq(Arc::as_ptr(a), Arc::as_ptr(b)) || a.ext_eq(b.as_ref())
            }
            _ => false,
        }
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Value {
        Value::Int(i)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Value {
        Value::Bool(b)
    }
}

fn write_seq(f: &mut fmt::Formatter<'_>, open: &str, items: &[Value], close: &str) -> fmt::Result {
    f.write_str(open)?;
    for (i, item) in items.iter().enumerate() {
        if i > 0 {
            f.write_str(",")?;
        }
        write!(f, "{item}")?;
    }
    f.write_str(close)
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Unit => f.write_str("nil"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Str(s) => write!(f, "{s:?}"),
            Value::Tuple(items) => write_seq(f, "(", items, ")"),
            Value::List(items) => write_seq(f, "[", items, "]"),
            Value::Ext(ext) => write!(f, "{ext:?}"),
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

pub type FnResult = Result<Value, StreamError>;

type RefFn = dyn Fn(&Value) -> FnResult + Send + Sync;
type OwnedFn = dyn Fn(Value) -> FnResult + Send + Sync;
type BinaryFn = dyn Fn(&Value, &Value) -> FnResult + Send + Sync;

#[derive(Clone)]
enum Body {
    Ref(Arc<RefFn>),
    Owned(Arc<OwnedFn>),
    Binary(Arc<BinaryFn>),
}

/// A host function used as an operator argument.
///
/// Functions are opaque: two functions are equal only if they are the same
/// instance. Unary functions come in two flavours, borrowing and owning; an
/// owning function lets meta-level stages move reified state instead of
/// cloning it.
#[derive(Clone)]
pub struct Function {
    name: Arc<str>,
    body: Body,
}

impl Function {
    pub fn unary(
        name: impl AsRef<str>,
        f: impl Fn(&Value) -> FnResult + Send + Sync + 'static,
    ) -> Function {
        Function {
            name: Arc::from(name.as_ref()),
            body: Body::Ref(Arc::new(f)),
        }
    }

    pub fn owned(
        name: impl AsRef<str>,
        f: impl Fn(Value) -> FnResult + Send + Sync + 'static,
    ) -> Function {
        Function {
            name: Arc::from(name.as_ref()),
            body: Body::Owned(Arc::new(f)),
        }
    }

    pub fn binary(
        name: impl AsRef<str>,
        f: impl Fn(&Value, &Value) -> FnResult + Send + Sync + 'static,
    ) -> Function {
        Function {
            name: Arc::from(name.as_ref()),
            body: Body::Binary(Arc::new(f)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn arity(&self) -> usize {
        match self.body {
            Body::Ref(_) | Body::Owned(_) => 1,
            Body::Binary(_) => 2,
        }
    }

    pub fn call(&self, arg: Value) -> FnResult {
        match &self.body {
            Body::Ref(f) => f(&arg),
            Body::Owned(f) => f(arg),
            Body::Binary(_) => Err(self.arity_error(1)),
        }
    }

    pub fn call_ref(&self, arg: &Value) -> FnResult {
        match &self.body {
            Body::Ref(f) => f(arg),
            Body::Owned(f) => f(arg.clone()),
            Body::Binary(_) => Err(self.arity_error(1)),
        }
    }

    pub fn call2(&self, a: &Value, b: &Value) -> FnResult {
        match &self.body {
            Body::Binary(f) => f(a, b),
            _ => Err(self.arity_error(2)),
        }
    }

    fn arity_error(&self, called_with: usize) -> StreamError {
        StreamError::new(format!(
            "{} has arity {}, called with {called_with}",
            self.name,
            self.arity()
        ))
    }

    /// `self` followed by `next`, i.e. `v -> next(self(v))`.
    pub fn and_then(&self, next: &Function) -> Function {
        let (first, second) = (self.clone(), next.clone());
        Function::owned(format!("{}>>{}", self.name, next.name), move |v| {
            second.call(first.call(v)?)
        })
    }

    pub fn same(&self, other: &Function) -> bool {
        match (&self.body, &other.body) {
            (Body::Ref(a), Body::Ref(b)) => std::ptr::addr_eq(Arc::as_ptr(a), Arc::as_ptr(b)),
            (Body::Owned(a), Body::Owned(b)) => std::ptr::addr_eq(Arc::as_ptr(a), Arc::as_ptr(b)),
            (Body::Binary(a), Body::Binary(b)) => {
                std::ptr::addr_eq(Arc::as_ptr(a), Arc::as_ptr(b))
            }
            _ => false,
        }
    }
}

impl PartialEq for Function {
    fn eq(&self, other: &Function) -> bool {
        self.same(other)
    }
}

impl fmt::Debug for Function {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

impl fmt::Display for Function {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truthiness() {
        assert!(!Value::Bool(false).truthy());
        assert!(!Value::Unit.truthy());
        assert!(Value::Int(0).truthy());
        assert!(Value::Bool(true).truthy());
    }

    #[test]
    fn display_is_compact() {
        let v = Value::list([Value::pair(1.into(), 2.into()), Value::Int(-3)]);
        assert_eq!(v.to_string(), "[(1,2),-3]");
    }

    #[test]
    fn functions_compare_by_identity() {
        let f = Function::unary("id", |v| Ok(v.clone()));
        let g = Function::unary("id", |v| Ok(v.clone()));
        assert_eq!(f, f.clone());
        assert_ne!(f, g);
    }

    #[test]
    fn composition_applies_left_first() {
        let square = Function::unary("square", |v| Ok(Value::Int(v.as_int().unwrap().pow(2))));
        let inc = Function::unary("inc", |v| Ok(Value::Int(v.as_int().unwrap() + 1)));
        let fused = square.and_then(&inc);
        assert_eq!(fused.call(Value::Int(3)).unwrap(), Value::Int(10));
        assert_eq!(fused.name(), "square>>inc");
    }

    #[test]
    fn push_appends_in_place_when_unique() {
        let mut list = Value::list([]);
        list.push(Value::Int(1)).unwrap();
        list.push(Value::Int(2)).unwrap();
        assert_eq!(list, Value::list([Value::Int(1), Value::Int(2)]));
        assert!(Value::Int(1).push(Value::Unit).is_err());
    }
}
