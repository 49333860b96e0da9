//! A stream DSL with a compile-time meta-protocol that rewrites DAG
//! construction, and a run-time meta-protocol that intercepts the messages
//! exchanged between operators.
//!
//! ```
//! use metastream::prelude::*;
//!
//! let program = chain([
//!     &Dag::single(OperatorSpec::filter(registry::get("even").unwrap())).unwrap(),
//!     &Dag::single(OperatorSpec::map(registry::get("square").unwrap())).unwrap(),
//! ])
//! .unwrap()
//! .close(&["input", "output"])
//! .unwrap();
//!
//! let handle = deploy_fast(
//!     &program,
//!     vec![
//!         ("input", Endpoint::Source(SourceSpec::range(1, 10))),
//!         ("output", Endpoint::Sink(SinkSpec::CollectAll)),
//!     ],
//!     DeployOptions::default(),
//! )
//! .unwrap();
//! let out = handle.wait().into_single().unwrap();
//! assert_eq!(out.to_string(), "[4,16,36,64,100]");
//! ```

pub mod graph;
pub mod instrument;
pub mod metac;
pub mod metar;
pub mod operators;
pub mod registry;
pub mod runtime;
pub mod value;

pub mod prelude {
    pub use crate::graph::{chain, compose_horizontal, compose_vertical, parallel, Dag, OperatorSpec};
    pub use crate::operators::{SinkSpec, SourceSpec};
    pub use crate::registry;
    pub use crate::runtime::{deploy, deploy_fast, DeployOptions, Endpoint};
    pub use crate::value::{Function, StreamError, Value};
}

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/dags.md")]
    mod dags {}
    #[doc = include_str!("../../../book/src/operators.md")]
    mod operators {}
    #[doc = include_str!("../../../book/src/runtime.md")]
    mod runtime {}
    #[doc = include_str!("../../../book/src/structural.md")]
    mod structural {}
    #[doc = include_str!("../../../book/src/behavioral.md")]
    mod behavioral {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/benchmarks.md")]
    mod benchmarks {}
}
