//! Library side of the `metastream` command: parsing, lowering, and the
//! four commands.

pub mod bench;
pub mod lower;
pub mod parse;

use std::path::PathBuf;

use metastream::graph::{Dag, Violation};
use metastream::metac::{self, CompileError, UnknownStructural};
use metastream::metar::{self, UnknownBehavior};
use metastream::runtime::{deploy, DeployError, DeployOptions, Endpoint};
use metastream::value::{StreamError, Value};

use crate::lower::{INPUT, OUTPUT};
use crate::parse::{parse_pipeline, ParseError, PipelineExpr, SinkExpr};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error {0}")]
    Parse(#[from] ParseError),
    #[error("invalid pipeline:\n{}", .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Behavior(#[from] UnknownBehavior),
    #[error(transparent)]
    Structural(#[from] UnknownStructural),
    #[error("compilation failed: {0}")]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Usage(String),
    #[error("stream failed: {0}")]
    Stream(StreamError),
}

impl CliError {
    /// 2 for failures of a running stream, 1 for everything the user can fix.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Stream(_) => 2,
            _ => 1,
        }
    }
}

/// Parses, lowers and validates.
pub fn prepare(text: &str) -> Result<(PipelineExpr, Dag), CliError> {
    let expr = parse_pipeline(text)?;
    let dag = lower::lower(&expr);
    dag.validate().map_err(CliError::Invalid)?;
    Ok((expr, dag))
}

/// Applies a structural behavior by name (`none` skips the meta level).
pub fn restructure(dag: &Dag, structural: &str) -> Result<Dag, CliError> {
    let meta = metac::by_name(structural)?;
    Ok(metac::compile(dag, meta.as_ref())?)
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub behavior: String,
    pub structural: String,
    pub trace: Option<PathBuf>,
    pub deterministic: bool,
    pub seed: u64,
}

impl Default for RunOptions {
    fn default() -> RunOptions {
        RunOptions {
            behavior: "none".into(),
            structural: "none".into(),
            trace: None,
            deterministic: false,
            seed: 0,
        }
    }
}

fn strip_stamps(value: Value) -> Value {
    match value {
        Value::List(items) => Value::list(items.iter().map(metac::unstamp)),
        other => other,
    }
}

/// Runs a pipeline. Returns what a collecting sink delivered; a printing
/// sink has already written its values.
pub fn run(text: &str, options: &RunOptions) -> Result<Option<Value>, CliError> {
    let (expr, dag) = prepare(text)?;
    let dag = restructure(&dag, &options.structural)?;
    let behavior = metar::by_name(&options.behavior)?;
    let mut deploy_options = if options.deterministic {
        DeployOptions::deterministic(options.seed)
    } else {
        DeployOptions {
            seed: options.seed,
            ..DeployOptions::default()
        }
    };
    deploy_options.trace |= options.trace.is_some();
    let outcome = deploy(
        &dag,
        [
            (INPUT, Endpoint::Source(lower::source(&expr.source))),
            (OUTPUT, Endpoint::Sink(lower::sink(expr.sink))),
        ],
        &behavior,
        deploy_options,
    )?
    .wait();
    if let Some(path) = &options.trace {
        std::fs::write(path, outcome.trace_text())?;
    }
    let value = outcome.into_single().map_err(CliError::Stream)?;
    Ok(match expr.sink {
        SinkExpr::Collect => Some(strip_stamps(value)),
        SinkExpr::Print => None,
    })
}

/// The instruction sequence of the pipeline, then the compiled DAG.
pub fn compile(text: &str, structural: &str) -> Result<String, CliError> {
    let (_, dag) = prepare(text)?;
    let compiled = restructure(&dag, structural)?;
    let mut out = String::from("# instructions\n");
    for instr in metac::emit_instructions(&dag) {
        out.push_str(&format!("{instr}\n"));
    }
    out.push_str("# dag\n");
    out.push_str(&compiled.to_string());
    Ok(out)
}

pub fn validate(text: &str) -> Result<String, CliError> {
    let (_, dag) = prepare(text)?;
    Ok(format!(
        "ok: {} operators, {} edges\n",
        dag.operator_count(),
        dag.edge_count()
    ))
}
