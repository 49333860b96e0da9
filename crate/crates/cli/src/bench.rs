//! Timing the meta-enabled runtime against the fast path.
//!
//! `dagsize` sweeps the number of pass-through `map(identity)` operators at
//! a fixed load; `load` sweeps the number of values through a fixed chain.
//! Each cell reports the median of its repetitions.

use std::fmt;
use std::io;
use std::str::FromStr;
use std::time::Instant;

use metastream::graph::{chain, Dag, OperatorSpec};
use metastream::metar::{self, Behavior};
use metastream::operators::{SinkSpec, SourceSpec};
use metastream::registry;
use metastream::runtime::{deploy, deploy_fast, DeployOptions, Endpoint};

use crate::CliError;

pub const HEADER: &str = "mode,ops,values,variant,behavior,rep,elapsed_ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Dagsize,
    Load,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dagsize => "dagsize",
            Mode::Load => "load",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Meta,
    Fast,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Meta => "meta",
            Variant::Fast => "fast",
        })
    }
}

/// `lo..hi` (inclusive) or a single number.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sweep {
    pub lo: u64,
    pub hi: u64,
}

impl FromStr for Sweep {
    type Err = String;

    fn from_str(s: &str) -> Result<Sweep, String> {
        let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("{t:?}: {e}"));
        let (lo, hi) = match s.split_once("..") {
            Some((a, b)) => (num(a)?, num(b.trim_start_matches('='))?),
            None => (num(s)?, num(s)?),
        };
        if lo > hi {
            return Err(format!("empty sweep {s:?}"));
        }
        Ok(Sweep { lo, hi })
    }
}

impl Sweep {
    /// `points` evenly spaced values from `lo` to `hi`.
    pub fn points(self, points: usize) -> Vec<u64> {
        if self.lo == self.hi || points <= 1 {
            return vec![self.lo];
        }
        let span = (self.hi - self.lo) as f64;
        let mut out: Vec<u64> = (0..points)
            .map(|k| self.lo + (span * k as f64 / (points - 1) as f64).round() as u64)
            .collect();
        out.dedup();
        out
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub mode: Mode,
    pub ops: Sweep,
    pub values: Sweep,
    /// Points along the swept axis.
    pub points: usize,
    pub reps: usize,
    /// Run-time behavior of the meta variant.
    pub behavior: String,
}

impl BenchConfig {
    pub fn new(mode: Mode) -> BenchConfig {
        let (ops, values) = match mode {
            Mode::Dagsize => (Sweep { lo: 0, hi: 500 }, Sweep { lo: 1000, hi: 1000 }),
            Mode::Load => (Sweep { lo: 250, hi: 250 }, Sweep { lo: 0, hi: 10_000 }),
        };
        BenchConfig {
            mode,
            ops,
            values,
            points: 6,
            reps: 5,
            behavior: "identity".to_string(),
        }
    }

    fn cells(&self) -> Vec<(u64, u64)> {
        let (ops, values) = match self.mode {
            Mode::Dagsize => (self.ops.points(self.points), vec![self.values.lo]),
            Mode::Load => (vec![self.ops.lo], self.values.points(self.points)),
        };
        ops.iter()
            .flat_map(|o| values.iter().map(move |v| (*o, *v)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub mode: String,
    pub ops: u64,
    pub values: u64,
    pub variant: String,
    pub behavior: String,
    /// Number of repetitions the median is taken over.
    pub rep: usize,
    pub elapsed_ms: f64,
}

/// `ops` pass-through maps between an `in` and an `out` socket.
pub fn identity_chain(ops: u64) -> Dag {
    if ops == 0 {
        return Dag::wire("in", "out").unwrap();
    }
    let one = Dag::single(OperatorSpec::map(registry::get("identity").unwrap())).unwrap();
    let parts: Vec<&Dag> = (0..ops).map(|_| &one).collect();
    chain(parts).unwrap().close(&["in", "out"]).unwrap()
}

fn time_once(dag: &Dag, values: u64, behavior: Option<&Behavior>) -> Result<f64, CliError> {
    let bindings = [
        ("in", Endpoint::Source(SourceSpec::range(1, values as i64))),
        ("out", Endpoint::Sink(SinkSpec::CollectAll)),
    ];
    let started = Instant::now();
    let handle = match behavior {
        Some(b) => deploy(dag, bindings, b, DeployOptions::default())?,
        None => deploy_fast(dag, bindings, DeployOptions::default())?,
    };
    let result = handle.wait().into_single().map_err(CliError::Stream)?;
    let elapsed = started.elapsed().as_secs_f64() * 1e3;
    let delivered = result.as_list().map_or(0, <[_]>::len) as u64;
    if delivered != values {
        return Err(CliError::Usage(format!("benchmark stream delivered {delivered} of {values} values")));
    }
    Ok(elapsed)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Runs every cell for both variants, calling `progress` as rows finish.
pub fn run_bench(config: &BenchConfig, mut progress: impl FnMut(&BenchRow)) -> Result<Vec<BenchRow>, CliError> {
    if config.reps < 5 {
        return Err(CliError::Usage("at least 5 repetitions are needed for a median".into()));
    }
    let behavior = metar::by_name(&config.behavior)?;
    let meta = (!behavior.is_none()).then_some(&behavior);
    let mut rows = Vec::new();
    let mut warmed = false;
    for (ops, values) in config.cells() {
        let dag = identity_chain(ops);
        if !warmed {
            time_once(&dag, values.min(1000), meta)?;
            time_once(&dag, values.min(1000), None)?;
            warmed = true;
        }
        let (mut slow, mut fast) = (Vec::new(), Vec::new());
        for _ in 0..config.reps {
            slow.push(time_once(&dag, values, meta)?);
            fast.push(time_once(&dag, values, None)?);
        }
        for (variant, name, samples) in [
            (Variant::Meta, behavior.name().to_string(), slow),
            (Variant::Fast, "none".to_string(), fast),
        ] {
            let row = BenchRow {
                mode: config.mode.to_string(),
                ops,
                values,
                variant: variant.to_string(),
                behavior: name,
                rep: config.reps,
                elapsed_ms: median(samples),
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn write_csv(rows: &[BenchRow], out: impl io::Write) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(HEADER.split(','))?;
    for r in rows {
        w.write_record([
            r.mode.clone(),
            r.ops.to_string(),
            r.values.to_string(),
            r.variant.clone(),
            r.behavior.clone(),
            r.rep.to_string(),
            format!("{:.3}", r.elapsed_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl io::Read) -> Result<Vec<BenchRow>, CliError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != HEADER {
        return Err(CliError::Usage(format!("unexpected header {:?}", header.join(","))));
    }
    let bad = |field: &str| CliError::Usage(format!("malformed field {field:?}"));
    let mut rows = Vec::new();
    for record in r.records() {
        let rec = record?;
        rows.push(BenchRow {
            mode: rec[0].to_string(),
            ops: rec[1].parse().map_err(|_| bad(&rec[1]))?,
            values: rec[2].parse().map_err(|_| bad(&rec[2]))?,
            variant: rec[3].to_string(),
            behavior: rec[4].to_string(),
            rep: rec[5].parse().map_err(|_| bad(&rec[5]))?,
            elapsed_ms: rec[6].parse().map_err(|_| bad(&rec[6]))?,
        });
    }
    Ok(rows)
}

/// Coefficient of determination of the least-squares line through `points`.
pub fn r_squared(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = points.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|(_, y)| (y - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

/// Median elapsed time against the swept axis, for one variant.
pub fn series(rows: &[BenchRow], variant: Variant) -> Vec<(f64, f64)> {
    let name = variant.to_string();
    rows.iter()
        .filter(|r| r.variant == name)
        .map(|r| {
            let x = if r.mode == "load" { r.values } else { r.ops };
            (x as f64, r.elapsed_ms)
        })
        .collect()
}

/// Per-cell meta/fast ratio, `None` when the fast time rounds to zero.
pub fn ratios(rows: &[BenchRow]) -> Vec<(u64, u64, Option<f64>)> {
    let find = |ops, values, v: &str| {
        rows.iter()
            .find(|r| r.ops == ops && r.values == values && r.variant == v)
            .map(|r| r.elapsed_ms)
    };
    let mut cells: Vec<(u64, u64)> = rows.iter().map(|r| (r.ops, r.values)).collect();
    cells.dedup();
    cells
        .into_iter()
        .filter_map(|(ops, values)| {
            let meta = find(ops, values, "meta")?;
            let fast = find(ops, values, "fast")?;
            Some((ops, values, (fast > 0.0).then(|| meta / fast)))
        })
        .collect()
}

/// The ratio table and the linear fit of each variant.
pub fn summary(rows: &[BenchRow]) -> String {
    let mut out = String::from("ops,values,meta/fast\n");
    for (ops, values, ratio) in ratios(rows) {
        let ratio = ratio.map_or("n/a".to_string(), |r| format!("{r:.2}"));
        out.push_str(&format!("{ops},{values},{ratio}\n"));
    }
    for variant in [Variant::Meta, Variant::Fast] {
        let points = series(rows, variant);
        if points.len() >= 2 {
            out.push_str(&format!("r2 {variant} = {:.4}\n", r_squared(&points)));
        }
    }
    out
}
