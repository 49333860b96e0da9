//! The pipeline expression grammar.
//!
//! ```text
//! pipeline := source '~>' (stage '~>')* sink
//! source   := 'range(' int ',' int ')' | 'list([' (int (',' int)*)? '])'
//! stage    := 'map(' fn (',' 'par')? ')' | 'filter(' fn ')' | 'scan(' fn ',' literal ')'
//!           | 'dup(' n ')' | 'balance(' n ')' | 'merge(' n ')' | 'zip'
//!           | '(' segment ('|||' segment)+ ')'
//! segment  := stage ('~>' stage)*
//! sink     := 'collect' | 'foreach(print)'
//! ```
//!
//! Function names must exist in the registry.

use std::fmt;

use metastream::registry;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SourceExpr {
    Range(i64, i64),
    List(Vec<i64>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Literal {
    Int(i64),
    Bool(bool),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StageExpr {
    Map { function: String, parallel: bool },
    Filter(String),
    Scan(String, Literal),
    Dup(usize),
    Balance(usize),
    Merge(usize),
    Zip,
    /// Segments placed side by side.
    Group(Vec<Vec<StageExpr>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SinkExpr {
    Collect,
    Print,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineExpr {
    pub source: SourceExpr,
    pub stages: Vec<StageExpr>,
    pub sink: SinkExpr,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("at column {}: {message}", .position + 1)]
pub struct ParseError {
    /// Byte offset into the input.
    pub position: usize,
    pub message: String,
}

impl fmt::Display for SourceExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceExpr::Range(a, b) => write!(f, "range({a},{b})"),
            SourceExpr::List(items) => {
                let items: Vec<String> = items.iter().map(i64::to_string).collect();
                write!(f, "list([{}])", items.join(","))
            }
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Int(i) => write!(f, "{i}"),
            Literal::Bool(b) => write!(f, "{b}"),
        }
    }
}

fn write_segment(f: &mut fmt::Formatter<'_>, stages: &[StageExpr]) -> fmt::Result {
    for (i, stage) in stages.iter().enumerate() {
        if i > 0 {
            f.write_str(" ~> ")?;
        }
        write!(f, "{stage}")?;
    }
    Ok(())
}

impl fmt::Display for StageExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageExpr::Map { function, parallel: false } => write!(f, "map({function})"),
            StageExpr::Map { function, parallel: true } => write!(f, "map({function},par)"),
            StageExpr::Filter(function) => write!(f, "filter({function})"),
            StageExpr::Scan(function, init) => write!(f, "scan({function},{init})"),
            StageExpr::Dup(n) => write!(f, "dup({n})"),
            StageExpr::Balance(n) => write!(f, "balance({n})"),
            StageExpr::Merge(n) => write!(f, "merge({n})"),
            StageExpr::Zip => f.write_str("zip"),
            StageExpr::Group(segments) => {
                f.write_str("(")?;
                for (i, segment) in segments.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" ||| ")?;
                    }
                    write_segment(f, segment)?;
                }
                f.write_str(")")
            }
        }
    }
}

impl fmt::Display for SinkExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SinkExpr::Collect => "collect",
            SinkExpr::Print => "foreach(print)",
        })
    }
}

impl fmt::Display for PipelineExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~> ", self.source)?;
        for stage in &self.stages {
            write!(f, "{stage} ~> ")?;
        }
        write!(f, "{}", self.sink)
    }
}

struct Parser<'a> {
    text: &'a str,
    pos: usize,
}

type Parsed<T> = Result<T, ParseError>;

impl<'a> Parser<'a> {
    fn error<T>(&self, at: usize, message: impl Into<String>) -> Parsed<T> {
        Err(ParseError {
            position: at,
            message: message.into(),
        })
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_space(&mut self) {
        let trimmed = self.rest().trim_start();
        self.pos = self.text.len() - trimmed.len();
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_space();
        if self.rest().starts_with(token) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, token: &str) -> Parsed<()> {
        if self.eat(token) {
            Ok(())
        } else {
            let found = self.rest().chars().next().map_or("end of input".to_string(), |c| format!("{c:?}"));
            self.error(self.pos, format!("expected {token:?}, found {found}"))
        }
    }

    fn word(&mut self) -> Parsed<(usize, &'a str)> {
        self.skip_space();
        let start = self.pos;
        let len = self
            .rest()
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(self.rest().len());
        if len == 0 {
            return self.error(start, "expected a name");
        }
        self.pos += len;
        Ok((start, &self.text[start..self.pos]))
    }

    fn int(&mut self) -> Parsed<i64> {
        self.skip_space();
        let start = self.pos;
        let sign = usize::from(self.rest().starts_with('-'));
        let digits = self.rest()[sign..]
            .find(|c: char| !c.is_ascii_digit())
            .unwrap_or(self.rest().len() - sign);
        if digits == 0 {
            return self.error(start, "expected an integer");
        }
        self.pos += sign + digits;
        self.text[start..self.pos]
            .parse()
            .or_else(|_| self.error(start, "integer out of range"))
    }

    fn count(&mut self) -> Parsed<usize> {
        self.skip_space();
        let at = self.pos;
        match self.int()? {
            n if n > 0 => Ok(n as usize),
            _ => self.error(at, "expected a positive count"),
        }
    }

    fn function(&mut self) -> Parsed<String> {
        let (at, name) = self.word()?;
        if registry::get(name).is_none() {
            let known: Vec<&str> = registry::names().collect();
            return self.error(at, format!("unknown function {name:?}; known: {}", known.join(", ")));
        }
        Ok(name.to_string())
    }

    fn literal(&mut self) -> Parsed<Literal> {
        if self.eat("true") {
            Ok(Literal::Bool(true))
        } else if self.eat("false") {
            Ok(Literal::Bool(false))
        } else {
            self.int().map(Literal::Int)
        }
    }

    fn source(&mut self) -> Parsed<SourceExpr> {
        let (at, name) = self.word()?;
        match name {
            "range" => {
                self.expect("(")?;
                let a = self.int()?;
                self.expect(",")?;
                let b = self.int()?;
                self.expect(")")?;
                Ok(SourceExpr::Range(a, b))
            }
            "list" => {
                self.expect("(")?;
                self.expect("[")?;
                let mut items = Vec::new();
                if !self.eat("]") {
                    loop {
                        items.push(self.int()?);
                        if self.eat("]") {
                            break;
                        }
                        self.expect(",")?;
                    }
                }
                self.expect(")")?;
                Ok(SourceExpr::List(items))
            }
            other => self.error(at, format!("expected a source (range or list), found {other:?}")),
        }
    }

    fn segment(&mut self) -> Parsed<Vec<StageExpr>> {
        let mut stages = vec![self.stage()?];
        while self.eat("~>") {
            stages.push(self.stage()?);
        }
        Ok(stages)
    }

    fn stage(&mut self) -> Parsed<StageExpr> {
        if self.eat("(") {
            let mut segments = vec![self.segment()?];
            while self.eat("|||") {
                segments.push(self.segment()?);
            }
            self.expect(")")?;
            if segments.len() < 2 {
                return self.error(self.pos, "a group needs at least two branches joined by |||");
            }
            return Ok(StageExpr::Group(segments));
        }
        let (at, name) = self.word()?;
        let stage = match name {
            "zip" => return Ok(StageExpr::Zip),
            "map" => {
                self.expect("(")?;
                let function = self.function()?;
                let parallel = self.eat(",") && {
                    self.expect("par")?;
                    true
                };
                StageExpr::Map { function, parallel }
            }
            "filter" => {
                self.expect("(")?;
                StageExpr::Filter(self.function()?)
            }
            "scan" => {
                self.expect("(")?;
                let function = self.function()?;
                self.expect(",")?;
                StageExpr::Scan(function, self.literal()?)
            }
            "dup" => {
                self.expect("(")?;
                StageExpr::Dup(self.count()?)
            }
            "balance" => {
                self.expect("(")?;
                StageExpr::Balance(self.count()?)
            }
            "merge" => {
                self.expect("(")?;
                StageExpr::Merge(self.count()?)
            }
            other => return self.error(at, format!("unknown operator {other:?}")),
        };
        self.expect(")")?;
        Ok(stage)
    }

    fn sink(&mut self) -> Parsed<Option<SinkExpr>> {
        let start = self.pos;
        if self.eat("collect") && self.at_boundary() {
            return Ok(Some(SinkExpr::Collect));
        }
        self.pos = start;
        if self.eat("foreach") {
            self.expect("(")?;
            self.expect("print")?;
            self.expect(")")?;
            return Ok(Some(SinkExpr::Print));
        }
        self.pos = start;
        Ok(None)
    }

    fn at_boundary(&self) -> bool {
        !self
            .rest()
            .starts_with(|c: char| c.is_ascii_alphanumeric() || c == '_' || c == '(')
    }
}

pub fn parse_pipeline(text: &str) -> Result<PipelineExpr, ParseError> {
    let mut p = Parser { text, pos: 0 };
    let source = p.source()?;
    let mut stages = Vec::new();
    let sink = loop {
        p.expect("~>")?;
        if let Some(sink) = p.sink()? {
            break sink;
        }
        stages.push(p.stage()?);
    };
    p.skip_space();
    if !p.rest().is_empty() {
        return p.error(p.pos, "unexpected input after the sink");
    }
    Ok(PipelineExpr { source, stages, sink })
}
