//! Section-based config text for [`SystemSpec`].
//!
//! ```text
//! [system]
//! name = "barreira-valls"
//! dimension = 2
//!
//! [matrix]
//! a_1_1 = "-(1.0 + 0.1*t*sin(t))"
//! a_1_2 = "0"
//! a_2_1 = "0"
//! a_2_2 = "1.0 + 0.1*t*sin(t)"
//!
//! [nonlinearity]
//! term = { l = [0, 2], j = 1, coeff = "1" }
//!
//! [grid]
//! entry = "a_2_1"
//! t0 = 0.0
//! dt = 0.5
//! values = [0.0, 0.25, 1.0]
//! ```
//!
//! An entry is given either in `[matrix]` or by one `[grid]` block. `version`
//! in `[system]` is optional; only version 1 exists.

use std::fmt;
use std::fmt::Write as _;

use crate::expr::{Expr, ParseErrorKind};
use crate::system::{SampleGrid, SystemSpec, Term, TimeExpression};

pub const GRAMMAR_VERSION: i64 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigError {
    pub line: usize,
    pub column: usize,
    pub kind: ConfigErrorKind,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConfigErrorKind {
    Syntax(String),
    Expression(String),
    UnknownFunction(String),
    DegreeTooLow(Vec<u32>),
    DimensionMismatch(String),
    Missing(String),
    Duplicate(String),
    UnknownKey(String),
    UnsupportedVersion(i64),
    BadGrid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: ", self.line, self.column)?;
        match &self.kind {
            ConfigErrorKind::Syntax(m) => write!(f, "syntax error: {m}"),
            ConfigErrorKind::Expression(m) => write!(f, "expression error: {m}"),
            ConfigErrorKind::UnknownFunction(n) => write!(f, "unknown function '{n}'"),
            ConfigErrorKind::DegreeTooLow(l) => write!(f, "nonlinear term {l:?} has degree below 2"),
            ConfigErrorKind::DimensionMismatch(m) => write!(f, "dimension mismatch: {m}"),
            ConfigErrorKind::Missing(m) => write!(f, "missing {m}"),
            ConfigErrorKind::Duplicate(m) => write!(f, "duplicate {m}"),
            ConfigErrorKind::UnknownKey(k) => write!(f, "unknown key '{k}'"),
            ConfigErrorKind::UnsupportedVersion(v) => write!(f, "unsupported grammar version {v}"),
            ConfigErrorKind::BadGrid(m) => write!(f, "invalid grid: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug)]
enum Value {
    Str(String),
    Num(f64, String),
    Array(Vec<(Value, usize)>),
    Table(Vec<(String, Value, usize)>),
}

impl Value {
    fn describe(&self) -> &'static str {
        match self {
            Value::Str(_) => "string",
            Value::Num(..) => "number",
            Value::Array(_) => "array",
            Value::Table(_) => "inline table",
        }
    }
}

struct Entry {
    key: String,
    key_pos: usize,
    value: Value,
    // byte offset of the value (for strings: first char inside the quotes)
    pos: usize,
}

struct Section {
    name: String,
    pos: usize,
    entries: Vec<Entry>,
}

struct Scanner<'a> {
    src: &'a str,
    b: &'a [u8],
    i: usize,
}

impl<'a> Scanner<'a> {
    fn err(&self, pos: usize, kind: ConfigErrorKind) -> ConfigError {
        let (line, column) = line_col(self.src, pos);
        ConfigError { line, column, kind }
    }

    fn syntax(&self, pos: usize, msg: impl Into<String>) -> ConfigError {
        self.err(pos, ConfigErrorKind::Syntax(msg.into()))
    }

    fn peek(&self) -> Option<u8> {
        self.b.get(self.i).copied()
    }

    // spaces, tabs and comments, but not newlines
    fn skip_inline(&mut self) {
        while let Some(c) = self.peek() {
            if c == b' ' || c == b'\t' || c == b'\r' {
                self.i += 1;
            } else if c == b'#' {
                while let Some(c) = self.peek() {
                    if c == b'\n' {
                        break;
                    }
                    self.i += 1;
                }
            } else {
                break;
            }
        }
    }

    fn skip_all(&mut self) {
        loop {
            self.skip_inline();
            if self.peek() == Some(b'\n') {
                self.i += 1;
            } else {
                break;
            }
        }
    }

    fn end_of_statement(&mut self) -> Result<(), ConfigError> {
        self.skip_inline();
        match self.peek() {
            None | Some(b'\n') => Ok(()),
            Some(c) => Err(self.syntax(self.i, format!("expected end of line, found '{}'", c as char))),
        }
    }

    fn ident(&mut self) -> Result<(String, usize), ConfigError> {
        let start = self.i;
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == b'_' || c == b'-' {
                self.i += 1;
            } else {
                break;
            }
        }
        if self.i == start {
            return Err(self.syntax(start, "expected a key"));
        }
        Ok((self.src[start..self.i].to_string(), start))
    }

    fn expect(&mut self, c: u8) -> Result<(), ConfigError> {
        if self.peek() == Some(c) {
            self.i += 1;
            Ok(())
        } else {
            Err(self.syntax(self.i, format!("expected '{}'", c as char)))
        }
    }

    fn value(&mut self) -> Result<(Value, usize), ConfigError> {
        let start = self.i;
        match self.peek() {
            Some(b'"') => {
                self.i += 1;
                let content = self.i;
                while let Some(c) = self.peek() {
                    if c == b'"' {
                        let s = self.src[content..self.i].to_string();
                        self.i += 1;
                        return Ok((Value::Str(s), content));
                    }
                    if c == b'\n' {
                        break;
                    }
                    self.i += 1;
                }
                Err(self.syntax(start, "unterminated string"))
            }
            Some(b'[') => {
                self.i += 1;
                let mut items = Vec::new();
                loop {
                    self.skip_all();
                    if self.peek() == Some(b']') {
                        self.i += 1;
                        return Ok((Value::Array(items), start));
                    }
                    items.push(self.value()?);
                    self.skip_all();
                    match self.peek() {
                        Some(b',') => self.i += 1,
                        Some(b']') => {}
                        None => return Err(self.syntax(start, "unterminated array")),
                        Some(c) => {
                            return Err(self.syntax(self.i, format!("expected ',' or ']', found '{}'", c as char)))
                        }
                    }
                }
            }
            Some(b'{') => {
                self.i += 1;
                let mut fields = Vec::new();
                loop {
                    self.skip_inline();
                    if self.peek() == Some(b'}') {
                        self.i += 1;
                        return Ok((Value::Table(fields), start));
                    }
                    let (key, _) = self.ident()?;
                    self.skip_inline();
                    self.expect(b'=')?;
                    self.skip_inline();
                    let (v, pos) = self.value()?;
                    fields.push((key, v, pos));
                    self.skip_inline();
                    match self.peek() {
                        Some(b',') => self.i += 1,
                        Some(b'}') => {}
                        None | Some(b'\n') => return Err(self.syntax(start, "unterminated inline table")),
                        Some(c) => {
                            return Err(self.syntax(self.i, format!("expected ',' or '}}', found '{}'", c as char)))
                        }
                    }
                }
            }
            Some(c) if c == b'-' || c == b'+' || c == b'.' || c.is_ascii_digit() => {
                while let Some(c) = self.peek() {
                    if c.is_ascii_alphanumeric() || c == b'-' || c == b'+' || c == b'.' {
                        self.i += 1;
                    } else {
                        break;
                    }
                }
                let text = &self.src[start..self.i];
                let v: f64 = text
                    .parse()
                    .map_err(|_| self.syntax(start, format!("malformed number '{text}'")))?;
                if !v.is_finite() {
                    return Err(self.syntax(start, format!("non-finite number '{text}'")));
                }
                Ok((Value::Num(v, text.to_string()), start))
            }
            None => Err(self.syntax(start, "expected a value")),
            Some(c) => Err(self.syntax(start, format!("unexpected '{}'", c as char))),
        }
    }
}

fn line_col(src: &str, pos: usize) -> (usize, usize) {
    let pos = pos.min(src.len());
    let before = &src[..pos];
    let line = before.matches('\n').count() + 1;
    let col = before.rfind('\n').map(|k| pos - k).unwrap_or(pos + 1);
    (line, col)
}

fn sections(src: &str) -> Result<Vec<Section>, ConfigError> {
    let mut sc = Scanner { src, b: src.as_bytes(), i: 0 };
    let mut out: Vec<Section> = Vec::new();
    loop {
        sc.skip_all();
        let Some(c) = sc.peek() else { break };
        if c == b'[' {
            let pos = sc.i;
            sc.i += 1;
            sc.skip_inline();
            let (name, _) = sc.ident()?;
            sc.skip_inline();
            sc.expect(b']')?;
            sc.end_of_statement()?;
            out.push(Section { name, pos, entries: Vec::new() });
        } else {
            let (key, key_pos) = sc.ident()?;
            sc.skip_inline();
            sc.expect(b'=')?;
            sc.skip_inline();
            let (value, pos) = sc.value()?;
            sc.end_of_statement()?;
            match out.last_mut() {
                Some(s) => s.entries.push(Entry { key, key_pos, value, pos }),
                None => return Err(sc.syntax(key_pos, "key outside of any section")),
            }
        }
    }
    Ok(out)
}

struct Ctx<'a> {
    src: &'a str,
}

impl Ctx<'_> {
    fn err(&self, pos: usize, kind: ConfigErrorKind) -> ConfigError {
        let (line, column) = line_col(self.src, pos);
        ConfigError { line, column, kind }
    }

    fn string<'v>(&self, v: &'v Value, pos: usize, what: &str) -> Result<&'v str, ConfigError> {
        match v {
            Value::Str(s) => Ok(s),
            other => Err(self.err(pos, ConfigErrorKind::Syntax(format!("{what} must be a string, found {}", other.describe())))),
        }
    }

    fn number(&self, v: &Value, pos: usize, what: &str) -> Result<f64, ConfigError> {
        match v {
            Value::Num(x, _) => Ok(*x),
            other => Err(self.err(pos, ConfigErrorKind::Syntax(format!("{what} must be a number, found {}", other.describe())))),
        }
    }

    fn integer(&self, v: &Value, pos: usize, what: &str) -> Result<i64, ConfigError> {
        match v {
            Value::Num(x, text) if x.fract() == 0.0 && !text.contains(['.', 'e', 'E']) => Ok(*x as i64),
            _ => Err(self.err(pos, ConfigErrorKind::Syntax(format!("{what} must be an integer")))),
        }
    }

    fn expression(&self, s: &str, pos: usize) -> Result<Expr, ConfigError> {
        Expr::parse(s).map_err(|e| {
            let at = pos + e.offset;
            match e.kind {
                ParseErrorKind::UnknownFunction(name) => self.err(at, ConfigErrorKind::UnknownFunction(name)),
                _ => self.err(at, ConfigErrorKind::Expression(e.to_string())),
            }
        })
    }
}

fn matrix_key(key: &str, n: usize) -> Option<(usize, usize)> {
    let rest = key.strip_prefix("a_")?;
    let (i, j) = rest.split_once('_')?;
    let i: usize = i.parse().ok()?;
    let j: usize = j.parse().ok()?;
    (i >= 1 && j >= 1 && i <= n && j <= n).then(|| (i - 1, j - 1))
}

/// Parse config text into a validated [`SystemSpec`].
pub fn parse_system(src: &str) -> Result<SystemSpec, ConfigError> {
    let ctx = Ctx { src };
    let secs = sections(src)?;

    let mut name: Option<String> = None;
    let mut dim: Option<(usize, usize)> = None;
    let mut seen_system = false;
    for s in secs.iter().filter(|s| s.name == "system") {
        if seen_system {
            return Err(ctx.err(s.pos, ConfigErrorKind::Duplicate("[system] section".into())));
        }
        seen_system = true;
        for e in &s.entries {
            match e.key.as_str() {
                "name" => name = Some(ctx.string(&e.value, e.pos, "name")?.to_string()),
                "dimension" => {
                    let d = ctx.integer(&e.value, e.pos, "dimension")?;
                    if d < 1 {
                        return Err(ctx.err(e.pos, ConfigErrorKind::DimensionMismatch("dimension must be positive".into())));
                    }
                    dim = Some((d as usize, e.pos));
                }
                "version" => {
                    let v = ctx.integer(&e.value, e.pos, "version")?;
                    if v != GRAMMAR_VERSION {
                        return Err(ctx.err(e.pos, ConfigErrorKind::UnsupportedVersion(v)));
                    }
                }
                other => return Err(ctx.err(e.key_pos, ConfigErrorKind::UnknownKey(other.into()))),
            }
        }
    }
    if !seen_system {
        return Err(ctx.err(0, ConfigErrorKind::Missing("[system] section".into())));
    }
    let name = name.ok_or_else(|| ctx.err(0, ConfigErrorKind::Missing("system name".into())))?;
    let (n, _) = dim.ok_or_else(|| ctx.err(0, ConfigErrorKind::Missing("system dimension".into())))?;

    let mut entries: Vec<Option<TimeExpression>> = vec![None; n * n];
    let mut terms = Vec::new();
    for s in &secs {
        match s.name.as_str() {
            "system" => {}
            "matrix" => {
                for e in &s.entries {
                    let (i, j) = matrix_key(&e.key, n).ok_or_else(|| {
                        let kind = if e.key.starts_with("a_") {
                            ConfigErrorKind::DimensionMismatch(format!("entry {} outside a {n}x{n} matrix", e.key))
                        } else {
                            ConfigErrorKind::UnknownKey(e.key.clone())
                        };
                        ctx.err(e.key_pos, kind)
                    })?;
                    if entries[i * n + j].is_some() {
                        return Err(ctx.err(e.key_pos, ConfigErrorKind::Duplicate(format!("entry {}", e.key))));
                    }
                    let text = ctx.string(&e.value, e.pos, &e.key)?;
                    entries[i * n + j] = Some(TimeExpression::Formula(ctx.expression(text, e.pos)?));
                }
            }
            "nonlinearity" => {
                for e in &s.entries {
                    if e.key != "term" {
                        return Err(ctx.err(e.key_pos, ConfigErrorKind::UnknownKey(e.key.clone())));
                    }
                    terms.push(parse_term(&ctx, &e.value, e.pos, n)?);
                }
            }
            "grid" => {
                let (target, grid) = parse_grid(&ctx, s, n)?;
                if entries[target].is_some() {
                    return Err(ctx.err(s.pos, ConfigErrorKind::Duplicate(format!(
                        "entry a_{}_{} (both formula and grid)",
                        target / n + 1,
                        target % n + 1
                    ))));
                }
                entries[target] = Some(TimeExpression::Sampled(grid));
            }
            other => {
                return Err(ctx.err(s.pos, ConfigErrorKind::UnknownKey(format!("[{other}]"))));
            }
        }
    }

    let mut full = Vec::with_capacity(n * n);
    for (k, e) in entries.into_iter().enumerate() {
        match e {
            Some(e) => full.push(e),
            None => {
                return Err(ctx.err(
                    src.len(),
                    ConfigErrorKind::Missing(format!("matrix entry a_{}_{}", k / n + 1, k % n + 1)),
                ))
            }
        }
    }
    Ok(SystemSpec { name, n, entries: full, nonlinearity: terms })
}

fn parse_term(ctx: &Ctx, v: &Value, pos: usize, n: usize) -> Result<Term, ConfigError> {
    let Value::Table(fields) = v else {
        return Err(ctx.err(pos, ConfigErrorKind::Syntax("term must be an inline table".into())));
    };
    let (mut l, mut j, mut coeff) = (None, None, None);
    for (key, val, p) in fields {
        match key.as_str() {
            "l" => {
                let Value::Array(items) = val else {
                    return Err(ctx.err(*p, ConfigErrorKind::Syntax("l must be an array".into())));
                };
                let mut idx = Vec::with_capacity(items.len());
                for (it, ip) in items {
                    let k = ctx.integer(it, *ip, "multi-index entry")?;
                    if k < 0 {
                        return Err(ctx.err(*ip, ConfigErrorKind::Syntax("multi-index entries must be nonnegative".into())));
                    }
                    idx.push(k as u32);
                }
                if idx.len() != n {
                    return Err(ctx.err(*p, ConfigErrorKind::DimensionMismatch(format!(
                        "multi-index has {} entries, dimension is {n}",
                        idx.len()
                    ))));
                }
                if idx.iter().sum::<u32>() < 2 {
                    return Err(ctx.err(*p, ConfigErrorKind::DegreeTooLow(idx)));
                }
                l = Some(idx);
            }
            "j" => {
                let k = ctx.integer(val, *p, "j")?;
                if k < 1 || k as usize > n {
                    return Err(ctx.err(*p, ConfigErrorKind::DimensionMismatch(format!("component {k} not in 1..{n}"))));
                }
                j = Some(k as usize - 1);
            }
            "coeff" => {
                let text = ctx.string(val, *p, "coeff")?;
                coeff = Some(TimeExpression::Formula(ctx.expression(text, *p)?));
            }
            other => return Err(ctx.err(*p, ConfigErrorKind::UnknownKey(other.into()))),
        }
    }
    let missing = |what: &str| ctx.err(pos, ConfigErrorKind::Missing(format!("term field '{what}'")));
    Ok(Term {
        l: l.ok_or_else(|| missing("l"))?,
        j: j.ok_or_else(|| missing("j"))?,
        coeff: coeff.ok_or_else(|| missing("coeff"))?,
    })
}

fn parse_grid(ctx: &Ctx, s: &Section, n: usize) -> Result<(usize, SampleGrid), ConfigError> {
    let (mut target, mut t0, mut dt, mut values) = (None, None, None, None);
    for e in &s.entries {
        match e.key.as_str() {
            "entry" => {
                let key = ctx.string(&e.value, e.pos, "entry")?;
                let (i, j) = matrix_key(key, n).ok_or_else(|| {
                    ctx.err(e.pos, ConfigErrorKind::DimensionMismatch(format!("grid entry '{key}' is not a matrix entry")))
                })?;
                target = Some(i * n + j);
            }
            "t0" => t0 = Some(ctx.number(&e.value, e.pos, "t0")?),
            "dt" => dt = Some((ctx.number(&e.value, e.pos, "dt")?, e.pos)),
            "values" => {
                let Value::Array(items) = &e.value else {
                    return Err(ctx.err(e.pos, ConfigErrorKind::Syntax("values must be an array".into())));
                };
                let mut vs = Vec::with_capacity(items.len());
                for (it, ip) in items {
                    vs.push(ctx.number(it, *ip, "grid value")?);
                }
                values = Some((vs, e.pos));
            }
            other => return Err(ctx.err(e.key_pos, ConfigErrorKind::UnknownKey(other.into()))),
        }
    }
    let missing = |what: &str| ctx.err(s.pos, ConfigErrorKind::Missing(format!("grid field '{what}'")));
    let target = target.ok_or_else(|| missing("entry"))?;
    let t0 = t0.ok_or_else(|| missing("t0"))?;
    let (dt, dt_pos) = dt.ok_or_else(|| missing("dt"))?;
    let (values, v_pos) = values.ok_or_else(|| missing("values"))?;
    if !(dt > 0.0) {
        return Err(ctx.err(dt_pos, ConfigErrorKind::BadGrid("dt must be positive".into())));
    }
    if values.len() < 2 {
        return Err(ctx.err(v_pos, ConfigErrorKind::BadGrid("at least 2 samples required".into())));
    }
    let grid = SampleGrid::new(t0, dt, values).map_err(|e| ctx.err(s.pos, ConfigErrorKind::BadGrid(e.to_string())))?;
    Ok((target, grid))
}

/// Canonical config text; `parse_system(&print_system(s))` reproduces `s`.
pub fn print_system(spec: &SystemSpec) -> String {
    let n = spec.n;
    let mut out = String::new();
    let _ = writeln!(out, "[system]");
    let _ = writeln!(out, "name = \"{}\"", spec.name);
    let _ = writeln!(out, "dimension = {n}");
    let _ = writeln!(out, "\n[matrix]");
    for i in 0..n {
        for j in 0..n {
            if let TimeExpression::Formula(e) = spec.entry(i, j) {
                let _ = writeln!(out, "a_{}_{} = \"{}\"", i + 1, j + 1, e);
            }
        }
    }
    if !spec.nonlinearity.is_empty() {
        let _ = writeln!(out, "\n[nonlinearity]");
        for term in &spec.nonlinearity {
            let l: Vec<String> = term.l.iter().map(|x| x.to_string()).collect();
            let coeff = match &term.coeff {
                TimeExpression::Formula(e) => e.to_string(),
                TimeExpression::Sampled(_) => unreachable!("sampled nonlinear coefficients are not part of the grammar"),
            };
            let _ = writeln!(out, "term = {{ l = [{}], j = {}, coeff = \"{}\" }}", l.join(", "), term.j + 1, coeff);
        }
    }
    for i in 0..n {
        for j in 0..n {
            if let TimeExpression::Sampled(g) = spec.entry(i, j) {
                let vals: Vec<String> = g.values.iter().map(|v| format!("{v:?}")).collect();
                let _ = writeln!(out, "\n[grid]");
                let _ = writeln!(out, "entry = \"a_{}_{}\"", i + 1, j + 1);
                let _ = writeln!(out, "t0 = {:?}", g.t0);
                let _ = writeln!(out, "dt = {:?}", g.dt);
                let _ = writeln!(out, "values = [{}]", vals.join(", "));
            }
        }
    }
    out
}
