//! Grid case files and the DC measurement model.
//!
//! Case files use a strict subset of the MATPOWER `.m` syntax: scalar and
//! matrix assignments of the form `mpc.<name> = ...;`. Only `baseMVA`, `bus`,
//! `gen` and `branch` are interpreted; other assignments are parsed and
//! discarded.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::{self, Write as _};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// The IEEE 57-bus test case, as distributed with MATPOWER.
pub const IEEE57_CASE: &str = include_str!("../data/case57.m");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BusId(pub u32);

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusType {
    Slack,
    Pv,
    Pq,
}

impl BusType {
    fn from_code(code: f64) -> Option<Self> {
        match code as i64 {
            1 => Some(BusType::Pq),
            2 => Some(BusType::Pv),
            3 => Some(BusType::Slack),
            _ => None,
        }
    }

    fn code(self) -> u8 {
        match self {
            BusType::Pq => 1,
            BusType::Pv => 2,
            BusType::Slack => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bus {
    pub id: BusId,
    pub bus_type: BusType,
    pub load_mw: f64,
    pub base_kv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchStatus {
    InService,
    OutOfService,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub reactance_pu: f64,
    pub status: BranchStatus,
}

impl Branch {
    pub fn in_service(&self) -> bool {
        self.status == BranchStatus::InService
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub bus: BusId,
    pub pmax_mw: f64,
}

/// A validated network: one slack bus, unique ids, connected over in-service
/// branches.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub generators: Vec<Generator>,
}

impl GridCase {
    pub fn ieee57() -> Self {
        parse_case(IEEE57_CASE).expect("bundled IEEE 57-bus case is valid")
    }

    pub fn slack(&self) -> &Bus {
        self.buses
            .iter()
            .find(|b| b.bus_type == BusType::Slack)
            .expect("validated case has a slack bus")
    }

    pub fn bus_position(&self, id: BusId) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub fn in_service_branches(&self) -> impl Iterator<Item = (usize, &Branch)> {
        self.branches.iter().enumerate().filter(|(_, b)| b.in_service())
    }

    /// Non-slack bus ids in file order; this is the state ordering.
    pub fn state_buses(&self) -> Vec<BusId> {
        self.buses
            .iter()
            .filter(|b| b.bus_type != BusType::Slack)
            .map(|b| b.id)
            .collect()
    }

    /// Nominal bus loads in per-unit, in bus order.
    pub fn nominal_loads_pu(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.load_mw / self.base_mva).collect()
    }

    pub fn summary(&self) -> String {
        format!(
            "{} buses, {} branches, {} generators",
            self.buses.len(),
            self.in_service_branches().count(),
            self.generators.len()
        )
    }

    fn validate(&self) -> Result<()> {
        if !(self.base_mva.is_finite() && self.base_mva > 0.0) {
            return Err(Error::case(format!("baseMVA must be positive, got {}", self.base_mva)));
        }
        if self.buses.is_empty() {
            return Err(Error::case("no buses"));
        }
        let mut seen = HashSet::new();
        for bus in &self.buses {
            if !seen.insert(bus.id) {
                return Err(Error::case(format!("duplicate bus id {}", bus.id)));
            }
            if !bus.load_mw.is_finite() {
                return Err(Error::case(format!("bus {} has non-finite load", bus.id)));
            }
        }
        match self.buses.iter().filter(|b| b.bus_type == BusType::Slack).count() {
            0 => return Err(Error::case("no slack bus")),
            1 => {}
            _ => return Err(Error::case("multiple slack buses")),
        }
        for (i, br) in self.branches.iter().enumerate() {
            for end in [br.from_bus, br.to_bus] {
                if !seen.contains(&end) {
                    return Err(Error::case(format!("branch {} references unknown bus {end}", i + 1)));
                }
            }
            if br.from_bus == br.to_bus {
                return Err(Error::case(format!("branch {} is a self-loop at bus {}", i + 1, br.from_bus)));
            }
            if !(br.reactance_pu.is_finite() && br.reactance_pu > 0.0) {
                return Err(Error::case(format!(
                    "branch {} ({}-{}) has non-positive reactance {}",
                    i + 1,
                    br.from_bus,
                    br.to_bus,
                    br.reactance_pu
                )));
            }
        }
        for g in &self.generators {
            if !seen.contains(&g.bus) {
                return Err(Error::case(format!("generator references unknown bus {}", g.bus)));
            }
            if !(g.pmax_mw.is_finite() && g.pmax_mw >= 0.0) {
                return Err(Error::case(format!("generator at bus {} has invalid Pmax {}", g.bus, g.pmax_mw)));
            }
        }
        self.check_connected()
    }

    fn check_connected(&self) -> Result<()> {
        let pos: HashMap<BusId, usize> =
            self.buses.iter().enumerate().map(|(i, b)| (b.id, i)).collect();
        let mut adj = vec![Vec::new(); self.buses.len()];
        for (_, br) in self.in_service_branches() {
            let (f, t) = (pos[&br.from_bus], pos[&br.to_bus]);
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut visited = vec![false; self.buses.len()];
        let mut queue = VecDeque::from([0]);
        visited[0] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !visited[v] {
                    visited[v] = true;
                    queue.push_back(v);
                }
            }
        }
        match visited.iter().position(|v| !v) {
            Some(i) => Err(Error::case(format!(
                "disconnected network: bus {} is unreachable",
                self.buses[i].id
            ))),
            None => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Num(f64),
    Str,
    LBracket,
    RBracket,
    LBrace,
    RBrace,
    Eq,
    Semi,
    Comma,
    Newline,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Syntax { line, column, message: message.into() }
}

fn lex(text: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        let (tl, tc) = (line, col);
        let mut push = |tok| out.push(Token { tok, line: tl, column: tc });
        match c {
            '\n' => {
                push(Tok::Newline);
                i += 1;
                line += 1;
                col = 1;
                continue;
            }
            ' ' | '\t' | '\r' => {}
            '%' => {
                while i < chars.len() && chars[i] != '\n' {
                    i += 1;
                }
                continue;
            }
            '[' => push(Tok::LBracket),
            ']' => push(Tok::RBracket),
            '{' => push(Tok::LBrace),
            '}' => push(Tok::RBrace),
            '=' => push(Tok::Eq),
            ';' => push(Tok::Semi),
            ',' => push(Tok::Comma),
            '\'' | '"' => {
                let quote = c;
                let start = i;
                i += 1;
                col += 1;
                while i < chars.len() && chars[i] != quote {
                    if chars[i] == '\n' {
                        return Err(syntax(tl, tc, "unterminated string"));
                    }
                    i += 1;
                    col += 1;
                }
                if i == chars.len() {
                    return Err(syntax(tl, tc, "unterminated string"));
                }
                debug_assert!(i > start);
                push(Tok::Str);
            }
            c if c.is_ascii_digit() || c == '.' || c == '-' || c == '+' => {
                let start = i;
                i += 1;
                while i < chars.len() {
                    let d = chars[i];
                    let exp_sign = (d == '-' || d == '+') && matches!(chars[i - 1], 'e' | 'E');
                    if d.is_ascii_digit() || d == '.' || d == 'e' || d == 'E' || exp_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                let s: String = chars[start..i].iter().collect();
                let v = match s.as_str() {
                    "-" | "+" if i < chars.len() && chars[i].is_ascii_alphabetic() => {
                        // signed identifier such as -Inf
                        let id_start = i;
                        while i < chars.len() && chars[i].is_ascii_alphanumeric() {
                            i += 1;
                        }
                        let id: String = chars[id_start..i].iter().collect();
                        let mag = special_value(&id)
                            .ok_or_else(|| syntax(tl, tc, format!("invalid number '{s}{id}'")))?;
                        if s == "-" { -mag } else { mag }
                    }
                    _ => s
                        .parse::<f64>()
                        .map_err(|_| syntax(tl, tc, format!("invalid number '{s}'")))?,
                };
                col += i - start;
                out.push(Token { tok: Tok::Num(v), line: tl, column: tc });
                continue;
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    i += 1;
                }
                let s: String = chars[start..i].iter().collect();
                col += i - start;
                let tok = match special_value(&s) {
                    Some(v) => Tok::Num(v),
                    None => Tok::Ident(s),
                };
                out.push(Token { tok, line: tl, column: tc });
                continue;
            }
            other => return Err(syntax(tl, tc, format!("unexpected character '{other}'"))),
        }
        i += 1;
        col += 1;
    }
    Ok(out)
}

fn special_value(s: &str) -> Option<f64> {
    match s {
        "Inf" | "inf" => Some(f64::INFINITY),
        "NaN" | "nan" => Some(f64::NAN),
        _ => None,
    }
}

// ---------------------------------------------------------------------------
// Parser

enum Value {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
    Other,
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    eof: (usize, usize),
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn err_here(&self, message: impl Into<String>) -> Error {
        let (line, column) = self.peek().map(|t| (t.line, t.column)).unwrap_or(self.eof);
        syntax(line, column, message)
    }

    fn skip_separators(&mut self) {
        while matches!(self.peek().map(|t| &t.tok), Some(Tok::Newline | Tok::Semi | Tok::Comma)) {
            self.pos += 1;
        }
    }

    fn skip_line(&mut self) {
        while let Some(t) = self.next() {
            if t.tok == Tok::Newline {
                break;
            }
        }
    }

    fn statement(&mut self) -> Result<Option<(String, Value)>> {
        self.skip_separators();
        let Some(tok) = self.next() else { return Ok(None) };
        let name = match tok.tok {
            Tok::Ident(name) => name,
            _ => return Err(syntax(tok.line, tok.column, "expected an assignment")),
        };
        if name == "function" {
            self.skip_line();
            return Ok(Some((name, Value::Other)));
        }
        match self.next() {
            Some(Token { tok: Tok::Eq, .. }) => {}
            Some(t) => return Err(syntax(t.line, t.column, format!("expected '=' after '{name}'"))),
            None => return Err(syntax(self.eof.0, self.eof.1, format!("expected '=' after '{name}'"))),
        }
        let value = self.value()?;
        match self.peek().map(|t| &t.tok) {
            None | Some(Tok::Semi | Tok::Newline) => {}
            _ => return Err(self.err_here("expected ';' or end of line after value")),
        }
        Ok(Some((name, value)))
    }

    fn value(&mut self) -> Result<Value> {
        let Some(tok) = self.next() else {
            return Err(syntax(self.eof.0, self.eof.1, "expected a value"));
        };
        match tok.tok {
            Tok::Num(v) => Ok(Value::Scalar(v)),
            Tok::Str => Ok(Value::Other),
            Tok::LBracket => self.matrix(tok.line, tok.column).map(Value::Matrix),
            Tok::LBrace => {
                let mut depth = 1;
                while depth > 0 {
                    match self.next().map(|t| t.tok) {
                        Some(Tok::LBrace) => depth += 1,
                        Some(Tok::RBrace) => depth -= 1,
                        Some(_) => {}
                        None => return Err(syntax(tok.line, tok.column, "unterminated '{'")),
                    }
                }
                Ok(Value::Other)
            }
            _ => Err(syntax(tok.line, tok.column, "expected a number, string or matrix")),
        }
    }

    fn matrix(&mut self, line: usize, column: usize) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::new();
        let mut row: Vec<f64> = Vec::new();
        loop {
            let Some(t) = self.next() else {
                return Err(syntax(line, column, "unterminated '['"));
            };
            match t.tok {
                Tok::Num(v) => row.push(v),
                Tok::Comma => {}
                Tok::Semi | Tok::Newline => {
                    if !row.is_empty() {
                        rows.push(std::mem::take(&mut row));
                    }
                }
                Tok::RBracket => {
                    if !row.is_empty() {
                        rows.push(row);
                    }
                    break;
                }
                _ => return Err(syntax(t.line, t.column, "unexpected token in matrix")),
            }
        }
        if let Some(first) = rows.first() {
            let width = first.len();
            if let Some(bad) = rows.iter().position(|r| r.len() != width) {
                return Err(syntax(
                    line,
                    column,
                    format!("matrix row {} has {} columns, expected {width}", bad + 1, rows[bad].len()),
                ));
            }
        }
        Ok(rows)
    }
}

fn table<'a>(tables: &'a HashMap<String, Vec<Vec<f64>>>, name: &str, min_cols: usize) -> Result<&'a [Vec<f64>]> {
    let rows = tables
        .get(name)
        .ok_or_else(|| Error::case(format!("missing '{name}' table")))?;
    if let Some(r) = rows.first() {
        if r.len() < min_cols {
            return Err(Error::case(format!(
                "'{name}' table needs at least {min_cols} columns, found {}",
                r.len()
            )));
        }
    }
    Ok(rows)
}

fn as_bus_id(v: f64, what: &str) -> Result<BusId> {
    if v.fract() != 0.0 || !(1.0..=u32::MAX as f64).contains(&v) {
        return Err(Error::case(format!("{what}: invalid bus id {v}")));
    }
    Ok(BusId(v as u32))
}

/// Parses and validates a MATPOWER-subset case file.
pub fn parse_case(text: &str) -> Result<GridCase> {
    let toks = lex(text)?;
    let eof = toks.last().map(|t| (t.line, t.column + 1)).unwrap_or((1, 1));
    let mut parser = Parser { toks, pos: 0, eof };

    let mut base_mva = None;
    let mut tables = HashMap::new();
    while let Some((name, value)) = parser.statement()? {
        let field = name.rsplit('.').next().unwrap_or(&name).to_string();
        match (field.as_str(), value) {
            ("baseMVA", Value::Scalar(v)) => base_mva = Some(v),
            ("baseMVA", _) => return Err(Error::case("baseMVA must be a scalar")),
            ("bus" | "gen" | "branch", Value::Matrix(rows)) => {
                tables.insert(field, rows);
            }
            ("bus" | "gen" | "branch", _) => {
                return Err(Error::case(format!("'{field}' must be a matrix")));
            }
            _ => {}
        }
    }

    let base_mva = base_mva.ok_or_else(|| Error::case("missing baseMVA"))?;
    let mut buses = Vec::new();
    for row in table(&tables, "bus", 10)? {
        let id = as_bus_id(row[0], "bus")?;
        let bus_type = BusType::from_code(row[1])
            .ok_or_else(|| Error::case(format!("bus {id}: unsupported bus type {}", row[1])))?;
        buses.push(Bus { id, bus_type, load_mw: row[2], base_kv: row[9] });
    }
    let mut generators = Vec::new();
    for row in table(&tables, "gen", 9)? {
        // out-of-service units (status column) take no part in dispatch
        if row[7] <= 0.0 {
            continue;
        }
        generators.push(Generator { bus: as_bus_id(row[0], "gen")?, pmax_mw: row[8] });
    }
    let mut branches = Vec::new();
    for row in table(&tables, "branch", 11)? {
        branches.push(Branch {
            from_bus: as_bus_id(row[0], "branch")?,
            to_bus: as_bus_id(row[1], "branch")?,
            reactance_pu: row[3],
            status: if row[10] > 0.0 { BranchStatus::InService } else { BranchStatus::OutOfService },
        });
    }

    let case = GridCase { base_mva, buses, branches, generators };
    case.validate()?;
    Ok(case)
}

/// Canonical re-serialisation. Unused MATPOWER columns are written as
/// neutral defaults so the output is itself a loadable case.
pub fn render_case(case: &GridCase) -> String {
    let mut s = String::new();
    s.push_str("function mpc = case_rendered\n");
    s.push_str("mpc.version = '2';\n");
    let _ = writeln!(s, "mpc.baseMVA = {};", case.base_mva);
    s.push_str("\n%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\nmpc.bus = [\n");
    for b in &case.buses {
        let _ = writeln!(s, "\t{}\t{}\t{}\t0\t0\t0\t1\t1\t0\t{};", b.id, b.bus_type.code(), b.load_mw, b.base_kv);
    }
    s.push_str("];\n\n%\tbus\tPg\tQg\tQmax\tQmin\tVg\tmBase\tstatus\tPmax\nmpc.gen = [\n");
    for g in &case.generators {
        let _ = writeln!(s, "\t{}\t0\t0\t0\t0\t1\t{}\t1\t{};", g.bus, case.base_mva, g.pmax_mw);
    }
    s.push_str("];\n\n%\tfbus\ttbus\tr\tx\tb\trateA\trateB\trateC\tratio\tangle\tstatus\nmpc.branch = [\n");
    for br in &case.branches {
        let status = u8::from(br.in_service());
        let _ = writeln!(s, "\t{}\t{}\t0\t{}\t0\t0\t0\t0\t0\t0\t{};", br.from_bus, br.to_bus, br.reactance_pu, status);
    }
    s.push_str("];\n");
    s
}

// ---------------------------------------------------------------------------
// Measurement model

/// Linear DC model `z = H x + e` with one from-side active-flow meter per
/// in-service branch and `W = sigma^2 I`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    /// m x (n-1), per-unit flow per radian.
    pub h: DMatrix<f64>,
    /// Noise variances per meter, per-unit squared.
    pub w_diag: Vec<f64>,
    /// Row -> index into `GridCase::branches`.
    pub meter_index: Vec<usize>,
    /// Column -> non-slack bus.
    pub state_index: Vec<BusId>,
    pub slack: BusId,
    pub noise_sigma: f64,
}

impl MeasurementModel {
    pub fn num_meters(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_states(&self) -> usize {
        self.h.ncols()
    }

    /// Degrees of freedom of the residual, m - (n - 1).
    pub fn redundancy(&self) -> usize {
        self.num_meters().saturating_sub(self.num_states())
    }

    pub fn state_position(&self, bus: BusId) -> Option<usize> {
        self.state_index.iter().position(|&b| b == bus)
    }
}

pub fn build_dc_model(case: &GridCase, noise_sigma: f64) -> Result<MeasurementModel> {
    if !(noise_sigma.is_finite() && noise_sigma > 0.0) {
        return Err(Error::input(format!("noise sigma must be positive, got {noise_sigma}")));
    }
    let state_index = case.state_buses();
    let column: HashMap<BusId, usize> = state_index.iter().enumerate().map(|(j, &b)| (b, j)).collect();
    let meters: Vec<(usize, &Branch)> = case.in_service_branches().collect();

    let mut h = DMatrix::zeros(meters.len(), state_index.len());
    for (row, (_, br)) in meters.iter().enumerate() {
        let b = 1.0 / br.reactance_pu;
        if let Some(&j) = column.get(&br.from_bus) {
            h[(row, j)] += b;
        }
        if let Some(&j) = column.get(&br.to_bus) {
            h[(row, j)] -= b;
        }
    }

    Ok(MeasurementModel {
        h,
        w_diag: vec![noise_sigma * noise_sigma; meters.len()],
        meter_index: meters.iter().map(|(i, _)| *i).collect(),
        state_index,
        slack: case.slack().id,
        noise_sigma,
    })
}
