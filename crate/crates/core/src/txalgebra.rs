//! Transaction algebra: quasi-boolean circuits with scalar gating.
//!
//! A Type A transaction carries an [`Expr`]; the invoking Type B transaction
//! supplies a [`Binding`] for its variables. Boolean nodes evaluate to 0 or 1
//! (`And` is multiplication, `Or` is inclusive disjunction, `Not` is `1 - x`)
//! and `Scale(Δ, e)` multiplies a boolean result by a non-negative integer
//! amount.
//!
//! Text syntax, loosest binding first:
//!
//! ```text
//! or    := and ('|' and)*
//! and   := unary ('&' unary)*
//! unary := '!' unary | INT '*' unary | atom
//! atom  := IDENT | '0' | '1' | '(' or ')'
//! IDENT := [A-Za-z_][A-Za-z0-9_]*
//! ```
//!
//! so `50 * (A & (B | C))` is `Scale(50, And(A, Or(B, C)))`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::encoding::{Canonical, Encoder};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AlgebraError {
    #[error("variable `{0}` has no binding")]
    UnboundVariable(String),
    #[error("binding for `{0}` is not 0 or 1")]
    NonBooleanBinding(String),
    #[error("scale factor inside a negation or disjunction")]
    ScaleInBooleanContext,
    #[error("arithmetic overflow while scaling")]
    Overflow,
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("unknown ballot {0}")]
    UnknownBallot(BallotId),
    #[error("vote must be 0 or 1, got {0}")]
    BadVote(u8),
}

/// Expression tree.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Var(String),
    Const(bool),
    Not(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    /// `Δ · e`
    Scale(u64, Box<Expr>),
}

impl Expr {
    pub fn var(name: impl Into<String>) -> Expr {
        Expr::Var(name.into())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(e: Expr) -> Expr {
        Expr::Not(Box::new(e))
    }

    pub fn and(a: Expr, b: Expr) -> Expr {
        Expr::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Expr, b: Expr) -> Expr {
        Expr::Or(Box::new(a), Box::new(b))
    }

    pub fn scale(delta: u64, e: Expr) -> Expr {
        Expr::Scale(delta, Box::new(e))
    }

    /// Left-folded conjunction; `Const(true)` when empty.
    pub fn all(items: impl IntoIterator<Item = Expr>) -> Expr {
        items
            .into_iter()
            .reduce(Expr::and)
            .unwrap_or(Expr::Const(true))
    }

    /// Variable names in first-seen order, deduplicated.
    pub fn free_vars(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<String>) {
        match self {
            Expr::Var(n) => {
                out.insert(n.clone());
            }
            Expr::Const(_) => {}
            Expr::Not(e) | Expr::Scale(_, e) => e.collect_vars(out),
            Expr::And(a, b) | Expr::Or(a, b) => {
                a.collect_vars(out);
                b.collect_vars(out);
            }
        }
    }

    pub fn is_scaled(&self) -> bool {
        match self {
            Expr::Scale(..) => true,
            Expr::And(a, b) => a.is_scaled() || b.is_scaled(),
            _ => false,
        }
    }

    /// Longest root-to-leaf path, counting the leaf.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Var(_) | Expr::Const(_) => 1,
            Expr::Not(e) | Expr::Scale(_, e) => 1 + e.depth(),
            Expr::And(a, b) | Expr::Or(a, b) => 1 + a.depth().max(b.depth()),
        }
    }

    /// Rejects `Scale` anywhere below a `Not` or `Or`.
    pub fn validate(&self) -> Result<(), AlgebraError> {
        fn walk(e: &Expr, boolean_ctx: bool) -> Result<(), AlgebraError> {
            match e {
                Expr::Var(_) | Expr::Const(_) => Ok(()),
                Expr::Scale(_, inner) => {
                    if boolean_ctx {
                        Err(AlgebraError::ScaleInBooleanContext)
                    } else {
                        walk(inner, false)
                    }
                }
                Expr::And(a, b) => {
                    walk(a, boolean_ctx)?;
                    walk(b, boolean_ctx)
                }
                Expr::Not(inner) => walk(inner, true),
                Expr::Or(a, b) => {
                    walk(a, true)?;
                    walk(b, true)
                }
            }
        }
        walk(self, false)
    }

    /// Renames every variable through `f`.
    pub fn rename(&self, f: &impl Fn(&str) -> String) -> Expr {
        match self {
            Expr::Var(n) => Expr::Var(f(n)),
            Expr::Const(c) => Expr::Const(*c),
            Expr::Not(e) => Expr::not(e.rename(f)),
            Expr::Scale(d, e) => Expr::scale(*d, e.rename(f)),
            Expr::And(a, b) => Expr::and(a.rename(f), b.rename(f)),
            Expr::Or(a, b) => Expr::or(a.rename(f), b.rename(f)),
        }
    }

    /// Pulls conjunction-level scale factors out: returns `(Δ, core)` with
    /// `eval(self) = Δ · eval(core)` and `core` free of `Scale`. `Δ` is
    /// `None` when the expression carries no scale at all.
    pub fn split_scale(&self) -> Result<(Option<u64>, Expr), AlgebraError> {
        match self {
            Expr::Scale(d, e) => {
                let (inner, core) = e.split_scale()?;
                let total = match inner {
                    Some(i) => d.checked_mul(i).ok_or(AlgebraError::Overflow)?,
                    None => *d,
                };
                Ok((Some(total), core))
            }
            Expr::And(a, b) => {
                let (da, ca) = a.split_scale()?;
                let (db, cb) = b.split_scale()?;
                let d = match (da, db) {
                    (None, None) => None,
                    (Some(x), None) | (None, Some(x)) => Some(x),
                    (Some(x), Some(y)) => Some(x.checked_mul(y).ok_or(AlgebraError::Overflow)?),
                };
                Ok((d, Expr::and(ca, cb)))
            }
            other => {
                other.validate()?;
                Ok((None, other.clone()))
            }
        }
    }

    /// Graphviz rendering of the circuit.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph circuit {\n  rankdir=BT;\n");
        let mut next = 0usize;
        let root = self.dot_node(&mut out, &mut next);
        let _ = writeln!(out, "  out [shape=plaintext,label=\"out\"];\n  n{root} -> out;");
        out.push_str("}\n");
        out
    }

    fn dot_node(&self, out: &mut String, next: &mut usize) -> usize {
        let id = *next;
        *next += 1;
        let (label, shape, children): (String, &str, Vec<&Expr>) = match self {
            Expr::Var(n) => (n.clone(), "circle", vec![]),
            Expr::Const(c) => ((*c as u8).to_string(), "square", vec![]),
            Expr::Not(e) => ("NOT".into(), "invtriangle", vec![e]),
            Expr::And(a, b) => ("AND".into(), "box", vec![a, b]),
            Expr::Or(a, b) => ("OR".into(), "box", vec![a, b]),
            Expr::Scale(d, e) => (format!("× {d}"), "diamond", vec![e]),
        };
        let _ = writeln!(out, "  n{id} [label=\"{label}\",shape={shape}];");
        for child in children {
            let c = child.dot_node(out, next);
            let _ = writeln!(out, "  n{c} -> n{id};");
        }
        id
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Or(..) => 0,
            Expr::And(..) => 1,
            _ => 2,
        }
    }

    fn fmt_at(&self, f: &mut fmt::Formatter<'_>, min_prec: u8) -> fmt::Result {
        let paren = self.precedence() < min_prec;
        if paren {
            f.write_str("(")?;
        }
        match self {
            Expr::Var(n) => f.write_str(n)?,
            Expr::Const(c) => write!(f, "{}", *c as u8)?,
            Expr::Not(e) => {
                f.write_str("!")?;
                e.fmt_at(f, 2)?;
            }
            Expr::Scale(d, e) => {
                write!(f, "{d} * ")?;
                e.fmt_at(f, 2)?;
            }
            Expr::And(a, b) => {
                a.fmt_at(f, 1)?;
                f.write_str(" & ")?;
                b.fmt_at(f, 2)?;
            }
            Expr::Or(a, b) => {
                a.fmt_at(f, 0)?;
                f.write_str(" | ")?;
                b.fmt_at(f, 1)?;
            }
        }
        if paren {
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_at(f, 0)
    }
}

impl Canonical for Expr {
    /// Pre-order: `1 name` var, `2 bit` const, `3` not, `4` and, `5` or,
    /// `6 Δ:u64` scale.
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Expr::Var(n) => {
                enc.u8(1).str(n);
            }
            Expr::Const(c) => {
                enc.u8(2).bool(*c);
            }
            Expr::Not(e) => {
                enc.u8(3);
                e.encode(enc);
            }
            Expr::And(a, b) => {
                enc.u8(4);
                a.encode(enc);
                b.encode(enc);
            }
            Expr::Or(a, b) => {
                enc.u8(5);
                a.encode(enc);
                b.encode(enc);
            }
            Expr::Scale(d, e) => {
                enc.u8(6).u64(*d);
                e.encode(enc);
            }
        }
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl FromStr for Expr {
    type Err = AlgebraError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tokens = tokenize(s)?;
        let mut p = Parser { tokens, pos: 0, src_len: s.len() };
        let e = p.or()?;
        if let Some((pos, _)) = p.tokens.get(p.pos) {
            return Err(parse_err(*pos, "unexpected trailing input"));
        }
        e.validate()?;
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(u64),
    And,
    Or,
    Not,
    Star,
    LParen,
    RParen,
}

fn parse_err(pos: usize, msg: &str) -> AlgebraError {
    AlgebraError::Parse { pos, msg: msg.to_string() }
}

fn tokenize(s: &str) -> Result<Vec<(usize, Tok)>, AlgebraError> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'&' => out.push((start, Tok::And)),
            b'|' => out.push((start, Tok::Or)),
            b'!' => out.push((start, Tok::Not)),
            b'*' => out.push((start, Tok::Star)),
            b'(' => out.push((start, Tok::LParen)),
            b')' => out.push((start, Tok::RParen)),
            b'0'..=b'9' => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && (bytes[i] == b'.' || bytes[i].is_ascii_alphabetic()) {
                    return Err(parse_err(i, "scalars must be non-negative integers"));
                }
                let v = s[start..i]
                    .parse::<u64>()
                    .map_err(|_| parse_err(start, "integer out of range"))?;
                out.push((start, Tok::Int(v)));
                continue;
            }
            c if c == b'_' || c.is_ascii_alphabetic() => {
                while i < bytes.len() && (bytes[i] == b'_' || bytes[i].is_ascii_alphanumeric()) {
                    i += 1;
                }
                out.push((start, Tok::Ident(s[start..i].to_string())));
                continue;
            }
            _ => return Err(parse_err(start, "unexpected character")),
        }
        i += 1;
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
    src_len: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn here(&self) -> usize {
        self.tokens.get(self.pos).map(|(p, _)| *p).unwrap_or(self.src_len)
    }

    fn or(&mut self) -> Result<Expr, AlgebraError> {
        let mut lhs = self.and()?;
        while self.peek() == Some(&Tok::Or) {
            self.pos += 1;
            lhs = Expr::or(lhs, self.and()?);
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, AlgebraError> {
        let mut lhs = self.unary()?;
        while self.peek() == Some(&Tok::And) {
            self.pos += 1;
            lhs = Expr::and(lhs, self.unary()?);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, AlgebraError> {
        match self.peek().cloned() {
            Some(Tok::Not) => {
                self.pos += 1;
                Ok(Expr::not(self.unary()?))
            }
            Some(Tok::Int(v)) if self.tokens.get(self.pos + 1).map(|(_, t)| t) == Some(&Tok::Star) => {
                self.pos += 2;
                Ok(Expr::scale(v, self.unary()?))
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<Expr, AlgebraError> {
        let at = self.here();
        match self.peek().cloned() {
            Some(Tok::Ident(n)) => {
                self.pos += 1;
                Ok(Expr::Var(n))
            }
            Some(Tok::Int(v @ (0 | 1))) => {
                self.pos += 1;
                Ok(Expr::Const(v == 1))
            }
            Some(Tok::Int(_)) => Err(parse_err(at, "bare scalar; write `Δ * expr`")),
            Some(Tok::LParen) => {
                self.pos += 1;
                let e = self.or()?;
                if self.peek() != Some(&Tok::RParen) {
                    return Err(parse_err(self.here(), "expected `)`"));
                }
                self.pos += 1;
                Ok(e)
            }
            Some(_) => Err(parse_err(at, "expected operand")),
            None => Err(parse_err(at, "unexpected end of input")),
        }
    }
}

/// Assignment of 0/1 values to variable names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Binding(BTreeMap<String, u8>);

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: bool) -> Self {
        self.set(name, value);
        self
    }

    pub fn set(&mut self, name: impl Into<String>, value: bool) {
        self.0.insert(name.into(), value as u8);
    }

    pub fn get(&self, name: &str) -> Option<u8> {
        self.0.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Union; entries from `other` win.
    pub fn merged(&self, other: &Binding) -> Binding {
        let mut out = self.clone();
        out.0.extend(other.0.iter().map(|(k, v)| (k.clone(), *v)));
        out
    }

    /// Binding number `mask` over `vars`: bit `i` of `mask` is `vars[i]`.
    pub fn from_mask(vars: &[String], mask: u64) -> Binding {
        let mut b = Binding::new();
        for (i, v) in vars.iter().enumerate() {
            b.set(v.clone(), (mask >> i) & 1 == 1);
        }
        b
    }

    /// Every assignment of `vars`, in mask order. There are `2^n` of them.
    pub fn enumerate(vars: &[String]) -> impl Iterator<Item = Binding> + '_ {
        assert!(vars.len() < 64);
        (0..(1u64 << vars.len())).map(move |m| Binding::from_mask(vars, m))
    }
}

impl Canonical for Binding {
    fn encode(&self, enc: &mut Encoder) {
        let entries: Vec<_> = self.0.iter().collect();
        enc.list(&entries, |e, (k, v)| {
            e.str(k).u8(**v);
        });
    }
}

impl FromStr for Binding {
    type Err = AlgebraError;

    /// `A=1,B=0`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut b = Binding::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| parse_err(0, "expected NAME=0|1"))?;
            let v = match v.trim() {
                "0" => false,
                "1" => true,
                _ => return Err(AlgebraError::NonBooleanBinding(k.trim().to_string())),
            };
            b.set(k.trim(), v);
        }
        Ok(b)
    }
}

/// Evaluates `expr` under `binding`.
pub fn evaluate(expr: &Expr, binding: &Binding) -> Result<u64, AlgebraError> {
    expr.validate()?;
    eval(expr, binding)
}

fn eval(expr: &Expr, binding: &Binding) -> Result<u64, AlgebraError> {
    match expr {
        Expr::Var(n) => match binding.get(n) {
            Some(v @ (0 | 1)) => Ok(v as u64),
            Some(_) => Err(AlgebraError::NonBooleanBinding(n.clone())),
            None => Err(AlgebraError::UnboundVariable(n.clone())),
        },
        Expr::Const(c) => Ok(*c as u64),
        Expr::Not(e) => Ok(1 - eval(e, binding)?),
        Expr::And(a, b) => {
            let x = eval(a, binding)?;
            let y = eval(b, binding)?;
            x.checked_mul(y).ok_or(AlgebraError::Overflow)
        }
        Expr::Or(a, b) => {
            let x = eval(a, binding)?;
            let y = eval(b, binding)?;
            Ok((x == 1 || y == 1) as u64)
        }
        Expr::Scale(d, e) => d.checked_mul(eval(e, binding)?).ok_or(AlgebraError::Overflow),
    }
}

/// Namespaces a variable for transaction `tag`, e.g. `A` → `A_t1`.
pub fn namespaced(name: &str, tag: &str) -> String {
    format!("{name}_{tag}")
}

/// Conjunction of two transaction programs.
///
/// Variables are suffixed `_t1` / `_t2`; scale factors are hoisted so the
/// result is `Δ · (core1 ∧ core2)` and evaluates to `eval(t1) · eval(t2)`.
pub fn conjoin(t1: &Expr, t2: &Expr) -> Result<Expr, AlgebraError> {
    let (d1, c1) = t1.split_scale()?;
    let (d2, c2) = t2.split_scale()?;
    let core = Expr::and(
        c1.rename(&|n| namespaced(n, "t1")),
        c2.rename(&|n| namespaced(n, "t2")),
    );
    Ok(match (d1, d2) {
        (None, None) => core,
        (Some(d), None) | (None, Some(d)) => Expr::scale(d, core),
        (Some(a), Some(b)) => Expr::scale(a.checked_mul(b).ok_or(AlgebraError::Overflow)?, core),
    })
}

/// Binding for a conjunction built by [`conjoin`].
pub fn conjoined_binding(b1: &Binding, b2: &Binding) -> Binding {
    let mut out = Binding::new();
    for (k, v) in &b1.0 {
        out.set(namespaced(k, "t1"), *v == 1);
    }
    for (k, v) in &b2.0 {
        out.set(namespaced(k, "t2"), *v == 1);
    }
    out
}

/// A single stored bit drawn as an inverter on the negated bit, `!!A`.
pub fn single_bit_circuit(name: &str) -> Expr {
    Expr::not(Expr::not(Expr::var(name)))
}

/// Evaluates a `!!A` circuit. Panics if `expr` has any other shape.
pub fn single_bit(expr: &Expr, binding: &Binding) -> Result<u64, AlgebraError> {
    match expr {
        Expr::Not(inner) if matches!(**inner, Expr::Not(ref v) if matches!(**v, Expr::Var(_))) => {
            evaluate(expr, binding)
        }
        other => panic!("single_bit expects !!VAR, got {other}"),
    }
}

pub type BallotId = u32;

/// Ballot box with per-candidate confirmation bits.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Election {
    ballots: BTreeSet<BallotId>,
    votes: BTreeMap<BallotId, Vec<u8>>,
    confirmations: BTreeMap<BallotId, u8>,
}

impl Election {
    pub fn new(ballots: impl IntoIterator<Item = BallotId>) -> Self {
        let ballots: BTreeSet<_> = ballots.into_iter().collect();
        let votes = ballots.iter().map(|b| (*b, Vec::new())).collect();
        Election {
            ballots,
            votes,
            confirmations: BTreeMap::new(),
        }
    }

    pub fn ballots(&self) -> impl Iterator<Item = BallotId> + '_ {
        self.ballots.iter().copied()
    }

    /// Appends a vote to the ballot's vote list.
    pub fn record_vote(&mut self, ballot: BallotId, vote: u8) -> Result<(), AlgebraError> {
        if vote > 1 {
            return Err(AlgebraError::BadVote(vote));
        }
        self.votes
            .get_mut(&ballot)
            .ok_or(AlgebraError::UnknownBallot(ballot))?
            .push(vote);
        Ok(())
    }

    pub fn confirm(&mut self, ballot: BallotId, bit: bool) -> Result<(), AlgebraError> {
        if !self.ballots.contains(&ballot) {
            return Err(AlgebraError::UnknownBallot(ballot));
        }
        self.confirmations.insert(ballot, bit as u8);
        Ok(())
    }

    /// Sum of the votes cast for `ballot`.
    pub fn tally(&self, ballot: BallotId) -> Result<u64, AlgebraError> {
        self.votes
            .get(&ballot)
            .map(|vs| vs.iter().map(|&v| v as u64).sum())
            .ok_or(AlgebraError::UnknownBallot(ballot))
    }

    fn confirmation_var(ballot: BallotId) -> String {
        format!("c{ballot}")
    }

    /// Conjunction of every candidate's confirmation bit.
    pub fn confirmation_expr(&self) -> Expr {
        Expr::all(self.ballots.iter().map(|b| Expr::var(Self::confirmation_var(*b))))
    }

    /// Current confirmation bits; missing confirmations count as 0.
    pub fn confirmation_binding(&self) -> Binding {
        let mut b = Binding::new();
        for ballot in &self.ballots {
            let bit = self.confirmations.get(ballot).copied().unwrap_or(0) == 1;
            b.set(Self::confirmation_var(*ballot), bit);
        }
        b
    }

    /// Highest tally, smallest ballot id on ties, but only when every
    /// candidate has confirmed.
    pub fn winner(&self) -> Option<BallotId> {
        if self.ballots.is_empty() {
            return None;
        }
        let confirmed = evaluate(&self.confirmation_expr(), &self.confirmation_binding()).ok()?;
        if confirmed != 1 {
            return None;
        }
        let mut best: Option<(BallotId, u64)> = None;
        for b in &self.ballots {
            let t = self.tally(*b).ok()?;
            // Strict comparison over ascending ids keeps the smallest id on ties.
            if best.is_none_or(|(_, bt)| t > bt) {
                best = Some((*b, t));
            }
        }
        best.map(|(b, _)| b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> Expr {
        s.parse().unwrap()
    }

    fn b(s: &str) -> Binding {
        s.parse().unwrap()
    }

    #[test]
    fn example_one_conjunction() {
        assert_eq!(evaluate(&p("A & B"), &b("A=1,B=1")).unwrap(), 1);
        assert_eq!(evaluate(&p("A & B"), &b("A=1,B=0")).unwrap(), 0);
    }

    #[test]
    fn example_two_scaled() {
        let e = p("50 * (A & (B | C))");
        assert_eq!(e, Expr::scale(50, Expr::and(Expr::var("A"), Expr::or(Expr::var("B"), Expr::var("C")))));
        assert_eq!(evaluate(&e, &b("A=1,B=0,C=1")).unwrap(), 50);
        assert_eq!(evaluate(&e, &b("A=0,B=1,C=1")).unwrap(), 0);
        // 1 + 1 is inclusive or, not 2.
        assert_eq!(evaluate(&e, &b("A=1,B=1,C=1")).unwrap(), 50);
    }

    #[test]
    fn unbound_variable() {
        assert_eq!(
            evaluate(&p("A & B"), &b("A=1")).unwrap_err(),
            AlgebraError::UnboundVariable("B".into())
        );
    }

    #[test]
    fn parse_errors() {
        assert!("3.5 * A".parse::<Expr>().is_err());
        assert!("A &".parse::<Expr>().is_err());
        assert!("(A".parse::<Expr>().is_err());
        assert!("2".parse::<Expr>().is_err());
        assert!("A $ B".parse::<Expr>().is_err());
        assert_eq!(
            "!(5 * A)".parse::<Expr>().unwrap_err(),
            AlgebraError::ScaleInBooleanContext
        );
        assert_eq!(
            "A | 5 * B".parse::<Expr>().unwrap_err(),
            AlgebraError::ScaleInBooleanContext
        );
        assert!("A & 5 * B".parse::<Expr>().is_ok());
    }

    #[test]
    fn display_roundtrips() {
        for s in ["A & B", "50 * (A & (B | C))", "!(A | B) & !C", "A | B | C", "A & (B & C)", "7 * !!A", "1 | 0"] {
            let e = p(s);
            assert_eq!(p(&e.to_string()), e, "{s} -> {e}");
        }
    }

    #[test]
    fn conjoin_truth_table() {
        let t1 = p("A & B");
        let t2 = p("A & (B | C)");
        let r = conjoin(&t1, &t2).unwrap();
        let all = conjoined_binding(&b("A=1,B=1"), &b("A=1,B=1,C=1"));
        assert_eq!(evaluate(&r, &all).unwrap(), 1);
        let t2_false = conjoined_binding(&b("A=1,B=1"), &b("A=0,B=1,C=1"));
        assert_eq!(evaluate(&r, &t2_false).unwrap(), 0);
        let scaled = Expr::scale(7, r);
        assert_eq!(evaluate(&scaled, &all).unwrap(), 7);
    }

    #[test]
    fn conjoin_hoists_scales() {
        let r = conjoin(&p("3 * A"), &p("5 * (B | C)")).unwrap();
        assert!(matches!(r, Expr::Scale(15, _)));
        let bind = conjoined_binding(&b("A=1"), &b("B=0,C=1"));
        assert_eq!(evaluate(&r, &bind).unwrap(), 15);
    }

    #[test]
    fn single_bit_double_negation() {
        let e = single_bit_circuit("A");
        assert_eq!(single_bit(&e, &b("A=1")).unwrap(), 1);
        assert_eq!(single_bit(&e, &b("A=0")).unwrap(), 0);
    }

    #[test]
    fn tally_and_winner() {
        let mut e = Election::new([1, 2]);
        for v in [1, 1, 0] {
            e.record_vote(1, v).unwrap();
        }
        assert_eq!(e.tally(1).unwrap(), 2);
        assert_eq!(e.tally(2).unwrap(), 0);
        assert_eq!(e.tally(9).unwrap_err(), AlgebraError::UnknownBallot(9));
        for _ in 0..3 {
            e.record_vote(2, 1).unwrap();
        }
        assert_eq!(e.winner(), None, "unconfirmed");
        e.confirm(1, true).unwrap();
        e.confirm(2, true).unwrap();
        assert_eq!(e.winner(), Some(2));
        e.confirm(1, false).unwrap();
        assert_eq!(e.winner(), None);
        assert_eq!(e.record_vote(1, 2).unwrap_err(), AlgebraError::BadVote(2));
    }

    #[test]
    fn tie_goes_to_smallest_ballot() {
        let mut e = Election::new([1, 2]);
        for bal in [1, 2] {
            e.record_vote(bal, 1).unwrap();
            e.record_vote(bal, 1).unwrap();
            e.confirm(bal, true).unwrap();
        }
        assert_eq!(e.winner(), Some(1));
    }

    #[test]
    fn dot_export_mentions_every_gate() {
        let dot = p("50 * (A & (B | C))").to_dot();
        for needle in ["AND", "OR", "× 50", "\"A\"", "-> out"] {
            assert!(dot.contains(needle), "{needle} missing from {dot}");
        }
    }

    #[test]
    fn search_space_is_two_to_the_n() {
        let vars: Vec<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        assert_eq!(Binding::enumerate(&vars).count(), 4);
        let vars: Vec<String> = (0..7).map(|i| format!("v{i}")).collect();
        assert_eq!(Binding::enumerate(&vars).count(), 128);
    }
}
