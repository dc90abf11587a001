//! Expression trees over feature variables.
//!
//! Trees are built from constants, variables and the binary operators `+`,
//! `-` and `*`. Complexity is the total node count. The parser desugars a
//! unary minus into a negative constant when applied to a number and into
//! `-1 * x` otherwise, so `-0.39*u_x` has complexity 3.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::rng::Rng;

pub const DEFAULT_MAX_DEPTH: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
}

impl BinOp {
    pub const ALL: [BinOp; 3] = [BinOp::Add, BinOp::Sub, BinOp::Mul];

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
        }
    }

    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Arc<str>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn var(name: &str) -> Expr {
        Expr::Var(Arc::from(name))
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Bin(op, Box::new(a), Box::new(b))
    }

    /// Total node count.
    pub fn complexity(&self) -> usize {
        match self {
            Expr::Bin(_, a, b) => 1 + a.complexity() + b.complexity(),
            _ => 1,
        }
    }

    /// Depth counting the root as 1.
    pub fn depth(&self) -> usize {
        match self {
            Expr::Bin(_, a, b) => 1 + a.depth().max(b.depth()),
            _ => 1,
        }
    }

    pub fn has_variables(&self) -> bool {
        match self {
            Expr::Var(_) => true,
            Expr::Const(_) => false,
            Expr::Bin(_, a, b) => a.has_variables() || b.has_variables(),
        }
    }

    /// Variable names in pre-order, with repetition.
    pub fn variables(&self) -> Vec<Arc<str>> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Var(v) = e {
                out.push(v.clone());
            }
        });
        out
    }

    /// Constants in pre-order.
    pub fn constants(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |e| {
            if let Expr::Const(c) = e {
                out.push(*c);
            }
        });
        out
    }

    /// Replaces the constants in pre-order. `values` must hold exactly
    /// `self.constants().len()` entries.
    pub fn with_constants(&self, values: &[f64]) -> Expr {
        fn go(e: &Expr, it: &mut std::slice::Iter<'_, f64>) -> Expr {
            match e {
                Expr::Const(_) => Expr::Const(*it.next().expect("constant count mismatch")),
                Expr::Var(v) => Expr::Var(v.clone()),
                Expr::Bin(op, a, b) => {
                    let a = go(a, it);
                    Expr::bin(*op, a, go(b, it))
                }
            }
        }
        let mut it = values.iter();
        let out = go(self, &mut it);
        debug_assert!(it.next().is_none(), "constant count mismatch");
        out
    }

    fn visit(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        if let Expr::Bin(_, a, b) = self {
            a.visit(f);
            b.visit(f);
        }
    }

    /// Subtree at pre-order position `i` (the root is 0).
    pub fn subtree(&self, i: usize) -> &Expr {
        match self {
            _ if i == 0 => self,
            Expr::Bin(_, a, b) => {
                let na = a.complexity();
                if i <= na {
                    a.subtree(i - 1)
                } else {
                    b.subtree(i - 1 - na)
                }
            }
            _ => panic!("node index out of range"),
        }
    }

    /// Copy with the subtree at pre-order position `i` replaced.
    pub fn replace(&self, i: usize, new: Expr) -> Expr {
        match self {
            _ if i == 0 => new,
            Expr::Bin(op, a, b) => {
                let na = a.complexity();
                if i <= na {
                    Expr::bin(*op, a.replace(i - 1, new), (**b).clone())
                } else {
                    Expr::bin(*op, (**a).clone(), b.replace(i - 1 - na, new))
                }
            }
            _ => panic!("node index out of range"),
        }
    }

    /// Depth of the node at pre-order position `i` (the root is at depth 1).
    pub fn depth_of(&self, i: usize) -> usize {
        match self {
            _ if i == 0 => 1,
            Expr::Bin(_, a, b) => {
                let na = a.complexity();
                1 + if i <= na { a.depth_of(i - 1) } else { b.depth_of(i - 1 - na) }
            }
            _ => panic!("node index out of range"),
        }
    }
}

// ---------------------------------------------------------------------------
// Parsing and printing

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(f64),
    Ident(String),
    Op(char),
    Open,
    Close,
}

fn tokenize(text: &str) -> Result<Vec<(Token, usize)>> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        let col = i + 1;
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    i = j;
                    while i < chars.len() && chars[i].is_ascii_digit() {
                        i += 1;
                    }
                }
            }
            let lexeme: String = chars[start..i].iter().collect();
            let v = lexeme.parse::<f64>().map_err(|_| Error::Syntax {
                column: col,
                message: format!("malformed number `{lexeme}`"),
            })?;
            out.push((Token::Num(v), col));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push((Token::Ident(chars[start..i].iter().collect()), col));
        } else {
            let tok = match c {
                '+' => Token::Op('+'),
                '-' | '\u{2212}' => Token::Op('-'),
                '*' => Token::Op('*'),
                '(' => Token::Open,
                ')' => Token::Close,
                _ => {
                    return Err(Error::Syntax {
                        column: col,
                        message: format!("unexpected character `{c}`"),
                    })
                }
            };
            out.push((tok, col));
            i += 1;
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    end_column: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn column(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end_column, |(_, c)| *c)
    }

    fn error(&self, message: &str) -> Error {
        Error::Syntax {
            column: self.column(),
            message: match self.peek() {
                None => format!("{message}, found end of input"),
                Some(_) => message.to_string(),
            },
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        loop {
            let op = match self.peek() {
                Some(Token::Op('+')) => BinOp::Add,
                Some(Token::Op('-')) => BinOp::Sub,
                _ => return Ok(lhs),
            };
            self.pos += 1;
            lhs = Expr::bin(op, lhs, self.term()?);
        }
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some(Token::Op('*')) = self.peek() {
            self.pos += 1;
            lhs = Expr::bin(BinOp::Mul, lhs, self.factor()?);
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        match self.peek().cloned() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Token::Ident(name)) => {
                self.pos += 1;
                Ok(Expr::var(&name))
            }
            Some(Token::Open) => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(&Token::Close) {
                    return Err(self.error("expected `)`"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(Token::Op('-')) => {
                self.pos += 1;
                Ok(match self.factor()? {
                    Expr::Const(c) => Expr::Const(-c),
                    e => Expr::bin(BinOp::Mul, Expr::Const(-1.0), e),
                })
            }
            _ => Err(self.error("expected a number, variable or `(`")),
        }
    }
}

/// Parses the infix grammar
/// `expr = term (("+" | "-") term)*`, `term = factor ("*" factor)*`,
/// `factor = number | ident | "(" expr ")" | "-" factor`.
pub fn parse_expr(text: &str) -> Result<Expr> {
    let tokens = tokenize(text)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        end_column: text.chars().count() + 1,
    };
    let e = p.expr()?;
    if p.pos != p.tokens.len() {
        return Err(p.error("unexpected token"));
    }
    if e.constants().iter().any(|c| !c.is_finite()) {
        return Err(Error::Syntax {
            column: 1,
            message: "constants must be finite".into(),
        });
    }
    Ok(e)
}

impl std::str::FromStr for Expr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_expr(s)
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(v) => f.write_str(v),
            Expr::Bin(op, a, b) => {
                let p = op.precedence();
                let wrap = |e: &Expr, strict: bool| match e {
                    Expr::Bin(o, ..) => {
                        if strict {
                            o.precedence() <= p
                        } else {
                            o.precedence() < p
                        }
                    }
                    _ => false,
                };
                let spaced = *op != BinOp::Mul;
                if wrap(a, false) {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                if spaced {
                    write!(f, " {} ", op.symbol())?;
                } else {
                    f.write_str(op.symbol())?;
                }
                // The parser is left-associative, so an equal-precedence right
                // operand needs parentheses to keep the tree shape.
                if wrap(b, true) {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
        }
    }
}

pub fn format_expr(e: &Expr) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Evaluation

/// Evaluates `e` on every row of `table`.
/// Serde adapter storing an [`Expr`] as its text form.
pub(crate) mod expr_text {
    use serde::{Deserialize, Deserializer, Serializer};

    use super::{parse_expr, Expr};

    pub fn serialize<S: Serializer>(e: &Expr, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&e.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Expr, D::Error> {
        let text = String::deserialize(d)?;
        parse_expr(&text).map_err(serde::de::Error::custom)
    }
}

pub fn evaluate(e: &Expr, table: &FeatureTable) -> Result<Vec<f64>> {
    check_schema(e, table)?;
    Ok(eval_unchecked(e, table))
}

pub fn check_schema(e: &Expr, table: &FeatureTable) -> Result<()> {
    for v in e.variables() {
        if table.column(&v).is_none() {
            return Err(Error::Schema(format!("unknown variable `{v}`")));
        }
    }
    Ok(())
}

pub(crate) fn eval_unchecked(e: &Expr, table: &FeatureTable) -> Vec<f64> {
    eval_columns(e, table.len(), &|v| table.column(v).expect("schema checked"))
}

/// Vectorised evaluation over `n` rows with variables resolved by `col`.
pub(crate) fn eval_columns<'a>(e: &Expr, n: usize, col: &dyn Fn(&str) -> &'a [f64]) -> Vec<f64> {
    match e {
        Expr::Const(c) => vec![*c; n],
        Expr::Var(v) => col(v).to_vec(),
        Expr::Bin(op, a, b) => {
            let mut l = eval_columns(a, n, col);
            match &**b {
                Expr::Const(c) => l.iter_mut().for_each(|x| *x = op.apply(*x, *c)),
                Expr::Var(v) => l.iter_mut().zip(col(v)).for_each(|(x, y)| *x = op.apply(*x, *y)),
                b => {
                    let r = eval_columns(b, n, col);
                    l.iter_mut().zip(&r).for_each(|(x, y)| *x = op.apply(*x, *y));
                }
            }
            l
        }
    }
}

// ---------------------------------------------------------------------------
// Simplification

fn is_const(e: &Expr, v: f64) -> bool {
    matches!(e, Expr::Const(c) if *c == v)
}

fn simplify_node(op: BinOp, a: Expr, b: Expr) -> Expr {
    use BinOp::*;
    use Expr::*;
    match (op, a, b) {
        (op, Const(x), Const(y)) if op.apply(x, y).is_finite() => Const(op.apply(x, y)),
        (Add, a, b) if is_const(&b, 0.0) => a,
        (Add, a, b) if is_const(&a, 0.0) => b,
        (Sub, a, b) if is_const(&b, 0.0) => a,
        (Sub, a, b) if a == b => Const(0.0),
        (Mul, a, b) if is_const(&a, 0.0) || is_const(&b, 0.0) => Const(0.0),
        (Mul, a, b) if is_const(&b, 1.0) => a,
        (Mul, a, b) if is_const(&a, 1.0) => b,
        // Constant merging through one level of the same associative operator.
        (op @ (Add | Mul), Const(x), Bin(o, p, q)) | (op @ (Add | Mul), Bin(o, p, q), Const(x)) if o == op => {
            match (*p, *q) {
                (Const(y), q) | (q, Const(y)) if op.apply(x, y).is_finite() => Bin(op, Box::new(Const(op.apply(x, y))), Box::new(q)),
                (p, q) => {
                    let inner = Bin(o, Box::new(p), Box::new(q));
                    if op == Mul {
                        Bin(op, Box::new(Const(x)), Box::new(inner))
                    } else {
                        Bin(op, Box::new(inner), Box::new(Const(x)))
                    }
                }
            }
        }
        // Constants lead products.
        (Mul, a, Const(c)) => Bin(Mul, Box::new(Const(c)), Box::new(a)),
        (op, a, b) => Bin(op, Box::new(a), Box::new(b)),
    }
}

fn simplify_once(e: &Expr) -> Expr {
    match e {
        Expr::Bin(op, a, b) => simplify_node(*op, simplify_once(a), simplify_once(b)),
        e => e.clone(),
    }
}

/// Applies constant folding, identity rules, `x - x -> 0` and constant
/// merging until nothing changes. Never increases complexity.
pub fn simplify(e: &Expr) -> Expr {
    let mut cur = e.clone();
    for _ in 0..64 {
        let next = simplify_once(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

// ---------------------------------------------------------------------------
// Canonical polynomial form

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub coef: f64,
    /// Sorted variable names; empty for the constant term.
    pub monomial: Vec<String>,
}

impl Term {
    pub fn monomial_string(&self) -> String {
        monomial_string(&self.monomial)
    }
}

pub fn monomial_string(m: &[String]) -> String {
    if m.is_empty() {
        "1".to_string()
    } else {
        m.join("*")
    }
}

/// A sum of monomials with unique, sorted monomials and nonzero coefficients.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TermList {
    pub terms: Vec<Term>,
}

impl TermList {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn coefficient(&self, monomial: &[String]) -> Option<f64> {
        self.terms.iter().find(|t| t.monomial == monomial).map(|t| t.coef)
    }

    pub fn monomials(&self) -> Vec<String> {
        self.terms.iter().map(Term::monomial_string).collect()
    }

    pub fn to_expr(&self) -> Expr {
        let mut terms = self.terms.iter().map(|t| {
            t.monomial
                .iter()
                .fold(Expr::Const(t.coef), |acc, v| Expr::bin(BinOp::Mul, acc, Expr::var(v)))
        });
        match terms.next() {
            None => Expr::Const(0.0),
            Some(first) => terms.fold(first, |acc, t| Expr::bin(BinOp::Add, acc, t)),
        }
    }
}

impl fmt::Display for TermList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return f.write_str("0");
        }
        for (i, t) in self.terms.iter().enumerate() {
            let mag = if i == 0 { t.coef } else { t.coef.abs() };
            if i > 0 {
                f.write_str(if t.coef < 0.0 { " - " } else { " + " })?;
            }
            if t.monomial.is_empty() {
                write!(f, "{mag}")?;
            } else {
                write!(f, "{mag}*{}", t.monomial.join("*"))?;
            }
        }
        Ok(())
    }
}

type Poly = BTreeMap<Vec<String>, f64>;

fn poly_of(e: &Expr) -> Poly {
    match e {
        Expr::Const(c) => BTreeMap::from([(Vec::new(), *c)]),
        Expr::Var(v) => BTreeMap::from([(vec![v.to_string()], 1.0)]),
        Expr::Bin(op, a, b) => {
            let pa = poly_of(a);
            let pb = poly_of(b);
            match op {
                BinOp::Add | BinOp::Sub => {
                    let sign = if *op == BinOp::Add { 1.0 } else { -1.0 };
                    let mut out = pa;
                    for (m, c) in pb {
                        *out.entry(m).or_insert(0.0) += sign * c;
                    }
                    out
                }
                BinOp::Mul => {
                    let mut out = Poly::new();
                    for (ma, ca) in &pa {
                        for (mb, cb) in &pb {
                            let mut m: Vec<String> = ma.iter().chain(mb).cloned().collect();
                            m.sort();
                            *out.entry(m).or_insert(0.0) += ca * cb;
                        }
                    }
                    out
                }
            }
        }
    }
}

/// Fully distributed sum-of-monomials form with like terms combined and
/// coefficients below 1e-12 in magnitude dropped.
pub fn canonical_terms(e: &Expr) -> TermList {
    let mut terms: Vec<Term> = poly_of(e)
        .into_iter()
        .filter(|(_, c)| c.abs() >= 1e-12)
        .map(|(monomial, coef)| Term { coef, monomial })
        .collect();
    terms.sort_by(|a, b| a.monomial.len().cmp(&b.monomial.len()).then_with(|| a.monomial.cmp(&b.monomial)));
    TermList { terms }
}

// ---------------------------------------------------------------------------
// Random generation

pub fn random_leaf(vars: &[String], rng: &mut Rng) -> Expr {
    if !vars.is_empty() && rng.random_bool(0.5) {
        Expr::var(&vars[rng.random_range(0..vars.len())])
    } else {
        Expr::Const(rng.random_range(-2.0..2.0))
    }
}

fn random_tree(size: usize, vars: &[String], rng: &mut Rng, depth_left: usize) -> Expr {
    if size <= 1 || depth_left <= 1 {
        return random_leaf(vars, rng);
    }
    let internal = (size - 1) / 2;
    // Share the remaining internal nodes between the two children, keeping
    // both subtrees shallow enough for the depth budget.
    let cap = (1usize << (depth_left - 2).min(30)) - 1;
    let lo = (internal - 1).saturating_sub(cap);
    let hi = (internal - 1).min(cap);
    let left = if lo >= hi { lo } else { rng.random_range(lo..=hi) };
    let right = internal - 1 - left;
    let op = BinOp::ALL[rng.random_range(0..BinOp::ALL.len())];
    let a = random_tree(2 * left + 1, vars, rng, depth_left - 1);
    let b = random_tree(2 * right + 1, vars, rng, depth_left - 1);
    Expr::bin(op, a, b)
}

/// Random tree over `vars` with exactly `target` nodes when `target` is odd
/// and `target - 1` nodes otherwise (binary trees have odd size). Constants
/// are uniform on (-2, 2).
pub fn random_expr(target: usize, vars: &[String], rng: &mut Rng) -> Expr {
    let size = if target.is_multiple_of(2) { target.saturating_sub(1).max(1) } else { target };
    random_tree(size, vars, rng, DEFAULT_MAX_DEPTH)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;

    fn p(s: &str) -> Expr {
        parse_expr(s).unwrap()
    }

    fn vars() -> Vec<String> {
        ["u", "u_x", "u_xx", "u_xxx"].iter().map(|s| s.to_string()).collect()
    }

    fn random_table(rows: usize, seed: u64) -> FeatureTable {
        let mut rng = rng_from_seed(seed);
        let cols = vars().iter().map(|_| (0..rows).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        FeatureTable::new(vars(), cols, "u_t", vec![0.0; rows]).unwrap()
    }

    /// Independent evaluator: compile to postfix and run a value stack.
    fn stack_eval(e: &Expr, row: &[f64], names: &[String]) -> f64 {
        enum Op {
            Push(f64),
            Load(usize),
            Apply(BinOp),
        }
        fn compile(e: &Expr, names: &[String], out: &mut Vec<Op>) {
            match e {
                Expr::Const(c) => out.push(Op::Push(*c)),
                Expr::Var(v) => out.push(Op::Load(names.iter().position(|n| **n == **v).unwrap())),
                Expr::Bin(op, a, b) => {
                    compile(a, names, out);
                    compile(b, names, out);
                    out.push(Op::Apply(*op));
                }
            }
        }
        let mut prog = Vec::new();
        compile(e, names, &mut prog);
        let mut stack = Vec::new();
        for op in prog {
            match op {
                Op::Push(c) => stack.push(c),
                Op::Load(i) => stack.push(row[i]),
                Op::Apply(o) => {
                    let b = stack.pop().unwrap();
                    let a = stack.pop().unwrap();
                    stack.push(o.apply(a, b));
                }
            }
        }
        stack.pop().unwrap()
    }

    #[test]
    fn parses_table_equation() {
        let e = p("-0.9898*u*u_x + 0.0981*u_xx");
        assert_eq!(e.complexity(), 9);
        let again = p(&e.to_string());
        assert_eq!(again, e);
        assert_eq!(e.to_string(), "-0.9898*u*u_x + 0.0981*u_xx");
        assert_eq!(p("-0.3885*u_x").complexity(), 3);
    }

    #[test]
    fn syntax_errors_report_column() {
        match parse_expr("u *") {
            Err(Error::Syntax { column, .. }) => assert_eq!(column, 4),
            other => panic!("{other:?}"),
        }
        match parse_expr("u + $") {
            Err(Error::Syntax { column, .. }) => assert_eq!(column, 5),
            other => panic!("{other:?}"),
        }
        assert!(parse_expr("(u").is_err());
        assert!(parse_expr("u u").is_err());
        assert!(parse_expr("").is_err());
        assert!(parse_expr("1e999").is_err());
    }

    #[test]
    fn parentheses_and_unary_minus() {
        assert_eq!(p("((u))"), Expr::var("u"));
        assert_eq!(p("-2"), Expr::Const(-2.0));
        assert_eq!(p("-u"), Expr::bin(BinOp::Mul, Expr::Const(-1.0), Expr::var("u")));
        assert_eq!(p("u - (u_x - u_xx)").to_string(), "u - (u_x - u_xx)");
        assert_eq!(p("(u - u_x) - u_xx").to_string(), "u - u_x - u_xx");
        assert_eq!(p("u*(u_x*u_xx)").to_string(), "u*(u_x*u_xx)");
        assert_eq!(p("(u + 1)*u_x").to_string(), "(u + 1)*u_x");
        assert_eq!(p("2.5e-3*u_xxx"), Expr::bin(BinOp::Mul, Expr::Const(0.0025), Expr::var("u_xxx")));
    }

    #[test]
    fn evaluates_rows() {
        let t = FeatureTable::new(
            vec!["u".into(), "u_x".into(), "u_xxx".into()],
            vec![vec![2.0], vec![3.0], vec![1e30]],
            "u_t",
            vec![0.0],
        )
        .unwrap();
        assert_eq!(evaluate(&p("u*u_x"), &t).unwrap(), vec![6.0]);
        assert_eq!(evaluate(&p("0*u_xxx + 7"), &t).unwrap(), vec![7.0]);
        assert!(matches!(evaluate(&p("u_yy"), &t), Err(Error::Schema(_))));
    }

    #[test]
    fn complexity_counts_nodes() {
        assert_eq!(Expr::Const(1.0).complexity(), 1);
        assert_eq!(p("c*u_x").complexity(), 3);
        assert_eq!(p("1.5*u*u_x + 0.1*u_xx").complexity(), 9);
    }

    #[test]
    fn simplify_examples() {
        assert_eq!(simplify(&p("1*u_x + 0")), p("u_x"));
        assert_eq!(simplify(&p("2*(3*u)")), p("6*u"));
        assert_eq!(simplify(&p("(u*3)*2")), p("6*u"));
        assert_eq!(simplify(&p("u*u_x - u*u_x")), Expr::Const(0.0));
        assert_eq!(simplify(&p("u*0 + u_x*1")), p("u_x"));
        assert_eq!(simplify(&p("(1 + 2)*u")), p("3*u"));
    }

    #[test]
    fn canonical_examples() {
        let t = canonical_terms(&p("-0.9898*u*u_x + 0.0981*u_xx"));
        assert_eq!(t.len(), 2);
        assert_eq!(t.coefficient(&["u".into(), "u_x".into()]), Some(-0.9898));
        assert_eq!(t.coefficient(&["u_xx".into()]), Some(0.0981));

        let t = canonical_terms(&p("u*(u_x + u_xx)"));
        assert_eq!(t.monomials(), vec!["u*u_x", "u*u_xx"]);
        assert!(t.terms.iter().all(|t| t.coef == 1.0));

        assert!(canonical_terms(&p("u - u")).is_empty());
        assert_eq!(canonical_terms(&p("u_x*u*u")).monomials(), vec!["u*u*u_x"]);
    }

    #[test]
    fn random_small_targets() {
        let mut rng = rng_from_seed(3);
        for _ in 0..200 {
            assert_eq!(random_expr(1, &vars(), &mut rng).complexity(), 1);
            let e = random_expr(3, &vars(), &mut rng);
            assert_eq!(e.complexity(), 3);
            assert!(matches!(e, Expr::Bin(_, ref a, ref b) if a.complexity() == 1 && b.complexity() == 1));
        }
        for target in 4..40 {
            let e = random_expr(target, &vars(), &mut rng);
            assert!(e.complexity().abs_diff(target) <= 2);
            assert!(e.depth() <= DEFAULT_MAX_DEPTH);
        }
        let v = vars();
        for e in (0..100).map(|_| random_expr(7, &v, &mut rng)) {
            assert!(e.constants().iter().all(|c| (-2.0..2.0).contains(c)));
        }
    }

    #[test]
    fn random_sequence_is_reproducible() {
        let draw = || {
            let mut rng = rng_from_seed(99);
            (0..1000).map(|i| random_expr(1 + i % 9, &vars(), &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn evaluation_matches_stack_machine() {
        let table = random_table(100, 8);
        let mut rng = rng_from_seed(4);
        for _ in 0..300 {
            let e = random_expr(rng.random_range(1..25), &vars(), &mut rng);
            let vals = evaluate(&e, &table).unwrap();
            for (i, v) in vals.iter().enumerate() {
                let s = stack_eval(&e, &table.row(i), table.names());
                assert_eq!(v.to_bits(), s.to_bits(), "{e}");
            }
        }
    }

    #[test]
    fn simplify_and_canonical_preserve_values() {
        let table = random_table(50, 1);
        let mut rng = rng_from_seed(12);
        for _ in 0..1000 {
            let e = random_expr(rng.random_range(1..20), &vars(), &mut rng);
            let base = evaluate(&e, &table).unwrap();
            let s = simplify(&e);
            assert!(s.complexity() <= e.complexity());
            let sv = evaluate(&s, &table).unwrap();
            let cv = evaluate(&canonical_terms(&e).to_expr(), &table).unwrap();
            let scale = base.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            for ((a, b), c) in base.iter().zip(&sv).zip(&cv) {
                assert!((a - b).abs() <= 1e-10 * scale, "{e} -> {s}");
                assert!((a - c).abs() <= 1e-10 * scale, "{e}");
            }
        }
    }

    #[test]
    fn subtree_replace_round_trip() {
        let e = p("u*(u_x + 2) - u_xx");
        assert_eq!(e.complexity(), 7);
        assert_eq!(e.subtree(0), &e);
        assert_eq!(e.subtree(3), &p("u_x + 2"));
        assert_eq!(e.depth_of(3), 3);
        assert_eq!(e.replace(3, Expr::var("u")), p("u*u - u_xx"));
        for i in 0..e.complexity() {
            assert_eq!(e.replace(i, e.subtree(i).clone()), e);
        }
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (-1e3f64..1e3).prop_map(Expr::Const),
            prop::sample::select(vec!["u", "u_x", "u_xx", "u_xxx"]).prop_map(Expr::var),
        ];
        leaf.prop_recursive(6, 40, 2, |inner| {
            (prop::sample::select(BinOp::ALL.to_vec()), inner.clone(), inner).prop_map(|(op, a, b)| Expr::bin(op, a, b))
        })
    }

    proptest! {
        #[test]
        fn format_parse_is_identity(e in arb_expr()) {
            let text = e.to_string();
            let back = parse_expr(&text).unwrap();
            prop_assert_eq!(back.complexity(), e.complexity());
            prop_assert_eq!(back, e);
        }

        #[test]
        fn simplify_never_grows(e in arb_expr()) {
            prop_assert!(simplify(&e).complexity() <= e.complexity());
        }
    }
}
