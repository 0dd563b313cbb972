//! Discrete-time Signal Temporal Logic.
//!
//! Formulas are built from named predicates bound through a
//! [`PredicateTable`]. Two quantitative semantics are provided:
//!
//! * [`robustness_classic`] uses exact `min`/`max`; its sign decides
//!   satisfaction (zero counts as not satisfied).
//! * [`SmoothRobustness`] replaces every `min`/`max` by log-sum-exp
//!   soft-min/soft-max with temperature `k` and evaluates on a
//!   [`Tape`](crate::diffgraph::Tape), so gradients with respect to every
//!   state are available.
//!
//! Text grammar (`and` binds tighter than `or`, `U` tighter than `and`):
//!
//! ```text
//! formula := conj ('or' conj)*
//! conj    := until ('and' until)*
//! until   := unary ('U' '[' int ',' int ']' until)?
//! unary   := 'not' unary | ('G' | 'F') '[' int ',' int ']' unary
//!          | '(' formula ')' | 'true' | IDENT
//! ```

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{DiffError, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StlError {
    #[error("syntax error at {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unknown predicate `{name}` at {pos}")]
    UnknownPredicate { name: String, pos: usize },
    #[error("malformed interval [{a},{b}] at {pos}")]
    MalformedInterval { a: u32, b: u32, pos: usize },
    #[error("trajectory too short: need {needed} states, got {got}")]
    TrajectoryTooShort { needed: usize, got: usize },
    #[error("state has dimension {got}, predicate needs index {index}")]
    StateDimension { index: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] DiffError),
}

/// Closed discrete interval `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub a: u32,
    pub b: u32,
}

impl Interval {
    pub fn new(a: u32, b: u32) -> Option<Self> {
        (a <= b).then_some(Self { a, b })
    }

    pub fn len(&self) -> usize {
        (self.b - self.a + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Scalar margin function `l(x)`; the predicate holds when `l(x) >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    /// `coeffs . x - offset`
    Affine { coeffs: Vec<f64>, offset: f64 },
    /// `min(px - lo_x, hi_x - px, py - lo_y, hi_y - py)`
    InsideBox {
        axes: [usize; 2],
        lo: [f64; 2],
        hi: [f64; 2],
    },
    /// `r^2 - |p - c|^2`
    InsideDisk {
        axes: [usize; 2],
        center: [f64; 2],
        radius: f64,
    },
    /// `|p - c|^2 - r^2`
    OutsideDisk {
        axes: [usize; 2],
        center: [f64; 2],
        radius: f64,
    },
}

fn component(x: &[f64], i: usize) -> Result<f64, StlError> {
    x.get(i)
        .copied()
        .ok_or(StlError::StateDimension { index: i, got: x.len() })
}

impl Predicate {
    pub fn margin(&self, x: &[f64]) -> Result<f64, StlError> {
        Ok(match self {
            Predicate::Affine { coeffs, offset } => {
                if coeffs.len() > x.len() {
                    return Err(StlError::StateDimension {
                        index: coeffs.len() - 1,
                        got: x.len(),
                    });
                }
                coeffs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>() - offset
            }
            Predicate::InsideBox { axes, lo, hi } => {
                let (px, py) = (component(x, axes[0])?, component(x, axes[1])?);
                (px - lo[0]).min(hi[0] - px).min(py - lo[1]).min(hi[1] - py)
            }
            Predicate::InsideDisk {
                axes,
                center,
                radius,
            } => {
                let dx = component(x, axes[0])? - center[0];
                let dy = component(x, axes[1])? - center[1];
                radius * radius - dx * dx - dy * dy
            }
            Predicate::OutsideDisk {
                axes,
                center,
                radius,
            } => {
                let dx = component(x, axes[0])? - center[0];
                let dy = component(x, axes[1])? - center[1];
                dx * dx + dy * dy - radius * radius
            }
        })
    }

    fn build(&self, tape: &mut Tape, x: Var, k: f64) -> Result<Var, StlError> {
        let dim = tape.width(x);
        Ok(match self {
            Predicate::Affine { coeffs, offset } => {
                if coeffs.len() > dim {
                    return Err(StlError::StateDimension {
                        index: coeffs.len() - 1,
                        got: dim,
                    });
                }
                let mut padded = coeffs.clone();
                padded.resize(dim, 0.0);
                let c = tape.constant(padded);
                let d = tape.dot(c, x)?;
                let off = tape.scalar(*offset);
                tape.sub(d, off)?
            }
            Predicate::InsideBox { axes, lo, hi } => {
                let px = tape.index(x, axes[0])?;
                let py = tape.index(x, axes[1])?;
                let p = tape.concat(&[px, px, py, py])?;
                let sign = tape.constant(vec![1.0, -1.0, 1.0, -1.0]);
                let bounds = tape.constant(vec![lo[0], -hi[0], lo[1], -hi[1]]);
                let sp = tape.mul(p, sign)?;
                let margins = tape.sub(sp, bounds)?;
                tape.soft_min(margins, k)?
            }
            Predicate::InsideDisk {
                axes,
                center,
                radius,
            }
            | Predicate::OutsideDisk {
                axes,
                center,
                radius,
            } => {
                let px = tape.index(x, axes[0])?;
                let py = tape.index(x, axes[1])?;
                let p = tape.concat(&[px, py])?;
                let c = tape.constant(center.to_vec());
                let d = tape.sub(p, c)?;
                let sq = tape.powf(d, 2.0);
                let dist2 = tape.sum(sq);
                let r2 = tape.scalar(radius * radius);
                if matches!(self, Predicate::InsideDisk { .. }) {
                    tape.sub(r2, dist2)?
                } else {
                    tape.sub(dist2, r2)?
                }
            }
        })
    }

    /// Fan-in of the internal `min` (box predicates only).
    fn min_fan_in(&self) -> usize {
        match self {
            Predicate::InsideBox { .. } => 4,
            _ => 1,
        }
    }
}

/// Name to predicate bindings used by the parser.
pub type PredicateTable = HashMap<String, Predicate>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Formula {
    True,
    Pred { name: String, pred: Predicate },
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Always(Interval, Box<Formula>),
    Eventually(Interval, Box<Formula>),
    Until(Interval, Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn pred(name: &str, pred: Predicate) -> Self {
        Formula::Pred {
            name: name.to_string(),
            pred,
        }
    }

    pub fn not(f: Formula) -> Self {
        Formula::Not(Box::new(f))
    }

    pub fn always(a: u32, b: u32, f: Formula) -> Self {
        Formula::Always(Interval::new(a, b).expect("a <= b"), Box::new(f))
    }

    pub fn eventually(a: u32, b: u32, f: Formula) -> Self {
        Formula::Eventually(Interval::new(a, b).expect("a <= b"), Box::new(f))
    }

    pub fn until(a: u32, b: u32, lhs: Formula, rhs: Formula) -> Self {
        Formula::Until(
            Interval::new(a, b).expect("a <= b"),
            Box::new(lhs),
            Box::new(rhs),
        )
    }

    /// Farthest future offset needed to evaluate the formula.
    pub fn horizon(&self) -> usize {
        match self {
            Formula::True | Formula::Pred { .. } => 0,
            Formula::Not(f) => f.horizon(),
            Formula::And(fs) | Formula::Or(fs) => fs.iter().map(Formula::horizon).max().unwrap_or(0),
            Formula::Always(i, f) | Formula::Eventually(i, f) => i.b as usize + f.horizon(),
            Formula::Until(i, l, r) => i.b as usize + l.horizon().max(r.horizon()),
        }
    }

    /// Nesting depth of min/max reductions and the largest fan-in of any
    /// single reduction. Together they bound the gap between the smooth and
    /// the classical semantics: `|smooth - classic| <= depth * ln(fan_in) / k`.
    pub fn min_max_profile(&self) -> (usize, usize) {
        match self {
            Formula::True => (0, 1),
            Formula::Pred { pred, .. } => {
                let w = pred.min_fan_in();
                (usize::from(w > 1), w)
            }
            Formula::Not(f) => f.min_max_profile(),
            Formula::And(fs) | Formula::Or(fs) => {
                let (d, w) = fs
                    .iter()
                    .map(Formula::min_max_profile)
                    .fold((0, 1), |(d, w), (cd, cw)| (d.max(cd), w.max(cw)));
                if fs.len() > 1 {
                    (d + 1, w.max(fs.len()))
                } else {
                    (d, w)
                }
            }
            Formula::Always(i, f) | Formula::Eventually(i, f) => {
                let (d, w) = f.min_max_profile();
                (d + usize::from(i.len() > 1), w.max(i.len()))
            }
            Formula::Until(i, l, r) => {
                let (dl, wl) = l.min_max_profile();
                let (dr, wr) = r.min_max_profile();
                (dl.max(dr) + 2, wl.max(wr).max(i.b as usize + 1).max(i.len()))
            }
        }
    }

    /// Smoothing error bound `depth * ln(fan_in) / k`.
    pub fn smoothing_bound(&self, k: f64) -> f64 {
        let (d, w) = self.min_max_profile();
        d as f64 * (w as f64).ln() / k
    }

    /// Collects the predicate names used by this formula.
    pub fn predicate_names(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.visit_names(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn visit_names<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Formula::True => {}
            Formula::Pred { name, .. } => out.push(name),
            Formula::Not(f) | Formula::Always(_, f) | Formula::Eventually(_, f) => f.visit_names(out),
            Formula::And(fs) | Formula::Or(fs) => fs.iter().for_each(|f| f.visit_names(out)),
            Formula::Until(_, l, r) => {
                l.visit_names(out);
                r.visit_names(out);
            }
        }
    }

    fn is_compound(&self) -> bool {
        matches!(self, Formula::And(_) | Formula::Or(_) | Formula::Until(..))
    }
}

struct Operand<'a>(&'a Formula);

impl fmt::Display for Operand<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_compound() {
            write!(f, "({})", self.0)
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::True => write!(f, "true"),
            Formula::Pred { name, .. } => write!(f, "{name}"),
            Formula::Not(g) => write!(f, "not {}", Operand(g)),
            Formula::And(gs) | Formula::Or(gs) => {
                let sep = if matches!(self, Formula::And(_)) { " and " } else { " or " };
                for (i, g) in gs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(sep)?;
                    }
                    write!(f, "{}", Operand(g))?;
                }
                Ok(())
            }
            Formula::Always(i, g) => write!(f, "G[{},{}] {}", i.a, i.b, Operand(g)),
            Formula::Eventually(i, g) => write!(f, "F[{},{}] {}", i.a, i.b, Operand(g)),
            Formula::Until(i, l, r) => write!(f, "{} U[{},{}] {}", Operand(l), i.a, i.b, Operand(r)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    LParen,
    RParen,
    LBracket,
    RBracket,
    Comma,
    Int(u32),
    Ident(String),
}

fn tokenize(text: &str) -> Result<Vec<(Token, usize)>, StlError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                out.push((Token::LParen, i));
                i += 1;
            }
            ')' => {
                out.push((Token::RParen, i));
                i += 1;
            }
            '[' => {
                out.push((Token::LBracket, i));
                i += 1;
            }
            ']' => {
                out.push((Token::RBracket, i));
                i += 1;
            }
            ',' => {
                out.push((Token::Comma, i));
                i += 1;
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let n = text[start..i].parse().map_err(|_| StlError::Syntax {
                    pos: start,
                    msg: "integer out of range".into(),
                })?;
                out.push((Token::Int(n), start));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                out.push((Token::Ident(text[start..i].to_string()), start));
            }
            other => {
                return Err(StlError::Syntax {
                    pos: i,
                    msg: format!("unexpected character `{other}`"),
                })
            }
        }
    }
    Ok(out)
}

const KEYWORDS: [&str; 7] = ["and", "or", "not", "true", "G", "F", "U"];

struct Parser<'a> {
    tokens: Vec<(Token, usize)>,
    pos: usize,
    end: usize,
    table: &'a PredicateTable,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(_, p)| *p)
    }

    fn peek_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Token::Ident(s)) if s == kw)
    }

    fn expect(&mut self, want: Token, what: &str) -> Result<(), StlError> {
        if self.peek() == Some(&want) {
            self.pos += 1;
            Ok(())
        } else {
            Err(StlError::Syntax {
                pos: self.offset(),
                msg: format!("expected {what}"),
            })
        }
    }

    fn int(&mut self) -> Result<u32, StlError> {
        match self.peek() {
            Some(Token::Int(n)) => {
                let n = *n;
                self.pos += 1;
                Ok(n)
            }
            _ => Err(StlError::Syntax {
                pos: self.offset(),
                msg: "expected integer".into(),
            }),
        }
    }

    fn interval(&mut self) -> Result<Interval, StlError> {
        let pos = self.offset();
        self.expect(Token::LBracket, "`[`")?;
        let a = self.int()?;
        self.expect(Token::Comma, "`,`")?;
        let b = self.int()?;
        self.expect(Token::RBracket, "`]`")?;
        Interval::new(a, b).ok_or(StlError::MalformedInterval { a, b, pos })
    }

    fn formula(&mut self) -> Result<Formula, StlError> {
        let mut terms = vec![self.conj()?];
        while self.peek_keyword("or") {
            self.pos += 1;
            terms.push(self.conj()?);
        }
        Ok(if terms.len() == 1 {
            terms.pop().unwrap()
        } else {
            Formula::Or(terms)
        })
    }

    fn conj(&mut self) -> Result<Formula, StlError> {
        let mut terms = vec![self.until()?];
        while self.peek_keyword("and") {
            self.pos += 1;
            terms.push(self.until()?);
        }
        Ok(if terms.len() == 1 {
            terms.pop().unwrap()
        } else {
            Formula::And(terms)
        })
    }

    fn until(&mut self) -> Result<Formula, StlError> {
        let lhs = self.unary()?;
        if self.peek_keyword("U") {
            self.pos += 1;
            let i = self.interval()?;
            let rhs = self.until()?;
            return Ok(Formula::Until(i, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Formula, StlError> {
        let pos = self.offset();
        match self.peek().cloned() {
            Some(Token::LParen) => {
                self.pos += 1;
                let f = self.formula()?;
                self.expect(Token::RParen, "`)`")?;
                Ok(f)
            }
            Some(Token::Ident(word)) => {
                self.pos += 1;
                match word.as_str() {
                    "not" => Ok(Formula::Not(Box::new(self.unary()?))),
                    "true" => Ok(Formula::True),
                    "G" => {
                        let i = self.interval()?;
                        Ok(Formula::Always(i, Box::new(self.unary()?)))
                    }
                    "F" => {
                        let i = self.interval()?;
                        Ok(Formula::Eventually(i, Box::new(self.unary()?)))
                    }
                    w if KEYWORDS.contains(&w) => Err(StlError::Syntax {
                        pos,
                        msg: format!("unexpected keyword `{w}`"),
                    }),
                    name => match self.table.get(name) {
                        Some(pred) => Ok(Formula::Pred {
                            name: name.to_string(),
                            pred: pred.clone(),
                        }),
                        None => Err(StlError::UnknownPredicate {
                            name: name.to_string(),
                            pos,
                        }),
                    },
                }
            }
            Some(_) => Err(StlError::Syntax {
                pos,
                msg: "expected a formula".into(),
            }),
            None => Err(StlError::Syntax {
                pos,
                msg: "unexpected end of input".into(),
            }),
        }
    }
}

/// Parses formula text, resolving predicate names through `table`.
pub fn parse_formula(text: &str, table: &PredicateTable) -> Result<Formula, StlError> {
    let mut parser = Parser {
        tokens: tokenize(text)?,
        pos: 0,
        end: text.len(),
        table,
    };
    let f = parser.formula()?;
    if parser.pos != parser.tokens.len() {
        return Err(StlError::Syntax {
            pos: parser.offset(),
            msg: "trailing input".into(),
        });
    }
    Ok(f)
}

fn check_length<S>(phi: &Formula, states: &[S], t: usize) -> Result<(), StlError> {
    let needed = t + phi.horizon() + 1;
    if states.len() < needed {
        return Err(StlError::TrajectoryTooShort {
            needed,
            got: states.len(),
        });
    }
    Ok(())
}

/// Classical (min/max) robustness of `phi` at time `t`.
pub fn robustness_classic<S: AsRef<[f64]>>(phi: &Formula, states: &[S], t: usize) -> Result<f64, StlError> {
    check_length(phi, states, t)?;
    classic(phi, states, t)
}

fn classic<S: AsRef<[f64]>>(phi: &Formula, xs: &[S], t: usize) -> Result<f64, StlError> {
    Ok(match phi {
        Formula::True => f64::INFINITY,
        Formula::Pred { pred, .. } => pred.margin(xs[t].as_ref())?,
        Formula::Not(f) => -classic(f, xs, t)?,
        Formula::And(fs) => {
            let mut v = f64::INFINITY;
            for f in fs {
                v = v.min(classic(f, xs, t)?);
            }
            v
        }
        Formula::Or(fs) => {
            let mut v = f64::NEG_INFINITY;
            for f in fs {
                v = v.max(classic(f, xs, t)?);
            }
            v
        }
        Formula::Always(i, f) => {
            let mut v = f64::INFINITY;
            for s in t + i.a as usize..=t + i.b as usize {
                v = v.min(classic(f, xs, s)?);
            }
            v
        }
        Formula::Eventually(i, f) => {
            let mut v = f64::NEG_INFINITY;
            for s in t + i.a as usize..=t + i.b as usize {
                v = v.max(classic(f, xs, s)?);
            }
            v
        }
        Formula::Until(i, l, r) => {
            let mut best = f64::NEG_INFINITY;
            // running min of the left operand over [t, s)
            let mut prefix = f64::INFINITY;
            for s in t..=t + i.b as usize {
                if s >= t + i.a as usize {
                    best = best.max(classic(r, xs, s)?.min(prefix));
                }
                prefix = prefix.min(classic(l, xs, s)?);
            }
            best
        }
    })
}

/// `robustness_classic(phi, states, 0) > 0`.
pub fn satisfied<S: AsRef<[f64]>>(phi: &Formula, states: &[S]) -> Result<bool, StlError> {
    Ok(robustness_classic(phi, states, 0)? > 0.0)
}

/// Builds the smooth robustness of `phi` at time `t` on `tape`, reading the
/// state at time `s` from `states[s]`.
pub fn build_smooth(tape: &mut Tape, phi: &Formula, states: &[Var], t: usize, k: f64) -> Result<Var, StlError> {
    check_length(phi, states, t)?;
    smooth(tape, phi, states, t, k)
}

fn reduce(tape: &mut Tape, parts: Vec<Var>, k: f64, max: bool) -> Result<Var, StlError> {
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    let c = tape.concat(&parts)?;
    Ok(if max { tape.soft_max(c, k)? } else { tape.soft_min(c, k)? })
}

fn smooth(tape: &mut Tape, phi: &Formula, xs: &[Var], t: usize, k: f64) -> Result<Var, StlError> {
    match phi {
        Formula::True => Ok(tape.scalar(f64::INFINITY)),
        Formula::Pred { pred, .. } => pred.build(tape, xs[t], k),
        Formula::Not(f) => {
            let v = smooth(tape, f, xs, t, k)?;
            Ok(tape.neg(v))
        }
        Formula::And(fs) | Formula::Or(fs) => {
            let parts = fs
                .iter()
                .map(|f| smooth(tape, f, xs, t, k))
                .collect::<Result<Vec<_>, _>>()?;
            reduce(tape, parts, k, matches!(phi, Formula::Or(_)))
        }
        Formula::Always(i, f) | Formula::Eventually(i, f) => {
            let parts = (t + i.a as usize..=t + i.b as usize)
                .map(|s| smooth(tape, f, xs, s, k))
                .collect::<Result<Vec<_>, _>>()?;
            reduce(tape, parts, k, matches!(phi, Formula::Eventually(..)))
        }
        Formula::Until(i, l, r) => {
            let lefts = (t..t + i.b as usize)
                .map(|s| smooth(tape, l, xs, s, k))
                .collect::<Result<Vec<_>, _>>()?;
            let mut outer = Vec::with_capacity(i.len());
            for s in t + i.a as usize..=t + i.b as usize {
                let mut inner = vec![smooth(tape, r, xs, s, k)?];
                inner.extend_from_slice(&lefts[..s - t]);
                outer.push(reduce(tape, inner, k, false)?);
            }
            reduce(tape, outer, k, true)
        }
    }
}

/// Robustness value, optionally with `d rho / d x_t` for every state row.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessResult {
    pub value: f64,
    pub gradient: Option<Vec<Vec<f64>>>,
}

/// Smooth robustness of a fixed formula over trajectories of a fixed
/// length. The tape is built once; each evaluation only refreshes the leaves
/// `x0..xT`.
#[derive(Debug, Clone)]
pub struct SmoothRobustness {
    tape: Tape,
    leaves: Vec<Var>,
    k: f64,
}

impl SmoothRobustness {
    /// `len` is the number of states (T + 1), `dim` the state dimension.
    pub fn new(phi: &Formula, dim: usize, len: usize, k: f64) -> Result<Self, StlError> {
        let mut tape = Tape::new();
        let leaves = (0..len)
            .map(|t| tape.leaf(&format!("x{t}"), dim))
            .collect::<Result<Vec<_>, _>>()?;
        let out = build_smooth(&mut tape, phi, &leaves, 0, k)?;
        tape.set_output(out);
        Ok(Self { tape, leaves, k })
    }

    pub fn temperature(&self) -> f64 {
        self.k
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value<S: AsRef<[f64]>>(&mut self, states: &[S]) -> Result<f64, StlError> {
        Ok(self.tape.forward_ordered(states)?[0])
    }

    pub fn gradient<S: AsRef<[f64]>>(&mut self, states: &[S]) -> Result<RobustnessResult, StlError> {
        let value = self.value(states)?;
        self.tape.backward_sweep()?;
        let gradient = self
            .leaves
            .iter()
            .map(|v| self.tape.adjoint(*v).to_vec())
            .collect();
        Ok(RobustnessResult {
            value,
            gradient: Some(gradient),
        })
    }
}

/// Smooth robustness tape over `states.len()` leaves named `x0..xT`.
pub fn robustness_smooth(phi: &Formula, dim: usize, len: usize, k: f64) -> Result<Tape, StlError> {
    Ok(SmoothRobustness::new(phi, dim, len, k)?.tape)
}

/// Smooth robustness and its gradient with respect to every state.
pub fn robustness_gradient<S: AsRef<[f64]>>(
    phi: &Formula,
    states: &[S],
    k: f64,
) -> Result<RobustnessResult, StlError> {
    let dim = states.first().map_or(0, |s| s.as_ref().len());
    let mut sr = SmoothRobustness::new(phi, dim.max(1), states.len(), k)?;
    sr.gradient(states)
}
