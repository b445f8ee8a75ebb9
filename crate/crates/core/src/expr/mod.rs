//! Expression language and the line-oriented system file format.
//!
//! ```text
//! system fold
//! dim n=1 k=1
//! period T=2*pi
//! order 1: x1^2 + mu1 + sin(t)
//! end
//! ```
//!
//! `order i:` holds the n components of the ε^i term; `order rest:` holds
//! the ε-independent remainder multiplying ε^(N+1). `#` starts a comment.

mod ast;
mod parser;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use ast::{Env, EvalError, Expr, Var};
pub use parser::{parse_expr, Scope};

use crate::scalar::Scalar;
use parser::{tokenize, Cursor, ExprParser, Tok};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("{line}:{col}: lexical error: {msg}")]
    Lex { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: syntax error: {msg}")]
    Syntax { line: usize, col: usize, msg: String },
    #[error("{line}:{col}: unknown identifier `{name}`")]
    UnknownIdentifier { line: usize, col: usize, name: String },
    #[error("line {line}: dimension mismatch: {msg}")]
    DimensionMismatch { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("state dimension must be at least 1")]
    ZeroDimension,
    #[error("period must be positive and finite, got {0}")]
    BadPeriod(f64),
    #[error("at least one order is required")]
    NoOrders,
    #[error("order {order} has {got} components, expected {expected}")]
    Arity { order: String, got: usize, expected: usize },
    #[error("order {order} references `{var}` outside n={n}, k={k}")]
    OutOfScope { order: String, var: Var, n: usize, k: usize },
}

/// A (k+1)-parameter family `ẋ = Σ εⁱ Fᵢ(t,x,μ) + ε^(N+1) F̃(t,x,μ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    name: String,
    n: usize,
    k: usize,
    period: f64,
    orders: Vec<Vec<Expr>>,
    rest: Option<Vec<Expr>>,
}

impl SystemSpec {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        k: usize,
        period: f64,
        orders: Vec<Vec<Expr>>,
        rest: Option<Vec<Expr>>,
    ) -> Result<Self, SpecError> {
        if n == 0 {
            return Err(SpecError::ZeroDimension);
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(SpecError::BadPeriod(period));
        }
        if orders.is_empty() {
            return Err(SpecError::NoOrders);
        }
        let labelled = orders
            .iter()
            .enumerate()
            .map(|(i, f)| ((i + 1).to_string(), f))
            .chain(rest.iter().map(|f| ("rest".to_string(), f)));
        for (label, comps) in labelled {
            if comps.len() != n {
                return Err(SpecError::Arity { order: label, got: comps.len(), expected: n });
            }
            let mut bad = None;
            for e in comps {
                e.visit_vars(&mut |v| match v {
                    Var::X(i) if i >= n => bad = Some(v),
                    Var::Mu(i) if i >= k => bad = Some(v),
                    _ => {}
                });
            }
            if let Some(var) = bad {
                return Err(SpecError::OutOfScope { order: label, var, n, k });
            }
        }
        Ok(SystemSpec { name: name.into(), n, k, period, orders, rest })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// State dimension n.
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Parameter count k.
    pub fn params(&self) -> usize {
        self.k
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Truncation order N (number of declared `order i` blocks).
    pub fn order(&self) -> usize {
        self.orders.len()
    }

    /// Highest ε power present on the right-hand side.
    ///
    /// The remainder is ε-independent, so the right-hand side is a
    /// polynomial in ε of this degree and every higher term vanishes.
    pub fn top_order(&self) -> usize {
        self.orders.len() + usize::from(self.rest.is_some())
    }

    pub fn rest(&self) -> Option<&[Expr]> {
        self.rest.as_deref()
    }

    /// Coefficient of εⁱ on the right-hand side (`F̃` at i = N+1), or `None`
    /// when that power is absent.
    pub fn term(&self, i: usize) -> Option<&[Expr]> {
        if i >= 1 && i <= self.orders.len() {
            Some(&self.orders[i - 1])
        } else if i == self.orders.len() + 1 {
            self.rest.as_deref()
        } else {
            None
        }
    }

    /// True if the εⁱ coefficient is absent or every component is the literal 0.
    pub fn term_is_zero(&self, i: usize) -> bool {
        self.term(i).is_none_or(|f| f.iter().all(Expr::is_zero_literal))
    }

    /// Evaluates the εⁱ coefficient; zero vector when absent.
    pub fn eval_term<S: Scalar>(&self, i: usize, t: &S, x: &[S], mu: &[S]) -> Result<Vec<S>, EvalError> {
        let env = Env { t, x, mu };
        match self.term(i) {
            Some(f) => f.iter().map(|e| e.eval(&env)).collect(),
            None => Ok(vec![S::zero(); self.n]),
        }
    }

    /// Full right-hand side at (t, x, μ, ε), accumulated by Horner's rule in ε.
    pub fn rhs<S: Scalar>(&self, t: &S, x: &[S], mu: &[S], eps: &S) -> Result<Vec<S>, EvalError> {
        let env = Env { t, x, mu };
        let mut acc: Option<Vec<S>> = None;
        for i in (1..=self.top_order()).rev() {
            let f = self.term(i).expect("order within range");
            let skip = f.iter().all(Expr::is_zero_literal);
            let next: Vec<S> = match (acc.take(), skip) {
                (None, true) => continue,
                (None, false) => f.iter().map(|e| e.eval(&env)).collect::<Result<_, _>>()?,
                (Some(prev), true) => prev,
                (Some(prev), false) => prev
                    .into_iter()
                    .zip(f)
                    .map(|(p, e)| Ok(p + e.eval(&env)?))
                    .collect::<Result<_, EvalError>>()?,
            };
            acc = Some(next.into_iter().map(|v| v * eps.clone()).collect());
        }
        Ok(acc.unwrap_or_else(|| vec![S::zero(); self.n]))
    }

    /// Samples `|Fᵢ(t+T) − Fᵢ(t)|` at 64 seeded random points per order and
    /// returns a message for every order that fails the 1e-10 check.
    pub fn periodicity_defects(&self) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_f00d);
        let mut out = Vec::new();
        for i in 1..=self.top_order() {
            let f = self.term(i).unwrap();
            let mut worst = 0.0_f64;
            for _ in 0..64 {
                let t = rng.gen_range(0.0..self.period);
                let x: Vec<f64> = (0..self.n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mu: Vec<f64> = (0..self.k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let t2 = t + self.period;
                for e in f {
                    let a = e.eval(&Env { t: &t, x: &x, mu: &mu });
                    let b = e.eval(&Env { t: &t2, x: &x, mu: &mu });
                    if let (Ok(a), Ok(b)) = (a, b) {
                        if a.is_finite() && b.is_finite() {
                            worst = worst.max((a - b).abs());
                        }
                    }
                }
            }
            if worst >= 1e-10 {
                let label = if i > self.order() { "rest".to_string() } else { i.to_string() };
                out.push(format!(
                    "order {label} does not look {}-periodic in t (max deviation {worst:.3e})",
                    self.period
                ));
            }
        }
        out
    }

    /// Canonical text form; `parse_system` of it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = format!("system {}\ndim n={} k={}\nperiod T={:?}\n", self.name, self.n, self.k, self.period);
        let join = |f: &[Expr]| f.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(", ");
        for (i, f) in self.orders.iter().enumerate() {
            s.push_str(&format!("order {}: {}\n", i + 1, join(f)));
        }
        if let Some(r) = &self.rest {
            s.push_str(&format!("order rest: {}\n", join(r)));
        }
        s.push_str("end\n");
        s
    }
}

/// Parses a system file and logs any periodicity warnings.
pub fn parse_system(text: &str) -> Result<SystemSpec, ParseError> {
    let (spec, warnings) = parse_system_with_warnings(text)?;
    for w in &warnings {
        log::warn!("{}: {w}", spec.name());
    }
    Ok(spec)
}

/// Parses a system file, returning periodicity warnings separately.
pub fn parse_system_with_warnings(text: &str) -> Result<(SystemSpec, Vec<String>), ParseError> {
    let mut name: Option<String> = None;
    let mut dims: Option<(usize, usize)> = None;
    let mut period: Option<f64> = None;
    let mut orders: Vec<(usize, usize, Vec<Expr>)> = Vec::new();
    let mut rest: Option<(usize, Vec<Expr>)> = None;
    let mut ended = false;
    let mut last_line = 0;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("");
        if content.trim().is_empty() {
            continue;
        }
        if ended {
            return Err(ParseError::Invalid { line, msg: "content after `end`".into() });
        }
        let toks = tokenize(content, line, 0)?;
        let end_col = content.chars().count() + 1;
        let mut cur = Cursor::new(&toks, line, end_col);
        let keyword = match cur.next() {
            Some(parser::Token { tok: Tok::Ident(k), .. }) => k.clone(),
            _ => return Err(cur.error_here("expected a keyword").at_line_start(line)),
        };
        match keyword.as_str() {
            "system" => {
                if name.is_some() {
                    return Err(ParseError::Invalid { line, msg: "duplicate `system` header".into() });
                }
                let id = match cur.next() {
                    Some(parser::Token { tok: Tok::Ident(id), .. }) => id.clone(),
                    _ => return Err(cur.error_here("expected a system name")),
                };
                if !cur.at_end() {
                    return Err(cur.error_here("unexpected tokens after system name"));
                }
                name = Some(id);
            }
            "dim" => {
                require_header(&name, line)?;
                if dims.is_some() {
                    return Err(ParseError::Invalid { line, msg: "duplicate `dim` line".into() });
                }
                let n = key_int(&mut cur, "n")?;
                let k = key_int(&mut cur, "k")?;
                if !cur.at_end() {
                    return Err(cur.error_here("unexpected tokens after dim"));
                }
                if n == 0 {
                    return Err(ParseError::Invalid { line, msg: "n must be at least 1".into() });
                }
                if n > 64 || k > 64 {
                    return Err(ParseError::Invalid { line, msg: "n and k are limited to 64".into() });
                }
                dims = Some((n, k));
            }
            "period" => {
                require_header(&name, line)?;
                if period.is_some() {
                    return Err(ParseError::Invalid { line, msg: "duplicate `period` line".into() });
                }
                match cur.next() {
                    Some(parser::Token { tok: Tok::Ident(t), .. }) if t == "T" => {}
                    _ => return Err(cur.error_here("expected `T=`")),
                }
                cur.expect(Tok::Eq, "`=`")?;
                let e = ExprParser::new(&mut cur, Scope { n: 0, k: 0 }).expr()?;
                if !cur.at_end() {
                    return Err(cur.error_here("trailing input after period"));
                }
                let value = e
                    .eval::<f64>(&Env { t: &0.0, x: &[], mu: &[] })
                    .map_err(|err| ParseError::Invalid { line, msg: format!("period: {err}") })?;
                if !(value.is_finite() && value > 0.0) {
                    return Err(ParseError::Invalid { line, msg: format!("period must be positive, got {value}") });
                }
                period = Some(value);
            }
            "order" => {
                require_header(&name, line)?;
                let Some((n, k)) = dims else {
                    return Err(ParseError::Invalid { line, msg: "`dim` must precede `order`".into() });
                };
                let which = match cur.next() {
                    Some(parser::Token { tok: Tok::Num { integer: Some(i), .. }, .. }) if *i >= 1 => {
                        Some(*i as usize)
                    }
                    Some(parser::Token { tok: Tok::Ident(r), .. }) if r == "rest" => None,
                    _ => return Err(cur.error_here("expected an order index >= 1 or `rest`")),
                };
                cur.expect(Tok::Colon, "`:`")?;
                let mut comps = Vec::new();
                loop {
                    comps.push(ExprParser::new(&mut cur, Scope { n, k }).expr()?);
                    if cur.at_end() {
                        break;
                    }
                    cur.expect(Tok::Comma, "`,` between components")?;
                }
                if comps.len() != n {
                    return Err(ParseError::DimensionMismatch {
                        line,
                        msg: format!("{} expressions for n={n}", comps.len()),
                    });
                }
                match which {
                    Some(i) => {
                        if orders.iter().any(|(j, _, _)| *j == i) {
                            return Err(ParseError::Invalid { line, msg: format!("duplicate order {i}") });
                        }
                        orders.push((i, line, comps));
                    }
                    None => {
                        if rest.is_some() {
                            return Err(ParseError::Invalid { line, msg: "duplicate `order rest`".into() });
                        }
                        rest = Some((line, comps));
                    }
                }
            }
            "end" => {
                if !cur.at_end() {
                    return Err(cur.error_here("unexpected tokens after end"));
                }
                ended = true;
            }
            other => {
                return Err(ParseError::Syntax { line, col: toks[0].col, msg: format!("unknown keyword `{other}`") })
            }
        }
    }

    let name = name.ok_or(ParseError::Invalid { line: 1, msg: "missing `system` header".into() })?;
    let (n, k) = dims.ok_or(ParseError::Invalid { line: last_line, msg: "missing `dim` line".into() })?;
    let period = period.ok_or(ParseError::Invalid { line: last_line, msg: "missing `period` line".into() })?;
    if !ended {
        return Err(ParseError::Invalid { line: last_line, msg: "missing `end`".into() });
    }
    if orders.is_empty() {
        return Err(ParseError::DimensionMismatch { line: last_line, msg: "no `order` expressions (empty F list)".into() });
    }
    orders.sort_by_key(|(i, _, _)| *i);
    for (pos, (i, line, _)) in orders.iter().enumerate() {
        if *i != pos + 1 {
            return Err(ParseError::DimensionMismatch {
                line: *line,
                msg: format!("order {i} declared but order {} is missing", pos + 1),
            });
        }
    }
    let orders: Vec<Vec<Expr>> = orders.into_iter().map(|(_, _, f)| f).collect();
    let spec = SystemSpec::new(name, n, k, period, orders, rest.map(|(_, f)| f))
        .map_err(|e| ParseError::Invalid { line: last_line, msg: e.to_string() })?;
    let warnings = spec.periodicity_defects();
    Ok((spec, warnings))
}

fn require_header(name: &Option<String>, line: usize) -> Result<(), ParseError> {
    if name.is_none() {
        return Err(ParseError::Invalid { line, msg: "`system <name>` must come first".into() });
    }
    Ok(())
}

fn key_int(cur: &mut Cursor<'_>, key: &str) -> Result<usize, ParseError> {
    match cur.next() {
        Some(parser::Token { tok: Tok::Ident(k), .. }) if k == key => {}
        _ => return Err(cur.error_here(format!("expected `{key}=`"))),
    }
    cur.expect(Tok::Eq, "`=`")?;
    match cur.next() {
        Some(parser::Token { tok: Tok::Num { integer: Some(v), .. }, .. }) if *v <= usize::MAX as u64 => {
            Ok(*v as usize)
        }
        _ => Err(cur.error_here(format!("expected an integer for `{key}`"))),
    }
}

impl ParseError {
    fn at_line_start(self, line: usize) -> Self {
        match self {
            ParseError::Syntax { msg, col, .. } => ParseError::Syntax { line, col, msg },
            other => other,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const FOLD: &str = "\
# forced fold
system fold
dim n=1 k=1
period T=2*pi
order 1: x1^2 + mu1 + sin(t)
end
";

    #[test]
    fn parses_fold_file() {
        let spec = parse_system(FOLD).unwrap();
        assert_eq!(spec.name(), "fold");
        assert_eq!((spec.dim(), spec.params(), spec.order()), (1, 1, 1));
        assert_eq!(spec.period(), 2.0 * std::f64::consts::PI);
        let f = spec.eval_term(1, &std::f64::consts::FRAC_PI_2, &[0.0], &[0.0]).unwrap();
        assert_eq!(f, vec![1.0]);
        assert!(spec.rest().is_none());
    }

    #[test]
    fn identically_zero_first_order() {
        let text = "system pitchfork\ndim n=1 k=2\nperiod T=2*pi\norder 1: 0\n\
                    order 2: x1^3 + mu1*x1 + sin(t)*x1\norder rest: mu2 + sin(2*t)\nend\n";
        let spec = parse_system(text).unwrap();
        assert_eq!(spec.order(), 2);
        assert_eq!(spec.top_order(), 3);
        assert!(spec.term_is_zero(1));
        assert!(!spec.term_is_zero(2));
        assert!(spec.term_is_zero(4));
    }

    #[test]
    fn empty_order_list_is_dimension_mismatch() {
        let text = "system empty\ndim n=1 k=0\nperiod T=1\nend\n";
        assert!(matches!(parse_system(text), Err(ParseError::DimensionMismatch { .. })));
    }

    #[test]
    fn arity_mismatch() {
        let text = "system s\ndim n=2 k=0\nperiod T=1\norder 1: x1\nend\n";
        assert!(matches!(parse_system(text), Err(ParseError::DimensionMismatch { line: 4, .. })));
    }

    #[test]
    fn gap_in_orders() {
        let text = "system s\ndim n=1 k=0\nperiod T=1\norder 2: x1\nend\n";
        assert!(matches!(parse_system(text), Err(ParseError::DimensionMismatch { .. })));
    }

    #[test]
    fn unknown_identifier_position() {
        let text = "system s\ndim n=1 k=0\nperiod T=1\norder 1: x1 + mu1\nend\n";
        match parse_system(text) {
            Err(ParseError::UnknownIdentifier { line: 4, col: 15, name }) => assert_eq!(name, "mu1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_periodic_terms_warn_but_parse() {
        let text = "system s\ndim n=1 k=0\nperiod T=1\norder 1: t*x1\nend\n";
        let (spec, warnings) = parse_system_with_warnings(text).unwrap();
        assert_eq!(spec.order(), 1);
        assert_eq!(warnings.len(), 1);
        let (_, ok) = parse_system_with_warnings(FOLD).unwrap();
        assert!(ok.is_empty());
    }

    #[test]
    fn structural_errors() {
        let cases = [
            "dim n=1 k=0\nsystem s\nperiod T=1\norder 1: x1\nend\n",
            "system s\ndim n=1 k=0\nperiod T=0\norder 1: x1\nend\n",
            "system s\ndim n=1 k=0\nperiod T=x1\norder 1: x1\nend\n",
            "system s\ndim n=1 k=0\nperiod T=1\norder 1: x1\n",
            "system s\ndim n=1 k=0\nperiod T=1\norder 1: x1\nend\norder 2: x1\n",
            "system s\ndim n=1 k=0\nperiod T=1\norder 1: x1\norder 1: x1\nend\n",
            "system s\ndim n=0 k=0\nperiod T=1\nend\n",
            "system s\nperiod T=1\norder 1: x1\nend\n",
            "system s\ndim n=1 k=0\nperiod T=1\nbogus\nend\n",
        ];
        for c in cases {
            assert!(parse_system(c).is_err(), "accepted: {c}");
        }
    }

    #[test]
    fn rhs_sums_orders_with_remainder() {
        let text = "system s\ndim n=1 k=0\nperiod T=1\norder 1: x1\norder 2: 2\norder rest: 3\nend\n";
        let spec = parse_system(text).unwrap();
        let v = spec.rhs(&0.0, &[5.0], &[], &0.1).unwrap();
        assert!((v[0] - (0.1 * 5.0 + 0.01 * 2.0 + 0.001 * 3.0)).abs() < 1e-15);
        assert_eq!(spec.rhs(&0.0, &[5.0], &[], &0.0).unwrap(), vec![0.0]);
    }

    #[test]
    fn text_round_trip() {
        let spec = parse_system(FOLD).unwrap();
        assert_eq!(parse_system(&spec.to_text()).unwrap(), spec);
    }
}
