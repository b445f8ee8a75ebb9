use std::fmt;

use thiserror::Error;

use crate::scalar::{Scalar, ScalarError};

/// Variable reference. Indices are zero-based; `X(0)` prints as `x1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Var {
    T,
    X(usize),
    Mu(usize),
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::T => write!(f, "t"),
            Var::X(i) => write!(f, "x{}", i + 1),
            Var::Mu(i) => write!(f, "mu{}", i + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(Var),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Neg(Box<Expr>),
    Pow(Box<Expr>, u32),
    Sin(Box<Expr>),
    Cos(Box<Expr>),
    Exp(Box<Expr>),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("unbound variable `{0}`")]
    Unbound(Var),
    #[error("division by ring zero")]
    DivisionByZero,
}

impl From<ScalarError> for EvalError {
    fn from(_: ScalarError) -> Self {
        EvalError::DivisionByZero
    }
}

/// Variable bindings for one evaluation.
#[derive(Clone, Copy, Debug)]
pub struct Env<'a, S> {
    pub t: &'a S,
    pub x: &'a [S],
    pub mu: &'a [S],
}

impl Expr {
    pub fn eval<S: Scalar>(&self, env: &Env<'_, S>) -> Result<S, EvalError> {
        Ok(match self {
            Expr::Const(c) => S::constant(*c),
            Expr::Var(v) => match *v {
                Var::T => env.t.clone(),
                Var::X(i) => env.x.get(i).cloned().ok_or(EvalError::Unbound(*v))?,
                Var::Mu(i) => env.mu.get(i).cloned().ok_or(EvalError::Unbound(*v))?,
            },
            Expr::Add(a, b) => a.eval(env)? + b.eval(env)?,
            Expr::Sub(a, b) => a.eval(env)? - b.eval(env)?,
            Expr::Mul(a, b) => mul_with_consts(a, b, env)?,
            Expr::Div(a, b) => a.eval(env)?.try_div(&b.eval(env)?)?,
            Expr::Neg(a) => -a.eval(env)?,
            Expr::Pow(a, n) => a.eval(env)?.powi(*n),
            Expr::Sin(a) => a.eval(env)?.sin(),
            Expr::Cos(a) => a.eval(env)?.cos(),
            Expr::Exp(a) => a.eval(env)?.exp(),
        })
    }

    /// True when no variable occurs in the tree.
    pub fn is_constant(&self) -> bool {
        let mut constant = true;
        self.visit_vars(&mut |_| constant = false);
        constant
    }

    pub fn visit_vars(&self, f: &mut impl FnMut(Var)) {
        match self {
            Expr::Const(_) => {}
            Expr::Var(v) => f(*v),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.visit_vars(f);
                b.visit_vars(f);
            }
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Sin(a) | Expr::Cos(a) | Expr::Exp(a) => {
                a.visit_vars(f)
            }
        }
    }

    /// Structurally zero (the literal `0`).
    pub fn is_zero_literal(&self) -> bool {
        matches!(self, Expr::Const(c) if *c == 0.0)
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Add(..) | Expr::Sub(..) => 1,
            Expr::Mul(..) | Expr::Div(..) => 2,
            Expr::Neg(..) => 3,
            Expr::Pow(..) => 4,
            Expr::Const(c) if *c < 0.0 || c.is_sign_negative() => 3,
            _ => 5,
        }
    }
}

// Constant factors use `scale`, which keeps the real part identical across
// realizations and avoids a full jet product.
fn mul_with_consts<S: Scalar>(a: &Expr, b: &Expr, env: &Env<'_, S>) -> Result<S, EvalError> {
    match (a, b) {
        (Expr::Const(c), other) => Ok(other.eval(env)?.scale(*c)),
        (other, Expr::Const(c)) => Ok(other.eval(env)?.scale(*c)),
        _ => Ok(a.eval(env)? * b.eval(env)?),
    }
}

/// Writes an operand, parenthesizing when its precedence demands it.
fn operand(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
    if e.precedence() < min_prec {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(c) => write!(f, "{c:?}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Add(a, b) => {
                operand(f, a, 1)?;
                write!(f, " + ")?;
                operand(f, b, 2)
            }
            Expr::Sub(a, b) => {
                operand(f, a, 1)?;
                write!(f, " - ")?;
                operand(f, b, 2)
            }
            Expr::Mul(a, b) => {
                operand(f, a, 2)?;
                write!(f, "*")?;
                operand(f, b, 3)
            }
            Expr::Div(a, b) => {
                operand(f, a, 2)?;
                write!(f, "/")?;
                operand(f, b, 3)
            }
            Expr::Neg(a) => {
                write!(f, "-")?;
                operand(f, a, 3)
            }
            Expr::Pow(a, n) => {
                operand(f, a, 5)?;
                write!(f, "^{n}")
            }
            Expr::Sin(a) => write!(f, "sin({a})"),
            Expr::Cos(a) => write!(f, "cos({a})"),
            Expr::Exp(a) => write!(f, "exp({a})"),
        }
    }
}
