//! Stroboscopic map `Π(x₀,μ,ε) = X(T; x₀)` and the order-ℓ displacement
//! `Δ_ℓ = (Π − x₀)/ε^ℓ` with derivatives.
//!
//! Both run a fixed-step scheme by default so that they are smooth functions
//! of `(x₀, μ, ε)`; Newton iterations then see no step-selection noise.

use nalgebra::DMatrix;

use crate::expr::{EvalError, SystemSpec};
use crate::melnikov::AveragingResult;
use crate::ode::{check_dims, flow_jet, solve, IntegrateError, IntegratorConfig, DIVERGENCE_NORM};
use crate::scalar::{Dual, Scalar};

/// Default RK4 steps per period for Π and Δ_ℓ.
pub const MAP_STEPS: usize = 1024;

/// Below this |ε| (and at ε = 0) Δ_ℓ is taken from the ε-jet of the flow.
pub const JET_SWITCH: f64 = 1e-14;

/// Central-difference step for third x-derivatives.
const THIRD_DERIVATIVE_STEP: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct PoincareEval {
    pub value: Vec<f64>,
    pub jac_x: DMatrix<f64>,
    pub jac_mu: DMatrix<f64>,
    /// `value − x₀`.
    pub residual: Vec<f64>,
}

/// Stroboscopic map with x- and μ-Jacobians from dual-seeded integration.
pub fn poincare(spec: &SystemSpec, x0: &[f64], mu: &[f64], eps: f64) -> Result<PoincareEval, IntegrateError> {
    poincare_with(spec, x0, mu, eps, &IntegratorConfig::rk4(MAP_STEPS))
}

pub fn poincare_with(
    spec: &SystemSpec,
    x0: &[f64],
    mu: &[f64],
    eps: f64,
    cfg: &IntegratorConfig,
) -> Result<PoincareEval, IntegrateError> {
    check_dims(spec, x0.len(), mu.len())?;
    let (n, k) = (x0.len(), mu.len());
    let d = n + k;
    let xs: Vec<Dual<f64>> = x0.iter().enumerate().map(|(j, &v)| Dual::variable(v, j, d)).collect();
    let ms: Vec<Dual<f64>> = mu.iter().enumerate().map(|(j, &v)| Dual::variable(v, n + j, d)).collect();
    let e = Dual::lift(eps);
    // Deviation u = X − x₀ keeps the small displacement at full precision.
    let guard = |u: &[Dual<f64>]| u.iter().zip(x0).any(|(ui, xi)| (ui.value() + xi).abs() > DIVERGENCE_NORM);
    let traj = solve(
        |t, u: &[Dual<f64>]| {
            let x: Vec<Dual<f64>> = xs.iter().zip(u).map(|(a, b)| a.clone() + b.clone()).collect();
            spec.rhs(&Dual::lift(t), &x, &ms, &e)
        },
        0.0,
        spec.period(),
        vec![Dual::lift(0.0); n],
        cfg,
        false,
        &guard,
    )?;
    let u = traj.last();
    let value: Vec<f64> = x0.iter().zip(u).map(|(x, ui)| x + ui.primal()).collect();
    let residual = value.iter().zip(x0).map(|(v, x)| v - x).collect();
    let jac_x = DMatrix::from_fn(n, n, |i, j| u[i].derivative(j) + if i == j { 1.0 } else { 0.0 });
    let jac_mu = DMatrix::from_fn(n, k, |i, j| u[i].derivative(n + j));
    Ok(PoincareEval { value, jac_x, jac_mu, residual })
}

/// How many derivatives [`Displacement::eval`] computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum DerivLevel {
    Value,
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementEval {
    pub delta: Vec<f64>,
    /// `∂Δ/∂x` (zero-sized below [`DerivLevel::First`]).
    pub jac_x: DMatrix<f64>,
    pub jac_mu: DMatrix<f64>,
    pub d_eps: Vec<f64>,
    /// `hess_x[i][(a, b)] = ∂²Δᵢ/∂x_a∂x_b` (empty below [`DerivLevel::Second`]).
    pub hess_x: Vec<DMatrix<f64>>,
    /// True when the removable singularity at ε = 0 was taken via jets.
    pub via_jet: bool,
}

/// Evaluator of `Δ_ℓ` for one system and order.
#[derive(Clone, Debug)]
pub struct Displacement<'a> {
    spec: &'a SystemSpec,
    ell: usize,
    cfg: IntegratorConfig,
}

impl<'a> Displacement<'a> {
    pub fn new(spec: &'a SystemSpec, avg: &AveragingResult) -> Self {
        Self::with_ell(spec, avg.ell)
    }

    pub fn with_ell(spec: &'a SystemSpec, ell: usize) -> Self {
        assert!(ell >= 1, "contract violation: ℓ must be positive");
        Displacement { spec, ell, cfg: IntegratorConfig::rk4(MAP_STEPS) }
    }

    pub fn with_config(mut self, cfg: IntegratorConfig) -> Self {
        self.cfg = cfg;
        self
    }

    pub fn spec(&self) -> &'a SystemSpec {
        self.spec
    }

    pub fn ell(&self) -> usize {
        self.ell
    }

    pub fn period(&self) -> f64 {
        self.spec.period()
    }

    /// `Δ_ℓ` over any scalar ring; derivatives follow from the seeding.
    pub fn generic<S: Scalar>(&self, x: &[S], mu: &[S], eps: &S) -> Result<Vec<S>, IntegrateError> {
        self.generic_inner(x, mu, eps, true)
    }

    /// `eps_sensitive = false` promises that `eps` carries no derivative
    /// directions, so at ε = 0 the jet can stop at degree ℓ.
    fn generic_inner<S: Scalar>(&self, x: &[S], mu: &[S], eps: &S, eps_sensitive: bool) -> Result<Vec<S>, IntegrateError> {
        check_dims(self.spec, x.len(), mu.len())?;
        let e = eps.value();
        let ell = self.ell;
        let top = self.spec.top_order();
        if e == 0.0 || e.abs() < JET_SWITCH {
            let deg = if e == 0.0 && !eps_sensitive { ell } else { ell + 1 };
            let flow = flow_jet(self.spec, x, mu, self.period(), deg, self.cfg.step_count)?;
            return Ok(flow
                .iter()
                .map(|c| {
                    let mut acc = c.coeff(deg);
                    for i in (ell..deg).rev() {
                        acc = acc * eps.clone() + c.coeff(i);
                    }
                    acc
                })
                .collect());
        }
        let n = x.len();
        let eps_ell = eps.powi(ell as u32);
        let reach = e.abs().powi(ell as i32);
        let x0: Vec<f64> = x.iter().map(Scalar::value).collect();
        let guard = |w: &[S]| w.iter().zip(&x0).any(|(wi, xi)| (xi + reach * wi.value()).abs() > DIVERGENCE_NORM);
        // w' = Σᵢ ε^(i−ℓ) Fᵢ(t, x + ε^ℓ w), w(0) = 0, Δ_ℓ = w(T).
        let rhs = |t: f64, w: &[S]| -> Result<Vec<S>, EvalError> {
            let xs: Vec<S> = x.iter().zip(w).map(|(a, b)| a.clone() + b.clone() * eps_ell.clone()).collect();
            let ts = S::constant(t);
            let mut acc = vec![S::zero(); n];
            for i in (ell..=top).rev() {
                if i < top {
                    acc = acc.into_iter().map(|a| a * eps.clone()).collect();
                }
                if !self.spec.term_is_zero(i) {
                    let f = self.spec.eval_term(i, &ts, &xs, mu)?;
                    acc = acc.into_iter().zip(f).map(|(a, b)| a + b).collect();
                }
            }
            for i in 1..ell.min(top + 1) {
                if !self.spec.term_is_zero(i) {
                    let inv = eps.powi((ell - i) as u32);
                    let f = self.spec.eval_term(i, &ts, &xs, mu)?;
                    for (a, b) in acc.iter_mut().zip(f) {
                        *a = a.clone() + b.try_div(&inv)?;
                    }
                }
            }
            Ok(acc)
        };
        let traj = solve(rhs, 0.0, self.period(), vec![S::zero(); n], &self.cfg, false, &guard)?;
        Ok(traj.last().to_vec())
    }

    pub fn value(&self, x: &[f64], mu: &[f64], eps: f64) -> Result<Vec<f64>, IntegrateError> {
        self.generic_inner(x, mu, &eps, false)
    }

    /// Δ_ℓ with derivatives up to `level`: first derivatives in x, μ and ε;
    /// second derivatives in x.
    pub fn eval(&self, x: &[f64], mu: &[f64], eps: f64, level: DerivLevel) -> Result<DisplacementEval, IntegrateError> {
        let all: Vec<usize> = (0..mu.len()).collect();
        self.eval_with(x, mu, eps, level, &all, true)
    }

    /// Like [`Displacement::eval`] but seeds only the μ components listed in
    /// `mu_cols` (the columns of `jac_mu`, in that order) and the ε direction
    /// only when `with_eps` holds.
    pub fn eval_with(
        &self,
        x: &[f64],
        mu: &[f64],
        eps: f64,
        level: DerivLevel,
        mu_cols: &[usize],
        with_eps: bool,
    ) -> Result<DisplacementEval, IntegrateError> {
        let n = x.len();
        let c = mu_cols.len();
        let via_jet = eps == 0.0 || eps.abs() < JET_SWITCH;
        let mut out = DisplacementEval {
            delta: Vec::new(),
            jac_x: DMatrix::zeros(0, 0),
            jac_mu: DMatrix::zeros(0, 0),
            d_eps: Vec::new(),
            hess_x: Vec::new(),
            via_jet,
        };
        if level == DerivLevel::Value {
            out.delta = self.value(x, mu, eps)?;
            return Ok(out);
        }
        let d = n + c + usize::from(with_eps);
        let xs: Vec<Dual<f64>> = x.iter().enumerate().map(|(j, &v)| Dual::variable(v, j, d)).collect();
        let mut ms: Vec<Dual<f64>> = mu.iter().map(|&v| Dual::lift(v)).collect();
        for (col, &j) in mu_cols.iter().enumerate() {
            ms[j] = Dual::variable(mu[j], n + col, d);
        }
        let es = if with_eps { Dual::variable(eps, d - 1, d) } else { Dual::lift(eps) };
        let first = |r: &[Dual<f64>], out: &mut DisplacementEval| {
            out.delta = r.iter().map(|v| *v.primal()).collect();
            out.jac_x = DMatrix::from_fn(n, n, |i, j| r[i].derivative(j));
            out.jac_mu = DMatrix::from_fn(n, c, |i, j| r[i].derivative(n + j));
            if with_eps {
                out.d_eps = r.iter().map(|v| v.derivative(d - 1)).collect();
            }
        };
        if level == DerivLevel::First {
            let r = self.generic_inner(&xs, &ms, &es, with_eps)?;
            first(&r, &mut out);
            return Ok(out);
        }
        // Outer directions differentiate once more along x only.
        let xs: Vec<Dual<Dual<f64>>> = xs
            .into_iter()
            .enumerate()
            .map(|(a, inner)| {
                let dirs = (0..n).map(|b| Dual::lift(if a == b { 1.0 } else { 0.0 })).collect();
                Dual::new(inner, dirs)
            })
            .collect();
        let ms: Vec<Dual<Dual<f64>>> = ms.into_iter().map(Dual::lift).collect();
        let r = self.generic_inner(&xs, &ms, &Dual::lift(es), with_eps)?;
        let inner: Vec<Dual<f64>> = r.iter().map(|v| v.primal().clone()).collect();
        first(&inner, &mut out);
        out.hess_x = r
            .iter()
            .map(|v| DMatrix::from_fn(n, n, |a, b| v.derivative(a).derivative(b)))
            .collect();
        Ok(out)
    }

    /// `∂³Δ/∂x³` for scalar systems: central difference of second derivatives.
    pub fn third_x_derivative(&self, x: f64, mu: &[f64], eps: f64) -> Result<f64, IntegrateError> {
        assert_eq!(self.spec.dim(), 1, "contract violation: third derivative needs n = 1");
        let h = THIRD_DERIVATIVE_STEP;
        let up = self.eval(&[x + h], mu, eps, DerivLevel::Second)?.hess_x[0][(0, 0)];
        let down = self.eval(&[x - h], mu, eps, DerivLevel::Second)?.hess_x[0][(0, 0)];
        Ok((up - down) / (2.0 * h))
    }
}

/// `Δ_ℓ` at `(x₀, μ, ε)` with all derivatives, ℓ taken from `avg`.
pub fn displacement_ell(
    spec: &SystemSpec,
    avg: &AveragingResult,
    x0: &[f64],
    mu: &[f64],
    eps: f64,
) -> Result<DisplacementEval, IntegrateError> {
    Displacement::new(spec, avg).eval(x0, mu, eps, DerivLevel::Second)
}
