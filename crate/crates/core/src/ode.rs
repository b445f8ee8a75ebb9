//! Time integration over any [`Scalar`] ring.
//!
//! Float runs default to an embedded Dormand–Prince 5(4) pair with step
//! control on the real parts. Jet runs use fixed-step classical RK4 so the
//! propagated ε-expansion is a deterministic function of the inputs.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{EvalError, SystemSpec};
use crate::scalar::{EpsJet, Jet, Scalar};

/// States whose max-norm exceeds this are reported as divergent.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Embedded Dormand–Prince 5(4) with FSAL.
    Adaptive,
    /// Classical fourth-order Runge–Kutta with `step_count` equal steps.
    FixedRk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Number of equal steps over the whole span (fixed-step runs).
    pub step_count: usize,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self::adaptive(1e-10)
    }
}

impl IntegratorConfig {
    pub fn adaptive(tol: f64) -> Self {
        IntegratorConfig { method: Method::Adaptive, abs_tol: tol, rel_tol: tol, step_count: 512, max_steps: 200_000 }
    }

    pub fn rk4(step_count: usize) -> Self {
        IntegratorConfig { method: Method::FixedRk4, step_count, ..Self::adaptive(1e-10) }
    }

    pub fn validate(&self) -> Result<(), IntegrateError> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(IntegrateError::Config("tolerances must be positive".into()));
        }
        if self.step_count < 16 {
            return Err(IntegrateError::Config("step_count must be at least 16".into()));
        }
        if self.max_steps == 0 {
            return Err(IntegrateError::Config("max_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DivergenceCause {
    NormExceeded,
    NonFinite,
    StepLimit,
    StepUnderflow,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IntegrateError {
    #[error("trajectory diverged at t={t} ({cause:?})")]
    Divergence { t: f64, state: Vec<f64>, cause: DivergenceCause },
    #[error("right-hand side evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("invalid integrator configuration: {0}")]
    Config(String),
}

/// Accepted steps of one run. `states[0]` is the initial condition.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<S> {
    pub times: Vec<f64>,
    pub states: Vec<Vec<S>>,
    /// Always false: no interpolant is kept between stored steps.
    pub dense: bool,
}

impl<S> Trajectory<S> {
    pub fn last(&self) -> &[S] {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least one time")
    }
}

impl Trajectory<f64> {
    /// `t,x1,...,xn` with 17 significant digits per value.
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 1..=n {
            let _ = write!(out, ",x{i}");
        }
        out.push('\n');
        for (t, x) in self.times.iter().zip(&self.states) {
            let _ = write!(out, "{t:.16e}");
            for v in x {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

fn axpy<S: Scalar>(y: &[S], h: f64, k: &[S]) -> Vec<S> {
    y.iter().zip(k).map(|(a, b)| a.clone() + b.scale(h)).collect()
}

fn combo<S: Scalar>(y: &[S], h: f64, terms: &[(f64, &[S])]) -> Vec<S> {
    (0..y.len())
        .map(|i| {
            let mut acc: Option<S> = None;
            for (c, k) in terms {
                if *c == 0.0 {
                    continue;
                }
                let term = k[i].scale(h * c);
                acc = Some(match acc {
                    Some(a) => a + term,
                    None => term,
                });
            }
            match acc {
                Some(a) => y[i].clone() + a,
                None => y[i].clone(),
            }
        })
        .collect()
}

fn max_norm<S: Scalar>(y: &[S]) -> f64 {
    y.iter().map(|v| v.value().abs()).fold(0.0, f64::max)
}

fn values<S: Scalar>(y: &[S]) -> Vec<f64> {
    y.iter().map(Scalar::value).collect()
}

fn check_state<S: Scalar>(
    t: f64,
    y: &[S],
    diverged: &dyn Fn(&[S]) -> bool,
) -> Result<(), IntegrateError> {
    if y.iter().any(|v| !v.value().is_finite()) {
        return Err(IntegrateError::Divergence { t, state: values(y), cause: DivergenceCause::NonFinite });
    }
    if diverged(y) {
        return Err(IntegrateError::Divergence { t, state: values(y), cause: DivergenceCause::NormExceeded });
    }
    Ok(())
}

/// Default divergence guard: max-norm of the real parts above [`DIVERGENCE_NORM`].
pub fn norm_guard<S: Scalar>(y: &[S]) -> bool {
    max_norm(y) > DIVERGENCE_NORM
}

const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
// Fifth-order solution minus embedded fourth-order solution.
const DP_E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrates `y' = f(t, y)` from `t0` to `t1 >= t0`.
///
/// With `record == false` only the initial and final states are stored.
pub fn solve<S, F>(
    mut f: F,
    t0: f64,
    t1: f64,
    y0: Vec<S>,
    cfg: &IntegratorConfig,
    record: bool,
    diverged: &dyn Fn(&[S]) -> bool,
) -> Result<Trajectory<S>, IntegrateError>
where
    S: Scalar,
    F: FnMut(f64, &[S]) -> Result<Vec<S>, EvalError>,
{
    cfg.validate()?;
    if !(t1 >= t0) {
        return Err(IntegrateError::Config(format!("t_end {t1} precedes t_start {t0}")));
    }
    let mut traj = Trajectory { times: vec![t0], states: vec![y0.clone()], dense: false };
    if t1 == t0 {
        return Ok(traj);
    }
    let span = t1 - t0;
    let mut y = y0;
    let mut t = t0;
    match cfg.method {
        Method::FixedRk4 => {
            let n = cfg.step_count;
            let h = span / n as f64;
            for step in 0..n {
                let k1 = f(t, &y)?;
                let k2 = f(t + 0.5 * h, &axpy(&y, 0.5 * h, &k1))?;
                let k3 = f(t + 0.5 * h, &axpy(&y, 0.5 * h, &k2))?;
                let k4 = f(t + h, &axpy(&y, h, &k3))?;
                y = combo(&y, h, &[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)]);
                t = if step + 1 == n { t1 } else { t0 + (step + 1) as f64 * h };
                check_state(t, &y, diverged)?;
                if record {
                    traj.times.push(t);
                    traj.states.push(y.clone());
                }
            }
        }
        Method::Adaptive => {
            let mut h = span / 64.0;
            let mut k1 = f(t, &y)?;
            let mut accepted = 0usize;
            let mut attempts = 0usize;
            let mut last_rejected = false;
            while t < t1 {
                attempts += 1;
                if attempts > cfg.max_steps {
                    return Err(IntegrateError::Divergence { t, state: values(&y), cause: DivergenceCause::StepLimit });
                }
                let last = t + h >= t1;
                if last {
                    h = t1 - t;
                }
                if h <= 1e-14 * t.abs().max(span) {
                    return Err(IntegrateError::Divergence { t, state: values(&y), cause: DivergenceCause::StepUnderflow });
                }
                let mut ks: Vec<Vec<S>> = Vec::with_capacity(7);
                ks.push(k1.clone());
                for s in 1..7 {
                    let terms: Vec<(f64, &[S])> = (0..s).map(|j| (DP_A[s][j], ks[j].as_slice())).collect();
                    let ys = combo(&y, h, &terms);
                    let ts = if s == 6 || last && DP_C[s] == 1.0 { t + h } else { t + DP_C[s] * h };
                    let k = f(ts, &ys)?;
                    ks.push(k);
                }
                // Stage 7 is evaluated at the fifth-order solution (FSAL).
                let terms: Vec<(f64, &[S])> = (0..6).map(|j| (DP_A[6][j], ks[j].as_slice())).collect();
                let y_new = combo(&y, h, &terms);
                let k7 = f(t + h, &y_new)?;
                let mut err_sq = 0.0;
                for i in 0..y.len() {
                    let mut e = DP_E[6] * k7[i].value();
                    for (j, k) in ks.iter().enumerate().take(6) {
                        e += DP_E[j] * k[i].value();
                    }
                    let e = h * e;
                    let scale = cfg.abs_tol + cfg.rel_tol * y[i].value().abs().max(y_new[i].value().abs());
                    err_sq += (e / scale).powi(2);
                }
                let err = (err_sq / y.len().max(1) as f64).sqrt();
                if !err.is_finite() {
                    h *= 0.2;
                    last_rejected = true;
                    continue;
                }
                if err <= 1.0 {
                    t = if last { t1 } else { t + h };
                    y = y_new;
                    k1 = k7;
                    accepted += 1;
                    check_state(t, &y, diverged)?;
                    if record {
                        traj.times.push(t);
                        traj.states.push(y.clone());
                    }
                    let mut factor = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
                    factor = factor.clamp(0.2, 5.0);
                    if last_rejected {
                        factor = factor.min(1.0);
                    }
                    h = (h * factor).min(span);
                    last_rejected = false;
                } else {
                    h *= (0.9 * err.powf(-0.2)).max(0.2);
                    last_rejected = true;
                }
            }
            log::trace!("adaptive run: {accepted} accepted of {attempts} attempted steps");
        }
    }
    if !record {
        traj.times.push(t);
        traj.states.push(y);
    }
    Ok(traj)
}

/// Integrates the full family at fixed (μ, ε) over `t_span` in floats.
pub fn integrate(
    spec: &SystemSpec,
    x0: &[f64],
    mu: &[f64],
    eps: f64,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<Trajectory<f64>, IntegrateError> {
    check_dims(spec, x0.len(), mu.len())?;
    solve(
        |t, x| spec.rhs(&t, x, mu, &eps),
        t_span.0,
        t_span.1,
        x0.to_vec(),
        cfg,
        true,
        &norm_guard::<f64>,
    )
}

/// Jet transport: integrates with ε replaced by the jet variable so the
/// final state holds the ε-expansion of the flow up to `degree`.
///
/// Coefficient i of component j equals `y_i(t)/i!` of the flow expansion.
pub fn integrate_jet(
    spec: &SystemSpec,
    x0: &[f64],
    mu: &[f64],
    t_span: (f64, f64),
    degree: usize,
    cfg: &IntegratorConfig,
) -> Result<Trajectory<EpsJet>, IntegrateError> {
    check_dims(spec, x0.len(), mu.len())?;
    if cfg.method != Method::FixedRk4 {
        return Err(IntegrateError::Config("jet transport requires fixed-step RK4".into()));
    }
    let x: Vec<EpsJet> = x0.iter().map(|&v| Jet::constant_at(v, degree)).collect();
    let m: Vec<EpsJet> = mu.iter().map(|&v| Jet::lift(v)).collect();
    let eps = Jet::variable(0.0, degree);
    solve(
        |t, x| spec.rhs(&Jet::lift(t), x, &m, &eps),
        t_span.0,
        t_span.1,
        x,
        cfg,
        true,
        &|_| false,
    )
}

/// Final ε-jet of the flow over `[0, t_end]` with coefficients in any ring.
///
/// Used with `S = Dual` to differentiate Melnikov functions and with
/// `S = Jet` to expand them in the initial condition.
pub fn flow_jet<S: Scalar>(
    spec: &SystemSpec,
    x0: &[S],
    mu: &[S],
    t_end: f64,
    degree: usize,
    steps: usize,
) -> Result<Vec<Jet<S>>, IntegrateError> {
    check_dims(spec, x0.len(), mu.len())?;
    let x: Vec<Jet<S>> = x0.iter().map(|v| Jet::constant_at(v.clone(), degree)).collect();
    let m: Vec<Jet<S>> = mu.iter().map(|v| Jet::lift(v.clone())).collect();
    let eps = Jet::variable(S::zero(), degree);
    let cfg = IntegratorConfig::rk4(steps);
    let traj = solve(
        |t, x| spec.rhs(&Jet::lift(S::constant(t)), x, &m, &eps),
        0.0,
        t_end,
        x,
        &cfg,
        false,
        &|_| false,
    )?;
    Ok(traj.last().to_vec())
}

pub(crate) fn check_dims(spec: &SystemSpec, n: usize, k: usize) -> Result<(), IntegrateError> {
    if n != spec.dim() || k != spec.params() {
        return Err(IntegrateError::Config(format!(
            "expected x of length {} and mu of length {}, got {n} and {k}",
            spec.dim(),
            spec.params()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_system;
    use std::f64::consts::PI;

    fn linear() -> SystemSpec {
        parse_system("system linear\ndim n=1 k=0\nperiod T=1\norder 1: x1\nend\n").unwrap()
    }

    fn fold() -> SystemSpec {
        parse_system("system fold\ndim n=1 k=1\nperiod T=2*pi\norder 1: x1^2 + mu1 + sin(t)\nend\n").unwrap()
    }

    #[test]
    fn linear_growth_matches_exponential() {
        for &eps in &[0.3, -0.7, 1.0] {
            let traj = integrate(&linear(), &[1.0], &[], eps, (0.0, 1.0), &IntegratorConfig::default()).unwrap();
            assert!((traj.last()[0] - f64::exp(eps)).abs() < 1e-10, "eps={eps}");
        }
    }

    #[test]
    fn zero_eps_freezes_state() {
        let traj = integrate(&fold(), &[0.37], &[-0.2], 0.0, (0.0, 2.0 * PI), &IntegratorConfig::default()).unwrap();
        assert_eq!(traj.last(), &[0.37]);
        let traj = integrate(&fold(), &[0.37], &[-0.2], 0.0, (0.0, 2.0 * PI), &IntegratorConfig::rk4(64)).unwrap();
        assert_eq!(traj.last(), &[0.37]);
    }

    #[test]
    fn trajectory_shape() {
        let traj = integrate(&fold(), &[0.1], &[-0.5], 0.2, (0.0, 2.0 * PI), &IntegratorConfig::default()).unwrap();
        assert_eq!(traj.states[0], vec![0.1]);
        assert!(traj.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(traj.final_time(), 2.0 * PI);
        assert!(!traj.dense);
    }

    #[test]
    fn blow_up_is_a_divergence_error() {
        // x' = x^2 from x0 = 2 blows up at t = 1/2.
        let spec = parse_system("system b\ndim n=1 k=0\nperiod T=1\norder 1: x1^2\nend\n").unwrap();
        match integrate(&spec, &[2.0], &[], 1.0, (0.0, 1.0), &IntegratorConfig::default()) {
            Err(IntegrateError::Divergence { t, state, .. }) => {
                assert!(t < 0.5 + 1e-6);
                assert_eq!(state.len(), 1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn jet_coefficients_of_forced_fold() {
        let cfg = IntegratorConfig::rk4(512);
        let traj = integrate_jet(&fold(), &[0.0], &[0.0], (0.0, 2.0 * PI), 2, &cfg).unwrap();
        for (t, x) in traj.times.iter().zip(&traj.states) {
            assert_eq!(x[0].coeff(0), 0.0);
            assert!((x[0].coeff(1) - (1.0 - t.cos())).abs() < 1e-9, "t={t}");
        }
        assert!(traj.last()[0].coeff(1).abs() < 1e-12);

        let traj = integrate_jet(&fold(), &[1.0], &[0.0], (0.0, 2.0 * PI), 2, &cfg).unwrap();
        assert!((traj.last()[0].coeff(1) - 2.0 * PI).abs() < 1e-10);
        assert_eq!(traj.last()[0].coeff(0), 1.0);
    }

    #[test]
    fn jet_transport_rejects_adaptive() {
        let r = integrate_jet(&fold(), &[0.0], &[0.0], (0.0, 1.0), 2, &IntegratorConfig::default());
        assert!(matches!(r, Err(IntegrateError::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(IntegratorConfig::rk4(8).validate().is_err());
        assert!(IntegratorConfig::adaptive(0.0).validate().is_err());
        assert!(IntegratorConfig::default().validate().is_ok());
        assert!(integrate(&fold(), &[0.0, 1.0], &[0.0], 0.1, (0.0, 1.0), &IntegratorConfig::default()).is_err());
    }

    #[test]
    fn csv_export() {
        let traj = integrate(&linear(), &[1.0], &[], 0.5, (0.0, 1.0), &IntegratorConfig::rk4(16)).unwrap();
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,x1"));
        let first = lines.next().unwrap();
        assert_eq!(first, "0.0000000000000000e0,1.0000000000000000e0");
        assert_eq!(csv.lines().count(), 18);
    }
}
