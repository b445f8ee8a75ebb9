//! Melnikov functions `fᵢ`, averaged functions `gᵢ` and the order `ℓ` of the
//! guiding system.
//!
//! Two routes compute `fᵢ` and must agree: jet transport of the whole flow,
//! and (for scalar systems) direct quadrature of the Bell-polynomial
//! recursion for the expansion coefficients `yᵢ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{EvalError, SystemSpec};
use crate::ode::{check_dims, flow_jet, solve, IntegrateError, IntegratorConfig};
use crate::scalar::{Dual, Jet, Scalar};

/// Fixed RK4 steps per period for every jet-transport run in this module.
pub const JET_STEPS: usize = 512;

/// Largest order accepted anywhere in this module.
pub const MAX_ORDER: usize = 8;

/// Largest order of the Bell route (third x-derivatives at most).
pub const BELL_MAX_ORDER: usize = 4;

/// Relative factor of the "vanishes identically" test.
pub const ZERO_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MelnikovError {
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
    #[error("order {order} outside 1..={max}")]
    OrderOutOfRange { order: usize, max: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error("no guiding system up to order {0}: every averaged function vanishes on the grid")]
    NoGuidingSystem(usize),
    #[error("shortcut precondition violated: {0}")]
    ShortcutPrecondition(String),
    #[error("sample grid has {0} points, at least 25 are required")]
    GridTooSmall(usize),
}

impl From<EvalError> for MelnikovError {
    fn from(e: EvalError) -> Self {
        MelnikovError::Integrate(IntegrateError::Eval(e))
    }
}

fn check_order(i: usize, max: usize) -> Result<(), MelnikovError> {
    if i == 0 || i > max {
        return Err(MelnikovError::OrderOutOfRange { order: i, max });
    }
    Ok(())
}

fn binomial(n: usize, k: usize) -> f64 {
    let mut acc = 1u64;
    for i in 0..k as u64 {
        acc = acc * (n as u64 - i) / (i + 1);
    }
    acc as f64
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|i| i as f64).product()
}

/// All partial Bell polynomials `B_{j,m}(y₁,…)` for `0 ≤ m ≤ j ≤ jmax`.
///
/// Invariants: `B_{j,1} = y_j`, `B_{j,j} = y₁^j`, `B_{0,0} = 1`.
#[derive(Clone, Debug)]
pub struct BellTable<S> {
    rows: Vec<Vec<S>>,
}

impl<S: Scalar> BellTable<S> {
    /// `y[p]` holds `y_{p+1}`; entries beyond `jmax` are ignored.
    pub fn new(y: &[S], jmax: usize) -> Self {
        assert!(y.len() >= jmax, "contract violation: bell table needs {jmax} arguments, got {}", y.len());
        let mut rows: Vec<Vec<S>> = Vec::with_capacity(jmax + 1);
        rows.push(vec![S::one()]);
        for j in 1..=jmax {
            let mut row = vec![S::zero(); j + 1];
            for m in 1..=j {
                let mut acc: Option<S> = None;
                for i in 1..=(j - m + 1) {
                    if m - 1 > j - i {
                        continue;
                    }
                    let term = (y[i - 1].clone() * rows[j - i][m - 1].clone()).scale(binomial(j - 1, i - 1));
                    acc = Some(match acc {
                        Some(a) => a + term,
                        None => term,
                    });
                }
                row[m] = acc.unwrap_or_else(S::zero);
            }
            rows.push(row);
        }
        BellTable { rows }
    }

    pub fn get(&self, j: usize, m: usize) -> &S {
        assert!(m <= j && j < self.rows.len(), "contract violation: B_{{{j},{m}}} not in table");
        &self.rows[j][m]
    }
}

/// `B_{j,m}(y₁,…,y_{j−m+1})`; `y` must have exactly `j−m+1` entries.
pub fn bell(j: usize, m: usize, y: &[f64]) -> f64 {
    assert!(j >= 1 && (1..=j).contains(&m), "contract violation: malformed bell index ({j},{m})");
    assert_eq!(y.len(), j - m + 1, "contract violation: bell argument list length");
    let mut padded = y.to_vec();
    padded.resize(j, 0.0);
    *BellTable::new(&padded, j).get(j, m)
}

/// Points `(z, μ)` at which functions are sampled.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleGrid {
    pub points: Vec<(Vec<f64>, Vec<f64>)>,
}

impl SampleGrid {
    /// Tensor grid with `per_axis` points on every axis of the box `[lo, hi]`
    /// in the concatenated coordinates `(z, μ)`.
    pub fn rectangular(lo: &[f64], hi: &[f64], n: usize, per_axis: usize) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(per_axis >= 2 && n <= lo.len());
        let dims = lo.len();
        let total = per_axis.pow(dims as u32);
        let points = (0..total)
            .map(|mut idx| {
                let mut p = vec![0.0; dims];
                for (a, slot) in p.iter_mut().enumerate() {
                    let r = idx % per_axis;
                    idx /= per_axis;
                    *slot = lo[a] + (hi[a] - lo[a]) * r as f64 / (per_axis - 1) as f64;
                }
                let mu = p.split_off(n);
                (p, mu)
            })
            .collect();
        SampleGrid { points }
    }

    /// `count` seeded uniform samples of the box `[lo, hi]`.
    pub fn random(lo: &[f64], hi: &[f64], n: usize, count: usize, seed: u64) -> Self {
        assert_eq!(lo.len(), hi.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..count)
            .map(|_| {
                let mut p: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| rng.gen_range(*a..=*b)).collect();
                let mu = p.split_off(n);
                (p, mu)
            })
            .collect();
        SampleGrid { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Outcome of the search for the first non-vanishing averaged function.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AveragingResult {
    pub ell: usize,
    pub period: f64,
    /// Highest order sampled.
    pub max_order: usize,
    /// `sup_f[i-1]` is the grid sup-norm of `fᵢ`, for i up to `max_order`.
    pub sup_f: Vec<f64>,
    /// `sup_g[i-1]` is the grid sup-norm of `gᵢ`, for i up to `ell`.
    pub sup_g: Vec<f64>,
    pub threshold: f64,
    /// Per grid point: `f[i-1]` and `g[i-1]` as n-vectors.
    pub samples: Vec<AveragingSample>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AveragingSample {
    pub z: Vec<f64>,
    pub mu: Vec<f64>,
    pub f: Vec<Vec<f64>>,
    pub g: Vec<Vec<f64>>,
}

/// Melnikov function of order `i`: coefficient `i` of the ε-jet of the flow
/// at the period.
pub fn melnikov_f(spec: &SystemSpec, i: usize, z: &[f64], mu: &[f64]) -> Result<Vec<f64>, MelnikovError> {
    check_order(i, MAX_ORDER)?;
    Ok(melnikov_all(spec, i, z, mu)?.swap_remove(i - 1))
}

/// `f₁,…,f_imax` from a single jet-transport run.
pub fn melnikov_all(spec: &SystemSpec, imax: usize, z: &[f64], mu: &[f64]) -> Result<Vec<Vec<f64>>, MelnikovError> {
    check_order(imax, MAX_ORDER)?;
    let flow = flow_jet(spec, z, mu, spec.period(), imax, JET_STEPS)?;
    Ok((1..=imax).map(|i| flow.iter().map(|c| c.coeff(i)).collect()).collect())
}

/// Melnikov functions together with their x-Jacobians (`(fᵢ, dfᵢ)` pairs).
pub fn melnikov_with_jacobian(
    spec: &SystemSpec,
    imax: usize,
    z: &[f64],
    mu: &[f64],
) -> Result<Vec<(Vec<f64>, Vec<Vec<f64>>)>, MelnikovError> {
    check_order(imax, MAX_ORDER)?;
    check_dims(spec, z.len(), mu.len())?;
    let n = z.len();
    let x: Vec<Dual<f64>> = z.iter().enumerate().map(|(j, &v)| Dual::variable(v, j, n)).collect();
    let m: Vec<Dual<f64>> = mu.iter().map(|&v| Dual::lift(v)).collect();
    let flow = flow_jet(spec, &x, &m, spec.period(), imax, JET_STEPS)?;
    Ok((1..=imax)
        .map(|i| {
            let comps: Vec<Dual<f64>> = flow.iter().map(|c| c.coeff(i)).collect();
            let value = comps.iter().map(|d| *d.primal()).collect();
            let jac = comps.iter().map(|d| (0..n).map(|j| d.derivative(j)).collect()).collect();
            (value, jac)
        })
        .collect())
}

/// `∂ₓᵐ F_q(t, z, μ)` for m = 0..=3 (scalar systems).
///
/// Orders up to two come from nested duals; the third is a central
/// difference of nested-dual second derivatives.
fn term_derivatives(
    spec: &SystemSpec,
    q: usize,
    t: f64,
    z: f64,
    mu: &[f64],
    mmax: usize,
) -> Result<[f64; 4], EvalError> {
    let second = |x: f64| -> Result<(f64, f64, f64), EvalError> {
        let xd = [Dual::new(Dual::variable(x, 0, 1), vec![Dual::lift(1.0)])];
        let td = Dual::lift(Dual::lift(t));
        let md: Vec<Dual<Dual<f64>>> = mu.iter().map(|&v| Dual::lift(Dual::lift(v))).collect();
        let out = spec.eval_term(q, &td, &xd, &md)?.swap_remove(0);
        Ok((*out.primal().primal(), out.primal().derivative(0), out.derivative(0).derivative(0)))
    };
    let (v, d1, d2) = second(z)?;
    let mut d3 = 0.0;
    if mmax >= 3 {
        let h = 1e-3;
        let (_, _, up) = second(z + h)?;
        let (_, _, down) = second(z - h)?;
        d3 = (up - down) / (2.0 * h);
    }
    Ok([v, d1, d2, d3])
}

/// Melnikov function of order `i` for a scalar system through the Bell
/// recursion `ẏᵢ = i!Fᵢ + Kᵢ`, integrated jointly for all lower orders.
pub fn melnikov_f_bell(spec: &SystemSpec, i: usize, z: f64, mu: &[f64]) -> Result<f64, MelnikovError> {
    if spec.dim() != 1 {
        return Err(MelnikovError::Unsupported("the Bell route is restricted to n = 1".into()));
    }
    check_order(i, BELL_MAX_ORDER)?;
    check_dims(spec, 1, mu.len())?;
    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>, EvalError> {
        // ders[q][m] = ∂ₓᵐ F_q(t, z); order q is needed up to m = i - q.
        let mut ders = vec![[0.0; 4]; i + 1];
        for (q, slot) in ders.iter_mut().enumerate().skip(1) {
            if !spec.term_is_zero(q) {
                *slot = term_derivatives(spec, q, t, z, mu, i - q)?;
            }
        }
        let table = BellTable::new(y, i.saturating_sub(1));
        let mut out = Vec::with_capacity(i);
        for p in 1..=i {
            let mut v = factorial(p) * ders[p][0];
            for j in 1..p {
                for m in 1..=j {
                    v += factorial(p) / factorial(j) * ders[p - j][m] * table.get(j, m);
                }
            }
            out.push(v);
        }
        Ok(out)
    };
    let cfg = IntegratorConfig::rk4(JET_STEPS);
    let traj = solve(rhs, 0.0, spec.period(), vec![0.0; i], &cfg, false, &|_| false)?;
    Ok(traj.last()[i - 1] / factorial(i))
}

// Polynomials in t whose coefficients are jets in the x-offset δ.
type TimePoly = Jet<Jet<f64>>;

fn antiderivative(p: &TimePoly, degree: usize) -> TimePoly {
    let mut coeffs = vec![Jet::lift(0.0)];
    for (k, c) in p.coeffs().iter().enumerate().take(degree) {
        coeffs.push(c.scale(1.0 / (k + 1) as f64));
    }
    Jet::new(coeffs).with_degree(degree)
}

fn nth_derivative(g: &Jet<f64>, m: usize) -> Jet<f64> {
    (0..m).fold(g.clone(), |acc, _| acc.derivative())
}

/// `g₁,…,g_imax` of a scalar system as jets in the offset δ of `z + δ`.
///
/// Each recursion step differentiates lower orders, so coefficient `r` of
/// `gᵢ` is exact for `r ≤ imax − i`.
pub fn averaged_jets_1d(spec: &SystemSpec, imax: usize, z: f64, mu: &[f64]) -> Result<Vec<Jet<f64>>, MelnikovError> {
    Ok(averaged_and_melnikov_1d(spec, imax, z, mu)?.1)
}

fn averaged_and_melnikov_1d(
    spec: &SystemSpec,
    imax: usize,
    z: f64,
    mu: &[f64],
) -> Result<(Vec<Jet<f64>>, Vec<Jet<f64>>), MelnikovError> {
    check_order(imax, MAX_ORDER)?;
    check_dims(spec, 1, mu.len())?;
    let d = imax - 1;
    let x = [Jet::variable(z, d)];
    let m: Vec<Jet<f64>> = mu.iter().map(|&v| Jet::lift(v)).collect();
    let period = spec.period();
    let flow = flow_jet(spec, &x, &m, period, imax, JET_STEPS)?;
    let f: Vec<Jet<f64>> = (1..=imax).map(|i| flow[0].coeff(i).with_degree(d)).collect();
    let t = TimePoly::variable(Jet::lift(0.0), imax);
    let mut g: Vec<Jet<f64>> = vec![f[0].scale(1.0 / period)];
    let mut ytilde: Vec<TimePoly> = vec![t.clone() * Jet::lift(g[0].clone())];
    for i in 2..=imax {
        let table = BellTable::new(&ytilde, i - 1);
        let mut theta = TimePoly::constant_at(Jet::lift(0.0), imax);
        for j in 1..i {
            let integral = (1..=j).map(|mm| antiderivative(table.get(j, mm), imax)).collect::<Vec<_>>();
            for (mm, int) in (1..=j).zip(integral) {
                let dg = nth_derivative(&g[i - j - 1], mm).scale(factorial(i) / factorial(j));
                theta = theta + int * Jet::lift(dg);
            }
        }
        let theta_at_period = theta.eval_at(&Jet::lift(period));
        let gi = (f[i - 1].clone() - theta_at_period.scale(1.0 / factorial(i))).scale(1.0 / period);
        ytilde.push(t.clone() * Jet::lift(gi.scale(factorial(i))) + theta);
        g.push(gi);
    }
    Ok((f, g))
}

/// Averaged function of order `i` at `(z, μ)`.
///
/// Scalar systems use the full recursion. For `n ≥ 2` only `i ≤ 2` is
/// defined, where every derivative enters linearly.
pub fn averaged_g(spec: &SystemSpec, i: usize, z: &[f64], mu: &[f64]) -> Result<Vec<f64>, MelnikovError> {
    check_order(i, MAX_ORDER)?;
    check_dims(spec, z.len(), mu.len())?;
    if spec.dim() == 1 {
        return Ok(vec![averaged_jets_1d(spec, i, z[0], mu)?[i - 1].coeff(0)]);
    }
    let period = spec.period();
    match i {
        1 => Ok(melnikov_f(spec, 1, z, mu)?.iter().map(|v| v / period).collect()),
        2 => {
            let fs = melnikov_with_jacobian(spec, 2, z, mu)?;
            let (f1, df1) = &fs[0];
            let (f2, _) = &fs[1];
            Ok(contract_half(f2, df1, f1).into_iter().map(|v| v / period).collect())
        }
        _ => Err(MelnikovError::Unsupported(format!(
            "averaged function of order {i} for n = {} needs a multilinear contraction convention",
            spec.dim()
        ))),
    }
}

/// `a − ½·J·b`.
fn contract_half(a: &[f64], jac: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(jac)
        .map(|(ai, row)| ai - 0.5 * row.iter().zip(b).map(|(r, bj)| r * bj).sum::<f64>())
        .collect()
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

/// Averaged functions from Melnikov functions when `f₁ = … = f_{ℓ−1} = 0`:
/// `gᵢ = fᵢ/T` for `i < 2ℓ` and `g_{2ℓ} = (f_{2ℓ} − ½ df_ℓ·f_ℓ)/T`.
///
/// Refuses when the vanishing of the lower orders fails at `(z, μ)` or
/// `i > 2ℓ`; the caller then falls back on [`averaged_g`].
pub fn averaged_g_shortcut(
    spec: &SystemSpec,
    ell: usize,
    i: usize,
    z: &[f64],
    mu: &[f64],
) -> Result<Vec<f64>, MelnikovError> {
    check_order(ell, MAX_ORDER)?;
    check_order(i, MAX_ORDER)?;
    if i > 2 * ell {
        return Err(MelnikovError::ShortcutPrecondition(format!("order {i} exceeds 2ℓ = {}", 2 * ell)));
    }
    let top = i.max(ell);
    let fs = melnikov_with_jacobian(spec, top, z, mu)?;
    let scale = 1.0 + fs.iter().map(|(f, _)| sup(f)).fold(0.0, f64::max);
    for (q, (f, _)) in fs.iter().enumerate().take(ell - 1) {
        if sup(f) >= ZERO_THRESHOLD * scale {
            return Err(MelnikovError::ShortcutPrecondition(format!("f{} does not vanish", q + 1)));
        }
    }
    let period = spec.period();
    let (fi, _) = &fs[i - 1];
    let out = if i == 2 * ell {
        let (fl, dfl) = &fs[ell - 1];
        contract_half(fi, dfl, fl)
    } else {
        fi.clone()
    };
    Ok(out.into_iter().map(|v| v / period).collect())
}

/// First order whose averaged function does not vanish on `grid`.
///
/// Orders up to one past the highest ε power of the right-hand side are
/// sampled. For `n ≥ 2` the vanishing of `f₁…f_{i−1}` forces `gᵢ = fᵢ/T`, so
/// the Melnikov functions decide alone.
pub fn detect_ell(spec: &SystemSpec, grid: &SampleGrid) -> Result<AveragingResult, MelnikovError> {
    if grid.len() < 25 {
        return Err(MelnikovError::GridTooSmall(grid.len()));
    }
    let max_order = (spec.top_order() + 1).min(MAX_ORDER);
    let period = spec.period();
    let mut samples = Vec::with_capacity(grid.len());
    for (z, mu) in &grid.points {
        check_dims(spec, z.len(), mu.len())?;
        let (f, g) = if spec.dim() == 1 {
            let (f, g) = averaged_and_melnikov_1d(spec, max_order, z[0], mu)?;
            let first = |v: Vec<Jet<f64>>| v.iter().map(|j| vec![j.coeff(0)]).collect();
            (first(f), first(g))
        } else {
            let f = melnikov_all(spec, max_order, z, mu)?;
            let g = f.iter().map(|fi| fi.iter().map(|v| v / period).collect()).collect();
            (f, g)
        };
        samples.push(AveragingSample { z: z.clone(), mu: mu.clone(), f, g });
    }
    let sup_order = |pick: &dyn Fn(&AveragingSample) -> &Vec<Vec<f64>>, i: usize| {
        samples.iter().map(|s| sup(&pick(s)[i - 1])).fold(0.0, f64::max)
    };
    let sup_f: Vec<f64> = (1..=max_order).map(|i| sup_order(&|s| &s.f, i)).collect();
    let threshold = ZERO_THRESHOLD * (1.0 + sup_f.iter().cloned().fold(0.0, f64::max));
    let mut sup_g = Vec::new();
    for i in 1..=max_order {
        let s = sup_order(&|s| &s.g, i);
        sup_g.push(s);
        if s >= threshold {
            for sample in &mut samples {
                sample.f.truncate(max_order);
                sample.g.truncate(i);
            }
            return Ok(AveragingResult { ell: i, period, max_order, sup_f, sup_g, threshold, samples });
        }
    }
    Err(MelnikovError::NoGuidingSystem(max_order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_system;
    use std::f64::consts::PI;

    const FOLD: &str = "system fold\ndim n=1 k=1\nperiod T=2*pi\norder 1: x1^2 + mu1 + sin(t)\nend\n";
    const TRANSCRITICAL: &str = "system transcritical\ndim n=1 k=2\nperiod T=2*pi\n\
        order 1: x1^2 + mu1*x1 + sin(t)*x1\norder rest: mu2 + sin(2*t)\nend\n";
    const PITCHFORK: &str = "system pitchfork\ndim n=1 k=2\nperiod T=2*pi\norder 1: 0\n\
        order 2: x1^3 + mu1*x1 + sin(t)*x1\norder rest: mu2 + sin(2*t)\nend\n";

    /// Sum over set partitions of {1..j} into m blocks of Π y_{|block|}.
    fn bell_by_partitions(j: usize, m: usize, y: &[f64]) -> f64 {
        fn rec(pos: usize, j: usize, labels: &mut Vec<usize>, blocks: usize, m: usize, y: &[f64], acc: &mut f64) {
            if pos == j {
                if blocks == m {
                    let mut sizes = vec![0usize; m];
                    for &l in labels.iter() {
                        sizes[l] += 1;
                    }
                    *acc += sizes.iter().map(|&s| y[s - 1]).product::<f64>();
                }
                return;
            }
            for l in 0..=blocks.min(m - 1) {
                labels.push(l);
                rec(pos + 1, j, labels, blocks.max(l + 1), m, y, acc);
                labels.pop();
            }
        }
        let mut acc = 0.0;
        rec(0, j, &mut Vec::new(), 0, m, y, &mut acc);
        acc
    }

    #[test]
    fn bell_spot_values() {
        assert_eq!(bell(1, 1, &[7.0]), 7.0);
        assert_eq!(bell(3, 2, &[2.0, 5.0]), 30.0);
        assert_eq!(bell(4, 2, &[1.0, 1.0, 1.0]), 7.0);
        assert_eq!(bell(3, 3, &[2.0]), 8.0);
    }

    #[test]
    fn bell_matches_partition_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let y: Vec<f64> = (0..6).map(|_| rng.gen_range(-4..=4) as f64).collect();
            for j in 1..=6 {
                for m in 1..=j {
                    assert_eq!(bell(j, m, &y[..j - m + 1]), bell_by_partitions(j, m, &y), "B_{j},{m}");
                }
            }
        }
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn bell_rejects_bad_indices() {
        bell(2, 3, &[1.0]);
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn bell_rejects_bad_arity() {
        bell(3, 2, &[1.0]);
    }

    #[test]
    fn fold_first_order() {
        let spec = parse_system(FOLD).unwrap();
        let f = melnikov_f(&spec, 1, &[1.0], &[0.0]).unwrap();
        assert!((f[0] - 2.0 * PI).abs() < 1e-10);
        let f = melnikov_f(&spec, 1, &[0.0], &[0.0]).unwrap();
        assert!(f[0].abs() < 1e-12);
        let g = averaged_g(&spec, 1, &[0.3], &[-0.1]).unwrap();
        assert!((g[0] + 0.01).abs() < 1e-10);
    }

    #[test]
    fn fold_second_order_closed_form() {
        // With y₁ = t(z²+μ) + 1 − cos t, f₂ = ∫ 2z·y₁ = 2z(2π²(z²+μ) + 2π)
        // and g₂ = 2z.
        let spec = parse_system(FOLD).unwrap();
        for &(z, mu) in &[(0.5, -0.3), (-1.2, 0.4)] {
            let f2 = melnikov_f(&spec, 2, &[z], &[mu]).unwrap()[0];
            let expected = 2.0 * z * (2.0 * PI * PI * (z * z + mu) + 2.0 * PI);
            assert!((f2 - expected).abs() < 1e-8, "{f2} vs {expected}");
            let g2 = averaged_g(&spec, 2, &[z], &[mu]).unwrap()[0];
            assert!((g2 - 2.0 * z).abs() < 1e-8, "{g2}");
        }
    }

    #[test]
    fn bell_route_agrees_with_jets() {
        let spec = parse_system(FOLD).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let z = -1.0 + 0.5 * a as f64;
                let mu = -1.0 + 0.5 * b as f64;
                let jet = melnikov_f(&spec, 1, &[z], &[mu]).unwrap()[0];
                let bell = melnikov_f_bell(&spec, 1, z, &[mu]).unwrap();
                assert!((jet - bell).abs() < 1e-8);
            }
        }
        let spec = parse_system(TRANSCRITICAL).unwrap();
        let jet = melnikov_f(&spec, 2, &[0.0], &[0.0, 1.0]).unwrap()[0];
        let bell = melnikov_f_bell(&spec, 2, 0.0, &[0.0, 1.0]).unwrap();
        assert!((jet - 2.0 * PI).abs() < 1e-9);
        assert!((bell - 2.0 * PI).abs() < 1e-9);
        for i in 1..=4 {
            let jet = melnikov_f(&spec, i, &[0.4], &[-0.3, 0.7]).unwrap()[0];
            let bell = melnikov_f_bell(&spec, i, 0.4, &[-0.3, 0.7]).unwrap();
            assert!((jet - bell).abs() < 1e-8 * (1.0 + jet.abs()), "order {i}: {jet} vs {bell}");
        }
    }

    #[test]
    fn bell_route_limits() {
        let spec = parse_system(FOLD).unwrap();
        assert!(matches!(melnikov_f_bell(&spec, 5, 0.0, &[0.0]), Err(MelnikovError::OrderOutOfRange { .. })));
        let planar = parse_system("system p\ndim n=2 k=0\nperiod T=1\norder 1: x2, x1\nend\n").unwrap();
        assert!(matches!(melnikov_f_bell(&planar, 1, 0.0, &[]), Err(MelnikovError::Unsupported(_))));
    }

    #[test]
    fn transcritical_second_average_is_constant_mean() {
        let spec = parse_system(TRANSCRITICAL).unwrap();
        let g2 = averaged_g(&spec, 2, &[0.0], &[0.0, 1.0]).unwrap()[0];
        assert!((g2 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pitchfork_orders() {
        let spec = parse_system(PITCHFORK).unwrap();
        assert!(melnikov_f(&spec, 1, &[0.7], &[0.2, 1.0]).unwrap()[0].abs() < 1e-15);
        let g2 = averaged_g(&spec, 2, &[1.0], &[-1.0, 1.0]).unwrap()[0];
        assert!(g2.abs() < 1e-10);
        let g2 = averaged_g(&spec, 2, &[0.5], &[0.3, 1.0]).unwrap()[0];
        assert!((g2 - (0.125 + 0.15)).abs() < 1e-10);
        let g3 = averaged_g(&spec, 3, &[0.0], &[0.0, 1.0]).unwrap()[0];
        assert!((g3 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn shortcut_agrees_with_recursion() {
        let spec = parse_system(PITCHFORK).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let z = -1.0 + 0.5 * a as f64;
                let mu = [-1.0 + 0.5 * b as f64, 1.0];
                for i in 2..=3 {
                    let s = averaged_g_shortcut(&spec, 2, i, &[z], &mu).unwrap()[0];
                    let r = averaged_g(&spec, i, &[z], &mu).unwrap()[0];
                    assert!((s - r).abs() < 1e-8, "g{i} at ({z},{mu:?}): {s} vs {r}");
                }
            }
        }
        let s = averaged_g_shortcut(&spec, 2, 4, &[0.0], &[0.0, 1.0]).unwrap()[0];
        let r = averaged_g(&spec, 4, &[0.0], &[0.0, 1.0]).unwrap()[0];
        assert!((s - r).abs() < 1e-7, "{s} vs {r}");
    }

    #[test]
    fn shortcut_refusals() {
        let spec = parse_system(FOLD).unwrap();
        let g = averaged_g_shortcut(&spec, 1, 1, &[0.3], &[-0.1]).unwrap()[0];
        assert!((g + 0.01).abs() < 1e-10);
        assert!(matches!(
            averaged_g_shortcut(&spec, 2, 2, &[0.3], &[-0.1]),
            Err(MelnikovError::ShortcutPrecondition(_))
        ));
        assert!(matches!(
            averaged_g_shortcut(&spec, 1, 3, &[0.3], &[-0.1]),
            Err(MelnikovError::ShortcutPrecondition(_))
        ));
    }

    #[test]
    fn ell_detection() {
        let grid = SampleGrid::rectangular(&[-1.0, -1.0], &[1.0, 1.0], 1, 5);
        let fold = parse_system(FOLD).unwrap();
        let r = detect_ell(&fold, &grid).unwrap();
        assert_eq!(r.ell, 1);
        assert_eq!(r.sup_g.len(), 1);
        for s in &r.samples {
            assert!((s.g[0][0] * r.period - s.f[0][0]).abs() < 1e-12);
        }

        let grid = SampleGrid::rectangular(&[-1.0, -1.0, 1.0], &[1.0, 1.0, 1.0 + 1e-9], 1, 5);
        let pitchfork = parse_system(PITCHFORK).unwrap();
        let r = detect_ell(&pitchfork, &grid).unwrap();
        assert_eq!(r.ell, 2);
        assert!(r.sup_g[0] < r.threshold);

        let zero = parse_system("system z\ndim n=1 k=1\nperiod T=1\norder 1: 0\norder 2: 0*x1\nend\n").unwrap();
        let grid = SampleGrid::rectangular(&[-1.0, -1.0], &[1.0, 1.0], 1, 5);
        assert!(matches!(detect_ell(&zero, &grid), Err(MelnikovError::NoGuidingSystem(_))));
        let small = SampleGrid::rectangular(&[-1.0, -1.0], &[1.0, 1.0], 1, 3);
        assert!(matches!(detect_ell(&fold, &small), Err(MelnikovError::GridTooSmall(9))));
    }

    #[test]
    fn planar_second_order() {
        // x' = ε y, y' = ε x²: g₂ = −½ Dg₁·g₁·T with g₁ = (y, x²).
        let spec = parse_system("system p\ndim n=2 k=0\nperiod T=1\norder 1: x2, x1^2\nend\n").unwrap();
        let (x, y) = (0.3, -0.8);
        let g2 = averaged_g(&spec, 2, &[x, y], &[]).unwrap();
        // f₂ for an autonomous field is ½ Dg₁·g₁·T², so g₂ vanishes.
        assert!(g2[0].abs() < 1e-10 && g2[1].abs() < 1e-10, "{g2:?}");
        assert!(matches!(averaged_g(&spec, 3, &[x, y], &[]), Err(MelnikovError::Unsupported(_))));
    }
}
