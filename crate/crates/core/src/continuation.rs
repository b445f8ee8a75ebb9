//! Zeros of `Δ_ℓ(·, μ, ε)`: Newton, pseudo-arclength continuation in one
//! μ-component, fold localization, a brute-force scan oracle and germ
//! classification.

use nalgebra::{Complex, DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::ode::IntegrateError;
use crate::poincare::{DerivLevel, Displacement, DisplacementEval};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinuationConfig {
    pub h0: f64,
    pub h_min: f64,
    pub h_max: f64,
    /// Consecutive halvings tolerated before a branch is truncated.
    pub max_halvings: usize,
    /// Clean steps after which the step doubles.
    pub grow_after: usize,
    pub max_points: usize,
    pub newton_max_iter: usize,
    /// Newton gives up early when the best residual has not halved for
    /// this many iterations.
    pub newton_stall_iter: usize,
    pub newton_tol: f64,
    pub corrector_max_iter: usize,
    pub hyperbolicity_tol: f64,
    pub nondegeneracy_tol: f64,
    pub fold_tol: f64,
    pub homotopy_steps: usize,
    pub scan_grid: usize,
    /// Grid of the ε = 0 root search that seeds scalar diagrams.
    pub seed_grid: usize,
    /// Root counts on both sides of each fold (two scans per fold).
    pub side_counts: bool,
    /// Number of μ values at which seeds are searched.
    pub seed_count: usize,
}

impl Default for ContinuationConfig {
    fn default() -> Self {
        ContinuationConfig {
            h0: 1e-2,
            h_min: 1e-5,
            h_max: 5e-2,
            max_halvings: 3,
            grow_after: 4,
            max_points: 4000,
            newton_max_iter: 25,
            newton_stall_iter: 8,
            newton_tol: 1e-12,
            corrector_max_iter: 12,
            hyperbolicity_tol: 1e-6,
            nondegeneracy_tol: 1e-6,
            fold_tol: 1e-10,
            homotopy_steps: 8,
            scan_grid: 1001,
            seed_grid: 201,
            side_counts: true,
            seed_count: 5,
        }
    }
}

/// The one μ-component that varies; the others stay at `base`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamSlice {
    pub base: Vec<f64>,
    pub index: usize,
}

impl ParamSlice {
    pub fn new(base: Vec<f64>, index: usize) -> Self {
        assert!(index < base.len(), "contract violation: slice index {index} outside k={}", base.len());
        ParamSlice { base, index }
    }

    pub fn at(&self, mu: f64) -> Vec<f64> {
        let mut v = self.base.clone();
        v[self.index] = mu;
        v
    }
}

/// Box in `(x, μ)` to which branches are confined.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Window {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub mu_lo: f64,
    pub mu_hi: f64,
}

impl Window {
    pub fn new(x_lo: Vec<f64>, x_hi: Vec<f64>, mu_lo: f64, mu_hi: f64) -> Self {
        assert_eq!(x_lo.len(), x_hi.len());
        assert!(mu_lo < mu_hi && x_lo.iter().zip(&x_hi).all(|(a, b)| a < b), "contract violation: empty window");
        Window { x_lo, x_hi, mu_lo, mu_hi }
    }

    /// Same bounds on every state component.
    pub fn uniform(n: usize, x: (f64, f64), mu: (f64, f64)) -> Self {
        Self::new(vec![x.0; n], vec![x.1; n], mu.0, mu.1)
    }

    pub fn contains(&self, x: &[f64], mu: f64) -> bool {
        mu >= self.mu_lo
            && mu <= self.mu_hi
            && x.iter().zip(&self.x_lo).zip(&self.x_hi).all(|((v, lo), hi)| v >= lo && v <= hi)
    }

    /// Same window scaled about its centre.
    pub fn enlarged(&self, factor: f64) -> Self {
        let grow = |lo: f64, hi: f64| {
            let (c, r) = (0.5 * (lo + hi), 0.5 * (hi - lo) * factor);
            (c - r, c + r)
        };
        let (mu_lo, mu_hi) = grow(self.mu_lo, self.mu_hi);
        let (x_lo, x_hi) = self.x_lo.iter().zip(&self.x_hi).map(|(a, b)| grow(*a, *b)).unzip();
        Window { x_lo, x_hi, mu_lo, mu_hi }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stability {
    Stable,
    Unstable,
    Nonhyperbolic,
}

impl Stability {
    pub fn as_str(self) -> &'static str {
        match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
            Stability::Nonhyperbolic => "nonhyperbolic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchPoint {
    /// Arclength in `(x, μ)` from the start of the branch.
    pub s: f64,
    pub x: Vec<f64>,
    pub mu: f64,
    pub eps: f64,
    pub stability: Stability,
    /// `det ∂Δ_ℓ/∂x`.
    pub test_fold: f64,
    /// Spectrum of `∂Π/∂x = I + ε^ℓ ∂Δ_ℓ/∂x`, sorted by (re, im).
    pub eigs: Vec<Complex<f64>>,
    /// Max-norm of `Δ_ℓ` at the point.
    pub residual: f64,
}

impl BranchPoint {
    fn coords(&self) -> Vec<f64> {
        let mut y = self.x.clone();
        y.push(self.mu);
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FoldClass {
    Fold,
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldRecord {
    pub mu: f64,
    pub x: Vec<f64>,
    /// Scale-normalized `|∂Δ_ℓ/∂μ|` (reduced by the left null vector for n > 1).
    #[serde(rename = "F1")]
    pub f1: f64,
    /// Scale-normalized `|∂²Δ_ℓ/∂x²|` along the right null vector.
    #[serde(rename = "F2")]
    pub f2: f64,
    /// Root counts just below and above `mu` (scalar systems).
    pub side_counts: Option<(usize, usize)>,
    pub classification: FoldClass,
    pub test_fold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub points: Vec<BranchPoint>,
    /// Why each end stopped (backward end first).
    pub ends: [String; 2],
}

impl Branch {
    /// Number of crossings of the line `μ = mu` by the branch polyline.
    pub fn crossings(&self, mu: f64) -> usize {
        let pts = &self.points;
        let mut count = 0;
        for (i, w) in pts.windows(2).enumerate() {
            let (a, b) = (w[0].mu - mu, w[1].mu - mu);
            if a * b < 0.0 || (b == 0.0 && i + 2 < pts.len()) {
                count += 1;
            }
        }
        count
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NewtonFailure {
    #[error("no convergence in {iterations} iterations (last residual {last_residual:e})")]
    MaxIterations { iterations: usize, last_residual: f64, x: Vec<f64> },
    #[error("singular Jacobian at x = {x:?}")]
    Singular { x: Vec<f64> },
    #[error("residuals {residuals:?} show no quadratic tail")]
    NoQuadraticTail { residuals: Vec<f64> },
    #[error(transparent)]
    Integrate(#[from] IntegrateError),
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, b| a.max(b.abs()))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn accept_tail(residuals: &[f64]) -> bool {
    match residuals {
        [.., prev, last] => *last <= 0.5 * prev,
        _ => true,
    }
}

fn sorted_eigs(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let mut eigs: Vec<Complex<f64>> = m.clone().complex_eigenvalues().iter().cloned().collect();
    eigs.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    eigs
}

fn classify_stability(eigs: &[Complex<f64>], tol: f64) -> Stability {
    if eigs.iter().any(|l| (l - Complex::new(1.0, 0.0)).norm() < tol) {
        Stability::Nonhyperbolic
    } else if eigs.iter().any(|l| l.norm() > 1.0) {
        Stability::Unstable
    } else {
        Stability::Stable
    }
}

fn make_point(
    disp: &Displacement<'_>,
    x: Vec<f64>,
    mu: f64,
    eps: f64,
    ev: &DisplacementEval,
    cfg: &ContinuationConfig,
) -> BranchPoint {
    let n = x.len();
    let scale = eps.powi(disp.ell() as i32);
    let map_jac = DMatrix::identity(n, n) + &ev.jac_x * scale;
    let eigs = sorted_eigs(&map_jac);
    BranchPoint {
        s: 0.0,
        stability: classify_stability(&eigs, cfg.hyperbolicity_tol),
        test_fold: ev.jac_x.determinant(),
        eigs,
        residual: max_abs(&ev.delta),
        x,
        mu,
        eps,
    }
}

/// Newton's method for `Δ_ℓ(x, μ, ε) = 0` at fixed μ.
///
/// Accepts only when `|Δ_ℓ| < tol·(1+|x|)` and the last two residuals
/// decrease at least by half.
pub fn newton_fixed_point(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    x_guess: &[f64],
    mu: f64,
    eps: f64,
    cfg: &ContinuationConfig,
) -> Result<BranchPoint, NewtonFailure> {
    let full_mu = slice.at(mu);
    let mut x = x_guess.to_vec();
    let mut residuals = Vec::new();
    let (mut best, mut best_at) = (f64::INFINITY, 0);
    for k in 0..=cfg.newton_max_iter {
        let ev = disp.eval_with(&x, &full_mu, eps, DerivLevel::First, &[slice.index], false)?;
        let r = max_abs(&ev.delta);
        residuals.push(r);
        if !r.is_finite() {
            break;
        }
        if r < 0.5 * best {
            (best, best_at) = (r, k);
        } else if k - best_at >= cfg.newton_stall_iter {
            break;
        }
        if r < cfg.newton_tol * (1.0 + max_abs(&x)) && accept_tail(&residuals) {
            return Ok(make_point(disp, x, mu, eps, &ev, cfg));
        }
        let rhs = -DVector::from_column_slice(&ev.delta);
        let Some(dx) = ev.jac_x.clone().lu().solve(&rhs) else {
            return Err(NewtonFailure::Singular { x });
        };
        if dx.iter().any(|v| !v.is_finite()) {
            return Err(NewtonFailure::Singular { x });
        }
        for (xi, d) in x.iter_mut().zip(dx.iter()) {
            *xi += d;
        }
    }
    let last = *residuals.last().unwrap_or(&f64::INFINITY);
    if last < cfg.newton_tol * (1.0 + max_abs(&x)) {
        return Err(NewtonFailure::NoQuadraticTail { residuals });
    }
    Err(NewtonFailure::MaxIterations { iterations: cfg.newton_max_iter, last_residual: last, x })
}

/// Newton on `Δ_ℓ = 0`, `normal·(y − anchor) = 0` in `y = (x, μ)`.
fn correct(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    anchor: &[f64],
    normal: &[f64],
    eps: f64,
    cfg: &ContinuationConfig,
) -> Option<(Vec<f64>, DisplacementEval)> {
    let n = anchor.len() - 1;
    let mut y = anchor.to_vec();
    let mut residuals = Vec::new();
    for _ in 0..cfg.corrector_max_iter {
        let ev = disp.eval_with(&y[..n], &slice.at(y[n]), eps, DerivLevel::First, &[slice.index], false).ok()?;
        let r = max_abs(&ev.delta);
        if !r.is_finite() {
            return None;
        }
        residuals.push(r);
        if r < cfg.newton_tol * (1.0 + max_abs(&y[..n])) && accept_tail(&residuals) {
            return Some((y, ev));
        }
        let mut a = DMatrix::zeros(n + 1, n + 1);
        a.view_mut((0, 0), (n, n)).copy_from(&ev.jac_x);
        a.view_mut((0, n), (n, 1)).copy_from(&ev.jac_mu);
        for j in 0..=n {
            a[(n, j)] = normal[j];
        }
        let mut b = DVector::zeros(n + 1);
        for i in 0..n {
            b[i] = -ev.delta[i];
        }
        b[n] = -(0..=n).map(|j| normal[j] * (y[j] - anchor[j])).sum::<f64>();
        let dy = a.lu().solve(&b)?;
        for (yi, d) in y.iter_mut().zip(dy.iter()) {
            *yi += d;
        }
    }
    None
}

/// Unit tangent of the solution curve, oriented along `reference`.
fn tangent(ev: &DisplacementEval, reference: &[f64]) -> Option<Vec<f64>> {
    let n = ev.jac_x.nrows();
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(&ev.jac_x);
    a.view_mut((0, n), (n, 1)).copy_from(&ev.jac_mu);
    for j in 0..=n {
        a[(n, j)] = reference[j];
    }
    let mut b = DVector::zeros(n + 1);
    b[n] = 1.0;
    let t = a.lu().solve(&b)?;
    let len = t.norm();
    if !len.is_finite() || len == 0.0 {
        return None;
    }
    Some(t.iter().map(|v| v / len).collect())
}

fn first_tangent(ev: &DisplacementEval) -> Option<Vec<f64>> {
    let n = ev.jac_x.nrows();
    // Prefer the μ axis as reference; fall back on the state axes.
    (0..=n).rev().find_map(|axis| {
        let mut e = vec![0.0; n + 1];
        e[axis] = 1.0;
        tangent(ev, &e)
    })
}

/// Leaves the window: lands on the crossed face when possible.
fn land_on_boundary(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    inside: &[f64],
    outside: &[f64],
    window: &Window,
    eps: f64,
    cfg: &ContinuationConfig,
) -> Option<(Vec<f64>, DisplacementEval)> {
    let n = inside.len() - 1;
    let mut lo = window.x_lo.clone();
    lo.push(window.mu_lo);
    let mut hi = window.x_hi.clone();
    hi.push(window.mu_hi);
    let mut best: Option<(f64, usize, f64)> = None;
    for a in 0..=n {
        let bound = if outside[a] > hi[a] {
            hi[a]
        } else if outside[a] < lo[a] {
            lo[a]
        } else {
            continue;
        };
        let theta = (bound - inside[a]) / (outside[a] - inside[a]);
        if best.is_none_or(|(t, _, _)| theta < t) {
            best = Some((theta, a, bound));
        }
    }
    let (theta, axis, bound) = best?;
    let mut anchor: Vec<f64> = inside.iter().zip(outside).map(|(p, q)| p + theta * (q - p)).collect();
    anchor[axis] = bound;
    let mut normal = vec![0.0; n + 1];
    normal[axis] = 1.0;
    let (y, ev) = correct(disp, slice, &anchor, &normal, eps, cfg)?;
    let tol = 1e-9;
    let inside_box = y.iter().enumerate().all(|(a, v)| *v >= lo[a] - tol && *v <= hi[a] + tol);
    inside_box.then_some((y, ev))
}

fn trace_direction(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    seed: &BranchPoint,
    tau0: &[f64],
    window: &Window,
    cfg: &ContinuationConfig,
) -> (Vec<BranchPoint>, String) {
    let n = seed.x.len();
    let eps = seed.eps;
    let start = seed.coords();
    let mut out: Vec<BranchPoint> = Vec::new();
    let mut prev = start.clone();
    let mut prev_prev: Option<Vec<f64>> = None;
    let mut tau = tau0.to_vec();
    let mut h = cfg.h0;
    let mut clean = 0;
    let mut halvings = 0;
    loop {
        if out.len() >= cfg.max_points {
            return (out, "point budget exhausted".into());
        }
        let dir = match &prev_prev {
            Some(pp) => {
                let sec: Vec<f64> = prev.iter().zip(pp).map(|(a, b)| a - b).collect();
                let l = norm(&sec);
                sec.iter().map(|v| v / l).collect()
            }
            None => tau.clone(),
        };
        let anchor: Vec<f64> = prev.iter().zip(&dir).map(|(p, d)| p + h * d).collect();
        let step = correct(disp, slice, &anchor, &dir, eps, cfg).and_then(|(y, ev)| {
            let d = dist(&y, &prev);
            let t = tangent(&ev, &tau)?;
            let forward = t.iter().zip(&dir).map(|(a, b)| a * b).sum::<f64>() > 0.0;
            (d <= (1.5 * h).min(cfg.h_max) && forward).then_some((y, ev, t))
        });
        let Some((y, ev, t)) = step else {
            halvings += 1;
            clean = 0;
            h *= 0.5;
            if halvings > cfg.max_halvings || h < cfg.h_min {
                return (out, format!("corrector failed after {} halvings", halvings - 1));
            }
            continue;
        };
        halvings = 0;
        if !window.contains(&y[..n], y[n]) {
            let reason = match land_on_boundary(disp, slice, &prev, &y, window, eps, cfg) {
                Some((yb, evb)) => {
                    out.push(make_point(disp, yb[..n].to_vec(), yb[n], eps, &evb, cfg));
                    "reached window boundary"
                }
                None => "left window",
            };
            return (out, reason.into());
        }
        if out.len() > 10 && dist(&y, &start) < 0.5 * h {
            return (out, "closed loop".into());
        }
        out.push(make_point(disp, y[..n].to_vec(), y[n], eps, &ev, cfg));
        prev_prev = Some(std::mem::replace(&mut prev, y));
        tau = t;
        clean += 1;
        if clean >= cfg.grow_after {
            h = (2.0 * h).min(cfg.h_max);
            clean = 0;
        }
    }
}

/// Pseudo-arclength continuation in both directions from a converged seed.
pub fn continue_branch(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    seed: &BranchPoint,
    window: &Window,
    cfg: &ContinuationConfig,
) -> Result<Branch, NewtonFailure> {
    let ev = disp.eval_with(&seed.x, &slice.at(seed.mu), seed.eps, DerivLevel::First, &[slice.index], false)?;
    let tau = first_tangent(&ev).ok_or_else(|| NewtonFailure::Singular { x: seed.x.clone() })?;
    let back: Vec<f64> = tau.iter().map(|v| -v).collect();
    let (fwd, fwd_end) = trace_direction(disp, slice, seed, &tau, window, cfg);
    let (bwd, bwd_end) = trace_direction(disp, slice, seed, &back, window, cfg);
    let mut points: Vec<BranchPoint> = bwd.into_iter().rev().collect();
    points.push(seed.clone());
    points.extend(fwd);
    let mut s = 0.0;
    for i in 0..points.len() {
        if i > 0 {
            s += dist(&points[i].coords(), &points[i - 1].coords());
        }
        points[i].s = s;
    }
    Ok(Branch { points, ends: [bwd_end, fwd_end] })
}

/// Brute-force root count of `Δ_ℓ(·, μ, ε)` on a uniform grid (n = 1).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanResult {
    pub count: usize,
    pub roots: Vec<f64>,
    /// Cells skipped because an endpoint diverged.
    pub skipped: usize,
    /// Cells re-scanned 10× finer around a near-touching extremum.
    pub refined: usize,
}

fn bisect(f: &dyn Fn(f64) -> Option<f64>, mut a: f64, mut fa: f64, mut b: f64) -> f64 {
    while b - a > 1e-10 {
        let m = 0.5 * (a + b);
        match f(m) {
            Some(fm) if fm == 0.0 => return m,
            Some(fm) if (fm < 0.0) == (fa < 0.0) => {
                a = m;
                fa = fm;
            }
            Some(_) => b = m,
            None => break,
        }
    }
    0.5 * (a + b)
}

fn sign_roots(f: &dyn Fn(f64) -> Option<f64>, xs: &[f64], vals: &[Option<f64>], roots: &mut Vec<f64>) -> usize {
    let mut skipped = 0;
    for i in 0..xs.len() {
        match vals[i] {
            Some(v) if v == 0.0 => roots.push(xs[i]),
            _ => {}
        }
        if i + 1 == xs.len() {
            break;
        }
        match (vals[i], vals[i + 1]) {
            (Some(a), Some(b)) if a != 0.0 && b != 0.0 && (a < 0.0) != (b < 0.0) => {
                roots.push(bisect(f, xs[i], a, xs[i + 1]));
            }
            (Some(_), Some(_)) => {}
            _ => skipped += 1,
        }
    }
    skipped
}

pub fn count_fixed_points_scan(
    disp: &Displacement<'_>,
    x_interval: (f64, f64),
    mu: &[f64],
    eps: f64,
    grid_size: usize,
) -> ScanResult {
    assert!(grid_size >= 1001, "contract violation: scan grid below 1001 points");
    scan_roots(disp, x_interval, mu, eps, grid_size)
}

fn scan_roots(disp: &Displacement<'_>, x_interval: (f64, f64), mu: &[f64], eps: f64, grid_size: usize) -> ScanResult {
    assert_eq!(disp.spec().dim(), 1, "contract violation: the scan oracle needs n = 1");
    assert!(grid_size >= 3);
    let f = |x: f64| disp.value(&[x], mu, eps).ok().map(|v| v[0]).filter(|v| v.is_finite());
    let (a, b) = x_interval;
    let xs: Vec<f64> = (0..grid_size).map(|i| a + (b - a) * i as f64 / (grid_size - 1) as f64).collect();
    let vals: Vec<Option<f64>> = xs.iter().map(|&x| f(x)).collect();
    let mut roots = Vec::new();
    let skipped = sign_roots(&f, &xs, &vals, &mut roots);
    let mut refined = 0;
    for i in 1..grid_size - 1 {
        let (Some(l), Some(c), Some(r)) = (vals[i - 1], vals[i], vals[i + 1]) else {
            continue;
        };
        let same_sign = (l < 0.0) == (c < 0.0) && (c < 0.0) == (r < 0.0) && c != 0.0;
        let extremum = c.abs() < l.abs() && c.abs() < r.abs();
        let slope = (c - l).abs().max((r - c).abs());
        if same_sign && extremum && c.abs() < 2.0 * slope {
            refined += 1;
            let fine: Vec<f64> = (0..=20).map(|j| xs[i - 1] + (xs[i + 1] - xs[i - 1]) * j as f64 / 20.0).collect();
            let mut fv: Vec<Option<f64>> = fine.iter().map(|&x| f(x)).collect();
            fv[0] = Some(l);
            fv[10] = Some(c);
            fv[20] = Some(r);
            sign_roots(&f, &fine, &fv, &mut roots);
        }
    }
    roots.sort_by(f64::total_cmp);
    ScanResult { count: roots.len(), roots, skipped, refined }
}

/// Outcome of [`classify_singularity`].
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Singularity {
    Regular,
    Fold,
    TranscriticalDegenerate,
    PitchforkDegenerate,
    CorankReport { corank: usize, singular_values: Vec<f64>, d_mu: f64, d2: f64, d3: Option<f64> },
}

fn normalization(disp: &Displacement<'_>) -> f64 {
    disp.period().max(1.0)
}

/// Left and right singular vectors of the smallest singular value.
fn null_vectors(j: &DMatrix<f64>) -> (Vec<f64>, DVector<f64>, DVector<f64>) {
    let svd = j.clone().svd(true, true);
    let sv: Vec<f64> = svd.singular_values.iter().cloned().collect();
    let imin = (0..sv.len()).min_by(|a, b| sv[*a].total_cmp(&sv[*b])).unwrap_or(0);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    (sv, u.column(imin).into_owned(), v_t.row(imin).transpose())
}

/// Reduced `(∂Δ/∂μ, ∂²Δ/∂x²)` along the kernel of `∂Δ/∂x`.
fn reduced_derivatives(ev: &DisplacementEval) -> (f64, f64) {
    let n = ev.jac_x.nrows();
    let (_, l, r) = null_vectors(&ev.jac_x);
    let d_mu = (0..n).map(|i| l[i] * ev.jac_mu[(i, 0)]).sum::<f64>();
    let d2 = (0..n)
        .map(|i| {
            let h = &ev.hess_x[i];
            l[i] * (0..n).flat_map(|a| (0..n).map(move |b| (a, b))).map(|(a, b)| h[(a, b)] * r[a] * r[b]).sum::<f64>()
        })
        .sum::<f64>();
    (d_mu, d2)
}

/// Corank and germ type of `Δ_ℓ` at a point near one of its zeros.
pub fn classify_singularity(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    x: &[f64],
    mu: f64,
    eps: f64,
    cfg: &ContinuationConfig,
) -> Result<Singularity, IntegrateError> {
    let full = slice.at(mu);
    let ev = disp.eval_with(x, &full, eps, DerivLevel::Second, &[slice.index], false)?;
    let scale = normalization(disp);
    let tol = cfg.nondegeneracy_tol;
    let (sv, _, _) = null_vectors(&ev.jac_x);
    let corank = sv.iter().filter(|s| **s / scale < tol).count();
    if corank == 0 {
        return Ok(Singularity::Regular);
    }
    let (d_mu, d2) = reduced_derivatives(&ev);
    let (d_mu, d2) = (d_mu.abs() / scale, d2.abs() / scale);
    let d3 = if x.len() == 1 { Some(disp.third_x_derivative(x[0], &full, eps)?.abs() / scale) } else { None };
    if corank == 1 {
        if d2 > tol && d_mu > tol {
            return Ok(Singularity::Fold);
        }
        if d2 > tol {
            return Ok(Singularity::TranscriticalDegenerate);
        }
        if d3.is_some_and(|v| v > tol) {
            return Ok(Singularity::PitchforkDegenerate);
        }
    }
    Ok(Singularity::CorankReport { corank, singular_values: sv, d_mu, d2, d3 })
}

/// Scan context used for side counts of folds of scalar systems.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScanContext {
    pub x_interval: (f64, f64),
    pub grid: usize,
}

/// Refines a sign change of `test_fold` between consecutive branch points
/// by Illinois iteration on the chord parameter, then tests (F1)/(F2).
pub fn locate_fold(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    a: &BranchPoint,
    b: &BranchPoint,
    scan: Option<ScanContext>,
    cfg: &ContinuationConfig,
) -> Result<FoldRecord, NewtonFailure> {
    let eps = a.eps;
    let n = a.x.len();
    let (ya, yb) = (a.coords(), b.coords());
    let chord: Vec<f64> = yb.iter().zip(&ya).map(|(p, q)| p - q).collect();
    let len = norm(&chord);
    let normal: Vec<f64> = chord.iter().map(|v| v / len).collect();
    let at = |theta: f64| -> Option<(Vec<f64>, f64)> {
        let anchor: Vec<f64> = ya.iter().zip(&chord).map(|(p, c)| p + theta * c).collect();
        let (y, ev) = correct(disp, slice, &anchor, &normal, eps, cfg)?;
        let det = ev.jac_x.determinant();
        Some((y, det))
    };
    let (mut t_lo, mut f_lo, mut t_hi, mut f_hi) = (0.0, a.test_fold, 1.0, b.test_fold);
    let mut best = if f_lo.abs() < f_hi.abs() { (ya.clone(), f_lo) } else { (yb.clone(), f_hi) };
    let mut side = 0i8;
    for _ in 0..200 {
        if best.1.abs() < cfg.fold_tol || t_hi - t_lo < 1e-15 {
            break;
        }
        let t = (t_lo * f_hi - t_hi * f_lo) / (f_hi - f_lo);
        let t = if t.is_finite() && t > t_lo && t < t_hi { t } else { 0.5 * (t_lo + t_hi) };
        let Some((y, f)) = at(t) else {
            return Err(NewtonFailure::Singular { x: best.0[..n].to_vec() });
        };
        if f.abs() < best.1.abs() {
            best = (y, f);
        }
        if (f < 0.0) == (f_lo < 0.0) {
            t_lo = t;
            f_lo = f;
            if side == -1 {
                f_hi *= 0.5;
            }
            side = -1;
        } else {
            t_hi = t;
            f_hi = f;
            if side == 1 {
                f_lo *= 0.5;
            }
            side = 1;
        }
    }
    let (y, det) = best;
    let (x, mu) = (y[..n].to_vec(), y[n]);
    let ev = disp.eval_with(&x, &slice.at(mu), eps, DerivLevel::Second, &[slice.index], false)?;
    let scale = normalization(disp);
    let (d_mu, d2) = reduced_derivatives(&ev);
    let (f1, f2) = (d_mu.abs() / scale, d2.abs() / scale);
    let classification =
        if f1 > cfg.nondegeneracy_tol && f2 > cfg.nondegeneracy_tol { FoldClass::Fold } else { FoldClass::Degenerate };
    let side_counts = match scan {
        Some(ctx) if n == 1 => {
            let delta = 1e-3 * mu.abs().max(1.0);
            let below = count_fixed_points_scan(disp, ctx.x_interval, &slice.at(mu - delta), eps, ctx.grid).count;
            let above = count_fixed_points_scan(disp, ctx.x_interval, &slice.at(mu + delta), eps, ctx.grid).count;
            Some((below, above))
        }
        _ => None,
    };
    Ok(FoldRecord { mu, x, f1, f2, side_counts, classification, test_fold: det })
}

/// All branches through a window at fixed ε, with their folds.
#[derive(Clone, Debug, PartialEq)]
pub struct Diagram {
    pub eps: f64,
    pub branches: Vec<Branch>,
    pub folds: Vec<FoldRecord>,
    pub notes: Vec<String>,
}

impl Diagram {
    /// Total crossings of the line `μ = mu` over all branches.
    pub fn count_at(&self, mu: f64) -> usize {
        self.branches.iter().map(|b| b.crossings(mu)).sum()
    }
}

/// Roots at ε = 0 for one μ: scan for scalar systems, Newton from a
/// grid of guesses otherwise.
fn guiding_roots(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    window: &Window,
    mu: f64,
    cfg: &ContinuationConfig,
) -> Vec<Vec<f64>> {
    let n = window.x_lo.len();
    if n == 1 {
        let scan = scan_roots(disp, (window.x_lo[0], window.x_hi[0]), &slice.at(mu), 0.0, cfg.seed_grid);
        return scan.roots.into_iter().map(|r| vec![r]).collect();
    }
    let per_axis = 5usize;
    let mut roots: Vec<Vec<f64>> = Vec::new();
    for idx in 0..per_axis.pow(n as u32) {
        let mut rem = idx;
        let guess: Vec<f64> = (0..n)
            .map(|a| {
                let r = rem % per_axis;
                rem /= per_axis;
                window.x_lo[a] + (window.x_hi[a] - window.x_lo[a]) * (r as f64 + 0.5) / per_axis as f64
            })
            .collect();
        if let Ok(p) = newton_fixed_point(disp, slice, &guess, mu, 0.0, cfg) {
            if window.contains(&p.x, mu) && roots.iter().all(|q| dist(q, &p.x) > 1e-6) {
                roots.push(p.x);
            }
        }
    }
    roots
}

/// Zeros of `Δ_ℓ(·, μ, 0)` at each seed μ; reusable across ε.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidingRoots {
    pub per_mu: Vec<(f64, Vec<Vec<f64>>)>,
}

impl GuidingRoots {
    pub fn compute(
        disp: &Displacement<'_>,
        slice: &ParamSlice,
        window: &Window,
        seed_mus: &[f64],
        cfg: &ContinuationConfig,
    ) -> Self {
        GuidingRoots { per_mu: seed_mus.iter().map(|&mu| (mu, guiding_roots(disp, slice, window, mu, cfg))).collect() }
    }

    /// Roots lying inside `window` (μ and x).
    pub fn restricted(&self, window: &Window) -> Self {
        let per_mu = self
            .per_mu
            .iter()
            .filter(|(mu, _)| *mu >= window.mu_lo && *mu <= window.mu_hi)
            .map(|(mu, roots)| (*mu, roots.iter().filter(|x| window.contains(x, *mu)).cloned().collect()))
            .collect();
        GuidingRoots { per_mu }
    }
}

/// Seeds at the target ε: guiding roots carried along `ε·j/steps`.
pub fn find_seeds(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    window: &Window,
    eps: f64,
    seed_mus: &[f64],
    cfg: &ContinuationConfig,
) -> (Vec<BranchPoint>, Vec<String>) {
    let roots = GuidingRoots::compute(disp, slice, window, seed_mus, cfg);
    seeds_from_roots(disp, slice, window, eps, &roots, cfg)
}

/// Homotopy in ε from precomputed guiding roots.
pub fn seeds_from_roots(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    window: &Window,
    eps: f64,
    roots: &GuidingRoots,
    cfg: &ContinuationConfig,
) -> (Vec<BranchPoint>, Vec<String>) {
    let mut seeds = Vec::new();
    let mut notes = Vec::new();
    for (mu, list) in &roots.per_mu {
        let mu = *mu;
        for root in list.iter().cloned() {
            let mut x = root.clone();
            let mut point = None;
            let steps = if eps == 0.0 { 0 } else { cfg.homotopy_steps };
            for j in 0..=steps {
                let e = if steps == 0 { 0.0 } else { eps * j as f64 / steps as f64 };
                match newton_fixed_point(disp, slice, &x, mu, e, cfg) {
                    Ok(p) => {
                        x = p.x.clone();
                        point = Some(p);
                    }
                    Err(err) => {
                        notes.push(format!("homotopy from x={root:?} at mu={mu} stopped at eps={e}: {err}"));
                        point = None;
                        break;
                    }
                }
            }
            let Some(p) = point.filter(|p| window.contains(&p.x, p.mu)) else { continue };
            // Seeds on a fold converge only linearly and duplicate regular ones.
            if p.test_fold.abs() / normalization(disp) < cfg.nondegeneracy_tol {
                notes.push(format!("seed x={:?} at mu={mu} dropped: near-singular", p.x));
                continue;
            }
            if seeds.iter().all(|q: &BranchPoint| q.mu != p.mu || dist(&q.x, &p.x) > 1e-7) {
                seeds.push(p);
            }
        }
    }
    (seeds, notes)
}

/// True when `seed` lies on `branch`: a crossing of `μ = seed.mu` corrects to it.
fn on_branch(disp: &Displacement<'_>, slice: &ParamSlice, branch: &Branch, seed: &BranchPoint, cfg: &ContinuationConfig) -> bool {
    for w in branch.points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if (a.mu - seed.mu) * (b.mu - seed.mu) > 0.0 {
            continue;
        }
        let t = if b.mu == a.mu { 0.0 } else { (seed.mu - a.mu) / (b.mu - a.mu) };
        let guess: Vec<f64> = a.x.iter().zip(&b.x).map(|(p, q)| p + t * (q - p)).collect();
        if dist(&guess, &seed.x) > 0.2 {
            continue;
        }
        if let Ok(p) = newton_fixed_point(disp, slice, &guess, seed.mu, seed.eps, cfg) {
            if dist(&p.x, &seed.x) < 1e-7 {
                return true;
            }
        }
    }
    false
}

/// Default seed abscissae: cell centres of `count` equal μ-cells.
pub fn default_seed_mus(window: &Window, count: usize) -> Vec<f64> {
    (0..count).map(|i| window.mu_lo + (window.mu_hi - window.mu_lo) * (i as f64 + 0.5) / count as f64).collect()
}

/// Seeds, continues and fold-locates every branch reachable in `window`.
pub fn trace_diagram(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    window: &Window,
    eps: f64,
    cfg: &ContinuationConfig,
) -> Diagram {
    let roots = GuidingRoots::compute(disp, slice, window, &default_seed_mus(window, cfg.seed_count), cfg);
    trace_diagram_from(disp, slice, window, eps, &roots, cfg)
}

/// [`trace_diagram`] with the ε = 0 roots supplied by the caller.
pub fn trace_diagram_from(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    window: &Window,
    eps: f64,
    roots: &GuidingRoots,
    cfg: &ContinuationConfig,
) -> Diagram {
    let (seeds, mut notes) = seeds_from_roots(disp, slice, window, eps, roots, cfg);
    let mut branches: Vec<Branch> = Vec::new();
    for seed in seeds {
        if branches.iter().any(|b| on_branch(disp, slice, b, &seed, cfg)) {
            continue;
        }
        match continue_branch(disp, slice, &seed, window, cfg) {
            Ok(b) => branches.push(b),
            Err(e) => notes.push(format!("seed at mu={} failed to continue: {e}", seed.mu)),
        }
    }
    let scan = (cfg.side_counts && window.x_lo.len() == 1).then(|| ScanContext { x_interval: (window.x_lo[0], window.x_hi[0]), grid: cfg.scan_grid });
    let mut folds = Vec::new();
    for b in &branches {
        for w in b.points.windows(2) {
            if w[0].test_fold * w[1].test_fold < 0.0 {
                match locate_fold(disp, slice, &w[0], &w[1], scan, cfg) {
                    Ok(f) => folds.push(f),
                    Err(e) => notes.push(format!("fold between mu={} and mu={} not located: {e}", w[0].mu, w[1].mu)),
                }
            }
        }
    }
    folds.sort_by(|a, b| a.mu.total_cmp(&b.mu));
    Diagram { eps, branches, folds, notes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_system, SystemSpec};

    const FOLD: &str = "system fold\ndim n=1 k=1\nperiod T=2*pi\norder 1: x1^2 + mu1 + sin(t)\nend\n";
    const TRANSCRITICAL: &str = "system transcritical\ndim n=1 k=2\nperiod T=2*pi\n\
        order 1: x1^2 + mu1*x1 + sin(t)*x1\norder rest: mu2 + sin(2*t)\nend\n";
    const PITCHFORK: &str = "system pitchfork\ndim n=1 k=2\nperiod T=2*pi\norder 1: 0\n\
        order 2: x1^3 + mu1*x1 + sin(t)*x1\norder rest: mu2 + sin(2*t)\nend\n";

    fn spec(text: &str) -> SystemSpec {
        parse_system(text).unwrap()
    }

    #[test]
    fn newton_on_fold() {
        let s = spec(FOLD);
        let d = Displacement::with_ell(&s, 1);
        let slice = ParamSlice::new(vec![0.0], 0);
        let cfg = ContinuationConfig::default();
        let p = newton_fixed_point(&d, &slice, &[-0.7], -0.5, 0.4, &cfg).unwrap();
        let scan = count_fixed_points_scan(&d, (-1.5, 0.6), &[-0.5], 0.4, 2001);
        assert_eq!(scan.count, 2);
        assert!((p.x[0] - scan.roots[0]).abs() < 1e-9, "{} vs {:?}", p.x[0], scan.roots);
        assert_eq!(p.stability, Stability::Stable);
        assert!(p.residual < 1e-12);
        for guess in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            assert!(newton_fixed_point(&d, &slice, &[guess], 0.5, 0.4, &cfg).is_err());
        }
    }

    #[test]
    fn saddle_focus_newton_closes_orbit() {
        use crate::ode::{integrate, IntegratorConfig};
        let s = spec("system sf\ndim n=2 k=3\nperiod T=2*pi\norder 1: x2, x1^2 + mu1 + sin(t)\n\
            order 2: 0, x2*(mu2 + mu3*x1 + x1^3*x2)\nend\n");
        let d = Displacement::with_ell(&s, 1);
        let slice = ParamSlice::new(vec![0.0, 2.0, 0.0], 0);
        let eps = 0.05;
        let p = newton_fixed_point(&d, &slice, &[-0.45, 0.0], -0.2, eps, &ContinuationConfig::default()).unwrap();
        // Section at t = 0 sees the orbit at its x2 ≈ x̄2 − ε cos t extreme.
        assert!((p.x[0] + 0.2f64.sqrt()).abs() < eps * eps);
        assert!((p.x[1] + eps).abs() < eps * eps);
        assert_eq!(p.stability, Stability::Unstable);
        let mu = slice.at(-0.2);
        let tr = integrate(&s, &p.x, &mu, eps, (0.0, s.period()), &IntegratorConfig::adaptive(1e-13)).unwrap();
        let gap = tr.last().iter().zip(&p.x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-9, "{gap}");
    }

    #[test]
    fn guiding_germs_classify() {
        let cfg = ContinuationConfig::default();
        let s = spec(FOLD);
        let d = Displacement::with_ell(&s, 1);
        let slice = ParamSlice::new(vec![0.0], 0);
        assert_eq!(classify_singularity(&d, &slice, &[0.0], 0.0, 0.0, &cfg).unwrap(), Singularity::Fold);
        assert_eq!(classify_singularity(&d, &slice, &[0.5], -0.25, 0.0, &cfg).unwrap(), Singularity::Regular);
        let s = spec(TRANSCRITICAL);
        let d = Displacement::with_ell(&s, 1);
        let slice = ParamSlice::new(vec![0.0, 1.0], 0);
        assert_eq!(
            classify_singularity(&d, &slice, &[0.0], 0.0, 0.0, &cfg).unwrap(),
            Singularity::TranscriticalDegenerate
        );
        let s = spec(PITCHFORK);
        let d = Displacement::with_ell(&s, 2);
        assert_eq!(
            classify_singularity(&d, &slice, &[0.0], 0.0, 0.0, &cfg).unwrap(),
            Singularity::PitchforkDegenerate
        );
    }

    #[test]
    fn scan_counts() {
        let s = spec(TRANSCRITICAL);
        let d = Displacement::with_ell(&s, 1);
        assert_eq!(count_fixed_points_scan(&d, (-0.5, 0.5), &[0.0, 1.0], 0.02, 1001).count, 0);
        assert_eq!(count_fixed_points_scan(&d, (-0.5, 0.5), &[0.0, 1.0], -0.02, 1001).count, 2);
        let s = spec(PITCHFORK);
        let d = Displacement::with_ell(&s, 2);
        assert_eq!(count_fixed_points_scan(&d, (-1.5, 1.5), &[-1.0, 1.0], 0.1, 1001).count, 3);
        assert_eq!(count_fixed_points_scan(&d, (-1.5, 1.5), &[0.0, 1.0], 0.1, 1001).count, 1);
    }

    #[test]
    fn fold_branch_turns_near_zero() {
        let s = spec(FOLD);
        let d = Displacement::with_ell(&s, 1);
        let slice = ParamSlice::new(vec![0.0], 0);
        let window = Window::uniform(1, (-1.0, 1.0), (-1.0, 1.0));
        let cfg = ContinuationConfig::default();
        let diagram = trace_diagram(&d, &slice, &window, 0.1, &cfg);
        assert_eq!(diagram.branches.len(), 1, "{:?}", diagram.notes);
        assert_eq!(diagram.folds.len(), 1);
        let fold = &diagram.folds[0];
        assert!(fold.mu.abs() < 0.15);
        assert_eq!(fold.classification, FoldClass::Fold);
        let (below, above) = fold.side_counts.unwrap();
        assert_eq!(below.abs_diff(above), 2);
        for p in &diagram.branches[0].points {
            assert!(p.residual < 1e-12 * (1.0 + p.x[0].abs()));
        }
        for w in diagram.branches[0].points.windows(2) {
            assert!(dist(&w[0].coords(), &w[1].coords()) <= cfg.h_max + 1e-12);
        }
        for mu in [-0.8, -0.3, 0.2, 0.6] {
            let scan = count_fixed_points_scan(&d, (-1.0, 1.0), &[mu], 0.1, 1001);
            assert_eq!(diagram.count_at(mu), scan.count, "mu={mu}");
        }
    }

    #[test]
    fn zero_eps_diagram_is_guiding_zero_set() {
        let s = spec(FOLD);
        let d = Displacement::with_ell(&s, 1);
        let slice = ParamSlice::new(vec![0.0], 0);
        let window = Window::uniform(1, (-1.0, 1.0), (-1.0, 1.0));
        let diagram = trace_diagram(&d, &slice, &window, 0.0, &ContinuationConfig::default());
        assert_eq!(diagram.branches.len(), 1);
        assert_eq!(diagram.folds.len(), 1);
        assert!(diagram.folds[0].mu.abs() < 1e-9);
        for p in &diagram.branches[0].points {
            assert!((p.x[0] * p.x[0] + p.mu).abs() < 1e-10);
            assert_eq!(p.stability, Stability::Nonhyperbolic);
        }
    }

    #[test]
    fn window_helpers() {
        let w = Window::uniform(2, (-1.0, 1.0), (0.0, 2.0));
        assert!(w.contains(&[0.0, 1.0], 2.0));
        assert!(!w.contains(&[0.0, 1.1], 1.0));
        let big = w.enlarged(1.1);
        assert!((big.mu_hi - 2.1).abs() < 1e-15 && (big.x_lo[0] + 1.1).abs() < 1e-15);
        assert_eq!(default_seed_mus(&w, 2), vec![0.5, 1.5]);
        assert_eq!(ParamSlice::new(vec![1.0, 2.0], 1).at(5.0), vec![1.0, 5.0]);
    }
}
