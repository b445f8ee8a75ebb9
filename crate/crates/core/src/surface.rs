//! Sampled catastrophe surfaces: per-ε bifurcation diagrams stacked over an
//! ε list, and the distance from perturbed diagrams to the unperturbed one.

use serde::Serialize;
use thiserror::Error;

use crate::continuation::{
    count_fixed_points_scan, default_seed_mus, trace_diagram_from, ContinuationConfig, Diagram, GuidingRoots, ParamSlice,
    Window,
};
use crate::poincare::Displacement;

/// Largest admissible ε for the closeness fit.
pub const CLOSENESS_EPS_MAX: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Continuation,
    Scan,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Continuation => "continuation",
            Provenance::Scan => "scan",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CloudPoint {
    pub eps: f64,
    /// Full parameter vector; the continued component varies.
    pub mu: Vec<f64>,
    pub x: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagramCloud {
    pub points: Vec<CloudPoint>,
    pub window: Window,
    pub slice_index: usize,
    pub notes: Vec<String>,
}

impl DiagramCloud {
    /// `eps,mu,x1..xn,provenance`, sorted by ε then μ then x.
    pub fn to_csv(&self) -> String {
        let n = self.window.x_lo.len();
        let mut s = String::from("eps,mu");
        for i in 1..=n {
            s.push_str(&format!(",x{i}"));
        }
        s.push_str(",provenance\n");
        for p in &self.points {
            s.push_str(&format!("{:.16e},{:.16e}", p.eps, p.mu[self.slice_index]));
            for v in &p.x {
                s.push_str(&format!(",{v:.16e}"));
            }
            s.push_str(&format!(",{}\n", p.provenance.as_str()));
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMethod {
    Continuation,
    /// Root scans on `resolution` μ values (scalar systems only).
    Scan,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SurfaceError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("every epsilon was dropped: {0:?}")]
    Empty(Vec<String>),
}

/// Runs `job` for each ε on its own thread; output follows `eps_list` order.
fn per_eps<T: Send>(eps_list: &[f64], job: impl Fn(f64) -> T + Sync) -> Vec<T> {
    std::thread::scope(|scope| {
        let job = &job;
        let handles: Vec<_> = eps_list.iter().map(|&e| scope.spawn(move || job(e))).collect();
        handles.into_iter().map(|h| h.join().expect("slice worker panicked")).collect()
    })
}

fn step_config(window: &Window, resolution: usize, base: &ContinuationConfig) -> ContinuationConfig {
    let span = window.mu_hi - window.mu_lo;
    let h = (span / resolution.max(1) as f64).min(base.h_max);
    ContinuationConfig { h_max: h, h0: base.h0.min(h), ..base.clone() }
}

fn diagram_points(d: &Diagram, slice: &ParamSlice) -> Vec<CloudPoint> {
    d.branches
        .iter()
        .flat_map(|b| &b.points)
        .map(|p| CloudPoint { eps: d.eps, mu: slice.at(p.mu), x: p.x.clone(), provenance: Provenance::Continuation })
        .collect()
}

/// Fixed points of `Π` over `window` for every ε in `eps_list`.
///
/// For ε = 0 the slice is the zero set of `g_ℓ` (the displacement reduces
/// to `T·g_ℓ` there), so the trivial plane of fixed points never appears.
pub fn sweep_surface(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    window: &Window,
    eps_list: &[f64],
    resolution: usize,
    method: SweepMethod,
    cfg: &ContinuationConfig,
) -> Result<DiagramCloud, SurfaceError> {
    let n = window.x_lo.len();
    if method == SweepMethod::Scan && n != 1 {
        return Err(SurfaceError::Precondition("scan sweeps need n = 1".into()));
    }
    if eps_list.iter().any(|e| !e.is_finite()) {
        return Err(SurfaceError::Precondition("non-finite epsilon".into()));
    }
    let mut eps_sorted = eps_list.to_vec();
    eps_sorted.sort_by(f64::total_cmp);
    eps_sorted.dedup();
    let step_cfg = step_config(window, resolution, cfg);
    let roots = match method {
        SweepMethod::Continuation => {
            GuidingRoots::compute(disp, slice, window, &default_seed_mus(window, cfg.seed_count), cfg)
        }
        SweepMethod::Scan => GuidingRoots { per_mu: Vec::new() },
    };
    let slices = per_eps(&eps_sorted, |eps| match method {
        SweepMethod::Continuation => {
            let d = trace_diagram_from(disp, slice, window, eps, &roots, &step_cfg);
            (diagram_points(&d, slice), d.notes)
        }
        SweepMethod::Scan => {
            let mut pts = Vec::new();
            let mut notes = Vec::new();
            let m = resolution.max(2);
            for j in 0..m {
                let mu = window.mu_lo + (window.mu_hi - window.mu_lo) * j as f64 / (m - 1) as f64;
                let full = slice.at(mu);
                let r = count_fixed_points_scan(disp, (window.x_lo[0], window.x_hi[0]), &full, eps, cfg.scan_grid);
                if r.skipped > 0 {
                    notes.push(format!("eps={eps} mu={mu}: {} divergent cells skipped", r.skipped));
                }
                pts.extend(r.roots.into_iter().map(|x| CloudPoint {
                    eps,
                    mu: full.clone(),
                    x: vec![x],
                    provenance: Provenance::Scan,
                }));
            }
            (pts, notes)
        }
    });
    let mut points = Vec::new();
    let mut notes = Vec::new();
    for (p, n) in slices {
        points.extend(p);
        notes.extend(n);
    }
    let key = slice.index;
    points.sort_by(|a, b| {
        a.eps.total_cmp(&b.eps).then(a.mu[key].total_cmp(&b.mu[key])).then_with(|| {
            a.x.iter().zip(&b.x).map(|(p, q)| p.total_cmp(q)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    Ok(DiagramCloud { points, window: window.clone(), slice_index: key, notes })
}

/// Largest defining residual over the cloud, re-evaluated from scratch:
/// `|Δ_ℓ|` for ε ≠ 0 and `|g_ℓ| = |Δ_ℓ|/T` on the ε = 0 slice.
pub fn reverify(disp: &Displacement<'_>, cloud: &DiagramCloud) -> f64 {
    cloud
        .points
        .iter()
        .map(|p| {
            let scale = if p.eps == 0.0 { disp.period() } else { 1.0 };
            match disp.value(&p.x, &p.mu, p.eps) {
                Ok(v) => v.iter().fold(0.0f64, |a, b| a.max(b.abs())) / scale,
                Err(_) => f64::INFINITY,
            }
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClosenessReport {
    pub epsilons: Vec<f64>,
    pub distances: Vec<f64>,
    pub fitted_slope: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl ClosenessReport {
    /// Two columns `eps distance` for external plotting.
    pub fn to_dat(&self) -> String {
        let mut s = String::from("# eps distance\n");
        for (e, d) in self.epsilons.iter().zip(&self.distances) {
            s.push_str(&format!("{e:.16e} {d:.16e}\n"));
        }
        s
    }
}

/// Polyline in `(x, μ)` coordinates.
type Polyline = Vec<Vec<f64>>;

fn polylines(d: &Diagram) -> Vec<Polyline> {
    d.branches
        .iter()
        .map(|b| {
            b.points
                .iter()
                .map(|p| {
                    let mut y = p.x.clone();
                    y.push(p.mu);
                    y
                })
                .collect()
        })
        .collect()
}

fn point_segment(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = b.iter().zip(a).map(|(u, v)| u - v).collect();
    let ap: Vec<f64> = p.iter().zip(a).map(|(u, v)| u - v).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 > 0.0 { (ap.iter().zip(&ab).map(|(u, v)| u * v).sum::<f64>() / len2).clamp(0.0, 1.0) } else { 0.0 };
    ap.iter().zip(&ab).map(|(u, v)| (u - t * v).powi(2)).sum::<f64>().sqrt()
}

/// Distance from `p` to the nearest polyline.
fn distance_to(p: &[f64], lines: &[Polyline]) -> f64 {
    let mut best = f64::INFINITY;
    for line in lines {
        if line.len() == 1 {
            best = best.min(point_segment(p, &line[0], &line[0]));
        }
        for w in line.windows(2) {
            best = best.min(point_segment(p, &w[0], &w[1]));
        }
    }
    best
}

/// One-sided Hausdorff distance `sup_{p ∈ D_ε} dist(p, D_{ℓ,0})`.
pub fn one_sided_hausdorff(perturbed: &Diagram, reference: &Diagram) -> f64 {
    let lines = polylines(reference);
    polylines(perturbed).iter().flatten().map(|p| distance_to(p, &lines)).fold(0.0, f64::max)
}

/// Least-squares slope of `log d` against `log ε`.
pub fn loglog_slope(eps: &[f64], dist: &[f64]) -> f64 {
    let xs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = dist.iter().map(|d| d.ln()).collect();
    let m = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / m, ys.iter().sum::<f64>() / m);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Rate at which `D_ε` approaches `D_{ℓ,0}` as ε shrinks.
///
/// `resolution` sets the arclength step of the ε = 0 reference
/// (`μ-span / resolution`), which is traced in a 10% larger window so that
/// perturbed points near the boundary keep a nearby partner.
pub fn closeness(
    disp: &Displacement<'_>,
    slice: &ParamSlice,
    window: &Window,
    eps_list: &[f64],
    resolution: usize,
    cfg: &ContinuationConfig,
) -> Result<ClosenessReport, SurfaceError> {
    if eps_list.len() < 4 {
        return Err(SurfaceError::Precondition(format!("need at least 4 epsilons, got {}", eps_list.len())));
    }
    if let Some(e) = eps_list.iter().find(|e| !(**e > 0.0 && **e <= CLOSENESS_EPS_MAX)) {
        return Err(SurfaceError::Precondition(format!("epsilon {e} outside (0, {CLOSENESS_EPS_MAX}]")));
    }
    let (lo, hi) = eps_list.iter().fold((f64::INFINITY, 0.0f64), |(l, h), e| (l.min(*e), h.max(*e)));
    if hi / lo < 100.0 * (1.0 - 1e-12) {
        return Err(SurfaceError::Precondition("epsilons must span at least two decades".into()));
    }
    let mut eps_sorted = eps_list.to_vec();
    eps_sorted.sort_by(f64::total_cmp);
    eps_sorted.dedup();

    let big = window.enlarged(1.1);
    let ref_cfg = step_config(&big, resolution, &ContinuationConfig { side_counts: false, ..cfg.clone() });
    let roots = GuidingRoots::compute(disp, slice, &big, &default_seed_mus(window, cfg.seed_count), cfg);
    let reference = trace_diagram_from(disp, slice, &big, 0.0, &roots, &ref_cfg);
    let mut notes: Vec<String> = reference.notes.iter().map(|n| format!("eps=0: {n}")).collect();
    if reference.branches.is_empty() {
        return Err(SurfaceError::Empty(notes));
    }
    let quick = ContinuationConfig { side_counts: false, ..cfg.clone() };
    let inner = roots.restricted(window);
    let diagrams = per_eps(&eps_sorted, |eps| trace_diagram_from(disp, slice, window, eps, &inner, &quick));
    let mut epsilons = Vec::new();
    let mut distances = Vec::new();
    for d in diagrams {
        notes.extend(d.notes.iter().map(|n| format!("eps={}: {n}", d.eps)));
        if d.branches.iter().all(|b| b.points.is_empty()) {
            notes.push(format!("eps={}: empty diagram in window, dropped", d.eps));
            continue;
        }
        epsilons.push(d.eps);
        distances.push(one_sided_hausdorff(&d, &reference));
    }
    if epsilons.len() < 2 {
        return Err(SurfaceError::Empty(notes));
    }
    let fitted_slope = loglog_slope(&epsilons, &distances);
    Ok(ClosenessReport { epsilons, distances, fitted_slope, notes })
}
