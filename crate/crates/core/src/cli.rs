//! `avcat` command line: average, continue, sweep, verify and scan over the
//! bundled systems or a system file.
//!
//! Exit codes: 0 success, 1 usage error, 2 mathematical failure (no guiding
//! system, failed check), 3 numerical divergence.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::builtins::{builtin, Builtin};
use crate::continuation::{
    classify_singularity, count_fixed_points_scan, trace_diagram, ContinuationConfig, Diagram, FoldClass, ParamSlice,
    Singularity, Window,
};
use crate::expr::{parse_system, SystemSpec};
use crate::melnikov::{detect_ell, MelnikovError, SampleGrid};
use crate::ode::IntegrateError;
use crate::poincare::Displacement;
use crate::surface::{closeness, sweep_surface, SurfaceError, SweepMethod};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_MATH: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "avcat", version, about = "Averaging, displacement functions and fixed-point diagrams of periodically forced families")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Averaged functions on a grid and the guiding order ℓ.
    Average,
    /// Fixed-point branches and folds at each ε.
    Continue,
    /// Stacked diagrams over an ε list.
    Sweep,
    /// Run one of the built-in numerical checks.
    Verify,
    /// Brute-force root counts of Δ_ℓ (scalar systems).
    Scan,
}

#[derive(clap::Args, Debug, Default)]
struct Flags {
    /// Built-in name (fold, transcritical, pitchfork, saddlefocus) or a system file.
    #[arg(long, global = true)]
    system: Option<String>,
    /// Comma-separated ε values.
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    eps: Option<Vec<f64>>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    mu_min: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    mu_max: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    x_min: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    x_max: Option<f64>,
    /// Grid size (points per axis for `average`, x-grid for `scan`, μ-count for `sweep`).
    #[arg(long, global = true)]
    grid: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    check: Option<Check>,
    /// Comma-separated parameter vector; the continued component is overwritten.
    #[arg(long, global = true, value_delimiter = ',', allow_negative_numbers = true)]
    params: Option<Vec<f64>>,
    /// TOML file whose keys override the flags.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(ValueEnum, Serialize, Deserialize, Debug, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Closeness,
    TranscriticalBreakage,
    PitchforkCusp,
    SaddleNodeConditions,
}

/// Every knob of a run; flags fill it, a `--config` TOML file overrides it.
#[derive(Serialize, Deserialize, Debug, Clone, PartialEq, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub check: Option<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<Vec<f64>>,
    /// Index of the continued parameter.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice_index: Option<usize>,
    /// Reference sampling density for `verify closeness` and step bound for `sweep`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolution: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub newton_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nondegeneracy_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fold_tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hyperbolicity_tol: Option<f64>,
}

impl RunConfig {
    fn from_flags(f: &Flags) -> Self {
        RunConfig {
            system: f.system.clone(),
            eps: f.eps.clone(),
            mu_min: f.mu_min,
            mu_max: f.mu_max,
            x_min: f.x_min,
            x_max: f.x_max,
            grid: f.grid,
            out: f.out.clone(),
            check: f.check,
            params: f.params.clone(),
            ..Default::default()
        }
    }

    /// Keys present in `toml_text` replace those set by flags.
    pub fn overridden_by(&self, toml_text: &str) -> Result<Self, CliError> {
        let file: toml::Table = toml::from_str(toml_text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        let mut base = toml::Table::try_from(self).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        base.extend(file);
        base.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))
    }

    fn validate(&self) -> Result<(), CliError> {
        let tols = [
            ("newton_tol", self.newton_tol),
            ("nondegeneracy_tol", self.nondegeneracy_tol),
            ("fold_tol", self.fold_tol),
            ("hyperbolicity_tol", self.hyperbolicity_tol),
        ];
        for (name, v) in tols {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(CliError::Usage(format!("{name} must be positive, got {v}")));
                }
            }
        }
        if let (Some(a), Some(b)) = (self.mu_min, self.mu_max) {
            if a > b {
                return Err(CliError::Usage(format!("mu_min {a} exceeds mu_max {b}")));
            }
        }
        if let (Some(a), Some(b)) = (self.x_min, self.x_max) {
            if a >= b {
                return Err(CliError::Usage(format!("x_min {a} must be below x_max {b}")));
            }
        }
        if let Some(e) = self.eps.iter().flatten().find(|e| !e.is_finite()) {
            return Err(CliError::Usage(format!("non-finite epsilon {e}")));
        }
        Ok(())
    }

    fn continuation(&self) -> ContinuationConfig {
        let mut c = ContinuationConfig::default();
        if let Some(v) = self.newton_tol {
            c.newton_tol = v;
        }
        if let Some(v) = self.nondegeneracy_tol {
            c.nondegeneracy_tol = v;
        }
        if let Some(v) = self.fold_tol {
            c.fold_tol = v;
        }
        if let Some(v) = self.hyperbolicity_tol {
            c.hyperbolicity_tol = v;
        }
        c
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Math(String),
    Divergence(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Math(_) => EXIT_MATH,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Math(m) | CliError::Divergence(m) => m,
        }
    }
}

impl From<IntegrateError> for CliError {
    fn from(e: IntegrateError) -> Self {
        match e {
            IntegrateError::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Math(other.to_string()),
        }
    }
}

impl From<MelnikovError> for CliError {
    fn from(e: MelnikovError) -> Self {
        match e {
            MelnikovError::Integrate(i) => i.into(),
            other => CliError::Math(other.to_string()),
        }
    }
}

impl From<SurfaceError> for CliError {
    fn from(e: SurfaceError) -> Self {
        match e {
            SurfaceError::Precondition(m) => CliError::Usage(m),
            SurfaceError::Empty(notes) => CliError::Math(format!("no usable epsilon: {notes:?}")),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

/// The system under study plus everything resolved from config and catalog.
struct Setup {
    spec: SystemSpec,
    catalog: Option<Builtin>,
    slice: ParamSlice,
    window: Window,
    out: PathBuf,
    cont: ContinuationConfig,
}

impl Setup {
    fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let name = cfg.system.clone().unwrap_or_else(|| "fold".into());
        let catalog = builtin(&name);
        let spec = match &catalog {
            Some(b) => b.spec(),
            None => {
                let text = std::fs::read_to_string(&name)
                    .map_err(|e| CliError::Usage(format!("`{name}` is neither a built-in nor a readable file: {e}")))?;
                parse_system(&text).map_err(|e| CliError::Usage(format!("{name}: {e}")))?
            }
        };
        let (n, k) = (spec.dim(), spec.params());
        let index = cfg.slice_index.or(catalog.as_ref().map(|b| b.slice_index)).unwrap_or(0);
        if index >= k {
            return Err(CliError::Usage(format!("slice_index {index} outside k={k}")));
        }
        let base = match (&cfg.params, &catalog) {
            (Some(p), _) if p.len() == k => p.clone(),
            (Some(p), _) => return Err(CliError::Usage(format!("--params has {} values, system has k={k}", p.len()))),
            (None, Some(b)) => b.base_mu.clone(),
            (None, None) => vec![0.0; k],
        };
        let default = catalog.as_ref().map(|b| b.window.clone()).unwrap_or_else(|| Window::uniform(n, (-1.0, 1.0), (-1.0, 1.0)));
        let mu_lo = cfg.mu_min.unwrap_or(default.mu_lo);
        let mu_hi = cfg.mu_max.unwrap_or(default.mu_hi);
        let x_lo = cfg.x_min.map_or(default.x_lo.clone(), |v| vec![v; n]);
        let x_hi = cfg.x_max.map_or(default.x_hi.clone(), |v| vec![v; n]);
        if x_lo.iter().zip(&x_hi).any(|(a, b)| a >= b) {
            return Err(CliError::Usage("empty x window".into()));
        }
        let window = Window { x_lo, x_hi, mu_lo, mu_hi };
        let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("avcat-out"));
        std::fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
        Ok(Setup { spec, catalog, slice: ParamSlice::new(base, index), window, out, cont: cfg.continuation() })
    }

    fn continuation_window(&self) -> Result<Window, CliError> {
        if self.window.mu_lo >= self.window.mu_hi {
            return Err(CliError::Usage("continuation needs mu_min < mu_max".into()));
        }
        Ok(self.window.clone())
    }

    /// Averaging grid: `per_axis` points per state axis times `per_axis` values of the continued μ.
    fn grid(&self, per_axis: usize) -> SampleGrid {
        let n = self.spec.dim();
        let mut points = Vec::new();
        let lin = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (per_axis - 1) as f64;
        for idx in 0..per_axis.pow(n as u32 + 1) {
            let mut rem = idx;
            let mut z = Vec::with_capacity(n);
            for a in 0..n {
                z.push(lin(self.window.x_lo[a], self.window.x_hi[a], rem % per_axis));
                rem /= per_axis;
            }
            let mu = self.slice.at(lin(self.window.mu_lo, self.window.mu_hi, rem));
            points.push((z, mu));
        }
        SampleGrid { points }
    }

    fn ell(&self) -> Result<usize, CliError> {
        match &self.catalog {
            Some(b) => Ok(b.ell),
            None => Ok(detect_ell(&self.spec, &self.grid(5))?.ell),
        }
    }

    fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let path = self.out.join(name);
        std::fs::write(&path, contents).map_err(|e| io_err(&path, e))
    }
}

fn pretty(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable report");
    s.push('\n');
    s
}

fn cmd_average(cfg: &RunConfig, setup: &Setup) -> Result<String, CliError> {
    let per_axis = cfg.grid.unwrap_or(11).max(5);
    let avg = detect_ell(&setup.spec, &setup.grid(per_axis))?;
    let (n, k) = (setup.spec.dim(), setup.spec.params());
    let mut csv = String::from("order");
    for i in 1..=n {
        write!(csv, ",z{i}").unwrap();
    }
    for j in 1..=k {
        write!(csv, ",mu{j}").unwrap();
    }
    for i in 1..=n {
        write!(csv, ",g{i}").unwrap();
    }
    csv.push('\n');
    for order in 1..=avg.ell {
        for s in &avg.samples {
            write!(csv, "{order}").unwrap();
            for v in s.z.iter().chain(&s.mu).chain(&s.g[order - 1]) {
                write!(csv, ",{v:.16e}").unwrap();
            }
            csv.push('\n');
        }
    }
    setup.write("average.csv", &csv)?;
    let summary = json!({
        "system": setup.spec.name(),
        "ell": avg.ell,
        "period": avg.period,
        "sup_norms": avg.sup_g,
        "threshold": avg.threshold,
    });
    let text = pretty(&summary);
    setup.write("average.json", &text)?;
    Ok(text)
}

fn eps_list(cfg: &RunConfig, default: &[f64]) -> Vec<f64> {
    cfg.eps.clone().unwrap_or_else(|| default.to_vec())
}

fn fold_json(d: &Diagram) -> Vec<serde_json::Value> {
    d.folds
        .iter()
        .map(|f| {
            json!({
                "eps": d.eps, "mu": f.mu, "x": f.x, "F1": f.f1, "F2": f.f2,
                "side_counts": f.side_counts, "classification": f.classification,
            })
        })
        .collect()
}

fn cmd_continue(cfg: &RunConfig, setup: &Setup) -> Result<String, CliError> {
    let ell = setup.ell()?;
    let disp = Displacement::with_ell(&setup.spec, ell);
    let window = setup.continuation_window()?;
    let n = setup.spec.dim();
    let mut csv = String::from("s,mu,eps");
    for i in 1..=n {
        write!(csv, ",x{i}").unwrap();
    }
    csv.push_str(",stability,test_fold");
    for i in 1..=n {
        write!(csv, ",eig_modulus{i}").unwrap();
    }
    csv.push('\n');
    let mut folds = Vec::new();
    let mut notes = Vec::new();
    for eps in eps_list(cfg, &[0.1]) {
        let d = trace_diagram(&disp, &setup.slice, &window, eps, &setup.cont);
        for b in &d.branches {
            for p in &b.points {
                write!(csv, "{:.16e},{:.16e},{:.16e}", p.s, p.mu, p.eps).unwrap();
                for v in &p.x {
                    write!(csv, ",{v:.16e}").unwrap();
                }
                write!(csv, ",{},{:.16e}", p.stability.as_str(), p.test_fold).unwrap();
                for l in &p.eigs {
                    write!(csv, ",{:.16e}", l.norm()).unwrap();
                }
                csv.push('\n');
            }
        }
        folds.extend(fold_json(&d));
        notes.extend(d.notes.iter().map(|m| format!("eps={eps}: {m}")));
        notes.extend(
            d.branches.iter().map(|b| format!("eps={eps}: branch of {} points, ends: {}; {}", b.points.len(), b.ends[0], b.ends[1])),
        );
    }
    setup.write("branches.csv", &csv)?;
    let text = pretty(&json!({ "system": setup.spec.name(), "ell": ell, "folds": folds, "notes": notes }));
    setup.write("folds.json", &text)?;
    Ok(text)
}

fn cmd_sweep(cfg: &RunConfig, setup: &Setup) -> Result<String, CliError> {
    let ell = setup.ell()?;
    let disp = Displacement::with_ell(&setup.spec, ell);
    let window = setup.continuation_window()?;
    let resolution = cfg.resolution.or(cfg.grid).unwrap_or(50);
    let eps = eps_list(cfg, &[0.0, 0.1, 0.2, 0.3]);
    let cloud = sweep_surface(&disp, &setup.slice, &window, &eps, resolution, SweepMethod::Continuation, &setup.cont)?;
    setup.write("surface.csv", &cloud.to_csv())?;
    let text = pretty(&json!({
        "system": setup.spec.name(), "ell": ell, "points": cloud.points.len(), "notes": cloud.notes,
    }));
    setup.write("sweep.json", &text)?;
    Ok(text)
}

fn cmd_scan(cfg: &RunConfig, setup: &Setup) -> Result<String, CliError> {
    if setup.spec.dim() != 1 {
        return Err(CliError::Usage("scan needs a scalar system (n = 1)".into()));
    }
    let ell = setup.ell()?;
    let disp = Displacement::with_ell(&setup.spec, ell);
    let grid = cfg.grid.unwrap_or(1001);
    if grid < 1001 {
        return Err(CliError::Usage(format!("scan grid must be at least 1001, got {grid}")));
    }
    let w = &setup.window;
    let mus: Vec<f64> = if w.mu_lo == w.mu_hi {
        vec![w.mu_lo]
    } else {
        (0..11).map(|i| w.mu_lo + (w.mu_hi - w.mu_lo) * i as f64 / 10.0).collect()
    };
    let mut csv = String::from("eps,mu,count,skipped,roots\n");
    let mut rows = Vec::new();
    for eps in eps_list(cfg, &[0.1]) {
        for &mu in &mus {
            let r = count_fixed_points_scan(&disp, (w.x_lo[0], w.x_hi[0]), &setup.slice.at(mu), eps, grid);
            let roots: Vec<String> = r.roots.iter().map(|x| format!("{x:.16e}")).collect();
            writeln!(csv, "{eps:.16e},{mu:.16e},{},{},{}", r.count, r.skipped, roots.join(" ")).unwrap();
            rows.push(json!({ "eps": eps, "mu": mu, "count": r.count, "skipped": r.skipped }));
        }
    }
    setup.write("scan.csv", &csv)?;
    let text = pretty(&json!({ "system": setup.spec.name(), "ell": ell, "grid": grid, "counts": rows }));
    setup.write("scan.json", &text)?;
    Ok(text)
}

/// Outcome of a `verify` check.
#[derive(Serialize, Debug, Clone, PartialEq)]
pub struct Verdict {
    pub check: Check,
    pub system: String,
    pub pass: bool,
    pub measured: serde_json::Value,
    pub failures: Vec<String>,
}

fn within(value: f64, target: f64, rel: f64) -> bool {
    (value - target).abs() <= rel * target.abs()
}

fn check_closeness(cfg: &RunConfig, setup: &Setup, disp: &Displacement<'_>) -> Result<(serde_json::Value, Vec<String>), CliError> {
    let eps = eps_list(cfg, &[1e-3, 3e-3, 1e-2, 3e-2, 1e-1]);
    let resolution = cfg.resolution.unwrap_or(200);
    let report = closeness(disp, &setup.slice, &setup.window, &eps, resolution, &setup.cont)?;
    setup.write(
        "closeness.json",
        &pretty(&json!({ "epsilons": report.epsilons, "distances": report.distances, "fitted_slope": report.fitted_slope })),
    )?;
    setup.write("closeness.dat", &report.to_dat())?;
    let mut failures = Vec::new();
    if !(0.8..=1.2).contains(&report.fitted_slope) {
        failures.push(format!("fitted slope {} outside [0.8, 1.2]", report.fitted_slope));
    }
    Ok((serde_json::to_value(&report).expect("serializable"), failures))
}

fn scan_count(disp: &Displacement<'_>, setup: &Setup, mu: f64, eps: f64) -> usize {
    let w = &setup.window;
    count_fixed_points_scan(disp, (w.x_lo[0], w.x_hi[0]), &setup.slice.at(mu), eps, setup.cont.scan_grid).count
}

fn require_scalar_with_c(setup: &Setup, what: &str) -> Result<f64, CliError> {
    if setup.spec.dim() != 1 || setup.spec.params() < 2 {
        return Err(CliError::Usage(format!("{what} needs a scalar system with a second parameter c")));
    }
    Ok(setup.slice.base[1])
}

/// Which sign of ε carries the fold pair is read off the diagrams, not assumed.
fn check_transcritical(cfg: &RunConfig, setup: &Setup, disp: &Displacement<'_>) -> Result<(serde_json::Value, Vec<String>), CliError> {
    let c = require_scalar_with_c(setup, "transcritical-breakage")?;
    let size = eps_list(cfg, &[0.02])[0].abs();
    if size == 0.0 {
        return Err(CliError::Usage("transcritical-breakage needs a nonzero |eps|".into()));
    }
    let diagrams: Vec<Diagram> =
        [size, -size].iter().map(|&e| trace_diagram(disp, &setup.slice, &setup.window, e, &setup.cont)).collect();
    let mut failures = Vec::new();
    let fold_side = match (diagrams[0].folds.is_empty(), diagrams[1].folds.is_empty()) {
        (false, true) => Some(0),
        (true, false) => Some(1),
        _ => {
            failures.push(format!(
                "expected folds on exactly one sign of eps, found {} and {}",
                diagrams[0].folds.len(),
                diagrams[1].folds.len()
            ));
            None
        }
    };
    let mut sides = Vec::new();
    for (side, d) in diagrams.iter().enumerate() {
        let eps = d.eps;
        let mut counts = Vec::new();
        if Some(side) == fold_side {
            let target = 2.0 * (eps * c).abs().sqrt();
            let mus: Vec<f64> = d.folds.iter().map(|f| f.mu).collect();
            let ok = mus.len() == 2 && within(mus[0], -target, 0.1) && within(mus[1], target, 0.1);
            if !ok {
                failures.push(format!("eps={eps}: folds at {mus:?}, expected two near ±{target}"));
            }
            if let [lo, hi] = mus[..] {
                for mu in [0.75 * lo + 0.25 * hi, 0.5 * (lo + hi), 0.25 * lo + 0.75 * hi] {
                    let (scan, cont) = (scan_count(disp, setup, mu, eps), d.count_at(mu));
                    counts.push(json!({ "mu": mu, "scan": scan, "continuation": cont }));
                    if scan != 0 || cont != 0 {
                        failures.push(format!("eps={eps}, mu={mu}: {scan} (scan) / {cont} (continuation) fixed points between the folds"));
                    }
                }
            }
        } else if fold_side.is_some() {
            for i in 0..=10 {
                let mu = -0.5 + 0.1 * i as f64;
                let (scan, cont) = (scan_count(disp, setup, mu, eps), d.count_at(mu));
                counts.push(json!({ "mu": mu, "scan": scan, "continuation": cont }));
                if scan != 2 || cont != 2 {
                    failures.push(format!("eps={eps}, mu={mu}: {scan} (scan) / {cont} (continuation) fixed points, expected 2"));
                }
            }
            let flips = d.branches.iter().flat_map(|b| b.points.windows(2)).filter(|p| p[0].test_fold * p[1].test_fold <= 0.0).count();
            if flips > 0 {
                failures.push(format!("eps={eps}: test function vanishes {flips} times on the fold-free side"));
            }
        }
        sides.push(json!({ "eps": eps, "fold_side": Some(side) == fold_side, "folds": fold_json(d), "counts": counts }));
    }
    Ok((json!({ "c": c, "sides": sides }), failures))
}

fn check_pitchfork(cfg: &RunConfig, setup: &Setup, disp: &Displacement<'_>) -> Result<(serde_json::Value, Vec<String>), CliError> {
    let c = require_scalar_with_c(setup, "pitchfork-cusp")?;
    let eps = eps_list(cfg, &[0.1])[0];
    let d = trace_diagram(disp, &setup.slice, &setup.window, eps, &setup.cont);
    let target = -(27.0f64 / 4.0).cbrt() * (eps * c).abs().powf(2.0 / 3.0);
    let mut failures = Vec::new();
    match d.folds.as_slice() {
        [f] => {
            if !within(f.mu, target, 0.1) {
                failures.push(format!("fold at {} not within 10% of {target}", f.mu));
            }
            let (below, above) = f.side_counts.unwrap_or((0, 0));
            let (lo, hi) = if eps * c > 0.0 { (3, 1) } else { (1, 3) };
            if (below, above) != (lo, hi) && (below, above) != (hi, lo) {
                failures.push(format!("root counts {below} -> {above} across the fold, expected 3 and 1"));
            }
        }
        folds => failures.push(format!("{} folds, expected exactly one", folds.len())),
    }
    let w = &setup.window;
    let persistent = d.branches.iter().any(|b| {
        let (lo, hi) = b.points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(p.mu), h.max(p.mu)));
        let one_sign = b.points.windows(2).all(|p| p[0].test_fold * p[1].test_fold > 0.0);
        lo <= w.mu_lo + 1e-9 && hi >= w.mu_hi - 1e-9 && one_sign
    });
    if !persistent {
        failures.push("no fold-free branch spans the whole μ window".into());
    }
    Ok((json!({ "eps": eps, "c": c, "target": target, "folds": fold_json(&d), "persistent_branch": persistent }), failures))
}

fn check_saddle_node(cfg: &RunConfig, setup: &Setup, disp: &Displacement<'_>) -> Result<(serde_json::Value, Vec<String>), CliError> {
    let eps = eps_list(cfg, &[0.1])[0];
    let tol = setup.cont.nondegeneracy_tol;
    let mut failures = Vec::new();
    let d = trace_diagram(disp, &setup.slice, &setup.window, eps, &setup.cont);
    if d.folds.is_empty() {
        failures.push(format!("no fold at eps={eps}"));
    }
    for f in &d.folds {
        if !(f.f1 > tol && f.f2 > tol && f.classification == FoldClass::Fold) {
            failures.push(format!("fold at mu={} fails (F1, F2) = ({}, {})", f.mu, f.f1, f.f2));
        }
    }
    let guiding = trace_diagram(disp, &setup.slice, &setup.window, 0.0, &setup.cont);
    let mut germs = Vec::new();
    for f in &guiding.folds {
        let g = classify_singularity(disp, &setup.slice, &f.x, f.mu, 0.0, &setup.cont)?;
        if g != Singularity::Fold {
            failures.push(format!("guiding germ at mu={} classified {g:?}", f.mu));
        }
        germs.push(json!({ "mu": f.mu, "x": f.x, "germ": g }));
    }
    if germs.is_empty() {
        failures.push("no guiding fold at eps=0".into());
    }
    Ok((json!({ "eps": eps, "folds": fold_json(&d), "guiding_germs": germs }), failures))
}

fn cmd_verify(cfg: &RunConfig, setup: &Setup) -> Result<(String, bool), CliError> {
    let check = cfg.check.ok_or_else(|| CliError::Usage("verify needs --check".into()))?;
    let ell = setup.ell()?;
    let disp = Displacement::with_ell(&setup.spec, ell);
    setup.continuation_window()?;
    let (measured, failures) = match check {
        Check::Closeness => check_closeness(cfg, setup, &disp)?,
        Check::TranscriticalBreakage => check_transcritical(cfg, setup, &disp)?,
        Check::PitchforkCusp => check_pitchfork(cfg, setup, &disp)?,
        Check::SaddleNodeConditions => check_saddle_node(cfg, setup, &disp)?,
    };
    let verdict = Verdict { check, system: setup.spec.name().to_string(), pass: failures.is_empty(), measured, failures };
    let text = pretty(&verdict);
    setup.write("verify.json", &text)?;
    Ok((text, verdict.pass))
}

fn log_line(out: &Path, line: &str) {
    let stamp = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    if let Ok(mut f) = std::fs::OpenOptions::new().create(true).append(true).open(out.join("run.log")) {
        let _ = writeln!(f, "{stamp:.3} {line}");
    }
}

fn execute(command: Command, cfg: &RunConfig) -> Result<(String, bool), CliError> {
    cfg.validate()?;
    let setup = Setup::new(cfg)?;
    log_line(&setup.out, &format!("start {command:?} {}", serde_json::to_string(cfg).unwrap_or_default()));
    let result = match command {
        Command::Average => cmd_average(cfg, &setup).map(|t| (t, true)),
        Command::Continue => cmd_continue(cfg, &setup).map(|t| (t, true)),
        Command::Sweep => cmd_sweep(cfg, &setup).map(|t| (t, true)),
        Command::Scan => cmd_scan(cfg, &setup).map(|t| (t, true)),
        Command::Verify => cmd_verify(cfg, &setup),
    };
    let status = match &result {
        Ok((_, pass)) => format!("done pass={pass}"),
        Err(e) => format!("error code={} {}", e.code(), e.message()),
    };
    log_line(&setup.out, &status);
    result
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn std::io::Write, stderr: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(stderr, "{}", e.render()) } else { write!(stdout, "{}", e.render()) };
            return code;
        }
    };
    let mut cfg = RunConfig::from_flags(&cli.flags);
    if let Some(path) = &cli.flags.config {
        let merged = std::fs::read_to_string(path).map_err(|e| io_err(path, e)).and_then(|t| cfg.overridden_by(&t));
        match merged {
            Ok(c) => cfg = c,
            Err(e) => {
                let _ = writeln!(stderr, "error: {}", e.message());
                return e.code();
            }
        }
    }
    match execute(cli.command, &cfg) {
        Ok((text, pass)) => {
            let _ = write!(stdout, "{text}");
            if pass {
                EXIT_OK
            } else {
                EXIT_MATH
            }
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {}", e.message());
            e.code()
        }
    }
}
