//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Runs without the libtest harness so the report prints unconditionally.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use avcat::builtins::builtin;
use avcat::continuation::{classify_singularity, newton_fixed_point, ContinuationConfig, ParamSlice, Singularity};
use avcat::expr::parse_system;
use avcat::melnikov::{averaged_g, averaged_g_shortcut, bell, detect_ell, melnikov_f, melnikov_f_bell, SampleGrid};
use avcat::ode::{integrate, IntegratorConfig};
use avcat::poincare::{DerivLevel, Displacement};
use avcat::surface::closeness;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// `per_axis` points on every state axis of the window times `per_axis` values of the continued μ.
fn slice_grid(name: &str, per_axis: usize) -> SampleGrid {
    let b = builtin(name).unwrap();
    let n = b.window.x_lo.len();
    let lin = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / (per_axis - 1) as f64;
    let slice = b.slice();
    let points = (0..per_axis.pow(n as u32 + 1))
        .map(|mut idx| {
            let mut z = Vec::new();
            for a in 0..n {
                z.push(lin(b.window.x_lo[a], b.window.x_hi[a], idx % per_axis));
                idx /= per_axis;
            }
            (z, slice.at(lin(b.window.mu_lo, b.window.mu_hi, idx)))
        })
        .collect();
    SampleGrid { points }
}

fn c1_tanh_closed_form() -> Outcome {
    let guide = parse_system("system guide\ndim n=1 k=1\nperiod T=2*pi\norder 1: x1^2 + mu1\nend\n").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = IntegratorConfig::adaptive(1e-13);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let mu: f64 = rng.gen_range(-1.0..-0.05);
        let a = (-mu).sqrt();
        let x0 = a * rng.gen_range(-0.9..0.9);
        let eps: f64 = rng.gen_range(0.01..0.5);
        let t: f64 = rng.gen_range(0.1..2.0 * std::f64::consts::PI);
        let exact = a * ((x0 / a).atanh() - eps * a * t).tanh();
        let got = integrate(&guide, &[x0], &[mu], eps, (0.0, t), &cfg).map_err(|e| e.to_string())?.last()[0];
        worst = worst.max((got - exact).abs() / exact.abs().max(1e-300));
    }
    ensure(worst < 1e-8, || format!("max relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.2e} over 20 tuples"))
}

fn c2_melnikov_cross_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for name in ["fold", "transcritical", "pitchfork"] {
        let spec = builtin(name).unwrap().spec();
        for (z, mu) in &slice_grid(name, 5).points {
            for i in 1..=3 {
                let jet = melnikov_f(&spec, i, z, mu).map_err(|e| e.to_string())?[0];
                let rec = melnikov_f_bell(&spec, i, z[0], mu).map_err(|e| e.to_string())?;
                worst = worst.max((jet - rec).abs());
            }
        }
    }
    ensure(worst < 1e-8, || format!("max disagreement {worst:e}"))?;
    Ok(format!("max |f_jet - f_bell| = {worst:.2e}"))
}

fn c3_averaged_identities() -> Outcome {
    for name in ["fold", "transcritical", "pitchfork"] {
        let spec = builtin(name).unwrap().spec();
        for (z, mu) in &slice_grid(name, 5).points {
            let g1 = averaged_g(&spec, 1, z, mu).map_err(|e| e.to_string())?;
            let f1 = melnikov_f(&spec, 1, z, mu).map_err(|e| e.to_string())?;
            ensure(g1[0] == f1[0] / spec.period(), || format!("{name}: g1 {} != f1/T {}", g1[0], f1[0] / spec.period()))?;
        }
    }
    let spec = builtin("pitchfork").unwrap().spec();
    let mut worst = 0.0f64;
    for (z, mu) in &slice_grid("pitchfork", 5).points {
        for i in [3, 4] {
            let short = averaged_g_shortcut(&spec, 2, i, z, mu).map_err(|e| e.to_string())?;
            let general = averaged_g(&spec, i, z, mu).map_err(|e| e.to_string())?;
            worst = worst.max((short[0] - general[0]).abs());
        }
    }
    ensure(worst < 1e-7, || format!("shortcut vs recursion {worst:e}"))?;
    Ok(format!("g1 = f1/T bitwise; shortcut vs recursion {worst:.2e}"))
}

fn c4_guiding_recovery() -> Outcome {
    let mut worst = 0.0f64;
    let mut track = |v: f64, want: f64| worst = worst.max((v - want).abs());
    let g = |name: &str, i: usize, z: &[f64], mu: &[f64]| averaged_g(&builtin(name).unwrap().spec(), i, z, mu).map(|v| v[0]);
    for (z, mu) in &slice_grid("fold", 5).points {
        track(g("fold", 1, z, mu).map_err(|e| e.to_string())?, z[0] * z[0] + mu[0]);
    }
    for (z, mu) in &slice_grid("transcritical", 5).points {
        track(g("transcritical", 1, z, mu).map_err(|e| e.to_string())?, z[0] * z[0] + mu[0] * z[0]);
    }
    for (z, mu) in &slice_grid("pitchfork", 5).points {
        track(g("pitchfork", 2, z, mu).map_err(|e| e.to_string())?, z[0].powi(3) + mu[0] * z[0]);
    }
    let mut at_origin = Vec::new();
    for c in [1.0, -0.5, 2.0] {
        let g2 = g("transcritical", 2, &[0.0], &[0.0, c]).map_err(|e| e.to_string())?;
        let g3 = g("pitchfork", 3, &[0.0], &[0.0, c]).map_err(|e| e.to_string())?;
        track(g2, c);
        track(g3, c);
        at_origin.push((g2, g3));
    }
    ensure(worst < 1e-6, || format!("max grid error {worst:e}"))?;
    Ok(format!("max grid error {worst:.2e}; (g2, g3) at origin for c = 1, -0.5, 2: {at_origin:.6?}"))
}

fn c5_ell_detection() -> Outcome {
    let mut found = Vec::new();
    for (name, want) in [("fold", 1), ("transcritical", 1), ("saddlefocus", 1), ("pitchfork", 2)] {
        let spec = builtin(name).unwrap().spec();
        let per_axis = if spec.dim() == 1 { 7 } else { 5 };
        let ell = detect_ell(&spec, &slice_grid(name, per_axis)).map_err(|e| e.to_string())?.ell;
        ensure(ell == want, || format!("{name}: detected {ell}, expected {want}"))?;
        found.push(format!("{name}={ell}"));
    }
    Ok(found.join(" "))
}

fn c6_closeness_rate() -> Outcome {
    let start = Instant::now();
    let mut slopes = Vec::new();
    for name in ["fold", "saddlefocus"] {
        let b = builtin(name).unwrap();
        let spec = b.spec();
        let disp = Displacement::with_ell(&spec, b.ell);
        let eps = [1e-3, 3e-3, 1e-2, 3e-2, 1e-1];
        let r = closeness(&disp, &b.slice(), &b.window, &eps, 200, &ContinuationConfig::default()).map_err(|e| format!("{e:?}"))?;
        ensure(r.epsilons.len() == eps.len(), || format!("{name}: epsilons dropped: {:?}", r.notes))?;
        ensure((0.8..=1.2).contains(&r.fitted_slope), || format!("{name}: slope {} (distances {:?})", r.fitted_slope, r.distances))?;
        slopes.push(format!("{name} slope {:.4}", r.fitted_slope));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs <= 300.0, || format!("took {secs:.0} s"))?;
    Ok(format!("{} in {secs:.0} s", slopes.join(", ")))
}

struct CliRun {
    stdout: Vec<u8>,
    report: Vec<u8>,
    code: Option<i32>,
}

impl CliRun {
    fn verdict(&self) -> Result<Value, String> {
        serde_json::from_slice(&self.report).map_err(|e| format!("unreadable verdict ({e}), exit {:?}", self.code))
    }
}

fn verify(check: &str, system: &str, out: &Path) -> CliRun {
    let o = Command::new(env!("CARGO_BIN_EXE_avcat"))
        .args(["verify", "--check", check, "--system", system, "--out"])
        .arg(out)
        .output()
        .expect("avcat runs");
    CliRun { stdout: o.stdout, report: std::fs::read(out.join("verify.json")).unwrap_or_default(), code: o.status.code() }
}

fn verdict_outcome(run: &CliRun) -> Outcome {
    let v = run.verdict()?;
    ensure(v["pass"] == Value::Bool(true) && run.code == Some(0), || format!("exit {:?}, failures {}", run.code, v["failures"]))?;
    Ok(String::new())
}

fn c7_transcritical(run: &CliRun) -> Outcome {
    verdict_outcome(run)?;
    let v = run.verdict()?;
    let sides = v["measured"]["sides"].as_array().cloned().unwrap_or_default();
    let summary: Vec<String> = sides
        .iter()
        .map(|s| {
            let mus: Vec<f64> = s["folds"].as_array().unwrap().iter().map(|f| f["mu"].as_f64().unwrap()).collect();
            format!("eps={} folds at {mus:.5?}", s["eps"])
        })
        .collect();
    Ok(summary.join("; "))
}

fn c8_pitchfork(run: &CliRun) -> Outcome {
    verdict_outcome(run)?;
    let v = run.verdict()?;
    let f = &v["measured"]["folds"][0];
    Ok(format!("fold at mu={:.5} (target {:.5}), counts {}", f["mu"].as_f64().unwrap(), v["measured"]["target"].as_f64().unwrap(), f["side_counts"]))
}

fn c9_fold_conditions(runs: &[&CliRun]) -> Outcome {
    let mut min_f = f64::INFINITY;
    let mut count = 0;
    for run in runs {
        verdict_outcome(run)?;
        let v = run.verdict()?;
        let m = &v["measured"];
        let folds: Vec<&Value> = match m["sides"].as_array() {
            Some(sides) => sides.iter().flat_map(|s| s["folds"].as_array().unwrap().iter()).collect(),
            None => m["folds"].as_array().unwrap().iter().collect(),
        };
        for f in folds {
            let (f1, f2) = (f["F1"].as_f64().unwrap(), f["F2"].as_f64().unwrap());
            ensure(f1.abs() > 1e-6 && f2.abs() > 1e-6, || format!("fold at mu={} has (F1, F2) = ({f1}, {f2})", f["mu"]))?;
            min_f = min_f.min(f1.abs()).min(f2.abs());
            count += 1;
        }
    }
    let cfg = ContinuationConfig::default();
    for (name, want) in
        [("fold", Singularity::Fold), ("transcritical", Singularity::TranscriticalDegenerate), ("pitchfork", Singularity::PitchforkDegenerate)]
    {
        let b = builtin(name).unwrap();
        let spec = b.spec();
        let disp = Displacement::with_ell(&spec, b.ell);
        let got = classify_singularity(&disp, &b.slice(), &[0.0], 0.0, 0.0, &cfg).map_err(|e| e.to_string())?;
        ensure(got == want, || format!("{name} germ classified {got:?}"))?;
    }
    Ok(format!("{count} folds, min(|F1|, |F2|) = {min_f:.4}; three germs classified"))
}

fn c10_saddle_focus_newton() -> Outcome {
    let b = builtin("saddlefocus").unwrap();
    let spec = b.spec();
    let disp = Displacement::with_ell(&spec, b.ell);
    let slice = ParamSlice::new(vec![-0.2, 2.0, 0.0], 0);
    let eps = 0.05;
    let target = [-(0.2f64).sqrt(), 0.0];
    let p = newton_fixed_point(&disp, &slice, &target, -0.2, eps, &ContinuationConfig::default()).map_err(|e| format!("{e:?}"))?;
    let end = integrate(&spec, &p.x, &slice.at(-0.2), eps, (0.0, spec.period()), &IntegratorConfig::adaptive(1e-13))
        .map_err(|e| e.to_string())?;
    let closure = end.last().iter().zip(&p.x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let dist = p.x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let detail = format!("fixed point ({:.7}, {:.7}), distance {dist:.6}, closure {closure:.1e}", p.x[0], p.x[1]);
    ensure(closure < 1e-9, || format!("{detail}: orbit does not close"))?;
    ensure(dist <= 0.05, || format!("{detail}: farther than 0.05 from the target"))?;
    Ok(detail)
}

/// Sum over set partitions of {0..j} with m blocks of the product of y[block size - 1].
fn partition_sum(j: usize, m: usize, y: &[f64]) -> f64 {
    fn rec(i: usize, j: usize, m: usize, blocks: &mut Vec<usize>, y: &[f64]) -> f64 {
        if i == j {
            return if blocks.len() == m { blocks.iter().map(|&s| y[s - 1]).product() } else { 0.0 };
        }
        let mut total = 0.0;
        for b in 0..blocks.len() {
            blocks[b] += 1;
            total += rec(i + 1, j, m, blocks, y);
            blocks[b] -= 1;
        }
        if blocks.len() < m {
            blocks.push(1);
            total += rec(i + 1, j, m, blocks, y);
            blocks.pop();
        }
        total
    }
    rec(0, j, m, &mut Vec::new(), y)
}

fn c11_derivative_hygiene() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for b in avcat::builtins::all() {
        let spec = b.spec();
        let disp = Displacement::with_ell(&spec, b.ell);
        let (n, k) = (spec.dim(), spec.params());
        for sample in 0..50 {
            let x: Vec<f64> = (0..n).map(|a| rng.gen_range(b.window.x_lo[a]..b.window.x_hi[a])).collect();
            let mu = b.slice().at(rng.gen_range(b.window.mu_lo..b.window.mu_hi));
            let eps = if sample % 5 == 0 { 0.0 } else { rng.gen_range(0.005..0.1) };
            let ev = disp.eval(&x, &mu, eps, DerivLevel::First).map_err(|e| e.to_string())?;
            let fd = |dir: usize, on_x: bool| -> Result<Vec<f64>, String> {
                let shift = |s: f64| {
                    let (mut xs, mut ms) = (x.clone(), mu.clone());
                    if on_x {
                        xs[dir] += s;
                    } else {
                        ms[dir] += s;
                    }
                    disp.value(&xs, &ms, eps).map_err(|e| e.to_string())
                };
                let (p, m) = (shift(h)?, shift(-h)?);
                Ok(p.iter().zip(&m).map(|(a, b)| (a - b) / (2.0 * h)).collect())
            };
            let scale = ev.jac_x.amax().max(ev.jac_mu.amax()).max(1e-3);
            for a in 0..n {
                let col = fd(a, true)?;
                for i in 0..n {
                    worst = worst.max((col[i] - ev.jac_x[(i, a)]).abs() / scale);
                }
            }
            for a in 0..k {
                let col = fd(a, false)?;
                for i in 0..n {
                    worst = worst.max((col[i] - ev.jac_mu[(i, a)]).abs() / scale);
                }
            }
        }
    }
    ensure(worst < 1e-5, || format!("Jacobian vs central differences {worst:e}"))?;
    let y = [2.0, -3.0, 5.0, 1.0, -7.0, 4.0];
    for j in 1..=6 {
        for m in 1..=j {
            let (table, direct) = (bell(j, m, &y[..j - m + 1]), partition_sum(j, m, &y));
            ensure(table == direct, || format!("B_{{{j},{m}}}: {table} != {direct}"))?;
        }
    }
    Ok(format!("max relative Jacobian error {worst:.2e}; Bell table exact for j <= 6"))
}

fn c12_determinism(a: &CliRun, b: &CliRun) -> Outcome {
    ensure(a.code == b.code, || format!("exit codes {:?} vs {:?}", a.code, b.code))?;
    ensure(!a.report.is_empty() && a.report == b.report, || "verify.json differs between runs".into())?;
    ensure(a.stdout == b.stdout, || "stdout differs between runs".into())?;
    Ok(format!("{} report bytes identical", a.report.len()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = |s: &str| tmp.path().join(s);
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        println!("criterion {n:>2} {name}: {} ({secs:.1} s) {}", if r.is_ok() { "PASS" } else { "FAIL" }, r.as_ref().unwrap_or_else(|e| e));
        results.push((n, name, r, secs));
    };
    record(1, "closed-form guiding flow", &mut c1_tanh_closed_form);
    record(2, "melnikov cross-oracle", &mut c2_melnikov_cross_oracle);
    record(3, "averaged-function identities", &mut c3_averaged_identities);
    record(4, "guiding-system recovery", &mut c4_guiding_recovery);
    record(5, "order detection", &mut c5_ell_detection);
    record(6, "closeness rate", &mut c6_closeness_rate);
    let trans = verify("transcritical-breakage", "transcritical", &dir("trans"));
    let pitch = [verify("pitchfork-cusp", "pitchfork", &dir("pitch-a")), verify("pitchfork-cusp", "pitchfork", &dir("pitch-b"))];
    let fold = verify("saddle-node-conditions", "fold", &dir("fold"));
    record(7, "transcritical breakage", &mut || c7_transcritical(&trans));
    record(8, "pitchfork cusp", &mut || c8_pitchfork(&pitch[0]));
    record(9, "fold conditions and germ classes", &mut || c9_fold_conditions(&[&trans, &pitch[0], &fold]));
    record(10, "saddle-focus periodic orbit", &mut c10_saddle_focus_newton);
    record(11, "derivative hygiene", &mut c11_derivative_hygiene);
    record(12, "determinism", &mut || c12_determinism(&pitch[0], &pitch[1]));
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
