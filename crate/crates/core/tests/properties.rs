use avcat::expr::{parse_expr, parse_system, Env, Scope};
use avcat::melnikov::bell;
use avcat::ode::{integrate, IntegratorConfig};
use avcat::scalar::{Dual, Jet, Scalar};
use proptest::prelude::*;

const TAU: f64 = 2.0 * std::f64::consts::PI;

fn guide() -> avcat::expr::SystemSpec {
    parse_system("system guide\ndim n=1 k=1\nperiod T=2*pi\norder 1: x1^2 + mu1\nend\n").unwrap()
}

/// Solution of x' = ε(x² + μ) for μ < 0 and |x₀| < √−μ.
fn guide_exact(x0: f64, mu: f64, eps: f64, t: f64) -> f64 {
    let a = (-mu).sqrt();
    a * ((x0 / a).atanh() - eps * a * t).tanh()
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate().take(a.len() - i) {
            out[i + j] += x * y;
        }
    }
    out
}

fn set_partition_sum(j: usize, m: usize, y: &[f64]) -> f64 {
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

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn jet_product_is_truncated_polynomial_product(
        a in prop::collection::vec(-3.0f64..3.0, 1..7),
        seed in prop::collection::vec(-3.0f64..3.0, 7),
    ) {
        let b = &seed[..a.len()];
        let prod = Jet::new(a.clone()).try_mul(&Jet::new(b.to_vec())).unwrap();
        let want = convolve(&a, b);
        for (i, w) in want.iter().enumerate() {
            prop_assert!((prod.coeff(i) - w).abs() <= 1e-12 * (1.0 + w.abs()));
        }
    }

    #[test]
    fn jet_pythagorean_identity(c in prop::collection::vec(-2.0f64..2.0, 1..7)) {
        let j = Jet::new(c.clone());
        let one = j.sin() * j.sin() + j.cos() * j.cos();
        prop_assert!((one.coeff(0) - 1.0).abs() < 1e-12);
        for i in 1..c.len() {
            prop_assert!(one.coeff(i).abs() < 1e-9, "coefficient {} = {}", i, one.coeff(i));
        }
    }

    #[test]
    fn dual_matches_central_difference(x in -2.0f64..2.0, which in 0usize..3) {
        let text = ["sin(x1)*exp(x1/3) + x1^3 - 2*x1", "cos(x1^2)/(2 + sin(x1))", "exp(-x1^2)*cos(3*x1) + 1/(x1^2 + 1)"][which];
        let e = parse_expr(text, Scope { n: 1, k: 0 }).unwrap();
        let f = |v: f64| e.eval(&Env { t: &0.0, x: &[v], mu: &[] }).unwrap();
        let xs = [Dual::variable(x, 0, 1)];
        let d = e.eval(&Env { t: &Dual::lift(0.0), x: &xs, mu: &[] }).unwrap();
        let h = 1e-6;
        let fd = (f(x + h) - f(x - h)) / (2.0 * h);
        prop_assert!((*d.primal() - f(x)).abs() < 1e-14);
        prop_assert!((d.derivative(0) - fd).abs() <= 1e-5 * fd.abs().max(1.0));
    }

    #[test]
    fn bell_matches_set_partitions(y in prop::collection::vec(-4i32..5, 6), j in 1usize..7) {
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        for m in 1..=j {
            prop_assert_eq!(bell(j, m, &y[..j - m + 1]), set_partition_sum(j, m, &y));
        }
    }

    #[test]
    fn system_text_round_trips(a in -5.0f64..5.0, b in -5.0f64..5.0) {
        let src = format!("system rt\ndim n=1 k=1\nperiod T=2*pi\norder 1: x1^2 + {a:e}*mu1 + {b:e}*sin(t)\nend\n");
        let spec = parse_system(&src).unwrap();
        let again = parse_system(&spec.to_text()).unwrap();
        prop_assert_eq!(spec.to_text(), again.to_text());
        let (x, mu) = ([0.3], [0.7]);
        let lhs = spec.eval_term(1, &1.1, &x, &mu).unwrap()[0];
        let rhs = again.eval_term(1, &1.1, &x, &mu).unwrap()[0];
        prop_assert_eq!(lhs, rhs);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn flow_semigroup(x0 in -0.6f64..0.2, mu in -1.0f64..-0.4, eps in 0.05f64..0.4, s in 0.5f64..5.5) {
        let spec = avcat::builtins::builtin("fold").unwrap().spec();
        let cfg = IntegratorConfig::adaptive(1e-12);
        let whole = integrate(&spec, &[x0], &[mu], eps, (0.0, TAU), &cfg).unwrap().last()[0];
        let mid = integrate(&spec, &[x0], &[mu], eps, (0.0, s), &cfg).unwrap().last()[0];
        let split = integrate(&spec, &[mid], &[mu], eps, (s, TAU), &cfg).unwrap().last()[0];
        prop_assert!((whole - split).abs() < 1e-9, "{} vs {}", whole, split);
    }

    #[test]
    fn adaptive_guide_matches_closed_form(r in -0.9f64..0.9, mu in -1.0f64..-0.05, eps in 0.01f64..0.5, t in 0.1f64..TAU) {
        let x0 = r * (-mu).sqrt();
        let got = integrate(&guide(), &[x0], &[mu], eps, (0.0, t), &IntegratorConfig::adaptive(1e-13)).unwrap().last()[0];
        let exact = guide_exact(x0, mu, eps, t);
        prop_assert!((got - exact).abs() <= 1e-8 * exact.abs().max(1e-3));
    }

    #[test]
    fn rk4_is_fourth_order(r in -0.6f64..0.6, mu in -1.0f64..-0.5, eps in 0.4f64..0.8) {
        let x0 = r * (-mu).sqrt();
        let err = |steps: usize| {
            let got = integrate(&guide(), &[x0], &[mu], eps, (0.0, TAU), &IntegratorConfig::rk4(steps)).unwrap().last()[0];
            (got - guide_exact(x0, mu, eps, TAU)).abs()
        };
        let ratio = err(32) / err(64);
        prop_assert!((12.0..=20.0).contains(&ratio), "error ratio {}", ratio);
    }
}

#[test]
fn documented_tanh_value() {
    let got = integrate(&guide(), &[0.0], &[-0.5], 0.4, (0.0, TAU), &IntegratorConfig::adaptive(1e-13)).unwrap().last()[0];
    let exact = guide_exact(0.0, -0.5, 0.4, TAU);
    assert!((got - exact).abs() < 1e-8);
    assert!(exact < 0.0, "solutions decrease toward the stable root -sqrt(-mu)");
}
