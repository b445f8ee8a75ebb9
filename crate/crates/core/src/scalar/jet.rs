use std::ops::{Add, Div, Mul, Neg, Sub};

use smallvec::smallvec;

use super::{Buf, Scalar, ScalarError};

/// Truncated univariate Taylor polynomial `c0 + c1·ε + … + cN·εᴺ`.
///
/// A state vector of the flow expansion is a `Vec<Jet<f64>>`; component `j`
/// carries coefficient `i` of `X_j(t)` in powers of ε. Coefficients may
/// themselves be any [`Scalar`], so `Jet<Dual<f64>>` differentiates the
/// expansion and `Jet<Jet<f64>>` expands in a second variable.
///
/// Jets produced by [`Scalar::constant`] carry no degree and adopt the
/// degree of whatever they are combined with. Combining two jets of
/// different explicit degrees is a contract violation.
#[derive(Clone, Debug, PartialEq)]
pub struct Jet<S> {
    coeffs: Buf<S>,
    degree: Option<usize>,
}

/// Jet in the perturbation parameter ε with real coefficients.
pub type EpsJet = Jet<f64>;

impl<S: Scalar> Jet<S> {
    /// Jet with explicit coefficients; its degree is `coeffs.len() - 1`.
    pub fn new(coeffs: Vec<S>) -> Self {
        assert!(!coeffs.is_empty(), "a jet needs at least one coefficient");
        let degree = coeffs.len() - 1;
        Jet { coeffs: coeffs.into(), degree: Some(degree) }
    }

    /// Constant `c` embedded at a fixed degree.
    pub fn constant_at(c: S, degree: usize) -> Self {
        let mut coeffs = smallvec![S::zero(); degree + 1];
        coeffs[0] = c;
        Jet { coeffs, degree: Some(degree) }
    }

    /// The independent variable shifted by `c`: `c + ε`.
    pub fn variable(c: S, degree: usize) -> Self {
        let mut jet = Self::constant_at(c, degree);
        if degree >= 1 {
            jet.coeffs[1] = S::one();
        }
        jet
    }

    /// Degree-polymorphic constant.
    pub fn lift(c: S) -> Self {
        Jet { coeffs: smallvec![c], degree: None }
    }

    pub fn degree(&self) -> Option<usize> {
        self.degree
    }

    /// Coefficient `i`; zero above the stored degree.
    pub fn coeff(&self, i: usize) -> S {
        self.coeffs.get(i).cloned().unwrap_or_else(S::zero)
    }

    pub fn coeffs(&self) -> &[S] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<S> {
        self.coeffs.into_vec()
    }

    /// Same polynomial re-embedded at `degree` (truncating or zero padding).
    pub fn with_degree(&self, degree: usize) -> Self {
        let coeffs = (0..=degree).map(|i| self.coeff(i)).collect();
        Jet { coeffs, degree: Some(degree) }
    }

    /// Horner evaluation at a point of the coefficient ring.
    pub fn eval_at(&self, at: &S) -> S {
        let mut acc = S::zero();
        for c in self.coeffs.iter().rev() {
            acc = acc * at.clone() + c.clone();
        }
        acc
    }

    /// d/dε of the polynomial, kept at the same degree (top coefficient 0).
    pub fn derivative(&self) -> Self {
        let len = self.coeffs.len();
        let mut coeffs = Buf::with_capacity(len);
        for i in 1..len {
            coeffs.push(self.coeffs[i].scale(i as f64));
        }
        coeffs.push(S::zero());
        Jet { coeffs, degree: self.degree }
    }

    pub fn try_add(&self, rhs: &Self) -> Result<Self, ScalarError> {
        join_degree(self.degree, rhs.degree)?;
        Ok(self.clone() + rhs.clone())
    }

    pub fn try_mul(&self, rhs: &Self) -> Result<Self, ScalarError> {
        join_degree(self.degree, rhs.degree)?;
        Ok(self.clone() * rhs.clone())
    }

    fn len_for(degree: Option<usize>) -> usize {
        degree.map_or(1, |d| d + 1)
    }

    fn map(&self, f: impl Fn(&S) -> S) -> Self {
        Jet { coeffs: self.coeffs.iter().map(f).collect(), degree: self.degree }
    }
}

fn join_degree(a: Option<usize>, b: Option<usize>) -> Result<Option<usize>, ScalarError> {
    match (a, b) {
        (Some(x), Some(y)) if x != y => Err(ScalarError::DegreeMismatch(x, y)),
        (Some(x), _) | (_, Some(x)) => Ok(Some(x)),
        (None, None) => Ok(None),
    }
}

fn join_or_panic(a: Option<usize>, b: Option<usize>) -> Option<usize> {
    match join_degree(a, b) {
        Ok(d) => d,
        Err(e) => panic!("contract violation: {e}"),
    }
}

impl<S: Scalar> Add for Jet<S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let degree = join_or_panic(self.degree, rhs.degree);
        let len = Self::len_for(degree);
        let coeffs = (0..len)
            .map(|i| match (self.coeffs.get(i), rhs.coeffs.get(i)) {
                (Some(a), Some(b)) => a.clone() + b.clone(),
                (Some(a), None) => a.clone(),
                (None, Some(b)) => b.clone(),
                (None, None) => S::zero(),
            })
            .collect();
        Jet { coeffs, degree }
    }
}

impl<S: Scalar> Sub for Jet<S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let degree = join_or_panic(self.degree, rhs.degree);
        let len = Self::len_for(degree);
        let coeffs = (0..len)
            .map(|i| match (self.coeffs.get(i), rhs.coeffs.get(i)) {
                (Some(a), Some(b)) => a.clone() - b.clone(),
                (Some(a), None) => a.clone(),
                (None, Some(b)) => -b.clone(),
                (None, None) => S::zero(),
            })
            .collect();
        Jet { coeffs, degree }
    }
}

impl<S: Scalar> Neg for Jet<S> {
    type Output = Self;
    fn neg(self) -> Self {
        self.map(|c| -c.clone())
    }
}

impl<S: Scalar> Mul for Jet<S> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let degree = join_or_panic(self.degree, rhs.degree);
        if self.coeffs.len() == 1 && self.degree.is_none() {
            let c = self.coeffs[0].clone();
            let mut out = rhs.map(|b| c.clone() * b.clone());
            out.degree = degree;
            return out;
        }
        if rhs.coeffs.len() == 1 && rhs.degree.is_none() {
            let c = rhs.coeffs[0].clone();
            let mut out = self.map(|a| a.clone() * c.clone());
            out.degree = degree;
            return out;
        }
        let len = Self::len_for(degree);
        let mut coeffs = Buf::with_capacity(len);
        for k in 0..len {
            let mut acc = self.coeffs[0].clone() * rhs.coeffs[k].clone();
            for p in 1..=k {
                acc = acc + self.coeffs[p].clone() * rhs.coeffs[k - p].clone();
            }
            coeffs.push(acc);
        }
        Jet { coeffs, degree }
    }
}

impl<S: Scalar> Div for Jet<S> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        let degree = join_or_panic(self.degree, rhs.degree);
        let d0 = rhs.coeffs[0].clone();
        if d0.value() == 0.0 {
            panic!("contract violation: jet division by a divisor with zero constant term");
        }
        let len = Self::len_for(degree);
        let mut out: Buf<S> = Buf::with_capacity(len);
        for k in 0..len {
            let mut acc = self.coeff(k);
            for j in 1..=k {
                acc = acc - rhs.coeff(j) * out[k - j].clone();
            }
            out.push(acc / d0.clone());
        }
        Jet { coeffs: out, degree }
    }
}

impl<S: Scalar> Scalar for Jet<S> {
    fn constant(c: f64) -> Self {
        Jet::lift(S::constant(c))
    }

    fn value(&self) -> f64 {
        self.coeffs[0].value()
    }

    fn sin(&self) -> Self {
        sin_cos(self).0
    }

    fn cos(&self) -> Self {
        sin_cos(self).1
    }

    fn exp(&self) -> Self {
        let a = &self.coeffs;
        let mut e: Buf<S> = Buf::with_capacity(a.len());
        e.push(a[0].exp());
        for k in 1..a.len() {
            let mut acc = S::zero();
            for j in 1..=k {
                acc = acc + a[j].scale(j as f64) * e[k - j].clone();
            }
            e.push(acc.scale(1.0 / k as f64));
        }
        Jet { coeffs: e, degree: self.degree }
    }

    fn scale(&self, c: f64) -> Self {
        self.map(|a| a.scale(c))
    }
}

/// Joint recurrence: s' = c·a', c' = −s·a'.
fn sin_cos<S: Scalar>(x: &Jet<S>) -> (Jet<S>, Jet<S>) {
    let a = &x.coeffs;
    let mut s: Buf<S> = Buf::with_capacity(a.len());
    let mut c: Buf<S> = Buf::with_capacity(a.len());
    s.push(a[0].sin());
    c.push(a[0].cos());
    for k in 1..a.len() {
        let mut sk = S::zero();
        let mut ck = S::zero();
        for j in 1..=k {
            let ja = a[j].scale(j as f64);
            sk = sk + ja.clone() * c[k - j].clone();
            ck = ck - ja * s[k - j].clone();
        }
        s.push(sk.scale(1.0 / k as f64));
        c.push(ck.scale(1.0 / k as f64));
    }
    (
        Jet { coeffs: s, degree: x.degree },
        Jet { coeffs: c, degree: x.degree },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn difference_of_squares() {
        let a = Jet::new(vec![1.0, 1.0, 0.0]);
        let b = Jet::new(vec![1.0, -1.0, 0.0]);
        assert_eq!(a.try_mul(&b).unwrap().coeffs(), &[1.0, 0.0, -1.0]);
    }

    #[test]
    fn constant_lift_scales() {
        let a = Jet::new(vec![1.0, 2.0, 3.0]);
        let c = <Jet<f64> as Scalar>::constant(2.5);
        assert_eq!((c.clone() * a.clone()).coeffs(), &[2.5, 5.0, 7.5]);
        assert_eq!((a * c).degree(), Some(2));
    }

    #[test]
    fn cube_of_eps_truncates() {
        let e = Jet::variable(0.0, 2);
        let cube = e.clone() * e.clone() * e;
        assert_eq!(cube.coeffs(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn degree_mismatch_is_reported() {
        let a = Jet::new(vec![1.0, 1.0]);
        let b = Jet::new(vec![1.0, 1.0, 1.0]);
        assert_eq!(a.try_mul(&b), Err(ScalarError::DegreeMismatch(1, 2)));
        assert!(a.try_add(&b).is_err());
    }

    #[test]
    #[should_panic(expected = "contract violation")]
    fn operator_mismatch_panics() {
        let _ = Jet::new(vec![1.0, 1.0]) * Jet::new(vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn sin_of_eps_matches_series() {
        let s = Jet::variable(0.0, 3).sin();
        assert!(close(s.coeffs(), &[0.0, 1.0, 0.0, -1.0 / 6.0], 1e-15));
    }

    #[test]
    fn cos_of_eps_matches_series() {
        let c = Jet::variable(0.0, 2).cos();
        assert!(close(c.coeffs(), &[1.0, 0.0, -0.5], 1e-15));
    }

    #[test]
    fn sin_of_constant_is_constant() {
        let s = Jet::constant_at(0.3, 3).sin();
        assert!(close(s.coeffs(), &[0.3_f64.sin(), 0.0, 0.0, 0.0], 0.0));
    }

    #[test]
    fn exp_of_eps_matches_series() {
        let e = Jet::variable(0.0, 4).exp();
        assert!(close(e.coeffs(), &[1.0, 1.0, 0.5, 1.0 / 6.0, 1.0 / 24.0], 1e-15));
    }

    #[test]
    fn division_inverts_multiplication() {
        let a = Jet::new(vec![2.0, -1.0, 0.5, 3.0]);
        let b = Jet::new(vec![1.5, 0.25, -2.0, 1.0]);
        let q = (a.clone() * b.clone()) / b;
        assert!(close(q.coeffs(), a.coeffs(), 1e-13));
    }

    #[test]
    fn division_by_zero_constant_term_is_an_error() {
        let a = Jet::new(vec![1.0, 1.0]);
        let b = Jet::new(vec![0.0, 1.0]);
        assert_eq!(a.try_div(&b), Err(ScalarError::DivisionByZero));
    }

    #[test]
    fn derivative_and_horner() {
        let p = Jet::new(vec![1.0, 2.0, 3.0]);
        assert_eq!(p.eval_at(&2.0), 1.0 + 4.0 + 12.0);
        assert_eq!(p.derivative().coeffs(), &[2.0, 6.0, 0.0]);
    }
}
