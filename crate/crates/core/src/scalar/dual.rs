use std::ops::{Add, Div, Mul, Neg, Sub};

use smallvec::smallvec;

use super::{Buf, Scalar};

/// First-order forward-mode dual number with `d` seed directions.
///
/// A constant carries no directions and behaves as zero in every
/// direction. Nesting (`Dual<Dual<f64>>`) yields second derivatives.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual<S> {
    value: S,
    dirs: Buf<S>,
}

impl<S: Scalar> Dual<S> {
    pub fn new(value: S, dirs: Vec<S>) -> Self {
        Dual { value, dirs: dirs.into() }
    }

    pub fn lift(value: S) -> Self {
        Dual { value, dirs: Buf::new() }
    }

    /// Independent variable number `index` out of `count` seed directions.
    pub fn variable(value: S, index: usize, count: usize) -> Self {
        let mut dirs = smallvec![S::zero(); count];
        dirs[index] = S::one();
        Dual { value, dirs }
    }

    /// Value seeded along an arbitrary single direction `dot`.
    pub fn along(value: S, dot: S) -> Self {
        Dual { value, dirs: smallvec![dot] }
    }

    pub fn primal(&self) -> &S {
        &self.value
    }

    /// Partial derivative along seed `j` (zero for constants).
    pub fn derivative(&self, j: usize) -> S {
        self.dirs.get(j).cloned().unwrap_or_else(S::zero)
    }

    pub fn directions(&self) -> &[S] {
        &self.dirs
    }

    fn join(a: &[S], b: &[S]) -> usize {
        match (a.len(), b.len()) {
            (0, n) | (n, 0) => n,
            (m, n) if m == n => m,
            (m, n) => panic!("contract violation: dual direction count mismatch {m} vs {n}"),
        }
    }

    fn dir(&self, j: usize) -> S {
        self.dirs.get(j).cloned().unwrap_or_else(S::zero)
    }
}

impl<S: Scalar> Add for Dual<S> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let d = Self::join(&self.dirs, &rhs.dirs);
        let dirs = if self.dirs.is_empty() {
            rhs.dirs
        } else if rhs.dirs.is_empty() {
            self.dirs
        } else {
            (0..d).map(|j| self.dirs[j].clone() + rhs.dirs[j].clone()).collect()
        };
        Dual { value: self.value + rhs.value, dirs }
    }
}

impl<S: Scalar> Sub for Dual<S> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        let d = Self::join(&self.dirs, &rhs.dirs);
        let dirs = (0..d).map(|j| self.dir(j) - rhs.dir(j)).collect();
        Dual { value: self.value - rhs.value, dirs }
    }
}

impl<S: Scalar> Neg for Dual<S> {
    type Output = Self;
    fn neg(self) -> Self {
        Dual { value: -self.value, dirs: self.dirs.into_iter().map(|x| -x).collect() }
    }
}

impl<S: Scalar> Mul for Dual<S> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let d = Self::join(&self.dirs, &rhs.dirs);
        let dirs = if rhs.dirs.is_empty() {
            self.dirs.iter().map(|a| a.clone() * rhs.value.clone()).collect()
        } else if self.dirs.is_empty() {
            rhs.dirs.iter().map(|b| self.value.clone() * b.clone()).collect()
        } else {
            (0..d)
                .map(|j| {
                    self.value.clone() * rhs.dirs[j].clone()
                        + self.dirs[j].clone() * rhs.value.clone()
                })
                .collect()
        };
        Dual { value: self.value * rhs.value, dirs }
    }
}

impl<S: Scalar> Div for Dual<S> {
    type Output = Self;
    fn div(self, rhs: Self) -> Self {
        if rhs.value.value() == 0.0 {
            panic!("contract violation: dual division by a divisor with zero value");
        }
        let d = Self::join(&self.dirs, &rhs.dirs);
        let value = self.value.clone() / rhs.value.clone();
        let dirs = (0..d)
            .map(|j| (self.dir(j) - value.clone() * rhs.dir(j)) / rhs.value.clone())
            .collect();
        Dual { value, dirs }
    }
}

impl<S: Scalar> Scalar for Dual<S> {
    fn constant(c: f64) -> Self {
        Dual::lift(S::constant(c))
    }

    fn value(&self) -> f64 {
        self.value.value()
    }

    fn sin(&self) -> Self {
        let c = self.value.cos();
        Dual {
            value: self.value.sin(),
            dirs: self.dirs.iter().map(|d| c.clone() * d.clone()).collect(),
        }
    }

    fn cos(&self) -> Self {
        let s = self.value.sin();
        Dual {
            value: self.value.cos(),
            dirs: self.dirs.iter().map(|d| -(s.clone() * d.clone())).collect(),
        }
    }

    fn exp(&self) -> Self {
        let e = self.value.exp();
        Dual {
            dirs: self.dirs.iter().map(|d| e.clone() * d.clone()).collect(),
            value: e,
        }
    }

    fn scale(&self, c: f64) -> Self {
        Dual {
            value: self.value.scale(c),
            dirs: self.dirs.iter().map(|d| d.scale(c)).collect(),
        }
    }
}

/// Gradient of a scalar function by seeding unit directions.
pub fn dual_gradient<F>(f: F, x: &[f64]) -> Vec<f64>
where
    F: Fn(&[Dual<f64>]) -> Dual<f64>,
{
    let n = x.len();
    let seeded: Vec<Dual<f64>> =
        x.iter().enumerate().map(|(i, &xi)| Dual::variable(xi, i, n)).collect();
    let out = f(&seeded);
    (0..n).map(|j| out.derivative(j)).collect()
}

/// Value, gradient and Hessian through a `Dual<Dual<f64>>` evaluation.
pub fn dual_hessian<F>(f: F, x: &[f64]) -> (f64, Vec<f64>, Vec<Vec<f64>>)
where
    F: Fn(&[Dual<Dual<f64>>]) -> Dual<Dual<f64>>,
{
    let n = x.len();
    let seeded: Vec<Dual<Dual<f64>>> = x
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            let inner = Dual::variable(xi, i, n);
            let dirs = (0..n).map(|j| Dual::lift(if i == j { 1.0 } else { 0.0 })).collect();
            Dual::new(inner, dirs)
        })
        .collect();
    let out = f(&seeded);
    let value = out.primal().value();
    let grad = (0..n).map(|j| out.primal().derivative(j)).collect();
    let hess = (0..n)
        .map(|i| (0..n).map(|j| out.derivative(i).derivative(j)).collect())
        .collect();
    (value, grad, hess)
}
