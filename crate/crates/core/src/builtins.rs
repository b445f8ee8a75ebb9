//! The four bundled example families and the parameter sets they are
//! usually studied at.

use serde::Serialize;

use crate::continuation::{ParamSlice, Window};
use crate::expr::{parse_system, SystemSpec};

/// A named point in parameter space together with a perturbation size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReferenceSet {
    pub label: &'static str,
    pub eps: f64,
    pub mu: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Builtin {
    pub name: &'static str,
    pub source: &'static str,
    /// Expected order of the first non-vanishing averaged function.
    pub ell: usize,
    /// Values of the non-continued parameters; component `slice_index` is a placeholder.
    pub base_mu: Vec<f64>,
    pub slice_index: usize,
    pub window: Window,
    pub references: Vec<ReferenceSet>,
}

impl Builtin {
    pub fn spec(&self) -> SystemSpec {
        parse_system(self.source).expect("bundled system files parse")
    }

    pub fn slice(&self) -> ParamSlice {
        ParamSlice::new(self.base_mu.clone(), self.slice_index)
    }

    /// Parameter slice with the non-continued components overridden.
    pub fn slice_with(&self, overrides: &[(usize, f64)]) -> ParamSlice {
        let mut base = self.base_mu.clone();
        for &(i, v) in overrides {
            base[i] = v;
        }
        ParamSlice::new(base, self.slice_index)
    }
}

const FOLD: &str = include_str!("../systems/fold.sys");
const TRANSCRITICAL: &str = include_str!("../systems/transcritical.sys");
const PITCHFORK: &str = include_str!("../systems/pitchfork.sys");
const SADDLEFOCUS: &str = include_str!("../systems/saddlefocus.sys");

pub const NAMES: [&str; 4] = ["fold", "transcritical", "pitchfork", "saddlefocus"];

fn r(label: &'static str, eps: f64, mu: &[f64]) -> ReferenceSet {
    ReferenceSet { label, eps, mu: mu.to_vec() }
}

pub fn builtin(name: &str) -> Option<Builtin> {
    let unit = |n| Window::uniform(n, (-1.0, 1.0), (-1.0, 1.0));
    let b = match name {
        "fold" => Builtin {
            name: "fold",
            source: FOLD,
            ell: 1,
            base_mu: vec![0.0],
            slice_index: 0,
            window: unit(1),
            references: vec![r("stable-pair", 0.4, &[-0.5]), r("no-fixed-points", 0.4, &[0.5])],
        },
        "transcritical" => Builtin {
            name: "transcritical",
            source: TRANSCRITICAL,
            ell: 1,
            base_mu: vec![0.0, 1.0],
            slice_index: 0,
            window: unit(1),
            references: vec![
                r("negative-eps-c1", -0.02, &[0.0, 1.0]),
                r("positive-eps-c0", 0.02, &[0.0, 0.0]),
                r("positive-eps-c1", 0.02, &[0.0, 1.0]),
                r("large-eps-left", 0.3, &[-0.5, 0.1]),
                r("large-eps-centre", 0.3, &[0.0, 0.1]),
                r("large-eps-right", 0.3, &[0.5, 0.1]),
                r("negative-large-eps", -0.3, &[-0.3, 0.1]),
            ],
        },
        "pitchfork" => Builtin {
            name: "pitchfork",
            source: PITCHFORK,
            ell: 2,
            base_mu: vec![0.0, 1.0],
            slice_index: 0,
            window: Window::uniform(1, (-1.5, 1.5), (-1.0, 1.0)),
            references: vec![r("cusp-positive", 0.1, &[0.0, 1.0]), r("cusp-negative", -0.1, &[0.0, 1.0])],
        },
        "saddlefocus" => Builtin {
            name: "saddlefocus",
            source: SADDLEFOCUS,
            ell: 1,
            base_mu: vec![-0.2, 2.0, 0.0],
            slice_index: 0,
            window: unit(2),
            references: vec![
                r("unstable-c0-2", 0.05, &[-0.2, 2.0, 0.0]),
                r("unstable-c0-2-larger-eps", 0.1, &[-0.2, 2.0, 0.0]),
                r("stable-equilibrium", 0.05, &[-0.2, -1.0, 0.0]),
                r("centre", 0.05, &[-0.2, 0.0, 0.0]),
            ],
        },
        _ => return None,
    };
    Some(b)
}

pub fn all() -> Vec<Builtin> {
    NAMES.iter().filter_map(|n| builtin(n)).collect()
}
