//! Averaging and Melnikov functions, stroboscopic Poincaré maps, displacement
//! functions and fixed-point continuation for periodically forced families
//! `ẋ = Σ εⁱ Fᵢ(t, x, μ)`.

pub mod builtins;
pub mod cli;
pub mod continuation;
pub mod expr;
pub mod melnikov;
pub mod ode;
pub mod poincare;
pub mod scalar;
pub mod surface;
