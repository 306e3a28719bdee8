//! Smoothing kernels for the straight-through threshold gradients.
//!
//! The pseudo-derivative of `H(z - theta)` with respect to `theta` is
//! `-(1/eps) K((z - theta) / eps)`, so any unit-mass kernel can be swapped in.
//! Kernels are looked up by name from [`registry`] so training configs can
//! select one at runtime.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Result, SaeError};

pub trait Kernel: Send + Sync + std::fmt::Debug {
    fn name(&self) -> &'static str;

    fn eval(&self, u: f64) -> f64;

    /// Half-width of the support; `f64::INFINITY` for unbounded kernels.
    fn radius(&self) -> f64;
}

/// `rect(u) = H(u + 1/2) - H(u - 1/2)` with `H(0) = 0`, i.e. the indicator
/// of `(-1/2, 1/2]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Rect;

impl Kernel for Rect {
    fn name(&self) -> &'static str {
        "rect"
    }

    fn eval(&self, u: f64) -> f64 {
        if u > -0.5 && u <= 0.5 {
            1.0
        } else {
            0.0
        }
    }

    fn radius(&self) -> f64 {
        0.5
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Triangular;

impl Kernel for Triangular {
    fn name(&self) -> &'static str {
        "triangular"
    }

    fn eval(&self, u: f64) -> f64 {
        (1.0 - u.abs()).max(0.0)
    }

    fn radius(&self) -> f64 {
        1.0
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Gaussian;

impl Kernel for Gaussian {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn eval(&self, u: f64) -> f64 {
        (-0.5 * u * u).exp() / (2.0 * PI).sqrt()
    }

    fn radius(&self) -> f64 {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Epanechnikov;

impl Kernel for Epanechnikov {
    fn name(&self) -> &'static str {
        "epanechnikov"
    }

    fn eval(&self, u: f64) -> f64 {
        if u.abs() < 1.0 {
            0.75 * (1.0 - u * u)
        } else {
            0.0
        }
    }

    fn radius(&self) -> f64 {
        1.0
    }
}

type Constructor = fn() -> Arc<dyn Kernel>;

/// Name -> constructor table of built-in kernels.
pub fn registry() -> BTreeMap<&'static str, Constructor> {
    let mut map: BTreeMap<&'static str, Constructor> = BTreeMap::new();
    map.insert("rect", || Arc::new(Rect));
    map.insert("triangular", || Arc::new(Triangular));
    map.insert("gaussian", || Arc::new(Gaussian));
    map.insert("epanechnikov", || Arc::new(Epanechnikov));
    map
}

pub fn by_name(name: &str) -> Result<Arc<dyn Kernel>> {
    registry().get(name).map(|ctor| ctor()).ok_or_else(|| {
        let known: Vec<_> = registry().keys().copied().collect();
        SaeError::Config(format!(
            "unknown kernel `{name}` (known: {})",
            known.join(", ")
        ))
    })
}

/// The rectangle kernel as a free function.
pub fn kernel_rect(u: f64) -> f64 {
    Rect.eval(u)
}
