//! Reward regularisers `ψ` applied to implied rewards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `ψ(t)`, applied per sample (or per state-action pair in the exact forms).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Regularizer {
    /// `ψ(t) = linear·t + quadratic·t²`.
    Poly { linear: f64, quadratic: f64 },
    /// `ψ(t) = scale · ln(1 + eᵗ)`: convex and increasing.
    Softplus { scale: f64 },
}

impl Regularizer {
    /// `ψ(t) = t − t²`, the χ² form used by inverse soft-Q learning.
    pub const fn chi2() -> Self {
        Self::Poly {
            linear: 1.0,
            quadratic: -1.0,
        }
    }

    /// `ψ(t) = coef · t²`.
    pub const fn quadratic(coef: f64) -> Self {
        Self::Poly {
            linear: 0.0,
            quadratic: coef,
        }
    }

    pub const fn zero() -> Self {
        Self::Poly {
            linear: 0.0,
            quadratic: 0.0,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Self::Poly { linear, quadratic } => linear * t + quadratic * t * t,
            Self::Softplus { scale } => scale * softplus(t),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            Self::Poly { linear, quadratic } => linear + 2.0 * quadratic * t,
            Self::Softplus { scale } => scale * sigmoid(t),
        }
    }

    pub fn is_convex(&self) -> bool {
        match *self {
            Self::Poly { quadratic, .. } => quadratic >= 0.0,
            Self::Softplus { scale } => scale >= 0.0,
        }
    }

    /// `ψ*(y) = sup_z {y·z − ψ(z)}` where it has a closed form: strictly convex
    /// quadratics, or the zero regulariser at `y = linear`.
    pub fn conjugate(&self, y: f64) -> Result<f64> {
        match *self {
            Self::Poly { linear, quadratic } if quadratic > 0.0 => Ok((y - linear) * (y - linear) / (4.0 * quadratic)),
            _ => Err(Error::Domain(format!("{self:?} has no finite closed-form conjugate"))),
        }
    }

    /// `−ψ`.
    pub fn negated(&self) -> Self {
        match *self {
            Self::Poly { linear, quadratic } => Self::Poly {
                linear: -linear,
                quadratic: -quadratic,
            },
            Self::Softplus { scale } => Self::Softplus { scale: -scale },
        }
    }
}

impl Default for Regularizer {
    fn default() -> Self {
        Self::chi2()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_values() {
        let psi = Regularizer::chi2();
        assert_eq!(psi.value(0.0), 0.0);
        assert_eq!(psi.value(2.0), -2.0);
        assert_eq!(psi.derivative(0.5), 0.0);
        assert!(!psi.is_convex());
        assert!(psi.negated().is_convex());
    }

    #[test]
    fn derivatives_match_central_differences() {
        for psi in [
            Regularizer::chi2(),
            Regularizer::quadratic(0.3),
            Regularizer::Softplus { scale: 2.0 },
        ] {
            for t in [-3.0, -0.2, 0.0, 0.7, 4.0] {
                let h = 1e-6;
                let fd = (psi.value(t + h) - psi.value(t - h)) / (2.0 * h);
                assert!((fd - psi.derivative(t)).abs() < 1e-7, "{psi:?} at {t}");
            }
        }
    }

    #[test]
    fn quadratic_conjugate_matches_grid_sup() {
        let psi = Regularizer::quadratic(1.0);
        for y in [-1.0, 0.0, 0.4] {
            let grid = (-4000..=4000)
                .map(|i| i as f64 * 1e-3)
                .map(|z| y * z - psi.value(z))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((grid - psi.conjugate(y).unwrap()).abs() < 1e-6);
        }
        assert!(Regularizer::chi2().conjugate(0.0).is_err());
    }

    #[test]
    fn stable_sigmoid_and_softplus() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
    }
}
