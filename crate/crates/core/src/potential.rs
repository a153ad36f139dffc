//! Slowly varying external potentials `U(x)` with analytic derivatives up to fourth order.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{FgaError, Result};

/// Separable analytic potential; every kind acts independently on each axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExternalPotential {
    Zero,
    /// `½ Σ k_a (x_a − c_a)²`.
    Harmonic { center: Vec<f64>, stiffness: Vec<f64> },
    /// `(g/6) Σ (x_a − c_a)³`; not subquadratic.
    Cubic { center: Vec<f64>, strength: f64 },
    /// `A Σ cos(2π x_a / period)`.
    Cosine { amplitude: f64, period: f64 },
}

/// Derivatives of `U` at a point. Tensors are diagonal because `U` is separable;
/// only the diagonal entries `∂_a^k U` are stored.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PotentialJet {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [f64; 2],
    pub third: [f64; 2],
    pub fourth: [f64; 2],
}

impl PotentialJet {
    /// Full Hessian row-major `d×d`.
    pub fn hessian_matrix(&self, d: usize) -> [f64; 4] {
        let mut h = [0.0; 4];
        for a in 0..d {
            h[a * d + a] = self.hess[a];
        }
        h
    }
}

impl ExternalPotential {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let check_len = |v: &Vec<f64>, name: &str| {
            if v.len() != dim {
                Err(FgaError::InvalidInput(format!("{name} has {} entries, expected {dim}", v.len())))
            } else if v.iter().any(|x| !x.is_finite()) {
                Err(FgaError::InvalidInput(format!("{name} is not finite")))
            } else {
                Ok(())
            }
        };
        match self {
            Self::Zero => Ok(()),
            Self::Harmonic { center, stiffness } => {
                check_len(center, "center")?;
                check_len(stiffness, "stiffness")
            }
            Self::Cubic { center, strength } => {
                check_len(center, "center")?;
                if strength.is_finite() {
                    Ok(())
                } else {
                    Err(FgaError::InvalidInput("cubic strength not finite".into()))
                }
            }
            Self::Cosine { amplitude, period } => {
                if amplitude.is_finite() && period.is_finite() && *period > 0.0 {
                    Ok(())
                } else {
                    Err(FgaError::InvalidInput("cosine potential needs finite amplitude and positive period".into()))
                }
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Self::Zero)
    }

    /// Quadratic potentials leave the leading-order expansion exact.
    pub fn is_quadratic(&self) -> bool {
        matches!(self, Self::Zero | Self::Harmonic { .. })
    }

    pub fn is_subquadratic(&self) -> bool {
        !matches!(self, Self::Cubic { .. })
    }

    /// `sup |∂^α U|` over `|α| = 2..4` when finite.
    pub fn derivative_bound(&self) -> Option<f64> {
        match self {
            Self::Zero => Some(0.0),
            Self::Harmonic { stiffness, .. } => Some(stiffness.iter().fold(0.0, |m, k| m.max(k.abs()))),
            Self::Cubic { .. } => None,
            Self::Cosine { amplitude, period } => {
                let w = 2.0 * PI / period;
                Some(amplitude.abs() * w.powi(2).max(w.powi(4)))
            }
        }
    }

    /// Bound on `‖∇²U‖` when one exists.
    pub fn hessian_bound(&self) -> Option<f64> {
        match self {
            Self::Zero => Some(0.0),
            Self::Harmonic { stiffness, .. } => Some(stiffness.iter().fold(0.0, |m, k| m.max(k.abs()))),
            Self::Cubic { .. } => None,
            Self::Cosine { amplitude, period } => Some(amplitude.abs() * (2.0 * PI / period).powi(2)),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.jet(x).value
    }

    pub fn jet(&self, x: &[f64]) -> PotentialJet {
        let mut j = PotentialJet::default();
        for (a, &xa) in x.iter().enumerate() {
            let (v, g, h, t, f) = match self {
                Self::Zero => (0.0, 0.0, 0.0, 0.0, 0.0),
                Self::Harmonic { center, stiffness } => {
                    let y = xa - center[a];
                    let k = stiffness[a];
                    (0.5 * k * y * y, k * y, k, 0.0, 0.0)
                }
                Self::Cubic { center, strength } => {
                    let y = xa - center[a];
                    let g = *strength;
                    (g * y * y * y / 6.0, 0.5 * g * y * y, g * y, g, 0.0)
                }
                Self::Cosine { amplitude, period } => {
                    let w = 2.0 * PI / period;
                    let (s, c) = (w * xa).sin_cos();
                    let amp = *amplitude;
                    (amp * c, -amp * w * s, -amp * w * w * c, amp * w.powi(3) * s, amp * w.powi(4) * c)
                }
            };
            j.value += v;
            j.grad[a] = g;
            j.hess[a] = h;
            j.third[a] = t;
            j.fourth[a] = f;
        }
        j
    }
}
