//! Closed-form wave packets and exact solutions for quadratic Hamiltonians with `V = 0`.

use std::f64::consts::PI;

use crate::dispersion::BlochWaves;
use crate::error::{FgaError, Result};
use crate::phase_space::min_image;
use crate::potential::ExternalPotential;
use crate::wavefield::WaveField;
use crate::C64;

/// Gaussian envelope `exp(−|x−q0|²/(2w²ε) + i p0·(x−q0)/ε)` on the torus.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianPacket {
    pub dim: usize,
    pub center: [f64; 2],
    pub momentum: [f64; 2],
    /// Width in units of `√ε`.
    pub width: f64,
}

impl GaussianPacket {
    pub fn new(dim: usize, center: &[f64], momentum: &[f64], width: f64) -> Result<Self> {
        if center.len() != dim || momentum.len() != dim {
            return Err(FgaError::InvalidInput(format!("packet center/momentum must have {dim} components")));
        }
        if !(width > 0.0) {
            return Err(FgaError::InvalidInput("packet width must be positive".into()));
        }
        let mut c = [0.0; 2];
        let mut p = [0.0; 2];
        c[..dim].copy_from_slice(center);
        p[..dim].copy_from_slice(momentum);
        Ok(Self { dim, center: c, momentum: p, width })
    }

    /// Unnormalized envelope sampled with minimum-image displacements.
    pub fn envelope(&self, eps: f64, length: f64, x: &[f64]) -> C64 {
        let mut r2 = 0.0;
        let mut ph = 0.0;
        for a in 0..self.dim {
            let y = min_image(x[a] - self.center[a], length);
            r2 += y * y;
            ph += self.momentum[a] * y;
        }
        C64::from_polar((-r2 / (2.0 * self.width * self.width * eps)).exp(), ph / eps)
    }

    /// Envelope times `u_n(p0, x/ε)`, normalized to unit discrete `L²` norm.
    pub fn sample(&self, waves: Option<&dyn BlochWaves>, eps: f64, length: f64, points: usize) -> Result<WaveField> {
        let bloch = waves.map(|w| (w.basis().clone(), w.bloch_coefficients(&self.momentum[..self.dim])));
        let mut field = WaveField::from_fn(self.dim, eps, length, points, 0.0, |x| {
            let env = self.envelope(eps, length, x);
            match &bloch {
                Some((basis, c)) => {
                    let y: Vec<f64> = x.iter().map(|v| v / eps).collect();
                    env * crate::bloch::bloch_wave_value(basis, c, &y)
                }
                None => env,
            }
        })?;
        let n = field.norm();
        if n == 0.0 {
            return Err(FgaError::Numeric("packet vanishes on the grid".into()));
        }
        field.data.iter_mut().for_each(|z| *z /= n);
        Ok(field)
    }

    /// Exact solution at time `t` of `iε∂tψ = −ε²/2 Δψ + U ψ` for zero or harmonic `U`,
    /// starting from the normalized envelope (thawed Gaussian, valid while the packet
    /// stays away from its periodic images).
    pub fn exact_solution(&self, potential: &ExternalPotential, eps: f64, length: f64, points: usize, t: f64) -> Result<WaveField> {
        let axes: Vec<AxisFlow> = (0..self.dim)
            .map(|a| match potential {
                ExternalPotential::Zero => Ok(AxisFlow::harmonic(0.0, 0.0, t)),
                ExternalPotential::Harmonic { center, stiffness } => Ok(AxisFlow::harmonic(stiffness[a], center[a], t)),
                _ => Err(FgaError::Unsupported("exact solutions exist only for zero or harmonic U".into())),
            })
            .collect::<Result<_>>()?;
        let gamma0 = C64::new(0.0, 1.0 / (self.width * self.width));
        let mut parts = Vec::with_capacity(self.dim);
        for (a, flow) in axes.iter().enumerate() {
            parts.push(flow.evolve(self.center[a], self.momentum[a], gamma0));
        }
        let raw = self.envelope_norm(eps, length, points)?;
        let mut field = WaveField::from_fn(self.dim, eps, length, points, t, |x| {
            let mut phase = C64::new(0.0, 0.0);
            let mut amp = C64::new(1.0, 0.0);
            for (a, part) in parts.iter().enumerate() {
                let y = min_image(x[a] - part.center, length);
                phase += part.gamma * (0.5 * y * y) + part.momentum * y + part.action;
                amp *= part.amplitude;
            }
            amp * (C64::i() * phase / eps).exp() / raw
        })?;
        field.time = t;
        Ok(field)
    }

    fn envelope_norm(&self, eps: f64, length: f64, points: usize) -> Result<f64> {
        let w = WaveField::from_fn(self.dim, eps, length, points, 0.0, |x| self.envelope(eps, length, x))?;
        Ok(w.norm())
    }
}

/// Linear flow `[[A, B], [C, D]]` of one axis of `p²/2 + k(x−c)²/2` at time `t`.
#[derive(Debug, Clone, Copy)]
struct AxisFlow {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    stiffness: f64,
    center: f64,
    t: f64,
}

struct AxisState {
    center: f64,
    momentum: f64,
    gamma: C64,
    amplitude: C64,
    action: f64,
}

impl AxisFlow {
    fn harmonic(stiffness: f64, center: f64, t: f64) -> Self {
        if stiffness == 0.0 {
            return Self { a: 1.0, b: t, c: 0.0, d: 1.0, stiffness, center, t };
        }
        let w = stiffness.sqrt();
        let (s, c) = (w * t).sin_cos();
        Self { a: c, b: s / w, c: -w * s, d: c, stiffness, center, t }
    }

    fn evolve(&self, q0: f64, p0: f64, gamma0: C64) -> AxisState {
        let x0 = q0 - self.center;
        let xt = self.a * x0 + self.b * p0;
        let pt = self.c * x0 + self.d * p0;
        // d(xp)/dt = p² − k x², so the action integral of p²/2 − k x²/2 is ½[xp]
        let action = 0.5 * (xt * pt - x0 * p0);
        let denom = gamma0 * self.b + self.a;
        let gamma = (gamma0 * self.d + self.c) / denom;
        AxisState {
            center: xt + self.center,
            momentum: pt,
            gamma,
            amplitude: continuous_inv_sqrt(self, gamma0),
            action,
        }
    }
}

/// `(A + B Γ0)^{−1/2}` continued along the flow from 1 at `t = 0`.
fn continuous_inv_sqrt(flow: &AxisFlow, gamma0: C64) -> C64 {
    let steps = ((flow.t.abs() * flow.stiffness.sqrt().max(1.0)) * 64.0).ceil().max(1.0) as usize;
    let mut arg = 0.0;
    let mut prev = C64::new(1.0, 0.0);
    for i in 1..=steps {
        let s = flow.t * i as f64 / steps as f64;
        let f = AxisFlow::harmonic(flow.stiffness, flow.center, s);
        let cur = gamma0 * f.b + f.a;
        arg += (cur / prev).arg();
        prev = cur;
    }
    C64::from_polar(prev.norm().powf(-0.5), -0.5 * arg)
}

/// Free-band amplitude `a0(t) = √(2 − i t)` for `d = 1` (principal branch, continuous for real t).
pub fn free_amplitude(t: f64) -> C64 {
    C64::new(2.0, -t).sqrt()
}

/// Harmonic (`U = ω²q²/2`, free band) amplitude `√2·√(Z/2)` with `Z = 2cos ωt − i(ω + 1/ω) sin ωt`,
/// branch continued in time.
pub fn harmonic_amplitude(t: f64, omega: f64) -> C64 {
    let kappa = 0.5 * (omega + 1.0 / omega);
    let wt = omega * t;
    let z_mod = (4.0 * wt.cos().powi(2) + 4.0 * kappa * kappa * wt.sin().powi(2)).sqrt();
    // continuous angle of cos ωt + iκ sin ωt
    let turns = (wt / PI).round();
    let theta = (kappa * (wt - turns * PI).tan()).atan() + turns * PI;
    C64::from_polar(2f64.sqrt() * (z_mod / 2.0).sqrt(), -0.5 * theta)
}
