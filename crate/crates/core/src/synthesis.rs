//! Frozen-Gaussian synthesis of the wave field from propagated trajectories.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::bloch::bloch_wave_value;
use crate::dispersion::BlochWaves;
use crate::dynamics::{TrajectoryState, SIGMA_Z_FLOOR};
use crate::error::{FgaError, Result};
use crate::phase_space::{band_projection, fast_period, fast_position, window_prefactor, PhaseSpaceGrid, TransformOptions};
use crate::wavefield::WaveField;
use crate::C64;

/// Trajectories are split into this many contiguous chunks whose partial fields are
/// added in chunk order, so results do not depend on the worker count.
const REDUCTION_CHUNKS: usize = 16;

/// Everything needed to synthesize one band at one time.
#[derive(Clone, Copy)]
pub struct SynthesisPlan<'a> {
    pub band: usize,
    pub waves: &'a dyn BlochWaves,
    pub grid: &'a PhaseSpaceGrid,
    pub states: &'a [TrajectoryState],
    /// Target grid; its samples are ignored.
    pub skeleton: &'a WaveField,
    pub time: f64,
    pub options: TransformOptions,
}

impl SynthesisPlan<'_> {
    /// `(2πε)^{−3d/2} / (2^{d/4}(2πε)^{−3d/4}) · δq^d δp^d`.
    pub fn weight(&self) -> f64 {
        let d = self.grid.dim;
        (2.0 * PI * self.grid.eps).powf(-1.5 * d as f64) / window_prefactor(d, self.grid.eps) * self.grid.weight()
    }

    pub fn validate(&self) -> Result<()> {
        let sk = self.skeleton;
        if sk.dim != self.grid.dim
            || (sk.eps - self.grid.eps).abs() > 1e-12 * sk.eps
            || (sk.length - self.grid.length).abs() > 1e-12 * sk.length
            || self.waves.dim() != sk.dim
        {
            return Err(FgaError::InvalidPlan("skeleton, phase-space grid and band disagree on d, ε or L".into()));
        }
        for s in self.states {
            if (s.t - self.time).abs() > 1e-12 * self.time.abs().max(1.0) {
                return Err(FgaError::InvalidPlan(format!(
                    "trajectory {} is at t = {}, plan time is {}",
                    s.seed_index, s.t, self.time
                )));
            }
            if !(s.a0.re.is_finite() && s.a0.im.is_finite() && s.s.is_finite()) {
                return Err(FgaError::InvalidPlan(format!("trajectory {} carries a non-finite amplitude", s.seed_index)));
            }
            let sigma = s.z().sigma_min();
            if !(sigma >= SIGMA_Z_FLOOR) {
                return Err(FgaError::InvalidPlan(format!("trajectory {} has sigma_min(Z) = {sigma:.3e}", s.seed_index)));
            }
        }
        Ok(())
    }
}

/// Contribution of one trajectory, added into `out`.
fn deposit(plan: &SynthesisPlan, state: &TrajectoryState, coef: f64, period: usize, out: &mut [C64]) {
    let sk = plan.skeleton;
    let d = sk.dim;
    let eps = sk.eps;
    let n = sk.points;
    let dx = sk.spacing();
    let radius = plan.options.truncation_radius * eps.sqrt();
    let p = state.unwrapped_p();
    let amp = state.a0 * C64::from_polar(1.0, state.s / eps) * state.seed_weight * coef;
    let coeffs = plan.waves.bloch_coefficients(&p[..d]);
    let basis = plan.waves.basis();

    // one-axis windows: (index mod N, displacement, e^{−y²/2ε}, e^{iPy/ε})
    let axes: Vec<Vec<(usize, f64, f64, C64)>> = (0..d)
        .map(|a| {
            let q = state.q[a];
            let (lo, hi) = if 2.0 * radius >= sk.length {
                let start = ((q - 0.5 * sk.length) / dx).ceil() as i64;
                (start, start + n as i64 - 1)
            } else {
                (((q - radius) / dx).ceil() as i64, ((q + radius) / dx).floor() as i64)
            };
            (lo..=hi)
                .map(|l| {
                    let y = l as f64 * dx - q;
                    (l.rem_euclid(n as i64) as usize, y, (-y * y / (2.0 * eps)).exp(), C64::from_polar(1.0, p[a] * y / eps))
                })
                .collect()
        })
        .collect();

    // Bloch wave on one period of fast positions
    let cached = period.pow(d as u32) <= axes.iter().map(|a| a.len()).product::<usize>();
    let table: Vec<C64> = if cached {
        (0..period.pow(d as u32))
            .map(|c| {
                let y: Vec<f64> = if d == 1 {
                    vec![fast_position(sk, c)]
                } else {
                    vec![fast_position(sk, c / period), fast_position(sk, c % period)]
                };
                bloch_wave_value(basis, &coeffs, &y)
            })
            .collect()
    } else {
        Vec::new()
    };
    let bloch = |idx: [usize; 2]| -> C64 {
        if cached {
            if d == 1 {
                table[idx[0] % period]
            } else {
                table[(idx[0] % period) * period + idx[1] % period]
            }
        } else {
            let y: Vec<f64> = (0..d).map(|a| idx[a] as f64 * dx / eps).collect();
            bloch_wave_value(basis, &coeffs, &y)
        }
    };

    if d == 1 {
        for &(l, _, env, ph) in &axes[0] {
            out[l] += amp * ph * env * bloch([l, 0]);
        }
    } else {
        let r2 = radius * radius;
        for &(l0, y0, e0, ph0) in &axes[0] {
            let a0 = amp * ph0 * e0;
            for &(l1, y1, e1, ph1) in &axes[1] {
                if y0 * y0 + y1 * y1 > r2 && 2.0 * radius < sk.length {
                    continue;
                }
                out[l0 * n + l1] += a0 * ph1 * e1 * bloch([l0, l1]);
            }
        }
    }
}

/// `ψ_FGA(x) = (2πε)^{−3d/2} Σ a0 e^{iS/ε} G_{Q,P}(x) u_n(P, x/ε) w_n(q,p) δq^dδp^d / C_W`.
pub fn synthesize(plan: &SynthesisPlan) -> Result<WaveField> {
    plan.validate()?;
    let mut out = plan.skeleton.zeros_like();
    out.time = plan.time;
    if plan.states.is_empty() {
        return Ok(out);
    }
    let coef = plan.weight();
    let period = fast_period(plan.skeleton);
    let chunk = plan.states.len().div_ceil(REDUCTION_CHUNKS).max(1);
    let partials: Vec<Vec<C64>> = plan
        .states
        .par_chunks(chunk)
        .map(|states| {
            let mut part = vec![C64::new(0.0, 0.0); out.data.len()];
            for s in states {
                deposit(plan, s, coef, period, &mut part);
            }
            part
        })
        .collect();
    for part in partials {
        for (o, v) in out.data.iter_mut().zip(part) {
            *o += v;
        }
    }
    Ok(out)
}

/// Sum over bands plus the band-truncation residual of the initial field.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiBandField {
    pub field: WaveField,
    /// `‖ψ0 − Σ_n Π_n ψ0‖₂`.
    pub residual: f64,
}

/// Pointwise sum of per-band syntheses and the reconstruction residual of `initial`.
pub fn multi_band_synthesize(plans: &[SynthesisPlan], initial: &WaveField) -> Result<MultiBandField> {
    let mut field = initial.zeros_like();
    let mut projected = initial.zeros_like();
    if let Some(first) = plans.first() {
        field.time = first.time;
    }
    for plan in plans {
        if !plan.skeleton.same_grid(initial) || (plan.time - plans[0].time).abs() > 1e-12 * plan.time.abs().max(1.0) {
            return Err(FgaError::InvalidPlan("band plans disagree on grid or time".into()));
        }
        let part = synthesize(plan)?;
        for (o, v) in field.data.iter_mut().zip(&part.data) {
            *o += v;
        }
        let pi = band_projection(initial, plan.waves, plan.band, plan.grid, plan.options)?;
        for (o, v) in projected.data.iter_mut().zip(&pi.data) {
            *o += v;
        }
    }
    let residual = initial.sub(&projected)?.norm();
    Ok(MultiBandField { field, residual })
}

/// `(‖a − b‖₂, ‖a − b‖₂/‖b‖₂)`; the relative value is infinite when `b = 0` and `a ≠ 0`.
pub fn l2_distance(a: &WaveField, b: &WaveField) -> Result<(f64, f64)> {
    a.check_same_grid(b)?;
    if (a.time - b.time).abs() > 1e-12 * a.time.abs().max(1.0) {
        return Err(FgaError::GridMismatch(format!("fields at t = {} and t = {}", a.time, b.time)));
    }
    let abs = a.sub(b)?.norm();
    let nb = b.norm();
    let rel = if nb > 0.0 {
        abs / nb
    } else if abs == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok((abs, rel))
}
