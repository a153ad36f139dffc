//! Fine-grid Strang-split spectral solver for `iε∂tψ = −ε²/2 ψ'' + V(x/ε)ψ + U(x)ψ` in one dimension.

use std::f64::consts::PI;

use rustfft::FftPlanner;

use crate::error::{FgaError, Result};
use crate::lattice::PeriodicPotential;
use crate::potential::ExternalPotential;
use crate::wavefield::{cell_count, WaveField};
use crate::C64;

/// Required `ε/Δx`.
pub const MIN_POINTS_PER_EPS: f64 = 32.0;
/// Required `ε/Δt`.
pub const MIN_STEPS_PER_EPS: f64 = 20.0;
/// Largest grid the solver accepts.
pub const MAX_POINTS: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceConfig {
    pub eps: f64,
    pub length: f64,
    pub points: usize,
    pub dt: f64,
    pub lattice: PeriodicPotential,
    pub external: ExternalPotential,
    /// May be negative (backward propagation).
    pub t_final: f64,
}

impl ReferenceConfig {
    /// Smallest power-of-two grid and the largest step meeting the resolution bounds.
    pub fn resolved(eps: f64, length: f64, lattice: PeriodicPotential, external: ExternalPotential, t_final: f64) -> Result<Self> {
        cell_count(length, eps)?;
        let need = (MIN_POINTS_PER_EPS * length / eps).ceil() as usize;
        let points = need.next_power_of_two();
        Ok(Self { eps, length, points, dt: eps / MIN_STEPS_PER_EPS, lattice, external, t_final })
    }

    pub fn validate(&self) -> Result<()> {
        cell_count(self.length, self.eps)?;
        if self.lattice.dim() != 1 {
            return Err(FgaError::Unsupported("the reference solver runs in one dimension only".into()));
        }
        self.external.validate(1)?;
        if self.points > MAX_POINTS {
            return Err(FgaError::Resource(format!(
                "{} grid points exceed the limit of {MAX_POINTS} ({} MiB per field); use a larger ε or a shorter domain",
                self.points,
                self.points * 16 >> 20
            )));
        }
        let dx = self.length / self.points as f64;
        if dx > self.eps / MIN_POINTS_PER_EPS * (1.0 + 1e-12) {
            return Err(FgaError::Resolution(format!("Δx = {dx:.3e} exceeds ε/32 = {:.3e}", self.eps / MIN_POINTS_PER_EPS)));
        }
        if !(self.dt > 0.0) || self.dt > self.eps / MIN_STEPS_PER_EPS * (1.0 + 1e-12) {
            return Err(FgaError::Resolution(format!("Δt = {:.3e} must lie in (0, ε/20 = {:.3e}]", self.dt, self.eps / MIN_STEPS_PER_EPS)));
        }
        if !self.t_final.is_finite() {
            return Err(FgaError::InvalidInput("final time must be finite".into()));
        }
        Ok(())
    }

    /// Steps and signed step size reaching `t_final` from zero.
    pub fn schedule(&self, span: f64) -> (usize, f64) {
        let steps = (span.abs() / self.dt - 1e-9).ceil().max(0.0) as usize;
        let h = if steps > 0 { span / steps as f64 } else { 0.0 };
        (steps, h)
    }
}

/// Strang propagator with precomputed phase factors for one step size.
struct Stepper {
    half_potential: Vec<C64>,
    kinetic: Vec<C64>,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    ifft: std::sync::Arc<dyn rustfft::Fft<f64>>,
    scratch: Vec<C64>,
}

impl Stepper {
    fn new(cfg: &ReferenceConfig, h: f64) -> Self {
        let n = cfg.points;
        let dx = cfg.length / n as f64;
        let eps = cfg.eps;
        let half_potential = (0..n)
            .map(|j| {
                let x = j as f64 * dx;
                let v = cfg.lattice.value(&[x / eps]) + cfg.external.value(&[x]);
                C64::from_polar(1.0, -v * h / (2.0 * eps))
            })
            .collect();
        let kinetic = (0..n)
            .map(|j| {
                let m = if j < n / 2 { j as f64 } else { j as f64 - n as f64 };
                let k = 2.0 * PI * m / cfg.length;
                // 1/N of the inverse transform folded in here
                C64::from_polar(1.0 / n as f64, -eps * k * k * h / 2.0)
            })
            .collect();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(n);
        let ifft = planner.plan_fft_inverse(n);
        let scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len().max(ifft.get_inplace_scratch_len())];
        Self { half_potential, kinetic, fft, ifft, scratch }
    }

    fn step(&mut self, psi: &mut [C64]) {
        for (z, f) in psi.iter_mut().zip(&self.half_potential) {
            *z *= f;
        }
        self.fft.process_with_scratch(psi, &mut self.scratch);
        for (z, f) in psi.iter_mut().zip(&self.kinetic) {
            *z *= f;
        }
        self.ifft.process_with_scratch(psi, &mut self.scratch);
        for (z, f) in psi.iter_mut().zip(&self.half_potential) {
            *z *= f;
        }
    }
}

/// `ψ(t_final)` from `ψ0` by Strang splitting.
pub fn reference_propagate(psi0: &WaveField, cfg: &ReferenceConfig) -> Result<WaveField> {
    let mut out = reference_checkpoints(psi0, cfg, &[cfg.t_final])?;
    Ok(out.pop().expect("one checkpoint requested"))
}

/// States at each requested time (sorted by absolute value, same sign as `t_final`).
pub fn reference_checkpoints(psi0: &WaveField, cfg: &ReferenceConfig, times: &[f64]) -> Result<Vec<WaveField>> {
    cfg.validate()?;
    if psi0.dim != 1
        || psi0.points != cfg.points
        || (psi0.length - cfg.length).abs() > 1e-12 * cfg.length
        || (psi0.eps - cfg.eps).abs() > 1e-12 * cfg.eps
    {
        return Err(FgaError::GridMismatch("initial field does not match the reference grid".into()));
    }
    let mut order: Vec<f64> = times.to_vec();
    if order.windows(2).any(|w| w[1].abs() < w[0].abs()) || order.iter().any(|t| t * cfg.t_final < 0.0) {
        return Err(FgaError::InvalidInput("checkpoint times must be monotone towards t_final".into()));
    }
    let mut psi = psi0.data.clone();
    let mut results = Vec::with_capacity(order.len());
    let mut now = 0.0;
    for t in order.drain(..) {
        let (steps, h) = cfg.schedule(t - now);
        if steps > 0 {
            let mut stepper = Stepper::new(cfg, h);
            for _ in 0..steps {
                stepper.step(&mut psi);
            }
        }
        now = t;
        let mut w = psi0.with_data(psi.clone());
        w.time = psi0.time + t;
        results.push(w);
    }
    Ok(results)
}
