//! End-to-end runs: bands → decomposition → trajectories → synthesis, and comparisons.

use crate::analytic::GaussianPacket;
use crate::bloch::{BandStructure, DEFAULT_GAP_FACTOR};
use crate::dispersion::{BandModel, BlochWaves, DispersionModel, FreeBand, TableBand};
use crate::dynamics::{integrate_ensemble, EnsembleResult, HamiltonianModel, IntegrationOptions};
use crate::error::{FgaError, Result};
use crate::lattice::{BrillouinGrid, PeriodicPotential};
use crate::phase_space::{
    reconstruct, windowed_adjoint, windowed_bloch_transform, PhaseSpaceGrid, TransformOptions, WindowedCoefficients,
    DEFAULT_SEED_THRESHOLD, DEFAULT_SPACING_BOUND, DEFAULT_TRUNCATION_RADIUS,
};
use crate::potential::ExternalPotential;
use crate::reference::{reference_checkpoints, ReferenceConfig};
use crate::synthesis::{l2_distance, synthesize, SynthesisPlan};
use crate::wavefield::{cell_count, WaveField};

/// Strang splitting error grows like `(T/ε)(Δt/ε)²`; at this step it stays near 1e-6 for `T/ε ≲ 50`.
pub const DEFAULT_REFERENCE_STEPS_PER_EPS: f64 = 1000.0;

/// Physical setup: domain, lattice potential `V` and external potential `U`.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub dim: usize,
    pub length: f64,
    pub lattice: PeriodicPotential,
    pub external: ExternalPotential,
}

/// Discretization parameters with their defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct Numerics {
    pub eps: f64,
    /// Brillouin nodes per axis requested for the band table.
    pub brillouin_nodes: usize,
    pub cutoff: usize,
    pub n_bands: usize,
    pub q_factor: f64,
    pub p_factor: f64,
    pub spacing_bound: f64,
    pub dt: f64,
    pub truncation_radius: f64,
    pub seed_threshold: f64,
    pub gap_factor: f64,
    /// Spatial grid points per lattice period.
    pub points_per_eps: usize,
    pub with_a1: bool,
    /// Reference-solver steps per unit of `ε` in time (`Δt = ε / this`).
    pub reference_steps_per_eps: f64,
}

impl Numerics {
    pub fn new(eps: f64) -> Self {
        Self {
            eps,
            brillouin_nodes: 256,
            cutoff: 16,
            n_bands: 8,
            q_factor: 0.5,
            p_factor: 0.5,
            spacing_bound: DEFAULT_SPACING_BOUND,
            dt: 1e-3,
            truncation_radius: DEFAULT_TRUNCATION_RADIUS,
            seed_threshold: DEFAULT_SEED_THRESHOLD,
            gap_factor: DEFAULT_GAP_FACTOR,
            points_per_eps: 16,
            with_a1: false,
            reference_steps_per_eps: DEFAULT_REFERENCE_STEPS_PER_EPS,
        }
    }

    pub fn transform_options(&self) -> TransformOptions {
        TransformOptions { truncation_radius: self.truncation_radius }
    }
}

/// Band data backing a run.
#[derive(Debug, Clone)]
pub enum Bands {
    /// `V = 0`: the unfolded parabola for band 1.
    Free(FreeBand),
    Lattice(BandStructure),
}

/// A configured problem with its band data computed once.
#[derive(Debug, Clone)]
pub struct Engine {
    pub problem: Problem,
    pub numerics: Numerics,
    pub bands: Bands,
    pub p_nodes: usize,
}

impl Engine {
    pub fn new(problem: Problem, numerics: Numerics) -> Result<Self> {
        if problem.lattice.dim() != problem.dim {
            return Err(FgaError::InvalidInput("lattice potential dimension differs from the problem".into()));
        }
        problem.external.validate(problem.dim)?;
        cell_count(problem.length, numerics.eps)?;
        let p_nodes = PhaseSpaceGrid::p_nodes_for(numerics.eps, numerics.p_factor);
        let bands = if problem.lattice.is_zero() {
            Bands::Free(FreeBand::new(problem.dim))
        } else {
            let m = numerics.brillouin_nodes.max(p_nodes);
            if m % p_nodes != 0 {
                return Err(FgaError::InvalidInput(format!(
                    "Brillouin nodes {m} must be a multiple of the p-grid size {p_nodes}"
                )));
            }
            let grid = BrillouinGrid::new(problem.dim, m)?;
            Bands::Lattice(BandStructure::compute(grid, &problem.lattice, numerics.n_bands, numerics.cutoff)?)
        };
        Ok(Self { problem, numerics, bands, p_nodes })
    }

    pub fn structure(&self) -> Option<&BandStructure> {
        match &self.bands {
            Bands::Lattice(s) => Some(s),
            Bands::Free(_) => None,
        }
    }

    /// Smooth band model for the dynamics; refuses bands that are not isolated.
    pub fn model(&self, band: usize) -> Result<Box<dyn BandModel + '_>> {
        match &self.bands {
            Bands::Free(f) if band == 0 => Ok(Box::new(f.clone())),
            Bands::Free(_) => Err(FgaError::Unsupported(
                "with V = 0 only band 1 (the unfolded parabola) is propagated".into(),
            )),
            Bands::Lattice(s) => {
                s.check_isolated(band, self.numerics.gap_factor)?;
                Ok(Box::new(DispersionModel::new(s, band)?))
            }
        }
    }

    /// Bloch waves of any tabulated band (no isolation requirement).
    pub fn waves(&self, band: usize) -> Result<Box<dyn BlochWaves + '_>> {
        match &self.bands {
            Bands::Free(f) if band == 0 => Ok(Box::new(f.clone())),
            Bands::Free(_) => Err(FgaError::Unsupported("with V = 0 only band 1 is represented".into())),
            Bands::Lattice(s) => {
                if band >= s.table.n_bands() {
                    return Err(FgaError::InvalidInput(format!("band {} not in table", band + 1)));
                }
                Ok(Box::new(TableBand { table: &s.table, band }))
            }
        }
    }

    /// Spatial points per axis: a power of two with at least `points_per_eps` per period.
    pub fn grid_points(&self) -> usize {
        let cells = (self.problem.length / self.numerics.eps).round() as usize;
        (cells * self.numerics.points_per_eps).next_power_of_two()
    }

    /// Packet sampled on the engine grid, optionally modulated by `u_n(p0, x/ε)`.
    pub fn initial_packet(&self, packet: &GaussianPacket, modulate: Option<usize>) -> Result<WaveField> {
        let waves = modulate.map(|b| self.waves(b)).transpose()?;
        packet.sample(waves.as_deref(), self.numerics.eps, self.problem.length, self.grid_points())
    }

    pub fn phase_space_grid(&self, psi: &WaveField) -> Result<PhaseSpaceGrid> {
        let n = &self.numerics;
        let grid = PhaseSpaceGrid::covering(psi, n.q_factor, self.p_nodes, n.spacing_bound, n.truncation_radius)?;
        grid.check_spacing()?;
        Ok(grid)
    }

    pub fn decompose(&self, psi: &WaveField, band: usize) -> Result<WindowedCoefficients> {
        let grid = self.phase_space_grid(psi)?;
        let waves = self.waves(band)?;
        windowed_bloch_transform(psi, waves.as_ref(), band, &grid, self.numerics.transform_options())
    }

    /// `‖ψ − Σ_{n<bands} Π_n ψ‖ / ‖ψ‖`.
    pub fn reconstruction_residual(&self, psi: &WaveField, bands: usize) -> Result<f64> {
        let grid = self.phase_space_grid(psi)?;
        let waves: Vec<Box<dyn BlochWaves + '_>> = (0..bands).map(|b| self.waves(b)).collect::<Result<_>>()?;
        let refs: Vec<&dyn BlochWaves> = waves.iter().map(|w| w.as_ref()).collect();
        let (_, residual) = reconstruct(psi, &refs, &grid, self.numerics.transform_options())?;
        Ok(residual / psi.norm())
    }

    /// Decompose, integrate and synthesize one band at each requested time.
    pub fn propagate(&self, psi: &WaveField, band: usize, times: &[f64]) -> Result<BandPropagation> {
        let model = self.model(band)?;
        let waves = self.waves(band)?;
        let grid = self.phase_space_grid(psi)?;
        let opts = self.numerics.transform_options();
        let coeffs = windowed_bloch_transform(psi, waves.as_ref(), band, &grid, opts)?;
        let kept = coeffs.thresholded(self.numerics.seed_threshold);
        let seeds = kept.seeds(0.0);
        let full_projection = windowed_adjoint(&coeffs, waves.as_ref(), psi, opts)?;
        let kept_projection = windowed_adjoint(&kept, waves.as_ref(), psi, opts)?;
        let threshold_impact = full_projection.sub(&kept_projection)?.norm();

        let t_final = times.iter().copied().fold(0.0, f64::max);
        let mut iopts = IntegrationOptions::new(t_final, self.numerics.dt, self.numerics.eps);
        iopts.checkpoints = times.to_vec();
        iopts.checkpoints.push(0.0);
        iopts.with_a1 = self.numerics.with_a1;
        let hamiltonian = HamiltonianModel::new(model.as_ref(), &self.problem.external)?;
        let ensemble = integrate_ensemble(&seeds, &hamiltonian, &iopts)?;

        let mut fields = Vec::with_capacity(times.len());
        for &t in times {
            let cp = ensemble.at(t).ok_or_else(|| FgaError::Numeric(format!("no checkpoint at t = {t}")))?;
            let plan = SynthesisPlan {
                band,
                waves: waves.as_ref(),
                grid: &grid,
                states: &cp.states,
                skeleton: psi,
                time: cp.time,
                options: opts,
            };
            fields.push(synthesize(&plan)?);
        }
        let start = ensemble.at(0.0).expect("t = 0 always recorded");
        let start_field = synthesize(&SynthesisPlan {
            band,
            waves: waves.as_ref(),
            grid: &grid,
            states: &start.states,
            skeleton: psi,
            time: 0.0,
            options: opts,
        })?;
        let t0_error = start_field.sub(&kept_projection)?.norm();
        Ok(BandPropagation {
            band,
            grid,
            coefficient_count: coeffs.values.len(),
            seed_count: seeds.len(),
            ensemble,
            fields,
            projection: kept_projection,
            t0_error,
            threshold_impact,
        })
    }

    /// Reference configuration on the engine grid (requires `points_per_eps ≥ 32`).
    pub fn reference_config(&self, t_final: f64) -> ReferenceConfig {
        let n = &self.numerics;
        ReferenceConfig {
            eps: n.eps,
            length: self.problem.length,
            points: self.grid_points(),
            dt: n.eps / n.reference_steps_per_eps,
            lattice: self.problem.lattice.clone(),
            external: self.problem.external.clone(),
            t_final,
        }
    }

    /// FGA band field against the reference solution from the same initial field.
    pub fn compare_with_reference(&self, psi: &WaveField, band: usize, t_final: f64) -> Result<Comparison> {
        let run = self.propagate(psi, band, &[t_final])?;
        let cfg = self.reference_config(t_final);
        let reference = reference_checkpoints(psi, &cfg, &[t_final])?.pop().expect("one checkpoint");
        let (abs, _) = l2_distance(&run.fields[0], &reference)?;
        Ok(Comparison { relative_error: abs / psi.norm(), fga: run, reference })
    }
}

/// Output of [`Engine::propagate`].
#[derive(Debug, Clone)]
pub struct BandPropagation {
    pub band: usize,
    pub grid: PhaseSpaceGrid,
    pub coefficient_count: usize,
    pub seed_count: usize,
    pub ensemble: EnsembleResult,
    /// One field per requested time, in request order.
    pub fields: Vec<WaveField>,
    /// Adjoint of the thresholded coefficients, `Π_n ψ0` up to thresholding.
    pub projection: WaveField,
    /// `‖ψ_FGA(0) − Π_n ψ0‖` with the same thresholded coefficients.
    pub t0_error: f64,
    /// `‖Π_n ψ0 − Π_n^{thresholded} ψ0‖`.
    pub threshold_impact: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub fga: BandPropagation,
    pub reference: WaveField,
    /// `‖ψ_FGA(T) − ψ_ref(T)‖ / ‖ψ0‖`.
    pub relative_error: f64,
}

/// Observed orders `log2(E(2ε)/E(ε))` for errors listed by halving ε.
pub fn observed_orders(errors: &[f64]) -> Vec<f64> {
    errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect()
}
