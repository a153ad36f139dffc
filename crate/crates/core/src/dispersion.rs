//! Smooth band models `p ↦ (E, ∇E, ∇²E, A, u)` consumed by the dynamics and synthesis.

use crate::bloch::{BandStructure, BandTable};
use crate::error::{FgaError, Result};
use crate::lattice::PlaneWaveBasis;
use crate::spline::{HermiteLine, PeriodicSpline};
use crate::C64;

/// Band data at one momentum. Hessian is row-major `d×d`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BandPoint {
    pub energy: f64,
    pub grad: [f64; 2],
    pub hess: [f64; 4],
    pub berry: [f64; 2],
}

/// Source of Bloch waves `u(p, ·)` for one band.
pub trait BlochWaves: Sync {
    fn dim(&self) -> usize;

    fn basis(&self) -> &PlaneWaveBasis;

    /// Plane-wave coefficients of `u(p, ·)` in the gauge carried along unwrapped momenta.
    fn bloch_coefficients(&self, p: &[f64]) -> Vec<C64>;
}

/// A single energy band viewed as a function of crystal momentum.
pub trait BandModel: BlochWaves {
    /// Band data at `p`; periodic models accept any real `p`.
    fn evaluate(&self, p: &[f64]) -> BandPoint;

    /// Whether momenta are identified modulo `2π` (true for lattice bands).
    fn is_periodic(&self) -> bool;

    /// Upper bound on `‖∇²E‖` used by the step-size heuristic.
    fn hessian_bound(&self) -> f64;
}

/// One band of a [`BandTable`] used only as a source of Bloch waves.
#[derive(Debug, Clone, Copy)]
pub struct TableBand<'a> {
    pub table: &'a BandTable,
    pub band: usize,
}

impl BlochWaves for TableBand<'_> {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn basis(&self) -> &PlaneWaveBasis {
        self.table.basis()
    }

    fn bloch_coefficients(&self, p: &[f64]) -> Vec<C64> {
        self.table.bloch_coefficients(self.band, p)
    }
}

/// Table-backed band. In `d = 1`, `E` is a quintic Hermite interpolant of the node
/// energies, velocities and curvatures, and `∇E`, `∇²E` are its derivatives; `A` is a
/// cubic B-spline. In `d = 2` every quantity is an independent tensor cubic B-spline.
#[derive(Debug, Clone)]
pub struct DispersionModel<'a> {
    structure: &'a BandStructure,
    band: usize,
    spline: PeriodicSpline,
    line: Option<HermiteLine>,
    hessian_bound: f64,
}

/// Recorded interpolation scheme for the energy.
pub const INTERPOLATION_1D: &str = "periodic quintic Hermite";
pub const INTERPOLATION_2D: &str = "periodic cubic B-spline";

impl<'a> DispersionModel<'a> {
    /// `band` is zero-based. Unusable (degenerate) bands are refused.
    pub fn new(structure: &'a BandStructure, band: usize) -> Result<Self> {
        let table = &structure.table;
        if band >= table.n_bands() {
            return Err(FgaError::InvalidInput(format!("band {} not in table", band + 1)));
        }
        if !table.is_usable(band) {
            return Err(FgaError::UnusableBand { band: band + 1, reason: "degenerate node".into() });
        }
        let d = table.dim();
        let nodes = table.n_nodes();
        let mut channels: Vec<Vec<f64>> = Vec::new();
        channels.push(table.energies(band).to_vec());
        for a in 0..d {
            channels.push((0..nodes).map(|j| structure.grad.at(band, j)[a]).collect());
        }
        for a in 0..d {
            for b in a..d {
                channels.push((0..nodes).map(|j| structure.hessian.at(band, j)[a * d + b]).collect());
            }
        }
        for a in 0..d {
            channels.push((0..nodes).map(|j| structure.berry.at(band, j)[a]).collect());
        }
        let hessian_bound = (0..nodes)
            .map(|j| structure.hessian.at(band, j).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        let line = (d == 1).then(|| HermiteLine::new(channels[0].clone(), channels[1].clone(), channels[2].clone()));
        Ok(Self {
            structure,
            band,
            spline: PeriodicSpline::new(d, table.grid().nodes_per_axis, &channels),
            line,
            hessian_bound,
        })
    }

    pub fn band(&self) -> usize {
        self.band
    }

    pub fn structure(&self) -> &BandStructure {
        self.structure
    }

    /// Scheme name and polynomial degree of the energy interpolant.
    pub fn interpolation(&self) -> (&'static str, usize) {
        if self.line.is_some() {
            (INTERPOLATION_1D, 5)
        } else {
            (INTERPOLATION_2D, 3)
        }
    }
}

impl BlochWaves for DispersionModel<'_> {
    fn dim(&self) -> usize {
        self.structure.table.dim()
    }

    fn basis(&self) -> &PlaneWaveBasis {
        self.structure.table.basis()
    }

    fn bloch_coefficients(&self, p: &[f64]) -> Vec<C64> {
        self.structure.table.bloch_coefficients(self.band, p)
    }
}

impl BandModel for DispersionModel<'_> {
    fn evaluate(&self, p: &[f64]) -> BandPoint {
        let d = self.dim();
        let mut vals = [0.0; 10];
        self.spline.eval(p, &mut vals);
        let mut out = BandPoint { energy: vals[0], ..Default::default() };
        out.grad[..d].copy_from_slice(&vals[1..1 + d]);
        if let Some(line) = &self.line {
            let (e, g, c) = line.eval(p[0]);
            out.energy = e;
            out.grad[0] = g;
            out.hess[0] = c;
            out.berry[0] = vals[3];
        } else {
            out.hess = [vals[3], vals[4], vals[4], vals[5]];
            out.berry = [vals[6], vals[7]];
        }
        out
    }

    fn is_periodic(&self) -> bool {
        true
    }

    fn hessian_bound(&self) -> f64 {
        self.hessian_bound
    }
}

/// Lowest band of the empty lattice unfolded: `E = |p|²/2`, `u ≡ 1`, `A = 0`.
///
/// Used for `V = 0`, where the folded band 1 touches band 2 at the zone edge.
#[derive(Debug, Clone)]
pub struct FreeBand {
    basis: PlaneWaveBasis,
}

impl FreeBand {
    pub fn new(dim: usize) -> Self {
        Self { basis: PlaneWaveBasis::new(dim, 0) }
    }
}

impl BlochWaves for FreeBand {
    fn dim(&self) -> usize {
        self.basis.dim
    }

    fn basis(&self) -> &PlaneWaveBasis {
        &self.basis
    }

    fn bloch_coefficients(&self, _p: &[f64]) -> Vec<C64> {
        vec![C64::new(1.0, 0.0)]
    }
}

impl BandModel for FreeBand {
    fn evaluate(&self, p: &[f64]) -> BandPoint {
        let mut out = BandPoint::default();
        for (a, &pa) in p.iter().enumerate() {
            out.energy += 0.5 * pa * pa;
            out.grad[a] = pa;
            out.hess[a * p.len() + a] = 1.0;
        }
        out
    }

    fn is_periodic(&self) -> bool {
        false
    }

    fn hessian_bound(&self) -> f64 {
        1.0
    }
}
