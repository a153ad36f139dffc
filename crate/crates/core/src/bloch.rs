//! Cell eigenproblem `H_ξ u = E u` in a plane-wave basis, gauge fixing and
//! derived band quantities (velocity, Hessian, Berry connection).

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{FgaError, Result};
use crate::lattice::{BrillouinGrid, PeriodicPotential, PlaneWaveBasis};
use crate::C64;

/// Offset used for the off-grid eigensolves behind the Berry connection.
pub const BERRY_STEP: f64 = 1e-5;
/// Offset of the five-point eigenvalue stencil used to cross-check the velocity identity.
pub const GRADIENT_FD_STEP: f64 = 1e-3;
/// Adjacent overlaps below this magnitude abort gauge fixing.
pub const MIN_LINK_OVERLAP: f64 = 0.1;
/// Default factor of the band-gap guard `min_gap ≥ factor·δξ·max|∇E|`.
pub const DEFAULT_GAP_FACTOR: f64 = 10.0;

const DEGENERACY_TOL: f64 = 1e-9;

/// `H_ξ` in the basis `e^{2πik·x}`, assembled from a dense table of potential differences.
#[derive(Debug, Clone)]
pub struct CellOperator {
    basis: PlaneWaveBasis,
    differences: Vec<C64>,
}

impl CellOperator {
    pub fn new(potential: &PeriodicPotential, cutoff: usize) -> Result<Self> {
        if cutoff < potential.support() {
            return Err(FgaError::Cutoff { cutoff, support: potential.support() });
        }
        Ok(Self {
            basis: PlaneWaveBasis::new(potential.dim(), cutoff),
            differences: potential.dense_difference_table(cutoff),
        })
    }

    pub fn basis(&self) -> &PlaneWaveBasis {
        &self.basis
    }

    pub fn dim(&self) -> usize {
        self.basis.dim
    }

    fn difference_index(&self, a: [i32; 2], b: [i32; 2]) -> usize {
        let two_k = 2 * self.basis.cutoff as i32;
        let span = (4 * self.basis.cutoff + 1) as i32;
        let d0 = a[0] - b[0] + two_k;
        if self.basis.dim == 1 {
            d0 as usize
        } else {
            (d0 * span + a[1] - b[1] + two_k) as usize
        }
    }

    pub fn matrix(&self, xi: &[f64]) -> DMatrix<C64> {
        let vecs = self.basis.vectors();
        let n = vecs.len();
        DMatrix::from_fn(n, n, |i, j| {
            let mut v = self.differences[self.difference_index(vecs[i], vecs[j])];
            if i == j {
                v += kinetic(vecs[i], xi);
            }
            v
        })
    }

    /// All eigenpairs at `ξ`, ascending; columns of the matrix are eigenvectors.
    pub fn eigen(&self, xi: &[f64]) -> Result<(Vec<f64>, DMatrix<C64>)> {
        let eig = SymmetricEigen::try_new(self.matrix(xi), f64::EPSILON, 0)
            .ok_or_else(|| FgaError::Eigensolver { node: xi.to_vec() })?;
        let order = ascending_order(eig.eigenvalues.as_slice());
        let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vectors = eig.eigenvectors.select_columns(&order);
        Ok((values, vectors))
    }

    pub fn eigenvalues(&self, xi: &[f64]) -> Vec<f64> {
        let mut vals: Vec<f64> = self.matrix(xi).symmetric_eigenvalues().iter().copied().collect();
        vals.sort_by(|a, b| a.total_cmp(b));
        vals
    }
}

fn kinetic(k: [i32; 2], xi: &[f64]) -> C64 {
    let s: f64 = xi
        .iter()
        .enumerate()
        .map(|(a, &x)| {
            let v = 2.0 * PI * k[a] as f64 + x;
            v * v
        })
        .sum();
    C64::new(0.5 * s, 0.0)
}

fn ascending_order(vals: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    order
}

/// Matrix of `H_ξ = ½(−i∇ + ξ)² + V` for `|k|∞ ≤ K`.
pub fn assemble_bloch_hamiltonian(
    xi: &[f64],
    potential: &PeriodicPotential,
    cutoff: usize,
) -> Result<DMatrix<C64>> {
    if xi.len() != potential.dim() {
        return Err(FgaError::InvalidInput(format!(
            "xi has {} components, potential has d={}",
            xi.len(),
            potential.dim()
        )));
    }
    if xi.iter().any(|x| !x.is_finite() || *x < -PI || *x > PI) {
        return Err(FgaError::InvalidInput(format!("xi={xi:?} outside the Brillouin zone")));
    }
    Ok(CellOperator::new(potential, cutoff)?.matrix(xi))
}

/// `⟨a, b⟩ = Σ conj(a_k) b_k`.
pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn normalize(c: &mut [C64]) {
    let n = c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if n > 0.0 {
        c.iter_mut().for_each(|z| *z /= n);
    }
}

/// Parallel-transport bookkeeping produced by [`fix_gauge`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaugeRecord {
    /// `holonomy[band][axis][line]`: phase of the closing link across the zone boundary.
    pub holonomy: Vec<Vec<Vec<f64>>>,
    /// Bands with degenerate nodes; stored but excluded from dynamics.
    pub usable: Vec<bool>,
    /// Largest `|Im⟨c_j, c_{j+1}⟩| / |⟨c_j, c_{j+1}⟩|` over all links, per band.
    pub max_link_imag: Vec<f64>,
    pub continuity_tol: f64,
}

/// Eigenpairs over a Brillouin grid.
#[derive(Debug, Clone)]
pub struct BandTable {
    potential: PeriodicPotential,
    grid: BrillouinGrid,
    operator: CellOperator,
    n_bands: usize,
    energies: Vec<f64>,
    vectors: Vec<C64>,
    upper: Option<Vec<f64>>,
    min_gap: Vec<f64>,
    min_gap_node: Vec<usize>,
    gauge: Option<GaugeRecord>,
}

/// Solves `H_ξ` at every grid node and keeps the `n_bands` lowest eigenpairs.
pub fn solve_bands(
    grid: BrillouinGrid,
    potential: &PeriodicPotential,
    n_bands: usize,
    cutoff: usize,
) -> Result<BandTable> {
    if grid.dim != potential.dim() {
        return Err(FgaError::InvalidInput("grid and potential dimensions differ".into()));
    }
    let operator = CellOperator::new(potential, cutoff)?;
    let dim = operator.basis().len();
    if n_bands == 0 || n_bands > dim {
        return Err(FgaError::InvalidInput(format!(
            "n_bands={n_bands} must lie in 1..={dim} for cutoff {cutoff}"
        )));
    }
    let nodes = grid.len();
    let solved: Vec<Result<(Vec<f64>, DMatrix<C64>)>> = (0..nodes)
        .into_par_iter()
        .map(|j| operator.eigen(&grid.node(j)))
        .collect();

    let mut energies = vec![0.0; n_bands * nodes];
    let mut vectors = vec![C64::new(0.0, 0.0); n_bands * nodes * dim];
    let mut upper = if n_bands < dim { Some(vec![0.0; nodes]) } else { None };
    for (j, res) in solved.into_iter().enumerate() {
        let (vals, vecs) = res?;
        for n in 0..n_bands {
            energies[n * nodes + j] = vals[n];
            let dst = &mut vectors[(n * nodes + j) * dim..(n * nodes + j + 1) * dim];
            for (k, z) in dst.iter_mut().enumerate() {
                *z = vecs[(k, n)];
            }
            normalize(dst);
        }
        if let Some(u) = upper.as_mut() {
            u[j] = vals[n_bands];
        }
    }
    let mut table = BandTable {
        potential: potential.clone(),
        grid,
        operator,
        n_bands,
        energies,
        vectors,
        upper,
        min_gap: vec![f64::INFINITY; n_bands],
        min_gap_node: vec![0; n_bands],
        gauge: None,
    };
    for n in 0..n_bands {
        for j in 0..nodes {
            let g = table.local_gap(n, j);
            if g < table.min_gap[n] {
                table.min_gap[n] = g;
                table.min_gap_node[n] = j;
            }
        }
    }
    Ok(table)
}

impl BandTable {
    pub fn grid(&self) -> BrillouinGrid {
        self.grid
    }

    pub fn potential(&self) -> &PeriodicPotential {
        &self.potential
    }

    pub fn basis(&self) -> &PlaneWaveBasis {
        self.operator.basis()
    }

    pub fn operator(&self) -> &CellOperator {
        &self.operator
    }

    pub fn cutoff(&self) -> usize {
        self.basis().cutoff
    }

    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.len()
    }

    pub fn energy(&self, band: usize, node: usize) -> f64 {
        self.energies[band * self.n_nodes() + node]
    }

    pub fn energies(&self, band: usize) -> &[f64] {
        let m = self.n_nodes();
        &self.energies[band * m..(band + 1) * m]
    }

    pub fn coefficients(&self, band: usize, node: usize) -> &[C64] {
        let d = self.basis().len();
        let off = (band * self.n_nodes() + node) * d;
        &self.vectors[off..off + d]
    }

    fn coefficients_mut(&mut self, band: usize, node: usize) -> &mut [C64] {
        let d = self.basis().len();
        let off = (band * self.n_nodes() + node) * d;
        &mut self.vectors[off..off + d]
    }

    /// Multiplies the stored eigenvector at one node by `e^{iθ}`.
    pub fn rephase(&mut self, band: usize, node: usize, theta: f64) {
        let f = C64::from_polar(1.0, theta);
        self.coefficients_mut(band, node).iter_mut().for_each(|z| *z *= f);
    }

    /// Distance from band `band` to its neighbours at one node.
    pub fn local_gap(&self, band: usize, node: usize) -> f64 {
        let e = self.energy(band, node);
        let below = if band > 0 { e - self.energy(band - 1, node) } else { f64::INFINITY };
        let above = if band + 1 < self.n_bands {
            self.energy(band + 1, node) - e
        } else {
            self.upper.as_ref().map_or(f64::INFINITY, |u| u[node] - e)
        };
        below.min(above)
    }

    pub fn min_gap(&self, band: usize) -> f64 {
        self.min_gap[band]
    }

    pub fn min_gap_location(&self, band: usize) -> Vec<f64> {
        self.grid.node(self.min_gap_node[band])
    }

    pub fn gauge(&self) -> Option<&GaugeRecord> {
        self.gauge.as_ref()
    }

    pub fn is_gauge_fixed(&self) -> bool {
        self.gauge.is_some()
    }

    /// Whether the band can feed dynamics (no degenerate node; true before gauge fixing).
    pub fn is_usable(&self, band: usize) -> bool {
        self.gauge.as_ref().is_none_or(|g| g.usable[band])
    }

    pub fn holonomy(&self, band: usize, axis: usize, line: usize) -> f64 {
        self.gauge.as_ref().map_or(0.0, |g| g.holonomy[band][axis][line])
    }

    /// Checks the gauge-continuity invariant on every link of a usable band.
    pub fn check_gauge_continuity(&self, band: usize) -> Result<()> {
        let g = self
            .gauge
            .as_ref()
            .ok_or_else(|| FgaError::InvariantViolation("gauge not fixed".into()))?;
        if g.max_link_imag[band] > g.continuity_tol {
            return Err(FgaError::InvariantViolation(format!(
                "band {band}: link phase {:.3e} exceeds continuity tolerance {:.3e}",
                g.max_link_imag[band], g.continuity_tol
            )));
        }
        Ok(())
    }

    /// Coefficients at an unbounded node index, continued across the zone boundary with
    /// the lattice shift and the recorded holonomy.
    pub fn continued_coefficients(&self, band: usize, idx: [i64; 2]) -> Vec<C64> {
        let m = self.grid.nodes_per_axis as i64;
        let d = self.dim();
        let mut r = [0usize; 2];
        let mut w = [0i64; 2];
        for a in 0..d {
            r[a] = idx[a].rem_euclid(m) as usize;
            w[a] = idx[a].div_euclid(m);
        }
        let node = self.grid.flat_index(r);
        let base = self.coefficients(band, node);
        if w[0] == 0 && w[1] == 0 {
            return base.to_vec();
        }
        let mut c = base.to_vec();
        let mut phase = 0.0;
        for a in 0..d {
            if w[a] != 0 {
                c = self.basis().shift(&c, a, w[a]);
                let line = if d == 1 { 0 } else { r[1 - a] };
                phase += w[a] as f64 * self.holonomy(band, a, line);
            }
        }
        if phase != 0.0 {
            let f = C64::from_polar(1.0, -phase);
            c.iter_mut().for_each(|z| *z *= f);
        }
        c
    }

    /// Coefficients of `u_n(ξ, ·)` at an arbitrary (possibly unwrapped) momentum:
    /// four-point Lagrange interpolation per axis of gauge-continued node vectors,
    /// renormalized. Exact at grid nodes.
    pub fn bloch_coefficients(&self, band: usize, xi: &[f64]) -> Vec<C64> {
        let h = self.grid.spacing();
        let d = self.dim();
        let mut base = [0i64; 2];
        let mut weights = [[0.0; 4]; 2];
        for a in 0..d {
            let s = (xi[a] + PI) / h;
            let mut j = s.floor();
            let mut u = s - j;
            if u < 1e-12 {
                u = 0.0;
            } else if u > 1.0 - 1e-12 {
                u = 0.0;
                j += 1.0;
            }
            base[a] = j as i64;
            weights[a] = lagrange_weights(u);
        }
        let len = self.basis().len();
        let mut out = vec![C64::new(0.0, 0.0); len];
        let (n0, n1) = if d == 1 { (4, 1) } else { (4, 4) };
        for s0 in 0..n0 {
            for s1 in 0..n1 {
                let w = weights[0][s0] * if d == 1 { 1.0 } else { weights[1][s1] };
                if w == 0.0 {
                    continue;
                }
                let idx = [base[0] + s0 as i64 - 1, base[1] + s1 as i64 - 1];
                let c = self.continued_coefficients(band, idx);
                for (o, z) in out.iter_mut().zip(&c) {
                    *o += z * w;
                }
            }
        }
        normalize(&mut out);
        out
    }

    /// Velocity identity `∇E = Σ_k |c_k|² (2πk + ξ)` for given coefficients.
    pub fn gradient_identity(&self, coeffs: &[C64], xi: &[f64]) -> Vec<f64> {
        let vecs = self.basis().vectors();
        (0..self.dim())
            .map(|a| {
                coeffs
                    .iter()
                    .zip(vecs)
                    .map(|(c, k)| c.norm_sqr() * (2.0 * PI * k[a] as f64 + xi[a]))
                    .sum()
            })
            .collect()
    }

    /// Fresh eigensolve at an arbitrary `ξ` followed by the velocity identity.
    pub fn point_gradient(&self, band: usize, xi: &[f64]) -> Result<Vec<f64>> {
        let (_, vecs) = self.operator.eigen(xi)?;
        let c: Vec<C64> = vecs.column(band).iter().copied().collect();
        Ok(self.gradient_identity(&c, xi))
    }
}

/// Lagrange weights for nodes at offsets −1, 0, 1, 2 evaluated at `u ∈ [0, 1)`.
pub(crate) fn lagrange_weights(u: f64) -> [f64; 4] {
    [
        -u * (u - 1.0) * (u - 2.0) / 6.0,
        (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0,
        -(u + 1.0) * u * (u - 2.0) / 2.0,
        (u + 1.0) * u * (u - 1.0) / 6.0,
    ]
}

/// `u_n(ξ, x) = Σ_k ĉ_k e^{2πi k·x}` for explicit coefficients.
pub fn bloch_wave_value(basis: &PlaneWaveBasis, coeffs: &[C64], x: &[f64]) -> C64 {
    basis
        .vectors()
        .iter()
        .zip(coeffs)
        .map(|(k, c)| {
            let phase: f64 = (0..basis.dim).map(|a| k[a] as f64 * x[a]).sum();
            c * C64::from_polar(1.0, 2.0 * PI * phase)
        })
        .sum()
}

/// Bloch wave of band `band` at momentum `ξ` and fast position `x`.
pub fn evaluate_bloch_wave(table: &BandTable, band: usize, xi: &[f64], x: &[f64]) -> C64 {
    let c = table.bloch_coefficients(band, xi);
    bloch_wave_value(table.basis(), &c, x)
}

/// Parallel-transport gauge along axis-ordered sweeps; the closing-link phase is recorded.
pub fn fix_gauge(mut table: BandTable) -> Result<BandTable> {
    let d = table.dim();
    let m = table.grid.nodes_per_axis;
    let nb = table.n_bands;
    let lines = if d == 1 { 1 } else { m };
    let mut holonomy = vec![vec![vec![0.0; lines]; d]; nb];
    let mut usable = vec![true; nb];
    let mut max_link_imag = vec![0.0; nb];

    for n in 0..nb {
        for j in 0..table.n_nodes() {
            let scale = 1.0f64.max(table.energy(n, j).abs());
            if table.local_gap(n, j) < DEGENERACY_TOL * scale {
                usable[n] = false;
            }
        }
        let check = |ok: bool, node: usize, o: C64| -> Result<()> {
            if ok && o.norm() < MIN_LINK_OVERLAP {
                return Err(FgaError::GaugeFailure { band: n + 1, node, overlap: o.norm() });
            }
            Ok(())
        };
        let align = |t: &mut BandTable, from: usize, to: usize| -> C64 {
            let o = inner(t.coefficients(n, from), t.coefficients(n, to));
            if o.norm() > 0.0 {
                let f = o.conj() / o.norm();
                t.coefficients_mut(n, to).iter_mut().for_each(|z| *z *= f);
            }
            o
        };
        let grid = table.grid;
        if d == 1 {
            for j in 1..m {
                let o = align(&mut table, j - 1, j);
                check(usable[n], j, o)?;
            }
        } else {
            for i0 in 1..m {
                let o = align(&mut table, grid.flat_index([i0 - 1, 0]), grid.flat_index([i0, 0]));
                check(usable[n], grid.flat_index([i0, 0]), o)?;
            }
            for i0 in 0..m {
                for i1 in 1..m {
                    let to = grid.flat_index([i0, i1]);
                    let o = align(&mut table, grid.flat_index([i0, i1 - 1]), to);
                    check(usable[n], to, o)?;
                }
            }
        }
        for (axis, hol) in holonomy[n].iter_mut().enumerate() {
            for (line, h) in hol.iter_mut().enumerate() {
                let mut last = [0usize; 2];
                last[axis] = m - 1;
                let mut first = [0usize; 2];
                if d == 2 {
                    last[1 - axis] = line;
                    first[1 - axis] = line;
                }
                let a = table.coefficients(n, table.grid.flat_index(last));
                let b = table.basis().shift(table.coefficients(n, table.grid.flat_index(first)), axis, 1);
                let o = inner(a, &b);
                check(usable[n], table.grid.flat_index(first), o)?;
                *h = o.arg();
            }
        }
    }
    table.gauge = Some(GaugeRecord {
        holonomy,
        usable,
        max_link_imag: vec![0.0; nb],
        continuity_tol: 1e-6,
    });
    for n in 0..nb {
        let mut worst: f64 = 0.0;
        for_each_link(&table, |j, nb_idx, axis| {
            let a = table.coefficients(n, j);
            let b = table.continued_coefficients(n, nb_idx);
            let o = inner(a, &b);
            let _ = axis;
            if o.norm() > 0.0 {
                worst = worst.max((o.im / o.norm()).abs());
            }
        });
        max_link_imag[n] = worst;
    }
    if let Some(g) = table.gauge.as_mut() {
        g.max_link_imag = max_link_imag;
    }
    Ok(table)
}

/// Visits every forward link `(node, neighbour index, axis)` of the grid torus.
fn for_each_link(table: &BandTable, mut f: impl FnMut(usize, [i64; 2], usize)) {
    let d = table.dim();
    for j in 0..table.n_nodes() {
        let idx = table.grid.multi_index(j);
        for axis in 0..d {
            let mut nb = [idx[0] as i64, idx[1] as i64];
            nb[axis] += 1;
            f(j, nb, axis);
        }
    }
}

/// Berry connection samples `A_n(ξ_j) = Re[i⟨c, Dc⟩]` with the raw imaginary part kept.
#[derive(Debug, Clone, PartialEq)]
pub struct BerrySamples {
    pub dim: usize,
    pub n_nodes: usize,
    /// `[band][node][axis]`.
    pub values: Vec<f64>,
    /// `Im(i⟨c, Dc⟩)`, zero in exact arithmetic.
    pub imaginary: Vec<f64>,
    /// `|⟨c,Dc⟩ + ⟨Dc,c⟩| / ‖Dc‖` per sample.
    pub norm_derivative: Vec<f64>,
}

impl BerrySamples {
    pub fn at(&self, band: usize, node: usize) -> &[f64] {
        let o = (band * self.n_nodes + node) * self.dim;
        &self.values[o..o + self.dim]
    }

    pub fn max_imaginary(&self, band: usize) -> f64 {
        let len = self.n_nodes * self.dim;
        self.imaginary[band * len..(band + 1) * len].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs(&self, band: usize) -> f64 {
        let len = self.n_nodes * self.dim;
        self.values[band * len..(band + 1) * len].iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Berry connection by a centred five-point difference with off-grid eigensolves at `ξ ± δe_a`, `ξ ± 2δe_a`.
///
/// The phases of the off-grid vectors follow the gauge: the link phase to the
/// neighbouring node is distributed linearly over the offset `δ`.
pub fn berry_connection(table: &BandTable) -> Result<BerrySamples> {
    if !table.is_gauge_fixed() {
        return Err(FgaError::InvalidInput("berry_connection requires a gauge-fixed table".into()));
    }
    let d = table.dim();
    let nb = table.n_bands();
    let nodes = table.n_nodes();
    let h = table.grid.spacing();
    let delta = BERRY_STEP;

    type NodeRow = Vec<(f64, f64, f64)>;
    let per_node: Vec<Result<NodeRow>> = (0..nodes)
        .into_par_iter()
        .map(|j| {
            let xi = table.grid.node(j);
            let idx = table.grid.multi_index(j);
            let mut row = vec![(0.0, 0.0, 0.0); nb * d];
            for a in 0..d {
                // Five-point stencil at ±δ, ±2δ: (8(c₊ − c₋) − (c₊₊ − c₋₋)) / 12δ.
                let mut sides: Vec<Vec<Vec<C64>>> = Vec::with_capacity(4);
                for s in [1i64, -1, 2, -2] {
                    let mut x = xi.clone();
                    x[a] += s as f64 * delta;
                    let (_, vecs) = table.operator.eigen(&x)?;
                    let mut per_band = Vec::with_capacity(nb);
                    for n in 0..nb {
                        let mut c: Vec<C64> = vecs.column(n).iter().copied().collect();
                        let here = table.coefficients(n, j);
                        let mut nidx = [idx[0] as i64, idx[1] as i64];
                        nidx[a] += s.signum();
                        let link = inner(here, &table.continued_coefficients(n, nidx)).arg();
                        let target = link * s.abs() as f64 * delta / h;
                        let cur = inner(here, &c).arg();
                        let norm = c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                        let f = C64::from_polar(1.0 / norm, target - cur);
                        c.iter_mut().for_each(|z| *z *= f);
                        per_band.push(c);
                    }
                    sides.push(per_band);
                }
                for n in 0..nb {
                    let here = table.coefficients(n, j);
                    let dc: Vec<C64> = (0..here.len())
                        .map(|k| {
                            let near = sides[0][n][k] - sides[1][n][k];
                            let far = sides[2][n][k] - sides[3][n][k];
                            (8.0 * near - far) / (12.0 * delta)
                        })
                        .collect();
                    let r = C64::new(0.0, 1.0) * inner(here, &dc);
                    let dn = dc.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
                    let sym = (inner(here, &dc) + inner(&dc, here)).norm();
                    let rel = if dn > 0.0 { sym / dn } else { sym };
                    row[n * d + a] = (r.re, r.im, rel);
                }
            }
            Ok(row)
        })
        .collect();

    let mut values = vec![0.0; nb * nodes * d];
    let mut imaginary = vec![0.0; nb * nodes * d];
    let mut norm_derivative = vec![0.0; nb * nodes * d];
    for (j, row) in per_node.into_iter().enumerate() {
        let row = row?;
        for n in 0..nb {
            for a in 0..d {
                let o = (n * nodes + j) * d + a;
                let (re, im, rel) = row[n * d + a];
                if table.is_usable(n) {
                    values[o] = re;
                    imaginary[o] = im;
                    norm_derivative[o] = rel;
                }
            }
        }
    }
    Ok(BerrySamples { dim: d, n_nodes: nodes, values, imaginary, norm_derivative })
}

/// Band velocities from the identity, with the finite-difference cross-check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSamples {
    pub dim: usize,
    pub n_nodes: usize,
    /// `[band][node][axis]`, identity route.
    pub values: Vec<f64>,
    /// Max `|identity − finite difference|` per band over checked nodes.
    pub discrepancy: Vec<f64>,
    /// `discrepancy / max(1, max|∇E|)` per band.
    pub relative_discrepancy: Vec<f64>,
    pub max_abs: Vec<f64>,
    pub checked_nodes: Vec<usize>,
}

impl GradientSamples {
    pub fn at(&self, band: usize, node: usize) -> &[f64] {
        let o = (band * self.n_nodes + node) * self.dim;
        &self.values[o..o + self.dim]
    }
}

/// Five-point eigenvalue difference along one axis at an arbitrary `ξ`.
pub fn energy_gradient_fd(op: &CellOperator, band: usize, xi: &[f64], axis: usize, step: f64) -> f64 {
    let e = |s: f64| {
        let mut x = xi.to_vec();
        x[axis] += s * step;
        op.eigenvalues(&x)[band]
    };
    (-e(2.0) + 8.0 * e(1.0) - 8.0 * e(-1.0) + e(-2.0)) / (12.0 * step)
}

/// Second difference of eigenvalues, `∂²E/∂ξ_a∂ξ_b`, at an arbitrary `ξ`.
pub fn energy_hessian_fd(op: &CellOperator, band: usize, xi: &[f64], a: usize, b: usize, step: f64) -> f64 {
    let e = |sa: f64, sb: f64| {
        let mut x = xi.to_vec();
        x[a] += sa * step;
        x[b] += sb * step;
        op.eigenvalues(&x)[band]
    };
    if a == b {
        (-e(2.0, 0.0) / 2.0 + 16.0 * e(1.0, 0.0) / 2.0 - 30.0 * e(0.0, 0.0) / 2.0 + 16.0 * e(-1.0, 0.0) / 2.0
            - e(-2.0, 0.0) / 2.0)
            / (6.0 * step * step)
    } else {
        (e(1.0, 1.0) - e(1.0, -1.0) - e(-1.0, 1.0) + e(-1.0, -1.0)) / (4.0 * step * step)
    }
}

/// Velocity identity at every node; eigenvalue differences on a strided subset.
pub fn grad_energy(table: &BandTable) -> Result<GradientSamples> {
    if !table.is_gauge_fixed() {
        return Err(FgaError::InvalidInput("grad_energy requires a gauge-fixed table".into()));
    }
    let d = table.dim();
    let nb = table.n_bands();
    let nodes = table.n_nodes();
    let mut values = vec![0.0; nb * nodes * d];
    for n in 0..nb {
        for j in 0..nodes {
            let g = table.gradient_identity(table.coefficients(n, j), &table.grid.node(j));
            values[(n * nodes + j) * d..(n * nodes + j + 1) * d].copy_from_slice(&g);
        }
    }
    let stride = if d == 1 { 1 } else { nodes.div_ceil(256).max(1) };
    let checked_nodes: Vec<usize> = (0..nodes).step_by(stride).collect();
    let fd: Vec<Vec<f64>> = checked_nodes
        .par_iter()
        .map(|&j| {
            let xi = table.grid.node(j);
            let mut out = vec![0.0; nb * d];
            for a in 0..d {
                let e = |s: f64| {
                    let mut x = xi.clone();
                    x[a] += s * GRADIENT_FD_STEP;
                    table.operator.eigenvalues(&x)
                };
                let (p2, p1, m1, m2) = (e(2.0), e(1.0), e(-1.0), e(-2.0));
                for n in 0..nb {
                    out[n * d + a] = (-p2[n] + 8.0 * p1[n] - 8.0 * m1[n] + m2[n]) / (12.0 * GRADIENT_FD_STEP);
                }
            }
            out
        })
        .collect();
    let mut discrepancy = vec![0.0; nb];
    let mut max_abs = vec![0.0f64; nb];
    for n in 0..nb {
        for j in 0..nodes {
            for a in 0..d {
                max_abs[n] = max_abs[n].max(values[(n * nodes + j) * d + a].abs());
            }
        }
        if !table.is_usable(n) {
            continue;
        }
        for (c, &j) in checked_nodes.iter().enumerate() {
            for a in 0..d {
                let diff = (values[(n * nodes + j) * d + a] - fd[c][n * d + a]).abs();
                discrepancy[n] = f64::max(discrepancy[n], diff);
            }
        }
        let tol = 1e-4 * (1.0 + max_abs[n]);
        if discrepancy[n] > tol {
            return Err(FgaError::Consistency { band: n + 1, discrepancy: discrepancy[n], tolerance: tol });
        }
    }
    let relative_discrepancy = discrepancy.iter().zip(&max_abs).map(|(e, m)| e / m.max(1.0)).collect();
    Ok(GradientSamples { dim: d, n_nodes: nodes, values, discrepancy, relative_discrepancy, max_abs, checked_nodes })
}

/// Band Hessians, `[band][node][a][b]`, symmetric by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianSamples {
    pub dim: usize,
    pub n_nodes: usize,
    pub values: Vec<f64>,
}

impl HessianSamples {
    pub fn at(&self, band: usize, node: usize) -> &[f64] {
        let s = self.dim * self.dim;
        let o = (band * self.n_nodes + node) * s;
        &self.values[o..o + s]
    }
}

/// Fourth-order centred periodic difference of the stored velocities, symmetrized.
pub fn hessian_energy(table: &BandTable, grad: &GradientSamples) -> HessianSamples {
    let d = table.dim();
    let nb = table.n_bands();
    let nodes = table.n_nodes();
    let m = table.grid.nodes_per_axis as i64;
    let h = table.grid.spacing();
    let mut values = vec![0.0; nb * nodes * d * d];
    for n in 0..nb {
        for j in 0..nodes {
            let idx = table.grid.multi_index(j);
            let mut raw = [[0.0; 2]; 2];
            for b in 0..d {
                let at = |s: i64| {
                    let mut q = [idx[0] as i64, idx[1] as i64];
                    q[b] = (q[b] + s).rem_euclid(m);
                    grad.at(n, table.grid.flat_index([q[0] as usize, q[1] as usize])).to_vec()
                };
                let (p2, p1, m1, m2) = (at(2), at(1), at(-1), at(-2));
                for a in 0..d {
                    raw[a][b] = (-p2[a] + 8.0 * p1[a] - 8.0 * m1[a] + m2[a]) / (12.0 * h);
                }
            }
            let o = (n * nodes + j) * d * d;
            for a in 0..d {
                for b in 0..d {
                    values[o + a * d + b] = 0.5 * (raw[a][b] + raw[b][a]);
                }
            }
        }
    }
    HessianSamples { dim: d, n_nodes: nodes, values }
}

/// Sum-over-states Hessian at an arbitrary `ξ`:
/// `∂_a∂_b E_n = δ_ab + 2 Re Σ_{m≠n} ⟨c_n, v_a c_m⟩⟨c_m, v_b c_n⟩ / (E_n − E_m)`
/// with `v_a = 2πk_a + ξ_a`. Used as a cross-check of the grid Hessian.
pub fn hessian_sum_over_states(op: &CellOperator, band: usize, xi: &[f64]) -> Result<Vec<f64>> {
    let d = xi.len();
    let (vals, vecs) = op.eigen(xi)?;
    let vel: Vec<Vec<f64>> = (0..d)
        .map(|a| op.basis().vectors().iter().map(|k| 2.0 * PI * k[a] as f64 + xi[a]).collect())
        .collect();
    let cn: Vec<C64> = vecs.column(band).iter().copied().collect();
    let mut out = vec![0.0; d * d];
    for a in 0..d {
        out[a * d + a] = 1.0;
    }
    for m in 0..vals.len() {
        if m == band {
            continue;
        }
        let cm: Vec<C64> = vecs.column(m).iter().copied().collect();
        let mat = |a: usize| -> C64 { cn.iter().zip(&cm).zip(&vel[a]).map(|((x, y), v)| x.conj() * y * *v).sum() };
        let denom = vals[band] - vals[m];
        for a in 0..d {
            for b in 0..d {
                out[a * d + b] += 2.0 * (mat(a) * mat(b).conj()).re / denom;
            }
        }
    }
    Ok(out)
}

/// Gauge-fixed table with all derived samples.
#[derive(Debug, Clone)]
pub struct BandStructure {
    pub table: BandTable,
    pub berry: BerrySamples,
    pub grad: GradientSamples,
    pub hessian: HessianSamples,
}

impl BandStructure {
    /// `solve_bands → fix_gauge → berry_connection → grad_energy → hessian_energy`.
    pub fn compute(grid: BrillouinGrid, potential: &PeriodicPotential, n_bands: usize, cutoff: usize) -> Result<Self> {
        let table = fix_gauge(solve_bands(grid, potential, n_bands, cutoff)?)?;
        let berry = berry_connection(&table)?;
        let grad = grad_energy(&table)?;
        let hessian = hessian_energy(&table, &grad);
        Ok(Self { table, berry, grad, hessian })
    }

    /// Guard threshold `factor · δξ · max|∇E_n|`.
    pub fn gap_threshold(&self, band: usize, factor: f64) -> f64 {
        factor * self.table.grid.spacing() * self.grad.max_abs[band]
    }

    /// Refuses bands whose local gap drops below the guard anywhere on the grid.
    pub fn check_isolated(&self, band: usize, factor: f64) -> Result<()> {
        if band >= self.table.n_bands() {
            return Err(FgaError::InvalidInput(format!(
                "band {} requested, table holds {}",
                band + 1,
                self.table.n_bands()
            )));
        }
        let threshold = self.gap_threshold(band, factor);
        if self.table.min_gap(band) < threshold {
            return Err(FgaError::BandNotIsolated {
                band: band + 1,
                gap: self.table.min_gap(band),
                xi: self.table.min_gap_location(band),
                threshold,
            });
        }
        if !self.table.is_usable(band) {
            return Err(FgaError::UnusableBand { band: band + 1, reason: "degenerate node".into() });
        }
        Ok(())
    }

    /// Grid nodes where the local gap of `band` is below the guard.
    pub fn offending_nodes(&self, band: usize, factor: f64) -> Vec<Vec<f64>> {
        let threshold = self.gap_threshold(band, factor);
        (0..self.table.n_nodes())
            .filter(|&j| self.table.local_gap(band, j) < threshold)
            .map(|j| self.table.grid.node(j))
            .collect()
    }

    /// CSV: band, ξ…, E, ∇E…, A…, min_gap (bands 1-based).
    pub fn to_csv(&self, bands: &[usize]) -> String {
        let d = self.table.dim();
        let axes = ["x", "y"];
        let mut out = String::from("band");
        for ax in &axes[..d] {
            let _ = write!(out, ",xi_{ax}");
        }
        out.push_str(",E");
        for ax in &axes[..d] {
            let _ = write!(out, ",dE_{ax}");
        }
        for ax in &axes[..d] {
            let _ = write!(out, ",A_{ax}");
        }
        out.push_str(",min_gap\n");
        for &n in bands {
            for j in 0..self.table.n_nodes() {
                let _ = write!(out, "{}", n + 1);
                for x in self.table.grid.node(j) {
                    let _ = write!(out, ",{x:.17e}");
                }
                let _ = write!(out, ",{:.17e}", self.table.energy(n, j));
                for g in self.grad.at(n, j) {
                    let _ = write!(out, ",{g:.17e}");
                }
                for a in self.berry.at(n, j) {
                    let _ = write!(out, ",{a:.17e}");
                }
                let _ = writeln!(out, ",{:.17e}", self.table.min_gap(n));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos_table(m: usize, k: usize, n: usize) -> BandTable {
        let g = BrillouinGrid::new(1, m).unwrap();
        fix_gauge(solve_bands(g, &PeriodicPotential::cosine(1, 1.0), n, k).unwrap()).unwrap()
    }

    #[test]
    fn free_kinetic_diagonal() {
        let h = assemble_bloch_hamiltonian(&[0.0], &PeriodicPotential::zero(1), 1).unwrap();
        let mut diag: Vec<f64> = (0..3).map(|i| h[(i, i)].re).collect();
        diag.sort_by(f64::total_cmp);
        let tp2 = 2.0 * PI * PI;
        assert_eq!(diag[0], 0.0);
        assert!((diag[1] - tp2).abs() < 1e-12 && (diag[2] - tp2).abs() < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(h[(i, j)], C64::new(0.0, 0.0));
                }
            }
        }
    }

    #[test]
    fn free_lowest_eigenvalue_is_half_xi_squared() {
        let op = CellOperator::new(&PeriodicPotential::zero(1), 4).unwrap();
        assert!((op.eigenvalues(&[0.5])[0] - 0.125).abs() < 1e-14);
    }

    #[test]
    fn cosine_couples_adjacent_modes_by_one_half() {
        let h = assemble_bloch_hamiltonian(&[0.3], &PeriodicPotential::cosine(1, 1.0), 3).unwrap();
        for i in 0..7usize {
            for j in 0..7usize {
                if i != j {
                    let expect = if i.abs_diff(j) == 1 { 0.5 } else { 0.0 };
                    assert_eq!(h[(i, j)], C64::new(expect, 0.0));
                }
            }
        }
    }

    #[test]
    fn cutoff_below_support_is_rejected() {
        let v = PeriodicPotential::new(1, vec![(vec![2], C64::new(0.1, 0.0)), (vec![-2], C64::new(0.1, 0.0))]).unwrap();
        assert!(matches!(assemble_bloch_hamiltonian(&[0.0], &v, 1), Err(FgaError::Cutoff { .. })));
    }

    #[test]
    fn hamiltonian_is_hermitian() {
        let v = PeriodicPotential::new(
            2,
            vec![
                (vec![1, 0], C64::new(0.3, 0.2)),
                (vec![-1, 0], C64::new(0.3, -0.2)),
                (vec![1, -1], C64::new(-0.1, 0.4)),
                (vec![-1, 1], C64::new(-0.1, -0.4)),
            ],
        )
        .unwrap();
        let h = assemble_bloch_hamiltonian(&[0.4, -1.1], &v, 3).unwrap();
        let diff = (&h - h.adjoint()).iter().fold(0.0f64, |m, z| m.max(z.norm()));
        let scale = h.iter().fold(0.0f64, |m, z| m.max(z.norm()));
        assert!(diff <= 1e-13 * scale);
    }

    #[test]
    fn folded_free_dispersion_and_crossing_gap() {
        let g = BrillouinGrid::new(1, 16).unwrap();
        let t = solve_bands(g, &PeriodicPotential::zero(1), 3, 4).unwrap();
        for j in 0..16 {
            let xi = g.coordinate(j);
            assert!((t.energy(0, j) - xi * xi / 2.0).abs() < 1e-12);
            if xi != 0.0 {
                let e2 = (xi.abs() - 2.0 * PI).powi(2) / 2.0;
                assert!((t.energy(1, j) - e2).abs() < 1e-11);
            }
        }
        let zero = 8;
        assert!((t.energy(1, zero) - 2.0 * PI * PI).abs() < 1e-11);
        assert!((t.energy(2, zero) - 2.0 * PI * PI).abs() < 1e-11);
        assert!(t.min_gap(1) < 1e-10);
    }

    #[test]
    fn eigenvectors_are_normalized_and_ordered() {
        let t = cos_table(32, 8, 5);
        for j in 0..32 {
            for n in 0..5 {
                let norm: f64 = t.coefficients(n, j).iter().map(|z| z.norm_sqr()).sum();
                assert!((norm - 1.0).abs() < 1e-12);
                if n > 0 {
                    assert!(t.energy(n, j) >= t.energy(n - 1, j));
                }
            }
        }
    }

    #[test]
    fn already_continuous_table_is_a_fixed_point() {
        let t = cos_table(32, 8, 2);
        let again = fix_gauge(t.clone()).unwrap();
        for n in 0..2 {
            for j in 0..32 {
                for (a, b) in t.coefficients(n, j).iter().zip(again.coefficients(n, j)) {
                    assert!((a - b).norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn gauge_fixing_removes_random_phases_for_free_band() {
        let g = BrillouinGrid::new(1, 32).unwrap();
        let mut t = solve_bands(g, &PeriodicPotential::zero(1), 2, 4).unwrap();
        for j in 0..32 {
            t.rephase(0, j, 0.37 * j as f64 + 1.3 * (j * j) as f64);
        }
        let t = fix_gauge(t).unwrap();
        for j in 0..31 {
            let o = inner(t.coefficients(0, j), t.coefficients(0, j + 1));
            assert!(o.re >= 0.0 && o.im.abs() < 1e-14);
        }
        assert!(!t.is_usable(0));
    }

    #[test]
    fn holonomy_equals_wilson_loop_of_raw_table() {
        let g = BrillouinGrid::new(1, 64).unwrap();
        let raw = solve_bands(g, &PeriodicPotential::cosine(1, 1.0), 2, 12).unwrap();
        let mut prod = C64::new(1.0, 0.0);
        for j in 0..64 {
            let next = if j + 1 < 64 {
                raw.coefficients(0, j + 1).to_vec()
            } else {
                raw.basis().shift(raw.coefficients(0, 0), 0, 1)
            };
            prod *= inner(raw.coefficients(0, j), &next);
        }
        let fixed = fix_gauge(raw).unwrap();
        let diff = (fixed.holonomy(0, 0, 0) - prod.arg()).rem_euclid(2.0 * PI);
        assert!(diff.min(2.0 * PI - diff) < 1e-10);
    }

    #[test]
    fn free_band_has_zero_berry_connection_inside() {
        let g = BrillouinGrid::new(1, 32).unwrap();
        let v = PeriodicPotential::zero(1);
        let t = fix_gauge(solve_bands(g, &v, 1, 4).unwrap()).unwrap();
        // band 1 is degenerate at the zone edge, so compute through the raw routine
        let mut gauge = t.gauge.clone().unwrap();
        gauge.usable[0] = true;
        let mut t2 = t.clone();
        t2.gauge = Some(gauge);
        let b = berry_connection(&t2).unwrap();
        for j in 2..30 {
            assert!(b.at(0, j)[0].abs() < 1e-12);
        }
    }

    #[test]
    fn free_gradient_identity() {
        let g = BrillouinGrid::new(1, 16).unwrap();
        let t = fix_gauge(solve_bands(g, &PeriodicPotential::zero(1), 1, 4).unwrap()).unwrap();
        assert!((t.point_gradient(0, &[0.5]).unwrap()[0] - 0.5).abs() < 1e-14);
        assert!(t.point_gradient(0, &[0.0]).unwrap()[0].abs() < 1e-14);
    }

    #[test]
    fn free_hessian_is_one_inside() {
        let g = BrillouinGrid::new(1, 64).unwrap();
        let t = fix_gauge(solve_bands(g, &PeriodicPotential::zero(1), 1, 4).unwrap()).unwrap();
        let gr = grad_energy(&t).unwrap();
        let hs = hessian_energy(&t, &gr);
        for j in 3..61 {
            assert!((hs.at(0, j)[0] - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn free_hessian_2d_is_identity_inside() {
        let g = BrillouinGrid::new(2, 16).unwrap();
        let t = fix_gauge(solve_bands(g, &PeriodicPotential::zero(2), 1, 2).unwrap()).unwrap();
        let gr = grad_energy(&t).unwrap();
        let hs = hessian_energy(&t, &gr);
        let j = g.flat_index([8, 7]);
        let hv = hs.at(0, j);
        assert!((hv[0] - 1.0).abs() < 1e-10 && (hv[3] - 1.0).abs() < 1e-10);
        assert!(hv[1].abs() < 1e-10 && hv[2].abs() < 1e-10);
    }

    #[test]
    fn free_bloch_wave_has_unit_modulus() {
        let g = BrillouinGrid::new(1, 16).unwrap();
        let t = fix_gauge(solve_bands(g, &PeriodicPotential::zero(1), 1, 4).unwrap()).unwrap();
        for x in [0.0, 0.13, 0.77] {
            assert!((evaluate_bloch_wave(&t, 0, &[0.4], &[x]).norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bloch_wave_is_periodic_in_x() {
        let t = cos_table(32, 8, 2);
        for x in [0.0, 0.21, 0.6] {
            let a = evaluate_bloch_wave(&t, 1, &[0.9], &[x]);
            let b = evaluate_bloch_wave(&t, 1, &[0.9], &[x + 1.0]);
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn interpolated_coefficients_are_exact_at_nodes() {
        let t = cos_table(32, 8, 1);
        let j = 11;
        let c = t.bloch_coefficients(0, &t.grid().node(j));
        for (a, b) in c.iter().zip(t.coefficients(0, j)) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn lagrange_weights_reproduce_cubics() {
        for u in [0.0, 0.3, 0.71] {
            let w = lagrange_weights(u);
            let f = |x: f64| 1.0 - 2.0 * x + 0.5 * x * x * x;
            let interp: f64 = (0..4).map(|i| w[i] * f(i as f64 - 1.0)).sum();
            assert!((interp - f(u)).abs() < 1e-13);
        }
    }
}
