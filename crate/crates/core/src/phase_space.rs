//! Semiclassical windowed Bloch transform `W^ε`, its adjoint and the band operator `Π_n`.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;
use rustfft::FftPlanner;

use crate::bloch::{bloch_wave_value, inner, CellOperator};
use crate::dispersion::BlochWaves;
use crate::error::{FgaError, Result};
use crate::lattice::PeriodicPotential;
use crate::wavefield::WaveField;
use crate::C64;

/// Bound `c_g` on `δq/√ε` and `δp/√ε`.
pub const DEFAULT_SPACING_BOUND: f64 = 0.5;
/// Gaussian truncation radius in units of `√ε`.
pub const DEFAULT_TRUNCATION_RADIUS: f64 = 8.0;
/// Relative magnitude below which coefficients are dropped before seeding.
pub const DEFAULT_SEED_THRESHOLD: f64 = 1e-8;
/// Relative magnitude defining the support of `ψ` for the q-box.
pub const SUPPORT_THRESHOLD: f64 = 1e-8;
/// Minimum grid points per lattice period accepted by the transform.
pub const MIN_POINTS_PER_PERIOD: f64 = 8.0;

/// Fixed number of q-chunks used for deterministic reductions.
const REDUCTION_CHUNKS: usize = 16;

/// `G^ε_{q,p}(x) = exp(−|x−q|²/(2ε) + i p·(x−q)/ε)`.
pub fn gaussian_eval(q: &[f64], p: &[f64], eps: f64, x: &[f64]) -> C64 {
    let mut r2 = 0.0;
    let mut ph = 0.0;
    for a in 0..q.len() {
        let y = x[a] - q[a];
        r2 += y * y;
        ph += p[a] * y;
    }
    C64::from_polar((-r2 / (2.0 * eps)).exp(), ph / eps)
}

/// Normalization `2^{d/4} / (2πε)^{3d/4}` of the windowed transform.
pub fn window_prefactor(dim: usize, eps: f64) -> f64 {
    let d = dim as f64;
    2f64.powf(d / 4.0) / (2.0 * PI * eps).powf(0.75 * d)
}

/// Minimum-image displacement on a circle of length `length`.
pub fn min_image(y: f64, length: f64) -> f64 {
    y - length * (y / length).round()
}

/// Phase-space nodes: a q-box on the spatial torus times the full Brillouin grid in p.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpaceGrid {
    pub dim: usize,
    pub eps: f64,
    pub length: f64,
    pub spacing_bound: f64,
    /// q-nodes per axis on the whole torus, `q_i = i·δq`.
    pub q_nodes: usize,
    pub q_spacing: f64,
    /// Retained q-node indices per axis.
    pub q_box: Vec<Vec<usize>>,
    /// p-nodes per axis, `p_j = −π + j·δp`.
    pub p_nodes: usize,
    pub p_spacing: f64,
}

impl PhaseSpaceGrid {
    /// Smallest power of two `M` with `2π/M ≤ factor·√ε`.
    pub fn p_nodes_for(eps: f64, factor: f64) -> usize {
        let need = 2.0 * PI / (factor * eps.sqrt());
        let mut m = 4;
        while (m as f64) < need - 1e-12 {
            m *= 2;
        }
        m
    }

    /// Grid over the whole torus with `δq ≤ q_factor·√ε`.
    pub fn full(dim: usize, eps: f64, length: f64, q_factor: f64, p_nodes: usize, spacing_bound: f64) -> Result<Self> {
        if !(q_factor > 0.0) || p_nodes < 4 {
            return Err(FgaError::InvalidInput("phase-space grid needs q_factor > 0 and at least 4 p-nodes".into()));
        }
        let q_nodes = ((length / (q_factor * eps.sqrt())) - 1e-9).ceil().max(1.0) as usize;
        let grid = Self {
            dim,
            eps,
            length,
            spacing_bound,
            q_nodes,
            q_spacing: length / q_nodes as f64,
            q_box: vec![(0..q_nodes).collect(); dim],
            p_nodes,
            p_spacing: 2.0 * PI / p_nodes as f64,
        };
        Ok(grid)
    }

    /// Grid whose q-box covers the support of `ψ` padded by `2·r_c·√ε`.
    pub fn covering(field: &WaveField, q_factor: f64, p_nodes: usize, spacing_bound: f64, r_c: f64) -> Result<Self> {
        let mut grid = Self::full(field.dim, field.eps, field.length, q_factor, p_nodes, spacing_bound)?;
        let max = field.data.iter().fold(0.0f64, |m, z| m.max(z.norm()));
        if max == 0.0 {
            grid.q_box = vec![Vec::new(); field.dim];
            return Ok(grid);
        }
        let pad = 2.0 * r_c * field.eps.sqrt();
        for a in 0..field.dim {
            let mut hit = vec![false; field.points];
            for (i, z) in field.data.iter().enumerate() {
                if z.norm() >= SUPPORT_THRESHOLD * max {
                    hit[field.multi_index(i)[a]] = true;
                }
            }
            let (lo, hi) = covering_arc(&hit, field.spacing(), field.length);
            let (lo, hi) = (lo - pad, hi + pad);
            grid.q_box[a] = if hi - lo >= field.length {
                (0..grid.q_nodes).collect()
            } else {
                let first = (lo / grid.q_spacing).ceil() as i64;
                let last = (hi / grid.q_spacing).floor() as i64;
                let n = grid.q_nodes as i64;
                let mut v: Vec<usize> = (first..=last).map(|i| i.rem_euclid(n) as usize).collect();
                v.sort_unstable();
                v.dedup();
                v
            };
        }
        Ok(grid)
    }

    /// Refuses spacings above `c_g·√ε`.
    pub fn check_spacing(&self) -> Result<()> {
        let bound = self.spacing_bound * self.eps.sqrt() * (1.0 + 1e-12);
        if self.q_spacing > bound || self.p_spacing > bound {
            return Err(FgaError::QuadratureRisk(format!(
                "δq={:.4e}, δp={:.4e} exceed c_g·√ε={:.4e}",
                self.q_spacing,
                self.p_spacing,
                self.spacing_bound * self.eps.sqrt()
            )));
        }
        Ok(())
    }

    pub fn q_count(&self) -> usize {
        self.q_box.iter().map(|b| b.len()).product()
    }

    pub fn p_count(&self) -> usize {
        self.p_nodes.pow(self.dim as u32)
    }

    pub fn len(&self) -> usize {
        self.q_count() * self.p_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn q_point(&self, iq: usize) -> [f64; 2] {
        if self.dim == 1 {
            [self.q_box[0][iq] as f64 * self.q_spacing, 0.0]
        } else {
            let n1 = self.q_box[1].len();
            [self.q_box[0][iq / n1] as f64 * self.q_spacing, self.q_box[1][iq % n1] as f64 * self.q_spacing]
        }
    }

    pub fn p_point(&self, jp: usize) -> [f64; 2] {
        let c = |j: usize| -PI + j as f64 * self.p_spacing;
        if self.dim == 1 {
            [c(jp), 0.0]
        } else {
            [c(jp / self.p_nodes), c(jp % self.p_nodes)]
        }
    }

    /// Quadrature weight `δq^d δp^d`.
    pub fn weight(&self) -> f64 {
        (self.q_spacing * self.p_spacing).powi(self.dim as i32)
    }

    /// Same box with halved spacings in q and p.
    pub fn refined(&self) -> Self {
        let mut g = self.clone();
        g.q_nodes *= 2;
        g.q_spacing /= 2.0;
        g.p_nodes *= 2;
        g.p_spacing /= 2.0;
        g.q_box = self
            .q_box
            .iter()
            .map(|b| {
                let mut v: Vec<usize> = b.iter().flat_map(|&i| [2 * i, 2 * i + 1]).collect();
                v.sort_unstable();
                v
            })
            .collect();
        g
    }

    fn check_field(&self, field: &WaveField) -> Result<()> {
        if field.dim != self.dim
            || (field.eps - self.eps).abs() > 1e-12 * self.eps
            || (field.length - self.length).abs() > 1e-12 * self.length
        {
            return Err(FgaError::GridMismatch("wave field and phase-space grid disagree on d, ε or L".into()));
        }
        if field.points_per_period() < MIN_POINTS_PER_PERIOD {
            return Err(FgaError::Resolution(format!(
                "{:.2} grid points per lattice period, need at least {MIN_POINTS_PER_PERIOD}",
                field.points_per_period()
            )));
        }
        Ok(())
    }
}

/// Shortest arc `[lo, hi]` (possibly with `lo < 0`) covering all marked points of a circle.
fn covering_arc(hit: &[bool], dx: f64, length: f64) -> (f64, f64) {
    let n = hit.len();
    let marked: Vec<usize> = (0..n).filter(|&i| hit[i]).collect();
    if marked.is_empty() {
        return (0.0, 0.0);
    }
    // the complement of the largest gap between consecutive marks is the shortest cover
    let mut best_gap = 0usize;
    let mut best_start = marked[0];
    for w in 0..marked.len() {
        let a = marked[w];
        let b = marked[(w + 1) % marked.len()];
        let gap = (b + n - a) % n;
        let gap = if gap == 0 { n } else { gap };
        if gap > best_gap {
            best_gap = gap;
            best_start = b;
        }
    }
    let lo = best_start as f64 * dx;
    let span = (n - best_gap) as f64 * dx;
    let lo = if lo + span >= length { lo - length } else { lo };
    (lo, lo + span)
}

/// Phase-space coefficients `w_n(q_i, p_j)` on a [`PhaseSpaceGrid`], `[q][p]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedCoefficients {
    /// Zero-based band index.
    pub band: usize,
    pub grid: PhaseSpaceGrid,
    pub values: Vec<C64>,
}

/// Phase-space initial point of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seed {
    /// Flat `[q][p]` index into the coefficient array.
    pub index: usize,
    pub q: [f64; 2],
    pub p: [f64; 2],
    pub weight: C64,
}

impl WindowedCoefficients {
    pub fn zeros(band: usize, grid: PhaseSpaceGrid) -> Self {
        let n = grid.len();
        Self { band, grid, values: vec![C64::new(0.0, 0.0); n] }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, z| m.max(z.norm()))
    }

    /// `Σ |w|² δq^d δp^d`.
    pub fn mass(&self) -> f64 {
        self.values.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.grid.weight()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Copy with entries below `rel·max|w|` set to zero.
    pub fn thresholded(&self, rel: f64) -> Self {
        let cut = rel * self.max_abs();
        let mut out = self.clone();
        for z in &mut out.values {
            if z.norm() < cut {
                *z = C64::new(0.0, 0.0);
            }
        }
        out
    }

    /// Seeds with `|w| ≥ rel·max|w|`, ordered by flat index.
    pub fn seeds(&self, rel: f64) -> Vec<Seed> {
        let cut = rel * self.max_abs();
        let pc = self.grid.p_count();
        self.values
            .iter()
            .enumerate()
            .filter(|(_, z)| z.norm() >= cut && z.norm() > 0.0)
            .map(|(i, z)| Seed { index: i, q: self.grid.q_point(i / pc), p: self.grid.p_point(i % pc), weight: *z })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let d = self.grid.dim;
        let mut out = String::from(if d == 1 { "band,q,p,re,im\n" } else { "band,q_x,q_y,p_x,p_y,re,im\n" });
        let pc = self.grid.p_count();
        for (i, z) in self.values.iter().enumerate() {
            let q = self.grid.q_point(i / pc);
            let p = self.grid.p_point(i % pc);
            let _ = write!(out, "{}", self.band + 1);
            for v in q[..d].iter().chain(&p[..d]) {
                let _ = write!(out, ",{v:.12e}");
            }
            let _ = writeln!(out, ",{:.17e},{:.17e}", z.re, z.im);
        }
        out
    }
}

/// Options shared by the transform and its adjoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformOptions {
    /// Gaussian truncation radius `r_c` in units of `√ε`.
    pub truncation_radius: f64,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self { truncation_radius: DEFAULT_TRUNCATION_RADIUS }
    }
}

/// Bloch-wave values `u(p_j, x/ε)` for every p-node over one period of the fast phase.
struct NodeCache {
    period: usize,
    dim: usize,
    p_count: usize,
    /// `[fast position][p-node]`.
    values: Vec<C64>,
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Fast-phase period (in grid points) of `x/ε mod 1` on a field's grid.
pub(crate) fn fast_period(field: &WaveField) -> usize {
    let cells = field.cells();
    field.points / gcd(field.points, cells)
}

/// Fast coordinate `x/ε mod 1` of the grid point with per-axis index `l`.
pub(crate) fn fast_position(field: &WaveField, l: usize) -> f64 {
    let cells = field.cells();
    ((l * cells) % field.points) as f64 / field.points as f64
}

impl NodeCache {
    fn new(waves: &dyn BlochWaves, grid: &PhaseSpaceGrid, field: &WaveField) -> Self {
        let period = fast_period(field);
        let dim = grid.dim;
        let p_count = grid.p_count();
        let positions = period.pow(dim as u32);
        let mut values = vec![C64::new(0.0, 0.0); positions * p_count];
        let rows: Vec<Vec<C64>> = (0..p_count)
            .into_par_iter()
            .map(|j| {
                let p = grid.p_point(j);
                let c = waves.bloch_coefficients(&p[..dim]);
                (0..positions)
                    .map(|c_idx| {
                        let y = if dim == 1 {
                            vec![fast_position(field, c_idx)]
                        } else {
                            vec![fast_position(field, c_idx / period), fast_position(field, c_idx % period)]
                        };
                        bloch_wave_value(waves.basis(), &c, &y)
                    })
                    .collect()
            })
            .collect();
        for (j, row) in rows.into_iter().enumerate() {
            for (c_idx, v) in row.into_iter().enumerate() {
                values[c_idx * p_count + j] = v;
            }
        }
        Self { period, dim, p_count, values }
    }

    fn row(&self, idx: [usize; 2]) -> &[C64] {
        let c = if self.dim == 1 { idx[0] % self.period } else { (idx[0] % self.period) * self.period + idx[1] % self.period };
        &self.values[c * self.p_count..(c + 1) * self.p_count]
    }
}

/// Grid-point window around `q` along one axis: (index mod N, displacement).
fn axis_window(q: f64, radius: f64, field: &WaveField) -> Vec<(usize, f64)> {
    let dx = field.spacing();
    let n = field.points as i64;
    let (lo, hi) = if 2.0 * radius >= field.length {
        let start = ((q - 0.5 * field.length) / dx).ceil() as i64;
        (start, start + n - 1)
    } else {
        (((q - radius) / dx).ceil() as i64, ((q + radius) / dx).floor() as i64)
    };
    (lo..=hi).map(|l| (l.rem_euclid(n) as usize, l as f64 * dx - q)).collect()
}

/// `e^{i s p_j y/ε}` for all p-nodes of one axis (`s = ±1`), by recurrence in j.
fn axis_phases(y: f64, grid: &PhaseSpaceGrid, sign: f64) -> Vec<C64> {
    let eps = grid.eps;
    let start = C64::from_polar(1.0, sign * (-PI) * y / eps);
    let step = C64::from_polar(1.0, sign * grid.p_spacing * y / eps);
    let mut out = Vec::with_capacity(grid.p_nodes);
    let mut cur = start;
    for j in 0..grid.p_nodes {
        if j % 32 == 0 {
            cur = C64::from_polar(1.0, sign * (-PI + j as f64 * grid.p_spacing) * y / eps);
        }
        out.push(cur);
        cur *= step;
    }
    out
}

struct WindowPoint {
    field_index: usize,
    axis_index: [usize; 2],
    envelope: f64,
    phases: [usize; 2],
}

/// Window points within radius `R` of `q` with their Gaussian envelope.
fn window(q: [f64; 2], radius: f64, field: &WaveField) -> (Vec<WindowPoint>, Vec<Vec<f64>>) {
    let eps = field.eps;
    let d = field.dim;
    let axes: Vec<Vec<(usize, f64)>> = (0..d).map(|a| axis_window(q[a], radius, field)).collect();
    let disp: Vec<Vec<f64>> = axes.iter().map(|ax| ax.iter().map(|(_, y)| *y).collect()).collect();
    let r2 = radius * radius;
    let mut pts = Vec::new();
    if d == 1 {
        for (k, &(l, y)) in axes[0].iter().enumerate() {
            pts.push(WindowPoint { field_index: l, axis_index: [l, 0], envelope: (-y * y / (2.0 * eps)).exp(), phases: [k, 0] });
        }
    } else {
        for (k0, &(l0, y0)) in axes[0].iter().enumerate() {
            for (k1, &(l1, y1)) in axes[1].iter().enumerate() {
                let rr = y0 * y0 + y1 * y1;
                if rr > r2 && 2.0 * radius < field.length {
                    continue;
                }
                pts.push(WindowPoint {
                    field_index: l0 * field.points + l1,
                    axis_index: [l0, l1],
                    envelope: (-rr / (2.0 * eps)).exp(),
                    phases: [k0, k1],
                });
            }
        }
    }
    (pts, disp)
}

/// `w_n(q,p) = 2^{d/4}(2πε)^{−3d/4} Σ_x conj(u_n(p,x/ε)) conj(G_{q,p}(x)) ψ(x) Δx^d`.
pub fn windowed_bloch_transform(
    psi: &WaveField,
    waves: &dyn BlochWaves,
    band: usize,
    grid: &PhaseSpaceGrid,
    opts: TransformOptions,
) -> Result<WindowedCoefficients> {
    grid.check_field(psi)?;
    let mut out = WindowedCoefficients::zeros(band, grid.clone());
    if grid.is_empty() || psi.data.iter().all(|z| z.norm() == 0.0) {
        return Ok(out);
    }
    let cache = NodeCache::new(waves, grid, psi);
    let radius = opts.truncation_radius * psi.eps.sqrt();
    let pref = window_prefactor(grid.dim, grid.eps) * psi.cell_volume();
    let pc = grid.p_count();
    let m = grid.p_nodes;
    let rows: Vec<Vec<C64>> = (0..grid.q_count())
        .into_par_iter()
        .map(|iq| {
            let q = grid.q_point(iq);
            let (pts, disp) = window(q, radius, psi);
            let phases: Vec<Vec<Vec<C64>>> =
                disp.iter().map(|ys| ys.iter().map(|&y| axis_phases(y, grid, -1.0)).collect()).collect();
            let mut acc = vec![C64::new(0.0, 0.0); pc];
            for wp in &pts {
                let g = psi.data[wp.field_index] * wp.envelope;
                if g == C64::new(0.0, 0.0) {
                    continue;
                }
                let u = cache.row(wp.axis_index);
                if grid.dim == 1 {
                    let ph = &phases[0][wp.phases[0]];
                    for j in 0..pc {
                        acc[j] += u[j].conj() * ph[j] * g;
                    }
                } else {
                    let ph0 = &phases[0][wp.phases[0]];
                    let ph1 = &phases[1][wp.phases[1]];
                    for j0 in 0..m {
                        let g0 = ph0[j0] * g;
                        for j1 in 0..m {
                            let j = j0 * m + j1;
                            acc[j] += u[j].conj() * ph1[j1] * g0;
                        }
                    }
                }
            }
            acc.iter_mut().for_each(|z| *z *= pref);
            acc
        })
        .collect();
    for (iq, row) in rows.into_iter().enumerate() {
        out.values[iq * pc..(iq + 1) * pc].copy_from_slice(&row);
    }
    Ok(out)
}

/// Adjoint of the transform: `C Σ_{q,p} u_n(p,y/ε) G_{q,p}(y) w(q,p) δq^d δp^d` on the skeleton grid.
pub fn windowed_adjoint(
    coeffs: &WindowedCoefficients,
    waves: &dyn BlochWaves,
    skeleton: &WaveField,
    opts: TransformOptions,
) -> Result<WaveField> {
    let grid = &coeffs.grid;
    grid.check_field(skeleton)?;
    let mut out = skeleton.zeros_like();
    if grid.is_empty() {
        return Ok(out);
    }
    let cache = NodeCache::new(waves, grid, skeleton);
    let radius = opts.truncation_radius * skeleton.eps.sqrt();
    let pref = window_prefactor(grid.dim, grid.eps) * grid.weight();
    let pc = grid.p_count();
    let m = grid.p_nodes;
    let nq = grid.q_count();
    let chunk = nq.div_ceil(REDUCTION_CHUNKS).max(1);
    let partials: Vec<Vec<(usize, C64)>> = (0..nq)
        .collect::<Vec<_>>()
        .par_chunks(chunk)
        .map(|iqs| {
            let mut part: Vec<(usize, C64)> = Vec::new();
            for &iq in iqs {
                let w = &coeffs.values[iq * pc..(iq + 1) * pc];
                if w.iter().all(|z| *z == C64::new(0.0, 0.0)) {
                    continue;
                }
                let q = grid.q_point(iq);
                let (pts, disp) = window(q, radius, skeleton);
                let phases: Vec<Vec<Vec<C64>>> =
                    disp.iter().map(|ys| ys.iter().map(|&y| axis_phases(y, grid, 1.0)).collect()).collect();
                for wp in &pts {
                    let u = cache.row(wp.axis_index);
                    let mut s = C64::new(0.0, 0.0);
                    if grid.dim == 1 {
                        let ph = &phases[0][wp.phases[0]];
                        for j in 0..pc {
                            s += u[j] * ph[j] * w[j];
                        }
                    } else {
                        let ph0 = &phases[0][wp.phases[0]];
                        let ph1 = &phases[1][wp.phases[1]];
                        for j0 in 0..m {
                            let mut s0 = C64::new(0.0, 0.0);
                            for j1 in 0..m {
                                let j = j0 * m + j1;
                                s0 += u[j] * ph1[j1] * w[j];
                            }
                            s += s0 * ph0[j0];
                        }
                    }
                    part.push((wp.field_index, s * wp.envelope * pref));
                }
            }
            part
        })
        .collect();
    for part in partials {
        for (i, v) in part {
            out.data[i] += v;
        }
    }
    Ok(out)
}

/// `Π_n ψ`: transform followed by its adjoint with the same kernel.
pub fn band_projection(
    psi: &WaveField,
    waves: &dyn BlochWaves,
    band: usize,
    grid: &PhaseSpaceGrid,
    opts: TransformOptions,
) -> Result<WaveField> {
    grid.check_spacing()?;
    let w = windowed_bloch_transform(psi, waves, band, grid, opts)?;
    let mut out = windowed_adjoint(&w, waves, psi, opts)?;
    out.time = psi.time;
    Ok(out)
}

/// `Σ_n Π_n ψ` over the given bands and the residual `‖ψ − Σ_n Π_n ψ‖`.
pub fn reconstruct(
    psi: &WaveField,
    bands: &[&dyn BlochWaves],
    grid: &PhaseSpaceGrid,
    opts: TransformOptions,
) -> Result<(WaveField, f64)> {
    let mut sum = psi.zeros_like();
    for (n, waves) in bands.iter().enumerate() {
        sum = sum.add(&band_projection(psi, *waves, n, grid, opts)?)?;
    }
    let residual = psi.sub(&sum)?.norm();
    Ok((sum, residual))
}

/// Norm of the field against the phase-space mass of its band coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsevalReport {
    pub norm_sqr: f64,
    pub band_mass: Vec<f64>,
    pub total_mass: f64,
    pub ratio: f64,
}

/// `‖ψ‖²` and `Σ_n ‖w_n‖²` over the listed bands (a diagnostic, not asserted equal).
pub fn parseval_check(
    psi: &WaveField,
    bands: &[&dyn BlochWaves],
    grid: &PhaseSpaceGrid,
    opts: TransformOptions,
) -> Result<ParsevalReport> {
    let norm_sqr = psi.norm_sqr();
    let mut band_mass = Vec::with_capacity(bands.len());
    for (n, waves) in bands.iter().enumerate() {
        band_mass.push(windowed_bloch_transform(psi, *waves, n, grid, opts)?.mass());
    }
    let total_mass: f64 = band_mass.iter().sum();
    let ratio = if norm_sqr > 0.0 { total_mass / norm_sqr } else { 0.0 };
    Ok(ParsevalReport { norm_sqr, band_mass, total_mass, ratio })
}

/// Non-windowed discrete Bloch transform: energy of `ψ` in each of the lowest `n_bands`
/// bands, summed over the crystal momenta compatible with the domain.
///
/// Returns `(‖ψ‖², per-band energies)`; with all `(2K+1)^d` bands the energies add up
/// to the part of `‖ψ‖²` carried by plane waves with `|k|∞ ≤ K`.
pub fn bloch_energies(
    psi: &WaveField,
    potential: &PeriodicPotential,
    cutoff: usize,
    n_bands: usize,
) -> Result<(f64, Vec<f64>)> {
    let op = CellOperator::new(potential, cutoff)?;
    let d = psi.dim;
    let n = psi.points;
    let cells = psi.cells();
    if n_bands > op.basis().len() {
        return Err(FgaError::InvalidInput("more bands than plane waves".into()));
    }
    let spectrum = unitary_dft(psi);
    let scale = psi.cell_volume() / n.pow(d as u32) as f64;
    let signed = |j: i64| -> Option<usize> {
        let half = (n / 2) as i64;
        if j < -half || j >= half {
            None
        } else {
            Some(j.rem_euclid(n as i64) as usize)
        }
    };
    let classes: Vec<i64> = (-(cells as i64) / 2..(cells as i64 + 1) / 2).collect();
    let class_tuples: Vec<[i64; 2]> = if d == 1 {
        classes.iter().map(|&m| [m, 0]).collect()
    } else {
        classes.iter().flat_map(|&m0| classes.iter().map(move |&m1| [m0, m1])).collect()
    };
    let per_class: Vec<Result<Vec<f64>>> = class_tuples
        .par_iter()
        .map(|mc| {
            let xi: Vec<f64> = (0..d).map(|a| 2.0 * PI * mc[a] as f64 / cells as f64).collect();
            let v: Vec<C64> = op
                .basis()
                .vectors()
                .iter()
                .map(|k| {
                    let mut flat = 0usize;
                    for a in 0..d {
                        match signed(mc[a] + k[a] as i64 * cells as i64) {
                            Some(j) => flat = flat * n + j,
                            None => return C64::new(0.0, 0.0),
                        }
                    }
                    spectrum[flat]
                })
                .collect();
            let (_, vecs) = op.eigen(&xi)?;
            Ok((0..n_bands)
                .map(|b| {
                    let c: Vec<C64> = vecs.column(b).iter().copied().collect();
                    inner(&c, &v).norm_sqr() * scale
                })
                .collect())
        })
        .collect();
    let mut energies = vec![0.0; n_bands];
    for row in per_class {
        for (e, v) in energies.iter_mut().zip(row?) {
            *e += v;
        }
    }
    Ok((psi.norm_sqr(), energies))
}

/// Unnormalized forward DFT `Σ_x ψ(x) e^{−2πi j·x/L}` (row-major, d = 1, 2).
pub(crate) fn unitary_dft(psi: &WaveField) -> Vec<C64> {
    let n = psi.points;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let mut data = psi.data.clone();
    if psi.dim == 1 {
        fft.process(&mut data);
    } else {
        for row in data.chunks_mut(n) {
            fft.process(row);
        }
        let mut col = vec![C64::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = data[r * n + c];
            }
            fft.process(&mut col);
            for r in 0..n {
                data[r * n + c] = col[r];
            }
        }
    }
    data
}
