//! Trajectory ODEs for `(Q, P, S, F, a0, a1)` under `h(q,p) = E_n(p) + U(q)` and an RK4 ensemble driver.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::dispersion::BandModel;
use crate::error::{FgaError, Result};
use crate::lattice::wrap_momentum;
use crate::phase_space::Seed;
use crate::potential::ExternalPotential;
use crate::C64;

/// Stability heuristic: `dt · max(‖∇²E‖, ‖∇²U‖) ≤ STEP_STABILITY`.
pub const STEP_STABILITY: f64 = 0.1;
/// `σ_min(Z)` below this is an invariant violation (theory gives `√2`).
pub const SIGMA_Z_FLOOR: f64 = 1.0;
/// Symplecticity residual above which a trajectory is recorded as failed.
pub const DEFAULT_SYMPLECTIC_LIMIT: f64 = 1e-6;
/// Offset of the auxiliary trajectories for `a1`, in units of `√ε`.
pub const A1_STENCIL_FACTOR: f64 = 0.125;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// `h_n(q,p) = E_n(p) + U(q)`.
#[derive(Clone, Copy)]
pub struct HamiltonianModel<'a> {
    pub band: &'a dyn BandModel,
    pub potential: &'a ExternalPotential,
}

impl<'a> HamiltonianModel<'a> {
    pub fn new(band: &'a dyn BandModel, potential: &'a ExternalPotential) -> Result<Self> {
        potential.validate(band.dim())?;
        Ok(Self { band, potential })
    }

    pub fn dim(&self) -> usize {
        self.band.dim()
    }

    pub fn hamiltonian(&self, q: &[f64], p: &[f64]) -> f64 {
        self.band.evaluate(p).energy + self.potential.value(q)
    }

    /// Largest stable step for trajectories starting at `seeds`.
    pub fn max_step(&self, seeds: &[Seed]) -> f64 {
        let d = self.dim();
        let hu = self.potential.hessian_bound().unwrap_or_else(|| {
            seeds
                .iter()
                .map(|s| self.potential.jet(&s.q[..d]).hess.iter().fold(0.0f64, |m, v| m.max(v.abs())))
                .fold(0.0, f64::max)
        });
        let bound = self.band.hessian_bound().max(hu);
        if bound > 0.0 {
            STEP_STABILITY / bound
        } else {
            f64::INFINITY
        }
    }
}

/// One trajectory. `p` is the wrapped momentum (for periodic bands) and
/// `winding` counts the `2π` shifts removed; `f` is the row-major `2d×2d`
/// flow Jacobian `[[∂qQ, ∂pQ], [∂qP, ∂pP]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub dim: usize,
    pub t: f64,
    pub q: [f64; 2],
    pub p: [f64; 2],
    pub winding: [i64; 2],
    pub s: f64,
    pub f: [f64; 16],
    pub a0: C64,
    pub a1: C64,
    pub seed_index: usize,
    pub seed_q: [f64; 2],
    pub seed_p: [f64; 2],
    pub seed_weight: C64,
}

impl TrajectoryState {
    pub fn initial(seed: &Seed, dim: usize) -> Self {
        let mut f = [0.0; 16];
        for i in 0..2 * dim {
            f[i * 2 * dim + i] = 1.0;
        }
        Self {
            dim,
            t: 0.0,
            q: seed.q,
            p: seed.p,
            winding: [0, 0],
            s: 0.0,
            f,
            a0: C64::new(2f64.powf(dim as f64 / 2.0), 0.0),
            a1: ZERO,
            seed_index: seed.index,
            seed_q: seed.q,
            seed_p: seed.p,
            seed_weight: seed.weight,
        }
    }

    /// Momentum with the windings added back, continuous in time.
    pub fn unwrapped_p(&self) -> [f64; 2] {
        [self.p[0] + 2.0 * PI * self.winding[0] as f64, self.p[1] + 2.0 * PI * self.winding[1] as f64]
    }

    pub fn jacobian(&self, i: usize, j: usize) -> f64 {
        self.f[i * 2 * self.dim + j]
    }

    pub fn z(&self) -> ZMatrix {
        z_matrix(&self.f, self.dim)
    }

    /// `‖FᵀJF − J‖_max`.
    pub fn symplectic_residual(&self) -> f64 {
        let d = self.dim;
        let n = 2 * d;
        let j = |r: usize, c: usize| -> f64 {
            if r < d && c == r + d {
                1.0
            } else if r >= d && c + d == r {
                -1.0
            } else {
                0.0
            }
        };
        let mut worst = 0.0f64;
        for r in 0..n {
            for c in 0..n {
                let mut v = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        v += self.jacobian(a, r) * j(a, b) * self.jacobian(b, c);
                    }
                }
                worst = worst.max((v - j(r, c)).abs());
            }
        }
        worst
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).chain(&self.f).all(|v| v.is_finite())
            && self.s.is_finite()
            && self.a0.re.is_finite()
            && self.a0.im.is_finite()
            && self.a1.re.is_finite()
            && self.a1.im.is_finite()
    }

    fn advanced(&self, k: &Derivative, h: f64) -> Self {
        let mut out = *self;
        for a in 0..self.dim {
            out.q[a] += h * k.q[a];
            out.p[a] += h * k.p[a];
        }
        out.s += h * k.s;
        for i in 0..4 * self.dim * self.dim {
            out.f[i] += h * k.f[i];
        }
        out.a0 += k.a0 * h;
        out.a1 += k.a1 * h;
        out.t += h;
        out
    }

    fn rewrap(&mut self, periodic: bool) {
        if !periodic {
            return;
        }
        for a in 0..self.dim {
            let (w, n) = wrap_momentum(self.p[a]);
            self.p[a] = w;
            self.winding[a] += n;
        }
    }
}

/// Complex `d×d` matrix (row-major, `d ≤ 2`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZMatrix {
    pub dim: usize,
    pub m: [C64; 4],
}

impl ZMatrix {
    fn zeros(dim: usize) -> Self {
        Self { dim, m: [ZERO; 4] }
    }

    fn from_real(dim: usize, r: &[f64; 4]) -> Self {
        let mut z = Self::zeros(dim);
        for i in 0..4 {
            z.m[i] = C64::new(r[i], 0.0);
        }
        z
    }

    pub fn at(&self, i: usize, j: usize) -> C64 {
        self.m[i * self.dim + j]
    }

    pub fn det(&self) -> C64 {
        if self.dim == 1 {
            self.m[0]
        } else {
            self.m[0] * self.m[3] - self.m[1] * self.m[2]
        }
    }

    pub fn inverse(&self) -> Self {
        let det = self.det();
        let mut out = Self::zeros(self.dim);
        if self.dim == 1 {
            out.m[0] = det.inv();
        } else {
            let r = det.inv();
            out.m = [self.m[3] * r, -self.m[1] * r, -self.m[2] * r, self.m[0] * r];
        }
        out
    }

    pub fn mul(&self, other: &Self) -> Self {
        let d = self.dim;
        let mut out = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                let mut s = ZERO;
                for k in 0..d {
                    s += self.m[i * d + k] * other.m[k * d + j];
                }
                out.m[i * d + j] = s;
            }
        }
        out
    }

    pub fn trace(&self) -> C64 {
        if self.dim == 1 {
            self.m[0]
        } else {
            self.m[0] + self.m[3]
        }
    }

    /// Smallest singular value.
    pub fn sigma_min(&self) -> f64 {
        if self.dim == 1 {
            return self.m[0].norm();
        }
        let fro: f64 = self.m.iter().map(|z| z.norm_sqr()).sum();
        let det2 = self.det().norm_sqr();
        let disc = (fro * fro - 4.0 * det2).max(0.0).sqrt();
        let lam = if fro + disc > 0.0 { 2.0 * det2 / (fro + disc) } else { 0.0 };
        lam.sqrt()
    }
}

/// `Z = ∂zQ + i∂zP = A + D + i(C − B)` from the Jacobian blocks.
pub fn z_matrix(f: &[f64; 16], dim: usize) -> ZMatrix {
    let (dq, dp) = z_derivatives(f, dim);
    let mut z = ZMatrix::zeros(dim);
    for i in 0..dim * dim {
        z.m[i] = dq.m[i] + C64::i() * dp.m[i];
    }
    z
}

/// `(∂zQ, ∂zP) = (A − iB, C − iD)`.
pub fn z_derivatives(f: &[f64; 16], dim: usize) -> (ZMatrix, ZMatrix) {
    let n = 2 * dim;
    let mut dq = ZMatrix::zeros(dim);
    let mut dp = ZMatrix::zeros(dim);
    for i in 0..dim {
        for j in 0..dim {
            dq.m[i * dim + j] = C64::new(f[i * n + j], -f[i * n + j + dim]);
            dp.m[i * dim + j] = C64::new(f[(i + dim) * n + j], -f[(i + dim) * n + j + dim]);
        }
    }
    (dq, dp)
}

/// Checked `Z` with `σ_min(Z) ≥ 1`.
pub fn checked_z(state: &TrajectoryState) -> Result<ZMatrix> {
    let z = state.z();
    let s = z.sigma_min();
    if !(s >= SIGMA_Z_FLOOR) {
        return Err(FgaError::InvariantViolation(format!(
            "sigma_min(Z) = {s:.3e} < {SIGMA_Z_FLOOR} for seed {} at t = {}",
            state.seed_index, state.t
        )));
    }
    Ok(z)
}

/// `(dQ/dt, dP/dt) = (∇E(P), −∇U(Q))`.
pub fn flow_rhs(state: &TrajectoryState, model: &HamiltonianModel) -> ([f64; 2], [f64; 2]) {
    let d = state.dim;
    let band = model.band.evaluate(&state.p[..d]);
    let pot = model.potential.jet(&state.q[..d]);
    let mut dq = [0.0; 2];
    let mut dp = [0.0; 2];
    for a in 0..d {
        dq[a] = band.grad[a];
        dp[a] = -pot.grad[a];
    }
    (dq, dp)
}

/// `dS/dt = P·∇E(P) − h(Q,P)`.
pub fn action_rhs(state: &TrajectoryState, model: &HamiltonianModel) -> f64 {
    let d = state.dim;
    let band = model.band.evaluate(&state.p[..d]);
    let u = model.potential.value(&state.q[..d]);
    let p = state.unwrapped_p();
    let pv: f64 = (0..d).map(|a| p[a] * band.grad[a]).sum();
    pv - band.energy - u
}

/// `dF/dt = [[0, ∇²E(P)], [−∇²U(Q), 0]]·F`.
pub fn jacobian_rhs(state: &TrajectoryState, model: &HamiltonianModel) -> [f64; 16] {
    let d = state.dim;
    let he = model.band.evaluate(&state.p[..d]).hess;
    let hu = model.potential.jet(&state.q[..d]).hessian_matrix(d);
    jacobian_rhs_with(&state.f, d, &he, &hu)
}

fn jacobian_rhs_with(f: &[f64; 16], d: usize, he: &[f64; 4], hu: &[f64; 4]) -> [f64; 16] {
    let n = 2 * d;
    let mut out = [0.0; 16];
    for c in 0..n {
        for i in 0..d {
            let mut top = 0.0;
            let mut bottom = 0.0;
            for k in 0..d {
                top += he[i * d + k] * f[(k + d) * n + c];
                bottom -= hu[i * d + k] * f[k * n + c];
            }
            out[i * n + c] = top;
            out[(i + d) * n + c] = bottom;
        }
    }
    out
}

/// Growth rate `β` with `da0/dt = a0·β`:
/// `½ tr(Z⁻¹ ∇²E ∂zP) − i A·∇U − (i/2) tr(Z⁻¹ ∇²U ∂zQ)`.
pub fn amplitude_rate(state: &TrajectoryState, model: &HamiltonianModel) -> Result<C64> {
    let d = state.dim;
    let band = model.band.evaluate(&state.p[..d]);
    let pot = model.potential.jet(&state.q[..d]);
    let zi = checked_z(state)?.inverse();
    let (dq, dp) = z_derivatives(&state.f, d);
    let he = ZMatrix::from_real(d, &band.hess);
    let hu = ZMatrix::from_real(d, &pot.hessian_matrix(d));
    let kinetic = zi.mul(&he).mul(&dp).trace() * 0.5;
    let curvature = zi.mul(&hu).mul(&dq).trace() * C64::new(0.0, -0.5);
    let berry: f64 = (0..d).map(|a| band.berry[a] * pot.grad[a]).sum();
    Ok(kinetic + curvature - C64::new(0.0, berry))
}

/// `da0/dt`.
pub fn a0_rhs(state: &TrajectoryState, model: &HamiltonianModel) -> Result<C64> {
    Ok(state.a0 * amplitude_rate(state, model)?)
}

/// Auxiliary trajectories around a centre seed, offsets `δ` in q and p:
/// `(+q), (−q), (+p), (−p), (+q+p), (+q−p), (−q+p), (−q−p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    pub delta: f64,
    pub aux: [TrajectoryState; 8],
}

const STENCIL_OFFSETS: [(f64, f64); 8] =
    [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0), (1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];

impl Stencil {
    /// Auxiliary trajectories for a `d = 1` seed.
    pub fn around(seed: &Seed, delta: f64) -> Self {
        let aux = STENCIL_OFFSETS.map(|(sq, sp)| {
            let s = Seed { q: [seed.q[0] + sq * delta, 0.0], p: [seed.p[0] + sp * delta, 0.0], ..*seed };
            TrajectoryState::initial(&s, 1)
        });
        Self { delta, aux }
    }
}

/// Per-trajectory quantities differentiated by the stencil.
#[derive(Clone, Copy)]
struct A1Local {
    curv: C64,
    zi: C64,
    cross: C64,
    third: C64,
}

fn a1_local(state: &TrajectoryState, model: &HamiltonianModel) -> Result<A1Local> {
    let pot = model.potential.jet(&state.q[..1]);
    let zi = checked_z(state)?.inverse().m[0];
    let (dq, _) = z_derivatives(&state.f, 1);
    Ok(A1Local {
        curv: zi * (1.0 - pot.hess[0]),
        zi,
        cross: dq.m[0] * pot.third[0] * zi * zi,
        third: zi * pot.third[0],
    })
}

/// `da1/dt` for `d = 1`:
/// `a1·β + a0·( i/2·T1 + i/3·T2 + i/6·T3 − i/8·T4 )` with
/// `T1 = ∂z(∂z[(1−U'')Z⁻¹] Z⁻¹)`, `T2 = ∂z(∂zQ U''' Z⁻²)`,
/// `T3 = ∂zQ ∂z(U''' Z⁻¹) Z⁻¹`, `T4 = (∂zQ)² U'''' Z⁻²`,
/// where `∂z = ∂q − i∂p` acts on the seed and is taken by central differences over the stencil.
pub fn a1_rhs(state: &TrajectoryState, stencil: &Stencil, model: &HamiltonianModel) -> Result<C64> {
    if state.dim != 1 {
        return Err(FgaError::Unsupported("first-order amplitude a1 is implemented for d = 1 only".into()));
    }
    let beta = amplitude_rate(state, model)?;
    let c = a1_local(state, model)?;
    let mut v = [c; 8];
    for (k, aux) in stencil.aux.iter().enumerate() {
        v[k] = a1_local(aux, model)?;
    }
    let h = stencil.delta;
    let dz = |g: fn(&A1Local) -> C64| -> C64 {
        let fq = (g(&v[0]) - g(&v[1])) / (2.0 * h);
        let fp = (g(&v[2]) - g(&v[3])) / (2.0 * h);
        fq - C64::i() * fp
    };
    let dzdz = |g: fn(&A1Local) -> C64| -> C64 {
        let fqq = (g(&v[0]) - g(&c) * 2.0 + g(&v[1])) / (h * h);
        let fpp = (g(&v[2]) - g(&c) * 2.0 + g(&v[3])) / (h * h);
        let fqp = (g(&v[4]) - g(&v[5]) - g(&v[6]) + g(&v[7])) / (4.0 * h * h);
        fqq - C64::i() * fqp * 2.0 - fpp
    };
    let pot = model.potential.jet(&state.q[..1]);
    let (dq, _) = z_derivatives(&state.f, 1);
    let dq = dq.m[0];
    let t1 = dzdz(|l| l.curv) * c.zi + dz(|l| l.curv) * dz(|l| l.zi);
    let t2 = dz(|l| l.cross);
    let t3 = dq * dz(|l| l.third) * c.zi;
    let t4 = dq * dq * pot.fourth[0] * c.zi * c.zi;
    let i = C64::i();
    let source = i * t1 / 2.0 + i * t2 / 3.0 + i * t3 / 6.0 - i * t4 / 8.0;
    Ok(state.a1 * beta + state.a0 * source)
}

#[derive(Debug, Clone, Copy)]
struct Derivative {
    q: [f64; 2],
    p: [f64; 2],
    s: f64,
    f: [f64; 16],
    a0: C64,
    a1: C64,
}

fn derivative(state: &TrajectoryState, model: &HamiltonianModel) -> Result<Derivative> {
    let d = state.dim;
    let band = model.band.evaluate(&state.p[..d]);
    let pot = model.potential.jet(&state.q[..d]);
    let p = state.unwrapped_p();
    let mut k = Derivative { q: [0.0; 2], p: [0.0; 2], s: 0.0, f: [0.0; 16], a0: ZERO, a1: ZERO };
    for a in 0..d {
        k.q[a] = band.grad[a];
        k.p[a] = -pot.grad[a];
        k.s += p[a] * band.grad[a];
    }
    k.s -= band.energy + pot.value;
    k.f = jacobian_rhs_with(&state.f, d, &band.hess, &pot.hessian_matrix(d));
    k.a0 = a0_rhs(state, model)?;
    Ok(k)
}

/// A centre trajectory and, when `a1` is tracked, its stencil, stepped together.
#[derive(Debug, Clone)]
struct Bundle {
    centre: TrajectoryState,
    stencil: Option<Stencil>,
}

impl Bundle {
    fn derivatives(&self, model: &HamiltonianModel) -> Result<(Derivative, Vec<Derivative>)> {
        let mut kc = derivative(&self.centre, model)?;
        let mut aux = Vec::new();
        if let Some(st) = &self.stencil {
            kc.a1 = a1_rhs(&self.centre, st, model)?;
            for s in &st.aux {
                aux.push(derivative(s, model)?);
            }
        }
        Ok((kc, aux))
    }

    fn advanced(&self, k: &(Derivative, Vec<Derivative>), h: f64) -> Self {
        Self {
            centre: self.centre.advanced(&k.0, h),
            stencil: self.stencil.as_ref().map(|st| {
                let mut st = st.clone();
                for (s, ks) in st.aux.iter_mut().zip(&k.1) {
                    *s = s.advanced(ks, h);
                }
                st
            }),
        }
    }

    fn rk4_step(&mut self, model: &HamiltonianModel, h: f64) -> Result<()> {
        let k1 = self.derivatives(model)?;
        let k2 = self.advanced(&k1, 0.5 * h).derivatives(model)?;
        let k3 = self.advanced(&k2, 0.5 * h).derivatives(model)?;
        let k4 = self.advanced(&k3, h).derivatives(model)?;
        let combine = |a: &Derivative, b: &Derivative, c: &Derivative, d: &Derivative| -> Derivative {
            let mut out = *a;
            for i in 0..2 {
                out.q[i] = (a.q[i] + 2.0 * b.q[i] + 2.0 * c.q[i] + d.q[i]) / 6.0;
                out.p[i] = (a.p[i] + 2.0 * b.p[i] + 2.0 * c.p[i] + d.p[i]) / 6.0;
            }
            out.s = (a.s + 2.0 * b.s + 2.0 * c.s + d.s) / 6.0;
            for i in 0..16 {
                out.f[i] = (a.f[i] + 2.0 * b.f[i] + 2.0 * c.f[i] + d.f[i]) / 6.0;
            }
            out.a0 = (a.a0 + b.a0 * 2.0 + c.a0 * 2.0 + d.a0) / 6.0;
            out.a1 = (a.a1 + b.a1 * 2.0 + c.a1 * 2.0 + d.a1) / 6.0;
            out
        };
        let kc = combine(&k1.0, &k2.0, &k3.0, &k4.0);
        let ka: Vec<Derivative> =
            (0..k1.1.len()).map(|i| combine(&k1.1[i], &k2.1[i], &k3.1[i], &k4.1[i])).collect();
        let t_next = self.centre.t + h;
        *self = self.advanced(&(kc, ka), h);
        self.centre.t = t_next;
        let periodic = model.band.is_periodic();
        self.centre.rewrap(periodic);
        if let Some(st) = &mut self.stencil {
            for s in &mut st.aux {
                s.t = t_next;
                s.rewrap(periodic);
            }
        }
        Ok(())
    }
}

/// Settings of [`integrate_ensemble`].
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationOptions {
    pub t_final: f64,
    pub dt: f64,
    /// Times in `[0, t_final]` at which states are recorded (`t_final` is always recorded).
    pub checkpoints: Vec<f64>,
    /// Track `a1` with auxiliary trajectories (`d = 1`).
    pub with_a1: bool,
    /// Needed for the stencil offset `δ = A1_STENCIL_FACTOR·√ε`.
    pub eps: f64,
    pub symplectic_limit: f64,
}

impl IntegrationOptions {
    pub fn new(t_final: f64, dt: f64, eps: f64) -> Self {
        Self { t_final, dt, checkpoints: Vec::new(), with_a1: false, eps, symplectic_limit: DEFAULT_SYMPLECTIC_LIMIT }
    }
}

/// Trajectory dropped by a monitor breach or a numeric failure.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFailure {
    pub seed_index: usize,
    pub time: f64,
    pub reason: String,
}

/// Ensemble states at one recorded time, ordered by seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub time: f64,
    pub states: Vec<TrajectoryState>,
}

/// Monitors accumulated over all steps of all surviving trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonitorSummary {
    pub max_symplectic_residual: f64,
    pub min_sigma_z: f64,
    pub max_energy_drift: f64,
    pub max_abs_a1: f64,
    pub steps: usize,
    pub dt_used: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleResult {
    pub checkpoints: Vec<Checkpoint>,
    pub failures: Vec<TrajectoryFailure>,
    pub monitors: MonitorSummary,
}

impl EnsembleResult {
    pub fn final_states(&self) -> &[TrajectoryState] {
        &self.checkpoints.last().expect("final time always recorded").states
    }

    pub fn at(&self, time: f64) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| (c.time - time).abs() <= 1e-12 * time.abs().max(1.0))
    }
}

struct TrajectoryRun {
    states: Vec<TrajectoryState>,
    failure: Option<TrajectoryFailure>,
    sympl: f64,
    sigma: f64,
    drift: f64,
    a1: f64,
}

fn run_one(seed: &Seed, model: &HamiltonianModel, opts: &IntegrationOptions, segments: &[(f64, usize)]) -> TrajectoryRun {
    let d = model.dim();
    let centre = TrajectoryState::initial(seed, d);
    let stencil = opts.with_a1.then(|| Stencil::around(seed, A1_STENCIL_FACTOR * opts.eps.sqrt()));
    let mut bundle = Bundle { centre, stencil };
    let h0 = model.hamiltonian(&seed.q[..d], &seed.p[..d]);
    let mut run = TrajectoryRun {
        states: Vec::with_capacity(segments.len()),
        failure: None,
        sympl: 0.0,
        sigma: bundle.centre.z().sigma_min(),
        drift: 0.0,
        a1: 0.0,
    };
    let fail = |state: &TrajectoryState, reason: String| TrajectoryFailure {
        seed_index: seed.index,
        time: state.t,
        reason,
    };
    let mut t_start = 0.0;
    for &(t_end, steps) in segments {
        let h = if steps > 0 { (t_end - t_start) / steps as f64 } else { 0.0 };
        for _ in 0..steps {
            if let Err(e) = bundle.rk4_step(model, h) {
                run.failure = Some(fail(&bundle.centre, e.to_string()));
                return run;
            }
            let c = &bundle.centre;
            if !c.is_finite() {
                run.failure = Some(fail(c, "non-finite state".into()));
                return run;
            }
            let r = c.symplectic_residual();
            let s = c.z().sigma_min();
            run.sympl = run.sympl.max(r);
            run.sigma = run.sigma.min(s);
            run.drift = run.drift.max((model.hamiltonian(&c.q[..d], &c.p[..d]) - h0).abs());
            run.a1 = run.a1.max(c.a1.norm());
            if r > opts.symplectic_limit {
                run.failure = Some(fail(c, format!("symplecticity residual {r:.3e}")));
                return run;
            }
            if s < SIGMA_Z_FLOOR {
                run.failure = Some(fail(c, format!("sigma_min(Z) = {s:.3e}")));
                return run;
            }
        }
        bundle.centre.t = t_end;
        run.states.push(bundle.centre);
        t_start = t_end;
    }
    run
}

/// RK4 on every seed; trajectories are independent and results are ordered by seed.
pub fn integrate_ensemble(seeds: &[Seed], model: &HamiltonianModel, opts: &IntegrationOptions) -> Result<EnsembleResult> {
    let d = model.dim();
    if !(opts.t_final >= 0.0) || !(opts.dt > 0.0) || !opts.t_final.is_finite() {
        return Err(FgaError::InvalidInput(format!("need T ≥ 0 and dt > 0, got T={} dt={}", opts.t_final, opts.dt)));
    }
    if opts.with_a1 && d != 1 {
        return Err(FgaError::Unsupported("first-order amplitude a1 is implemented for d = 1 only".into()));
    }
    let dt_max = model.max_step(seeds);
    if opts.dt > dt_max * (1.0 + 1e-12) {
        return Err(FgaError::InvalidInput(format!("dt = {} exceeds the stability bound {dt_max:.4e}", opts.dt)));
    }
    let mut times: Vec<f64> = opts.checkpoints.iter().copied().filter(|&t| t >= 0.0 && t < opts.t_final).collect();
    if opts.checkpoints.iter().any(|&t| t < 0.0 || t > opts.t_final * (1.0 + 1e-12)) {
        return Err(FgaError::InvalidInput("checkpoint times must lie in [0, T]".into()));
    }
    times.push(opts.t_final);
    times.sort_by(f64::total_cmp);
    times.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs().max(1.0));
    let mut prev = 0.0;
    let mut segments = Vec::with_capacity(times.len());
    let mut total_steps = 0;
    for &t in &times {
        let steps = ((t - prev) / opts.dt - 1e-9).ceil().max(0.0) as usize;
        segments.push((t, steps));
        total_steps += steps;
        prev = t;
    }
    let runs: Vec<TrajectoryRun> = seeds.par_iter().map(|s| run_one(s, model, opts, &segments)).collect();
    let mut monitors = MonitorSummary {
        max_symplectic_residual: 0.0,
        min_sigma_z: f64::INFINITY,
        max_energy_drift: 0.0,
        max_abs_a1: 0.0,
        steps: total_steps,
        dt_used: if total_steps > 0 { opts.t_final / total_steps as f64 } else { opts.dt },
    };
    let mut checkpoints: Vec<Checkpoint> = times.iter().map(|&time| Checkpoint { time, states: Vec::new() }).collect();
    let mut failures = Vec::new();
    for run in runs {
        monitors.max_symplectic_residual = monitors.max_symplectic_residual.max(run.sympl);
        monitors.min_sigma_z = monitors.min_sigma_z.min(run.sigma);
        if let Some(f) = run.failure {
            failures.push(f);
            continue;
        }
        monitors.max_energy_drift = monitors.max_energy_drift.max(run.drift);
        monitors.max_abs_a1 = monitors.max_abs_a1.max(run.a1);
        for (c, s) in checkpoints.iter_mut().zip(run.states) {
            c.states.push(s);
        }
    }
    Ok(EnsembleResult { checkpoints, failures, monitors })
}

/// Checkpoint CSV: seed q…, seed p…, t, Q…, P…, S, a0, a1, symplecticity residual, σ_min(Z).
pub fn checkpoint_csv(states: &[TrajectoryState]) -> String {
    let d = states.first().map_or(1, |s| s.dim);
    let mut out = String::new();
    let axes = ["x", "y"];
    let mut cols: Vec<String> = Vec::new();
    for prefix in ["seed_q", "seed_p"] {
        for ax in &axes[..d] {
            cols.push(if d == 1 { prefix.to_string() } else { format!("{prefix}_{ax}") });
        }
    }
    cols.push("t".into());
    for prefix in ["Q", "P"] {
        for ax in &axes[..d] {
            cols.push(if d == 1 { prefix.to_string() } else { format!("{prefix}_{ax}") });
        }
    }
    for c in ["S", "re_a0", "im_a0", "re_a1", "im_a1", "sympl_residual", "sigma_min_Z"] {
        cols.push(c.into());
    }
    let _ = writeln!(out, "{}", cols.join(","));
    for s in states {
        let mut row: Vec<String> = Vec::new();
        row.extend(s.seed_q[..d].iter().chain(&s.seed_p[..d]).map(|v| format!("{v:.17e}")));
        row.push(format!("{:.17e}", s.t));
        row.extend(s.q[..d].iter().chain(&s.p[..d]).map(|v| format!("{v:.17e}")));
        for v in [s.s, s.a0.re, s.a0.im, s.a1.re, s.a1.im, s.symplectic_residual(), s.z().sigma_min()] {
            row.push(format!("{v:.17e}"));
        }
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dispersion::FreeBand;

    fn seed(q: f64, p: f64) -> Seed {
        Seed { index: 0, q: [q, 0.0], p: [p, 0.0], weight: C64::new(1.0, 0.0) }
    }

    fn harmonic() -> ExternalPotential {
        ExternalPotential::Harmonic { center: vec![0.0], stiffness: vec![1.0] }
    }

    #[test]
    fn free_flow_and_action_rates() {
        let free = FreeBand::new(1);
        let zero = ExternalPotential::Zero;
        let m = HamiltonianModel::new(&free, &zero).unwrap();
        let s = TrajectoryState::initial(&seed(0.0, 0.5), 1);
        assert_eq!(flow_rhs(&s, &m), ([0.5, 0.0], [-0.0, 0.0]));
        assert!((action_rhs(&s, &m) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn harmonic_flow_and_action_rates() {
        let free = FreeBand::new(1);
        let u = harmonic();
        let m = HamiltonianModel::new(&free, &u).unwrap();
        let s = TrajectoryState::initial(&seed(1.0, 0.0), 1);
        let (dq, dp) = flow_rhs(&s, &m);
        assert_eq!((dq[0], dp[0]), (0.0, -1.0));
        let s = TrajectoryState::initial(&seed(1.0, 1.0), 1);
        assert!(action_rhs(&s, &m).abs() < 1e-15);
        let s = TrajectoryState::initial(&seed(2.0, 0.0), 1);
        assert!((action_rhs(&s, &m) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn initial_state_and_z() {
        let s = TrajectoryState::initial(&seed(0.1, 0.2), 1);
        assert_eq!(s.a0, C64::new(2f64.sqrt(), 0.0));
        assert_eq!(s.z().m[0], C64::new(2.0, 0.0));
        let s2 = TrajectoryState::initial(
            &Seed { index: 0, q: [0.0, 0.0], p: [0.0, 0.0], weight: C64::new(1.0, 0.0) },
            2,
        );
        assert_eq!(s2.z().det(), C64::new(4.0, 0.0));
        assert_eq!(s2.a0, C64::new(2.0, 0.0));
        assert_eq!(s2.symplectic_residual(), 0.0);
    }

    #[test]
    fn z_of_free_and_harmonic_jacobians() {
        let t: f64 = 0.7;
        let mut f = [0.0; 16];
        f[0] = 1.0;
        f[1] = t;
        f[3] = 1.0;
        assert_eq!(z_matrix(&f, 1).m[0], C64::new(2.0, -t));
        let (s, c) = t.sin_cos();
        f = [0.0; 16];
        f[0] = c;
        f[1] = s;
        f[2] = -s;
        f[3] = c;
        let z = z_matrix(&f, 1).m[0];
        assert!((z - C64::new(2.0 * c, -2.0 * s)).norm() < 1e-15);
        assert!((z.norm() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sigma_min_of_two_by_two() {
        let z = ZMatrix { dim: 2, m: [C64::new(3.0, 0.0), ZERO, ZERO, C64::new(0.0, 0.5)] };
        assert!((z.sigma_min() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn free_closed_forms() {
        let free = FreeBand::new(1);
        let zero = ExternalPotential::Zero;
        let m = HamiltonianModel::new(&free, &zero).unwrap();
        let (q, p) = (0.3, 0.8);
        let mut opts = IntegrationOptions::new(1.0, 1e-3, 1.0 / 64.0);
        opts.with_a1 = true;
        let r = integrate_ensemble(&[seed(q, p)], &m, &opts).unwrap();
        let s = r.final_states()[0];
        assert!((s.q[0] - (q + p)).abs() < 1e-12);
        assert!((s.p[0] - p).abs() < 1e-14);
        assert!((s.s - 0.5 * p * p).abs() < 1e-12);
        assert!((s.jacobian(0, 1) - 1.0).abs() < 1e-12);
        assert!((s.a0 - C64::new(2.0, -1.0).sqrt()).norm() < 1e-10);
        assert_eq!(s.a1, ZERO);
    }

    #[test]
    fn harmonic_period_returns_to_seed() {
        let free = FreeBand::new(1);
        let u = harmonic();
        let m = HamiltonianModel::new(&free, &u).unwrap();
        let opts = IntegrationOptions::new(2.0 * PI, 1e-3, 1.0 / 64.0);
        let r = integrate_ensemble(&[seed(0.4, -0.3)], &m, &opts).unwrap();
        let s = r.final_states()[0];
        assert!((s.q[0] - 0.4).abs() < 1e-8 && (s.p[0] + 0.3).abs() < 1e-8);
        assert!(r.monitors.max_energy_drift < 1e-8);
        assert!(r.monitors.max_symplectic_residual < 1e-8);
        assert!(r.monitors.min_sigma_z >= 2f64.sqrt() - 1e-6);
    }

    #[test]
    fn zero_time_keeps_seeds() {
        let free = FreeBand::new(1);
        let zero = ExternalPotential::Zero;
        let m = HamiltonianModel::new(&free, &zero).unwrap();
        let sd = seed(0.3, 0.8);
        let r = integrate_ensemble(&[sd], &m, &IntegrationOptions::new(0.0, 1e-3, 0.1)).unwrap();
        assert_eq!(r.final_states()[0], TrajectoryState::initial(&sd, 1));
    }

    #[test]
    fn step_above_stability_bound_is_refused() {
        let free = FreeBand::new(1);
        let u = ExternalPotential::Harmonic { center: vec![0.0], stiffness: vec![100.0] };
        let m = HamiltonianModel::new(&free, &u).unwrap();
        assert!(integrate_ensemble(&[seed(0.0, 0.0)], &m, &IntegrationOptions::new(1.0, 0.01, 0.1)).is_err());
    }

    #[test]
    fn checkpoints_are_recorded_in_order() {
        let free = FreeBand::new(1);
        let zero = ExternalPotential::Zero;
        let m = HamiltonianModel::new(&free, &zero).unwrap();
        let mut opts = IntegrationOptions::new(1.0, 0.01, 0.1);
        opts.checkpoints = vec![0.5, 0.0];
        let seeds: Vec<Seed> = (0..5).map(|i| Seed { index: i, ..seed(0.1 * i as f64, 0.5) }).collect();
        let r = integrate_ensemble(&seeds, &m, &opts).unwrap();
        let times: Vec<f64> = r.checkpoints.iter().map(|c| c.time).collect();
        assert_eq!(times, vec![0.0, 0.5, 1.0]);
        let mid = &r.at(0.5).unwrap().states;
        assert!(mid.iter().enumerate().all(|(i, s)| s.seed_index == i && (s.t - 0.5).abs() < 1e-15));
        let csv = checkpoint_csv(mid);
        assert!(csv.starts_with("seed_q,seed_p,t,Q,P,S,re_a0"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn a1_is_two_d_unsupported() {
        let free = FreeBand::new(2);
        let zero = ExternalPotential::Zero;
        let m = HamiltonianModel::new(&free, &zero).unwrap();
        let mut opts = IntegrationOptions::new(1.0, 0.01, 0.1);
        opts.with_a1 = true;
        let sd = Seed { index: 0, q: [0.0; 2], p: [0.0; 2], weight: C64::new(1.0, 0.0) };
        assert!(matches!(integrate_ensemble(&[sd], &m, &opts), Err(FgaError::Unsupported(_))));
    }
}
