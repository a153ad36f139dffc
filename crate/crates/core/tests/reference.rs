use std::f64::consts::PI;

use fga_core::bloch::{bloch_wave_value, CellOperator};
use fga_core::lattice::PeriodicPotential;
use fga_core::potential::ExternalPotential;
use fga_core::reference::{reference_checkpoints, reference_propagate, ReferenceConfig};
use fga_core::wavefield::WaveField;
use fga_core::C64;

fn max_diff(a: &WaveField, b: &WaveField) -> f64 {
    a.data.iter().zip(&b.data).fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

/// Free evolution of `exp(−(x−q)²/(2σ²) + ip(x−q)/ε)` on the line, summed over periodic images.
fn free_gaussian(x: f64, t: f64, q: f64, p: f64, sigma2: f64, eps: f64, length: f64) -> C64 {
    let i = C64::new(0.0, 1.0);
    let s = C64::new(sigma2, eps * t);
    let amp = (C64::new(sigma2, 0.0) / s).sqrt();
    (-2..=2)
        .map(|n| {
            let y = x + n as f64 * length - q;
            let moving = y - p * t;
            amp * (-(moving * moving) / (2.0 * s) + i * (p * y - 0.5 * p * p * t) / eps).exp()
        })
        .sum()
}

#[test]
fn free_packet_matches_the_dispersed_gaussian() {
    let (eps, length, q, p, t) = (1.0 / 64.0, 2.0, 1.0, 0.5, 0.5);
    let sigma2 = eps;
    let cfg = ReferenceConfig::resolved(eps, length, PeriodicPotential::zero(1), ExternalPotential::Zero, t).unwrap();
    let psi0 = WaveField::from_fn(1, eps, length, cfg.points, 0.0, |x| free_gaussian(x[0], 0.0, q, p, sigma2, eps, length))
        .unwrap();
    let exact = WaveField::from_fn(1, eps, length, cfg.points, t, |x| free_gaussian(x[0], t, q, p, sigma2, eps, length))
        .unwrap();
    let got = reference_propagate(&psi0, &cfg).unwrap();
    let err = max_diff(&got, &exact);
    assert!(err <= 1e-6, "{err}");
    assert!(got.sub(&exact).unwrap().norm() <= 1e-6 * psi0.norm());
}

fn lattice_config(dt: f64, t: f64) -> ReferenceConfig {
    let mut cfg = ReferenceConfig::resolved(
        1.0 / 16.0,
        1.0,
        PeriodicPotential::cosine(1, 1.0),
        ExternalPotential::Harmonic { center: vec![0.5], stiffness: vec![1.0] },
        t,
    )
    .unwrap();
    cfg.dt = dt;
    cfg
}

fn lattice_packet(cfg: &ReferenceConfig) -> WaveField {
    WaveField::from_fn(1, cfg.eps, cfg.length, cfg.points, 0.0, |x| {
        let y = x[0] - 0.5;
        C64::from_polar((-y * y / (2.0 * cfg.eps)).exp(), 0.7 * y / cfg.eps)
    })
    .unwrap()
}

#[test]
fn halving_the_step_quarters_the_error() {
    let eps = 1.0 / 16.0;
    let t = 0.25;
    let oracle_cfg = lattice_config(eps / 160.0, t);
    let psi0 = lattice_packet(&oracle_cfg);
    let oracle = reference_propagate(&psi0, &oracle_cfg).unwrap();
    let err = |dt: f64| reference_propagate(&psi0, &lattice_config(dt, t)).unwrap().sub(&oracle).unwrap().norm();
    let ratio = err(eps / 20.0) / err(eps / 40.0);
    assert!((ratio - 4.0).abs() <= 1.0, "{ratio}");
}

#[test]
fn propagating_back_returns_the_initial_field() {
    let eps = 1.0 / 16.0;
    let forward = lattice_config(eps / 20.0, 0.5);
    let psi0 = lattice_packet(&forward);
    let there = reference_propagate(&psi0, &forward).unwrap();
    let mut backward = forward.clone();
    backward.t_final = -0.5;
    let mut back = reference_propagate(&there, &backward).unwrap();
    back.time = psi0.time;
    assert!(back.sub(&psi0).unwrap().norm() <= 1e-8 * psi0.norm());
}

#[test]
fn norm_is_kept_at_every_checkpoint() {
    let eps = 1.0 / 16.0;
    let cfg = lattice_config(eps / 20.0, 1.0);
    let psi0 = lattice_packet(&cfg);
    let fields = reference_checkpoints(&psi0, &cfg, &[0.25, 0.5, 1.0]).unwrap();
    for f in fields {
        assert!((f.norm() - psi0.norm()).abs() <= 1e-10 * psi0.norm(), "t = {}", f.time);
    }
}

#[test]
fn bloch_modes_only_rotate_their_phase() {
    let (eps, length, t) = (1.0 / 16.0, 1.0, 0.1);
    let lattice = PeriodicPotential::cosine(1, 1.0);
    let mut cfg = ReferenceConfig::resolved(eps, length, lattice.clone(), ExternalPotential::Zero, t).unwrap();
    // Strang error on a stationary mode scales like (t/ε)(Δt/ε)²; ε/2000 leaves 1.1e-6 on band 2.
    cfg.dt = eps / 4000.0;
    // ξ must be a multiple of 2πε/L to be periodic on the domain.
    let xi = 2.0 * PI * 3.0 * eps / length;
    let op = CellOperator::new(&lattice, 16).unwrap();
    let (energies, vecs) = op.eigen(&[xi]).unwrap();
    for band in 0..2 {
        let c: Vec<C64> = vecs.column(band).iter().copied().collect();
        let mode = WaveField::from_fn(1, eps, length, cfg.points, 0.0, |x| {
            C64::from_polar(1.0, xi * x[0] / eps) * bloch_wave_value(op.basis(), &c, &[x[0] / eps])
        })
        .unwrap();
        let got = reference_propagate(&mode, &cfg).unwrap();
        let expect = mode.scaled(C64::from_polar(1.0, -energies[band] * t / eps));
        let err = max_diff(&got, &expect);
        assert!(err <= 1e-6, "band {band}: {err}");
    }
}
