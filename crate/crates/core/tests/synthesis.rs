use std::f64::consts::PI;
use std::sync::OnceLock;

use fga_core::analytic::GaussianPacket;
use fga_core::bloch::{berry_connection, fix_gauge, grad_energy, hessian_energy, solve_bands, BandStructure};
use fga_core::lattice::{BrillouinGrid, PeriodicPotential};
use fga_core::dynamics::TrajectoryState;
use fga_core::phase_space::{band_projection, windowed_bloch_transform, TransformOptions};
use fga_core::pipeline::{BandPropagation, Bands, Engine, Numerics, Problem};
use fga_core::potential::ExternalPotential;
use fga_core::synthesis::{l2_distance, multi_band_synthesize, synthesize, SynthesisPlan};
use fga_core::wavefield::WaveField;
use fga_core::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1.0 / 16.0;
const LENGTH: f64 = 4.0;
const MID: f64 = 2.0;

fn numerics() -> Numerics {
    let mut n = Numerics::new(EPS);
    n.n_bands = 4;
    n
}

fn cosine_engine() -> &'static Engine {
    static E: OnceLock<Engine> = OnceLock::new();
    E.get_or_init(|| {
        let problem = Problem {
            dim: 1,
            length: LENGTH,
            lattice: PeriodicPotential::cosine(1, 1.0),
            external: ExternalPotential::Harmonic { center: vec![MID], stiffness: vec![0.5] },
        };
        Engine::new(problem, numerics()).unwrap()
    })
}

fn packet(e: &Engine, momentum: f64, band: Option<usize>) -> WaveField {
    e.initial_packet(&GaussianPacket::new(1, &[MID], &[momentum], 1.0).unwrap(), band).unwrap()
}

/// Plan for the checkpoint of `run` at time `t`.
fn plan_at<'a>(
    run: &'a BandPropagation,
    waves: &'a dyn fga_core::dispersion::BlochWaves,
    skeleton: &'a WaveField,
    t: f64,
    options: TransformOptions,
) -> SynthesisPlan<'a> {
    let cp = run.ensemble.at(t).unwrap();
    SynthesisPlan { band: run.band, waves, grid: &run.grid, states: &cp.states, skeleton, time: cp.time, options }
}

#[test]
fn synthesis_at_time_zero_is_the_band_projection() {
    // 3 cos 2πx + 3 cos 4πx: the second harmonic opens the gap above band 2 at ξ = 0.
    let real = |v: f64| C64::new(v, 0.0);
    let lattice = PeriodicPotential::new(
        1,
        [(vec![1], real(1.5)), (vec![-1], real(1.5)), (vec![2], real(1.5)), (vec![-2], real(1.5))],
    )
    .unwrap();
    let problem = Problem { lattice, ..cosine_engine().problem.clone() };
    let mut n = numerics();
    n.seed_threshold = 0.0;
    let e = Engine::new(problem, n).unwrap();
    for band in [0, 1] {
        let psi = packet(&e, 0.6, Some(band));
        let run = e.propagate(&psi, band, &[0.0]).unwrap();
        let waves = e.waves(band).unwrap();
        let grid = e.phase_space_grid(&psi).unwrap();
        let projection = band_projection(&psi, waves.as_ref(), band, &grid, e.numerics.transform_options()).unwrap();
        let (_, rel) = l2_distance(&run.fields[0], &projection).unwrap();
        assert!(rel <= 1e-10, "band {band}: {rel}");
    }
}

#[test]
fn free_packet_error_is_order_eps() {
    let eps = 1.0 / 64.0;
    let problem = Problem { dim: 1, length: 2.0, lattice: PeriodicPotential::zero(1), external: ExternalPotential::Zero };
    let e = Engine::new(problem, Numerics::new(eps)).unwrap();
    let packet = GaussianPacket::new(1, &[1.0], &[0.5], 1.0).unwrap();
    let psi = e.initial_packet(&packet, None).unwrap();
    let run = e.propagate(&psi, 0, &[0.5]).unwrap();
    let exact = packet.exact_solution(&ExternalPotential::Zero, eps, 2.0, e.grid_points(), 0.5).unwrap();
    let (abs, _) = l2_distance(&run.fields[0], &exact).unwrap();
    let rel = abs / psi.norm();
    assert!(rel <= eps, "{rel}");
}

#[test]
fn one_band_superposition_is_plain_synthesis() {
    let e = cosine_engine();
    let psi = packet(e, 0.6, Some(0));
    let run = e.propagate(&psi, 0, &[0.2]).unwrap();
    let waves = e.waves(0).unwrap();
    let plan = plan_at(&run, waves.as_ref(), &psi, 0.2, e.numerics.transform_options());
    let single = synthesize(&plan).unwrap();
    let multi = multi_band_synthesize(&[plan], &psi).unwrap();
    assert_eq!(multi.field.data, single.data);
    assert_eq!(single.data, run.fields[0].data);
}

#[test]
fn no_bands_leave_the_whole_field_as_residual() {
    let e = cosine_engine();
    let psi = packet(e, 0.6, None);
    let out = multi_band_synthesize(&[], &psi).unwrap();
    assert!(out.field.data.iter().all(|z| *z == C64::new(0.0, 0.0)));
    assert_eq!(out.residual, psi.norm());
}

#[test]
fn residual_shrinks_as_bands_are_added_near_the_zone_edge() {
    let e = cosine_engine();
    let psi = packet(e, 0.95 * PI, None);
    let opts = e.numerics.transform_options();
    let grid = e.phase_space_grid(&psi).unwrap();
    let waves: Vec<_> = (0..4).map(|b| e.waves(b).unwrap()).collect();
    // Bands 2 and 3 nearly touch at ξ = 0, so plans are built from the seeds at t = 0.
    let states: Vec<Vec<TrajectoryState>> = (0..4)
        .map(|b| {
            let w = windowed_bloch_transform(&psi, waves[b].as_ref(), b, &grid, opts).unwrap();
            w.seeds(0.0).iter().map(|s| TrajectoryState::initial(s, 1)).collect()
        })
        .collect();

    let mut residuals = Vec::new();
    let mut oracle = psi.zeros_like();
    for n in 1..=4 {
        let plans: Vec<_> = (0..n)
            .map(|b| SynthesisPlan {
                band: b,
                waves: waves[b].as_ref(),
                grid: &grid,
                states: &states[b],
                skeleton: &psi,
                time: 0.0,
                options: opts,
            })
            .collect();
        let out = multi_band_synthesize(&plans, &psi).unwrap();
        // Oracle: running sum of band projections.
        oracle = oracle.add(&band_projection(&psi, waves[n - 1].as_ref(), n - 1, &grid, opts).unwrap()).unwrap();
        let expect = psi.sub(&oracle).unwrap().norm();
        assert!((out.residual - expect).abs() <= 1e-12 * psi.norm());
        assert!(psi.sub(&out.field).unwrap().norm() - expect <= 1e-10 * psi.norm());
        residuals.push(out.residual);
    }
    // The packet straddles bands 1 and 2.
    assert!(residuals[0] > 0.1 * psi.norm(), "{residuals:?}");
    assert!(residuals.windows(2).all(|w| w[1] < w[0]), "{residuals:?}");
    assert!(residuals[3] < 0.1 * residuals[0], "{residuals:?}");
}

#[test]
fn truncation_radius_barely_moves_the_field() {
    let e = cosine_engine();
    let psi = packet(e, 0.6, Some(0));
    let run = e.propagate(&psi, 0, &[0.2]).unwrap();
    let waves = e.waves(0).unwrap();
    let at = |r: f64| synthesize(&plan_at(&run, waves.as_ref(), &psi, 0.2, TransformOptions { truncation_radius: r })).unwrap();
    let (_, rel) = l2_distance(&at(6.0), &at(10.0)).unwrap();
    assert!(rel <= 1e-9, "{rel}");
}

#[test]
fn synthesis_is_linear_in_the_initial_field() {
    let e = cosine_engine();
    let psi = packet(e, 0.6, Some(0));
    let alpha = C64::new(-0.7, 1.9);
    let base = e.propagate(&psi, 0, &[0.2]).unwrap();
    let scaled = e.propagate(&psi.scaled(alpha), 0, &[0.2]).unwrap();
    assert_eq!(base.seed_count, scaled.seed_count);
    let expect = base.fields[0].scaled(alpha);
    let (_, rel) = l2_distance(&scaled.fields[0], &expect).unwrap();
    assert!(rel <= 1e-12, "{rel}");
}

#[test]
fn observable_field_does_not_depend_on_eigenvector_phases() {
    let e = cosine_engine();
    let Bands::Lattice(s) = &e.bands else { panic!("lattice engine") };
    let potential = &e.problem.lattice;
    let m = s.table.grid().nodes_per_axis;
    let mut raw = solve_bands(BrillouinGrid::new(1, m).unwrap(), potential, e.numerics.n_bands, e.numerics.cutoff).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for j in 0..m {
        for b in 0..e.numerics.n_bands {
            raw.rephase(b, j, rng.random_range(0.0..2.0 * PI));
        }
    }
    let table = fix_gauge(raw).unwrap();
    let berry = berry_connection(&table).unwrap();
    let grad = grad_energy(&table).unwrap();
    let hessian = hessian_energy(&table, &grad);
    let mut scrambled = e.clone();
    scrambled.bands = Bands::Lattice(BandStructure { table, berry, grad, hessian });

    let psi = packet(e, 0.6, Some(0));
    let a = e.propagate(&psi, 0, &[0.2]).unwrap();
    let b = scrambled.propagate(&psi, 0, &[0.2]).unwrap();
    let (_, rel) = l2_distance(&b.fields[0], &a.fields[0]).unwrap();
    assert!(rel <= 1e-10, "{rel}");
}
