//! Subcommand implementations. Every command writes its outputs and a `report.toml`
//! into the output directory before returning.

use std::path::{Path, PathBuf};
use std::time::Instant;

use fga_core::bloch::BandStructure;
use fga_core::dispersion::BlochWaves;
use fga_core::dynamics::checkpoint_csv;
use fga_core::lattice::BrillouinGrid;
use fga_core::phase_space::parseval_check;
use fga_core::pipeline::{observed_orders, Engine};
use fga_core::potential::ExternalPotential;
use fga_core::reference::{reference_checkpoints, ReferenceConfig, MIN_POINTS_PER_EPS};
use fga_core::synthesis::l2_distance;
use fga_core::wavefield::WaveField;
use fga_core::FgaError;

use crate::config::{InitialSection, RunConfig};
use crate::report::{BandSummary, ConvergenceRow, RunReport, RunSummary};
use crate::CliError;

/// Everything a command needs besides the config itself.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    /// Directory that relative input paths are resolved against.
    pub base: PathBuf,
    pub out: PathBuf,
    pub threads: usize,
}

impl Context {
    pub fn new(config: RunConfig, base: PathBuf, out: Option<PathBuf>, threads: usize) -> Self {
        let out = out.unwrap_or_else(|| config.run.output.clone());
        Self { config, base, out, threads }
    }

    fn prepare(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out)?;
        Ok(())
    }

    fn write(&self, name: &str, text: &str) -> Result<(), CliError> {
        std::fs::write(self.out.join(name), text)?;
        Ok(())
    }

    fn engine(&self, eps: f64, min_points_per_eps: usize) -> Result<Engine, CliError> {
        let problem = self.config.problem(&self.base)?;
        let mut numerics = self.config.numerics(eps);
        numerics.points_per_eps = numerics.points_per_eps.max(min_points_per_eps);
        Engine::new(problem, numerics).map_err(CliError::stage("bands"))
    }

    /// Reference setup on the grid an engine with `points_per_eps ≥ 32` would use, checked before any band work.
    fn reference_plan(&self, eps: f64, t_final: f64) -> Result<ReferenceConfig, CliError> {
        let n = &self.config.numerics;
        let length = self.config.potential.length;
        let cells = (length / eps).round() as usize;
        let per_eps = n.points_per_eps.max(MIN_POINTS_PER_EPS as usize);
        let rc = ReferenceConfig {
            eps,
            length,
            points: cells.saturating_mul(per_eps).checked_next_power_of_two().unwrap_or(usize::MAX),
            dt: eps / n.reference_steps_per_eps,
            lattice: self.config.problem(&self.base)?.lattice,
            external: self.config.potential.external.clone(),
            t_final,
        };
        rc.validate().map_err(CliError::stage("reference"))?;
        Ok(rc)
    }

    /// Initial field on the engine grid.
    fn initial_field(&self, engine: &Engine) -> Result<WaveField, CliError> {
        let eps = engine.numerics.eps;
        match &self.config.initial {
            InitialSection::File { path } => {
                let full = self.base.join(path);
                let field = WaveField::load(&full).map_err(CliError::stage("initial"))?;
                if (field.eps - eps).abs() > 1e-12 * eps || (field.length - engine.problem.length).abs() > 1e-12 {
                    return Err(CliError::Config(format!(
                        "{} holds ε = {}, L = {}; the run needs ε = {eps}, L = {}",
                        full.display(),
                        field.eps,
                        field.length,
                        engine.problem.length
                    )));
                }
                Ok(field)
            }
            InitialSection::GaussianPacket { .. } => {
                let (packet, modulate) =
                    self.config.packet(eps).ok_or_else(|| CliError::Config("initial packet is malformed".into()))?;
                engine.initial_packet(&packet, modulate).map_err(CliError::stage("initial"))
            }
        }
    }

    /// Thawed-Gaussian solution when `V = 0`, `U` is zero or harmonic and the input is a packet.
    fn analytic(&self, engine: &Engine, points: usize, t: f64) -> Option<WaveField> {
        if !engine.problem.lattice.is_zero() {
            return None;
        }
        if !matches!(engine.problem.external, ExternalPotential::Zero | ExternalPotential::Harmonic { .. }) {
            return None;
        }
        let (packet, _) = self.config.packet(engine.numerics.eps)?;
        packet
            .exact_solution(&engine.problem.external, engine.numerics.eps, engine.problem.length, points, t)
            .ok()
    }
}

struct Stopwatch {
    start: Instant,
}

impl Stopwatch {
    fn start() -> Self {
        Self { start: Instant::now() }
    }

    fn lap(&mut self, report: &mut RunReport, stage: &str) {
        *report.timings.entry(stage.to_string()).or_insert(0.0) += self.start.elapsed().as_secs_f64();
        self.start = Instant::now();
    }
}

fn eps_tag(i: usize, eps: f64) -> String {
    format!("eps{i}_{}", (1.0 / eps).round() as u64)
}

/// Band table, gauge and derivative diagnostics for the requested bands.
pub fn cmd_bands(ctx: &Context) -> Result<RunReport, CliError> {
    ctx.prepare()?;
    let cfg = &ctx.config;
    let mut report = RunReport::new("bands", ctx.threads, cfg);
    let mut clock = Stopwatch::start();
    let problem = cfg.problem(&ctx.base)?;
    let n = &cfg.numerics;
    let grid = BrillouinGrid::new(problem.dim, n.brillouin_nodes).map_err(CliError::stage("bands"))?;
    let bands = BandStructure::compute(grid, &problem.lattice, n.n_bands, n.cutoff).map_err(CliError::stage("bands"))?;
    clock.lap(&mut report, "bands");

    let indices: Vec<usize> = cfg.run.bands.iter().map(|b| b - 1).collect();
    ctx.write("bands.csv", &bands.to_csv(&indices))?;
    let mut gaps = String::from("band,min_gap,gap_threshold,isolated,offending_nodes\n");
    let mut failure = None;
    for &b in &indices {
        let threshold = bands.gap_threshold(b, n.gap_factor);
        let verdict = bands.check_isolated(b, n.gap_factor);
        let offending = bands.offending_nodes(b, n.gap_factor);
        gaps += &format!(
            "{},{:.6e},{:.6e},{},{}\n",
            b + 1,
            bands.table.min_gap(b),
            threshold,
            verdict.is_ok(),
            offending.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
        );
        report.bands.push(BandSummary {
            band: b + 1,
            min_gap: bands.table.min_gap(b),
            min_gap_at: bands.table.min_gap_location(b),
            gap_threshold: threshold,
            isolated: verdict.is_ok(),
            holonomy: (0..problem.dim).map(|a| bands.table.holonomy(b, a, 0)).collect(),
            berry_max_imaginary: bands.berry.max_imaginary(b),
            gradient_discrepancy: bands.grad.relative_discrepancy[b],
        });
        if let Err(e) = verdict {
            if !offending.is_empty() {
                report.notes.push(format!("band {}: gap below the guard at ξ ∈ {offending:?}", b + 1));
            }
            failure.get_or_insert(e);
        }
    }
    ctx.write("gaps.csv", &gaps)?;
    clock.lap(&mut report, "output");
    if let Some(e) = failure {
        report.verdict = "FAIL".into();
        report.save(&ctx.out)?;
        return Err(CliError::Stage { stage: "bands", source: e });
    }
    report.save(&ctx.out)?;
    Ok(report)
}

/// Windowed coefficients per band, reconstruction residual and Parseval ratio.
pub fn cmd_decompose(ctx: &Context) -> Result<RunReport, CliError> {
    ctx.prepare()?;
    let cfg = &ctx.config;
    let mut report = RunReport::new("decompose", ctx.threads, cfg);
    let mut clock = Stopwatch::start();
    for (i, &eps) in cfg.numerics.eps.iter().enumerate() {
        let engine = ctx.engine(eps, 0)?;
        clock.lap(&mut report, "bands");
        let psi = ctx.initial_field(&engine)?;
        let tag = eps_tag(i, eps);
        let all_bands = if engine.structure().is_some() { cfg.numerics.n_bands } else { 1 };
        let residual = engine.reconstruction_residual(&psi, all_bands).map_err(CliError::stage("decompose"))?;
        let grid = engine.phase_space_grid(&psi).map_err(CliError::stage("decompose"))?;
        let waves: Vec<Box<dyn BlochWaves + '_>> =
            (0..all_bands).map(|b| engine.waves(b)).collect::<Result<_, FgaError>>().map_err(CliError::stage("decompose"))?;
        let refs: Vec<&dyn BlochWaves> = waves.iter().map(|w| w.as_ref()).collect();
        let parseval = parseval_check(&psi, &refs, &grid, engine.numerics.transform_options())
            .map_err(CliError::stage("decompose"))?;
        for &b in &cfg.run.bands {
            let coeffs = engine.decompose(&psi, b - 1).map_err(CliError::stage("decompose"))?;
            ctx.write(&format!("{tag}_band{b}_coefficients.csv"), &coeffs.to_csv())?;
            report.runs.push(RunSummary {
                eps,
                band: b,
                coefficients: coeffs.values.len(),
                seeds: coeffs.seeds(cfg.numerics.seed_threshold).len(),
                failures: 0,
                max_symplectic_residual: 0.0,
                min_sigma_z: f64::INFINITY,
                max_energy_drift: 0.0,
                max_abs_a1: 0.0,
                t0_consistency: 0.0,
                threshold_impact: 0.0,
                reconstruction_residual: Some(residual),
                parseval_ratio: Some(parseval.ratio),
                errors: Vec::new(),
            });
        }
        if residual > cfg.tolerances.reconstruction {
            report.verdict = "FAIL".into();
            report.notes.push(format!(
                "ε = {eps}: reconstruction residual {residual:.3e} over {all_bands} bands exceeds {:.1e}",
                cfg.tolerances.reconstruction
            ));
        }
        clock.lap(&mut report, "decompose");
    }
    report.save(&ctx.out)?;
    if report.verdict != "PASS" {
        return Err(CliError::Failure(report.notes.join("; ")));
    }
    Ok(report)
}

/// FGA propagation of each requested band with fields at every checkpoint.
pub fn cmd_propagate(ctx: &Context) -> Result<RunReport, CliError> {
    ctx.prepare()?;
    let cfg = &ctx.config;
    let mut report = RunReport::new("propagate", ctx.threads, cfg);
    let mut clock = Stopwatch::start();
    let times = cfg.checkpoint_times();
    for (i, &eps) in cfg.numerics.eps.iter().enumerate() {
        let engine = ctx.engine(eps, 0)?;
        clock.lap(&mut report, "bands");
        let psi = ctx.initial_field(&engine)?;
        let tag = eps_tag(i, eps);
        let mut totals: Vec<WaveField> = times.iter().map(|&t| WaveField { time: t, ..psi.zeros_like() }).collect();
        for &b in &cfg.run.bands {
            let run = engine.propagate(&psi, b - 1, &times).map_err(CliError::stage("propagate"))?;
            clock.lap(&mut report, "propagate");
            let mut errors = Vec::new();
            for (k, (field, &t)) in run.fields.iter().zip(&times).enumerate() {
                field.save(&ctx.out.join(format!("{tag}_band{b}_t{k}.fgawf"))).map_err(CliError::stage("output"))?;
                ctx.write(&format!("{tag}_band{b}_t{k}_density.csv"), &field.intensity_csv())?;
                totals[k] = totals[k].add(field).map_err(CliError::stage("synthesis"))?;
                if let Some(exact) = ctx.analytic(&engine, psi.points, t) {
                    let (abs, _) = l2_distance(field, &exact).map_err(CliError::stage("analytic"))?;
                    errors.push((t, abs / psi.norm()));
                }
            }
            ctx.write(&format!("{tag}_band{b}_trajectories.csv"), &checkpoint_csv(run.ensemble.final_states()))?;
            let m = &run.ensemble.monitors;
            report.runs.push(RunSummary {
                eps,
                band: b,
                coefficients: run.coefficient_count,
                seeds: run.seed_count,
                failures: run.ensemble.failures.len(),
                max_symplectic_residual: m.max_symplectic_residual,
                min_sigma_z: m.min_sigma_z,
                max_energy_drift: m.max_energy_drift,
                max_abs_a1: m.max_abs_a1,
                t0_consistency: run.t0_error,
                threshold_impact: run.threshold_impact,
                reconstruction_residual: None,
                parseval_ratio: None,
                errors,
            });
            if run.t0_error > cfg.tolerances.t0_consistency {
                report.verdict = "FAIL".into();
                report.notes.push(format!(
                    "ε = {eps}, band {b}: ‖ψ_FGA(0) − Π ψ0‖ = {:.3e} exceeds {:.1e}",
                    run.t0_error, cfg.tolerances.t0_consistency
                ));
            }
            for f in &run.ensemble.failures {
                report.notes.push(format!("ε = {eps}, band {b}: seed {} dropped at t = {}: {}", f.seed_index, f.time, f.reason));
            }
            clock.lap(&mut report, "output");
        }
        if cfg.run.bands.len() > 1 {
            for (k, field) in totals.iter().enumerate() {
                field.save(&ctx.out.join(format!("{tag}_total_t{k}.fgawf"))).map_err(CliError::stage("output"))?;
                ctx.write(&format!("{tag}_total_t{k}_density.csv"), &field.intensity_csv())?;
            }
            clock.lap(&mut report, "output");
        }
    }
    report.save(&ctx.out)?;
    if report.verdict != "PASS" {
        return Err(CliError::Failure(report.notes.join("; ")));
    }
    Ok(report)
}

/// Split-step reference fields at every checkpoint.
pub fn cmd_reference(ctx: &Context) -> Result<RunReport, CliError> {
    ctx.prepare()?;
    let cfg = &ctx.config;
    let mut report = RunReport::new("reference", ctx.threads, cfg);
    let mut clock = Stopwatch::start();
    let times = cfg.checkpoint_times();
    for (i, &eps) in cfg.numerics.eps.iter().enumerate() {
        let rc = ctx.reference_plan(eps, cfg.run.t_final)?;
        let engine = ctx.engine(eps, MIN_POINTS_PER_EPS as usize)?;
        debug_assert_eq!(rc, engine.reference_config(cfg.run.t_final));
        let psi = ctx.initial_field(&engine)?;
        clock.lap(&mut report, "setup");
        let fields = reference_checkpoints(&psi, &rc, &times).map_err(CliError::stage("reference"))?;
        clock.lap(&mut report, "reference");
        let tag = eps_tag(i, eps);
        let mut drift: f64 = 0.0;
        for (k, field) in fields.iter().enumerate() {
            drift = drift.max((field.norm() - psi.norm()).abs() / psi.norm());
            field.save(&ctx.out.join(format!("{tag}_reference_t{k}.fgawf"))).map_err(CliError::stage("output"))?;
            ctx.write(&format!("{tag}_reference_t{k}_density.csv"), &field.intensity_csv())?;
        }
        report.notes.push(format!(
            "ε = {eps}: {} points, Δt = {:.3e}, max relative norm drift {drift:.3e}",
            rc.points, rc.dt
        ));
        clock.lap(&mut report, "output");
    }
    report.save(&ctx.out)?;
    Ok(report)
}

/// Checks that the ε list has at least three values, each half the previous one.
pub fn check_halving(eps: &[f64]) -> Result<(), CliError> {
    if eps.len() < 3 {
        return Err(CliError::Config(format!("convergence needs at least 3 ε values, got {}", eps.len())));
    }
    for w in eps.windows(2) {
        if (w[0] / w[1] - 2.0).abs() > 1e-9 {
            return Err(CliError::Config(format!("ε values must halve successively: {} → {}", w[0], w[1])));
        }
    }
    Ok(())
}

/// Error of the first requested band at `T` for every ε, with observed orders.
pub fn cmd_convergence(ctx: &Context) -> Result<RunReport, CliError> {
    let cfg = &ctx.config;
    check_halving(&cfg.numerics.eps)?;
    ctx.prepare()?;
    let mut report = RunReport::new("convergence", ctx.threads, cfg);
    let mut clock = Stopwatch::start();
    let t = cfg.run.t_final;
    let band = cfg.run.bands[0];
    let analytic = cfg.potential.lattice == crate::config::LatticeSpec::Zero
        && matches!(cfg.potential.external, ExternalPotential::Zero | ExternalPotential::Harmonic { .. })
        && matches!(cfg.initial, InitialSection::GaussianPacket { .. });
    if !analytic {
        for &eps in &cfg.numerics.eps {
            ctx.reference_plan(eps, t)?;
        }
    }
    let engines: Vec<Engine> = cfg
        .numerics
        .eps
        .iter()
        .map(|&eps| ctx.engine(eps, MIN_POINTS_PER_EPS as usize))
        .collect::<Result<_, _>>()?;
    clock.lap(&mut report, "bands");
    let mut rows = Vec::new();
    for engine in &engines {
        let eps = engine.numerics.eps;
        let psi = ctx.initial_field(engine)?;
        let run = engine.propagate(&psi, band - 1, &[t]).map_err(CliError::stage("propagate"))?;
        clock.lap(&mut report, "propagate");
        let (oracle, target) = match ctx.analytic(engine, psi.points, t) {
            Some(exact) => ("analytic", exact),
            None => {
                let rc = engine.reference_config(t);
                let field = reference_checkpoints(&psi, &rc, &[t]).map_err(CliError::stage("reference"))?;
                clock.lap(&mut report, "reference");
                ("reference", field.into_iter().next().expect("one checkpoint"))
            }
        };
        let (abs, _) = l2_distance(&run.fields[0], &target).map_err(CliError::stage("compare"))?;
        let error = abs / psi.norm();
        let m = &run.ensemble.monitors;
        report.runs.push(RunSummary {
            eps,
            band,
            coefficients: run.coefficient_count,
            seeds: run.seed_count,
            failures: run.ensemble.failures.len(),
            max_symplectic_residual: m.max_symplectic_residual,
            min_sigma_z: m.min_sigma_z,
            max_energy_drift: m.max_energy_drift,
            max_abs_a1: m.max_abs_a1,
            t0_consistency: run.t0_error,
            threshold_impact: run.threshold_impact,
            reconstruction_residual: None,
            parseval_ratio: None,
            errors: vec![(t, error)],
        });
        rows.push(ConvergenceRow {
            eps,
            error,
            order: None,
            flag: if error < cfg.tolerances.error_floor { "floor".into() } else { "ok".into() },
            oracle: oracle.into(),
        });
    }
    let errors: Vec<f64> = rows.iter().map(|r| r.error).collect();
    let orders = observed_orders(&errors);
    let mut counted = Vec::new();
    for (k, o) in orders.into_iter().enumerate() {
        rows[k + 1].order = Some(o);
        if rows[k].flag != "floor" && rows[k + 1].flag != "floor" {
            counted.push(o);
        }
    }
    let mut csv = String::from("eps,error,order,flag,oracle\n");
    for r in &rows {
        let order = r.order.map_or(String::new(), |o| format!("{o:.6}"));
        csv += &format!("{:.10e},{:.10e},{order},{},{}\n", r.eps, r.error, r.flag, r.oracle);
    }
    ctx.write("convergence.csv", &csv)?;
    report.convergence = rows;
    if counted.is_empty() {
        report.notes.push("all errors at the quadrature floor; no order is measured".into());
    } else {
        let mean = counted.iter().sum::<f64>() / counted.len() as f64;
        report.mean_order = Some(mean);
        if mean < cfg.tolerances.convergence_order {
            report.verdict = "FAIL".into();
            report.notes.push(format!("mean order {mean:.3} below {}", cfg.tolerances.convergence_order));
        }
    }
    clock.lap(&mut report, "output");
    report.save(&ctx.out)?;
    if report.verdict != "PASS" {
        return Err(CliError::Failure(report.notes.join("; ")));
    }
    Ok(report)
}

/// Loads a saved report.
pub fn cmd_report(dir: &Path) -> Result<RunReport, CliError> {
    RunReport::load(dir)
}

pub fn run_mode(mode: &str, ctx: &Context) -> Result<RunReport, CliError> {
    match mode {
        "bands" => cmd_bands(ctx),
        "decompose" => cmd_decompose(ctx),
        "propagate" => cmd_propagate(ctx),
        "reference" => cmd_reference(ctx),
        "convergence" => cmd_convergence(ctx),
        "report" => cmd_report(&ctx.out),
        other => Err(CliError::Config(format!("unknown mode {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn halving_rules() {
        assert!(check_halving(&[0.0625, 0.03125, 0.015625]).is_ok());
        assert!(check_halving(&[0.0625]).is_err());
        assert!(check_halving(&[0.0625, 0.03125, 0.02]).is_err());
    }
}
