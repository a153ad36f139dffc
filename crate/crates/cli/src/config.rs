//! Run configuration: TOML document, `--set` overrides and range checks.

use std::path::{Path, PathBuf};

use fga_core::analytic::GaussianPacket;
use fga_core::lattice::PeriodicPotential;
use fga_core::pipeline::{Numerics, Problem, DEFAULT_REFERENCE_STEPS_PER_EPS};
use fga_core::potential::ExternalPotential;
use fga_core::wavefield::cell_count;
use fga_core::C64;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub potential: PotentialSection,
    #[serde(default)]
    pub numerics: NumericsSection,
    pub initial: InitialSection,
    pub run: RunSection,
    #[serde(default)]
    pub tolerances: Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PotentialSection {
    pub dim: usize,
    pub length: f64,
    pub lattice: LatticeSpec,
    #[serde(default = "zero_external")]
    pub external: ExternalPotential,
}

fn zero_external() -> ExternalPotential {
    ExternalPotential::Zero
}

/// Lattice potential `V(y)`, one period on `[0,1)^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LatticeSpec {
    Zero,
    /// `A Σ_a cos(2π y_a)`.
    Cosine { amplitude: f64 },
    /// Explicit Fourier coefficients `[k…, re, im]`.
    Coefficients { entries: Vec<Vec<f64>> },
    /// Coefficient text file.
    File { path: PathBuf },
}

impl LatticeSpec {
    pub fn build(&self, dim: usize, base: &Path) -> Result<PeriodicPotential, CliError> {
        let pot = match self {
            Self::Zero => PeriodicPotential::zero(dim),
            Self::Cosine { amplitude } => PeriodicPotential::cosine(dim, *amplitude),
            Self::Coefficients { entries } => {
                let mut list = Vec::with_capacity(entries.len());
                for e in entries {
                    if e.len() != dim + 2 {
                        return Err(CliError::Config(format!("lattice entry {e:?} needs {dim} indices plus re, im")));
                    }
                    let k: Vec<i32> = e[..dim].iter().map(|v| v.round() as i32).collect();
                    list.push((k, C64::new(e[dim], e[dim + 1])));
                }
                PeriodicPotential::new(dim, list).map_err(|e| CliError::Config(e.to_string()))?
            }
            Self::File { path } => {
                let full = base.join(path);
                let text = std::fs::read_to_string(&full)
                    .map_err(|e| CliError::Config(format!("reading {}: {e}", full.display())))?;
                PeriodicPotential::parse(&text).map_err(|e| CliError::Config(e.to_string()))?
            }
        };
        if pot.dim() != dim {
            return Err(CliError::Config(format!("lattice potential has d = {}, config has d = {dim}", pot.dim())));
        }
        Ok(pot)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsSection {
    pub eps: Vec<f64>,
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
    pub points_per_eps: usize,
    pub reference_steps_per_eps: f64,
    pub with_a1: bool,
}

impl Default for NumericsSection {
    fn default() -> Self {
        let n = Numerics::new(1.0 / 32.0);
        Self {
            eps: vec![n.eps],
            brillouin_nodes: n.brillouin_nodes,
            cutoff: n.cutoff,
            n_bands: n.n_bands,
            q_factor: n.q_factor,
            p_factor: n.p_factor,
            spacing_bound: n.spacing_bound,
            dt: n.dt,
            truncation_radius: n.truncation_radius,
            seed_threshold: n.seed_threshold,
            gap_factor: n.gap_factor,
            points_per_eps: n.points_per_eps,
            reference_steps_per_eps: DEFAULT_REFERENCE_STEPS_PER_EPS,
            with_a1: n.with_a1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WidthScaling {
    /// Width in units of `√ε`.
    Semiclassical,
    /// Width in units of length.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSection {
    GaussianPacket {
        center: Vec<f64>,
        momentum: Vec<f64>,
        #[serde(default = "unit")]
        width: f64,
        #[serde(default = "semiclassical")]
        width_scaling: WidthScaling,
        /// Band (1-based) whose Bloch wave modulates the envelope; 0 for none.
        #[serde(default = "first_band")]
        modulate: usize,
    },
    /// WaveField binary file.
    File { path: PathBuf },
}

fn unit() -> f64 {
    1.0
}

fn semiclassical() -> WidthScaling {
    WidthScaling::Semiclassical
}

fn first_band() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_mode")]
    pub mode: String,
    #[serde(default)]
    pub t_final: f64,
    /// Explicit checkpoint list; empty means `{0, T/2, T}`.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    /// 1-based band indices.
    #[serde(default = "default_bands")]
    pub bands: Vec<usize>,
}

fn default_mode() -> String {
    "propagate".into()
}

fn default_output() -> PathBuf {
    PathBuf::from("fga-out")
}

fn default_bands() -> Vec<usize> {
    vec![1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub t0_consistency: f64,
    pub convergence_order: f64,
    pub reconstruction: f64,
    /// Errors below this are reported as the quadrature floor in rate tables.
    pub error_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { t0_consistency: 1e-10, convergence_order: 0.8, reconstruction: 1e-4, error_floor: 1e-7 }
    }
}

pub const MODES: [&str; 6] = ["bands", "decompose", "propagate", "reference", "convergence", "report"];

impl RunConfig {
    /// Parses a TOML document, applies `section.key=value` overrides and range-checks.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = doc.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CliError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let p = &self.potential;
        let n = &self.numerics;
        if p.dim != 1 && p.dim != 2 {
            return bad(format!("potential.dim = {} not in {{1, 2}}", p.dim));
        }
        if !(p.length > 0.0 && p.length.is_finite()) {
            return bad(format!("potential.length = {} must be positive", p.length));
        }
        p.external.validate(p.dim).map_err(|e| CliError::Config(e.to_string()))?;
        if n.eps.is_empty() {
            return bad("numerics.eps needs at least one value".into());
        }
        for &e in &n.eps {
            if !(e > 0.0 && e <= 1.0) {
                return bad(format!("numerics.eps value {e} outside (0, 1]"));
            }
            cell_count(p.length, e).map_err(|err| CliError::Config(err.to_string()))?;
        }
        if n.brillouin_nodes < 4 || !n.brillouin_nodes.is_power_of_two() {
            return bad(format!("numerics.brillouin_nodes = {} must be a power of two ≥ 4", n.brillouin_nodes));
        }
        if n.n_bands == 0 {
            return bad("numerics.n_bands must be ≥ 1".into());
        }
        if n.n_bands > (2 * n.cutoff + 1).pow(p.dim as u32) {
            return bad(format!("numerics.n_bands = {} exceeds the plane-wave count", n.n_bands));
        }
        for (name, v) in [
            ("q_factor", n.q_factor),
            ("p_factor", n.p_factor),
            ("spacing_bound", n.spacing_bound),
            ("dt", n.dt),
            ("truncation_radius", n.truncation_radius),
            ("gap_factor", n.gap_factor),
            ("reference_steps_per_eps", n.reference_steps_per_eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("numerics.{name} = {v} must be positive"));
            }
        }
        if n.reference_steps_per_eps < fga_core::reference::MIN_STEPS_PER_EPS {
            return bad("numerics.reference_steps_per_eps must be ≥ 20".into());
        }
        if !(0.0..1.0).contains(&n.seed_threshold) {
            return bad(format!("numerics.seed_threshold = {} outside [0, 1)", n.seed_threshold));
        }
        if n.points_per_eps < 8 {
            return bad(format!("numerics.points_per_eps = {} must be ≥ 8", n.points_per_eps));
        }
        if n.with_a1 && p.dim != 1 {
            return bad("numerics.with_a1 is supported for d = 1 only".into());
        }
        if let InitialSection::GaussianPacket { center, momentum, width, modulate, .. } = &self.initial {
            if center.len() != p.dim || momentum.len() != p.dim {
                return bad("initial.center and initial.momentum need d components".into());
            }
            if !(*width > 0.0) {
                return bad("initial.width must be positive".into());
            }
            if *modulate > n.n_bands {
                return bad(format!("initial.modulate = {modulate} exceeds numerics.n_bands"));
            }
        }
        let r = &self.run;
        if !MODES.contains(&r.mode.as_str()) {
            return bad(format!("run.mode = {:?} not one of {MODES:?}", r.mode));
        }
        if !(r.t_final >= 0.0 && r.t_final.is_finite()) {
            return bad(format!("run.t_final = {} must be ≥ 0", r.t_final));
        }
        if r.checkpoints.iter().any(|&t| !(0.0..=r.t_final).contains(&t)) {
            return bad("run.checkpoints must lie in [0, t_final]".into());
        }
        if r.bands.is_empty() || r.bands.iter().any(|&b| b == 0 || b > n.n_bands) {
            return bad(format!("run.bands {:?} must be 1-based and ≤ n_bands", r.bands));
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("t0_consistency", t.t0_consistency),
            ("reconstruction", t.reconstruction),
            ("error_floor", t.error_floor),
        ] {
            if !(v > 0.0) {
                return bad(format!("tolerances.{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn checkpoint_times(&self) -> Vec<f64> {
        let t = self.run.t_final;
        let mut v = if self.run.checkpoints.is_empty() { vec![0.0, 0.5 * t, t] } else { self.run.checkpoints.clone() };
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    }

    pub fn problem(&self, base: &Path) -> Result<Problem, CliError> {
        let p = &self.potential;
        Ok(Problem {
            dim: p.dim,
            length: p.length,
            lattice: p.lattice.build(p.dim, base)?,
            external: p.external.clone(),
        })
    }

    pub fn numerics(&self, eps: f64) -> Numerics {
        let s = &self.numerics;
        let mut n = Numerics::new(eps);
        n.brillouin_nodes = s.brillouin_nodes;
        n.cutoff = s.cutoff;
        n.n_bands = s.n_bands;
        n.q_factor = s.q_factor;
        n.p_factor = s.p_factor;
        n.spacing_bound = s.spacing_bound;
        n.dt = s.dt;
        n.truncation_radius = s.truncation_radius;
        n.seed_threshold = s.seed_threshold;
        n.gap_factor = s.gap_factor;
        n.points_per_eps = s.points_per_eps;
        n.reference_steps_per_eps = s.reference_steps_per_eps;
        n.with_a1 = s.with_a1;
        n
    }

    /// Gaussian packet at a given ε (None for file input).
    pub fn packet(&self, eps: f64) -> Option<(GaussianPacket, Option<usize>)> {
        match &self.initial {
            InitialSection::GaussianPacket { center, momentum, width, width_scaling, modulate } => {
                let w = match width_scaling {
                    WidthScaling::Semiclassical => *width,
                    WidthScaling::Fixed => *width / eps.sqrt(),
                };
                let packet = GaussianPacket::new(self.potential.dim, center, momentum, w).ok()?;
                Some((packet, modulate.checked_sub(1)))
            }
            InitialSection::File { .. } => None,
        }
    }
}

/// Sets `section.key[.key…] = value` in a TOML table; values parse as TOML, else as strings.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) =
        spec.split_once('=').ok_or_else(|| CliError::Config(format!("override {spec:?} is not KEY=VALUE")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut table = doc;
    for part in &path[..path.len() - 1] {
        let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override path {key:?} crosses a non-table value")))?;
    }
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}
