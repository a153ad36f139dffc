//! Per-run record serialized as TOML next to the outputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const REPORT_FILE: &str = "report.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub threads: usize,
    pub config: RunConfig,
    /// Seconds per stage.
    #[serde(default)]
    pub timings: BTreeMap<String, f64>,
    #[serde(default)]
    pub bands: Vec<BandSummary>,
    #[serde(default)]
    pub runs: Vec<RunSummary>,
    #[serde(default)]
    pub convergence: Vec<ConvergenceRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_order: Option<f64>,
    pub verdict: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

/// Band table diagnostics for one band (1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSummary {
    pub band: usize,
    pub min_gap: f64,
    pub min_gap_at: Vec<f64>,
    pub gap_threshold: f64,
    pub isolated: bool,
    /// Holonomy per axis of the first Brillouin line.
    pub holonomy: Vec<f64>,
    pub berry_max_imaginary: f64,
    pub gradient_discrepancy: f64,
}

/// One FGA run of one band at one ε.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub eps: f64,
    pub band: usize,
    pub coefficients: usize,
    pub seeds: usize,
    pub failures: usize,
    pub max_symplectic_residual: f64,
    pub min_sigma_z: f64,
    pub max_energy_drift: f64,
    pub max_abs_a1: f64,
    pub t0_consistency: f64,
    pub threshold_impact: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parseval_ratio: Option<f64>,
    /// `(t, ‖ψ_FGA(t) − ψ_ref(t)‖/‖ψ0‖)` when a comparison was made.
    #[serde(default)]
    pub errors: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub error: f64,
    /// `log2(E(2ε)/E(ε))`; absent on the first row.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<f64>,
    pub flag: String,
    pub oracle: String,
}

impl RunReport {
    pub fn new(command: &str, threads: usize, config: &RunConfig) -> Self {
        Self {
            command: command.into(),
            threads,
            config: config.clone(),
            timings: BTreeMap::new(),
            bands: Vec::new(),
            runs: Vec::new(),
            convergence: Vec::new(),
            mean_order: None,
            verdict: "PASS".into(),
            notes: Vec::new(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report is always serializable")
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("report: {e}")))
    }

    pub fn save(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::write(dir.join(REPORT_FILE), self.to_toml())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = if dir.is_dir() { dir.join(REPORT_FILE) } else { dir.to_path_buf() };
        let text = std::fs::read_to_string(&path)?;
        Self::from_toml(&text)
    }

    /// Human-readable summary.
    pub fn summary(&self) -> String {
        let mut out = format!("command: {} (threads: {})\nverdict: {}\n", self.command, self.threads, self.verdict);
        for b in &self.bands {
            out += &format!(
                "band {}: min gap {:.3e} at {:?} (threshold {:.3e}, {}), berry imag {:.2e}\n",
                b.band,
                b.min_gap,
                b.min_gap_at,
                b.gap_threshold,
                if b.isolated { "isolated" } else { "NOT isolated" },
                b.berry_max_imaginary
            );
        }
        for r in &self.runs {
            out += &format!(
                "eps {:.6} band {}: seeds {}/{} failures {} sympl {:.2e} min sigma(Z) {:.6} t0 {:.2e}",
                r.eps, r.band, r.seeds, r.coefficients, r.failures, r.max_symplectic_residual, r.min_sigma_z, r.t0_consistency
            );
            for (t, e) in &r.errors {
                out += &format!(" err(t={t}) {e:.3e}");
            }
            out.push('\n');
        }
        for c in &self.convergence {
            let order = c.order.map_or("-".to_string(), |o| format!("{o:.3}"));
            out += &format!("eps {:.6}: error {:.4e} order {order} {} [{}]\n", c.eps, c.error, c.flag, c.oracle);
        }
        if let Some(m) = self.mean_order {
            out += &format!("mean order {m:.3}\n");
        }
        for (k, v) in &self.timings {
            out += &format!("time {k}: {v:.3} s\n");
        }
        for n in &self.notes {
            out += &format!("note: {n}\n");
        }
        out
    }
}
