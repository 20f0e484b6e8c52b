//! Versioned JSON run configuration.
//!
//! A config file may specify any subset of the fields; everything else takes
//! the documented default.  The canonical echo (key-sorted, fully
//! materialized) is written next to every output, and its SHA-256 hash is the
//! run fingerprint carried by all artifacts.

use crate::detwave::NewtonOpts;
use crate::grid::Grid;
use crate::kinetics::{fhn_model, nagumo_model, FhnNoise, Model};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use std::sync::Arc;

pub const SCHEMA_VERSION: u32 = 1;

fn default_schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub stochastic: StochasticSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// `"fhn"` or `"nagumo"`.
    #[serde(default = "ModelSection::default_name")]
    pub name: String,
    /// Threshold parameter of the cubic nonlinearity.
    #[serde(default = "ModelSection::default_a")]
    pub a: f64,
    /// Recovery timescale ε (FitzHugh–Nagumo only).
    #[serde(default = "ModelSection::default_epsilon")]
    pub epsilon: f64,
    /// Recovery coupling γ (FitzHugh–Nagumo only).
    #[serde(default = "ModelSection::default_gamma")]
    pub gamma: f64,
    /// Diffusion coefficient ϱ of the recovery component.
    #[serde(default = "ModelSection::default_rho_w")]
    pub rho_w: f64,
    /// `"linear-u"` (g(u,w) = (u, 0)) or `"cubic-cutoff"`.
    #[serde(default = "ModelSection::default_noise")]
    pub noise: String,
}

impl ModelSection {
    fn default_name() -> String {
        "fhn".into()
    }
    fn default_a() -> f64 {
        0.1
    }
    fn default_epsilon() -> f64 {
        0.01
    }
    fn default_gamma() -> f64 {
        5.0
    }
    fn default_rho_w() -> f64 {
        0.01
    }
    fn default_noise() -> String {
        "linear-u".into()
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "GridSection::default_half_length")]
    pub half_length: f64,
    #[serde(default = "GridSection::default_points")]
    pub points: usize,
}

impl GridSection {
    fn default_half_length() -> f64 {
        60.0
    }
    fn default_points() -> usize {
        3072
    }
}

impl Default for GridSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "SolverSection::default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "SolverSection::default_newton_max_iters")]
    pub newton_max_iters: usize,
    /// Time step of the linearized-flow propagator.
    #[serde(default = "SolverSection::default_propagator_dt")]
    pub propagator_dt: f64,
    /// Relative tail tolerance of the drift quadrature.
    #[serde(default = "SolverSection::default_quadrature_tol")]
    pub quadrature_tol: f64,
}

impl SolverSection {
    fn default_newton_tol() -> f64 {
        1e-10
    }
    fn default_newton_max_iters() -> usize {
        50
    }
    fn default_propagator_dt() -> f64 {
        1e-2
    }
    fn default_quadrature_tol() -> f64 {
        1e-6
    }
}

impl Default for SolverSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StochasticSection {
    #[serde(default = "StochasticSection::default_sigma")]
    pub sigma: f64,
    #[serde(default = "StochasticSection::default_dt")]
    pub dt: f64,
    #[serde(default = "StochasticSection::default_t_end")]
    pub t_end: f64,
    /// Decay rate ε of the stability functional `N_ε`.
    #[serde(default = "StochasticSection::default_eps")]
    pub eps: f64,
    /// Exceedance threshold η for `p_ε`.
    #[serde(default = "StochasticSection::default_eta")]
    pub eta: f64,
    #[serde(default = "StochasticSection::default_record_stride")]
    pub record_stride: usize,
}

impl StochasticSection {
    fn default_sigma() -> f64 {
        0.05
    }
    fn default_dt() -> f64 {
        1e-3
    }
    fn default_t_end() -> f64 {
        40.0
    }
    fn default_eps() -> f64 {
        0.02
    }
    fn default_eta() -> f64 {
        0.5
    }
    fn default_record_stride() -> usize {
        10
    }
}

impl Default for StochasticSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    #[serde(default = "EnsembleSection::default_paths")]
    pub paths: usize,
    #[serde(default = "EnsembleSection::default_seed")]
    pub seed: u64,
}

impl EnsembleSection {
    fn default_paths() -> usize {
        100
    }
    fn default_seed() -> u64 {
        1
    }
}

impl Default for EnsembleSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "OutputSection::default_directory")]
    pub directory: String,
    /// Subset of {"csv", "json", "gnuplot"}.
    #[serde(default = "OutputSection::default_formats")]
    pub formats: Vec<String>,
}

impl OutputSection {
    fn default_directory() -> String {
        "out".into()
    }
    fn default_formats() -> Vec<String> {
        vec!["csv".into(), "json".into(), "gnuplot".into()]
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl RunConfig {
    /// Parse and validate a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::validation(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        match self.model.name.as_str() {
            "fhn" | "nagumo" => {}
            other => {
                return Err(Error::validation(format!(
                    "unknown model '{other}' (expected 'fhn' or 'nagumo')"
                )))
            }
        }
        match self.model.noise.as_str() {
            "linear-u" | "cubic-cutoff" => {}
            other => {
                return Err(Error::validation(format!(
                    "unknown noise '{other}' (expected 'linear-u' or 'cubic-cutoff')"
                )))
            }
        }
        for (label, v) in [
            ("model.a", self.model.a),
            ("model.epsilon", self.model.epsilon),
            ("model.gamma", self.model.gamma),
            ("model.rho_w", self.model.rho_w),
            ("grid.half_length", self.grid.half_length),
            ("solver.newton_tol", self.solver.newton_tol),
            ("solver.propagator_dt", self.solver.propagator_dt),
            ("solver.quadrature_tol", self.solver.quadrature_tol),
            ("stochastic.dt", self.stochastic.dt),
            ("stochastic.t_end", self.stochastic.t_end),
            ("stochastic.eps", self.stochastic.eps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("{label} must be positive, got {v}")));
            }
        }
        if !(self.stochastic.sigma >= 0.0 && self.stochastic.sigma.is_finite()) {
            return Err(Error::validation("stochastic.sigma must be nonnegative"));
        }
        if !(self.stochastic.eta > 0.0 && self.stochastic.eta.is_finite()) {
            return Err(Error::validation("stochastic.eta must be positive"));
        }
        if self.grid.points < 16 {
            return Err(Error::validation("grid.points must be at least 16"));
        }
        if self.stochastic.record_stride == 0 {
            return Err(Error::validation("stochastic.record_stride must be at least 1"));
        }
        if self.ensemble.paths < 2 {
            return Err(Error::validation("ensemble.paths must be at least 2"));
        }
        for f in &self.output.formats {
            if !matches!(f.as_str(), "csv" | "json" | "gnuplot") {
                return Err(Error::validation(format!("unknown output format '{f}'")));
            }
        }
        Ok(())
    }

    /// Fully materialized, key-sorted JSON echo of this config.
    pub fn canonical_json(&self) -> String {
        // serde_json's default map is a BTreeMap, so round-tripping through
        // Value sorts all object keys.
        let value = serde_json::to_value(self).expect("config serializes");
        let mut text = serde_json::to_string_pretty(&value).expect("config prints");
        text.push('\n');
        text
    }

    /// SHA-256 of the canonical echo, in lowercase hex.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_json().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn build_grid(&self) -> Result<Arc<Grid>> {
        Grid::new(self.grid.half_length, self.grid.points)
    }

    /// Instantiate the model of the `model` section.
    pub fn build_model(&self) -> Result<Model> {
        match self.model.name.as_str() {
            "nagumo" => nagumo_model(self.model.a),
            "fhn" => {
                let noise = match self.model.noise.as_str() {
                    "linear-u" => FhnNoise::LinearU,
                    _ => FhnNoise::CubicCutoff,
                };
                fhn_model(
                    self.model.a,
                    self.model.epsilon,
                    self.model.gamma,
                    self.model.rho_w,
                    noise,
                )
            }
            other => Err(Error::validation(format!("unknown model '{other}'"))),
        }
    }

    pub fn newton_opts(&self) -> NewtonOpts {
        NewtonOpts {
            tol: self.solver.newton_tol,
            max_iters: self.solver.newton_max_iters,
            ..NewtonOpts::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_materialize_and_echo_is_idempotent() {
        let cfg = RunConfig::parse("{}").unwrap();
        assert_eq!(cfg.schema_version, 1);
        assert_eq!(cfg.model.name, "fhn");
        assert_eq!(cfg.stochastic.dt, 1e-3);
        assert_eq!(cfg.ensemble.paths, 100);

        let echo = cfg.canonical_json();
        assert!(echo.contains("\"dt\": 0.001"), "dt default missing:\n{echo}");
        let cfg2 = RunConfig::parse(&echo).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(echo, cfg2.canonical_json());
    }

    #[test]
    fn canonical_echo_is_key_sorted() {
        let echo = RunConfig::default().canonical_json();
        let top_level: Vec<usize> = [
            "\"ensemble\"",
            "\"grid\"",
            "\"model\"",
            "\"output\"",
            "\"schema_version\"",
            "\"solver\"",
            "\"stochastic\"",
        ]
        .iter()
        .map(|k| echo.find(k).unwrap_or_else(|| panic!("{k} missing")))
        .collect();
        assert!(
            top_level.windows(2).all(|w| w[0] < w[1]),
            "keys not sorted: {top_level:?}\n{echo}"
        );
    }

    #[test]
    fn unknown_keys_and_bad_versions_are_rejected() {
        assert!(RunConfig::parse(r#"{"typo_section": {}}"#).is_err());
        assert!(RunConfig::parse(r#"{"model": {"typo": 1}}"#).is_err());
        assert!(RunConfig::parse(r#"{"schema_version": 2}"#).is_err());
        assert!(RunConfig::parse(r#"{"model": {"name": "kpp"}}"#).is_err());
        assert!(RunConfig::parse(r#"{"stochastic": {"dt": -1.0}}"#).is_err());
        assert!(RunConfig::parse(r#"{"ensemble": {"paths": 1}}"#).is_err());
        assert!(RunConfig::parse(r#"{"output": {"formats": ["pdf"]}}"#).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let base = RunConfig::default();
        let fp = base.fingerprint();
        assert_eq!(fp.len(), 64);
        assert!(fp.chars().all(|c| c.is_ascii_hexdigit()));
        assert_eq!(fp, base.fingerprint());

        let mut other = base.clone();
        other.stochastic.sigma = 0.11;
        assert_ne!(fp, other.fingerprint());
    }

    #[test]
    fn builds_both_models() {
        let cfg = RunConfig::parse(r#"{"model": {"name": "nagumo", "a": 0.25}}"#).unwrap();
        let model = cfg.build_model().unwrap();
        assert_eq!(model.n_comp(), 1);

        let cfg = RunConfig::default();
        let model = cfg.build_model().unwrap();
        assert_eq!(model.n_comp(), 2);
        assert!(cfg.build_grid().is_ok());
    }
}
