//! Run configuration: TOML with dotted keys (`model.eta = 1.0`), every
//! default materialised on load.

use std::path::{Path, PathBuf};

use harvest_core::chain::{GridOverrides, LinearSolverOptions};
use harvest_core::{ModelParams, SimConfig, SolverOptions, State};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "d::eta")]
    pub eta: f64,
    #[serde(default = "d::lambda_cap")]
    pub lambda_cap: f64,
    #[serde(default = "d::gamma")]
    pub gamma: f64,
    #[serde(default = "d::mu")]
    pub mu: f64,
    #[serde(default = "d::sigma")]
    pub sigma: f64,
    #[serde(default = "d::rho_cost")]
    pub rho_cost: f64,
    #[serde(default = "d::varsigma")]
    pub varsigma: f64,
    #[serde(default = "d::c1")]
    pub c1: f64,
    #[serde(default = "d::c2")]
    pub c2: f64,
    #[serde(default = "d::c3")]
    pub c3: f64,
    #[serde(default = "d::g0")]
    pub g0: f64,
    #[serde(default = "d::g_slope")]
    pub g_slope: f64,
    /// Maximal renewal order. No default.
    #[serde(rename = "K")]
    pub k_max: Option<f64>,
    #[serde(rename = "T", default = "d::horizon")]
    pub horizon: f64,
    #[serde(default = "d::n_dates")]
    pub n_dates: usize,
    #[serde(default = "d::m_delay")]
    pub m_delay: usize,
    #[serde(default = "d::yes")]
    pub cost_equals_price: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub r_max: Option<f64>,
    pub n_r: Option<usize>,
    pub s_min: Option<f64>,
    pub s_max: Option<f64>,
    pub n_s: Option<usize>,
    pub n_e: Option<usize>,
    pub n_t: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tol_policy: f64,
    pub max_iters: usize,
    pub tol_tie: f64,
    pub s_padding: f64,
    pub linear_tol: f64,
    pub max_sweeps: usize,
    pub omega: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        let o = SolverOptions::default();
        Self {
            tol_policy: o.tol_policy,
            max_iters: o.max_iters,
            tol_tie: o.tol_tie,
            s_padding: o.s_padding,
            linear_tol: o.linear.tol,
            max_sweeps: o.linear.max_sweeps,
            omega: o.linear.omega,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub n_paths: usize,
    pub seed: u64,
    pub n_sub: usize,
    pub filter: bool,
    /// Start state `[x, r, p, q]`.
    pub z0: [f64; 4],
    /// Quantities pending at time zero, oldest first.
    pub pending0: Vec<f64>,
    /// Leading paths written to `paths.csv`.
    pub trace_paths: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SimConfig::default();
        Self {
            n_paths: s.n_paths,
            seed: s.seed,
            n_sub: s.n_sub,
            filter: s.filter,
            z0: [0.0, 0.5, 1.0, 1.0],
            pending0: Vec::new(),
            trace_paths: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Times whose slices are written as CSV.
    pub slice_times: Vec<f64>,
    /// Pending-order combinations written for each selected time.
    pub slice_combos: Vec<usize>,
    pub emit_csv: bool,
    pub emit_pgm: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("out"),
            slice_times: vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5],
            slice_combos: vec![0],
            emit_csv: true,
            emit_pgm: false,
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        toml::from_str("").expect("every model field but K has a default")
    }
}

mod d {
    use harvest_core::ModelParams;

    fn b() -> ModelParams {
        ModelParams::baseline()
    }
    pub fn eta() -> f64 {
        b().eta
    }
    pub fn lambda_cap() -> f64 {
        b().lambda_cap
    }
    pub fn gamma() -> f64 {
        b().gamma
    }
    pub fn mu() -> f64 {
        b().mu
    }
    pub fn sigma() -> f64 {
        b().sigma
    }
    pub fn rho_cost() -> f64 {
        b().rho_cost
    }
    pub fn varsigma() -> f64 {
        b().varsigma
    }
    pub fn c1() -> f64 {
        b().c1
    }
    pub fn c2() -> f64 {
        b().c2
    }
    pub fn c3() -> f64 {
        b().c3
    }
    pub fn g0() -> f64 {
        b().g0
    }
    pub fn g_slope() -> f64 {
        b().g_slope
    }
    pub fn horizon() -> f64 {
        b().horizon
    }
    pub fn n_dates() -> usize {
        b().n_dates
    }
    pub fn m_delay() -> usize {
        b().m_delay
    }
    pub fn yes() -> bool {
        true
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        if cfg.model.k_max.is_none() {
            return Err(CliError::config(
                "model.K is required: set the maximal renewal order explicitly (for example `model.K = 0.3`)",
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// The config with every default written out.
    pub fn resolved(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn params(&self) -> ModelParams {
        let m = &self.model;
        ModelParams {
            eta: m.eta,
            lambda_cap: m.lambda_cap,
            gamma: m.gamma,
            mu: m.mu,
            sigma: m.sigma,
            rho_cost: m.rho_cost,
            varsigma: m.varsigma,
            c1: m.c1,
            c2: m.c2,
            c3: m.c3,
            g0: m.g0,
            g_slope: m.g_slope,
            k_max: m.k_max.unwrap_or(f64::NAN),
            horizon: m.horizon,
            n_dates: m.n_dates,
            m_delay: m.m_delay,
            cost_equals_price: m.cost_equals_price,
        }
    }

    pub fn grid_overrides(&self) -> GridOverrides {
        let g = &self.grid;
        GridOverrides {
            r_max: g.r_max,
            n_r: g.n_r,
            s_min: g.s_min,
            s_max: g.s_max,
            n_s: g.n_s,
            n_e: g.n_e,
            n_t: g.n_t,
        }
    }

    pub fn solver_options(&self) -> SolverOptions {
        let s = &self.solver;
        SolverOptions {
            tol_policy: s.tol_policy,
            max_iters: s.max_iters,
            tol_tie: s.tol_tie,
            s_padding: s.s_padding,
            linear: LinearSolverOptions {
                tol: s.linear_tol,
                max_sweeps: s.max_sweeps,
                omega: s.omega,
            },
        }
    }

    pub fn sim_config(&self) -> SimConfig {
        let s = &self.sim;
        SimConfig {
            n_paths: s.n_paths,
            seed: s.seed,
            n_sub: s.n_sub,
            filter: s.filter,
            tol_tie: self.solver.tol_tie,
            trace_paths: s.trace_paths,
        }
    }

    pub fn z0(&self) -> State {
        let [x, r, p, q] = self.sim.z0;
        State::new(x, r, p, q)
    }

    /// SHA-256 over the resolved model, grid and solver sections: what a
    /// solved field depends on.
    pub fn solve_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            model: &'a ModelSection,
            grid: &'a GridSection,
            solver: &'a SolverSection,
        }
        let text = toml::to_string(&Key {
            model: &self.model,
            grid: &self.grid,
            solver: &self.solver,
        })
        .expect("config serialises");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_baseline_defaults() {
        let cfg = RunConfig::parse("model.K = 0.3\n").unwrap();
        assert_eq!(cfg.params(), ModelParams::baseline());
        assert_eq!(cfg.solver_options(), SolverOptions::default());
        assert_eq!(cfg.sim.seed, 42);
    }

    #[test]
    fn missing_k_is_rejected() {
        let err = RunConfig::parse("model.eta = 1.0\n").unwrap_err();
        assert_eq!(err.code, 1);
        assert!(err.message.contains("model.K"));
    }

    #[test]
    fn empty_config_asks_for_k() {
        let err = RunConfig::parse("").unwrap_err();
        assert_eq!(err.code, 1);
        assert!(err.message.contains("model.K"));
    }

    #[test]
    fn shipped_configs_parse() {
        for text in [include_str!("../configs/baseline.toml"), include_str!("../configs/quick.toml")] {
            let cfg = RunConfig::parse(text).unwrap();
            assert_eq!(cfg.model.k_max, Some(0.3));
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("model.K = 0.3\nmodel.kappa = 1\n").is_err());
        assert!(RunConfig::parse("model.K = 0.3\n[extra]\nx = 1\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::parse("model.K = 0.2\ngrid.n_r = 31\nsim.pending0 = [0.1]\n").unwrap();
        let again = RunConfig::parse(&cfg.resolved()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.solve_hash(), again.solve_hash());
    }

    #[test]
    fn hash_ignores_simulation_settings() {
        let a = RunConfig::parse("model.K = 0.3\n").unwrap();
        let b = RunConfig::parse("model.K = 0.3\nsim.seed = 7\n").unwrap();
        let c = RunConfig::parse("model.K = 0.3\nmodel.c1 = 0.2\n").unwrap();
        assert_eq!(a.solve_hash(), b.solve_hash());
        assert_ne!(a.solve_hash(), c.solve_hash());
        assert_eq!(a.solve_hash().len(), 64);
    }
}
