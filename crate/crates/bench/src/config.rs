//! Benchmark configuration, read from JSON with per-field defaults.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use cdps_core::sampler::{MeanRhs, SolverConfig};
use cdps_core::schedules::NoiseSchedule;
use serde::{Deserialize, Serialize};

use crate::BenchError;

/// Samplers the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cdps,
    Dps,
    ScoreSde,
    Ilvr,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cdps, Method::Dps, Method::ScoreSde, Method::Ilvr];

    pub fn name(self) -> &'static str {
        match self {
            Method::Cdps => "cdps",
            Method::Dps => "dps",
            Method::ScoreSde => "score_sde",
            Method::Ilvr => "ilvr",
        }
    }

    /// Stable tag mixed into seeds.
    pub(crate) fn tag(self) -> u64 {
        match self {
            Method::Cdps => 1,
            Method::Dps => 2,
            Method::ScoreSde => 3,
            Method::Ilvr => 4,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| BenchError::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanRhsChoice {
    #[default]
    Derived,
    Simplified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub dims: Vec<usize>,
    pub measurements: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub matrices_per_config: usize,
    pub samples_per_run: usize,
    pub sw_slices: usize,
    pub num_steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub cg_tol: f64,
    pub cg_max_iter: Option<usize>,
    /// Keep the `N(0, I)` prior term in the C-DPS precision.
    pub include_prior: bool,
    pub mean_rhs: MeanRhsChoice,
    pub dps_zeta: f64,
    /// Step scale for the Score-SDE and ILVR corrections.
    pub guidance_scale: f64,
    /// Use one measurement chain for every C-DPS sample of a matrix.
    pub shared_y_chain: bool,
    pub max_retries: usize,
    /// Write wall-clock seconds; zero otherwise so reruns are byte-identical.
    pub record_timing: bool,
    pub scatter: bool,
    /// Chains per (method, setting) written when tracing.
    pub trace_chains: usize,
    pub workers: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            dims: vec![8, 80],
            measurements: vec![1, 2, 4],
            sigmas: vec![1e-2, 1e-1, 1.0],
            matrices_per_config: 20,
            samples_per_run: 1000,
            sw_slices: 10_000,
            num_steps: 1000,
            beta_min: 0.1,
            beta_max: 500.0,
            methods: vec![Method::Cdps, Method::Dps],
            seed: 0,
            cg_tol: 1e-8,
            cg_max_iter: None,
            include_prior: true,
            mean_rhs: MeanRhsChoice::Derived,
            dps_zeta: 1.0,
            guidance_scale: 1.0,
            shared_y_chain: false,
            max_retries: 3,
            record_timing: true,
            scatter: false,
            trace_chains: 10,
            workers: None,
        }
    }
}

impl BenchConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| BenchError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |msg: String| Err(BenchError::Config(msg));
        if self.dims.is_empty() || self.measurements.is_empty() || self.sigmas.is_empty() {
            return bad("dims, measurements and sigmas must be non-empty".into());
        }
        for (name, v) in [
            ("matrices_per_config", self.matrices_per_config),
            ("samples_per_run", self.samples_per_run),
            ("sw_slices", self.sw_slices),
            ("num_steps", self.num_steps),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for &d in &self.dims {
            if d == 0 || !d.is_multiple_of(2) {
                return bad(format!("dimension {d} must be even and positive"));
            }
            for &m in &self.measurements {
                if m == 0 || m > d {
                    return bad(format!("measurement count {m} must be in 1..={d}"));
                }
            }
        }
        if self.sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("noise levels must be positive".into());
        }
        if self.cg_tol.is_nan() || self.cg_tol <= 0.0 {
            return bad("cg_tol must be positive".into());
        }
        if self.cg_max_iter == Some(0) {
            return bad("cg_max_iter must be positive".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be positive".into());
        }
        NoiseSchedule::linear(self.num_steps, self.beta_min, self.beta_max)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, BenchError> {
        Ok(NoiseSchedule::linear(self.num_steps, self.beta_min, self.beta_max)?)
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            cg_tol: self.cg_tol,
            cg_max_iter: self.cg_max_iter,
            mean_rhs: match self.mean_rhs {
                MeanRhsChoice::Derived => MeanRhs::Derived,
                MeanRhsChoice::Simplified => MeanRhs::Simplified,
            },
            include_prior: self.include_prior,
            precondition: true,
        }
    }

    /// Every `(d, m, sigma)` grid point in emission order.
    pub fn grid(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for &d in &self.dims {
            for &m in &self.measurements {
                for &s in &self.sigmas {
                    out.push((d, m, s));
                }
            }
        }
        out
    }
}
