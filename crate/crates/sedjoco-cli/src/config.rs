//! Configuration schema for the experiment runner.
//!
//! Every run is a pure function of its configuration file: all randomness
//! flows from `master_seed` (overridable with `--seed`), so rerunning a
//! config reproduces its artifacts byte for byte.

use std::path::PathBuf;

use serde::Deserialize;

/// Top-level configuration, tagged by the `experiment` field. The tag must
/// match the subcommand the runner was invoked with.
#[derive(Debug, Deserialize)]
#[serde(tag = "experiment")]
pub enum ExperimentConfig {
    #[serde(rename = "convergence")]
    Convergence(ConvergenceConfig),
    #[serde(rename = "nonstationary2x2")]
    Nonstationary(NonstationaryConfig),
    #[serde(rename = "stationary3x3")]
    Stationary(StationaryConfig),
    #[serde(rename = "solve")]
    Solve(SolveConfig),
    #[serde(rename = "crlb")]
    Crlb(CrlbConfig),
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::Convergence(_) => "convergence",
            ExperimentConfig::Nonstationary(_) => "nonstationary2x2",
            ExperimentConfig::Stationary(_) => "stationary3x3",
            ExperimentConfig::Solve(_) => "solve",
            ExperimentConfig::Crlb(_) => "crlb",
        }
    }

    pub fn override_seed(&mut self, seed: u64) {
        let slot = match self {
            ExperimentConfig::Convergence(c) => &mut c.master_seed,
            ExperimentConfig::Nonstationary(c) => &mut c.master_seed,
            ExperimentConfig::Stationary(c) => &mut c.master_seed,
            ExperimentConfig::Solve(c) => &mut c.master_seed,
            ExperimentConfig::Crlb(c) => &mut c.master_seed,
        };
        *slot = Some(seed);
    }

    pub fn validate(&self) -> Result<(), String> {
        let seed = match self {
            ExperimentConfig::Convergence(c) => {
                c.validate()?;
                c.master_seed
            }
            ExperimentConfig::Nonstationary(c) => {
                c.validate()?;
                c.master_seed
            }
            ExperimentConfig::Stationary(c) => {
                c.validate()?;
                c.master_seed
            }
            ExperimentConfig::Solve(c) => {
                c.validate()?;
                c.master_seed
            }
            ExperimentConfig::Crlb(c) => {
                c.validate()?;
                c.master_seed
            }
        };
        if seed.is_none() {
            return Err("no seed: set master_seed in the config or pass --seed".into());
        }
        Ok(())
    }
}

/// Iteration limits shared by both solvers.
#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct SolverParams {
    pub tol: f64,
    pub max_iters: usize,
    /// Line-search damping of the Newton step.
    pub damping: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            tol: 1e-10,
            max_iters: 2000,
            damping: true,
        }
    }
}

impl SolverParams {
    fn validate(&self) -> Result<(), String> {
        if !(self.tol > 0.0) {
            return Err(format!("solver tol must be positive, got {}", self.tol));
        }
        if self.max_iters == 0 {
            return Err("solver max_iters must be at least 1".into());
        }
        Ok(())
    }
}

fn default_sizes() -> Vec<[usize; 2]> {
    vec![[2, 2], [2, 4], [5, 2], [5, 4]]
}

fn default_convergence_trials() -> usize {
    100
}

fn default_trials() -> usize {
    200
}

fn default_t() -> usize {
    1000
}

fn default_alpha_grid() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}

fn default_t_grid() -> Vec<usize> {
    vec![100, 300, 1000]
}

fn default_filter_len() -> usize {
    5
}

fn default_eta() -> f64 {
    1.0
}

/// Solver benchmark over randomly generated well-posed instances.
#[derive(Debug, Clone, Deserialize)]
pub struct ConvergenceConfig {
    /// `[K, M]` problem sizes to sweep.
    #[serde(default = "default_sizes")]
    pub sizes: Vec<[usize; 2]>,
    #[serde(default = "default_convergence_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub solver: SolverParams,
}

impl ConvergenceConfig {
    fn validate(&self) -> Result<(), String> {
        if self.sizes.is_empty() {
            return Err("sizes must name at least one [K, M] pair".into());
        }
        for &[k, m] in &self.sizes {
            if k == 0 || m == 0 {
                return Err(format!("invalid size [{}, {}]: K and M must be >= 1", k, m));
            }
        }
        if self.n_trials == 0 {
            return Err("n_trials must be at least 1".into());
        }
        self.solver.validate()
    }
}

/// Two-source, two-dataset separation benchmark with amplitude-modulated
/// sources; the modulation depth grid controls within-set nonstationarity.
#[derive(Debug, Clone, Deserialize)]
pub struct NonstationaryConfig {
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub master_seed: Option<u64>,
    /// Extra permuted joint-solver starts per trial; `None` uses the
    /// separator's own default.
    #[serde(default)]
    pub multistart: Option<usize>,
    #[serde(default)]
    pub solver: SolverParams,
}

impl NonstationaryConfig {
    fn validate(&self) -> Result<(), String> {
        if self.alpha_grid.is_empty() {
            return Err("alpha_grid must hold at least one value".into());
        }
        for &a in &self.alpha_grid {
            if !(0.0..=1.0).contains(&a) {
                return Err(format!("modulation depth {} is outside [0, 1]", a));
            }
        }
        if self.t == 0 {
            return Err("t must be at least 1".into());
        }
        if self.n_trials == 0 {
            return Err("n_trials must be at least 1".into());
        }
        self.solver.validate()
    }
}

/// Three-source, three-dataset separation benchmark with filtered stationary
/// sources, swept over the observation length.
#[derive(Debug, Clone, Deserialize)]
pub struct StationaryConfig {
    #[serde(default = "default_t_grid")]
    pub t_grid: Vec<usize>,
    #[serde(default = "default_filter_len")]
    pub filter_len: usize,
    /// Energy of the cross filters relative to the direct ones.
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_trials")]
    pub n_trials: usize,
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub multistart: Option<usize>,
    #[serde(default)]
    pub solver: SolverParams,
}

impl StationaryConfig {
    fn validate(&self) -> Result<(), String> {
        if self.t_grid.is_empty() {
            return Err("t_grid must hold at least one value".into());
        }
        if self.t_grid.iter().any(|&t| t == 0) {
            return Err("every t in t_grid must be at least 1".into());
        }
        if self.filter_len == 0 {
            return Err("filter_len must be at least 1".into());
        }
        if !(self.eta >= 0.0) {
            return Err(format!("eta must be nonnegative, got {}", self.eta));
        }
        if self.n_trials == 0 {
            return Err("n_trials must be at least 1".into());
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Newton,
    Relaxation,
}

impl Default for Algorithm {
    fn default() -> Self {
        Algorithm::Newton
    }
}

/// One-shot solve of a serialized problem instance.
#[derive(Debug, Clone, Deserialize)]
pub struct SolveConfig {
    /// Path to the problem-instance JSON file.
    pub instance: PathBuf,
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default)]
    pub master_seed: Option<u64>,
    #[serde(default)]
    pub solver: SolverParams,
}

impl SolveConfig {
    fn validate(&self) -> Result<(), String> {
        self.solver.validate()
    }
}

/// Covariance family for the bound table.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum FamilySpec {
    /// The amplitude-modulated two-by-two family at a given depth.
    Modulated {
        alpha: f64,
        #[serde(default = "default_t")]
        t: usize,
    },
    /// The filtered three-by-three family; filters are drawn from the seed.
    Filtered {
        #[serde(default = "default_t")]
        t: usize,
        #[serde(default = "default_filter_len")]
        filter_len: usize,
        #[serde(default = "default_eta")]
        eta: f64,
    },
    /// Covariance blocks given inline: `blocks[(k*M + m1)*M + m2]` is a
    /// `T x T` matrix as a list of rows.
    Explicit {
        k: usize,
        m: usize,
        t: usize,
        blocks: Vec<Vec<Vec<f64>>>,
    },
}

/// Bound-table computation for a covariance family.
#[derive(Debug, Clone, Deserialize)]
pub struct CrlbConfig {
    pub family: FamilySpec,
    #[serde(default)]
    pub master_seed: Option<u64>,
}

impl CrlbConfig {
    fn validate(&self) -> Result<(), String> {
        match &self.family {
            FamilySpec::Modulated { alpha, t } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(format!("modulation depth {} is outside [0, 1]", alpha));
                }
                if *t == 0 {
                    return Err("t must be at least 1".into());
                }
            }
            FamilySpec::Filtered { t, filter_len, eta } => {
                if *t == 0 || *filter_len == 0 {
                    return Err("t and filter_len must be at least 1".into());
                }
                if !(*eta >= 0.0) {
                    return Err(format!("eta must be nonnegative, got {}", eta));
                }
            }
            FamilySpec::Explicit { k, m, t, blocks } => {
                if *k == 0 || *m == 0 || *t == 0 {
                    return Err("k, m and t must be at least 1".into());
                }
                if blocks.len() != k * m * m {
                    return Err(format!(
                        "expected {} covariance blocks, got {}",
                        k * m * m,
                        blocks.len()
                    ));
                }
            }
        }
        Ok(())
    }
}
