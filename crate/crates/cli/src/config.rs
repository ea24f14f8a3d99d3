//! Layered settings: built-in defaults, then a TOML file, then flags.
//!
//! The file uses the flag names with underscores:
//!
//! ```toml
//! n = 64
//! p = 512
//! theta = 0.3
//! kappa = 8.0
//! mu = 0.05            # omit for min(10 n^-1.25, 0.05)
//! eta = 0.1
//! max_iters = 200
//! restarts = 13        # omit for ceil(3 ln n)
//! loss = "logcosh"     # or "l4"
//! precondition = true
//! backtracking = true
//! seed = 0
//! trials = 10
//! grid = "p=128,256,512;theta=0.1,0.2,0.3"
//! time_budget_secs = 60.0
//! record_runtime = false
//! out = "results.csv"
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Deserialize;

use msbd::surrogate_loss::LossKind;

#[derive(Debug, Default, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub n: Option<usize>,
    pub p: Option<usize>,
    pub theta: Option<f64>,
    pub kappa: Option<f64>,
    pub mu: Option<f64>,
    pub eta: Option<f64>,
    pub max_iters: Option<usize>,
    pub restarts: Option<usize>,
    pub loss: Option<String>,
    pub precondition: Option<bool>,
    pub backtracking: Option<bool>,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub grid: Option<String>,
    pub time_budget_secs: Option<f64>,
    pub record_runtime: Option<bool>,
    pub out: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Default, Args, Clone)]
pub struct CommonArgs {
    /// Signal length.
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of observations.
    #[arg(long)]
    pub p: Option<usize>,
    /// Bernoulli-Gaussian activation probability.
    #[arg(long)]
    pub theta: Option<f64>,
    /// Target condition number of the synthesized filter.
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Surrogate smoothing parameter.
    #[arg(long)]
    pub mu: Option<f64>,
    /// Initial step size.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub restarts: Option<usize>,
    /// Loss: logcosh or l4.
    #[arg(long)]
    pub loss: Option<String>,
    /// Disable the circulant preconditioner.
    #[arg(long)]
    pub no_precondition: bool,
    /// Use fixed steps without backtracking.
    #[arg(long)]
    pub no_backtracking: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo trials per grid cell.
    #[arg(long)]
    pub trials: Option<usize>,
    /// Output file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// TOML settings file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Grid axes, e.g. `p=64,128;theta=0.1,0.2`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Per-trial wall-clock budget in seconds (0 disables).
    #[arg(long)]
    pub time_budget: Option<f64>,
    /// Fill the mean_runtime_ms column (makes output timing-dependent).
    #[arg(long)]
    pub record_runtime: bool,
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub n: usize,
    pub p: usize,
    pub theta: f64,
    pub kappa: f64,
    pub mu: Option<f64>,
    pub eta: f64,
    pub max_iters: usize,
    pub restarts: Option<usize>,
    pub loss: LossKind,
    pub precondition: bool,
    pub backtracking: bool,
    pub seed: u64,
    pub trials: usize,
    pub grid: Option<String>,
    pub time_budget_secs: Option<f64>,
    pub record_runtime: bool,
    pub out: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            n: 64,
            p: 512,
            theta: 0.3,
            kappa: 8.0,
            mu: None,
            eta: 0.1,
            max_iters: 200,
            restarts: None,
            loss: LossKind::LogCosh,
            precondition: true,
            backtracking: true,
            seed: 0,
            trials: 10,
            grid: None,
            time_budget_secs: Some(60.0),
            record_runtime: false,
            out: None,
        }
    }
}

fn parse_loss(s: &str) -> Result<LossKind> {
    s.parse::<LossKind>()
        .map_err(|_| anyhow::anyhow!("unknown loss {s:?}; expected logcosh or l4"))
}

impl Settings {
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        let mut s = Settings::default();
        s.apply_file(&file)?;
        s.apply_flags(args)?;
        Ok(s)
    }

    fn apply_file(&mut self, f: &FileConfig) -> Result<()> {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = f.$field.clone() { self.$field = v; })*
            };
        }
        take!(n, p, theta, kappa, eta, max_iters, precondition, backtracking, seed, trials, record_runtime);
        if f.mu.is_some() {
            self.mu = f.mu;
        }
        if f.restarts.is_some() {
            self.restarts = f.restarts;
        }
        if f.grid.is_some() {
            self.grid = f.grid.clone();
        }
        if f.out.is_some() {
            self.out = f.out.clone();
        }
        if let Some(t) = f.time_budget_secs {
            self.time_budget_secs = (t > 0.0).then_some(t);
        }
        if let Some(l) = &f.loss {
            self.loss = parse_loss(l)?;
        }
        Ok(())
    }

    fn apply_flags(&mut self, a: &CommonArgs) -> Result<()> {
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = a.$field.clone() { self.$field = v; })*
            };
        }
        take!(n, p, theta, kappa, eta, max_iters, seed, trials);
        if a.mu.is_some() {
            self.mu = a.mu;
        }
        if a.restarts.is_some() {
            self.restarts = a.restarts;
        }
        if a.grid.is_some() {
            self.grid = a.grid.clone();
        }
        if a.out.is_some() {
            self.out = a.out.clone();
        }
        if let Some(t) = a.time_budget {
            self.time_budget_secs = (t > 0.0).then_some(t);
        }
        if let Some(l) = &a.loss {
            self.loss = parse_loss(l)?;
        }
        if a.no_precondition {
            self.precondition = false;
        }
        if a.no_backtracking {
            self.backtracking = false;
        }
        if a.record_runtime {
            self.record_runtime = true;
        }
        Ok(())
    }
}
