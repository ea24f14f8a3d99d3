//! Monte Carlo success-rate grids over `(n, p, θ, κ)` and their CSV form.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{MsbdError, Result};
use crate::metrics::success_indicator;
use crate::numfmt::g17;
use crate::signal_model::{generate_observations, sample_bernoulli_gaussian, synthesize_filter};
use crate::solver::{default_restarts, Solver, SolverConfig};
use crate::surrogate_loss::{LossConfig, LossKind};

pub const CSV_HEADER: &str = "n,p,theta,kappa,loss,trials,successes,rate,mean_iters,mean_runtime_ms";

/// Solver settings shared by every cell; size-dependent defaults are
/// resolved per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverTemplate {
    pub eta: f64,
    pub max_iters: usize,
    /// `None` uses `min(10 n^{-5/4}, 0.05)`.
    pub mu: Option<f64>,
    /// `None` uses `⌈3 ln n⌉`.
    pub restarts: Option<usize>,
    pub backtracking: bool,
    pub use_preconditioner: bool,
    pub tol: f64,
}

impl Default for SolverTemplate {
    fn default() -> Self {
        let base = SolverConfig::for_size(2);
        SolverTemplate {
            eta: base.eta,
            max_iters: base.max_iters,
            mu: None,
            restarts: None,
            backtracking: base.backtracking,
            use_preconditioner: base.use_preconditioner,
            tol: base.tol,
        }
    }
}

impl SolverTemplate {
    pub fn config(&self, n: usize, theta: f64, loss: LossKind, seed: u64) -> SolverConfig {
        SolverConfig {
            eta: self.eta,
            max_iters: self.max_iters,
            mu: self.mu.unwrap_or_else(|| LossConfig::default_mu(n)),
            theta,
            restarts: self.restarts.unwrap_or_else(|| default_restarts(n)),
            backtracking: self.backtracking,
            tol: self.tol,
            loss_kind: loss,
            use_preconditioner: self.use_preconditioner,
            seed,
            ..SolverConfig::for_size(n)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    N,
    P,
    Theta,
    Kappa,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::N => "n",
            Axis::P => "p",
            Axis::Theta => "theta",
            Axis::Kappa => "kappa",
        }
    }
}

/// Cartesian grid of problem sizes. At most two of the four axes may hold
/// more than one value; `losses` is a separate comparison axis and every
/// loss sees the same problem instances.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub n: Vec<usize>,
    pub p: Vec<usize>,
    pub theta: Vec<f64>,
    pub kappa: Vec<f64>,
    pub losses: Vec<LossKind>,
    pub trials: usize,
    pub base_seed: u64,
    pub solver: SolverTemplate,
    /// Wall-clock budget per trial; exceeding it counts as a failure.
    pub trial_budget: Option<Duration>,
    /// Fill `mean_runtime_ms`. Off by default so output is reproducible.
    pub record_runtime: bool,
}

impl ExperimentGrid {
    pub fn single(n: usize, p: usize, theta: f64, kappa: f64) -> Self {
        ExperimentGrid {
            n: vec![n],
            p: vec![p],
            theta: vec![theta],
            kappa: vec![kappa],
            losses: vec![LossKind::LogCosh],
            trials: 10,
            base_seed: 0,
            solver: SolverTemplate::default(),
            trial_budget: Some(Duration::from_secs(60)),
            record_runtime: false,
        }
    }

    pub fn varying_axes(&self) -> Vec<Axis> {
        let mut out = Vec::new();
        for (axis, len) in [
            (Axis::N, self.n.len()),
            (Axis::P, self.p.len()),
            (Axis::Theta, self.theta.len()),
            (Axis::Kappa, self.kappa.len()),
        ] {
            if len > 1 {
                out.push(axis);
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MsbdError::Parameter(m));
        if self.n.is_empty() || self.p.is_empty() || self.theta.is_empty() || self.kappa.is_empty() {
            return bad("every axis needs at least one value".into());
        }
        if self.losses.is_empty() {
            return bad("need at least one loss".into());
        }
        let varying = self.varying_axes();
        if varying.len() > 2 {
            let names: Vec<&str> = varying.iter().map(|a| a.name()).collect();
            return bad(format!("at most two axes may vary, got {}", names.join(",")));
        }
        if self.trials < 1 {
            return bad("trials must be at least 1".into());
        }
        if let Some(n) = self.n.iter().find(|n| **n < 2) {
            return bad(format!("n must be >= 2, got {n}"));
        }
        if let Some(p) = self.p.iter().find(|p| **p < 1) {
            return bad(format!("p must be >= 1, got {p}"));
        }
        if let Some(t) = self.theta.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return bad(format!("theta must lie in (0, 1], got {t}"));
        }
        if let Some(k) = self.kappa.iter().find(|k| !(**k >= 1.0)) {
            return bad(format!("kappa must be >= 1, got {k}"));
        }
        Ok(())
    }

    /// Problem cells in canonical order (sorted by `n, p, θ, κ`).
    pub fn data_cells(&self) -> Vec<DataCell> {
        let mut n = self.n.clone();
        let mut p = self.p.clone();
        let mut theta = self.theta.clone();
        let mut kappa = self.kappa.clone();
        n.sort_unstable();
        n.dedup();
        p.sort_unstable();
        p.dedup();
        theta.sort_by(f64::total_cmp);
        theta.dedup();
        kappa.sort_by(f64::total_cmp);
        kappa.dedup();
        let mut out = Vec::new();
        for &n in &n {
            for &p in &p {
                for &theta in &theta {
                    for &kappa in &kappa {
                        out.push(DataCell { n, p, theta, kappa });
                    }
                }
            }
        }
        out
    }

    /// Seed of trial `t` in data cell `c`: `base_seed + c · trials + t`.
    pub fn trial_seed(&self, cell_index: usize, trial: usize) -> u64 {
        self.base_seed
            .wrapping_add((cell_index as u64).wrapping_mul(self.trials as u64))
            .wrapping_add(trial as u64)
    }

    fn losses_sorted(&self) -> Vec<LossKind> {
        let mut l = self.losses.clone();
        l.sort();
        l.dedup();
        l
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataCell {
    pub n: usize,
    pub p: usize,
    pub theta: f64,
    pub kappa: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub seed: u64,
    pub success: bool,
    pub score: Option<f64>,
    pub iterations: Option<usize>,
    pub runtime: Duration,
    /// Error tag when the trial failed before scoring.
    pub error: Option<&'static str>,
}

/// One solve-and-score trial.
pub fn run_trial(cell: &DataCell, loss: LossKind, template: &SolverTemplate, seed: u64, budget: Option<Duration>) -> TrialOutcome {
    let start = Instant::now();
    let result = (|| -> Result<(bool, f64, usize)> {
        let g = synthesize_filter(cell.n, cell.kappa, seed)?;
        let x = sample_bernoulli_gaussian(cell.n, cell.p, cell.theta, seed)?;
        let y = generate_observations(&g, &x, 0.0)?;
        let mut cfg = template.config(cell.n, cell.theta, loss, seed);
        cfg.time_budget = budget;
        let res = Solver::new(&y, &cfg)?.run_with_restarts()?;
        let (ok, score) = success_indicator(&res.g_inv_hat, &g)?;
        Ok((ok, score, res.iterations_used))
    })();
    let runtime = start.elapsed();
    match result {
        Ok((success, score, iters)) => TrialOutcome {
            seed,
            success,
            score: Some(score),
            iterations: Some(iters),
            runtime,
            error: None,
        },
        Err(e) => TrialOutcome {
            seed,
            success: false,
            score: None,
            iterations: None,
            runtime,
            error: Some(e.tag()),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessRateRow {
    pub n: usize,
    pub p: usize,
    pub theta: f64,
    pub kappa: f64,
    pub loss: LossKind,
    pub trials: usize,
    pub successes: usize,
    pub rate: f64,
    /// Mean over trials that finished; `None` if none did.
    pub mean_iters: Option<f64>,
    pub mean_runtime_ms: Option<f64>,
    /// Failure counts by error tag. Not part of the CSV.
    pub errors: BTreeMap<String, usize>,
}

impl SuccessRateRow {
    fn sort_key(&self) -> (usize, usize, f64, f64, LossKind) {
        (self.n, self.p, self.theta, self.kappa, self.loss)
    }

    fn cmp_key(&self, other: &Self) -> std::cmp::Ordering {
        let (a, b) = (self.sort_key(), other.sort_key());
        a.0.cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.total_cmp(&b.2))
            .then(a.3.total_cmp(&b.3))
            .then(a.4.cmp(&b.4))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuccessRateTable {
    pub rows: Vec<SuccessRateRow>,
}

impl SuccessRateTable {
    pub fn sort(&mut self) {
        self.rows.sort_by(SuccessRateRow::cmp_key);
    }

    pub fn find(&self, n: usize, p: usize, theta: f64, kappa: f64, loss: LossKind) -> Option<&SuccessRateRow> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.p == p && r.theta == theta && r.kappa == kappa && r.loss == loss)
    }

    /// Canonical CSV text; rows sorted, floats at 17 significant digits.
    pub fn to_csv_string(&self) -> String {
        let mut rows: Vec<&SuccessRateRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.cmp_key(b));
        let opt = |v: Option<f64>| v.map(g17).unwrap_or_default();
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.n,
                r.p,
                g17(r.theta),
                g17(r.kappa),
                r.loss.as_str(),
                r.trials,
                r.successes,
                g17(r.rate),
                opt(r.mean_iters),
                opt(r.mean_runtime_ms),
            );
        }
        out
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == CSV_HEADER => {}
            other => return Err(MsbdError::Parse(format!("unexpected header {other:?}"))),
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(MsbdError::Parse(format!("row {}: expected 10 fields, got {}", i + 1, f.len())));
            }
            let perr = |what: &str, v: &str| MsbdError::Parse(format!("row {}: bad {what} {v:?}", i + 1));
            let int = |k: usize, what: &str| f[k].parse::<usize>().map_err(|_| perr(what, f[k]));
            let real = |k: usize, what: &str| f[k].parse::<f64>().map_err(|_| perr(what, f[k]));
            let opt_real = |k: usize, what: &str| {
                if f[k].is_empty() {
                    Ok(None)
                } else {
                    real(k, what).map(Some)
                }
            };
            rows.push(SuccessRateRow {
                n: int(0, "n")?,
                p: int(1, "p")?,
                theta: real(2, "theta")?,
                kappa: real(3, "kappa")?,
                loss: f[4].parse().map_err(|_| perr("loss", f[4]))?,
                trials: int(5, "trials")?,
                successes: int(6, "successes")?,
                rate: real(7, "rate")?,
                mean_iters: opt_real(8, "mean_iters")?,
                mean_runtime_ms: opt_real(9, "mean_runtime_ms")?,
                errors: BTreeMap::new(),
            });
        }
        Ok(SuccessRateTable { rows })
    }
}

/// Runs every `(cell, loss, trial)` in parallel and aggregates per cell.
/// Trial failures are recorded, never propagated.
pub fn run_phase_grid(grid: &ExperimentGrid) -> Result<SuccessRateTable> {
    grid.validate()?;
    let cells = grid.data_cells();
    let losses = grid.losses_sorted();

    let mut jobs = Vec::new();
    let mut seeds = HashSet::new();
    for (ci, cell) in cells.iter().enumerate() {
        for t in 0..grid.trials {
            let seed = grid.trial_seed(ci, t);
            if !seeds.insert(seed) {
                return Err(MsbdError::Parameter(format!("trial seed {seed} collides; grid too large")));
            }
            for &loss in &losses {
                jobs.push((*cell, loss, seed));
            }
        }
    }

    let outcomes: Vec<TrialOutcome> = jobs
        .par_iter()
        .map(|(cell, loss, seed)| run_trial(cell, *loss, &grid.solver, *seed, grid.trial_budget))
        .collect();

    let mut table = SuccessRateTable::default();
    for (ci, cell) in cells.iter().enumerate() {
        for (li, &loss) in losses.iter().enumerate() {
            let mine: Vec<&TrialOutcome> = (0..grid.trials)
                .map(|t| &outcomes[(ci * grid.trials + t) * losses.len() + li])
                .collect();
            table.rows.push(aggregate(cell, loss, &mine, grid.record_runtime));
        }
    }
    table.sort();
    Ok(table)
}

fn aggregate(cell: &DataCell, loss: LossKind, outcomes: &[&TrialOutcome], record_runtime: bool) -> SuccessRateRow {
    let trials = outcomes.len();
    let successes = outcomes.iter().filter(|o| o.success).count();
    let iters: Vec<f64> = outcomes.iter().filter_map(|o| o.iterations.map(|i| i as f64)).collect();
    let mut errors = BTreeMap::new();
    for tag in outcomes.iter().filter_map(|o| o.error) {
        *errors.entry(tag.to_string()).or_insert(0) += 1;
    }
    SuccessRateRow {
        n: cell.n,
        p: cell.p,
        theta: cell.theta,
        kappa: cell.kappa,
        loss,
        trials,
        successes,
        rate: successes as f64 / trials as f64,
        mean_iters: (!iters.is_empty()).then(|| iters.iter().sum::<f64>() / iters.len() as f64),
        mean_runtime_ms: record_runtime
            .then(|| outcomes.iter().map(|o| o.runtime.as_secs_f64() * 1e3).sum::<f64>() / trials as f64),
        errors,
    }
}

pub fn emit_results(table: &SuccessRateTable, path: &Path) -> Result<()> {
    std::fs::write(path, table.to_csv_string()).map_err(|e| MsbdError::io(path, e))
}

pub fn read_results(path: &Path) -> Result<SuccessRateTable> {
    let text = std::fs::read_to_string(path).map_err(|e| MsbdError::io(path, e))?;
    SuccessRateTable::from_csv_str(&text)
}

/// Applies an axis specification such as `p=64,128,256;theta=0.1,0.2` to
/// the grid. Axes not mentioned keep their values. `loss=logcosh,l4` is
/// also accepted.
pub fn apply_axis_spec(grid: &mut ExperimentGrid, spec: &str) -> Result<()> {
    for part in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| MsbdError::Parse(format!("axis entry {part:?} lacks '='")))?;
        let items: Vec<&str> = values.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        if items.is_empty() {
            return Err(MsbdError::Parse(format!("axis {key:?} has no values")));
        }
        fn list<T: std::str::FromStr>(key: &str, items: &[&str]) -> Result<Vec<T>> {
            items
                .iter()
                .map(|s| s.parse().map_err(|_| MsbdError::Parse(format!("bad value {s:?} for axis {key}"))))
                .collect()
        }
        match key.trim() {
            "n" => grid.n = list(key, &items)?,
            "p" => grid.p = list(key, &items)?,
            "theta" => grid.theta = list(key, &items)?,
            "kappa" => grid.kappa = list(key, &items)?,
            "loss" => grid.losses = list(key, &items)?,
            other => return Err(MsbdError::Parse(format!("unknown axis {other:?}"))),
        }
    }
    Ok(())
}
