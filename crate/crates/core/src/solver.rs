//! Manifold gradient descent on the sphere, random restarts, and input
//! recovery.
//!
//! One iteration is `h ← (h − η ∂f(h)) / ‖h − η ∂f(h)‖` where
//! `∂f = (I − h hᵀ) ∇f` is the Riemannian gradient. With backtracking the
//! step starts at the configured `η` every iteration and shrinks by `β`
//! until the Armijo condition `f(h⁺) ≤ f(h) − c η ‖∂f‖²` holds. The
//! estimate of the inverse filter is `ĝ_inv = R h` at the last iterate.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::circulant::{convolve_with_shape, l2_norm, Filter};
use crate::error::{MsbdError, Result};
use crate::metrics::normalized_error;
use crate::signal_model::{stream_rng, ObservationSet, Stream};
use crate::sphere::{default_xi0, retract_step, riemannian_gradient, sample_sphere, SphereVector};
use crate::surrogate_loss::{build_preconditioner, LossConfig, LossKind, Objective, Preconditioner};

/// Smallest step before backtracking gives up.
pub const MIN_STEP: f64 = 1e-12;

/// How the base step size of each iteration is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    /// Use `SolverConfig::eta`.
    Fixed,
    /// `η = c μ ξ₀ θ / (n² √ln(np))` with `ξ₀ = 1/(4 ln n)`. Much smaller
    /// than the practical default; provided for experimentation only.
    Theoretical { c: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub eta: f64,
    pub step_rule: StepRule,
    pub max_iters: usize,
    pub mu: f64,
    /// Activation probability assumed when building the preconditioner.
    pub theta: f64,
    pub restarts: usize,
    pub backtracking: bool,
    /// Backtracking shrink factor `β ∈ (0, 1)`.
    pub shrink: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Stop once `‖∂f‖ ≤ tol`.
    pub tol: f64,
    pub loss_kind: LossKind,
    pub use_preconditioner: bool,
    pub seed: u64,
    /// Wall-clock budget for one `run_with_restarts` call.
    pub time_budget: Option<Duration>,
    /// Keep every iterate in [`RecoveryResult::iterates`].
    pub keep_iterates: bool,
}

impl SolverConfig {
    /// Defaults for signals of length `n`: `η = 0.1`, 200 iterations,
    /// `μ = min(10 n^{-5/4}, 0.05)`, `⌈3 ln n⌉` restarts, backtracking on.
    pub fn for_size(n: usize) -> Self {
        SolverConfig {
            eta: 0.1,
            step_rule: StepRule::Fixed,
            max_iters: 200,
            mu: LossConfig::default_mu(n),
            theta: 0.3,
            restarts: default_restarts(n),
            backtracking: true,
            shrink: 0.5,
            armijo: 1e-4,
            tol: 1e-8,
            loss_kind: LossKind::LogCosh,
            use_preconditioner: true,
            seed: 0,
            time_budget: None,
            keep_iterates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MsbdError::Parameter(m));
        if !(self.eta > 0.0) {
            return bad(format!("eta must be > 0, got {}", self.eta));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad(format!("shrink factor must lie in (0, 1), got {}", self.shrink));
        }
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1".into());
        }
        if self.restarts < 1 {
            return bad("restarts must be at least 1".into());
        }
        if !(self.mu > 0.0) {
            return bad(format!("mu must be > 0, got {}", self.mu));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad(format!("theta must lie in (0, 1], got {}", self.theta));
        }
        if !(self.tol >= 0.0) {
            return bad(format!("tol must be >= 0, got {}", self.tol));
        }
        if let StepRule::Theoretical { c } = self.step_rule {
            if !(c > 0.0) {
                return bad(format!("step constant must be > 0, got {c}"));
            }
        }
        Ok(())
    }

    fn base_step(&self, n: usize, p: usize) -> f64 {
        match self.step_rule {
            StepRule::Fixed => self.eta,
            StepRule::Theoretical { c } => {
                let np = (n * p) as f64;
                c * self.mu * default_xi0(n) * self.theta / ((n * n) as f64 * np.ln().max(1.0).sqrt())
            }
        }
    }
}

/// `⌈3 ln n⌉`, at least 1.
pub fn default_restarts(n: usize) -> usize {
    ((3.0 * (n as f64).ln()).ceil() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub loss: f64,
    /// Normalized reconstruction error, when ground truth was supplied.
    pub error: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RecoveryResult {
    /// `R h^(T)`.
    pub g_inv_hat: Vec<f64>,
    pub h_final: SphereVector,
    /// Initial point followed by one entry per accepted step.
    pub trajectory: Vec<TrajectoryPoint>,
    pub iterations_used: usize,
    pub restart_index: usize,
    pub converged: bool,
    pub final_loss: f64,
    pub final_grad_norm: f64,
    /// `h^(0), h^(1), …` when `keep_iterates` is set, otherwise empty.
    pub iterates: Vec<SphereVector>,
}

/// A prepared problem: observation spectra, preconditioner and settings.
#[derive(Debug, Clone)]
pub struct Solver {
    objective: Objective,
    cfg: SolverConfig,
    truth: Option<Filter>,
}

impl Solver {
    /// Builds `R` from the observations when `cfg.use_preconditioner`.
    pub fn new(y: &ObservationSet, cfg: &SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let r = if cfg.use_preconditioner {
            Some(build_preconditioner(y, cfg.theta)?)
        } else {
            None
        };
        Self::with_operator(y, cfg, r.as_ref())
    }

    /// Uses an explicit operator in place of `R` (`None` for identity).
    pub fn with_operator(y: &ObservationSet, cfg: &SolverConfig, r: Option<&Preconditioner>) -> Result<Self> {
        cfg.validate()?;
        Ok(Solver {
            objective: Objective::new(y, r, cfg.mu)?,
            cfg: cfg.clone(),
            truth: None,
        })
    }

    /// Enables the error column of the trajectory.
    pub fn with_ground_truth(mut self, g: Filter) -> Self {
        self.truth = Some(g);
        self
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn preconditioner(&self) -> &Preconditioner {
        self.objective.operator()
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    fn error_at(&self, h: &SphereVector) -> Result<Option<f64>> {
        match &self.truth {
            Some(g) => normalized_error(h, Some(self.objective.operator()), g).map(Some),
            None => Ok(None),
        }
    }

    /// Riemannian gradient descent from `h0`.
    pub fn run(&self, h0: &SphereVector) -> Result<RecoveryResult> {
        self.run_until(h0, None)
    }

    fn run_until(&self, h0: &SphereVector, deadline: Option<(Instant, Duration)>) -> Result<RecoveryResult> {
        let n = self.objective.n();
        if h0.len() != n {
            return Err(MsbdError::dim(n, h0.len()));
        }
        let cfg = &self.cfg;
        let kind = cfg.loss_kind;
        let base_step = cfg.base_step(n, self.objective.p());

        let mut h = h0.clone();
        let (mut f, g) = self.objective.value_and_gradient_of(kind, h.as_slice())?;
        let mut rg = riemannian_gradient(&h, &g);
        let mut rg_norm = l2_norm(&rg);
        let mut trajectory = Vec::with_capacity(cfg.max_iters + 1);
        trajectory.push(TrajectoryPoint {
            loss: f,
            error: self.error_at(&h)?,
        });

        let mut iterates = Vec::new();
        if cfg.keep_iterates {
            iterates.push(h.clone());
        }
        let mut iterations = 0;
        while iterations < cfg.max_iters && rg_norm > cfg.tol {
            if let Some((start, budget)) = deadline {
                if start.elapsed() > budget {
                    return Err(MsbdError::Timeout(budget));
                }
            }
            let mut eta = base_step;
            // Candidates are screened on the loss alone; the gradient is only
            // formed at the accepted point.
            let (h_next, f_next, g_next) = loop {
                let cand = retract_step(&h, &rg, eta)?;
                if !cfg.backtracking {
                    let (fc, gc) = self.objective.value_and_gradient_of(kind, cand.as_slice())?;
                    break (cand, fc, gc);
                }
                let fc = self.objective.value_of(kind, cand.as_slice())?;
                let slack = 8.0 * f64::EPSILON * f.abs().max(fc.abs());
                if fc <= f - cfg.armijo * eta * rg_norm * rg_norm + slack {
                    let (fc, gc) = self.objective.value_and_gradient_of(kind, cand.as_slice())?;
                    break (cand, fc, gc);
                }
                eta *= cfg.shrink;
                if eta < MIN_STEP {
                    return Err(MsbdError::DegenerateStep(format!(
                        "backtracking failed to decrease the loss (‖∂f‖ = {rg_norm:e})"
                    )));
                }
            };
            h = h_next;
            f = f_next;
            rg = riemannian_gradient(&h, &g_next);
            rg_norm = l2_norm(&rg);
            iterations += 1;
            if cfg.keep_iterates {
                iterates.push(h.clone());
            }
            trajectory.push(TrajectoryPoint {
                loss: f,
                error: self.error_at(&h)?,
            });
        }

        Ok(RecoveryResult {
            g_inv_hat: self.objective.operator().apply(h.as_slice())?,
            h_final: h,
            trajectory,
            iterations_used: iterations,
            restart_index: 0,
            converged: rg_norm <= cfg.tol,
            final_loss: f,
            final_grad_norm: rg_norm,
            iterates,
        })
    }

    /// Independent uniform initial points drawn from the seed's init stream.
    pub fn restart_inits(&self) -> Result<Vec<SphereVector>> {
        let mut rng = stream_rng(self.cfg.seed, Stream::Init);
        (0..self.cfg.restarts)
            .map(|_| sample_sphere(&mut rng, self.objective.n()))
            .collect()
    }

    /// Runs from every initial point and keeps the lowest final loss (the
    /// first one on ties).
    pub fn run_from(&self, inits: &[SphereVector]) -> Result<RecoveryResult> {
        if inits.is_empty() {
            return Err(MsbdError::Parameter("need at least one initial point".into()));
        }
        let deadline = self.cfg.time_budget.map(|b| (Instant::now(), b));
        let results: Vec<Result<RecoveryResult>> =
            inits.par_iter().map(|h0| self.run_until(h0, deadline)).collect();
        let mut best: Option<RecoveryResult> = None;
        for (idx, res) in results.into_iter().enumerate() {
            let mut res = res?;
            res.restart_index = idx;
            if best.as_ref().is_none_or(|b| res.final_loss < b.final_loss) {
                best = Some(res);
            }
        }
        Ok(best.expect("at least one restart"))
    }

    pub fn run_with_restarts(&self) -> Result<RecoveryResult> {
        self.run_from(&self.restart_inits()?)
    }
}

/// Single descent run from `h0`.
pub fn run_mgd(y: &ObservationSet, h0: &SphereVector, cfg: &SolverConfig) -> Result<RecoveryResult> {
    Solver::new(y, cfg)?.run(h0)
}

/// `cfg.restarts` descents from uniform random starts; best final loss wins.
pub fn run_with_restarts(y: &ObservationSet, cfg: &SolverConfig) -> Result<RecoveryResult> {
    Solver::new(y, cfg)?.run_with_restarts()
}

/// `x̂_i = C(ĝ_inv) y_i` for every observation.
pub fn recover_inputs(g_inv_hat: &[f64], y: &ObservationSet) -> Result<Vec<Vec<f64>>> {
    if g_inv_hat.len() != y.n() {
        return Err(MsbdError::dim(y.n(), g_inv_hat.len()));
    }
    y.columns()
        .iter()
        .map(|col| convolve_with_shape(y.shape(), g_inv_hat, col))
        .collect()
}
