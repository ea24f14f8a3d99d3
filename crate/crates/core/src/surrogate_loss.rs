//! The log-cosh sparsity surrogate, the empirical losses built from it, the
//! circulant preconditioner, and the ℓ4 baseline.
//!
//! With observations `y_i` and a symmetric circulant operator `R` the loss
//! is `f(h) = (1/p) Σ_i Σ_k ψ_μ([C(y_i) R h]_k)` where
//! `ψ_μ(z) = μ log cosh(z/μ)`. Every product with `C(y_i)` or `R` is a
//! pointwise product in the Fourier domain, so one evaluation costs one
//! inverse FFT per observation and a gradient one more forward FFT.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::circulant::{dense_circulant, dense_circulant_2d, FourierPlan, Shape, DEFAULT_INVERTIBILITY_EPS};
use crate::error::{MsbdError, Result};
use crate::signal_model::ObservationSet;

const UNIT_NORM_TOL: f64 = 1e-9;

/// Observations per parallel work unit. Fixed so that the summation order,
/// and therefore every bit of the result, does not depend on thread count.
const CHUNK: usize = 64;
/// Below this many `n·p` entries the per-observation loop stays serial.
const PARALLEL_WORK: usize = 1 << 16;

/// `(ψ_μ(z), ψ_μ'(z), ψ_μ''(z))`.
pub fn surrogate_eval(z: f64, mu: f64) -> Result<(f64, f64, f64)> {
    if !(mu > 0.0) {
        return Err(MsbdError::Parameter(format!("mu must be > 0, got {mu}")));
    }
    let t = z / mu;
    let th = t.tanh();
    Ok((mu * log_cosh(t), th, (1.0 - th * th) / mu))
}

/// `log cosh t` without overflow: `|t| + ln((1 + e^{-2|t|}) / 2)`.
#[inline]
pub fn log_cosh(t: f64) -> f64 {
    let a = t.abs();
    // Past 20 the correction term is below half an ulp of `a`.
    if a > 20.0 {
        return a - std::f64::consts::LN_2;
    }
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

/// Which objective the solver minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    /// `(1/p) Σ ψ_μ(C(y_i) R h)`.
    LogCosh,
    /// `−(1/4p) Σ ‖C(y_i) R h‖₄⁴`.
    L4,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::LogCosh => "logcosh",
            LossKind::L4 => "l4",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = MsbdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logcosh" => Ok(LossKind::LogCosh),
            "l4" => Ok(LossKind::L4),
            other => Err(MsbdError::Parameter(format!("unknown loss {other:?} (expected logcosh or l4)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub mu: f64,
    pub theta: f64,
}

impl LossConfig {
    pub fn new(mu: f64, theta: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(MsbdError::Parameter(format!("mu must be > 0, got {mu}")));
        }
        if !(theta > 0.0 && theta <= 1.0) {
            return Err(MsbdError::Parameter(format!("theta must lie in (0, 1], got {theta}")));
        }
        Ok(LossConfig { mu, theta })
    }

    /// `μ = min(10 n^{-5/4}, 0.05)`.
    pub fn default_mu(n: usize) -> f64 {
        (10.0 * (n as f64).powf(-1.25)).min(0.05)
    }

    pub fn for_size(n: usize, theta: f64) -> Result<Self> {
        Self::new(Self::default_mu(n), theta)
    }
}

/// Symmetric positive-definite circulant operator stored by its real
/// Fourier-domain eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct Preconditioner {
    shape: Shape,
    fourier_eigs: Vec<f64>,
}

impl Preconditioner {
    /// Validates positivity, finiteness and the real-signal symmetry
    /// `eig[k] = eig[mirror(k)]`.
    pub fn from_eigs(shape: Shape, fourier_eigs: Vec<f64>) -> Result<Self> {
        if fourier_eigs.len() != shape.len() {
            return Err(MsbdError::dim(shape.len(), fourier_eigs.len()));
        }
        if fourier_eigs.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(MsbdError::Parameter("preconditioner eigenvalues must be finite and positive".into()));
        }
        let asym = (0..shape.len())
            .map(|k| (fourier_eigs[k] - fourier_eigs[shape.mirror(k)]).abs())
            .fold(0.0, f64::max);
        let max = fourier_eigs.iter().cloned().fold(0.0, f64::max);
        if asym > 1e-10 * max {
            return Err(MsbdError::Parameter("preconditioner spectrum is not symmetric".into()));
        }
        Ok(Preconditioner { shape, fourier_eigs })
    }

    pub fn identity(shape: Shape) -> Self {
        Preconditioner {
            shape,
            fourier_eigs: vec![1.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn fourier_eigs(&self) -> &[f64] {
        &self.fourier_eigs
    }

    /// `R h`.
    pub fn apply(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.shape.len() {
            return Err(MsbdError::dim(self.shape.len(), h.len()));
        }
        let plan = FourierPlan::new(self.shape);
        let mut spec = plan.forward_real(h);
        for (s, e) in spec.iter_mut().zip(&self.fourier_eigs) {
            *s *= *e;
        }
        plan.inverse_to_real(spec)
    }

    /// Dense matrix form, for oracles and small-`n` analysis.
    pub fn to_dense(&self) -> Result<DMatrix<f64>> {
        let n = self.shape.len();
        let mut impulse = vec![0.0; n];
        impulse[0] = 1.0;
        let col = self.apply(&impulse)?;
        Ok(match self.shape {
            Shape::Line(_) => dense_circulant(&col),
            Shape::Grid { rows, cols } => dense_circulant_2d(&col, rows, cols),
        })
    }

    /// Operator with eigenvalues multiplied pointwise by `other`'s.
    pub fn compose(&self, other: &Preconditioner) -> Result<Preconditioner> {
        if self.shape != other.shape {
            return Err(MsbdError::dim(self.shape.len(), other.shape.len()));
        }
        let eigs = self.fourier_eigs.iter().zip(&other.fourier_eigs).map(|(a, b)| a * b).collect();
        Preconditioner::from_eigs(self.shape, eigs)
    }
}

/// `R = [(1/(θnp)) Σ C(y_i)ᵀ C(y_i)]^{-1/2}`.
///
/// Each `C(y_i)ᵀ C(y_i)` is circulant with spectrum `|ŷ_i|²`, so the
/// average is circulant with eigenvalues `λ_k` and `R` has eigenvalues
/// `λ_k^{-1/2}`.
pub fn build_preconditioner(y: &ObservationSet, theta: f64) -> Result<Preconditioner> {
    build_preconditioner_with(y, theta, DEFAULT_INVERTIBILITY_EPS)
}

pub fn build_preconditioner_with(y: &ObservationSet, theta: f64, rel_eps: f64) -> Result<Preconditioner> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(MsbdError::Parameter(format!("theta must lie in (0, 1], got {theta}")));
    }
    let shape = y.shape();
    let (n, p) = (y.n(), y.p());
    let plan = FourierPlan::new(shape);
    let mut lambda = vec![0.0; n];
    for col in y.columns() {
        for (l, c) in lambda.iter_mut().zip(plan.forward_real(col)) {
            *l += c.norm_sqr();
        }
    }
    let scale = 1.0 / (theta * (n * p) as f64);
    lambda.iter_mut().for_each(|l| *l *= scale);
    let max = lambda.iter().cloned().fold(0.0, f64::max);
    let min = lambda.iter().cloned().fold(f64::INFINITY, f64::min);
    let threshold = rel_eps * max;
    if !(min > threshold) {
        return Err(MsbdError::NonInvertiblePreconditioner {
            min_eigenvalue: min,
            threshold,
        });
    }
    // Symmetrize bins exactly; |ŷ_k|² and |ŷ_{-k}|² agree only to round-off.
    let eigs = (0..n)
        .map(|k| {
            let l = 0.5 * (lambda[k] + lambda[shape.mirror(k)]);
            1.0 / l.sqrt()
        })
        .collect();
    Preconditioner::from_eigs(shape, eigs)
}

/// Observations prepared for repeated loss and gradient evaluation: their
/// spectra, the operator spectrum and the smoothing parameter.
///
/// The formulas extend to all of `Rⁿ`; methods here do not enforce unit
/// norm (finite-difference checks step off the sphere). The free functions
/// [`loss_value`] and friends do.
#[derive(Debug, Clone)]
pub struct Objective {
    plan: FourierPlan,
    spectra: Vec<Vec<Complex64>>,
    operator: Preconditioner,
    mu: f64,
}

struct Accum {
    value: f64,
    grad_spec: Vec<Complex64>,
}

impl Objective {
    pub fn new(y: &ObservationSet, operator: Option<&Preconditioner>, mu: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(MsbdError::Parameter(format!("mu must be > 0, got {mu}")));
        }
        let shape = y.shape();
        let operator = match operator {
            Some(r) if r.shape() != shape => return Err(MsbdError::dim(shape.len(), r.shape().len())),
            Some(r) => r.clone(),
            None => Preconditioner::identity(shape),
        };
        let plan = FourierPlan::new(shape);
        let spectra = y.columns().iter().map(|c| plan.forward_real(c)).collect();
        Ok(Objective {
            plan,
            spectra,
            operator,
            mu,
        })
    }

    pub fn n(&self) -> usize {
        self.plan.len()
    }

    pub fn p(&self) -> usize {
        self.spectra.len()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn shape(&self) -> Shape {
        self.plan.shape()
    }

    pub fn operator(&self) -> &Preconditioner {
        &self.operator
    }

    pub fn with_mu(&self, mu: f64) -> Result<Self> {
        if !(mu > 0.0) {
            return Err(MsbdError::Parameter(format!("mu must be > 0, got {mu}")));
        }
        Ok(Objective { mu, ..self.clone() })
    }

    fn check_len(&self, h: &[f64]) -> Result<()> {
        if h.len() != self.n() {
            return Err(MsbdError::dim(self.n(), h.len()));
        }
        Ok(())
    }

    /// `F(R h)`.
    fn operator_spectrum(&self, h: &[f64]) -> Vec<Complex64> {
        let mut spec = self.plan.forward_real(h);
        for (s, e) in spec.iter_mut().zip(self.operator.fourier_eigs()) {
            *s *= *e;
        }
        spec
    }

    /// Runs `per_entry` on every residual `z = C(y_i) R h`, summing the
    /// returned values and, if `want_grad`, accumulating
    /// `Σ conj(ŷ_i) ⊙ F(d_i)` where `d_i` are the per-entry derivatives.
    fn sweep<F>(&self, h: &[f64], want_grad: bool, per_entry: F) -> Accum
    where
        F: Fn(f64) -> (f64, f64) + Sync,
    {
        let n = self.n();
        let rh = self.operator_spectrum(h);
        let shape = self.plan.shape();
        let mirror: Vec<usize> = (0..n).map(|k| shape.mirror(k)).collect();
        let zero = Complex64::new(0.0, 0.0);
        // Two real residuals share one complex transform: the pair (a, b) is
        // packed as a + i b and split again through Hermitian symmetry.
        let run = |range: std::ops::Range<usize>| {
            let mut buf = vec![zero; n];
            let mut acc = Accum {
                value: 0.0,
                grad_spec: if want_grad { vec![zero; n] } else { Vec::new() },
            };
            let inv_n = 1.0 / n as f64;
            for pair in self.spectra[range].chunks(2) {
                let (sa, sb) = (&pair[0], pair.get(1));
                match sb {
                    Some(sb) => {
                        for k in 0..n {
                            buf[k] = (sa[k] + Complex64::i() * sb[k]) * rh[k];
                        }
                    }
                    None => {
                        for k in 0..n {
                            buf[k] = sa[k] * rh[k];
                        }
                    }
                }
                self.plan.inverse(&mut buf);
                for b in buf.iter_mut() {
                    let (va, da) = per_entry(b.re * inv_n);
                    let (vb, db) = if sb.is_some() { per_entry(b.im * inv_n) } else { (0.0, 0.0) };
                    acc.value += va + vb;
                    *b = Complex64::new(da, db);
                }
                if want_grad {
                    self.plan.forward(&mut buf);
                    for k in 0..n {
                        let (zk, zm) = (buf[k], buf[mirror[k]].conj());
                        let da = (zk + zm) * 0.5;
                        acc.grad_spec[k] += sa[k].conj() * da;
                        if let Some(sb) = sb {
                            let db = (zk - zm) * Complex64::new(0.0, -0.5);
                            acc.grad_spec[k] += sb[k].conj() * db;
                        }
                    }
                }
            }
            acc
        };

        let p = self.p();
        let partials: Vec<Accum> = if n * p >= PARALLEL_WORK && p > CHUNK {
            let starts: Vec<usize> = (0..p).step_by(CHUNK).collect();
            starts.par_iter().map(|&s| run(s..(s + CHUNK).min(p))).collect()
        } else {
            vec![run(0..p)]
        };
        let mut total = Accum {
            value: 0.0,
            grad_spec: if want_grad { vec![Complex64::new(0.0, 0.0); n] } else { Vec::new() },
        };
        for part in partials {
            total.value += part.value;
            for (t, g) in total.grad_spec.iter_mut().zip(&part.grad_spec) {
                *t += g;
            }
        }
        total
    }

    /// Maps an accumulated `Σ conj(ŷ_i) ⊙ F(d_i)` to `(scale) Rᵀ Σ C(y_i)ᵀ d_i`.
    fn finish_gradient(&self, mut grad_spec: Vec<Complex64>, scale: f64) -> Vec<f64> {
        for (g, e) in grad_spec.iter_mut().zip(self.operator.fourier_eigs()) {
            *g *= *e * scale;
        }
        let mut out = vec![0.0; self.n()];
        self.plan.inverse_real_part(&mut grad_spec, &mut out);
        out
    }

    /// `f(h)`.
    pub fn value(&self, h: &[f64]) -> Result<f64> {
        self.check_len(h)?;
        let mu = self.mu;
        let acc = self.sweep(h, false, |z| (mu * log_cosh(z / mu), 0.0));
        Ok(acc.value / self.p() as f64)
    }

    /// `(f(h), ∇f(h))` with `∇f(h) = (1/p) Σ Rᵀ C(y_i)ᵀ tanh(C(y_i) R h / μ)`.
    pub fn value_and_gradient(&self, h: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_len(h)?;
        let mu = self.mu;
        let acc = self.sweep(h, true, |z| {
            let t = z / mu;
            let d = if t.abs() > 20.0 { t.signum() } else { t.tanh() };
            (mu * log_cosh(t), d)
        });
        let p = self.p() as f64;
        Ok((acc.value / p, self.finish_gradient(acc.grad_spec, 1.0 / p)))
    }

    pub fn gradient(&self, h: &[f64]) -> Result<Vec<f64>> {
        self.value_and_gradient(h).map(|(_, g)| g)
    }

    /// `L(h) = −(1/4p) Σ ‖C(y_i) R h‖₄⁴`.
    pub fn l4_value(&self, h: &[f64]) -> Result<f64> {
        self.check_len(h)?;
        let acc = self.sweep(h, false, |z| (-0.25 * z * z * z * z, 0.0));
        Ok(acc.value / self.p() as f64)
    }

    /// `(L(h), −(1/p) Σ Rᵀ C(y_i)ᵀ (C(y_i) R h)^{⊙3})`.
    pub fn l4_value_and_gradient(&self, h: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_len(h)?;
        let acc = self.sweep(h, true, |z| {
            let z3 = z * z * z;
            (-0.25 * z3 * z, -z3)
        });
        let p = self.p() as f64;
        Ok((acc.value / p, self.finish_gradient(acc.grad_spec, 1.0 / p)))
    }

    pub fn value_of(&self, kind: LossKind, h: &[f64]) -> Result<f64> {
        match kind {
            LossKind::LogCosh => self.value(h),
            LossKind::L4 => self.l4_value(h),
        }
    }

    pub fn value_and_gradient_of(&self, kind: LossKind, h: &[f64]) -> Result<(f64, Vec<f64>)> {
        match kind {
            LossKind::LogCosh => self.value_and_gradient(h),
            LossKind::L4 => self.l4_value_and_gradient(h),
        }
    }

    /// Residuals `C(y_i) R h` for every observation.
    pub fn residuals(&self, h: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_len(h)?;
        let rh = self.operator_spectrum(h);
        let n = self.n();
        Ok(self
            .spectra
            .iter()
            .map(|spec| {
                let mut buf: Vec<Complex64> = spec.iter().zip(&rh).map(|(s, r)| s * r).collect();
                let mut z = vec![0.0; n];
                self.plan.inverse_real_part(&mut buf, &mut z);
                z
            })
            .collect())
    }

    /// Dense `C(y_i) R` for every observation. Intended for small `n`.
    pub fn dense_operators(&self) -> Result<Vec<DMatrix<f64>>> {
        let r = self.operator.to_dense()?;
        let shape = self.shape();
        self.spectra
            .iter()
            .map(|spec| {
                let y = self.plan.inverse_to_real(spec.clone())?;
                let c = match shape {
                    Shape::Line(_) => dense_circulant(&y),
                    Shape::Grid { rows, cols } => dense_circulant_2d(&y, rows, cols),
                };
                Ok(c * &r)
            })
            .collect()
    }
}

fn check_unit(h: &[f64]) -> Result<()> {
    let norm = crate::circulant::l2_norm(h);
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(MsbdError::Domain(format!("h must have unit norm, got {norm}")));
    }
    Ok(())
}

/// `f(h)` for a unit vector `h`. `r = None` means `R = I`.
pub fn loss_value(h: &[f64], y: &ObservationSet, r: Option<&Preconditioner>, cfg: &LossConfig) -> Result<f64> {
    check_unit(h)?;
    Objective::new(y, r, cfg.mu)?.value(h)
}

/// `∇f(h)` for a unit vector `h`.
pub fn euclidean_gradient(
    h: &[f64],
    y: &ObservationSet,
    r: Option<&Preconditioner>,
    cfg: &LossConfig,
) -> Result<Vec<f64>> {
    check_unit(h)?;
    Objective::new(y, r, cfg.mu)?.gradient(h)
}

/// ℓ4 baseline value and Euclidean gradient for a unit vector `h`.
pub fn l4_loss_gradient(h: &[f64], y: &ObservationSet, r: Option<&Preconditioner>) -> Result<(f64, Vec<f64>)> {
    check_unit(h)?;
    // μ is unused by the ℓ4 loss.
    Objective::new(y, r, 1.0)?.l4_value_and_gradient(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circulant::{circular_shift, l2_norm, unit_vector, Filter};
    use crate::signal_model::{generate_observations, sample_bernoulli_gaussian, synthesize_filter};
    use nalgebra::{DVector, SymmetricEigen};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = l2_norm(&v);
        v.into_iter().map(|x| x / norm).collect()
    }

    fn instance(n: usize, p: usize, kappa: f64, seed: u64) -> ObservationSet {
        let g = synthesize_filter(n, kappa, seed).unwrap();
        let x = sample_bernoulli_gaussian(n, p, 0.3, seed).unwrap();
        generate_observations(&g, &x, 0.0).unwrap()
    }

    fn dense_loss(h: &[f64], y: &ObservationSet, r: &Preconditioner, mu: f64) -> f64 {
        let rd = r.to_dense().unwrap();
        let hv = DVector::from_column_slice(h);
        let mut total = 0.0;
        for col in y.columns() {
            let z = dense_circulant(col) * &rd * &hv;
            total += z.iter().map(|v| surrogate_eval(*v, mu).unwrap().0).sum::<f64>();
        }
        total / y.p() as f64
    }

    fn fd_gradient(f: impl Fn(&[f64]) -> f64, h: &[f64], step: f64) -> Vec<f64> {
        (0..h.len())
            .map(|k| {
                let mut a = h.to_vec();
                let mut b = h.to_vec();
                a[k] += step;
                b[k] -= step;
                (f(&a) - f(&b)) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn surrogate_at_zero() {
        let (v, d1, d2) = surrogate_eval(0.0, 0.3).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(d1, 0.0);
        assert!((d2 - 1.0 / 0.3).abs() < 1e-15);
    }

    #[test]
    fn surrogate_reference_values() {
        // ln cosh 1 = 0.433780830483027...
        let (v, _, _) = surrogate_eval(1.0, 1.0).unwrap();
        assert!((v - 0.433_780_830_483_027).abs() < 1e-6);
        let (v, d1, _) = surrogate_eval(50.0, 1.0).unwrap();
        assert!((v - (50.0 - std::f64::consts::LN_2)).abs() < 1e-9);
        assert!((d1 - 1.0).abs() < 1e-12);
        // Far beyond where cosh overflows.
        let (v, _, d2) = surrogate_eval(1e4, 1.0).unwrap();
        assert!((v - (1e4 - std::f64::consts::LN_2)).abs() < 1e-9);
        assert!(d2 >= 0.0 && d2.is_finite());
    }

    #[test]
    fn surrogate_rejects_bad_mu() {
        assert!(matches!(surrogate_eval(1.0, 0.0), Err(MsbdError::Parameter(_))));
        assert!(matches!(surrogate_eval(1.0, -1.0), Err(MsbdError::Parameter(_))));
    }

    #[test]
    fn default_mu_follows_size_rule() {
        assert_eq!(LossConfig::default_mu(3), 0.05);
        assert_eq!(LossConfig::default_mu(64), 0.05);
        assert!((LossConfig::default_mu(128) - 10.0 * 128f64.powf(-1.25)).abs() < 1e-15);
        assert!(LossConfig::default_mu(128) < 0.05);
    }

    #[test]
    fn zero_observations_give_zero_loss_and_gradient() {
        let y = ObservationSet::line(vec![vec![0.0; 6]; 3]).unwrap();
        let cfg = LossConfig::new(0.1, 0.3).unwrap();
        let h = unit_vector(6, 2);
        assert_eq!(loss_value(&h, &y, None, &cfg).unwrap(), 0.0);
        assert!(euclidean_gradient(&h, &y, None, &cfg).unwrap().iter().all(|g| *g == 0.0));
        let (v, g) = l4_loss_gradient(&h, &y, None).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn orthogonal_single_observation() {
        let x = vec![0.5, -1.2, 0.0, 2.0, 0.3];
        let y = ObservationSet::line(vec![x.clone()]).unwrap();
        let cfg = LossConfig::new(0.2, 0.3).unwrap();
        let h = unit_vector(5, 0);
        let expect: f64 = x.iter().map(|v| surrogate_eval(*v, 0.2).unwrap().0).sum();
        assert!((loss_value(&h, &y, None, &cfg).unwrap() - expect).abs() < 1e-12);
        let (l4, _) = l4_loss_gradient(&h, &y, None).unwrap();
        let expect4: f64 = -0.25 * x.iter().map(|v| v.powi(4)).sum::<f64>();
        assert!((l4 - expect4).abs() < 1e-12);
    }

    #[test]
    fn symmetric_input_gradient_component() {
        let x = vec![1.0, -1.0, 0.5, -0.5, 0.0, 2.0, -2.0];
        let y = ObservationSet::line(vec![x.clone()]).unwrap();
        let cfg = LossConfig::new(0.1, 0.3).unwrap();
        let g = euclidean_gradient(&unit_vector(7, 0), &y, None, &cfg).unwrap();
        let expect: f64 = x.iter().map(|v| (v / 0.1).tanh() * v).sum();
        assert!((g[0] - expect).abs() < 1e-12);
        assert!(g[0] >= 0.0);
    }

    #[test]
    fn loss_matches_dense_oracle() {
        let y = instance(6, 3, 4.0, 5);
        let r = build_preconditioner(&y, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_unit(&mut rng, 6);
        let cfg = LossConfig::new(0.1, 0.3).unwrap();
        let fast = loss_value(&h, &y, Some(&r), &cfg).unwrap();
        let slow = dense_loss(&h, &y, &r, 0.1);
        assert!((fast - slow).abs() <= 1e-12 * slow.abs());
    }

    #[test]
    fn non_unit_h_is_rejected() {
        let y = instance(6, 3, 2.0, 1);
        let cfg = LossConfig::new(0.1, 0.3).unwrap();
        let h = vec![1.0; 6];
        assert!(matches!(loss_value(&h, &y, None, &cfg), Err(MsbdError::Domain(_))));
        assert!(matches!(euclidean_gradient(&h, &y, None, &cfg), Err(MsbdError::Domain(_))));
        assert!(matches!(
            loss_value(&unit_vector(5, 0), &y, None, &cfg),
            Err(MsbdError::Domain(_)) | Err(MsbdError::Dimension { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let y = instance(12, 4, 5.0, 9);
        let r = build_preconditioner(&y, 0.3).unwrap();
        let obj = Objective::new(&y, Some(&r), 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = random_unit(&mut rng, 12);
        let g = obj.gradient(&h).unwrap();
        let fd = fd_gradient(|v| obj.value(v).unwrap(), &h, 1e-5);
        let scale = l2_norm(&fd);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * scale, "{a} vs {b}");
        }
        let (_, g4) = obj.l4_value_and_gradient(&h).unwrap();
        let fd4 = fd_gradient(|v| obj.l4_value(v).unwrap(), &h, 1e-5);
        let scale4 = l2_norm(&fd4);
        for (a, b) in g4.iter().zip(&fd4) {
            assert!((a - b).abs() <= 1e-6 * scale4, "{a} vs {b}");
        }
    }

    #[test]
    fn preconditioner_for_single_impulse() {
        for n in [4, 9] {
            let y = ObservationSet::line(vec![unit_vector(n, 0)]).unwrap();
            let r = build_preconditioner(&y, 0.25).unwrap();
            let expect = (0.25 * n as f64).sqrt();
            assert!(r.fourier_eigs().iter().all(|e| (e - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn preconditioner_matches_dense_inverse_sqrt() {
        let y = instance(8, 5, 6.0, 77);
        let theta = 0.3;
        let r = build_preconditioner(&y, theta).unwrap();
        let mut cov = DMatrix::zeros(8, 8);
        for col in y.columns() {
            let c = dense_circulant(col);
            cov += c.transpose() * c;
        }
        cov /= theta * 8.0 * 5.0;
        let eig = SymmetricEigen::new(cov.clone());
        let inv_sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        let oracle = &eig.eigenvectors * inv_sqrt * eig.eigenvectors.transpose();
        let dense = r.to_dense().unwrap();
        assert!((&dense - &oracle).norm() <= 1e-8 * oracle.norm());
        // R² · cov = I
        let check = &dense * &dense * &cov;
        assert!((check - DMatrix::identity(8, 8)).norm() <= 1e-8 * 8f64.sqrt());
        // Symmetric, positive definite.
        assert!((&dense - dense.transpose()).norm() <= 1e-10 * dense.norm());
        assert!(SymmetricEigen::new(dense).eigenvalues.min() > 0.0);
    }

    #[test]
    fn preconditioner_scales_inversely() {
        let y = instance(8, 5, 3.0, 8);
        let r1 = build_preconditioner(&y, 0.3).unwrap();
        let r2 = build_preconditioner(&y.scaled(4.0), 0.3).unwrap();
        for (a, b) in r1.fourier_eigs().iter().zip(r2.fourier_eigs()) {
            assert!((a / 4.0 - b).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn preconditioner_detects_common_null() {
        // Every observation is constant: all non-DC bins vanish.
        let y = ObservationSet::line(vec![vec![1.0; 6], vec![2.0; 6]]).unwrap();
        assert!(matches!(
            build_preconditioner(&y, 0.3),
            Err(MsbdError::NonInvertiblePreconditioner { .. })
        ));
    }

    #[test]
    fn loss_is_shift_equivariant() {
        // C(y) S_j = S_j C(y): shifting h and every observation by the same
        // amount leaves the residual multiset, hence the loss, unchanged,
        // and shifting h alone permutes each residual.
        let y = instance(10, 4, 3.0, 4);
        let r = build_preconditioner(&y, 0.3).unwrap();
        let obj = Objective::new(&y, Some(&r), 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_unit(&mut rng, 10);
        let hs = circular_shift(&h, 3);
        let (f0, g0) = obj.value_and_gradient(&h).unwrap();
        let (f1, g1) = obj.value_and_gradient(&hs).unwrap();
        assert!((f0 - f1).abs() <= 1e-12 * f0.abs());
        let g0s = circular_shift(&g0, 3);
        for (a, b) in g0s.iter().zip(&g1) {
            assert!((a - b).abs() <= 1e-12 * l2_norm(&g0));
        }
        let rd = r.to_dense().unwrap();
        let hv = DVector::from_column_slice(&hs);
        let dense: f64 = y
            .columns()
            .iter()
            .map(|c| (dense_circulant(c) * &rd * &hv).iter().map(|z| surrogate_eval(*z, 0.2).unwrap().0).sum::<f64>())
            .sum::<f64>()
            / 4.0;
        assert!((dense - f1).abs() <= 1e-12 * f1.abs());
    }

    #[test]
    fn large_instances_use_parallel_path_deterministically() {
        let y = instance(256, 300, 4.0, 31);
        let obj = Objective::new(&y, None, 0.05).unwrap();
        let h = unit_vector(256, 3);
        let a = obj.value_and_gradient(&h).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| obj.value_and_gradient(&h).unwrap());
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn identity_filter_with_delta_observations() {
        let g = Filter::delta(5).unwrap();
        let y = generate_observations(&g, &crate::signal_model::SparseInputs::from_columns(vec![unit_vector(5, 1)], 0.3, 0).unwrap(), 0.0).unwrap();
        let obj = Objective::new(&y, None, 0.1).unwrap();
        // C(e_2) e_1 = e_2: one active residual equal to 1.
        let v = obj.value(&unit_vector(5, 0)).unwrap();
        assert!((v - surrogate_eval(1.0, 0.1).unwrap().0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn homogeneity(z in -50.0f64..50.0, c in 0.05f64..20.0, mu in 0.01f64..2.0) {
            let lhs = surrogate_eval(c * z, mu).unwrap().0;
            let rhs = c * surrogate_eval(z, mu / c).unwrap().0;
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }

        #[test]
        fn surrogate_shape(z in -1e3f64..1e3, mu in 1e-3f64..10.0) {
            let (v, d1, d2) = surrogate_eval(z, mu).unwrap();
            let (vm, d1m, _) = surrogate_eval(-z, mu).unwrap();
            prop_assert!((v - vm).abs() <= 1e-12 * (1.0 + v.abs()));
            prop_assert!((d1 + d1m).abs() <= 1e-15);
            prop_assert!(d1.abs() <= 1.0);
            prop_assert!(d2 >= 0.0 && d2 <= 1.0 / mu * (1.0 + 1e-15));
            prop_assert!(v >= 0.0);
        }
    }
}
