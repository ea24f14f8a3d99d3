//! Empirical checks of the local geometry around the target basins.
//!
//! Inside basin `(i, ±)` the sphere is parametrized by `w ∈ ℝ^{n−1}` with
//! `h = P h(w)`, where `h(w) = (w, √(1 − ‖w‖²))` and `P` is the signed swap
//! taking `e_n` to `±e_i`. With `φ(w) = f(P h(w))`:
//!
//! ```text
//! ∇φ  = J Pᵀ∇f
//! ∇²φ = J Pᵀ∇²f P Jᵀ − ((Pᵀ∇f)_n / h_n) J Jᵀ
//! ∇²f = (1/p) Σ_i A_iᵀ diag(ψ″(A_i h)) A_i,   A_i = C(y_i) R
//! ```
//!
//! The Hessian is assembled densely and is meant for `n ≤ 32`.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::circulant::{l2_norm, spectrum, Filter, Shape};
use crate::error::{MsbdError, Result};
use crate::numfmt::g17;
use crate::signal_model::{
    generate_observations, sample_bernoulli_gaussian, stream_rng, synthesize_filter, ObservationSet, Stream,
};
use crate::sphere::{from_basin_frame, region_membership, reparam, to_basin_frame, RegionLabel, Sign, SphereVector};
use crate::surrogate_loss::{build_preconditioner, Objective, Preconditioner};

const ASYMMETRY_TOL: f64 = 1e-9;
const MAX_DENSE_N: usize = 32;

/// The loss restricted to one basin and written in `w`-coordinates.
#[derive(Debug)]
pub struct BasinChart<'a> {
    obj: &'a Objective,
    label: RegionLabel,
    ops: OnceLock<Vec<DMatrix<f64>>>,
}

impl<'a> BasinChart<'a> {
    pub fn new(obj: &'a Objective, label: RegionLabel) -> Result<Self> {
        if label.index >= obj.n() {
            return Err(MsbdError::Parameter(format!(
                "basin index {} out of range for n = {}",
                label.index,
                obj.n()
            )));
        }
        Ok(BasinChart {
            obj,
            label,
            ops: OnceLock::new(),
        })
    }

    /// The chart around `+e_n`.
    pub fn centered(obj: &'a Objective) -> Self {
        BasinChart {
            obj,
            label: RegionLabel {
                index: obj.n() - 1,
                sign: Sign::Plus,
                xi: 0.0,
            },
            ops: OnceLock::new(),
        }
    }

    pub fn label(&self) -> &RegionLabel {
        &self.label
    }

    pub fn objective(&self) -> &Objective {
        self.obj
    }

    fn check_w(&self, w: &[f64]) -> Result<()> {
        if w.len() + 1 != self.obj.n() {
            return Err(MsbdError::dim(self.obj.n() - 1, w.len()));
        }
        Ok(())
    }

    /// The sphere point `P h(w)`.
    pub fn point(&self, w: &[f64]) -> Result<SphereVector> {
        self.check_w(w)?;
        let h = crate::sphere::h_of_w(w)?;
        SphereVector::new(from_basin_frame(h.as_slice(), &self.label))
    }

    pub fn value(&self, w: &[f64]) -> Result<f64> {
        let h = self.point(w)?;
        self.obj.value(h.as_slice())
    }

    /// `∇φ(w)`, length `n − 1`.
    pub fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_w(w)?;
        let (h, jac) = reparam(w)?;
        let g = self.obj.gradient(&from_basin_frame(h.as_slice(), &self.label))?;
        let g = DVector::from_vec(to_basin_frame(&g, &self.label));
        Ok((jac * g).as_slice().to_vec())
    }

    /// `wᵀ∇φ(w) / ‖w‖`.
    pub fn directional_gradient(&self, w: &[f64]) -> Result<f64> {
        let norm = l2_norm(w);
        if norm == 0.0 {
            return Err(MsbdError::Domain("directional gradient is undefined at w = 0".into()));
        }
        let g = self.gradient(w)?;
        Ok(w.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / norm)
    }

    fn dense_ops(&self) -> Result<&[DMatrix<f64>]> {
        if let Some(ops) = self.ops.get() {
            return Ok(ops);
        }
        let ops = self.obj.dense_operators()?;
        Ok(self.ops.get_or_init(|| ops))
    }

    /// Analytic `∇²φ(w)`, `(n−1) × (n−1)`.
    pub fn hessian(&self, w: &[f64]) -> Result<DMatrix<f64>> {
        self.check_w(w)?;
        let n = self.obj.n();
        if n > MAX_DENSE_N {
            return Err(MsbdError::Parameter(format!("dense Hessian supports n <= {MAX_DENSE_N}, got {n}")));
        }
        let (hw, jac) = reparam(w)?;
        let h = from_basin_frame(hw.as_slice(), &self.label);
        let mu = self.obj.mu();
        let p = self.obj.p() as f64;
        let residuals = self.obj.residuals(&h)?;
        let mut euclid = DMatrix::<f64>::zeros(n, n);
        let mut grad = vec![0.0; n];
        for (a, z) in self.dense_ops()?.iter().zip(&residuals) {
            let t: Vec<f64> = z.iter().map(|v| (v / mu).tanh()).collect();
            let curv = DVector::from_iterator(n, t.iter().map(|t| (1.0 - t * t) / mu));
            let mut scaled = a.clone();
            for (mut row, c) in scaled.row_iter_mut().zip(curv.iter()) {
                row *= *c;
            }
            euclid.gemm_tr(1.0 / p, a, &scaled, 1.0);
            let at = a.tr_mul(&DVector::from_vec(t));
            grad.iter_mut().zip(at.iter()).for_each(|(g, v)| *g += v / p);
        }

        // Pᵀ ∇²f P and Pᵀ ∇f.
        let perm = DMatrix::from_fn(n, n, |r, c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            from_basin_frame(&e, &self.label)[r]
        });
        let local = perm.transpose() * euclid * &perm;
        let gn = to_basin_frame(&grad, &self.label)[n - 1];
        let hn = hw.as_slice()[n - 1];

        let jjt = &jac * jac.transpose();
        let hess = &jac * local * jac.transpose() - jjt * (gn / hn);
        let asym = (&hess - hess.transpose()).amax();
        if asym > ASYMMETRY_TOL * (1.0 + hess.amax()) {
            return Err(MsbdError::Numerical(format!("Hessian asymmetry {asym:e}")));
        }
        Ok((&hess + hess.transpose()) * 0.5)
    }
}

/// `wᵀ∇φ(w)/‖w‖` in the chart around `+e_n`.
pub fn directional_gradient_w(w: &[f64], obj: &Objective) -> Result<f64> {
    BasinChart::centered(obj).directional_gradient(w)
}

/// `∇²φ(w)` in the chart around `+e_n`.
pub fn hessian_w(w: &[f64], obj: &Objective) -> Result<DMatrix<f64>> {
    BasinChart::centered(obj).hessian(w)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Damped Newton from `w = 0`, falling back to gradient steps where the
/// Hessian is not positive definite.
pub fn local_minimizer_w(chart: &BasinChart, max_iters: usize, tol: f64) -> Result<Vec<f64>> {
    let m = chart.objective().n() - 1;
    let mut w = vec![0.0; m];
    let mut f = chart.value(&w)?;
    for _ in 0..max_iters {
        let g = chart.gradient(&w)?;
        if l2_norm(&g) <= tol {
            break;
        }
        let gv = DVector::from_vec(g.clone());
        let dir = match chart.hessian(&w)?.cholesky() {
            Some(ch) => -ch.solve(&gv),
            None => -gv.clone(),
        };
        let slope = dir.dot(&gv);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = w.iter().zip(dir.iter()).map(|(a, d)| a + t * d).collect();
            if l2_norm(&cand) < 1.0 {
                let fc = chart.value(&cand)?;
                if fc <= f + 1e-4 * t * slope + 8.0 * f64::EPSILON * f.abs() {
                    w = cand;
                    f = fc;
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-12 {
                return Ok(w);
            }
        }
    }
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Q1,
    Q2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionReport {
    pub region: Region,
    pub samples: usize,
    /// Draws discarded because `h(w)` fell outside the basin.
    pub rejected: usize,
    /// Minimum directional gradient (Q1) or Hessian eigenvalue (Q2).
    pub min_value: f64,
    /// Samples where that value is not strictly positive.
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryReport {
    pub q1: RegionReport,
    pub q2: RegionReport,
    pub params: GeometryParams,
}

impl GeometryReport {
    pub fn min_directional_gradient(&self) -> f64 {
        self.q1.min_value
    }

    pub fn min_hessian_eig(&self) -> f64 {
        self.q2.min_value
    }

    pub fn violations(&self) -> usize {
        self.q1.violations + self.q2.violations
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryParams {
    pub n: usize,
    pub p: usize,
    pub theta: f64,
    /// `1` selects the orthogonal case `C(g) = I` without preconditioning.
    pub kappa: f64,
    pub xi0: f64,
    pub mu: f64,
    /// Samples per region.
    pub samples: usize,
    pub seed: u64,
}

impl GeometryParams {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MsbdError::Parameter(m));
        if self.n < 2 || self.n > MAX_DENSE_N {
            return bad(format!("n must lie in [2, {MAX_DENSE_N}], got {}", self.n));
        }
        if self.p < 1 {
            return bad("p must be at least 1".into());
        }
        if !(self.kappa >= 1.0) {
            return bad(format!("kappa must be >= 1, got {}", self.kappa));
        }
        if !(self.xi0 > 0.0) {
            return bad(format!("xi0 must be > 0, got {}", self.xi0));
        }
        if !(self.mu > 0.0) {
            return bad(format!("mu must be > 0, got {}", self.mu));
        }
        Ok(())
    }

    /// `μ / (4√2)`, the radius separating Q2 from Q1.
    pub fn inner_radius(&self) -> f64 {
        self.mu / (4.0 * SQRT_2)
    }

    /// `√((n−1)/(n+ξ₀))`, the largest `‖w‖` inside the basin.
    pub fn outer_radius(&self) -> f64 {
        ((self.n as f64 - 1.0) / (self.n as f64 + self.xi0)).sqrt()
    }
}

/// The objective whose basins sit at `±e_i`.
///
/// For `κ = 1` this is the unpreconditioned loss with `C(g) = I`. For
/// `κ > 1` the data come from a synthesized filter, `R` is built from the
/// observations, and the operator is `C(g) R Uᵀ` with
/// `U = C(g)(C(g)ᵀC(g))^{-1/2}`; its Fourier eigenvalues are `|ĝ_k| r̂_k`.
pub fn geometry_objective(params: &GeometryParams) -> Result<Objective> {
    params.validate()?;
    let x = sample_bernoulli_gaussian(params.n, params.p, params.theta, params.seed)?;
    let xs = ObservationSet::line(x.columns().to_vec())?;
    if params.kappa == 1.0 {
        return Objective::new(&xs, None, params.mu);
    }
    let g = synthesize_filter(params.n, params.kappa, params.seed)?;
    let y = generate_observations(&g, &x, 0.0)?;
    let r = build_preconditioner(&y, params.theta)?;
    let op = r.compose(&filter_magnitudes(&g)?)?;
    Objective::new(&xs, Some(&op), params.mu)
}

fn filter_magnitudes(g: &Filter) -> Result<Preconditioner> {
    Preconditioner::from_eigs(Shape::Line(g.len()), spectrum(g).magnitudes())
}

fn sample_ball_shell<R: Rng + ?Sized>(rng: &mut R, dim: usize, lo: f64, hi: f64) -> Vec<f64> {
    let dir: Vec<f64> = loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = l2_norm(&v);
        if norm > 0.0 {
            break v.into_iter().map(|x| x / norm).collect();
        }
    };
    let r = lo + (hi - lo) * rng.random::<f64>();
    dir.into_iter().map(|x| x * r).collect()
}

/// Samples a basin uniformly, then `w` with uniform direction and radius
/// uniform over the region's radial interval, keeping only points whose
/// sphere image lies in `S_ξ₀` of that basin.
fn sample_region<R: Rng + ?Sized>(
    rng: &mut R,
    params: &GeometryParams,
    region: Region,
) -> (Vec<(RegionLabel, Vec<f64>)>, usize) {
    let (lo, hi) = match region {
        Region::Q1 => (params.inner_radius(), params.outer_radius()),
        Region::Q2 => (0.0, params.inner_radius()),
    };
    let n = params.n;
    let max_draws = 1000 * params.samples.max(1);
    let mut out = Vec::with_capacity(params.samples);
    let mut rejected = 0;
    while out.len() < params.samples && out.len() + rejected < max_draws {
        let index = rng.random_range(0..n);
        let sign = if rng.random::<bool>() { Sign::Plus } else { Sign::Minus };
        let w = sample_ball_shell(rng, n - 1, lo, hi);
        let inside = crate::sphere::h_of_w(&w)
            .ok()
            .and_then(|h| region_membership(&h, params.xi0))
            .is_some_and(|l| l.index == n - 1 && l.sign == Sign::Plus);
        if inside {
            out.push((
                RegionLabel {
                    index,
                    sign,
                    xi: params.xi0,
                },
                w,
            ));
        } else {
            rejected += 1;
        }
    }
    (out, rejected)
}

/// Positive directional gradient on Q1 and positive-definite Hessian on Q2,
/// checked on random samples.
pub fn verify_geometry(params: &GeometryParams) -> Result<GeometryReport> {
    let obj = geometry_objective(params)?;
    let mut rng = stream_rng(params.seed, Stream::Sampling);
    let (q1_points, q1_rejected) = sample_region(&mut rng, params, Region::Q1);
    let (q2_points, q2_rejected) = sample_region(&mut rng, params, Region::Q2);

    // One chart per basin so the dense operators are shared.
    let charts: Vec<BasinChart> = (0..params.n)
        .flat_map(|i| [Sign::Plus, Sign::Minus].map(|s| (i, s)))
        .map(|(index, sign)| {
            BasinChart::new(
                &obj,
                RegionLabel {
                    index,
                    sign,
                    xi: params.xi0,
                },
            )
        })
        .collect::<Result<_>>()?;
    let chart_for = |l: &RegionLabel| &charts[2 * l.index + usize::from(l.sign == Sign::Minus)];

    let dg: Vec<f64> = q1_points
        .par_iter()
        .map(|(l, w)| chart_for(l).directional_gradient(w))
        .collect::<Result<_>>()?;
    let eig: Vec<f64> = q2_points
        .par_iter()
        .map(|(l, w)| chart_for(l).hessian(w).map(|h| min_eigenvalue(&h)))
        .collect::<Result<_>>()?;

    let summarize = |region, values: &[f64], rejected| RegionReport {
        region,
        samples: values.len(),
        rejected,
        min_value: values.iter().copied().fold(f64::INFINITY, f64::min),
        violations: values.iter().filter(|v| !(**v > 0.0)).count(),
    };
    Ok(GeometryReport {
        q1: summarize(Region::Q1, &dg, q1_rejected),
        q2: summarize(Region::Q2, &eig, q2_rejected),
        params: params.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub azimuth: f64,
    pub elevation: f64,
    pub loss: f64,
}

impl SurfacePoint {
    pub fn direction(&self) -> [f64; 3] {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        [ce * ca, ce * sa, se]
    }
}

/// Loss on a `grid × grid` lattice of azimuths `2πj/grid` and elevations
/// `−π/2 + π(i + ½)/grid`. Only defined for `n = 3`.
pub fn export_sphere_surface(obj: &Objective, grid: usize) -> Result<Vec<SurfacePoint>> {
    if obj.n() != 3 {
        return Err(MsbdError::Parameter(format!("surface export needs n = 3, got {}", obj.n())));
    }
    if grid == 0 {
        return Err(MsbdError::Parameter("grid must be at least 1".into()));
    }
    let lattice: Vec<(f64, f64)> = (0..grid)
        .flat_map(|i| {
            let el = -FRAC_PI_2 + PI * (i as f64 + 0.5) / grid as f64;
            (0..grid).map(move |j| (2.0 * PI * j as f64 / grid as f64, el))
        })
        .collect();
    lattice
        .par_iter()
        .map(|&(azimuth, elevation)| {
            let mut pt = SurfacePoint {
                azimuth,
                elevation,
                loss: 0.0,
            };
            let h = SphereVector::normalize(pt.direction().to_vec())?;
            pt.loss = obj.value(h.as_slice())?;
            Ok(pt)
        })
        .collect()
}

pub fn surface_to_csv(points: &[SurfacePoint]) -> String {
    let mut out = String::from("azimuth,elevation,loss\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", g17(p.azimuth), g17(p.elevation), g17(p.loss)));
    }
    out
}
