//! Unit-sphere primitives: tangent projection, retraction, uniform sampling,
//! the signed-coordinate basins `S_ξ^(i±)`, and the local chart
//! `w ↦ h(w) = (w, √(1 − ‖w‖²))` around `e_n`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::circulant::{dot, l2_norm};
use crate::error::{MsbdError, Result};
use crate::signal_model::{stream_rng, Stream};

const UNIT_NORM_TOL: f64 = 1e-9;

/// A vector of unit Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct SphereVector(Vec<f64>);

impl SphereVector {
    /// Accepts `h` if `‖h‖ = 1 ± 1e-9`.
    pub fn new(h: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&h);
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(MsbdError::Domain(format!("expected a unit vector, norm is {norm}")));
        }
        Ok(SphereVector(h))
    }

    /// Rescales `v` onto the sphere.
    pub fn normalize(v: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&v);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(MsbdError::Domain(format!("cannot normalize vector of norm {norm}")));
        }
        Ok(SphereVector(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn basis(n: usize, i: usize, sign: Sign) -> Self {
        let mut e = vec![0.0; n];
        e[i] = sign.value();
        SphereVector(e)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[f64]> for SphereVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn of(x: f64) -> Option<Sign> {
        if x > 0.0 {
            Some(Sign::Plus)
        } else if x < 0.0 {
            Some(Sign::Minus)
        } else {
            None
        }
    }
}

/// Membership witness for `S_ξ^(i±)`; `index` is 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionLabel {
    pub index: usize,
    pub sign: Sign,
    pub xi: f64,
}

impl RegionLabel {
    pub fn same_basin(&self, other: &RegionLabel) -> bool {
        self.index == other.index && self.sign == other.sign
    }
}

/// `(I − h hᵀ) g`.
pub fn riemannian_gradient(h: &SphereVector, euclid_grad: &[f64]) -> Vec<f64> {
    let h = h.as_slice();
    let c = dot(h, euclid_grad);
    let mut out: Vec<f64> = euclid_grad.iter().zip(h).map(|(g, x)| g - c * x).collect();
    // One refinement pass pushes the residual radial component down to
    // round-off of the output rather than of the input.
    let c2 = dot(h, &out);
    for (o, x) in out.iter_mut().zip(h) {
        *o -= c2 * x;
    }
    out
}

/// `(h − η g) / ‖h − η g‖`.
pub fn retract_step(h: &SphereVector, grad: &[f64], eta: f64) -> Result<SphereVector> {
    if !(eta > 0.0) {
        return Err(MsbdError::Parameter(format!("step size must be > 0, got {eta}")));
    }
    if grad.len() != h.len() {
        return Err(MsbdError::dim(h.len(), grad.len()));
    }
    let v: Vec<f64> = h.as_slice().iter().zip(grad).map(|(x, g)| x - eta * g).collect();
    let norm = l2_norm(&v);
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(MsbdError::DegenerateStep(format!("retraction denominator is {norm}")));
    }
    Ok(SphereVector(v.into_iter().map(|x| x / norm).collect()))
}

/// Uniform point on `S^{n−1}`: a normalized standard Gaussian vector drawn
/// from the seed's init stream.
pub fn random_sphere_point(n: usize, seed: u64) -> Result<SphereVector> {
    if n < 2 {
        return Err(MsbdError::Parameter(format!("n must be at least 2, got {n}")));
    }
    let mut rng = stream_rng(seed, Stream::Init);
    sample_sphere(&mut rng, n)
}

/// Uniform point on `S^{n−1}` from an existing generator.
pub fn sample_sphere<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Result<SphereVector> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        if l2_norm(&v) > 0.0 {
            return SphereVector::normalize(v);
        }
    }
}

/// The basin `S_ξ^(i±)` containing `h`, if any: `h_i ≠ 0` and
/// `h_i² ≥ (1 + ξ) ‖h_{∖i}‖∞²` (ratio `+∞` when the rest is zero).
///
/// For `ξ > 0` at most one index can qualify; an exact tie for the largest
/// magnitude yields `None`. For `ξ = 0` ties resolve to the lowest index.
pub fn region_membership(h: &SphereVector, xi: f64) -> Option<RegionLabel> {
    let v = h.as_slice();
    let mut best = 0;
    for (k, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = k;
        }
    }
    let top = v[best];
    let sign = Sign::of(top)?;
    let rest = v
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != best)
        .map(|(_, x)| x.abs())
        .fold(0.0, f64::max);
    let qualifies = if rest == 0.0 { true } else { top * top >= (1.0 + xi) * rest * rest };
    qualifies.then_some(RegionLabel { index: best, sign, xi })
}

/// `h(w) = (w, √(1 − ‖w‖²))` and its Jacobian `J = [I, −w/h_n]`
/// (`(n−1) × n`).
pub fn reparam(w: &[f64]) -> Result<(SphereVector, DMatrix<f64>)> {
    let h = h_of_w(w)?;
    let m = w.len();
    let hn = h.as_slice()[m];
    let jac = DMatrix::from_fn(m, m + 1, |r, c| {
        if c == m {
            -w[r] / hn
        } else if r == c {
            1.0
        } else {
            0.0
        }
    });
    Ok((h, jac))
}

pub fn h_of_w(w: &[f64]) -> Result<SphereVector> {
    let sq: f64 = w.iter().map(|x| x * x).sum();
    if !(sq < 1.0) {
        return Err(MsbdError::Domain(format!("chart needs ‖w‖ < 1, got {}", sq.sqrt())));
    }
    let mut h = w.to_vec();
    h.push((1.0 - sq).sqrt());
    Ok(SphereVector(h))
}

/// Inverse chart: the first `n − 1` coordinates, valid when `h_n > 0`.
pub fn w_of_h(h: &SphereVector) -> Result<Vec<f64>> {
    let v = h.as_slice();
    let last = *v.last().expect("non-empty sphere vector");
    if !(last > 0.0) {
        return Err(MsbdError::Domain(format!("chart needs h_n > 0, got {last}")));
    }
    Ok(v[..v.len() - 1].to_vec())
}

/// Signed permutation taking basin `(i, ±)` to `(n−1, +)`, so the chart
/// around `e_n` can be used for any basin. Returns the permuted vector.
pub fn to_basin_frame(h: &[f64], label: &RegionLabel) -> Vec<f64> {
    let n = h.len();
    let mut out = h.to_vec();
    out.swap(label.index, n - 1);
    let s = label.sign.value();
    out.iter_mut().for_each(|x| *x *= s);
    out
}

/// Inverse of [`to_basin_frame`].
pub fn from_basin_frame(h: &[f64], label: &RegionLabel) -> Vec<f64> {
    let n = h.len();
    let s = label.sign.value();
    let mut out: Vec<f64> = h.iter().map(|x| x * s).collect();
    out.swap(label.index, n - 1);
    out
}

/// `ξ₀ = 1 / (4 ln n)`.
pub fn default_xi0(n: usize) -> f64 {
    1.0 / (4.0 * (n as f64).ln())
}
