//! Distances that quotient out the shift and sign ambiguity, and the
//! recovery success test.

use num_complex::Complex64;

use crate::circulant::{conv_apply, l2_norm, Filter, FourierPlan, Shape};
use crate::error::{MsbdError, Result};
use crate::sphere::{Sign, SphereVector};
use crate::surrogate_loss::Preconditioner;

/// Score above which a recovery counts as successful.
pub const SUCCESS_THRESHOLD: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentReport {
    /// `min_{j,±} ‖g_ref ∓ S_j(g_hat)‖₂`.
    pub distance: f64,
    /// Flat shift index (for grids, `row * cols + col`).
    pub best_shift: usize,
    pub best_sign: Sign,
    /// `|⟨g_ref, S_j(g_hat)⟩| / (‖g_ref‖ ‖g_hat‖)` at the optimum.
    pub peak_ratio: f64,
}

/// `⟨a, S_j(b)⟩` for every shift `j`, via one FFT cross-correlation.
pub fn shifted_inner_products(shape: Shape, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = shape.len();
    if a.len() != n {
        return Err(MsbdError::dim(n, a.len()));
    }
    if b.len() != n {
        return Err(MsbdError::dim(n, b.len()));
    }
    let plan = FourierPlan::new(shape);
    let fa = plan.forward_real(a);
    let fb = plan.forward_real(b);
    let prod: Vec<Complex64> = fa.iter().zip(&fb).map(|(x, y)| x * y.conj()).collect();
    plan.inverse_to_real(prod)
}

/// Exhaustive minimum over all `2n` shift/sign pairs.
pub fn shift_sign_distance(g_hat: &[f64], g_ref: &[f64]) -> Result<AlignmentReport> {
    shift_sign_distance_with_shape(Shape::Line(g_ref.len()), g_hat, g_ref)
}

pub fn shift_sign_distance_with_shape(shape: Shape, g_hat: &[f64], g_ref: &[f64]) -> Result<AlignmentReport> {
    let corr = shifted_inner_products(shape, g_ref, g_hat)?;
    let mut best = (0usize, Sign::Plus, f64::NEG_INFINITY);
    for (j, &c) in corr.iter().enumerate() {
        for (sign, v) in [(Sign::Plus, c), (Sign::Minus, -c)] {
            if v > best.2 {
                best = (j, sign, v);
            }
        }
    }
    let (na, nb) = (l2_norm(g_ref), l2_norm(g_hat));
    // Recompute the winning distance directly; the expanded form
    // ‖a‖² + ‖b‖² − 2⟨a, S_j b⟩ loses half the digits near zero.
    let moved = shape.shift(g_hat, best.0);
    let s = best.1.value();
    let distance = g_ref
        .iter()
        .zip(&moved)
        .map(|(a, b)| (a - s * b).powi(2))
        .sum::<f64>()
        .sqrt();
    let denom = na * nb;
    Ok(AlignmentReport {
        distance,
        best_shift: best.0,
        best_sign: best.1,
        peak_ratio: if denom > 0.0 { (best.2 / denom).clamp(0.0, 1.0) } else { 0.0 },
    })
}

/// `‖v‖∞ / ‖v‖₂` of `v = C(g) ĝ_inv`, and whether it exceeds 0.99.
pub fn success_indicator(g_inv_hat: &[f64], g_true: &Filter) -> Result<(bool, f64)> {
    let v = conv_apply(g_true, g_inv_hat)?;
    let score = peak_to_energy(&v);
    Ok((score > SUCCESS_THRESHOLD, score))
}

/// `‖v‖∞ / ‖v‖₂`, zero for the zero vector.
pub fn peak_to_energy(v: &[f64]) -> f64 {
    let norm = l2_norm(v);
    if norm == 0.0 {
        return 0.0;
    }
    v.iter().map(|x| x.abs()).fold(0.0, f64::max) / norm
}

/// Distance of the normalized equalized filter `C(g) R h / ‖·‖` to the
/// nearest `±e_j`; lies in `[0, √2]`.
pub fn normalized_error(h: &SphereVector, r: Option<&Preconditioner>, g_true: &Filter) -> Result<f64> {
    let rh = match r {
        Some(r) => r.apply(h.as_slice())?,
        None => h.as_slice().to_vec(),
    };
    equalized_error(&rh, g_true)
}

/// As [`normalized_error`] for an already formed estimate `ĝ_inv`.
pub fn equalized_error(g_inv_hat: &[f64], g_true: &Filter) -> Result<f64> {
    let v = conv_apply(g_true, g_inv_hat)?;
    let norm = l2_norm(&v);
    if norm == 0.0 {
        return Ok(std::f64::consts::SQRT_2);
    }
    // ‖v/‖v‖ ∓ e_j‖² = 2 − 2 |v_j| / ‖v‖ at the best sign.
    let peak = v.iter().map(|x| x.abs()).fold(0.0, f64::max) / norm;
    Ok((2.0 - 2.0 * peak).max(0.0).sqrt())
}
