//! Circulant linear algebra backed by the FFT.
//!
//! A circulant matrix `C(g)` has `g` as its first column and every further
//! column is the previous one rotated down by one entry, so `C(g) x` is the
//! circular convolution `g ⊛ x`. The unnormalized DFT diagonalizes it:
//! `F C(g) F⁻¹ = diag(ĝ)`. Everything here works on that identity, both for
//! length-`n` signals and for `rows × cols` planes (block-circulant with
//! circulant blocks, diagonalized by the 2D DFT).

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{MsbdError, Result};

/// Default relative invertibility threshold on spectral magnitudes.
pub const DEFAULT_INVERTIBILITY_EPS: f64 = 1e-10;

/// Tolerated imaginary residue after an inverse transform of a real product,
/// relative to the norm of the real part.
const IMAG_RESIDUE_TOL: f64 = 1e-9;

/// Index geometry of a circulant operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    /// 1D circulant of length `n`.
    Line(usize),
    /// 2D circulant over a `rows × cols` plane, stored row-major.
    Grid { rows: usize, cols: usize },
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Line(n) => n,
            Shape::Grid { rows, cols } => rows * cols,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index of the "negated frequency" of `k`, i.e. the bin holding
    /// the conjugate of bin `k` for a real signal.
    pub fn mirror(&self, k: usize) -> usize {
        match *self {
            Shape::Line(n) => (n - k) % n,
            Shape::Grid { rows, cols } => {
                let (r, c) = (k / cols, k % cols);
                ((rows - r) % rows) * cols + (cols - c) % cols
            }
        }
    }

    /// Circularly shifts a flat vector laid out according to this shape.
    /// For grids, `shift` is decoded as `(shift / cols, shift % cols)`.
    pub fn shift(&self, x: &[f64], shift: usize) -> Vec<f64> {
        match *self {
            Shape::Line(_) => circular_shift(x, shift as isize),
            Shape::Grid { rows, cols } => {
                circular_shift_2d(x, rows, cols, (shift / cols) as isize, (shift % cols) as isize)
            }
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Line(n) => write!(f, "{n}"),
            Shape::Grid { rows, cols } => write!(f, "{rows}x{cols}"),
        }
    }
}

/// Forward/inverse DFT plans for one [`Shape`].
///
/// Plans are immutable and shareable across threads; scratch space is
/// allocated per call.
#[derive(Clone)]
pub struct FourierPlan {
    shape: Shape,
    fwd_a: Arc<dyn Fft<f64>>,
    inv_a: Arc<dyn Fft<f64>>,
    // Column transforms, present only for grids.
    fwd_b: Option<Arc<dyn Fft<f64>>>,
    inv_b: Option<Arc<dyn Fft<f64>>>,
}

impl fmt::Debug for FourierPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FourierPlan").field("shape", &self.shape).finish()
    }
}

impl FourierPlan {
    pub fn new(shape: Shape) -> Self {
        let mut planner = FftPlanner::<f64>::new();
        match shape {
            Shape::Line(n) => FourierPlan {
                shape,
                fwd_a: planner.plan_fft_forward(n),
                inv_a: planner.plan_fft_inverse(n),
                fwd_b: None,
                inv_b: None,
            },
            Shape::Grid { rows, cols } => FourierPlan {
                shape,
                fwd_a: planner.plan_fft_forward(cols),
                inv_a: planner.plan_fft_inverse(cols),
                fwd_b: Some(planner.plan_fft_forward(rows)),
                inv_b: Some(planner.plan_fft_inverse(rows)),
            },
        }
    }

    pub fn line(n: usize) -> Self {
        Self::new(Shape::Line(n))
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shape.is_empty()
    }

    fn transform(&self, buf: &mut [Complex64], row_fft: &Arc<dyn Fft<f64>>, col_fft: Option<&Arc<dyn Fft<f64>>>) {
        debug_assert_eq!(buf.len(), self.len());
        match self.shape {
            Shape::Line(_) => row_fft.process(buf),
            Shape::Grid { rows, cols } => {
                for row in buf.chunks_exact_mut(cols) {
                    row_fft.process(row);
                }
                let col_fft = col_fft.expect("grid plan carries column transforms");
                let mut column = vec![Complex64::new(0.0, 0.0); rows];
                for c in 0..cols {
                    for r in 0..rows {
                        column[r] = buf[r * cols + c];
                    }
                    col_fft.process(&mut column);
                    for r in 0..rows {
                        buf[r * cols + c] = column[r];
                    }
                }
            }
        }
    }

    /// Unnormalized forward DFT, in place.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.fwd_a, self.fwd_b.as_ref());
    }

    /// Unnormalized inverse DFT, in place (caller divides by `n`).
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.transform(buf, &self.inv_a, self.inv_b.as_ref());
    }

    /// Forward DFT of a real vector.
    pub fn forward_real(&self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Normalized inverse DFT of a spectrum that should describe a real
    /// vector. Fails with [`MsbdError::Numerical`] if the imaginary residue
    /// is not round-off.
    pub fn inverse_to_real(&self, mut spec: Vec<Complex64>) -> Result<Vec<f64>> {
        self.inverse(&mut spec);
        let scale = 1.0 / self.len() as f64;
        let mut re_sq = 0.0;
        let mut im_sq = 0.0;
        let out: Vec<f64> = spec
            .iter()
            .map(|c| {
                re_sq += c.re * c.re;
                im_sq += c.im * c.im;
                c.re * scale
            })
            .collect();
        let (re, im) = (re_sq.sqrt(), im_sq.sqrt());
        if !(im <= IMAG_RESIDUE_TOL * re + 1e-12 * (re + im)) {
            return Err(MsbdError::Numerical(format!(
                "imaginary residue {:e} after inverse transform exceeds tolerance (real norm {:e})",
                im * scale,
                re * scale
            )));
        }
        Ok(out)
    }

    /// Normalized inverse DFT keeping only the real part, with no residue
    /// check. Used in hot loops whose inputs are conjugate-symmetric by
    /// construction.
    pub fn inverse_real_part(&self, spec: &mut [Complex64], out: &mut [f64]) {
        self.inverse(spec);
        let scale = 1.0 / self.len() as f64;
        for (o, c) in out.iter_mut().zip(spec.iter()) {
            *o = c.re * scale;
        }
    }
}

/// A real filter of length `n ≥ 2` with finite coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    coeffs: Vec<f64>,
}

impl Filter {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.len() < 2 {
            return Err(MsbdError::Parameter(format!(
                "filter length must be at least 2, got {}",
                coeffs.len()
            )));
        }
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(MsbdError::Parameter(format!("filter coefficient {i} is not finite")));
        }
        Ok(Filter { coeffs })
    }

    /// The unit impulse `e_1` (index 0), i.e. `C(g) = I`.
    pub fn delta(n: usize) -> Result<Self> {
        Self::new(unit_vector(n, 0))
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    /// Copy rescaled to unit Euclidean norm.
    pub fn normalized(&self) -> Result<Filter> {
        let norm = l2_norm(&self.coeffs);
        if norm == 0.0 {
            return Err(MsbdError::Parameter("cannot normalize a zero filter".into()));
        }
        Filter::new(self.coeffs.iter().map(|c| c / norm).collect())
    }
}

/// Unnormalized forward DFT of a filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub values: Vec<Complex64>,
}

impl Spectrum {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm()).collect()
    }

    /// Largest deviation from `values[k] = conj(values[n-k])`.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let n = self.values.len();
        (0..n)
            .map(|k| (self.values[k] - self.values[(n - k) % n].conj()).norm())
            .fold(0.0, f64::max)
    }
}

/// `C(g) x` via the FFT.
pub fn conv_apply(g: &Filter, x: &[f64]) -> Result<Vec<f64>> {
    circular_convolve(g.coeffs(), x)
}

/// Circular convolution `a ⊛ b` of two equal-length real vectors.
pub fn circular_convolve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    convolve_with_shape(Shape::Line(a.len()), a, b)
}

/// Circular convolution under an arbitrary [`Shape`] (1D or 2D).
pub fn convolve_with_shape(shape: Shape, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let n = shape.len();
    if a.len() != n {
        return Err(MsbdError::dim(n, a.len()));
    }
    if b.len() != n {
        return Err(MsbdError::dim(n, b.len()));
    }
    let plan = FourierPlan::new(shape);
    let fa = plan.forward_real(a);
    let mut fb = plan.forward_real(b);
    for (x, y) in fb.iter_mut().zip(&fa) {
        *x *= y;
    }
    plan.inverse_to_real(fb)
}

/// `[S_j(x)]_k = x_{k-j mod n}`.
pub fn circular_shift(x: &[f64], j: isize) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let j = j.rem_euclid(n as isize) as usize;
    (0..n).map(|k| x[(k + n - j) % n]).collect()
}

/// 2D circular shift of a row-major plane: `out[r][c] = x[r-dr][c-dc]`.
pub fn circular_shift_2d(x: &[f64], rows: usize, cols: usize, dr: isize, dc: isize) -> Vec<f64> {
    debug_assert_eq!(x.len(), rows * cols);
    let dr = dr.rem_euclid(rows as isize) as usize;
    let dc = dc.rem_euclid(cols as isize) as usize;
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let src_r = (r + rows - dr) % rows;
        for c in 0..cols {
            out[r * cols + c] = x[src_r * cols + (c + cols - dc) % cols];
        }
    }
    out
}

pub fn spectrum(g: &Filter) -> Spectrum {
    Spectrum {
        values: FourierPlan::line(g.len()).forward_real(g.coeffs()),
    }
}

fn check_invertible(mags: &[f64], rel_eps: f64) -> Result<(f64, f64)> {
    let max = mags.iter().cloned().fold(0.0, f64::max);
    let min = mags.iter().cloned().fold(f64::INFINITY, f64::min);
    let threshold = rel_eps * max;
    if !(min > threshold) {
        return Err(MsbdError::NonInvertibleFilter {
            min_magnitude: min,
            threshold,
        });
    }
    Ok((min, max))
}

/// The raw inverse filter `g_inv` with `C(g_inv) C(g) = I`, using the
/// default invertibility threshold.
pub fn inverse_filter(g: &Filter) -> Result<Filter> {
    inverse_filter_with(g, DEFAULT_INVERTIBILITY_EPS)
}

/// As [`inverse_filter`] with an explicit threshold relative to `max |ĝ|`.
pub fn inverse_filter_with(g: &Filter, rel_eps: f64) -> Result<Filter> {
    let spec = spectrum(g);
    check_invertible(&spec.magnitudes(), rel_eps)?;
    let plan = FourierPlan::line(g.len());
    let inv: Vec<Complex64> = spec.values.iter().map(|c| c.inv()).collect();
    Filter::new(plan.inverse_to_real(inv)?)
}

/// `κ = max|ĝ| / min|ĝ|`.
pub fn condition_number(g: &Filter) -> Result<f64> {
    let (min, max) = check_invertible(&spectrum(g).magnitudes(), DEFAULT_INVERTIBILITY_EPS)?;
    Ok(max / min)
}

/// Dense `n × n` circulant matrix with `g` as first column. Test oracle only.
pub fn dense_circulant(g: &[f64]) -> DMatrix<f64> {
    let n = g.len();
    DMatrix::from_fn(n, n, |r, c| g[(r + n - c) % n])
}

/// Dense block-circulant matrix of the 2D circular convolution with `g`
/// over a row-major `rows × cols` plane. Test oracle only.
pub fn dense_circulant_2d(g: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    let n = rows * cols;
    DMatrix::from_fn(n, n, |a, b| {
        let (ar, ac) = (a / cols, a % cols);
        let (br, bc) = (b / cols, b % cols);
        g[((ar + rows - br) % rows) * cols + (ac + cols - bc) % cols]
    })
}

pub fn unit_vector(n: usize, i: usize) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[i] = 1.0;
    e
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
