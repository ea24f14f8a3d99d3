//! Two-dimensional pipeline: block-circulant convolution of image planes,
//! per-channel blind recovery, and reconstruction of the image from the
//! recovered inverse filter.
//!
//! Here the image plays the role of the unknown filter and the blur kernels
//! are the sparse inputs. Pixel values are treated as linear intensities in
//! `[0, 1]` (no gamma handling).

use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::circulant::{convolve_with_shape, l2_norm, FourierPlan, Shape, DEFAULT_INVERTIBILITY_EPS};
use crate::error::{MsbdError, Result};
use crate::metrics::shifted_inner_products;
use crate::signal_model::{sample_bernoulli_gaussian, stream_rng, ObservationSet, Stream};
use crate::solver::{RecoveryResult, Solver, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Red,
    Green,
    Blue,
    Mono,
}

/// A `rows × cols` plane of real pixels, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    rows: usize,
    cols: usize,
    pixels: Vec<f64>,
    pub channel: Channel,
}

impl ImagePlane {
    pub fn new(rows: usize, cols: usize, pixels: Vec<f64>, channel: Channel) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(MsbdError::Parameter(format!("image planes need at least 2x2 pixels, got {rows}x{cols}")));
        }
        if pixels.len() != rows * cols {
            return Err(MsbdError::dim(rows * cols, pixels.len()));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(MsbdError::Parameter("image planes must have finite pixels".into()));
        }
        Ok(ImagePlane {
            rows,
            cols,
            pixels,
            channel,
        })
    }

    pub fn zeros(rows: usize, cols: usize, channel: Channel) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols], channel)
    }

    /// Unit impulse at `(r, c)`.
    pub fn delta(rows: usize, cols: usize, r: usize, c: usize) -> Result<Self> {
        let mut plane = Self::zeros(rows, cols, Channel::Mono)?;
        plane.pixels[(r % rows) * cols + c % cols] = 1.0;
        Ok(plane)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape(&self) -> Shape {
        Shape::Grid {
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.cols + c]
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().sum()
    }

    fn with_pixels(&self, pixels: Vec<f64>) -> ImagePlane {
        ImagePlane {
            rows: self.rows,
            cols: self.cols,
            pixels,
            channel: self.channel,
        }
    }

    /// Circular shift by `(dr, dc)`.
    pub fn shifted(&self, dr: isize, dc: isize) -> ImagePlane {
        self.with_pixels(crate::circulant::circular_shift_2d(&self.pixels, self.rows, self.cols, dr, dc))
    }

    pub fn scaled(&self, c: f64) -> ImagePlane {
        self.with_pixels(self.pixels.iter().map(|v| c * v).collect())
    }
}

fn check_same_shape(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(MsbdError::Shape {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    Ok(())
}

/// 2D circular convolution `g ⊛ x` via the 2D FFT. The result keeps `g`'s
/// channel tag.
pub fn conv2d_apply(g: &ImagePlane, x: &ImagePlane) -> Result<ImagePlane> {
    check_same_shape(g, x)?;
    let out = convolve_with_shape(g.shape(), &g.pixels, &x.pixels)?;
    Ok(g.with_pixels(out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelMode {
    /// Nonnegative kernels normalized to unit sum (motion blur).
    UnitSum,
    /// Raw Bernoulli-Gaussian kernels.
    BernoulliGaussian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelStack {
    pub kernels: Vec<ImagePlane>,
    pub mode: KernelMode,
}

impl KernelStack {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

/// `p` Bernoulli-Gaussian kernels of the given size.
pub fn bernoulli_gaussian_kernels(rows: usize, cols: usize, p: usize, theta: f64, seed: u64) -> Result<KernelStack> {
    let x = sample_bernoulli_gaussian(rows * cols, p, theta, seed)?;
    let kernels = x
        .columns()
        .iter()
        .map(|c| ImagePlane::new(rows, cols, c.clone(), Channel::Mono))
        .collect::<Result<_>>()?;
    Ok(KernelStack {
        kernels,
        mode: KernelMode::BernoulliGaussian,
    })
}

/// `image ⊛ x_i` for every kernel.
pub fn blur_with_kernels(image: &ImagePlane, kernels: &KernelStack) -> Result<Vec<ImagePlane>> {
    kernels.kernels.iter().map(|k| conv2d_apply(image, k)).collect()
}

/// Reads a kernel image, converts it to grayscale, embeds it centered at
/// the origin of a `rows × cols` canvas with wraparound, and normalizes it
/// to unit sum.
pub fn kernel_ingest(path: &Path, rows: usize, cols: usize) -> Result<ImagePlane> {
    let planes = read_png(path)?;
    let gray = to_grayscale(&planes)?;
    embed_kernel(&gray, rows, cols)
}

/// Centers a small kernel (given as its own plane or raw grid) on the
/// canvas origin and normalizes it to unit sum.
pub fn embed_kernel(kernel: &RawPlane, rows: usize, cols: usize) -> Result<ImagePlane> {
    if kernel.rows > rows || kernel.cols > cols {
        return Err(MsbdError::Shape {
            expected: (rows, cols),
            actual: (kernel.rows, kernel.cols),
        });
    }
    let mass: f64 = kernel.pixels.iter().sum();
    if !(mass > 0.0) || kernel.pixels.iter().any(|v| *v < 0.0) {
        return Err(MsbdError::DegenerateKernel);
    }
    let mut out = vec![0.0; rows * cols];
    let (cr, cc) = (kernel.rows / 2, kernel.cols / 2);
    for a in 0..kernel.rows {
        for b in 0..kernel.cols {
            let r = (a + rows - cr) % rows;
            let c = (b + cols - cc) % cols;
            out[r * cols + c] += kernel.pixels[a * kernel.cols + b] / mass;
        }
    }
    ImagePlane::new(rows, cols, out, Channel::Mono)
}

/// Pixel grid without the 2×2 minimum of [`ImagePlane`]; used for decoded
/// files, which may be as small as one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPlane {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
    pub channel: Channel,
}

/// Decodes a PNG into one (gray) or three (RGB) planes with values in
/// `[0, 1]`. Alpha is dropped.
pub fn read_png(path: &Path) -> Result<Vec<RawPlane>> {
    let img = image::open(path).map_err(|e| MsbdError::io(path, e))?;
    let (cols, rows) = (img.width() as usize, img.height() as usize);
    let plane = |data: Vec<f64>, channel| RawPlane {
        rows,
        cols,
        pixels: data,
        channel,
    };
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let mut chans = [Vec::new(), Vec::new(), Vec::new()];
        for px in rgb.pixels() {
            for (ch, v) in chans.iter_mut().zip(px.0) {
                ch.push(v as f64 / 255.0);
            }
        }
        let [r, g, b] = chans;
        Ok(vec![
            plane(r, Channel::Red),
            plane(g, Channel::Green),
            plane(b, Channel::Blue),
        ])
    } else {
        let gray = img.to_luma8();
        Ok(vec![plane(gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect(), Channel::Mono)])
    }
}

/// Rec. 601 luma of an RGB triple; gray input passes through.
pub fn to_grayscale(planes: &[RawPlane]) -> Result<RawPlane> {
    match planes {
        [gray] => Ok(RawPlane {
            channel: Channel::Mono,
            ..gray.clone()
        }),
        [r, g, b] => Ok(RawPlane {
            rows: r.rows,
            cols: r.cols,
            pixels: (0..r.pixels.len())
                .map(|k| 0.299 * r.pixels[k] + 0.587 * g.pixels[k] + 0.114 * b.pixels[k])
                .collect(),
            channel: Channel::Mono,
        }),
        _ => Err(MsbdError::Parameter(format!("expected 1 or 3 planes, got {}", planes.len()))),
    }
}

impl TryFrom<RawPlane> for ImagePlane {
    type Error = MsbdError;

    fn try_from(raw: RawPlane) -> Result<ImagePlane> {
        ImagePlane::new(raw.rows, raw.cols, raw.pixels, raw.channel)
    }
}

/// Writes one (gray) or three (RGB) planes as an 8-bit PNG, clamping to
/// `[0, 1]`.
pub fn write_png(path: &Path, planes: &[ImagePlane]) -> Result<()> {
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let first = planes
        .first()
        .ok_or_else(|| MsbdError::Parameter("nothing to write".into()))?;
    for p in planes {
        check_same_shape(first, p)?;
    }
    let (w, h) = (first.cols as u32, first.rows as u32);
    let res = match planes {
        [gray] => image::GrayImage::from_raw(w, h, gray.pixels.iter().map(|v| quant(*v)).collect())
            .expect("buffer size matches")
            .save(path),
        [r, g, b] => {
            let buf = (0..r.pixels.len())
                .flat_map(|k| [quant(r.pixels[k]), quant(g.pixels[k]), quant(b.pixels[k])])
                .collect();
            image::RgbImage::from_raw(w, h, buf).expect("buffer size matches").save(path)
        }
        _ => return Err(MsbdError::Parameter(format!("expected 1 or 3 planes, got {}", planes.len()))),
    };
    res.map_err(|e| MsbdError::io(path, e))
}

/// Jointly maps planes affinely onto `[0, 1]` for display.
pub fn normalize_for_display(planes: &[ImagePlane]) -> Vec<ImagePlane> {
    let lo = planes.iter().flat_map(|p| p.pixels.iter().copied()).fold(f64::INFINITY, f64::min);
    let hi = planes.iter().flat_map(|p| p.pixels.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    planes
        .iter()
        .map(|p| p.with_pixels(p.pixels.iter().map(|v| (v - lo) / span).collect()))
        .collect()
}

/// A smooth positive test scene: a few Gaussian blobs and a bright
/// rectangle over a dim background, plus faint seeded texture so that no
/// frequency vanishes.
pub fn synthetic_test_image(rows: usize, cols: usize, seed: u64) -> Result<ImagePlane> {
    let mut rng = stream_rng(seed, Stream::Sampling);
    let (rf, cf) = (rows as f64, cols as f64);
    let blobs = [(0.3, 0.3, 0.12, 0.8), (0.65, 0.6, 0.18, 0.6), (0.25, 0.75, 0.08, 0.9)];
    let mut pixels = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r as f64 / rf, c as f64 / cf);
            let mut v = 0.1;
            for (by, bx, s, a) in blobs {
                v += a * (-((y - by).powi(2) + (x - bx).powi(2)) / (2.0 * s * s)).exp();
            }
            if (0.6..0.85).contains(&y) && (0.15..0.4).contains(&x) {
                v += 0.5;
            }
            v += 0.05 * rng.random::<f64>();
            pixels.push(v);
        }
    }
    ImagePlane::new(rows, cols, pixels, Channel::Mono)
}

#[derive(Debug, Clone)]
pub struct ChannelRecovery {
    pub channel: Channel,
    /// Scaled reconstruction before cross-channel alignment.
    pub image: ImagePlane,
    pub solve: RecoveryResult,
}

#[derive(Debug, Clone)]
pub struct DeblurOutput {
    pub recoveries: Vec<ChannelRecovery>,
    /// Channels shifted and sign-matched to the first one.
    pub aligned: Vec<ImagePlane>,
    /// Sum of the aligned channels.
    pub combined: ImagePlane,
}

/// `IFFT(1 / FFT(v))`, refusing bins below `rel_eps · max |FFT(v)|`.
pub fn spectral_inverse(shape: Shape, v: &[f64], rel_eps: f64) -> Result<Vec<f64>> {
    let plan = FourierPlan::new(shape);
    let spec = plan.forward_real(v);
    let max = spec.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let min = spec.iter().map(|c| c.norm()).fold(f64::INFINITY, f64::min);
    if !(min > rel_eps * max) {
        return Err(MsbdError::Reconstruction(format!(
            "spectrum of R h has a near-zero bin ({min:e} <= {:e})",
            rel_eps * max
        )));
    }
    let inv: Vec<Complex64> = spec.iter().map(|c| c.inv()).collect();
    plan.inverse_to_real(inv)
}

/// Recovers one channel from its blurred copies.
pub fn deblur_plane(observations: &[ImagePlane], mode: KernelMode, cfg: &SolverConfig) -> Result<ChannelRecovery> {
    let first = observations
        .first()
        .ok_or_else(|| MsbdError::Parameter("need at least one observation per channel".into()))?;
    for o in observations {
        check_same_shape(first, o)?;
    }
    let shape = first.shape();
    let n = shape.len();
    let y = ObservationSet::new(shape, observations.iter().map(|o| o.pixels.clone()).collect())?;
    let solve = Solver::new(&y, cfg)?.run_with_restarts()?;
    let mut est = spectral_inverse(shape, &solve.g_inv_hat, DEFAULT_INVERTIBILITY_EPS)?;

    let p = observations.len() as f64;
    let scale = match mode {
        KernelMode::BernoulliGaussian => {
            // E‖x ⊛ g‖² = θ n ‖g‖² for BG(θ) kernels; fix the sign so the
            // image has positive mean.
            let energy = observations.iter().map(|o| o.pixels.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / p;
            let target = (energy / (cfg.theta * n as f64)).sqrt();
            let norm = l2_norm(&est);
            if norm == 0.0 {
                return Err(MsbdError::Reconstruction("recovered image is zero".into()));
            }
            let sign = if est.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            sign * target / norm
        }
        KernelMode::UnitSum => {
            // Unit-sum kernels preserve total intensity.
            let target = observations.iter().map(|o| o.sum()).sum::<f64>() / p;
            let mass: f64 = est.iter().sum();
            if mass.abs() <= f64::EPSILON * l2_norm(&est) * n as f64 {
                return Err(MsbdError::Reconstruction("recovered image has zero mass".into()));
            }
            target / mass
        }
    };
    est.iter_mut().for_each(|v| *v *= scale);
    Ok(ChannelRecovery {
        channel: first.channel,
        image: first.with_pixels(est),
        solve,
    })
}

/// Shift and sign of `plane` that best match `reference`, as the flat
/// shift index and `±1`.
pub fn align_to(reference: &ImagePlane, plane: &ImagePlane) -> Result<(usize, f64)> {
    check_same_shape(reference, plane)?;
    let corr = shifted_inner_products(reference.shape(), &reference.pixels, &plane.pixels)?;
    let mut best = (0, 1.0, f64::NEG_INFINITY);
    for (j, c) in corr.iter().enumerate() {
        if c.abs() > best.2 {
            best = (j, c.signum(), c.abs());
        }
    }
    Ok((best.0, if best.1 == 0.0 { 1.0 } else { best.1 }))
}

/// Per-channel blind recovery, alignment to the first channel, and sum.
/// Channels are solved independently and in parallel.
pub fn deblur_channels(channels: &[Vec<ImagePlane>], mode: KernelMode, cfg: &SolverConfig) -> Result<DeblurOutput> {
    if channels.is_empty() {
        return Err(MsbdError::Parameter("no channels given".into()));
    }
    let recoveries: Vec<ChannelRecovery> = channels
        .par_iter()
        .map(|obs| deblur_plane(obs, mode, cfg))
        .collect::<Result<_>>()?;
    let reference = &recoveries[0].image;
    let mut aligned = Vec::with_capacity(recoveries.len());
    for rec in &recoveries {
        check_same_shape(reference, &rec.image)?;
        let (shift, sign) = align_to(reference, &rec.image)?;
        let moved = rec.image.shape().shift(&rec.image.pixels, shift);
        aligned.push(rec.image.with_pixels(moved.into_iter().map(|v| sign * v).collect()));
    }
    let mut combined = vec![0.0; reference.pixels.len()];
    for a in &aligned {
        combined.iter_mut().zip(&a.pixels).for_each(|(s, v)| *s += v);
    }
    let combined = ImagePlane {
        channel: if aligned.len() == 1 { aligned[0].channel } else { Channel::Mono },
        ..reference.with_pixels(combined)
    };
    Ok(DeblurOutput {
        recoveries,
        aligned,
        combined,
    })
}

/// `min_{shift, c} ‖truth − c S(estimate)‖ / ‖truth‖`, the scale `c`
/// absorbing the sign.
pub fn aligned_relative_error(estimate: &ImagePlane, truth: &ImagePlane) -> Result<f64> {
    check_same_shape(truth, estimate)?;
    let norm_t = l2_norm(&truth.pixels);
    let norm_e2: f64 = estimate.pixels.iter().map(|v| v * v).sum();
    if norm_t == 0.0 {
        return Err(MsbdError::Parameter("reference image is zero".into()));
    }
    if norm_e2 == 0.0 {
        return Ok(1.0);
    }
    let (shift, _) = align_to(truth, estimate)?;
    let moved = truth.shape().shift(&estimate.pixels, shift);
    let c = truth.pixels.iter().zip(&moved).map(|(a, b)| a * b).sum::<f64>() / norm_e2;
    let resid: f64 = truth.pixels.iter().zip(&moved).map(|(a, b)| (a - c * b).powi(2)).sum();
    Ok(resid.sqrt() / norm_t)
}

/// `‖v‖∞ / ‖v‖₂` of a plane.
pub fn peak_ratio(plane: &ImagePlane) -> f64 {
    crate::metrics::peak_to_energy(&plane.pixels)
}
