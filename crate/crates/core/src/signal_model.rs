//! Synthetic data: Bernoulli-Gaussian sparse inputs, filters with a
//! prescribed condition number, and circulant observations.
//!
//! All randomness comes from ChaCha8 streams keyed by a 64-bit seed. Each
//! kind of draw uses its own stream of the same seed (see [`Stream`]), so
//! changing the number of inputs never perturbs the filter and vice versa.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::circulant::{FourierPlan, Filter, Shape};
use crate::error::{MsbdError, Result};
use crate::numfmt::g17;

/// Independent random streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Filter = 1,
    Inputs = 2,
    Noise = 3,
    Init = 4,
    Sampling = 5,
}

/// ChaCha8 generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Sparse inputs `x_1..x_p`, each of length `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseInputs {
    columns: Vec<Vec<f64>>,
    pub theta: f64,
    pub seed: u64,
}

impl SparseInputs {
    /// Wraps explicit input vectors (e.g. for hand-built instances).
    pub fn from_columns(columns: Vec<Vec<f64>>, theta: f64, seed: u64) -> Result<Self> {
        let n = columns.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = columns.iter().find(|c| c.len() != n) {
            return Err(MsbdError::dim(n, bad.len()));
        }
        Ok(SparseInputs { columns, theta, seed })
    }

    pub fn n(&self) -> usize {
        self.columns.first().map(Vec::len).unwrap_or(0)
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn nonzero_fraction(&self) -> f64 {
        let total = self.n() * self.p();
        let nz = self.columns.iter().flatten().filter(|v| **v != 0.0).count();
        nz as f64 / total as f64
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(MsbdError::Parameter(format!("theta must lie in (0, 1], got {theta}")));
    }
    Ok(())
}

/// i.i.d. `Bernoulli(θ) · N(0, 1)` entries. `θ = 1` is accepted as the
/// fully dense limit.
pub fn sample_bernoulli_gaussian(n: usize, p: usize, theta: f64, seed: u64) -> Result<SparseInputs> {
    check_theta(theta)?;
    if n == 0 || p == 0 {
        return Err(MsbdError::Parameter("n and p must be positive".into()));
    }
    let mut rng = stream_rng(seed, Stream::Inputs);
    let columns = (0..p)
        .map(|_| {
            (0..n)
                .map(|_| {
                    let active = rng.random::<f64>() < theta;
                    let z: f64 = rng.sample(StandardNormal);
                    if active {
                        z
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    Ok(SparseInputs { columns, theta, seed })
}

/// A synthesized filter together with the spectral gains that were drawn.
#[derive(Debug, Clone)]
pub struct SynthesizedFilter {
    pub filter: Filter,
    /// `|ĝ_k|` for every bin `k` (0-based), mirrors included.
    pub gains: Vec<f64>,
}

impl SynthesizedFilter {
    /// Ratio of the largest to the smallest drawn gain.
    pub fn gain_ratio(&self) -> f64 {
        let max = self.gains.iter().cloned().fold(0.0, f64::max);
        let min = self.gains.iter().cloned().fold(f64::INFINITY, f64::min);
        max / min
    }
}

/// Random real filter whose DFT gains are i.i.d. `Uniform[1, κ]`.
///
/// Index map (0-based bins `k`): bin 0 is real and positive; for even `n`
/// bin `n/2` is real with a uniformly random sign; every other bin
/// `1 ≤ k < n/2` (or `≤ (n-1)/2` for odd `n`) gets a uniform phase in
/// `[0, 2π)` and bin `n-k` is set to its conjugate. With 1-based indices
/// this is `ĝ_j = conj(ĝ_{n+2-j})`.
pub fn synthesize_filter(n: usize, kappa: f64, seed: u64) -> Result<Filter> {
    synthesize_filter_with_gains(n, kappa, seed).map(|s| s.filter)
}

pub fn synthesize_filter_with_gains(n: usize, kappa: f64, seed: u64) -> Result<SynthesizedFilter> {
    if !(kappa >= 1.0) || !kappa.is_finite() {
        return Err(MsbdError::Parameter(format!("kappa must be finite and >= 1, got {kappa}")));
    }
    if n < 2 {
        return Err(MsbdError::Parameter(format!("n must be at least 2, got {n}")));
    }
    let mut rng = stream_rng(seed, Stream::Filter);
    let gain = |rng: &mut ChaCha8Rng| 1.0 + (kappa - 1.0) * rng.random::<f64>();

    let mut spec = vec![Complex64::new(0.0, 0.0); n];
    spec[0] = Complex64::new(gain(&mut rng), 0.0);
    let half = (n - 1) / 2;
    for k in 1..=half {
        let g = gain(&mut rng);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        spec[k] = Complex64::from_polar(g, phase);
        spec[n - k] = spec[k].conj();
    }
    if n % 2 == 0 {
        let g = gain(&mut rng);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        spec[n / 2] = Complex64::new(sign * g, 0.0);
    }
    let gains = spec.iter().map(|c| c.norm()).collect();
    let coeffs = FourierPlan::line(n).inverse_to_real(spec)?;
    Ok(SynthesizedFilter {
        filter: Filter::new(coeffs)?,
        gains,
    })
}

/// Where an observation set came from.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub filter: Filter,
    pub inputs: SparseInputs,
    pub noise_sigma: f64,
}

/// Observations `y_1..y_p` sharing one circulant geometry.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    shape: Shape,
    columns: Vec<Vec<f64>>,
    pub theta: Option<f64>,
    pub seed: Option<u64>,
    pub provenance: Option<Provenance>,
}

impl ObservationSet {
    pub fn new(shape: Shape, columns: Vec<Vec<f64>>) -> Result<Self> {
        if columns.is_empty() {
            return Err(MsbdError::Parameter("need at least one observation".into()));
        }
        if let Some(bad) = columns.iter().find(|c| c.len() != shape.len()) {
            return Err(MsbdError::dim(shape.len(), bad.len()));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(MsbdError::Parameter("observations must be finite".into()));
        }
        Ok(ObservationSet {
            shape,
            columns,
            theta: None,
            seed: None,
            provenance: None,
        })
    }

    pub fn line(columns: Vec<Vec<f64>>) -> Result<Self> {
        let n = columns.first().map(Vec::len).unwrap_or(0);
        Self::new(Shape::Line(n), columns)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape.len()
    }

    pub fn p(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    /// Copy with every observation multiplied by `c`.
    pub fn scaled(&self, c: f64) -> ObservationSet {
        let mut out = self.clone();
        for v in out.columns.iter_mut().flatten() {
            *v *= c;
        }
        out
    }

    /// Writes the set as text: two `#` header lines, then one
    /// comma-separated row per observation (row-major `p × n`).
    ///
    /// ```text
    /// # msbd-observations v1
    /// # n=8 p=2 shape=8 theta=0.29999999999999999 seed=7
    /// 0.1,0,...
    /// ```
    /// `shape` is `n` or `RxC`; `theta`/`seed` are `-` when unknown.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("# msbd-observations v1\n");
        let theta = self.theta.map(g17).unwrap_or_else(|| "-".into());
        let seed = self.seed.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "# n={} p={} shape={} theta={} seed={}",
            self.n(),
            self.p(),
            self.shape,
            theta,
            seed
        );
        for col in &self.columns {
            let row: Vec<String> = col.iter().map(|v| g17(*v)).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let magic = lines.next().unwrap_or("");
        if magic.trim() != "# msbd-observations v1" {
            return Err(MsbdError::Parse("missing observation file header".into()));
        }
        let meta = lines
            .next()
            .and_then(|l| l.strip_prefix('#'))
            .ok_or_else(|| MsbdError::Parse("missing metadata line".into()))?;
        let mut n = None;
        let mut p = None;
        let mut shape = None;
        let mut theta = None;
        let mut seed = None;
        for kv in meta.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| MsbdError::Parse(format!("bad metadata entry {kv:?}")))?;
            let bad = |_| MsbdError::Parse(format!("bad value for {k}: {v:?}"));
            match k {
                "n" => n = Some(v.parse::<usize>().map_err(bad)?),
                "p" => p = Some(v.parse::<usize>().map_err(bad)?),
                "shape" => shape = Some(parse_shape(v)?),
                "theta" if v != "-" => {
                    theta = Some(v.parse::<f64>().map_err(|_| MsbdError::Parse(format!("bad theta {v:?}")))?)
                }
                "seed" if v != "-" => {
                    seed = Some(v.parse::<u64>().map_err(|_| MsbdError::Parse(format!("bad seed {v:?}")))?)
                }
                _ => {}
            }
        }
        let n = n.ok_or_else(|| MsbdError::Parse("metadata lacks n".into()))?;
        let p = p.ok_or_else(|| MsbdError::Parse("metadata lacks p".into()))?;
        let shape = shape.unwrap_or(Shape::Line(n));
        if shape.len() != n {
            return Err(MsbdError::Parse(format!("shape {shape} does not have {n} entries")));
        }
        let mut columns = Vec::with_capacity(p);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let row = line
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| MsbdError::Parse(format!("bad number in row {}: {e}", columns.len())))?;
            columns.push(row);
        }
        if columns.len() != p {
            return Err(MsbdError::Parse(format!("expected {p} rows, found {}", columns.len())));
        }
        let mut set = ObservationSet::new(shape, columns)?;
        set.theta = theta;
        set.seed = seed;
        Ok(set)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| MsbdError::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MsbdError::io(path, e))?;
        Self::from_csv_str(&text)
    }
}

fn parse_shape(v: &str) -> Result<Shape> {
    let bad = || MsbdError::Parse(format!("bad shape {v:?}"));
    match v.split_once('x') {
        Some((r, c)) => Ok(Shape::Grid {
            rows: r.parse().map_err(|_| bad())?,
            cols: c.parse().map_err(|_| bad())?,
        }),
        None => Ok(Shape::Line(v.parse().map_err(|_| bad())?)),
    }
}

/// `y_i = C(g) x_i + σ w_i` with `w_i` i.i.d. standard normal drawn from
/// the inputs' seed on the noise stream.
pub fn generate_observations(g: &Filter, inputs: &SparseInputs, noise_sigma: f64) -> Result<ObservationSet> {
    if !(noise_sigma >= 0.0) {
        return Err(MsbdError::Parameter(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let n = g.len();
    if inputs.n() != n {
        return Err(MsbdError::dim(n, inputs.n()));
    }
    let plan = FourierPlan::line(n);
    let g_hat = plan.forward_real(g.coeffs());
    let mut rng = stream_rng(inputs.seed, Stream::Noise);
    let mut columns = Vec::with_capacity(inputs.p());
    for x in inputs.columns() {
        let mut spec = plan.forward_real(x);
        for (s, gk) in spec.iter_mut().zip(&g_hat) {
            *s *= gk;
        }
        let mut y = plan.inverse_to_real(spec)?;
        if noise_sigma > 0.0 {
            for v in &mut y {
                let w: f64 = rng.sample(StandardNormal);
                *v += noise_sigma * w;
            }
        }
        columns.push(y);
    }
    let mut set = ObservationSet::new(Shape::Line(n), columns)?;
    set.theta = Some(inputs.theta);
    set.seed = Some(inputs.seed);
    set.provenance = Some(Provenance {
        filter: g.clone(),
        inputs: inputs.clone(),
        noise_sigma,
    });
    Ok(set)
}

/// Spectral deviation `max_k |λ_k − 1|` of the circulant matrix
/// `(1/(θnp)) Σ C(x_i)ᵀ C(x_i)` from the identity.
pub fn input_covariance_deviation(inputs: &SparseInputs) -> f64 {
    let (n, p) = (inputs.n(), inputs.p());
    let plan = FourierPlan::line(n);
    let mut acc = vec![0.0; n];
    for x in inputs.columns() {
        for (a, c) in acc.iter_mut().zip(plan.forward_real(x)) {
            *a += c.norm_sqr();
        }
    }
    let scale = 1.0 / (inputs.theta * (n * p) as f64);
    acc.iter().map(|a| (a * scale - 1.0).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circulant::{condition_number, dense_circulant, l2_norm, unit_vector};

    #[test]
    fn dense_limit_has_no_zeros() {
        let x = sample_bernoulli_gaussian(20, 10, 1.0, 5).unwrap();
        assert!(x.columns().iter().flatten().all(|v| *v != 0.0));
    }

    #[test]
    fn sampling_is_deterministic() {
        let a = sample_bernoulli_gaussian(16, 8, 0.3, 99).unwrap();
        let b = sample_bernoulli_gaussian(16, 8, 0.3, 99).unwrap();
        assert_eq!(a, b);
        let c = sample_bernoulli_gaussian(16, 8, 0.3, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn activation_fraction_within_binomial_bounds() {
        let x = sample_bernoulli_gaussian(1000, 100, 0.3, 11).unwrap();
        let sigma = (0.3f64 * 0.7 / 1e5).sqrt();
        let frac = x.nonzero_fraction();
        assert!((frac - 0.3).abs() <= 5.0 * sigma, "fraction {frac}");
    }

    #[test]
    fn theta_out_of_range_is_rejected() {
        assert!(matches!(sample_bernoulli_gaussian(4, 4, 0.0, 1), Err(MsbdError::Parameter(_))));
        assert!(matches!(sample_bernoulli_gaussian(4, 4, 1.5, 1), Err(MsbdError::Parameter(_))));
        assert!(matches!(sample_bernoulli_gaussian(4, 4, f64::NAN, 1), Err(MsbdError::Parameter(_))));
    }

    #[test]
    fn flat_gains_when_kappa_is_one() {
        for n in [2, 7, 8, 33] {
            let s = synthesize_filter_with_gains(n, 1.0, 3).unwrap();
            assert!(s.gains.iter().all(|g| (g - 1.0).abs() < 1e-15));
            assert!((condition_number(&s.filter).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn synthesized_filter_is_real() {
        for n in [5, 8, 64] {
            let plan = FourierPlan::line(n);
            let s = synthesize_filter_with_gains(n, 8.0, 21).unwrap();
            // Rebuild the complex spectrum and check the inverse has no imaginary part.
            let mut spec = plan.forward_real(s.filter.coeffs());
            plan.inverse(&mut spec);
            let im = spec.iter().map(|c| (c.im / n as f64).abs()).fold(0.0, f64::max);
            assert!(im <= 1e-12);
        }
    }

    #[test]
    fn condition_number_matches_drawn_gains() {
        let s = synthesize_filter_with_gains(64, 8.0, 1234).unwrap();
        let kappa = condition_number(&s.filter).unwrap();
        assert!(kappa <= 8.0);
        assert!((kappa - s.gain_ratio()).abs() <= 1e-10 * kappa);
        assert!(s.gains.iter().all(|g| *g >= 1.0 - 1e-12 && *g <= 8.0 + 1e-12));
    }

    #[test]
    fn kappa_below_one_is_rejected() {
        assert!(matches!(synthesize_filter(8, 0.5, 0), Err(MsbdError::Parameter(_))));
    }

    #[test]
    fn identity_filter_reproduces_inputs() {
        let x = sample_bernoulli_gaussian(10, 5, 0.4, 8).unwrap();
        let y = generate_observations(&Filter::delta(10).unwrap(), &x, 0.0).unwrap();
        for i in 0..5 {
            for (a, b) in y.column(i).iter().zip(x.column(i)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_inputs_give_zero_observations() {
        let x = SparseInputs::from_columns(vec![vec![0.0; 6]; 3], 0.3, 0).unwrap();
        let g = synthesize_filter(6, 3.0, 0).unwrap();
        let y = generate_observations(&g, &x, 0.0).unwrap();
        assert!(y.columns().iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn observations_match_dense_oracle() {
        let x = sample_bernoulli_gaussian(8, 4, 0.5, 17).unwrap();
        let g = synthesize_filter(8, 4.0, 17).unwrap();
        let y = generate_observations(&g, &x, 0.0).unwrap();
        let dense = dense_circulant(g.coeffs());
        for i in 0..4 {
            let expect = &dense * nalgebra::DVector::from_column_slice(x.column(i));
            let diff: Vec<f64> = y.column(i).iter().zip(expect.iter()).map(|(a, b)| a - b).collect();
            assert!(l2_norm(&diff) <= 1e-12 * (1.0 + expect.norm()));
        }
    }

    #[test]
    fn mismatched_filter_length_is_rejected() {
        let x = sample_bernoulli_gaussian(8, 2, 0.5, 1).unwrap();
        let g = Filter::new(unit_vector(6, 0)).unwrap();
        assert!(matches!(generate_observations(&g, &x, 0.0), Err(MsbdError::Dimension { .. })));
    }

    #[test]
    fn noise_is_seeded() {
        let x = sample_bernoulli_gaussian(8, 3, 0.3, 2).unwrap();
        let g = Filter::delta(8).unwrap();
        let a = generate_observations(&g, &x, 0.1).unwrap();
        let b = generate_observations(&g, &x, 0.1).unwrap();
        assert_eq!(a.columns(), b.columns());
        assert_ne!(a.column(0), x.column(0));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let x = sample_bernoulli_gaussian(8, 3, 0.3, 2).unwrap();
        let g = synthesize_filter(8, 5.0, 2).unwrap();
        let y = generate_observations(&g, &x, 0.0).unwrap();
        let text = y.to_csv_string();
        let back = ObservationSet::from_csv_str(&text).unwrap();
        assert_eq!(back.columns(), y.columns());
        assert_eq!(back.theta, Some(0.3));
        assert_eq!(back.seed, Some(2));
        assert_eq!(back.to_csv_string(), text);
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(ObservationSet::from_csv_str("hello").is_err());
        assert!(ObservationSet::from_csv_str("# msbd-observations v1\n# n=2 p=2\n1,2\n").is_err());
    }

    #[test]
    fn covariance_approaches_identity() {
        // Median over seeds of the spectral deviation shrinks as p doubles.
        let mut medians = Vec::new();
        for p in [64, 128, 256, 512, 1024] {
            let mut devs: Vec<f64> = (0..15)
                .map(|s| input_covariance_deviation(&sample_bernoulli_gaussian(16, p, 0.3, 1000 + s).unwrap()))
                .collect();
            devs.sort_by(f64::total_cmp);
            medians.push(devs[devs.len() / 2]);
        }
        for w in medians.windows(2) {
            assert!(w[1] < w[0], "medians not decreasing: {medians:?}");
        }
    }
}
