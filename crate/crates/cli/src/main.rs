mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

use msbd::circulant::{inverse_filter, l2_norm, Filter};
use msbd::harness::{apply_axis_spec, emit_results, run_phase_grid, ExperimentGrid, SolverTemplate};
use msbd::imaging::{
    aligned_relative_error, bernoulli_gaussian_kernels, blur_with_kernels, deblur_channels, kernel_ingest,
    normalize_for_display, read_png, synthetic_test_image, write_png, ImagePlane, KernelMode, KernelStack,
};
use msbd::landscape::{export_sphere_surface, surface_to_csv, verify_geometry, GeometryParams};
use msbd::metrics::{shift_sign_distance, success_indicator};
use msbd::numfmt::g17;
use msbd::signal_model::{generate_observations, sample_bernoulli_gaussian, synthesize_filter, ObservationSet};
use msbd::solver::{Solver, SolverConfig};
use msbd::sphere::{default_xi0, Sign};
use msbd::surrogate_loss::{build_preconditioner, LossConfig, Objective};
use msbd::MsbdError;

use config::{CommonArgs, Settings};

#[derive(Debug, Parser)]
#[command(name = "msbd", version, about = "Multi-channel sparse blind deconvolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a filter and observations and write them as CSV.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Additive Gaussian noise level.
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Also write the filter coefficients here.
        #[arg(long)]
        filter_out: Option<PathBuf>,
    },
    /// Recover the inverse filter for one instance.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
        /// Observations CSV (otherwise a synthetic instance is generated).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Ground-truth filter CSV for an `--input` dataset.
        #[arg(long)]
        filter: Option<PathBuf>,
    },
    /// Monte Carlo success rates over a grid.
    Phase {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Loss-surface export (n = 3) or geometry verification.
    Landscape {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value_t = LandscapeMode::Surface)]
        mode: LandscapeMode,
        /// Lattice size per angle for the surface.
        #[arg(long, default_value_t = 50)]
        grid_size: usize,
        /// Samples per region for geometry checks.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Basin margin; defaults to 1/(4 ln n).
        #[arg(long)]
        xi0: Option<f64>,
    },
    /// Blur an image with random kernels and recover it blindly.
    Deblur {
        #[command(flatten)]
        common: CommonArgs,
        /// Clean image (PNG). Without it a synthetic scene is used.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Synthetic scene size.
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Blur kernels (PNG). Without them Bernoulli-Gaussian kernels are drawn.
        #[arg(long, num_args = 1..)]
        kernels: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LandscapeMode {
    Surface,
    Geometry,
}

fn solver_config(s: &Settings) -> SolverConfig {
    let mut cfg = SolverConfig::for_size(s.n);
    cfg.eta = s.eta;
    cfg.max_iters = s.max_iters;
    cfg.mu = s.mu.unwrap_or(cfg.mu);
    cfg.theta = s.theta;
    cfg.restarts = s.restarts.unwrap_or(cfg.restarts);
    cfg.backtracking = s.backtracking;
    cfg.loss_kind = s.loss;
    cfg.use_preconditioner = s.precondition;
    cfg.seed = s.seed;
    cfg.time_budget = s.time_budget_secs.map(Duration::from_secs_f64);
    cfg
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| MsbdError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?,
        None => print!("{text}"),
    }
    Ok(())
}

fn vector_line(v: &[f64]) -> String {
    let mut s = v.iter().map(|x| g17(*x)).collect::<Vec<_>>().join(",");
    s.push('\n');
    s
}

fn read_vector(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| MsbdError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let line = text
        .lines()
        .find(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .ok_or_else(|| MsbdError::Parse(format!("{} holds no values", path.display())))?;
    line.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| MsbdError::Parse(format!("bad number {t:?} in {}", path.display())).into())
        })
        .collect()
}

fn synthesize(s: &Settings, noise: f64) -> Result<(Filter, ObservationSet)> {
    let g = synthesize_filter(s.n, s.kappa, s.seed)?;
    let x = sample_bernoulli_gaussian(s.n, s.p, s.theta, s.seed)?;
    let y = generate_observations(&g, &x, noise)?;
    Ok((g, y))
}

fn cmd_synth(s: &Settings, noise: f64, filter_out: Option<&Path>) -> Result<()> {
    let Some(out) = &s.out else {
        bail!(MsbdError::Parameter("synth needs --out".into()));
    };
    let (g, y) = synthesize(s, noise)?;
    y.write_csv(out)?;
    if let Some(path) = filter_out {
        write_or_print(Some(path), &vector_line(g.coeffs()))?;
    }
    println!("wrote n={} p={} kappa={} seed={} to {}", s.n, s.p, g17(s.kappa), s.seed, out.display());
    Ok(())
}

fn cmd_solve(s: &Settings, input: Option<&Path>, filter: Option<&Path>) -> Result<()> {
    let (truth, y) = match input {
        Some(path) => {
            let y = ObservationSet::read_csv(path)?;
            let truth = filter.map(|f| read_vector(f).and_then(|c| Ok(Filter::new(c)?))).transpose()?;
            (truth, y)
        }
        None => {
            let (g, y) = synthesize(s, 0.0)?;
            (Some(g), y)
        }
    };
    let mut cfg = solver_config(s);
    cfg.mu = s.mu.unwrap_or_else(|| LossConfig::default_mu(y.n()));
    if s.restarts.is_none() {
        cfg.restarts = SolverConfig::for_size(y.n()).restarts;
    }
    let res = Solver::new(&y, &cfg)?.run_with_restarts()?;
    let mut report = format!(
        "restart={} iterations={} converged={} final_loss={} grad_norm={}\n",
        res.restart_index,
        res.iterations_used,
        res.converged,
        g17(res.final_loss),
        g17(res.final_grad_norm)
    );
    if let Some(g) = &truth {
        let (ok, score) = success_indicator(&res.g_inv_hat, g)?;
        let inv = inverse_filter(g)?;
        let unit = |v: &[f64]| {
            let n = l2_norm(v);
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let a = shift_sign_distance(&unit(&res.g_inv_hat), &unit(inv.coeffs()))?;
        let sign = if a.best_sign == Sign::Plus { "+" } else { "-" };
        let _ = writeln!(report, "success={ok} score={}", g17(score));
        let _ = writeln!(
            report,
            "distance={} best_shift={} best_sign={sign} peak_ratio={}",
            g17(a.distance),
            a.best_shift,
            g17(a.peak_ratio)
        );
    }
    print!("{report}");
    if let Some(out) = &s.out {
        write_or_print(Some(out), &vector_line(&res.g_inv_hat))?;
    }
    Ok(())
}

fn phase_grid(s: &Settings) -> Result<ExperimentGrid> {
    let mut grid = ExperimentGrid::single(s.n, s.p, s.theta, s.kappa);
    grid.losses = vec![s.loss];
    grid.trials = s.trials;
    grid.base_seed = s.seed;
    grid.solver = SolverTemplate {
        eta: s.eta,
        max_iters: s.max_iters,
        mu: s.mu,
        restarts: s.restarts,
        backtracking: s.backtracking,
        use_preconditioner: s.precondition,
        ..SolverTemplate::default()
    };
    grid.trial_budget = s.time_budget_secs.map(Duration::from_secs_f64);
    grid.record_runtime = s.record_runtime;
    if let Some(spec) = &s.grid {
        apply_axis_spec(&mut grid, spec)?;
    }
    Ok(grid)
}

fn cmd_phase(s: &Settings) -> Result<()> {
    let table = run_phase_grid(&phase_grid(s)?)?;
    match &s.out {
        Some(path) => emit_results(&table, path)?,
        None => print!("{}", table.to_csv_string()),
    }
    Ok(())
}

fn cmd_landscape(s: &Settings, mode: LandscapeMode, grid_size: usize, samples: usize, xi0: Option<f64>) -> Result<()> {
    let mu = s.mu.unwrap_or_else(|| LossConfig::default_mu(s.n));
    match mode {
        LandscapeMode::Surface => {
            if s.n != 3 {
                bail!(MsbdError::Parameter(format!("surface export needs --n 3, got {}", s.n)));
            }
            let (g, y) = if s.kappa == 1.0 {
                let x = sample_bernoulli_gaussian(3, s.p, s.theta, s.seed)?;
                let y = generate_observations(&Filter::delta(3)?, &x, 0.0)?;
                (Filter::delta(3)?, y)
            } else {
                synthesize(s, 0.0)?
            };
            let _ = g;
            let r = if s.precondition { Some(build_preconditioner(&y, s.theta)?) } else { None };
            let obj = Objective::new(&y, r.as_ref(), mu)?;
            let pts = export_sphere_surface(&obj, grid_size)?;
            write_or_print(s.out.as_deref(), &surface_to_csv(&pts))
        }
        LandscapeMode::Geometry => {
            let params = GeometryParams {
                n: s.n,
                p: s.p,
                theta: s.theta,
                kappa: s.kappa,
                xi0: xi0.unwrap_or_else(|| default_xi0(s.n)),
                mu,
                samples,
                seed: s.seed,
            };
            let rep = verify_geometry(&params)?;
            let mut text = String::new();
            for r in [&rep.q1, &rep.q2] {
                let _ = writeln!(
                    text,
                    "region={:?} samples={} rejected={} min_value={} violations={}",
                    r.region,
                    r.samples,
                    r.rejected,
                    g17(r.min_value),
                    r.violations
                );
            }
            write_or_print(s.out.as_deref(), &text)
        }
    }
}

fn cmd_deblur(s: &Settings, image: Option<&Path>, size: usize, kernel_paths: &[PathBuf]) -> Result<()> {
    let Some(out) = &s.out else {
        bail!(MsbdError::Parameter("deblur needs --out".into()));
    };
    let (clean, synthetic): (Vec<ImagePlane>, bool) = match image {
        Some(path) => (
            read_png(path)?
                .into_iter()
                .map(ImagePlane::try_from)
                .collect::<Result<_, _>>()?,
            false,
        ),
        None => (vec![synthetic_test_image(size, size, s.seed)?], true),
    };
    let (rows, cols) = clean[0].dims();
    let kernels = if kernel_paths.is_empty() {
        bernoulli_gaussian_kernels(rows, cols, s.p, s.theta, s.seed)?
    } else {
        KernelStack {
            kernels: kernel_paths
                .iter()
                .map(|p| kernel_ingest(p, rows, cols))
                .collect::<Result<_, _>>()?,
            mode: KernelMode::UnitSum,
        }
    };
    let observations: Vec<Vec<ImagePlane>> = clean
        .iter()
        .map(|plane| blur_with_kernels(plane, &kernels))
        .collect::<Result<_, _>>()?;
    let mut s = s.clone();
    s.n = rows * cols;
    let cfg = solver_config(&s);
    let cfg = SolverConfig {
        mu: s.mu.unwrap_or_else(|| LossConfig::default_mu(rows * cols)),
        restarts: s.restarts.unwrap_or_else(|| SolverConfig::for_size(rows * cols).restarts),
        ..cfg
    };
    let result = deblur_channels(&observations, kernels.mode, &cfg)?;
    write_png(out, &normalize_for_display(&result.aligned))?;
    for (rec, truth) in result.recoveries.iter().zip(&clean) {
        let err = aligned_relative_error(&rec.image, truth)?;
        println!(
            "channel={:?} iterations={} final_loss={} aligned_relative_error={}",
            rec.channel,
            rec.solve.iterations_used,
            g17(rec.solve.final_loss),
            g17(err)
        );
    }
    if synthetic {
        println!("synthetic scene {rows}x{cols}, p={}", kernels.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            common,
            noise,
            filter_out,
        } => cmd_synth(&Settings::resolve(&common)?, noise, filter_out.as_deref()),
        Command::Solve { common, input, filter } => {
            cmd_solve(&Settings::resolve(&common)?, input.as_deref(), filter.as_deref())
        }
        Command::Phase { common } => cmd_phase(&Settings::resolve(&common)?),
        Command::Landscape {
            common,
            mode,
            grid_size,
            samples,
            xi0,
        } => cmd_landscape(&Settings::resolve(&common)?, mode, grid_size, samples, xi0),
        Command::Deblur {
            common,
            image,
            size,
            kernels,
        } => cmd_deblur(&Settings::resolve(&common)?, image.as_deref(), size, &kernels),
    }
}

/// `error kind=<tag> message="<text>"` on one line.
fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<MsbdError>())
        .map(MsbdError::tag)
        .unwrap_or("config");
    let message = format!("{err:#}").replace('\n', " ").replace('"', "'");
    format!("error kind={kind} message=\"{message}\"")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::from(1)
        }
    }
}
