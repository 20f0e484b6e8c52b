//! Command-line front end.
//!
//! Every subcommand loads an optional JSON config, applies flag overrides,
//! writes the fully materialized config echo into the output directory, and
//! stamps each artifact with the config fingerprint.  Errors leave the
//! process with exit code 1 (bad input) or 2 (numerical failure) and a
//! machine-readable JSON object on stderr.

use crate::config::RunConfig;
use crate::detwave::{
    adjoint_eigenfunction, nagumo_seed, solve_wave, spectrum, AdjointEigenfunction, SpectrumMethod,
    WaveSolution,
};
use crate::ensemble::{derive_seed, run_ensemble, EnsembleStats};
use crate::grid::Field;
use crate::kinetics::{Cutoffs, FhnNoise, Model};
use crate::semigroup::{decay_diagnostics, drift_coefficients, DriftCoefficients, QuadratureConfig};
use crate::spdesim::{run_path, FrameSnapshot, SimConfig};
use crate::stochwave::{solve_stochastic_wave, speed_expansion, StochasticWave};
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "wavedrift",
    version,
    about = "Traveling waves under small noise: corrected profiles, drift predictions, and Monte Carlo checks"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Wave profiles and their spectra.
    Wave {
        #[command(subcommand)]
        cmd: WaveCmd,
    },
    /// Speed and drift predictions from the linearized flow.
    Drift {
        #[command(subcommand)]
        cmd: DriftCmd,
    },
    /// Single sample paths of the stochastic dynamics.
    Sim {
        #[command(subcommand)]
        cmd: SimCmd,
    },
    /// Monte Carlo ensembles.
    Ensemble {
        #[command(subcommand)]
        cmd: EnsembleCmd,
    },
    /// Operator-level diagnostics.
    Diagnostics {
        #[command(subcommand)]
        cmd: DiagnosticsCmd,
    },
    /// Rebuild a standard result figure end to end (reduced presets by default).
    ReproduceFigure(FigureArgs),
}

#[derive(Subcommand)]
enum WaveCmd {
    /// Solve for the deterministic traveling wave.
    Solve(CommonArgs),
    /// Eigenvalues of the linearization about the wave.
    ///
    /// Uses a dense eigensolve whose cost grows cubically in the grid size;
    /// without --points the grid is capped at 1024 points.
    Spectrum(CommonArgs),
    /// Solve for the noise-corrected wave at the configured sigma.
    StochasticProfile(CommonArgs),
}

#[derive(Subcommand)]
enum DriftCmd {
    /// Predict the corrected speed and the second-order phase drift.
    Predict(CommonArgs),
}

#[derive(Subcommand)]
enum SimCmd {
    /// Integrate one sample path and record the tracked phase.
    Run(SimRunArgs),
}

#[derive(Subcommand)]
enum EnsembleCmd {
    /// Run a path ensemble and estimate the observed drift.
    Run(CommonArgs),
    /// Repeat the ensemble over a list of noise amplitudes.
    Sweep(SweepArgs),
}

#[derive(Subcommand)]
enum DiagnosticsCmd {
    /// Decay of the projected semigroup and shift-commutator probes.
    Semigroup(DiagArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run config; documented defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SimRunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Times at which frame-resolved profiles are captured.
    #[arg(long, value_delimiter = ',')]
    snapshots: Vec<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Noise amplitudes to visit.
    #[arg(long, value_delimiter = ',', required = true)]
    sigmas: Vec<f64>,
}

#[derive(Args)]
struct DiagArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Largest probe time for the decay curve.
    #[arg(long, default_value_t = 10.0)]
    t_max: f64,
}

#[derive(Args)]
struct FigureArgs {
    /// Which figure to rebuild.
    #[arg(value_enum)]
    figure: Figure,
    /// Full-scale run (1000 paths, fine grids) instead of the reduced preset.
    #[arg(long)]
    full: bool,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Figure {
    #[value(name = "1a")]
    F1a,
    #[value(name = "1b")]
    F1b,
    #[value(name = "2")]
    F2,
    #[value(name = "3a")]
    F3a,
    #[value(name = "3b")]
    F3b,
}

/// Flag-level overrides of individual config fields.
#[derive(Args, Clone, Default)]
struct Overrides {
    /// Model name: "fhn" or "nagumo".
    #[arg(long)]
    model: Option<String>,
    /// Threshold of the cubic nonlinearity.
    #[arg(long)]
    a: Option<f64>,
    /// Recovery timescale (fhn only).
    #[arg(long)]
    epsilon: Option<f64>,
    /// Recovery coupling (fhn only).
    #[arg(long)]
    gamma: Option<f64>,
    /// Recovery diffusion (fhn only).
    #[arg(long)]
    rho_w: Option<f64>,
    /// Noise shape: "linear-u" or "cubic-cutoff".
    #[arg(long)]
    noise: Option<String>,
    /// Half-length of the spatial window.
    #[arg(long)]
    half_length: Option<f64>,
    /// Number of grid points.
    #[arg(long)]
    points: Option<usize>,
    /// Noise amplitude.
    #[arg(long)]
    sigma: Option<f64>,
    /// Time step of the path integrator.
    #[arg(long)]
    dt: Option<f64>,
    /// Final time of the path integrator.
    #[arg(long)]
    t_end: Option<f64>,
    /// Decay rate of the stability functional.
    #[arg(long)]
    eps: Option<f64>,
    /// Exceedance threshold for the stability probability.
    #[arg(long)]
    eta: Option<f64>,
    /// Number of Monte Carlo paths.
    #[arg(long)]
    paths: Option<usize>,
    /// Base seed of the ensemble.
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = &self.model {
            cfg.model.name = v.clone();
        }
        if let Some(v) = self.a {
            cfg.model.a = v;
        }
        if let Some(v) = self.epsilon {
            cfg.model.epsilon = v;
        }
        if let Some(v) = self.gamma {
            cfg.model.gamma = v;
        }
        if let Some(v) = self.rho_w {
            cfg.model.rho_w = v;
        }
        if let Some(v) = &self.noise {
            cfg.model.noise = v.clone();
        }
        if let Some(v) = self.half_length {
            cfg.grid.half_length = v;
        }
        if let Some(v) = self.points {
            cfg.grid.points = v;
        }
        if let Some(v) = self.sigma {
            cfg.stochastic.sigma = v;
        }
        if let Some(v) = self.dt {
            cfg.stochastic.dt = v;
        }
        if let Some(v) = self.t_end {
            cfg.stochastic.t_end = v;
        }
        if let Some(v) = self.eps {
            cfg.stochastic.eps = v;
        }
        if let Some(v) = self.eta {
            cfg.stochastic.eta = v;
        }
        if let Some(v) = self.paths {
            cfg.ensemble.paths = v;
        }
        if let Some(v) = self.seed {
            cfg.ensemble.seed = v;
        }
    }
}

pub fn run() -> Result<()> {
    let cli = Cli::try_parse().map_err(|e| {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            print!("{e}");
            std::process::exit(0);
        }
        Error::validation(e.to_string())
    })?;
    match cli.command {
        Command::Wave { cmd } => match cmd {
            WaveCmd::Solve(args) => wave_solve(args),
            WaveCmd::Spectrum(args) => wave_spectrum(args),
            WaveCmd::StochasticProfile(args) => wave_stochastic_profile(args),
        },
        Command::Drift { cmd } => match cmd {
            DriftCmd::Predict(args) => drift_predict(args),
        },
        Command::Sim { cmd } => match cmd {
            SimCmd::Run(args) => sim_run(args),
        },
        Command::Ensemble { cmd } => match cmd {
            EnsembleCmd::Run(args) => ensemble_run(args),
            EnsembleCmd::Sweep(args) => ensemble_sweep(args),
        },
        Command::Diagnostics { cmd } => match cmd {
            DiagnosticsCmd::Semigroup(args) => diagnostics_semigroup(args),
        },
        Command::ReproduceFigure(args) => reproduce_figure(args),
    }
}

/// Loads the config, applies overrides, revalidates.  No files are touched
/// until this succeeds, so a bad config leaves no partial outputs.
fn resolve_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    args.overrides.apply(&mut cfg);
    if let Some(out) = &args.out {
        cfg.output.directory = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Output sink: directory, echo, and fingerprint stamping.
struct Outputs {
    dir: PathBuf,
    fingerprint: String,
    formats: Vec<String>,
    files: Vec<String>,
}

impl Outputs {
    fn create(cfg: &RunConfig) -> Result<Outputs> {
        let dir = PathBuf::from(&cfg.output.directory);
        std::fs::create_dir_all(&dir)?;
        let mut out = Outputs {
            dir,
            fingerprint: cfg.fingerprint(),
            formats: cfg.output.formats.clone(),
            files: Vec::new(),
        };
        let echo = out.dir.join("config.echo.json");
        std::fs::write(&echo, cfg.canonical_json())?;
        out.files.push(echo.display().to_string());
        Ok(out)
    }

    fn wants(&self, fmt: &str) -> bool {
        self.formats.iter().any(|f| f == fmt)
    }

    fn write_csv(&mut self, name: &str, header: &str, rows: &[String]) -> Result<()> {
        if !self.wants("csv") {
            return Ok(());
        }
        let mut text = format!("# config {}\n{header}\n", self.fingerprint);
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        let path = self.dir.join(name);
        std::fs::write(&path, text)?;
        self.files.push(path.display().to_string());
        Ok(())
    }

    fn write_gnuplot(&mut self, name: &str, script: &str) -> Result<()> {
        if !self.wants("gnuplot") {
            return Ok(());
        }
        let text = format!(
            "# config {}\nset datafile separator \",\"\n{script}",
            self.fingerprint
        );
        let path = self.dir.join(name);
        std::fs::write(&path, text)?;
        self.files.push(path.display().to_string());
        Ok(())
    }

    /// Stamps the fingerprint into the object, optionally writes it, and
    /// returns it for the stdout report.
    fn finish_json(&mut self, name: &str, mut value: serde_json::Value) -> Result<serde_json::Value> {
        value["config_fingerprint"] = json!(self.fingerprint);
        if self.wants("json") {
            let path = self.dir.join(name);
            std::fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")?;
            self.files.push(path.display().to_string());
        }
        Ok(value)
    }
}

fn print_summary(value: &serde_json::Value) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    // Tolerate a closed pipe (e.g. `wavedrift ... | head`).
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn noise_kind(cfg: &RunConfig) -> FhnNoise {
    match cfg.model.noise.as_str() {
        "cubic-cutoff" => FhnNoise::CubicCutoff,
        _ => FhnNoise::LinearU,
    }
}

/// Deterministic wave for the configured model.
fn solve_base_wave(cfg: &RunConfig) -> Result<(Model, WaveSolution)> {
    let grid = cfg.build_grid()?;
    let opts = cfg.newton_opts();
    match cfg.model.name.as_str() {
        "nagumo" => {
            let model = cfg.build_model()?;
            let (seed, c_seed) = nagumo_seed(grid, cfg.model.a);
            let wave = solve_wave(&model, &seed, c_seed, opts)?;
            Ok((model, wave))
        }
        _ => crate::detwave::fhn_find_wave(
            grid,
            cfg.model.a,
            cfg.model.epsilon,
            cfg.model.gamma,
            cfg.model.rho_w,
            noise_kind(cfg),
            opts,
        ),
    }
}

/// Wave, adjoint frame function, and corrected wave at the configured sigma.
fn stochastic_stage(
    cfg: &RunConfig,
) -> Result<(Model, WaveSolution, AdjointEigenfunction, StochasticWave)> {
    let (model, wave) = solve_base_wave(cfg)?;
    let adj = adjoint_eigenfunction(&model, &wave)?;
    let swave = solve_stochastic_wave(&model, &wave, &adj.psi, cfg.stochastic.sigma, cfg.newton_opts())?;
    Ok((model, wave, adj, swave))
}

/// Spectral gap certified on a coarse auxiliary grid (dense eigensolve).
fn gap_certificate(cfg: &RunConfig) -> Result<f64> {
    let mut coarse = cfg.clone();
    coarse.grid.points = coarse.grid.points.min(768);
    let (model, wave) = solve_base_wave(&coarse)?;
    let report = spectrum(&model, &wave, None)?;
    Ok(report.gap_beta)
}

/// The stability functional only controls the dynamics when its decay rate
/// sits strictly below twice the spectral gap.
fn check_eps(cfg: &RunConfig) -> Result<f64> {
    let gap = gap_certificate(cfg)?;
    if cfg.stochastic.eps >= 2.0 * gap {
        return Err(Error::validation(format!(
            "stochastic.eps = {} must lie in (0, 2·gap) = (0, {:.6}) for this model",
            cfg.stochastic.eps,
            2.0 * gap
        )));
    }
    Ok(gap)
}

fn quadrature_for(cfg: &RunConfig, gap: f64) -> Result<QuadratureConfig> {
    let mut quad = QuadratureConfig::for_gap(gap)?;
    quad.dt = cfg.solver.propagator_dt;
    quad.tol = cfg.solver.quadrature_tol;
    Ok(quad)
}

fn sim_config(
    cfg: &RunConfig,
    model: Model,
    swave: StochasticWave,
    psi: Field,
    c0: f64,
) -> Result<SimConfig> {
    let mut sim = SimConfig::new(model, swave, psi, c0, cfg.stochastic.sigma, cfg.stochastic.eps)?;
    sim.dt = cfg.stochastic.dt;
    sim.t_end = cfg.stochastic.t_end;
    sim.record_stride = cfg.stochastic.record_stride;
    sim.validate()?;
    Ok(sim)
}

fn component_label(n_comp: usize, c: usize) -> String {
    if n_comp == 2 {
        ["u", "w"][c].to_string()
    } else if n_comp == 1 {
        "u".to_string()
    } else {
        format!("c{c}")
    }
}

/// CSV rows of one or more fields on a shared grid: `xi, <label columns>`.
fn field_table(fields: &[(&str, &Field)]) -> Result<(String, Vec<String>)> {
    let grid = fields[0].1.grid().clone();
    let mut header = "xi".to_string();
    for (tag, f) in fields {
        if !Arc::ptr_eq(f.grid(), &grid) && f.grid().points() != grid.points() {
            return Err(Error::validation("field table needs a shared grid"));
        }
        for c in 0..f.n_comp() {
            write!(header, ",{tag}_{}", component_label(f.n_comp(), c)).unwrap();
        }
    }
    let mut rows = Vec::with_capacity(grid.points());
    for i in 0..grid.points() {
        let mut row = format!("{:.10e}", grid.node(i));
        for (_, f) in fields {
            for c in 0..f.n_comp() {
                write!(row, ",{:.10e}", f.component_slice(c)[i]).unwrap();
            }
        }
        rows.push(row);
    }
    Ok((header, rows))
}

// ---------------------------------------------------------------------------
// wave solve / spectrum / stochastic-profile
// ---------------------------------------------------------------------------

fn wave_solve(args: CommonArgs) -> Result<()> {
    let cfg = resolve_config(&args)?;
    let t0 = Instant::now();
    let (model, wave) = solve_base_wave(&cfg)?;
    let mut out = Outputs::create(&cfg)?;

    let (header, rows) = field_table(&[("phi", &wave.profile)])?;
    out.write_csv("wave.csv", &header, &rows)?;
    let summary = out.finish_json(
        "wave.json",
        json!({
            "model": cfg.model.name,
            "a": cfg.model.a,
            "n_comp": model.n_comp(),
            "speed": wave.speed,
            "residual_norm": wave.residual_norm,
            "newton_iters": wave.newton_iters,
            "boundary_gap": wave.boundary_gap,
            "grid": {"half_length": cfg.grid.half_length, "points": cfg.grid.points},
            "runtime_seconds": t0.elapsed().as_secs_f64(),
            "outputs": out.files,
        }),
    )?;
    print_summary(&summary)
}

fn wave_spectrum(args: CommonArgs) -> Result<()> {
    let mut cfg = resolve_config(&args)?;
    if args.overrides.points.is_none() {
        // Dense eigensolve: cap the certificate grid unless the user insists.
        cfg.grid.points = cfg.grid.points.min(1024);
    }
    let t0 = Instant::now();
    let (model, wave) = solve_base_wave(&cfg)?;
    let report = spectrum(&model, &wave, None)?;
    let mut out = Outputs::create(&cfg)?;

    let rows: Vec<String> = report
        .eigenvalues
        .iter()
        .map(|z| format!("{:.10e},{:.10e}", z.re, z.im))
        .collect();
    out.write_csv("spectrum.csv", "re,im", &rows)?;
    out.write_gnuplot(
        "spectrum.gnuplot",
        "set title 'Linearization spectrum'\n\
         set xlabel 'Re'\nset ylabel 'Im'\nset grid\n\
         plot 'spectrum.csv' using 1:2 with points pt 7 title 'eigenvalues', \
         0 with lines lt 0 notitle\n",
    )?;
    let summary = out.finish_json(
        "spectrum.json",
        json!({
            "model": cfg.model.name,
            "points": cfg.grid.points,
            "zero_eig": {"re": report.zero_eig.re, "im": report.zero_eig.im},
            "zero_is_simple": report.zero_is_simple,
            "gap_beta": report.gap_beta,
            "essential_bound": report.essential_bound,
            "n_eigenvalues": report.eigenvalues.len(),
            "method": match report.method { SpectrumMethod::Dense => "dense", _ => "shift-invert" },
            "runtime_seconds": t0.elapsed().as_secs_f64(),
            "outputs": out.files,
        }),
    )?;
    print_summary(&summary)
}

fn wave_stochastic_profile(args: CommonArgs) -> Result<()> {
    let cfg = resolve_config(&args)?;
    let t0 = Instant::now();
    let (_, wave, _, swave) = stochastic_stage(&cfg)?;
    let mut out = Outputs::create(&cfg)?;

    let (header, rows) = field_table(&[("phi0", &wave.profile), ("phis", &swave.profile)])?;
    out.write_csv("stochastic_wave.csv", &header, &rows)?;
    out.write_gnuplot(
        "stochastic_wave.gnuplot",
        "set title 'Deterministic vs noise-corrected profile'\n\
         set xlabel 'xi'\nset grid\n\
         plot 'stochastic_wave.csv' using 1:2 with lines title 'phi0', \
         'stochastic_wave.csv' using 1:4 with lines title 'phi_sigma'\n",
    )?;
    let summary = out.finish_json(
        "stochastic_wave.json",
        json!({
            "model": cfg.model.name,
            "sigma": swave.sigma,
            "c0": wave.speed,
            "c_sigma": swave.speed,
            "c_sigma_minus_c0": swave.speed - wave.speed,
            "btilde": swave.btilde,
            "kappa": swave.kappa,
            "residual_norm": swave.residual_norm,
            "newton_iters": swave.newton_iters,
            "runtime_seconds": t0.elapsed().as_secs_f64(),
            "outputs": out.files,
        }),
    )?;
    print_summary(&summary)
}

// ---------------------------------------------------------------------------
// drift predict
// ---------------------------------------------------------------------------

fn predict(cfg: &RunConfig) -> Result<(WaveSolution, StochasticWave, f64, DriftCoefficients)> {
    let (model, wave, adj, swave) = stochastic_stage(cfg)?;
    let gap = gap_certificate(cfg)?;
    let quad = quadrature_for(cfg, gap)?;
    let cut = Cutoffs::new(100.0)?;
    let expansion = speed_expansion(&model, &wave, &adj.psi)?;
    let coeffs = drift_coefficients(&model, &wave, &swave, &adj.psi, &cut, &quad, expansion.c2)?;
    Ok((wave, swave, gap, coeffs))
}

fn drift_predict(args: CommonArgs) -> Result<()> {
    let cfg = resolve_config(&args)?;
    let t0 = Instant::now();
    let (_, _, gap, coeffs) = predict(&cfg)?;
    let mut out = Outputs::create(&cfg)?;

    let sigma_sq = coeffs.sigma * coeffs.sigma;
    let summary = out.finish_json(
        "drift.json",
        json!({
            "model": cfg.model.name,
            "sigma": coeffs.sigma,
            "c0": coeffs.c0,
            "c_sigma": coeffs.c_sigma,
            "c_sigma_minus_c0": coeffs.c_sigma - coeffs.c0,
            "c02": coeffs.c02,
            "c_od_leading": coeffs.c_od_leading,
            "c_od_general": coeffs.c_od_general,
            "c_lim_2": coeffs.c_lim_2,
            "predicted_speed_shift": coeffs.c02 * sigma_sq,
            "predicted_drift_rate": coeffs.c_od_general * sigma_sq,
            "predicted_limiting_speed": coeffs.c0 + coeffs.c_lim_2 * sigma_sq,
            "gap_beta": gap,
            "truncation_time": coeffs.truncation_time,
            "quadrature_error_estimate": coeffs.quadrature_error_estimate,
            "runtime_seconds": t0.elapsed().as_secs_f64(),
            "outputs": out.files,
        }),
    )?;
    print_summary(&summary)
}

// ---------------------------------------------------------------------------
// sim run
// ---------------------------------------------------------------------------

fn snapshot_tables(out: &mut Outputs, snapshots: &[FrameSnapshot]) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for (k, snap) in snapshots.iter().enumerate() {
        let name = format!("snapshot_{k:02}_t{:.3}.csv", snap.t);
        let (header, rows) = field_table(&[
            ("lab", &snap.lab),
            ("c0frame", &snap.frame_c0),
            ("csframe", &snap.frame_csigma),
            ("gframe", &snap.frame_gamma),
        ])?;
        out.write_csv(&name, &header, &rows)?;
        names.push(name);
    }
    Ok(names)
}

fn sim_run(args: SimRunArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    if args.common.config.is_none() && args.common.overrides.t_end.is_none() {
        cfg.stochastic.t_end = 10.0;
    }
    let t0 = Instant::now();
    let gap = check_eps(&cfg)?;
    let (model, wave, adj, swave) = stochastic_stage(&cfg)?;
    let mut sim = sim_config(&cfg, model, swave, adj.psi.clone(), wave.speed)?;
    sim.snapshot_times = args.snapshots.clone();
    sim.validate()?;
    let record = run_path(&sim, cfg.ensemble.seed)?;
    let mut out = Outputs::create(&cfg)?;

    let rows: Vec<String> = (0..record.times.len())
        .map(|i| {
            format!(
                "{:.6},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
                record.times[i],
                record.gamma_series[i],
                record.gamma_minus_cst[i],
                record.gamma_vr[i],
                record.neps_series[i],
                record.v_l2_series[i],
                record.position_series[i],
            )
        })
        .collect();
    out.write_csv(
        "path.csv",
        "t,gamma,gamma_minus_cst,gamma_vr,neps,v_l2,position",
        &rows,
    )?;
    let snapshot_files = snapshot_tables(&mut out, &record.snapshots)?;
    out.write_gnuplot(
        "path.gnuplot",
        "set title 'Tracked phase and stability functional'\n\
         set xlabel 't'\nset grid\n\
         plot 'path.csv' using 1:3 with lines title 'Gamma - c_sigma t', \
         'path.csv' using 1:4 with lines title 'variance-reduced', \
         'path.csv' using 1:5 with lines axes x1y2 title 'N_eps'\n",
    )?;
    let summary = out.finish_json(
        "sim.json",
        json!({
            "model": cfg.model.name,
            "sigma": cfg.stochastic.sigma,
            "seed": cfg.ensemble.seed,
            "c_sigma": sim.swave.speed,
            "gap_beta": gap,
            "t_end": cfg.stochastic.t_end,
            "final_gamma": record.gamma_series.last(),
            "final_drift": record.gamma_minus_cst.last(),
            "sup_neps": record.sup_neps,
            "n_records": record.times.len(),
            "snapshots": snapshot_files,
            "runtime_seconds": t0.elapsed().as_secs_f64(),
            "outputs": out.files,
        }),
    )?;
    print_summary(&summary)
}

// ---------------------------------------------------------------------------
// ensemble run / sweep
// ---------------------------------------------------------------------------

fn drift_csv_rows(stats: &EnsembleStats) -> Vec<String> {
    (0..stats.times.len())
        .map(|i| {
            format!(
                "{:.6},{:.10e},{:.10e}",
                stats.times[i], stats.mean_drift[i], stats.sem_drift[i]
            )
        })
        .collect()
}

fn p_eps_json(stats: &EnsembleStats) -> serde_json::Value {
    match &stats.p_eps {
        Some(p) => json!({
            "eta": p.eta,
            "fraction": p.fraction,
            "ci_low": p.ci_low,
            "ci_high": p.ci_high,
            "n_exceed": p.n_exceed,
            "n_paths": p.n_paths,
        }),
        None => serde_json::Value::Null,
    }
}

fn ensemble_run(args: CommonArgs) -> Result<()> {
    let cfg = resolve_config(&args)?;
    let t0 = Instant::now();
    let gap = check_eps(&cfg)?;
    let (model, wave, adj, swave) = stochastic_stage(&cfg)?;
    let sim = sim_config(&cfg, model, swave, adj.psi.clone(), wave.speed)?;
    let mut stats = run_ensemble(
        &sim,
        cfg.ensemble.paths,
        cfg.ensemble.seed,
        Some(cfg.stochastic.eta),
    )?;
    let mut out = Outputs::create(&cfg)?;
    // The run fingerprint is the hash of the canonical config echo.
    stats.config_fingerprint = out.fingerprint.clone();

    out.write_csv("ensemble.csv", "t,mean_drift,sem_drift", &drift_csv_rows(&stats))?;
    out.write_gnuplot(
        "ensemble.gnuplot",
        "set title 'Ensemble mean of the variance-reduced phase'\n\
         set xlabel 't'\nset ylabel 'E[Gamma - c_sigma t - sigma b beta]'\nset grid\n\
         plot 'ensemble.csv' using 1:2:3 with yerrorlines title 'mean +/- sem'\n",
    )?;
    let summary = out.finish_json(
        "ensemble.json",
        json!({
            "model": cfg.model.name,
            "sigma": cfg.stochastic.sigma,
            "c_sigma": sim.swave.speed,
            "gap_beta": gap,
            "n_paths": stats.n_paths,
            "n_excluded": stats.n_excluded,
            "c_od_obs": stats.c_od_obs,
            "p_eps": p_eps_json(&stats),
            "mean_correction": stats.mean_correction,
            "sem_correction": stats.sem_correction,
            "var_raw_final": stats.var_raw_final,
            "var_vr_final": stats.var_vr_final,
            "runtime_seconds": t0.elapsed().as_secs_f64(),
            "outputs": out.files,
        }),
    )?;
    print_summary(&summary)
}

struct SweepRow {
    sigma: f64,
    c_sigma_minus_c0: f64,
    prediction_c02_sigma2: f64,
    c_od_obs: f64,
    prediction_cod_sigma2: f64,
    p_eps_fraction: f64,
}

/// One ensemble per sigma, against a shared deterministic wave and frame.
fn sweep_over_sigmas(cfg: &RunConfig, sigmas: &[f64]) -> Result<(f64, f64, Vec<SweepRow>)> {
    if sigmas.is_empty() {
        return Err(Error::validation("sweep needs at least one sigma"));
    }
    for &s in sigmas {
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::validation(format!("bad sweep sigma {s}")));
        }
    }
    let gap = check_eps(cfg)?;
    let (model, wave) = solve_base_wave(cfg)?;
    let adj = adjoint_eigenfunction(&model, &wave)?;
    let expansion = speed_expansion(&model, &wave, &adj.psi)?;
    let quad = quadrature_for(cfg, gap)?;
    let cut = Cutoffs::new(100.0)?;
    let opts = cfg.newton_opts();

    let mut rows = Vec::with_capacity(sigmas.len());
    for (k, &sigma) in sigmas.iter().enumerate() {
        let swave = solve_stochastic_wave(&model, &wave, &adj.psi, sigma, opts)?;
        let coeffs = drift_coefficients(&model, &wave, &swave, &adj.psi, &cut, &quad, expansion.c2)?;
        let mut scfg = cfg.clone();
        scfg.stochastic.sigma = sigma;
        let sim = sim_config(&scfg, model.clone(), swave.clone(), adj.psi.clone(), wave.speed)?;
        let stats = run_ensemble(
            &sim,
            cfg.ensemble.paths,
            derive_seed(cfg.ensemble.seed, k as u64),
            Some(cfg.stochastic.eta),
        )?;
        log::info!(
            "sweep sigma={sigma}: c_od_obs={:.4e}, predicted={:.4e}",
            stats.c_od_obs,
            coeffs.c_od_general * sigma * sigma
        );
        rows.push(SweepRow {
            sigma,
            c_sigma_minus_c0: swave.speed - wave.speed,
            prediction_c02_sigma2: expansion.c2 * sigma * sigma,
            c_od_obs: stats.c_od_obs,
            prediction_cod_sigma2: coeffs.c_od_general * sigma * sigma,
            p_eps_fraction: stats.p_eps.map(|p| p.fraction).unwrap_or(0.0),
        });
    }
    Ok((wave.speed, expansion.c2, rows))
}

fn sweep_csv(rows: &[SweepRow]) -> Vec<String> {
    rows.iter()
        .map(|r| {
            format!(
                "{:.6},{:.10e},{:.10e},{:.10e},{:.10e},{:.10e}",
                r.sigma,
                r.c_sigma_minus_c0,
                r.prediction_c02_sigma2,
                r.c_od_obs,
                r.prediction_cod_sigma2,
                r.p_eps_fraction,
            )
        })
        .collect()
}

const SWEEP_HEADER: &str =
    "sigma,c_sigma_minus_c0,prediction_c02_sigma2,c_od_obs,prediction_cod_sigma2,p_eps_fraction";

fn ensemble_sweep(args: SweepArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let t0 = Instant::now();
    let (c0, c02, rows) = sweep_over_sigmas(&cfg, &args.sigmas)?;
    let mut out = Outputs::create(&cfg)?;

    out.write_csv("sweep.csv", SWEEP_HEADER, &sweep_csv(&rows))?;
    out.write_gnuplot(
        "sweep.gnuplot",
        "set title 'Observed vs predicted speed corrections'\n\
         set xlabel 'sigma^2'\nset grid\n\
         plot 'sweep.csv' using ($1*$1):2 with points pt 7 title 'c_sigma - c_0', \
         'sweep.csv' using ($1*$1):3 with lines title 'c02 sigma^2', \
         'sweep.csv' using ($1*$1):4 with points pt 5 title 'observed drift', \
         'sweep.csv' using ($1*$1):5 with lines title 'c_od sigma^2'\n",
    )?;
    let summary = out.finish_json(
        "sweep.json",
        json!({
            "model": cfg.model.name,
            "c0": c0,
            "c02": c02,
            "sigmas": args.sigmas,
            "paths_per_sigma": cfg.ensemble.paths,
            "rows": rows.iter().map(|r| json!({
                "sigma": r.sigma,
                "c_sigma_minus_c0": r.c_sigma_minus_c0,
                "prediction_c02_sigma2": r.prediction_c02_sigma2,
                "c_od_obs": r.c_od_obs,
                "prediction_cod_sigma2": r.prediction_cod_sigma2,
                "p_eps_fraction": r.p_eps_fraction,
            })).collect::<Vec<_>>(),
            "runtime_seconds": t0.elapsed().as_secs_f64(),
            "outputs": out.files,
        }),
    )?;
    print_summary(&summary)
}

// ---------------------------------------------------------------------------
// diagnostics semigroup
// ---------------------------------------------------------------------------

fn diagnostics_semigroup(args: DiagArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    if !(args.t_max.is_finite() && args.t_max > 1.0) {
        return Err(Error::validation("--t-max must exceed 1"));
    }
    let t0 = Instant::now();
    let (model, wave) = solve_base_wave(&cfg)?;
    let adj = adjoint_eigenfunction(&model, &wave)?;
    let gap = gap_certificate(&cfg)?;
    let n_probe = 10usize;
    let t_grid: Vec<f64> = (1..=n_probe)
        .map(|k| 1.0 + (args.t_max - 1.0) * (k - 1) as f64 / (n_probe - 1) as f64)
        .collect();
    let report = decay_diagnostics(
        &model,
        &wave,
        &adj.psi,
        &t_grid,
        cfg.solver.propagator_dt,
        cfg.ensemble.seed,
    )?;
    let mut out = Outputs::create(&cfg)?;

    let decay_rows: Vec<String> = (0..report.t_grid.len())
        .map(|i| format!("{:.6},{:.10e}", report.t_grid[i], report.norm_sq[i]))
        .collect();
    out.write_csv("semigroup_decay.csv", "t,q_norm", &decay_rows)?;
    let lambda_rows: Vec<String> = (0..report.lambda_t.len())
        .map(|i| format!("{:.6},{:.10e}", report.lambda_t[i], report.lambda_h1[i]))
        .collect();
    out.write_csv("semigroup_lambda.csv", "t,lambda_h1", &lambda_rows)?;
    out.write_gnuplot(
        "semigroup.gnuplot",
        "set title 'Projected semigroup decay'\n\
         set xlabel 't'\nset logscale y\nset grid\n\
         M = 1.0; b = 0.04\n\
         plot 'semigroup_decay.csv' using 1:2 with linespoints title '||S(t)Q||', \
         'semigroup_decay.csv' using 1:(M*exp(-b*$1)) with lines title 'fit scale'\n",
    )?;
    let summary = out.finish_json(
        "semigroup.json",
        json!({
            "model": cfg.model.name,
            "gap_beta": gap,
            "two_gap": 2.0 * gap,
            "fitted_rate": report.fitted_rate,
            "fitted_prefactor": report.fitted_prefactor,
            "fit_from": report.fit_from,
            "rate_over_two_gap": report.fitted_rate / (2.0 * gap),
            "lambda_sup_short": report.lambda_sup_short,
            "lambda_rate_long": report.lambda_rate_long,
            "runtime_seconds": t0.elapsed().as_secs_f64(),
            "outputs": out.files,
        }),
    )?;
    print_summary(&summary)
}

// ---------------------------------------------------------------------------
// reproduce-figure
// ---------------------------------------------------------------------------

fn figure_dir(figure: Figure) -> &'static str {
    match figure {
        Figure::F1a => "fig1a",
        Figure::F1b => "fig1b",
        Figure::F2 => "fig2",
        Figure::F3a => "fig3a",
        Figure::F3b => "fig3b",
    }
}

/// Applies the reduced/full preset for a figure, then user overrides on top.
fn figure_config(args: &FigureArgs) -> Result<RunConfig> {
    let mut cfg = match &args.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let full = args.full;
    match args.figure {
        Figure::F1a | Figure::F1b => {
            cfg.grid.points = if full { 3072 } else { 1536 };
        }
        Figure::F2 => {
            cfg.grid.points = if full { 2048 } else { 1024 };
            cfg.stochastic.sigma = 0.03;
            cfg.stochastic.t_end = if full { 60.0 } else { 30.0 };
        }
        Figure::F3a | Figure::F3b => {
            cfg.grid.points = if full { 2048 } else { 1024 };
            cfg.stochastic.t_end = if full { 40.0 } else { 24.0 };
            cfg.ensemble.paths = if full { 1000 } else { 32 };
        }
    }
    args.common.overrides.apply(&mut cfg);
    let base = PathBuf::from(&cfg.output.directory).join(figure_dir(args.figure));
    cfg.output.directory = base.display().to_string();
    if let Some(out) = &args.common.out {
        cfg.output.directory = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn reproduce_figure(args: FigureArgs) -> Result<()> {
    let cfg = figure_config(&args)?;
    let t0 = Instant::now();
    let result = match args.figure {
        Figure::F1a => figure_speed_branch(&cfg, args.full),
        Figure::F1b => figure_profiles(&cfg),
        Figure::F2 => figure_frames(&cfg),
        Figure::F3a => figure_drift_curves(&cfg, args.full),
        Figure::F3b => figure_drift_scaling(&cfg, args.full),
    }?;
    let mut summary = result;
    summary["figure"] = json!(&figure_dir(args.figure)[3..]);
    summary["full"] = json!(args.full);
    summary["runtime_seconds"] = json!(t0.elapsed().as_secs_f64());
    print_summary(&summary)
}

/// Corrected-wave speed against sigma, with the quadratic prediction.
fn figure_speed_branch(cfg: &RunConfig, full: bool) -> Result<serde_json::Value> {
    let (model, wave) = solve_base_wave(cfg)?;
    let adj = adjoint_eigenfunction(&model, &wave)?;
    let expansion = speed_expansion(&model, &wave, &adj.psi)?;
    let opts = cfg.newton_opts();
    let sigmas: Vec<f64> = if full {
        (1..=15).map(|k| 0.01 * k as f64).collect()
    } else {
        vec![0.025, 0.05, 0.075, 0.1, 0.125, 0.15]
    };
    let mut out = Outputs::create(cfg)?;
    let mut rows = Vec::new();
    for &sigma in &sigmas {
        let swave = solve_stochastic_wave(&model, &wave, &adj.psi, sigma, opts)?;
        rows.push(format!(
            "{:.6},{:.10e},{:.10e},{:.10e}",
            sigma,
            swave.speed,
            swave.speed - wave.speed,
            expansion.c2 * sigma * sigma
        ));
    }
    out.write_csv(
        "fig1a.csv",
        "sigma,c_sigma,c_sigma_minus_c0,prediction_c02_sigma2",
        &rows,
    )?;
    out.write_gnuplot(
        "fig1a.gnuplot",
        "set title 'Speed of the corrected wave'\n\
         set xlabel 'sigma'\nset ylabel 'c_sigma - c_0'\nset grid\n\
         plot 'fig1a.csv' using 1:3 with linespoints pt 7 title 'computed branch', \
         'fig1a.csv' using 1:4 with lines title 'c02 sigma^2'\n",
    )?;
    out.finish_json(
        "fig1a.json",
        json!({"c0": wave.speed, "c02": expansion.c2, "sigmas": sigmas, "outputs": out.files}),
    )
}

/// Profile deformation: the corrected wave against the deterministic one.
fn figure_profiles(cfg: &RunConfig) -> Result<serde_json::Value> {
    let (model, wave) = solve_base_wave(cfg)?;
    let adj = adjoint_eigenfunction(&model, &wave)?;
    let opts = cfg.newton_opts();
    let sigmas = [0.05, 0.1, 0.15];
    let mut solved = Vec::new();
    for &sigma in &sigmas {
        solved.push(solve_stochastic_wave(&model, &wave, &adj.psi, sigma, opts)?);
    }
    let mut out = Outputs::create(cfg)?;
    let mut fields: Vec<(String, &Field)> = vec![("phi0".to_string(), &wave.profile)];
    for (s, sw) in sigmas.iter().zip(&solved) {
        fields.push((format!("phis{:03}", (s * 1000.0) as u32), &sw.profile));
    }
    let borrowed: Vec<(&str, &Field)> = fields.iter().map(|(t, f)| (t.as_str(), *f)).collect();
    let (header, rows) = field_table(&borrowed)?;
    out.write_csv("fig1b.csv", &header, &rows)?;
    out.write_gnuplot(
        "fig1b.gnuplot",
        "set title 'Profile deformation with noise'\n\
         set xlabel 'xi'\nset grid\n\
         plot 'fig1b.csv' using 1:2 with lines lw 2 title 'phi0 (u)', \
         'fig1b.csv' using 1:4 with lines title 'sigma=0.05', \
         'fig1b.csv' using 1:6 with lines title 'sigma=0.10', \
         'fig1b.csv' using 1:8 with lines title 'sigma=0.15'\n",
    )?;
    out.finish_json(
        "fig1b.json",
        json!({
            "c0": wave.speed,
            "sigmas": sigmas,
            "speeds": solved.iter().map(|s| s.speed).collect::<Vec<_>>(),
            "outputs": out.files,
        }),
    )
}

/// One path shown in the co-moving frames: pinned when tracked, drifting in
/// the deterministic frame.
fn figure_frames(cfg: &RunConfig) -> Result<serde_json::Value> {
    let gap = check_eps(cfg)?;
    let (model, wave, adj, swave) = stochastic_stage(cfg)?;
    let mut sim = sim_config(cfg, model, swave, adj.psi.clone(), wave.speed)?;
    let n_snap = 7;
    sim.snapshot_times = (0..n_snap)
        .map(|k| cfg.stochastic.t_end * k as f64 / (n_snap - 1) as f64)
        .collect();
    if let Some(first) = sim.snapshot_times.first_mut() {
        *first = sim.dt;
    }
    sim.validate()?;
    let record = run_path(&sim, cfg.ensemble.seed)?;
    let mut out = Outputs::create(cfg)?;

    // Space-time tables, one column per snapshot, u component only.
    for (tag, pick) in [
        ("gamma", 0usize),
        ("c0", 1usize),
        ("csigma", 2usize),
    ] {
        let mut header = "xi".to_string();
        for s in &record.snapshots {
            write!(header, ",t{:.1}", s.t).unwrap();
        }
        let grid = sim.swave.profile.grid().clone();
        let mut rows = Vec::with_capacity(grid.points());
        for i in 0..grid.points() {
            let mut row = format!("{:.10e}", grid.node(i));
            for s in &record.snapshots {
                let f = match pick {
                    0 => &s.frame_gamma,
                    1 => &s.frame_c0,
                    _ => &s.frame_csigma,
                };
                write!(row, ",{:.10e}", f.component_slice(0)[i]).unwrap();
            }
            rows.push(row);
        }
        out.write_csv(&format!("fig2_frame_{tag}.csv"), &header, &rows)?;
    }
    let rows: Vec<String> = (0..record.times.len())
        .map(|i| {
            format!(
                "{:.6},{:.10e},{:.10e}",
                record.times[i], record.gamma_minus_cst[i], record.position_series[i]
            )
        })
        .collect();
    out.write_csv("fig2_path.csv", "t,gamma_minus_cst,position", &rows)?;
    out.write_gnuplot(
        "fig2.gnuplot",
        "set title 'Snapshots in the tracked frame (pinned) and c0 frame (drifting)'\n\
         set xlabel 'xi'\nset grid\n\
         plot for [i=2:8] 'fig2_frame_gamma.csv' using 1:i with lines notitle, \
         for [i=2:8] 'fig2_frame_c0.csv' using 1:i with lines dt 2 notitle\n",
    )?;
    out.finish_json(
        "fig2.json",
        json!({
            "sigma": cfg.stochastic.sigma,
            "seed": cfg.ensemble.seed,
            "gap_beta": gap,
            "c_sigma": sim.swave.speed,
            "snapshot_times": sim.snapshot_times,
            "sup_neps": record.sup_neps,
            "outputs": out.files,
        }),
    )
}

/// Ensemble mean of the variance-reduced phase at two noise levels, with the
/// predicted second-order slopes.
fn figure_drift_curves(cfg: &RunConfig, full: bool) -> Result<serde_json::Value> {
    let gap = check_eps(cfg)?;
    let (model, wave) = solve_base_wave(cfg)?;
    let adj = adjoint_eigenfunction(&model, &wave)?;
    let expansion = speed_expansion(&model, &wave, &adj.psi)?;
    let quad = quadrature_for(cfg, gap)?;
    let cut = Cutoffs::new(100.0)?;
    let opts = cfg.newton_opts();
    let sigmas = [0.05, 0.1];
    let paths = if full { 1000 } else { cfg.ensemble.paths };

    let mut curves = Vec::new();
    let mut slopes = Vec::new();
    for (k, &sigma) in sigmas.iter().enumerate() {
        let swave = solve_stochastic_wave(&model, &wave, &adj.psi, sigma, opts)?;
        let coeffs = drift_coefficients(&model, &wave, &swave, &adj.psi, &cut, &quad, expansion.c2)?;
        let mut scfg = cfg.clone();
        scfg.stochastic.sigma = sigma;
        let sim = sim_config(&scfg, model.clone(), swave, adj.psi.clone(), wave.speed)?;
        let stats = run_ensemble(&sim, paths, derive_seed(cfg.ensemble.seed, k as u64), None)?;
        slopes.push(coeffs.c_od_general * sigma * sigma);
        curves.push(stats);
    }
    let mut out = Outputs::create(cfg)?;

    let n = curves[0].times.len().min(curves[1].times.len());
    let rows: Vec<String> = (0..n)
        .map(|i| {
            format!(
                "{:.6},{:.10e},{:.10e},{:.10e},{:.10e}",
                curves[0].times[i],
                curves[0].mean_drift[i],
                curves[0].sem_drift[i],
                curves[1].mean_drift[i],
                curves[1].sem_drift[i],
            )
        })
        .collect();
    out.write_csv(
        "fig3a.csv",
        "t,mean_drift_s005,sem_s005,mean_drift_s010,sem_s010",
        &rows,
    )?;
    out.write_gnuplot(
        "fig3a.gnuplot",
        &format!(
            "set title 'Second-order phase drift'\n\
             set xlabel 't'\nset ylabel 'E[Gamma - c_sigma t - sigma b beta]'\nset grid\n\
             plot 'fig3a.csv' using 1:2:3 with yerrorlines title 'sigma=0.05', \
             'fig3a.csv' using 1:4:5 with yerrorlines title 'sigma=0.10', \
             {:.6e}*x with lines dt 2 title 'predicted slope 0.05', \
             {:.6e}*x with lines dt 2 title 'predicted slope 0.10'\n",
            slopes[0], slopes[1]
        ),
    )?;
    out.finish_json(
        "fig3a.json",
        json!({
            "sigmas": sigmas,
            "paths": paths,
            "predicted_slopes": slopes,
            "c_od_obs": curves.iter().map(|s| s.c_od_obs).collect::<Vec<_>>(),
            "outputs": out.files,
        }),
    )
}

/// Observed drift rate against sigma^2, with the predicted line.
fn figure_drift_scaling(cfg: &RunConfig, full: bool) -> Result<serde_json::Value> {
    let sigmas: Vec<f64> = if full {
        vec![0.02, 0.04, 0.06, 0.08, 0.1, 0.12]
    } else {
        vec![0.04, 0.08, 0.12]
    };
    let (c0, c02, rows) = sweep_over_sigmas(cfg, &sigmas)?;
    let mut out = Outputs::create(cfg)?;
    out.write_csv("fig3b.csv", SWEEP_HEADER, &sweep_csv(&rows))?;
    out.write_gnuplot(
        "fig3b.gnuplot",
        "set title 'Drift rate scaling'\n\
         set xlabel 'sigma^2'\nset ylabel 'drift rate'\nset grid\n\
         plot 'fig3b.csv' using ($1*$1):4 with points pt 7 title 'observed', \
         'fig3b.csv' using ($1*$1):5 with lines title 'predicted c_od sigma^2'\n",
    )?;
    out.finish_json(
        "fig3b.json",
        json!({
            "c0": c0,
            "c02": c02,
            "sigmas": sigmas,
            "paths_per_sigma": cfg.ensemble.paths,
            "outputs": out.files,
        }),
    )
}
