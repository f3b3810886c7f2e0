//! Command-line driver: configured runs with CSV export, matrix
//! certification, and refinement studies.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{ConfigError, GateSummary, RunConfig, RunManifest};
use crate::diagnostics::conservation_report;
use crate::grid::Grid1D;
use crate::onsager::{
    certify_m2, certify_m3, friction_matrix, group_inverse, reduced_coercivity_check,
    FrictionSpec, MatrixModel,
};
use crate::scheme::{run, SolverError, Trajectory, TrajectoryEntry};
use crate::thermo::MixtureState;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error on `{path}`: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Solver(#[from] SolverError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_GATE_VIOLATION: i32 = 2;
pub const EXIT_ABORT: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "msf1d", version, about = "Entropy-stable 1D Maxwell-Stefan-Fourier solver")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Execute one or more configured simulations and export CSV data.
    Run {
        /// Configuration files (TOML); a run manifest is also accepted.
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        /// Override the output directory (per-config subdirectories when
        /// several configs are given).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Execute multiple configs concurrently in isolated directories.
        #[arg(long)]
        sweep: bool,
    },
    /// Print coercivity certificates and structural identities for the
    /// configured matrix model.
    CheckMatrix {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the configured refinement ladders and report observed orders.
    Convergence {
        #[arg(long)]
        config: PathBuf,
    },
}

pub fn main_entry<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run {
            configs,
            out,
            sweep,
        } => cmd_run(&configs, out.as_deref(), sweep),
        Command::CheckMatrix { config } => cmd_check_matrix(&config),
        Command::Convergence { config } => cmd_convergence(&config),
    }
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

pub fn cmd_run(configs: &[PathBuf], out: Option<&Path>, sweep: bool) -> i32 {
    let out_dir_for = |path: &Path, config: &RunConfig| -> PathBuf {
        match (out, configs.len()) {
            (Some(dir), 1) => dir.to_path_buf(),
            (Some(dir), _) => {
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "run".to_string());
                dir.join(stem)
            }
            (None, _) => PathBuf::from(&config.output.dir),
        }
    };
    let run_one = |path: &PathBuf| -> i32 {
        match RunConfig::from_path(path) {
            Ok(config) => {
                let dir = out_dir_for(path, &config);
                match execute_run(&config, &dir) {
                    Ok(code) => {
                        println!(
                            "run `{}` finished with exit code {code}; output in `{}`",
                            path.display(),
                            dir.display()
                        );
                        code
                    }
                    Err(e) => {
                        eprintln!("run `{}` failed: {e}", path.display());
                        if matches!(e, CliError::Solver(_)) {
                            EXIT_ABORT
                        } else {
                            EXIT_ERROR
                        }
                    }
                }
            }
            Err(e) => {
                eprintln!("config `{}`: {e}", path.display());
                EXIT_ERROR
            }
        }
    };
    if sweep && configs.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = configs
                .iter()
                .map(|path| scope.spawn(move || run_one(path)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or(EXIT_ERROR))
                .max()
                .unwrap_or(EXIT_OK)
        })
    } else {
        configs.iter().map(run_one).max().unwrap_or(EXIT_OK)
    }
}

/// Runs one configuration, streaming `fields.csv` and `diagnostics.csv`
/// into `dir` and finishing with `manifest.toml`. Returns the exit code:
/// 0 clean, 2 when a structural gate fired, 3 on solver abort.
pub fn execute_run(config: &RunConfig, dir: &Path) -> Result<i32, CliError> {
    let started = Instant::now();
    let scheme_cfg = config.scheme_config()?;
    let initial = config.initial_state()?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let fields_path = dir.join("fields.csv");
    let diag_path = dir.join("diagnostics.csv");
    let mut fields = BufWriter::new(fs::File::create(&fields_path).map_err(io_err(&fields_path))?);
    let mut diag = BufWriter::new(fs::File::create(&diag_path).map_err(io_err(&diag_path))?);
    let n = config.n;

    write_fields_header(&mut fields, n).map_err(io_err(&fields_path))?;
    write_diag_header(&mut diag, n).map_err(io_err(&diag_path))?;
    write_fields_state(&mut fields, 0.0, &initial).map_err(io_err(&fields_path))?;
    write_diag_initial(&mut diag, &initial, &scheme_cfg).map_err(io_err(&diag_path))?;

    let stride = config.output.stride;
    let mut step_index = 0usize;
    let mut last_written = 0usize;
    let mut stream_error: Option<std::io::Error> = None;
    let result = run(&initial, &scheme_cfg, config.time.t_end, |entry| {
        step_index += 1;
        if stream_error.is_some() {
            return;
        }
        if step_index % stride == 0 {
            if let Err(e) = write_fields_state(&mut fields, entry.t, &entry.state) {
                stream_error = Some(e);
                return;
            }
            last_written = step_index;
        }
        if let Err(e) = write_diag_row(&mut diag, entry) {
            stream_error = Some(e);
        }
    });
    if let Some(e) = stream_error {
        return Err(CliError::Io {
            path: dir.display().to_string(),
            source: e,
        });
    }

    let (trajectory, abort_reason): (Option<Trajectory>, Option<String>) = match result {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let mut violations = Vec::new();
    let mut conservation_flagged = false;
    let mut entropy_pass = true;
    let mut positivity_pass = true;
    if let Some(t) = &trajectory {
        if last_written != step_index && !t.entries.is_empty() {
            let last = t.entries.last().unwrap();
            write_fields_state(&mut fields, last.t, &last.state).map_err(io_err(&fields_path))?;
        }
        violations.extend(t.violations.iter().cloned());
        entropy_pass = t.entries.iter().all(|e| e.report.ledger.pass);
        positivity_pass = t.entries.iter().all(|e| e.report.structural_ok);
        conservation_flagged = conservation_report(t, &scheme_cfg).flagged;
        if conservation_flagged {
            violations.push("conservation drift beyond 1e-10".to_string());
        }
    } else if let Some(reason) = &abort_reason {
        violations.push(format!("abort: {reason}"));
    }
    fields.flush().map_err(io_err(&fields_path))?;
    diag.flush().map_err(io_err(&diag_path))?;

    let exit_code = if abort_reason.is_some() {
        EXIT_ABORT
    } else if !violations.is_empty() {
        EXIT_GATE_VIOLATION
    } else {
        EXIT_OK
    };

    let manifest = RunManifest {
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        output_files: vec![
            fields_path.display().to_string(),
            diag_path.display().to_string(),
        ],
        gates: GateSummary {
            entropy_pass,
            positivity_pass,
            conservation_flagged,
            violations,
        },
        config: config.clone(),
    };
    let manifest_path = dir.join("manifest.toml");
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;

    if let Some(reason) = abort_reason {
        eprintln!("aborted: {reason}");
    }
    Ok(exit_code)
}

fn write_fields_header(w: &mut impl Write, n: usize) -> std::io::Result<()> {
    write!(w, "t,x")?;
    for i in 1..=n {
        write!(w, ",rho_{i}")?;
    }
    writeln!(w, ",theta")
}

fn write_fields_state(w: &mut impl Write, t: f64, state: &MixtureState) -> std::io::Result<()> {
    let grid = state.grid();
    for k in 0..grid.cells() {
        write!(w, "{t},{}", grid.center(k))?;
        for rho in &state.rho {
            write!(w, ",{}", rho.values()[k])?;
        }
        writeln!(w, ",{}", state.theta.values()[k])?;
    }
    Ok(())
}

fn write_diag_header(w: &mut impl Write, n: usize) -> std::io::Result<()> {
    write!(w, "t,entropy,entropy_slack")?;
    for i in 1..=n {
        write!(w, ",mass_{i}")?;
    }
    writeln!(
        w,
        ",energy,min_rho,min_theta,max_theta,newton_iters,diffusion_production,heat_production,boundary_production"
    )
}

fn write_diag_initial(
    w: &mut impl Write,
    state: &MixtureState,
    cfg: &crate::scheme::SchemeConfig,
) -> std::io::Result<()> {
    let (y, _) = crate::thermo::potentials_from_densities(state).expect("positive state");
    let phi = crate::diagnostics::relative_entropy(&y, &state.rho_total, cfg.theta0);
    write!(w, "0,{phi},0")?;
    for rho in &state.rho {
        write!(w, ",{}", crate::grid::integrate(rho))?;
    }
    let energy = crate::grid::integrate(&crate::grid::Field::new(
        state.grid(),
        state
            .rho_total
            .values()
            .iter()
            .zip(state.theta.values())
            .map(|(r, t)| r * t)
            .collect(),
    ));
    let min_rho = state
        .rho
        .iter()
        .map(|f| f.min())
        .fold(f64::INFINITY, f64::min);
    writeln!(
        w,
        ",{energy},{min_rho},{},{},0,0,0,0",
        state.theta.min(),
        state.theta.max()
    )
}

fn write_diag_row(w: &mut impl Write, entry: &TrajectoryEntry) -> std::io::Result<()> {
    let r = &entry.report;
    let ledger = &r.ledger;
    let slack = ledger.slack_budget
        - (ledger.phi_after - ledger.phi_before + r.tau * ledger.total_production());
    write!(w, "{},{},{slack}", entry.t, ledger.phi_after)?;
    for m in &r.masses {
        write!(w, ",{m}")?;
    }
    let min_rho = r.rho_min.iter().copied().fold(f64::INFINITY, f64::min);
    writeln!(
        w,
        ",{},{min_rho},{},{},{},{},{},{}",
        r.energy,
        r.theta_min,
        r.theta_max,
        r.stats.newton_iterations + r.stats.picard_iterations,
        ledger.diffusion_production,
        ledger.heat_production,
        ledger.boundary_production
    )
}

// ---------------------------------------------------------------------------
// check-matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MatrixCheckOutcome {
    pub lines: Vec<String>,
    pub min_c_m2: f64,
    pub c_m3: f64,
    pub pass: bool,
}

pub fn check_matrix_outcome(config: &RunConfig) -> Result<MatrixCheckOutcome, CliError> {
    let model = config.matrix_model()?;
    let check = config.check.clone().unwrap_or_default();
    let n = config.n;
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let states: Vec<(Vec<f64>, f64)> = (0..check.samples.max(1))
        .map(|_| {
            let rho: Vec<f64> = (0..n)
                .map(|_| rng.gen_range(check.rho_min..check.rho_max))
                .collect();
            let theta = rng.gen_range(check.theta_min..check.theta_max);
            (rho, theta)
        })
        .collect();

    let mut lines = Vec::new();
    lines.push(format!(
        "check-matrix: model={} n={n} samples={} seed={}",
        config.matrix.model, check.samples, check.seed
    ));

    let mut max_structural: f64 = 0.0;
    let mut min_c_m2 = f64::INFINITY;
    let mut reduced_ok = true;
    let mut max_group_residual: f64 = 0.0;
    for (rho, theta) in &states {
        let onsager = model
            .evaluate(rho, *theta)
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        let res = onsager.structural_residuals();
        max_structural = max_structural
            .max(res.column_sum)
            .max(res.symmetry)
            .max(res.soret_sum)
            .max((-res.min_eigenvalue).max(0.0));
        let cert = certify_m2(&onsager);
        min_c_m2 = min_c_m2.min(cert.c_m);
        reduced_ok &= reduced_coercivity_check(&onsager, cert.c_m).pass;
        if let MatrixModel::MaxwellStefan { friction, .. } = &model {
            max_group_residual = max_group_residual.max(group_identity_residual(rho, friction)?);
        }
    }
    let m3 = certify_m3(&model, &states).map_err(|e| ConfigError::Parse(e.to_string()))?;

    let structural_ok = max_structural <= 1e-10;
    let m2_ok = min_c_m2 >= check.floor_m2;
    let m3_ok = m3.c_m >= check.floor_m3;
    let group_ok = max_group_residual <= 1e-10;
    lines.push(format!(
        "  structural identities (column sums, symmetry, PSD): max residual {max_structural:.3e}  [{}]",
        pass_str(structural_ok)
    ));
    if matches!(model, MatrixModel::MaxwellStefan { .. }) {
        lines.push(format!(
            "  group-inverse identities (BB#B=B, B#BB#=B#, BB#=B#B, B#rho=0, 1'B#=0): max residual {max_group_residual:.3e}  [{}]",
            pass_str(group_ok)
        ));
    }
    lines.push(format!(
        "  M2 certificate: min c_M = {min_c_m2:.6e} over samples (floor {:.1e})  [{}]",
        check.floor_m2,
        pass_str(m2_ok)
    ));
    lines.push(format!(
        "  reduced (n-1)-block coercivity >= c_M/n: [{}]",
        pass_str(reduced_ok)
    ));
    lines.push(format!(
        "  M3 certificate: c_M = {:.6e} over samples (floor {:.1e})  [{}]",
        m3.c_m,
        check.floor_m3,
        pass_str(m3_ok)
    ));
    let pass = structural_ok && m2_ok && m3_ok && reduced_ok && group_ok;
    lines.push(format!("overall: [{}]", pass_str(pass)));
    Ok(MatrixCheckOutcome {
        lines,
        min_c_m2,
        c_m3: m3.c_m,
        pass,
    })
}

fn group_identity_residual(rho: &[f64], friction: &FrictionSpec) -> Result<f64, CliError> {
    let fric = friction_matrix(rho, friction).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let sharp = group_inverse(&fric).map_err(|e| ConfigError::Parse(e.to_string()))?;
    let b = &fric.matrix;
    let scale = 1.0 + b.amax() + sharp.amax();
    let mut res = ((b * &sharp * b) - b).amax() / scale;
    res = res.max(((&sharp * b * &sharp) - &sharp).amax() / scale);
    res = res.max(((b * &sharp) - (&sharp * b)).amax() / scale);
    let rho_v = nalgebra::DVector::from_column_slice(rho);
    res = res.max((&sharp * rho_v).amax() / scale);
    for j in 0..rho.len() {
        let col: f64 = (0..rho.len()).map(|i| sharp[(i, j)]).sum();
        res = res.max(col.abs() / scale);
    }
    Ok(res)
}

fn pass_str(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

pub fn cmd_check_matrix(path: &Path) -> i32 {
    match RunConfig::from_path(path).map_err(CliError::from).and_then(|c| check_matrix_outcome(&c))
    {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            if outcome.pass {
                EXIT_OK
            } else {
                EXIT_ERROR
            }
        }
        Err(e) => {
            eprintln!("check-matrix `{}`: {e}", path.display());
            EXIT_ERROR
        }
    }
}

// ---------------------------------------------------------------------------
// convergence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct LadderResult {
    pub labels: Vec<String>,
    pub errors: Vec<f64>,
    pub orders: Vec<f64>,
    pub monotone: bool,
    pub observed_order: f64,
    pub order_ok: bool,
}

#[derive(Debug, Clone)]
pub struct ConvergenceOutcome {
    pub spatial: Option<LadderResult>,
    pub temporal: Option<LadderResult>,
    pub pass: bool,
}

impl ConvergenceOutcome {
    pub fn table(&self) -> String {
        let mut out = String::new();
        if let Some(s) = &self.spatial {
            out.push_str("spatial ladder (cells, max error vs reference, order):\n");
            push_ladder(&mut out, s);
            out.push_str(&format!(
                "  observed spatial order {:.3} (target 2 +- 0.2) [{}]\n",
                s.observed_order,
                pass_str(s.order_ok && s.monotone)
            ));
        }
        if let Some(t) = &self.temporal {
            out.push_str("temporal ladder (tau, max error vs reference, order):\n");
            push_ladder(&mut out, t);
            out.push_str(&format!(
                "  observed temporal order {:.3} (target 1 +- 0.2) [{}]\n",
                t.observed_order,
                pass_str(t.order_ok && t.monotone)
            ));
        }
        out
    }
}

fn push_ladder(out: &mut String, l: &LadderResult) {
    for (i, label) in l.labels.iter().enumerate() {
        let order = if i == 0 {
            "    -".to_string()
        } else {
            format!("{:8.3}", l.orders[i - 1])
        };
        out.push_str(&format!("  {label:>10}  {:12.5e}  {order}\n", l.errors[i]));
    }
}

pub fn convergence_study(config: &RunConfig) -> Result<ConvergenceOutcome, CliError> {
    let conv = config
        .convergence
        .clone()
        .ok_or_else(|| ConfigError::Invalid {
            key: "convergence".into(),
            message: "missing [convergence] section".into(),
        })?;
    let mut spatial = None;
    if let Some(ladder) = &conv.spatial {
        let mut errors = Vec::new();
        let mut labels = Vec::new();
        // reference: two extra doublings, with tau scaled like h^2 so both
        // error terms shrink at the same rate along the ladder
        let ref_cells = ladder.base_cells << (ladder.levels + 1);
        let ref_tau = ladder.tau / 4f64.powi(ladder.levels as i32 + 1);
        let reference = final_state(config, ref_cells, ref_tau, ladder.t_end)?;
        for j in 0..ladder.levels {
            let cells = ladder.base_cells << j;
            let tau = ladder.tau / 4f64.powi(j as i32);
            let state = final_state(config, cells, tau, ladder.t_end)?;
            errors.push(restricted_error(&state, &reference));
            labels.push(format!("N={cells}"));
        }
        spatial = Some(ladder_result(labels, errors, 2.0, 0.2));
    }
    let mut temporal = None;
    if let Some(ladder) = &conv.temporal {
        let mut errors = Vec::new();
        let mut labels = Vec::new();
        let ref_tau = ladder.base_tau / 2f64.powi(ladder.levels as i32 + 2);
        let reference = final_state(config, ladder.cells, ref_tau, ladder.t_end)?;
        for j in 0..ladder.levels {
            let tau = ladder.base_tau / 2f64.powi(j as i32);
            let state = final_state(config, ladder.cells, tau, ladder.t_end)?;
            errors.push(restricted_error(&state, &reference));
            labels.push(format!("tau={tau:.3e}"));
        }
        temporal = Some(ladder_result(labels, errors, 1.0, 0.2));
    }
    let pass = spatial.as_ref().map_or(true, |s| s.order_ok && s.monotone)
        && temporal.as_ref().map_or(true, |t| t.order_ok && t.monotone);
    Ok(ConvergenceOutcome {
        spatial,
        temporal,
        pass,
    })
}

fn ladder_result(labels: Vec<String>, errors: Vec<f64>, target: f64, width: f64) -> LadderResult {
    let orders: Vec<f64> = errors
        .windows(2)
        .map(|w| (w[0] / w[1]).log2())
        .collect();
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    let observed = *orders.last().unwrap_or(&f64::NAN);
    LadderResult {
        labels,
        errors,
        monotone,
        observed_order: observed,
        order_ok: (observed - target).abs() <= width,
        orders,
    }
}

fn final_state(
    config: &RunConfig,
    cells: usize,
    tau: f64,
    t_end: f64,
) -> Result<MixtureState, CliError> {
    let grid = Grid1D::new(config.domain.length, cells)
        .map_err(|e| ConfigError::Parse(e.to_string()))?;
    let initial = config.initial_state_on(grid)?;
    let mut scheme_cfg = config.scheme_config()?;
    scheme_cfg.tau = tau;
    let trajectory = run(&initial, &scheme_cfg, t_end, |_| {})?;
    Ok(trajectory
        .entries
        .last()
        .map(|e| e.state.clone())
        .unwrap_or(initial))
}

/// Max-norm difference after restricting the finer state onto the coarser
/// grid by cell averaging (grids nest by powers of two).
fn restricted_error(coarse: &MixtureState, fine: &MixtureState) -> f64 {
    let nc = coarse.grid().cells();
    let nf = fine.grid().cells();
    assert!(nf % nc == 0, "grids must nest");
    let factor = nf / nc;
    let restrict = |fine_vals: &[f64], k: usize| -> f64 {
        fine_vals[k * factor..(k + 1) * factor].iter().sum::<f64>() / factor as f64
    };
    let mut err: f64 = 0.0;
    for k in 0..nc {
        for (c_rho, f_rho) in coarse.rho.iter().zip(&fine.rho) {
            err = err.max((c_rho.values()[k] - restrict(f_rho.values(), k)).abs());
        }
        err = err.max((coarse.theta.values()[k] - restrict(fine.theta.values(), k)).abs());
    }
    err
}

pub fn cmd_convergence(path: &Path) -> i32 {
    match RunConfig::from_path(path)
        .map_err(CliError::from)
        .and_then(|c| convergence_study(&c))
    {
        Ok(outcome) => {
            print!("{}", outcome.table());
            if outcome.pass {
                EXIT_OK
            } else {
                EXIT_ERROR
            }
        }
        Err(e) => {
            eprintln!("convergence `{}`: {e}", path.display());
            EXIT_ERROR
        }
    }
}
