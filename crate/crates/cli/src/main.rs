//! `harvest`: solve, simulate, inspect regions and run the check suite from
//! a TOML run configuration.

mod artifacts;
mod config;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use harvest_core::chain::{slice_file_name, write_slice_csv};
use harvest_core::checks::Fault;
use harvest_core::policy_sim::{region_metrics, SliceSelector};
use harvest_core::{build_grid, run_suite, simulate, solve, Error, GridOverrides, Policy, SuiteConfig};

use config::RunConfig;

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
    pub fn config(message: impl Into<String>) -> Self {
        Self::new(1, message)
    }
    pub fn non_convergence(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }
    pub fn io(message: impl Into<String>) -> Self {
        Self::new(3, message)
    }
    pub fn hash_mismatch(message: impl Into<String>) -> Self {
        Self::new(4, message)
    }
    pub fn check_failed(message: impl Into<String>) -> Self {
        Self::new(5, message)
    }
    pub fn inadmissible(message: impl Into<String>) -> Self {
        Self::new(6, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::NoConvergence { .. } => Self::non_convergence(e.to_string()),
            Error::Mismatch(_) => Self::hash_mismatch(e.to_string()),
            _ => Self::config(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "harvest", version, about = "Optimal harvesting and renewal of a stochastic logistic resource")]
struct Cli {
    /// Run configuration (TOML). `model.K` must be set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding `output.directory`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Simulation seed, overriding `sim.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    quiet: bool,
    #[arg(long, global = true, hide = true, value_enum)]
    inject_fault: Option<FaultArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the value function and write the field, regions and slices.
    Solve,
    /// Monte Carlo run of the strategy read from a solved field.
    Simulate,
    /// Write the region labels of one slice and print its summary.
    Regions {
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        #[arg(long, default_value_t = 0)]
        combo: usize,
    },
    /// Run the verification suite and write `check_report.txt`.
    Check {
        /// Use the configured grid instead of the reduced one.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    NegativeRate,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    quiet: bool,
    fault: Option<Fault>,
}

impl Ctx {
    fn say(&self, line: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", line.as_ref());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::io(format!("{}: {e}", path.display()))
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::parse("")?,
    };
    if let Some(out) = &cli.out {
        cfg.output.directory = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.sim.seed = seed;
    }
    Ok(cfg)
}

fn model_warnings(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    let mut warnings = cfg.params().validate_allowing_degenerate()?;
    if cfg.model.gamma == 0.0 && !warnings.iter().any(|w| w.contains("gamma")) {
        warnings.push("gamma = 0: the stock is deterministic".into());
    }
    Ok(warnings)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("--threads: {e}")))?;
    }
    let cfg = load_config(&cli)?;
    let ctx = Ctx {
        out: cfg.output.directory.clone(),
        cfg,
        quiet: cli.quiet,
        fault: cli.inject_fault.map(|FaultArg::NegativeRate| Fault::NegativeRate),
    };
    std::fs::create_dir_all(&ctx.out).map_err(io_at(&ctx.out))?;
    match cli.command {
        Command::Solve => cmd_solve(&ctx),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Regions { time, combo } => cmd_regions(&ctx, time, combo),
        Command::Check { full } => cmd_check(&ctx, full),
    }
}

fn cmd_solve(ctx: &Ctx) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let warnings = model_warnings(cfg)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let params = cfg.params();
    let sol = solve(&params, &cfg.grid_overrides(), &cfg.solver_options())?;

    let resolved = ctx.path("resolved_config.toml");
    std::fs::write(&resolved, cfg.resolved()).map_err(io_at(&resolved))?;
    let hash = cfg.solve_hash();
    artifacts::write_meta(&ctx.path("meta.txt"), &hash, &sol, &warnings)?;
    artifacts::write_field(&ctx.path("field.bin"), &sol.field)?;
    artifacts::write_regions(&ctx.path("regions.bin"), &sol.regions)?;

    let grid = &sol.field.grid;
    let out = &cfg.output;
    let regions_path = ctx.path("regions.csv");
    let mut regions_csv = if out.emit_csv {
        let mut w = BufWriter::new(File::create(&regions_path).map_err(io_at(&regions_path))?);
        writeln!(w, "{}", artifacts::REGIONS_HEADER).map_err(io_at(&regions_path))?;
        Some(w)
    } else {
        None
    };
    for &t in &out.slice_times {
        let (k, step) = sol.field.locate_time(t);
        let combos = grid.combos(sol.field.intervals[k].pending_count);
        for &combo in &out.slice_combos {
            if combo >= combos {
                eprintln!("warning: slice t={t} has {combos} pending combinations, skipping combo {combo}");
                continue;
            }
            if let Some(w) = regions_csv.as_mut() {
                let name = ctx.path(&slice_file_name(k, step, combo));
                let file = BufWriter::new(File::create(&name).map_err(io_at(&name))?);
                write_slice_csv(file, sol.field.slice(k, step, combo), grid).map_err(io_at(&name))?;
                artifacts::write_region_rows(w, &sol.regions, k, step, combo).map_err(io_at(&regions_path))?;
            }
            if out.emit_pgm {
                let name = ctx.path(&format!("regions_k{k}_t{step}_e{combo}.pgm"));
                artifacts::write_pgm(&name, &sol.regions, k, step, combo)?;
            }
        }
    }
    if let Some(mut w) = regions_csv {
        w.flush().map_err(io_at(&regions_path))?;
    }

    let [_, r0, p0, _] = cfg.sim.z0;
    let v0 = sol.value_at_origin(r0, p0, &cfg.sim.pending0).ok();
    let s = &sol.stats;
    ctx.say(format!(
        "solved {}x{} grid, {} intervals, {} implicit steps, {} policy iterations, {:.1}s",
        grid.n_r,
        grid.n_s,
        sol.field.intervals.len(),
        s.implicit_steps,
        s.policy_iterations,
        s.wall_time_secs
    ));
    if let Some(v) = v0 {
        ctx.say(format!("w(0, r={r0}, p={p0}) = {v:.8}"));
    }
    ctx.say(format!("config_hash {hash}"));
    Ok(())
}

/// Fails with exit code 4 unless the stored field was solved from the same
/// model, grid and solver settings.
fn check_hash(ctx: &Ctx) -> Result<(), CliError> {
    let stored = artifacts::read_meta_hash(&ctx.path("meta.txt"))?;
    let current = ctx.cfg.solve_hash();
    if stored != current {
        return Err(CliError::hash_mismatch(format!(
            "{} was solved with config hash {stored}, current config hashes to {current}; run `harvest solve` first",
            ctx.out.display()
        )));
    }
    Ok(())
}

fn cmd_simulate(ctx: &Ctx) -> Result<(), CliError> {
    check_hash(ctx)?;
    let cfg = &ctx.cfg;
    let field = artifacts::read_field(&ctx.path("field.bin"))?;
    let run = simulate(Policy::Extracted(&field), cfg.z0(), &cfg.sim.pending0, &cfg.params(), &cfg.sim_config())?;
    let report = &run.report;

    let path = ctx.path("sim_report.csv");
    std::fs::write(&path, format!("{}\n{}\n", harvest_core::SimReport::CSV_HEADER, report.csv_row()))
        .map_err(io_at(&path))?;
    if !run.trace.is_empty() {
        let path = ctx.path("paths.csv");
        let mut w = BufWriter::new(File::create(&path).map_err(io_at(&path))?);
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "{}", harvest_core::policy_sim::TraceRow::CSV_HEADER)?;
            for row in &run.trace {
                writeln!(w, "{}", row.csv_row())?;
            }
            w.flush()
        };
        write().map_err(io_at(&path))?;
    }
    ctx.say(format!(
        "J = {:.8} (SE {:.2e}), grid value {:.8}, relative gap {:.4}, {} paths",
        report.j_mc, report.std_error, report.pde_value, report.rel_gap, report.n_paths
    ));
    if report.admissibility_violations > 0 {
        return Err(CliError::inadmissible(format!(
            "{} admissibility violations",
            report.admissibility_violations
        )));
    }
    Ok(())
}

fn cmd_regions(ctx: &Ctx, time: f64, combo: usize) -> Result<(), CliError> {
    check_hash(ctx)?;
    let regions = artifacts::read_regions(&ctx.path("regions.bin"))?;
    let sel = SliceSelector::at_time(&regions, time, combo);
    let combos = regions.grid.combos(regions.intervals[sel.k].pending_count);
    if combo >= combos {
        return Err(CliError::config(format!(
            "--combo {combo}: the slice at t={time} has {combos} pending combinations"
        )));
    }
    let m = region_metrics(&regions, sel)?;
    let path = ctx.path(&format!("regions_k{}_t{}_e{combo}.csv", sel.k, sel.step));
    let mut w = BufWriter::new(File::create(&path).map_err(io_at(&path))?);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{}", artifacts::REGIONS_HEADER)?;
        artifacts::write_region_rows(&mut w, &regions, sel.k, sel.step, combo)?;
        w.flush()
    };
    write().map_err(io_at(&path))?;
    ctx.say(format!(
        "slice k={} step={} combo={combo}: continue={} harvest={} plant={} plant_and_harvest={} \
harvest_monotonicity_violations={} harvest_boundary_nodes={} max_plant_r={}",
        sel.k,
        sel.step,
        m.continue_nodes,
        m.harvest_area,
        m.plant_area,
        m.plant_and_harvest_nodes,
        m.harvest_monotonicity_violations,
        m.harvest_boundary_nodes,
        m.max_plant_r.map_or("none".to_string(), |r| format!("{r:.6}"))
    ));
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}

fn cmd_check(ctx: &Ctx, full: bool) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    for w in model_warnings(cfg)? {
        eprintln!("warning: {w}");
    }
    let params = cfg.params();
    let overrides = if full {
        cfg.grid_overrides()
    } else {
        GridOverrides {
            r_max: cfg.grid.r_max,
            s_min: cfg.grid.s_min,
            s_max: cfg.grid.s_max,
            n_e: cfg.grid.n_e,
            ..GridOverrides::reduced()
        }
    };
    let grid = build_grid(&params, &overrides)?;
    let suite = SuiteConfig {
        sim: cfg.sim_config(),
        z0: cfg.z0(),
        ..SuiteConfig::default()
    };
    let report = run_suite(&params, &grid, &cfg.solver_options(), &suite, ctx.fault)?;
    let path = ctx.path("check_report.txt");
    std::fs::write(&path, report.to_string()).map_err(io_at(&path))?;
    ctx.say(report.to_string().trim_end());
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.failures().map(|l| l.name.as_str()).collect();
        Err(CliError::check_failed(format!("failed checks: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
