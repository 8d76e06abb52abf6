//! The `erw` command line: argument parsing and subcommand dispatch.
//!
//! Exit codes: 0 success, 1 a check failed, 2 bad input or refused run.
//! Every error goes to stderr as `error[<kind>]: <message>`.

pub mod output;

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use erw_core::oracle::{enumerate_paths, solve, FiniteInstance, OracleOptions};
use erw_core::rng::{stream, MIXER_NAME, STREAM_RNG_NAME, TAG_WALK};
use erw_core::stats::{
    self, beatus_check, classify, martingale_csv, martingale_test, sweep, Averaging, ClassifyParams, RunSpec,
    CLASSIFICATION_HEADER, DEFAULT_HIT_BUDGET, DEFAULT_HORIZON, DEFAULT_REPLICAS,
};
use erw_core::{ErwError, RunConfig, StopReason, StopRule, Walk};

use output::{sha256_hex, write_with_manifest, Manifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "erw", version, about = "Excited random walk experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Master seed; falls back to the config's `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub replicas: Option<u64>,
    #[arg(long)]
    pub horizon: Option<u64>,
    /// Worker threads; output does not depend on it.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output file (CSV); stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Classify inside the near-critical band.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check an environment law against the admissible space.
    Validate { config: PathBuf },
    /// Per-replica trajectory summaries, stopped at the window if one is given.
    Simulate {
        config: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Finite-horizon recurrence/transience verdict.
    Classify {
        config: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Classify a one-parameter family over a grid.
    Sweep {
        #[arg(long)]
        family: PathBuf,
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Exact absorption probability on a finite window.
    Oracle {
        #[arg(long)]
        instance: PathBuf,
        /// Also bracket the probability by path enumeration to this depth.
        #[arg(long)]
        depth: Option<u32>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Quenched z-scores of the drift-compensated projection.
    MartingaleTest {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        n_list: Option<Vec<u64>>,
        /// Eat cookies one index ahead while crediting the right drift.
        #[arg(long)]
        negative_control: bool,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Absorbed drift at the first passage times of the given levels.
    BeatusCheck {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        x_list: Option<Vec<u64>>,
        /// Step cap per walk.
        #[arg(long)]
        budget: Option<u64>,
        #[command(flatten)]
        run: RunArgs,
    },
}

/// A failed command: an error (exit 2) or a failed check (exit 1).
#[derive(Debug)]
pub enum Failure {
    Error(ErwError),
    Io(String),
    Check(String),
}

impl From<ErwError> for Failure {
    fn from(e: ErwError) -> Self {
        Failure::Error(e)
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprintln!("error[usage]: {}", e.to_string().trim_start_matches("error: ").trim_end());
            return EXIT_ERROR;
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match dispatch(&cli.command, &argv) {
        Ok(()) => EXIT_OK,
        Err(Failure::Error(e)) => {
            eprintln!("error[{}]: {}", e.kind(), e.detail());
            EXIT_ERROR
        }
        Err(Failure::Io(msg)) => {
            eprintln!("error[io]: {msg}");
            EXIT_ERROR
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            EXIT_CHECK_FAILED
        }
    }
}

struct Loaded {
    path: PathBuf,
    digest: String,
    cfg: RunConfig,
}

fn load(path: &Path) -> std::result::Result<Loaded, Failure> {
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::Error(ErwError::Config(format!("cannot read {}: {e}", path.display()))))?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|_| Failure::Error(ErwError::Config(format!("{} is not UTF-8", path.display()))))?;
    let cfg = RunConfig::from_json(&text)
        .map_err(|e| Failure::Error(ErwError::Config(format!("{}: {}", path.display(), e.detail()))))?;
    Ok(Loaded { path: path.to_path_buf(), digest: sha256_hex(&bytes), cfg })
}

/// Resolved run parameters: flags win over the config.
struct Resolved {
    seed: Option<u64>,
    replicas: u64,
    horizon: u64,
    jobs: usize,
}

impl Resolved {
    fn new(args: &RunArgs, cfg: &RunConfig, default_replicas: u64) -> Self {
        Resolved {
            seed: args.seed.or(cfg.seed),
            replicas: args.replicas.or(cfg.replicas).unwrap_or(default_replicas),
            horizon: args.horizon.or(cfg.horizon).unwrap_or(DEFAULT_HORIZON),
            jobs: args.jobs.or(cfg.jobs).unwrap_or(1).max(1),
        }
    }

    fn seed(&self) -> std::result::Result<u64, Failure> {
        self.seed.ok_or_else(|| Failure::Error(ErwError::Config("--seed is required (no clock-based default)".into())))
    }

    fn spec(&self, cfg: &RunConfig) -> std::result::Result<RunSpec, Failure> {
        Ok(RunSpec::new(self.seed()?, self.replicas).jobs(self.jobs).averaging(cfg.averaging.unwrap_or_default()))
    }
}

fn emit(
    command: &str,
    argv: &[String],
    loaded: &Loaded,
    res: &Resolved,
    out: Option<&Path>,
    body: &str,
) -> std::result::Result<(), Failure> {
    match out {
        None => {
            print!("{body}");
            Ok(())
        }
        Some(out) => {
            let manifest = Manifest {
                command: command.into(),
                argv: argv.to_vec(),
                config_path: Some(loaded.path.display().to_string()),
                config_sha256: Some(loaded.digest.clone()),
                seed: res.seed,
                replicas: Some(res.replicas),
                horizon: Some(res.horizon),
                jobs: res.jobs,
                version: env!("CARGO_PKG_VERSION"),
                mixer: MIXER_NAME,
                stream_rng: STREAM_RNG_NAME,
                timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            };
            write_with_manifest(out, body, &manifest).map_err(|e| Failure::Io(format!("{}: {e}", out.display())))
        }
    }
}

fn dispatch(command: &Command, argv: &[String]) -> Outcome {
    match command {
        Command::Validate { config } => validate(config),
        Command::Simulate { config, run } => simulate(config, run, argv),
        Command::Classify { config, run } => classify_cmd(config, run, argv),
        Command::Sweep { family, grid, run } => sweep_cmd(family, grid.as_deref(), run, argv),
        Command::Oracle { instance, depth, run } => oracle_cmd(instance, *depth, run, argv),
        Command::MartingaleTest { config, n_list, negative_control, run } => {
            martingale_cmd(config, n_list.as_deref(), *negative_control, run, argv)
        }
        Command::BeatusCheck { config, x_list, budget, run } => {
            beatus_cmd(config, x_list.as_deref(), *budget, run, argv)
        }
    }
}

fn validate(path: &Path) -> Outcome {
    let loaded = load(path)?;
    let cfg = &loaded.cfg;
    if cfg.support.is_empty() && cfg.family.is_some() {
        let family = cfg.family()?;
        let grid = cfg.grid.clone().unwrap_or_else(|| vec![0.0]);
        for &t in &grid {
            family.at(t)?;
        }
        println!("ok: family valid at {} grid point(s)", grid.len());
        return Ok(());
    }
    let dist = cfg.distribution()?;
    let violations = dist.validate();
    if violations.is_empty() {
        println!("ok: {} stack(s), E[delta] = {}", dist.support.len(), dist.mean_delta());
        return Ok(());
    }
    for v in &violations[1..] {
        eprintln!("error[environment]: {v}");
    }
    Err(ErwError::Environment(violations[0].to_string()).into())
}

/// Environment from the config; a seed is only needed when the law or the
/// overrides are random.
fn environment(cfg: &RunConfig, seed: Option<u64>) -> std::result::Result<erw_core::SampledEnvironment, Failure> {
    let seed = match seed {
        Some(s) => s,
        None if cfg.support.len() == 1 => 0,
        None => return Err(ErwError::Config("--seed is required for a random environment".into()).into()),
    };
    Ok(cfg.environment(seed)?)
}

const SIMULATE_HEADER: &str = "replica,steps,stop_reason,displacement,min_proj,max_proj,late_min,returns,\
sign_changes,distinct_sites,drift_total,martingale";

/// One replica of `simulate`: the trajectory summary plus the minimum
/// displacement over the times in `[horizon/2, horizon]` it reached.
fn simulate_one(
    env: &erw_core::SampledEnvironment,
    start: &[i64],
    rule: &StopRule,
    seed: u64,
    replica: u64,
) -> erw_core::Result<(StopReason, Option<f64>, String)> {
    let mut rng = stream(seed, replica, TAG_WALK);
    let mut w = Walk::new(env, start)?;
    let late_from = rule.max_steps / 2;
    let mut late_min: Option<f64> = None;
    let reason = loop {
        let s = w.state();
        if s.time() >= late_from {
            late_min = Some(late_min.map_or(s.displacement(), |m| m.min(s.displacement())));
        }
        if let Some(reason) = w.stop_reason(rule) {
            break reason;
        }
        w.step(erw_core::rng::next_unit(&mut rng))?;
    };
    let s = w.state();
    let p0 = s.projection() - s.displacement();
    let row = format!(
        "{replica},{},{},{},{},{},{},{},{},{},{},{}\n",
        s.time(),
        reason.as_str(),
        s.displacement(),
        s.min_proj() - p0,
        s.max_proj() - p0,
        late_min.map(|m| m.to_string()).unwrap_or_default(),
        s.returns_to_start(),
        s.sign_changes(),
        s.distinct_sites(),
        s.drift_total(),
        s.mart()
    );
    Ok((reason, late_min, row))
}

fn simulate(path: &Path, args: &RunArgs, argv: &[String]) -> Outcome {
    let loaded = load(path)?;
    let cfg = &loaded.cfg;
    let res = Resolved::new(args, cfg, DEFAULT_REPLICAS);
    let spec = res.spec(cfg)?;
    let env = environment(cfg, res.seed)?;
    let lattice = *env.lattice();
    let (start, rule) = match &cfg.window {
        Some(w) => (
            w.start.clone().unwrap_or_else(|| lattice.origin()),
            StopRule {
                max_steps: res.horizon,
                hit_right: Some(w.right as f64),
                hit_left: Some(-w.left as f64),
                stop_on_return: false,
            },
        ),
        None => (lattice.origin(), StopRule::budget(res.horizon)),
    };
    let rows = spec.each(|r| simulate_one(&spec.env_for(&env, r), &start, &rule, spec.seed, r))?;
    let mut body = String::from(SIMULATE_HEADER);
    body.push('\n');
    for (_, _, row) in &rows {
        body.push_str(row);
    }
    emit("simulate", argv, &loaded, &res, args.out.as_deref(), &body)?;
    if args.out.is_some() {
        println!("{}", stats::ESTIMATE_HEADER);
        if cfg.window.is_some() {
            let right = rows.iter().filter(|(s, _, _)| *s == StopReason::HitRight).count() as u64;
            println!("{}", stats::Estimate::proportion(right, spec.replicas).csv_row("p_right"));
        } else {
            let level = cfg.thresholds().escape_level;
            let escaped = rows.iter().filter(|(_, m, _)| m.is_some_and(|m| m >= level)).count() as u64;
            println!("{}", stats::Estimate::proportion(escaped, spec.replicas).csv_row("escape_fraction"));
        }
    }
    Ok(())
}

fn classify_params(cfg: &RunConfig, res: &Resolved, force: bool) -> ClassifyParams {
    ClassifyParams { horizon: res.horizon, thresholds: cfg.thresholds(), force }
}

fn classify_cmd(path: &Path, args: &RunArgs, argv: &[String]) -> Outcome {
    let loaded = load(path)?;
    let cfg = &loaded.cfg;
    let res = Resolved::new(args, cfg, DEFAULT_REPLICAS);
    let spec = res.spec(cfg)?;
    let env = cfg.environment(spec.seed)?;
    let result = classify(&env, &classify_params(cfg, &res, args.force), &spec)?;
    let body = format!("{CLASSIFICATION_HEADER}\n{}\n", result.csv_row(None, None));
    emit("classify", argv, &loaded, &res, args.out.as_deref(), &body)?;
    if args.out.is_some() {
        println!("{}", result.verdict);
    }
    Ok(())
}

fn sweep_cmd(path: &Path, grid: Option<&[f64]>, args: &RunArgs, argv: &[String]) -> Outcome {
    let loaded = load(path)?;
    let cfg = &loaded.cfg;
    let res = Resolved::new(args, cfg, DEFAULT_REPLICAS);
    let spec = res.spec(cfg)?;
    let grid = grid
        .map(<[f64]>::to_vec)
        .or_else(|| cfg.grid.clone())
        .ok_or_else(|| Failure::Error(ErwError::Config("no grid: pass --grid or set `grid`".into())))?;
    let report = sweep(&cfg.family()?, &grid, &classify_params(cfg, &res, args.force), &spec)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    emit("sweep", argv, &loaded, &res, args.out.as_deref(), &report.to_csv())
}

const ORACLE_HEADER: &str = "p_right,p_left,expected_drift,identity_residual,states,bracket_low,bracket_high";

fn oracle_cmd(path: &Path, depth: Option<u32>, args: &RunArgs, argv: &[String]) -> Outcome {
    let loaded = load(path)?;
    let cfg = &loaded.cfg;
    let res = Resolved::new(args, cfg, 0);
    let env = environment(cfg, res.seed)?;
    let window = cfg.window()?;
    let inst = FiniteInstance::from_environment(&env, window.left, window.right)?;
    let start = window.start.clone().unwrap_or_else(|| env.lattice().origin());
    let sol = solve(&inst, &start, &OracleOptions::default())?;
    let stopped = window.right as f64 * sol.p_right - window.left as f64 * sol.p_left - start[0] as f64;
    let residual = (sol.expected_drift - stopped).abs();
    let (lo, hi) = match depth {
        Some(d) => {
            let b = enumerate_paths(&inst, &start, d)?.bracket();
            (b.0.to_string(), b.1.to_string())
        }
        None => (String::new(), String::new()),
    };
    let body = format!(
        "{ORACLE_HEADER}\n{},{},{},{},{},{lo},{hi}\n",
        sol.p_right, sol.p_left, sol.expected_drift, residual, sol.states
    );
    println!("{}", sol.p_right);
    if let Some(out) = &args.out {
        emit("oracle", argv, &loaded, &res, Some(out), &body)?;
    }
    if residual > erw_core::oracle::IDENTITY_TOLERANCE {
        return Err(Failure::Check(format!("optional-stopping residual {residual}")));
    }
    Ok(())
}

fn martingale_cmd(path: &Path, n_list: Option<&[u64]>, negative: bool, args: &RunArgs, argv: &[String]) -> Outcome {
    let loaded = load(path)?;
    let cfg = &loaded.cfg;
    let mut res = Resolved::new(args, cfg, 10_000);
    let seed = res.seed()?;
    let ns = n_list.map(<[u64]>::to_vec).or_else(|| cfg.n_list.clone()).unwrap_or_else(|| vec![100, 1_000, 10_000]);
    res.horizon = ns.iter().copied().max().unwrap_or(0);
    if cfg.averaging == Some(Averaging::Annealed) {
        return Err(ErwError::Config("the martingale test is quenched only".into()).into());
    }
    let env = cfg.environment(seed)?;
    let scores = martingale_test(&env, &ns, seed, res.replicas, res.jobs, u64::from(negative))?;
    emit("martingale-test", argv, &loaded, &res, args.out.as_deref(), &martingale_csv(&scores))?;
    match scores.iter().find(|z| !z.passes()) {
        Some(z) => Err(Failure::Check(format!("|z| = {} > 3 at n = {}", z.z.abs(), z.n))),
        None => Ok(()),
    }
}

fn beatus_cmd(path: &Path, x_list: Option<&[u64]>, budget: Option<u64>, args: &RunArgs, argv: &[String]) -> Outcome {
    let loaded = load(path)?;
    let cfg = &loaded.cfg;
    let res = Resolved::new(args, cfg, 10_000);
    let seed = res.seed()?;
    let xs = x_list.map(<[u64]>::to_vec).or_else(|| cfg.x_list.clone()).unwrap_or_else(|| vec![1, 5, 10, 20]);
    let budget = budget.or(cfg.budget).unwrap_or(DEFAULT_HIT_BUDGET);
    let env = cfg.environment(seed)?;
    let report = beatus_check(&env, &xs, seed, res.replicas, res.jobs, budget)?;
    emit("beatus-check", argv, &loaded, &res, args.out.as_deref(), &report.to_csv())?;
    for row in &report.rows {
        if row.unreached > 0 {
            eprintln!(
                "warning: {} of {} walks did not reach x = {} within {budget} steps",
                row.unreached, res.replicas, row.x
            );
        }
    }
    match report.rows.iter().find(|r| !r.pass) {
        Some(r) => {
            Err(Failure::Check(format!("x = {}: mean {} exceeds {} by more than 3 SE", r.x, r.estimate.mean, r.x + 1)))
        }
        None => Ok(()),
    }
}
