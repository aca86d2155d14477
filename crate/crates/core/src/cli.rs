//! Command-line front end.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::distributions::{DistributionSpec, TypeProfile};
use crate::error::{AuctionError, Result};
use crate::experiments::{
    format_sig9, generate_instance, parse_range, per_user_table, run_experiment, run_sweep,
    sweep_table, ExperimentConfig, Generator, HomogeneousParams, OutputFormat, SweepParam, Table,
};
use crate::mechanism::run_mechanism;
use crate::model::{
    build_instance, AuctionInstance, CostFunction, InstanceConfig, REGULARITY_GRID,
};
use crate::quality::er_curve;
use crate::simulation::{
    simulate, verify_allocation_monotonicity, verify_ic_with, verify_ir_with, verify_oracle,
    OptimalRule, DEFAULT_SIGMA, DEFAULT_TRIALS, ORACLE_TOLERANCE,
};

/// Overrides `--threads`.
pub const THREADS_ENV: &str = "CACHE_AUCTION_THREADS";

const EXIT_USAGE: i32 = 1;
const EXIT_PROPERTY: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "cache-auction", version)]
#[command(about = "Optimal auction for edge content caching: run, simulate and verify")]
pub struct Cli {
    /// Worker threads for Monte-Carlo loops (0 = all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output format for reports printed to stdout
    #[arg(long, global = true, value_enum, default_value = "text")]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct InstanceSource {
    /// Instance JSON file
    #[arg(long)]
    pub instance: Option<PathBuf>,

    /// Built-in instance family (section4_uniform, section4_exponential, homogeneous)
    #[arg(long)]
    pub generator: Option<String>,
}

impl InstanceSource {
    fn load(&self) -> Result<AuctionInstance> {
        match (&self.instance, &self.generator) {
            (Some(path), _) => load_instance(path),
            (None, Some(name)) => Ok(generate_instance(&Generator::from_name(name)?)?.0),
            (None, None) => Err(AuctionError::Config("no instance given".into())),
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct McArgs {
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the mechanism on one reported type profile
    Run {
        #[command(flatten)]
        source: InstanceSource,

        /// JSON array of reported types, one per user
        #[arg(long, conflicts_with = "types", required_unless_present = "types")]
        profile: Option<PathBuf>,

        /// Comma-separated reported types
        #[arg(long, value_delimiter = ',')]
        types: Option<Vec<f64>>,
    },

    /// Estimate expected allocation, payments and revenue
    Simulate {
        #[command(flatten)]
        source: InstanceSource,

        #[command(flatten)]
        mc: McArgs,

        /// Per-user CSV output
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Check mechanism properties; exits with 3 if any fails
    Verify {
        #[command(flatten)]
        source: InstanceSource,

        #[command(flatten)]
        mc: McArgs,

        #[arg(
            long,
            value_enum,
            value_delimiter = ',',
            default_value = "ic,ir,oracle,monotonicity,prop4,revenue-forms"
        )]
        checks: Vec<Check>,

        /// Pass threshold in standard errors
        #[arg(long, default_value_t = DEFAULT_SIGMA)]
        sigma: f64,

        /// Type and report grid size for the IC, IR and monotonicity checks
        #[arg(long, default_value_t = 5)]
        grid: usize,

        /// 1-based users to check (default: all)
        #[arg(long, value_delimiter = ',')]
        users: Option<Vec<usize>>,

        /// Random profiles for the oracle comparison
        #[arg(long, default_value_t = 1000)]
        oracle_profiles: usize,
    },

    /// Sweep one market parameter and estimate revenue and utility
    Sweep {
        #[command(flatten)]
        source: InstanceSource,

        #[command(flatten)]
        mc: McArgs,

        #[arg(long)]
        param: String,

        /// a:b:step
        #[arg(long)]
        range: String,

        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Expected revenue over a grid of delivery qualities
    SweepTheta {
        #[command(flatten)]
        source: InstanceSource,

        #[command(flatten)]
        mc: McArgs,

        /// a:b:step
        #[arg(long)]
        grid: String,

        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Run a named study from a JSON config
    Experiment {
        #[arg(long)]
        config: PathBuf,

        /// Output directory (overrides the config)
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Emit an instance JSON
    GenInstance {
        /// section4_uniform, section4_exponential or homogeneous
        #[arg(long)]
        family: String,

        #[arg(long, default_value_t = 100)]
        num_users: usize,

        /// Interest probabilities per content
        #[arg(long, value_delimiter = ',', default_value = "0.7,0.5,0.4")]
        q: Vec<f64>,

        #[arg(long, default_value_t = 0)]
        popularity_seed: u64,

        /// uniform:LOWER:UPPER or exponential:RATE
        #[arg(long, default_value = "uniform:1:4")]
        dist: String,

        #[arg(long, default_value_t = 0.1)]
        alpha: f64,

        #[arg(long, default_value_t = 1.0)]
        theta: f64,

        #[arg(long, value_delimiter = ',')]
        prices: Option<Vec<f64>>,

        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Check that every user's virtual valuation is nondecreasing
    CheckRegularity {
        #[arg(long)]
        instance: PathBuf,

        #[arg(long, default_value_t = REGULARITY_GRID)]
        grid: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    Ic,
    Ir,
    Oracle,
    Monotonicity,
    Prop4,
    RevenueForms,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckOutcome {
    pub check: Check,
    pub passed: bool,
    pub detail: String,
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| {
                AuctionError::Config(format!("{THREADS_ENV}={v} is not a thread count"))
            })
        }
        Err(_) => Ok(flag),
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count(cli.threads)?.unwrap_or(0))
        .build()
        .map_err(|e| AuctionError::Internal(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli))
}

pub fn load_instance(path: &Path) -> Result<AuctionInstance> {
    build_instance(&InstanceConfig::from_json(&std::fs::read_to_string(path)?)?)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn emit_table(table: &Table, out: Option<&Path>, format: Format) -> Result<()> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            table.write_csv(std::fs::File::create(path)?)?;
            eprintln!("wrote {}", path.display());
            Ok(())
        }
        None => match format {
            Format::Json => print_json(table),
            Format::Text => {
                let stdout = std::io::stdout();
                let mut lock = stdout.lock();
                table.write_csv(&mut lock)?;
                lock.flush()?;
                Ok(())
            }
        },
    }
}

fn parse_dist(text: &str) -> Result<DistributionSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| AuctionError::Config(format!("bad number `{s}` in `{text}`")))
    };
    match parts.as_slice() {
        ["uniform", l, u] => Ok(DistributionSpec::Uniform {
            lower: num(l)?,
            upper: num(u)?,
        }),
        ["exponential", r] => Ok(DistributionSpec::Exponential { rate: num(r)? }),
        _ => Err(AuctionError::Config(format!(
            "distribution `{text}` is not uniform:LOWER:UPPER or exponential:RATE"
        ))),
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let format = cli.format;
    match &cli.command {
        Command::Run {
            source,
            profile,
            types,
        } => {
            let inst = source.load()?;
            let reports = match (profile, types) {
                (Some(path), _) => {
                    serde_json::from_str::<TypeProfile>(&std::fs::read_to_string(path)?)?
                }
                (None, Some(v)) => TypeProfile::new(v.clone()),
                (None, None) => return Err(AuctionError::Config("no profile given".into())),
            };
            for (j, &t) in reports.values().iter().enumerate() {
                if j < inst.num_users() {
                    inst.distribution(j).check_in_support(t)?;
                }
            }
            let outcome = run_mechanism(&inst, &reports)?;
            match format {
                Format::Json => print_json(&outcome)?,
                Format::Text => {
                    let alloc: Vec<String> = outcome
                        .allocation
                        .fractions
                        .iter()
                        .map(|p| format_sig9(*p))
                        .collect();
                    println!("allocation: [{}]", alloc.join(", "));
                    println!("user,type,fraction,payment,branch");
                    for (j, c) in outcome.certificates.iter().enumerate() {
                        println!(
                            "{},{},{},{},{:?}",
                            j + 1,
                            format_sig9(reports.get(j)),
                            format_sig9(outcome.user_fraction(&inst, j)),
                            format_sig9(c.payment),
                            c.branch
                        );
                    }
                    println!("virtual_surplus: {}", format_sig9(outcome.virtual_surplus));
                    println!(
                        "realized_profit: {}",
                        format_sig9(outcome.realized_sp_profit)
                    );
                }
            }
            Ok(0)
        }
        Command::Simulate { source, mc, out } => {
            let inst = source.load()?;
            let report = simulate(&inst, mc.trials, mc.seed)?;
            if let Some(path) = out {
                emit_table(&per_user_table("users", &report), Some(path), format)?;
            }
            match format {
                Format::Json => print_json(&report)?,
                Format::Text => {
                    let e = |x: &crate::simulation::EstimateWithError| {
                        format!("{} ± {}", format_sig9(x.mean), format_sig9(x.std_error))
                    };
                    println!("trials: {}", mc.trials);
                    println!("er_direct: {}", e(&report.er_direct));
                    println!("er_virtual: {}", e(&report.er_virtual));
                    for (i, a) in report.expected_allocation.iter().enumerate() {
                        println!("allocation[{}]: {}", i + 1, e(a));
                    }
                    println!("idle_fraction: {}", e(&report.idle_fraction));
                    println!("avg_user_utility: {}", e(&report.avg_user_utility));
                }
            }
            Ok(0)
        }
        Command::Verify {
            source,
            mc,
            checks,
            sigma,
            grid,
            users,
            oracle_profiles,
        } => {
            let inst = source.load()?;
            let users: Vec<usize> = match users {
                Some(list) => list
                    .iter()
                    .map(|&u| {
                        if u == 0 || u > inst.num_users() {
                            Err(AuctionError::IndexOutOfRange {
                                what: "user (1-based)",
                                index: u,
                                len: inst.num_users(),
                            })
                        } else {
                            Ok(u - 1)
                        }
                    })
                    .collect::<Result<_>>()?,
                None => (0..inst.num_users()).collect(),
            };
            let outcomes = run_checks(&inst, checks, &users, mc, *sigma, *grid, *oracle_profiles)?;
            match format {
                Format::Json => print_json(&outcomes)?,
                Format::Text => {
                    for o in &outcomes {
                        let tag = if o.passed { "PASS" } else { "FAIL" };
                        println!("{tag} {:?}: {}", o.check, o.detail);
                    }
                }
            }
            Ok(if outcomes.iter().all(|o| o.passed) {
                0
            } else {
                EXIT_PROPERTY
            })
        }
        Command::Sweep {
            source,
            mc,
            param,
            range,
            out,
        } => {
            let inst = source.load()?;
            let param: SweepParam = param.parse()?;
            let rows = run_sweep(&inst, param, &parse_range(range)?, mc.trials, mc.seed)?;
            emit_table(&sweep_table(param, &rows), out.as_deref(), format)?;
            Ok(0)
        }
        Command::SweepTheta {
            source,
            mc,
            grid,
            out,
        } => {
            let inst = source.load()?;
            let result = er_curve(&inst, &parse_range(grid)?, mc.trials, mc.seed)?;
            let mut table = Table {
                name: "theta".into(),
                columns: ["theta", "er_estimate", "std_error", "avg_user_utility"]
                    .map(String::from)
                    .to_vec(),
                rows: Vec::new(),
            };
            for p in result.curve.iter().flatten() {
                table.rows.push(vec![
                    p.theta,
                    p.er.mean,
                    p.er.std_error,
                    p.avg_user_utility.mean,
                ]);
            }
            emit_table(&table, out.as_deref(), format)?;
            eprintln!("theta_star: {}", format_sig9(result.theta_star));
            Ok(0)
        }
        Command::Experiment { config, out } => {
            let mut config = ExperimentConfig::from_json(&std::fs::read_to_string(config)?)?;
            if let Some(dir) = out {
                config.output = Some(dir.clone());
            }
            let output = run_experiment(&config)?;
            for line in &output.summary {
                println!("{line}");
            }
            match &config.output {
                Some(dir) => {
                    for path in output.write(dir, config.format)? {
                        println!("wrote {}", path.display());
                    }
                }
                None => match (format, config.format) {
                    (Format::Json, _) | (_, OutputFormat::Json) => print_json(&output.tables)?,
                    _ => {
                        for t in &output.tables {
                            println!("# {}", t.name);
                            print!("{}", t.to_csv_string()?);
                        }
                    }
                },
            }
            Ok(0)
        }
        Command::GenInstance {
            family,
            num_users,
            q,
            popularity_seed,
            dist,
            alpha,
            theta,
            prices,
            out,
        } => {
            let generator = match family.as_str() {
                "homogeneous" => Generator::Homogeneous(HomogeneousParams {
                    num_users: *num_users,
                    q: q.clone(),
                    popularity_seed: *popularity_seed,
                    distribution: parse_dist(dist)?,
                    cost: CostFunction::quadratic(*alpha)?,
                    theta: *theta,
                    prices: prices.clone(),
                }),
                other => Generator::from_name(other)?,
            };
            let (_, config) = generate_instance(&generator)?;
            let text = config.to_json()?;
            match out {
                Some(path) => {
                    std::fs::write(path, text + "\n")?;
                    eprintln!("wrote {}", path.display());
                }
                None => println!("{text}"),
            }
            Ok(0)
        }
        Command::CheckRegularity { instance, grid } => {
            let mut config = InstanceConfig::from_json(&std::fs::read_to_string(instance)?)?;
            config.strict_regularity = Some(false);
            let inst = build_instance(&config)?;
            let reports: Vec<_> = inst
                .distributions()
                .iter()
                .map(|d| d.check_regularity(*grid))
                .collect();
            match format {
                Format::Json => print_json(&reports)?,
                Format::Text => {
                    for (j, r) in reports.iter().enumerate() {
                        let tag = if r.passed { "regular" } else { "IRREGULAR" };
                        match &r.violation {
                            Some(v) => println!(
                                "user {}: {tag} (c({}) = {} > c({}) = {})",
                                j + 1,
                                format_sig9(v.t_before),
                                format_sig9(v.c_before),
                                format_sig9(v.t_after),
                                format_sig9(v.c_after)
                            ),
                            None => println!("user {}: {tag}", j + 1),
                        }
                    }
                }
            }
            Ok(if reports.iter().all(|r| r.passed) {
                0
            } else {
                2
            })
        }
    }
}

fn run_checks(
    inst: &AuctionInstance,
    checks: &[Check],
    users: &[usize],
    mc: &McArgs,
    sigma: f64,
    grid: usize,
    oracle_profiles: usize,
) -> Result<Vec<CheckOutcome>> {
    let mut outcomes = Vec::new();
    let mut report = None;
    for &check in checks {
        let (passed, detail) = match check {
            Check::Ic => {
                let mut violations = 0;
                let mut worst = f64::INFINITY;
                for &j in users {
                    let r = verify_ic_with(
                        inst,
                        &OptimalRule,
                        j,
                        grid,
                        grid,
                        mc.trials,
                        mc.seed,
                        sigma,
                    )?;
                    violations += r.violations;
                    worst = worst.min(r.worst_margin);
                }
                (
                    violations == 0,
                    format!(
                        "{violations} violations on {grid}x{grid} grids for {} users, worst margin {}",
                        users.len(),
                        format_sig9(worst)
                    ),
                )
            }
            Check::Ir => {
                let r = verify_ir_with(inst, grid, mc.trials, mc.seed, sigma)?;
                let failing: Vec<usize> = r
                    .users
                    .iter()
                    .filter(|u| users.contains(&(u.user - 1)) && !(u.passed && u.endpoint_binding))
                    .map(|u| u.user)
                    .collect();
                (
                    failing.is_empty() && r.audit.is_clean(),
                    format!(
                        "failing users {failing:?}; {} payment-bound violations in {} realizations",
                        r.audit.payment_bound_violations, r.audit.realizations
                    ),
                )
            }
            Check::Oracle => {
                let r = verify_oracle(inst, oracle_profiles, mc.seed, 32, ORACLE_TOLERANCE)?;
                (
                    r.passed(),
                    format!(
                        "{} comparisons, max |closed form - oracle| = {}",
                        r.comparisons,
                        format_sig9(r.max_abs_diff)
                    ),
                )
            }
            Check::Monotonicity => {
                let mut violations = 0;
                for &j in users {
                    violations +=
                        verify_allocation_monotonicity(inst, j, grid, mc.trials, mc.seed, sigma)?
                            .violations;
                }
                (
                    violations == 0,
                    format!("{violations} decreasing steps of the interim cache fraction"),
                )
            }
            Check::Prop4 | Check::RevenueForms => {
                if report.is_none() {
                    report = Some(simulate(inst, mc.trials, mc.seed)?);
                }
                let r = report.as_ref().expect("just computed");
                if check == Check::Prop4 {
                    (
                        r.audit.zero_payment_violations == 0,
                        format!(
                            "{} nonzero payments without cached content in {} realizations",
                            r.audit.zero_payment_violations, r.audit.realizations
                        ),
                    )
                } else {
                    (
                        r.revenue_forms_agree(sigma),
                        format!(
                            "direct {} vs virtual {} (combined se {})",
                            format_sig9(r.er_direct.mean),
                            format_sig9(r.er_virtual.mean),
                            format_sig9(r.er_direct.combined_std_error(&r.er_virtual))
                        ),
                    )
                }
            }
        };
        outcomes.push(CheckOutcome {
            check,
            passed,
            detail,
        });
    }
    Ok(outcomes)
}
