//! Instance generators, parameter sweeps and the named numerical studies.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{DistributionSpec, TypeDistribution};
use crate::error::{AuctionError, Result};
use crate::mechanism::run_mechanism;
use crate::model::{
    build_instance, sample_interest_structure, AuctionInstance, CostFunction, InstanceConfig,
    InterestStructure, PopularityModel,
};
use crate::quality::{er_curve, optimal_theta_closed_form};
use crate::simulation::{
    draw_profile, simulate, simulate_mismatch_report, EstimateWithError, MismatchConfig,
    MismatchMode, PropertyAudit, SimulationReport, DEFAULT_TRIALS,
};

pub const SECTION4_PRICES: [f64; 3] = [4.2036, 1.2714, 4.0714];
pub const SECTION4_INTERESTS: [[usize; 6]; 3] =
    [[1, 3, 4, 5, 6, 10], [1, 3, 5, 7, 8, 9], [1, 2, 3, 5, 9, 10]];
const SECTION4_USERS: usize = 10;
const SECTION4_ALPHA: f64 = 0.1;

fn section4_with(dists: Vec<TypeDistribution>) -> Result<AuctionInstance> {
    let sets: Vec<Vec<usize>> = SECTION4_INTERESTS.iter().map(|s| s.to_vec()).collect();
    AuctionInstance::new(
        InterestStructure::from_one_based(SECTION4_USERS, &sets)?,
        SECTION4_PRICES.to_vec(),
        CostFunction::quadratic(SECTION4_ALPHA)?,
        1.0,
        dists,
    )
}

/// Ten users, three contents; user `j` (1-based) has types uniform on
/// `[1 + 0.1(j-1), 4 + 0.1(j-1)]`.
pub fn section4_uniform() -> Result<AuctionInstance> {
    section4_with(
        (0..SECTION4_USERS)
            .map(|k| {
                let shift = 0.1 * k as f64;
                TypeDistribution::uniform(1.0 + shift, 4.0 + shift)
            })
            .collect::<Result<_>>()?,
    )
}

/// Same market with exponential types of rate `1 / (10 + 0.4(j-1))`.
pub fn section4_exponential() -> Result<AuctionInstance> {
    section4_with(
        (0..SECTION4_USERS)
            .map(|k| TypeDistribution::exponential(1.0 / (10.0 + 0.4 * k as f64)))
            .collect::<Result<_>>()?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HomogeneousParams {
    pub num_users: usize,
    pub q: Vec<f64>,
    #[serde(default)]
    pub popularity_seed: u64,
    pub distribution: DistributionSpec,
    pub cost: CostFunction,
    #[serde(default = "one")]
    pub theta: f64,
    /// Defaults to the three fixed prices when `q` has three entries.
    #[serde(default)]
    pub prices: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

impl HomogeneousParams {
    /// `n = 100`, `q = (0.7, 0.5, 0.4)`, types uniform on `[1, 4]`, `h = 0.1 θ²`.
    pub fn large_market() -> Self {
        HomogeneousParams {
            num_users: 100,
            q: vec![0.7, 0.5, 0.4],
            popularity_seed: 0,
            distribution: DistributionSpec::Uniform {
                lower: 1.0,
                upper: 4.0,
            },
            cost: CostFunction::Quadratic {
                alpha: SECTION4_ALPHA,
            },
            theta: 1.0,
            prices: None,
        }
    }
}

/// I.i.d. types and independently formed interest sets.
pub fn homogeneous(params: &HomogeneousParams) -> Result<AuctionInstance> {
    let prices = match &params.prices {
        Some(p) => p.clone(),
        None if params.q.len() == SECTION4_PRICES.len() => SECTION4_PRICES.to_vec(),
        None => {
            return Err(AuctionError::Config(
                "prices are required unless q has exactly three entries".into(),
            ))
        }
    };
    if params.num_users == 0 {
        return Err(AuctionError::InvalidParameter(
            "num_users must be at least 1".into(),
        ));
    }
    let interests = sample_interest_structure(
        &PopularityModel {
            q: params.q.clone(),
            seed: params.popularity_seed,
        },
        params.num_users,
    )?;
    let dist = params.distribution.build()?;
    AuctionInstance::new(
        interests,
        prices,
        params.cost.clone(),
        params.theta,
        vec![dist; params.num_users],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Generator {
    Section4Uniform,
    Section4Exponential,
    Homogeneous(HomogeneousParams),
}

impl Generator {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "section4_uniform" => Ok(Generator::Section4Uniform),
            "section4_exponential" => Ok(Generator::Section4Exponential),
            "homogeneous" => Ok(Generator::Homogeneous(HomogeneousParams::large_market())),
            other => Err(AuctionError::Config(format!(
                "unknown instance family `{other}`"
            ))),
        }
    }
}

/// Materializes a generator and the JSON document that reloads to it.
pub fn generate_instance(generator: &Generator) -> Result<(AuctionInstance, InstanceConfig)> {
    let inst = match generator {
        Generator::Section4Uniform => section4_uniform()?,
        Generator::Section4Exponential => section4_exponential()?,
        Generator::Homogeneous(p) => homogeneous(p)?,
    };
    let config = inst.to_config()?;
    Ok((inst, config))
}

/// Parses `a:b:step` into `a, a + step, ...` up to and including `b`.
/// Points are rounded to 12 decimals so that e.g. zero lands on zero.
pub fn parse_range(text: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = text.split(':').collect();
    let bad = || AuctionError::Config(format!("range `{text}` is not of the form a:b:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    let (a, b, step) = (nums[0], nums[1], nums[2]);
    if step.is_nan() || step <= 0.0 || !a.is_finite() || !b.is_finite() || a > b {
        return Err(AuctionError::Config(format!(
            "range `{text}` needs a <= b and a positive step"
        )));
    }
    let count = ((b - a) / step + 1e-9).floor() as usize + 1;
    Ok((0..count)
        .map(|k| ((a + k as f64 * step) * 1e12).round() / 1e12)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    ExpectedType,
    SupportWidth,
    Lambda,
    PopularityK,
    NumUsers,
    Alpha,
    Epsilon,
}

impl SweepParam {
    pub const ALL: [SweepParam; 7] = [
        SweepParam::ExpectedType,
        SweepParam::SupportWidth,
        SweepParam::Lambda,
        SweepParam::PopularityK,
        SweepParam::NumUsers,
        SweepParam::Alpha,
        SweepParam::Epsilon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::ExpectedType => "expected_type",
            SweepParam::SupportWidth => "support_width",
            SweepParam::Lambda => "lambda",
            SweepParam::PopularityK => "popularity_k",
            SweepParam::NumUsers => "num_users",
            SweepParam::Alpha => "alpha",
            SweepParam::Epsilon => "epsilon",
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = AuctionError;

    fn from_str(s: &str) -> Result<Self> {
        SweepParam::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| AuctionError::Config(format!("unknown sweep parameter `{s}`")))
    }
}

fn integral(value: f64, what: &str) -> Result<usize> {
    if value >= 0.0 && value.fract() == 0.0 {
        Ok(value as usize)
    } else {
        Err(AuctionError::InvalidParameter(format!(
            "{what} must be a nonnegative integer, got {value}"
        )))
    }
}

fn uniform_bounds(d: &TypeDistribution) -> Result<(f64, f64)> {
    match d {
        TypeDistribution::Uniform { lower, upper } => Ok((*lower, *upper)),
        other => Err(AuctionError::InvalidParameter(format!(
            "sweep needs uniform types, found {other:?}"
        ))),
    }
}

/// For each content, a random ordering of `n` users; prefixes give nested
/// interest sets of any size.
fn user_orderings(num_contents: usize, n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_contents)
        .map(|_| {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect()
}

fn prefix_interests(
    num_contents: usize,
    n: usize,
    k: usize,
    seed: u64,
) -> Result<InterestStructure> {
    let sets = user_orderings(num_contents, n, seed)
        .into_iter()
        .map(|order| order[..k].to_vec())
        .collect();
    InterestStructure::new(n, sets)
}

/// The instance at one point of a sweep. `seed` drives the random interest
/// sets of the popularity and market-size sweeps. Not defined for
/// [`SweepParam::Epsilon`], which changes the mechanism rather than the
/// market.
pub fn apply_param(
    base: &AuctionInstance,
    param: SweepParam,
    value: f64,
    seed: u64,
) -> Result<AuctionInstance> {
    match param {
        SweepParam::ExpectedType => {
            let dists = base
                .distributions()
                .iter()
                .map(|d| {
                    let (l, u) = uniform_bounds(d)?;
                    let half = (u - l) / 2.0;
                    TypeDistribution::uniform(value - half, value + half)
                })
                .collect::<Result<_>>()?;
            base.with_distributions(dists)
        }
        SweepParam::SupportWidth => {
            let dists = base
                .distributions()
                .iter()
                .map(|d| {
                    let (l, u) = uniform_bounds(d)?;
                    let center = (l + u) / 2.0;
                    TypeDistribution::uniform(center - value / 2.0, center + value / 2.0)
                })
                .collect::<Result<_>>()?;
            base.with_distributions(dists)
        }
        SweepParam::Lambda => {
            let d = TypeDistribution::exponential(value)?;
            base.with_distributions(vec![d; base.num_users()])
        }
        SweepParam::PopularityK => {
            let k = integral(value, "popularity k")?;
            let n = base.num_users();
            if k == 0 || k > n {
                return Err(AuctionError::InvalidParameter(format!(
                    "popularity k must lie in 1..={n}, got {k}"
                )));
            }
            base.with_interests(prefix_interests(base.num_contents(), n, k, seed)?)
        }
        SweepParam::NumUsers => {
            let n = integral(value, "num_users")?;
            if n == 0 {
                return Err(AuctionError::InvalidParameter(
                    "num_users must be at least 1".into(),
                ));
            }
            let k = ((0.6 * n as f64).round() as usize).max(1);
            AuctionInstance::new(
                prefix_interests(base.num_contents(), n, k, seed)?,
                base.prices().to_vec(),
                base.cost().clone(),
                base.theta(),
                vec![base.distribution(0).clone(); n],
            )
        }
        SweepParam::Alpha => base.with_cost(CostFunction::quadratic(value)?),
        SweepParam::Epsilon => Err(AuctionError::InvalidParameter(
            "epsilon changes the mechanism, not the instance; use run_sweep".into(),
        )),
    }
}

/// Mismatch mode matching the instance's (true) type distributions.
pub fn mismatch_mode_for(inst: &AuctionInstance) -> Result<MismatchMode> {
    let d = inst.distributions();
    if d.iter()
        .all(|d| matches!(d, TypeDistribution::Uniform { .. }))
    {
        Ok(MismatchMode::UniformWiden)
    } else if d
        .iter()
        .all(|d| matches!(d, TypeDistribution::Exponential { .. }))
    {
        Ok(MismatchMode::ExponentialRateScale)
    } else {
        Err(AuctionError::InvalidParameter(
            "epsilon sweeps need all-uniform or all-exponential types".into(),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub er: EstimateWithError,
    pub er_virtual: EstimateWithError,
    pub avg_user_utility: EstimateWithError,
    pub idle_fraction: EstimateWithError,
    pub audit: PropertyAudit,
}

impl SweepRow {
    fn from_report(value: f64, r: &SimulationReport) -> Self {
        SweepRow {
            value,
            er: r.er_direct,
            er_virtual: r.er_virtual,
            avg_user_utility: r.avg_user_utility,
            idle_fraction: r.idle_fraction,
            audit: r.audit,
        }
    }
}

/// Simulates every point of a sweep with the same seed, so neighbouring
/// points share their type draws.
pub fn run_sweep(
    base: &AuctionInstance,
    param: SweepParam,
    values: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let mode = match param {
        SweepParam::Epsilon => Some(mismatch_mode_for(base)?),
        _ => None,
    };
    values
        .iter()
        .map(|&v| {
            let report = match mode {
                Some(mode) => simulate_mismatch_report(
                    base,
                    &MismatchConfig { epsilon: v, mode },
                    trials,
                    seed,
                )?,
                None => simulate(&apply_param(base, param, v, seed)?, trials, seed)?,
            };
            Ok(SweepRow::from_report(v, &report))
        })
        .collect()
}

/// Formats like C's `%.9g`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let m = trim_zeros(mantissa.to_string());
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// A named numeric table; the unit of experiment output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|&x| format_sig9(x)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

pub fn sweep_table(param: SweepParam, rows: &[SweepRow]) -> Table {
    let mut t = Table::new(
        param.name(),
        &[
            param.name(),
            "er_estimate",
            "std_error",
            "er_virtual",
            "er_virtual_std_error",
            "avg_user_utility",
            "avg_user_utility_std_error",
            "idle_fraction",
        ],
    );
    for r in rows {
        t.rows.push(vec![
            r.value,
            r.er.mean,
            r.er.std_error,
            r.er_virtual.mean,
            r.er_virtual.std_error,
            r.avg_user_utility.mean,
            r.avg_user_utility.std_error,
            r.idle_fraction.mean,
        ]);
    }
    t
}

pub fn per_user_table(name: &str, report: &SimulationReport) -> Table {
    let mut t = Table::new(
        name,
        &[
            "user",
            "expected_payment",
            "expected_utility",
            "expected_fraction",
            "payment_std_error",
            "utility_std_error",
            "fraction_std_error",
        ],
    );
    for u in &report.per_user {
        t.rows.push(vec![
            u.user as f64,
            u.expected_payment.mean,
            u.expected_utility.mean,
            u.expected_fraction.mean,
            u.expected_payment.std_error,
            u.expected_utility.std_error,
            u.expected_fraction.std_error,
        ]);
    }
    t
}

pub fn allocation_table(name: &str, report: &SimulationReport) -> Table {
    let mut t = Table::new(name, &["content", "expected_allocation", "std_error"]);
    for (i, e) in report.expected_allocation.iter().enumerate() {
        t.rows.push(vec![(i + 1) as f64, e.mean, e.std_error]);
    }
    t
}

/// One truthful draw (trial 0 of `seed`) run through the mechanism.
pub fn realization_table(name: &str, inst: &AuctionInstance, seed: u64) -> Result<Table> {
    let t = draw_profile(inst.distributions(), seed, 0);
    let o = run_mechanism(inst, &t)?;
    let mut table = Table::new(name, &["user", "type", "payment", "utility", "fraction"]);
    for j in 0..inst.num_users() {
        let frac = o.user_fraction(inst, j);
        table.rows.push(vec![
            (j + 1) as f64,
            t.get(j),
            o.payments[j],
            frac * inst.theta() * t.get(j) - o.payments[j],
            frac,
        ]);
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Fig2Users,
    Fig3Distributions,
    Fig4Theta,
    Fig5Popularity,
    Fig6Numusers,
    Fig7Alpha,
    Fig8Mismatch,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweepParam,
    /// `a:b:step`.
    pub range: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<InstanceConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<Generator>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
}

fn default_trials() -> usize {
    DEFAULT_TRIALS
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment) -> Self {
        ExperimentConfig {
            experiment,
            instance: None,
            generator: None,
            sweep: None,
            trials: DEFAULT_TRIALS,
            seed: 0,
            output: None,
            format: OutputFormat::Csv,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.instance.is_some() && self.generator.is_some() {
            return Err(AuctionError::Config(
                "give either a fixed instance or a generator, not both".into(),
            ));
        }
        if self.trials == 0 {
            return Err(AuctionError::Config("trials must be at least 1".into()));
        }
        if let Some(s) = &self.sweep {
            parse_range(&s.range)?;
        }
        match (self.experiment, &self.sweep) {
            (Experiment::Custom, _) => {
                if self.instance.is_none() && self.generator.is_none() {
                    return Err(AuctionError::Config(
                        "custom experiments need an instance or a generator".into(),
                    ));
                }
            }
            (_, Some(_)) => {
                return Err(AuctionError::Config(
                    "only custom experiments take a sweep specification".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    /// The configured instance, or `None` to use the experiment's default.
    fn supplied_instance(&self) -> Result<Option<AuctionInstance>> {
        match (&self.instance, &self.generator) {
            (Some(c), None) => Ok(Some(build_instance(c)?)),
            (None, Some(g)) => Ok(Some(generate_instance(g)?.0)),
            (None, None) => Ok(None),
            (Some(_), Some(_)) => Err(AuctionError::Config(
                "give either a fixed instance or a generator, not both".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentOutput {
    pub tables: Vec<Table>,
    pub summary: Vec<String>,
}

impl ExperimentOutput {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Writes one `<name>.csv` (or `.json`) per table into `dir`.
    pub fn write(&self, dir: &Path, format: OutputFormat) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for t in &self.tables {
            let path = match format {
                OutputFormat::Csv => {
                    let path = dir.join(format!("{}.csv", t.name));
                    t.write_csv(std::fs::File::create(&path)?)?;
                    path
                }
                OutputFormat::Json => {
                    let path = dir.join(format!("{}.json", t.name));
                    std::fs::write(&path, serde_json::to_string_pretty(t)?)?;
                    path
                }
            };
            written.push(path);
        }
        Ok(written)
    }
}

fn estimate_line(label: &str, e: &EstimateWithError) -> String {
    format!(
        "{label}: {} ± {}",
        format_sig9(e.mean),
        format_sig9(e.std_error)
    )
}

fn users_study(
    out: &mut ExperimentOutput,
    suffix: &str,
    inst: &AuctionInstance,
    trials: usize,
    seed: u64,
) -> Result<()> {
    let r = simulate(inst, trials, seed)?;
    out.tables
        .push(per_user_table(&format!("fig2_users{suffix}"), &r));
    out.tables
        .push(allocation_table(&format!("fig2_allocation{suffix}"), &r));
    out.tables.push(realization_table(
        &format!("fig2_realization{suffix}"),
        inst,
        seed,
    )?);
    let alloc: Vec<String> = r
        .expected_allocation
        .iter()
        .map(|e| format!("{:.3}", e.mean))
        .collect();
    out.summary.push(format!(
        "expected allocation{suffix}: [{}], idle {:.3}",
        alloc.join(", "),
        r.idle_fraction.mean
    ));
    out.summary
        .push(estimate_line(&format!("ER{suffix}"), &r.er_direct));
    Ok(())
}

fn sweep_study(
    out: &mut ExperimentOutput,
    name: &str,
    base: &AuctionInstance,
    param: SweepParam,
    values: &[f64],
    trials: usize,
    seed: u64,
) -> Result<()> {
    let rows = run_sweep(base, param, values, trials, seed)?;
    let mut table = sweep_table(param, &rows);
    table.name = name.into();
    if let (Some(first), Some(last)) = (rows.first(), rows.last()) {
        out.summary.push(format!(
            "{name}: ER {} at {param}={} .. {} at {param}={}",
            format_sig9(first.er.mean),
            format_sig9(first.value),
            format_sig9(last.er.mean),
            format_sig9(last.value)
        ));
    }
    out.tables.push(table);
    Ok(())
}

fn default_or(
    supplied: &Option<AuctionInstance>,
    f: fn() -> Result<AuctionInstance>,
) -> Result<AuctionInstance> {
    match supplied {
        Some(i) => Ok(i.clone()),
        None => f(),
    }
}

/// Runs a named study. Without a supplied instance every study uses the
/// market it was defined on.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let supplied = config.supplied_instance()?;
    let (trials, seed) = (config.trials, config.seed);
    let mut out = ExperimentOutput {
        tables: Vec::new(),
        summary: Vec::new(),
    };
    match config.experiment {
        Experiment::Fig2Users => match &supplied {
            Some(inst) => users_study(&mut out, "", inst, trials, seed)?,
            None => {
                users_study(&mut out, "_uniform", &section4_uniform()?, trials, seed)?;
                users_study(
                    &mut out,
                    "_exponential",
                    &section4_exponential()?,
                    trials,
                    seed,
                )?;
            }
        },
        Experiment::Fig3Distributions => {
            let market = default_or(&supplied, section4_uniform)?;
            let iid = market.with_distributions(vec![
                TypeDistribution::uniform(1.0, 4.0)?;
                market.num_users()
            ])?;
            sweep_study(
                &mut out,
                "fig3_expected_type",
                &iid,
                SweepParam::ExpectedType,
                &parse_range("2:6.5:0.5")?,
                trials,
                seed,
            )?;
            let centered = apply_param(&iid, SweepParam::ExpectedType, 5.0, seed)?;
            sweep_study(
                &mut out,
                "fig3_support_width",
                &centered,
                SweepParam::SupportWidth,
                &parse_range("0.5:9:0.5")?,
                trials,
                seed,
            )?;
            sweep_study(
                &mut out,
                "fig3_lambda",
                &iid,
                SweepParam::Lambda,
                &parse_range("0.05:0.5:0.05")?,
                trials,
                seed,
            )?;
        }
        Experiment::Fig4Theta => {
            let inst = match &supplied {
                Some(i) => i.clone(),
                None => homogeneous(&HomogeneousParams::large_market())?,
            };
            let result = er_curve(&inst, &parse_range("1:10:1")?, trials, seed)?;
            let mut t = Table::new(
                "fig4_theta",
                &[
                    "theta",
                    "er_estimate",
                    "std_error",
                    "avg_user_utility",
                    "avg_user_utility_std_error",
                ],
            );
            for p in result.curve.iter().flatten() {
                t.rows.push(vec![
                    p.theta,
                    p.er.mean,
                    p.er.std_error,
                    p.avg_user_utility.mean,
                    p.avg_user_utility.std_error,
                ]);
            }
            out.tables.push(t);
            out.summary.push(format!(
                "ER-maximizing theta on grid: {}",
                format_sig9(result.theta_star)
            ));
            let lower = inst.distribution(0).lower();
            let common = inst.distributions().iter().all(|d| d.lower() == lower);
            if common {
                if let Ok(th) = optimal_theta_closed_form(inst.cost(), lower) {
                    out.summary
                        .push(format!("large-market optimal theta: {}", format_sig9(th)));
                }
            }
        }
        Experiment::Fig5Popularity => {
            let base = default_or(&supplied, section4_uniform)?;
            let values = parse_range(&format!("1:{}:1", base.num_users()))?;
            sweep_study(
                &mut out,
                "fig5_popularity",
                &base,
                SweepParam::PopularityK,
                &values,
                trials,
                seed,
            )?;
        }
        Experiment::Fig6Numusers => {
            let base = default_or(&supplied, section4_uniform)?;
            sweep_study(
                &mut out,
                "fig6_numusers",
                &base,
                SweepParam::NumUsers,
                &parse_range("5:50:5")?,
                trials,
                seed,
            )?;
        }
        Experiment::Fig7Alpha => {
            let base = default_or(&supplied, section4_uniform)?;
            sweep_study(
                &mut out,
                "fig7_alpha",
                &base,
                SweepParam::Alpha,
                &parse_range("0.05:0.5:0.05")?,
                trials,
                seed,
            )?;
        }
        Experiment::Fig8Mismatch => {
            let cases = match &supplied {
                Some(i) => vec![("fig8_mismatch", i.clone())],
                None => vec![
                    ("fig8_mismatch_uniform", section4_uniform()?),
                    ("fig8_mismatch_exponential", section4_exponential()?),
                ],
            };
            for (name, inst) in cases {
                let range = match mismatch_mode_for(&inst)? {
                    MismatchMode::UniformWiden => "0:1:0.1",
                    MismatchMode::ExponentialRateScale => "-0.9:1:0.1",
                };
                sweep_study(
                    &mut out,
                    name,
                    &inst,
                    SweepParam::Epsilon,
                    &parse_range(range)?,
                    trials,
                    seed,
                )?;
            }
        }
        Experiment::Custom => {
            let inst = supplied.expect("validated");
            match &config.sweep {
                Some(s) => sweep_study(
                    &mut out,
                    "custom",
                    &inst,
                    s.param,
                    &parse_range(&s.range)?,
                    trials,
                    seed,
                )?,
                None if trials == 1 => {
                    out.tables
                        .push(realization_table("custom_realization", &inst, seed)?);
                }
                None => users_study(&mut out, "", &inst, trials, seed)?,
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn section4_instances() {
        let u = section4_uniform().unwrap();
        assert_eq!(u.num_users(), 10);
        assert_eq!(u.prices(), &SECTION4_PRICES);
        let lowers: Vec<f64> = u.distributions().iter().map(|d| d.lower()).collect();
        for (k, l) in lowers.iter().enumerate() {
            assert!((l - (1.0 + 0.1 * k as f64)).abs() < 1e-12);
        }
        assert_eq!(u.interests().to_one_based()[1], vec![1, 3, 5, 7, 8, 9]);
        let e = section4_exponential().unwrap();
        assert_eq!(
            e.distribution(0),
            &TypeDistribution::Exponential { rate: 0.1 }
        );
        assert_eq!(
            e.distribution(9),
            &TypeDistribution::Exponential { rate: 1.0 / 13.6 }
        );
    }

    #[test]
    fn generated_json_reloads_identically() {
        for g in [
            Generator::Section4Uniform,
            Generator::Section4Exponential,
            Generator::Homogeneous(HomogeneousParams::large_market()),
        ] {
            let (inst, config) = generate_instance(&g).unwrap();
            let text = config.to_json().unwrap();
            let back = build_instance(&InstanceConfig::from_json(&text).unwrap()).unwrap();
            assert_eq!(inst, back);
        }
        assert!(Generator::from_name("nope").is_err());
    }

    #[test]
    fn ranges() {
        assert_eq!(parse_range("1:3:1").unwrap(), vec![1.0, 2.0, 3.0]);
        let e = parse_range("-0.9:1:0.1").unwrap();
        assert_eq!(e.len(), 20);
        assert_eq!(e[9], 0.0);
        assert_eq!(e[19], 1.0);
        assert_eq!(parse_range("2:2:0.5").unwrap(), vec![2.0]);
        assert!(parse_range("3:1:1").is_err());
        assert!(parse_range("1:3:0").is_err());
        assert!(parse_range("1:3").is_err());
        assert!(parse_range("a:3:1").is_err());
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(0.1 + 0.2), "0.3");
        assert_eq!(format_sig9(123456789.0), "123456789");
        assert_eq!(format_sig9(1234567890.0), "1.23456789e+09");
        assert_eq!(format_sig9(-2.5), "-2.5");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(1.5e-7), "1.5e-07");
        assert_eq!(format_sig9(0.0001), "0.0001");
    }

    #[test]
    fn sweep_transforms() {
        let base = section4_uniform().unwrap();
        let t = apply_param(&base, SweepParam::ExpectedType, 6.0, 0).unwrap();
        assert_eq!(
            t.distribution(0),
            &TypeDistribution::Uniform {
                lower: 4.5,
                upper: 7.5
            }
        );
        let w = apply_param(&t, SweepParam::SupportWidth, 1.0, 0).unwrap();
        assert_eq!(
            w.distribution(3),
            &TypeDistribution::Uniform {
                lower: 5.5,
                upper: 6.5
            }
        );
        let k = apply_param(&base, SweepParam::PopularityK, 4.0, 3).unwrap();
        assert!((0..3).all(|i| k.interests().users_of(i).len() == 4));
        let k5 = apply_param(&base, SweepParam::PopularityK, 5.0, 3).unwrap();
        for i in 0..3 {
            let small = k.interests().users_of(i);
            assert!(small.iter().all(|u| k5.interests().users_of(i).contains(u)));
        }
        assert!(apply_param(&base, SweepParam::PopularityK, 11.0, 3).is_err());
        assert!(apply_param(&base, SweepParam::PopularityK, 2.5, 3).is_err());
        let n = apply_param(&base, SweepParam::NumUsers, 20.0, 1).unwrap();
        assert_eq!(n.num_users(), 20);
        assert!((0..3).all(|i| n.interests().users_of(i).len() == 12));
        let a = apply_param(&base, SweepParam::Alpha, 0.3, 0).unwrap();
        assert_eq!(a.cost(), &CostFunction::Quadratic { alpha: 0.3 });
        assert!(apply_param(&base, SweepParam::Epsilon, 0.1, 0).is_err());
        assert!(apply_param(
            &section4_exponential().unwrap(),
            SweepParam::SupportWidth,
            1.0,
            0
        )
        .is_err());
        assert_eq!(
            "popularity_k".parse::<SweepParam>().unwrap(),
            SweepParam::PopularityK
        );
        assert!("theta".parse::<SweepParam>().is_err());
    }

    #[test]
    fn experiment_config_validation() {
        let ok = r#"{"experiment": "fig5_popularity", "trials": 10}"#;
        assert!(ExperimentConfig::from_json(ok).is_ok());
        let both = r#"{"experiment": "custom", "generator": {"family": "section4_uniform"},
            "instance": {"num_contents": 1, "num_users": 1, "interest_sets": [[1]],
            "content_prices": [0], "cost": {"kind": "quadratic", "alpha": 1},
            "theta": 1, "distributions": [{"kind": "uniform", "lower": 0, "upper": 1}]}}"#;
        assert!(ExperimentConfig::from_json(both).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "fig9"}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment": "custom"}"#).is_err());
        let swept =
            r#"{"experiment": "fig7_alpha", "sweep": {"param": "alpha", "range": "0:1:0.1"}}"#;
        assert!(ExperimentConfig::from_json(swept).is_err());
        let bad_range = r#"{"experiment": "custom", "generator": {"family": "section4_uniform"},
            "sweep": {"param": "alpha", "range": "1:0:0.1"}}"#;
        assert!(ExperimentConfig::from_json(bad_range).is_err());
    }

    #[test]
    fn custom_single_trial_matches_run() {
        let mut c = ExperimentConfig::new(Experiment::Custom);
        c.generator = Some(Generator::Section4Uniform);
        c.trials = 1;
        c.seed = 4;
        let out = run_experiment(&c).unwrap();
        let table = out.table("custom_realization").unwrap();
        let inst = section4_uniform().unwrap();
        let o = run_mechanism(&inst, &draw_profile(inst.distributions(), 4, 0)).unwrap();
        assert_eq!(table.column("payment").unwrap(), o.payments);
    }

    #[test]
    fn experiments_are_reproducible() {
        let mut c = ExperimentConfig::new(Experiment::Fig7Alpha);
        c.trials = 200;
        c.seed = 2;
        let a = run_experiment(&c).unwrap();
        let b = run_experiment(&c).unwrap();
        assert_eq!(
            a.tables[0].to_csv_string().unwrap(),
            b.tables[0].to_csv_string().unwrap()
        );
    }
}
