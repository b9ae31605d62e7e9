//! Command-line front end: scenario configs, presets, and CSV/JSON output.
//!
//! Every table starts with a `# schema: <name>/v1` line followed by a
//! fixed header; numbers are written with 17 significant digits so that
//! re-reading a file reproduces the simulated values bit for bit.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::firm::BetaSelection;
use crate::params::{FirmParams, MarketDepth, MarketParams};
use crate::policies::{
    compare_policies_with, estimate_eta_from_qv, optimal_cost, static_policy, tax_policy, Comparison, PathOutcome,
    PolicyKind, PolicySpec,
};
use crate::stochastic::{PathEnsemble, TimeGrid};

pub const TRAJECTORY_SCHEMA: &str = "trajectory/v1";
pub const SWEEP_SCHEMA: &str = "sweep/v1";
pub const SUMMARY_SCHEMA: &str = "summary/v1";
pub const TRAJECTORY_COLUMNS: [&str; 7] =
    ["path_id", "t", "price", "total_bank", "total_emissions", "avg_abatement", "net_allocation_minus_initial"];
pub const SWEEP_COLUMNS: [&str; 7] =
    ["eta", "cost_optimal", "cost_static", "cost_msr", "cost_tax", "delta_stat", "mc_stderr_msr"];
const GT: f64 = 1e9;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] Error),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    /// 2 config, 3 numerical singularity, 4 diagnostic failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Model(e) => match e {
                Error::InvalidParameter { .. }
                | Error::UnsupportedInput(_)
                | Error::UnsupportedConfiguration(_)
                | Error::ShapeMismatch(_)
                | Error::InfeasibleObservation(_) => 2,
                Error::Singularity { .. } | Error::Domain { .. } => 3,
                Error::ClearingViolation { .. } | Error::Diagnostic(_) | Error::NonMartingalePrice { .. } => 4,
            },
            CliError::Io { .. } | CliError::Csv(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Named base scenario; explicit blocks replace the preset's blocks.
    pub preset: Option<String>,
    pub market: Option<MarketBlock>,
    pub firms: Option<Vec<FirmBlock>>,
    pub policy: Option<PolicyBlock>,
    pub simulation: Option<SimulationBlock>,
    pub output: Option<OutputBlock>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketBlock {
    pub horizon: f64,
    pub rho: f64,
    pub lambda: f64,
    /// A positive number or the string "inf".
    pub nu: Depth,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Depth {
    Finite(f64),
    Named(String),
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirmBlock {
    pub mu: f64,
    pub sigma: f64,
    pub k: f64,
    pub h: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyBlock {
    pub kind: PolicyKind,
    pub delta: Option<f64>,
    pub m0: Option<Vec<f64>>,
    pub gamma: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    /// Paths written to the trajectory tables (default 1).
    pub trajectories: Option<usize>,
    pub beta_selection: Option<BetaChoice>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaChoice {
    ConstantRate,
    AdaptedSpread,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    pub directory: Option<PathBuf>,
    #[serde(default)]
    pub units: Units,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Units {
    #[default]
    Tons,
    Gt,
}

impl Units {
    fn scale(self) -> f64 {
        match self {
            Units::Tons => 1.0,
            Units::Gt => GT,
        }
    }
}

/// A validated scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub market: MarketParams,
    pub policy: PolicySpec,
    /// Reversion speed used whenever an MSR policy is requested.
    pub msr_delta: f64,
    pub custom: Option<(Vec<f64>, Vec<Vec<f64>>)>,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub trajectories: usize,
    pub selection: BetaSelection,
    pub directory: Option<PathBuf>,
    pub units: Units,
}

pub const PRESETS: [&str; 2] = ["paper-2020-base", "paper-2020-nhbar25"];

/// Built-in scenario blocks. The second preset reads the abatement
/// threshold as N·h̄ = 25 €/t instead of h̄ = 25 €/t.
pub fn preset(name: &str) -> CliResult<ScenarioConfig> {
    let h = match name {
        "paper-2020-base" => 25.0,
        "paper-2020-nhbar25" => 25.0 / 6.0,
        _ => return Err(CliError::Config(format!("unknown preset `{name}` (known: {})", PRESETS.join(", ")))),
    };
    let firm = FirmBlock { mu: 2e9 / 6.0, sigma: 0.2e9 / 6f64.sqrt(), k: 0.92, h, eta: 6e8 };
    Ok(ScenarioConfig {
        preset: None,
        market: Some(MarketBlock { horizon: 10.0, rho: 0.8, lambda: 7.5e-7, nu: Depth::Named("inf".into()) }),
        firms: Some(vec![firm; 6]),
        policy: Some(PolicyBlock { kind: PolicyKind::OptimalDynamic, delta: Some(0.1), m0: None, gamma: None }),
        simulation: Some(SimulationBlock {
            n_paths: 1000,
            n_steps: 2000,
            seed: 2020,
            trajectories: Some(1),
            beta_selection: None,
        }),
        output: Some(OutputBlock { directory: None, units: Units::Gt }),
    })
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// Applies the preset (if any) and validates every block.
    pub fn resolve(self) -> CliResult<Scenario> {
        let base = match &self.preset {
            Some(name) => preset(name)?,
            None => ScenarioConfig::default(),
        };
        let missing = |b: &str| CliError::Config(format!("missing `{b}` block (and no preset)"));
        let market = self.market.or(base.market).ok_or_else(|| missing("market"))?;
        let firms = self.firms.or(base.firms).ok_or_else(|| missing("firms"))?;
        let policy = self.policy.or(base.policy).ok_or_else(|| missing("policy"))?;
        let sim = self.simulation.or(base.simulation).ok_or_else(|| missing("simulation"))?;
        let output = self.output.or(base.output).unwrap_or(OutputBlock { directory: None, units: Units::Tons });

        let nu = match &market.nu {
            Depth::Finite(v) => MarketDepth::Finite(*v),
            Depth::Named(s) if s == "inf" => MarketDepth::Infinite,
            Depth::Named(s) => return Err(CliError::Config(format!("market.nu: expected a number or \"inf\", got \"{s}\""))),
        };
        let firms = firms
            .iter()
            .enumerate()
            .map(|(i, f)| {
                FirmParams::new(f.mu, f.sigma, f.k, f.h, f.eta).map_err(|e| CliError::Config(format!("firms[{i}]: {e}")))
            })
            .collect::<CliResult<Vec<_>>>()?;
        let market = MarketParams::new(firms, market.lambda, nu, market.horizon, market.rho)
            .map_err(|e| CliError::Config(format!("market: {e}")))?;
        let msr_delta = policy.delta.unwrap_or(0.1);
        if !(msr_delta > 0.0 && msr_delta.is_finite()) {
            return Err(CliError::Config(format!("policy.delta: must be > 0, got {msr_delta}")));
        }
        let custom = match (policy.m0, policy.gamma) {
            (Some(m0), Some(g)) => Some((m0, g)),
            (None, None) => None,
            _ => return Err(CliError::Config("policy: custom allocations need both `m0` and `gamma`".into())),
        };
        if sim.n_paths == 0 || sim.n_steps == 0 {
            return Err(CliError::Config("simulation: n_paths and n_steps must be positive".into()));
        }
        let mut s = Scenario {
            market,
            policy: PolicySpec::OptimalDynamic,
            msr_delta,
            custom,
            n_paths: sim.n_paths,
            n_steps: sim.n_steps,
            seed: sim.seed,
            trajectories: sim.trajectories.unwrap_or(1),
            selection: match sim.beta_selection.unwrap_or(BetaChoice::ConstantRate) {
                BetaChoice::ConstantRate => BetaSelection::ConstantRate,
                BetaChoice::AdaptedSpread => BetaSelection::AdaptedSpread,
            },
            directory: output.directory,
            units: output.units,
        };
        s.policy = s.spec(policy.kind)?;
        Ok(s)
    }
}

impl Scenario {
    pub fn spec(&self, kind: PolicyKind) -> CliResult<PolicySpec> {
        Ok(match kind {
            PolicyKind::OptimalDynamic => PolicySpec::OptimalDynamic,
            PolicyKind::Static => PolicySpec::Static,
            PolicyKind::Tax => PolicySpec::Tax,
            PolicyKind::Msr => PolicySpec::Msr { delta: self.msr_delta },
            PolicyKind::Custom => {
                let (m0, gamma) = self
                    .custom
                    .clone()
                    .ok_or_else(|| CliError::Config("policy `custom` needs `m0` and `gamma` in the policy block".into()))?;
                PolicySpec::Custom { m0, gamma }
            }
        })
    }

    fn ensemble(&self) -> CliResult<PathEnsemble> {
        let grid = TimeGrid::new(self.market.horizon(), self.n_steps)?;
        Ok(PathEnsemble::new(self.seed, self.n_paths, grid, self.market.firms()))
    }
}

// ---------------------------------------------------------------------------
// Commands

#[derive(Debug, Parser)]
#[command(name = "carbonreg", version, about = "Emissions-allowance regulation: simulate, compare and calibrate policies")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate one or more policies on shared shocks.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated policy kinds (optimal_dynamic, static, tax, msr, custom).
        #[arg(long)]
        policy: Option<String>,
    },
    /// Sweep all four policy costs over a list of flexibility values η.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated η values.
        #[arg(long)]
        etas: String,
    },
    /// Invert the static-allocation quadratic-variation law for η.
    CalibrateEta {
        /// Observed quadratic variation of the price over the horizon.
        #[arg(long)]
        qv: f64,
        /// Aggregate emission variance rate σ².
        #[arg(long)]
        sigma2: f64,
        /// Terminal penalty coefficient λ.
        #[arg(long)]
        lambda: f64,
        /// Horizon T in years.
        #[arg(long)]
        horizon: f64,
    },
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Scenario JSON file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (defaults to the config's output.directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides simulation.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides simulation.n_paths.
    #[arg(long)]
    pub paths: Option<usize>,
    /// Overrides simulation.n_steps.
    #[arg(long)]
    pub steps: Option<usize>,
}

impl CommonArgs {
    fn scenario(&self) -> CliResult<(Scenario, PathBuf)> {
        let mut s = ScenarioConfig::load(&self.config)?.resolve()?;
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(p) = self.paths {
            s.n_paths = p;
        }
        if let Some(m) = self.steps {
            s.n_steps = m;
        }
        if s.n_paths == 0 || s.n_steps == 0 {
            return Err(CliError::Config("--paths and --steps must be positive".into()));
        }
        let out = self
            .out
            .clone()
            .or_else(|| s.directory.clone())
            .ok_or_else(|| CliError::Config("no output directory: pass --out or set output.directory".into()))?;
        Ok((s, out))
    }
}

/// Runs a parsed command; returns the text printed on stdout.
pub fn run(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Simulate { common, policy } => {
            let (s, out) = common.scenario()?;
            let kinds = match policy {
                Some(list) => parse_kinds(&list)?,
                None => vec![s.policy.kind()],
            };
            let summary = run_simulate(&s, &kinds, &out)?;
            Ok(summary_text(&summary))
        }
        Command::Compare { common, etas } => {
            let (s, out) = common.scenario()?;
            let etas = parse_list(&etas, "--etas")?;
            let rows = run_compare(&s, &etas, &out)?;
            Ok(format!("wrote {} sweep rows to {}\n", rows.len(), out.join("sweep.csv").display()))
        }
        Command::CalibrateEta { qv, sigma2, lambda, horizon } => {
            Ok(format!("{:.16e}\n", run_calibrate_eta(qv, sigma2, lambda, horizon)?))
        }
    }
}

pub fn parse_kinds(list: &str) -> CliResult<Vec<PolicyKind>> {
    let mut kinds = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let k = item.parse::<PolicyKind>().map_err(|e| CliError::Config(e.to_string()))?;
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    if kinds.is_empty() {
        return Err(CliError::Config("--policy: empty list".into()));
    }
    Ok(kinds)
}

fn parse_list(list: &str, what: &str) -> CliResult<Vec<f64>> {
    let v = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| CliError::Config(format!("{what}: `{s}` is not a number"))))
        .collect::<CliResult<Vec<_>>>()?;
    if v.is_empty() {
        return Err(CliError::Config(format!("{what}: empty list")));
    }
    Ok(v)
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub schema: &'static str,
    pub seed: u64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub units: Units,
    pub comparison: Comparison,
    /// Policies whose MC estimate is outside the band around its closed form.
    pub flagged: Vec<PolicyKind>,
}

/// Simulates `kinds` on one shared ensemble; writes `trajectory_<kind>.csv`
/// for the first `trajectories` paths and `summary.json`.
pub fn run_simulate(s: &Scenario, kinds: &[PolicyKind], out: &Path) -> CliResult<Summary> {
    let specs = kinds.iter().map(|&k| s.spec(k)).collect::<CliResult<Vec<_>>>()?;
    let ens = s.ensemble()?;
    let keep = s.trajectories.min(s.n_paths);
    let mut tables: Vec<Vec<(usize, PathOutcome)>> = vec![Vec::new(); specs.len()];
    let comparison = compare_policies_with(&s.market, &specs, &ens, s.selection, |p, j, o| {
        if j < keep {
            tables[p].push((j, o.clone()));
        }
        Ok(())
    })?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (spec, rows) in specs.iter().zip(&tables) {
        let path = out.join(format!("trajectory_{}.csv", spec.kind().name()));
        write_trajectory(&path, rows, &s.market, s.units)?;
    }
    let flagged = comparison.reports.iter().filter(|r| r.consistent == Some(false)).map(|r| r.policy).collect();
    let summary = Summary {
        schema: SUMMARY_SCHEMA,
        seed: s.seed,
        n_paths: s.n_paths,
        n_steps: s.n_steps,
        units: s.units,
        comparison,
        flagged,
    };
    let path = out.join("summary.json");
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Config(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(summary)
}

fn summary_text(s: &Summary) -> String {
    let mut t = String::new();
    for r in &s.comparison.reports {
        let cf = r.closed_form.map_or("-".to_string(), |c| format!("{c:.6e}"));
        t += &format!(
            "{:<16} closed_form={cf:<14} mc={:.6e} ± {:.2e}  emissions={:.6e} ± {:.2e}\n",
            r.policy.name(),
            r.mc_estimate,
            r.mc_stderr,
            r.expected_total_emissions,
            r.emissions_stderr
        );
    }
    for k in &s.flagged {
        t += &format!("warning: {} MC estimate inconsistent with its closed form\n", k.name());
    }
    t
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_table(path: &Path, schema: &str, extra: &[String], header: &[&str], rows: &[Vec<f64>]) -> CliResult<()> {
    let mut file = File::create(path).map_err(io_err(path))?;
    writeln!(file, "# schema: {schema}").map_err(io_err(path))?;
    for line in extra {
        writeln!(file, "# {line}").map_err(io_err(path))?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|&x| fmt(x)))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// One row per (path, knot). Ton-valued columns are divided by 1e9 when
/// `units` is Gt; the allocation column is the cumulative gross allocation
/// (net allocation plus business-as-usual μt) since t = 0, summed over firms.
pub fn trajectory_rows(rows: &[(usize, PathOutcome)], mkt: &MarketParams, units: Units) -> Vec<Vec<f64>> {
    let scale = units.scale();
    let mut out = Vec::new();
    for (j, o) in rows {
        let p = &o.path;
        let bank = p.total_bank();
        let emis = p.total_emissions();
        let abate = p.mean_alpha();
        for (k, t) in p.grid.times().into_iter().enumerate() {
            let alloc: f64 = mkt
                .firms()
                .iter()
                .zip(&p.allocation)
                .map(|(f, a)| a[k] - a[0] + f.mu * t)
                .sum();
            out.push(vec![*j as f64, t, p.price[k], bank[k] / scale, emis[k] / scale, abate[k] / scale, alloc / scale]);
        }
    }
    out
}

fn write_trajectory(path: &Path, rows: &[(usize, PathOutcome)], mkt: &MarketParams, units: Units) -> CliResult<()> {
    let unit = match units {
        Units::Tons => "units: tons",
        Units::Gt => "units: gt",
    };
    write_table(path, TRAJECTORY_SCHEMA, &[unit.to_string()], &TRAJECTORY_COLUMNS, &trajectory_rows(rows, mkt, units))
}

/// Reads a table written by this module (comment lines skipped).
pub fn read_table(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(
            rec.iter()
                .map(|v| v.parse::<f64>().map_err(|_| CliError::Config(format!("{}: bad number `{v}`", path.display()))))
                .collect::<CliResult<Vec<_>>>()?,
        );
    }
    Ok((header, rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    pub eta: f64,
    pub cost_optimal: f64,
    pub cost_static: f64,
    pub cost_msr: f64,
    pub cost_tax: f64,
    pub delta_stat: f64,
    pub mc_stderr_msr: f64,
}

/// One row per η: closed forms for optimal, static and tax, Monte Carlo for
/// MSR (same seed at every η). Writes `sweep.csv`.
pub fn run_compare(s: &Scenario, etas: &[f64], out: &Path) -> CliResult<Vec<SweepRow>> {
    let ens = s.ensemble()?;
    let mut rows = Vec::with_capacity(etas.len());
    for &eta in etas {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(CliError::Config(format!("--etas: η must be positive, got {eta}")));
        }
        let m = s.market.with_eta(eta)?;
        let st = static_policy(&m)?;
        let msr = compare_policies_with(&m, &[PolicySpec::Msr { delta: s.msr_delta }], &ens, s.selection, |_, _, _| Ok(()))?;
        let r = &msr.reports[0];
        rows.push(SweepRow {
            eta,
            cost_optimal: optimal_cost(&m),
            cost_static: st.cost,
            cost_msr: r.mc_estimate,
            cost_tax: tax_policy(&m)?.cost,
            delta_stat: st.delta,
            mc_stderr_msr: r.mc_stderr,
        });
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![r.eta, r.cost_optimal, r.cost_static, r.cost_msr, r.cost_tax, r.delta_stat, r.mc_stderr_msr])
        .collect();
    let extra = [format!("seed: {}, n_paths: {}, n_steps: {}, msr_delta: {}", s.seed, s.n_paths, s.n_steps, s.msr_delta)];
    write_table(&out.join("sweep.csv"), SWEEP_SCHEMA, &extra, &SWEEP_COLUMNS, &table)?;
    Ok(rows)
}

pub fn run_calibrate_eta(qv: f64, sigma2: f64, lambda: f64, horizon: f64) -> CliResult<f64> {
    Ok(estimate_eta_from_qv(qv, sigma2, lambda, horizon)?)
}
