//! Regulator layer: the optimal dynamic allocation, the static, pure-tax and
//! MSR-like benchmarks, their closed-form costs, and a Monte Carlo runner
//! that evaluates several policies on shared (shock-coupled) paths.

use serde::{Deserialize, Serialize};

use crate::equilibrium::{
    simulate_equilibrium, AllocationPlan, AllocationScheme, EquilibriumPath, LoadingProfile, PreparedScheme,
    Realization,
};
use crate::error::{Error, Result};
use crate::firm::{BetaSelection, CostBreakdown};
use crate::params::{ell, f_coeff, msr_f, msr_z, validate_msr_denominator, FirmParams, MarketParams};
use crate::stochastic::{dot, NoisePaths, PathEnsemble, RunningStats, StepSchedule, TimeGrid};

/// MC estimates are flagged when further than this many standard errors
/// from a closed form.
pub const CONSISTENCY_SIGMAS: f64 = 4.0;
/// Relative round-off allowance added to the MC band (pathwise-deterministic
/// costs have zero standard error).
pub const ROUNDOFF_FLOOR: f64 = 1e-9;
/// Tolerance of the column-sum identities in [`check_gamma_optimality`].
pub const GAMMA_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    OptimalDynamic,
    Static,
    Tax,
    Msr,
    Custom,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::OptimalDynamic => "optimal_dynamic",
            PolicyKind::Static => "static",
            PolicyKind::Tax => "tax",
            PolicyKind::Msr => "msr",
            PolicyKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "optimal_dynamic" | "optimal" => PolicyKind::OptimalDynamic,
            "static" => PolicyKind::Static,
            "tax" => PolicyKind::Tax,
            "msr" => PolicyKind::Msr,
            "custom" => PolicyKind::Custom,
            _ => return Err(Error::param("policy", format!("unknown policy kind `{s}`"))),
        })
    }
}

/// The regulator's allocation rule.
#[derive(Debug, Clone, PartialEq)]
pub enum PolicySpec {
    OptimalDynamic,
    Static,
    Tax,
    Msr { delta: f64 },
    /// Per-firm M₀ⁱ and constant loadings γ^{ij} (N×(N+1)).
    Custom { m0: Vec<f64>, gamma: Vec<Vec<f64>> },
}

impl PolicySpec {
    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicySpec::OptimalDynamic => PolicyKind::OptimalDynamic,
            PolicySpec::Static => PolicyKind::Static,
            PolicySpec::Tax => PolicyKind::Tax,
            PolicySpec::Msr { .. } => PolicyKind::Msr,
            PolicySpec::Custom { .. } => PolicyKind::Custom,
        }
    }
}

/// Closed-form optimum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimalPolicy {
    pub p0: f64,
    pub ell: f64,
    pub m0: Vec<f64>,
    /// Firm-by-firm tracking: γ^{i,0} = σᵢkᵢ, γ^{i,i} = σᵢ√(1−kᵢ²).
    pub gamma: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    /// Constant trade rates B̂ⁱ₀/T.
    pub beta: Vec<f64>,
    pub cost: f64,
}

/// P̂₀ = (H̄ + (1−ρ)μ̄)/η̄.
pub fn optimal_price(mkt: &MarketParams) -> f64 {
    let a = mkt.aggregates();
    (a.big_h_bar + (1.0 - mkt.rho()) * a.mu_bar) / a.eta_bar
}

/// Ĉ = (N/(4λ))(1+2λη̄T)P̂₀² − (T/2)Σηᵢhᵢ².
pub fn optimal_cost(mkt: &MarketParams) -> f64 {
    let p0 = optimal_price(mkt);
    let (lam, big_t) = (mkt.lambda(), mkt.horizon());
    let n = mkt.n() as f64;
    n / (4.0 * lam) * (1.0 + 2.0 * lam * mkt.aggregates().eta_bar * big_t) * p0 * p0
        - 0.5 * big_t * mkt.firms().iter().map(|f| f.eta * f.h * f.h).sum::<f64>()
}

pub fn optimal_dynamic_policy(mkt: &MarketParams) -> Result<OptimalPolicy> {
    let p0 = optimal_price(mkt);
    let l = ell(mkt);
    let (lam, big_t, n) = (mkt.lambda(), mkt.horizon(), mkt.n());
    let gamma = tracking_gamma(mkt.firms());
    let alpha = mkt.firms().iter().map(|f| f.eta * (p0 - f.h)).collect();
    let beta = mkt
        .firms()
        .iter()
        .map(|f| -((1.0 + 2.0 * lam * f.eta * big_t) * p0 / (2.0 * lam) + l - f.eta * f.h * big_t) / big_t)
        .collect();
    Ok(OptimalPolicy { p0, ell: l, m0: vec![l; n], gamma, alpha, beta, cost: optimal_cost(mkt) })
}

fn tracking_gamma(firms: &[FirmParams]) -> Vec<Vec<f64>> {
    let n = firms.len();
    firms
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut row = vec![0.0; n + 1];
            row[0] = f.sigma * f.k;
            row[i + 1] = f.sigma * f.idio();
            row
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaCheck {
    pub ok: bool,
    /// Σᵢγ^{i,0} − Σσᵢkᵢ, then Σᵢγ^{i,j} − σⱼ√(1−kⱼ²).
    pub residuals: Vec<f64>,
}

/// Whether the aggregate loadings cancel every shock.
pub fn check_gamma_optimality(gamma: &[Vec<f64>], firms: &[FirmParams]) -> Result<GammaCheck> {
    let n = firms.len();
    if gamma.len() != n || gamma.iter().any(|r| r.len() != n + 1) {
        return Err(Error::ShapeMismatch(format!("gamma must be {n}x{}", n + 1)));
    }
    let col = |j: usize| gamma.iter().map(|r| r[j]).sum::<f64>();
    let mut residuals = Vec::with_capacity(n + 1);
    residuals.push(col(0) - firms.iter().map(|f| f.sigma * f.k).sum::<f64>());
    for (j, f) in firms.iter().enumerate() {
        residuals.push(col(j + 1) - f.sigma * f.idio());
    }
    let scale = firms.iter().map(|f| f.sigma).sum::<f64>().max(1.0);
    let ok = residuals.iter().all(|r| r.abs() <= GAMMA_TOLERANCE * scale);
    Ok(GammaCheck { ok, residuals })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StaticPolicy {
    /// Per-firm initial allocation.
    pub x0_bar: f64,
    pub p0: f64,
    pub cost: f64,
    pub delta: f64,
    /// Expected price quadratic variation over [0, T].
    pub qv_t: f64,
}

/// Δ^stat = (Nσ²/(2η)) ln(1+2ληT).
fn delta_stat(n: f64, sigma_sq: f64, eta: f64, lam: f64, big_t: f64) -> f64 {
    n * sigma_sq / (2.0 * eta) * (2.0 * lam * eta * big_t).ln_1p()
}

pub fn static_policy(mkt: &MarketParams) -> Result<StaticPolicy> {
    let eta = mkt.require_homogeneous_eta("static allocation")?;
    let a = mkt.aggregates();
    let (lam, big_t, rho) = (mkt.lambda(), mkt.horizon(), mkt.rho());
    let n = mkt.n() as f64;
    let x0_bar = big_t * rho * a.mu_bar - (a.h_bar + (1.0 - rho) * a.mu_bar / eta) / (2.0 * lam);
    let p0 = f_coeff(mkt, 0.0)? * (big_t * eta * a.h_bar - x0_bar + big_t * a.mu_bar);
    let delta = delta_stat(n, a.sigma_sq, eta, lam, big_t);
    let cost = n / (4.0 * lam) * (1.0 + 2.0 * lam * eta * big_t) * p0 * p0 + delta
        - 0.5 * big_t * eta * mkt.firms().iter().map(|f| f.h * f.h).sum::<f64>();
    let qv_t = 4.0 * lam * lam * a.sigma_sq * big_t / (1.0 + 2.0 * lam * eta * big_t);
    Ok(StaticPolicy { x0_bar, p0, cost, delta, qv_t })
}

/// Price under the static allocation, dP̂ = f(t)dW̄, on arbitrary paths.
pub struct StaticPriceGenerator {
    p0: f64,
    schedule: StepSchedule,
}

impl StaticPriceGenerator {
    pub fn new(mkt: &MarketParams, grid: TimeGrid) -> Result<Self> {
        let s = static_policy(mkt)?;
        let w = mkt.wbar_loadings();
        let schedule = StepSchedule::scaled(&grid, &w, |t| f_coeff(mkt, t).unwrap_or(f64::NAN));
        Ok(StaticPriceGenerator { p0: s.p0, schedule })
    }

    pub fn path(&self, noise: &NoisePaths) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.schedule.n_steps() + 1);
        p.push(self.p0);
        for k in 0..self.schedule.n_steps() {
            p.push(p[k] + self.schedule.increment(k, noise.base_step(k)));
        }
        p
    }
}

/// lim_{N→∞} Δ^stat/N = (ρ̄σ̄²/(2η)) ln(1+2ληT).
pub fn large_n_limit_delta(sigma_bar: f64, rho_bar: f64, eta: f64, lambda: f64, horizon: f64) -> f64 {
    rho_bar * sigma_bar * sigma_bar / (2.0 * eta) * (2.0 * lambda * eta * horizon).ln_1p()
}

/// η = (4λ²σ²T − QV)/(2λT·QV), the inverse of the static QV law.
pub fn estimate_eta_from_qv(qv_t: f64, sigma_sq: f64, lambda: f64, horizon: f64) -> Result<f64> {
    let upper = 4.0 * lambda * lambda * sigma_sq * horizon;
    if !(lambda > 0.0 && horizon > 0.0 && sigma_sq > 0.0) {
        return Err(Error::InfeasibleObservation("sigma2, lambda and horizon must be positive".into()));
    }
    if !(qv_t > 0.0 && qv_t < upper) {
        return Err(Error::InfeasibleObservation(format!(
            "quadratic variation {qv_t} outside (0, {upper})"
        )));
    }
    Ok((upper - qv_t) / (2.0 * lambda * horizon * qv_t))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaxPolicy {
    pub tau: f64,
    pub alpha: Vec<f64>,
    pub cost: f64,
    /// Below this λ the tax is cheaper than the optimal allocation.
    pub break_even_lambda: f64,
}

pub fn tax_policy(mkt: &MarketParams) -> Result<TaxPolicy> {
    let eta = mkt.require_homogeneous_eta("pure tax")?;
    let a = mkt.aggregates();
    let (rho, big_t) = (mkt.rho(), mkt.horizon());
    let n = mkt.n() as f64;
    let tau = a.h_bar + (1.0 - rho) * a.mu_bar / eta;
    let sum_h2 = mkt.firms().iter().map(|f| f.h * f.h).sum::<f64>();
    let cost = n * big_t * (0.5 * eta * tau * tau - eta / (2.0 * n) * sum_h2 + rho * a.mu_bar * tau);
    Ok(TaxPolicy {
        tau,
        alpha: mkt.firms().iter().map(|f| eta * (tau - f.h)).collect(),
        cost,
        break_even_lambda: tau / (4.0 * rho * a.mu_bar * big_t),
    })
}

/// Signs of C^tax − Ĉ at λ*(1 − rel) and λ*(1 + rel).
pub fn tax_break_even_signs(mkt: &MarketParams, rel: f64) -> Result<(f64, f64)> {
    let t = tax_policy(mkt)?;
    let at = |lam: f64| -> Result<f64> {
        let m = mkt.with_lambda(lam)?;
        Ok((tax_policy(&m)?.cost - optimal_cost(&m)).signum())
    };
    Ok((at(t.break_even_lambda * (1.0 - rel))?, at(t.break_even_lambda * (1.0 + rel))?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MsrPolicy {
    pub delta: f64,
    pub x0_bar: f64,
    pub p0: f64,
    pub ell: f64,
}

/// x̄₀ = δT/(1−e^{−δT}) [ℓ + (T − z(0)) η(P̂₀ − h̄)].
pub fn msr_policy(mkt: &MarketParams, delta: f64) -> Result<MsrPolicy> {
    let eta = mkt.require_homogeneous_eta("MSR-like allocation")?;
    validate_msr_denominator(mkt, delta)?;
    let big_t = mkt.horizon();
    let p0 = optimal_price(mkt);
    let l = ell(mkt);
    let z0 = msr_z(delta, 0.0, big_t)?;
    let x0_bar = big_t / z0 * (l + (big_t - z0) * eta * (p0 - mkt.aggregates().h_bar));
    Ok(MsrPolicy { delta, x0_bar, p0, ell: l })
}

/// P̂ = F[(1−δz)((T−t)x̄₀/T − X̄) + z(ηh̄ − x̄₀/T)].
pub fn msr_closed_loop_price(mkt: &MarketParams, msr: &MsrPolicy, t: f64, xbar: f64) -> Result<f64> {
    let eta = mkt.require_homogeneous_eta("MSR-like allocation")?;
    let big_t = mkt.horizon();
    let z = msr_z(msr.delta, t, big_t)?;
    let ramp = (big_t - t) * msr.x0_bar / big_t;
    Ok(msr_f(mkt, msr.delta, t)?
        * ((1.0 - msr.delta * z) * (ramp - xbar) + z * (eta * mkt.aggregates().h_bar - msr.x0_bar / big_t)))
}

/// Naive coupled Euler scheme for (X̄, P̂) using the closed-loop price:
/// dX̄ = (ā + ᾱ)dt − dW̄ with ā = δ(ramp − X̄), ᾱ = η(P̂ − h̄).
pub fn msr_coupled_euler(mkt: &MarketParams, msr: &MsrPolicy, noise: &NoisePaths) -> Result<(Vec<f64>, Vec<f64>)> {
    let eta = mkt.require_homogeneous_eta("MSR-like allocation")?;
    let grid = *noise.grid();
    let (dt, big_t) = (grid.dt(), mkt.horizon());
    let w = mkt.wbar_loadings();
    let h = mkt.aggregates().h_bar;
    let mut x = vec![msr.x0_bar];
    let mut p = Vec::with_capacity(grid.n_steps() + 1);
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        let pk = msr_closed_loop_price(mkt, msr, t, x[k])?;
        p.push(pk);
        let a = msr.delta * ((big_t - t) * msr.x0_bar / big_t - x[k]);
        x.push(x[k] + (a + eta * (pk - h)) * dt - dot(&w, noise.base_step(k)));
    }
    p.push(msr_closed_loop_price(mkt, msr, big_t, x[grid.n_steps()])?);
    Ok((x, p))
}

/// Allocation scheme realising an allowance policy.
pub fn allocation_scheme(mkt: &MarketParams, spec: &PolicySpec) -> Result<AllocationScheme> {
    let n = mkt.n();
    let big_t = mkt.horizon();
    Ok(match spec {
        PolicySpec::OptimalDynamic => {
            let o = optimal_dynamic_policy(mkt)?;
            custom(o.m0, o.gamma)
        }
        PolicySpec::Custom { m0, gamma } => {
            if m0.len() != n || gamma.len() != n || gamma.iter().any(|r| r.len() != n + 1) {
                return Err(Error::ShapeMismatch(format!("custom policy needs {n} M0 values and a {n}x{} gamma", n + 1)));
            }
            custom(m0.clone(), gamma.clone())
        }
        PolicySpec::Static => {
            let s = static_policy(mkt)?;
            AllocationScheme {
                plans: mkt
                    .firms()
                    .iter()
                    .map(|f| AllocationPlan {
                        expected_total: s.x0_bar - f.mu * big_t,
                        loadings: vec![0.0; n + 1],
                        realization: Realization::Endowment { initial: s.x0_bar },
                    })
                    .collect(),
                profile: LoadingProfile::Unit,
            }
        }
        PolicySpec::Msr { delta } => {
            let m = msr_policy(mkt, *delta)?;
            let w = mkt.wbar_loadings();
            AllocationScheme {
                plans: (0..n)
                    .map(|_| AllocationPlan {
                        expected_total: m.ell,
                        loadings: w.clone(),
                        realization: Realization::MeanReverting { initial: m.x0_bar, delta: *delta },
                    })
                    .collect(),
                profile: LoadingProfile::MsrTracking { delta: *delta },
            }
        }
        PolicySpec::Tax => {
            return Err(Error::UnsupportedConfiguration("the pure tax allocates no allowances".into()))
        }
    })
}

fn custom(m0: Vec<f64>, gamma: Vec<Vec<f64>>) -> AllocationScheme {
    AllocationScheme {
        plans: m0
            .into_iter()
            .zip(gamma)
            .map(|(m, g)| AllocationPlan { expected_total: m, loadings: g, realization: Realization::Martingale })
            .collect(),
        profile: LoadingProfile::Unit,
    }
}

/// Closed-form social cost where one exists (frictionless model only).
pub fn closed_form_cost(mkt: &MarketParams, spec: &PolicySpec) -> Result<Option<f64>> {
    if !mkt.nu().is_frictionless() {
        return Ok(None);
    }
    Ok(match spec {
        PolicySpec::OptimalDynamic => Some(optimal_cost(mkt)),
        PolicySpec::Static => Some(static_policy(mkt)?.cost),
        PolicySpec::Tax => Some(tax_policy(mkt)?.cost),
        PolicySpec::Msr { .. } => None,
        PolicySpec::Custom { m0, gamma } => {
            let feasible = (m0.iter().sum::<f64>() - mkt.n() as f64 * ell(mkt)).abs() <= 1e-9 * ell(mkt).abs() * mkt.n() as f64;
            (feasible && check_gamma_optimality(gamma, mkt.firms())?.ok).then(|| optimal_cost(mkt))
        }
    })
}

/// A policy prepared for repeated path evaluation.
pub enum PreparedPolicy {
    Allowance { kind: PolicyKind, scheme: Box<PreparedScheme> },
    Tax { tau: f64, alpha: Vec<f64> },
}

impl PreparedPolicy {
    pub fn new(mkt: &MarketParams, spec: &PolicySpec, grid: TimeGrid) -> Result<Self> {
        match spec {
            PolicySpec::Tax => {
                let t = tax_policy(mkt)?;
                Ok(PreparedPolicy::Tax { tau: t.tau, alpha: t.alpha })
            }
            _ => {
                let scheme = allocation_scheme(mkt, spec)?;
                Ok(PreparedPolicy::Allowance {
                    kind: spec.kind(),
                    scheme: Box::new(PreparedScheme::new(mkt, &scheme, grid)?),
                })
            }
        }
    }

    pub fn kind(&self) -> PolicyKind {
        match self {
            PreparedPolicy::Allowance { kind, .. } => *kind,
            PreparedPolicy::Tax { .. } => PolicyKind::Tax,
        }
    }

    /// Simulates one path. For the tax the bank and allocation are undefined
    /// (NaN), the price is τ, and the cost includes the tax bill.
    pub fn simulate(&self, mkt: &MarketParams, noise: &NoisePaths, selection: BetaSelection) -> Result<PathOutcome> {
        match self {
            PreparedPolicy::Allowance { scheme, .. } => {
                let path = simulate_equilibrium(scheme, noise, selection)?;
                let cost = path.social_cost(mkt);
                Ok(PathOutcome { path, cost })
            }
            PreparedPolicy::Tax { tau, alpha } => Ok(tax_path(mkt, *tau, alpha, noise)),
        }
    }
}

/// One simulated path and its social cost.
#[derive(Debug, Clone)]
pub struct PathOutcome {
    pub path: EquilibriumPath,
    pub cost: CostBreakdown,
}

fn tax_path(mkt: &MarketParams, tau: f64, alpha: &[f64], noise: &NoisePaths) -> PathOutcome {
    let grid = *noise.grid();
    let (m, dt) = (grid.n_steps(), grid.dt());
    let n = mkt.n();
    let mut emissions = Vec::with_capacity(n);
    let mut cost = CostBreakdown::default();
    for (i, f) in mkt.firms().iter().enumerate() {
        let a = alpha[i];
        let mut e = Vec::with_capacity(m + 1);
        e.push(0.0);
        for k in 0..m {
            e.push(e[k] + (f.mu - a) * dt + f.sigma * noise.firm_increment(k, i));
        }
        cost.abatement += mkt.horizon() * f.abatement_cost(a);
        cost.tax += tau * e[m];
        emissions.push(e);
    }
    let row = |v: f64, len: usize| vec![v; len];
    let path = EquilibriumPath {
        grid,
        price: row(tau, m + 1),
        price_int: row(tau * dt, m),
        alpha: alpha.iter().map(|&a| row(a, m + 1)).collect(),
        beta: (0..n).map(|_| row(0.0, m + 1)).collect(),
        bank: (0..n).map(|_| row(f64::NAN, m + 1)).collect(),
        allocation: (0..n).map(|_| row(f64::NAN, m + 1)).collect(),
        closing: (0..n).map(|_| row(0.0, m + 1)).collect(),
        trade_martingale: None,
        alpha_int: alpha.iter().map(|&a| row(a * dt, m)).collect(),
        alpha_sq_int: alpha.iter().map(|&a| row(a * a * dt, m)).collect(),
        emissions,
        mean_bank: row(f64::NAN, m + 1),
        clearing_residual: 0.0,
    };
    PathOutcome { path, cost }
}

/// Monte Carlo settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub selection: BetaSelection,
}

/// Summary of one policy over an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub policy: PolicyKind,
    pub closed_form: Option<f64>,
    pub mc_estimate: f64,
    pub mc_stderr: f64,
    pub n_paths: usize,
    /// Ensemble means of the cost components.
    pub breakdown: CostBreakdown,
    pub expected_total_emissions: f64,
    pub emissions_stderr: f64,
    /// |MC − closed form| within the consistency band (None without a closed form).
    pub consistent: Option<bool>,
    /// Largest relative market-clearing residual seen.
    pub max_clearing_residual: f64,
}

/// Paired difference of two policies' costs on the same paths.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseDelta {
    pub first: PolicyKind,
    pub second: PolicyKind,
    /// E[C_first − C_second].
    pub mean: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub reports: Vec<CostReport>,
    pub deltas: Vec<PairwiseDelta>,
}

/// Whether `mc ± se` is consistent with `exact`.
pub fn within_band(mc: f64, se: f64, exact: f64) -> bool {
    (mc - exact).abs() <= CONSISTENCY_SIGMAS * se + ROUNDOFF_FLOOR * exact.abs().max(mc.abs())
}

/// Runs every policy on every path of `ensemble`; `observe` sees each
/// (policy index, path index, outcome).
pub fn compare_policies_with(
    mkt: &MarketParams,
    specs: &[PolicySpec],
    ensemble: &PathEnsemble,
    selection: BetaSelection,
    mut observe: impl FnMut(usize, usize, &PathOutcome) -> Result<()>,
) -> Result<Comparison> {
    if ensemble.n_paths() == 0 {
        return Err(Error::param("n_paths", "must be positive"));
    }
    let grid = *ensemble.grid();
    let prepared = specs
        .iter()
        .map(|s| PreparedPolicy::new(mkt, s, grid))
        .collect::<Result<Vec<_>>>()?;
    let np = specs.len();
    let mut cost = vec![RunningStats::default(); np];
    let mut emis = vec![RunningStats::default(); np];
    let mut parts = vec![CostBreakdown::default(); np];
    let mut clearing = vec![0.0f64; np];
    let mut pairs = vec![RunningStats::default(); np * np];
    let mut totals = vec![0.0; np];
    for (j, noise) in ensemble.iter().enumerate() {
        for (p, prep) in prepared.iter().enumerate() {
            let out = prep.simulate(mkt, &noise, selection)?;
            let c = out.cost.total();
            totals[p] = c;
            cost[p].push(c);
            emis[p].push(*out.path.total_emissions().last().unwrap_or(&0.0));
            parts[p].abatement += out.cost.abatement;
            parts[p].trading += out.cost.trading;
            parts[p].penalty += out.cost.penalty;
            parts[p].tax += out.cost.tax;
            clearing[p] = clearing[p].max(out.path.clearing_residual);
            observe(p, j, &out)?;
        }
        for a in 0..np {
            for b in a + 1..np {
                pairs[a * np + b].push(totals[a] - totals[b]);
            }
        }
    }
    let np_f = ensemble.n_paths() as f64;
    let mut reports = Vec::with_capacity(np);
    for (p, spec) in specs.iter().enumerate() {
        let closed_form = closed_form_cost(mkt, spec)?;
        let (mc, se) = (cost[p].mean(), cost[p].stderr());
        let b = parts[p];
        reports.push(CostReport {
            policy: spec.kind(),
            closed_form,
            mc_estimate: mc,
            mc_stderr: se,
            n_paths: ensemble.n_paths(),
            breakdown: CostBreakdown {
                abatement: b.abatement / np_f,
                trading: b.trading / np_f,
                penalty: b.penalty / np_f,
                tax: b.tax / np_f,
            },
            expected_total_emissions: emis[p].mean(),
            emissions_stderr: emis[p].stderr(),
            consistent: closed_form.map(|cf| within_band(mc, se, cf)),
            max_clearing_residual: clearing[p],
        });
    }
    let mut deltas = Vec::new();
    for a in 0..np {
        for b in a + 1..np {
            let s = &pairs[a * np + b];
            deltas.push(PairwiseDelta { first: specs[a].kind(), second: specs[b].kind(), mean: s.mean(), stderr: s.stderr() });
        }
    }
    check_static_gap(mkt, specs)?;
    Ok(Comparison { reports, deltas })
}

pub fn compare_policies(
    mkt: &MarketParams,
    specs: &[PolicySpec],
    ensemble: &PathEnsemble,
    selection: BetaSelection,
) -> Result<Comparison> {
    compare_policies_with(mkt, specs, ensemble, selection, |_, _, _| Ok(()))
}

/// Single-policy convenience wrapper.
pub fn simulate_policy(mkt: &MarketParams, spec: &PolicySpec, cfg: &MonteCarloConfig) -> Result<CostReport> {
    let grid = TimeGrid::new(mkt.horizon(), cfg.n_steps)?;
    let ens = PathEnsemble::new(cfg.seed, cfg.n_paths, grid, mkt.firms());
    Ok(compare_policies(mkt, std::slice::from_ref(spec), &ens, cfg.selection)?.reports.remove(0))
}

/// The static closed form must exceed Ĉ by exactly Δ^stat.
fn check_static_gap(mkt: &MarketParams, specs: &[PolicySpec]) -> Result<()> {
    if !mkt.nu().is_frictionless() || !specs.contains(&PolicySpec::Static) {
        return Ok(());
    }
    let s = static_policy(mkt)?;
    let c_hat = optimal_cost(mkt);
    let gap = s.cost - c_hat - s.delta;
    if gap.abs() > 1e-9 * s.cost.abs().max(c_hat.abs()).max(s.delta.abs()) {
        return Err(Error::Diagnostic(format!("static cost gap differs from its closed form by {gap}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::MarketDepth;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn base_with(sigma: f64, rho: f64) -> MarketParams {
        let f = FirmParams::new(2e9 / 6.0, sigma, 0.92, 25.0, 6e8).unwrap();
        MarketParams::new(vec![f; 6], 7.5e-7, MarketDepth::Infinite, 10.0, rho).unwrap()
    }
    fn base() -> MarketParams {
        base_with(0.2e9 / 6f64.sqrt(), 0.8)
    }

    #[test]
    fn optimal_base_values() {
        let m = base();
        let o = optimal_dynamic_policy(&m).unwrap();
        assert_relative_eq!(o.p0, 25.0 + 0.2 * (2e9 / 6.0) / 6e8, max_relative = 1e-15);
        assert!((o.p0 - 25.111).abs() < 1e-3);
        // The bank is the line ℓ + (α+β)t and must close at −P̂₀/(2λ).
        for (a, b) in o.alpha.iter().zip(&o.beta) {
            let xt = o.ell + (a + b) * 10.0;
            // Cancellation between terms of size |ℓ|.
            assert!((xt + o.p0 / (2.0 * 7.5e-7)).abs() < 1e-12 * o.ell.abs());
        }
        assert!(o.m0.iter().all(|&x| x == o.ell));
    }

    #[test]
    fn optimal_full_reduction() {
        let o = optimal_dynamic_policy(&base_with(1e7, 1.0)).unwrap();
        assert_relative_eq!(o.p0, 25.0, max_relative = 1e-15);
        assert!(o.alpha.iter().all(|a| a.abs() < 1e-6));
    }

    #[test]
    fn gamma_checks() {
        let m = base();
        let o = optimal_dynamic_policy(&m).unwrap();
        assert!(check_gamma_optimality(&o.gamma, m.firms()).unwrap().ok);
        let mut perm = o.gamma.clone();
        perm.rotate_left(2);
        assert!(check_gamma_optimality(&perm, m.firms()).unwrap().ok);
        let zero = vec![vec![0.0; 7]; 6];
        let c = check_gamma_optimality(&zero, m.firms()).unwrap();
        assert!(!c.ok);
        let f = &m.firms()[0];
        assert_relative_eq!(c.residuals[3], -f.sigma * (1.0 - f.k * f.k).sqrt(), max_relative = 1e-15);
        assert!(matches!(check_gamma_optimality(&zero[..5], m.firms()), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn static_base_values() {
        let m = base();
        let s = static_policy(&m).unwrap();
        assert!((6.0 * s.x0_bar - 15.90e9).abs() < 0.01e9);
        assert_relative_eq!(s.p0, optimal_price(&m), max_relative = 1e-12);
        assert!((s.cost - optimal_cost(&m) - s.delta).abs() < 1e-12 * s.cost);
        assert!((s.delta - 2.646e8).abs() < 1e6);
        assert!((s.qv_t - 14.53).abs() < 0.01);
    }

    #[test]
    fn static_without_noise_is_optimal() {
        let m = base_with(0.0, 0.8);
        let s = static_policy(&m).unwrap();
        assert_eq!(s.delta, 0.0);
        assert_relative_eq!(s.cost, optimal_cost(&m), max_relative = 1e-14);
    }

    #[test]
    fn heterogeneous_eta_rejected() {
        let m = base();
        let mut firms = m.firms().to_vec();
        firms[1].eta = 7e8;
        let m = m.with_firms(firms).unwrap();
        for r in [static_policy(&m).map(|_| ()), tax_policy(&m).map(|_| ()), msr_policy(&m, 0.1).map(|_| ())] {
            assert!(matches!(r, Err(Error::UnsupportedConfiguration(_))));
        }
        assert!(optimal_dynamic_policy(&m).is_ok());
    }

    #[test]
    fn large_n_limit() {
        let (sb, rb, eta, lam, t) = (0.2e9 / 6f64.sqrt(), 0.92f64.powi(2), 6e8, 7.5e-7, 10.0);
        let limit = large_n_limit_delta(sb, rb, eta, lam, t);
        let n = 1e4;
        let sigma_sq = (n * sb * sb + rb * sb * sb * n * (n - 1.0)) / (n * n);
        let per_firm = sigma_sq / (2.0 * eta) * (2.0 * lam * eta * t).ln_1p();
        assert!(((per_firm * n - limit * n) / (limit * n)).abs() < 1e-3);
        assert_eq!(large_n_limit_delta(sb, 0.0, eta, lam, t), 0.0);
        // ρ̄ = 1: every N gives the limit.
        assert_relative_eq!(sb * sb / (2.0 * eta) * (2.0 * lam * eta * t).ln_1p(), large_n_limit_delta(sb, 1.0, eta, lam, t));
    }

    #[test]
    fn eta_estimator() {
        let m = base();
        let s = static_policy(&m).unwrap();
        let sig2 = m.aggregates().sigma_sq;
        assert_relative_eq!(estimate_eta_from_qv(s.qv_t, sig2, 7.5e-7, 10.0).unwrap(), 6e8, max_relative = 1e-14);
        let upper = 4.0 * 7.5e-7f64.powi(2) * sig2 * 10.0;
        assert!(estimate_eta_from_qv(upper * (1.0 - 1e-12), sig2, 7.5e-7, 10.0).unwrap() < 1e-2);
        for q in [0.0, -1.0, upper, 2.0 * upper, f64::NAN] {
            assert!(matches!(estimate_eta_from_qv(q, sig2, 7.5e-7, 10.0), Err(Error::InfeasibleObservation(_))));
        }
    }

    #[test]
    fn tax_base_values() {
        let m = base();
        let t = tax_policy(&m).unwrap();
        assert_eq!(t.tau, optimal_price(&m));
        assert!(t.cost / optimal_cost(&m) >= 4.0);
        // C^tax − Ĉ = NTρμ̄τ − Nτ²/(4λ).
        let oracle = 6.0 * 10.0 * 0.8 * (2e9 / 6.0) * t.tau - 6.0 * t.tau * t.tau / (4.0 * 7.5e-7);
        assert_relative_eq!(t.cost - optimal_cost(&m), oracle, max_relative = 1e-9);
        assert_relative_eq!(t.break_even_lambda, 2.3542e-9, max_relative = 1e-4);
        assert_eq!(tax_break_even_signs(&m, 1e-6).unwrap(), (-1.0, 1.0));
    }

    #[test]
    fn tax_full_reduction() {
        let t = tax_policy(&base_with(1e7, 1.0)).unwrap();
        assert_eq!(t.tau, 25.0);
        assert!(t.alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn msr_base_values() {
        let m = base();
        let p = msr_policy(&m, 0.1).unwrap();
        let e = (-1.0f64).exp();
        let oracle = 1.0 / (1.0 - e) * (p.ell + (10.0 - (1.0 - e) / 0.1) * 6e8 * (p.p0 - 25.0));
        assert_relative_eq!(p.x0_bar, oracle, max_relative = 1e-13);
        assert_relative_eq!(1.0 / (1.0 - e), 1.5820, max_relative = 1e-4);
        assert_relative_eq!(10.0 - (1.0 - e) / 0.1, 3.6788, max_relative = 1e-4);
        // At t = 0 the feedback price starts at P̂₀.
        assert_relative_eq!(msr_closed_loop_price(&m, &p, 0.0, p.x0_bar).unwrap(), p.p0, max_relative = 1e-9);
    }

    #[test]
    fn msr_strong_reversion_tracks_ramp() {
        let m = base_with(0.0, 0.8);
        let p = msr_policy(&m, 50.0).unwrap();
        let grid = TimeGrid::new(10.0, 4000).unwrap();
        let noise = crate::stochastic::generate_noise(1, grid, m.firms());
        let (x, _) = msr_coupled_euler(&m, &p, &noise).unwrap();
        let scale = p.x0_bar.abs();
        for (k, xk) in x.iter().enumerate() {
            let ramp = (10.0 - grid.time(k)) * p.x0_bar / 10.0;
            assert!((xk - ramp).abs() < 0.05 * scale, "k={k}: {xk} vs {ramp}");
        }
        assert!(x.last().unwrap().abs() < 0.01 * scale);
    }

    #[test]
    fn msr_engine_matches_coupled_euler() {
        // The explicit feedback scheme is stiff near T (gain ηF ≈ 900/yr), so
        // it runs on an 8× finer grid driven by the same Brownian path.
        let m = base();
        let p = msr_policy(&m, 0.1).unwrap();
        let fine = crate::stochastic::generate_noise(3, TimeGrid::new(10.0, 16000).unwrap(), m.firms());
        let noise = fine.coarsen(8).unwrap();
        let prep = PreparedPolicy::new(&m, &PolicySpec::Msr { delta: 0.1 }, *noise.grid()).unwrap();
        let out = prep.simulate(&m, &noise, BetaSelection::ConstantRate).unwrap();
        let (x, price) = msr_coupled_euler(&m, &p, &fine).unwrap();
        let xs = x.iter().map(|v| v.abs()).fold(0.0, f64::max);
        // The price loads on the last ~1/900 yr, so pathwise agreement is
        // only checked up to t = 9.5.
        for k in (0..=1900).step_by(50) {
            let (xe, pe) = (x[8 * k], price[8 * k]);
            assert!((out.path.mean_bank[k] - xe).abs() < 2e-3 * xs, "bank at {k}: {} vs {xe}", out.path.mean_bank[k]);
            assert!((out.path.price[k] - pe).abs() < 2e-3 * p.p0, "price at {k}: {} vs {pe}", out.path.price[k]);
            let fb = msr_closed_loop_price(&m, &p, noise.grid().time(k), out.path.mean_bank[k]).unwrap();
            assert!((out.path.price[k] - fb).abs() < 1e-3 * p.p0, "feedback price at {k}: {} vs {fb}", out.path.price[k]);
        }
    }

    #[test]
    fn noiseless_allowance_policies_cost_the_optimum() {
        let m = base_with(0.0, 0.8);
        let grid = TimeGrid::new(10.0, 2000).unwrap();
        let ens = PathEnsemble::new(1, 2, grid, m.firms());
        let specs = [PolicySpec::OptimalDynamic, PolicySpec::Static, PolicySpec::Msr { delta: 0.1 }, PolicySpec::Tax];
        let c = compare_policies(&m, &specs, &ens, BetaSelection::ConstantRate).unwrap();
        let c_hat = optimal_cost(&m);
        for r in &c.reports[..3] {
            assert_relative_eq!(r.mc_estimate, c_hat, max_relative = 1e-6);
            assert_relative_eq!(r.expected_total_emissions, 16e9, max_relative = 1e-6);
            assert_eq!(r.mc_stderr, 0.0);
        }
        assert!(c.reports[3].mc_estimate > 4.0 * c_hat);
        assert_eq!(c.deltas.len(), 6);
        assert_eq!(c.reports[0].consistent, Some(true));
        assert_eq!(c.reports[2].closed_form, None);
    }

    #[test]
    fn custom_profiles_share_the_optimum() {
        let m = base();
        let o = optimal_dynamic_policy(&m).unwrap();
        let mut gamma = o.gamma.clone();
        gamma.rotate_left(1);
        let mut m0 = o.m0.clone();
        m0[0] += 3e8;
        m0[4] -= 3e8;
        let spec = PolicySpec::Custom { m0, gamma };
        assert_eq!(closed_form_cost(&m, &spec).unwrap(), Some(o.cost));
        let cfg = MonteCarloConfig { n_paths: 20, n_steps: 500, seed: 9, selection: BetaSelection::ConstantRate };
        let r = simulate_policy(&m, &spec, &cfg).unwrap();
        assert_relative_eq!(r.mc_estimate, o.cost, max_relative = 1e-9);
        let bad = PolicySpec::Custom { m0: vec![0.0; 6], gamma: o.gamma.clone() };
        assert_eq!(closed_form_cost(&m, &bad).unwrap(), None);
        let wrong = PolicySpec::Custom { m0: vec![0.0; 5], gamma: o.gamma };
        assert!(matches!(allocation_scheme(&m, &wrong), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn policy_kind_names_round_trip() {
        for k in [PolicyKind::OptimalDynamic, PolicyKind::Static, PolicyKind::Tax, PolicyKind::Msr, PolicyKind::Custom] {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("cap".parse::<PolicyKind>().is_err());
    }

    proptest! {
        #[test]
        fn static_gap_identity(eta in 1e6f64..1e10, lam in 1e-8f64..1e-5, rho in 0.1f64..1.0, sigma in 0.0f64..1e8) {
            let f = FirmParams::new(3e8, sigma, 0.6, 20.0, eta).unwrap();
            let m = MarketParams::new(vec![f; 4], lam, MarketDepth::Infinite, 8.0, rho).unwrap();
            let s = static_policy(&m).unwrap();
            let c = optimal_cost(&m);
            // Relative to the largest term of the closed forms.
            let scale = 4.0 / (4.0 * lam) * (1.0 + 2.0 * lam * eta * 8.0) * s.p0 * s.p0;
            prop_assert!((s.cost - c - s.delta).abs() <= 1e-12 * scale);
            prop_assert!(s.delta >= 0.0);
        }

        #[test]
        fn eta_round_trip(eta in 1e5f64..1e11) {
            let (lam, t, s2) = (7.5e-7, 10.0, 5.8e15);
            let qv = 4.0 * lam * lam * s2 * t / (1.0 + 2.0 * lam * eta * t);
            let back = estimate_eta_from_qv(qv, s2, lam, t).unwrap();
            prop_assert!((back - eta).abs() <= 1e-9 * eta);
        }
    }
}
