//! N-firm market equilibrium for a given allocation scheme: the frictional
//! price SDE with its π coefficients, the frictionless price driven by the
//! aggregate closing martingale, and the induced firm controls.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::firm::{select_beta, BetaSelection, CostBreakdown, PricePath};
use crate::params::{f_coeff, g_coeff, msr_f, msr_z, pi_coeff, MarketDepth, MarketParams};
use crate::stochastic::{NoisePaths, StepSchedule, TimeGrid};

/// Relative tolerance on Σβ at every knot of the frictional equilibrium.
pub const CLEARING_TOLERANCE: f64 = 1e-9;

/// How a firm's cumulative net allocation A is paid out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Realization {
    /// A = M: the closing martingale is credited as it moves.
    Martingale,
    /// A_t = x₀ − μt: a fixed initial endowment.
    Endowment { initial: f64 },
    /// A₀ = x₀ and dA = δ(ramp_t − X̄_t)dt, ramp_t = (T−t)x̄₀/T with x̄₀ the
    /// average initial endowment.
    MeanReverting { initial: f64, delta: f64 },
}

/// Time profile ψ(t) multiplying every loading γ^{ij}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LoadingProfile {
    Unit,
    /// ψ = 1 − F(1−δz)/f: the closing martingale induced by an MSR-like rule.
    MsrTracking { delta: f64 },
}

/// One firm's allocation: dMⁱ = ψ(t) Σⱼ γ^{ij} dW̃ʲ, Mⁱ₀ = expected_total.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationPlan {
    pub expected_total: f64,
    /// γ^{i,0..N}.
    pub loadings: Vec<f64>,
    pub realization: Realization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationScheme {
    pub plans: Vec<AllocationPlan>,
    pub profile: LoadingProfile,
}

fn psi(mkt: &MarketParams, profile: LoadingProfile, t: f64) -> Result<f64> {
    match profile {
        LoadingProfile::Unit => Ok(1.0),
        LoadingProfile::MsrTracking { delta } => {
            let f = f_coeff(mkt, t)?;
            Ok(1.0 - msr_f(mkt, delta, t)? * (1.0 - delta * msr_z(delta, t, mkt.horizon())?) / f)
        }
    }
}

enum Engine {
    Frictionless { price: Arc<StepSchedule> },
    Frictions { g0: Vec<f64>, g_next: Vec<Vec<f64>>, pi_next: Vec<Vec<f64>>, nu: f64 },
}

/// Deterministic per-step data for simulating one scheme on one grid.
pub struct PreparedScheme {
    mkt: MarketParams,
    grid: TimeGrid,
    scheme: AllocationScheme,
    m_sched: Vec<StepSchedule>,
    engine: Engine,
    p0: f64,
    ramp_start: f64,
}

impl PreparedScheme {
    pub fn new(mkt: &MarketParams, scheme: &AllocationScheme, grid: TimeGrid) -> Result<Self> {
        let n = mkt.n();
        let dim = n + 1;
        if scheme.plans.len() != n || scheme.plans.iter().any(|p| p.loadings.len() != dim) {
            return Err(Error::ShapeMismatch(format!("scheme needs {n} plans with {dim} loadings each")));
        }
        if (grid.horizon() - mkt.horizon()).abs() > 1e-12 * mkt.horizon() {
            return Err(Error::ShapeMismatch("grid horizon differs from market horizon".into()));
        }
        for (i, (p, f)) in scheme.plans.iter().zip(mkt.firms()).enumerate() {
            if let Realization::Endowment { initial } = p.realization {
                let m0 = initial - f.mu * mkt.horizon();
                if p.loadings.iter().any(|&g| g != 0.0) || (p.expected_total - m0).abs() > 1e-9 * m0.abs().max(1.0) {
                    return Err(Error::UnsupportedInput(format!(
                        "plan {i}: a fixed endowment needs zero loadings and M0 = x0 - mu*T"
                    )));
                }
            }
        }
        let profile = scheme.profile;
        if let LoadingProfile::MsrTracking { delta } = profile {
            mkt.require_homogeneous_eta("MSR-like allocation")?;
            crate::params::validate_msr_denominator(mkt, delta)?;
        }
        let m_sched = scheme
            .plans
            .iter()
            .map(|p| match profile {
                LoadingProfile::Unit => Ok(StepSchedule::constant(&grid, &p.loadings)),
                LoadingProfile::MsrTracking { .. } => {
                    // Validate once on the knots; the closure cannot fail.
                    for k in 0..=grid.n_steps() {
                        psi(mkt, profile, grid.time(k))?;
                    }
                    Ok(StepSchedule::scaled(&grid, &p.loadings, |t| psi(mkt, profile, t).unwrap_or(f64::NAN)))
                }
            })
            .collect::<Result<Vec<_>>>()?;

        let nf = n as f64;
        let m_bar0 = scheme.plans.iter().map(|p| p.expected_total).sum::<f64>() / nf;
        let gamma_bar: Vec<f64> =
            (0..dim).map(|j| scheme.plans.iter().map(|p| p.loadings[j]).sum::<f64>() / nf).collect();
        let wbar = mkt.wbar_loadings();
        let big_t = mkt.horizon();
        let (engine, p0) = match mkt.nu() {
            MarketDepth::Infinite => {
                let agg = mkt.aggregates();
                let p0 = f_coeff(mkt, 0.0)? * (big_t * agg.big_h_bar - m_bar0);
                let price = StepSchedule::build(&grid, dim, |t, out| {
                    let f = f_coeff(mkt, t).unwrap_or(f64::NAN);
                    let s = psi(mkt, profile, t).unwrap_or(f64::NAN);
                    for j in 0..dim {
                        out[j] = -f * (s * gamma_bar[j] - wbar[j]);
                    }
                });
                (Engine::Frictionless { price: Arc::new(price) }, p0)
            }
            MarketDepth::Finite(nu) => {
                let mut g_next = vec![Vec::with_capacity(grid.n_steps()); n];
                let mut pi_next = vec![Vec::with_capacity(grid.n_steps()); n];
                for k in 0..grid.n_steps() {
                    let t = grid.time(k + 1);
                    for i in 0..n {
                        g_next[i].push(g_coeff(&mkt.firms()[i], mkt, t)?);
                        pi_next[i].push(pi_coeff(mkt, i, t)?);
                    }
                }
                let g0 = mkt.firms().iter().map(|f| g_coeff(f, mkt, 0.0)).collect::<Result<Vec<_>>>()?;
                let mut p0 = 0.0;
                for (i, (p, f)) in scheme.plans.iter().zip(mkt.firms()).enumerate() {
                    p0 += pi_coeff(mkt, i, 0.0)? * (f.eta * f.h * big_t - p.expected_total);
                }
                (Engine::Frictions { g0, g_next, pi_next, nu }, p0 / nf)
            }
        };
        let initials: Vec<f64> = scheme
            .plans
            .iter()
            .map(|p| match p.realization {
                Realization::Martingale => p.expected_total,
                Realization::Endowment { initial } | Realization::MeanReverting { initial, .. } => initial,
            })
            .collect();
        Ok(PreparedScheme {
            mkt: mkt.clone(),
            grid,
            scheme: scheme.clone(),
            m_sched,
            engine,
            p0,
            ramp_start: initials.iter().sum::<f64>() / nf,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn market(&self) -> &MarketParams {
        &self.mkt
    }
    /// P̂₀.
    pub fn initial_price(&self) -> f64 {
        self.p0
    }
    /// Price step schedule (frictionless only).
    pub fn price_schedule(&self) -> Option<&Arc<StepSchedule>> {
        match &self.engine {
            Engine::Frictionless { price } => Some(price),
            Engine::Frictions { .. } => None,
        }
    }
    pub fn closing_schedule(&self, i: usize) -> &StepSchedule {
        &self.m_sched[i]
    }
}

/// Simulated equilibrium on one path.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumPath {
    pub grid: TimeGrid,
    pub price: Vec<f64>,
    /// ∫P over each step.
    pub price_int: Vec<f64>,
    /// Per firm, per knot.
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub bank: Vec<Vec<f64>>,
    pub allocation: Vec<Vec<f64>>,
    pub closing: Vec<Vec<f64>>,
    /// Frictionless total-trade martingales Bⁱ.
    pub trade_martingale: Option<Vec<Vec<f64>>>,
    /// Per firm, per step: ∫α and ∫α².
    pub alpha_int: Vec<Vec<f64>>,
    pub alpha_sq_int: Vec<Vec<f64>>,
    /// Per firm cumulative emissions.
    pub emissions: Vec<Vec<f64>>,
    /// Aggregate bank X̄ assuming Σβ = 0 (drives mean-reverting allocations).
    pub mean_bank: Vec<f64>,
    /// max over knots of |Σβ| relative to the size of its terms.
    pub clearing_residual: f64,
}

impl EquilibriumPath {
    pub fn n_firms(&self) -> usize {
        self.alpha.len()
    }

    /// Σᵢ Eⁱ on every knot.
    pub fn total_emissions(&self) -> Vec<f64> {
        sum_rows(&self.emissions)
    }
    pub fn total_bank(&self) -> Vec<f64> {
        sum_rows(&self.bank)
    }
    pub fn mean_alpha(&self) -> Vec<f64> {
        let n = self.n_firms() as f64;
        sum_rows(&self.alpha).into_iter().map(|x| x / n).collect()
    }

    /// Social cost: abatement + frictional trading cost + terminal penalty.
    /// The Pβ transfers cancel at clearing and are left out.
    pub fn social_cost(&self, mkt: &MarketParams) -> CostBreakdown {
        let dt = self.grid.dt();
        let inv_2nu = match mkt.nu() {
            MarketDepth::Finite(nu) => 0.5 / nu,
            MarketDepth::Infinite => 0.0,
        };
        let m = self.grid.n_steps();
        let mut c = CostBreakdown::default();
        for (i, f) in mkt.firms().iter().enumerate() {
            for k in 0..m {
                c.abatement += f.h * self.alpha_int[i][k] + self.alpha_sq_int[i][k] / (2.0 * f.eta);
                c.trading += self.beta[i][k].powi(2) * dt * inv_2nu;
            }
            c.penalty += mkt.lambda() * self.bank[i][m].powi(2);
        }
        c
    }
}

fn sum_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows.first().map_or(0, |r| r.len())];
    for r in rows {
        out.iter_mut().zip(r).for_each(|(o, x)| *o += x);
    }
    out
}

struct Drivers {
    m: Vec<Vec<f64>>,
    dw: Vec<Vec<f64>>,
}

fn drivers(prep: &PreparedScheme, noise: &NoisePaths) -> Result<Drivers> {
    let n = prep.mkt.n();
    if noise.n_firms() != n || noise.grid() != &prep.grid {
        return Err(Error::ShapeMismatch("noise does not match scheme".into()));
    }
    let steps = prep.grid.n_steps();
    let mut m = Vec::with_capacity(n);
    let mut dw = Vec::with_capacity(n);
    for i in 0..n {
        let s = &prep.m_sched[i];
        let mut path = Vec::with_capacity(steps + 1);
        path.push(prep.scheme.plans[i].expected_total);
        for k in 0..steps {
            path.push(path[k] + s.increment(k, noise.base_step(k)));
        }
        m.push(path);
        dw.push((0..steps).map(|k| noise.firm_increment(k, i)).collect());
    }
    Ok(Drivers { m, dw })
}

/// Allocation, aggregate bank, banks and emissions given efforts and trades.
struct Books {
    allocation: Vec<Vec<f64>>,
    mean_bank: Vec<f64>,
}

/// Integrates every firm's A together with X̄ (which mean-reverting rules
/// feed back on). Needs per-step ∫α.
fn allocations(prep: &PreparedScheme, d: &Drivers, alpha_int: &[Vec<f64>]) -> Books {
    let mkt = &prep.mkt;
    let n = mkt.n();
    let nf = n as f64;
    let steps = prep.grid.n_steps();
    let dt = prep.grid.dt();
    let big_t = mkt.horizon();
    let mut allocation: Vec<Vec<f64>> = prep
        .scheme
        .plans
        .iter()
        .map(|p| {
            let mut v = Vec::with_capacity(steps + 1);
            v.push(match p.realization {
                Realization::Martingale => p.expected_total,
                Realization::Endowment { initial } | Realization::MeanReverting { initial, .. } => initial,
            });
            v
        })
        .collect();
    let mut xbar = Vec::with_capacity(steps + 1);
    xbar.push(allocation.iter().map(|a| a[0]).sum::<f64>() / nf);
    for k in 0..steps {
        let t_mid = 0.5 * (prep.grid.time(k) + prep.grid.time(k + 1));
        let ramp = (big_t - t_mid) * prep.ramp_start / big_t;
        // Mean-reverting rates use the trapezoidal X̄ over the step, which
        // makes the update implicit but linear: solve for Σ da first.
        let mut other = 0.0;
        let mut rate_sum = 0.0;
        let mut aint = 0.0;
        let mut noise = 0.0;
        for (i, (p, f)) in prep.scheme.plans.iter().zip(mkt.firms()).enumerate() {
            match p.realization {
                Realization::Martingale => other += d.m[i][k + 1] - d.m[i][k],
                Realization::Endowment { .. } => other -= f.mu * dt,
                Realization::MeanReverting { delta, .. } => rate_sum += delta * dt,
            }
            aint += alpha_int[i][k];
            noise += f.sigma * d.dw[i][k];
        }
        let gap = ramp - xbar[k];
        let mr_sum = (rate_sum * gap - rate_sum / (2.0 * nf) * (other + aint - noise)) / (1.0 + rate_sum / (2.0 * nf));
        let step = (other + mr_sum + aint - noise) / nf;
        for (i, (p, f)) in prep.scheme.plans.iter().zip(mkt.firms()).enumerate() {
            let da = match p.realization {
                Realization::Martingale => d.m[i][k + 1] - d.m[i][k],
                Realization::Endowment { .. } => -f.mu * dt,
                Realization::MeanReverting { delta, .. } => delta * dt * (gap - 0.5 * step),
            };
            let next = allocation[i][k] + da;
            allocation[i].push(next);
        }
        xbar.push(xbar[k] + step);
    }
    // A_T = M_T for martingale payouts holds by construction; the closing
    // value of the other realisations is recorded as is.
    Books { allocation, mean_bank: xbar }
}

fn banks_and_emissions(
    mkt: &MarketParams,
    grid: &TimeGrid,
    d: &Drivers,
    allocation: &[Vec<f64>],
    alpha_int: &[Vec<f64>],
    beta: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let steps = grid.n_steps();
    let dt = grid.dt();
    let mut bank = Vec::with_capacity(mkt.n());
    let mut emissions = Vec::with_capacity(mkt.n());
    for (i, f) in mkt.firms().iter().enumerate() {
        let a = &allocation[i];
        let mut x = Vec::with_capacity(steps + 1);
        let mut e = Vec::with_capacity(steps + 1);
        x.push(a[0]);
        e.push(0.0);
        for k in 0..steps {
            let shock = f.sigma * d.dw[i][k];
            x.push(x[k] + (a[k + 1] - a[k]) + alpha_int[i][k] + beta[i][k] * dt - shock);
            e.push(e[k] + f.mu * dt - alpha_int[i][k] + shock);
        }
        bank.push(x);
        emissions.push(e);
    }
    (bank, emissions)
}

/// Frictional equilibrium: P̂₀ = (1/N)Σπᵢ(0)(ηᵢhᵢT − Mⁱ₀),
/// dP̂ = −(1/N)Σπᵢ d(Mⁱ − σᵢWⁱ), dα̂ⁱ = −gᵢ[d(Mⁱ − σᵢWⁱ) − ν(T−t)dP̂],
/// β̂ⁱ = ν(hᵢ + α̂ⁱ/ηᵢ − P̂). Aborts if Σβ̂ ≠ 0 at any knot.
pub fn equilibrium_frictions(prep: &PreparedScheme, noise: &NoisePaths) -> Result<EquilibriumPath> {
    let (g0, g_next, pi_next, nu) = match &prep.engine {
        Engine::Frictions { g0, g_next, pi_next, nu } => (g0, g_next, pi_next, *nu),
        Engine::Frictionless { .. } => {
            return Err(Error::UnsupportedConfiguration("scheme was prepared for the frictionless model".into()))
        }
    };
    let mkt = &prep.mkt;
    let grid = prep.grid;
    let d = drivers(prep, noise)?;
    let (n, steps, dt, big_t, lam) = (mkt.n(), grid.n_steps(), grid.dt(), mkt.horizon(), mkt.lambda());
    let nf = n as f64;
    let firms = mkt.firms();

    let mut price = Vec::with_capacity(steps + 1);
    price.push(prep.p0);
    let mut alpha: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let f = firms[i];
            let a0 = -g0[i] * (f.h * (1.0 / (2.0 * lam) + nu * big_t) + d.m[i][0] - nu * big_t * prep.p0);
            let mut v = Vec::with_capacity(steps + 1);
            v.push(a0);
            v
        })
        .collect();
    let mut dz = vec![0.0; n];
    for k in 0..steps {
        let mut dp = 0.0;
        for i in 0..n {
            dz[i] = d.m[i][k + 1] - d.m[i][k] - firms[i].sigma * d.dw[i][k];
            dp -= pi_next[i][k] * dz[i];
        }
        dp /= nf;
        price.push(price[k] + dp);
        let tau = big_t - grid.time(k + 1);
        for i in 0..n {
            let next = alpha[i][k] - g_next[i][k] * (dz[i] - nu * tau * dp);
            alpha[i].push(next);
        }
    }
    let beta: Vec<Vec<f64>> = (0..n)
        .map(|i| alpha[i].iter().zip(&price).map(|(a, p)| nu * (firms[i].h + a / firms[i].eta - p)).collect())
        .collect();
    let mut clearing_residual = 0.0f64;
    for k in 0..=steps {
        let s: f64 = beta.iter().map(|b| b[k]).sum();
        let scale: f64 = (0..n)
            .map(|i| nu * (firms[i].h + (alpha[i][k] / firms[i].eta).abs() + price[k].abs()))
            .sum();
        let r = s.abs() / scale.max(f64::MIN_POSITIVE);
        clearing_residual = clearing_residual.max(r);
        if r > CLEARING_TOLERANCE {
            return Err(Error::ClearingViolation { step: k, residual: r });
        }
    }
    let alpha_int: Vec<Vec<f64>> = alpha.iter().map(|a| a[..steps].iter().map(|x| x * dt).collect()).collect();
    let alpha_sq_int: Vec<Vec<f64>> = alpha.iter().map(|a| a[..steps].iter().map(|x| x * x * dt).collect()).collect();
    let books = allocations(prep, &d, &alpha_int);
    let (bank, emissions) = banks_and_emissions(mkt, &grid, &d, &books.allocation, &alpha_int, &beta);
    Ok(EquilibriumPath {
        grid,
        price_int: price[..steps].iter().map(|p| p * dt).collect(),
        price,
        alpha,
        beta,
        bank,
        allocation: books.allocation,
        closing: d.m,
        trade_martingale: None,
        alpha_int,
        alpha_sq_int,
        emissions,
        mean_bank: books.mean_bank,
        clearing_residual,
    })
}

/// Frictionless equilibrium: P̂₀ = f(0)(TH̄ − M̄₀), dP̂ = −f(dM̄ − dW̄),
/// α̂ⁱ = ηᵢ(P̂ − hᵢ) and the trade martingales B̂ⁱ; reported β̂ per
/// `selection`. The clearing residual is a diagnostic here.
pub fn equilibrium_frictionless(
    prep: &PreparedScheme,
    noise: &NoisePaths,
    selection: BetaSelection,
) -> Result<EquilibriumPath> {
    let sched = match &prep.engine {
        Engine::Frictionless { price } => price,
        Engine::Frictions { .. } => {
            return Err(Error::UnsupportedConfiguration("scheme was prepared for the frictional model".into()))
        }
    };
    let mkt = &prep.mkt;
    let grid = prep.grid;
    let d = drivers(prep, noise)?;
    let (n, steps, dt, big_t, lam) = (mkt.n(), grid.n_steps(), grid.dt(), mkt.horizon(), mkt.lambda());
    let firms = mkt.firms();

    let mut price = Vec::with_capacity(steps + 1);
    price.push(prep.p0);
    for k in 0..steps {
        price.push(price[k] + sched.increment(k, noise.base_step(k)));
    }
    let i1: Vec<f64> = (0..steps).map(|k| sched.integral(k, price[k], price[k + 1])).collect();
    let i2: Vec<f64> = (0..steps).map(|k| sched.square_integral(k, price[k], price[k + 1])).collect();

    let mut alpha = Vec::with_capacity(n);
    let mut alpha_int = Vec::with_capacity(n);
    let mut alpha_sq_int = Vec::with_capacity(n);
    let mut trade = Vec::with_capacity(n);
    for (i, f) in firms.iter().enumerate() {
        alpha.push(price.iter().map(|p| f.eta * (p - f.h)).collect::<Vec<f64>>());
        alpha_int.push((0..steps).map(|k| f.eta * (i1[k] - f.h * dt)).collect::<Vec<f64>>());
        alpha_sq_int.push(
            (0..steps)
                .map(|k| f.eta * f.eta * (i2[k] - 2.0 * f.h * i1[k] + f.h * f.h * dt))
                .collect::<Vec<f64>>(),
        );
        let m = &d.m[i];
        let mut b = Vec::with_capacity(steps + 1);
        b.push(-(price[0] * (1.0 + 2.0 * lam * f.eta * big_t) / (2.0 * lam) + m[0] - f.eta * f.h * big_t));
        for k in 0..steps {
            let tau = big_t - grid.time(k + 1) + sched.w1(k);
            let db = -(1.0 / (2.0 * lam) + f.eta * tau) * (price[k + 1] - price[k]) - (m[k + 1] - m[k])
                + f.sigma * d.dw[i][k];
            b.push(b[k] + db);
        }
        trade.push(b);
    }
    let beta: Vec<Vec<f64>> = trade.iter().map(|b| select_beta(b, selection, &grid)).collect();
    let mut clearing_residual = 0.0f64;
    for k in 0..=steps {
        let s: f64 = beta.iter().map(|b| b[k]).sum();
        let scale: f64 = beta.iter().map(|b| b[k].abs()).sum::<f64>()
            + firms.iter().map(|f| f.eta * (price[k] - f.h).abs() + f.mu).sum::<f64>();
        clearing_residual = clearing_residual.max(s.abs() / scale.max(f64::MIN_POSITIVE));
    }
    let books = allocations(prep, &d, &alpha_int);
    let (bank, emissions) = banks_and_emissions(mkt, &grid, &d, &books.allocation, &alpha_int, &beta);
    Ok(EquilibriumPath {
        grid,
        price,
        price_int: i1,
        alpha,
        beta,
        bank,
        allocation: books.allocation,
        closing: d.m,
        trade_martingale: Some(trade),
        alpha_int,
        alpha_sq_int,
        emissions,
        mean_bank: books.mean_bank,
        clearing_residual,
    })
}

/// Dispatches on the market depth.
pub fn simulate_equilibrium(prep: &PreparedScheme, noise: &NoisePaths, selection: BetaSelection) -> Result<EquilibriumPath> {
    match prep.engine {
        Engine::Frictionless { .. } => equilibrium_frictionless(prep, noise, selection),
        Engine::Frictions { .. } => equilibrium_frictions(prep, noise),
    }
}

/// The frictionless price as a [`PricePath`] for firm-level checks.
pub fn price_path(prep: &PreparedScheme, path: &EquilibriumPath) -> Result<PricePath> {
    match prep.price_schedule() {
        Some(s) => PricePath::martingale_with_bridge(path.price.clone(), path.grid, s.clone()),
        None => PricePath::martingale(path.price.clone(), path.grid),
    }
}

/// Closed-loop frictionless price f(t)((T−t)H̄ − X̄_t − R̄_t) from the
/// simulated banks and allocations.
pub fn closed_loop_price(mkt: &MarketParams, path: &EquilibriumPath) -> Result<Vec<f64>> {
    let n = mkt.n() as f64;
    let h = mkt.aggregates().big_h_bar;
    (0..=path.grid.n_steps())
        .map(|k| {
            let t = path.grid.time(k);
            let xbar: f64 = path.bank.iter().map(|x| x[k]).sum::<f64>() / n;
            let rbar: f64 = path.closing.iter().zip(&path.allocation).map(|(m, a)| m[k] - a[k]).sum::<f64>() / n;
            Ok(f_coeff(mkt, t)? * ((mkt.horizon() - t) * h - xbar - rbar))
        })
        .collect()
}

/// Feedback form of the frictional efforts,
/// α̂ⁱ = −gᵢ(hᵢ/(2λ) + Xⁱ + Rⁱ + ν(T−t)(hᵢ − P̂)).
pub fn feedback_alpha_frictions(mkt: &MarketParams, path: &EquilibriumPath) -> Result<Vec<Vec<f64>>> {
    let nu = match mkt.nu() {
        MarketDepth::Finite(nu) => nu,
        MarketDepth::Infinite => return Err(Error::UnsupportedConfiguration("needs finite market depth".into())),
    };
    mkt.firms()
        .iter()
        .enumerate()
        .map(|(i, f)| {
            (0..=path.grid.n_steps())
                .map(|k| {
                    let t = path.grid.time(k);
                    let r = path.closing[i][k] - path.allocation[i][k];
                    Ok(-g_coeff(f, mkt, t)?
                        * (f.h / (2.0 * mkt.lambda()) + path.bank[i][k] + r + nu * (mkt.horizon() - t) * (f.h - path.price[k])))
                })
                .collect()
        })
        .collect()
}
