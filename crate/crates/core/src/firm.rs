//! Single-firm best response to an exogenous price and allocation: the
//! frictional solution (Euler on the α SDE, or its feedback form), the
//! frictionless solution (α = η(P−h) plus the total-trade martingale B),
//! the pathwise cost functional and first-order-condition residuals.
//!
//! The frictional SDE is stepped with g and ν(T−t) evaluated at the end of
//! each step. That is exactly the first-order condition of the discretised
//! problem (piecewise-constant controls, left-point costs), so the SDE and
//! feedback forms coincide to round-off for martingale prices.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{g_coeff, MarketDepth, MarketParams};
use crate::stochastic::{check_len, NoisePaths, StepSchedule, TimeGrid};

/// What the caller knows about E_t[∫₀ᵀ P ds].
#[derive(Debug, Clone, PartialEq)]
pub enum PriceStructure {
    /// P is a martingale, so E_t[∫₀ᵀP] = ∫₀ᵗP + (T−t)P_t.
    Martingale,
    /// Caller-supplied Q_t = E_t[∫₀ᵀ P ds] on every knot.
    ConditionalIntegral(Vec<f64>),
}

/// A price sampled on the grid plus how to integrate it over a step.
#[derive(Debug, Clone)]
pub struct PricePath {
    values: Vec<f64>,
    structure: PriceStructure,
    bridge: Option<Arc<StepSchedule>>,
    grid: TimeGrid,
}

impl PricePath {
    /// Martingale price; step integrals are left-point.
    pub fn martingale(values: Vec<f64>, grid: TimeGrid) -> Result<Self> {
        check_len(&values, &grid)?;
        Ok(PricePath { values, structure: PriceStructure::Martingale, bridge: None, grid })
    }

    /// Martingale price whose martingale part follows `schedule`; step
    /// integrals use the Gaussian-bridge conditional expectation.
    pub fn martingale_with_bridge(values: Vec<f64>, grid: TimeGrid, schedule: Arc<StepSchedule>) -> Result<Self> {
        check_len(&values, &grid)?;
        if schedule.n_steps() != grid.n_steps() {
            return Err(Error::ShapeMismatch("schedule and grid step counts differ".into()));
        }
        Ok(PricePath { values, structure: PriceStructure::Martingale, bridge: Some(schedule), grid })
    }

    /// General price with known conditional integral Q_t.
    pub fn with_conditional_integral(values: Vec<f64>, grid: TimeGrid, q: Vec<f64>) -> Result<Self> {
        check_len(&values, &grid)?;
        check_len(&q, &grid)?;
        Ok(PricePath { values, structure: PriceStructure::ConditionalIntegral(q), bridge: None, grid })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn structure(&self) -> &PriceStructure {
        &self.structure
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// ∫P over step k.
    #[inline]
    pub fn step_integral(&self, k: usize) -> f64 {
        let (p0, p1) = (self.values[k], self.values[k + 1]);
        match &self.bridge {
            Some(s) => s.integral(k, p0, p1),
            None => p0 * self.grid.dt(),
        }
    }

    /// ∫P² over step k.
    #[inline]
    pub fn step_square_integral(&self, k: usize) -> f64 {
        let (p0, p1) = (self.values[k], self.values[k + 1]);
        match &self.bridge {
            Some(s) => s.square_integral(k, p0, p1),
            None => p0 * p0 * self.grid.dt(),
        }
    }

    /// Weight w with ∫P = P_k dt + ΔP·w (0 for left-point).
    #[inline]
    fn bridge_w1(&self, k: usize) -> f64 {
        self.bridge.as_ref().map_or(0.0, |s| s.w1(k))
    }

    /// Running ∫₀ᵗP on every knot.
    pub fn running_integral(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        out.push(0.0);
        for k in 0..self.grid.n_steps() {
            acc += self.step_integral(k);
            out.push(acc);
        }
        out
    }

    /// Q_t = E_t[∫₀ᵀP].
    pub fn conditional_integral(&self) -> Vec<f64> {
        match &self.structure {
            PriceStructure::ConditionalIntegral(q) => q.clone(),
            PriceStructure::Martingale => self
                .running_integral()
                .iter()
                .enumerate()
                .map(|(k, s)| s + (self.grid.horizon() - self.grid.time(k)) * self.values[k])
                .collect(),
        }
    }

    /// E_t[∫ₜᵀP].
    pub fn future_integral(&self) -> Vec<f64> {
        let q = self.conditional_integral();
        self.running_integral().iter().zip(&q).map(|(s, q)| q - s).collect()
    }

    fn is_martingale_consistent(&self) -> bool {
        match &self.structure {
            PriceStructure::Martingale => true,
            PriceStructure::ConditionalIntegral(_) => {
                let fut = self.future_integral();
                let scale = self.values.iter().fold(0.0f64, |m, p| m.max(p.abs())) * self.grid.horizon();
                fut.iter().enumerate().all(|(k, f)| {
                    (f - (self.grid.horizon() - self.grid.time(k)) * self.values[k]).abs() <= 1e-9 * scale.max(1e-300)
                })
            }
        }
    }
}

/// Allocation seen by one firm: M_t = E_t[A_T] and the realised A_t.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationView {
    m: Vec<f64>,
    a: Vec<f64>,
}

impl AllocationView {
    /// Checks lengths and R_T = M_T − A_T = 0.
    pub fn new(m: Vec<f64>, a: Vec<f64>, grid: &TimeGrid) -> Result<Self> {
        check_len(&m, grid)?;
        check_len(&a, grid)?;
        let n = m.len() - 1;
        let scale = m.iter().chain(&a).fold(1.0f64, |s, x| s.max(x.abs()));
        if (m[n] - a[n]).abs() > 1e-9 * scale {
            return Err(Error::UnsupportedInput(format!(
                "allocation view has R_T = {:e} (must vanish)",
                m[n] - a[n]
            )));
        }
        Ok(AllocationView { m, a })
    }

    /// Allocation paid out as the martingale itself (A = M).
    pub fn martingale(m: Vec<f64>, grid: &TimeGrid) -> Result<Self> {
        Self::new(m.clone(), m, grid)
    }

    /// Fixed initial endowment, net of the emission trend: A_t = x₀ − μt.
    pub fn endowment(initial: f64, mu: f64, grid: &TimeGrid) -> Self {
        let a: Vec<f64> = grid.times().iter().map(|t| initial - mu * t).collect();
        let m = vec![initial - mu * grid.horizon(); a.len()];
        AllocationView { m, a }
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }
    pub fn a(&self) -> &[f64] {
        &self.a
    }
    /// R_t = M_t − A_t.
    pub fn r(&self) -> Vec<f64> {
        self.m.iter().zip(&self.a).map(|(m, a)| m - a).collect()
    }
}

/// Optimal (or perturbed) controls of one firm on one path.
#[derive(Debug, Clone, PartialEq)]
pub struct FirmControls {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub bank: Vec<f64>,
    /// Cumulative-trade martingale B (frictionless model only).
    pub trade_martingale: Option<Vec<f64>>,
    /// ∫α and ∫α² over each step.
    pub alpha_int: Vec<f64>,
    pub alpha_sq_int: Vec<f64>,
}

impl FirmControls {
    /// Controls (α+εu, β+εv) with u, v piecewise constant on steps; the
    /// bank is updated accordingly.
    pub fn perturbed(&self, u: &[f64], v: &[f64], eps: f64, grid: &TimeGrid) -> Result<Self> {
        let m = grid.n_steps();
        if u.len() != m || v.len() != m {
            return Err(Error::ShapeMismatch("perturbations need one value per step".into()));
        }
        let dt = grid.dt();
        let mut c = self.clone();
        let mut shift = 0.0;
        for k in 0..m {
            c.alpha[k] += eps * u[k];
            c.beta[k] += eps * v[k];
            c.alpha_sq_int[k] += 2.0 * eps * u[k] * self.alpha_int[k] + eps * eps * u[k] * u[k] * dt;
            c.alpha_int[k] += eps * u[k] * dt;
            shift += eps * (u[k] + v[k]) * dt;
            c.bank[k + 1] += shift;
        }
        c.trade_martingale = None;
        Ok(c)
    }
}

/// How a frictionless firm spreads its total trade B_T over time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BetaSelection {
    /// β ≡ B_T/T, chosen in hindsight.
    #[default]
    ConstantRate,
    /// β_k = (B_k − ∫₀^{t_k}β)/(T − t_k): adapted, but the last increment
    /// of B is never traded.
    AdaptedSpread,
}

fn firm_checks(i: usize, mkt: &MarketParams, grid: &TimeGrid, noise: &NoisePaths) -> Result<()> {
    if i >= mkt.n() {
        return Err(Error::param("firm index", format!("{i} out of range")));
    }
    if noise.n_firms() != mkt.n() || noise.grid() != grid {
        return Err(Error::ShapeMismatch("noise does not match market or grid".into()));
    }
    if (grid.horizon() - mkt.horizon()).abs() > 1e-12 * mkt.horizon() {
        return Err(Error::ShapeMismatch("grid horizon differs from market horizon".into()));
    }
    Ok(())
}

fn finite_nu(mkt: &MarketParams) -> Result<f64> {
    match mkt.nu() {
        MarketDepth::Finite(nu) => Ok(nu),
        MarketDepth::Infinite => Err(Error::UnsupportedConfiguration(
            "frictional best response needs a finite market depth".into(),
        )),
    }
}

/// Best response with trading frictions.
///
/// α₀ = −g(0)(h/(2λ) + M₀ + νhT − νQ₀), dα = −g(dM − σdW − ν dQ) with
/// Q_t = E_t[∫₀ᵀP], and β = ν(h + α/η − P).
pub fn best_response_frictions(
    i: usize,
    mkt: &MarketParams,
    price: &PricePath,
    alloc: &AllocationView,
    noise: &NoisePaths,
) -> Result<FirmControls> {
    let grid = *price.grid();
    firm_checks(i, mkt, &grid, noise)?;
    let nu = finite_nu(mkt)?;
    let f = mkt.firms()[i];
    let (lam, big_t, dt) = (mkt.lambda(), mkt.horizon(), grid.dt());
    let q = price.conditional_integral();
    let p = price.values();
    let (m, a) = (alloc.m(), alloc.a());
    let n = grid.n_steps();

    let mut alpha = Vec::with_capacity(n + 1);
    alpha.push(-g_coeff(&f, mkt, 0.0)? * (f.h / (2.0 * lam) + m[0] + nu * f.h * big_t - nu * q[0]));
    for k in 0..n {
        let dz = m[k + 1] - m[k] - f.sigma * noise.firm_increment(k, i);
        let g = g_coeff(&f, mkt, grid.time(k + 1))?;
        alpha.push(alpha[k] - g * (dz - nu * (q[k + 1] - q[k])));
    }
    let beta: Vec<f64> = alpha.iter().zip(p).map(|(al, p)| nu * (f.h + al / f.eta - p)).collect();
    let alpha_int: Vec<f64> = alpha[..n].iter().map(|x| x * dt).collect();
    let alpha_sq_int: Vec<f64> = alpha[..n].iter().map(|x| x * x * dt).collect();
    let bank = integrate_bank(a, &alpha_int, &beta, f.sigma, i, noise, dt);
    Ok(FirmControls { alpha, beta, bank, trade_martingale: None, alpha_int, alpha_sq_int })
}

fn integrate_bank(a: &[f64], alpha_int: &[f64], beta: &[f64], sigma: f64, i: usize, noise: &NoisePaths, dt: f64) -> Vec<f64> {
    let mut x = Vec::with_capacity(a.len());
    x.push(a[0]);
    for k in 0..alpha_int.len() {
        let next = x[k] + (a[k + 1] - a[k]) + alpha_int[k] + beta[k] * dt - sigma * noise.firm_increment(k, i);
        x.push(next);
    }
    x
}

/// Feedback form α_t = −g(t)(h/(2λ) + X_t + R_t + ν(h(T−t) − E_t[∫ₜᵀP])).
pub fn feedback_alpha_frictions(
    i: usize,
    mkt: &MarketParams,
    price: &PricePath,
    alloc: &AllocationView,
    controls: &FirmControls,
) -> Result<Vec<f64>> {
    let nu = finite_nu(mkt)?;
    let grid = price.grid();
    let f = mkt.firms()[i];
    let fut = price.future_integral();
    let r = alloc.r();
    (0..=grid.n_steps())
        .map(|k| {
            let t = grid.time(k);
            let g = g_coeff(&f, mkt, t)?;
            Ok(-g * (f.h / (2.0 * mkt.lambda()) + controls.bank[k] + r[k] + nu * (f.h * (mkt.horizon() - t) - fut[k])))
        })
        .collect()
}

/// Residuals of the two first-order conditions on every knot.
#[derive(Debug, Clone, PartialEq)]
pub struct FocResiduals {
    /// h + α_t/η + 2λE_t[X_T].
    pub effort: Vec<f64>,
    /// P_t + β_t/ν + 2λE_t[X_T].
    pub trade: Vec<f64>,
}

impl FocResiduals {
    pub fn max_abs(&self) -> f64 {
        self.effort.iter().chain(&self.trade).fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// FOC residuals of frictional controls, with E_t[X_T] propagated in
/// closed form through the affine dynamics: α is a martingale and
/// β = ν(h + α/η − P), so
/// E_t[X_T] = X_t + R_t + (T−t)α_t + ν((T−t)(h + α_t/η) − E_t[∫ₜᵀP]).
pub fn foc_residuals(
    i: usize,
    mkt: &MarketParams,
    price: &PricePath,
    alloc: &AllocationView,
    controls: &FirmControls,
) -> Result<FocResiduals> {
    let nu = finite_nu(mkt)?;
    let grid = price.grid();
    let f = mkt.firms()[i];
    let fut = price.future_integral();
    let r = alloc.r();
    let p = price.values();
    let two_l = 2.0 * mkt.lambda();
    let mut effort = Vec::with_capacity(p.len());
    let mut trade = Vec::with_capacity(p.len());
    for k in 0..p.len() {
        let tau = mkt.horizon() - grid.time(k);
        let al = controls.alpha[k];
        let ex = controls.bank[k] + r[k] + tau * al + nu * (tau * (f.h + al / f.eta) - fut[k]);
        effort.push(f.h + al / f.eta + two_l * ex);
        trade.push(p[k] + controls.beta[k] / nu + two_l * ex);
    }
    Ok(FocResiduals { effort, trade })
}

/// Frictionless best response: α = η(P − h) and the total-trade martingale
/// B₀ = −(P₀(1+2ληT)/(2λ) + M₀ − ηhT),
/// dB = −(1/(2λ) + η(T−t))dP − dM + σdW.
///
/// The B increment uses T − t_{k+1} plus the price's bridge weight, which
/// makes X_T = −P_T/(2λ) hold exactly on every path.
pub fn best_response_frictionless(
    i: usize,
    mkt: &MarketParams,
    price: &PricePath,
    alloc: &AllocationView,
    noise: &NoisePaths,
    selection: BetaSelection,
) -> Result<FirmControls> {
    let grid = *price.grid();
    firm_checks(i, mkt, &grid, noise)?;
    if !price.is_martingale_consistent() {
        return Err(Error::NonMartingalePrice { max_z: f64::INFINITY });
    }
    let f = mkt.firms()[i];
    let (lam, big_t, dt, n) = (mkt.lambda(), mkt.horizon(), grid.dt(), grid.n_steps());
    let p = price.values();
    let (m, a) = (alloc.m(), alloc.a());

    let alpha: Vec<f64> = p.iter().map(|p| f.eta * (p - f.h)).collect();
    let mut alpha_int = Vec::with_capacity(n);
    let mut alpha_sq_int = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n + 1);
    b.push(-(p[0] * (1.0 + 2.0 * lam * f.eta * big_t) / (2.0 * lam) + m[0] - f.eta * f.h * big_t));
    for k in 0..n {
        let i1 = price.step_integral(k);
        let i2 = price.step_square_integral(k);
        alpha_int.push(f.eta * (i1 - f.h * dt));
        alpha_sq_int.push(f.eta * f.eta * (i2 - 2.0 * f.h * i1 + f.h * f.h * dt));
        let tau = big_t - grid.time(k + 1) + price.bridge_w1(k);
        let db = -(1.0 / (2.0 * lam) + f.eta * tau) * (p[k + 1] - p[k]) - (m[k + 1] - m[k])
            + f.sigma * noise.firm_increment(k, i);
        b.push(b[k] + db);
    }
    let beta = select_beta(&b, selection, &grid);
    let bank = integrate_bank(a, &alpha_int, &beta, f.sigma, i, noise, dt);
    Ok(FirmControls { alpha, beta, bank, trade_martingale: Some(b), alpha_int, alpha_sq_int })
}

pub(crate) fn select_beta(b: &[f64], selection: BetaSelection, grid: &TimeGrid) -> Vec<f64> {
    let n = grid.n_steps();
    match selection {
        BetaSelection::ConstantRate => vec![b[n] / grid.horizon(); n + 1],
        BetaSelection::AdaptedSpread => {
            let dt = grid.dt();
            let mut beta = Vec::with_capacity(n + 1);
            let mut cum = 0.0;
            for k in 0..n {
                let rate = (b[k] - cum) / (grid.horizon() - grid.time(k));
                cum += rate * dt;
                beta.push(rate);
            }
            beta.push(beta[n - 1]);
            beta
        }
    }
}

/// Pathwise cost split into its components (euros).
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct CostBreakdown {
    /// ∫c(α).
    pub abatement: f64,
    /// ∫Pβ (a transfer between firms) plus ∫β²/(2ν).
    pub trading: f64,
    /// λX_T².
    pub penalty: f64,
    /// Emission tax paid (tax policy only).
    pub tax: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.abatement + self.trading + self.penalty + self.tax
    }
}

/// J = ∫(c(α) + Pβ + β²/(2ν))dt + λX_T² on one path; the β² term is
/// dropped in the frictionless model.
pub fn cost_functional(i: usize, mkt: &MarketParams, controls: &FirmControls, price: &PricePath) -> Result<CostBreakdown> {
    let grid = price.grid();
    let n = grid.n_steps();
    if controls.alpha_int.len() != n || controls.bank.len() != n + 1 || controls.beta.len() != n + 1 {
        return Err(Error::ShapeMismatch("controls do not match the price grid".into()));
    }
    let f = mkt.firms().get(i).ok_or_else(|| Error::param("firm index", format!("{i} out of range")))?;
    let dt = grid.dt();
    let inv_2nu = match mkt.nu() {
        MarketDepth::Finite(nu) => 0.5 / nu,
        MarketDepth::Infinite => 0.0,
    };
    let mut c = CostBreakdown::default();
    for k in 0..n {
        c.abatement += f.h * controls.alpha_int[k] + controls.alpha_sq_int[k] / (2.0 * f.eta);
        let b = controls.beta[k];
        c.trading += b * price.step_integral(k) + b * b * dt * inv_2nu;
    }
    c.penalty = mkt.lambda() * controls.bank[n].powi(2);
    Ok(c)
}
