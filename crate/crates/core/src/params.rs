//! Model parameters, derived aggregates and the deterministic coefficient
//! functions (g, π, f, F, z, ℓ) shared by every closed form.
//!
//! Units are tons, years and euros throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of grid points used when checking that a coefficient denominator
/// stays positive over `[0, T]`.
pub const DENOMINATOR_CHECK_POINTS: usize = 1000;

/// Per-firm emission and abatement-cost coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirmParams {
    /// Business-as-usual emission trend, t/yr.
    pub mu: f64,
    /// Emission volatility, t/yr^½.
    pub sigma: f64,
    /// Loading on the common shock.
    pub k: f64,
    /// Linear marginal abatement cost, €/t.
    pub h: f64,
    /// Abatement flexibility, t²/(€·yr).
    pub eta: f64,
}

impl FirmParams {
    pub fn new(mu: f64, sigma: f64, k: f64, h: f64, eta: f64) -> Result<Self> {
        let f = FirmParams { mu, sigma, k, h, eta };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        finite("mu", self.mu)?;
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::param("sigma", format!("must be >= 0, got {}", self.sigma)));
        }
        if !(self.k.abs() <= 1.0) {
            return Err(Error::param("k", format!("must satisfy |k| <= 1, got {}", self.k)));
        }
        if !(self.h >= 0.0 && self.h.is_finite()) {
            return Err(Error::param("h", format!("must be >= 0, got {}", self.h)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::param("eta", format!("must be > 0, got {}", self.eta)));
        }
        Ok(())
    }

    /// Idiosyncratic loading √(1−k²).
    pub fn idio(&self) -> f64 {
        (1.0 - self.k * self.k).max(0.0).sqrt()
    }

    /// Abatement cost rate c(α) = hα + α²/(2η).
    pub fn abatement_cost(&self, alpha: f64) -> f64 {
        self.h * alpha + alpha * alpha / (2.0 * self.eta)
    }
}

/// Market depth ν; `Infinite` selects the frictionless model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarketDepth {
    Finite(f64),
    Infinite,
}

impl MarketDepth {
    pub fn is_frictionless(&self) -> bool {
        matches!(self, MarketDepth::Infinite)
    }

    /// ν as it enters g: the frictionless model uses 0.
    fn in_g(&self) -> f64 {
        match self {
            MarketDepth::Finite(nu) => *nu,
            MarketDepth::Infinite => 0.0,
        }
    }
}

/// Averages and correlation structure derived from the firm list.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregates {
    pub h_bar: f64,
    pub eta_bar: f64,
    /// Mean of ηᵢhᵢ.
    pub big_h_bar: f64,
    pub mu_bar: f64,
    /// Row-major N×N matrix ρᵢⱼ = kᵢkⱼ.
    pub rho_ij: Vec<f64>,
    /// Variance rate of W̄ = (1/N)Σσᵢ Wⁱ.
    pub sigma_sq: f64,
}

impl Aggregates {
    pub fn from_firms(firms: &[FirmParams]) -> Self {
        let n = firms.len();
        let nf = n as f64;
        let mean = |f: &dyn Fn(&FirmParams) -> f64| firms.iter().map(f).sum::<f64>() / nf;
        let mut rho_ij = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                rho_ij[i * n + j] = firms[i].k * firms[j].k;
            }
        }
        let mut total = firms.iter().map(|f| f.sigma * f.sigma).sum::<f64>();
        for i in 0..n {
            for j in (i + 1)..n {
                total += 2.0 * rho_ij[i * n + j] * firms[i].sigma * firms[j].sigma;
            }
        }
        Aggregates {
            h_bar: mean(&|f| f.h),
            eta_bar: mean(&|f| f.eta),
            big_h_bar: mean(&|f| f.eta * f.h),
            mu_bar: mean(&|f| f.mu),
            rho_ij,
            sigma_sq: total / (nf * nf),
        }
    }
}

/// System-level parameters plus the firm list. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams {
    firms: Vec<FirmParams>,
    lambda: f64,
    nu: MarketDepth,
    horizon: f64,
    rho: f64,
    agg: Aggregates,
}

impl MarketParams {
    /// Validates every parameter and, with frictions, the π denominator on
    /// a fine grid.
    pub fn new(
        firms: Vec<FirmParams>,
        lambda: f64,
        nu: MarketDepth,
        horizon: f64,
        rho: f64,
    ) -> Result<Self> {
        if firms.is_empty() {
            return Err(Error::param("firms", "at least one firm is required"));
        }
        for (i, f) in firms.iter().enumerate() {
            f.validate().map_err(|e| match e {
                Error::InvalidParameter { name, reason } => Error::InvalidParameter {
                    name: format!("firms[{i}].{name}"),
                    reason,
                },
                other => other,
            })?;
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::param("lambda", format!("must be > 0, got {lambda}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::param("horizon", format!("must be > 0, got {horizon}")));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::param("rho", format!("must lie in (0, 1], got {rho}")));
        }
        if let MarketDepth::Finite(v) = nu {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param("nu", format!("must be > 0 or infinite, got {v}")));
            }
        }
        let agg = Aggregates::from_firms(&firms);
        let mkt = MarketParams { firms, lambda, nu, horizon, rho, agg };
        if !nu.is_frictionless() {
            for p in 0..=DENOMINATOR_CHECK_POINTS {
                let t = horizon * p as f64 / DENOMINATOR_CHECK_POINTS as f64;
                mkt.pi_denominator(t)?;
            }
        }
        Ok(mkt)
    }

    pub fn firms(&self) -> &[FirmParams] {
        &self.firms
    }
    pub fn n(&self) -> usize {
        self.firms.len()
    }
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn nu(&self) -> MarketDepth {
        self.nu
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn rho(&self) -> f64 {
        self.rho
    }
    pub fn aggregates(&self) -> &Aggregates {
        &self.agg
    }

    pub fn with_firms(&self, firms: Vec<FirmParams>) -> Result<Self> {
        Self::new(firms, self.lambda, self.nu, self.horizon, self.rho)
    }
    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(self.firms.clone(), lambda, self.nu, self.horizon, self.rho)
    }
    pub fn with_nu(&self, nu: MarketDepth) -> Result<Self> {
        Self::new(self.firms.clone(), self.lambda, nu, self.horizon, self.rho)
    }
    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        Self::new(self.firms.clone(), self.lambda, self.nu, self.horizon, rho)
    }
    /// Same market with every firm's η replaced.
    pub fn with_eta(&self, eta: f64) -> Result<Self> {
        self.with_firms(self.firms.iter().map(|f| FirmParams { eta, ..*f }).collect())
    }

    /// Common flexibility if all firms share one η.
    pub fn homogeneous_eta(&self) -> Option<f64> {
        let e = self.firms[0].eta;
        self.firms.iter().all(|f| f.eta == e).then_some(e)
    }

    pub(crate) fn require_homogeneous_eta(&self, what: &str) -> Result<f64> {
        self.homogeneous_eta().ok_or_else(|| {
            Error::UnsupportedConfiguration(format!("{what} requires a common eta across firms"))
        })
    }

    /// Loadings of W̄ = (1/N)ΣσᵢWⁱ on the independent drivers W̃⁰..W̃ᴺ.
    pub fn wbar_loadings(&self) -> Vec<f64> {
        let nf = self.n() as f64;
        let mut w = Vec::with_capacity(self.n() + 1);
        w.push(self.firms.iter().map(|f| f.sigma * f.k).sum::<f64>() / nf);
        w.extend(self.firms.iter().map(|f| f.sigma * f.idio() / nf));
        w
    }

    /// Total expected emissions under the reduction target, ρTNμ̄.
    pub fn emission_target(&self) -> f64 {
        self.rho * self.horizon * self.n() as f64 * self.agg.mu_bar
    }

    pub(crate) fn check_time(&self, t: f64) -> Result<f64> {
        let tol = 1e-12 * self.horizon;
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::Domain { t, horizon: self.horizon });
        }
        Ok(t.clamp(0.0, self.horizon))
    }

    fn pi_denominator(&self, t: f64) -> Result<f64> {
        let nu = self.nu.in_g();
        let tau = self.horizon - t;
        let s: f64 = self
            .firms
            .iter()
            .map(|f| g_raw(self.lambda, f.eta, nu, tau) / f.eta)
            .sum();
        let d = 1.0 - nu * tau / self.n() as f64 * s;
        if d > 0.0 {
            Ok(d)
        } else {
            Err(Error::Singularity { what: "pi", t, denominator: d })
        }
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::param(name, format!("must be finite, got {v}")))
    }
}

#[inline]
fn g_raw(lambda: f64, eta: f64, nu: f64, tau: f64) -> f64 {
    2.0 * lambda * eta / (1.0 + 2.0 * lambda * (eta + nu) * tau)
}

/// gᵢ(t) = 2ληᵢ / (1 + 2λ(ηᵢ+ν)(T−t)); ν = 0 in the frictionless model.
pub fn g_coeff(firm: &FirmParams, mkt: &MarketParams, t: f64) -> Result<f64> {
    let t = mkt.check_time(t)?;
    Ok(g_raw(mkt.lambda, firm.eta, mkt.nu.in_g(), mkt.horizon - t))
}

/// πᵢ(t) = (gᵢ/ηᵢ) / (1 − (ν(T−t)/N) Σₖ gₖ/ηₖ).
pub fn pi_coeff(mkt: &MarketParams, i: usize, t: f64) -> Result<f64> {
    let t = mkt.check_time(t)?;
    let firm = mkt
        .firms
        .get(i)
        .ok_or_else(|| Error::param("firm index", format!("{i} out of range")))?;
    let d = mkt.pi_denominator(t)?;
    Ok(g_raw(mkt.lambda, firm.eta, mkt.nu.in_g(), mkt.horizon - t) / firm.eta / d)
}

/// f(t) = 2λ / (1 + 2λη̄(T−t)).
pub fn f_coeff(mkt: &MarketParams, t: f64) -> Result<f64> {
    let t = mkt.check_time(t)?;
    Ok(f_raw(mkt.lambda, mkt.agg.eta_bar, mkt.horizon - t))
}

#[inline]
pub(crate) fn f_raw(lambda: f64, eta_bar: f64, tau: f64) -> f64 {
    2.0 * lambda / (1.0 + 2.0 * lambda * eta_bar * tau)
}

/// ℓ(ρ) = −(1/(2λη̄))[H̄ + (1+2λη̄T)(1−ρ)μ̄], the per-firm expected net
/// allocation meeting the reduction target.
pub fn ell(mkt: &MarketParams) -> f64 {
    let a = &mkt.agg;
    let two_le = 2.0 * mkt.lambda * a.eta_bar;
    -(a.big_h_bar + (1.0 + two_le * mkt.horizon) * (1.0 - mkt.rho) * a.mu_bar) / two_le
}

/// z(t) = (1 − e^{−δ(T−t)})/δ.
pub fn msr_z(delta: f64, t: f64, horizon: f64) -> Result<f64> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::param("delta", format!("must be > 0, got {delta}")));
    }
    let tol = 1e-12 * horizon;
    if !(t >= -tol && t <= horizon + tol) {
        return Err(Error::Domain { t, horizon });
    }
    let tau = (horizon - t).max(0.0);
    Ok(-(-delta * tau).exp_m1() / delta)
}

/// F(t) = f(t) / (1 − η f(t)(T − t − z(t))).
pub fn msr_f(mkt: &MarketParams, delta: f64, t: f64) -> Result<f64> {
    let z = msr_z(delta, t, mkt.horizon)?;
    let t = mkt.check_time(t)?;
    let f = f_raw(mkt.lambda, mkt.agg.eta_bar, mkt.horizon - t);
    let d = 1.0 - mkt.agg.eta_bar * f * (mkt.horizon - t - z);
    if d > 0.0 {
        Ok(f / d)
    } else {
        Err(Error::Singularity { what: "F", t, denominator: d })
    }
}

/// Rejects δ for which the F denominator vanishes somewhere on `[0, T]`.
pub fn validate_msr_denominator(mkt: &MarketParams, delta: f64) -> Result<()> {
    for p in 0..=DENOMINATOR_CHECK_POINTS {
        let t = mkt.horizon * p as f64 / DENOMINATOR_CHECK_POINTS as f64;
        msr_f(mkt, delta, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn base(nu: MarketDepth) -> MarketParams {
        let f = FirmParams::new(2e9 / 6.0, 0.2e9 / 6f64.sqrt(), 0.92, 25.0, 6e8).unwrap();
        MarketParams::new(vec![f; 6], 7.5e-7, nu, 10.0, 0.8).unwrap()
    }

    #[test]
    fn g_endpoints() {
        let m = base(MarketDepth::Infinite);
        let f = &m.firms()[0];
        assert_relative_eq!(g_coeff(f, &m, 10.0).unwrap(), 900.0, max_relative = 1e-14);
        assert_relative_eq!(g_coeff(f, &m, 0.0).unwrap(), 900.0 / 9001.0, max_relative = 1e-14);
        assert!(g_coeff(f, &m, 10.5).is_err());
        assert!(g_coeff(f, &m, -0.1).is_err());
    }

    #[test]
    fn pi_and_f_at_zero() {
        let m = base(MarketDepth::Infinite);
        let expect = 900.0 / 9001.0 / 6e8;
        assert_relative_eq!(pi_coeff(&m, 0, 0.0).unwrap(), expect, max_relative = 1e-14);
        assert_relative_eq!(f_coeff(&m, 0.0).unwrap(), 1.5e-6 / 9001.0, max_relative = 1e-14);
        assert_relative_eq!(f_coeff(&m, 10.0).unwrap(), 1.5e-6, max_relative = 1e-15);
        assert!(pi_coeff(&m, 6, 0.0).is_err());
    }

    #[test]
    fn pi_homogeneous_symmetry_with_friction() {
        let m = base(MarketDepth::Finite(1e6));
        for t in [0.0, 3.3, 9.99] {
            let p0 = pi_coeff(&m, 0, t).unwrap();
            for i in 1..6 {
                assert_eq!(pi_coeff(&m, i, t).unwrap(), p0);
            }
            assert!(p0 > g_coeff(&m.firms()[0], &m, t).unwrap() / 6e8);
        }
    }

    #[test]
    fn ell_base_and_limits() {
        let m = base(MarketDepth::Infinite);
        // Independent evaluation: (1/(2λη))[ηh + 9001·0.2·μ̄].
        let mu = 2e9 / 6.0;
        let oracle = -(6e8 * 25.0 + 9001.0 * 0.2 * mu) / 900.0;
        assert_relative_eq!(ell(&m), oracle, max_relative = 1e-13);
        assert!((ell(&m) + 6.834e8).abs() < 1e6);
        assert_relative_eq!(ell(&m.with_rho(1.0).unwrap()), -25.0 / 1.5e-6, max_relative = 1e-13);
        let big = m.with_lambda(1e6).unwrap();
        assert_relative_eq!(ell(&big), -10.0 * 0.2 * mu, max_relative = 1e-6);
    }

    #[test]
    fn z_values() {
        assert_eq!(msr_z(0.1, 10.0, 10.0).unwrap(), 0.0);
        assert_relative_eq!(msr_z(0.1, 0.0, 10.0).unwrap(), (1.0 - (-1f64).exp()) / 0.1, max_relative = 1e-14);
        assert_relative_eq!(msr_z(1e-9, 0.0, 10.0).unwrap(), 10.0, max_relative = 1e-7);
        assert!(msr_z(0.0, 0.0, 10.0).is_err());
    }

    #[test]
    fn msr_f_values() {
        let m = base(MarketDepth::Infinite);
        assert_relative_eq!(msr_f(&m, 0.1, 10.0).unwrap(), 1.5e-6, max_relative = 1e-15);
        let f0 = msr_f(&m, 0.1, 0.0).unwrap();
        let f = 1.5e-6 / 9001.0;
        let z = (1.0 - (-1f64).exp()) / 0.1;
        assert_relative_eq!(f0, f / (1.0 - 6e8 * f * (10.0 - z)), max_relative = 1e-13);
        validate_msr_denominator(&m, 0.1).unwrap();
        // δ → ∞ removes z (and then F collapses to 2λ).
        let fl = msr_f(&m, 1e12, 2.0).unwrap();
        let ff = f_coeff(&m, 2.0).unwrap();
        assert_relative_eq!(fl, ff / (1.0 - 6e8 * ff * 8.0), max_relative = 1e-6);
        assert_relative_eq!(fl, 1.5e-6, max_relative = 1e-6);
    }

    #[test]
    fn aggregates_base() {
        let m = base(MarketDepth::Infinite);
        let a = m.aggregates();
        let s1 = 0.2e9 / 6f64.sqrt();
        let oracle = (6.0 * s1 * s1 + 30.0 * 0.92 * 0.92 * s1 * s1) / 36.0;
        assert_relative_eq!(a.sigma_sq, oracle, max_relative = 1e-13);
        assert!((a.sigma_sq - 5.813e15).abs() < 1e12);
        assert_relative_eq!(a.big_h_bar, a.eta_bar * a.h_bar, max_relative = 1e-15);
        // W̄ loadings reproduce σ².
        let w = m.wbar_loadings();
        let v: f64 = w.iter().map(|x| x * x).sum();
        assert_relative_eq!(v, a.sigma_sq, max_relative = 1e-12);
    }

    #[test]
    fn validation_rejects_bad_inputs() {
        assert!(FirmParams::new(1.0, 1.0, 1.5, 1.0, 1.0).is_err());
        assert!(FirmParams::new(1.0, 1.0, 0.5, 1.0, 0.0).is_err());
        let f = FirmParams::new(1.0, 1.0, 0.5, 1.0, 1.0).unwrap();
        assert!(MarketParams::new(vec![], 1.0, MarketDepth::Infinite, 1.0, 0.5).is_err());
        assert!(MarketParams::new(vec![f], 0.0, MarketDepth::Infinite, 1.0, 0.5).is_err());
        assert!(MarketParams::new(vec![f], 1.0, MarketDepth::Finite(-1.0), 1.0, 0.5).is_err());
        assert!(MarketParams::new(vec![f], 1.0, MarketDepth::Infinite, 1.0, 0.0).is_err());
        let e = MarketParams::new(
            vec![f, FirmParams { eta: -1.0, ..f }],
            1.0,
            MarketDepth::Infinite,
            1.0,
            0.5,
        )
        .unwrap_err();
        assert!(e.to_string().contains("firms[1].eta"));
    }

    fn arb_market() -> impl Strategy<Value = MarketParams> {
        (
            prop::collection::vec((0.1f64..10.0, 0.0f64..3.0, -1.0f64..1.0, 0.0f64..50.0, 0.01f64..100.0), 1..5),
            1e-3f64..1.0,
            prop::option::of(1e-3f64..100.0),
            0.5f64..20.0,
            0.05f64..0.99,
        )
            .prop_map(|(fs, lambda, nu, t, rho)| {
                let firms = fs.into_iter().map(|(mu, s, k, h, e)| FirmParams::new(mu, s, k, h, e).unwrap()).collect();
                let nu = nu.map_or(MarketDepth::Infinite, MarketDepth::Finite);
                MarketParams::new(firms, lambda, nu, t, rho).unwrap()
            })
    }

    proptest! {
        #[test]
        fn g_identity_and_monotonicity(m in arb_market(), u in 0.0f64..1.0, v in 0.0f64..1.0) {
            let nu = match m.nu() { MarketDepth::Finite(x) => x, MarketDepth::Infinite => 0.0 };
            let (t1, t2) = (u.min(v) * m.horizon(), u.max(v) * m.horizon());
            for f in m.firms() {
                let g = g_coeff(f, &m, t1).unwrap();
                let lhs = 1.0 - g / f.eta * (1.0 / (2.0 * m.lambda()) + nu * (m.horizon() - t1));
                let rhs = g * (m.horizon() - t1);
                prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1e-300) + 1e-15);
                prop_assert!(g > 0.0);
                if t1 < t2 { prop_assert!(g <= g_coeff(f, &m, t2).unwrap()); }
            }
            let f1 = f_coeff(&m, t1).unwrap();
            prop_assert!(f1 > 0.0 && f1 <= f_coeff(&m, t2).unwrap());
            for i in 0..m.n() { prop_assert!(pi_coeff(&m, i, t1).unwrap() > 0.0); }
        }

        #[test]
        fn ell_negative_and_decreasing(m in arb_market()) {
            let l = ell(&m);
            prop_assert!(l < 0.0 || m.aggregates().big_h_bar == 0.0 && m.rho() == 1.0);
            let lower = m.with_rho(m.rho() * 0.5).unwrap();
            prop_assert!(ell(&lower) < l);
        }

        #[test]
        fn sigma_sq_independent_case(m in arb_market()) {
            let firms: Vec<_> = m.firms().iter().map(|f| FirmParams { k: 0.0, ..*f }).collect();
            let m0 = m.with_firms(firms.clone()).unwrap();
            let n = firms.len() as f64;
            let oracle: f64 = firms.iter().map(|f| f.sigma * f.sigma).sum::<f64>() / (n * n);
            prop_assert!((m0.aggregates().sigma_sq - oracle).abs() <= 1e-12 * oracle.max(1e-300));
        }
    }
}
