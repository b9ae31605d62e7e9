//! Experiments shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use carbon_reg::equilibrium::{
    equilibrium_frictions, AllocationPlan, AllocationScheme, LoadingProfile, PreparedScheme, Realization,
};
use carbon_reg::firm::{best_response_frictions, cost_functional, AllocationView, PricePath};
use carbon_reg::params::{FirmParams, MarketDepth, MarketParams};
use carbon_reg::stochastic::{
    closing_martingale, generate_noise, DriftAccumulator, NoisePaths, PathEnsemble, RunningStats, TimeGrid,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Drift z-scores above this (max over knots) reject the martingale property.
pub const DRIFT_Z: f64 = 4.5;
/// A mean cost change below −CONVEXITY_Z standard errors counts as a
/// significant decrease (Bonferroni level over 400 one-sided tests).
pub const CONVEXITY_Z: f64 = 4.0;

pub fn base_firm(h: f64, sigma: f64, eta: f64) -> FirmParams {
    FirmParams::new(2e9 / 6.0, sigma, 0.92, h, eta).unwrap()
}

pub fn base_market(nu: MarketDepth) -> MarketParams {
    let f = base_firm(25.0, 0.2e9 / 6f64.sqrt(), 6e8);
    MarketParams::new(vec![f; 6], 7.5e-7, nu, 10.0, 0.8).unwrap()
}

/// Small, well-conditioned frictional market with heterogeneous firms.
pub fn random_market(rng: &mut ChaCha8Rng) -> MarketParams {
    let n = rng.random_range(1..4usize);
    let firms = (0..n)
        .map(|_| {
            FirmParams::new(
                rng.random_range(0.5..2.0),
                rng.random_range(0.2..1.0),
                rng.random_range(-0.8..0.8),
                rng.random_range(0.5..2.0),
                rng.random_range(0.5..3.0),
            )
            .unwrap()
        })
        .collect();
    let nu = rng.random_range(0.5..3.0);
    MarketParams::new(firms, rng.random_range(0.2..1.0), MarketDepth::Finite(nu), 1.0, 0.7).unwrap()
}

/// Affine, non-martingale price P = p0 + c·t + s·W̃⁰ with its exact
/// conditional integral Q_k = Σ_{j<k}P_j dt + E_{t_k}[∫_{t_k}^T P].
pub fn affine_price(noise: &NoisePaths, p0: f64, c: f64, s: f64) -> PricePath {
    let grid = *noise.grid();
    let mut dir = vec![0.0; noise.dim()];
    dir[0] = s;
    let w = noise.combination_path(&dir);
    let big_t = grid.horizon();
    let dt = grid.dt();
    let values: Vec<f64> = grid.times().iter().zip(&w).map(|(t, w)| p0 + c * t + w).collect();
    let mut run = 0.0;
    let q = grid
        .times()
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let q = run + (big_t - t) * (p0 + w[k]) + 0.5 * c * (big_t * big_t - t * t);
            run += values[k] * dt;
            q
        })
        .collect();
    PricePath::with_conditional_integral(values, grid, q).unwrap()
}

/// Conditional mean at knot `k` of the affine price inputs: the price path
/// and its Q with the Brownian motion frozen at W_k.
fn frozen_price(noise: &NoisePaths, k: usize, p0: f64, c: f64, s: f64) -> PricePath {
    let grid = *noise.grid();
    let mut dir = vec![0.0; noise.dim()];
    dir[0] = s;
    let w = noise.combination_path(&dir);
    let wk = w[k];
    let (big_t, dt) = (grid.horizon(), grid.dt());
    let times = grid.times();
    let values: Vec<f64> =
        times.iter().enumerate().map(|(j, t)| p0 + c * t + if j <= k { w[j] } else { wk }).collect();
    let mut run = 0.0;
    let q = times
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            let wj = if j <= k { w[j] } else { wk };
            let q = run + (big_t - t) * (p0 + wj) + 0.5 * c * (big_t * big_t - t * t);
            run += values[j] * dt;
            q
        })
        .collect();
    PricePath::with_conditional_integral(values, grid, q).unwrap()
}

/// Noise with every increment after knot `k` set to zero.
fn frozen_noise(noise: &NoisePaths, k: usize, loadings: &[f64]) -> NoisePaths {
    let grid = *noise.grid();
    let base: Vec<f64> = (0..grid.n_steps())
        .flat_map(|j| {
            let step = noise.base_step(j);
            step.iter().map(move |&x| if j < k { x } else { 0.0 })
        })
        .collect();
    NoisePaths::from_increments(grid, loadings, base).unwrap()
}

/// Largest first-order-condition residual of firm `i` on one path, with
/// E_k[X_T] obtained by re-running the (linear) solver on inputs replaced
/// by their time-k conditional means.
fn max_foc_residual(mkt: &MarketParams, i: usize, noise: &NoisePaths, price: (f64, f64, f64), m0: f64) -> f64 {
    let grid = *noise.grid();
    let (p0, c, s) = price;
    let p = affine_price(noise, p0, c, s);
    let alloc = AllocationView::martingale(vec![m0; grid.n_steps() + 1], &grid).unwrap();
    let ctl = best_response_frictions(i, mkt, &p, &alloc, noise).unwrap();
    let loadings: Vec<f64> = mkt.firms().iter().map(|f| f.k).collect();
    let f = mkt.firms()[i];
    let MarketDepth::Finite(nu) = mkt.nu() else { unreachable!() };
    let two_l = 2.0 * mkt.lambda();
    let mut worst = 0.0f64;
    for k in 0..=grid.n_steps() {
        let fp = frozen_price(noise, k, p0, c, s);
        let fc = best_response_frictions(i, mkt, &fp, &alloc, &frozen_noise(noise, k, &loadings)).unwrap();
        let ex = *fc.bank.last().unwrap();
        let effort = f.h + ctl.alpha[k] / f.eta + two_l * ex;
        let trade = p.values()[k] + ctl.beta[k] / nu + two_l * ex;
        worst = worst.max(effort.abs()).max(trade.abs());
    }
    worst
}

/// Mean over paths of the largest FOC residual of every firm.
fn mean_max_residual(mkt: &MarketParams, noises: &[NoisePaths], price: (f64, f64, f64), m0: f64) -> f64 {
    let mut total = 0.0;
    for noise in noises {
        for i in 0..mkt.n() {
            total += max_foc_residual(mkt, i, noise, price, m0);
        }
    }
    total / noises.len() as f64
}

#[derive(Debug, Clone)]
pub struct FocOrder {
    /// (coarse residual, fine residual, observed order) per scenario.
    pub scenarios: Vec<(f64, f64, f64)>,
}

impl FocOrder {
    pub fn min_order(&self) -> f64 {
        self.scenarios.iter().map(|s| s.2).fold(f64::INFINITY, f64::min)
    }
}

/// FOC residuals on randomized affine scenarios at M and 2M steps driven
/// by the same Brownian paths.
pub fn foc_order_experiment(n_scenarios: usize, coarse_steps: usize, n_paths: usize) -> FocOrder {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut scenarios = Vec::new();
    for s in 0..n_scenarios {
        let mkt = random_market(&mut rng);
        let price = (rng.random_range(1.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(0.1..0.6));
        let m0 = rng.random_range(-1.0..1.0);
        let fine_grid = TimeGrid::new(mkt.horizon(), 2 * coarse_steps).unwrap();
        let fine: Vec<NoisePaths> =
            (0..n_paths).map(|j| generate_noise(1000 * s as u64 + j as u64, fine_grid, mkt.firms())).collect();
        let coarse: Vec<NoisePaths> = fine.iter().map(|n| n.coarsen(2).unwrap()).collect();
        let rc = mean_max_residual(&mkt, &coarse, price, m0);
        let rf = mean_max_residual(&mkt, &fine, price, m0);
        scenarios.push((rc, rf, (rc / rf).log2()));
    }
    FocOrder { scenarios }
}

#[derive(Debug, Clone)]
pub struct Convexity {
    pub n_tests: usize,
    /// Smallest z = mean(ΔJ)/se over all perturbations and ε.
    pub min_z: f64,
    pub n_significant_decreases: usize,
}

/// J(α̂+εu, β̂+εv) − J(α̂, β̂) for 100 random bounded step perturbations and
/// ε ∈ {±1e-2, ±1e-3}, averaged over an ensemble.
pub fn convexity_experiment(n_paths: usize, n_steps: usize) -> Convexity {
    let f0 = FirmParams::new(1.0, 0.6, 0.4, 1.2, 1.5).unwrap();
    let f1 = FirmParams::new(0.8, 0.4, -0.2, 0.9, 2.0).unwrap();
    let mkt = MarketParams::new(vec![f0, f1], 0.6, MarketDepth::Finite(1.3), 1.0, 0.7).unwrap();
    let grid = TimeGrid::new(1.0, n_steps).unwrap();
    let ens = PathEnsemble::new(77, n_paths, grid, mkt.firms());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let perturbations: Vec<(Vec<f64>, Vec<f64>)> = (0..100)
        .map(|_| {
            let u = (0..n_steps).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = (0..n_steps).map(|_| rng.random_range(-1.0..1.0)).collect();
            (u, v)
        })
        .collect();
    let epsilons = [1e-2, -1e-2, 1e-3, -1e-3];
    let mut stats = vec![RunningStats::default(); perturbations.len() * epsilons.len()];
    let alloc = AllocationView::martingale(vec![0.2; n_steps + 1], &grid).unwrap();
    for noise in ens.iter() {
        let mut dir = vec![0.0; noise.dim()];
        dir[0] = 0.3;
        let w = noise.combination_path(&dir);
        let price = PricePath::martingale(w.iter().map(|x| 1.5 + x).collect(), grid).unwrap();
        for i in 0..mkt.n() {
            let c = best_response_frictions(i, &mkt, &price, &alloc, &noise).unwrap();
            let j0 = cost_functional(i, &mkt, &c, &price).unwrap().total();
            for (p, (u, v)) in perturbations.iter().enumerate() {
                for (e, &eps) in epsilons.iter().enumerate() {
                    let pc = c.perturbed(u, v, eps, &grid).unwrap();
                    let j = cost_functional(i, &mkt, &pc, &price).unwrap().total();
                    stats[p * epsilons.len() + e].push(j - j0);
                }
            }
        }
    }
    let zs: Vec<f64> = stats
        .iter()
        .map(|s| if s.stderr() > 0.0 { s.mean() / s.stderr() } else { s.mean().signum() * f64::INFINITY })
        .collect();
    Convexity {
        n_tests: zs.len(),
        min_z: zs.iter().copied().fold(f64::INFINITY, f64::min),
        n_significant_decreases: zs.iter().filter(|&&z| z < -CONVEXITY_Z).count(),
    }
}

/// Martingale allocation with nonzero loadings for frictional runs.
pub fn martingale_scheme(mkt: &MarketParams, m0: f64, scale: f64) -> AllocationScheme {
    let n = mkt.n();
    AllocationScheme {
        plans: (0..n)
            .map(|i| {
                let mut l = vec![0.0; n + 1];
                l[0] = 0.3 * scale;
                l[i + 1] = -0.2 * scale;
                AllocationPlan { expected_total: m0, loadings: l, realization: Realization::Martingale }
            })
            .collect(),
        profile: LoadingProfile::Unit,
    }
}

#[derive(Debug, Clone)]
pub struct Structural {
    pub alpha_z: f64,
    pub price_z: f64,
    pub closing_z: f64,
    pub effort_closing_z: f64,
    pub max_clearing: f64,
    /// max |ΔM − (T−t_k)Δα| / (dt·max|Δα|); the identity implies ≤ 1.
    pub closing_identity_ratio: f64,
}

/// Drift diagnostics and clearing on a frictional equilibrium ensemble.
pub fn structural_experiment(mkt: &MarketParams, n_paths: usize, n_steps: usize, m0: f64, scale: f64) -> Structural {
    let grid = TimeGrid::new(mkt.horizon(), n_steps).unwrap();
    let prep = PreparedScheme::new(mkt, &martingale_scheme(mkt, m0, scale), grid).unwrap();
    let ens = PathEnsemble::new(11, n_paths, grid, mkt.firms());
    let knots = n_steps + 1;
    let mut acc_alpha = vec![DriftAccumulator::new(knots); mkt.n()];
    let mut acc_m = vec![DriftAccumulator::new(knots); mkt.n()];
    let mut acc_mal = vec![DriftAccumulator::new(knots); mkt.n()];
    let mut acc_p = DriftAccumulator::new(knots);
    let mut max_clearing = 0.0f64;
    let mut worst_ratio = 0.0f64;
    for noise in ens.iter() {
        let path = equilibrium_frictions(&prep, &noise).unwrap();
        acc_p.push(&path.price).unwrap();
        for k in 0..knots {
            let sum: f64 = path.beta.iter().map(|b| b[k]).sum();
            let size: f64 = path.beta.iter().map(|b| b[k].abs()).sum::<f64>().max(f64::MIN_POSITIVE);
            max_clearing = max_clearing.max(sum.abs() / size);
        }
        for i in 0..mkt.n() {
            acc_alpha[i].push(&path.alpha[i]).unwrap();
            acc_m[i].push(&path.closing[i]).unwrap();
            let m = closing_martingale(&path.alpha[i], &grid).unwrap();
            acc_mal[i].push(&m).unwrap();
            let da_max = path.alpha[i].windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
            for k in 0..n_steps {
                let dm = m[k + 1] - m[k];
                let da = path.alpha[i][k + 1] - path.alpha[i][k];
                let gap = (dm - (grid.horizon() - grid.time(k)) * da).abs();
                if da_max > 0.0 {
                    worst_ratio = worst_ratio.max(gap / (grid.dt() * da_max));
                }
            }
        }
    }
    let worst = |accs: &[DriftAccumulator]| accs.iter().map(|a| a.finish().unwrap().max_abs_z()).fold(0.0, f64::max);
    Structural {
        alpha_z: worst(&acc_alpha),
        price_z: acc_p.finish().unwrap().max_abs_z(),
        closing_z: worst(&acc_m),
        effort_closing_z: worst(&acc_mal),
        max_clearing,
        closing_identity_ratio: worst_ratio,
    }
}

/// E[W_T ∫W dt] against E[∫W_t E_t[W_T] dt] = E[∫W_t² dt] on one
/// ensemble: returns (paired mean difference, its s.e., T²/2 oracle,
/// left-hand estimate).
pub fn expectation_swap_experiment(n_paths: usize, n_steps: usize) -> (f64, f64, f64, f64) {
    let f = FirmParams::new(0.0, 1.0, 1.0, 0.0, 1.0).unwrap();
    let grid = TimeGrid::new(2.0, n_steps).unwrap();
    let ens = PathEnsemble::new(3, n_paths, grid, &[f]);
    let dt = grid.dt();
    let mut diff = RunningStats::default();
    let mut lhs = RunningStats::default();
    for noise in ens.iter() {
        let w = noise.firm_path(0);
        let wt = *w.last().unwrap();
        let int_w: f64 = w[..n_steps].iter().sum::<f64>() * dt;
        let int_w2: f64 = w[..n_steps].iter().map(|x| x * x).sum::<f64>() * dt;
        diff.push(wt * int_w - int_w2);
        lhs.push(wt * int_w);
    }
    (diff.mean(), diff.stderr(), 0.5 * grid.horizon().powi(2), lhs.mean())
}
