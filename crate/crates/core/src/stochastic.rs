//! Time grids, seed-deterministic Brownian increments, ensemble statistics
//! and the martingale / quadratic-variation diagnostics.
//!
//! Also hosts [`StepSchedule`]: the per-step representation of a stochastic
//! integral ∫φ(s)·dW̃ with deterministic integrand φ. Each step uses the
//! variance-matched coefficient √(mean φ²) instead of the left-point value,
//! so the grid marginals are exact however fast φ varies, and it carries the
//! Gaussian-bridge weights needed to integrate P and P² over a step given
//! its end points.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::params::FirmParams;

/// Uniform grid t_k = kT/M.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::param("n_steps", "must be >= 1"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::param("horizon", format!("must be > 0, got {horizon}")));
        }
        Ok(TimeGrid { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Knot time t_k; t_M is exactly T.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }
}

/// Increments of the N+1 independent drivers W̃⁰..W̃ᴺ on one path, plus the
/// loadings defining Wⁱ = √(1−kᵢ²)W̃ⁱ + kᵢW̃⁰.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePaths {
    seed: u64,
    stream: u64,
    grid: TimeGrid,
    k: Vec<f64>,
    idio: Vec<f64>,
    /// Step-major: `base[step * (N+1) + j]`.
    base: Vec<f64>,
}

impl NoisePaths {
    /// Wraps caller-supplied increments (length M·(N+1), step-major).
    pub fn from_increments(grid: TimeGrid, loadings: &[f64], base: Vec<f64>) -> Result<Self> {
        let dim = loadings.len() + 1;
        if base.len() != grid.n_steps() * dim {
            return Err(Error::ShapeMismatch(format!(
                "expected {} increments, got {}",
                grid.n_steps() * dim,
                base.len()
            )));
        }
        if loadings.iter().any(|k| !(k.abs() <= 1.0)) {
            return Err(Error::param("k", "loadings must satisfy |k| <= 1"));
        }
        Ok(NoisePaths {
            seed: 0,
            stream: 0,
            grid,
            k: loadings.to_vec(),
            idio: loadings.iter().map(|k| (1.0 - k * k).max(0.0).sqrt()).collect(),
            base,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn stream(&self) -> u64 {
        self.stream
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn n_firms(&self) -> usize {
        self.k.len()
    }
    /// N+1.
    pub fn dim(&self) -> usize {
        self.k.len() + 1
    }

    /// ΔW̃⁰..ΔW̃ᴺ over step `step`.
    #[inline]
    pub fn base_step(&self, step: usize) -> &[f64] {
        let d = self.dim();
        &self.base[step * d..(step + 1) * d]
    }

    /// Correlated ΔWⁱ over step `step`.
    #[inline]
    pub fn firm_increment(&self, step: usize, i: usize) -> f64 {
        let b = self.base_step(step);
        self.idio[i] * b[i + 1] + self.k[i] * b[0]
    }

    /// Wⁱ at every knot.
    pub fn firm_path(&self, i: usize) -> Vec<f64> {
        cumulate((0..self.grid.n_steps()).map(|s| self.firm_increment(s, i)))
    }

    /// Value at every knot of Σⱼ cⱼ W̃ʲ for constant loadings `c`.
    pub fn combination_path(&self, c: &[f64]) -> Vec<f64> {
        cumulate((0..self.grid.n_steps()).map(|s| dot(c, self.base_step(s))))
    }

    /// Sums blocks of `factor` increments: the same Brownian path on a
    /// grid with M/factor steps.
    pub fn coarsen(&self, factor: usize) -> Result<NoisePaths> {
        let m = self.grid.n_steps();
        if factor == 0 || m % factor != 0 {
            return Err(Error::param("factor", format!("must divide {m}")));
        }
        let d = self.dim();
        let grid = TimeGrid::new(self.grid.horizon(), m / factor)?;
        let mut base = vec![0.0; grid.n_steps() * d];
        for s in 0..m {
            let c = s / factor;
            for j in 0..d {
                base[c * d + j] += self.base[s * d + j];
            }
        }
        Ok(NoisePaths { grid, base, ..self.clone() })
    }
}

/// Draws one path from the ChaCha8 stream `stream` of `seed`.
fn draw(seed: u64, stream: u64, grid: TimeGrid, loadings: &[f64]) -> NoisePaths {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let d = loadings.len() + 1;
    let sd = grid.dt().sqrt();
    let base = (0..grid.n_steps() * d)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sd
        })
        .collect();
    NoisePaths {
        seed,
        stream,
        grid,
        k: loadings.to_vec(),
        idio: loadings.iter().map(|k| (1.0 - k * k).max(0.0).sqrt()).collect(),
        base,
    }
}

/// N+1 independent N(0, dt) increment streams for one path.
pub fn generate_noise(seed: u64, grid: TimeGrid, firms: &[FirmParams]) -> NoisePaths {
    let k: Vec<f64> = firms.iter().map(|f| f.k).collect();
    draw(seed, 0, grid, &k)
}

/// Independent paths keyed by (root seed, path index). Path `p` is the
/// ChaCha8 stream `p`, so any path can be regenerated in isolation and
/// results never depend on evaluation order.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    root_seed: u64,
    n_paths: usize,
    grid: TimeGrid,
    k: Vec<f64>,
}

impl PathEnsemble {
    pub fn new(root_seed: u64, n_paths: usize, grid: TimeGrid, firms: &[FirmParams]) -> Self {
        PathEnsemble {
            root_seed,
            n_paths,
            grid,
            k: firms.iter().map(|f| f.k).collect(),
        }
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }
    pub fn path(&self, index: usize) -> NoisePaths {
        draw(self.root_seed, index as u64, self.grid, &self.k)
    }
    pub fn iter(&self) -> impl Iterator<Item = NoisePaths> + '_ {
        (0..self.n_paths).map(move |p| self.path(p))
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cumulate(incs: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut acc = 0.0;
    for d in incs {
        acc += d;
        out.push(acc);
    }
    out
}

/// M_t = Σ_{s<t} α_s dt + (T−t)α_t for a martingale α sampled on the grid.
pub fn closing_martingale(alpha: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
    check_len(alpha, grid)?;
    let dt = grid.dt();
    let mut acc = 0.0;
    Ok(alpha
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            let m = acc + (grid.horizon() - grid.time(k)) * a;
            acc += a * dt;
            m
        })
        .collect())
}

/// Cumulative Σ(ΔX)².
pub fn realized_qv(path: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(path.len());
    let mut acc = 0.0;
    out.push(0.0);
    for w in path.windows(2) {
        let d = w[1] - w[0];
        acc += d * d;
        out.push(acc);
    }
    out
}

pub(crate) fn check_len(v: &[f64], grid: &TimeGrid) -> Result<()> {
    if v.len() != grid.n_steps() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "path has {} knots, grid has {}",
            v.len(),
            grid.n_steps() + 1
        )));
    }
    Ok(())
}

/// Welford mean/variance accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }
    /// Chan et al. pairwise combination.
    pub fn merge(&mut self, o: &RunningStats) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * self.n as f64 * o.n as f64 / n as f64;
        self.n = n;
    }
    pub fn count(&self) -> u64 {
        self.n
    }
    pub fn mean(&self) -> f64 {
        self.mean
    }
    /// Unbiased sample variance (NaN below two samples).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            f64::NAN
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
    pub fn stderr(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }
}

/// Per-knot z-scores of the mean increment X_t − X_0.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftDiagnostic {
    pub z: Vec<f64>,
    /// Knots where the ensemble had (numerically) zero spread. There z is 0
    /// when the mean increment also vanishes and ±∞ otherwise.
    pub degenerate: Vec<bool>,
    pub n_paths: u64,
}

impl DriftDiagnostic {
    pub fn max_abs_z(&self) -> f64 {
        self.z.iter().fold(0.0, |m, z| m.max(z.abs()))
    }
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_abs_z() < threshold
    }
}

/// Streaming version of [`martingale_drift_stat`] so ensembles need not be
/// held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftAccumulator {
    stats: Vec<RunningStats>,
    scale: f64,
}

impl DriftAccumulator {
    pub fn new(n_knots: usize) -> Self {
        DriftAccumulator { stats: vec![RunningStats::default(); n_knots], scale: 0.0 }
    }

    pub fn push(&mut self, path: &[f64]) -> Result<()> {
        if path.len() != self.stats.len() {
            return Err(Error::ShapeMismatch(format!(
                "path has {} knots, expected {}",
                path.len(),
                self.stats.len()
            )));
        }
        let x0 = path[0];
        for (s, &x) in self.stats.iter_mut().zip(path) {
            s.push(x - x0);
            self.scale = self.scale.max(x.abs());
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DriftAccumulator) {
        for (a, b) in self.stats.iter_mut().zip(&other.stats) {
            a.merge(b);
        }
        self.scale = self.scale.max(other.scale);
    }

    pub fn finish(&self) -> Result<DriftDiagnostic> {
        let n = self.stats.first().map_or(0, |s| s.count());
        if n < 2 {
            return Err(Error::param("ensemble", "at least two paths are required"));
        }
        // Spread below this is round-off, not randomness.
        let floor = 1e-13 * self.scale;
        let mut z = Vec::with_capacity(self.stats.len());
        let mut degenerate = Vec::with_capacity(self.stats.len());
        for s in &self.stats {
            let se = s.stderr();
            if se.is_finite() && se * (n as f64).sqrt() > floor {
                z.push(s.mean() / se);
                degenerate.push(false);
            } else {
                degenerate.push(true);
                z.push(if s.mean().abs() <= floor { 0.0 } else { s.mean().signum() * f64::INFINITY });
            }
        }
        Ok(DriftDiagnostic { z, degenerate, n_paths: n })
    }
}

/// (mean(X_t) − mean(X_0)) / stderr at every knot.
pub fn martingale_drift_stat(ensemble: &[Vec<f64>]) -> Result<DriftDiagnostic> {
    let len = ensemble.first().map_or(0, |p| p.len());
    let mut acc = DriftAccumulator::new(len);
    for p in ensemble {
        acc.push(p)?;
    }
    acc.finish()
}

// 8-point Gauss–Legendre nodes/weights on [-1, 1].
const GL_X: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_W: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];
const PANELS: usize = 4;

/// Composite Gauss–Legendre nodes and weights on [a, b].
fn gl_nodes(a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> {
    let w = (b - a) / PANELS as f64;
    (0..PANELS).flat_map(move |p| {
        let c = a + (p as f64 + 0.5) * w;
        let r = 0.5 * w;
        (0..8).map(move |q| {
            let (x, wt) = (GL_X[q / 2], GL_W[q / 2]);
            let x = if q % 2 == 0 { -x } else { x };
            (c + r * x, r * wt)
        })
    })
}

/// Single 8-point Gauss–Legendre panel on [a, b].
fn gl_panel(a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> {
    let (c, r) = (0.5 * (a + b), 0.5 * (b - a));
    (0..8).map(move |q| {
        let x = if q % 2 == 0 { -GL_X[q / 2] } else { GL_X[q / 2] };
        (c + r * x, r * GL_W[q / 2])
    })
}

/// Per-step data for ∫φ(s)·dW̃ with deterministic φ: [0,T] → ℝ^{N+1}.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    dim: usize,
    dt: f64,
    /// Signed RMS coefficients, step-major.
    coef: Vec<f64>,
    /// ∫ |φ|² over each step.
    var: Vec<f64>,
    /// Bridge weights ∫w and ∫w² with w the normalised variance clock.
    w1: Vec<f64>,
    w2: Vec<f64>,
}

impl StepSchedule {
    /// Constant loadings: exact with left-point weights.
    pub fn constant(grid: &TimeGrid, loadings: &[f64]) -> Self {
        let m = grid.n_steps();
        let dt = grid.dt();
        let v = dot(loadings, loadings) * dt;
        StepSchedule {
            dim: loadings.len(),
            dt,
            coef: loadings.iter().copied().cycle().take(m * loadings.len()).collect(),
            var: vec![v; m],
            w1: vec![dt / 2.0; m],
            w2: vec![dt / 3.0; m],
        }
    }

    /// φ(t) = a(t)·b with scalar profile `a` and fixed direction `b`.
    pub fn scaled(grid: &TimeGrid, direction: &[f64], a: impl Fn(f64) -> f64) -> Self {
        Self::build(grid, direction.len(), |t, out| {
            let x = a(t);
            out.iter_mut().zip(direction).for_each(|(o, d)| *o = x * d);
        })
    }

    /// General deterministic integrand; `phi(t, out)` writes φ(t).
    pub fn build(grid: &TimeGrid, dim: usize, phi: impl Fn(f64, &mut [f64])) -> Self {
        let m = grid.n_steps();
        let dt = grid.dt();
        let mut s = StepSchedule {
            dim,
            dt,
            coef: Vec::with_capacity(m * dim),
            var: Vec::with_capacity(m),
            w1: Vec::with_capacity(m),
            w2: Vec::with_capacity(m),
        };
        let mut buf = vec![0.0; dim];
        let mut acc = vec![0.0; dim];
        let mut outer: Vec<(f64, f64, f64)> = Vec::with_capacity(8 * PANELS);
        for k in 0..m {
            let (t0, t1) = (grid.time(k), grid.time(k + 1));
            let h = t1 - t0;
            acc.iter_mut().for_each(|a| *a = 0.0);
            outer.clear();
            let mut v = 0.0;
            for (u, w) in gl_nodes(t0, t1) {
                phi(u, &mut buf);
                for (a, b) in acc.iter_mut().zip(&buf) {
                    *a += w * b * b;
                }
                let q = dot(&buf, &buf);
                v += w * q;
                outer.push((u, w, q));
            }
            phi(0.5 * (t0 + t1), &mut buf);
            s.coef.extend(acc.iter().zip(&buf).map(|(a, b)| (a / h).sqrt() * b.signum()));
            s.var.push(v);
            if v > 0.0 {
                // ∫w = (1/V)∫q(u)(t1−u)du; ∫w² needs the running integral,
                // taken with one 8-point panel (q is smooth within a step).
                let w1 = outer.iter().map(|&(u, w, q)| w * q * (t1 - u)).sum::<f64>() / v;
                let w2 = outer
                    .iter()
                    .map(|&(u, w, _)| {
                        let inner: f64 = gl_panel(t0, u)
                            .map(|(r, wr)| {
                                phi(r, &mut buf);
                                wr * dot(&buf, &buf)
                            })
                            .sum();
                        let c = inner / v;
                        w * c * c
                    })
                    .sum::<f64>();
                s.w1.push(w1);
                s.w2.push(w2);
            } else {
                s.w1.push(h / 2.0);
                s.w2.push(h / 3.0);
            }
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn n_steps(&self) -> usize {
        self.var.len()
    }

    /// Coefficient row of step `k`.
    #[inline]
    pub fn coef(&self, k: usize) -> &[f64] {
        &self.coef[k * self.dim..(k + 1) * self.dim]
    }

    #[inline]
    pub fn increment(&self, k: usize, dw: &[f64]) -> f64 {
        dot(self.coef(k), dw)
    }

    /// Variance of the increment over step `k`.
    pub fn step_variance(&self, k: usize) -> f64 {
        self.var[k]
    }

    /// Bridge weight ∫w over step `k`; the left-point analogue is 0.
    pub fn w1(&self, k: usize) -> f64 {
        self.w1[k]
    }

    /// E[∫P ds | P_k, P_{k+1}] for P with this schedule as martingale part.
    #[inline]
    pub fn integral(&self, k: usize, p0: f64, p1: f64) -> f64 {
        p0 * self.dt + (p1 - p0) * self.w1[k]
    }

    /// E[∫P² ds | P_k, P_{k+1}].
    #[inline]
    pub fn square_integral(&self, k: usize, p0: f64, p1: f64) -> f64 {
        let d = p1 - p0;
        let (w1, w2) = (self.w1[k], self.w2[k]);
        p0 * p0 * self.dt + 2.0 * p0 * d * w1 + d * d * w2 + self.var[k] * (w1 - w2)
    }
}
