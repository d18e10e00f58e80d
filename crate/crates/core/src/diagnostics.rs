//! Statistics comparing finite-width samples with the Gaussian limit.

use serde::{Deserialize, Serialize};

use crate::error::{NngpError, Result};
use crate::exec::Exec;
use crate::kernel::CovMatrix;
use crate::netsim::{CrossUnitCorr, SampleBatch};
use crate::rng::{Purpose, StreamRoot};

/// Default number of characteristic-function evaluation points.
pub const DEFAULT_TGRID_POINTS: usize = 200;
/// Smallest sample size for which KS p-values are reported.
pub const KS_MIN_SAMPLES: usize = 1000;
pub const BOOTSTRAP_RESAMPLES: usize = 200;
/// Monte Carlo slack, in standard errors, granted to bound checks.
pub const SLACK_SE: f64 = 4.0;

/// `Φ(x)` for the standard normal.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Evaluation points `t ∈ R^k` for characteristic functions. The first
/// point is always `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TGrid {
    points: Vec<Vec<f64>>,
    radius: f64,
}

impl TGrid {
    /// `count` Halton points in the ball of radius `3 / sqrt(max diag Σ)`.
    pub fn for_cov(cov: &CovMatrix, count: usize) -> Result<Self> {
        let scale = cov.max_diagonal();
        if !(scale > 0.0) {
            return Err(NngpError::domain("covariance has no positive diagonal entry"));
        }
        Self::in_ball(cov.k(), 3.0 / scale.sqrt(), count)
    }

    /// `t = 0` followed by `count - 1` quasi-random points in the ball of
    /// the given radius: the direction comes from `k` Halton coordinates
    /// mapped to the cube `[-1, 1]^k`, the radius from one more coordinate
    /// as `R u^{1/k}`.
    pub fn in_ball(k: usize, radius: f64, count: usize) -> Result<Self> {
        if k == 0 || count == 0 {
            return Err(NngpError::domain("t-grid needs k >= 1 and at least one point"));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(NngpError::domain(format!("t-grid radius must be > 0, got {radius}")));
        }
        let primes = first_primes(k + 1);
        let mut points = vec![vec![0.0; k]];
        let mut index = 1u64;
        while points.len() < count {
            let dir: Vec<f64> = primes[1..].iter().map(|&p| 2.0 * radical_inverse(index, p) - 1.0).collect();
            index += 1;
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let r = radius * radical_inverse(index - 1, primes[0]).powf(1.0 / k as f64);
            points.push(dir.iter().map(|v| r * v / norm).collect());
        }
        Ok(TGrid { points, radius })
    }

    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        let k = points.first().map(Vec::len).ok_or_else(|| NngpError::domain("t-grid is empty"))?;
        if points.iter().any(|p| p.len() != k) {
            return Err(NngpError::domain("t-grid points differ in dimension"));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(NngpError::domain("t-grid points must be finite"));
        }
        let radius = points
            .iter()
            .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        Ok(TGrid { points, radius })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }
}

fn first_primes(count: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(count);
    let mut c = 2u64;
    while primes.len() < count {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| !c.is_multiple_of(p)) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcfDistance {
    pub distance: f64,
    pub worst_unit: usize,
    /// Index into the t-grid.
    pub worst_point: usize,
}

/// `max_unit sup_t |S⁻¹ Σ_s exp(i tᵀ f_s) - exp(-tᵀ Σ t / 2)|`.
pub fn ecf_distance(batch: &SampleBatch, cov: &CovMatrix, grid: &TGrid, exec: Exec) -> Result<EcfDistance> {
    if batch.layer() != cov.layer() {
        return Err(NngpError::domain(format!(
            "batch is layer {} but the covariance is layer {}",
            batch.layer(),
            cov.layer()
        )));
    }
    let k = batch.k();
    if cov.k() != k || grid.points().iter().any(|t| t.len() != k) {
        return Err(NngpError::domain("batch, covariance and t-grid disagree on k"));
    }
    let sigma = cov.entries();
    let s_count = batch.samples() as f64;
    let per_point = exec.map_range(grid.points().len(), |g| {
        let t = &grid.points()[g];
        let mut quad = 0.0;
        for r in 0..k {
            for c in 0..k {
                quad += t[r] * sigma[(r, c)] * t[c];
            }
        }
        let target = (-0.5 * quad).exp();
        (0..batch.units())
            .map(|u| {
                let (mut re, mut im) = (0.0, 0.0);
                for s in 0..batch.samples() {
                    let phase: f64 = batch.point(s, u).iter().zip(t).map(|(f, ti)| f * ti).sum();
                    re += phase.cos();
                    im += phase.sin();
                }
                ((re / s_count - target).powi(2) + (im / s_count).powi(2)).sqrt()
            })
            .collect::<Vec<f64>>()
    });
    let mut best = EcfDistance {
        distance: 0.0,
        worst_unit: 0,
        worst_point: 0,
    };
    for (g, row) in per_point.iter().enumerate() {
        for (u, &d) in row.iter().enumerate() {
            if d > best.distance {
                best = EcfDistance {
                    distance: d,
                    worst_unit: u,
                    worst_point: g,
                };
            }
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub d: f64,
    /// Asymptotic p-value; absent below [`KS_MIN_SAMPLES`] samples.
    pub p: Option<f64>,
}

/// One-sample Kolmogorov–Smirnov distance to `N(0, variance)`.
pub fn ks_distance(samples: &[f64], variance: f64) -> Result<KsResult> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(NngpError::domain(format!("KS variance must be > 0, got {variance}")));
    }
    if samples.is_empty() {
        return Err(NngpError::domain("KS needs at least one sample"));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(NngpError::domain("KS samples must be finite"));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let sd = variance.sqrt();
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = normal_cdf(x / sd);
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    let p = (sorted.len() >= KS_MIN_SAMPLES).then(|| kolmogorov_sf(n.sqrt() * d));
    Ok(KsResult { d, p })
}

/// `P(K > x)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.18 {
        // P(K ≤ x) = sqrt(2π)/x Σ_{j≥1} exp(-(2j-1)² π² / (8x²))
        let c = -std::f64::consts::PI.powi(2) / (8.0 * x * x);
        let s: f64 = (1..=8).map(|j| ((2 * j - 1) as f64).powi(2) * c).map(f64::exp).sum();
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / x * s).clamp(0.0, 1.0)
    } else {
        // P(K > x) = 2 Σ_{j≥1} (-1)^{j-1} exp(-2 j² x²)
        let s: f64 = (1..=8)
            .map(|j| {
                let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (j * j) as f64 * x * x).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// `‖empirical - target‖_F / ‖target‖_F`.
pub fn cov_frobenius_error(empirical: &CovMatrix, target: &CovMatrix) -> Result<f64> {
    if empirical.k() != target.k() {
        return Err(NngpError::domain(format!(
            "shape mismatch: {}x{} vs {}x{}",
            empirical.k(),
            empirical.k(),
            target.k(),
            target.k()
        )));
    }
    let norm = target.entries().norm();
    if norm == 0.0 {
        return Err(NngpError::domain("target covariance has zero norm"));
    }
    Ok((empirical.entries() - target.entries()).norm() / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (`n - 2` degrees of freedom; 0 for `n = 2`).
    pub se: f64,
}

/// Ordinary least squares `y = a + b x`.
pub fn least_squares(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return Err(NngpError::domain(format!("regression needs >= 2 paired points, got {n}")));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(NngpError::domain("regression abscissae are all equal"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let se = if n > 2 {
        let rss: f64 = xs.iter().zip(ys).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
        (rss / (nf - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(LineFit { slope, intercept, se })
}

/// Slope of `log error` against `log n`.
pub fn rate_fit(errors: &[(usize, f64)]) -> Result<LineFit> {
    if errors.len() < 3 {
        return Err(NngpError::domain(format!("rate fit needs >= 3 widths, got {}", errors.len())));
    }
    if let Some(&(n, e)) = errors.iter().find(|(n, e)| !(*e > 0.0 && e.is_finite()) || *n == 0) {
        return Err(NngpError::domain(format!("rate fit needs n >= 1 and error > 0 (n={n}, error={e})")));
    }
    let xs: Vec<f64> = errors.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|(_, e)| e.ln()).collect();
    least_squares(&xs, &ys)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentMargin {
    pub theta: u32,
    /// `S⁻¹ Σ_s |f_s(y) - f_s(x)|^{2θ}`.
    pub moment: f64,
    /// Bootstrap standard error of `moment`.
    pub se: f64,
    /// `H · dist^{2θ}`.
    pub bound: f64,
    /// `bound - moment`.
    pub margin: f64,
    /// `moment ≤ bound + SLACK_SE · se`.
    pub pass: bool,
}

/// Check `E|f(y) - f(x)|^{2θ} ≤ H ‖y - x‖^{2θ}` from paired draws that
/// share their weights.
pub fn moment_bound_check(
    fx: &[f64],
    fy: &[f64],
    theta: u32,
    h_bound: f64,
    dist: f64,
    seed: u64,
) -> Result<MomentMargin> {
    if !(1..=4).contains(&theta) {
        return Err(NngpError::Unsupported(format!("moment checks support θ in 1..=4, got {theta}")));
    }
    if fx.len() != fy.len() || fx.is_empty() {
        return Err(NngpError::domain("moment check needs equally many paired draws (at least one)"));
    }
    if !(h_bound >= 0.0 && dist >= 0.0) {
        return Err(NngpError::domain("bound constant and distance must be >= 0"));
    }
    let p = 2 * theta as i32;
    let powers: Vec<f64> = fx.iter().zip(fy).map(|(a, b)| (b - a).abs().powi(p)).collect();
    let n = powers.len();
    let moment = powers.iter().sum::<f64>() / n as f64;
    let se = bootstrap_se(&powers, seed);
    let bound = h_bound * dist.powi(p);
    Ok(MomentMargin {
        theta,
        moment,
        se,
        bound,
        margin: bound - moment,
        pass: moment <= bound + SLACK_SE * se,
    })
}

/// Bootstrap standard error of the mean of `values`.
pub fn bootstrap_se(values: &[f64], seed: u64) -> f64 {
    use rand::Rng;
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let root = StreamRoot::new(seed);
    let means: Vec<f64> = (0..BOOTSTRAP_RESAMPLES)
        .map(|b| {
            let mut rng = root.unit_rng(Purpose::Bootstrap, b as u64, 0, 0);
            (0..n).map(|_| values[rng.gen_range(0..n)]).sum::<f64>() / n as f64
        })
        .collect();
    let m = means.iter().sum::<f64>() / means.len() as f64;
    (means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (means.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RinfDistance {
    /// `Σ_{i≤len} ξ(|a_i - b_i|) / 2^i` with `ξ(t) = t / (1 + t)`.
    pub value: f64,
    /// Upper bound `2^{-len}` on the contribution of the unseen tail.
    pub tail_bound: f64,
}

/// Product-topology distance between two sequence prefixes.
pub fn rinf_distance(a: &[f64], b: &[f64]) -> Result<RinfDistance> {
    if a.len() != b.len() {
        return Err(NngpError::domain(format!("prefix lengths differ: {} vs {}", a.len(), b.len())));
    }
    let mut value = 0.0;
    let mut w = 1.0;
    for (x, y) in a.iter().zip(b) {
        w *= 0.5;
        let t = (x - y).abs();
        value += w * if t.is_infinite() { 1.0 } else { t / (1.0 + t) };
    }
    Ok(RinfDistance {
        value,
        tail_bound: w,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalKs {
    pub unit: usize,
    pub input: usize,
    pub d: f64,
    pub p: Option<f64>,
}

/// KS of every unit and input of `batch` against `N(0, Σ_rr)`.
pub fn marginal_ks(batch: &SampleBatch, cov: &CovMatrix) -> Result<Vec<MarginalKs>> {
    let mut out = Vec::with_capacity(batch.units() * batch.k());
    for u in 0..batch.units() {
        for r in 0..batch.k() {
            let ks = ks_distance(&batch.marginal(u, r), cov.get(r, r))?;
            out.push(MarginalKs {
                unit: u,
                input: r,
                d: ks.d,
                p: ks.p,
            });
        }
    }
    Ok(out)
}

/// Every test passes at per-test level `family_level / m`. Requires
/// p-values, so `S ≥ KS_MIN_SAMPLES`.
pub fn bonferroni_pass(tests: &[MarginalKs], family_level: f64) -> Result<bool> {
    let m = tests.len().max(1) as f64;
    let mut ok = true;
    for t in tests {
        let p = t.p.ok_or_else(|| {
            NngpError::domain(format!("KS p-values need at least {KS_MIN_SAMPLES} samples"))
        })?;
        ok &= p > family_level / m;
    }
    Ok(ok)
}

/// Statistics at one width of the ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthRecord {
    pub n: usize,
    pub cov_frobenius_error: f64,
    pub cov_frobenius_error_centered: f64,
    pub ks_per_marginal: Vec<MarginalKs>,
    pub ks_bonferroni_pass: Option<bool>,
    pub ecf_distance: f64,
    pub moment_margins: Vec<MomentMargin>,
    pub cross_unit_corr: Option<CrossUnitCorr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub seed: u64,
    pub records: Vec<WidthRecord>,
    /// Fit of `log cov_frobenius_error` on `log n` (at least 3 widths).
    pub rate: Option<LineFit>,
}

impl ConvergenceReport {
    pub fn new(seed: u64, records: Vec<WidthRecord>) -> Result<Self> {
        if records.windows(2).any(|w| w[1].n <= w[0].n) {
            return Err(NngpError::domain("widths must be strictly increasing"));
        }
        for r in &records {
            let scalars = [r.cov_frobenius_error, r.cov_frobenius_error_centered, r.ecf_distance];
            let moments = r.moment_margins.iter().flat_map(|m| [m.moment, m.se, m.bound]);
            let ks = r.ks_per_marginal.iter().map(|k| k.d);
            if !scalars.into_iter().chain(moments).chain(ks).all(f64::is_finite) {
                return Err(NngpError::Numeric(format!("non-finite statistic at width {}", r.n)));
            }
        }
        let rate = if records.len() >= 3 {
            let errs: Vec<(usize, f64)> = records.iter().map(|r| (r.n, r.cov_frobenius_error)).collect();
            rate_fit(&errs).ok()
        } else {
            None
        };
        Ok(ConvergenceReport { seed, records, rate })
    }

    /// Whether the covariance error drops at every step of the ladder.
    pub fn strictly_decreasing(&self) -> bool {
        self.records.windows(2).all(|w| w[1].cov_frobenius_error < w[0].cov_frobenius_error)
    }
}
