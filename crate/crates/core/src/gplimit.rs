//! The limiting Gaussian process: exact draws at finitely many inputs and
//! path regularity along one-dimensional segments.

use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::diagnostics::least_squares;
use crate::error::{NngpError, Result};
use crate::exec::Exec;
use crate::kernel::{CovMatrix, InputSet, KernelRecursion, NetworkParams, INDEFINITE_TOL};
use crate::linalg::{sampling_factor, FactorMethod};
use crate::netsim::SampleBatch;
use crate::quadrature::QuadratureSpec;
use crate::rng::{fill_standard_normal, Purpose, StreamRoot};

pub const DEFAULT_JITTER: f64 = 1e-10;
pub const MAX_JITTER: f64 = 1e-6;
/// Largest grid `segment_kernel` accepts by default (`J = 12`).
pub const DEFAULT_MAX_K: usize = 4097;

#[derive(Debug, Clone, PartialEq)]
pub struct GPSampleRequest {
    pub cov: CovMatrix,
    pub units: usize,
    pub samples: usize,
    /// Diagonal jitter relative to the largest diagonal entry.
    pub jitter: f64,
    pub seed: u64,
}

impl GPSampleRequest {
    pub fn new(cov: CovMatrix, units: usize, samples: usize, seed: u64) -> Self {
        GPSampleRequest {
            cov,
            units,
            samples,
            jitter: DEFAULT_JITTER,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GPSample {
    pub batch: SampleBatch,
    pub method: FactorMethod,
}

/// `S · U` iid draws from `N_k(0, Σ)`. Units are independent copies.
pub fn sample_gp(req: &GPSampleRequest, exec: Exec) -> Result<GPSample> {
    if !(req.jitter >= 0.0 && req.jitter.is_finite()) {
        return Err(NngpError::domain(format!("jitter must be >= 0, got {}", req.jitter)));
    }
    if req.units < 1 || req.samples < 1 {
        return Err(NngpError::domain("units and samples must be >= 1"));
    }
    let k = req.cov.k();
    let factor = sampling_factor(req.cov.entries(), req.jitter, MAX_JITTER.max(req.jitter), INDEFINITE_TOL)?;
    let a = &factor.factor;
    let root = StreamRoot::new(req.seed);
    let units = req.units;
    let rows = exec.map_range(req.samples, |s| {
        let mut rng = root.unit_rng(Purpose::GaussianProcess, s as u64, 0, 0);
        let mut z = DVector::zeros(k);
        let mut out = Vec::with_capacity(units * k);
        for _ in 0..units {
            fill_standard_normal(&mut rng, z.as_mut_slice());
            out.extend((a * &z).iter());
        }
        out
    });
    let batch = SampleBatch::new(req.samples, units, k, req.cov.layer(), 0, req.seed, rows.concat())?;
    Ok(GPSample {
        batch,
        method: factor.method,
    })
}

/// `2^J + 1` equally spaced points from `x0` to `x1` (inclusive).
pub fn segment_grid(x0: &[f64], x1: &[f64], levels: u32) -> Result<InputSet> {
    if x0.len() != x1.len() {
        return Err(NngpError::domain("segment endpoints differ in dimension"));
    }
    if levels > 30 {
        return Err(NngpError::Resource(format!("{levels} dyadic levels is too many")));
    }
    let m = 1usize << levels;
    let pts = (0..=m)
        .map(|i| {
            let t = i as f64 / m as f64;
            x0.iter().zip(x1).map(|(a, b)| a + t * (b - a)).collect()
        })
        .collect();
    InputSet::new(pts)
}

/// `Σ(L)` on the finest dyadic grid of the segment.
#[allow(clippy::too_many_arguments)]
pub fn segment_kernel(
    x0: &[f64],
    x1: &[f64],
    levels: u32,
    act: &Activation,
    params: &NetworkParams,
    quad: &QuadratureSpec,
    max_k: usize,
    exec: Exec,
) -> Result<CovMatrix> {
    let points = (1u128 << levels.min(127)) + 1;
    if points > max_k as u128 {
        return Err(NngpError::Resource(format!(
            "segment grid has {points} points, more than the configured maximum k = {max_k}"
        )));
    }
    let grid = segment_grid(x0, x1, levels)?;
    let rec = KernelRecursion::new(act, *params, quad, exec)?;
    Ok(rec.run(&grid)?.pop().expect("depth >= 1").cov)
}

/// One draw of a process along a segment, viewed at every dyadic level.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPath {
    x0: Vec<f64>,
    x1: Vec<f64>,
    levels: u32,
    finest: Vec<f64>,
}

impl SegmentPath {
    /// `finest` holds the values at `t = i / 2^J`, `i = 0..=2^J`.
    pub fn new(x0: Vec<f64>, x1: Vec<f64>, levels: u32, finest: Vec<f64>) -> Result<Self> {
        if x0.len() != x1.len() {
            return Err(NngpError::domain("segment endpoints differ in dimension"));
        }
        if levels > 30 || finest.len() != (1usize << levels) + 1 {
            return Err(NngpError::domain(format!(
                "{} values do not form a dyadic grid with {levels} levels",
                finest.len()
            )));
        }
        if finest.iter().any(|v| !v.is_finite()) {
            return Err(NngpError::domain("path values must be finite"));
        }
        Ok(SegmentPath { x0, x1, levels, finest })
    }

    /// Path through `v(t)` on the unit segment of the real line.
    pub fn from_fn(levels: u32, v: impl Fn(f64) -> f64) -> Result<Self> {
        let m = 1usize << levels.min(30);
        let finest = (0..=m).map(|i| v(i as f64 / m as f64)).collect();
        Self::new(vec![0.0], vec![1.0], levels, finest)
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn length(&self) -> f64 {
        self.x0.iter().zip(&self.x1).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt()
    }

    /// Values at level `j`: the `2^j + 1` points `t = i / 2^j`. Shared
    /// points carry the same value at every level.
    pub fn level(&self, j: u32) -> Vec<f64> {
        let stride = 1usize << (self.levels - j.min(self.levels));
        self.finest.iter().step_by(stride).copied().collect()
    }

    /// CSV `level,t,value` for levels `0..=J`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["level", "t", "value"])?;
        for j in 0..=self.levels {
            let m = 1usize << j;
            for (i, v) in self.level(j).iter().enumerate() {
                out.write_record(&[j.to_string(), (i as f64 / m as f64).to_string(), v.to_string()])?;
            }
        }
        out.flush()
    }
}

/// Cut a GP batch drawn on `segment_grid(x0, x1, J)` into paths, one per
/// sample and unit.
pub fn paths_from_batch(batch: &SampleBatch, x0: &[f64], x1: &[f64], levels: u32) -> Result<Vec<SegmentPath>> {
    let mut out = Vec::with_capacity(batch.samples() * batch.units());
    for s in 0..batch.samples() {
        for u in 0..batch.units() {
            out.push(SegmentPath::new(x0.to_vec(), x1.to_vec(), levels, batch.point(s, u).to_vec())?);
        }
    }
    Ok(out)
}

/// Largest absolute increment between neighbours at one dyadic scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleIncrement {
    pub level: u32,
    /// `2^{-j} ‖x1 - x0‖`.
    pub scale: f64,
    pub max_increment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolderEstimate {
    pub gamma: f64,
    /// Standard error of the regression slope.
    pub se: f64,
    /// `gamma ± 2 se`.
    pub band: (f64, f64),
    pub increments: Vec<ScaleIncrement>,
    /// Levels dropped because their largest increment was exactly zero.
    pub excluded_levels: Vec<u32>,
}

/// Slope of `log max|Δ|` against `log scale` over levels `1..=J`.
pub fn holder_exponent_estimate(path: &SegmentPath) -> Result<HolderEstimate> {
    holder_fit(std::slice::from_ref(path))
}

/// Pooled fit over several paths on the same segment. Because every path
/// shares the same design, the slope equals the mean of the per-path
/// slopes; the standard error comes from the pooled residuals.
pub fn holder_fit(paths: &[SegmentPath]) -> Result<HolderEstimate> {
    let first = paths.first().ok_or_else(|| NngpError::domain("no paths to fit"))?;
    let levels = first.levels;
    if levels < 4 {
        return Err(NngpError::domain(format!("Hölder fit needs J >= 4 levels, got {levels}")));
    }
    if paths.iter().any(|p| p.levels != levels) {
        return Err(NngpError::domain("paths disagree on the number of levels"));
    }
    let length = first.length();
    if length == 0.0 {
        return Err(NngpError::domain("segment has zero length"));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut increments = Vec::new();
    let mut excluded = Vec::new();
    for path in paths {
        for j in 1..=levels {
            let v = path.level(j);
            let max_inc = v.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
            let scale = length / (1u64 << j) as f64;
            if paths.len() == 1 {
                increments.push(ScaleIncrement { level: j, scale, max_increment: max_inc });
            }
            if max_inc == 0.0 {
                if !excluded.contains(&j) {
                    excluded.push(j);
                }
                continue;
            }
            xs.push(scale.ln());
            ys.push(max_inc.ln());
        }
    }
    if paths.len() > 1 {
        for j in 1..=levels {
            let scale = length / (1u64 << j) as f64;
            let mean = paths
                .iter()
                .map(|p| p.level(j).windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max))
                .sum::<f64>()
                / paths.len() as f64;
            increments.push(ScaleIncrement { level: j, scale, max_increment: mean });
        }
    }
    excluded.sort_unstable();
    let fit = least_squares(&xs, &ys)?;
    Ok(HolderEstimate {
        gamma: fit.slope,
        se: fit.se,
        band: (fit.slope - 2.0 * fit.se, fit.slope + 2.0 * fit.se),
        increments,
        excluded_levels: excluded,
    })
}
