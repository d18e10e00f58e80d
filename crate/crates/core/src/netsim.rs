//! Finite-width networks
//!
//! ```text
//! f(1)_i(x) = Σ_j ω_ij x_j + b_i
//! f(l)_i(x) = n^{-1/2} Σ_{j≤n} ω_ij φ(f(l-1)_j(x)) + b_i
//! ```
//!
//! with `ω ~ N(0, σ_ω²)` and `b ~ N(0, σ_b²)` iid, one draw shared by all
//! `k` inputs of a sample.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{NngpError, Result};
use crate::exec::Exec;
use crate::kernel::{base_kernel, CovMatrix, InputSet, NetworkParams};
use crate::linalg::semidefinite_cholesky;
use crate::rng::{fill_standard_normal, Purpose, StreamRoot};

/// Default cap on `n · U · S · k · L`.
pub const DEFAULT_MEMORY_BUDGET: f64 = 1.0e12;
const PIVOT_TOL: f64 = 1e-13;

const BATCH_MAGIC: u64 = u64::from_le_bytes(*b"NNGPBTCH");
const BATCH_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Draws every weight. Costs `O(L n²)` per sample; required for
    /// Lipschitz witnesses.
    Explicit,
    /// Draws layer `l` from its exact law given layer `l - 1`: the units are
    /// iid `N_k(0, σ_b² 11ᵀ + σ_ω² n⁻¹ ΦᵀΦ)`, where `Φ` (n×k) holds the
    /// activations of the previous layer. Costs `O(L n k²)` per sample.
    #[default]
    Conditional,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    /// Hidden width `n`.
    pub width: usize,
    /// Output units `U` recorded per layer.
    pub units: usize,
    /// Independent realizations `S`.
    pub samples: usize,
    pub mode: SamplerMode,
    pub track_witness: bool,
    /// Cap on `n · U · S · k · L`.
    pub memory_budget: f64,
}

impl SamplerConfig {
    pub fn new(width: usize, units: usize, samples: usize) -> Self {
        SamplerConfig {
            width,
            units,
            samples,
            mode: SamplerMode::default(),
            track_witness: false,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }

    pub fn explicit(mut self) -> Self {
        self.mode = SamplerMode::Explicit;
        self
    }

    pub fn with_witness(mut self) -> Self {
        self.mode = SamplerMode::Explicit;
        self.track_witness = true;
        self
    }

    pub fn validate(&self, k: usize, depth: usize) -> Result<()> {
        if self.width < 1 || self.units < 1 || self.samples < 1 {
            return Err(NngpError::domain(format!(
                "width, units and samples must be >= 1 (got n={}, U={}, S={})",
                self.width, self.units, self.samples
            )));
        }
        if self.track_witness && self.mode != SamplerMode::Explicit {
            return Err(NngpError::Unsupported(
                "Lipschitz witnesses need the explicit sampler".into(),
            ));
        }
        let work = self.width as f64 * self.units as f64 * self.samples as f64 * k as f64 * depth as f64;
        if work > self.memory_budget {
            return Err(NngpError::Resource(format!(
                "n*U*S*k*L = {work:e} exceeds the memory budget {:e}",
                self.memory_budget
            )));
        }
        Ok(())
    }
}

/// Provenance carried alongside a batch (not part of the binary format).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMeta {
    pub params: NetworkParams,
    pub activation: String,
}

/// `S × U × k` values of one layer, stored sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    samples: usize,
    units: usize,
    k: usize,
    layer: usize,
    width: usize,
    seed: u64,
    values: Vec<f64>,
    meta: Option<BatchMeta>,
}

impl SampleBatch {
    pub fn new(
        samples: usize,
        units: usize,
        k: usize,
        layer: usize,
        width: usize,
        seed: u64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if samples < 1 || units < 1 || k < 1 {
            return Err(NngpError::domain(format!(
                "batch needs S, U, k >= 1 (got {samples}, {units}, {k})"
            )));
        }
        let expected = samples
            .checked_mul(units)
            .and_then(|v| v.checked_mul(k))
            .ok_or_else(|| NngpError::Resource("batch size overflows".into()))?;
        if values.len() != expected {
            return Err(NngpError::domain(format!(
                "batch has {} values, expected S*U*k = {expected}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(NngpError::domain(format!("batch value {pos} is not finite")));
        }
        Ok(SampleBatch {
            samples,
            units,
            k,
            layer,
            width,
            seed,
            values,
            meta: None,
        })
    }

    pub fn with_meta(mut self, meta: BatchMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn meta(&self) -> Option<&BatchMeta> {
        self.meta.as_ref()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn value(&self, sample: usize, unit: usize, input: usize) -> f64 {
        self.values[(sample * self.units + unit) * self.k + input]
    }

    /// The `k` values of one unit in one sample.
    pub fn point(&self, sample: usize, unit: usize) -> &[f64] {
        let start = (sample * self.units + unit) * self.k;
        &self.values[start..start + self.k]
    }

    /// All `S` draws of `f_unit(x_input)`.
    pub fn marginal(&self, unit: usize, input: usize) -> Vec<f64> {
        (0..self.samples).map(|s| self.value(s, unit, input)).collect()
    }

    /// Binary layout: eight little-endian `u64` header words (magic, version,
    /// S, U, k, layer, n, seed) followed by the values as little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = [
            BATCH_MAGIC,
            BATCH_VERSION,
            self.samples as u64,
            self.units as u64,
            self.k as u64,
            self.layer as u64,
            self.width as u64,
            self.seed,
        ];
        let mut buf = Vec::with_capacity(8 * (header.len() + self.values.len()));
        for h in header {
            buf.extend_from_slice(&h.to_le_bytes());
        }
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_binary(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_binary<R: Read>(mut r: R) -> std::result::Result<Self, String> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 64 {
            return Err(format!("file too short for a batch header ({} bytes)", bytes.len()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().expect("8 bytes"));
        if word(0) != BATCH_MAGIC {
            return Err("bad magic number".into());
        }
        if word(1) != BATCH_VERSION {
            return Err(format!("unsupported batch version {}", word(1)));
        }
        let dims: Vec<usize> = (2..7)
            .map(|i| usize::try_from(word(i)).map_err(|_| format!("header word {i} too large")))
            .collect::<std::result::Result<_, _>>()?;
        let (s, u, k, layer, n) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
        let count = s
            .checked_mul(u)
            .and_then(|v| v.checked_mul(k))
            .ok_or("header sizes overflow")?;
        let body = &bytes[64..];
        if body.len() != count * 8 {
            return Err(format!("expected {} value bytes, found {}", count * 8, body.len()));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        SampleBatch::new(s, u, k, layer, n, word(7), values).map_err(|e| e.to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| NngpError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| NngpError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| NngpError::Format {
            path: path.to_path_buf(),
            msg,
        })
    }

    /// Long-format CSV `sample,unit,input,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> std::io::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["sample", "unit", "input", "value"])?;
        for s in 0..self.samples {
            for u in 0..self.units {
                for r in 0..self.k {
                    out.write_record(&[
                        s.to_string(),
                        u.to_string(),
                        r.to_string(),
                        self.value(s, u, r).to_string(),
                    ])?;
                }
            }
        }
        out.flush()
    }
}

/// Per-unit constants `H_i(l)(n)` of one weight realization, with
/// `|f_i(l)(x) - f_i(l)(y)| ≤ H_i(l)(n) ‖x - y‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzWitness {
    pub layer: usize,
    pub values: Vec<f64>,
}

/// Weights and biases of one sample, layer by layer. Row `i` of
/// `weights` feeds unit `i`; layer 1 has `I` columns and later layers `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub weights: DMatrix<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightRealization {
    layers: Vec<LayerWeights>,
}

impl WeightRealization {
    pub fn new(layers: Vec<LayerWeights>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NngpError::domain("a realization needs at least one layer"));
        }
        for (l, lw) in layers.iter().enumerate() {
            if lw.biases.len() != lw.weights.nrows() {
                return Err(NngpError::domain(format!("layer {}: one bias per weight row required", l + 1)));
            }
            if l > 0 && layers[l - 1].weights.nrows() < lw.weights.ncols() {
                return Err(NngpError::domain(format!(
                    "layer {} reads {} units but layer {} has only {}",
                    l + 1,
                    lw.weights.ncols(),
                    l,
                    layers[l - 1].weights.nrows()
                )));
            }
        }
        Ok(WeightRealization { layers })
    }

    /// The realization the explicit sampler uses for `sample`.
    pub fn draw(dim: usize, params: &NetworkParams, width: usize, units: usize, seed: u64, sample: u64) -> Self {
        let root = StreamRoot::new(seed);
        let depth = params.depth;
        let layers = (1..=depth)
            .map(|layer| {
                let rows = units_in_layer(layer, depth, width, units);
                let cols = if layer == 1 { dim } else { width };
                let mut weights = DMatrix::zeros(rows, cols);
                let mut biases = vec![0.0; rows];
                let mut row = vec![0.0; cols];
                for (i, b) in biases.iter_mut().enumerate() {
                    let mut rng = root.unit_rng(Purpose::Network, sample, layer as u64, i as u64);
                    *b = draw_unit(&mut rng, params, &mut row);
                    weights.row_mut(i).copy_from_slice(&row);
                }
                LayerWeights { weights, biases }
            })
            .collect();
        WeightRealization { layers }
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// Pre-activations of every unit: element `l - 1` is `units × k`.
    pub fn forward(&self, inputs: &InputSet, act: &Activation) -> Result<Vec<DMatrix<f64>>> {
        let k = inputs.len();
        let first = &self.layers[0];
        if first.weights.ncols() != inputs.dim() {
            return Err(NngpError::domain(format!(
                "layer 1 expects inputs of dimension {}, got {}",
                first.weights.ncols(),
                inputs.dim()
            )));
        }
        let mut feed = input_columns(inputs);
        let mut out = Vec::with_capacity(self.layers.len());
        for (l, lw) in self.layers.iter().enumerate() {
            let cols = lw.weights.ncols();
            let scale = if l == 0 { 1.0 } else { 1.0 / (cols as f64).sqrt() };
            let rows = lw.weights.nrows();
            let mut pre = DMatrix::zeros(rows, k);
            let mut buf = vec![0.0; k];
            let mut row = vec![0.0; cols];
            for i in 0..rows {
                row.iter_mut().zip(lw.weights.row(i).iter()).for_each(|(d, s)| *d = *s);
                affine(&row, lw.biases[i], scale, &feed[..cols * k], k, &mut buf);
                pre.row_mut(i).copy_from_slice(&buf);
            }
            feed = (0..rows).flat_map(|i| (0..k).map(move |r| (i, r))).map(|(i, r)| act.apply(pre[(i, r)])).collect();
            out.push(pre);
        }
        Ok(out)
    }
}

/// Witness recursion `H_i(1) = Σ_j |ω_ij|`,
/// `H_i(l) = L_φ n^{-1/2} Σ_j |ω_ij| H_j(l-1)`.
pub fn lipschitz_witness(w: &WeightRealization, act: &Activation) -> Result<Vec<LipschitzWitness>> {
    let lip = act
        .lipschitz_constant()
        .ok_or_else(|| NngpError::domain(format!("activation {act} has no declared Lipschitz constant")))?;
    let mut prev: Vec<f64> = Vec::new();
    let mut out = Vec::with_capacity(w.layers.len());
    for (l, lw) in w.layers.iter().enumerate() {
        let cols = lw.weights.ncols();
        let values: Vec<f64> = (0..lw.weights.nrows())
            .map(|i| {
                let row = lw.weights.row(i);
                if l == 0 {
                    row.iter().map(|v| v.abs()).sum()
                } else {
                    let s: f64 = row.iter().zip(&prev).map(|(v, h)| v.abs() * h).sum();
                    lip / (cols as f64).sqrt() * s
                }
            })
            .collect();
        prev = values.clone();
        out.push(LipschitzWitness { layer: l + 1, values });
    }
    Ok(out)
}

/// All layers of a network sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSample {
    /// Element `l - 1` holds layer `l`.
    pub layers: Vec<SampleBatch>,
    /// `witnesses[s][l - 1]` for the `U` recorded units; empty unless tracked.
    pub witnesses: Vec<Vec<LipschitzWitness>>,
}

impl NetworkSample {
    pub fn layer(&self, l: usize) -> &SampleBatch {
        &self.layers[l - 1]
    }

    pub fn output(&self) -> &SampleBatch {
        self.layers.last().expect("at least one layer")
    }
}

struct SampleOutcome {
    layers: Vec<Vec<f64>>,
    witness: Vec<LipschitzWitness>,
}

/// Draw `S` independent networks and record `U` units of every layer at
/// all inputs.
pub fn sample_network(
    inputs: &InputSet,
    params: &NetworkParams,
    act: &Activation,
    cfg: &SamplerConfig,
    seed: u64,
    exec: Exec,
) -> Result<NetworkSample> {
    params.validate()?;
    let k = inputs.len();
    cfg.validate(k, params.depth)?;
    if cfg.track_witness && act.lipschitz_constant().is_none() {
        return Err(NngpError::domain(format!("activation {act} has no declared Lipschitz constant")));
    }
    let root = StreamRoot::new(seed);
    let outcomes: Vec<SampleOutcome> = match cfg.mode {
        SamplerMode::Explicit => {
            let feed = input_columns(inputs);
            exec.map_range(cfg.samples, |s| explicit_sample(&feed, inputs.dim(), k, params, act, cfg, root, s as u64))
        }
        SamplerMode::Conditional => {
            let base = base_kernel(inputs, params);
            let flat: Vec<f64> = base.rows().concat();
            let first = semidefinite_cholesky(&flat, k, PIVOT_TOL);
            exec.map_range(cfg.samples, |s| conditional_sample(&first, k, params, act, cfg, root, s as u64))
        }
    };

    let meta = BatchMeta {
        params: *params,
        activation: act.to_string(),
    };
    let mut layers = Vec::with_capacity(params.depth);
    for l in 0..params.depth {
        let mut values = Vec::with_capacity(cfg.samples * cfg.units * k);
        for o in &outcomes {
            values.extend_from_slice(&o.layers[l]);
        }
        let batch = SampleBatch::new(cfg.samples, cfg.units, k, l + 1, cfg.width, seed, values).map_err(|e| {
            NngpError::Numeric(format!("layer {} produced invalid values: {e}", l + 1))
        })?;
        layers.push(batch.with_meta(meta.clone()));
    }
    let witnesses = if cfg.track_witness {
        outcomes.into_iter().map(|o| o.witness).collect()
    } else {
        Vec::new()
    };
    Ok(NetworkSample { layers, witnesses })
}

/// Hidden layers draw `max(n, U)` units: the first `n` feed the next layer,
/// the first `U` are recorded. The last layer draws only `U`.
fn units_in_layer(layer: usize, depth: usize, width: usize, units: usize) -> usize {
    if layer < depth {
        width.max(units)
    } else {
        units
    }
}

/// Inputs laid out `dim × k` row-major, matching activations `n × k`.
fn input_columns(inputs: &InputSet) -> Vec<f64> {
    let (dim, k) = (inputs.dim(), inputs.len());
    let mut feed = vec![0.0; dim * k];
    for r in 0..k {
        for (j, &x) in inputs.input(r).iter().enumerate() {
            feed[j * k + r] = x;
        }
    }
    feed
}

/// Bias first, then the weight row, from the unit's own stream.
fn draw_unit<R: rand::Rng>(rng: &mut R, params: &NetworkParams, row: &mut [f64]) -> f64 {
    let mut z = [0.0];
    fill_standard_normal(rng, &mut z);
    let bias = params.sigma_b_sq.sqrt() * z[0];
    fill_standard_normal(rng, row);
    let sw = params.sigma_w_sq.sqrt();
    row.iter_mut().for_each(|w| *w *= sw);
    bias
}

/// `out_r = scale · Σ_j row_j feed[j, r] + bias`.
#[inline]
fn affine(row: &[f64], bias: f64, scale: f64, feed: &[f64], k: usize, out: &mut [f64]) {
    out.fill(0.0);
    for (j, &w) in row.iter().enumerate() {
        let src = &feed[j * k..(j + 1) * k];
        for (o, &a) in out.iter_mut().zip(src) {
            *o += w * a;
        }
    }
    for o in out.iter_mut() {
        *o = scale * *o + bias;
    }
}

#[allow(clippy::too_many_arguments)]
fn explicit_sample(
    inputs: &[f64],
    dim: usize,
    k: usize,
    params: &NetworkParams,
    act: &Activation,
    cfg: &SamplerConfig,
    root: StreamRoot,
    sample: u64,
) -> SampleOutcome {
    let depth = params.depth;
    let n = cfg.width;
    let lip = act.lipschitz_constant().unwrap_or(0.0);
    let mut feed: Vec<f64> = inputs.to_vec();
    let mut h_prev: Vec<f64> = Vec::new();
    let mut layers = Vec::with_capacity(depth);
    let mut witness = Vec::new();
    for layer in 1..=depth {
        let rows = units_in_layer(layer, depth, n, cfg.units);
        let cols = if layer == 1 { dim } else { n };
        let scale = if layer == 1 { 1.0 } else { 1.0 / (n as f64).sqrt() };
        let mut row = vec![0.0; cols];
        let mut pre = vec![0.0; k];
        let mut next = if layer < depth { vec![0.0; n * k] } else { Vec::new() };
        let mut recorded = Vec::with_capacity(cfg.units * k);
        let mut h_here = Vec::new();
        for i in 0..rows {
            let mut rng = root.unit_rng(Purpose::Network, sample, layer as u64, i as u64);
            let bias = draw_unit(&mut rng, params, &mut row);
            affine(&row, bias, scale, &feed, k, &mut pre);
            if i < cfg.units {
                recorded.extend_from_slice(&pre);
            }
            if layer < depth && i < n {
                for (d, &v) in next[i * k..(i + 1) * k].iter_mut().zip(&pre) {
                    *d = act.apply(v);
                }
            }
            if cfg.track_witness {
                let h = if layer == 1 {
                    row.iter().map(|v| v.abs()).sum()
                } else {
                    let s: f64 = row.iter().zip(&h_prev).map(|(v, h)| v.abs() * h).sum();
                    lip / (n as f64).sqrt() * s
                };
                h_here.push(h);
            }
        }
        if cfg.track_witness {
            witness.push(LipschitzWitness {
                layer,
                values: h_here[..cfg.units].to_vec(),
            });
            h_prev = h_here;
        }
        layers.push(recorded);
        feed = next;
    }
    SampleOutcome { layers, witness }
}

fn conditional_sample(
    first_factor: &[f64],
    k: usize,
    params: &NetworkParams,
    act: &Activation,
    cfg: &SamplerConfig,
    root: StreamRoot,
    sample: u64,
) -> SampleOutcome {
    let depth = params.depth;
    let n = cfg.width;
    let mut phi: Vec<f64> = Vec::new();
    let mut factor = first_factor.to_vec();
    let mut cov = vec![0.0; k * k];
    let mut z = vec![0.0; k];
    let mut f = vec![0.0; k];
    let mut layers = Vec::with_capacity(depth);
    for layer in 1..=depth {
        if layer > 1 {
            conditional_cov(&phi, n, k, params, &mut cov);
            factor = semidefinite_cholesky(&cov, k, PIVOT_TOL);
        }
        let rows = units_in_layer(layer, depth, n, cfg.units);
        let mut rng = root.unit_rng(Purpose::Network, sample, layer as u64, 0);
        let mut next = if layer < depth { vec![0.0; n * k] } else { Vec::new() };
        let mut recorded = Vec::with_capacity(cfg.units * k);
        for i in 0..rows {
            fill_standard_normal(&mut rng, &mut z);
            for r in 0..k {
                f[r] = (0..=r).map(|c| factor[r * k + c] * z[c]).sum();
            }
            if i < cfg.units {
                recorded.extend_from_slice(&f);
            }
            if layer < depth && i < n {
                for (d, &v) in next[i * k..(i + 1) * k].iter_mut().zip(&f) {
                    *d = act.apply(v);
                }
            }
        }
        layers.push(recorded);
        phi = next;
    }
    SampleOutcome {
        layers,
        witness: Vec::new(),
    }
}

/// `σ_b² + σ_ω² n⁻¹ Σ_j φ_jr φ_js`, written row-major into `out`.
fn conditional_cov(phi: &[f64], n: usize, k: usize, params: &NetworkParams, out: &mut [f64]) {
    out.fill(0.0);
    for j in 0..n {
        let a = &phi[j * k..(j + 1) * k];
        for r in 0..k {
            for s in 0..=r {
                out[r * k + s] += a[r] * a[s];
            }
        }
    }
    let c = params.sigma_w_sq / n as f64;
    for r in 0..k {
        for s in 0..=r {
            let v = params.sigma_b_sq + c * out[r * k + s];
            out[r * k + s] = v;
            out[s * k + r] = v;
        }
    }
}

/// Raw second moments `S⁻¹ Σ_s f_r f_s` of one unit.
pub fn empirical_cov(batch: &SampleBatch, unit: usize) -> Result<CovMatrix> {
    second_moments(batch, unit, false)
}

/// Sample covariance with the mean removed (divisor `S - 1`).
pub fn empirical_cov_centered(batch: &SampleBatch, unit: usize) -> Result<CovMatrix> {
    second_moments(batch, unit, true)
}

fn second_moments(batch: &SampleBatch, unit: usize, centered: bool) -> Result<CovMatrix> {
    let (s_count, k) = (batch.samples(), batch.k());
    if s_count < 2 {
        return Err(NngpError::domain("covariance estimate needs S >= 2"));
    }
    if unit >= batch.units() {
        return Err(NngpError::domain(format!("unit {unit} out of range (U = {})", batch.units())));
    }
    let mean: Vec<f64> = if centered {
        (0..k)
            .map(|r| (0..s_count).map(|s| batch.value(s, unit, r)).sum::<f64>() / s_count as f64)
            .collect()
    } else {
        vec![0.0; k]
    };
    let mut acc = DMatrix::zeros(k, k);
    for s in 0..s_count {
        let p = batch.point(s, unit);
        for r in 0..k {
            for c in 0..=r {
                acc[(r, c)] += (p[r] - mean[r]) * (p[c] - mean[c]);
            }
        }
    }
    let div = if centered { s_count - 1 } else { s_count } as f64;
    for r in 0..k {
        for c in 0..=r {
            let v = acc[(r, c)] / div;
            acc[(r, c)] = v;
            acc[(c, r)] = v;
        }
    }
    CovMatrix::new(acc, batch.layer())
}

/// A unit pair whose correlation was undefined at some input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub input: usize,
    pub unit_a: usize,
    pub unit_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossUnitCorr {
    /// Largest `|corr(f_i(x_r), f_j(x_r))|` over `i ≠ j` and `r`
    /// (0 when every pair was skipped).
    pub max_abs: f64,
    pub skipped: Vec<SkippedPair>,
}

pub fn cross_unit_corr(batch: &SampleBatch) -> Result<CrossUnitCorr> {
    let (u_count, k, s_count) = (batch.units(), batch.k(), batch.samples());
    if u_count < 2 {
        return Err(NngpError::domain("cross-unit correlation needs U >= 2"));
    }
    if s_count < 2 {
        return Err(NngpError::domain("cross-unit correlation needs S >= 2"));
    }
    let mut max_abs: f64 = 0.0;
    let mut skipped = Vec::new();
    for r in 0..k {
        let cols: Vec<Vec<f64>> = (0..u_count).map(|u| batch.marginal(u, r)).collect();
        let centred: Vec<(Vec<f64>, f64)> = cols
            .into_iter()
            .map(|c| {
                let m = c.iter().sum::<f64>() / s_count as f64;
                let d: Vec<f64> = c.iter().map(|v| v - m).collect();
                let ss = d.iter().map(|v| v * v).sum::<f64>();
                (d, ss)
            })
            .collect();
        for a in 0..u_count {
            for b in (a + 1)..u_count {
                let (da, sa) = &centred[a];
                let (db, sb) = &centred[b];
                if *sa == 0.0 || *sb == 0.0 {
                    skipped.push(SkippedPair { input: r, unit_a: a, unit_b: b });
                    continue;
                }
                let cross: f64 = da.iter().zip(db).map(|(x, y)| x * y).sum();
                max_abs = max_abs.max((cross / (sa * sb).sqrt()).abs().min(1.0));
            }
        }
    }
    Ok(CrossUnitCorr { max_abs, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn params(depth: usize, w: f64, b: f64) -> NetworkParams {
        NetworkParams::new(depth, w, b).unwrap()
    }

    fn two_sample_ks(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        d
    }

    fn kurtosis(v: &[f64]) -> f64 {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
        m4 / (m2 * m2)
    }

    #[test]
    fn zero_input_has_bias_law() {
        let x = InputSet::new(vec![vec![0.0, 0.0, 0.0]]).unwrap();
        let p = params(1, 1.7, 0.5);
        let s = 100_000;
        for cfg in [SamplerConfig::new(1, 1, s), SamplerConfig::new(1, 1, s).explicit()] {
            let out = sample_network(&x, &p, &Activation::relu(), &cfg, 11, Exec::Parallel).unwrap();
            let var = out.layer(1).marginal(0, 0).iter().map(|v| v * v).sum::<f64>() / s as f64;
            assert!((var - 0.5).abs() < 4.0 * (2.0 / s as f64).sqrt() * 0.5, "{var}");
        }
    }

    #[test]
    fn single_unit_product_is_heavy_tailed() {
        // f(2) = ω2 · (ω1ᵀ x) is a product of two independent N(0,1): kurtosis 9
        let x = InputSet::new(vec![vec![0.6, 0.8]]).unwrap();
        let p = params(2, 1.0, 0.0);
        for cfg in [SamplerConfig::new(1, 1, 100_000), SamplerConfig::new(1, 1, 100_000).explicit()] {
            let out = sample_network(&x, &p, &Activation::identity(), &cfg, 5, Exec::Parallel).unwrap();
            let kurt = kurtosis(&out.output().marginal(0, 0));
            assert!((kurt - 9.0).abs() < 1.5, "kurtosis {kurt}");
        }
    }

    #[test]
    fn explicit_and_conditional_agree_in_law() {
        let x = InputSet::new(vec![vec![1.0, 0.0], vec![0.3, -0.7]]).unwrap();
        let p = params(3, 2.0, 0.1);
        let s = 4000;
        let a = sample_network(&x, &p, &Activation::relu(), &SamplerConfig::new(3, 2, s), 1, Exec::Parallel).unwrap();
        let b = sample_network(&x, &p, &Activation::relu(), &SamplerConfig::new(3, 2, s).explicit(), 2, Exec::Parallel)
            .unwrap();
        // two-sample KS critical value at level 0.001: 1.949 sqrt(2 / S)
        let crit = 1.949 * (2.0 / s as f64).sqrt();
        for l in 1..=3 {
            for r in 0..2 {
                let d = two_sample_ks(a.layer(l).marginal(1, r), b.layer(l).marginal(1, r));
                assert!(d < crit, "layer {l} input {r}: D = {d}");
            }
            // difference of the two inputs probes the joint law
            let diff = |o: &NetworkSample| -> Vec<f64> {
                let bt = o.layer(l);
                (0..s).map(|i| bt.value(i, 0, 0) - bt.value(i, 0, 1)).collect()
            };
            assert!(two_sample_ks(diff(&a), diff(&b)) < crit);
        }
    }

    #[test]
    fn deterministic_across_strategies() {
        let x = InputSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]]).unwrap();
        let p = params(3, 2.0, 0.1);
        for cfg in [SamplerConfig::new(16, 3, 50), SamplerConfig::new(16, 3, 50).with_witness()] {
            let a = sample_network(&x, &p, &Activation::tanh(), &cfg, 9, Exec::Sequential).unwrap();
            let b = sample_network(&x, &p, &Activation::tanh(), &cfg, 9, Exec::Parallel).unwrap();
            let c = crate::exec::with_threads(Some(3), || {
                sample_network(&x, &p, &Activation::tanh(), &cfg, 9, Exec::Parallel).unwrap()
            });
            for l in 1..=3 {
                assert_eq!(a.layer(l).to_bytes(), b.layer(l).to_bytes());
                assert_eq!(a.layer(l).to_bytes(), c.layer(l).to_bytes());
            }
            assert_eq!(a.witnesses, b.witnesses);
            let d = sample_network(&x, &p, &Activation::tanh(), &cfg, 10, Exec::Sequential).unwrap();
            assert_ne!(a.output().values(), d.output().values());
        }
    }

    #[test]
    fn explicit_sampler_matches_stored_realization() {
        let x = InputSet::new(vec![vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0]]).unwrap();
        let p = params(3, 1.5, 0.2);
        let cfg = SamplerConfig::new(5, 7, 4).with_witness();
        let out = sample_network(&x, &p, &Activation::erf(), &cfg, 3, Exec::Parallel).unwrap();
        for s in 0..4 {
            let w = WeightRealization::draw(3, &p, 5, 7, 3, s as u64);
            let pre = w.forward(&x, &Activation::erf()).unwrap();
            let h = lipschitz_witness(&w, &Activation::erf()).unwrap();
            for l in 1..=3 {
                for u in 0..7 {
                    assert_eq!(out.layer(l).point(s, u), pre[l - 1].row(u).iter().copied().collect::<Vec<_>>());
                    assert_eq!(out.witnesses[s][l - 1].values[u], h[l - 1].values[u]);
                }
            }
        }
    }

    #[test]
    fn witness_examples() {
        let relu = Activation::relu();
        let zero = WeightRealization::new(vec![
            LayerWeights { weights: DMatrix::zeros(2, 3), biases: vec![1.0, 2.0] },
            LayerWeights { weights: DMatrix::zeros(2, 2), biases: vec![0.0, 0.0] },
        ])
        .unwrap();
        for h in lipschitz_witness(&zero, &relu).unwrap() {
            assert!(h.values.iter().all(|&v| v == 0.0));
        }
        let chain = WeightRealization::new(vec![
            LayerWeights { weights: DMatrix::from_element(1, 1, 2.0), biases: vec![0.0] },
            LayerWeights { weights: DMatrix::from_element(1, 1, -3.0), biases: vec![0.0] },
        ])
        .unwrap();
        let h = lipschitz_witness(&chain, &relu).unwrap();
        assert_eq!(h[0].values, vec![2.0]);
        assert_eq!(h[1].values, vec![6.0]);

        let t = crate::activation::ActivationTable::new(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        let no_lip = Activation::custom(t, None, crate::activation::Envelope::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        assert!(matches!(lipschitz_witness(&chain, &no_lip), Err(NngpError::Domain(_))));
        let x = InputSet::new(vec![vec![1.0]]).unwrap();
        let cfg = SamplerConfig::new(2, 1, 2).with_witness();
        assert!(sample_network(&x, &params(2, 1.0, 0.0), &no_lip, &cfg, 0, Exec::Sequential).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn witness_bounds_increments(
            seed in any::<u64>(),
            xs in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 2..4),
            which in 0usize..3,
        ) {
            prop_assume!(xs.iter().enumerate().all(|(i, a)| xs[i + 1..].iter().all(|b| a != b)));
            let act = [Activation::relu(), Activation::tanh(), Activation::erf()][which].clone();
            let x = InputSet::new(xs.clone()).unwrap();
            let p = params(3, 2.0, 0.3);
            let cfg = SamplerConfig::new(8, 4, 3).with_witness();
            let out = sample_network(&x, &p, &act, &cfg, seed, Exec::Sequential).unwrap();
            for s in 0..3 {
                for l in 1..=3 {
                    let b = out.layer(l);
                    for u in 0..4 {
                        let h = out.witnesses[s][l - 1].values[u];
                        for r in 0..xs.len() {
                            for q in (r + 1)..xs.len() {
                                let dist = xs[r].iter().zip(&xs[q]).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
                                let inc = (b.value(s, u, r) - b.value(s, u, q)).abs();
                                prop_assert!(inc <= h * dist * (1.0 + 1e-9));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn memory_budget_is_enforced() {
        let x = InputSet::new(vec![vec![1.0]]).unwrap();
        let mut cfg = SamplerConfig::new(100, 2, 100);
        cfg.memory_budget = 1e4;
        let err = sample_network(&x, &params(2, 1.0, 0.0), &Activation::relu(), &cfg, 0, Exec::Sequential).unwrap_err();
        assert!(matches!(err, NngpError::Resource(ref m) if m.contains("memory budget")));
    }

    #[test]
    fn batch_binary_round_trip() {
        let b = SampleBatch::new(2, 1, 3, 2, 64, 42, vec![1.0, -2.0, 3.5, 0.0, 1e-300, -7.25]).unwrap();
        let bytes = b.to_bytes();
        assert_eq!(bytes.len(), 64 + 6 * 8);
        assert_eq!(&bytes[..8], b"NNGPBTCH");
        assert_eq!(SampleBatch::from_bytes(&bytes).unwrap(), b);
        assert!(SampleBatch::from_bytes(&bytes[..70]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SampleBatch::from_bytes(&bad).is_err());

        let mut csv = Vec::new();
        b.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("sample,unit,input,value\n0,0,0,1\n"));
        assert_eq!(text.lines().count(), 7);
    }

    #[test]
    fn batch_rejects_non_finite() {
        assert!(SampleBatch::new(1, 1, 1, 1, 1, 0, vec![f64::NAN]).is_err());
        assert!(SampleBatch::new(1, 1, 2, 1, 1, 0, vec![1.0]).is_err());
    }

    #[test]
    fn empirical_cov_examples() {
        let c = SampleBatch::new(3, 1, 2, 1, 1, 0, vec![2.0; 6]).unwrap();
        assert_eq!(empirical_cov(&c, 0).unwrap().entries(), &DMatrix::from_element(2, 2, 4.0));
        assert_eq!(empirical_cov_centered(&c, 0).unwrap().entries(), &DMatrix::zeros(2, 2));
        let pm = SampleBatch::new(2, 1, 1, 1, 1, 0, vec![1.0, -1.0]).unwrap();
        assert_eq!(empirical_cov(&pm, 0).unwrap().get(0, 0), 1.0);
        assert!(empirical_cov(&SampleBatch::new(1, 1, 1, 1, 1, 0, vec![1.0]).unwrap(), 0).is_err());
    }

    #[test]
    fn empirical_cov_of_gaussian_draws() {
        // draws built directly from a Cholesky factor of Σ
        let sigma = [2.0, 0.6, -0.3, 0.6, 1.0, 0.2, -0.3, 0.2, 0.5];
        let l = semidefinite_cholesky(&sigma, 3, 0.0);
        let s = 50_000;
        let mut rng = StreamRoot::new(4).unit_rng(Purpose::Oracle, 0, 0, 0);
        let mut vals = Vec::with_capacity(3 * s);
        let mut z = [0.0; 3];
        for _ in 0..s {
            fill_standard_normal(&mut rng, &mut z);
            for r in 0..3 {
                vals.push((0..3).map(|c| l[r * 3 + c] * z[c]).sum::<f64>());
            }
        }
        let b = SampleBatch::new(s, 1, 3, 1, 1, 4, vals).unwrap();
        let est = empirical_cov(&b, 0).unwrap();
        let tol = 4.0 * 2.0 * (2.0 / s as f64).sqrt();
        for r in 0..3 {
            for c in 0..3 {
                assert!((est.get(r, c) - sigma[r * 3 + c]).abs() < tol);
            }
        }
    }

    #[test]
    fn cross_unit_corr_examples() {
        let twin = SampleBatch::new(3, 2, 1, 1, 1, 0, vec![1.0, 1.0, 2.0, 2.0, -4.0, -4.0]).unwrap();
        assert!((cross_unit_corr(&twin).unwrap().max_abs - 1.0).abs() < 1e-15);
        let neg = SampleBatch::new(3, 2, 1, 1, 1, 0, vec![1.0, -1.0, 2.0, -2.0, -4.0, 4.0]).unwrap();
        assert!((cross_unit_corr(&neg).unwrap().max_abs - 1.0).abs() < 1e-15);
        let flat = SampleBatch::new(2, 2, 1, 1, 1, 0, vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let r = cross_unit_corr(&flat).unwrap();
        assert_eq!(r.skipped, vec![SkippedPair { input: 0, unit_a: 0, unit_b: 1 }]);
        let one = SampleBatch::new(2, 1, 1, 1, 1, 0, vec![1.0, 0.0]).unwrap();
        assert!(cross_unit_corr(&one).is_err());

        let s = 10_000;
        let mut rng = StreamRoot::new(8).unit_rng(Purpose::Oracle, 0, 0, 0);
        let mut vals = vec![0.0; s * 2];
        fill_standard_normal(&mut rng, &mut vals);
        let indep = SampleBatch::new(s, 2, 1, 1, 1, 8, vals).unwrap();
        assert!(cross_unit_corr(&indep).unwrap().max_abs < 0.05);
    }

    #[test]
    fn disjoint_unit_groups_share_a_law() {
        let x = InputSet::new(vec![vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let p = params(2, 2.0, 0.1);
        let s = 4000;
        let out = sample_network(&x, &p, &Activation::relu(), &SamplerConfig::new(4, 8, s), 21, Exec::Parallel).unwrap();
        let b = out.output();
        let pooled = |units: std::ops::Range<usize>| -> Vec<f64> {
            let mut m = vec![0.0; 4];
            for u in units.clone() {
                let c = empirical_cov(b, u).unwrap();
                for (i, v) in m.iter_mut().enumerate() {
                    *v += c.get(i / 2, i % 2) / units.len() as f64;
                }
            }
            m
        };
        let (lo, hi) = (pooled(0..4), pooled(4..8));
        // units within a sample are dependent through the shared hidden layer,
        // so allow the single-unit standard error
        let scale = lo.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for (a, c) in lo.iter().zip(&hi) {
            assert!((a - c).abs() < 4.0 * scale * (4.0 / s as f64).sqrt(), "{a} vs {c}");
        }
    }
}
