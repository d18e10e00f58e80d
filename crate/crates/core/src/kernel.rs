//! Infinite-width covariance kernel, layer by layer:
//!
//! ```text
//! Σ(1)_rs = σ_b² + σ_ω² ⟨x_r, x_s⟩
//! Σ(l)_rs = σ_b² + σ_ω² E[φ(U) φ(V)],  (U, V) ~ N₂(0, Σ(l-1) restricted to {r, s})
//! ```
//!
//! plus the moment constants `H^(l)` bounding `E|f(y) - f(x)|^{2θ}`.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::error::{NngpError, Result};
use crate::exec::Exec;
use crate::linalg::{max_diagonal, relative_asymmetry};
use crate::quadrature::{GaussianRule, PanelShape, QuadratureSpec};

/// Slack allowed when `|cov| > sqrt(var_u var_v)` before clamping the
/// correlation to ±1.
pub const CORRELATION_SLACK: f64 = 1e-8;
/// Relative asymmetry tolerated by [`CovMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Relative asymmetry tolerated by [`psd_repair`].
pub const REPAIR_SYMMETRY_TOL: f64 = 1e-8;
/// Most negative eigenvalue (relative to the largest diagonal entry) a
/// computed kernel layer may have before repair.
pub const INDEFINITE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub depth: usize,
    pub sigma_w_sq: f64,
    pub sigma_b_sq: f64,
}

impl NetworkParams {
    pub fn new(depth: usize, sigma_w_sq: f64, sigma_b_sq: f64) -> Result<Self> {
        let p = NetworkParams {
            depth,
            sigma_w_sq,
            sigma_b_sq,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(NngpError::domain("depth must be >= 1"));
        }
        if !(self.sigma_w_sq > 0.0 && self.sigma_w_sq.is_finite()) {
            return Err(NngpError::domain(format!("sigma_w_sq must be > 0, got {}", self.sigma_w_sq)));
        }
        if !(self.sigma_b_sq >= 0.0 && self.sigma_b_sq.is_finite()) {
            return Err(NngpError::domain(format!("sigma_b_sq must be >= 0, got {}", self.sigma_b_sq)));
        }
        Ok(())
    }
}

/// `k` distinct inputs in `R^I`.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    inputs: Vec<Vec<f64>>,
}

impl InputSet {
    /// Each element of `inputs` is one input vector (a column of `X`).
    pub fn new(inputs: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = inputs.first() else {
            return Err(NngpError::domain("input set is empty"));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(NngpError::domain("inputs must have dimension >= 1"));
        }
        for (r, x) in inputs.iter().enumerate() {
            if x.len() != dim {
                return Err(NngpError::domain(format!(
                    "input {r} has dimension {}, expected {dim}",
                    x.len()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(NngpError::domain(format!("input {r} has non-finite entries")));
            }
        }
        for r in 0..inputs.len() {
            for s in (r + 1)..inputs.len() {
                if inputs[r] == inputs[s] {
                    return Err(NngpError::domain(format!("inputs {r} and {s} are identical")));
                }
            }
        }
        Ok(InputSet { inputs })
    }

    /// Input dimension `I`.
    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// Number of inputs `k`.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, r: usize) -> &[f64] {
        &self.inputs[r]
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    /// The input set with input `r` removed.
    pub fn without(&self, r: usize) -> Result<InputSet> {
        let mut v = self.inputs.clone();
        v.remove(r);
        InputSet::new(v)
    }
}

/// Symmetric `k×k` covariance tagged with the layer it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    entries: DMatrix<f64>,
    layer: usize,
}

impl CovMatrix {
    pub fn new(entries: DMatrix<f64>, layer: usize) -> Result<Self> {
        if !entries.is_square() || entries.nrows() == 0 {
            return Err(NngpError::domain(format!(
                "covariance must be square and non-empty, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(NngpError::domain("covariance has non-finite entries"));
        }
        let asym = relative_asymmetry(&entries);
        if asym > SYMMETRY_TOL {
            return Err(NngpError::domain(format!("covariance asymmetric (relative {asym:e})")));
        }
        Ok(CovMatrix { entries, layer })
    }

    pub fn from_rows(rows: &[Vec<f64>], layer: usize) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(NngpError::domain("covariance rows must all have length k"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(DMatrix::from_row_slice(k, k, &flat), layer)
    }

    pub fn k(&self) -> usize {
        self.entries.nrows()
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn get(&self, r: usize, s: usize) -> f64 {
        self.entries[(r, s)]
    }

    pub fn max_diagonal(&self) -> f64 {
        max_diagonal(&self.entries)
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.k())
            .map(|r| self.entries.row(r).iter().copied().collect())
            .collect()
    }

    /// Copy with row and column `z` removed.
    pub fn without(&self, z: usize) -> CovMatrix {
        CovMatrix {
            entries: self.entries.clone().remove_row(z).remove_column(z),
            layer: self.layer,
        }
    }

    /// Principal submatrix on `idx`.
    pub fn select(&self, idx: &[usize]) -> CovMatrix {
        let m = DMatrix::from_fn(idx.len(), idx.len(), |i, j| self.entries[(idx[i], idx[j])]);
        CovMatrix {
            entries: m,
            layer: self.layer,
        }
    }

    /// CSV: a `k,layer` header, one data row with those values, then `k`
    /// rows of the matrix.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "k,layer")?;
        writeln!(w, "{},{}", self.k(), self.layer)?;
        for r in 0..self.k() {
            let row: Vec<String> = self.entries.row(r).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| NngpError::io(path, e))?;
        Self::parse_csv(&text).map_err(|msg| NngpError::Format {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn parse_csv(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("k,layer") {
            return Err("expected header `k,layer`".into());
        }
        let meta = lines.next().ok_or("missing `k,layer` values")?;
        let mut it = meta.split(',').map(str::trim);
        let k: usize = it.next().and_then(|v| v.parse().ok()).ok_or("bad k")?;
        let layer: usize = it.next().and_then(|v| v.parse().ok()).ok_or("bad layer")?;
        let mut rows = Vec::with_capacity(k);
        for line in lines {
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|v| v.trim().parse::<f64>()).collect();
            rows.push(row.map_err(|e| e.to_string())?);
        }
        if rows.len() != k {
            return Err(format!("expected {k} matrix rows, found {}", rows.len()));
        }
        CovMatrix::from_rows(&rows, layer).map_err(|e| e.to_string())
    }
}

/// `Σ(1)_rs = σ_b² + σ_ω² ⟨x_r, x_s⟩`, computed exactly.
pub fn base_kernel(inputs: &InputSet, params: &NetworkParams) -> CovMatrix {
    let k = inputs.len();
    let m = DMatrix::from_fn(k, k, |r, s| {
        let dot: f64 = inputs
            .input(r)
            .iter()
            .zip(inputs.input(s))
            .map(|(a, b)| a * b)
            .sum();
        params.sigma_b_sq + params.sigma_w_sq * dot
    });
    CovMatrix { entries: m, layer: 1 }
}

/// Result of [`psd_repair`].
#[derive(Debug, Clone, PartialEq)]
pub struct Repaired {
    pub matrix: CovMatrix,
    /// Largest amount by which an eigenvalue was raised (0 if untouched).
    pub clipped: f64,
}

/// Clip the eigenvalues of a symmetric matrix from below at
/// `rel_floor · max diagonal`. A matrix that already satisfies the floor is
/// returned unchanged.
pub fn psd_repair(m: &DMatrix<f64>, rel_floor: f64, layer: usize) -> Result<Repaired> {
    if !m.is_square() {
        return Err(NngpError::domain("psd_repair needs a square matrix"));
    }
    let asym = relative_asymmetry(m);
    if asym > REPAIR_SYMMETRY_TOL {
        return Err(NngpError::domain(format!(
            "matrix asymmetric beyond tolerance (relative {asym:e})"
        )));
    }
    let sym = (m + m.transpose()) * 0.5;
    let floor = rel_floor * max_diagonal(&sym);
    let eig = SymmetricEigen::new(sym.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min >= floor {
        return Ok(Repaired {
            matrix: CovMatrix {
                entries: sym,
                layer,
            },
            clipped: 0.0,
        });
    }
    let clipped = floor - min;
    let lam = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&lam) * v.transpose();
    let rebuilt = (&rebuilt + rebuilt.transpose()) * 0.5;
    Ok(Repaired {
        matrix: CovMatrix {
            entries: rebuilt,
            layer,
        },
        clipped,
    })
}

/// Evaluates `E[φ(U) φ(V)]` for bivariate normals; holds the quadrature
/// rules so repeated calls within a layer reuse them.
#[derive(Debug)]
pub struct BivariateIntegrator {
    rule: GaussianRule,
    floor: f64,
}

impl BivariateIntegrator {
    pub fn new(quad: &QuadratureSpec) -> Result<Self> {
        quad.validate()?;
        Ok(BivariateIntegrator {
            rule: GaussianRule::new(quad.nodes_per_axis)?,
            floor: quad.degenerate_variance_floor,
        })
    }

    /// `E[φ(U) φ(V)]` with `V = ρ (σ_v/σ_u) U + σ_v sqrt(1-ρ²) Z`.
    pub fn expect_product(&self, var_u: f64, var_v: f64, cov_uv: f64, act: &Activation) -> Result<f64> {
        if !(var_u.is_finite() && var_v.is_finite() && cov_uv.is_finite()) {
            return Err(NngpError::domain("bivariate moments must be finite"));
        }
        if var_u < -self.floor || var_v < -self.floor {
            return Err(NngpError::domain(format!(
                "negative variance ({var_u}, {var_v})"
            )));
        }
        let phi = |s: f64| act.apply(s);
        let deg_u = var_u < self.floor;
        let deg_v = var_v < self.floor;
        match (deg_u, deg_v) {
            (true, true) => return Ok(phi(0.0) * phi(0.0)),
            (true, false) | (false, true) => {
                let sd = if deg_u { var_v.sqrt() } else { var_u.sqrt() };
                let mut shape = PanelShape::new();
                scaled_features(&mut shape, act, sd);
                return Ok(phi(0.0) * self.rule.expect(|z| phi(sd * z), &shape));
            }
            (false, false) => {}
        }
        let su = var_u.sqrt();
        let sv = var_v.sqrt();
        let mut rho = cov_uv / (su * sv);
        if rho.abs() > 1.0 {
            if rho.abs() - 1.0 > CORRELATION_SLACK {
                return Err(NngpError::domain(format!(
                    "covariance [[{var_u}, {cov_uv}], [{cov_uv}, {var_v}]] is indefinite (rho = {rho})"
                )));
            }
            rho = rho.signum();
        }
        let c = (1.0 - rho * rho).max(0.0).sqrt();
        let mut outer = PanelShape::new();
        scaled_features(&mut outer, act, su);
        if c == 0.0 {
            scaled_features(&mut outer, act, sv * rho);
            return Ok(self.rule.expect(|z| phi(su * z) * phi(sv * rho * z), &outer));
        }
        // Conditioned on z1, V is smooth in z1 on the scale c / |ρ| around
        // each projected kink of φ(V).
        if rho != 0.0 && !act.is_polynomial() {
            let width = c / rho.abs();
            for &b in act.kinks() {
                outer.transition(b / (sv * rho), width);
            }
            if let Some(r) = act.analytic_radius() {
                outer.radius(r / (sv * rho.abs()));
            }
        }
        let value = self.rule.expect(
            |z1| {
                let a = phi(su * z1);
                if a == 0.0 {
                    return 0.0;
                }
                let shift = rho * z1;
                let mut inner = PanelShape::new();
                if !act.is_polynomial() {
                    inner.composite();
                    inner.kinks(act.kinks().iter().map(|b| (b / sv - shift) / c));
                    if let Some(r) = act.analytic_radius() {
                        inner.radius(r / (sv * c));
                    }
                }
                a * self.rule.expect(|z2| phi(sv * (shift + c * z2)), &inner)
            },
            &outer,
        );
        Ok(value)
    }
}

/// Record the rough spots of `z ↦ φ(scale · z)`.
fn scaled_features(shape: &mut PanelShape, act: &Activation, scale: f64) {
    if act.is_polynomial() {
        return;
    }
    shape.composite();
    shape.kinks(act.kinks().iter().map(|b| b / scale));
    if let Some(r) = act.analytic_radius() {
        shape.radius(r / scale.abs());
    }
}

/// `E[φ(U) φ(V)]` for `(U, V) ~ N₂(0, [[var_u, cov_uv], [cov_uv, var_v]])`.
pub fn bivariate_expectation(
    var_u: f64,
    var_v: f64,
    cov_uv: f64,
    act: &Activation,
    quad: &QuadratureSpec,
) -> Result<f64> {
    BivariateIntegrator::new(quad)?.expect_product(var_u, var_v, cov_uv, act)
}

/// Kernel recursion driver with an explicit execution strategy and
/// bookkeeping of PSD repairs.
#[derive(Debug)]
pub struct KernelRecursion<'a> {
    act: &'a Activation,
    params: NetworkParams,
    integrator: BivariateIntegrator,
    exec: Exec,
}

/// One recursion step's output plus how much repair it needed.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutcome {
    pub cov: CovMatrix,
    pub clipped: f64,
}

impl<'a> KernelRecursion<'a> {
    pub fn new(act: &'a Activation, params: NetworkParams, quad: &QuadratureSpec, exec: Exec) -> Result<Self> {
        params.validate()?;
        Ok(KernelRecursion {
            act,
            params,
            integrator: BivariateIntegrator::new(quad)?,
            exec,
        })
    }

    /// `Σ(l)` from `Σ(l-1)`. Entries are independent and are evaluated
    /// through [`Exec`]; each entry has a fixed summation order.
    pub fn step(&self, prev: &CovMatrix) -> Result<LayerOutcome> {
        let k = prev.k();
        let pairs: Vec<(usize, usize)> = (0..k).flat_map(|r| (r..k).map(move |s| (r, s))).collect();
        let p = prev.entries();
        let values = self.exec.map_range(pairs.len(), |idx| {
            let (r, s) = pairs[idx];
            self.integrator
                .expect_product(p[(r, r)], p[(s, s)], p[(r, s)], self.act)
        });
        let mut m = DMatrix::zeros(k, k);
        for (&(r, s), v) in pairs.iter().zip(values) {
            let v = self.params.sigma_b_sq + self.params.sigma_w_sq * v?;
            m[(r, s)] = v;
            m[(s, r)] = v;
        }
        let layer = prev.layer() + 1;
        if m.clone().cholesky().is_some() {
            return Ok(LayerOutcome {
                cov: CovMatrix { entries: m, layer },
                clipped: 0.0,
            });
        }
        let repaired = psd_repair(&m, 0.0, layer)?;
        let scale = max_diagonal(&m);
        if repaired.clipped > INDEFINITE_TOL * scale {
            return Err(NngpError::Numeric(format!(
                "layer {layer} kernel is indefinite: eigenvalue {:e} below zero (max diagonal {scale:e})",
                repaired.clipped
            )));
        }
        Ok(LayerOutcome {
            cov: repaired.matrix,
            clipped: repaired.clipped,
        })
    }

    /// `Σ(1), …, Σ(L)` together with the repair magnitude of each layer.
    pub fn run(&self, inputs: &InputSet) -> Result<Vec<LayerOutcome>> {
        let mut out = Vec::with_capacity(self.params.depth);
        out.push(LayerOutcome {
            cov: base_kernel(inputs, &self.params),
            clipped: 0.0,
        });
        for _ in 1..self.params.depth {
            let next = self.step(&out.last().expect("non-empty").cov)?;
            out.push(next);
        }
        Ok(out)
    }
}

/// `Σ(l) = σ_b² + σ_ω² E[φ(U)φ(V)]` entrywise from `prev = Σ(l-1)`.
pub fn layer_step(
    prev: &CovMatrix,
    act: &Activation,
    params: &NetworkParams,
    quad: &QuadratureSpec,
) -> Result<CovMatrix> {
    Ok(KernelRecursion::new(act, *params, quad, Exec::default())?
        .step(prev)?
        .cov)
}

/// `[Σ(1), …, Σ(L)]`.
pub fn kernel_at_depth(
    inputs: &InputSet,
    act: &Activation,
    params: &NetworkParams,
    quad: &QuadratureSpec,
) -> Result<Vec<CovMatrix>> {
    Ok(KernelRecursion::new(act, *params, quad, Exec::default())?
        .run(inputs)?
        .into_iter()
        .map(|o| o.cov)
        .collect())
}

/// `C_θ = E[|N(0,1)|^{2θ}] = (2θ-1)!!`; the empty product 1 for θ = 0.
pub fn abs_normal_moment(theta: u32) -> f64 {
    (1..=theta).map(|i| (2 * i - 1) as f64).product()
}

/// `H^(l) = C_θ^l (σ_ω²)^{lθ} (L_φ²)^{(l-1)θ}`, the width-uniform bound on
/// `E|f(y) - f(x)|^{2θ} / ‖y - x‖^{2θ}` at layer `l`.
pub fn holder_moment_bound(theta: u32, layer: usize, params: &NetworkParams, lipschitz: f64) -> Result<f64> {
    if layer < 1 {
        return Err(NngpError::domain("layer must be >= 1"));
    }
    if theta < 1 {
        return Err(NngpError::domain("theta must be >= 1"));
    }
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(NngpError::domain(format!("Lipschitz constant must be > 0, got {lipschitz}")));
    }
    let l = layer as f64;
    let t = theta as f64;
    let log_h = l * abs_normal_moment(theta).ln()
        + l * t * params.sigma_w_sq.ln()
        + (l - 1.0) * t * (lipschitz * lipschitz).ln();
    let h = abs_normal_moment(theta).powf(l)
        * params.sigma_w_sq.powf(l * t)
        * (lipschitz * lipschitz).powf((l - 1.0) * t);
    if !h.is_finite() || log_h > f64::MAX.ln() {
        return Err(NngpError::Range(format!(
            "H^({layer}) overflows for theta={theta}: exponent l*theta = {}",
            layer as u64 * theta as u64
        )));
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::f64::consts::PI;

    fn q() -> QuadratureSpec {
        QuadratureSpec::default()
    }

    fn params(depth: usize, w: f64, b: f64) -> NetworkParams {
        NetworkParams { depth, sigma_w_sq: w, sigma_b_sq: b }
    }

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        let k = rows.len();
        DMatrix::from_row_slice(k, k, &rows.concat())
    }

    #[test]
    fn params_validation() {
        assert!(NetworkParams::new(0, 1.0, 1.0).is_err());
        assert!(NetworkParams::new(1, 0.0, 1.0).is_err());
        assert!(NetworkParams::new(1, 1.0, -1.0).is_err());
        assert!(NetworkParams::new(1, 1.0, 0.0).is_ok());
        assert!(NetworkParams::new(3, 2.0, 0.1).is_ok());
    }

    #[test]
    fn base_kernel_examples() {
        let x = InputSet::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = base_kernel(&x, &params(1, 2.0, 1.0));
        assert_eq!(s.entries(), &mat(&[&[3.0, 1.0], &[1.0, 3.0]]));
        assert_eq!(s.layer(), 1);

        let zero = InputSet::new(vec![vec![0.0; 5]]).unwrap();
        assert_eq!(base_kernel(&zero, &params(1, 3.0, 0.5)).get(0, 0), 0.5);

        let ones = InputSet::new(vec![vec![1.0, 1.0]]).unwrap();
        assert_eq!(base_kernel(&ones, &params(1, 1.0, 0.0)).get(0, 0), 2.0);
    }

    #[test]
    fn duplicate_inputs_rejected() {
        let err = InputSet::new(vec![vec![1.0, 2.0], vec![0.0, 0.0], vec![1.0, 2.0]]);
        assert!(matches!(err, Err(NngpError::Domain(_))));
        assert!(InputSet::new(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(InputSet::new(vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn bivariate_closed_values() {
        let id = Activation::identity();
        let relu = Activation::relu();
        assert_relative_eq!(bivariate_expectation(1.0, 1.0, 0.5, &id, &q()).unwrap(), 0.5, epsilon = 1e-14);
        let r0 = bivariate_expectation(1.0, 1.0, 0.0, &relu, &q()).unwrap();
        assert_abs_diff_eq!(r0, 1.0 / (2.0 * PI), epsilon = 1e-9);
        let r1 = bivariate_expectation(1.0, 1.0, 1.0, &relu, &q()).unwrap();
        assert_abs_diff_eq!(r1, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn bivariate_relu_matches_arc_cosine_formula() {
        // test-only oracle: E[relu(U) relu(V)] for unit variances is
        // (sqrt(1-ρ²) + (π - acos ρ) ρ) / (2π)
        let relu = Activation::relu();
        for &rho in &[-0.999f64, -0.9, -0.3, 0.0, 0.2, 0.5, 0.9, 0.99, 0.999_999] {
            let exact = ((1.0 - rho * rho).sqrt() + (PI - f64::acos(rho)) * rho) / (2.0 * PI);
            let got = bivariate_expectation(1.0, 1.0, rho, &relu, &q()).unwrap();
            assert_abs_diff_eq!(got, exact, epsilon = 1e-9);
        }
        // unequal variances scale by sqrt(var_u var_v)
        let got = bivariate_expectation(4.0, 0.25, 0.5, &relu, &q()).unwrap();
        let rho: f64 = 0.5;
        let exact = ((1.0 - rho * rho).sqrt() + (PI - rho.acos()) * rho) / (2.0 * PI);
        assert_abs_diff_eq!(got, exact, epsilon = 1e-9);
    }

    #[test]
    fn bivariate_erf_matches_arcsine_formula() {
        // E[erf(U) erf(V)] = (2/π) asin(2c / sqrt((1 + 2a)(1 + 2b)))
        let erf = Activation::erf();
        for &(a, b, c) in &[(1.0f64, 1.0f64, 0.5f64), (9.0, 4.0, -5.9), (0.01, 2.0, 0.1), (25.0, 25.0, 24.99)] {
            let exact = 2.0 / PI * (2.0 * c / ((1.0 + 2.0 * a) * (1.0 + 2.0 * b)).sqrt()).asin();
            let got = bivariate_expectation(a, b, c, &erf, &q()).unwrap();
            assert_abs_diff_eq!(got, exact, epsilon = 1e-11);
        }
    }

    #[test]
    fn bivariate_degenerate_and_clamped() {
        let tanh = Activation::tanh();
        let relu = Activation::relu();
        // U is the point mass at 0: tanh(0) = 0
        assert_eq!(bivariate_expectation(0.0, 1.0, 0.0, &tanh, &q()).unwrap(), 0.0);
        // shifted table with φ(0) = 1 exercises the 1-D reduction
        let t = crate::activation::ActivationTable::new(vec![-1.0, 1.0], vec![0.0, 2.0]).unwrap();
        let act = Activation::custom(t, Some(1.0), crate::activation::Envelope::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        // φ(s) = s + 1, so E[φ(0) φ(V)] = 1
        assert_abs_diff_eq!(bivariate_expectation(1e-14, 2.0, 0.0, &act, &q()).unwrap(), 1.0, epsilon = 1e-12);
        // correlation a hair above 1 is clamped, well above is an error
        let just_over = 1.0 + 1e-10;
        assert_abs_diff_eq!(bivariate_expectation(1.0, 1.0, just_over, &relu, &q()).unwrap(), 0.5, epsilon = 1e-9);
        assert!(matches!(
            bivariate_expectation(1.0, 1.0, 1.01, &relu, &q()),
            Err(NngpError::Domain(_))
        ));
        assert!(bivariate_expectation(-1.0, 1.0, 0.0, &relu, &q()).is_err());
    }

    #[test]
    fn node_doubling_is_stable() {
        let fine = QuadratureSpec { nodes_per_axis: 128, ..q() };
        for act in [Activation::relu(), Activation::tanh()] {
            for &(vu, vv, c) in &[(1.0, 1.0, 0.5), (2.3, 0.7, -0.9), (0.4, 3.0, 1.08), (1.0, 1.0, 0.99)] {
                let a = bivariate_expectation(vu, vv, c, &act, &q()).unwrap();
                let b = bivariate_expectation(vu, vv, c, &act, &fine).unwrap();
                assert!((a - b).abs() < 1e-8, "{act} {vu} {vv} {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn layer_step_examples() {
        let id = Activation::identity();
        let relu = Activation::relu();
        let prev = CovMatrix::new(mat(&[&[1.0, 0.5], &[0.5, 1.0]]), 1).unwrap();
        let next = KernelRecursion::new(&id, params(2, 1.0, 0.0), &q(), Exec::Sequential)
            .unwrap()
            .step(&prev)
            .unwrap()
            .cov;
        assert!((next.entries() - prev.entries()).amax() < 1e-14);
        assert_eq!(next.layer(), 2);

        let eye = CovMatrix::new(DMatrix::identity(2, 2), 1).unwrap();
        let next = KernelRecursion::new(&relu, params(2, 1.0, 0.0), &q(), Exec::Sequential)
            .unwrap()
            .step(&eye)
            .unwrap()
            .cov;
        assert_abs_diff_eq!(next.get(0, 0), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(next.get(0, 1), 1.0 / (2.0 * PI), epsilon = 1e-9);

        let three = CovMatrix::new(mat(&[&[3.0]]), 1).unwrap();
        let next = layer_step(&three, &id, &params(2, 2.0, 1.0), &q()).unwrap();
        assert_abs_diff_eq!(next.get(0, 0), 7.0, epsilon = 1e-12);
    }

    #[test]
    fn identity_recursion_unrolls() {
        let x = InputSet::new(vec![vec![1.0, -0.5, 2.0], vec![0.3, 0.3, 0.0], vec![-1.0, 0.0, 1.0]]).unwrap();
        let c = 0.7;
        let ks = kernel_at_depth(&x, &Activation::identity(), &params(5, 1.0, c), &q()).unwrap();
        assert_eq!(ks.len(), 5);
        assert_eq!(ks[0], base_kernel(&x, &params(5, 1.0, c)));
        for (l, s) in ks.iter().enumerate() {
            let expected = ks[0].entries().add_scalar(l as f64 * c);
            assert!((s.entries() - expected).amax() < 1e-12 * ks[0].max_diagonal() * 5.0);
            assert_eq!(s.layer(), l + 1);
        }
    }

    #[test]
    fn psd_repair_examples() {
        let eye = DMatrix::<f64>::identity(2, 2);
        let r = psd_repair(&eye, 0.0, 1).unwrap();
        assert_eq!(r.matrix.entries(), &eye);
        assert_eq!(r.clipped, 0.0);

        let ones = DMatrix::from_element(2, 2, 1.0);
        let r = psd_repair(&ones, 0.0, 1).unwrap();
        assert!((r.matrix.entries() - &ones).amax() < 1e-15);

        // test-only oracle: eigenpairs of [[1, 1+e], [1+e, 1]] are 2+e on
        // (1,1)/√2 and -e on (1,-1)/√2; clipping -e to 0 leaves
        // (2+e)/2 · all-ones.
        let e = 1e-10;
        let bad = mat(&[&[1.0, 1.0 + e], &[1.0 + e, 1.0]]);
        let r = psd_repair(&bad, 0.0, 1).unwrap();
        assert_relative_eq!(r.clipped, e, max_relative = 1e-4);
        let target = (2.0 + e) / 2.0;
        for v in r.matrix.entries().iter() {
            assert_abs_diff_eq!(*v, target, epsilon = 1e-15);
        }

        let asym = mat(&[&[1.0, 0.5], &[0.4, 1.0]]);
        assert!(matches!(psd_repair(&asym, 0.0, 1), Err(NngpError::Domain(_))));
    }

    #[test]
    fn abs_normal_moment_values() {
        assert_eq!(abs_normal_moment(0), 1.0);
        assert_eq!(abs_normal_moment(1), 1.0);
        assert_eq!(abs_normal_moment(2), 3.0);
        assert_eq!(abs_normal_moment(3), 15.0);
        assert_eq!(abs_normal_moment(4), 105.0);
    }

    #[test]
    fn holder_moment_bound_values() {
        assert_relative_eq!(holder_moment_bound(1, 3, &params(3, 2.0, 1.0), 1.0).unwrap(), 8.0, epsilon = 1e-12);
        for l in 1..6 {
            assert_relative_eq!(holder_moment_bound(1, l, &params(6, 1.0, 1.0), 1.0).unwrap(), 1.0);
        }
        assert_relative_eq!(holder_moment_bound(2, 2, &params(2, 1.0, 1.0), 2.0).unwrap(), 144.0, epsilon = 1e-10);
        assert!(matches!(
            holder_moment_bound(4, 400, &params(2, 10.0, 1.0), 3.0),
            Err(NngpError::Range(_))
        ));
        assert!(holder_moment_bound(1, 0, &params(2, 1.0, 1.0), 1.0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = CovMatrix::new(mat(&[&[2.0, 0.1 + 0.2], &[0.1 + 0.2, 1.0 / 3.0]]), 4).unwrap();
        let text = m.to_csv_string();
        assert!(text.starts_with("k,layer\n2,4\n"));
        assert_eq!(CovMatrix::parse_csv(&text).unwrap(), m);
        assert!(CovMatrix::parse_csv("2,4\n1,0\n0,1\n").is_err());
    }
}
