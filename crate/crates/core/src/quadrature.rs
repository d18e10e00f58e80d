//! Quadrature for expectations against a standard normal.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{NngpError, Result};

/// Numerical settings for Gaussian expectations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub nodes_per_axis: usize,
    /// Variances below this are treated as a point mass at zero.
    pub degenerate_variance_floor: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            nodes_per_axis: 64,
            degenerate_variance_floor: 1e-12,
        }
    }
}

impl QuadratureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nodes_per_axis < 2 {
            return Err(NngpError::domain(format!(
                "quadrature needs at least 2 nodes per axis, got {}",
                self.nodes_per_axis
            )));
        }
        if !(self.degenerate_variance_floor >= 0.0) {
            return Err(NngpError::domain("degenerate variance floor must be >= 0"));
        }
        Ok(())
    }
}

/// Nodes `z_i` and weights `w_i` with `Σ w_i g(z_i) ≈ E[g(Z)]`, `Z ~ N(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussHermite {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussHermite {
    /// Golub–Welsch on the Jacobi matrix of the probabilists' Hermite
    /// polynomials, followed by Newton polishing of each node.
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(NngpError::domain(format!("Gauss-Hermite rule needs n >= 2, got {n}")));
        }
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            let off = (i as f64).sqrt();
            jacobi[(i, i - 1)] = off;
            jacobi[(i - 1, i)] = off;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = eig
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(j, &x)| (x, eig.eigenvectors[(0, j)].powi(2)))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

        // Newton on the orthonormal recurrence; also yields the weight as
        // 1 / Σ p_k(x)^2 which is more accurate than the eigenvector entry.
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for &(x0, w0) in &pairs {
            let mut x = x0;
            for _ in 0..4 {
                let (p, dp, _) = orthonormal_hermite(n, x);
                if dp == 0.0 {
                    break;
                }
                let step = p / dp;
                x -= step;
                if step.abs() < 1e-15 * x.abs().max(1.0) {
                    break;
                }
            }
            let (_, _, sumsq) = orthonormal_hermite(n, x);
            let w = 1.0 / sumsq;
            nodes.push(x);
            weights.push(if w.is_finite() { w } else { w0 });
        }
        // Enforce exact symmetry of the rule.
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let x = 0.5 * (nodes[j] - nodes[i]);
            let w = 0.5 * (weights[i] + weights[j]);
            nodes[i] = -x;
            nodes[j] = x;
            weights[i] = w;
            weights[j] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(GaussHermite { nodes, weights })
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E[g(Z)]` for `Z ~ N(0, 1)`.
    pub fn expect<F: Fn(f64) -> f64>(&self, g: F) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| w * g(z))
            .sum()
    }
}

/// Gauss–Legendre rule on `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on the Legendre recurrence from the Chebyshev-like
    /// initial guesses; `O(n^2)`.
    pub fn new(n: usize) -> Result<Self> {
        if n < 1 {
            return Err(NngpError::domain("Gauss-Legendre rule needs n >= 1"));
        }
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        let nf = n as f64;
        for i in 0..m {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 1.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let step = p / d;
                x -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Ok(GaussLegendre { nodes, weights })
    }

    /// `∫_lo^hi g(x) dx`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, lo: f64, hi: f64, g: F) -> f64 {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        half * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * g(mid + half * t))
            .sum::<f64>()
    }
}

/// `(P_n(x), P_n'(x))`.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Half width of the integration window in standard-normal units; the
/// mass outside is below 1.3e-15.
pub const TRUNCATION: f64 = 8.0;
/// Widest panel used by the composite rule.
pub const MAX_PANEL_WIDTH: f64 = 2.5;
const MAX_PANELS: usize = 512;

/// Where a one-dimensional integrand `g(z)` is rough, in `z` units.
///
/// * kinks: points where `g` is continuous but not differentiable;
/// * transitions `(z, w)`: smooth layers of width `w` centred at `z`;
/// * radius: distance from the real axis to the nearest singularity of
///   `g`, bounding how wide a panel may be.
///
/// An empty shape (no kinks, no transitions, infinite radius) means `g` is
/// a polynomial-growth entire function and Gauss–Hermite is used.
#[derive(Debug, Clone, Default)]
pub struct PanelShape {
    kinks: SmallVec<[f64; 8]>,
    transitions: SmallVec<[(f64, f64); 4]>,
    radius: Option<f64>,
}

impl PanelShape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn kink(&mut self, z: f64) -> &mut Self {
        self.kinks.push(z);
        self
    }

    pub fn kinks<I: IntoIterator<Item = f64>>(&mut self, zs: I) -> &mut Self {
        self.kinks.extend(zs);
        self
    }

    pub fn transition(&mut self, z: f64, width: f64) -> &mut Self {
        self.transitions.push((z, width));
        self
    }

    /// Tighten the singularity radius to `r` (ignored if not positive).
    pub fn radius(&mut self, r: f64) -> &mut Self {
        if r > 0.0 && !r.is_nan() {
            self.radius = Some(self.radius.map_or(r, |old| old.min(r)));
        }
        self
    }

    /// Forces the composite rule even without kinks or a finite radius.
    pub fn composite(&mut self) -> &mut Self {
        self.radius = Some(self.radius.unwrap_or(f64::INFINITY));
        self
    }

    fn is_hermite(&self) -> bool {
        self.kinks.is_empty() && self.transitions.is_empty() && self.radius.is_none()
    }

    fn cuts(&self) -> SmallVec<[f64; 32]> {
        let mut cuts: SmallVec<[f64; 32]> = SmallVec::new();
        let mut push = |z: f64| {
            if z.is_finite() && z.abs() < TRUNCATION {
                cuts.push(z);
            }
        };
        for &k in &self.kinks {
            push(k);
        }
        for &(z, w) in &self.transitions {
            if w.is_finite() && w > 0.0 && w < MAX_PANEL_WIDTH / 4.0 {
                for f in [-4.0, -1.0, 0.0, 1.0, 4.0] {
                    push(z + f * w);
                }
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        cuts
    }
}

/// Expectations `E[g(Z)]`, `Z ~ N(0, 1)`.
///
/// Entire integrands use Gauss–Hermite with `nodes_per_axis` nodes. Rough
/// ones (see [`PanelShape`]) use a composite Gauss–Legendre rule on
/// `[-TRUNCATION, TRUNCATION]` against the normal density, with panels cut
/// at kinks and transitions and no wider than `MAX_PANEL_WIDTH` or twice
/// the singularity radius. Each panel gets `nodes_per_axis / 4` nodes.
#[derive(Debug)]
pub struct GaussianRule {
    hermite: GaussHermite,
    panel: GaussLegendre,
}

impl GaussianRule {
    pub fn new(nodes_per_axis: usize) -> Result<Self> {
        Ok(GaussianRule {
            hermite: GaussHermite::new(nodes_per_axis)?,
            panel: GaussLegendre::new((nodes_per_axis / 4).max(4))?,
        })
    }

    pub fn hermite(&self) -> &GaussHermite {
        &self.hermite
    }

    pub fn expect<F: Fn(f64) -> f64>(&self, g: F, shape: &PanelShape) -> f64 {
        if shape.is_hermite() {
            return self.hermite.expect(g);
        }
        let max_width = match shape.radius {
            Some(r) => (2.0 * r).min(MAX_PANEL_WIDTH),
            None => MAX_PANEL_WIDTH,
        }
        .max(2.0 * TRUNCATION / MAX_PANELS as f64);
        let density = |z: f64| (-0.5 * z * z).exp() * FRAC_1_SQRT_2PI;
        let mut total = 0.0;
        let mut lo = -TRUNCATION;
        for hi in shape.cuts().into_iter().chain(std::iter::once(TRUNCATION)) {
            if hi > lo {
                let pieces = ((hi - lo) / max_width).ceil().max(1.0) as usize;
                let step = (hi - lo) / pieces as f64;
                for p in 0..pieces {
                    let a = lo + p as f64 * step;
                    let b = if p + 1 == pieces { hi } else { a + step };
                    total += self.panel.integrate(a, b, |z| g(z) * density(z));
                }
            }
            lo = hi;
        }
        total
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Orthonormal probabilists' Hermite recurrence evaluated at `x`:
/// returns `(q_n(x), q_n'(x), Σ_{k<n} q_k(x)^2)`.
fn orthonormal_hermite(n: usize, x: f64) -> (f64, f64, f64) {
    // q_{k+1} = (x q_k - sqrt(k) q_{k-1}) / sqrt(k+1)
    // q_k' = sqrt(k) q_{k-1}
    let mut q_prev = 0.0;
    let mut q = 1.0;
    let mut sumsq = 0.0;
    for k in 0..n {
        sumsq += q * q;
        let kf = k as f64;
        let next = (x * q - kf.sqrt() * q_prev) / (kf + 1.0).sqrt();
        q_prev = q;
        q = next;
    }
    let dq = (n as f64).sqrt() * q_prev;
    (q, dq, sumsq)
}
