//! Scalar nonlinearities with their Lipschitz constants and polynomial
//! envelopes `|φ(s)| ≤ a + b|s|^m`.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NngpError, Result};

/// Growth bound `|φ(s)| ≤ a + b|s|^m` with `a, b > 0` and `m ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub a: f64,
    pub b: f64,
    pub m: f64,
}

impl Envelope {
    pub fn new(a: f64, b: f64, m: f64) -> Result<Self> {
        if !(a > 0.0 && b > 0.0 && m >= 1.0) || !(a.is_finite() && b.is_finite() && m.is_finite())
        {
            return Err(NngpError::domain(format!(
                "envelope requires a > 0, b > 0, m >= 1 (got a={a}, b={b}, m={m})"
            )));
        }
        Ok(Envelope { a, b, m })
    }

    pub fn bound(&self, s: f64) -> f64 {
        self.a + self.b * s.abs().powf(self.m)
    }
}

/// Piecewise-linear activation given by samples on a strictly increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTable {
    s: Vec<f64>,
    phi: Vec<f64>,
}

impl ActivationTable {
    pub fn new(s: Vec<f64>, phi: Vec<f64>) -> Result<Self> {
        if s.len() != phi.len() {
            return Err(NngpError::domain("table columns differ in length"));
        }
        if s.len() < 2 {
            return Err(NngpError::domain("table needs at least two rows"));
        }
        if s.iter().chain(&phi).any(|v| !v.is_finite()) {
            return Err(NngpError::domain("table contains non-finite values"));
        }
        if s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(NngpError::domain("table grid must be strictly increasing"));
        }
        Ok(ActivationTable { s, phi })
    }

    /// Load a two-column `s,phi_s` CSV with a header row.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let fmt_err = |msg: String| NngpError::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| fmt_err(e.to_string()))?;
        let headers = reader.headers().map_err(|e| fmt_err(e.to_string()))?.clone();
        if headers.len() != 2 || &headers[0] != "s" || &headers[1] != "phi_s" {
            return Err(fmt_err(format!(
                "expected header `s,phi_s`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let (mut s, mut phi) = (Vec::new(), Vec::new());
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| fmt_err(e.to_string()))?;
            let parse = |i: usize| {
                rec.get(i)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| fmt_err(format!("row {}: bad number in column {}", line + 2, i + 1)))
            };
            s.push(parse(0)?);
            phi.push(parse(1)?);
        }
        Self::new(s, phi).map_err(|e| fmt_err(e.to_string()))
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.s.len();
        let seg = match self.s.partition_point(|&g| g <= x) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        };
        let (s0, s1) = (self.s[seg], self.s[seg + 1]);
        let (p0, p1) = (self.phi[seg], self.phi[seg + 1]);
        p0 + (p1 - p0) * (x - s0) / (s1 - s0)
    }

    pub fn grid(&self) -> &[f64] {
        &self.s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ActivationKind {
    Identity,
    Relu,
    Tanh,
    Erf,
    Table(ActivationTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Activation {
    kind: ActivationKind,
    lipschitz: Option<f64>,
    envelope: Envelope,
}

impl Activation {
    pub fn identity() -> Self {
        Self::builtin(ActivationKind::Identity, 1.0, Envelope { a: 1e-6, b: 1.0, m: 1.0 })
    }

    pub fn relu() -> Self {
        Self::builtin(ActivationKind::Relu, 1.0, Envelope { a: 1e-6, b: 1.0, m: 1.0 })
    }

    pub fn tanh() -> Self {
        Self::builtin(ActivationKind::Tanh, 1.0, Envelope { a: 1.0, b: 1e-6, m: 1.0 })
    }

    pub fn erf() -> Self {
        Self::builtin(
            ActivationKind::Erf,
            2.0 / PI.sqrt(),
            Envelope { a: 1.0, b: 1e-6, m: 1.0 },
        )
    }

    fn builtin(kind: ActivationKind, lipschitz: f64, envelope: Envelope) -> Self {
        Activation {
            kind,
            lipschitz: Some(lipschitz),
            envelope,
        }
    }

    /// A tabulated activation. Without a declared Lipschitz constant it is
    /// usable only for finite-dimensional (fixed input set) experiments.
    pub fn custom(table: ActivationTable, lipschitz: Option<f64>, envelope: Envelope) -> Result<Self> {
        if let Some(l) = lipschitz {
            if !(l.is_finite() && l >= 0.0) {
                return Err(NngpError::domain(format!("Lipschitz constant must be >= 0, got {l}")));
            }
        }
        Ok(Activation {
            kind: ActivationKind::Table(table),
            lipschitz,
            envelope,
        })
    }

    /// Look up a built-in by name.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Self::identity()),
            "relu" => Some(Self::relu()),
            "tanh" => Some(Self::tanh()),
            "erf" => Some(Self::erf()),
            _ => None,
        }
    }

    /// Same nonlinearity with a different declared envelope.
    pub fn with_envelope(mut self, envelope: Envelope) -> Self {
        self.envelope = envelope;
        self
    }

    pub fn kind(&self) -> &ActivationKind {
        &self.kind
    }

    pub fn lipschitz_constant(&self) -> Option<f64> {
        self.lipschitz
    }

    pub fn envelope(&self) -> Envelope {
        self.envelope
    }

    /// True when only finite-dimensional limits are covered (no Lipschitz
    /// constant declared).
    pub fn envelope_only(&self) -> bool {
        self.lipschitz.is_none()
    }

    /// `φ(s)` without the finiteness check, for hot loops whose inputs are
    /// already known to be finite.
    #[inline]
    pub fn apply(&self, s: f64) -> f64 {
        match &self.kind {
            ActivationKind::Identity => s,
            ActivationKind::Relu => s.max(0.0),
            ActivationKind::Tanh => s.tanh(),
            ActivationKind::Erf => libm::erf(s),
            ActivationKind::Table(t) => t.eval(s),
        }
    }

    /// Points where `φ` is not differentiable; quadrature splits there.
    pub fn kinks(&self) -> &[f64] {
        match &self.kind {
            ActivationKind::Relu => &[0.0],
            ActivationKind::Table(t) => t.grid(),
            _ => &[],
        }
    }

    /// Distance from the real axis to the nearest complex singularity of
    /// `φ`, or `None` for polynomials and piecewise-linear functions.
    /// For erf (entire, but growing like `exp(y²)` off the axis) this is
    /// the width over which the function saturates.
    pub fn analytic_radius(&self) -> Option<f64> {
        match self.kind {
            ActivationKind::Tanh => Some(std::f64::consts::FRAC_PI_2),
            ActivationKind::Erf => Some(1.0),
            _ => None,
        }
    }

    /// Whether `φ` is a polynomial (Gauss–Hermite is exact then).
    pub fn is_polynomial(&self) -> bool {
        matches!(self.kind, ActivationKind::Identity)
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        if !s.is_finite() {
            return Err(NngpError::domain(format!("activation input must be finite, got {s}")));
        }
        Ok(self.apply(s))
    }

    /// Check `|φ(s)| ≤ a + b|s|^m` on `grid`.
    pub fn envelope_check(&self, grid: &[f64]) -> Result<EnvelopeReport> {
        if grid.is_empty() {
            return Err(NngpError::domain("envelope grid is empty"));
        }
        let mut worst = EnvelopeReport {
            holds: true,
            worst_point: grid[0],
            worst_ratio: f64::NEG_INFINITY,
        };
        for &s in grid {
            let ratio = self.eval(s)?.abs() / self.envelope.bound(s);
            if ratio > worst.worst_ratio {
                worst.worst_ratio = ratio;
                worst.worst_point = s;
            }
        }
        worst.holds = worst.worst_ratio <= 1.0;
        Ok(worst)
    }

    /// Largest difference quotient over adjacent points of a sorted grid.
    pub fn lipschitz_probe(&self, grid: &[f64]) -> Result<f64> {
        if grid.len() < 2 {
            return Err(NngpError::domain("Lipschitz probe needs at least two grid points"));
        }
        let mut best: f64 = 0.0;
        for w in grid.windows(2) {
            if w[1] == w[0] {
                return Err(NngpError::domain(format!("duplicate grid point {}", w[0])));
            }
            if w[1] < w[0] {
                return Err(NngpError::domain("Lipschitz probe grid must be sorted"));
            }
            let q = (self.eval(w[1])? - self.eval(w[0])?).abs() / (w[1] - w[0]);
            best = best.max(q);
        }
        Ok(best)
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ActivationKind::Identity => f.write_str("identity"),
            ActivationKind::Relu => f.write_str("relu"),
            ActivationKind::Tanh => f.write_str("tanh"),
            ActivationKind::Erf => f.write_str("erf"),
            ActivationKind::Table(_) => f.write_str("custom-table"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvelopeReport {
    pub holds: bool,
    pub worst_point: f64,
    /// `|φ(s)| / (a + b|s|^m)` at `worst_point`.
    pub worst_ratio: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        let n = ((hi - lo) / step).round() as usize;
        (0..=n).map(|i| lo + i as f64 * step).collect()
    }

    #[test]
    fn eval_builtins() {
        assert_eq!(Activation::relu().eval(-2.0).unwrap(), 0.0);
        assert_eq!(Activation::identity().eval(3.5).unwrap(), 3.5);
        assert_eq!(Activation::tanh().eval(0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(Activation::erf().eval(1.0).unwrap(), 0.842_700_792_949_714_9, epsilon = 1e-14);
    }

    #[test]
    fn eval_rejects_non_finite() {
        assert!(matches!(Activation::relu().eval(f64::NAN), Err(NngpError::Domain(_))));
        assert!(matches!(Activation::tanh().eval(f64::INFINITY), Err(NngpError::Domain(_))));
    }

    #[test]
    fn table_interpolates_and_extrapolates() {
        let t = ActivationTable::new(vec![-1.0, 0.0, 2.0], vec![1.0, 0.0, 4.0]).unwrap();
        let act = Activation::custom(t, Some(2.0), Envelope::new(1.0, 2.0, 1.0).unwrap()).unwrap();
        assert_abs_diff_eq!(act.eval(1.0).unwrap(), 2.0);
        assert_abs_diff_eq!(act.eval(-0.5).unwrap(), 0.5);
        // end slopes: -1 on the left, 2 on the right
        assert_abs_diff_eq!(act.eval(-3.0).unwrap(), 3.0);
        assert_abs_diff_eq!(act.eval(5.0).unwrap(), 10.0);
        assert_abs_diff_eq!(act.eval(2.0).unwrap(), 4.0);
    }

    #[test]
    fn table_rejects_unsorted_grid() {
        assert!(ActivationTable::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(ActivationTable::new(vec![1.0, 0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn table_csv_requires_header() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.csv");
        std::fs::write(&good, "s,phi_s\n-1,0\n0,0\n1,1\n").unwrap();
        let t = ActivationTable::from_csv(&good).unwrap();
        assert_eq!(t.grid(), &[-1.0, 0.0, 1.0]);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "-1,0\n0,0\n1,1\n").unwrap();
        assert!(matches!(ActivationTable::from_csv(&bad), Err(NngpError::Format { .. })));
    }

    #[test]
    fn envelope_examples() {
        let relu = Activation::custom(
            ActivationTable::new(vec![-1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]).unwrap(),
            Some(1.0),
            Envelope::new(1.0, 1.0, 1.0).unwrap(),
        )
        .unwrap();
        assert!(relu.envelope_check(&grid(-10.0, 10.0, 0.1)).unwrap().holds);

        let ident = Activation::custom(
            ActivationTable::new(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap(),
            Some(1.0),
            Envelope::new(0.1, 0.5, 1.0).unwrap(),
        )
        .unwrap();
        let rep = ident.envelope_check(&[0.0, 0.5, 1.0]).unwrap();
        assert!(!rep.holds);
        assert_eq!(rep.worst_point, 1.0);
        assert_abs_diff_eq!(rep.worst_ratio, 1.0 / 0.6, epsilon = 1e-12);

        let mut tanh = Activation::tanh();
        tanh.envelope = Envelope { a: 1.0, b: 1e-12, m: 1.0 };
        assert!(tanh.envelope_check(&grid(-100.0, 100.0, 1.0)).unwrap().holds);
    }

    #[test]
    fn envelope_rejects_nonpositive_parameters() {
        assert!(Envelope::new(1.0, 0.0, 1.0).is_err());
        assert!(Envelope::new(0.0, 1.0, 1.0).is_err());
        assert!(Envelope::new(1.0, 1.0, 0.5).is_err());
        assert!(Activation::envelope_check(&Activation::relu(), &[]).is_err());
    }

    #[test]
    fn lipschitz_probe_examples() {
        assert_eq!(Activation::relu().lipschitz_probe(&[-1.0, 0.0, 1.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(
            Activation::identity().lipschitz_probe(&[-3.0, 0.25, 7.0]).unwrap(),
            1.0,
            epsilon = 1e-15
        );
        let dense = grid(-1e-3, 1e-3, 1e-5);
        assert_abs_diff_eq!(Activation::tanh().lipschitz_probe(&dense).unwrap(), 1.0, epsilon = 1e-4);
        assert!(Activation::relu().lipschitz_probe(&[0.0, 0.0, 1.0]).is_err());
        assert!(Activation::relu().lipschitz_probe(&[0.0]).is_err());
    }

    #[test]
    fn probe_respects_declared_constants() {
        let g = grid(-6.0, 6.0, 1e-3);
        for act in [Activation::identity(), Activation::relu(), Activation::tanh(), Activation::erf()] {
            let probe = act.lipschitz_probe(&g).unwrap();
            assert!(probe <= act.lipschitz_constant().unwrap() + 1e-9, "{act}: {probe}");
        }
    }

    #[test]
    fn canonical_envelopes_hold() {
        let g = grid(-1e3, 1e3, 0.37);
        for act in [Activation::identity(), Activation::relu(), Activation::tanh(), Activation::erf()] {
            assert!(act.envelope_check(&g).unwrap().holds, "{act}");
            let e = act.envelope();
            assert!(e.a > 0.0 && e.b > 0.0 && e.m >= 1.0);
        }
    }

    proptest! {
        #[test]
        fn builtins_are_lipschitz(s in -50.0f64..50.0, t in -50.0f64..50.0) {
            for act in [Activation::identity(), Activation::relu(), Activation::tanh(), Activation::erf()] {
                let l = act.lipschitz_constant().unwrap();
                let lhs = (act.apply(s) - act.apply(t)).abs();
                prop_assert!(lhs <= l * (s - t).abs() * (1.0 + 1e-12) + 1e-15);
            }
        }

        #[test]
        fn canonical_envelope_on_random_points(s in -1e6f64..1e6) {
            for act in [Activation::identity(), Activation::relu(), Activation::tanh(), Activation::erf()] {
                prop_assert!(act.apply(s).abs() <= act.envelope().bound(s));
            }
        }
    }
}
