//! Experiment configuration files (TOML).
//!
//! ```toml
//! seed = 7
//! output_dir = "out"
//!
//! [inputs]
//! matrix = [[1.0, 0.0], [0.0, 1.0]]   # one row per input; or: csv = "inputs.csv"
//!
//! [network]
//! depth = 3
//! sigma_w_sq = 2.0
//! sigma_b_sq = 0.1
//!
//! [activation]
//! kind = "relu"                         # identity | relu | tanh | erf | table
//!
//! [sampling]
//! widths = [8, 64, 512, 4096]
//! samples = 10000
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! Every problem found is reported, not just the first.

use std::path::{Path, PathBuf};

use serde::Serialize;
use toml::{Table, Value};

use crate::activation::{Activation, ActivationTable, Envelope};
use crate::error::{NngpError, Result};
use crate::gplimit::{DEFAULT_JITTER, DEFAULT_MAX_K};
use crate::kernel::{InputSet, NetworkParams};
use crate::netsim::{SamplerMode, DEFAULT_MEMORY_BUDGET};
use crate::quadrature::QuadratureSpec;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Inline,
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActivationSpec {
    pub kind: String,
    pub table: Option<PathBuf>,
    pub lipschitz: Option<f64>,
    pub envelope: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingSpec {
    pub widths: Vec<usize>,
    pub samples: usize,
    pub units: usize,
    pub mode: SamplerMode,
    pub thetas: Vec<u32>,
    /// Inputs compared by the moment-bound checks.
    pub moment_pair: Option<(usize, usize)>,
    pub memory_budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GpSpec {
    pub jitter: f64,
    pub samples: usize,
    pub units: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentSpec {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub levels: u32,
    pub paths: usize,
    pub max_k: usize,
}

/// Thresholds of the checks that decide the exit status.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckSpec {
    pub cov_decreasing: bool,
    pub rate_slope_window: Option<[f64; 2]>,
    pub ecf_max: Option<f64>,
    pub moment_bound: bool,
    pub cross_unit_corr_max: Option<f64>,
    pub ks_family_level: f64,
    pub gamma_window: [f64; 2],
    pub holder_se_max: f64,
}

impl Default for CheckSpec {
    fn default() -> Self {
        CheckSpec {
            cov_decreasing: true,
            rate_slope_window: None,
            ecf_max: Some(0.05),
            moment_bound: true,
            cross_unit_corr_max: Some(0.05),
            ks_family_level: 0.01,
            gamma_window: [0.7, 1.05],
            holder_se_max: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub input_source: InputSource,
    #[serde(serialize_with = "ser_inputs")]
    pub inputs: InputSet,
    pub params: NetworkParams,
    pub activation_spec: ActivationSpec,
    #[serde(skip)]
    pub activation: Activation,
    pub sampling: SamplingSpec,
    pub quadrature: QuadratureSpec,
    pub gp: GpSpec,
    pub segment: Option<SegmentSpec>,
    pub checks: CheckSpec,
    /// Directory relative paths were resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn ser_inputs<S: serde::Serializer>(x: &InputSet, s: S) -> std::result::Result<S::Ok, S::Error> {
    x.inputs().serialize(s)
}

pub const DEFAULT_WIDTHS: [usize; 4] = [8, 64, 512, 4096];
pub const DEFAULT_SAMPLES: usize = 10_000;
pub const DEFAULT_OUTPUT_DIR: &str = "nngp-out";

const TOP_KEYS: &[&str] = &[
    "seed",
    "output_dir",
    "inputs",
    "network",
    "activation",
    "sampling",
    "quadrature",
    "gp",
    "segment",
    "checks",
];
const INPUT_KEYS: &[&str] = &["matrix", "csv"];
const NETWORK_KEYS: &[&str] = &["depth", "sigma_w_sq", "sigma_b_sq"];
const ACTIVATION_KEYS: &[&str] = &["kind", "table", "lipschitz", "envelope"];
const SAMPLING_KEYS: &[&str] = &["widths", "samples", "units", "mode", "thetas", "moment_pair", "memory_budget"];
const QUADRATURE_KEYS: &[&str] = &["nodes_per_axis", "degenerate_variance_floor"];
const GP_KEYS: &[&str] = &["jitter", "samples", "units"];
const SEGMENT_KEYS: &[&str] = &["x0", "x1", "levels", "paths", "max_k"];
const CHECK_KEYS: &[&str] = &[
    "cov_decreasing",
    "rate_slope_window",
    "ecf_max",
    "moment_bound",
    "cross_unit_corr_max",
    "ks_family_level",
    "gamma_window",
    "holder_se_max",
];

/// Collects errors while walking the TOML tree.
struct Walker {
    errors: Vec<String>,
}

impl Walker {
    fn err(&mut self, msg: String) {
        self.errors.push(msg);
    }

    fn check_keys(&mut self, t: &Table, section: &str, allowed: &[&str]) {
        for key in t.keys() {
            if !allowed.contains(&key.as_str()) {
                let nearest = allowed
                    .iter()
                    .min_by_key(|a| strsim::levenshtein(a, key))
                    .expect("non-empty key list");
                self.err(format!(
                    "unknown key `{}` (did you mean `{}`?)",
                    qualified(section, key),
                    qualified(section, nearest)
                ));
            }
        }
    }

    fn table<'a>(&mut self, t: &'a Table, key: &str) -> Option<&'a Table> {
        match t.get(key) {
            None => None,
            Some(Value::Table(inner)) => Some(inner),
            Some(_) => {
                self.err(format!("`{key}` must be a table"));
                None
            }
        }
    }

    fn f64(&mut self, t: &Table, section: &str, key: &str) -> Option<f64> {
        let v = t.get(key)?;
        match as_f64(v) {
            Some(x) => Some(x),
            None => {
                self.err(format!("`{}` must be a number", qualified(section, key)));
                None
            }
        }
    }

    fn int(&mut self, t: &Table, section: &str, key: &str) -> Option<i64> {
        match t.get(key)? {
            Value::Integer(i) => Some(*i),
            _ => {
                self.err(format!("`{}` must be an integer", qualified(section, key)));
                None
            }
        }
    }

    fn usize(&mut self, t: &Table, section: &str, key: &str) -> Option<usize> {
        let i = self.int(t, section, key)?;
        match usize::try_from(i) {
            Ok(u) => Some(u),
            Err(_) => {
                self.err(format!("`{}` must be >= 0, got {i}", qualified(section, key)));
                None
            }
        }
    }

    fn bool(&mut self, t: &Table, section: &str, key: &str) -> Option<bool> {
        match t.get(key)? {
            Value::Boolean(b) => Some(*b),
            _ => {
                self.err(format!("`{}` must be true or false", qualified(section, key)));
                None
            }
        }
    }

    fn str<'a>(&mut self, t: &'a Table, section: &str, key: &str) -> Option<&'a str> {
        match t.get(key)? {
            Value::String(s) => Some(s),
            _ => {
                self.err(format!("`{}` must be a string", qualified(section, key)));
                None
            }
        }
    }

    fn f64_list(&mut self, t: &Table, section: &str, key: &str) -> Option<Vec<f64>> {
        let name = qualified(section, key);
        match t.get(key)? {
            Value::Array(a) => {
                let out: Option<Vec<f64>> = a.iter().map(as_f64).collect();
                if out.is_none() {
                    self.err(format!("`{name}` must be a list of numbers"));
                }
                out
            }
            _ => {
                self.err(format!("`{name}` must be a list of numbers"));
                None
            }
        }
    }

    fn usize_list(&mut self, t: &Table, section: &str, key: &str) -> Option<Vec<usize>> {
        let name = qualified(section, key);
        match t.get(key)? {
            Value::Array(a) => {
                let out: Option<Vec<usize>> = a
                    .iter()
                    .map(|v| v.as_integer().and_then(|i| usize::try_from(i).ok()))
                    .collect();
                if out.is_none() {
                    self.err(format!("`{name}` must be a list of non-negative integers"));
                }
                out
            }
            _ => {
                self.err(format!("`{name}` must be a list of non-negative integers"));
                None
            }
        }
    }

    fn pair(&mut self, t: &Table, section: &str, key: &str) -> Option<[f64; 2]> {
        let v = self.f64_list(t, section, key)?;
        if v.len() != 2 {
            self.err(format!("`{}` must have exactly two entries", qualified(section, key)));
            return None;
        }
        Some([v[0], v[1]])
    }
}

fn qualified(section: &str, key: &str) -> String {
    if section.is_empty() {
        key.to_string()
    } else {
        format!("{section}.{key}")
    }
}

fn as_f64(v: &Value) -> Option<f64> {
    match v {
        Value::Float(f) => Some(*f),
        Value::Integer(i) => Some(*i as f64),
        _ => None,
    }
}

/// Parse and validate a config file, resolving relative paths against its
/// directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| NngpError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &base)
}

/// Parse and validate config text. Relative paths resolve against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let root: Table = text
        .parse()
        .map_err(|e: toml::de::Error| NngpError::Config(vec![format!("syntax: {}", e.message())]))?;
    let mut w = Walker { errors: Vec::new() };
    w.check_keys(&root, "", TOP_KEYS);

    let seed = match root.get("seed") {
        None => {
            w.err("missing required key `seed` (runs are never seeded from the clock)".into());
            None
        }
        Some(Value::Integer(i)) if *i >= 0 => Some(*i as u64),
        Some(_) => {
            w.err("`seed` must be an integer in 0..=9223372036854775807".into());
            None
        }
    };
    let output_dir = w
        .str(&root, "", "output_dir")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR));

    let (input_source, inputs) = parse_inputs(&mut w, &root, base_dir);
    let params = parse_network(&mut w, &root);
    let (activation_spec, activation) = parse_activation(&mut w, &root, base_dir);
    let k = inputs.as_ref().map(InputSet::len);
    let sampling = parse_sampling(&mut w, &root, k);
    let quadrature = parse_quadrature(&mut w, &root);
    let gp = parse_gp(&mut w, &root);
    let segment = parse_segment(&mut w, &root, inputs.as_ref().map(InputSet::dim));
    let checks = parse_checks(&mut w, &root);

    if !w.errors.is_empty() {
        return Err(NngpError::Config(w.errors));
    }
    Ok(ExperimentConfig {
        seed: seed.expect("checked"),
        output_dir,
        input_source: input_source.expect("checked"),
        inputs: inputs.expect("checked"),
        params: params.expect("checked"),
        activation_spec: activation_spec.expect("checked"),
        activation: activation.expect("checked"),
        sampling: sampling.expect("checked"),
        quadrature,
        gp,
        segment,
        checks,
        base_dir: base_dir.to_path_buf(),
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parse_inputs(w: &mut Walker, root: &Table, base: &Path) -> (Option<InputSource>, Option<InputSet>) {
    let Some(t) = w.table(root, "inputs") else {
        if !root.contains_key("inputs") {
            w.err("missing required section `[inputs]`".into());
        }
        return (None, None);
    };
    w.check_keys(t, "inputs", INPUT_KEYS);
    let rows: Option<(InputSource, Vec<Vec<f64>>)> = match (t.get("matrix"), t.get("csv")) {
        (Some(_), Some(_)) => {
            w.err("`inputs` takes either `matrix` or `csv`, not both".into());
            None
        }
        (None, None) => {
            w.err("`inputs` needs `matrix` or `csv`".into());
            None
        }
        (Some(m), None) => {
            let rows = m.as_array().and_then(|rows| {
                rows.iter()
                    .map(|r| r.as_array().and_then(|r| r.iter().map(as_f64).collect::<Option<Vec<f64>>>()))
                    .collect::<Option<Vec<Vec<f64>>>>()
            });
            if rows.is_none() {
                w.err("`inputs.matrix` must be a list of numeric rows".into());
            }
            rows.map(|r| (InputSource::Inline, r))
        }
        (None, Some(_)) => {
            let path = PathBuf::from(w.str(t, "inputs", "csv").unwrap_or_default());
            match read_input_csv(&resolve(base, &path)) {
                Ok(rows) => Some((InputSource::Csv(path), rows)),
                Err(msg) => {
                    w.err(msg);
                    None
                }
            }
        }
    };
    let Some((source, rows)) = rows else {
        return (None, None);
    };
    match InputSet::new(rows) {
        Ok(set) => (Some(source), Some(set)),
        Err(e) => {
            w.err(format!("inputs: {e}"));
            (None, None)
        }
    }
}

/// Headerless CSV, one input per row.
fn read_input_csv(path: &Path) -> std::result::Result<Vec<Vec<f64>>, String> {
    if !path.exists() {
        return Err(format!("inputs file {} does not exist", path.display()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format!("inputs file {}: {e}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| format!("inputs file {}: {e}", path.display()))?;
        let row: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        rows.push(row.map_err(|_| format!("inputs file {}: row {} has a bad number", path.display(), i + 1))?);
    }
    Ok(rows)
}

fn parse_network(w: &mut Walker, root: &Table) -> Option<NetworkParams> {
    let Some(t) = w.table(root, "network") else {
        if !root.contains_key("network") {
            w.err("missing required section `[network]`".into());
        }
        return None;
    };
    w.check_keys(t, "network", NETWORK_KEYS);
    let depth = w.usize(t, "network", "depth");
    let sw = w.f64(t, "network", "sigma_w_sq");
    let sb = w.f64(t, "network", "sigma_b_sq");
    for (k, v) in [("depth", depth.is_some()), ("sigma_w_sq", sw.is_some()), ("sigma_b_sq", sb.is_some())] {
        if !v && !t.contains_key(k) {
            w.err(format!("missing required key `network.{k}`"));
        }
    }
    match NetworkParams::new(depth?, sw?, sb?) {
        Ok(p) => Some(p),
        Err(e) => {
            w.err(format!("network: {e}"));
            None
        }
    }
}

fn parse_activation(w: &mut Walker, root: &Table, base: &Path) -> (Option<ActivationSpec>, Option<Activation>) {
    let Some(t) = w.table(root, "activation") else {
        if !root.contains_key("activation") {
            w.err("missing required section `[activation]`".into());
        }
        return (None, None);
    };
    w.check_keys(t, "activation", ACTIVATION_KEYS);
    let Some(kind) = w.str(t, "activation", "kind").map(str::to_string) else {
        if !t.contains_key("kind") {
            w.err("missing required key `activation.kind`".into());
        }
        return (None, None);
    };
    let table = w.str(t, "activation", "table").map(PathBuf::from);
    let lipschitz = w.f64(t, "activation", "lipschitz");
    let envelope = match w.f64_list(t, "activation", "envelope") {
        Some(v) if v.len() == 3 => Some([v[0], v[1], v[2]]),
        Some(_) => {
            w.err("`activation.envelope` must be [a, b, m]".into());
            None
        }
        None => None,
    };
    let spec = ActivationSpec {
        kind: kind.clone(),
        table: table.clone(),
        lipschitz,
        envelope,
    };
    let env = match envelope.map(|[a, b, m]| Envelope::new(a, b, m)) {
        Some(Ok(e)) => Some(e),
        Some(Err(e)) => {
            w.err(format!("activation.envelope: {e}"));
            return (None, None);
        }
        None => None,
    };
    let act = if kind == "table" {
        let Some(path) = table else {
            w.err("`activation.kind = \"table\"` requires `activation.table`".into());
            return (None, None);
        };
        let Some(env) = env else {
            w.err("a table activation requires `activation.envelope = [a, b, m]`".into());
            return (None, None);
        };
        let full = resolve(base, &path);
        if !full.exists() {
            w.err(format!("activation table {} does not exist", full.display()));
            return (None, None);
        }
        ActivationTable::from_csv(&full).and_then(|tab| Activation::custom(tab, lipschitz, env))
    } else {
        match Activation::by_name(&kind) {
            None => {
                let names = ["identity", "relu", "tanh", "erf", "table"];
                let nearest = names.iter().min_by_key(|n| strsim::levenshtein(n, &kind)).expect("non-empty");
                w.err(format!("unknown activation `{kind}` (did you mean `{nearest}`?)"));
                return (None, None);
            }
            Some(builtin) => {
                if table.is_some() || lipschitz.is_some() {
                    w.err(format!(
                        "built-in activation `{kind}` takes no `table` or `lipschitz` (its constant is exact)"
                    ));
                }
                Ok(match env {
                    Some(e) => builtin.with_envelope(e),
                    None => builtin,
                })
            }
        }
    };
    match act {
        Ok(a) => (Some(spec), Some(a)),
        Err(e) => {
            w.err(format!("activation: {e}"));
            (None, None)
        }
    }
}

fn parse_sampling(w: &mut Walker, root: &Table, k: Option<usize>) -> Option<SamplingSpec> {
    let empty = Table::new();
    let t = w.table(root, "sampling").unwrap_or(&empty);
    w.check_keys(t, "sampling", SAMPLING_KEYS);
    let s = "sampling";
    let widths = w.usize_list(t, s, "widths").unwrap_or_else(|| DEFAULT_WIDTHS.to_vec());
    let mut ok = true;
    if widths.is_empty() || widths.contains(&0) {
        w.err("`sampling.widths` must be a non-empty list of widths >= 1".into());
        ok = false;
    }
    if widths.windows(2).any(|p| p[1] <= p[0]) {
        w.err(format!("widths must be strictly increasing (got {widths:?})"));
        ok = false;
    }
    let samples = w.usize(t, s, "samples").unwrap_or(DEFAULT_SAMPLES);
    let units = w.usize(t, s, "units").unwrap_or(1);
    if samples < 2 || units < 1 {
        w.err(format!("`sampling.samples` must be >= 2 and `sampling.units` >= 1 (got {samples}, {units})"));
        ok = false;
    }
    let mode = match w.str(t, s, "mode") {
        None | Some("conditional") => SamplerMode::Conditional,
        Some("explicit") => SamplerMode::Explicit,
        Some(other) => {
            w.err(format!("`sampling.mode` must be \"conditional\" or \"explicit\", got \"{other}\""));
            ok = false;
            SamplerMode::Conditional
        }
    };
    let thetas: Vec<u32> = w
        .usize_list(t, s, "thetas")
        .unwrap_or_else(|| vec![1, 2])
        .into_iter()
        .map(|v| v as u32)
        .collect();
    if thetas.iter().any(|th| !(1..=4).contains(th)) {
        w.err(format!("`sampling.thetas` entries must lie in 1..=4 (got {thetas:?})"));
        ok = false;
    }
    let moment_pair = match w.usize_list(t, s, "moment_pair") {
        Some(p) if p.len() == 2 => Some((p[0], p[1])),
        Some(_) => {
            w.err("`sampling.moment_pair` must be two input indices".into());
            ok = false;
            None
        }
        None => k.filter(|&k| k >= 2).map(|_| (0, 1)),
    };
    if let (Some((a, b)), Some(k)) = (moment_pair, k) {
        if a >= k || b >= k || a == b {
            w.err(format!("`sampling.moment_pair` must name two different inputs below k = {k}"));
            ok = false;
        }
    }
    let memory_budget = w.f64(t, s, "memory_budget").unwrap_or(DEFAULT_MEMORY_BUDGET);
    if !(memory_budget > 0.0) {
        w.err("`sampling.memory_budget` must be > 0".into());
        ok = false;
    }
    ok.then_some(SamplingSpec {
        widths,
        samples,
        units,
        mode,
        thetas,
        moment_pair,
        memory_budget,
    })
}

fn parse_quadrature(w: &mut Walker, root: &Table) -> QuadratureSpec {
    let empty = Table::new();
    let t = w.table(root, "quadrature").unwrap_or(&empty);
    w.check_keys(t, "quadrature", QUADRATURE_KEYS);
    let d = QuadratureSpec::default();
    let q = QuadratureSpec {
        nodes_per_axis: w.usize(t, "quadrature", "nodes_per_axis").unwrap_or(d.nodes_per_axis),
        degenerate_variance_floor: w
            .f64(t, "quadrature", "degenerate_variance_floor")
            .unwrap_or(d.degenerate_variance_floor),
    };
    if let Err(e) = q.validate() {
        w.err(format!("quadrature: {e}"));
    }
    q
}

fn parse_gp(w: &mut Walker, root: &Table) -> GpSpec {
    let empty = Table::new();
    let t = w.table(root, "gp").unwrap_or(&empty);
    w.check_keys(t, "gp", GP_KEYS);
    let g = GpSpec {
        jitter: w.f64(t, "gp", "jitter").unwrap_or(DEFAULT_JITTER),
        samples: w.usize(t, "gp", "samples").unwrap_or(1000),
        units: w.usize(t, "gp", "units").unwrap_or(1),
    };
    if !(g.jitter >= 0.0) {
        w.err(format!("`gp.jitter` must be >= 0, got {}", g.jitter));
    }
    if g.samples < 1 || g.units < 1 {
        w.err("`gp.samples` and `gp.units` must be >= 1".into());
    }
    g
}

fn parse_segment(w: &mut Walker, root: &Table, dim: Option<usize>) -> Option<SegmentSpec> {
    let t = w.table(root, "segment")?;
    w.check_keys(t, "segment", SEGMENT_KEYS);
    let x0 = w.f64_list(t, "segment", "x0");
    let x1 = w.f64_list(t, "segment", "x1");
    if x0.is_none() && !t.contains_key("x0") {
        w.err("missing required key `segment.x0`".into());
    }
    if x1.is_none() && !t.contains_key("x1") {
        w.err("missing required key `segment.x1`".into());
    }
    let levels = w.usize(t, "segment", "levels").unwrap_or(10);
    let paths = w.usize(t, "segment", "paths").unwrap_or(100);
    let max_k = w.usize(t, "segment", "max_k").unwrap_or(DEFAULT_MAX_K);
    let (x0, x1) = (x0?, x1?);
    let mut ok = true;
    if x0.len() != x1.len() || dim.is_some_and(|d| d != x0.len()) {
        w.err("segment endpoints must both have the input dimension".into());
        ok = false;
    }
    if x0 == x1 {
        w.err("segment endpoints must differ".into());
        ok = false;
    }
    if !(4..=30).contains(&levels) {
        w.err(format!("`segment.levels` must lie in 4..=30, got {levels}"));
        ok = false;
    } else if (1usize << levels) + 1 > max_k {
        w.err(format!(
            "segment grid of {} points exceeds `segment.max_k` = {max_k}",
            (1usize << levels) + 1
        ));
        ok = false;
    }
    if paths < 1 {
        w.err("`segment.paths` must be >= 1".into());
        ok = false;
    }
    ok.then_some(SegmentSpec {
        x0,
        x1,
        levels: levels as u32,
        paths,
        max_k,
    })
}

fn parse_checks(w: &mut Walker, root: &Table) -> CheckSpec {
    let empty = Table::new();
    let t = w.table(root, "checks").unwrap_or(&empty);
    w.check_keys(t, "checks", CHECK_KEYS);
    let d = CheckSpec::default();
    let c = "checks";
    // `false` disables an optional threshold
    let threshold = |w: &mut Walker, key: &str, default: Option<f64>| match t.get(key) {
        Some(Value::Boolean(false)) => None,
        Some(_) => w.f64(t, c, key),
        None => default,
    };
    let ecf_max = threshold(w, "ecf_max", d.ecf_max);
    let cross_unit_corr_max = threshold(w, "cross_unit_corr_max", d.cross_unit_corr_max);
    CheckSpec {
        cov_decreasing: w.bool(t, c, "cov_decreasing").unwrap_or(d.cov_decreasing),
        rate_slope_window: w.pair(t, c, "rate_slope_window").or(d.rate_slope_window),
        ecf_max,
        moment_bound: w.bool(t, c, "moment_bound").unwrap_or(d.moment_bound),
        cross_unit_corr_max,
        ks_family_level: w.f64(t, c, "ks_family_level").unwrap_or(d.ks_family_level),
        gamma_window: w.pair(t, c, "gamma_window").unwrap_or(d.gamma_window),
        holder_se_max: w.f64(t, c, "holder_se_max").unwrap_or(d.holder_se_max),
    }
}

fn float_array(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|x| Value::Float(*x)).collect())
}

fn int_array<T: Copy + Into<i64>>(v: &[T]) -> Value {
    Value::Array(v.iter().map(|x| Value::Integer((*x).into())).collect())
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

/// TOML text that parses back to `cfg` (with the same base directory).
pub fn emit_config(cfg: &ExperimentConfig) -> String {
    let mut root = Table::new();
    root.insert("seed".into(), Value::Integer(cfg.seed as i64));
    root.insert("output_dir".into(), Value::String(cfg.output_dir.display().to_string()));

    let mut inputs = Table::new();
    match &cfg.input_source {
        InputSource::Inline => {
            let rows = cfg.inputs.inputs().iter().map(|r| float_array(r)).collect();
            inputs.insert("matrix".into(), Value::Array(rows));
        }
        InputSource::Csv(p) => {
            inputs.insert("csv".into(), Value::String(p.display().to_string()));
        }
    }
    root.insert("inputs".into(), Value::Table(inputs));

    let mut net = Table::new();
    net.insert("depth".into(), int(cfg.params.depth));
    net.insert("sigma_w_sq".into(), Value::Float(cfg.params.sigma_w_sq));
    net.insert("sigma_b_sq".into(), Value::Float(cfg.params.sigma_b_sq));
    root.insert("network".into(), Value::Table(net));

    let mut act = Table::new();
    let a = &cfg.activation_spec;
    act.insert("kind".into(), Value::String(a.kind.clone()));
    if let Some(t) = &a.table {
        act.insert("table".into(), Value::String(t.display().to_string()));
    }
    if let Some(l) = a.lipschitz {
        act.insert("lipschitz".into(), Value::Float(l));
    }
    if let Some(e) = a.envelope {
        act.insert("envelope".into(), float_array(&e));
    }
    root.insert("activation".into(), Value::Table(act));

    let s = &cfg.sampling;
    let mut samp = Table::new();
    samp.insert("widths".into(), Value::Array(s.widths.iter().map(|&n| int(n)).collect()));
    samp.insert("samples".into(), int(s.samples));
    samp.insert("units".into(), int(s.units));
    let mode = match s.mode {
        SamplerMode::Conditional => "conditional",
        SamplerMode::Explicit => "explicit",
    };
    samp.insert("mode".into(), Value::String(mode.into()));
    samp.insert("thetas".into(), int_array(&s.thetas));
    if let Some((a, b)) = s.moment_pair {
        samp.insert("moment_pair".into(), Value::Array(vec![int(a), int(b)]));
    }
    samp.insert("memory_budget".into(), Value::Float(s.memory_budget));
    root.insert("sampling".into(), Value::Table(samp));

    let mut quad = Table::new();
    quad.insert("nodes_per_axis".into(), int(cfg.quadrature.nodes_per_axis));
    quad.insert(
        "degenerate_variance_floor".into(),
        Value::Float(cfg.quadrature.degenerate_variance_floor),
    );
    root.insert("quadrature".into(), Value::Table(quad));

    let mut gp = Table::new();
    gp.insert("jitter".into(), Value::Float(cfg.gp.jitter));
    gp.insert("samples".into(), int(cfg.gp.samples));
    gp.insert("units".into(), int(cfg.gp.units));
    root.insert("gp".into(), Value::Table(gp));

    if let Some(seg) = &cfg.segment {
        let mut t = Table::new();
        t.insert("x0".into(), float_array(&seg.x0));
        t.insert("x1".into(), float_array(&seg.x1));
        t.insert("levels".into(), Value::Integer(seg.levels.into()));
        t.insert("paths".into(), int(seg.paths));
        t.insert("max_k".into(), int(seg.max_k));
        root.insert("segment".into(), Value::Table(t));
    }

    let c = &cfg.checks;
    let mut checks = Table::new();
    checks.insert("cov_decreasing".into(), Value::Boolean(c.cov_decreasing));
    if let Some(wnd) = c.rate_slope_window {
        checks.insert("rate_slope_window".into(), float_array(&wnd));
    }
    let opt = |v: Option<f64>| v.map_or(Value::Boolean(false), Value::Float);
    checks.insert("ecf_max".into(), opt(c.ecf_max));
    checks.insert("moment_bound".into(), Value::Boolean(c.moment_bound));
    checks.insert("cross_unit_corr_max".into(), opt(c.cross_unit_corr_max));
    checks.insert("ks_family_level".into(), Value::Float(c.ks_family_level));
    checks.insert("gamma_window".into(), float_array(&c.gamma_window));
    checks.insert("holder_se_max".into(), Value::Float(c.holder_se_max));
    root.insert("checks".into(), Value::Table(checks));

    toml::to_string(&root).expect("a TOML table always serializes")
}
