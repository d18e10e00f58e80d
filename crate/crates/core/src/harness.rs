//! Experiment orchestration: runs the modules for one CLI subcommand, checks
//! the results against the configured thresholds and writes the report,
//! plot data and a hashed manifest.
//!
//! Every numeric byte written depends only on the config (including its
//! seed). The optional timestamp is the single exception.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::diagnostics::{
    bonferroni_pass, cov_frobenius_error, ecf_distance, marginal_ks, moment_bound_check, ConvergenceReport,
    TGrid, WidthRecord, DEFAULT_TGRID_POINTS, KS_MIN_SAMPLES,
};
use crate::error::{NngpError, Result};
use crate::exec::{with_threads, Exec};
use crate::gplimit::{holder_fit, paths_from_batch, sample_gp, segment_kernel, GPSampleRequest, HolderEstimate};
use crate::kernel::{holder_moment_bound, CovMatrix, KernelRecursion, LayerOutcome};
use crate::linalg::FactorMethod;
use crate::netsim::{
    cross_unit_corr, empirical_cov, empirical_cov_centered, sample_network, SamplerConfig,
};
use crate::quadrature::QuadratureSpec;

pub const REPORT_SCHEMA: &str = "nngp-report/1";
pub const MANIFEST_SCHEMA: &str = "nngp-manifest/1";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Σ(1), …, Σ(L) at the configured inputs.
    Kernel,
    /// Finite-width network draws at every width of the ladder.
    SampleNet,
    /// Draws from the limiting Gaussian at the configured inputs.
    SampleGp,
    /// The full width ladder with every diagnostic.
    Converge,
    /// Hölder exponent of GP paths along the configured segment.
    Holder,
    /// Validate the config and stop.
    Check,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Kernel => "kernel",
            Command::SampleNet => "sample-net",
            Command::SampleGp => "sample-gp",
            Command::Converge => "converge",
            Command::Holder => "holder",
            Command::Check => "check",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Worker budget; `None` uses every logical core.
    pub threads: Option<usize>,
    /// Overrides the config's `output_dir`.
    pub out_dir: Option<PathBuf>,
    pub timestamp: bool,
    pub exec: Exec,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            threads: None,
            out_dir: None,
            timestamp: true,
            exec: Exec::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageError {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelLayer {
    pub layer: usize,
    /// Size of the negative eigenvalue removed by PSD repair (0 if none).
    pub clipped: f64,
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelSection {
    pub nodes_per_axis: usize,
    pub layers: Vec<KernelLayer>,
    /// Largest entry change over all layers when the node count doubles.
    pub node_doubling_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HolderSection {
    pub levels: u32,
    pub paths: usize,
    pub factor: FactorMethod,
    pub estimate: HolderEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleArtifact {
    /// Hidden width; absent for GP draws.
    pub n: Option<usize>,
    pub file: String,
    pub samples: usize,
    pub units: usize,
    pub factor: Option<FactorMethod>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub command: Command,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timestamp_unix: Option<u64>,
    pub partial: bool,
    pub error: Option<StageError>,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// True when the activation has no Lipschitz constant, so only
    /// finite-dimensional statements are checked.
    pub finite_dimensional_only: bool,
    pub kernel: Option<KernelSection>,
    pub samples: Vec<SampleArtifact>,
    pub convergence: Option<ConvergenceReport>,
    pub holder: Option<HolderSection>,
    pub checks: Vec<CheckResult>,
    pub notes: Vec<String>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Manifest {
    pub schema: &'static str,
    pub artifacts: Vec<ManifestEntry>,
    pub notes: Vec<String>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: Report,
    pub out_dir: PathBuf,
    pub manifest: Option<Manifest>,
}

impl RunOutcome {
    /// 0 when every enabled check passed, 1 when one failed, 3 when a stage
    /// aborted.
    pub fn exit_code(&self) -> i32 {
        if self.report.error.is_some() {
            3
        } else if self.report.pass {
            0
        } else {
            1
        }
    }
}

/// Directory a run writes to.
pub fn output_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> PathBuf {
    match &opts.out_dir {
        Some(d) => d.clone(),
        None if cfg.output_dir.is_absolute() => cfg.output_dir.clone(),
        None => cfg.base_dir.join(&cfg.output_dir),
    }
}

/// Run one subcommand. Stage failures are recorded in the report (with
/// `partial: true`) and whatever was produced is still written; only
/// failures to write the outputs themselves are returned as errors.
pub fn run_experiment(cmd: Command, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    if cmd == Command::Holder && cfg.segment.is_none() {
        return Err(NngpError::Config(vec!["`holder` needs a `[segment]` section".into()]));
    }
    let out_dir = output_dir(cfg, opts);
    let timestamp = opts.timestamp.then(unix_now);
    with_threads(opts.threads, || {
        let mut run = Run::new(cmd, cfg, opts.exec, timestamp, out_dir.clone());
        if cmd == Command::Check {
            run.finish_checks();
            return Ok(RunOutcome {
                report: run.report,
                out_dir,
                manifest: None,
            });
        }
        fs::create_dir_all(&out_dir).map_err(|e| NngpError::io(&out_dir, e))?;
        run.execute();
        run.finish_checks();
        let manifest = run.write_outputs()?;
        Ok(RunOutcome {
            report: run.report,
            out_dir,
            manifest: Some(manifest),
        })
    })
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    exec: Exec,
    out: PathBuf,
    report: Report,
    /// File names written so far, relative to `out`.
    files: Vec<String>,
    outcomes: Vec<LayerOutcome>,
    records: Vec<WidthRecord>,
}

impl<'a> Run<'a> {
    fn new(cmd: Command, cfg: &'a ExperimentConfig, exec: Exec, timestamp: Option<u64>, out: PathBuf) -> Self {
        Run {
            cfg,
            exec,
            out,
            report: Report {
                schema: REPORT_SCHEMA,
                command: cmd,
                timestamp_unix: timestamp,
                partial: false,
                error: None,
                seed: cfg.seed,
                config: cfg.clone(),
                finite_dimensional_only: cfg.activation.envelope_only(),
                kernel: None,
                samples: Vec::new(),
                convergence: None,
                holder: None,
                checks: Vec::new(),
                notes: Vec::new(),
                pass: false,
            },
            files: Vec::new(),
            outcomes: Vec::new(),
            records: Vec::new(),
        }
    }

    /// Run `f` unless an earlier stage failed; record its error otherwise.
    fn stage(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<()>) {
        if self.report.error.is_some() {
            return;
        }
        if let Err(e) = f(self) {
            self.report.partial = true;
            self.report.error = Some(StageError {
                stage: name.into(),
                message: e.to_string(),
            });
        }
    }

    fn execute(&mut self) {
        let cmd = self.report.command;
        if cmd != Command::Holder {
            self.stage("kernel", Self::kernel);
        }
        match cmd {
            Command::SampleNet => self.stage("sample-net", Self::sample_net),
            Command::SampleGp => self.stage("sample-gp", Self::sample_gp),
            Command::Converge => {
                self.stage("converge", Self::converge);
                if !self.records.is_empty() {
                    match ConvergenceReport::new(self.cfg.seed, std::mem::take(&mut self.records)) {
                        Ok(r) => self.report.convergence = Some(r),
                        Err(e) => self.stage("converge", |_| Err(e)),
                    }
                }
                if self.cfg.segment.is_some() {
                    self.stage("holder", Self::holder);
                }
            }
            Command::Holder => self.stage("holder", Self::holder),
            Command::Kernel | Command::Check => {}
        }
    }

    fn target(&self) -> &CovMatrix {
        &self.outcomes.last().expect("kernel stage ran").cov
    }

    fn kernel(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let rec = KernelRecursion::new(&cfg.activation, cfg.params, &cfg.quadrature, self.exec)?;
        let outcomes = rec.run(&cfg.inputs)?;
        let doubled = QuadratureSpec {
            nodes_per_axis: 2 * cfg.quadrature.nodes_per_axis,
            ..cfg.quadrature
        };
        let fine = KernelRecursion::new(&cfg.activation, cfg.params, &doubled, self.exec)?.run(&cfg.inputs)?;
        let delta = outcomes
            .iter()
            .zip(&fine)
            .map(|(a, b)| (a.cov.entries() - b.cov.entries()).amax())
            .fold(0.0, f64::max);
        for o in &outcomes {
            let name = format!("kernel_l{}.csv", o.cov.layer());
            self.write_file(&name, o.cov.to_csv_string().as_bytes())?;
        }
        self.report.kernel = Some(KernelSection {
            nodes_per_axis: cfg.quadrature.nodes_per_axis,
            layers: outcomes
                .iter()
                .map(|o| KernelLayer {
                    layer: o.cov.layer(),
                    clipped: o.clipped,
                    matrix: o.cov.rows(),
                })
                .collect(),
            node_doubling_delta: delta,
        });
        self.outcomes = outcomes;
        Ok(())
    }

    fn sampler(&self, n: usize) -> SamplerConfig {
        let s = &self.cfg.sampling;
        SamplerConfig {
            mode: s.mode,
            memory_budget: s.memory_budget,
            ..SamplerConfig::new(n, s.units, s.samples)
        }
    }

    fn sample_net(&mut self) -> Result<()> {
        let cfg = self.cfg;
        for &n in &cfg.sampling.widths {
            let net = sample_network(
                &cfg.inputs,
                &cfg.params,
                &cfg.activation,
                &self.sampler(n),
                cfg.seed,
                self.exec,
            )?;
            let name = format!("net_n{n}.bin");
            self.write_file(&name, &net.output().to_bytes())?;
            self.report.samples.push(SampleArtifact {
                n: Some(n),
                file: name,
                samples: cfg.sampling.samples,
                units: cfg.sampling.units,
                factor: None,
            });
        }
        Ok(())
    }

    fn sample_gp(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let mut req = GPSampleRequest::new(self.target().clone(), cfg.gp.units, cfg.gp.samples, cfg.seed);
        req.jitter = cfg.gp.jitter;
        let gp = sample_gp(&req, self.exec)?;
        self.write_file("gp.bin", &gp.batch.to_bytes())?;
        self.report.samples.push(SampleArtifact {
            n: None,
            file: "gp.bin".into(),
            samples: cfg.gp.samples,
            units: cfg.gp.units,
            factor: Some(gp.method),
        });
        if cfg.gp.samples >= KS_MIN_SAMPLES {
            let ks = marginal_ks(&gp.batch, self.target())?;
            let pass = bonferroni_pass(&ks, cfg.checks.ks_family_level)?;
            let min_p = ks.iter().filter_map(|t| t.p).fold(1.0, f64::min);
            self.check(
                "gp_ks_bonferroni",
                pass,
                format!("{} marginals, min p = {min_p:.4e}, family level {}", ks.len(), cfg.checks.ks_family_level),
            );
        } else {
            self.note(format!("GP marginal KS skipped: needs at least {KS_MIN_SAMPLES} samples"));
        }
        Ok(())
    }

    fn converge(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let target = self.target().clone();
        let grid = TGrid::for_cov(&target, DEFAULT_TGRID_POINTS)?;
        let lipschitz = cfg.activation.lipschitz_constant();
        let pair = cfg.sampling.moment_pair;
        if lipschitz.is_none() {
            self.note("moment-bound checks skipped: activation has no Lipschitz constant".into());
        }
        if cfg.sampling.samples < KS_MIN_SAMPLES {
            self.note(format!("KS p-values omitted: fewer than {KS_MIN_SAMPLES} samples"));
        }
        for &n in &cfg.sampling.widths {
            let net = sample_network(
                &cfg.inputs,
                &cfg.params,
                &cfg.activation,
                &self.sampler(n),
                cfg.seed,
                self.exec,
            )?;
            let out = net.output();
            let err = cov_frobenius_error(&empirical_cov(out, 0)?, &target)?;
            let err_c = cov_frobenius_error(&empirical_cov_centered(out, 0)?, &target)?;
            let ks = marginal_ks(out, &target)?;
            let ks_pass = if cfg.sampling.samples >= KS_MIN_SAMPLES {
                Some(bonferroni_pass(&ks, cfg.checks.ks_family_level)?)
            } else {
                None
            };
            let ecf = ecf_distance(out, &target, &grid, self.exec)?.distance;
            let mut margins = Vec::new();
            if let (Some(lip), Some((a, b))) = (lipschitz, pair) {
                let dist = euclidean(cfg.inputs.input(a), cfg.inputs.input(b));
                let (fx, fy) = (out.marginal(0, a), out.marginal(0, b));
                for &theta in &cfg.sampling.thetas {
                    let h = holder_moment_bound(theta, cfg.params.depth, &cfg.params, lip)?;
                    margins.push(moment_bound_check(&fx, &fy, theta, h, dist, cfg.seed)?);
                }
            }
            let cross = if cfg.sampling.units >= 2 { Some(cross_unit_corr(out)?) } else { None };
            self.records.push(WidthRecord {
                n,
                cov_frobenius_error: err,
                cov_frobenius_error_centered: err_c,
                ks_per_marginal: ks,
                ks_bonferroni_pass: ks_pass,
                ecf_distance: ecf,
                moment_margins: margins,
                cross_unit_corr: cross,
            });
        }
        Ok(())
    }

    fn holder(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let seg = cfg.segment.as_ref().expect("checked before the run");
        if cfg.activation.envelope_only() {
            return Err(NngpError::Unsupported(
                "Hölder estimation needs an activation with a Lipschitz constant".into(),
            ));
        }
        let cov = segment_kernel(
            &seg.x0,
            &seg.x1,
            seg.levels,
            &cfg.activation,
            &cfg.params,
            &cfg.quadrature,
            seg.max_k,
            self.exec,
        )?;
        let mut req = GPSampleRequest::new(cov, 1, seg.paths, cfg.seed);
        req.jitter = cfg.gp.jitter;
        let gp = sample_gp(&req, self.exec)?;
        let paths = paths_from_batch(&gp.batch, &seg.x0, &seg.x1, seg.levels)?;
        let estimate = holder_fit(&paths)?;
        let mut buf = Vec::new();
        paths[0].write_csv(&mut buf).map_err(|e| NngpError::io(self.out.join("path.csv"), e))?;
        self.write_file("path.csv", &buf)?;
        self.report.holder = Some(HolderSection {
            levels: seg.levels,
            paths: seg.paths,
            factor: gp.method,
            estimate,
        });
        Ok(())
    }

    fn check(&mut self, name: &str, pass: bool, detail: String) {
        self.report.checks.push(CheckResult {
            name: name.into(),
            pass,
            detail,
        });
    }

    fn note(&mut self, note: String) {
        self.report.notes.push(note);
    }

    fn finish_checks(&mut self) {
        let c = &self.cfg.checks;
        if let Some(conv) = self.report.convergence.clone() {
            let recs = &conv.records;
            if c.cov_decreasing && recs.len() >= 2 {
                let errs: Vec<String> = recs.iter().map(|r| format!("n={}: {:.4e}", r.n, r.cov_frobenius_error)).collect();
                self.check("cov_error_decreasing", conv.strictly_decreasing(), errs.join(", "));
            }
            if let Some([lo, hi]) = c.rate_slope_window {
                match conv.rate {
                    Some(fit) => self.check(
                        "rate_slope",
                        fit.slope >= lo && fit.slope <= hi,
                        format!("slope {:.4} (se {:.4}), window [{lo}, {hi}]", fit.slope, fit.se),
                    ),
                    None => self.check("rate_slope", false, "rate fit needs at least 3 widths".into()),
                }
            }
            if let (Some(max), Some(last)) = (c.ecf_max, recs.last()) {
                self.check(
                    "ecf_distance_max_width",
                    last.ecf_distance < max,
                    format!("n={}: {:.4e} (limit {max})", last.n, last.ecf_distance),
                );
            }
            if let Some(last) = recs.last() {
                if let Some(pass) = last.ks_bonferroni_pass {
                    let min_p = last.ks_per_marginal.iter().filter_map(|t| t.p).fold(1.0, f64::min);
                    self.check(
                        "ks_bonferroni_max_width",
                        pass,
                        format!("n={}: min p = {min_p:.4e}, family level {}", last.n, c.ks_family_level),
                    );
                }
            }
            let margins: Vec<_> = recs.iter().flat_map(|r| r.moment_margins.iter().map(move |m| (r.n, m))).collect();
            if c.moment_bound && !margins.is_empty() {
                let failed: Vec<String> = margins
                    .iter()
                    .filter(|(_, m)| !m.pass)
                    .map(|(n, m)| format!("n={n} theta={}: {:.4e} > {:.4e}", m.theta, m.moment, m.bound))
                    .collect();
                let detail = if failed.is_empty() {
                    format!("{} width/theta pairs within bound + 4 SE", margins.len())
                } else {
                    failed.join("; ")
                };
                self.check("moment_bound", failed.is_empty(), detail);
            }
            if let Some(max) = c.cross_unit_corr_max {
                let worst = recs
                    .iter()
                    .filter_map(|r| r.cross_unit_corr.as_ref().map(|x| (r.n, x.max_abs)))
                    .fold(None, |acc: Option<(usize, f64)>, x| match acc {
                        Some(a) if a.1 >= x.1 => Some(a),
                        _ => Some(x),
                    });
                if let Some((n, v)) = worst {
                    self.check("cross_unit_corr", v < max, format!("max |corr| {v:.4e} at n={n} (limit {max})"));
                }
            }
        }
        if let Some(h) = self.report.holder.clone() {
            let [lo, hi] = c.gamma_window;
            let g = h.estimate.gamma;
            self.check(
                "holder_gamma_window",
                g > lo && g < hi,
                format!("gamma {g:.4} in ({lo}, {hi})"),
            );
            self.check(
                "holder_se",
                h.estimate.se < c.holder_se_max,
                format!("se {:.4e} (limit {})", h.estimate.se, c.holder_se_max),
            );
        }
        self.report.pass = self.report.error.is_none() && self.report.checks.iter().all(|c| c.pass);
    }

    fn write_file(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out.join(name);
        fs::write(&path, bytes).map_err(|e| NngpError::io(&path, e))?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    fn write_outputs(&mut self) -> Result<Manifest> {
        let plot = emit_plotdata(&self.report, &self.out)?;
        self.files.extend(plot.files);
        let mut notes = plot.notes;
        let json = report_json(&self.report);
        self.write_file(REPORT_FILE, json.as_bytes())?;
        if self.report.partial {
            notes.push("partial run: see `error` in report.json".into());
        }
        let manifest = build_manifest(&self.out, &self.files, notes)?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
        let path = self.out.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| NngpError::io(&path, e))?;
        Ok(manifest)
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Pretty JSON of the report with a trailing newline.
pub fn report_json(report: &Report) -> String {
    serde_json::to_string_pretty(report).expect("report serializes") + "\n"
}

/// Files written by [`emit_plotdata`] and notes about the ones skipped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PlotData {
    pub files: Vec<String>,
    pub notes: Vec<String>,
}

/// Write the plotting CSVs for `report` into `dir`:
///
/// * `widths.csv`: one row per width with every scalar statistic.
/// * `rate.csv`: `n` and each error metric.
/// * `marginals.csv`: `n,input,unit,ks_d,p` per marginal.
/// * `holder.csv`: `level,scale,max_increment` (absent without a Hölder run).
pub fn emit_plotdata(report: &Report, dir: &Path) -> Result<PlotData> {
    let mut out = PlotData::default();
    let put = |name: &str, bytes: Vec<u8>, out: &mut PlotData| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| NngpError::io(&path, e))?;
        out.files.push(name.to_string());
        Ok(())
    };
    match &report.convergence {
        Some(conv) => {
            put("widths.csv", widths_csv(conv), &mut out)?;
            put("rate.csv", rate_csv(conv), &mut out)?;
            put("marginals.csv", marginals_csv(conv), &mut out)?;
        }
        None => out
            .notes
            .push("widths.csv, rate.csv, marginals.csv not emitted: no width ladder was run".into()),
    }
    match &report.holder {
        Some(h) => {
            let mut buf = Vec::new();
            {
                let mut w = csv::Writer::from_writer(&mut buf);
                w.write_record(["level", "scale", "max_increment"]).expect("in-memory write");
                for inc in &h.estimate.increments {
                    w.write_record(&[inc.level.to_string(), inc.scale.to_string(), inc.max_increment.to_string()])
                        .expect("in-memory write");
                }
                w.flush().expect("in-memory write");
            }
            put("holder.csv", buf, &mut out)?;
        }
        None => out.notes.push("holder.csv not emitted: no Hölder run configured".into()),
    }
    Ok(out)
}

fn opt_f64(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn widths_csv(conv: &ConvergenceReport) -> Vec<u8> {
    let thetas: Vec<u32> = conv
        .records
        .first()
        .map(|r| r.moment_margins.iter().map(|m| m.theta).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = [
        "n",
        "cov_frobenius_error",
        "cov_frobenius_error_centered",
        "ecf_distance",
        "ks_max_d",
        "ks_min_p",
        "ks_bonferroni_pass",
        "cross_unit_corr_max",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for t in &thetas {
        for col in ["moment", "moment_se", "bound", "pass"] {
            header.push(format!("{col}_theta{t}"));
        }
    }
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(&header).expect("in-memory write");
        for r in &conv.records {
            let max_d = r.ks_per_marginal.iter().map(|k| k.d).fold(0.0, f64::max);
            let min_p = r.ks_per_marginal.iter().filter_map(|k| k.p).reduce(f64::min);
            let mut row = vec![
                r.n.to_string(),
                r.cov_frobenius_error.to_string(),
                r.cov_frobenius_error_centered.to_string(),
                r.ecf_distance.to_string(),
                max_d.to_string(),
                opt_f64(min_p),
                r.ks_bonferroni_pass.map(|b| b.to_string()).unwrap_or_default(),
                opt_f64(r.cross_unit_corr.as_ref().map(|c| c.max_abs)),
            ];
            for m in &r.moment_margins {
                row.extend([m.moment.to_string(), m.se.to_string(), m.bound.to_string(), m.pass.to_string()]);
            }
            w.write_record(&row).expect("in-memory write");
        }
        w.flush().expect("in-memory write");
    }
    buf
}

fn rate_csv(conv: &ConvergenceReport) -> Vec<u8> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["n", "cov_frobenius_error", "cov_frobenius_error_centered", "ecf_distance", "ks_max_d"])
            .expect("in-memory write");
        for r in &conv.records {
            let max_d = r.ks_per_marginal.iter().map(|k| k.d).fold(0.0, f64::max);
            w.write_record(&[
                r.n.to_string(),
                r.cov_frobenius_error.to_string(),
                r.cov_frobenius_error_centered.to_string(),
                r.ecf_distance.to_string(),
                max_d.to_string(),
            ])
            .expect("in-memory write");
        }
        w.flush().expect("in-memory write");
    }
    buf
}

fn marginals_csv(conv: &ConvergenceReport) -> Vec<u8> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["n", "input", "unit", "ks_d", "p"]).expect("in-memory write");
        for r in &conv.records {
            for k in &r.ks_per_marginal {
                w.write_record(&[
                    r.n.to_string(),
                    k.input.to_string(),
                    k.unit.to_string(),
                    k.d.to_string(),
                    opt_f64(k.p),
                ])
                .expect("in-memory write");
            }
        }
        w.flush().expect("in-memory write");
    }
    buf
}

/// SHA-256 and size of every listed file in `dir`, sorted by name.
pub fn build_manifest(dir: &Path, files: &[String], notes: Vec<String>) -> Result<Manifest> {
    let mut names = files.to_vec();
    names.sort();
    names.dedup();
    let mut artifacts = Vec::with_capacity(names.len());
    for name in names {
        let path = dir.join(&name);
        let bytes = fs::read(&path).map_err(|e| NngpError::io(&path, e))?;
        artifacts.push(ManifestEntry {
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
            file: name,
        });
    }
    Ok(Manifest {
        schema: MANIFEST_SCHEMA,
        artifacts,
        notes,
    })
}

/// Human-readable summary of a finished run.
pub fn write_summary<W: Write>(mut w: W, outcome: &RunOutcome) -> std::io::Result<()> {
    let r = &outcome.report;
    if let Some(k) = &r.kernel {
        if r.command == Command::Kernel {
            for layer in &k.layers {
                writeln!(w, "Sigma({}):", layer.layer)?;
                for row in &layer.matrix {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:>14.8}")).collect();
                    writeln!(w, "  {}", cells.join(" "))?;
                }
            }
            writeln!(w, "node doubling delta: {:.3e}", k.node_doubling_delta)?;
        }
    }
    if let Some(conv) = &r.convergence {
        writeln!(w, "{:>8} {:>14} {:>14} {:>12}", "n", "cov_err", "cov_err_ctr", "ecf")?;
        for rec in &conv.records {
            writeln!(
                w,
                "{:>8} {:>14.6e} {:>14.6e} {:>12.4e}",
                rec.n, rec.cov_frobenius_error, rec.cov_frobenius_error_centered, rec.ecf_distance
            )?;
        }
        if let Some(fit) = conv.rate {
            writeln!(w, "log-log slope {:.4} (se {:.4})", fit.slope, fit.se)?;
        }
    }
    if let Some(h) = &r.holder {
        writeln!(w, "holder gamma {:.4} (se {:.4})", h.estimate.gamma, h.estimate.se)?;
    }
    for c in &r.checks {
        writeln!(w, "{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail)?;
    }
    for n in &r.notes {
        writeln!(w, "note: {n}")?;
    }
    if let Some(e) = &r.error {
        writeln!(w, "error in stage {}: {}", e.stage, e.message)?;
    }
    if outcome.manifest.is_some() {
        writeln!(w, "outputs: {}", outcome.out_dir.display())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn config(extra: &str, dir: &Path) -> ExperimentConfig {
        let text = format!(
            r#"
seed = 11
[inputs]
matrix = [[1.0, 0.0], [0.6, 0.8], [0.0, 2.0]]
[network]
depth = 3
sigma_w_sq = 1.0
sigma_b_sq = 0.0
{extra}"#
        );
        parse_config(&text, dir).unwrap()
    }

    fn opts(dir: &Path) -> RunOptions {
        RunOptions {
            out_dir: Some(dir.to_path_buf()),
            timestamp: false,
            ..RunOptions::default()
        }
    }

    fn read_json(path: &Path) -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
    }

    #[test]
    fn identity_converge_reports_fixed_point_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            "[activation]\nkind = \"identity\"\n[sampling]\nwidths = [8, 64]\nsamples = 500\n",
            dir.path(),
        );
        let out = run_experiment(Command::Converge, &cfg, &opts(dir.path())).unwrap();
        let k = out.report.kernel.as_ref().unwrap();
        for (a, b) in k.layers[2].matrix.iter().flatten().zip(k.layers[0].matrix.iter().flatten()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let conv = out.report.convergence.as_ref().unwrap();
        assert_eq!(conv.records.len(), 2);
        assert!(conv.records.iter().all(|r| r.cov_frobenius_error.is_finite()));
        assert!(out.report.notes.iter().any(|n| n.contains("KS p-values omitted")));

        let json = read_json(&dir.path().join(REPORT_FILE));
        assert_eq!(json["schema"], "nngp-report/1");
        assert!(json.get("timestamp_unix").is_none());
        assert_eq!(json["partial"], false);
        let rate = fs::read_to_string(dir.path().join("rate.csv")).unwrap();
        assert_eq!(rate.lines().count(), 3);
    }

    #[test]
    fn manifest_hashes_every_artifact_and_notes_missing_holder() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            "[activation]\nkind = \"relu\"\n[sampling]\nwidths = [4, 8, 16]\nsamples = 200\nunits = 2\n",
            dir.path(),
        );
        let out = run_experiment(Command::Converge, &cfg, &opts(dir.path())).unwrap();
        let manifest = out.manifest.unwrap();
        assert!(!dir.path().join("holder.csv").exists());
        assert!(manifest.notes.iter().any(|n| n.contains("holder.csv")));
        let names: Vec<&str> = manifest.artifacts.iter().map(|a| a.file.as_str()).collect();
        for f in ["report.json", "rate.csv", "widths.csv", "marginals.csv", "kernel_l1.csv", "kernel_l3.csv"] {
            assert!(names.contains(&f), "{f} missing from {names:?}");
        }
        for a in &manifest.artifacts {
            let bytes = fs::read(dir.path().join(&a.file)).unwrap();
            assert_eq!(hex::encode(Sha256::digest(&bytes)), a.sha256);
        }
        let rate = fs::read_to_string(dir.path().join("rate.csv")).unwrap();
        assert_eq!(rate.lines().count(), 4);
        let marg = fs::read_to_string(dir.path().join("marginals.csv")).unwrap();
        assert_eq!(marg.lines().count(), 1 + 3 * 3 * 2);
        assert!(out.report.checks.iter().any(|c| c.name == "cross_unit_corr"));
    }

    #[test]
    fn reports_are_byte_identical_across_thread_budgets() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let extra = "[activation]\nkind = \"tanh\"\n[sampling]\nwidths = [4, 32]\nsamples = 300\n\
                     [segment]\nx0 = [0.0, 0.0]\nx1 = [1.0, 0.0]\nlevels = 5\npaths = 8\n";
        let cfg = config(extra, a.path());
        let mut oa = opts(a.path());
        oa.threads = Some(1);
        let mut ob = opts(b.path());
        ob.threads = Some(3);
        run_experiment(Command::Converge, &cfg, &oa).unwrap();
        run_experiment(Command::Converge, &cfg, &ob).unwrap();
        for f in ["report.json", "manifest.json", "holder.csv", "path.csv", "widths.csv"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn stage_failure_writes_partial_report() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(
            "[activation]\nkind = \"relu\"\n[sampling]\nwidths = [8, 1000000]\nsamples = 100\nmemory_budget = 1e7\n",
            dir.path(),
        );
        let out = run_experiment(Command::Converge, &cfg, &opts(dir.path())).unwrap();
        assert_eq!(out.exit_code(), 3);
        let json = read_json(&dir.path().join(REPORT_FILE));
        assert_eq!(json["partial"], true);
        assert_eq!(json["error"]["stage"], "converge");
        assert!(json["error"]["message"].as_str().unwrap().contains("memory budget"));
        assert_eq!(json["convergence"]["records"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn holder_without_segment_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config("[activation]\nkind = \"relu\"\n", dir.path());
        assert!(matches!(
            run_experiment(Command::Holder, &cfg, &opts(dir.path())),
            Err(NngpError::Config(_))
        ));
    }

    #[test]
    fn unwritable_output_dir_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let cfg = config("[activation]\nkind = \"relu\"\n", dir.path());
        let err = run_experiment(Command::Kernel, &cfg, &opts(&blocker.join("sub"))).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
    }

    #[test]
    fn sample_gp_writes_batch_and_checks_marginals() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = config("[activation]\nkind = \"erf\"\n[gp]\nsamples = 2000\nunits = 2\n", dir.path());
        let out = run_experiment(Command::SampleGp, &cfg, &opts(dir.path())).unwrap();
        let batch = crate::netsim::SampleBatch::load(&dir.path().join("gp.bin")).unwrap();
        assert_eq!((batch.samples(), batch.units(), batch.k()), (2000, 2, 3));
        assert!(out.report.checks.iter().any(|c| c.name == "gp_ks_bonferroni"));
    }
}
