//! The five subcommands.
//!
//! Each command turns a [`RunConfig`] plus [`Options`] into an [`Outcome`]:
//! the artifacts to write and, for `verify`, a failure that still carries
//! its report.

use std::path::PathBuf;

use egue_core::analytic::{
    self, AnalyticError, Asymptotics, CumulantReport, Flagged, GridSpec, MomentSet, Provenance,
};
use egue_core::ensembles::ModelSpec;
use egue_core::montecarlo::{self, CompareReport, EnsembleStats, DEFAULT_MC_CAP};
use egue_core::oracle::{self, Oracle, OracleError, OracleLimits, RacahExtraction};
use serde::Serialize;

use crate::config::{Format, RunConfig};
use crate::error::{CliError, Result};
use crate::output::{num, tag, Artifact, CsvTable};

/// Default relative tolerance of `verify`.
pub const VERIFY_TOL: f64 = 1e-9;

/// Command options after merging the config file with command-line flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Options {
    pub samples: usize,
    pub seed: u64,
    pub bins: usize,
    pub format: Format,
    pub out: Option<PathBuf>,
    /// Sector cap; the default depends on the command.
    pub max_dim: Option<usize>,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            samples: 200,
            seed: 0,
            bins: 25,
            format: Format::Json,
            out: None,
            max_dim: None,
        }
    }
}

impl Options {
    /// Config values, overridden by any flag that is `Some`.
    pub fn merge(cfg: &RunConfig, flags: &Overrides) -> Options {
        let d = Options::default();
        Options {
            samples: flags.samples.or(cfg.samples).unwrap_or(d.samples),
            seed: flags.seed.or(cfg.seed).unwrap_or(d.seed),
            bins: flags.bins.or(cfg.bins).unwrap_or(d.bins),
            format: flags.format.or(cfg.format).unwrap_or(d.format),
            out: flags.out.clone().or_else(|| cfg.out.clone()),
            max_dim: flags.max_dim.or(cfg.max_dim),
        }
    }

    fn oracle_limits(&self) -> OracleLimits {
        let mut lim = OracleLimits::default();
        if let Some(d) = self.max_dim {
            lim.max_dim = d;
        }
        lim
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub bins: Option<usize>,
    pub format: Option<Format>,
    pub out: Option<PathBuf>,
    pub max_dim: Option<usize>,
}

#[derive(Debug)]
pub struct Outcome {
    pub artifacts: Vec<Artifact>,
    pub failure: Option<CliError>,
}

impl Outcome {
    fn ok(artifacts: Vec<Artifact>) -> Outcome {
        Outcome {
            artifacts,
            failure: None,
        }
    }
}

fn encode(stem: &str, format: Format, value: &impl Serialize, table: impl FnOnce() -> CsvTable) -> Result<Vec<Artifact>> {
    let mut out = Vec::new();
    if format.json() {
        out.push(Artifact::json(stem, value)?);
    }
    if format.csv() {
        out.push(Artifact::csv(stem, &table()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// moments / oracle

#[derive(Debug, Clone, Serialize)]
pub struct MomentsReport {
    pub spec: ModelSpec,
    pub moments: MomentSet,
    pub cumulants: Option<CumulantReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cumulants_unavailable: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub racah: Option<RacahExtraction>,
}

fn asymptotics_for(spec: &ModelSpec) -> Option<Asymptotics> {
    match *spec {
        ModelSpec::NumberConserving { m, k, t, .. } => analytic::asymptotics(m, k, t).ok(),
        _ => None,
    }
}

fn report_for(spec: &ModelSpec, moments: MomentSet) -> MomentsReport {
    let (cumulants, cumulants_unavailable) = match analytic::cumulants(&moments) {
        Ok(c) => {
            let c = match asymptotics_for(spec) {
                Some(a) => c.with_asymptotics(a),
                None => c,
            };
            (Some(c), None)
        }
        Err(e) => (None, Some(e.to_string())),
    };
    MomentsReport {
        spec: spec.clone(),
        moments,
        cumulants,
        cumulants_unavailable,
        racah: None,
    }
}

/// Rows `name,value,status,provenance` for moments, cumulants and limits.
pub fn moments_table(r: &MomentsReport) -> CsvTable {
    let mut t = CsvTable::new(&["name", "value", "status", "provenance"]);
    let prov = tag(&r.moments.provenance);
    for ((p, q), f) in r.moments.iter() {
        t.push(vec![analytic::moment_name(p, q), num(f.value), f.status.to_string(), prov.clone()]);
    }
    if let Some(c) = &r.cumulants {
        let named: [(&str, Flagged); 11] = [
            ("xi", c.xi),
            ("mu40", c.mu40),
            ("mu04", c.mu04),
            ("mu31", c.mu31),
            ("mu13", c.mu13),
            ("mu22", c.mu22),
            ("k40", c.k40),
            ("k04", c.k04),
            ("k31", c.k31),
            ("k13", c.k13),
            ("k22", c.k22),
        ];
        for (name, f) in named {
            t.push(vec![name.into(), num(f.value), f.status.to_string(), prov.clone()]);
        }
        if let Some(a) = &c.asymptotic {
            let analytic_tag = tag(&Provenance::Analytic);
            for (name, v) in [
                ("xi_inf", a.xi_inf),
                ("mu40_inf", a.mu40_inf),
                ("mu31_inf", a.mu31_inf),
                ("mu22_inf", a.mu22_inf),
            ] {
                t.push(vec![name.into(), num(Some(v)), "exact".into(), analytic_tag.clone()]);
            }
        }
    }
    if let Some(r) = &r.racah {
        let oracle_tag = tag(&Provenance::Oracle);
        for (name, v) in [
            ("m22_term1", Some(r.term1)),
            ("m22_term2", Some(r.term2)),
            ("m22_term3", Some(r.term3)),
            ("racah_dominant_weight", Some(r.dominant_weight)),
            ("racah_implied_u2", r.implied_u2),
        ] {
            t.push(vec![name.into(), num(v), "exact".into(), oracle_tag.clone()]);
        }
    }
    t
}

pub fn cmd_moments(cfg: &RunConfig, opts: &Options) -> Result<Outcome> {
    let spec = cfg.single_spec()?;
    let report = report_for(spec, analytic::moment_set(spec, None)?);
    Ok(Outcome::ok(encode("moments", opts.format, &report, || moments_table(&report))?))
}

pub fn cmd_oracle(cfg: &RunConfig, opts: &Options) -> Result<Outcome> {
    let spec = cfg.single_spec()?;
    let limits = opts.oracle_limits();
    let moments = Oracle::with_limits(spec, limits)?.moment_set()?;
    let mut report = report_for(spec, moments);
    if let ModelSpec::NumberConserving { n, m, k, t, .. } = *spec {
        report.racah = Some(oracle::extract_racah_with_limits(n, m, k, t, limits)?);
    }
    Ok(Outcome::ok(encode("oracle", opts.format, &report, || moments_table(&report))?))
}

// ---------------------------------------------------------------------------
// verify

/// Source of the closed-form values that `verify` checks.
pub trait AnalyticProvider {
    fn moment_set(&self, spec: &ModelSpec) -> std::result::Result<MomentSet, AnalyticError>;
}

/// The library's closed forms.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClosedForms;

impl AnalyticProvider for ClosedForms {
    fn moment_set(&self, spec: &ModelSpec) -> std::result::Result<MomentSet, AnalyticError> {
        analytic::moment_set(spec, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentCheck {
    pub moment: String,
    pub analytic: f64,
    pub oracle: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecStatus {
    Checked,
    Infeasible,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpecVerification {
    pub spec: ModelSpec,
    pub status: SpecStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    pub checks: Vec<MomentCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub tolerance: f64,
    pub specs: Vec<SpecVerification>,
    pub failures: usize,
    pub infeasible: usize,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.infeasible == 0
    }
}

/// The number-conserving grid `N ∈ 5..=9`, `m ∈ 2..=min(4, N-1)`, `k, t ∈ 1..=min(3, m)`.
pub fn default_grid() -> Vec<ModelSpec> {
    let mut grid = Vec::new();
    for n in 5..=9 {
        for m in 2..=4.min(n - 1) {
            for k in 1..=3.min(m) {
                for t in 1..=3.min(m) {
                    grid.push(ModelSpec::NumberConserving {
                        n,
                        m,
                        k,
                        t,
                        v_h: 1.0,
                        v_o: 1.0,
                    });
                }
            }
        }
    }
    grid
}

/// Relative error with a floor of `1e-6 · M00 · v_h^((P+Q)/2)` in the
/// denominator, so that exact zeros compare on the model's own scale.
fn rel_err(a: f64, o: f64, floor: f64) -> f64 {
    let d = a - o;
    if d == 0.0 {
        return 0.0;
    }
    d.abs() / o.abs().max(a.abs()).max(floor)
}

fn verify_spec(spec: &ModelSpec, provider: &dyn AnalyticProvider, limits: OracleLimits, tol: f64) -> SpecVerification {
    let failed = |status, message: String| SpecVerification {
        spec: spec.clone(),
        status,
        message: Some(message),
        checks: Vec::new(),
    };
    let exact = match Oracle::with_limits(spec, limits).and_then(|o| o.moment_set()) {
        Ok(ms) => ms,
        Err(OracleError::Infeasible(msg)) => return failed(SpecStatus::Infeasible, msg),
        Err(e) => return failed(SpecStatus::Error, e.to_string()),
    };
    let closed = match provider.moment_set(spec) {
        Ok(ms) => ms,
        Err(e) => return failed(SpecStatus::Error, e.to_string()),
    };
    let m00 = exact.value(0, 0).unwrap_or(0.0).abs();
    let checks = closed
        .iter()
        .filter(|(_, f)| f.is_exact())
        .map(|((p, q), f)| {
            let a = f.value.unwrap_or(f64::NAN);
            let o = exact.value(p, q).unwrap_or(f64::NAN);
            let floor = 1e-6 * m00 * spec.v_h().powf((p + q) as f64 / 2.0);
            let e = rel_err(a, o, floor.max(f64::MIN_POSITIVE));
            MomentCheck {
                moment: analytic::moment_name(p, q),
                analytic: a,
                oracle: o,
                rel_err: e,
                pass: e <= tol,
            }
        })
        .collect();
    SpecVerification {
        spec: spec.clone(),
        status: SpecStatus::Checked,
        message: None,
        checks,
    }
}

pub fn verify_grid(grid: &[ModelSpec], provider: &dyn AnalyticProvider, limits: OracleLimits, tol: f64) -> VerifyReport {
    let specs: Vec<SpecVerification> = grid.iter().map(|s| verify_spec(s, provider, limits, tol)).collect();
    let failures = specs
        .iter()
        .map(|s| match s.status {
            SpecStatus::Checked => s.checks.iter().filter(|c| !c.pass).count(),
            SpecStatus::Error => 1,
            SpecStatus::Infeasible => 0,
        })
        .sum();
    let infeasible = specs.iter().filter(|s| s.status == SpecStatus::Infeasible).count();
    VerifyReport {
        tolerance: tol,
        specs,
        failures,
        infeasible,
    }
}

fn spec_label(spec: &ModelSpec) -> String {
    serde_json::to_string(spec).unwrap_or_default().replace(',', ";")
}

pub fn verify_table(r: &VerifyReport) -> CsvTable {
    let mut t = CsvTable::new(&["spec", "status", "moment", "analytic", "oracle", "rel_err", "pass"]);
    for s in &r.specs {
        let label = spec_label(&s.spec);
        let status = tag(&s.status);
        if s.checks.is_empty() {
            t.push(vec![label.clone(), status.clone(), String::new(), String::new(), String::new(), String::new(), String::new()]);
        }
        for c in &s.checks {
            t.push(vec![
                label.clone(),
                status.clone(),
                c.moment.clone(),
                num(Some(c.analytic)),
                num(Some(c.oracle)),
                num(Some(c.rel_err)),
                c.pass.to_string(),
            ]);
        }
    }
    t
}

pub fn cmd_verify_with(cfg: &RunConfig, opts: &Options, provider: &dyn AnalyticProvider) -> Result<Outcome> {
    let mut grid = cfg.specs()?;
    if grid.is_empty() {
        grid = default_grid();
    }
    let report = verify_grid(&grid, provider, opts.oracle_limits(), VERIFY_TOL);
    let artifacts = encode("verify", opts.format, &report, || verify_table(&report))?;
    let failure = if report.failures > 0 {
        let first = report
            .specs
            .iter()
            .find_map(|s| {
                s.checks
                    .iter()
                    .find(|c| !c.pass)
                    .map(|c| format!("{} at {}", c.moment, spec_label(&s.spec)))
                    .or_else(|| (s.status == SpecStatus::Error).then(|| format!("error at {}", spec_label(&s.spec))))
            })
            .unwrap_or_default();
        Some(CliError::Verification(format!("{} failing check(s); first: {first}", report.failures)))
    } else if report.infeasible > 0 {
        Some(CliError::Infeasible(format!("{} spec(s) beyond the oracle limits", report.infeasible)))
    } else {
        None
    };
    Ok(Outcome { artifacts, failure })
}

pub fn cmd_verify(cfg: &RunConfig, opts: &Options) -> Result<Outcome> {
    cmd_verify_with(cfg, opts, &ClosedForms)
}

// ---------------------------------------------------------------------------
// sample

#[derive(Debug, Clone, Serialize)]
pub struct HistogramSummary {
    pub bins: usize,
    pub total_weight: f64,
    pub clamped_weight: f64,
    pub trace_total: f64,
    pub max_sum_rule_deviation: f64,
    pub ei_range: (f64, f64),
    pub ef_range: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSection {
    pub analytic: CompareReport,
    pub oracle: Option<CompareReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_unavailable: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleReport {
    pub stats: EnsembleStats,
    pub histogram: HistogramSummary,
    pub compare: CompareSection,
}

pub fn cmd_sample(cfg: &RunConfig, opts: &Options) -> Result<Outcome> {
    let spec = cfg.single_spec()?;
    if opts.bins < 2 {
        return Err(CliError::Validation("`bins` must be at least 2".into()));
    }
    let cap = opts.max_dim.unwrap_or(DEFAULT_MC_CAP);
    let stats = montecarlo::run_with_cap(spec, opts.samples, opts.seed, cap)?;
    let hist = montecarlo::histogram_from_stats(&stats, opts.bins, cap)?;

    let analytic_cmp = montecarlo::compare(&stats, &analytic::moment_set(spec, None)?);
    let (oracle_cmp, oracle_unavailable) = if oracle::is_feasible(spec, OracleLimits::default()) {
        let ms = Oracle::new(spec)?.moment_set()?;
        (Some(montecarlo::compare(&stats, &ms)), None)
    } else {
        (None, Some("spec beyond the default oracle limits".to_string()))
    };

    let mut ht = CsvTable::new(&["ei_center", "ef_center", "weight"]);
    let (ci, cf) = (hist.ei_centers(), hist.ef_centers());
    for (a, row) in hist.weights.iter().enumerate() {
        for (b, &w) in row.iter().enumerate() {
            ht.push(vec![num(Some(ci[a])), num(Some(cf[b])), num(Some(w))]);
        }
    }

    // Gaussian with the sample's widths and correlation, on the bin centers.
    let bins = opts.bins;
    let m00 = stats.moments.value(0, 0).unwrap_or(0.0);
    let sigma_i = (stats.moments.value(2, 0).unwrap_or(0.0) / m00).sqrt();
    let sigma_f = (stats.moments.value(0, 2).unwrap_or(0.0) / m00).sqrt();
    let grid = GridSpec {
        points_i: bins,
        points_f: bins,
        extent_sigmas: 4.0 * (1.0 - 1.0 / bins as f64),
    };
    let density = analytic::gaussian_density(sigma_i, sigma_f, stats.shape.xi.value, hist.total_weight, grid)?;
    let cell = hist.bin_width_i() * hist.bin_width_f();
    let mut gt = CsvTable::new(&["ei_center", "ef_center", "weight"]);
    for (a, row) in density.values.iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            gt.push(vec![num(Some(density.ei_axis[a])), num(Some(density.ef_axis[b])), num(Some(v * cell))]);
        }
    }

    let report = SampleReport {
        histogram: HistogramSummary {
            bins,
            total_weight: hist.total_weight,
            clamped_weight: hist.clamped_weight,
            trace_total: hist.trace_total,
            max_sum_rule_deviation: hist.max_sum_rule_deviation,
            ei_range: (hist.ei_edges[0], hist.ei_edges[bins]),
            ef_range: (hist.ef_edges[0], hist.ef_edges[bins]),
        },
        compare: CompareSection {
            analytic: analytic_cmp,
            oracle: oracle_cmp,
            oracle_unavailable,
        },
        stats,
    };
    Ok(Outcome::ok(vec![
        Artifact::json("stats", &report)?,
        Artifact::csv("histogram", &ht),
        Artifact::csv("gaussian", &gt),
    ]))
}

// ---------------------------------------------------------------------------
// sweep

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub spec: ModelSpec,
    pub xi: Flagged,
    pub mu40: Flagged,
    pub mu31: Flagged,
    pub mu22: Flagged,
    pub k40: Flagged,
    pub k31: Flagged,
    pub k22: Flagged,
    pub asymptotic: Option<Asymptotics>,
    /// `|finite − limit|` for ξ, μ40, μ31 and μ22.
    pub delta_xi: Option<f64>,
    pub delta_mu40: Option<f64>,
    pub delta_mu31: Option<f64>,
    pub delta_mu22: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub axis: Option<String>,
    pub rows: Vec<SweepRow>,
}

pub fn sweep_rows(specs: &[ModelSpec]) -> Result<Vec<SweepRow>> {
    specs
        .iter()
        .map(|spec| {
            let c = analytic::cumulants(&analytic::moment_set(spec, None)?)?;
            let a = asymptotics_for(spec);
            let delta = |f: Flagged, lim: Option<f64>| Some((f.value? - lim?).abs());
            Ok(SweepRow {
                spec: spec.clone(),
                xi: c.xi,
                mu40: c.mu40,
                mu31: c.mu31,
                mu22: c.mu22,
                k40: c.k40,
                k31: c.k31,
                k22: c.k22,
                asymptotic: a,
                delta_xi: delta(c.xi, a.map(|a| a.xi_inf)),
                delta_mu40: delta(c.mu40, a.map(|a| a.mu40_inf)),
                delta_mu31: delta(c.mu31, a.map(|a| a.mu31_inf)),
                delta_mu22: delta(c.mu22, a.map(|a| a.mu22_inf)),
            })
        })
        .collect()
}

fn axis_value(spec: &ModelSpec, axis: &str) -> Option<u64> {
    match serde_json::to_value(spec).ok()? {
        serde_json::Value::Object(o) => o.get(axis)?.as_u64(),
        _ => None,
    }
}

pub fn sweep_table(r: &SweepReport) -> CsvTable {
    let mut t = CsvTable::new(&[
        "axis", "value", "xi", "xi_status", "mu40", "mu40_status", "mu31", "mu31_status", "mu22", "mu22_status", "k40", "k31",
        "k22", "k22_status", "xi_inf", "mu40_inf", "mu31_inf", "mu22_inf", "delta_xi", "delta_mu40", "delta_mu31", "delta_mu22",
    ]);
    let axis = r.axis.clone().unwrap_or_default();
    for row in &r.rows {
        let a = row.asymptotic;
        t.push(vec![
            axis.clone(),
            axis_value(&row.spec, &axis).map(|v| v.to_string()).unwrap_or_default(),
            num(row.xi.value),
            row.xi.status.to_string(),
            num(row.mu40.value),
            row.mu40.status.to_string(),
            num(row.mu31.value),
            row.mu31.status.to_string(),
            num(row.mu22.value),
            row.mu22.status.to_string(),
            num(row.k40.value),
            num(row.k31.value),
            num(row.k22.value),
            row.k22.status.to_string(),
            num(a.map(|a| a.xi_inf)),
            num(a.map(|a| a.mu40_inf)),
            num(a.map(|a| a.mu31_inf)),
            num(a.map(|a| a.mu22_inf)),
            num(row.delta_xi),
            num(row.delta_mu40),
            num(row.delta_mu31),
            num(row.delta_mu22),
        ]);
    }
    t
}

pub fn cmd_sweep(cfg: &RunConfig, opts: &Options) -> Result<Outcome> {
    let specs = cfg.specs()?;
    if specs.is_empty() {
        return Err(CliError::Validation("sweep needs a model with one list-valued field".into()));
    }
    let report = SweepReport {
        axis: cfg.sweep.as_ref().map(|s| s.axis.clone()),
        rows: sweep_rows(&specs)?,
    };
    Ok(Outcome::ok(encode("sweep", opts.format, &report, || sweep_table(&report))?))
}
