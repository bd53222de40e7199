//! Sampling estimates of the bivariate moments and of the eigenbasis-resolved
//! strength distribution.
//!
//! Sample `s` draws from `RngStream::new(seed, s)`, so results depend only on
//! `(spec, n, seed)`. Samples run in parallel and are reduced in index order.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytic::{self, AnalyticError, Flagged, MomentSet, Provenance, MOMENT_KEYS};
use crate::ensembles::{Ensemble, EnsembleError, ModelSpec, Realization, RngStream};

/// Largest sector dimension sampled by default.
pub const DEFAULT_MC_CAP: usize = 4000;

/// Relative tolerance of the per-sample completeness sum rule.
pub const SUM_RULE_TOL: f64 = 1e-10;

/// Largest accepted eigen-residual relative to `‖H‖`.
pub const EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McError {
    #[error("at least two samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("at least one bin per axis is required")]
    NoBins,
    #[error("sector dimension {dim} exceeds the sampling cap {cap}")]
    CapExceeded { dim: usize, cap: usize },
    #[error("sample {sample}: eigen-residual {residual:e} exceeds tolerance")]
    Diagonalization { sample: u64, residual: f64 },
    #[error("sample {sample}: strength sum rule off by {deviation:e} (relative)")]
    SumRule { sample: u64, deviation: f64 },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
}

pub type Result<T> = std::result::Result<T, McError>;

/// A statistic and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

/// Shape parameters with jackknife errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeEstimates {
    pub xi: Estimate,
    pub k40: Estimate,
    pub k04: Estimate,
    pub k31: Estimate,
    pub k13: Estimate,
    pub k22: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleStats {
    pub spec: ModelSpec,
    pub seed: u64,
    pub n_samples: usize,
    pub moments: MomentSet,
    /// Standard error of each sample mean, keyed `Mpq`.
    pub stderr: BTreeMap<String, f64>,
    pub shape: ShapeEstimates,
}

impl EnsembleStats {
    pub fn stderr_of(&self, p: usize, q: usize) -> f64 {
        self.stderr[&analytic::moment_name(p, q)]
    }
}

fn check_cap(ens: &Ensemble, cap: usize) -> Result<()> {
    for dim in [ens.initial_dim(), ens.final_dim()] {
        if dim > cap {
            return Err(McError::CapExceeded { dim, cap });
        }
    }
    Ok(())
}

/// `tr(O† H_f^Q O H_i^P) / dim_i` for every key, in [`MOMENT_KEYS`] order.
fn sample_traces(r: &Realization) -> [f64; 15] {
    let o = &r.o.matrix;
    let hi = &r.h_initial.matrix;
    let hf = &r.h_final.matrix;
    // A_Q = H_f^Q O and B_P = O H_i^P, so the trace is Σ conj(A_Q) ∘ B_P.
    let mut a = vec![o.clone()];
    let mut b = vec![o.clone()];
    for _ in 0..4 {
        a.push(hf * a.last().unwrap());
        b.push(b.last().unwrap() * hi);
    }
    let dim = hi.nrows() as f64;
    let mut out = [0.0; 15];
    for (slot, &(p, q)) in out.iter_mut().zip(&MOMENT_KEYS) {
        let t: f64 = a[q].iter().zip(b[p].iter()).map(|(x, y)| (x.conj() * y).re).sum();
        *slot = t / dim;
    }
    out
}

fn moment_set_from(means: &[f64; 15]) -> MomentSet {
    let mut ms = MomentSet::empty(Provenance::Mc);
    for (&(p, q), &v) in MOMENT_KEYS.iter().zip(means) {
        ms.set(p, q, Flagged::exact(v));
    }
    ms
}

fn shape_of(means: &[f64; 15]) -> Option<[f64; 6]> {
    let c = analytic::cumulants(&moment_set_from(means)).ok()?;
    let v = [c.xi, c.k40, c.k04, c.k31, c.k13, c.k22].map(|f| f.value);
    Some(v.map(|x| x.unwrap_or(f64::NAN)))
}

fn jackknife(samples: &[[f64; 15]], sums: &[f64; 15]) -> Result<[Estimate; 6]> {
    let n = samples.len() as f64;
    let full = shape_of(&sums.map(|s| s / n)).ok_or(AnalyticError::ZeroVariance("M20"))?;
    let leave_out: Vec<[f64; 6]> = samples
        .par_iter()
        .map(|x| {
            let mut m = [0.0; 15];
            for i in 0..15 {
                m[i] = (sums[i] - x[i]) / (n - 1.0);
            }
            shape_of(&m).unwrap_or([f64::NAN; 6])
        })
        .collect();
    let mut out = [Estimate { value: 0.0, stderr: 0.0 }; 6];
    for j in 0..6 {
        let mean = leave_out.iter().map(|t| t[j]).sum::<f64>() / n;
        let var = leave_out.iter().map(|t| (t[j] - mean).powi(2)).sum::<f64>() * (n - 1.0) / n;
        out[j] = Estimate {
            value: full[j],
            stderr: var.sqrt(),
        };
    }
    Ok(out)
}

pub fn run(spec: &ModelSpec, n: usize, seed: u64) -> Result<EnsembleStats> {
    run_with_cap(spec, n, seed, DEFAULT_MC_CAP)
}

pub fn run_with_cap(spec: &ModelSpec, n: usize, seed: u64, cap: usize) -> Result<EnsembleStats> {
    if n < 2 {
        return Err(McError::TooFewSamples(n));
    }
    let ens = Ensemble::with_cap(spec, cap.max(crate::fock::DEFAULT_BASIS_CAP))?;
    check_cap(&ens, cap)?;
    let samples: Vec<[f64; 15]> = (0..n as u64)
        .into_par_iter()
        .map(|s| ens.realize(RngStream::new(seed, s)).map(|r| sample_traces(&r)))
        .collect::<std::result::Result<_, _>>()?;

    let mut sums = [0.0; 15];
    for x in &samples {
        for i in 0..15 {
            sums[i] += x[i];
        }
    }
    let nf = n as f64;
    let means = sums.map(|s| s / nf);
    let mut stderr = BTreeMap::new();
    for (i, &(p, q)) in MOMENT_KEYS.iter().enumerate() {
        let var = samples.iter().map(|x| (x[i] - means[i]).powi(2)).sum::<f64>() / (nf - 1.0);
        stderr.insert(analytic::moment_name(p, q), (var / nf).sqrt());
    }
    let [xi, k40, k04, k31, k13, k22] = jackknife(&samples, &sums)?;
    Ok(EnsembleStats {
        spec: spec.clone(),
        seed,
        n_samples: n,
        moments: moment_set_from(&means),
        stderr,
        shape: ShapeEstimates {
            xi,
            k40,
            k04,
            k31,
            k13,
            k22,
        },
    })
}

/// Binned `Σ |⟨E_f|O|E_i⟩|²` over all samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthHistogram {
    pub ei_edges: Vec<f64>,
    pub ef_edges: Vec<f64>,
    /// `weights[a][b]` for `E_i` bin `a` and `E_f` bin `b`.
    pub weights: Vec<Vec<f64>>,
    pub total_weight: f64,
    /// Part of `total_weight` that fell outside the range and went to edge bins.
    pub clamped_weight: f64,
    /// `Σ_samples tr(O†O)`, equal to `total_weight` by completeness.
    pub trace_total: f64,
    pub max_sum_rule_deviation: f64,
    pub n_samples: usize,
    pub initial_dim: usize,
}

impl StrengthHistogram {
    pub fn ei_centers(&self) -> Vec<f64> {
        self.ei_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn ef_centers(&self) -> Vec<f64> {
        self.ef_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Weight-normalized `(⟨E_i²⟩, ⟨E_f²⟩, ⟨E_i E_f⟩)` from bin centers.
    pub fn second_moments(&self) -> (f64, f64, f64) {
        let (ci, cf) = (self.ei_centers(), self.ef_centers());
        let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
        for (a, row) in self.weights.iter().enumerate() {
            for (b, &w) in row.iter().enumerate() {
                xx += w * ci[a] * ci[a];
                yy += w * cf[b] * cf[b];
                xy += w * ci[a] * cf[b];
            }
        }
        (xx / self.total_weight, yy / self.total_weight, xy / self.total_weight)
    }

    pub fn bin_width_i(&self) -> f64 {
        self.ei_edges[1] - self.ei_edges[0]
    }

    pub fn bin_width_f(&self) -> f64 {
        self.ef_edges[1] - self.ef_edges[0]
    }
}

fn eigh(h: &DMatrix<Complex64>, sample: u64) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
    let dim = h.nrows();
    if dim == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let eig = SymmetricEigen::new(h.clone());
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let scale = h.norm().max(f64::MIN_POSITIVE);
    let hv = h * &eig.eigenvectors;
    let mut worst: f64 = 0.0;
    for (j, &lambda) in values.iter().enumerate() {
        let r = (hv.column(j) - eig.eigenvectors.column(j) * Complex64::new(lambda, 0.0)).norm();
        worst = worst.max(r);
    }
    if worst > EIGEN_TOL * scale {
        return Err(McError::Diagonalization {
            sample,
            residual: worst / scale,
        });
    }
    Ok((values, eig.eigenvectors))
}

struct Resolved {
    ei: Vec<f64>,
    ef: Vec<f64>,
    /// `|⟨E_f|O|E_i⟩|²`, rows `f`, columns `i`.
    strength: DMatrix<f64>,
    trace: f64,
}

fn resolve(r: &Realization, sample: u64) -> Result<Resolved> {
    let (ei, vi) = eigh(&r.h_initial.matrix, sample)?;
    let (ef, vf) = if r.h_final.matrix == r.h_initial.matrix {
        (ei.clone(), vi.clone())
    } else {
        eigh(&r.h_final.matrix, sample)?
    };
    let o = &r.o.matrix;
    let rotated = vf.adjoint() * o * &vi;
    let strength = rotated.map(|z| z.norm_sqr());
    let trace = o.iter().map(|z| z.norm_sqr()).sum::<f64>();
    let total = strength.sum();
    let deviation = (total - trace).abs() / trace.max(f64::MIN_POSITIVE);
    if deviation > SUM_RULE_TOL {
        return Err(McError::SumRule { sample, deviation });
    }
    Ok(Resolved { ei, ef, strength, trace })
}

fn bin_of(x: f64, lo: f64, width: f64, bins: usize) -> (usize, bool) {
    let pos = ((x - lo) / width).floor();
    if pos < 0.0 {
        (0, true)
    } else if pos >= bins as f64 {
        (bins - 1, true)
    } else {
        (pos as usize, false)
    }
}

/// Histograms the strength on `bins x bins` cells spanning `±4σ` per axis,
/// with `σ² = M20/M00` (or `M02/M00`) from the trace moments of the same samples.
pub fn strength_histogram(spec: &ModelSpec, n: usize, seed: u64, bins: usize) -> Result<StrengthHistogram> {
    strength_histogram_with_cap(spec, n, seed, bins, DEFAULT_MC_CAP)
}

pub fn strength_histogram_with_cap(
    spec: &ModelSpec,
    n: usize,
    seed: u64,
    bins: usize,
    cap: usize,
) -> Result<StrengthHistogram> {
    if bins == 0 {
        return Err(McError::NoBins);
    }
    let stats = run_with_cap(spec, n, seed, cap)?;
    histogram_from_stats(&stats, bins, cap)
}

/// Same as [`strength_histogram`], reusing the ranges implied by `stats`.
pub fn histogram_from_stats(stats: &EnsembleStats, bins: usize, cap: usize) -> Result<StrengthHistogram> {
    if bins == 0 {
        return Err(McError::NoBins);
    }
    let spec = &stats.spec;
    let ens = Ensemble::with_cap(spec, cap.max(crate::fock::DEFAULT_BASIS_CAP))?;
    check_cap(&ens, cap)?;
    let m = |p, q| stats.moments.value(p, q).unwrap_or(0.0);
    let m00 = m(0, 0);
    let axis = |p: usize, q: usize| {
        let sigma = (m(p, q) / m00).max(0.0).sqrt();
        let half = if sigma > 0.0 { 4.0 * sigma } else { 1.0 };
        (-half, 2.0 * half / bins as f64)
    };
    let (lo_i, w_i) = axis(2, 0);
    let (lo_f, w_f) = axis(0, 2);

    let resolved: Vec<Resolved> = (0..stats.n_samples as u64)
        .into_par_iter()
        .map(|s| {
            let r = ens.realize(RngStream::new(stats.seed, s))?;
            resolve(&r, s)
        })
        .collect::<Result<_>>()?;

    let mut weights = vec![vec![0.0; bins]; bins];
    let (mut total, mut clamped, mut trace_total, mut worst) = (0.0, 0.0, 0.0, 0.0f64);
    for r in &resolved {
        let bi: Vec<(usize, bool)> = r.ei.iter().map(|&e| bin_of(e, lo_i, w_i, bins)).collect();
        let bf: Vec<(usize, bool)> = r.ef.iter().map(|&e| bin_of(e, lo_f, w_f, bins)).collect();
        let mut sample_total = 0.0;
        for (i, &(a, ca)) in bi.iter().enumerate() {
            for (f, &(b, cb)) in bf.iter().enumerate() {
                let w = r.strength[(f, i)];
                weights[a][b] += w;
                sample_total += w;
                if ca || cb {
                    clamped += w;
                }
            }
        }
        total += sample_total;
        trace_total += r.trace;
        worst = worst.max((sample_total - r.trace).abs() / r.trace.max(f64::MIN_POSITIVE));
    }
    let edges = |lo: f64, w: f64| (0..=bins).map(|j| lo + w * j as f64).collect::<Vec<_>>();
    Ok(StrengthHistogram {
        ei_edges: edges(lo_i, w_i),
        ef_edges: edges(lo_f, w_f),
        weights,
        total_weight: total,
        clamped_weight: clamped,
        trace_total,
        max_sum_rule_deviation: worst,
        n_samples: stats.n_samples,
        initial_dim: ens.initial_dim(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub moment: String,
    pub empirical: f64,
    pub predicted: f64,
    pub stderr: f64,
    pub z: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub moment: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub prediction_provenance: Provenance,
    pub entries: Vec<ZScore>,
    pub skipped: Vec<Skipped>,
}

impl CompareReport {
    pub fn any_flagged(&self) -> bool {
        self.entries.iter().any(|e| e.flagged)
    }

    pub fn entry(&self, p: usize, q: usize) -> Option<&ZScore> {
        let name = analytic::moment_name(p, q);
        self.entries.iter().find(|e| e.moment == name)
    }
}

/// z-scores of the sample means against `prediction`; `|z| > 3` is flagged.
///
/// Predictions that are not exact are skipped and listed with the reason.
pub fn compare(stats: &EnsembleStats, prediction: &MomentSet) -> CompareReport {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    for ((p, q), f) in prediction.iter() {
        let name = analytic::moment_name(p, q);
        let predicted = match (f.is_exact(), f.value) {
            (true, Some(v)) => v,
            _ => {
                skipped.push(Skipped {
                    moment: name,
                    reason: format!("prediction is {:?}", f.status),
                });
                continue;
            }
        };
        let empirical = stats.moments.value(p, q).unwrap_or(f64::NAN);
        let stderr = stats.stderr_of(p, q);
        let diff = empirical - predicted;
        let z = if stderr > 0.0 {
            diff / stderr
        } else if diff.abs() <= 1e-12 * predicted.abs().max(1.0) {
            0.0
        } else {
            f64::INFINITY.copysign(diff)
        };
        entries.push(ZScore {
            moment: name,
            empirical,
            predicted,
            stderr,
            z,
            flagged: !(z.abs() <= 3.0),
        });
    }
    CompareReport {
        prediction_provenance: prediction.provenance,
        entries,
        skipped,
    }
}
