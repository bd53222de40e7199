//! Closed-form finite-N moments, scaled moments and cumulants, dilute-limit
//! values, and the bivariate-Gaussian strength density.
//!
//! Moments follow `M_PQ = E tr(O† H_f^Q O H_i^P) / dim(initial)`. Every sum
//! over `ν` is accumulated in exact integers and converted to `f64` once.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::combinat::{binom, d_irrep, lambda_coeff, BigCount, CombinatError};
use crate::ensembles::{EnsembleError, ModelSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalyticError {
    #[error(transparent)]
    Combinat(#[from] CombinatError),
    #[error(transparent)]
    Spec(#[from] EnsembleError),
    #[error("{0} is only defined for the number_conserving kind")]
    KindMismatch(&'static str),
    #[error("moment {0} is missing or non-positive")]
    ZeroVariance(&'static str),
    #[error("correlation coefficient must satisfy |xi| < 1, got {0}")]
    InvalidCorrelation(f64),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid Racah channel: {0}")]
    InvalidRacah(String),
}

pub type Result<T> = std::result::Result<T, AnalyticError>;

/// How complete a reported number is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Completeness {
    Exact,
    /// Some terms are missing (the third term of `M22` without Racah input).
    Partial,
    /// No closed form here; the oracle is the source of this number.
    OracleOnly,
}

impl fmt::Display for Completeness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Completeness::Exact => "exact",
            Completeness::Partial => "partial",
            Completeness::OracleOnly => "oracle-only",
        })
    }
}

/// A number with its completeness flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Flagged {
    pub value: Option<f64>,
    pub status: Completeness,
}

impl Flagged {
    pub fn exact(value: f64) -> Flagged {
        Flagged {
            value: Some(value),
            status: Completeness::Exact,
        }
    }

    pub fn partial(value: f64) -> Flagged {
        Flagged {
            value: Some(value),
            status: Completeness::Partial,
        }
    }

    pub fn oracle_only() -> Flagged {
        Flagged {
            value: None,
            status: Completeness::OracleOnly,
        }
    }

    pub fn is_exact(&self) -> bool {
        self.status == Completeness::Exact && self.value.is_some()
    }

    /// Combines inputs: the worst status wins and any missing value propagates.
    fn derive(inputs: &[Flagged], f: impl FnOnce(&[f64]) -> f64) -> Flagged {
        let status = inputs.iter().map(|x| x.status).max().unwrap_or(Completeness::Exact);
        let values: Option<Vec<f64>> = inputs.iter().map(|x| x.value).collect();
        Flagged {
            value: values.map(|v| f(&v)),
            status,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    Oracle,
    Mc,
}

/// All `(P, Q)` with `P + Q <= 4`, in a fixed order.
pub const MOMENT_KEYS: [(usize, usize); 15] = [
    (0, 0),
    (1, 0),
    (0, 1),
    (2, 0),
    (1, 1),
    (0, 2),
    (3, 0),
    (2, 1),
    (1, 2),
    (0, 3),
    (4, 0),
    (3, 1),
    (2, 2),
    (1, 3),
    (0, 4),
];

pub fn moment_name(p: usize, q: usize) -> String {
    format!("M{p}{q}")
}

fn key_index(p: usize, q: usize) -> usize {
    MOMENT_KEYS
        .iter()
        .position(|&k| k == (p, q))
        .unwrap_or_else(|| panic!("no moment M{p}{q} with P+Q <= 4"))
}

/// Bivariate moments `M_PQ`, `P + Q <= 4`, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "MomentSetRepr", try_from = "MomentSetRepr")]
pub struct MomentSet {
    pub provenance: Provenance,
    values: [Flagged; 15],
}

impl MomentSet {
    /// Every even entry flagged oracle-only; odd entries exact zeros.
    pub fn empty(provenance: Provenance) -> MomentSet {
        let mut values = [Flagged::oracle_only(); 15];
        for (i, &(p, q)) in MOMENT_KEYS.iter().enumerate() {
            if (p + q) % 2 == 1 {
                values[i] = Flagged::exact(0.0);
            }
        }
        MomentSet { provenance, values }
    }

    pub fn get(&self, p: usize, q: usize) -> Flagged {
        self.values[key_index(p, q)]
    }

    pub fn set(&mut self, p: usize, q: usize, value: Flagged) {
        self.values[key_index(p, q)] = value;
    }

    /// Value of an entry regardless of flag.
    pub fn value(&self, p: usize, q: usize) -> Option<f64> {
        self.get(p, q).value
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), Flagged)> + '_ {
        MOMENT_KEYS.iter().copied().zip(self.values.iter().copied())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MomentSetRepr {
    provenance: Provenance,
    moments: BTreeMap<String, Flagged>,
}

impl From<MomentSet> for MomentSetRepr {
    fn from(ms: MomentSet) -> Self {
        MomentSetRepr {
            provenance: ms.provenance,
            moments: ms.iter().map(|((p, q), v)| (moment_name(p, q), v)).collect(),
        }
    }
}

impl TryFrom<MomentSetRepr> for MomentSet {
    type Error = String;

    fn try_from(r: MomentSetRepr) -> std::result::Result<Self, String> {
        let mut ms = MomentSet::empty(r.provenance);
        for &(p, q) in &MOMENT_KEYS {
            let name = moment_name(p, q);
            let v = r.moments.get(&name).ok_or_else(|| format!("missing {name}"))?;
            ms.set(p, q, *v);
        }
        if r.moments.len() != MOMENT_KEYS.len() {
            return Err("unexpected moment keys".into());
        }
        Ok(ms)
    }
}

fn lam(n: usize, m: usize, r: usize, mu: usize) -> Result<BigCount> {
    Ok(lambda_coeff(n as i64, m as i64, r as i64, mu as i64)?)
}

fn c(n: usize, r: usize) -> Result<BigCount> {
    Ok(binom(n as i64, r as i64)?)
}

/// `Σ_ν Π_j Λ^ν(N,m,r_j) · d(N:ν)` for `ν = 0..=upper`.
fn lambda_sum(n: usize, m: usize, rs: &[usize], extra_lambda_square: Option<usize>, upper: usize) -> Result<BigCount> {
    let mut total = BigCount::ZERO;
    for nu in 0..=upper {
        let mut term = BigCount::ONE;
        for &r in rs {
            term = term.checked_mul(lam(n, m, r, nu)?)?;
        }
        if let Some(r) = extra_lambda_square {
            let l = lam(n, m, r, nu)?;
            term = term.checked_mul(l)?.checked_mul(l)?;
        }
        if term.is_zero() {
            continue;
        }
        term = term.checked_mul(d_irrep(n as i64, nu as i64)?)?;
        total = total.checked_add(term)?;
    }
    Ok(total)
}

/// `num / Π dens`, exactly up to a single rounding when the product fits.
fn ratio(num: BigCount, dens: &[BigCount]) -> f64 {
    let mut den = BigCount::ONE;
    for &d in dens {
        match den.checked_mul(d) {
            Ok(p) => den = p,
            Err(_) => {
                return dens.iter().fold(num.to_f64(), |acc, d| acc / d.to_f64());
            }
        }
    }
    num.to_f64() / den.to_f64()
}

/// `⟨H^2⟩` and `⟨H^4⟩` for an EGUE(k) in `(N, m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HMoments {
    pub h2: f64,
    pub h4: f64,
}

impl HMoments {
    /// `⟨H^4⟩ / ⟨H^2⟩^2`.
    pub fn mu4(&self) -> f64 {
        self.h4 / (self.h2 * self.h2)
    }
}

pub fn h_moments(n: usize, m: usize, k: usize, v_h: f64) -> Result<HMoments> {
    check_nmk(n, m, k)?;
    let l0 = lam(n, m, k, 0)?;
    let s = lambda_sum(n, m, &[k, m - k], None, k.min(m - k))?;
    let h2 = v_h * l0.to_f64();
    let h4 = 2.0 * h2 * h2 + v_h * v_h * ratio(s, &[c(n, m)?]);
    Ok(HMoments { h2, h4 })
}

fn check_nmk(n: usize, m: usize, k: usize) -> Result<()> {
    if k > m || m > n {
        return Err(AnalyticError::Spec(EnsembleError::InvalidSpec(format!(
            "need k <= m <= N, got k={k} m={m} N={n}"
        ))));
    }
    Ok(())
}

/// `⟨H^2⟩` of the two-species Hamiltonian in sector `(m1, m2)`.
pub fn two_species_h2(spec: &ModelSpec, m1: usize, m2: usize) -> Result<f64> {
    let ModelSpec::BetaDecay { n1, n2, k, .. } = *spec else {
        return Err(AnalyticError::KindMismatch("two_species_h2"));
    };
    let mut total = 0.0;
    for i in 0..=k {
        let j = k - i;
        let w = lam(n1, m1, i, 0)?.checked_mul(lam(n2, m2, j, 0)?)?;
        total += spec.block_variance(i, j) * w.to_f64();
    }
    Ok(total)
}

/// `(⟨O†O⟩, ⟨OO†⟩)`, both averaged over the initial sector; in the second
/// ordering `O†` acts first and leaves the initial sector the other way.
pub fn oo_norm(spec: &ModelSpec) -> Result<(f64, f64)> {
    spec.validate()?;
    Ok(match *spec {
        ModelSpec::NumberConserving { n, m, t, v_o, .. } => {
            let v = v_o * lam(n, m, t, 0)?.to_f64();
            (v, v)
        }
        ModelSpec::Removal { n, m, k0, v_o, .. } => {
            (v_o * c(m, k0)?.to_f64(), v_o * c(n - m, k0)?.to_f64())
        }
        ModelSpec::BetaDecay {
            n1, n2, m1, m2, k0, v_o, ..
        } => (
            v_o * c(n1 - m1, k0)?.checked_mul(c(m2, k0)?)?.to_f64(),
            v_o * c(n2 - m2, k0)?.checked_mul(c(m1, k0)?)?.to_f64(),
        ),
    })
}

fn m11_sum(n: usize, m: usize, k: usize, t: usize) -> Result<BigCount> {
    lambda_sum(n, m, &[t, m - k], None, k.min(m - t))
}

/// `M11`; exact for the number-conserving kind and oracle-only otherwise.
pub fn m11(spec: &ModelSpec) -> Result<Flagged> {
    spec.validate()?;
    let ModelSpec::NumberConserving { n, m, k, t, v_h, v_o } = *spec else {
        return Ok(Flagged::oracle_only());
    };
    let s = m11_sum(n, m, k, t)?;
    Ok(Flagged::exact(v_o * v_h * ratio(s, &[c(n, m)?])))
}

/// Bivariate correlation coefficient `M11 / sqrt(M20 M02)`.
pub fn xi(n: usize, m: usize, k: usize, t: usize) -> Result<f64> {
    check_nmk(n, m, k)?;
    check_nmk(n, m, t)?;
    let s = m11_sum(n, m, k, t)?;
    Ok(ratio(s, &[c(n, m)?, lam(n, m, t, 0)?, lam(n, m, k, 0)?]))
}

pub fn m31(n: usize, m: usize, k: usize, t: usize, v_h: f64, v_o: f64) -> Result<f64> {
    check_nmk(n, m, k)?;
    check_nmk(n, m, t)?;
    let s11 = m11_sum(n, m, k, t)?;
    let s31 = lambda_sum(n, m, &[t, k, m - k], None, k.min(m - k).min(m - t))?;
    let two_l0 = lam(n, m, k, 0)?.checked_mul(BigCount::new(2))?;
    let total = two_l0.checked_mul(s11)?.checked_add(s31)?;
    Ok(v_o * v_h * v_h * ratio(total, &[c(n, m)?]))
}

/// The two closed-form terms of `M22`, already multiplied by the variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct M22Terms {
    pub term1: f64,
    pub term2: f64,
}

pub fn m22_terms(n: usize, m: usize, k: usize, t: usize, v_h: f64, v_o: f64) -> Result<M22Terms> {
    check_nmk(n, m, k)?;
    check_nmk(n, m, t)?;
    let h2 = v_h * lam(n, m, k, 0)?.to_f64();
    let oo = v_o * lam(n, m, t, 0)?.to_f64();
    let s2 = lambda_sum(n, m, &[m - t], Some(k), t.min(m - k))?;
    Ok(M22Terms {
        term1: oo * h2 * h2,
        term2: v_o * v_h * v_h * ratio(s2, &[c(n, m)?]),
    })
}

/// Squared-U combination `Σ_ρ U(f_m ν1 f_m ν2; f_m ν)²_ρ` for one channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RacahChannel {
    pub nu: usize,
    pub nu1: usize,
    pub nu2: usize,
    pub u2: f64,
}

/// Source of the third term of `M22`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RacahInput {
    /// A table of squared U-coefficients per `(ν, ν1, ν2)`.
    Channels(Vec<RacahChannel>),
    /// The third term per unit `V_O² V_H⁴`, as extracted by the oracle.
    Aggregated(f64),
}

/// Weight of channel `(ν, ν1, ν2)` in the third term, per unit variances:
/// `C(N,m)^-2 Λ^ν(N,m,k) Λ^ν1(N,m,m-t) Λ^ν2(N,m,m-k) d(N:ν1) d(N:ν2)`.
pub fn racah_channel_weight(n: usize, m: usize, k: usize, t: usize, nu: usize, nu1: usize, nu2: usize) -> Result<f64> {
    check_nmk(n, m, k)?;
    check_nmk(n, m, t)?;
    let parts = [lam(n, m, k, nu)?, lam(n, m, m - t, nu1)?, lam(n, m, m - k, nu2)?];
    if parts.iter().any(|p| p.is_zero()) {
        return Ok(0.0);
    }
    let mut num = BigCount::ONE;
    for p in parts {
        num = num.checked_mul(p)?;
    }
    num = num
        .checked_mul(d_irrep(n as i64, nu1 as i64)?)?
        .checked_mul(d_irrep(n as i64, nu2 as i64)?)?;
    let cm = c(n, m)?;
    Ok(ratio(num, &[cm, cm]))
}

fn term3_from(n: usize, m: usize, k: usize, t: usize, input: &RacahInput) -> Result<f64> {
    match input {
        RacahInput::Aggregated(v) => Ok(*v),
        RacahInput::Channels(chs) => {
            let mut total = 0.0;
            for ch in chs {
                if ch.nu > (k + t).min(m - k) || ch.nu1 > t || ch.nu2 > k {
                    return Err(AnalyticError::InvalidRacah(format!(
                        "channel (nu={}, nu1={}, nu2={}) outside the summation range",
                        ch.nu, ch.nu1, ch.nu2
                    )));
                }
                total += racah_channel_weight(n, m, k, t, ch.nu, ch.nu1, ch.nu2)? * ch.u2;
            }
            Ok(total)
        }
    }
}

/// `M22`: exact with Racah input, otherwise `term1 + term2` flagged partial.
pub fn m22(n: usize, m: usize, k: usize, t: usize, v_h: f64, v_o: f64, racah: Option<&RacahInput>) -> Result<Flagged> {
    let terms = m22_terms(n, m, k, t, v_h, v_o)?;
    let base = terms.term1 + terms.term2;
    Ok(match racah {
        Some(input) => Flagged::exact(base + v_o * v_h * v_h * term3_from(n, m, k, t, input)?),
        None => Flagged::partial(base),
    })
}

/// Weight of the dominant `ν = t + k`, `ν1 = t`, `ν2 = k` channel; the
/// third term over this weight is the implied squared U-coefficient.
pub fn dominant_racah_weight(n: usize, m: usize, k: usize, t: usize) -> Result<f64> {
    racah_channel_weight(n, m, k, t, t + k, t, k)
}

/// Moments available from factorization alone: `M00`, `M20`, `M02`, `M40`, `M04`.
pub fn factorized_moments(spec: &ModelSpec) -> Result<MomentSet> {
    spec.validate()?;
    let (o_dag_o, _) = oo_norm(spec)?;
    let mut ms = MomentSet::empty(Provenance::Analytic);
    ms.set(0, 0, Flagged::exact(o_dag_o));
    match *spec {
        ModelSpec::NumberConserving { n, m, k, v_h, .. } => {
            let h = h_moments(n, m, k, v_h)?;
            ms.set(2, 0, Flagged::exact(o_dag_o * h.h2));
            ms.set(0, 2, Flagged::exact(o_dag_o * h.h2));
            ms.set(4, 0, Flagged::exact(o_dag_o * h.h4));
            ms.set(0, 4, Flagged::exact(o_dag_o * h.h4));
        }
        ModelSpec::Removal { n, m, k, k0, v_h, .. } => {
            let hi = h_moments(n, m, k, v_h)?;
            // A k-body H has no matrix elements below k particles.
            let hf = if k <= m - k0 {
                h_moments(n, m - k0, k, v_h)?
            } else {
                HMoments { h2: 0.0, h4: 0.0 }
            };
            ms.set(2, 0, Flagged::exact(o_dag_o * hi.h2));
            ms.set(0, 2, Flagged::exact(o_dag_o * hf.h2));
            ms.set(4, 0, Flagged::exact(o_dag_o * hi.h4));
            ms.set(0, 4, Flagged::exact(o_dag_o * hf.h4));
        }
        ModelSpec::BetaDecay { m1, m2, k0, .. } => {
            ms.set(2, 0, Flagged::exact(o_dag_o * two_species_h2(spec, m1, m2)?));
            ms.set(0, 2, Flagged::exact(o_dag_o * two_species_h2(spec, m1 + k0, m2 - k0)?));
        }
    }
    Ok(ms)
}

/// Every analytic moment for `spec`, with `M22` completed when Racah input is given.
pub fn moment_set(spec: &ModelSpec, racah: Option<&RacahInput>) -> Result<MomentSet> {
    let mut ms = factorized_moments(spec)?;
    if let ModelSpec::NumberConserving { n, m, k, t, v_h, v_o } = *spec {
        ms.set(1, 1, m11(spec)?);
        let v31 = Flagged::exact(m31(n, m, k, t, v_h, v_o)?);
        ms.set(3, 1, v31);
        ms.set(1, 3, v31);
        ms.set(2, 2, m22(n, m, k, t, v_h, v_o, racah)?);
    }
    Ok(ms)
}

/// Dilute-limit values of the shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Asymptotics {
    pub xi_inf: f64,
    pub mu40_inf: f64,
    pub mu31_inf: f64,
    pub mu22_inf: f64,
}

impl Asymptotics {
    pub fn k40_inf(&self) -> f64 {
        self.mu40_inf - 3.0
    }

    pub fn k31_inf(&self) -> f64 {
        self.mu31_inf - 3.0 * self.xi_inf
    }

    pub fn k22_inf(&self) -> f64 {
        self.mu22_inf - 2.0 * self.xi_inf * self.xi_inf - 1.0
    }
}

pub fn asymptotics(m: usize, k: usize, t: usize) -> Result<Asymptotics> {
    if k > m || t > m {
        return Err(AnalyticError::Spec(EnsembleError::InvalidSpec(format!(
            "need k, t <= m, got k={k} t={t} m={m}"
        ))));
    }
    let cmk = c(m, k)?;
    let cmtk = c(m - t, k)?;
    let xi_inf = ratio(cmtk, &[cmk]);
    let mu40_inf = 2.0 + ratio(c(m - k, k)?, &[cmk]);
    let tail = if m >= t + k { c(m - t - k, k)? } else { BigCount::ZERO };
    let mu22_inf = 1.0 + ratio(cmtk.checked_mul(cmtk)?, &[cmk, cmk]) + ratio(tail.checked_mul(cmtk)?, &[cmk, cmk]);
    Ok(Asymptotics {
        xi_inf,
        mu40_inf,
        mu31_inf: xi_inf * mu40_inf,
        mu22_inf,
    })
}

/// Scaled moments and fourth-order cumulants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CumulantReport {
    pub xi: Flagged,
    pub mu40: Flagged,
    pub mu04: Flagged,
    pub mu31: Flagged,
    pub mu13: Flagged,
    pub mu22: Flagged,
    pub k40: Flagged,
    pub k04: Flagged,
    pub k31: Flagged,
    pub k13: Flagged,
    pub k22: Flagged,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub asymptotic: Option<Asymptotics>,
}

pub fn cumulants(ms: &MomentSet) -> Result<CumulantReport> {
    let m00 = ms.get(0, 0);
    let positive = |f: Flagged, name: &'static str| match f.value {
        Some(v) if v > 0.0 => Ok(v),
        _ => Err(AnalyticError::ZeroVariance(name)),
    };
    let d00 = positive(m00, "M00")?;
    let s20 = positive(ms.get(2, 0), "M20")? / d00;
    let s02 = positive(ms.get(0, 2), "M02")? / d00;
    let scaled = |p: usize, q: usize| {
        let f = ms.get(p, q);
        Flagged {
            value: f
                .value
                .map(|v| v / d00 / (s20.powf(p as f64 / 2.0) * s02.powf(q as f64 / 2.0))),
            status: f.status.max(m00.status),
        }
    };
    let xi = scaled(1, 1);
    let mu40 = scaled(4, 0);
    let mu04 = scaled(0, 4);
    let mu31 = scaled(3, 1);
    let mu13 = scaled(1, 3);
    let mu22 = scaled(2, 2);
    Ok(CumulantReport {
        xi,
        mu40,
        mu04,
        mu31,
        mu13,
        mu22,
        k40: Flagged::derive(&[mu40], |v| v[0] - 3.0),
        k04: Flagged::derive(&[mu04], |v| v[0] - 3.0),
        k31: Flagged::derive(&[mu31, xi], |v| v[0] - 3.0 * v[1]),
        k13: Flagged::derive(&[mu13, xi], |v| v[0] - 3.0 * v[1]),
        k22: Flagged::derive(&[mu22, xi], |v| v[0] - 2.0 * v[1] * v[1] - 1.0),
        asymptotic: None,
    })
}

impl CumulantReport {
    pub fn with_asymptotics(mut self, asym: Asymptotics) -> CumulantReport {
        self.asymptotic = Some(asym);
        self
    }
}

/// Grid extent and resolution for [`gaussian_density`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points_i: usize,
    pub points_f: usize,
    /// Half-width of each axis in units of its sigma.
    pub extent_sigmas: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            points_i: 101,
            points_f: 101,
            extent_sigmas: 6.0,
        }
    }
}

/// Strength density sampled on a regular `(E_i, E_f)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthDensityGrid {
    pub ei_axis: Vec<f64>,
    pub ef_axis: Vec<f64>,
    /// `values[a][b]` is the density at `(ei_axis[a], ef_axis[b])`.
    pub values: Vec<Vec<f64>>,
    pub normalization: f64,
}

/// Discrete moments of a grid under the rectangle rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMoments {
    pub total: f64,
    pub ei2: f64,
    pub ef2: f64,
    pub eief: f64,
}

impl StrengthDensityGrid {
    fn spacing(axis: &[f64]) -> f64 {
        if axis.len() < 2 {
            1.0
        } else {
            axis[1] - axis[0]
        }
    }

    /// `Σ values ΔEi ΔEf` and normalized second moments.
    pub fn moments(&self) -> GridMoments {
        let cell = Self::spacing(&self.ei_axis) * Self::spacing(&self.ef_axis);
        let (mut w, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0);
        for (a, row) in self.values.iter().enumerate() {
            let x = self.ei_axis[a];
            for (b, &v) in row.iter().enumerate() {
                let y = self.ef_axis[b];
                w += v;
                xx += v * x * x;
                yy += v * y * y;
                xy += v * x * y;
            }
        }
        GridMoments {
            total: w * cell,
            ei2: xx / w,
            ef2: yy / w,
            eief: xy / w,
        }
    }
}

/// `norm · ρ_biv(E_i/σ_i, E_f/σ_f; ξ) / (σ_i σ_f)` on a centered grid.
pub fn gaussian_density(sigma_i: f64, sigma_f: f64, xi: f64, norm: f64, grid: GridSpec) -> Result<StrengthDensityGrid> {
    if !(xi.abs() < 1.0) {
        return Err(AnalyticError::InvalidCorrelation(xi));
    }
    if !(sigma_i > 0.0 && sigma_f > 0.0) {
        return Err(AnalyticError::InvalidGrid("sigmas must be positive".into()));
    }
    if grid.points_i < 2 || grid.points_f < 2 || !(grid.extent_sigmas > 0.0) {
        return Err(AnalyticError::InvalidGrid(format!("{grid:?}")));
    }
    let axis = |sigma: f64, points: usize| -> Vec<f64> {
        let half = grid.extent_sigmas * sigma;
        let step = 2.0 * half / (points - 1) as f64;
        (0..points).map(|i| -half + step * i as f64).collect()
    };
    let ei_axis = axis(sigma_i, grid.points_i);
    let ef_axis = axis(sigma_f, grid.points_f);
    let one_minus = 1.0 - xi * xi;
    let pref = norm / (2.0 * std::f64::consts::PI * one_minus.sqrt() * sigma_i * sigma_f);
    let values = ei_axis
        .iter()
        .map(|&ei| {
            let x = ei / sigma_i;
            ef_axis
                .iter()
                .map(|&ef| {
                    let y = ef / sigma_f;
                    pref * (-(x * x - 2.0 * xi * x * y + y * y) / (2.0 * one_minus)).exp()
                })
                .collect()
        })
        .collect();
    Ok(StrengthDensityGrid {
        ei_axis,
        ef_axis,
        values,
        normalization: norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    fn nc(n: usize, m: usize, k: usize, t: usize) -> ModelSpec {
        ModelSpec::NumberConserving {
            n,
            m,
            k,
            t,
            v_h: 1.0,
            v_o: 1.0,
        }
    }

    #[test]
    fn h_moment_examples() {
        let h = h_moments(6, 3, 3, 1.0).unwrap();
        assert_eq!(h.h2, 20.0);
        assert!(rel(h.mu4(), 2.0025) < 1e-15);
        assert_eq!(h_moments(6, 3, 2, 2.0).unwrap().h2, 60.0);
        let s = h_moments(7, 3, 0, 1.5).unwrap();
        assert_eq!(s.h2, 1.5);
        assert!(rel(s.h4, 3.0 * 1.5 * 1.5) < 1e-15);
    }

    #[test]
    fn norm_examples() {
        assert_eq!(oo_norm(&nc(6, 3, 2, 2)).unwrap(), (30.0, 30.0));
        let removal = ModelSpec::Removal {
            n: 6,
            m: 3,
            k: 2,
            k0: 1,
            v_h: 1.0,
            v_o: 1.0,
        };
        assert_eq!(oo_norm(&removal).unwrap(), (3.0, 3.0));
        let beta = ModelSpec::BetaDecay {
            n1: 4,
            n2: 4,
            m1: 1,
            m2: 2,
            k: 1,
            k0: 1,
            v_h: 1.0,
            v_h_ij: vec![],
            v_o: 1.0,
        };
        assert_eq!(oo_norm(&beta).unwrap(), (6.0, 2.0));
    }

    #[test]
    fn m11_and_xi_examples() {
        assert_eq!(m11(&nc(4, 2, 1, 1)).unwrap(), Flagged::exact(16.0));
        assert!(rel(xi(4, 2, 1, 1).unwrap(), 16.0 / 36.0) < 1e-15);
        assert_eq!(xi(7, 3, 2, 0).unwrap(), 1.0);
        let removal = ModelSpec::Removal {
            n: 6,
            m: 3,
            k: 2,
            k0: 1,
            v_h: 1.0,
            v_o: 1.0,
        };
        assert_eq!(m11(&removal).unwrap().status, Completeness::OracleOnly);
    }

    #[test]
    fn t_zero_reduces_to_h_moments() {
        for (n, m, k) in [(6, 3, 2), (7, 3, 1), (8, 4, 3)] {
            let h = h_moments(n, m, k, 1.0).unwrap();
            assert!(rel(m31(n, m, k, 0, 1.0, 1.0).unwrap(), h.h4) < 1e-14);
            let t = m22_terms(n, m, k, 0, 1.0, 1.0).unwrap();
            assert!(rel(t.term1 + t.term2, 2.0 * h.h2 * h.h2) < 1e-14);
        }
    }

    #[test]
    fn frozen_values_from_independent_contraction() {
        // (N, m, k, t): M20, M40, M11, M31, M22 with unit variances.
        let table: [((usize, usize, usize, usize), [f64; 5]); 6] = [
            ((4, 2, 1, 1), [36.0, 528.0, 16.0, 248.0, 288.0]),
            ((5, 2, 2, 1), [80.0, 1608.0, 8.0, 168.0, 888.0]),
            ((5, 3, 1, 2), [162.0, 3726.0, 54.0, 1350.0, 1818.0]),
            ((6, 3, 2, 1), [360.0, 22572.0, 108.0, 7074.0, 12744.0]),
            ((6, 2, 1, 1), [100.0, 2440.0, 44.0, 1096.0, 1208.0]),
            ((6, 3, 2, 2), [900.0, 56430.0, 81.0, 5778.0, 28080.0]),
        ];
        for ((n, m, k, t), [m20, m40, v11, v31, v22]) in table {
            let ms = moment_set(&nc(n, m, k, t), None).unwrap();
            assert!(rel(ms.value(2, 0).unwrap(), m20) < 1e-14);
            assert!(rel(ms.value(0, 2).unwrap(), m20) < 1e-14);
            assert!(rel(ms.value(4, 0).unwrap(), m40) < 1e-14, "M40 {n} {m} {k} {t}");
            assert!(rel(ms.value(1, 1).unwrap(), v11) < 1e-14);
            assert!(rel(ms.value(3, 1).unwrap(), v31) < 1e-14, "M31 {n} {m} {k} {t}");
            assert_eq!(ms.get(2, 2).status, Completeness::Partial);
            assert!(ms.value(2, 2).unwrap() <= v22 + 16.0);
        }
        let t = m22_terms(4, 2, 1, 1, 1.0, 1.0).unwrap();
        assert_eq!((t.term1, t.term2), (216.0, 56.0));
    }

    #[test]
    fn m22_with_racah_input() {
        let closed = m22(4, 2, 1, 1, 1.0, 1.0, Some(&RacahInput::Aggregated(16.0))).unwrap();
        assert_eq!(closed, Flagged::exact(288.0));
        let scaled = m22(4, 2, 1, 1, 2.0, 3.0, Some(&RacahInput::Aggregated(16.0))).unwrap();
        assert!(rel(scaled.value.unwrap(), 288.0 * 12.0) < 1e-14);
        // t = 0: the only channel is (ν, 0, ν2=ν) with U = 1, reproducing ⟨H⁴⟩.
        let (n, m, k) = (6, 3, 2);
        let channels: Vec<RacahChannel> = (0..=k.min(m - k))
            .map(|nu| RacahChannel { nu, nu1: 0, nu2: nu, u2: 1.0 })
            .collect();
        let full = m22(n, m, k, 0, 1.0, 1.0, Some(&RacahInput::Channels(channels))).unwrap();
        assert!(rel(full.value.unwrap(), h_moments(n, m, k, 1.0).unwrap().h4) < 1e-14);
        let bad = RacahInput::Channels(vec![RacahChannel { nu: 9, nu1: 0, nu2: 0, u2: 1.0 }]);
        assert!(m22(n, m, k, 0, 1.0, 1.0, Some(&bad)).is_err());
    }

    #[test]
    fn asymptotic_examples() {
        let a = asymptotics(12, 2, 2).unwrap();
        assert!(rel(a.xi_inf, 45.0 / 66.0) < 1e-15);
        assert_eq!(asymptotics(5, 5, 1).unwrap().mu40_inf, 2.0);
        let b = asymptotics(6, 2, 2).unwrap();
        assert!(rel(b.mu22_inf, 1.0 + 0.16 + 6.0 / 225.0) < 1e-15);
        assert!(rel(b.mu31_inf, b.xi_inf * b.mu40_inf) < 1e-15);
    }

    #[test]
    fn gue_limit_cumulant() {
        let ms = moment_set(&nc(6, 3, 3, 3), None).unwrap();
        let r = cumulants(&ms).unwrap();
        let d = 20.0f64;
        assert!((r.k40.value.unwrap() - (-1.0 + 1.0 / (d * d))).abs() < 1e-14);
        assert_eq!(r.k22.status, Completeness::Partial);
        assert_eq!(r.k40.status, Completeness::Exact);
    }

    #[test]
    fn gaussian_inputs_have_zero_cumulants() {
        for &x in &[0.0, 0.3, -0.7, 0.95] {
            let mut ms = MomentSet::empty(Provenance::Analytic);
            let (s20, s02, m00) = (2.0f64, 5.0f64, 3.0);
            let s = (s20 * s02).sqrt();
            ms.set(0, 0, Flagged::exact(m00));
            ms.set(2, 0, Flagged::exact(m00 * s20));
            ms.set(0, 2, Flagged::exact(m00 * s02));
            ms.set(1, 1, Flagged::exact(m00 * x * s));
            ms.set(4, 0, Flagged::exact(m00 * 3.0 * s20 * s20));
            ms.set(0, 4, Flagged::exact(m00 * 3.0 * s02 * s02));
            ms.set(3, 1, Flagged::exact(m00 * 3.0 * x * s20 * s));
            ms.set(1, 3, Flagged::exact(m00 * 3.0 * x * s02 * s));
            ms.set(2, 2, Flagged::exact(m00 * (1.0 + 2.0 * x * x) * s20 * s02));
            let r = cumulants(&ms).unwrap();
            for k in [r.k40, r.k04, r.k31, r.k13, r.k22] {
                assert!(k.value.unwrap().abs() < 1e-12);
            }
            assert!((r.xi.value.unwrap() - x).abs() < 1e-15);
        }
    }

    #[test]
    fn cumulants_need_variances() {
        let ms = MomentSet::empty(Provenance::Analytic);
        assert!(matches!(cumulants(&ms), Err(AnalyticError::ZeroVariance(_))));
    }

    #[test]
    fn factorization_sectors() {
        let removal = ModelSpec::Removal {
            n: 6,
            m: 3,
            k: 2,
            k0: 1,
            v_h: 1.0,
            v_o: 1.0,
        };
        let ms = factorized_moments(&removal).unwrap();
        assert_eq!(ms.value(2, 0), Some(90.0));
        assert_eq!(ms.value(0, 2), Some(45.0));
        let beta = ModelSpec::BetaDecay {
            n1: 4,
            n2: 4,
            m1: 2,
            m2: 2,
            k: 2,
            k0: 1,
            v_h: 1.0,
            v_h_ij: vec![],
            v_o: 1.0,
        };
        assert_eq!(two_species_h2(&beta, 2, 2).unwrap(), 48.0);
        let ms = factorized_moments(&beta).unwrap();
        assert_eq!(ms.get(4, 0).status, Completeness::OracleOnly);
        let zero = ModelSpec::Removal {
            n: 6,
            m: 3,
            k: 2,
            k0: 0,
            v_h: 1.0,
            v_o: 1.0,
        };
        let z = factorized_moments(&zero).unwrap();
        let h = h_moments(6, 3, 2, 1.0).unwrap();
        assert_eq!(z.value(2, 0), z.value(0, 2));
        assert_eq!(z.value(4, 0), Some(h.h4));
    }

    #[test]
    fn gaussian_grid_moments() {
        let g = gaussian_density(1.0, 1.0, 0.5, 2.0, GridSpec::default()).unwrap();
        let mo = g.moments();
        assert!((mo.total - 2.0).abs() < 1e-6 * 2.0);
        assert!((mo.eief - 0.5).abs() < 1e-6);
        let g = gaussian_density(1.5, 0.7, -0.3, 1.0, GridSpec::default()).unwrap();
        let mo = g.moments();
        assert!(rel(mo.ei2, 2.25) < 1e-6);
        assert!(rel(mo.ef2, 0.49) < 1e-6);
        assert!((mo.eief / (1.5 * 0.7) + 0.3).abs() < 1e-6);
        assert!(g.values.iter().flatten().all(|&v| v >= 0.0));
        assert!(gaussian_density(1.0, 1.0, 1.0, 1.0, GridSpec::default()).is_err());
    }

    #[test]
    fn zero_correlation_grid_factorizes() {
        let g = gaussian_density(1.0, 2.0, 0.0, 1.0, GridSpec::default()).unwrap();
        let gi = |x: f64| (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        for (a, &x) in g.ei_axis.iter().enumerate().step_by(17) {
            for (b, &y) in g.ef_axis.iter().enumerate().step_by(13) {
                let expected = gi(x) * gi(y / 2.0) / 2.0;
                assert!((g.values[a][b] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn moment_set_round_trips_through_json() {
        let ms = moment_set(&nc(6, 3, 2, 2), None).unwrap();
        let text = serde_json::to_string(&ms).unwrap();
        assert!(text.contains("\"partial\""));
        let back: MomentSet = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ms);
    }

    proptest! {
        #[test]
        fn xi_is_symmetric_and_bounded(n in 2usize..24, m in 1usize..12, k in 0usize..6, t in 0usize..6) {
            prop_assume!(m <= n && k <= m && t <= m);
            let a = xi(n, m, k, t).unwrap();
            let b = xi(n, m, t, k).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn moments_scale_with_variances(n in 3usize..12, m in 1usize..6, k in 0usize..4, t in 0usize..4,
                                        ch in 0.1f64..5.0, co in 0.1f64..5.0) {
            prop_assume!(m <= n && k <= m && t <= m);
            let base = moment_set(&nc(n, m, k, t), None).unwrap();
            let spec = nc(n, m, k, t).with_variances(ch, co);
            let scaled = moment_set(&spec, None).unwrap();
            for ((p, q), f) in base.iter() {
                if let Some(v) = f.value {
                    let w = scaled.value(p, q).unwrap();
                    let factor = co * ch.powf((p + q) as f64 / 2.0);
                    prop_assert!((w - v * factor).abs() <= 1e-12 * (v * factor).abs().max(1e-300));
                }
            }
        }
    }
}
