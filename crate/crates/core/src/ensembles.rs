//! Random-operator specifications and their realizations.
//!
//! [`Ensemble`] resolves a [`ModelSpec`] into sectors and signed annihilator
//! maps once. Both the Monte Carlo sampler and the Wick oracle read their
//! covariance structure from it, so the two always agree on what the
//! operators mean.

use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::combinat;
use crate::fock::{
    self, AnnihilatorSet, Basis, BilinearEmbedder, EmbeddedOperator, FockBasis, FockError,
    SignedMap,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("invalid model: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Fock(#[from] FockError),
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

fn default_variance() -> f64 {
    1.0
}

/// Variance override for one `(i, j)` block of a two-species Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairVariance {
    pub i: usize,
    pub j: usize,
    pub v: f64,
}

/// An ensemble definition. Integer fields use the conventional symbols.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// `H` an EGUE(k) and `O` an independent EGUE(t), both in `(N, m)`.
    NumberConserving {
        #[serde(rename = "N")]
        n: usize,
        m: usize,
        k: usize,
        t: usize,
        #[serde(default = "default_variance")]
        v_h: f64,
        #[serde(default = "default_variance")]
        v_o: f64,
    },
    /// `O = Σ_α V_α A_α(k0)` taking `m` particles to `m - k0`.
    Removal {
        #[serde(rename = "N")]
        n: usize,
        m: usize,
        k: usize,
        k0: usize,
        #[serde(default = "default_variance")]
        v_h: f64,
        #[serde(default = "default_variance")]
        v_o: f64,
    },
    /// Two species; `O` converts `k0` particles of species 2 into species 1.
    BetaDecay {
        #[serde(rename = "N1")]
        n1: usize,
        #[serde(rename = "N2")]
        n2: usize,
        m1: usize,
        m2: usize,
        k: usize,
        k0: usize,
        #[serde(default = "default_variance")]
        v_h: f64,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        v_h_ij: Vec<PairVariance>,
        #[serde(default = "default_variance")]
        v_o: f64,
    },
}

/// Particle content of a sector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SectorSpec {
    Single { n: usize, m: usize },
    Pair { n1: usize, m1: usize, n2: usize, m2: usize },
}

impl SectorSpec {
    pub fn dim(&self) -> u128 {
        let b = |n: usize, m: usize| {
            combinat::binom(n as i64, m as i64)
                .map(|c| c.get())
                .unwrap_or(u128::MAX)
        };
        match *self {
            SectorSpec::Single { n, m } => b(n, m),
            SectorSpec::Pair { n1, m1, n2, m2 } => b(n1, m1).saturating_mul(b(n2, m2)),
        }
    }
}

impl ModelSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelSpec::NumberConserving { .. } => "number_conserving",
            ModelSpec::Removal { .. } => "removal",
            ModelSpec::BetaDecay { .. } => "beta_decay",
        }
    }

    pub fn v_h(&self) -> f64 {
        match *self {
            ModelSpec::NumberConserving { v_h, .. }
            | ModelSpec::Removal { v_h, .. }
            | ModelSpec::BetaDecay { v_h, .. } => v_h,
        }
    }

    pub fn v_o(&self) -> f64 {
        match *self {
            ModelSpec::NumberConserving { v_o, .. }
            | ModelSpec::Removal { v_o, .. }
            | ModelSpec::BetaDecay { v_o, .. } => v_o,
        }
    }

    /// Body rank of `H`.
    pub fn k(&self) -> usize {
        match *self {
            ModelSpec::NumberConserving { k, .. }
            | ModelSpec::Removal { k, .. }
            | ModelSpec::BetaDecay { k, .. } => k,
        }
    }

    /// Returns a copy with both variances replaced.
    pub fn with_variances(&self, v_h_new: f64, v_o_new: f64) -> ModelSpec {
        let mut s = self.clone();
        match &mut s {
            ModelSpec::NumberConserving { v_h, v_o, .. }
            | ModelSpec::Removal { v_h, v_o, .. }
            | ModelSpec::BetaDecay { v_h, v_o, .. } => {
                *v_h = v_h_new;
                *v_o = v_o_new;
            }
        }
        s
    }

    pub fn initial_sector(&self) -> SectorSpec {
        match *self {
            ModelSpec::NumberConserving { n, m, .. } | ModelSpec::Removal { n, m, .. } => {
                SectorSpec::Single { n, m }
            }
            ModelSpec::BetaDecay { n1, n2, m1, m2, .. } => SectorSpec::Pair { n1, m1, n2, m2 },
        }
    }

    pub fn final_sector(&self) -> SectorSpec {
        match *self {
            ModelSpec::NumberConserving { n, m, .. } => SectorSpec::Single { n, m },
            ModelSpec::Removal { n, m, k0, .. } => SectorSpec::Single { n, m: m - k0 },
            ModelSpec::BetaDecay {
                n1, n2, m1, m2, k0, ..
            } => SectorSpec::Pair {
                n1,
                m1: m1 + k0,
                n2,
                m2: m2 - k0,
            },
        }
    }

    /// Variance of the `(i, j)` block of a two-species `H`.
    pub fn block_variance(&self, i: usize, j: usize) -> f64 {
        match self {
            ModelSpec::BetaDecay { v_h, v_h_ij, .. } => v_h_ij
                .iter()
                .find(|p| p.i == i && p.j == j)
                .map_or(*v_h, |p| p.v),
            _ => self.v_h(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EnsembleError::InvalidSpec(msg));
        let positive = |name: &str, v: f64| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(EnsembleError::InvalidSpec(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("v_h", self.v_h())?;
        positive("v_o", self.v_o())?;
        match self {
            ModelSpec::NumberConserving { n, m, k, t, .. } => {
                if !(k <= m && m <= n) {
                    return bad(format!("need k <= m <= N, got k={k} m={m} N={n}"));
                }
                if t > m {
                    return bad(format!("need t <= m, got t={t} m={m}"));
                }
            }
            ModelSpec::Removal { n, m, k, k0, .. } => {
                if !(k <= m && m <= n) {
                    return bad(format!("need k <= m <= N, got k={k} m={m} N={n}"));
                }
                if k0 > m {
                    return bad(format!("need k0 <= m, got k0={k0} m={m}"));
                }
            }
            ModelSpec::BetaDecay {
                n1,
                n2,
                m1,
                m2,
                k,
                k0,
                v_h_ij,
                ..
            } => {
                if m1 > n1 || m2 > n2 {
                    return bad(format!("need m1 <= N1 and m2 <= N2, got ({m1},{n1}) ({m2},{n2})"));
                }
                if k0 > m2 || m1 + k0 > *n1 {
                    return bad(format!("need k0 <= m2 and m1 + k0 <= N1, got k0={k0}"));
                }
                if *k > m1 + m2 {
                    return bad(format!("need k <= m1 + m2, got k={k}"));
                }
                for (idx, p) in v_h_ij.iter().enumerate() {
                    if p.i + p.j != *k {
                        return bad(format!("v_h_ij entry ({},{}) does not satisfy i + j = k", p.i, p.j));
                    }
                    positive("v_h_ij.v", p.v)?;
                    if v_h_ij[..idx].iter().any(|q| q.i == p.i && q.j == p.j) {
                        return bad(format!("duplicate v_h_ij entry ({},{})", p.i, p.j));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Identifies an independent family of draws within a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Lane {
    Hamiltonian,
    Transition,
}

impl Lane {
    fn tag(self) -> u64 {
        match self {
            Lane::Hamiltonian => 0x4841_4d49_4c54_4f4e,
            Lane::Transition => 0x5452_414e_5349_5449,
        }
    }
}

/// Counter-based stream key: a sample's draws depend only on `(seed, stream_id)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> RngStream {
        RngStream { seed, stream_id }
    }

    pub fn draws(&self, lane: Lane) -> GaussianDraws {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&lane.tag().to_le_bytes());
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_stream(self.stream_id);
        GaussianDraws {
            rng,
            normal: Normal::new(0.0, 1.0).expect("standard normal"),
        }
    }
}

/// Standard normals by inverse CDF of the ChaCha keystream.
pub struct GaussianDraws {
    rng: ChaCha20Rng,
    normal: Normal,
}

impl GaussianDraws {
    /// Uniform on the open interval (0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u = self.uniform();
        self.normal.inverse_cdf(u)
    }

    pub fn normal(&mut self, variance: f64) -> f64 {
        variance.sqrt() * self.standard_normal()
    }
}

/// GUE with `E[V_ab V_cd] = v2 δ_ad δ_bc`.
///
/// Draw order: the real diagonal, then the upper triangle row by row with
/// the real part before the imaginary part.
pub fn sample_gue(dim: usize, v2: f64, draws: &mut GaussianDraws) -> DMatrix<Complex64> {
    let mut out = DMatrix::<Complex64>::zeros(dim, dim);
    for i in 0..dim {
        out[(i, i)] = Complex64::new(draws.normal(v2), 0.0);
    }
    let half = v2 / 2.0;
    for i in 0..dim {
        for j in i + 1..dim {
            let z = Complex64::new(draws.normal(half), draws.normal(half));
            out[(i, j)] = z;
            out[(j, i)] = z.conj();
        }
    }
    out
}

/// I.i.d. complex Gaussians with `E|O_ab|^2 = v2`, drawn row by row.
pub fn sample_rect(rows: usize, cols: usize, v2: f64, draws: &mut GaussianDraws) -> DMatrix<Complex64> {
    let half = v2 / 2.0;
    let mut out = DMatrix::<Complex64>::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            out[(i, j)] = Complex64::new(draws.normal(half), draws.normal(half));
        }
    }
    out
}

/// One independent GUE block of `H` with its annihilators in both sectors.
///
/// A sector in which the block cannot act holds zero maps with an empty
/// codomain.
#[derive(Debug, Clone)]
pub struct HBlock {
    /// `(i, j)` body ranks per species; `(k, 0)` for single-species kinds.
    pub ranks: (usize, usize),
    pub variance: f64,
    pub k_dim: usize,
    pub initial_maps: Arc<Vec<SignedMap>>,
    pub final_maps: Arc<Vec<SignedMap>>,
    initial_embed: Arc<BilinearEmbedder>,
    final_embed: Arc<BilinearEmbedder>,
}

/// Covariance structure of the transition operator.
#[derive(Debug, Clone)]
pub enum TransitionStructure {
    /// `O = Σ V_ab A_a† A_b`, a GUE in t-particle space embedded in the initial sector.
    Hermitian {
        variance: f64,
        k_dim: usize,
        maps: Arc<Vec<SignedMap>>,
        embed: Arc<BilinearEmbedder>,
    },
    /// `O = Σ_r c_r T_r` with i.i.d. complex `c_r`; `T_r` maps initial to final.
    Linear {
        variance: f64,
        draw_shape: (usize, usize),
        maps: Arc<Vec<SignedMap>>,
    },
}

/// A resolved model: sectors, annihilator maps and cached embedders.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub spec: ModelSpec,
    pub initial: Arc<Basis>,
    pub final_: Arc<Basis>,
    pub h_blocks: Vec<HBlock>,
    pub transition: TransitionStructure,
}

/// One draw of the ensemble: `H` in both sectors and `O` from initial to final.
#[derive(Debug, Clone)]
pub struct Realization {
    pub h_initial: EmbeddedOperator,
    pub h_final: EmbeddedOperator,
    pub o: EmbeddedOperator,
}

fn zero_maps(src_dim: usize, count: usize) -> Vec<SignedMap> {
    (0..count)
        .map(|_| SignedMap::new(src_dim, 0, Vec::new()).expect("empty map"))
        .collect()
}

fn ranked_annihilators(basis: &Arc<FockBasis>, r: usize, cap: usize) -> Result<Vec<SignedMap>> {
    if r > basis.m() {
        let count = combinat::binom(basis.n() as i64, r as i64)
            .map_err(FockError::from)?
            .get() as usize;
        return Ok(zero_maps(basis.dim(), count));
    }
    let low = Arc::new(fock::build_basis_capped(basis.n(), basis.m() - r, cap)?);
    Ok(AnnihilatorSet::between(basis.clone(), low).maps)
}

/// `A^(1)_α(i) ⊗ A^(2)_a(j)` on a product sector, composite index `α` major.
fn product_annihilators(
    first: &Arc<FockBasis>,
    second: &Arc<FockBasis>,
    i: usize,
    j: usize,
    cap: usize,
) -> Result<Vec<SignedMap>> {
    let a1 = ranked_annihilators(first, i, cap)?;
    let a2 = ranked_annihilators(second, j, cap)?;
    let dim = first.dim() * second.dim();
    if i > first.m() || j > second.m() {
        return Ok(zero_maps(dim, a1.len() * a2.len()));
    }
    let mut out = Vec::with_capacity(a1.len() * a2.len());
    for x in &a1 {
        for y in &a2 {
            out.push(SignedMap::kron(x, y));
        }
    }
    Ok(out)
}

impl Ensemble {
    pub fn new(spec: &ModelSpec) -> Result<Ensemble> {
        Ensemble::with_cap(spec, fock::DEFAULT_BASIS_CAP)
    }

    /// Resolves the spec, refusing sectors above `cap` states.
    pub fn with_cap(spec: &ModelSpec, cap: usize) -> Result<Ensemble> {
        spec.validate()?;
        match spec {
            ModelSpec::NumberConserving { n, m, k, t, v_h, v_o } => {
                let basis = Arc::new(fock::build_basis_capped(*n, *m, cap)?);
                let h_maps = Arc::new(ranked_annihilators(&basis, *k, cap)?);
                let h_embed = Arc::new(BilinearEmbedder::new(&h_maps, &h_maps)?);
                let o_maps = Arc::new(ranked_annihilators(&basis, *t, cap)?);
                let o_embed = Arc::new(BilinearEmbedder::new(&o_maps, &o_maps)?);
                let sector = Arc::new(Basis::Single((*basis).clone()));
                Ok(Ensemble {
                    spec: spec.clone(),
                    initial: sector.clone(),
                    final_: sector,
                    h_blocks: vec![HBlock {
                        ranks: (*k, 0),
                        variance: *v_h,
                        k_dim: h_maps.len(),
                        initial_maps: h_maps.clone(),
                        final_maps: h_maps,
                        initial_embed: h_embed.clone(),
                        final_embed: h_embed,
                    }],
                    transition: TransitionStructure::Hermitian {
                        variance: *v_o,
                        k_dim: o_maps.len(),
                        maps: o_maps,
                        embed: o_embed,
                    },
                })
            }
            ModelSpec::Removal { n, m, k, k0, v_h, v_o } => {
                let initial = Arc::new(fock::build_basis_capped(*n, *m, cap)?);
                let fin = Arc::new(fock::build_basis_capped(*n, m - k0, cap)?);
                let hi = Arc::new(ranked_annihilators(&initial, *k, cap)?);
                let hf = Arc::new(ranked_annihilators(&fin, *k, cap)?);
                let o_maps = AnnihilatorSet::between(initial.clone(), fin.clone()).maps;
                let block = HBlock {
                    ranks: (*k, 0),
                    variance: *v_h,
                    k_dim: hi.len(),
                    initial_embed: Arc::new(BilinearEmbedder::new(&hi, &hi)?),
                    final_embed: Arc::new(BilinearEmbedder::new(&hf, &hf)?),
                    initial_maps: hi,
                    final_maps: hf,
                };
                Ok(Ensemble {
                    spec: spec.clone(),
                    initial: Arc::new(Basis::Single((*initial).clone())),
                    final_: Arc::new(Basis::Single((*fin).clone())),
                    h_blocks: vec![block],
                    transition: TransitionStructure::Linear {
                        variance: *v_o,
                        draw_shape: (1, o_maps.len()),
                        maps: Arc::new(o_maps),
                    },
                })
            }
            ModelSpec::BetaDecay {
                n1,
                n2,
                m1,
                m2,
                k,
                k0,
                v_o,
                ..
            } => {
                let i1 = Arc::new(fock::build_basis_capped(*n1, *m1, cap)?);
                let i2 = Arc::new(fock::build_basis_capped(*n2, *m2, cap)?);
                let f1 = Arc::new(fock::build_basis_capped(*n1, m1 + k0, cap)?);
                let f2 = Arc::new(fock::build_basis_capped(*n2, m2 - k0, cap)?);
                let initial = fock::two_species_basis_capped(*n1, *m1, *n2, *m2, cap)?;
                let fin = fock::two_species_basis_capped(*n1, m1 + k0, *n2, m2 - k0, cap)?;

                let mut h_blocks = Vec::new();
                for i in 0..=*k {
                    let j = k - i;
                    if i > *n1 || j > *n2 {
                        continue;
                    }
                    let im = Arc::new(product_annihilators(&i1, &i2, i, j, cap)?);
                    let fm = Arc::new(product_annihilators(&f1, &f2, i, j, cap)?);
                    h_blocks.push(HBlock {
                        ranks: (i, j),
                        variance: spec.block_variance(i, j),
                        k_dim: im.len(),
                        initial_embed: Arc::new(BilinearEmbedder::new(&im, &im)?),
                        final_embed: Arc::new(BilinearEmbedder::new(&fm, &fm)?),
                        initial_maps: im,
                        final_maps: fm,
                    });
                }

                // B_{αa} = A^(1)†_α(k0) ⊗ A^(2)_a(k0), through the (m1, m2 - k0) sector.
                let mid2 = f2.clone();
                let lower1 = AnnihilatorSet::between(f1.clone(), i1.clone());
                let lower2 = AnnihilatorSet::between(i2.clone(), mid2);
                let id_i1 = SignedMap::identity(i1.dim());
                let id_f2 = SignedMap::identity(f2.dim());
                let mut o_maps = Vec::with_capacity(lower1.len() * lower2.len());
                for a1 in &lower1.maps {
                    let raise = SignedMap::kron(a1, &id_f2).adjoint();
                    for a2 in &lower2.maps {
                        let lower = SignedMap::kron(&id_i1, a2);
                        o_maps.push(raise.compose(&lower)?);
                    }
                }
                Ok(Ensemble {
                    spec: spec.clone(),
                    initial: Arc::new(Basis::Product(initial)),
                    final_: Arc::new(Basis::Product(fin)),
                    h_blocks,
                    transition: TransitionStructure::Linear {
                        variance: *v_o,
                        draw_shape: (lower1.len(), lower2.len()),
                        maps: Arc::new(o_maps),
                    },
                })
            }
        }
    }

    pub fn initial_dim(&self) -> usize {
        self.initial.dim()
    }

    pub fn final_dim(&self) -> usize {
        self.final_.dim()
    }

    pub fn realize(&self, stream: RngStream) -> Result<Realization> {
        self.realize_with_lanes(stream, Lane::Hamiltonian, Lane::Transition)
    }

    /// Same as [`Ensemble::realize`] with explicit lanes for `H` and `O`.
    /// Passing the same lane twice correlates the two draws (a test hook).
    pub fn realize_with_lanes(&self, stream: RngStream, h_lane: Lane, o_lane: Lane) -> Result<Realization> {
        let mut hd = stream.draws(h_lane);
        let di = self.initial_dim();
        let df = self.final_dim();
        let mut hi = DMatrix::<Complex64>::zeros(di, di);
        let mut hf = DMatrix::<Complex64>::zeros(df, df);
        for block in &self.h_blocks {
            let v = sample_gue(block.k_dim, block.variance, &mut hd);
            hi += block.initial_embed.apply(&v)?;
            if !Arc::ptr_eq(&block.initial_embed, &block.final_embed) {
                hf += block.final_embed.apply(&v)?;
            }
        }
        let same_sector = self.h_blocks.iter().all(|b| Arc::ptr_eq(&b.initial_embed, &b.final_embed));
        if same_sector {
            hf = hi.clone();
        }

        let mut od = stream.draws(o_lane);
        let (o, hermitian) = match &self.transition {
            TransitionStructure::Hermitian {
                variance,
                k_dim,
                embed,
                ..
            } => (embed.apply(&sample_gue(*k_dim, *variance, &mut od))?, true),
            TransitionStructure::Linear {
                variance,
                draw_shape,
                maps,
            } => {
                let c = sample_rect(draw_shape.0, draw_shape.1, *variance, &mut od);
                // Row-major flattening matches the map order.
                let flat: Vec<Complex64> = c.transpose().iter().copied().collect();
                (fock::embed_linear_matrix(maps, &flat)?, false)
            }
        };
        Ok(Realization {
            h_initial: EmbeddedOperator::new(self.initial.clone(), self.initial.clone(), hi, true)?,
            h_final: EmbeddedOperator::new(self.final_.clone(), self.final_.clone(), hf, true)?,
            o: EmbeddedOperator::new(self.final_.clone(), self.initial.clone(), o, hermitian)?,
        })
    }
}

/// Resolves `spec` and draws one realization.
pub fn realize(spec: &ModelSpec, stream: RngStream) -> Result<Realization> {
    Ensemble::new(spec)?.realize(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

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
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<f64> = {
            let mut d = RngStream::new(7, 3).draws(Lane::Hamiltonian);
            (0..5).map(|_| d.standard_normal()).collect()
        };
        let b: Vec<f64> = {
            let mut d = RngStream::new(7, 3).draws(Lane::Hamiltonian);
            (0..5).map(|_| d.standard_normal()).collect()
        };
        assert_eq!(a, b);
        let c: Vec<f64> = {
            let mut d = RngStream::new(7, 4).draws(Lane::Hamiltonian);
            (0..5).map(|_| d.standard_normal()).collect()
        };
        let e: Vec<f64> = {
            let mut d = RngStream::new(7, 3).draws(Lane::Transition);
            (0..5).map(|_| d.standard_normal()).collect()
        };
        assert_ne!(a, c);
        assert_ne!(a, e);
    }

    #[test]
    fn gue_covariance() {
        let v2 = 2.5;
        let n = 10_000;
        let mut abs2 = 0.0;
        let mut sq_re = 0.0;
        let mut sq_im = 0.0;
        let mut diag2 = 0.0;
        for s in 0..n {
            let mut d = RngStream::new(11, s).draws(Lane::Hamiltonian);
            let g = sample_gue(3, v2, &mut d);
            assert_eq!(g, g.adjoint());
            let z = g[(0, 1)];
            abs2 += z.norm_sqr();
            let zz = z * z;
            sq_re += zz.re;
            sq_im += zz.im;
            diag2 += g[(2, 2)].re.powi(2);
        }
        let nf = n as f64;
        // Var|z|^2 = v2^2 for a complex Gaussian; Var(x^2) = 2 v2^2 for the diagonal.
        assert!((abs2 / nf - v2).abs() < 5.0 * v2 / nf.sqrt());
        assert!((diag2 / nf - v2).abs() < 5.0 * (2.0f64).sqrt() * v2 / nf.sqrt());
        assert!((sq_re / nf).abs() < 5.0 * v2 / nf.sqrt());
        assert!((sq_im / nf).abs() < 5.0 * v2 / nf.sqrt());
    }

    #[test]
    fn rect_entries_are_independent() {
        let n = 10_000;
        let mut abs2 = 0.0;
        let mut cross = Complex64::new(0.0, 0.0);
        for s in 0..n {
            let mut d = RngStream::new(5, s).draws(Lane::Transition);
            let r = sample_rect(1, 4, 1.0, &mut d);
            abs2 += r[(0, 2)].norm_sqr();
            cross += r[(0, 0)] * r[(0, 1)].conj();
        }
        let nf = n as f64;
        assert!((abs2 / nf - 1.0).abs() < 5.0 / nf.sqrt());
        assert!(cross.norm() / nf < 5.0 / nf.sqrt());
    }

    #[test]
    fn single_entry_gue_is_real() {
        let mut d = RngStream::new(1, 0).draws(Lane::Hamiltonian);
        let g = sample_gue(1, 1.0, &mut d);
        assert_eq!(g[(0, 0)].im, 0.0);
    }

    #[test]
    fn same_lane_with_equal_ranks_gives_identical_operators() {
        let e = Ensemble::new(&nc(5, 3, 2, 2)).unwrap();
        let r = e
            .realize_with_lanes(RngStream::new(9, 1), Lane::Hamiltonian, Lane::Hamiltonian)
            .unwrap();
        assert_eq!(r.o.matrix, r.h_initial.matrix);
        let r = e.realize(RngStream::new(9, 1)).unwrap();
        assert_ne!(r.o.matrix, r.h_initial.matrix);
        assert!(r.o.is_hermitian() && r.h_initial.is_hermitian());
    }

    #[test]
    fn realization_is_deterministic() {
        let spec = ModelSpec::Removal {
            n: 6,
            m: 3,
            k: 2,
            k0: 1,
            v_h: 1.0,
            v_o: 1.0,
        };
        let a = realize(&spec, RngStream::new(3, 17)).unwrap();
        let b = realize(&spec, RngStream::new(3, 17)).unwrap();
        assert_eq!(a.o.matrix, b.o.matrix);
        assert_eq!(a.h_final.matrix, b.h_final.matrix);
        assert_eq!(a.o.matrix.shape(), (15, 20));
    }

    #[test]
    fn removal_to_vacuum_has_norm_v_o() {
        let spec = ModelSpec::Removal {
            n: 4,
            m: 2,
            k: 1,
            k0: 2,
            v_h: 1.0,
            v_o: 1.7,
        };
        let e = Ensemble::new(&spec).unwrap();
        let n = 4000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for s in 0..n {
            let r = e.realize(RngStream::new(2, s)).unwrap();
            let v = r.o.matrix.norm_squared() / e.initial_dim() as f64;
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / n as f64;
        let se = ((acc2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - 1.7).abs() < 5.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn beta_shapes() {
        let spec = ModelSpec::BetaDecay {
            n1: 3,
            n2: 3,
            m1: 1,
            m2: 1,
            k: 1,
            k0: 1,
            v_h: 1.0,
            v_h_ij: vec![],
            v_o: 1.0,
        };
        let r = realize(&spec, RngStream::new(0, 0)).unwrap();
        assert_eq!(r.o.matrix.shape(), (3, 9));
        assert_eq!(r.h_initial.matrix.shape(), (9, 9));
        assert_eq!(r.h_final.matrix.shape(), (3, 3));
        assert!(!r.o.is_hermitian());
    }

    #[test]
    fn hamiltonian_and_transition_are_uncorrelated() {
        let e = Ensemble::new(&nc(4, 2, 1, 1)).unwrap();
        let n = 10_000;
        let mut cov = 0.0;
        for s in 0..n {
            let r = e.realize(RngStream::new(21, s)).unwrap();
            cov += (r.h_initial.matrix[(0, 0)] * r.o.matrix[(0, 0)]).re;
        }
        // Both diagonal entries have variance 2 (two k-indices contribute).
        assert!((cov / n as f64).abs() < 5.0 * 2.0 / (n as f64).sqrt());
    }

    #[test]
    fn validation() {
        assert!(nc(4, 2, 3, 1).validate().is_err());
        assert!(nc(4, 5, 1, 1).validate().is_err());
        assert!(nc(4, 2, 1, 3).validate().is_err());
        assert!(nc(4, 2, 1, 1).with_variances(0.0, 1.0).validate().is_err());
        let beta = ModelSpec::BetaDecay {
            n1: 3,
            n2: 3,
            m1: 3,
            m2: 1,
            k: 1,
            k0: 1,
            v_h: 1.0,
            v_h_ij: vec![],
            v_o: 1.0,
        };
        assert!(beta.validate().is_err());
    }

    #[test]
    fn spec_json_is_strict() {
        let ok: ModelSpec =
            serde_json::from_str(r#"{"kind":"removal","N":6,"m":3,"k":2,"k0":1}"#).unwrap();
        assert_eq!(ok.v_h(), 1.0);
        let extra = serde_json::from_str::<ModelSpec>(
            r#"{"kind":"removal","N":6,"m":3,"k":2,"k0":1,"t":1}"#,
        );
        assert!(extra.is_err());
        let spec = nc(6, 3, 2, 2);
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<ModelSpec>(&text).unwrap(), spec);
    }
}
