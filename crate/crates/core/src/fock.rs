//! Occupation-number bases and the embedding of k-body operators.
//!
//! Modes are numbered `0..N`. An m-particle state is an `N`-bit word with `m`
//! bits set, and [`FockBasis`] lists those words in increasing numeric order.
//! A k-particle index is a strictly increasing mode tuple; k-particle indices
//! are enumerated lexicographically ([`kbody_tuples`]), and that order defines
//! the meaning of every k-space coefficient matrix in the crate.
//!
//! `A_i(k)` annihilates the modes of `i` starting from the lowest one; each
//! single annihilation of mode `j` contributes `(-1)^(occupied modes below j)`.
//! Every operator built here is a signed partial injection between bases,
//! stored as a [`SignedMap`].

use std::sync::Arc;

use itertools::Itertools;
use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::combinat::{self, CombinatError};

pub const DEFAULT_BASIS_CAP: usize = 20_000;
pub const MAX_MODES: usize = 63;

const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FockError {
    #[error("invalid basis parameters N={n}, m={m}")]
    InvalidParameters { n: i64, m: i64 },
    #[error("basis dimension {dim} exceeds the cap {cap}")]
    CapExceeded { dim: u128, cap: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },
    #[error("matrix flagged Hermitian deviates by {deviation:e} (max-norm {scale:e})")]
    NotHermitian { deviation: f64, scale: f64 },
    #[error("signed map entries are not a partial injection: {0}")]
    NotInjective(String),
    #[error(transparent)]
    Combinat(#[from] CombinatError),
}

pub type Result<T> = std::result::Result<T, FockError>;

/// Ordered m-particle occupation words in `N` modes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FockBasis {
    n: usize,
    m: usize,
    states: Vec<u64>,
    // pascal[p][r] = C(p, r) for colex ranking.
    pascal: Vec<Vec<u64>>,
}

impl FockBasis {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[u64] {
        &self.states
    }

    pub fn state(&self, index: usize) -> u64 {
        self.states[index]
    }

    /// Ordinal of an occupation word, or `None` if it is not in this basis.
    pub fn index_of(&self, word: u64) -> Option<usize> {
        if word.count_ones() as usize != self.m || (self.n < 64 && word >> self.n != 0) {
            return None;
        }
        // Increasing numeric order on fixed-popcount words is colex order.
        let mut rank = 0u64;
        let mut w = word;
        let mut j = 0;
        while w != 0 {
            let p = w.trailing_zeros() as usize;
            rank += self.pascal[p][j + 1];
            w &= w - 1;
            j += 1;
        }
        Some(rank as usize)
    }
}

/// All `m`-particle states of `N` modes, capped at [`DEFAULT_BASIS_CAP`].
pub fn build_basis(n: usize, m: usize) -> Result<FockBasis> {
    build_basis_capped(n, m, DEFAULT_BASIS_CAP)
}

pub fn build_basis_capped(n: usize, m: usize, cap: usize) -> Result<FockBasis> {
    if m > n || n > MAX_MODES {
        return Err(FockError::InvalidParameters {
            n: n as i64,
            m: m as i64,
        });
    }
    let dim = combinat::binom(n as i64, m as i64)?.get();
    if dim > cap as u128 {
        return Err(FockError::CapExceeded { dim, cap });
    }
    let mut states = Vec::with_capacity(dim as usize);
    if m == 0 {
        states.push(0);
    } else {
        // Gosper's hack walks fixed-popcount words in increasing order.
        let mut w: u64 = (1u64 << m) - 1;
        let limit = 1u64 << n;
        while w < limit {
            states.push(w);
            let c = w & w.wrapping_neg();
            let r = w + c;
            w = (((r ^ w) >> 2) / c) | r;
        }
    }
    debug_assert_eq!(states.len() as u128, dim);
    let mut pascal = vec![vec![0u64; m + 2]; n + 1];
    for p in 0..=n {
        pascal[p][0] = 1;
        for r in 1..m + 2 {
            pascal[p][r] = if p == 0 {
                0
            } else {
                pascal[p - 1][r - 1] + pascal[p - 1][r]
            };
        }
    }
    Ok(FockBasis {
        n,
        m,
        states,
        pascal,
    })
}

/// k-particle indices as bit words, in lexicographic order of mode tuples.
pub fn kbody_tuples(n: usize, k: usize) -> Vec<u64> {
    (0..n)
        .combinations(k)
        .map(|modes| modes.iter().fold(0u64, |w, &p| w | (1 << p)))
        .collect()
}

/// Sign of annihilating the modes in `mask` from `word`, lowest mode first.
///
/// `mask` must be a subset of `word`.
pub fn annihilation_sign(word: u64, mask: u64) -> f64 {
    let rest = word & !mask;
    let mut parity = 0u32;
    let mut m = mask;
    while m != 0 {
        let j = m.trailing_zeros();
        parity += (rest & ((1u64 << j) - 1)).count_ones();
        m &= m - 1;
    }
    if parity % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Product basis of two species, species-1 index major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProductBasis {
    pub first: FockBasis,
    pub second: FockBasis,
}

impl ProductBasis {
    pub fn dim(&self) -> usize {
        self.first.dim() * self.second.dim()
    }

    pub fn index(&self, i1: usize, i2: usize) -> usize {
        i1 * self.second.dim() + i2
    }

    pub fn split(&self, index: usize) -> (usize, usize) {
        (index / self.second.dim(), index % self.second.dim())
    }
}

pub fn two_species_basis(n1: usize, m1: usize, n2: usize, m2: usize) -> Result<ProductBasis> {
    two_species_basis_capped(n1, m1, n2, m2, DEFAULT_BASIS_CAP)
}

pub fn two_species_basis_capped(
    n1: usize,
    m1: usize,
    n2: usize,
    m2: usize,
    cap: usize,
) -> Result<ProductBasis> {
    let first = build_basis_capped(n1, m1, cap)?;
    let second = build_basis_capped(n2, m2, cap)?;
    let dim = first.dim() as u128 * second.dim() as u128;
    if dim > cap as u128 {
        return Err(FockError::CapExceeded { dim, cap });
    }
    Ok(ProductBasis { first, second })
}

/// Single- or two-species many-particle basis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Basis {
    Single(FockBasis),
    Product(ProductBasis),
}

impl Basis {
    pub fn dim(&self) -> usize {
        match self {
            Basis::Single(b) => b.dim(),
            Basis::Product(p) => p.dim(),
        }
    }

    pub fn as_single(&self) -> Option<&FockBasis> {
        match self {
            Basis::Single(b) => Some(b),
            Basis::Product(_) => None,
        }
    }
}

/// A partial signed injection: column `src` maps to `sign * e_dst`.
///
/// As a matrix it is `dst_dim x src_dim` with at most one `±1` per row and
/// per column.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedMap {
    src_dim: usize,
    dst_dim: usize,
    fwd: Vec<Option<(u32, f64)>>,
    inv: Vec<Option<(u32, f64)>>,
    support: Vec<u32>,
}

impl SignedMap {
    pub fn new(
        src_dim: usize,
        dst_dim: usize,
        entries: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<SignedMap> {
        let mut fwd = vec![None; src_dim];
        let mut inv = vec![None; dst_dim];
        for (s, d, sign) in entries {
            if s >= src_dim || d >= dst_dim {
                return Err(FockError::NotInjective(format!(
                    "entry ({s},{d}) outside {dst_dim}x{src_dim}"
                )));
            }
            if fwd[s].is_some() || inv[d].is_some() {
                return Err(FockError::NotInjective(format!("repeated index in ({s},{d})")));
            }
            fwd[s] = Some((d as u32, sign));
            inv[d] = Some((s as u32, sign));
        }
        let support = (0..src_dim as u32).filter(|&s| fwd[s as usize].is_some()).collect();
        Ok(SignedMap {
            src_dim,
            dst_dim,
            fwd,
            inv,
            support,
        })
    }

    pub fn identity(dim: usize) -> SignedMap {
        SignedMap {
            src_dim: dim,
            dst_dim: dim,
            fwd: (0..dim as u32).map(|i| Some((i, 1.0))).collect(),
            inv: (0..dim as u32).map(|i| Some((i, 1.0))).collect(),
            support: (0..dim as u32).collect(),
        }
    }

    pub fn src_dim(&self) -> usize {
        self.src_dim
    }

    pub fn dst_dim(&self) -> usize {
        self.dst_dim
    }

    pub fn nnz(&self) -> usize {
        self.support.len()
    }

    pub fn is_zero(&self) -> bool {
        self.support.is_empty()
    }

    /// Image of basis vector `src` as `(dst, sign)`.
    #[inline]
    pub fn apply(&self, src: usize) -> Option<(usize, f64)> {
        self.fwd[src].map(|(d, s)| (d as usize, s))
    }

    /// Preimage of basis vector `dst` as `(src, sign)`.
    #[inline]
    pub fn preimage(&self, dst: usize) -> Option<(usize, f64)> {
        self.inv[dst].map(|(s, g)| (s as usize, g))
    }

    /// `(src, dst, sign)` for every nonzero entry, ordered by `src`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.support.iter().map(move |&s| {
            let (d, g) = self.fwd[s as usize].unwrap();
            (s as usize, d as usize, g)
        })
    }

    pub fn adjoint(&self) -> SignedMap {
        let support = (0..self.dst_dim as u32)
            .filter(|&d| self.inv[d as usize].is_some())
            .collect();
        SignedMap {
            src_dim: self.dst_dim,
            dst_dim: self.src_dim,
            fwd: self.inv.clone(),
            inv: self.fwd.clone(),
            support,
        }
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &SignedMap) -> Result<SignedMap> {
        if first.dst_dim != self.src_dim {
            return Err(FockError::DimensionMismatch {
                expected: format!("inner dimension {}", self.src_dim),
                found: format!("{}", first.dst_dim),
            });
        }
        let entries = first.entries().filter_map(|(s, mid, g1)| {
            self.apply(mid).map(|(d, g2)| (s, d, g1 * g2))
        });
        SignedMap::new(first.src_dim, self.dst_dim, entries.collect::<Vec<_>>())
    }

    /// Tensor product `a ⊗ b` with `a`'s index major.
    pub fn kron(a: &SignedMap, b: &SignedMap) -> SignedMap {
        let mut entries = Vec::with_capacity(a.nnz() * b.nnz());
        for (sa, da, ga) in a.entries() {
            for (sb, db, gb) in b.entries() {
                entries.push((sa * b.src_dim + sb, da * b.dst_dim + db, ga * gb));
            }
        }
        SignedMap::new(a.src_dim * b.src_dim, a.dst_dim * b.dst_dim, entries)
            .expect("tensor product of injections is an injection")
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dst_dim, self.src_dim);
        for (s, d, g) in self.entries() {
            out[(d, s)] = g;
        }
        out
    }
}

/// The annihilators `A_i(k)` from the `(N,m)` basis to the `(N,m-k)` basis.
#[derive(Debug, Clone)]
pub struct AnnihilatorSet {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub domain: Arc<FockBasis>,
    pub codomain: Arc<FockBasis>,
    pub tuples: Vec<u64>,
    pub maps: Vec<SignedMap>,
}

pub fn annihilator_set(n: usize, m: usize, k: usize) -> Result<AnnihilatorSet> {
    if k > m {
        return Err(FockError::InvalidParameters {
            n: n as i64,
            m: m as i64,
        });
    }
    let domain = Arc::new(build_basis(n, m)?);
    let codomain = Arc::new(build_basis(n, m - k)?);
    Ok(AnnihilatorSet::between(domain, codomain))
}

impl AnnihilatorSet {
    /// Annihilators of rank `domain.m - codomain.m` between two given bases.
    pub fn between(domain: Arc<FockBasis>, codomain: Arc<FockBasis>) -> AnnihilatorSet {
        assert_eq!(domain.n(), codomain.n(), "bases must share N");
        assert!(codomain.m() <= domain.m(), "codomain must have fewer particles");
        let (n, m) = (domain.n(), domain.m());
        let k = m - codomain.m();
        let tuples = kbody_tuples(n, k);
        let maps = tuples
            .iter()
            .map(|&mask| {
                let entries = domain.states().iter().enumerate().filter_map(|(s, &w)| {
                    if w & mask != mask {
                        return None;
                    }
                    let d = codomain.index_of(w & !mask).expect("reduced word lies in codomain");
                    Some((s, d, annihilation_sign(w, mask)))
                });
                SignedMap::new(domain.dim(), codomain.dim(), entries.collect::<Vec<_>>())
                    .expect("annihilation is injective for a fixed mode set")
            })
            .collect();
        AnnihilatorSet {
            n,
            m,
            k,
            domain,
            codomain,
            tuples,
            maps,
        }
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// A concrete many-particle operator between two bases.
#[derive(Debug, Clone)]
pub struct EmbeddedOperator {
    pub rows_basis: Arc<Basis>,
    pub cols_basis: Arc<Basis>,
    pub matrix: DMatrix<Complex64>,
    hermitian: bool,
}

impl EmbeddedOperator {
    /// Wraps a matrix; a `hermitian` flag is checked to `1e-12` relative max-norm.
    pub fn new(
        rows_basis: Arc<Basis>,
        cols_basis: Arc<Basis>,
        matrix: DMatrix<Complex64>,
        hermitian: bool,
    ) -> Result<EmbeddedOperator> {
        if matrix.nrows() != rows_basis.dim() || matrix.ncols() != cols_basis.dim() {
            return Err(FockError::DimensionMismatch {
                expected: format!("{}x{}", rows_basis.dim(), cols_basis.dim()),
                found: format!("{}x{}", matrix.nrows(), matrix.ncols()),
            });
        }
        if hermitian {
            if rows_basis != cols_basis {
                return Err(FockError::DimensionMismatch {
                    expected: "identical row and column bases".into(),
                    found: "distinct bases".into(),
                });
            }
            let (deviation, scale) = hermitian_deviation(&matrix);
            if deviation > HERMITIAN_TOL * scale {
                return Err(FockError::NotHermitian { deviation, scale });
            }
        }
        Ok(EmbeddedOperator {
            rows_basis,
            cols_basis,
            matrix,
            hermitian,
        })
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }
}

/// `(max |M - M†|, max |M|)` for a square matrix.
pub fn hermitian_deviation(m: &DMatrix<Complex64>) -> (f64, f64) {
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if m.nrows() != m.ncols() {
        return (f64::INFINITY, scale);
    }
    let mut dev = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..=j {
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    (dev, scale)
}

pub fn is_hermitian(m: &DMatrix<Complex64>) -> bool {
    let (dev, scale) = hermitian_deviation(m);
    dev <= HERMITIAN_TOL * scale
}

/// Precomputed index structure for `Σ_{αa} c_{αa} L_α† R_a`, where every
/// `L_α: X → Z` and `R_a: Y → Z` is a [`SignedMap`].
///
/// Built once per sector pair and reused for each new coefficient draw.
#[derive(Debug, Clone)]
pub struct BilinearEmbedder {
    rows: usize,
    cols: usize,
    n_left: usize,
    n_right: usize,
    // For each mid-sector index z: (left term, row, sign) and (right term, col, sign).
    left_at: Vec<Vec<(u32, u32, f64)>>,
    right_at: Vec<Vec<(u32, u32, f64)>>,
}

impl BilinearEmbedder {
    pub fn new(left: &[SignedMap], right: &[SignedMap]) -> Result<BilinearEmbedder> {
        let (rows, cols, mid) = match (left.first(), right.first()) {
            (Some(l), Some(r)) => (l.src_dim(), r.src_dim(), l.dst_dim()),
            _ => {
                return Err(FockError::DimensionMismatch {
                    expected: "at least one left and one right map".into(),
                    found: "empty map list".into(),
                })
            }
        };
        let consistent = left.iter().all(|l| l.src_dim() == rows && l.dst_dim() == mid)
            && right.iter().all(|r| r.src_dim() == cols && r.dst_dim() == mid);
        if !consistent {
            return Err(FockError::DimensionMismatch {
                expected: format!("maps {rows}->{mid} and {cols}->{mid}"),
                found: "inconsistent map shapes".into(),
            });
        }
        let mut left_at = vec![Vec::new(); mid];
        for (a, l) in left.iter().enumerate() {
            for (x, z, g) in l.entries() {
                left_at[z].push((a as u32, x as u32, g));
            }
        }
        let mut right_at = vec![Vec::new(); mid];
        for (a, r) in right.iter().enumerate() {
            for (y, z, g) in r.entries() {
                right_at[z].push((a as u32, y as u32, g));
            }
        }
        Ok(BilinearEmbedder {
            rows,
            cols,
            n_left: left.len(),
            n_right: right.len(),
            left_at,
            right_at,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Coefficients must be `n_left x n_right`.
    pub fn apply(&self, coeffs: &DMatrix<Complex64>) -> Result<DMatrix<Complex64>> {
        if coeffs.nrows() != self.n_left || coeffs.ncols() != self.n_right {
            return Err(FockError::DimensionMismatch {
                expected: format!("{}x{} coefficients", self.n_left, self.n_right),
                found: format!("{}x{}", coeffs.nrows(), coeffs.ncols()),
            });
        }
        let mut out = DMatrix::<Complex64>::zeros(self.rows, self.cols);
        for (ls, rs) in self.left_at.iter().zip(&self.right_at) {
            for &(b, y, gr) in rs {
                for &(a, x, gl) in ls {
                    out[(x as usize, y as usize)] += coeffs[(a as usize, b as usize)] * (gl * gr);
                }
            }
        }
        Ok(out)
    }
}

/// `Σ_a c_a R_a` for maps `R_a: Y → Z`.
pub fn embed_linear_matrix(maps: &[SignedMap], coeffs: &[Complex64]) -> Result<DMatrix<Complex64>> {
    let first = maps.first().ok_or_else(|| FockError::DimensionMismatch {
        expected: "at least one map".into(),
        found: "none".into(),
    })?;
    if coeffs.len() != maps.len() {
        return Err(FockError::DimensionMismatch {
            expected: format!("{} coefficients", maps.len()),
            found: format!("{}", coeffs.len()),
        });
    }
    let mut out = DMatrix::<Complex64>::zeros(first.dst_dim(), first.src_dim());
    for (map, &c) in maps.iter().zip(coeffs) {
        for (y, z, g) in map.entries() {
            out[(z, y)] += c * g;
        }
    }
    Ok(out)
}

/// Embeds a k-body coefficient matrix, `Σ_ij c_ij A_i†(k) A_j(k)`, into the
/// `(N,m)` space. The result is flagged Hermitian iff `coeffs` is.
pub fn embed_kbody(
    coeffs: &DMatrix<Complex64>,
    n: usize,
    m: usize,
    k: usize,
) -> Result<EmbeddedOperator> {
    let ck = combinat::binom(n as i64, k as i64)?.get() as usize;
    if coeffs.nrows() != ck || coeffs.ncols() != ck {
        return Err(FockError::DimensionMismatch {
            expected: format!("{ck}x{ck} k-space matrix"),
            found: format!("{}x{}", coeffs.nrows(), coeffs.ncols()),
        });
    }
    let set = annihilator_set(n, m, k)?;
    let matrix = BilinearEmbedder::new(&set.maps, &set.maps)?.apply(coeffs)?;
    let basis = Arc::new(Basis::Single((*set.domain).clone()));
    EmbeddedOperator::new(basis.clone(), basis, matrix, is_hermitian(coeffs))
}
