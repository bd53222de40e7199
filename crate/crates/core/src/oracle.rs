//! Exact ensemble averages by Wick contraction.
//!
//! A moment is the normalized trace of the cyclic word
//!
//! ```text
//! position   0    1 ..= Q    Q+1    Q+2 ..= Q+1+P
//! letter     O†   H_f        O      H_i
//! ```
//!
//! The `O†`/`O` pair is always contracted together. The `H` letters are
//! summed over their perfect matchings; with four of them at positions
//! `h0 < h1 < h2 < h3` the matchings are `(h0h1)(h2h3)`, `(h0h2)(h1h3)` and
//! `(h0h3)(h1h2)`. The crossing structure of each matched word is:
//!
//! | moment | matching          | chords crossing                     |
//! |--------|-------------------|-------------------------------------|
//! | M20    | (2,3)             | none                                |
//! | M11    | (1,3)             | O with H                            |
//! | M40    | (2,4)(3,5)        | the two H chords                    |
//! | M31    | (1,3)(4,5)        | O with (1,3)                        |
//! | M31    | (1,4)(3,5)        | O with (1,4); (1,4) with (3,5)      |
//! | M31    | (1,5)(3,4)        | O with (1,5)                        |
//! | M22    | (1,5)(2,4)        | O with both H chords                |
//! | M22    | (1,4)(2,5)        | all three chords mutually           |
//!
//! Each pair of Gaussian letters `X, Y` has covariance
//! `E[X ⊗ Y] = Σ_r w L_r ⊗ R_r` with signed monomial `L_r, R_r`. For an
//! EGUE chord `L_ab = A_a† A_b` and `R_ab = A_b† A_a`; for the removal and
//! beta-decay operators `L_r = T_r†`, `R_r = T_r`. Reduction repeats:
//!
//! 1. a chord with only fixed matrices on one side collapses to the
//!    sandwich `E[X M Y]`, computed through the lower sector as
//!    `w Σ_a A_a† (Σ_b A_b M A_b†) A_a` (or `w Σ_r L_r M R_r`);
//! 2. otherwise the most-crossing chord is expanded into its terms;
//! 3. the fully crossing six-letter word is evaluated as `tr(B1 B2 B3)` over
//!    pair indices `(v1,v4)`, `(v2,v5)`, `(v3,v0)`, with each `B` a sparse
//!    covariance tensor.
//!
//! All arithmetic is real: every covariance term is a signed permutation
//! piece, so averages of the complex operators reduce to real traces.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::analytic::{self, AnalyticError, Flagged, MomentSet, Provenance, MOMENT_KEYS};
use crate::combinat;
use crate::ensembles::{Ensemble, EnsembleError, ModelSpec, TransitionStructure};
use crate::fock::SignedMap;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("oracle infeasible: {0}")]
    Infeasible(String),
    #[error("moment order P+Q={0} exceeds 4")]
    OrderTooHigh(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Size limits beyond which the oracle refuses a spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleLimits {
    /// Largest sector dimension.
    pub max_dim: usize,
    /// Largest number of covariance terms in any one chord.
    pub max_terms: usize,
}

impl Default for OracleLimits {
    fn default() -> Self {
        OracleLimits {
            max_dim: 300,
            max_terms: 10_000,
        }
    }
}

/// Result of [`Oracle::exact_moment`]; odd orders vanish by symmetry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentValue {
    Even(f64),
    OddZero,
}

impl MomentValue {
    pub fn value(self) -> f64 {
        match self {
            MomentValue::Even(v) => v,
            MomentValue::OddZero => 0.0,
        }
    }
}

/// Sector selector for `H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sector {
    Initial,
    Final,
}

/// Which covariance channel [`Oracle::channel_apply`] applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    /// `X ↦ E[H X H]` within one sector.
    Hamiltonian(Sector),
    /// `X ↦ E[O† X O]`, final-sector matrices to initial-sector ones.
    TransitionBackward,
    /// `X ↦ E[O X O†]`, initial-sector matrices to final-sector ones.
    TransitionForward,
}

// ---------------------------------------------------------------------------
// Fixed operators

#[derive(Debug, Clone)]
enum Op {
    Mono(SignedMap),
    Dense(DMatrix<f64>),
}

impl Op {
    fn rows(&self) -> usize {
        match self {
            Op::Mono(m) => m.dst_dim(),
            Op::Dense(d) => d.nrows(),
        }
    }

    fn cols(&self) -> usize {
        match self {
            Op::Mono(m) => m.src_dim(),
            Op::Dense(d) => d.ncols(),
        }
    }

    fn mul(&self, rhs: &Op) -> Op {
        debug_assert_eq!(self.cols(), rhs.rows());
        match (self, rhs) {
            (Op::Mono(a), Op::Mono(b)) => Op::Mono(a.compose(b).expect("matching inner dimension")),
            (Op::Mono(a), Op::Dense(d)) => {
                let mut out = DMatrix::zeros(a.dst_dim(), d.ncols());
                for (src, dst, g) in a.entries() {
                    for j in 0..d.ncols() {
                        out[(dst, j)] = g * d[(src, j)];
                    }
                }
                Op::Dense(out)
            }
            (Op::Dense(d), Op::Mono(b)) => {
                let mut out = DMatrix::zeros(d.nrows(), b.src_dim());
                for (src, dst, g) in b.entries() {
                    out.column_mut(src).axpy(g, &d.column(dst), 0.0);
                }
                Op::Dense(out)
            }
            (Op::Dense(a), Op::Dense(b)) => Op::Dense(a * b),
        }
    }

    /// `tr(self · rhs)`.
    fn trace_with(&self, rhs: &Op) -> f64 {
        match (self, rhs) {
            (Op::Mono(a), Op::Mono(b)) => b
                .entries()
                .filter_map(|(i, l, h)| a.apply(l).filter(|&(r, _)| r == i).map(|(_, g)| g * h))
                .sum(),
            (Op::Dense(d), Op::Mono(b)) | (Op::Mono(b), Op::Dense(d)) => {
                b.entries().map(|(i, l, h)| d[(i, l)] * h).sum()
            }
            (Op::Dense(a), Op::Dense(b)) => a.dot(&b.transpose()),
        }
    }
}

/// Trace of a cyclic product of fixed operators.
fn cyclic_trace(ops: &[Op]) -> f64 {
    match ops.len() {
        0 => unreachable!("a word always holds at least one operator"),
        1 => match &ops[0] {
            Op::Mono(m) => m.entries().filter(|&(s, d, _)| s == d).map(|(_, _, g)| g).sum(),
            Op::Dense(d) => d.trace(),
        },
        _ => {
            // Start after a dense factor so that monomials fold into it cheaply.
            let start = ops.iter().position(|o| matches!(o, Op::Dense(_))).map_or(0, |p| (p + 1) % ops.len());
            let n = ops.len();
            let mut acc = ops[start].clone();
            for step in 1..n - 1 {
                acc = acc.mul(&ops[(start + step) % n]);
            }
            acc.trace_with(&ops[(start + n - 1) % n])
        }
    }
}

// ---------------------------------------------------------------------------
// Covariance families

#[derive(Debug, Clone)]
struct GueBlock {
    w: f64,
    first: Arc<Vec<SignedMap>>,
    first_adj: Arc<Vec<SignedMap>>,
    second: Arc<Vec<SignedMap>>,
    second_adj: Arc<Vec<SignedMap>>,
}

#[derive(Debug, Clone)]
enum Family {
    Gue(Vec<GueBlock>),
    /// `E[X1 ⊗ X2] = w Σ_r first_r ⊗ second_r`.
    Linear {
        w: f64,
        first: Arc<Vec<SignedMap>>,
        second: Arc<Vec<SignedMap>>,
    },
}

impl Family {
    fn term_count(&self) -> usize {
        match self {
            Family::Gue(blocks) => blocks.iter().map(|b| b.first.len() * b.first.len()).sum(),
            Family::Linear { first, .. } => first.len(),
        }
    }

    /// Term `idx` as `(w, L, R)`, or `None` if it vanishes identically.
    fn term(&self, mut idx: usize) -> Option<(f64, SignedMap, SignedMap)> {
        match self {
            Family::Gue(blocks) => {
                for b in blocks {
                    let n = b.first.len();
                    if idx < n * n {
                        let (a, c) = (idx / n, idx % n);
                        if b.first[c].is_zero() || b.second[a].is_zero() {
                            return None;
                        }
                        let l = b.first_adj[a].compose(&b.first[c]).ok()?;
                        let r = b.second_adj[c].compose(&b.second[a]).ok()?;
                        if l.is_zero() || r.is_zero() {
                            return None;
                        }
                        return Some((b.w, l, r));
                    }
                    idx -= n * n;
                }
                None
            }
            Family::Linear { w, first, second } => {
                if first[idx].is_zero() || second[idx].is_zero() {
                    None
                } else {
                    Some((*w, first[idx].clone(), second[idx].clone()))
                }
            }
        }
    }

    /// `E[X_a M X_b]`, where `a` is the first end unless `reversed`.
    fn sandwich(&self, m: &Op, reversed: bool) -> DMatrix<f64> {
        match self {
            Family::Gue(blocks) => {
                let mut total: Option<DMatrix<f64>> = None;
                for b in blocks {
                    let (p, q) = if reversed { (&b.second, &b.first) } else { (&b.first, &b.second) };
                    let s = gue_sandwich(p, q, m, b.w);
                    total = Some(match total {
                        None => s,
                        Some(t) => t + s,
                    });
                }
                total.expect("at least one block")
            }
            Family::Linear { w, first, second } => {
                if reversed {
                    linear_sandwich(second, first, m, *w)
                } else {
                    linear_sandwich(first, second, m, *w)
                }
            }
        }
    }
}

/// `w Σ_x P_x† (Σ_y P_y M Q_y†) Q_x`.
fn gue_sandwich(p: &[SignedMap], q: &[SignedMap], m: &Op, w: f64) -> DMatrix<f64> {
    let rows = p[0].src_dim();
    let cols = q[0].src_dim();
    let (mr, mc) = (p[0].dst_dim(), q[0].dst_dim());
    let mut out = DMatrix::zeros(rows, cols);
    if mr == 0 || mc == 0 {
        return out;
    }
    let mut g = DMatrix::<f64>::zeros(mr, mc);
    match m {
        Op::Dense(d) => {
            for (py, qy) in p.iter().zip(q) {
                for (j, j2, h) in qy.entries() {
                    for (i, i2, gs) in py.entries() {
                        g[(i2, j2)] += gs * h * d[(i, j)];
                    }
                }
            }
        }
        Op::Mono(mm) => {
            for (py, qy) in p.iter().zip(q) {
                for (j, i, s) in mm.entries() {
                    if let (Some((i2, g1)), Some((j2, h))) = (py.apply(i), qy.apply(j)) {
                        g[(i2, j2)] += g1 * h * s;
                    }
                }
            }
        }
    }
    for (px, qx) in p.iter().zip(q) {
        for (j, j2, h) in qx.entries() {
            for (i, i2, g1) in px.entries() {
                out[(i, j)] += g1 * h * g[(i2, j2)];
            }
        }
    }
    out *= w;
    out
}

/// `w Σ_r L_r M R_r`.
fn linear_sandwich(ls: &[SignedMap], rs: &[SignedMap], m: &Op, w: f64) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(ls[0].dst_dim(), rs[0].src_dim());
    for (l, r) in ls.iter().zip(rs) {
        match m {
            Op::Dense(d) => {
                for (y, j, h) in r.entries() {
                    for (i, x, g) in l.entries() {
                        out[(x, y)] += g * h * d[(i, j)];
                    }
                }
            }
            Op::Mono(mm) => {
                for (y, j, h) in r.entries() {
                    if let Some((i, s)) = mm.apply(j) {
                        if let Some((x, g)) = l.apply(i) {
                            out[(x, y)] += g * h * s;
                        }
                    }
                }
            }
        }
    }
    out *= w;
    out
}

// ---------------------------------------------------------------------------
// Words

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum End {
    First,
    Second,
}

#[derive(Debug, Clone)]
enum Item {
    Fixed(Op),
    Letter { chord: usize, end: End, cols: usize },
}

impl Item {
    fn is_letter(&self) -> bool {
        matches!(self, Item::Letter { .. })
    }
}

fn find_ends(items: &[Item], chord: usize) -> (usize, usize) {
    let mut first = None;
    let mut second = None;
    for (i, it) in items.iter().enumerate() {
        if let Item::Letter { chord: c, end, .. } = it {
            if *c == chord {
                match end {
                    End::First => first = Some(i),
                    End::Second => second = Some(i),
                }
            }
        }
    }
    (first.expect("first end present"), second.expect("second end present"))
}

fn live_chords(items: &[Item]) -> Vec<usize> {
    let mut v: Vec<usize> = items
        .iter()
        .filter_map(|it| match it {
            Item::Letter { chord, end: End::First, .. } => Some(*chord),
            _ => None,
        })
        .collect();
    v.sort_unstable();
    v
}

/// Strictly-inside test on the cyclic interval running forward from `a` to `b`.
fn inside(a: usize, b: usize, x: usize, n: usize) -> bool {
    let span = (b + n - a) % n;
    let off = (x + n - a) % n;
    off > 0 && off < span
}

fn crossing(c1: (usize, usize), c2: (usize, usize), n: usize) -> bool {
    inside(c1.0, c1.1, c2.0, n) != inside(c1.0, c1.1, c2.1, n)
}

fn rotate(items: Vec<Item>, start: usize) -> Vec<Item> {
    let n = items.len();
    let mut v = items;
    v.rotate_left(start % n);
    v
}

struct Reducer<'a> {
    families: &'a [Family],
}

impl Reducer<'_> {
    fn reduce(&self, items: Vec<Item>) -> Result<f64> {
        let chords = live_chords(&items);
        if chords.is_empty() {
            let ops: Vec<Op> = items
                .into_iter()
                .map(|it| match it {
                    Item::Fixed(op) => op,
                    Item::Letter { .. } => unreachable!(),
                })
                .collect();
            return Ok(cyclic_trace(&ops));
        }
        let n = items.len();

        // A chord with a letter-free side collapses to a sandwich.
        let mut best: Option<(usize, usize, usize)> = None; // (arc length, start, end)
        for &c in &chords {
            let (f, s) = find_ends(&items, c);
            for (a, b) in [(f, s), (s, f)] {
                let len = (b + n - a) % n - 1;
                let clean = (1..=len).all(|o| !items[(a + o) % n].is_letter());
                if clean && best.is_none_or(|(l, _, _)| len < l) {
                    best = Some((len, a, b));
                }
            }
        }
        if let Some((len, a, _)) = best {
            let items = rotate(items, a);
            let Item::Letter { chord, end, cols } = items[0] else { unreachable!() };
            let mut m: Option<Op> = None;
            for it in &items[1..=len] {
                let Item::Fixed(op) = it else { unreachable!() };
                m = Some(match m {
                    None => op.clone(),
                    Some(acc) => acc.mul(op),
                });
            }
            let m = m.unwrap_or_else(|| Op::Mono(SignedMap::identity(cols)));
            let s = self.families[chord].sandwich(&m, end == End::Second);
            let mut next = Vec::with_capacity(n - len - 1);
            next.push(Item::Fixed(Op::Dense(s)));
            next.extend(items.into_iter().skip(len + 2));
            return self.reduce(next);
        }

        let ends: Vec<(usize, usize)> = chords.iter().map(|&c| find_ends(&items, c)).collect();
        let crossings: Vec<usize> = (0..chords.len())
            .map(|i| (0..chords.len()).filter(|&j| j != i && crossing(ends[i], ends[j], n)).count())
            .collect();

        if n == 6 && chords.len() == 3 && crossings.iter().all(|&c| c == 2) {
            return self.fully_crossing(items);
        }

        let pick = (0..chords.len())
            .max_by(|&i, &j| {
                crossings[i]
                    .cmp(&crossings[j])
                    .then(self.families[chords[j]].term_count().cmp(&self.families[chords[i]].term_count()))
            })
            .expect("at least one chord");
        let chord = chords[pick];
        let (pf, ps) = ends[pick];
        let family = &self.families[chord];
        let values: Vec<Result<f64>> = (0..family.term_count())
            .into_par_iter()
            .map(|idx| {
                let Some((w, l, r)) = family.term(idx) else {
                    return Ok(0.0);
                };
                let mut next = items.clone();
                next[pf] = Item::Fixed(Op::Mono(l));
                next[ps] = Item::Fixed(Op::Mono(r));
                Ok(w * self.reduce(next)?)
            })
            .collect();
        let mut total = 0.0;
        for v in values {
            total += v?;
        }
        Ok(total)
    }

    /// `tr(B1 B2 B3)` for three mutually crossing chords at `(i, i+3)`.
    fn fully_crossing(&self, items: Vec<Item>) -> Result<f64> {
        // Row dimension of letter x is the column dimension of letter x-1.
        let cols: Vec<usize> = items
            .iter()
            .map(|it| match it {
                Item::Letter { cols, .. } => *cols,
                Item::Fixed(_) => unreachable!(),
            })
            .collect();
        let rows = |x: usize| cols[(x + 5) % 6];
        let chord_at = |x: usize| match items[x] {
            Item::Letter { chord, end, .. } => (chord, end),
            Item::Fixed(_) => unreachable!(),
        };
        for x in 0..3 {
            if chord_at(x).0 != chord_at(x + 3).0 {
                return Err(OracleError::DimensionMismatch("unexpected crossing layout".into()));
            }
        }
        // Pair indices P=(v1,v4), Q=(v2,v5), R=(v3,v0), with v_x the row of letter x.
        // Chord (1,4) contributes B1[P,Q], (2,5) B2[Q,R], (0,3) B3[R,P].
        let b1 = self.pair_tensor(chord_at(1), chord_at(4), rows(4), cols[4])?;
        let b2 = self.pair_tensor(chord_at(2), chord_at(5), rows(5), cols[5])?;
        let b3 = self.pair_tensor(chord_at(3), chord_at(0), rows(0), cols[0])?;
        let b3t = b3.transpose_pairs(rows(1), rows(4));
        Ok(sparse_trace_product(&b1, &b2, &b3t))
    }

    /// Sparse tensor `K[(u,u'),(v,v')] = Σ_r w X[u,v] Y[u',v']` for letters
    /// `x` and `y` of one chord, with `Y` of shape `y_rows x y_cols`.
    fn pair_tensor(&self, x: (usize, End), y: (usize, End), y_rows: usize, y_cols: usize) -> Result<Csr> {
        let (chord, x_end) = x;
        debug_assert_eq!(chord, y.0);
        let family = &self.families[chord];
        let parts: Vec<Vec<(u64, u64, f64)>> = (0..family.term_count())
            .into_par_iter()
            .map(|idx| {
                let mut out = Vec::new();
                if let Some((w, l, r)) = family.term(idx) {
                    let (tx, ty) = if x_end == End::First { (l, r) } else { (r, l) };
                    for (xv, xu, g) in tx.entries() {
                        for (yv, yu, h) in ty.entries() {
                            let row = (xu * y_rows + yu) as u64;
                            let col = (xv * y_cols + yv) as u64;
                            out.push((row, col, w * g * h));
                        }
                    }
                }
                out
            })
            .collect();
        Ok(Csr::from_triplets(parts.into_iter().flatten().collect()))
    }
}

/// Compressed sparse rows with `u64` pair indices.
#[derive(Debug)]
struct Csr {
    offsets: Vec<usize>,
    row_ids: Vec<u64>,
    cols: Vec<u64>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_triplets(mut t: Vec<(u64, u64, f64)>) -> Csr {
        t.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ids = Vec::new();
        let mut offsets = vec![0];
        let mut cols = Vec::new();
        let mut vals: Vec<f64> = Vec::new();
        let mut last: Option<(u64, u64)> = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            if last.map(|l| l.0) != Some(r) {
                if last.is_some() {
                    offsets.push(cols.len());
                }
                row_ids.push(r);
            }
            cols.push(c);
            vals.push(v);
            last = Some((r, c));
        }
        if last.is_some() {
            offsets.push(cols.len());
        }
        Csr {
            offsets,
            row_ids,
            cols,
            vals,
        }
    }

    fn row(&self, r: u64) -> Option<(&[u64], &[f64])> {
        let i = self.row_ids.binary_search(&r).ok()?;
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        Some((&self.cols[a..b], &self.vals[a..b]))
    }

    /// Input indexed `[R, (v4,v1)]`; output indexed `[P=(v1,v4), R]`.
    fn transpose_pairs(&self, d1: usize, d4: usize) -> Csr {
        let (d1, d4) = (d1 as u64, d4 as u64);
        let mut t = Vec::with_capacity(self.vals.len());
        for (i, &r) in self.row_ids.iter().enumerate() {
            for k in self.offsets[i]..self.offsets[i + 1] {
                let c = self.cols[k];
                t.push(((c % d1) * d4 + c / d1, r, self.vals[k]));
            }
        }
        Csr::from_triplets(t)
    }
}

/// `Σ_P Σ_R (B1 B2)[P,R] B3t[P,R]`.
fn sparse_trace_product(b1: &Csr, b2: &Csr, b3t: &Csr) -> f64 {
    let partial: Vec<f64> = (0..b1.row_ids.len())
        .into_par_iter()
        .map(|i| {
            let p = b1.row_ids[i];
            let Some((targets, weights)) = b3t.row(p) else {
                return 0.0;
            };
            let mut acc = std::collections::HashMap::<u64, f64>::with_capacity(64);
            for k in b1.offsets[i]..b1.offsets[i + 1] {
                let (q, v) = (b1.cols[k], b1.vals[k]);
                if let Some((rs, ws)) = b2.row(q) {
                    for (&r, &w) in rs.iter().zip(ws) {
                        *acc.entry(r).or_insert(0.0) += v * w;
                    }
                }
            }
            targets
                .iter()
                .zip(weights)
                .map(|(r, w)| acc.get(r).map_or(0.0, |a| a * w))
                .sum()
        })
        .collect();
    partial.iter().sum()
}

// ---------------------------------------------------------------------------
// Oracle

#[derive(Debug, Clone)]
struct SectorMaps {
    maps: Arc<Vec<SignedMap>>,
    adj: Arc<Vec<SignedMap>>,
}

impl SectorMaps {
    fn new(maps: Arc<Vec<SignedMap>>) -> SectorMaps {
        let adj = Arc::new(maps.iter().map(SignedMap::adjoint).collect());
        SectorMaps { maps, adj }
    }
}

#[derive(Debug, Clone)]
struct HMaps {
    w: f64,
    initial: SectorMaps,
    fin: SectorMaps,
}

/// Exact Wick-contraction evaluator for one spec.
#[derive(Debug, Clone)]
pub struct Oracle {
    ensemble: Ensemble,
    h: Vec<HMaps>,
    o_family: Family,
}

impl Oracle {
    pub fn new(spec: &ModelSpec) -> Result<Oracle> {
        Oracle::with_limits(spec, OracleLimits::default())
    }

    pub fn with_limits(spec: &ModelSpec, limits: OracleLimits) -> Result<Oracle> {
        spec.validate()?;
        if !modes_fit(spec) {
            return Err(OracleError::Infeasible(format!("more than {} modes", crate::fock::MAX_MODES)));
        }
        for (label, sector) in [("initial", spec.initial_sector()), ("final", spec.final_sector())] {
            let dim = sector.dim();
            if dim > limits.max_dim as u128 {
                return Err(OracleError::Infeasible(format!(
                    "{label} sector dimension {dim} exceeds {}",
                    limits.max_dim
                )));
            }
        }
        let ensemble = Ensemble::new(spec)?;
        let h: Vec<HMaps> = ensemble
            .h_blocks
            .iter()
            .map(|b| HMaps {
                w: b.variance,
                initial: SectorMaps::new(b.initial_maps.clone()),
                fin: SectorMaps::new(b.final_maps.clone()),
            })
            .collect();
        let h_terms: usize = ensemble.h_blocks.iter().map(|b| b.k_dim * b.k_dim).sum();
        if h_terms > limits.max_terms {
            return Err(OracleError::Infeasible(format!(
                "H covariance has {h_terms} terms, above {}",
                limits.max_terms
            )));
        }
        let o_family = match &ensemble.transition {
            TransitionStructure::Hermitian { variance, maps, .. } => {
                let s = SectorMaps::new(maps.clone());
                Family::Gue(vec![GueBlock {
                    w: *variance,
                    first: s.maps.clone(),
                    first_adj: s.adj.clone(),
                    second: s.maps,
                    second_adj: s.adj,
                }])
            }
            TransitionStructure::Linear { variance, maps, .. } => Family::Linear {
                w: *variance,
                first: Arc::new(maps.iter().map(SignedMap::adjoint).collect()),
                second: maps.clone(),
            },
        };
        let o_terms = o_family.term_count();
        if o_terms > limits.max_terms {
            return Err(OracleError::Infeasible(format!(
                "O covariance has {o_terms} terms, above {}",
                limits.max_terms
            )));
        }
        Ok(Oracle {
            ensemble,
            h,
            o_family,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.ensemble.spec
    }

    pub fn initial_dim(&self) -> usize {
        self.ensemble.initial_dim()
    }

    pub fn final_dim(&self) -> usize {
        self.ensemble.final_dim()
    }

    fn sector_maps(hm: &HMaps, s: Sector) -> &SectorMaps {
        match s {
            Sector::Initial => &hm.initial,
            Sector::Final => &hm.fin,
        }
    }

    fn h_family(&self, first: Sector, second: Sector) -> Family {
        Family::Gue(
            self.h
                .iter()
                .map(|hm| {
                    let a = Self::sector_maps(hm, first);
                    let b = Self::sector_maps(hm, second);
                    GueBlock {
                        w: hm.w,
                        first: a.maps.clone(),
                        first_adj: a.adj.clone(),
                        second: b.maps.clone(),
                        second_adj: b.adj.clone(),
                    }
                })
                .collect(),
        )
    }

    fn dim(&self, s: Sector) -> usize {
        match s {
            Sector::Initial => self.initial_dim(),
            Sector::Final => self.final_dim(),
        }
    }

    /// Sum over matchings of `tr(letters)` where `o` marks the `O†`/`O`
    /// positions (if any) and the rest are `H` letters in the given sectors.
    fn contract(&self, sectors: &[Option<Sector>], o_cols: Option<(usize, usize, usize, usize)>) -> Result<f64> {
        let h_pos: Vec<usize> = (0..sectors.len()).filter(|&i| sectors[i].is_some()).collect();
        let matchings: Vec<Vec<(usize, usize)>> = match h_pos.len() {
            0 => vec![vec![]],
            2 => vec![vec![(h_pos[0], h_pos[1])]],
            4 => {
                let [a, b, c, d] = [h_pos[0], h_pos[1], h_pos[2], h_pos[3]];
                vec![vec![(a, b), (c, d)], vec![(a, c), (b, d)], vec![(a, d), (b, c)]]
            }
            n => return Err(OracleError::OrderTooHigh(n)),
        };
        let mut total = 0.0;
        for matching in matchings {
            let mut families = Vec::new();
            let mut items: Vec<Option<Item>> = vec![None; sectors.len()];
            if let Some((p_dag, p_o, cols_dag, cols_o)) = o_cols {
                families.push(self.o_family.clone());
                items[p_dag] = Some(Item::Letter {
                    chord: 0,
                    end: End::First,
                    cols: cols_dag,
                });
                items[p_o] = Some(Item::Letter {
                    chord: 0,
                    end: End::Second,
                    cols: cols_o,
                });
            }
            for &(p, q) in &matching {
                let (sp, sq) = (sectors[p].unwrap(), sectors[q].unwrap());
                let chord = families.len();
                families.push(self.h_family(sp, sq));
                items[p] = Some(Item::Letter {
                    chord,
                    end: End::First,
                    cols: self.dim(sp),
                });
                items[q] = Some(Item::Letter {
                    chord,
                    end: End::Second,
                    cols: self.dim(sq),
                });
            }
            let items: Vec<Item> = items.into_iter().map(|i| i.expect("every position assigned")).collect();
            total += Reducer { families: &families }.reduce(items)?;
        }
        Ok(total)
    }

    /// `E tr(O† H_f^Q O H_i^P) / dim(initial)`.
    pub fn exact_moment(&self, p: usize, q: usize) -> Result<MomentValue> {
        if p + q > 4 {
            return Err(OracleError::OrderTooHigh(p + q));
        }
        if (p + q) % 2 == 1 {
            return Ok(MomentValue::OddZero);
        }
        let mut sectors = vec![None];
        sectors.extend(std::iter::repeat_n(Some(Sector::Final), q));
        sectors.push(None);
        sectors.extend(std::iter::repeat_n(Some(Sector::Initial), p));
        let o_cols = Some((0, q + 1, self.final_dim(), self.initial_dim()));
        let trace = self.contract(&sectors, o_cols)?;
        Ok(MomentValue::Even(trace / self.initial_dim() as f64))
    }

    /// All fifteen moments with `P + Q <= 4`, flagged exact.
    pub fn moment_set(&self) -> Result<MomentSet> {
        let mut ms = MomentSet::empty(Provenance::Oracle);
        for &(p, q) in &MOMENT_KEYS {
            ms.set(p, q, Flagged::exact(self.exact_moment(p, q)?.value()));
        }
        Ok(ms)
    }

    /// `E tr(H^power) / dim` in one sector, for `power <= 4`.
    pub fn h_moment(&self, sector: Sector, power: usize) -> Result<f64> {
        if power > 4 {
            return Err(OracleError::OrderTooHigh(power));
        }
        if power % 2 == 1 {
            return Ok(0.0);
        }
        if power == 0 {
            return Ok(1.0);
        }
        let sectors = vec![Some(sector); power];
        Ok(self.contract(&sectors, None)? / self.dim(sector) as f64)
    }

    /// Applies one covariance channel to `x`.
    pub fn channel_apply(&self, channel: Channel, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (family, reversed, dim) = match channel {
            Channel::Hamiltonian(s) => (self.h_family(s, s), false, self.dim(s)),
            Channel::TransitionBackward => (self.o_family.clone(), false, self.final_dim()),
            Channel::TransitionForward => (self.o_family.clone(), true, self.initial_dim()),
        };
        if x.nrows() != dim || x.ncols() != dim {
            return Err(OracleError::DimensionMismatch(format!(
                "expected {dim}x{dim}, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        Ok(family.sandwich(&Op::Dense(x.clone()), reversed))
    }
}

/// Convenience wrapper over [`Oracle::exact_moment`].
pub fn exact_moment(spec: &ModelSpec, p: usize, q: usize) -> Result<MomentValue> {
    Oracle::new(spec)?.exact_moment(p, q)
}

/// Third term of `M22` recovered as oracle minus the two closed-form terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RacahExtraction {
    pub m22: f64,
    pub term1: f64,
    pub term2: f64,
    /// Per unit `V_O² V_H⁴`.
    pub term3: f64,
    /// Weight of the `ν = t + k` channel; zero when that channel is absent.
    pub dominant_weight: f64,
    /// `term3 / dominant_weight`, the squared U-coefficient the dominant
    /// channel would need to carry the whole third term.
    pub implied_u2: Option<f64>,
}

pub fn extract_racah(n: usize, m: usize, k: usize, t: usize) -> Result<RacahExtraction> {
    extract_racah_with_limits(n, m, k, t, OracleLimits::default())
}

pub fn extract_racah_with_limits(n: usize, m: usize, k: usize, t: usize, limits: OracleLimits) -> Result<RacahExtraction> {
    let spec = ModelSpec::NumberConserving {
        n,
        m,
        k,
        t,
        v_h: 1.0,
        v_o: 1.0,
    };
    let m22 = Oracle::with_limits(&spec, limits)?.exact_moment(2, 2)?.value();
    let terms = analytic::m22_terms(n, m, k, t, 1.0, 1.0)?;
    let term3 = m22 - terms.term1 - terms.term2;
    let dominant_weight = analytic::dominant_racah_weight(n, m, k, t)?;
    Ok(RacahExtraction {
        m22,
        term1: terms.term1,
        term2: terms.term2,
        term3,
        dominant_weight,
        implied_u2: (dominant_weight > 0.0).then(|| term3 / dominant_weight),
    })
}

fn modes_fit(spec: &ModelSpec) -> bool {
    let max = crate::fock::MAX_MODES;
    match *spec {
        ModelSpec::NumberConserving { n, .. } | ModelSpec::Removal { n, .. } => n <= max,
        ModelSpec::BetaDecay { n1, n2, .. } => n1 <= max && n2 <= max,
    }
}

/// Whether a spec is within `limits`.
pub fn is_feasible(spec: &ModelSpec, limits: OracleLimits) -> bool {
    if !modes_fit(spec) {
        return false;
    }
    let dims_ok = [spec.initial_sector(), spec.final_sector()]
        .iter()
        .all(|s| s.dim() <= limits.max_dim as u128);
    let terms = |n: usize, r: usize| combinat::binom(n as i64, r as i64).map_or(u128::MAX, |c| c.get());
    let terms_ok = match *spec {
        ModelSpec::NumberConserving { n, k, t, .. } => {
            terms(n, k).saturating_pow(2) <= limits.max_terms as u128
                && terms(n, t).saturating_pow(2) <= limits.max_terms as u128
        }
        ModelSpec::Removal { n, k, k0, .. } => {
            terms(n, k).saturating_pow(2) <= limits.max_terms as u128 && terms(n, k0) <= limits.max_terms as u128
        }
        ModelSpec::BetaDecay { n1, n2, k, k0, .. } => {
            let h: u128 = (0..=k).map(|i| (terms(n1, i).saturating_mul(terms(n2, k - i))).saturating_pow(2)).sum();
            h <= limits.max_terms as u128 && terms(n1, k0).saturating_mul(terms(n2, k0)) <= limits.max_terms as u128
        }
    };
    dims_ok && terms_ok
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

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1.0)
    }

    #[test]
    fn frozen_number_conserving_moments() {
        // (N, m, k, t) -> M20, M40, M11, M31, M22
        let table: &[((usize, usize, usize, usize), [f64; 5])] = &[
            ((4, 2, 1, 1), [36.0, 528.0, 16.0, 248.0, 288.0]),
            ((5, 2, 1, 1), [64.0, 1248.0, 28.0, 564.0, 636.0]),
            ((5, 2, 2, 1), [80.0, 1608.0, 8.0, 168.0, 888.0]),
            ((5, 2, 1, 2), [80.0, 1560.0, 8.0, 192.0, 696.0]),
            ((5, 3, 2, 1), [162.0, 6237.0, 54.0, 2205.0, 3681.0]),
            ((6, 2, 1, 1), [100.0, 2440.0, 44.0, 1096.0, 1208.0]),
            ((6, 3, 2, 2), [900.0, 56430.0, 81.0, 5778.0, 28080.0]),
        ];
        for &((n, m, k, t), want) in table {
            let o = Oracle::new(&nc(n, m, k, t)).unwrap();
            let got = [(2, 0), (4, 0), (1, 1), (3, 1), (2, 2)].map(|(p, q)| o.exact_moment(p, q).unwrap().value());
            for (g, w) in got.iter().zip(want) {
                assert!(close(*g, w), "{n},{m},{k},{t}: got {got:?} want {want:?}");
            }
        }
    }

    #[test]
    fn frozen_third_terms() {
        for &((n, m, k, t), want) in &[
            ((4, 2, 1, 1), 16.0),
            ((5, 3, 1, 2), 126.0),
            ((6, 2, 1, 1), -8.0),
            ((6, 3, 1, 1), 216.0),
            ((5, 2, 2, 2), 10.0),
        ] {
            let r = extract_racah(n, m, k, t).unwrap();
            assert!(close(r.term3, want), "{n},{m},{k},{t}: {r:?}");
        }
    }

    fn specs() -> Vec<ModelSpec> {
        let mut v = vec![nc(5, 2, 1, 1), nc(6, 3, 2, 1), nc(6, 3, 1, 2), nc(7, 3, 2, 2)];
        for (n, m, k, k0) in [(6, 3, 2, 1), (6, 3, 1, 2), (5, 3, 2, 2), (6, 2, 2, 1)] {
            v.push(ModelSpec::Removal {
                n,
                m,
                k,
                k0,
                v_h: 1.0,
                v_o: 1.0,
            });
        }
        for (n1, n2, m1, m2, k, k0) in [(4, 4, 2, 2, 2, 1), (3, 4, 1, 2, 1, 1), (4, 3, 1, 2, 2, 2)] {
            v.push(ModelSpec::BetaDecay {
                n1,
                n2,
                m1,
                m2,
                k,
                k0,
                v_h: 1.0,
                v_h_ij: Vec::new(),
                v_o: 1.0,
            });
        }
        v
    }

    #[test]
    fn agrees_with_every_exact_closed_form() {
        for spec in specs() {
            let exact = Oracle::new(&spec).unwrap().moment_set().unwrap();
            let closed = analytic::moment_set(&spec, None).unwrap();
            for ((p, q), f) in closed.iter() {
                if f.is_exact() {
                    let (a, b) = (f.value.unwrap(), exact.value(p, q).unwrap());
                    assert!(close(b, a), "{spec:?} M{p}{q}: oracle {b}, closed form {a}");
                }
            }
        }
    }

    #[test]
    fn completes_m22_through_extracted_third_term() {
        let r = extract_racah(6, 3, 1, 1).unwrap();
        let input = analytic::RacahInput::Aggregated(r.term3);
        let full = analytic::m22(6, 3, 1, 1, 1.0, 1.0, Some(&input)).unwrap();
        assert!(full.is_exact());
        assert!((full.value.unwrap() - r.m22).abs() <= 1e-9 * r.m22);
    }

    #[test]
    fn hermitian_symmetry_and_parity() {
        for spec in [nc(6, 3, 2, 1), nc(5, 2, 1, 2)] {
            let o = Oracle::new(&spec).unwrap();
            let v = |p, q| o.exact_moment(p, q).unwrap().value();
            assert!(close(v(3, 1), v(1, 3)));
            assert!(close(v(4, 0), v(0, 4)));
            assert!(close(v(2, 0), v(0, 2)));
            assert_eq!(o.exact_moment(2, 1).unwrap(), MomentValue::OddZero);
            assert_eq!(o.exact_moment(0, 3).unwrap(), MomentValue::OddZero);
            assert!(matches!(o.exact_moment(4, 2), Err(OracleError::OrderTooHigh(6))));
        }
    }

    #[test]
    fn moments_scale_with_variances() {
        for spec in specs() {
            let base = Oracle::new(&spec).unwrap().moment_set().unwrap();
            let scaled = Oracle::new(&spec.with_variances(2.0, 3.0)).unwrap().moment_set().unwrap();
            for &(p, q) in &MOMENT_KEYS {
                let factor = 3.0 * 2f64.powi(((p + q) / 2) as i32);
                let (a, b) = (base.value(p, q).unwrap(), scaled.value(p, q).unwrap());
                assert!(close(b, factor * a), "{spec:?} M{p}{q}");
            }
        }
    }

    #[test]
    fn h_moments_match_closed_form() {
        let o = Oracle::new(&nc(7, 3, 2, 1)).unwrap();
        let h = analytic::h_moments(7, 3, 2, 1.0).unwrap();
        assert!(close(o.h_moment(Sector::Initial, 2).unwrap(), h.h2));
        assert!(close(o.h_moment(Sector::Final, 4).unwrap(), h.h4));
        assert_eq!(o.h_moment(Sector::Initial, 3).unwrap(), 0.0);
    }

    #[test]
    fn refuses_oversized_specs() {
        let big = nc(12, 5, 1, 1);
        assert!(matches!(Oracle::new(&big), Err(OracleError::Infeasible(_))));
        assert!(!is_feasible(&big, OracleLimits::default()));
        let lim = OracleLimits {
            max_dim: 300,
            max_terms: 20,
        };
        assert!(matches!(Oracle::with_limits(&nc(6, 3, 2, 1), lim), Err(OracleError::Infeasible(_))));
        assert!(!is_feasible(&nc(6, 3, 2, 1), lim));
        assert!(is_feasible(&nc(6, 3, 2, 1), OracleLimits::default()));
    }

    fn test_matrix(d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(d, d, |i, j| ((3 * i + 7 * j) % 5) as f64 - 1.5 + 0.1 * i as f64)
    }

    #[test]
    fn full_rank_channel_is_trace_times_identity() {
        let o = Oracle::new(&nc(5, 2, 2, 1)).unwrap();
        let x = test_matrix(10);
        let y = o.channel_apply(Channel::Hamiltonian(Sector::Initial), &x).unwrap();
        let want = DMatrix::identity(10, 10) * x.trace();
        assert!((y - want).norm() < 1e-12);
    }

    #[test]
    fn channels_match_dense_sums() {
        let spec = ModelSpec::Removal {
            n: 6,
            m: 3,
            k: 2,
            k0: 1,
            v_h: 1.5,
            v_o: 0.5,
        };
        let o = Oracle::new(&spec).unwrap();
        let ens = Ensemble::new(&spec).unwrap();
        let TransitionStructure::Linear { maps, .. } = &ens.transition else { panic!() };
        let xf = test_matrix(o.final_dim());
        let mut want = DMatrix::zeros(o.initial_dim(), o.initial_dim());
        for t in maps.iter() {
            let d = t.to_dense();
            want += d.transpose() * &xf * &d * 0.5;
        }
        let got = o.channel_apply(Channel::TransitionBackward, &xf).unwrap();
        assert!((got - &want).norm() < 1e-10);

        let xi = test_matrix(o.initial_dim());
        let mut want = DMatrix::zeros(o.final_dim(), o.final_dim());
        for t in maps.iter() {
            let d = t.to_dense();
            want += &d * &xi * d.transpose() * 0.5;
        }
        assert!((o.channel_apply(Channel::TransitionForward, &xi).unwrap() - want).norm() < 1e-10);

        let amaps = &ens.h_blocks[0].initial_maps;
        let mut want = DMatrix::zeros(o.initial_dim(), o.initial_dim());
        for a in amaps.iter() {
            for b in amaps.iter() {
                let (da, db) = (a.to_dense(), b.to_dense());
                want += da.transpose() * &db * &xi * db.transpose() * &da * 1.5;
            }
        }
        let got = o.channel_apply(Channel::Hamiltonian(Sector::Initial), &xi).unwrap();
        assert!((got - want).norm() < 1e-10);
        assert!(o.channel_apply(Channel::TransitionBackward, &xi).is_err());
    }
}
