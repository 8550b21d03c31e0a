//! Boundary-matching layer: the sparse sampling mask and its contraction
//! with a feature sequence.
//!
//! A BM cell `(i, j)` is the proposal starting at snippet `j` with duration
//! `i + 1`. For each cell, `N` points are spread evenly over the proposal
//! expanded by `expand · d` on both sides; each point linearly interpolates
//! the two neighbouring snippets. The mask is data independent, so it is
//! built once per `(T, D, N, expand)` and shared.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{BmnError, Result};
use crate::real::Real;

/// At most two `(snippet, weight)` taps. Unused taps carry weight 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseRow {
    pub idx: [u32; 2],
    pub w: [f64; 2],
    pub nnz: u8,
}

impl SparseRow {
    const EMPTY: SparseRow = SparseRow {
        idx: [0, 0],
        w: [0.0, 0.0],
        nnz: 0,
    };

    pub fn taps(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.nnz as usize).map(|k| (self.idx[k] as usize, self.w[k]))
    }

    pub fn weight_sum(&self) -> f64 {
        self.taps().map(|(_, w)| w).sum()
    }

    fn push(&mut self, idx: usize, w: f64) {
        let k = self.nnz as usize;
        self.idx[k] = idx as u32;
        self.w[k] = w;
        self.nnz += 1;
    }
}

/// Linear-interpolation taps for a (possibly fractional) sample point,
/// restricted to `[0, t)`. Taps falling outside the range are dropped.
pub fn interp_row(point: f64, t: usize) -> SparseRow {
    let mut row = SparseRow::EMPTY;
    let lo = point.floor();
    let frac = point - lo;
    for (pos, w) in [(lo, 1.0 - frac), (lo + 1.0, frac)] {
        if w > 0.0 && pos >= 0.0 && pos < t as f64 {
            row.push(pos as usize, w);
        }
    }
    row
}

/// True iff the proposal of cell `(i, j)` ends inside the sequence.
#[inline]
pub fn cell_is_valid(i: usize, j: usize, t: usize) -> bool {
    j + i + 1 < t
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleMask {
    t: usize,
    d: usize,
    n: usize,
    expand: f64,
    /// Indexed `[n][i][j]`.
    rows: Vec<SparseRow>,
    /// Indexed `[i][j]`.
    valid: Vec<bool>,
}

/// Sample positions of cell `(i, j)`, both expanded endpoints included.
pub fn sample_points(i: usize, j: usize, n: usize, expand: f64) -> impl Iterator<Item = f64> {
    let d = (i + 1) as f64;
    let lo = j as f64 - expand * d;
    let step = (1.0 + 2.0 * expand) * d / (n - 1) as f64;
    (0..n).map(move |k| lo + k as f64 * step)
}

pub fn build_sample_mask(t: usize, d: usize, n: usize, expand: f64) -> Result<SampleMask> {
    if n < 2 {
        return Err(BmnError::Parameter(format!("need N ≥ 2 sample points, got {n}")));
    }
    if d == 0 || d > t {
        return Err(BmnError::Parameter(format!(
            "max duration D={d} must satisfy 1 ≤ D ≤ T={t}"
        )));
    }
    if !(expand >= 0.0) || !expand.is_finite() {
        return Err(BmnError::Parameter(format!("invalid expand ratio {expand}")));
    }
    let mut rows = vec![SparseRow::EMPTY; n * d * t];
    for i in 0..d {
        for j in 0..t {
            for (k, p) in sample_points(i, j, n, expand).enumerate() {
                rows[(k * d + i) * t + j] = interp_row(p, t);
            }
        }
    }
    let valid = (0..d)
        .flat_map(|i| (0..t).map(move |j| cell_is_valid(i, j, t)))
        .collect();
    Ok(SampleMask {
        t,
        d,
        n,
        expand,
        rows,
        valid,
    })
}

impl SampleMask {
    /// Shared, lazily built mask for the given geometry.
    pub fn cached(t: usize, d: usize, n: usize, expand: f64) -> Result<Arc<SampleMask>> {
        type Key = (usize, usize, usize, u64);
        static CACHE: OnceLock<Mutex<HashMap<Key, Arc<SampleMask>>>> = OnceLock::new();
        let key = (t, d, n, expand.to_bits());
        let cache = CACHE.get_or_init(Default::default);
        if let Some(mask) = cache.lock().unwrap().get(&key) {
            return Ok(Arc::clone(mask));
        }
        let mask = Arc::new(build_sample_mask(t, d, n, expand)?);
        cache
            .lock()
            .unwrap()
            .entry(key)
            .or_insert_with(|| Arc::clone(&mask));
        Ok(mask)
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn expand(&self) -> f64 {
        self.expand
    }

    pub fn cells(&self) -> usize {
        self.d * self.t
    }

    #[inline]
    pub fn row(&self, n: usize, i: usize, j: usize) -> &SparseRow {
        &self.rows[(n * self.d + i) * self.t + j]
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    #[inline]
    pub fn is_valid(&self, i: usize, j: usize) -> bool {
        self.valid[i * self.t + j]
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.nnz as usize).sum()
    }
}

/// BM feature map `M_F`, shape `C × N × D × T`.
#[derive(Clone, Debug, PartialEq)]
pub struct BmFeatureMap<S> {
    pub channels: usize,
    pub n: usize,
    pub d: usize,
    pub t: usize,
    pub data: Vec<S>,
}

impl<S: Real> BmFeatureMap<S> {
    pub fn zeros(channels: usize, n: usize, d: usize, t: usize) -> Self {
        BmFeatureMap {
            channels,
            n,
            d,
            t,
            data: vec![S::zero(); channels * n * d * t],
        }
    }

    #[inline]
    pub fn index(&self, c: usize, n: usize, i: usize, j: usize) -> usize {
        ((c * self.n + n) * self.d + i) * self.t + j
    }
}

/// `M_F[c,n,i,j] = Σ_t S[c,t]·W[n,t,i,j]`, zero on invalid cells.
///
/// `s` is `channels × T`, channel-major.
pub fn bm_forward<S: Real>(s: &[S], channels: usize, mask: &SampleMask) -> Result<BmFeatureMap<S>> {
    if s.len() != channels * mask.t {
        return Err(BmnError::Shape(format!(
            "feature sequence has {} values, expected {channels}×{}",
            s.len(),
            mask.t
        )));
    }
    let plane = mask.rows.len();
    let taps = dense_taps::<S>(mask);
    let mut out = BmFeatureMap::zeros(channels, mask.n, mask.d, mask.t);
    for (c, out_c) in out.data.chunks_exact_mut(plane).enumerate() {
        let row = &s[c * mask.t..(c + 1) * mask.t];
        for (o, &(i0, i1, w0, w1)) in out_c.iter_mut().zip(&taps) {
            *o = row[i0 as usize] * w0 + row[i1 as usize] * w1;
        }
    }
    Ok(out)
}

/// Adjoint of [`bm_forward`]: `dS[c,t] = Σ_{n,i,j} dM[c,n,i,j]·W[n,t,i,j]`.
/// Gradient entries on invalid cells do not contribute.
pub fn bm_backward<S: Real>(dm: &BmFeatureMap<S>, mask: &SampleMask) -> Result<Vec<S>> {
    if dm.n != mask.n || dm.d != mask.d || dm.t != mask.t || dm.data.len() != dm.channels * mask.rows.len()
    {
        return Err(BmnError::Shape(format!(
            "gradient map {}×{}×{}×{} does not match mask N={} D={} T={}",
            dm.channels, dm.n, dm.d, dm.t, mask.n, mask.d, mask.t
        )));
    }
    let plane = mask.rows.len();
    let taps = dense_taps::<S>(mask);
    let mut ds = vec![S::zero(); dm.channels * mask.t];
    for (c, g_c) in dm.data.chunks_exact(plane).enumerate() {
        let row = &mut ds[c * mask.t..(c + 1) * mask.t];
        for (&g, &(i0, i1, w0, w1)) in g_c.iter().zip(&taps) {
            row[i0 as usize] += g * w0;
            row[i1 as usize] += g * w1;
        }
    }
    Ok(ds)
}

/// Two-tap form of every mask row in `[n][i][j]` order, with invalid cells
/// zeroed so the hot loops need no branches.
pub(crate) fn dense_taps<S: Real>(mask: &SampleMask) -> Vec<(u32, u32, S, S)> {
    let cells = mask.cells();
    mask.rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            if !mask.valid[r % cells] {
                return (0, 0, S::zero(), S::zero());
            }
            let (i1, w1) = if row.nnz > 1 {
                (row.idx[1], S::of(row.w[1]))
            } else {
                (row.idx[0], S::zero())
            };
            let w0 = if row.nnz > 0 { S::of(row.w[0]) } else { S::zero() };
            (row.idx[0], i1, w0, w1)
        })
        .collect()
}
