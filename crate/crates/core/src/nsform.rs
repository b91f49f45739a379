//! Nonstandard-form compression of integral operators.
//!
//! A dense operator matrix on a periodic dyadic grid is decomposed level by
//! level: one analysis step applied to rows and columns splits the matrix
//! into detail blocks (wavelet interactions, which decay away from the
//! diagonal for smooth kernels) and a coarser scaling-by-scaling matrix that
//! is recursed on. The detail blocks are truncated to a centered periodic
//! band; only the coarsest scaling matrix stays dense. Applying the
//! compressed operator then costs O(N): a full decomposition of the input,
//! banded products per level, one small dense product, and the synthesis
//! recursion that accumulates partial outputs into the scaling channel.
//!
//! Block order per level: 1D `[detail-detail, detail-scaling,
//! scaling-detail]`; 2D the 15 blocks in row-major order over the four
//! analysis channels of each side (pure scaling channel last), with the
//! scaling-scaling position held by the next coarser matrix. The
//! detail-by-scaling "fourth block" of the product stage is identically zero
//! and never stored; the product loop still walks it so the measured cost
//! equals the locally connected layer that realizes this stage.

use crate::wavelet::{
    forward_step, forward_step_2d, inverse_step, inverse_step_2d, FilterPair, WaveletError,
};
use std::fmt;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub enum NsformError {
    NotSquare { len: usize },
    SideNotPowerOfDim { side: usize, dim: usize },
    EvenBandWidth { n_b: usize },
    CoarseLevelTooSmall { l0: usize, min: usize },
    BadLevelRange { l: usize, l0: usize },
    LevelTooDeep { level: usize, max: usize },
    DimensionMismatch { expected: usize, got: usize },
    SingularKernel,
    Filter(WaveletError),
}

impl fmt::Display for NsformError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NsformError::NotSquare { len } => write!(f, "matrix data of length {len} is not square"),
            NsformError::SideNotPowerOfDim { side, dim } => {
                write!(f, "matrix side {side} is not a power of {}", 1usize << dim)
            }
            NsformError::EvenBandWidth { n_b } => {
                write!(f, "band width {n_b} must be odd so the band is centered")
            }
            NsformError::CoarseLevelTooSmall { l0, min } => {
                write!(f, "coarse level {l0} is below the minimum {min} for this filter")
            }
            NsformError::BadLevelRange { l, l0 } => {
                write!(f, "finest level {l} must exceed coarse level {l0}")
            }
            NsformError::LevelTooDeep { level, max } => {
                write!(f, "grid level {level} exceeds the supported maximum {max}")
            }
            NsformError::DimensionMismatch { expected, got } => {
                write!(f, "vector length {got} does not match operator size {expected}")
            }
            NsformError::SingularKernel => write!(
                f,
                "kernel produced a non-finite entry; singular kernels need a regularization term"
            ),
            NsformError::Filter(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for NsformError {}

impl From<WaveletError> for NsformError {
    fn from(e: WaveletError) -> Self {
        NsformError::Filter(e)
    }
}

/// Dense square operator matrix with its grid geometry. For `dim = 1` the
/// side is `2^level`; for `dim = 2` rows and columns are flattened 2D grid
/// points and the side is `4^level`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub dim: usize,
    pub level: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(dim: usize, level: usize, data: Vec<f64>) -> Result<Self, NsformError> {
        let side = 1usize << (dim * level);
        if data.len() != side * side {
            return Err(NsformError::NotSquare { len: data.len() });
        }
        Ok(DenseMatrix { dim, level, side, data })
    }

    pub fn identity(dim: usize, level: usize) -> Self {
        let side = 1usize << (dim * level);
        let mut data = vec![0.0; side * side];
        for i in 0..side {
            data[i * side + i] = 1.0;
        }
        DenseMatrix { dim, level, side, data }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let n = self.side;
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &self.data[i * n..(i + 1) * n];
            out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
        out
    }
}

/// Kernel descriptor: an explicit matrix or a collocation rule. Kernel
/// callables receive the grid spacing `h = 2^-level` alongside the points so
/// singular kernels can regularize themselves at grid scale.
#[derive(Clone)]
pub enum KernelSpec {
    Explicit(DenseMatrix),
    Function1(Arc<dyn Fn(f64, f64, f64) -> f64 + Send + Sync>),
    Function2(Arc<dyn Fn(f64, f64, f64, f64, f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Explicit(m) => write!(f, "KernelSpec::Explicit(side {})", m.side),
            KernelSpec::Function1(_) => write!(f, "KernelSpec::Function1"),
            KernelSpec::Function2(_) => write!(f, "KernelSpec::Function2"),
        }
    }
}

/// Periodic distance on the unit interval.
pub fn periodic_dist(x: f64, y: f64) -> f64 {
    let d = (x - y).abs() % 1.0;
    d.min(1.0 - d)
}

impl KernelSpec {
    /// The identity operator as an explicit matrix.
    pub fn identity(dim: usize, level: usize) -> KernelSpec {
        KernelSpec::Explicit(DenseMatrix::identity(dim, level))
    }

    /// Inverse-distance kernel `1/(d(x,y) + h)`, regularized at grid scale.
    pub fn inv_dist(dim: usize) -> KernelSpec {
        match dim {
            1 => KernelSpec::Function1(Arc::new(|x, y, h| 1.0 / (periodic_dist(x, y) + h))),
            _ => KernelSpec::Function2(Arc::new(|x1, x2, y1, y2, h| {
                let d1 = periodic_dist(x1, y1);
                let d2 = periodic_dist(x2, y2);
                1.0 / ((d1 * d1 + d2 * d2).sqrt() + h)
            })),
        }
    }
}

/// Maximum kernel-projection level (dense size guard), 1D and 2D.
pub const MAX_PROJECT_LEVEL_1D: usize = 12;
pub const MAX_PROJECT_LEVEL_2D: usize = 6;

/// Collocation of a kernel on the level-`level` grid: entry `(k1, k2)` is
/// `h^dim * a(k1 h, k2 h)` with `h = 2^-level`. Explicit matrices pass
/// through after shape validation.
pub fn project_kernel(spec: &KernelSpec, level: usize) -> Result<DenseMatrix, NsformError> {
    match spec {
        KernelSpec::Explicit(m) => DenseMatrix::new(m.dim, m.level, m.data.clone()),
        KernelSpec::Function1(f) => {
            if level > MAX_PROJECT_LEVEL_1D {
                return Err(NsformError::LevelTooDeep { level, max: MAX_PROJECT_LEVEL_1D });
            }
            let n = 1usize << level;
            let h = 1.0 / n as f64;
            let mut data = vec![0.0; n * n];
            for k1 in 0..n {
                for k2 in 0..n {
                    let v = h * f(k1 as f64 * h, k2 as f64 * h, h);
                    if !v.is_finite() {
                        return Err(NsformError::SingularKernel);
                    }
                    data[k1 * n + k2] = v;
                }
            }
            DenseMatrix::new(1, level, data)
        }
        KernelSpec::Function2(f) => {
            if level > MAX_PROJECT_LEVEL_2D {
                return Err(NsformError::LevelTooDeep { level, max: MAX_PROJECT_LEVEL_2D });
            }
            let n = 1usize << level;
            let h = 1.0 / n as f64;
            let side = n * n;
            let mut data = vec![0.0; side * side];
            for r1 in 0..n {
                for r2 in 0..n {
                    for c1 in 0..n {
                        for c2 in 0..n {
                            let v = h * h
                                * f(r1 as f64 * h, r2 as f64 * h, c1 as f64 * h, c2 as f64 * h, h);
                            if !v.is_finite() {
                                return Err(NsformError::SingularKernel);
                            }
                            data[(r1 * n + r2) * side + (c1 * n + c2)] = v;
                        }
                    }
                }
            }
            DenseMatrix::new(2, level, data)
        }
    }
}

/// Window actually stored at a level of `side` positions per dimension: the
/// nominal band width capped at the side, so no column is stored twice.
pub fn level_window(n_b: usize, side: usize) -> usize {
    n_b.min(side)
}

fn window_offset(window: usize) -> i64 {
    -(((window - 1) / 2) as i64)
}

/// Centered periodic band over a square block whose positions form a dyadic
/// grid of `side` points per spatial dimension. Row `k` stores taps at
/// columns `(k + offset + m) mod side` per dimension, `m = 0..window-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    dim: usize,
    side: usize,
    window: usize,
    offset: i64,
    data: Vec<f64>,
}

impl Band {
    /// Extract the band from a dense block (side^dim square).
    pub fn from_dense(dense: &[f64], dim: usize, side: usize, window: usize) -> Band {
        let offset = window_offset(window);
        let positions = side.pow(dim as u32);
        let taps = window.pow(dim as u32);
        let mut data = vec![0.0; positions * taps];
        match dim {
            1 => {
                for k in 0..side {
                    for m in 0..window {
                        let col = (k as i64 + offset + m as i64).rem_euclid(side as i64) as usize;
                        data[k * window + m] = dense[k * side + col];
                    }
                }
            }
            _ => {
                let n2 = side * side;
                for k1 in 0..side {
                    for k2 in 0..side {
                        let pos = k1 * side + k2;
                        for m1 in 0..window {
                            let c1 =
                                (k1 as i64 + offset + m1 as i64).rem_euclid(side as i64) as usize;
                            for m2 in 0..window {
                                let c2 = (k2 as i64 + offset + m2 as i64).rem_euclid(side as i64)
                                    as usize;
                                data[pos * taps + m1 * window + m2] =
                                    dense[pos * n2 + c1 * side + c2];
                            }
                        }
                    }
                }
            }
        }
        Band { dim, side, window, offset, data }
    }

    pub fn from_raw(
        dim: usize,
        side: usize,
        window: usize,
        data: Vec<f64>,
    ) -> Result<Band, NsformError> {
        let want = side.pow(dim as u32) * window.pow(dim as u32);
        if data.len() != want {
            return Err(NsformError::NotSquare { len: data.len() });
        }
        Ok(Band { dim, side, window, offset: window_offset(window), data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn offset(&self) -> i64 {
        self.offset
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Accumulate `y += B x`, counting one multiply-add per stored tap.
    pub fn matvec_accum(&self, x: &[f64], y: &mut [f64], flops: &mut u64) {
        match self.dim {
            1 => {
                let (n, w) = (self.side, self.window);
                for k in 0..n {
                    let mut acc = 0.0;
                    let row = &self.data[k * w..(k + 1) * w];
                    for (m, wt) in row.iter().enumerate() {
                        let col = (k as i64 + self.offset + m as i64).rem_euclid(n as i64) as usize;
                        acc += wt * x[col];
                    }
                    y[k] += acc;
                }
                *flops += (n * w) as u64;
            }
            _ => {
                let (n, w) = (self.side, self.window);
                let taps = w * w;
                for k1 in 0..n {
                    for k2 in 0..n {
                        let pos = k1 * n + k2;
                        let row = &self.data[pos * taps..(pos + 1) * taps];
                        let mut acc = 0.0;
                        for m1 in 0..w {
                            let c1 =
                                (k1 as i64 + self.offset + m1 as i64).rem_euclid(n as i64) as usize;
                            for m2 in 0..w {
                                let c2 = (k2 as i64 + self.offset + m2 as i64).rem_euclid(n as i64)
                                    as usize;
                                acc += row[m1 * w + m2] * x[c1 * n + c2];
                            }
                        }
                        y[pos] += acc;
                    }
                }
                *flops += (n * n * taps) as u64;
            }
        }
    }

    /// Expand back to a dense block; dropped entries are zero.
    pub fn to_dense(&self) -> Vec<f64> {
        let positions = self.side.pow(self.dim as u32);
        let mut dense = vec![0.0; positions * positions];
        match self.dim {
            1 => {
                let (n, w) = (self.side, self.window);
                for k in 0..n {
                    for m in 0..w {
                        let col = (k as i64 + self.offset + m as i64).rem_euclid(n as i64) as usize;
                        dense[k * n + col] = self.data[k * w + m];
                    }
                }
            }
            _ => {
                let (n, w) = (self.side, self.window);
                let n2 = n * n;
                let taps = w * w;
                for k1 in 0..n {
                    for k2 in 0..n {
                        let pos = k1 * n + k2;
                        for m1 in 0..w {
                            let c1 =
                                (k1 as i64 + self.offset + m1 as i64).rem_euclid(n as i64) as usize;
                            for m2 in 0..w {
                                let c2 = (k2 as i64 + self.offset + m2 as i64).rem_euclid(n as i64)
                                    as usize;
                                dense[pos * n2 + c1 * n + c2] = self.data[pos * taps + m1 * w + m2];
                            }
                        }
                    }
                }
            }
        }
        dense
    }

    /// Max absolute entry per periodic offset `min(|o|, side-|o|)`; used by
    /// the decay diagnostics. 1D bands only.
    pub fn max_abs_by_offset(&self) -> Vec<f64> {
        let (n, w) = (self.side, self.window);
        let mut out = vec![0.0; n / 2 + 1];
        for k in 0..n {
            for m in 0..w {
                let o = (self.offset + m as i64).rem_euclid(n as i64) as usize;
                let dist = o.min(n - o);
                let v = self.data[k * w + m].abs();
                if v > out[dist] {
                    out[dist] = v;
                }
            }
        }
        out
    }
}

/// Walk a zero block of the same shape as a stored band: accumulates
/// nothing, counts its taps (see the module doc on the product-stage cost).
fn zero_block_accum(dim: usize, side: usize, window: usize, flops: &mut u64) {
    let positions = side.pow(dim as u32);
    let taps = window.pow(dim as u32);
    *flops += (positions * taps) as u64;
}

/// Banded detail blocks of one level.
#[derive(Debug, Clone)]
pub struct LevelBands {
    pub level: usize,
    /// 3 blocks (1D) or 15 (2D), in the module-level block order.
    pub blocks: Vec<Band>,
}

/// The compressed operator: banded detail blocks per level plus the dense
/// coarsest-level matrix.
#[derive(Debug, Clone)]
pub struct NonstandardForm {
    dim: usize,
    finest: usize,
    coarsest: usize,
    band_width: usize,
    filters: FilterPair,
    /// Index 0 holds level `coarsest`, the last entry level `finest - 1`.
    levels: Vec<LevelBands>,
    /// Dense matrix of side `2^coarsest` (1D) or `4^coarsest` (2D).
    top: Vec<f64>,
}

impl NonstandardForm {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn finest_level(&self) -> usize {
        self.finest
    }

    pub fn coarsest_level(&self) -> usize {
        self.coarsest
    }

    pub fn order(&self) -> usize {
        self.filters.order()
    }

    pub fn band_width(&self) -> usize {
        self.band_width
    }

    pub fn filters(&self) -> &FilterPair {
        &self.filters
    }

    pub fn levels(&self) -> &[LevelBands] {
        &self.levels
    }

    pub fn top(&self) -> &[f64] {
        &self.top
    }

    /// Input/output vector length.
    pub fn size(&self) -> usize {
        1usize << (self.dim * self.finest)
    }

    pub fn from_parts(
        dim: usize,
        finest: usize,
        coarsest: usize,
        band_width: usize,
        filters: FilterPair,
        levels: Vec<LevelBands>,
        top: Vec<f64>,
    ) -> Result<Self, NsformError> {
        let top_side = 1usize << (dim * coarsest);
        if top.len() != top_side * top_side {
            return Err(NsformError::NotSquare { len: top.len() });
        }
        if levels.len() != finest - coarsest {
            return Err(NsformError::BadLevelRange { l: finest, l0: coarsest });
        }
        Ok(NonstandardForm { dim, finest, coarsest, band_width, filters, levels, top })
    }
}

/// Band width that keeps every entry at every level (no truncation).
pub fn full_band(finest_level: usize) -> usize {
    2 * (1usize << finest_level) - 1
}

/// Decompose a dense operator into its nonstandard form, truncating detail
/// blocks at band width `n_b` (odd; capped at each level's extent). Every
/// level is computed exactly from the untruncated coarser-scale matrix;
/// truncation only affects what is stored.
pub fn decompose_operator(
    a: &DenseMatrix,
    filters: &FilterPair,
    l0: usize,
    n_b: usize,
) -> Result<NonstandardForm, NsformError> {
    if n_b % 2 == 0 {
        return Err(NsformError::EvenBandWidth { n_b });
    }
    let min = filters.min_coarse_level();
    if l0 < min {
        return Err(NsformError::CoarseLevelTooSmall { l0, min });
    }
    let l = a.level;
    if l <= l0 {
        return Err(NsformError::BadLevelRange { l, l0 });
    }
    let expected_side = 1usize << (a.dim * a.level);
    if a.side != expected_side || !a.side.is_power_of_two() {
        return Err(NsformError::SideNotPowerOfDim { side: a.side, dim: a.dim });
    }
    let mut levels: Vec<LevelBands> = Vec::with_capacity(l - l0);
    let mut current = a.data.clone();
    for level in (l0..l).rev() {
        let (blocks, coarser) = match a.dim {
            1 => split_level_1d(&current, 1usize << (level + 1), filters)?,
            _ => split_level_2d(&current, 1usize << (level + 1), filters)?,
        };
        let side = 1usize << level;
        let w = level_window(n_b, side);
        let bands = blocks.iter().map(|b| Band::from_dense(b, a.dim, side, w)).collect();
        levels.push(LevelBands { level, blocks: bands });
        current = coarser;
    }
    levels.reverse();
    Ok(NonstandardForm {
        dim: a.dim,
        finest: l,
        coarsest: l0,
        band_width: n_b,
        filters: filters.clone(),
        levels,
        top: current,
    })
}

/// One 1D decomposition step of a dense matrix of side `n`: returns the
/// three detail blocks `[dd, ds, sd]` (each dense, side n/2) and the
/// scaling-scaling matrix.
fn split_level_1d(
    a: &[f64],
    n: usize,
    filters: &FilterPair,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), NsformError> {
    let m = n / 2;
    // analysis along the column index (within each row)
    let mut det_cols = vec![0.0; n * m];
    let mut sca_cols = vec![0.0; n * m];
    for r in 0..n {
        let (d, s) = forward_step(&a[r * n..(r + 1) * n], filters)?;
        det_cols[r * m..(r + 1) * m].copy_from_slice(&d);
        sca_cols[r * m..(r + 1) * m].copy_from_slice(&s);
    }
    // analysis along the row index (within each column)
    let mut dd = vec![0.0; m * m];
    let mut ds = vec![0.0; m * m];
    let mut sd = vec![0.0; m * m];
    let mut ss = vec![0.0; m * m];
    let mut column = vec![0.0; n];
    for c in 0..m {
        for r in 0..n {
            column[r] = det_cols[r * m + c];
        }
        let (d, s) = forward_step(&column, filters)?;
        for r in 0..m {
            dd[r * m + c] = d[r];
            sd[r * m + c] = s[r];
        }
        for r in 0..n {
            column[r] = sca_cols[r * m + c];
        }
        let (d, s) = forward_step(&column, filters)?;
        for r in 0..m {
            ds[r * m + c] = d[r];
            ss[r * m + c] = s[r];
        }
    }
    Ok((vec![dd, ds, sd], ss))
}

/// One 2D decomposition step of a dense matrix over `grid x grid` points
/// (side `grid^2`): returns the 15 detail blocks in row-major channel order
/// and the scaling-scaling matrix.
fn split_level_2d(
    a: &[f64],
    grid: usize,
    filters: &FilterPair,
) -> Result<(Vec<Vec<f64>>, Vec<f64>), NsformError> {
    let side = grid * grid;
    let mg = grid / 2;
    let mside = mg * mg;
    // analysis over the column index (each row is a 2D field)
    let mut cols = vec![vec![0.0; side * mside]; 4];
    for r in 0..side {
        let ch = forward_step_2d(&a[r * side..(r + 1) * side], grid, filters)?;
        for q in 0..4 {
            cols[q][r * mside..(r + 1) * mside].copy_from_slice(&ch[q]);
        }
    }
    // analysis over the row index (each column is a 2D field)
    let mut blocks = vec![vec![0.0; mside * mside]; 16];
    let mut column = vec![0.0; side];
    for qc in 0..4 {
        for c in 0..mside {
            for r in 0..side {
                column[r] = cols[qc][r * mside + c];
            }
            let ch = forward_step_2d(&column, grid, filters)?;
            for qr in 0..4 {
                let block = &mut blocks[qr * 4 + qc];
                for r in 0..mside {
                    block[r * mside + c] = ch[qr][r];
                }
            }
        }
    }
    let ss = blocks.pop().expect("16 blocks");
    Ok((blocks, ss))
}

/// Inverse of one 1D decomposition step, used to rebuild the dense matrix
/// from full-band blocks.
fn merge_level_1d(
    blocks: &[Vec<f64>],
    ss: &[f64],
    m: usize,
    filters: &FilterPair,
) -> Result<Vec<f64>, NsformError> {
    let n = 2 * m;
    let (dd, ds, sd) = (&blocks[0], &blocks[1], &blocks[2]);
    // synthesis along the row index
    let mut det_cols = vec![0.0; n * m];
    let mut sca_cols = vec![0.0; n * m];
    let mut dcol = vec![0.0; m];
    let mut scol = vec![0.0; m];
    for c in 0..m {
        for r in 0..m {
            dcol[r] = dd[r * m + c];
            scol[r] = sd[r * m + c];
        }
        let col = inverse_step(&dcol, &scol, filters)?;
        for r in 0..n {
            det_cols[r * m + c] = col[r];
        }
        for r in 0..m {
            dcol[r] = ds[r * m + c];
            scol[r] = ss[r * m + c];
        }
        let col = inverse_step(&dcol, &scol, filters)?;
        for r in 0..n {
            sca_cols[r * m + c] = col[r];
        }
    }
    // synthesis along the column index
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        let row =
            inverse_step(&det_cols[r * m..(r + 1) * m], &sca_cols[r * m..(r + 1) * m], filters)?;
        out[r * n..(r + 1) * n].copy_from_slice(&row);
    }
    Ok(out)
}

fn merge_level_2d(
    blocks: &[Vec<f64>],
    ss: &[f64],
    mg: usize,
    filters: &FilterPair,
) -> Result<Vec<f64>, NsformError> {
    let mside = mg * mg;
    let grid = 2 * mg;
    let side = grid * grid;
    // synthesis over the row index per column-channel
    let mut cols = vec![vec![0.0; side * mside]; 4];
    let mut chans = vec![vec![0.0; mside]; 4];
    for qc in 0..4 {
        for c in 0..mside {
            for qr in 0..4 {
                let block = if qr * 4 + qc == 15 { ss } else { &blocks[qr * 4 + qc] };
                for r in 0..mside {
                    chans[qr][r] = block[r * mside + c];
                }
            }
            let col = inverse_step_2d([&chans[0], &chans[1], &chans[2], &chans[3]], mg, filters)?;
            for r in 0..side {
                cols[qc][r * mside + c] = col[r];
            }
        }
    }
    // synthesis over the column index per row
    let mut out = vec![0.0; side * side];
    let mut row_chans = vec![vec![0.0; mside]; 4];
    for r in 0..side {
        for qc in 0..4 {
            row_chans[qc].copy_from_slice(&cols[qc][r * mside..(r + 1) * mside]);
        }
        let row = inverse_step_2d(
            [&row_chans[0], &row_chans[1], &row_chans[2], &row_chans[3]],
            mg,
            filters,
        )?;
        out[r * side..(r + 1) * side].copy_from_slice(&row);
    }
    Ok(out)
}

/// Rebuild the dense matrix from the stored form. Exact when the form was
/// built at full band; otherwise returns the truncated operator.
pub fn reconstruct_dense(ns: &NonstandardForm) -> Result<DenseMatrix, NsformError> {
    let mut current = ns.top.clone();
    for lv in &ns.levels {
        let dense_blocks: Vec<Vec<f64>> = lv.blocks.iter().map(|b| b.to_dense()).collect();
        current = match ns.dim {
            1 => merge_level_1d(&dense_blocks, &current, 1usize << lv.level, &ns.filters)?,
            _ => merge_level_2d(&dense_blocks, &current, 1usize << lv.level, &ns.filters)?,
        };
    }
    DenseMatrix::new(ns.dim, ns.finest, current)
}

/// Apply the compressed operator to a vector.
pub fn apply(ns: &NonstandardForm, v: &[f64]) -> Result<Vec<f64>, NsformError> {
    apply_instrumented(ns, v).map(|(u, _)| u)
}

/// Apply and return the exact multiply-add count alongside the result.
pub fn apply_instrumented(ns: &NonstandardForm, v: &[f64]) -> Result<(Vec<f64>, u64), NsformError> {
    if v.len() != ns.size() {
        return Err(NsformError::DimensionMismatch { expected: ns.size(), got: v.len() });
    }
    let mut flops: u64 = 0;
    match ns.dim {
        1 => apply_1d(ns, v, &mut flops).map(|u| (u, flops)),
        _ => apply_2d(ns, v, &mut flops).map(|u| (u, flops)),
    }
}

fn apply_1d(ns: &NonstandardForm, v: &[f64], flops: &mut u64) -> Result<Vec<f64>, NsformError> {
    let nlev = ns.finest - ns.coarsest;
    let taps = 2 * ns.order();
    // phase 1: decomposition of the input; index i holds level finest - i
    let mut details: Vec<Vec<f64>> = Vec::with_capacity(nlev);
    let mut scalings: Vec<Vec<f64>> = Vec::with_capacity(nlev + 1);
    scalings.push(v.to_vec());
    for i in 0..nlev {
        let (d, s) = forward_step(&scalings[i], &ns.filters)?;
        *flops += (taps * scalings[i].len()) as u64;
        details.push(d);
        scalings.push(s);
    }
    // dense product at the coarsest level
    let n0 = 1usize << ns.coarsest;
    let v0 = &scalings[nlev];
    let mut u = vec![0.0; n0];
    for r in 0..n0 {
        let row = &ns.top[r * n0..(r + 1) * n0];
        u[r] = row.iter().zip(v0.iter()).map(|(a, b)| a * b).sum();
    }
    *flops += (n0 * n0) as u64;
    // upward: banded products, inject, synthesize
    for (idx, lv) in ns.levels.iter().enumerate() {
        let i = nlev - 1 - idx;
        let d = &details[i];
        let s = &scalings[i + 1];
        let side = 1usize << lv.level;
        let mut s_out = vec![0.0; side];
        let mut w_out = vec![0.0; side];
        lv.blocks[0].matvec_accum(d, &mut s_out, flops);
        lv.blocks[1].matvec_accum(s, &mut s_out, flops);
        lv.blocks[2].matvec_accum(d, &mut w_out, flops);
        zero_block_accum(1, side, lv.blocks[0].window(), flops);
        for (w, ui) in w_out.iter_mut().zip(u.iter()) {
            *w += ui;
        }
        u = inverse_step(&s_out, &w_out, &ns.filters)?;
        *flops += (taps * u.len()) as u64;
    }
    Ok(u)
}

fn apply_2d(ns: &NonstandardForm, v: &[f64], flops: &mut u64) -> Result<Vec<f64>, NsformError> {
    let nlev = ns.finest - ns.coarsest;
    let p = ns.order();
    let mut details: Vec<[Vec<f64>; 3]> = Vec::with_capacity(nlev);
    let mut scalings: Vec<Vec<f64>> = Vec::with_capacity(nlev + 1);
    scalings.push(v.to_vec());
    for i in 0..nlev {
        let grid = 1usize << (ns.finest - i);
        let [c1, c2, c3, c4] = forward_step_2d(&scalings[i], grid, &ns.filters)?;
        *flops += (4 * p * grid * grid) as u64;
        details.push([c1, c2, c3]);
        scalings.push(c4);
    }
    let n0 = 1usize << (2 * ns.coarsest);
    let v0 = &scalings[nlev];
    let mut u = vec![0.0; n0];
    for r in 0..n0 {
        let row = &ns.top[r * n0..(r + 1) * n0];
        u[r] = row.iter().zip(v0.iter()).map(|(a, b)| a * b).sum();
    }
    *flops += (n0 * n0) as u64;
    for (idx, lv) in ns.levels.iter().enumerate() {
        let i = nlev - 1 - idx;
        let side = 1usize << lv.level;
        let dets = &details[i];
        let sca = &scalings[i + 1];
        let inputs: [&[f64]; 4] = [&dets[0], &dets[1], &dets[2], sca];
        let positions = side * side;
        let mut outs = vec![vec![0.0; positions]; 4];
        for qr in 0..4 {
            for qc in 0..4 {
                if qr * 4 + qc == 15 {
                    zero_block_accum(2, side, lv.blocks[0].window(), flops);
                } else {
                    lv.blocks[qr * 4 + qc].matvec_accum(inputs[qc], &mut outs[qr], flops);
                }
            }
        }
        for (w, ui) in outs[3].iter_mut().zip(u.iter()) {
            *w += ui;
        }
        u = inverse_step_2d([&outs[0], &outs[1], &outs[2], &outs[3]], side, &ns.filters)?;
        *flops += (4 * p * (2 * side) * (2 * side)) as u64;
    }
    Ok(u)
}

/// Closed-form multiply-add count of [`apply`].
pub fn flop_count(ns: &NonstandardForm) -> u64 {
    let p = ns.order() as u64;
    let mut total: u64 = 0;
    match ns.dim {
        1 => {
            for lv in &ns.levels {
                let n = 1u64 << lv.level;
                let w = level_window(ns.band_width, 1usize << lv.level) as u64;
                // analysis producing this level + synthesis leaving it
                total += 4 * p * n + 4 * p * n;
                // four block products of the band stage
                total += 4 * w * n;
            }
            let n0 = 1u64 << ns.coarsest;
            total += n0 * n0;
        }
        _ => {
            for lv in &ns.levels {
                let cells = 1u64 << (2 * lv.level);
                let w = level_window(ns.band_width, 1usize << lv.level) as u64;
                total += 16 * p * cells + 16 * p * cells;
                total += 16 * w * w * cells;
            }
            let n0 = 1u64 << (2 * ns.coarsest);
            total += n0 * n0;
        }
    }
    total
}

/// Per-level decay profile of the detail blocks: for each level, the max
/// absolute entry at each periodic offset, maximized over the detail blocks.
/// Meaningful on full-band 1D forms.
pub fn decay_profile(ns: &NonstandardForm) -> Vec<(usize, Vec<f64>)> {
    ns.levels
        .iter()
        .map(|lv| {
            let mut profile = lv.blocks[0].max_abs_by_offset();
            for b in &lv.blocks[1..] {
                for (acc, v) in profile.iter_mut().zip(b.max_abs_by_offset()) {
                    if v > *acc {
                        *acc = v;
                    }
                }
            }
            (lv.level, profile)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::wavelet::make_filters;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    fn random_matrix(rng: &mut Stream, dim: usize, level: usize) -> DenseMatrix {
        let side = 1usize << (dim * level);
        DenseMatrix::new(dim, level, rng.normal_vec(side * side)).unwrap()
    }

    #[test]
    fn identity_decomposes_into_identity_blocks() {
        // orthogonality sends I to I at every level: the detail-detail block
        // is the identity band, the mixed blocks vanish, the top stays I
        for p in [1usize, 3] {
            let f = make_filters(p).unwrap();
            let l0 = f.min_coarse_level();
            let a = DenseMatrix::identity(1, l0 + 3);
            let ns = decompose_operator(&a, &f, l0, full_band(l0 + 3)).unwrap();
            for lv in ns.levels() {
                let dd = lv.blocks[0].to_dense();
                let side = lv.blocks[0].side();
                for r in 0..side {
                    for c in 0..side {
                        let want = if r == c { 1.0 } else { 0.0 };
                        assert!((dd[r * side + c] - want).abs() < 1e-12, "p={p}");
                    }
                }
                for b in &lv.blocks[1..] {
                    for v in b.data() {
                        assert!(v.abs() < 1e-12, "p={p}");
                    }
                }
            }
            let n0 = 1usize << l0;
            for r in 0..n0 {
                for c in 0..n0 {
                    let want = if r == c { 1.0 } else { 0.0 };
                    assert!((ns.top()[r * n0 + c] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn identity_applies_as_identity() {
        let f = make_filters(2).unwrap();
        let a = DenseMatrix::identity(1, 6);
        let ns = decompose_operator(&a, &f, 2, full_band(6)).unwrap();
        let mut rng = Stream::new(40);
        let v = rng.normal_vec(64);
        let u = apply(&ns, &v).unwrap();
        assert!(rel_err(&u, &v) < 1e-12);
    }

    #[test]
    fn full_band_apply_matches_dense_matvec() {
        let mut rng = Stream::new(41);
        let f = make_filters(3).unwrap();
        let a = random_matrix(&mut rng, 1, 6);
        let ns = decompose_operator(&a, &f, 3, full_band(6)).unwrap();
        for _ in 0..20 {
            let v = rng.normal_vec(64);
            let u = apply(&ns, &v).unwrap();
            let want = a.matvec(&v);
            assert!(rel_err(&u, &want) < 1e-10);
        }
    }

    #[test]
    fn truncation_is_active_on_generic_matrices() {
        let mut rng = Stream::new(42);
        let f = make_filters(2).unwrap();
        let a = random_matrix(&mut rng, 1, 6);
        let full = decompose_operator(&a, &f, 2, full_band(6)).unwrap();
        let narrow = decompose_operator(&a, &f, 2, 3).unwrap();
        let v = rng.normal_vec(64);
        let want = a.matvec(&v);
        let eps_full = rel_err(&apply(&full, &v).unwrap(), &want);
        let eps_narrow = rel_err(&apply(&narrow, &v).unwrap(), &want);
        assert!(eps_full <= 1e-10);
        assert!(eps_narrow > 1e-6, "truncation should discard entries, err {eps_narrow}");
    }

    #[test]
    fn apply_is_linear() {
        let mut rng = Stream::new(43);
        let f = make_filters(3).unwrap();
        let a = random_matrix(&mut rng, 1, 5);
        let ns = decompose_operator(&a, &f, 3, 5).unwrap();
        let v = rng.normal_vec(32);
        let w = rng.normal_vec(32);
        let (alpha, beta) = (0.7, -1.3);
        let mixed: Vec<f64> = v.iter().zip(&w).map(|(x, y)| alpha * x + beta * y).collect();
        let lhs = apply(&ns, &mixed).unwrap();
        let av = apply(&ns, &v).unwrap();
        let aw = apply(&ns, &w).unwrap();
        let rhs: Vec<f64> = av.iter().zip(&aw).map(|(x, y)| alpha * x + beta * y).collect();
        let scale: f64 = rhs.iter().map(|x| x.abs()).fold(0.0, f64::max);
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() <= 1e-12 * scale.max(1.0));
        }
    }

    #[test]
    fn full_band_reconstruction_and_level_consistency() {
        let mut rng = Stream::new(44);
        let f = make_filters(2).unwrap();
        let a = random_matrix(&mut rng, 1, 5);
        let ns = decompose_operator(&a, &f, 2, full_band(5)).unwrap();
        let back = reconstruct_dense(&ns).unwrap();
        assert!(rel_err(&back.data, &a.data) < 1e-12);
        // re-decomposing the reconstruction reproduces the stored blocks
        let ns2 = decompose_operator(&back, &f, 2, full_band(5)).unwrap();
        for (lv1, lv2) in ns.levels().iter().zip(ns2.levels()) {
            for (b1, b2) in lv1.blocks.iter().zip(&lv2.blocks) {
                let scale: f64 = b1.data().iter().map(|x| x.abs()).fold(0.0, f64::max);
                for (x, y) in b1.data().iter().zip(b2.data()) {
                    assert!((x - y).abs() <= 1e-12 * scale.max(1.0));
                }
            }
        }
    }

    #[test]
    fn project_kernel_constant_and_identity() {
        let ones = KernelSpec::Function1(Arc::new(|_, _, _| 1.0));
        let a = project_kernel(&ones, 4).unwrap();
        for v in &a.data {
            assert!((v - 1.0 / 16.0).abs() < 1e-15);
        }
        let id = KernelSpec::identity(1, 3);
        let a = project_kernel(&id, 3).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let want = if r == c { 1.0 } else { 0.0 };
                assert_eq!(a.data[r * 8 + c], want);
            }
        }
    }

    #[test]
    fn project_kernel_matches_brute_force() {
        let spec = KernelSpec::inv_dist(1);
        let l = 5;
        let a = project_kernel(&spec, l).unwrap();
        let n = 1usize << l;
        let h = 1.0 / n as f64;
        for k1 in 0..n {
            for k2 in 0..n {
                let want = h / (periodic_dist(k1 as f64 * h, k2 as f64 * h) + h);
                assert!((a.data[k1 * n + k2] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn singular_kernel_without_regularization_errors() {
        let bad = KernelSpec::Function1(Arc::new(|x, y, _| 1.0 / periodic_dist(x, y)));
        assert!(matches!(project_kernel(&bad, 4), Err(NsformError::SingularKernel)));
    }

    #[test]
    fn even_band_width_rejected() {
        let f = make_filters(1).unwrap();
        let a = DenseMatrix::identity(1, 4);
        assert!(matches!(
            decompose_operator(&a, &f, 1, 4),
            Err(NsformError::EvenBandWidth { n_b: 4 })
        ));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let f = make_filters(1).unwrap();
        let a = DenseMatrix::identity(1, 4);
        let ns = decompose_operator(&a, &f, 1, 3).unwrap();
        assert!(matches!(apply(&ns, &[0.0; 8]), Err(NsformError::DimensionMismatch { .. })));
    }

    #[test]
    fn instrumented_count_matches_closed_form() {
        let mut rng = Stream::new(45);
        let f3 = make_filters(3).unwrap();
        for (l, l0, n_b) in [(6usize, 3usize, 5usize), (7, 3, 9), (5, 3, 3)] {
            let a = random_matrix(&mut rng, 1, l);
            let ns = decompose_operator(&a, &f3, l0, n_b).unwrap();
            let v = rng.normal_vec(1 << l);
            let (_, measured) = apply_instrumented(&ns, &v).unwrap();
            assert_eq!(measured, flop_count(&ns), "l={l} n_b={n_b}");
        }
        // band width 1: band stage costs exactly 4 * 2^level per level
        let f1 = make_filters(1).unwrap();
        let a = random_matrix(&mut rng, 1, 5);
        let ns = decompose_operator(&a, &f1, 1, 1).unwrap();
        let per_level_banded: u64 = ns.levels().iter().map(|lv| 4 * (1u64 << lv.level)).sum();
        let transforms: u64 = ns.levels().iter().map(|lv| 8 * (1u64 << lv.level)).sum();
        assert_eq!(flop_count(&ns), per_level_banded + transforms + 4);
    }

    #[test]
    fn flop_count_doubles_gently() {
        // evaluate the closed form for the structural parameters of each L
        let f = make_filters(3).unwrap();
        let mut prev: Option<u64> = None;
        for l in 7..=12 {
            let levels = (3..l)
                .map(|level| {
                    let side = 1usize << level;
                    let w = level_window(5, side);
                    LevelBands {
                        level,
                        blocks: vec![Band::from_raw(1, side, w, vec![0.0; side * w]).unwrap(); 3],
                    }
                })
                .collect();
            let top = vec![0.0; 64];
            let ns = NonstandardForm::from_parts(1, l, 3, 5, f.clone(), levels, top).unwrap();
            let flops = flop_count(&ns);
            if let Some(prev) = prev {
                let ratio = flops as f64 / prev as f64;
                assert!(ratio <= 2.3, "l={l} ratio={ratio}");
            }
            prev = Some(flops);
        }
    }

    #[test]
    fn two_dimensional_identity_and_random_full_band() {
        let mut rng = Stream::new(47);
        let f = make_filters(1).unwrap();
        let a = DenseMatrix::identity(2, 3);
        let ns = decompose_operator(&a, &f, 1, full_band(3)).unwrap();
        let v = rng.normal_vec(64);
        let u = apply(&ns, &v).unwrap();
        assert!(rel_err(&u, &v) < 1e-12);

        let a = random_matrix(&mut rng, 2, 3);
        let ns = decompose_operator(&a, &f, 1, full_band(3)).unwrap();
        for _ in 0..5 {
            let v = rng.normal_vec(64);
            let u = apply(&ns, &v).unwrap();
            assert!(rel_err(&u, &a.matvec(&v)) < 1e-10);
        }
        let (_, measured) = apply_instrumented(&ns, &rng.normal_vec(64)).unwrap();
        assert_eq!(measured, flop_count(&ns));
    }

    #[test]
    fn two_dimensional_reconstruction_round_trips() {
        let mut rng = Stream::new(48);
        let f = make_filters(2).unwrap();
        let a = random_matrix(&mut rng, 2, 3);
        let ns = decompose_operator(&a, &f, 2, full_band(3)).unwrap();
        let back = reconstruct_dense(&ns).unwrap();
        assert!(rel_err(&back.data, &a.data) < 1e-12);
    }

    #[test]
    fn detail_entries_decay_away_from_the_diagonal() {
        // inverse-distance kernel at level 10, order 3: entries three band
        // widths out are at least ten times smaller than entries at the
        // filter-support offset, on every level wide enough to show both
        let f = make_filters(3).unwrap();
        let a = project_kernel(&KernelSpec::inv_dist(1), 10).unwrap();
        let ns = decompose_operator(&a, &f, 3, full_band(10)).unwrap();
        let p = 3usize;
        let far_offset = 18; // twice the band width 9
        for (level, profile) in decay_profile(&ns) {
            if (1usize << level) < 8 * p || profile.len() <= far_offset {
                continue;
            }
            let near = profile[2 * p];
            let far = profile[far_offset];
            assert!(
                far <= near / 10.0,
                "level {level}: offset {far_offset} entry {far:e} vs offset {} entry {near:e}",
                2 * p
            );
        }
    }

    #[test]
    fn truncation_error_shrinks_with_band_width() {
        let f = make_filters(3).unwrap();
        let spec = KernelSpec::inv_dist(1);
        let a = project_kernel(&spec, 8).unwrap();
        let mut rng = Stream::new(49);
        let probes: Vec<Vec<f64>> = (0..5).map(|_| rng.normal_vec(256)).collect();
        let mut errors = Vec::new();
        for n_b in [3usize, 5, 9, 17] {
            let ns = decompose_operator(&a, &f, 3, n_b).unwrap();
            let mut worst: f64 = 0.0;
            for v in &probes {
                let u = apply(&ns, v).unwrap();
                worst = worst.max(rel_err(&u, &a.matvec(v)));
            }
            errors.push(worst);
        }
        for pair in errors.windows(2) {
            assert!(pair[1] <= pair[0] * 1.000001, "errors not non-increasing: {errors:?}");
        }
        assert!(errors[2] <= errors[0] / 10.0, "band 9 vs 3: {errors:?}");
    }
}
