//! Periodic Daubechies multiresolution transforms.
//!
//! A filter pair `(h, g)` of order `p` defines the transform: `h` is the
//! low-pass (scaling) filter supported on indices `0..2p-1`, and `g` is the
//! high-pass (wavelet) filter whose nominal index range is `2-2p..=1`, stored
//! densely together with that starting offset. The coefficients are
//! hardcoded for `p = 1..=6` (minimal-phase family) and re-validated against
//! the defining equations every time a pair is constructed.
//!
//! Tap convention: `forward_step` applies *both* stored arrays starting at
//! position `2k`, i.e.
//!
//! ```text
//! v_coarse[k] = sum_t h[t]       * v_fine[(2k + t) mod n]
//! d_coarse[k] = sum_t g_arr[t]   * v_fine[(2k + t) mod n]
//! ```
//!
//! where `g_arr[t]` is the coefficient with nominal index `offset + t`. In
//! terms of the nominal two-sided indices this places the wavelet taps at
//! `2k + i - offset`, so the detail sequence is the two-sided one advanced by
//! `p - 1` positions. Aligning both windows at `2k` keeps every derived
//! quantity (operator detail blocks, band centers, layer windows) centered on
//! the diagonal, which the banded representations in `nsform` and the layer
//! loadings in `bcrnet` rely on.

use std::fmt;

/// Orthonormality residual bound checked at construction.
const TOL_ORTHO: f64 = 1e-12;
/// Discrete vanishing-moment residual bound checked at construction.
const TOL_MOMENT: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub enum WaveletError {
    /// Requested order is outside the supported table.
    UnsupportedOrder { p: usize },
    /// A filter table failed its construction-time validation.
    InvalidFilter { p: usize, what: &'static str, residual: f64 },
    /// Input length must be even (and at least 2) for one analysis step.
    OddLength { len: usize },
    /// Detail/scaling inputs to a synthesis step must have equal lengths.
    LengthMismatch { detail: usize, scaling: usize },
    /// Input length must be a power of two.
    NotPowerOfTwo { len: usize },
    /// Coarse level too small for the filter support.
    CoarseLevelTooSmall { l0: usize, min: usize },
    /// Coarse level must lie strictly below the finest level.
    BadLevelRange { l: usize, l0: usize },
}

impl fmt::Display for WaveletError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WaveletError::UnsupportedOrder { p } => {
                write!(f, "unsupported filter order p={p}; supported range is 1..=6")
            }
            WaveletError::InvalidFilter { p, what, residual } => {
                write!(f, "filter table p={p} failed validation: {what} residual {residual:e}")
            }
            WaveletError::OddLength { len } => {
                write!(f, "analysis step needs an even input length, got {len}")
            }
            WaveletError::LengthMismatch { detail, scaling } => {
                write!(f, "detail length {detail} does not match scaling length {scaling}")
            }
            WaveletError::NotPowerOfTwo { len } => {
                write!(f, "input length {len} is not a power of two")
            }
            WaveletError::CoarseLevelTooSmall { l0, min } => {
                write!(f, "coarse level {l0} is below the minimum {min} for this filter")
            }
            WaveletError::BadLevelRange { l, l0 } => {
                write!(f, "finest level {l} must exceed coarse level {l0}")
            }
        }
    }
}

impl std::error::Error for WaveletError {}

/// Daubechies filter pair of order `p` (2p taps each).
#[derive(Debug, Clone, PartialEq)]
pub struct FilterPair {
    order: usize,
    lowpass: Vec<f64>,
    highpass: Vec<f64>,
    highpass_offset: i64,
}

/// Minimal-phase Daubechies low-pass coefficients, normalized so that
/// `sum h = sqrt(2)`. Polished to machine precision on the defining system
/// (orthonormality plus discrete vanishing moments); `make_filters`
/// re-checks the residuals on every construction.
#[allow(clippy::excessive_precision)]
const DAUBECHIES_LOWPASS: [&[f64]; 6] = [
    &[std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2],
    &[
        0.48296291314453414,
        0.83651630373780791,
        0.22414386804201338,
        -0.12940952255126038,
    ],
    &[
        0.33267055295008263,
        0.80689150931109255,
        0.45987750211849149,
        -0.13501102001025461,
        -0.08544127388202664,
        0.03522629188570953,
    ],
    &[
        0.23037781330889651,
        0.71484657055291556,
        0.63088076792985892,
        -0.02798376941685983,
        -0.18703481171909306,
        0.03084138183556076,
        0.03288301166688520,
        -0.01059740178506903,
    ],
    &[
        0.16010239797419276,
        0.60382926979718954,
        0.72430852843777316,
        0.13842814590132099,
        -0.24229488706638203,
        -0.03224486958463847,
        0.07757149384004572,
        -0.00624149021279825,
        -0.01258075199908200,
        0.00333572528547377,
    ],
    &[
        0.11154074335010963,
        0.49462389039845328,
        0.75113390802109525,
        0.31525035170919735,
        -0.22626469396543997,
        -0.12976686756726191,
        0.09750160558732314,
        0.02752286553030572,
        -0.03158203931748607,
        0.00055384220116151,
        0.00477725751094552,
        -0.00107730108530848,
    ],
];

/// Build the order-`p` filter pair, `1 <= p <= 6`.
///
/// The high-pass filter is derived from the low-pass one through the mirror
/// relation `g_i = (-1)^(1-i) h_(1-i)` on the nominal index range
/// `2-2p ..= 1`. The returned pair has passed the full residual suite; a
/// table that fails validation is reported as an error rather than returned.
pub fn make_filters(p: usize) -> Result<FilterPair, WaveletError> {
    if p < 1 || p > 6 {
        return Err(WaveletError::UnsupportedOrder { p });
    }
    let lowpass = DAUBECHIES_LOWPASS[p - 1].to_vec();
    let offset = 2 - 2 * p as i64;
    let highpass: Vec<f64> = (0..2 * p)
        .map(|t| {
            let i = offset + t as i64;
            let k = (1 - i) as usize;
            let sign = if (1 - i) % 2 == 0 { 1.0 } else { -1.0 };
            sign * lowpass[k]
        })
        .collect();
    let pair = FilterPair { order: p, lowpass, highpass, highpass_offset: offset };
    pair.validate()?;
    Ok(pair)
}

impl FilterPair {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Low-pass taps, nominal indices `0..2p-1`.
    pub fn lowpass(&self) -> &[f64] {
        &self.lowpass
    }

    /// High-pass taps as stored; tap `t` has nominal index `offset + t`.
    pub fn highpass(&self) -> &[f64] {
        &self.highpass
    }

    /// Nominal index of the first stored high-pass tap (`2 - 2p`).
    pub fn highpass_offset(&self) -> i64 {
        self.highpass_offset
    }

    pub fn len(&self) -> usize {
        self.lowpass.len()
    }

    /// Smallest coarse level the pair may be decomposed to: `ceil(log2(2p))`,
    /// below which the filter would wrap onto itself more than once.
    pub fn min_coarse_level(&self) -> usize {
        let mut l = 0usize;
        while (1usize << l) < 2 * self.order {
            l += 1;
        }
        l
    }

    /// Residual suite: orthonormality, mirror relation, sum, and discrete
    /// vanishing moments.
    pub fn validate(&self) -> Result<(), WaveletError> {
        let p = self.order;
        let n = self.lowpass.len();
        let norm: f64 = self.lowpass.iter().map(|x| x * x).sum::<f64>() - 1.0;
        if norm.abs() > TOL_ORTHO {
            return Err(WaveletError::InvalidFilter { p, what: "sum h^2 - 1", residual: norm });
        }
        for m in 1..p {
            let shifted: f64 = (0..n - 2 * m).map(|i| self.lowpass[i] * self.lowpass[i + 2 * m]).sum();
            if shifted.abs() > TOL_ORTHO {
                return Err(WaveletError::InvalidFilter {
                    p,
                    what: "shift orthogonality",
                    residual: shifted,
                });
            }
        }
        let sum: f64 = self.lowpass.iter().sum::<f64>() - std::f64::consts::SQRT_2;
        if sum.abs() > TOL_ORTHO {
            return Err(WaveletError::InvalidFilter { p, what: "sum h - sqrt(2)", residual: sum });
        }
        for t in 0..n {
            let i = self.highpass_offset + t as i64;
            let sign = if (1 - i) % 2 == 0 { 1.0 } else { -1.0 };
            let expect = sign * self.lowpass[(1 - i) as usize];
            if (self.highpass[t] - expect).abs() > TOL_ORTHO {
                return Err(WaveletError::InvalidFilter {
                    p,
                    what: "mirror relation",
                    residual: self.highpass[t] - expect,
                });
            }
        }
        for j in 0..p {
            let moment: f64 = (0..n)
                .map(|t| {
                    let i = (self.highpass_offset + t as i64) as f64;
                    self.highpass[t] * i.powi(j as i32)
                })
                .sum();
            if moment.abs() > TOL_MOMENT {
                return Err(WaveletError::InvalidFilter {
                    p,
                    what: "vanishing moment",
                    residual: moment,
                });
            }
        }
        Ok(())
    }

    /// Residuals as a report (used by the CLI `filters` command).
    pub fn residuals(&self) -> FilterResiduals {
        let p = self.order;
        let n = self.lowpass.len();
        let norm = self.lowpass.iter().map(|x| x * x).sum::<f64>() - 1.0;
        let shift = (1..p)
            .map(|m| {
                (0..n - 2 * m)
                    .map(|i| self.lowpass[i] * self.lowpass[i + 2 * m])
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max);
        let sum = self.lowpass.iter().sum::<f64>() - std::f64::consts::SQRT_2;
        let moment = (0..p)
            .map(|j| {
                (0..n)
                    .map(|t| {
                        let i = (self.highpass_offset + t as i64) as f64;
                        self.highpass[t] * i.powi(j as i32)
                    })
                    .sum::<f64>()
                    .abs()
            })
            .fold(0.0, f64::max);
        FilterResiduals { norm, shift_orthogonality: shift, sum_sqrt2: sum, moment_max: moment }
    }
}

/// Residual magnitudes of the filter-defining equations.
#[derive(Debug, Clone, Copy)]
pub struct FilterResiduals {
    pub norm: f64,
    pub shift_orthogonality: f64,
    pub sum_sqrt2: f64,
    pub moment_max: f64,
}

/// One periodic analysis step: fine scaling coefficients of length `2m` to
/// `(detail, scaling)` of length `m` each. See the module doc for the tap
/// convention.
pub fn forward_step(v_fine: &[f64], filters: &FilterPair) -> Result<(Vec<f64>, Vec<f64>), WaveletError> {
    let n = v_fine.len();
    if n < 2 || n % 2 != 0 {
        return Err(WaveletError::OddLength { len: n });
    }
    let m = n / 2;
    let taps = filters.len();
    let mut detail = vec![0.0; m];
    let mut scaling = vec![0.0; m];
    for k in 0..m {
        let mut d = 0.0;
        let mut s = 0.0;
        for t in 0..taps {
            let x = v_fine[(2 * k + t) % n];
            d += filters.highpass[t] * x;
            s += filters.lowpass[t] * x;
        }
        detail[k] = d;
        scaling[k] = s;
    }
    Ok((detail, scaling))
}

/// One periodic synthesis step; exact left inverse of [`forward_step`].
///
/// Implemented as the transpose of the analysis map: for each coarse `k`,
/// tap `t` scatters into fine position `(2k + t) mod 2m`.
pub fn inverse_step(
    detail: &[f64],
    scaling: &[f64],
    filters: &FilterPair,
) -> Result<Vec<f64>, WaveletError> {
    if detail.len() != scaling.len() {
        return Err(WaveletError::LengthMismatch { detail: detail.len(), scaling: scaling.len() });
    }
    let m = detail.len();
    if m == 0 || !m.is_power_of_two() {
        return Err(WaveletError::NotPowerOfTwo { len: m });
    }
    let n = 2 * m;
    let taps = filters.len();
    let mut fine = vec![0.0; n];
    for k in 0..m {
        let d = detail[k];
        let s = scaling[k];
        for t in 0..taps {
            fine[(2 * k + t) % n] += filters.highpass[t] * d + filters.lowpass[t] * s;
        }
    }
    Ok(fine)
}

/// Scaling and wavelet coefficients from the finest level `L` down to `L0`.
#[derive(Debug, Clone)]
pub struct CoeffPyramid {
    finest: usize,
    coarsest: usize,
    /// `scaling[i]` is the scaling sequence at level `L0 + i`, `i = 0..=L-L0`.
    scaling: Vec<Vec<f64>>,
    /// `detail[i]` is the wavelet sequence at level `L0 + i`, `i = 0..L-L0`.
    detail: Vec<Vec<f64>>,
}

impl CoeffPyramid {
    pub fn finest_level(&self) -> usize {
        self.finest
    }

    pub fn coarsest_level(&self) -> usize {
        self.coarsest
    }

    pub fn scaling_at(&self, level: usize) -> &[f64] {
        &self.scaling[level - self.coarsest]
    }

    pub fn detail_at(&self, level: usize) -> &[f64] {
        &self.detail[level - self.coarsest]
    }
}

/// Full decomposition of a length-`2^L` sequence down to level `l0`.
pub fn decompose(v: &[f64], filters: &FilterPair, l0: usize) -> Result<CoeffPyramid, WaveletError> {
    let n = v.len();
    if n == 0 || !n.is_power_of_two() {
        return Err(WaveletError::NotPowerOfTwo { len: n });
    }
    let l = n.trailing_zeros() as usize;
    let min = filters.min_coarse_level();
    if l0 < min {
        return Err(WaveletError::CoarseLevelTooSmall { l0, min });
    }
    if l <= l0 {
        return Err(WaveletError::BadLevelRange { l, l0 });
    }
    let mut scaling = vec![Vec::new(); l - l0 + 1];
    let mut detail = vec![Vec::new(); l - l0];
    scaling[l - l0] = v.to_vec();
    for level in (l0..l).rev() {
        let (d, s) = forward_step(&scaling[level + 1 - l0], filters)?;
        detail[level - l0] = d;
        scaling[level - l0] = s;
    }
    Ok(CoeffPyramid { finest: l, coarsest: l0, scaling, detail })
}

/// Inverse of [`decompose`].
pub fn reconstruct(pyramid: &CoeffPyramid, filters: &FilterPair) -> Result<Vec<f64>, WaveletError> {
    let mut v = pyramid.scaling[0].clone();
    for level in pyramid.coarsest..pyramid.finest {
        v = inverse_step(&pyramid.detail[level - pyramid.coarsest], &v, filters)?;
    }
    Ok(v)
}

/// Channel order of one 2D analysis step: wavelet/scaling combinations over
/// (coordinate 1, coordinate 2), with the pure scaling channel last.
///
/// Index 0 = wavelet x wavelet, 1 = wavelet x scaling, 2 = scaling x wavelet,
/// 3 = scaling x scaling.
pub const CHANNELS_2D: usize = 4;

/// One periodic analysis step of a square field stored row-major with side
/// `2m`: returns four channel fields of side `m` in the [`CHANNELS_2D`]
/// order. Coordinate 2 (the fast index) is transformed first, then
/// coordinate 1.
pub fn forward_step_2d(
    field: &[f64],
    side: usize,
    filters: &FilterPair,
) -> Result<[Vec<f64>; 4], WaveletError> {
    if side == 0 || side % 2 != 0 || field.len() != side * side {
        return Err(WaveletError::OddLength { len: side });
    }
    let m = side / 2;
    // transform along coordinate 2
    let mut wav2 = vec![0.0; side * m];
    let mut sca2 = vec![0.0; side * m];
    for r in 0..side {
        let (d, s) = forward_step(&field[r * side..(r + 1) * side], filters)?;
        wav2[r * m..(r + 1) * m].copy_from_slice(&d);
        sca2[r * m..(r + 1) * m].copy_from_slice(&s);
    }
    // transform along coordinate 1
    let mut out = [vec![0.0; m * m], vec![0.0; m * m], vec![0.0; m * m], vec![0.0; m * m]];
    let mut column = vec![0.0; side];
    for c in 0..m {
        for (half, pair) in [(&wav2, (0usize, 2usize)), (&sca2, (1usize, 3usize))] {
            for r in 0..side {
                column[r] = half[r * m + c];
            }
            let (d, s) = forward_step(&column, filters)?;
            let (wav_channel, sca_channel) = pair;
            for r in 0..m {
                out[wav_channel][r * m + c] = d[r];
                out[sca_channel][r * m + c] = s[r];
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`forward_step_2d`]; `side` is the coarse side `m`.
pub fn inverse_step_2d(
    channels: [&[f64]; 4],
    side: usize,
    filters: &FilterPair,
) -> Result<Vec<f64>, WaveletError> {
    let m = side;
    for ch in &channels {
        if ch.len() != m * m {
            return Err(WaveletError::LengthMismatch { detail: ch.len(), scaling: m * m });
        }
    }
    let fine = 2 * m;
    // synthesize coordinate 1
    let mut wav2 = vec![0.0; fine * m];
    let mut sca2 = vec![0.0; fine * m];
    let mut dcol = vec![0.0; m];
    let mut scol = vec![0.0; m];
    for c in 0..m {
        for r in 0..m {
            dcol[r] = channels[0][r * m + c];
            scol[r] = channels[2][r * m + c];
        }
        let col = inverse_step(&dcol, &scol, filters)?;
        for r in 0..fine {
            wav2[r * m + c] = col[r];
        }
        for r in 0..m {
            dcol[r] = channels[1][r * m + c];
            scol[r] = channels[3][r * m + c];
        }
        let col = inverse_step(&dcol, &scol, filters)?;
        for r in 0..fine {
            sca2[r * m + c] = col[r];
        }
    }
    // synthesize coordinate 2
    let mut field = vec![0.0; fine * fine];
    for r in 0..fine {
        let row = inverse_step(&wav2[r * m..(r + 1) * m], &sca2[r * m..(r + 1) * m], filters)?;
        field[r * fine..(r + 1) * fine].copy_from_slice(&row);
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    #[test]
    fn haar_values() {
        let f = make_filters(1).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((f.lowpass()[0] - s).abs() < 1e-15);
        assert!((f.lowpass()[1] - s).abs() < 1e-15);
        assert!((f.highpass()[0] + s).abs() < 1e-15);
        assert!((f.highpass()[1] - s).abs() < 1e-15);
        assert_eq!(f.highpass_offset(), 0);
    }

    #[test]
    fn order_two_matches_closed_form() {
        // independent derivation: the length-4 solution of the orthonormality
        // system with sum h = sqrt(2) is h = ((1±sqrt3) ± ...)/(4 sqrt2),
        // i.e. (sqrt2+sqrt6)/8 etc.
        let s2 = 2.0_f64.sqrt();
        let s6 = 6.0_f64.sqrt();
        let expect = [(s2 + s6) / 8.0, (3.0 * s2 + s6) / 8.0, (3.0 * s2 - s6) / 8.0, (s2 - s6) / 8.0];
        let f = make_filters(2).unwrap();
        for (a, b) in f.lowpass().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn all_orders_validate() {
        for p in 1..=6 {
            let f = make_filters(p).unwrap();
            assert_eq!(f.lowpass().len(), 2 * p, "support length");
            f.validate().unwrap();
        }
    }

    #[test]
    fn unsupported_order_is_an_error() {
        assert!(matches!(make_filters(0), Err(WaveletError::UnsupportedOrder { .. })));
        assert!(matches!(make_filters(7), Err(WaveletError::UnsupportedOrder { .. })));
    }

    #[test]
    fn haar_constant_input() {
        let f = make_filters(1).unwrap();
        let (d, s) = forward_step(&[1.0, 1.0, 1.0, 1.0], &f).unwrap();
        let r = 2.0_f64.sqrt();
        for k in 0..2 {
            assert!((s[k] - r).abs() < 1e-14);
            assert!(d[k].abs() < 1e-14);
        }
    }

    #[test]
    fn haar_impulse() {
        let f = make_filters(1).unwrap();
        let (d, s) = forward_step(&[1.0, 0.0, 0.0, 0.0], &f).unwrap();
        let r = 0.5_f64.sqrt();
        assert!((s[0] - r).abs() < 1e-14);
        assert!(s[1].abs() < 1e-14);
        assert!((d[0] + r).abs() < 1e-14);
        assert!(d[1].abs() < 1e-14);
        // round trip closes the convention
        let back = inverse_step(&d, &s, &f).unwrap();
        assert!(rel_err(&back, &[1.0, 0.0, 0.0, 0.0]) < 1e-14);
    }

    #[test]
    fn energy_is_conserved_per_step() {
        let mut rng = Stream::new(11);
        for p in 1..=6 {
            let f = make_filters(p).unwrap();
            let v = rng.normal_vec(256);
            let (d, s) = forward_step(&v, &f).unwrap();
            let fine: f64 = v.iter().map(|x| x * x).sum();
            let coarse: f64 = d.iter().chain(s.iter()).map(|x| x * x).sum();
            assert!((fine - coarse).abs() / fine < 1e-12, "p={p}");
        }
    }

    #[test]
    fn odd_length_rejected() {
        let f = make_filters(1).unwrap();
        assert!(matches!(forward_step(&[1.0, 2.0, 3.0], &f), Err(WaveletError::OddLength { .. })));
        assert!(matches!(
            inverse_step(&[1.0], &[1.0, 2.0], &f),
            Err(WaveletError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn haar_inverse_of_constant() {
        let f = make_filters(1).unwrap();
        let r = 2.0_f64.sqrt();
        let v = inverse_step(&[0.0, 0.0], &[r, r], &f).unwrap();
        for x in &v {
            assert!((x - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn impulse_reconstruction_is_shifted_upsampled_lowpass() {
        // with zero detail and a unit impulse at k, the synthesis output is
        // the low-pass filter laid down at positions 2k..2k+2p-1 (mod n)
        for p in [1usize, 3] {
            let f = make_filters(p).unwrap();
            let m = 16;
            let k = 5;
            let mut scaling = vec![0.0; m];
            scaling[k] = 1.0;
            let fine = inverse_step(&vec![0.0; m], &scaling, &f).unwrap();
            for (pos, value) in fine.iter().enumerate() {
                let rel = (pos + 2 * m - 2 * k) % (2 * m);
                let expect = if rel < 2 * p { f.lowpass()[rel] } else { 0.0 };
                assert!((value - expect).abs() < 1e-14, "p={p} pos={pos}");
            }
        }
    }

    #[test]
    fn round_trip_single_step_all_orders() {
        let mut rng = Stream::new(3);
        for p in 1..=6 {
            let f = make_filters(p).unwrap();
            let v = rng.normal_vec(128);
            let (d, s) = forward_step(&v, &f).unwrap();
            let back = inverse_step(&d, &s, &f).unwrap();
            assert!(rel_err(&back, &v) < 1e-12, "p={p}");
        }
    }

    #[test]
    fn round_trip_at_minimal_length() {
        // the smallest permitted coarse level still inverts exactly
        for p in 1..=6 {
            let f = make_filters(p).unwrap();
            let n = 1usize << f.min_coarse_level();
            let mut rng = Stream::new(p as u64);
            let v = rng.normal_vec(2 * n);
            let (d, s) = forward_step(&v, &f).unwrap();
            let back = inverse_step(&d, &s, &f).unwrap();
            assert!(rel_err(&back, &v) < 1e-12, "p={p}");
        }
    }

    #[test]
    fn full_decomposition_round_trips() {
        let mut rng = Stream::new(17);
        let f = make_filters(3).unwrap();
        let v = rng.normal_vec(256);
        let pyr = decompose(&v, &f, 3).unwrap();
        assert_eq!(pyr.finest_level(), 8);
        for level in 3..=8 {
            assert_eq!(pyr.scaling_at(level).len(), 1 << level);
        }
        for level in 3..8 {
            assert_eq!(pyr.detail_at(level).len(), 1 << level);
        }
        let back = reconstruct(&pyr, &f).unwrap();
        assert!(rel_err(&back, &v) < 1e-12);
    }

    #[test]
    fn coarse_level_bound_enforced() {
        let f = make_filters(3).unwrap();
        let v = vec![0.0; 64];
        assert!(matches!(
            decompose(&v, &f, 2),
            Err(WaveletError::CoarseLevelTooSmall { min: 3, .. })
        ));
        assert!(decompose(&v, &f, 3).is_ok());
    }

    #[test]
    fn polynomial_samples_are_annihilated_in_the_interior()
    {
        // samples of a degree-(p-1) polynomial: every finest-level detail
        // coefficient whose taps avoid the periodic seam vanishes
        for p in 2..=6 {
            let f = make_filters(p).unwrap();
            let n = 256usize;
            let v: Vec<f64> = (0..n)
                .map(|i| {
                    let x = i as f64 / n as f64;
                    (0..p).map(|j| (j as f64 + 1.0) * x.powi(j as i32)).sum::<f64>()
                })
                .collect();
            let (d, _) = forward_step(&v, &f).unwrap();
            let scale: f64 = v.iter().map(|x| x.abs()).fold(0.0, f64::max);
            for k in 0..n / 2 {
                if 2 * k + 2 * p - 1 < n {
                    assert!(d[k].abs() <= 1e-8 * scale, "p={p} k={k} d={}", d[k]);
                }
            }
        }
    }

    #[test]
    fn two_dimensional_step_round_trips_and_conserves_energy() {
        let mut rng = Stream::new(31);
        for p in [1usize, 3, 5] {
            let f = make_filters(p).unwrap();
            let side = 32;
            let field = rng.normal_vec(side * side);
            let channels = forward_step_2d(&field, side, &f).unwrap();
            let fine: f64 = field.iter().map(|x| x * x).sum();
            let coarse: f64 = channels.iter().flat_map(|c| c.iter()).map(|x| x * x).sum();
            assert!((fine - coarse).abs() / fine < 1e-12, "p={p}");
            let back = inverse_step_2d(
                [&channels[0], &channels[1], &channels[2], &channels[3]],
                side / 2,
                &f,
            )
            .unwrap();
            assert!(rel_err(&back, &field) < 1e-12, "p={p}");
        }
    }

    #[test]
    fn perfect_reconstruction_grid() {
        let mut rng = Stream::new(2024);
        for p in 1..=6 {
            let f = make_filters(p).unwrap();
            let l0 = f.min_coarse_level();
            for l in (l0 + 1)..=10 {
                let v = rng.normal_vec(1 << l);
                let pyr = decompose(&v, &f, l0).unwrap();
                let back = reconstruct(&pyr, &f).unwrap();
                assert!(rel_err(&back, &v) < 1e-12, "p={p} l={l}");
            }
        }
    }
}
