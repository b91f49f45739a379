//! Layer primitives: periodic convolution, locally connected, and dense
//! layers in one and two spatial dimensions, plus the channel-interleaving
//! reshape that doubles the spatial extent.
//!
//! Data is held in [`Tensor`]: row-major over spatial positions with the
//! channel index fastest-varying. Spatial indexing is always periodic; an
//! out-of-range tap wraps around. A layer's taps for output position `i` sit
//! at input positions `i*stride + offset + m`, `m = 0..window-1` (per
//! spatial dimension), so `offset = 0` gives the one-sided window and
//! `offset = -((window-1)/2)` the centered one used for banded weights.
//!
//! Weight layouts (row-major over the bracketed order):
//!
//! * conv 1D: `[window][alpha_out][alpha_in]`, 2D `[w][w][alpha_out][alpha_in]`
//! * lc 1D: `[n_out][window][alpha_out][alpha_in]`, 2D prepends `[n_out][n_out]`
//! * dense: full joint matrix `[n*alpha_out][n*alpha_in]` over the flattened
//!   (position, channel) input; output extent equals input extent
//!
//! Biases: conv and dense carry one bias per output channel; lc carries one
//! per output position and channel.

use crate::wavelet::FilterPair;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerError {
    ShapeMismatch { expected: String, got: String },
    StrideDoesNotDivide { extent: usize, stride: usize },
    ChannelsNotDivisible { channels: usize, factor: usize },
    BadSpec(String),
}

impl fmt::Display for LayerError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerError::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            LayerError::StrideDoesNotDivide { extent, stride } => {
                write!(f, "stride {stride} does not divide spatial extent {extent}")
            }
            LayerError::ChannelsNotDivisible { channels, factor } => {
                write!(f, "channel count {channels} is not divisible by {factor}")
            }
            LayerError::BadSpec(msg) => write!(f, "invalid layer spec: {msg}"),
        }
    }
}

impl std::error::Error for LayerError {}

/// Spatial-by-channel tensor, 64-bit, channel index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    spatial: Vec<usize>,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(spatial: Vec<usize>, channels: usize, data: Vec<f64>) -> Result<Self, LayerError> {
        let want: usize = spatial.iter().product::<usize>() * channels;
        if spatial.is_empty() || spatial.len() > 2 || data.len() != want {
            return Err(LayerError::ShapeMismatch {
                expected: format!("{spatial:?} x {channels} = {want} values"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Tensor { spatial, channels, data })
    }

    pub fn zeros(spatial: Vec<usize>, channels: usize) -> Self {
        let len = spatial.iter().product::<usize>() * channels;
        Tensor { spatial, channels, data: vec![0.0; len] }
    }

    pub fn from_1d(extent: usize, channels: usize, data: Vec<f64>) -> Result<Self, LayerError> {
        Tensor::new(vec![extent], channels, data)
    }

    pub fn from_2d(n1: usize, n2: usize, channels: usize, data: Vec<f64>) -> Result<Self, LayerError> {
        Tensor::new(vec![n1, n2], channels, data)
    }

    pub fn dim(&self) -> usize {
        self.spatial.len()
    }

    pub fn spatial(&self) -> &[usize] {
        &self.spatial
    }

    pub fn positions(&self) -> usize {
        self.spatial.iter().product()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn idx1(&self, i: usize, c: usize) -> usize {
        i * self.channels + c
    }

    #[inline]
    pub fn idx2(&self, i1: usize, i2: usize, c: usize) -> usize {
        (i1 * self.spatial[1] + i2) * self.channels + c
    }

    /// Cyclic shift by `s` positions along every spatial dimension:
    /// `out[i] = in[i - s]`.
    pub fn shift_cyclic(&self, s: usize) -> Tensor {
        let mut out = self.clone();
        match self.spatial.len() {
            1 => {
                let n = self.spatial[0];
                for i in 0..n {
                    let j = (i + n - s % n) % n;
                    for c in 0..self.channels {
                        out.data[self.idx1(i, c)] = self.data[self.idx1(j, c)];
                    }
                }
            }
            _ => {
                let (n1, n2) = (self.spatial[0], self.spatial[1]);
                for i1 in 0..n1 {
                    for i2 in 0..n2 {
                        let j1 = (i1 + n1 - s % n1) % n1;
                        let j2 = (i2 + n2 - s % n2) % n2;
                        for c in 0..self.channels {
                            out.data[self.idx2(i1, i2, c)] = self.data[self.idx2(j1, j2, c)];
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Id,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Id => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative expressed through the activation output. The ReLU
    /// sub-gradient at 0 is 0.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Id => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Id => "id",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

/// Elementwise activation over a tensor.
pub fn activation_apply(kind: Activation, x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = kind.apply(*v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Lc,
    Dense,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Lc => "lc",
            LayerKind::Dense => "dense",
        }
    }
}

/// One layer: kind, geometry, activation, and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub dim: usize,
    pub extent_in: usize,
    pub alpha_in: usize,
    pub alpha_out: usize,
    pub window: usize,
    pub stride: usize,
    pub offset: i64,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerSpec {
    pub fn conv(
        dim: usize,
        extent_in: usize,
        alpha_in: usize,
        alpha_out: usize,
        window: usize,
        stride: usize,
        offset: i64,
        activation: Activation,
    ) -> Result<Self, LayerError> {
        if extent_in % stride != 0 {
            return Err(LayerError::StrideDoesNotDivide { extent: extent_in, stride });
        }
        let taps = window.pow(dim as u32);
        Ok(LayerSpec {
            kind: LayerKind::Conv,
            dim,
            extent_in,
            alpha_in,
            alpha_out,
            window,
            stride,
            offset,
            activation,
            weights: vec![0.0; taps * alpha_out * alpha_in],
            bias: vec![0.0; alpha_out],
        })
    }

    pub fn lc(
        dim: usize,
        extent_in: usize,
        alpha_in: usize,
        alpha_out: usize,
        window: usize,
        stride: usize,
        offset: i64,
        activation: Activation,
    ) -> Result<Self, LayerError> {
        if extent_in % stride != 0 {
            return Err(LayerError::StrideDoesNotDivide { extent: extent_in, stride });
        }
        let n_out = (extent_in / stride).pow(dim as u32);
        let taps = window.pow(dim as u32);
        Ok(LayerSpec {
            kind: LayerKind::Lc,
            dim,
            extent_in,
            alpha_in,
            alpha_out,
            window,
            stride,
            offset,
            activation,
            weights: vec![0.0; n_out * taps * alpha_out * alpha_in],
            bias: vec![0.0; n_out * alpha_out],
        })
    }

    /// Dense layer over the whole field; output extent equals input extent
    /// and every output entry depends on every input entry through a full
    /// joint (position, channel) mixing matrix.
    pub fn dense(
        dim: usize,
        extent_in: usize,
        alpha_in: usize,
        alpha_out: usize,
        activation: Activation,
    ) -> Result<Self, LayerError> {
        let n = extent_in.pow(dim as u32);
        Ok(LayerSpec {
            kind: LayerKind::Dense,
            dim,
            extent_in,
            alpha_in,
            alpha_out,
            window: extent_in,
            stride: 1,
            offset: 0,
            activation,
            weights: vec![0.0; (n * alpha_out) * (n * alpha_in)],
            bias: vec![0.0; alpha_out],
        })
    }

    pub fn extent_out(&self) -> usize {
        self.extent_in / self.stride
    }

    /// Output positions (product over spatial dims).
    pub fn positions_out(&self) -> usize {
        self.extent_out().pow(self.dim as u32)
    }

    fn check_input(&self, x: &Tensor) -> Result<(), LayerError> {
        let ok = x.dim() == self.dim
            && x.spatial().iter().all(|&e| e == self.extent_in)
            && x.channels() == self.alpha_in;
        if ok {
            Ok(())
        } else {
            Err(LayerError::ShapeMismatch {
                expected: format!(
                    "extent {} ^ {} x {} channels",
                    self.extent_in, self.dim, self.alpha_in
                ),
                got: format!("{:?} x {} channels", x.spatial(), x.channels()),
            })
        }
    }

    /// Forward evaluation.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, LayerError> {
        self.check_input(x)?;
        match (self.kind, self.dim) {
            (LayerKind::Dense, _) => self.forward_dense(x),
            (_, 1) => self.forward_windowed_1d(x),
            (_, 2) => self.forward_windowed_2d(x),
            _ => Err(LayerError::BadSpec(format!("unsupported dim {}", self.dim))),
        }
    }

    fn forward_windowed_1d(&self, x: &Tensor) -> Result<Tensor, LayerError> {
        let n_in = self.extent_in;
        let n_out = self.extent_out();
        let (w, a_in, a_out) = (self.window, self.alpha_in, self.alpha_out);
        let per_position = w * a_out * a_in;
        let mut out = Tensor::zeros(vec![n_out], a_out);
        for i in 0..n_out {
            let wbase = match self.kind {
                LayerKind::Conv => 0,
                _ => i * per_position,
            };
            let base = i as i64 * self.stride as i64 + self.offset;
            for cp in 0..a_out {
                let mut acc = match self.kind {
                    LayerKind::Conv => self.bias[cp],
                    _ => self.bias[i * a_out + cp],
                };
                for m in 0..w {
                    let j = (base + m as i64).rem_euclid(n_in as i64) as usize;
                    let wrow = wbase + (m * a_out + cp) * a_in;
                    for c in 0..a_in {
                        acc += self.weights[wrow + c] * x.data()[j * a_in + c];
                    }
                }
                out.data_mut()[i * a_out + cp] = self.activation.apply(acc);
            }
        }
        Ok(out)
    }

    fn forward_windowed_2d(&self, x: &Tensor) -> Result<Tensor, LayerError> {
        let n_in = self.extent_in;
        let n_out = self.extent_out();
        let (w, a_in, a_out) = (self.window, self.alpha_in, self.alpha_out);
        let per_position = w * w * a_out * a_in;
        let mut out = Tensor::zeros(vec![n_out, n_out], a_out);
        for i1 in 0..n_out {
            for i2 in 0..n_out {
                let pos = i1 * n_out + i2;
                let wbase = match self.kind {
                    LayerKind::Conv => 0,
                    _ => pos * per_position,
                };
                let b1 = i1 as i64 * self.stride as i64 + self.offset;
                let b2 = i2 as i64 * self.stride as i64 + self.offset;
                for cp in 0..a_out {
                    let mut acc = match self.kind {
                        LayerKind::Conv => self.bias[cp],
                        _ => self.bias[pos * a_out + cp],
                    };
                    for m1 in 0..w {
                        let j1 = (b1 + m1 as i64).rem_euclid(n_in as i64) as usize;
                        for m2 in 0..w {
                            let j2 = (b2 + m2 as i64).rem_euclid(n_in as i64) as usize;
                            let wrow = wbase + ((m1 * w + m2) * a_out + cp) * a_in;
                            let xrow = (j1 * n_in + j2) * a_in;
                            for c in 0..a_in {
                                acc += self.weights[wrow + c] * x.data()[xrow + c];
                            }
                        }
                    }
                    out.data_mut()[pos * a_out + cp] = self.activation.apply(acc);
                }
            }
        }
        Ok(out)
    }

    fn forward_dense(&self, x: &Tensor) -> Result<Tensor, LayerError> {
        let n = x.positions();
        let (a_in, a_out) = (self.alpha_in, self.alpha_out);
        let cols = n * a_in;
        let mut out = Tensor::zeros(x.spatial().to_vec(), a_out);
        for i in 0..n {
            for cp in 0..a_out {
                let row = (i * a_out + cp) * cols;
                let mut acc = self.bias[cp];
                for jc in 0..cols {
                    acc += self.weights[row + jc] * x.data()[jc];
                }
                out.data_mut()[i * a_out + cp] = self.activation.apply(acc);
            }
        }
        Ok(out)
    }
}

/// Forward pass of a convolutional spec.
pub fn conv_forward(x: &Tensor, spec: &LayerSpec) -> Result<Tensor, LayerError> {
    if spec.kind != LayerKind::Conv {
        return Err(LayerError::BadSpec("conv_forward needs a conv spec".into()));
    }
    spec.forward(x)
}

/// Forward pass of a locally connected spec.
pub fn lc_forward(x: &Tensor, spec: &LayerSpec) -> Result<Tensor, LayerError> {
    if spec.kind != LayerKind::Lc {
        return Err(LayerError::BadSpec("lc_forward needs an lc spec".into()));
    }
    spec.forward(x)
}

/// Forward pass of a dense spec.
pub fn dense_forward(x: &Tensor, spec: &LayerSpec) -> Result<Tensor, LayerError> {
    if spec.kind != LayerKind::Dense {
        return Err(LayerError::BadSpec("dense_forward needs a dense spec".into()));
    }
    spec.forward(x)
}

/// Move channel groups into the spatial grid. In 1D with factor `m`:
/// `out[m*k + r, c] = in[k, c*m + r]`, doubling (m=2) the extent. In 2D the
/// factor must be 4 and `out[2*i1 + a, 2*i2 + b, c] = in[i1, i2, 4*c + 2*a + b]`.
pub fn interleave(x: &Tensor, factor: usize) -> Result<Tensor, LayerError> {
    if x.channels() % factor != 0 {
        return Err(LayerError::ChannelsNotDivisible { channels: x.channels(), factor });
    }
    let a_out = x.channels() / factor;
    match x.dim() {
        1 => {
            let n = x.spatial()[0];
            let mut out = Tensor::zeros(vec![n * factor], a_out);
            for k in 0..n {
                for c in 0..a_out {
                    for r in 0..factor {
                        out.data_mut()[(factor * k + r) * a_out + c] =
                            x.data()[k * x.channels() + c * factor + r];
                    }
                }
            }
            Ok(out)
        }
        _ => {
            if factor != 4 {
                return Err(LayerError::BadSpec("2D interleave uses factor 4".into()));
            }
            let n = x.spatial()[0];
            let n2 = x.spatial()[1];
            let mut out = Tensor::zeros(vec![2 * n, 2 * n2], a_out);
            for i1 in 0..n {
                for i2 in 0..n2 {
                    for c in 0..a_out {
                        for a in 0..2 {
                            for b in 0..2 {
                                let v = x.data()[(i1 * n2 + i2) * x.channels() + c * 4 + 2 * a + b];
                                out.data_mut()
                                    [((2 * i1 + a) * 2 * n2 + (2 * i2 + b)) * a_out + c] = v;
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Exact inverse of [`interleave`]; also its adjoint, both being index
/// permutations.
pub fn de_interleave(x: &Tensor, factor: usize) -> Result<Tensor, LayerError> {
    match x.dim() {
        1 => {
            let n_out = x.spatial()[0];
            if n_out % factor != 0 {
                return Err(LayerError::ChannelsNotDivisible { channels: n_out, factor });
            }
            let n = n_out / factor;
            let a_out = x.channels();
            let mut out = Tensor::zeros(vec![n], a_out * factor);
            for k in 0..n {
                for c in 0..a_out {
                    for r in 0..factor {
                        out.data_mut()[k * a_out * factor + c * factor + r] =
                            x.data()[(factor * k + r) * a_out + c];
                    }
                }
            }
            Ok(out)
        }
        _ => {
            if factor != 4 {
                return Err(LayerError::BadSpec("2D de-interleave uses factor 4".into()));
            }
            let (f1, f2) = (x.spatial()[0], x.spatial()[1]);
            if f1 % 2 != 0 || f2 % 2 != 0 {
                return Err(LayerError::ChannelsNotDivisible { channels: f1, factor: 2 });
            }
            let (n1, n2) = (f1 / 2, f2 / 2);
            let a_out = x.channels();
            let mut out = Tensor::zeros(vec![n1, n2], a_out * 4);
            for i1 in 0..n1 {
                for i2 in 0..n2 {
                    for c in 0..a_out {
                        for a in 0..2 {
                            for b in 0..2 {
                                out.data_mut()[(i1 * n2 + i2) * a_out * 4 + c * 4 + 2 * a + b] =
                                    x.data()[((2 * i1 + a) * f2 + (2 * i2 + b)) * a_out + c];
                            }
                        }
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Analysis conv: window `2p`, stride 2, offset 0, identity activation.
/// Input channel `a` feeds its own wavelet/scaling output channels; wavelet
/// channels come first, pure scaling channels last.
pub fn wavelet_analysis_conv(
    filters: &FilterPair,
    dim: usize,
    extent_in: usize,
    alpha_in: usize,
) -> Result<LayerSpec, LayerError> {
    let p = filters.order();
    let groups = if dim == 1 { 2 } else { 4 };
    let mut spec = LayerSpec::conv(
        dim,
        extent_in,
        alpha_in,
        groups * alpha_in,
        2 * p,
        2,
        0,
        Activation::Id,
    )?;
    let (h, g) = (filters.lowpass(), filters.highpass());
    let a_out = groups * alpha_in;
    if dim == 1 {
        for a in 0..alpha_in {
            for m in 0..2 * p {
                spec.weights[(m * a_out + a) * alpha_in + a] = g[m];
                spec.weights[(m * a_out + alpha_in + a) * alpha_in + a] = h[m];
            }
        }
    } else {
        let table: [(&[f64], &[f64]); 4] = [(g, g), (g, h), (h, g), (h, h)];
        for a in 0..alpha_in {
            for (q, (f1, f2)) in table.iter().enumerate() {
                for m1 in 0..2 * p {
                    for m2 in 0..2 * p {
                        spec.weights
                            [((m1 * 2 * p + m2) * a_out + q * alpha_in + a) * alpha_in + a] =
                            f1[m1] * f2[m2];
                    }
                }
            }
        }
    }
    Ok(spec)
}

/// Synthesis conv: window `p`, stride 1, offset `-(p-1)`, identity
/// activation. Output channel `factor*c + r` holds the phase-`r` synthesis
/// taps of final channel `c`, so the conv followed by [`interleave`]
/// reproduces the synthesis step exactly. `alpha` is the channel count
/// after the interleave.
pub fn wavelet_synthesis_conv(
    filters: &FilterPair,
    dim: usize,
    extent_in: usize,
    alpha: usize,
) -> Result<LayerSpec, LayerError> {
    let p = filters.order();
    let groups = if dim == 1 { 2 } else { 4 };
    let channels = groups * alpha;
    let mut spec = LayerSpec::conv(
        dim,
        extent_in,
        channels,
        channels,
        p,
        1,
        -(p as i64 - 1),
        Activation::Id,
    )?;
    let (h, g) = (filters.lowpass(), filters.highpass());
    if dim == 1 {
        for c in 0..alpha {
            for r in 0..2 {
                for m in 0..p {
                    let tap = 2 * (p - 1 - m) + r;
                    let row = (m * channels + 2 * c + r) * channels;
                    spec.weights[row + c] = g[tap];
                    spec.weights[row + alpha + c] = h[tap];
                }
            }
        }
    } else {
        let table: [(&[f64], &[f64]); 4] = [(g, g), (g, h), (h, g), (h, h)];
        for c in 0..alpha {
            for r1 in 0..2 {
                for r2 in 0..2 {
                    let cp = 4 * c + 2 * r1 + r2;
                    for m1 in 0..p {
                        for m2 in 0..p {
                            let t1 = 2 * (p - 1 - m1) + r1;
                            let t2 = 2 * (p - 1 - m2) + r2;
                            let row = ((m1 * p + m2) * channels + cp) * channels;
                            for (q, (f1, f2)) in table.iter().enumerate() {
                                spec.weights[row + q * alpha + c] = f1[t1] * f2[t2];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(spec)
}
