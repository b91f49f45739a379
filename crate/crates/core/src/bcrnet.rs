//! Multiresolution network assembly.
//!
//! Two builders share one evaluation schedule:
//!
//! * [`build_linear_net`] wires the banded matrix-vector product of a
//!   [`NonstandardForm`] as a linear network: stride-2 analysis convs down
//!   the scales, one locally connected layer per scale holding the banded
//!   blocks, a dense layer holding the coarsest matrix, and synthesis convs
//!   with a channel interleave back up. Its output equals the compressed
//!   product exactly.
//! * [`build_bcrnet`] generalizes that wiring: `alpha` channel pairs,
//!   `depth` nonlinear locally connected (or convolutional) layers per
//!   scale, and a tower of dense (or full-window conv) layers at the
//!   coarsest scale. With `alpha = 1`, `depth = 1`, identity activation and
//!   weights loaded from a nonstandard form it degenerates to the linear
//!   net, layer for layer.
//!
//! Channel convention throughout: wavelet channels first, scaling channels
//! last; the downward split keeps the last `alpha` channels, the upward pass
//! adds the coarser output into the last `alpha` channels.

use crate::layers::{
    interleave, wavelet_analysis_conv, wavelet_synthesis_conv, Activation, LayerError, LayerSpec,
    Tensor,
};
use crate::nsform::{level_window, NonstandardForm, NsformError};
use crate::rng::Stream;
use crate::wavelet::{make_filters, WaveletError};
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum NetError {
    InvalidConfig(String),
    Layer(LayerError),
    Nsform(NsformError),
    Filter(WaveletError),
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NetError::InvalidConfig(msg) => write!(f, "invalid network config: {msg}"),
            NetError::Layer(e) => write!(f, "{e}"),
            NetError::Nsform(e) => write!(f, "{e}"),
            NetError::Filter(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for NetError {}

impl From<LayerError> for NetError {
    fn from(e: LayerError) -> Self {
        NetError::Layer(e)
    }
}

impl From<NsformError> for NetError {
    fn from(e: NsformError) -> Self {
        NetError::Nsform(e)
    }
}

impl From<WaveletError> for NetError {
    fn from(e: WaveletError) -> Self {
        NetError::Filter(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Position-dependent weights in the per-scale layers.
    Lc,
    /// Every locally connected layer becomes a conv of the same window and
    /// the dense tower becomes convs with window equal to the input extent;
    /// the network then commutes with cyclic shifts at the total-stride
    /// granularity.
    ConvEquivariant,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Lc => "lc",
            Mode::ConvEquivariant => "conv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformInit {
    /// Analysis/synthesis convs start as exact wavelet transforms.
    Wavelet,
    /// Analysis/synthesis convs start random like every other layer.
    Random,
}

impl TransformInit {
    pub fn name(self) -> &'static str {
        match self {
            TransformInit::Wavelet => "wavelet",
            TransformInit::Random => "random",
        }
    }
}

/// Architecture parameters of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub dim: usize,
    /// Filter order p.
    pub order: usize,
    /// Finest level L; the input has 2^L points per spatial dimension.
    pub finest: usize,
    /// Coarsest level L0.
    pub coarsest: usize,
    /// Band width of the per-scale windows (odd; capped per level).
    pub band_width: usize,
    /// Channel pairs alpha.
    pub channels: usize,
    /// Layers per scale (and dense tower height) K.
    pub depth: usize,
    pub mode: Mode,
    pub activation: Activation,
    pub transform_init: TransformInit,
    pub transform_trainable: bool,
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |msg: String| Err(NetError::InvalidConfig(msg));
        if self.dim != 1 && self.dim != 2 {
            return fail(format!("dim must be 1 or 2, got {}", self.dim));
        }
        if self.order < 1 || self.order > 6 {
            return fail(format!("filter order {} outside 1..=6", self.order));
        }
        let min_coarse = {
            let mut l = 0usize;
            while (1usize << l) < 2 * self.order {
                l += 1;
            }
            l
        };
        if self.coarsest < min_coarse {
            return fail(format!(
                "coarsest level {} below minimum {} for order {}",
                self.coarsest, min_coarse, self.order
            ));
        }
        if self.finest <= self.coarsest {
            return fail(format!(
                "finest level {} must exceed coarsest level {}",
                self.finest, self.coarsest
            ));
        }
        if self.channels == 0 {
            return fail("channels must be at least 1".into());
        }
        if self.depth == 0 {
            return fail("depth must be at least 1".into());
        }
        if self.band_width % 2 == 0 {
            return fail(format!("band width {} must be odd", self.band_width));
        }
        Ok(())
    }

    /// Channel groups per analysis step: 2 in 1D, 4 in 2D.
    pub fn groups(&self) -> usize {
        if self.dim == 1 {
            2
        } else {
            4
        }
    }

    pub fn scale_count(&self) -> usize {
        self.finest - self.coarsest
    }

    /// Input points per spatial dimension.
    pub fn extent(&self) -> usize {
        1usize << self.finest
    }

    /// Shift granularity of the conv-equivariant mode: the total
    /// downsampling stride.
    pub fn shift_granularity(&self) -> usize {
        1usize << (self.finest - self.coarsest)
    }
}

/// A built network: the per-scale layer stacks in evaluation order.
#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: NetConfig,
    /// `down[i]` produces the level `coarsest + i` channels; applied from
    /// the last entry (finest) to the first.
    pub down: Vec<LayerSpec>,
    /// Dense (or full-window conv) tower at the coarsest level.
    pub coarse: Vec<LayerSpec>,
    /// `stacks[i]` holds the `depth` per-scale layers at level `coarsest + i`.
    pub stacks: Vec<Vec<LayerSpec>>,
    /// `up[i]` is the synthesis conv at level `coarsest + i`.
    pub up: Vec<LayerSpec>,
}

/// Everything the forward pass computed, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub input: Tensor,
    pub replicated: Tensor,
    /// `v[i]` is the scaling path at level `coarsest + i`; `v[scales]` is the
    /// replicated input.
    pub v: Vec<Tensor>,
    /// `xi[i]` is the analysis output at level `coarsest + i`.
    pub xi: Vec<Tensor>,
    pub coarse_io: Vec<(Tensor, Tensor)>,
    pub stack_io: Vec<Vec<(Tensor, Tensor)>>,
    /// Per level: the stack output with the coarser result injected.
    pub chi: Vec<Tensor>,
    /// Per level: synthesis conv output before the interleave.
    pub synth_out: Vec<Tensor>,
    /// `u[0]` is the tower output, `u[i+1]` the interleaved level result.
    pub u: Vec<Tensor>,
    pub output: Tensor,
}

/// Copy a single-channel field into `alpha` identical channels.
pub fn replicate_channel(x: &Tensor, alpha: usize) -> Tensor {
    let mut out = Tensor::zeros(x.spatial().to_vec(), alpha);
    for pos in 0..x.positions() {
        let v = x.data()[pos];
        for a in 0..alpha {
            out.data_mut()[pos * alpha + a] = v;
        }
    }
    out
}

/// The last `k` channels as their own tensor.
pub fn take_last_channels(x: &Tensor, k: usize) -> Tensor {
    let c = x.channels();
    let mut out = Tensor::zeros(x.spatial().to_vec(), k);
    for pos in 0..x.positions() {
        for j in 0..k {
            out.data_mut()[pos * k + j] = x.data()[pos * c + (c - k) + j];
        }
    }
    out
}

/// Add `u` into the last `u.channels()` channels of `x`.
pub fn add_to_last_channels(x: &Tensor, u: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.channels();
    let k = u.channels();
    for pos in 0..x.positions() {
        for j in 0..k {
            out.data_mut()[pos * c + (c - k) + j] += u.data()[pos * k + j];
        }
    }
    out
}

/// Arithmetic mean over the channel direction.
pub fn channel_mean(x: &Tensor) -> Tensor {
    let c = x.channels();
    let mut out = Tensor::zeros(x.spatial().to_vec(), 1);
    for pos in 0..x.positions() {
        let mut acc = 0.0;
        for j in 0..c {
            acc += x.data()[pos * c + j];
        }
        out.data_mut()[pos] = acc / c as f64;
    }
    out
}

impl Network {
    pub fn scale_count(&self) -> usize {
        self.cfg.scale_count()
    }

    /// Forward pass keeping every intermediate for the backward pass.
    pub fn forward_trace(&self, input: &Tensor) -> Result<Trace, NetError> {
        let cfg = &self.cfg;
        let nlev = cfg.scale_count();
        let alpha = cfg.channels;
        let factor = cfg.groups();
        if input.dim() != cfg.dim
            || input.channels() != 1
            || input.spatial().iter().any(|&e| e != cfg.extent())
        {
            return Err(NetError::InvalidConfig(format!(
                "input shape {:?} x {} does not match extent {} ^ {}",
                input.spatial(),
                input.channels(),
                cfg.extent(),
                cfg.dim
            )));
        }
        let replicated = replicate_channel(input, alpha);
        let mut v: Vec<Option<Tensor>> = vec![None; nlev + 1];
        let mut xi: Vec<Option<Tensor>> = vec![None; nlev];
        v[nlev] = Some(replicated.clone());
        for i in (0..nlev).rev() {
            let fine = v[i + 1].as_ref().expect("scaling path");
            let out = self.down[i].forward(fine)?;
            v[i] = Some(take_last_channels(&out, alpha));
            xi[i] = Some(out);
        }
        let v: Vec<Tensor> = v.into_iter().map(|t| t.expect("filled")).collect();
        let xi: Vec<Tensor> = xi.into_iter().map(|t| t.expect("filled")).collect();

        let mut coarse_io = Vec::with_capacity(self.coarse.len());
        let mut cur = v[0].clone();
        for layer in &self.coarse {
            let out = layer.forward(&cur)?;
            coarse_io.push((cur, out.clone()));
            cur = out;
        }
        let mut u = vec![cur];

        let mut stack_io = Vec::with_capacity(nlev);
        let mut chi = Vec::with_capacity(nlev);
        let mut synth_out = Vec::with_capacity(nlev);
        for i in 0..nlev {
            let mut io = Vec::with_capacity(self.stacks[i].len());
            let mut z = xi[i].clone();
            for layer in &self.stacks[i] {
                let out = layer.forward(&z)?;
                io.push((z, out.clone()));
                z = out;
            }
            stack_io.push(io);
            let injected = add_to_last_channels(&z, u.last().expect("coarser output"));
            let conv_out = self.up[i].forward(&injected)?;
            let lifted = interleave(&conv_out, factor)?;
            chi.push(injected);
            synth_out.push(conv_out);
            u.push(lifted);
        }
        let output = channel_mean(u.last().expect("final level"));
        Ok(Trace {
            input: input.clone(),
            replicated,
            v,
            xi,
            coarse_io,
            stack_io,
            chi,
            synth_out,
            u,
            output,
        })
    }

    /// Forward pass, output only.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NetError> {
        Ok(self.forward_trace(input)?.output)
    }

    /// Evaluate on a flat field (length 2^L in 1D, 4^L in 2D).
    pub fn evaluate(&self, field: &[f64]) -> Result<Vec<f64>, NetError> {
        let e = self.cfg.extent();
        let input = match self.cfg.dim {
            1 => Tensor::from_1d(e, 1, field.to_vec())?,
            _ => Tensor::from_2d(e, e, 1, field.to_vec())?,
        };
        Ok(self.forward(&input)?.into_data())
    }

    /// Layers in the canonical parameter order: down, coarse, stacks, up.
    pub fn layers(&self) -> Vec<&LayerSpec> {
        let mut out: Vec<&LayerSpec> = self.down.iter().collect();
        out.extend(self.coarse.iter());
        for s in &self.stacks {
            out.extend(s.iter());
        }
        out.extend(self.up.iter());
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerSpec> {
        let mut out: Vec<&mut LayerSpec> = self.down.iter_mut().collect();
        out.extend(self.coarse.iter_mut());
        for s in &mut self.stacks {
            out.extend(s.iter_mut());
        }
        out.extend(self.up.iter_mut());
        out
    }

    /// Names aligned with [`Network::layers`].
    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.down.len()).map(|i| format!("down{i}")).collect();
        names.extend((0..self.coarse.len()).map(|k| format!("coarse{k}")));
        for (i, s) in self.stacks.iter().enumerate() {
            names.extend((0..s.len()).map(move |k| format!("stack{i}.{k}")));
        }
        names.extend((0..self.up.len()).map(|i| format!("up{i}")));
        names
    }

    /// Whether the layer at canonical index `idx` is trainable.
    pub fn layer_trainable(&self, idx: usize) -> bool {
        let nd = self.down.len();
        let transform = idx < nd || idx >= self.layers().len() - self.up.len();
        if transform {
            self.cfg.transform_trainable
        } else {
            true
        }
    }

    /// Total weight and bias counts of the built layers.
    pub fn weight_tally(&self) -> (u64, u64) {
        let mut w = 0u64;
        let mut b = 0u64;
        for layer in self.layers() {
            w += layer.weights.len() as u64;
            b += layer.bias.len() as u64;
        }
        (w, b)
    }
}

/// Per-level window of the banded stage.
fn stack_window(cfg: &NetConfig, level: usize) -> usize {
    level_window(cfg.band_width, 1usize << level)
}

fn stack_offset(window: usize) -> i64 {
    -(((window - 1) / 2) as i64)
}

/// Build the layer skeleton (zero weights) for a config.
fn build_skeleton(cfg: &NetConfig) -> Result<Network, NetError> {
    cfg.validate()?;
    let nlev = cfg.scale_count();
    let alpha = cfg.channels;
    let groups = cfg.groups();
    let p = cfg.order;
    let mut down = Vec::with_capacity(nlev);
    let mut stacks = Vec::with_capacity(nlev);
    let mut up = Vec::with_capacity(nlev);
    for i in 0..nlev {
        let level = cfg.coarsest + i;
        let extent_fine = 1usize << (level + 1);
        let extent = 1usize << level;
        down.push(LayerSpec::conv(
            cfg.dim,
            extent_fine,
            alpha,
            groups * alpha,
            2 * p,
            2,
            0,
            Activation::Id,
        )?);
        let w = stack_window(cfg, level);
        let mut stack = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let layer = match cfg.mode {
                Mode::Lc => LayerSpec::lc(
                    cfg.dim,
                    extent,
                    groups * alpha,
                    groups * alpha,
                    w,
                    1,
                    stack_offset(w),
                    cfg.activation,
                )?,
                Mode::ConvEquivariant => LayerSpec::conv(
                    cfg.dim,
                    extent,
                    groups * alpha,
                    groups * alpha,
                    w,
                    1,
                    stack_offset(w),
                    cfg.activation,
                )?,
            };
            stack.push(layer);
        }
        stacks.push(stack);
        up.push(LayerSpec::conv(
            cfg.dim,
            extent,
            groups * alpha,
            groups * alpha,
            p,
            1,
            -(p as i64 - 1),
            Activation::Id,
        )?);
    }
    let coarse_extent = 1usize << cfg.coarsest;
    let mut coarse = Vec::with_capacity(cfg.depth);
    for _ in 0..cfg.depth {
        let layer = match cfg.mode {
            Mode::Lc => LayerSpec::dense(cfg.dim, coarse_extent, alpha, alpha, cfg.activation)?,
            Mode::ConvEquivariant => LayerSpec::conv(
                cfg.dim,
                coarse_extent,
                alpha,
                alpha,
                coarse_extent,
                1,
                0,
                cfg.activation,
            )?,
        };
        coarse.push(layer);
    }
    Ok(Network { cfg: cfg.clone(), down, coarse, stacks, up })
}

/// Zero-mean normal entries with std (window^dim * alpha_in)^(-1/2).
fn init_layer_random(layer: &mut LayerSpec, rng: &mut Stream) {
    let fan_in = layer.window.pow(layer.dim as u32) * layer.alpha_in;
    let std = 1.0 / (fan_in as f64).sqrt();
    for w in layer.weights.iter_mut() {
        *w = std * rng.normal();
    }
    for b in layer.bias.iter_mut() {
        *b = 0.0;
    }
}

/// Build a network with random (or wavelet-initialized transform) weights.
pub fn build_bcrnet(cfg: &NetConfig, seed: u64) -> Result<Network, NetError> {
    let mut net = build_skeleton(cfg)?;
    let filters = make_filters(cfg.order)?;
    let mut rng = Stream::new(seed);
    let nlev = cfg.scale_count();
    for i in 0..nlev {
        match cfg.transform_init {
            TransformInit::Wavelet => {
                let extent_fine = 1usize << (cfg.coarsest + i + 1);
                net.down[i] =
                    wavelet_analysis_conv(&filters, cfg.dim, extent_fine, cfg.channels)?;
            }
            TransformInit::Random => init_layer_random(&mut net.down[i], &mut rng),
        }
    }
    for layer in &mut net.coarse {
        init_layer_random(layer, &mut rng);
    }
    for stack in &mut net.stacks {
        for layer in stack {
            init_layer_random(layer, &mut rng);
        }
    }
    for i in 0..nlev {
        match cfg.transform_init {
            TransformInit::Wavelet => {
                let extent = 1usize << (cfg.coarsest + i);
                net.up[i] = wavelet_synthesis_conv(&filters, cfg.dim, extent, cfg.channels)?;
            }
            TransformInit::Random => init_layer_random(&mut net.up[i], &mut rng),
        }
    }
    Ok(net)
}

/// Load the blocks of a nonstandard form into a compatible network: exact
/// wavelet transforms in the down/up convs, banded blocks in the per-scale
/// layer, the coarsest dense matrix in the tower. Requires `channels = 1`,
/// `depth = 1`, lc mode, and matching geometry.
pub fn load_nonstandard_weights(net: &mut Network, ns: &NonstandardForm) -> Result<(), NetError> {
    let cfg = &net.cfg;
    if cfg.channels != 1 || cfg.depth != 1 || cfg.mode != Mode::Lc {
        return Err(NetError::InvalidConfig(
            "nonstandard-form loading needs channels=1, depth=1, lc mode".into(),
        ));
    }
    if cfg.dim != ns.dim()
        || cfg.finest != ns.finest_level()
        || cfg.coarsest != ns.coarsest_level()
        || cfg.order != ns.order()
        || cfg.band_width != ns.band_width()
    {
        return Err(NetError::InvalidConfig("network geometry does not match the form".into()));
    }
    let filters = ns.filters();
    let groups = cfg.groups();
    for i in 0..cfg.scale_count() {
        let extent_fine = 1usize << (cfg.coarsest + i + 1);
        let extent = 1usize << (cfg.coarsest + i);
        net.down[i] = wavelet_analysis_conv(filters, cfg.dim, extent_fine, 1)?;
        net.up[i] = wavelet_synthesis_conv(filters, cfg.dim, extent, 1)?;
        let lv = &ns.levels()[i];
        let layer = &mut net.stacks[i][0];
        let w = lv.blocks[0].window();
        if layer.window != w {
            return Err(NetError::InvalidConfig(format!(
                "stack window {} does not match stored band window {}",
                layer.window, w
            )));
        }
        let taps = w.pow(cfg.dim as u32);
        let positions = extent.pow(cfg.dim as u32);
        // weight[(pos*taps + tap)*groups + row_block][col_block] = block entry
        for pos in 0..positions {
            for t in 0..taps {
                for qr in 0..groups {
                    for qc in 0..groups {
                        let widx = ((pos * taps + t) * groups + qr) * groups + qc;
                        let block_idx = qr * groups + qc;
                        layer.weights[widx] = if block_idx == groups * groups - 1 {
                            0.0
                        } else {
                            lv.blocks[block_idx].data()[pos * taps + t]
                        };
                    }
                }
            }
        }
        for b in layer.bias.iter_mut() {
            *b = 0.0;
        }
    }
    let dense = &mut net.coarse[0];
    dense.weights.copy_from_slice(ns.top());
    for b in dense.bias.iter_mut() {
        *b = 0.0;
    }
    Ok(())
}

/// The exact linear translation of a nonstandard-form product: evaluating
/// the returned network equals [`crate::nsform::apply`] on every input.
pub fn build_linear_net(ns: &NonstandardForm) -> Result<Network, NetError> {
    let cfg = NetConfig {
        dim: ns.dim(),
        order: ns.order(),
        finest: ns.finest_level(),
        coarsest: ns.coarsest_level(),
        band_width: ns.band_width(),
        channels: 1,
        depth: 1,
        mode: Mode::Lc,
        activation: Activation::Id,
        transform_init: TransformInit::Wavelet,
        transform_trainable: false,
    };
    let mut net = build_skeleton(&cfg)?;
    load_nonstandard_weights(&mut net, ns)?;
    Ok(net)
}

/// Closed-form parameter counts `(weights, biases)` for a config. Pure
/// arithmetic over the architecture; it does not require the coarse level to
/// clear the filter-support bound, so nominal configurations can be priced
/// without being buildable.
pub fn param_count(cfg: &NetConfig) -> (u64, u64) {
    let alpha = cfg.channels as u64;
    let p = cfg.order as u64;
    let depth = cfg.depth as u64;
    let groups = cfg.groups() as u64;
    let mut weights = 0u64;
    let mut biases = 0u64;
    for level in cfg.coarsest..cfg.finest {
        let w = stack_window(cfg, level) as u64;
        let cells = 1u64 << (cfg.dim * level);
        let transform_taps = (2 * p).pow(cfg.dim as u32);
        let synth_taps = p.pow(cfg.dim as u32);
        // analysis conv alpha -> groups*alpha, synthesis conv groups*alpha -> groups*alpha
        weights += transform_taps * alpha * (groups * alpha);
        weights += synth_taps * (groups * alpha) * (groups * alpha);
        biases += groups * alpha * 2;
        // per-scale stack
        let taps = w.pow(cfg.dim as u32);
        let per_layer = taps * (groups * alpha) * (groups * alpha);
        match cfg.mode {
            Mode::Lc => {
                weights += depth * cells * per_layer;
                biases += depth * cells * groups * alpha;
            }
            Mode::ConvEquivariant => {
                weights += depth * per_layer;
                biases += depth * groups * alpha;
            }
        }
    }
    let coarse_cells = 1u64 << (cfg.dim * cfg.coarsest);
    match cfg.mode {
        Mode::Lc => {
            weights += depth * (coarse_cells * alpha) * (coarse_cells * alpha);
            biases += depth * alpha;
        }
        Mode::ConvEquivariant => {
            weights += depth * coarse_cells * alpha * alpha;
            biases += depth * alpha;
        }
    }
    (weights, biases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::de_interleave;
    use crate::nsform::{apply, decompose_operator, full_band, DenseMatrix};
    use crate::rng::Stream;
    use crate::wavelet::make_filters;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den.max(1e-300)
    }

    fn base_cfg() -> NetConfig {
        NetConfig {
            dim: 1,
            order: 3,
            finest: 6,
            coarsest: 3,
            band_width: 3,
            channels: 2,
            depth: 2,
            mode: Mode::Lc,
            activation: Activation::Relu,
            transform_init: TransformInit::Wavelet,
            transform_trainable: true,
        }
    }

    #[test]
    fn config_validation_reports_violations() {
        let mut cfg = base_cfg();
        cfg.coarsest = 2;
        assert!(matches!(build_bcrnet(&cfg, 0), Err(NetError::InvalidConfig(_))));
        let mut cfg = base_cfg();
        cfg.band_width = 4;
        assert!(matches!(build_bcrnet(&cfg, 0), Err(NetError::InvalidConfig(_))));
        let mut cfg = base_cfg();
        cfg.depth = 0;
        assert!(matches!(build_bcrnet(&cfg, 0), Err(NetError::InvalidConfig(_))));
    }

    #[test]
    fn linear_net_identity_form_is_identity_map() {
        let f = make_filters(2).unwrap();
        let a = DenseMatrix::identity(1, 5);
        let ns = decompose_operator(&a, &f, 2, full_band(5)).unwrap();
        let net = build_linear_net(&ns).unwrap();
        let mut rng = Stream::new(60);
        let v = rng.normal_vec(32);
        let out = net.evaluate(&v).unwrap();
        assert!(rel_err(&out, &v) < 1e-12);
    }

    #[test]
    fn linear_net_matches_dense_product_at_full_band() {
        let mut rng = Stream::new(61);
        let f = make_filters(3).unwrap();
        let a = DenseMatrix::new(1, 6, rng.normal_vec(64 * 64)).unwrap();
        let ns = decompose_operator(&a, &f, 3, full_band(6)).unwrap();
        let net = build_linear_net(&ns).unwrap();
        for _ in 0..5 {
            let v = rng.normal_vec(64);
            let out = net.evaluate(&v).unwrap();
            assert!(rel_err(&out, &a.matvec(&v)) < 1e-10);
        }
    }

    #[test]
    fn linear_net_matches_banded_apply_when_truncated() {
        let mut rng = Stream::new(62);
        let f = make_filters(3).unwrap();
        let a = DenseMatrix::new(1, 6, rng.normal_vec(64 * 64)).unwrap();
        for n_b in [3usize, 5, 9] {
            let ns = decompose_operator(&a, &f, 3, n_b).unwrap();
            let net = build_linear_net(&ns).unwrap();
            for _ in 0..5 {
                let v = rng.normal_vec(64);
                let out = net.evaluate(&v).unwrap();
                let want = apply(&ns, &v).unwrap();
                assert!(rel_err(&out, &want) < 1e-12, "n_b={n_b}");
            }
        }
    }

    #[test]
    fn linear_net_matches_banded_apply_2d() {
        let mut rng = Stream::new(63);
        let f = make_filters(1).unwrap();
        let a = DenseMatrix::new(2, 3, rng.normal_vec(64 * 64)).unwrap();
        for n_b in [3usize, full_band(3)] {
            let ns = decompose_operator(&a, &f, 1, n_b).unwrap();
            let net = build_linear_net(&ns).unwrap();
            for _ in 0..3 {
                let v = rng.normal_vec(64);
                let out = net.evaluate(&v).unwrap();
                let want = apply(&ns, &v).unwrap();
                assert!(rel_err(&out, &want) < 1e-12, "n_b={n_b}");
            }
        }
    }

    #[test]
    fn degenerate_bcrnet_contains_the_linear_net_bitwise() {
        let mut rng = Stream::new(64);
        let f = make_filters(2).unwrap();
        let a = DenseMatrix::new(1, 5, rng.normal_vec(32 * 32)).unwrap();
        let ns = decompose_operator(&a, &f, 2, 5).unwrap();
        let linear = build_linear_net(&ns).unwrap();
        let cfg = NetConfig {
            dim: 1,
            order: 2,
            finest: 5,
            coarsest: 2,
            band_width: 5,
            channels: 1,
            depth: 1,
            mode: Mode::Lc,
            activation: Activation::Id,
            transform_init: TransformInit::Wavelet,
            transform_trainable: true,
        };
        let mut net = build_bcrnet(&cfg, 999).unwrap();
        load_nonstandard_weights(&mut net, &ns).unwrap();
        let v = rng.normal_vec(32);
        let a_out = linear.evaluate(&v).unwrap();
        let b_out = net.evaluate(&v).unwrap();
        for (x, y) in a_out.iter().zip(&b_out) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn intermediate_shapes_follow_the_schedule() {
        let cfg = base_cfg();
        let net = build_bcrnet(&cfg, 7).unwrap();
        let mut rng = Stream::new(65);
        let x = Tensor::from_1d(64, 1, rng.normal_vec(64)).unwrap();
        let trace = net.forward_trace(&x).unwrap();
        let nlev = cfg.scale_count();
        for i in 0..nlev {
            let extent = 1usize << (cfg.coarsest + i);
            assert_eq!(trace.xi[i].spatial(), &[extent]);
            assert_eq!(trace.xi[i].channels(), 2 * cfg.channels);
            assert_eq!(trace.v[i].spatial(), &[extent]);
            assert_eq!(trace.v[i].channels(), cfg.channels);
            assert_eq!(trace.u[i + 1].spatial(), &[extent * 2]);
            assert_eq!(trace.u[i + 1].channels(), cfg.channels);
        }
        assert_eq!(trace.output.spatial(), &[64]);
        assert_eq!(trace.output.channels(), 1);
    }

    #[test]
    fn conv_mode_is_shift_equivariant_lc_mode_is_not() {
        let mut cfg = base_cfg();
        cfg.mode = Mode::ConvEquivariant;
        cfg.transform_init = TransformInit::Random;
        let net = build_bcrnet(&cfg, 11).unwrap();
        let mut rng = Stream::new(66);
        let x = Tensor::from_1d(64, 1, rng.normal_vec(64)).unwrap();
        let s = cfg.shift_granularity();
        let shifted_out = net.forward(&x.shift_cyclic(s)).unwrap();
        let out_shifted = net.forward(&x).unwrap().shift_cyclic(s);
        let dev = shifted_out
            .data()
            .iter()
            .zip(out_shifted.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev <= 1e-12, "conv mode deviation {dev}");

        let mut cfg = base_cfg();
        cfg.mode = Mode::Lc;
        cfg.transform_init = TransformInit::Random;
        let net = build_bcrnet(&cfg, 11).unwrap();
        let shifted_out = net.forward(&x.shift_cyclic(s)).unwrap();
        let out_shifted = net.forward(&x).unwrap().shift_cyclic(s);
        let dev = shifted_out
            .data()
            .iter()
            .zip(out_shifted.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(dev >= 1e-3, "lc mode should break equivariance, witness {dev}");
    }

    #[test]
    fn param_count_matches_worked_values() {
        // linear translation: L=6, L0=2, p=3, band 3 -> 832 weights
        let linear_cfg = NetConfig {
            dim: 1,
            order: 3,
            finest: 6,
            coarsest: 2,
            band_width: 3,
            channels: 1,
            depth: 1,
            mode: Mode::Lc,
            activation: Activation::Id,
            transform_init: TransformInit::Wavelet,
            transform_trainable: false,
        };
        assert_eq!(param_count(&linear_cfg).0, 832);
        // deep variant: alpha=2, K=5 -> 15104 weights
        let deep_cfg = NetConfig {
            channels: 2,
            depth: 5,
            activation: Activation::Relu,
            ..linear_cfg
        };
        assert_eq!(param_count(&deep_cfg).0, 15104);
    }

    #[test]
    fn param_count_equals_built_tally() {
        let mut rng = Stream::new(67);
        for dim in [1usize, 2] {
            for mode in [Mode::Lc, Mode::ConvEquivariant] {
                for _ in 0..5 {
                    let order = 1 + (rng.below(3) as usize); // p in 1..=3
                    let min_coarse = if order == 1 { 1 } else { 2 + (order > 2) as usize };
                    let coarsest = min_coarse + (rng.below(2) as usize);
                    let finest = coarsest + 1 + (rng.below(if dim == 1 { 3 } else { 2 }) as usize);
                    let cfg = NetConfig {
                        dim,
                        order,
                        finest,
                        coarsest,
                        band_width: 1 + 2 * (rng.below(3) as usize),
                        channels: 1 + (rng.below(3) as usize),
                        depth: 1 + (rng.below(3) as usize),
                        mode,
                        activation: Activation::Relu,
                        transform_init: TransformInit::Random,
                        transform_trainable: true,
                    };
                    let net = build_bcrnet(&cfg, rng.next_u64()).unwrap();
                    let (weights, biases) = net.weight_tally();
                    let (fw, fb) = param_count(&cfg);
                    assert_eq!(weights, fw, "{cfg:?}");
                    assert_eq!(biases, fb, "{cfg:?}");
                }
            }
        }
    }

    #[test]
    fn lc_layer_loaded_from_bands_matches_the_block_products() {
        use crate::wavelet::forward_step;
        let mut rng = Stream::new(69);
        let f = make_filters(2).unwrap();
        let a = DenseMatrix::new(1, 5, rng.normal_vec(32 * 32)).unwrap();
        let ns = decompose_operator(&a, &f, 2, full_band(5)).unwrap();
        let net = build_linear_net(&ns).unwrap();
        // feed the finest-level channel pair through the loaded layer
        let v = rng.normal_vec(32);
        let (d, s) = forward_step(&v, &f).unwrap();
        let level_idx = ns.levels().len() - 1;
        let lv = &ns.levels()[level_idx];
        let side = 1usize << lv.level;
        let mut x = Tensor::zeros(vec![side], 2);
        for k in 0..side {
            x.data_mut()[2 * k] = d[k];
            x.data_mut()[2 * k + 1] = s[k];
        }
        let out = net.stacks[level_idx][0].forward(&x).unwrap();
        let mut s_want = vec![0.0; side];
        let mut w_want = vec![0.0; side];
        let mut flops = 0u64;
        lv.blocks[0].matvec_accum(&d, &mut s_want, &mut flops);
        lv.blocks[1].matvec_accum(&s, &mut s_want, &mut flops);
        lv.blocks[2].matvec_accum(&d, &mut w_want, &mut flops);
        for k in 0..side {
            assert!((out.data()[out.idx1(k, 0)] - s_want[k]).abs() < 1e-12);
            assert!((out.data()[out.idx1(k, 1)] - w_want[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn interleave_adjoint_helpers_round_trip() {
        let mut rng = Stream::new(68);
        let x = Tensor::from_1d(8, 4, rng.normal_vec(32)).unwrap();
        let y = interleave(&x, 2).unwrap();
        let back = de_interleave(&y, 2).unwrap();
        assert_eq!(back, x);
    }
}
