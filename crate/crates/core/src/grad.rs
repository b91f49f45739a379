//! Reverse-mode gradients for the layer vocabulary, the Nadam optimizer,
//! and a deterministic mini-batch training loop.
//!
//! Gradients are computed layer by layer as exact transposes of the forward
//! maps: windowed layers accumulate into their taps with the same periodic
//! wrap, the dense layer applies the transposed mixing matrix, the channel
//! interleave is a permutation. Activations differentiate through their
//! outputs (ReLU sub-gradient at 0 is 0). Batch accumulation is an ordered
//! reduction over the sample index, so a fixed seed reproduces a training
//! trajectory bitwise on one thread.

use crate::apps::{relative_l2, TaskSample};
use crate::bcrnet::{build_bcrnet, NetConfig, NetError, Network, Trace};
use crate::layers::{de_interleave, LayerError, LayerKind, LayerSpec, Tensor};
use crate::rng::Stream;
use std::fmt;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub enum GradError {
    ShapeMismatch { expected: String, got: String },
    NonFiniteGradient { name: String },
    EmptyDataset,
    Net(String),
    Layer(String),
}

impl fmt::Display for GradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GradError::ShapeMismatch { expected, got } => {
                write!(f, "gradient shape mismatch: expected {expected}, got {got}")
            }
            GradError::NonFiniteGradient { name } => {
                write!(f, "non-finite gradient in parameter '{name}'")
            }
            GradError::EmptyDataset => write!(f, "training requires a non-empty dataset"),
            GradError::Net(msg) | GradError::Layer(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for GradError {}

impl From<NetError> for GradError {
    fn from(e: NetError) -> Self {
        GradError::Net(e.to_string())
    }
}

impl From<LayerError> for GradError {
    fn from(e: LayerError) -> Self {
        GradError::Layer(e.to_string())
    }
}

/// Weight and bias gradients of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    fn zeros_like(layer: &LayerSpec) -> Self {
        LayerGrads { weights: vec![0.0; layer.weights.len()], bias: vec![0.0; layer.bias.len()] }
    }
}

/// Backward pass of a single layer: gradients of the loss with respect to
/// the input, weights, and bias, given the recorded input/output pair and
/// the upstream gradient.
pub fn layer_backward(
    layer: &LayerSpec,
    input: &Tensor,
    output: &Tensor,
    upstream: &Tensor,
) -> Result<(Tensor, LayerGrads), GradError> {
    if upstream.spatial() != output.spatial() || upstream.channels() != output.channels() {
        return Err(GradError::ShapeMismatch {
            expected: format!("{:?} x {}", output.spatial(), output.channels()),
            got: format!("{:?} x {}", upstream.spatial(), upstream.channels()),
        });
    }
    // pre-activation gradient
    let mut dpre = upstream.clone();
    for (g, y) in dpre.data_mut().iter_mut().zip(output.data()) {
        *g *= layer.activation.derivative_from_output(*y);
    }
    let mut grads = LayerGrads::zeros_like(layer);
    let mut dx = Tensor::zeros(input.spatial().to_vec(), input.channels());
    match (layer.kind, layer.dim) {
        (LayerKind::Dense, _) => {
            let n = input.positions();
            let (a_in, a_out) = (layer.alpha_in, layer.alpha_out);
            let cols = n * a_in;
            for i in 0..n {
                for cp in 0..a_out {
                    let g = dpre.data()[i * a_out + cp];
                    if g == 0.0 {
                        continue;
                    }
                    grads.bias[cp] += g;
                    let row = (i * a_out + cp) * cols;
                    for jc in 0..cols {
                        grads.weights[row + jc] += g * input.data()[jc];
                        dx.data_mut()[jc] += layer.weights[row + jc] * g;
                    }
                }
            }
        }
        (_, 1) => {
            let n_in = layer.extent_in;
            let n_out = layer.extent_out();
            let (w, a_in, a_out) = (layer.window, layer.alpha_in, layer.alpha_out);
            let per_position = w * a_out * a_in;
            for i in 0..n_out {
                let wbase = match layer.kind {
                    LayerKind::Conv => 0,
                    _ => i * per_position,
                };
                let base = i as i64 * layer.stride as i64 + layer.offset;
                for cp in 0..a_out {
                    let g = dpre.data()[i * a_out + cp];
                    if g == 0.0 {
                        continue;
                    }
                    match layer.kind {
                        LayerKind::Conv => grads.bias[cp] += g,
                        _ => grads.bias[i * a_out + cp] += g,
                    }
                    for m in 0..w {
                        let j = (base + m as i64).rem_euclid(n_in as i64) as usize;
                        let wrow = wbase + (m * a_out + cp) * a_in;
                        for c in 0..a_in {
                            grads.weights[wrow + c] += g * input.data()[j * a_in + c];
                            dx.data_mut()[j * a_in + c] += layer.weights[wrow + c] * g;
                        }
                    }
                }
            }
        }
        (_, 2) => {
            let n_in = layer.extent_in;
            let n_out = layer.extent_out();
            let (w, a_in, a_out) = (layer.window, layer.alpha_in, layer.alpha_out);
            let per_position = w * w * a_out * a_in;
            for i1 in 0..n_out {
                for i2 in 0..n_out {
                    let pos = i1 * n_out + i2;
                    let wbase = match layer.kind {
                        LayerKind::Conv => 0,
                        _ => pos * per_position,
                    };
                    let b1 = i1 as i64 * layer.stride as i64 + layer.offset;
                    let b2 = i2 as i64 * layer.stride as i64 + layer.offset;
                    for cp in 0..a_out {
                        let g = dpre.data()[pos * a_out + cp];
                        if g == 0.0 {
                            continue;
                        }
                        match layer.kind {
                            LayerKind::Conv => grads.bias[cp] += g,
                            _ => grads.bias[pos * a_out + cp] += g,
                        }
                        for m1 in 0..w {
                            let j1 = (b1 + m1 as i64).rem_euclid(n_in as i64) as usize;
                            for m2 in 0..w {
                                let j2 = (b2 + m2 as i64).rem_euclid(n_in as i64) as usize;
                                let wrow = wbase + ((m1 * w + m2) * a_out + cp) * a_in;
                                let xrow = (j1 * n_in + j2) * a_in;
                                for c in 0..a_in {
                                    grads.weights[wrow + c] += g * input.data()[xrow + c];
                                    dx.data_mut()[xrow + c] += layer.weights[wrow + c] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => {
            return Err(GradError::Layer(format!("unsupported layer dim {}", layer.dim)));
        }
    }
    Ok((dx, grads))
}

/// Gradients of a whole network, mirroring its layer layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub down: Vec<LayerGrads>,
    pub coarse: Vec<LayerGrads>,
    pub stacks: Vec<Vec<LayerGrads>>,
    pub up: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Gradients {
            down: net.down.iter().map(LayerGrads::zeros_like).collect(),
            coarse: net.coarse.iter().map(LayerGrads::zeros_like).collect(),
            stacks: net
                .stacks
                .iter()
                .map(|s| s.iter().map(LayerGrads::zeros_like).collect())
                .collect(),
            up: net.up.iter().map(LayerGrads::zeros_like).collect(),
        }
    }

    /// Flat view in the canonical layer order (down, coarse, stacks, up).
    pub fn flat(&self) -> Vec<&LayerGrads> {
        let mut out: Vec<&LayerGrads> = self.down.iter().collect();
        out.extend(self.coarse.iter());
        for s in &self.stacks {
            out.extend(s.iter());
        }
        out.extend(self.up.iter());
        out
    }

    fn flat_mut(&mut self) -> Vec<&mut LayerGrads> {
        let mut out: Vec<&mut LayerGrads> = self.down.iter_mut().collect();
        out.extend(self.coarse.iter_mut());
        for s in &mut self.stacks {
            out.extend(s.iter_mut());
        }
        out.extend(self.up.iter_mut());
        out
    }

    /// Ordered accumulation `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, src) in self.flat_mut().into_iter().zip(other.flat()) {
            for (a, b) in dst.weights.iter_mut().zip(&src.weights) {
                *a += b;
            }
            for (a, b) in dst.bias.iter_mut().zip(&src.bias) {
                *a += b;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.flat_mut() {
            for a in g.weights.iter_mut() {
                *a *= factor;
            }
            for a in g.bias.iter_mut() {
                *a *= factor;
            }
        }
    }
}

/// Gradient of the upstream with respect to the channel mean.
fn channel_mean_backward(upstream: &Tensor, channels: usize) -> Tensor {
    let mut out = Tensor::zeros(upstream.spatial().to_vec(), channels);
    let inv = 1.0 / channels as f64;
    for pos in 0..upstream.positions() {
        let g = upstream.data()[pos] * inv;
        for c in 0..channels {
            out.data_mut()[pos * channels + c] = g;
        }
    }
    out
}

/// Zero-pad a gradient into the last `k` channels of a wider tensor.
fn pad_into_last_channels(grad: &Tensor, total_channels: usize) -> Tensor {
    let k = grad.channels();
    let mut out = Tensor::zeros(grad.spatial().to_vec(), total_channels);
    for pos in 0..grad.positions() {
        for j in 0..k {
            out.data_mut()[pos * total_channels + (total_channels - k) + j] =
                grad.data()[pos * k + j];
        }
    }
    out
}

fn take_last_channels_grad(full: &Tensor, k: usize) -> Tensor {
    let c = full.channels();
    let mut out = Tensor::zeros(full.spatial().to_vec(), k);
    for pos in 0..full.positions() {
        for j in 0..k {
            out.data_mut()[pos * k + j] = full.data()[pos * c + (c - k) + j];
        }
    }
    out
}

/// Reverse-mode pass over a recorded forward trace: returns the gradient
/// with respect to the network input and all parameter gradients.
pub fn backward(
    net: &Network,
    trace: &Trace,
    upstream: &Tensor,
) -> Result<(Tensor, Gradients), GradError> {
    let cfg = &net.cfg;
    let nlev = cfg.scale_count();
    let alpha = cfg.channels;
    let factor = cfg.groups();
    if upstream.spatial() != trace.output.spatial() || upstream.channels() != 1 {
        return Err(GradError::ShapeMismatch {
            expected: format!("{:?} x 1", trace.output.spatial()),
            got: format!("{:?} x {}", upstream.spatial(), upstream.channels()),
        });
    }
    let mut grads = Gradients::zeros_like(net);
    // adjoint of the final channel mean
    let mut du = channel_mean_backward(upstream, alpha);
    // upward levels, walked in reverse
    let mut dxi: Vec<Option<Tensor>> = vec![None; nlev];
    for i in (0..nlev).rev() {
        let d_synth = de_interleave(&du, factor)?;
        let (d_chi, g_up) =
            layer_backward(&net.up[i], &trace.chi[i], &trace.synth_out[i], &d_synth)?;
        grads.up[i] = g_up;
        // adjoint of the injection: the coarser output sees the last alpha
        // channels, the stack sees everything
        du = take_last_channels_grad(&d_chi, alpha);
        let mut dz = d_chi;
        for k in (0..net.stacks[i].len()).rev() {
            let (input, output) = &trace.stack_io[i][k];
            let (dnext, g) = layer_backward(&net.stacks[i][k], input, output, &dz)?;
            grads.stacks[i][k] = g;
            dz = dnext;
        }
        dxi[i] = Some(dz);
    }
    // coarse tower
    for k in (0..net.coarse.len()).rev() {
        let (input, output) = &trace.coarse_io[k];
        let (dnext, g) = layer_backward(&net.coarse[k], input, output, &du)?;
        grads.coarse[k] = g;
        du = dnext;
    }
    // downward chain: dv[0] = du, then ascend the levels
    let mut dv = du;
    for i in 0..nlev {
        let mut dxi_total = dxi[i].take().expect("level gradient");
        let pad = pad_into_last_channels(&dv, dxi_total.channels());
        for (a, b) in dxi_total.data_mut().iter_mut().zip(pad.data()) {
            *a += b;
        }
        let (dnext, g_down) =
            layer_backward(&net.down[i], &trace.v[i + 1], &trace.xi[i], &dxi_total)?;
        grads.down[i] = g_down;
        dv = dnext;
    }
    // adjoint of the channel replication: sum over copies
    let mut dinput = Tensor::zeros(trace.input.spatial().to_vec(), 1);
    for pos in 0..dinput.positions() {
        let mut acc = 0.0;
        for a in 0..alpha {
            acc += dv.data()[pos * alpha + a];
        }
        dinput.data_mut()[pos] = acc;
    }
    Ok((dinput, grads))
}

/// Mean squared error and its gradient `2 (pred - target) / count`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let count = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; pred.len()];
    for i in 0..pred.len() {
        let d = pred[i] - target[i];
        loss += d * d;
        grad[i] = 2.0 * d / count;
    }
    (loss / count, grad)
}

/// Nadam state: per-parameter first/second moments plus hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<LayerGrads>,
    v: Vec<LayerGrads>,
}

impl OptimizerState {
    pub fn new(net: &Network, lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        let zeros: Vec<LayerGrads> =
            net.layers().iter().map(|l| LayerGrads::zeros_like(l)).collect();
        OptimizerState { step: 0, lr, beta1, beta2, epsilon, m: zeros.clone(), v: zeros }
    }
}

/// One Nadam update of a parameter slice: Adam moment estimates with the
/// Nesterov look-ahead applied to the first moment.
fn nadam_update(
    params: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let g_hat = g / bc1;
        let v_hat = v[i] / bc2;
        let lookahead = beta1 * m_hat + (1.0 - beta1) * g_hat;
        params[i] -= lr * lookahead / (v_hat.sqrt() + epsilon);
    }
}

/// Apply one optimizer step to every trainable layer. Errors on non-finite
/// gradients, naming the offending parameter tensor.
pub fn nadam_step(
    state: &mut OptimizerState,
    net: &mut Network,
    grads: &Gradients,
) -> Result<(), GradError> {
    state.step += 1;
    let t = state.step;
    let names = net.layer_names();
    let trainable: Vec<bool> = (0..names.len()).map(|i| net.layer_trainable(i)).collect();
    let layers = net.layers_mut();
    let flat = grads.flat();
    for (idx, layer) in layers.into_iter().enumerate() {
        let g = flat[idx];
        for (what, gv) in [("weights", &g.weights), ("bias", &g.bias)] {
            if gv.iter().any(|x| !x.is_finite()) {
                return Err(GradError::NonFiniteGradient {
                    name: format!("{}.{}", names[idx], what),
                });
            }
        }
        if !trainable[idx] {
            continue;
        }
        nadam_update(
            &mut layer.weights,
            &g.weights,
            &mut state.m[idx].weights,
            &mut state.v[idx].weights,
            t,
            state.lr,
            state.beta1,
            state.beta2,
            state.epsilon,
        );
        nadam_update(
            &mut layer.bias,
            &g.bias,
            &mut state.m[idx].bias,
            &mut state.v[idx].bias,
            t,
            state.lr,
            state.beta1,
            state.beta2,
            state.epsilon,
        );
    }
    Ok(())
}

/// Training hyperparameters. `batch_size = None` uses two percent of the
/// training set (at least one sample).
#[derive(Debug, Clone)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Stop after this many optimizer steps regardless of epochs.
    pub max_steps: Option<usize>,
    /// Per-step multiplicative learning-rate decay (1.0 = constant).
    pub lr_decay: f64,
}

impl TrainSchedule {
    pub fn new(epochs: usize, lr: f64) -> Self {
        TrainSchedule {
            epochs,
            batch_size: None,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_steps: None,
            lr_decay: 1.0,
        }
    }
}

/// Per-epoch record emitted by [`train_loop`].
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_eps: f64,
    pub test_eps: f64,
    pub loss: f64,
    pub wall_time_s: f64,
}

/// Mean relative l2 error of the network over a sample set.
pub fn mean_relative_error(net: &Network, samples: &[TaskSample]) -> Result<f64, GradError> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut acc = 0.0;
    for s in samples {
        let pred = net.evaluate(&s.input)?;
        acc += relative_l2(&pred, &s.target);
    }
    Ok(acc / samples.len() as f64)
}

fn input_tensor(cfg: &NetConfig, field: &[f64]) -> Result<Tensor, GradError> {
    let e = cfg.extent();
    let t = match cfg.dim {
        1 => Tensor::from_1d(e, 1, field.to_vec())?,
        _ => Tensor::from_2d(e, e, 1, field.to_vec())?,
    };
    Ok(t)
}

/// Affine standardization of inputs and targets, fitted on the training
/// split. Fields are scalars: one shift/scale per side, not per position.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub input_shift: f64,
    pub input_scale: f64,
    pub target_shift: f64,
    pub target_scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization { input_shift: 0.0, input_scale: 1.0, target_shift: 0.0, target_scale: 1.0 }
    }

    /// Scalar mean/std over all entries of the samples' inputs and targets.
    pub fn fit(samples: &[TaskSample]) -> Self {
        let stats = |take: &dyn Fn(&TaskSample) -> &[f64]| -> (f64, f64) {
            let mut n = 0usize;
            let mut mean = 0.0;
            for s in samples {
                for v in take(s) {
                    mean += v;
                    n += 1;
                }
            }
            mean /= n.max(1) as f64;
            let mut var = 0.0;
            for s in samples {
                for v in take(s) {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= n.max(1) as f64;
            (mean, var.sqrt().max(1e-300))
        };
        let (im, is) = stats(&|s: &TaskSample| &s.input);
        let (tm, ts) = stats(&|s: &TaskSample| &s.target);
        Normalization { input_shift: im, input_scale: is, target_shift: tm, target_scale: ts }
    }

    pub fn normalize_samples(&self, samples: &[TaskSample]) -> Vec<TaskSample> {
        samples
            .iter()
            .map(|s| TaskSample {
                input: s.input.iter().map(|v| (v - self.input_shift) / self.input_scale).collect(),
                target: s
                    .target
                    .iter()
                    .map(|v| (v - self.target_shift) / self.target_scale)
                    .collect(),
            })
            .collect()
    }
}

/// A network together with the standardization it was trained under;
/// prediction maps raw fields to raw fields.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub net: Network,
    pub norm: Normalization,
}

impl TrainedModel {
    pub fn predict(&self, raw_input: &[f64]) -> Result<Vec<f64>, GradError> {
        let x: Vec<f64> = raw_input
            .iter()
            .map(|v| (v - self.norm.input_shift) / self.norm.input_scale)
            .collect();
        let mut out = self.net.evaluate(&x)?;
        for v in out.iter_mut() {
            *v = *v * self.norm.target_scale + self.norm.target_shift;
        }
        Ok(out)
    }

    /// Mean relative l2 error against raw samples.
    pub fn mean_error(&self, samples: &[TaskSample]) -> Result<f64, GradError> {
        if samples.is_empty() {
            return Ok(f64::NAN);
        }
        let mut acc = 0.0;
        for s in samples {
            let pred = self.predict(&s.input)?;
            acc += relative_l2(&pred, &s.target);
        }
        Ok(acc / samples.len() as f64)
    }
}

/// Fit a model end to end: optionally standardize on the training split,
/// train, and report the per-epoch metrics in original units.
pub fn fit_model(
    cfg: &NetConfig,
    train: &[TaskSample],
    test: &[TaskSample],
    schedule: &TrainSchedule,
    seed: u64,
    normalize: bool,
) -> Result<(TrainedModel, Vec<EpochMetrics>), GradError> {
    if train.is_empty() {
        return Err(GradError::EmptyDataset);
    }
    let norm = if normalize { Normalization::fit(train) } else { Normalization::identity() };
    let norm_train = norm.normalize_samples(train);
    let net = build_bcrnet(cfg, seed)?;
    let mut model = TrainedModel { net, norm };
    let raw_history = train_with_callback(&mut model.net, &norm_train, schedule, seed, |net, epoch, loss, wall| {
        let probe = TrainedModel { net: net.clone(), norm: model.norm.clone() };
        Ok(EpochMetrics {
            epoch,
            train_eps: probe.mean_error(train)?,
            test_eps: probe.mean_error(test)?,
            loss,
            wall_time_s: wall,
        })
    })?;
    Ok((model, raw_history))
}

/// Shared epoch driver: runs the batched updates and lets the caller build
/// the per-epoch record (so metrics can be computed in original units).
fn train_with_callback<F>(
    net: &mut Network,
    train: &[TaskSample],
    schedule: &TrainSchedule,
    seed: u64,
    mut record: F,
) -> Result<Vec<EpochMetrics>, GradError>
where
    F: FnMut(&Network, usize, f64, f64) -> Result<EpochMetrics, GradError>,
{
    let cfg = net.cfg.clone();
    let batch = schedule
        .batch_size
        .unwrap_or_else(|| ((train.len() * 2) / 100).max(1))
        .clamp(1, train.len());
    let mut state =
        OptimizerState::new(net, schedule.lr, schedule.beta1, schedule.beta2, schedule.epsilon);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = Stream::new(seed ^ 0x5875_66f1_e2a3_90cd);
    let start = Instant::now();
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut steps_done = 0usize;
    'epochs: for epoch in 0..schedule.epochs {
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let mut grads = Gradients::zeros_like(net);
            let mut batch_loss = 0.0;
            let inv_batch = 1.0 / chunk.len() as f64;
            for &idx in chunk {
                let sample = &train[idx];
                let x = input_tensor(&cfg, &sample.input)?;
                let trace = net.forward_trace(&x)?;
                let (loss, mut dout) = mse_loss(trace.output.data(), &sample.target);
                batch_loss += loss * inv_batch;
                for g in dout.iter_mut() {
                    *g *= inv_batch;
                }
                let upstream = Tensor::new(trace.output.spatial().to_vec(), 1, dout)?;
                let (_, sample_grads) = backward(net, &trace, &upstream)?;
                grads.accumulate(&sample_grads);
            }
            nadam_step(&mut state, net, &grads)?;
            state.lr *= schedule.lr_decay;
            epoch_loss += batch_loss;
            batches += 1;
            steps_done += 1;
            if let Some(max) = schedule.max_steps {
                if steps_done >= max {
                    let loss = epoch_loss / batches as f64;
                    history.push(record(net, epoch, loss, start.elapsed().as_secs_f64())?);
                    break 'epochs;
                }
            }
        }
        let loss = epoch_loss / batches.max(1) as f64;
        history.push(record(net, epoch, loss, start.elapsed().as_secs_f64())?);
    }
    Ok(history)
}

/// Build a network from the config and train it with shuffled mini-batches.
/// Returns the trained network and the per-epoch metric history. Fixed seed
/// and data order reproduce the trajectory bitwise.
pub fn train_loop(
    cfg: &NetConfig,
    train: &[TaskSample],
    test: &[TaskSample],
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<(Network, Vec<EpochMetrics>), GradError> {
    if train.is_empty() {
        return Err(GradError::EmptyDataset);
    }
    let mut net = build_bcrnet(cfg, seed)?;
    let metrics = train_network(&mut net, train, test, schedule, seed)?;
    Ok((net, metrics))
}

/// Train an already-built network in place; metrics are computed on the
/// samples as given.
pub fn train_network(
    net: &mut Network,
    train: &[TaskSample],
    test: &[TaskSample],
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<Vec<EpochMetrics>, GradError> {
    if train.is_empty() {
        return Err(GradError::EmptyDataset);
    }
    train_with_callback(net, train, schedule, seed, |net, epoch, loss, wall| {
        Ok(EpochMetrics {
            epoch,
            train_eps: mean_relative_error(net, train)?,
            test_eps: mean_relative_error(net, test)?,
            loss,
            wall_time_s: wall,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::{make_dataset, TaskKind};
    use crate::bcrnet::{Mode, TransformInit};
    use crate::layers::Activation;

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            dim: 1,
            order: 2,
            finest: 5,
            coarsest: 2,
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
    fn dense_identity_layer_gradient_is_outer_product() {
        let mut rng = Stream::new(90);
        let n = 4;
        let mut layer = LayerSpec::dense(1, n, 1, 1, Activation::Id).unwrap();
        layer.weights = rng.normal_vec(n * n);
        let x = Tensor::from_1d(n, 1, rng.normal_vec(n)).unwrap();
        let y = layer.forward(&x).unwrap();
        let up = Tensor::from_1d(n, 1, rng.normal_vec(n)).unwrap();
        let (_, grads) = layer_backward(&layer, &x, &y, &up).unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = up.data()[i] * x.data()[j];
                assert!((grads.weights[i * n + j] - want).abs() < 1e-14);
            }
        }
    }

    /// Central-difference check of d(loss)/d(theta) for every parameter of a
    /// single layer, where loss = <probe, layer(x)>.
    fn check_layer_gradient(layer: &LayerSpec, x: &Tensor, tol: f64) {
        let mut rng = Stream::new(91);
        let y = layer.forward(x).unwrap();
        let probe = Tensor::new(y.spatial().to_vec(), y.channels(), rng.normal_vec(y.data().len()))
            .unwrap();
        let (dx, grads) = layer_backward(layer, x, &y, &probe).unwrap();
        let delta = 1e-6;
        let loss = |l: &LayerSpec, xv: &Tensor| -> f64 {
            let out = l.forward(xv).unwrap();
            out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        // 20 random parameter directions + input directions
        for _ in 0..20 {
            let which = rng.below(3);
            match which {
                0 => {
                    let i = rng.below(layer.weights.len() as u64) as usize;
                    let mut lp = layer.clone();
                    let mut lm = layer.clone();
                    lp.weights[i] += delta;
                    lm.weights[i] -= delta;
                    let fd = (loss(&lp, x) - loss(&lm, x)) / (2.0 * delta);
                    let an = grads.weights[i];
                    let denom = fd.abs().max(an.abs()).max(1e-3);
                    assert!(((fd - an) / denom).abs() < tol, "weight {i}: fd {fd} an {an}");
                }
                1 => {
                    if layer.bias.is_empty() {
                        continue;
                    }
                    let i = rng.below(layer.bias.len() as u64) as usize;
                    let mut lp = layer.clone();
                    let mut lm = layer.clone();
                    lp.bias[i] += delta;
                    lm.bias[i] -= delta;
                    let fd = (loss(&lp, x) - loss(&lm, x)) / (2.0 * delta);
                    let an = grads.bias[i];
                    let denom = fd.abs().max(an.abs()).max(1e-3);
                    assert!(((fd - an) / denom).abs() < tol, "bias {i}: fd {fd} an {an}");
                }
                _ => {
                    let i = rng.below(x.data().len() as u64) as usize;
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp.data_mut()[i] += delta;
                    xm.data_mut()[i] -= delta;
                    let fd = (loss(layer, &xp) - loss(layer, &xm)) / (2.0 * delta);
                    let an = dx.data()[i];
                    let denom = fd.abs().max(an.abs()).max(1e-3);
                    assert!(((fd - an) / denom).abs() < tol, "input {i}: fd {fd} an {an}");
                }
            }
        }
    }

    #[test]
    fn every_layer_kind_passes_central_differences() {
        let mut rng = Stream::new(92);
        for act in [Activation::Id, Activation::Relu, Activation::Sigmoid] {
            for kind in [LayerKind::Conv, LayerKind::Lc, LayerKind::Dense] {
                let n = 8;
                let mut layer = match kind {
                    LayerKind::Conv => LayerSpec::conv(1, n, 2, 3, 3, 1, -1, act).unwrap(),
                    LayerKind::Lc => LayerSpec::lc(1, n, 2, 3, 3, 2, -1, act).unwrap(),
                    LayerKind::Dense => LayerSpec::dense(1, n, 2, 2, act).unwrap(),
                };
                layer.weights = rng.normal_vec(layer.weights.len());
                layer.bias = rng.normal_vec(layer.bias.len());
                let x = Tensor::from_1d(n, 2, rng.normal_vec(n * 2)).unwrap();
                check_layer_gradient(&layer, &x, 1e-6);
            }
        }
    }

    #[test]
    fn two_dimensional_layers_pass_central_differences() {
        let mut rng = Stream::new(93);
        for kind in [LayerKind::Conv, LayerKind::Lc] {
            let n = 4;
            let mut layer = if kind == LayerKind::Conv {
                LayerSpec::conv(2, n, 2, 2, 3, 1, -1, Activation::Sigmoid).unwrap()
            } else {
                LayerSpec::lc(2, n, 2, 2, 3, 2, -1, Activation::Relu).unwrap()
            };
            layer.weights = rng.normal_vec(layer.weights.len());
            layer.bias = rng.normal_vec(layer.bias.len());
            let x = Tensor::from_2d(n, n, 2, rng.normal_vec(n * n * 2)).unwrap();
            check_layer_gradient(&layer, &x, 1e-6);
        }
    }

    #[test]
    fn whole_network_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let net = build_bcrnet(&cfg, 5).unwrap();
        let mut rng = Stream::new(94);
        let x = Tensor::from_1d(32, 1, rng.normal_vec(32)).unwrap();
        let probe = rng.normal_vec(32);
        let loss_of = |n: &Network| -> f64 {
            let out = n.forward(&x).unwrap();
            out.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let trace = net.forward_trace(&x).unwrap();
        let upstream = Tensor::from_1d(32, 1, probe.clone()).unwrap();
        let (dinput, grads) = backward(&net, &trace, &upstream).unwrap();
        let flat = grads.flat();
        let names = net.layer_names();
        let delta = 1e-6;
        for _ in 0..30 {
            let lidx = rng.below(names.len() as u64) as usize;
            let g = flat[lidx];
            if g.weights.is_empty() {
                continue;
            }
            let widx = rng.below(g.weights.len() as u64) as usize;
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.layers_mut()[lidx].weights[widx] += delta;
            minus.layers_mut()[lidx].weights[widx] -= delta;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * delta);
            let an = g.weights[widx];
            let denom = fd.abs().max(an.abs()).max(1e-3);
            assert!(((fd - an) / denom).abs() < 1e-6, "{} [{widx}]: fd {fd} an {an}", names[lidx]);
        }
        // input gradient too
        for _ in 0..10 {
            let i = rng.below(32) as usize;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += delta;
            xm.data_mut()[i] -= delta;
            let net_ref = &net;
            let fd = {
                let a: f64 = net_ref
                    .forward(&xp)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(&probe)
                    .map(|(u, v)| u * v)
                    .sum();
                let b: f64 = net_ref
                    .forward(&xm)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(&probe)
                    .map(|(u, v)| u * v)
                    .sum();
                (a - b) / (2.0 * delta)
            };
            let an = dinput.data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-3);
            assert!(((fd - an) / denom).abs() < 1e-6);
        }
    }

    #[test]
    fn three_layer_chain_rule_matches_end_to_end_differences() {
        let mut rng = Stream::new(96);
        let n = 8;
        let mut conv = LayerSpec::conv(1, n, 1, 2, 3, 1, -1, Activation::Sigmoid).unwrap();
        let mut lc = LayerSpec::lc(1, n, 2, 2, 3, 1, -1, Activation::Relu).unwrap();
        let mut dense = LayerSpec::dense(1, n, 2, 1, Activation::Id).unwrap();
        for l in [&mut conv, &mut lc, &mut dense] {
            l.weights = rng.normal_vec(l.weights.len());
            l.bias = rng.normal_vec(l.bias.len());
        }
        let x = Tensor::from_1d(n, 1, rng.normal_vec(n)).unwrap();
        let probe = rng.normal_vec(n);
        let forward = |x: &Tensor| {
            let a = conv.forward(x).unwrap();
            let b = lc.forward(&a).unwrap();
            let c = dense.forward(&b).unwrap();
            (a, b, c)
        };
        let (a, b, c) = forward(&x);
        // chain the per-layer transposed maps from the probe back to the input
        let up = Tensor::from_1d(n, 1, probe.clone()).unwrap();
        let (db, _) = layer_backward(&dense, &b, &c, &up).unwrap();
        let (da, _) = layer_backward(&lc, &a, &b, &db).unwrap();
        let (dx, _) = layer_backward(&conv, &x, &a, &da).unwrap();
        let delta = 1e-6;
        for i in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] += delta;
            xm.data_mut()[i] -= delta;
            let lp: f64 = forward(&xp).2.data().iter().zip(&probe).map(|(u, v)| u * v).sum();
            let lm: f64 = forward(&xm).2.data().iter().zip(&probe).map(|(u, v)| u * v).sum();
            let fd = (lp - lm) / (2.0 * delta);
            let an = dx.data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-3);
            assert!(((fd - an) / denom).abs() < 1e-6, "input {i}: fd {fd} an {an}");
        }
    }

    #[test]
    fn mse_examples() {
        let (l, g) = mse_loss(&[1.0, 2.0], &[1.0, 2.0]);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|x| *x == 0.0));
        let (l, _) = mse_loss(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]);
        assert!((l - 1.0).abs() < 1e-15);
        let mut rng = Stream::new(95);
        let a = rng.normal_vec(10);
        let b = rng.normal_vec(10);
        let (l, g) = mse_loss(&a, &b);
        let want: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 10.0;
        assert!((l - want).abs() < 1e-14);
        for i in 0..10 {
            assert!((g[i] - 2.0 * (a[i] - b[i]) / 10.0).abs() < 1e-14);
        }
    }

    #[test]
    fn nadam_zero_gradient_keeps_parameters() {
        let cfg = tiny_cfg();
        let mut net = build_bcrnet(&cfg, 3).unwrap();
        let before: Vec<Vec<f64>> = net.layers().iter().map(|l| l.weights.clone()).collect();
        let mut state = OptimizerState::new(&net, 1e-3, 0.9, 0.999, 1e-8);
        let grads = Gradients::zeros_like(&net);
        for _ in 0..5 {
            nadam_step(&mut state, &mut net, &grads).unwrap();
        }
        for (l, b) in net.layers().iter().zip(&before) {
            assert_eq!(&l.weights, b);
        }
    }

    #[test]
    fn nadam_descends_a_scalar_quadratic() {
        // f(theta) = theta^2, gradient 2 theta, starting at 1
        let mut theta = vec![1.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let mut prev = theta[0];
        for t in 1..=10 {
            let g = vec![2.0 * theta[0]];
            nadam_update(&mut theta, &g, &mut m, &mut v, t, 0.1, 0.9, 0.999, 1e-8);
            assert!(theta[0] < prev, "step {t}: {} !< {prev}", theta[0]);
            prev = theta[0];
        }
    }

    #[test]
    fn nadam_rejects_non_finite_gradients() {
        let cfg = tiny_cfg();
        let mut net = build_bcrnet(&cfg, 3).unwrap();
        let mut state = OptimizerState::new(&net, 1e-3, 0.9, 0.999, 1e-8);
        let mut grads = Gradients::zeros_like(&net);
        grads.coarse[0].weights[0] = f64::NAN;
        let err = nadam_step(&mut state, &mut net, &grads).unwrap_err();
        match err {
            GradError::NonFiniteGradient { name } => assert!(name.contains("coarse0")),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic_and_fixed_points_stay_fixed() {
        let data = make_dataset(TaskKind::Smoke, 32, 8, 12, 4, 21, 1).unwrap();
        let cfg = NetConfig { finest: 5, ..tiny_cfg() };
        let schedule = TrainSchedule { max_steps: Some(20), ..TrainSchedule::new(4, 1e-3) };
        let (net_a, hist_a) = train_loop(&cfg, &data.train, &data.test, &schedule, 11).unwrap();
        let (net_b, hist_b) = train_loop(&cfg, &data.train, &data.test, &schedule, 11).unwrap();
        for (la, lb) in net_a.layers().iter().zip(net_b.layers().iter()) {
            for (x, y) in la.weights.iter().zip(&lb.weights) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(hist_a.len(), hist_b.len());

        // targets equal to the initial outputs: zero loss, parameters frozen
        let net0 = build_bcrnet(&cfg, 11).unwrap();
        let fixed: Vec<TaskSample> = data
            .train
            .iter()
            .map(|s| TaskSample {
                input: s.input.clone(),
                target: net0.evaluate(&s.input).unwrap(),
            })
            .collect();
        let (net_c, hist_c) =
            train_loop(&cfg, &fixed, &[], &TrainSchedule { max_steps: Some(10), ..TrainSchedule::new(2, 1e-3) }, 11)
                .unwrap();
        assert!(hist_c[0].loss == 0.0);
        for (lc, l0) in net_c.layers().iter().zip(net0.layers().iter()) {
            for (x, y) in lc.weights.iter().zip(&l0.weights) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = tiny_cfg();
        let schedule = TrainSchedule::new(1, 1e-3);
        assert!(matches!(
            train_loop(&cfg, &[], &[], &schedule, 0),
            Err(GradError::EmptyDataset)
        ));
    }
}
