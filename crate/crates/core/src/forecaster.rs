//! Per-client quantile forecaster and its FedProx local trainer.
//!
//! Two small architectures are supported, an MLP with `tanh` hidden layers and
//! a stacked LSTM. Both end in a dense output head of width `horizon ·
//! |quantiles|`, registered as the output-head layers of the parameter layout.
//! Gradients are computed by hand-written backpropagation.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::metrics::{pinball_slope, pinball_term};
use crate::numeric::sigmoid;
use crate::params::{LayerKind, Layout, LayoutBuilder, ParameterVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    Lstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecasterConfig {
    /// Input window length `h`.
    pub history_len: usize,
    /// Forecast horizon `p`.
    pub horizon: usize,
    /// Values per time step in the input window.
    pub features: usize,
    pub quantiles: Vec<f64>,
    pub hidden_sizes: Vec<usize>,
    pub arch: Arch,
    pub local_lr: f64,
    pub local_epochs: usize,
    pub prox_mu: f64,
    pub batch_size: usize,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            history_len: 36,
            horizon: 6,
            features: 1,
            quantiles: vec![0.1, 0.5, 0.9],
            hidden_sizes: vec![32],
            arch: Arch::Mlp,
            local_lr: 0.0005,
            local_epochs: 1,
            prox_mu: 0.2,
            batch_size: 32,
        }
    }
}

impl ForecasterConfig {
    pub fn output_dim(&self) -> usize {
        self.horizon * self.quantiles.len()
    }

    pub fn input_dim(&self) -> usize {
        self.history_len * self.features
    }

    /// Every violated constraint, with keys prefixed by `prefix`.
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut out = Vec::new();
        if self.history_len == 0 {
            out.push(format!("{prefix}history_len must be >= 1"));
        }
        if self.horizon == 0 {
            out.push(format!("{prefix}horizon must be >= 1"));
        }
        if self.features == 0 {
            out.push(format!("{prefix}features must be >= 1"));
        }
        if self.quantiles.is_empty() {
            out.push(format!("{prefix}quantiles must not be empty"));
        }
        if self.quantiles.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
            out.push(format!("{prefix}quantiles must lie strictly inside (0, 1)"));
        }
        if self.quantiles.windows(2).any(|w| w[0] >= w[1]) {
            out.push(format!("{prefix}quantiles must be strictly increasing"));
        }
        if self.hidden_sizes.contains(&0) {
            out.push(format!("{prefix}hidden_sizes entries must be >= 1"));
        }
        if self.arch == Arch::Lstm && self.hidden_sizes.is_empty() {
            out.push(format!("{prefix}hidden_sizes must name at least one LSTM layer when arch = \"lstm\""));
        }
        if !(self.local_lr.is_finite() && self.local_lr >= 0.0) {
            out.push(format!("{prefix}local_lr must be finite and >= 0"));
        }
        if !(self.prox_mu.is_finite() && self.prox_mu >= 0.0) {
            out.push(format!("{prefix}prox_mu must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            out.push(format!("{prefix}batch_size must be >= 1"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems("");
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }

    fn same_shape(&self, other: &ForecasterConfig) -> bool {
        self.history_len == other.history_len
            && self.horizon == other.horizon
            && self.features == other.features
            && self.quantiles.len() == other.quantiles.len()
            && self.hidden_sizes == other.hidden_sizes
            && self.arch == other.arch
    }
}

#[derive(Clone, Debug)]
struct DenseBlock {
    weight: usize,
    bias: usize,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Clone, Debug)]
struct LstmBlock {
    w_ih: usize,
    w_hh: usize,
    bias: usize,
    input: usize,
    hidden: usize,
}

#[derive(Clone, Debug)]
enum Body {
    Mlp(Vec<DenseBlock>),
    Lstm(Vec<LstmBlock>),
}

/// Offsets of every block inside the flat parameter vector.
#[derive(Debug)]
struct Topology {
    body: Body,
    head: DenseBlock,
    layout: Arc<Layout>,
}

impl Topology {
    fn new(cfg: &ForecasterConfig) -> Self {
        let mut builder = Layout::builder();
        let mut offset = 0;
        let (body, last_width) = match cfg.arch {
            Arch::Mlp => {
                let mut blocks = Vec::new();
                let mut width = cfg.input_dim();
                for (l, &h) in cfg.hidden_sizes.iter().enumerate() {
                    let (b, block) = push_dense(builder, &mut offset, &format!("dense{l}"), width, h, LayerKind::Dense);
                    builder = b;
                    blocks.push(block);
                    width = h;
                }
                (Body::Mlp(blocks), width)
            }
            Arch::Lstm => {
                let mut blocks = Vec::new();
                let mut width = cfg.features;
                for (l, &h) in cfg.hidden_sizes.iter().enumerate() {
                    let block = LstmBlock {
                        w_ih: offset,
                        w_hh: offset + 4 * h * width,
                        bias: offset + 4 * h * width + 4 * h * h,
                        input: width,
                        hidden: h,
                    };
                    offset += 4 * h * width + 4 * h * h + 4 * h;
                    builder = builder
                        .push(format!("lstm{l}.w_ih"), 4 * h * width, LayerKind::Recurrent)
                        .push(format!("lstm{l}.w_hh"), 4 * h * h, LayerKind::Recurrent)
                        .push(format!("lstm{l}.bias"), 4 * h, LayerKind::Recurrent);
                    blocks.push(block);
                    width = h;
                }
                (Body::Lstm(blocks), width)
            }
        };
        let (builder, head) = push_dense(builder, &mut offset, "head", last_width, cfg.output_dim(), LayerKind::OutputHead);
        Self {
            body,
            head,
            layout: Arc::new(builder.build()),
        }
    }
}

fn push_dense(
    builder: LayoutBuilder,
    offset: &mut usize,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    kind: LayerKind,
) -> (LayoutBuilder, DenseBlock) {
    let block = DenseBlock {
        weight: *offset,
        bias: *offset + fan_in * fan_out,
        fan_in,
        fan_out,
    };
    *offset += fan_in * fan_out + fan_out;
    let builder = builder
        .push(format!("{name}.weight"), fan_in * fan_out, kind)
        .push(format!("{name}.bias"), fan_out, kind);
    (builder, block)
}

/// Parameter layout a model with this configuration would use.
pub fn layout_for(cfg: &ForecasterConfig) -> Arc<Layout> {
    Topology::new(cfg).layout
}

#[derive(Clone, Debug)]
pub struct ForecasterModel {
    params: ParameterVector,
    config: ForecasterConfig,
    topology: Arc<Topology>,
}

impl ForecasterModel {
    /// All-zero parameters.
    pub fn zeros(config: ForecasterConfig) -> Result<Self> {
        config.validate()?;
        let topology = Arc::new(Topology::new(&config));
        Ok(Self {
            params: ParameterVector::zeros(topology.layout.clone()),
            config,
            topology,
        })
    }

    /// Uniform(−s, s) initialization with `s = 1/√fan_in` per layer.
    pub fn init<R: Rng + ?Sized>(config: ForecasterConfig, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let mut fill = |values: &mut [f64], start: usize, len: usize, fan_in: usize| {
            let s = 1.0 / (fan_in.max(1) as f64).sqrt();
            for v in &mut values[start..start + len] {
                *v = rng.random_range(-s..s);
            }
        };
        let topo = model.topology.clone();
        let values = model.params.values_mut();
        match &topo.body {
            Body::Mlp(blocks) => {
                for b in blocks {
                    fill(values, b.weight, b.fan_in * b.fan_out + b.fan_out, b.fan_in);
                }
            }
            Body::Lstm(blocks) => {
                for b in blocks {
                    let len = 4 * b.hidden * (b.input + b.hidden + 1);
                    fill(values, b.w_ih, len, b.hidden);
                }
            }
        }
        let h = &topo.head;
        fill(values, h.weight, h.fan_in * h.fan_out + h.fan_out, h.fan_in);
        Ok(model)
    }

    /// Same architecture, different parameters.
    pub fn with_params(&self, params: ParameterVector) -> Result<Self> {
        if params.layout().as_ref() != self.topology.layout.as_ref() {
            return Err(Error::shape("parameters do not match the model layout"));
        }
        Ok(Self {
            params,
            config: self.config.clone(),
            topology: self.topology.clone(),
        })
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.topology.layout
    }

    /// Predicted quantiles for one input window, flattened row-major so that
    /// entry `t * |q| + j` is the `q_j` quantile of step `t`.
    pub fn forward(&self, window: &[f64]) -> Result<Vec<f64>> {
        self.check_window(window)?;
        let (out, _) = forward_cached(&self.topology, self.params.values(), &self.config, window);
        if !crate::numeric::all_finite(&out) {
            return Err(Error::numeric("forward pass produced non-finite output"));
        }
        Ok(out)
    }

    /// [`forward`](Self::forward) reshaped to `horizon` rows of `|q|` quantiles.
    pub fn predict(&self, window: &[f64]) -> Result<Vec<Vec<f64>>> {
        let q = self.config.quantiles.len();
        Ok(self.forward(window)?.chunks(q).map(<[f64]>::to_vec).collect())
    }

    fn check_window(&self, window: &[f64]) -> Result<()> {
        if window.len() != self.config.input_dim() {
            return Err(Error::shape(format!(
                "window has {} values, model expects {} ({} steps x {} features)",
                window.len(),
                self.config.input_dim(),
                self.config.history_len,
                self.config.features
            )));
        }
        Ok(())
    }
}

/// Mean pinball loss over steps and quantiles.
///
/// `pred` is the flattened `horizon x |q|` matrix from [`ForecasterModel::forward`].
/// The per-quantile averages are formed first, so the result is bit-identical to
/// the mean over quantiles of [`crate::metrics::quantile_score`].
pub fn pinball_loss(pred: &[f64], target: &[f64], quantiles: &[f64]) -> Result<f64> {
    let nq = quantiles.len();
    if nq == 0 || pred.len() != target.len() * nq || target.is_empty() {
        return Err(Error::shape(format!(
            "prediction of {} values for {} targets and {} quantiles",
            pred.len(),
            target.len(),
            nq
        )));
    }
    let mut total = 0.0;
    for (j, &q) in quantiles.iter().enumerate() {
        let mut acc = 0.0;
        for (t, &y) in target.iter().enumerate() {
            acc += pinball_term(y, pred[t * nq + j], q);
        }
        total += acc / target.len() as f64;
    }
    Ok(total / nq as f64)
}

enum Cache {
    Mlp {
        /// Input of every dense layer followed by the head input.
        activations: Vec<Vec<f64>>,
    },
    Lstm {
        layers: Vec<LstmTrace>,
        head_input: Vec<f64>,
    },
}

struct LstmStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

struct LstmTrace {
    steps: Vec<LstmStep>,
}

fn dense_forward(p: &[f64], b: &DenseBlock, x: &[f64]) -> Vec<f64> {
    let w = &p[b.weight..b.weight + b.fan_in * b.fan_out];
    let bias = &p[b.bias..b.bias + b.fan_out];
    (0..b.fan_out)
        .map(|o| {
            let row = &w[o * b.fan_in..(o + 1) * b.fan_in];
            bias[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
        })
        .collect()
}

/// Accumulates weight/bias gradients into `grad` and returns the input gradient.
fn dense_backward(p: &[f64], b: &DenseBlock, x: &[f64], dy: &[f64], grad: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; b.fan_in];
    for o in 0..b.fan_out {
        let d = dy[o];
        grad[b.bias + o] += d;
        let row = b.weight + o * b.fan_in;
        for i in 0..b.fan_in {
            grad[row + i] += d * x[i];
            dx[i] += p[row + i] * d;
        }
    }
    dx
}

fn forward_cached(topo: &Topology, p: &[f64], cfg: &ForecasterConfig, window: &[f64]) -> (Vec<f64>, Cache) {
    match &topo.body {
        Body::Mlp(blocks) => {
            let mut activations = Vec::with_capacity(blocks.len() + 1);
            let mut x = window.to_vec();
            for b in blocks {
                let z = dense_forward(p, b, &x);
                activations.push(x);
                x = z.into_iter().map(f64::tanh).collect();
            }
            let out = dense_forward(p, &topo.head, &x);
            activations.push(x);
            (out, Cache::Mlp { activations })
        }
        Body::Lstm(blocks) => {
            let mut seq: Vec<Vec<f64>> = window.chunks(cfg.features).map(<[f64]>::to_vec).collect();
            let mut layers = Vec::with_capacity(blocks.len());
            for b in blocks {
                let trace = lstm_layer_forward(p, b, &seq);
                seq = trace
                    .steps
                    .iter()
                    .map(|s| s.o.iter().zip(&s.tanh_c).map(|(o, t)| o * t).collect())
                    .collect();
                layers.push(trace);
            }
            let head_input = seq.pop().expect("window has at least one step");
            let out = dense_forward(p, &topo.head, &head_input);
            (out, Cache::Lstm { layers, head_input })
        }
    }
}

fn lstm_layer_forward(p: &[f64], b: &LstmBlock, inputs: &[Vec<f64>]) -> LstmTrace {
    let hsz = b.hidden;
    let mut h = vec![0.0; hsz];
    let mut c = vec![0.0; hsz];
    let mut steps = Vec::with_capacity(inputs.len());
    for x in inputs {
        let mut z = p[b.bias..b.bias + 4 * hsz].to_vec();
        for (r, zr) in z.iter_mut().enumerate() {
            let wi = &p[b.w_ih + r * b.input..b.w_ih + (r + 1) * b.input];
            let wh = &p[b.w_hh + r * hsz..b.w_hh + (r + 1) * hsz];
            *zr += wi.iter().zip(x).map(|(a, v)| a * v).sum::<f64>()
                + wh.iter().zip(&h).map(|(a, v)| a * v).sum::<f64>();
        }
        let i: Vec<f64> = z[..hsz].iter().map(|v| sigmoid(*v)).collect();
        let f: Vec<f64> = z[hsz..2 * hsz].iter().map(|v| sigmoid(*v)).collect();
        let g: Vec<f64> = z[2 * hsz..3 * hsz].iter().map(|v| v.tanh()).collect();
        let o: Vec<f64> = z[3 * hsz..].iter().map(|v| sigmoid(*v)).collect();
        let c_new: Vec<f64> = (0..hsz).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
        let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
        let h_new: Vec<f64> = (0..hsz).map(|k| o[k] * tanh_c[k]).collect();
        steps.push(LstmStep {
            x: x.clone(),
            h_prev: std::mem::replace(&mut h, h_new),
            c_prev: std::mem::replace(&mut c, c_new),
            i,
            f,
            g,
            o,
            tanh_c,
        });
    }
    LstmTrace { steps }
}

/// Backpropagation through time for one layer. `dh_out[t]` is the gradient
/// flowing into the hidden output of step `t`; returns the gradient w.r.t. the
/// layer inputs at every step.
fn lstm_layer_backward(p: &[f64], b: &LstmBlock, trace: &LstmTrace, dh_out: &[Vec<f64>], grad: &mut [f64]) -> Vec<Vec<f64>> {
    let hsz = b.hidden;
    let mut dh_next = vec![0.0; hsz];
    let mut dc_next = vec![0.0; hsz];
    let mut dxs = vec![Vec::new(); trace.steps.len()];
    for (t, s) in trace.steps.iter().enumerate().rev() {
        let mut dz = vec![0.0; 4 * hsz];
        for k in 0..hsz {
            let dh = dh_out[t][k] + dh_next[k];
            let dc = dc_next[k] + dh * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
            let d_o = dh * s.tanh_c[k];
            let d_i = dc * s.g[k];
            let d_g = dc * s.i[k];
            let d_f = dc * s.c_prev[k];
            dc_next[k] = dc * s.f[k];
            dz[k] = d_i * s.i[k] * (1.0 - s.i[k]);
            dz[hsz + k] = d_f * s.f[k] * (1.0 - s.f[k]);
            dz[2 * hsz + k] = d_g * (1.0 - s.g[k] * s.g[k]);
            dz[3 * hsz + k] = d_o * s.o[k] * (1.0 - s.o[k]);
        }
        let mut dx = vec![0.0; b.input];
        let mut dh_prev = vec![0.0; hsz];
        for (r, &d) in dz.iter().enumerate() {
            grad[b.bias + r] += d;
            let wi = b.w_ih + r * b.input;
            for c in 0..b.input {
                grad[wi + c] += d * s.x[c];
                dx[c] += p[wi + c] * d;
            }
            let wh = b.w_hh + r * hsz;
            for c in 0..hsz {
                grad[wh + c] += d * s.h_prev[c];
                dh_prev[c] += p[wh + c] * d;
            }
        }
        dh_next = dh_prev;
        dxs[t] = dx;
    }
    dxs
}

fn backward(topo: &Topology, p: &[f64], cache: &Cache, dout: &[f64], grad: &mut [f64]) {
    match (&topo.body, cache) {
        (Body::Mlp(blocks), Cache::Mlp { activations }) => {
            let mut d = dense_backward(p, &topo.head, &activations[blocks.len()], dout, grad);
            for (l, b) in blocks.iter().enumerate().rev() {
                let a = &activations[l + 1];
                let dz: Vec<f64> = d.iter().zip(a).map(|(g, y)| g * (1.0 - y * y)).collect();
                d = dense_backward(p, b, &activations[l], &dz, grad);
            }
        }
        (Body::Lstm(blocks), Cache::Lstm { layers, head_input }) => {
            let dh_last = dense_backward(p, &topo.head, head_input, dout, grad);
            let steps = layers[0].steps.len();
            let mut dh_out = vec![vec![0.0; blocks.last().map_or(0, |b| b.hidden)]; steps];
            dh_out[steps - 1] = dh_last;
            for (b, trace) in blocks.iter().zip(layers).rev() {
                dh_out = lstm_layer_backward(p, b, trace, &dh_out, grad);
            }
        }
        _ => unreachable!("cache built by the same topology"),
    }
}

/// Mean pinball loss and its gradient over the windows at `indices`.
pub fn task_gradient(model: &ForecasterModel, data: &WindowedDataset, indices: &[usize]) -> Result<(f64, Vec<f64>)> {
    if indices.is_empty() {
        return Err(Error::usage("gradient of an empty batch"));
    }
    let cfg = &model.config;
    let p = model.params.values();
    let nq = cfg.quantiles.len();
    let scale = 1.0 / (indices.len() * cfg.horizon * nq) as f64;
    let mut grad = vec![0.0; p.len()];
    let mut loss = 0.0;
    for &idx in indices {
        let (window, target) = data
            .sample(idx)
            .ok_or_else(|| Error::usage(format!("window index {idx} out of range")))?;
        model.check_window(window)?;
        if target.len() != cfg.horizon {
            return Err(Error::shape(format!("target has {} steps, horizon is {}", target.len(), cfg.horizon)));
        }
        let (out, cache) = forward_cached(&model.topology, p, cfg, window);
        loss += pinball_loss(&out, target, &cfg.quantiles)?;
        let mut dout = vec![0.0; out.len()];
        for (t, &y) in target.iter().enumerate() {
            for (j, &q) in cfg.quantiles.iter().enumerate() {
                dout[t * nq + j] = pinball_slope(y, out[t * nq + j], q) * scale;
            }
        }
        backward(&model.topology, p, &cache, &dout, &mut grad);
    }
    Ok((loss / indices.len() as f64, grad))
}

/// Task loss plus `(μ/2)‖w − w_global‖²`.
pub fn fedprox_objective(
    model: &ForecasterModel,
    data: &WindowedDataset,
    indices: &[usize],
    global: &ParameterVector,
    mu: f64,
) -> Result<f64> {
    let mut loss = 0.0;
    for &idx in indices {
        let (window, target) = data
            .sample(idx)
            .ok_or_else(|| Error::usage(format!("window index {idx} out of range")))?;
        loss += pinball_loss(&model.forward(window)?, target, &model.config.quantiles)?;
    }
    loss /= indices.len() as f64;
    let prox: f64 = model
        .params
        .values()
        .iter()
        .zip(global.values())
        .map(|(w, g)| (w - g) * (w - g))
        .sum();
    Ok(loss + 0.5 * mu * prox)
}

/// Gradient of the FedProx objective: task gradient plus `μ(w − w_global)`.
/// Returns the task loss alongside.
pub fn fedprox_gradient(
    model: &ForecasterModel,
    data: &WindowedDataset,
    indices: &[usize],
    global: &ParameterVector,
    mu: f64,
) -> Result<(f64, Vec<f64>)> {
    if global.len() != model.params.len() {
        return Err(Error::shape("global parameters do not match the model"));
    }
    let (loss, mut grad) = task_gradient(model, data, indices)?;
    if mu != 0.0 {
        for ((g, w), wg) in grad.iter_mut().zip(model.params.values()).zip(global.values()) {
            *g += mu * (w - wg);
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ForecasterModel,
    /// Mean task loss over the mini-batches seen.
    pub mean_loss: f64,
}

/// `cfg.local_epochs` passes of mini-batch SGD on the FedProx objective.
///
/// Batch order is drawn from `rng`. Only the optimization settings of `cfg`
/// (`local_lr`, `local_epochs`, `prox_mu`, `batch_size`) are used; its shape
/// fields must agree with the model.
pub fn local_train<R: Rng + ?Sized>(
    model: &ForecasterModel,
    data: &WindowedDataset,
    global: &ParameterVector,
    cfg: &ForecasterConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::usage("local training on an empty dataset"));
    }
    if !cfg.same_shape(&model.config) {
        return Err(Error::shape("training config does not match the model architecture"));
    }
    if global.layout().as_ref() != model.layout().as_ref() {
        return Err(Error::shape("global parameters do not match the model layout"));
    }
    let mut current = model.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut batches) = (0.0, 0usize);
    for epoch in 0..cfg.local_epochs {
        order.shuffle(rng);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grad) = fedprox_gradient(&current, data, chunk, global, cfg.prox_mu)?;
            if !loss.is_finite() {
                return Err(Error::numeric(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            for (w, g) in current.params.values_mut().iter_mut().zip(&grad) {
                *w -= cfg.local_lr * g;
            }
            if !crate::numeric::all_finite(current.params.values()) {
                return Err(Error::numeric(format!("parameters diverged at epoch {epoch}, batch {b}")));
            }
            loss_sum += loss;
            batches += 1;
        }
    }
    Ok(TrainOutcome {
        model: current,
        mean_loss: if batches == 0 { 0.0 } else { loss_sum / batches as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Normalization, WindowedDataset};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(arch: Arch, hidden: Vec<usize>) -> ForecasterConfig {
        ForecasterConfig {
            history_len: 5,
            horizon: 3,
            features: 1,
            quantiles: vec![0.1, 0.5, 0.9],
            hidden_sizes: hidden,
            arch,
            local_lr: 0.01,
            local_epochs: 1,
            prox_mu: 0.0,
            batch_size: 4,
        }
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, c: &ForecasterConfig) -> WindowedDataset {
        let inputs = (0..n)
            .map(|_| (0..c.input_dim()).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let targets = (0..n)
            .map(|_| (0..c.horizon).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        WindowedDataset::new(inputs, targets, Normalization::identity()).unwrap()
    }

    /// Straightforward forward pass written from the layer equations.
    fn reference_forward(model: &ForecasterModel, window: &[f64]) -> Vec<f64> {
        let c = model.config();
        let get = |name: &str| model.params().layer_slice(name).unwrap().to_vec();
        let affine = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
            let mut y = b.to_vec();
            for o in 0..b.len() {
                for i in 0..x.len() {
                    y[o] += w[o * x.len() + i] * x[i];
                }
            }
            y
        };
        let last = match c.arch {
            Arch::Mlp => {
                let mut x = window.to_vec();
                for l in 0..c.hidden_sizes.len() {
                    x = affine(&get(&format!("dense{l}.weight")), &get(&format!("dense{l}.bias")), &x)
                        .iter()
                        .map(|v| v.tanh())
                        .collect();
                }
                x
            }
            Arch::Lstm => {
                let mut seq: Vec<Vec<f64>> = window.chunks(c.features).map(|s| s.to_vec()).collect();
                for (l, &hs) in c.hidden_sizes.iter().enumerate() {
                    let wih = get(&format!("lstm{l}.w_ih"));
                    let whh = get(&format!("lstm{l}.w_hh"));
                    let bias = get(&format!("lstm{l}.bias"));
                    let (mut h, mut cell) = (vec![0.0; hs], vec![0.0; hs]);
                    let mut outs = Vec::new();
                    for x in &seq {
                        let zx = affine(&wih, &bias, x);
                        let zh = affine(&whh, &vec![0.0; 4 * hs], &h);
                        let z: Vec<f64> = zx.iter().zip(&zh).map(|(a, b)| a + b).collect();
                        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
                        for k in 0..hs {
                            cell[k] = sig(z[hs + k]) * cell[k] + sig(z[k]) * z[2 * hs + k].tanh();
                            h[k] = sig(z[3 * hs + k]) * cell[k].tanh();
                        }
                        outs.push(h.clone());
                    }
                    seq = outs;
                }
                seq.pop().unwrap()
            }
        };
        affine(&get("head.weight"), &get("head.bias"), &last)
    }

    fn assert_grad_matches_fd(model: &ForecasterModel, data: &WindowedDataset, global: &ParameterVector, mu: f64) {
        let idx: Vec<usize> = (0..data.len()).collect();
        let (_, grad) = fedprox_gradient(model, data, &idx, global, mu).unwrap();
        let eps = 1e-5;
        let mut checked = 0;
        for k in 0..grad.len() {
            let mut plus = model.clone();
            plus.params_mut().values_mut()[k] += eps;
            let mut minus = model.clone();
            minus.params_mut().values_mut()[k] -= eps;
            let fd = (fedprox_objective(&plus, data, &idx, global, mu).unwrap()
                - fedprox_objective(&minus, data, &idx, global, mu).unwrap())
                / (2.0 * eps);
            if grad[k].abs() > 1e-8 {
                let rel = (grad[k] - fd).abs() / grad[k].abs().max(fd.abs());
                assert!(rel < 1e-4, "coord {k}: analytic {} vs fd {fd} (rel {rel})", grad[k]);
                checked += 1;
            }
        }
        assert!(checked > grad.len() / 2);
    }

    #[test]
    fn head_is_final_dense_layer() {
        let c = cfg(Arch::Mlp, vec![4]);
        let layout = layout_for(&c);
        let heads: Vec<_> = layout.head_layers().map(|l| l.name.as_str()).collect();
        assert_eq!(heads, ["head.weight", "head.bias"]);
        assert_eq!(layout.head_len(), 4 * 9 + 9);
        assert_eq!(layout.total(), 5 * 4 + 4 + 45);
    }

    #[test]
    fn zero_weights_emit_head_bias() {
        let mut m = ForecasterModel::zeros(cfg(Arch::Mlp, vec![6])).unwrap();
        let bias = m.layout().layer("head.bias").unwrap().clone();
        for (k, v) in m.params_mut().values_mut()[bias.offset..bias.offset + bias.length].iter_mut().enumerate() {
            *v = k as f64 - 3.0;
        }
        let out = m.forward(&[0.3, -1.0, 2.0, 0.0, 9.0]).unwrap();
        assert_eq!(out, (0..9).map(|k| k as f64 - 3.0).collect::<Vec<_>>());
    }

    #[test]
    fn constant_window_linear_model_is_constant_in_time() {
        // No hidden layer: every output row reads the window through the same weights.
        let mut c = cfg(Arch::Mlp, vec![]);
        c.history_len = 3;
        c.horizon = 4;
        c.quantiles = vec![0.5];
        let mut m = ForecasterModel::zeros(c).unwrap();
        let w = m.layout().layer("head.weight").unwrap().clone();
        for o in 0..4 {
            m.params_mut().values_mut()[w.offset + o * 3 + (o % 3)] = 1.0;
        }
        let out = m.forward(&[2.5, 2.5, 2.5]).unwrap();
        assert!(out.iter().all(|v| *v == 2.5));
    }

    #[test]
    fn forward_matches_reference_implementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for c in [cfg(Arch::Mlp, vec![7, 5]), cfg(Arch::Lstm, vec![4, 3]), {
            let mut l = cfg(Arch::Lstm, vec![5]);
            l.features = 2;
            l.history_len = 4;
            l
        }] {
            let m = ForecasterModel::init(c.clone(), &mut rng).unwrap();
            let window: Vec<f64> = (0..c.input_dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let out = m.forward(&window).unwrap();
            let reference = reference_forward(&m, &window);
            for (a, b) in out.iter().zip(&reference) {
                assert!((a - b).abs() < 1e-10);
            }
            assert_eq!(m.forward(&window).unwrap(), out, "forward is deterministic");
        }
    }

    #[test]
    fn forward_rejects_bad_window() {
        let m = ForecasterModel::zeros(cfg(Arch::Mlp, vec![2])).unwrap();
        assert!(matches!(m.forward(&[0.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn pinball_cases() {
        let q = [0.1, 0.5, 0.9];
        let y = [1.0, -2.0];
        let pred = [1.0, 1.0, 1.0, -2.0, -2.0, -2.0];
        assert_eq!(pinball_loss(&pred, &y, &q).unwrap(), 0.0);
        assert!((pinball_loss(&[0.0], &[1.0], &[0.9]).unwrap() - 0.9).abs() < 1e-15);
        assert!((pinball_loss(&[2.0], &[1.0], &[0.9]).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(pinball_loss(&[0.0; 5], &y, &q), Err(Error::Shape(_))));
    }

    #[test]
    fn pinball_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = [0.1, 0.5, 0.9];
        let y: Vec<f64> = (0..6).map(|_| rng.random_range(-3.0..3.0)).collect();
        let pred: Vec<f64> = (0..18).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut acc = 0.0;
        for t in 0..6 {
            for j in 0..3 {
                let (yy, yh) = (y[t], pred[t * 3 + j]);
                acc += if yy < yh { (1.0 - q[j]) * (yh - yy) } else { q[j] * (yy - yh) };
            }
        }
        assert!((pinball_loss(&pred, &y, &q).unwrap() - acc / 18.0).abs() < 1e-12);
    }

    #[test]
    fn task_gradient_matches_finite_differences_mlp() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let c = cfg(Arch::Mlp, vec![8, 6]);
        let m = ForecasterModel::init(c.clone(), &mut rng).unwrap();
        let data = random_dataset(&mut rng, 6, &c);
        let global = ParameterVector::zeros(m.layout().clone());
        assert_grad_matches_fd(&m, &data, &global, 0.0);
    }

    #[test]
    fn task_gradient_matches_finite_differences_lstm() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let mut c = cfg(Arch::Lstm, vec![6, 4]);
        c.features = 2;
        let m = ForecasterModel::init(c.clone(), &mut rng).unwrap();
        let data = random_dataset(&mut rng, 5, &c);
        let global = ParameterVector::zeros(m.layout().clone());
        assert_grad_matches_fd(&m, &data, &global, 0.0);
    }

    #[test]
    fn fedprox_gradient_is_task_plus_proximal() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let c = cfg(Arch::Mlp, vec![5]);
        let m = ForecasterModel::init(c.clone(), &mut rng).unwrap();
        let g = ForecasterModel::init(c.clone(), &mut rng).unwrap();
        let data = random_dataset(&mut rng, 7, &c);
        let idx: Vec<usize> = (0..7).collect();
        let (_, task) = task_gradient(&m, &data, &idx).unwrap();
        let (_, prox) = fedprox_gradient(&m, &data, &idx, g.params(), 0.2).unwrap();
        for k in 0..task.len() {
            let expected = task[k] + 0.2 * (m.params().values()[k] - g.params().values()[k]);
            assert!((prox[k] - expected).abs() < 1e-12);
        }
        assert_grad_matches_fd(&m, &data, g.params(), 0.2);
    }

    #[test]
    fn zero_targets_on_zero_model_give_quantile_sign_constants() {
        // ŷ = y = 0 ties at the kink and takes the y >= ŷ branch, slope −q.
        let c = cfg(Arch::Mlp, vec![3]);
        let m = ForecasterModel::zeros(c.clone()).unwrap();
        let data = WindowedDataset::new(
            vec![vec![0.4, -0.2, 1.0, 0.0, 3.0]; 2],
            vec![vec![0.0; 3]; 2],
            Normalization::identity(),
        )
        .unwrap();
        let (loss, grad) = task_gradient(&m, &data, &[0, 1]).unwrap();
        assert_eq!(loss, 0.0);
        let bias = m.layout().layer("head.bias").unwrap();
        for t in 0..3 {
            for (j, q) in [0.1f64, 0.5, 0.9].iter().enumerate() {
                let g = grad[bias.offset + t * 3 + j];
                assert!((g - (-q / 9.0)).abs() < 1e-15, "t={t} j={j} g={g}");
            }
        }
    }

    #[test]
    fn single_sgd_step_is_minus_lr_times_gradient() {
        let mut c = cfg(Arch::Mlp, vec![]);
        c.history_len = 1;
        c.horizon = 1;
        c.quantiles = vec![0.5];
        c.local_lr = 0.0005;
        c.batch_size = 1;
        let mut m = ForecasterModel::zeros(c.clone()).unwrap();
        m.params_mut().values_mut().copy_from_slice(&[0.5, 0.25]);
        // ŷ = 0.5·2 + 0.25 = 1.25 < y = 3, so dL/dŷ = −0.5; g = (−0.5·2, −0.5).
        let data = WindowedDataset::new(vec![vec![2.0]], vec![vec![3.0]], Normalization::identity()).unwrap();
        let global = m.params().clone();
        let out = local_train(&m, &data, &global, &c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.model.params().values(), &[0.5 + 0.0005 * 1.0, 0.25 + 0.0005 * 0.5]);
    }

    #[test]
    fn huge_mu_pulls_towards_global() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut c = cfg(Arch::Mlp, vec![4]);
        c.prox_mu = 1e6;
        c.local_lr = 1e-7;
        c.local_epochs = 3;
        let m = ForecasterModel::init(c.clone(), &mut rng).unwrap();
        let g = ForecasterModel::init(c.clone(), &mut rng).unwrap();
        let data = random_dataset(&mut rng, 8, &c);
        let dist = |a: &ForecasterModel| -> f64 {
            a.params().values().iter().zip(g.params().values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let out = local_train(&m, &data, g.params(), &c, &mut rng).unwrap();
        assert!(dist(&out.model) < dist(&m));
    }

    #[test]
    fn local_train_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(Arch::Mlp, vec![3]);
        let m = ForecasterModel::init(c.clone(), &mut rng).unwrap();
        let empty = WindowedDataset::new(vec![], vec![], Normalization::identity()).unwrap();
        assert!(matches!(local_train(&m, &empty, m.params(), &c, &mut rng), Err(Error::Usage(_))));
        let mut data = random_dataset(&mut rng, 4, &c);
        data = WindowedDataset::new(data.inputs().to_vec(), vec![vec![f64::NAN; c.horizon]; 4], data.stats).unwrap();
        assert!(matches!(local_train(&m, &data, m.params(), &c, &mut rng), Err(Error::Numeric(_))));
    }

    #[test]
    fn config_problems_are_listed() {
        let mut c = cfg(Arch::Lstm, vec![]);
        c.quantiles = vec![0.9, 0.1];
        c.horizon = 0;
        let p = c.problems("forecaster.");
        assert_eq!(p.len(), 3, "{p:?}");
        assert!(p.iter().all(|s| s.starts_with("forecaster.")));
    }
}
