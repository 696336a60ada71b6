//! Mask estimation network `h(R; params) -> masks`.
//!
//! A stack of dense, recurrent and bidirectional recurrent layers followed by
//! a dense output head with `F * S` units. Recurrent layers use a plain tanh
//! cell, `h_t = tanh(W x_t + U h_{t-1} + b)`, and consume the whole utterance;
//! a bidirectional layer runs a second cell right-to-left and concatenates the
//! two state sequences. Gradients are derived by hand, including
//! backpropagation through time.
//!
//! Dropout is applied to the input of every layer except the first, and only
//! in [`Mode::Train`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{Grid, MagSpectrogram};
use crate::error::{Error, Result};
use crate::masks::{MaskKind, MaskSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HiddenActivation {
    Tanh,
    Relu,
    Sigmoid,
}

/// Output non-linearity producing the masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    /// Softmax across speakers at every T-F unit.
    Softmax,
    Sigmoid,
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LayerSpec {
    Dense { width: usize, activation: HiddenActivation },
    Recurrent { width: usize },
    /// Output width is `2 * width`.
    BiRecurrent { width: usize },
}

impl LayerSpec {
    pub fn output_width(&self) -> usize {
        match *self {
            LayerSpec::Dense { width, .. } | LayerSpec::Recurrent { width } => width,
            LayerSpec::BiRecurrent { width } => 2 * width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_bins: usize,
    pub speakers: usize,
    pub layers: Vec<LayerSpec>,
    pub output: OutputActivation,
    pub dropout: f64,
}

impl ModelSpec {
    /// Two bidirectional layers of 64 units over 129 bins.
    pub fn desk_default(speakers: usize) -> Self {
        ModelSpec {
            input_bins: 129,
            speakers,
            layers: vec![LayerSpec::BiRecurrent { width: 64 }, LayerSpec::BiRecurrent { width: 64 }],
            output: OutputActivation::Softmax,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_bins == 0 || self.speakers == 0 {
            return Err(Error::BadConfig("model needs at least one bin and one speaker".into()));
        }
        if self.layers.iter().any(|l| l.output_width() == 0) {
            return Err(Error::BadConfig("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::BadConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        self.input_bins * self.speakers
    }
}

/// Fully connected map `y = W x + b` with `W` stored row-major (`outputs x inputs`).
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Tanh recurrent cell.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnCell {
    pub inputs: usize,
    pub width: usize,
    pub input_weight: Vec<f64>,
    pub recurrent_weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Dense { dense: Dense, activation: HiddenActivation },
    Recurrent(RnnCell),
    BiRecurrent { forward: RnnCell, backward: RnnCell },
}

/// Per-bin input standardization fitted on training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl FeatureNorm {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a MagSpectrogram>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for spec in features {
            if sum.is_empty() {
                sum = vec![0.0; spec.bins()];
                sum_sq = vec![0.0; spec.bins()];
            } else if spec.bins() != sum.len() {
                return Err(Error::ShapeMismatch("feature widths differ".into()));
            }
            for t in 0..spec.frames() {
                for (f, &x) in spec.frame(t).iter().enumerate() {
                    sum[f] += x;
                    sum_sq[f] += x * x;
                }
            }
            count += spec.frames();
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let inv_std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| 1.0 / libm::sqrt((sq / n - m * m).max(0.0) + 1e-8))
            .collect();
        Ok(FeatureNorm { mean, inv_std })
    }

    fn apply(&self, frame: &[f64], out: &mut [f64]) {
        for ((o, x), (m, s)) in out.iter_mut().zip(frame).zip(self.mean.iter().zip(&self.inv_std)) {
            *o = (x - m) * s;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active; masks drawn from the given seed.
    Train,
    /// Deterministic, no dropout.
    Eval,
}

/// The learnable parameter set of the separator.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    layers: Vec<Layer>,
    head: Dense,
    norm: Option<FeatureNorm>,
}

/// Values kept from a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    frames: usize,
    // Input to each layer and to the head (after normalization / dropout),
    // each `frames x width`.
    inputs: Vec<Vec<f64>>,
    // Inverted-dropout scale factors applied to `inputs[k]`.
    dropout: Vec<Option<Vec<f64>>>,
    // Output of each hidden layer, `frames x width`. For a bidirectional
    // layer each frame is `[forward ; backward]`.
    outputs: Vec<Vec<f64>>,
    // Head output after the mask activation, `frames x (S * F)`, speaker-major.
    masks: Vec<f64>,
}

impl ForwardTrace {
    pub fn frames(&self) -> usize {
        self.frames
    }

    /// Output of hidden layer `k`, frame-major.
    pub fn layer_output(&self, k: usize) -> &[f64] {
        &self.outputs[k]
    }
}

/// Gradients in the order of [`ModelParams::tensors`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            tensors: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.tensors
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .iter()
            .flatten()
            .map(|x| x.abs())
            .fold(0.0, f64::max)
    }
}

/// Glorot-uniform weights from `seed`, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut width = spec.input_bins;
    let mut layers = Vec::with_capacity(spec.layers.len());
    for layer in &spec.layers {
        layers.push(match *layer {
            LayerSpec::Dense { width: out, activation } => Layer::Dense {
                dense: Dense::init(width, out, &mut rng),
                activation,
            },
            LayerSpec::Recurrent { width: h } => Layer::Recurrent(RnnCell::init(width, h, &mut rng)),
            LayerSpec::BiRecurrent { width: h } => Layer::BiRecurrent {
                forward: RnnCell::init(width, h, &mut rng),
                backward: RnnCell::init(width, h, &mut rng),
            },
        });
        width = layer.output_width();
    }
    let head = Dense::init(width, spec.output_width(), &mut rng);
    Ok(ModelParams {
        spec: spec.clone(),
        layers,
        head,
        norm: None,
    })
}

/// Half-width of the Glorot-uniform range.
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    libm::sqrt(6.0 / (fan_in + fan_out) as f64)
}

fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a = glorot_limit(cols, rows);
    (0..rows * cols).map(|_| rng.random_range(-a..=a)).collect()
}

impl Dense {
    fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            inputs,
            outputs,
            weight: glorot(outputs, inputs, rng),
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        matvec_add(out, &self.weight, x);
    }
}

impl RnnCell {
    fn init(inputs: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        RnnCell {
            inputs,
            width,
            input_weight: glorot(width, inputs, rng),
            recurrent_weight: glorot(width, width, rng),
            bias: vec![0.0; width],
        }
    }

    /// Runs the cell over `frames` frames of `input` (row stride `in_stride`)
    /// and writes states into `out` at column `col` with row stride `out_stride`.
    fn run(&self, input: &[f64], frames: usize, reverse: bool, out: &mut [f64], out_stride: usize, col: usize) {
        let h = self.width;
        let mut prev = vec![0.0; h];
        let mut a = vec![0.0; h];
        for step in 0..frames {
            let t = if reverse { frames - 1 - step } else { step };
            a.copy_from_slice(&self.bias);
            matvec_add(&mut a, &self.input_weight, &input[t * self.inputs..(t + 1) * self.inputs]);
            matvec_add(&mut a, &self.recurrent_weight, &prev);
            for (p, v) in prev.iter_mut().zip(&a) {
                *p = libm::tanh(*v);
            }
            out[t * out_stride + col..t * out_stride + col + h].copy_from_slice(&prev);
        }
    }

    /// BPTT. `states` / `d_states` hold this cell's states at column `col`
    /// with row stride `stride`. Accumulates into the three gradient tensors
    /// and into `d_input`.
    #[allow(clippy::too_many_arguments)]
    fn backprop(
        &self,
        input: &[f64],
        frames: usize,
        reverse: bool,
        states: &[f64],
        d_states: &[f64],
        stride: usize,
        col: usize,
        grads: [&mut Vec<f64>; 3],
        d_input: &mut [f64],
    ) {
        let [g_in, g_rec, g_bias] = grads;
        let h = self.width;
        let mut carry = vec![0.0; h];
        let mut da = vec![0.0; h];
        for step in (0..frames).rev() {
            let t = if reverse { frames - 1 - step } else { step };
            let state = &states[t * stride + col..t * stride + col + h];
            let upstream = &d_states[t * stride + col..t * stride + col + h];
            for i in 0..h {
                da[i] = (upstream[i] + carry[i]) * (1.0 - state[i] * state[i]);
            }
            let x = &input[t * self.inputs..(t + 1) * self.inputs];
            outer_add(g_in, &da, x);
            for (g, d) in g_bias.iter_mut().zip(&da) {
                *g += d;
            }
            let has_prev = step > 0;
            if has_prev {
                let pt = if reverse { t + 1 } else { t - 1 };
                outer_add(g_rec, &da, &states[pt * stride + col..pt * stride + col + h]);
            }
            matvec_t_add(&mut d_input[t * self.inputs..(t + 1) * self.inputs], &self.input_weight, &da);
            carry.iter_mut().for_each(|c| *c = 0.0);
            matvec_t_add(&mut carry, &self.recurrent_weight, &da);
        }
    }
}

/// `out += W x` for row-major `W` with `out.len()` rows.
fn matvec_add(out: &mut [f64], weight: &[f64], x: &[f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(weight.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
    }
}

/// `out += W^T d`.
fn matvec_t_add(out: &mut [f64], weight: &[f64], d: &[f64]) {
    let cols = out.len();
    for (dv, row) in d.iter().zip(weight.chunks_exact(cols)) {
        if *dv != 0.0 {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * dv;
            }
        }
    }
}

/// `g += d x^T`.
fn outer_add(g: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (dv, row) in d.iter().zip(g.chunks_exact_mut(cols)) {
        if *dv != 0.0 {
            for (o, v) in row.iter_mut().zip(x) {
                *o += dv * v;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

impl HiddenActivation {
    fn apply(self, x: f64) -> f64 {
        match self {
            HiddenActivation::Tanh => libm::tanh(x),
            HiddenActivation::Relu => x.max(0.0),
            HiddenActivation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative expressed through the activation's output `y`.
    fn derivative(self, y: f64) -> f64 {
        match self {
            HiddenActivation::Tanh => 1.0 - y * y,
            HiddenActivation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            HiddenActivation::Sigmoid => y * (1.0 - y),
        }
    }
}

impl ModelParams {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    pub fn norm(&self) -> Option<&FeatureNorm> {
        self.norm.as_ref()
    }

    pub fn set_norm(&mut self, norm: Option<FeatureNorm>) -> Result<()> {
        if let Some(n) = &norm {
            if n.mean.len() != self.spec.input_bins || n.inv_std.len() != self.spec.input_bins {
                return Err(Error::ShapeMismatch("normalization width differs from input bins".into()));
            }
        }
        self.norm = norm;
        Ok(())
    }

    pub fn set_dropout(&mut self, dropout: f64) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.dropout = dropout;
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    /// Every trainable tensor in a fixed order: per layer its weights then
    /// biases (a bidirectional layer lists the forward cell first), then the head.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { dense, .. } => out.extend([&dense.weight[..], &dense.bias[..]]),
                Layer::Recurrent(c) => out.extend([&c.input_weight[..], &c.recurrent_weight[..], &c.bias[..]]),
                Layer::BiRecurrent { forward, backward } => {
                    for c in [forward, backward] {
                        out.extend([&c.input_weight[..], &c.recurrent_weight[..], &c.bias[..]]);
                    }
                }
            }
        }
        out.extend([&self.head.weight[..], &self.head.bias[..]]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { dense, .. } => {
                    out.push(&mut dense.weight);
                    out.push(&mut dense.bias);
                }
                Layer::Recurrent(c) => {
                    out.push(&mut c.input_weight);
                    out.push(&mut c.recurrent_weight);
                    out.push(&mut c.bias);
                }
                Layer::BiRecurrent { forward, backward } => {
                    for c in [forward, backward] {
                        out.push(&mut c.input_weight);
                        out.push(&mut c.recurrent_weight);
                        out.push(&mut c.bias);
                    }
                }
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// `params -= rate * grads`.
    pub fn apply_gradients(&mut self, grads: &Gradients, rate: f64) {
        for (p, g) in self.tensors_mut().into_iter().zip(&grads.tensors) {
            for (x, d) in p.iter_mut().zip(g) {
                *x -= rate * d;
            }
        }
    }

    /// Estimates `S` masks from mixture magnitudes.
    pub fn forward(&self, features: &MagSpectrogram, mode: Mode, seed: u64) -> Result<(MaskSet, ForwardTrace)> {
        let bins = self.spec.input_bins;
        if features.bins() != bins {
            return Err(Error::ShapeMismatch(format!(
                "features have {} bins, model expects {bins}",
                features.bins()
            )));
        }
        if features.frames() == 0 {
            return Err(Error::ShapeMismatch("features have no frames".into()));
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        let frames = features.frames();
        let dropout_rate = if mode == Mode::Train { self.spec.dropout } else { 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut x = features.as_slice().to_vec();
        if let Some(norm) = &self.norm {
            for t in 0..frames {
                norm.apply(features.frame(t), &mut x[t * bins..(t + 1) * bins]);
            }
        }

        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        let mut dropout = Vec::with_capacity(self.layers.len() + 1);
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut width = bins;
        for (k, layer) in self.layers.iter().enumerate() {
            let mask = if k > 0 { apply_dropout(&mut x, dropout_rate, &mut rng) } else { None };
            let out_width = self.spec.layers[k].output_width();
            let mut out = vec![0.0; frames * out_width];
            match layer {
                Layer::Dense { dense, activation } => {
                    for t in 0..frames {
                        let row = &mut out[t * out_width..(t + 1) * out_width];
                        dense.apply(&x[t * width..(t + 1) * width], row);
                        row.iter_mut().for_each(|v| *v = activation.apply(*v));
                    }
                }
                Layer::Recurrent(cell) => cell.run(&x, frames, false, &mut out, out_width, 0),
                Layer::BiRecurrent { forward, backward } => {
                    forward.run(&x, frames, false, &mut out, out_width, 0);
                    backward.run(&x, frames, true, &mut out, out_width, forward.width);
                }
            }
            inputs.push(x);
            dropout.push(mask);
            x = out.clone();
            outputs.push(out);
            width = out_width;
        }

        let mask = if self.layers.is_empty() {
            None
        } else {
            apply_dropout(&mut x, dropout_rate, &mut rng)
        };
        let out_width = self.spec.output_width();
        let mut masks = vec![0.0; frames * out_width];
        for t in 0..frames {
            let row = &mut masks[t * out_width..(t + 1) * out_width];
            self.head.apply(&x[t * width..(t + 1) * width], row);
            self.activate_head(row);
        }
        inputs.push(x);
        dropout.push(mask);

        let speakers = self.spec.speakers;
        let grids = (0..speakers)
            .map(|s| Grid::from_fn(bins, frames, |t, f| masks[t * out_width + s * bins + f]))
            .collect();
        let trace = ForwardTrace {
            frames,
            inputs,
            dropout,
            outputs,
            masks,
        };
        Ok((MaskSet::new(MaskKind::Estimated, grids)?, trace))
    }

    fn activate_head(&self, row: &mut [f64]) {
        let bins = self.spec.input_bins;
        let speakers = self.spec.speakers;
        match self.spec.output {
            OutputActivation::Softmax => {
                for f in 0..bins {
                    let max = (0..speakers).map(|s| row[s * bins + f]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for s in 0..speakers {
                        let e = libm::exp(row[s * bins + f] - max);
                        row[s * bins + f] = e;
                        total += e;
                    }
                    for s in 0..speakers {
                        row[s * bins + f] /= total;
                    }
                }
            }
            OutputActivation::Sigmoid => row.iter_mut().for_each(|v| *v = sigmoid(*v)),
            OutputActivation::Relu => row.iter_mut().for_each(|v| *v = v.max(0.0)),
            OutputActivation::Tanh => row.iter_mut().for_each(|v| *v = libm::tanh(*v)),
        }
    }

    /// Pre-activation gradient of the head from mask gradients `g` (one row).
    fn head_delta(&self, masks: &[f64], g: &[f64], out: &mut [f64]) {
        let bins = self.spec.input_bins;
        let speakers = self.spec.speakers;
        match self.spec.output {
            OutputActivation::Softmax => {
                for f in 0..bins {
                    let dot: f64 = (0..speakers).map(|s| masks[s * bins + f] * g[s * bins + f]).sum();
                    for s in 0..speakers {
                        let i = s * bins + f;
                        out[i] = masks[i] * (g[i] - dot);
                    }
                }
            }
            OutputActivation::Sigmoid => {
                for i in 0..out.len() {
                    out[i] = g[i] * masks[i] * (1.0 - masks[i]);
                }
            }
            OutputActivation::Relu => {
                for i in 0..out.len() {
                    out[i] = if masks[i] > 0.0 { g[i] } else { 0.0 };
                }
            }
            OutputActivation::Tanh => {
                for i in 0..out.len() {
                    out[i] = g[i] * (1.0 - masks[i] * masks[i]);
                }
            }
        }
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient with respect to each estimated mask.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &[Grid<f64>]) -> Result<Gradients> {
        let bins = self.spec.input_bins;
        let speakers = self.spec.speakers;
        let frames = trace.frames;
        if trace.inputs.len() != self.layers.len() + 1 || trace.masks.len() != frames * bins * speakers {
            return Err(Error::ShapeMismatch("trace does not match these parameters".into()));
        }
        if upstream.len() != speakers {
            return Err(Error::SpeakerMismatch {
                expected: speakers,
                actual: upstream.len(),
            });
        }
        if upstream.iter().any(|g| g.shape() != (bins, frames)) {
            return Err(Error::ShapeMismatch("upstream gradient shape differs from masks".into()));
        }

        let mut grads = Gradients::zeros_like(self);
        let n_tensors = grads.tensors.len();
        let out_width = self.spec.output_width();

        // Head.
        let head_in = &trace.inputs[self.layers.len()];
        let in_width = self.head.inputs;
        let mut d_x = vec![0.0; frames * in_width];
        {
            let (gw, gb) = grads.tensors[n_tensors - 2..].split_at_mut(1);
            let mut g_row = vec![0.0; out_width];
            let mut delta = vec![0.0; out_width];
            for t in 0..frames {
                for s in 0..speakers {
                    g_row[s * bins..(s + 1) * bins].copy_from_slice(upstream[s].frame(t));
                }
                self.head_delta(&trace.masks[t * out_width..(t + 1) * out_width], &g_row, &mut delta);
                outer_add(&mut gw[0], &delta, &head_in[t * in_width..(t + 1) * in_width]);
                for (g, d) in gb[0].iter_mut().zip(&delta) {
                    *g += d;
                }
                matvec_t_add(&mut d_x[t * in_width..(t + 1) * in_width], &self.head.weight, &delta);
            }
        }
        apply_mask_grad(&mut d_x, &trace.dropout[self.layers.len()]);

        // Hidden layers, top to bottom.
        let mut tensor_end = n_tensors - 2;
        for k in (0..self.layers.len()).rev() {
            let input = &trace.inputs[k];
            let output = &trace.outputs[k];
            let width = self.spec.layers[k].output_width();
            let layer = &self.layers[k];
            let count = match layer {
                Layer::Dense { .. } => 2,
                Layer::Recurrent(_) => 3,
                Layer::BiRecurrent { .. } => 6,
            };
            let start = tensor_end - count;
            let slots = &mut grads.tensors[start..tensor_end];
            let in_width = input.len() / frames;
            let mut d_in = vec![0.0; frames * in_width];
            match layer {
                Layer::Dense { dense, activation } => {
                    let (gw, gb) = slots.split_at_mut(1);
                    let mut delta = vec![0.0; width];
                    for t in 0..frames {
                        let y = &output[t * width..(t + 1) * width];
                        let dy = &d_x[t * width..(t + 1) * width];
                        for i in 0..width {
                            delta[i] = dy[i] * activation.derivative(y[i]);
                        }
                        outer_add(&mut gw[0], &delta, &input[t * in_width..(t + 1) * in_width]);
                        for (g, d) in gb[0].iter_mut().zip(&delta) {
                            *g += d;
                        }
                        matvec_t_add(&mut d_in[t * in_width..(t + 1) * in_width], &dense.weight, &delta);
                    }
                }
                Layer::Recurrent(cell) => {
                    let [a, b, c] = slots else { unreachable!() };
                    cell.backprop(input, frames, false, output, &d_x, width, 0, [a, b, c], &mut d_in);
                }
                Layer::BiRecurrent { forward, backward } => {
                    let [a, b, c, d, e, f] = slots else { unreachable!() };
                    forward.backprop(input, frames, false, output, &d_x, width, 0, [a, b, c], &mut d_in);
                    backward.backprop(input, frames, true, output, &d_x, width, forward.width, [d, e, f], &mut d_in);
                }
            }
            apply_mask_grad(&mut d_in, &trace.dropout[k]);
            d_x = d_in;
            tensor_end = start;
        }
        Ok(grads)
    }
}

/// Inverted dropout in place; returns the scale factors used.
fn apply_dropout(x: &mut [f64], rate: f64, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    let mask: Vec<f64> = x
        .iter()
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    for (v, m) in x.iter_mut().zip(&mask) {
        *v *= m;
    }
    Some(mask)
}

fn apply_mask_grad(d: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        for (v, m) in d.iter_mut().zip(mask) {
            *v *= m;
        }
    }
}
