//! Temporal identity feature field, per-pixel classifier and Adam.
//!
//! The field maps a canonical Gaussian center and a timestamp to a
//! 32-dimensional identity encoding through a sinusoidal positional
//! encoding and a ReLU MLP (three hidden layers of 256). The classifier is
//! a per-pixel affine map from encodings to 256 class logits; it is applied
//! to rendered encodings and to raw per-Gaussian encodings alike.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identity encoding width.
pub const ENCODING_DIM: usize = 32;
/// Hidden layer width.
pub const HIDDEN_DIM: usize = 256;
/// Number of hidden layers.
pub const HIDDEN_LAYERS: usize = 3;
/// Classifier capacity; class 0 is void.
pub const CLASS_COUNT: usize = 256;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SA4D";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncodingConfig {
    /// Frequencies per position component.
    pub position_freqs: usize,
    /// Frequencies for the timestamp.
    pub time_freqs: usize,
}

impl Default for PositionalEncodingConfig {
    fn default() -> Self {
        PositionalEncodingConfig {
            position_freqs: 10,
            time_freqs: 6,
        }
    }
}

impl PositionalEncodingConfig {
    pub fn dim(&self) -> usize {
        6 * self.position_freqs + 2 * self.time_freqs
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldConfig {
    #[serde(default)]
    pub encoding: PositionalEncodingConfig,
    /// When false the time input is pinned to zero, which turns the field
    /// into a time-invariant per-Gaussian encoding.
    #[serde(default = "yes")]
    pub temporal: bool,
}

fn yes() -> bool {
    true
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            encoding: PositionalEncodingConfig::default(),
            temporal: true,
        }
    }
}

fn push_freqs(v: f64, freqs: usize, out: &mut Vec<f64>) {
    let mut f = std::f64::consts::PI;
    for _ in 0..freqs {
        out.push((f * v).sin());
        out.push((f * v).cos());
        f *= 2.0;
    }
}

/// Sinusoidal encoding of a position and a timestamp: for each input
/// component in turn, `(sin(2^k π v), cos(2^k π v))` for `k = 0..L`.
pub fn encode(x: &Vector3<f64>, t: f64, cfg: &PositionalEncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.dim());
    for v in x.iter() {
        push_freqs(*v, cfg.position_freqs, &mut out);
    }
    push_freqs(t, cfg.time_freqs, &mut out);
    out
}

/// Affine layer `y = x W + b` with `W` stored as `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    fn xavier(input: usize, output: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Dense {
            weight: Array2::from_shape_fn((input, output), |_| gain * rng.gen_range(-limit..limit)),
            bias: Array1::zeros(output),
        }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Trainable parameters: the field MLP plus the classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityField {
    pub config: FieldConfig,
    /// Hidden layers followed by the encoding output layer.
    pub layers: Vec<Dense>,
    pub classifier: Dense,
}

/// Gradients with the same layout as [`IdentityField`]'s parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradients {
    pub layers: Vec<Dense>,
    pub classifier: Dense,
}

/// Activations kept from a batched forward pass.
#[derive(Clone, Debug)]
pub struct FieldActivations {
    pub input: Array2<f64>,
    /// Post-ReLU outputs of the hidden layers.
    pub hidden: Vec<Array2<f64>>,
    /// Identity encodings, one row per Gaussian.
    pub encodings: Array2<f64>,
}

impl IdentityField {
    /// Freshly initialized parameters: Xavier-uniform layers with zero
    /// biases, the classifier scaled by 0.1 so that initial class
    /// probabilities are close to uniform.
    pub fn new(config: FieldConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![config.encoding.dim()];
        dims.extend([HIDDEN_DIM; HIDDEN_LAYERS]);
        dims.push(ENCODING_DIM);
        let layers = dims.windows(2).map(|d| Dense::xavier(d[0], d[1], 1.0, &mut rng)).collect();
        let classifier = Dense::xavier(ENCODING_DIM, CLASS_COUNT, 0.1, &mut rng);
        IdentityField {
            config,
            layers,
            classifier,
        }
    }

    /// Layer widths from input to encoding output.
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].input_dim()];
        d.extend(self.layers.iter().map(Dense::output_dim));
        d
    }

    pub fn zero_gradients(&self) -> FieldGradients {
        FieldGradients {
            layers: self.layers.iter().map(|l| Dense::zeros(l.input_dim(), l.output_dim())).collect(),
            classifier: Dense::zeros(self.classifier.input_dim(), self.classifier.output_dim()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter tensors in checkpoint order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for l in self.layers.iter().chain(std::iter::once(&self.classifier)) {
            v.push(l.weight.as_slice().expect("standard layout"));
            v.push(l.bias.as_slice().expect("standard layout"));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::new();
        for l in self.layers.iter_mut().chain(std::iter::once(&mut self.classifier)) {
            v.push(l.weight.as_slice_mut().expect("standard layout"));
            v.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        v
    }

    fn encode_batch(&self, positions: &[Vector3<f64>], t: f64) -> Array2<f64> {
        let enc = &self.config.encoding;
        let t = if self.config.temporal { t } else { 0.0 };
        let mut input = Array2::zeros((positions.len(), enc.dim()));
        for (mut row, x) in input.axis_iter_mut(Axis(0)).zip(positions) {
            row.assign(&Array1::from(encode(x, t, enc)));
        }
        input
    }

    /// Identity encodings for every position at time `t`, keeping the
    /// activations needed by [`IdentityField::backward`].
    pub fn forward(&self, positions: &[Vector3<f64>], t: f64) -> Result<FieldActivations> {
        let input = self.encode_batch(positions, t);
        let mut hidden = Vec::with_capacity(self.layers.len() - 1);
        let mut x = input.view().to_owned();
        for layer in &self.layers[..self.layers.len() - 1] {
            let mut y = layer.apply(x.view());
            y.mapv_inplace(|v| if v < 0.0 { 0.0 } else { v });
            hidden.push(y.clone());
            x = y;
        }
        let encodings = self.layers.last().expect("output layer").apply(x.view());
        if encodings.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("identity field produced non-finite encodings".into()));
        }
        Ok(FieldActivations {
            input,
            hidden,
            encodings,
        })
    }

    /// Encodings only.
    pub fn encodings(&self, positions: &[Vector3<f64>], t: f64) -> Result<Array2<f64>> {
        Ok(self.forward(positions, t)?.encodings)
    }

    /// Accumulates field-weight gradients for `d_encodings` into `grads`.
    pub fn backward(&self, acts: &FieldActivations, d_encodings: &Array2<f64>, grads: &mut FieldGradients) {
        let n_layers = self.layers.len();
        let mut delta = d_encodings.clone();
        for li in (0..n_layers).rev() {
            let x = if li == 0 { &acts.input } else { &acts.hidden[li - 1] };
            let g = &mut grads.layers[li];
            ndarray::linalg::general_mat_mul(1.0, &x.t(), &delta, 1.0, &mut g.weight);
            g.bias += &delta.sum_axis(Axis(0));
            if li > 0 {
                let mut prev = delta.dot(&self.layers[li].weight.t());
                Zip::from(&mut prev).and(x).for_each(|d, &h| {
                    if h <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
        }
    }

    /// Class logits for each feature row.
    pub fn logits(&self, features: ArrayView2<f64>) -> Array2<f64> {
        self.classifier.apply(features)
    }

    /// Softmax class probabilities for each feature row.
    pub fn classify(&self, features: ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.logits(features);
        softmax_rows(&mut z);
        z
    }

    /// Accumulates classifier gradients for `d_logits` and returns the
    /// gradient with respect to the input features.
    pub fn classifier_backward(
        &self,
        features: ArrayView2<f64>,
        d_logits: &Array2<f64>,
        grads: &mut FieldGradients,
    ) -> Array2<f64> {
        ndarray::linalg::general_mat_mul(1.0, &features.t(), d_logits, 1.0, &mut grads.classifier.weight);
        grads.classifier.bias += &d_logits.sum_axis(Axis(0));
        d_logits.dot(&self.classifier.weight.t())
    }

    /// Index of the largest entry per row; ties go to the lower class.
    pub fn argmax_rows(scores: &Array2<f64>) -> Vec<u16> {
        scores
            .axis_iter(Axis(0))
            .map(|row| {
                let mut best = 0;
                for (c, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = c;
                    }
                }
                best as u16
            })
            .collect()
    }
}

/// In-place numerically stable softmax over each row.
pub fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.axis_iter_mut(Axis(0)) {
        let m = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

impl FieldGradients {
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v = Vec::new();
        for l in self.layers.iter().chain(std::iter::once(&self.classifier)) {
            v.push(l.weight.as_slice().expect("standard layout"));
            v.push(l.bias.as_slice().expect("standard layout"));
        }
        v
    }

    pub fn scale(&mut self, s: f64) {
        for l in self.layers.iter_mut().chain(std::iter::once(&mut self.classifier)) {
            l.weight *= s;
            l.bias *= s;
        }
    }
}

/// Adam optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(field: &IdentityField, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = field.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter tensor.
pub fn adam_step(field: &mut IdentityField, grads: &FieldGradients, state: &mut AdamState) -> Result<()> {
    adam_update(field.tensors_mut(), &grads.tensors(), state)
}

/// Adam over explicit tensor lists; shared by [`adam_step`] and tests.
pub fn adam_update(params: Vec<&mut [f64]>, grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    let shapes_match = params.len() == grads.len()
        && params.len() == state.first_moment.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.first_moment)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_match {
        return Err(Error::Usage("Adam parameter, gradient and moment shapes differ".into()));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= state.learning_rate * mh / (vh.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Data("checkpoint truncated".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn fill(&mut self, out: &mut [f64]) -> Result<()> {
        for v in out {
            *v = self.f64()?;
        }
        Ok(())
    }
}

/// Serializes parameters and optimizer state.
///
/// Layout (little endian): magic `SA4D`, version, `L_x`, `L_t`, temporal
/// flag, layer count, layer widths (input through classes), all parameters
/// as `f64`, then Adam step, learning rate, β₁, β₂, ε and both moments.
pub fn checkpoint_bytes(field: &IdentityField, adam: &AdamState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, field.config.encoding.position_freqs as u32);
    put_u32(&mut out, field.config.encoding.time_freqs as u32);
    put_u32(&mut out, field.config.temporal as u32);
    let mut dims = field.dims();
    dims.push(field.classifier.output_dim());
    put_u32(&mut out, dims.len() as u32);
    for d in &dims {
        put_u32(&mut out, *d as u32);
    }
    for t in field.tensors() {
        put_f64s(&mut out, t);
    }
    out.extend_from_slice(&adam.step.to_le_bytes());
    put_f64s(&mut out, &[adam.learning_rate, adam.beta1, adam.beta2, adam.epsilon]);
    for m in adam.first_moment.iter().chain(&adam.second_moment) {
        put_f64s(&mut out, m);
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(IdentityField, AdamState)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Data("not a checkpoint: bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let config = FieldConfig {
        encoding: PositionalEncodingConfig {
            position_freqs: c.u32()? as usize,
            time_freqs: c.u32()? as usize,
        },
        temporal: c.u32()? != 0,
    };
    let n = c.u32()? as usize;
    let dims: Vec<usize> = (0..n).map(|_| c.u32().map(|d| d as usize)).collect::<Result<_>>()?;
    let mut expected = vec![config.encoding.dim()];
    expected.extend([HIDDEN_DIM; HIDDEN_LAYERS]);
    expected.push(ENCODING_DIM);
    expected.push(CLASS_COUNT);
    if dims != expected {
        return Err(Error::Data(format!(
            "checkpoint layer widths {dims:?} do not match expected {expected:?}"
        )));
    }
    let mut field = IdentityField::new(config, 0);
    for t in field.tensors_mut() {
        c.fill(t)?;
    }
    let mut adam = AdamState::new(&field, 0.0);
    adam.step = c.u64()?;
    adam.learning_rate = c.f64()?;
    adam.beta1 = c.f64()?;
    adam.beta2 = c.f64()?;
    adam.epsilon = c.f64()?;
    for m in adam.first_moment.iter_mut().chain(adam.second_moment.iter_mut()) {
        c.fill(m)?;
    }
    if c.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint".into()));
    }
    Ok((field, adam))
}

pub fn save_checkpoint(path: &Path, field: &IdentityField, adam: &AdamState) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(field, adam)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(IdentityField, AdamState)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
