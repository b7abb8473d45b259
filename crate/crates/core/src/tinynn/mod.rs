//! Small fully-connected network with hand-written backprop.
//!
//! Parameters live in one flat `f64` vector. Per layer, the weight matrix
//! comes first (row-major, `in` rows by `out` columns) followed by the bias
//! vector. Hidden layers use ReLU; the last layer emits raw logits.

mod loss;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub(crate) use loss::kl_unchecked;
pub use loss::{ce_loss, distill_loss, kl_divergence, softmax_t, LossGrad, KL_FLOOR};
pub use train::{average_params, evaluate, train_distill, train_local};

/// Magic prefix of the binary model encoding.
pub const MODEL_MAGIC: &[u8; 7] = b"RDFLMP1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("bad layer shapes {0:?}")]
    BadShapes(Vec<usize>),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no models to average")]
    EmptyList,
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("invalid dataset: {0}")]
    BadDataset(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("cannot decode model: {0}")]
    Decode(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shapes: Vec<usize>,
    values: Vec<f64>,
}

/// Number of parameters an MLP with the given layer widths carries.
pub fn param_count(shapes: &[usize]) -> usize {
    shapes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn check_shapes(shapes: &[usize]) -> Result<(), NnError> {
    if shapes.len() < 2 || shapes.contains(&0) {
        return Err(NnError::BadShapes(shapes.to_vec()));
    }
    Ok(())
}

impl ModelParams {
    pub fn from_values(shapes: Vec<usize>, values: Vec<f64>) -> Result<Self, NnError> {
        check_shapes(&shapes)?;
        if values.len() != param_count(&shapes) {
            return Err(NnError::ShapeMismatch(format!(
                "{} values for shapes {:?} (need {})",
                values.len(),
                shapes,
                param_count(&shapes)
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(NnError::Decode("non-finite parameter".into()));
        }
        Ok(Self { shapes, values })
    }

    pub fn zeros(shapes: Vec<usize>) -> Result<Self, NnError> {
        let n = param_count(&shapes);
        Self::from_values(shapes, vec![0.0; n])
    }

    pub fn shapes(&self) -> &[usize] {
        &self.shapes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn n_layers(&self) -> usize {
        self.shapes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.shapes.last().unwrap()
    }

    /// `(weight offset, bias offset)` of layer `l` in the flat vector.
    pub(crate) fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.shapes[..=l]
            .windows(2)
            .take(l)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        (start, start + self.shapes[l] * self.shapes[l + 1])
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.shapes == other.shapes
    }

    pub(crate) fn ensure_same_shape(&self, other: &ModelParams) -> Result<(), NnError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shapes, other.shapes
            )))
        }
    }

    /// `RDFLMP1`, dim count (u32 LE), dims (u32 LE each), values (f64 LE each).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(7 + 4 * (1 + self.shapes.len()) + 8 * self.values.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&(self.shapes.len() as u32).to_le_bytes());
        for d in &self.shapes {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let rest = bytes
            .strip_prefix(MODEL_MAGIC.as_slice())
            .ok_or_else(|| NnError::Decode("missing magic".into()))?;
        let (n_dims, mut rest) = take_u32(rest)?;
        let mut shapes = Vec::with_capacity(n_dims as usize);
        for _ in 0..n_dims {
            let (d, r) = take_u32(rest)?;
            shapes.push(d as usize);
            rest = r;
        }
        check_shapes(&shapes)?;
        let n = param_count(&shapes);
        if rest.len() != 8 * n {
            return Err(NnError::Decode(format!(
                "expected {} value bytes, found {}",
                8 * n,
                rest.len()
            )));
        }
        let values = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_values(shapes, values)
    }

    /// Encoded length without encoding.
    pub fn encoded_len(&self) -> usize {
        7 + 4 * (1 + self.shapes.len()) + 8 * self.values.len()
    }
}

fn take_u32(bytes: &[u8]) -> Result<(u32, &[u8]), NnError> {
    if bytes.len() < 4 {
        return Err(NnError::Decode("truncated header".into()));
    }
    let (head, rest) = bytes.split_at(4);
    Ok((u32::from_le_bytes(head.try_into().unwrap()), rest))
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(shapes: &[usize], seed: u64) -> Result<ModelParams, NnError> {
    check_shapes(shapes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::zeros(shapes.to_vec())?;
    for l in 0..model.n_layers() {
        let (fan_in, fan_out) = (shapes[l], shapes[l + 1]);
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let (w, b) = model.layer_offsets(l);
        for v in &mut model.values[w..b] {
            *v = rng.random_range(-limit..limit);
        }
    }
    Ok(model)
}

/// Labeled feature matrix, rows are examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self, NnError> {
        if dim == 0 || n_classes == 0 {
            return Err(NnError::BadDataset("zero width or zero classes".into()));
        }
        if features.len() != dim * labels.len() {
            return Err(NnError::BadDataset(format!(
                "{} features for {} rows of width {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(NnError::BadDataset(format!("label {bad} >= {n_classes}")));
        }
        Ok(Self {
            dim,
            features,
            labels,
            n_classes,
        })
    }

    pub fn empty(dim: usize, n_classes: usize) -> Self {
        Self {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
            n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, row: &[f64], label: usize) {
        assert_eq!(row.len(), self.dim);
        assert!(label < self.n_classes);
        self.features.extend_from_slice(row);
        self.labels.push(label);
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::empty(self.dim, self.n_classes);
        out.features.reserve(indices.len() * self.dim);
        for &i in indices {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }

    /// Same features, relabelled.
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Dataset, NnError> {
        Dataset::new(self.dim, self.features.clone(), labels, self.n_classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Feature columns then label; debugging aid only.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            for v in self.row(i) {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{}\n", self.labels[i]));
        }
        out
    }
}

/// Forward pass; returns the logits as a row-major `rows x out` matrix.
pub fn forward(model: &ModelParams, features: &[f64]) -> Result<Vec<f64>, NnError> {
    let cache = forward_cached(model, features)?;
    Ok(cache.into_logits())
}

/// Post-activation outputs of every layer; `acts[0]` is the input.
pub(crate) struct ForwardCache {
    pub rows: usize,
    pub acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &[f64] {
        self.acts.last().unwrap()
    }

    fn into_logits(mut self) -> Vec<f64> {
        self.acts.pop().unwrap()
    }
}

pub(crate) fn forward_cached(
    model: &ModelParams,
    features: &[f64],
) -> Result<ForwardCache, NnError> {
    let width = model.input_dim();
    if !features.len().is_multiple_of(width) {
        return Err(NnError::ShapeMismatch(format!(
            "{} features is not a multiple of input width {}",
            features.len(),
            width
        )));
    }
    let rows = features.len() / width;
    let mut acts = Vec::with_capacity(model.shapes.len());
    acts.push(features.to_vec());
    let last = model.n_layers() - 1;
    for l in 0..model.n_layers() {
        let (n_in, n_out) = (model.shapes[l], model.shapes[l + 1]);
        let (w_off, b_off) = model.layer_offsets(l);
        let w = &model.values[w_off..b_off];
        let b = &model.values[b_off..b_off + n_out];
        let input = &acts[l];
        let mut out = vec![0.0; rows * n_out];
        for r in 0..rows {
            let x = &input[r * n_in..(r + 1) * n_in];
            let z = &mut out[r * n_out..(r + 1) * n_out];
            z.copy_from_slice(b);
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let w_row = &w[i * n_out..(i + 1) * n_out];
                for (zo, wo) in z.iter_mut().zip(w_row) {
                    *zo += xi * wo;
                }
            }
            if l != last {
                for v in z.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        acts.push(out);
    }
    Ok(ForwardCache { rows, acts })
}

/// Backprop from `dlogits` (already scaled by the caller) to a flat gradient.
pub(crate) fn backward(model: &ModelParams, cache: &ForwardCache, dlogits: Vec<f64>) -> Vec<f64> {
    let mut grad = vec![0.0; model.values.len()];
    let rows = cache.rows;
    let mut delta = dlogits;
    for l in (0..model.n_layers()).rev() {
        let (n_in, n_out) = (model.shapes[l], model.shapes[l + 1]);
        let (w_off, b_off) = model.layer_offsets(l);
        let input = &cache.acts[l];
        {
            let (gw, gb) = grad[w_off..b_off + n_out].split_at_mut(b_off - w_off);
            for r in 0..rows {
                let x = &input[r * n_in..(r + 1) * n_in];
                let d = &delta[r * n_out..(r + 1) * n_out];
                for (gbo, dv) in gb.iter_mut().zip(d) {
                    *gbo += dv;
                }
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (g, dv) in gw[i * n_out..(i + 1) * n_out].iter_mut().zip(d) {
                        *g += xi * dv;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        // Propagate to the previous layer's post-ReLU activations.
        let w = &model.values[w_off..b_off];
        let mut prev = vec![0.0; rows * n_in];
        for r in 0..rows {
            let d = &delta[r * n_out..(r + 1) * n_out];
            let x = &input[r * n_in..(r + 1) * n_in];
            for i in 0..n_in {
                if x[i] <= 0.0 {
                    continue;
                }
                let w_row = &w[i * n_out..(i + 1) * n_out];
                prev[r * n_in + i] = w_row.iter().zip(d).map(|(a, b)| a * b).sum();
            }
        }
        delta = prev;
    }
    grad
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
