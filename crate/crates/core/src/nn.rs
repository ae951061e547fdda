//! A small multilayer perceptron over flat parameter vectors.
//!
//! Parameters for every layer live in one contiguous [`ParamVector`]. Layer
//! `l` stores its weight matrix row-major with shape `(n_out, n_in)`
//! followed by its `n_out` biases; each layer is one block of the vector's
//! [`BlockSpec`]. Loss is mean softmax cross-entropy and gradients come from
//! hand-written backpropagation, so every quantity used by the training
//! algorithms is exact and checkable against finite differences.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::RngSeed;

/// A named contiguous slice of a parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Ordered partition of a flat parameter vector into named blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    blocks: Vec<Block>,
}

impl BlockSpec {
    /// Validates that blocks are contiguous, non-overlapping and start at 0.
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Config("block spec has no blocks".into()));
        }
        let mut expected = 0;
        for b in &blocks {
            if b.offset != expected {
                return Err(Error::mismatch(b.name.clone(), expected, b.offset));
            }
            if b.len == 0 {
                return Err(Error::Config(format!("block {} is empty", b.name)));
            }
            expected += b.len;
        }
        Ok(BlockSpec { blocks })
    }

    /// Build from `(name, len)` pairs laid out back to back.
    pub fn contiguous<S: Into<String>>(parts: impl IntoIterator<Item = (S, usize)>) -> Result<Self> {
        let mut offset = 0;
        let blocks = parts
            .into_iter()
            .map(|(name, len)| {
                let b = Block {
                    name: name.into(),
                    offset,
                    len,
                };
                offset += len;
                b
            })
            .collect();
        BlockSpec::new(blocks)
    }

    /// Single block spanning the whole vector.
    pub fn single(len: usize) -> Result<Self> {
        BlockSpec::contiguous([("all", len)])
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len)
    }

    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        let blk = &self.blocks[b];
        blk.offset..blk.offset + blk.len
    }
}

/// Flat model parameters together with their block partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    blocks: Arc<BlockSpec>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, blocks: Arc<BlockSpec>) -> Result<Self> {
        if values.len() != blocks.total_len() {
            return Err(Error::mismatch("params", blocks.total_len(), values.len()));
        }
        let pv = ParamVector { values, blocks };
        pv.check_finite()?;
        Ok(pv)
    }

    pub fn zeros(blocks: Arc<BlockSpec>) -> Self {
        ParamVector {
            values: vec![0.0; blocks.total_len()],
            blocks,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn block_spec(&self) -> &Arc<BlockSpec> {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.num_blocks()
    }

    pub fn block(&self, b: usize) -> &[f64] {
        &self.values[self.blocks.range(b)]
    }

    pub fn block_mut(&mut self, b: usize) -> &mut [f64] {
        let r = self.blocks.range(b);
        &mut self.values[r]
    }

    /// Errors unless `other` has the same block partition.
    pub fn check_same_shape(&self, other: &ParamVector) -> Result<()> {
        if Arc::ptr_eq(&self.blocks, &other.blocks) || self.blocks == other.blocks {
            return Ok(());
        }
        for (i, (a, b)) in self
            .blocks
            .blocks()
            .iter()
            .zip(other.blocks.blocks())
            .enumerate()
        {
            if a != b {
                return Err(Error::mismatch(format!("block {i} ({})", a.name), a.len, b.len));
            }
        }
        Err(Error::mismatch(
            "block count",
            self.blocks.num_blocks(),
            other.blocks.num_blocks(),
        ))
    }

    pub fn check_finite(&self) -> Result<()> {
        for (b, blk) in self.blocks.blocks().iter().enumerate() {
            if self.block(b).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("block {}", blk.name)));
            }
        }
        Ok(())
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `h`.
    fn derivative(self, z: f64, h: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - h * h,
        }
    }
}

/// Architecture of a fully connected classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl MlpSpec {
    /// `layer_sizes` runs from input dimension to class count.
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output sizes".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if *layer_sizes.last().unwrap() < 2 {
            return Err(Error::Config("class count must be at least 2".into()));
        }
        Ok(MlpSpec {
            layer_sizes,
            activation,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// `(n_in, n_out)` of each layer.
    pub fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layer_sizes.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().map(|(i, o)| (i + 1) * o).sum()
    }

    /// One block per layer, named `layer{l}`.
    pub fn block_spec(&self) -> Arc<BlockSpec> {
        let spec = BlockSpec::contiguous(
            self.layer_dims()
                .enumerate()
                .map(|(l, (i, o))| (format!("layer{l}"), (i + 1) * o)),
        )
        .expect("layer sizes are positive");
        Arc::new(spec)
    }

    /// Index of the block holding the classifier (last layer).
    pub fn classifier_block(&self) -> usize {
        self.num_layers() - 1
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.num_layers());
        let mut off = 0;
        for (i, o) in self.layer_dims() {
            offsets.push(off);
            off += (i + 1) * o;
        }
        offsets
    }

    /// Names the first layer whose parameters the vector cannot supply.
    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() == self.param_count() {
            return Ok(());
        }
        let mut end = 0;
        for (l, (i, o)) in self.layer_dims().enumerate() {
            end += (i + 1) * o;
            if end > params.len() {
                return Err(Error::mismatch(format!("layer{l}"), end, params.len()));
            }
        }
        Err(Error::mismatch("trailing params", self.param_count(), params.len()))
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.dim() != self.input_dim() {
            return Err(Error::mismatch("layer0 input", self.input_dim(), batch.dim()));
        }
        if let Some(&bad) = batch.labels().iter().find(|&&y| y >= self.num_classes()) {
            return Err(Error::mismatch("label range", self.num_classes(), bad));
        }
        Ok(())
    }
}

/// A mini-batch of samples, features stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset("batch has no samples".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::mismatch("batch features", labels.len() * dim, features.len()));
        }
        Ok(Batch {
            features,
            labels,
            dim,
        })
    }

    /// Gather `rows` out of a row-major feature table.
    pub fn gather(features: &[f64], labels: &[usize], dim: usize, rows: &[usize]) -> Result<Self> {
        let mut f = Vec::with_capacity(rows.len() * dim);
        let mut l = Vec::with_capacity(rows.len());
        for &r in rows {
            f.extend_from_slice(&features[r * dim..(r + 1) * dim]);
            l.push(labels[r]);
        }
        Batch::new(f, l, dim)
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

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &MlpSpec, seed: RngSeed) -> ParamVector {
    init_params_with(spec, &mut seed.stream("mlp-init", &[]))
}

pub fn init_params_with<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> ParamVector {
    let mut values = Vec::with_capacity(spec.param_count());
    for (n_in, n_out) in spec.layer_dims() {
        let s = (6.0 / (n_in + n_out) as f64).sqrt();
        values.extend((0..n_in * n_out).map(|_| rng.random_range(-s..s)));
        values.extend(std::iter::repeat_n(0.0, n_out));
    }
    ParamVector {
        values,
        blocks: spec.block_spec(),
    }
}

/// Cached pre- and post-activations of one forward pass.
struct Trace {
    /// `pre[l]` is `n × n_out(l)`.
    pre: Vec<Vec<f64>>,
    /// `post[l]` is the input of layer `l`; `post[0]` is the batch itself.
    post: Vec<Vec<f64>>,
}

fn forward_trace(spec: &MlpSpec, params: &[f64], features: &[f64], n: usize) -> Trace {
    let offsets = spec.layer_offsets();
    let last = spec.num_layers() - 1;
    let mut pre = Vec::with_capacity(spec.num_layers());
    let mut post = Vec::with_capacity(spec.num_layers());
    post.push(features.to_vec());
    for (l, (n_in, n_out)) in spec.layer_dims().enumerate() {
        let w = &params[offsets[l]..offsets[l] + n_in * n_out];
        let b = &params[offsets[l] + n_in * n_out..offsets[l] + (n_in + 1) * n_out];
        let input = &post[l];
        let mut z = vec![0.0; n * n_out];
        for i in 0..n {
            let x = &input[i * n_in..(i + 1) * n_in];
            for (o, zo) in z[i * n_out..(i + 1) * n_out].iter_mut().enumerate() {
                *zo = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
            }
        }
        if l < last {
            let h = z.iter().map(|&v| spec.activation.apply(v)).collect();
            post.push(h);
        }
        pre.push(z);
    }
    Trace { pre, post }
}

/// `ln Σ exp(row)` with max-shift.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy and the logits it was computed from.
pub fn forward_loss(spec: &MlpSpec, params: &ParamVector, batch: &Batch) -> Result<(f64, Matrix)> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let n = batch.len();
    let c = spec.num_classes();
    let mut trace = forward_trace(spec, params.values(), batch.features(), n);
    let logits = trace.pre.pop().unwrap();
    let loss = logits
        .chunks_exact(c)
        .zip(batch.labels())
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum::<f64>()
        / n as f64;
    Ok((loss, Matrix::from_vec(n, c, logits)))
}

/// Exact gradient of the mean cross-entropy with respect to every parameter.
pub fn grad_params(spec: &MlpSpec, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    loss_and_grad(spec, params, batch).map(|(_, g)| g)
}

/// Loss and gradient from one forward/backward pass.
pub fn loss_and_grad(
    spec: &MlpSpec,
    params: &ParamVector,
    batch: &Batch,
) -> Result<(f64, ParamVector)> {
    spec.check_params(params)?;
    spec.check_batch(batch)?;
    let n = batch.len();
    let c = spec.num_classes();
    let offsets = spec.layer_offsets();
    let dims: Vec<(usize, usize)> = spec.layer_dims().collect();
    let p = params.values();
    let trace = forward_trace(spec, p, batch.features(), n);

    let logits = trace.pre.last().unwrap();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    // dL/dz for the output layer: (softmax - onehot) / n
    let mut delta = vec![0.0; n * c];
    for i in 0..n {
        let row = &logits[i * c..(i + 1) * c];
        let lse = log_sum_exp(row);
        let y = batch.labels()[i];
        loss += lse - row[y];
        for k in 0..c {
            delta[i * c + k] = (row[k] - lse).exp() * inv_n;
        }
        delta[i * c + y] -= inv_n;
    }
    loss *= inv_n;

    let mut grad = vec![0.0; p.len()];
    for l in (0..dims.len()).rev() {
        let (n_in, n_out) = dims[l];
        let input = &trace.post[l];
        let (gw, gb) = grad[offsets[l]..offsets[l] + (n_in + 1) * n_out].split_at_mut(n_in * n_out);
        for i in 0..n {
            let d = &delta[i * n_out..(i + 1) * n_out];
            let x = &input[i * n_in..(i + 1) * n_in];
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                gb[o] += dv;
                for (g, &xv) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                    *g += dv * xv;
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &p[offsets[l]..offsets[l] + n_in * n_out];
        let z_prev = &trace.pre[l - 1];
        let mut next = vec![0.0; n * n_in];
        for i in 0..n {
            let d = &delta[i * n_out..(i + 1) * n_out];
            let out = &mut next[i * n_in..(i + 1) * n_in];
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                for (acc, &wv) in out.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *acc += dv * wv;
                }
            }
            for (j, acc) in out.iter_mut().enumerate() {
                let idx = i * n_in + j;
                *acc *= spec.activation.derivative(z_prev[idx], input[idx]);
            }
        }
        delta = next;
    }

    Ok((
        loss,
        ParamVector {
            values: grad,
            blocks: params.block_spec().clone(),
        },
    ))
}

/// Arg-max class per sample; ties resolve to the lowest class index.
pub fn predict(spec: &MlpSpec, params: &ParamVector, features: &[f64]) -> Result<Vec<usize>> {
    spec.check_params(params)?;
    let dim = spec.input_dim();
    if !features.len().is_multiple_of(dim) {
        return Err(Error::mismatch("layer0 input", dim, features.len() % dim));
    }
    let n = features.len() / dim;
    if n == 0 {
        return Ok(Vec::new());
    }
    let c = spec.num_classes();
    let trace = forward_trace(spec, params.values(), features, n);
    let logits = trace.pre.last().unwrap();
    Ok(logits
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}
