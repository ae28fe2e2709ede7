//! A minimal differentiable text classifier: embedding lookup, pooling,
//! linear softmax head. Forward, loss, and gradients are closed-form, so
//! every attack and training routine in the crate reduces to calls here.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::{Error, Result};

/// Shape of a model: vocabulary size `v`, embedding width `h`, classes `C`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub hidden: usize,
    pub classes: usize,
}

/// How token embeddings are pooled into a single vector.
///
/// Mean pooling is position-blind. Position-decay weights the token at
/// index `i` by `1/(i+1)`, normalized over the sequence, so insertion
/// position matters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    PositionDecay,
}

/// One training or evaluation example: token ids plus a class label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl Example {
    pub fn new(tokens: Vec<usize>, label: usize) -> Self {
        Example { tokens, label }
    }
}

/// Full parameter set: embedding matrix (v x h), head weights (h x C),
/// head bias (C). Snapshots serve as both global and local models.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Array2<f64>,
    pub head_weights: Array2<f64>,
    pub head_bias: Array1<f64>,
    pub pooling: Pooling,
}

impl ModelParams {
    pub fn zeros(dims: ModelDims, pooling: Pooling) -> Self {
        ModelParams {
            embedding: Array2::zeros((dims.vocab, dims.hidden)),
            head_weights: Array2::zeros((dims.hidden, dims.classes)),
            head_bias: Array1::zeros(dims.classes),
            pooling,
        }
    }

    /// Seeded initialization, entries uniform in [-0.1, 0.1].
    pub fn init<R: Rng>(dims: ModelDims, pooling: Pooling, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims, pooling);
        for x in p.embedding.iter_mut() {
            *x = rng.gen_range(-0.1..0.1);
        }
        for x in p.head_weights.iter_mut() {
            *x = rng.gen_range(-0.1..0.1);
        }
        for x in p.head_bias.iter_mut() {
            *x = rng.gen_range(-0.1..0.1);
        }
        p
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.embedding.nrows(),
            hidden: self.embedding.ncols(),
            classes: self.head_bias.len(),
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn classes(&self) -> usize {
        self.head_bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.iter().all(|x| x.is_finite())
            && self.head_weights.iter().all(|x| x.is_finite())
            && self.head_bias.iter().all(|x| x.is_finite())
    }

    /// In-place `self += scale * delta`.
    pub fn apply_delta(&mut self, delta: &Delta, scale: f64) {
        self.embedding.scaled_add(scale, &delta.embedding);
        self.head_weights.scaled_add(scale, &delta.head_weights);
        self.head_bias.scaled_add(scale, &delta.head_bias);
    }

    /// Parameter difference `self - other`.
    pub fn minus(&self, other: &ModelParams) -> Delta {
        Delta {
            embedding: &self.embedding - &other.embedding,
            head_weights: &self.head_weights - &other.head_weights,
            head_bias: &self.head_bias - &other.head_bias,
        }
    }
}

/// A parameter-shaped additive value. Used both for gradients
/// (d loss / d parameter) and for client residuals `L_t - G_{t-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Delta {
    pub embedding: Array2<f64>,
    pub head_weights: Array2<f64>,
    pub head_bias: Array1<f64>,
}

/// Gradients share the parameter shape.
pub type Gradient = Delta;

impl Delta {
    pub fn zeros(dims: ModelDims) -> Self {
        Delta {
            embedding: Array2::zeros((dims.vocab, dims.hidden)),
            head_weights: Array2::zeros((dims.hidden, dims.classes)),
            head_bias: Array1::zeros(dims.classes),
        }
    }

    pub fn zeros_like(params: &ModelParams) -> Self {
        Self::zeros(params.dims())
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.embedding.nrows(),
            hidden: self.embedding.ncols(),
            classes: self.head_bias.len(),
        }
    }

    /// In-place `self += c * other`.
    pub fn add_scaled(&mut self, other: &Delta, c: f64) {
        self.embedding.scaled_add(c, &other.embedding);
        self.head_weights.scaled_add(c, &other.head_weights);
        self.head_bias.scaled_add(c, &other.head_bias);
    }

    pub fn scale(&mut self, c: f64) {
        self.embedding.mapv_inplace(|x| x * c);
        self.head_weights.mapv_inplace(|x| x * c);
        self.head_bias.mapv_inplace(|x| x * c);
    }

    pub fn l2_norm(&self) -> f64 {
        let s: f64 = self.embedding.iter().map(|x| x * x).sum::<f64>()
            + self.head_weights.iter().map(|x| x * x).sum::<f64>()
            + self.head_bias.iter().map(|x| x * x).sum::<f64>();
        s.sqrt()
    }

    pub fn sq_dist(&self, other: &Delta) -> f64 {
        let mut s = 0.0;
        for (a, b) in self.embedding.iter().zip(other.embedding.iter()) {
            let d = a - b;
            s += d * d;
        }
        for (a, b) in self.head_weights.iter().zip(other.head_weights.iter()) {
            let d = a - b;
            s += d * d;
        }
        for (a, b) in self.head_bias.iter().zip(other.head_bias.iter()) {
            let d = a - b;
            s += d * d;
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        self.embedding.iter().all(|x| x.is_finite())
            && self.head_weights.iter().all(|x| x.is_finite())
            && self.head_bias.iter().all(|x| x.is_finite())
    }
}

/// Pooling weights for a sequence of the given length. Sum to 1.
fn pooling_weights(pooling: Pooling, len: usize) -> Vec<f64> {
    match pooling {
        Pooling::Mean => vec![1.0 / len as f64; len],
        Pooling::PositionDecay => {
            let raw: Vec<f64> = (0..len).map(|i| 1.0 / (i + 1) as f64).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|w| w / total).collect()
        }
    }
}

fn check_tokens(params: &ModelParams, tokens: &[usize]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let v = params.vocab();
    for &t in tokens {
        if t >= v {
            return Err(Error::OutOfVocabulary { token: t, vocab: v });
        }
    }
    Ok(())
}

/// Pooled embedding of a token sequence.
fn pool(params: &ModelParams, tokens: &[usize]) -> Array1<f64> {
    let weights = pooling_weights(params.pooling, tokens.len());
    let mut pooled = Array1::zeros(params.embedding.ncols());
    for (&t, &w) in tokens.iter().zip(weights.iter()) {
        pooled.scaled_add(w, &params.embedding.row(t));
    }
    pooled
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps = logits.mapv(|x| (x - max).exp());
    let total = exps.sum();
    exps / total
}

/// Class probabilities for a token sequence.
pub fn forward(params: &ModelParams, tokens: &[usize]) -> Result<Array1<f64>> {
    check_tokens(params, tokens)?;
    let pooled = pool(params, tokens);
    let logits = pooled.dot(&params.head_weights) + &params.head_bias;
    Ok(softmax(&logits))
}

/// Which embedding rows a gradient pass may write to.
enum RowFilter<'a> {
    All,
    Subset(&'a BTreeSet<usize>),
}

impl RowFilter<'_> {
    fn admits(&self, row: usize) -> bool {
        match self {
            RowFilter::All => true,
            RowFilter::Subset(s) => s.contains(&row),
        }
    }
}

/// Shared backprop loop. `head` controls whether head gradients are
/// accumulated; `rows` restricts which embedding rows receive gradient.
/// Accumulation order is identical in all modes, so a restricted gradient
/// equals the bitwise slice of the full gradient.
fn backprop(
    params: &ModelParams,
    batch: &[Example],
    head: bool,
    rows: RowFilter<'_>,
) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let classes = params.classes();
    for ex in batch {
        check_tokens(params, &ex.tokens)?;
        if ex.label >= classes {
            return Err(Error::InvalidLabel {
                label: ex.label,
                classes,
            });
        }
    }

    let inv_b = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = Gradient::zeros_like(params);

    for ex in batch {
        let weights = pooling_weights(params.pooling, ex.tokens.len());
        let pooled = pool(params, &ex.tokens);
        let logits = pooled.dot(&params.head_weights) + &params.head_bias;
        let probs = softmax(&logits);
        loss -= probs[ex.label].max(f64::MIN_POSITIVE).ln() * inv_b;

        // d loss / d logits = probs - onehot(label), averaged over the batch
        let mut dlogits = probs;
        dlogits[ex.label] -= 1.0;
        dlogits.mapv_inplace(|x| x * inv_b);

        if head {
            for (j, &d) in dlogits.iter().enumerate() {
                grad.head_bias[j] += d;
                for (i, &p) in pooled.iter().enumerate() {
                    grad.head_weights[[i, j]] += p * d;
                }
            }
        }

        let dpooled = params.head_weights.dot(&dlogits);
        for (&t, &w) in ex.tokens.iter().zip(weights.iter()) {
            if rows.admits(t) {
                grad.embedding.row_mut(t).scaled_add(w, &dpooled);
            }
        }
    }
    Ok((loss, grad))
}

/// Mean cross-entropy over the batch plus the full analytic gradient.
/// Embedding rows of tokens absent from the batch stay bitwise zero.
pub fn loss_and_grad(params: &ModelParams, batch: &[Example]) -> Result<(f64, Gradient)> {
    backprop(params, batch, true, RowFilter::All)
}

/// Gradient restricted to the given embedding rows; head coordinates and
/// all other rows are exactly zero.
pub fn restricted_grad(
    params: &ModelParams,
    batch: &[Example],
    rows: &BTreeSet<usize>,
) -> Result<Gradient> {
    let v = params.vocab();
    for &r in rows {
        if r >= v {
            return Err(Error::OutOfVocabulary { token: r, vocab: v });
        }
    }
    let (_, grad) = backprop(params, batch, false, RowFilter::Subset(rows))?;
    Ok(grad)
}
