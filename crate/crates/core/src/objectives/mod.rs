//! The three training objectives on toy parametric models, in plain `f64`:
//! next-token cross-entropy, flow matching, and their weighted sum, with
//! analytic gradients, a finite-difference checker and staged training.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub mod verify;

pub use verify::{verify_suite, Check};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("vocabulary size must exceed 1, got {0}")]
    Vocab(usize),
    #[error("sequence {sequence} position {position}: token {token} outside vocabulary of {vocab}")]
    TokenRange {
        sequence: usize,
        position: usize,
        token: usize,
        vocab: usize,
    },
    #[error("sequence {sequence} position {position}: token {token} has zero probability")]
    InfiniteLoss {
        sequence: usize,
        position: usize,
        token: usize,
    },
    #[error("prediction is not a distribution over {vocab} tokens")]
    NotADistribution { vocab: usize },
    #[error("t = {0} is outside [0, 1]")]
    TimeRange(f64),
    #[error("{what}: expected dimension {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("ntp weight must be finite and >= 0, got {0}")]
    Weight(f64),
}

fn dim_check(what: &str, expected: usize, found: usize) -> Result<(), ObjectiveError> {
    if expected == found {
        Ok(())
    } else {
        Err(ObjectiveError::Dimension {
            what: what.to_string(),
            expected,
            found,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenBatch {
    pub sequences: Vec<Vec<usize>>,
    pub vocab_size: usize,
}

impl TokenBatch {
    pub fn new(sequences: Vec<Vec<usize>>, vocab_size: usize) -> Result<Self, ObjectiveError> {
        let batch = Self { sequences, vocab_size };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.vocab_size < 2 {
            return Err(ObjectiveError::Vocab(self.vocab_size));
        }
        if self.sequences.is_empty() {
            return Err(ObjectiveError::EmptyBatch);
        }
        for (s, seq) in self.sequences.iter().enumerate() {
            if let Some((p, &t)) = seq.iter().enumerate().find(|(_, &t)| t >= self.vocab_size) {
                return Err(ObjectiveError::TokenRange {
                    sequence: s,
                    position: p,
                    token: t,
                    vocab: self.vocab_size,
                });
            }
        }
        Ok(())
    }
}

/// Next-token distribution given a prefix.
pub trait TokenModel {
    fn vocab_size(&self) -> usize;
    fn predict(&self, prefix: &[usize]) -> Vec<f64>;
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Softmax over a learned logit table indexed by the previous token, with an
/// extra row for the empty prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BigramModel {
    vocab: usize,
    /// `(vocab + 1) × vocab`, row-major; the last row is the start row.
    pub logits: Vec<f64>,
}

impl BigramModel {
    /// All-zero logits, i.e. the uniform model.
    pub fn uniform(vocab: usize) -> Self {
        Self {
            vocab,
            logits: vec![0.0; (vocab + 1) * vocab],
        }
    }

    pub fn random(vocab: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut m = Self::uniform(vocab);
        for l in &mut m.logits {
            *l = scale * rng.sample::<f64, _>(StandardNormal);
        }
        m
    }

    fn row(&self, prefix: &[usize]) -> usize {
        prefix.last().copied().unwrap_or(self.vocab)
    }

    fn row_logits(&self, row: usize) -> &[f64] {
        &self.logits[row * self.vocab..(row + 1) * self.vocab]
    }

    /// Gradient of [`ntp_loss`] with respect to `logits`.
    pub fn ntp_grad(&self, batch: &TokenBatch) -> Result<Vec<f64>, ObjectiveError> {
        batch.validate()?;
        dim_check("vocab_size", self.vocab, batch.vocab_size)?;
        let mut grad = vec![0.0; self.logits.len()];
        let scale = 1.0 / batch.sequences.len() as f64;
        for seq in &batch.sequences {
            for k in 0..seq.len() {
                let row = self.row(&seq[..k]);
                let p = softmax(self.row_logits(row));
                let g = &mut grad[row * self.vocab..(row + 1) * self.vocab];
                for (j, pj) in p.iter().enumerate() {
                    g[j] += scale * (pj - f64::from(u8::from(j == seq[k])));
                }
            }
        }
        Ok(grad)
    }
}

impl TokenModel for BigramModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn predict(&self, prefix: &[usize]) -> Vec<f64> {
        softmax(self.row_logits(self.row(prefix)))
    }
}

/// Mean over sequences of the summed negative log-likelihood of each token
/// given its prefix.
pub fn ntp_loss(batch: &TokenBatch, model: &dyn TokenModel) -> Result<f64, ObjectiveError> {
    batch.validate()?;
    dim_check("vocab_size", model.vocab_size(), batch.vocab_size)?;
    let mut total = 0.0;
    for (s, seq) in batch.sequences.iter().enumerate() {
        for (k, &token) in seq.iter().enumerate() {
            let p = model.predict(&seq[..k]);
            if p.len() != batch.vocab_size
                || p.iter().any(|x| x.is_nan() || *x < 0.0)
                || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return Err(ObjectiveError::NotADistribution {
                    vocab: batch.vocab_size,
                });
            }
            if p[token] == 0.0 {
                return Err(ObjectiveError::InfiniteLoss {
                    sequence: s,
                    position: k,
                    token,
                });
            }
            total -= p[token].ln();
        }
    }
    Ok(total / batch.sequences.len() as f64)
}

/// Point on the linear path from `x0` to `x1` at time `t`, and the path's
/// velocity `x1 - x0`.
pub fn flow_sample(x0: &[f64], x1: &[f64], t: f64) -> Result<(Vec<f64>, Vec<f64>), ObjectiveError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(ObjectiveError::TimeRange(t));
    }
    dim_check("x1", x0.len(), x1.len())?;
    let xt = x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
    let v = x0.iter().zip(x1).map(|(a, b)| b - a).collect();
    Ok((xt, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowBatch {
    pub x0: Vec<Vec<f64>>,
    pub x1: Vec<Vec<f64>>,
    pub t: Vec<f64>,
    pub c: Vec<Vec<f64>>,
}

impl FlowBatch {
    pub fn new(x0: Vec<Vec<f64>>, x1: Vec<Vec<f64>>, t: Vec<f64>, c: Vec<Vec<f64>>) -> Result<Self, ObjectiveError> {
        let batch = Self { x0, x1, t, c };
        batch.validate()?;
        Ok(batch)
    }

    /// Draw `n` samples: `x0` and its conditioning from `dataset`, `x1`
    /// standard normal, `t` uniform on [0, 1].
    pub fn sample(dataset: &[(Vec<f64>, Vec<f64>)], n: usize, rng: &mut impl Rng) -> Result<Self, ObjectiveError> {
        if dataset.is_empty() || n == 0 {
            return Err(ObjectiveError::EmptyBatch);
        }
        let mut batch = Self {
            x0: Vec::with_capacity(n),
            x1: Vec::with_capacity(n),
            t: Vec::with_capacity(n),
            c: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let (x0, c) = &dataset[rng.random_range(0..dataset.len())];
            batch.x1.push(x0.iter().map(|_| StandardNormal.sample(rng)).collect());
            batch.x0.push(x0.clone());
            batch.c.push(c.clone());
            batch.t.push(rng.random::<f64>());
        }
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x0.first().map_or(0, Vec::len)
    }

    pub fn cond_dim(&self) -> usize {
        self.c.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let n = self.x0.len();
        if n == 0 {
            return Err(ObjectiveError::EmptyBatch);
        }
        dim_check("x1 count", n, self.x1.len())?;
        dim_check("t count", n, self.t.len())?;
        dim_check("c count", n, self.c.len())?;
        let (d, k) = (self.dim(), self.cond_dim());
        for i in 0..n {
            dim_check("x0", d, self.x0[i].len())?;
            dim_check("x1", d, self.x1[i].len())?;
            dim_check("c", k, self.c[i].len())?;
            if !(0.0..=1.0).contains(&self.t[i]) {
                return Err(ObjectiveError::TimeRange(self.t[i]));
            }
        }
        Ok(())
    }

    /// Interpolated points and target velocities for every sample.
    fn targets(&self) -> impl Iterator<Item = (Vec<f64>, Vec<f64>)> + '_ {
        (0..self.len()).map(|i| flow_sample(&self.x0[i], &self.x1[i], self.t[i]).expect("validated batch"))
    }
}

/// Time- and condition-dependent velocity field.
pub trait VectorFieldModel {
    fn dim(&self) -> usize;
    fn cond_dim(&self) -> usize;
    fn evaluate(&self, x: &[f64], t: f64, c: &[f64]) -> Vec<f64>;
}

/// `u(x, t, c) = W x + a t + B c + b`, parameters laid out as `[W | a | B | b]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineField {
    dim: usize,
    cond_dim: usize,
    pub params: Vec<f64>,
}

impl AffineField {
    pub fn zeros(dim: usize, cond_dim: usize) -> Self {
        Self {
            dim,
            cond_dim,
            params: vec![0.0; dim * dim + dim + dim * cond_dim + dim],
        }
    }

    pub fn random(dim: usize, cond_dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut f = Self::zeros(dim, cond_dim);
        for p in &mut f.params {
            *p = scale * rng.sample::<f64, _>(StandardNormal);
        }
        f
    }

    /// Range of `W` in `params`; the remaining blocks are `a`, `B` and `b`.
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        0..self.dim * self.dim
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let a = self.dim * self.dim;
        let b = a + self.dim;
        let bias = b + self.dim * self.cond_dim;
        (a, b, bias)
    }

    /// Gradient of [`flow_matching_loss`] with respect to `params`.
    pub fn fm_grad(&self, batch: &FlowBatch) -> Result<Vec<f64>, ObjectiveError> {
        self.check(batch)?;
        let (d, k) = (self.dim, self.cond_dim);
        let (oa, ob, obias) = self.offsets();
        let mut grad = vec![0.0; self.params.len()];
        let scale = 2.0 / batch.len() as f64;
        for (i, (xt, v)) in batch.targets().enumerate() {
            let (t, c) = (batch.t[i], &batch.c[i]);
            let u = self.evaluate(&xt, t, c);
            for r in 0..d {
                let g = scale * (u[r] - v[r]);
                for j in 0..d {
                    grad[r * d + j] += g * xt[j];
                }
                grad[oa + r] += g * t;
                for j in 0..k {
                    grad[ob + r * k + j] += g * c[j];
                }
                grad[obias + r] += g;
            }
        }
        Ok(grad)
    }

    /// Fit only `W` by gradient descent, leaving the other blocks as they
    /// are. Stops when the gradient norm drops below `tol`; returns the
    /// number of steps taken.
    pub fn fit_weights(&mut self, batch: &FlowBatch, lr: f64, max_steps: usize, tol: f64) -> Result<usize, ObjectiveError> {
        let range = self.weight_range();
        for step in 0..max_steps {
            let g = self.fm_grad(batch)?;
            let g = &g[range.clone()];
            if g.iter().map(|x| x * x).sum::<f64>().sqrt() < tol {
                return Ok(step);
            }
            for (p, g) in self.params[range.clone()].iter_mut().zip(g) {
                *p -= lr * g;
            }
        }
        Ok(max_steps)
    }

    fn check(&self, batch: &FlowBatch) -> Result<(), ObjectiveError> {
        batch.validate()?;
        dim_check("x", self.dim, batch.dim())?;
        dim_check("c", self.cond_dim, batch.cond_dim())
    }
}

impl VectorFieldModel for AffineField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    fn evaluate(&self, x: &[f64], t: f64, c: &[f64]) -> Vec<f64> {
        let (d, k) = (self.dim, self.cond_dim);
        let (oa, ob, obias) = self.offsets();
        let p = &self.params;
        (0..d)
            .map(|r| {
                let wx: f64 = (0..d).map(|j| p[r * d + j] * x[j]).sum();
                let bc: f64 = (0..k).map(|j| p[ob + r * k + j] * c[j]).sum();
                wx + p[oa + r] * t + bc + p[obias + r]
            })
            .collect()
    }
}

/// Mean squared distance between the model's velocity and `x1 - x0`.
pub fn flow_matching_loss(batch: &FlowBatch, model: &dyn VectorFieldModel) -> Result<f64, ObjectiveError> {
    batch.validate()?;
    dim_check("x", model.dim(), batch.dim())?;
    dim_check("c", model.cond_dim(), batch.cond_dim())?;
    let mut total = 0.0;
    for (i, (xt, v)) in batch.targets().enumerate() {
        let u = model.evaluate(&xt, batch.t[i], &batch.c[i]);
        dim_check("model output", v.len(), u.len())?;
        total += u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub ntp_weight: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self { ntp_weight: 0.1 }
    }
}

impl ObjectiveWeights {
    pub fn new(ntp_weight: f64) -> Result<Self, ObjectiveError> {
        if ntp_weight.is_finite() && ntp_weight >= 0.0 {
            Ok(Self { ntp_weight })
        } else {
            Err(ObjectiveError::Weight(ntp_weight))
        }
    }
}

pub fn joint_loss(fm: f64, ntp: f64, weights: ObjectiveWeights) -> f64 {
    fm + weights.ntp_weight * ntp
}

/// Maximum relative error between `analytic` and central differences of
/// `loss` at `params`. Pairs where both magnitudes are below 1e-6 are
/// compared on an absolute scale of 1e-6.
pub fn grad_check(
    params: &[f64],
    analytic: &[f64],
    loss: impl Fn(&[f64]) -> f64,
    epsilon: f64,
) -> Result<f64, ObjectiveError> {
    dim_check("analytic gradient", params.len(), analytic.len())?;
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        probe[i] = params[i] + epsilon;
        let up = loss(&probe);
        probe[i] = params[i] - epsilon;
        let down = loss(&probe);
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * epsilon);
        if !numeric.is_finite() || !analytic[i].is_finite() {
            return Err(ObjectiveError::NonFiniteGradient { index: i });
        }
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    Ok(worst)
}

/// Training stages: reasoning (token model on NTP, field frozen), edit
/// (field on flow matching, token model frozen), unified (both, on the
/// weighted sum).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Reasoning,
    Edit,
    Unified,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Reasoning, Stage::Edit, Stage::Unified];

    pub fn trains_token_model(self) -> bool {
        matches!(self, Stage::Reasoning | Stage::Unified)
    }

    pub fn trains_field(self) -> bool {
        matches!(self, Stage::Edit | Stage::Unified)
    }

    /// Weights on (flow matching, NTP).
    pub fn loss_weights(self, weights: ObjectiveWeights) -> (f64, f64) {
        match self {
            Stage::Reasoning => (0.0, 1.0),
            Stage::Edit => (1.0, 0.0),
            Stage::Unified => (1.0, weights.ntp_weight),
        }
    }
}

/// Toy reasoner and generator trained together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointModel {
    pub token: BigramModel,
    pub field: AffineField,
}

impl JointModel {
    pub fn loss(&self, stage: Stage, tokens: &TokenBatch, flow: &FlowBatch, weights: ObjectiveWeights) -> Result<f64, ObjectiveError> {
        let (wf, wn) = stage.loss_weights(weights);
        let fm = flow_matching_loss(flow, &self.field)?;
        let ntp = ntp_loss(tokens, &self.token)?;
        Ok(wf * fm + wn * ntp)
    }

    /// All parameters as `[token logits | field params]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.token.logits.clone();
        p.extend_from_slice(&self.field.params);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<(), ObjectiveError> {
        let n = self.token.logits.len();
        dim_check("params", n + self.field.params.len(), params.len())?;
        self.token.logits.copy_from_slice(&params[..n]);
        self.field.params.copy_from_slice(&params[n..]);
        Ok(())
    }

    /// Gradient of the stage loss over [`JointModel::params`].
    pub fn grad(&self, stage: Stage, tokens: &TokenBatch, flow: &FlowBatch, weights: ObjectiveWeights) -> Result<Vec<f64>, ObjectiveError> {
        let (wf, wn) = stage.loss_weights(weights);
        let mut g: Vec<f64> = self.token.ntp_grad(tokens)?.into_iter().map(|x| wn * x).collect();
        g.extend(self.field.fm_grad(flow)?.into_iter().map(|x| wf * x));
        Ok(g)
    }

    /// One gradient step on the stage loss. Frozen components are not
    /// written to at all.
    pub fn step(
        &mut self,
        stage: Stage,
        tokens: &TokenBatch,
        flow: &FlowBatch,
        weights: ObjectiveWeights,
        lr: f64,
    ) -> Result<(), ObjectiveError> {
        let g = self.grad(stage, tokens, flow, weights)?;
        let (gt, gf) = g.split_at(self.token.logits.len());
        if stage.trains_token_model() {
            for (p, g) in self.token.logits.iter_mut().zip(gt) {
                *p -= lr * g;
            }
        }
        if stage.trains_field() {
            for (p, g) in self.field.params.iter_mut().zip(gf) {
                *p -= lr * g;
            }
        }
        Ok(())
    }

    /// Run `steps` gradient steps; returns the stage loss before each step
    /// and after the last.
    pub fn train(
        &mut self,
        stage: Stage,
        tokens: &TokenBatch,
        flow: &FlowBatch,
        weights: ObjectiveWeights,
        lr: f64,
        steps: usize,
    ) -> Result<Vec<f64>, ObjectiveError> {
        let mut losses = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            losses.push(self.loss(stage, tokens, flow, weights)?);
            self.step(stage, tokens, flow, weights, lr)?;
        }
        losses.push(self.loss(stage, tokens, flow, weights)?);
        Ok(losses)
    }
}

#[cfg(test)]
mod tests;
