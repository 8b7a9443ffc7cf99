//! A linear scorer over hashed n-gram features, trained with the DPO
//! objective on preference pairs.
//!
//! Loss per pair is `softplus(-beta * (d - ref))` where `d = theta . (phi+ - phi-)`,
//! i.e. `-ln sigmoid(beta * (d - ref))`. With `beta = 1` and `ref = 0` this is
//! the plain sigmoid preference loss.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_FEATURE_DIM: usize = 1 << 16;
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, thiserror::Error)]
pub enum DpoError {
    #[error("feature index {index} out of range for dimension {dim}")]
    Dimension { index: usize, dim: usize },
    #[error("theta has dimension {theta}, batch has {batch}")]
    ThetaDimension { theta: usize, batch: usize },
    #[error("{deltas} reference deltas for {pairs} pairs")]
    ReferenceLength { deltas: usize, pairs: usize },
    #[error("empty preference set")]
    Empty,
    #[error("train config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("scorer file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sorted by index, no duplicate indices, no explicit zeros.
pub type SparseVec = Vec<(usize, f64)>;

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Hashed unigram and bigram counts with a per-feature `+-1` sign.
pub fn featurize(text: &str, dim: usize) -> SparseVec {
    assert!(dim >= 1, "feature dimension must be at least 1");
    let toks = tokens(text);
    let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
    let mut add = |h: u64| {
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        *acc.entry((h % dim as u64) as usize).or_insert(0.0) += sign;
    };
    for t in &toks {
        add(fnv1a(&[b"1\x00", t.as_bytes()]));
    }
    for w in toks.windows(2) {
        add(fnv1a(&[b"2\x00", w[0].as_bytes(), b"\x00", w[1].as_bytes()]));
    }
    acc.into_iter().filter(|(_, v)| *v != 0.0).collect()
}

pub fn dot(theta: &[f64], x: &SparseVec) -> f64 {
    x.iter().map(|&(i, v)| theta[i] * v).sum()
}

/// `a - b` for sorted sparse vectors.
pub fn sparse_sub(a: &SparseVec, b: &SparseVec) -> SparseVec {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let next = match (a.get(i), b.get(j)) {
            (Some(&(ia, va)), Some(&(ib, _))) if ia < ib => {
                i += 1;
                (ia, va)
            }
            (Some(&(ia, _)), Some(&(ib, vb))) if ib < ia => {
                j += 1;
                (ib, -vb)
            }
            (Some(&(ia, va)), Some(&(_, vb))) => {
                i += 1;
                j += 1;
                (ia, va - vb)
            }
            (Some(&(ia, va)), None) => {
                i += 1;
                (ia, va)
            }
            (None, Some(&(ib, vb))) => {
                j += 1;
                (ib, -vb)
            }
            (None, None) => unreachable!(),
        };
        if next.1 != 0.0 {
            out.push(next);
        }
    }
    out
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise (tree) summation in index order.
pub fn tree_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => tree_sum(&xs[..n / 2]) + tree_sum(&xs[n / 2..]),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoBatch {
    pub dim: usize,
    pub pairs: Vec<(SparseVec, SparseVec)>,
    pub beta: f64,
    pub reference_deltas: Option<Vec<f64>>,
}

impl DpoBatch {
    pub fn new(dim: usize, pairs: Vec<(SparseVec, SparseVec)>) -> Self {
        Self {
            dim,
            pairs,
            beta: 1.0,
            reference_deltas: None,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn with_reference(mut self, deltas: Vec<f64>) -> Self {
        self.reference_deltas = Some(deltas);
        self
    }

    pub fn validate(&self) -> Result<(), DpoError> {
        if self.pairs.is_empty() {
            return Err(DpoError::Empty);
        }
        if !(self.beta > 0.0) {
            return Err(DpoError::Config("beta must be positive".into()));
        }
        if let Some(r) = &self.reference_deltas {
            if r.len() != self.pairs.len() {
                return Err(DpoError::ReferenceLength {
                    deltas: r.len(),
                    pairs: self.pairs.len(),
                });
            }
        }
        for (p, m) in &self.pairs {
            if let Some(&(index, _)) = p.iter().chain(m).find(|(i, _)| *i >= self.dim) {
                return Err(DpoError::Dimension { index, dim: self.dim });
            }
        }
        Ok(())
    }

    fn check_theta(&self, theta: &[f64]) -> Result<(), DpoError> {
        self.validate()?;
        if theta.len() != self.dim {
            return Err(DpoError::ThetaDimension {
                theta: theta.len(),
                batch: self.dim,
            });
        }
        Ok(())
    }

    fn reference(&self, i: usize) -> f64 {
        self.reference_deltas.as_ref().map_or(0.0, |r| r[i])
    }

    /// `beta * (d_i - ref_i)` for each pair.
    fn margins(&self, theta: &[f64]) -> Vec<f64> {
        self.pairs
            .iter()
            .enumerate()
            .map(|(i, (p, m))| self.beta * (dot(theta, p) - dot(theta, m) - self.reference(i)))
            .collect()
    }
}

pub fn dpo_loss(theta: &[f64], batch: &DpoBatch) -> Result<f64, DpoError> {
    batch.check_theta(theta)?;
    let terms: Vec<f64> = batch.margins(theta).into_iter().map(|z| softplus(-z)).collect();
    Ok(tree_sum(&terms) / batch.pairs.len() as f64)
}

/// Analytic gradient of [`dpo_loss`], without any regularizer.
pub fn dpo_grad(theta: &[f64], batch: &DpoBatch) -> Result<Vec<f64>, DpoError> {
    batch.check_theta(theta)?;
    let n = batch.pairs.len() as f64;
    let mut g = vec![0.0; batch.dim];
    for ((p, m), z) in batch.pairs.iter().zip(batch.margins(theta)) {
        let c = -batch.beta * sigmoid(-z) / n;
        for &(i, v) in p {
            g[i] += c * v;
        }
        for &(i, v) in m {
            g[i] -= c * v;
        }
    }
    Ok(g)
}

fn touched(batch: &DpoBatch) -> Vec<usize> {
    let mut idx: Vec<usize> = batch.pairs.iter().flat_map(|(p, m)| p.iter().chain(m).map(|(i, _)| *i)).collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Largest relative error between `grad` and central differences of the
/// loss over the coordinates the batch touches.
pub fn grad_check_against(theta: &[f64], batch: &DpoBatch, step: f64, grad: &[f64]) -> Result<f64, DpoError> {
    if !(step > 0.0) {
        return Err(DpoError::Config("finite-difference step must be positive".into()));
    }
    batch.check_theta(theta)?;
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in touched(batch) {
        probe[i] = theta[i] + step;
        let up = dpo_loss(&probe, batch)?;
        probe[i] = theta[i] - step;
        let down = dpo_loss(&probe, batch)?;
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * step);
        let a = grad[i];
        worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
    }
    Ok(worst)
}

pub fn grad_check(theta: &[f64], batch: &DpoBatch, step: f64) -> Result<f64, DpoError> {
    let g = dpo_grad(theta, batch)?;
    grad_check_against(theta, batch, step, &g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 20,
            l2: 0.0,
            seed: 0,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DpoError> {
        if !(self.learning_rate > 0.0) {
            return Err(DpoError::Config("learning_rate must be positive".into()));
        }
        if self.epochs < 1 {
            return Err(DpoError::Config("epochs must be at least 1".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(DpoError::Config("l2 must be non-negative".into()));
        }
        if self.batch_size < 1 {
            return Err(DpoError::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Largest step size for which full-batch descent on the regularized loss
/// cannot increase it: `2 / L` with `L = beta^2 / 4 * max |phi+ - phi-|^2 + 2 * l2`.
pub fn stability_bound(batch: &DpoBatch, l2: f64) -> f64 {
    let max_sq = batch
        .pairs
        .iter()
        .map(|(p, m)| sparse_sub(p, m).iter().map(|(_, v)| v * v).sum::<f64>())
        .fold(0.0, f64::max);
    let l = batch.beta * batch.beta / 4.0 * max_sq + 2.0 * l2;
    if l == 0.0 {
        f64::INFINITY
    } else {
        2.0 / l
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyScorer {
    pub feature_dim: usize,
    pub seed: u64,
    pub theta: Vec<f64>,
}

impl ToyScorer {
    pub fn zeros(feature_dim: usize, seed: u64) -> Self {
        Self {
            feature_dim,
            seed,
            theta: vec![0.0; feature_dim],
        }
    }

    pub fn score(&self, text: &str) -> f64 {
        dot(&self.theta, &featurize(text, self.feature_dim))
    }

    /// `feature_dim` and `seed` as little-endian u64, then theta as
    /// little-endian f64.
    pub fn write_to<W: Write>(&self, mut sink: W) -> Result<(), DpoError> {
        sink.write_all(&(self.feature_dim as u64).to_le_bytes())?;
        sink.write_all(&self.seed.to_le_bytes())?;
        for v in &self.theta {
            sink.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.theta.len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(mut source: R) -> Result<Self, DpoError> {
        let mut bytes = Vec::new();
        source.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || (bytes.len() - 16) % 8 != 0 {
            return Err(DpoError::Format(format!("{} bytes is not a valid scorer", bytes.len())));
        }
        let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let dim = word(0) as usize;
        if dim == 0 || (bytes.len() - 16) / 8 != dim {
            return Err(DpoError::Format(format!("header says {dim} weights, body has {}", (bytes.len() - 16) / 8)));
        }
        Ok(Self {
            feature_dim: dim,
            seed: word(8),
            theta: (0..dim).map(|i| f64::from_bits(word(16 + 8 * i))).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    /// Training objective: mean DPO loss plus `l2 * |theta|^2`.
    pub loss: f64,
    pub pairwise_accuracy: f64,
}

pub fn render_trace(rows: &[TraceRow]) -> String {
    rows.iter()
        .map(|r| format!("{} {:.12} {:.6}\n", r.epoch, r.loss, r.pairwise_accuracy))
        .collect()
}

/// Featurizes `(chosen, rejected)` text pairs into a batch.
pub fn text_batch<S: AsRef<str>>(pairs: &[(S, S)], dim: usize, beta: f64) -> DpoBatch {
    let pairs = pairs
        .iter()
        .map(|(c, r)| (featurize(c.as_ref(), dim), featurize(r.as_ref(), dim)))
        .collect();
    DpoBatch::new(dim, pairs).with_beta(beta)
}

fn objective(theta: &[f64], batch: &DpoBatch, l2: f64) -> Result<f64, DpoError> {
    let penalty = if l2 == 0.0 { 0.0 } else { l2 * theta.iter().map(|t| t * t).sum::<f64>() };
    Ok(dpo_loss(theta, batch)? + penalty)
}

/// Mini-batch gradient descent with a seeded per-epoch shuffle.
pub fn train(batch: &DpoBatch, cfg: &TrainConfig) -> Result<(ToyScorer, Vec<TraceRow>), DpoError> {
    cfg.validate()?;
    batch.validate()?;
    let bound = stability_bound(batch, cfg.l2);
    if cfg.learning_rate >= bound {
        log::warn!("learning rate {} is at or above the stability bound {bound:.6}", cfg.learning_rate);
    }
    let mut scorer = ToyScorer::zeros(batch.dim, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..batch.pairs.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mini = DpoBatch {
                dim: batch.dim,
                pairs: chunk.iter().map(|&i| batch.pairs[i].clone()).collect(),
                beta: batch.beta,
                reference_deltas: batch
                    .reference_deltas
                    .as_ref()
                    .map(|r| chunk.iter().map(|&i| r[i]).collect()),
            };
            let g = dpo_grad(&scorer.theta, &mini)?;
            for (t, gi) in scorer.theta.iter_mut().zip(g) {
                *t -= cfg.learning_rate * (gi + 2.0 * cfg.l2 * *t);
            }
        }
        let loss = objective(&scorer.theta, batch, cfg.l2)?;
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(DpoError::Divergence { epoch, loss });
        }
        trace.push(TraceRow {
            epoch,
            loss,
            pairwise_accuracy: pairwise_accuracy(&scorer.theta, batch)?,
        });
    }
    Ok((scorer, trace))
}

/// Share of pairs scored `theta . phi+ > theta . phi-`; exact ties count half.
pub fn pairwise_accuracy(theta: &[f64], batch: &DpoBatch) -> Result<f64, DpoError> {
    if batch.pairs.is_empty() {
        return Err(DpoError::Empty);
    }
    let wins: f64 = batch
        .pairs
        .iter()
        .map(|(p, m)| {
            let (a, b) = (dot(theta, p), dot(theta, m));
            if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Ok(wins / batch.pairs.len() as f64)
}
