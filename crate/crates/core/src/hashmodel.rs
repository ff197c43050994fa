//! Binary codes, label vectors and the hashing model `F(x) = sign(f(x))`.
//!
//! Also hosts the clean-data objective used for pretraining and the
//! quantization penalty, plus the packed code-database file format.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::error::{check_len, Error, Result};
use crate::netcore::{sgd_step, ForwardTrace, NetworkGrads, NetworkParams, SgdState};

/// `sign` with the tie rule `sign(0) = +1`.
#[inline]
pub fn sign(v: f64) -> i8 {
    if v < 0.0 {
        -1
    } else {
        1
    }
}

/// A binary code in `{-1, +1}^K`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct HashCode(Vec<i8>);

impl HashCode {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if let Some(pos) = bits.iter().position(|&b| b != 1 && b != -1) {
            return Err(Error::InvalidConfig(format!(
                "hash code entry {pos} is {}, expected -1 or +1",
                bits[pos]
            )));
        }
        Ok(Self(bits))
    }

    /// Element-wise sign of a real vector, `sign(0) = +1`.
    pub fn from_signs(values: &[f64]) -> Self {
        Self(values.iter().map(|&v| sign(v)).collect())
    }

    /// Bit `i` is `+1` iff bit `i` of `word[i / 64]` is set.
    pub fn from_words(words: &[u64], k: usize) -> Self {
        Self(
            (0..k)
                .map(|i| if words[i / 64] >> (i % 64) & 1 == 1 { 1 } else { -1 })
                .collect(),
        )
    }

    pub fn ones(k: usize) -> Self {
        Self(vec![1; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[i8] {
        &self.0
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| b as f64).collect()
    }

    pub fn dot(&self, other: &HashCode) -> i64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| (a * b) as i64)
            .sum()
    }

    pub fn negated(&self) -> HashCode {
        HashCode(self.0.iter().map(|b| -b).collect())
    }

    /// Packs `+1` as a set bit, LSB-first, into 64-bit words.
    pub fn to_words(&self) -> Vec<u64> {
        let mut words = vec![0u64; self.0.len().div_ceil(64)];
        for (i, &b) in self.0.iter().enumerate() {
            if b == 1 {
                words[i / 64] |= 1 << (i % 64);
            }
        }
        words
    }
}

impl fmt::Debug for HashCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HashCode(")?;
        for &b in &self.0 {
            f.write_str(if b == 1 { "+" } else { "-" })?;
        }
        write!(f, ")")
    }
}

/// A multi-hot label vector over `C` classes.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::InvalidConfig(format!(
                "label entry {pos} is {}, expected 0 or 1",
                bits[pos]
            )));
        }
        Ok(Self(bits))
    }

    pub fn from_classes(num_classes: usize, classes: &[usize]) -> Self {
        let mut bits = vec![0; num_classes];
        for &c in classes {
            bits[c] = 1;
        }
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    /// Number of classes set.
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_zero(&self) -> bool {
        self.count() == 0
    }

    pub fn dot(&self, other: &LabelVector) -> usize {
        self.0
            .iter()
            .zip(&other.0)
            .filter(|(&a, &b)| a == 1 && b == 1)
            .count()
    }

    /// Relevance: the two vectors share at least one class.
    pub fn overlaps(&self, other: &LabelVector) -> bool {
        self.0.iter().zip(&other.0).any(|(&a, &b)| a == 1 && b == 1)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i)
    }
}

impl fmt::Debug for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LabelVector({:?})", self.0)
    }
}

/// Pairwise similarity `S_ij = 1` iff samples `i` and `j` share a class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityMatrix {
    n: usize,
    entries: Vec<u8>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.entries[i * self.n + j]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

pub fn similarity_matrix(labels: &[LabelVector]) -> Result<SimilarityMatrix> {
    if let Some(first) = labels.first() {
        for l in labels {
            check_len("label vector", first.len(), l.len())?;
        }
    }
    let n = labels.len();
    let mut entries = vec![0u8; n * n];
    for i in 0..n {
        for j in i..n {
            let s = labels[i].overlaps(&labels[j]) as u8;
            entries[i * n + j] = s;
            entries[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, entries })
}

/// Value and parameter gradient of a scalar training loss.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grads: NetworkGrads,
}

/// A clean-data hashing objective defined on the logits of a batch.
///
/// Returns the loss value and `dL/df(x_i)` for every sample.
pub trait HashingObjective: Send + Sync {
    fn name(&self) -> &'static str;

    fn logit_grads(&self, logits: &[Vec<f64>], labels: &[LabelVector])
        -> Result<(f64, Vec<Vec<f64>>)>;
}

/// Pairwise negative log-likelihood over relaxed codes `h = tanh(f(x))`:
/// `sum_{i<j} log(1 + exp(Θ_ij)) - S_ij Θ_ij` with `Θ_ij = h_i·h_j / 2`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PairwiseLikelihood;

/// `log(1 + exp(t))` in the overflow-free form `max(t, 0) + log1p(exp(-|t|))`.
#[inline]
pub(crate) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl HashingObjective for PairwiseLikelihood {
    fn name(&self) -> &'static str {
        "pairwise-likelihood"
    }

    fn logit_grads(
        &self,
        logits: &[Vec<f64>],
        labels: &[LabelVector],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if logits.len() < 2 {
            return Err(Error::EmptyBatch("pairwise loss needs at least two samples"));
        }
        check_len("pairwise loss labels", logits.len(), labels.len())?;
        let k = logits[0].len();
        let h: Vec<Vec<f64>> = logits
            .iter()
            .map(|z| z.iter().map(|v| v.tanh()).collect())
            .collect();
        let mut grad_h = vec![vec![0.0; k]; h.len()];
        let mut value = 0.0;
        for i in 0..h.len() {
            for j in i + 1..h.len() {
                let theta = 0.5 * dot(&h[i], &h[j]);
                let s = labels[i].overlaps(&labels[j]) as u8 as f64;
                value += softplus(theta) - s * theta;
                let coeff = 0.5 * (sigmoid(theta) - s);
                for b in 0..k {
                    grad_h[i][b] += coeff * h[j][b];
                    grad_h[j][b] += coeff * h[i][b];
                }
            }
        }
        let upstreams = grad_h
            .into_iter()
            .zip(&h)
            .map(|(g, hi)| g.iter().zip(hi).map(|(g, a)| g * (1.0 - a * a)).collect())
            .collect();
        Ok((value, upstreams))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `‖tanh(z) - sign(z)‖²` and its gradient in `z`, with `sign` held constant.
pub fn quantization_logit_grad(logits: &[f64]) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let grad = logits
        .iter()
        .map(|&z| {
            let t = z.tanh();
            let diff = t - sign(z) as f64;
            value += diff * diff;
            2.0 * diff * (1.0 - t * t)
        })
        .collect();
    (value, grad)
}

/// The hashing model `F(x) = sign(f(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct HashModel {
    net: NetworkParams,
}

impl HashModel {
    pub fn new(net: NetworkParams) -> Self {
        Self { net }
    }

    pub fn net(&self) -> &NetworkParams {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut NetworkParams {
        &mut self.net
    }

    pub fn into_net(self) -> NetworkParams {
        self.net
    }

    /// Hash length `K`.
    pub fn k(&self) -> usize {
        self.net.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.net.output(x)
    }

    /// `tanh(α f(x))`.
    pub fn relaxed_code(&self, x: &[f64], alpha: f64) -> Result<Vec<f64>> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1], got {alpha}")));
        }
        Ok(self
            .logits(x)?
            .into_iter()
            .map(|z| (alpha * z).tanh())
            .collect())
    }

    pub fn hash_code(&self, x: &[f64]) -> Result<HashCode> {
        Ok(HashCode::from_signs(&self.logits(x)?))
    }

    /// Codes for many inputs, computed in parallel, in input order.
    pub fn hash_codes(&self, xs: &[Vec<f64>]) -> Result<Vec<HashCode>> {
        xs.par_iter().map(|x| self.hash_code(x)).collect()
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<ForwardTrace>> {
        xs.par_iter().map(|x| self.net.forward(x)).collect()
    }

    /// Sums per-sample parameter gradients in sample order.
    pub fn backward_batch(
        &self,
        traces: &[ForwardTrace],
        upstreams: &[Vec<f64>],
    ) -> Result<NetworkGrads> {
        self.net.grad_params(traces, upstreams)
    }
}

/// The clean objective `L_ori` as a summed pairwise likelihood.
pub fn original_loss(
    model: &HashModel,
    xs: &[Vec<f64>],
    labels: &[LabelVector],
) -> Result<LossOutput> {
    objective_loss(&PairwiseLikelihood, model, xs, labels)
}

pub fn objective_loss(
    objective: &dyn HashingObjective,
    model: &HashModel,
    xs: &[Vec<f64>],
    labels: &[LabelVector],
) -> Result<LossOutput> {
    if xs.len() < 2 {
        return Err(Error::EmptyBatch("pairwise loss needs at least two samples"));
    }
    let traces = model.forward_batch(xs)?;
    let logits: Vec<Vec<f64>> = traces.iter().map(|t| t.output().to_vec()).collect();
    let (value, upstreams) = objective.logit_grads(&logits, labels)?;
    let grads = model.backward_batch(&traces, &upstreams)?;
    Ok(LossOutput { value, grads })
}

/// `L_qua` for a single input.
pub fn quantization_loss(model: &HashModel, x: &[f64]) -> Result<LossOutput> {
    let trace = model.net.forward(x)?;
    let (value, up) = quantization_logit_grad(trace.output());
    let grads = model.net.grad_params(&[trace], &[up])?;
    Ok(LossOutput { value, grads })
}

/// Clean-data training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight of the mean quantization penalty added to the pair-averaged
    /// clean objective.
    pub quantization_weight: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            quantization_weight: 0.01,
            seed: 0,
        }
    }
}

/// Per-epoch mean batch loss.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainLog {
    pub epoch_losses: Vec<f64>,
}

/// Batch objective used during pretraining: the pair-averaged clean loss
/// plus `quantization_weight` times the sample-averaged quantization loss.
pub(crate) fn clean_batch_terms(
    objective: &dyn HashingObjective,
    logits: &[Vec<f64>],
    labels: &[LabelVector],
    quantization_weight: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = logits.len();
    let pairs = (n * (n - 1) / 2) as f64;
    let (ori, mut ups) = objective.logit_grads(logits, labels)?;
    let mut value = ori / pairs;
    for u in ups.iter_mut() {
        u.iter_mut().for_each(|g| *g /= pairs);
    }
    if quantization_weight != 0.0 {
        for (u, z) in ups.iter_mut().zip(logits) {
            let (q, qg) = quantization_logit_grad(z);
            value += quantization_weight * q / n as f64;
            for (g, d) in u.iter_mut().zip(qg) {
                *g += quantization_weight * d / n as f64;
            }
        }
    }
    Ok((value, ups))
}

/// Shuffled mini-batch index lists for one epoch; a trailing batch with a
/// single sample is merged into its predecessor.
pub(crate) fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Trains `model` on clean data with momentum SGD.
pub fn pretrain(
    model: &mut HashModel,
    xs: &[Vec<f64>],
    labels: &[LabelVector],
    cfg: &PretrainConfig,
) -> Result<PretrainLog> {
    pretrain_with(&PairwiseLikelihood, model, xs, labels, cfg)
}

pub fn pretrain_with(
    objective: &dyn HashingObjective,
    model: &mut HashModel,
    xs: &[Vec<f64>],
    labels: &[LabelVector],
    cfg: &PretrainConfig,
) -> Result<PretrainLog> {
    if xs.len() < 2 {
        return Err(Error::EmptyBatch("pretraining needs at least two samples"));
    }
    check_len("pretrain labels", xs.len(), labels.len())?;
    for x in xs {
        check_len("pretrain features", model.input_dim(), x.len())?;
    }
    if cfg.batch_size < 2 {
        return Err(Error::InvalidConfig("pretrain batch_size must be >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::new();
    let mut log = PretrainLog::default();
    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(xs.len(), cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for batch in &batches {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<LabelVector> = batch.iter().map(|&i| labels[i].clone()).collect();
            let traces = model.forward_batch(&bx)?;
            let logits: Vec<Vec<f64>> = traces.iter().map(|t| t.output().to_vec()).collect();
            let (value, ups) =
                clean_batch_terms(objective, &logits, &by, cfg.quantization_weight)?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    reason: format!("non-finite pretraining loss {value}"),
                    checkpoint: None,
                });
            }
            let grads = model.backward_batch(&traces, &ups)?;
            sgd_step(&mut model.net, &grads, cfg.learning_rate, cfg.momentum, &mut state).map_err(
                |e| Error::Divergence {
                    epoch,
                    reason: e.to_string(),
                    checkpoint: None,
                },
            )?;
            total += value;
        }
        let mean = total / batches.len() as f64;
        log::debug!("pretrain epoch {epoch}: loss {mean:.6}");
        log.epoch_losses.push(mean);
    }
    Ok(log)
}

const CODES_MAGIC: &[u8; 8] = b"SAATCDB\0";
const CODES_VERSION: u32 = 1;

/// What a code file's rows mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CodeSetKind {
    /// Database codes with the label of each sample.
    Database,
    /// Mainstay codes keyed by the label vector they were computed for.
    Mainstay,
}

/// Hash codes with aligned labels, serializable as packed bitstrings.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeDatabase {
    pub kind: CodeSetKind,
    pub k: usize,
    pub num_classes: usize,
    pub codes: Vec<HashCode>,
    pub labels: Vec<LabelVector>,
    /// One key per row for [`CodeSetKind::Mainstay`], empty otherwise.
    pub keys: Vec<u64>,
}

impl CodeDatabase {
    pub fn new(codes: Vec<HashCode>, labels: Vec<LabelVector>) -> Result<Self> {
        check_len("code database labels", codes.len(), labels.len())?;
        let k = codes.first().map_or(0, |c| c.len());
        let c = labels.first().map_or(0, |l| l.len());
        for code in &codes {
            check_len("code length", k, code.len())?;
        }
        for l in &labels {
            check_len("label length", c, l.len())?;
        }
        Ok(Self {
            kind: CodeSetKind::Database,
            k,
            num_classes: c,
            codes,
            labels,
            keys: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Layout: magic, version u32, kind u8, N u64, K u32, C u32, then N
    /// packed codes (`ceil(K/8)` bytes, bit set ↔ +1), N packed labels
    /// (`ceil(C/8)` bytes) and, for mainstay sets, N u64 keys.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CODES_MAGIC);
        binio::put_u32(&mut out, CODES_VERSION);
        out.push(match self.kind {
            CodeSetKind::Database => 0,
            CodeSetKind::Mainstay => 1,
        });
        binio::put_u64(&mut out, self.codes.len() as u64);
        binio::put_u32(&mut out, self.k as u32);
        binio::put_u32(&mut out, self.num_classes as u32);
        for code in &self.codes {
            binio::pack_bits(code.bits().iter().map(|&b| b == 1), self.k, &mut out);
        }
        for l in &self.labels {
            binio::pack_bits(l.bits().iter().map(|&b| b == 1), self.num_classes, &mut out);
        }
        if self.kind == CodeSetKind::Mainstay {
            for &key in &self.keys {
                binio::put_u64(&mut out, key);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf);
        r.magic(CODES_MAGIC)?;
        let version = r.u32()?;
        if version != CODES_VERSION {
            return r.fail(format!("unsupported code database version {version}"));
        }
        let kind = match r.u8()? {
            0 => CodeSetKind::Database,
            1 => CodeSetKind::Mainstay,
            t => return r.fail(format!("unknown code set kind {t}")),
        };
        let n = r.len(1)?;
        let k = r.u32()? as usize;
        let c = r.u32()? as usize;
        let mut codes = Vec::with_capacity(n);
        for _ in 0..n {
            let bits = binio::unpack_bits(r.bytes(k.div_ceil(8))?, k);
            codes.push(HashCode(bits.into_iter().map(|b| if b { 1 } else { -1 }).collect()));
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let bits = binio::unpack_bits(r.bytes(c.div_ceil(8))?, c);
            labels.push(LabelVector(bits.into_iter().map(u8::from).collect()));
        }
        let keys = if kind == CodeSetKind::Mainstay {
            (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        r.finish()?;
        Ok(Self {
            kind,
            k,
            num_classes: c,
            codes,
            labels,
            keys,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
