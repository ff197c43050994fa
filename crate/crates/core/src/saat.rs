//! Semantic-aware adversarial training.
//!
//! Each epoch refreshes the training-set codes and the per-label mainstay
//! codes, then alternates two steps per mini-batch with the other side held
//! fixed: PGD pushes every clean sample away from its mainstay code, and one
//! momentum SGD step descends
//!
//! ```text
//! L_at = λ·L_adv(x', b_m) + μ·L_qua(x') + L_ori(x)
//! ```
//!
//! `L_ori` is pair-averaged over the batch; the two adversarial terms are
//! sample-averaged.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd_attack_batch, AlphaSchedule, AttackConfig, AttackMode, StepRule};
use crate::dmfl::MainstayCache;
use crate::error::{check_len, Error, Result};
use crate::hashmodel::{
    epoch_batches, quantization_logit_grad, HashCode, HashModel, HashingObjective, LabelVector,
    LossOutput, PairwiseLikelihood,
};
use crate::netcore::{sgd_step, ForwardTrace, SgdState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub lambda: f64,
    pub mu: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            iterations: 7,
            lambda: 1.0,
            mu: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("train batch_size must be >= 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lambda >= 0.0 && self.mu >= 0.0 && self.lambda.is_finite() && self.mu.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lambda and mu must be finite and >= 0, got {} and {}",
                self.lambda, self.mu
            )));
        }
        self.inner_attack().validate()
    }

    /// The PGD configuration used for inner maximization.
    pub fn inner_attack(&self) -> AttackConfig {
        AttackConfig {
            epsilon: self.epsilon,
            step_size: self.step_size,
            iterations: self.iterations,
            alpha: AlphaSchedule::Fixed(1.0),
            mode: AttackMode::NonTargeted,
            step_rule: StepRule::Sign,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ori: f64,
    pub l_adv: f64,
    pub l_qua: f64,
    pub l_at: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainLog {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_json_lines(&self) -> String {
        let mut s = String::new();
        for r in &self.epochs {
            writeln!(s, "{}", serde_json::to_string(r).expect("record serializes")).unwrap();
        }
        s
    }

    pub fn from_json_lines(text: &str) -> Result<Self> {
        let epochs = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            epochs,
            checkpoints: Vec::new(),
        })
    }
}

/// Adversarial counterparts of `xs` pushed away from their mainstay codes.
pub fn inner_maximization(
    model: &HashModel,
    xs: &[Vec<f64>],
    mainstays: &[HashCode],
    cfg: &TrainConfig,
) -> Result<Vec<Vec<f64>>> {
    let origins: Vec<usize> = (0..xs.len()).collect();
    let adv = pgd_attack_batch(model, xs, &origins, mainstays, &cfg.inner_attack())?;
    Ok(adv.into_iter().map(|a| a.x_adv).collect())
}

/// `L_at` on one batch with every term reported separately.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub l_ori: f64,
    pub l_adv: f64,
    pub l_qua: f64,
    pub grads: crate::netcore::NetworkGrads,
}

fn check_batches(
    model: &HashModel,
    clean: &[Vec<f64>],
    labels: &[LabelVector],
    adv: &[Vec<f64>],
    mainstays: &[HashCode],
) -> Result<()> {
    if clean.len() < 2 {
        return Err(Error::EmptyBatch("training batch needs at least two samples"));
    }
    check_len("batch labels", clean.len(), labels.len())?;
    check_len("adversarial batch", clean.len(), adv.len())?;
    check_len("batch mainstay codes", clean.len(), mainstays.len())?;
    for m in mainstays {
        check_len("mainstay code", model.k(), m.len())?;
    }
    Ok(())
}

fn logits_of(traces: &[ForwardTrace]) -> Vec<Vec<f64>> {
    traces.iter().map(|t| t.output().to_vec()).collect()
}

/// Pair-averaged clean objective and its logit gradients.
fn ori_upstreams(logits: &[Vec<f64>], labels: &[LabelVector]) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = logits.len();
    let pairs = (n * (n - 1) / 2) as f64;
    let (v, mut ups) = PairwiseLikelihood.logit_grads(logits, labels)?;
    ups.iter_mut().flatten().for_each(|g| *g /= pairs);
    Ok((v / pairs, ups))
}

/// Sample-averaged `-(1/K) b_mᵀ tanh(f(x'))` and its logit gradients.
fn adv_upstreams(logits: &[Vec<f64>], mainstays: &[HashCode]) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len() as f64;
    let mut value = 0.0;
    let ups = logits
        .iter()
        .zip(mainstays)
        .map(|(z, b)| {
            let scale = -1.0 / (z.len() as f64 * n);
            z.iter()
                .zip(b.bits())
                .map(|(&v, &bit)| {
                    let t = v.tanh();
                    value += scale * bit as f64 * t;
                    scale * bit as f64 * (1.0 - t * t)
                })
                .collect()
        })
        .collect();
    (value, ups)
}

/// Sample-averaged quantization loss and its logit gradients.
fn qua_upstreams(logits: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len() as f64;
    let mut value = 0.0;
    let ups = logits
        .iter()
        .map(|z| {
            let (q, g) = quantization_logit_grad(z);
            value += q / n;
            g.into_iter().map(|d| d / n).collect()
        })
        .collect();
    (value, ups)
}

/// `L_ori` term alone.
pub fn clean_term(model: &HashModel, clean: &[Vec<f64>], labels: &[LabelVector]) -> Result<LossOutput> {
    let traces = model.forward_batch(clean)?;
    let (value, ups) = ori_upstreams(&logits_of(&traces), labels)?;
    Ok(LossOutput {
        value,
        grads: model.backward_batch(&traces, &ups)?,
    })
}

/// `L_adv(x', b_m)` term alone.
pub fn adversarial_term(model: &HashModel, adv: &[Vec<f64>], mainstays: &[HashCode]) -> Result<LossOutput> {
    check_len("batch mainstay codes", adv.len(), mainstays.len())?;
    let traces = model.forward_batch(adv)?;
    let (value, ups) = adv_upstreams(&logits_of(&traces), mainstays);
    Ok(LossOutput {
        value,
        grads: model.backward_batch(&traces, &ups)?,
    })
}

/// `L_qua(x')` term alone.
pub fn quantization_term(model: &HashModel, adv: &[Vec<f64>]) -> Result<LossOutput> {
    let traces = model.forward_batch(adv)?;
    let (value, ups) = qua_upstreams(&logits_of(&traces));
    Ok(LossOutput {
        value,
        grads: model.backward_batch(&traces, &ups)?,
    })
}

/// `L_at` with one backward pass over the clean and adversarial traces.
pub fn total_loss(
    model: &HashModel,
    clean: &[Vec<f64>],
    labels: &[LabelVector],
    adv: &[Vec<f64>],
    mainstays: &[HashCode],
    lambda: f64,
    mu: f64,
) -> Result<TotalLoss> {
    check_batches(model, clean, labels, adv, mainstays)?;
    let clean_traces = model.forward_batch(clean)?;
    let adv_traces = model.forward_batch(adv)?;
    let adv_logits = logits_of(&adv_traces);
    let (l_ori, mut ups) = ori_upstreams(&logits_of(&clean_traces), labels)?;
    let (l_adv, adv_ups) = adv_upstreams(&adv_logits, mainstays);
    let (l_qua, qua_ups) = qua_upstreams(&adv_logits);
    ups.extend(adv_ups.iter().zip(&qua_ups).map(|(a, q)| {
        a.iter().zip(q).map(|(a, q)| lambda * a + mu * q).collect::<Vec<f64>>()
    }));
    let mut traces = clean_traces;
    traces.extend(adv_traces);
    let grads = model.backward_batch(&traces, &ups)?;
    Ok(TotalLoss {
        value: lambda * l_adv + mu * l_qua + l_ori,
        l_ori,
        l_adv,
        l_qua,
        grads,
    })
}

/// Mainstay code for every training sample, from codes of the current model.
pub fn refresh_mainstays(
    model: &HashModel,
    xs: &[Vec<f64>],
    labels: &[LabelVector],
) -> Result<Vec<HashCode>> {
    let codes = model.hash_codes(xs)?;
    let mut cache = MainstayCache::new();
    cache.populate(labels, &codes, labels)?;
    Ok(labels
        .iter()
        .map(|l| cache.get(l).expect("populated").code.clone())
        .collect())
}

/// File name of the checkpoint written after `epoch`.
pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint-{epoch:04}.net"))
}

/// Minimax training on `(xs, labels)`. With `checkpoint_dir` set, the
/// network is saved after every epoch.
pub fn adversarial_train(
    model: &mut HashModel,
    xs: &[Vec<f64>],
    labels: &[LabelVector],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut log = TrainLog::default();
    if cfg.epochs == 0 {
        return Ok(log);
    }
    if xs.len() < 2 {
        return Err(Error::EmptyBatch("training needs at least two samples"));
    }
    check_len("train labels", xs.len(), labels.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SgdState::new();
    let diverged = |epoch: usize, reason: String, log: &TrainLog| Error::Divergence {
        epoch,
        reason,
        checkpoint: log.checkpoints.last().cloned(),
    };
    for epoch in 0..cfg.epochs {
        let mainstays = refresh_mainstays(model, xs, labels)?;
        let batches = epoch_batches(xs.len(), cfg.batch_size, &mut rng);
        let mut sums = [0.0f64; 4];
        for batch in &batches {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<LabelVector> = batch.iter().map(|&i| labels[i].clone()).collect();
            let bm: Vec<HashCode> = batch.iter().map(|&i| mainstays[i].clone()).collect();
            let adv = inner_maximization(model, &bx, &bm, cfg).map_err(|e| match e {
                Error::NonFinite(m) => diverged(epoch, m, &log),
                e => e,
            })?;
            let t = total_loss(model, &bx, &by, &adv, &bm, cfg.lambda, cfg.mu)?;
            if !t.value.is_finite() {
                return Err(diverged(epoch, format!("non-finite loss {}", t.value), &log));
            }
            sgd_step(model.net_mut(), &t.grads, cfg.learning_rate, cfg.momentum, &mut state)
                .map_err(|e| diverged(epoch, e.to_string(), &log))?;
            for (s, v) in sums.iter_mut().zip([t.l_ori, t.l_adv, t.l_qua, t.value]) {
                *s += v;
            }
        }
        let nb = batches.len() as f64;
        let record = EpochRecord {
            epoch,
            l_ori: sums[0] / nb,
            l_adv: sums[1] / nb,
            l_qua: sums[2] / nb,
            l_at: sums[3] / nb,
        };
        log::info!(
            "defend epoch {epoch}: L_at {:.6} (ori {:.6}, adv {:.6}, qua {:.6})",
            record.l_at,
            record.l_ori,
            record.l_adv,
            record.l_qua
        );
        log.epochs.push(record);
        if let Some(dir) = checkpoint_dir {
            let path = checkpoint_path(dir, epoch);
            model.net().save(&path)?;
            log.checkpoints.push(path);
        }
    }
    Ok(log)
}

/// Mean `L_adv` of `xs` against their mainstay codes, α = 1.
pub fn mean_adv_loss(model: &HashModel, xs: &[Vec<f64>], mainstays: &[HashCode]) -> Result<f64> {
    check_len("mainstay codes", xs.len(), mainstays.len())?;
    let vals: Vec<f64> = xs
        .par_iter()
        .zip(mainstays)
        .map(|(x, b)| {
            crate::attack::adv_loss(model, x, b, 1.0, AttackMode::NonTargeted).map(|l| l.value)
        })
        .collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / vals.len().max(1) as f64)
}
