//! Semantic-aware PGD in Hamming space.
//!
//! A non-targeted attack pushes the code of `x'` away from the query's
//! mainstay code `b_m`; a targeted attack pulls it toward the mainstay code
//! `b_t` of a chosen target label. Both maximise
//!
//! ```text
//! L_adv = ∓ (1/K) · guideᵀ tanh(α f(x'))
//! ```
//!
//! (minus for non-targeted) by sign-gradient ascent inside an L∞ ball of
//! radius ε around `x`, intersected with the unit box.

use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader};
use crate::error::{check_len, Error, Result};
use crate::hashmodel::{HashCode, HashModel, LabelVector};

/// The five α levels used over the second half of an attack.
pub const ALPHA_LEVELS: [f64; 5] = [0.2, 0.3, 0.5, 0.7, 1.0];
/// α over the first half of an attack.
pub const ALPHA_WARMUP: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AlphaSchedule {
    /// 0.1 for the first half, then five equal blocks at [`ALPHA_LEVELS`].
    Scheduled,
    Fixed(f64),
}

impl AlphaSchedule {
    pub fn at(&self, t: usize, total: usize) -> f64 {
        match *self {
            AlphaSchedule::Fixed(a) => a,
            AlphaSchedule::Scheduled => alpha_at(t, total),
        }
    }
}

/// Scheduled α for iteration `t` of `total`.
pub fn alpha_at(t: usize, total: usize) -> f64 {
    let half = total / 2;
    if t < half {
        return ALPHA_WARMUP;
    }
    let rest = (total - half).max(1);
    let block = ((t - half) * ALPHA_LEVELS.len() / rest).min(ALPHA_LEVELS.len() - 1);
    ALPHA_LEVELS[block]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttackMode {
    NonTargeted,
    Targeted,
}

impl AttackMode {
    fn loss_sign(self) -> f64 {
        match self {
            AttackMode::NonTargeted => -1.0,
            AttackMode::Targeted => 1.0,
        }
    }
}

/// How the input gradient becomes a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepRule {
    /// `η · sign(∇)`.
    Sign,
    /// `η · ∇`, for ablations.
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub alpha: AlphaSchedule,
    pub mode: AttackMode,
    pub step_rule: StepRule,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            step_size: 1.0 / 255.0,
            iterations: 100,
            alpha: AlphaSchedule::Scheduled,
            mode: AttackMode::NonTargeted,
            step_rule: StepRule::Sign,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in (0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("attack iterations must be >= 1".into()));
        }
        if let AlphaSchedule::Fixed(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1], got {a}")));
            }
        }
        if self.step_size > self.epsilon {
            log::warn!(
                "attack step size {} exceeds epsilon {}",
                self.step_size,
                self.epsilon
            );
        }
        Ok(())
    }
}

/// Value of `L_adv` and its gradient in the input.
#[derive(Debug, Clone)]
pub struct AdvLoss {
    pub value: f64,
    pub input_grad: Vec<f64>,
}

/// `L_adv(x')` for the given guide code.
pub fn adv_loss(
    model: &HashModel,
    x: &[f64],
    guide: &HashCode,
    alpha: f64,
    mode: AttackMode,
) -> Result<AdvLoss> {
    let k = model.k();
    check_len("attack guide code", k, guide.len())?;
    let trace = model.net().forward(x)?;
    let scale = mode.loss_sign() / k as f64;
    let mut value = 0.0;
    let upstream: Vec<f64> = trace
        .output()
        .iter()
        .zip(guide.bits())
        .map(|(&z, &g)| {
            let r = (alpha * z).tanh();
            value += scale * g as f64 * r;
            scale * g as f64 * alpha * (1.0 - r * r)
        })
        .collect();
    let input_grad = model.net().grad_input(&trace, &upstream)?;
    Ok(AdvLoss { value, input_grad })
}

/// Clamps to the L∞ ball of radius `epsilon` around `origin`, then to `[0, 1]`.
///
/// The ball bounds are nudged inward by an ulp where needed so that
/// `|result - origin| <= epsilon` holds when evaluated in `f64`.
pub fn project_ball(candidate: &[f64], origin: &[f64], epsilon: f64) -> Vec<f64> {
    candidate
        .iter()
        .zip(origin)
        .map(|(&c, &o)| {
            let mut hi = o + epsilon;
            while hi - o > epsilon {
                hi = hi.next_down();
            }
            let mut lo = o - epsilon;
            while o - lo > epsilon {
                lo = lo.next_up();
            }
            c.clamp(lo, hi).clamp(0.0, 1.0)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialExample {
    pub x_adv: Vec<f64>,
    pub origin_index: usize,
    pub guide_code: HashCode,
    /// `L_adv` at each iterate before its update.
    pub loss_trace: Vec<f64>,
}

#[inline]
fn step_sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Runs `cfg.iterations` PGD steps from `x`.
pub fn pgd_attack(
    model: &HashModel,
    x: &[f64],
    guide: &HashCode,
    cfg: &AttackConfig,
) -> Result<AdversarialExample> {
    cfg.validate()?;
    check_len("attack input", model.input_dim(), x.len())?;
    if let Some(i) = x.iter().position(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidConfig(format!(
            "attack input entry {i} = {} lies outside [0, 1]",
            x[i]
        )));
    }
    let mut current = x.to_vec();
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let alpha = cfg.alpha.at(t, cfg.iterations);
        let loss = adv_loss(model, &current, guide, alpha, cfg.mode)?;
        if let Some(i) = loss.input_grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "attack gradient entry {i} at iteration {t} (alpha {alpha})"
            )));
        }
        loss_trace.push(loss.value);
        let stepped: Vec<f64> = current
            .iter()
            .zip(&loss.input_grad)
            .map(|(&v, &g)| match cfg.step_rule {
                StepRule::Sign => v + cfg.step_size * step_sign(g),
                StepRule::Raw => v + cfg.step_size * g,
            })
            .collect();
        current = project_ball(&stepped, x, cfg.epsilon);
    }
    Ok(AdversarialExample {
        x_adv: current,
        origin_index: 0,
        guide_code: guide.clone(),
        loss_trace,
    })
}

/// Attacks many inputs in parallel. `origins[i]` is recorded on the result.
pub fn pgd_attack_batch(
    model: &HashModel,
    xs: &[Vec<f64>],
    origins: &[usize],
    guides: &[HashCode],
    cfg: &AttackConfig,
) -> Result<Vec<AdversarialExample>> {
    check_len("attack batch guides", xs.len(), guides.len())?;
    check_len("attack batch origins", xs.len(), origins.len())?;
    xs.par_iter()
        .zip(guides)
        .zip(origins)
        .map(|((x, g), &o)| {
            let mut adv = pgd_attack(model, x, g, cfg)?;
            adv.origin_index = o;
            Ok(adv)
        })
        .collect()
}

/// Uniformly picks one of the distinct pool labels disjoint from `y`.
pub fn pick_target_label<R: Rng + ?Sized>(
    y: &LabelVector,
    pool: &[LabelVector],
    rng: &mut R,
) -> Result<LabelVector> {
    let mut candidates: Vec<&LabelVector> = pool
        .iter()
        .filter(|l| !l.is_zero() && l.dot(y) == 0)
        .collect();
    candidates.sort();
    candidates.dedup();
    if candidates.is_empty() {
        return Err(Error::NoDisjointLabel);
    }
    Ok(candidates[rng.random_range(0..candidates.len())].clone())
}

const ADV_MAGIC: &[u8; 8] = b"SAATADV\0";
const ADV_VERSION: u32 = 1;

/// Adversarial inputs as a row-major `f64` matrix plus the dataset index each
/// row was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialBatch {
    pub rows: Vec<Vec<f64>>,
    pub origins: Vec<usize>,
}

impl AdversarialBatch {
    pub fn from_examples(examples: &[AdversarialExample]) -> Self {
        Self {
            rows: examples.iter().map(|e| e.x_adv.clone()).collect(),
            origins: examples.iter().map(|e| e.origin_index).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn matrix_bytes(&self) -> Vec<u8> {
        let cols = self.rows.first().map_or(0, |r| r.len());
        let mut out = Vec::with_capacity(32 + self.rows.len() * cols * 8);
        out.extend_from_slice(ADV_MAGIC);
        binio::put_u32(&mut out, ADV_VERSION);
        binio::put_u64(&mut out, self.rows.len() as u64);
        binio::put_u64(&mut out, cols as u64);
        for row in &self.rows {
            for &v in row {
                binio::put_f64(&mut out, v);
            }
        }
        out
    }

    pub fn sidecar_text(&self) -> String {
        let mut s = String::new();
        for o in &self.origins {
            s.push_str(&o.to_string());
            s.push('\n');
        }
        s
    }

    pub fn sidecar_path(matrix: &Path) -> PathBuf {
        matrix.with_extension("idx")
    }

    /// Writes the matrix to `path` and the origin indices next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.matrix_bytes())?;
        std::fs::write(Self::sidecar_path(path), self.sidecar_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path)?;
        let mut r = Reader::new(&buf);
        r.magic(ADV_MAGIC)?;
        let version = r.u32()?;
        if version != ADV_VERSION {
            return r.fail(format!("unsupported adversarial batch version {version}"));
        }
        let n = r.u64()? as usize;
        let cols = r.u64()? as usize;
        if n.checked_mul(cols).and_then(|x| x.checked_mul(8)).is_none() {
            return r.fail("matrix dims overflow");
        }
        let mut rows = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            rows.push((0..cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        r.finish()?;
        let text = std::fs::read_to_string(Self::sidecar_path(path))?;
        let origins = text
            .lines()
            .enumerate()
            .map(|(i, l)| {
                l.trim().parse::<usize>().map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("bad origin index: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        check_len("adversarial sidecar rows", rows.len(), origins.len())?;
        Ok(Self { rows, origins })
    }
}
