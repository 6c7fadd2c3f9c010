//! Training losses and evaluation metrics.

mod ctc;

pub use ctc::{collapse_path, ctc_greedy_decode, ctc_loss, ctc_loss_and_grad, min_frames};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const DEFAULT_APC_STEP: usize = 5;
pub const DEFAULT_LABEL_SMOOTHING: f64 = 0.1;

/// Which pre-training objective a batch uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Masked reconstruction with full attention.
    Mpc,
    /// Future-frame prediction with causal attention.
    Apc,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnifiedConfig {
    /// Probability of the APC branch.
    pub p: f64,
}

impl Default for UnifiedConfig {
    fn default() -> Self {
        UnifiedConfig { p: 0.5 }
    }
}

/// One draw per batch: APC with probability `p`, MPC otherwise.
pub fn choose_branch<R: Rng + ?Sized>(cfg: &UnifiedConfig, rng: &mut R) -> Branch {
    if rng.gen::<f64>() < cfg.p {
        Branch::Apc
    } else {
        Branch::Mpc
    }
}

/// L1 distance to a constant target, averaged over the selected elements.
fn mean_abs_error(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    pairs: impl Iterator<Item = (usize, usize)>,
) -> Result<Var> {
    let (_, d) = tape.value(pred).dims2()?;
    let p = tape.value(pred).data();
    let tg = target.data();
    let pairs: Vec<(usize, usize)> = pairs.collect();
    let mut grad = vec![0.0; p.len()];
    if pairs.is_empty() {
        return tape.fused_scalar(pred, 0.0, grad);
    }
    let n = (pairs.len() * d) as f64;
    let mut total = 0.0;
    for (pred_row, target_row) in pairs {
        for c in 0..d {
            let diff = p[pred_row * d + c] - tg[target_row * d + c];
            total += diff.abs();
            grad[pred_row * d + c] += diff.signum() * f64::from(diff != 0.0) / n;
        }
    }
    tape.fused_scalar(pred, total / n, grad)
}

/// Masked reconstruction loss: mean absolute error over every bin of every
/// masked frame. Zero, with zero gradient, when nothing is masked.
pub fn mpc_loss(tape: &mut Tape, pred: Var, target: &Tensor, frame_mask: &[bool]) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if shape != target.shape() || shape.first() != Some(&frame_mask.len()) {
        return Err(Error::shape("mpc_loss", &shape, target.shape()));
    }
    let rows = frame_mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| (i, i));
    mean_abs_error(tape, pred, target, rows)
}

/// Future-frame loss: prediction at frame `u` against target frame
/// `u + step`, for `u < valid − step`. Zero when `valid <= step`.
pub fn apc_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    step: usize,
    valid: usize,
) -> Result<Var> {
    let shape = tape.value(pred).shape().to_vec();
    if shape != target.shape() {
        return Err(Error::shape("apc_loss", &shape, target.shape()));
    }
    if step == 0 {
        return Err(Error::Invalid("APC step must be at least 1".into()));
    }
    if valid > shape[0] {
        return Err(Error::Invalid(format!(
            "valid length {valid} exceeds {} frames",
            shape[0]
        )));
    }
    let count = valid.saturating_sub(step);
    mean_abs_error(tape, pred, target, (0..count).map(|u| (u, u + step)))
}

/// Cross-entropy against label-smoothed targets (`1 − ε` on the target,
/// `ε/(V−1)` elsewhere), averaged over positions.
pub fn attention_ce_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    smoothing: f64,
) -> Result<Var> {
    let (l, v) = tape.value(logits).dims2()?;
    if l != targets.len() || l == 0 {
        return Err(Error::shape("attention_ce_loss", &[l, v], &[targets.len()]));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Invalid(format!("label smoothing must lie in [0, 1), got {smoothing}")));
    }
    if let Some(&id) = targets.iter().find(|&&id| id >= v) {
        return Err(Error::TokenOutOfRange { id, vocab: v });
    }
    let lp = ctc::log_softmax_rows(tape.value(logits))?;
    let off = if v > 1 { smoothing / (v - 1) as f64 } else { 0.0 };
    let mut total = 0.0;
    let mut grad = vec![0.0; l * v];
    for (i, &y) in targets.iter().enumerate() {
        for k in 0..v {
            let q = if k == y { 1.0 - smoothing } else { off };
            if q > 0.0 {
                total -= q * lp[i * v + k];
            }
            grad[i * v + k] = (lp[i * v + k].exp() - q) / l as f64;
        }
    }
    tape.fused_scalar(logits, total / l as f64, grad)
}

/// Weights of the joint fine-tuning loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha_attn: f64,
    pub beta_ctc: f64,
    pub gamma_mpc: f64,
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha_attn", self.alpha_attn),
            ("beta_ctc", self.beta_ctc),
            ("gamma_mpc", self.gamma_mpc),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Invalid(format!("{name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Loss components and their weighted total
/// `α·l_attn + β·l_ctc + γ·l_mpc`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_attn: f64,
    pub l_ctc: f64,
    pub l_mpc: f64,
    pub alpha_attn: f64,
    pub beta_ctc: f64,
    pub gamma_mpc: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Absent components are recorded as zero with weight zero.
    pub fn new(
        l_attn: Option<f64>,
        l_ctc: Option<f64>,
        l_mpc: Option<f64>,
        weights: LossWeights,
    ) -> Result<Self> {
        weights.validate()?;
        let pick = |v: Option<f64>, w: f64| v.map_or((0.0, 0.0), |v| (v, w));
        let (l_attn, alpha_attn) = pick(l_attn, weights.alpha_attn);
        let (l_ctc, beta_ctc) = pick(l_ctc, weights.beta_ctc);
        let (l_mpc, gamma_mpc) = pick(l_mpc, weights.gamma_mpc);
        let mut total = 0.0;
        total += alpha_attn * l_attn;
        total += beta_ctc * l_ctc;
        total += gamma_mpc * l_mpc;
        Ok(LossBreakdown {
            l_attn,
            l_ctc,
            l_mpc,
            alpha_attn,
            beta_ctc,
            gamma_mpc,
            total,
        })
    }
}

/// Scalar loss components recorded on a tape.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossParts {
    pub attn: Option<Var>,
    pub ctc: Option<Var>,
    pub mpc: Option<Var>,
}

/// Weighted sum of the present components, on the tape and as a breakdown.
/// The tape total and `breakdown.total` are bitwise equal.
pub fn joint_loss(
    tape: &mut Tape,
    parts: LossParts,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let val = |v: Option<Var>, tape: &Tape| v.map(|v| tape.value(v).item());
    let breakdown = LossBreakdown::new(
        val(parts.attn, tape),
        val(parts.ctc, tape),
        val(parts.mpc, tape),
        weights,
    )?;
    let terms: Vec<(Var, f64)> = [
        (parts.attn, weights.alpha_attn),
        (parts.ctc, weights.beta_ctc),
        (parts.mpc, weights.gamma_mpc),
    ]
    .into_iter()
    .filter_map(|(v, w)| v.map(|v| (v, w)))
    .collect();
    if terms.is_empty() {
        return Err(Error::Invalid("joint loss needs at least one component".into()));
    }
    let total = tape.weighted_sum(&terms)?;
    Ok((total, breakdown))
}

/// Levenshtein distance between two token sequences.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=hypothesis.len()).collect();
    let mut cur = vec![0; hypothesis.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hypothesis.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hypothesis.len()]
}

/// Token error rate: edit distance over reference length.
pub fn cer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Invalid("error rate needs a non-empty reference".into()));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}
