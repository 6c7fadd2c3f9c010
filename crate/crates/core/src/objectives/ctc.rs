//! Connectionist temporal classification.
//!
//! The loss is evaluated with the forward (alpha) recursion over the
//! blank-extended label in log space; the backward (beta) recursion gives
//! per-frame label posteriors, from which the gradient w.r.t. the logits is
//! `softmax(logits) − posterior`.

use crate::error::{Error, Result};
use crate::model::BLANK;
use crate::numerics::{Tape, Tensor, Var};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub(crate) fn log_softmax_rows(logits: &Tensor) -> Result<Vec<f64>> {
    let (t, v) = logits.dims2()?;
    let mut out = vec![0.0; t * v];
    for i in 0..t {
        let row = logits.row(i);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        for j in 0..v {
            out[i * v + j] = row[j] - lse;
        }
    }
    Ok(out)
}

/// Minimum number of frames that can emit `label`: one per token plus one
/// blank between each pair of equal neighbours.
pub fn min_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC negative log-likelihood of `label` under `logits[t×V]`, and its
/// gradient w.r.t. the logits.
pub fn ctc_loss_and_grad(logits: &Tensor, label: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (t, v) = logits.dims2()?;
    if let Some(&id) = label.iter().find(|&&id| id == BLANK || id >= v) {
        return Err(Error::TokenOutOfRange { id, vocab: v });
    }
    let needed = min_frames(label);
    if t == 0 || needed > t {
        return Err(Error::InfeasibleAlignment {
            label_len: label.len(),
            needed: needed.max(1),
            frames: t,
        });
    }
    let lp = log_softmax_rows(logits)?;
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(label.iter().flat_map(|&k| [k, BLANK]))
        .collect();
    let s_len = ext.len();
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; t * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for ti in 1..t {
        for s in 0..s_len {
            let prev = &alpha[(ti - 1) * s_len..ti * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            alpha[ti * s_len + s] = if acc == ninf {
                ninf
            } else {
                acc + lp[ti * v + ext[s]]
            };
        }
    }
    let last = &alpha[(t - 1) * s_len..];
    let log_p = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    if log_p == ninf {
        return Err(Error::NonFinite("ctc_loss"));
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; t * s_len];
    beta[(t - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[(t - 1) * s_len + s_len - 2] = 0.0;
    }
    for ti in (0..t - 1).rev() {
        for s in 0..s_len {
            let next = |sp: usize| beta[(ti + 1) * s_len + sp] + lp[(ti + 1) * v + ext[sp]];
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next(s + 2));
            }
            beta[ti * s_len + s] = acc;
        }
    }

    let mut grad = vec![0.0; t * v];
    for ti in 0..t {
        for j in 0..v {
            grad[ti * v + j] = lp[ti * v + j].exp();
        }
        for s in 0..s_len {
            let a = alpha[ti * s_len + s];
            let b = beta[ti * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            grad[ti * v + ext[s]] -= (a + b - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// Records the CTC loss of `label` under the `t×V` logits on the tape.
pub fn ctc_loss(tape: &mut Tape, logits: Var, label: &[usize]) -> Result<Var> {
    let (value, grad) = ctc_loss_and_grad(tape.value(logits), label)?;
    tape.fused_scalar(logits, value, grad)
}

/// Best-path decoding: per-frame argmax, merge repeats, drop blanks.
pub fn ctc_greedy_decode(logits: &Tensor) -> Result<Vec<usize>> {
    let (t, _) = logits.dims2()?;
    let path: Vec<usize> = (0..t)
        .map(|i| {
            logits
                .row(i)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &x)| {
                    if x > best.1 {
                        (j, x)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect();
    Ok(collapse_path(&path))
}

/// Merges runs of equal ids and removes blanks.
pub fn collapse_path(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &k in path {
        if Some(k) != prev && k != BLANK {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}
