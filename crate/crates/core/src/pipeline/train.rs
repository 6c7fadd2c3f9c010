//! Batch losses, the optimization loop and dev-set scoring.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{pad_to_multiple, FeatureSequence, Normalizer};
use crate::masking::{apply_mask, plan_masks, MaskPlan};
use crate::model::{
    ctc_logits, decoder_forward, encoder_forward, mpc_projection_reshape, param_group,
    prenet_forward, teacher_forcing_pair, AttentionMask, Bound, MaskKind, ModelConfig,
    ModelParams, DOWNSAMPLE,
};
use crate::numerics::{AdamState, Tape, Tensor, Var};
use crate::objectives::{
    apc_loss, attention_ce_loss, cer, choose_branch, ctc_greedy_decode, ctc_loss, edit_distance,
    joint_loss, mpc_loss, Branch, LossBreakdown, LossParts, LossWeights, UnifiedConfig,
};
use crate::pipeline::checkpoint::{epoch_checkpoint_path, Checkpoint, CheckpointHeader};
use crate::pipeline::config::{MaskingConfig, TransferConfig};
use crate::pipeline::metrics::{MetricsRecord, MetricsWriter};
use crate::pipeline::{mix_seed, Stage};
use crate::schedules::{layer_multiplier, lrate, WarmupConfig};

/// A normalized utterance padded to a multiple of the downsampling rate.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub utterance_id: String,
    pub input: FeatureSequence,
    pub valid: usize,
    pub transcript: Option<Vec<usize>>,
}

pub fn prepare(
    seqs: &[FeatureSequence],
    transcripts: &[Option<Vec<usize>>],
    normalizer: &Normalizer,
) -> Result<Vec<Prepared>> {
    seqs.iter()
        .zip(transcripts)
        .map(|(s, tr)| {
            let (input, valid) = pad_to_multiple(&normalizer.apply(s)?, DOWNSAMPLE);
            Ok(Prepared {
                utterance_id: s.utterance_id.clone(),
                input,
                valid,
                transcript: tr.clone(),
            })
        })
        .collect()
}

fn label_of(p: &Prepared) -> Result<&[usize]> {
    p.transcript.as_deref().ok_or_else(|| Error::Malformed {
        path: PathBuf::from(&p.utterance_id),
        what: "utterance has no transcript".into(),
    })
}

/// Prenet and the first `num_layers` encoder layers; returns the last
/// layer's output.
pub fn encode(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    input: &Tensor,
    kind: MaskKind,
    num_layers: usize,
) -> Result<Var> {
    let x = tape.constant(input.clone());
    let h = prenet_forward(tape, p, x)?;
    let t = tape.value(h).dims2()?.0;
    let mask = AttentionMask::new(kind, t)?;
    let outs = encoder_forward(tape, p, cfg, h, &mask, num_layers)?;
    outs.last()
        .copied()
        .ok_or_else(|| Error::Invalid("encoder needs at least one layer".into()))
}

/// Teacher-forced attention loss and CTC loss of one utterance.
pub fn supervised_losses(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    enc: Var,
    label: &[usize],
    smoothing: f64,
) -> Result<(Var, Var)> {
    let logits = ctc_logits(tape, p, enc)?;
    let ctc = ctc_loss(tape, logits, label)?;
    let (dec_in, dec_target) = teacher_forcing_pair(label);
    let dec_logits = decoder_forward(tape, p, cfg, &dec_in, enc)?;
    let attn = attention_ce_loss(tape, dec_logits, &dec_target, smoothing)?;
    Ok((attn, ctc))
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let w = 1.0 / vars.len() as f64;
    let terms: Vec<(Var, f64)> = vars.iter().map(|&v| (v, w)).collect();
    tape.weighted_sum(&terms)
}

/// Settings of a self-supervised stage.
#[derive(Clone, Copy, Debug)]
pub struct PretrainObjective {
    pub apc_probability: f64,
    pub apc_step: usize,
    pub masking: MaskingConfig,
}

/// Settings of a supervised stage.
#[derive(Clone, Copy, Debug)]
pub struct FinetuneObjective {
    pub transfer: TransferConfig,
    pub smoothing: f64,
    pub masking: MaskingConfig,
    /// Encoder depth feeding the heads.
    pub num_layers: usize,
}

#[derive(Clone, Copy, Debug)]
pub enum Objective {
    Pretrain(PretrainObjective),
    Finetune(FinetuneObjective),
}

/// Loss of one batch recorded on `tape`.
pub struct BatchLoss {
    pub loss: Var,
    pub breakdown: LossBreakdown,
    pub l_apc: f64,
    pub branch: Option<Branch>,
}

pub fn pretrain_batch_loss(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &[&Prepared],
    obj: &PretrainObjective,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLoss> {
    let branch = choose_branch(
        &UnifiedConfig {
            p: obj.apc_probability,
        },
        rng,
    );
    let mut per_seq = Vec::with_capacity(batch.len());
    for item in batch {
        let t = item.input.num_frames();
        let target = item.input.frames();
        let loss = match branch {
            Branch::Mpc => {
                let plan = plan_masks(t, item.valid, obj.masking.chunk_size, obj.masking.p, rng)?;
                let masked = apply_mask(&item.input, &plan)?;
                let enc = encode(tape, p, cfg, masked.frames(), MaskKind::Full, cfg.encoder_layers)?;
                let pred = mpc_projection_reshape(tape, p, enc, DOWNSAMPLE, cfg.feat_dim)?;
                mpc_loss(tape, pred, target, &plan.frame_mask)?
            }
            Branch::Apc => {
                let enc = encode(tape, p, cfg, target, MaskKind::Causal, cfg.encoder_layers)?;
                let pred = mpc_projection_reshape(tape, p, enc, DOWNSAMPLE, cfg.feat_dim)?;
                apc_loss(tape, pred, target, obj.apc_step, item.valid)?
            }
        };
        per_seq.push(loss);
    }
    let loss = mean_of(tape, &per_seq)?;
    let value = tape.value(loss).item();
    let (breakdown, l_apc) = match branch {
        Branch::Mpc => (
            LossBreakdown::new(
                None,
                None,
                Some(value),
                LossWeights {
                    alpha_attn: 0.0,
                    beta_ctc: 0.0,
                    gamma_mpc: 1.0,
                },
            )?,
            0.0,
        ),
        Branch::Apc => (
            LossBreakdown {
                total: value,
                ..LossBreakdown::default()
            },
            value,
        ),
    };
    Ok(BatchLoss {
        loss,
        breakdown,
        l_apc,
        branch: Some(branch),
    })
}

pub fn finetune_batch_loss(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    batch: &[&Prepared],
    obj: &FinetuneObjective,
    epoch: u32,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLoss> {
    let weights = obj.transfer.weights(epoch);
    let multitask = obj.transfer.multitask_mpc;
    let (mut attn, mut ctc, mut mpc) = (Vec::new(), Vec::new(), Vec::new());
    for item in batch {
        let label = label_of(item)?;
        let t = item.input.num_frames();
        let plan = if multitask {
            plan_masks(t, item.valid, obj.masking.chunk_size, obj.masking.p, rng)?
        } else {
            MaskPlan::empty(t, obj.masking.chunk_size)
        };
        let input = if multitask {
            apply_mask(&item.input, &plan)?
        } else {
            item.input.clone()
        };
        let enc = encode(tape, p, cfg, input.frames(), MaskKind::Full, obj.num_layers)?;
        let (a, c) = supervised_losses(tape, p, cfg, enc, label, obj.smoothing)?;
        attn.push(a);
        ctc.push(c);
        if multitask {
            let pred = mpc_projection_reshape(tape, p, enc, DOWNSAMPLE, cfg.feat_dim)?;
            mpc.push(mpc_loss(tape, pred, item.input.frames(), &plan.frame_mask)?);
        }
    }
    let parts = LossParts {
        attn: Some(mean_of(tape, &attn)?),
        ctc: Some(mean_of(tape, &ctc)?),
        mpc: if multitask {
            Some(mean_of(tape, &mpc)?)
        } else {
            None
        },
    };
    let (loss, breakdown) = joint_loss(tape, parts, weights)?;
    Ok(BatchLoss {
        loss,
        breakdown,
        l_apc: 0.0,
        branch: None,
    })
}

/// Learning rate of every parameter group present among `names`.
pub fn group_learning_rates<'a>(
    names: impl Iterator<Item = &'a str>,
    base: f64,
    layerwise: Option<(&TransferConfig, usize)>,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for name in names {
        let group = param_group(name);
        if out.contains_key(&group) {
            continue;
        }
        let mult = match (crate::model::encoder_layer_of(name), layerwise) {
            (Some(l), Some((t, layers))) => layer_multiplier(&t.layerwise_config(), l, layers)?,
            _ => 1.0,
        };
        out.insert(group, base * mult);
    }
    Ok(out)
}

/// Mutable training state carried across epochs and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: u32,
}

/// Everything fixed for one call of [`run_epochs`].
pub struct RunSpec<'a> {
    pub stage: Stage,
    pub cfg: &'a ModelConfig,
    pub data: &'a [Prepared],
    pub objective: Objective,
    pub seed: u64,
    pub batch_size: usize,
    pub warmup: WarmupConfig,
    pub weight_decay: f64,
    pub layerwise: bool,
    pub trainable: &'a dyn Fn(&str) -> bool,
    /// Checkpoint directory and header template; `None` skips writing.
    pub checkpoints: Option<(&'a Path, CheckpointHeader)>,
    pub normalizer: Option<&'a Normalizer>,
}

/// Visiting order of epoch `epoch`, a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: u32) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5348_5546 ^ u64::from(epoch)));
    order.shuffle(&mut rng);
    order
}

pub fn state_checkpoint(
    state: &TrainState,
    header: &CheckpointHeader,
    normalizer: Option<&Normalizer>,
) -> Checkpoint {
    let mut header = header.clone();
    header.epoch = state.epoch;
    header.step = state.adam.step;
    Checkpoint {
        header,
        params: state.params.clone(),
        adam: state.adam.clone(),
        normalizer: normalizer.cloned(),
        rng: state.rng.clone(),
    }
}

/// Trains from `state.epoch` until `end_epoch` epochs are complete,
/// writing one metrics record per step and one checkpoint per epoch.
pub fn run_epochs(
    spec: &RunSpec<'_>,
    state: &mut TrainState,
    end_epoch: u32,
    mut metrics: Option<&mut MetricsWriter>,
) -> Result<()> {
    if spec.data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let layerwise = if spec.layerwise {
        Some(spec.cfg.encoder_layers)
    } else {
        None
    };
    let started = Instant::now();
    while state.epoch < end_epoch {
        let epoch = state.epoch;
        let order = epoch_order(spec.data.len(), spec.seed, epoch);
        for idx in order.chunks(spec.batch_size) {
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &spec.data[i]).collect();
            let mut tape = Tape::new();
            let bound = Bound::bind(&state.params, &mut tape, spec.trainable);
            let out = match &spec.objective {
                Objective::Pretrain(o) => {
                    pretrain_batch_loss(&mut tape, &bound, spec.cfg, &batch, o, &mut state.rng)?
                }
                Objective::Finetune(o) => finetune_batch_loss(
                    &mut tape,
                    &bound,
                    spec.cfg,
                    &batch,
                    o,
                    epoch,
                    &mut state.rng,
                )?,
            };
            let grads = tape.backward(out.loss)?;
            let grads = bound.gradients(&grads);
            let step = state.adam.step + 1;
            let base = lrate(&spec.warmup, step)?;
            let transfer = match &spec.objective {
                Objective::Finetune(o) => Some(o.transfer),
                Objective::Pretrain(_) => None,
            };
            let group_lr = group_learning_rates(
                grads.keys().map(String::as_str),
                base,
                transfer.as_ref().zip(layerwise),
            )?;
            state.adam.step_with(
                &mut state.params.tensors,
                &grads,
                &|name| group_lr[&param_group(name)],
                spec.weight_decay,
            )?;
            if let Some(w) = metrics.as_deref_mut() {
                w.write(&MetricsRecord {
                    step,
                    epoch,
                    stage: spec.stage,
                    losses: out.breakdown,
                    l_apc: out.l_apc,
                    lr: base,
                    branch: out.branch,
                    group_lr,
                    wall_ms: started.elapsed().as_millis() as u64,
                })?;
            }
        }
        state.epoch += 1;
        if let Some((dir, header)) = &spec.checkpoints {
            state_checkpoint(state, header, spec.normalizer)
                .save(epoch_checkpoint_path(dir, state.epoch))?;
        }
        if let Some(w) = metrics.as_deref_mut() {
            w.flush()?;
        }
    }
    Ok(())
}

/// Dev-set scores: mean joint loss `α·l_attn + β·l_ctc` on clean input
/// and corpus error rate of greedy CTC decoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevReport {
    pub loss: f64,
    pub cer: f64,
    pub edits: usize,
    pub ref_len: usize,
}

pub fn greedy_hypothesis(
    params: &ModelParams,
    cfg: &ModelConfig,
    item: &Prepared,
    kind: MaskKind,
    num_layers: usize,
) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = Bound::bind(params, &mut tape, &|_| false);
    let enc = encode(&mut tape, &bound, cfg, item.input.frames(), kind, num_layers)?;
    let logits = ctc_logits(&mut tape, &bound, enc)?;
    ctc_greedy_decode(tape.value(logits))
}

pub fn evaluate_dev(
    params: &ModelParams,
    cfg: &ModelConfig,
    data: &[Prepared],
    transfer: &TransferConfig,
    smoothing: f64,
    num_layers: usize,
) -> Result<DevReport> {
    if data.is_empty() {
        return Err(Error::Invalid("dev set is empty".into()));
    }
    let weights = LossWeights {
        alpha_attn: transfer.alpha_attn,
        beta_ctc: transfer.beta_ctc,
        gamma_mpc: 0.0,
    };
    let (mut loss_sum, mut edits, mut ref_len) = (0.0, 0, 0);
    for item in data {
        let label = label_of(item)?;
        let mut tape = Tape::new();
        let bound = Bound::bind(params, &mut tape, &|_| false);
        let enc = encode(&mut tape, &bound, cfg, item.input.frames(), MaskKind::Full, num_layers)?;
        let (a, c) = supervised_losses(&mut tape, &bound, cfg, enc, label, smoothing)?;
        let b = LossBreakdown::new(
            Some(tape.value(a).item()),
            Some(tape.value(c).item()),
            None,
            weights,
        )?;
        loss_sum += b.total;
        let logits = ctc_logits(&mut tape, &bound, enc)?;
        let hyp = ctc_greedy_decode(tape.value(logits))?;
        edits += edit_distance(label, &hyp);
        ref_len += label.len();
    }
    let cer = if ref_len == 0 {
        0.0
    } else {
        edits as f64 / ref_len as f64
    };
    Ok(DevReport {
        loss: loss_sum / data.len() as f64,
        cer,
        edits,
        ref_len,
    })
}

/// Per-utterance error rate, `None` for an empty reference.
pub fn utterance_cer(reference: &[usize], hypothesis: &[usize]) -> Option<f64> {
    cer(reference, hypothesis).ok()
}
