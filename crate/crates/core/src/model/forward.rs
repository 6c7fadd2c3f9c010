use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{AttentionMask, ModelConfig, ModelParams, BLANK, DOWNSAMPLE};
use crate::numerics::{Gradients, Tape, Tensor, Var};

/// Parameters recorded on a tape, by name.
#[derive(Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
    trainable: Vec<String>,
}

impl Bound {
    /// Records every parameter on `tape`. Names for which `trainable`
    /// returns `false` become constants and receive no gradient.
    pub fn bind(params: &ModelParams, tape: &mut Tape, trainable: &dyn Fn(&str) -> bool) -> Self {
        let mut bound = Bound::default();
        for (name, t) in &params.tensors {
            let var = if trainable(name) {
                bound.trainable.push(name.clone());
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            };
            bound.vars.insert(name.clone(), var);
        }
        bound
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("parameter {name} is not bound")))
    }

    /// Gradients of all trainable parameters, by name.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.trainable
            .iter()
            .map(|n| (n.clone(), grads.get(self.vars[n])))
            .collect()
    }
}

fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let g = p.get(&format!("{prefix}.gain"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b)
}

fn feed_forward(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(tape, p, &format!("{prefix}.w1"), x)?;
    let h = tape.relu(h)?;
    linear(tape, p, &format!("{prefix}.w2"), h)
}

/// Multi-head scaled dot-product attention of `query` rows over `memory`
/// rows. `mask` has shape `rows(query) × rows(memory)`.
fn multi_head_attention(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    query: Var,
    memory: Var,
    mask: &Tensor,
    heads: usize,
) -> Result<Var> {
    let q = linear(tape, p, &format!("{prefix}.q"), query)?;
    let k = linear(tape, p, &format!("{prefix}.k"), memory)?;
    let v = linear(tape, p, &format!("{prefix}.v"), memory)?;
    let dm = tape.value(q).shape()[1];
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.masked_softmax(scores, mask)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    linear(tape, p, &format!("{prefix}.o"), joined)
}

/// Sinusoidal absolute position table of shape `t×d`.
pub fn positional_encoding(t: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            pe.data_mut()[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

/// Two stride-2 convolutions (kernel 3, ReLU) and a linear map to
/// `d_model`: `T×D → T/4×d_model`.
///
/// Output position `j` sees input frames `4j−3 ..= 4j+3`.
pub fn prenet_forward(tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
    let (t, _) = tape.value(x).dims2()?;
    if t == 0 || t % DOWNSAMPLE != 0 {
        return Err(Error::Invalid(format!(
            "prenet input length {t} is not a positive multiple of {DOWNSAMPLE}"
        )));
    }
    let h = tape.conv1d(x, p.get("prenet.conv1.weight")?, 2)?;
    let h = tape.add_row(h, p.get("prenet.conv1.bias")?)?;
    let h = tape.relu(h)?;
    let h = tape.conv1d(h, p.get("prenet.conv2.weight")?, 2)?;
    let h = tape.add_row(h, p.get("prenet.conv2.bias")?)?;
    let h = tape.relu(h)?;
    linear(tape, p, "prenet.proj", h)
}

/// Pre-norm Transformer encoder. Adds positional encodings to `h`, then
/// runs the first `num_layers` layers and returns every layer's output.
pub fn encoder_forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    h: Var,
    mask: &AttentionMask,
    num_layers: usize,
) -> Result<Vec<Var>> {
    let (t, dm) = tape.value(h).dims2()?;
    if mask.len() != t {
        return Err(Error::shape("encoder_forward", &[t, t], mask.matrix.shape()));
    }
    if num_layers > cfg.encoder_layers {
        return Err(Error::Invalid(format!(
            "asked for {num_layers} encoder layers, model has {}",
            cfg.encoder_layers
        )));
    }
    let pe = tape.constant(positional_encoding(t, dm));
    let mut x = tape.add(h, pe)?;
    let mut outputs = Vec::with_capacity(num_layers);
    for l in 1..=num_layers {
        let prefix = format!("encoder.layers.{l}");
        let n1 = norm(tape, p, &format!("{prefix}.norm1"), x)?;
        let a = multi_head_attention(
            tape,
            p,
            &format!("{prefix}.attn"),
            n1,
            n1,
            &mask.matrix,
            cfg.heads,
        )?;
        x = tape.add(x, a)?;
        let n2 = norm(tape, p, &format!("{prefix}.norm2"), x)?;
        let f = feed_forward(tape, p, &format!("{prefix}.ffn"), n2)?;
        x = tape.add(x, f)?;
        outputs.push(x);
    }
    Ok(outputs)
}

/// `t'×(D·r)` blocks to `t'·r × D` frames; block `b` of position `u`
/// becomes frame `u·r + b`.
pub fn blocks_to_frames(blocks: &Tensor, r: usize) -> Result<Tensor> {
    let (t, w) = blocks.dims2()?;
    if r == 0 || w % r != 0 {
        return Err(Error::shape("blocks_to_frames", blocks.shape(), &[r]));
    }
    blocks.clone().reshaped(vec![t * r, w / r])
}

/// Inverse of [`blocks_to_frames`].
pub fn frames_to_blocks(frames: &Tensor, r: usize) -> Result<Tensor> {
    let (t, d) = frames.dims2()?;
    if r == 0 || t % r != 0 {
        return Err(Error::shape("frames_to_blocks", frames.shape(), &[r]));
    }
    frames.clone().reshaped(vec![t / r, d * r])
}

/// Projects encoder output `t'×d_model` to `t'×(D·r)` and reshapes it to
/// `t'·r × D`, one predicted frame per input frame.
pub fn mpc_projection_reshape(
    tape: &mut Tape,
    p: &Bound,
    enc_out: Var,
    r: usize,
    feat_dim: usize,
) -> Result<Var> {
    let (t, _) = tape.value(enc_out).dims2()?;
    let w = p.get("mpc_head.weight")?;
    let out_dim = tape.value(w).shape()[1];
    if out_dim != r * feat_dim {
        return Err(Error::shape("mpc_projection_reshape", &[out_dim], &[r, feat_dim]));
    }
    let y = linear(tape, p, "mpc_head", enc_out)?;
    tape.reshape(y, vec![t * r, feat_dim])
}

/// Per-position logits over the vocabulary for CTC.
pub fn ctc_logits(tape: &mut Tape, p: &Bound, enc_out: Var) -> Result<Var> {
    linear(tape, p, "ctc_head", enc_out)
}

/// Teacher-forced Transformer decoder. `tokens` is the decoder input
/// (typically the start symbol followed by the label); returns `L×V`
/// logits.
pub fn decoder_forward(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ModelConfig,
    tokens: &[usize],
    enc_out: Var,
) -> Result<Var> {
    if tokens.is_empty() {
        return Err(Error::Invalid("decoder needs at least one input token".into()));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let (t_enc, _) = tape.value(enc_out).dims2()?;
    let l = tokens.len();
    let emb = tape.embedding(p.get("decoder.embed")?, tokens)?;
    let pe = tape.constant(positional_encoding(l, cfg.d_model));
    let mut x = tape.add(emb, pe)?;
    let self_mask = super::causal_mask(l)?.matrix;
    let cross_mask = Tensor::zeros(&[l, t_enc]);
    for layer in 1..=cfg.decoder_layers {
        let prefix = format!("decoder.layers.{layer}");
        let n1 = norm(tape, p, &format!("{prefix}.norm1"), x)?;
        let a = multi_head_attention(
            tape,
            p,
            &format!("{prefix}.self_attn"),
            n1,
            n1,
            &self_mask,
            cfg.heads,
        )?;
        x = tape.add(x, a)?;
        let n2 = norm(tape, p, &format!("{prefix}.norm2"), x)?;
        let c = multi_head_attention(
            tape,
            p,
            &format!("{prefix}.cross_attn"),
            n2,
            enc_out,
            &cross_mask,
            cfg.heads,
        )?;
        x = tape.add(x, c)?;
        let n3 = norm(tape, p, &format!("{prefix}.norm3"), x)?;
        let f = feed_forward(tape, p, &format!("{prefix}.ffn"), n3)?;
        x = tape.add(x, f)?;
    }
    let x = norm(tape, p, "decoder.norm", x)?;
    linear(tape, p, "decoder.out", x)
}

/// Decoder input and target for teacher forcing: `[sos, y…]` and
/// `[y…, eos]`, with the blank id serving as both markers.
pub fn teacher_forcing_pair(label: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(label.len() + 1);
    input.push(BLANK);
    input.extend_from_slice(label);
    let mut target = label.to_vec();
    target.push(BLANK);
    (input, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, MaskKind};

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder_layers: 2,
            decoder_layers: 1,
            d_model: 16,
            d_ff: 32,
            heads: 2,
            downsample: 4,
            feat_dim: 3,
            vocab_size: 5,
            prenet_channels: 8,
        }
    }

    #[test]
    fn prenet_shapes_and_zero_input() {
        let cfg = tiny();
        let params = init_params(&cfg, 1).unwrap();
        let mut tape = Tape::new();
        let p = Bound::bind(&params, &mut tape, &|_| false);
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let y = prenet_forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 16]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let bad = tape.constant(Tensor::zeros(&[6, 3]));
        assert!(prenet_forward(&mut tape, &p, bad).is_err());
    }

    #[test]
    fn reshape_index_bookkeeping() {
        let (t, r, d) = (2usize, 4usize, 3usize);
        let mut blocks = Tensor::zeros(&[t, r * d]);
        for u in 0..t {
            for b in 0..r {
                for c in 0..d {
                    blocks.data_mut()[u * r * d + b * d + c] = (100 * u + 10 * b + c) as f64;
                }
            }
        }
        let frames = blocks_to_frames(&blocks, r).unwrap();
        assert_eq!(frames.shape(), &[8, 3]);
        for u in 0..t {
            for b in 0..r {
                for c in 0..d {
                    assert_eq!(frames.at(u * r + b, c), (100 * u + 10 * b + c) as f64);
                }
            }
        }
        assert_eq!(frames_to_blocks(&frames, r).unwrap(), blocks);
    }

    #[test]
    fn single_position_full_and_causal_agree() {
        let cfg = tiny();
        let params = init_params(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let p = Bound::bind(&params, &mut tape, &|_| false);
        let h = tape.constant(Tensor::full(&[1, 16], 0.3));
        let full = AttentionMask::new(MaskKind::Full, 1).unwrap();
        let causal = AttentionMask::new(MaskKind::Causal, 1).unwrap();
        let a = encoder_forward(&mut tape, &p, &cfg, h, &full, 2).unwrap();
        let b = encoder_forward(&mut tape, &p, &cfg, h, &causal, 2).unwrap();
        assert_eq!(tape.value(a[1]), tape.value(b[1]));
    }

    #[test]
    fn encoder_rejects_mask_mismatch() {
        let cfg = tiny();
        let params = init_params(&cfg, 2).unwrap();
        let mut tape = Tape::new();
        let p = Bound::bind(&params, &mut tape, &|_| false);
        let h = tape.constant(Tensor::zeros(&[3, 16]));
        let mask = AttentionMask::new(MaskKind::Full, 2).unwrap();
        assert!(encoder_forward(&mut tape, &p, &cfg, h, &mask, 2).is_err());
    }

    #[test]
    fn decoder_is_causal_over_tokens() {
        let cfg = tiny();
        let params = init_params(&cfg, 3).unwrap();
        let run = |tokens: &[usize]| {
            let mut tape = Tape::new();
            let p = Bound::bind(&params, &mut tape, &|_| false);
            let enc = tape.constant(Tensor::full(&[3, 16], 0.1));
            let y = decoder_forward(&mut tape, &p, &cfg, tokens, enc).unwrap();
            tape.value(y).clone()
        };
        let a = run(&[0, 1, 2, 3]);
        let b = run(&[0, 1, 4, 3]);
        assert_eq!(a.shape(), &[4, 5]);
        assert_eq!(a.data()[..10], b.data()[..10]);
        assert_ne!(a.data()[10..15], b.data()[10..15]);

        let mut tape = Tape::new();
        let p = Bound::bind(&params, &mut tape, &|_| false);
        let enc = tape.constant(Tensor::full(&[3, 16], 0.1));
        assert!(matches!(
            decoder_forward(&mut tape, &p, &cfg, &[0, 5], enc),
            Err(Error::TokenOutOfRange { id: 5, .. })
        ));
    }

    #[test]
    fn teacher_forcing_pair_shifts_label() {
        assert_eq!(teacher_forcing_pair(&[3, 1]), (vec![0, 3, 1], vec![3, 1, 0]));
    }
}
