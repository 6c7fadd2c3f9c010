use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every tensor of `other` whose name satisfies `keep`.
    pub fn copy_from(&mut self, other: &ModelParams, keep: impl Fn(&str) -> bool) -> Result<()> {
        for (name, t) in &other.tensors {
            if !keep(name) {
                continue;
            }
            let slot = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Invalid(format!("unexpected parameter {name}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::shape("copy_from", slot.shape(), t.shape()));
            }
            *slot = t.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamInit {
    /// `U(-1/√fan_in, 1/√fan_in)`
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

fn linear(out: &mut Vec<(String, Vec<usize>, ParamInit)>, prefix: &str, inp: usize, dim: usize) {
    out.push((
        format!("{prefix}.weight"),
        vec![inp, dim],
        ParamInit::Uniform { fan_in: inp },
    ));
    out.push((format!("{prefix}.bias"), vec![dim], ParamInit::Zeros));
}

fn norm(out: &mut Vec<(String, Vec<usize>, ParamInit)>, prefix: &str, dim: usize) {
    out.push((format!("{prefix}.gain"), vec![dim], ParamInit::Ones));
    out.push((format!("{prefix}.bias"), vec![dim], ParamInit::Zeros));
}

fn attention(out: &mut Vec<(String, Vec<usize>, ParamInit)>, prefix: &str, dm: usize) {
    for proj in ["q", "k", "v", "o"] {
        linear(out, &format!("{prefix}.{proj}"), dm, dm);
    }
}

fn ffn(out: &mut Vec<(String, Vec<usize>, ParamInit)>, prefix: &str, dm: usize, ff: usize) {
    linear(out, &format!("{prefix}.w1"), dm, ff);
    linear(out, &format!("{prefix}.w2"), ff, dm);
}

/// Name, shape and initializer of every parameter of `cfg`.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamInit)> {
    let (dm, ff, c, d, v) = (
        cfg.d_model,
        cfg.d_ff,
        cfg.prenet_channels,
        cfg.feat_dim,
        cfg.vocab_size,
    );
    let mut out = Vec::new();
    out.push((
        "prenet.conv1.weight".into(),
        vec![3, d, c],
        ParamInit::Uniform { fan_in: 3 * d },
    ));
    out.push(("prenet.conv1.bias".into(), vec![c], ParamInit::Zeros));
    out.push((
        "prenet.conv2.weight".into(),
        vec![3, c, c],
        ParamInit::Uniform { fan_in: 3 * c },
    ));
    out.push(("prenet.conv2.bias".into(), vec![c], ParamInit::Zeros));
    linear(&mut out, "prenet.proj", c, dm);
    for l in 1..=cfg.encoder_layers {
        let p = format!("encoder.layers.{l}");
        norm(&mut out, &format!("{p}.norm1"), dm);
        attention(&mut out, &format!("{p}.attn"), dm);
        norm(&mut out, &format!("{p}.norm2"), dm);
        ffn(&mut out, &format!("{p}.ffn"), dm, ff);
    }
    linear(&mut out, "mpc_head", dm, d * cfg.downsample);
    linear(&mut out, "ctc_head", dm, v);
    out.push((
        "decoder.embed".into(),
        vec![v, dm],
        ParamInit::Uniform { fan_in: v },
    ));
    for l in 1..=cfg.decoder_layers {
        let p = format!("decoder.layers.{l}");
        norm(&mut out, &format!("{p}.norm1"), dm);
        attention(&mut out, &format!("{p}.self_attn"), dm);
        norm(&mut out, &format!("{p}.norm2"), dm);
        attention(&mut out, &format!("{p}.cross_attn"), dm);
        norm(&mut out, &format!("{p}.norm3"), dm);
        ffn(&mut out, &format!("{p}.ffn"), dm, ff);
    }
    norm(&mut out, "decoder.norm", dm);
    linear(&mut out, "decoder.out", dm, v);
    out
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a of the name, mixed with the run seed through splitmix64
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic initialization. Each tensor draws from its own stream
/// keyed by `(seed, name)`, so a tensor's initial value does not depend on
/// which other tensors the configuration contains.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in param_specs(cfg) {
        let t = match init {
            ParamInit::Zeros => Tensor::zeros(&shape),
            ParamInit::Ones => Tensor::full(&shape, 1.0),
            ParamInit::Uniform { fan_in } => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(shape, data)?
            }
        };
        tensors.insert(name, t);
    }
    Ok(ModelParams { tensors })
}

/// Encoder layer (1-based) that owns the parameter `name`, if any.
pub fn encoder_layer_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("encoder.layers.")?;
    rest.split('.').next()?.parse().ok()
}

/// Coarse parameter group used for learning-rate assignment:
/// `prenet`, `encoder.{l}`, `mpc_head`, `ctc_head` or `decoder`.
pub fn param_group(name: &str) -> String {
    if let Some(l) = encoder_layer_of(name) {
        return format!("encoder.{l}");
    }
    name.split('.').next().unwrap_or(name).to_string()
}
