#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mpclab::model::{ModelConfig, ModelParams};
use mpclab::numerics::Tensor;
use mpclab::pipeline::config::StylePreset;
use mpclab::pipeline::{cmd_synth, StageConfig};

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder_layers: 2,
        decoder_layers: 1,
        d_model: 16,
        d_ff: 32,
        heads: 2,
        downsample: 4,
        feat_dim: 8,
        vocab_size: 5,
        prenet_channels: 8,
    }
}

pub struct Corpus {
    pub seed: u64,
    pub count: usize,
    pub frames: (usize, usize),
    pub feat_dim: usize,
    pub labeled: bool,
    pub vocab: usize,
    pub style: StylePreset,
}

impl Corpus {
    pub fn new(seed: u64, count: usize, labeled: bool) -> Self {
        Corpus {
            seed,
            count,
            frames: (64, 192),
            feat_dim: 40,
            labeled,
            vocab: 8,
            style: StylePreset::Reading,
        }
    }

    pub fn small(seed: u64, count: usize, labeled: bool) -> Self {
        Corpus {
            frames: (48, 80),
            feat_dim: 8,
            vocab: 5,
            ..Corpus::new(seed, count, labeled)
        }
    }

    /// Writes the corpus under `dir` and returns its manifest.
    pub fn write(&self, dir: &Path) -> PathBuf {
        let mut cfg = StageConfig::default();
        cfg.seed = self.seed;
        cfg.out_dir = dir.to_path_buf();
        cfg.synth.count = self.count;
        cfg.synth.min_frames = self.frames.0;
        cfg.synth.max_frames = self.frames.1;
        cfg.synth.feat_dim = self.feat_dim;
        cfg.synth.labeled = self.labeled;
        cfg.synth.vocab_size = self.vocab;
        cfg.synth.style = self.style;
        cmd_synth(&cfg).expect("synth")
    }
}

/// CTC likelihood by enumerating every length-`t` path.
pub fn brute_force_ctc(logits: &Tensor, label: &[usize]) -> f64 {
    let (t, v) = (logits.shape()[0], logits.shape()[1]);
    let probs: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let row = logits.row(i);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            row.iter().map(|x| x.exp() / z).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    loop {
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != 0 {
                collapsed.push(k);
            }
            prev = Some(k);
        }
        if collapsed == label {
            total += path.iter().enumerate().map(|(i, &k)| probs[i][k]).product::<f64>();
        }
        let mut i = 0;
        loop {
            if i == t {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

/// Central differences of `f` w.r.t. every element of every parameter.
pub fn numeric_gradients(
    params: &ModelParams,
    f: &dyn Fn(&ModelParams) -> f64,
    h: f64,
) -> BTreeMap<String, Tensor> {
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    for name in names {
        let n = params.tensors[&name].numel();
        let mut g = Tensor::zeros(params.tensors[&name].shape());
        for j in 0..n {
            let orig = work.tensors[&name].data()[j];
            work.tensors.get_mut(&name).unwrap().data_mut()[j] = orig + h;
            let plus = f(&work);
            work.tensors.get_mut(&name).unwrap().data_mut()[j] = orig - h;
            let minus = f(&work);
            work.tensors.get_mut(&name).unwrap().data_mut()[j] = orig;
            g.data_mut()[j] = (plus - minus) / (2.0 * h);
        }
        out.insert(name, g);
    }
    out
}

/// `|a − n| / max(|a|, |n|, 1e-5)`, maximized over all entries.
pub fn max_rel_error(analytic: &BTreeMap<String, Tensor>, numeric: &BTreeMap<String, Tensor>) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, n) in numeric {
        let zero = Tensor::zeros(n.shape());
        let a = analytic.get(name).unwrap_or(&zero);
        for (x, y) in a.data().iter().zip(n.data()) {
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1e-5));
        }
    }
    worst
}

pub fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[{verdict}] criterion {id:>2}: {name} :: {detail}");
}
