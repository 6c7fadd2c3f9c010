use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    save_features, synth_labeled, FeatureSequence, Manifest, ManifestEntry, Normalizer,
};
use crate::model::{init_params, MaskKind, ModelConfig, ModelParams};
use crate::numerics::AdamState;
use crate::objectives::edit_distance;
use crate::pipeline::checkpoint::{file_digest, Checkpoint, CheckpointHeader};
use crate::pipeline::config::{Stage, StageConfig};
use crate::pipeline::metrics::MetricsWriter;
use crate::pipeline::mix_seed;
use crate::pipeline::train::{
    evaluate_dev, greedy_hypothesis, prepare, run_epochs, state_checkpoint, utterance_cer,
    DevReport, FinetuneObjective, Objective, Prepared, PretrainObjective, RunSpec, TrainState,
};

pub const FINAL_CHECKPOINT: &str = "final.mpcc";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.tsv";

const TRAIN_RNG_TAG: u64 = 0x7472_6169_6e;
const SYNTH_LEN_TAG: u64 = 0x6c65_6e67_7468;

/// Paths written by a training stage.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Splits a manifest into (train, dev) by utterance id: an entry is held
/// out when the FNV-1a hash of its id is divisible by 10.
pub fn dev_split(manifest: &Manifest) -> (Manifest, Manifest) {
    let (mut train, mut dev) = (Manifest::default(), Manifest::default());
    for e in &manifest.entries {
        let id = e
            .feature_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if fnv1a(&id) % 10 == 0 {
            dev.entries.push(e.clone());
        } else {
            train.entries.push(e.clone());
        }
    }
    (train, dev)
}

fn load_corpus(manifest: &Manifest, cfg: &ModelConfig) -> Result<Vec<FeatureSequence>> {
    let seqs = manifest.load_sequences()?;
    if let Some(s) = seqs.first() {
        if s.dim() != cfg.feat_dim {
            return Err(Error::Config(format!(
                "model.feat_dim = {} but the corpus has {} bins",
                cfg.feat_dim,
                s.dim()
            )));
        }
    }
    Ok(seqs)
}

/// Loads features without looking at transcripts.
fn unlabeled(manifest: &Manifest, cfg: &ModelConfig) -> Result<(Vec<FeatureSequence>, Normalizer)> {
    if manifest.is_empty() {
        return Err(Error::Config("training manifest is empty".into()));
    }
    let seqs = load_corpus(manifest, cfg)?;
    let norm = Normalizer::fit(&seqs)?;
    Ok((seqs, norm))
}

fn labeled(
    manifest: &Manifest,
    cfg: &ModelConfig,
    norm: &Normalizer,
) -> Result<Vec<Prepared>> {
    manifest.check_transcripts(cfg.vocab_size)?;
    let seqs = load_corpus(manifest, cfg)?;
    let tr: Vec<Option<Vec<usize>>> = manifest.entries.iter().map(|e| e.transcript.clone()).collect();
    prepare(&seqs, &tr, norm)
}

/// Labeled train and dev sets with the normalizer fitted on the train set.
fn labeled_sets(cfg: &StageConfig) -> Result<(Vec<Prepared>, Vec<Prepared>, Normalizer)> {
    let train_path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("data.train is required".into()))?;
    let full = Manifest::load(train_path)?;
    let (train_m, dev_m) = match &cfg.data.dev {
        Some(dev) => (full, Manifest::load(dev)?),
        None => dev_split(&full),
    };
    if train_m.is_empty() {
        return Err(Error::Config("no training utterances left after the dev split".into()));
    }
    let seqs = load_corpus(&train_m, &cfg.model)?;
    let norm = Normalizer::fit(&seqs)?;
    let train = labeled(&train_m, &cfg.model, &norm)?;
    let dev = labeled(&dev_m, &cfg.model, &norm)?;
    Ok((train, dev, norm))
}

fn fresh_state(cfg: &ModelConfig, seed: u64) -> Result<TrainState> {
    Ok(TrainState {
        params: init_params(cfg, seed)?,
        adam: AdamState::new(),
        rng: ChaCha8Rng::seed_from_u64(mix_seed(seed, TRAIN_RNG_TAG)),
        epoch: 0,
    })
}

fn resumed_state(ck: &Checkpoint) -> TrainState {
    TrainState {
        params: ck.params.clone(),
        adam: ck.adam.clone(),
        rng: ck.rng.clone(),
        epoch: ck.header.epoch,
    }
}

fn header(cfg: &StageConfig, stage: Stage, model: ModelConfig, parent: Option<String>) -> CheckpointHeader {
    let adam = AdamState::default();
    CheckpointHeader {
        config_digest: cfg.digest(),
        stage,
        parent_digest: parent,
        model,
        seed: cfg.seed,
        epoch: 0,
        step: 0,
        adam_beta1: adam.beta1,
        adam_beta2: adam.beta2,
        adam_eps: adam.eps,
    }
}

fn load_init(cfg: &StageConfig) -> Result<Option<(Checkpoint, String)>> {
    match &cfg.init {
        None => Ok(None),
        Some(p) => Ok(Some((Checkpoint::load(p)?, file_digest(p)?))),
    }
}

fn metrics_writer(path: &Path, resume: bool) -> Result<MetricsWriter> {
    if !resume && path.exists() {
        fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    MetricsWriter::append(path)
}

fn is_pretrained(name: &str) -> bool {
    name.starts_with("prenet.") || name.starts_with("encoder.")
}

fn is_self_supervised(name: &str) -> bool {
    is_pretrained(name) || name.starts_with("mpc_head.")
}

/// Writes `N` feature files and a manifest under `out_dir`. Every
/// utterance carries latent tokens; transcripts are only written for
/// labeled corpora.
pub fn cmd_synth(cfg: &StageConfig) -> Result<PathBuf> {
    cfg.validate(Stage::Synth)?;
    let s = &cfg.synth;
    create_dir(&cfg.out_dir)?;
    let mut len_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, SYNTH_LEN_TAG));
    let mut manifest = Manifest::default();
    for i in 0..s.count {
        let t = len_rng.gen_range(s.min_frames..=s.max_frames);
        let (seq, tokens) = synth_labeled(&s.style_for(cfg.seed, i), t, s.feat_dim, s.vocab_size)?;
        let path = cfg.out_dir.join(format!("{}-{i:05}.feat", s.prefix));
        save_features(&seq, &path)?;
        manifest.entries.push(ManifestEntry {
            feature_path: path,
            transcript: s.labeled.then_some(tokens),
        });
    }
    let path = cfg.out_dir.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(path)
}

fn pretrain_objective(cfg: &StageConfig, stage: Stage) -> PretrainObjective {
    PretrainObjective {
        apc_probability: if stage == Stage::Adapt {
            0.0
        } else {
            cfg.objective.apc_probability()
        },
        apc_step: cfg.objective.apc_step,
        masking: cfg.masking,
    }
}

fn self_supervised(
    cfg: &StageConfig,
    stage: Stage,
    model: ModelConfig,
    mut state: TrainState,
    end_epoch: u32,
    parent: Option<String>,
    resume: bool,
) -> Result<StageOutcome> {
    let manifest = Manifest::load(cfg.data.train.as_ref().expect("validated"))?;
    let (seqs, norm) = unlabeled(&manifest, &model)?;
    let none = vec![None; seqs.len()];
    let data = prepare(&seqs, &none, &norm)?;
    create_dir(&cfg.out_dir)?;
    let metrics = cfg.out_dir.join(METRICS_FILE);
    let mut writer = metrics_writer(&metrics, resume)?;
    let head = header(cfg, stage, model, parent);
    let spec = RunSpec {
        stage,
        cfg: &model,
        data: &data,
        objective: Objective::Pretrain(pretrain_objective(cfg, stage)),
        seed: cfg.seed,
        batch_size: cfg.train.batch_size,
        warmup: cfg.warmup(stage),
        weight_decay: cfg.weight_decay(stage),
        layerwise: false,
        trainable: &is_self_supervised,
        checkpoints: Some((&cfg.out_dir, head.clone())),
        normalizer: Some(&norm),
    };
    run_epochs(&spec, &mut state, end_epoch, Some(&mut writer))?;
    writer.flush()?;
    let final_checkpoint = cfg.out_dir.join(FINAL_CHECKPOINT);
    state_checkpoint(&state, &head, Some(&norm)).save(&final_checkpoint)?;
    Ok(StageOutcome {
        final_checkpoint,
        metrics,
    })
}

/// Self-supervised pre-training on an unlabeled manifest. An `init`
/// checkpoint from this stage resumes training where it stopped.
pub fn cmd_pretrain(cfg: &StageConfig) -> Result<StageOutcome> {
    cfg.validate(Stage::Pretrain)?;
    let (state, parent, resume) = match load_init(cfg)? {
        None => (fresh_state(&cfg.model, cfg.seed)?, None, false),
        Some((ck, _)) => {
            if ck.header.stage != Stage::Pretrain || ck.header.model != cfg.model {
                return Err(Error::Config(
                    "pretrain can only resume from a pretrain checkpoint of the same model".into(),
                ));
            }
            (resumed_state(&ck), ck.header.parent_digest.clone(), true)
        }
    };
    self_supervised(cfg, Stage::Pretrain, cfg.model, state, cfg.train.epochs, parent, resume)
}

/// Continues masked pre-training on target-task features for
/// `target_adapt_epochs` epochs, keeping optimizer state and counters.
pub fn cmd_adapt(cfg: &StageConfig) -> Result<StageOutcome> {
    cfg.validate(Stage::Adapt)?;
    let (ck, digest) = load_init(cfg)?.expect("validated");
    if !matches!(ck.header.stage, Stage::Pretrain | Stage::Adapt) {
        return Err(Error::Config(format!(
            "adapt needs a pretrain or adapt checkpoint, got {}",
            ck.header.stage
        )));
    }
    let state = resumed_state(&ck);
    let end = state.epoch + cfg.transfer.target_adapt_epochs;
    self_supervised(cfg, Stage::Adapt, ck.header.model, state, end, Some(digest), false)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Dev scores before the first update and after the last; absent when
    /// the dev set is empty.
    pub initial_dev: Option<DevReport>,
    pub final_dev: Option<DevReport>,
}

/// Parameters of a supervised model whose prenet and encoder (and, for
/// multi-task training, MPC head) come from `pretrained`.
fn transferred(
    model: &ModelConfig,
    seed: u64,
    pretrained: &ModelParams,
    keep_mpc_head: bool,
) -> Result<ModelParams> {
    let mut params = init_params(model, seed)?;
    params.copy_from(pretrained, |n| {
        is_pretrained(n) || (keep_mpc_head && n.starts_with("mpc_head."))
    })?;
    Ok(params)
}

/// Supervised training with the joint attention/CTC loss, optionally from
/// a pre-trained encoder.
pub fn cmd_finetune(cfg: &StageConfig) -> Result<FinetuneOutcome> {
    cfg.validate(Stage::Finetune)?;
    let model = cfg.model;
    let (train, dev, norm) = labeled_sets(cfg)?;
    let (mut state, parent, resume) = match load_init(cfg)? {
        None => (fresh_state(&model, cfg.seed)?, None, false),
        Some((ck, digest)) => match ck.header.stage {
            Stage::Finetune => {
                if ck.header.model != model {
                    return Err(Error::Config("resumed checkpoint has a different model".into()));
                }
                (resumed_state(&ck), ck.header.parent_digest.clone(), true)
            }
            Stage::Pretrain | Stage::Adapt => {
                let mut s = fresh_state(&model, cfg.seed)?;
                s.params = transferred(&model, cfg.seed, &ck.params, cfg.transfer.multitask_mpc)?;
                (s, Some(digest), false)
            }
            other => {
                return Err(Error::Config(format!(
                    "cannot fine-tune from a {other} checkpoint"
                )))
            }
        },
    };
    let smoothing = cfg.label_smoothing();
    let score = |params: &ModelParams| -> Result<Option<DevReport>> {
        if dev.is_empty() {
            return Ok(None);
        }
        evaluate_dev(params, &model, &dev, &cfg.transfer, smoothing, model.encoder_layers).map(Some)
    };
    let initial_dev = score(&state.params)?;

    create_dir(&cfg.out_dir)?;
    let metrics = cfg.out_dir.join(METRICS_FILE);
    let mut writer = metrics_writer(&metrics, resume)?;
    let head = header(cfg, Stage::Finetune, model, parent);
    let spec = RunSpec {
        stage: Stage::Finetune,
        cfg: &model,
        data: &train,
        objective: Objective::Finetune(FinetuneObjective {
            transfer: cfg.transfer,
            smoothing,
            masking: cfg.masking,
            num_layers: model.encoder_layers,
        }),
        seed: cfg.seed,
        batch_size: cfg.train.batch_size,
        warmup: cfg.warmup(Stage::Finetune),
        weight_decay: cfg.weight_decay(Stage::Finetune),
        layerwise: cfg.transfer.layerwise,
        trainable: &|_| true,
        checkpoints: Some((&cfg.out_dir, head.clone())),
        normalizer: Some(&norm),
    };
    run_epochs(&spec, &mut state, cfg.train.epochs, Some(&mut writer))?;
    writer.flush()?;
    let final_checkpoint = cfg.out_dir.join(FINAL_CHECKPOINT);
    state_checkpoint(&state, &head, Some(&norm)).save(&final_checkpoint)?;
    let outcome = FinetuneOutcome {
        final_checkpoint,
        metrics,
        initial_dev,
        final_dev: score(&state.params)?,
    };
    let summary = serde_json::to_vec_pretty(&outcome).map_err(|e| Error::Invalid(e.to_string()))?;
    write_file(&cfg.out_dir.join("finetune_summary.json"), &summary)?;
    Ok(outcome)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub layer: usize,
    pub dev_loss: f64,
    pub dev_cer: f64,
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    pub rows: Vec<ProbeRow>,
    /// The trained probe model of every depth, in layer order.
    pub models: Vec<ModelParams>,
    pub csv: PathBuf,
}

/// For every depth `l`, trains a fresh decoder and CTC head on top of the
/// frozen prenet and first `l` encoder layers of `init`, then scores the
/// dev set.
pub fn cmd_probe(cfg: &StageConfig) -> Result<ProbeOutcome> {
    cfg.validate(Stage::Probe)?;
    let model = cfg.model;
    let (ck, _) = load_init(cfg)?.expect("validated");
    if ck.header.model.encoder_layers != model.encoder_layers {
        return Err(Error::Config(format!(
            "init has {} encoder layers, model.encoder_layers = {}",
            ck.header.model.encoder_layers, model.encoder_layers
        )));
    }
    let (train, dev, _) = labeled_sets(cfg)?;
    if dev.is_empty() {
        return Err(Error::Config("probing needs a non-empty dev set".into()));
    }
    let smoothing = cfg.label_smoothing();
    let mut transfer = cfg.transfer;
    transfer.layerwise = false;
    transfer.multitask_mpc = false;
    let frozen = |n: &str| !is_pretrained(n);

    let mut rows = Vec::new();
    let mut models = Vec::new();
    for layer in 1..=model.encoder_layers {
        let mut state = fresh_state(&model, cfg.seed)?;
        state.params = transferred(&model, cfg.seed, &ck.params, false)?;
        let spec = RunSpec {
            stage: Stage::Probe,
            cfg: &model,
            data: &train,
            objective: Objective::Finetune(FinetuneObjective {
                transfer,
                smoothing,
                masking: cfg.masking,
                num_layers: layer,
            }),
            seed: cfg.seed,
            batch_size: cfg.train.batch_size,
            warmup: cfg.warmup(Stage::Probe),
            weight_decay: cfg.weight_decay(Stage::Probe),
            layerwise: false,
            trainable: &frozen,
            checkpoints: None,
            normalizer: None,
        };
        run_epochs(&spec, &mut state, cfg.probe.epochs, None)?;
        let r = evaluate_dev(&state.params, &model, &dev, &transfer, smoothing, layer)?;
        rows.push(ProbeRow {
            layer,
            dev_loss: r.loss,
            dev_cer: r.cer,
        });
        models.push(state.params);
    }

    create_dir(&cfg.out_dir)?;
    let csv = cfg.out_dir.join("probe.csv");
    let mut text = String::from("layer,dev_loss,dev_cer\n");
    for r in &rows {
        text.push_str(&format!("{},{},{}\n", r.layer, r.dev_loss, r.dev_cer));
    }
    write_file(&csv, text.as_bytes())?;
    Ok(ProbeOutcome { rows, models, csv })
}

/// Elementwise mean of parameter sets with identical names and shapes,
/// accumulated as a running mean in the given order.
pub fn average_params(sets: &[&ModelParams]) -> Result<ModelParams> {
    let (first, rest) = sets
        .split_first()
        .ok_or_else(|| Error::Invalid("nothing to average".into()))?;
    let mut out = (*first).clone();
    for (i, p) in rest.iter().enumerate() {
        let n = (i + 2) as f64;
        if p.tensors.len() != out.tensors.len() {
            return Err(Error::Config("checkpoints hold different parameter sets".into()));
        }
        for (name, acc) in out.tensors.iter_mut() {
            let t = p
                .tensors
                .get(name)
                .ok_or_else(|| Error::Config(format!("parameter {name} missing from a checkpoint")))?;
            if t.shape() != acc.shape() {
                return Err(Error::Config(format!("parameter {name} differs in shape")));
            }
            for (m, x) in acc.data_mut().iter_mut().zip(t.data()) {
                *m += (x - *m) / n;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct AverageOutcome {
    pub checkpoint: PathBuf,
    /// Dev scores of every input, in input order.
    pub scores: Vec<(PathBuf, DevReport)>,
    /// Inputs that were averaged, best first.
    pub selected: Vec<PathBuf>,
}

/// Scores every checkpoint on the dev set and averages the parameters of
/// the `k` with the lowest error rate (ties broken by dev loss, then
/// input order). The optimizer state of the result is reset.
pub fn cmd_average(cfg: &StageConfig) -> Result<AverageOutcome> {
    cfg.validate(Stage::Average)?;
    let mut cks = Vec::new();
    for p in &cfg.average.checkpoints {
        cks.push(Checkpoint::load(p)?);
    }
    let model = cks[0].header.model;
    if cks.iter().any(|c| c.header.model != model) {
        return Err(Error::Config("checkpoints to average have different model configs".into()));
    }
    let dev_manifest = match &cfg.data.dev {
        Some(p) => Manifest::load(p)?,
        None => {
            let full = Manifest::load(cfg.data.train.as_ref().expect("validated"))?;
            let (_, dev) = dev_split(&full);
            if dev.is_empty() {
                full
            } else {
                dev
            }
        }
    };
    dev_manifest.check_transcripts(model.vocab_size)?;
    let seqs = load_corpus(&dev_manifest, &model)?;
    let tr: Vec<_> = dev_manifest.entries.iter().map(|e| e.transcript.clone()).collect();
    let smoothing = cfg.label_smoothing();

    let mut scores = Vec::new();
    for (path, ck) in cfg.average.checkpoints.iter().zip(&cks) {
        let norm = match &ck.normalizer {
            Some(n) => n.clone(),
            None => Normalizer::fit(&seqs)?,
        };
        let dev = prepare(&seqs, &tr, &norm)?;
        let r = evaluate_dev(&ck.params, &model, &dev, &cfg.transfer, smoothing, model.encoder_layers)?;
        scores.push((path.clone(), r));
    }
    let mut order: Vec<usize> = (0..cks.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&scores[a].1, &scores[b].1);
        ra.cer
            .total_cmp(&rb.cer)
            .then(ra.loss.total_cmp(&rb.loss))
            .then(a.cmp(&b))
    });
    let chosen = &order[..cfg.average.k];
    let sets: Vec<&ModelParams> = chosen.iter().map(|&i| &cks[i].params).collect();
    let best = &cks[chosen[0]];
    let averaged = Checkpoint {
        header: CheckpointHeader {
            stage: Stage::Average,
            config_digest: cfg.digest(),
            parent_digest: Some(file_digest(&cfg.average.checkpoints[chosen[0]])?),
            ..best.header.clone()
        },
        params: average_params(&sets)?,
        adam: AdamState::new(),
        normalizer: best.normalizer.clone(),
        rng: best.rng.clone(),
    };
    create_dir(&cfg.out_dir)?;
    let checkpoint = cfg.out_dir.join(FINAL_CHECKPOINT);
    averaged.save(&checkpoint)?;
    Ok(AverageOutcome {
        checkpoint,
        scores,
        selected: chosen.iter().map(|&i| cfg.average.checkpoints[i].clone()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub utterance_id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub edits: usize,
    pub ref_len: usize,
    pub cer: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Total edits over total reference length.
    pub cer: f64,
    pub edits: usize,
    pub ref_len: usize,
    pub utterances: Vec<UtteranceResult>,
}

/// Greedy CTC decoding of every utterance of `data.test`.
pub fn cmd_eval(cfg: &StageConfig) -> Result<EvalReport> {
    cfg.validate(Stage::Eval)?;
    let (ck, _) = load_init(cfg)?.expect("validated");
    let model = ck.header.model;
    let manifest = Manifest::load(cfg.data.test.as_ref().expect("validated"))?;
    manifest.check_transcripts(model.vocab_size)?;
    let seqs = load_corpus(&manifest, &model)?;
    let norm = match &ck.normalizer {
        Some(n) => n.clone(),
        None => Normalizer::fit(&seqs)?,
    };
    let tr: Vec<_> = manifest.entries.iter().map(|e| e.transcript.clone()).collect();
    let data = prepare(&seqs, &tr, &norm)?;
    let kind: MaskKind = cfg.eval.attention;

    let mut utterances = Vec::with_capacity(data.len());
    let (mut edits, mut ref_len) = (0, 0);
    for item in &data {
        let reference = item.transcript.clone().unwrap_or_default();
        let hypothesis = greedy_hypothesis(&ck.params, &model, item, kind, model.encoder_layers)?;
        let e = edit_distance(&reference, &hypothesis);
        edits += e;
        ref_len += reference.len();
        utterances.push(UtteranceResult {
            utterance_id: item.utterance_id.clone(),
            cer: utterance_cer(&reference, &hypothesis),
            ref_len: reference.len(),
            edits: e,
            reference,
            hypothesis,
        });
    }
    let report = EvalReport {
        cer: if ref_len == 0 {
            0.0
        } else {
            edits as f64 / ref_len as f64
        },
        edits,
        ref_len,
        utterances,
    };

    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("eval.jsonl");
    let mut out = Vec::new();
    for u in &report.utterances {
        serde_json::to_writer(&mut out, u).map_err(|e| Error::Invalid(e.to_string()))?;
        out.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    write_file(&path, &out)?;
    let summary = serde_json::json!({
        "cer": report.cer,
        "edits": report.edits,
        "ref_len": report.ref_len,
        "utterances": report.utterances.len(),
    });
    write_file(
        &cfg.out_dir.join("eval_summary.json"),
        serde_json::to_string_pretty(&summary).unwrap().as_bytes(),
    )?;
    Ok(report)
}
