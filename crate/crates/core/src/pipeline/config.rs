//! Stage configuration, read from TOML. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{SynthStyle, DEFAULT_FEAT_DIM};
use crate::masking::{DEFAULT_CHUNK_SIZE, DEFAULT_MASK_PROB};
use crate::model::{MaskKind, ModelConfig};
use crate::objectives::{LossWeights, DEFAULT_APC_STEP, DEFAULT_LABEL_SMOOTHING};
use crate::schedules::{LayerwiseConfig, MpcWeightSchedule, WarmupConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Synth,
    Pretrain,
    Adapt,
    Finetune,
    Probe,
    Average,
    Eval,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Pretrain => "pretrain",
            Stage::Adapt => "adapt",
            Stage::Finetune => "finetune",
            Stage::Probe => "probe",
            Stage::Average => "average",
            Stage::Eval => "eval",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training manifest (unlabeled for pretrain/adapt, labeled otherwise).
    pub train: Option<PathBuf>,
    /// Labeled dev manifest; when absent, a hash-selected tenth of the
    /// training manifest is held out.
    pub dev: Option<PathBuf>,
    /// Labeled manifest scored by `eval`.
    pub test: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Mpc,
    Apc,
    Unified,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// APC probability of the unified objective.
    pub p: f64,
    pub apc_step: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::Mpc,
            p: 0.5,
            apc_step: DEFAULT_APC_STEP,
        }
    }
}

impl ObjectiveConfig {
    /// Probability of the APC branch actually used for branch draws.
    pub fn apc_probability(&self) -> f64 {
        match self.kind {
            ObjectiveKind::Mpc => 0.0,
            ObjectiveKind::Apc => 1.0,
            ObjectiveKind::Unified => self.p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub chunk_size: usize,
    pub p: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            chunk_size: DEFAULT_CHUNK_SIZE,
            p: DEFAULT_MASK_PROB,
        }
    }
}

/// Warmup schedule overrides; missing values take the stage defaults.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub k: Option<f64>,
    pub warmup_n: Option<u64>,
    pub dmodel_exponent: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    /// Defaults to 0 for pre-training and 1e-5 for fine-tuning.
    pub weight_decay: Option<f64>,
    pub label_smoothing: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub target_adapt_epochs: u32,
    pub layerwise: bool,
    pub lambda: f64,
    pub theta: f64,
    pub multitask_mpc: bool,
    pub gamma0: f64,
    pub halve_every: u32,
    pub alpha_attn: f64,
    pub beta_ctc: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        let lw = LayerwiseConfig::default();
        let mw = MpcWeightSchedule::default();
        TransferConfig {
            target_adapt_epochs: 0,
            layerwise: false,
            lambda: lw.lambda,
            theta: lw.theta,
            multitask_mpc: false,
            gamma0: mw.gamma0,
            halve_every: mw.halve_every,
            alpha_attn: 0.7,
            beta_ctc: 0.3,
        }
    }
}

impl TransferConfig {
    pub fn layerwise_config(&self) -> LayerwiseConfig {
        LayerwiseConfig {
            lambda: self.lambda,
            theta: self.theta,
        }
    }

    pub fn mpc_schedule(&self) -> MpcWeightSchedule {
        MpcWeightSchedule {
            gamma0: self.gamma0,
            halve_every: self.halve_every,
        }
    }

    /// Joint-loss weights at `epoch`; the MPC weight is zero unless
    /// multi-task training is on.
    pub fn weights(&self, epoch: u32) -> LossWeights {
        LossWeights {
            alpha_attn: self.alpha_attn,
            beta_ctc: self.beta_ctc,
            gamma_mpc: if self.multitask_mpc {
                crate::schedules::gamma_mpc(&self.mpc_schedule(), epoch)
            } else {
                0.0
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StylePreset {
    Reading,
    Spontaneous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub feat_dim: usize,
    pub style: StylePreset,
    /// Overrides of the preset's style statistics.
    pub smoothness: Option<f64>,
    pub pause_rate: Option<f64>,
    pub pitch_drift: Option<f64>,
    /// Whether the manifest carries transcripts.
    pub labeled: bool,
    pub vocab_size: usize,
    /// File-name prefix of the generated utterances.
    pub prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 200,
            min_frames: 64,
            max_frames: 192,
            feat_dim: DEFAULT_FEAT_DIM,
            style: StylePreset::Reading,
            smoothness: None,
            pause_rate: None,
            pitch_drift: None,
            labeled: false,
            vocab_size: ModelConfig::default().vocab_size,
            prefix: "utt".into(),
        }
    }
}

impl SynthConfig {
    /// Style of utterance `index` under the corpus seed.
    pub fn style_for(&self, seed: u64, index: usize) -> SynthStyle {
        let utt_seed = super::mix_seed(seed, index as u64);
        let mut s = match self.style {
            StylePreset::Reading => SynthStyle::reading(utt_seed),
            StylePreset::Spontaneous => SynthStyle::spontaneous(utt_seed),
        };
        if let Some(v) = self.smoothness {
            s.smoothness = v;
        }
        if let Some(v) = self.pause_rate {
            s.pause_rate = v;
        }
        if let Some(v) = self.pitch_drift {
            s.pitch_drift = v;
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: u32,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { epochs: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AverageConfig {
    pub checkpoints: Vec<PathBuf>,
    pub k: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub attention: MaskKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            attention: MaskKind::Full,
        }
    }
}

/// Everything one stage needs. The stage itself comes from the command
/// line; sections irrelevant to it are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Initial checkpoint (resume, transfer or the model to score).
    pub init: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub objective: ObjectiveConfig,
    pub masking: MaskingConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub transfer: TransferConfig,
    pub synth: SynthConfig,
    pub probe: ProbeConfig,
    pub average: AverageConfig,
    pub eval: EvalConfig,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            init: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            objective: ObjectiveConfig::default(),
            masking: MaskingConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig {
                epochs: 1,
                batch_size: 8,
                weight_decay: None,
                label_smoothing: None,
            },
            transfer: TransferConfig::default(),
            synth: SynthConfig::default(),
            probe: ProbeConfig::default(),
            average: AverageConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn require_file(field: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
    let p = path
        .as_ref()
        .ok_or_else(|| config_err(format!("{field} is required for this stage")))?;
    if !p.is_file() {
        return Err(config_err(format!("{field}: {} does not exist", p.display())));
    }
    Ok(p.clone())
}

fn check_optional_file(field: &str, path: &Option<PathBuf>) -> Result<()> {
    match path {
        Some(_) => require_file(field, path).map(|_| ()),
        None => Ok(()),
    }
}

impl StageConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// Hex SHA-256 of the configuration without the output directory and
    /// the init path. Identical runs written to different places share a
    /// digest; where a run started from is recorded as a parent digest.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.init = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        let hash = Sha256::digest(&json);
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The warmup schedule of `stage` with overrides applied.
    pub fn warmup(&self, stage: Stage) -> WarmupConfig {
        let mut w = match stage {
            Stage::Pretrain | Stage::Adapt => WarmupConfig::pretrain(self.model.d_model),
            _ => WarmupConfig::finetune(self.model.d_model),
        };
        if let Some(k) = self.schedule.k {
            w.k = k;
        }
        if let Some(n) = self.schedule.warmup_n {
            w.warmup_n = n;
        }
        if let Some(e) = self.schedule.dmodel_exponent {
            w.dmodel_exponent = e;
        }
        w
    }

    pub fn weight_decay(&self, stage: Stage) -> f64 {
        self.train.weight_decay.unwrap_or(match stage {
            Stage::Pretrain | Stage::Adapt => 0.0,
            _ => 1e-5,
        })
    }

    pub fn label_smoothing(&self) -> f64 {
        self.train.label_smoothing.unwrap_or(DEFAULT_LABEL_SMOOTHING)
    }

    /// Checks the fields `stage` uses, including that referenced files
    /// exist.
    pub fn validate(&self, stage: Stage) -> Result<()> {
        if stage == Stage::Synth {
            let s = &self.synth;
            if s.count == 0 {
                return Err(config_err("synth.count must be at least 1"));
            }
            if s.min_frames == 0 || s.min_frames > s.max_frames {
                return Err(config_err("synth frame range must satisfy 1 <= min_frames <= max_frames"));
            }
            if s.feat_dim == 0 {
                return Err(config_err("synth.feat_dim must be at least 1"));
            }
            if s.vocab_size < 3 {
                return Err(config_err("synth.vocab_size must be at least 3"));
            }
            if s.prefix.is_empty() || s.prefix.contains(['/', '\\']) {
                return Err(config_err("synth.prefix must be a plain file-name prefix"));
            }
            return s
                .style_for(self.seed, 0)
                .validate()
                .map_err(|e| config_err(e.to_string()));
        }

        self.model.validate()?;
        match stage {
            Stage::Pretrain | Stage::Adapt | Stage::Finetune => {
                require_file("data.train", &self.data.train)?;
                check_optional_file("data.dev", &self.data.dev)?;
                if self.train.batch_size == 0 {
                    return Err(config_err("train.batch_size must be at least 1"));
                }
                self.warmup(stage).validate()?;
                let wd = self.weight_decay(stage);
                if !(wd >= 0.0) || !wd.is_finite() {
                    return Err(config_err(format!("weight decay must be >= 0, got {wd}")));
                }
                if !(0.0..=1.0).contains(&self.masking.p) || self.masking.chunk_size == 0 {
                    return Err(config_err("masking needs chunk_size >= 1 and p in [0, 1]"));
                }
            }
            _ => {}
        }
        match stage {
            Stage::Pretrain | Stage::Adapt => {
                if self.transfer.layerwise || self.transfer.multitask_mpc {
                    return Err(config_err(
                        "layerwise and multitask_mpc apply to labeled fine-tuning only",
                    ));
                }
                if !(0.0..=1.0).contains(&self.objective.p) {
                    return Err(config_err("objective.p must lie in [0, 1]"));
                }
                if self.objective.apc_step == 0 {
                    return Err(config_err("objective.apc_step must be at least 1"));
                }
                if stage == Stage::Adapt {
                    require_file("init", &self.init)?;
                }
            }
            Stage::Finetune | Stage::Probe => {
                if stage == Stage::Probe {
                    require_file("data.train", &self.data.train)?;
                    check_optional_file("data.dev", &self.data.dev)?;
                    require_file("init", &self.init)?;
                    if self.train.batch_size == 0 {
                        return Err(config_err("train.batch_size must be at least 1"));
                    }
                    self.warmup(stage).validate()?;
                } else {
                    check_optional_file("init", &self.init)?;
                }
                let ls = self.label_smoothing();
                if !(0.0..1.0).contains(&ls) {
                    return Err(config_err(format!("label smoothing must lie in [0, 1), got {ls}")));
                }
                self.transfer.weights(0).validate().map_err(|e| config_err(e.to_string()))?;
                if self.transfer.layerwise {
                    self.transfer.layerwise_config().validate()?;
                }
                if self.transfer.multitask_mpc {
                    self.transfer.mpc_schedule().validate()?;
                    if self.init.is_none() {
                        return Err(config_err(
                            "multitask_mpc needs an init checkpoint with a trained MPC head",
                        ));
                    }
                }
            }
            Stage::Average => {
                if self.average.k == 0 {
                    return Err(config_err("average.k must be at least 1"));
                }
                if self.average.checkpoints.len() < self.average.k {
                    return Err(config_err(format!(
                        "average.k = {} but only {} checkpoints listed",
                        self.average.k,
                        self.average.checkpoints.len()
                    )));
                }
                for p in &self.average.checkpoints {
                    require_file("average.checkpoints", &Some(p.clone()))?;
                }
                if self.data.dev.is_none() && self.data.train.is_none() {
                    return Err(config_err("average needs data.dev or data.train for scoring"));
                }
                check_optional_file("data.dev", &self.data.dev)?;
                check_optional_file("data.train", &self.data.train)?;
            }
            Stage::Eval => {
                require_file("data.test", &self.data.test)?;
                require_file("init", &self.init)?;
            }
            Stage::Synth => unreachable!(),
        }
        Ok(())
    }
}
