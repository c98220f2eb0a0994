use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{ChunkConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::model::{EncoderMode, ModelConfig};
use crate::objectives::{LossWeights, DEFAULT_LABEL_SMOOTHING};

use super::toy::ToyTaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Stage1,
    Stage2,
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" | "1" => Ok(Stage::Stage1),
            "stage2" | "2" => Ok(Stage::Stage2),
            _ => Err(Error::Config(format!("unknown stage '{s}', expected stage1 or stage2"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecAugmentConfig {
    pub enabled: bool,
    pub time_masks: usize,
    /// Maximum time-mask width `T`, in raw frames.
    pub time_width: usize,
    pub freq_masks: usize,
    /// Maximum frequency-mask width `F`.
    pub freq_width: usize,
}

impl Default for SpecAugmentConfig {
    fn default() -> Self {
        SpecAugmentConfig { enabled: false, time_masks: 2, time_width: 4, freq_masks: 2, freq_width: 2 }
    }
}

/// Where training and held-out utterances come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Toy { spec: ToyTaskSpec, train: usize, dev: usize, seed: u64 },
    Files { train: PathBuf, dev: PathBuf },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub model: ModelConfig,
    pub encoder: EncoderKind,
    pub chunk: ChunkConfig,
    pub weights: LossWeights,
    pub learning_rate: f64,
    /// Multiplicative step-size decay applied once per epoch after `decay_start` epochs.
    pub decay: f64,
    pub decay_start: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub clip_norm: f64,
    /// Early-stop after this many held-out evaluations without improvement.
    pub patience: usize,
    pub label_smoothing: f64,
    pub spec_augment: SpecAugmentConfig,
    pub seed: u64,
    pub seed_checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub data: DataSource,
}

impl TrainConfig {
    pub fn preset(stage: Stage) -> Self {
        let model = ModelConfig::default();
        let toy = ToyTaskSpec::default();
        // Stage 2 starts from a converged stage-1 model and needs far fewer epochs.
        let (encoder, chunk, weights, epochs) = match stage {
            Stage::Stage1 => (EncoderKind::Blstm, ChunkConfig::OFFLINE, LossWeights::STAGE1, 50),
            Stage::Stage2 => (EncoderKind::LcBlstm, ChunkConfig { n_c: Some(8), n_r: 4 }, LossWeights::STAGE2, 15),
        };
        TrainConfig {
            stage,
            model: ModelConfig { vocab: toy.vocab, feat_dim: toy.feat_dim, ..model },
            encoder,
            chunk,
            weights,
            learning_rate: 3e-3,
            decay: 0.9,
            decay_start: 25,
            epochs,
            batch_size: 8,
            dropout: 0.0,
            clip_norm: 5.0,
            patience: 5,
            label_smoothing: DEFAULT_LABEL_SMOOTHING,
            spec_augment: SpecAugmentConfig::default(),
            seed: 1,
            seed_checkpoint: None,
            output_dir: None,
            data: DataSource::Toy { spec: toy, train: 800, dev: 100, seed: 1000 },
        }
    }

    pub fn encoder_mode(&self) -> EncoderMode {
        EncoderMode { kind: self.encoder, chunk: self.chunk }
    }

    /// Every key accepted by [`TrainConfig::set`].
    pub const KEYS: &'static [&'static str] = &[
        "stage", "encoder", "n_c", "n_r", "lambda_ctc", "lambda_qua", "lambda_sync", "chunk_width",
        "energy_offset", "learning_rate", "decay", "decay_start", "epochs", "batch_size", "dropout",
        "clip_norm", "patience", "label_smoothing", "spec_augment", "time_masks", "time_width",
        "freq_masks", "freq_width", "seed", "seed_checkpoint", "output_dir", "subsample", "enc_hidden",
        "enc_layers", "dec_hidden", "emb_dim", "attn_dim", "vocab", "feat_dim", "train_data", "dev_data",
        "toy_min_duration", "toy_max_duration", "toy_min_tokens", "toy_max_tokens", "toy_noise",
        "toy_template_seed", "toy_train", "toy_dev", "toy_seed",
    ];

    /// Parses `key = value` lines. `stage` is applied first so that its preset
    /// can be refined by the remaining keys regardless of their order.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: i + 1, reason: format!("expected key = value, got '{line}'") })?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let stage = match pairs.iter().rev().find(|(_, k, _)| k == "stage") {
            Some((_, _, v)) => v.parse()?,
            None => Stage::Stage1,
        };
        let mut cfg = TrainConfig::preset(stage);
        for (line, k, v) in pairs.iter().filter(|(_, k, _)| k != "stage") {
            cfg.set(k, v).map_err(|e| Error::Parse { line: *line, reason: e.to_string() })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
        if k.trim() == "stage" {
            return Err(Error::Config("stage cannot be overridden; set it in the config file".into()));
        }
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "on" | "1" | "yes" => Ok(true),
                "false" | "off" | "0" | "no" => Ok(false),
                _ => Err(Error::Config(format!("invalid boolean '{v}' for {key}"))),
            }
        }
        #[allow(clippy::type_complexity)]
        fn toy<'a>(cfg: &'a mut TrainConfig, key: &str) -> Result<(&'a mut ToyTaskSpec, &'a mut usize, &'a mut usize, &'a mut u64)> {
            match &mut cfg.data {
                DataSource::Toy { spec, train, dev, seed } => Ok((spec, train, dev, seed)),
                DataSource::Files { .. } => Err(Error::Config(format!("{key} conflicts with train_data/dev_data"))),
            }
        }
        let m = &mut self.model;
        match key {
            "stage" => {
                let stage: Stage = value.parse()?;
                if stage != self.stage {
                    return Err(Error::Config("stage must be chosen before other keys".into()));
                }
            }
            "encoder" => self.encoder = value.parse()?,
            "n_c" => {
                self.chunk.n_c = match value {
                    "none" | "full" => None,
                    v => Some(num(key, v)?),
                }
            }
            "n_r" => self.chunk.n_r = num(key, value)?,
            "lambda_ctc" => self.weights.lambda_ctc = num(key, value)?,
            "lambda_qua" => self.weights.lambda_qua = num(key, value)?,
            "lambda_sync" => self.weights.lambda_sync = num(key, value)?,
            "chunk_width" => m.chunk_width = num(key, value)?,
            "energy_offset" => m.energy_offset = num(key, value)?,
            "subsample" => m.subsample = num(key, value)?,
            "enc_hidden" => m.enc_hidden = num(key, value)?,
            "enc_layers" => m.enc_layers = num(key, value)?,
            "dec_hidden" => m.dec_hidden = num(key, value)?,
            "emb_dim" => m.emb_dim = num(key, value)?,
            "attn_dim" => m.attn_dim = num(key, value)?,
            "vocab" => {
                m.vocab = num(key, value)?;
                if let DataSource::Toy { spec, .. } = &mut self.data {
                    spec.vocab = m.vocab;
                }
            }
            "feat_dim" => {
                m.feat_dim = num(key, value)?;
                if let DataSource::Toy { spec, .. } = &mut self.data {
                    spec.feat_dim = m.feat_dim;
                }
            }
            "learning_rate" => self.learning_rate = num(key, value)?,
            "decay" => self.decay = num(key, value)?,
            "decay_start" => self.decay_start = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "label_smoothing" => self.label_smoothing = num(key, value)?,
            "spec_augment" => self.spec_augment.enabled = flag(key, value)?,
            "time_masks" => self.spec_augment.time_masks = num(key, value)?,
            "time_width" => self.spec_augment.time_width = num(key, value)?,
            "freq_masks" => self.spec_augment.freq_masks = num(key, value)?,
            "freq_width" => self.spec_augment.freq_width = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "seed_checkpoint" => self.seed_checkpoint = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            "train_data" | "dev_data" => {
                let path = PathBuf::from(value);
                match &mut self.data {
                    DataSource::Files { train, dev } => {
                        if key == "train_data" {
                            *train = path;
                        } else {
                            *dev = path;
                        }
                    }
                    DataSource::Toy { .. } => {
                        let (train, dev) = if key == "train_data" { (path, PathBuf::new()) } else { (PathBuf::new(), path) };
                        self.data = DataSource::Files { train, dev };
                    }
                }
            }
            "toy_min_duration" => toy(self, key)?.0.min_duration = num(key, value)?,
            "toy_max_duration" => toy(self, key)?.0.max_duration = num(key, value)?,
            "toy_min_tokens" => toy(self, key)?.0.min_tokens = num(key, value)?,
            "toy_max_tokens" => toy(self, key)?.0.max_tokens = num(key, value)?,
            "toy_noise" => toy(self, key)?.0.noise = num(key, value)?,
            "toy_template_seed" => toy(self, key)?.0.template_seed = num(key, value)?,
            "toy_train" => *toy(self, key)?.1 = num(key, value)?,
            "toy_dev" => *toy(self, key)?.2 = num(key, value)?,
            "toy_seed" => *toy(self, key)?.3 = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        if let Some(0) = self.chunk.n_c {
            return Err(Error::Config("n_c must be at least 1".into()));
        }
        if self.spec_augment.enabled && self.stage == Stage::Stage1 {
            return Err(Error::Config("SpecAugment is only applied in stage2".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("learning_rate must be positive and decay in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("dropout and label_smoothing must lie in [0, 1)".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.spec_augment.freq_width > self.model.feat_dim {
            return Err(Error::Config(format!(
                "freq_width {} exceeds feat_dim {}",
                self.spec_augment.freq_width, self.model.feat_dim
            )));
        }
        match &self.data {
            DataSource::Toy { spec, .. } => {
                spec.validate()?;
                if spec.vocab != self.model.vocab || spec.feat_dim != self.model.feat_dim {
                    return Err(Error::Config("toy task vocab/feat_dim must match the model".into()));
                }
            }
            DataSource::Files { train, dev } => {
                if train.as_os_str().is_empty() || dev.as_os_str().is_empty() {
                    return Err(Error::Config("train_data and dev_data must both be set".into()));
                }
            }
        }
        Ok(())
    }

    /// Checks that this configuration can start training.
    pub fn require_seed_checkpoint(&self, supplied: bool) -> Result<()> {
        if self.stage == Stage::Stage2 && !supplied {
            return Err(Error::Config("stage2 requires a stage1 checkpoint (seed_checkpoint)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_presets() {
        let s1 = TrainConfig::preset(Stage::Stage1);
        assert_eq!(s1.weights, LossWeights::STAGE1);
        assert_eq!(s1.encoder, EncoderKind::Blstm);
        let s2 = TrainConfig::parse("stage = stage2\n").unwrap();
        assert_eq!(s2.weights, LossWeights::STAGE2);
        assert_eq!(s2.encoder, EncoderKind::LcBlstm);
        assert!(s2.require_seed_checkpoint(false).is_err());
        assert!(s1.require_seed_checkpoint(false).is_ok());
    }

    #[test]
    fn parse_order_independent_and_overrides_win() {
        let a = TrainConfig::parse("lambda_sync = 0.5\nstage = stage2\n# comment\n").unwrap();
        let b = TrainConfig::parse("stage=stage2\nlambda_sync=0.5").unwrap();
        assert_eq!(a, b);
        let mut c = a.clone();
        c.apply_override("lambda_sync=0.25").unwrap();
        assert_eq!(c.weights.lambda_sync, 0.25);
        assert!(c.apply_override("no_such_key=1").is_err());
        assert!(c.apply_override("novalue").is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let e = TrainConfig::parse("epochs = 3\nfrobnicate = 1\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(TrainConfig::parse("epochs = many").is_err());
        assert!(TrainConfig::parse("spec_augment = on").is_err(), "stage1 must refuse masking");
        assert!(TrainConfig::parse("stage = stage2\nspec_augment = on").is_ok());
        assert!(TrainConfig::parse("n_c = 0").is_err());
        assert!(TrainConfig::parse("train_data = a.json").is_err(), "dev_data missing");
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let samples = [("stage", "stage1"), ("encoder", "lstm"), ("n_c", "4"), ("spec_augment", "off"), ("seed_checkpoint", "x"), ("output_dir", "y")];
        for key in TrainConfig::KEYS {
            let mut cfg = TrainConfig::preset(Stage::Stage1);
            let value = samples.iter().find(|(k, _)| k == key).map(|(_, v)| *v).unwrap_or("3");
            cfg.set(key, value).unwrap_or_else(|e| panic!("{key}: {e}"));
        }
    }
}
