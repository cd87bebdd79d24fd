//! The flat `key=value` run configuration.

use std::fs;
use std::path::{Path, PathBuf};

use crnn::data::MelConfig;
use crnn::io::{model_config_from_kv, model_config_to_kv};
use crnn::kv::{KvFile, KvWriter};
use crnn::model::ModelConfig;
use crnn::training::{AdamConfig, TrainConfig, DEFAULT_FD_STEP};
use crnn::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_manifest: Option<PathBuf>,
    pub valid_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Per-group mean/std normalization of every split.
    pub normalize: bool,
    /// Duplicate minority-class training examples up to the majority count.
    pub balance: bool,
    pub mel: MelConfig,
    pub gradcheck_seeds: u64,
    pub gradcheck_step: f64,
    /// Probe at most this many coordinates per tensor (all when unset).
    pub gradcheck_max_coords: Option<usize>,
}

impl RunConfig {
    /// Parses and validates `text`. Relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = KvFile::parse(text)?;
        let model = model_config_from_kv(&mut kv)?;
        let defaults = TrainConfig::default();
        let adam = AdamConfig {
            lr: kv.take_or("lr", defaults.adam.lr)?,
            beta1: kv.take_or("beta1", defaults.adam.beta1)?,
            beta2: kv.take_or("beta2", defaults.adam.beta2)?,
            epsilon: kv.take_or("epsilon", defaults.adam.epsilon)?,
        };
        let train = TrainConfig {
            batch_size: kv.take_or("batch", defaults.batch_size)?,
            max_epochs: kv.take_or("max_epochs", defaults.max_epochs)?,
            patience: kv.take_or("patience", defaults.patience)?,
            seed: kv.take_or("seed", defaults.seed)?,
            adam,
        };
        train.validate()?;
        let mut path = |key: &str| -> Result<Option<PathBuf>> {
            Ok(kv.take::<PathBuf>(key)?.map(|p| base.join(p)))
        };
        let train_manifest = path("train_manifest")?;
        let valid_manifest = path("valid_manifest")?;
        let test_manifest = path("test_manifest")?;
        let out_dir = path("out_dir")?.unwrap_or_else(|| base.join("out"));
        let mel_defaults = MelConfig::default();
        let mel = MelConfig {
            window_ms: kv.take_or("mel_window_ms", mel_defaults.window_ms)?,
            hop_ms: kv.take_or("mel_hop_ms", mel_defaults.hop_ms)?,
            filters: kv.take_or("mel_filters", mel_defaults.filters)?,
            ..mel_defaults
        };
        mel.validate()?;
        let cfg = Self {
            model,
            train,
            train_manifest,
            valid_manifest,
            test_manifest,
            out_dir,
            normalize: kv.take_or("normalize", true)?,
            balance: kv.take_or("balance", true)?,
            mel,
            gradcheck_seeds: kv.take_or("gradcheck_seeds", 3)?,
            gradcheck_step: kv.take_or("gradcheck_step", DEFAULT_FD_STEP)?,
            gradcheck_max_coords: kv.take("gradcheck_max_coords")?,
        };
        if !(cfg.gradcheck_step > 0.0) || cfg.gradcheck_seeds == 0 {
            return Err(Error::Config(
                "gradcheck_step must be > 0 and gradcheck_seeds >= 1".into(),
            ));
        }
        kv.finish()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Canonical text with every key, defaults included.
    pub fn to_text(&self) -> String {
        let mut w = KvWriter::new();
        w.comment("model");
        model_config_to_kv(&self.model, &mut w);
        w.comment("optimizer and training");
        w.set("lr", self.train.adam.lr)
            .set("beta1", self.train.adam.beta1)
            .set("beta2", self.train.adam.beta2)
            .set("epsilon", self.train.adam.epsilon)
            .set("batch", self.train.batch_size)
            .set("max_epochs", self.train.max_epochs)
            .set("patience", self.train.patience)
            .set("seed", self.train.seed)
            .set("normalize", self.normalize)
            .set("balance", self.balance);
        w.comment("data");
        for (key, p) in [
            ("train_manifest", &self.train_manifest),
            ("valid_manifest", &self.valid_manifest),
            ("test_manifest", &self.test_manifest),
        ] {
            if let Some(p) = p {
                w.set(key, p.display());
            }
        }
        w.set("out_dir", self.out_dir.display())
            .set("mel_window_ms", self.mel.window_ms)
            .set("mel_hop_ms", self.mel.hop_ms)
            .set("mel_filters", self.mel.filters);
        w.comment("gradient check");
        w.set("gradcheck_seeds", self.gradcheck_seeds)
            .set("gradcheck_step", self.gradcheck_step);
        if let Some(n) = self.gradcheck_max_coords {
            w.set("gradcheck_max_coords", n);
        }
        w.finish()
    }
}
