//! Run configuration: `key = value` text merged with command-line flags.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{Dims, ModelKind};
use crate::training::TrainConfig;

/// Name of the resolved config written next to every run's outputs.
pub const RESOLVED_NAME: &str = "resolved_config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub k: usize,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Jca,
            k: 8,
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            train_manifest: None,
            val_manifest: None,
            eval_manifest: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value {value:?} for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidArgument(format!("bad value {value:?} for key `{key}`"))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Every recognised key, in the order they are written out.
    pub const KEYS: &'static [&'static str] = &[
        "model",
        "target",
        "seq_len",
        "d_a",
        "d_v",
        "k",
        "head_hidden",
        "lr",
        "optimizer",
        "beta1",
        "beta2",
        "eps",
        "momentum",
        "weight_decay",
        "batch_size",
        "dropout",
        "max_epochs",
        "patience",
        "freeze_correlation",
        "seed",
        "train_sequences",
        "val_sequences",
        "test_sequences",
        "subseqs_per_sequence",
        "ar_coef",
        "noise_sigma",
        "mask_prob",
        "train_manifest",
        "val_manifest",
        "eval_manifest",
        "out_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "model" => self.model = v.parse()?,
            "target" => self.train.target = v.parse()?,
            "seq_len" => self.synth.seq_len = parse(key, v)?,
            "d_a" => self.synth.d_a = parse(key, v)?,
            "d_v" => self.synth.d_v = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "head_hidden" => {
                self.train.head_hidden = match v {
                    "" | "none" | "0" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "lr" => self.train.lr = parse(key, v)?,
            "optimizer" => self.train.optimizer = v.parse()?,
            "beta1" => self.train.beta1 = parse(key, v)?,
            "beta2" => self.train.beta2 = parse(key, v)?,
            "eps" => self.train.eps = parse(key, v)?,
            "momentum" => self.train.momentum = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "dropout" => self.train.dropout = parse(key, v)?,
            "max_epochs" => self.train.max_epochs = parse(key, v)?,
            "patience" => self.train.patience = parse(key, v)?,
            "freeze_correlation" => self.train.freeze_correlation = parse_bool(key, v)?,
            "seed" => {
                let s = parse(key, v)?;
                self.train.seed = s;
                self.synth.seed = s;
            }
            "train_sequences" => self.synth.train_sequences = parse(key, v)?,
            "val_sequences" => self.synth.val_sequences = parse(key, v)?,
            "test_sequences" => self.synth.test_sequences = parse(key, v)?,
            "subseqs_per_sequence" => self.synth.subseqs_per_sequence = parse(key, v)?,
            "ar_coef" => self.synth.ar_coef = parse(key, v)?,
            "noise_sigma" => self.synth.noise_sigma = parse(key, v)?,
            "mask_prob" => self.synth.mask_prob = parse(key, v)?,
            "train_manifest" => self.train_manifest = opt_path(v),
            "val_manifest" => self.val_manifest = opt_path(v),
            "eval_manifest" => self.eval_manifest = opt_path(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(Error::InvalidArgument(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let s = &self.synth;
        Some(match key {
            "model" => self.model.to_string(),
            "target" => t.target.to_string(),
            "seq_len" => s.seq_len.to_string(),
            "d_a" => s.d_a.to_string(),
            "d_v" => s.d_v.to_string(),
            "k" => self.k.to_string(),
            "head_hidden" => t.head_hidden.map_or("none".into(), |h| h.to_string()),
            "lr" => t.lr.to_string(),
            "optimizer" => t.optimizer.to_string(),
            "beta1" => t.beta1.to_string(),
            "beta2" => t.beta2.to_string(),
            "eps" => t.eps.to_string(),
            "momentum" => t.momentum.to_string(),
            "weight_decay" => t.weight_decay.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "dropout" => t.dropout.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "patience" => t.patience.to_string(),
            "freeze_correlation" => t.freeze_correlation.to_string(),
            "seed" => t.seed.to_string(),
            "train_sequences" => s.train_sequences.to_string(),
            "val_sequences" => s.val_sequences.to_string(),
            "test_sequences" => s.test_sequences.to_string(),
            "subseqs_per_sequence" => s.subseqs_per_sequence.to_string(),
            "ar_coef" => s.ar_coef.to_string(),
            "noise_sigma" => s.noise_sigma.to_string(),
            "mask_prob" => s.mask_prob.to_string(),
            "train_manifest" => show_path(&self.train_manifest),
            "val_manifest" => show_path(&self.val_manifest),
            "eval_manifest" => show_path(&self.eval_manifest),
            "out_dir" => self.out_dir.display().to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, path: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text, path)?;
        Ok(c)
    }

    /// Every key with its resolved value, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in Self::KEYS {
            writeln!(s, "{k} = {}", self.get(k).unwrap_or_default()).ok();
        }
        s
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn dims(&self) -> Result<Dims> {
        Dims::new(self.synth.seq_len, self.synth.d_a, self.synth.d_v, self.k)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.dims()?;
        Ok(())
    }
}
