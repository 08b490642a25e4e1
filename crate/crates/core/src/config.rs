//! Layered run configuration: built-in defaults, then a TOML file, then
//! `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::audio::{MixConfig, DEFAULT_TARGET_LEN};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::features::{FeatureSource, FeaturizerConfig, FrameArithmetic};
use crate::masking::MaskParams;
use crate::params::hex;
use crate::probe::ProbeConfig;
use crate::quantizer::QuantizerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Samples per item after trimming/padding.
    pub target_len: usize,
    /// Corpus manifest; empty means the built-in synthetic corpus.
    pub manifest: String,
    /// Synthetic corpus size when no manifest is given.
    pub synthetic_count: usize,
    /// Duration range in seconds of synthetic utterances.
    pub synthetic_seconds: [f64; 2],
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            target_len: DEFAULT_TARGET_LEN,
            manifest: String::new(),
            synthetic_count: 100,
            synthetic_seconds: [10.0, 16.0],
            synthetic_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub mix: MixConfig,
    pub featurizer: FeaturizerConfig,
    pub quantizer: QuantizerConfig,
    pub masking: MaskParams,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        self.featurizer.validate()?;
        self.quantizer.validate()?;
        self.masking.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        if self.featurizer.out_frames(self.data.target_len).is_none() {
            return Err(Error::config(
                "data.target_len",
                format!(
                    "{} samples is shorter than the featurizer's {}-sample receptive field",
                    self.data.target_len,
                    self.featurizer.min_samples()
                ),
            ));
        }
        let feat_dim = self.featurizer.out_dim();
        if self.encoder.input_dim != feat_dim {
            return Err(Error::config(
                "encoder.input_dim",
                format!(
                    "{} does not match the {:?} featurizer's output dimension {feat_dim}",
                    self.encoder.input_dim, self.featurizer.kind
                ),
            ));
        }
        if self.encoder.vocab != self.quantizer.vocab {
            return Err(Error::config(
                "encoder.vocab",
                format!("{} does not match quantizer.vocab {}", self.encoder.vocab, self.quantizer.vocab),
            ));
        }
        if self.train.batch_size < 2 && self.mix.utterance_mix_prob > 0.0 {
            return Err(Error::config(
                "train.batch_size",
                "utterance mixing needs at least two items per batch",
            ));
        }
        Ok(())
    }

    /// Canonical TOML form of the resolved config.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Short SHA-256 digest of [`RunConfig::echo`].
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.echo().as_bytes()))[..16].to_string()
    }

    pub fn from_echo(echo: &str) -> Result<Self> {
        let table: Table = toml::from_str(echo).map_err(|e| Error::config("<echo>", e.to_string()))?;
        resolve(table)
    }

    /// Small model and corpus for quick runs on one CPU core.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.data.target_len = 16_000;
        cfg.data.synthetic_count = 48;
        cfg.data.synthetic_seconds = [0.8, 1.4];
        cfg.featurizer.conv.channels = vec![32; 7];
        cfg.quantizer.vocab = 64;
        cfg.masking.mask_prob = 0.05;
        cfg.masking.mask_time = 0.1;
        cfg.masking.stride_time = 0.02;
        cfg.encoder = EncoderConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn_dim: 256,
            input_dim: 32,
            vocab: 64,
            rel_pos_buckets: 32,
            max_rel_distance: 64,
            dropout: 0.0,
        };
        cfg.train.batch_size = 4;
        cfg.train.warmup_steps = 100;
        cfg.train.total_steps = 2000;
        cfg.train.checkpoint_every = 500;
        cfg.train.log_every = 50;
        cfg
    }

    pub fn uses_conv(&self) -> bool {
        self.featurizer.kind == FeatureSource::Conv
    }
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Writes `value` over `base[key]`, rejecting keys absent from `base` and
/// values whose TOML type differs (integers may stand in for floats).
fn merge_value(base: &mut Value, value: Value, key: &str) -> Result<()> {
    match (base, value) {
        (Value::Table(bt), Value::Table(vt)) => {
            for (k, v) in vt {
                let path = if key.is_empty() { k.clone() } else { format!("{key}.{k}") };
                let slot = bt.get_mut(&k).ok_or_else(|| Error::config(&path, "unknown key"))?;
                merge_value(slot, v, &path)?;
            }
            Ok(())
        }
        (slot @ Value::Float(_), Value::Integer(i)) => {
            *slot = Value::Float(i as f64);
            Ok(())
        }
        (slot, v) if std::mem::discriminant(slot) == std::mem::discriminant(&v) => {
            *slot = v;
            Ok(())
        }
        (slot, v) => Err(Error::config(
            key,
            format!("expected {}, found {}", kind(slot), kind(&v)),
        )),
    }
}

fn resolve(file: Table) -> Result<RunConfig> {
    let mut base = Value::try_from(RunConfig::default()).expect("defaults serialize");
    merge_value(&mut base, Value::Table(file), "")?;
    finish(base)
}

fn finish(value: Value) -> Result<RunConfig> {
    let cfg: RunConfig = serde_path_to_error::deserialize(value)
        .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
    let key = key.trim().to_string();
    let raw = raw.trim();
    let value = toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    Ok((key, value))
}

fn nest(key: &str, value: Value) -> Table {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().unwrap_or_default();
    let mut t = Table::new();
    t.insert(last.to_string(), value);
    for p in parts.into_iter().rev() {
        let mut outer = Table::new();
        outer.insert(p.to_string(), Value::Table(t));
        t = outer;
    }
    t
}

/// Resolves defaults <- `file_text` <- `overrides`.
pub fn resolve_config(base: RunConfig, file_text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut value = Value::try_from(base).expect("config serializes");
    if let Some(text) = file_text {
        let file: Table = toml::from_str(text).map_err(|e| Error::config("<file>", e.message().to_string()))?;
        merge_value(&mut value, Value::Table(file), "")?;
    }
    for spec in overrides {
        let (key, v) = parse_override(spec)?;
        merge_value(&mut value, Value::Table(nest(&key, v)), "")?;
    }
    finish(value)
}

/// Reads `path` (if any) over the built-in defaults and applies overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = path.map(std::fs::read_to_string).transpose()?;
    resolve_config(RunConfig::default(), text.as_deref(), overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = resolve_config(RunConfig::default(), Some(""), &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.masking.mask_prob, 0.01);
        assert_eq!(cfg.masking.mask_time, 0.4);
        assert_eq!(cfg.masking.stride_time, 0.01);
        assert_eq!(cfg.quantizer.vocab, 8192);
        assert_eq!(cfg.quantizer.code_dim, 16);
        assert_eq!(cfg.encoder.layers, 12);
        assert_eq!(cfg.encoder.hidden, 768);
        assert_eq!(cfg.encoder.heads, 8);
        assert_eq!(cfg.train.peak_lr, 5e-4);
        assert_eq!(cfg.train.warmup_steps, 32_000);
        assert_eq!(cfg.train.total_steps, 400_000);
        assert_eq!(cfg.train.batch_size, 25);
        assert_eq!(cfg.mix.utterance_mix_prob, 0.2);
        assert_eq!(cfg.mix.noise_mix_prob, 0.0);
        assert_eq!(cfg.data.target_len, 224_000);
    }

    #[test]
    fn override_changes_only_that_key() {
        let cfg = resolve_config(RunConfig::default(), None, &["train.total_steps=40000".into()]).unwrap();
        assert!(cfg.echo().contains("total_steps = 40000"));
        let mut expected = RunConfig::default();
        expected.train.total_steps = 40_000;
        assert_eq!(cfg, expected);
    }

    #[test]
    fn total_below_warmup_rejected() {
        let err = resolve_config(RunConfig::default(), None, &["train.total_steps=100".into()]).unwrap_err();
        assert!(err.to_string().contains("train.warmup_steps"), "{err}");
        let cfg = resolve_config(
            RunConfig::default(),
            None,
            &["train.total_steps=100".into(), "train.warmup_steps=10".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.total_steps, 100);
    }

    #[test]
    fn invariant_violation_names_key() {
        let err = resolve_config(RunConfig::default(), Some("[masking]\nmask_time = 0\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("masking.mask_time"), "{err}");
    }

    #[test]
    fn unknown_and_mistyped_keys_rejected() {
        let err = resolve_config(RunConfig::default(), Some("[train]\nlearning_rate = 1.0\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("train.learning_rate"), "{err}");
        let err = resolve_config(RunConfig::default(), Some("[encoder]\nlayers = \"twelve\"\n"), &[]).unwrap_err();
        assert!(err.to_string().contains("encoder.layers"), "{err}");
        let err = resolve_config(RunConfig::default(), None, &["bogus=1".into()]).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn integers_accepted_for_floats() {
        let cfg = resolve_config(RunConfig::default(), Some("[train]\npeak_lr = 1\n"), &[]).unwrap();
        assert_eq!(cfg.train.peak_lr, 1.0);
    }

    #[test]
    fn echo_round_trips() {
        for cfg in [RunConfig::default(), RunConfig::desk()] {
            let back = RunConfig::from_echo(&cfg.echo()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        assert_ne!(RunConfig::default().hash(), RunConfig::desk().hash());
    }

    #[test]
    fn cross_section_consistency() {
        let err = resolve_config(RunConfig::default(), None, &["quantizer.vocab=64".into()]).unwrap_err();
        assert!(err.to_string().contains("encoder.vocab"), "{err}");
        let err = resolve_config(RunConfig::default(), None, &["featurizer.kind=\"logmel\"".into()]).unwrap_err();
        assert!(err.to_string().contains("encoder.input_dim"), "{err}");
        resolve_config(
            RunConfig::default(),
            None,
            &["featurizer.kind=logmel".into(), "encoder.input_dim=80".into()],
        )
        .unwrap();
    }
}
