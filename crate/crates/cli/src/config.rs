//! Experiment configuration: one TOML file with a section per stage, plus
//! dotted `key=value` overrides applied on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use streamdec::corpus::CorpusConfig;
use streamdec::eval::Variant;
use streamdec::model::ModelConfig;
use streamdec::streamdecode::DecodeConfig;
use streamdec::train::TrainConfig;
use streamdec::VocabSpec;

use crate::error::CliError;

/// Model dimensions; the vocabulary comes from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub dropout_p: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let m = ModelConfig::desk(VocabSpec::new(2, 2).expect("smallest vocab"));
        Self {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_positions: m.max_positions,
            dropout_p: m.dropout_p,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab: VocabSpec) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab,
            max_positions: self.max_positions,
            dropout_p: self.dropout_p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Substitution rate of the ablation corpus; defaults to `corpus.p_sub`.
    pub p_sub: Option<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { seeds: vec![1], variants: Variant::ALL.to_vec(), p_sub: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Inputs {
    /// Corpus directory read by train, decode, eval and masks.
    pub corpus: Option<PathBuf>,
    /// Checkpoint manifest read by decode and eval.
    pub checkpoint: Option<PathBuf>,
    /// Utterance id for `masks dump`.
    pub utt: Option<String>,
    /// Mask variant for `masks dump`; defaults to the layout's training mask.
    pub variant: Option<String>,
    /// Which split decode and eval read.
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelShape,
    pub train: TrainConfig,
    /// Decoder for decode/eval; training evaluates with the same settings.
    pub decode: DecodeConfig,
    pub ablation: AblationSection,
    pub inputs: Inputs,
}

impl ExperimentConfig {
    /// Reads a TOML config, or the `resolved_config` of a run manifest.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingInput(path.to_path_buf()))?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let resolved = v.get("resolved_config").cloned().unwrap_or(v);
            return serde_json::from_value(resolved).map_err(|e| CliError::Config(format!("{}: {e}", path.display())));
        }
        toml::from_str(&text).map_err(|e: toml::de::Error| {
            let line = e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1);
            CliError::Config(format!("{}:{line}: {}", path.display(), e.message().trim_end()))
        })
    }

    /// Applies `section.key=value` overrides; values are TOML literals, and
    /// anything that does not parse as one is taken as a string.
    pub fn apply_overrides(&self, overrides: &[String]) -> Result<Self, CliError> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| CliError::Config(e.to_string()))?;
        for item in overrides {
            let (key, raw) =
                item.split_once('=').ok_or_else(|| CliError::Config(format!("override `{item}` is not key=value")))?;
            let value = parse_literal(raw);
            set_path(&mut root, key, value).map_err(|e| CliError::Config(format!("override `{item}`: {e}")))?;
        }
        root.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.corpus.validate()?;
        self.train.augment.validate()?;
        self.decode.validate()?;
        self.model.with_vocab(self.corpus.vocab).validate()?;
        Ok(())
    }

    /// Training config with the experiment's decoder attached.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.decode = self.decode.clone();
        t.decode.mode = t.layout;
        t
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<(), String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or("empty key")?;
    let mut node = root;
    for p in parts {
        let table = node.as_table_mut().ok_or_else(|| format!("`{p}` is not a section"))?;
        node = table.entry(p).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node.as_table_mut().ok_or_else(|| format!("parent of `{last}` is not a section"))?;
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        let text = toml::to_string(&c).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn overrides_reach_nested_fields() {
        let c = ExperimentConfig::default()
            .apply_overrides(&[
                "train.learning_rate=0.01".into(),
                "corpus.n_train=10".into(),
                "decode.delta=3".into(),
                "train.layout=tti".into(),
            ])
            .unwrap();
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.corpus.n_train, 10);
        assert_eq!(c.decode.delta, 3);
        assert_eq!(c.train.layout, streamdec::seqlayout::LayoutKind::Tti);
    }

    #[test]
    fn unknown_override_keys_are_rejected() {
        let err = ExperimentConfig::default().apply_overrides(&["train.no_such_knob=1".into()]);
        assert!(matches!(err, Err(CliError::Config(_))));
        assert!(ExperimentConfig::default().apply_overrides(&["novalue".into()]).is_err());
    }
}
