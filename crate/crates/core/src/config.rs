//! Run configuration: typed defaults overridable from a flat JSON object
//! whose keys are namespaced by module (`kge.layers`, `ner.heads`,
//! `fusion.k1`, ...). Unknown keys and wrong types are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::fusion::FusionConfig;
use crate::kge::KgeConfig;
use crate::ner::NerConfig;
use crate::tags::Scheme;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Tag scheme of input corpora; converted to BIOES internally.
    pub scheme: String,
    /// Character n-gram sizes for the candidate index.
    pub ngram_sizes: Vec<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            scheme: "bio".to_string(),
            ngram_sizes: crate::kg::DEFAULT_NGRAM_SIZES.to_vec(),
        }
    }
}

impl DataConfig {
    pub fn scheme(&self) -> Result<Scheme> {
        Scheme::parse(&self.scheme)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Config {
    pub kge: KgeConfig,
    pub ner: NerConfig,
    pub features: FeatureConfig,
    pub fusion: FusionConfig,
    pub data: DataConfig,
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::config(format!("{key}: expected a non-negative integer")))
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::config(format!("{key}: expected a number")))
}

fn as_str(key: &str, v: &Value) -> Result<String> {
    v.as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::config(format!("{key}: expected a string")))
}

fn as_usize_list(key: &str, v: &Value) -> Result<Vec<usize>> {
    v.as_array()
        .and_then(|xs| xs.iter().map(|x| x.as_u64().map(|u| u as usize)).collect())
        .ok_or_else(|| Error::config(format!("{key}: expected an array of integers")))
}

fn as_str_list(key: &str, v: &Value) -> Result<Vec<String>> {
    v.as_array()
        .and_then(|xs| {
            xs.iter()
                .map(|x| x.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
        })
        .ok_or_else(|| Error::config(format!("{key}: expected an array of strings")))
}

impl Config {
    /// Apply flat dotted-key overrides to the defaults.
    pub fn apply(&mut self, overrides: &Map<String, Value>) -> Result<()> {
        for (key, v) in overrides {
            match key.as_str() {
                "kge.layers" => self.kge.layers = as_usize(key, v)?,
                "kge.heads" => self.kge.heads = as_usize(key, v)?,
                "kge.head_dim" => self.kge.head_dim = as_usize(key, v)?,
                "kge.word_dim" => self.kge.word_dim = as_usize(key, v)?,
                "kge.char_dim" => self.kge.char_dim = as_usize(key, v)?,
                "kge.char_emb_dim" => self.kge.char_emb_dim = as_usize(key, v)?,
                "kge.attn_dropout" => self.kge.attn_dropout = as_f64(key, v)?,
                "kge.fc_dropout" => self.kge.fc_dropout = as_f64(key, v)?,
                "kge.learning_rate" => self.kge.learning_rate = as_f64(key, v)?,
                "kge.epochs" => self.kge.epochs = as_usize(key, v)?,

                "ner.layers" => self.ner.layers = as_usize(key, v)?,
                "ner.heads" => self.ner.heads = as_usize(key, v)?,
                "ner.head_dim" => self.ner.head_dim = as_usize(key, v)?,
                "ner.fc_dropout" => self.ner.fc_dropout = as_f64(key, v)?,
                "ner.attn_dropout" => self.ner.attn_dropout = as_f64(key, v)?,
                "ner.learning_rate" => self.ner.learning_rate = as_f64(key, v)?,
                "ner.momentum" => self.ner.momentum = as_f64(key, v)?,
                "ner.epochs" => self.ner.epochs = as_usize(key, v)?,
                "ner.batch_size" => self.ner.batch_size = as_usize(key, v)?,
                "ner.clip_norm" => self.ner.clip_norm = as_f64(key, v)?,

                "features.levels" => {
                    let names = as_str_list(key, v)?;
                    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
                    self.features.levels = crate::features::LevelSet::from_names(&refs)?;
                }
                "features.word_dim" => self.features.word_dim = as_usize(key, v)?,
                "features.intnet_layers" => self.features.intnet.depth = as_usize(key, v)?,
                "features.intnet_kernels" => {
                    self.features.intnet.kernel_sizes = as_usize_list(key, v)?
                }
                "features.intnet_char_dim" => {
                    self.features.intnet.char_emb_dim = as_usize(key, v)?
                }
                "features.intnet_hidden" => self.features.intnet.hidden = as_usize(key, v)?,
                "features.context_dim" => self.features.context_dim = as_usize(key, v)?,
                "features.context_heads" => self.features.context_heads = as_usize(key, v)?,
                "features.context_layers" => self.features.context_layers = as_usize(key, v)?,
                "features.label_attn_dim" => self.features.label_attn_dim = as_usize(key, v)?,
                "features.label_attn_kernel" => {
                    self.features.label_attn_kernel = as_usize(key, v)?
                }

                "fusion.k1" => self.fusion.k1 = as_usize(key, v)?,
                "fusion.k2" => self.fusion.k2 = as_usize(key, v)?,

                "data.scheme" => {
                    let s = as_str(key, v)?;
                    Scheme::parse(&s)?;
                    self.data.scheme = s;
                }
                "data.ngram_sizes" => self.data.ngram_sizes = as_usize_list(key, v)?,

                other => {
                    return Err(Error::config(format!("unknown config key {other:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn from_overrides(overrides: &Map<String, Value>) -> Result<Config> {
        let mut c = Config::default();
        c.apply(overrides)?;
        Ok(c)
    }

    pub fn from_json_str(text: &str) -> Result<Config> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
        let map = value
            .as_object()
            .ok_or_else(|| Error::config("config root must be a JSON object"))?;
        Config::from_overrides(map)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Config> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Config::from_json_str(&text)
    }

    /// Flat dotted-key view of every setting, used in checkpoint manifests.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut m = Map::new();
        let mut put = |k: &str, v: Value| {
            m.insert(k.to_string(), v);
        };
        put("kge.layers", self.kge.layers.into());
        put("kge.heads", self.kge.heads.into());
        put("kge.head_dim", self.kge.head_dim.into());
        put("kge.word_dim", self.kge.word_dim.into());
        put("kge.char_dim", self.kge.char_dim.into());
        put("kge.char_emb_dim", self.kge.char_emb_dim.into());
        put("kge.attn_dropout", self.kge.attn_dropout.into());
        put("kge.fc_dropout", self.kge.fc_dropout.into());
        put("kge.learning_rate", self.kge.learning_rate.into());
        put("kge.epochs", self.kge.epochs.into());
        put("ner.layers", self.ner.layers.into());
        put("ner.heads", self.ner.heads.into());
        put("ner.head_dim", self.ner.head_dim.into());
        put("ner.fc_dropout", self.ner.fc_dropout.into());
        put("ner.attn_dropout", self.ner.attn_dropout.into());
        put("ner.learning_rate", self.ner.learning_rate.into());
        put("ner.momentum", self.ner.momentum.into());
        put("ner.epochs", self.ner.epochs.into());
        put("ner.batch_size", self.ner.batch_size.into());
        put("ner.clip_norm", self.ner.clip_norm.into());
        put(
            "features.levels",
            Value::Array(
                self.features
                    .levels
                    .names()
                    .into_iter()
                    .map(|n| Value::String(n.to_string()))
                    .collect(),
            ),
        );
        put("features.word_dim", self.features.word_dim.into());
        put("features.intnet_layers", self.features.intnet.depth.into());
        put(
            "features.intnet_kernels",
            Value::Array(
                self.features
                    .intnet
                    .kernel_sizes
                    .iter()
                    .map(|&k| Value::from(k))
                    .collect(),
            ),
        );
        put(
            "features.intnet_char_dim",
            self.features.intnet.char_emb_dim.into(),
        );
        put("features.intnet_hidden", self.features.intnet.hidden.into());
        put("features.context_dim", self.features.context_dim.into());
        put("features.context_heads", self.features.context_heads.into());
        put("features.context_layers", self.features.context_layers.into());
        put("features.label_attn_dim", self.features.label_attn_dim.into());
        put(
            "features.label_attn_kernel",
            self.features.label_attn_kernel.into(),
        );
        put("fusion.k1", self.fusion.k1.into());
        put("fusion.k2", self.fusion.k2.into());
        put("data.scheme", Value::String(self.data.scheme.clone()));
        put(
            "data.ngram_sizes",
            Value::Array(self.data.ngram_sizes.iter().map(|&n| Value::from(n)).collect()),
        );
        m
    }

    /// A configuration sized for toy corpora and tests.
    pub fn toy() -> Config {
        let mut c = Config {
            kge: KgeConfig::toy(),
            ner: NerConfig::toy(),
            ..Config::default()
        };
        c.features.word_dim = 24;
        c.features.intnet = crate::features::IntNetConfig {
            depth: 2,
            kernel_sizes: vec![3, 5],
            char_emb_dim: 12,
            hidden: 12,
        };
        c.features.context_dim = 24;
        c.features.context_heads = 2;
        c.features.context_layers = 1;
        c.features.label_attn_dim = 16;
        c.features.label_attn_kernel = 1;
        c.fusion = FusionConfig { k1: 2, k2: 2 };
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_flat_map() {
        let c = Config::default();
        let flat = c.to_flat();
        let again = Config::from_overrides(&flat).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn overrides_apply() {
        let c = Config::from_json_str(r#"{"kge.layers": 3, "fusion.k1": 7, "ner.heads": 2}"#)
            .unwrap();
        assert_eq!(c.kge.layers, 3);
        assert_eq!(c.fusion.k1, 7);
        assert_eq!(c.ner.heads, 2);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = Config::from_json_str(r#"{"kge.depth": 3}"#).unwrap_err();
        assert!(err.to_string().contains("kge.depth"), "{err}");
    }

    #[test]
    fn wrong_type_is_an_error() {
        assert!(Config::from_json_str(r#"{"kge.layers": "two"}"#).is_err());
    }

    #[test]
    fn levels_parse() {
        let c = Config::from_json_str(r#"{"features.levels": ["word", "char"]}"#).unwrap();
        assert_eq!(c.features.levels.names(), vec!["word", "char"]);
    }
}
