//! Checkpoint persistence.
//!
//! Layout: 4-byte magic `KGN1`, u32-LE manifest length, JSON manifest, then
//! one contiguous blob of row-major 32-bit little-endian floats holding
//! every array in manifest order. The manifest records tool and format
//! versions, the flat configuration, the seed, vocabularies and each
//! array's name, shape and section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::kge::KgeModel;
use crate::ner::NerModel;
use crate::tensor::{Optimizer, ParamSet, Tensor};
use crate::vocab::{CharVocab, WordVocab};

const MAGIC: &[u8; 4] = b"KGN1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// "param" (trainable), "kge" (frozen sub-model) or "opt" (optimizer).
    pub section: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct KgeMeta {
    pub entities: WordVocab,
    pub relations: WordVocab,
    pub entity_chars: CharVocab,
    pub relation_chars: CharVocab,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct NerMeta {
    pub types: Vec<String>,
    pub word_vocab: WordVocab,
    pub char_vocab: CharVocab,
    pub word_dim: usize,
    pub context_dim: usize,
    pub fallback_context: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub tool_version: String,
    /// "kge" or "ner".
    pub kind: String,
    pub seed: u64,
    pub config: Map<String, Value>,
    pub arrays: Vec<ArrayInfo>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kge: Option<KgeMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ner: Option<NerMeta>,
}

fn optimizer_arrays(opt: Option<&Optimizer>, params: &ParamSet) -> Vec<(String, Vec<f64>)> {
    opt.map(|o| o.state_arrays(params)).unwrap_or_default()
}

fn write_file(
    path: &Path,
    manifest: &Manifest,
    arrays: &[(String, Vec<usize>, &[f64])],
) -> Result<()> {
    let mut file = std::fs::File::create(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let manifest_bytes = serde_json::to_vec(manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
    file.write_all(MAGIC)?;
    file.write_all(&(manifest_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&manifest_bytes)?;
    let mut blob = Vec::new();
    for (_, _, data) in arrays {
        for &v in *data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    file.write_all(&blob)?;
    Ok(())
}

fn read_file(path: &Path) -> Result<(Manifest, Vec<Tensor>)> {
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes)?;
    let mut manifest_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut manifest_bytes)?;
    let mut manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            manifest.format
        )));
    }
    if let Some(kge) = manifest.kge.as_mut() {
        kge.entities.reindex();
        kge.relations.reindex();
        kge.entity_chars.reindex();
        kge.relation_chars.reindex();
    }
    if let Some(ner) = manifest.ner.as_mut() {
        ner.word_vocab.reindex();
        ner.char_vocab.reindex();
    }

    let total: usize = manifest.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
    let mut blob = vec![0u8; 4 * total];
    file.read_exact(&mut blob)
        .map_err(|e| Error::Checkpoint(format!("blob shorter than manifest promises: {e}")))?;
    let mut rest = Vec::new();
    file.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!(
            "blob longer than manifest promises ({} extra bytes)",
            rest.len()
        )));
    }

    let mut tensors = Vec::with_capacity(manifest.arrays.len());
    let mut offset = 0usize;
    for info in &manifest.arrays {
        let numel: usize = info.shape.iter().product();
        let data: Vec<f64> = blob[4 * offset..4 * (offset + numel)]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        offset += numel;
        tensors.push(Tensor::new(info.shape.to_vec(), data)?);
    }
    Ok((manifest, tensors))
}

/// Save a trained graph-embedding model.
pub fn save_kge(
    path: impl AsRef<Path>,
    model: &KgeModel,
    config: &Config,
    seed: u64,
    optimizer: Option<&Optimizer>,
) -> Result<()> {
    let opt_arrays = optimizer_arrays(optimizer, &model.params);
    let mut arrays: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    let mut infos = Vec::new();
    for (name, t) in model.params.iter() {
        infos.push(ArrayInfo {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            section: "param".to_string(),
        });
        arrays.push((name.to_string(), t.shape().to_vec(), t.data()));
    }
    for (name, data) in &opt_arrays {
        infos.push(ArrayInfo {
            name: name.clone(),
            shape: vec![data.len()],
            section: "opt".to_string(),
        });
        arrays.push((name.clone(), vec![data.len()], data));
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        kind: "kge".to_string(),
        seed,
        config: config.to_flat(),
        arrays: infos,
        kge: Some(KgeMeta {
            entities: model.entities.clone(),
            relations: model.relations.clone(),
            entity_chars: model.entity_chars.clone(),
            relation_chars: model.relation_chars.clone(),
        }),
        ner: None,
    };
    write_file(path.as_ref(), &manifest, &arrays)
}

pub fn load_kge(path: impl AsRef<Path>) -> Result<(KgeModel, Manifest)> {
    let (manifest, tensors) = read_file(path.as_ref())?;
    if manifest.kind != "kge" {
        return Err(Error::Checkpoint(format!(
            "expected a kge checkpoint, found kind {:?}",
            manifest.kind
        )));
    }
    let meta = manifest
        .kge
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("kge checkpoint lacks vocabularies".into()))?;
    let config = Config::from_overrides(&manifest.config)?;
    let mut params = ParamSet::new();
    for (info, tensor) in manifest.arrays.iter().zip(tensors) {
        if info.section == "param" {
            params.insert(info.name.clone(), tensor);
        }
    }
    let model = KgeModel::from_parts(
        config.kge.clone(),
        meta.entities.clone(),
        meta.relations.clone(),
        meta.entity_chars.clone(),
        meta.relation_chars.clone(),
        params,
    )?;
    Ok((model, manifest))
}

/// Save a trained sequence model, embedding its frozen graph-embedding
/// sub-model when present.
pub fn save_ner(
    path: impl AsRef<Path>,
    model: &NerModel,
    config: &Config,
    seed: u64,
    optimizer: Option<&Optimizer>,
) -> Result<()> {
    let opt_arrays = optimizer_arrays(optimizer, &model.params);
    let mut arrays: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    let mut infos = Vec::new();
    for (name, t) in model.params.iter() {
        infos.push(ArrayInfo {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            section: "param".to_string(),
        });
        arrays.push((name.to_string(), t.shape().to_vec(), t.data()));
    }
    if let Some(kge) = &model.kge {
        for (name, t) in kge.params.iter() {
            infos.push(ArrayInfo {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                section: "kge".to_string(),
            });
            arrays.push((name.to_string(), t.shape().to_vec(), t.data()));
        }
    }
    for (name, data) in &opt_arrays {
        infos.push(ArrayInfo {
            name: name.clone(),
            shape: vec![data.len()],
            section: "opt".to_string(),
        });
        arrays.push((name.clone(), vec![data.len()], data));
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        kind: "ner".to_string(),
        seed,
        config: config.to_flat(),
        arrays: infos,
        kge: model.kge.as_ref().map(|k| KgeMeta {
            entities: k.entities.clone(),
            relations: k.relations.clone(),
            entity_chars: k.entity_chars.clone(),
            relation_chars: k.relation_chars.clone(),
        }),
        ner: Some(NerMeta {
            types: model.crf.tags.types().to_vec(),
            word_vocab: model.word_vocab.clone(),
            char_vocab: model.char_vocab.clone(),
            word_dim: model.word_dim(),
            context_dim: model.context_dim(),
            fallback_context: model.uses_fallback_context(),
        }),
    };
    write_file(path.as_ref(), &manifest, &arrays)
}

pub fn load_ner(path: impl AsRef<Path>) -> Result<(NerModel, Manifest)> {
    let (manifest, tensors) = read_file(path.as_ref())?;
    if manifest.kind != "ner" {
        return Err(Error::Checkpoint(format!(
            "expected a ner checkpoint, found kind {:?}",
            manifest.kind
        )));
    }
    let meta = manifest
        .ner
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("ner checkpoint lacks metadata".into()))?;
    let config = Config::from_overrides(&manifest.config)?;

    let mut params = ParamSet::new();
    let mut kge_params = ParamSet::new();
    for (info, tensor) in manifest.arrays.iter().zip(tensors) {
        match info.section.as_str() {
            "param" => params.insert(info.name.clone(), tensor),
            "kge" => kge_params.insert(info.name.clone(), tensor),
            _ => {}
        }
    }
    let kge = match (&manifest.kge, kge_params.is_empty()) {
        (Some(meta), false) => Some(KgeModel::from_parts(
            config.kge.clone(),
            meta.entities.clone(),
            meta.relations.clone(),
            meta.entity_chars.clone(),
            meta.relation_chars.clone(),
            kge_params,
        )?),
        _ => None,
    };

    let mut model = NerModel::construct(
        &config,
        &meta.types,
        meta.word_vocab.clone(),
        meta.char_vocab.clone(),
        meta.word_dim,
        meta.context_dim,
        meta.fallback_context,
        None,
        kge,
        manifest.seed,
    )?;
    model.replace_params(params)?;
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::parse_triples;
    use crate::kge::KgeConfig;

    fn tiny_kge() -> (KgeModel, Config) {
        let store = parse_triples(
            std::io::Cursor::new("Ana\tknows\tBo\nBo\tknows\tCy\n"),
            "t",
        )
        .unwrap();
        let mut config = Config::default();
        config.kge = KgeConfig::toy();
        config.kge.layers = 1;
        let model = KgeModel::new(&store, config.kge.clone(), 3).unwrap();
        (model, config)
    }

    #[test]
    fn kge_round_trip_within_f32_quantization() {
        let (model, config) = tiny_kge();
        let path = std::env::temp_dir().join("kgner_ckpt_unit.ckpt");
        save_kge(&path, &model, &config, 3, None).unwrap();
        let (loaded, manifest) = load_kge(&path).unwrap();
        assert_eq!(manifest.kind, "kge");
        assert_eq!(loaded.params.len(), model.params.len());
        for (name, t) in model.params.iter() {
            let l = loaded.params.get(name).unwrap();
            assert_eq!(l.shape(), t.shape(), "{name}");
            for (a, b) in t.data().iter().zip(l.data()) {
                assert!((a - b).abs() <= a.abs().max(1.0) * 1e-6, "{name}: {a} vs {b}");
            }
        }
        // encodings agree to f32 precision
        let before = model.encode_candidate("Ana", "knows").unwrap();
        let after = loaded.encode_candidate("Ana", "knows").unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-5);
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let path = std::env::temp_dir().join("kgner_ckpt_badmagic.ckpt");
        std::fs::write(&path, b"NOPE----").unwrap();
        let err = load_kge(&path).unwrap_err();
        assert!(err.to_string().contains("not a checkpoint"), "{err}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let (model, config) = tiny_kge();
        let path = std::env::temp_dir().join("kgner_ckpt_trunc.ckpt");
        save_kge(&path, &model, &config, 3, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(load_kge(&path).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let (model, config) = tiny_kge();
        let path = std::env::temp_dir().join("kgner_ckpt_extra.ckpt");
        save_kge(&path, &model, &config, 3, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 12]);
        std::fs::write(&path, &bytes).unwrap();
        let err = load_kge(&path).unwrap_err();
        assert!(err.to_string().contains("longer"), "{err}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn optimizer_state_survives_save() {
        let (mut model, config) = tiny_kge();
        let instances = crate::kge::build_training_set(
            &parse_triples(std::io::Cursor::new("Ana\tknows\tBo\n"), "t").unwrap(),
        );
        // one real step so moment buffers exist
        let mut opt = crate::tensor::Optimizer::new(crate::tensor::OptimizerKind::adam(), 1e-3);
        let mut rng = crate::rng::Rng::new(1);
        model.train_with(&instances, 1, &mut opt, &mut rng).unwrap();
        let path = std::env::temp_dir().join("kgner_ckpt_opt.ckpt");
        save_kge(&path, &model, &config, 3, Some(&opt)).unwrap();
        let (manifest, _) = read_file(&path).unwrap();
        assert!(manifest.arrays.iter().any(|a| a.section == "opt"));
        std::fs::remove_file(&path).ok();
    }
}
