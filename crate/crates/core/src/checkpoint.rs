//! Named-tensor archives: a JSON manifest next to a little-endian `f32`
//! blob holding every tensor row-major, in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::NormalizerState;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Matrix;
use crate::training::{Adam, TrainConfig, TrainLog, Trained, Trainer};

pub const FORMAT: &str = "pcjscc-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Offset into the blob, in `f32` elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub normalizer: NormalizerState,
    pub log: TrainLog,
    pub adam_steps: Option<u64>,
    /// Blob file name, relative to the manifest.
    pub data_file: String,
    pub tensors: Vec<TensorEntry>,
}

const FIRST_MOMENT: &str = "adam.first.";
const SECOND_MOMENT: &str = "adam.second.";

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn write(path: &Path, mut manifest: Manifest, tensors: &[(String, &Matrix)]) -> Result<()> {
    let blob = blob_path(path);
    manifest.data_file = blob
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", path.display())))?
        .to_string();
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (name, m) in tensors {
        manifest.tensors.push(TensorEntry {
            name: name.clone(),
            rows: m.rows(),
            cols: m.cols(),
            offset,
        });
        offset += m.len();
        for &x in m.data() {
            bytes.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&blob, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn read(path: &Path) -> Result<(Manifest, Vec<(TensorEntry, Matrix)>)> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format {} v{}",
            manifest.format, manifest.version
        )));
    }
    let blob_file = path.with_file_name(&manifest.data_file);
    let bytes = fs::read(&blob_file)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(
            "tensor blob is not a whole number of f32 values".into(),
        ));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for t in &manifest.tensors {
        let end = t.offset + t.rows * t.cols;
        if end > values.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} runs past the end of the blob",
                t.name
            )));
        }
        tensors.push((
            t.clone(),
            Matrix::from_vec(t.rows, t.cols, values[t.offset..end].to_vec()),
        ));
    }
    Ok((manifest, tensors))
}

/// Overwrites every entry of `store` from `tensors` by name; any missing,
/// unknown or misshapen tensor is an error.
fn fill(store: &mut ParamStore, tensors: &[(TensorEntry, Matrix)], prefix: &str) -> Result<usize> {
    let mut filled = 0;
    for (t, m) in tensors {
        let Some(name) = t.name.strip_prefix(prefix) else {
            continue;
        };
        if prefix.is_empty() && (name.starts_with(FIRST_MOMENT) || name.starts_with(SECOND_MOMENT))
        {
            continue;
        }
        let id = store
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {}", t.name)))?;
        if store.get(id).shape() != m.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                t.name,
                m.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = m.clone();
        filled += 1;
    }
    if filled != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {filled} of {} tensors",
            store.len()
        )));
    }
    Ok(filled)
}

fn base_manifest(model: &Model, normalizer: &NormalizerState, log: &TrainLog) -> Manifest {
    Manifest {
        format: FORMAT.into(),
        version: VERSION,
        model: model.config.clone(),
        train: None,
        normalizer: normalizer.clone(),
        log: log.clone(),
        adam_steps: None,
        data_file: String::new(),
        tensors: Vec::new(),
    }
}

fn param_tensors(store: &ParamStore) -> Vec<(String, &Matrix)> {
    store
        .entries()
        .iter()
        .map(|e| (e.name.clone(), &e.value))
        .collect()
}

/// Parameters, normalizer and log of a trained model.
pub fn save_trained(path: &Path, trained: &Trained) -> Result<()> {
    let manifest = base_manifest(&trained.model, &trained.normalizer, &trained.log);
    write(path, manifest, &param_tensors(&trained.model.store))
}

pub fn load_trained(path: &Path) -> Result<Trained> {
    let (manifest, tensors) = read(path)?;
    let mut model = Model::new(manifest.model.clone(), 0)?;
    fill(&mut model.store, &tensors, "")?;
    manifest.normalizer.check()?;
    Ok(Trained {
        model,
        normalizer: manifest.normalizer,
        log: manifest.log,
    })
}

/// Everything needed to continue training after the last completed epoch.
pub fn save_trainer(path: &Path, trainer: &Trainer) -> Result<()> {
    let mut manifest = base_manifest(&trainer.model, &trainer.normalizer, &trainer.log);
    manifest.train = Some(trainer.config.clone());
    manifest.adam_steps = Some(trainer.adam.steps);
    let mut tensors = param_tensors(&trainer.model.store);
    for (e, (m, v)) in trainer
        .model
        .store
        .entries()
        .iter()
        .zip(trainer.adam.first.iter().zip(&trainer.adam.second))
    {
        tensors.push((format!("{FIRST_MOMENT}{}", e.name), m));
        tensors.push((format!("{SECOND_MOMENT}{}", e.name), v));
    }
    write(path, manifest, &tensors)
}

pub fn load_trainer(path: &Path) -> Result<Trainer> {
    let (manifest, tensors) = read(path)?;
    let config = manifest
        .train
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no training state".into()))?;
    let steps = manifest
        .adam_steps
        .ok_or_else(|| Error::Checkpoint("checkpoint carries no optimizer state".into()))?;
    let mut trainer = Trainer::new(config)?;
    if trainer.model.config != manifest.model {
        return Err(Error::Checkpoint(
            "model and training configurations disagree".into(),
        ));
    }
    fill(&mut trainer.model.store, &tensors, "")?;
    let mut first = trainer.model.store.clone();
    let mut second = trainer.model.store.clone();
    fill(&mut first, &tensors, FIRST_MOMENT)?;
    fill(&mut second, &tensors, SECOND_MOMENT)?;
    trainer.adam = Adam {
        steps,
        first: first.entries().iter().map(|e| e.value.clone()).collect(),
        second: second.entries().iter().map(|e| e.value.clone()).collect(),
        ..Adam::new(&trainer.model.store)
    };
    manifest.normalizer.check()?;
    trainer.normalizer = manifest.normalizer;
    trainer.log = manifest.log;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Neighborhood;
    use crate::geometry::{generate_dataset, DatasetSpec, ShapeFamily};

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                points: 32,
                latent_dim: 8,
                feature_dim: 8,
                neighborhood: Neighborhood { k: 4, radius: 0.5 },
                coord_hidden: 16,
                ..ModelConfig::default()
            },
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    fn data() -> Vec<crate::geometry::PointCloud> {
        generate_dataset(&DatasetSpec {
            family: ShapeFamily::Sphere,
            count: 8,
            points: 32,
            seed: 0,
        })
        .unwrap()
    }

    #[test]
    fn trained_round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let trained = crate::training::train(
            &TrainConfig {
                epochs: 1,
                ..tiny()
            },
            &data(),
        )
        .unwrap();
        save_trained(&path, &trained).unwrap();
        assert!(dir.path().join("m.bin").exists());
        let back = load_trained(&path).unwrap();
        assert_eq!(back.normalizer, trained.normalizer);
        assert_eq!(back.log, trained.log);
        for (a, b) in trained
            .model
            .store
            .entries()
            .iter()
            .zip(back.model.store.entries())
        {
            assert_eq!(a.name, b.name);
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }

    #[test]
    fn resumed_training_matches_the_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let set = data();
        let mut full = Trainer::new(tiny()).unwrap();
        full.run_epoch(&set).unwrap();
        save_trainer(&path, &full).unwrap();
        let next_full = full.run_epoch(&set).unwrap();
        let mut resumed = load_trainer(&path).unwrap();
        assert_eq!(resumed.epochs_done(), 1);
        let next_resumed = resumed.run_epoch(&set).unwrap();
        assert!(
            (next_full.loss - next_resumed.loss).abs() < 1e-6,
            "{} vs {}",
            next_full.loss,
            next_resumed.loss
        );
    }

    #[test]
    fn corrupt_archives_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let trained = crate::training::train(
            &TrainConfig {
                epochs: 1,
                ..tiny()
            },
            &data(),
        )
        .unwrap();
        save_trained(&path, &trained).unwrap();
        assert!(load_trainer(&path).is_err());
        let blob = dir.path().join("m.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_trained(&path), Err(Error::Checkpoint(_))));
        assert!(load_trained(&dir.path().join("missing.json")).is_err());
    }
}
