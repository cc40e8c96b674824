//! Checkpoints: a JSON manifest (version, config, step, metrics, tensor
//! directory) followed by one packed little-endian f32 blob. Tensors are
//! stored in manifest order at element offsets into the blob, so save →
//! load → save reproduces the file bitwise.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use mdf_numerics::real::{cast, Real};
use serde::{Deserialize, Serialize};

use crate::codec::{CodecConfig, SetCodec};
use crate::error::{MdfError, Result};
use crate::model::{DenoiserModel, ModelConfig};
use crate::schema::ModalitySchema;

const MAGIC: &[u8; 4] = b"MDC1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the f32 blob.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: serde_json::Value,
    step: u64,
    metrics: BTreeMap<String, f64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
    tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, step: u64) -> Self {
        Checkpoint { config, step, metrics: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        if self.tensors.iter().any(|(n, _, _)| n == name) {
            return Err(MdfError::Parameter(format!("duplicate tensor {name}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(MdfError::Parameter(format!(
                "tensor {name}: shape {shape:?} does not hold {} elements",
                data.len()
            )));
        }
        self.tensors.push((name.to_string(), shape, data));
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.tensors
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| MdfError::Format(format!("checkpoint has no tensor {name}")))
    }

    pub fn tensor_names(&self) -> Vec<&str> {
        self.tensors.iter().map(|(n, _, _)| n.as_str()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0usize;
        for (name, shape, data) in &self.tensors {
            entries.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset });
            offset += data.len();
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            metrics: self.metrics.clone(),
            tensors: entries,
        };
        let manifest_json = serde_json::to_vec(&manifest)?;
        let mut buf = Vec::with_capacity(8 + manifest_json.len() + offset * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&u32::try_from(manifest_json.len()).unwrap().to_le_bytes());
        buf.extend_from_slice(&manifest_json);
        for (_, _, data) in &self.tensors {
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut raw = Vec::new();
        fs::File::open(path)?.read_to_end(&mut raw)?;
        if raw.len() < 8 || &raw[..4] != MAGIC {
            return Err(MdfError::Format("bad magic, not a checkpoint file".into()));
        }
        let mlen = u32::from_le_bytes(raw[4..8].try_into().unwrap()) as usize;
        if raw.len() < 8 + mlen {
            return Err(MdfError::Format("truncated checkpoint manifest".into()));
        }
        let manifest: Manifest = serde_json::from_slice(&raw[8..8 + mlen])?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(MdfError::Format(format!(
                "checkpoint version {} unsupported",
                manifest.version
            )));
        }
        let blob = &raw[8 + mlen..];
        if blob.len() % 4 != 0 {
            return Err(MdfError::Format("blob length is not a multiple of 4".into()));
        }
        let total = blob.len() / 4;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        let mut expect_offset = 0usize;
        for e in &manifest.tensors {
            let len: usize = e.shape.iter().product();
            if e.offset != expect_offset || e.offset + len > total {
                return Err(MdfError::Format(format!(
                    "tensor {} offset {} inconsistent with blob layout",
                    e.name, e.offset
                )));
            }
            let data = blob[e.offset * 4..(e.offset + len) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), e.shape.clone(), data));
            expect_offset += len;
        }
        if expect_offset != total {
            return Err(MdfError::Format(format!(
                "blob holds {total} elements, manifest covers {expect_offset}"
            )));
        }
        Ok(Checkpoint {
            config: manifest.config,
            step: manifest.step,
            metrics: manifest.metrics,
            tensors,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelCheckpointConfig {
    model: ModelConfig,
    schema: ModalitySchema,
}

/// Build an in-memory checkpoint holding the model config and parameters.
/// Callers may insert extra tensors (e.g. optimizer state) before saving.
pub fn model_checkpoint<T: Real>(
    model: &DenoiserModel<T>,
    step: u64,
    metrics: BTreeMap<String, f64>,
) -> Result<Checkpoint> {
    let cfg = ModelCheckpointConfig { model: model.cfg().clone(), schema: model.schema().clone() };
    let mut ck = Checkpoint::new(serde_json::to_value(&cfg)?, step);
    ck.metrics = metrics;
    for (name, tensor) in model.param_names().iter().zip(model.params()) {
        let data = tensor.data().iter().map(|&v| v.to_f64_lossy() as f32).collect();
        ck.insert(name, tensor.shape().to_vec(), data)?;
    }
    Ok(ck)
}

pub fn save_model<T: Real>(
    model: &DenoiserModel<T>,
    path: &Path,
    step: u64,
    metrics: BTreeMap<String, f64>,
) -> Result<()> {
    model_checkpoint(model, step, metrics)?.save(path)
}

pub fn load_model<T: Real>(path: &Path) -> Result<(DenoiserModel<T>, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let cfg: ModelCheckpointConfig = serde_json::from_value(ck.config.clone())?;
    let mut model = DenoiserModel::<T>::init(cfg.model, cfg.schema, 0)?;
    let names = model.param_names();
    for (name, tensor) in names.iter().zip(model.params_mut()) {
        let (shape, data) = ck.tensor(name)?;
        if shape != tensor.shape() {
            return Err(MdfError::Format(format!(
                "tensor {name}: checkpoint shape {shape:?}, model shape {:?}",
                tensor.shape()
            )));
        }
        for (dst, &src) in tensor.data_mut().iter_mut().zip(data) {
            *dst = cast::<T>(src as f64);
        }
    }
    Ok((model, ck))
}

pub fn save_codec<T: Real>(
    codec: &SetCodec<T>,
    path: &Path,
    step: u64,
    metrics: BTreeMap<String, f64>,
) -> Result<()> {
    let mut ck = Checkpoint::new(serde_json::to_value(codec.cfg())?, step);
    ck.metrics = metrics;
    for (name, tensor) in codec.param_names().iter().zip(codec.params()) {
        let data = tensor.data().iter().map(|&v| v.to_f64_lossy() as f32).collect();
        ck.insert(name, tensor.shape().to_vec(), data)?;
    }
    let (mean, std) = codec.coord_stats();
    ck.insert("coord.mean", vec![2], mean.iter().map(|&v| v as f32).collect())?;
    ck.insert("coord.std", vec![2], std.iter().map(|&v| v as f32).collect())?;
    ck.save(path)
}

pub fn load_codec<T: Real>(path: &Path) -> Result<(SetCodec<T>, Checkpoint)> {
    let ck = Checkpoint::load(path)?;
    let cfg: CodecConfig = serde_json::from_value(ck.config.clone())?;
    let mut codec = SetCodec::<T>::init(cfg, 0)?;
    for (name, tensor) in codec.param_names().iter().zip(codec.params_mut()) {
        let (shape, data) = ck.tensor(name)?;
        if shape != tensor.shape() {
            return Err(MdfError::Format(format!(
                "tensor {name}: checkpoint shape {shape:?}, codec shape {:?}",
                tensor.shape()
            )));
        }
        for (dst, &src) in tensor.data_mut().iter_mut().zip(data) {
            *dst = cast::<T>(src as f64);
        }
    }
    let (_, mean) = ck.tensor("coord.mean")?;
    let (_, std) = ck.tensor("coord.std")?;
    codec.set_coord_stats(
        [mean[0] as f64, mean[1] as f64],
        [std[0] as f64, std[1] as f64],
    )?;
    Ok((codec, ck))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("mdf-ck-test-{}-{name}", std::process::id()))
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut ck = Checkpoint::new(json!({"lr": 5e-4, "note": "x"}), 123);
        ck.metrics.insert("loss".into(), 0.731);
        ck.insert("a.w", vec![2, 3], vec![1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 9.0])
            .unwrap();
        ck.insert("a.b", vec![3], vec![0.1, 0.2, 0.3]).unwrap();
        let p1 = tmp("rt1.ck");
        let p2 = tmp("rt2.ck");
        ck.save(&p1).unwrap();
        let back = Checkpoint::load(&p1).unwrap();
        assert_eq!(back, ck);
        back.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        for p in [p1, p2] {
            let _ = fs::remove_file(p);
        }
    }

    #[test]
    fn insert_validates_shapes_and_duplicates() {
        let mut ck = Checkpoint::new(json!(null), 0);
        assert!(ck.insert("t", vec![2, 2], vec![0.0; 3]).is_err());
        ck.insert("t", vec![3], vec![0.0; 3]).unwrap();
        assert!(ck.insert("t", vec![3], vec![0.0; 3]).is_err());
        assert!(ck.tensor("missing").is_err());
    }

    #[test]
    fn rejects_foreign_and_inconsistent_files() {
        let p = tmp("bad.ck");
        fs::write(&p, b"NOPE----").unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(MdfError::Format(_))));
        // valid file, then truncate the blob
        let mut ck = Checkpoint::new(json!(1), 0);
        ck.insert("w", vec![4], vec![1.0; 4]).unwrap();
        ck.save(&p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(MdfError::Format(_))));
        let _ = fs::remove_file(p);
    }

    #[test]
    fn model_weights_survive_the_round_trip() {
        use crate::model::ModelConfig;
        use crate::schema::ModalitySchema;
        let cfg = ModelConfig { d_model: 32, d_tok: 16, d_noise: 8, layers: 2, heads: 2, t_max: 4, k_max: 50 };
        let model = DenoiserModel::<f32>::init(cfg, ModalitySchema::desk_default(4), 9).unwrap();
        let p = tmp("model.ck");
        save_model(&model, &p, 77, BTreeMap::new()).unwrap();
        let (back, ck) = load_model::<f32>(&p).unwrap();
        assert_eq!(ck.step, 77);
        assert_eq!(back.cfg(), model.cfg());
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.shape(), b.shape());
            assert_eq!(a.data(), b.data());
        }
        let _ = fs::remove_file(p);
    }

    #[test]
    fn codec_weights_and_coord_stats_survive() {
        let mut codec = SetCodec::<f32>::init(CodecConfig::default(), 3).unwrap();
        codec.set_coord_stats([0.5, 0.45], [0.2, 0.125]).unwrap();
        let p = tmp("codec.ck");
        save_codec(&codec, &p, 5000, BTreeMap::new()).unwrap();
        let (back, _) = load_codec::<f32>(&p).unwrap();
        for (a, b) in codec.params().iter().zip(back.params()) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(back.coord_stats(), codec.coord_stats());
        let _ = fs::remove_file(p);
    }
}
