//! Shared fixtures for unit tests: tiny datasets, codecs, and model configs
//! sized for speed rather than quality.

use std::path::PathBuf;

use crate::codec::{CodecConfig, SetCodec};
use crate::data::{compute_norm_stats, file_schema, Dataset, DatasetHeader};
use crate::error::Result;
use crate::infer::NoisePredictor;
use crate::model::{Batch, ModelConfig};
use crate::schedule::DiffusionSchedule;
use crate::schema::ModalitySchema;
use crate::world::{run_expert_episode, TrajectoryRecord, POINT_SET_N};

pub(crate) fn toy_dataset(n: usize, seed: u64) -> Dataset {
    let records: Vec<TrajectoryRecord> =
        (0..n).map(|i| run_expert_episode(seed, i as u64).record).collect();
    let header = DatasetHeader {
        schema: file_schema(),
        t: records[0].t_len(),
        n_traj: records.len(),
        point_set_n: POINT_SET_N,
        norm_stats: compute_norm_stats(&records).unwrap(),
    };
    Dataset { header, records }
}

pub(crate) fn toy_codecs(d_z: usize) -> (SetCodec<f32>, SetCodec<f32>) {
    let cfg =
        CodecConfig { set_size: POINT_SET_N, d_h: 16, d_z, d_level: 8, dec_hidden: 16, k_max: 100 };
    let mut full = SetCodec::<f32>::init(cfg.clone(), 5).unwrap();
    let mut partial = SetCodec::<f32>::init(cfg, 6).unwrap();
    full.set_coord_stats([0.5, 0.4], [0.2, 0.2]).unwrap();
    partial.set_coord_stats([0.5, 0.4], [0.2, 0.2]).unwrap();
    (full, partial)
}

pub(crate) fn tiny_model_cfg() -> ModelConfig {
    ModelConfig { d_model: 32, d_tok: 16, d_noise: 8, layers: 2, heads: 2, t_max: 10, k_max: 1000 }
}

pub(crate) fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("mdf-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Exact-noise oracle: knows the clean sequence and inverts the forward
/// process, so any sampler or scorer built on it has zero model error.
pub(crate) struct OracleEps {
    pub schema: ModalitySchema,
    pub sched: DiffusionSchedule,
    /// Per modality, length T·dim.
    pub x0: Vec<Vec<f32>>,
}

impl NoisePredictor<f32> for OracleEps {
    fn schema(&self) -> &ModalitySchema {
        &self.schema
    }

    fn k_max(&self) -> usize {
        self.sched.k_max()
    }

    fn predict(&self, batch: &Batch<f32>) -> Result<Vec<Vec<f32>>> {
        let m_len = self.schema.len();
        let mut out = Vec::with_capacity(m_len);
        for m in 0..m_len {
            let dim = self.schema.dim(m);
            let xs = batch.modal[m].data();
            let mut eps = vec![0.0f32; xs.len()];
            for b in 0..batch.b {
                for t in 0..batch.t {
                    let k = batch.levels[(b * batch.t + t) * m_len + m];
                    if k == 0 {
                        continue;
                    }
                    let ab = self.sched.alpha_bar(k);
                    let (c0, cn) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
                    for c in 0..dim {
                        let i = (b * batch.t + t) * dim + c;
                        eps[i] = (xs[i] - c0 * self.x0[m][t * dim + c]) / cn;
                    }
                }
            }
            out.push(eps);
        }
        Ok(out)
    }
}
