//! Trajectory tokenization and the diffusion training loop.
//!
//! Tokenization turns raw trajectory records into fixed-width model rows:
//! point sets become codec latents, and every channel (latents included) is
//! z-scored so diffusion noise and data share a unit scale. The statistics
//! travel with the model checkpoint, so inference can tokenize new
//! observations identically and un-scale sampled outputs.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use mdf_numerics::real::{cast, Real};
use mdf_numerics::{AdamOutcome, AdamParams, AdamState, Tape, Tensor};

use crate::checkpoint::{self, Checkpoint};
use crate::codec::SetCodec;
use crate::data::{ChannelStats, Dataset, NormStats};
use crate::error::{MdfError, Result};
use crate::model::{mdf_loss, Batch, DenoiserModel, ModelConfig};
use crate::noise::sample_training_matrix;
use crate::rng;
use crate::schedule::DiffusionSchedule;
use crate::schema::ModalitySchema;
use crate::world::TrajectoryRecord;

/// A dataset after tokenization: per trajectory, per modality, a `[T, dim]`
/// tensor of z-scored rows ready to batch.
pub struct TokenizedDataset<T: Real> {
    pub schema: ModalitySchema,
    /// File-header stats plus latent stats under "full_pc" / "partial_pc".
    pub stats: NormStats,
    pub t_len: usize,
    pub seqs: Vec<Vec<Tensor<T>>>,
}

fn encode_record_sets<T: Real>(
    codec: &SetCodec<T>,
    sets: &[crate::codec::PointSet],
) -> Result<Vec<Vec<T>>> {
    codec.encode_batch(sets)
}

/// Population mean / std per latent coordinate, accumulated in f64.
fn latent_stats<T: Real>(rows: &[&Vec<T>], d_z: usize) -> Result<ChannelStats> {
    if rows.is_empty() {
        return Err(MdfError::EmptySet("latent statistics need at least one row".into()));
    }
    let mut sum = vec![0.0f64; d_z];
    let mut sq = vec![0.0f64; d_z];
    for row in rows {
        for (c, v) in row.iter().enumerate() {
            let x = v.to_f64_lossy();
            sum[c] += x;
            sq[c] += x * x;
        }
    }
    let n = rows.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(crate::data::STD_FLOOR))
        .collect();
    Ok(ChannelStats { mean, std })
}

/// Raw (un-normalized) values of one flat channel at time `t`.
fn flat_row(record: &TrajectoryRecord, name: &str, t: usize) -> Result<Vec<f64>> {
    let row: Vec<f64> = match name {
        "force" => record.force[t].iter().map(|&v| v as f64).collect(),
        "action" => record.action[t].iter().map(|&v| v as f64).collect(),
        "proprio" => record.proprio[t].iter().map(|&v| v as f64).collect(),
        "reward" => vec![record.reward[t] as f64],
        other => return Err(MdfError::Config(format!("unknown flat channel {other}"))),
    };
    Ok(row)
}

fn zscore_into<T: Real>(vals: &[f64], st: &ChannelStats, out: &mut Vec<T>) -> Result<()> {
    if vals.len() != st.mean.len() {
        return Err(MdfError::Config(format!(
            "channel width {} does not match stats width {}",
            vals.len(),
            st.mean.len()
        )));
    }
    for (c, &v) in vals.iter().enumerate() {
        out.push(cast::<T>((v - st.mean[c]) / st.std[c]));
    }
    Ok(())
}

/// Tokenize one record against existing statistics (the inference path).
/// Returns per-modality `[T, dim]` tensors in schema order.
pub fn tokenize_trajectory<T: Real>(
    record: &TrajectoryRecord,
    full_codec: &SetCodec<T>,
    partial_codec: &SetCodec<T>,
    schema: &ModalitySchema,
    stats: &NormStats,
) -> Result<Vec<Tensor<T>>> {
    let full_z = encode_record_sets(full_codec, &record.full)?;
    let partial_z = encode_record_sets(partial_codec, &record.partial)?;
    assemble_seq(record, &full_z, &partial_z, schema, stats)
}

fn assemble_seq<T: Real>(
    record: &TrajectoryRecord,
    full_z: &[Vec<T>],
    partial_z: &[Vec<T>],
    schema: &ModalitySchema,
    stats: &NormStats,
) -> Result<Vec<Tensor<T>>> {
    let t_len = record.t_len();
    let mut out = Vec::with_capacity(schema.len());
    for m in 0..schema.len() {
        let name = schema.name(m);
        let dim = schema.dim(m);
        let st = stats.get(name)?;
        let mut buf: Vec<T> = Vec::with_capacity(t_len * dim);
        for t in 0..t_len {
            match name {
                "full_pc" => {
                    let vals: Vec<f64> = full_z[t].iter().map(|v| v.to_f64_lossy()).collect();
                    zscore_into(&vals, st, &mut buf)?;
                }
                "partial_pc" => {
                    let vals: Vec<f64> = partial_z[t].iter().map(|v| v.to_f64_lossy()).collect();
                    zscore_into(&vals, st, &mut buf)?;
                }
                _ => zscore_into(&flat_row(record, name, t)?, st, &mut buf)?,
            }
        }
        if buf.len() != t_len * dim {
            return Err(MdfError::Config(format!(
                "modality {name}: tokenized {} values, schema wants {}",
                buf.len(),
                t_len * dim
            )));
        }
        out.push(Tensor::new(vec![t_len, dim], buf));
    }
    Ok(out)
}

/// Tokenize a whole dataset: encode every point set, fit latent statistics
/// over the result, merge them with the file-header stats, and z-score all
/// channels. The codecs are read-only here; they must already be pretrained.
pub fn tokenize_dataset<T: Real>(
    ds: &Dataset,
    full_codec: &SetCodec<T>,
    partial_codec: &SetCodec<T>,
) -> Result<TokenizedDataset<T>> {
    let d_z = full_codec.cfg().d_z;
    if partial_codec.cfg().d_z != d_z {
        return Err(MdfError::Config(format!(
            "codec latent widths differ: full {d_z}, partial {}",
            partial_codec.cfg().d_z
        )));
    }
    if ds.records.is_empty() {
        return Err(MdfError::EmptySet("cannot tokenize an empty dataset".into()));
    }
    let t_len = ds.header.t;

    let mut full_lat: Vec<Vec<Vec<T>>> = Vec::with_capacity(ds.records.len());
    let mut partial_lat: Vec<Vec<Vec<T>>> = Vec::with_capacity(ds.records.len());
    for r in &ds.records {
        if r.t_len() != t_len {
            return Err(MdfError::Format(format!(
                "record length {} does not match header T {t_len}",
                r.t_len()
            )));
        }
        full_lat.push(encode_record_sets(full_codec, &r.full)?);
        partial_lat.push(encode_record_sets(partial_codec, &r.partial)?);
    }

    let full_rows: Vec<&Vec<T>> = full_lat.iter().flatten().collect();
    let partial_rows: Vec<&Vec<T>> = partial_lat.iter().flatten().collect();
    let mut merged = ds.header.norm_stats.0.clone();
    merged.insert("full_pc".to_string(), latent_stats(&full_rows, d_z)?);
    merged.insert("partial_pc".to_string(), latent_stats(&partial_rows, d_z)?);
    let stats = NormStats(merged);

    let schema = ModalitySchema::desk_default(d_z);
    let seqs = ds
        .records
        .iter()
        .zip(full_lat.iter().zip(&partial_lat))
        .map(|(r, (fz, pz))| assemble_seq(r, fz, pz, &schema, &stats))
        .collect::<Result<Vec<_>>>()?;

    Ok(TokenizedDataset { schema, stats, t_len, seqs })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub clip_global_norm: f64,
    pub seed: u64,
    /// Progress line cadence, 0 to silence.
    pub log_every: u64,
    /// Periodic checkpoint cadence, 0 for final-only.
    pub checkpoint_every: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 50_000,
            batch_size: 64,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            clip_global_norm: 1.0,
            seed: 0,
            log_every: 1000,
            checkpoint_every: 5000,
            model: ModelConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CurvePoint {
    pub step: u64,
    pub loss: f64,
    /// Wall-clock time of this step. Excluded from reproducibility claims.
    pub wall_ms: f64,
}

pub struct TrainOutcome<T: Real> {
    pub model: DenoiserModel<T>,
    pub curve: Vec<CurvePoint>,
    pub final_checkpoint: PathBuf,
}

/// Normalization statistics embedded in a training checkpoint, so inference
/// can tokenize fresh observations exactly as training did.
pub fn checkpoint_stats(ck: &Checkpoint) -> Result<NormStats> {
    let v = ck
        .config
        .get("stats")
        .ok_or_else(|| MdfError::Format("checkpoint carries no normalization stats".into()))?;
    Ok(serde_json::from_value(v.clone())?)
}

/// Checkpoint carrying parameters plus Adam first/second moments, so resume
/// is bitwise at f32. Moment tensors are stored as `adam.{m,v}.<param>`.
fn save_training_checkpoint<T: Real>(
    model: &DenoiserModel<T>,
    adam: &AdamState<T>,
    stats: &NormStats,
    step: u64,
    loss: f64,
    path: &Path,
) -> Result<()> {
    let mut metrics = BTreeMap::new();
    if loss.is_finite() {
        metrics.insert("loss".to_string(), loss);
    }
    let mut ck = checkpoint::model_checkpoint(model, step, metrics)?;
    if let serde_json::Value::Object(cfg) = &mut ck.config {
        cfg.insert("stats".to_string(), serde_json::to_value(stats)?);
    }
    let (ms, vs) = adam.buffers();
    let names = model.param_names();
    for (((name, tensor), mb), vb) in names.iter().zip(model.params()).zip(ms).zip(vs) {
        let shape = tensor.shape().to_vec();
        ck.insert(
            &format!("adam.m.{name}"),
            shape.clone(),
            mb.iter().map(|&x| x.to_f64_lossy() as f32).collect(),
        )?;
        ck.insert(
            &format!("adam.v.{name}"),
            shape,
            vb.iter().map(|&x| x.to_f64_lossy() as f32).collect(),
        )?;
    }
    ck.save(path)
}

fn load_training_state<T: Real>(
    path: &Path,
    schema: &ModalitySchema,
) -> Result<(DenoiserModel<T>, AdamState<T>, u64)> {
    let (model, ck): (DenoiserModel<T>, Checkpoint) = checkpoint::load_model(path)?;
    if model.schema() != schema {
        return Err(MdfError::Config(
            "checkpoint schema does not match the tokenized dataset".into(),
        ));
    }
    let mut m = Vec::new();
    let mut v = Vec::new();
    for name in model.param_names() {
        let (_, md) = ck.tensor(&format!("adam.m.{name}")).map_err(|_| {
            MdfError::Format(format!("checkpoint lacks optimizer state adam.m.{name}; cannot resume"))
        })?;
        let (_, vd) = ck.tensor(&format!("adam.v.{name}")).map_err(|_| {
            MdfError::Format(format!("checkpoint lacks optimizer state adam.v.{name}; cannot resume"))
        })?;
        m.push(md.iter().map(|&x| cast::<T>(x as f64)).collect());
        v.push(vd.iter().map(|&x| cast::<T>(x as f64)).collect());
    }
    let adam = AdamState::restore(m, v, ck.step);
    Ok((model, adam, ck.step))
}

/// Train the denoiser on a tokenized dataset.
///
/// Every random draw is keyed by (seed, purpose, absolute step), so a resumed
/// run consumes exactly the streams the uninterrupted run would have: batch
/// indices from "batch", one noise matrix per batch element from "matrix",
/// corruption noise from "noise". A non-finite loss or gradient aborts with
/// an error; the last periodic checkpoint stays on disk.
///
/// Writes `loss.csv` (step,loss,wall_ms) and `model.mdc` under `run_dir`,
/// plus `ckpt-NNNNNN.mdc` every `checkpoint_every` steps.
pub fn train<T: Real>(
    cfg: &TrainConfig,
    data: &TokenizedDataset<T>,
    run_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    if data.seqs.is_empty() {
        return Err(MdfError::EmptySet("training needs at least one trajectory".into()));
    }
    if cfg.batch_size == 0 {
        return Err(MdfError::Parameter("batch_size must be positive".into()));
    }
    if data.t_len > cfg.model.t_max {
        return Err(MdfError::Config(format!(
            "sequence length {} exceeds model t_max {}",
            data.t_len, cfg.model.t_max
        )));
    }
    fs::create_dir_all(run_dir)?;
    let sched = DiffusionSchedule::square_cosine(cfg.model.k_max, 0.008, 0.999)?;

    let (mut model, mut adam, start) = match resume {
        Some(path) => load_training_state::<T>(path, &data.schema)?,
        None => {
            let model = DenoiserModel::<T>::init(
                cfg.model.clone(),
                data.schema.clone(),
                rng::derive_seed(cfg.seed, "model-init", 0),
            )?;
            let adam = AdamState::new(&model.params());
            (model, adam, 0)
        }
    };

    let ap = AdamParams {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        clip_global_norm: Some(cfg.clip_global_norm),
    };

    let csv_path = run_dir.join("loss.csv");
    let mut csv = if start > 0 && csv_path.exists() {
        BufWriter::new(OpenOptions::new().append(true).open(&csv_path)?)
    } else {
        let mut f = BufWriter::new(File::create(&csv_path)?);
        writeln!(f, "step,loss,wall_ms")?;
        f
    };

    let m_len = data.schema.len();
    let t_len = data.t_len;
    let bsz = cfg.batch_size;
    let n = data.seqs.len();
    let mut curve = Vec::new();
    let mut last_ck: Option<PathBuf> = None;
    let mut last_loss = f64::NAN;

    for step in start..cfg.steps {
        let t0 = Instant::now();
        let mut idx_rng = rng::stream(cfg.seed, "batch", step);
        let idx: Vec<usize> = (0..bsz).map(|_| idx_rng.gen_range(0..n)).collect();

        let mut levels = Vec::with_capacity(bsz * t_len * m_len);
        for b in 0..bsz {
            let mut mrng = rng::stream(cfg.seed, "matrix", step * bsz as u64 + b as u64);
            let matrix = sample_training_matrix(t_len, m_len, cfg.model.k_max, &mut mrng);
            levels.extend_from_slice(matrix.levels());
        }
        let modal: Vec<Tensor<T>> = (0..m_len)
            .map(|m| {
                let dim = data.schema.dim(m);
                let mut buf = Vec::with_capacity(bsz * t_len * dim);
                for &i in &idx {
                    buf.extend_from_slice(data.seqs[i][m].data());
                }
                Tensor::new(vec![bsz * t_len, dim], buf)
            })
            .collect();
        let batch = Batch { b: bsz, t: t_len, modal, levels };
        for (m, tensor) in batch.modal.iter().enumerate() {
            if tensor.data().iter().any(|v| !v.is_finite()) {
                return Err(MdfError::Training(format!(
                    "non-finite value in modality {} at step {step}; last checkpoint: {}",
                    data.schema.name(m),
                    last_ck
                        .as_deref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_else(|| "none".to_string())
                )));
            }
        }

        let mut tape = Tape::new();
        let out = mdf_loss(&model, &sched, &mut tape, &batch, rng::derive_seed(cfg.seed, "noise", step))?;
        let loss = tape.value(out.loss)[0].to_f64_lossy();
        if !loss.is_finite() {
            return Err(MdfError::Training(format!(
                "loss became non-finite at step {step}; last checkpoint: {}",
                last_ck
                    .as_deref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_else(|| "none".to_string())
            )));
        }
        if let Some(mo) = &out.model_out {
            tape.backward(out.loss);
            let mut grads: Vec<Vec<T>> = mo
                .param_vars
                .iter()
                .map(|&v| tape.grad(v).expect("model parameter gradient").to_vec())
                .collect();
            let mut pm = model.params_mut();
            if matches!(adam.step(&ap, &mut pm, &mut grads), AdamOutcome::Skipped) {
                return Err(MdfError::Training(format!(
                    "non-finite gradients at step {step}; last checkpoint: {}",
                    last_ck
                        .as_deref()
                        .map(|p| p.display().to_string())
                        .unwrap_or_else(|| "none".to_string())
                )));
            }
        }

        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        writeln!(csv, "{step},{loss},{wall_ms:.3}")?;
        curve.push(CurvePoint { step, loss, wall_ms });
        last_loss = loss;

        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            eprintln!("train step {}/{} loss {loss:.4}", step + 1, cfg.steps);
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
            let path = run_dir.join(format!("ckpt-{:06}.mdc", step + 1));
            save_training_checkpoint(&model, &adam, &data.stats, step + 1, loss, &path)?;
            last_ck = Some(path);
        }
    }
    csv.flush()?;

    let final_checkpoint = run_dir.join("model.mdc");
    save_training_checkpoint(&model, &adam, &data.stats, cfg.steps.max(start), last_loss, &final_checkpoint)?;
    Ok(TrainOutcome { model, curve, final_checkpoint })
}
