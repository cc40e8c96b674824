//! Trajectory dataset file I/O.
//!
//! Layout (all little-endian, no padding):
//!   magic "MDF1" · header_len: u32 · header: UTF-8 JSON · body.
//! Body: `n_traj` records × `T` timesteps; each timestep stores the full
//! point set (64×2 f32 + 64 u8 mask), the partial point set (same layout),
//! force f32×3, action f32×2, proprio f32×3, reward f32×1.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::PointSet;
use crate::error::{MdfError, Result};
use crate::schema::{ModalityDef, Role};
use crate::world::{run_expert_episode, TrajectoryRecord, POINT_SET_N, T_MODEL};

const MAGIC: &[u8; 4] = b"MDF1";
/// Standard deviations below this are floored so constant channels z-score
/// to zero instead of blowing up.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-modality normalization statistics for the flat (non-point-set)
/// channels, keyed by modality name. BTreeMap keeps the JSON key order
/// stable so identical data serializes to identical bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NormStats(pub BTreeMap<String, ChannelStats>);

impl NormStats {
    pub fn get(&self, name: &str) -> Result<&ChannelStats> {
        self.0
            .get(name)
            .ok_or_else(|| MdfError::Config(format!("no normalization stats for {name}")))
    }

    pub fn force_std(&self) -> Result<[f32; 3]> {
        let s = self.get("force")?;
        Ok([s.std[0] as f32, s.std[1] as f32, s.std[2] as f32])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: Vec<ModalityDef>,
    #[serde(rename = "T")]
    pub t: usize,
    pub n_traj: usize,
    pub point_set_n: usize,
    pub norm_stats: NormStats,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<TrajectoryRecord>,
}

/// The on-disk schema: raw storage widths, point sets before encoding.
pub fn file_schema() -> Vec<ModalityDef> {
    vec![
        ModalityDef { name: "full_pc".into(), dim: 2 * POINT_SET_N, role: Role::Privileged },
        ModalityDef { name: "partial_pc".into(), dim: 2 * POINT_SET_N, role: Role::Observation },
        ModalityDef { name: "force".into(), dim: 3, role: Role::Force },
        ModalityDef { name: "action".into(), dim: 2, role: Role::Action },
        ModalityDef { name: "proprio".into(), dim: 3, role: Role::Proprio },
        ModalityDef { name: "reward".into(), dim: 1, role: Role::Reward },
    ]
}

fn flat_channels(r: &TrajectoryRecord, t: usize) -> [(&'static str, Vec<f32>); 4] {
    [
        ("force", r.force[t].to_vec()),
        ("action", r.action[t].to_vec()),
        ("proprio", r.proprio[t].to_vec()),
        ("reward", vec![r.reward[t]]),
    ]
}

/// Population mean/std per component over all records and timesteps.
pub fn compute_norm_stats(records: &[TrajectoryRecord]) -> Result<NormStats> {
    if records.is_empty() {
        return Err(MdfError::Parameter("need at least one record for stats".into()));
    }
    let mut acc: BTreeMap<String, (Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
    for r in records {
        for t in 0..r.t_len() {
            for (name, vals) in flat_channels(r, t) {
                let e = acc
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![0.0; vals.len()], vec![0.0; vals.len()], 0.0));
                for (c, &v) in vals.iter().enumerate() {
                    e.0[c] += v as f64;
                    e.1[c] += (v as f64) * (v as f64);
                }
                e.2 += 1.0;
            }
        }
    }
    let stats = acc
        .into_iter()
        .map(|(name, (sum, sq, n))| {
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let std = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR))
                .collect();
            (name, ChannelStats { mean, std })
        })
        .collect();
    Ok(NormStats(stats))
}

fn put_pointset(buf: &mut Vec<u8>, ps: &PointSet) {
    for p in ps.points() {
        buf.extend_from_slice(&p[0].to_le_bytes());
        buf.extend_from_slice(&p[1].to_le_bytes());
    }
    buf.extend(ps.valid().iter().map(|&v| u8::from(v)));
}

fn put_f32s(buf: &mut Vec<u8>, vals: &[f32]) {
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialized size of one timestep.
fn step_bytes(point_set_n: usize) -> usize {
    2 * (point_set_n * 2 * 4 + point_set_n) + 4 * (3 + 2 + 3 + 1)
}

pub fn write_dataset(path: &Path, records: &[TrajectoryRecord]) -> Result<DatasetHeader> {
    if records.is_empty() {
        return Err(MdfError::Parameter("refusing to write an empty dataset".into()));
    }
    for (i, r) in records.iter().enumerate() {
        if r.t_len() != T_MODEL {
            return Err(MdfError::Parameter(format!(
                "record {i} has {} frames, expected {T_MODEL}",
                r.t_len()
            )));
        }
    }
    let header = DatasetHeader {
        schema: file_schema(),
        t: T_MODEL,
        n_traj: records.len(),
        point_set_n: POINT_SET_N,
        norm_stats: compute_norm_stats(records)?,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(
        8 + header_json.len() + records.len() * T_MODEL * step_bytes(POINT_SET_N),
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&u32::try_from(header_json.len()).unwrap().to_le_bytes());
    buf.extend_from_slice(&header_json);
    for r in records {
        for t in 0..T_MODEL {
            put_pointset(&mut buf, &r.full[t]);
            put_pointset(&mut buf, &r.partial[t]);
            put_f32s(&mut buf, &r.force[t]);
            put_f32s(&mut buf, &r.action[t]);
            put_f32s(&mut buf, &r.proprio[t]);
            put_f32s(&mut buf, &[r.reward[t]]);
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(header)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(MdfError::Format(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn pointset(&mut self, n: usize) -> Result<PointSet> {
        let mut pts = Vec::with_capacity(n);
        for _ in 0..n {
            let x = self.f32()?;
            let y = self.f32()?;
            pts.push([x, y]);
        }
        let mask = self.take(n)?;
        let valid: Vec<bool> = mask
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(MdfError::Format(format!("mask byte {other} is not 0/1"))),
            })
            .collect::<Result<_>>()?;
        PointSet::new(pts, valid)
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut cur = Cursor { buf: &raw, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(MdfError::Format("bad magic, not a dataset file".into()));
    }
    let header_len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    let header: DatasetHeader = serde_json::from_slice(cur.take(header_len)?)?;
    if header.t != T_MODEL || header.point_set_n != POINT_SET_N {
        return Err(MdfError::Format(format!(
            "unsupported geometry: T={} point_set_n={}",
            header.t, header.point_set_n
        )));
    }
    let expect = header.n_traj * header.t * step_bytes(header.point_set_n);
    if raw.len() - cur.pos != expect {
        return Err(MdfError::Format(format!(
            "body is {} bytes, header implies {expect}",
            raw.len() - cur.pos
        )));
    }
    let mut records = Vec::with_capacity(header.n_traj);
    for _ in 0..header.n_traj {
        let mut r = TrajectoryRecord {
            partial: Vec::with_capacity(header.t),
            full: Vec::with_capacity(header.t),
            force: Vec::with_capacity(header.t),
            action: Vec::with_capacity(header.t),
            proprio: Vec::with_capacity(header.t),
            reward: Vec::with_capacity(header.t),
        };
        for _ in 0..header.t {
            r.full.push(cur.pointset(header.point_set_n)?);
            r.partial.push(cur.pointset(header.point_set_n)?);
            r.force.push([cur.f32()?, cur.f32()?, cur.f32()?]);
            r.action.push([cur.f32()?, cur.f32()?]);
            r.proprio.push([cur.f32()?, cur.f32()?, cur.f32()?]);
            r.reward.push(cur.f32()?);
        }
        records.push(r);
    }
    Ok(Dataset { header, records })
}

#[derive(Clone, Debug)]
pub struct GenerateSummary {
    pub n_traj: usize,
    pub n_success: usize,
    pub header: DatasetHeader,
}

/// Roll `n_traj` seeded expert episodes and write them as one dataset file.
pub fn generate_dataset(n_traj: usize, seed: u64, path: &Path) -> Result<GenerateSummary> {
    if n_traj == 0 {
        return Err(MdfError::Parameter("n_traj must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(n_traj);
    let mut n_success = 0;
    for i in 0..n_traj {
        let ep = run_expert_episode(seed, i as u64);
        n_success += usize::from(ep.success);
        records.push(ep.record);
    }
    let header = write_dataset(path, &records)?;
    Ok(GenerateSummary { n_traj, n_success, header })
}
