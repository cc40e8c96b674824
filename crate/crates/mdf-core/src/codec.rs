//! Diffusion autoencoder for fixed-size 2D point sets: a permutation-
//! invariant set encoder and a conditional noise-prediction decoder, trained
//! jointly and frozen afterwards as the point-set tokenizer.

use crate::error::{MdfError, Result};
use crate::model::level_features;
use crate::rng;
use crate::schedule::{ddim_ladder, ddim_step_clipped, forward_corrupt, DiffusionSchedule};
use mdf_numerics::real::{cast, Real};
use mdf_numerics::{AdamParams, AdamState, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// A fixed-capacity unordered 2D point set with a validity mask. Invalid
/// slots are padding; every set keeps at least one valid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSet {
    points: Vec<[f32; 2]>,
    valid: Vec<bool>,
}

impl PointSet {
    pub fn new(points: Vec<[f32; 2]>, valid: Vec<bool>) -> Result<Self> {
        if points.len() != valid.len() {
            return Err(MdfError::Parameter(format!(
                "point set has {} points but {} mask entries",
                points.len(),
                valid.len()
            )));
        }
        if let Some(p) = points.iter().find(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(MdfError::Numeric(format!("non-finite point coordinates {:?}", p)));
        }
        if !valid.iter().any(|&v| v) {
            return Err(MdfError::EmptySet("point set has no valid points".into()));
        }
        Ok(PointSet { points, valid })
    }

    /// All-valid set.
    pub fn dense(points: Vec<[f32; 2]>) -> Result<Self> {
        let n = points.len();
        Self::new(points, vec![true; n])
    }

    pub fn slots(&self) -> usize {
        self.points.len()
    }

    pub fn points(&self) -> &[[f32; 2]] {
        &self.points
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn iter_valid(&self) -> impl Iterator<Item = [f32; 2]> + '_ {
        self.points.iter().zip(&self.valid).filter(|(_, &v)| v).map(|(&p, _)| p)
    }
}

/// Symmetric mean nearest-neighbor squared distance over valid points.
pub fn chamfer(a: &PointSet, b: &PointSet) -> Result<f64> {
    let pa: Vec<[f32; 2]> = a.iter_valid().collect();
    let pb: Vec<[f32; 2]> = b.iter_valid().collect();
    if pa.is_empty() || pb.is_empty() {
        return Err(MdfError::EmptySet("chamfer over an all-invalid point set".into()));
    }
    let one_way = |src: &[[f32; 2]], dst: &[[f32; 2]]| -> f64 {
        let total: f64 = src
            .iter()
            .map(|p| {
                dst.iter()
                    .map(|q| {
                        let dx = (p[0] - q[0]) as f64;
                        let dy = (p[1] - q[1]) as f64;
                        dx * dx + dy * dy
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / src.len() as f64
    };
    Ok(0.5 * (one_way(&pa, &pb) + one_way(&pb, &pa)))
}

/// Nearest-rank percentile of an unsorted sample (q in [0,1]).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty sample");
    assert!((0.0..=1.0).contains(&q), "quantile {q} outside [0,1]");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample value"));
    let rank = ((sorted.len() as f64) * q).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Sampling-time clamp on implied clean values, in standardized units.
const X0_CLIP: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub set_size: usize,
    pub d_h: usize,
    pub d_z: usize,
    pub d_level: usize,
    pub dec_hidden: usize,
    pub k_max: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { set_size: 64, d_h: 64, d_z: 16, d_level: 16, dec_hidden: 128, k_max: 100 }
    }
}

/// Encoder + conditional denoising decoder over one point-set family.
///
/// Coordinates are standardized inside the codec (statistics fixed at
/// pretraining time) so that diffusion noise and data share a scale; callers
/// only ever see raw workspace coordinates.
pub struct SetCodec<T: Real> {
    cfg: CodecConfig,
    sched: DiffusionSchedule,
    coord_mean: Tensor<T>,
    coord_std: Tensor<T>,
    enc_w1: Tensor<T>,
    enc_b1: Tensor<T>,
    enc_w2: Tensor<T>,
    enc_b2: Tensor<T>,
    enc_proj_w: Tensor<T>,
    enc_proj_b: Tensor<T>,
    dec_w1: Tensor<T>,
    dec_b1: Tensor<T>,
    dec_w2: Tensor<T>,
    dec_b2: Tensor<T>,
    dec_w3: Tensor<T>,
    dec_b3: Tensor<T>,
}

struct CodecVars {
    enc_w1: Var,
    enc_b1: Var,
    enc_w2: Var,
    enc_b2: Var,
    enc_proj_w: Var,
    enc_proj_b: Var,
    dec_w1: Var,
    dec_b1: Var,
    dec_w2: Var,
    dec_b2: Var,
    dec_w3: Var,
    dec_b3: Var,
    all: Vec<Var>,
}

fn normal_tensor<T: Real>(
    shape: Vec<usize>,
    std: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| cast::<T>(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape, data).with_grad()
}

impl<T: Real> SetCodec<T> {
    pub fn init(cfg: CodecConfig, seed: u64) -> Result<Self> {
        if cfg.d_level % 2 != 0 {
            return Err(MdfError::Config(format!("d_level {} must be even", cfg.d_level)));
        }
        for (name, v) in
            [("set_size", cfg.set_size), ("d_h", cfg.d_h), ("d_z", cfg.d_z), ("dec_hidden", cfg.dec_hidden)]
        {
            if v == 0 {
                return Err(MdfError::Config(format!("codec {name} must be positive")));
            }
        }
        let sched = DiffusionSchedule::square_cosine(cfg.k_max, 0.008, 0.999)?;
        let mut r = rng::stream(seed, "codec-init", 0);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let dec_in = 2 + cfg.d_z + cfg.d_level;
        Ok(SetCodec {
            coord_mean: Tensor::zeros(vec![2]),
            coord_std: Tensor::full(vec![2], T::one()),
            enc_w1: normal_tensor(vec![2, cfg.d_h], fan(2), &mut r),
            enc_b1: Tensor::zeros(vec![cfg.d_h]).with_grad(),
            enc_w2: normal_tensor(vec![cfg.d_h, cfg.d_h], fan(cfg.d_h), &mut r),
            enc_b2: Tensor::zeros(vec![cfg.d_h]).with_grad(),
            enc_proj_w: normal_tensor(vec![2 * cfg.d_h, cfg.d_z], fan(2 * cfg.d_h), &mut r),
            enc_proj_b: Tensor::zeros(vec![cfg.d_z]).with_grad(),
            dec_w1: normal_tensor(vec![dec_in, cfg.dec_hidden], fan(dec_in), &mut r),
            dec_b1: Tensor::zeros(vec![cfg.dec_hidden]).with_grad(),
            // z re-enters the second layer so the conditioning path stays
            // strong deep in the decoder
            dec_w2: normal_tensor(
                vec![cfg.dec_hidden + cfg.d_z, cfg.dec_hidden],
                fan(cfg.dec_hidden + cfg.d_z),
                &mut r,
            ),
            dec_b2: Tensor::zeros(vec![cfg.dec_hidden]).with_grad(),
            // small final layer keeps initial noise predictions near zero
            dec_w3: normal_tensor(vec![cfg.dec_hidden, 2], 0.02 * fan(cfg.dec_hidden), &mut r),
            dec_b3: Tensor::zeros(vec![2]).with_grad(),
            cfg,
            sched,
        })
    }

    /// Coordinate standardization fixed at pretraining time.
    pub fn set_coord_stats(&mut self, mean: [f64; 2], std: [f64; 2]) -> Result<()> {
        if std.iter().any(|&s| !(s > 0.0)) || mean.iter().any(|m| !m.is_finite()) {
            return Err(MdfError::Parameter(format!(
                "bad coordinate stats: mean {:?} std {:?}",
                mean, std
            )));
        }
        self.coord_mean = Tensor::new(vec![2], mean.iter().map(|&m| cast::<T>(m)).collect());
        self.coord_std = Tensor::new(vec![2], std.iter().map(|&s| cast::<T>(s)).collect());
        Ok(())
    }

    /// Per-coordinate mean/std over all valid points of a dataset, with a
    /// floor on std for degenerate axes.
    pub fn set_coord_stats_from(&mut self, sets: &[PointSet]) -> Result<()> {
        if sets.is_empty() {
            return Err(MdfError::EmptySet("coordinate stats need a nonempty dataset".into()));
        }
        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        let mut count = 0usize;
        for ps in sets {
            for p in ps.iter_valid() {
                for (c, &v) in [0, 1].into_iter().zip(&p) {
                    sum[c] += v as f64;
                    sum_sq[c] += (v as f64) * (v as f64);
                }
                count += 1;
            }
        }
        let mean = [sum[0] / count as f64, sum[1] / count as f64];
        let std = [
            (sum_sq[0] / count as f64 - mean[0] * mean[0]).max(0.0).sqrt().max(1e-3),
            (sum_sq[1] / count as f64 - mean[1] * mean[1]).max(0.0).sqrt().max(1e-3),
        ];
        self.set_coord_stats(mean, std)
    }

    pub fn coord_stats(&self) -> ([f64; 2], [f64; 2]) {
        let m = self.coord_mean.data();
        let s = self.coord_std.data();
        (
            [m[0].to_f64_lossy(), m[1].to_f64_lossy()],
            [s[0].to_f64_lossy(), s[1].to_f64_lossy()],
        )
    }

    fn normalize(&self, p: [f32; 2]) -> [T; 2] {
        let m = self.coord_mean.data();
        let s = self.coord_std.data();
        [
            (cast::<T>(p[0] as f64) - m[0]) / s[0],
            (cast::<T>(p[1] as f64) - m[1]) / s[1],
        ]
    }

    fn denormalize(&self, p: [T; 2]) -> [f32; 2] {
        let m = self.coord_mean.data();
        let s = self.coord_std.data();
        [
            (p[0] * s[0] + m[0]).to_f64_lossy() as f32,
            (p[1] * s[1] + m[1]).to_f64_lossy() as f32,
        ]
    }

    pub fn cfg(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn sched(&self) -> &DiffusionSchedule {
        &self.sched
    }

    /// Canonical parameter order shared by `params`, `params_mut` and the
    /// `param_vars` of a training forward.
    pub fn param_names(&self) -> Vec<String> {
        ["enc.w1", "enc.b1", "enc.w2", "enc.b2", "enc.proj.w", "enc.proj.b", "dec.w1", "dec.b1",
            "dec.w2", "dec.b2", "dec.w3", "dec.b3"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![
            &self.enc_w1,
            &self.enc_b1,
            &self.enc_w2,
            &self.enc_b2,
            &self.enc_proj_w,
            &self.enc_proj_b,
            &self.dec_w1,
            &self.dec_b1,
            &self.dec_w2,
            &self.dec_b2,
            &self.dec_w3,
            &self.dec_b3,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w2,
            &mut self.enc_b2,
            &mut self.enc_proj_w,
            &mut self.enc_proj_b,
            &mut self.dec_w1,
            &mut self.dec_b1,
            &mut self.dec_w2,
            &mut self.dec_b2,
            &mut self.dec_w3,
            &mut self.dec_b3,
        ]
    }

    pub fn cast<U: Real>(&self) -> SetCodec<U> {
        SetCodec {
            cfg: self.cfg.clone(),
            sched: self.sched.clone(),
            coord_mean: self.coord_mean.cast(),
            coord_std: self.coord_std.cast(),
            enc_w1: self.enc_w1.cast(),
            enc_b1: self.enc_b1.cast(),
            enc_w2: self.enc_w2.cast(),
            enc_b2: self.enc_b2.cast(),
            enc_proj_w: self.enc_proj_w.cast(),
            enc_proj_b: self.enc_proj_b.cast(),
            dec_w1: self.dec_w1.cast(),
            dec_b1: self.dec_b1.cast(),
            dec_w2: self.dec_w2.cast(),
            dec_b2: self.dec_b2.cast(),
            dec_w3: self.dec_w3.cast(),
            dec_b3: self.dec_b3.cast(),
        }
    }

    fn bind(&self, tape: &mut Tape<T>) -> CodecVars {
        let mut all = Vec::with_capacity(12);
        let mut leaf = |t: &Tensor<T>| {
            let v = tape.leaf(t);
            all.push(v);
            v
        };
        let enc_w1 = leaf(&self.enc_w1);
        let enc_b1 = leaf(&self.enc_b1);
        let enc_w2 = leaf(&self.enc_w2);
        let enc_b2 = leaf(&self.enc_b2);
        let enc_proj_w = leaf(&self.enc_proj_w);
        let enc_proj_b = leaf(&self.enc_proj_b);
        let dec_w1 = leaf(&self.dec_w1);
        let dec_b1 = leaf(&self.dec_b1);
        let dec_w2 = leaf(&self.dec_w2);
        let dec_b2 = leaf(&self.dec_b2);
        let dec_w3 = leaf(&self.dec_w3);
        let dec_b3 = leaf(&self.dec_b3);
        CodecVars {
            enc_w1,
            enc_b1,
            enc_w2,
            enc_b2,
            enc_proj_w,
            enc_proj_b,
            dec_w1,
            dec_b1,
            dec_w2,
            dec_b2,
            dec_w3,
            dec_b3,
            all,
        }
    }

    fn check_sets(&self, sets: &[PointSet]) -> Result<()> {
        if sets.is_empty() {
            return Err(MdfError::EmptySet("no point sets given".into()));
        }
        for ps in sets {
            if ps.slots() != self.cfg.set_size {
                return Err(MdfError::Parameter(format!(
                    "point set has {} slots, codec expects {}",
                    ps.slots(),
                    self.cfg.set_size
                )));
            }
            if ps.valid_count() == 0 {
                return Err(MdfError::EmptySet("point set has no valid points".into()));
            }
        }
        Ok(())
    }

    /// Per-point MLP, masked mean+max pooling, and a linear projection to z.
    /// Invalid slots never reach the pooled features, so padding contents
    /// cannot leak into z.
    fn encode_on(&self, tape: &mut Tape<T>, vars: &CodecVars, sets: &[PointSet]) -> Var {
        let n = self.cfg.set_size;
        let rows = sets.len() * n;
        let mut coords = Vec::with_capacity(rows * 2);
        let mut mask = Vec::with_capacity(rows);
        for ps in sets {
            for (p, &v) in ps.points().iter().zip(ps.valid()) {
                coords.extend(self.normalize(*p));
                mask.push(if v { T::one() } else { T::zero() });
            }
        }
        let x = tape.constant_from(vec![rows, 2], coords);
        let h = tape.matmul(x, vars.enc_w1);
        let h = tape.add_bias(h, vars.enc_b1);
        let h = tape.gelu(h);
        let h = tape.matmul(h, vars.enc_w2);
        let h = tape.add_bias(h, vars.enc_b2);
        let h = tape.gelu(h);
        let mean = tape.masked_mean_pool(h, &mask, sets.len());
        let max = tape.masked_max_pool(h, &mask, sets.len());
        let pooled = tape.concat_cols(&[mean, max]);
        let z = tape.matmul(pooled, vars.enc_proj_w);
        tape.add_bias(z, vars.enc_proj_b)
    }

    /// Noise prediction for per-set corrupted coordinates at per-set levels.
    fn decode_eps_on(
        &self,
        tape: &mut Tape<T>,
        vars: &CodecVars,
        noisy: Var,
        z: Var,
        levels: &[usize],
    ) -> Var {
        let n = self.cfg.set_size;
        let idx: Vec<usize> = (0..levels.len() * n).map(|r| r / n).collect();
        let z_rep = tape.gather_rows(z, &idx);
        let mut feats = Vec::with_capacity(levels.len() * n * self.cfg.d_level);
        for &k in levels {
            let f = level_features::<T>(k, self.cfg.d_level);
            for _ in 0..n {
                feats.extend_from_slice(&f);
            }
        }
        let lvl = tape.constant_from(vec![levels.len() * n, self.cfg.d_level], feats);
        let inp = tape.concat_cols(&[noisy, z_rep, lvl]);
        let h = tape.matmul(inp, vars.dec_w1);
        let h = tape.add_bias(h, vars.dec_b1);
        let h = tape.gelu(h);
        let h2_in = tape.concat_cols(&[h, z_rep]);
        let h = tape.matmul(h2_in, vars.dec_w2);
        let h = tape.add_bias(h, vars.dec_b2);
        let h = tape.gelu(h);
        let h = tape.matmul(h, vars.dec_w3);
        tape.add_bias(h, vars.dec_b3)
    }

    /// Decoder noise prediction for one set of standardized coordinates at
    /// one level (diagnostic / test surface).
    pub fn predict_noise(&self, noisy: &[T], z: &[T], level: usize) -> Result<Vec<T>> {
        let n = self.cfg.set_size;
        if noisy.len() != n * 2 {
            return Err(MdfError::Parameter(format!(
                "noisy coordinate length {} does not match set size {}x2",
                noisy.len(),
                n
            )));
        }
        if z.len() != self.cfg.d_z {
            return Err(MdfError::Parameter(format!(
                "latent length {} does not match d_z {}",
                z.len(),
                self.cfg.d_z
            )));
        }
        if level == 0 || level > self.cfg.k_max {
            return Err(MdfError::Level(format!("level {level} outside 1..={}", self.cfg.k_max)));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let noisy_v = tape.constant_from(vec![n, 2], noisy.to_vec());
        let zv = tape.constant_from(vec![1, self.cfg.d_z], z.to_vec());
        let eps = self.decode_eps_on(&mut tape, &vars, noisy_v, zv, &[level]);
        Ok(tape.value(eps).to_vec())
    }

    /// Latent embedding of one point set.
    pub fn encode(&self, ps: &PointSet) -> Result<Vec<T>> {
        Ok(self.encode_batch(std::slice::from_ref(ps))?.pop().expect("one latent"))
    }

    /// Latent embeddings for a batch of point sets (one fused forward).
    pub fn encode_batch(&self, sets: &[PointSet]) -> Result<Vec<Vec<T>>> {
        self.check_sets(sets)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let z = self.encode_on(&mut tape, &vars, sets);
        let d = self.cfg.d_z;
        Ok(tape.value(z).chunks(d).map(|c| c.to_vec()).collect())
    }

    /// Deterministic DDIM decode of one latent into an all-valid point set.
    pub fn decode(&self, z: &[T], ddim_steps: usize, seed: u64) -> Result<PointSet> {
        Ok(self
            .decode_batch(std::slice::from_ref(&z.to_vec()), ddim_steps, seed)?
            .pop()
            .expect("one set"))
    }

    /// Batched decode; set s draws its starting noise from substream s.
    pub fn decode_batch(&self, zs: &[Vec<T>], ddim_steps: usize, seed: u64) -> Result<Vec<PointSet>> {
        if zs.is_empty() {
            return Err(MdfError::EmptySet("no latents given".into()));
        }
        if ddim_steps == 0 || ddim_steps > self.cfg.k_max {
            return Err(MdfError::Parameter(format!(
                "ddim_steps {} outside 1..={}",
                ddim_steps, self.cfg.k_max
            )));
        }
        for z in zs {
            if z.len() != self.cfg.d_z {
                return Err(MdfError::Parameter(format!(
                    "latent length {} does not match d_z {}",
                    z.len(),
                    self.cfg.d_z
                )));
            }
        }
        let n = self.cfg.set_size;
        let mut x: Vec<T> = Vec::with_capacity(zs.len() * n * 2);
        for s in 0..zs.len() {
            let mut r = rng::stream(seed, "decode-init", s as u64);
            x.extend((0..n * 2).map(|_| cast::<T>(r.sample::<f64, _>(StandardNormal))));
        }
        let z_flat: Vec<T> = zs.iter().flat_map(|z| z.iter().copied()).collect();
        let ladder = ddim_ladder(self.cfg.k_max, ddim_steps);
        for w in ladder.windows(2) {
            let (k, k_prev) = (w[0], w[1]);
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape);
            let noisy = tape.constant_from(vec![zs.len() * n, 2], x.clone());
            let zv = tape.constant_from(vec![zs.len(), self.cfg.d_z], z_flat.clone());
            let eps = self.decode_eps_on(&mut tape, &vars, noisy, zv, &vec![k; zs.len()]);
            x = ddim_step_clipped(&x, tape.value(eps), k, k_prev, &self.sched, X0_CLIP)?;
        }
        x.chunks(2)
            .collect::<Vec<_>>()
            .chunks(n)
            .map(|set| {
                let pts = set.iter().map(|c| self.denormalize([c[0], c[1]])).collect();
                PointSet::dense(pts)
            })
            .collect()
    }
}

/// Handles from one training forward.
pub struct CodecLossOut {
    pub loss: Var,
    pub param_vars: Vec<Var>,
}

/// Denoising loss for a batch: encode each clean set, corrupt its valid
/// coordinates at a per-set level, and regress the injected noise. Invalid
/// slots are masked out of the objective.
pub fn codec_loss<T: Real>(
    codec: &SetCodec<T>,
    tape: &mut Tape<T>,
    batch: &[PointSet],
    noise_seed: u64,
) -> Result<CodecLossOut> {
    codec.check_sets(batch)?;
    let n = codec.cfg.set_size;
    let k_max = codec.cfg.k_max;
    let mut clean = Vec::with_capacity(batch.len() * n * 2);
    for ps in batch {
        for p in ps.points() {
            clean.extend(codec.normalize(*p));
        }
    }
    let mut levels = Vec::with_capacity(batch.len());
    let mut noise = Vec::with_capacity(batch.len() * n * 2);
    let mut noisy = Vec::with_capacity(batch.len() * n * 2);
    for (s, _) in batch.iter().enumerate() {
        let k = rng::stream(noise_seed, "level", s as u64).gen_range(1..=k_max);
        let mut r = rng::stream(noise_seed, "eps", s as u64);
        let eps: Vec<T> =
            (0..n * 2).map(|_| cast::<T>(r.sample::<f64, _>(StandardNormal))).collect();
        let x0 = &clean[s * n * 2..(s + 1) * n * 2];
        noisy.extend(forward_corrupt(x0, k, &codec.sched, &eps)?);
        noise.extend(eps);
        levels.push(k);
    }

    let vars = codec.bind(tape);
    let z = codec.encode_on(tape, &vars, batch);
    let noisy_v = tape.constant_from(vec![batch.len() * n, 2], noisy);
    let eps_hat = codec.decode_eps_on(tape, &vars, noisy_v, z, &levels);

    let mut mask = Vec::with_capacity(batch.len() * n * 2);
    let mut active = 0usize;
    for ps in batch {
        for &v in ps.valid() {
            let m = if v { T::one() } else { T::zero() };
            mask.push(m);
            mask.push(m);
            active += 2 * usize::from(v);
        }
    }
    let eps_v = tape.constant_from(vec![batch.len() * n, 2], noise);
    let mask_v = tape.constant_from(vec![batch.len() * n, 2], mask);
    let diff = tape.sub(eps_hat, eps_v);
    let sq = tape.mul(diff, diff);
    let masked = tape.mul(sq, mask_v);
    let total = tape.sum_all(masked);
    let loss = tape.scale(total, cast::<T>(1.0 / active as f64));
    Ok(CodecLossOut { loss, param_vars: vars.all })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        CodecTrainConfig { steps: 5000, batch_size: 64, lr: 1e-3, seed: 0 }
    }
}

pub struct CodecTrainOutcome<T: Real> {
    pub codec: SetCodec<T>,
    /// (step, loss) per optimizer step.
    pub curve: Vec<(usize, f64)>,
}

/// Joint encoder/decoder pretraining; the result is frozen by callers.
pub fn pretrain_codec<T: Real>(
    dataset: &[PointSet],
    cfg: CodecConfig,
    tc: &CodecTrainConfig,
) -> Result<CodecTrainOutcome<T>> {
    if dataset.is_empty() {
        return Err(MdfError::EmptySet("codec pretraining needs a nonempty dataset".into()));
    }
    if tc.steps == 0 || tc.batch_size == 0 {
        return Err(MdfError::Config("codec pretraining needs steps >= 1 and batch >= 1".into()));
    }
    let mut codec = SetCodec::<T>::init(cfg, tc.seed)?;
    codec.set_coord_stats_from(dataset)?;
    let ap = AdamParams { lr: tc.lr, clip_global_norm: Some(1.0), ..AdamParams::default() };
    let mut adam = AdamState::new(&codec.params());
    let mut curve = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut br = rng::stream(tc.seed, "codec-batch", step as u64);
        let batch: Vec<PointSet> = (0..tc.batch_size)
            .map(|_| dataset[br.gen_range(0..dataset.len())].clone())
            .collect();
        let noise_seed = rng::derive_seed(tc.seed, "codec-noise", step as u64);
        let mut tape = Tape::new();
        let out = codec_loss(&codec, &mut tape, &batch, noise_seed)?;
        let loss = tape.value(out.loss)[0].to_f64_lossy();
        if !loss.is_finite() {
            return Err(MdfError::Training(format!(
                "codec loss became non-finite at step {step}"
            )));
        }
        tape.backward(out.loss);
        let mut grads: Vec<Vec<T>> = out
            .param_vars
            .iter()
            .map(|&v| tape.grad(v).expect("codec parameter gradient").to_vec())
            .collect();
        let mut pm = codec.params_mut();
        adam.step(&ap, &mut pm, &mut grads);
        curve.push((step, loss));
    }
    Ok(CodecTrainOutcome { codec, curve })
}

/// Round-trip encode/decode Chamfer distances, batched for throughput.
pub fn round_trip_chamfer<T: Real>(
    codec: &SetCodec<T>,
    sets: &[PointSet],
    ddim_steps: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(sets.len());
    for (chunk_i, chunk) in sets.chunks(512).enumerate() {
        let zs = codec.encode_batch(chunk)?;
        let decoded =
            codec.decode_batch(&zs, ddim_steps, rng::derive_seed(seed, "round-trip", chunk_i as u64))?;
        for (orig, dec) in chunk.iter().zip(&decoded) {
            out.push(chamfer(orig, dec)?);
        }
    }
    Ok(out)
}
