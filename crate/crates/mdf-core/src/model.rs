//! The latent-space denoiser: per-modality input projections, sinusoidal
//! noise-level embeddings through a shared MLP, fused per-timestep tokens,
//! a bidirectional pre-LN transformer trunk, and per-modality noise heads.

use crate::error::{MdfError, Result};
use crate::noise::NoiseMatrix;
use crate::rng;
use crate::schedule::{forward_corrupt, DiffusionSchedule};
use crate::schema::ModalitySchema;
use mdf_numerics::real::{cast, Real};
use mdf_numerics::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_tok: usize,
    pub d_noise: usize,
    pub layers: usize,
    pub heads: usize,
    pub t_max: usize,
    pub k_max: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_model: 128, d_tok: 32, d_noise: 16, layers: 4, heads: 4, t_max: 10, k_max: 1000 }
    }
}

struct Layer<T: Real> {
    ln1_g: Tensor<T>,
    ln1_b: Tensor<T>,
    wq: Tensor<T>,
    bq: Tensor<T>,
    wk: Tensor<T>,
    bk: Tensor<T>,
    wv: Tensor<T>,
    bv: Tensor<T>,
    wo: Tensor<T>,
    bo: Tensor<T>,
    ln2_g: Tensor<T>,
    ln2_b: Tensor<T>,
    w1: Tensor<T>,
    b1: Tensor<T>,
    w2: Tensor<T>,
    b2: Tensor<T>,
}

pub struct DenoiserModel<T: Real> {
    cfg: ModelConfig,
    schema: ModalitySchema,
    in_w: Vec<Tensor<T>>,
    in_b: Vec<Tensor<T>>,
    lvl_w1: Tensor<T>,
    lvl_b1: Tensor<T>,
    lvl_w2: Tensor<T>,
    lvl_b2: Tensor<T>,
    fuse_w: Tensor<T>,
    fuse_b: Tensor<T>,
    pos: Tensor<T>,
    layers: Vec<Layer<T>>,
    lnf_g: Tensor<T>,
    lnf_b: Tensor<T>,
    out_w: Vec<Tensor<T>>,
    out_b: Vec<Tensor<T>>,
}

/// One forward batch: B sequences of T timesteps. Row index is b·T + t.
pub struct Batch<T: Real> {
    pub b: usize,
    pub t: usize,
    /// Per modality, shape [B·T, dim_m].
    pub modal: Vec<Tensor<T>>,
    /// Level of each (row, modality) pair, index (b·T + t)·M + m.
    pub levels: Vec<usize>,
}

impl<T: Real> Batch<T> {
    /// Single-sequence batch from per-modality [T, dim] tensors and one
    /// noise matrix.
    pub fn single(modal: Vec<Tensor<T>>, matrix: &NoiseMatrix) -> Self {
        Batch { b: 1, t: matrix.t_len(), modal, levels: matrix.levels().to_vec() }
    }
}

/// Tape handles produced by one forward call.
pub struct ModelOut {
    /// Per-modality predicted noise, each [B·T, dim_m].
    pub eps_hat: Vec<Var>,
    /// Parameter leaves in `params()` order, for gradient readout.
    pub param_vars: Vec<Var>,
}

fn normal_tensor<T: Real>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| cast::<T>(rng.sample::<f64, _>(StandardNormal) * std))
        .collect();
    Tensor::new(shape, data).with_grad()
}

/// Sinusoidal features of a diffusion level, half sines half cosines over a
/// geometric frequency ramp.
pub fn level_features<T: Real>(level: usize, d: usize) -> Vec<T> {
    debug_assert!(d % 2 == 0);
    let half = d / 2;
    let mut out = Vec::with_capacity(d);
    for i in 0..half {
        let freq = 10_000f64.powf(-(i as f64) / half as f64);
        let x = level as f64 * freq;
        out.push(cast::<T>(x.sin()));
        out.push(cast::<T>(x.cos()));
    }
    out
}

impl<T: Real> DenoiserModel<T> {
    pub fn init(cfg: ModelConfig, schema: ModalitySchema, seed: u64) -> Result<Self> {
        if cfg.d_model % cfg.heads != 0 {
            return Err(MdfError::Config(format!(
                "d_model {} not divisible by heads {}",
                cfg.d_model, cfg.heads
            )));
        }
        if cfg.d_noise % 2 != 0 {
            return Err(MdfError::Config(format!("d_noise {} must be even", cfg.d_noise)));
        }
        let mut r = rng::stream(seed, "model-init", 0);
        let d = cfg.d_model;
        let dh_hidden = 4 * d;
        let lvl_hidden = 2 * cfg.d_noise;
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        let in_w = schema
            .entries()
            .iter()
            .map(|e| normal_tensor(vec![e.dim, cfg.d_tok], fan(e.dim), &mut r))
            .collect();
        let in_b = schema.entries().iter().map(|_| Tensor::zeros(vec![cfg.d_tok]).with_grad()).collect();
        let lvl_w1 = normal_tensor(vec![cfg.d_noise, lvl_hidden], fan(cfg.d_noise), &mut r);
        let lvl_b1 = Tensor::zeros(vec![lvl_hidden]).with_grad();
        let lvl_w2 = normal_tensor(vec![lvl_hidden, cfg.d_noise], fan(lvl_hidden), &mut r);
        let lvl_b2 = Tensor::zeros(vec![cfg.d_noise]).with_grad();
        let fuse_in = schema.len() * (cfg.d_tok + cfg.d_noise);
        let fuse_w = normal_tensor(vec![fuse_in, d], fan(fuse_in), &mut r);
        let fuse_b = Tensor::zeros(vec![d]).with_grad();
        let pos = normal_tensor(vec![cfg.t_max, d], 0.01, &mut r);
        let layers = (0..cfg.layers)
            .map(|_| Layer {
                ln1_g: Tensor::full(vec![d], T::one()).with_grad(),
                ln1_b: Tensor::zeros(vec![d]).with_grad(),
                wq: normal_tensor(vec![d, d], fan(d), &mut r),
                bq: Tensor::zeros(vec![d]).with_grad(),
                wk: normal_tensor(vec![d, d], fan(d), &mut r),
                bk: Tensor::zeros(vec![d]).with_grad(),
                wv: normal_tensor(vec![d, d], fan(d), &mut r),
                bv: Tensor::zeros(vec![d]).with_grad(),
                wo: normal_tensor(vec![d, d], fan(d), &mut r),
                bo: Tensor::zeros(vec![d]).with_grad(),
                ln2_g: Tensor::full(vec![d], T::one()).with_grad(),
                ln2_b: Tensor::zeros(vec![d]).with_grad(),
                w1: normal_tensor(vec![d, dh_hidden], fan(d), &mut r),
                b1: Tensor::zeros(vec![dh_hidden]).with_grad(),
                w2: normal_tensor(vec![dh_hidden, d], fan(dh_hidden), &mut r),
                b2: Tensor::zeros(vec![d]).with_grad(),
            })
            .collect();
        let lnf_g = Tensor::full(vec![d], T::one()).with_grad();
        let lnf_b = Tensor::zeros(vec![d]).with_grad();
        // small head init keeps initial predictions near zero, so the
        // starting loss sits at the unit-noise baseline
        let out_w = schema
            .entries()
            .iter()
            .map(|e| normal_tensor(vec![d, e.dim], 0.02 * fan(d), &mut r))
            .collect();
        let out_b = schema.entries().iter().map(|e| Tensor::zeros(vec![e.dim]).with_grad()).collect();

        Ok(DenoiserModel {
            cfg,
            schema,
            in_w,
            in_b,
            lvl_w1,
            lvl_b1,
            lvl_w2,
            lvl_b2,
            fuse_w,
            fuse_b,
            pos,
            layers,
            lnf_g,
            lnf_b,
            out_w,
            out_b,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn schema(&self) -> &ModalitySchema {
        &self.schema
    }

    /// Canonical parameter order; `params`, `params_mut`, `param_names` and
    /// the `param_vars` of a forward all follow it.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for e in self.schema.entries() {
            names.push(format!("in.{}.w", e.name));
            names.push(format!("in.{}.b", e.name));
        }
        for n in ["lvl.w1", "lvl.b1", "lvl.w2", "lvl.b2", "fuse.w", "fuse.b", "pos"] {
            names.push(n.into());
        }
        for l in 0..self.layers.len() {
            for n in [
                "ln1.g", "ln1.b", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv",
                "attn.bv", "attn.wo", "attn.bo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1", "mlp.w2",
                "mlp.b2",
            ] {
                names.push(format!("layer{l}.{n}"));
            }
        }
        names.push("final_ln.g".into());
        names.push("final_ln.b".into());
        for e in self.schema.entries() {
            names.push(format!("head.{}.w", e.name));
            names.push(format!("head.{}.b", e.name));
        }
        names
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p: Vec<&Tensor<T>> = Vec::new();
        for (w, b) in self.in_w.iter().zip(&self.in_b) {
            p.push(w);
            p.push(b);
        }
        p.extend([&self.lvl_w1, &self.lvl_b1, &self.lvl_w2, &self.lvl_b2, &self.fuse_w, &self.fuse_b, &self.pos]);
        for l in &self.layers {
            p.extend([
                &l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo,
                &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2,
            ]);
        }
        p.extend([&self.lnf_g, &self.lnf_b]);
        for (w, b) in self.out_w.iter().zip(&self.out_b) {
            p.push(w);
            p.push(b);
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p: Vec<&mut Tensor<T>> = Vec::new();
        for (w, b) in self.in_w.iter_mut().zip(&mut self.in_b) {
            p.push(w);
            p.push(b);
        }
        p.extend([
            &mut self.lvl_w1,
            &mut self.lvl_b1,
            &mut self.lvl_w2,
            &mut self.lvl_b2,
            &mut self.fuse_w,
            &mut self.fuse_b,
            &mut self.pos,
        ]);
        for l in &mut self.layers {
            p.extend([
                &mut l.ln1_g,
                &mut l.ln1_b,
                &mut l.wq,
                &mut l.bq,
                &mut l.wk,
                &mut l.bk,
                &mut l.wv,
                &mut l.bv,
                &mut l.wo,
                &mut l.bo,
                &mut l.ln2_g,
                &mut l.ln2_b,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        p.extend([&mut self.lnf_g, &mut self.lnf_b]);
        for (w, b) in self.out_w.iter_mut().zip(&mut self.out_b) {
            p.push(w);
            p.push(b);
        }
        p
    }

    pub fn cast<U: Real>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            cfg: self.cfg.clone(),
            schema: self.schema.clone(),
            in_w: self.in_w.iter().map(Tensor::cast).collect(),
            in_b: self.in_b.iter().map(Tensor::cast).collect(),
            lvl_w1: self.lvl_w1.cast(),
            lvl_b1: self.lvl_b1.cast(),
            lvl_w2: self.lvl_w2.cast(),
            lvl_b2: self.lvl_b2.cast(),
            fuse_w: self.fuse_w.cast(),
            fuse_b: self.fuse_b.cast(),
            pos: self.pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    ln1_g: l.ln1_g.cast(),
                    ln1_b: l.ln1_b.cast(),
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    ln2_g: l.ln2_g.cast(),
                    ln2_b: l.ln2_b.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            lnf_g: self.lnf_g.cast(),
            lnf_b: self.lnf_b.cast(),
            out_w: self.out_w.iter().map(Tensor::cast).collect(),
            out_b: self.out_b.iter().map(Tensor::cast).collect(),
        }
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<()> {
        let m_len = self.schema.len();
        if batch.modal.len() != m_len {
            return Err(MdfError::Config(format!(
                "batch has {} modalities, schema expects {m_len}",
                batch.modal.len()
            )));
        }
        if batch.t > self.cfg.t_max {
            return Err(MdfError::Config(format!(
                "sequence length {} exceeds model capacity {}",
                batch.t, self.cfg.t_max
            )));
        }
        if batch.t == 0 || batch.b == 0 {
            return Err(MdfError::Config("empty batch".into()));
        }
        let rows = batch.b * batch.t;
        for (m, x) in batch.modal.iter().enumerate() {
            let want = [rows, self.schema.dim(m)];
            if x.shape() != want {
                return Err(MdfError::Config(format!(
                    "modality {} shape {:?}, want {:?}",
                    self.schema.name(m),
                    x.shape(),
                    want
                )));
            }
        }
        if batch.levels.len() != rows * m_len {
            return Err(MdfError::Config(format!(
                "levels length {} does not match rows*modalities {}",
                batch.levels.len(),
                rows * m_len
            )));
        }
        if let Some(&bad) = batch.levels.iter().find(|&&l| l > self.cfg.k_max) {
            return Err(MdfError::Level(format!("level {bad} exceeds K={}", self.cfg.k_max)));
        }
        Ok(())
    }

    /// Predict per-entry noise for a batch of corrupted latent sequences.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch<T>) -> Result<ModelOut> {
        self.check_batch(batch)?;
        let m_len = self.schema.len();
        let rows = batch.b * batch.t;
        let (dq, heads) = (self.cfg.d_model, self.cfg.heads);
        let dh = dq / heads;

        let mut param_vars = Vec::new();
        let bind = |tape: &mut Tape<T>, t: &Tensor<T>, vars: &mut Vec<Var>| -> Var {
            let v = tape.leaf(t);
            vars.push(v);
            v
        };

        // per-modality token projections
        let mut tok_vars = Vec::with_capacity(m_len);
        let mut in_vars = Vec::with_capacity(m_len);
        for m in 0..m_len {
            let w = bind(tape, &self.in_w[m], &mut param_vars);
            let b = bind(tape, &self.in_b[m], &mut param_vars);
            in_vars.push((w, b));
        }
        // shared level-embedding MLP over sinusoidal features of every
        // (row, modality) level
        let mut feats = Vec::with_capacity(rows * m_len * self.cfg.d_noise);
        for &lvl in &batch.levels {
            feats.extend(level_features::<T>(lvl, self.cfg.d_noise));
        }
        let lvl_in = tape.constant_from(vec![rows * m_len, self.cfg.d_noise], feats);
        let lw1 = bind(tape, &self.lvl_w1, &mut param_vars);
        let lb1 = bind(tape, &self.lvl_b1, &mut param_vars);
        let lw2 = bind(tape, &self.lvl_w2, &mut param_vars);
        let lb2 = bind(tape, &self.lvl_b2, &mut param_vars);
        let h = tape.matmul(lvl_in, lw1);
        let h = tape.add_bias(h, lb1);
        let h = tape.gelu(h);
        let h = tape.matmul(h, lw2);
        let lvl_emb = tape.add_bias(h, lb2); // [rows*M, d_noise]

        for (m, &(w, b)) in in_vars.iter().enumerate() {
            let x = tape.constant(&batch.modal[m]);
            let t = tape.matmul(x, w);
            let t = tape.add_bias(t, b);
            tok_vars.push(t);
        }

        // fuse all modality tokens + their level embeddings per timestep
        let mut parts = Vec::with_capacity(2 * m_len);
        for (m, &tok) in tok_vars.iter().enumerate() {
            let idx: Vec<usize> = (0..rows).map(|r| r * m_len + m).collect();
            let lvl_m = tape.gather_rows(lvl_emb, &idx);
            parts.push(tok);
            parts.push(lvl_m);
        }
        let fused = tape.concat_cols(&parts);
        let fw = bind(tape, &self.fuse_w, &mut param_vars);
        let fb = bind(tape, &self.fuse_b, &mut param_vars);
        let x0 = tape.matmul(fused, fw);
        let x0 = tape.add_bias(x0, fb);

        let posv = bind(tape, &self.pos, &mut param_vars);
        let pos_idx: Vec<usize> = (0..rows).map(|r| r % batch.t).collect();
        let pos_rows = tape.gather_rows(posv, &pos_idx);
        let mut x = tape.add(x0, pos_rows);

        for layer in &self.layers {
            let ln1_g = bind(tape, &layer.ln1_g, &mut param_vars);
            let ln1_b = bind(tape, &layer.ln1_b, &mut param_vars);
            let wq = bind(tape, &layer.wq, &mut param_vars);
            let bq = bind(tape, &layer.bq, &mut param_vars);
            let wk = bind(tape, &layer.wk, &mut param_vars);
            let bk = bind(tape, &layer.bk, &mut param_vars);
            let wv = bind(tape, &layer.wv, &mut param_vars);
            let bv = bind(tape, &layer.bv, &mut param_vars);
            let wo = bind(tape, &layer.wo, &mut param_vars);
            let bo = bind(tape, &layer.bo, &mut param_vars);
            let ln2_g = bind(tape, &layer.ln2_g, &mut param_vars);
            let ln2_b = bind(tape, &layer.ln2_b, &mut param_vars);
            let w1 = bind(tape, &layer.w1, &mut param_vars);
            let b1 = bind(tape, &layer.b1, &mut param_vars);
            let w2 = bind(tape, &layer.w2, &mut param_vars);
            let b2 = bind(tape, &layer.b2, &mut param_vars);

            let hn = tape.layer_norm(x, ln1_g, ln1_b, cast::<T>(1e-5));
            let q = tape.matmul(hn, wq);
            let q = tape.add_bias(q, bq);
            let k = tape.matmul(hn, wk);
            let k = tape.add_bias(k, bk);
            let v = tape.matmul(hn, wv);
            let v = tape.add_bias(v, bv);
            let to_heads = |tape: &mut Tape<T>, z: Var| {
                let z = tape.reshape(z, vec![batch.b, batch.t, heads, dh]);
                tape.permute(z, &[0, 2, 1, 3]) // [B,H,T,dh]
            };
            let qh = to_heads(tape, q);
            let kh = to_heads(tape, k);
            let vh = to_heads(tape, v);
            let att = tape.softmax_attention(qh, kh, vh, None);
            let att = tape.permute(att, &[0, 2, 1, 3]);
            let att = tape.reshape(att, vec![rows, dq]);
            let att = tape.matmul(att, wo);
            let att = tape.add_bias(att, bo);
            x = tape.add(x, att);

            let hn2 = tape.layer_norm(x, ln2_g, ln2_b, cast::<T>(1e-5));
            let m1 = tape.matmul(hn2, w1);
            let m1 = tape.add_bias(m1, b1);
            let m1 = tape.gelu(m1);
            let m2 = tape.matmul(m1, w2);
            let m2 = tape.add_bias(m2, b2);
            x = tape.add(x, m2);
        }

        let lnf_g = bind(tape, &self.lnf_g, &mut param_vars);
        let lnf_b = bind(tape, &self.lnf_b, &mut param_vars);
        let xf = tape.layer_norm(x, lnf_g, lnf_b, cast::<T>(1e-5));

        let mut eps_hat = Vec::with_capacity(m_len);
        for m in 0..m_len {
            let w = bind(tape, &self.out_w[m], &mut param_vars);
            let b = bind(tape, &self.out_b[m], &mut param_vars);
            let o = tape.matmul(xf, w);
            let o = tape.add_bias(o, b);
            eps_hat.push(o);
        }
        Ok(ModelOut { eps_hat, param_vars })
    }
}

/// Everything mdf_loss materialized on the way to the scalar loss.
pub struct LossOut {
    pub loss: Var,
    pub model_out: Option<ModelOut>,
    /// Fraction of (t,m) entries carrying loss (level > 0).
    pub active_fraction: f64,
}

/// Corrupt each entry of a clean batch to its matrix level, predict the
/// injected noise, and return the masked per-element MSE.
///
/// Noise is drawn from streams keyed by (seed, modality name, row), so the
/// loss is invariant to modality ordering and resumable mid-run.
pub fn mdf_loss<T: Real>(
    model: &DenoiserModel<T>,
    sched: &DiffusionSchedule,
    tape: &mut Tape<T>,
    clean: &Batch<T>,
    noise_seed: u64,
) -> Result<LossOut> {
    let m_len = model.schema().len();
    let rows = clean.b * clean.t;
    let mut noisy_modal = Vec::with_capacity(m_len);
    let mut eps_targets: Vec<Tensor<T>> = Vec::with_capacity(m_len);
    let mut masks: Vec<Tensor<T>> = Vec::with_capacity(m_len);
    let mut masked_elems = 0usize;
    let mut active_entries = 0usize;

    for m in 0..m_len {
        let dim = model.schema().dim(m);
        let name = model.schema().name(m);
        let clean_m = &clean.modal[m];
        if clean_m.shape() != [rows, dim] {
            return Err(MdfError::Config(format!(
                "modality {name} shape {:?}, want {:?}",
                clean_m.shape(),
                [rows, dim]
            )));
        }
        let mut noisy = vec![T::zero(); rows * dim];
        let mut eps = vec![T::zero(); rows * dim];
        let mut mask = vec![T::zero(); rows * dim];
        for r in 0..rows {
            let k = clean.levels[r * m_len + m];
            let x0 = &clean_m.data()[r * dim..(r + 1) * dim];
            if k == 0 {
                noisy[r * dim..(r + 1) * dim].copy_from_slice(x0);
                continue;
            }
            let mut rs = rng::stream(noise_seed, name, r as u64);
            let e: Vec<T> = (0..dim)
                .map(|_| cast::<T>(rs.sample::<f64, _>(StandardNormal)))
                .collect();
            let xk = forward_corrupt(x0, k, sched, &e)?;
            noisy[r * dim..(r + 1) * dim].copy_from_slice(&xk);
            eps[r * dim..(r + 1) * dim].copy_from_slice(&e);
            mask[r * dim..(r + 1) * dim].fill(T::one());
            masked_elems += dim;
            active_entries += 1;
        }
        noisy_modal.push(Tensor::new(vec![rows, dim], noisy));
        eps_targets.push(Tensor::new(vec![rows, dim], eps));
        masks.push(Tensor::new(vec![rows, dim], mask));
    }

    let active_fraction = active_entries as f64 / (rows * m_len) as f64;
    if masked_elems == 0 {
        // nothing to predict: loss is identically zero
        let zero = tape.constant(&Tensor::scalar(T::zero()));
        return Ok(LossOut { loss: zero, model_out: None, active_fraction });
    }

    let noisy_batch = Batch { b: clean.b, t: clean.t, modal: noisy_modal, levels: clean.levels.clone() };
    let out = model.forward(tape, &noisy_batch)?;

    let mut total: Option<Var> = None;
    for m in 0..m_len {
        let eps_c = tape.constant(&eps_targets[m]);
        let mask_c = tape.constant(&masks[m]);
        let diff = tape.sub(out.eps_hat[m], eps_c);
        let sq = tape.mul(diff, diff);
        let masked = tape.mul(sq, mask_c);
        let s = tape.sum_all(masked);
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s),
        });
    }
    let loss = tape.scale(total.unwrap(), cast::<T>(1.0 / masked_elems as f64));
    Ok(LossOut { loss, model_out: Some(out), active_fraction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::sample_training_matrix;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { d_model: 32, d_tok: 8, d_noise: 8, layers: 2, heads: 2, t_max: 10, k_max: 1000 }
    }

    fn random_batch(b: usize, t: usize, schema: &ModalitySchema, seed: u64) -> Batch<f32> {
        let mut r = rng::stream(seed, "test-batch", 0);
        let rows = b * t;
        let modal = schema
            .entries()
            .iter()
            .map(|e| {
                let data: Vec<f32> =
                    (0..rows * e.dim).map(|_| r.sample::<f64, _>(StandardNormal) as f32).collect();
                Tensor::new(vec![rows, e.dim], data)
            })
            .collect();
        let mut levels = Vec::with_capacity(rows * schema.len());
        for _ in 0..b {
            let m = sample_training_matrix(t, schema.len(), 1000, &mut r);
            levels.extend_from_slice(m.levels());
        }
        Batch { b, t, modal, levels }
    }

    #[test]
    fn forward_output_shapes_match_inputs() {
        let schema = ModalitySchema::desk_default(16);
        let model: DenoiserModel<f32> = DenoiserModel::init(tiny_cfg(), schema.clone(), 1).unwrap();
        let batch = random_batch(3, 10, &schema, 2);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch).unwrap();
        for (m, e) in schema.entries().iter().enumerate() {
            assert_eq!(tape.shape(out.eps_hat[m]), &[30, e.dim]);
        }
        assert_eq!(out.param_vars.len(), model.params().len());
    }

    #[test]
    fn batch_elements_are_independent() {
        // swapping two sequences in the batch swaps their outputs exactly
        let schema = ModalitySchema::desk_default(8);
        let model: DenoiserModel<f32> = DenoiserModel::init(tiny_cfg(), schema.clone(), 3).unwrap();
        let batch = random_batch(2, 5, &schema, 4);

        let swapped = Batch {
            b: 2,
            t: 5,
            modal: batch
                .modal
                .iter()
                .map(|x| {
                    let d = x.shape()[1];
                    let mut data = x.data()[5 * d..].to_vec();
                    data.extend_from_slice(&x.data()[..5 * d]);
                    Tensor::new(x.shape().to_vec(), data)
                })
                .collect(),
            levels: {
                let half = 5 * schema.len();
                let mut l = batch.levels[half..].to_vec();
                l.extend_from_slice(&batch.levels[..half]);
                l
            },
        };

        let mut tape1 = Tape::new();
        let out1 = model.forward(&mut tape1, &batch).unwrap();
        let mut tape2 = Tape::new();
        let out2 = model.forward(&mut tape2, &swapped).unwrap();
        for m in 0..schema.len() {
            let d = schema.dim(m);
            let a = tape1.value(out1.eps_hat[m]);
            let b = tape2.value(out2.eps_hat[m]);
            assert_eq!(a[..5 * d], b[5 * d..], "modality {m} rows moved");
            assert_eq!(a[5 * d..], b[..5 * d], "modality {m} rows moved");
        }
    }

    #[test]
    fn level_change_perturbs_output() {
        let schema = ModalitySchema::desk_default(8);
        let model: DenoiserModel<f32> = DenoiserModel::init(tiny_cfg(), schema.clone(), 5).unwrap();
        let batch = random_batch(1, 10, &schema, 6);
        let mut changed = Batch {
            b: 1,
            t: 10,
            modal: batch.modal.iter().map(|t| Tensor::new(t.shape().to_vec(), t.data().to_vec())).collect(),
            levels: batch.levels.clone(),
        };
        changed.levels[3 * schema.len() + 2] = if batch.levels[3 * schema.len() + 2] == 500 { 501 } else { 500 };

        let mut t1 = Tape::new();
        let o1 = model.forward(&mut t1, &batch).unwrap();
        let mut t2 = Tape::new();
        let o2 = model.forward(&mut t2, &changed).unwrap();
        let diff: f32 = (0..schema.len())
            .map(|m| {
                t1.value(o1.eps_hat[m])
                    .iter()
                    .zip(t2.value(o2.eps_hat[m]))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max)
            })
            .fold(0.0f32, f32::max);
        assert!(diff > 0.0, "level change had no effect");
    }

    #[test]
    fn all_clean_matrix_gives_zero_loss() {
        let schema = ModalitySchema::desk_default(8);
        let model: DenoiserModel<f32> = DenoiserModel::init(tiny_cfg(), schema.clone(), 7).unwrap();
        let mut batch = random_batch(2, 6, &schema, 8);
        batch.levels.iter_mut().for_each(|l| *l = 0);
        let sched = DiffusionSchedule::default_train();
        let mut tape = Tape::new();
        let out = mdf_loss(&model, &sched, &mut tape, &batch, 9).unwrap();
        assert_eq!(tape.value(out.loss)[0], 0.0);
        assert_eq!(out.active_fraction, 0.0);
    }

    #[test]
    fn loss_matches_external_recomputation() {
        // rebuild the masked MSE from the forward outputs and the same
        // noise streams; the tape scalar must agree
        let schema = ModalitySchema::desk_default(8);
        let model: DenoiserModel<f32> = DenoiserModel::init(tiny_cfg(), schema.clone(), 10).unwrap();
        let batch = random_batch(2, 6, &schema, 11);
        let sched = DiffusionSchedule::default_train();
        let seed = 12;
        let mut tape = Tape::new();
        let out = mdf_loss(&model, &sched, &mut tape, &batch, seed).unwrap();
        let eps_hat = out.model_out.as_ref().unwrap();

        let rows = 12;
        let mut num = 0.0f64;
        let mut den = 0usize;
        for m in 0..schema.len() {
            let dim = schema.dim(m);
            let pred = tape.value(eps_hat.eps_hat[m]);
            for r in 0..rows {
                let k = batch.levels[r * schema.len() + m];
                if k == 0 {
                    continue;
                }
                let mut rs = rng::stream(seed, schema.name(m), r as u64);
                for j in 0..dim {
                    let e = rs.sample::<f64, _>(StandardNormal) as f32;
                    let d = (pred[r * dim + j] - e) as f64;
                    num += d * d;
                }
                den += dim;
            }
        }
        let want = num / den as f64;
        let got = tape.value(out.loss)[0] as f64;
        assert!((got - want).abs() / want.max(1e-9) < 1e-4, "{got} vs {want}");
    }

    #[test]
    fn initial_loss_sits_at_unit_noise_baseline() {
        let schema = ModalitySchema::desk_default(16);
        let model: DenoiserModel<f32> = DenoiserModel::init(tiny_cfg(), schema.clone(), 20).unwrap();
        let batch = random_batch(8, 10, &schema, 21);
        let sched = DiffusionSchedule::default_train();
        let mut tape = Tape::new();
        let out = mdf_loss(&model, &sched, &mut tape, &batch, 22).unwrap();
        let loss = tape.value(out.loss)[0];
        assert!((0.8..1.2).contains(&loss), "initial loss {loss}");
    }

    #[test]
    fn forward_rejects_capacity_and_schema_mismatch() {
        let schema = ModalitySchema::desk_default(8);
        let model: DenoiserModel<f32> = DenoiserModel::init(tiny_cfg(), schema.clone(), 30).unwrap();
        let long = random_batch(1, 11, &schema, 31);
        let mut tape = Tape::new();
        assert!(matches!(model.forward(&mut tape, &long), Err(MdfError::Config(_))));

        let mut bad = random_batch(1, 5, &schema, 32);
        bad.modal.pop();
        assert!(matches!(model.forward(&mut tape, &bad), Err(MdfError::Config(_))));

        let mut overlevel = random_batch(1, 5, &schema, 33);
        overlevel.levels[0] = 1001;
        assert!(matches!(model.forward(&mut tape, &overlevel), Err(MdfError::Level(_))));
    }
}
