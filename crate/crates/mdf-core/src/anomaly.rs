//! Fine-grained anomaly localization over the time–modality grid.
//!
//! The score for a single entry (t, m) corrupts only that entry to a noise
//! level i, runs the denoiser once, and measures — restricted to the entry —
//! how far the model's reverse step strays from the true forward posterior.
//! A trajectory that matches the training distribution lets the model strip
//! the injected noise, so the KL stays small; an out-of-distribution entry
//! leaves a gap. Sweeping the score over every grid entry localizes an
//! anomaly in both time and modality; the global variant corrupts the whole
//! grid at once and reads per-entry divergences from a single pass.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mdf_numerics::real::{cast, Real};
use mdf_numerics::Tensor;

use crate::error::{MdfError, Result};
use crate::infer::{InferenceContext, NoisePredictor};
use crate::model::Batch;
use crate::noise::NoiseMatrix;
use crate::rng;
use crate::schedule::{
    forward_corrupt, gaussian_kl, model_reverse_moments, posterior_moments, DiffusionSchedule,
};
use crate::schema::ModalitySchema;
use crate::train::tokenize_trajectory;
use crate::world::{inject_anomaly, CorruptionKind, TrajectoryRecord};

/// Default corruption levels: K/10, K/4, K/2 for K = 1000. Low-to-mid levels
/// keep the single-step posterior informative about the clean value; at high
/// levels every trajectory looks like noise and the score goes blind.
pub const DEFAULT_LEVELS: [usize; 3] = [100, 250, 500];

/// Corruption draws per (entry, level); trades score variance against the
/// T·M·|levels| sweep cost.
pub const DEFAULT_SAMPLES: usize = 8;

fn validate_scoring(levels: &[usize], n_samples: usize, k_max: usize) -> Result<()> {
    if levels.is_empty() {
        return Err(MdfError::Parameter("corruption level set is empty".into()));
    }
    for &i in levels {
        if i == 0 || i > k_max {
            return Err(MdfError::Parameter(format!(
                "corruption level {i} outside 1..={k_max}"
            )));
        }
    }
    if n_samples == 0 {
        return Err(MdfError::Parameter("n_samples must be at least 1".into()));
    }
    Ok(())
}

fn validate_seq<T: Real>(seq: &[Tensor<T>], schema: &ModalitySchema) -> Result<usize> {
    if seq.len() != schema.len() {
        return Err(MdfError::Input(format!(
            "sequence has {} modalities, schema wants {}",
            seq.len(),
            schema.len()
        )));
    }
    let t_len = seq[0].shape()[0];
    for (m, x) in seq.iter().enumerate() {
        if x.shape() != [t_len, schema.dim(m)] {
            return Err(MdfError::Input(format!(
                "latent tensor for {} has shape {:?}, want {:?}",
                schema.name(m),
                x.shape(),
                [t_len, schema.dim(m)]
            )));
        }
    }
    Ok(t_len)
}

/// Corrupt exactly entry (t, m) of `seq` to `level`. Every other entry is
/// carried over bitwise at level 0. Returns the batch and the corrupted row.
fn corrupted_batch<T: Real>(
    seq: &[Tensor<T>],
    schema: &ModalitySchema,
    t: usize,
    m: usize,
    level: usize,
    sched: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(Batch<T>, Vec<T>)> {
    let t_len = seq[0].shape()[0];
    let dim = schema.dim(m);
    let row = t * dim..(t + 1) * dim;
    let noise: Vec<T> =
        (0..dim).map(|_| cast::<T>(rng.sample::<f64, _>(StandardNormal))).collect();
    let xk = forward_corrupt(&seq[m].data()[row.clone()], level, sched, &noise)?;
    let mut modal: Vec<Tensor<T>> = seq.to_vec();
    modal[m].data_mut()[row].copy_from_slice(&xk);
    let mut matrix = NoiseMatrix::filled(t_len, schema.len(), 0);
    matrix.set(t, m, level);
    Ok((Batch::single(modal, &matrix), xk))
}

fn entry_kl<T: Real>(
    x0_row: &[T],
    xk_row: &[T],
    eps_row: &[T],
    level: usize,
    sched: &DiffusionSchedule,
) -> Result<f64> {
    let q = posterior_moments(x0_row, xk_row, level, sched)?;
    let p = model_reverse_moments(xk_row, eps_row, level, sched)?;
    gaussian_kl(&q, &p)
}

/// Anomaly score for one grid entry: corrupt (t, m) to each level in
/// `levels`, `n_samples` fresh draws per level, and average the KL between
/// the true single-entry posterior and the model's reverse step there. All
/// other entries stay clean at level 0.
pub fn local_kl_score<T: Real, P: NoisePredictor<T>>(
    predictor: &P,
    seq: &[Tensor<T>],
    t: usize,
    m: usize,
    levels: &[usize],
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let schema = predictor.schema();
    let t_len = validate_seq(seq, schema)?;
    validate_scoring(levels, n_samples, predictor.k_max())?;
    if t >= t_len || m >= schema.len() {
        return Err(MdfError::Parameter(format!(
            "entry ({t},{m}) outside {t_len}x{} grid",
            schema.len()
        )));
    }
    let sched = DiffusionSchedule::square_cosine(predictor.k_max(), 0.008, 0.999)?;
    let dim = schema.dim(m);
    let row = t * dim..(t + 1) * dim;
    let mut total = 0.0;
    for &level in levels {
        for _ in 0..n_samples {
            let (batch, xk) = corrupted_batch(seq, schema, t, m, level, &sched, rng)?;
            let eps = predictor.predict(&batch)?;
            if eps[m].len() != t_len * dim {
                return Err(MdfError::Numeric(format!(
                    "predictor returned {} values for {}, want {}",
                    eps[m].len(),
                    schema.name(m),
                    t_len * dim
                )));
            }
            total += entry_kl(&seq[m].data()[row.clone()], &xk, &eps[m][row.clone()], level, &sched)?;
        }
    }
    Ok(total / (levels.len() * n_samples) as f64)
}

/// Per-trajectory localization result: one nonnegative score per grid entry
/// and the argmax, with exact ties broken toward the smallest t, then m.
#[derive(Clone, Debug, Serialize)]
pub struct AnomalyReport {
    pub t_len: usize,
    pub m_len: usize,
    /// Row-major (t·M + m) KL scores.
    pub scores: Vec<f64>,
    pub argmax: (usize, usize),
}

impl AnomalyReport {
    fn from_scores(t_len: usize, m_len: usize, scores: Vec<f64>) -> Self {
        debug_assert_eq!(scores.len(), t_len * m_len);
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        AnomalyReport { t_len, m_len, scores, argmax: (best / m_len, best % m_len) }
    }

    pub fn score(&self, t: usize, m: usize) -> f64 {
        self.scores[t * self.m_len + m]
    }

    pub fn max_score(&self) -> f64 {
        self.score(self.argmax.0, self.argmax.1)
    }

    /// Gap between the winning score and the runner-up; 0 for a 1×1 grid.
    pub fn margin(&self) -> f64 {
        let best = self.argmax.0 * self.m_len + self.argmax.1;
        self.scores
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best)
            .map(|(_, &s)| s)
            .fold(None::<f64>, |acc, s| Some(acc.map_or(s, |a| a.max(s))))
            .map_or(0.0, |second| self.scores[best] - second)
    }
}

/// Score every entry of the T×M grid independently and return the argmax.
/// Entries are scored on independent RNG streams forked off `rng`, so the
/// result is bitwise identical for any worker-thread count.
pub fn sweep_localize<T: Real, P: NoisePredictor<T> + Sync>(
    predictor: &P,
    seq: &[Tensor<T>],
    levels: &[usize],
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AnomalyReport> {
    let schema = predictor.schema();
    let t_len = validate_seq(seq, schema)?;
    validate_scoring(levels, n_samples, predictor.k_max())?;
    let m_len = schema.len();
    let root: u64 = rng.gen();
    let scores = (0..t_len * m_len)
        .into_par_iter()
        .map(|i| {
            let mut erng = rng::stream(root, "entry", i as u64);
            local_kl_score(predictor, seq, i / m_len, i % m_len, levels, n_samples, &mut erng)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(AnomalyReport::from_scores(t_len, m_len, scores))
}

/// Baseline localizer: corrupt the whole grid to one level at a time, run a
/// single forward pass per draw, and read the per-entry KL off that pass.
/// Cheaper than the sweep by a factor of T·M, but every entry's divergence
/// is measured under fully-corrupted context.
pub fn global_localize<T: Real, P: NoisePredictor<T>>(
    predictor: &P,
    seq: &[Tensor<T>],
    levels: &[usize],
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<AnomalyReport> {
    let schema = predictor.schema();
    let t_len = validate_seq(seq, schema)?;
    validate_scoring(levels, n_samples, predictor.k_max())?;
    let m_len = schema.len();
    let sched = DiffusionSchedule::square_cosine(predictor.k_max(), 0.008, 0.999)?;
    let mut scores = vec![0.0; t_len * m_len];
    for &level in levels {
        for _ in 0..n_samples {
            // Noise draws in fixed (t, m, dim) order, as everywhere else.
            let mut modal: Vec<Tensor<T>> = seq.to_vec();
            for t in 0..t_len {
                for m in 0..m_len {
                    let dim = schema.dim(m);
                    let row = t * dim..(t + 1) * dim;
                    let noise: Vec<T> = (0..dim)
                        .map(|_| cast::<T>(rng.sample::<f64, _>(StandardNormal)))
                        .collect();
                    let xk = forward_corrupt(&seq[m].data()[row.clone()], level, &sched, &noise)?;
                    modal[m].data_mut()[row].copy_from_slice(&xk);
                }
            }
            let matrix = NoiseMatrix::filled(t_len, m_len, level);
            let batch = Batch::single(modal, &matrix);
            let eps = predictor.predict(&batch)?;
            for t in 0..t_len {
                for m in 0..m_len {
                    let dim = schema.dim(m);
                    let row = t * dim..(t + 1) * dim;
                    scores[t * m_len + m] += entry_kl(
                        &seq[m].data()[row.clone()],
                        &batch.modal[m].data()[row.clone()],
                        &eps[m][row],
                        level,
                        &sched,
                    )?;
                }
            }
        }
    }
    let norm = (levels.len() * n_samples) as f64;
    for s in &mut scores {
        *s /= norm;
    }
    Ok(AnomalyReport::from_scores(t_len, m_len, scores))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizeMethod {
    Sweep,
    Global,
}

/// Labeled-benchmark configuration. `cases_per_kind` corruptions are drawn
/// for each kind; record, timestep, and injection noise all derive from
/// `seed` and the case id, so runs are reproducible at any thread count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub cases_per_kind: usize,
    pub kinds: Vec<CorruptionKind>,
    pub method: LocalizeMethod,
    pub levels: Vec<usize>,
    pub n_samples: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            cases_per_kind: 256,
            kinds: vec![CorruptionKind::Force, CorruptionKind::PartialPc],
            method: LocalizeMethod::Sweep,
            levels: DEFAULT_LEVELS.to_vec(),
            n_samples: DEFAULT_SAMPLES,
            seed: 0,
        }
    }
}

/// One labeled benchmark case: where the corruption went in, where the
/// localizer pointed, and the entry scores backing a paired clean-vs-corrupt
/// comparison.
#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkCase {
    pub case_id: usize,
    pub corruption_type: String,
    pub true_t: usize,
    pub true_m: usize,
    pub pred_t: usize,
    pub pred_m: usize,
    pub score_max: f64,
    pub margin: f64,
    /// Grid score at the labeled entry on the corrupted trajectory.
    pub corrupt_entry_score: f64,
    /// Single-entry score at the same (t, m) on the uncorrupted trajectory.
    pub clean_entry_score: f64,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct BenchmarkMetrics {
    /// Fraction of cases with pred_t == true_t.
    pub time_acc: f64,
    /// Fraction with the exact (t, m) entry matched.
    pub timemod_acc: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkReport {
    pub cases: Vec<BenchmarkCase>,
    pub per_type: BTreeMap<String, BenchmarkMetrics>,
}

/// Time / Time-Mod accuracy per corruption type.
pub fn per_type_metrics(cases: &[BenchmarkCase]) -> BTreeMap<String, BenchmarkMetrics> {
    let mut buckets: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for c in cases {
        let b = buckets.entry(c.corruption_type.clone()).or_insert((0, 0, 0));
        b.0 += 1;
        b.1 += usize::from(c.pred_t == c.true_t);
        b.2 += usize::from(c.pred_t == c.true_t && c.pred_m == c.true_m);
    }
    buckets
        .into_iter()
        .map(|(k, (n, t, tm))| {
            (k, BenchmarkMetrics { time_acc: t as f64 / n as f64, timemod_acc: tm as f64 / n as f64 })
        })
        .collect()
}

/// Chance floor for the benchmark: predictions drawn uniformly over the grid
/// against uniform labels. Converges to 1/T time and 1/(T·M) time-mod.
pub fn random_argmax_control(t_len: usize, m_len: usize, n_cases: usize, seed: u64) -> BenchmarkMetrics {
    let mut rng = rng::stream(seed, "control", 0);
    let (mut hit_t, mut hit_tm) = (0usize, 0usize);
    for _ in 0..n_cases {
        let true_t = rng.gen_range(0..t_len);
        let true_m = rng.gen_range(0..m_len);
        let pred_t = rng.gen_range(0..t_len);
        let pred_m = rng.gen_range(0..m_len);
        hit_t += usize::from(pred_t == true_t);
        hit_tm += usize::from(pred_t == true_t && pred_m == true_m);
    }
    BenchmarkMetrics {
        time_acc: hit_t as f64 / n_cases as f64,
        timemod_acc: hit_tm as f64 / n_cases as f64,
    }
}

struct CaseDesc {
    case_id: usize,
    kind: CorruptionKind,
    rec_idx: usize,
    t_star: usize,
    corrupted: TrajectoryRecord,
}

/// Run the labeled localization benchmark: inject one corruption per case
/// into a clean recorded trajectory, localize it, and score the argmax
/// against the label. Cases run in parallel on per-case RNG streams.
pub fn benchmark_anomaly<T: Real>(
    ctx: &InferenceContext<T>,
    records: &[TrajectoryRecord],
    cfg: &BenchmarkConfig,
) -> Result<BenchmarkReport> {
    ctx.validate()?;
    if records.is_empty() {
        return Err(MdfError::Parameter("benchmark needs at least one clean trajectory".into()));
    }
    if cfg.cases_per_kind == 0 || cfg.kinds.is_empty() {
        return Err(MdfError::Parameter("benchmark needs kinds and at least one case each".into()));
    }
    let schema = ctx.model.schema();
    let t_len = ctx.model.cfg().t_max;
    validate_scoring(&cfg.levels, cfg.n_samples, ctx.model.cfg().k_max)?;
    let force_std = ctx.stats.force_std()?;

    // Lay out every case up front so the parallel stage is pure map.
    let mut descs = Vec::with_capacity(cfg.kinds.len() * cfg.cases_per_kind);
    for &kind in &cfg.kinds {
        for _ in 0..cfg.cases_per_kind {
            let case_id = descs.len();
            let mut crng = rng::stream(cfg.seed, "case", case_id as u64);
            let rec_idx = crng.gen_range(0..records.len());
            let t_star = crng.gen_range(0..t_len);
            let rec = &records[rec_idx];
            if rec.t_len() != t_len {
                return Err(MdfError::Input(format!(
                    "record {rec_idx} has {} frames, model window is {t_len}",
                    rec.t_len()
                )));
            }
            let mut corrupted = rec.clone();
            inject_anomaly(&mut corrupted, t_star, kind, force_std, &mut crng)?;
            descs.push(CaseDesc { case_id, kind, rec_idx, t_star, corrupted });
        }
    }

    // Clean latents, tokenized once per distinct record.
    let mut clean: BTreeMap<usize, Vec<Tensor<T>>> = BTreeMap::new();
    for d in &descs {
        if !clean.contains_key(&d.rec_idx) {
            let seq = tokenize_trajectory(
                &records[d.rec_idx],
                ctx.full_codec,
                ctx.partial_codec,
                schema,
                ctx.stats,
            )?;
            clean.insert(d.rec_idx, seq);
        }
    }

    let cases = descs
        .par_iter()
        .map(|d| {
            let seq = tokenize_trajectory(
                &d.corrupted,
                ctx.full_codec,
                ctx.partial_codec,
                schema,
                ctx.stats,
            )?;
            let mut lrng = rng::stream(cfg.seed, "local", d.case_id as u64);
            let report = match cfg.method {
                LocalizeMethod::Sweep => {
                    sweep_localize(ctx.model, &seq, &cfg.levels, cfg.n_samples, &mut lrng)?
                }
                LocalizeMethod::Global => {
                    global_localize(ctx.model, &seq, &cfg.levels, cfg.n_samples, &mut lrng)?
                }
            };
            let true_m = schema
                .index_of(d.kind.as_str())
                .ok_or_else(|| MdfError::Config(format!("schema lacks {}", d.kind.as_str())))?;
            let mut cleanrng = rng::stream(cfg.seed, "clean", d.case_id as u64);
            let clean_entry_score = local_kl_score(
                ctx.model,
                &clean[&d.rec_idx],
                d.t_star,
                true_m,
                &cfg.levels,
                cfg.n_samples,
                &mut cleanrng,
            )?;
            Ok(BenchmarkCase {
                case_id: d.case_id,
                corruption_type: d.kind.as_str().to_string(),
                true_t: d.t_star,
                true_m,
                pred_t: report.argmax.0,
                pred_m: report.argmax.1,
                score_max: report.max_score(),
                margin: report.margin(),
                corrupt_entry_score: report.score(d.t_star, true_m),
                clean_entry_score,
            })
        })
        .collect::<Result<Vec<BenchmarkCase>>>()?;

    let per_type = per_type_metrics(&cases);
    Ok(BenchmarkReport { cases, per_type })
}

pub fn write_benchmark_csv(report: &BenchmarkReport, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "case_id,corruption_type,true_t,true_m,pred_t,pred_m,score_max,margin")?;
    for c in &report.cases {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            c.case_id, c.corruption_type, c.true_t, c.true_m, c.pred_t, c.pred_m, c.score_max,
            c.margin
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::SetCodec;
    use crate::data::Dataset;
    use crate::model::DenoiserModel;
    use crate::test_util::{tempdir, tiny_model_cfg, toy_codecs, toy_dataset, OracleEps};
    use crate::train::{tokenize_dataset, TokenizedDataset};

    struct Fixture {
        model: DenoiserModel<f32>,
        full: SetCodec<f32>,
        partial: SetCodec<f32>,
        tok: TokenizedDataset<f32>,
        ds: Dataset,
    }

    fn fixture() -> Fixture {
        let ds = toy_dataset(4, 23);
        let (full, partial) = toy_codecs(8);
        let tok = tokenize_dataset(&ds, &full, &partial).unwrap();
        let model = DenoiserModel::<f32>::init(tiny_model_cfg(), tok.schema.clone(), 3).unwrap();
        Fixture { model, full, partial, tok, ds }
    }

    impl Fixture {
        fn ctx(&self) -> InferenceContext<'_, f32> {
            InferenceContext {
                model: &self.model,
                full_codec: &self.full,
                partial_codec: &self.partial,
                stats: &self.tok.stats,
            }
        }

        fn oracle(&self, i: usize) -> OracleEps {
            OracleEps {
                schema: self.tok.schema.clone(),
                sched: DiffusionSchedule::default_train(),
                x0: self.tok.seqs[i].iter().map(|t| t.data().to_vec()).collect(),
            }
        }
    }

    /// Predicts zero noise everywhere; its reverse mean has the closed form
    /// x_k/sqrt(alpha_k).
    struct ZeroEps {
        schema: ModalitySchema,
        k_max: usize,
    }

    impl NoisePredictor<f32> for ZeroEps {
        fn schema(&self) -> &ModalitySchema {
            &self.schema
        }

        fn k_max(&self) -> usize {
            self.k_max
        }

        fn predict(&self, batch: &Batch<f32>) -> Result<Vec<Vec<f32>>> {
            Ok((0..self.schema.len())
                .map(|m| vec![0.0; batch.modal[m].data().len()])
                .collect())
        }
    }

    #[test]
    fn oracle_scores_vanish_everywhere() {
        let f = fixture();
        let oracle = f.oracle(0);
        let seq = &f.tok.seqs[0];
        for &(t, m) in &[(0usize, 0usize), (3, 2), (9, 5)] {
            for &i in &DEFAULT_LEVELS {
                let mut rng = rng::stream(1, "oracle-local", (t * 10 + m) as u64);
                let s = local_kl_score(&oracle, seq, t, m, &[i], 2, &mut rng).unwrap();
                assert!(s <= 1e-6, "oracle score {s:.3e} at ({t},{m}) level {i}");
            }
        }
        let mut rng = rng::stream(1, "oracle-sweep", 0);
        let report = sweep_localize(&oracle, seq, &DEFAULT_LEVELS, 1, &mut rng).unwrap();
        assert!(report.scores.iter().all(|&s| (0.0..=1e-6).contains(&s)));
    }

    #[test]
    fn zero_denoiser_matches_the_closed_form() {
        let f = fixture();
        let seq = &f.tok.seqs[1];
        let zero = ZeroEps { schema: f.tok.schema.clone(), k_max: 1000 };
        let sched = DiffusionSchedule::default_train();
        let levels = [100usize, 250];
        let n_samples = 3;
        let (t, m) = (4usize, 2usize);
        let dim = f.tok.schema.dim(m);
        let x0 = &seq[m].data()[t * dim..(t + 1) * dim];

        let mut rng = rng::stream(7, "zero", 0);
        let got = local_kl_score(&zero, seq, t, m, &levels, n_samples, &mut rng).unwrap();

        // Replicate the draws and evaluate ||mu_q - x_k/sqrt(alpha)||^2 / (2 gamma)
        // from alpha_bar alone.
        let mut rng = rng::stream(7, "zero", 0);
        let mut want = 0.0;
        for &i in &levels {
            let (ab, ab_prev) = (sched.alpha_bar(i), sched.alpha_bar(i - 1));
            let alpha = ab / ab_prev;
            let beta = 1.0 - alpha;
            let gamma = (1.0 - ab_prev) / (1.0 - ab) * beta;
            for _ in 0..n_samples {
                let noise: Vec<f64> =
                    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let mut d2 = 0.0;
                for c in 0..dim {
                    let xk = ab.sqrt() * x0[c] as f64 + (1.0 - ab).sqrt() * noise[c];
                    let mu_q = (ab_prev.sqrt() * beta * x0[c] as f64
                        + alpha.sqrt() * (1.0 - ab_prev) * xk)
                        / (1.0 - ab);
                    let mu_p = xk / alpha.sqrt();
                    d2 += (mu_q - mu_p).powi(2);
                }
                want += d2 / (2.0 * gamma);
            }
        }
        want /= (levels.len() * n_samples) as f64;
        let rel = (got - want).abs() / want.max(1e-12);
        // f32 corruption vs this f64 replica; the score itself is O(1).
        assert!(rel <= 1e-4, "zero-denoiser score {got:.6e} vs closed form {want:.6e}");
        assert!(got > 0.0);
    }

    #[test]
    fn corruption_touches_exactly_one_entry() {
        let f = fixture();
        let seq = &f.tok.seqs[2];
        let schema = &f.tok.schema;
        let sched = DiffusionSchedule::default_train();
        let (t, m, level) = (6usize, 3usize, 250usize);
        let mut rng = rng::stream(3, "touch", 0);
        let (batch, xk) = corrupted_batch(seq, schema, t, m, level, &sched, &mut rng).unwrap();
        assert_eq!(batch.b, 1);
        for mm in 0..schema.len() {
            let dim = schema.dim(mm);
            for tt in 0..10 {
                let row = tt * dim..(tt + 1) * dim;
                let want_level = if (tt, mm) == (t, m) { level } else { 0 };
                assert_eq!(batch.levels[tt * schema.len() + mm], want_level);
                if (tt, mm) == (t, m) {
                    assert_eq!(&batch.modal[mm].data()[row], &xk[..]);
                    assert_ne!(&xk[..], &seq[mm].data()[t * dim..(t + 1) * dim]);
                } else {
                    assert_eq!(
                        &batch.modal[mm].data()[row.clone()],
                        &seq[mm].data()[row],
                        "entry ({tt},{mm}) was touched"
                    );
                }
            }
        }
    }

    #[test]
    fn scores_are_nonnegative_and_inputs_are_checked() {
        let f = fixture();
        let seq = &f.tok.seqs[0];
        let mut rng = rng::stream(5, "nonneg", 0);
        for &(t, m) in &[(0usize, 4usize), (7, 1)] {
            let s = local_kl_score(&f.model, seq, t, m, &[100], 1, &mut rng).unwrap();
            assert!(s >= 0.0 && s.is_finite(), "score {s} at ({t},{m})");
        }
        let empty: &[usize] = &[];
        for bad in [
            local_kl_score(&f.model, seq, 0, 0, empty, 1, &mut rng),
            local_kl_score(&f.model, seq, 0, 0, &[0], 1, &mut rng),
            local_kl_score(&f.model, seq, 0, 0, &[1001], 1, &mut rng),
            local_kl_score(&f.model, seq, 0, 0, &[100], 0, &mut rng),
            local_kl_score(&f.model, seq, 10, 0, &[100], 1, &mut rng),
        ] {
            assert!(matches!(bad, Err(MdfError::Parameter(_))), "{bad:?}");
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_the_first_entry() {
        let mut scores = vec![0.25; 12];
        scores[1 * 6 + 3] = 0.9;
        scores[1 * 6 + 5] = 0.9;
        let r = AnomalyReport::from_scores(2, 6, scores);
        assert_eq!(r.argmax, (1, 3));
        assert!((r.margin() - 0.0).abs() < 1e-15, "tied max has zero margin");
        assert_eq!(r.max_score(), 0.9);

        let flat = AnomalyReport::from_scores(2, 6, vec![1.0; 12]);
        assert_eq!(flat.argmax, (0, 0));

        let mut scores = vec![0.0; 12];
        scores[2] = 3.0;
        scores[7] = 1.0;
        let r = AnomalyReport::from_scores(2, 6, scores);
        assert_eq!(r.argmax, (0, 2));
        assert!((r.margin() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sweep_is_deterministic_for_any_thread_count() {
        let f = fixture();
        let seq = &f.tok.seqs[1];
        let run = || {
            let mut rng = rng::stream(11, "sweep", 0);
            sweep_localize(&f.model, seq, &[50], 1, &mut rng).unwrap()
        };
        let a = run();
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = single.install(run);
        assert_eq!(a.scores, b.scores, "sweep must not depend on the pool size");
        assert_eq!(a.argmax, b.argmax);
        assert_eq!(a.t_len, 10);
        assert_eq!(a.m_len, 6);
    }

    #[test]
    fn global_reads_every_entry_from_one_pass() {
        let f = fixture();
        let seq = &f.tok.seqs[3];
        let mut rng = rng::stream(13, "global", 0);
        let a = global_localize(&f.model, seq, &[100, 250], 2, &mut rng).unwrap();
        assert_eq!(a.scores.len(), 60);
        assert!(a.scores.iter().all(|&s| s >= 0.0 && s.is_finite()));
        let best = a.scores.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(a.max_score(), best);

        let mut rng = rng::stream(13, "global", 0);
        let b = global_localize(&f.model, seq, &[100, 250], 2, &mut rng).unwrap();
        assert_eq!(a.scores, b.scores);

        // The oracle stays exact under full-grid corruption too.
        let oracle = f.oracle(3);
        let mut rng = rng::stream(13, "global-oracle", 0);
        let r = global_localize(&oracle, seq, &[100], 1, &mut rng).unwrap();
        assert!(r.scores.iter().all(|&s| s <= 1e-6));
    }

    #[test]
    fn benchmark_labels_cases_and_writes_the_csv() {
        let f = fixture();
        let cfg = BenchmarkConfig {
            cases_per_kind: 2,
            levels: vec![10],
            n_samples: 1,
            seed: 9,
            ..BenchmarkConfig::default()
        };
        let report = benchmark_anomaly(&f.ctx(), &f.ds.records, &cfg).unwrap();
        assert_eq!(report.cases.len(), 4);
        let schema = f.model.schema();
        for (i, c) in report.cases.iter().enumerate() {
            assert_eq!(c.case_id, i);
            let want_kind = if i < 2 { "force" } else { "partial_pc" };
            assert_eq!(c.corruption_type, want_kind);
            assert_eq!(c.true_m, schema.index_of(want_kind).unwrap());
            assert!(c.true_t < 10 && c.pred_t < 10 && c.pred_m < 6);
            assert!(c.score_max >= c.corrupt_entry_score);
            assert!(c.margin >= 0.0 && c.clean_entry_score >= 0.0);
        }
        assert_eq!(report.per_type.len(), 2);
        for m in report.per_type.values() {
            assert!((0.0..=1.0).contains(&m.time_acc));
            assert!(m.timemod_acc <= m.time_acc);
        }

        let again = benchmark_anomaly(&f.ctx(), &f.ds.records, &cfg).unwrap();
        for (a, b) in report.cases.iter().zip(&again.cases) {
            assert_eq!((a.pred_t, a.pred_m), (b.pred_t, b.pred_m));
            assert_eq!(a.score_max, b.score_max);
            assert_eq!(a.clean_entry_score, b.clean_entry_score);
        }

        let dir = tempdir("anomaly-csv");
        let path = dir.join("bench.csv");
        write_benchmark_csv(&report, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[0], "case_id,corruption_type,true_t,true_m,pred_t,pred_m,score_max,margin");
        assert!(lines[1].starts_with("0,force,"));
        assert_eq!(lines[1].split(',').count(), 8);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn perfect_predictions_score_one_and_chance_sits_at_the_floor() {
        let cases: Vec<BenchmarkCase> = (0..10)
            .map(|i| BenchmarkCase {
                case_id: i,
                corruption_type: "force".into(),
                true_t: i % 10,
                true_m: 2,
                pred_t: i % 10,
                pred_m: 2,
                score_max: 1.0,
                margin: 0.5,
                corrupt_entry_score: 1.0,
                clean_entry_score: 0.1,
            })
            .collect();
        let m = per_type_metrics(&cases);
        assert_eq!(m["force"].time_acc, 1.0);
        assert_eq!(m["force"].timemod_acc, 1.0);

        let ctrl = random_argmax_control(10, 6, 50_000, 0);
        assert!((ctrl.time_acc - 0.1).abs() < 0.01, "time control {:.4}", ctrl.time_acc);
        assert!(
            (ctrl.timemod_acc - 1.0 / 60.0).abs() < 0.005,
            "time-mod control {:.4}",
            ctrl.timemod_acc
        );
    }
}
