//! End-to-end training smoke on generated trajectories: the default model,
//! tokenized through freshly initialized codecs, must start near unit loss
//! and halve it within 200 steps.

use mdf_core::codec::{CodecConfig, PointSet, SetCodec};
use mdf_core::data::{compute_norm_stats, file_schema, Dataset, DatasetHeader};
use mdf_core::train::{tokenize_dataset, train, TrainConfig};
use mdf_core::world::{run_expert_episode, POINT_SET_N};

fn build_dataset(n: usize, seed: u64) -> Dataset {
    let records: Vec<_> = (0..n).map(|i| run_expert_episode(seed, i as u64).record).collect();
    let header = DatasetHeader {
        schema: file_schema(),
        t: records[0].t_len(),
        n_traj: records.len(),
        point_set_n: POINT_SET_N,
        norm_stats: compute_norm_stats(&records).unwrap(),
    };
    Dataset { header, records }
}

#[test]
fn loss_halves_in_two_hundred_steps() {
    let ds = build_dataset(32, 17);
    let cfg = CodecConfig { set_size: POINT_SET_N, ..CodecConfig::default() };
    let mut full = SetCodec::<f32>::init(cfg.clone(), 1).unwrap();
    let mut partial = SetCodec::<f32>::init(cfg, 2).unwrap();
    let full_sets: Vec<PointSet> = ds.records.iter().flat_map(|r| r.full.clone()).collect();
    let partial_sets: Vec<PointSet> = ds.records.iter().flat_map(|r| r.partial.clone()).collect();
    full.set_coord_stats_from(&full_sets).unwrap();
    partial.set_coord_stats_from(&partial_sets).unwrap();

    let tok = tokenize_dataset(&ds, &full, &partial).unwrap();
    let dir = std::env::temp_dir().join(format!("mdf-train-smoke-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);

    let cfg = TrainConfig { steps: 200, log_every: 0, checkpoint_every: 0, ..TrainConfig::default() };
    let out = train(&cfg, &tok, &dir, None).unwrap();

    let head: f64 = out.curve[..10].iter().map(|c| c.loss).sum::<f64>() / 10.0;
    let tail: f64 = out.curve[190..].iter().map(|c| c.loss).sum::<f64>() / 10.0;
    assert!((0.8..=1.2).contains(&head), "early loss average {head:.4} not near 1");
    assert!(tail < 0.5 * head, "loss fell only {head:.4} -> {tail:.4}");
    assert!(out.final_checkpoint.exists());
    std::fs::remove_dir_all(&dir).unwrap();
}
