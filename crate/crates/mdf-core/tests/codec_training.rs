//! Short end-to-end pretraining run on a two-class synthetic shape set:
//! the loss must fall, and the frozen codec must separate the classes well
//! enough for a nearest-centroid Chamfer classifier on decoded sets.

use mdf_core::codec::{
    chamfer, pretrain_codec, round_trip_chamfer, CodecConfig, CodecTrainConfig, PointSet,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn circle(rng: &mut ChaCha8Rng) -> PointSet {
    let pts = (0..64)
        .map(|_| {
            let a = rng.gen_range(0.0..std::f32::consts::TAU);
            let jx: f32 = rng.gen_range(-0.01..0.01);
            let jy: f32 = rng.gen_range(-0.01..0.01);
            [0.5 + 0.3 * a.cos() + jx, 0.5 + 0.3 * a.sin() + jy]
        })
        .collect();
    PointSet::dense(pts).unwrap()
}

fn square(rng: &mut ChaCha8Rng) -> PointSet {
    let pts = (0..64)
        .map(|_| {
            let u: f32 = rng.gen_range(-0.25..0.25);
            let side = rng.gen_range(0..4u8);
            let j: f32 = rng.gen_range(-0.01..0.01);
            match side {
                0 => [0.5 + u, 0.25 + j],
                1 => [0.5 + u, 0.75 + j],
                2 => [0.25 + j, 0.5 + u],
                _ => [0.75 + j, 0.5 + u],
            }
        })
        .collect();
    PointSet::dense(pts).unwrap()
}

#[test]
fn short_pretraining_learns_the_shape_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut train = Vec::new();
    for _ in 0..200 {
        train.push(circle(&mut rng));
        train.push(square(&mut rng));
    }
    let held_circle: Vec<PointSet> = (0..50).map(|_| circle(&mut rng)).collect();
    let held_square: Vec<PointSet> = (0..50).map(|_| square(&mut rng)).collect();

    let tc = CodecTrainConfig { steps: 2500, batch_size: 32, lr: 1e-3, seed: 5 };
    let out = pretrain_codec::<f32>(&train, CodecConfig::default(), &tc).unwrap();
    let codec = out.codec;

    let head: f64 =
        out.curve[..20].iter().map(|&(_, l)| l).sum::<f64>() / 20.0;
    let tail: f64 =
        out.curve[out.curve.len() - 20..].iter().map(|&(_, l)| l).sum::<f64>() / 20.0;
    assert!(
        tail <= 0.5 * head,
        "loss fell only from {head:.4} to {tail:.4} over {} steps",
        tc.steps
    );

    // class means live apart in latent space
    let zc = codec.encode_batch(&held_circle).unwrap();
    let zs = codec.encode_batch(&held_square).unwrap();
    let mean = |zs: &[Vec<f32>]| -> Vec<f32> {
        let mut m = vec![0.0; zs[0].len()];
        for z in zs {
            for (mi, &v) in m.iter_mut().zip(z) {
                *mi += v / zs.len() as f32;
            }
        }
        m
    };
    let (mc, ms) = (mean(&zc), mean(&zs));
    let gap: f32 = mc.iter().zip(&ms).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
    assert!(gap > 0.1, "class latent means collapse: distance {gap}");

    // decoded sets are recognizable by nearest-centroid Chamfer
    let ref_circle = circle(&mut ChaCha8Rng::seed_from_u64(900));
    let ref_square = square(&mut ChaCha8Rng::seed_from_u64(901));
    let mut correct = 0usize;
    let mut total = 0usize;
    for (zs_class, truth) in [(&zc, 0u8), (&zs, 1u8)] {
        let decoded = codec.decode_batch(zs_class, 25, 77).unwrap();
        for d in &decoded {
            let dc = chamfer(d, &ref_circle).unwrap();
            let ds = chamfer(d, &ref_square).unwrap();
            let pred = u8::from(ds < dc);
            correct += usize::from(pred == truth);
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc >= 0.95, "nearest-centroid accuracy {acc:.2} below 0.95");

    // reconstruction error stays below the distance separating the classes
    let rt = round_trip_chamfer(&codec, &held_circle, 25, 3).unwrap();
    let mean_rt: f64 = rt.iter().sum::<f64>() / rt.len() as f64;
    let cross = chamfer(&ref_circle, &ref_square).unwrap();
    assert!(
        mean_rt < cross,
        "round-trip chamfer {mean_rt:.5} not below the class gap {cross:.5}"
    );
}
