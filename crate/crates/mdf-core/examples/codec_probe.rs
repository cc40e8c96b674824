//! Scratch probe for codec pretraining dynamics (not part of the test suite).

use mdf_core::codec::{chamfer, codec_loss, CodecConfig, PointSet, SetCodec};
use mdf_core::rng;
use mdf_numerics::{AdamParams, AdamState, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn circle(rng: &mut ChaCha8Rng) -> PointSet {
    let pts = (0..64)
        .map(|_| {
            let a = rng.gen_range(0.0..std::f32::consts::TAU);
            [
                0.5 + 0.3 * a.cos() + rng.gen_range(-0.01..0.01f32),
                0.5 + 0.3 * a.sin() + rng.gen_range(-0.01..0.01f32),
            ]
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

fn eval(codec: &SetCodec<f32>, zc: &[Vec<f32>], zs: &[Vec<f32>], ddim_steps: usize) {
    let ref_c = circle(&mut ChaCha8Rng::seed_from_u64(900));
    let ref_s = square(&mut ChaCha8Rng::seed_from_u64(901));
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut rt_sum = 0.0f64;
    for (zz, truth) in [(zc, 0u8), (zs, 1u8)] {
        let decoded = codec.decode_batch(zz, ddim_steps, 77).unwrap();
        for d in &decoded {
            let dc = chamfer(d, &ref_c).unwrap();
            let ds = chamfer(d, &ref_s).unwrap();
            correct += usize::from(u8::from(ds < dc) == truth);
            total += 1;
            rt_sum += if truth == 0 { dc } else { ds };
        }
    }
    println!(
        "    ddim {ddim_steps:3}: acc {:.3} mean same-class chamfer {:.5} (cross {:.5})",
        correct as f64 / total as f64,
        rt_sum / total as f64,
        chamfer(&ref_c, &ref_s).unwrap()
    );
}

fn main() {
    let mut r = ChaCha8Rng::seed_from_u64(42);
    let mut train = Vec::new();
    for _ in 0..200 {
        train.push(circle(&mut r));
        train.push(square(&mut r));
    }
    let probe_c: Vec<PointSet> = (0..25).map(|_| circle(&mut r)).collect();
    let probe_s: Vec<PointSet> = (0..25).map(|_| square(&mut r)).collect();

    let mut codec = SetCodec::<f32>::init(CodecConfig::default(), 5).unwrap();
    codec.set_coord_stats_from(&train).unwrap();
    let ap = AdamParams { lr: 1e-3, clip_global_norm: Some(1.0), ..AdamParams::default() };
    let mut adam = AdamState::new(&codec.params());

    for step in 0..5000usize {
        let mut br = rng::stream(5, "codec-batch", step as u64);
        let batch: Vec<PointSet> =
            (0..32).map(|_| train[br.gen_range(0..train.len())].clone()).collect();
        let mut tape = Tape::new();
        let out = codec_loss(
            &codec,
            &mut tape,
            &batch,
            rng::derive_seed(5, "codec-noise", step as u64),
        )
        .unwrap();
        let loss = tape.value(out.loss)[0];
        tape.backward(out.loss);
        let mut grads: Vec<Vec<f32>> = out
            .param_vars
            .iter()
            .map(|&v| tape.grad(v).expect("grad").to_vec())
            .collect();
        let mut pm = codec.params_mut();
        adam.step(&ap, &mut pm, &mut grads);
        drop(pm);

        if [600, 1200, 2500, 4999].contains(&step) {
            let zc = codec.encode_batch(&probe_c).unwrap();
            let zs = codec.encode_batch(&probe_s).unwrap();
            println!("step {step:4} loss {loss:.4}");
            eval(&codec, &zc, &zs, 25);
            eval(&codec, &zc, &zs, 50);
        }
    }
}
