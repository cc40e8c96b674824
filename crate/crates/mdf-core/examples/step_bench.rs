//! Wall-clock check on one full training step at production size.

use mdf_core::model::{mdf_loss, Batch, DenoiserModel, ModelConfig};
use mdf_core::noise::sample_training_matrix;
use mdf_core::rng;
use mdf_core::schedule::DiffusionSchedule;
use mdf_core::schema::ModalitySchema;
use mdf_numerics::{AdamParams, AdamState, Tape, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

fn main() {
    let schema = ModalitySchema::desk_default(16);
    let cfg = ModelConfig::default();
    let mut model: DenoiserModel<f32> = DenoiserModel::init(cfg, schema.clone(), 1).unwrap();
    let sched = DiffusionSchedule::default_train();
    let n_params: usize = model.params().iter().map(|p| p.numel()).sum();
    println!("params: {n_params}");

    let (b, t) = (64usize, 10usize);
    let rows = b * t;
    let mut r = rng::stream(0, "bench", 0);
    let modal: Vec<Tensor<f32>> = schema
        .entries()
        .iter()
        .map(|e| {
            let data: Vec<f32> =
                (0..rows * e.dim).map(|_| r.sample::<f64, _>(StandardNormal) as f32).collect();
            Tensor::new(vec![rows, e.dim], data)
        })
        .collect();
    let mut levels = Vec::new();
    for _ in 0..b {
        levels.extend_from_slice(sample_training_matrix(t, schema.len(), 1000, &mut r).levels());
    }
    let batch = Batch { b, t, modal, levels };

    let params = model.params();
    let mut adam = AdamState::new(&params);
    drop(params);
    let ap = AdamParams { lr: 5e-4, clip_global_norm: Some(1.0), ..AdamParams::default() };

    let steps = 20;
    let (mut t_loss, mut t_back, mut t_adam) = (0.0f64, 0.0f64, 0.0f64);
    let t0 = Instant::now();
    for step in 0..steps {
        let s0 = Instant::now();
        let mut tape = Tape::new();
        let out = mdf_loss(&model, &sched, &mut tape, &batch, step).unwrap();
        let s1 = Instant::now();
        tape.backward(out.loss);
        let s2 = Instant::now();
        let mo = out.model_out.unwrap();
        let mut grads: Vec<Vec<f32>> = mo
            .param_vars
            .iter()
            .map(|&v| tape.grad(v).expect("param grad").to_vec())
            .collect();
        let mut pm = model.params_mut();
        adam.step(&ap, &mut pm, &mut grads);
        let s3 = Instant::now();
        t_loss += (s1 - s0).as_secs_f64();
        t_back += (s2 - s1).as_secs_f64();
        t_adam += (s3 - s2).as_secs_f64();
        if step == 0 {
            println!("loss at step 0: {}", tape.value(out.loss)[0]);
        }
    }
    let dt = t0.elapsed().as_secs_f64();
    let per = |t: f64| t / steps as f64 * 1e3;
    println!(
        "forward+corrupt {:.1} ms, backward {:.1} ms, grads+adam {:.1} ms",
        per(t_loss),
        per(t_back),
        per(t_adam)
    );
    println!("{:.1} ms/step -> {:.1} min for 50k steps", dt / steps as f64 * 1e3, dt / steps as f64 * 50_000.0 / 60.0);
}
