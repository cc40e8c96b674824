//! Finite-difference gradient verification.
//!
//! Checks run the function under test in f64 and compare analytic gradients
//! against central differences with h = 1e-3.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative max-abs error between analytic and numerical gradients:
/// ||a - n||_inf / max(||a||_inf, ||n||_inf, 1e-12).
pub fn rel_error(analytic: &[f64], numerical: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numerical.len(), "rel_error: length mismatch");
    let mut diff: f64 = 0.0;
    let mut na: f64 = 0.0;
    let mut nn: f64 = 0.0;
    for (&a, &n) in analytic.iter().zip(numerical) {
        diff = diff.max((a - n).abs());
        na = na.max(a.abs());
        nn = nn.max(n.abs());
    }
    diff / na.max(nn).max(1e-12)
}

/// Central-difference gradient of a scalar-valued function at `x`.
pub fn numerical_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xs = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Convenience wrapper: numerical grad with h=1e-3, then relative error
/// against `analytic`.
pub fn check_grad<F>(f: F, x: &[f64], analytic: &[f64]) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let num = numerical_grad(f, x, 1e-3);
    rel_error(analytic, &num)
}

#[derive(Debug)]
pub struct OpCheck {
    pub name: &'static str,
    pub rel_err: f64,
}

/// Small deterministic generator for check inputs (no external RNG needed).
fn lcg_values(n: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            // top 24 bits -> (-1, 1)
            ((state >> 40) as f64 / (1u64 << 24) as f64) * 2.0 - 1.0
        })
        .collect()
}

/// Check one tape construction against central differences. The loss is
/// sum(out^2) so gradients depend on the inputs. Returns the worst relative
/// error over all inputs.
fn run_check<F>(name: &'static str, shapes: &[&[usize]], seed: u64, build: F) -> OpCheck
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let total: usize = sizes.iter().sum();
    let flat = lcg_values(total, seed);

    let eval = |flat: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let mut tape: Tape<f64> = Tape::new();
        let mut leaves = Vec::with_capacity(shapes.len());
        let mut off = 0usize;
        for (s, &n) in shapes.iter().zip(&sizes) {
            let t = Tensor::new(s.to_vec(), flat[off..off + n].to_vec()).with_grad();
            leaves.push(tape.leaf(&t));
            off += n;
        }
        let out = build(&mut tape, &leaves);
        let sq = tape.mul(out, out);
        let loss = tape.sum_all(sq);
        let lv = tape.value(loss)[0];
        if !want_grad {
            return (lv, Vec::new());
        }
        tape.backward(loss);
        let mut g = Vec::with_capacity(total);
        for &leaf in &leaves {
            g.extend_from_slice(tape.grad(leaf).expect("leaf gradient missing"));
        }
        (lv, g)
    };

    let (_, analytic) = eval(&flat, true);
    let numerical = numerical_grad(|x| eval(x, false).0, &flat, 1e-3);
    OpCheck { name, rel_err: rel_error(&analytic, &numerical) }
}

/// Gradient-check every differentiable tape operation on random small
/// shapes. Callers assert on the returned relative errors.
pub fn tape_op_gradchecks() -> Vec<OpCheck> {
    let mut out = Vec::new();
    out.push(run_check("add", &[&[3, 4], &[3, 4]], 1, |t, v| t.add(v[0], v[1])));
    out.push(run_check("sub", &[&[3, 4], &[3, 4]], 2, |t, v| t.sub(v[0], v[1])));
    out.push(run_check("mul", &[&[3, 4], &[3, 4]], 3, |t, v| t.mul(v[0], v[1])));
    out.push(run_check("scale", &[&[5]], 4, |t, v| t.scale(v[0], 1.7)));
    out.push(run_check("add_bias", &[&[4, 3], &[3]], 5, |t, v| t.add_bias(v[0], v[1])));
    out.push(run_check("gelu", &[&[2, 7]], 6, |t, v| t.gelu(v[0])));
    out.push(run_check("matmul", &[&[4, 5], &[5, 3]], 7, |t, v| t.matmul(v[0], v[1])));
    out.push(run_check("layer_norm", &[&[3, 6], &[6], &[6]], 8, |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    }));
    out.push(run_check(
        "softmax_attention",
        &[&[1, 2, 3, 4], &[1, 2, 3, 4], &[1, 2, 3, 4]],
        9,
        |t, v| t.softmax_attention(v[0], v[1], v[2], None),
    ));
    out.push(run_check(
        "softmax_attention_masked",
        &[&[1, 2, 3, 4], &[1, 2, 3, 4], &[1, 2, 3, 4]],
        10,
        |t, v| {
            let m = Tensor::new(
                vec![3, 3],
                vec![0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0.0, f64::NEG_INFINITY, 0.0, 0.0],
            );
            t.softmax_attention(v[0], v[1], v[2], Some(&m))
        },
    ));
    out.push(run_check("permute", &[&[2, 3, 4]], 11, |t, v| t.permute(v[0], &[2, 0, 1])));
    out.push(run_check("reshape", &[&[2, 6]], 12, |t, v| t.reshape(v[0], vec![3, 4])));
    out.push(run_check("concat_cols", &[&[3, 2], &[3, 4], &[3, 1]], 13, |t, v| {
        t.concat_cols(v)
    }));
    out.push(run_check("gather_rows", &[&[5, 3]], 14, |t, v| {
        t.gather_rows(v[0], &[4, 0, 2, 0])
    }));
    out.push(run_check("repeat_rows", &[&[2, 3]], 15, |t, v| t.repeat_rows(v[0], 3)));
    out.push(run_check("masked_mean_pool", &[&[8, 3]], 17, |t, v| {
        let mask = [1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0];
        t.masked_mean_pool(v[0], &mask, 2)
    }));
    out.push(run_check("masked_max_pool", &[&[8, 3]], 18, |t, v| {
        let mask = [1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 1.0];
        t.masked_max_pool(v[0], &mask, 2)
    }));
    out.push(run_check("sum_all", &[&[3, 3]], 16, |t, v| {
        // keep the output non-scalar-trivial: square first, then sum inside build
        let sq = t.mul(v[0], v[0]);
        t.sum_all(sq)
    }));
    out
}
