//! Adam with bias correction and a global-norm gradient clip.

use crate::real::{cast, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled so their global L2 norm never exceeds this.
    pub clip_global_norm: Option<f64>,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_global_norm: None }
    }
}

/// Whether a step was applied or skipped because a gradient was non-finite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdamOutcome {
    Applied,
    Skipped,
}

/// First/second moment buffers, one pair per parameter tensor.
pub struct AdamState<T: Real> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Flattened moments, for checkpointing.
    pub fn buffers(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    pub fn restore(m: Vec<Vec<T>>, v: Vec<Vec<T>>, step: u64) -> Self {
        AdamState { m, v, step }
    }

    /// One update over all parameters. If any gradient element is non-finite
    /// the whole step is skipped and state is left untouched.
    pub fn step(
        &mut self,
        ap: &AdamParams,
        params: &mut [&mut Tensor<T>],
        grads: &mut [Vec<T>],
    ) -> AdamOutcome {
        assert_eq!(params.len(), self.m.len(), "adam: {} params, state has {}", params.len(), self.m.len());
        assert_eq!(params.len(), grads.len(), "adam: {} params, {} grads", params.len(), grads.len());
        for (p, g) in params.iter().zip(grads.iter()) {
            assert_eq!(p.numel(), g.len(), "adam: param {} elements vs grad {}", p.numel(), g.len());
        }
        if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
            return AdamOutcome::Skipped;
        }
        if let Some(max_norm) = ap.clip_global_norm {
            let sq: f64 = grads
                .iter()
                .flat_map(|g| g.iter())
                .map(|&x| {
                    let v = x.to_f64_lossy();
                    v * v
                })
                .sum();
            let norm = sq.sqrt();
            if norm > max_norm {
                let s = cast::<T>(max_norm / norm);
                for g in grads.iter_mut() {
                    for x in g.iter_mut() {
                        *x = *x * s;
                    }
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = cast::<T>(ap.beta1);
        let b2 = cast::<T>(ap.beta2);
        let one = T::one();
        let lr_t = cast::<T>(ap.lr * (1.0 - ap.beta2.powf(t)).sqrt() / (1.0 - ap.beta1.powf(t)));
        let eps = cast::<T>(ap.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                data[i] = data[i] - lr_t * m[i] / (v[i].sqrt() + eps);
            }
        }
        AdamOutcome::Applied
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_is_identity() {
        let mut p = Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]);
        let mut st = AdamState::new(&[&p]);
        let out = st.step(&AdamParams::default(), &mut [&mut p], &mut [vec![0.0; 3]]);
        assert_eq!(out, AdamOutcome::Applied);
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // With bias correction, step 1 moves each coordinate by lr * sign(g)
        // up to the eps term.
        let mut p = Tensor::new(vec![2], vec![0.0f64, 0.0]);
        let ap = AdamParams { lr: 0.1, ..AdamParams::default() };
        let mut st = AdamState::new(&[&p]);
        st.step(&ap, &mut [&mut p], &mut [vec![3.0, -0.25]]);
        assert!((p.data()[0] + 0.1).abs() < 1e-6, "got {}", p.data()[0]);
        assert!((p.data()[1] - 0.1).abs() < 1e-6, "got {}", p.data()[1]);
    }

    #[test]
    fn two_steps_decrease_quadratic() {
        // f(x) = x^2, grad = 2x.
        let mut p = Tensor::new(vec![1], vec![1.0f64]);
        let ap = AdamParams { lr: 0.05, ..AdamParams::default() };
        let mut st = AdamState::new(&[&p]);
        let f = |x: f64| x * x;
        let start = f(p.data()[0]);
        for _ in 0..2 {
            let g = vec![2.0 * p.data()[0]];
            st.step(&ap, &mut [&mut p], &mut [g]);
        }
        assert!(f(p.data()[0]) < start);
    }

    #[test]
    fn non_finite_grad_skips_step() {
        let mut p = Tensor::new(vec![2], vec![1.0f32, 2.0]);
        let mut st = AdamState::new(&[&p]);
        let out =
            st.step(&AdamParams::default(), &mut [&mut p], &mut [vec![f32::NAN, 0.0]]);
        assert_eq!(out, AdamOutcome::Skipped);
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(st.step_count(), 0);
    }

    #[test]
    fn global_norm_clip_rescales() {
        let mut p = Tensor::new(vec![2], vec![0.0f64, 0.0]);
        let ap = AdamParams { lr: 1e-3, clip_global_norm: Some(1.0), ..AdamParams::default() };
        let mut st = AdamState::new(&[&p]);
        let mut grads = vec![vec![3.0f64, 4.0]]; // norm 5 -> scaled to 1
        st.step(&ap, &mut [&mut p], &mut grads);
        let norm = (grads[0][0] * grads[0][0] + grads[0][1] * grads[0][1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12, "clipped norm {}", norm);
    }
}
