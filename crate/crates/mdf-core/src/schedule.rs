//! Diffusion level arithmetic: the square-cosine schedule, per-level forward
//! corruption, exact posterior and model reverse moments, deterministic DDIM
//! steps, and closed-form isotropic Gaussian KL.
//!
//! Level 0 always means clean data; diffusion arithmetic operates on levels
//! 1..=K. Tables are kept in f64 and cast at the point of use.

use crate::error::{MdfError, Result};
use mdf_numerics::real::{cast, Real};

#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    k_max: usize,
    beta: Vec<f64>,          // [K+1], index 0 unused
    alpha: Vec<f64>,         // [K+1], index 0 unused
    alpha_bar: Vec<f64>,     // [K+1], alpha_bar[0] == 1
    posterior_var: Vec<f64>, // [K+1], index 0 unused; entry 1 is exactly 0
}

impl DiffusionSchedule {
    /// alpha_bar[k] = f(k)/f(0) with f(k) = cos²(((k/K + s)/(1+s))·π/2),
    /// betas clipped at `beta_clip`, alpha_bar recomputed from the clipped
    /// betas so the product identity holds exactly.
    pub fn square_cosine(k_max: usize, s: f64, beta_clip: f64) -> Result<Self> {
        if k_max == 0 {
            return Err(MdfError::Parameter("schedule needs at least 1 level".into()));
        }
        if s <= 0.0 || s >= 1.0 {
            return Err(MdfError::Parameter(format!("cosine offset s={s} outside (0,1)")));
        }
        if beta_clip <= 0.0 || beta_clip >= 1.0 {
            return Err(MdfError::Parameter(format!("beta_clip={beta_clip} outside (0,1)")));
        }
        let f = |k: f64| {
            let t = (k / k_max as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
            t.cos().powi(2)
        };
        let f0 = f(0.0);
        let mut beta = vec![0.0; k_max + 1];
        let mut alpha = vec![1.0; k_max + 1];
        let mut alpha_bar = vec![1.0; k_max + 1];
        for k in 1..=k_max {
            let raw = 1.0 - (f(k as f64) / f0) / (f((k - 1) as f64) / f0);
            beta[k] = raw.min(beta_clip);
            alpha[k] = 1.0 - beta[k];
            alpha_bar[k] = alpha_bar[k - 1] * alpha[k];
        }
        let mut posterior_var = vec![0.0; k_max + 1];
        for k in 1..=k_max {
            posterior_var[k] = (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]) * beta[k];
        }
        Ok(DiffusionSchedule { k_max, beta, alpha, alpha_bar, posterior_var })
    }

    /// The training schedule: K=1000, s=0.008, beta clip 0.999.
    pub fn default_train() -> Self {
        Self::square_cosine(1000, 0.008, 0.999).expect("valid constants")
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn beta(&self, k: usize) -> f64 {
        assert!(k >= 1 && k <= self.k_max, "beta undefined at level {k}");
        self.beta[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        assert!(k >= 1 && k <= self.k_max, "alpha undefined at level {k}");
        self.alpha[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        assert!(k <= self.k_max, "alpha_bar undefined at level {k}");
        self.alpha_bar[k]
    }

    pub fn posterior_var(&self, k: usize) -> f64 {
        assert!(k >= 1 && k <= self.k_max, "posterior variance undefined at level {k}");
        self.posterior_var[k]
    }

    fn check_level(&self, k: usize) -> Result<()> {
        if k > self.k_max {
            return Err(MdfError::Level(format!("level {k} exceeds K={}", self.k_max)));
        }
        Ok(())
    }

    fn check_positive_level(&self, k: usize) -> Result<()> {
        self.check_level(k)?;
        if k == 0 {
            return Err(MdfError::Level("level 0 is clean data; no reverse step exists".into()));
        }
        Ok(())
    }
}

/// Isotropic Gaussian with a shared scalar variance across dimensions.
#[derive(Debug, Clone)]
pub struct GaussianMoments<T: Real> {
    pub mean: Vec<T>,
    pub var: f64,
}

/// x^k = √(alpha_bar[k])·x0 + √(1−alpha_bar[k])·noise. Level 0 returns x0
/// bitwise unchanged.
pub fn forward_corrupt<T: Real>(
    x0: &[T],
    k: usize,
    sched: &DiffusionSchedule,
    noise: &[T],
) -> Result<Vec<T>> {
    sched.check_level(k)?;
    if noise.len() != x0.len() {
        return Err(MdfError::Parameter(format!(
            "noise length {} does not match x0 length {}",
            noise.len(),
            x0.len()
        )));
    }
    if k == 0 {
        return Ok(x0.to_vec());
    }
    let ab = sched.alpha_bar(k);
    let c0 = cast::<T>(ab.sqrt());
    let cn = cast::<T>((1.0 - ab).sqrt());
    Ok(x0.iter().zip(noise).map(|(&x, &n)| c0 * x + cn * n).collect())
}

/// Exact reverse conditional q(x^{k−1} | x^k, x^0).
pub fn posterior_moments<T: Real>(
    x0: &[T],
    xk: &[T],
    k: usize,
    sched: &DiffusionSchedule,
) -> Result<GaussianMoments<T>> {
    sched.check_positive_level(k)?;
    if x0.len() != xk.len() {
        return Err(MdfError::Parameter(format!(
            "x0 length {} does not match xk length {}",
            x0.len(),
            xk.len()
        )));
    }
    let ab = sched.alpha_bar(k);
    let ab_prev = sched.alpha_bar(k - 1);
    let beta = sched.beta(k);
    let alpha = sched.alpha(k);
    let c0 = cast::<T>(ab_prev.sqrt() * beta / (1.0 - ab));
    let ck = cast::<T>(alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab));
    let mean = x0.iter().zip(xk).map(|(&a, &b)| c0 * a + ck * b).collect();
    Ok(GaussianMoments { mean, var: sched.posterior_var(k) })
}

/// Model reverse mean from predicted noise:
/// (1/√alpha[k])·(xk − beta[k]/√(1−alpha_bar[k])·eps_hat).
pub fn model_reverse_moments<T: Real>(
    xk: &[T],
    eps_hat: &[T],
    k: usize,
    sched: &DiffusionSchedule,
) -> Result<GaussianMoments<T>> {
    sched.check_positive_level(k)?;
    if xk.len() != eps_hat.len() {
        return Err(MdfError::Parameter(format!(
            "xk length {} does not match eps_hat length {}",
            xk.len(),
            eps_hat.len()
        )));
    }
    let inv_sqrt_alpha = cast::<T>(1.0 / sched.alpha(k).sqrt());
    let ceps = cast::<T>(sched.beta(k) / (1.0 - sched.alpha_bar(k)).sqrt());
    let mean = xk
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| inv_sqrt_alpha * (x - ceps * e))
        .collect();
    Ok(GaussianMoments { mean, var: sched.posterior_var(k) })
}

/// Deterministic (η=0) DDIM update from level k down to k_prev.
pub fn ddim_step<T: Real>(
    xk: &[T],
    eps_hat: &[T],
    k: usize,
    k_prev: usize,
    sched: &DiffusionSchedule,
) -> Result<Vec<T>> {
    sched.check_positive_level(k)?;
    if k_prev >= k {
        return Err(MdfError::Level(format!("ddim step requires k_prev < k, got {k_prev} >= {k}")));
    }
    if xk.len() != eps_hat.len() {
        return Err(MdfError::Parameter(format!(
            "xk length {} does not match eps_hat length {}",
            xk.len(),
            eps_hat.len()
        )));
    }
    let ab = sched.alpha_bar(k);
    let ab_prev = sched.alpha_bar(k_prev);
    let inv_sqrt_ab = cast::<T>(1.0 / ab.sqrt());
    let cn = cast::<T>((1.0 - ab).sqrt());
    let c0 = cast::<T>(ab_prev.sqrt());
    let cn_prev = cast::<T>((1.0 - ab_prev).sqrt());
    Ok(xk
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| {
            let x0_hat = (x - cn * e) * inv_sqrt_ab;
            c0 * x0_hat + cn_prev * e
        })
        .collect())
}

/// DDIM update that clamps the implied clean estimate to [-x0_clip, x0_clip]
/// before recombining. Near k=K the 1/√alpha_bar factor amplifies prediction
/// error by orders of magnitude; samplers clip to stay on-scale, while exact
/// identity tests use the unclipped [`ddim_step`].
pub fn ddim_step_clipped<T: Real>(
    xk: &[T],
    eps_hat: &[T],
    k: usize,
    k_prev: usize,
    sched: &DiffusionSchedule,
    x0_clip: f64,
) -> Result<Vec<T>> {
    sched.check_positive_level(k)?;
    if k_prev >= k {
        return Err(MdfError::Level(format!("ddim step requires k_prev < k, got {k_prev} >= {k}")));
    }
    if xk.len() != eps_hat.len() {
        return Err(MdfError::Parameter(format!(
            "xk length {} does not match eps_hat length {}",
            xk.len(),
            eps_hat.len()
        )));
    }
    if !(x0_clip > 0.0) {
        return Err(MdfError::Parameter(format!("x0_clip must be positive, got {x0_clip}")));
    }
    let ab = sched.alpha_bar(k);
    let ab_prev = sched.alpha_bar(k_prev);
    let inv_sqrt_ab = cast::<T>(1.0 / ab.sqrt());
    let cn = cast::<T>((1.0 - ab).sqrt());
    let c0 = cast::<T>(ab_prev.sqrt());
    let cn_prev = cast::<T>((1.0 - ab_prev).sqrt());
    let clip = cast::<T>(x0_clip);
    Ok(xk
        .iter()
        .zip(eps_hat)
        .map(|(&x, &e)| {
            let x0_hat = ((x - cn * e) * inv_sqrt_ab).max(-clip).min(clip);
            c0 * x0_hat + cn_prev * e
        })
        .collect())
}

/// KL(q ‖ p) between isotropic Gaussians of the same dimension.
pub fn gaussian_kl<T: Real>(q: &GaussianMoments<T>, p: &GaussianMoments<T>) -> Result<f64> {
    if q.var <= 0.0 || p.var <= 0.0 {
        return Err(MdfError::Parameter(format!(
            "gaussian_kl requires positive variances, got q.var={} p.var={}",
            q.var, p.var
        )));
    }
    if q.mean.len() != p.mean.len() {
        return Err(MdfError::Parameter(format!(
            "gaussian_kl mean dims differ: {} vs {}",
            q.mean.len(),
            p.mean.len()
        )));
    }
    let d = q.mean.len() as f64;
    let ratio = q.var / p.var;
    let dmu2: f64 = q
        .mean
        .iter()
        .zip(&p.mean)
        .map(|(&a, &b)| {
            let diff = a.to_f64_lossy() - b.to_f64_lossy();
            diff * diff
        })
        .sum();
    Ok(0.5 * (d * ratio + dmu2 / p.var - d + d * (p.var / q.var).ln()))
}

/// Strictly decreasing DDIM level ladder from K to 0, uniformly spaced.
pub fn ddim_ladder(k_max: usize, steps: usize) -> Vec<usize> {
    assert!(steps >= 1, "ladder needs at least one step");
    let mut out = Vec::with_capacity(steps + 1);
    for j in 0..=steps {
        let k = ((k_max as f64) * ((steps - j) as f64) / steps as f64).round() as usize;
        if out.last() != Some(&k) {
            out.push(k);
        }
    }
    debug_assert_eq!(*out.first().unwrap(), k_max);
    debug_assert_eq!(*out.last().unwrap(), 0);
    out
}
