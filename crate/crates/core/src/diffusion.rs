//! Noise schedule and the deterministic few-step sampler.
//!
//! Every inference step updates a latent as `z_prev = λ·z_t + μ·ε` with
//! `λ = sqrt(ᾱ_prev/ᾱ_t)` and `μ = sqrt(1-ᾱ_prev) - sqrt(ᾱ_prev(1-ᾱ_t)/ᾱ_t)`,
//! which is the DDIM update with zero stochasticity.

use crate::error::{dim_err, param_err, Result};
use crate::tensor::{gaussian, RngStream, Tensor};

pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_MIN: f64 = 1e-4;
pub const DEFAULT_BETA_MAX: f64 = 0.02;
pub const DEFAULT_INFER_STEPS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    alpha_bar: Vec<f64>,
    infer_steps: Vec<usize>,
    lambda: Vec<f64>,
    mu: Vec<f64>,
}

/// Linear beta ramp over `n_train_steps`, sampled at `n_infer_steps`
/// evenly spaced training indices ending near zero noise.
pub fn make_schedule(n_train_steps: usize, n_infer_steps: usize, beta_min: f64, beta_max: f64) -> Result<Schedule> {
    if n_train_steps == 0 || n_infer_steps == 0 || n_infer_steps > n_train_steps {
        return param_err(format!(
            "need 1 <= T <= n_train_steps (T={n_infer_steps}, n={n_train_steps})"
        ));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return param_err(format!("need 0 < beta_min <= beta_max < 1 ({beta_min}, {beta_max})"));
    }
    let n = n_train_steps;
    let mut alpha_bar = Vec::with_capacity(n);
    let mut acc = 1.0f64;
    for i in 0..n {
        let beta = if n == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * i as f64 / (n - 1) as f64
        };
        acc *= 1.0 - beta;
        alpha_bar.push(acc);
    }
    let infer_steps: Vec<usize> = (0..n_infer_steps).map(|k| n - 1 - k * n / n_infer_steps).collect();
    let (mut lambda, mut mu) = (Vec::new(), Vec::new());
    for (k, &t) in infer_steps.iter().enumerate() {
        let a = alpha_bar[t];
        let prev = infer_steps.get(k + 1).map_or(1.0, |&p| alpha_bar[p]);
        lambda.push((prev / a).sqrt());
        mu.push((1.0 - prev).sqrt() - (prev * (1.0 - a) / a).sqrt());
    }
    Ok(Schedule {
        alpha_bar,
        infer_steps,
        lambda,
        mu,
    })
}

impl Default for Schedule {
    fn default() -> Self {
        make_schedule(
            DEFAULT_TRAIN_STEPS,
            DEFAULT_INFER_STEPS,
            DEFAULT_BETA_MIN,
            DEFAULT_BETA_MAX,
        )
        .expect("default schedule is valid")
    }
}

impl Schedule {
    pub fn n_train_steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn n_infer_steps(&self) -> usize {
        self.infer_steps.len()
    }

    pub fn alpha_bar(&self, train_step: usize) -> f64 {
        self.alpha_bar[train_step]
    }

    pub fn alpha_bar_tensor(&self) -> Tensor {
        let d: Vec<f32> = self.alpha_bar.iter().map(|&a| a as f32).collect();
        Tensor::new(&[d.len()], d).expect("1-d")
    }

    /// Training indices visited by the sampler, strictly decreasing.
    pub fn infer_steps(&self) -> &[usize] {
        &self.infer_steps
    }

    /// Training index of inference step `k`.
    pub fn train_step(&self, k: usize) -> usize {
        self.infer_steps[k]
    }

    pub fn lambda(&self, k: usize) -> f64 {
        self.lambda[k]
    }

    pub fn mu(&self, k: usize) -> f64 {
        self.mu[k]
    }

    /// First inference step whose training index is at or below the noise
    /// level implied by `strength`; `n_infer_steps()` means nothing to do.
    pub fn start_step(&self, strength: f64) -> usize {
        if strength <= 0.0 {
            return self.n_infer_steps();
        }
        let t = (strength * (self.n_train_steps() - 1) as f64).round() as usize;
        self.infer_steps
            .iter()
            .position(|&s| s <= t)
            .unwrap_or(self.n_infer_steps())
    }

    #[cfg(test)]
    pub(crate) fn with_coefficients(lambda: f64, mu: f64) -> Self {
        Self {
            alpha_bar: vec![0.5],
            infer_steps: vec![0],
            lambda: vec![lambda],
            mu: vec![mu],
        }
    }
}

/// A latent noised for partial denoising.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedLatent {
    pub latent: Tensor,
    /// Inference step the sampler resumes from.
    pub start_step: usize,
}

/// Noise `z0` to the level given by `strength`.
///
/// The latent is noised to the training index of the inference step it will
/// resume from, so it sits exactly on the sampler's trajectory. Strength 0
/// returns `z0` untouched with nothing left to denoise.
pub fn add_noise(z0: &Tensor, strength: f64, sched: &Schedule, rng: &mut RngStream) -> Result<NoisedLatent> {
    if !(0.0..=1.0).contains(&strength) {
        return param_err(format!("noise strength {strength} outside [0, 1]"));
    }
    let start_step = sched.start_step(strength);
    if start_step == sched.n_infer_steps() {
        return Ok(NoisedLatent {
            latent: z0.clone(),
            start_step,
        });
    }
    let eps = gaussian(rng, z0.shape());
    Ok(NoisedLatent {
        latent: noise_to(z0, &eps, sched.alpha_bar(sched.train_step(start_step))),
        start_step,
    })
}

/// `sqrt(ᾱ)·z0 + sqrt(1-ᾱ)·ε`.
pub fn noise_to(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Tensor {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let d = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (a * x as f64 + b * e as f64) as f32)
        .collect();
    Tensor::new(z0.shape(), d).expect("same shape")
}

/// One sampler update at inference step `k`.
pub fn denoise_step(z: &Tensor, eps: &Tensor, k: usize, sched: &Schedule) -> Result<Tensor> {
    if z.shape() != eps.shape() {
        return dim_err(format!("latent {:?} vs noise {:?}", z.shape(), eps.shape()));
    }
    if k >= sched.n_infer_steps() {
        return param_err(format!(
            "inference step {k} out of range for T={}",
            sched.n_infer_steps()
        ));
    }
    let (l, m) = (sched.lambda(k), sched.mu(k));
    let d = z
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| (l * x as f64 + m * e as f64) as f32)
        .collect();
    Tensor::new(z.shape(), d)
}

/// The noise that maps `z` at training index `t` exactly onto `x0`.
pub fn exact_eps(z: &Tensor, x0: &Tensor, alpha_bar: f64) -> Tensor {
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let d = z
        .data()
        .iter()
        .zip(x0.data())
        .map(|(&zz, &x)| ((zz as f64 - a * x as f64) / b) as f32)
        .collect();
    Tensor::new(z.shape(), d).expect("same shape")
}
