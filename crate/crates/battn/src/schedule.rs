//! Noise schedule and deterministic sampling-step math.
//!
//! One schedule object serves both training (closed-form noising of clean
//! latents at an arbitrary timestep) and sampling (a strided grid of
//! timesteps walked in reverse with the deterministic update rule). All of
//! it is plain f64 arithmetic so runs are reproducible bit for bit.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Variances linearly interpolated from `beta_start` at t = 0 to
    /// `beta_end` at t = t_train − 1.
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(t_train >= 2);
        let mut betas = Vec::with_capacity(t_train);
        let mut alpha_bars = Vec::with_capacity(t_train);
        let mut prod = 1.0;
        for i in 0..t_train {
            let frac = i as f64 / (t_train - 1) as f64;
            let beta = beta_start + (beta_end - beta_start) * frac;
            prod *= 1.0 - beta;
            betas.push(beta);
            alpha_bars.push(prod);
        }
        Self { betas, alpha_bars }
    }

    /// The 1000-step schedule every model in this crate trains under.
    pub fn default_linear() -> Self {
        Self::linear(1000, 1e-4, 0.02)
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    /// Cumulative product of (1 − β) through timestep t, inclusive.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Closed-form forward noising: `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Tensor {
        assert_eq!(x0.shape(), eps.shape());
        let ab = self.alpha_bars[t];
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        Tensor::from_fn(x0.shape(), |i| sa * x0.data()[i] + sb * eps.data()[i])
    }

    /// Descending timestep grid for an `s`-step sampling run:
    /// `[(s−1)·k, …, 2k, k, 0]` with stride `k = t_train / s`.
    pub fn sample_grid(&self, s: usize) -> Vec<usize> {
        assert!(s >= 1 && s <= self.t_train());
        let stride = self.t_train() / s;
        (0..s).rev().map(|k| k * stride).collect()
    }

    /// One deterministic reverse step from timestep `t` to `t_prev`
    /// (`None` ⇒ the final hop to the clean sample, ᾱ ≡ 1):
    /// reconstruct `x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`, then re-noise it to
    /// the earlier timestep along the predicted direction.
    pub fn reverse_step(
        &self,
        x_t: &Tensor,
        eps_hat: &Tensor,
        t: usize,
        t_prev: Option<usize>,
    ) -> Tensor {
        assert_eq!(x_t.shape(), eps_hat.shape());
        let ab_t = self.alpha_bars[t];
        let ab_p = t_prev.map_or(1.0, |p| self.alpha_bars[p]);
        let (sq_t, sq_p) = (ab_t.sqrt(), ab_p.sqrt());
        let (sig_t, sig_p) = ((1.0 - ab_t).sqrt(), (1.0 - ab_p).sqrt());
        Tensor::from_fn(x_t.shape(), |i| {
            let x0_hat = (x_t.data()[i] - sig_t * eps_hat.data()[i]) / sq_t;
            sq_p * x0_hat + sig_p * eps_hat.data()[i]
        })
    }

    /// `reverse_step` with the usual static threshold: the reconstructed
    /// `x̂0` is clamped into `[lo, hi]` before re-noising, which keeps an
    /// imperfect predictor's errors from compounding across the run. The
    /// unclamped variant stays available for schedule algebra.
    pub fn reverse_step_clamped(
        &self,
        x_t: &Tensor,
        eps_hat: &Tensor,
        t: usize,
        t_prev: Option<usize>,
        lo: f64,
        hi: f64,
    ) -> Tensor {
        assert_eq!(x_t.shape(), eps_hat.shape());
        let ab_t = self.alpha_bars[t];
        let ab_p = t_prev.map_or(1.0, |p| self.alpha_bars[p]);
        let (sq_t, sq_p) = (ab_t.sqrt(), ab_p.sqrt());
        let (sig_t, sig_p) = ((1.0 - ab_t).sqrt(), (1.0 - ab_p).sqrt());
        Tensor::from_fn(x_t.shape(), |i| {
            let x0_hat =
                ((x_t.data()[i] - sig_t * eps_hat.data()[i]) / sq_t).clamp(lo, hi);
            sq_p * x0_hat + sig_p * eps_hat.data()[i]
        })
    }
}

/// How many of the first sampling steps run latent optimization before
/// denoising: `⌈s·(1−t_guidance)⌉`. A small guard is subtracted before the
/// ceiling because `1 − t_guidance` is not exact in binary (1 − 0.7 lands
/// a hair above 0.3, which would otherwise round a 15-step phase up to 16).
pub fn guided_steps(s: usize, t_guidance: f64) -> usize {
    assert!((0.0..=1.0).contains(&t_guidance));
    let raw = (s as f64) * (1.0 - t_guidance);
    let g = (raw - 1e-9).ceil().max(0.0) as usize;
    g.min(s)
}

/// Whether mask refinement runs before denoising step `step` (0-indexed):
/// every `interval` steps once the guided phase is over, starting one step
/// after it ends. An interval of zero disables refinement.
pub fn refinement_due(step: usize, guided: usize, interval: usize) -> bool {
    interval > 0 && step > guided && (step - (guided + 1)) % interval == 0
}
