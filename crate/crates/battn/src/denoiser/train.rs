//! Noise-prediction training for the denoiser.
//!
//! Vanilla diffusion training — no masks, no guidance, no layout
//! information. The inference-time machinery in the rest of the crate is
//! training-free, and a test below holds that claim to the letter: editing
//! the layout boxes of the training scenes must reproduce the checkpoint
//! bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::{sample_example, DatasetConfig, TrainExample};
use super::{forward, Checkpoint, DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tape::Tape;
use crate::tensor::Tensor;

// ── optimizer ───────────────────────────────────────────────────────────

/// Adam with bias correction. Moment tensors line up with the canonical
/// parameter order.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &DenoiserParams, lr: f64) -> Self {
        let zeros: Vec<Tensor> =
            params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, params: &mut DenoiserParams, grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, p)) in params.named_mut().into_iter().enumerate() {
            let g = &grads[i];
            debug_assert_eq!(g.shape(), p.shape());
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                pd[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Optimizer steps (each consumes `batch_size` examples).
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of swapping the prompt for the null context, which
    /// trains the unconditional branch the sampler's CFG needs.
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 4, lr: 2e-3, cond_dropout: 0.1, seed: 0 }
    }
}

/// Everything a `train` run needs, as one (de)serializable document.
#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSpec {
    pub model: DenoiserConfig,
    pub data: DatasetConfig,
    pub train: TrainConfig,
}

// ── training loop ───────────────────────────────────────────────────────

/// Train from a caller-supplied example source. The source may draw from
/// the rng (synthetic data) or ignore it (fixed corpora); everything else
/// about the run is a pure function of the spec and seed.
pub fn train<F>(
    spec: &TrainSpec,
    mut data: F,
    mut on_step: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<Checkpoint>
where
    F: FnMut(&mut ChaCha20Rng) -> Result<TrainExample>,
{
    spec.model.validate()?;
    let schedule = NoiseSchedule::default_linear();
    let mut rng = ChaCha20Rng::seed_from_u64(spec.train.seed);
    let mut params = DenoiserParams::init(&spec.model, spec.train.seed)?;
    let mut adam = Adam::new(&params, spec.train.lr);
    let shapes: Vec<Vec<usize>> =
        params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut losses = Vec::with_capacity(spec.train.steps);

    for step in 0..spec.train.steps {
        let mut accum: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let mut batch_loss = 0.0;
        for _ in 0..spec.train.batch_size {
            let ex = data(&mut rng)?;
            if ex.image.shape() != [3, spec.model.height, spec.model.width] {
                return Err(Error::shape(
                    "training image",
                    ex.image.shape(),
                    &[3, spec.model.height, spec.model.width],
                ));
            }
            let t = rng.gen_range(0..schedule.t_train());
            let noise = {
                let dist = StandardNormal;
                let data: Vec<f64> = (0..ex.image.len()).map(|_| dist.sample(&mut rng)).collect();
                Tensor::from_vec(ex.image.shape().to_vec(), data)?
            };
            let z_t = schedule.add_noise(&ex.image, &noise, t);
            let dropped = rng.gen::<f64>() < spec.train.cond_dropout;
            let ctx = if dropped { super::null_context() } else { ex.ctx.clone() };

            let mut tape = Tape::new();
            let tp = params.load(&mut tape, true);
            let zn = tape.leaf(z_t, false);
            let out = forward(&mut tape, &tp, &spec.model, zn, t, &ctx, None)?;
            let target = tape.constant(noise);
            let diff = tape.sub(out.eps, target)?;
            let sq = tape.mul(diff, diff)?;
            let total = tape.sum(sq);
            let loss = tape.affine(total, 1.0 / (3 * spec.model.pixels()) as f64, 0.0);
            batch_loss += tape.value(loss)?.data()[0];
            let grads = tape.backward(loss)?;
            for (i, (name, _)) in params.named().iter().enumerate() {
                let g = grads.get(tp.node(name))?;
                accum[i] = accum[i].add(&g)?;
            }
        }
        batch_loss /= spec.train.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(Error::DivergedLoss { step });
        }
        let inv = 1.0 / spec.train.batch_size as f64;
        for g in &mut accum {
            *g = g.scale(inv);
        }
        adam.step(&mut params, &accum);
        losses.push(batch_loss);
        if let Some(cb) = on_step.as_deref_mut() {
            cb(step, batch_loss);
        }
    }

    Ok(Checkpoint { params, steps: spec.train.steps, seed: spec.train.seed, loss_history: losses })
}

/// Train on freshly sampled synthetic scenes.
pub fn train_synthetic(
    spec: &TrainSpec,
    on_step: Option<&mut dyn FnMut(usize, f64)>,
) -> Result<Checkpoint> {
    let data_cfg = spec.data.clone();
    train(spec, move |rng| sample_example(&data_cfg, rng), on_step)
}
