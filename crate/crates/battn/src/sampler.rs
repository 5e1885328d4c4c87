//! The full sampling pipeline.
//!
//! Each run walks a descending timestep grid in two phases. Early steps
//! (the guided phase) first nudge the latent so every subject's attention
//! collects inside its own box, then denoise under the restrictive masks.
//! Later steps denoise only, periodically swapping the coarse boxes for
//! refined masks read out of the model's own attention. Conditional and
//! unconditional passes are combined with classifier-free guidance, and
//! the update rule is deterministic, so a seed fixes the whole run.
//!
//! `reference_vanilla` is a deliberately separate, straight-line loop with
//! no masking, guidance, or refinement anywhere in its call path; the
//! `vanilla` flag on the main pipeline must reproduce it bit for bit.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounded_attention::{build_cross_mask, build_self_mask, MaskMode};
use crate::denoiser::{
    forward, null_context, AttentionRecord, AttnMasks, Checkpoint, DenoiserConfig,
};
use crate::dump;
use crate::error::{Error, Result};
use crate::guidance::{run_guidance_phase, subject_slots, GuidanceConfig, GuidanceIteration};
use crate::refinement::{refine, RefineConfig, RefineState};
use crate::scene::{Region, SceneSpec};
use crate::schedule::{guided_steps, refinement_due, NoiseSchedule};
use crate::tape::Tape;
use crate::tensor::Tensor;

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Outer denoising steps.
    pub steps: usize,
    /// Classifier-free guidance weight.
    pub cfg_scale: f64,
    /// Seed for the initial latent draw.
    pub seed: u64,
    /// Run with no masks, no latent optimization, and no refinement.
    pub vanilla: bool,
    pub guidance: GuidanceConfig,
    pub refine: RefineConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 3.0,
            seed: 0,
            vanilla: false,
            guidance: GuidanceConfig::default(),
            refine: RefineConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::ValidationError {
                path: "sampler.steps".into(),
                message: "need at least one step".into(),
            });
        }
        if !(self.cfg_scale >= 0.0) {
            return Err(Error::ValidationError {
                path: "sampler.cfg_scale".into(),
                message: format!("must be ≥ 0, got {}", self.cfg_scale),
            });
        }
        Ok(())
    }
}

// ── trace plumbing ──────────────────────────────────────────────────────

/// Which forward pass a streamed attention record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PassKind {
    Cond,
    Uncond,
}

/// Receives every attention record as it is produced, so a full run can
/// be audited without holding all maps in memory at once.
pub trait RecordSink {
    fn record(&mut self, step: usize, pass: PassKind, rec: &AttentionRecord) -> Result<()>;
}

/// What happened at one outer step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    /// Schedule timestep consumed by this step.
    pub t: usize,
    /// True while latent optimization runs before denoising.
    pub guided: bool,
    /// True when masks were re-derived from attention before this step.
    pub refined: bool,
    /// Inner-loop telemetry for guided steps.
    pub guidance: Option<Vec<GuidanceIteration>>,
    pub early_stopped: Option<bool>,
    /// Current mask size per subject, in pixels.
    pub mask_pixels: Vec<usize>,
}

/// Masks as they stood after a refinement round.
#[derive(Debug, Clone)]
pub struct MaskSnapshot {
    pub step: usize,
    pub masks: Vec<Region>,
}

#[derive(Debug, Clone)]
pub struct RunTrace {
    pub config: SamplerConfig,
    pub steps: Vec<StepReport>,
    pub snapshots: Vec<MaskSnapshot>,
    /// The final latent. The last reverse step clamps its reconstruction,
    /// so every value sits in [−1, 1].
    pub final_latent: Tensor,
    /// Wall-clock seconds for the whole run. Kept out of written trace
    /// files so identical seeds produce byte-identical artifacts.
    pub wall_seconds: f64,
}

// ── classifier-free guidance ────────────────────────────────────────────

/// `eps_uncond + w·(eps_cond − eps_uncond)`.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::shape("cfg_combine", eps_uncond.shape(), eps_cond.shape()));
    }
    Ok(Tensor::from_fn(eps_cond.shape(), |i| {
        let (c, u) = (eps_cond.data()[i], eps_uncond.data()[i]);
        u + w * (c - u)
    }))
}

/// The initial latent for a seeded run: one standard-normal draw per
/// entry of a [3, H, W] tensor, in index order.
pub fn initial_latent(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    Tensor::from_fn(&[3, h, w], |_| StandardNormal.sample(&mut rng))
}

fn forward_once(
    ckpt: &Checkpoint,
    z: &Tensor,
    t: usize,
    ctx: &[usize],
    masks: Option<&AttnMasks>,
) -> Result<(Tensor, Vec<AttentionRecord>)> {
    let mut tape = Tape::new();
    let p = ckpt.params.load(&mut tape, false);
    let zn = tape.constant(z.clone());
    let out = forward(&mut tape, &p, &ckpt.params.config, zn, t, ctx, masks)?;
    let eps = tape.value(out.eps)?.clone();
    Ok((eps, out.records))
}

// ── the pipeline ────────────────────────────────────────────────────────

pub fn sample(ckpt: &Checkpoint, scene: &SceneSpec, cfg: &SamplerConfig) -> Result<(Tensor, RunTrace)> {
    sample_with_sink(ckpt, scene, cfg, None)
}

/// Run the pipeline, streaming every denoising-pass attention record into
/// `sink` as it is produced.
pub fn sample_with_sink(
    ckpt: &Checkpoint,
    scene: &SceneSpec,
    cfg: &SamplerConfig,
    mut sink: Option<&mut dyn RecordSink>,
) -> Result<(Tensor, RunTrace)> {
    cfg.validate()?;
    let model = &ckpt.params.config;
    check_dims(model, scene)?;
    let (h, w) = (model.height, model.width);

    let started = Instant::now();
    let schedule = NoiseSchedule::default_linear();
    let grid = schedule.sample_grid(cfg.steps);
    let g = if cfg.vanilla { 0 } else { guided_steps(cfg.steps, cfg.guidance.t_guidance) };
    let ctx = scene.embedding_ids();
    let nctx = null_context();

    let mut z = initial_latent(h, w, cfg.seed);
    let mut masks: Vec<Region> = scene.subject_regions()?;
    let mut refine_state = RefineState::default();
    let mut prev_records: Option<Vec<AttentionRecord>> = None;
    let mut reports: Vec<StepReport> = Vec::with_capacity(cfg.steps);
    let mut snapshots: Vec<MaskSnapshot> = Vec::new();

    for (step, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(step + 1).copied();
        let guided = step < g;

        // refinement happens strictly in the denoising-only phase
        let mut refined = false;
        if !cfg.vanilla && refinement_due(step, g, cfg.refine.interval) {
            if let Some(recs) = &prev_records {
                masks = refine(recs, scene, &cfg.refine, model.blocks, &mut refine_state)?;
                refined = true;
                snapshots.push(MaskSnapshot { step, masks: masks.clone() });
            }
        }

        // latent optimization under the permissive mask set
        let mut guidance_trace: Option<Vec<GuidanceIteration>> = None;
        let mut early_stopped: Option<bool> = None;
        if guided && cfg.guidance.iterations > 0 {
            let gmasks = AttnMasks {
                cross: Some(build_cross_mask(scene, &masks, MaskMode::Guidance)?),
                self_attn: Some(build_self_mask(h, w, &masks)),
            };
            let slots = subject_slots(scene, &masks)?;
            let beta = cfg.guidance.beta_at(step, g);
            let out = run_guidance_phase(
                &ckpt.params,
                model,
                &gmasks,
                &slots,
                z,
                t,
                &ctx,
                &cfg.guidance,
                beta,
                step,
            )?;
            z = out.z;
            guidance_trace = Some(out.iterations);
            early_stopped = Some(out.early_stopped);
        }

        // denoising forward passes
        let cond_masks = if cfg.vanilla {
            None
        } else {
            Some(AttnMasks {
                cross: Some(build_cross_mask(scene, &masks, MaskMode::Denoising)?),
                self_attn: Some(build_self_mask(h, w, &masks)),
            })
        };
        let uncond_masks = if cfg.vanilla {
            None
        } else {
            Some(AttnMasks { cross: None, self_attn: Some(build_self_mask(h, w, &masks)) })
        };

        let (eps_c, records_c) = forward_once(ckpt, &z, t, &ctx, cond_masks.as_ref())?;
        if let Some(s) = sink.as_deref_mut() {
            for rec in &records_c {
                s.record(step, PassKind::Cond, rec)?;
            }
        }
        let (eps_u, records_u) = forward_once(ckpt, &z, t, &nctx, uncond_masks.as_ref())?;
        if let Some(s) = sink.as_deref_mut() {
            for rec in &records_u {
                s.record(step, PassKind::Uncond, rec)?;
            }
        }
        drop(records_u);

        let eps = cfg_combine(&eps_c, &eps_u, cfg.cfg_scale)?;
        z = schedule.reverse_step_clamped(&z, &eps, t, t_prev, -1.0, 1.0);
        prev_records = Some(records_c);

        reports.push(StepReport {
            step,
            t,
            guided,
            refined,
            guidance: guidance_trace,
            early_stopped,
            mask_pixels: masks.iter().map(|m| m.count()).collect(),
        });
    }

    let trace = RunTrace {
        config: cfg.clone(),
        steps: reports,
        snapshots,
        final_latent: z.clone(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((z, trace))
}

fn check_dims(model: &DenoiserConfig, scene: &SceneSpec) -> Result<()> {
    if scene.latent.height != model.height || scene.latent.width != model.width {
        return Err(Error::ValidationError {
            path: "scene.latent".into(),
            message: format!(
                "scene is {}×{} but the checkpoint was trained at {}×{}",
                scene.latent.height, scene.latent.width, model.height, model.width
            ),
        });
    }
    Ok(())
}

// ── the reference loop ──────────────────────────────────────────────────

/// A bare sampling loop: seeded draw, conditional and unconditional
/// forwards with no masks, classifier-free combine, deterministic update.
/// Nothing mask- or guidance-related is reachable from here.
pub fn reference_vanilla(
    ckpt: &Checkpoint,
    scene: &SceneSpec,
    steps: usize,
    seed: u64,
    cfg_scale: f64,
) -> Result<Tensor> {
    let model = &ckpt.params.config;
    check_dims(model, scene)?;
    let schedule = NoiseSchedule::default_linear();
    let grid = schedule.sample_grid(steps);
    let ctx = scene.embedding_ids();
    let nctx = null_context();
    let mut z = initial_latent(model.height, model.width, seed);
    for (step, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(step + 1).copied();
        let (eps_c, _) = forward_once(ckpt, &z, t, &ctx, None)?;
        let (eps_u, _) = forward_once(ckpt, &z, t, &nctx, None)?;
        let eps = cfg_combine(&eps_c, &eps_u, cfg_scale)?;
        z = schedule.reverse_step_clamped(&z, &eps, t, t_prev, -1.0, 1.0);
    }
    Ok(z)
}

// ── trace files ─────────────────────────────────────────────────────────

/// The JSON image of a trace. Deliberately excludes wall time so repeat
/// runs with one seed serialize identically.
#[derive(Debug, Serialize, Deserialize)]
pub struct TraceFile {
    pub config: SamplerConfig,
    pub steps: Vec<StepReport>,
    pub mask_snapshots: Vec<TraceMasks>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TraceMasks {
    pub step: usize,
    /// One pixel-index list per subject.
    pub masks: Vec<Vec<usize>>,
}

/// Write `trace.json` and the raw final latent into `dir`.
pub fn write_trace(trace: &RunTrace, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("mkdir {}", dir.display()), e))?;
    let file = TraceFile {
        config: trace.config.clone(),
        steps: trace.steps.clone(),
        mask_snapshots: trace
            .snapshots
            .iter()
            .map(|s| TraceMasks {
                step: s.step,
                masks: s.masks.iter().map(|m| m.pixels().collect()).collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&file)?;
    let path = dir.join("trace.json");
    std::fs::write(&path, json).map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    dump::save_tensor(&dir.join("final_latent.dump"), "final_latent", &trace.final_latent)
}
