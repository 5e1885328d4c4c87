//! Run the inner latent-optimization loop on a tiny untrained model and
//! watch the loss fall: each subject's attention mass is pushed inside its
//! layout box. Runs once with no masks (the optimizer does all the work)
//! and once with guidance masks (the usual pipeline setup, where masking
//! already confines most of the mass and the optimizer cleans up the rest).

use battn::bounded_attention::{build_cross_mask, build_self_mask, MaskMode};
use battn::denoiser::{tiny_config, AttnMasks, DenoiserParams};
use battn::guidance::{run_guidance_phase, subject_slots, GuidanceConfig, GuidanceOutcome};
use battn::scene::parse_scene_str;
use battn::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

const SCENE: &str = r#"{
  "latent": { "height": 4, "width": 4 },
  "tokens": [
    { "text": "a",      "embedding_id": 2,  "role": "background" },
    { "text": "red",    "embedding_id": 4,  "role": "modifier" },
    { "text": "square", "embedding_id": 12, "role": "subject-noun" },
    { "text": "blue",   "embedding_id": 5,  "role": "modifier" },
    { "text": "circle", "embedding_id": 13, "role": "subject-noun" },
    { "text": "<eot>",  "embedding_id": 1,  "role": "eot" }
  ],
  "subjects": [
    { "name": "red square",  "token_indices": [1, 2], "box": [0.0, 0.0, 0.5, 1.0] },
    { "name": "blue circle", "token_indices": [3, 4], "box": [0.5, 0.0, 1.0, 1.0] }
  ]
}"#;

fn report(label: &str, out: &GuidanceOutcome) {
    println!("{label}");
    println!("  iter  mean_loss  objective   grad_norm  applied");
    for (i, it) in out.iterations.iter().enumerate() {
        println!(
            "  {i:>4}  {:>9.5}  {:>9.5}  {:>10.4}  {}",
            it.mean_loss, it.objective, it.grad_norm, it.applied
        );
    }
    let first = out.iterations.first().unwrap().mean_loss;
    let last = out.iterations.last().unwrap().mean_loss;
    println!("  mean loss {first:.4} -> {last:.4}, early stopped: {}\n", out.early_stopped);
}

fn main() {
    let scene = parse_scene_str(SCENE).expect("scene");
    let model = tiny_config();
    let params = DenoiserParams::init(&model, 3).expect("params");

    let boxes = scene.subject_regions().expect("boxes");
    let slots = subject_slots(&scene, &boxes).expect("slots");
    let ctx = scene.embedding_ids();

    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let z = Tensor::from_fn(&[3, 4, 4], |_| StandardNormal.sample(&mut rng));

    let cfg = GuidanceConfig { iterations: 10, early_stop: 0.02, ..Default::default() };
    let beta = 8.0;

    // nothing confines attention except the optimizer
    let unmasked = run_guidance_phase(
        &params, &model, &AttnMasks::default(), &slots, z.clone(), 800, &ctx, &cfg, beta, 0,
    )
    .expect("unmasked phase");
    report("no masks:", &unmasked);

    // the pipeline's setup: masks bound attention, optimization tightens it
    let masks = AttnMasks {
        cross: Some(build_cross_mask(&scene, &boxes, MaskMode::Guidance).expect("cross mask")),
        self_attn: Some(build_self_mask(scene.latent.height, scene.latent.width, &boxes)),
    };
    let masked = run_guidance_phase(
        &params, &model, &masks, &slots, z, 800, &ctx, &cfg, beta, 0,
    )
    .expect("masked phase");
    report("guidance masks on:", &masked);

    println!(
        "per-subject losses at the first masked iteration: {:?}",
        masked.iterations[0]
            .losses
            .iter()
            .map(|l| (l * 1e4).round() / 1e4)
            .collect::<Vec<_>>()
    );
}
