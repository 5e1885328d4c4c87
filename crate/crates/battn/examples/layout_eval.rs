//! A miniature A/B benchmark: sample two scenes under a few seeds with and
//! without bounding, detect colored components in each image, and print
//! layout-fidelity metrics for both arms side by side. The `eval` CLI
//! subcommand runs the full-size version of this and writes a JSON report.

use battn::denoiser::dataset::DatasetConfig;
use battn::denoiser::train::{train_synthetic, TrainConfig, TrainSpec};
use battn::denoiser::DenoiserConfig;
use battn::harness::{ab_experiment, detect_subjects, Palette};
use battn::sampler::SamplerConfig;
use battn::scene::parse_scene_str;

fn scene(body: &str) -> battn::scene::SceneSpec {
    parse_scene_str(body).expect("scene")
}

fn main() {
    let spec = TrainSpec {
        model: DenoiserConfig {
            height: 8,
            width: 8,
            channels: 16,
            blocks: 2,
            heads: 1,
            token_embed_dim: 16,
            time_embed_dim: 16,
            vocab_size: 16,
        },
        data: DatasetConfig { height: 8, width: 8, max_subjects: 2, ..Default::default() },
        train: TrainConfig { steps: 500, ..Default::default() },
    };
    eprintln!("training a small denoiser ({} steps)…", spec.train.steps);
    let ckpt = train_synthetic(&spec, None).expect("training");

    let scenes = vec![
        (
            "red-blue".to_string(),
            scene(
                r#"{
                  "latent": {"height": 8, "width": 8},
                  "tokens": [
                    {"text": "a", "embedding_id": 2, "role": "background"},
                    {"text": "red", "embedding_id": 4, "role": "modifier"},
                    {"text": "square", "embedding_id": 12, "role": "subject-noun"},
                    {"text": "and", "embedding_id": 3, "role": "excluded"},
                    {"text": "a", "embedding_id": 2, "role": "background"},
                    {"text": "blue", "embedding_id": 6, "role": "modifier"},
                    {"text": "circle", "embedding_id": 13, "role": "subject-noun"},
                    {"text": "<eot>", "embedding_id": 1, "role": "eot"}
                  ],
                  "subjects": [
                    {"name": "red square", "token_indices": [1, 2], "box": [0.0, 0.125, 0.5, 0.875]},
                    {"name": "blue circle", "token_indices": [5, 6], "box": [0.5, 0.125, 1.0, 0.875]}
                  ]
                }"#,
            ),
        ),
        (
            "green-yellow".to_string(),
            scene(
                r#"{
                  "latent": {"height": 8, "width": 8},
                  "tokens": [
                    {"text": "a", "embedding_id": 2, "role": "background"},
                    {"text": "green", "embedding_id": 5, "role": "modifier"},
                    {"text": "triangle", "embedding_id": 14, "role": "subject-noun"},
                    {"text": "and", "embedding_id": 3, "role": "excluded"},
                    {"text": "a", "embedding_id": 2, "role": "background"},
                    {"text": "yellow", "embedding_id": 7, "role": "modifier"},
                    {"text": "square", "embedding_id": 12, "role": "subject-noun"},
                    {"text": "<eot>", "embedding_id": 1, "role": "eot"}
                  ],
                  "subjects": [
                    {"name": "green triangle", "token_indices": [1, 2], "box": [0.125, 0.0, 0.875, 0.5]},
                    {"name": "yellow square", "token_indices": [5, 6], "box": [0.125, 0.5, 0.875, 1.0]}
                  ]
                }"#,
            ),
        ),
    ];

    let bounded = SamplerConfig { steps: 20, ..Default::default() };
    let vanilla = SamplerConfig { vanilla: true, ..bounded.clone() };
    let seeds = [0u64, 1, 2];

    eprintln!("sampling {} scenes × {} seeds × 2 arms…", scenes.len(), seeds.len());
    let (report, images) =
        ab_experiment(&ckpt, &scenes, &seeds, &bounded, &vanilla).expect("experiment");

    println!("arm       precision  recall   f1      spatial");
    for (arm, m) in [("bounded", &report.bounded), ("vanilla", &report.vanilla)] {
        println!(
            "{arm:<8}  {:>9.3}  {:>6.3}  {:>6.3}  {:>7.3}",
            m.counting_precision, m.counting_recall, m.counting_f1, m.spatial_accuracy
        );
    }

    // look inside one run
    let palette = Palette::standard();
    let pick = images.iter().find(|im| im.arm == "bounded" && im.seed == 0).expect("image");
    let scene0 = &scenes.iter().find(|(n, _)| *n == pick.scene).expect("scene").1;
    let dets = detect_subjects(&pick.latent, scene0, &palette).expect("detection");
    println!("\nbounded {} seed 0 detections:", pick.scene);
    for d in &dets {
        println!("  {:<7} {:>2} px  bbox {:?}", d.color_name, d.pixels, d.bbox);
    }
}
