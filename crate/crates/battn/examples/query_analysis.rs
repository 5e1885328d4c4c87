//! Do bounded runs keep subjects' pixel queries apart? Train a small
//! model, sample the same two-similar-subject scene with and without
//! bounding, project the final-step queries to 2-D, and compare how far
//! apart the per-subject clouds sit.

use battn::denoiser::dataset::DatasetConfig;
use battn::denoiser::train::{train_synthetic, TrainConfig, TrainSpec};
use battn::denoiser::DenoiserConfig;
use battn::guidance::LayerSelect;
use battn::harness::{
    analyze_queries, compare_query_separation, separation, FinalStepRecords, QueryLabeling,
};
use battn::sampler::{sample_with_sink, SamplerConfig};
use battn::scene::parse_scene_str;

const SCENE: &str = r#"{
  "latent": {"height": 8, "width": 8},
  "tokens": [
    {"text": "a", "embedding_id": 2, "role": "background"},
    {"text": "red", "embedding_id": 4, "role": "modifier"},
    {"text": "square", "embedding_id": 12, "role": "subject-noun"},
    {"text": "and", "embedding_id": 3, "role": "excluded"},
    {"text": "a", "embedding_id": 2, "role": "background"},
    {"text": "orange", "embedding_id": 10, "role": "modifier"},
    {"text": "square", "embedding_id": 12, "role": "subject-noun"},
    {"text": "<eot>", "embedding_id": 1, "role": "eot"}
  ],
  "subjects": [
    {"name": "red square", "token_indices": [1, 2], "box": [0.0, 0.125, 0.5, 0.875]},
    {"name": "orange square", "token_indices": [5, 6], "box": [0.5, 0.125, 1.0, 0.875]}
  ]
}"#;

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
        train: TrainConfig { steps: 400, ..Default::default() },
    };
    eprintln!("training a small denoiser ({} steps)…", spec.train.steps);
    let ckpt = train_synthetic(&spec, None).expect("training");
    let scene = parse_scene_str(SCENE).expect("scene");

    let bounded = SamplerConfig { steps: 20, ..Default::default() };
    let vanilla = SamplerConfig { vanilla: true, ..bounded.clone() };

    // the packaged comparison…
    let cmp = compare_query_separation(&ckpt, "similar pair", &scene, 5, &bounded, &vanilla)
        .expect("comparison");
    println!("scene: {} (two same-shape subjects, close colors)", cmp.scene);
    println!("vanilla separation: {:.4}", cmp.vanilla_separation);
    println!("bounded separation: {:.4}", cmp.bounded_separation);
    println!("bounded exceeds vanilla: {}", cmp.bounded_exceeds_vanilla);

    // …and the pieces it is made of, for one arm
    let cfg = SamplerConfig { seed: 5, ..bounded };
    let mut sink = FinalStepRecords::new(cfg.steps);
    sample_with_sink(&ckpt, &scene, &cfg, Some(&mut sink)).expect("sampling");
    let boxes = scene.subject_regions().expect("boxes");
    let scatter = analyze_queries(
        &sink.records,
        &scene,
        QueryLabeling::Masks(&boxes),
        LayerSelect::Deepest,
        ckpt.params.config.blocks,
    )
    .expect("pca");
    println!(
        "\nbounded arm, seed 5: {} query points, explained variance {:?}",
        scatter.points.rows(),
        scatter.explained_variance.iter().map(|v| (v * 1e3).round() / 1e3).collect::<Vec<_>>()
    );
    println!("separation recomputed: {:.4}", separation(&scatter).expect("separation"));

    // centroid of each labeled cloud
    for (si, name) in ["subject 0", "subject 1"].iter().enumerate() {
        let pts: Vec<[f64; 2]> = scatter
            .labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == si as isize)
            .map(|(i, _)| [scatter.points.at(i, 0), scatter.points.at(i, 1)])
            .collect();
        let cx = pts.iter().map(|p| p[0]).sum::<f64>() / pts.len() as f64;
        let cy = pts.iter().map(|p| p[1]).sum::<f64>() / pts.len() as f64;
        println!("{name}: {} px, centroid ({cx:.3}, {cy:.3})", pts.len());
    }
}
