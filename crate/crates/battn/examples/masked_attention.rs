//! Build the {0, −∞} masks for a two-subject scene and push a random
//! attention map through them: masked entries land on exactly 0.0 and
//! every row still sums to 1.

use battn::bounded_attention::{bounded_attention, build_cross_mask, build_self_mask, MaskMode};
use battn::scene::parse_scene_str;
use battn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let scene = parse_scene_str(
        r#"{
          "latent": {"height": 4, "width": 4},
          "tokens": [
            {"text": "a", "embedding_id": 2, "role": "background"},
            {"text": "red", "embedding_id": 4, "role": "modifier"},
            {"text": "square", "embedding_id": 12, "role": "subject-noun"},
            {"text": "and", "embedding_id": 3, "role": "excluded"},
            {"text": "blue", "embedding_id": 6, "role": "modifier"},
            {"text": "circle", "embedding_id": 13, "role": "subject-noun"},
            {"text": "<eot>", "embedding_id": 1, "role": "eot"}
          ],
          "subjects": [
            {"name": "red square", "token_indices": [1, 2], "box": [0.0, 0.0, 0.5, 1.0]},
            {"name": "blue circle", "token_indices": [4, 5], "box": [0.5, 0.0, 1.0, 1.0]}
          ]
        }"#,
    )
    .expect("scene parses");
    let regions = scene.subject_regions().expect("boxes rasterize");

    let cross = build_cross_mask(&scene, &regions, MaskMode::Denoising).expect("cross mask");
    let (n, t) = (cross.rows(), cross.cols());
    println!("cross mask [{n} pixels x {t} tokens], denoising mode");
    println!("rows = pixels; '.' = open (0), 'x' = blocked (-inf)\n");
    print!("        ");
    for (ti, tok) in scene.tokens.iter().enumerate() {
        print!("{:>8}", format!("{}:{}", ti, tok.text));
    }
    println!();
    for x in [0usize, 5, 10, 15] {
        print!("pixel {x:>2}:");
        for c in 0..t {
            print!("{:>8}", if cross.at(x, c) == 0.0 { "." } else { "x" });
        }
        println!();
    }

    // random queries/keys/values, attention bounded by the mask
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let dh = 4;
    let q = Tensor::from_fn(&[n, dh], |_| rng.gen_range(-2.0..2.0));
    let k = Tensor::from_fn(&[t, dh], |_| rng.gen_range(-2.0..2.0));
    let v = Tensor::from_fn(&[t, dh], |_| rng.gen_range(-2.0..2.0));
    let (map, _out) =
        bounded_attention(&q, &k, &v, &cross, 1.0 / (dh as f64).sqrt()).expect("bounded attention");

    let zeros = map
        .data()
        .iter()
        .zip(cross.data())
        .filter(|&(_, m)| *m != 0.0)
        .filter(|&(v, _)| *v == 0.0)
        .count();
    let blocked = cross.data().iter().filter(|&&m| m != 0.0).count();
    println!("\nblocked entries that are exactly 0.0 after softmax: {zeros}/{blocked}");
    let worst = (0..n)
        .map(|x| ((0..t).map(|c| map.at(x, c)).sum::<f64>() - 1.0).abs())
        .fold(0.0f64, f64::max);
    println!("worst row-sum deviation from 1: {worst:.2e}");

    let self_mask: Tensor = build_self_mask(scene.latent.height, scene.latent.width, &regions);
    let open = self_mask.data().iter().filter(|&&m| m == 0.0).count();
    println!(
        "\nself mask [{0} x {0}]: {1} open pairs, {2} blocked (cross-subject) pairs",
        n,
        open,
        n * n - open
    );
}
