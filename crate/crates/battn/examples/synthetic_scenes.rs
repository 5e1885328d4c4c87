//! Draw a few random scenes from the dataset and render them as ASCII:
//! each subject is a colored shape inscribed in its layout box on a dim
//! gray field.

use battn::denoiser::dataset::{render_scene, sample_scene, subject_appearance, DatasetConfig};
use battn::scene::SceneSpec;
use battn::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn ascii(image: &Tensor, scene: &SceneSpec) {
    let (h, w) = (scene.latent.height, scene.latent.width);
    let n = h * w;
    // nearest palette letter per pixel
    let mut letters = vec!['.'; n];
    for p in 0..n {
        let rgb = [image.data()[p], image.data()[n + p], image.data()[2 * n + p]];
        let mut best = ('.', 0.6); // anything dimmer stays background
        for si in 0..scene.subjects.len() {
            let (c, _) = subject_appearance(scene, si).expect("subject has a color");
            let d: f64 = rgb.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (scene.subjects[si].name.chars().next().unwrap_or('?'), d);
            }
        }
        letters[p] = best.0;
    }
    for r in 0..h {
        let row: String = (0..w).map(|c| letters[r * w + c]).collect();
        println!("    {row}");
    }
}

fn main() {
    let cfg = DatasetConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for i in 0..4 {
        let scene = sample_scene(&cfg, &mut rng);
        let image = render_scene(&scene, &mut rng, cfg.bg_amplitude).expect("render");
        let prompt: Vec<&str> = scene.tokens.iter().map(|t| t.text.as_str()).collect();
        println!("scene {i}: \"{}\"", prompt.join(" "));
        for s in &scene.subjects {
            let [x0, y0, x1, y1] = s.box_;
            println!("  {:<16} box x [{x0:.2},{x1:.2}) y [{y0:.2},{y1:.2})", s.name);
        }
        ascii(&image, &scene);
        println!();
    }
}
