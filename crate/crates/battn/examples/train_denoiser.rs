//! Train a small denoiser on the synthetic corpus for a few hundred steps
//! and watch the noise-prediction loss fall. Uses the tiny model config so
//! it finishes in seconds; the CLI `train` subcommand runs the full-size
//! version of the same loop.

use battn::denoiser::dataset::DatasetConfig;
use battn::denoiser::train::{train_synthetic, TrainConfig, TrainSpec};
use battn::denoiser::tiny_config;

fn main() {
    let mut model = tiny_config();
    model.height = 8;
    model.width = 8;
    let spec = TrainSpec {
        model,
        data: DatasetConfig { height: 8, width: 8, min_subjects: 1, max_subjects: 2, ..Default::default() },
        train: TrainConfig { steps: 300, batch_size: 4, lr: 2e-3, cond_dropout: 0.1, seed: 0 },
    };

    let mut curve: Vec<(usize, f64)> = Vec::new();
    let ckpt = train_synthetic(
        &spec,
        Some(&mut |step, loss| {
            if step % 25 == 0 || step + 1 == spec.train.steps {
                curve.push((step, loss));
            }
        }),
    )
    .expect("training");

    println!("step   loss");
    for (step, loss) in &curve {
        let bar = "#".repeat((loss * 40.0).min(60.0) as usize);
        println!("{step:>4}   {loss:.4}  {bar}");
    }
    let first = ckpt.loss_history.iter().take(25).sum::<f64>() / 25.0;
    let last = ckpt.loss_history.iter().rev().take(25).sum::<f64>() / 25.0;
    println!("\nmean loss, first 25 steps: {first:.4}");
    println!("mean loss, last  25 steps: {last:.4}");
    assert!(last < first, "loss should fall over training");
}
