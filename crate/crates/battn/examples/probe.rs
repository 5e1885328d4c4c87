// scratch probe: cfg-scale sweep + guidance gradient magnitudes on the trained ckpt
use battn::denoiser::Checkpoint;
use battn::harness::{detect_subjects, layout_metrics, Palette};
use battn::sampler::{sample, SamplerConfig};
use battn::scene::parse_scene;
use std::path::Path;
use std::time::Instant;

fn main() {
    let ckpt = Checkpoint::load(Path::new("artifacts/model.ckpt")).unwrap();
    let pal = Palette::standard();
    let scenes: Vec<_> = ["leak_01", "leak_02", "leak_04"]
        .iter()
        .map(|n| parse_scene(Path::new(&format!("docs/scenes/leakage/{n}.json"))).unwrap())
        .collect();

    for cfg_scale in [1.0, 1.5, 2.0, 3.0] {
        for vanilla in [true, false] {
            let t0 = Instant::now();
            let mut outs = Vec::new();
            let mut peak = 0.0f64;
            for scene in &scenes {
                for seed in [0u64, 1] {
                    let cfg = SamplerConfig { vanilla, cfg_scale, seed, ..Default::default() };
                    let (z, trace) = sample(&ckpt, scene, &cfg).unwrap();
                    peak = peak.max(z.data().iter().fold(0.0f64, |m, &v| m.max(v.abs())));
                    if !vanilla && cfg_scale == 1.5 && seed == 0 {
                        if let Some(g) = &trace.steps[0].guidance {
                            let gs: Vec<String> =
                                g.iter().map(|i| format!("{:.2e}", i.grad_norm)).collect();
                            eprintln!("  [grad norms step0 {}]", gs.join(" "));
                        }
                    }
                    outs.push((z, scene));
                }
            }
            let pairs: Vec<(&battn::tensor::Tensor, &battn::scene::SceneSpec)> =
                outs.iter().map(|(z, s)| (z, *s)).collect();
            let m = layout_metrics(&pairs).unwrap();
            println!(
                "cfg {cfg_scale:.1} {}: P {:.3} R {:.3} spatial {:.3}  max|z| {:.1}  ({:.0}s)",
                if vanilla { "vanilla" } else { "bounded" },
                m.counting_precision,
                m.counting_recall,
                m.spatial_accuracy,
                peak,
                t0.elapsed().as_secs_f64()
            );
            let d = detect_subjects(&outs[0].0, outs[0].1, &pal).unwrap();
            println!(
                "    sample dets: {:?}",
                d.iter().map(|x| (x.color_name.clone(), x.pixels)).collect::<Vec<_>>()
            );
        }
    }
}
