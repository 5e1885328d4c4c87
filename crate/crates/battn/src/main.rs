//! Thin command-line front end: `train`, `generate`, `eval`, `analyze`.
//! All behavior lives in the library; this file only parses flags, wires
//! files to library calls, and prints progress.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use battn::denoiser::train::{train_synthetic, TrainSpec};
use battn::denoiser::{AttentionRecord, AttnKind, Checkpoint};
use battn::dump;
use battn::error::{Error, Result};
use battn::harness::{
    ab_experiment, analyze_queries, compare_query_separation, read_query_dump, separation,
    write_query_dump, write_scatter_csv, FinalStepRecords, QueryLabeling,
};
use battn::img;
use battn::sampler::{sample_with_sink, write_trace, PassKind, RecordSink, SamplerConfig};
use battn::scene::{parse_scene, SceneSpec};

#[derive(Parser)]
#[command(name = "battn", version, about = "Layout-bounded diffusion sampling testbed")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the tiny denoiser on synthetic scenes.
    Train(TrainArgs),
    /// Sample an image for a scene, optionally tracing the run.
    Generate(GenArgs),
    /// Run the A/B layout benchmark over a scene directory.
    Eval(EvalArgs),
    /// Project traced queries to 2D and write a scatter CSV.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file deserializing to the training spec; defaults apply per field.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    out: PathBuf,
    /// Override the spec's optimizer step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Override the spec's rng seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene JSON file.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Image path; .png gets a PNG plus a PPM sibling, anything else a PPM.
    #[arg(long)]
    out: PathBuf,
    /// Directory for trace.json, final_latent.dump, queries.dump, scene.json.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Disable masks, guidance, and refinement.
    #[arg(long)]
    vanilla: bool,
    /// Write every conditional-pass attention record here, one file per
    /// (step, block, head, kind).
    #[arg(long)]
    dump_attention: Option<PathBuf>,
    /// Write each refinement round's masks here as PGM images.
    #[arg(long)]
    dump_masks: Option<PathBuf>,
    #[arg(long, default_value_t = 3.0)]
    cfg_scale: f64,
    /// Weight on attention mass outside the box in the guidance loss;
    /// defaults to the scene's subject count.
    #[arg(long)]
    alpha: Option<f64>,
    /// Guidance step size at the first guided step.
    #[arg(long, default_value_t = 8.0)]
    beta_start: f64,
    /// Guidance step size at the last guided step.
    #[arg(long, default_value_t = 2.0)]
    beta_end: f64,
    /// Inner descent iterations per guided step.
    #[arg(long, default_value_t = 5)]
    guidance_iters: usize,
    /// Stop the inner loop once the mean per-subject loss reaches this.
    #[arg(long, default_value_t = 0.2)]
    early_stop: f64,
    /// Fraction of the schedule left unguided (1.0 disables guidance).
    #[arg(long, default_value_t = 0.7)]
    t_guidance: f64,
    /// Steps between mask refinements (0 disables refinement).
    #[arg(long, default_value_t = 5)]
    refine_interval: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of scene JSON files (read in name order).
    #[arg(long)]
    scenes: PathBuf,
    /// Seed set: "0..7" (inclusive) or a comma list like "3,5,8".
    #[arg(long, default_value = "0..7")]
    seeds: String,
    /// Report JSON path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Also write every generated image here as PPM.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Scene for the query-separation comparison, folded into the report.
    #[arg(long)]
    query_scene: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trace directory from `generate --trace`.
    #[arg(long)]
    trace: PathBuf,
    /// Output CSV path (x, y, subject_label rows).
    #[arg(long)]
    out: PathBuf,
    /// Label pixels by cross-attention argmax with this background floor
    /// instead of by layout-box containment.
    #[arg(long)]
    argmax_floor: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let run = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Analyze(a) => cmd_analyze(a),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

// ── train ───────────────────────────────────────────────────────────────

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut spec: TrainSpec = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
            serde_json::from_str(&text)?
        }
        None => TrainSpec::default(),
    };
    if let Some(steps) = a.steps {
        spec.train.steps = steps;
    }
    if let Some(seed) = a.seed {
        spec.train.seed = seed;
    }
    let every = (spec.train.steps / 20).max(1);
    let mut progress = |step: usize, loss: f64| {
        if step % every == 0 || step + 1 == spec.train.steps {
            eprintln!("step {step:>5}  loss {loss:.5}");
        }
    };
    let ckpt = train_synthetic(&spec, Some(&mut progress))?;
    ckpt.save(&a.out)?;
    println!(
        "trained {} steps (seed {}), final loss {:.5} -> {}",
        ckpt.steps,
        ckpt.seed,
        ckpt.loss_history.last().copied().unwrap_or(f64::NAN),
        a.out.display()
    );
    Ok(())
}

// ── generate ────────────────────────────────────────────────────────────

/// Streams records into the optional per-record dump directory and keeps
/// the final step's conditional records for the trace's query dump.
struct GenSink {
    dump_dir: Option<PathBuf>,
    finals: FinalStepRecords,
}

impl RecordSink for GenSink {
    fn record(&mut self, step: usize, pass: PassKind, rec: &AttentionRecord) -> Result<()> {
        if let Some(dir) = &self.dump_dir {
            if pass == PassKind::Cond {
                write_record_dump(dir, step, rec)?;
            }
        }
        self.finals.record(step, pass, rec)
    }
}

fn write_record_dump(dir: &Path, step: usize, rec: &AttentionRecord) -> Result<()> {
    let kind = match rec.kind {
        AttnKind::SelfAttn => "self",
        AttnKind::CrossAttn => "cross",
    };
    let path = dir.join(format!("step{:03}.block{}.head{}.{}.dump", step, rec.layer, rec.head, kind));
    let file = std::fs::File::create(&path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    dump::write_tensor(&mut w, "q", &rec.q)?;
    dump::write_tensor(&mut w, "k", &rec.k)?;
    dump::write_tensor(&mut w, "logits", &rec.logits)?;
    if let Some(m) = &rec.mask {
        dump::write_tensor(&mut w, "mask", m)?;
    }
    dump::write_tensor(&mut w, "map", &rec.map)?;
    use std::io::Write as _;
    w.flush().map_err(|e| Error::io(format!("flush {}", path.display()), e))
}

fn cmd_generate(a: GenArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let scene = parse_scene(&a.scene)?;
    let mut cfg = SamplerConfig {
        steps: a.steps,
        cfg_scale: a.cfg_scale,
        seed: a.seed,
        vanilla: a.vanilla,
        ..Default::default()
    };
    cfg.guidance.alpha = a.alpha;
    cfg.guidance.beta_start = a.beta_start;
    cfg.guidance.beta_end = a.beta_end;
    cfg.guidance.iterations = a.guidance_iters;
    cfg.guidance.early_stop = a.early_stop;
    cfg.guidance.t_guidance = a.t_guidance;
    cfg.refine.interval = a.refine_interval;

    if let Some(dir) = &a.dump_attention {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("mkdir {}", dir.display()), e))?;
    }
    let mut sink = GenSink {
        dump_dir: a.dump_attention.clone(),
        finals: FinalStepRecords::new(a.steps),
    };
    let (z, trace) = sample_with_sink(&ckpt, &scene, &cfg, Some(&mut sink))?;

    img::write_auto(&a.out, &z)?;
    if a.out.extension().is_some_and(|e| e == "png") {
        img::write_ppm(&a.out.with_extension("ppm"), &z)?;
    }

    if let Some(dir) = &a.trace {
        write_trace(&trace, dir)?;
        let scene_json = serde_json::to_vec_pretty(&scene)?;
        let path = dir.join("scene.json");
        std::fs::write(&path, scene_json)
            .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
        write_query_dump(
            &sink.finals.records,
            ckpt.params.config.blocks,
            a.steps - 1,
            &dir.join("queries.dump"),
        )?;
    }

    if let Some(dir) = &a.dump_masks {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("mkdir {}", dir.display()), e))?;
        for snap in &trace.snapshots {
            for (si, mask) in snap.masks.iter().enumerate() {
                let path = dir.join(format!("step{:03}.subject{}.pgm", snap.step, si));
                img::write_region_pgm(&path, mask)?;
            }
        }
    }

    println!(
        "sampled {} steps in {:.1}s -> {}",
        a.steps,
        trace.wall_seconds,
        a.out.display()
    );
    Ok(())
}

// ── eval ────────────────────────────────────────────────────────────────

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = |t: &str| Error::ValidationError {
        path: "--seeds".into(),
        message: format!("cannot parse {t:?}; want \"a..b\" or \"a,b,c\""),
    };
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad(text))?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad(text))?;
        if hi < lo {
            return Err(bad(text));
        }
        return Ok((lo..=hi).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad(text))).collect()
}

fn read_scene_dir(dir: &Path) -> Result<Vec<(String, SceneSpec)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("read dir {}", dir.display()), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::ValidationError {
            path: dir.display().to_string(),
            message: "no scene .json files".into(),
        });
    }
    paths
        .into_iter()
        .map(|p| {
            let name =
                p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, parse_scene(&p)?))
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let scenes = read_scene_dir(&a.scenes)?;
    let seeds = parse_seeds(&a.seeds)?;
    let bounded = SamplerConfig { steps: a.steps, ..Default::default() };
    let vanilla = SamplerConfig { steps: a.steps, vanilla: true, ..Default::default() };

    let (mut report, images) = ab_experiment(&ckpt, &scenes, &seeds, &bounded, &vanilla)?;
    if let Some(dir) = &a.images {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("mkdir {}", dir.display()), e))?;
        for im in &images {
            let path = dir.join(format!("{}.seed{}.{}.ppm", im.scene, im.seed, im.arm));
            img::write_ppm(&path, &im.latent)?;
        }
    }
    if let Some(qpath) = &a.query_scene {
        let qscene = parse_scene(qpath)?;
        let qname = qpath.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        report.query_analysis = Some(compare_query_separation(
            &ckpt, &qname, &qscene, seeds[0], &bounded, &vanilla,
        )?);
    }
    let json = serde_json::to_vec_pretty(&report)?;
    std::fs::write(&a.out, json)
        .map_err(|e| Error::io(format!("write {}", a.out.display()), e))?;
    println!(
        "bounded  recall {:.3} spatial {:.3} | vanilla recall {:.3} spatial {:.3} -> {}",
        report.bounded.counting_recall,
        report.bounded.spatial_accuracy,
        report.vanilla.counting_recall,
        report.vanilla.spatial_accuracy,
        a.out.display()
    );
    Ok(())
}

// ── analyze ─────────────────────────────────────────────────────────────

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let (records, blocks) = read_query_dump(&a.trace.join("queries.dump"))?;
    let scene = parse_scene(&a.trace.join("scene.json"))?;
    let boxes = scene.subject_regions()?;
    let labeling = match a.argmax_floor {
        Some(floor) => QueryLabeling::CrossArgmax { floor },
        None => QueryLabeling::Masks(&boxes),
    };
    let scatter = analyze_queries(
        &records,
        &scene,
        labeling,
        battn::guidance::LayerSelect::All,
        blocks,
    )?;
    write_scatter_csv(&scatter, &a.out)?;
    match separation(&scatter) {
        Ok(sep) => println!(
            "{} queries, separation {:.3} -> {}",
            scatter.labels.len(),
            sep,
            a.out.display()
        ),
        Err(_) => println!("{} queries -> {}", scatter.labels.len(), a.out.display()),
    }
    Ok(())
}
