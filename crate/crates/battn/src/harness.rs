//! Evaluation: did the subjects land where the layout asked, and do the
//! model's queries for similar subjects stay separable?
//!
//! Detection is deliberately primitive — nearest-centroid color labels,
//! 4-connected components, bounding-box IoU — because the testbed's
//! palette is a handful of saturated colors on a gray field. No learned
//! detector is involved; every report header says so.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::denoiser::dataset::{subject_appearance, vocab, BACKGROUND_GRAY};
use crate::denoiser::{AttentionRecord, AttnKind, Checkpoint};
use crate::dump;
use crate::error::{Error, Result};
use crate::guidance::LayerSelect;
use crate::pca::pca2;
use crate::sampler::{sample, sample_with_sink, PassKind, RecordSink, SamplerConfig};
use crate::scene::{Region, SceneSpec};
use crate::tensor::Tensor;

// ── palette ─────────────────────────────────────────────────────────────

/// Reference colors for pixel classification. One entry is the background.
#[derive(Debug, Clone)]
pub struct Palette {
    pub entries: Vec<(String, [f64; 3])>,
    /// Index of the background entry.
    pub background: usize,
}

impl Palette {
    /// The dataset's eight saturated colors plus the gray background.
    pub fn standard() -> Self {
        let mut entries: Vec<(String, [f64; 3])> =
            vocab::COLORS.iter().map(|&(_, name, rgb)| (name.to_string(), rgb)).collect();
        entries.push(("gray".into(), BACKGROUND_GRAY));
        let background = entries.len() - 1;
        Palette { entries, background }
    }

    fn nearest(&self, rgb: [f64; 3]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, (_, c)) in self.entries.iter().enumerate() {
            let d: f64 = rgb.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    fn index_of(&self, rgb: [f64; 3]) -> Option<usize> {
        self.entries.iter().position(|(_, c)| *c == rgb)
    }
}

// ── detection ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    /// Palette index of the component's color.
    pub color: usize,
    pub color_name: String,
    pub pixels: usize,
    /// Inclusive (y0, x0, y1, x1).
    pub bbox: (usize, usize, usize, usize),
}

fn rect_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let area = |r: (usize, usize, usize, usize)| ((r.2 - r.0 + 1) * (r.3 - r.1 + 1)) as f64;
    let y0 = a.0.max(b.0);
    let x0 = a.1.max(b.1);
    let y1 = a.2.min(b.2);
    let x1 = a.3.min(b.3);
    if y1 < y0 || x1 < x0 {
        return 0.0;
    }
    let inter = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
    inter / (area(a) + area(b) - inter)
}

/// Label pixels by nearest palette color, group same-colored pixels into
/// 4-connected components, and keep components covering at least 1% of
/// the frame. Background-colored regions are never detections.
pub fn detect_subjects(
    image: &Tensor,
    scene: &SceneSpec,
    palette: &Palette,
) -> Result<Vec<Detection>> {
    let (h, w) = (scene.latent.height, scene.latent.width);
    let n = h * w;
    if image.shape() != [3, h, w] {
        return Err(Error::shape("detect_subjects", image.shape(), &[3, h, w]));
    }
    // the palette must know every color the scene promises
    for si in 0..scene.subjects.len() {
        let (rgb, _) = subject_appearance(scene, si)?;
        if palette.index_of(rgb).is_none() {
            return Err(Error::UnknownColor {
                subject: si,
                color: format!("{rgb:?} not in palette"),
            });
        }
    }

    let labels: Vec<usize> = (0..n)
        .map(|p| {
            palette.nearest([image.data()[p], image.data()[n + p], image.data()[2 * n + p]])
        })
        .collect();

    // 4-connected flood fill over equal labels
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for start in 0..n {
        if seen[start] || labels[start] == palette.background {
            continue;
        }
        let mut stack = vec![start];
        let mut members = Vec::new();
        seen[start] = true;
        while let Some(p) = stack.pop() {
            members.push(p);
            let (y, x) = (p / w, p % w);
            let mut push = |q: usize| {
                if !seen[q] && labels[q] == labels[start] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        if (members.len() as f64) < 0.01 * n as f64 {
            continue;
        }
        let region = Region::from_pixels(h, w, members.iter().copied());
        let bbox = region.bbox().expect("component is nonempty");
        out.push(Detection {
            color: labels[start],
            color_name: palette.entries[labels[start]].0.clone(),
            pixels: members.len(),
            bbox,
        });
    }
    Ok(out)
}

// ── layout metrics ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneOutcome {
    /// Expected subject color names, scene order.
    pub expected: Vec<String>,
    pub detections: Vec<Detection>,
    /// Color-multiset matches for this scene.
    pub true_positives: usize,
    /// Expected subjects whose color and box were both matched.
    pub spatial_hits: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutMetrics {
    pub counting_precision: f64,
    pub counting_recall: f64,
    pub counting_f1: f64,
    pub spatial_accuracy: f64,
    pub scenes: Vec<SceneOutcome>,
}

/// Micro-averaged counting precision/recall/F1 plus spatial accuracy over
/// a batch of generated images and their scenes.
pub fn layout_metrics(items: &[(&Tensor, &SceneSpec)]) -> Result<LayoutMetrics> {
    if items.is_empty() {
        return Err(Error::DegenerateData("layout_metrics on an empty batch".into()));
    }
    let palette = Palette::standard();
    let (mut tp, mut n_det, mut n_exp, mut hits) = (0usize, 0usize, 0usize, 0usize);
    let mut scenes = Vec::with_capacity(items.len());
    for (image, scene) in items {
        let detections = detect_subjects(image, scene, &palette)?;
        let boxes = scene.subject_regions()?;
        let mut expected_colors = Vec::new();
        let mut expected_counts: HashMap<usize, usize> = HashMap::new();
        let mut scene_hits = 0usize;
        for si in 0..scene.subjects.len() {
            let (rgb, _) = subject_appearance(scene, si)?;
            let color = palette.index_of(rgb).expect("validated above");
            expected_colors.push(palette.entries[color].0.clone());
            *expected_counts.entry(color).or_insert(0) += 1;
            let sbox = boxes[si].bbox().expect("validated boxes are nonempty");
            if detections.iter().any(|d| d.color == color && rect_iou(d.bbox, sbox) >= 0.5) {
                scene_hits += 1;
            }
        }
        let mut detected_counts: HashMap<usize, usize> = HashMap::new();
        for d in &detections {
            *detected_counts.entry(d.color).or_insert(0) += 1;
        }
        let scene_tp: usize = expected_counts
            .iter()
            .map(|(color, &want)| want.min(detected_counts.get(color).copied().unwrap_or(0)))
            .sum();
        tp += scene_tp;
        n_det += detections.len();
        n_exp += scene.subjects.len();
        hits += scene_hits;
        scenes.push(SceneOutcome {
            expected: expected_colors,
            detections,
            true_positives: scene_tp,
            spatial_hits: scene_hits,
        });
    }
    let precision = if n_det > 0 { tp as f64 / n_det as f64 } else { 0.0 };
    let recall = if n_exp > 0 { tp as f64 / n_exp as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let spatial = if n_exp > 0 { hits as f64 / n_exp as f64 } else { 0.0 };
    Ok(LayoutMetrics {
        counting_precision: precision,
        counting_recall: recall,
        counting_f1: f1,
        spatial_accuracy: spatial,
        scenes,
    })
}

// ── query analysis ──────────────────────────────────────────────────────

/// How pixels (hence their queries) get subject labels.
#[derive(Debug, Clone, Copy)]
pub enum QueryLabeling<'a> {
    /// A pixel belongs to the first mask that contains it.
    Masks(&'a [Region]),
    /// Argmax over per-subject token-averaged cross maps; a pixel whose
    /// best score does not exceed `floor` stays background.
    CrossArgmax { floor: f64 },
}

#[derive(Debug, Clone)]
pub struct QueryScatter {
    /// [N, 2] projected queries.
    pub points: Tensor,
    /// Subject index per pixel, −1 for background.
    pub labels: Vec<isize>,
    pub explained_variance: [f64; 2],
}

/// Project every pixel's cross-attention query (feature-concatenated over
/// the selected records) to 2D and label it by subject.
pub fn analyze_queries(
    records: &[AttentionRecord],
    scene: &SceneSpec,
    labeling: QueryLabeling,
    layers: LayerSelect,
    blocks: usize,
) -> Result<QueryScatter> {
    let selected: Vec<&AttentionRecord> = records
        .iter()
        .filter(|r| r.kind == AttnKind::CrossAttn && layers.selects(r.layer, blocks))
        .collect();
    if selected.is_empty() {
        return Err(Error::NoRecords("no cross-attention records selected".into()));
    }
    let n = selected[0].q.rows();
    let d_total: usize = selected.iter().map(|r| r.q.cols()).sum();
    let mut feats = Tensor::zeros(&[n, d_total]);
    let mut off = 0;
    for r in &selected {
        let d = r.q.cols();
        for x in 0..n {
            for j in 0..d {
                feats.set(x, off + j, r.q.at(x, j));
            }
        }
        off += d;
    }
    let labels: Vec<isize> = match labeling {
        QueryLabeling::Masks(masks) => (0..n)
            .map(|p| masks.iter().position(|m| m.contains(p)).map_or(-1, |i| i as isize))
            .collect(),
        QueryLabeling::CrossArgmax { floor } => {
            let t = selected[0].map.cols();
            let mut mean = Tensor::zeros(&[n, t]);
            for r in &selected {
                mean = mean.add(&r.map)?;
            }
            let mean = mean.scale(1.0 / selected.len() as f64);
            (0..n)
                .map(|p| {
                    let mut best = -1isize;
                    let mut best_score = floor;
                    for (si, s) in scene.subjects.iter().enumerate() {
                        let score: f64 =
                            s.token_indices.iter().map(|&ti| mean.at(p, ti)).sum::<f64>()
                                / s.token_indices.len() as f64;
                        if score > best_score {
                            best_score = score;
                            best = si as isize;
                        }
                    }
                    best
                })
                .collect()
        }
    };
    let p = pca2(&feats)?;
    Ok(QueryScatter {
        points: p.projections,
        labels,
        explained_variance: p.explained_variance_ratio,
    })
}

/// Between-class centroid distance over pooled within-class std of the
/// projected subject points (background excluded). With more than two
/// subjects the numerator is the mean pairwise centroid distance.
pub fn separation(scatter: &QueryScatter) -> Result<f64> {
    let mut groups: HashMap<isize, Vec<[f64; 2]>> = HashMap::new();
    for (i, &l) in scatter.labels.iter().enumerate() {
        if l >= 0 {
            groups.entry(l).or_default().push([scatter.points.at(i, 0), scatter.points.at(i, 1)]);
        }
    }
    if groups.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "separation needs two labeled groups, got {}",
            groups.len()
        )));
    }
    let mut keys: Vec<isize> = groups.keys().copied().collect();
    keys.sort();
    let centroid = |pts: &[[f64; 2]]| {
        let m = pts.len() as f64;
        [pts.iter().map(|p| p[0]).sum::<f64>() / m, pts.iter().map(|p| p[1]).sum::<f64>() / m]
    };
    let centroids: Vec<[f64; 2]> = keys.iter().map(|k| centroid(&groups[k])).collect();
    let mut between = 0.0;
    let mut pairs = 0usize;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            let dx = centroids[i][0] - centroids[j][0];
            let dy = centroids[i][1] - centroids[j][1];
            between += (dx * dx + dy * dy).sqrt();
            pairs += 1;
        }
    }
    between /= pairs as f64;
    let mut sq = 0.0;
    let mut count = 0usize;
    for (k, c) in keys.iter().zip(&centroids) {
        for p in &groups[k] {
            sq += (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            count += 1;
        }
    }
    let std = (sq / count as f64).sqrt();
    if std == 0.0 {
        // all points sit on their centroids; identical centroids mean zero
        // separation, distinct ones are infinitely separable
        return Ok(if between == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(between / std)
}

// ── capture and storage of analysis records ─────────────────────────────

/// Keeps the conditional pass's attention records from the final step of
/// a sampled run.
pub struct FinalStepRecords {
    last_step: usize,
    pub records: Vec<AttentionRecord>,
}

impl FinalStepRecords {
    pub fn new(steps: usize) -> Self {
        Self { last_step: steps.saturating_sub(1), records: Vec::new() }
    }
}

impl RecordSink for FinalStepRecords {
    fn record(&mut self, step: usize, pass: PassKind, rec: &AttentionRecord) -> Result<()> {
        if step == self.last_step && pass == PassKind::Cond {
            self.records.push(rec.clone());
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryDumpManifest {
    kind: String,
    version: u32,
    blocks: usize,
    step: usize,
}

/// Persist the cross-attention queries and maps of captured records so
/// analysis can run on a stored trace.
pub fn write_query_dump(
    records: &[AttentionRecord],
    blocks: usize,
    step: usize,
    path: &Path,
) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    for r in records {
        if r.kind != AttnKind::CrossAttn {
            continue;
        }
        dump::write_tensor(&mut w, &format!("q.b{}.h{}", r.layer, r.head), &r.q)?;
        dump::write_tensor(&mut w, &format!("map.b{}.h{}", r.layer, r.head), &r.map)?;
    }
    let manifest = QueryDumpManifest {
        kind: "battn-queries".into(),
        version: 1,
        blocks,
        step,
    };
    dump::write_manifest(&mut w, &serde_json::to_vec(&manifest)?)
}

/// Load a query dump back into skeleton records (queries and maps only).
pub fn read_query_dump(path: &Path) -> Result<(Vec<AttentionRecord>, usize)> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut r = std::io::BufReader::new(file);
    let mut parts: HashMap<(usize, usize), (Option<Tensor>, Option<Tensor>)> = HashMap::new();
    let mut manifest: Option<QueryDumpManifest> = None;
    while let Some(frame) = dump::read_frame(&mut r)? {
        match frame {
            dump::Frame::Tensor(header, tensor) => {
                let name = header.name;
                let t = match tensor {
                    dump::DynTensor::F64(t) => t,
                    dump::DynTensor::F32(_) => {
                        return Err(Error::BadDump("query dumps are f64".into()))
                    }
                };
                let mut split = name.split('.');
                let what = split.next().unwrap_or("");
                let b: usize = split
                    .next()
                    .and_then(|s| s.strip_prefix('b'))
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::BadDump(format!("bad frame name {name}")))?;
                let h: usize = split
                    .next()
                    .and_then(|s| s.strip_prefix('h'))
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::BadDump(format!("bad frame name {name}")))?;
                let entry = parts.entry((b, h)).or_insert((None, None));
                match what {
                    "q" => entry.0 = Some(t),
                    "map" => entry.1 = Some(t),
                    _ => return Err(Error::BadDump(format!("bad frame name {name}"))),
                }
            }
            dump::Frame::Manifest(bytes) => {
                let m: QueryDumpManifest = serde_json::from_slice(&bytes)?;
                if m.kind != "battn-queries" {
                    return Err(Error::BadDump(format!("not a query dump: kind {}", m.kind)));
                }
                manifest = Some(m);
            }
        }
    }
    let manifest =
        manifest.ok_or_else(|| Error::BadDump("query dump has no manifest".into()))?;
    let mut keys: Vec<(usize, usize)> = parts.keys().copied().collect();
    keys.sort();
    let mut records = Vec::new();
    for key in keys {
        let (q, map) = parts.remove(&key).unwrap();
        let (q, map) = match (q, map) {
            (Some(q), Some(map)) => (q, map),
            _ => return Err(Error::BadDump(format!("incomplete record b{}.h{}", key.0, key.1))),
        };
        records.push(AttentionRecord {
            layer: key.0,
            kind: AttnKind::CrossAttn,
            head: key.1,
            k: Tensor::zeros(&[map.cols(), q.cols()]),
            logits: Tensor::zeros(&[1, 1]),
            mask: None,
            map,
            map_node: 0,
            q,
        });
    }
    Ok((records, manifest.blocks))
}

// ── A/B experiment ──────────────────────────────────────────────────────

pub const REPORT_HEADER: &str = "Layout fidelity measured with nearest-centroid color \
classification and 4-connected components on the synthetic palette; no learned detector \
is involved. Counting metrics compare expected and detected color multisets per scene; \
spatial accuracy is the fraction of expected subjects whose color matched a component \
with bounding-box IoU >= 0.5 against the layout box.";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryComparison {
    pub scene: String,
    pub seed: u64,
    pub vanilla_separation: f64,
    pub bounded_separation: f64,
    /// The ordering claim: bounded keeps similar subjects' queries further
    /// apart, relative to cloud spread, than vanilla does.
    pub bounded_exceeds_vanilla: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AbReport {
    pub header: String,
    pub scene_names: Vec<String>,
    pub seeds: Vec<u64>,
    pub bounded: LayoutMetrics,
    pub vanilla: LayoutMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_analysis: Option<QueryComparison>,
}

/// One generated image from an experiment arm.
pub struct RunImage {
    pub scene: String,
    pub seed: u64,
    pub arm: &'static str,
    pub latent: Tensor,
}

/// Generate every (scene, seed) pair under both configurations and score
/// the two arms with the same metrics.
pub fn ab_experiment(
    ckpt: &Checkpoint,
    scenes: &[(String, SceneSpec)],
    seeds: &[u64],
    bounded: &SamplerConfig,
    vanilla: &SamplerConfig,
) -> Result<(AbReport, Vec<RunImage>)> {
    if scenes.is_empty() || seeds.is_empty() {
        return Err(Error::DegenerateData("need at least one scene and one seed".into()));
    }
    let mut images = Vec::new();
    let run_arm = |arm: &'static str,
                       base: &SamplerConfig,
                       images: &mut Vec<RunImage>|
     -> Result<Vec<Tensor>> {
        let mut latents = Vec::new();
        for (name, scene) in scenes {
            for &seed in seeds {
                let cfg = SamplerConfig { seed, ..base.clone() };
                let (z, _) = sample(ckpt, scene, &cfg)?;
                latents.push(z.clone());
                images.push(RunImage { scene: name.clone(), seed, arm, latent: z });
            }
        }
        Ok(latents)
    };
    let bounded_latents = run_arm("bounded", bounded, &mut images)?;
    let vanilla_latents = run_arm("vanilla", vanilla, &mut images)?;
    let score = |latents: &[Tensor]| -> Result<LayoutMetrics> {
        let mut items: Vec<(&Tensor, &SceneSpec)> = Vec::new();
        let mut i = 0;
        for (_, scene) in scenes {
            for _ in seeds {
                items.push((&latents[i], scene));
                i += 1;
            }
        }
        layout_metrics(&items)
    };
    let bounded_metrics = score(&bounded_latents)?;
    let vanilla_metrics = score(&vanilla_latents)?;
    Ok((
        AbReport {
            header: REPORT_HEADER.into(),
            scene_names: scenes.iter().map(|(n, _)| n.clone()).collect(),
            seeds: seeds.to_vec(),
            bounded: bounded_metrics,
            vanilla: vanilla_metrics,
            query_analysis: None,
        },
        images,
    ))
}

/// Run one scene under both arms and compare query separability, labeling
/// pixels by the scene's layout boxes in both cases.
pub fn compare_query_separation(
    ckpt: &Checkpoint,
    scene_name: &str,
    scene: &SceneSpec,
    seed: u64,
    bounded: &SamplerConfig,
    vanilla: &SamplerConfig,
) -> Result<QueryComparison> {
    let blocks = ckpt.params.config.blocks;
    let boxes = scene.subject_regions()?;
    let run = |base: &SamplerConfig| -> Result<f64> {
        let cfg = SamplerConfig { seed, ..base.clone() };
        let mut sink = FinalStepRecords::new(cfg.steps);
        sample_with_sink(ckpt, scene, &cfg, Some(&mut sink))?;
        let scatter = analyze_queries(
            &sink.records,
            scene,
            QueryLabeling::Masks(&boxes),
            LayerSelect::Deepest,
            blocks,
        )?;
        separation(&scatter)
    };
    let bounded_sep = run(bounded)?;
    let vanilla_sep = run(vanilla)?;
    Ok(QueryComparison {
        scene: scene_name.to_string(),
        seed,
        vanilla_separation: vanilla_sep,
        bounded_separation: bounded_sep,
        bounded_exceeds_vanilla: bounded_sep > vanilla_sep,
    })
}

/// Write scatter points as `x,y,subject_label` CSV rows.
pub fn write_scatter_csv(scatter: &QueryScatter, path: &Path) -> Result<()> {
    let mut out = String::from("x,y,subject_label\n");
    for i in 0..scatter.points.rows() {
        out.push_str(&format!(
            "{},{},{}\n",
            scatter.points.at(i, 0),
            scatter.points.at(i, 1),
            scatter.labels[i]
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("write {}", path.display()), e))
}
