//! Synthetic training data: colored shapes on a wobbly gray background.
//!
//! The domain is deliberately tiny — a fixed vocabulary of colors and
//! shapes, scenes of one to three subjects in disjoint boxes — so a small
//! model can learn it on a CPU in minutes, while still exercising the real
//! failure mode this crate targets: multiple subjects whose attributes can
//! leak into each other during generation.
//!
//! Rendered images are [3, H, W] in [−1, 1]. The prompt for a scene reads
//! like "a red square and a blue circle": articles carry the background
//! role, conjunctions are excluded from attention, and each subject owns a
//! modifier + noun pair.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{LatentDims, Role, SceneSpec, SubjectSpec, TokenSpec};
use crate::tensor::Tensor;

// ── vocabulary ──────────────────────────────────────────────────────────

/// Token-table ids. The table itself is larger (spare rows), but these are
/// the ids the dataset emits.
pub mod vocab {
    pub const NULL: usize = 0;
    pub const EOT: usize = 1;
    pub const A: usize = 2;
    pub const AND: usize = 3;

    /// (id, word, rgb in [−1,1])
    pub const COLORS: [(usize, &str, [f64; 3]); 8] = [
        (4, "red", [1.0, -1.0, -1.0]),
        (5, "green", [-1.0, 1.0, -1.0]),
        (6, "blue", [-1.0, -1.0, 1.0]),
        (7, "yellow", [1.0, 1.0, -1.0]),
        (8, "magenta", [1.0, -1.0, 1.0]),
        (9, "cyan", [-1.0, 1.0, 1.0]),
        (10, "orange", [1.0, 0.0, -1.0]),
        (11, "white", [1.0, 1.0, 1.0]),
    ];

    /// (id, word)
    pub const SHAPES: [(usize, &str); 3] = [(12, "square"), (13, "circle"), (14, "triangle")];

    pub fn color_rgb(id: usize) -> Option<[f64; 3]> {
        COLORS.iter().find(|&&(i, _, _)| i == id).map(|&(_, _, rgb)| rgb)
    }

    pub fn color_name(id: usize) -> Option<&'static str> {
        COLORS.iter().find(|&&(i, _, _)| i == id).map(|&(_, n, _)| n)
    }

    pub fn color_id(name: &str) -> Option<usize> {
        COLORS.iter().find(|&&(_, n, _)| n == name).map(|&(i, _, _)| i)
    }

    pub fn shape_name(id: usize) -> Option<&'static str> {
        SHAPES.iter().find(|&&(i, _)| i == id).map(|&(_, n)| n)
    }
}

/// Mid-gray, the background's resting color in [−1,1] space.
pub const BACKGROUND_GRAY: [f64; 3] = [0.0, 0.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub fn from_id(id: usize) -> Option<Self> {
        match id {
            12 => Some(Shape::Square),
            13 => Some(Shape::Circle),
            14 => Some(Shape::Triangle),
            _ => None,
        }
    }
}

// ── rendering ───────────────────────────────────────────────────────────

fn inside(shape: Shape, b: [f64; 4], px: f64, py: f64, h: usize, w: usize) -> bool {
    // everything in pixel units; px/py are pixel centers
    let (x0, y0, x1, y1) = (b[0] * w as f64, b[1] * h as f64, b[2] * w as f64, b[3] * h as f64);
    match shape {
        Shape::Square => px >= x0 && px < x1 && py >= y0 && py < y1,
        Shape::Circle => {
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            let r = 0.5 * (x1 - x0).min(y1 - y0);
            (px - cx).powi(2) + (py - cy).powi(2) <= r * r
        }
        Shape::Triangle => {
            // apex top-center, base along the bottom edge
            let ax = (x0 + x1) / 2.0;
            let edge = |x_a: f64, y_a: f64, x_b: f64, y_b: f64| {
                (x_b - x_a) * (py - y_a) - (y_b - y_a) * (px - x_a)
            };
            let d1 = edge(ax, y0, x0, y1);
            let d2 = edge(x0, y1, x1, y1);
            let d3 = edge(x1, y1, ax, y0);
            (d1 >= 0.0 && d2 >= 0.0 && d3 >= 0.0) || (d1 <= 0.0 && d2 <= 0.0 && d3 <= 0.0)
        }
    }
}

/// What a subject looks like, read off its tokens: the first modifier that
/// names a color, and the noun's shape.
pub fn subject_appearance(scene: &SceneSpec, si: usize) -> Result<([f64; 3], Shape)> {
    let s = &scene.subjects[si];
    let mut rgb = None;
    for &ti in &s.token_indices {
        let tok = &scene.tokens[ti];
        if tok.role == Role::Modifier {
            if let Some(c) = vocab::color_rgb(tok.embedding_id) {
                rgb = Some(c);
                break;
            }
        }
    }
    let rgb = rgb.ok_or_else(|| Error::UnknownColor {
        subject: si,
        color: s
            .token_indices
            .iter()
            .map(|&ti| scene.tokens[ti].text.clone())
            .collect::<Vec<_>>()
            .join(" "),
    })?;
    let noun = *s.token_indices.last().expect("validated scenes have tokens");
    let shape = Shape::from_id(scene.tokens[noun].embedding_id).ok_or_else(|| {
        Error::DegenerateData(format!(
            "subject {si} noun {:?} is not a drawable shape",
            scene.tokens[noun].text
        ))
    })?;
    Ok((rgb, shape))
}

/// Draw the scene: a low-frequency gray wobble, then each subject's shape
/// filled solid inside its box. Consumes a fixed number of rng draws
/// regardless of the layout.
pub fn render_scene(scene: &SceneSpec, rng: &mut ChaCha20Rng, bg_amplitude: f64) -> Result<Tensor> {
    let (h, w) = (scene.latent.height, scene.latent.width);
    // three slow cosine waves, shared by all channels so the field stays gray
    let mut waves = [[0.0f64; 4]; 3];
    for wv in &mut waves {
        wv[0] = rng.gen_range(0.25..1.5); // cycles across the width
        wv[1] = rng.gen_range(0.25..1.5); // cycles down the height
        wv[2] = rng.gen_range(0.0..std::f64::consts::TAU); // phase
        wv[3] = rng.gen_range(0.5..1.0); // relative amplitude
    }
    let norm: f64 = waves.iter().map(|wv| wv[3]).sum();
    let mut img = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.0;
            for wv in &waves {
                let arg = std::f64::consts::TAU
                    * (wv[0] * (x as f64 + 0.5) / w as f64 + wv[1] * (y as f64 + 0.5) / h as f64)
                    + wv[2];
                v += wv[3] * arg.cos();
            }
            v = v / norm * bg_amplitude;
            for c in 0..3 {
                img.data_mut()[c * h * w + y * w + x] = BACKGROUND_GRAY[c] + v;
            }
        }
    }
    for si in 0..scene.subjects.len() {
        let (rgb, shape) = subject_appearance(scene, si)?;
        let b = scene.subjects[si].box_;
        for y in 0..h {
            for x in 0..w {
                if inside(shape, b, x as f64 + 0.5, y as f64 + 0.5, h, w) {
                    for c in 0..3 {
                        img.data_mut()[c * h * w + y * w + x] = rgb[c];
                    }
                }
            }
        }
    }
    Ok(img)
}

// ── scene sampling ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    pub min_subjects: usize,
    pub max_subjects: usize,
    pub bg_amplitude: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { height: 16, width: 16, min_subjects: 1, max_subjects: 3, bg_amplitude: 0.2 }
    }
}

fn boxes_disjoint(a: [f64; 4], b: [f64; 4]) -> bool {
    a[2] <= b[0] || b[2] <= a[0] || a[3] <= b[1] || b[3] <= a[1]
}

/// Random scene: n distinct-colored subjects in disjoint boxes. Falls back
/// to even vertical strips if rejection sampling can't place a box.
pub fn sample_scene(cfg: &DatasetConfig, rng: &mut ChaCha20Rng) -> SceneSpec {
    let n = rng.gen_range(cfg.min_subjects..=cfg.max_subjects);
    // colors without replacement so prompts stay unambiguous
    let mut color_pool: Vec<usize> = vocab::COLORS.iter().map(|&(i, _, _)| i).collect();
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(0..color_pool.len());
        colors.push(color_pool.swap_remove(k));
    }
    let shapes: Vec<usize> =
        (0..n).map(|_| vocab::SHAPES[rng.gen_range(0..vocab::SHAPES.len())].0).collect();

    let mut boxes: Vec<[f64; 4]> = Vec::with_capacity(n);
    for i in 0..n {
        let mut placed = None;
        for _ in 0..100 {
            let bw = rng.gen_range(0.28..0.45);
            let bh = rng.gen_range(0.28..0.45);
            let x0 = rng.gen_range(0.0..1.0 - bw);
            let y0 = rng.gen_range(0.0..1.0 - bh);
            let cand = [x0, y0, x0 + bw, y0 + bh];
            if boxes.iter().all(|&b| boxes_disjoint(cand, b)) {
                placed = Some(cand);
                break;
            }
        }
        boxes.push(placed.unwrap_or_else(|| {
            // strip fallback keeps the invariant without resampling
            let x0 = i as f64 / n as f64;
            [x0 + 0.02, 0.25, x0 + 1.0 / n as f64 - 0.02, 0.75]
        }));
    }

    let mut tokens = Vec::new();
    let mut subjects = Vec::new();
    for i in 0..n {
        if i > 0 {
            tokens.push(TokenSpec {
                text: "and".into(),
                embedding_id: vocab::AND,
                role: Role::Excluded,
            });
        }
        tokens.push(TokenSpec { text: "a".into(), embedding_id: vocab::A, role: Role::Background });
        let color_ti = tokens.len();
        tokens.push(TokenSpec {
            text: vocab::color_name(colors[i]).unwrap().into(),
            embedding_id: colors[i],
            role: Role::Modifier,
        });
        let noun_ti = tokens.len();
        tokens.push(TokenSpec {
            text: vocab::shape_name(shapes[i]).unwrap().into(),
            embedding_id: shapes[i],
            role: Role::SubjectNoun,
        });
        subjects.push(SubjectSpec {
            name: format!(
                "{} {}",
                vocab::color_name(colors[i]).unwrap(),
                vocab::shape_name(shapes[i]).unwrap()
            ),
            token_indices: vec![color_ti, noun_ti],
            box_: boxes[i],
        });
    }
    tokens.push(TokenSpec { text: "<eot>".into(), embedding_id: vocab::EOT, role: Role::Eot });

    SceneSpec {
        latent: LatentDims { height: cfg.height, width: cfg.width },
        tokens,
        subjects,
    }
}

// ── training examples ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainExample {
    /// Clean target, [3, H, W] in [−1, 1].
    pub image: Tensor,
    /// Token-table ids in prompt order (ends with eot).
    pub ctx: Vec<usize>,
    /// Layout metadata. Training never reads the boxes; they exist for
    /// evaluation and for the inference-time machinery.
    pub scene: SceneSpec,
}

pub fn sample_example(cfg: &DatasetConfig, rng: &mut ChaCha20Rng) -> Result<TrainExample> {
    let scene = sample_scene(cfg, rng);
    let image = render_scene(&scene, rng, cfg.bg_amplitude)?;
    let ctx = scene.embedding_ids();
    Ok(TrainExample { image, ctx, scene })
}
