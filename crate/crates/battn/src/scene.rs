//! Scene documents: the token sequence plus per-subject layout boxes.
//!
//! A scene is the sampler's only description of *where* things go — the
//! model itself is never trained on layout, so everything spatial enters
//! through these boxes and the masks derived from them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grammatical role of a prompt token. Roles decide mask treatment:
/// subject tokens are confined to their subject, `excluded` tokens (e.g.
/// conjunctions, which leak attributes across subjects) are blocked
/// everywhere, `background` tokens are readable from any pixel, and the
/// first end-of-text token is confined to the union of subjects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    SubjectNoun,
    Modifier,
    Background,
    Excluded,
    Eot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSpec {
    pub text: String,
    pub embedding_id: usize,
    pub role: Role,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub name: String,
    /// Positions in the token sequence; the last one is the subject noun.
    pub token_indices: Vec<usize>,
    /// Normalized ![x0, y0, x1, y1] with x across columns, y down rows.
    #[serde(rename = "box")]
    pub box_: [f64; 4],
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentDims {
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub latent: LatentDims,
    pub tokens: Vec<TokenSpec>,
    pub subjects: Vec<SubjectSpec>,
}

// ── pixel regions ────────────────────────────────────────────────────────

/// A set of latent pixels on an H×W grid. Coarse boxes, refined masks, and
/// the background are all regions; the representation keeps membership
/// tests O(1) and iteration in fixed row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Region {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Region {
    pub fn empty(h: usize, w: usize) -> Self {
        Region { h, w, bits: vec![false; h * w] }
    }

    pub fn full(h: usize, w: usize) -> Self {
        Region { h, w, bits: vec![true; h * w] }
    }

    pub fn from_pixels(h: usize, w: usize, pixels: impl IntoIterator<Item = usize>) -> Self {
        let mut r = Region::empty(h, w);
        for p in pixels {
            r.bits[p] = true;
        }
        r
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn grid_len(&self) -> usize {
        self.bits.len()
    }

    #[inline]
    pub fn contains(&self, pixel: usize) -> bool {
        self.bits[pixel]
    }

    pub fn insert(&mut self, pixel: usize) {
        self.bits[pixel] = true;
    }

    pub fn remove(&mut self, pixel: usize) {
        self.bits[pixel] = false;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Member pixels in row-major order.
    pub fn pixels(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn union(&self, other: &Region) -> Region {
        debug_assert_eq!(self.bits.len(), other.bits.len());
        Region {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn intersect(&self, other: &Region) -> Region {
        Region {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn subtract(&self, other: &Region) -> Region {
        Region {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && !b).collect(),
        }
    }

    pub fn complement(&self) -> Region {
        Region { h: self.h, w: self.w, bits: self.bits.iter().map(|&b| !b).collect() }
    }

    pub fn is_subset_of(&self, other: &Region) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Bounding rectangle (r0, c0, r1, c1) inclusive, or None when empty.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut out: Option<(usize, usize, usize, usize)> = None;
        for p in self.pixels() {
            let (r, c) = (p / self.w, p % self.w);
            out = Some(match out {
                None => (r, c, r, c),
                Some((r0, c0, r1, c1)) => (r0.min(r), c0.min(c), r1.max(r), c1.max(c)),
            });
        }
        out
    }
}

// ── rasterization ────────────────────────────────────────────────────────

/// Pixels whose centers fall inside the half-open box `[x0,x1) × [y0,y1)`,
/// with centers at `((c+0.5)/W, (r+0.5)/H)`. Errors when no center lands
/// inside.
pub fn rasterize_box(box_: [f64; 4], h: usize, w: usize) -> Result<Region> {
    let [x0, y0, x1, y1] = box_;
    let mut region = Region::empty(h, w);
    for r in 0..h {
        let cy = (r as f64 + 0.5) / h as f64;
        if cy < y0 || cy >= y1 {
            continue;
        }
        for c in 0..w {
            let cx = (c as f64 + 0.5) / w as f64;
            if cx >= x0 && cx < x1 {
                region.insert(r * w + c);
            }
        }
    }
    if region.is_empty() {
        return Err(Error::EmptyBox { box_, height: h, width: w });
    }
    Ok(region)
}

// ── parsing & validation ─────────────────────────────────────────────────

pub fn parse_scene_str(json: &str) -> Result<SceneSpec> {
    let scene: SceneSpec =
        serde_json::from_str(json).map_err(|e| Error::SchemaError(e.to_string()))?;
    validate_scene(&scene)?;
    Ok(scene)
}

pub fn parse_scene(path: &Path) -> Result<SceneSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading scene {path:?}"), e))?;
    parse_scene_str(&text)
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::ValidationError { path: path.into(), message: message.into() }
}

/// Structural invariants beyond the JSON schema: box geometry, index
/// bounds, role consistency of subject tokens, and exactly one
/// end-of-text token. Every box must also rasterize to at least one pixel
/// at the declared latent resolution.
pub fn validate_scene(scene: &SceneSpec) -> Result<()> {
    let (h, w) = (scene.latent.height, scene.latent.width);
    if h == 0 || w == 0 {
        return Err(invalid("latent", format!("latent dims must be positive, got {h}x{w}")));
    }
    if scene.tokens.is_empty() {
        return Err(invalid("tokens", "token sequence is empty"));
    }
    let eots = scene.tokens.iter().filter(|t| t.role == Role::Eot).count();
    if eots != 1 {
        return Err(invalid("tokens", format!("expected exactly one eot token, found {eots}")));
    }
    if scene.subjects.is_empty() {
        return Err(invalid("subjects", "scene declares no subjects"));
    }
    for (i, s) in scene.subjects.iter().enumerate() {
        let [x0, y0, x1, y1] = s.box_;
        for (axis, v) in [("x0", x0), ("y0", y0), ("x1", x1), ("y1", y1)] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(invalid(
                    format!("subjects[{i}].box"),
                    format!("{axis}={v} outside [0,1]"),
                ));
            }
        }
        if x0 >= x1 || y0 >= y1 {
            return Err(invalid(
                format!("subjects[{i}].box"),
                format!("degenerate box [{x0}, {y0}, {x1}, {y1}]"),
            ));
        }
        if s.token_indices.is_empty() {
            return Err(invalid(format!("subjects[{i}].token_indices"), "subject has no tokens"));
        }
        for &ti in &s.token_indices {
            if ti >= scene.tokens.len() {
                return Err(invalid(
                    format!("subjects[{i}].token_indices"),
                    format!("index {ti} out of range ({} tokens)", scene.tokens.len()),
                ));
            }
            let role = scene.tokens[ti].role;
            if !matches!(role, Role::Modifier | Role::SubjectNoun) {
                return Err(invalid(
                    format!("subjects[{i}].token_indices"),
                    format!("token {ti} ({:?}) has role {role:?}; subject tokens must be modifiers or nouns", scene.tokens[ti].text),
                ));
            }
        }
        let last = *s.token_indices.last().unwrap();
        if scene.tokens[last].role != Role::SubjectNoun {
            return Err(invalid(
                format!("subjects[{i}].token_indices"),
                format!("last token {last} must be the subject noun, found {:?}", scene.tokens[last].role),
            ));
        }
        // must cover at least one pixel at the declared resolution
        rasterize_box(s.box_, h, w)?;
    }
    Ok(())
}

impl SceneSpec {
    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn pixel_count(&self) -> usize {
        self.latent.height * self.latent.width
    }

    /// Index of the single end-of-text token.
    pub fn eot_index(&self) -> usize {
        self.tokens.iter().position(|t| t.role == Role::Eot).expect("validated scene has one eot")
    }

    /// Coarse layout region of each subject.
    pub fn subject_regions(&self) -> Result<Vec<Region>> {
        self.subjects
            .iter()
            .map(|s| rasterize_box(s.box_, self.latent.height, self.latent.width))
            .collect()
    }

    /// Union of all subject regions.
    pub fn subject_union(&self) -> Result<Region> {
        let mut acc = Region::empty(self.latent.height, self.latent.width);
        for r in self.subject_regions()? {
            acc = acc.union(&r);
        }
        Ok(acc)
    }

    /// Pixels claimed by no subject.
    pub fn background(&self) -> Result<Region> {
        Ok(self.subject_union()?.complement())
    }

    /// Token ids in sequence order, for the embedding layer.
    pub fn embedding_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| t.embedding_id).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadrant_scene() -> SceneSpec {
        // two subjects on a 4×4 grid occupying the top-left and top-right
        // quadrants
        parse_scene_str(
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
                {"name": "red square", "token_indices": [1, 2], "box": [0.0, 0.0, 0.5, 0.5]},
                {"name": "blue circle", "token_indices": [4, 5], "box": [0.5, 0.0, 1.0, 0.5]}
              ]
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn docs_two_subject_scene_parses() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/scenes/two_subjects.json");
        let scene = parse_scene(&root).unwrap();
        assert_eq!(scene.n_subjects(), 2);
        assert_eq!(scene.latent.height, 16);
        assert_eq!(scene.tokens.iter().filter(|t| t.role == Role::Eot).count(), 1);
    }

    #[test]
    fn degenerate_box_is_a_validation_error_with_field_path() {
        let mut scene = quadrant_scene();
        scene.subjects[1].box_ = [0.9, 0.1, 0.2, 0.6]; // x0 > x1
        match validate_scene(&scene) {
            Err(Error::ValidationError { path, .. }) => assert_eq!(path, "subjects[1].box"),
            other => panic!("expected ValidationError, got {other:?}"),
        }
    }

    #[test]
    fn two_eot_tokens_are_rejected() {
        let mut scene = quadrant_scene();
        scene.tokens.push(TokenSpec { text: "<eot>".into(), embedding_id: 1, role: Role::Eot });
        assert!(matches!(validate_scene(&scene), Err(Error::ValidationError { .. })));
    }

    #[test]
    fn subject_token_with_wrong_role_is_rejected() {
        let mut scene = quadrant_scene();
        scene.subjects[0].token_indices = vec![3, 2]; // "and" is excluded
        assert!(matches!(validate_scene(&scene), Err(Error::ValidationError { .. })));
    }

    #[test]
    fn malformed_json_is_a_schema_error() {
        assert!(matches!(parse_scene_str("{\"latent\": 3}"), Err(Error::SchemaError(_))));
        // unknown fields are schema errors too
        assert!(matches!(
            parse_scene_str(r#"{"latent": {"height": 4, "width": 4}, "tokens": [], "subjects": [], "extra": 1}"#),
            Err(Error::SchemaError(_))
        ));
    }

    #[test]
    fn quadrant_box_rasterizes_to_four_pixels_at_4x4() {
        let r = rasterize_box([0.0, 0.0, 0.5, 0.5], 4, 4).unwrap();
        assert_eq!(r.pixels().collect::<Vec<_>>(), vec![0, 1, 4, 5]);
    }

    #[test]
    fn full_frame_box_covers_everything() {
        let r = rasterize_box([0.0, 0.0, 1.0, 1.0], 5, 7).unwrap();
        assert_eq!(r.count(), 35);
    }

    #[test]
    fn centered_box_at_16x16_covers_rows_and_cols_5_through_10() {
        let r = rasterize_box([0.3, 0.3, 0.7, 0.7], 16, 16).unwrap();
        assert_eq!(r.count(), 36);
        let (r0, c0, r1, c1) = r.bbox().unwrap();
        assert_eq!((r0, c0, r1, c1), (5, 5, 10, 10));
    }

    #[test]
    fn sliver_box_missing_all_centers_is_empty() {
        match rasterize_box([0.0, 0.0, 0.01, 0.01], 4, 4) {
            Err(Error::EmptyBox { .. }) => {}
            other => panic!("expected EmptyBox, got {other:?}"),
        }
    }

    #[test]
    fn union_and_background_partition_the_grid() {
        let scene = quadrant_scene();
        let union = scene.subject_union().unwrap();
        let bg = scene.background().unwrap();
        assert_eq!(union.count() + bg.count(), 16);
        assert!(union.intersect(&bg).is_empty());
        assert_eq!(union.count(), 8); // two disjoint quadrants of 4
    }

    #[test]
    fn nested_boxes_rasterize_to_nested_regions() {
        // containment is monotone under the pixel-center rule
        let inner = rasterize_box([0.25, 0.25, 0.75, 0.75], 8, 8).unwrap();
        let outer = rasterize_box([0.1, 0.1, 0.9, 0.9], 8, 8).unwrap();
        assert!(inner.is_subset_of(&outer));
    }
}
