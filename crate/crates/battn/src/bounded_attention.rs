//! `{0, −∞}` attention masks and the masked attention op.
//!
//! Masking is the load-bearing mechanism of the whole crate: an additive
//! mask M is applied inside the softmax, `A = softmax(QKᵀ·scale + M)`, so a
//! blocked query/key pair gets *exactly* zero attention mass and the
//! remaining entries renormalize over what survives.
//!
//! Two mask flavors exist. **Denoising** masks are strict: a pixel may only
//! read the tokens of the subject whose mask contains it (plus background
//! tokens), which stops attribute leakage between subjects. **Guidance**
//! masks are looser: subject tokens stay readable from the background too,
//! which the guidance loss needs — it measures how much subject attention
//! mass sits outside the subject's box, so that mass must be allowed to
//! exist. Self-attention masks use one scheme for both modes: a pixel
//! inside a subject cannot attend pixels that belong only to other
//! subjects; background pixels attend everything.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scene::{Region, Role, SceneSpec};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Denoising,
    Guidance,
}

/// For each token, the set of subjects that list it. Most tokens belong to
/// zero or one subject; shared tokens own the union of their subjects'
/// pixels.
fn token_subjects(scene: &SceneSpec) -> Vec<Vec<usize>> {
    let mut owners = vec![Vec::new(); scene.tokens.len()];
    for (si, s) in scene.subjects.iter().enumerate() {
        for &ti in &s.token_indices {
            owners[ti].push(si);
        }
    }
    owners
}

/// Cross-attention mask, shape [pixels, tokens].
///
/// Column rules: `excluded` tokens are −∞ everywhere; `background` tokens
/// (and subject-role tokens no subject claims) are 0 everywhere; the `eot`
/// token is 0 on the union of subject masks and −∞ on the background;
/// subject tokens are 0 on their own subject's pixels — plus the background
/// in guidance mode — and −∞ elsewhere.
pub fn build_cross_mask<E: Element>(
    scene: &SceneSpec,
    masks: &[Region],
    mode: MaskMode,
) -> Result<Tensor<E>> {
    let n = scene.pixel_count();
    let t = scene.tokens.len();
    debug_assert_eq!(masks.len(), scene.subjects.len());
    let owners = token_subjects(scene);

    let mut union = Region::empty(scene.latent.height, scene.latent.width);
    for m in masks {
        union = union.union(m);
    }
    let background = union.complement();

    let ninf = E::neg_infinity();
    let zero = E::zero();
    let mut out = Tensor::zeros(&[n, t]);
    for (ti, tok) in scene.tokens.iter().enumerate() {
        let owned_by = &owners[ti];
        if !owned_by.is_empty() {
            match tok.role {
                Role::Modifier | Role::SubjectNoun => {}
                other => {
                    return Err(Error::RoleConflict {
                        token: ti,
                        roles: format!("{other:?} token is claimed by subjects {owned_by:?}"),
                    })
                }
            }
            let mut own = Region::empty(scene.latent.height, scene.latent.width);
            for &si in owned_by {
                own = own.union(&masks[si]);
            }
            for x in 0..n {
                let allowed = own.contains(x)
                    || (mode == MaskMode::Guidance && background.contains(x));
                out.set(x, ti, if allowed { zero } else { ninf });
            }
        } else {
            match tok.role {
                Role::Excluded => {
                    for x in 0..n {
                        out.set(x, ti, ninf);
                    }
                }
                Role::Eot => {
                    for x in 0..n {
                        out.set(x, ti, if union.contains(x) { zero } else { ninf });
                    }
                }
                // background words, and subject-role words no subject claims,
                // stay readable from every pixel
                Role::Background | Role::Modifier | Role::SubjectNoun => {}
            }
        }
    }
    Ok(out)
}

/// Self-attention mask, shape [pixels, pixels]; identical in both modes.
///
/// A query pixel inside subject i blocks keys that belong exclusively to
/// other subjects; keys in its own subject(s) or the background stay open.
/// Background queries attend everything.
pub fn build_self_mask<E: Element>(h: usize, w: usize, masks: &[Region]) -> Tensor<E> {
    let n = h * w;
    // owner bitsets per pixel, as indices into `masks`
    let mut owner: Vec<u32> = vec![0; n];
    for (si, m) in masks.iter().enumerate() {
        debug_assert!(si < 32, "more subjects than the owner bitset supports");
        for p in m.pixels() {
            owner[p] |= 1 << si;
        }
    }
    let ninf = E::neg_infinity();
    let mut out = Tensor::zeros(&[n, n]);
    for x in 0..n {
        if owner[x] == 0 {
            continue; // background query: row stays all-zero
        }
        for y in 0..n {
            // blocked iff the key belongs to subjects, none shared with x
            if owner[y] != 0 && owner[x] & owner[y] == 0 {
                out.set(x, y, ninf);
            }
        }
    }
    out
}

/// Masked scaled-dot-product attention:
/// `A = softmax(Q·Kᵀ·scale + M)`, `out = A·V`. Returns both the map and
/// the output so callers can record A.
pub fn bounded_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    mask: &Tensor<E>,
    scale: E,
) -> Result<(Tensor<E>, Tensor<E>)> {
    let logits = kernels::matmul_nt(q, k)?.scale(scale);
    let a = kernels::masked_softmax(&logits, mask)?;
    let out = kernels::matmul(&a, v)?;
    Ok((a, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{parse_scene_str, rasterize_box};

    fn quadrant_scene() -> SceneSpec {
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

    fn count_zeros_col(m: &Tensor<f64>, col: usize) -> usize {
        (0..m.rows()).filter(|&r| m.at(r, col) == 0.0).count()
    }

    #[test]
    fn denoising_cross_mask_confines_subject_tokens_to_their_quadrant() {
        let scene = quadrant_scene();
        let masks = scene.subject_regions().unwrap();
        let m: Tensor<f64> = build_cross_mask(&scene, &masks, MaskMode::Denoising).unwrap();
        // subject 1 tokens (columns 1 and 2): zeros exactly on its 4 pixels
        for col in [1, 2] {
            assert_eq!(count_zeros_col(&m, col), 4);
            for p in masks[0].pixels() {
                assert_eq!(m.at(p, col), 0.0);
            }
        }
        // excluded "and": −∞ everywhere
        assert_eq!(count_zeros_col(&m, 3), 0);
        // background "a": open everywhere
        assert_eq!(count_zeros_col(&m, 0), 16);
    }

    #[test]
    fn guidance_cross_mask_adds_background_but_not_opposing_pixels() {
        let scene = quadrant_scene();
        let masks = scene.subject_regions().unwrap();
        let m: Tensor<f64> = build_cross_mask(&scene, &masks, MaskMode::Guidance).unwrap();
        // subject 1 column: 4 own + 8 background = 12 zeros
        assert_eq!(count_zeros_col(&m, 1), 12);
        // opposing pixels stay blocked
        for p in masks[1].pixels() {
            assert_eq!(m.at(p, 1), f64::NEG_INFINITY);
        }
    }

    #[test]
    fn eot_column_is_confined_to_the_subject_union_in_both_modes() {
        let scene = quadrant_scene();
        let masks = scene.subject_regions().unwrap();
        let union = scene.subject_union().unwrap();
        for mode in [MaskMode::Denoising, MaskMode::Guidance] {
            let m: Tensor<f64> = build_cross_mask(&scene, &masks, mode).unwrap();
            let eot = scene.eot_index();
            assert_eq!(count_zeros_col(&m, eot), union.count());
            for p in union.complement().pixels() {
                assert_eq!(m.at(p, eot), f64::NEG_INFINITY);
            }
        }
    }

    #[test]
    fn self_mask_blocks_exactly_the_opposing_quadrant() {
        let scene = quadrant_scene();
        let masks = scene.subject_regions().unwrap();
        let m: Tensor<f64> = build_self_mask(4, 4, &masks);
        // a pixel of subject 1 blocks the 4 pixels of subject 2
        let p0 = masks[0].pixels().next().unwrap();
        let blocked: Vec<usize> = (0..16).filter(|&y| m.at(p0, y) == f64::NEG_INFINITY).collect();
        assert_eq!(blocked, masks[1].pixels().collect::<Vec<_>>());
        // a background pixel's row is fully open
        let bg = scene.background().unwrap().pixels().next().unwrap();
        assert!((0..16).all(|y| m.at(bg, y) == 0.0));
    }

    #[test]
    fn overlapping_masks_treat_shared_pixels_as_own_for_both() {
        let scene = quadrant_scene();
        let a = rasterize_box([0.0, 0.0, 0.75, 0.75], 4, 4).unwrap();
        let b = rasterize_box([0.25, 0.25, 1.0, 1.0], 4, 4).unwrap();
        let shared = a.intersect(&b).pixels().next().unwrap();
        let m: Tensor<f64> = build_self_mask(4, 4, &[a.clone(), b.clone()]);
        // a shared pixel attends keys of both subjects
        for y in a.union(&b).pixels() {
            assert_eq!(m.at(shared, y), 0.0);
        }
        let cross: Tensor<f64> =
            build_cross_mask(&scene, &[a, b], MaskMode::Denoising).unwrap();
        assert_eq!(cross.at(shared, 1), 0.0);
        assert_eq!(cross.at(shared, 4), 0.0);
    }

    #[test]
    fn role_conflict_is_detected() {
        let mut scene = quadrant_scene();
        // force a subject to claim the excluded conjunction (bypassing
        // scene validation, as a hand-built pipeline might)
        scene.subjects[0].token_indices = vec![3, 2];
        let masks = scene.subject_regions().unwrap();
        match build_cross_mask::<f64>(&scene, &masks, MaskMode::Denoising) {
            Err(Error::RoleConflict { token, .. }) => assert_eq!(token, 3),
            other => panic!("expected RoleConflict, got {other:?}"),
        }
    }

    #[test]
    fn zero_mask_attention_matches_plain_attention_bit_for_bit() {
        let q = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin());
        let k = Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.3).cos());
        let v = Tensor::from_fn(&[5, 2], |i| i as f64 * 0.1);
        let zero = Tensor::zeros(&[3, 5]);
        let scale = 0.5;
        let (a, out) = bounded_attention(&q, &k, &v, &zero, scale).unwrap();
        let plain_logits = kernels::matmul_nt(&q, &k).unwrap().scale(scale);
        let plain_a = kernels::softmax_rows(&plain_logits);
        let plain_out = kernels::matmul(&plain_a, &v).unwrap();
        assert_eq!(a.data(), plain_a.data());
        assert_eq!(out.data(), plain_out.data());
    }

    #[test]
    fn constant_value_rows_pass_through_any_mask() {
        // rows of A sum to 1, so constant V rows survive masking
        let q = Tensor::from_fn(&[4, 3], |i| (i as f64).sin());
        let k = Tensor::from_fn(&[4, 3], |i| (i as f64 * 1.3).cos());
        let v = Tensor::from_fn(&[4, 2], |i| if i % 2 == 0 { 2.5 } else { -1.5 });
        let mut mask = Tensor::zeros(&[4, 4]);
        mask.set(0, 1, f64::NEG_INFINITY);
        mask.set(2, 0, f64::NEG_INFINITY);
        mask.set(2, 3, f64::NEG_INFINITY);
        let (_, out) = bounded_attention(&q, &k, &v, &mask, 1.0).unwrap();
        for r in 0..4 {
            assert!((out.at(r, 0) - 2.5).abs() < 1e-12);
            assert!((out.at(r, 1) + 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn two_by_two_hand_computed_map() {
        // logits = QKᵀ/√2 = [[√2, 0], [0, √2]], top-right masked
        let q = Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let k = Tensor::from_vec(vec![2, 2], vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        let v = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut mask = Tensor::zeros(&[2, 2]);
        mask.set(0, 1, f64::NEG_INFINITY);
        let (a, out) = bounded_attention(&q, &k, &v, &mask, 1.0 / 2.0f64.sqrt()).unwrap();
        assert_eq!(a.at(0, 0), 1.0);
        assert_eq!(a.at(0, 1), 0.0);
        assert!((a.at(1, 0) - 0.195570317493).abs() < 1e-12);
        assert!((a.at(1, 1) - 0.804429682507).abs() < 1e-12);
        assert_eq!(out.row(0), &[1.0, 2.0]);
        assert!((out.at(1, 0) - 2.60885936501).abs() < 1e-11);
        assert!((out.at(1, 1) - 3.60885936501).abs() < 1e-11);
    }

    #[test]
    fn disjoint_subject_pixel_token_pairs_are_exactly_zero() {
        let scene = quadrant_scene();
        let masks = scene.subject_regions().unwrap();
        for mode in [MaskMode::Denoising, MaskMode::Guidance] {
            let mask: Tensor<f64> = build_cross_mask(&scene, &masks, mode).unwrap();
            let logits = Tensor::from_fn(&[16, 7], |i| ((i * 31 % 17) as f64) * 0.25 - 2.0);
            let a = kernels::masked_softmax(&logits, &mask).unwrap();
            // pixel of subject 2, token of subject 1 → exact zero
            for p in masks[1].pixels() {
                for col in [1, 2] {
                    assert_eq!(a.at(p, col), 0.0);
                }
            }
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        /// Random grid with 1–3 disjoint boxes snapped to pixel edges.
        fn arb_layout() -> impl Strategy<Value = (usize, usize, Vec<[f64; 4]>)> {
            (4usize..=6, 4usize..=6, 1usize..=3).prop_map(|(h, w, n)| {
                // slice the grid into vertical strips, one box per subject
                let mut boxes = Vec::new();
                for i in 0..n {
                    let x0 = i as f64 / n as f64;
                    let x1 = (i as f64 + 0.8) / n as f64;
                    boxes.push([x0, 0.1, x1, 0.9]);
                }
                (h, w, boxes)
            })
        }

        proptest! {
            #[test]
            fn masked_rows_renormalize_and_zeros_are_exact((h, w, boxes) in arb_layout(), seed in 0u64..1000) {
                let masks: Vec<Region> = boxes.iter().map(|&b| rasterize_box(b, h, w).unwrap()).collect();
                let m: Tensor<f64> = build_self_mask(h, w, &masks);
                let n = h * w;
                let logits = Tensor::from_fn(&[n, n], |i| {
                    // cheap deterministic pseudo-noise
                    let x = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(seed);
                    ((x >> 33) as f64 / (1u64 << 31) as f64) * 4.0 - 2.0
                });
                let a = kernels::masked_softmax(&logits, &m).unwrap();
                for r in 0..n {
                    let mut sum = 0.0;
                    for c in 0..n {
                        if m.at(r, c) == f64::NEG_INFINITY {
                            prop_assert_eq!(a.at(r, c), 0.0);
                        }
                        sum += a.at(r, c);
                    }
                    prop_assert!((sum - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn shrinking_a_box_never_unmasks_denoising_cross_entries((h, w, boxes) in arb_layout()) {
                prop_assume!(boxes.len() >= 2);
                let mut scene = quadrant_scene();
                scene.latent.height = h;
                scene.latent.width = w;
                scene.subjects.truncate(2);
                scene.subjects[0].box_ = boxes[0];
                scene.subjects[1].box_ = boxes[1];
                let masks = scene.subject_regions().unwrap();
                let before: Tensor<f64> = build_cross_mask(&scene, &masks, MaskMode::Denoising).unwrap();
                // shrink subject 0 to the top half of its box
                let b = boxes[0];
                let shrunk = [b[0], b[1], b[2], (b[1] + b[3]) / 2.0];
                if let Ok(small) = rasterize_box(shrunk, h, w) {
                    let masks2 = vec![small, masks[1].clone()];
                    let after: Tensor<f64> = build_cross_mask(&scene, &masks2, MaskMode::Denoising).unwrap();
                    for i in 0..before.len() {
                        if before.data()[i] == f64::NEG_INFINITY {
                            prop_assert_eq!(after.data()[i], f64::NEG_INFINITY);
                        }
                    }
                }
            }
        }
    }
}
