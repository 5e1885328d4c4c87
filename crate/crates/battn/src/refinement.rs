//! Mask refinement: swap the coarse layout boxes for shape-tracking masks
//! read out of the model's own attention.
//!
//! Mid-run, pixels of the same object already attend each other far more
//! than they attend anything else, so the rows of the (head-averaged)
//! self-attention map make good per-pixel features. Clustering them
//! carves the frame into proto-objects. Each cluster is then handed to
//! the subject whose *soft cross-attention mask* overlaps it most:
//!
//! ```text
//! M_i = l1( σ( s · l1(Â_i) − σ_noun ) )          soft mask, Â_i = noun column
//! IoM(M, C) = Σ(M⊙C) / min(ΣM, ΣC)               overlap over the smaller mass
//! ```
//!
//! A cluster joins the best-overlapping subject when that overlap clears
//! `sigma_cluster`, otherwise it stays background. The union of a
//! subject's clusters becomes its refined mask. A subject that wins no
//! cluster falls back to its coarse box minus everyone else's refined
//! pixels — or, if even that is empty, the plain coarse box (at which
//! point disjointness is forfeit; callers that must have it should treat
//! the fallback as a soft failure).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{AttentionRecord, AttnKind};
use crate::error::{Error, Result};
use crate::guidance::LayerSelect;
use crate::kernels;
use crate::scene::{Region, SceneSpec};
use crate::tensor::Tensor;

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RefineConfig {
    /// K = this × number of subjects.
    pub clusters_per_subject: usize,
    /// Sharpening gain inside the soft-mask sigmoid.
    pub sharpen: f64,
    /// Sigmoid threshold on the normalized noun attention.
    pub sigma_noun: f64,
    /// Minimum IoM for a cluster to join a subject.
    pub sigma_cluster: f64,
    /// Which blocks contribute self-attention features and cross maps.
    pub layers: LayerSelect,
    /// Seed for the k-means++ initialization.
    pub seed: u64,
    /// Lloyd iterations per clustering call.
    pub kmeans_iters: usize,
    /// Steps between refinement rounds once denoising-only steps begin.
    /// Zero disables refinement entirely (coarse boxes are kept all run).
    pub interval: usize,
    /// Score clusters against a thresholded 0/1 version of the soft mask
    /// instead of the soft mask itself. Off by default; the soft reading
    /// is the primary one.
    pub binarize: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            clusters_per_subject: 3,
            sharpen: 10.0,
            sigma_noun: 0.2,
            sigma_cluster: 0.2,
            layers: LayerSelect::Deepest,
            seed: 0,
            kmeans_iters: 25,
            interval: 5,
            binarize: false,
        }
    }
}

/// Carries the cluster centers from one refinement round to the next, so
/// later rounds warm-start instead of re-seeding.
#[derive(Debug, Default, Clone)]
pub struct RefineState {
    pub centers: Option<Tensor>,
}

// ── feature and mask extraction ─────────────────────────────────────────

/// Mean self-attention map over heads at the selected layers, [N, N].
/// Row x is pixel x's feature vector.
pub fn self_attention_features(
    records: &[AttentionRecord],
    layers: LayerSelect,
    blocks: usize,
) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    let mut m = 0usize;
    for r in records {
        if r.kind == AttnKind::SelfAttn && layers.selects(r.layer, blocks) {
            acc = Some(match acc {
                Some(a) => a.add(&r.map)?,
                None => r.map.clone(),
            });
            m += 1;
        }
    }
    let acc = acc.ok_or_else(|| Error::NoRecords("no self-attention records selected".into()))?;
    Ok(acc.scale(1.0 / m as f64))
}

/// Mean cross-attention map over heads at the selected layers, [N, T].
pub fn mean_cross_map(
    records: &[AttentionRecord],
    layers: LayerSelect,
    blocks: usize,
) -> Result<Tensor> {
    let mut acc: Option<Tensor> = None;
    let mut m = 0usize;
    for r in records {
        if r.kind == AttnKind::CrossAttn && layers.selects(r.layer, blocks) {
            acc = Some(match acc {
                Some(a) => a.add(&r.map)?,
                None => r.map.clone(),
            });
            m += 1;
        }
    }
    let acc = acc.ok_or_else(|| Error::NoRecords("no cross-attention records selected".into()))?;
    Ok(acc.scale(1.0 / m as f64))
}

/// Soft mask from a subject's noun attention over pixels:
/// `l1(sigmoid(sharpen·l1(a) − sigma_noun))`.
pub fn soft_mask(a: &Tensor, sharpen: f64, sigma_noun: f64) -> Result<Tensor> {
    let normed = kernels::l1_normalize(a)?;
    let squashed = normed.map(|x| kernels::sigmoid_scalar(sharpen * x - sigma_noun));
    kernels::l1_normalize(&squashed)
}

/// One soft mask per subject, each a length-N l1-normalized vector, read
/// from the noun token's column of the mean cross map.
pub fn cross_attention_soft_masks(
    records: &[AttentionRecord],
    scene: &SceneSpec,
    cfg: &RefineConfig,
    blocks: usize,
) -> Result<Vec<Tensor>> {
    let mean = mean_cross_map(records, cfg.layers, blocks)?;
    let n = mean.rows();
    let mut out = Vec::with_capacity(scene.subjects.len());
    for s in &scene.subjects {
        let noun = *s.token_indices.last().expect("validated scenes have tokens");
        let col = Tensor::from_fn(&[n], |x| mean.at(x, noun));
        out.push(soft_mask(&col, cfg.sharpen, cfg.sigma_noun)?);
    }
    Ok(out)
}

/// 0/1 indicator vector of a region, length height×width.
pub fn indicator(r: &Region) -> Tensor {
    let mut t = Tensor::zeros(&[r.height() * r.width()]);
    for p in r.pixels() {
        t.data_mut()[p] = 1.0;
    }
    t
}

/// Binarize a soft mask at its uniform level: a pixel is in when it holds
/// strictly more than an even share of the mass.
pub fn binarize_mask(m: &Tensor) -> Tensor {
    let level = m.data().iter().sum::<f64>() / m.len() as f64;
    m.map(|x| if x > level { 1.0 } else { 0.0 })
}

/// Intersection-over-minimum between two non-negative masks of equal
/// length: `Σ(a⊙b) / min(Σa, Σb)`. For 0/1 indicators this is the usual
/// overlap-over-smaller-set; for an indicator equal to itself it is
/// exactly 1, and for disjoint supports exactly 0.
pub fn iom(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("iom", b.shape(), a.shape()));
    }
    let inter: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    let (sa, sb): (f64, f64) = (a.data().iter().sum(), b.data().iter().sum());
    let min = sa.min(sb);
    if min == 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(inter / min)
}

// ── k-means ─────────────────────────────────────────────────────────────

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's algorithm over row-vector points. Initial centers come from
/// `init` when provided (warm start), otherwise k-means++ seeded by `rng`.
/// An emptied cluster is re-seeded at the point farthest from its center.
pub fn kmeans(
    points: &Tensor,
    k: usize,
    rng: &mut ChaCha20Rng,
    init: Option<&Tensor>,
    iters: usize,
) -> Result<(Vec<usize>, Tensor)> {
    let (n, d) = (points.rows(), points.cols());
    if k == 0 || k > n {
        return Err(Error::DegenerateData(format!("cannot form {k} clusters from {n} points")));
    }
    let mut centers: Vec<Vec<f64>> = match init {
        Some(c) if c.rows() == k && c.cols() == d => {
            (0..k).map(|i| c.row(i).to_vec()).collect()
        }
        Some(c) => {
            return Err(Error::shape("kmeans warm start", c.shape(), &[k, d]));
        }
        None => {
            // k-means++: spread the seeds proportionally to squared distance
            let mut chosen: Vec<Vec<f64>> = vec![points.row(rng.gen_range(0..n)).to_vec()];
            let mut d2: Vec<f64> = (0..n).map(|i| dist2(points.row(i), &chosen[0])).collect();
            while chosen.len() < k {
                let total: f64 = d2.iter().sum();
                let pick = if total > 0.0 {
                    let mut target = rng.gen::<f64>() * total;
                    let mut idx = n - 1;
                    for (i, &w) in d2.iter().enumerate() {
                        if target < w {
                            idx = i;
                            break;
                        }
                        target -= w;
                    }
                    idx
                } else {
                    rng.gen_range(0..n) // all points coincide
                };
                chosen.push(points.row(pick).to_vec());
                for i in 0..n {
                    d2[i] = d2[i].min(dist2(points.row(i), chosen.last().unwrap()));
                }
            }
            chosen
        }
    };

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        // assignment, ties to the lowest cluster index
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dd = dist2(points.row(i), center);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        // revive empty clusters with the worst-fit point of a cluster that
        // can spare one; singletons are off limits or we would just move
        // the hole around
        let mut counts = vec![0usize; k];
        for &a in &assign {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&i, &j| {
                        dist2(points.row(i), &centers[assign[i]])
                            .partial_cmp(&dist2(points.row(j), &centers[assign[j]]))
                            .unwrap()
                    })
                    .expect("k <= n leaves some cluster with two points");
                counts[assign[far]] -= 1;
                assign[far] = c;
                counts[c] = 1;
                changed = true;
            }
        }
        // center update
        for (c, center) in centers.iter_mut().enumerate() {
            if counts[c] == 0 {
                continue;
            }
            center.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                if assign[i] == c {
                    for (v, &x) in center.iter_mut().zip(points.row(i)) {
                        *v += x;
                    }
                }
            }
            center.iter_mut().for_each(|v| *v /= counts[c] as f64);
        }
        if !changed {
            break;
        }
    }
    let flat: Vec<f64> = centers.into_iter().flatten().collect();
    Ok((assign, Tensor::from_vec(vec![k, d], flat)?))
}

// ── the refinement pass ─────────────────────────────────────────────────

/// Cluster the frame and reassign each subject its shape-tracking mask.
/// `records` should come from the previous denoising step's conditional
/// pass. `state` carries centers between rounds.
pub fn refine(
    records: &[AttentionRecord],
    scene: &SceneSpec,
    cfg: &RefineConfig,
    blocks: usize,
    state: &mut RefineState,
) -> Result<Vec<Region>> {
    let (h, w) = (scene.latent.height, scene.latent.width);
    let n_sub = scene.subjects.len();
    let k = cfg.clusters_per_subject * n_sub;

    let feats = self_attention_features(records, cfg.layers, blocks)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let (assign, centers) =
        kmeans(&feats, k, &mut rng, state.centers.as_ref(), cfg.kmeans_iters)?;
    state.centers = Some(centers);

    let softs = cross_attention_soft_masks(records, scene, cfg, blocks)?;
    let measures: Vec<Tensor> = if cfg.binarize {
        softs.iter().map(binarize_mask).collect()
    } else {
        softs
    };

    let mut refined = vec![Region::empty(h, w); n_sub];
    for c in 0..k {
        let cluster = Region::from_pixels(
            h,
            w,
            assign.iter().enumerate().filter(|&(_, &a)| a == c).map(|(p, _)| p),
        );
        if cluster.is_empty() {
            continue;
        }
        let ind = indicator(&cluster);
        let mut best = 0usize;
        let mut best_iom = f64::NEG_INFINITY;
        for (si, measure) in measures.iter().enumerate() {
            // an all-zero measure (possible after binarization) overlaps nothing
            let v = iom(measure, &ind).unwrap_or(0.0);
            if v > best_iom {
                best_iom = v;
                best = si; // strict '>' keeps ties at the lowest index
            }
        }
        if best_iom >= cfg.sigma_cluster {
            refined[best] = refined[best].union(&cluster);
        }
    }

    // fallbacks for subjects that won nothing
    let boxes = scene.subject_regions()?;
    for si in 0..n_sub {
        if refined[si].is_empty() {
            let mut others = Region::empty(h, w);
            for (sj, r) in refined.iter().enumerate() {
                if sj != si {
                    others = others.union(r);
                }
            }
            let carved = boxes[si].subtract(&others);
            refined[si] = if carved.is_empty() { boxes[si].clone() } else { carved };
        }
    }
    Ok(refined)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::parse_scene_str;
    use crate::tensor::Tensor;

    fn scene_8x8() -> SceneSpec {
        parse_scene_str(
            r#"{
              "latent": {"height": 8, "width": 8},
              "tokens": [
                {"text": "a", "embedding_id": 2, "role": "background"},
                {"text": "red", "embedding_id": 4, "role": "modifier"},
                {"text": "square", "embedding_id": 12, "role": "subject-noun"},
                {"text": "blue", "embedding_id": 6, "role": "modifier"},
                {"text": "circle", "embedding_id": 13, "role": "subject-noun"},
                {"text": "<eot>", "embedding_id": 1, "role": "eot"}
              ],
              "subjects": [
                {"name": "s1", "token_indices": [1, 2], "box": [0.0, 0.0, 0.5, 1.0]},
                {"name": "s2", "token_indices": [3, 4], "box": [0.5, 0.0, 1.0, 1.0]}
              ]
            }"#,
        )
        .unwrap()
    }

    /// Fabricate one self and one cross record with known structure.
    ///
    /// Self map: pixels of the same community attend their community
    /// uniformly (a tight feature cluster per community); background
    /// pixels attend a 5×5 window around themselves clipped to other
    /// background pixels, so their features overlap heavily within a
    /// background patch, never touch a community's columns, and k-means
    /// carves them into small spatial chunks rather than one big block.
    ///
    /// Cross map: a pixel splits its mass evenly over the nouns whose
    /// `noun_regions` entry contains it; pixels claimed by no noun look
    /// at token 0. Noun columns are therefore exactly zero off-region.
    fn planted_records(
        scene: &SceneSpec,
        communities: &[Region],
        noun_regions: &[Region],
        jitter: impl Fn(usize) -> f64,
    ) -> Vec<AttentionRecord> {
        let w = scene.latent.width;
        let n = scene.pixel_count();
        let t = scene.tokens.len();
        let owner = |p: usize| communities.iter().position(|r| r.contains(p));
        let mut self_map = Tensor::zeros(&[n, n]);
        for x in 0..n {
            let mut row = vec![0.0f64; n];
            match owner(x) {
                Some(ci) => {
                    for p in communities[ci].pixels() {
                        row[p] = 1.0 + jitter(x * n + p);
                    }
                }
                None => {
                    let (xi, xj) = (x / w, x % w);
                    for y in 0..n {
                        let (yi, yj) = (y / w, y % w);
                        if xi.abs_diff(yi) <= 2 && xj.abs_diff(yj) <= 2 && owner(y).is_none() {
                            row[y] = 1.0 + jitter(x * n + y);
                        }
                    }
                }
            }
            let s: f64 = row.iter().sum();
            for (y, v) in row.iter().enumerate() {
                self_map.set(x, y, v / s);
            }
        }
        let mut cross_map = Tensor::zeros(&[n, t]);
        for x in 0..n {
            let mut row = vec![0.0f64; t];
            let holders: Vec<usize> =
                (0..noun_regions.len()).filter(|&si| noun_regions[si].contains(x)).collect();
            if holders.is_empty() {
                row[0] = 1.0;
            } else {
                for &si in &holders {
                    let noun = *scene.subjects[si].token_indices.last().unwrap();
                    row[noun] += 1.0 / holders.len() as f64;
                }
            }
            for (c, v) in row.iter().enumerate() {
                cross_map.set(x, c, *v);
            }
        }
        let dummy_q = Tensor::zeros(&[n, 1]);
        vec![
            AttentionRecord {
                layer: 0,
                kind: AttnKind::SelfAttn,
                head: 0,
                q: dummy_q.clone(),
                k: dummy_q.clone(),
                logits: Tensor::zeros(&[n, n]),
                mask: None,
                map: self_map,
                map_node: 0,
            },
            AttentionRecord {
                layer: 0,
                kind: AttnKind::CrossAttn,
                head: 0,
                q: dummy_q.clone(),
                k: Tensor::zeros(&[t, 1]),
                logits: Tensor::zeros(&[n, t]),
                mask: None,
                map: cross_map,
                map_node: 0,
            },
        ]
    }

    fn iou(a: &Region, b: &Region) -> f64 {
        let inter = a.intersect(b).count() as f64;
        let uni = a.union(b).count() as f64;
        inter / uni
    }

    #[test]
    fn soft_mask_matches_the_frozen_hand_computation() {
        let a = Tensor::from_vec(vec![4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let m = soft_mask(&a, 10.0, 0.2).unwrap();
        let want = [0.425428201773, 0.191523932742, 0.191523932742, 0.191523932742];
        for (got, want) in m.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn soft_mask_is_uniform_on_uniform_input_and_scale_invariant() {
        let u = Tensor::filled(&[8], 3.7);
        let m = soft_mask(&u, 10.0, 0.2).unwrap();
        for &v in m.data() {
            assert!((v - 0.125).abs() < 1e-15);
        }
        let a = Tensor::from_vec(vec![5], vec![0.3, 0.1, 0.25, 0.05, 0.3]).unwrap();
        let base = soft_mask(&a, 10.0, 0.2).unwrap();
        // powers of two rescale the data without rounding, so the result
        // is bit-identical
        for k in [-3i32, 2, 7] {
            let scaled = soft_mask(&a.scale((2.0f64).powi(k)), 10.0, 0.2).unwrap();
            assert_eq!(base.data(), scaled.data());
        }
        // arbitrary positive scales agree to rounding error
        for c in [0.17, 3.9, 123.456] {
            let scaled = soft_mask(&a.scale(c), 10.0, 0.2).unwrap();
            for (x, y) in base.data().iter().zip(scaled.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn iom_uses_the_smaller_mass() {
        // soft mass sums to 1; a 2-pixel cluster holding 0.7 of it
        let soft = Tensor::from_vec(vec![4], vec![0.4, 0.2, 0.3, 0.1]).unwrap();
        let cluster = indicator(&Region::from_pixels(2, 2, [0, 2]));
        assert!((iom(&soft, &cluster).unwrap() - 0.7 / 1.0).abs() < 1e-15);
        // a soft mass larger than the cluster size flips the min
        let heavy = Tensor::from_vec(vec![4], vec![3.0, 0.0, 0.0, 0.0]).unwrap();
        let single = indicator(&Region::from_pixels(2, 2, [0]));
        assert!((iom(&heavy, &single).unwrap() - 3.0 / 1.0).abs() < 1e-15);
    }

    #[test]
    fn iom_identity_is_one_and_disjoint_is_zero_exactly() {
        let a = indicator(&Region::from_pixels(3, 3, [0, 4, 7]));
        let b = indicator(&Region::from_pixels(3, 3, [1, 2, 8]));
        assert_eq!(iom(&a, &a).unwrap(), 1.0);
        assert_eq!(iom(&a, &b).unwrap(), 0.0);
        // all-empty overlap is undefined, not zero
        let z = Tensor::zeros(&[9]);
        assert!(matches!(iom(&a, &z), Err(Error::ZeroMass)));
    }

    #[test]
    fn binarize_keeps_above_uniform_pixels_only() {
        let a = Tensor::from_vec(vec![4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let m = soft_mask(&a, 10.0, 0.2).unwrap();
        let b = binarize_mask(&m);
        assert_eq!(b.data(), &[1.0, 0.0, 0.0, 0.0]);
        // a uniform mask has nothing above its own level
        let u = binarize_mask(&Tensor::filled(&[5], 0.2));
        assert!(u.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn kmeans_recovers_well_separated_blobs() {
        let mut pts = Vec::new();
        for i in 0..30 {
            let (cx, cy) = match i % 3 {
                0 => (0.0, 0.0),
                1 => (10.0, 0.0),
                _ => (0.0, 10.0),
            };
            pts.push(cx + 0.01 * (i as f64));
            pts.push(cy + 0.013 * ((i * 7 % 5) as f64));
        }
        let points = Tensor::from_vec(vec![30, 2], pts).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (assign, centers) = kmeans(&points, 3, &mut rng, None, 30).unwrap();
        assert_eq!(centers.rows(), 3);
        // same residue class ⇒ same cluster
        for i in 0..30 {
            assert_eq!(assign[i], assign[i % 3]);
        }
        // all three clusters distinct
        assert_ne!(assign[0], assign[1]);
        assert_ne!(assign[1], assign[2]);
        assert_ne!(assign[0], assign[2]);
    }

    #[test]
    fn kmeans_warm_start_skips_reseeding_and_is_deterministic() {
        let points = Tensor::from_fn(&[12, 3], |i| ((i * 17 % 23) as f64) * 0.3);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let (_, centers) = kmeans(&points, 4, &mut rng, None, 20).unwrap();
        // warm start must not consume the rng at all
        let mut ra = ChaCha20Rng::seed_from_u64(999);
        let mut rb = ChaCha20Rng::seed_from_u64(123);
        let (a1, c1) = kmeans(&points, 4, &mut ra, Some(&centers), 20).unwrap();
        let (a2, c2) = kmeans(&points, 4, &mut rb, Some(&centers), 20).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(c1.data(), c2.data());
    }

    #[test]
    fn kmeans_never_returns_an_empty_cluster() {
        // 5 identical points + 1 outlier, k=3: naive Lloyd would empty one
        let mut data = vec![0.0; 10];
        data.extend_from_slice(&[100.0, 100.0]);
        let points = Tensor::from_vec(vec![6, 2], data).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let (assign, _) = kmeans(&points, 3, &mut rng, None, 20).unwrap();
        let mut counts = [0usize; 3];
        for &a in &assign {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "counts {counts:?}");
    }

    /// 20-pixel blobs inside each half-box. At this size a blob cluster
    /// holds ≈0.37 of its subject's soft mass (clears sigma_cluster=0.2)
    /// while any ≤13-pixel background chunk sits at the sigmoid floor and
    /// holds ≈0.17 at most (filtered). The two background corners are 12
    /// pixels each, so no spatially coherent chunk can reach 14.
    fn planted_blobs() -> (Region, Region) {
        let top = Region::from_pixels(8, 8, (0..64).filter(|p| p / 8 < 4 && p % 8 < 5));
        let bottom = Region::from_pixels(8, 8, (0..64).filter(|p| p / 8 >= 4 && p % 8 >= 3));
        (top, bottom)
    }

    #[test]
    fn planted_structure_is_recovered_exactly() {
        let scene = scene_8x8();
        let (top, bottom) = planted_blobs();
        let communities = [top.clone(), bottom.clone()];
        let records = planted_records(&scene, &communities, &communities, |_| 0.0);
        let cfg = RefineConfig::default();
        let mut state = RefineState::default();
        let refined = refine(&records, &scene, &cfg, 1, &mut state).unwrap();
        assert!(iou(&refined[0], &top) > 0.99, "top IoU {}", iou(&refined[0], &top));
        assert!(iou(&refined[1], &bottom) > 0.99, "bottom IoU {}", iou(&refined[1], &bottom));
        assert!(state.centers.is_some());
        // refined masks stay disjoint when clustering succeeds
        assert_eq!(refined[0].intersect(&refined[1]).count(), 0);
    }

    #[test]
    fn planted_structure_survives_feature_noise() {
        let scene = scene_8x8();
        let (top, bottom) = planted_blobs();
        let communities = [top.clone(), bottom.clone()];
        let records = planted_records(&scene, &communities, &communities, |i| {
            // deterministic jitter, ±0.05 on unit-scale weights
            (((i * 2654435761) % 1000) as f64 / 1000.0 - 0.5) * 0.1
        });
        let cfg = RefineConfig::default();
        let mut state = RefineState::default();
        let refined = refine(&records, &scene, &cfg, 1, &mut state).unwrap();
        assert!(iou(&refined[0], &top) >= 0.9, "top IoU {}", iou(&refined[0], &top));
        assert!(iou(&refined[1], &bottom) >= 0.9, "bottom IoU {}", iou(&refined[1], &bottom));
    }

    #[test]
    fn a_shut_out_subject_falls_back_to_its_carved_box() {
        let scene = scene_8x8();
        // both noun columns light up the same top-left region, so its
        // cluster ties and goes to subject 0; subject 1 wins nothing and
        // must fall back to its box minus subject 0's refined pixels
        let (top, _) = planted_blobs();
        let communities = [top.clone()];
        let nouns = [top.clone(), top.clone()];
        // a wider cluster gate keeps stray background chunks out of the
        // picture; the blob itself scores ≈0.37
        let cfg = RefineConfig { sigma_cluster: 0.3, ..Default::default() };
        let records = planted_records(&scene, &communities, &nouns, |_| 0.0);
        let mut state = RefineState::default();
        let refined = refine(&records, &scene, &cfg, 1, &mut state).unwrap();
        let boxes = scene.subject_regions().unwrap();
        // subject 0 keeps the planted blob
        assert!(iou(&refined[0], &top) > 0.99, "top IoU {}", iou(&refined[0], &top));
        // subject 1 got nothing from clustering; its fallback is its box
        // minus subject 0's refined pixels (disjoint here, so the box)
        let expect = boxes[1].subtract(&refined[0]);
        assert!(!refined[1].is_empty());
        assert_eq!(
            refined[1].pixels().collect::<Vec<_>>(),
            expect.pixels().collect::<Vec<_>>()
        );
    }
}
