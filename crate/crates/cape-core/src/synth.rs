//! Procedural desk-scale categories: random connected skeletons with a
//! canonical 2D layout, rendered as line segments and shaded node disks
//! under random similarity transforms.
//!
//! Nodes carry intensity levels as an identity cue; a configurable fraction
//! of same-degree node pairs share one level ("twins"), so their appearance
//! is identical and only skeleton context can tell them apart. Edges share
//! one mid intensity.

use std::path::{Path, PathBuf};

use rand::Rng;

use crate::annot::image::GrayImage;
use crate::annot::{Dataset, SplitKind, parse_annotations};
use crate::error::{CoreError, Result};
use crate::graph::Skeleton;
use crate::rng::normal;

const LAYOUT_LO: f64 = 0.2;
const LAYOUT_HI: f64 = 0.8;
const MIN_LAYOUT_DIST: f64 = 0.05;
const TREE_EDGE_MIN: f64 = 0.16;
const TREE_EDGE_MAX: f64 = 0.28;
const EDGE_INTENSITY: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCategorySpec {
    pub id: u32,
    pub name: String,
    pub skeleton: Skeleton,
    /// Canonical keypoint positions in [0.2, 0.8]^2, pairwise distance >= 0.05.
    pub layout: Vec<(f64, f64)>,
    /// Disk intensity per node; twin pairs share a value.
    pub node_levels: Vec<f64>,
    pub stroke_width: f64,
    pub node_radius: f64,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    /// Radians, applied about the canvas center.
    pub rotation: f64,
    pub translation: (f64, f64),
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        scale: 1.0,
        rotation: 0.0,
        translation: (0.0, 0.0),
    };

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let (sin, cos) = self.rotation.sin_cos();
        let (dx, dy) = (p.0 - 0.5, p.1 - 0.5);
        (
            0.5 + self.scale * (cos * dx - sin * dy) + self.translation.0,
            0.5 + self.scale * (sin * dx + cos * dy) + self.translation.1,
        )
    }
}

#[derive(Debug, Clone)]
pub struct RenderedInstance {
    pub image: GrayImage,
    /// Keypoints in pixel coordinates.
    pub keypoints: Vec<(f64, f64)>,
    /// Tight [x, y, w, h] box around drawn content, before noise.
    pub bbox: [f64; 4],
    pub transform: SimilarityTransform,
}

/// Random connected skeleton (spanning tree plus density-scaled extra edges)
/// with a rejection-sampled canonical layout. `twin_fraction` of the nodes
/// (rounded down to whole pairs) are grouped into same-degree pairs that
/// share one intensity level.
#[allow(clippy::too_many_arguments)]
pub fn make_category(
    rng: &mut impl Rng,
    k_range: (usize, usize),
    edge_density: f64,
    twin_fraction: f64,
    stroke_width: f64,
    node_radius: f64,
    id: u32,
    name: impl Into<String>,
    rng_seed: u64,
) -> Result<SyntheticCategorySpec> {
    let (k_min, k_max) = k_range;
    if !(3..=68).contains(&k_min) || k_min > k_max || k_max > 68 {
        return Err(CoreError::contract(format!(
            "keypoint range must satisfy 3 <= min <= max <= 68, got {k_range:?}"
        )));
    }
    if !(0.0..=1.0).contains(&edge_density) {
        return Err(CoreError::contract(format!(
            "edge density must be in [0, 1], got {edge_density}"
        )));
    }
    if !(0.0..=1.0).contains(&twin_fraction) {
        return Err(CoreError::contract(format!(
            "twin fraction must be in [0, 1], got {twin_fraction}"
        )));
    }
    let k = rng.random_range(k_min..=k_max);

    // random recursive tree, then extra non-tree edges per density
    let tree_parents: Vec<usize> = (1..k).map(|i| rng.random_range(0..i)).collect();
    let tree: Vec<(usize, usize)> = tree_parents
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i + 1))
        .collect();
    let mut candidates = Vec::new();
    for i in 0..k {
        for j in (i + 1)..k {
            if !tree.iter().any(|&(a, b)| (a.min(b), a.max(b)) == (i, j)) {
                candidates.push((i, j));
            }
        }
    }
    let extra = (edge_density * candidates.len() as f64).round() as usize;
    let picks = rand::seq::index::sample(rng, candidates.len(), extra);
    let mut edges = tree;
    edges.extend(picks.iter().map(|i| candidates[i]));
    let skeleton = Skeleton::new(k, edges)?;
    debug_assert!(skeleton.is_connected());

    let layout = sample_layout(rng, &tree_parents, k)?;
    let node_levels = assign_levels(rng, &skeleton, &layout, twin_fraction);
    Ok(SyntheticCategorySpec {
        id,
        name: name.into(),
        skeleton,
        layout,
        node_levels,
        stroke_width,
        node_radius,
        rng_seed,
    })
}

/// Intensity levels over a shared ladder. Twin pairs are sampled among
/// nodes of equal degree (matching local appearance) that sit far apart in
/// the layout (so the two modes are spatially distinct); everyone else gets
/// a distinct level.
fn assign_levels(
    rng: &mut impl Rng,
    skeleton: &Skeleton,
    layout: &[(f64, f64)],
    twin_fraction: f64,
) -> Vec<f64> {
    let k = skeleton.num_keypoints();
    let want_pairs = ((k as f64 * twin_fraction) / 2.0).round() as usize;
    let mut partner: Vec<Option<usize>> = vec![None; k];
    let mut paired = vec![false; k];
    let mut pairs = 0;
    let mut order: Vec<usize> = (0..k).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
    for &a in &order {
        if pairs == want_pairs {
            break;
        }
        if paired[a] {
            continue;
        }
        let same_degree = |b: &usize| {
            *b != a && !paired[*b] && skeleton.degree(*b) == skeleton.degree(a)
        };
        let mut candidates: Vec<usize> = (0..k)
            .filter(|b| same_degree(b) && dist(layout[a], layout[*b]) >= 0.3)
            .collect();
        if candidates.is_empty() {
            candidates = (0..k)
                .filter(|b| same_degree(b) && dist(layout[a], layout[*b]) >= 0.15)
                .collect();
        }
        if candidates.is_empty() {
            candidates = (0..k).filter(same_degree).collect();
        }
        if candidates.is_empty() {
            continue;
        }
        let b = candidates[rng.random_range(0..candidates.len())];
        partner[a] = Some(b);
        partner[b] = Some(a);
        paired[a] = true;
        paired[b] = true;
        pairs += 1;
    }
    let groups = k - pairs;
    let mut levels = vec![0.0; k];
    let mut next = 0usize;
    for i in 0..k {
        if levels[i] != 0.0 {
            continue;
        }
        let level = 0.55 + 0.45 * (next + 1) as f64 / groups as f64;
        next += 1;
        levels[i] = level;
        if let Some(j) = partner[i] {
            levels[j] = level;
        }
    }
    levels
}

/// Tree-anchored layout: each node lands a short step away from its tree
/// parent (skeleton neighbors stay spatially close, like real skeletons),
/// rejection-sampled to keep every pair at least MIN_LAYOUT_DIST apart.
fn sample_layout(rng: &mut impl Rng, tree_parents: &[usize], k: usize) -> Result<Vec<(f64, f64)>> {
    'restart: for _ in 0..100 {
        let mut points: Vec<(f64, f64)> = Vec::with_capacity(k);
        points.push((
            rng.random_range(0.35..0.65),
            rng.random_range(0.35..0.65),
        ));
        for i in 1..k {
            let parent = points[tree_parents[i - 1]];
            let mut placed = false;
            for _ in 0..200 {
                let step = rng.random_range(TREE_EDGE_MIN..TREE_EDGE_MAX);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let p = (
                    parent.0 + step * angle.cos(),
                    parent.1 + step * angle.sin(),
                );
                if p.0 >= LAYOUT_LO
                    && p.0 < LAYOUT_HI
                    && p.1 >= LAYOUT_LO
                    && p.1 < LAYOUT_HI
                    && points.iter().all(|q| dist(p, *q) >= MIN_LAYOUT_DIST)
                {
                    points.push(p);
                    placed = true;
                    break;
                }
            }
            if !placed {
                continue 'restart;
            }
        }
        return Ok(points);
    }
    Err(CoreError::Generation(format!(
        "could not place {k} layout points at min distance {MIN_LAYOUT_DIST}"
    )))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Render under a random similarity transform (scale 0.7..1.3, rotation
/// +-30 degrees, translation keeping all content in frame).
pub fn render_instance(
    spec: &SyntheticCategorySpec,
    image_size: usize,
    noise_std: f64,
    rng: &mut impl Rng,
) -> Result<RenderedInstance> {
    if noise_std < 0.0 {
        return Err(CoreError::contract("noise_std must be >= 0"));
    }
    let margin = (spec.node_radius + spec.stroke_width + 2.0) / image_size as f64;
    for _ in 0..100 {
        let t = SimilarityTransform {
            scale: rng.random_range(0.7..1.3),
            rotation: rng.random_range(-std::f64::consts::FRAC_PI_6..std::f64::consts::FRAC_PI_6),
            translation: (0.0, 0.0),
        };
        let moved: Vec<(f64, f64)> = spec.layout.iter().map(|&p| t.apply(p)).collect();
        let (min_x, max_x) = min_max(moved.iter().map(|p| p.0));
        let (min_y, max_y) = min_max(moved.iter().map(|p| p.1));
        let tx_lo = margin - min_x;
        let tx_hi = (1.0 - margin) - max_x;
        let ty_lo = margin - min_y;
        let ty_hi = (1.0 - margin) - max_y;
        if tx_lo > tx_hi || ty_lo > ty_hi {
            continue;
        }
        let t = SimilarityTransform {
            translation: (
                rng.random_range(tx_lo..=tx_hi),
                rng.random_range(ty_lo..=ty_hi),
            ),
            ..t
        };
        return render_with_transform(spec, image_size, noise_std, &t, rng);
    }
    Err(CoreError::Generation(
        "no in-frame similarity transform found in 100 attempts".into(),
    ))
}

fn min_max(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

/// Deterministic rasterization for a fixed transform. Edges first, then
/// center-shaded node disks composited with max.
pub fn render_with_transform(
    spec: &SyntheticCategorySpec,
    image_size: usize,
    noise_std: f64,
    transform: &SimilarityTransform,
    rng: &mut impl Rng,
) -> Result<RenderedInstance> {
    let size = image_size as f64;
    let keypoints: Vec<(f64, f64)> = spec
        .layout
        .iter()
        .map(|&p| {
            let q = transform.apply(p);
            (q.0 * size, q.1 * size)
        })
        .collect();
    let k = keypoints.len();
    let mut image = GrayImage::zeros(image_size, image_size);

    let half_stroke = spec.stroke_width / 2.0;
    for &(a, b) in spec.skeleton.edges() {
        draw_segment(&mut image, keypoints[a], keypoints[b], half_stroke);
    }
    debug_assert_eq!(spec.node_levels.len(), k);
    for (i, &c) in keypoints.iter().enumerate() {
        draw_disk(&mut image, c, spec.node_radius, spec.node_levels[i]);
    }

    let bbox = content_bbox(&image)
        .ok_or_else(|| CoreError::Generation("rendered instance has no content".into()))?;

    if noise_std > 0.0 {
        for p in image.pixels.iter_mut() {
            *p = (*p + noise_std * normal(rng)).clamp(0.0, 1.0);
        }
    }

    for &(x, y) in &keypoints {
        if x < 0.0 || y < 0.0 || x > size || y > size {
            return Err(CoreError::Generation(format!(
                "keypoint ({x:.1}, {y:.1}) left the {image_size}px frame"
            )));
        }
    }
    Ok(RenderedInstance {
        image,
        keypoints,
        bbox,
        transform: *transform,
    })
}

fn draw_segment(img: &mut GrayImage, a: (f64, f64), b: (f64, f64), half_width: f64) {
    let pad = half_width + 1.0;
    let x0 = ((a.0.min(b.0) - pad).floor().max(0.0)) as usize;
    let x1 = ((a.0.max(b.0) + pad).ceil().min(img.width as f64)) as usize;
    let y0 = ((a.1.min(b.1) - pad).floor().max(0.0)) as usize;
    let y1 = ((a.1.max(b.1) + pad).ceil().min(img.height as f64)) as usize;
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in y0..y1 {
        for x in x0..x1 {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 > 0.0 {
                (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let proj = (a.0 + t * dx, a.1 + t * dy);
            if dist(p, proj) <= half_width {
                let v = img.get(x, y).max(EDGE_INTENSITY);
                img.set(x, y, v);
            }
        }
    }
}

fn draw_disk(img: &mut GrayImage, c: (f64, f64), radius: f64, intensity: f64) {
    let x0 = ((c.0 - radius - 1.0).floor().max(0.0)) as usize;
    let x1 = ((c.0 + radius + 1.0).ceil().min(img.width as f64)) as usize;
    let y0 = ((c.1 - radius - 1.0).floor().max(0.0)) as usize;
    let y1 = ((c.1 + radius + 1.0).ceil().min(img.height as f64)) as usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let d = dist((x as f64 + 0.5, y as f64 + 0.5), c);
            if d <= radius {
                let shade = intensity * (1.0 - 0.7 * (d / radius) * (d / radius));
                if shade > img.get(x, y) {
                    img.set(x, y, shade);
                }
            }
        }
    }
}

fn content_bbox(img: &GrayImage) -> Option<[f64; 4]> {
    let mut lo = (usize::MAX, usize::MAX);
    let mut hi = (0usize, 0usize);
    let mut any = false;
    for y in 0..img.height {
        for x in 0..img.width {
            if img.get(x, y) > 0.0 {
                any = true;
                lo = (lo.0.min(x), lo.1.min(y));
                hi = (hi.0.max(x), hi.1.max(y));
            }
        }
    }
    any.then(|| {
        [
            lo.0 as f64,
            lo.1 as f64,
            (hi.0 - lo.0 + 1) as f64,
            (hi.1 - lo.1 + 1) as f64,
        ]
    })
}

// ── splits ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SplitSpecs {
    pub train: Vec<SyntheticCategorySpec>,
    pub val: Vec<SyntheticCategorySpec>,
    pub test: Vec<SyntheticCategorySpec>,
}

impl SplitSpecs {
    pub fn of(&self, split: SplitKind) -> &[SyntheticCategorySpec] {
        match split {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthSettings {
    pub k_range: (usize, usize),
    pub edge_density: f64,
    /// Fraction of nodes grouped into identical-appearance twin pairs.
    pub twin_fraction: f64,
    pub stroke_width: f64,
    pub node_radius: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            k_range: (4, 8),
            edge_density: 0.25,
            twin_fraction: 0.4,
            stroke_width: 2.0,
            node_radius: 3.0,
        }
    }
}

/// Mutually exclusive train/val/test categories from one master stream.
pub fn make_split(
    rng: &mut impl Rng,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    settings: &SynthSettings,
) -> Result<SplitSpecs> {
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(CoreError::contract("split counts must be >= 1"));
    }
    let mut seeds: Vec<u64> = Vec::new();
    let build = |count: usize,
                     split: &str,
                     seeds: &mut Vec<u64>,
                     rng: &mut dyn rand::RngCore|
     -> Result<Vec<SyntheticCategorySpec>> {
        (0..count)
            .map(|i| {
                let mut seed: u64 = rng.random();
                while seeds.contains(&seed) {
                    seed = rng.random();
                }
                seeds.push(seed);
                let mut cat_rng = crate::rng::stream(seed, &[0]);
                make_category(
                    &mut cat_rng,
                    settings.k_range,
                    settings.edge_density,
                    settings.twin_fraction,
                    settings.stroke_width,
                    settings.node_radius,
                    0, // ids assigned below
                    format!("synth_{split}_{i:02}"),
                    seed,
                )
            })
            .collect()
    };
    let mut train = build(n_train, "train", &mut seeds, rng)?;
    let mut val = build(n_val, "val", &mut seeds, rng)?;
    let mut test = build(n_test, "test", &mut seeds, rng)?;
    let mut next_id = 1;
    for spec in train.iter_mut().chain(val.iter_mut()).chain(test.iter_mut()) {
        spec.id = next_id;
        next_id += 1;
    }
    Ok(SplitSpecs { train, val, test })
}

/// Write a rendered dataset to disk: PGM images plus one annotation file in
/// the standard schema. Returns the annotation file path.
pub fn dump_dataset(
    splits: &SplitSpecs,
    image_size: usize,
    noise_std: f64,
    instances_per_category: usize,
    out_dir: &Path,
    master_seed: u64,
) -> Result<PathBuf> {
    let image_dir = out_dir.join("images");
    std::fs::create_dir_all(&image_dir)?;

    let mut categories = Vec::new();
    let mut annotations = Vec::new();
    for (split, specs) in [
        (SplitKind::Train, &splits.train),
        (SplitKind::Val, &splits.val),
        (SplitKind::Test, &splits.test),
    ] {
        for spec in specs.iter() {
            let k = spec.skeleton.num_keypoints();
            categories.push(serde_json::json!({
                "id": spec.id,
                "name": spec.name,
                "keypoints": (0..k).map(|i| format!("kp{i}")).collect::<Vec<_>>(),
                "skeleton": spec.skeleton.edges().iter().map(|&(a, b)| [a, b]).collect::<Vec<_>>(),
                "split": split.as_str(),
            }));
            let mut rng = crate::rng::stream(master_seed, &[spec.id as u64, 0xd0]);
            for idx in 0..instances_per_category {
                let inst = render_instance(spec, image_size, noise_std, &mut rng)?;
                let file = format!("images/{}_{idx:03}.pgm", spec.name);
                inst.image.save_pgm(&out_dir.join(&file))?;
                let keypoints: Vec<f64> = inst
                    .keypoints
                    .iter()
                    .flat_map(|&(x, y)| [x, y, 2.0])
                    .collect();
                annotations.push(serde_json::json!({
                    "image_path": file,
                    "category_id": spec.id,
                    "bbox": inst.bbox,
                    "keypoints": keypoints,
                }));
            }
        }
    }
    let doc = serde_json::json!({ "categories": categories, "annotations": annotations });
    let path = out_dir.join("annotations.json");
    std::fs::write(&path, serde_json::to_string_pretty(&doc).expect("json"))?;
    Ok(path)
}

/// Parse a dumped dataset back (convenience for round-trip checks).
pub fn parse_dump(annotation_path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(annotation_path)?;
    parse_annotations(&text)
}

/// Render a fully labeled episode (S supports + 1 query) from one category.
pub fn synthetic_episode(
    spec: &SyntheticCategorySpec,
    image_size: usize,
    noise_std: f64,
    n_shots: usize,
    rng: &mut impl Rng,
) -> Result<crate::annot::Episode> {
    if n_shots == 0 {
        return Err(CoreError::contract("episodes need at least one support"));
    }
    let to_sample = |inst: &RenderedInstance| crate::annot::Sample {
        image: inst.image.clone(),
        keypoints: inst.keypoints.iter().map(|&(x, y)| (x, y, 2)).collect(),
    };
    let instances: Vec<RenderedInstance> = (0..n_shots + 1)
        .map(|_| render_instance(spec, image_size, noise_std, rng))
        .collect::<Result<_>>()?;
    let query = &instances[n_shots];
    Ok(crate::annot::Episode {
        supports: instances[..n_shots].iter().map(to_sample).collect(),
        query: to_sample(query),
        query_bbox: query.bbox,
        skeleton: spec.skeleton.clone(),
        validity: vec![true; spec.skeleton.num_keypoints()],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn spec_with(k_range: (usize, usize), density: f64, seed: u64) -> SyntheticCategorySpec {
        let mut rng = stream(seed, &[1]);
        make_category(&mut rng, k_range, density, 0.0, 2.0, 3.0, 1, "t", seed).unwrap()
    }

    fn spec_with_twins(k: usize, twin_fraction: f64, seed: u64) -> SyntheticCategorySpec {
        let mut rng = stream(seed, &[1]);
        make_category(&mut rng, (k, k), 0.3, twin_fraction, 2.0, 3.0, 1, "t", seed).unwrap()
    }

    #[test]
    fn twins_share_levels_and_degrees() {
        for seed in 0..20u64 {
            let spec = spec_with_twins(8, 0.5, seed);
            let mut by_level: std::collections::BTreeMap<u64, Vec<usize>> = Default::default();
            for (i, &l) in spec.node_levels.iter().enumerate() {
                by_level.entry(l.to_bits()).or_default().push(i);
            }
            let mut twin_nodes = 0;
            for nodes in by_level.values() {
                assert!(nodes.len() <= 2, "more than two nodes share a level");
                if let [a, b] = nodes[..] {
                    assert_eq!(spec.skeleton.degree(a), spec.skeleton.degree(b));
                    twin_nodes += 2;
                }
            }
            assert!(twin_nodes <= 4, "requested at most 2 pairs for K=8");
        }
    }

    #[test]
    fn zero_twin_fraction_keeps_levels_distinct() {
        let spec = spec_with_twins(8, 0.0, 3);
        let mut levels: Vec<u64> = spec.node_levels.iter().map(|l| l.to_bits()).collect();
        levels.sort_unstable();
        levels.dedup();
        assert_eq!(levels.len(), 8);
        assert!(spec.node_levels.iter().all(|&l| (0.55..=1.0).contains(&l)));
    }

    #[test]
    fn tree_only_at_zero_density() {
        let spec = spec_with((3, 3), 0.0, 5);
        assert_eq!(spec.skeleton.edges().len(), 2);
        assert!(spec.skeleton.is_connected());
    }

    #[test]
    fn complete_graph_at_full_density() {
        let spec = spec_with((4, 4), 1.0, 6);
        assert_eq!(spec.skeleton.edges().len(), 6);
    }

    #[test]
    fn categories_are_deterministic_per_seed() {
        assert_eq!(spec_with((4, 8), 0.3, 9), spec_with((4, 8), 0.3, 9));
    }

    #[test]
    fn layout_respects_min_distance() {
        let spec = spec_with((10, 10), 0.2, 11);
        for (i, &a) in spec.layout.iter().enumerate() {
            assert!(a.0 >= LAYOUT_LO && a.0 < LAYOUT_HI);
            assert!(a.1 >= LAYOUT_LO && a.1 < LAYOUT_HI);
            for &b in &spec.layout[i + 1..] {
                assert!(dist(a, b) >= MIN_LAYOUT_DIST);
            }
        }
    }

    #[test]
    fn identity_transform_places_keypoints_at_scaled_layout() {
        let spec = spec_with((5, 5), 0.2, 12);
        let mut rng = stream(12, &[2]);
        let inst =
            render_with_transform(&spec, 128, 0.0, &SimilarityTransform::IDENTITY, &mut rng)
                .unwrap();
        for (&(kx, ky), &(lx, ly)) in inst.keypoints.iter().zip(&spec.layout) {
            assert!((kx - lx * 128.0).abs() < 1e-12);
            assert!((ky - ly * 128.0).abs() < 1e-12);
        }
    }

    #[test]
    fn half_turn_is_a_point_reflection() {
        let spec = spec_with((5, 5), 0.2, 13);
        let mut rng = stream(13, &[2]);
        let base =
            render_with_transform(&spec, 128, 0.0, &SimilarityTransform::IDENTITY, &mut rng)
                .unwrap();
        let turned = render_with_transform(
            &spec,
            128,
            0.0,
            &SimilarityTransform {
                scale: 1.0,
                rotation: std::f64::consts::PI,
                translation: (0.0, 0.0),
            },
            &mut rng,
        )
        .unwrap();
        for (&(bx, by), &(tx, ty)) in base.keypoints.iter().zip(&turned.keypoints) {
            assert!((tx - (128.0 - bx)).abs() < 1e-9);
            assert!((ty - (128.0 - by)).abs() < 1e-9);
        }
    }

    #[test]
    fn noiseless_disk_centers_are_locally_brightest() {
        // brute-force pixel scan: within 1.5 px of each keypoint the argmax
        // pixel center lies within 1 px of the keypoint
        for seed in [21u64, 22, 23] {
            let spec = spec_with((4, 9), 0.3, seed);
            let mut rng = stream(seed, &[3]);
            let inst = render_instance(&spec, 128, 0.0, &mut rng).unwrap();
            for &(kx, ky) in &inst.keypoints {
                let mut best = (0.0, (0.0, 0.0));
                for y in 0..128 {
                    for x in 0..128 {
                        let p = (x as f64 + 0.5, y as f64 + 0.5);
                        if dist(p, (kx, ky)) <= 1.5 {
                            let v = inst.image.get(x, y);
                            if v > best.0 {
                                best = (v, p);
                            }
                        }
                    }
                }
                assert!(best.0 > 0.0, "no lit pixel near ({kx}, {ky})");
                assert!(
                    dist(best.1, (kx, ky)) <= 1.0,
                    "brightest pixel {:?} is {}px from ({kx}, {ky})",
                    best.1,
                    dist(best.1, (kx, ky))
                );
            }
        }
    }

    #[test]
    fn bbox_contains_all_keypoints() {
        let spec = spec_with((6, 6), 0.4, 31);
        let mut rng = stream(31, &[4]);
        for _ in 0..5 {
            let inst = render_instance(&spec, 128, 0.05, &mut rng).unwrap();
            let [x, y, w, h] = inst.bbox;
            for &(kx, ky) in &inst.keypoints {
                assert!(kx >= x && kx <= x + w);
                assert!(ky >= y && ky <= y + h);
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let settings = SynthSettings::default();
        let a = make_split(&mut stream(77, &[0]), 2, 1, 1, &settings).unwrap();
        let b = make_split(&mut stream(77, &[0]), 2, 1, 1, &settings).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);

        let mut seeds: Vec<u64> = a
            .train
            .iter()
            .chain(&a.val)
            .chain(&a.test)
            .map(|s| s.rng_seed)
            .collect();
        let total = seeds.len();
        seeds.dedup();
        assert_eq!(seeds.len(), total);

        // pairwise different skeleton or layout
        let all: Vec<_> = a.train.iter().chain(&a.val).chain(&a.test).collect();
        for i in 0..all.len() {
            for j in (i + 1)..all.len() {
                assert!(all[i].skeleton != all[j].skeleton || all[i].layout != all[j].layout);
            }
        }
    }
}
