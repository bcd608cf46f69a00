//! COCO-like annotation files: parsing, skeleton index-base unification,
//! validation, and few-shot episode sampling.
//!
//! Schema (JSON): top-level `categories` and `annotations`. Each category is
//! `{id, name, keypoints: [names], skeleton: [[i,j],...]}` with an optional
//! `split` tag ("train" | "val" | "test", default "train"); each annotation
//! is `{image_path, category_id, bbox: [x,y,w,h], keypoints: [x1,y1,v1,...]}`.
//! See `tests/fixtures/annotations_1based.json` for a complete example.

pub mod image;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::graph::Skeleton;
use image::GrayImage;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CategoryJson {
    id: u32,
    name: String,
    keypoints: Vec<String>,
    skeleton: Vec<[i64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct InstanceJson {
    image_path: String,
    category_id: u32,
    bbox: [f64; 4],
    keypoints: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AnnotationFileJson {
    categories: Vec<CategoryJson>,
    annotations: Vec<InstanceJson>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl SplitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        }
    }

    fn parse(s: &str) -> Result<SplitKind> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(CoreError::Validation(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryRecord {
    pub id: u32,
    pub name: String,
    pub num_keypoints: usize,
    pub skeleton: Skeleton,
    pub keypoint_names: Vec<String>,
    pub split: SplitKind,
}

/// One keypoint: (x px, y px, visibility). Visibility follows the common
/// triple convention: 0 absent, 1 occluded, 2 visible. Keypoints with
/// visibility 0 are excluded from losses and PCK.
pub type Keypoint = (f64, f64, u8);

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub image_path: String,
    pub category_id: u32,
    pub bbox: [f64; 4],
    pub keypoints: Vec<Keypoint>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub categories: BTreeMap<u32, CategoryRecord>,
    pub instances: BTreeMap<u32, Vec<InstanceRecord>>,
}

impl Dataset {
    pub fn category_ids(&self, split: SplitKind) -> Vec<u32> {
        self.categories
            .values()
            .filter(|c| c.split == split)
            .map(|c| c.id)
            .collect()
    }

    pub fn instances_of(&self, category_id: u32) -> &[InstanceRecord] {
        self.instances
            .get(&category_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// Detect and remove a 1-based skeleton index convention.
///
/// If every index is >= 1 and the maximum equals K, indices are 1-based and
/// shifted down; if the minimum is 0 and the maximum is at most K-1 they are
/// already 0-based. An index above K, or a range spanning 0..=K, cannot be
/// reconciled and is a hard error.
pub fn unify_index_base(raw: &[(usize, usize)], k: usize) -> Result<Vec<(usize, usize)>> {
    if raw.is_empty() {
        return Ok(Vec::new());
    }
    let min = raw.iter().map(|&(a, b)| a.min(b)).min().unwrap();
    let max = raw.iter().map(|&(a, b)| a.max(b)).max().unwrap();
    if max > k || (min == 0 && max == k) {
        return Err(CoreError::IndexBase(format!(
            "indices span {min}..={max} for K={k}"
        )));
    }
    if min >= 1 && max == k {
        Ok(raw.iter().map(|&(a, b)| (a - 1, b - 1)).collect())
    } else {
        Ok(raw.to_vec())
    }
}

/// Parse an annotation document, unify skeleton index bases, validate.
pub fn parse_annotations(text: &str) -> Result<Dataset> {
    let file: AnnotationFileJson = serde_json::from_str(text)
        .map_err(|e| CoreError::Parse(format!("line {} column {}: {e}", e.line(), e.column())))?;
    let mut categories = BTreeMap::new();
    for c in &file.categories {
        let k = c.keypoints.len();
        if k == 0 {
            return Err(CoreError::Validation(format!(
                "category {} ({}) has no keypoints",
                c.id, c.name
            )));
        }
        let raw: Vec<(usize, usize)> = c
            .skeleton
            .iter()
            .map(|&[a, b]| {
                if a < 0 || b < 0 {
                    Err(CoreError::Validation(format!(
                        "category {} ({}) has negative skeleton index",
                        c.id, c.name
                    )))
                } else {
                    Ok((a as usize, b as usize))
                }
            })
            .collect::<Result<_>>()?;
        let unified = unify_index_base(&raw, k).map_err(|e| {
            CoreError::Validation(format!("category {} ({}): {e}", c.id, c.name))
        })?;
        let skeleton = Skeleton::new(k, unified).map_err(|e| {
            CoreError::Validation(format!("category {} ({}): {e}", c.id, c.name))
        })?;
        let split = match &c.split {
            Some(s) => SplitKind::parse(s)?,
            None => SplitKind::Train,
        };
        if categories
            .insert(
                c.id,
                CategoryRecord {
                    id: c.id,
                    name: c.name.clone(),
                    num_keypoints: k,
                    skeleton,
                    keypoint_names: c.keypoints.clone(),
                    split,
                },
            )
            .is_some()
        {
            return Err(CoreError::Validation(format!("duplicate category id {}", c.id)));
        }
    }

    let mut instances: BTreeMap<u32, Vec<InstanceRecord>> = BTreeMap::new();
    for (idx, a) in file.annotations.iter().enumerate() {
        let cat = categories.get(&a.category_id).ok_or_else(|| {
            CoreError::Validation(format!(
                "annotation {idx} references unknown category {}",
                a.category_id
            ))
        })?;
        if a.keypoints.len() != cat.num_keypoints * 3 {
            return Err(CoreError::Validation(format!(
                "annotation {idx}: expected {} keypoint values, got {}",
                cat.num_keypoints * 3,
                a.keypoints.len()
            )));
        }
        if a.bbox[2] <= 0.0 || a.bbox[3] <= 0.0 {
            return Err(CoreError::Validation(format!(
                "annotation {idx}: bbox must have positive extents"
            )));
        }
        let keypoints: Vec<Keypoint> = a
            .keypoints
            .chunks(3)
            .map(|t| (t[0], t[1], t[2] as u8))
            .collect();
        if keypoints.iter().any(|&(_, _, v)| v > 2) {
            return Err(CoreError::Validation(format!(
                "annotation {idx}: visibility flags must be 0, 1, or 2"
            )));
        }
        instances.entry(a.category_id).or_default().push(InstanceRecord {
            image_path: a.image_path.clone(),
            category_id: a.category_id,
            bbox: a.bbox,
            keypoints,
        });
    }
    Ok(Dataset {
        categories,
        instances,
    })
}

pub fn parse_annotations_file(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Parse(format!("{}: {e}", path.display())))?;
    parse_annotations(&text)
}

/// Serialize a dataset back into the annotation schema. Parsing the output
/// reproduces the dataset value exactly (skeletons come out 0-based).
pub fn serialize_annotations(ds: &Dataset) -> String {
    let categories = ds
        .categories
        .values()
        .map(|c| CategoryJson {
            id: c.id,
            name: c.name.clone(),
            keypoints: c.keypoint_names.clone(),
            skeleton: c
                .skeleton
                .edges()
                .iter()
                .map(|&(a, b)| [a as i64, b as i64])
                .collect(),
            split: Some(c.split.as_str().to_string()),
        })
        .collect();
    let annotations = ds
        .instances
        .values()
        .flatten()
        .map(|i| InstanceJson {
            image_path: i.image_path.clone(),
            category_id: i.category_id,
            bbox: i.bbox,
            keypoints: i
                .keypoints
                .iter()
                .flat_map(|&(x, y, v)| [x, y, v as f64])
                .collect(),
        })
        .collect();
    serde_json::to_string_pretty(&AnnotationFileJson {
        categories,
        annotations,
    })
    .expect("annotation serialization cannot fail")
}

// ── episodes ────────────────────────────────────────────────────────────

/// One image with its keypoints, rescaled to the model resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: GrayImage,
    pub keypoints: Vec<Keypoint>,
}

/// A few-shot task instance: S support samples, one query, the category
/// skeleton, and the query-side validity mask (visibility > 0).
#[derive(Debug, Clone)]
pub struct Episode {
    pub supports: Vec<Sample>,
    pub query: Sample,
    pub query_bbox: [f64; 4],
    pub skeleton: Skeleton,
    pub validity: Vec<bool>,
}

impl Episode {
    pub fn num_keypoints(&self) -> usize {
        self.skeleton.num_keypoints()
    }

    /// Jointly relabel keypoints everywhere: supports, query, skeleton, and
    /// the validity mask. Keypoint i becomes keypoint perm[i].
    pub fn permuted(&self, perm: &[usize]) -> Result<Episode> {
        let k = self.num_keypoints();
        let apply = |kps: &[Keypoint]| -> Vec<Keypoint> {
            let mut out = vec![(0.0, 0.0, 0u8); k];
            for (i, &kp) in kps.iter().enumerate() {
                out[perm[i]] = kp;
            }
            out
        };
        let mut validity = vec![false; k];
        for (i, &v) in self.validity.iter().enumerate() {
            validity[perm[i]] = v;
        }
        Ok(Episode {
            supports: self
                .supports
                .iter()
                .map(|s| Sample {
                    image: s.image.clone(),
                    keypoints: apply(&s.keypoints),
                })
                .collect(),
            query: Sample {
                image: self.query.image.clone(),
                keypoints: apply(&self.query.keypoints),
            },
            query_bbox: self.query_bbox,
            skeleton: self.skeleton.permuted(perm)?,
            validity,
        })
    }
}

fn load_sample(
    root: &Path,
    rec: &InstanceRecord,
    image_size: usize,
) -> Result<(Sample, [f64; 4])> {
    let img = GrayImage::load(&root.join(&rec.image_path))?;
    for &(x, y, v) in &rec.keypoints {
        if v > 0 && (x < 0.0 || y < 0.0 || x > img.width as f64 || y > img.height as f64) {
            return Err(CoreError::Validation(format!(
                "visible keypoint ({x}, {y}) outside {}x{} image {}",
                img.width, img.height, rec.image_path
            )));
        }
    }
    let sx = image_size as f64 / img.width as f64;
    let sy = image_size as f64 / img.height as f64;
    let image = img.resize_bilinear(image_size, image_size);
    let keypoints = rec
        .keypoints
        .iter()
        .map(|&(x, y, v)| (x * sx, y * sy, v))
        .collect();
    let bbox = [
        rec.bbox[0] * sx,
        rec.bbox[1] * sy,
        rec.bbox[2] * sx,
        rec.bbox[3] * sy,
    ];
    Ok((Sample { image, keypoints }, bbox))
}

/// Draw S supports and one query without replacement from a category.
pub fn sample_episode(
    ds: &Dataset,
    images_root: &Path,
    category_id: u32,
    n_shots: usize,
    image_size: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    let cat = ds
        .categories
        .get(&category_id)
        .ok_or_else(|| CoreError::Validation(format!("unknown category {category_id}")))?;
    let pool = ds.instances_of(category_id);
    if pool.len() < n_shots + 1 {
        return Err(CoreError::InsufficientData(format!(
            "category {} ({}) has {} instances, need {}",
            cat.id,
            cat.name,
            pool.len(),
            n_shots + 1
        )));
    }
    let picks = rand::seq::index::sample(rng, pool.len(), n_shots + 1);
    let mut supports = Vec::with_capacity(n_shots);
    for i in 0..n_shots {
        supports.push(load_sample(images_root, &pool[picks.index(i)], image_size)?.0);
    }
    let (query, query_bbox) = load_sample(images_root, &pool[picks.index(n_shots)], image_size)?;
    let validity = query.keypoints.iter().map(|&(_, _, v)| v > 0).collect();
    Ok(Episode {
        supports,
        query,
        query_bbox,
        skeleton: cat.skeleton.clone(),
        validity,
    })
}

/// Resolve an image root: annotation-relative paths are the convention.
pub fn images_root_for(annotation_path: &Path) -> PathBuf {
    annotation_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}
