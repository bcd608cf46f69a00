//! Evaluation: PCK@threshold per category and overall, with optional
//! ablation variants (random skeletons, support/query masking).

use anyhow::Result;
use cape_core::annot::{Episode, SplitKind};
use cape_core::graph::{NormalizedAdjacency, random_skeleton, skeleton_adjacency};
use cape_core::model::Model;
use cape_core::params::{Net, ParamStore};
use cape_core::rng::stream;

use crate::config::RunConfig;
use crate::data::EpisodeSource;

const TAG_ABLATE: u64 = 0xab1a;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalVariant {
    Plain,
    /// Substitute a per-instance random skeleton with the same edge count.
    RandomGraph,
    /// Zero a random rectangle covering `fraction` of every support image.
    MaskSupport { fraction: f64 },
    /// Zero a random rectangle covering `fraction` of the query image.
    MaskQuery { fraction: f64 },
}

#[derive(Debug, Clone)]
pub struct CategoryEval {
    pub name: String,
    pub correct: usize,
    pub total: usize,
}

impl CategoryEval {
    pub fn pck(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub per_category: Vec<CategoryEval>,
    pub correct: usize,
    pub total: usize,
    pub overall_pck: f64,
    pub skipped: Vec<String>,
}

/// Zero an axis-aligned rectangle covering `fraction` of the image area.
/// Center and aspect come from the stream, so sweeping the fraction reuses
/// the same rectangle scaled in area.
fn apply_mask(image: &mut cape_core::annot::image::GrayImage, fraction: f64, rng: &mut impl rand::Rng) {
    let (cx, cy): (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let aspect: f64 = rng.random_range(0.5..2.0);
    if fraction <= 0.0 {
        return;
    }
    let area = fraction * (image.width * image.height) as f64;
    let w = (area * aspect).sqrt();
    let h = area / w;
    let x0 = ((cx * image.width as f64) - w / 2.0).floor().max(0.0) as usize;
    let y0 = ((cy * image.height as f64) - h / 2.0).floor().max(0.0) as usize;
    let x1 = (((cx * image.width as f64) + w / 2.0).ceil() as usize).min(image.width);
    let y1 = (((cy * image.height as f64) + h / 2.0).ceil() as usize).min(image.height);
    for y in y0..y1 {
        for x in x0..x1 {
            image.set(x, y, 0.0);
        }
    }
}

/// Apply an ablation variant to an episode; returns the adjacency override,
/// if any. The per-episode stream is independent of the sweep fraction.
fn apply_variant(
    episode: &mut Episode,
    variant: EvalVariant,
    seed: u64,
    category: usize,
    index: usize,
) -> Option<NormalizedAdjacency> {
    let mut rng = stream(seed, &[TAG_ABLATE, category as u64, index as u64]);
    match variant {
        EvalVariant::Plain => None,
        EvalVariant::RandomGraph => {
            let k = episode.skeleton.num_keypoints();
            let edges = episode.skeleton.edges().len();
            let skel = random_skeleton(k, edges, &mut rng).expect("edge count is feasible");
            Some(skeleton_adjacency(&skel))
        }
        EvalVariant::MaskSupport { fraction } => {
            for shot in &mut episode.supports {
                apply_mask(&mut shot.image, fraction, &mut rng);
            }
            None
        }
        EvalVariant::MaskQuery { fraction } => {
            apply_mask(&mut episode.query.image, fraction, &mut rng);
            None
        }
    }
}

/// Evaluate one split. Counts are summed per category and overall, so the
/// aggregation is order-independent.
pub fn evaluate_split(
    model: &Model,
    params: &ParamStore,
    source: &EpisodeSource,
    split: SplitKind,
    cfg: &RunConfig,
    episodes_per_category: usize,
    variant: EvalVariant,
) -> Result<EvalSummary> {
    let names = source.category_names(split);
    let mut per_category = Vec::new();
    let mut skipped = Vec::new();
    let (mut correct, mut total) = (0usize, 0usize);
    for (c, name) in names.iter().enumerate() {
        let mut cat = CategoryEval {
            name: name.clone(),
            correct: 0,
            total: 0,
        };
        let mut failed = None;
        for e in 0..episodes_per_category {
            let episode = match source.eval_episode(cfg.seed, split, c, e, cfg.n_shots) {
                Ok(ep) => ep,
                Err(err) => {
                    failed = Some(err.to_string());
                    break;
                }
            };
            let mut episode = episode;
            let adj_override = apply_variant(&mut episode, variant, cfg.seed, c, e);
            let mut net = Net::new(params, false);
            let adjacency = match (&adj_override, cfg.disable_graph) {
                (_, true) => NormalizedAdjacency::zero(episode.num_keypoints()),
                (Some(adj), _) => adj.clone(),
                (None, _) => model.adjacency_for(&episode),
            };
            let fwd = model.forward_with_adjacency(&mut net, &episode, &adjacency)?;
            let (c_ok, c_tot) = model.episode_pck_counts(&fwd, &episode, cfg.pck_threshold)?;
            cat.correct += c_ok;
            cat.total += c_tot;
        }
        if let Some(err) = failed {
            eprintln!("warning: skipping category {name}: {err}");
            skipped.push(name.clone());
            continue;
        }
        correct += cat.correct;
        total += cat.total;
        per_category.push(cat);
    }
    let overall_pck = if total > 0 {
        correct as f64 / total as f64
    } else {
        0.0
    };
    Ok(EvalSummary {
        per_category,
        correct,
        total,
        overall_pck,
        skipped,
    })
}
