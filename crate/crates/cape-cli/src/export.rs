//! Attention-map export: one CSV grid per (layer, keypoint) plus a sidecar
//! with proposals, predictions, and ground truth.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cape_core::annot::SplitKind;
use cape_core::decoder::export_attention;
use cape_core::model::Model;
use cape_core::params::{Net, ParamStore};

use crate::config::RunConfig;
use crate::data::EpisodeSource;

pub struct ExportOutcome {
    pub grid_files: Vec<PathBuf>,
    pub sidecar: PathBuf,
}

#[allow(clippy::too_many_arguments)]
pub fn export_attention_maps(
    model: &Model,
    params: &ParamStore,
    source: &EpisodeSource,
    cfg: &RunConfig,
    split: SplitKind,
    category: usize,
    episode_index: usize,
    out_dir: &Path,
) -> Result<ExportOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let episode = source.eval_episode(cfg.seed, split, category, episode_index, cfg.n_shots)?;
    let mut net = Net::new(params, false);
    let fwd = model.forward(&mut net, &episode)?;

    let mut grid_files = Vec::new();
    for layer in 0..fwd.decoder.attn_maps.len() {
        for (k, grid) in export_attention(&fwd.decoder, layer)?.iter().enumerate() {
            let mut text = String::new();
            for row in 0..grid.rows() {
                let cells: Vec<String> = grid.row(row).iter().map(|v| format!("{v}")).collect();
                writeln!(text, "{}", cells.join(",")).expect("string write");
            }
            let path = out_dir.join(format!("layer{layer}_kp{k:02}.csv"));
            std::fs::write(&path, text)
                .with_context(|| format!("writing {}", path.display()))?;
            grid_files.push(path);
        }
    }

    let size = cfg.image_size as f64;
    let scale = |pts: &[(f64, f64)]| -> Vec<[f64; 2]> {
        pts.iter().map(|&(x, y)| [x * size, y * size]).collect()
    };
    let gt: Vec<[f64; 2]> = episode
        .query
        .keypoints
        .iter()
        .map(|&(x, y, _)| [x, y])
        .collect();
    let sidecar = out_dir.join("keypoints.json");
    let doc = serde_json::json!({
        "split": split.as_str(),
        "category_index": category,
        "episode_index": episode_index,
        "image_size": cfg.image_size,
        "bbox": episode.query_bbox,
        "validity": episode.validity,
        "proposals_px": scale(&fwd.proposals.coords),
        "predicted_px": scale(&fwd.decoder.coords),
        "ground_truth_px": gt,
    });
    std::fs::write(&sidecar, serde_json::to_string_pretty(&doc).expect("json"))?;
    Ok(ExportOutcome {
        grid_files,
        sidecar,
    })
}
