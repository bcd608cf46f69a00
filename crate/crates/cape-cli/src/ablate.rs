//! Ablation studies on a trained checkpoint: per-instance random skeletons,
//! support/query masking sweeps, and the keypoint-order equivariance check.

use anyhow::{Result, bail};
use cape_core::annot::SplitKind;
use cape_core::model::Model;
use cape_core::params::{Net, ParamStore};
use cape_core::rng::stream;

use crate::config::RunConfig;
use crate::data::EpisodeSource;
use crate::eval::{EvalVariant, evaluate_split};
use crate::metrics::{MetricsRecord, MetricsWriter};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    RandomGraph,
    MaskSupport,
    MaskQuery,
    PermuteCheck,
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<AblationMode> {
        Ok(match s {
            "random_graph" => AblationMode::RandomGraph,
            "mask_support" => AblationMode::MaskSupport,
            "mask_query" => AblationMode::MaskQuery,
            "permute_check" => AblationMode::PermuteCheck,
            other => bail!("unknown ablation mode {other:?} (expected random_graph, mask_support, mask_query, or permute_check)"),
        })
    }

    fn as_str(&self) -> &'static str {
        match self {
            AblationMode::RandomGraph => "random_graph",
            AblationMode::MaskSupport => "mask_support",
            AblationMode::MaskQuery => "mask_query",
            AblationMode::PermuteCheck => "permute_check",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub pck: f64,
}

#[derive(Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Set by permute_check.
    pub max_deviation: Option<f64>,
}

/// Maximum coordinate deviation between a forward pass and the jointly
/// permuted forward pass over `episodes` random test episodes.
pub fn permute_check(
    model: &Model,
    params: &ParamStore,
    source: &EpisodeSource,
    cfg: &RunConfig,
    episodes: usize,
) -> Result<f64> {
    let categories = source.category_names(SplitKind::Test).len();
    let mut max_dev = 0.0f64;
    for e in 0..episodes {
        let cat = e % categories;
        let episode = source.eval_episode(cfg.seed, SplitKind::Test, cat, e, cfg.n_shots)?;
        let k = episode.num_keypoints();
        let mut perm: Vec<usize> = (0..k).collect();
        let mut rng = stream(cfg.seed, &[0xbe, e as u64]);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let permuted = episode.permuted(&perm)?;

        let mut net_a = Net::new(params, false);
        let base = model.forward(&mut net_a, &episode)?;
        let mut net_b = Net::new(params, false);
        let moved = model.forward(&mut net_b, &permuted)?;

        for (i, &pi) in perm.iter().enumerate() {
            let a = base.decoder.coords[i];
            let b = moved.decoder.coords[pi];
            max_dev = max_dev.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
        }
    }
    Ok(max_dev)
}

/// Run one ablation mode and append its rows to the metrics log.
pub fn run_ablation(
    model: &Model,
    params: &ParamStore,
    source: &EpisodeSource,
    cfg: &RunConfig,
    mode: AblationMode,
    fractions: &[f64],
    epoch: u64,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    let mut max_deviation = None;
    match mode {
        AblationMode::PermuteCheck => {
            let dev = permute_check(model, params, source, cfg, 100)?;
            max_deviation = Some(dev);
            rows.push(AblationRow {
                label: "max_coordinate_deviation".into(),
                pck: dev,
            });
        }
        AblationMode::RandomGraph => {
            let base = evaluate_split(
                model,
                params,
                source,
                SplitKind::Test,
                cfg,
                cfg.eval_episodes_per_category,
                EvalVariant::Plain,
            )?;
            let random = evaluate_split(
                model,
                params,
                source,
                SplitKind::Test,
                cfg,
                cfg.eval_episodes_per_category,
                EvalVariant::RandomGraph,
            )?;
            rows.push(AblationRow {
                label: "true_skeleton".into(),
                pck: base.overall_pck,
            });
            rows.push(AblationRow {
                label: "random_skeleton".into(),
                pck: random.overall_pck,
            });
            rows.push(AblationRow {
                label: "pck_drop".into(),
                pck: base.overall_pck - random.overall_pck,
            });
        }
        AblationMode::MaskSupport | AblationMode::MaskQuery => {
            for &f in fractions {
                let variant = match mode {
                    AblationMode::MaskSupport => EvalVariant::MaskSupport { fraction: f },
                    _ => EvalVariant::MaskQuery { fraction: f },
                };
                let result = evaluate_split(
                    model,
                    params,
                    source,
                    SplitKind::Test,
                    cfg,
                    cfg.eval_episodes_per_category,
                    variant,
                )?;
                rows.push(AblationRow {
                    label: format!("fraction_{f:.2}"),
                    pck: result.overall_pck,
                });
            }
        }
    }

    let path = cfg.out_dir.join(format!("ablation_{}.jsonl", mode.as_str()));
    let mut writer = MetricsWriter::open(&path, false)?;
    for row in &rows {
        writer.write(&MetricsRecord {
            epoch,
            split: format!("ablate_{}", mode.as_str()),
            category: row.label.clone(),
            pck: Some(row.pck),
            heatmap_loss: None,
            offset_loss: None,
            total_loss: None,
        })?;
    }
    Ok(AblationReport {
        rows,
        max_deviation,
    })
}
