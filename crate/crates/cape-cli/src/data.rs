//! Episode sources: in-memory synthetic category splits or an annotation
//! file on disk. All sampling is derived from (seed, tags) streams so any
//! single episode can be reconstructed in isolation.

use std::path::PathBuf;

use anyhow::{Context, Result, anyhow, bail};
use cape_core::annot::{Dataset, Episode, SplitKind, images_root_for, parse_annotations_file, sample_episode};
use cape_core::rng::stream;
use cape_core::synth::{SplitSpecs, make_split, synthetic_episode};

use crate::config::RunConfig;

const TAG_SPLIT_BUILD: u64 = 0x5113;
const TAG_TRAIN: u64 = 0x7e41;
const TAG_EVAL: u64 = 0xe7a1;

fn split_tag(split: SplitKind) -> u64 {
    match split {
        SplitKind::Train => 1,
        SplitKind::Val => 2,
        SplitKind::Test => 3,
    }
}

pub enum EpisodeSource {
    Synthetic {
        splits: SplitSpecs,
        image_size: usize,
        noise_std: f64,
    },
    Annotated {
        dataset: Dataset,
        root: PathBuf,
        image_size: usize,
    },
}

impl EpisodeSource {
    pub fn from_config(cfg: &RunConfig) -> Result<EpisodeSource> {
        match &cfg.annotations {
            Some(path) => {
                let dataset = parse_annotations_file(path)
                    .with_context(|| format!("loading annotations {}", path.display()))?;
                Ok(EpisodeSource::Annotated {
                    dataset,
                    root: images_root_for(path),
                    image_size: cfg.image_size,
                })
            }
            None => {
                let mut rng = stream(cfg.seed, &[TAG_SPLIT_BUILD]);
                let splits = make_split(
                    &mut rng,
                    cfg.train_categories,
                    cfg.val_categories,
                    cfg.test_categories,
                    &cfg.synth_settings(),
                )?;
                Ok(EpisodeSource::Synthetic {
                    splits,
                    image_size: cfg.image_size,
                    noise_std: cfg.noise_std,
                })
            }
        }
    }

    pub fn category_names(&self, split: SplitKind) -> Vec<String> {
        match self {
            EpisodeSource::Synthetic { splits, .. } => {
                splits.of(split).iter().map(|s| s.name.clone()).collect()
            }
            EpisodeSource::Annotated { dataset, .. } => dataset
                .category_ids(split)
                .iter()
                .map(|id| dataset.categories[id].name.clone())
                .collect(),
        }
    }

    /// One training episode, addressed by (epoch, index).
    pub fn train_episode(
        &self,
        seed: u64,
        epoch: usize,
        index: usize,
        n_shots: usize,
    ) -> Result<Episode> {
        let mut rng = stream(seed, &[TAG_TRAIN, epoch as u64, index as u64]);
        match self {
            EpisodeSource::Synthetic {
                splits,
                image_size,
                noise_std,
            } => {
                let cat = rand::Rng::random_range(&mut rng, 0..splits.train.len());
                Ok(synthetic_episode(
                    &splits.train[cat],
                    *image_size,
                    *noise_std,
                    n_shots,
                    &mut rng,
                )?)
            }
            EpisodeSource::Annotated {
                dataset,
                root,
                image_size,
            } => {
                let ids = dataset.category_ids(SplitKind::Train);
                if ids.is_empty() {
                    bail!("annotation file has no train categories");
                }
                let cat = ids[rand::Rng::random_range(&mut rng, 0..ids.len())];
                Ok(sample_episode(dataset, root, cat, n_shots, *image_size, &mut rng)?)
            }
        }
    }

    /// Deterministic evaluation episode, addressed by (split, category
    /// index, episode index).
    pub fn eval_episode(
        &self,
        seed: u64,
        split: SplitKind,
        category: usize,
        index: usize,
        n_shots: usize,
    ) -> Result<Episode> {
        let mut rng = stream(
            seed,
            &[TAG_EVAL, split_tag(split), category as u64, index as u64],
        );
        match self {
            EpisodeSource::Synthetic {
                splits,
                image_size,
                noise_std,
            } => {
                let spec = splits
                    .of(split)
                    .get(category)
                    .ok_or_else(|| anyhow!("category index {category} out of range"))?;
                Ok(synthetic_episode(
                    spec,
                    *image_size,
                    *noise_std,
                    n_shots,
                    &mut rng,
                )?)
            }
            EpisodeSource::Annotated {
                dataset,
                root,
                image_size,
            } => {
                let ids = dataset.category_ids(split);
                let id = *ids
                    .get(category)
                    .ok_or_else(|| anyhow!("category index {category} out of range"))?;
                Ok(sample_episode(dataset, root, id, n_shots, *image_size, &mut rng)?)
            }
        }
    }
}
