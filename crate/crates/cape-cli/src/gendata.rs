//! Synthetic dataset dumps: PGM images plus an annotation file that the
//! real-data path can consume.

use std::path::PathBuf;

use anyhow::{Context, Result};
use cape_core::rng::stream;
use cape_core::synth::{dump_dataset, make_split};

use crate::config::RunConfig;

const TAG_SPLIT_BUILD: u64 = 0x5113;

pub fn generate(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, &[TAG_SPLIT_BUILD]);
    let splits = make_split(
        &mut rng,
        cfg.train_categories,
        cfg.val_categories,
        cfg.test_categories,
        &cfg.synth_settings(),
    )?;
    let path = dump_dataset(
        &splits,
        cfg.image_size,
        cfg.noise_std,
        cfg.instances_per_category,
        &cfg.out_dir,
        cfg.seed,
    )
    .context("dumping synthetic dataset")?;
    Ok(path)
}
