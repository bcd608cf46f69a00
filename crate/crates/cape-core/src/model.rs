//! Full pipeline assembly: backbone -> encoder -> proposal generator ->
//! graph transformer decoder, plus the episode loss.

use crate::annot::Episode;
use crate::autodiff::Var;
use crate::backbone::{
    Backbone, STRIDE, SupportFeatures, average_shots, gaussian_masks, pool_support_features,
};
use crate::autodiff::Tensor;
use crate::decoder::{DecoderOutput, decode};
use crate::encoder::encode;
use crate::error::{CoreError, Result};
use crate::graph::{NormalizedAdjacency, skeleton_adjacency};
use crate::objectives::{LossReport, gt_heatmaps, heatmap_loss, offset_loss, pck_counts, total_loss};
use crate::params::{Net, ParamStore};
use crate::posenc::grid_encoding;
use crate::proposal::{Proposals, peak_select, similarity};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_layers: usize,
    pub in_channels: usize,
    pub mask_variance: f64,
    pub sigma_heatmap: f64,
    pub lambda_heatmap: f64,
    /// Force the normalized adjacency to zero (no-graph control model).
    pub disable_graph: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 128,
            channels: 64,
            heads: 4,
            encoder_blocks: 3,
            decoder_layers: 3,
            in_channels: 1,
            mask_variance: 1.0,
            sigma_heatmap: 2.0,
            lambda_heatmap: 2.0,
            disable_graph: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % STRIDE != 0 {
            return Err(CoreError::contract(format!(
                "image_size {} must be a positive multiple of {STRIDE}",
                self.image_size
            )));
        }
        if self.channels == 0 || self.channels % 4 != 0 || self.channels % self.heads != 0 {
            return Err(CoreError::contract(format!(
                "channels {} must be divisible by 4 and by heads {}",
                self.channels, self.heads
            )));
        }
        if self.heads == 0 || self.encoder_blocks == 0 || self.decoder_layers == 0 {
            return Err(CoreError::contract(
                "heads, encoder_blocks, decoder_layers must be positive",
            ));
        }
        if self.mask_variance <= 0.0 || self.sigma_heatmap <= 0.0 {
            return Err(CoreError::contract(
                "mask_variance and sigma_heatmap must be positive",
            ));
        }
        if self.lambda_heatmap < 0.0 {
            return Err(CoreError::contract("lambda_heatmap must be >= 0"));
        }
        Ok(())
    }

    /// Tiny configuration used by gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 64,
            channels: 16,
            ..Default::default()
        }
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    backbone: Backbone,
    grid_pe: Tensor,
}

pub struct ForwardPass {
    pub similarity: Var,
    pub proposals: Proposals,
    pub decoder: DecoderOutput,
    /// Union of per-shot support validity: the keypoints the decoder operates on.
    pub support_valid: Vec<bool>,
    /// support_valid AND query visibility: the keypoints losses/PCK score.
    pub loss_valid: Vec<bool>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let backbone = Backbone::new(cfg.image_size, cfg.image_size, cfg.in_channels, cfg.channels)?;
        let grid_pe = grid_encoding(backbone.out_h, backbone.out_w, cfg.channels);
        Ok(Model {
            cfg,
            backbone,
            grid_pe,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.backbone.out_h, self.backbone.out_w)
    }

    pub fn grid_pe(&self) -> &Tensor {
        &self.grid_pe
    }

    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.backbone
            .init_params(&mut store, &mut stream(seed, &[1]));
        crate::encoder::init_params(
            &mut store,
            self.cfg.encoder_blocks,
            self.cfg.channels,
            &mut stream(seed, &[2]),
        );
        crate::proposal::init_params(&mut store, self.cfg.channels, &mut stream(seed, &[3]));
        crate::decoder::init_params(
            &mut store,
            self.cfg.decoder_layers,
            self.cfg.channels,
            &mut stream(seed, &[4]),
        );
        store
    }

    fn check_episode(&self, episode: &Episode) -> Result<()> {
        let size = self.cfg.image_size;
        let ok = |img: &crate::annot::image::GrayImage| img.width == size && img.height == size;
        if !ok(&episode.query.image) || !episode.supports.iter().all(|s| ok(&s.image)) {
            return Err(CoreError::contract(format!(
                "episode images must be {size}x{size}"
            )));
        }
        if episode.supports.is_empty() {
            return Err(CoreError::contract("episode has no support shots"));
        }
        let k = episode.num_keypoints();
        if episode.query.keypoints.len() != k
            || episode.supports.iter().any(|s| s.keypoints.len() != k)
            || episode.validity.len() != k
        {
            return Err(CoreError::contract("keypoint counts disagree with skeleton"));
        }
        Ok(())
    }

    pub fn adjacency_for(&self, episode: &Episode) -> NormalizedAdjacency {
        if self.cfg.disable_graph {
            NormalizedAdjacency::zero(episode.num_keypoints())
        } else {
            skeleton_adjacency(&episode.skeleton)
        }
    }

    /// Run the full pipeline on one episode. An explicit adjacency override
    /// supports the random-graph ablation.
    pub fn forward_with_adjacency(
        &self,
        net: &mut Net<'_>,
        episode: &Episode,
        adjacency: &NormalizedAdjacency,
    ) -> Result<ForwardPass> {
        self.check_episode(episode)?;
        let (h, w) = self.grid();

        let query_map = self.backbone.extract(net, &episode.query.image.to_tensor())?;

        let mut shots: Vec<SupportFeatures> = Vec::with_capacity(episode.supports.len());
        for shot in &episode.supports {
            let fmap = self.backbone.extract(net, &shot.image.to_tensor())?;
            let points: Vec<(f64, f64)> = shot.keypoints.iter().map(|&(x, y, _)| (x, y)).collect();
            let valid: Vec<bool> = shot.keypoints.iter().map(|&(_, _, v)| v > 0).collect();
            let masks = gaussian_masks(&points, &valid, h, w, self.cfg.mask_variance)?;
            shots.push(pool_support_features(net, &fmap, &masks, &valid)?);
        }
        let pooled = average_shots(net, &shots)?;

        let (fs, fq) = encode(
            net,
            &pooled,
            &query_map,
            &self.grid_pe,
            self.cfg.encoder_blocks,
            self.cfg.heads,
        )?;

        let sim = similarity(net, &fs, &fq)?;
        let proposals = peak_select(&net.tape.tensor(sim), h, w);

        let decoder = decode(
            net,
            &fs,
            &fq,
            &proposals,
            adjacency,
            &self.grid_pe,
            self.cfg.decoder_layers,
            self.cfg.heads,
        )?;

        let support_valid = fs.valid.clone();
        let loss_valid: Vec<bool> = support_valid
            .iter()
            .zip(&episode.validity)
            .map(|(&s, &q)| s && q)
            .collect();
        Ok(ForwardPass {
            similarity: sim,
            proposals,
            decoder,
            support_valid,
            loss_valid,
        })
    }

    pub fn forward(&self, net: &mut Net<'_>, episode: &Episode) -> Result<ForwardPass> {
        let adj = self.adjacency_for(episode);
        self.forward_with_adjacency(net, episode, &adj)
    }

    /// Ground-truth query keypoints in normalized (0,1)^2 coordinates.
    pub fn normalized_gt(&self, episode: &Episode) -> Vec<(f64, f64)> {
        let size = self.cfg.image_size as f64;
        episode
            .query
            .keypoints
            .iter()
            .map(|&(x, y, _)| (x / size, y / size))
            .collect()
    }

    /// Build the training loss on the tape; returns the loss var and the
    /// plain-value report.
    pub fn episode_loss(
        &self,
        net: &mut Net<'_>,
        fwd: &ForwardPass,
        episode: &Episode,
    ) -> Result<(Var, LossReport)> {
        let (h, w) = self.grid();
        let gt_norm = self.normalized_gt(episode);
        let heat_gt = gt_heatmaps(&gt_norm, &fwd.loss_valid, h, w, self.cfg.sigma_heatmap)?;
        let heat = heatmap_loss(net, fwd.similarity, &heat_gt, &fwd.loss_valid)?;
        let offset = offset_loss(net, &fwd.decoder.coord_vars, &gt_norm, &fwd.loss_valid)?;
        let total = total_loss(net, heat, offset, self.cfg.lambda_heatmap)?;
        let report = LossReport {
            heatmap: net.tape.value(heat)[0],
            offset: net.tape.value(offset)[0],
            total: net.tape.value(total)[0],
            lambda: self.cfg.lambda_heatmap,
        };
        Ok((total, report))
    }

    /// PCK counts of a forward pass against the episode's ground truth.
    pub fn episode_pck_counts(
        &self,
        fwd: &ForwardPass,
        episode: &Episode,
        threshold: f64,
    ) -> Result<(usize, usize)> {
        let size = self.cfg.image_size as f64;
        let pred_px: Vec<(f64, f64)> = fwd
            .decoder
            .coords
            .iter()
            .map(|&(x, y)| (x * size, y * size))
            .collect();
        let gt_px: Vec<(f64, f64)> = episode
            .query
            .keypoints
            .iter()
            .map(|&(x, y, _)| (x, y))
            .collect();
        pck_counts(&pred_px, &gt_px, &fwd.loss_valid, episode.query_bbox, threshold)
    }
}
