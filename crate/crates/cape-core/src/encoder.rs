//! Matching encoder: three self-attention blocks over the concatenation of
//! support keypoint tokens and query patch tokens, split apart again at the
//! end.
//!
//! Patch tokens get 2D sine positional encoding added to queries/keys before
//! each block's attention; keypoint tokens carry none, which keeps the
//! encoder equivariant to keypoint order. Invalid keypoint tokens are masked
//! out of every softmax and their rows are re-zeroed after each sub-block.

use rand::Rng;

use crate::attention::{init_attention_params, multi_head_attention, xavier};
use crate::autodiff::Tensor;
use crate::backbone::{FeatureMap, SupportFeatures};
use crate::error::{CoreError, Result};
use crate::params::{Net, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn init_params(
    store: &mut ParamStore,
    blocks: usize,
    channels: usize,
    rng: &mut impl Rng,
) {
    for b in 0..blocks {
        let p = format!("enc.b{b}");
        init_attention_params(store, &format!("{p}.attn"), channels, rng);
        store.insert(format!("{p}.ffn.w1"), xavier(channels, channels * 4, rng));
        store.insert(format!("{p}.ffn.b1"), Tensor::zeros(vec![1, channels * 4]));
        store.insert(format!("{p}.ffn.w2"), xavier(channels * 4, channels, rng));
        store.insert(format!("{p}.ffn.b2"), Tensor::zeros(vec![1, channels]));
        for n in ["norm1", "norm2"] {
            store.insert(format!("{p}.{n}.g"), Tensor::full(vec![1, channels], 1.0));
            store.insert(format!("{p}.{n}.b"), Tensor::zeros(vec![1, channels]));
        }
    }
}

/// Fuse support keypoint features with query patch features.
///
/// `grid_pe` is the (h*w, C) positional encoding of the patch grid. Returns
/// the refined (F_s, F_q) pair.
pub fn encode(
    net: &mut Net<'_>,
    support: &SupportFeatures,
    query: &FeatureMap,
    grid_pe: &Tensor,
    blocks: usize,
    heads: usize,
) -> Result<(SupportFeatures, FeatureMap)> {
    let k = support.valid.len();
    let hw = query.h * query.w;
    let channels = query.channels;
    if net.tape.shape(support.data) != [k, channels] {
        return Err(CoreError::contract(format!(
            "support features {:?} do not match K={k}, C={channels}",
            net.tape.shape(support.data)
        )));
    }
    if grid_pe.shape() != [hw, channels] {
        return Err(CoreError::contract(format!(
            "grid encoding {:?} does not match {hw} patches, C={channels}",
            grid_pe.shape()
        )));
    }

    // token sequence: K keypoints then h*w patches
    let mut x = net.tape.concat_rows(&[support.data, query.data])?;
    let n = k + hw;

    // positional encoding rows: zeros for keypoint tokens
    let mut pe = Tensor::zeros(vec![n, channels]);
    pe.values_mut()[k * channels..].copy_from_slice(grid_pe.values());
    let pe = net.tape.constant(pe);

    // invalid keypoints are masked as keys; patch tokens never are
    let key_mask: Vec<bool> = (0..n)
        .map(|i| i < k && !support.valid[i])
        .collect();
    let keep_rows: Vec<bool> = (0..n).map(|i| i >= k || support.valid[i]).collect();

    for b in 0..blocks {
        let p = format!("enc.b{b}");
        let with_pe = net.tape.add(x, pe)?;
        let attn = multi_head_attention(
            net,
            &format!("{p}.attn"),
            with_pe,
            with_pe,
            x,
            &key_mask,
            heads,
            false,
        )?;
        let res = net.tape.add(x, attn.out)?;
        let g1 = net.param(&format!("{p}.norm1.g"))?;
        let b1 = net.param(&format!("{p}.norm1.b"))?;
        let normed = net.tape.layer_norm(res, g1, b1, LAYER_NORM_EPS)?;
        let normed = net.tape.mask_rows(normed, &keep_rows)?;

        let w1 = net.param(&format!("{p}.ffn.w1"))?;
        let fb1 = net.param(&format!("{p}.ffn.b1"))?;
        let w2 = net.param(&format!("{p}.ffn.w2"))?;
        let fb2 = net.param(&format!("{p}.ffn.b2"))?;
        let hidden = net.tape.affine(normed, w1, fb1)?;
        let hidden = net.tape.relu(hidden)?;
        let ffn = net.tape.affine(hidden, w2, fb2)?;
        let res2 = net.tape.add(normed, ffn)?;
        let g2 = net.param(&format!("{p}.norm2.g"))?;
        let b2 = net.param(&format!("{p}.norm2.b"))?;
        let normed2 = net.tape.layer_norm(res2, g2, b2, LAYER_NORM_EPS)?;
        x = net.tape.mask_rows(normed2, &keep_rows)?;
    }

    let (fs, fq) = net.tape.split_rows(x, k)?;
    Ok((
        SupportFeatures {
            data: fs,
            valid: support.valid.clone(),
        },
        FeatureMap {
            h: query.h,
            w: query.w,
            channels,
            data: fq,
        },
    ))
}
