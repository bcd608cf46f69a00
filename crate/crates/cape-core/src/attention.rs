//! Multi-head attention assembled from tape primitives, shared by the
//! matching encoder and the graph transformer decoder.
//!
//! Heads are realized as column-selection constants around full C x C
//! projections, so parameter shapes match the single-matrix convention while
//! every step stays a recorded primitive.

use std::sync::Arc;

use crate::autodiff::{Tensor, Var};
use crate::error::Result;
use crate::params::Net;

pub struct AttentionOutput {
    pub out: Var,
    /// Head-averaged attention probabilities (n_q, n_k), detached; present
    /// only when requested.
    pub mean_probs: Option<Tensor>,
}

/// Masked multi-head attention. `key_mask[j] == true` removes key j from
/// every query's softmax (exactly zero weight). Parameters live at
/// `{prefix}.{wq,bq,wk,bk,wv,bv,wo,bo}`.
///
/// Heads are carved out of the channel-transposed projections with row
/// slices, so every matmul keeps a long inner dimension.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    net: &mut Net<'_>,
    prefix: &str,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    key_mask: &[bool],
    heads: usize,
    collect_probs: bool,
) -> Result<AttentionOutput> {
    let channels = net.tape.shape(q_in)[1];
    let n_q = net.tape.shape(q_in)[0];
    let n_k = net.tape.shape(k_in)[0];
    debug_assert_eq!(key_mask.len(), n_k);
    let head_dim = channels / heads;

    let wq = net.param(&format!("{prefix}.wq"))?;
    let bq = net.param(&format!("{prefix}.bq"))?;
    let wk = net.param(&format!("{prefix}.wk"))?;
    let bk = net.param(&format!("{prefix}.bk"))?;
    let wv = net.param(&format!("{prefix}.wv"))?;
    let bv = net.param(&format!("{prefix}.bv"))?;
    let wo = net.param(&format!("{prefix}.wo"))?;
    let bo = net.param(&format!("{prefix}.bo"))?;

    let q = net.tape.affine(q_in, wq, bq)?;
    // folding the 1/sqrt(d) into q keeps the per-head score matrices free of
    // an extra scaling pass
    let q = net.tape.scale(q, 1.0 / (head_dim as f64).sqrt())?;
    let k = net.tape.affine(k_in, wk, bk)?;
    let v = net.tape.affine(v_in, wv, bv)?;
    let qt = net.tape.transpose(q)?;
    let kt = net.tape.transpose(k)?;
    let vt = net.tape.transpose(v)?;

    let mask: Arc<Vec<bool>> = Arc::new(
        (0..n_q)
            .flat_map(|_| key_mask.iter().copied())
            .collect::<Vec<bool>>(),
    );

    let mut head_outputs = Vec::with_capacity(heads);
    let mut prob_sums = collect_probs.then(|| vec![0.0; n_q * n_k]);
    for h in 0..heads {
        let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
        let qt_h = net.tape.slice_rows(qt, lo, hi)?;
        let kt_h = net.tape.slice_rows(kt, lo, hi)?;
        let vt_h = net.tape.slice_rows(vt, lo, hi)?;
        let q_h = net.tape.transpose(qt_h)?;
        let scores = net.tape.matmul(q_h, kt_h)?;
        let probs = net.tape.softmax_masked(scores, mask.clone())?;
        if let Some(sums) = prob_sums.as_mut() {
            for (m, p) in sums.iter_mut().zip(net.tape.value(probs)) {
                *m += p;
            }
        }
        // out_hᵀ = V_hᵀ · probsᵀ keeps the inner loop over keys
        let probs_t = net.tape.transpose(probs)?;
        head_outputs.push(net.tape.matmul(vt_h, probs_t)?);
    }
    let merged_t = net.tape.concat_rows(&head_outputs)?;
    let merged = net.tape.transpose(merged_t)?;
    let out = net.tape.affine(merged, wo, bo)?;
    let mean_probs = prob_sums.map(|mut sums| {
        for v in sums.iter_mut() {
            *v /= heads as f64;
        }
        Tensor::new(vec![n_q, n_k], sums).expect("probs are finite")
    });
    Ok(AttentionOutput { out, mean_probs })
}

/// Xavier-initialized q/k/v/o projection parameters under `prefix`.
pub fn init_attention_params(
    store: &mut crate::params::ParamStore,
    prefix: &str,
    channels: usize,
    rng: &mut impl rand::Rng,
) {
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert(
            format!("{prefix}.{name}"),
            xavier(channels, channels, rng),
        );
    }
    for name in ["bq", "bk", "bv", "bo"] {
        store.insert(format!("{prefix}.{name}"), Tensor::zeros(vec![1, channels]));
    }
}

/// Xavier/Glorot uniform (fan_in, fan_out) matrix.
pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl rand::Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect();
    Tensor::new(vec![fan_in, fan_out], values).expect("xavier values are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::rng::stream;

    fn store(channels: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_attention_params(&mut s, "attn", channels, &mut stream(seed, &[0]));
        s
    }

    #[test]
    fn masked_keys_get_zero_weight_everywhere() {
        let params = store(8, 1);
        let mut net = Net::new(&params, false);
        let x = net.tape.constant(attention_input(6, 8, 3));
        let mask = vec![false, true, false, true, false, false];
        let out = multi_head_attention(&mut net, "attn", x, x, x, &mask, 2, true).unwrap();
        let probs = out.mean_probs.unwrap();
        for q in 0..6 {
            assert_eq!(probs.at(q, 1), 0.0);
            assert_eq!(probs.at(q, 3), 0.0);
            let row_sum: f64 = (0..6).map(|j| probs.at(q, j)).sum();
            assert!((row_sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_attend_identically() {
        let params = store(8, 2);
        let mut net = Net::new(&params, false);
        let mut t = attention_input(4, 8, 7);
        let row: Vec<f64> = t.row(0).to_vec();
        t.values_mut()[8..16].copy_from_slice(&row);
        let x = net.tape.constant(t);
        let out = multi_head_attention(&mut net, "attn", x, x, x, &[false; 4], 2, false).unwrap();
        let v = net.tape.value(out.out);
        assert_eq!(&v[0..8], &v[8..16]);
    }

    fn attention_input(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, &[9]);
        let values = (0..rows * cols)
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect();
        Tensor::new(vec![rows, cols], values).unwrap()
    }
}
