//! Graph transformer decoder: per layer, masked self-attention over keypoint
//! tokens, cross-attention into query patches conditioned on the current
//! coordinate estimates, a graph-convolution feed-forward over the skeleton,
//! and an inverse-sigmoid coordinate update.
//!
//! Coordinates stay on the tape across layers: the localization embedding
//! and the inverse-sigmoid offset are differentiable functions of the
//! previous layer's estimate, and every layer's output feeds the offset
//! loss. Only the initial proposals (argmax peaks) enter as constants.

use rand::Rng;

use crate::attention::{init_attention_params, multi_head_attention, xavier};
use crate::autodiff::{Tensor, Var};
use crate::backbone::{FeatureMap, SupportFeatures};
use crate::encoder::LAYER_NORM_EPS;
use crate::error::{CoreError, Result};
use crate::graph::NormalizedAdjacency;
use crate::params::{Net, ParamStore};
use crate::proposal::Proposals;

/// Coordinate clamp for the inverse sigmoid.
pub const LOGIT_EPS: f64 = 1e-3;

pub struct DecoderOutput {
    /// Final coordinates, strictly inside (0,1)^2.
    pub coords: Vec<(f64, f64)>,
    /// Per-layer coordinate estimates on the tape, (K,2) each, layers 1..=L.
    pub coord_vars: Vec<Var>,
    /// Per-layer coordinate values.
    pub coord_history: Vec<Vec<(f64, f64)>>,
    /// Per-layer keypoint feature snapshots (K,C).
    pub feature_history: Vec<Tensor>,
    /// Per-layer head-averaged cross-attention maps (K, h*w).
    pub attn_maps: Vec<Tensor>,
    pub grid_h: usize,
    pub grid_w: usize,
}

pub fn init_params(store: &mut ParamStore, layers: usize, channels: usize, rng: &mut impl Rng) {
    for l in 0..layers {
        let p = format!("dec.l{l}");
        init_attention_params(store, &format!("{p}.self"), channels, rng);
        init_attention_params(store, &format!("{p}.cross"), channels, rng);
        store.insert(format!("{p}.fuse.wf"), xavier(channels, channels, rng));
        store.insert(format!("{p}.fuse.wp"), xavier(channels, channels, rng));
        store.insert(format!("{p}.fuse.b"), Tensor::zeros(vec![1, channels]));
        store.insert(format!("{p}.gcn.w_adj"), xavier(channels, channels, rng));
        store.insert(format!("{p}.gcn.w_self"), xavier(channels, channels, rng));
        store.insert(format!("{p}.gcn.w_lin"), xavier(channels, channels, rng));
        store.insert(format!("{p}.gcn.b_lin"), Tensor::zeros(vec![1, channels]));
        store.insert(format!("{p}.delta.w1"), xavier(channels, channels, rng));
        store.insert(format!("{p}.delta.b1"), Tensor::zeros(vec![1, channels]));
        // zero-initialized head: the first forward pass reproduces proposals
        store.insert(format!("{p}.delta.w2"), Tensor::zeros(vec![channels, 2]));
        store.insert(format!("{p}.delta.b2"), Tensor::zeros(vec![1, 2]));
        for n in ["norm1", "norm2", "norm3"] {
            store.insert(format!("{p}.{n}.g"), Tensor::full(vec![1, channels], 1.0));
            store.insert(format!("{p}.{n}.b"), Tensor::zeros(vec![1, channels]));
        }
    }
}

/// Masked keypoint self-attention + residual + post-norm.
pub fn self_attention_block(
    net: &mut Net<'_>,
    prefix: &str,
    features: Var,
    valid: &[bool],
    heads: usize,
) -> Result<Var> {
    let key_mask: Vec<bool> = valid.iter().map(|&v| !v).collect();
    let attn = multi_head_attention(
        net,
        &format!("{prefix}.self"),
        features,
        features,
        features,
        &key_mask,
        heads,
        false,
    )?;
    let res = net.tape.add(features, attn.out)?;
    let g = net.param(&format!("{prefix}.norm1.g"))?;
    let b = net.param(&format!("{prefix}.norm1.b"))?;
    let normed = net.tape.layer_norm(res, g, b, LAYER_NORM_EPS)?;
    net.tape.mask_rows(normed, valid)
}

/// Cross-attention from keypoint tokens (fused with the localization
/// embedding of the current coordinates) into query patches. Returns the
/// refined features and the head-averaged attention map.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_block(
    net: &mut Net<'_>,
    prefix: &str,
    features: Var,
    coords: Var,
    query: &FeatureMap,
    grid_pe: &Tensor,
    valid: &[bool],
    heads: usize,
) -> Result<(Var, Tensor)> {
    for pair in net.tape.value(coords).chunks(2) {
        let (x, y) = (pair[0], pair[1]);
        if !(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0) {
            return Err(CoreError::contract(format!(
                "coordinate ({x}, {y}) outside (0,1)^2"
            )));
        }
    }
    let channels = net.tape.shape(features)[1];
    let wf = net.param(&format!("{prefix}.fuse.wf"))?;
    let wp = net.param(&format!("{prefix}.fuse.wp"))?;
    let fb = net.param(&format!("{prefix}.fuse.b"))?;
    let loc = net.tape.sine_embed(coords, channels)?;
    let fused_f = net.tape.affine(features, wf, fb)?;
    let fused_p = net.tape.matmul(loc, wp)?;
    let queries = net.tape.add(fused_f, fused_p)?;

    let keys = net.tape.add_const(query.data, grid_pe.clone())?;
    let attn = multi_head_attention(
        net,
        &format!("{prefix}.cross"),
        queries,
        keys,
        query.data,
        &vec![false; query.h * query.w],
        heads,
        true,
    )?;
    let res = net.tape.add(features, attn.out)?;
    let g = net.param(&format!("{prefix}.norm2.g"))?;
    let b = net.param(&format!("{prefix}.norm2.b"))?;
    let normed = net.tape.layer_norm(res, g, b, LAYER_NORM_EPS)?;
    let out = net.tape.mask_rows(normed, valid)?;
    let probs = attn.mean_probs.expect("cross attention collects probabilities");
    Ok((out, probs))
}

/// Graph-convolution feed-forward, pre-norm form:
/// relu(Ã·F·W_adjᵀ + F·W_selfᵀ) through a per-node linear layer, plus the
/// residual. The caller applies the post-norm.
pub fn gcn_ffn(
    net: &mut Net<'_>,
    prefix: &str,
    features: Var,
    adjacency: &NormalizedAdjacency,
) -> Result<Var> {
    let k = net.tape.shape(features)[0];
    if adjacency.k() != k {
        return Err(CoreError::contract(format!(
            "adjacency is {}x{} but K={k}",
            adjacency.k(),
            adjacency.k()
        )));
    }
    let w_adj = net.param(&format!("{prefix}.gcn.w_adj"))?;
    let w_self = net.param(&format!("{prefix}.gcn.w_self"))?;
    let w_lin = net.param(&format!("{prefix}.gcn.w_lin"))?;
    let b_lin = net.param(&format!("{prefix}.gcn.b_lin"))?;

    let a = net.tape.constant(adjacency.matrix().clone());
    let mixed = net.tape.matmul(a, features)?;
    let neighbor_term = net.tape.matmul(mixed, w_adj)?;
    let self_term = net.tape.matmul(features, w_self)?;
    let pre = net.tape.add(neighbor_term, self_term)?;
    let act = net.tape.relu(pre)?;
    let lin = net.tape.affine(act, w_lin, b_lin)?;
    net.tape.add(features, lin)
}

/// Inverse-sigmoid coordinate refinement:
/// P' = sigmoid(logit(clamp(P)) + MLP(F)), invalid rows carried unchanged.
pub fn update_coords(
    net: &mut Net<'_>,
    prefix: &str,
    features: Var,
    coords: Var,
    valid: &[bool],
) -> Result<(Var, Vec<(f64, f64)>)> {
    let w1 = net.param(&format!("{prefix}.delta.w1"))?;
    let b1 = net.param(&format!("{prefix}.delta.b1"))?;
    let w2 = net.param(&format!("{prefix}.delta.w2"))?;
    let b2 = net.param(&format!("{prefix}.delta.b2"))?;
    let hidden = net.tape.affine(features, w1, b1)?;
    let hidden = net.tape.relu(hidden)?;
    let delta = net.tape.affine(hidden, w2, b2)?;
    let delta = net.tape.mask_rows(delta, valid)?;

    let prev_logits = net.tape.logit(coords, LOGIT_EPS)?;
    let pre = net.tape.add(prev_logits, delta)?;
    let next = net.tape.sigmoid(pre)?;

    let values: Vec<(f64, f64)> = net
        .tape
        .value(next)
        .chunks(2)
        .map(|p| (p[0], p[1]))
        .collect();
    Ok((next, values))
}

/// Run the full decoder stack.
#[allow(clippy::too_many_arguments)]
pub fn decode(
    net: &mut Net<'_>,
    support: &SupportFeatures,
    query: &FeatureMap,
    proposals: &Proposals,
    adjacency: &NormalizedAdjacency,
    grid_pe: &Tensor,
    layers: usize,
    heads: usize,
) -> Result<DecoderOutput> {
    let valid = &support.valid;
    if proposals.coords.len() != valid.len() {
        return Err(CoreError::contract(format!(
            "{} proposals for {} keypoints",
            proposals.coords.len(),
            valid.len()
        )));
    }
    // invalid keypoints appear as zero rows/columns of the adjacency
    let adj = adjacency.masked(valid);

    let mut features = support.data;
    let proposal_tensor = Tensor::new(
        vec![proposals.coords.len(), 2],
        proposals.coords.iter().flat_map(|&(x, y)| [x, y]).collect(),
    )?;
    let mut coords = net.tape.constant(proposal_tensor);
    let mut out = DecoderOutput {
        coords: proposals.coords.clone(),
        coord_vars: Vec::with_capacity(layers),
        coord_history: Vec::with_capacity(layers),
        feature_history: Vec::with_capacity(layers),
        attn_maps: Vec::with_capacity(layers),
        grid_h: query.h,
        grid_w: query.w,
    };

    for l in 0..layers {
        let p = format!("dec.l{l}");
        let f1 = self_attention_block(net, &p, features, valid, heads)?;
        let (f2, amap) =
            cross_attention_block(net, &p, f1, coords, query, grid_pe, valid, heads)?;
        let f3 = gcn_ffn(net, &p, f2, &adj)?;
        let g = net.param(&format!("{p}.norm3.g"))?;
        let b = net.param(&format!("{p}.norm3.b"))?;
        let normed = net.tape.layer_norm(f3, g, b, LAYER_NORM_EPS)?;
        features = net.tape.mask_rows(normed, valid)?;

        let (coord_var, values) = update_coords(net, &p, features, coords, valid)?;
        coords = coord_var;
        out.coords = values.clone();
        out.coord_vars.push(coord_var);
        out.coord_history.push(values);
        out.feature_history.push(net.tape.tensor(features));
        out.attn_maps.push(amap);
    }
    Ok(out)
}

/// Stored cross-attention maps of one layer, reshaped to K grids of h x w.
pub fn export_attention(output: &DecoderOutput, layer: usize) -> Result<Vec<Tensor>> {
    let map = output.attn_maps.get(layer).ok_or_else(|| {
        CoreError::contract(format!(
            "layer {layer} out of range: {} layers processed",
            output.attn_maps.len()
        ))
    })?;
    let (h, w) = (output.grid_h, output.grid_w);
    (0..map.rows())
        .map(|i| Tensor::new(vec![h, w], map.row(i).to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Skeleton, skeleton_adjacency};
    use crate::posenc::grid_encoding;
    use crate::rng::stream;

    fn test_store(layers: usize, channels: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        init_params(&mut store, layers, channels, &mut stream(seed, &[0]));
        store
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, &[5]);
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols)
                .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_keypoint_self_attention_matches_hand_path() {
        let store = test_store(1, 8, 1);
        let mut net = Net::new(&store, false);
        let f = net.tape.constant(rand_tensor(1, 8, 2));
        let out = self_attention_block(&mut net, "dec.l0", f, &[true], 4).unwrap();

        // softmax over a single token is weight 1 on itself: the block is
        // norm(x + Wo(Wv x + bv) + bo)
        let mut hand = Net::new(&store, false);
        let fx = hand.tape.constant(rand_tensor(1, 8, 2));
        let wv = hand.param("dec.l0.self.wv").unwrap();
        let bv = hand.param("dec.l0.self.bv").unwrap();
        let wo = hand.param("dec.l0.self.wo").unwrap();
        let bo = hand.param("dec.l0.self.bo").unwrap();
        let v = hand.tape.affine(fx, wv, bv).unwrap();
        let o = hand.tape.affine(v, wo, bo).unwrap();
        let res = hand.tape.add(fx, o).unwrap();
        let g = hand.param("dec.l0.norm1.g").unwrap();
        let b = hand.param("dec.l0.norm1.b").unwrap();
        let expect = hand.tape.layer_norm(res, g, b, LAYER_NORM_EPS).unwrap();

        for (a, e) in net.tape.value(out).iter().zip(hand.tape.value(expect)) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn cross_attention_rows_sum_to_one() {
        let store = test_store(1, 8, 3);
        let mut net = Net::new(&store, false);
        let f = net.tape.constant(rand_tensor(3, 8, 4));
        let query = FeatureMap {
            h: 2,
            w: 2,
            channels: 8,
            data: net.tape.constant(rand_tensor(4, 8, 5)),
        };
        let pe = grid_encoding(2, 2, 8);
        let coords = net.tape.constant(
            Tensor::new(vec![3, 2], vec![0.3, 0.4, 0.6, 0.6, 0.2, 0.9]).unwrap(),
        );
        let (_, amap) =
            cross_attention_block(&mut net, "dec.l0", f, coords, &query, &pe, &[true; 3], 4)
                .unwrap();
        for i in 0..3 {
            let s: f64 = amap.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn uniform_query_and_zero_pe_ignore_coordinates() {
        let store = test_store(1, 8, 6);
        let mut net = Net::new(&store, false);
        let f = rand_tensor(2, 8, 7);
        let fq = Tensor::from_rows(&vec![vec![0.37; 8]; 4]).unwrap();
        let zero_pe = Tensor::zeros(vec![4, 8]);

        let fv = net.tape.constant(f.clone());
        let query = FeatureMap {
            h: 2,
            w: 2,
            channels: 8,
            data: net.tape.constant(fq.clone()),
        };
        let c1 = net
            .tape
            .constant(Tensor::new(vec![2, 2], vec![0.2, 0.2, 0.3, 0.3]).unwrap());
        let (o1, m1) = cross_attention_block(
            &mut net,
            "dec.l0",
            fv,
            c1,
            &query,
            &zero_pe,
            &[true; 2],
            4,
        )
        .unwrap();
        let c2 = net
            .tape
            .constant(Tensor::new(vec![2, 2], vec![0.8, 0.9, 0.6, 0.1]).unwrap());
        let (o2, m2) = cross_attention_block(
            &mut net,
            "dec.l0",
            fv,
            c2,
            &query,
            &zero_pe,
            &[true; 2],
            4,
        )
        .unwrap();
        assert_eq!(net.tape.value(o1), net.tape.value(o2));
        assert_eq!(m1.values(), m2.values());
        assert!(m1.values().iter().all(|&p| (p - 0.25).abs() < 1e-12));
    }

    #[test]
    fn coordinates_outside_unit_square_are_rejected() {
        let store = test_store(1, 8, 6);
        let mut net = Net::new(&store, false);
        let f = net.tape.constant(rand_tensor(1, 8, 7));
        let query = FeatureMap {
            h: 2,
            w: 2,
            channels: 8,
            data: net.tape.constant(rand_tensor(4, 8, 8)),
        };
        let pe = grid_encoding(2, 2, 8);
        let bad = net
            .tape
            .constant(Tensor::new(vec![1, 2], vec![1.2, 0.5]).unwrap());
        let err = cross_attention_block(&mut net, "dec.l0", f, bad, &query, &pe, &[true], 4)
            .unwrap_err();
        assert!(matches!(err, CoreError::Contract(_)));
    }

    fn store_with_gcn_identity(channels: usize) -> ParamStore {
        let mut store = test_store(1, channels, 10);
        *store.get_mut("dec.l0.gcn.w_adj") = Tensor::eye(channels).with_grad();
        *store.get_mut("dec.l0.gcn.w_self") = Tensor::eye(channels).with_grad();
        *store.get_mut("dec.l0.gcn.w_lin") = Tensor::eye(channels).with_grad();
        store
    }

    #[test]
    fn gcn_with_zero_weights_is_identity() {
        let mut store = test_store(1, 8, 11);
        *store.get_mut("dec.l0.gcn.w_adj") = Tensor::zeros(vec![8, 8]).with_grad();
        *store.get_mut("dec.l0.gcn.w_self") = Tensor::zeros(vec![8, 8]).with_grad();
        let mut net = Net::new(&store, false);
        let f = rand_tensor(3, 8, 12);
        let fv = net.tape.constant(f.clone());
        let adj = skeleton_adjacency(&Skeleton::new(3, [(0, 1), (1, 2)]).unwrap());
        let out = gcn_ffn(&mut net, "dec.l0", fv, &adj).unwrap();
        // relu(0)=0 through w_lin leaves only b_lin = 0, so output = input
        assert_eq!(net.tape.value(out), f.values());
    }

    #[test]
    fn gcn_without_edges_uses_only_self_path() {
        let store = store_with_gcn_identity(8);
        let mut net = Net::new(&store, false);
        let f = rand_tensor(3, 8, 13);
        let fv = net.tape.constant(f.clone());
        let adj = skeleton_adjacency(&Skeleton::new(3, []).unwrap());
        let out = gcn_ffn(&mut net, "dec.l0", fv, &adj).unwrap();
        for (row, frow) in net.tape.value(out).chunks(8).zip(f.values().chunks(8)) {
            for ((o, &x), _) in row.iter().zip(frow).zip(0..8) {
                let expect = x + x.max(0.0);
                assert!((o - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gcn_two_node_worked_example() {
        let store = store_with_gcn_identity(4);
        let mut net = Net::new(&store, false);
        let u = [0.5, -1.0, 2.0, 0.25];
        let v = [1.5, 0.5, -0.75, -2.0];
        let f = Tensor::from_rows(&[u.to_vec(), v.to_vec()]).unwrap();
        let fv = net.tape.constant(f);
        let adj = skeleton_adjacency(&Skeleton::new(2, [(0, 1)]).unwrap());
        let out = gcn_ffn(&mut net, "dec.l0", fv, &adj).unwrap();
        let got = net.tape.value(out);
        for c in 0..4 {
            let row0 = u[c] + (v[c] + u[c]).max(0.0);
            let row1 = v[c] + (u[c] + v[c]).max(0.0);
            assert!((got[c] - row0).abs() < 1e-12);
            assert!((got[4 + c] - row1).abs() < 1e-12);
        }
    }

    #[test]
    fn disconnected_node_sees_only_itself() {
        let store = store_with_gcn_identity(8);
        let adj = skeleton_adjacency(&Skeleton::new(3, [(0, 1)]).unwrap());

        let mut net = Net::new(&store, false);
        let f = rand_tensor(3, 8, 14);
        let fv = net.tape.constant(f.clone());
        let out = gcn_ffn(&mut net, "dec.l0", fv, &adj).unwrap();

        // run node 2 alone through a 1-node graph
        let mut solo = Net::new(&store, false);
        let alone = Tensor::new(vec![1, 8], f.row(2).to_vec()).unwrap();
        let av = solo.tape.constant(alone);
        let adj1 = skeleton_adjacency(&Skeleton::new(1, []).unwrap());
        let solo_out = gcn_ffn(&mut solo, "dec.l0", av, &adj1).unwrap();

        assert_eq!(&net.tape.value(out)[16..24], solo.tape.value(solo_out));
    }

    #[test]
    fn zero_delta_keeps_coordinates() {
        // delta head is zero-initialized, so the update must reproduce the
        // inputs up to sigmoid/logit rounding
        let store = test_store(1, 8, 15);
        let mut net = Net::new(&store, false);
        let f = net.tape.constant(rand_tensor(2, 8, 16));
        let coords = vec![(0.34375, 0.21875), (0.5, 0.5)];
        let cv = net.tape.constant(
            Tensor::new(vec![2, 2], vec![0.34375, 0.21875, 0.5, 0.5]).unwrap(),
        );
        let (_, next) = update_coords(&mut net, "dec.l0", f, cv, &[true; 2]).unwrap();
        for (a, b) in next.iter().zip(&coords) {
            assert!((a.0 - b.0).abs() < 1e-15);
            assert!((a.1 - b.1).abs() < 1e-15);
        }
        assert_eq!(next[1], (0.5, 0.5));
    }

    #[test]
    fn ln3_delta_moves_half_to_three_quarters() {
        let mut store = test_store(1, 4, 17);
        // craft the delta head to output (ln 3, 0) for every keypoint
        *store.get_mut("dec.l0.delta.w1") = Tensor::zeros(vec![4, 4]).with_grad();
        *store.get_mut("dec.l0.delta.b1") = Tensor::zeros(vec![1, 4]).with_grad();
        *store.get_mut("dec.l0.delta.w2") = Tensor::zeros(vec![4, 2]).with_grad();
        *store.get_mut("dec.l0.delta.b2") =
            Tensor::new(vec![1, 2], vec![3f64.ln(), 0.0]).unwrap().with_grad();
        let mut net = Net::new(&store, false);
        let f = net.tape.constant(rand_tensor(1, 4, 18));
        let cv = net
            .tape
            .constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let (_, next) = update_coords(&mut net, "dec.l0", f, cv, &[true]).unwrap();
        assert!((next[0].0 - 0.75).abs() < 1e-12);
        assert!((next[0].1 - 0.5).abs() < 1e-15);
    }

    #[test]
    fn invalid_rows_carry_through_unchanged() {
        let store = test_store(1, 8, 19);
        let mut store = store;
        // non-zero delta head so valid rows do move
        *store.get_mut("dec.l0.delta.w2") = xavier(8, 2, &mut stream(19, &[7])).with_grad();
        let mut net = Net::new(&store, false);
        let f = net.tape.constant(rand_tensor(2, 8, 20));
        let coords = vec![(0.3, 0.3), (0.7, 0.2)];
        let cv = net
            .tape
            .constant(Tensor::new(vec![2, 2], vec![0.3, 0.3, 0.7, 0.2]).unwrap());
        let (_, next) = update_coords(&mut net, "dec.l0", f, cv, &[false, true]).unwrap();
        assert!((next[0].0 - 0.3).abs() < 1e-15);
        assert!((next[0].1 - 0.3).abs() < 1e-15);
        assert!(next[1] != coords[1]);
    }

    fn full_setup(
        k: usize,
        channels: usize,
        seed: u64,
    ) -> (ParamStore, Tensor, Tensor, Skeleton, Proposals) {
        let mut store = test_store(3, channels, seed);
        // non-trivial delta heads
        for l in 0..3 {
            *store.get_mut(&format!("dec.l{l}.delta.w2")) =
                xavier(channels, 2, &mut stream(seed, &[l as u64 + 40])).with_grad();
        }
        let fs = rand_tensor(k, channels, seed + 1);
        let fq = rand_tensor(16, channels, seed + 2);
        let mut rng = stream(seed, &[3]);
        let skel = crate::graph::random_skeleton(k, k.min(k * (k - 1) / 2), &mut rng).unwrap();
        let mut prng = stream(seed, &[4]);
        let proposals = Proposals {
            coords: (0..k)
                .map(|_| {
                    (
                        rand::Rng::random_range(&mut prng, 0.05..0.95),
                        rand::Rng::random_range(&mut prng, 0.05..0.95),
                    )
                })
                .collect(),
        };
        (store, fs, fq, skel, proposals)
    }

    fn run_decode(
        store: &ParamStore,
        fs: &Tensor,
        fq: &Tensor,
        skel: &Skeleton,
        proposals: &Proposals,
        valid: &[bool],
        layers: usize,
    ) -> DecoderOutput {
        let mut net = Net::new(store, false);
        let support = SupportFeatures {
            data: net.tape.constant(fs.clone()),
            valid: valid.to_vec(),
        };
        let query = FeatureMap {
            h: 4,
            w: 4,
            channels: fs.cols(),
            data: net.tape.constant(fq.clone()),
        };
        let pe = grid_encoding(4, 4, fs.cols());
        let adj = skeleton_adjacency(skel);
        decode(&mut net, &support, &query, proposals, &adj, &pe, layers, 4).unwrap()
    }

    #[test]
    fn zero_layers_returns_proposals() {
        let (store, fs, fq, skel, proposals) = full_setup(5, 8, 30);
        let out = run_decode(&store, &fs, &fq, &skel, &proposals, &[true; 5], 0);
        assert_eq!(out.coords, proposals.coords);
        assert!(out.coord_history.is_empty());
    }

    #[test]
    fn history_has_one_entry_per_layer() {
        let (store, fs, fq, skel, proposals) = full_setup(5, 8, 31);
        let out = run_decode(&store, &fs, &fq, &skel, &proposals, &[true; 5], 3);
        assert_eq!(out.coord_history.len(), 3);
        assert_eq!(out.feature_history.len(), 3);
        assert_eq!(out.attn_maps.len(), 3);
        for coords in &out.coord_history {
            for &(x, y) in coords {
                assert!(x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0);
            }
        }
    }

    #[test]
    fn joint_permutation_equivariance() {
        let k = 6;
        let (store, fs, fq, skel, proposals) = full_setup(k, 8, 32);
        let valid = [true, true, false, true, true, true];
        let base = run_decode(&store, &fs, &fq, &skel, &proposals, &valid, 3);

        let mut rng = stream(32, &[9]);
        let mut perm: Vec<usize> = (0..k).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);

        let mut fs_p = Tensor::zeros(vec![k, 8]);
        let mut valid_p = vec![false; k];
        let mut coords_p = vec![(0.0, 0.0); k];
        for (i, &pi) in perm.iter().enumerate() {
            fs_p.values_mut()[pi * 8..(pi + 1) * 8].copy_from_slice(fs.row(i));
            valid_p[pi] = valid[i];
            coords_p[pi] = proposals.coords[i];
        }
        let skel_p = skel.permuted(&perm).unwrap();
        let perm_out = run_decode(
            &store,
            &fs_p,
            &fq,
            &skel_p,
            &Proposals { coords: coords_p },
            &valid_p,
            3,
        );

        let mut max_dev: f64 = 0.0;
        for (i, &pi) in perm.iter().enumerate() {
            let a = base.coords[i];
            let b = perm_out.coords[pi];
            max_dev = max_dev.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
        }
        assert!(max_dev < 1e-9, "max deviation {max_dev}");
    }

    #[test]
    fn exported_attention_grids_are_row_normalized() {
        let (store, fs, fq, skel, proposals) = full_setup(4, 8, 33);
        let out = run_decode(&store, &fs, &fq, &skel, &proposals, &[true; 4], 3);
        let grids = export_attention(&out, 1).unwrap();
        assert_eq!(grids.len(), 4);
        for g in &grids {
            assert_eq!(g.shape(), &[4, 4]);
            let s: f64 = g.values().iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(export_attention(&out, 3).is_err());
    }

    #[test]
    fn decode_is_deterministic() {
        let (store, fs, fq, skel, proposals) = full_setup(4, 8, 34);
        let a = run_decode(&store, &fs, &fq, &skel, &proposals, &[true; 4], 3);
        let b = run_decode(&store, &fs, &fq, &skel, &proposals, &[true; 4], 3);
        assert_eq!(a.coords, b.coords);
        for (x, y) in a.attn_maps.iter().zip(&b.attn_maps) {
            assert_eq!(x.values(), y.values());
        }
    }
}
