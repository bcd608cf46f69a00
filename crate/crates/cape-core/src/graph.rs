//! Keypoint skeleton graphs and their symmetrically normalized adjacency.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{CoreError, Result};

/// A category's keypoint connectivity: `num_keypoints` nodes and an
/// unordered, deduplicated edge list with 0-based indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skeleton {
    num_keypoints: usize,
    edges: Vec<(usize, usize)>,
}

impl Skeleton {
    /// Validates: indices in range, no self-loops, no duplicate edges.
    /// Edges are stored as (min, max) in sorted order.
    pub fn new(num_keypoints: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if num_keypoints == 0 {
            return Err(CoreError::InvalidSkeleton("zero keypoints".into()));
        }
        let mut sorted: Vec<(usize, usize)> = Vec::new();
        let mut offending = Vec::new();
        for (a, b) in edges {
            if a == b || a >= num_keypoints || b >= num_keypoints {
                offending.push((a, b));
                continue;
            }
            sorted.push((a.min(b), a.max(b)));
        }
        if !offending.is_empty() {
            return Err(CoreError::InvalidSkeleton(format!(
                "edges out of range or self-loops for K={num_keypoints}: {offending:?}"
            )));
        }
        sorted.sort_unstable();
        let before = sorted.len();
        sorted.dedup();
        if sorted.len() != before {
            return Err(CoreError::InvalidSkeleton("duplicate edges".into()));
        }
        Ok(Skeleton {
            num_keypoints,
            edges: sorted,
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.num_keypoints
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges
            .iter()
            .filter(|(a, b)| *a == node || *b == node)
            .count()
    }

    pub fn is_connected(&self) -> bool {
        let k = self.num_keypoints;
        let mut seen = vec![false; k];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(n) = stack.pop() {
            for &(a, b) in &self.edges {
                let other = if a == n {
                    b
                } else if b == n {
                    a
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Relabel nodes: edge {i,j} becomes {perm[i], perm[j]}.
    pub fn permuted(&self, perm: &[usize]) -> Result<Skeleton> {
        check_permutation(perm, self.num_keypoints)?;
        Skeleton::new(
            self.num_keypoints,
            self.edges.iter().map(|&(a, b)| (perm[a], perm[b])),
        )
    }
}

/// Uniformly random simple graph with exactly `num_edges` edges.
pub fn random_skeleton(k: usize, num_edges: usize, rng: &mut impl Rng) -> Result<Skeleton> {
    if k == 0 {
        return Err(CoreError::contract("random_skeleton needs k >= 1"));
    }
    let max_edges = k * (k - 1) / 2;
    if num_edges > max_edges {
        return Err(CoreError::contract(format!(
            "num_edges {num_edges} exceeds K(K-1)/2 = {max_edges}"
        )));
    }
    let mut pairs = Vec::with_capacity(max_edges);
    for i in 0..k {
        for j in (i + 1)..k {
            pairs.push((i, j));
        }
    }
    let chosen = rand::seq::index::sample(rng, max_edges, num_edges);
    Skeleton::new(k, chosen.iter().map(|i| pairs[i]))
}

fn check_permutation(perm: &[usize], k: usize) -> Result<()> {
    if perm.len() != k {
        return Err(CoreError::contract(format!(
            "permutation of length {} for K={k}",
            perm.len()
        )));
    }
    let mut seen = vec![false; k];
    for &p in perm {
        if p >= k || seen[p] {
            return Err(CoreError::contract(format!("not a bijection: {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Binary adjacency matrix A with A[i][j] = 1 iff {i,j} is an edge.
pub fn build_adjacency(skeleton: &Skeleton) -> Tensor {
    let k = skeleton.num_keypoints();
    let mut a = Tensor::zeros(vec![k, k]);
    for &(i, j) in skeleton.edges() {
        a.values_mut()[i * k + j] = 1.0;
        a.values_mut()[j * k + i] = 1.0;
    }
    a
}

/// The symmetrically normalized adjacency D^{-1/2} A D^{-1/2}.
///
/// Rows and columns of isolated nodes are zero; no self-loops are added
/// (the self path is a separate term in the graph feed-forward).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: Tensor,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn k(&self) -> usize {
        self.matrix.rows()
    }

    /// Copy with rows/columns of dropped nodes zeroed (used to detach
    /// invalid keypoints from message passing).
    pub fn masked(&self, keep: &[bool]) -> NormalizedAdjacency {
        let k = self.k();
        assert_eq!(keep.len(), k);
        let mut m = self.matrix.clone();
        for i in 0..k {
            for j in 0..k {
                if !keep[i] || !keep[j] {
                    m.values_mut()[i * k + j] = 0.0;
                }
            }
        }
        NormalizedAdjacency { matrix: m }
    }

    /// All-zero matrix (the no-graph control).
    pub fn zero(k: usize) -> NormalizedAdjacency {
        NormalizedAdjacency {
            matrix: Tensor::zeros(vec![k, k]),
        }
    }
}

pub fn normalize_adjacency(a: &Tensor) -> Result<NormalizedAdjacency> {
    let shape = a.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(CoreError::contract(format!(
            "adjacency must be square, got {shape:?}"
        )));
    }
    let k = shape[0];
    for i in 0..k {
        if a.at(i, i) != 0.0 {
            return Err(CoreError::contract(format!("nonzero diagonal at {i}")));
        }
        for j in 0..k {
            let v = a.at(i, j);
            if v != 0.0 && v != 1.0 {
                return Err(CoreError::contract(format!(
                    "adjacency must be binary, got {v} at ({i},{j})"
                )));
            }
            if v != a.at(j, i) {
                return Err(CoreError::contract(format!("asymmetric at ({i},{j})")));
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..k)
        .map(|i| {
            let deg: f64 = (0..k).map(|j| a.at(i, j)).sum();
            if deg > 0.0 { 1.0 / deg.sqrt() } else { 0.0 }
        })
        .collect();
    let mut m = Tensor::zeros(vec![k, k]);
    for i in 0..k {
        for j in 0..k {
            m.values_mut()[i * k + j] = inv_sqrt_deg[i] * a.at(i, j) * inv_sqrt_deg[j];
        }
    }
    Ok(NormalizedAdjacency { matrix: m })
}

/// Build and normalize the adjacency of a skeleton in one step.
pub fn skeleton_adjacency(skeleton: &Skeleton) -> NormalizedAdjacency {
    normalize_adjacency(&build_adjacency(skeleton)).expect("built adjacency is always valid")
}

/// Largest |eigenvalue| estimate via power iteration (symmetric matrix).
pub fn spectral_radius(m: &Tensor, iterations: usize) -> f64 {
    let k = m.rows();
    let mut v: Vec<f64> = (0..k).map(|i| 1.0 + (i as f64) * 0.01).collect();
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let mut next = vec![0.0; k];
        for (i, n) in next.iter_mut().enumerate() {
            *n = (0..k).map(|j| m.at(i, j) * v[j]).sum();
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return 0.0;
        }
        lambda = norm;
        for n in next.iter_mut() {
            *n /= norm;
        }
        v = next;
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn path3() -> Skeleton {
        Skeleton::new(3, [(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn adjacency_single_edge() {
        let s = Skeleton::new(2, [(0, 1)]).unwrap();
        let a = build_adjacency(&s);
        assert_eq!(a.values(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn adjacency_empty_graph() {
        let s = Skeleton::new(3, []).unwrap();
        assert!(build_adjacency(&s).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjacency_path() {
        let a = build_adjacency(&path3());
        assert_eq!(
            a.values(),
            &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn invalid_edges_are_reported() {
        let err = Skeleton::new(3, [(0, 5)]).unwrap_err();
        assert!(err.to_string().contains("(0, 5)"));
        assert!(Skeleton::new(3, [(1, 1)]).is_err());
        assert!(Skeleton::new(3, [(0, 1), (1, 0)]).is_err());
    }

    #[test]
    fn normalized_single_edge_keeps_ones() {
        let adj = skeleton_adjacency(&Skeleton::new(2, [(0, 1)]).unwrap());
        assert_eq!(adj.matrix().values(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn normalized_path_matches_hand_value() {
        let adj = skeleton_adjacency(&path3());
        let v = 1.0 / 2.0_f64.sqrt();
        let expect = [0.0, v, 0.0, v, 0.0, v, 0.0, v, 0.0];
        for (got, want) in adj.matrix().values().iter().zip(expect) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
        assert!((adj.matrix().at(0, 1) - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn isolated_node_rows_are_zero() {
        let s = Skeleton::new(3, [(0, 1)]).unwrap();
        let adj = skeleton_adjacency(&s);
        for j in 0..3 {
            assert_eq!(adj.matrix().at(2, j), 0.0);
            assert_eq!(adj.matrix().at(j, 2), 0.0);
        }
    }

    #[test]
    fn non_binary_input_is_rejected() {
        let mut a = Tensor::zeros(vec![2, 2]);
        a.values_mut()[1] = 0.5;
        a.values_mut()[2] = 0.5;
        assert!(normalize_adjacency(&a).is_err());
    }

    #[test]
    fn identity_permutation_is_noop() {
        let s = path3();
        assert_eq!(s.permuted(&[0, 1, 2]).unwrap(), s);
    }

    #[test]
    fn reversal_keeps_edge_set() {
        let s = path3().permuted(&[2, 1, 0]).unwrap();
        assert_eq!(s.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn non_bijective_permutation_is_rejected() {
        assert!(path3().permuted(&[0, 0, 1]).is_err());
        assert!(path3().permuted(&[0, 1]).is_err());
    }

    #[test]
    fn normalization_commutes_with_permutation() {
        let mut rng = stream(5, &[1]);
        for trial in 0..20 {
            let k = 3 + (trial % 5);
            let edges = trial % (k * (k - 1) / 2 + 1);
            let s = random_skeleton(k, edges, &mut rng).unwrap();
            let mut perm: Vec<usize> = (0..k).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);

            let direct = skeleton_adjacency(&s.permuted(&perm).unwrap());
            let base = skeleton_adjacency(&s);
            // normalize(PᵀAP) = Pᵀ·normalize(A)·P, i.e. direct[perm[i]][perm[j]] = base[i][j]
            for i in 0..k {
                for j in 0..k {
                    assert!(
                        (direct.matrix().at(perm[i], perm[j]) - base.matrix().at(i, j)).abs()
                            < 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn random_skeleton_edge_counts() {
        let mut rng = stream(9, &[0]);
        assert!(random_skeleton(4, 0, &mut rng).unwrap().edges().is_empty());
        let complete = random_skeleton(4, 6, &mut rng).unwrap();
        assert_eq!(complete.edges().len(), 6);
        assert!(random_skeleton(4, 7, &mut rng).is_err());
    }

    #[test]
    fn random_skeleton_is_deterministic_per_seed() {
        let a = random_skeleton(8, 10, &mut stream(42, &[7])).unwrap();
        let b = random_skeleton(8, 10, &mut stream(42, &[7])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spectral_radius_is_bounded_by_one() {
        let mut rng = stream(13, &[0]);
        for trial in 0..100 {
            let k = 2 + trial % 7;
            let max_e = k * (k - 1) / 2;
            let s = random_skeleton(k, (trial * 3) % (max_e + 1), &mut rng).unwrap();
            let adj = skeleton_adjacency(&s);
            assert!(spectral_radius(adj.matrix(), 200) <= 1.0 + 1e-9);
        }
    }
}
