//! Similarity-aware proposal generator: a trainable bilinear inner product
//! between support keypoint features and query patches, with peak selection
//! for the initial coordinate estimates.

use rand::Rng;

use crate::autodiff::{Tensor, Var};
use crate::backbone::{FeatureMap, SupportFeatures};
use crate::error::{CoreError, Result};
use crate::params::{Net, ParamStore};
use crate::rng::normal;

/// Initial keypoint coordinates in (0,1)^2, x right, y down, pixel-center
/// convention.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposals {
    pub coords: Vec<(f64, f64)>,
}

/// W_sim starts as identity plus small noise so the untrained similarity is
/// a plain inner product.
pub fn init_params(store: &mut ParamStore, channels: usize, rng: &mut impl Rng) {
    let mut w = Tensor::eye(channels);
    for v in w.values_mut().iter_mut() {
        *v += 0.01 * normal(rng);
    }
    store.insert("sim.w", w);
}

/// M[i][p] = F_s[i] · W_sim · F_q[p]ᵀ / sqrt(C), shape (K, h*w).
pub fn similarity(
    net: &mut Net<'_>,
    support: &SupportFeatures,
    query: &FeatureMap,
) -> Result<Var> {
    let c = net.tape.shape(support.data)[1];
    if query.channels != c {
        return Err(CoreError::contract(format!(
            "support C={c} vs query C={}",
            query.channels
        )));
    }
    let w = net.param("sim.w")?;
    let proj = net.tape.matmul(support.data, w)?;
    let qt = net.tape.transpose(query.data)?;
    let logits = net.tape.matmul(proj, qt)?;
    net.tape.scale(logits, 1.0 / (c as f64).sqrt())
}

/// Per-keypoint argmax over its similarity map; ties break to the lowest
/// row-major index; coordinates are normalized pixel centers, so they are
/// strictly inside (0,1).
pub fn peak_select(maps: &Tensor, h: usize, w: usize) -> Proposals {
    let k = maps.rows();
    debug_assert_eq!(maps.cols(), h * w);
    let coords = (0..k)
        .map(|i| {
            let row = maps.row(i);
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            (
                (best % w) as f64 + 0.5,
                (best / w) as f64 + 0.5,
            )
        })
        .map(|(x, y)| (x / w as f64, y / h as f64))
        .collect();
    Proposals { coords }
}
