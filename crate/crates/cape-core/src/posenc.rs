//! 2D sine positional encodings: one for feature-grid cells, one for
//! continuous keypoint coordinate estimates (the localization embedding).

use crate::autodiff::Tensor;

const TEMPERATURE: f64 = 10000.0;

/// Angular frequency of embedding slot `i` within a half of width `half`.
pub(crate) fn slot_frequency(i: usize, half: usize) -> f64 {
    std::f64::consts::TAU / TEMPERATURE.powf(2.0 * (i / 2) as f64 / half as f64)
}

pub(crate) fn sine_embed_raw(points: &[(f64, f64)], dims: usize) -> Vec<f64> {
    assert!(dims % 4 == 0, "sine embedding needs dims divisible by 4");
    let half = dims / 2;
    let mut values = Vec::with_capacity(points.len() * dims);
    for &(x, y) in points {
        for &pos in &[y, x] {
            for i in 0..half {
                let v = pos * slot_frequency(i, half);
                values.push(if i % 2 == 0 { v.sin() } else { v.cos() });
            }
        }
    }
    values
}

/// Encode (x, y) points in (0,1)^2 into `dims` channels: the first half
/// encodes y, the second half x, each as interleaved sin/cos pairs over a
/// geometric frequency ladder. `dims` must be divisible by 4.
pub fn sine_embed(points: &[(f64, f64)], dims: usize) -> Tensor {
    Tensor::new(vec![points.len(), dims], sine_embed_raw(points, dims))
        .expect("sine embedding is finite")
}

/// Positional encoding of every cell of an h x w grid (row-major), using the
/// cell-center convention ((col+0.5)/w, (row+0.5)/h).
pub fn grid_encoding(h: usize, w: usize, dims: usize) -> Tensor {
    let mut points = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            points.push((
                (col as f64 + 0.5) / w as f64,
                (row as f64 + 0.5) / h as f64,
            ));
        }
    }
    sine_embed(&points, dims)
}
