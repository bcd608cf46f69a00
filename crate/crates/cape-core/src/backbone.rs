//! Trainable convolutional feature extractor (total stride 8) plus
//! Gaussian-mask support-keypoint pooling and multi-shot averaging.

use std::sync::Arc;

use rand::Rng;

use crate::attention::xavier;
use crate::autodiff::{GatherPlan, Tensor, Var};
use crate::error::{CoreError, Result};
use crate::params::{Net, ParamStore};

/// Total downsampling factor of the extractor.
pub const STRIDE: usize = 8;

/// Query/support feature grid: row-major (h*w, channels) on the tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub data: Var,
}

/// Per-keypoint pooled features (K, channels); rows of invalid keypoints are
/// zero and stay excluded from attention and losses downstream.
#[derive(Debug, Clone)]
pub struct SupportFeatures {
    pub data: Var,
    pub valid: Vec<bool>,
}

struct Stage {
    plan: Arc<GatherPlan>,
}

/// Three stride-2 kernel-3 convolution blocks (ch -> C/4 -> C/2 -> C), each
/// followed by relu, realized as im2col gathers plus affine maps.
pub struct Backbone {
    stages: Vec<Stage>,
    pub in_channels: usize,
    pub channels: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Backbone {
    pub fn new(image_h: usize, image_w: usize, in_channels: usize, channels: usize) -> Result<Self> {
        if image_h % STRIDE != 0 || image_w % STRIDE != 0 {
            return Err(CoreError::contract(format!(
                "image {image_h}x{image_w} not divisible by total stride {STRIDE}"
            )));
        }
        if channels % 4 != 0 {
            return Err(CoreError::contract("channel count must be divisible by 4"));
        }
        let mut stages = Vec::new();
        let (mut h, mut w) = (image_h, image_w);
        for _ in 0..3 {
            let (plan, out_h, out_w) = im2col_plan(h, w);
            stages.push(Stage {
                plan: Arc::new(plan),
            });
            h = out_h;
            w = out_w;
        }
        Ok(Backbone {
            stages,
            in_channels,
            channels,
            out_h: h,
            out_w: w,
        })
    }

    fn channel_plan(&self) -> [usize; 4] {
        [
            self.in_channels,
            self.channels / 4,
            self.channels / 2,
            self.channels,
        ]
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let plan = self.channel_plan();
        for i in 0..3 {
            let fan_in = 9 * plan[i];
            store.insert(format!("backbone.conv{i}.w"), xavier(fan_in, plan[i + 1], rng));
            // small positive bias keeps relu pre-activations off the kink on
            // empty (exactly zero) image regions
            store.insert(
                format!("backbone.conv{i}.b"),
                Tensor::full(vec![1, plan[i + 1]], 0.02),
            );
        }
    }

    /// (H*W, ch) image tensor -> (h*w, C) feature map, h = H/8.
    pub fn extract(&self, net: &mut Net<'_>, image: &Tensor) -> Result<FeatureMap> {
        let expected = self.stages[0].plan.groups() * 4; // out cells * 4 = H*W
        if image.shape().len() != 2
            || image.shape()[0] != expected
            || image.shape()[1] != self.in_channels
        {
            return Err(CoreError::contract(format!(
                "image tensor {:?} does not match extractor ({} rows, {} channels)",
                image.shape(),
                expected,
                self.in_channels
            )));
        }
        let mut x = net.tape.constant(image.clone());
        for (i, stage) in self.stages.iter().enumerate() {
            let w = net.param(&format!("backbone.conv{i}.w"))?;
            let b = net.param(&format!("backbone.conv{i}.b"))?;
            let cols = net.tape.gather_rows(x, stage.plan.clone())?;
            let lin = net.tape.affine(cols, w, b)?;
            x = net.tape.relu(lin)?;
        }
        Ok(FeatureMap {
            h: self.out_h,
            w: self.out_w,
            channels: self.channels,
            data: x,
        })
    }
}

/// im2col slots for kernel 3, stride 2, padding 1 over an h x w grid.
fn im2col_plan(h: usize, w: usize) -> (GatherPlan, usize, usize) {
    let out_h = (h - 1) / 2 + 1;
    let out_w = (w - 1) / 2 + 1;
    let mut slots = Vec::with_capacity(out_h * out_w * 9);
    for oy in 0..out_h {
        for ox in 0..out_w {
            for ky in 0..3 {
                for kx in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    let ix = (ox * 2 + kx) as isize - 1;
                    slots.push(
                        (iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize)
                            .then(|| (iy as usize * w + ix as usize) as u32),
                    );
                }
            }
        }
    }
    (
        GatherPlan::new(9, slots).expect("im2col plan is well-formed"),
        out_h,
        out_w,
    )
}

/// Gaussian masks over the feature grid, one per keypoint, peaked at the
/// keypoint's grid position (pixel coordinates divided by the stride, cell
/// centers at integers). Invalid keypoints yield zero masks.
pub fn gaussian_masks(
    keypoints: &[(f64, f64)],
    valid: &[bool],
    h: usize,
    w: usize,
    variance: f64,
) -> Result<Tensor> {
    if variance <= 0.0 {
        return Err(CoreError::contract("mask variance must be positive"));
    }
    let mut values = vec![0.0; keypoints.len() * h * w];
    for (i, (&(px, py), &ok)) in keypoints.iter().zip(valid).enumerate() {
        if !ok {
            continue;
        }
        let gx = px / STRIDE as f64 - 0.5;
        let gy = py / STRIDE as f64 - 0.5;
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - gx).powi(2) + (y as f64 - gy).powi(2);
                values[i * h * w + y * w + x] = (-d2 / (2.0 * variance)).exp();
            }
        }
    }
    Tensor::new(vec![keypoints.len(), h * w], values)
}

/// Mass-normalized masked pooling: row i = sum_cells mask_i * fmap / mass_i.
pub fn pool_support_features(
    net: &mut Net<'_>,
    fmap: &FeatureMap,
    masks: &Tensor,
    valid: &[bool],
) -> Result<SupportFeatures> {
    let k = masks.rows();
    if masks.cols() != fmap.h * fmap.w || valid.len() != k {
        return Err(CoreError::contract(format!(
            "masks {:?} do not match {}x{} feature grid / {} validity flags",
            masks.shape(),
            fmap.h,
            fmap.w,
            valid.len()
        )));
    }
    let mut weights = masks.clone();
    let hw = fmap.h * fmap.w;
    for i in 0..k {
        let mass: f64 = weights.values()[i * hw..(i + 1) * hw].iter().sum();
        if valid[i] {
            if mass <= 0.0 {
                return Err(CoreError::DegenerateMask(i));
            }
            for v in weights.values_mut()[i * hw..(i + 1) * hw].iter_mut() {
                *v /= mass;
            }
        } else {
            weights.values_mut()[i * hw..(i + 1) * hw].fill(0.0);
        }
    }
    let w_const = net.tape.constant(weights);
    let data = net.tape.matmul(w_const, fmap.data)?;
    Ok(SupportFeatures {
        data,
        valid: valid.to_vec(),
    })
}

/// Arithmetic mean per (keypoint, channel) over the shots where the keypoint
/// is valid; validity is the union. Computed as base + mean(shot - base)
/// (shifted mean), so identical shots reproduce the single-shot value
/// bit-exactly at double precision.
pub fn average_shots(net: &mut Net<'_>, shots: &[SupportFeatures]) -> Result<SupportFeatures> {
    if shots.is_empty() {
        return Err(CoreError::contract("average_shots needs at least one shot"));
    }
    let k = shots[0].valid.len();
    let shape = net.tape.shape(shots[0].data).to_vec();
    for s in shots {
        if net.tape.shape(s.data) != shape.as_slice() || s.valid.len() != k {
            return Err(CoreError::contract("shots disagree on K or C"));
        }
    }
    let cols = shape[1];

    let counts: Vec<usize> = (0..k)
        .map(|i| shots.iter().filter(|s| s.valid[i]).count())
        .collect();
    let base_shot: Vec<Option<usize>> = (0..k)
        .map(|i| shots.iter().position(|s| s.valid[i]))
        .collect();

    let row_matrix = |f: &dyn Fn(usize) -> f64| -> Tensor {
        let mut t = Tensor::zeros(shape.clone());
        for row in 0..k {
            let v = f(row);
            if v != 0.0 {
                t.values_mut()[row * cols..(row + 1) * cols].fill(v);
            }
        }
        t
    };

    // base: per row, the first valid shot's features
    let mut base: Option<Var> = None;
    for (s_idx, shot) in shots.iter().enumerate() {
        let sel = row_matrix(&|row| if base_shot[row] == Some(s_idx) { 1.0 } else { 0.0 });
        if sel.values().iter().all(|&v| v == 0.0) {
            continue;
        }
        let picked = net.tape.mul_const(shot.data, sel)?;
        base = Some(match base {
            Some(acc) => net.tape.add(acc, picked)?,
            None => picked,
        });
    }
    let base = match base {
        Some(b) => b,
        // no keypoint is valid anywhere: all-zero features
        None => net.tape.constant(Tensor::zeros(shape.clone())),
    };

    let mut mean = base;
    for shot in shots {
        let w = row_matrix(&|row| {
            if shot.valid[row] && counts[row] > 0 {
                1.0 / counts[row] as f64
            } else {
                0.0
            }
        });
        if w.values().iter().all(|&v| v == 0.0) {
            continue;
        }
        let diff = net.tape.sub(shot.data, base)?;
        let scaled = net.tape.mul_const(diff, w)?;
        mean = net.tape.add(mean, scaled)?;
    }

    let union: Vec<bool> = (0..k).map(|i| counts[i] > 0).collect();
    let data = net.tape.mask_rows(mean, &union)?;
    Ok(SupportFeatures { data, valid: union })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn test_backbone() -> (Backbone, ParamStore) {
        let bb = Backbone::new(32, 32, 1, 16).unwrap();
        let mut store = ParamStore::new();
        bb.init_params(&mut store, &mut stream(3, &[0]));
        (bb, store)
    }

    #[test]
    fn output_shape_is_stride8() {
        let bb = Backbone::new(128, 128, 1, 64).unwrap();
        assert_eq!((bb.out_h, bb.out_w), (16, 16));
        assert!(Backbone::new(130, 128, 1, 64).is_err());
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_features() {
        let (bb, mut store) = test_backbone();
        for i in 0..3 {
            let b = store.get_mut(&format!("backbone.conv{i}.b"));
            *b = Tensor::zeros(b.shape().to_vec()).with_grad();
        }
        let mut net = Net::new(&store, false);
        let img = Tensor::zeros(vec![32 * 32, 1]);
        let fmap = bb.extract(&mut net, &img).unwrap();
        assert!(net.tape.value(fmap.data).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn translation_by_stride_shifts_features_one_cell() {
        let (bb, store) = test_backbone();
        let mut rng = stream(8, &[1]);
        let mut img = Tensor::zeros(vec![32 * 32, 1]);
        // content placed away from borders so both receptive fields are clean
        for y in 8..20 {
            for x in 8..20 {
                img.values_mut()[y * 32 + x] = rand::Rng::random_range(&mut rng, 0.0..1.0);
            }
        }
        let mut shifted = Tensor::zeros(vec![32 * 32, 1]);
        for y in 0..24 {
            for x in 0..24 {
                shifted.values_mut()[(y + STRIDE) * 32 + (x + STRIDE)] =
                    img.values()[y * 32 + x];
            }
        }
        let mut net = Net::new(&store, false);
        let f0 = bb.extract(&mut net, &img).unwrap();
        let f1 = bb.extract(&mut net, &shifted).unwrap();
        let (v0, v1) = (net.tape.value(f0.data), net.tape.value(f1.data));
        let (h, w, c) = (f0.h, f0.w, f0.channels);
        for y in 2..h {
            for x in 2..w {
                for ch in 0..c {
                    let a = v1[(y * w + x) * c + ch];
                    let b = v0[((y - 1) * w + (x - 1)) * c + ch];
                    assert!(
                        (a - b).abs() < 1e-9,
                        "cell ({y},{x}) ch {ch}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn gaussian_mask_closed_form() {
        // keypoint at the center of cell (1,1): pixel (12, 12) at stride 8
        let m = gaussian_masks(&[(12.0, 12.0)], &[true], 4, 4, 1.0).unwrap();
        assert!((m.at(0, 5) - 1.0).abs() < 1e-12);
        // neighbor at distance 1
        assert!((m.at(0, 6) - (-0.5f64).exp()).abs() < 1e-12);
        // radial symmetry
        assert!((m.at(0, 4) - m.at(0, 6)).abs() < 1e-15);
        assert!((m.at(0, 1) - m.at(0, 9)).abs() < 1e-15);
    }

    #[test]
    fn tiny_variance_approaches_one_hot() {
        let m = gaussian_masks(&[(12.0, 12.0)], &[true], 4, 4, 1e-4).unwrap();
        assert!((m.at(0, 5) - 1.0).abs() < 1e-12);
        let off: f64 = (0..16).filter(|&j| j != 5).map(|j| m.at(0, j)).sum();
        assert!(off < 1e-300);
    }

    #[test]
    fn invalid_keypoints_get_zero_masks() {
        let m = gaussian_masks(&[(12.0, 12.0)], &[false], 4, 4, 1.0).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.0));
    }

    fn fmap_from(net: &mut Net<'_>, rows: &[Vec<f64>], h: usize, w: usize) -> FeatureMap {
        let t = Tensor::from_rows(rows).unwrap();
        let c = t.cols();
        let data = net.tape.constant(t);
        FeatureMap {
            h,
            w,
            channels: c,
            data,
        }
    }

    #[test]
    fn one_hot_mask_pools_exact_row() {
        let store = ParamStore::new();
        let mut net = Net::new(&store, false);
        let fmap = fmap_from(
            &mut net,
            &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]],
            2,
            2,
        );
        let mut mask = Tensor::zeros(vec![1, 4]);
        mask.values_mut()[2] = 1.0;
        let pooled = pool_support_features(&mut net, &fmap, &mask, &[true]).unwrap();
        assert_eq!(net.tape.value(pooled.data), &[5.0, 6.0]);
    }

    #[test]
    fn uniform_mask_pools_mean_row() {
        let store = ParamStore::new();
        let mut net = Net::new(&store, false);
        let fmap = fmap_from(
            &mut net,
            &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0], vec![7.0, 8.0]],
            2,
            2,
        );
        let mask = Tensor::full(vec![1, 4], 0.7);
        let pooled = pool_support_features(&mut net, &fmap, &mask, &[true]).unwrap();
        let v = net.tape.value(pooled.data);
        assert!((v[0] - 4.0).abs() < 1e-12);
        assert!((v[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_mask_pools_weighted_mean() {
        let store = ParamStore::new();
        let mut net = Net::new(&store, false);
        let fmap = fmap_from(&mut net, &[vec![2.0, 0.0], vec![0.0, 4.0]], 1, 2);
        let mask = Tensor::new(vec![1, 2], vec![0.75, 0.25]).unwrap();
        let pooled = pool_support_features(&mut net, &fmap, &mask, &[true]).unwrap();
        let v = net.tape.value(pooled.data);
        assert!((v[0] - 1.5).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mask_rescaling_cancels() {
        let store = ParamStore::new();
        let mut net = Net::new(&store, false);
        let rows: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let fmap = fmap_from(&mut net, &rows, 2, 2);
        let mask = Tensor::new(vec![1, 4], vec![0.1, 0.4, 0.3, 0.2]).unwrap();
        let mut scaled = mask.clone();
        for v in scaled.values_mut() {
            *v *= 37.0;
        }
        let a = pool_support_features(&mut net, &fmap, &mask, &[true]).unwrap();
        let b = pool_support_features(&mut net, &fmap, &scaled, &[true]).unwrap();
        for (x, y) in net.tape.value(a.data).iter().zip(net.tape.value(b.data)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_mass_on_valid_keypoint_errors() {
        let store = ParamStore::new();
        let mut net = Net::new(&store, false);
        let fmap = fmap_from(&mut net, &[vec![1.0], vec![1.0]], 1, 2);
        let mask = Tensor::zeros(vec![1, 2]);
        let err = pool_support_features(&mut net, &fmap, &mask, &[true]).unwrap_err();
        assert!(matches!(err, CoreError::DegenerateMask(0)));
    }

    fn support(net: &mut Net<'_>, rows: &[Vec<f64>], valid: Vec<bool>) -> SupportFeatures {
        let t = Tensor::from_rows(rows).unwrap();
        let data = net.tape.constant(t);
        SupportFeatures { data, valid }
    }

    #[test]
    fn identical_shots_average_bit_exactly() {
        let store = ParamStore::new();
        let mut net = Net::new(&store, false);
        let rows = vec![vec![0.1, 0.7], vec![-0.3, 0.9]];
        let shots: Vec<SupportFeatures> = (0..5)
            .map(|_| support(&mut net, &rows, vec![true, true]))
            .collect();
        let avg = average_shots(&mut net, &shots).unwrap();
        let single = average_shots(&mut net, &shots[..1]).unwrap();
        assert_eq!(net.tape.value(avg.data), net.tape.value(single.data));
        assert_eq!(
            net.tape.value(avg.data),
            Tensor::from_rows(&rows).unwrap().values()
        );
    }

    #[test]
    fn two_shots_average_to_midpoint() {
        let store = ParamStore::new();
        let mut net = Net::new(&store, false);
        let a = support(&mut net, &[vec![1.0, 3.0]], vec![true]);
        let b = support(&mut net, &[vec![2.0, 5.0]], vec![true]);
        let avg = average_shots(&mut net, &[a, b]).unwrap();
        assert_eq!(net.tape.value(avg.data), &[1.5, 4.0]);
    }

    #[test]
    fn masked_mean_uses_only_valid_shots() {
        let store = ParamStore::new();
        let mut net = Net::new(&store, false);
        let shots = vec![
            support(&mut net, &[vec![2.0]], vec![true]),
            support(&mut net, &[vec![0.0]], vec![false]),
            support(&mut net, &[vec![4.0]], vec![true]),
            support(&mut net, &[vec![100.0]], vec![false]),
            support(&mut net, &[vec![0.0]], vec![false]),
        ];
        let avg = average_shots(&mut net, &shots).unwrap();
        assert_eq!(net.tape.value(avg.data), &[3.0]);
        assert_eq!(avg.valid, vec![true]);
    }

    #[test]
    fn empty_shot_list_errors() {
        let store = ParamStore::new();
        let mut net = Net::new(&store, false);
        assert!(average_shots(&mut net, &[]).is_err());
    }
}
