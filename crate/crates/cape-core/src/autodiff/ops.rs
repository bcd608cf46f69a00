//! Forward and backward rules for every differentiable primitive.
//!
//! Each op validates input shapes (naming itself in the error), computes the
//! forward value, and provides the exact vector-Jacobian product used by
//! [`crate::autodiff::Tape::backward`].

use std::sync::Arc;

use crate::error::{CoreError, Result};

/// Row-gather plan: each output row is the concatenation of `group_size`
/// input rows (a `None` slot contributes a zero row). This is the im2col
/// step of the convolutional feature extractor.
#[derive(Debug)]
pub struct GatherPlan {
    pub group_size: usize,
    pub slots: Vec<Option<u32>>,
}

impl GatherPlan {
    pub fn new(group_size: usize, slots: Vec<Option<u32>>) -> Result<Self> {
        if group_size == 0 || slots.is_empty() || slots.len() % group_size != 0 {
            return Err(CoreError::contract(
                "gather plan slots must be a positive multiple of group_size",
            ));
        }
        Ok(GatherPlan { group_size, slots })
    }

    pub fn groups(&self) -> usize {
        self.slots.len() / self.group_size
    }
}

#[derive(Debug, Clone)]
pub enum Op {
    MatMul,
    Add,
    Mul,
    /// (x, w, b): x·w + b with b broadcast over rows.
    Affine,
    Relu,
    Sigmoid,
    /// Row-wise softmax assigning exactly zero to masked entries.
    SoftmaxMasked { mask: Arc<Vec<bool>> },
    /// (x, gain, bias): per-row normalization over columns.
    LayerNorm { eps: f64 },
    ConcatRows,
    SplitRows { start: usize, end: usize },
    MeanRows,
    Transpose,
    GatherRows { plan: Arc<GatherPlan> },
    SumAll,
    /// Inverse sigmoid with clamp into [eps, 1-eps]; zero gradient outside.
    Logit { eps: f64 },
    /// Sine positional embedding of (x,y) coordinate rows into `dims`
    /// channels (the decoder's localization embedding).
    SineEmbed { dims: usize },
}

pub(crate) struct ValView<'a> {
    pub shape: &'a [usize],
    pub values: &'a [f64],
}

impl ValView<'_> {
    fn rows(&self) -> usize {
        self.shape[0]
    }
    fn cols(&self) -> usize {
        self.shape[1]
    }
}

fn shape_err(primitive: &'static str, detail: String) -> CoreError {
    CoreError::ShapeMismatch { primitive, detail }
}

fn want_rank2(primitive: &'static str, shapes: &[&[usize]]) -> Result<()> {
    for s in shapes {
        if s.len() != 2 {
            return Err(shape_err(primitive, format!("expected rank-2 tensor, got {s:?}")));
        }
    }
    Ok(())
}

fn want_arity(op: &'static str, shapes: &[&[usize]], arity: usize) -> Result<()> {
    if shapes.len() != arity {
        return Err(shape_err(op, format!("expected {arity} inputs, got {}", shapes.len())));
    }
    Ok(())
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Affine => "affine",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::SoftmaxMasked { .. } => "softmax_masked",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatRows => "concat_rows",
            Op::SplitRows { .. } => "split_rows",
            Op::MeanRows => "mean_rows",
            Op::Transpose => "transpose",
            Op::GatherRows { .. } => "gather_rows",
            Op::SumAll => "sum_all",
            Op::Logit { .. } => "logit",
            Op::SineEmbed { .. } => "sine_embed",
        }
    }

    /// Validate input shapes and return the output shape.
    pub fn infer_shape(&self, shapes: &[&[usize]]) -> Result<Vec<usize>> {
        let name = self.name();
        match self {
            Op::MatMul => {
                want_arity(name, shapes, 2)?;
                want_rank2(name, shapes)?;
                let (a, b) = (shapes[0], shapes[1]);
                if a[1] != b[0] {
                    return Err(shape_err(name, format!("{a:?} x {b:?} do not conform")));
                }
                Ok(vec![a[0], b[1]])
            }
            Op::Add | Op::Mul => {
                want_arity(name, shapes, 2)?;
                if shapes[0] != shapes[1] {
                    return Err(shape_err(
                        name,
                        format!("{:?} vs {:?}", shapes[0], shapes[1]),
                    ));
                }
                Ok(shapes[0].to_vec())
            }
            Op::Affine => {
                want_arity(name, shapes, 3)?;
                want_rank2(name, shapes)?;
                let (x, w, b) = (shapes[0], shapes[1], shapes[2]);
                if x[1] != w[0] || b[0] != 1 || b[1] != w[1] {
                    return Err(shape_err(
                        name,
                        format!("x {x:?}, w {w:?}, b {b:?} do not conform"),
                    ));
                }
                Ok(vec![x[0], w[1]])
            }
            Op::Relu | Op::Sigmoid => {
                want_arity(name, shapes, 1)?;
                Ok(shapes[0].to_vec())
            }
            Op::SoftmaxMasked { mask } => {
                want_arity(name, shapes, 1)?;
                want_rank2(name, shapes)?;
                let numel: usize = shapes[0].iter().product();
                if mask.len() != numel {
                    return Err(shape_err(
                        name,
                        format!("mask has {} entries for shape {:?}", mask.len(), shapes[0]),
                    ));
                }
                Ok(shapes[0].to_vec())
            }
            Op::LayerNorm { .. } => {
                want_arity(name, shapes, 3)?;
                want_rank2(name, shapes)?;
                let (x, g, b) = (shapes[0], shapes[1], shapes[2]);
                if g[0] != 1 || b[0] != 1 || g[1] != x[1] || b[1] != x[1] {
                    return Err(shape_err(
                        name,
                        format!("x {x:?}, gain {g:?}, bias {b:?} do not conform"),
                    ));
                }
                Ok(x.to_vec())
            }
            Op::ConcatRows => {
                if shapes.is_empty() {
                    return Err(shape_err(name, "needs at least one input".into()));
                }
                want_rank2(name, shapes)?;
                let cols = shapes[0][1];
                if shapes.iter().any(|s| s[1] != cols) {
                    return Err(shape_err(name, format!("column counts differ: {shapes:?}")));
                }
                Ok(vec![shapes.iter().map(|s| s[0]).sum(), cols])
            }
            Op::SplitRows { start, end } => {
                want_arity(name, shapes, 1)?;
                want_rank2(name, shapes)?;
                let n = shapes[0][0];
                if *start >= *end || *end > n {
                    return Err(shape_err(
                        name,
                        format!("range {start}..{end} out of bounds for {n} rows"),
                    ));
                }
                Ok(vec![end - start, shapes[0][1]])
            }
            Op::MeanRows => {
                want_arity(name, shapes, 1)?;
                want_rank2(name, shapes)?;
                Ok(vec![1, shapes[0][1]])
            }
            Op::Transpose => {
                want_arity(name, shapes, 1)?;
                want_rank2(name, shapes)?;
                Ok(vec![shapes[0][1], shapes[0][0]])
            }
            Op::GatherRows { plan } => {
                want_arity(name, shapes, 1)?;
                want_rank2(name, shapes)?;
                let n = shapes[0][0];
                if plan.slots.iter().flatten().any(|&s| s as usize >= n) {
                    return Err(shape_err(name, format!("plan indexes past {n} rows")));
                }
                Ok(vec![plan.groups(), plan.group_size * shapes[0][1]])
            }
            Op::SumAll => {
                want_arity(name, shapes, 1)?;
                Ok(vec![1, 1])
            }
            Op::Logit { eps } => {
                want_arity(name, shapes, 1)?;
                if !(*eps > 0.0 && *eps < 0.5) {
                    return Err(shape_err(name, format!("eps {eps} outside (0, 0.5)")));
                }
                Ok(shapes[0].to_vec())
            }
            Op::SineEmbed { dims } => {
                want_arity(name, shapes, 1)?;
                want_rank2(name, shapes)?;
                if shapes[0][1] != 2 {
                    return Err(shape_err(
                        name,
                        format!("expected (n, 2) coordinates, got {:?}", shapes[0]),
                    ));
                }
                if dims % 4 != 0 || *dims == 0 {
                    return Err(shape_err(name, format!("dims {dims} not divisible by 4")));
                }
                Ok(vec![shapes[0][0], *dims])
            }
        }
    }

    /// Forward evaluation. Shapes must have been validated by `infer_shape`.
    pub(crate) fn eval(&self, inputs: &[ValView<'_>]) -> Result<Vec<f64>> {
        match self {
            Op::MatMul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                Ok(matmul(a.values, b.values, a.rows(), a.cols(), b.cols()))
            }
            Op::Add => Ok(inputs[0]
                .values
                .iter()
                .zip(inputs[1].values)
                .map(|(x, y)| x + y)
                .collect()),
            Op::Mul => Ok(inputs[0]
                .values
                .iter()
                .zip(inputs[1].values)
                .map(|(x, y)| x * y)
                .collect()),
            Op::Affine => {
                let (x, w, b) = (&inputs[0], &inputs[1], &inputs[2]);
                let mut out = matmul(x.values, w.values, x.rows(), x.cols(), w.cols());
                let co = w.cols();
                for row in out.chunks_mut(co) {
                    for (o, bv) in row.iter_mut().zip(b.values) {
                        *o += bv;
                    }
                }
                Ok(out)
            }
            Op::Relu => Ok(inputs[0].values.iter().map(|&x| x.max(0.0)).collect()),
            Op::Sigmoid => Ok(inputs[0].values.iter().map(|&x| sigmoid(x)).collect()),
            Op::SoftmaxMasked { mask } => {
                let x = &inputs[0];
                let (n, m) = (x.rows(), x.cols());
                let mut out = vec![0.0; n * m];
                for r in 0..n {
                    let row = &x.values[r * m..(r + 1) * m];
                    let rmask = &mask[r * m..(r + 1) * m];
                    let mut max = f64::NEG_INFINITY;
                    for (v, &dead) in row.iter().zip(rmask) {
                        if !dead && *v > max {
                            max = *v;
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        return Err(CoreError::DegenerateRow { row: r });
                    }
                    let orow = &mut out[r * m..(r + 1) * m];
                    let mut sum = 0.0;
                    for ((o, v), &dead) in orow.iter_mut().zip(row).zip(rmask) {
                        if !dead {
                            *o = fast_exp(*v - max);
                            sum += *o;
                        }
                    }
                    for o in orow.iter_mut() {
                        *o /= sum;
                    }
                }
                Ok(out)
            }
            Op::LayerNorm { eps } => {
                let (x, g, b) = (&inputs[0], &inputs[1], &inputs[2]);
                let (n, c) = (x.rows(), x.cols());
                let mut out = vec![0.0; n * c];
                for r in 0..n {
                    let row = &x.values[r * c..(r + 1) * c];
                    let (mean, inv) = norm_stats(row, *eps);
                    for j in 0..c {
                        out[r * c + j] = g.values[j] * (row[j] - mean) * inv + b.values[j];
                    }
                }
                Ok(out)
            }
            Op::ConcatRows => {
                let mut out = Vec::with_capacity(inputs.iter().map(|v| v.values.len()).sum());
                for v in inputs {
                    out.extend_from_slice(v.values);
                }
                Ok(out)
            }
            Op::SplitRows { start, end } => {
                let c = inputs[0].cols();
                Ok(inputs[0].values[start * c..end * c].to_vec())
            }
            Op::MeanRows => {
                let x = &inputs[0];
                let (n, c) = (x.rows(), x.cols());
                let mut out = vec![0.0; c];
                for row in x.values.chunks(c) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                for o in out.iter_mut() {
                    *o /= n as f64;
                }
                Ok(out)
            }
            Op::Transpose => {
                let x = &inputs[0];
                let (n, m) = (x.rows(), x.cols());
                let mut out = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        out[j * n + i] = x.values[i * m + j];
                    }
                }
                Ok(out)
            }
            Op::GatherRows { plan } => {
                let x = &inputs[0];
                let c = x.cols();
                let gs = plan.group_size;
                let mut out = vec![0.0; plan.groups() * gs * c];
                for (g, group) in plan.slots.chunks(gs).enumerate() {
                    for (s, slot) in group.iter().enumerate() {
                        if let Some(src) = slot {
                            let src = *src as usize;
                            out[(g * gs + s) * c..(g * gs + s + 1) * c]
                                .copy_from_slice(&x.values[src * c..(src + 1) * c]);
                        }
                    }
                }
                Ok(out)
            }
            Op::SumAll => Ok(vec![inputs[0].values.iter().sum()]),
            Op::Logit { eps } => Ok(inputs[0]
                .values
                .iter()
                .map(|&p| {
                    let pc = p.clamp(*eps, 1.0 - *eps);
                    (pc / (1.0 - pc)).ln()
                })
                .collect()),
            Op::SineEmbed { dims } => {
                let points: Vec<(f64, f64)> = inputs[0]
                    .values
                    .chunks(2)
                    .map(|c| (c[0], c[1]))
                    .collect();
                Ok(crate::posenc::sine_embed_raw(&points, *dims))
            }
        }
    }

    /// Vector-Jacobian product: gradient w.r.t. each input for which
    /// `wanted` is set. `output` is the forward result of this node.
    pub(crate) fn vjp(
        &self,
        inputs: &[ValView<'_>],
        output: &ValView<'_>,
        seed: &[f64],
        wanted: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        match self {
            Op::MatMul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let da = wanted[0].then(|| matmul_bt(seed, b.values, m, n, k));
                let db = wanted[1].then(|| matmul_at(a.values, seed, m, k, n));
                vec![da, db]
            }
            Op::Add => vec![
                wanted[0].then(|| seed.to_vec()),
                wanted[1].then(|| seed.to_vec()),
            ],
            Op::Mul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let da = wanted[0]
                    .then(|| seed.iter().zip(b.values).map(|(s, y)| s * y).collect());
                let db = wanted[1]
                    .then(|| seed.iter().zip(a.values).map(|(s, x)| s * x).collect());
                vec![da, db]
            }
            Op::Affine => {
                let (x, w) = (&inputs[0], &inputs[1]);
                let (n, ci, co) = (x.rows(), x.cols(), w.cols());
                let dx = wanted[0].then(|| matmul_bt(seed, w.values, n, co, ci));
                let dw = wanted[1].then(|| matmul_at(x.values, seed, n, ci, co));
                let db = wanted[2].then(|| {
                    let mut acc = vec![0.0; co];
                    for row in seed.chunks(co) {
                        for (a, s) in acc.iter_mut().zip(row) {
                            *a += s;
                        }
                    }
                    acc
                });
                vec![dx, dw, db]
            }
            Op::Relu => {
                let dx = wanted[0].then(|| {
                    inputs[0]
                        .values
                        .iter()
                        .zip(seed)
                        .map(|(&x, &s)| if x > 0.0 { s } else { 0.0 })
                        .collect()
                });
                vec![dx]
            }
            Op::Sigmoid => {
                let dx = wanted[0].then(|| {
                    output
                        .values
                        .iter()
                        .zip(seed)
                        .map(|(&y, &s)| s * y * (1.0 - y))
                        .collect()
                });
                vec![dx]
            }
            Op::SoftmaxMasked { mask } => {
                let dx = wanted[0].then(|| {
                    let (n, m) = (output.rows(), output.cols());
                    let mut dx = vec![0.0; n * m];
                    for r in 0..n {
                        let p = &output.values[r * m..(r + 1) * m];
                        let s = &seed[r * m..(r + 1) * m];
                        let rmask = &mask[r * m..(r + 1) * m];
                        let dot: f64 = p.iter().zip(s).map(|(pj, sj)| pj * sj).sum();
                        let drow = &mut dx[r * m..(r + 1) * m];
                        for j in 0..m {
                            if !rmask[j] {
                                drow[j] = p[j] * (s[j] - dot);
                            }
                        }
                    }
                    dx
                });
                vec![dx]
            }
            Op::LayerNorm { eps } => {
                let (x, g) = (&inputs[0], &inputs[1]);
                let (n, c) = (x.rows(), x.cols());
                let mut dx = wanted[0].then(|| vec![0.0; n * c]);
                let mut dg = wanted[1].then(|| vec![0.0; c]);
                let mut db = wanted[2].then(|| vec![0.0; c]);
                for r in 0..n {
                    let row = &x.values[r * c..(r + 1) * c];
                    let srow = &seed[r * c..(r + 1) * c];
                    let (mean, inv) = norm_stats(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    if let Some(dg) = dg.as_mut() {
                        for j in 0..c {
                            dg[j] += srow[j] * xhat[j];
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        for j in 0..c {
                            db[j] += srow[j];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dxhat: Vec<f64> =
                            (0..c).map(|j| srow[j] * g.values[j]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat
                            .iter()
                            .zip(&xhat)
                            .map(|(d, h)| d * h)
                            .sum::<f64>()
                            / c as f64;
                        let drow = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                vec![dx, dg, db]
            }
            Op::ConcatRows => {
                let mut grads = Vec::with_capacity(inputs.len());
                let mut offset = 0;
                for (v, &w) in inputs.iter().zip(wanted) {
                    let len = v.values.len();
                    grads.push(w.then(|| seed[offset..offset + len].to_vec()));
                    offset += len;
                }
                grads
            }
            Op::SplitRows { start, .. } => {
                let dx = wanted[0].then(|| {
                    let c = inputs[0].cols();
                    let mut dx = vec![0.0; inputs[0].values.len()];
                    dx[start * c..start * c + seed.len()].copy_from_slice(seed);
                    dx
                });
                vec![dx]
            }
            Op::MeanRows => {
                let dx = wanted[0].then(|| {
                    let (n, c) = (inputs[0].rows(), inputs[0].cols());
                    let scale = 1.0 / n as f64;
                    let mut dx = vec![0.0; n * c];
                    for row in dx.chunks_mut(c) {
                        for (d, s) in row.iter_mut().zip(seed) {
                            *d = s * scale;
                        }
                    }
                    dx
                });
                vec![dx]
            }
            Op::Transpose => {
                let dx = wanted[0].then(|| {
                    let (n, m) = (inputs[0].rows(), inputs[0].cols());
                    let mut dx = vec![0.0; n * m];
                    for j in 0..m {
                        for i in 0..n {
                            dx[i * m + j] = seed[j * n + i];
                        }
                    }
                    dx
                });
                vec![dx]
            }
            Op::GatherRows { plan } => {
                let dx = wanted[0].then(|| {
                    let c = inputs[0].cols();
                    let gs = plan.group_size;
                    let mut dx = vec![0.0; inputs[0].values.len()];
                    for (g, group) in plan.slots.chunks(gs).enumerate() {
                        for (s, slot) in group.iter().enumerate() {
                            if let Some(src) = slot {
                                let src = *src as usize;
                                let seg = &seed[(g * gs + s) * c..(g * gs + s + 1) * c];
                                for (d, sv) in dx[src * c..(src + 1) * c].iter_mut().zip(seg) {
                                    *d += sv;
                                }
                            }
                        }
                    }
                    dx
                });
                vec![dx]
            }
            Op::SumAll => {
                let dx = wanted[0].then(|| vec![seed[0]; inputs[0].values.len()]);
                vec![dx]
            }
            Op::Logit { eps } => {
                let dx = wanted[0].then(|| {
                    inputs[0]
                        .values
                        .iter()
                        .zip(seed)
                        .map(|(&p, &s)| {
                            if p > *eps && p < 1.0 - *eps {
                                s / (p * (1.0 - p))
                            } else {
                                0.0
                            }
                        })
                        .collect()
                });
                vec![dx]
            }
            Op::SineEmbed { dims } => {
                let dx = wanted[0].then(|| {
                    let half = dims / 2;
                    let n = inputs[0].rows();
                    let mut dx = vec![0.0; n * 2];
                    for r in 0..n {
                        let (x, y) = (inputs[0].values[r * 2], inputs[0].values[r * 2 + 1]);
                        let srow = &seed[r * dims..(r + 1) * dims];
                        // first half encodes y, second half x
                        for (axis, &pos) in [y, x].iter().enumerate() {
                            let mut acc = 0.0;
                            for i in 0..half {
                                let w = crate::posenc::slot_frequency(i, half);
                                let v = pos * w;
                                let d = if i % 2 == 0 { w * v.cos() } else { -w * v.sin() };
                                acc += srow[axis * half + i] * d;
                            }
                            // axis 0 is y (column 1), axis 1 is x (column 0)
                            dx[r * 2 + (1 - axis)] = acc;
                        }
                    }
                    dx
                });
                vec![dx]
            }
        }
    }
}

fn norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let c = row.len() as f64;
    let mean = row.iter().sum::<f64>() / c;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    (mean, 1.0 / (var + eps).sqrt())
}

/// exp via range reduction and a degree-11 Taylor polynomial; relative error
/// below 1e-13 on the fast path, exact at 0. Roughly 5x faster than libm,
/// which matters because attention softmax dominates the forward pass.
pub(crate) fn fast_exp(x: f64) -> f64 {
    if !(-700.0..=700.0).contains(&x) {
        return x.exp();
    }
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    const INV_LN2: f64 = 1.442_695_040_888_963_4;
    let k = (x * INV_LN2).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series at 0, |r| <= ln2/2
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5040.0
                                    + r * (1.0 / 40320.0
                                        + r * (1.0 / 362880.0
                                            + r * (1.0 / 3628800.0
                                                + r / 39916800.0))))))))));
    let ki = k as i64;
    if ki <= -1022 {
        // subnormal range: split the scaling
        return p * f64::from_bits(((ki + 2046 + 1023) as u64) << 52) * 2f64.powi(-2046);
    }
    p * f64::from_bits(((ki + 1023) as u64) << 52)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + fast_exp(-x))
    } else {
        let e = fast_exp(x);
        e / (1.0 + e)
    }
}

/// y += s*x over equal-length slices; the exact-size binding lets LLVM drop
/// bounds checks and vectorize.
#[inline]
fn axpy(s: f64, x: &[f64], y: &mut [f64]) {
    for (yj, xj) in y.iter_mut().zip(x) {
        *yj += s * xj;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[2]) + (acc[1] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// (m,k)·(k,n), row-major.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], orow);
        }
    }
    out
}

/// a (m,n) · bᵀ where b is (k,n), result (m,k).
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
    out
}

/// aᵀ · c where a is (m,k) and c is (m,n), result (k,n).
pub(crate) fn matmul_at(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, crow, &mut out[p * n..(p + 1) * n]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::fast_exp;

    #[test]
    fn fast_exp_matches_libm_closely() {
        assert_eq!(fast_exp(0.0), 1.0);
        let mut x = -300.0;
        while x < 300.0 {
            let (got, want) = (fast_exp(x), x.exp());
            let rel = (got - want).abs() / want;
            assert!(rel < 1e-12, "x={x}: {got} vs {want} rel {rel}");
            x += 0.37;
        }
        // extremes fall back to libm
        assert_eq!(fast_exp(-800.0), 0.0);
        assert!(fast_exp(710.0).is_infinite());
    }
}
