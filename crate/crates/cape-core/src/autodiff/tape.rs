//! Wengert tape: records primitive applications during the forward pass and
//! replays them in reverse to accumulate gradients.
//!
//! A tape lives for one forward/backward round and is then dropped. Nodes are
//! recorded only while some input is gradient-tracked, so evaluation with
//! frozen parameters records nothing.

use std::sync::Arc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{GatherPlan, Op, ValView};
use super::tensor::Tensor;
use crate::error::{CoreError, Result};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a value living on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: u32,
}

struct Slot {
    shape: Vec<usize>,
    values: Vec<f64>,
    tracked: bool,
}

struct Node {
    op: Op,
    inputs: Vec<u32>,
    output: u32,
}

pub struct Tape {
    id: u64,
    slots: Vec<Slot>,
    nodes: Vec<Node>,
    /// Persistent per-slot gradient accumulators; backward adds into these,
    /// so repeated backward calls accumulate additively.
    acc: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            slots: Vec::new(),
            nodes: Vec::new(),
            acc: Vec::new(),
        }
    }

    fn push_slot(&mut self, shape: Vec<usize>, values: Vec<f64>, tracked: bool) -> Var {
        let index = self.slots.len() as u32;
        self.slots.push(Slot {
            shape,
            values,
            tracked,
        });
        self.acc.push(None);
        Var {
            tape: self.id,
            index,
        }
    }

    /// Register a leaf value; it is gradient-tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_slot(t.shape().to_vec(), t.values().to_vec(), t.requires_grad)
    }

    /// Register an untracked constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_slot(t.shape().to_vec(), t.values().to_vec(), false)
    }

    pub fn var_count(&self) -> usize {
        self.slots.len()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index as usize >= self.slots.len() {
            return Err(CoreError::ForeignTape);
        }
        Ok(v.index as usize)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.slots[v.index as usize].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.slots[v.index as usize].values
    }

    /// Snapshot a value as an (untracked) tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let s = &self.slots[v.index as usize];
        Tensor::new(s.shape.clone(), s.values.clone()).expect("slot values are valid")
    }

    /// Accumulated gradient for `v` from all backward calls so far.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.acc[v.index as usize].as_deref()
    }

    /// Apply a primitive. Records a node only when an input is tracked.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let mut idx = Vec::with_capacity(inputs.len());
        for &v in inputs {
            idx.push(self.check(v)? as u32);
        }
        let views: Vec<ValView<'_>> = idx
            .iter()
            .map(|&i| ValView {
                shape: &self.slots[i as usize].shape,
                values: &self.slots[i as usize].values,
            })
            .collect();
        let shapes: Vec<&[usize]> = views.iter().map(|v| v.shape).collect();
        let out_shape = op.infer_shape(&shapes)?;
        let out_values = op.eval(&views)?;
        let tracked = idx.iter().any(|&i| self.slots[i as usize].tracked);
        let out = self.push_slot(out_shape, out_values, tracked);
        if tracked {
            self.nodes.push(Node {
                op,
                inputs: idx,
                output: out.index,
            });
        }
        Ok(out)
    }

    /// Reverse sweep from `output`, seeded with `seed` (same shape as the
    /// output). Gradients land in per-slot accumulators readable via
    /// [`Tape::grad`].
    pub fn backward(&mut self, output: Var, seed: &Tensor) -> Result<()> {
        let out_idx = self.check(output)?;
        if seed.shape() != self.slots[out_idx].shape.as_slice() {
            return Err(CoreError::ShapeMismatch {
                primitive: "backward",
                detail: format!(
                    "seed shape {:?} does not match output shape {:?}",
                    seed.shape(),
                    self.slots[out_idx].shape
                ),
            });
        }
        let mut work: Vec<Option<Vec<f64>>> = vec![None; self.slots.len()];
        work[out_idx] = Some(seed.values().to_vec());

        for node in self.nodes.iter().rev() {
            let Some(dout) = work[node.output as usize].take() else {
                continue;
            };
            let wanted: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.slots[i as usize].tracked)
                .collect();
            if wanted.iter().any(|&w| w) {
                let views: Vec<ValView<'_>> = node
                    .inputs
                    .iter()
                    .map(|&i| ValView {
                        shape: &self.slots[i as usize].shape,
                        values: &self.slots[i as usize].values,
                    })
                    .collect();
                let out_view = ValView {
                    shape: &self.slots[node.output as usize].shape,
                    values: &self.slots[node.output as usize].values,
                };
                let grads = node.op.vjp(&views, &out_view, &dout, &wanted);
                for (&i, g) in node.inputs.iter().zip(grads) {
                    if let Some(g) = g {
                        match &mut work[i as usize] {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(&g) {
                                    *a += v;
                                }
                            }
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
            // restore the output gradient so tracked intermediates accumulate
            work[node.output as usize] = Some(dout);
        }

        for (i, g) in work.into_iter().enumerate() {
            if let Some(g) = g {
                if self.slots[i].tracked {
                    match &mut self.acc[i] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(&g) {
                                *a += v;
                            }
                        }
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }

    // ── primitive wrappers ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Op::Affine, &[x, w, b])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[x])
    }

    pub fn softmax_masked(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        self.apply(Op::SoftmaxMasked { mask }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.apply(Op::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.apply(Op::ConcatRows, parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Op::SplitRows { start, end }, &[x])
    }

    /// Split into `[0..at)` and `[at..rows)`.
    pub fn split_rows(&mut self, x: Var, at: usize) -> Result<(Var, Var)> {
        let rows = self.shape(x)[0];
        let head = self.slice_rows(x, 0, at)?;
        let tail = self.slice_rows(x, at, rows)?;
        Ok((head, tail))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::MeanRows, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::Transpose, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, plan: Arc<GatherPlan>) -> Result<Var> {
        self.apply(Op::GatherRows { plan }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.apply(Op::SumAll, &[x])
    }

    pub fn logit(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.apply(Op::Logit { eps }, &[x])
    }

    pub fn sine_embed(&mut self, coords: Var, dims: usize) -> Result<Var> {
        self.apply(Op::SineEmbed { dims }, &[coords])
    }

    // ── composed helpers ────────────────────────────────────────────────

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = self.constant(Tensor::full(shape, c));
        self.mul(x, k)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn add_const(&mut self, x: Var, t: Tensor) -> Result<Var> {
        let c = self.constant(t);
        self.add(x, c)
    }

    pub fn mul_const(&mut self, x: Var, t: Tensor) -> Result<Var> {
        let c = self.constant(t);
        self.mul(x, c)
    }

    /// |x| as relu(x) + relu(-x).
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let p = self.relu(x)?;
        let nx = self.neg(x)?;
        let n = self.relu(nx)?;
        self.add(p, n)
    }

    /// Zero out rows whose `keep` flag is false. Identity (no recorded op)
    /// when everything is kept.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != keep.len() {
            return Err(CoreError::contract(format!(
                "mask_rows: {} flags for shape {:?}",
                keep.len(),
                shape
            )));
        }
        if keep.iter().all(|&k| k) {
            return Ok(x);
        }
        let cols = shape[1];
        let mut m = vec![0.0; keep.len() * cols];
        for (r, &k) in keep.iter().enumerate() {
            if k {
                m[r * cols..(r + 1) * cols].fill(1.0);
            }
        }
        let t = Tensor::new(shape, m).expect("mask tensor is valid");
        self.mul_const(x, t)
    }
}
