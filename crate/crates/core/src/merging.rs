//! Collapse each merge group of a hidden-state batch into one vector.
//!
//! Two aggregations are provided: the arithmetic mean of the members, and a
//! softmax-weighted sum whose scores are `w . x_j` for a learned vector `w`.
//! Groups made of padding are dropped, the surviving groups of each row are
//! packed to the front, and rows are re-padded with zeros to the longest
//! merged length in the batch.

use crate::error::{Error, Result};
use crate::grouping::GroupIndices;

/// A `B x N x d` block of hidden states with a `B x N` validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    /// `true` marks a real (non-padding) position.
    pub mask: Vec<bool>,
}

impl HiddenBatch {
    pub fn new(
        batch: usize,
        seq_len: usize,
        dim: usize,
        values: Vec<f64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::contract("hidden dimension must be >= 1"));
        }
        if values.len() != batch * seq_len * dim || mask.len() != batch * seq_len {
            return Err(Error::shape(
                "HiddenBatch",
                format!(
                    "values {} and mask {} do not fit [{batch}, {seq_len}, {dim}]",
                    values.len(),
                    mask.len()
                ),
            ));
        }
        Ok(Self {
            batch,
            seq_len,
            dim,
            values,
            mask,
        })
    }

    /// Vector at `(b, p)`.
    pub fn at(&self, b: usize, p: usize) -> &[f64] {
        let o = (b * self.seq_len + p) * self.dim;
        &self.values[o..o + self.dim]
    }
}

/// How a group is aggregated.
#[derive(Debug, Clone, PartialEq)]
pub enum MergeStrategy {
    Mean,
    /// Softmax weighting with scores `w . x_j`; `w` has length `d`.
    Learnable { w: Vec<f64> },
}

/// Result of a merge: `B x N' x d` values, the new mask, and (for the
/// learnable strategy) the per-input-position weights.
#[derive(Debug, Clone)]
pub struct MergedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub dim: usize,
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    /// `B x N` softmax weights; zero at padding positions.
    pub alphas: Option<Vec<f64>>,
    /// Lengths of the merged rows (number of valid groups).
    pub lengths: Vec<usize>,
    cache: Option<MergeCache>,
}

impl MergedBatch {
    pub fn at(&self, b: usize, i: usize) -> &[f64] {
        let o = (b * self.seq_len + i) * self.dim;
        &self.values[o..o + self.dim]
    }

    /// Detach the state needed by [`merge_backward`].
    pub fn take_cache(&mut self) -> Option<MergeCache> {
        self.cache.take()
    }
}

/// Gradients of a merge with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MergeGrads {
    /// `B x N x d`; zero at padding positions.
    pub grad_x: Vec<f64>,
    /// Present for the learnable strategy.
    pub grad_w: Option<Vec<f64>>,
}

/// Where each input position lands in the merged output.
#[derive(Debug, Clone)]
struct MergePlan {
    batch: usize,
    in_len: usize,
    out_len: usize,
    dim: usize,
    /// Per input position: flat output row index `b * out_len + i`, or
    /// `None` for padding.
    slot: Vec<Option<usize>>,
    /// Member count per flat output row.
    sizes: Vec<usize>,
    lengths: Vec<usize>,
}

impl MergePlan {
    fn new(x: &HiddenBatch, groups: &GroupIndices) -> Result<Self> {
        if groups.batch() != x.batch || (x.batch > 0 && groups.seq_len() != x.seq_len) {
            return Err(Error::shape(
                "merge",
                format!(
                    "groups [{}, {}] do not match hidden states [{}, {}, {}]",
                    groups.batch(),
                    groups.seq_len(),
                    x.batch,
                    x.seq_len,
                    x.dim
                ),
            ));
        }
        let n = x.seq_len;
        let mut local = vec![None; x.batch * n];
        let mut lengths = Vec::with_capacity(x.batch);
        for b in 0..x.batch {
            let row = groups.row(b);
            let mut next = 0usize;
            let mut current: Option<(usize, bool, Option<usize>)> = None;
            for p in 0..n {
                let valid = x.mask[b * n + p];
                let slot = match current {
                    Some((g, v, slot)) if g == row[p] => {
                        if v != valid {
                            return Err(Error::contract(format!(
                                "row {b}: group {g} mixes valid and padding positions"
                            )));
                        }
                        slot
                    }
                    _ => {
                        let slot = valid.then(|| {
                            next += 1;
                            next - 1
                        });
                        current = Some((row[p], valid, slot));
                        slot
                    }
                };
                local[b * n + p] = slot;
            }
            lengths.push(next);
        }
        let out_len = lengths.iter().copied().max().unwrap_or(0);
        let slot: Vec<Option<usize>> = local
            .iter()
            .enumerate()
            .map(|(idx, s)| s.map(|i| (idx / n.max(1)) * out_len + i))
            .collect();
        let mut sizes = vec![0usize; x.batch * out_len];
        for s in slot.iter().flatten() {
            sizes[*s] += 1;
        }
        Ok(Self {
            batch: x.batch,
            in_len: n,
            out_len,
            dim: x.dim,
            slot,
            sizes,
            lengths,
        })
    }

    fn output_mask(&self) -> Vec<bool> {
        (0..self.batch * self.out_len)
            .map(|r| r % self.out_len.max(1) < self.lengths[r / self.out_len.max(1)])
            .collect()
    }
}

/// Saved forward state for the backward pass.
#[derive(Debug, Clone)]
pub struct MergeCache {
    plan: MergePlan,
    kind: CacheKind,
}

#[derive(Debug, Clone)]
enum CacheKind {
    Mean,
    Learnable {
        x: Vec<f64>,
        w: Vec<f64>,
        alphas: Vec<f64>,
        out: Vec<f64>,
    },
}

impl MergeCache {
    pub fn output_len(&self) -> usize {
        self.plan.out_len
    }

    pub fn input_len(&self) -> usize {
        self.plan.in_len
    }

    /// Exact reverse-mode gradients given `grad_out` of shape `B x N' x d`.
    pub fn backward(&self, grad_out: &[f64]) -> Result<MergeGrads> {
        let plan = &self.plan;
        let d = plan.dim;
        if grad_out.len() != plan.batch * plan.out_len * d {
            return Err(Error::shape(
                "merge_backward",
                format!(
                    "gradient has {} values, expected [{}, {}, {d}]",
                    grad_out.len(),
                    plan.batch,
                    plan.out_len
                ),
            ));
        }
        let mut grad_x = vec![0.0; plan.batch * plan.in_len * d];
        match &self.kind {
            CacheKind::Mean => {
                for (pos, slot) in plan.slot.iter().enumerate() {
                    let Some(r) = *slot else { continue };
                    let inv = 1.0 / plan.sizes[r] as f64;
                    let g = &grad_out[r * d..(r + 1) * d];
                    for (gx, &go) in grad_x[pos * d..(pos + 1) * d].iter_mut().zip(g) {
                        *gx = go * inv;
                    }
                }
                Ok(MergeGrads {
                    grad_x,
                    grad_w: None,
                })
            }
            CacheKind::Learnable { x, w, alphas, out } => {
                let mut grad_w = vec![0.0; d];
                for (pos, slot) in plan.slot.iter().enumerate() {
                    let Some(r) = *slot else { continue };
                    let g = &grad_out[r * d..(r + 1) * d];
                    let xj = &x[pos * d..(pos + 1) * d];
                    let oi = &out[r * d..(r + 1) * d];
                    let alpha = alphas[pos];
                    // d loss / d z_j = alpha_j * g . (x_j - out_i)
                    let dz = alpha
                        * g.iter()
                            .zip(xj.iter().zip(oi))
                            .map(|(gk, (xk, ok))| gk * (xk - ok))
                            .sum::<f64>();
                    for k in 0..d {
                        grad_x[pos * d + k] = alpha * g[k] + dz * w[k];
                        grad_w[k] += dz * xj[k];
                    }
                }
                Ok(MergeGrads {
                    grad_x,
                    grad_w: Some(grad_w),
                })
            }
        }
    }
}

/// Average the members of every valid group.
pub fn merge_mean(x: &HiddenBatch, groups: &GroupIndices) -> Result<MergedBatch> {
    let plan = MergePlan::new(x, groups)?;
    let d = x.dim;
    let mut values = vec![0.0; plan.batch * plan.out_len * d];
    for (pos, slot) in plan.slot.iter().enumerate() {
        if let Some(r) = *slot {
            for (o, &v) in values[r * d..(r + 1) * d]
                .iter_mut()
                .zip(&x.values[pos * d..(pos + 1) * d])
            {
                *o += v;
            }
        }
    }
    for (r, &size) in plan.sizes.iter().enumerate() {
        if size > 0 {
            let inv = 1.0 / size as f64;
            values[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(MergedBatch {
        batch: plan.batch,
        seq_len: plan.out_len,
        dim: d,
        values,
        mask: plan.output_mask(),
        alphas: None,
        lengths: plan.lengths.clone(),
        cache: Some(MergeCache {
            plan,
            kind: CacheKind::Mean,
        }),
    })
}

/// Softmax-weighted sum of the members of every valid group, with scores
/// `w . x_j`. Each group subtracts its maximum score before exponentiating.
pub fn merge_learnable(
    x: &HiddenBatch,
    groups: &GroupIndices,
    strategy: &MergeStrategy,
) -> Result<MergedBatch> {
    let MergeStrategy::Learnable { w } = strategy else {
        return Err(Error::contract("merge_learnable needs the learnable strategy"));
    };
    let d = x.dim;
    if w.len() != d {
        return Err(Error::shape(
            "merge_learnable",
            format!("weight vector has length {}, hidden size is {d}", w.len()),
        ));
    }
    let plan = MergePlan::new(x, groups)?;
    let rows = plan.batch * plan.out_len;

    let scores: Vec<f64> = (0..x.batch * x.seq_len)
        .map(|pos| dot(&x.values[pos * d..(pos + 1) * d], w))
        .collect();
    let mut group_max = vec![f64::NEG_INFINITY; rows];
    for (pos, slot) in plan.slot.iter().enumerate() {
        if let Some(r) = *slot {
            group_max[r] = group_max[r].max(scores[pos]);
        }
    }
    let mut alphas = vec![0.0; x.batch * x.seq_len];
    let mut denom = vec![0.0; rows];
    for (pos, slot) in plan.slot.iter().enumerate() {
        if let Some(r) = *slot {
            let e = (scores[pos] - group_max[r]).exp();
            alphas[pos] = e;
            denom[r] += e;
        }
    }
    let mut values = vec![0.0; rows * d];
    for (pos, slot) in plan.slot.iter().enumerate() {
        if let Some(r) = *slot {
            alphas[pos] /= denom[r];
            let a = alphas[pos];
            for (o, &v) in values[r * d..(r + 1) * d]
                .iter_mut()
                .zip(&x.values[pos * d..(pos + 1) * d])
            {
                *o += a * v;
            }
        }
    }

    Ok(MergedBatch {
        batch: plan.batch,
        seq_len: plan.out_len,
        dim: d,
        values: values.clone(),
        mask: plan.output_mask(),
        alphas: Some(alphas.clone()),
        lengths: plan.lengths.clone(),
        cache: Some(MergeCache {
            plan,
            kind: CacheKind::Learnable {
                x: x.values.clone(),
                w: w.clone(),
                alphas,
                out: values,
            },
        }),
    })
}

/// Dispatch on the strategy.
pub fn merge(
    x: &HiddenBatch,
    groups: &GroupIndices,
    strategy: &MergeStrategy,
) -> Result<MergedBatch> {
    match strategy {
        MergeStrategy::Mean => merge_mean(x, groups),
        MergeStrategy::Learnable { .. } => merge_learnable(x, groups, strategy),
    }
}

/// Backward pass through a merge. Consumes the state cached by the forward
/// call; a second call on the same batch fails.
pub fn merge_backward(grad_out: &[f64], state: &mut MergedBatch) -> Result<MergeGrads> {
    let cache = state
        .take_cache()
        .ok_or_else(|| Error::contract("merge_backward called without a cached forward state"))?;
    cache.backward(grad_out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
