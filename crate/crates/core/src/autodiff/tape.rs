use std::rc::Rc;

use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};
use crate::grouping::GroupIndices;
use crate::merging::{self, HiddenBatch, MergeCache, MergeStrategy};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Matmul and merge work performed while recording, in FLOPs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopTally {
    /// `2 * m * k * p` per `(m x k) (k x p)` product.
    pub matmul: u64,
    /// `2 * N * d` per merged row of input length `N`.
    pub merge: u64,
}

impl FlopTally {
    pub fn total(&self) -> u64 {
        self.matmul + self.merge
    }
}

pub(crate) enum Op {
    Leaf,
    Constant,
    MatMul { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    Exp { a: Var },
    Recip { a: Var },
    Relu { a: Var },
    Softmax { a: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    SegmentSum { x: Var, groups: Rc<GroupIndices> },
    SegmentMax { x: Var, argmax: Vec<Option<usize>> },
    GatherSegments { x: Var, groups: Rc<GroupIndices> },
    Concat { inputs: Vec<Var> },
    SplitHeads { a: Var, heads: usize },
    JoinHeads { a: Var, heads: usize },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    MaskedFill { a: Var, mask: Vec<bool> },
    SelectPosition { a: Var, pos: usize },
    Reshape { a: Var },
    Sum { a: Var },
    Merge {
        x: Var,
        w: Option<Var>,
        cache: MergeCache,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in execution order so gradients can be
/// replayed in reverse.
///
/// Leaves created with [`Tape::leaf`] receive gradients; values created with
/// [`Tape::constant`] do not, nor does anything computed only from constants.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    flops: FlopTally,
}

/// Gradients of a scalar with respect to every leaf of a tape.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match &self.grads[var.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    let listed: Vec<String> = shapes.iter().map(|s| format!("{s:?}")).collect();
    Error::shape(op, format!("operand shapes {}", listed.join(", ")))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn flops(&self) -> FlopTally {
        self.flops
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, rg)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// `a[..., m, k] @ b[k, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (k, p) = (sb[0], sb[1]);
        let rows = self.value(a).numel() / k;
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p;
        let mut out = vec![0.0; rows * p];
        gemm(self.data(a), self.data(b), rows, k, p, &mut out);
        self.flops.matmul += 2 * (rows * k * p) as u64;
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b }, &[a, b]))
    }

    /// `a[t, m, k] @ b[t, k, p]` for every `t`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", &[sa, sb]));
        }
        let (t, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; t * m * p];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..t {
            gemm(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * p..(i + 1) * k * p],
                m,
                k,
                p,
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        self.flops.matmul += 2 * (t * m * k * p) as u64;
        Ok(self.push(
            Tensor::new(vec![t, m, p], out)?,
            Op::BatchMatMul { a, b },
            &[a, b],
        ))
    }

    /// Swap the last two dimensions.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(shape_err("transpose", &[&sa]));
        }
        let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let out = transpose_blocks(self.data(a), r, c);
        let mut shape = sa;
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose { a }, &[a]))
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape and is
    /// then repeated over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add", &[sa, sb]));
        }
        let shape = sa.to_vec();
        let db = self.data(b);
        let out: Vec<f64> = self
            .data(a)
            .chunks(db.len())
            .flat_map(|chunk| chunk.iter().zip(db).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product; `b` either matches `a` or has last dimension 1
    /// and is broadcast along `a`'s last dimension.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let same = sa == sb;
        let column = sa.len() == sb.len()
            && sb[sb.len() - 1] == 1
            && sa[..sa.len() - 1] == sb[..sb.len() - 1];
        if !same && !column {
            return Err(shape_err("mul", &[sa, sb]));
        }
        let shape = sa.to_vec();
        let width = if same { 1 } else { sa[sa.len() - 1] };
        let db = self.data(b);
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * db[i / width])
            .collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.map(a, |x| x * factor);
        self.push(t, Op::Scale { a, factor }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::exp);
        self.push(t, Op::Exp { a }, &[a])
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::recip);
        self.push(t, Op::Recip { a }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        self.push(t, Op::Relu { a }, &[a])
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect()).unwrap()
    }

    /// Softmax over the last dimension. Entries equal to `-inf` get weight 0;
    /// a row made only of `-inf` is an error. NaN inputs propagate.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let width = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(width) {
            if row.iter().all(|&x| x == f64::NEG_INFINITY) {
                return Err(Error::contract("softmax over a fully masked row"));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { a }, &[a]))
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta` over the last dimension,
    /// with the biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        let d = sx[sx.len() - 1];
        if sg != [d] || sb != [d] {
            return Err(shape_err("layer_norm", &[sx, sg, sb]));
        }
        let shape = sx.to_vec();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = self.data(x).to_vec();
        let mut inv_std = Vec::with_capacity(xhat.len() / d);
        let mut out = vec![0.0; xhat.len()];
        for (row, orow) in xhat.chunks_mut(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * is;
                orow[j] = *v * g[j] + b[j];
            }
            inv_std.push(is);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Rows of `table[V, d]` selected by `ids`, shaped `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", &[st, ids_shape]));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::contract(format!(
                "embedding id {bad} out of range for a table of {vocab} rows"
            )));
        }
        let data = self.data(table);
        let out: Vec<f64> = ids
            .iter()
            .flat_map(|&i| data[i * d..(i + 1) * d].iter().copied())
            .collect();
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    fn check_segments(&self, op: &'static str, x: Var, groups: &GroupIndices) -> Result<[usize; 3]> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[0] != groups.batch() || sx[1] != groups.seq_len() {
            return Err(shape_err(op, &[sx, &[groups.batch(), groups.seq_len()]]));
        }
        Ok([sx[0], sx[1], sx[2]])
    }

    /// Sum of `x[B, N, D]` over each group: `[B, G, D]` with `G` the largest
    /// group count. Slots past a row's count are zero.
    pub fn segment_sum(&mut self, x: Var, groups: &Rc<GroupIndices>) -> Result<Var> {
        let [b, n, d] = self.check_segments("segment_sum", x, groups)?;
        let g = groups.max_count();
        let src = self.data(x);
        let mut out = vec![0.0; b * g * d];
        for bi in 0..b {
            for (p, &gi) in groups.row(bi).iter().enumerate() {
                let o = (bi * g + gi) * d;
                let s = (bi * n + p) * d;
                for k in 0..d {
                    out[o + k] += src[s + k];
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![b, g, d], out)?,
            Op::SegmentSum {
                x,
                groups: Rc::clone(groups),
            },
            &[x],
        ))
    }

    /// Componentwise maximum of `x[B, N, D]` over each group. The gradient
    /// goes to the first member attaining the maximum.
    pub fn segment_max(&mut self, x: Var, groups: &Rc<GroupIndices>) -> Result<Var> {
        let [b, n, d] = self.check_segments("segment_max", x, groups)?;
        let g = groups.max_count();
        let src = self.data(x);
        let mut out = vec![0.0; b * g * d];
        let mut argmax: Vec<Option<usize>> = vec![None; b * g * d];
        for bi in 0..b {
            for (p, &gi) in groups.row(bi).iter().enumerate() {
                for k in 0..d {
                    let o = (bi * g + gi) * d + k;
                    let s = (bi * n + p) * d + k;
                    if argmax[o].is_none() || src[s] > out[o] {
                        out[o] = src[s];
                        argmax[o] = Some(s);
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![b, g, d], out)?,
            Op::SegmentMax { x, argmax },
            &[x],
        ))
    }

    /// Inverse layout of [`Tape::segment_sum`]: copy each group's value
    /// `x[B, G, D]` back to every member position, giving `[B, N, D]`.
    pub fn gather_segments(&mut self, x: Var, groups: &Rc<GroupIndices>) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[0] != groups.batch() || sx[1] < groups.max_count() {
            return Err(shape_err("gather_segments", &[sx, &[groups.batch(), groups.max_count()]]));
        }
        let (b, g, d, n) = (sx[0], sx[1], sx[2], groups.seq_len());
        let src = self.data(x);
        let mut out = Vec::with_capacity(b * n * d);
        for bi in 0..b {
            for &gi in groups.row(bi) {
                let o = (bi * g + gi) * d;
                out.extend_from_slice(&src[o..o + d]);
            }
        }
        Ok(self.push(
            Tensor::new(vec![b, n, d], out)?,
            Op::GatherSegments {
                x,
                groups: Rc::clone(groups),
            },
            &[x],
        ))
    }

    /// Concatenate along the last dimension.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        for v in inputs {
            let s = self.shape(*v);
            if &s[..s.len() - 1] != lead {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
                return Err(shape_err("concat", &shapes));
            }
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = inputs.iter().map(|v| self.value(*v).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(*v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    /// `[B, n, h * dk] -> [B * h, n, dk]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 3 || heads == 0 || !sa[2].is_multiple_of(heads) {
            return Err(shape_err("split_heads", &[sa, &[heads]]));
        }
        let (b, n, d) = (sa[0], sa[1], sa[2]);
        let dk = d / heads;
        let src = self.data(a);
        let mut out = vec![0.0; b * n * d];
        for bi in 0..b {
            for i in 0..n {
                for h in 0..heads {
                    let s = (bi * n + i) * d + h * dk;
                    let o = ((bi * heads + h) * n + i) * dk;
                    out[o..o + dk].copy_from_slice(&src[s..s + dk]);
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![b * heads, n, dk], out)?,
            Op::SplitHeads { a, heads },
            &[a],
        ))
    }

    /// `[B * h, n, dk] -> [B, n, h * dk]`.
    pub fn join_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 3 || heads == 0 || !sa[0].is_multiple_of(heads) {
            return Err(shape_err("join_heads", &[sa, &[heads]]));
        }
        let (bh, n, dk) = (sa[0], sa[1], sa[2]);
        let b = bh / heads;
        let d = dk * heads;
        let src = self.data(a);
        let mut out = vec![0.0; b * n * d];
        for bi in 0..b {
            for i in 0..n {
                for h in 0..heads {
                    let o = (bi * n + i) * d + h * dk;
                    let s = ((bi * heads + h) * n + i) * dk;
                    out[o..o + dk].copy_from_slice(&src[s..s + dk]);
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![b, n, d], out)?,
            Op::JoinHeads { a, heads },
            &[a],
        ))
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits[M, C])`.
    /// `None` targets are ignored; with no targets the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(shape_err("cross_entropy", &[sl, &[targets.len()]]));
        }
        let c = sl[1];
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::contract(format!("target class {bad} out of range for {c} classes")));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        let mut count = 0usize;
        for (row, t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if let Some(t) = t {
                loss += lse - row[*t];
                count += 1;
            }
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let loss = if count > 0 { loss / count as f64 } else { 0.0 };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Replace entries where `mask` is true by `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let v = self.value(a);
        if mask.len() != v.numel() {
            return Err(shape_err("masked_fill", &[v.shape(), &[mask.len()]]));
        }
        let out: Vec<f64> = v
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            &[a],
        ))
    }

    /// `a[B, N, D] -> a[:, pos, :]` of shape `[B, D]`.
    pub fn select_position(&mut self, a: Var, pos: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 3 || pos >= sa[1] {
            return Err(shape_err("select_position", &[sa, &[pos]]));
        }
        let (b, n, d) = (sa[0], sa[1], sa[2]);
        let src = self.data(a);
        let out: Vec<f64> = (0..b)
            .flat_map(|bi| src[(bi * n + pos) * d..(bi * n + pos + 1) * d].iter().copied())
            .collect();
        Ok(self.push(
            Tensor::new(vec![b, d], out)?,
            Op::SelectPosition { a, pos },
            &[a],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if shape.iter().product::<usize>() != v.numel() {
            return Err(shape_err("reshape", &[v.shape(), shape]));
        }
        let t = Tensor::new(shape.to_vec(), v.data().to_vec())?;
        Ok(self.push(t, Op::Reshape { a }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    /// Merge groups of `x[B, N, d]` (see [`crate::merging`]). `w` selects the
    /// learnable strategy and must have shape `[d]`. Returns the merged
    /// `[B, N', d]` value with its validity mask and row lengths.
    pub fn merge(
        &mut self,
        x: Var,
        mask: &[bool],
        groups: &GroupIndices,
        w: Option<Var>,
    ) -> Result<(Var, Vec<bool>, Vec<usize>)> {
        let sx = self.shape(x);
        if sx.len() != 3 {
            return Err(shape_err("merge", &[sx]));
        }
        let (b, n, d) = (sx[0], sx[1], sx[2]);
        let hidden = HiddenBatch::new(b, n, d, self.data(x).to_vec(), mask.to_vec())?;
        let strategy = match w {
            None => MergeStrategy::Mean,
            Some(w) => {
                if self.shape(w) != [d] {
                    return Err(shape_err("merge", &[self.shape(x), self.shape(w)]));
                }
                MergeStrategy::Learnable {
                    w: self.data(w).to_vec(),
                }
            }
        };
        let mut merged = merging::merge(&hidden, groups, &strategy)?;
        let cache = merged.take_cache().expect("fresh merge carries its cache");
        if merged.seq_len == 0 {
            return Err(Error::contract("merge left no valid position in any row"));
        }
        self.flops.merge += 2 * (b * n * d) as u64;
        let value = Tensor::new(vec![b, merged.seq_len, d], merged.values)?;
        let inputs: Vec<Var> = std::iter::once(x).chain(w).collect();
        let out = self.push(value, Op::Merge { x, w, cache }, &inputs);
        Ok((out, merged.mask, merged.lengths))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let sb = self.shape(*b);
                let (k, p) = (sb[0], sb[1]);
                let rows = g.len() / p;
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| gemm_nt(g, db, rows, p, k, ga));
                self.accumulate(grads, *b, |gb| gemm_tn(da, g, rows, k, p, gb));
            }
            Op::BatchMatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (t, m, k, p) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..t {
                        gemm_nt(
                            &g[i * m * p..(i + 1) * m * p],
                            &db[i * k * p..(i + 1) * k * p],
                            m,
                            p,
                            k,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..t {
                        gemm_tn(
                            &da[i * m * k..(i + 1) * m * k],
                            &g[i * m * p..(i + 1) * m * p],
                            m,
                            k,
                            p,
                            &mut gb[i * k * p..(i + 1) * k * p],
                        );
                    }
                });
            }
            Op::Transpose { a } => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_blocks(g, r, c);
                self.accumulate(grads, *a, |ga| add_into(ga, &back));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                let width = self.value(*b).numel();
                self.accumulate(grads, *b, |gb| {
                    for chunk in g.chunks(width) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let width = da.len() / db.len();
                self.accumulate(grads, *a, |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * db[i / width];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, (&gi, &ai)) in g.iter().zip(da).enumerate() {
                        gb[i / width] += gi * ai;
                    }
                });
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * factor)
                });
            }
            Op::Exp { a } => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i];
                    }
                });
            }
            Op::Recip { a } => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] -= g[i] * y[i] * y[i];
                    }
                });
            }
            Op::Relu { a } => {
                let x = self.data(*a);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let w = node.value.last_dim();
                self.accumulate(grads, *a, |ga| {
                    for ((gr, yr), gar) in g.chunks(w).zip(y.chunks(w)).zip(ga.chunks_mut(w)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..w {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.data(*gamma);
                let d = gam.len();
                self.accumulate(grads, *x, |gx| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let dxhat: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += is * (dxhat[j] - m1 - xr[j] * m2);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SegmentSum { x, groups } => {
                let s = self.shape(*x);
                let (n, d) = (s[1], s[2]);
                let gcount = node.value.shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for b in 0..groups.batch() {
                        for (p, &gi) in groups.row(b).iter().enumerate() {
                            let o = (b * gcount + gi) * d;
                            add_into(&mut gx[(b * n + p) * d..(b * n + p + 1) * d], &g[o..o + d]);
                        }
                    }
                });
            }
            Op::SegmentMax { x, argmax } => {
                self.accumulate(grads, *x, |gx| {
                    for (o, src) in argmax.iter().enumerate() {
                        if let Some(s) = src {
                            gx[*s] += g[o];
                        }
                    }
                });
            }
            Op::GatherSegments { x, groups } => {
                let s = self.shape(*x);
                let (gcount, d) = (s[1], s[2]);
                let n = groups.seq_len();
                self.accumulate(grads, *x, |gx| {
                    for b in 0..groups.batch() {
                        for (p, &gi) in groups.row(b).iter().enumerate() {
                            let o = (b * gcount + gi) * d;
                            add_into(&mut gx[o..o + d], &g[(b * n + p) * d..(b * n + p + 1) * d]);
                        }
                    }
                });
            }
            Op::Concat { inputs } => {
                let total = node.value.last_dim();
                let rows = g.len() / total;
                let mut offset = 0;
                for v in inputs {
                    let w = self.value(*v).last_dim();
                    self.accumulate(grads, *v, |gv| {
                        for r in 0..rows {
                            add_into(
                                &mut gv[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::SplitHeads { a, heads } => {
                let s = self.shape(*a);
                let (b, n, d) = (s[0], s[1], s[2]);
                let dk = d / heads;
                self.accumulate(grads, *a, |ga| {
                    for bi in 0..b {
                        for i in 0..n {
                            for h in 0..*heads {
                                let s = (bi * n + i) * d + h * dk;
                                let o = ((bi * heads + h) * n + i) * dk;
                                add_into(&mut ga[s..s + dk], &g[o..o + dk]);
                            }
                        }
                    }
                });
            }
            Op::JoinHeads { a, heads } => {
                let s = self.shape(*a);
                let (bh, n, dk) = (s[0], s[1], s[2]);
                let d = dk * heads;
                self.accumulate(grads, *a, |ga| {
                    for bi in 0..bh / heads {
                        for i in 0..n {
                            for h in 0..*heads {
                                let o = (bi * n + i) * d + h * dk;
                                let s = ((bi * heads + h) * n + i) * dk;
                                add_into(&mut ga[s..s + dk], &g[o..o + dk]);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let count = targets.iter().flatten().count();
                if count == 0 {
                    return Ok(());
                }
                let c = self.value(*logits).last_dim();
                let scale = g[0] / count as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..c {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                });
            }
            Op::MaskedFill { a, mask } => {
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        if !mask[i] {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::SelectPosition { a, pos } => {
                let s = self.shape(*a);
                let (n, d) = (s[1], s[2]);
                self.accumulate(grads, *a, |ga| {
                    for (bi, gr) in g.chunks(d).enumerate() {
                        let o = (bi * n + pos) * d;
                        add_into(&mut ga[o..o + d], gr);
                    }
                });
            }
            Op::Reshape { a } => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::Sum { a } => {
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Merge { x, w, cache } => {
                let mg = cache.backward(g)?;
                self.accumulate(grads, *x, |gx| add_into(gx, &mg.grad_x));
                if let (Some(w), Some(gw)) = (w, mg.grad_w) {
                    self.accumulate(grads, *w, |gwv| add_into(gwv, &gw));
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Transpose every trailing `r x c` block.
fn transpose_blocks(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let block = r * c;
    let mut out = vec![0.0; src.len()];
    for (sb, ob) in src.chunks(block).zip(out.chunks_mut(block)) {
        for i in 0..r {
            for j in 0..c {
                ob[j * r + i] = sb[i * c + j];
            }
        }
    }
    out
}
