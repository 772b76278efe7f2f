//! Define-by-run reverse-mode tape.
//!
//! A tape is rebuilt per forward pass because the graph topology changes with
//! every question subgraph. Parameters enter as leaf nodes snapshotted from a
//! `ParamStore`; `backward` replays the records in reverse and returns
//! per-parameter gradients. Every forward op checks its output for NaN/Inf.
//!
//! Node reductions that must be invariant to graph relabeling (softmax
//! normalizers, seed pooling) accumulate in value-sorted order via
//! `stable_sum`.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::{mm_nn, mm_nt, mm_tn, mv, mv_t, stable_sum, Tensor};
use crate::rng::DetRng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatmulNN { a: usize, b: usize },
    MatmulNT { a: usize, b: usize },
    MatVec { a: usize, x: usize },
    VecMat { x: usize, a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Hadamard { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    Sigmoid { a: usize },
    Tanh { a: usize },
    ConcatCols { parts: Vec<usize> },
    ConcatVec { parts: Vec<usize> },
    StackRows { parts: Vec<usize> },
    Row { a: usize, idx: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    GatherElems { a: usize, idx: Vec<usize> },
    ScatterSum { a: usize, dst: Vec<usize> },
    ScaleRows { a: usize, v: usize },
    ScaleCols { a: usize, v: usize },
    SumAll { a: usize },
    SumRowsStable { a: usize },
    MaskedSoftmax { a: usize, mask: Vec<bool> },
    KlDivToTarget { scores: usize, mask: Vec<bool>, target: Vec<f64>, probs: Vec<f64> },
    Dropout { a: usize, mult: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, usize)>,
    param_cache: HashMap<usize, usize>,
    rng: DetRng,
    training: bool,
}

impl Tape {
    /// `seed` drives dropout masks; `training` enables them.
    pub fn new(seed: u64, training: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            param_cache: HashMap::new(),
            rng: DetRng::seed_from_u64(seed),
            training,
        }
    }

    pub fn inference() -> Self {
        Tape::new(0, false)
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Ok(NodeId(id))
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.push("constant", value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(Tensor::scalar(v))
    }

    pub fn constant_vector(&mut self, v: Vec<f64>) -> Result<NodeId> {
        self.constant(Tensor::vector(v))
    }

    /// Snapshot a parameter onto the tape. Repeated calls for the same
    /// parameter return the same leaf so gradients accumulate once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<NodeId> {
        if let Some(&node) = self.param_cache.get(&id.index()) {
            return Ok(NodeId(node));
        }
        let node = self.push("param", store.get(id).clone(), Op::Leaf)?;
        self.param_cache.insert(id.index(), node.0);
        self.param_nodes.push((id, node.0));
        Ok(node)
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// C = A @ B  (m×k by k×n)
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                detail: format!("{:?} by {:?}", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut c = vec![0.0; m * n];
        mm_nn(ta.data(), tb.data(), &mut c, m, k, n);
        self.push("matmul", Tensor::matrix(m, n, c)?, Op::MatmulNN { a: a.0, b: b.0 })
    }

    /// C = A @ B^T  (m×k by n×k). Used to apply weight matrices stored in
    /// their (out, in) math shape to row-major activations.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols() {
            return Err(Error::Dimension {
                op: "matmul_nt",
                detail: format!("{:?} by {:?}^T", ta.shape(), tb.shape()),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut c = vec![0.0; m * n];
        mm_nt(ta.data(), tb.data(), &mut c, m, k, n);
        self.push("matmul_nt", Tensor::matrix(m, n, c)?, Op::MatmulNT { a: a.0, b: b.0 })
    }

    /// y = A @ x  (m×k by k)
    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        let (ta, tx) = (&self.nodes[a.0].value, &self.nodes[x.0].value);
        if !ta.is_matrix() || !tx.is_vector() || ta.cols() != tx.numel() {
            return Err(Error::Dimension {
                op: "matvec",
                detail: format!("{:?} by {:?}", ta.shape(), tx.shape()),
            });
        }
        let (m, k) = (ta.rows(), ta.cols());
        let mut y = vec![0.0; m];
        mv(ta.data(), tx.data(), &mut y, m, k);
        self.push("matvec", Tensor::vector(y), Op::MatVec { a: a.0, x: x.0 })
    }

    /// y = x^T @ A  (m by m×k) -> k
    pub fn vecmat(&mut self, x: NodeId, a: NodeId) -> Result<NodeId> {
        let (tx, ta) = (&self.nodes[x.0].value, &self.nodes[a.0].value);
        if !tx.is_vector() || !ta.is_matrix() || tx.numel() != ta.rows() {
            return Err(Error::Dimension {
                op: "vecmat",
                detail: format!("{:?} by {:?}", tx.shape(), ta.shape()),
            });
        }
        let (m, k) = (ta.rows(), ta.cols());
        let mut y = vec![0.0; k];
        mv_t(ta.data(), tx.data(), &mut y, m, k);
        self.push("vecmat", Tensor::vector(y), Op::VecMat { x: x.0, a: a.0 })
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension {
                op: op_name,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data().iter()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        self.push(op_name, Tensor::new(shape, data)?, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    /// Elementwise product.
    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("hadamard", a, b, |x, y| x * y, Op::Hadamard { a: a.0, b: b.0 })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| x * c).collect();
        let shape = ta.shape().to_vec();
        self.push("scale", Tensor::new(shape, data)?, Op::Scale { a: a.0, c })
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| f(x)).collect();
        let shape = ta.shape().to_vec();
        self.push(op_name, Tensor::new(shape, data)?, op)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(
            "sigmoid",
            a,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid { a: a.0 },
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary("tanh", a, f64::tanh, Op::Tanh { a: a.0 })
    }

    // ── Concatenation and stacking ───────────────────────────────────

    /// Column-wise concatenation of matrices sharing a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dimension { op: "concat_cols", detail: "no parts".into() });
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut total_cols = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if !t.is_matrix() || t.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    detail: format!("part shape {:?}, expected {} rows", t.shape(), rows),
                });
            }
            total_cols += t.cols();
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut col_off = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            let c = t.cols();
            for r in 0..rows {
                data[r * total_cols + col_off..r * total_cols + col_off + c]
                    .copy_from_slice(t.row(r));
            }
            col_off += c;
        }
        self.push(
            "concat_cols",
            Tensor::matrix(rows, total_cols, data)?,
            Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() },
        )
    }

    /// Concatenate vectors into one long vector.
    pub fn concat_vec(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dimension { op: "concat_vec", detail: "no parts".into() });
        }
        let mut data = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if !t.is_vector() {
                return Err(Error::Dimension {
                    op: "concat_vec",
                    detail: format!("part shape {:?}", t.shape()),
                });
            }
            data.extend_from_slice(t.data());
        }
        self.push(
            "concat_vec",
            Tensor::vector(data),
            Op::ConcatVec { parts: parts.iter().map(|p| p.0).collect() },
        )
    }

    /// Stack equal-length vectors as matrix rows.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Dimension { op: "stack_rows", detail: "no parts".into() });
        }
        let d = self.nodes[parts[0].0].value.numel();
        let mut data = Vec::with_capacity(parts.len() * d);
        for p in parts {
            let t = &self.nodes[p.0].value;
            if !t.is_vector() || t.numel() != d {
                return Err(Error::Dimension {
                    op: "stack_rows",
                    detail: format!("part shape {:?}, expected length {}", t.shape(), d),
                });
            }
            data.extend_from_slice(t.data());
        }
        self.push(
            "stack_rows",
            Tensor::matrix(parts.len(), d, data)?,
            Op::StackRows { parts: parts.iter().map(|p| p.0).collect() },
        )
    }

    /// Extract one matrix row as a vector.
    pub fn row(&mut self, a: NodeId, idx: usize) -> Result<NodeId> {
        let t = &self.nodes[a.0].value;
        if !t.is_matrix() {
            return Err(Error::Dimension { op: "row", detail: format!("{:?}", t.shape()) });
        }
        if idx >= t.rows() {
            return Err(Error::Bounds { op: "row", index: idx, bound: t.rows() });
        }
        let data = t.row(idx).to_vec();
        self.push("row", Tensor::vector(data), Op::Row { a: a.0, idx })
    }

    // ── Gather / scatter ─────────────────────────────────────────────

    /// Select matrix rows by index; duplicates allowed.
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[a.0].value;
        if !t.is_matrix() {
            return Err(Error::Dimension { op: "gather_rows", detail: format!("{:?}", t.shape()) });
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Bounds { op: "gather_rows", index: i, bound: rows });
            }
            data.extend_from_slice(t.row(i));
        }
        self.push(
            "gather_rows",
            Tensor::matrix(idx.len(), cols, data)?,
            Op::GatherRows { a: a.0, idx: idx.to_vec() },
        )
    }

    /// Select vector elements by index; duplicates allowed.
    pub fn gather_elems(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[a.0].value;
        if !t.is_vector() {
            return Err(Error::Dimension { op: "gather_elems", detail: format!("{:?}", t.shape()) });
        }
        let n = t.numel();
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= n {
                return Err(Error::Bounds { op: "gather_elems", index: i, bound: n });
            }
            data.push(t.data()[i]);
        }
        self.push(
            "gather_elems",
            Tensor::vector(data),
            Op::GatherElems { a: a.0, idx: idx.to_vec() },
        )
    }

    /// Sum edge rows into destination node rows: out[v] = Σ_{e: dst[e]=v} a[e].
    /// Rows with no incoming edges stay zero. Accumulation follows edge-list
    /// order, which is what keeps relabeled graphs bit-identical.
    pub fn scatter_sum(&mut self, a: NodeId, dst: &[usize], n: usize) -> Result<NodeId> {
        let t = &self.nodes[a.0].value;
        if !t.is_matrix() || t.rows() != dst.len() {
            return Err(Error::Dimension {
                op: "scatter_sum",
                detail: format!("{:?} with {} destinations", t.shape(), dst.len()),
            });
        }
        let cols = t.cols();
        let mut data = vec![0.0; n * cols];
        for (e, &v) in dst.iter().enumerate() {
            if v >= n {
                return Err(Error::Bounds { op: "scatter_sum", index: v, bound: n });
            }
            let src = t.row(e);
            let out = &mut data[v * cols..(v + 1) * cols];
            for c in 0..cols {
                out[c] += src[c];
            }
        }
        self.push(
            "scatter_sum",
            Tensor::matrix(n, cols, data)?,
            Op::ScatterSum { a: a.0, dst: dst.to_vec() },
        )
    }

    /// Multiply each matrix row by the matching scalar: out[r] = a[r] * v[r].
    pub fn scale_rows(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (ta, tv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        if !ta.is_matrix() || !tv.is_vector() || ta.rows() != tv.numel() {
            return Err(Error::Dimension {
                op: "scale_rows",
                detail: format!("{:?} rows vs {:?}", ta.shape(), tv.shape()),
            });
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let s = tv.data()[r];
            let src = ta.row(r);
            for c in 0..cols {
                data[r * cols + c] = src[c] * s;
            }
        }
        self.push(
            "scale_rows",
            Tensor::matrix(rows, cols, data)?,
            Op::ScaleRows { a: a.0, v: v.0 },
        )
    }

    /// Multiply each matrix column by the matching vector entry:
    /// out[r][c] = a[r][c] * v[c]. Broadcast of a row vector.
    pub fn scale_cols(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (ta, tv) = (&self.nodes[a.0].value, &self.nodes[v.0].value);
        if !ta.is_matrix() || !tv.is_vector() || ta.cols() != tv.numel() {
            return Err(Error::Dimension {
                op: "scale_cols",
                detail: format!("{:?} cols vs {:?}", ta.shape(), tv.shape()),
            });
        }
        let (rows, cols) = (ta.rows(), ta.cols());
        let vd = tv.data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let src = ta.row(r);
            for c in 0..cols {
                data[r * cols + c] = src[c] * vd[c];
            }
        }
        self.push(
            "scale_cols",
            Tensor::matrix(rows, cols, data)?,
            Op::ScaleCols { a: a.0, v: v.0 },
        )
    }

    // ── Reductions ───────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll { a: a.0 })
    }

    /// Column-wise sum of matrix rows, accumulated in value-sorted order per
    /// column so row permutations cannot change the result bits.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let t = &self.nodes[a.0].value;
        if !t.is_matrix() {
            return Err(Error::Dimension { op: "sum_rows", detail: format!("{:?}", t.shape()) });
        }
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; cols];
        let mut col = vec![0.0; rows];
        for c in 0..cols {
            for r in 0..rows {
                col[r] = t.data()[r * cols + c];
            }
            out[c] = stable_sum(&col);
        }
        self.push("sum_rows", Tensor::vector(out), Op::SumRowsStable { a: a.0 })
    }

    // ── Softmax family ───────────────────────────────────────────────

    /// Probability vector over the unmasked positions; zero where masked.
    /// Max-subtracted for stability; the normalizer uses `stable_sum`.
    pub fn masked_softmax(&mut self, scores: NodeId, mask: &[bool]) -> Result<NodeId> {
        let t = &self.nodes[scores.0].value;
        if !t.is_vector() || t.numel() != mask.len() {
            return Err(Error::Dimension {
                op: "masked_softmax",
                detail: format!("{:?} with mask length {}", t.shape(), mask.len()),
            });
        }
        let probs = masked_softmax_values(t.data(), mask)?;
        self.push(
            "masked_softmax",
            Tensor::vector(probs),
            Op::MaskedSoftmax { a: scores.0, mask: mask.to_vec() },
        )
    }

    /// KL(target ‖ softmax(scores)) over the unmasked support, computed from
    /// logits via log-sum-exp. `target` is data, not a tape node; it must be
    /// zero wherever the mask is false.
    pub fn kl_div_to_target(
        &mut self,
        scores: NodeId,
        mask: &[bool],
        target: &[f64],
    ) -> Result<NodeId> {
        let t = &self.nodes[scores.0].value;
        if !t.is_vector() || t.numel() != mask.len() || target.len() != mask.len() {
            return Err(Error::Dimension {
                op: "kl_div",
                detail: format!(
                    "scores {:?}, mask {}, target {}",
                    t.shape(),
                    mask.len(),
                    target.len()
                ),
            });
        }
        for (i, (&tv, &m)) in target.iter().zip(mask.iter()).enumerate() {
            if !m && tv != 0.0 {
                return Err(Error::Dimension {
                    op: "kl_div",
                    detail: format!("target mass {} at masked position {}", tv, i),
                });
            }
        }
        let s = t.data();
        let max = masked_max(s, mask)?;
        let mut exps = Vec::with_capacity(s.len());
        for i in 0..s.len() {
            if mask[i] {
                exps.push((s[i] - max).exp());
            }
        }
        let z = stable_sum(&exps);
        let lse = max + z.ln();
        let mut probs = vec![0.0; s.len()];
        let mut k = 0;
        for i in 0..s.len() {
            if mask[i] {
                probs[i] = exps[k] / z;
                k += 1;
            }
        }
        let mut loss = 0.0;
        for i in 0..s.len() {
            if target[i] > 0.0 {
                let logp = s[i] - lse;
                loss += target[i] * (target[i].ln() - logp);
            }
        }
        self.push(
            "kl_div",
            Tensor::scalar(loss),
            Op::KlDivToTarget {
                scores: scores.0,
                mask: mask.to_vec(),
                target: target.to_vec(),
                probs,
            },
        )
    }

    // ── Dropout ──────────────────────────────────────────────────────

    /// Inverted dropout with a mask drawn from the tape's seeded RNG.
    /// Identity when the tape is in inference mode or rate is zero.
    pub fn dropout(&mut self, a: NodeId, rate: f64) -> Result<NodeId> {
        if !self.training || rate <= 0.0 {
            return Ok(a);
        }
        assert!(rate < 1.0, "dropout rate must be < 1");
        let keep_scale = 1.0 / (1.0 - rate);
        let n = self.nodes[a.0].value.numel();
        let mult: Vec<f64> = (0..n)
            .map(|_| if self.rng.chance(rate) { 0.0 } else { keep_scale })
            .collect();
        let t = &self.nodes[a.0].value;
        let data: Vec<f64> = t.data().iter().zip(mult.iter()).map(|(&x, &m)| x * m).collect();
        let shape = t.shape().to_vec();
        self.push("dropout", Tensor::new(shape, data)?, Op::Dropout { a: a.0, mult })
    }

    // ── Convenience compositions ─────────────────────────────────────

    /// w @ x + b for vectors.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Returns gradients for every
    /// parameter leaf; parameters the loss never touched read as zero.
    pub fn backward(&mut self, loss: NodeId, store: &ParamStore) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Dimension {
                op: "backward",
                detail: format!("loss shape {:?} is not scalar", self.nodes[loss.0].value.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_op(i, &g, &mut grads);
            // Leaves keep their gradient for parameter collection.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = Gradients::zeros(store);
        for &(pid, node) in &self.param_nodes {
            if let Some(g) = grads[node].take() {
                let shape = self.nodes[node].value.shape().to_vec();
                out.by_param[pid.index()] = Some(Tensor::new(shape, g)?);
            }
        }
        Ok(out)
    }

    fn backward_op(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |j: usize| -> &Tensor { &self.nodes[j].value };
        fn acc(grads: &mut [Option<Vec<f64>>], j: usize, n: usize) -> &mut Vec<f64> {
            grads[j].get_or_insert_with(|| vec![0.0; n])
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatmulNN { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                mm_nt(g, tb.data(), acc(grads, *a, m * k), m, n, k);
                mm_tn(ta.data(), g, acc(grads, *b, k * n), m, k, n);
            }
            Op::MatmulNT { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                mm_nn(g, tb.data(), acc(grads, *a, m * k), m, n, k);
                mm_tn(g, ta.data(), acc(grads, *b, n * k), m, n, k);
            }
            Op::MatVec { a, x } => {
                let (ta, tx) = (val(*a), val(*x));
                let (m, k) = (ta.rows(), ta.cols());
                let da = acc(grads, *a, m * k);
                for r in 0..m {
                    let gr = g[r];
                    if gr != 0.0 {
                        for c in 0..k {
                            da[r * k + c] += gr * tx.data()[c];
                        }
                    }
                }
                mv_t(ta.data(), g, acc(grads, *x, k), m, k);
            }
            Op::VecMat { x, a } => {
                let (tx, ta) = (val(*x), val(*a));
                let (m, k) = (ta.rows(), ta.cols());
                mv(ta.data(), g, acc(grads, *x, m), m, k);
                let da = acc(grads, *a, m * k);
                for r in 0..m {
                    let xr = tx.data()[r];
                    if xr != 0.0 {
                        for c in 0..k {
                            da[r * k + c] += xr * g[c];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let da = acc(grads, *a, g.len());
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
                let db = acc(grads, *b, g.len());
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            Op::Sub { a, b } => {
                let da = acc(grads, *a, g.len());
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv;
                }
                let db = acc(grads, *b, g.len());
                for (d, &gv) in db.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
            Op::Hadamard { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let da = acc(grads, *a, g.len());
                for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(tb.data()) {
                    *d += gv * bv;
                }
                let db = acc(grads, *b, g.len());
                for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ta.data()) {
                    *d += gv * av;
                }
            }
            Op::Scale { a, c } => {
                let da = acc(grads, *a, g.len());
                for (d, &gv) in da.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
            Op::Relu { a } => {
                let y = val(i).data();
                let da = acc(grads, *a, g.len());
                for k in 0..g.len() {
                    if y[k] > 0.0 {
                        da[k] += g[k];
                    }
                }
            }
            Op::Sigmoid { a } => {
                let y = val(i).data();
                let da = acc(grads, *a, g.len());
                for k in 0..g.len() {
                    da[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }
            Op::Tanh { a } => {
                let y = val(i).data();
                let da = acc(grads, *a, g.len());
                for k in 0..g.len() {
                    da[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
            Op::ConcatCols { parts } => {
                let rows = val(i).rows();
                let total = val(i).cols();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).cols();
                    let n = val(p).numel();
                    let dp = acc(grads, p, n);
                    for r in 0..rows {
                        for cc in 0..c {
                            dp[r * c + cc] += g[r * total + off + cc];
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatVec { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    let dp = acc(grads, p, n);
                    for k in 0..n {
                        dp[k] += g[off + k];
                    }
                    off += n;
                }
            }
            Op::StackRows { parts } => {
                let d = val(i).cols();
                for (r, &p) in parts.iter().enumerate() {
                    let dp = acc(grads, p, d);
                    for c in 0..d {
                        dp[c] += g[r * d + c];
                    }
                }
            }
            Op::Row { a, idx } => {
                let n = val(*a).numel();
                let cols = val(*a).cols();
                let da = acc(grads, *a, n);
                for c in 0..g.len() {
                    da[idx * cols + c] += g[c];
                }
            }
            Op::GatherRows { a, idx } => {
                let n = val(*a).numel();
                let cols = val(*a).cols();
                let da = acc(grads, *a, n);
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        da[src * cols + c] += g[r * cols + c];
                    }
                }
            }
            Op::GatherElems { a, idx } => {
                let n = val(*a).numel();
                let da = acc(grads, *a, n);
                for (k, &src) in idx.iter().enumerate() {
                    da[src] += g[k];
                }
            }
            Op::ScatterSum { a, dst } => {
                let cols = val(*a).cols();
                let n = val(*a).numel();
                let da = acc(grads, *a, n);
                for (e, &v) in dst.iter().enumerate() {
                    for c in 0..cols {
                        da[e * cols + c] += g[v * cols + c];
                    }
                }
            }
            Op::ScaleRows { a, v } => {
                let (ta, tv) = (val(*a), val(*v));
                let (rows, cols) = (ta.rows(), ta.cols());
                let da = acc(grads, *a, rows * cols);
                for r in 0..rows {
                    let s = tv.data()[r];
                    for c in 0..cols {
                        da[r * cols + c] += g[r * cols + c] * s;
                    }
                }
                let dv = acc(grads, *v, rows);
                for r in 0..rows {
                    let mut s = 0.0;
                    for c in 0..cols {
                        s += g[r * cols + c] * ta.data()[r * cols + c];
                    }
                    dv[r] += s;
                }
            }
            Op::ScaleCols { a, v } => {
                let (ta, tv) = (val(*a), val(*v));
                let (rows, cols) = (ta.rows(), ta.cols());
                let da = acc(grads, *a, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] += g[r * cols + c] * tv.data()[c];
                    }
                }
                let dv = acc(grads, *v, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        dv[c] += g[r * cols + c] * ta.data()[r * cols + c];
                    }
                }
            }
            Op::SumAll { a } => {
                let n = val(*a).numel();
                let da = acc(grads, *a, n);
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
            Op::SumRowsStable { a } => {
                let (rows, cols) = (val(*a).rows(), val(*a).cols());
                let da = acc(grads, *a, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        da[r * cols + c] += g[c];
                    }
                }
            }
            Op::MaskedSoftmax { a, mask } => {
                let y = val(i).data();
                let mut dot = 0.0;
                for k in 0..y.len() {
                    dot += g[k] * y[k];
                }
                let da = acc(grads, *a, y.len());
                for k in 0..y.len() {
                    if mask[k] {
                        da[k] += y[k] * (g[k] - dot);
                    }
                }
            }
            Op::KlDivToTarget { scores, mask, target, probs } => {
                let n = probs.len();
                let da = acc(grads, *scores, n);
                for k in 0..n {
                    if mask[k] {
                        da[k] += g[0] * (probs[k] - target[k]);
                    }
                }
            }
            Op::Dropout { a, mult } => {
                let da = acc(grads, *a, mult.len());
                for k in 0..mult.len() {
                    da[k] += g[k] * mult[k];
                }
            }
        }
    }
}

fn masked_max(s: &[f64], mask: &[bool]) -> Result<f64> {
    let mut max = f64::NEG_INFINITY;
    for i in 0..s.len() {
        if mask[i] && s[i] > max {
            max = s[i];
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }
    Ok(max)
}

/// Plain-value masked softmax shared by the tape op and non-tape callers.
pub fn masked_softmax_values(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(Error::Dimension {
            op: "masked_softmax",
            detail: format!("{} scores with {} mask entries", scores.len(), mask.len()),
        });
    }
    let max = masked_max(scores, mask)?;
    let mut exps = Vec::with_capacity(scores.len());
    for i in 0..scores.len() {
        if mask[i] {
            exps.push((scores[i] - max).exp());
        }
    }
    let z = stable_sum(&exps);
    let mut out = vec![0.0; scores.len()];
    let mut k = 0;
    for i in 0..scores.len() {
        if mask[i] {
            out[i] = exps[k] / z;
            k += 1;
        }
    }
    Ok(out)
}
