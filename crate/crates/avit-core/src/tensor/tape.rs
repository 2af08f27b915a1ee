//! Define-by-run reverse-mode autodiff tape.
//!
//! Each forward pass builds a fresh tape: every operation eagerly computes
//! its value and records what it needs for the backward sweep. Nodes are
//! immutable once created; parameters are staged onto the tape as leaves and
//! `backward` accumulates their gradients back into the owning
//! [`ParamStore`]. Repeated backward calls accumulate (no implicit zeroing).
//!
//! A node propagates gradient only if it `requires_grad`: trainable leaf
//! parameters do, constants do not, interior nodes inherit via OR. Backward
//! work for frozen subtrees is skipped entirely, which is what makes the
//! head-only and adapter-only training stages cheap.

use crate::error::{Error, Result};
use crate::scalar::{sigmoid, softplus, Scalar};
use crate::tensor::linalg::{axpy, col_sum_acc, gemm_acc, transposed};
use crate::tensor::params::{ParamId, ParamStore};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(u32);

impl NodeId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

const SQRT_2PI: f64 = 2.5066282746310002;
const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf {
        param: Option<ParamId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Exp(NodeId),
    Log(NodeId),
    Gelu(NodeId),
    Softplus(NodeId),
    ClampMin(NodeId, T),
    MatMul(NodeId, NodeId),
    /// Batched matmul over leading dim: [B,M,K]·[B,K,N] -> [B,M,N].
    Bmm(NodeId, NodeId),
    Transpose(NodeId),
    /// [B,M,N] -> [B,N,M].
    TransposeLast(NodeId),
    /// x[..., c] + bias[c].
    AddRowBroadcast(NodeId, NodeId),
    /// x: [groups*t, d] + table: [t, d], tiled over groups.
    AddTiled {
        x: NodeId,
        table: NodeId,
        groups: usize,
    },
    /// Prepends `row` before each group of `x`'s rows.
    PrependRow {
        x: NodeId,
        row: NodeId,
        groups: usize,
    },
    GatherRows {
        x: NodeId,
        idx: Vec<usize>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    SoftmaxLast(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    ReduceSum(NodeId),
    ReduceMean(NodeId),
    /// out[r] = x[r, idx[r]].
    SelectPerRow {
        x: NodeId,
        idx: Vec<usize>,
    },
    /// Rowwise cosine similarity; zero-norm rows yield 0 with zero gradient.
    RowCosine(NodeId, NodeId),
    /// out[s,t,d] = x[s,t,d]*(1+alpha[s,d]) + beta[s,d].
    FwtModulate {
        x: NodeId,
        alpha: NodeId,
        beta: NodeId,
    },
    /// [s*t, h*c] -> [s*h, t, c].
    SplitHeads {
        x: NodeId,
        samples: usize,
        heads: usize,
    },
    /// [s*h, t, c] -> [s*t, h*c].
    MergeHeads {
        x: NodeId,
        samples: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: NodeId) -> &[T] {
        &self.nodes[id.index()].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.index()].shape
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> Result<T> {
        let n = &self.nodes[id.index()];
        if n.values.len() != 1 {
            return Err(Error::usage(format!(
                "expected scalar node, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.values[0])
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            shape,
            values,
            requires_grad,
            op,
        });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    // ---- leaves ----

    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Result<NodeId> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::usage(format!(
                "constant: shape {:?} does not describe {} values",
                shape,
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values, false, Op::Leaf { param: None }))
    }

    pub fn scalar_constant(&mut self, v: T) -> NodeId {
        self.push(vec![1], vec![v], false, Op::Leaf { param: None })
    }

    /// Stages a stored parameter onto the tape. Gradient flows back to the
    /// store only if the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.push(
            p.shape.clone(),
            p.values.clone(),
            p.trainable,
            Op::Leaf { param: Some(id) },
        )
    }

    // ---- elementwise ----

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), values, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let values = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), values, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let values = self.values(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), values, rg, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let values = self.values(a).iter().map(|&x| x.exp()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), values, rg, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let values = self.values(a).iter().map(|&x| x.ln()).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), values, rg, Op::Log(a))
    }

    /// 0.5·x·(1+erf(x/√2)).
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let values = self
            .values(a)
            .iter()
            .map(|&x| half * x * (T::one() + (x * inv_sqrt2).erf()))
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), values, rg, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let values = self.values(a).iter().map(|&x| softplus(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), values, rg, Op::Softplus(a))
    }

    pub fn clamp_min(&mut self, a: NodeId, c: T) -> NodeId {
        let values = self
            .values(a)
            .iter()
            .map(|&x| if x < c { c } else { x })
            .collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), values, rg, Op::ClampMin(a, c))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut values = vec![T::zero(); m * n];
        gemm_acc(self.values(a), self.values(b), &mut values, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], values, rg, Op::MatMul(a, b)))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut values = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            gemm_acc(
                &self.values(a)[i * m * k..(i + 1) * m * k],
                &self.values(b)[i * k * n..(i + 1) * k * n],
                &mut values[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![bs, m, n], values, rg, Op::Bmm(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::usage(format!("transpose expects 2-d, got {sa:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let values = transposed(self.values(a), r, c);
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], values, rg, Op::Transpose(a)))
    }

    pub fn transpose_last(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.len() != 3 {
            return Err(Error::usage(format!(
                "transpose_last expects 3-d, got {sa:?}"
            )));
        }
        let (bs, m, n) = (sa[0], sa[1], sa[2]);
        let mut values = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            crate::tensor::linalg::transpose_into(
                &self.values(a)[i * m * n..(i + 1) * m * n],
                m,
                n,
                &mut values[i * m * n..(i + 1) * m * n],
            );
        }
        let rg = self.rg(a);
        Ok(self.push(vec![bs, n, m], values, rg, Op::TransposeLast(a)))
    }

    /// Adds `bias` (length c) to every length-c row of `x`.
    pub fn add_row_broadcast(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let c = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != c {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.values(bias).to_vec();
        let values = self
            .values(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(&bv).map(|(&v, &b)| v + b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(
            sx.to_vec(),
            values,
            rg,
            Op::AddRowBroadcast(x, bias),
        ))
    }

    /// x: [groups*t, d], table: [t, d]; adds the table to each group.
    pub fn add_tiled(&mut self, x: NodeId, table: NodeId, groups: usize) -> Result<NodeId> {
        let (sx, st) = (self.shape(x), self.shape(table));
        if sx.len() != 2 || st.len() != 2 || sx[1] != st[1] || sx[0] != groups * st[0] {
            return Err(Error::ShapeMismatch {
                op: "add_tiled",
                lhs: sx.to_vec(),
                rhs: st.to_vec(),
            });
        }
        let tlen = st[0] * st[1];
        let tv = self.values(table).to_vec();
        let values = self
            .values(x)
            .chunks(tlen)
            .flat_map(|chunk| chunk.iter().zip(&tv).map(|(&v, &t)| v + t))
            .collect();
        let rg = self.rg(x) || self.rg(table);
        Ok(self.push(sx.to_vec(), values, rg, Op::AddTiled { x, table, groups }))
    }

    /// Inserts `row` (length d) before each of the `groups` row-blocks of `x`.
    pub fn prepend_row(&mut self, x: NodeId, row: NodeId, groups: usize) -> Result<NodeId> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sx.len() != 2 || sr.len() != 1 || sr[0] != sx[1] || sx[0] % groups != 0 {
            return Err(Error::ShapeMismatch {
                op: "prepend_row",
                lhs: sx.to_vec(),
                rhs: sr.to_vec(),
            });
        }
        let d = sx[1];
        let per = sx[0] / groups;
        let mut values = Vec::with_capacity((sx[0] + groups) * d);
        let rv = self.values(row).to_vec();
        for g in 0..groups {
            values.extend_from_slice(&rv);
            values.extend_from_slice(&self.values(x)[g * per * d..(g + 1) * per * d]);
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(
            vec![sx[0] + groups, d],
            values,
            rg,
            Op::PrependRow { x, row, groups },
        ))
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return Err(Error::usage(format!("gather_rows expects 2-d, got {sx:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::usage(format!(
                "gather_rows: row {bad} out of range ({r} rows)"
            )));
        }
        let mut values = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            values.extend_from_slice(&self.values(x)[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![idx.len(), c],
            values,
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 2 || start + len > sx[0] {
            return Err(Error::usage(format!(
                "slice_rows: rows {start}..{} out of range for {sx:?}",
                start + len
            )));
        }
        let c = sx[1];
        let values = self.values(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(vec![len, c], values, rg, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::usage("concat_rows: empty part list".to_string()));
        }
        let c = match self.shape(parts[0]) {
            [_, c] => *c,
            s => return Err(Error::usage(format!("concat_rows expects 2-d, got {s:?}"))),
        };
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[1] != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: sp.to_vec(),
                });
            }
            rows += sp[0];
            values.extend_from_slice(self.values(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], values, rg, Op::ConcatRows(parts.to_vec())))
    }

    // ---- normalization / reductions ----

    /// Stable softmax over the last dimension.
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        if sa.is_empty() {
            return Err(Error::usage("softmax_last on scalar".to_string()));
        }
        let c = *sa.last().unwrap();
        let mut values = Vec::with_capacity(self.values(a).len());
        for row in self.values(a).chunks(c) {
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&x| (x - m).exp()).collect();
            let s: T = exps.iter().cloned().sum();
            values.extend(exps.into_iter().map(|e| e / s));
        }
        let rg = self.rg(a);
        Ok(self.push(sa.to_vec(), values, rg, Op::SoftmaxLast(a)))
    }

    /// Per-row normalization over the last dim, then affine by gamma/beta.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        let d = *sx.last().unwrap_or(&0);
        if sg != [d] || sb != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: sx.to_vec(),
                rhs: sg.to_vec(),
            });
        }
        let rows = self.values(x).len() / d;
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut values = Vec::with_capacity(rows * d);
        let gv = self.values(gamma).to_vec();
        let bv = self.values(beta).to_vec();
        for row in self.values(x).chunks(d) {
            let mu: T = row.iter().cloned().sum::<T>() * inv_d;
            let var: T = row
                .iter()
                .map(|&v| {
                    let dvi = v - mu;
                    dvi * dvi
                })
                .sum::<T>()
                * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            mean.push(mu);
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                values.push((v - mu) * rs * gv[j] + bv[j]);
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            sx.to_vec(),
            values,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        ))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        let s: T = self.values(a).iter().cloned().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], rg, Op::ReduceSum(a))
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> NodeId {
        let n = self.values(a).len().max(1);
        let s: T = self.values(a).iter().cloned().sum();
        let rg = self.rg(a);
        self.push(
            vec![1],
            vec![s / T::from_f64(n as f64)],
            rg,
            Op::ReduceMean(a),
        )
    }

    pub fn select_per_row(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] != idx.len() {
            return Err(Error::usage(format!(
                "select_per_row: {} indices for shape {sx:?}",
                idx.len()
            )));
        }
        let c = sx[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::usage(format!(
                "select_per_row: column {bad} out of range ({c} columns)"
            )));
        }
        let values = idx
            .iter()
            .enumerate()
            .map(|(r, &i)| self.values(x)[r * c + i])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            vec![idx.len()],
            values,
            rg,
            Op::SelectPerRow {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Rowwise cosine similarity between equal-shape 2-d tensors.
    /// Rows with (near-)zero norm contribute 0 with zero gradient.
    pub fn row_cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("row_cosine", a, b)?;
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::usage(format!("row_cosine expects 2-d, got {sa:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let tiny = T::from_f64(1e-30);
        let mut values = Vec::with_capacity(r);
        for i in 0..r {
            let ra = &self.values(a)[i * c..(i + 1) * c];
            let rb = &self.values(b)[i * c..(i + 1) * c];
            let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
            for (&x, &y) in ra.iter().zip(rb) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            let denom = na.sqrt() * nb.sqrt();
            values.push(if denom < tiny { T::zero() } else { dot / denom });
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![r], values, rg, Op::RowCosine(a, b)))
    }

    /// Per-sample feature-wise modulation: x[s,t,d]*(1+alpha[s,d]) + beta[s,d]
    /// with x flattened to [s*t, d] and alpha/beta [s, d].
    pub fn fwt_modulate(&mut self, x: NodeId, alpha: NodeId, beta: NodeId) -> Result<NodeId> {
        self.same_shape("fwt_modulate", alpha, beta)?;
        let (sx, sa) = (self.shape(x), self.shape(alpha));
        if sx.len() != 2 || sa.len() != 2 || sx[1] != sa[1] || sx[0] % sa[0] != 0 {
            return Err(Error::ShapeMismatch {
                op: "fwt_modulate",
                lhs: sx.to_vec(),
                rhs: sa.to_vec(),
            });
        }
        let (rows, d) = (sx[0], sx[1]);
        let samples = sa[0];
        let t = rows / samples;
        let mut values = Vec::with_capacity(rows * d);
        for s in 0..samples {
            let arow = &self.values(alpha)[s * d..(s + 1) * d];
            let brow = &self.values(beta)[s * d..(s + 1) * d];
            for ti in 0..t {
                let xrow = &self.values(x)[(s * t + ti) * d..(s * t + ti + 1) * d];
                for j in 0..d {
                    values.push(xrow[j] * (T::one() + arow[j]) + brow[j]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(alpha) || self.rg(beta);
        Ok(self.push(sx.to_vec(), values, rg, Op::FwtModulate { x, alpha, beta }))
    }

    /// [samples*t, heads*c] -> [samples*heads, t, c].
    pub fn split_heads(&mut self, x: NodeId, samples: usize, heads: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 2 || sx[0] % samples != 0 || sx[1] % heads != 0 {
            return Err(Error::usage(format!(
                "split_heads: shape {sx:?} not divisible by samples={samples}, heads={heads}"
            )));
        }
        let t = sx[0] / samples;
        let c = sx[1] / heads;
        let mut values = vec![T::zero(); sx[0] * sx[1]];
        let xv = self.values(x);
        for s in 0..samples {
            for h in 0..heads {
                for ti in 0..t {
                    let src = (s * t + ti) * heads * c + h * c;
                    let dst = ((s * heads + h) * t + ti) * c;
                    values[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![samples * heads, t, c],
            values,
            rg,
            Op::SplitHeads { x, samples, heads },
        ))
    }

    /// [samples*heads, t, c] -> [samples*t, heads*c]. Inverse of `split_heads`.
    pub fn merge_heads(&mut self, x: NodeId, samples: usize) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[0] % samples != 0 {
            return Err(Error::usage(format!(
                "merge_heads: shape {sx:?} not divisible by samples={samples}"
            )));
        }
        let heads = sx[0] / samples;
        let (t, c) = (sx[1], sx[2]);
        let mut values = vec![T::zero(); sx[0] * t * c];
        let xv = self.values(x);
        for s in 0..samples {
            for h in 0..heads {
                for ti in 0..t {
                    let src = ((s * heads + h) * t + ti) * c;
                    let dst = (s * t + ti) * heads * c + h * c;
                    values[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![samples * t, heads * c],
            values,
            rg,
            Op::MergeHeads { x, samples },
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients of trainable parameter
    /// leaves accumulate into `store` (repeated calls keep accumulating).
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore<T>) -> Result<()> {
        let ln = &self.nodes[loss.index()];
        if ln.values.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.index()] = Some(vec![T::one()]);

        for nid in (0..=loss.index()).rev() {
            if grads[nid].is_none() || !self.nodes[nid].requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(nid);
            let g = upper[0].as_ref().expect("grad present").clone();
            // `lower` holds grads of all potential parents (parents precede
            // children in tape order).
            self.accumulate_parents(nid, &g, lower);
        }

        for (nid, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if node.requires_grad {
                    if let Some(g) = &grads[nid] {
                        store.accumulate_grad(pid, g);
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate_parents(&self, nid: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[nid];
        // Grad buffer of a parent, zero-allocated on first touch. Parents
        // that don't require grad are skipped by callers.
        macro_rules! gbuf {
            ($id:expr) => {
                grads[$id.index()]
                    .get_or_insert_with(|| vec![T::zero(); self.nodes[$id.index()].values.len()])
            };
        }
        macro_rules! needs {
            ($id:expr) => {
                self.nodes[$id.index()].requires_grad
            };
        }

        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) => {
                if needs!(a) {
                    axpy(T::one(), g, gbuf!(a));
                }
                if needs!(b) {
                    axpy(T::one(), g, gbuf!(b));
                }
            }
            Op::Mul(a, b) => {
                if needs!(a) {
                    let bv = &self.nodes[b.index()].values;
                    let ga = gbuf!(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if needs!(b) {
                    let av = &self.nodes[a.index()].values;
                    let gb = gbuf!(b);
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs!(a) {
                    axpy(*c, g, gbuf!(a));
                }
            }
            Op::Exp(a) => {
                if needs!(a) {
                    let yv = &node.values;
                    let ga = gbuf!(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * yv[i];
                    }
                }
            }
            Op::Log(a) => {
                if needs!(a) {
                    let xv = &self.nodes[a.index()].values;
                    let ga = gbuf!(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] / xv[i];
                    }
                }
            }
            Op::Gelu(a) => {
                if needs!(a) {
                    let half = T::from_f64(0.5);
                    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt2pi = T::from_f64(1.0 / SQRT_2PI);
                    let xv = &self.nodes[a.index()].values;
                    let ga = gbuf!(a);
                    for i in 0..g.len() {
                        let x = xv[i];
                        let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                        let pdf = (-(x * x) * half).exp() * inv_sqrt2pi;
                        ga[i] += g[i] * (cdf + x * pdf);
                    }
                }
            }
            Op::Softplus(a) => {
                if needs!(a) {
                    let xv = &self.nodes[a.index()].values;
                    let ga = gbuf!(a);
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(xv[i]);
                    }
                }
            }
            Op::ClampMin(a, c) => {
                if needs!(a) {
                    let xv = &self.nodes[a.index()].values;
                    let ga = gbuf!(a);
                    for i in 0..g.len() {
                        if xv[i] > *c {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = {
                    let sa = &self.nodes[a.index()].shape;
                    (sa[0], sa[1])
                };
                let n = self.nodes[b.index()].shape[1];
                if needs!(a) {
                    // dA += G · Bᵀ
                    let bt = transposed(&self.nodes[b.index()].values, k, n);
                    gemm_acc(g, &bt, gbuf!(a), m, n, k);
                }
                if needs!(b) {
                    // dB += Aᵀ · G
                    let at = transposed(&self.nodes[a.index()].values, m, k);
                    gemm_acc(&at, g, gbuf!(b), k, m, n);
                }
            }
            Op::Bmm(a, b) => {
                let (bs, m, k) = {
                    let sa = &self.nodes[a.index()].shape;
                    (sa[0], sa[1], sa[2])
                };
                let n = self.nodes[b.index()].shape[2];
                if needs!(a) {
                    let bv = &self.nodes[b.index()].values;
                    let ga = gbuf!(a);
                    for i in 0..bs {
                        let bt = transposed(&bv[i * k * n..(i + 1) * k * n], k, n);
                        gemm_acc(
                            &g[i * m * n..(i + 1) * m * n],
                            &bt,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if needs!(b) {
                    let av = &self.nodes[a.index()].values;
                    let gb = gbuf!(b);
                    for i in 0..bs {
                        let at = transposed(&av[i * m * k..(i + 1) * m * k], m, k);
                        gemm_acc(
                            &at,
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
            }
            Op::Transpose(a) => {
                if needs!(a) {
                    let (c, r) = (node.shape[0], node.shape[1]);
                    let gt = transposed(g, c, r);
                    axpy(T::one(), &gt, gbuf!(a));
                }
            }
            Op::TransposeLast(a) => {
                if needs!(a) {
                    let (bs, n, m) = (node.shape[0], node.shape[1], node.shape[2]);
                    let ga = gbuf!(a);
                    for i in 0..bs {
                        let gt = transposed(&g[i * m * n..(i + 1) * m * n], n, m);
                        axpy(T::one(), &gt, &mut ga[i * m * n..(i + 1) * m * n]);
                    }
                }
            }
            Op::AddRowBroadcast(x, bias) => {
                if needs!(x) {
                    axpy(T::one(), g, gbuf!(x));
                }
                if needs!(bias) {
                    let c = self.nodes[bias.index()].values.len();
                    col_sum_acc(g, gbuf!(bias), g.len() / c, c);
                }
            }
            Op::AddTiled { x, table, groups } => {
                if needs!(x) {
                    axpy(T::one(), g, gbuf!(x));
                }
                if needs!(table) {
                    let tlen = self.nodes[table.index()].values.len();
                    let gt = gbuf!(table);
                    for gi in 0..*groups {
                        axpy(T::one(), &g[gi * tlen..(gi + 1) * tlen], gt);
                    }
                }
            }
            Op::PrependRow { x, row, groups } => {
                let d = node.shape[1];
                let per_out = node.shape[0] / groups;
                if needs!(x) {
                    let gx = gbuf!(x);
                    for gi in 0..*groups {
                        let src = (gi * per_out + 1) * d;
                        let dst = gi * (per_out - 1) * d;
                        axpy(
                            T::one(),
                            &g[src..src + (per_out - 1) * d],
                            &mut gx[dst..dst + (per_out - 1) * d],
                        );
                    }
                }
                if needs!(row) {
                    let gr = gbuf!(row);
                    for gi in 0..*groups {
                        let src = gi * per_out * d;
                        axpy(T::one(), &g[src..src + d], gr);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if needs!(x) {
                    let c = node.shape[1];
                    let gx = gbuf!(x);
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(T::one(), &g[r * c..(r + 1) * c], &mut gx[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if needs!(x) {
                    let c = node.shape[1];
                    let gx = gbuf!(x);
                    axpy(T::one(), g, &mut gx[start * c..start * c + g.len()]);
                }
            }
            Op::ConcatRows(parts) => {
                let c = node.shape[1];
                let mut row = 0;
                for &p in parts {
                    let pr = self.nodes[p.index()].shape[0];
                    if needs!(p) {
                        axpy(T::one(), &g[row * c..(row + pr) * c], gbuf!(p));
                    }
                    row += pr;
                }
            }
            Op::SoftmaxLast(a) => {
                if needs!(a) {
                    let c = *node.shape.last().unwrap();
                    let yv = &node.values;
                    let ga = gbuf!(a);
                    for r in 0..yv.len() / c {
                        let (ys, gs) = (&yv[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: T = ys.iter().zip(gs).map(|(&y, &gg)| y * gg).sum();
                        let gar = &mut ga[r * c..(r + 1) * c];
                        for j in 0..c {
                            gar[j] += ys[j] * (gs[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let rows = node.values.len() / d;
                let inv_d = T::one() / T::from_f64(d as f64);
                let xv = &self.nodes[x.index()].values;
                let gv = &self.nodes[gamma.index()].values;
                for r in 0..rows {
                    let xs = &xv[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    if needs!(x) {
                        // dx = rstd*(gxh - mean(gxh) - xhat*mean(gxh*xhat))
                        let mut sum_gxh = T::zero();
                        let mut sum_gxh_xh = T::zero();
                        for j in 0..d {
                            let xh = (xs[j] - mu) * rs;
                            let gxh = gs[j] * gv[j];
                            sum_gxh += gxh;
                            sum_gxh_xh += gxh * xh;
                        }
                        let m1 = sum_gxh * inv_d;
                        let m2 = sum_gxh_xh * inv_d;
                        let gx = gbuf!(x);
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let xh = (xs[j] - mu) * rs;
                            gxr[j] += rs * (gs[j] * gv[j] - m1 - xh * m2);
                        }
                    }
                    if needs!(gamma) {
                        let gg = gbuf!(gamma);
                        for j in 0..d {
                            gg[j] += gs[j] * (xs[j] - mu) * rs;
                        }
                    }
                    if needs!(beta) {
                        let gb = gbuf!(beta);
                        for j in 0..d {
                            gb[j] += gs[j];
                        }
                    }
                }
            }
            Op::ReduceSum(a) => {
                if needs!(a) {
                    let ga = gbuf!(a);
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::ReduceMean(a) => {
                if needs!(a) {
                    let n = self.nodes[a.index()].values.len().max(1);
                    let s = g[0] / T::from_f64(n as f64);
                    let ga = gbuf!(a);
                    for v in ga.iter_mut() {
                        *v += s;
                    }
                }
            }
            Op::SelectPerRow { x, idx } => {
                if needs!(x) {
                    let c = self.nodes[x.index()].shape[1];
                    let gx = gbuf!(x);
                    for (r, &i) in idx.iter().enumerate() {
                        gx[r * c + i] += g[r];
                    }
                }
            }
            Op::RowCosine(a, b) => {
                let c = self.nodes[a.index()].shape[1];
                let tiny = T::from_f64(1e-30);
                let av = &self.nodes[a.index()].values;
                let bv = &self.nodes[b.index()].values;
                for r in 0..node.values.len() {
                    let ra = &av[r * c..(r + 1) * c];
                    let rb = &bv[r * c..(r + 1) * c];
                    let (mut dot, mut na2, mut nb2) = (T::zero(), T::zero(), T::zero());
                    for (&x, &y) in ra.iter().zip(rb) {
                        dot += x * y;
                        na2 += x * x;
                        nb2 += y * y;
                    }
                    let (na, nb) = (na2.sqrt(), nb2.sqrt());
                    let denom = na * nb;
                    if denom < tiny {
                        continue;
                    }
                    let cos = dot / denom;
                    if needs!(a) {
                        let ga = gbuf!(a);
                        let gar = &mut ga[r * c..(r + 1) * c];
                        for j in 0..c {
                            gar[j] += g[r] * (rb[j] / denom - cos * ra[j] / na2);
                        }
                    }
                    if needs!(b) {
                        let gb = gbuf!(b);
                        let gbr = &mut gb[r * c..(r + 1) * c];
                        for j in 0..c {
                            gbr[j] += g[r] * (ra[j] / denom - cos * rb[j] / nb2);
                        }
                    }
                }
            }
            Op::FwtModulate { x, alpha, beta } => {
                let d = node.shape[1];
                let samples = self.nodes[alpha.index()].shape[0];
                let t = node.shape[0] / samples;
                let xv = &self.nodes[x.index()].values;
                let av = &self.nodes[alpha.index()].values;
                if needs!(x) {
                    let gx = gbuf!(x);
                    for s in 0..samples {
                        let arow = &av[s * d..(s + 1) * d];
                        for ti in 0..t {
                            let base = (s * t + ti) * d;
                            for j in 0..d {
                                gx[base + j] += g[base + j] * (T::one() + arow[j]);
                            }
                        }
                    }
                }
                if needs!(alpha) {
                    let ga = gbuf!(alpha);
                    for s in 0..samples {
                        for ti in 0..t {
                            let base = (s * t + ti) * d;
                            for j in 0..d {
                                ga[s * d + j] += g[base + j] * xv[base + j];
                            }
                        }
                    }
                }
                if needs!(beta) {
                    let gb = gbuf!(beta);
                    for s in 0..samples {
                        for ti in 0..t {
                            let base = (s * t + ti) * d;
                            for j in 0..d {
                                gb[s * d + j] += g[base + j];
                            }
                        }
                    }
                }
            }
            Op::SplitHeads { x, samples, heads } => {
                if needs!(x) {
                    let (t, c) = (node.shape[1], node.shape[2]);
                    let gx = gbuf!(x);
                    for s in 0..*samples {
                        for h in 0..*heads {
                            for ti in 0..t {
                                let src = ((s * heads + h) * t + ti) * c;
                                let dst = (s * t + ti) * heads * c + h * c;
                                axpy(T::one(), &g[src..src + c], &mut gx[dst..dst + c]);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, samples } => {
                if needs!(x) {
                    let sx = &self.nodes[x.index()].shape;
                    let heads = sx[0] / samples;
                    let (t, c) = (sx[1], sx[2]);
                    let gx = gbuf!(x);
                    for s in 0..*samples {
                        for h in 0..heads {
                            for ti in 0..t {
                                let src = (s * t + ti) * heads * c + h * c;
                                let dst = ((s * heads + h) * t + ti) * c;
                                axpy(T::one(), &g[src..src + c], &mut gx[dst..dst + c]);
                            }
                        }
                    }
                }
            }
        }
    }
}
