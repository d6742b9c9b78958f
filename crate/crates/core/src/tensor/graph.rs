//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Every value is an `Array2<f64>`; vectors are single-row matrices and token
//! sequences are stored one token per row. Nodes are evaluated eagerly when
//! they are created, so a graph doubles as an inference trace.

use std::collections::BTreeMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Sparse row combination: output row `r` is `sum(w * src[i])` over `rows[r]`.
/// An empty entry produces a zero row.
#[derive(Debug, Clone, Default)]
pub struct RowMix {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn gather(indices: &[usize]) -> Self {
        RowMix {
            rows: indices.iter().map(|&i| vec![(i, 1.0)]).collect(),
        }
    }

    /// Like `gather`, but `None` yields a zero row.
    pub fn gather_opt(indices: &[Option<usize>]) -> Self {
        RowMix {
            rows: indices
                .iter()
                .map(|i| i.map(|i| vec![(i, 1.0)]).unwrap_or_default())
                .collect(),
        }
    }

    /// Each output row is the arithmetic mean of the listed source rows.
    pub fn mean_of(groups: &[Vec<usize>]) -> Self {
        RowMix {
            rows: groups
                .iter()
                .map(|g| {
                    let w = 1.0 / g.len().max(1) as f64;
                    g.iter().map(|&i| (i, w)).collect()
                })
                .collect(),
        }
    }
}

/// Attention support for a grouped softmax: output row `g` attends over the
/// `(score_row, value_row)` entries listed in `groups[g]`. Softmax runs per
/// column (per feature dimension) over the entries of a group.
#[derive(Debug, Clone, Default)]
pub struct Support {
    pub groups: Vec<Vec<(usize, usize)>>,
}

impl Support {
    pub fn n_scores(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// One classification target per logits row; rows with `None` contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct Targets {
    pub rows: Vec<Option<(usize, f64)>>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Rows(NodeId, Rc<RowMix>),
    PairSum(NodeId, NodeId, Rc<Vec<(usize, usize)>>),
    SoftmaxAgg(NodeId, NodeId, Rc<Support>),
    Dropout(NodeId, Rc<Mat>),
    CrossEntropy(NodeId, Rc<Targets>),
}

struct Node {
    value: Mat,
    op: Op,
    /// Softmax weights (SoftmaxAgg) or probabilities (CrossEntropy).
    aux: Option<Mat>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<ParamId, NodeId>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, aux: Option<Mat>) -> NodeId {
        self.nodes.push(Node { value, op, aux });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn aux(&self, id: NodeId) -> Option<&Mat> {
        self.nodes[id.0].aux.as_ref()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, None)
    }

    /// Leaf for a parameter tensor. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(store.value(id).clone(), Op::Leaf, None);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), None)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), None)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), None)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), None)
    }

    /// Adds a single-row bias to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddRow(a, bias), None)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k), None)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a), None)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a), None)
    }

    /// `x W + b`
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// `g * a + (1 - g) * b`, written as `b + g * (a - b)`.
    pub fn blend(&mut self, gate: NodeId, a: NodeId, b: NodeId) -> NodeId {
        let diff = self.sub(a, b);
        let gd = self.mul(gate, diff);
        self.add(b, gd)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()), None)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()), None)
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start), None)
    }

    pub fn rows(&mut self, src: NodeId, mix: Rc<RowMix>) -> NodeId {
        let sv = self.value(src);
        let mut out = Mat::zeros((mix.rows.len(), sv.ncols()));
        for (r, entries) in mix.rows.iter().enumerate() {
            let mut row = out.row_mut(r);
            for &(i, w) in entries {
                row.scaled_add(w, &sv.row(i));
            }
        }
        self.push(out, Op::Rows(src, mix), None)
    }

    /// Row `p` of the output is `q[i] + k[j]` for `pairs[p] = (i, j)`.
    pub fn pair_sum(&mut self, q: NodeId, k: NodeId, pairs: Rc<Vec<(usize, usize)>>) -> NodeId {
        let (qv, kv) = (self.value(q), self.value(k));
        let mut out = Mat::zeros((pairs.len(), qv.ncols()));
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let mut row = out.row_mut(p);
            row.assign(&qv.row(i));
            row += &kv.row(j);
        }
        self.push(out, Op::PairSum(q, k, pairs), None)
    }

    /// Multi-dimensional softmax aggregation. For output row `g` and column
    /// `d`, weights are the softmax over the group's score rows at column `d`
    /// and the output is the weighted sum of the matching value rows.
    pub fn softmax_agg(&mut self, scores: NodeId, values: NodeId, support: Rc<Support>) -> NodeId {
        let (sv, vv) = (self.value(scores), self.value(values));
        let dim = vv.ncols();
        assert_eq!(sv.ncols(), dim, "softmax_agg: score/value widths differ");
        let mut weights = Mat::zeros(sv.raw_dim());
        let mut out = Mat::zeros((support.groups.len(), dim));
        let mut max = vec![0.0; dim];
        let mut denom = vec![0.0; dim];
        for (g, entries) in support.groups.iter().enumerate() {
            if entries.is_empty() {
                continue;
            }
            max.iter_mut().for_each(|m| *m = f64::NEG_INFINITY);
            for &(p, _) in entries {
                for (m, &x) in max.iter_mut().zip(sv.row(p)) {
                    *m = m.max(x);
                }
            }
            denom.iter_mut().for_each(|d| *d = 0.0);
            for &(p, _) in entries {
                let mut wr = weights.row_mut(p);
                for d in 0..dim {
                    let e = (sv[[p, d]] - max[d]).exp();
                    wr[d] = e;
                    denom[d] += e;
                }
            }
            for &(p, v) in entries {
                for d in 0..dim {
                    let a = weights[[p, d]] / denom[d];
                    weights[[p, d]] = a;
                    out[[g, d]] += a * vv[[v, d]];
                }
            }
        }
        self.push(out, Op::SoftmaxAgg(scores, values, support), Some(weights))
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, a: NodeId, mask: Mat) -> NodeId {
        let v = self.value(a) * &mask;
        self.push(v, Op::Dropout(a, Rc::new(mask)), None)
    }

    /// Weighted sum of per-row softmax cross-entropies, as a 1x1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Rc<Targets>) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.rows.len(), "cross_entropy: target count");
        let mut probs = Mat::zeros(lv.raw_dim());
        let mut total = 0.0;
        for (r, t) in targets.rows.iter().enumerate() {
            let row = lv.row(r);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + z.ln();
            let mut pr = probs.row_mut(r);
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            if let Some((class, w)) = *t {
                total += w * (lse - row[class]);
            }
        }
        let v = Mat::from_elem((1, 1), total);
        self.push(v, Op::CrossEntropy(logits, targets), Some(probs))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: NodeId) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Mat::from_elem((1, 1), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, bias) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Sigmoid(a) => {
                    let mut da = g;
                    Zip::from(&mut da)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let mut da = g;
                    Zip::from(&mut da)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= 1.0 - y * y);
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let part = g.slice(s![.., off..off + w]).to_owned();
                        accumulate(&mut grads, p, part);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        let part = g.slice(s![off..off + h, ..]).to_owned();
                        accumulate(&mut grads, p, part);
                        off += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut da = Mat::zeros(self.value(*a).raw_dim());
                    da.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, da);
                }
                Op::Rows(src, mix) => {
                    let mut ds = Mat::zeros(self.value(*src).raw_dim());
                    for (r, entries) in mix.rows.iter().enumerate() {
                        for &(i, w) in entries {
                            ds.row_mut(i).scaled_add(w, &g.row(r));
                        }
                    }
                    accumulate(&mut grads, *src, ds);
                }
                Op::PairSum(q, k, pairs) => {
                    let mut dq = Mat::zeros(self.value(*q).raw_dim());
                    let mut dk = Mat::zeros(self.value(*k).raw_dim());
                    for (p, &(i, j)) in pairs.iter().enumerate() {
                        dq.row_mut(i).scaled_add(1.0, &g.row(p));
                        dk.row_mut(j).scaled_add(1.0, &g.row(p));
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                }
                Op::SoftmaxAgg(scores, values, support) => {
                    let weights = node.aux.as_ref().expect("softmax weights");
                    let vv = self.value(*values);
                    let dim = vv.ncols();
                    let mut ds = Mat::zeros(weights.raw_dim());
                    let mut dv = Mat::zeros(vv.raw_dim());
                    for (grp, entries) in support.groups.iter().enumerate() {
                        for &(p, v) in entries {
                            for d in 0..dim {
                                let a = weights[[p, d]];
                                let go = g[[grp, d]];
                                ds[[p, d]] = a * (vv[[v, d]] - node.value[[grp, d]]) * go;
                                dv[[v, d]] += a * go;
                            }
                        }
                    }
                    accumulate(&mut grads, *scores, ds);
                    accumulate(&mut grads, *values, dv);
                }
                Op::Dropout(a, mask) => accumulate(&mut grads, *a, g * &**mask),
                Op::CrossEntropy(logits, targets) => {
                    let probs = node.aux.as_ref().expect("softmax probabilities");
                    let upstream = g[[0, 0]];
                    let mut dl = Mat::zeros(probs.raw_dim());
                    for (r, t) in targets.rows.iter().enumerate() {
                        if let Some((class, w)) = *t {
                            let mut row = dl.row_mut(r);
                            row.assign(&probs.row(r));
                            row[class] -= 1.0;
                            row *= w * upstream;
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
        Gradients { grads, params: self.param_nodes.clone() }
    }
}

fn accumulate(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
    params: BTreeMap<ParamId, NodeId>,
}

impl Gradients {
    /// Gradient for each parameter that took part in the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Mat)> + '_ {
        self.params.iter().filter_map(|(&pid, &nid)| {
            self.grads[nid.0].as_ref().map(|m| (pid, m))
        })
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat> {
        self.params.get(&id).and_then(|n| self.grads[n.0].as_ref())
    }
}
