//! Reverse-mode autodiff over f64 matrices.
//!
//! A [`Tape`] is an append-only arena of nodes. Operations push a node holding
//! the forward value plus enough structure to run the backward rule; because
//! ids only ever point backwards, a single reverse sweep over the arena in
//! descending id order visits nodes in valid topological order.
//!
//! Parameters enter through [`Tape::param`], which binds a [`ParamStore`]
//! entry by name. Binding the same name twice returns the same node, so
//! shared tables (token embeddings used by several heads) accumulate
//! gradients correctly. Frozen parameters get exactly zero gradient.

use std::collections::{BTreeMap, HashMap};

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub id: usize,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(usize, usize),
    /// a (n,k) times b-transpose (m,k) giving (n,m).
    MatmulTB(usize, usize),
    Add(usize, usize),
    /// (n,m) plus a (1,m) row broadcast over all rows.
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    SoftmaxRows(usize),
    LayerNormRows(usize),
    /// Row gather from a table; ids may repeat.
    Embed(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    BroadcastRows(usize),
    Reshape(usize),
    MeanPoolRows(usize),
    SumAll(usize),
    /// Mean over rows of (logsumexp(row) - row[target]).
    CrossEntropyMean(usize, Vec<usize>),
    /// Mean over rows of binary cross-entropy on logits against labels.
    BceLogitsMean(usize, Vec<f64>),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// name -> (node id, frozen)
    bindings: HashMap<String, (usize, bool)>,
}

/// Named parameter gradients extracted after a backward pass.
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.by_name.keys()
    }

    /// Global L2 norm over all stored gradients.
    pub fn global_norm(&self) -> f64 {
        self.by_name
            .values()
            .flat_map(|t| t.data.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_all(&mut self, s: f64) {
        for t in self.by_name.values_mut() {
            for g in &mut t.data {
                *g *= s;
            }
        }
    }
}

/// Numerically strict sigmoid: output stays inside the open interval (0,1)
/// even where f64 arithmetic would round to the endpoints.
pub fn sigmoid_strict(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;
    s.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, data });
        Var { id: self.nodes.len() - 1, rows, cols }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].data
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor { rows: v.rows, cols: v.cols, data: self.nodes[v.id].data.clone() }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert!(v.rows == 1 && v.cols == 1);
        self.nodes[v.id].data[0]
    }

    // ---- inputs ----

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.rows, t.cols, t.data)
    }

    pub fn leaf_row(&mut self, values: &[f64]) -> Var {
        self.leaf(Tensor::row(values))
    }

    pub fn leaf_scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Bind a named parameter. Repeat binds return the original node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&(id, _)) = self.bindings.get(name) {
            let n = &self.nodes[id];
            return Var { id, rows: n.rows, cols: n.cols };
        }
        let p = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let v = self.push(Op::Leaf, p.value.rows, p.value.cols, p.value.data.clone());
        self.bindings.insert(name.to_string(), (v.id, p.frozen));
        v
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul inner dims {}x{} . {}x{}", a.rows, a.cols, b.rows, b.cols);
        let (n, k, m) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0; n * m];
        let da = &self.nodes[a.id].data;
        let db = &self.nodes[b.id].data;
        for i in 0..n {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * m..(p + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push(Op::Matmul(a.id, b.id), n, m, out)
    }

    /// a . transpose(b) where a is (n,k) and b is (m,k).
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.cols, "matmul_tb inner dims");
        let (n, k, m) = (a.rows, a.cols, b.rows);
        let mut out = vec![0.0; n * m];
        let da = &self.nodes[a.id].data;
        let db = &self.nodes[b.id].data;
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += da[i * k + p] * db[j * k + p];
                }
                out[i * m + j] = s;
            }
        }
        self.push(Op::MatmulTB(a.id, b.id), n, m, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shape");
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x + y)
            .collect();
        self.push(Op::Add(a.id, b.id), a.rows, a.cols, data)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        assert_eq!(bias.rows, 1, "bias must be a row");
        assert_eq!(a.cols, bias.cols, "bias width");
        let db = self.nodes[bias.id].data.clone();
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .enumerate()
            .map(|(i, x)| x + db[i % a.cols])
            .collect();
        self.push(Op::AddBias(a.id, bias.id), a.rows, a.cols, data)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "sub shape");
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x - y)
            .collect();
        self.push(Op::Sub(a.id, b.id), a.rows, a.cols, data)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "mul shape");
        let data: Vec<f64> = self.nodes[a.id]
            .data
            .iter()
            .zip(&self.nodes[b.id].data)
            .map(|(x, y)| x * y)
            .collect();
        self.push(Op::Mul(a.id, b.id), a.rows, a.cols, data)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|x| x * c).collect();
        self.push(Op::Scale(a.id, c), a.rows, a.cols, data)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(a.id), a.rows, a.cols, data)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.nodes[a.id].data.iter().map(|&x| sigmoid_strict(x)).collect();
        self.push(Op::Sigmoid(a.id), a.rows, a.cols, data)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.id].data;
        let mut data = vec![0.0; src.len()];
        for r in 0..a.rows {
            let row = &src[r * a.cols..(r + 1) * a.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (i, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                data[r * a.cols + i] = e;
                z += e;
            }
            for v in &mut data[r * a.cols..(r + 1) * a.cols] {
                *v /= z;
            }
        }
        self.push(Op::SoftmaxRows(a.id), a.rows, a.cols, data)
    }

    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        const EPS: f64 = 1e-8;
        let src = &self.nodes[a.id].data;
        let mut data = vec![0.0; src.len()];
        for r in 0..a.rows {
            let row = &src[r * a.cols..(r + 1) * a.cols];
            let mean = row.iter().sum::<f64>() / a.cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / a.cols as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for (i, &x) in row.iter().enumerate() {
                data[r * a.cols + i] = (x - mean) * inv;
            }
        }
        self.push(Op::LayerNormRows(a.id), a.rows, a.cols, data)
    }

    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let d = table.cols;
        let src = &self.nodes[table.id].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < table.rows, "embed id {id} out of range {}", table.rows);
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        self.push(Op::Embed(table.id, ids.to_vec()), ids.len(), d, data)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "concat_cols row mismatch");
        let total: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                let d = &self.nodes[p.id].data;
                data.extend_from_slice(&d[r * p.cols..(r + 1) * p.cols]);
            }
        }
        self.push(Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rows, total, data)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = parts[0].cols;
        assert!(parts.iter().all(|p| p.cols == cols), "concat_rows col mismatch");
        let total: usize = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(total * cols);
        for p in parts {
            data.extend_from_slice(&self.nodes[p.id].data);
        }
        self.push(Op::ConcatRows(parts.iter().map(|p| p.id).collect()), total, cols, data)
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        assert_eq!(a.rows, 1, "broadcast_rows wants a single row");
        let row = self.nodes[a.id].data.clone();
        let mut data = Vec::with_capacity(n * a.cols);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        self.push(Op::BroadcastRows(a.id), n, a.cols, data)
    }

    pub fn flatten_rows(&mut self, a: Var) -> Var {
        self.reshape(a, 1, a.rows * a.cols)
    }

    /// Row-major reshape; the element count must not change.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(a.rows * a.cols, rows * cols, "reshape must conserve elements");
        let data = self.nodes[a.id].data.clone();
        self.push(Op::Reshape(a.id), rows, cols, data)
    }

    pub fn mean_pool_rows(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.id].data;
        let mut data = vec![0.0; a.cols];
        for r in 0..a.rows {
            for c in 0..a.cols {
                data[c] += src[r * a.cols + c];
            }
        }
        for v in &mut data {
            *v /= a.rows as f64;
        }
        self.push(Op::MeanPoolRows(a.id), 1, a.cols, data)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.id].data.iter().sum();
        self.push(Op::SumAll(a.id), 1, 1, vec![s])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = (a.rows * a.cols) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean cross-entropy of logit rows against integer targets.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Var {
        assert_eq!(logits.rows, targets.len(), "one target per row");
        let src = &self.nodes[logits.id].data;
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < logits.cols, "target {t} out of vocab {}", logits.cols);
            let row = &src[r * logits.cols..(r + 1) * logits.cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let mean = total / targets.len() as f64;
        self.push(Op::CrossEntropyMean(logits.id, targets.to_vec()), 1, 1, vec![mean])
    }

    /// Mean binary cross-entropy on a (n,1) logit column against labels.
    pub fn bce_logits_mean(&mut self, logits: Var, labels: &[f64]) -> Var {
        assert_eq!(logits.cols, 1, "bce expects a logit column");
        assert_eq!(logits.rows, labels.len(), "one label per logit");
        let src = &self.nodes[logits.id].data;
        let mut total = 0.0;
        for (&z, &y) in src.iter().zip(labels) {
            // max(z,0) - z*y + ln(1+exp(-|z|)) is the stable form.
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let mean = total / labels.len() as f64;
        self.push(Op::BceLogitsMean(logits.id, labels.to_vec()), 1, 1, vec![mean])
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Returns gradients for every bound
    /// parameter; frozen bindings come back as exact zeros.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(loss.rows == 1 && loss.cols == 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Matmul(a, b) => {
                    let (an, ak) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let bm = self.nodes[*b].cols;
                    let da = &self.nodes[*a].data;
                    let db = &self.nodes[*b].data;
                    let ga = ensure(&mut grads, *a, an * ak);
                    for i in 0..an {
                        for j in 0..bm {
                            let gv = g[i * bm + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..ak {
                                ga[i * ak + p] += gv * db[p * bm + j];
                            }
                        }
                    }
                    let gb = ensure(&mut grads, *b, ak * bm);
                    for i in 0..an {
                        for p in 0..ak {
                            let av = da[i * ak + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..bm {
                                gb[p * bm + j] += av * g[i * bm + j];
                            }
                        }
                    }
                }
                Op::MatmulTB(a, b) => {
                    let (an, ak) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let bm = self.nodes[*b].rows;
                    let da = &self.nodes[*a].data;
                    let db = &self.nodes[*b].data;
                    let ga = ensure(&mut grads, *a, an * ak);
                    for i in 0..an {
                        for j in 0..bm {
                            let gv = g[i * bm + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..ak {
                                ga[i * ak + p] += gv * db[j * ak + p];
                            }
                        }
                    }
                    let gb = ensure(&mut grads, *b, bm * ak);
                    for i in 0..an {
                        for j in 0..bm {
                            let gv = g[i * bm + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..ak {
                                gb[j * ak + p] += gv * da[i * ak + p];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *a, &g);
                    accum(&mut grads, *b, &g);
                }
                Op::AddBias(a, bias) => {
                    accum(&mut grads, *a, &g);
                    let cols = node.cols;
                    let gb = ensure(&mut grads, *bias, cols);
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % cols] += gv;
                    }
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    accum(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let da = self.nodes[*a].data.clone();
                    let db = self.nodes[*b].data.clone();
                    let ga: Vec<f64> = g.iter().zip(&db).map(|(gv, bv)| gv * bv).collect();
                    let gb: Vec<f64> = g.iter().zip(&da).map(|(gv, av)| gv * av).collect();
                    accum(&mut grads, *a, &ga);
                    accum(&mut grads, *b, &gb);
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                    accum(&mut grads, *a, &ga);
                }
                Op::Relu(a) => {
                    let src = &self.nodes[*a].data;
                    let ga: Vec<f64> =
                        g.iter().zip(src).map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 }).collect();
                    accum(&mut grads, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let out = &node.data;
                    let ga: Vec<f64> =
                        g.iter().zip(out).map(|(gv, &s)| gv * s * (1.0 - s)).collect();
                    accum(&mut grads, *a, &ga);
                }
                Op::SoftmaxRows(a) => {
                    let out = &node.data;
                    let cols = node.cols;
                    let mut ga = vec![0.0; out.len()];
                    for r in 0..node.rows {
                        let s = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = s.iter().zip(gr).map(|(sv, gv)| sv * gv).sum();
                        for c in 0..cols {
                            ga[r * cols + c] = s[c] * (gr[c] - dot);
                        }
                    }
                    accum(&mut grads, *a, &ga);
                }
                Op::LayerNormRows(a) => {
                    const EPS: f64 = 1e-8;
                    let src = &self.nodes[*a].data;
                    let cols = node.cols;
                    let nf = cols as f64;
                    let mut ga = vec![0.0; src.len()];
                    for r in 0..node.rows {
                        let x = &src[r * cols..(r + 1) * cols];
                        let y = &node.data[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let mean = x.iter().sum::<f64>() / nf;
                        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                        let inv = 1.0 / (var + EPS).sqrt();
                        let gmean = gr.iter().sum::<f64>() / nf;
                        let gydot = gr.iter().zip(y).map(|(gv, yv)| gv * yv).sum::<f64>() / nf;
                        for c in 0..cols {
                            ga[r * cols + c] = inv * (gr[c] - gmean - y[c] * gydot);
                        }
                    }
                    accum(&mut grads, *a, &ga);
                }
                Op::Embed(table, ids) => {
                    let d = node.cols;
                    let tlen = self.nodes[*table].data.len();
                    let gt = ensure(&mut grads, *table, tlen);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.rows;
                    let mut offset = 0;
                    for pid in parts {
                        let pc = self.nodes[*pid].cols;
                        let mut gp = vec![0.0; rows * pc];
                        for r in 0..rows {
                            let src = &g[r * node.cols + offset..r * node.cols + offset + pc];
                            gp[r * pc..(r + 1) * pc].copy_from_slice(src);
                        }
                        accum(&mut grads, *pid, &gp);
                        offset += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for pid in parts {
                        let pn = self.nodes[*pid].data.len();
                        accum(&mut grads, *pid, &g[offset..offset + pn]);
                        offset += pn;
                    }
                }
                Op::BroadcastRows(a) => {
                    let cols = node.cols;
                    let ga = ensure(&mut grads, *a, cols);
                    for (i, gv) in g.iter().enumerate() {
                        ga[i % cols] += gv;
                    }
                }
                Op::Reshape(a) => {
                    accum(&mut grads, *a, &g);
                }
                Op::MeanPoolRows(a) => {
                    let rows = self.nodes[*a].rows;
                    let cols = node.cols;
                    let ga = ensure(&mut grads, *a, rows * cols);
                    let inv = 1.0 / rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c] * inv;
                        }
                    }
                }
                Op::SumAll(a) => {
                    let n = self.nodes[*a].data.len();
                    let ga = ensure(&mut grads, *a, n);
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                }
                Op::CrossEntropyMean(a, targets) => {
                    let logits = &self.nodes[*a];
                    let cols = logits.cols;
                    let inv = g[0] / targets.len() as f64;
                    let ga = ensure(&mut grads, *a, logits.data.len());
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &logits.data[r * cols..(r + 1) * cols];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                        for c in 0..cols {
                            let p = (row[c] - m).exp() / z;
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            ga[r * cols + c] += inv * (p - onehot);
                        }
                    }
                }
                Op::BceLogitsMean(a, labels) => {
                    let logits = &self.nodes[*a];
                    let inv = g[0] / labels.len() as f64;
                    let ga = ensure(&mut grads, *a, logits.data.len());
                    for (i, (&z, &y)) in logits.data.iter().zip(labels).enumerate() {
                        ga[i] += inv * (sigmoid_strict(z) - y);
                    }
                }
            }
        }

        let mut by_name = BTreeMap::new();
        for (name, &(id, frozen)) in &self.bindings {
            let node = &self.nodes[id];
            let data = if frozen {
                vec![0.0; node.data.len()]
            } else {
                grads[id].clone().unwrap_or_else(|| vec![0.0; node.data.len()])
            };
            by_name.insert(
                name.clone(),
                Tensor { rows: node.rows, cols: node.cols, data },
            );
        }
        Gradients { by_name }
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut Vec<f64> {
    if grads[id].is_none() {
        grads[id] = Some(vec![0.0; len]);
    }
    grads[id].as_mut().unwrap()
}

fn accum(grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    let slot = ensure(grads, id, g.len());
    for (s, v) in slot.iter_mut().zip(g) {
        *s += v;
    }
}
