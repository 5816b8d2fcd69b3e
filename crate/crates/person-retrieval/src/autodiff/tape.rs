use super::{AutodiffError, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    MatVec { w: TensorId, x: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { v: TensorId, s: TensorId },
    ScaleConst { v: TensorId, c: f64 },
    Tanh { x: TensorId },
    Sigmoid { x: TensorId },
    Softmax { x: TensorId },
    Concat { parts: Vec<TensorId> },
    StackRows { rows: Vec<TensorId> },
    Row { m: TensorId, row: usize },
    Element { v: TensorId, index: usize },
    EmbedRows { table: TensorId, indices: Vec<usize> },
    Dot { a: TensorId, b: TensorId },
    Sum { x: TensorId },
    MeanRows { m: TensorId },
    L2Normalize { x: TensorId, norm: f64 },
    SigmoidCrossEntropy { logit: TensorId, label: f64 },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
    name: Option<String>,
}

/// Topologically ordered record of one forward pass (define-by-run).
///
/// Every operation appends a node, so the record order is already a
/// topological order; [`Tape::backward`] walks it in exact reverse and sums
/// gradient contributions (a parameter used twice receives both).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        let id = TensorId(self.nodes.len());
        let grad = vec![0.0; data.len()];
        self.nodes.push(Node {
            data,
            shape,
            grad,
            requires_grad,
            op,
            name: None,
        });
        id
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── leaves ──────────────────────────────────────────────────────

    pub fn leaf(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
    ) -> Result<TensorId, AutodiffError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(AutodiffError::LengthMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Registers a host tensor, copying its data in.
    pub fn push_tensor(&mut self, t: &Tensor) -> Result<TensorId, AutodiffError> {
        self.leaf(t.data.clone(), t.shape.clone(), t.requires_grad)
    }

    /// Same as [`Tape::push_tensor`] but with a name for diagnostics.
    pub fn push_named(&mut self, t: &Tensor, name: &str) -> Result<TensorId, AutodiffError> {
        let id = self.push_tensor(t)?;
        self.nodes[id.0].name = Some(name.to_string());
        Ok(id)
    }

    /// Non-trainable 1-D constant.
    pub fn constant(&mut self, data: Vec<f64>) -> Result<TensorId, AutodiffError> {
        let n = data.len();
        self.leaf(data, vec![n], false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<TensorId, AutodiffError> {
        self.leaf(vec![value], vec![1], false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId, AutodiffError> {
        let numel: usize = shape.iter().product();
        self.leaf(vec![0.0; numel], shape, requires_grad)
    }

    // ── accessors ───────────────────────────────────────────────────

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub(crate) fn scalar_value(&self, id: TensorId, op: &'static str) -> Result<f64, AutodiffError> {
        let node = &self.nodes[id.0];
        if node.data.len() != 1 {
            return Err(AutodiffError::NotScalar {
                op,
                shape: node.shape.clone(),
            });
        }
        Ok(node.data[0])
    }

    /// First NaN/Inf on the tape, reported by tensor name (or node index).
    pub fn first_non_finite(&self) -> Option<String> {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.data.iter().any(|v| !v.is_finite()) {
                return Some(
                    node.name
                        .clone()
                        .unwrap_or_else(|| format!("node #{i} ({:?})", op_name(&node.op))),
                );
            }
        }
        None
    }

    // ── operations ──────────────────────────────────────────────────

    /// `A[m,k] . B[k,n] -> C[m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { a, b }))
    }

    /// `W[m,k] . x[k] -> y[m]`.
    pub fn matvec(&mut self, w: TensorId, x: TensorId) -> Result<TensorId, AutodiffError> {
        let (wsh, xsh) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if wsh.len() != 2 || xsh.len() != 1 || wsh[1] != xsh[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matvec",
                lhs: wsh,
                rhs: xsh,
            });
        }
        let (m, k) = (wsh[0], wsh[1]);
        let (wd, xd) = (&self.nodes[w.0].data, &self.nodes[x.0].data);
        let mut out = vec![0.0; m];
        for r in 0..m {
            let row = &wd[r * k..(r + 1) * k];
            out[r] = row.iter().zip(xd).map(|(a, b)| a * b).sum();
        }
        let rg = self.requires(w) || self.requires(x);
        Ok(self.push(out, vec![m], rg, Op::MatVec { w, x }))
    }

    fn elementwise_binary(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(Vec<f64>, Vec<usize>, bool), AutodiffError> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash != bsh {
            return Err(AutodiffError::ShapeMismatch {
                op: op_name,
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        Ok((
            Vec::with_capacity(self.nodes[a.0].data.len()),
            ash.to_vec(),
            self.requires(a) || self.requires(b),
        ))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let (mut out, shape, rg) = self.elementwise_binary("add", a, b)?;
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        out.extend(ad.iter().zip(bd).map(|(x, y)| x + y));
        Ok(self.push(out, shape, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let (mut out, shape, rg) = self.elementwise_binary("mul", a, b)?;
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        out.extend(ad.iter().zip(bd).map(|(x, y)| x * y));
        Ok(self.push(out, shape, rg, Op::Mul { a, b }))
    }

    /// Multiplies every element of `v` by the scalar tensor `s`.
    pub fn scale(&mut self, v: TensorId, s: TensorId) -> Result<TensorId, AutodiffError> {
        let sv = self.scalar_value(s, "scale")?;
        let out: Vec<f64> = self.nodes[v.0].data.iter().map(|x| x * sv).collect();
        let shape = self.shape(v).to_vec();
        let rg = self.requires(v) || self.requires(s);
        Ok(self.push(out, shape, rg, Op::Scale { v, s }))
    }

    pub fn scale_const(&mut self, v: TensorId, c: f64) -> Result<TensorId, AutodiffError> {
        let out: Vec<f64> = self.nodes[v.0].data.iter().map(|x| x * c).collect();
        let shape = self.shape(v).to_vec();
        let rg = self.requires(v);
        Ok(self.push(out, shape, rg, Op::ScaleConst { v, c }))
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId, AutodiffError> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(out, shape, rg, Op::Tanh { x }))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId, AutodiffError> {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(out, shape, rg, Op::Sigmoid { x }))
    }

    /// Softmax over a 1-D tensor, computed with max-subtraction so large
    /// logits cannot overflow.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId, AutodiffError> {
        let xd = &self.nodes[x.0].data;
        if xd.is_empty() || self.shape(x).len() != 1 {
            return Err(AutodiffError::EmptyInput { op: "softmax" });
        }
        let max = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xd.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(out, shape, rg, Op::Softmax { x }))
    }

    /// Concatenates 1-D tensors along axis 0.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "concat" });
        }
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            if self.shape(p).len() != 1 {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(p).to_vec(),
                    rhs: vec![0],
                });
            }
            out.extend_from_slice(&self.nodes[p.0].data);
            rg |= self.requires(p);
        }
        let n = out.len();
        Ok(self.push(
            out,
            vec![n],
            rg,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Stacks equally sized 1-D tensors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId, AutodiffError> {
        if rows.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "stack_rows" });
        }
        let cols = self.nodes[rows[0].0].data.len();
        let mut out = Vec::with_capacity(rows.len() * cols);
        let mut rg = false;
        for &r in rows {
            if self.shape(r).len() != 1 || self.nodes[r.0].data.len() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: self.shape(r).to_vec(),
                    rhs: vec![cols],
                });
            }
            out.extend_from_slice(&self.nodes[r.0].data);
            rg |= self.requires(r);
        }
        Ok(self.push(
            out,
            vec![rows.len(), cols],
            rg,
            Op::StackRows {
                rows: rows.to_vec(),
            },
        ))
    }

    /// Extracts row `row` of a matrix as a 1-D tensor.
    pub fn row(&mut self, m: TensorId, row: usize) -> Result<TensorId, AutodiffError> {
        let shape = self.shape(m).to_vec();
        if shape.len() != 2 || row >= shape[0] {
            return Err(AutodiffError::IndexOutOfRange {
                op: "row",
                index: row,
                shape,
            });
        }
        let cols = shape[1];
        let out = self.nodes[m.0].data[row * cols..(row + 1) * cols].to_vec();
        let rg = self.requires(m);
        Ok(self.push(out, vec![cols], rg, Op::Row { m, row }))
    }

    /// Extracts a single element of a 1-D tensor as a scalar.
    pub fn element(&mut self, v: TensorId, index: usize) -> Result<TensorId, AutodiffError> {
        let shape = self.shape(v).to_vec();
        if shape.len() != 1 || index >= shape[0] {
            return Err(AutodiffError::IndexOutOfRange {
                op: "element",
                index,
                shape,
            });
        }
        let out = vec![self.nodes[v.0].data[index]];
        let rg = self.requires(v);
        Ok(self.push(out, vec![1], rg, Op::Element { v, index }))
    }

    /// Gathers `table[V,k]` rows by index into a `[T,k]` matrix. Gradients
    /// scatter back, summing over repeated indices.
    pub fn embed_rows(
        &mut self,
        table: TensorId,
        indices: &[usize],
    ) -> Result<TensorId, AutodiffError> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "embed_rows",
                lhs: shape,
                rhs: vec![0, 0],
            });
        }
        if indices.is_empty() {
            return Err(AutodiffError::EmptyInput { op: "embed_rows" });
        }
        let (v, k) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "embed_rows",
                index: bad,
                shape,
            });
        }
        let td = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            out.extend_from_slice(&td[i * k..(i + 1) * k]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            out,
            vec![indices.len(), k],
            rg,
            Op::EmbedRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, AutodiffError> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash != bsh || ash.len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                lhs: ash.to_vec(),
                rhs: bsh.to_vec(),
            });
        }
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let out = vec![ad.iter().zip(bd).map(|(x, y)| x * y).sum()];
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, vec![1], rg, Op::Dot { a, b }))
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId, AutodiffError> {
        let out = vec![self.nodes[x.0].data.iter().sum()];
        let rg = self.requires(x);
        Ok(self.push(out, vec![1], rg, Op::Sum { x }))
    }

    /// Mean over the rows of a `[r,c]` matrix, yielding a `[c]` vector.
    pub fn mean_rows(&mut self, m: TensorId) -> Result<TensorId, AutodiffError> {
        let shape = self.shape(m).to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "mean_rows",
                lhs: shape,
                rhs: vec![0, 0],
            });
        }
        let (r, c) = (shape[0], shape[1]);
        let md = &self.nodes[m.0].data;
        let mut out = vec![0.0; c];
        for row in 0..r {
            for (o, v) in out.iter_mut().zip(&md[row * c..(row + 1) * c]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let rg = self.requires(m);
        Ok(self.push(out, vec![c], rg, Op::MeanRows { m }))
    }

    /// Scales a vector to unit norm. A zero vector maps to zeros (no NaN)
    /// and the returned flag reports the degenerate input.
    pub fn l2_normalize(&mut self, x: TensorId) -> Result<(TensorId, bool), AutodiffError> {
        if self.shape(x).len() != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "l2_normalize",
                lhs: self.shape(x).to_vec(),
                rhs: vec![0],
            });
        }
        let xd = &self.nodes[x.0].data;
        let norm = xd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let degenerate = norm == 0.0;
        let out: Vec<f64> = if degenerate {
            vec![0.0; xd.len()]
        } else {
            xd.iter().map(|v| v / norm).collect()
        };
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        let id = self.push(out, shape, rg, Op::L2Normalize { x, norm });
        Ok((id, degenerate))
    }

    /// Binary cross-entropy on a logit, `-L log S(s) - (1-L) log(1-S(s))`,
    /// evaluated as `max(s,0) - s L + log(1 + exp(-|s|))` so it stays finite
    /// for any finite `s`.
    pub fn sigmoid_cross_entropy(
        &mut self,
        logit: TensorId,
        label: f64,
    ) -> Result<TensorId, AutodiffError> {
        let s = self.scalar_value(logit, "sigmoid_cross_entropy")?;
        if label != 0.0 && label != 1.0 {
            return Err(AutodiffError::NonFinite {
                what: format!("sigmoid_cross_entropy label {label} (must be 0 or 1)"),
            });
        }
        let loss = s.max(0.0) - s * label + (-s.abs()).exp().ln_1p();
        let rg = self.requires(logit);
        Ok(self.push(vec![loss], vec![1], rg, Op::SigmoidCrossEntropy { logit, label }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Each call adds that loss's
    /// full gradient into every node's `grad` buffer, so repeated calls
    /// without reset accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), AutodiffError> {
        self.scalar_value(loss, "backward")?;

        // Per-call adjoints, folded into the persistent grad buffers at the
        // end; empty vec means "no contribution yet".
        let n = loss.0 + 1;
        let mut adj: Vec<Vec<f64>> = (0..n).map(|_| Vec::new()).collect();
        adj[loss.0] = vec![1.0];

        for i in (0..n).rev() {
            if adj[i].is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let op = self.nodes[i].op.clone();
            self.propagate(&op, i, &g, &mut adj);
            adj[i] = g;
        }

        for (i, a) in adj.iter().enumerate() {
            if !a.is_empty() && self.nodes[i].requires_grad {
                for (dst, src) in self.nodes[i].grad.iter_mut().zip(a) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    fn accumulate(adj: &mut [Vec<f64>], id: TensorId, len: usize, f: impl FnOnce(&mut [f64])) {
        if adj[id.0].is_empty() {
            adj[id.0] = vec![0.0; len];
        }
        f(&mut adj[id.0]);
    }

    fn propagate(&self, op: &Op, out: usize, g: &[f64], adj: &mut [Vec<f64>]) {
        match *op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let ash = &self.nodes[a.0].shape;
                let bsh = &self.nodes[b.0].shape;
                let (m, k, nn) = (ash[0], ash[1], bsh[1]);
                let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
                if self.requires(a) {
                    // dA = dC . B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..nn {
                                s += g[i * nn + j] * bd[p * nn + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    Self::accumulate(adj, a, m * k, |dst| {
                        dst.iter_mut().zip(&da).for_each(|(d, s)| *d += s)
                    });
                }
                if self.requires(b) {
                    // dB = A^T . dC
                    let mut db = vec![0.0; k * nn];
                    for p in 0..k {
                        for j in 0..nn {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ad[i * k + p] * g[i * nn + j];
                            }
                            db[p * nn + j] = s;
                        }
                    }
                    Self::accumulate(adj, b, k * nn, |dst| {
                        dst.iter_mut().zip(&db).for_each(|(d, s)| *d += s)
                    });
                }
            }

            Op::MatVec { w, x } => {
                let (m, k) = (self.nodes[w.0].shape[0], self.nodes[w.0].shape[1]);
                let (wd, xd) = (&self.nodes[w.0].data, &self.nodes[x.0].data);
                if self.requires(w) {
                    Self::accumulate(adj, w, m * k, |dst| {
                        for r in 0..m {
                            let gr = g[r];
                            let drow = &mut dst[r * k..(r + 1) * k];
                            for (d, &xv) in drow.iter_mut().zip(xd) {
                                *d += gr * xv;
                            }
                        }
                    });
                }
                if self.requires(x) {
                    Self::accumulate(adj, x, k, |dst| {
                        for r in 0..m {
                            let gr = g[r];
                            let row = &wd[r * k..(r + 1) * k];
                            for (d, &wv) in dst.iter_mut().zip(row) {
                                *d += gr * wv;
                            }
                        }
                    });
                }
            }

            Op::Add { a, b } => {
                for &side in &[a, b] {
                    if self.requires(side) {
                        Self::accumulate(adj, side, g.len(), |dst| {
                            dst.iter_mut().zip(g).for_each(|(d, s)| *d += s)
                        });
                    }
                }
            }

            Op::Mul { a, b } => {
                // a == b is fine: both contributions are summed in turn.
                if self.requires(a) {
                    let bd = self.nodes[b.0].data.clone();
                    Self::accumulate(adj, a, g.len(), |dst| {
                        for ((d, s), v) in dst.iter_mut().zip(g).zip(&bd) {
                            *d += s * v;
                        }
                    });
                }
                if self.requires(b) {
                    let ad = self.nodes[a.0].data.clone();
                    Self::accumulate(adj, b, g.len(), |dst| {
                        for ((d, s), v) in dst.iter_mut().zip(g).zip(&ad) {
                            *d += s * v;
                        }
                    });
                }
            }

            Op::Scale { v, s } => {
                let sv = self.nodes[s.0].data[0];
                let vd = &self.nodes[v.0].data;
                if self.requires(v) {
                    Self::accumulate(adj, v, g.len(), |dst| {
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += gv * sv;
                        }
                    });
                }
                if self.requires(s) {
                    let contrib: f64 = g.iter().zip(vd).map(|(gv, vv)| gv * vv).sum();
                    Self::accumulate(adj, s, 1, |dst| dst[0] += contrib);
                }
            }

            Op::ScaleConst { v, c } => {
                if self.requires(v) {
                    Self::accumulate(adj, v, g.len(), |dst| {
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += gv * c;
                        }
                    });
                }
            }

            Op::Tanh { x } => {
                if self.requires(x) {
                    let yd = &self.nodes[out].data;
                    Self::accumulate(adj, x, g.len(), |dst| {
                        for ((d, gv), y) in dst.iter_mut().zip(g).zip(yd) {
                            *d += gv * (1.0 - y * y);
                        }
                    });
                }
            }

            Op::Sigmoid { x } => {
                if self.requires(x) {
                    let yd = &self.nodes[out].data;
                    Self::accumulate(adj, x, g.len(), |dst| {
                        for ((d, gv), y) in dst.iter_mut().zip(g).zip(yd) {
                            *d += gv * y * (1.0 - y);
                        }
                    });
                }
            }

            Op::Softmax { x } => {
                if self.requires(x) {
                    let yd = &self.nodes[out].data;
                    let dot: f64 = g.iter().zip(yd).map(|(gv, y)| gv * y).sum();
                    Self::accumulate(adj, x, g.len(), |dst| {
                        for ((d, gv), y) in dst.iter_mut().zip(g).zip(yd) {
                            *d += y * (gv - dot);
                        }
                    });
                }
            }

            Op::Concat { ref parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].data.len();
                    if self.requires(p) {
                        let slice = &g[offset..offset + len];
                        Self::accumulate(adj, p, len, |dst| {
                            dst.iter_mut().zip(slice).for_each(|(d, s)| *d += s)
                        });
                    }
                    offset += len;
                }
            }

            Op::StackRows { ref rows } => {
                let cols = self.nodes[out].shape[1];
                for (t, &r) in rows.iter().enumerate() {
                    if self.requires(r) {
                        let slice = &g[t * cols..(t + 1) * cols];
                        Self::accumulate(adj, r, cols, |dst| {
                            dst.iter_mut().zip(slice).for_each(|(d, s)| *d += s)
                        });
                    }
                }
            }

            Op::Row { m, row } => {
                if self.requires(m) {
                    let (_r, c) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                    let len = self.nodes[m.0].data.len();
                    Self::accumulate(adj, m, len, |dst| {
                        let drow = &mut dst[row * c..(row + 1) * c];
                        drow.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    });
                }
            }

            Op::Element { v, index } => {
                if self.requires(v) {
                    let len = self.nodes[v.0].data.len();
                    Self::accumulate(adj, v, len, |dst| dst[index] += g[0]);
                }
            }

            Op::EmbedRows { table, ref indices } => {
                if self.requires(table) {
                    let k = self.nodes[table.0].shape[1];
                    let len = self.nodes[table.0].data.len();
                    Self::accumulate(adj, table, len, |dst| {
                        for (t, &idx) in indices.iter().enumerate() {
                            let src = &g[t * k..(t + 1) * k];
                            let drow = &mut dst[idx * k..(idx + 1) * k];
                            drow.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                        }
                    });
                }
            }

            Op::Dot { a, b } => {
                let g0 = g[0];
                if self.requires(a) {
                    let bd = self.nodes[b.0].data.clone();
                    Self::accumulate(adj, a, bd.len(), |dst| {
                        dst.iter_mut().zip(&bd).for_each(|(d, v)| *d += g0 * v)
                    });
                }
                if self.requires(b) {
                    let ad = self.nodes[a.0].data.clone();
                    Self::accumulate(adj, b, ad.len(), |dst| {
                        dst.iter_mut().zip(&ad).for_each(|(d, v)| *d += g0 * v)
                    });
                }
            }

            Op::Sum { x } => {
                if self.requires(x) {
                    let g0 = g[0];
                    let len = self.nodes[x.0].data.len();
                    Self::accumulate(adj, x, len, |dst| {
                        dst.iter_mut().for_each(|d| *d += g0)
                    });
                }
            }

            Op::MeanRows { m } => {
                if self.requires(m) {
                    let (r, c) = (self.nodes[m.0].shape[0], self.nodes[m.0].shape[1]);
                    let inv = 1.0 / r as f64;
                    Self::accumulate(adj, m, r * c, |dst| {
                        for row in 0..r {
                            let drow = &mut dst[row * c..(row + 1) * c];
                            drow.iter_mut().zip(g).for_each(|(d, s)| *d += s * inv);
                        }
                    });
                }
            }

            Op::L2Normalize { x, norm } => {
                if self.requires(x) && norm != 0.0 {
                    // y = x / |x|: dx = g/|x| - x (x . g) / |x|^3
                    let xd = &self.nodes[x.0].data;
                    let xg: f64 = xd.iter().zip(g).map(|(xv, gv)| xv * gv).sum();
                    let inv = 1.0 / norm;
                    let inv3 = inv * inv * inv;
                    Self::accumulate(adj, x, xd.len(), |dst| {
                        for ((d, gv), xv) in dst.iter_mut().zip(g).zip(xd) {
                            *d += gv * inv - xv * xg * inv3;
                        }
                    });
                }
            }

            Op::SigmoidCrossEntropy { logit, label } => {
                if self.requires(logit) {
                    let s = self.nodes[logit.0].data[0];
                    let d = (sigmoid(s) - label) * g[0];
                    Self::accumulate(adj, logit, 1, |dst| dst[0] += d);
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::MatVec { .. } => "matvec",
        Op::Add { .. } => "add",
        Op::Mul { .. } => "mul",
        Op::Scale { .. } => "scale",
        Op::ScaleConst { .. } => "scale_const",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Softmax { .. } => "softmax",
        Op::Concat { .. } => "concat",
        Op::StackRows { .. } => "stack_rows",
        Op::Row { .. } => "row",
        Op::Element { .. } => "element",
        Op::EmbedRows { .. } => "embed_rows",
        Op::Dot { .. } => "dot",
        Op::Sum { .. } => "sum",
        Op::MeanRows { .. } => "mean_rows",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::SigmoidCrossEntropy { .. } => "sigmoid_cross_entropy",
    }
}
