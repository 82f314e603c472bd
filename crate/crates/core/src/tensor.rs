//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! sweeps the records in reverse and accumulates gradients into the
//! `requires_grad` leaves. Everything is 64-bit and strictly deterministic:
//! identical inputs reproduce bit-identical values and gradients.

use crate::linalg::{self, SquareMatrix};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}: empty input list")]
    EmptyInput(&'static str),
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// Plain tensor value: what model parameters look like between tapes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length must equal the shape product"
        );
        Self { shape, data, requires_grad }
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![0.0; len], requires_grad }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v], false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Matvec { a: TensorId, x: TensorId, m: usize, k: usize },
    Affine { x: TensorId, w: TensorId, b: TensorId, batch: usize, in_dim: usize, out_dim: usize },
    Relu { x: TensorId },
    Concat { xs: Vec<TensorId>, axis: usize },
    StackRows { xs: Vec<TensorId> },
    AddScaled { a: TensorId, b: TensorId, c: f64 },
    Scale { x: TensorId, c: f64 },
    Mul { a: TensorId, b: TensorId },
    Reshape { x: TensorId },
    SumAll { x: TensorId },
    PairSquareSum { x: TensorId },
    LogSoftmaxNll { logits: TensorId, targets: Vec<usize> },
    ExpmSkew { a: TensorId, n: usize },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    /// Marks the output of a vector-field evaluation; backward replays of
    /// these nodes are what the backward-NFE counter reports.
    rhs_eval: bool,
    /// Persistent gradient slot, only for `requires_grad` leaves.
    grad: Option<Vec<f64>>,
}

/// What one reverse sweep did.
#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardStats {
    /// Number of vector-field evaluations replayed as VJPs.
    pub rhs_vjp_evals: u64,
}

/// Operation tape. Nodes are appended in topological order by construction.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes but keeps the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Accumulated gradient of a `requires_grad` leaf; `None` otherwise.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = &mut node.grad {
                g.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Flags `id` as the output of a vector-field evaluation.
    pub fn mark_rhs_eval(&mut self, id: TensorId) {
        self.nodes[id.0].rhs_eval = true;
    }

    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.leaf_from_parts(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        self.leaf_from_parts(shape, data, false)
    }

    pub fn leaf_from_parts(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> TensorId {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        let grad = requires_grad.then(|| vec![0.0; data.len()]);
        self.push(Op::Leaf, shape, data, requires_grad, grad)
    }

    fn push(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        grad: Option<Vec<f64>>,
    ) -> TensorId {
        self.nodes.push(Node { op, shape, data, requires_grad, rhs_eval: false, grad });
        TensorId(self.nodes.len() - 1)
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ── forward operations ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (self.value(a), self.value(b));
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                for j in 0..n {
                    out[i * n + j] += aip * db[p * n + j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Matmul { a, b, m, k, n }, vec![m, n], out, rg, None))
    }

    pub fn matvec(&mut self, a: TensorId, x: TensorId) -> Result<TensorId, TensorError> {
        let (sa, sx) = (self.shape(a), self.shape(x));
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(shape_err("matvec", format!("{sa:?} x {sx:?}")));
        }
        let (m, k) = (sa[0], sa[1]);
        let (da, dx) = (self.value(a), self.value(x));
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &da[i * k..(i + 1) * k];
            out[i] = row.iter().zip(dx).map(|(w, v)| w * v).sum();
        }
        let rg = self.rg(a) || self.rg(x);
        Ok(self.push(Op::Matvec { a, x, m, k }, vec![m], out, rg, None))
    }

    /// W·x + b for x of shape [n] or [batch, n]; W is [m, n], b is [m].
    pub fn affine(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sw.len() != 2 || sb.len() != 1 || sb[0] != sw[0] {
            return Err(shape_err("affine", format!("W {sw:?}, b {sb:?}")));
        }
        let (out_dim, in_dim) = (sw[0], sw[1]);
        let (batch, batched) = match sx {
            [n] if *n == in_dim => (1, false),
            [r, n] if *n == in_dim => (*r, true),
            _ => return Err(shape_err("affine", format!("x {sx:?} vs W {sw:?}"))),
        };
        let (dx, dw, db) = (self.value(x), self.value(w), self.value(b));
        let mut out = vec![0.0; batch * out_dim];
        for r in 0..batch {
            let xi = &dx[r * in_dim..(r + 1) * in_dim];
            for i in 0..out_dim {
                let row = &dw[i * in_dim..(i + 1) * in_dim];
                out[r * out_dim + i] =
                    db[i] + row.iter().zip(xi).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        let shape = if batched { vec![batch, out_dim] } else { vec![out_dim] };
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Affine { x, w, b, batch, in_dim, out_dim }, shape, out, rg, None))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Op::Relu { x }, shape, data, rg, None)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptyInput("concat"));
        }
        let base = self.shape(xs[0]).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut axis_total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != base[d])
            {
                return Err(shape_err("concat", format!("ragged shapes {base:?} vs {s:?}")));
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        for &x in xs {
            let extent = self.shape(x)[axis];
            let data = self.value(x);
            for o in 0..outer {
                let src = &data[o * extent * inner..(o + 1) * extent * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + extent * inner].copy_from_slice(src);
            }
            offset += extent;
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Op::Concat { xs: xs.to_vec(), axis }, shape, out, rg, None))
    }

    /// Stacks equal-length vectors into a [batch, m] matrix.
    pub fn stack_rows(&mut self, xs: &[TensorId]) -> Result<TensorId, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptyInput("stack_rows"));
        }
        let m = match self.shape(xs[0]) {
            [m] => *m,
            s => return Err(shape_err("stack_rows", format!("want vectors, got {s:?}"))),
        };
        let mut out = Vec::with_capacity(xs.len() * m);
        for &x in xs {
            if self.shape(x) != [m] {
                return Err(shape_err("stack_rows", "ragged vector lengths".into()));
            }
            out.extend_from_slice(self.value(x));
        }
        let rg = xs.iter().any(|&x| self.rg(x));
        Ok(self.push(Op::StackRows { xs: xs.to_vec() }, vec![xs.len(), m], out, rg, None))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.add_scaled(a, b, 1.0)
    }

    /// a + c·b, elementwise over identical shapes.
    pub fn add_scaled(&mut self, a: TensorId, b: TensorId, c: f64) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                "add_scaled",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + c * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::AddScaled { a, b, c }, shape, data, rg, None))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let data: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Op::Scale { x, c }, shape, data, rg, None)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul { a, b }, shape, data, rg, None))
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape { x }, shape, data, rg, None))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Op::SumAll { x }, vec![1], vec![s], rg, None)
    }

    /// Sums squares of adjacent pairs: [2m] -> [m] with out_i = x_{2i}^2 + x_{2i+1}^2.
    /// This is the squared-modulus readout over interleaved (re, im) channels.
    pub fn pair_square_sum(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(x);
        if s.len() != 1 || s[0] % 2 != 0 {
            return Err(shape_err("pair_square_sum", format!("want even vector, got {s:?}")));
        }
        let data: Vec<f64> =
            self.value(x).chunks_exact(2).map(|p| p[0] * p[0] + p[1] * p[1]).collect();
        let m = data.len();
        let rg = self.rg(x);
        Ok(self.push(Op::PairSquareSum { x }, vec![m], data, rg, None))
    }

    /// Mean negative log-likelihood of `targets` under softmax of `logits`
    /// ([batch, classes]), stabilized by max subtraction.
    pub fn log_softmax_nll(
        &mut self,
        logits: TensorId,
        targets: &[usize],
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(logits);
        if s.len() != 2 || s[1] < 2 {
            return Err(shape_err("log_softmax_nll", format!("want [batch, m>=2], got {s:?}")));
        }
        let (batch, classes) = (s[0], s[1]);
        if targets.len() != batch {
            return Err(shape_err(
                "log_softmax_nll",
                format!("{} targets for batch {batch}", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(TensorError::TargetOutOfRange { target: t, classes });
        }
        let data = self.value(logits);
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &data[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total -= row[t] - lse;
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Op::LogSoftmaxNll { logits, targets: targets.to_vec() },
            vec![1],
            vec![total / batch as f64],
            rg,
            None,
        ))
    }

    /// expm(A - A^T) of a square [n, n] input: the exponential-map
    /// parametrization of the special orthogonal group.
    pub fn expm_skew(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != s[1] {
            return Err(shape_err("expm_skew", format!("want square, got {s:?}")));
        }
        let n = s[0];
        let mat = SquareMatrix::from_slice(n, self.value(a)).expect("checked square");
        let w = linalg::expm(&linalg::skew(&mat));
        let rg = self.rg(a);
        Ok(self.push(Op::ExpmSkew { a, n }, vec![n, n], w.as_slice().to_vec(), rg, None))
    }

    // ── reverse sweep ───────────────────────────────────────────────────

    /// Accumulates d(loss)/d(leaf) into every `requires_grad` leaf. Repeated
    /// calls without `zero_grad` accumulate additively.
    pub fn backward(&mut self, loss: TensorId) -> Result<BackwardStats, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut stats = BackwardStats::default();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].rhs_eval {
                stats.rhs_vjp_evals += 1;
            }
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            // Leaves fold the sweep gradient into their persistent slot.
            if let Op::Leaf = self.nodes[i].op {
                let slot = self.nodes[i].grad.as_mut().expect("leaf grad slot");
                for (acc, v) in slot.iter_mut().zip(&g) {
                    *acc += v;
                }
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.propagate(&op, i, &g, &mut grads);
        }
        Ok(stats)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: TensorId, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, op: &Op, node: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => unreachable!("leaves handled by the sweep"),
            Op::Matmul { a, b, m, k, n } => {
                if self.rg(a) {
                    let db = self.value(b);
                    Self::accumulate(grads, a, m * k, |ga| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += g[i * n + j] * db[p * n + j];
                                }
                                ga[i * k + p] += s;
                            }
                        }
                    });
                }
                if self.rg(b) {
                    let da = self.value(a);
                    Self::accumulate(grads, b, k * n, |gb| {
                        for p in 0..k {
                            for i in 0..m {
                                let aip = da[i * k + p];
                                for j in 0..n {
                                    gb[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Matvec { a, x, m, k } => {
                if self.rg(a) {
                    let dx = self.value(x);
                    Self::accumulate(grads, a, m * k, |ga| {
                        for i in 0..m {
                            let gi = g[i];
                            for j in 0..k {
                                ga[i * k + j] += gi * dx[j];
                            }
                        }
                    });
                }
                if self.rg(x) {
                    let da = self.value(a);
                    Self::accumulate(grads, x, k, |gx| {
                        for i in 0..m {
                            let gi = g[i];
                            let row = &da[i * k..(i + 1) * k];
                            for j in 0..k {
                                gx[j] += gi * row[j];
                            }
                        }
                    });
                }
            }
            Op::Affine { x, w, b, batch, in_dim, out_dim } => {
                if self.rg(x) {
                    let dw = self.value(w);
                    Self::accumulate(grads, x, batch * in_dim, |gx| {
                        for r in 0..batch {
                            for i in 0..out_dim {
                                let gi = g[r * out_dim + i];
                                let row = &dw[i * in_dim..(i + 1) * in_dim];
                                for j in 0..in_dim {
                                    gx[r * in_dim + j] += gi * row[j];
                                }
                            }
                        }
                    });
                }
                if self.rg(w) {
                    let dx = self.value(x);
                    Self::accumulate(grads, w, out_dim * in_dim, |gw| {
                        for r in 0..batch {
                            let xr = &dx[r * in_dim..(r + 1) * in_dim];
                            for i in 0..out_dim {
                                let gi = g[r * out_dim + i];
                                for j in 0..in_dim {
                                    gw[i * in_dim + j] += gi * xr[j];
                                }
                            }
                        }
                    });
                }
                if self.rg(b) {
                    Self::accumulate(grads, b, out_dim, |gb| {
                        for r in 0..batch {
                            for i in 0..out_dim {
                                gb[i] += g[r * out_dim + i];
                            }
                        }
                    });
                }
            }
            Op::Relu { x } => {
                if self.rg(x) {
                    let dx = self.value(x);
                    Self::accumulate(grads, x, dx.len(), |gx| {
                        for (i, (&xi, gi)) in dx.iter().zip(g).enumerate() {
                            if xi > 0.0 {
                                gx[i] += gi;
                            }
                        }
                    });
                }
            }
            Op::Concat { ref xs, axis } => {
                let shape = &self.nodes[node].shape;
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let axis_total = shape[axis];
                let mut offset = 0;
                for &x in xs {
                    let extent = self.shape(x)[axis];
                    if self.rg(x) {
                        let len = self.value(x).len();
                        Self::accumulate(grads, x, len, |gx| {
                            for o in 0..outer {
                                let src_start = (o * axis_total + offset) * inner;
                                let dst = &mut gx[o * extent * inner..(o + 1) * extent * inner];
                                for (d, s) in dst.iter_mut().zip(&g[src_start..src_start + extent * inner]) {
                                    *d += s;
                                }
                            }
                        });
                    }
                    offset += extent;
                }
            }
            Op::StackRows { ref xs } => {
                let m = self.shape(xs[0])[0];
                for (r, &x) in xs.iter().enumerate() {
                    if self.rg(x) {
                        Self::accumulate(grads, x, m, |gx| {
                            for (d, s) in gx.iter_mut().zip(&g[r * m..(r + 1) * m]) {
                                *d += s;
                            }
                        });
                    }
                }
            }
            Op::AddScaled { a, b, c } => {
                if self.rg(a) {
                    Self::accumulate(grads, a, g.len(), |ga| {
                        for (d, s) in ga.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
                if self.rg(b) {
                    Self::accumulate(grads, b, g.len(), |gb| {
                        for (d, s) in gb.iter_mut().zip(g) {
                            *d += c * s;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                if self.rg(a) {
                    let db = self.value(b);
                    Self::accumulate(grads, a, db.len(), |ga| {
                        for ((d, s), &bv) in ga.iter_mut().zip(g).zip(db) {
                            *d += s * bv;
                        }
                    });
                }
                if self.rg(b) {
                    let da = self.value(a);
                    Self::accumulate(grads, b, da.len(), |gb| {
                        for ((d, s), &av) in gb.iter_mut().zip(g).zip(da) {
                            *d += s * av;
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                if self.rg(x) {
                    Self::accumulate(grads, x, g.len(), |gx| {
                        for (d, s) in gx.iter_mut().zip(g) {
                            *d += c * s;
                        }
                    });
                }
            }
            Op::Reshape { x } => {
                if self.rg(x) {
                    Self::accumulate(grads, x, g.len(), |gx| {
                        for (d, s) in gx.iter_mut().zip(g) {
                            *d += s;
                        }
                    });
                }
            }
            Op::SumAll { x } => {
                if self.rg(x) {
                    let len = self.value(x).len();
                    Self::accumulate(grads, x, len, |gx| {
                        for d in gx.iter_mut() {
                            *d += g[0];
                        }
                    });
                }
            }
            Op::PairSquareSum { x } => {
                if self.rg(x) {
                    let dx = self.value(x);
                    Self::accumulate(grads, x, dx.len(), |gx| {
                        for (i, gi) in g.iter().enumerate() {
                            gx[2 * i] += 2.0 * dx[2 * i] * gi;
                            gx[2 * i + 1] += 2.0 * dx[2 * i + 1] * gi;
                        }
                    });
                }
            }
            Op::LogSoftmaxNll { logits, ref targets } => {
                if self.rg(logits) {
                    let data = self.value(logits);
                    let batch = targets.len();
                    let classes = data.len() / batch;
                    let scale = g[0] / batch as f64;
                    Self::accumulate(grads, logits, data.len(), |gl| {
                        for (r, &t) in targets.iter().enumerate() {
                            let row = &data[r * classes..(r + 1) * classes];
                            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                            for c in 0..classes {
                                let softmax = (row[c] - max).exp() / sum;
                                let indicator = if c == t { 1.0 } else { 0.0 };
                                gl[r * classes + c] += scale * (softmax - indicator);
                            }
                        }
                    });
                }
            }
            Op::ExpmSkew { a, n } => {
                if self.rg(a) {
                    let mat = SquareMatrix::from_slice(n, self.value(a)).expect("square");
                    let s = linalg::skew(&mat);
                    let upstream = SquareMatrix::from_slice(n, g).expect("square grad");
                    let ds = linalg::expm_vjp(&s, &upstream).expect("orders agree");
                    // d(A - A^T) pulls back as G - G^T.
                    let da = linalg::skew(&ds);
                    Self::accumulate(grads, a, n * n, |ga| {
                        for (d, s) in ga.iter_mut().zip(da.as_slice()) {
                            *d += s;
                        }
                    });
                }
            }
        }
    }
}
