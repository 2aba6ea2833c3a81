use ndarray::ArrayView2;
use rand::Rng;

use crate::error::{CoreError, Result};

use super::params::{ParamId, ParamSet};

/// Index of a node on a [`Tape`].
pub type NodeId = usize;

/// Batch-normalization running statistics, owned outside the tape so they
/// survive across steps. Updated only in training mode.
#[derive(Debug, Clone)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf { param: Option<ParamId> },
    Dense { x: NodeId, w: NodeId, b: NodeId },
    MatmulNt { a: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Softplus { x: NodeId },
    Dropout { x: NodeId, mask: Vec<f64> },
    BatchNormTrain { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    BatchNormEval { x: NodeId, gamma: NodeId, beta: NodeId, inv_std: Vec<f64>, xhat: Vec<f64> },
    L2NormRows { x: NodeId, inv_norms: Vec<f64> },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddConst { x: NodeId },
    MulConst { x: NodeId, t: Vec<f64> },
    SubCol { x: NodeId, v: NodeId },
    PowConst { x: NodeId, p: f64 },
    Sum { x: NodeId },
    Mean { x: NodeId },
    RowLogsumexp { x: NodeId, softmax: Vec<f64> },
    ConcatRows { parts: Vec<NodeId> },
}

struct Node {
    shape: (usize, usize),
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

/// Define-by-run computation graph with eager forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CoreError::Numeric(format!("{what} produced NaN/Inf")))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: (usize, usize), values: Vec<f64>, op: Op, what: &str) -> Result<NodeId> {
        debug_assert_eq!(values.len(), shape.0 * shape.1);
        check_finite(&values, what)?;
        let n = values.len();
        self.nodes.push(Node {
            shape,
            values,
            grad: vec![0.0; n],
            op,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].grad
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].values[0]
    }

    /// Constant input (no gradient flows back out of the tape).
    pub fn input(&mut self, shape: (usize, usize), values: Vec<f64>) -> Result<NodeId> {
        self.push(shape, values, Op::Leaf { param: None }, "input")
    }

    /// Leaf bound to a parameter; gradients reach it via [`Tape::export_grads`].
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Result<NodeId> {
        let p = params.get(id);
        self.push(p.shape, p.values.clone(), Op::Leaf { param: Some(id) }, "param")
    }

    /// x [n,i] * w [i,o] + b [1,o], bias broadcast over rows.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, i) = self.shape(x);
        let (wi, o) = self.shape(w);
        let (br, bo) = self.shape(b);
        if wi != i || br != 1 || bo != o {
            return Err(CoreError::Shape(format!(
                "dense: x {n}x{i}, w {wi}x{o}, b {br}x{bo}"
            )));
        }
        let xv = ArrayView2::from_shape((n, i), self.values(x)).unwrap();
        let wv = ArrayView2::from_shape((i, o), self.values(w)).unwrap();
        let mut out = xv.dot(&wv);
        let bias = self.values(b);
        for mut row in out.rows_mut() {
            for (y, bb) in row.iter_mut().zip(bias) {
                *y += bb;
            }
        }
        let values = out.iter().copied().collect();
        self.push((n, o), values, Op::Dense { x, w, b }, "dense")
    }

    /// a [n,d] * b^T [d,m] -> [n,m]; pairwise inner products when a == b.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = self.shape(a);
        let (m, d2) = self.shape(b);
        if d != d2 {
            return Err(CoreError::Shape(format!("matmul_nt: {n}x{d} vs {m}x{d2}")));
        }
        let av = ArrayView2::from_shape((n, d), self.values(a)).unwrap();
        let bv = ArrayView2::from_shape((m, d), self.values(b)).unwrap();
        let values = av.dot(&bv.t()).iter().copied().collect();
        self.push((n, m), values, Op::MatmulNt { a, b }, "matmul_nt")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let values: Vec<f64> = self.values(x).iter().map(|v| v.max(0.0)).collect();
        self.push(self.shape(x), values, Op::Relu { x }, "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let values: Vec<f64> = self.values(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x), values, Op::Sigmoid { x }, "sigmoid")
    }

    /// ln(1 + e^x), computed as max(x,0) + ln(1 + e^-|x|).
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let values: Vec<f64> = self
            .values(x)
            .iter()
            .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
            .collect();
        self.push(self.shape(x), values, Op::Softplus { x }, "softplus")
    }

    /// Inverted dropout: train-time activations scaled by 1/(1-p) so the
    /// inference path is untouched. Identity when not training or p = 0.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, training: bool, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::Config(format!("dropout p must be in [0,1), got {p}")));
        }
        let n = self.values(x).len();
        let mask: Vec<f64> = if training && p > 0.0 {
            let keep = 1.0 / (1.0 - p);
            (0..n)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect()
        } else {
            vec![1.0; n]
        };
        let values: Vec<f64> = self.values(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push(self.shape(x), values, Op::Dropout { x, mask }, "dropout")
    }

    /// Batch normalization over rows. Training mode uses batch statistics
    /// and updates `state`; inference mode reads the frozen running stats.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BnState,
        training: bool,
    ) -> Result<NodeId> {
        let (n, f) = self.shape(x);
        if self.shape(gamma) != (1, f) || self.shape(beta) != (1, f) {
            return Err(CoreError::Shape(format!(
                "batchnorm: gamma/beta must be 1x{f}"
            )));
        }
        if state.running_mean.len() != f {
            return Err(CoreError::Shape(format!(
                "batchnorm: running stats hold {} features, input has {f}",
                state.running_mean.len()
            )));
        }
        let xs = self.values(x).to_vec();
        let g = self.values(gamma).to_vec();
        let b = self.values(beta).to_vec();
        let eps = state.eps;

        if training {
            let mut mean = vec![0.0; f];
            let mut var = vec![0.0; f];
            for row in xs.chunks(f) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            for row in xs.chunks(f) {
                for j in 0..f {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let mut xhat = vec![0.0; n * f];
            let mut out = vec![0.0; n * f];
            for i in 0..n {
                for j in 0..f {
                    let h = (xs[i * f + j] - mean[j]) * inv_std[j];
                    xhat[i * f + j] = h;
                    out[i * f + j] = g[j] * h + b[j];
                }
            }
            let mom = state.momentum;
            for j in 0..f {
                state.running_mean[j] = (1.0 - mom) * state.running_mean[j] + mom * mean[j];
                state.running_var[j] = (1.0 - mom) * state.running_var[j] + mom * var[j];
            }
            self.push(
                (n, f),
                out,
                Op::BatchNormTrain { x, gamma, beta, xhat, inv_std },
                "batchnorm",
            )
        } else {
            let inv_std: Vec<f64> = state
                .running_var
                .iter()
                .map(|v| 1.0 / (v + eps).sqrt())
                .collect();
            let mut xhat = vec![0.0; n * f];
            let mut out = vec![0.0; n * f];
            for i in 0..n {
                for j in 0..f {
                    let h = (xs[i * f + j] - state.running_mean[j]) * inv_std[j];
                    xhat[i * f + j] = h;
                    out[i * f + j] = g[j] * h + b[j];
                }
            }
            self.push(
                (n, f),
                out,
                Op::BatchNormEval { x, gamma, beta, inv_std, xhat },
                "batchnorm",
            )
        }
    }

    /// Row-wise x / ||x||_2; errors on (near-)zero rows.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, d) = self.shape(x);
        let xs = self.values(x);
        let mut inv_norms = Vec::with_capacity(n);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(CoreError::Numeric(format!(
                    "l2_normalize: row {i} has zero norm"
                )));
            }
            let inv = 1.0 / norm;
            inv_norms.push(inv);
            for j in 0..d {
                out[i * d + j] = row[j] * inv;
            }
        }
        self.push((n, d), out, Op::L2NormRows { x, inv_norms }, "l2_normalize")
    }

    fn binary_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(CoreError::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "add")?;
        let values = zip_map(self.values(a), self.values(b), |x, y| x + y);
        self.push(shape, values, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "sub")?;
        let values = zip_map(self.values(a), self.values(b), |x, y| x - y);
        self.push(shape, values, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let shape = self.binary_same_shape(a, b, "mul")?;
        let values = zip_map(self.values(a), self.values(b), |x, y| x * y);
        self.push(shape, values, Op::Mul { a, b }, "mul")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let values: Vec<f64> = self.values(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x), values, Op::Scale { x, c }, "scale")
    }

    /// Adds a constant tensor (no gradient into the constant).
    pub fn add_const(&mut self, x: NodeId, t: &[f64]) -> Result<NodeId> {
        if t.len() != self.values(x).len() {
            return Err(CoreError::Shape("add_const: length mismatch".into()));
        }
        let values = zip_map(self.values(x), t, |a, b| a + b);
        self.push(self.shape(x), values, Op::AddConst { x }, "add_const")
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: NodeId, t: &[f64]) -> Result<NodeId> {
        if t.len() != self.values(x).len() {
            return Err(CoreError::Shape("mul_const: length mismatch".into()));
        }
        let values = zip_map(self.values(x), t, |a, b| a * b);
        self.push(self.shape(x), values, Op::MulConst { x, t: t.to_vec() }, "mul_const")
    }

    /// y_ij = x_ij - v_i, v an [n,1] column broadcast across columns.
    pub fn sub_col(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        if self.shape(v) != (n, 1) {
            return Err(CoreError::Shape(format!("sub_col: v must be {n}x1")));
        }
        let xs = self.values(x);
        let vs = self.values(v);
        let mut values = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                values[i * m + j] = xs[i * m + j] - vs[i];
            }
        }
        self.push((n, m), values, Op::SubCol { x, v }, "sub_col")
    }

    /// Elementwise x^p for constant p >= 0 (inputs assumed nonnegative).
    pub fn pow_const(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        let values: Vec<f64> = self.values(x).iter().map(|v| v.powf(p)).collect();
        self.push(self.shape(x), values, Op::PowConst { x, p }, "pow_const")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.values(x).iter().sum();
        self.push((1, 1), vec![s], Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.values(x).len() as f64;
        let s = self.values(x).iter().sum::<f64>() / n;
        self.push((1, 1), vec![s], Op::Mean { x }, "mean")
    }

    /// Stable per-row log-sum-exp: [n,m] -> [n,1].
    pub fn row_logsumexp(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        let xs = self.values(x);
        let mut out = Vec::with_capacity(n);
        let mut softmax = vec![0.0; n * m];
        for i in 0..n {
            let row = &xs[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                softmax[i * m + j] = e;
                s += e;
            }
            for j in 0..m {
                softmax[i * m + j] /= s;
            }
            out.push(mx + s.ln());
        }
        self.push((n, 1), out, Op::RowLogsumexp { x, softmax }, "row_logsumexp")
    }

    /// Stacks blocks with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::Shape("concat_rows: no parts".into()));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut values = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(CoreError::Shape(format!(
                    "concat_rows: column mismatch {c} vs {cols}"
                )));
            }
            rows += r;
            values.extend_from_slice(self.values(p));
        }
        self.push(
            (rows, cols),
            values,
            Op::ConcatRows { parts: parts.to_vec() },
            "concat_rows",
        )
    }

    /// Reverse-mode accumulation from a scalar `loss` node. Adjoints of
    /// this call are added into each node's `grad`, so repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(CoreError::Shape(format!(
                "backward expects a scalar loss, got {r}x{c}"
            )));
        }
        // scratch adjoints keep this call independent of prior accumulation
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.values.len()]).collect();
        adj[loss][0] = 1.0;

        for id in (0..=loss).rev() {
            if adj[id].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[id]);
            match &self.nodes[id].op {
                Op::Leaf { .. } => {
                    adj[id] = g;
                    continue;
                }
                Op::Dense { x, w, b } => {
                    let (n, i) = self.nodes[*x].shape;
                    let o = self.nodes[*w].shape.1;
                    let gv = ArrayView2::from_shape((n, o), &g[..]).unwrap();
                    let xv = ArrayView2::from_shape((n, i), &self.nodes[*x].values).unwrap();
                    let wv = ArrayView2::from_shape((i, o), &self.nodes[*w].values).unwrap();
                    let dx: Vec<f64> = gv.dot(&wv.t()).iter().copied().collect();
                    let dw: Vec<f64> = xv.t().dot(&gv).iter().copied().collect();
                    accumulate(&mut adj[*x], &dx);
                    accumulate(&mut adj[*w], &dw);
                    let db = &mut adj[*b];
                    for row in g.chunks(o) {
                        for (d, gg) in db.iter_mut().zip(row) {
                            *d += gg;
                        }
                    }
                }
                Op::MatmulNt { a, b } => {
                    let (n, d) = self.nodes[*a].shape;
                    let m = self.nodes[*b].shape.0;
                    let gv = ArrayView2::from_shape((n, m), &g[..]).unwrap();
                    let av = ArrayView2::from_shape((n, d), &self.nodes[*a].values).unwrap();
                    let bv = ArrayView2::from_shape((m, d), &self.nodes[*b].values).unwrap();
                    let da: Vec<f64> = gv.dot(&bv).iter().copied().collect();
                    let db: Vec<f64> = gv.t().dot(&av).iter().copied().collect();
                    accumulate(&mut adj[*a], &da);
                    accumulate(&mut adj[*b], &db);
                }
                Op::Relu { x } => {
                    let xs = &self.nodes[*x].values;
                    for (k, gg) in g.iter().enumerate() {
                        if xs[k] > 0.0 {
                            adj[*x][k] += gg;
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    let ys = &self.nodes[id].values;
                    for (k, gg) in g.iter().enumerate() {
                        adj[*x][k] += gg * ys[k] * (1.0 - ys[k]);
                    }
                }
                Op::Softplus { x } => {
                    let xs = &self.nodes[*x].values;
                    for (k, gg) in g.iter().enumerate() {
                        adj[*x][k] += gg * sigmoid(xs[k]);
                    }
                }
                Op::Dropout { x, mask } => {
                    for (k, gg) in g.iter().enumerate() {
                        adj[*x][k] += gg * mask[k];
                    }
                }
                Op::BatchNormTrain { x, gamma, beta, xhat, inv_std } => {
                    let (n, f) = self.nodes[*x].shape;
                    let gam = &self.nodes[*gamma].values;
                    let mut sum_dh = vec![0.0; f];
                    let mut sum_dh_xhat = vec![0.0; f];
                    for i in 0..n {
                        for j in 0..f {
                            let dh = g[i * f + j] * gam[j];
                            sum_dh[j] += dh;
                            sum_dh_xhat[j] += dh * xhat[i * f + j];
                            adj[*gamma][j] += g[i * f + j] * xhat[i * f + j];
                            adj[*beta][j] += g[i * f + j];
                        }
                    }
                    let nf = n as f64;
                    for i in 0..n {
                        for j in 0..f {
                            let dh = g[i * f + j] * gam[j];
                            adj[*x][i * f + j] += (inv_std[j] / nf)
                                * (nf * dh - sum_dh[j] - xhat[i * f + j] * sum_dh_xhat[j]);
                        }
                    }
                }
                Op::BatchNormEval { x, gamma, beta, inv_std, xhat } => {
                    let (n, f) = self.nodes[*x].shape;
                    let gam = &self.nodes[*gamma].values;
                    for i in 0..n {
                        for j in 0..f {
                            let gg = g[i * f + j];
                            adj[*x][i * f + j] += gg * gam[j] * inv_std[j];
                            adj[*gamma][j] += gg * xhat[i * f + j];
                            adj[*beta][j] += gg;
                        }
                    }
                }
                Op::L2NormRows { x, inv_norms } => {
                    let (n, d) = self.nodes[*x].shape;
                    let ys = &self.nodes[id].values;
                    for i in 0..n {
                        let gr = &g[i * d..(i + 1) * d];
                        let yr = &ys[i * d..(i + 1) * d];
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            adj[*x][i * d + j] += inv_norms[i] * (gr[j] - yr[j] * dot);
                        }
                    }
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj[*a], &g);
                    accumulate(&mut adj[*b], &g);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut adj[*a], &g);
                    for (d, gg) in adj[*b].iter_mut().zip(&g) {
                        *d -= gg;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    for k in 0..g.len() {
                        adj[a][k] += g[k] * self.nodes[b].values[k];
                    }
                    for k in 0..g.len() {
                        adj[b][k] += g[k] * self.nodes[a].values[k];
                    }
                }
                Op::Scale { x, c } => {
                    for (d, gg) in adj[*x].iter_mut().zip(&g) {
                        *d += gg * c;
                    }
                }
                Op::AddConst { x } => accumulate(&mut adj[*x], &g),
                Op::MulConst { x, t } => {
                    for (k, gg) in g.iter().enumerate() {
                        adj[*x][k] += gg * t[k];
                    }
                }
                Op::SubCol { x, v } => {
                    let (n, m) = self.nodes[*x].shape;
                    accumulate(&mut adj[*x], &g);
                    for i in 0..n {
                        let s: f64 = g[i * m..(i + 1) * m].iter().sum();
                        adj[*v][i] -= s;
                    }
                }
                Op::PowConst { x, p } => {
                    if *p != 0.0 {
                        let xs = &self.nodes[*x].values;
                        let p = *p;
                        for (k, gg) in g.iter().enumerate() {
                            adj[*x][k] += gg * p * xs[k].powf(p - 1.0);
                        }
                    }
                }
                Op::Sum { x } => {
                    for d in adj[*x].iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mean { x } => {
                    let n = self.nodes[*x].values.len() as f64;
                    for d in adj[*x].iter_mut() {
                        *d += g[0] / n;
                    }
                }
                Op::RowLogsumexp { x, softmax } => {
                    let (n, m) = self.nodes[*x].shape;
                    for i in 0..n {
                        for j in 0..m {
                            adj[*x][i * m + j] += g[i] * softmax[i * m + j];
                        }
                    }
                }
                Op::ConcatRows { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p].values.len();
                        accumulate(&mut adj[p], &g[offset..offset + len]);
                        offset += len;
                    }
                }
            }
            adj[id] = g;
        }

        for (node, a) in self.nodes.iter_mut().zip(&adj) {
            accumulate(&mut node.grad, a);
        }
        Ok(())
    }

    /// Adds every parameter-bound leaf gradient into the parameter set.
    pub fn export_grads(&self, params: &mut ParamSet) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(pid) } = node.op {
                accumulate(&mut params.get_mut(pid).grad, &node.grad);
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
