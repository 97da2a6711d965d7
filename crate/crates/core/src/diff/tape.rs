use ndarray::{concatenate, s, Array1, Array2, Axis};

use crate::error::{Error, Result};

/// Dense row-major 2-D tensor. Vectors are stored as `1 × D` rows.
pub type Tensor = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product supplied by a caller-defined op:
/// `(inputs, output, output_grad) -> input grads`.
pub type CustomVjp = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `scale * a bᵀ`
    MatMulT(Var, Var, f64),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Pick(Var, Vec<(usize, usize)>),
    Sum(Var),
    L2NormalizeRows(Var, Array1<f64>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Array1<f64>,
        batch_stats: bool,
    },
    Custom(Vec<Var>, CustomVjp),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-threaded reverse-mode recording of a computation.
///
/// Values are appended in creation order, so the node list is already a
/// topological order and backward simply walks it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    matmul_grad_fault: Option<f64>,
}

/// Gradients of one scalar output with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the output.
    pub fn wrt_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch(format!("{op}: {:?} vs {:?}", a.dim(), b.dim()))
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales the gradient flowing into the right operand of every matmul.
    /// Used as a negative control for gradient checking.
    pub fn inject_matmul_grad_fault(&mut self, scale: f64) {
        self.matmul_grad_fault = Some(scale);
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `x W`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `scale · a bᵀ`, the scaled dot-product between the rows of `a` and `b`.
    pub fn scaled_dot(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.ncols() {
            return Err(shape_err("scaled_dot", av, bv));
        }
        let out = av.dot(&bv.t()) * scale;
        Ok(self.push(out, Op::MatMulT(a, b, scale)))
    }

    /// Adds the `1 × D` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return Err(shape_err("add_row", xv, bv));
        }
        let out = xv + bv;
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    /// `x W + b`, with `b` optional.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dim() != bv.dim() {
            return Err(shape_err(op, av, bv));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).mapv(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let mut out = xv.clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    /// Mean over the node (row) axis, producing a `1 × D` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.nrows() == 0 {
            return Err(Error::EmptyInput("mean pooling over zero nodes".into()));
        }
        let out = xv.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        Ok(self.push(out, Op::MeanRows(x)))
    }

    /// Stacks node sets along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows of nothing".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views)
            .map_err(|e| Error::ShapeMismatch(format!("concat_rows: {e}")))?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Concatenates feature blocks along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols of nothing".into()));
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views)
            .map_err(|e| Error::ShapeMismatch(format!("concat_cols: {e}")))?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "slice_rows {start}..{end} of {} rows",
                xv.nrows()
            )));
        }
        let out = xv.slice(s![start..end, ..]).to_owned();
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    /// Row lookup, e.g. word embeddings for a token sequence.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if let Some(&bad) = rows.iter().find(|&&r| r >= tv.nrows()) {
            return Err(Error::ShapeMismatch(format!(
                "gather_rows index {bad} of {} rows",
                tv.nrows()
            )));
        }
        let out = tv.select(Axis(0), rows);
        Ok(self.push(out, Op::GatherRows(table, rows.to_vec())))
    }

    /// Picks individual entries into an `n × 1` column.
    pub fn pick(&mut self, x: Var, at: &[(usize, usize)]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dim();
        if at.iter().any(|&(i, j)| i >= r || j >= c) {
            return Err(Error::ShapeMismatch(format!("pick outside {r}x{c}")));
        }
        let out = Tensor::from_shape_fn((at.len(), 1), |(k, _)| xv[at[k]]);
        Ok(self.push(out, Op::Pick(x, at.to_vec())))
    }

    /// Sum of all entries as a `1 × 1` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::from_elem((1, 1), self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let norms: Array1<f64> = xv.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
            return Err(Error::ZeroVector(i));
        }
        let out = xv / &norms.view().insert_axis(Axis(1));
        Ok(self.push(out, Op::L2NormalizeRows(x, norms)))
    }

    /// Batch normalization over rows, per column channel.
    ///
    /// With `batch_stats` the rows' own mean and biased variance are used and
    /// returned as `(mean, var)` so the caller can update running statistics;
    /// otherwise `stats` supplies the running `(mean, var)`.
    pub(crate) fn batchnorm_raw(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Option<(&Array1<f64>, &Array1<f64>)>,
        epsilon: f64,
    ) -> Result<(Var, Array1<f64>, Array1<f64>)> {
        let xv = self.value(x);
        let (rows, channels) = xv.dim();
        for p in [gamma, beta] {
            if self.value(p).dim() != (1, channels) {
                return Err(shape_err("batchnorm affine", xv, self.value(p)));
            }
        }
        let batch_stats = stats.is_none();
        let (mean, var) = match stats {
            Some((m, v)) => (m.clone(), v.clone()),
            None => {
                if rows < 2 {
                    return Err(Error::DegenerateBatch(rows));
                }
                let mean = xv.mean_axis(Axis(0)).unwrap();
                let var = xv.var_axis(Axis(0), 0.0);
                (mean, var)
            }
        };
        let inv_std = var.mapv(|v| 1.0 / (v + epsilon).sqrt());
        let xhat = (xv - &mean) * &inv_std;
        let out = &xhat * &self.value(gamma).row(0) + self.value(beta).row(0);
        let var_node = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        );
        Ok((var_node, mean, var))
    }

    /// Records an op whose gradient is supplied by `vjp`.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, vjp: CustomVjp) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), vjp))
    }

    /// Reverse pass from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_shape = self.shape(output);
        if out_shape != (1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar output, got {out_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones((1, 1)));

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| accumulate(&mut grads[v.0], t);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                send(*a, g.dot(&val(*b).t()));
                let mut gb = val(*a).t().dot(g);
                if let Some(scale) = self.matmul_grad_fault {
                    gb *= scale;
                }
                send(*b, gb);
            }
            Op::MatMulT(a, b, scale) => {
                send(*a, g.dot(val(*b)) * *scale);
                send(*b, g.t().dot(val(*a)) * *scale);
            }
            Op::AddRow(x, b) => {
                send(*x, g.clone());
                send(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, -g);
            }
            Op::Mul(a, b) => {
                send(*a, g * val(*b));
                send(*b, g * val(*a));
            }
            Op::Affine(x, scale) => send(*x, g * *scale),
            Op::Relu(x) => {
                let mask = val(*x).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                send(*x, g * &mask);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                send(*x, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let gy = g * y;
                let dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                send(*x, gy - y * &dots);
            }
            Op::MeanRows(x) => {
                let (n, d) = val(*x).dim();
                let row = g.row(0).mapv(|v| v / n as f64);
                send(*x, row.broadcast((n, d)).unwrap().to_owned());
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).nrows();
                    send(p, g.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).ncols();
                    send(p, g.slice(s![.., start..start + n]).to_owned());
                    start += n;
                }
            }
            Op::SliceRows(x, start) => {
                let mut full = Tensor::zeros(val(*x).dim());
                full.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                send(*x, full);
            }
            Op::GatherRows(table, rows) => {
                let mut full = Tensor::zeros(val(*table).dim());
                for (k, &r) in rows.iter().enumerate() {
                    let mut dst = full.row_mut(r);
                    dst += &g.row(k);
                }
                send(*table, full);
            }
            Op::Pick(x, at) => {
                let mut full = Tensor::zeros(val(*x).dim());
                for (k, &idx) in at.iter().enumerate() {
                    full[idx] += g[[k, 0]];
                }
                send(*x, full);
            }
            Op::Sum(x) => send(*x, Tensor::from_elem(val(*x).dim(), g[[0, 0]])),
            Op::L2NormalizeRows(x, norms) => {
                let y = &node.value;
                let dots = (g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                let dx = (g - &(y * &dots)) / norms.view().insert_axis(Axis(1));
                send(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let gamma_row = val(*gamma).row(0).to_owned();
                send(*gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                send(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dxhat = g * &gamma_row;
                let dx = if *batch_stats {
                    let n = xhat.nrows() as f64;
                    let sum_d = dxhat.sum_axis(Axis(0));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                    ((&dxhat * n) - &sum_d - &(xhat * &sum_dx)) * &(inv_std / n)
                } else {
                    dxhat * inv_std
                };
                send(*x, dx);
            }
            Op::Custom(inputs, vjp) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                for (&v, gi) in inputs.iter().zip(vjp(&ins, &node.value, g)) {
                    send(v, gi);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
