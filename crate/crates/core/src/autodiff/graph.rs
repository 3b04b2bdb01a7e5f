use crate::autodiff::kernel::GaussianBank;
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Squared norms at or below this value are treated as coincident points:
/// the row-norm gradient there is the zero vector.
pub const NORM_EPS: f64 = 1e-16;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    LogSumExpRows(Var),
    Pick(Var, Vec<usize>),
    IndexSelect(Var, Vec<usize>),
    RowNorm(Var),
    KernelMean {
        x: Var,
        y: Var,
        // d value / d x, and d value / d y when y is a different node.
        dx: Vec<f64>,
        dy: Option<Vec<f64>>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Affine(..) => "affine",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sqrt(_) => "sqrt",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::LogSumExpRows(_) => "logsumexp_rows",
            Op::Pick(..) => "pick",
            Op::IndexSelect(..) => "index_select",
            Op::RowNorm(_) => "row_norm",
            Op::KernelMean { .. } => "kernel_mean",
        }
    }
}

/// A value in the graph together with how it was produced.
#[derive(Debug)]
pub struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

impl Node {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    /// Gradient of the last backward root, if backward has run.
    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    pub fn op_name(&self) -> &'static str {
        self.op.name()
    }
}

/// Append-only computation graph. Parents always precede children, so the
/// node order is a topological order and the graph cannot contain cycles.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Shorthand for the value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Differentiable input (a parameter or a point under test).
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let src = self.value(a);
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.needs(&[a]);
        self.push(value, op, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a row vector `b` (length m) to every row of `a` (n × m).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape() != [va.shape()[1]] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", va.shape(), vb.shape()),
            ));
        }
        let m = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + vb.data()[i % m])
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        self.push(value, Op::AddRow(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    /// `scale * a + offset`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, offset: f64) -> Result<Var> {
        self.unary(a, Op::Affine(a, scale), |x| scale * x + offset)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty input"));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Row-wise `log Σ_j exp(a_ij)` of an n × m matrix, max-shifted.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 || v.shape()[1] == 0 {
            return Err(Error::shape("logsumexp_rows", format!("{:?}", v.shape())));
        }
        let out = (0..v.rows())
            .map(|i| {
                let row = v.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
            })
            .collect();
        let rg = self.needs(&[a]);
        self.push(Tensor::vector(out), Op::LogSumExpRows(a), rg)
    }

    /// `out[i] = a[i, cols[i]]` for an n × m matrix.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.shape().len() != 2 || cols.len() != v.rows() {
            return Err(Error::shape(
                "pick",
                format!("{:?} with {} column indices", v.shape(), cols.len()),
            ));
        }
        let m = v.cols();
        let mut out = Vec::with_capacity(cols.len());
        for (i, &c) in cols.iter().enumerate() {
            if c >= m {
                return Err(Error::shape("pick", format!("column {c} out of range for {m}")));
            }
            out.push(v.data()[i * m + c]);
        }
        let rg = self.needs(&[a]);
        self.push(Tensor::vector(out), Op::Pick(a, cols.to_vec()), rg)
    }

    /// Gathers rows (or elements of a vector) by index; indices may repeat.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(a).select_rows(indices)?;
        let rg = self.needs(&[a]);
        self.push(value, Op::IndexSelect(a, indices.to_vec()), rg)
    }

    /// Euclidean norm of every row; a vector is treated as n × 1.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.shape().is_empty() {
            return Err(Error::shape("row_norm", "scalar input"));
        }
        let out = (0..v.rows())
            .map(|i| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let rg = self.needs(&[a]);
        self.push(Tensor::vector(out), Op::RowNorm(a), rg)
    }

    /// Mean Gaussian kernel value between every row of `x` and every row of
    /// `y`, summed over the given bandwidths:
    ///
    /// `(1/nm) Σ_i Σ_j Σ_σ exp(-‖x_i − y_j‖² / 2σ²)`
    ///
    /// Vectors are treated as columns of scalar samples. Passing the same
    /// node twice takes a symmetric path that evaluates each pair once.
    pub fn kernel_mean(&mut self, x: Var, y: Var, bandwidths: &[f64]) -> Result<Var> {
        let bank = GaussianBank::new(bandwidths)?;
        let (vx, vy) = (self.value(x), self.value(y));
        if vx.shape().is_empty() || vy.shape().is_empty() {
            return Err(Error::shape("kernel_mean", "scalar input"));
        }
        if vx.is_empty() || vy.is_empty() {
            return Err(Error::shape("kernel_mean", "empty sample"));
        }
        if vx.cols() != vy.cols() {
            return Err(Error::shape(
                "kernel_mean",
                format!("sample widths {} vs {}", vx.cols(), vy.cols()),
            ));
        }
        let d = vx.cols();
        let (n, m) = (vx.rows(), vy.rows());
        let mut diff = vec![0.0; d];

        let (value, dx, dy) = if x == y {
            // Off-diagonal pairs twice, diagonal pairs k(0) = #bandwidths.
            let mut total = 0.0;
            let mut acc = vec![0.0; n * d];
            for i in 0..n {
                let xi = vx.row(i);
                for j in (i + 1)..n {
                    let xj = vx.row(j);
                    let mut u = 0.0;
                    for k in 0..d {
                        diff[k] = xi[k] - xj[k];
                        u += diff[k] * diff[k];
                    }
                    let (kv, slope) = bank.eval(u);
                    total += 2.0 * kv;
                    for k in 0..d {
                        acc[i * d + k] += slope * diff[k];
                        acc[j * d + k] -= slope * diff[k];
                    }
                }
            }
            total += n as f64 * bank.len() as f64;
            let nn = (n * n) as f64;
            let scale = 4.0 / nn;
            acc.iter_mut().for_each(|g| *g *= scale);
            (total / nn, acc, None)
        } else {
            let mut total = 0.0;
            let mut ax = vec![0.0; n * d];
            let mut ay = vec![0.0; m * d];
            for i in 0..n {
                let xi = vx.row(i);
                for j in 0..m {
                    let yj = vy.row(j);
                    let mut u = 0.0;
                    for k in 0..d {
                        diff[k] = xi[k] - yj[k];
                        u += diff[k] * diff[k];
                    }
                    let (kv, slope) = bank.eval(u);
                    total += kv;
                    for k in 0..d {
                        ax[i * d + k] += slope * diff[k];
                        ay[j * d + k] -= slope * diff[k];
                    }
                }
            }
            let nm = (n * m) as f64;
            let scale = 2.0 / nm;
            ax.iter_mut().for_each(|g| *g *= scale);
            ay.iter_mut().for_each(|g| *g *= scale);
            (total / nm, ax, Some(ay))
        };
        let rg = self.needs(&[x, y]);
        self.push(Tensor::scalar(value), Op::KernelMean { x, y, dx, dy }, rg)
    }

    /// Reverse pass from a scalar root. Every node's gradient is recomputed
    /// from zero, so repeated calls give identical results.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_shape = self.value(root).shape().to_vec();
        if !self.value(root).is_scalar() {
            return Err(Error::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(&root_shape, 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            node.grad = Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape())));
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    self.accumulate(grads, *a, |ga| {
                        for r in 0..n {
                            for p in 0..k {
                                let mut s = 0.0;
                                for c in 0..m {
                                    s += gd[r * m + c] * vb.data()[p * m + c];
                                }
                                ga[r * k + p] += s;
                            }
                        }
                    });
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    self.accumulate(grads, *b, |gb| {
                        for r in 0..n {
                            for p in 0..k {
                                let av = va.data()[r * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for c in 0..m {
                                    gb[p * m + c] += av * gd[r * m + c];
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| add_into(gb, gd));
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| {
                    let m = gb.len();
                    for (idx, v) in gd.iter().enumerate() {
                        gb[idx % m] += v;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| {
                    for (o, v) in gb.iter_mut().zip(gd) {
                        *o -= v;
                    }
                });
            }
            Op::Affine(a, scale) => {
                self.accumulate(grads, *a, |ga| {
                    for (o, v) in ga.iter_mut().zip(gd) {
                        *o += scale * v;
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for idx in 0..ga.len() {
                        if x[idx] > 0.0 {
                            ga[idx] += gd[idx];
                        }
                    }
                });
            }
            Op::Exp(a) => {
                self.accumulate(grads, *a, |ga| {
                    for idx in 0..ga.len() {
                        ga[idx] += gd[idx] * out[idx];
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for idx in 0..ga.len() {
                        ga[idx] += gd[idx] / x[idx];
                    }
                });
            }
            Op::Sqrt(a) => {
                self.accumulate(grads, *a, |ga| {
                    for idx in 0..ga.len() {
                        ga[idx] += gd[idx] * 0.5 / out[idx];
                    }
                });
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for idx in 0..ga.len() {
                        ga[idx] += gd[idx] * 2.0 * x[idx];
                    }
                });
            }
            Op::Sum(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let s = gd[0] / n;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|o| *o += s));
            }
            Op::LogSumExpRows(a) => {
                let x = self.value(*a);
                let m = x.cols();
                self.accumulate(grads, *a, |ga| {
                    for r in 0..x.rows() {
                        for c in 0..m {
                            let softmax = (x.data()[r * m + c] - out[r]).exp();
                            ga[r * m + c] += gd[r] * softmax;
                        }
                    }
                });
            }
            Op::Pick(a, cols) => {
                let m = self.value(*a).cols();
                self.accumulate(grads, *a, |ga| {
                    for (r, &c) in cols.iter().enumerate() {
                        ga[r * m + c] += gd[r];
                    }
                });
            }
            Op::IndexSelect(a, indices) => {
                let c = self.value(*a).cols();
                self.accumulate(grads, *a, |ga| {
                    for (r, &src) in indices.iter().enumerate() {
                        for k in 0..c {
                            ga[src * c + k] += gd[r * c + k];
                        }
                    }
                });
            }
            Op::RowNorm(a) => {
                let x = self.value(*a);
                let c = x.cols();
                self.accumulate(grads, *a, |ga| {
                    for r in 0..x.rows() {
                        let norm = out[r];
                        if norm * norm <= NORM_EPS {
                            continue;
                        }
                        let s = gd[r] / norm;
                        for k in 0..c {
                            ga[r * c + k] += s * x.data()[r * c + k];
                        }
                    }
                });
            }
            Op::KernelMean { x, y, dx, dy } => {
                let s = gd[0];
                self.accumulate(grads, *x, |gx| {
                    for (o, v) in gx.iter_mut().zip(dx) {
                        *o += s * v;
                    }
                });
                if let Some(dy) = dy {
                    self.accumulate(grads, *y, |gy| {
                        for (o, v) in gy.iter_mut().zip(dy) {
                            *o += s * v;
                        }
                    });
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(slot.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}
