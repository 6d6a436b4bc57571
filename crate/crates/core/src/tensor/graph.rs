use super::{Result, Scalar, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize },
    Relu(Var),
    MaxPool2d { input: Var, argmax: Vec<usize> },
    Reshape(Var),
    Linear { x: Var, weight: Var, bias: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Rows { input: Var, start: usize },
    GroupMean { input: Var, groups: Vec<usize>, counts: Vec<usize> },
    SqDist { queries: Var, centers: Var },
    Sqrt(Var),
    LogSoftmax(Var),
    Nll { logp: Var, labels: Vec<usize>, clamped: Vec<bool> },
    Select { input: Var, index: usize },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record.
///
/// Nodes are appended in evaluation order, so every node's inputs have smaller
/// indices and reverse index order is a valid backward schedule. A graph is
/// built fresh for each forward pass.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Lower bound applied to probabilities before taking a log in [`Graph::nll`].
pub const PROB_FLOOR: f64 = 1e-12;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that is never differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` was on a
    /// differentiable path to the loss.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of query rows whose true-class probability was clamped by `nll`.
    pub fn clamp_events(&self, v: Var) -> usize {
        match &self.nodes[v.0].op {
            Op::Nll { clamped, .. } => clamped.iter().filter(|&&c| c).count(),
            _ => 0,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor<T>, op: Op, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(value, op, rg))
    }

    fn rg(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D cross-correlation over `[batch, c_in, h, w]` with a
    /// `[c_out, c_in, kh, kw]` kernel and optional per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        let geo = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geo.c_out] {
                return Err(TensorError::shape(
                    OP,
                    format!("bias has shape {:?}, expected [{}]", self.shape(b), geo.c_out),
                ));
            }
        }
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let out_plane = geo.out_h * geo.out_w;
        let mut out = vec![T::zero(); geo.batch * geo.c_out * out_plane];
        let mut cols = vec![T::zero(); geo.patch() * out_plane];
        for b in 0..geo.batch {
            geo.im2col(&x[b * geo.in_item()..(b + 1) * geo.in_item()], &mut cols);
            let dst = &mut out[b * geo.c_out * out_plane..(b + 1) * geo.c_out * out_plane];
            T::gemm(
                geo.c_out,
                geo.patch(),
                out_plane,
                k,
                (geo.patch() as isize, 1),
                &cols,
                (out_plane as isize, 1),
                T::zero(),
                dst,
                out_plane as isize,
            );
            if let Some(bv) = bias {
                let bias = self.value(bv).data();
                for (c, plane) in dst.chunks_mut(out_plane).enumerate() {
                    plane.iter_mut().for_each(|v| *v = *v + bias[c]);
                }
            }
        }
        let value = Tensor::new([geo.batch, geo.c_out, geo.out_h, geo.out_w], out)?;
        let rg = self.rg(&[Some(input), Some(kernel), bias]);
        self.push_checked(OP, value, Op::Conv2d { input, kernel, bias, stride, padding }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(value, Op::Relu(x), rg))
    }

    /// Non-overlapping max pooling over the two trailing axes of a 4-D tensor.
    /// Ties resolve to the first element in row-major order.
    pub fn max_pool2d(&mut self, x: Var, window: usize) -> Result<Var> {
        const OP: &str = "max_pool2d";
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(TensorError::shape(OP, format!("expected 4-D input, got {shape:?}")));
        }
        if window == 0 {
            return Err(TensorError::invalid(OP, "window must be at least 1"));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % window != 0 {
            return Err(TensorError::shape(OP, format!("height {h} not divisible by window {window}")));
        }
        if w % window != 0 {
            return Err(TensorError::shape(OP, format!("width {w} not divisible by window {window}")));
        }
        let (oh, ow) = (h / window, w / window);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = base + oy * window * w + ox * window;
                    let mut best = src[best_idx];
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::new([n, c, oh, ow], out)?;
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(value, Op::MaxPool2d { input: x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Collapses every axis after the first: `[n, ...] -> [n, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let n = shape[0];
        let rest = shape[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, rest])
    }

    /// `x · weightᵀ + bias` with `x: [n, d_in]`, `weight: [d_out, d_in]`, `bias: [d_out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "linear";
        let xs = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        if xs.len() != 2 {
            return Err(TensorError::shape(OP, format!("input must be 2-D, got {xs:?}")));
        }
        if ws.len() != 2 {
            return Err(TensorError::shape(OP, format!("weight must be 2-D, got {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(TensorError::shape(
                OP,
                format!("input features {} differ from weight in_features {}", xs[1], ws[1]),
            ));
        }
        let (n, d_in, d_out) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [d_out] {
                return Err(TensorError::shape(OP, format!("bias has shape {bs:?}, expected [{d_out}]")));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            d_in,
            d_out,
            self.value(x).data(),
            (d_in as isize, 1),
            self.value(weight).data(),
            (1, d_in as isize),
            beta,
            &mut out,
            d_out as isize,
        );
        let value = Tensor::new([n, d_out], out)?;
        let rg = self.rg(&[Some(x), Some(weight), bias]);
        self.push_checked(OP, value, Op::Linear { x, weight, bias }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[Some(a), Some(b)]);
        self.push_checked("add", value, Op::Add(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[Some(a), Some(b)]);
        self.push_checked("mul", value, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let value = self.value(x).map(|v| v * f);
        let rg = self.rg(&[Some(x)]);
        self.push_checked("scale", value, Op::Scale(x, factor), rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[Some(x)]);
        self.push_checked("sum", value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Rows `start..start + len` of a tensor viewed as `[rows, rest...]`.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(TensorError::shape(
                "rows",
                format!("rows {start}..{} out of range for leading extent {}", start + len, shape[0]),
            ));
        }
        let width = self.value(x).len() / shape[0];
        let data = self.value(x).data()[start * width..(start + len) * width].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(value, Op::Rows { input: x, start }, rg))
    }

    /// Per-group mean of the rows of `x: [n, d]`; `groups[i]` in `0..k` is the
    /// group of row `i`. Returns `[k, d]`.
    pub fn group_mean(&mut self, x: Var, groups: &[usize], k: usize) -> Result<Var> {
        const OP: &str = "group_mean";
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::shape(OP, format!("expected 2-D input, got {shape:?}")));
        }
        if groups.len() != shape[0] {
            return Err(TensorError::shape(
                OP,
                format!("{} group labels for {} rows", groups.len(), shape[0]),
            ));
        }
        let d = shape[1];
        let mut counts = vec![0usize; k];
        for &g in groups {
            if g >= k {
                return Err(TensorError::invalid(OP, format!("group {g} outside 0..{k}")));
            }
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(TensorError::invalid(OP, format!("class {empty} has no members")));
        }
        let src = self.value(x);
        let mut sums = vec![T::zero(); k * d];
        for (i, &g) in groups.iter().enumerate() {
            for (acc, &v) in sums[g * d..(g + 1) * d].iter_mut().zip(src.row(i)) {
                *acc = *acc + v;
            }
        }
        for (g, &c) in counts.iter().enumerate() {
            let inv = T::from_f64(c as f64).recip();
            sums[g * d..(g + 1) * d].iter_mut().for_each(|v| *v = *v * inv);
        }
        let value = Tensor::new([k, d], sums)?;
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(value, Op::GroupMean { input: x, groups: groups.to_vec(), counts }, rg))
    }

    /// Pairwise squared Euclidean distances between `queries: [q, d]` and
    /// `centers: [k, d]`, giving `[q, k]`.
    pub fn sq_dist(&mut self, queries: Var, centers: Var) -> Result<Var> {
        const OP: &str = "sq_dist";
        let qs = self.shape(queries).to_vec();
        let cs = self.shape(centers).to_vec();
        if qs.len() != 2 || cs.len() != 2 || qs[1] != cs[1] {
            return Err(TensorError::shape(
                OP,
                format!("queries {qs:?} and centers {cs:?} must be 2-D with equal width"),
            ));
        }
        let (q, k) = (qs[0], cs[0]);
        let qv = self.value(queries);
        let cv = self.value(centers);
        let mut out = Vec::with_capacity(q * k);
        for i in 0..q {
            for j in 0..k {
                let d = qv.row(i).iter().zip(cv.row(j)).fold(T::zero(), |acc, (&a, &b)| {
                    let diff = a - b;
                    acc + diff * diff
                });
                out.push(d);
            }
        }
        let value = Tensor::new([q, k], out)?;
        let rg = self.rg(&[Some(queries), Some(centers)]);
        self.push_checked(OP, value, Op::SqDist { queries, centers }, rg)
    }

    /// Elementwise square root of non-negative input; the derivative at zero is
    /// taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(TensorError::invalid("sqrt", "negative input"));
        }
        let value = self.value(x).map(|v| v.sqrt());
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(value, Op::Sqrt(x), rg))
    }

    /// Row-wise log-softmax of a 2-D tensor, computed with a max shift.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::shape("log_softmax", format!("expected 2-D input, got {shape:?}")));
        }
        let k = shape[1];
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len());
        for row in src.chunks(k) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|&v| T::from_f64(v.as_f64() - lse)));
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[Some(x)]);
        self.push_checked("log_softmax", value, Op::LogSoftmax(x), rg)
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities
    /// `logp: [q, k]`. Probabilities below [`PROB_FLOOR`] are clamped; the
    /// number of clamped rows is reported by [`Graph::clamp_events`].
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "nll";
        let shape = self.shape(logp).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::shape(
                OP,
                format!("log-probabilities {shape:?} do not match {} labels", labels.len()),
            ));
        }
        let k = shape[1];
        let floor = PROB_FLOOR.ln();
        let src = self.value(logp).data();
        let mut total = 0.0f64;
        let mut clamped = Vec::with_capacity(labels.len());
        for (i, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(TensorError::invalid(OP, format!("label {y} outside 0..{k}")));
            }
            let lp = src[i * k + y].as_f64();
            let is_clamped = lp < floor;
            clamped.push(is_clamped);
            total -= if is_clamped { floor } else { lp };
        }
        let value = Tensor::scalar(T::from_f64(total / labels.len() as f64));
        let rg = self.rg(&[Some(logp)]);
        self.push_checked(OP, value, Op::Nll { logp, labels: labels.to_vec(), clamped }, rg)
    }

    /// Scalar view of element `index` (row-major) of `x`.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let n = self.value(x).len();
        if index >= n {
            return Err(TensorError::invalid("select", format!("index {index} outside 0..{n}")));
        }
        let value = Tensor::scalar(self.value(x).data()[index]);
        let rg = self.rg(&[Some(x)]);
        Ok(self.push(value, Op::Select { input: x, index }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar `loss`. Afterwards [`Graph::grad`]
    /// returns d(loss)/d(v) for every node on a differentiable path.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(grad) = self.grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &grad)?;
            self.grads[idx] = Some(grad);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(TensorError::NonFinite { op: op_name(&self.nodes[i].op) });
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: Var, contribution: Vec<T>) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        match &mut self.grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => {
                let shape = self.nodes[target.0].value.shape().to_vec();
                *slot = Some(Tensor { shape, data: contribution });
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, grad: &Tensor<T>) -> Result<()> {
        let op = self.nodes[idx].op.clone();
        let g = grad.data();
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, stride, padding } => {
                let geo = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
                let out_plane = geo.out_h * geo.out_w;
                let out_item = geo.c_out * out_plane;
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    let mut db = vec![T::zero(); geo.c_out];
                    for item in g.chunks(out_item) {
                        for (c, plane) in item.chunks(out_plane).enumerate() {
                            db[c] = plane.iter().fold(db[c], |acc, &v| acc + v);
                        }
                    }
                    self.accumulate(b, db);
                }
                let want_k = self.wants(kernel);
                let want_x = self.wants(input);
                let mut dk = vec![T::zero(); if want_k { geo.c_out * geo.patch() } else { 0 }];
                let mut dx = vec![T::zero(); if want_x { geo.batch * geo.in_item() } else { 0 }];
                let mut cols = vec![T::zero(); geo.patch() * out_plane];
                {
                    let x = self.value(input).data();
                    let k = self.value(kernel).data();
                    for b in 0..geo.batch {
                        let gb = &g[b * out_item..(b + 1) * out_item];
                        if want_k {
                            geo.im2col(&x[b * geo.in_item()..(b + 1) * geo.in_item()], &mut cols);
                            // dK += dOut · colsᵀ
                            T::gemm(
                                geo.c_out,
                                out_plane,
                                geo.patch(),
                                gb,
                                (out_plane as isize, 1),
                                &cols,
                                (1, out_plane as isize),
                                T::one(),
                                &mut dk,
                                geo.patch() as isize,
                            );
                        }
                        if want_x {
                            // dcols = Kᵀ · dOut
                            T::gemm(
                                geo.patch(),
                                geo.c_out,
                                out_plane,
                                k,
                                (1, geo.patch() as isize),
                                gb,
                                (out_plane as isize, 1),
                                T::zero(),
                                &mut cols,
                                out_plane as isize,
                            );
                            geo.col2im_add(&cols, &mut dx[b * geo.in_item()..(b + 1) * geo.in_item()]);
                        }
                    }
                }
                if want_k {
                    self.accumulate(kernel, dk);
                }
                if want_x {
                    self.accumulate(input, dx);
                }
            }
            Op::Relu(x) => {
                let dx = self.value(x).data().iter().zip(g).map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() }).collect();
                self.accumulate(x, dx);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(input).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    dx[src] = dx[src] + gv;
                }
                self.accumulate(input, dx);
            }
            Op::Reshape(x) => self.accumulate(x, g.to_vec()),
            Op::Linear { x, weight, bias } => {
                let (n, d_in) = (self.shape(x)[0], self.shape(x)[1]);
                let d_out = self.shape(weight)[0];
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    let mut db = vec![T::zero(); d_out];
                    for row in g.chunks(d_out) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    self.accumulate(b, db);
                }
                if self.wants(weight) {
                    let mut dw = vec![T::zero(); d_out * d_in];
                    T::gemm(
                        d_out,
                        n,
                        d_in,
                        g,
                        (1, d_out as isize),
                        self.value(x).data(),
                        (d_in as isize, 1),
                        T::zero(),
                        &mut dw,
                        d_in as isize,
                    );
                    self.accumulate(weight, dw);
                }
                if self.wants(x) {
                    let mut dx = vec![T::zero(); n * d_in];
                    T::gemm(
                        n,
                        d_out,
                        d_in,
                        g,
                        (d_out as isize, 1),
                        self.value(weight).data(),
                        (d_in as isize, 1),
                        T::zero(),
                        &mut dx,
                        d_in as isize,
                    );
                    self.accumulate(x, dx);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.to_vec());
                self.accumulate(b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let da = g.iter().zip(self.value(b).data()).map(|(&gv, &v)| gv * v).collect();
                let db = g.iter().zip(self.value(a).data()).map(|(&gv, &v)| gv * v).collect();
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            Op::Scale(x, factor) => {
                let f = T::from_f64(factor);
                self.accumulate(x, g.iter().map(|&v| v * f).collect());
            }
            Op::Sum(x) => {
                let n = self.value(x).len();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::Rows { input, start } => {
                let total = self.value(input).len();
                let width = total / self.shape(input)[0];
                let mut dx = vec![T::zero(); total];
                dx[start * width..start * width + g.len()].copy_from_slice(g);
                self.accumulate(input, dx);
            }
            Op::GroupMean { input, groups, counts } => {
                let d = self.shape(input)[1];
                let mut dx = Vec::with_capacity(self.value(input).len());
                for &grp in &groups {
                    let inv = T::from_f64(counts[grp] as f64).recip();
                    dx.extend(g[grp * d..(grp + 1) * d].iter().map(|&v| v * inv));
                }
                self.accumulate(input, dx);
            }
            Op::SqDist { queries, centers } => {
                let (q, d) = (self.shape(queries)[0], self.shape(queries)[1]);
                let k = self.shape(centers)[0];
                let mut dq = vec![T::zero(); q * d];
                let mut dc = vec![T::zero(); k * d];
                let two = T::from_f64(2.0);
                {
                    let qv = self.value(queries);
                    let cv = self.value(centers);
                    for i in 0..q {
                        for j in 0..k {
                            let gij = g[i * k + j] * two;
                            for (t, (&a, &b)) in qv.row(i).iter().zip(cv.row(j)).enumerate() {
                                let diff = (a - b) * gij;
                                dq[i * d + t] = dq[i * d + t] + diff;
                                dc[j * d + t] = dc[j * d + t] - diff;
                            }
                        }
                    }
                }
                self.accumulate(queries, dq);
                self.accumulate(centers, dc);
            }
            Op::Sqrt(x) => {
                let y = self.nodes[idx].value.data();
                let dx = y
                    .iter()
                    .zip(g)
                    .map(|(&yv, &gv)| if yv > T::zero() { gv / (yv + yv) } else { T::zero() })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::LogSoftmax(x) => {
                // dx_j = g_j - p_j * sum(g), evaluated in f64 so that 1 - p stays
                // resolvable for confident rows.
                let k = self.shape(x)[1];
                let mut dx = Vec::with_capacity(g.len());
                for (row, grow) in self.value(x).data().chunks(k).zip(g.chunks(k)) {
                    let lse = log_sum_exp(row);
                    let gsum: f64 = grow.iter().map(|v| v.as_f64()).sum();
                    dx.extend(row.iter().zip(grow).map(|(&v, &gv)| {
                        let p = (v.as_f64() - lse).exp();
                        T::from_f64(gv.as_f64() - p * gsum)
                    }));
                }
                self.accumulate(x, dx);
            }
            Op::Nll { logp, labels, clamped } => {
                let k = self.shape(logp)[1];
                let scale = -g[0] / T::from_f64(labels.len() as f64);
                let mut dl = vec![T::zero(); labels.len() * k];
                for (i, (&y, &c)) in labels.iter().zip(&clamped).enumerate() {
                    if !c {
                        dl[i * k + y] = scale;
                    }
                }
                self.accumulate(logp, dl);
            }
            Op::Select { input, index } => {
                let mut dx = vec![T::zero(); self.value(input).len()];
                dx[index] = g[0];
                self.accumulate(input, dx);
            }
        }
        Ok(())
    }
}

fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
    max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln()
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu(_) => "relu",
        Op::MaxPool2d { .. } => "max_pool2d",
        Op::Reshape(_) => "reshape",
        Op::Linear { .. } => "linear",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::Rows { .. } => "rows",
        Op::GroupMean { .. } => "group_mean",
        Op::SqDist { .. } => "sq_dist",
        Op::Sqrt(_) => "sqrt",
        Op::LogSoftmax(_) => "log_softmax",
        Op::Nll { .. } => "nll",
        Op::Select { .. } => "select",
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        const OP: &str = "conv2d";
        if input.len() != 4 {
            return Err(TensorError::shape(OP, format!("input must be [batch, c_in, h, w], got {input:?}")));
        }
        if kernel.len() != 4 {
            return Err(TensorError::shape(OP, format!("kernel must be [c_out, c_in, kh, kw], got {kernel:?}")));
        }
        if stride == 0 {
            return Err(TensorError::invalid(OP, "stride must be at least 1"));
        }
        let (batch, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in {
            return Err(TensorError::shape(
                OP,
                format!("input channels {c_in} differ from kernel c_in {kc}"),
            ));
        }
        if kh > h + 2 * padding {
            return Err(TensorError::shape(
                OP,
                format!("kernel height {kh} exceeds padded input height {}", h + 2 * padding),
            ));
        }
        if kw > w + 2 * padding {
            return Err(TensorError::shape(
                OP,
                format!("kernel width {kw} exceeds padded input width {}", w + 2 * padding),
            ));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeometry { batch, c_in, h, w, c_out, kh, kw, stride, padding, out_h, out_w })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn in_item(&self) -> usize {
        self.c_in * self.h * self.w
    }

    /// Source offset within one item for patch row `(c, ky, kx)` at output
    /// position `(oy, ox)`, or `None` inside the zero padding.
    #[inline]
    fn source(&self, c: usize, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            None
        } else {
            Some((c * self.h + y as usize) * self.w + x as usize)
        }
    }

    /// Unfolds one item into `[patch, out_h * out_w]`.
    fn im2col<T: Scalar>(&self, item: &[T], cols: &mut [T]) {
        let plane = self.out_h * self.out_w;
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] =
                                self.source(c, ky, kx, oy, ox).map_or(T::zero(), |s| item[s]);
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], item: &mut [T]) {
        let plane = self.out_h * self.out_w;
        for c in 0..self.c_in {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.out_h {
                        for ox in 0..self.out_w {
                            if let Some(s) = self.source(c, ky, kx, oy, ox) {
                                item[s] = item[s] + src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
