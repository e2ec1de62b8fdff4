use super::conv::{self, ConvGeometry};
use super::{FactorizedConv, Real, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<R> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, R),
    AddScalar(Var),
    LeakyRelu(Var, R),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    LogSigmoid(Var),
    Square(Var),
    Abs(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Take { x: Var, axis: usize, indices: Vec<usize> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    ConvTranspose { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    AvgPool2d { x: Var, size: usize },
    Stencil3x3 { x: Var, kernel: [[R; 3]; 3] },
    CrossEntropy { x: Var, labels: Vec<usize>, probs: Vec<R> },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
    grad: Option<Tensor<R>>,
}

/// Append-only computation tape.
///
/// Nodes are stored in creation order, which is a valid topological order, so
/// the backward pass is a single reverse sweep.
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn accumulate<R: Real>(slot: &mut Option<Tensor<R>>, g: Tensor<R>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(g.data) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

fn zip_map<R: Real>(a: &Tensor<R>, b: &Tensor<R>, f: impl Fn(R, R) -> R) -> Tensor<R> {
    Tensor::from_parts(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Row-wise softmax of a row-major `[n, k]` buffer.
pub fn softmax_rows<R: Real>(data: &[R], k: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().copied().fold(R::neg_infinity(), R::max);
        let e: Vec<R> = row.iter().map(|&v| (v - m).exp()).collect();
        let z = e.iter().copied().fold(R::zero(), |a, b| a + b);
        out.extend(e.into_iter().map(|v| v / z));
    }
    out
}

/// Clamped ("replicate") index into `0..n`.
#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf node. Gradients are collected for it only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<R>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Copies the value into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
        op: Op<R>,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(mismatch(name, &va.shape, &vb.shape));
        }
        let out = zip_map(va, vb, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: R) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: R) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: R) -> Result<Var> {
        if !(slope > R::zero() && slope < R::one()) {
            return Err(TensorError::InvalidArgument(format!(
                "leaky_relu slope {slope} outside (0, 1)"
            )));
        }
        Ok(self.unary(
            a,
            |x| if x > R::zero() { x } else { x * slope },
            Op::LeakyRelu(a, slope),
        ))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &v)) = self
            .value(a)
            .data
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v > R::zero()))
        {
            return Err(TensorError::Domain {
                op: "log",
                index,
                value: v.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(self.unary(a, |x| x.ln(), Op::Log(a)))
    }

    /// `log σ(x)`, evaluated without forming `σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / R::c(v.len() as f64);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_elsewhere = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !same_elsewhere {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::InvalidArgument(format!(
                "slice [{start}, {}) on axis {axis} of shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    /// Picks entry `indices[n]` along `axis` for every batch item `n`, keeping
    /// the axis with extent 1. `axis` must be ≥ 1.
    pub fn take_per_batch(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis == 0 || axis >= shape.len() || indices.len() != shape[0] {
            return Err(TensorError::InvalidArgument(format!(
                "take_per_batch axis {axis} with {} indices on shape {shape:?}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(TensorError::InvalidArgument(format!(
                "index {bad} out of range for extent {}",
                shape[axis]
            )));
        }
        let mid: usize = shape[1..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(shape[0] * mid * inner);
        for (n, &idx) in indices.iter().enumerate() {
            for m in 0..mid {
                let base = ((n * mid + m) * shape[axis] + idx) * inner;
                data.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Take {
                x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of logits `[n, k]` against class `labels`.
    pub fn cross_entropy(&mut self, x: Var, labels: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(TensorError::InvalidArgument(format!(
                "cross_entropy: {} labels for logits {xs:?}",
                labels.len()
            )));
        }
        let k = xs[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let probs = softmax_rows(&self.value(x).data, k);
        let mut loss = R::zero();
        for (n, &l) in labels.iter().enumerate() {
            let row = &self.value(x).data[n * k..(n + 1) * k];
            let m = row.iter().copied().fold(R::neg_infinity(), R::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).fold(R::zero(), |a, b| a + b).ln();
            loss = loss + lse - row[l];
        }
        let loss = loss / R::c(labels.len() as f64);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                x,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `y = x·wᵀ + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(mismatch("linear", xs, ws));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(mismatch("linear bias", &[fout], self.shape(b)));
            }
        }
        let mut y = vec![R::zero(); n * fout];
        let beta = if let Some(b) = b {
            let bias = &self.value(b).data;
            for row in y.chunks_mut(fout) {
                row.copy_from_slice(bias);
            }
            R::one()
        } else {
            R::zero()
        };
        R::gemm(
            n,
            fin,
            fout,
            &self.value(x).data,
            false,
            &self.value(w).data,
            true,
            beta,
            &mut y,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(vec![n, fout], y),
            Op::Linear { x, w, b },
            rg,
        ))
    }

    fn conv_shapes(
        &self,
        name: &'static str,
        x: Var,
        w: Var,
        b: Option<Var>,
        bias_len: usize,
    ) -> Result<(usize, usize, [usize; 3], [usize; 3])> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 5 || ws.len() != 5 {
            return Err(mismatch(name, xs, ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [bias_len] {
                return Err(mismatch(name, &[bias_len], self.shape(b)));
            }
        }
        Ok((
            xs[0],
            xs[1],
            [xs[2], xs[3], xs[4]],
            [ws[2], ws[3], ws[4]],
        ))
    }

    /// Dense 3D convolution. `x: [N, Ci, D, H, W]`, `w: [Co, Ci, kd, kh, kw]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let co = self.shape(w)[0];
        let (n, ci, input, kernel) = self.conv_shapes("conv3d", x, w, b, co)?;
        if self.shape(w)[1] != ci {
            return Err(mismatch("conv3d channels", self.shape(x), self.shape(w)));
        }
        let geom = ConvGeometry::forward(input, kernel, stride, padding)?;
        let y = conv::conv3d_forward(
            &self.value(x).data,
            n,
            ci,
            co,
            &self.value(w).data,
            b.map(|b| self.value(b).data.as_slice()),
            &geom,
        );
        let [od, oh, ow] = geom.output;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(vec![n, co, od, oh, ow], y),
            Op::Conv { x, w, b, geom },
            rg,
        ))
    }

    /// Adjoint of [`Graph::conv3d`]. `x: [N, Ci, D, H, W]`, `w: [Ci, Co, kd, kh, kw]`;
    /// output extents are `(in − 1)·stride − 2·padding + kernel`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var> {
        let co = self.shape(w)[1];
        let (n, ci, small, kernel) = self.conv_shapes("conv_transpose3d", x, w, b, co)?;
        if self.shape(w)[0] != ci {
            return Err(mismatch(
                "conv_transpose3d channels",
                self.shape(x),
                self.shape(w),
            ));
        }
        let geom = ConvGeometry::transpose(small, kernel, stride, padding)?;
        let y = conv::conv_transpose3d_forward(
            &self.value(x).data,
            n,
            ci,
            co,
            &self.value(w).data,
            b.map(|b| self.value(b).data.as_slice()),
            &geom,
        );
        let [d, h, wd] = geom.input;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::from_parts(vec![n, co, d, h, wd], y),
            Op::ConvTranspose { x, w, b, geom },
            rg,
        ))
    }

    /// Factorized (1+2)D convolution: spatial `[Cm, Ci, 1, k, k]` then temporal
    /// `[Co, Cm, k, 1, 1]`. The optional bias is added after the temporal factor.
    pub fn conv_1p2d(
        &mut self,
        x: Var,
        spatial: Var,
        temporal: Var,
        bias: Option<Var>,
        cfg: FactorizedConv,
    ) -> Result<Var> {
        check_factor_kernels(self.shape(spatial), self.shape(temporal))?;
        let (s_stride, s_pad) = cfg.spatial();
        let (t_stride, t_pad) = cfg.temporal();
        let h = self.conv3d(x, spatial, None, s_stride, s_pad)?;
        self.conv3d(h, temporal, bias, t_stride, t_pad)
    }

    /// Adjoint of [`Graph::conv_1p2d`] for the same kernels: temporal transpose
    /// first, then spatial transpose. Kernels keep the forward layout.
    pub fn conv_transpose_1p2d(
        &mut self,
        x: Var,
        spatial: Var,
        temporal: Var,
        bias: Option<Var>,
        cfg: FactorizedConv,
    ) -> Result<Var> {
        check_factor_kernels(self.shape(spatial), self.shape(temporal))?;
        let (s_stride, s_pad) = cfg.spatial();
        let (t_stride, t_pad) = cfg.temporal();
        let h = self.conv_transpose3d(x, temporal, None, t_stride, t_pad)?;
        self.conv_transpose3d(h, spatial, bias, s_stride, s_pad)
    }

    /// Mean over non-overlapping `size×size` windows of the last two axes.
    pub fn avg_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || size == 0 || shape[r - 1] % size != 0 || shape[r - 2] % size != 0 {
            return Err(TensorError::InvalidArgument(format!(
                "avg_pool2d size {size} does not divide {shape:?}"
            )));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let (oh, ow) = (h / size, w / size);
        let planes: usize = shape[..r - 2].iter().product();
        let src = &self.value(x).data;
        let norm = R::c(1.0 / (size * size) as f64);
        let mut out = vec![R::zero(); planes * oh * ow];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let o = p * oh * ow + (y / size) * ow + xx / size;
                    out[o] = out[o] + plane[y * w + xx];
                }
            }
        }
        for v in &mut out {
            *v = *v * norm;
        }
        let mut out_shape = shape;
        out_shape[r - 2] = oh;
        out_shape[r - 1] = ow;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::AvgPool2d { x, size },
            rg,
        ))
    }

    /// 3×3 correlation over the last two axes with replicated borders.
    /// `kernel[dy+1][dx+1]` weights the neighbour at offset `(dy, dx)`.
    pub fn stencil3x3(&mut self, x: Var, kernel: [[R; 3]; 3]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(TensorError::InvalidArgument(format!(
                "stencil3x3 needs rank ≥ 2, got {shape:?}"
            )));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let planes: usize = shape[..r - 2].iter().product();
        let src = &self.value(x).data;
        let mut out = vec![R::zero(); src.len()];
        for p in 0..planes {
            let off = p * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = R::zero();
                    for (ky, row) in kernel.iter().enumerate() {
                        let yy = clamp_idx(y as isize + ky as isize - 1, h);
                        for (kx, &k) in row.iter().enumerate() {
                            if k == R::zero() {
                                continue;
                            }
                            let xi = clamp_idx(xx as isize + kx as isize - 1, w);
                            acc = acc + k * src[off + yy * w + xi];
                        }
                    }
                    out[off + y * w + xx] = acc;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Stencil3x3 { x, kernel },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// reachable leaf that requires them; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![R::one()]));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                if self.nodes[i].requires_grad {
                    accumulate(&mut self.nodes[i].grad, g);
                }
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Tensor<R>>], v: Var, g: Tensor<R>) {
        if self.rg(v) {
            accumulate(&mut grads[v.0], g);
        }
    }

    fn propagate(&self, i: usize, g: Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*b) {
                    self.send(grads, *b, g.clone());
                }
                self.send(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.rg(*b) {
                    self.send(grads, *b, g.map(|v| -v));
                }
                self.send(grads, *a, g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.send(grads, *a, zip_map(&g, self.value(*b), |g, y| g * y));
                }
                if self.rg(*b) {
                    self.send(grads, *b, zip_map(&g, self.value(*a), |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.rg(*a) {
                    self.send(grads, *a, zip_map(&g, vb, |g, y| g / y));
                }
                if self.rg(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = zip_map(&g, out, |g, q| g * q);
                    self.send(grads, *b, zip_map(&t, vb, |t, y| -t / y));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.send(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.send(grads, *a, Tensor::from_parts(shape, g.data));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let d = zip_map(&g, self.value(*a), |g, x| {
                    if x > R::zero() {
                        g
                    } else {
                        g * slope
                    }
                });
                self.send(grads, *a, d);
            }
            Op::Tanh(a) => {
                self.send(grads, *a, zip_map(&g, out, |g, y| g * (R::one() - y * y)));
            }
            Op::Sigmoid(a) => {
                self.send(grads, *a, zip_map(&g, out, |g, y| g * y * (R::one() - y)));
            }
            Op::Log(a) => {
                self.send(grads, *a, zip_map(&g, self.value(*a), |g, x| g / x));
            }
            Op::LogSigmoid(a) => {
                self.send(grads, *a, zip_map(&g, self.value(*a), |g, x| g * sigmoid(-x)));
            }
            Op::Square(a) => {
                let two = R::c(2.0);
                self.send(grads, *a, zip_map(&g, self.value(*a), |g, x| two * g * x));
            }
            Op::Abs(a) => {
                let d = zip_map(&g, self.value(*a), |g, x| {
                    if x > R::zero() {
                        g
                    } else if x < R::zero() {
                        -g
                    } else {
                        R::zero()
                    }
                });
                self.send(grads, *a, d);
            }
            Op::Sum(a) | Op::Mean(a) => {
                let va = self.value(*a);
                let mut s = g.item();
                if matches!(node.op, Op::Mean(_)) {
                    s = s / R::c(va.len() as f64);
                }
                self.send(grads, *a, Tensor::full(&va.shape, s));
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let shape = &out.shape;
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut offset = 0;
                for &v in inputs {
                    let vs = self.shape(v);
                    let chunk = vs[axis] * inner;
                    if self.rg(v) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            let base = o * shape[axis] * inner + offset;
                            data.extend_from_slice(&g.data[base..base + chunk]);
                        }
                        self.send(grads, v, Tensor::from_parts(vs.to_vec(), data));
                    }
                    offset += chunk;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (axis, start) = (*axis, *start);
                let outer: usize = xs[..axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let len = out.shape[axis];
                let mut d = vec![R::zero(); xs.iter().product()];
                for o in 0..outer {
                    let dst = (o * xs[axis] + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data[src..src + len * inner]);
                }
                self.send(grads, *x, Tensor::from_parts(xs.to_vec(), d));
            }
            Op::Take { x, axis, indices } => {
                let xs = self.shape(*x);
                let axis = *axis;
                let mid: usize = xs[1..axis].iter().product();
                let inner: usize = xs[axis + 1..].iter().product();
                let mut d = vec![R::zero(); xs.iter().product()];
                let mut src = 0;
                for (n, &idx) in indices.iter().enumerate() {
                    for m in 0..mid {
                        let dst = ((n * mid + m) * xs[axis] + idx) * inner;
                        d[dst..dst + inner].copy_from_slice(&g.data[src..src + inner]);
                        src += inner;
                    }
                }
                self.send(grads, *x, Tensor::from_parts(xs.to_vec(), d));
            }
            Op::CrossEntropy { x, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g.data[0] / R::c(n as f64);
                let mut d: Vec<R> = probs.iter().map(|&p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] = d[i * k + l] - scale;
                }
                self.send(grads, *x, Tensor::from_parts(vec![n, k], d));
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let (n, fin, fout) = (vx.shape[0], vx.shape[1], vw.shape[0]);
                if self.rg(*x) {
                    let mut d = vec![R::zero(); n * fin];
                    R::gemm(n, fout, fin, &g.data, false, &vw.data, false, R::zero(), &mut d);
                    self.send(grads, *x, Tensor::from_parts(vx.shape.clone(), d));
                }
                if self.rg(*w) {
                    let mut d = vec![R::zero(); fout * fin];
                    R::gemm(fout, n, fin, &g.data, true, &vx.data, false, R::zero(), &mut d);
                    self.send(grads, *w, Tensor::from_parts(vw.shape.clone(), d));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut d = vec![R::zero(); fout];
                    for row in g.data.chunks(fout) {
                        for (a, &v) in d.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    self.send(grads, b, Tensor::from_parts(vec![fout], d));
                }
            }
            Op::Conv { x, w, b, geom } | Op::ConvTranspose { x, w, b, geom } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let need = [
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                ];
                let n = vx.shape[0];
                let (dx, dw, db) = if matches!(node.op, Op::Conv { .. }) {
                    conv::conv3d_backward(
                        &vx.data, n, vw.shape[1], vw.shape[0], &vw.data, &g.data, geom, need,
                    )
                } else {
                    conv::conv_transpose3d_backward(
                        &vx.data, n, vw.shape[0], vw.shape[1], &vw.data, &g.data, geom, need,
                    )
                };
                if let Some(d) = dx {
                    self.send(grads, *x, Tensor::from_parts(vx.shape.clone(), d));
                }
                if let Some(d) = dw {
                    self.send(grads, *w, Tensor::from_parts(vw.shape.clone(), d));
                }
                if let (Some(d), Some(b)) = (db, b) {
                    self.send(grads, *b, Tensor::from_parts(vec![d.len()], d));
                }
            }
            Op::AvgPool2d { x, size } => {
                let xs = self.shape(*x);
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let (oh, ow) = (h / size, w / size);
                let norm = R::c(1.0 / (size * size) as f64);
                let planes: usize = xs[..r - 2].iter().product();
                let mut d = vec![R::zero(); planes * h * w];
                for p in 0..planes {
                    for y in 0..h {
                        for xx in 0..w {
                            d[p * h * w + y * w + xx] =
                                g.data[p * oh * ow + (y / size) * ow + xx / size] * norm;
                        }
                    }
                }
                self.send(grads, *x, Tensor::from_parts(xs.to_vec(), d));
            }
            Op::Stencil3x3 { x, kernel } => {
                let xs = self.shape(*x);
                let r = xs.len();
                let (h, w) = (xs[r - 2], xs[r - 1]);
                let planes: usize = xs[..r - 2].iter().product();
                let mut d = vec![R::zero(); g.data.len()];
                for p in 0..planes {
                    let off = p * h * w;
                    for y in 0..h {
                        for xx in 0..w {
                            let gv = g.data[off + y * w + xx];
                            for (ky, row) in kernel.iter().enumerate() {
                                let yy = clamp_idx(y as isize + ky as isize - 1, h);
                                for (kx, &k) in row.iter().enumerate() {
                                    if k == R::zero() {
                                        continue;
                                    }
                                    let xi = clamp_idx(xx as isize + kx as isize - 1, w);
                                    let j = off + yy * w + xi;
                                    d[j] = d[j] + k * gv;
                                }
                            }
                        }
                    }
                }
                self.send(grads, *x, Tensor::from_parts(xs.to_vec(), d));
            }
        }
    }
}

fn check_factor_kernels(spatial: &[usize], temporal: &[usize]) -> Result<()> {
    let ok = spatial.len() == 5
        && temporal.len() == 5
        && spatial[2] == 1
        && temporal[3] == 1
        && temporal[4] == 1;
    if !ok {
        return Err(TensorError::InvalidConv(format!(
            "factorized kernels must be spatial [_, _, 1, k, k] and temporal [_, _, k, 1, 1], got {spatial:?} and {temporal:?}"
        )));
    }
    Ok(())
}

pub(crate) fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

pub(crate) fn log_sigmoid<R: Real>(x: R) -> R {
    // min(x, 0) − log1p(exp(−|x|))
    x.min(R::zero()) - (-x.abs()).exp().ln_1p()
}
