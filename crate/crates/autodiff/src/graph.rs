//! The computation tape and every differentiable operator.

use rustfft::num_complex::Complex;

use crate::error::{shape_err, AutodiffError, Result};
use crate::real::{axpy, dot, Real};
use crate::spectral::{SpectralPlan, StftConfig};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch normalisation behaviour.
#[derive(Clone, Debug)]
pub enum BatchNormMode<T> {
    /// Normalise with the statistics of the current batch.
    Train { eps: f64 },
    /// Normalise with stored statistics; the batch does not influence them.
    Frozen { mean: Vec<T>, var: Vec<T>, eps: f64 },
}

/// Per-channel statistics observed by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T: Real> {
    Leaf,
    StopGrad,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Pad { x: Var, axis: usize, before: usize },
    Conv1d { x: Var, w: Var, b: Option<Var>, dilation: usize },
    AvgPool { x: Var, factor: usize },
    Upsample { x: Var, factor: usize, offset: f64 },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Stft { x: Var, cfg: StftConfig, spectra: Vec<Complex<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Passes the value through; no gradient flows back past this node.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, c), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let v = self.value(x).map(|e| e + c);
        let rg = self.rg(x);
        self.push(v, Op::AddScalar(x), rg)
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                axpy(va[i * k + p], &vb[p * n..(p + 1) * n], &mut out[i * n..(i + 1) * n]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        self.unary(x, move |v| if v > T::zero() { v } else { v * s }, Op::LeakyRelu(x, s))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// WaveNet gate, `tanh(filter) * sigmoid(gate)`.
    pub fn gated(&mut self, filter: Var, gate: Var) -> Result<Var> {
        let t = self.tanh(filter);
        let s = self.sigmoid(gate);
        self.mul(t, s)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let v = Tensor::scalar(self.value(x).sum() / T::lit(n as f64));
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Mean absolute error between equally shaped nodes.
    pub fn mae(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Mean squared error between equally shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let d = self.square(d);
        Ok(self.mean(d))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(format!("slice {start}..{} out of range on axis {axis} of {shape:?}", start + len));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return shape_err("concat of zero tensors");
        };
        let base_shape = self.shape(first).to_vec();
        if axis >= base_shape.len() {
            return shape_err(format!("concat axis {axis} out of range for {base_shape:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return shape_err(format!("concat: {s:?} incompatible with {base_shape:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut new_shape = base_shape;
        new_shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Concat { xs: xs.to_vec(), axis }, rg))
    }

    /// Zero padding along one axis.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return shape_err(format!("pad axis {axis} out of range for {shape:?}"));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let m = n + before + after;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * m * inner];
        for o in 0..outer {
            let dst = (o * m + before) * inner;
            out[dst..dst + n * inner].copy_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = m;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Pad { x, axis, before }, rg))
    }

    /// Valid dilated 1-D cross-correlation.
    ///
    /// `x: [batch, in, time]`, `w: [out, in, k]`, `b: [out]`,
    /// output `[batch, out, time - (k - 1) * dilation]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || dilation == 0 {
            return shape_err(format!("conv1d: input {sx:?} and kernel {sw:?} (dilation {dilation})"));
        }
        let (bsz, cin, t) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let span = (k - 1) * dilation + 1;
        if t < span {
            return shape_err(format!("conv1d: input length {t} shorter than receptive field {span}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err(format!("conv1d: bias shape {:?}, expected [{cout}]", self.shape(b)));
            }
        }
        let to = t - span + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); bsz * cout * to];
        for bi in 0..bsz {
            for o in 0..cout {
                let dst = &mut out[(bi * cout + o) * to..(bi * cout + o + 1) * to];
                if let Some(b) = b {
                    let bias = self.nodes[b.0].value.data()[o];
                    dst.iter_mut().for_each(|v| *v = bias);
                }
                for i in 0..cin {
                    let src = &xv[(bi * cin + i) * t..(bi * cin + i + 1) * t];
                    for kk in 0..k {
                        let wt = wv[(o * cin + i) * k + kk];
                        let off = kk * dilation;
                        axpy(wt, &src[off..off + to], dst);
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(&[bsz, cout, to], out)?, Op::Conv1d { x, w, b, dilation }, rg))
    }

    /// Non-overlapping average pooling along the last axis; a trailing
    /// remainder shorter than `factor` is dropped.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&t) = shape.last() else {
            return shape_err("avg_pool of a scalar");
        };
        if factor == 0 || t < factor {
            return shape_err(format!("avg_pool: length {t} with factor {factor}"));
        }
        let to = t / factor;
        let rows = self.value(x).len() / t;
        let src = self.value(x).data();
        let inv = T::lit(1.0 / factor as f64);
        let mut out = Vec::with_capacity(rows * to);
        for r in 0..rows {
            let row = &src[r * t..(r + 1) * t];
            for j in 0..to {
                let s: T = row[j * factor..(j + 1) * factor].iter().copied().sum();
                out.push(s * inv);
            }
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = to;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::AvgPool { x, factor }, rg))
    }

    /// Linear interpolation along the last axis. Output sample `t` reads the
    /// input at fractional position `(t - offset) / factor`, clamped to the
    /// knot range.
    pub fn upsample_linear(&mut self, x: Var, factor: usize, offset: f64, out_len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&n) = shape.last() else {
            return shape_err("upsample of a scalar");
        };
        if n == 0 || factor == 0 {
            return shape_err(format!("upsample: {n} knots with factor {factor}"));
        }
        let rows = self.value(x).len() / n;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * out_len);
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            for t in 0..out_len {
                let (i0, frac) = interp_pos(t, factor, offset, n);
                let v = if frac == 0.0 {
                    row[i0]
                } else {
                    let f = T::lit(frac);
                    row[i0] * (T::one() - f) + row[i0 + 1] * f
                };
                out.push(v);
            }
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = out_len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Upsample { x, factor, offset }, rg))
    }

    /// Batch normalisation over `[batch, channels, time]` with per-channel
    /// affine parameters. Returns the batch statistics in training mode.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &BatchNormMode<T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return shape_err(format!("batch_norm expects [batch, channels, time], got {shape:?}"));
        }
        let (bsz, c, t) = (shape[0], shape[1], shape[2]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm: affine parameter shape mismatch");
        }
        let xv = self.value(x).data();
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                let n = T::lit((bsz * t) as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..bsz {
                        s += xv[(bi * c + ch) * t..(bi * c + ch + 1) * t].iter().copied().sum();
                    }
                    let m = s / n;
                    let mut q = T::zero();
                    for bi in 0..bsz {
                        q += xv[(bi * c + ch) * t..(bi * c + ch + 1) * t].iter().map(|&v| (v - m) * (v - m)).sum();
                    }
                    mean[ch] = m;
                    var[ch] = q / n;
                }
                (mean, var, *eps, true)
            }
            BatchNormMode::Frozen { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("batch_norm: running statistics shape mismatch");
                }
                (mean.clone(), var.clone(), *eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::lit(eps)).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..bsz {
            for ch in 0..c {
                let base = (bi * c + ch) * t;
                for i in base..base + t {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + be[ch];
                }
            }
        }
        let stats = train.then(|| BatchStats { mean, var });
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            rg,
        );
        Ok((v, stats))
    }

    /// Log-magnitude STFT of `[batch, time]` (or `[time]`), producing
    /// `[batch, frames, bins]`.
    pub fn stft_log_mag(&mut self, x: Var, cfg: StftConfig) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (bsz, t) = match shape.as_slice() {
            [t] => (1, *t),
            [b, t] => (*b, *t),
            _ => return shape_err(format!("stft expects [batch, time], got {shape:?}")),
        };
        cfg.validate(t)?;
        let plan = SpectralPlan::new(cfg);
        let frames = cfg.n_frames(t);
        let bins = cfg.n_bins();
        let xv = self.value(x).data();
        let mut spectra = Vec::with_capacity(bsz * frames * bins);
        for bi in 0..bsz {
            spectra.extend(plan.spectra(&xv[bi * t..(bi + 1) * t]));
        }
        let out = plan.log_mag(&spectra);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[bsz, frames, bins], out)?, Op::Stft { x, cfg, spectra }, rg))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate across calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(AutodiffError::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut local: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        local[root.0] = Some(Tensor::ones(self.shape(root)));
        for i in (0..=root.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut local);
            match &mut self.grads[i] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, local: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        let mut send = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = local[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::Add(a, b) => {
                send(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
                send(*b, &|d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                send(*a, &|d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x += y));
                send(*b, &|d| d.iter_mut().zip(gd).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|d| {
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(vb) {
                        *x += y * o;
                    }
                });
                send(*b, &|d| {
                    for ((x, &y), &o) in d.iter_mut().zip(gd).zip(va) {
                        *x += y * o;
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &|d| axpy(*c, gd, d)),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, &|d| axpy(T::one(), gd, d)),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|d| {
                    for r in 0..m {
                        for p in 0..k {
                            d[r * k + p] += dot(&gd[r * n..(r + 1) * n], &vb[p * n..(p + 1) * n]);
                        }
                    }
                });
                send(*b, &|d| {
                    for r in 0..m {
                        for p in 0..k {
                            axpy(va[r * k + p], &gd[r * n..(r + 1) * n], &mut d[p * n..(p + 1) * n]);
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                send(*a, &|d| {
                    for ((x, &gi), &yi) in d.iter_mut().zip(gd).zip(y) {
                        *x += gi * (T::one() - yi * yi);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                send(*a, &|d| {
                    for ((x, &gi), &yi) in d.iter_mut().zip(gd).zip(y) {
                        *x += gi * yi * (T::one() - yi);
                    }
                });
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                send(*a, &|d| {
                    for ((x, &gi), &xi) in d.iter_mut().zip(gd).zip(xv) {
                        if xi > T::zero() {
                            *x += gi;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, s) => {
                let xv = self.value(*a).data();
                send(*a, &|d| {
                    for ((x, &gi), &xi) in d.iter_mut().zip(gd).zip(xv) {
                        *x += if xi > T::zero() { gi } else { gi * *s };
                    }
                });
            }
            Op::Abs(a) => {
                let xv = self.value(*a).data();
                send(*a, &|d| {
                    for ((x, &gi), &xi) in d.iter_mut().zip(gd).zip(xv) {
                        if xi > T::zero() {
                            *x += gi;
                        } else if xi < T::zero() {
                            *x -= gi;
                        }
                    }
                });
            }
            Op::Square(a) => {
                let xv = self.value(*a).data();
                send(*a, &|d| {
                    for ((x, &gi), &xi) in d.iter_mut().zip(gd).zip(xv) {
                        *x += gi * (xi + xi);
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                send(*a, &|d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1);
                let g0 = gd[0] / T::lit(n as f64);
                send(*a, &|d| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, n, inner) = axis_split(shape, *axis);
                let len = node.value.shape()[*axis];
                send(*x, &|d| {
                    for o in 0..outer {
                        let base = (o * n + start) * inner;
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        axpy(T::one(), src, &mut d[base..base + len * inner]);
                    }
                });
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    let off = offset;
                    send(v, &|d| {
                        for o in 0..outer {
                            let src = &gd[(o * total + off) * inner..(o * total + off + n) * inner];
                            axpy(T::one(), src, &mut d[o * n * inner..(o + 1) * n * inner]);
                        }
                    });
                    offset += n;
                }
            }
            Op::Pad { x, axis, before } => {
                let (outer, n, inner) = axis_split(self.shape(*x), *axis);
                let m = node.value.shape()[*axis];
                send(*x, &|d| {
                    for o in 0..outer {
                        let src = (o * m + before) * inner;
                        axpy(T::one(), &gd[src..src + n * inner], &mut d[o * n * inner..(o + 1) * n * inner]);
                    }
                });
            }
            Op::Conv1d { x, w, b, dilation } => self.conv1d_backward(node, *x, *w, *b, *dilation, gd, &mut send),
            Op::AvgPool { x, factor } => {
                let t = *self.shape(*x).last().unwrap();
                let to = *node.value.shape().last().unwrap();
                let rows = self.value(*x).len() / t;
                let inv = T::lit(1.0 / *factor as f64);
                send(*x, &|d| {
                    for r in 0..rows {
                        for j in 0..to {
                            let gj = gd[r * to + j] * inv;
                            for q in 0..*factor {
                                d[r * t + j * factor + q] += gj;
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, factor, offset } => {
                let n = *self.shape(*x).last().unwrap();
                let out_len = *node.value.shape().last().unwrap();
                let rows = self.value(*x).len() / n;
                send(*x, &|d| {
                    for r in 0..rows {
                        for t in 0..out_len {
                            let gi = gd[r * out_len + t];
                            let (i0, frac) = interp_pos(t, *factor, *offset, n);
                            if frac == 0.0 {
                                d[r * n + i0] += gi;
                            } else {
                                let f = T::lit(frac);
                                d[r * n + i0] += gi * (T::one() - f);
                                d[r * n + i0 + 1] += gi * f;
                            }
                        }
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let shape = self.shape(*x);
                let (bsz, c, t) = (shape[0], shape[1], shape[2]);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..bsz {
                    for ch in 0..c {
                        let base = (bi * c + ch) * t;
                        sum_g[ch] += gd[base..base + t].iter().copied().sum();
                        sum_gx[ch] += dot(&gd[base..base + t], &xhat[base..base + t]);
                    }
                }
                send(*gamma, &|d| axpy(T::one(), &sum_gx, d));
                send(*beta, &|d| axpy(T::one(), &sum_g, d));
                let n = T::lit((bsz * t) as f64);
                send(*x, &|d| {
                    for bi in 0..bsz {
                        for ch in 0..c {
                            let base = (bi * c + ch) * t;
                            let k = gam[ch] * inv_std[ch];
                            for i in base..base + t {
                                d[i] += if *train {
                                    k * (gd[i] - sum_g[ch] / n - xhat[i] * sum_gx[ch] / n)
                                } else {
                                    k * gd[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Stft { x, cfg, spectra } => {
                let shape = self.shape(*x);
                let t = *shape.last().unwrap();
                let bsz = self.value(*x).len() / t;
                let plan = SpectralPlan::<T>::new(*cfg);
                let per = cfg.n_frames(t) * cfg.n_bins();
                send(*x, &|d| {
                    for bi in 0..bsz {
                        plan.backward(
                            &spectra[bi * per..(bi + 1) * per],
                            &gd[bi * per..(bi + 1) * per],
                            &mut d[bi * t..(bi + 1) * t],
                        );
                    }
                });
            }
        }
    }

    fn conv1d_backward(
        &self,
        node: &Node<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
        gd: &[T],
        send: &mut impl FnMut(Var, &dyn Fn(&mut [T])),
    ) {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (bsz, cin, t) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let to = node.value.shape()[2];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if let Some(b) = b {
            send(b, &|d| {
                for bi in 0..bsz {
                    for o in 0..cout {
                        d[o] += gd[(bi * cout + o) * to..(bi * cout + o + 1) * to].iter().copied().sum();
                    }
                }
            });
        }
        send(w, &|d| {
            for bi in 0..bsz {
                for o in 0..cout {
                    let go = &gd[(bi * cout + o) * to..(bi * cout + o + 1) * to];
                    for i in 0..cin {
                        let src = &xv[(bi * cin + i) * t..(bi * cin + i + 1) * t];
                        for kk in 0..k {
                            let off = kk * dilation;
                            d[(o * cin + i) * k + kk] += dot(go, &src[off..off + to]);
                        }
                    }
                }
            }
        });
        send(x, &|d| {
            for bi in 0..bsz {
                for o in 0..cout {
                    let go = &gd[(bi * cout + o) * to..(bi * cout + o + 1) * to];
                    for i in 0..cin {
                        let dst = &mut d[(bi * cin + i) * t..(bi * cin + i + 1) * t];
                        for kk in 0..k {
                            let off = kk * dilation;
                            axpy(wv[(o * cin + i) * k + kk], go, &mut dst[off..off + to]);
                        }
                    }
                }
            }
        });
    }
}

/// Knot index and interpolation weight for output sample `t`.
#[inline]
fn interp_pos(t: usize, factor: usize, offset: f64, n: usize) -> (usize, f64) {
    let pos = ((t as f64 - offset) / factor as f64).clamp(0.0, (n - 1) as f64);
    let i0 = (pos.floor() as usize).min(n - 1);
    let frac = pos - i0 as f64;
    if i0 == n - 1 {
        (i0, 0.0)
    } else {
        (i0, frac)
    }
}
