use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, bilinear_taps, col2im_add, im2col, permute_copy, ConvGeom, MatView};
use super::shape::{broadcast_shapes, broadcast_strides, for_each2, numel, split_at_axis};
use super::{Real, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Log,
    Abs,
    Relu,
    Sigmoid,
}

/// Domain handling for `log` and `div`.
#[derive(Debug, Clone, Copy)]
pub struct TapeConfig<T> {
    /// Reject non-positive `log` operands and zero divisors instead of clamping.
    pub strict: bool,
    /// Clamp floor used when `strict` is off.
    pub epsilon: T,
}

impl<T: Real> Default for TapeConfig<T> {
    fn default() -> Self {
        Self { strict: false, epsilon: T::of(1e-12) }
    }
}

/// Warning counters accumulated during a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Diagnostics {
    pub domain_clamps: usize,
    pub ref_point_clamps: usize,
    pub log_prob_clamps: usize,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Scale(Var, T),
    AddScalar(Var),
    Clamp(Var, T, T),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, bias: Option<Var>, geom: ConvGeom },
    Bilinear(Var, Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, gamma: Var, beta: Var, axis: usize, xhat: Vec<T>, rstd: Vec<T> },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    Sum(Var),
    SumAxis(Var, usize),
    BroadcastTo(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of every differentiable leaf, indexed by the leaf's [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Single-owner record of executed ops. Nodes are stored in execution order,
/// so every op's inputs precede it and backward is a reverse scan.
#[derive(Debug, Clone)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    config: TapeConfig<T>,
    diagnostics: Diagnostics,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<V>(msg: alloc::string::String) -> Result<V> {
    Err(TensorError::Shape(msg))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_config(TapeConfig::default())
    }

    pub fn with_config(config: TapeConfig<T>) -> Self {
        Self { nodes: Vec::new(), config, diagnostics: Diagnostics::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn diagnostics(&self) -> Diagnostics {
        self.diagnostics
    }

    pub fn diagnostics_mut(&mut self) -> &mut Diagnostics {
        &mut self.diagnostics
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` cut off from the gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    // ---------------------------------------------------------------- elementwise

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        use ElementwiseKind::*;
        let need_b = matches!(kind, Add | Sub | Mul | Div);
        match (need_b, b) {
            (true, Some(b)) => match kind {
                Add => self.add(a, b),
                Sub => self.sub(a, b),
                Mul => self.mul(a, b),
                _ => self.div(a, b),
            },
            (false, None) => match kind {
                Neg => self.neg(a),
                Exp => self.exp(a),
                Log => self.log(a),
                Abs => self.abs(a),
                Relu => self.relu(a),
                _ => self.sigmoid(a),
            },
            (true, None) => Err(TensorError::Usage(format!("{kind:?} needs two operands"))),
            (false, Some(_)) => Err(TensorError::Usage(format!("{kind:?} takes one operand"))),
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape = match broadcast_shapes(ta.shape(), tb.shape()) {
            Some(s) => s,
            None => return shape_err(format!("cannot broadcast {:?} with {:?}", ta.shape(), tb.shape())),
        };
        let mut out = Vec::with_capacity(numel(&out_shape));
        if ta.shape() == tb.shape() {
            out.extend(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)));
        } else {
            let sa = broadcast_strides(ta.shape(), &out_shape);
            let sb = broadcast_strides(tb.shape(), &out_shape);
            let (da, db) = (ta.data(), tb.data());
            for_each2(&out_shape, &sa, &sb, |_, ia, ib| out.push(f(da[ia], db[ib])));
        }
        Ok((Tensor { shape: out_shape, data: out }, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Clamp floor for `log`/`div` operands; zero in strict mode, where
    /// offending operands are rejected instead.
    fn floor(&self) -> T {
        if self.config.strict {
            T::zero()
        } else {
            self.config.epsilon
        }
    }

    fn safe_divisor(&self, y: T) -> T {
        let eps = self.floor();
        if y.abs() < eps {
            if y < T::zero() {
                -eps
            } else {
                eps
            }
        } else {
            y
        }
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let eps = self.floor();
        let divisors = self.nodes[b.0].value.data();
        if self.config.strict {
            if divisors.iter().any(|y| *y == T::zero()) {
                return Err(TensorError::Domain("division by zero".into()));
            }
        } else {
            self.diagnostics.domain_clamps += divisors.iter().filter(|y| y.abs() < eps).count();
        }
        let (t, rg) = self.binary(a, b, |x, y| {
            let y = if y.abs() < eps {
                if y < T::zero() {
                    -eps
                } else {
                    eps
                }
            } else {
                y
            };
            x / y
        })?;
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.nodes[a.0].value.map(f);
        let rg = self.nodes[a.0].requires_grad;
        self.push(t, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, Op::Neg(a), |x| -x))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, Op::Exp(a), |x| x.exp()))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let eps = self.floor();
        let operands = self.nodes[a.0].value.data();
        if self.config.strict {
            if operands.iter().any(|&x| x <= T::zero()) {
                return Err(TensorError::Domain("log of non-positive operand".into()));
            }
        } else {
            self.diagnostics.domain_clamps += operands.iter().filter(|&&x| x < eps).count();
        }
        Ok(self.unary(a, Op::Log(a), move |x| x.max(eps).ln()))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, Op::Abs(a), |x| x.abs()))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, Op::Sigmoid(a), sigmoid))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, Op::Tanh(a), |x| x.tanh()))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        Ok(self.unary(a, Op::Softplus(a), softplus))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        Ok(self.unary(a, Op::Scale(a, s), move |x| x * s))
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var> {
        Ok(self.unary(a, Op::AddScalar(a), move |x| x + s))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::Usage(format!("clamp bounds {lo:?} > {hi:?}")));
        }
        Ok(self.unary(a, Op::Clamp(a, lo, hi), move |x| x.max(lo).min(hi)))
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return shape_err(format!("matmul needs rank >= 2, got {sa:?} and {sb:?}"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return shape_err(format!("matmul inner extents differ: {sa:?} x {sb:?}"));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = match broadcast_shapes(ba, bb) {
            Some(s) => s,
            None => return shape_err(format!("matmul batch dims do not broadcast: {sa:?} x {sb:?}")),
        };
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = vec![T::zero(); numel(&out_shape)];
        let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        if bb.is_empty() {
            let rows = numel(ba) * m;
            kernels::gemm(rows, k, n, da, MatView::rowmajor(0, k), db, MatView::rowmajor(0, n), &mut out, MatView::rowmajor(0, n), false);
        } else {
            let stra = broadcast_strides(ba, &batch);
            let strb = broadcast_strides(bb, &batch);
            for_each2(&batch, &stra, &strb, |i, oa, ob| {
                kernels::gemm(
                    m,
                    k,
                    n,
                    da,
                    MatView::rowmajor(oa * m * k, k),
                    db,
                    MatView::rowmajor(ob * k * n, n),
                    &mut out,
                    MatView::rowmajor(i * m * n, n),
                    false,
                );
            });
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: out_shape, data: out }, Op::MatMul(a, b), rg))
    }

    /// 2-D cross-correlation over `[B, C_in, H, W]` with weights
    /// `[C_out, C_in, kh, kw]` and optional bias `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return shape_err(format!("conv2d expects 4-D input and weight, got {sx:?}, {sw:?}"));
        }
        let (b, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, c_in2, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if c_in != c_in2 {
            return shape_err(format!("conv2d channel mismatch: input {c_in}, weight {c_in2}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return shape_err(format!("conv2d kernel must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(TensorError::Usage("conv2d stride must be positive".into()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err(format!("conv2d output extent < 1 for input {h}x{wd}, kernel {kh}x{kw}, pad {pad}"));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        if let Some(bv) = bias {
            if self.shape(bv) != [c_out] {
                return shape_err(format!("conv2d bias must be [{c_out}], got {:?}", self.shape(bv)));
            }
        }
        let geom = ConvGeom { c_in, h, w: wd, kh, kw, stride, pad, ho, wo };
        let (kk, p) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); b * c_out * p];
        let mut col = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
        let dx = self.nodes[x.0].value.data();
        let dw = self.nodes[w.0].value.data();
        for bi in 0..b {
            let img = &dx[bi * c_in * h * wd..(bi + 1) * c_in * h * wd];
            let src: &[T] = if geom.is_pointwise() {
                img
            } else {
                im2col(img, &geom, &mut col);
                &col
            };
            kernels::gemm(c_out, kk, p, dw, MatView::rowmajor(0, kk), src, MatView::rowmajor(0, p), &mut out, MatView::rowmajor(bi * c_out * p, p), false);
        }
        if let Some(bv) = bias {
            let db = self.nodes[bv.0].value.data();
            for bi in 0..b {
                for co in 0..c_out {
                    let base = (bi * c_out + co) * p;
                    out[base..base + p].iter_mut().for_each(|v| *v = *v + db[co]);
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor { shape: vec![b, c_out, ho, wo], data: out }, Op::Conv2d { x, w, bias, geom }, rg))
    }

    /// Bilinear sampling of `value [B, C, H, W]` at normalized `points [B, P, 2]`
    /// given as `(x, y)` in `[0, 1]`, pixel centers at `(i + 0.5) / extent`.
    /// Out-of-grid taps read zero. Returns `[B, P, C]`.
    pub fn bilinear_sample(&mut self, value: Var, points: Var) -> Result<Var> {
        let (sv, sp) = (self.shape(value).to_vec(), self.shape(points).to_vec());
        if sv.len() != 4 || sp.len() != 3 || sp[2] != 2 || sp[0] != sv[0] {
            return shape_err(format!("bilinear_sample expects [B,C,H,W] and [B,P,2], got {sv:?}, {sp:?}"));
        }
        let (b, c, h, w) = (sv[0], sv[1], sv[2], sv[3]);
        let p = sp[1];
        let hw = h * w;
        let dv = self.nodes[value.0].value.data();
        let dp = self.nodes[points.0].value.data();
        let mut out = vec![T::zero(); b * p * c];
        let one = T::one();
        for bi in 0..b {
            let vb = &dv[bi * c * hw..(bi + 1) * c * hw];
            for pi in 0..p {
                let q = (bi * p + pi) * 2;
                let taps = bilinear_taps(dp[q], dp[q + 1], h, w);
                let wts = [(one - taps.fx) * (one - taps.fy), taps.fx * (one - taps.fy), (one - taps.fx) * taps.fy, taps.fx * taps.fy];
                let dst = &mut out[(bi * p + pi) * c..(bi * p + pi + 1) * c];
                for (t, idx) in taps.idx.iter().enumerate() {
                    if let Some(ix) = *idx {
                        for (ch, o) in dst.iter_mut().enumerate() {
                            *o = *o + wts[t] * vb[ch * hw + ix];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[value, points]);
        Ok(self.push(Tensor { shape: vec![b, p, c], data: out }, Op::Bilinear(value, points), rg))
    }

    // ---------------------------------------------------------------- normalization

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Usage(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    total = total + e;
                }
                for j in 0..n {
                    out[base + j * inner] = out[base + j * inner] / total;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax(a, axis), rg))
    }

    /// Layer normalization along `axis` with affine `gamma`, `beta` of shape
    /// `[extent(axis)]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Usage(format!("layer_norm axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return shape_err(format!("layer_norm affine params must be [{n}]"));
        }
        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gamma.0].value.data();
        let bt = self.nodes[beta.0].value.data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); outer * inner];
        let mut out = vec![T::zero(); src.len()];
        let nf = T::of(n as f64);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mean = (0..n).fold(T::zero(), |s, j| s + src[base + j * inner]) / nf;
                let var = (0..n).fold(T::zero(), |s, j| {
                    let d = src[base + j * inner] - mean;
                    s + d * d
                }) / nf;
                let r = T::one() / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for j in 0..n {
                    let at = base + j * inner;
                    let xh = (src[at] - mean) * r;
                    xhat[at] = xh;
                    out[at] = xh * g[j] + bt[j];
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(Tensor { shape, data: out }, Op::LayerNorm { x, gamma, beta, axis, xhat, rstd }, rg))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Usage(format!("invalid permutation {perm:?} for rank {}", shape.len())));
        }
        let (out_shape, data) = permute_copy(self.nodes[a.0].value.data(), &shape, perm);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data }, Op::Permute(a, perm.to_vec()), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(TensorError::Usage("concat of zero tensors".into())),
        };
        if axis >= first.len() {
            return Err(TensorError::Usage(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(d, (x, y))| d != axis && x != y) {
                return shape_err(format!("concat shapes differ off-axis: {first:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&first, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.nodes[p.0].value.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape: out_shape, data: out }, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data: out }, Op::Narrow(a, axis, start), rg))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if broadcast_shapes(&sa, shape).as_deref() != Some(shape) {
            return shape_err(format!("cannot broadcast {sa:?} to {shape:?}"));
        }
        let strides = broadcast_strides(&sa, shape);
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(numel(shape));
        for_each2(shape, &strides, &strides, |_, ia, _| out.push(src[ia]));
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: shape.to_vec(), data: out }, Op::BroadcastTo(a), rg))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.sum_all();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.numel().max(1);
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Usage(format!("sum axis {axis} out of range for {shape:?}")));
        }
        let (outer, n, inner) = split_at_axis(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        let mut out_shape = shape;
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: out_shape, data: out }, Op::SumAxis(a, axis), rg))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Every differentiable leaf gets an
    /// entry in the result (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| match (&n.op, n.requires_grad) {
                (Op::Leaf, true) => Some(Tensor {
                    shape: n.value.shape().to_vec(),
                    data: g.unwrap_or_else(|| vec![T::zero(); n.value.numel()]),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Sums `g` (shaped `out_shape`) down to `in_shape` over broadcast axes,
    /// optionally multiplying by a second strided operand.
    fn reduce_to(&self, g: &[T], out_shape: &[usize], input: Var, other: Option<(Var, bool)>, f: impl Fn(T, T, T) -> T) -> Vec<T> {
        let in_shape = self.shape(input);
        let si = broadcast_strides(in_shape, out_shape);
        let mut acc = vec![T::zero(); numel(in_shape)];
        let own = self.nodes[input.0].value.data();
        match other {
            Some((o, _)) => {
                let so = broadcast_strides(self.shape(o), out_shape);
                let od = self.nodes[o.0].value.data();
                for_each2(out_shape, &si, &so, |k, ia, ib| acc[ia] = acc[ia] + f(g[k], own[ia], od[ib]));
            }
            None => for_each2(out_shape, &si, &si, |k, ia, _| acc[ia] = acc[ia] + f(g[k], own[ia], T::zero())),
        }
        acc
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = node.value.shape();
        let y = node.value.data();
        let zero = T::zero();
        let one = T::one();
        let eps = self.floor();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -one } else { one };
                if self.wants(*a) {
                    let ga = self.reduce_to(g, out_shape, *a, None, |gk, _, _| gk);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = self.reduce_to(g, out_shape, *b, None, |gk, _, _| gk * sign);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let ga = self.reduce_to(g, out_shape, *a, Some((*b, true)), |gk, _, o| gk * o);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = self.reduce_to(g, out_shape, *b, Some((*a, true)), |gk, _, o| gk * o);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let sd = |v: T| self.safe_divisor(v);
                if self.wants(*a) {
                    let ga = self.reduce_to(g, out_shape, *a, Some((*b, true)), |gk, _, den| gk / sd(den));
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = self.reduce_to(g, out_shape, *b, Some((*a, true)), |gk, den, num| {
                        if den.abs() < eps {
                            zero
                        } else {
                            -gk * num / (den * den)
                        }
                    });
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Neg(a) => self.accumulate(grads, *a, g.iter().map(|&v| -v).collect()),
            Op::Exp(a) => self.accumulate(grads, *a, g.iter().zip(y).map(|(&gk, &yk)| gk * yk).collect()),
            Op::Log(a) => {
                let x = self.nodes[a.0].value.data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(&gk, &xk)| if xk < eps { zero } else { gk / xk }).collect());
            }
            Op::Abs(a) => {
                let x = self.nodes[a.0].value.data();
                let sgn = |v: T| if v > zero { one } else if v < zero { -one } else { zero };
                self.accumulate(grads, *a, g.iter().zip(x).map(|(&gk, &xk)| gk * sgn(xk)).collect());
            }
            Op::Relu(a) => {
                let x = self.nodes[a.0].value.data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(&gk, &xk)| if xk > zero { gk } else { zero }).collect());
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.iter().zip(y).map(|(&gk, &s)| gk * s * (one - s)).collect()),
            Op::Tanh(a) => self.accumulate(grads, *a, g.iter().zip(y).map(|(&gk, &t)| gk * (one - t * t)).collect()),
            Op::Softplus(a) => {
                let x = self.nodes[a.0].value.data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(&gk, &xk)| gk * sigmoid(xk)).collect());
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Clamp(a, lo, hi) => {
                let x = self.nodes[a.0].value.data();
                self.accumulate(grads, *a, g.iter().zip(x).map(|(&gk, &xk)| if xk < *lo || xk > *hi { zero } else { gk }).collect());
            }
            Op::MatMul(a, b) => self.backprop_matmul(*a, *b, g, grads),
            Op::Conv2d { x, w, bias, geom } => self.backprop_conv(*x, *w, *bias, geom, g, grads),
            Op::Bilinear(v, p) => self.backprop_bilinear(*v, *p, g, grads),
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = split_at_axis(out_shape, *axis);
                let mut gx = vec![zero; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot = (0..n).fold(zero, |s, j| s + g[base + j * inner] * y[base + j * inner]);
                        for j in 0..n {
                            let at = base + j * inner;
                            gx[at] = y[at] * (g[at] - dot);
                        }
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::LayerNorm { x, gamma, beta, axis, xhat, rstd } => {
                let (outer, n, inner) = split_at_axis(out_shape, *axis);
                let gm = self.nodes[gamma.0].value.data();
                let mut gg = vec![zero; n];
                let mut gb = vec![zero; n];
                let mut gx = vec![zero; y.len()];
                let nf = T::of(n as f64);
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let (mut s1, mut s2) = (zero, zero);
                        for j in 0..n {
                            let at = base + j * inner;
                            gg[j] = gg[j] + g[at] * xhat[at];
                            gb[j] = gb[j] + g[at];
                            let dxh = g[at] * gm[j];
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xhat[at];
                        }
                        let r = rstd[o * inner + i];
                        for j in 0..n {
                            let at = base + j * inner;
                            let dxh = g[at] * gm[j];
                            gx[at] = r * (dxh - s1 / nf - xhat[at] * s2 / nf);
                        }
                    }
                }
                if self.wants(*x) {
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, gg);
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, gb);
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, gx) = permute_copy(g, out_shape, &inv);
                self.accumulate(grads, *a, gx);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_at_axis(out_shape, *axis);
                let row = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    if self.wants(p) {
                        let mut gp = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += chunk;
                }
            }
            Op::Narrow(a, axis, start) => {
                let in_shape = self.shape(*a);
                let (outer, n, inner) = split_at_axis(in_shape, *axis);
                let len = out_shape[*axis];
                let mut gx = vec![zero; numel(in_shape)];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *a, gx);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::SumAxis(a, axis) => {
                let in_shape = self.shape(*a);
                let (outer, n, inner) = split_at_axis(in_shape, *axis);
                let mut gx = Vec::with_capacity(numel(in_shape));
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.accumulate(grads, *a, gx);
            }
            Op::BroadcastTo(a) => {
                let ga = self.reduce_to(g, out_shape, *a, None, |gk, _, _| gk);
                self.accumulate(grads, *a, ga);
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let da = self.nodes[a.0].value.data();
        let db = self.nodes[b.0].value.data();
        let (wa, wb) = (self.wants(a), self.wants(b));
        let mut ga = if wa { vec![T::zero(); da.len()] } else { Vec::new() };
        let mut gb = if wb { vec![T::zero(); db.len()] } else { Vec::new() };
        if bb.is_empty() {
            let rows = numel(ba) * m;
            if wa {
                kernels::gemm(rows, n, k, g, MatView::rowmajor(0, n), db, MatView::rowmajor(0, n).transposed(), &mut ga, MatView::rowmajor(0, k), false);
            }
            if wb {
                kernels::gemm(k, rows, n, da, MatView::rowmajor(0, k).transposed(), g, MatView::rowmajor(0, n), &mut gb, MatView::rowmajor(0, n), false);
            }
        } else {
            let batch = broadcast_shapes(ba, bb).expect("validated in forward");
            let stra = broadcast_strides(ba, &batch);
            let strb = broadcast_strides(bb, &batch);
            for_each2(&batch, &stra, &strb, |i, oa, ob| {
                let gv = MatView::rowmajor(i * m * n, n);
                if wa {
                    kernels::gemm(m, n, k, g, gv, db, MatView::rowmajor(ob * k * n, n).transposed(), &mut ga, MatView::rowmajor(oa * m * k, k), true);
                }
                if wb {
                    kernels::gemm(k, m, n, da, MatView::rowmajor(oa * m * k, k).transposed(), g, gv, &mut gb, MatView::rowmajor(ob * k * n, n), true);
                }
            });
        }
        if wa {
            self.accumulate(grads, a, ga);
        }
        if wb {
            self.accumulate(grads, b, gb);
        }
    }

    fn backprop_conv(&self, x: Var, w: Var, bias: Option<Var>, geom: &ConvGeom, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let dx = self.nodes[x.0].value.data();
        let dw = self.nodes[w.0].value.data();
        let c_out = self.shape(w)[0];
        let b = self.shape(x)[0];
        let (kk, p) = (geom.col_rows(), geom.col_cols());
        let img = geom.c_in * geom.h * geom.w;
        let (wx, ww) = (self.wants(x), self.wants(w));
        let mut gx = if wx { vec![T::zero(); dx.len()] } else { Vec::new() };
        let mut gw = if ww { vec![T::zero(); dw.len()] } else { Vec::new() };
        let pointwise = geom.is_pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![T::zero(); kk * p] };
        let mut gcol = if pointwise || !wx { Vec::new() } else { vec![T::zero(); kk * p] };
        for bi in 0..b {
            let gv = MatView::rowmajor(bi * c_out * p, p);
            if ww {
                let src: &[T] = if pointwise {
                    &dx[bi * img..(bi + 1) * img]
                } else {
                    im2col(&dx[bi * img..(bi + 1) * img], geom, &mut col);
                    &col
                };
                kernels::gemm(c_out, p, kk, g, gv, src, MatView::rowmajor(0, p).transposed(), &mut gw, MatView::rowmajor(0, kk), true);
            }
            if wx {
                let wt = MatView::rowmajor(0, kk).transposed();
                if pointwise {
                    kernels::gemm(kk, c_out, p, dw, wt, g, gv, &mut gx, MatView::rowmajor(bi * img, p), true);
                } else {
                    kernels::gemm(kk, c_out, p, dw, wt, g, gv, &mut gcol, MatView::rowmajor(0, p), false);
                    col2im_add(&gcol, geom, &mut gx[bi * img..(bi + 1) * img]);
                }
            }
        }
        if wx {
            self.accumulate(grads, x, gx);
        }
        if ww {
            self.accumulate(grads, w, gw);
        }
        if let Some(bv) = bias {
            if self.wants(bv) {
                let mut gbias = vec![T::zero(); c_out];
                for bi in 0..b {
                    for (co, gb) in gbias.iter_mut().enumerate() {
                        let base = (bi * c_out + co) * p;
                        *gb = g[base..base + p].iter().fold(*gb, |s, &v| s + v);
                    }
                }
                self.accumulate(grads, bv, gbias);
            }
        }
    }

    fn backprop_bilinear(&self, value: Var, points: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let sv = self.shape(value);
        let (b, c, h, w) = (sv[0], sv[1], sv[2], sv[3]);
        let p = self.shape(points)[1];
        let hw = h * w;
        let dv = self.nodes[value.0].value.data();
        let dp = self.nodes[points.0].value.data();
        let (wv, wp) = (self.wants(value), self.wants(points));
        let mut gv = if wv { vec![T::zero(); dv.len()] } else { Vec::new() };
        let mut gp = if wp { vec![T::zero(); dp.len()] } else { Vec::new() };
        let one = T::one();
        let (wf, hf) = (T::of(w as f64), T::of(h as f64));
        for bi in 0..b {
            for pi in 0..p {
                let q = (bi * p + pi) * 2;
                let taps = bilinear_taps(dp[q], dp[q + 1], h, w);
                let (fx, fy) = (taps.fx, taps.fy);
                let gout = &g[(bi * p + pi) * c..(bi * p + pi + 1) * c];
                if wv {
                    let wts = [(one - fx) * (one - fy), fx * (one - fy), (one - fx) * fy, fx * fy];
                    for (t, idx) in taps.idx.iter().enumerate() {
                        if let Some(ix) = *idx {
                            for (ch, &go) in gout.iter().enumerate() {
                                let at = bi * c * hw + ch * hw + ix;
                                gv[at] = gv[at] + wts[t] * go;
                            }
                        }
                    }
                }
                if wp {
                    let (mut gx, mut gy) = (T::zero(), T::zero());
                    for (ch, &go) in gout.iter().enumerate() {
                        let val = |t: usize| taps.idx[t].map_or(T::zero(), |ix| dv[bi * c * hw + ch * hw + ix]);
                        let (v00, v01, v10, v11) = (val(0), val(1), val(2), val(3));
                        gx = gx + go * ((v01 - v00) * (one - fy) + (v11 - v10) * fy);
                        gy = gy + go * ((v10 - v00) * (one - fx) + (v11 - v01) * fx);
                    }
                    gp[q] = gp[q] + gx * wf;
                    gp[q + 1] = gp[q + 1] + gy * hf;
                }
            }
        }
        if wv {
            self.accumulate(grads, value, gv);
        }
        if wp {
            self.accumulate(grads, points, gp);
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    // max(x, 0) + log1p(exp(-|x|))
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

