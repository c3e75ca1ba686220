use super::{DiffError, Real, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Narrow { x: Var, axis: usize, start: usize },
    PrependToken { x: Var, token: Var },
    Patchify { x: Var, patch: usize },
    Sum(Var),
    Mean(Var),
    SoftCrossEntropy { p: Var, q: Var },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Lower bound applied to `ln q` inside [`Graph::soft_cross_entropy`].
pub const LOG_CLAMP: f64 = -30.0;

/// Per-step record of executed primitives.
///
/// Values are computed eagerly as operations are recorded. Nodes are appended
/// in execution order, so walking them backwards visits every node after all
/// of its consumers. Leaf gradients persist across `backward` calls and
/// accumulate additively.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b);
}

/// `c (+)= op(a) * op(b)` where `a` is logically `m×k` and `b` is `k×n`.
/// `a_t` means `a` is stored as `k×m`; `b_t` means `b` is stored as `n×k`.
#[allow(clippy::too_many_arguments)]
fn mm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: extents checked above; c is a distinct &mut borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..data.len() {
        out.push(data[src]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf that honours the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a trainable leaf regardless of the tensor's flag.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph node shape invariant")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        mm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Batched product over the leading axis: `[G,m,k]·[G,k,n]`, or
    /// `[G,m,k]·[G,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bad = || DiffError::Shape {
            op: "bmm",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![T::zero(); g * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..g {
            mm(
                m,
                k,
                n,
                &va[i * m * k..],
                false,
                &vb[i * k * n..],
                trans_b,
                &mut out[i * m * n..],
                false,
            );
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![g, m, n], out, Op::Bmm { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::Shape {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Adds `b` to every trailing block of `x`; `b`'s shape must be a suffix
    /// of `x`'s shape (bias rows, positional tables).
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var, DiffError> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != *sb {
            return Err(DiffError::Shape {
                op: "add_broadcast",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let vb = self.value(b);
        let out = self
            .value(x)
            .chunks(vb.len())
            .flat_map(|row| row.iter().zip(vb).map(|(&p, &q)| p + q))
            .collect();
        let rg = self.rg(&[x, b]);
        Ok(self.push(sx.to_vec(), out, Op::AddBroadcast(x, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::Shape {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(x)
            .iter()
            .map(|&v| v * half * (T::one() + (v * inv_sqrt2).erf()))
            .collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Softmax over the last axis, with max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or(DiffError::Contract("softmax of rank-0".into()))?;
        let src = self.value(x);
        if src.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "softmax" });
        }
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut sum = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum = sum + *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / sum);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Softmax(x), rg))
    }

    /// Normalizes each row over the last axis (population variance), then
    /// applies the `gamma`/`beta` affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, DiffError> {
        if eps <= 0.0 {
            return Err(DiffError::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(DiffError::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let (src, g, b) = (self.value(x), self.value(gamma), self.value(beta));
        let inv_d = T::one() / T::of(d as f64);
        let eps = T::of(eps);
        let rows = src.len() / d;
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, DiffError> {
        let shape = shape.into();
        if numel(&shape) != self.value(x).len() || shape.contains(&0) {
            return Err(DiffError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = axes.len() == shape.len()
            && axes.iter().all(|&a| a < shape.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(DiffError::Contract(format!(
                "permute axes {axes:?} invalid for shape {shape:?}"
            )));
        }
        let out = permute_data(self.value(x), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            out_shape,
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(DiffError::Contract(format!(
                "narrow axis {axis} [{start}, {}) out of range for {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, out, Op::Narrow { x, axis, start }, rg))
    }

    /// `[B,N,d]` plus a `d`-element token → `[B,N+1,d]` with the token first.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var, DiffError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if sx.len() != 3 || self.value(token).len() != d {
            return Err(DiffError::Shape {
                op: "prepend_token",
                lhs: sx,
                rhs: self.shape(token).to_vec(),
            });
        }
        let (b, n) = (sx[0], sx[1]);
        let (src, tok) = (self.value(x), self.value(token));
        let mut out = Vec::with_capacity(b * (n + 1) * d);
        for i in 0..b {
            out.extend_from_slice(tok);
            out.extend_from_slice(&src[i * n * d..(i + 1) * n * d]);
        }
        let rg = self.rg(&[x, token]);
        Ok(self.push(vec![b, n + 1, d], out, Op::PrependToken { x, token }, rg))
    }

    /// `[B,C,H,W]` → `[B, (H/p)·(W/p), C·p·p]`; patches in raster order, each
    /// flattened channel-major.
    pub fn patchify(&mut self, x: Var, patch: usize) -> Result<Var, DiffError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || patch == 0 || !sx[2].is_multiple_of(patch) || !sx[3].is_multiple_of(patch) {
            return Err(DiffError::Shape {
                op: "patchify",
                lhs: sx,
                rhs: vec![patch],
            });
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (gh, gw) = (h / patch, w / patch);
        let src = self.value(x);
        let mut out = Vec::with_capacity(src.len());
        for bi in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    for ci in 0..c {
                        for py in 0..patch {
                            let row = ((bi * c + ci) * h + gy * patch + py) * w + gx * patch;
                            out.extend_from_slice(&src[row..row + patch]);
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![b, gh * gw, c * patch * patch], out, Op::Patchify { x, patch }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], Op::Mean(x), rg)
    }

    /// Mean over rows of `−Σ_c p_c · max(ln q_c, LOG_CLAMP)`.
    pub fn soft_cross_entropy(&mut self, p: Var, q: Var) -> Result<Var, DiffError> {
        let (sp, sq) = (self.shape(p), self.shape(q));
        if sp != sq || sp.len() != 2 {
            return Err(DiffError::Shape {
                op: "soft_cross_entropy",
                lhs: sp.to_vec(),
                rhs: sq.to_vec(),
            });
        }
        let rows = sp[0];
        let clamp = T::of(LOG_CLAMP);
        let total: T = self
            .value(p)
            .iter()
            .zip(self.value(q))
            .map(|(&pc, &qc)| pc * qc.ln().max(clamp))
            .sum();
        let loss = -total / T::of(rows as f64);
        if !loss.is_finite() {
            return Err(DiffError::NonFinite {
                op: "soft_cross_entropy",
            });
        }
        let rg = self.rg(&[p, q]);
        Ok(self.push(vec![1], vec![loss], Op::SoftCrossEntropy { p, q }, rg))
    }

    /// Reverse sweep from a scalar; leaf gradients accumulate into the graph.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if self.node(loss).value.len() != 1 {
            return Err(DiffError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let Graph { nodes, leaf_grads } = self;
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => match &mut leaf_grads[i] {
                    Some(acc) => add_into(acc, &g),
                    None => leaf_grads[i] = Some(g),
                },
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        mm(m, n, k, &g, false, vb, true, ga, true);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        mm(k, m, n, va, true, &g, false, gb, true);
                    }
                }
                Op::Bmm { a, b, trans_b } => {
                    let (bs, m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1], nodes[a.0].shape[2]);
                    let n = node.shape[2];
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for s in 0..bs {
                            // dA = dC · op(B)ᵀ
                            mm(
                                m,
                                n,
                                k,
                                &g[s * m * n..],
                                false,
                                &vb[s * k * n..],
                                !trans_b,
                                &mut ga[s * m * k..],
                                true,
                            );
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for s in 0..bs {
                            if *trans_b {
                                // B is [n,k]: dB = dCᵀ · A
                                mm(
                                    n,
                                    m,
                                    k,
                                    &g[s * m * n..],
                                    true,
                                    &va[s * m * k..],
                                    false,
                                    &mut gb[s * k * n..],
                                    true,
                                );
                            } else {
                                mm(
                                    k,
                                    m,
                                    n,
                                    &va[s * m * k..],
                                    true,
                                    &g[s * m * n..],
                                    false,
                                    &mut gb[s * k * n..],
                                    true,
                                );
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        add_into(gb, &g);
                    }
                }
                Op::AddBroadcast(x, b) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        add_into(gx, &g);
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        let w = gb.len();
                        for chunk in g.chunks(w) {
                            add_into(gb, chunk);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if let Some(ga) = slot(&mut grads, nodes, *a) {
                        for ((acc, &gi), &y) in ga.iter_mut().zip(&g).zip(vb) {
                            *acc = *acc + gi * y;
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *b) {
                        for ((acc, &gi), &x) in gb.iter_mut().zip(&g).zip(va) {
                            *acc = *acc + gi * x;
                        }
                    }
                }
                Op::Scale(x, s) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for (acc, &gi) in gx.iter_mut().zip(&g) {
                            *acc = *acc + gi * *s;
                        }
                    }
                }
                Op::Gelu(x) => {
                    let vx = &nodes[x.0].value;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let inv_sqrt_2pi = T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                        let half = T::of(0.5);
                        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
                        for ((acc, &gi), &v) in gx.iter_mut().zip(&g).zip(vx) {
                            let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                            let pdf = (-half * v * v).exp() * inv_sqrt_2pi;
                            *acc = *acc + gi * (cdf + v * pdf);
                        }
                    }
                }
                Op::Softmax(x) => {
                    let n = *node.shape.last().unwrap();
                    let y = &node.value;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for ((acc, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                            let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                            for j in 0..n {
                                acc[j] = acc[j] + yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = *node.shape.last().unwrap();
                    let gam = &nodes[gamma.0].value;
                    if let Some(gg) = slot(&mut grads, nodes, *gamma) {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] = gg[j] + gr[j] * hr[j];
                            }
                        }
                    }
                    if let Some(gb) = slot(&mut grads, nodes, *beta) {
                        for gr in g.chunks(d) {
                            add_into(gb, gr);
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let inv_d = T::one() / T::of(d as f64);
                        let mut dh = vec![T::zero(); d];
                        for (r, ((acc, gr), hr)) in gx
                            .chunks_mut(d)
                            .zip(g.chunks(d))
                            .zip(xhat.chunks(d))
                            .enumerate()
                        {
                            for j in 0..d {
                                dh[j] = gr[j] * gam[j];
                            }
                            let mean_dh = dh.iter().copied().sum::<T>() * inv_d;
                            let mean_dh_h = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                            for j in 0..d {
                                acc[j] = acc[j] + rstd[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        add_into(gx, &g);
                    }
                }
                Op::Permute { x, axes } => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let mut inv = vec![0; axes.len()];
                        for (i, &a) in axes.iter().enumerate() {
                            inv[a] = i;
                        }
                        add_into(gx, &permute_data(&g, &node.shape, &inv));
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let in_shape = &nodes[x.0].shape;
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let len = node.shape[*axis];
                    let full = in_shape[*axis];
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        for o in 0..outer {
                            let dst = (o * full + start) * inner;
                            add_into(
                                &mut gx[dst..dst + len * inner],
                                &g[o * len * inner..(o + 1) * len * inner],
                            );
                        }
                    }
                }
                Op::PrependToken { x, token } => {
                    let (b, t, d) = (node.shape[0], node.shape[1], node.shape[2]);
                    if let Some(gt) = slot(&mut grads, nodes, *token) {
                        for bi in 0..b {
                            add_into(gt, &g[bi * t * d..bi * t * d + d]);
                        }
                    }
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let n = t - 1;
                        for bi in 0..b {
                            add_into(
                                &mut gx[bi * n * d..(bi + 1) * n * d],
                                &g[bi * t * d + d..(bi + 1) * t * d],
                            );
                        }
                    }
                }
                Op::Patchify { x, patch } => {
                    let s = nodes[x.0].shape.clone();
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let p = *patch;
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let mut src = 0;
                        for bi in 0..b {
                            for gy in 0..h / p {
                                for gxi in 0..w / p {
                                    for ci in 0..c {
                                        for py in 0..p {
                                            let row = ((bi * c + ci) * h + gy * p + py) * w + gxi * p;
                                            add_into(&mut gx[row..row + p], &g[src..src + p]);
                                            src += p;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        gx.iter_mut().for_each(|a| *a = *a + g[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(gx) = slot(&mut grads, nodes, *x) {
                        let s = g[0] / T::of(gx.len() as f64);
                        gx.iter_mut().for_each(|a| *a = *a + s);
                    }
                }
                Op::SoftCrossEntropy { p, q } => {
                    let rows = T::of(nodes[p.0].shape[0] as f64);
                    let scale = g[0] / rows;
                    let clamp = T::of(LOG_CLAMP);
                    let (vp, vq) = (&nodes[p.0].value, &nodes[q.0].value);
                    if let Some(gp) = slot(&mut grads, nodes, *p) {
                        for (acc, &qc) in gp.iter_mut().zip(vq) {
                            *acc = *acc - scale * qc.ln().max(clamp);
                        }
                    }
                    if let Some(gq) = slot(&mut grads, nodes, *q) {
                        for ((acc, &qc), &pc) in gq.iter_mut().zip(vq).zip(vp) {
                            if qc.ln() > clamp {
                                *acc = *acc - scale * pc / qc;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Accumulation target for an input's gradient, created on first use.
fn slot<'a, T: Real>(
    grads: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}
