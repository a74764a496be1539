//! Arena tape for reverse-mode differentiation.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

/// Zero-padding scheme for [`Tape::conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-pad so the output keeps the input's spatial extent.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddRowVec { a: usize, v: usize },
    ScaleVec { a: usize, v: usize, axis: usize },
    ScaleConst { a: usize, k: S },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Reshape { a: usize },
    ConcatLast { a: usize, b: usize },
    ConcatChannels { a: usize, b: usize },
    ChannelsFromCells { a: usize, h: usize, w: usize },
    Conv2d { x: usize, k: usize, padding: Padding },
    Sum { a: usize },
}

#[derive(Debug, Clone)]
struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
}

/// Gradients of one scalar output with respect to every tape value that
/// reaches it. A value the loss does not depend on has no entry: its
/// gradient is zero, and [`Gradients::get`] returns `None` rather than
/// allocating a zero tensor.
#[derive(Debug)]
pub struct Gradients<S: Scalar> {
    slots: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.slots.get(v.0).and_then(|s| s.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.slots.get_mut(v.0).and_then(|s| s.take())
    }
}

/// Records operations eagerly so [`Tape::backward`] can replay them in
/// reverse. Every op validates shapes up front; with debug assertions on,
/// each op also rejects non-finite outputs so numeric blowups surface at
/// the op that produced them.
#[derive(Debug)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Leaves are the only nodes backward stops at.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, name: &'static str) -> Result<Var> {
        #[cfg(debug_assertions)]
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let _ = name;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Matrix product of two rank-2 tensors: `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[1];
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                let row = &mut out[i * n..(i + 1) * n];
                for (j, o) in row.iter_mut().enumerate() {
                    *o = *o + aip * bd[p * n + j];
                }
            }
        }
        self.push(
            Op::MatMul { a: a.0, b: b.0 },
            Tensor::from_parts(vec![m, n], out),
            "matmul",
        )
    }

    fn ewise_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise_pair("add", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add { a: a.0, b: b.0 }, value, "add")
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise_pair("sub", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub { a: a.0, b: b.0 }, value, "sub")
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise_pair("mul", a, b)?;
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul { a: a.0, b: b.0 }, value, "mul")
    }

    /// Adds a rank-1 vector to every row of a rank-2 tensor.
    pub fn add_row_vec(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(v));
        if ta.rank() != 2 || tv.rank() != 1 || ta.shape()[1] != tv.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vec",
                left: ta.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let vd = tv.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vd[i % n])
            .collect();
        self.push(
            Op::AddRowVec { a: a.0, v: v.0 },
            Tensor::from_parts(vec![m, n], data),
            "add_row_vec",
        )
    }

    /// Scales a tensor along one axis by a rank-1 vector:
    /// `out[..., i, ...] = a[..., i, ...] * v[i]` with `i` on `axis`.
    pub fn scale_vec(&mut self, a: Var, v: Var, axis: usize) -> Result<Var> {
        let (ta, tv) = (self.value(a), self.value(v));
        if axis >= ta.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "scale_vec",
                axis,
                shape: ta.shape().to_vec(),
            });
        }
        if tv.rank() != 1 || tv.shape()[0] != ta.shape()[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_vec",
                left: ta.shape().to_vec(),
                right: tv.shape().to_vec(),
            });
        }
        let extent = ta.shape()[axis];
        let stride: usize = ta.shape()[axis + 1..].iter().product();
        let vd = tv.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vd[(i / stride) % extent])
            .collect();
        let shape = ta.shape().to_vec();
        self.push(
            Op::ScaleVec { a: a.0, v: v.0, axis },
            Tensor::from_parts(shape, data),
            "scale_vec",
        )
    }

    /// Multiplies every element by a finite constant.
    pub fn scale_const(&mut self, a: Var, k: S) -> Result<Var> {
        if !k.is_finite() {
            return Err(TensorError::NonFinite { op: "scale_const" });
        }
        let value = map(self.value(a), |x| x * k);
        self.push(Op::ScaleConst { a: a.0, k }, value, "scale_const")
    }

    /// Elementwise logistic function `1 / (1 + exp(-x))`.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = map(self.value(a), sigmoid_scalar);
        self.push(Op::Sigmoid { a: a.0 }, value, "sigmoid")
    }

    /// Elementwise hyperbolic tangent.
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = map(self.value(a), |x| x.tanh());
        self.push(Op::Tanh { a: a.0 }, value, "tanh")
    }

    /// Reinterprets the value with a new shape of the same element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: "zero extent".into(),
            });
        }
        let n: usize = shape.iter().product();
        if n != ta.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: ta.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), ta.data().to_vec());
        self.push(Op::Reshape { a: a.0 }, value, "reshape")
    }

    /// Concatenates two rank-1 or two rank-2 tensors along their last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mismatch = || TensorError::ShapeMismatch {
            op: "concat_last",
            left: ta.shape().to_vec(),
            right: tb.shape().to_vec(),
        };
        if ta.rank() != tb.rank() {
            return Err(mismatch());
        }
        let value = match ta.rank() {
            1 => {
                let mut data = ta.data().to_vec();
                data.extend_from_slice(tb.data());
                Tensor::from_parts(vec![ta.numel() + tb.numel()], data)
            }
            2 => {
                if ta.shape()[0] != tb.shape()[0] {
                    return Err(mismatch());
                }
                let (m, na, nb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let mut data = Vec::with_capacity(m * (na + nb));
                for r in 0..m {
                    data.extend_from_slice(&ta.data()[r * na..(r + 1) * na]);
                    data.extend_from_slice(&tb.data()[r * nb..(r + 1) * nb]);
                }
                Tensor::from_parts(vec![m, na + nb], data)
            }
            _ => {
                return Err(TensorError::InvalidShape {
                    op: "concat_last",
                    shape: ta.shape().to_vec(),
                    reason: "rank must be 1 or 2".into(),
                })
            }
        };
        self.push(Op::ConcatLast { a: a.0, b: b.0 }, value, "concat_last")
    }

    /// Stacks two `[C,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[1..] != tb.shape()[1..] {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let shape = vec![ta.shape()[0] + tb.shape()[0], ta.shape()[1], ta.shape()[2]];
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        self.push(
            Op::ConcatChannels { a: a.0, b: b.0 },
            Tensor::from_parts(shape, data),
            "concat_channels",
        )
    }

    /// Rearranges per-cell feature rows `[h*w, C]` (cells in row-major grid
    /// order) into a channel-first grid `[C, h, w]`.
    pub fn channels_from_cells(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 || ta.shape()[0] != h * w || h == 0 || w == 0 {
            return Err(TensorError::InvalidShape {
                op: "channels_from_cells",
                shape: ta.shape().to_vec(),
                reason: format!("expected [{}x{}, C] cell rows", h, w),
            });
        }
        let c = ta.shape()[1];
        let ad = ta.data();
        let mut data = vec![S::zero(); c * h * w];
        for p in 0..h * w {
            for ch in 0..c {
                data[ch * h * w + p] = ad[p * c + ch];
            }
        }
        self.push(
            Op::ChannelsFromCells { a: a.0, h, w },
            Tensor::from_parts(vec![c, h, w], data),
            "channels_from_cells",
        )
    }

    /// 2-D cross-correlation of `x: [C_in,H,W]` with kernels
    /// `k: [C_out,C_in,KH,KW]`, stride 1.
    pub fn conv2d(&mut self, x: Var, k: Var, padding: Padding) -> Result<Var> {
        let (tx, tk) = (self.value(x), self.value(k));
        if tx.rank() != 3 || tk.rank() != 4 || tx.shape()[0] != tk.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: tx.shape().to_vec(),
                right: tk.shape().to_vec(),
            });
        }
        let (h, w) = (tx.shape()[1], tx.shape()[2]);
        let (kh, kw) = (tk.shape()[2], tk.shape()[3]);
        if padding == Padding::Valid && (kh > h || kw > w) {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: tk.shape().to_vec(),
                reason: format!("kernel exceeds {}x{} input without padding", h, w),
            });
        }
        let value = conv2d_forward(tx, tk, padding);
        self.push(
            Op::Conv2d {
                x: x.0,
                k: k.0,
                padding,
            },
            value,
            "conv2d",
        )
    }

    /// Sum of all elements, as a rank-0 scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(S::zero(), |acc, &x| acc + x);
        self.push(Op::Sum { a: a.0 }, Tensor::scalar(total), "sum")
    }

    /// Reverse sweep from a scalar loss. Returns the gradient of `loss`
    /// with respect to every node that reaches it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let loss_val = self.value(loss);
        if loss_val.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_val.shape().to_vec(),
            });
        }
        let mut slots: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(Tensor::from_parts(
            loss_val.shape().to_vec(),
            vec![S::one()],
        ));
        for i in (0..=loss.0).rev() {
            // Operands always precede their node, so the mutable prefix and
            // the borrowed gradient never alias.
            let (head, tail) = slots.split_at_mut(i);
            let Some(g) = tail[0].as_ref() else { continue };
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let (m, k) = (ta.shape()[0], ta.shape()[1]);
                    let n = tb.shape()[1];
                    let gd = g.data();
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gij = gd[i * n + j];
                            for p in 0..k {
                                da[i * k + p] = da[i * k + p] + gij * tb.data()[p * n + j];
                            }
                        }
                    }
                    let mut db = vec![S::zero(); k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let aip = ta.data()[i * k + p];
                            for j in 0..n {
                                db[p * n + j] = db[p * n + j] + aip * gd[i * n + j];
                            }
                        }
                    }
                    add_into(&mut head[a], Tensor::from_parts(vec![m, k], da));
                    add_into(&mut head[b], Tensor::from_parts(vec![k, n], db));
                }
                Op::Add { a, b } => {
                    add_into(&mut head[a], g.clone());
                    add_into(&mut head[b], g.clone());
                }
                Op::Sub { a, b } => {
                    add_into(&mut head[a], g.clone());
                    add_into(&mut head[b], map(g, |x| -x));
                }
                Op::Mul { a, b } => {
                    let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                    add_into(&mut head[a], zip(g, tb, |gx, y| gx * y));
                    add_into(&mut head[b], zip(g, ta, |gx, x| gx * x));
                }
                Op::AddRowVec { a, v } => {
                    let n = self.nodes[v].value.numel();
                    let mut dv = vec![S::zero(); n];
                    for (i, &gx) in g.data().iter().enumerate() {
                        dv[i % n] = dv[i % n] + gx;
                    }
                    add_into(&mut head[a], g.clone());
                    add_into(&mut head[v], Tensor::from_parts(vec![n], dv));
                }
                Op::ScaleVec { a, v, axis } => {
                    let (ta, tv) = (&self.nodes[a].value, &self.nodes[v].value);
                    let extent = ta.shape()[axis];
                    let stride: usize = ta.shape()[axis + 1..].iter().product();
                    let vd = tv.data();
                    let da = Tensor::from_parts(
                        ta.shape().to_vec(),
                        g.data()
                            .iter()
                            .enumerate()
                            .map(|(i, &gx)| gx * vd[(i / stride) % extent])
                            .collect(),
                    );
                    let mut dv = vec![S::zero(); extent];
                    for (i, &gx) in g.data().iter().enumerate() {
                        let j = (i / stride) % extent;
                        dv[j] = dv[j] + gx * ta.data()[i];
                    }
                    add_into(&mut head[a], da);
                    add_into(&mut head[v], Tensor::from_parts(vec![extent], dv));
                }
                Op::ScaleConst { a, k } => {
                    add_into(&mut head[a], map(g, |x| x * k));
                }
                Op::Sigmoid { a } => {
                    let y = &self.nodes[i].value;
                    add_into(&mut head[a], zip(g, y, |gx, s| gx * s * (S::one() - s)));
                }
                Op::Tanh { a } => {
                    let y = &self.nodes[i].value;
                    add_into(&mut head[a], zip(g, y, |gx, t| gx * (S::one() - t * t)));
                }
                Op::Reshape { a } => {
                    let shape = self.nodes[a].value.shape().to_vec();
                    add_into(&mut head[a], Tensor::from_parts(shape, g.data().to_vec()));
                }
                Op::ConcatLast { a, b } => {
                    let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let gd = g.data();
                    let (da, db) = if ta.rank() == 1 {
                        let na = ta.numel();
                        (gd[..na].to_vec(), gd[na..].to_vec())
                    } else {
                        let (m, na, nb) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                        let mut da = Vec::with_capacity(m * na);
                        let mut db = Vec::with_capacity(m * nb);
                        for r in 0..m {
                            let row = &gd[r * (na + nb)..(r + 1) * (na + nb)];
                            da.extend_from_slice(&row[..na]);
                            db.extend_from_slice(&row[na..]);
                        }
                        (da, db)
                    };
                    add_into(&mut head[a], Tensor::from_parts(ta.shape().to_vec(), da));
                    add_into(&mut head[b], Tensor::from_parts(tb.shape().to_vec(), db));
                }
                Op::ConcatChannels { a, b } => {
                    let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                    let na = ta.numel();
                    add_into(
                        &mut head[a],
                        Tensor::from_parts(ta.shape().to_vec(), g.data()[..na].to_vec()),
                    );
                    add_into(
                        &mut head[b],
                        Tensor::from_parts(tb.shape().to_vec(), g.data()[na..].to_vec()),
                    );
                }
                Op::ChannelsFromCells { a, h, w } => {
                    let c = self.nodes[a].value.shape()[1];
                    let gd = g.data();
                    let mut da = vec![S::zero(); h * w * c];
                    for p in 0..h * w {
                        for ch in 0..c {
                            da[p * c + ch] = gd[ch * h * w + p];
                        }
                    }
                    add_into(&mut head[a], Tensor::from_parts(vec![h * w, c], da));
                }
                Op::Conv2d { x, k, padding } => {
                    let (tx, tk) = (&self.nodes[x].value, &self.nodes[k].value);
                    let (dx, dk) = conv2d_backward(tx, tk, padding, g);
                    add_into(&mut head[x], dx);
                    add_into(&mut head[k], dk);
                }
                Op::Sum { a } => {
                    let shape = self.nodes[a].value.shape().to_vec();
                    let gx = g.data()[0];
                    add_into(&mut head[a], Tensor::from_parts(shape.clone(), {
                        let n: usize = shape.iter().product();
                        vec![gx; n]
                    }));
                }
            }
        }
        Ok(Gradients { slots })
    }
}

fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    // Split on the sign so the exponential never overflows.
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn map<S: Scalar>(a: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn zip<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn add_into<S: Scalar>(slot: &mut Option<Tensor<S>>, delta: Tensor<S>) {
    match slot {
        None => *slot = Some(delta),
        Some(t) => {
            debug_assert_eq!(t.shape(), delta.shape());
            for (dst, &d) in t.data_mut().iter_mut().zip(delta.data()) {
                *dst = *dst + d;
            }
        }
    }
}

fn conv_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
) -> (usize, usize, usize, usize) {
    match padding {
        Padding::Same => ((kh - 1) / 2, (kw - 1) / 2, h, w),
        Padding::Valid => (0, 0, h - kh + 1, w - kw + 1),
    }
}

fn conv2d_forward<S: Scalar>(x: &Tensor<S>, k: &Tensor<S>, padding: Padding) -> Tensor<S> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (pt, pl, oh, ow) = conv_geometry(h, w, kh, kw, padding);
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![S::zero(); cout * oh * ow];
    for co in 0..cout {
        for ci in 0..cin {
            for khi in 0..kh {
                for kwi in 0..kw {
                    let kval = kd[((co * cin + ci) * kh + khi) * kw + kwi];
                    for ohi in 0..oh {
                        // Out-of-range taps read the zero padding: skip them.
                        let ih = (ohi + khi).wrapping_sub(pt);
                        if ih >= h {
                            continue;
                        }
                        for owi in 0..ow {
                            let iw = (owi + kwi).wrapping_sub(pl);
                            if iw >= w {
                                continue;
                            }
                            let o = (co * oh + ohi) * ow + owi;
                            out[o] = out[o] + kval * xd[(ci * h + ih) * w + iw];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![cout, oh, ow], out)
}

fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    k: &Tensor<S>,
    padding: Padding,
    g: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (pt, pl, oh, ow) = conv_geometry(h, w, kh, kw, padding);
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    let mut dx = vec![S::zero(); cin * h * w];
    let mut dk = vec![S::zero(); cout * cin * kh * kw];
    for co in 0..cout {
        for ci in 0..cin {
            for khi in 0..kh {
                for kwi in 0..kw {
                    let kidx = ((co * cin + ci) * kh + khi) * kw + kwi;
                    let kval = kd[kidx];
                    let mut ksum = S::zero();
                    for ohi in 0..oh {
                        let ih = (ohi + khi).wrapping_sub(pt);
                        if ih >= h {
                            continue;
                        }
                        for owi in 0..ow {
                            let iw = (owi + kwi).wrapping_sub(pl);
                            if iw >= w {
                                continue;
                            }
                            let gval = gd[(co * oh + ohi) * ow + owi];
                            let xidx = (ci * h + ih) * w + iw;
                            dx[xidx] = dx[xidx] + kval * gval;
                            ksum = ksum + xd[xidx] * gval;
                        }
                    }
                    dk[kidx] = dk[kidx] + ksum;
                }
            }
        }
    }
    (
        Tensor::from_parts(vec![cin, h, w], dx),
        Tensor::from_parts(vec![cout, cin, kh, kw], dk),
    )
}
