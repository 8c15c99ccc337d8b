use super::conv::ConvGeom;
use super::{shape_err, AutodiffError, Result, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    /// input B×C×H×W, kernels O×C×k×k, optional bias O.
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        c_out: usize,
    },
    /// input B×I, weight O×I, bias O.
    Affine {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Square(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Clamp(Var, T, T),
    Reshape(Var),
    /// Concatenation of B×d_i matrices along the feature axis.
    Concat(Vec<Var>),
    /// Column slice [start, start+len) of a B×D matrix.
    Columns {
        input: Var,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    /// B×K -> B.
    RowSum(Var),
    /// K -> B×K.
    RepeatRows(Var),
    /// Row lookup into a V×D table.
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation tape. Nodes are appended in evaluation order.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if `v` requires one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return shape_err(name, format!("{:?} vs {:?}", va.shape(), vb.shape()));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    /// Elementwise clamp; the gradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
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

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(
            "minimum",
            a,
            b,
            |x, y| if x <= y { x } else { y },
            Op::Minimum(a, b),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Collapses all trailing axes: `B×…` -> `B×D`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let b = shape.first().copied().unwrap_or(1);
        let d: usize = shape.iter().skip(1).product();
        self.reshape(a, &[b, d])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let n = T::from_usize(v.len().max(1)).expect("len fits");
        let s = v.data().iter().fold(T::zero(), |acc, &x| acc + x) / n;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let [b, k] = *v.shape() else {
            return shape_err("row_sum", format!("expected 2-D, got {:?}", v.shape()));
        };
        let data = (0..b)
            .map(|i| {
                v.data()[i * k..(i + 1) * k]
                    .iter()
                    .fold(T::zero(), |acc, &x| acc + x)
            })
            .collect();
        let value = Tensor::new(vec![b], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::RowSum(a), rg))
    }

    pub fn repeat_rows(&mut self, a: Var, rows: usize) -> Var {
        let v = &self.nodes[a.0].value;
        let k = v.len();
        let mut data = Vec::with_capacity(rows * k);
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows, k], data).expect("shape");
        let rg = self.rg(a);
        self.push(value, Op::RepeatRows(a), rg)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat", "no inputs");
        };
        let b = self.shape(first).first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != b {
                return shape_err("concat", format!("part shape {s:?}, batch {b}"));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); b * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.nodes[p.0].value.data();
            for r in 0..b {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![b, total], data)?, Op::Concat(parts.to_vec()), rg))
    }

    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = &self.nodes[a.0].value;
        let [b, d] = *v.shape() else {
            return shape_err("columns", format!("expected 2-D, got {:?}", v.shape()));
        };
        if start + len > d {
            return shape_err("columns", format!("[{start}, {}) of {d}", start + len));
        }
        let mut data = Vec::with_capacity(b * len);
        for r in 0..b {
            data.extend_from_slice(&v.data()[r * d + start..r * d + start + len]);
        }
        let value = Tensor::new(vec![b, len], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Columns { input: a, start }, rg))
    }

    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let v = &self.nodes[table.0].value;
        let [n, d] = *v.shape() else {
            return shape_err("gather", format!("table must be 2-D, got {:?}", v.shape()));
        };
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return shape_err("gather", format!("row {r} out of {n}"));
            }
            data.extend_from_slice(&v.data()[r * d..(r + 1) * d]);
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// `y = x Wᵀ + b` for x: B×I, W: O×I, b: O.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, bv) = (
            &self.nodes[input.0].value,
            &self.nodes[weight.0].value,
            &self.nodes[bias.0].value,
        );
        let (&[b, i], &[o, wi]) = (x.shape(), w.shape()) else {
            return shape_err(
                "affine",
                format!("input {:?}, weight {:?}", x.shape(), w.shape()),
            );
        };
        if wi != i || bv.len() != o {
            return shape_err(
                "affine",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    x.shape(),
                    w.shape(),
                    bv.shape()
                ),
            );
        }
        let mut out = Vec::with_capacity(b * o);
        for _ in 0..b {
            out.extend_from_slice(bv.data());
        }
        // out (B×O) += x (B×I) · Wᵀ (I×O)
        T::gemm(
            b,
            i,
            o,
            T::one(),
            x.data(),
            i as isize,
            1,
            w.data(),
            1,
            i as isize,
            T::one(),
            &mut out,
            o as isize,
            1,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![b, o], out)?,
            Op::Affine {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    /// Valid cross-correlation. `input` is B×C×H×W (or C×H×W, treated as B = 1),
    /// `kernels` is O×C×k×k, `bias` (if given) has O entries.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let xs = self.shape(input).to_vec();
        let ks = self.shape(kernels).to_vec();
        let (batch, c, h, w, squeeze) = match xs.as_slice() {
            &[c, h, w] => (1, c, h, w, true),
            &[b, c, h, w] => (b, c, h, w, false),
            s => return shape_err("conv2d", format!("input must be 3-D or 4-D, got {s:?}")),
        };
        let &[c_out, kc, kh, kw] = ks.as_slice() else {
            return shape_err("conv2d", format!("kernels must be 4-D, got {ks:?}"));
        };
        if kc != c || kh != kw {
            return shape_err(
                "conv2d",
                format!("input {xs:?} incompatible with kernels {ks:?}"),
            );
        }
        if let Some(bv) = bias {
            if self.nodes[bv.0].value.len() != c_out {
                return shape_err("conv2d", "bias length must equal output channels");
            }
        }
        let geom = ConvGeom::new(c, h, w, kh, stride)?;
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let per_in = c * h * w;
        let per_out = c_out * p;
        let mut out = vec![T::zero(); batch * per_out];
        let mut cols = vec![T::zero(); rows * p];
        {
            let x = self.nodes[input.0].value.data();
            let k = self.nodes[kernels.0].value.data();
            let bias_data = bias.map(|bv| self.nodes[bv.0].value.data());
            for n in 0..batch {
                geom.im2col(&x[n * per_in..(n + 1) * per_in], &mut cols);
                let dst = &mut out[n * per_out..(n + 1) * per_out];
                if let Some(bd) = bias_data {
                    for (o, chunk) in dst.chunks_mut(p).enumerate() {
                        chunk.fill(bd[o]);
                    }
                }
                T::gemm(
                    c_out,
                    rows,
                    p,
                    T::one(),
                    k,
                    rows as isize,
                    1,
                    &cols,
                    p as isize,
                    1,
                    T::one(),
                    dst,
                    p as isize,
                    1,
                );
            }
        }
        let shape = if squeeze {
            vec![c_out, geom.oh, geom.ow]
        } else {
            vec![batch, c_out, geom.oh, geom.ow]
        };
        let rg = self.rg(input) || self.rg(kernels) || bias.is_some_and(|bv| self.rg(bv));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                c_out,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_seeded(loss, vec![T::one()])
    }

    /// Reverse sweep starting from an arbitrary upstream gradient on `root`.
    pub fn backward_seeded(&mut self, root: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.nodes[root.0].value.len() {
            return shape_err("backward", "seed length must match root");
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Relu(a) => self.acc_map(grads, *a, |i, ai| {
                if ai > T::zero() {
                    g[i]
                } else {
                    T::zero()
                }
            }),
            Op::Tanh(a) => self.acc_map(grads, *a, |i, _| g[i] * (T::one() - out[i] * out[i])),
            Op::Sigmoid(a) => self.acc_map(grads, *a, |i, _| g[i] * out[i] * (T::one() - out[i])),
            Op::Softplus(a) => self.acc_map(grads, *a, |i, ai| g[i] * sigmoid(ai)),
            Op::Exp(a) => self.acc_map(grads, *a, |i, _| g[i] * out[i]),
            Op::Square(a) => self.acc_map(grads, *a, |i, ai| g[i] * (ai + ai)),
            Op::Scale(a, c) => self.acc_map(grads, *a, |i, _| g[i] * *c),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc_map(grads, *a, |i, _| g[i]),
            Op::Clamp(a, lo, hi) => self.acc_map(grads, *a, |i, ai| {
                if ai >= *lo && ai <= *hi {
                    g[i]
                } else {
                    T::zero()
                }
            }),
            Op::Add(a, b) => {
                self.acc_map(grads, *a, |i, _| g[i]);
                self.acc_map(grads, *b, |i, _| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, |i, _| g[i]);
                self.acc_map(grads, *b, |i, _| -g[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.acc_map(grads, *a, |i, _| g[i] * vb[i]);
                self.acc_map(grads, *b, |i, _| g[i] * va[i]);
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                self.acc_map(grads, *a, |i, _| if va[i] <= vb[i] { g[i] } else { T::zero() });
                self.acc_map(grads, *b, |i, _| if va[i] <= vb[i] { T::zero() } else { g[i] });
            }
            Op::Sum(a) => self.acc_map(grads, *a, |_, _| g[0]),
            Op::Mean(a) => {
                let n = T::from_usize(self.nodes[a.0].value.len().max(1)).expect("len");
                let gi = g[0] / n;
                self.acc_map(grads, *a, |_, _| gi);
            }
            Op::RowSum(a) => {
                let k = self.nodes[a.0].value.shape()[1];
                self.acc_map(grads, *a, |i, _| g[i / k]);
            }
            Op::RepeatRows(a) => {
                let k = self.nodes[a.0].value.len();
                if self.rg(*a) {
                    let dst = slot(grads, *a, k);
                    for (i, &gi) in g.iter().enumerate() {
                        dst[i % k] = dst[i % k] + gi;
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.shape()[1];
                let b = node.value.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    if self.rg(p) {
                        let dst = slot(grads, p, b * w);
                        for r in 0..b {
                            for c in 0..w {
                                dst[r * w + c] = dst[r * w + c] + g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Columns { input, start } => {
                if self.rg(*input) {
                    let src = &self.nodes[input.0].value;
                    let d = src.shape()[1];
                    let len = node.value.shape()[1];
                    let dst = slot(grads, *input, src.len());
                    for r in 0..node.value.shape()[0] {
                        for c in 0..len {
                            let j = r * d + start + c;
                            dst[j] = dst[j] + g[r * len + c];
                        }
                    }
                }
            }
            Op::Gather { table, rows } => {
                if self.rg(*table) {
                    let tv = &self.nodes[table.0].value;
                    let d = tv.shape()[1];
                    let dst = slot(grads, *table, tv.len());
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            dst[r * d + c] = dst[r * d + c] + g[k * d + c];
                        }
                    }
                }
            }
            Op::Affine {
                input,
                weight,
                bias,
            } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (b, i) = (x.shape()[0], x.shape()[1]);
                let o = w.shape()[0];
                if self.rg(*input) {
                    // dx (B×I) += g (B×O) · W (O×I)
                    let dst = slot(grads, *input, b * i);
                    T::gemm(
                        b,
                        o,
                        i,
                        T::one(),
                        g,
                        o as isize,
                        1,
                        w.data(),
                        i as isize,
                        1,
                        T::one(),
                        dst,
                        i as isize,
                        1,
                    );
                }
                if self.rg(*weight) {
                    // dW (O×I) += gᵀ (O×B) · x (B×I)
                    let dst = slot(grads, *weight, o * i);
                    T::gemm(
                        o,
                        b,
                        i,
                        T::one(),
                        g,
                        1,
                        o as isize,
                        x.data(),
                        i as isize,
                        1,
                        T::one(),
                        dst,
                        i as isize,
                        1,
                    );
                }
                if self.rg(*bias) {
                    let dst = slot(grads, *bias, o);
                    for r in 0..b {
                        for c in 0..o {
                            dst[c] = dst[c] + g[r * o + c];
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                c_out,
            } => self.conv_backward(g, grads, *input, *kernels, *bias, geom, *c_out),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        input: Var,
        kernels: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        c_out: usize,
    ) {
        let x = self.nodes[input.0].value.data();
        let k = self.nodes[kernels.0].value.data();
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let per_in = geom.c_in * geom.h * geom.w;
        let per_out = c_out * p;
        let batch = g.len() / per_out;

        if let Some(bv) = bias.filter(|bv| self.rg(*bv)) {
            let dst = slot(grads, bv, c_out);
            for n in 0..batch {
                for (o, d) in dst.iter_mut().enumerate() {
                    let chunk = &g[n * per_out + o * p..n * per_out + (o + 1) * p];
                    *d = *d + chunk.iter().fold(T::zero(), |acc, &v| acc + v);
                }
            }
        }

        let need_k = self.rg(kernels);
        let need_x = self.rg(input);
        if !need_k && !need_x {
            return;
        }
        let mut cols = vec![T::zero(); rows * p];
        let mut dk = if need_k {
            vec![T::zero(); c_out * rows]
        } else {
            Vec::new()
        };
        let mut dx = if need_x {
            vec![T::zero(); batch * per_in]
        } else {
            Vec::new()
        };
        for n in 0..batch {
            let gn = &g[n * per_out..(n + 1) * per_out];
            if need_k {
                geom.im2col(&x[n * per_in..(n + 1) * per_in], &mut cols);
                // dK (O×R) += g (O×P) · colsᵀ (P×R)
                T::gemm(
                    c_out,
                    p,
                    rows,
                    T::one(),
                    gn,
                    p as isize,
                    1,
                    &cols,
                    1,
                    p as isize,
                    T::one(),
                    &mut dk,
                    rows as isize,
                    1,
                );
            }
            if need_x {
                // dcols (R×P) = Kᵀ (R×O) · g (O×P)
                T::gemm(
                    rows,
                    c_out,
                    p,
                    T::one(),
                    k,
                    1,
                    rows as isize,
                    gn,
                    p as isize,
                    1,
                    T::zero(),
                    &mut cols,
                    p as isize,
                    1,
                );
                geom.col2im_add(&cols, &mut dx[n * per_in..(n + 1) * per_in]);
            }
        }
        if need_k {
            add_into(slot(grads, kernels, dk.len()), &dk);
        }
        if need_x {
            add_into(slot(grads, input, dx.len()), &dx);
        }
    }

    fn acc_map(&self, grads: &mut [Option<Vec<T>>], a: Var, f: impl Fn(usize, T) -> T) {
        if !self.rg(a) {
            return;
        }
        let av = self.nodes[a.0].value.data();
        let dst = slot(grads, a, av.len());
        for (i, d) in dst.iter_mut().enumerate() {
            *d = *d + f(i, av[i]);
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 5.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_sum_of_squares_gives_identity() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[4], &[0.5, -1.5, 2.0, 0.0]));
        let sq = g.square(x);
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.5, -1.5, 2.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap(); // 2x²
        let l = g.sum(z);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(
            g.backward(y),
            Err(AutodiffError::NonScalarLoss(vec![2]))
        );
    }

    #[test]
    fn constants_get_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn identity_affine_and_relu_basics() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[1.0, -2.0, 3.0]));
        let w = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let b = g.constant(t(&[3], &[0.0; 3]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.0]);
        let neg = g.scale(y, -1.0);
        let r = g.relu(neg);
        assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn identity_kernel_and_constant_field() {
        let mut g = Graph::<f64>::new();
        let img: Vec<f64> = (0..25).map(|i| i as f64 * 0.1).collect();
        let x = g.constant(t(&[1, 5, 5], &img));
        let k = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, k, None, 1).unwrap();
        assert_eq!(g.value(y).data(), img.as_slice());
        assert_eq!(g.shape(y), &[1, 5, 5]);

        let c = g.constant(Tensor::filled(&[1, 6, 6], 0.7));
        let ones = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(c, ones, None, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 4]);
        for &v in g.value(y).data() {
            assert!((v - 6.3).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 5, 5]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        assert!(g.conv2d(x, k, None, 1).is_err());
        let k = g.constant(Tensor::zeros(&[1, 2, 7, 7]));
        assert!(g.conv2d(x, k, None, 1).is_err());
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
    }
}
