//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its forward value.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node that (transitively) depends on a trainable leaf.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    Linear {
        x: Var,
        w: Var,
    },
    BatchMatmul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Relu(Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Upsample(Var),
    SumAll(Var),
    /// Scalar objective whose gradient w.r.t. `input` was computed in the forward pass.
    Objective {
        input: Var,
        grad: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

/// Splits `shape` around `axis` into `(outer, n, inner)`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Adds a 1-d `bias` broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || self.shape(bias) != [shape[axis]] {
            return Err(Error::Shape(format!(
                "bias {:?} does not match axis {axis} of {:?}",
                self.shape(bias),
                shape
            )));
        }
        let (outer, n, inner) = around(&shape, axis);
        let b = self.value(bias).data();
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..n {
                let bj = b[j];
                for v in &mut d[(o * n + j) * inner..(o * n + j + 1) * inner] {
                    *v += bj;
                }
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias, axis }, &[x, bias]))
    }

    /// `x[..., in] · w[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != cin {
            return Err(Error::Shape(format!(
                "linear weight {ws:?} incompatible with input {xs:?}"
            )));
        }
        let rows = self.value(x).numel() / cin.max(1);
        let cout = ws[1];
        let mut out = vec![T::zero(); rows * cout];
        kernels::gemm_nn(
            rows,
            cin,
            cout,
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(out, Op::Linear { x, w }, &[x, w]))
    }

    /// Batched `a[b, n, k] · b[b, k, m]`, or `a · bᵀ` with `b[b, m, k]` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ba, n, k) = self.value(a).dims3()?;
        let (bb, r, c) = self.value(b).dims3()?;
        let (kb, m) = if trans_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb {
            return Err(Error::Shape(format!(
                "batch_matmul {:?} x {:?} (trans_b={trans_b})",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); ba * n * m];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..ba {
                let ai = &ad[i * n * k..(i + 1) * n * k];
                let bi = &bd[i * k * m..(i + 1) * k * m];
                let oi = &mut out[i * n * m..(i + 1) * n * m];
                if trans_b {
                    kernels::gemm_nt(n, k, m, ai, bi, oi);
                } else {
                    kernels::gemm_nn(n, k, m, ai, bi, oi);
                }
            }
        }
        let out = Tensor::from_vec(&[ba, n, m], out)?;
        Ok(self.push(out, Op::BatchMatmul { a, b, trans_b }, &[a, b]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!(
                "invalid permutation {perm:?} for {shape:?}"
            )));
        }
        let (data, out_shape) = kernels::permute(self.value(x).data(), &shape, perm);
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} for {shape:?}")));
        }
        let (outer, n, inner) = around(&shape, axis);
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(d[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..n {
                    let e = (d[base + j * inner] - mx).exp();
                    d[base + j * inner] = e;
                    s += e;
                }
                for j in 0..n {
                    d[base + j * inner] /= s;
                }
            }
        }
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "layer_norm affine {:?}/{:?} for input {shape:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).numel() / c;
        let eps = T::of(eps);
        let inv_c = T::one() / T::of_usize(c);
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); rows * c];
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    /// 2-d convolution of `x[b, cin, h, w]` with `w[cout, cin/groups, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (b, cin, h, wd) = self.value(x).dims4()?;
        let (cout, cin_g, k, k2) = self.value(w).dims4()?;
        if groups == 0
            || cin % groups != 0
            || cout % groups != 0
            || cin_g != cin / groups
            || k != k2
            || stride == 0
            || h + 2 * pad < k
            || wd + 2 * pad < k
        {
            return Err(Error::Shape(format!(
                "conv2d weight {:?} (groups {groups}, stride {stride}, pad {pad}) for input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        let geom = ConvGeom {
            in_c: cin_g,
            in_h: h,
            in_w: wd,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let cout_g = cout / groups;
        let mut out = vec![T::zero(); b * cout * oh * ow];
        {
            let xd = self.value(x).data();
            let wdat = self.value(w).data();
            if groups == cin && cin_g == 1 && cout_g == 1 {
                depthwise_forward(&geom, b, cin, xd, wdat, &mut out);
            } else {
                let mut col = vec![T::zero(); geom.col_rows() * oh * ow];
                for bi in 0..b {
                    for gi in 0..groups {
                        let xs = &xd[(bi * cin + gi * cin_g) * h * wd..(bi * cin + (gi + 1) * cin_g) * h * wd];
                        kernels::im2col(&geom, xs, &mut col);
                        let wg = &wdat[gi * cout_g * geom.col_rows()..(gi + 1) * cout_g * geom.col_rows()];
                        let og = &mut out[(bi * cout + gi * cout_g) * oh * ow
                            ..(bi * cout + (gi + 1) * cout_g) * oh * ow];
                        kernels::gemm_nn(cout_g, geom.col_rows(), oh * ow, wg, &col, og);
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[b, cout, oh, ow], out)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                groups,
            },
            &[x, w],
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Shape(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!(
                    "concat along {axis}: {:?} vs {:?}",
                    s, base
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = around(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(
            out,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            xs,
        ))
    }

    /// Bilinear resize of the two trailing axes of a 4-d tensor.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if h == out_h && w == out_w {
            return Ok(x);
        }
        let mut out = vec![T::zero(); b * c * out_h * out_w];
        kernels::bilinear_forward(b * c, (h, w), (out_h, out_w), self.value(x).data(), &mut out);
        let out = Tensor::from_vec(&[b, c, out_h, out_w], out)?;
        Ok(self.push(out, Op::Upsample(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    /// Records a scalar objective computed outside the graph together with its
    /// gradient with respect to `input`.
    pub fn objective(&mut self, input: Var, value: T, grad: Tensor<T>) -> Result<Var> {
        if grad.shape() != self.shape(input) {
            return Err(Error::Shape(format!(
                "objective gradient {:?} for input {:?}",
                grad.shape(),
                self.shape(input)
            )));
        }
        Ok(self.push(Tensor::scalar(value), Op::Objective { input, grad }, &[input]))
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Grads<T> {
        assert_eq!(
            self.value(root).numel(),
            1,
            "backward requires a scalar root"
        );
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &gy, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(gy);
            }
        }
        Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = self.slot(grads, *v) {
                        add_into(g, gy);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.slot(grads, *a) {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(vb) {
                        *g += d * o;
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    for ((g, &d), &o) in g.iter_mut().zip(gy).zip(va) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(g) = self.slot(grads, *x) {
                    for (g, &d) in g.iter_mut().zip(gy) {
                        *g += d * *c;
                    }
                }
            }
            Op::AddBias { x, bias, axis } => {
                if let Some(g) = self.slot(grads, *x) {
                    add_into(g, gy);
                }
                let (outer, n, inner) = around(self.shape(*x), *axis);
                if let Some(g) = self.slot(grads, *bias) {
                    for o in 0..outer {
                        for j in 0..n {
                            let s: T = gy[(o * n + j) * inner..(o * n + j + 1) * inner]
                                .iter()
                                .copied()
                                .sum();
                            g[j] += s;
                        }
                    }
                }
            }
            Op::Linear { x, w } => {
                let ws = self.shape(*w);
                let (cin, cout) = (ws[0], ws[1]);
                let rows = self.value(*x).numel() / cin;
                if let Some(g) = self.slot(grads, *x) {
                    kernels::gemm_nt(rows, cout, cin, gy, self.value(*w).data(), g);
                }
                if let Some(g) = self.slot(grads, *w) {
                    kernels::gemm_tn(cin, rows, cout, self.value(*x).data(), gy, g);
                }
            }
            Op::BatchMatmul { a, b, trans_b } => {
                let (ba, n, k) = self.value(*a).dims3().expect("3-d");
                let m = node.value.shape()[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.slot(grads, *a) {
                    for i in 0..ba {
                        let gyi = &gy[i * n * m..(i + 1) * n * m];
                        let bi = &bd[i * k * m..(i + 1) * k * m];
                        let gi = &mut g[i * n * k..(i + 1) * n * k];
                        if *trans_b {
                            kernels::gemm_nn(n, m, k, gyi, bi, gi);
                        } else {
                            kernels::gemm_nt(n, m, k, gyi, bi, gi);
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *b) {
                    for i in 0..ba {
                        let gyi = &gy[i * n * m..(i + 1) * n * m];
                        let ai = &ad[i * n * k..(i + 1) * n * k];
                        let gi = &mut g[i * k * m..(i + 1) * k * m];
                        if *trans_b {
                            kernels::gemm_tn(m, n, k, gyi, ai, gi);
                        } else {
                            kernels::gemm_tn(k, n, m, ai, gyi, gi);
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if let Some(g) = self.slot(grads, *x) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (back, _) = kernels::permute(gy, node.value.shape(), &inv);
                    add_into(g, &back);
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    add_into(g, gy);
                }
            }
            Op::Softmax { x, axis } => {
                if let Some(g) = self.slot(grads, *x) {
                    let (outer, n, inner) = around(node.value.shape(), *axis);
                    let y = node.value.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * n * inner + i;
                            let mut s = T::zero();
                            for j in 0..n {
                                s += gy[base + j * inner] * y[base + j * inner];
                            }
                            for j in 0..n {
                                let idx = base + j * inner;
                                g[idx] += y[idx] * (gy[idx] - s);
                            }
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
                let c = self.shape(*gamma)[0];
                let rows = xhat.len() / c;
                let gam = self.value(*gamma).data();
                if let Some(g) = self.slot(grads, *gamma) {
                    for r in 0..rows {
                        for j in 0..c {
                            g[j] += gy[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *beta) {
                    for r in 0..rows {
                        for j in 0..c {
                            g[j] += gy[r * c + j];
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *x) {
                    let inv_c = T::one() / T::of_usize(c);
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let d = gy[r * c + j] * gam[j];
                            m1 += d;
                            m2 += d * xhat[r * c + j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let d = gy[r * c + j] * gam[j];
                            g[r * c + j] += rstd[r] * (d - m1 - xhat[r * c + j] * m2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(self.value(*x).data()) {
                        *g += d * kernels::gelu_grad(v);
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(self.value(*x).data()) {
                        if v > T::zero() {
                            *g += d;
                        }
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                groups,
            } => self.conv2d_backward(node, gy, grads, *x, *w, *stride, *pad, *groups),
            Op::Concat { xs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = around(shape, *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if let Some(g) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &gy[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            add_into(&mut g[o * n * inner..(o + 1) * n * inner], src);
                        }
                    }
                    offset += n;
                }
            }
            Op::Upsample(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    let (b, c, h, w) = self.value(*x).dims4().expect("4-d");
                    let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                    kernels::bilinear_backward(b * c, (h, w), (oh, ow), gy, g);
                }
            }
            Op::SumAll(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    for v in g.iter_mut() {
                        *v += gy[0];
                    }
                }
            }
            Op::Objective { input, grad } => {
                if let Some(g) = self.slot(grads, *input) {
                    for (g, &d) in g.iter_mut().zip(grad.data()) {
                        *g += d * gy[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node<T>,
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        groups: usize,
    ) {
        let (b, cin, h, wd) = self.value(x).dims4().expect("4-d");
        let (cout, cin_g, k, _) = self.value(w).dims4().expect("4-d");
        let geom = ConvGeom {
            in_c: cin_g,
            in_h: h,
            in_w: wd,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
        let cout_g = cout / groups;
        let xd = self.value(x).data();
        let wdat = self.value(w).data();

        if groups == cin && cin_g == 1 && cout_g == 1 {
            if let Some(g) = self.slot(grads, w) {
                depthwise_grad_weight(&geom, b, cin, xd, gy, g);
            }
            if let Some(g) = self.slot(grads, x) {
                depthwise_grad_input(&geom, b, cin, wdat, gy, g);
            }
            return;
        }

        let rows = geom.col_rows();
        let mut col = vec![T::zero(); rows * oh * ow];
        if self.nodes[w.0].needs_grad {
            let g = self.slot(grads, w).expect("weight slot");
            for bi in 0..b {
                for gi in 0..groups {
                    let xs = &xd[(bi * cin + gi * cin_g) * h * wd..(bi * cin + (gi + 1) * cin_g) * h * wd];
                    kernels::im2col(&geom, xs, &mut col);
                    let gyg = &gy[(bi * cout + gi * cout_g) * oh * ow..(bi * cout + (gi + 1) * cout_g) * oh * ow];
                    let gw = &mut g[gi * cout_g * rows..(gi + 1) * cout_g * rows];
                    kernels::gemm_nt(cout_g, oh * ow, rows, gyg, &col, gw);
                }
            }
        }
        if let Some(g) = self.slot(grads, x) {
            for bi in 0..b {
                for gi in 0..groups {
                    col.fill(T::zero());
                    let wg = &wdat[gi * cout_g * rows..(gi + 1) * cout_g * rows];
                    let gyg = &gy[(bi * cout + gi * cout_g) * oh * ow..(bi * cout + (gi + 1) * cout_g) * oh * ow];
                    kernels::gemm_tn(rows, cout_g, oh * ow, wg, gyg, &mut col);
                    let gx = &mut g[(bi * cin + gi * cin_g) * h * wd..(bi * cin + (gi + 1) * cin_g) * h * wd];
                    kernels::col2im(&geom, &col, gx);
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn depthwise_forward<T: Scalar>(g: &ConvGeom, b: usize, c: usize, x: &[T], w: &[T], y: &mut [T]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * g.in_h * g.in_w..(bi * c + ci + 1) * g.in_h * g.in_w];
            let kern = &w[ci * k * k..(ci + 1) * k * k];
            let out = &mut y[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            acc += kern[ky * k + kx] * plane[iy as usize * g.in_w + ix as usize];
                        }
                    }
                    out[oy * ow + ox] += acc;
                }
            }
        }
    }
}

fn depthwise_grad_weight<T: Scalar>(
    g: &ConvGeom,
    b: usize,
    c: usize,
    x: &[T],
    gy: &[T],
    gw: &mut [T],
) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    for bi in 0..b {
        for ci in 0..c {
            let plane = &x[(bi * c + ci) * g.in_h * g.in_w..(bi * c + ci + 1) * g.in_h * g.in_w];
            let dy = &gy[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = T::zero();
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            acc += dy[oy * ow + ox] * plane[iy as usize * g.in_w + ix as usize];
                        }
                    }
                    gw[ci * k * k + ky * k + kx] += acc;
                }
            }
        }
    }
}

fn depthwise_grad_input<T: Scalar>(
    g: &ConvGeom,
    b: usize,
    c: usize,
    w: &[T],
    gy: &[T],
    gx: &mut [T],
) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    for bi in 0..b {
        for ci in 0..c {
            let kern = &w[ci * k * k..(ci + 1) * k * k];
            let dy = &gy[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
            let plane = &mut gx[(bi * c + ci) * g.in_h * g.in_w..(bi * c + ci + 1) * g.in_h * g.in_w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let d = dy[oy * ow + ox];
                    for ky in 0..k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            plane[iy as usize * g.in_w + ix as usize] += kern[ky * k + kx] * d;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(f(inputs) * probe))/d(input) against central differences.
    fn check<F>(shapes: &[&[usize]], f: F)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let eval = |inputs: &[Tensor<f64>], probe: Option<&Tensor<f64>>| {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let out = f(&mut g, &vars);
            let p = probe
                .cloned()
                .unwrap_or_else(|| Tensor::full(g.shape(out), 1.0));
            let pv = g.constant(p.clone());
            let m = g.mul(out, pv).unwrap();
            let s = g.sum_all(m);
            (g, vars, s, p)
        };
        let (_, _, _, shape_probe) = eval(&inputs, None);
        let probe = Tensor::from_fn(shape_probe.shape(), |i| ((i as f64) * 0.731).sin());
        let (g, vars, root, _) = eval(&inputs, Some(&probe));
        let grads = g.backward(root);
        let h = 1e-6;
        for (ti, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[ti]).unwrap();
            for j in 0..t.numel() {
                let mut plus = inputs.clone();
                plus[ti].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[ti].data_mut()[j] -= h;
                let (gp, _, rp, _) = eval(&plus, Some(&probe));
                let (gm, _, rm, _) = eval(&minus, Some(&probe));
                let fd = (gp.value(rp).data()[0] - gm.value(rm).data()[0]) / (2.0 * h);
                let a = analytic.data()[j];
                assert!(
                    (fd - a).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {ti} elem {j}: fd {fd} analytic {a}"
                );
            }
        }
    }

    #[test]
    fn grad_linear_and_bias() {
        check(&[&[2, 3, 4], &[4, 5], &[5]], |g, v| {
            let y = g.linear(v[0], v[1]).unwrap();
            g.add_bias(y, v[2], 2).unwrap()
        });
    }

    #[test]
    fn grad_batch_matmul_both_layouts() {
        check(&[&[2, 3, 4], &[2, 4, 5]], |g, v| g.batch_matmul(v[0], v[1], false).unwrap());
        check(&[&[2, 3, 4], &[2, 5, 4]], |g, v| g.batch_matmul(v[0], v[1], true).unwrap());
    }

    #[test]
    fn grad_softmax_layernorm_gelu() {
        check(&[&[2, 3, 4]], |g, v| g.softmax(v[0], 1).unwrap());
        check(&[&[3, 5], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
        check(&[&[7]], |g, v| g.gelu(v[0]));
    }

    #[test]
    fn grad_conv_dense_strided_and_depthwise() {
        check(&[&[2, 2, 5, 5], &[3, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], 2, 1, 1).unwrap());
        check(&[&[1, 3, 4, 4], &[3, 1, 3, 3]], |g, v| g.conv2d(v[0], v[1], 1, 1, 3).unwrap());
        check(&[&[1, 4, 4, 4], &[2, 2, 1, 1]], |g, v| g.conv2d(v[0], v[1], 1, 0, 2).unwrap());
    }

    #[test]
    fn grad_permute_concat_upsample() {
        check(&[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]).unwrap());
        check(&[&[1, 2, 2, 2], &[1, 3, 2, 2]], |g, v| g.concat(&[v[0], v[1]], 1).unwrap());
        check(&[&[1, 2, 2, 3]], |g, v| g.upsample_bilinear(v[0], 5, 7).unwrap());
    }

    #[test]
    fn depthwise_matches_grouped_im2col_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 4, 5, 5]);
        let w = rand_tensor(&mut rng, &[4, 1, 3, 3]);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let fast = g.conv2d(xv, wv, 1, 1, 4).unwrap();
        // same computation as a dense conv with a block-diagonal kernel
        let mut dense = Tensor::zeros(&[4, 4, 3, 3]);
        for c in 0..4 {
            for t in 0..9 {
                dense.data_mut()[(c * 4 + c) * 9 + t] = w.data()[c * 9 + t];
            }
        }
        let dv = g.constant(dense);
        let slow = g.conv2d(xv, dv, 1, 1, 1).unwrap();
        assert!(g.value(fast).max_abs_diff(g.value(slow)) < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[3], 2.0));
        let p = g.param(Tensor::full(&[3], 1.0));
        let y = g.mul(c, p).unwrap();
        let s = g.sum_all(y);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
