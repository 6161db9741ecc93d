//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends one node to the [`Tape`]; nodes only reference
//! earlier nodes, so the append order is a topological order and backward is
//! a single reverse sweep. Values on the tape are never mutated after they
//! are recorded.

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
        // im2col buffers, one `K x P` block per image; empty when the weight
        // does not need a gradient.
        cols: Vec<T>,
    },
    AvgPool(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Sigmoid(Var),
    Relu(Var),
    Mul {
        a: Var,
        b: Var,
        // flat index into `b` for every element of the output
        b_index: Vec<usize>,
    },
    Add(Var, Var),
    Scale {
        a: Var,
        s: Var,
    },
    Sum(Var),
    Reshape(Var),
    ScalarLoss {
        input: Var,
        local_grad: Vec<T>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn kk(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Output extent of a convolution along one axis, if it is a positive integer.
pub fn conv_output_extent(len: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    if k == 0 || stride == 0 {
        return None;
    }
    let span = (len + 2 * padding).checked_sub(k)?;
    if span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

#[cfg(any(test, feature = "fault-injection"))]
pub mod fault {
    //! Deliberate corruption of backward rules, used to show that the
    //! gradient checker catches broken derivatives.
    use std::cell::Cell;

    thread_local! {
        static FLIP_SIGMOID: Cell<bool> = const { Cell::new(false) };
    }

    pub fn set_sigmoid_sign_flip(on: bool) {
        FLIP_SIGMOID.with(|f| f.set(on));
    }

    pub(crate) fn sigmoid_sign_flip() -> bool {
        FLIP_SIGMOID.with(|f| f.get())
    }
}

fn sigmoid_grad_sign<T: Scalar>() -> T {
    #[cfg(any(test, feature = "fault-injection"))]
    if fault::sigmoid_sign_flip() {
        return -T::one();
    }
    T::one()
}

/// Numerically stable logistic function.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Input that receives a gradient (used for gradient checks on inputs).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(strip(t), Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(strip(t), Op::Leaf, false)
    }

    /// Record a parameter. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(strip(p.tensor.clone()), Op::Param(id), !p.frozen)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, w) = self.value(input).dims4("conv2d")?;
        let (cout, wcin, kh, kw) = self.value(weight).dims4("conv2d")?;
        if wcin != cin {
            return shape_err("conv2d", format!("input has {cin} channels but weight expects {wcin}"));
        }
        if kh != kw {
            return shape_err("conv2d", format!("kernel must be square, got {kh}x{kw}"));
        }
        if self.value(bias).shape() != [cout] {
            return shape_err(
                "conv2d",
                format!("bias shape {:?} != [{cout}]", self.value(bias).shape()),
            );
        }
        let (Some(ho), Some(wo)) = (
            conv_output_extent(h, kh, stride, padding),
            conv_output_extent(w, kw, stride, padding),
        ) else {
            return shape_err(
                "conv2d",
                format!(
                    "{h}x{w} input, kernel {kh}, stride {stride}, padding {padding} gives a non-integer output extent"
                ),
            );
        };
        let g = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            padding,
            ho,
            wo,
        };
        let (kk, p) = (g.kk(), g.p());
        let keep_cols = self.rg(weight);
        let x = self.value(input).values();
        let wt = self.value(weight).values();
        let b = self.value(bias).values();
        let mut out = vec![T::zero(); n * cout * p];
        let mut cols = if keep_cols {
            vec![T::zero(); n * kk * p]
        } else {
            Vec::new()
        };
        let mut scratch = vec![T::zero(); kk * p];
        for img in 0..n {
            let buf: &mut [T] = if keep_cols {
                &mut cols[img * kk * p..(img + 1) * kk * p]
            } else {
                &mut scratch
            };
            im2col(&x[img * cin * h * w..(img + 1) * cin * h * w], &g, buf);
            let o = &mut out[img * cout * p..(img + 1) * cout * p];
            T::gemm(cout, kk, p, wt, (kk as isize, 1), buf, (p as isize, 1), T::zero(), o);
            for (co, plane) in o.chunks_mut(p).enumerate() {
                for v in plane {
                    *v += b[co];
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom: g,
                cols,
            },
            rg,
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("global_avg_pool")?;
        let hw = h * w;
        let denom = T::lit(hw as f64);
        let out: Vec<T> = self
            .value(input)
            .values()
            .chunks(hw)
            .map(|plane| plane.iter().copied().sum::<T>() / denom)
            .collect();
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(vec![n, c, 1, 1], out)?, Op::AvgPool(input), rg))
    }

    /// Per-plane maximum. Gradient goes to the first maximal element in
    /// row-major order.
    pub fn global_max_pool(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("global_max_pool")?;
        let hw = h * w;
        let mut out = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (pi, plane) in self.value(input).values().chunks(hw).enumerate() {
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            out.push(plane[best]);
            argmax.push(pi * hw + best);
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(vec![n, c, 1, 1], out)?, Op::MaxPool { input, argmax }, rg))
    }

    /// `input[N x Cin] * weight[Cout x Cin]^T + bias[Cout]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, cin) = match *self.value(input).shape() {
            [n, c] => (n, c),
            ref s => return shape_err("linear", format!("input must be rank 2, got {s:?}")),
        };
        let (cout, wcin) = match *self.value(weight).shape() {
            [o, i] => (o, i),
            ref s => return shape_err("linear", format!("weight must be rank 2, got {s:?}")),
        };
        if wcin != cin {
            return shape_err("linear", format!("input width {cin} != weight width {wcin}"));
        }
        if self.value(bias).shape() != [cout] {
            return shape_err("linear", format!("bias must be [{cout}]"));
        }
        let x = self.value(input).values();
        let wt = self.value(weight).values();
        let b = self.value(bias).values();
        let mut out = vec![T::zero(); n * cout];
        for i in 0..n {
            let row = &x[i * cin..(i + 1) * cin];
            for o in 0..cout {
                let wr = &wt[o * cin..(o + 1) * cin];
                let mut acc = T::zero();
                for j in 0..cin {
                    acc += row[j] * wr[j];
                }
                out[i * cout + o] = acc + b[o];
            }
        }
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(Tensor::new(vec![n, cout], out)?, Op::Linear { input, weight, bias }, rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let out = t.values().iter().map(|&v| sigmoid_scalar(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Sigmoid(input), rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let out = t
            .values()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(input);
        self.push(value, Op::Relu(input), rg)
    }

    /// Hadamard product. `b` must have the rank of `a` with every extent
    /// either equal to `a`'s or 1; singleton axes are broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ashape = self.value(a).shape().to_vec();
        let bshape = self.value(b).shape().to_vec();
        let b_index = broadcast_index(&ashape, &bshape)?;
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let out = av.iter().zip(&b_index).map(|(&x, &j)| x * bv[j]).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(ashape, out)?, Op::Mul { a, b, b_index }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return shape_err("add", format!("{:?} != {:?}", ta.shape(), tb.shape()));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Multiply every element of `a` by the single element of `s`.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err(
                "scale",
                format!("scale factor must hold one element, got {:?}", self.value(s).shape()),
            );
        }
        let k = self.value(s).values()[0];
        let ta = self.value(a);
        let out = ta.values().iter().map(|&x| x * k).collect();
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(value, Op::Scale { a, s }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).values().iter().copied().sum::<T>();
        let rg = self.rg(input);
        self.push(Tensor::scalar(total), Op::Sum(input), rg)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).reshaped(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape(input), rg))
    }

    /// Record a scalar-valued function of `input` whose derivative has
    /// already been evaluated at the recorded point.
    pub(crate) fn scalar_loss(&mut self, input: Var, value: T, local_grad: Vec<T>) -> Result<Var> {
        if local_grad.len() != self.value(input).numel() {
            return shape_err("scalar_loss", "gradient length != input length");
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::ScalarLoss { input, local_grad }, rg))
    }

    /// Reverse sweep from `loss`. Gradients exist only for values that
    /// require them; frozen parameters and constants never get one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.requires_grad => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    /// Backward, then add the parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let g = self.backward(loss)?;
        g.accumulate_into(self, store)?;
        Ok(g)
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => self.conv_backward(*input, *weight, *bias, geom, cols, g, grads),
            Op::AvgPool(input) => {
                if self.rg(*input) {
                    let (_, _, h, w) = self.value(*input).dims4("").expect("rank 4");
                    let hw = h * w;
                    let inv = T::one() / T::lit(hw as f64);
                    let acc = slot(grads, *input, self.value(*input).numel());
                    for (plane, &gi) in acc.chunks_mut(hw).zip(g) {
                        for v in plane {
                            *v += gi * inv;
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if self.rg(*input) {
                    let acc = slot(grads, *input, self.value(*input).numel());
                    for (&j, &gi) in argmax.iter().zip(g) {
                        acc[j] += gi;
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, cin) = (x.shape()[0], x.shape()[1]);
                let cout = wt.shape()[0];
                if self.rg(*input) {
                    let acc = slot(grads, *input, n * cin);
                    for i in 0..n {
                        for o in 0..cout {
                            let go = g[i * cout + o];
                            for j in 0..cin {
                                acc[i * cin + j] += go * wt.values()[o * cin + j];
                            }
                        }
                    }
                }
                if self.rg(*weight) {
                    let acc = slot(grads, *weight, cout * cin);
                    for i in 0..n {
                        for o in 0..cout {
                            let go = g[i * cout + o];
                            for j in 0..cin {
                                acc[o * cin + j] += go * x.values()[i * cin + j];
                            }
                        }
                    }
                }
                if self.rg(*bias) {
                    let acc = slot(grads, *bias, cout);
                    for i in 0..n {
                        for o in 0..cout {
                            acc[o] += g[i * cout + o];
                        }
                    }
                }
            }
            Op::Sigmoid(input) => {
                if self.rg(*input) {
                    let sign = sigmoid_grad_sign::<T>();
                    let y = node.value.values();
                    let acc = slot(grads, *input, y.len());
                    for ((a, &gi), &yi) in acc.iter_mut().zip(g).zip(y) {
                        *a += sign * gi * yi * (T::one() - yi);
                    }
                }
            }
            Op::Relu(input) => {
                if self.rg(*input) {
                    let x = self.value(*input).values();
                    let acc = slot(grads, *input, x.len());
                    for ((a, &gi), &xi) in acc.iter_mut().zip(g).zip(x) {
                        if xi > T::zero() {
                            *a += gi;
                        }
                    }
                }
            }
            Op::Mul { a, b, b_index } => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                if self.rg(*a) {
                    let acc = slot(grads, *a, av.len());
                    for ((s, &gi), &j) in acc.iter_mut().zip(g).zip(b_index) {
                        *s += gi * bv[j];
                    }
                }
                if self.rg(*b) {
                    let acc = slot(grads, *b, bv.len());
                    for ((&gi, &j), &ai) in g.iter().zip(b_index).zip(av) {
                        acc[j] += gi * ai;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        let acc = slot(grads, v, g.len());
                        for (s, &gi) in acc.iter_mut().zip(g) {
                            *s += gi;
                        }
                    }
                }
            }
            Op::Scale { a, s } => {
                let k = self.value(*s).values()[0];
                let av = self.value(*a).values();
                if self.rg(*a) {
                    let acc = slot(grads, *a, av.len());
                    for (x, &gi) in acc.iter_mut().zip(g) {
                        *x += gi * k;
                    }
                }
                if self.rg(*s) {
                    let total: T = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).sum();
                    slot(grads, *s, 1)[0] += total;
                }
            }
            Op::Sum(input) => {
                if self.rg(*input) {
                    let acc = slot(grads, *input, self.value(*input).numel());
                    for x in acc.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Reshape(input) => {
                if self.rg(*input) {
                    let acc = slot(grads, *input, g.len());
                    for (x, &gi) in acc.iter_mut().zip(g) {
                        *x += gi;
                    }
                }
            }
            Op::ScalarLoss { input, local_grad } => {
                if self.rg(*input) {
                    let acc = slot(grads, *input, local_grad.len());
                    for (x, &lg) in acc.iter_mut().zip(local_grad) {
                        *x += g[0] * lg;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        geom: &ConvGeom,
        cols: &[T],
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (kk, p) = (geom.kk(), geom.p());
        let cout = geom.cout;
        let per_out = cout * p;
        if self.rg(bias) {
            let acc = slot(grads, bias, cout);
            for img in 0..geom.n {
                for (co, plane) in g[img * per_out..(img + 1) * per_out].chunks(p).enumerate() {
                    acc[co] += plane.iter().copied().sum::<T>();
                }
            }
        }
        if self.rg(weight) {
            let acc = slot(grads, weight, cout * kk);
            for img in 0..geom.n {
                let go = &g[img * per_out..(img + 1) * per_out];
                let c = &cols[img * kk * p..(img + 1) * kk * p];
                T::gemm(cout, p, kk, go, (p as isize, 1), c, (1, p as isize), T::one(), acc);
            }
        }
        if self.rg(input) {
            let wt = self.value(weight).values();
            let per_in = geom.cin * geom.h * geom.w;
            let mut dcols = vec![T::zero(); kk * p];
            let acc = slot(grads, input, geom.n * per_in);
            for img in 0..geom.n {
                let go = &g[img * per_out..(img + 1) * per_out];
                T::gemm(
                    kk,
                    cout,
                    p,
                    wt,
                    (1, kk as isize),
                    go,
                    (p as isize, 1),
                    T::zero(),
                    &mut dcols,
                );
                col2im_add(&dcols, geom, &mut acc[img * per_in..(img + 1) * per_in]);
            }
        }
    }
}

fn strip<T: Scalar>(mut t: Tensor<T>) -> Tensor<T> {
    t.grad = None;
    t
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    let pad = g.padding as isize;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *d = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    let pad = g.padding as isize;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn broadcast_index(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() || a.iter().zip(b).any(|(&x, &y)| y != x && y != 1) {
        return shape_err("mul", format!("{b:?} does not broadcast against {a:?}"));
    }
    let rank = a.len();
    let mut bstride = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        bstride[d] = if b[d] == 1 { 0 } else { acc };
        acc *= b[d];
    }
    let numel: usize = a.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut coord = vec![0usize; rank];
    for _ in 0..numel {
        out.push(coord.iter().zip(&bstride).map(|(c, s)| c * s).sum());
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < a[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    Ok(out)
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T: Scalar = f64> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded value, if it required one and the
    /// loss reached it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Add parameter gradients into the store's gradient slots. Every
    /// trainable parameter recorded on the tape gets a slot, zero-filled when
    /// the loss does not depend on it.
    pub fn accumulate_into(&self, tape: &Tape<T>, store: &mut ParamStore<T>) -> Result<()> {
        for &(id, var) in &self.params {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let numel = p.tensor.numel();
            if tape.value(var).numel() != numel {
                return shape_err("backward", format!("parameter `{}` changed shape", p.name));
            }
            let slot = p.tensor.grad.get_or_insert_with(|| vec![T::zero(); numel]);
            if let Some(g) = self.wrt(var) {
                for (s, &gi) in slot.iter_mut().zip(g) {
                    *s += gi;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_sums_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let w = tape.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).values(), &[9.0]);
    }

    #[test]
    fn conv_pointwise_scale_and_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.constant(t(&[1], &[0.5]));
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(tape.value(y).values(), &[2.5, 4.5, 6.5, 8.5]);
    }

    #[test]
    fn conv_rejects_channel_mismatch_and_fractional_extent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(tape.conv2d(x, w, b, 1, 1).is_err());
        let w2 = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        // (4 + 0 - 3) / 2 is not an integer
        assert!(tape.conv2d(x, w2, b, 2, 0).is_err());
        assert!(tape.conv2d(x, w2, b, 1, 1).is_ok());
    }

    #[test]
    fn pools_on_small_plane() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let a = tape.global_avg_pool(x).unwrap();
        let m = tape.global_max_pool(x).unwrap();
        assert_eq!(tape.value(a).values(), &[2.5]);
        assert_eq!(tape.value(m).values(), &[4.0]);
    }

    #[test]
    fn max_pool_tie_routes_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1, 1, 2, 2], &[4.0, 4.0, 0.0, 0.0]));
        let m = tape.global_max_pool(x).unwrap();
        let l = tape.sum(m);
        let g = tape.backward(l).unwrap();
        assert_eq!(tape.value(m).values(), &[4.0]);
        assert_eq!(g.wrt(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_pool_constant_plane() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[2, 3, 4, 5], 1.75));
        let a = tape.global_avg_pool(x).unwrap();
        assert!(tape.value(a).values().iter().all(|&v| v == 1.75));
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, eye, zb).unwrap();
        assert_eq!(tape.value(y).values(), tape.value(x).values());

        let zw = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.constant(t(&[3], &[0.1, 0.2, 0.3]));
        let y = tape.linear(x, zw, b).unwrap();
        assert_eq!(tape.value(y).values(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
        let bad = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(tape.linear(x, bad, b).is_err());
    }

    #[test]
    fn sigmoid_symmetry_and_saturation() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.0, -100.0, 100.0]));
        let y = tape.sigmoid(x);
        let v = tape.value(y).values();
        assert_eq!(v[0], 0.5);
        assert!(v[1] > 0.0 && v[1] <= 1e-30);
        assert!(v[2] <= 1.0 && v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn mul_identity_annihilator_and_bad_broadcast() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::uniform(&[1, 2, 3, 3], 1.0, &mut rand::thread_rng()));
        let ones = tape.constant(Tensor::filled(&[1, 2, 1, 1], 1.0));
        let zeros = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(y).values(), tape.value(x).values());
        let z = tape.mul(x, zeros).unwrap();
        assert!(tape.value(z).values().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros(&[1, 2, 3, 1, 1]));
        assert!(tape.mul(x, bad).is_err());
        let bad = tape.constant(Tensor::zeros(&[1, 2, 2, 3]));
        assert!(tape.mul(x, bad).is_err());
    }

    #[test]
    fn add_zero_and_scale_zero() {
        let mut tape = Tape::<f64>::new();
        let xv = t(&[2, 2], &[1.0, -2.0, 3.0, 4.0]);
        let x = tape.constant(xv.clone());
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y).values(), xv.values());

        let s = tape.leaf(Tensor::scalar(0.0));
        let up = tape.constant(t(&[2, 2], &[0.5, 1.0, -1.0, 2.0]));
        let sx = tape.scale(x, s).unwrap();
        assert!(tape.value(sx).values().iter().all(|&v| v == 0.0));
        let w = tape.mul(sx, up).unwrap();
        let l = tape.sum(w);
        let g = tape.backward(l).unwrap();
        // sum(upstream * x)
        assert_eq!(g.wrt(s).unwrap(), &[0.5 - 2.0 - 3.0 + 8.0]);
        let bad = tape.constant(Tensor::zeros(&[4]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::uniform(&[2, 3], 1.0, &mut rand::thread_rng()));
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::NoForward)));
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn frozen_and_disconnected_parameters() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::filled(&[2], 2.0)).unwrap();
        let b = store.insert("b", Tensor::filled(&[2], 3.0)).unwrap();
        let c = store.insert("c", Tensor::filled(&[2], 1.0)).unwrap();
        store.get_mut(b).frozen = true;
        let mut tape = Tape::<f64>::new();
        let va = tape.param(&store, a);
        let vb = tape.param(&store, b);
        let _vc = tape.param(&store, c);
        let p = tape.mul(va, vb).unwrap();
        let l = tape.sum(p);
        tape.backward_into(l, &mut store).unwrap();
        assert_eq!(store.get(a).tensor.grad.as_deref(), Some(&[3.0, 3.0][..]));
        assert!(store.get(b).tensor.grad.is_none());
        assert_eq!(store.get(c).tensor.grad.as_deref(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn constant_subgraph_is_not_differentiated() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::filled(&[1, 1, 2, 2], 1.0));
        let y = tape.relu(x);
        let l = tape.sum(y);
        assert!(!tape.requires_grad(l));
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(x).is_none());
    }

    #[test]
    fn conv_output_extent_formula() {
        assert_eq!(conv_output_extent(8, 7, 1, 3), Some(8));
        assert_eq!(conv_output_extent(64, 3, 2, 1), None);
        assert_eq!(conv_output_extent(65, 3, 2, 1), Some(33));
        assert_eq!(conv_output_extent(2, 5, 1, 0), None);
    }
}
