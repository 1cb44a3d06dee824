//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each primitive appends a
//! node holding its output value and whatever it needs for the
//! vector-Jacobian product; [`Graph::backward`] walks the nodes in reverse
//! and accumulates gradients into the trainable entries of a
//! [`ParamStore`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tensor::{gemm_acc, Tensor};
use crate::error::{invalid, Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinKind, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        dilation: usize,
        padding: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Dropout(Var, Vec<f64>),
    L2Norm(Var),
    Dot(Var, Var),
    TopKMean(Var, Vec<usize>),
    Pick(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Recording tape. Train mode carries the seeded RNG used for dropout masks.
pub struct Graph {
    nodes: Vec<Node>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: None,
        }
    }

    /// Training-mode graph whose dropout masks are drawn from `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that records gradients without being backed by a parameter store.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf copied from `store`; trainable entries receive gradients on backward.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let p = store.get(name)?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    // ---- elementwise with broadcasting ------------------------------------

    fn binary(&mut self, kind: BinKind, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(name, av.shape(), bv.shape())?;
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let data = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let o3 = pad3(&out_shape);
            let sa = bcast_strides(av.shape(), &out_shape);
            let sb = bcast_strides(bv.shape(), &out_shape);
            let (ad, bd) = (av.data(), bv.data());
            let mut out = Vec::with_capacity(o3.iter().product());
            for i in 0..o3[0] {
                for j in 0..o3[1] {
                    for k in 0..o3[2] {
                        let ia = i * sa[0] + j * sa[1] + k * sa[2];
                        let ib = i * sb[0] + j * sb[1] + k * sb[2];
                        out.push(f(ad[ia], bd[ib]));
                    }
                }
            }
            out
        };
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b, "div")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    // ---- linear algebra ---------------------------------------------------

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), false, bv.data(), false, &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Dilated 1-D convolution over the leading (temporal) axis.
    ///
    /// `x: [T, Cin]`, `w: [K, Cin, Cout]`, optional `bias: [Cout]`. Output length is
    /// `T + 2·padding − dilation·(K − 1)`; out-of-range taps read zeros.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        dilation: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (sx, sw) = (xv.shape(), wv.shape());
        let mismatch = || Error::Shape {
            op: "conv1d",
            lhs: sx.to_vec(),
            rhs: sw.to_vec(),
        };
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[1] || dilation == 0 {
            return Err(mismatch());
        }
        let (t_in, cin) = (sx[0], sx[1]);
        let (taps, cout) = (sw[0], sw[2]);
        let span = dilation * (taps - 1);
        if t_in + 2 * padding <= span {
            return Err(mismatch());
        }
        let t_out = t_in + 2 * padding - span;
        let mut out = vec![0.0; t_out * cout];
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(Error::Shape {
                    op: "conv1d bias",
                    lhs: vec![cout],
                    rhs: bv.shape().to_vec(),
                });
            }
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv.data());
            }
        }
        for tap in 0..taps {
            if let Some((o0, i0, len)) = tap_range(tap, dilation, padding, t_in, t_out) {
                let wk = &wv.data()[tap * cin * cout..(tap + 1) * cin * cout];
                gemm_acc(
                    &xv.data()[i0 * cin..(i0 + len) * cin],
                    false,
                    wk,
                    false,
                    &mut out[o0 * cout..(o0 + len) * cout],
                    len,
                    cin,
                    cout,
                );
            }
        }
        let value = Tensor::matrix(t_out, cout, out)?;
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            value,
            Op::Conv1d {
                x,
                w,
                bias,
                dilation,
                padding,
            },
            rg,
        ))
    }

    // ---- pointwise nonlinearities ----------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    /// Clamp into `[lo, hi]`; the gradient is passed only where the input lies inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        let (outer, n, inner) = axis_split("softmax", v.shape(), axis)?;
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] /= z;
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        let (outer, n, inner) = axis_split("log_softmax", v.shape(), axis)?;
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (out[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[idx(j)] -= lse;
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a, axis), rg))
    }

    // ---- reductions and indexing -----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.value(a);
        let (outer, n, inner) = axis_split("sum_axis", v.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += v.data()[(o * n + j) * inner + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SumAxis(a, axis), rg))
    }

    /// Rows `start..end` along the leading (temporal) axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() == 0 || start >= end || end > v.rows() {
            return Err(invalid(format!(
                "slice_rows: range {start}..{end} invalid for shape {:?}",
                v.shape()
            )));
        }
        let w = v.row_len();
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let value = Tensor::new(shape, v.data()[start * w..end * w].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceRows(a, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(a);
        let value = v.reshape(shape.clone()).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: v.shape().to_vec(),
            rhs: shape,
        })?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Inverted dropout. Identity in evaluation mode or when `rate` is 0.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(a);
        };
        if rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let n = self.nodes[a.0].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let v = self.value(a);
        let data = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Dropout(a, mask), rg))
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).data().iter().map(|x| x * x).sum::<f64>().sqrt();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(n), Op::L2Norm(a), rg)
    }

    /// Inner product of two same-shaped tensors, as a scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape {
                op: "dot",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let d = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::Dot(a, b), rg))
    }

    /// Per-column mean of the `k` largest entries of a `[T, C]` matrix → `[C]`.
    ///
    /// When `T < k` every row is averaged. Ties select the earlier row.
    pub fn topk_mean(&mut self, a: Var, k: usize) -> Result<Var> {
        let v = self.value(a);
        if v.rank() != 2 {
            return Err(Error::Shape {
                op: "topk_mean",
                lhs: v.shape().to_vec(),
                rhs: vec![k],
            });
        }
        if k == 0 {
            return Err(invalid("topk_mean: k must be at least 1"));
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let keff = k.min(rows);
        let mut selected = Vec::with_capacity(keff * cols);
        let mut out = Vec::with_capacity(cols);
        let mut order: Vec<usize> = Vec::with_capacity(rows);
        for j in 0..cols {
            order.clear();
            order.extend(0..rows);
            let col = |i: usize| v.data()[i * cols + j];
            order.sort_by(|&p, &q| col(q).total_cmp(&col(p)).then(p.cmp(&q)));
            let mut s = 0.0;
            for &i in &order[..keff] {
                s += col(i);
                selected.push(i * cols + j);
            }
            out.push(s / keff as f64);
        }
        let value = Tensor::vector(out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::TopKMean(a, selected), rg))
    }

    /// Single entry at a flat row-major index, as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        let Some(&x) = v.data().get(index) else {
            return Err(invalid(format!(
                "pick: index {index} out of range for shape {:?}",
                v.shape()
            )));
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(x), Op::Pick(a, index), rg))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`; returns the gradient of every node that
    /// depends on a gradient-requiring leaf.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::gradients`] and adds parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &grads.grads[i]) {
                store.accumulate(name, g)?;
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.zip_add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), data).expect("grad shape")
        };
        let elementwise = |v: Var, f: &dyn Fn(f64, f64, f64) -> f64| {
            let x = &self.nodes[v.0].value;
            let data = x
                .data()
                .iter()
                .zip(out.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                .collect();
            like(v, data)
        };

        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (ga, gb) = binary_backward(*kind, val(*a), val(*b), out.shape(), g);
                send(*a, ga);
                send(*b, gb);
            }
            Op::Scale(a, f) => send(*a, g.map(|x| x * f)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; m * k];
                    gemm_acc(g.data(), false, bv.data(), true, &mut ga, m, n, k);
                    send(*a, like(*a, ga));
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; k * n];
                    gemm_acc(av.data(), true, g.data(), false, &mut gb, k, m, n);
                    send(*b, like(*b, gb));
                }
            }
            Op::Conv1d {
                x,
                w,
                bias,
                dilation,
                padding,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let (t_in, cin) = (xv.shape()[0], xv.shape()[1]);
                let (taps, cout) = (wv.shape()[0], wv.shape()[2]);
                let t_out = out.shape()[0];
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let mut gx = if need_x { vec![0.0; t_in * cin] } else { Vec::new() };
                let mut gw = if need_w { vec![0.0; taps * cin * cout] } else { Vec::new() };
                for tap in 0..taps {
                    let Some((o0, i0, len)) = tap_range(tap, *dilation, *padding, t_in, t_out)
                    else {
                        continue;
                    };
                    let gblk = &g.data()[o0 * cout..(o0 + len) * cout];
                    let wk = tap * cin * cout..(tap + 1) * cin * cout;
                    if need_x {
                        gemm_acc(
                            gblk,
                            false,
                            &wv.data()[wk.clone()],
                            true,
                            &mut gx[i0 * cin..(i0 + len) * cin],
                            len,
                            cout,
                            cin,
                        );
                    }
                    if need_w {
                        gemm_acc(
                            &xv.data()[i0 * cin..(i0 + len) * cin],
                            true,
                            gblk,
                            false,
                            &mut gw[wk],
                            cin,
                            len,
                            cout,
                        );
                    }
                }
                if need_x {
                    send(*x, like(*x, gx));
                }
                if need_w {
                    send(*w, like(*w, gw));
                }
                if let Some(b) = bias {
                    let mut gb = vec![0.0; cout];
                    for row in g.data().chunks(cout) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    send(*b, like(*b, gb));
                }
            }
            Op::Relu(a) => send(*a, elementwise(*a, &|x, _, gi| if x > 0.0 { gi } else { 0.0 })),
            Op::Sigmoid(a) => send(*a, elementwise(*a, &|_, y, gi| gi * y * (1.0 - y))),
            Op::Exp(a) => send(*a, elementwise(*a, &|_, y, gi| gi * y)),
            Op::Log(a) => send(*a, elementwise(*a, &|x, _, gi| gi / x)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(
                    *a,
                    elementwise(*a, &|x, _, gi| if x >= lo && x <= hi { gi } else { 0.0 }),
                )
            }
            Op::Softmax(a, axis) => {
                let (outer, n, inner) = axis_split("softmax", out.shape(), *axis).expect("axis");
                let (s, gd) = (out.data(), g.data());
                let mut gx = vec![0.0; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dotp: f64 = (0..n).map(|j| gd[idx(j)] * s[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = s[idx(j)] * (gd[idx(j)] - dotp);
                        }
                    }
                }
                send(*a, like(*a, gx));
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, n, inner) =
                    axis_split("log_softmax", out.shape(), *axis).expect("axis");
                let (ls, gd) = (out.data(), g.data());
                let mut gx = vec![0.0; ls.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let gsum: f64 = (0..n).map(|j| gd[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = gd[idx(j)] - ls[idx(j)].exp() * gsum;
                        }
                    }
                }
                send(*a, like(*a, gx));
            }
            Op::Sum(a) => {
                let gi = g.data()[0];
                send(*a, val(*a).map(|_| gi));
            }
            Op::Mean(a) => {
                let gi = g.data()[0] / val(*a).len() as f64;
                send(*a, val(*a).map(|_| gi));
            }
            Op::SumAxis(a, axis) => {
                let av = val(*a);
                let (outer, n, inner) = axis_split("sum_axis", av.shape(), *axis).expect("axis");
                let mut gx = vec![0.0; av.len()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            gx[(o * n + j) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                send(*a, like(*a, gx));
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let w = av.row_len();
                let mut gx = vec![0.0; av.len()];
                gx[start * w..start * w + g.len()].copy_from_slice(g.data());
                send(*a, like(*a, gx));
            }
            Op::Reshape(a) => send(*a, like(*a, g.data().to_vec())),
            Op::Dropout(a, mask) => {
                let data = g.data().iter().zip(mask).map(|(x, m)| x * m).collect();
                send(*a, like(*a, data));
            }
            Op::L2Norm(a) => {
                let n = out.data()[0];
                let gi = g.data()[0];
                let scale = if n > 0.0 { gi / n } else { 0.0 };
                send(*a, val(*a).map(|x| x * scale));
            }
            Op::Dot(a, b) => {
                let gi = g.data()[0];
                let (av, bv) = (val(*a), val(*b));
                send(*a, bv.map(|x| x * gi));
                send(*b, av.map(|x| x * gi));
            }
            Op::TopKMean(a, selected) => {
                let av = val(*a);
                let cols = av.shape()[1];
                let keff = selected.len() / cols;
                let mut gx = vec![0.0; av.len()];
                for &flat in selected {
                    gx[flat] += g.data()[flat % cols] / keff as f64;
                }
                send(*a, like(*a, gx));
            }
            Op::Pick(a, index) => {
                let mut gx = vec![0.0; val(*a).len()];
                gx[*index] = g.data()[0];
                send(*a, like(*a, gx));
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output rows `o0..o0+len` of a conv tap read input rows `i0..i0+len`.
fn tap_range(
    tap: usize,
    dilation: usize,
    padding: usize,
    t_in: usize,
    t_out: usize,
) -> Option<(usize, usize, usize)> {
    let shift = (tap * dilation) as isize - padding as isize;
    let o0 = (-shift).max(0) as usize;
    let o1 = (t_in as isize - shift).min(t_out as isize);
    if o1 <= o0 as isize {
        return None;
    }
    let len = o1 as usize - o0;
    Some((o0, (o0 as isize + shift) as usize, len))
}

fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

fn pad3(shape: &[usize]) -> [usize; 3] {
    let mut p = [1; 3];
    p[3 - shape.len()..].copy_from_slice(shape);
    p
}

/// Strides that map an index of `out` onto an operand of shape `shape` (0 on broadcast axes).
fn bcast_strides(shape: &[usize], out: &[usize]) -> [usize; 3] {
    let (s3, o3) = (pad3(shape), pad3(out));
    let dense = [s3[1] * s3[2], s3[2], 1];
    let mut st = [0; 3];
    for i in 0..3 {
        st[i] = if s3[i] == 1 && o3[i] != 1 { 0 } else { dense[i] };
    }
    st
}

fn binary_backward(
    kind: BinKind,
    a: &Tensor,
    b: &Tensor,
    out_shape: &[usize],
    g: &Tensor,
) -> (Tensor, Tensor) {
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    let o3 = pad3(out_shape);
    let sa = bcast_strides(a.shape(), out_shape);
    let sb = bcast_strides(b.shape(), out_shape);
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut flat = 0;
    for i in 0..o3[0] {
        for j in 0..o3[1] {
            for k in 0..o3[2] {
                let ia = i * sa[0] + j * sa[1] + k * sa[2];
                let ib = i * sb[0] + j * sb[1] + k * sb[2];
                let gi = gd[flat];
                let (x, y) = (ad[ia], bd[ib]);
                let (da, db) = match kind {
                    BinKind::Add => (gi, gi),
                    BinKind::Sub => (gi, -gi),
                    BinKind::Mul => (gi * y, gi * x),
                    BinKind::Div => (gi / y, -gi * x / (y * y)),
                };
                ga[ia] += da;
                gb[ib] += db;
                flat += 1;
            }
        }
    }
    (
        Tensor::new(a.shape().to_vec(), ga).expect("grad shape"),
        Tensor::new(b.shape().to_vec(), gb).expect("grad shape"),
    )
}
