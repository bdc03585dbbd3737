//! Define-by-run recording of tensor operations.
//!
//! Every operation appends a node whose inputs are earlier nodes, so the
//! node list is already in topological order and the backward sweep is a
//! single reverse pass over it.

use super::ops::{axis_layout, fast_exp, fast_sigmoid, fast_tanh, gemm};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Tanh,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Unary(Var, UnaryOp),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    StopGrad,
    Sum(Var),
    LogSoftmax(Var),
    PickCols(Var, Vec<usize>),
    Clamp(Var, f64, f64),
    Minimum(Var, Var),
    GatherRows(Var, Vec<usize>),
    MaskRows(Var, Vec<bool>),
    Binarize { src: Var, straight_through: bool },
    LstmCell(Box<LstmSaved>),
}

/// Inputs and activations a fused LSTM cell keeps for its backward rule.
#[derive(Debug)]
struct LstmSaved {
    x: Var,
    h: Var,
    c: Var,
    w_input: Var,
    w_recurrent: Var,
    bias: Var,
    /// Post-activation gates (i, f, g, o), `B × 4H`.
    gates: Tensor,
    /// tanh of the outgoing cell state, `B × H`.
    tanh_c: Tensor,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`; leaves the loss does not depend on get exact zeros.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [m, n] => (*m, *n),
        _ => (
            shape[..shape.len() - 1].iter().product(),
            shape[shape.len() - 1],
        ),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0];
        if !ok {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::dim("add_bias", sx, sb));
        }
        let n = sx[1];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (o, bj) in row.iter_mut().zip(&b) {
                *o += bj;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(name, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("minimum", a, b, f64::min)?;
        Ok(self.push(t, Op::Minimum(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Result<Var> {
        let src = self.value(x);
        if op == UnaryOp::Log {
            if let Some(&bad) = src.data().iter().find(|&&v| !(v > 0.0)) {
                return Err(Error::NumericDomain {
                    op: "log",
                    value: bad,
                });
            }
        }
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Tanh => fast_tanh,
            UnaryOp::Sigmoid => fast_sigmoid,
            UnaryOp::Exp => fast_exp,
            UnaryOp::Log => f64::ln,
        };
        let data = src.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Unary(x, op)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
            .expect("tanh has no domain error")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
            .expect("sigmoid has no domain error")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
            .expect("exp has no domain error")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, x)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for shape {base:?}"
            )));
        }
        let mut axis_total = 0;
        for p in parts {
            let s = self.shape(*p);
            let agree = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !agree {
                return Err(Error::dim("concat", &base, s));
            }
            axis_total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_layout(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Splits `x` along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::dim("split", &shape, sizes));
        }
        let (outer, len, inner) = axis_layout(&shape, axis);
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &size in sizes {
            let mut piece_shape = shape.clone();
            piece_shape[axis] = size;
            let mut data = Vec::with_capacity(outer * size * inner);
            let src = self.value(x).data();
            for o in 0..outer {
                let base = (o * len + start) * inner;
                data.extend_from_slice(&src[base..base + size * inner]);
            }
            let t = Tensor::new(piece_shape, data)?;
            out.push(self.push(
                t,
                Op::Slice {
                    src: x,
                    axis,
                    start,
                },
            ));
            start += size;
        }
        Ok(out)
    }

    /// Identity in the forward pass, blocks the gradient in the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.push(t, Op::StopGrad)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-wise log-softmax of a matrix.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (_, n) = t.as_matrix()?;
        let mut out = t.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(self.push(out, Op::LogSoftmax(x)))
    }

    /// Picks column `cols[i]` of row `i`, producing a vector.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = t.as_matrix()?;
        if cols.len() != m {
            return Err(Error::dim("pick_cols", t.shape(), &[cols.len()]));
        }
        if let Some(&c) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Contract(format!(
                "pick_cols: column {c} out of range for width {n}"
            )));
        }
        let data = cols
            .iter()
            .enumerate()
            .map(|(i, &c)| t.data()[i * n + c])
            .collect();
        Ok(self.push(Tensor::vector(data), Op::PickCols(x, cols.to_vec())))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let mut t = self.value(x).clone();
        t.data_mut().iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        self.push(t, Op::Clamp(x, lo, hi))
    }

    /// Output row `i` is input row `rows[i]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = rows_cols(t.shape());
        if t.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows expects a matrix, got {:?}",
                t.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Contract(format!(
                    "gather_rows: row {r} out of range for {m} rows"
                )));
            }
            data.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
        }
        let out = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(out, Op::GatherRows(x, rows.to_vec())))
    }

    /// Replaces every row whose `keep` flag is false by exact zeros.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = rows_cols(t.shape());
        if keep.len() != m {
            return Err(Error::dim("mask_rows", t.shape(), &[keep.len()]));
        }
        let mut out = t.clone();
        for (row, &k) in out.data_mut().chunks_exact_mut(n).zip(keep) {
            if !k {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(self.push(out, Op::MaskRows(x, keep.to_vec())))
    }

    /// Stochastic sign: entry `x` becomes `+1` when its uniform draw `u`
    /// satisfies `u < (1 + x) / 2`, else `-1`, so `E[b(x)] = x`.
    ///
    /// The backward rule is either zero (`straight_through = false`) or the
    /// identity.
    pub fn binarize(&mut self, x: Var, uniforms: &[f64], straight_through: bool) -> Result<Var> {
        let t = self.value(x);
        if uniforms.len() != t.numel() {
            return Err(Error::dim("binarize", t.shape(), &[uniforms.len()]));
        }
        let mut out = t.clone();
        for (v, &u) in out.data_mut().iter_mut().zip(uniforms) {
            *v = crate::disturbance::binarize_with_uniform(*v, u)?;
        }
        Ok(self.push(
            out,
            Op::Binarize {
                src: x,
                straight_through,
            },
        ))
    }

    /// Fused LSTM cell. Returns a `B × 2H` node holding `[h_out | c_out]`.
    ///
    /// Shapes must already be checked by the caller: `x` is `B × D`, `h` and
    /// `c` are `B × H`, `w_input` is `D × 4H`, `w_recurrent` is `H × 4H` and
    /// `bias` has `4H` entries.
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w_input: Var,
        w_recurrent: Var,
        bias: Var,
    ) -> Result<Var> {
        let (rows, d) = rows_cols(self.shape(x));
        let hidden = self.shape(w_recurrent)[0];
        let g4 = 4 * hidden;
        let shapes_ok = self.shape(x).len() == 2
            && self.shape(w_input) == [d, g4]
            && self.shape(w_recurrent) == [hidden, g4]
            && self.shape(bias) == [g4]
            && self.shape(h) == [rows, hidden]
            && self.shape(c) == [rows, hidden];
        if !shapes_ok {
            return Err(Error::dim("lstm_cell", self.shape(x), self.shape(h)));
        }
        let mut gates = vec![0.0; rows * g4];
        gemm(
            rows,
            d,
            g4,
            self.value(x).data(),
            false,
            self.value(w_input).data(),
            false,
            &mut gates,
            false,
        );
        gemm(
            rows,
            hidden,
            g4,
            self.value(h).data(),
            false,
            self.value(w_recurrent).data(),
            false,
            &mut gates,
            true,
        );
        let b = self.value(bias).data();
        let c_in = self.value(c).data();
        let mut out = vec![0.0; rows * 2 * hidden];
        let mut tanh_c = vec![0.0; rows * hidden];
        for r in 0..rows {
            let gr = &mut gates[r * g4..(r + 1) * g4];
            for (v, bj) in gr.iter_mut().zip(b) {
                *v += bj;
            }
            let (ifg, o) = gr.split_at_mut(3 * hidden);
            let (i_f, g) = ifg.split_at_mut(2 * hidden);
            i_f.iter_mut().for_each(|v| *v = fast_sigmoid(*v));
            g.iter_mut().for_each(|v| *v = fast_tanh(*v));
            o.iter_mut().for_each(|v| *v = fast_sigmoid(*v));
            let (i, f) = i_f.split_at(hidden);
            let cr = &c_in[r * hidden..(r + 1) * hidden];
            let (h_out, c_out) = out[r * 2 * hidden..(r + 1) * 2 * hidden].split_at_mut(hidden);
            let tc = &mut tanh_c[r * hidden..(r + 1) * hidden];
            for k in 0..hidden {
                let cn = f[k] * cr[k] + i[k] * g[k];
                c_out[k] = cn;
                tc[k] = fast_tanh(cn);
                h_out[k] = o[k] * tc[k];
            }
        }
        let saved = LstmSaved {
            x,
            h,
            c,
            w_input,
            w_recurrent,
            bias,
            gates: Tensor::new(vec![rows, g4], gates)?,
            tanh_c: Tensor::new(vec![rows, hidden], tanh_c)?,
        };
        let value = Tensor::new(vec![rows, 2 * hidden], out)?;
        Ok(self.push(value, Op::LstmCell(Box::new(saved))))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let count = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..count).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for id in (0..count).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }

        let shapes = self.nodes[..count]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            Op::MatMul(a, b) => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let ga = slot(grads, *a, ta.shape());
                gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    false,
                    tb.data(),
                    true,
                    ga.data_mut(),
                    true,
                );
                let gb = slot(grads, *b, tb.shape());
                gemm(
                    k,
                    m,
                    n,
                    ta.data(),
                    true,
                    g.data(),
                    false,
                    gb.data_mut(),
                    true,
                );
            }
            Op::AddBias(x, bias) => {
                accumulate(grads, *x, g)?;
                let n = self.shape(*bias)[0];
                let gb = slot(grads, *bias, &[n]);
                for row in g.data().chunks_exact(n) {
                    for (acc, v) in gb.data_mut().iter_mut().zip(row) {
                        *acc += v;
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g)?;
                accumulate(grads, *b, g)?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g)?;
                slot(grads, *b, g.shape()).axpy(-1.0, g)?;
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = slot(grads, *a, g.shape());
                for ((acc, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(vb) {
                    *acc += gi * bi;
                }
                let gb = slot(grads, *b, g.shape());
                for ((acc, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(va) {
                    *acc += gi * ai;
                }
            }
            Op::Minimum(a, b) => {
                // ties route the gradient to the first operand
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let ga = slot(grads, *a, g.shape());
                for (i, acc) in ga.data_mut().iter_mut().enumerate() {
                    if va[i] <= vb[i] {
                        *acc += g.data()[i];
                    }
                }
                let gb = slot(grads, *b, g.shape());
                for (i, acc) in gb.data_mut().iter_mut().enumerate() {
                    if va[i] > vb[i] {
                        *acc += g.data()[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                slot(grads, *x, g.shape()).axpy(*c, g)?;
            }
            Op::Unary(x, op) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.shape());
                let it = gx.data_mut().iter_mut().zip(g.data()).zip(y.data()).zip(xv);
                match op {
                    UnaryOp::Tanh => {
                        it.for_each(|(((acc, gi), yi), _)| *acc += gi * (1.0 - yi * yi))
                    }
                    UnaryOp::Sigmoid => {
                        it.for_each(|(((acc, gi), yi), _)| *acc += gi * yi * (1.0 - yi))
                    }
                    UnaryOp::Exp => it.for_each(|(((acc, gi), yi), _)| *acc += gi * yi),
                    UnaryOp::Log => it.for_each(|(((acc, gi), _), xi)| *acc += gi / xi),
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_layout(y.shape(), *axis);
                let mut offset = 0;
                let total = y.shape()[*axis] * inner;
                for p in parts {
                    let shape = self.shape(*p).to_vec();
                    let chunk = shape[*axis] * inner;
                    let gp = slot(grads, *p, &shape);
                    for o in 0..outer {
                        let src = &g.data()[o * total + offset..o * total + offset + chunk];
                        for (acc, v) in gp.data_mut()[o * chunk..(o + 1) * chunk]
                            .iter_mut()
                            .zip(src)
                        {
                            *acc += v;
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { src, axis, start } => {
                let shape = self.shape(*src).to_vec();
                let (outer, len, inner) = axis_layout(&shape, *axis);
                let size = y.shape()[*axis];
                let gs = slot(grads, *src, &shape);
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    let piece = &g.data()[o * size * inner..(o + 1) * size * inner];
                    for (acc, v) in gs.data_mut()[base..base + size * inner]
                        .iter_mut()
                        .zip(piece)
                    {
                        *acc += v;
                    }
                }
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                let shape = self.shape(*x).to_vec();
                slot(grads, *x, &shape)
                    .data_mut()
                    .iter_mut()
                    .for_each(|acc| *acc += gv);
            }
            Op::LogSoftmax(x) => {
                let shape = self.shape(*x).to_vec();
                let n = *shape.last().unwrap_or(&1);
                let gx = slot(grads, *x, &shape);
                for ((acc, gr), yr) in gx
                    .data_mut()
                    .chunks_exact_mut(n)
                    .zip(g.data().chunks_exact(n))
                    .zip(y.data().chunks_exact(n))
                {
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        acc[j] += gr[j] - yr[j].exp() * gsum;
                    }
                }
            }
            Op::PickCols(x, cols) => {
                let shape = self.shape(*x).to_vec();
                let n = *shape.last().unwrap_or(&1);
                let gx = slot(grads, *x, &shape);
                for (i, &c) in cols.iter().enumerate() {
                    gx.data_mut()[i * n + c] += g.data()[i];
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, g.shape());
                for ((acc, gi), xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv) {
                    if *xi >= *lo && *xi <= *hi {
                        *acc += gi;
                    }
                }
            }
            Op::GatherRows(x, rows) => {
                let shape = self.shape(*x).to_vec();
                let n = shape[1];
                let gx = slot(grads, *x, &shape);
                for (i, &r) in rows.iter().enumerate() {
                    let src = &g.data()[i * n..(i + 1) * n];
                    for (acc, v) in gx.data_mut()[r * n..(r + 1) * n].iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            Op::MaskRows(x, keep) => {
                let shape = self.shape(*x).to_vec();
                let n = rows_cols(&shape).1;
                let gx = slot(grads, *x, &shape);
                for ((acc, gr), &k) in gx
                    .data_mut()
                    .chunks_exact_mut(n)
                    .zip(g.data().chunks_exact(n))
                    .zip(keep)
                {
                    if k {
                        acc.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                    }
                }
            }
            Op::Binarize {
                src,
                straight_through,
            } => {
                if *straight_through {
                    accumulate(grads, *src, g)?;
                }
            }
            Op::LstmCell(saved) => self.backprop_lstm(saved, g, grads),
        }
        Ok(())
    }

    fn backprop_lstm(&self, s: &LstmSaved, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (rows, hidden) = (s.tanh_c.shape()[0], s.tanh_c.shape()[1]);
        let g4 = 4 * hidden;
        let c_in = self.value(s.c).data();
        let mut dpre = vec![0.0; rows * g4];
        let mut dc_in = vec![0.0; rows * hidden];
        for r in 0..rows {
            let acts = &s.gates.data()[r * g4..(r + 1) * g4];
            let (i, rest) = acts.split_at(hidden);
            let (f, rest) = rest.split_at(hidden);
            let (gg, o) = rest.split_at(hidden);
            let tc = &s.tanh_c.data()[r * hidden..(r + 1) * hidden];
            let (dh, dc_out) = g.data()[r * 2 * hidden..(r + 1) * 2 * hidden].split_at(hidden);
            let cr = &c_in[r * hidden..(r + 1) * hidden];
            let dp = &mut dpre[r * g4..(r + 1) * g4];
            let dci = &mut dc_in[r * hidden..(r + 1) * hidden];
            for k in 0..hidden {
                let dc = dc_out[k] + dh[k] * o[k] * (1.0 - tc[k] * tc[k]);
                dp[k] = dc * gg[k] * i[k] * (1.0 - i[k]);
                dp[hidden + k] = dc * cr[k] * f[k] * (1.0 - f[k]);
                dp[2 * hidden + k] = dc * i[k] * (1.0 - gg[k] * gg[k]);
                dp[3 * hidden + k] = dh[k] * tc[k] * o[k] * (1.0 - o[k]);
                dci[k] = dc * f[k];
            }
        }
        let d = self.shape(s.x)[1];
        let (xv, hv) = (self.value(s.x).data(), self.value(s.h).data());
        let gx = slot(grads, s.x, &[rows, d]);
        gemm(
            rows,
            g4,
            d,
            &dpre,
            false,
            self.value(s.w_input).data(),
            true,
            gx.data_mut(),
            true,
        );
        let gw = slot(grads, s.w_input, &[d, g4]);
        gemm(d, rows, g4, xv, true, &dpre, false, gw.data_mut(), true);
        let gh = slot(grads, s.h, &[rows, hidden]);
        gemm(
            rows,
            g4,
            hidden,
            &dpre,
            false,
            self.value(s.w_recurrent).data(),
            true,
            gh.data_mut(),
            true,
        );
        let gu = slot(grads, s.w_recurrent, &[hidden, g4]);
        gemm(
            hidden,
            rows,
            g4,
            hv,
            true,
            &dpre,
            false,
            gu.data_mut(),
            true,
        );
        let gb = slot(grads, s.bias, &[g4]);
        for row in dpre.chunks_exact(g4) {
            gb.data_mut().iter_mut().zip(row).for_each(|(a, v)| *a += v);
        }
        let gc = slot(grads, s.c, &[rows, hidden]);
        gc.data_mut()
            .iter_mut()
            .zip(&dc_in)
            .for_each(|(a, v)| *a += v);
    }
}

fn slot<'a>(grads: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, g),
        empty @ None => {
            *empty = Some(g.clone());
            Ok(())
        }
    }
}
