//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] borrows a [`Params`] store, records every operation applied
//! during a forward pass, and [`Graph::backward`] replays the tape in reverse
//! to produce exact gradients for every named parameter. Parameter nodes do
//! not copy their tensors; they read them straight from the store.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::tensor::{
    check_norm_args, check_rate, check_slope, gemm_nt, gemm_tn, leaky, row_moments, sigmoid,
    Mode, Tensor, BCE_CLAMP,
};

/// Handle to a parameter inside a [`Params`] store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }
}

/// Gradients aligned one-to-one with a [`Params`] store.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(params: &Params) -> Self {
        Self {
            names: params.names.clone(),
            tensors: params
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// `self += other * scale`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y * scale;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Node handle on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    ScaleRows(Var, Vec<f64>),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Dropout(Var, Vec<f64>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv: Vec<f64>,
    },
    Bce(Var, Vec<f64>),
    Sum(Var),
}

struct Node {
    // `None` only for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
}

/// Recorded computation over a borrowed parameter store.
pub struct Graph<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p Params) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(128),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(pid)) => &self.params.tensors[*pid],
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id.0),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn param_named(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Broadcasts a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let out = self.value(a).add_row(self.value(bias))?;
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).reshape(rows, cols)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Row-major flatten into a single `1 x (rows*cols)` row.
    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        self.reshape(a, 1, n).expect("flatten preserves size")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_cols(&values)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Row lookup, the embedding primitive.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(indices)?;
        Ok(self.push(out, Op::Gather(table, indices.to_vec())))
    }

    /// Multiplies row `r` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let x = self.value(a);
        if factors.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: x.shape(),
                right: (factors.len(), 1),
            });
        }
        let mut out = x.clone();
        for (r, &f) in factors.iter().enumerate() {
            for v in out.row_mut(r) {
                *v *= f;
            }
        }
        Ok(self.push(out, Op::ScaleRows(a, factors.to_vec())))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        check_slope(slope)?;
        let out = self.value(a).map(|v| leaky(v, slope));
        Ok(self.push(out, Op::LeakyRelu(a, slope)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// Inverted dropout; the mask drawn here is reused by the backward pass.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        check_rate(rate)?;
        let (out, mask) = self.value(a).dropout(rate, mode, rng)?;
        match mask {
            Some(mask) => Ok(self.push(out, Op::Dropout(a, mask))),
            None => Ok(a),
        }
    }

    /// Row softmax; `mask` has one flag per entry, `true` = participates.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = self.value(a).softmax_rows(mask)?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        check_norm_args(xv, gv, bv, eps)?;
        let (rows, cols) = xv.shape();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv = vec![0.0; rows];
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let (mean, ir) = row_moments(xv.row(r), eps);
            inv[r] = ir;
            let out_row = out.row_mut(r);
            for c in 0..cols {
                let h = (xv.get(r, c) - mean) * ir;
                xhat[r * cols + c] = h;
                out_row[c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv,
            },
        ))
    }

    /// Mean clamped binary cross-entropy of an `m x 1` probability column.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let loss = crate::tensor::bce_loss(self.value(p), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::Bce(p, labels.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Gradients of a `1 x 1` node with respect to every parameter.
    /// Parameters that the computation never touches get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self.params);
        self.backward_into(loss, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Accumulates `scale * d(loss)/d(param)` into `out`.
    pub fn backward_into(&self, loss: Var, scale: f64, out: &mut Gradients) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if out.tensors.len() != self.params.len() {
            return Err(invalid("gradient buffer does not match the parameter store"));
        }
        let mut node_grads: Vec<Option<Tensor>> = Vec::new();
        node_grads.resize_with(loss.0 + 1, || None);
        node_grads[loss.0] = Some(Tensor::scalar(scale));

        for i in (0..=loss.0).rev() {
            let Some(dy) = node_grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    add_into(&mut out.tensors[*pid], &dy);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    gemm_nt(&dy, bv, self.slot(*a, &mut node_grads, out).data_mut());
                    gemm_tn(av, &dy, self.slot(*b, &mut node_grads, out).data_mut());
                }
                Op::Add(a, b) => {
                    add_into(self.slot(*a, &mut node_grads, out), &dy);
                    add_into(self.slot(*b, &mut node_grads, out), &dy);
                }
                Op::AddRow(a, bias) => {
                    add_into(self.slot(*a, &mut node_grads, out), &dy);
                    let g = self.slot(*bias, &mut node_grads, out);
                    for r in 0..dy.rows() {
                        for (x, d) in g.data_mut().iter_mut().zip(dy.row(r)) {
                            *x += d;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let g = self.slot(*a, &mut node_grads, out);
                    for (x, d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *x += d * s;
                    }
                }
                Op::Transpose(a) => {
                    add_into(self.slot(*a, &mut node_grads, out), &dy.transpose());
                }
                Op::Reshape(a) => {
                    let g = self.slot(*a, &mut node_grads, out);
                    for (x, d) in g.data_mut().iter_mut().zip(dy.data()) {
                        *x += d;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        let g = self.slot(*p, &mut node_grads, out);
                        for r in 0..dy.rows() {
                            for (x, d) in g.row_mut(r).iter_mut().zip(&dy.row(r)[offset..offset + w]) {
                                *x += d;
                            }
                        }
                        offset += w;
                    }
                }
                Op::Gather(table, indices) => {
                    let g = self.slot(*table, &mut node_grads, out);
                    for (r, &idx) in indices.iter().enumerate() {
                        for (x, d) in g.row_mut(idx).iter_mut().zip(dy.row(r)) {
                            *x += d;
                        }
                    }
                }
                Op::ScaleRows(a, factors) => {
                    let g = self.slot(*a, &mut node_grads, out);
                    for (r, f) in factors.iter().enumerate() {
                        for (x, d) in g.row_mut(r).iter_mut().zip(dy.row(r)) {
                            *x += d * f;
                        }
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    let xv = self.value(*a);
                    let local: Vec<f64> = xv
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&x, &d)| if x >= 0.0 { d } else { d * slope })
                        .collect();
                    accumulate(self.slot(*a, &mut node_grads, out), &local);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("sigmoid value");
                    let local: Vec<f64> = y
                        .data()
                        .iter()
                        .zip(dy.data())
                        .map(|(&y, &d)| d * y * (1.0 - y))
                        .collect();
                    accumulate(self.slot(*a, &mut node_grads, out), &local);
                }
                Op::Dropout(a, mask) => {
                    let local: Vec<f64> = dy.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                    accumulate(self.slot(*a, &mut node_grads, out), &local);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let mut local = vec![0.0; y.len()];
                    for r in 0..y.rows() {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for c in 0..y.cols() {
                            local[r * y.cols() + c] = yr[c] * (dr[c] - dot);
                        }
                    }
                    accumulate(self.slot(*a, &mut node_grads, out), &local);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv,
                } => {
                    let gv = self.value(*gain);
                    let (rows, cols) = dy.shape();
                    let n = cols as f64;
                    let mut dx = vec![0.0; rows * cols];
                    let mut dgain = vec![0.0; cols];
                    let mut dbias = vec![0.0; cols];
                    for r in 0..rows {
                        let dr = dy.row(r);
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..cols {
                            dgain[c] += dr[c] * hr[c];
                            dbias[c] += dr[c];
                            let dh = dr[c] * gv.data()[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[c];
                        }
                        for c in 0..cols {
                            let dh = dr[c] * gv.data()[c];
                            dx[r * cols + c] = inv[r] / n * (n * dh - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    accumulate(self.slot(*x, &mut node_grads, out), &dx);
                    accumulate(self.slot(*gain, &mut node_grads, out), &dgain);
                    accumulate(self.slot(*bias, &mut node_grads, out), &dbias);
                }
                Op::Bce(p, labels) => {
                    let pv = self.value(*p);
                    let d = dy.data()[0] / labels.len() as f64;
                    let local: Vec<f64> = pv
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&p, &y)| {
                            if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                                0.0
                            } else {
                                d * (-y / p + (1.0 - y) / (1.0 - p))
                            }
                        })
                        .collect();
                    accumulate(self.slot(*p, &mut node_grads, out), &local);
                }
                Op::Sum(a) => {
                    let d = dy.data()[0];
                    let g = self.slot(*a, &mut node_grads, out);
                    for x in g.data_mut() {
                        *x += d;
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulator for `v`: the parameter buffer for parameter
    /// nodes, otherwise a lazily zeroed per-node tensor.
    fn slot<'a>(
        &self,
        v: Var,
        node_grads: &'a mut [Option<Tensor>],
        out: &'a mut Gradients,
    ) -> &'a mut Tensor {
        if let Op::Param(pid) = self.nodes[v.0].op {
            return &mut out.tensors[pid];
        }
        let (rows, cols) = self.value(v).shape();
        node_grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    accumulate(dst, src.data());
}

fn accumulate(dst: &mut Tensor, src: &[f64]) {
    for (x, d) in dst.data_mut().iter_mut().zip(src) {
        *x += d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sum_of_free_tensor_has_unit_gradient() {
        let mut params = Params::new();
        params
            .insert("x", Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap())
            .unwrap();
        let mut g = Graph::new(&params);
        let x = g.param_named("x").unwrap();
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get("x").unwrap(), &Tensor::filled(2, 2, 1.0));
    }

    #[test]
    fn sum_of_linear_map_gives_transpose_times_ones() {
        let a = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let mut params = Params::new();
        params.insert("x", Tensor::from_rows(&[[0.1], [0.2], [0.3]]).unwrap()).unwrap();
        params.insert("unused", Tensor::filled(2, 2, 7.0)).unwrap();
        let mut g = Graph::new(&params);
        let av = g.input(a.clone());
        let x = g.param_named("x").unwrap();
        let y = g.matmul(av, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        // A^T * 1 = column sums of A
        let expect = a.transpose().matmul(&Tensor::filled(2, 1, 1.0)).unwrap();
        assert_eq!(grads.get("x").unwrap(), &expect);
        assert_eq!(grads.get("x").unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(grads.get("unused").unwrap(), &Tensor::zeros(2, 2));
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut params = Params::new();
        params.insert("w", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new(&params);
        let w = g.param_named("w").unwrap();
        let w2 = g.param_named("w").unwrap();
        assert_eq!(w, w2);
        let sq = g.matmul(w, w2).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_abs_diff_eq!(grads.get("w").unwrap().get(0, 0), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut params = Params::new();
        params.insert("w", Tensor::zeros(2, 2)).unwrap();
        let mut g = Graph::new(&params);
        let w = g.param_named("w").unwrap();
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn duplicate_parameter_name_rejected() {
        let mut params = Params::new();
        params.insert("w", Tensor::zeros(1, 1)).unwrap();
        assert!(params.insert("w", Tensor::zeros(1, 1)).is_err());
        assert!(matches!(params.id("nope"), Err(Error::UnknownParameter(_))));
    }
}
