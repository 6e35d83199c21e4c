//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every batch. Each node owns its forward value and,
//! when any of its inputs needs a gradient, a [`Backward`] rule. Nodes are
//! appended in evaluation order, so reverse creation order is a valid
//! topological order for the backward sweep.

use super::tensor::{gemm, MatRef};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of one recorded operation.
pub trait Backward {
    /// Returns one gradient per input; entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        grad_out: &Tensor,
        out: &Tensor,
        inputs: &[&Tensor],
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    op: Option<Box<dyn Backward>>,
    param: Option<ParamId>,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    track: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph that records backward rules for parameter-dependent values.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            track: true,
        }
    }

    /// Forward-only graph: nothing requires a gradient.
    pub fn inference() -> Self {
        Self {
            track: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Node {
            value,
            inputs: Vec::new(),
            op: None,
            param: None,
            requires_grad: false,
        })
    }

    /// Leaf bound to a stored parameter; its gradient flows back through
    /// [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let track = self.track;
        self.push(Node {
            value: store.get(id).value.clone(),
            inputs: Vec::new(),
            op: None,
            param: Some(id),
            requires_grad: track,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn any_requires_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.requires_grad(*v))
    }

    /// Records a custom operation whose forward value has already been computed.
    pub fn apply(&mut self, inputs: &[Var], out: Tensor, op: Box<dyn Backward>) -> Var {
        let requires_grad = self.any_requires_grad(inputs);
        self.push(Node {
            value: out,
            inputs: inputs.to_vec(),
            op: requires_grad.then_some(op),
            param: None,
            requires_grad,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.apply(&[a, b], out, Box::new(MatMul)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.apply(&[a, b], out, Box::new(Add)))
    }

    /// Adds a bias vector of width C to every row of an R×C matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let cols = xv.cols();
        if bv.len() != cols {
            return Err(Error::Shape(format!(
                "bias of {} values for rows of width {}",
                bv.len(),
                cols
            )));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        Ok(self.apply(&[x, bias], out, Box::new(AddBias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.apply(&[a, b], out, Box::new(Mul)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.apply(&[x], out, Box::new(Scale(factor)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.apply(&[x], out, Box::new(Sigmoid))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.apply(&[x], out, Box::new(Tanh))
    }

    pub fn concat_lastdim(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Shape(format!(
                "concat rows {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (rows, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::new(vec![rows, ca + cb], data)?;
        Ok(self.apply(&[a, b], out, Box::new(Concat { left: ca, right: cb })))
    }

    /// Inverted dropout with a precomputed 0/1 mask: survivors are scaled by `1/keep`.
    pub fn dropout_apply(&mut self, x: Var, mask: &Tensor, keep: f64) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Validation(format!("keep probability {keep} outside (0, 1]")));
        }
        let scaled = mask.map(|m| m / keep);
        let out = self.value(x).zip_map(&scaled, |v, s| v * s)?;
        Ok(self.apply(&[x], out, Box::new(Dropout { scaled })))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let out = log_softmax_rows(self.value(x));
        self.apply(&[x], out, Box::new(LogSoftmax))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.apply(&[x], out, Box::new(Sum))
    }

    /// Backward sweep from a scalar root seeded with 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let seed = Tensor::full(self.value(root).shape(), 1.0);
        self.backward_from(&[(root, seed)])
    }

    /// Backward sweep from several seeded nodes at once; seeds on the same node add.
    pub fn backward_from(&mut self, seeds: &[(Var, Tensor)]) -> Result<()> {
        self.grads = vec![None; self.nodes.len()];
        let mut start = 0;
        for (v, g) in seeds {
            self.value(*v).same_shape(g)?;
            accumulate(&mut self.grads[v.0], g.clone())?;
            start = start.max(v.0);
        }
        for idx in (0..=start).rev() {
            let Some(grad_out) = self.grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Some(op) = &node.op {
                let inputs: Vec<&Tensor> = node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let in_grads = op.backward(&grad_out, &node.value, &inputs, &needs)?;
                let input_ids = node.inputs.clone();
                for ((v, g), need) in input_ids.iter().zip(in_grads).zip(needs) {
                    if let (Some(g), true) = (g, need) {
                        accumulate(&mut self.grads[v.0], g)?;
                    }
                }
            }
            self.grads[idx] = Some(grad_out);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds every parameter leaf's gradient into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) -> Result<()> {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                store.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax with max shift.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    out
}

struct MatMul;

impl Backward for MatMul {
    fn backward(&self, g: &Tensor, _out: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let da = needs[0].then(|| {
            let mut da = Tensor::zeros(a.shape());
            gemm(m, n, k, 1.0, MatRef::new(g.data(), n, false), MatRef::new(b.data(), n, true), 0.0, da.data_mut());
            da
        });
        let db = needs[1].then(|| {
            let mut db = Tensor::zeros(b.shape());
            gemm(k, m, n, 1.0, MatRef::new(a.data(), k, true), MatRef::new(g.data(), n, false), 0.0, db.data_mut());
            db
        });
        Ok(vec![da, db])
    }
}

struct Add;

impl Backward for Add {
    fn backward(&self, g: &Tensor, _out: &Tensor, _inputs: &[&Tensor], needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())])
    }
}

struct AddBias;

impl Backward for AddBias {
    fn backward(&self, g: &Tensor, _out: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let db = needs[1].then(|| {
            let mut db = Tensor::zeros(inputs[1].shape());
            for r in 0..g.rows() {
                for (d, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                    *d += v;
                }
            }
            db
        });
        Ok(vec![needs[0].then(|| g.clone()), db])
    }
}

struct Mul;

impl Backward for Mul {
    fn backward(&self, g: &Tensor, _out: &Tensor, inputs: &[&Tensor], needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let da = if needs[0] { Some(g.zip_map(inputs[1], |g, b| g * b)?) } else { None };
        let db = if needs[1] { Some(g.zip_map(inputs[0], |g, a| g * a)?) } else { None };
        Ok(vec![da, db])
    }
}

struct Scale(f64);

impl Backward for Scale {
    fn backward(&self, g: &Tensor, _out: &Tensor, _inputs: &[&Tensor], _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.map(|v| v * self.0))])
    }
}

struct Sigmoid;

impl Backward for Sigmoid {
    fn backward(&self, g: &Tensor, out: &Tensor, _inputs: &[&Tensor], _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.zip_map(out, |g, s| g * s * (1.0 - s))?)])
    }
}

struct Tanh;

impl Backward for Tanh {
    fn backward(&self, g: &Tensor, out: &Tensor, _inputs: &[&Tensor], _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.zip_map(out, |g, t| g * (1.0 - t * t))?)])
    }
}

struct Concat {
    left: usize,
    right: usize,
}

impl Backward for Concat {
    fn backward(&self, g: &Tensor, _out: &Tensor, _inputs: &[&Tensor], needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let rows = g.rows();
        let mut a = Vec::with_capacity(rows * self.left);
        let mut b = Vec::with_capacity(rows * self.right);
        for r in 0..rows {
            let row = g.row(r);
            a.extend_from_slice(&row[..self.left]);
            b.extend_from_slice(&row[self.left..]);
        }
        let da = Tensor::new(vec![rows, self.left], a)?;
        let db = Tensor::new(vec![rows, self.right], b)?;
        Ok(vec![needs[0].then_some(da), needs[1].then_some(db)])
    }
}

struct Dropout {
    scaled: Tensor,
}

impl Backward for Dropout {
    fn backward(&self, g: &Tensor, _out: &Tensor, _inputs: &[&Tensor], _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.zip_map(&self.scaled, |g, s| g * s)?)])
    }
}

struct LogSoftmax;

impl Backward for LogSoftmax {
    fn backward(&self, g: &Tensor, out: &Tensor, _inputs: &[&Tensor], _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut dx = g.clone();
        for r in 0..dx.rows() {
            let gsum: f64 = g.row(r).iter().sum();
            for (d, &y) in dx.row_mut(r).iter_mut().zip(out.row(r)) {
                *d -= y.exp() * gsum;
            }
        }
        Ok(vec![Some(dx)])
    }
}

struct Sum;

impl Backward for Sum {
    fn backward(&self, g: &Tensor, _out: &Tensor, inputs: &[&Tensor], _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(Tensor::full(inputs[0].shape(), g.data()[0]))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Parameter;

    #[test]
    fn sigmoid_at_zero() {
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn log_softmax_symmetric_row() {
        let t = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let out = log_softmax_rows(&t);
        assert_eq!(out.data(), &[0.5f64.ln(), 0.5f64.ln()]);
    }

    #[test]
    fn log_softmax_large_logits_do_not_overflow() {
        let t = Tensor::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let out = log_softmax_rows(&t);
        assert!(out.data()[0].abs() < 1e-300);
        assert!((out.data()[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn dropout_all_ones_mask_rescales() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![0.9, -1.8]]).unwrap());
        let mask = Tensor::full(&[1, 2], 1.0);
        let y = g.dropout_apply(x, &mask, 0.9).unwrap();
        assert_eq!(g.value(y).data(), &[0.9 / 0.9, -1.8 / 0.9]);
    }

    #[test]
    fn shared_parameter_sums_contributions() {
        let mut store = ParamStore::new();
        let id = store
            .insert(Parameter::new("p", Tensor::from_rows(&[vec![1.5, -2.0]]).unwrap()))
            .unwrap();

        let run = |store: &mut ParamStore, first: bool, second: bool| {
            store.zero_grads();
            let mut g = Graph::new();
            let p = g.param(store, id);
            let mut terms = Vec::new();
            if first {
                let sq = g.mul(p, p).unwrap();
                terms.push(g.sum(sq));
            }
            if second {
                let t = g.tanh(p);
                terms.push(g.sum(t));
            }
            let mut total = terms[0];
            for t in &terms[1..] {
                total = g.add(total, *t).unwrap();
            }
            g.backward(total).unwrap();
            g.accumulate_param_grads(store).unwrap();
            store.get(id).grad.clone()
        };
        let both = run(&mut store, true, true);
        let a = run(&mut store, true, false);
        let b = run(&mut store, false, true);
        for i in 0..2 {
            assert!((both.data()[i] - (a.data()[i] + b.data()[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn inference_graph_records_no_grads() {
        let mut store = ParamStore::new();
        let id = store.insert(Parameter::new("p", Tensor::full(&[1, 1], 2.0))).unwrap();
        let mut g = Graph::inference();
        let p = g.param(&store, id);
        let s = g.sigmoid(p);
        assert!(!g.requires_grad(s));
    }
}
