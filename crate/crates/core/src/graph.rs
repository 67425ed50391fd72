//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`CompGraph`] is an append-only tape. Every node caches its forward
//! value; [`CompGraph::backward`] walks the tape once in reverse and returns
//! the gradient of a scalar node with respect to every node that feeds it.
//! The op set is exactly what concrete and interval propagation through
//! affine/ReLU networks requires.

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `W · x`
    MatVec(NodeId, NodeId),
    /// `|W| · x`
    AbsMatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// Row `i` becomes `W[i] - W[pivot]`.
    RowDiff(NodeId, usize),
    /// Entry `i` becomes `v[i] - v[pivot]`.
    ElemDiff(NodeId, usize),
    LogSumExp(NodeId),
    /// Sum of all elements of one tensor.
    SumElems(NodeId),
    /// Sum of scalar nodes.
    SumScalars(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct CompGraph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Gradients of one scalar with respect to every node on its tape prefix.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<NodeId>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`, zero-filled when the node does not reach the loss.
    pub fn get_or_zero(&self, id: NodeId, graph: &CompGraph) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.value(id).shape()))
    }

    /// Gradients of the registered parameters, in registration order.
    pub fn params(&self, graph: &CompGraph) -> Vec<Tensor> {
        self.params
            .iter()
            .map(|&id| self.get_or_zero(id, graph))
            .collect()
    }
}

impl CompGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn param_ids(&self) -> &[NodeId] {
        &self.params
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that is not a parameter (an input or a constant). Gradients
    /// still flow to it, which is how attacks obtain input gradients.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Leaf, value);
        self.params.push(id);
        id
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let v = self.value(w).matvec(self.value(x).data())?;
        Ok(self.push(Op::MatVec(w, x), v))
    }

    pub fn abs_matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let v = self.value(w).abs_matvec(self.value(x).data())?;
        Ok(self.push(Op::AbsMatVec(w, x), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(Op::Scale(a, s), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn row_diff(&mut self, w: NodeId, pivot: usize) -> Result<NodeId> {
        let src = self.value(w);
        let (rows, cols) = src.dims2()?;
        if pivot >= rows {
            return Err(Error::dim(format!("row_diff pivot {pivot} >= {rows} rows")));
        }
        let base = src.row(pivot).to_vec();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(src.row(r).iter().zip(&base).map(|(a, b)| a - b));
        }
        let v = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::RowDiff(w, pivot), v))
    }

    pub fn elem_diff(&mut self, a: NodeId, pivot: usize) -> Result<NodeId> {
        let src = self.value(a);
        if pivot >= src.len() {
            return Err(Error::dim(format!(
                "elem_diff pivot {pivot} >= length {}",
                src.len()
            )));
        }
        let base = src.data()[pivot];
        let v = src.map(|x| x - base);
        Ok(self.push(Op::ElemDiff(a, pivot), v))
    }

    pub fn log_sum_exp(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(log_sum_exp(self.value(a).data()));
        self.push(Op::LogSumExp(a), v)
    }

    pub fn sum_elems(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumElems(a), v)
    }

    pub fn sum_scalars(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let mut total = 0.0;
        for &id in items {
            total += self.value(id).item()?;
        }
        Ok(self.push(Op::SumScalars(items.to_vec()), Tensor::scalar(total)))
    }

    /// Reverse sweep from a scalar `loss`; each node is visited once.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let seed = self.value(loss);
        if !seed.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                seed.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(seed.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatVec(w, x) | Op::AbsMatVec(w, x) => {
                let abs = matches!(self.nodes[idx].op, Op::AbsMatVec(..));
                let wv = self.value(*w);
                let xv = self.value(*x).data();
                let (rows, cols) = wv.dims2().expect("matvec weight is a matrix");
                let wd = wv.data();

                let mut dw = vec![0.0; rows * cols];
                let mut dx = vec![0.0; cols];
                for r in 0..rows {
                    let gr = gd[r];
                    for c in 0..cols {
                        let wrc = wd[r * cols + c];
                        if abs {
                            dw[r * cols + c] = sign(wrc) * gr * xv[c];
                            dx[c] += wrc.abs() * gr;
                        } else {
                            dw[r * cols + c] = gr * xv[c];
                            dx[c] += wrc * gr;
                        }
                    }
                }
                accumulate(grads, *w, wv.shape(), dw);
                accumulate(grads, *x, self.value(*x).shape(), dx);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), gd.to_vec());
                accumulate(grads, *b, g.shape(), gd.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.shape(), gd.to_vec());
                accumulate(grads, *b, g.shape(), gd.iter().map(|v| -v).collect());
            }
            Op::Scale(a, s) => {
                accumulate(grads, *a, g.shape(), gd.iter().map(|v| v * s).collect());
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(av)
                    .map(|(gv, &x)| if x > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *a, g.shape(), d);
            }
            Op::RowDiff(w, pivot) => {
                let (rows, cols) = self.value(*w).dims2().expect("row_diff on a matrix");
                let mut d = gd.to_vec();
                for c in 0..cols {
                    let col_sum: f64 = (0..rows).map(|r| gd[r * cols + c]).sum();
                    d[pivot * cols + c] -= col_sum;
                }
                accumulate(grads, *w, g.shape(), d);
            }
            Op::ElemDiff(a, pivot) => {
                let mut d = gd.to_vec();
                d[*pivot] -= gd.iter().sum::<f64>();
                accumulate(grads, *a, g.shape(), d);
            }
            Op::LogSumExp(a) => {
                let s = gd[0];
                let d = softmax(self.value(*a).data())
                    .into_iter()
                    .map(|p| p * s)
                    .collect();
                accumulate(grads, *a, self.value(*a).shape(), d);
            }
            Op::SumElems(a) => {
                let shape = self.value(*a).shape();
                let n: usize = shape.iter().product();
                accumulate(grads, *a, shape, vec![gd[0]; n]);
            }
            Op::SumScalars(items) => {
                for &id in items {
                    let shape = self.value(id).shape();
                    accumulate(grads, id, shape, vec![gd[0]]);
                }
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("gradient shape"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradient() {
        let mut g = CompGraph::new();
        let w = g.param(Tensor::matrix(1, 1, vec![3.0]).unwrap());
        let x = g.input(Tensor::vector(vec![2.0]));
        let y = g.matvec(w, x).unwrap();
        let loss = g.sum_elems(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0]);
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut g = CompGraph::new();
        let w = g.param(Tensor::matrix(1, 1, vec![-3.0]).unwrap());
        let x = g.input(Tensor::vector(vec![2.0]));
        let y = g.matvec(w, x).unwrap();
        let r = g.relu(y);
        let loss = g.sum_elems(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = CompGraph::new();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_node_accumulates() {
        // loss = sum(x + x) => d/dx = 2
        let mut g = CompGraph::new();
        let x = g.param(Tensor::vector(vec![1.0, -1.0]));
        let y = g.add(x, x).unwrap();
        let loss = g.sum_elems(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.params(&g)[0].data(), &[2.0, 2.0]);
    }

    #[test]
    fn row_and_elem_diff_gradients() {
        let mut g = CompGraph::new();
        let w = g.param(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let d = g.row_diff(w, 0).unwrap();
        assert_eq!(g.value(d).data(), &[0.0, 0.0, 2.0, 2.0]);
        let loss = g.sum_elems(d);
        let grads = g.backward(loss).unwrap();
        // row 1 contributes +1, pivot row absorbs -2 + 1
        assert_eq!(grads.get(w).unwrap().data(), &[-1.0, -1.0, 1.0, 1.0]);

        let mut g = CompGraph::new();
        let v = g.param(Tensor::vector(vec![1.0, 5.0, 2.0]));
        let d = g.elem_diff(v, 1).unwrap();
        assert_eq!(g.value(d).data(), &[-4.0, 0.0, -3.0]);
        let loss = g.sum_elems(d);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(v).unwrap().data(), &[1.0, -2.0, 1.0]);
    }
}
