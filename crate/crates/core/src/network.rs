//! Sequential affine/ReLU classifiers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CompGraph, NodeId};
use crate::tensor::{log_sum_exp, softmax, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine { weight: Tensor, bias: Tensor },
    Relu,
}

impl Layer {
    pub fn affine(weight: Tensor, bias: Tensor) -> Result<Self> {
        let (rows, _) = weight.dims2()?;
        if bias.shape() != [rows] {
            return Err(Error::dim(format!(
                "bias shape {:?} does not match {rows} output rows",
                bias.shape()
            )));
        }
        Ok(Layer::Affine { weight, bias })
    }
}

/// Layer widths of a fully connected ReLU network, input first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Arch(pub Vec<usize>);

impl Arch {
    pub fn input_dim(&self) -> usize {
        self.0[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.0.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.len() < 2 || self.0.contains(&0) {
            return Err(Error::Config(format!(
                "architecture needs at least two positive widths, got {:?}",
                self.0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    /// Checks that adjacent affine layers compose and that the net ends in an
    /// affine layer.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let mut width: Option<usize> = None;
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Affine { weight, bias } = layer {
                let (rows, cols) = weight.dims2()?;
                if bias.shape() != [rows] {
                    return Err(Error::dim(format!("layer {i}: bias/weight mismatch")));
                }
                if let Some(w) = width {
                    if w != cols {
                        return Err(Error::dim(format!(
                            "layer {i} expects {cols} inputs but receives {w}"
                        )));
                    }
                }
                width = Some(rows);
            }
        }
        if width.is_none() {
            return Err(Error::dim("network has no affine layer"));
        }
        Ok(Network { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn affines(&self) -> impl Iterator<Item = (&Tensor, &Tensor)> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Affine { weight, bias } => Some((weight, bias)),
            Layer::Relu => None,
        })
    }

    pub fn input_dim(&self) -> usize {
        let (w, _) = self.affines().next().expect("validated");
        w.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        let (w, _) = self.affines().last().expect("validated");
        w.shape()[0]
    }

    /// Parameters in a fixed order: weight then bias of each affine layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.affines().flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Affine { weight, bias } => Some([weight, bias]),
                Layer::Relu => None,
            })
            .flatten()
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.data())?;
        let mut h = x.data().to_vec();
        for layer in &self.layers {
            match layer {
                Layer::Affine { weight, bias } => {
                    h = weight.matvec(&h)?.add(bias)?.into_data();
                }
                Layer::Relu => h.iter_mut().for_each(|v| *v = v.max(0.0)),
            }
        }
        Ok(Tensor::vector(h))
    }

    /// Predicted class; ties resolve to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(self.forward(x)?.argmax())
    }

    /// Cross-entropy of `f(x)` against `y` and its gradient with respect to `x`.
    ///
    /// A hand-written backward pass used by the attacks, which only ever need
    /// input gradients and run many times per training step.
    pub fn ce_input_gradient(&self, x: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        if y >= self.output_dim() {
            return Err(Error::dim(format!("label {y} out of range")));
        }
        // Activations entering each layer.
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let h = acts.last().expect("non-empty");
            let next = match layer {
                Layer::Affine { weight, bias } => weight.matvec(h)?.add(bias)?.into_data(),
                Layer::Relu => h.iter().map(|v| v.max(0.0)).collect(),
            };
            acts.push(next);
        }
        let logits = acts.last().expect("non-empty");
        let loss = log_sum_exp(logits) - logits[y];
        let mut grad = softmax(logits);
        grad[y] -= 1.0;

        for (layer, input) in self.layers.iter().zip(&acts).rev() {
            grad = match layer {
                Layer::Affine { weight, .. } => {
                    let (rows, cols) = weight.dims2()?;
                    let wd = weight.data();
                    let mut out = vec![0.0; cols];
                    for r in 0..rows {
                        let g = grad[r];
                        for (c, o) in out.iter_mut().enumerate() {
                            *o += wd[r * cols + c] * g;
                        }
                    }
                    out
                }
                Layer::Relu => grad
                    .iter()
                    .zip(input)
                    .map(|(g, &a)| if a > 0.0 { *g } else { 0.0 })
                    .collect(),
            };
        }
        Ok((loss, grad))
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, graph: &mut CompGraph) -> BoundNetwork {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Affine { weight, bias } => BoundLayer::Affine {
                    weight: graph.param(weight.clone()),
                    bias: graph.param(bias.clone()),
                },
                Layer::Relu => BoundLayer::Relu,
            })
            .collect();
        BoundNetwork { layers }
    }
}

/// Standard deviation used by [`init_weights`] for a layer with `fan_in`
/// inputs: `sqrt(2π) / fan_in`. With this scale the expected growth of an
/// interval radius through one affine+ReLU pair is one.
pub fn init_std(fan_in: usize) -> f64 {
    (2.0 * std::f64::consts::PI).sqrt() / fan_in as f64
}

/// Zero-mean normal weights with [`init_std`], zero biases.
pub fn init_weights(arch: &Arch, seed: u64) -> Result<Network> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let widths = &arch.0;
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let normal = Normal::new(0.0, init_std(fan_in)).expect("positive std");
        let weights = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
        layers.push(Layer::affine(
            Tensor::matrix(fan_out, fan_in, weights)?,
            Tensor::zeros(&[fan_out]),
        )?);
        if i + 2 < widths.len() {
            layers.push(Layer::Relu);
        }
    }
    Network::new(layers)
}

#[derive(Debug, Clone, Copy)]
pub enum BoundLayer {
    Affine { weight: NodeId, bias: NodeId },
    Relu,
}

/// A network whose parameters live on a [`CompGraph`].
#[derive(Debug, Clone)]
pub struct BoundNetwork {
    layers: Vec<BoundLayer>,
}

impl BoundNetwork {
    pub fn layers(&self) -> &[BoundLayer] {
        &self.layers
    }

    pub fn forward(&self, graph: &mut CompGraph, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for layer in &self.layers {
            h = match *layer {
                BoundLayer::Affine { weight, bias } => {
                    let z = graph.matvec(weight, h)?;
                    graph.add(z, bias)?
                }
                BoundLayer::Relu => graph.relu(h),
            };
        }
        Ok(h)
    }

    /// Cross-entropy `ln Σ_i exp(o_i - o_y)` of the logits at `x`.
    pub fn cross_entropy(&self, graph: &mut CompGraph, x: NodeId, y: usize) -> Result<NodeId> {
        let logits = self.forward(graph, x)?;
        let margins = graph.elem_diff(logits, y)?;
        Ok(graph.log_sum_exp(margins))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(weight: Vec<f64>, rows: usize, cols: usize, bias: Vec<f64>) -> Layer {
        Layer::affine(
            Tensor::matrix(rows, cols, weight).unwrap(),
            Tensor::vector(bias),
        )
        .unwrap()
    }

    #[test]
    fn identity_forward() {
        let net = Network::new(vec![single(vec![1.0, 0.0, 0.0, 1.0], 2, 2, vec![0.0, 0.0])])
            .unwrap();
        let out = net.forward(&Tensor::vector(vec![3.0, -1.0])).unwrap();
        assert_eq!(out.data(), &[3.0, -1.0]);
    }

    #[test]
    fn affine_then_relu() {
        let net = Network::new(vec![single(vec![1.0, -1.0], 1, 2, vec![0.5]), Layer::Relu])
            .unwrap();
        let out = net.forward(&Tensor::vector(vec![2.0, 1.0])).unwrap();
        assert_eq!(out.data(), &[1.5]);
    }

    #[test]
    fn shape_errors() {
        let net = init_weights(&Arch(vec![2, 4, 3]), 1).unwrap();
        assert!(matches!(
            net.forward(&Tensor::vector(vec![1.0; 3])),
            Err(Error::Dimension(_))
        ));
        let bad = Network::new(vec![
            single(vec![1.0; 4], 2, 2, vec![0.0; 2]),
            Layer::Relu,
            single(vec![1.0; 3], 1, 3, vec![0.0]),
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let arch = Arch(vec![2, 16, 16, 3]);
        let a = init_weights(&arch, 42).unwrap();
        let b = init_weights(&arch, 42).unwrap();
        assert_eq!(a, b);
        for layer in a.layers() {
            if let Layer::Affine { bias, .. } = layer {
                assert!(bias.data().iter().all(|&v| v == 0.0));
            }
        }
        assert_ne!(a, init_weights(&arch, 43).unwrap());
    }

    #[test]
    fn init_std_matches_target() {
        let net = init_weights(&Arch(vec![100, 100, 100]), 7).unwrap();
        for (w, _) in net.affines() {
            let n = w.len() as f64;
            let mean = w.sum() / n;
            let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let target = init_std(100);
            assert!((var.sqrt() - target).abs() / target < 0.1);
        }
    }

    #[test]
    fn graph_forward_matches_direct() {
        let net = init_weights(&Arch(vec![3, 5, 4]), 3).unwrap();
        let x = Tensor::vector(vec![0.3, -0.7, 1.1]);
        let mut g = CompGraph::new();
        let bound = net.bind(&mut g);
        let xn = g.input(x.clone());
        let out = bound.forward(&mut g, xn).unwrap();
        assert_eq!(g.value(out), &net.forward(&x).unwrap());
    }

    #[test]
    fn fast_input_gradient_matches_graph() {
        let net = init_weights(&Arch(vec![3, 6, 6, 3]), 9).unwrap();
        let x = Tensor::vector(vec![0.4, -0.2, 0.9]);
        let (loss, grad) = net.ce_input_gradient(x.data(), 2).unwrap();

        let mut g = CompGraph::new();
        let bound = net.bind(&mut g);
        let xn = g.input(x);
        let ce = bound.cross_entropy(&mut g, xn, 2).unwrap();
        let grads = g.backward(ce).unwrap();
        assert!((g.value(ce).item().unwrap() - loss).abs() < 1e-12);
        for (a, b) in grads.get(xn).unwrap().data().iter().zip(&grad) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
