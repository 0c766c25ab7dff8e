use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{kernels, DenseArray, Graph, NodeId};
use crate::error::{Error, Result};

/// Weights and biases of a fully connected network with rectifier hidden
/// layers and an affine output layer. Weight `i` has shape
/// `[widths[i], widths[i + 1]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    widths: Vec<usize>,
    weights: Vec<DenseArray>,
    biases: Vec<DenseArray>,
}

impl MlpParams {
    pub fn new(widths: Vec<usize>, weights: Vec<DenseArray>, biases: Vec<DenseArray>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer widths {widths:?}")));
        }
        if weights.len() != widths.len() - 1 || biases.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} layers need {} weights and biases, got {} and {}",
                widths.len(),
                widths.len() - 1,
                weights.len(),
                biases.len()
            )));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.shape() != [widths[i], widths[i + 1]] {
                return Err(Error::ShapeMismatch {
                    op: "MlpParams::new",
                    left: vec![widths[i], widths[i + 1]],
                    right: w.shape().to_vec(),
                });
            }
            if b.shape() != [widths[i + 1]] {
                return Err(Error::ShapeMismatch {
                    op: "MlpParams::new",
                    left: vec![widths[i + 1]],
                    right: b.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            widths,
            weights,
            biases,
        })
    }

    pub fn zeros(widths: Vec<usize>) -> Result<Self> {
        let weights = widths.windows(2).map(|w| DenseArray::zeros(&[w[0], w[1]])).collect();
        let biases = widths[1..].iter().map(|&w| DenseArray::zeros(&[w])).collect();
        Self::new(widths, weights, biases)
    }

    /// Weights ~ N(0, 1/fan_in), zero biases.
    pub fn init<R: Rng + ?Sized>(widths: Vec<usize>, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(widths)?;
        for w in &mut p.weights {
            let scale = 1.0 / (w.shape()[0] as f64).sqrt();
            for v in w.values_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v = z * scale;
            }
        }
        Ok(p)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn weights(&self) -> &[DenseArray] {
        &self.weights
    }

    pub fn biases(&self) -> &[DenseArray] {
        &self.biases
    }

    /// Weights and biases interleaved per layer.
    pub fn tensors(&self) -> Vec<&DenseArray> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut DenseArray> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    /// Rebuilds from the layout produced by [`MlpParams::tensors`].
    pub fn from_tensors(widths: Vec<usize>, tensors: Vec<DenseArray>) -> Result<Self> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut it = tensors.into_iter();
        while let Some(w) = it.next() {
            weights.push(w);
            biases.push(it.next().ok_or_else(|| Error::Format("odd number of MLP tensors".into()))?);
        }
        Self::new(widths, weights, biases)
    }

    /// Registers every tensor as a leaf on `graph`.
    pub fn register(&self, graph: &mut Graph) -> MlpHandle {
        MlpHandle {
            weights: self.weights.iter().map(|w| graph.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| graph.leaf(b.clone())).collect(),
        }
    }

    /// Forward pass over an `n x in` row-major batch.
    pub fn forward_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (k, m) = (self.widths[i], self.widths[i + 1]);
            h = kernels::matmul(&h, w.values(), n, k, m);
            kernels::add_bias_relu(&mut h, b.values(), i < last);
        }
        h
    }
}

/// Graph-side view of an [`MlpParams`], produced by [`MlpParams::register`].
#[derive(Clone, Debug)]
pub struct MlpHandle {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl MlpHandle {
    /// Forward pass of an `n x in` node.
    pub fn forward(&self, graph: &mut Graph, input: NodeId) -> Result<NodeId> {
        let mut h = input;
        let last = self.weights.len() - 1;
        for (i, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = graph.matmul(h, w)?;
            h = graph.add_bias(h, b)?;
            if i < last {
                h = graph.relu(h);
            }
        }
        Ok(h)
    }

    /// Node ids in the same order as [`MlpParams::tensors`].
    pub fn nodes(&self) -> Vec<NodeId> {
        self.weights.iter().zip(&self.biases).flat_map(|(&w, &b)| [w, b]).collect()
    }
}

/// Applies the network to a single input vector or an `n x in` batch.
pub fn mlp_apply(params: &MlpParams, x: &DenseArray) -> Result<DenseArray> {
    let width = params.input_width();
    let (n, cols) = match x.shape() {
        &[c] => (1, c),
        &[r, c] => (r, c),
        other => {
            return Err(Error::ShapeMismatch {
                op: "mlp_apply",
                left: vec![width],
                right: other.to_vec(),
            })
        }
    };
    if cols != width {
        return Err(Error::ShapeMismatch {
            op: "mlp_apply",
            left: vec![width],
            right: x.shape().to_vec(),
        });
    }
    let out = params.forward_rows(x.values(), n);
    let shape = if x.rank() == 1 {
        vec![params.output_width()]
    } else {
        vec![n, params.output_width()]
    };
    Ok(DenseArray::from_parts(shape, out))
}
