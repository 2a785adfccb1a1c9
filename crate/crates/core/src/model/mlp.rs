use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg::{add_matmul_tn, affine, gelu, gelu_grad, matmul_nt, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: vec![0.0; fan_out],
        }
    }

    /// Gaussian weights with variance `2 / (fan_in + fan_out)`, zero bias.
    pub fn glorot<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let mut layer = Dense::zeros(fan_in, fan_out);
        let denom = (fan_in + fan_out) as f64;
        let std = if denom > 0.0 { (2.0 / denom).sqrt() } else { 0.0 };
        for w in layer.weight.as_mut_slice() {
            let z: f64 = rng.sample(StandardNormal);
            *w = std * z;
        }
        layer
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// GELU hidden layers followed by a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer values kept from the forward pass for the backward pass.
pub struct MlpTrace {
    /// Input to each layer (the network input, then post-GELU activations).
    inputs: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    hidden_pre: Vec<Matrix>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: &[usize], output: usize) -> Self {
        let dims = layer_dims(input, hidden, output);
        Mlp {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn glorot<R: Rng>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let dims = layer_dims(input, hidden, output);
        Mlp {
            layers: dims.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").fan_out()
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            h = affine(&h, &layer.weight, &layer.bias);
            if l < last {
                h.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
            }
        }
        h
    }

    pub fn forward_traced(&self, x: &Matrix) -> (Matrix, MlpTrace) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = affine(&h, &layer.weight, &layer.bias);
            inputs.push(h);
            if l < last {
                let mut a = z.clone();
                a.as_mut_slice().iter_mut().for_each(|v| *v = gelu(*v));
                hidden_pre.push(z);
                h = a;
            } else {
                h = z;
            }
        }
        (h, MlpTrace { inputs, hidden_pre })
    }

    /// Accumulate parameter gradients into `grad` and return the input gradient.
    pub fn backward(&self, trace: &MlpTrace, d_out: Matrix, grad: &mut Mlp) -> Matrix {
        let mut d = d_out;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = &mut grad.layers[l];
            add_matmul_tn(&trace.inputs[l], &d, &mut g.weight);
            for n in 0..d.rows() {
                for (b, &v) in g.bias.iter_mut().zip(d.row(n)) {
                    *b += v;
                }
            }
            let mut d_in = matmul_nt(&d, &layer.weight);
            if l > 0 {
                let pre = &trace.hidden_pre[l - 1];
                for (v, &z) in d_in.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    *v *= gelu_grad(z);
                }
            }
            d = d_in;
        }
        d
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

fn layer_dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}
