//! Small dense feed-forward networks with exact reverse-mode gradients.
//!
//! Shared by the base classifier and the selector: affine layers with ReLU
//! between them and a linear final layer. Output nonlinearities (softmax,
//! sigmoid) live with the callers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Affine map `out = W x + b`, `W` stored row-major as `rows × cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            weights: vec![T::zero(); rows * cols],
            bias: vec![T::zero(); rows],
        }
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn xavier<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let weights = (0..rows * cols)
            .map(|_| T::lit(rng.random_range(-limit..=limit)))
            .collect();
        Dense {
            rows,
            cols,
            weights,
            bias: vec![T::zero(); rows],
        }
    }

    #[inline]
    fn apply(&self, x: &[T], out: &mut Vec<T>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.cols).zip(&self.bias) {
            let mut acc = *b;
            for (w, v) in row.iter().zip(x) {
                acc += *w * *v;
            }
            out.push(acc);
        }
    }
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<T>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<T>>,
}

impl<T> Trace<T> {
    pub fn output(&self) -> &[T] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parameter gradients, same shapes as the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += *y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= c);
            l.bias.iter_mut().for_each(|b| *b *= c);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Flat view in the same order as [`Mlp::param`].
    pub fn flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// Builds a network with the given layer widths (`sizes[0]` is the input).
    pub fn xavier<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Dense::xavier(w[1], w[0], rng))
            .collect();
        Mlp { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Mlp {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[1], w[0])).collect(),
        }
    }

    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("network needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.rows * l.cols || l.bias.len() != l.rows {
                return Err(Error::param(format!("layer {i} has inconsistent shape")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].rows != w[1].cols {
                return Err(Error::param(format!(
                    "layer {} outputs {} values but layer {} expects {}",
                    i,
                    w[0].rows,
                    i + 1,
                    w[1].cols
                )));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].rows
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::param(format!(
                "input has dimension {}, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Linear outputs of the final layer.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i < last {
                relu_in_place(&mut next);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Post-ReLU activation of the last hidden layer (the input itself for a
    /// single-layer network).
    pub fn hidden(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers[..self.layers.len() - 1] {
            layer.apply(&cur, &mut next);
            relu_in_place(&mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn forward_traced(&self, x: &[T]) -> Result<Trace<T>> {
        self.check_input(x)?;
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.rows);
            layer.apply(&cur, &mut z);
            let next = if i + 1 < n {
                let mut a = z.clone();
                relu_in_place(&mut a);
                a
            } else {
                Vec::new()
            };
            inputs.push(std::mem::replace(&mut cur, next));
            pre.push(z);
        }
        Ok(Trace { inputs, pre })
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.rows, l.cols))
                .collect(),
        }
    }

    /// Accumulates into `grads` the parameter gradient of a loss whose
    /// derivative with respect to the final linear outputs is `d_out`.
    pub fn backward(&self, trace: &Trace<T>, d_out: &[T], grads: &mut Gradients<T>) -> Result<()> {
        if trace.pre.len() != self.layers.len() {
            return Err(Error::State("trace does not belong to this network".into()));
        }
        if d_out.len() != self.output_dim() {
            return Err(Error::param("upstream gradient has wrong dimension"));
        }
        let mut delta = d_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &trace.inputs[l];
            let g = &mut grads.layers[l];
            for (o, d) in delta.iter().enumerate() {
                if d.is_zero() {
                    continue;
                }
                g.bias[o] += *d;
                let row = &mut g.weights[o * layer.cols..(o + 1) * layer.cols];
                for (w, x) in row.iter_mut().zip(input) {
                    *w += *d * *x;
                }
            }
            if l == 0 {
                break;
            }
            // Back through W then through the previous layer's ReLU.
            let prev_pre = &trace.pre[l - 1];
            let mut next = vec![T::zero(); layer.cols];
            for (o, d) in delta.iter().enumerate() {
                if d.is_zero() {
                    continue;
                }
                let row = &layer.weights[o * layer.cols..(o + 1) * layer.cols];
                for (acc, w) in next.iter_mut().zip(row) {
                    *acc += *d * *w;
                }
            }
            for (v, z) in next.iter_mut().zip(prev_pre) {
                if *z <= T::zero() {
                    *v = T::zero();
                }
            }
            delta = next;
        }
        Ok(())
    }

    /// Plain gradient-descent step.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, learning_rate: T) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, d) in layer.weights.iter_mut().zip(&g.weights) {
                *w -= learning_rate * *d;
            }
            for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= learning_rate * *d;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    fn locate(&self, mut index: usize) -> (usize, bool, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            if index < l.weights.len() {
                return (li, true, index);
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                return (li, false, index);
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access: per layer, weights row-major then biases.
    pub fn param(&self, index: usize) -> T {
        let (l, w, i) = self.locate(index);
        if w {
            self.layers[l].weights[i]
        } else {
            self.layers[l].bias[i]
        }
    }

    pub fn set_param(&mut self, index: usize, value: T) {
        let (l, w, i) = self.locate(index);
        if w {
            self.layers[l].weights[i] = value;
        } else {
            self.layers[l].bias[i] = value;
        }
    }
}

#[inline]
fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}
