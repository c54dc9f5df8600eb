//! Dense networks with exact reverse-mode gradients.
//!
//! A [`Network`] is an ordered list of dense and element-wise activation
//! layers. Everything is f64 and every reduction runs in ascending index
//! order, so results are bitwise reproducible across runs and thread
//! counts.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    /// Negative-side slope, 0.2 unless stated otherwise.
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x >= 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative as a function of the pre-activation input.
    fn grad(&self, x: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
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

/// Layer description without parameters; the checkpoint header format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize },
    Act(Activation),
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Dense {
        in_dim: usize,
        out_dim: usize,
        /// Row-major `out_dim x in_dim`.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    Act(Activation),
}

/// An ordered stack of dense and activation layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    in_dim: usize,
    out_dim: usize,
}

/// Per-layer inputs recorded by [`Network::forward_cache`] for backprop.
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    output: Tensor,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor {
        &self.output
    }
}

impl Network {
    /// Builds a network with zeroed parameters. Dense dimensions must chain
    /// through the stack; activations are dimension-preserving.
    pub fn new(specs: &[LayerSpec]) -> Result<Self> {
        let mut layers = Vec::with_capacity(specs.len());
        let mut cur: Option<usize> = None;
        let mut in_dim = None;
        for spec in specs {
            match *spec {
                LayerSpec::Dense { in_dim: i, out_dim: o } => {
                    if i == 0 || o == 0 {
                        return Err(Error::Shape("dense dims must be positive".into()));
                    }
                    if let Some(c) = cur {
                        if c != i {
                            return Err(Error::Shape(format!(
                                "dense in_dim {i} does not chain from previous width {c}"
                            )));
                        }
                    }
                    in_dim.get_or_insert(i);
                    cur = Some(o);
                    layers.push(Layer::Dense {
                        in_dim: i,
                        out_dim: o,
                        weights: vec![0.0; i * o],
                        bias: vec![0.0; o],
                    });
                }
                LayerSpec::Act(a) => layers.push(Layer::Act(a)),
            }
        }
        let in_dim = in_dim.ok_or_else(|| Error::Shape("network needs at least one dense layer".into()))?;
        Ok(Network {
            layers,
            in_dim,
            out_dim: cur.unwrap(),
        })
    }

    /// An empty network: identity map, no parameters. Used for the
    /// homogeneity-level-0 feature extractor.
    pub fn identity(dim: usize) -> Self {
        Network { layers: Vec::new(), in_dim: dim, out_dim: dim }
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { in_dim, out_dim, .. } => LayerSpec::Dense {
                    in_dim: *in_dim,
                    out_dim: *out_dim,
                },
                Layer::Act(a) => LayerSpec::Act(*a),
            })
            .collect()
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// Glorot-uniform weights, zero biases, drawn from the given stream.
    pub fn init_params(&mut self, rng: &mut impl Rng) {
        for layer in &mut self.layers {
            if let Layer::Dense { in_dim, out_dim, weights, bias } = layer {
                let limit = (6.0 / (*in_dim + *out_dim) as f64).sqrt();
                for w in weights.iter_mut() {
                    *w = rng.gen_range(-limit..=limit);
                }
                for b in bias.iter_mut() {
                    *b = 0.0;
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { in_dim, out_dim, .. } => in_dim * out_dim + out_dim,
                Layer::Act(_) => 0,
            })
            .sum()
    }

    /// Layer order, weights row-major then bias.
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            if let Layer::Dense { weights, bias, .. } = layer {
                out.extend_from_slice(weights);
                out.extend_from_slice(bias);
            }
        }
        out
    }

    pub fn unflatten_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat vector length {} != parameter count {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut at = 0;
        for layer in &mut self.layers {
            if let Layer::Dense { weights, bias, .. } = layer {
                let wn = weights.len();
                weights.copy_from_slice(&flat[at..at + wn]);
                at += wn;
                let bn = bias.len();
                bias.copy_from_slice(&flat[at..at + bn]);
                at += bn;
            }
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cache(batch)?.output)
    }

    pub fn forward_cache(&self, batch: &Tensor) -> Result<ForwardCache> {
        if batch.cols() != self.in_dim {
            return Err(Error::Shape(format!(
                "batch width {} != network in_dim {}",
                batch.cols(),
                self.in_dim
            )));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut cur = batch.clone();
        for layer in &self.layers {
            inputs.push(cur.clone());
            cur = match layer {
                Layer::Dense { in_dim, out_dim, weights, bias } => {
                    let b = cur.rows();
                    let mut out = vec![0.0; b * out_dim];
                    for r in 0..b {
                        let x = cur.row(r);
                        let y = &mut out[r * out_dim..(r + 1) * out_dim];
                        for (o, yo) in y.iter_mut().enumerate() {
                            let wrow = &weights[o * in_dim..(o + 1) * in_dim];
                            let mut acc = bias[o];
                            for i in 0..*in_dim {
                                acc += wrow[i] * x[i];
                            }
                            *yo = acc;
                        }
                    }
                    Tensor::new(vec![b, *out_dim], out)?
                }
                Layer::Act(a) => cur.map(|x| a.apply(x)),
            };
        }
        cur.check_finite()?;
        Ok(ForwardCache { inputs, output: cur })
    }

    /// Backpropagates `out_grad` (dLoss/dOutput) through the cached forward
    /// pass. Returns the flat parameter gradient and the gradient with
    /// respect to the input batch.
    pub fn backward(&self, cache: &ForwardCache, out_grad: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        if out_grad.shape() != cache.output.shape() {
            return Err(Error::Shape("out_grad shape mismatch".into()));
        }
        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        let mut dy = out_grad.clone();
        for (layer, input) in self.layers.iter().zip(cache.inputs.iter()).rev() {
            match layer {
                Layer::Dense { in_dim, out_dim, weights, .. } => {
                    let b = input.rows();
                    let mut dw = vec![0.0; in_dim * out_dim];
                    let mut db = vec![0.0; *out_dim];
                    let mut dx = vec![0.0; b * in_dim];
                    for r in 0..b {
                        let x = input.row(r);
                        let g = dy.row(r);
                        for o in 0..*out_dim {
                            let go = g[o];
                            db[o] += go;
                            let wrow = &weights[o * in_dim..(o + 1) * in_dim];
                            let dwrow = &mut dw[o * in_dim..(o + 1) * in_dim];
                            let dxr = &mut dx[r * in_dim..(r + 1) * in_dim];
                            for i in 0..*in_dim {
                                dwrow[i] += go * x[i];
                                dxr[i] += go * wrow[i];
                            }
                        }
                    }
                    let mut flat = dw;
                    flat.extend_from_slice(&db);
                    grads.push(flat);
                    dy = Tensor::new(vec![b, *in_dim], dx)?;
                }
                Layer::Act(a) => {
                    let mut dx = dy.clone();
                    for (g, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                        *g *= a.grad(x);
                    }
                    dy = dx;
                }
            }
        }
        let mut flat = Vec::with_capacity(self.param_count());
        for g in grads.into_iter().rev() {
            flat.extend_from_slice(&g);
        }
        Ok((flat, dy))
    }
}

/// Loss attached to a network output in [`loss_and_grad`].
pub enum Loss<'a> {
    /// Softmax cross-entropy against class indices.
    CrossEntropy(&'a [usize]),
    /// Sigmoid binary cross-entropy against per-element float targets.
    Bce(&'a [f64]),
    /// Mean squared error against a same-shape target.
    Mse(&'a Tensor),
}

/// Mean-over-batch loss and flat parameter gradient for a network.
pub fn loss_and_grad(net: &Network, batch: &Tensor, loss: &Loss) -> Result<(f64, Vec<f64>)> {
    if batch.rows() == 0 {
        return Err(Error::Domain("empty batch".into()));
    }
    let cache = net.forward_cache(batch)?;
    let (j, dout) = loss_grad_on_output(&cache.output, loss)?;
    let (grad, _) = net.backward(&cache, &dout)?;
    if !j.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {j}")));
    }
    Ok((j, grad))
}

/// Loss value and dLoss/dOutput for a raw output batch.
pub fn loss_grad_on_output(output: &Tensor, loss: &Loss) -> Result<(f64, Tensor)> {
    match loss {
        Loss::CrossEntropy(labels) => softmax_cross_entropy(output, labels),
        Loss::Bce(targets) => bce_with_logits(output, targets),
        Loss::Mse(target) => mse(output, target),
    }
}

/// Softmax cross-entropy, mean over the batch. Numerically stable via
/// max-shift; shift invariance in the logits holds to roundoff.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Domain(format!("label {bad} out of range [0,{c})")));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; b * c];
    for r in 0..b {
        let z = logits.row(r);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &zi in z {
            denom += (zi - m).exp();
        }
        let log_denom = denom.ln();
        loss += log_denom - (z[labels[r]] - m);
        let g = &mut grad[r * c..(r + 1) * c];
        for i in 0..c {
            g[i] = ((z[i] - m).exp() / denom) / b as f64;
        }
        g[labels[r]] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, Tensor::new(vec![b, c], grad)?))
}

/// Sigmoid BCE on logits, mean over all elements.
pub fn bce_with_logits(logits: &Tensor, targets: &[f64]) -> Result<(f64, Tensor)> {
    if targets.len() != logits.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} logits",
            targets.len(),
            logits.len()
        )));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = logits.clone();
    for (g, (&z, &t)) in grad.data_mut().iter_mut().zip(logits.data().iter().zip(targets)) {
        // max(z,0) - t*z + ln(1 + e^{-|z|})
        loss += z.max(0.0) - t * z + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(z) - t) / n;
    }
    Ok((loss / n, grad))
}

/// Mean squared error over all elements.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape("mse shape mismatch".into()));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let mut grad = pred.clone();
    for (g, (&p, &t)) in grad.data_mut().iter_mut().zip(pred.data().iter().zip(target.data())) {
        let r = p - t;
        loss += r * r;
        *g = 2.0 * r / n;
    }
    Ok((loss / n, grad))
}

/// Per-sample sum of squared errors, mean over the batch. The CVAE
/// reconstruction term.
pub fn sse_mean_batch(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape("sse shape mismatch".into()));
    }
    let b = pred.rows() as f64;
    let mut loss = 0.0;
    let mut grad = pred.clone();
    for (g, (&p, &t)) in grad.data_mut().iter_mut().zip(pred.data().iter().zip(target.data())) {
        let r = p - t;
        loss += r * r;
        *g = 2.0 * r / b;
    }
    Ok((loss / b, grad))
}

/// One-hot encodes labels into a `B x C` batch.
pub fn one_hot(labels: &[usize], class_count: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * class_count];
    for (r, &y) in labels.iter().enumerate() {
        if y >= class_count {
            return Err(Error::Domain(format!("label {y} out of range [0,{class_count})")));
        }
        data[r * class_count + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), class_count], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};

    fn dense(i: usize, o: usize) -> LayerSpec {
        LayerSpec::Dense { in_dim: i, out_dim: o }
    }

    #[test]
    fn identity_dense_forward() {
        let mut net = Network::new(&[dense(2, 2)]).unwrap();
        net.unflatten_params(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_forward() {
        let net = {
            let mut n = Network::new(&[dense(3, 3), LayerSpec::Act(Activation::Relu)]).unwrap();
            n.unflatten_params(&[
                1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0,
            ])
            .unwrap();
            n
        };
        let x = Tensor::matrix(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(net.forward(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn two_layer_hand_computed() {
        // y = W2 * tanh(W1 x + b1) + b2 with hand-set weights.
        let mut net = Network::new(&[dense(2, 2), LayerSpec::Act(Activation::Tanh), dense(2, 1)]).unwrap();
        // W1 = [[1, 2], [0, 1]], b1 = [0.5, -0.5]; W2 = [[1, -1]], b2 = [0.25]
        net.unflatten_params(&[1.0, 2.0, 0.0, 1.0, 0.5, -0.5, 1.0, -1.0, 0.25]).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let h1 = (1.0f64 + 2.0 + 0.5).tanh();
        let h2 = (0.0f64 + 1.0 - 0.5).tanh();
        let expect = h1 - h2 + 0.25;
        let got = net.forward(&x).unwrap().data()[0];
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let net = Network::new(&[dense(3, 2)]).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(matches!(net.forward(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_logits_ce_is_ln_c() {
        let logits = Tensor::matrix(1, 4, vec![0.0; 4]).unwrap();
        let (j, _) = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!((j - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_ce_hand_value() {
        let logits = Tensor::matrix(1, 4, vec![10.0, 0.0, 0.0, 0.0]).unwrap();
        let (j, _) = softmax_cross_entropy(&logits, &[0]).unwrap();
        let expect = (10.0f64.exp() + 3.0).ln() - 10.0;
        assert!((j - expect).abs() < 1e-12);
    }

    #[test]
    fn ce_shift_invariance() {
        let logits = Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.0, 0.5, -0.7]).unwrap();
        let shifted = logits.map(|x| x + 123.456);
        let (a, _) = softmax_cross_entropy(&logits, &[2, 1]).unwrap();
        let (b, _) = softmax_cross_entropy(&shifted, &[2, 1]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let logits = Tensor::matrix(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            softmax_cross_entropy(&logits, &[3]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn mse_zero_at_target() {
        let p = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (j, g) = mse(&p, &p).unwrap();
        assert_eq!(j, 0.0);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let z = Tensor::matrix(2, 1, vec![0.0, 0.0]).unwrap();
        let (j, _) = bce_with_logits(&z, &[1.0, 0.0]).unwrap();
        assert!((j - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn flatten_roundtrip_and_count() {
        let mut net = Network::new(&[dense(2, 1)]).unwrap();
        assert_eq!(net.param_count(), 3);
        let mut rng = stream(1, &[tag::INIT]);
        net.init_params(&mut rng);
        let flat = net.flatten_params();
        let mut other = Network::new(&[dense(2, 1)]).unwrap();
        other.unflatten_params(&flat).unwrap();
        assert_eq!(other.flatten_params(), flat);
    }

    #[test]
    fn swapped_params_swap_outputs() {
        let specs = [dense(3, 2), LayerSpec::Act(Activation::Relu), dense(2, 2)];
        let mut a = Network::new(&specs).unwrap();
        let mut b = Network::new(&specs).unwrap();
        a.init_params(&mut stream(1, &[tag::INIT, 0]));
        b.init_params(&mut stream(1, &[tag::INIT, 1]));
        let x = Tensor::matrix(2, 3, vec![0.1, -0.3, 0.8, 1.0, 0.0, -0.5]).unwrap();
        let (ya, yb) = (a.forward(&x).unwrap(), b.forward(&x).unwrap());
        let (fa, fb) = (a.flatten_params(), b.flatten_params());
        a.unflatten_params(&fb).unwrap();
        b.unflatten_params(&fa).unwrap();
        assert_eq!(a.forward(&x).unwrap(), yb);
        assert_eq!(b.forward(&x).unwrap(), ya);
    }

    /// Central-difference gradient of `loss_and_grad` on the flat params.
    pub(crate) fn numeric_grad(
        net: &Network,
        batch: &Tensor,
        labels: &[usize],
        h: f64,
    ) -> Vec<f64> {
        let base = net.flatten_params();
        let mut out = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let mut n = net.clone();
            n.unflatten_params(&plus).unwrap();
            let (jp, _) = loss_and_grad(&n, batch, &Loss::CrossEntropy(labels)).unwrap();
            n.unflatten_params(&minus).unwrap();
            let (jm, _) = loss_and_grad(&n, batch, &Loss::CrossEntropy(labels)).unwrap();
            out[i] = (jp - jm) / (2.0 * h);
        }
        out
    }

    #[test]
    fn gradient_matches_central_differences() {
        let specs = [
            dense(4, 8),
            LayerSpec::Act(Activation::LeakyRelu(0.2)),
            dense(8, 5),
            LayerSpec::Act(Activation::Tanh),
            dense(5, 3),
        ];
        let mut net = Network::new(&specs).unwrap();
        net.init_params(&mut stream(42, &[tag::INIT]));
        let mut rng = stream(42, &[tag::DATASET]);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch = Tensor::matrix(3, 4, data).unwrap();
        let labels = [0, 2, 1];
        let (_, analytic) = loss_and_grad(&net, &batch, &Loss::CrossEntropy(&labels)).unwrap();
        let numeric = numeric_grad(&net, &batch, &labels, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                ((a - n) / denom).abs() < 1e-4,
                "analytic {a} vs numeric {n}"
            );
        }
    }
}
