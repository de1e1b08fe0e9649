//! Small dense networks with manual backpropagation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected layer `y = W x + b`, with `W` stored row-major (out × in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// He-normal weights, zero bias.
    fn he(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            in_dim,
            out_dim,
            weights: (0..in_dim * out_dim).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    fn backward_input(&self, grad_out: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.in_dim];
        for (row, go) in self.weights.chunks_exact(self.in_dim).zip(grad_out) {
            if *go != 0.0 {
                g.iter_mut().zip(row).for_each(|(gi, w)| *gi += go * w);
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Start the last layer at zero so untrained logits are all zero.
    #[serde(default)]
    pub zero_last: bool,
}

/// Dense layers with ReLU between them and a linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer inputs and pre-activations recorded by [`Mlp::forward_trace`].
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }
}

/// Gradient buffer shaped like an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Dense>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Dense::zeros(l.in_dim, l.out_dim))
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

impl Mlp {
    pub fn new(spec: &MlpSpec, seed: u64) -> Result<Self> {
        if spec.input_dim == 0 || spec.output_dim == 0 || spec.hidden.contains(&0) {
            return Err(Error::Config(format!("layer widths must be positive: {spec:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![spec.input_dim];
        dims.extend(&spec.hidden);
        dims.push(spec.output_dim);
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                if i == n - 1 && spec.zero_last {
                    Dense::zeros(w[0], w[1])
                } else {
                    Dense::he(w[0], w[1], &mut rng)
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i < last {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for layer in &self.layers {
            let z = layer.forward(&h);
            inputs.push(h);
            h = z.iter().map(|v| v.max(0.0)).collect();
            pre.push(z);
        }
        Ok(Trace { inputs, pre })
    }

    /// Backpropagates `grad_logits` through the traced pass, accumulating
    /// parameter gradients into `grads` (when given) and returning the
    /// gradient w.r.t. the network input.
    pub fn backward(&self, trace: &Trace, grad_logits: &[f64], mut grads: Option<&mut Grads>) -> Vec<f64> {
        let mut g = grad_logits.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                g.iter_mut()
                    .zip(&trace.pre[i])
                    .for_each(|(gv, z)| {
                        if *z <= 0.0 {
                            *gv = 0.0;
                        }
                    });
            }
            let layer = &self.layers[i];
            if let Some(acc) = grads.as_deref_mut() {
                let acc = &mut acc.layers[i];
                let input = &trace.inputs[i];
                for (o, go) in g.iter().enumerate() {
                    if *go == 0.0 {
                        continue;
                    }
                    acc.bias[o] += go;
                    let row = &mut acc.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                    row.iter_mut().zip(input).for_each(|(w, x)| *w += go * x);
                }
            }
            g = layer.backward_input(&g);
        }
        g
    }

    /// Gradient of logit `target` w.r.t. the input.
    pub fn input_gradient(&self, x: &[f64], target: usize) -> Result<Vec<f64>> {
        if target >= self.output_dim() {
            return Err(Error::Input(format!("target class {target} out of range")));
        }
        let trace = self.forward_trace(x)?;
        let mut seed = vec![0.0; self.output_dim()];
        seed[target] = 1.0;
        Ok(self.backward(&trace, &seed, None))
    }

    /// All parameters, layer by layer, weights before bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(&l.weights);
            out.extend(&l.bias);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                actual: params.len(),
            });
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(w);
            let (b, r) = r.split_at(l.bias.len());
            l.bias.copy_from_slice(b);
            rest = r;
        }
        Ok(())
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.out_dim));
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

/// Stochastic gradient descent with optional heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: Option<Grads>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self { cfg, velocity: None }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.cfg;
        if momentum == 0.0 {
            for (l, g) in net.layers.iter_mut().zip(&grads.layers) {
                l.weights
                    .iter_mut()
                    .zip(&g.weights)
                    .for_each(|(w, gw)| *w -= lr * (gw + weight_decay * *w));
                l.bias.iter_mut().zip(&g.bias).for_each(|(b, gb)| *b -= lr * gb);
            }
            return;
        }
        let vel = self.velocity.get_or_insert_with(|| Grads::zeros_like(net));
        for ((l, g), v) in net.layers.iter_mut().zip(&grads.layers).zip(&mut vel.layers) {
            for ((w, gw), vw) in l.weights.iter_mut().zip(&g.weights).zip(&mut v.weights) {
                *vw = momentum * *vw + gw + weight_decay * *w;
                *w -= lr * *vw;
            }
            for ((b, gb), vb) in l.bias.iter_mut().zip(&g.bias).zip(&mut v.bias) {
                *vb = momentum * *vb + gb;
                *b -= lr * *vb;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cross_entropy_grad;
    use proptest::prelude::*;

    fn spec(zero_last: bool) -> MlpSpec {
        MlpSpec {
            input_dim: 4,
            hidden: vec![6, 5],
            output_dim: 3,
            zero_last,
        }
    }

    #[test]
    fn zero_last_layer_gives_zero_logits() {
        let net = Mlp::new(&spec(true), 1).unwrap();
        assert_eq!(net.forward(&[0.3, -1.0, 2.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn shape_mismatch_is_an_input_error() {
        let net = Mlp::new(&spec(false), 1).unwrap();
        assert!(matches!(
            net.forward(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { expected: 4, actual: 2 })
        ));
    }

    #[test]
    fn params_roundtrip() {
        let a = Mlp::new(&spec(false), 1).unwrap();
        let mut b = Mlp::new(&spec(false), 2).unwrap();
        assert_ne!(a, b);
        b.set_params(&a.params()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sgd_fits_a_tiny_problem() {
        let mut net = Mlp::new(&spec(false), 7).unwrap();
        let data = [
            ([1.0, 0.0, 0.0, 0.0], 0),
            ([0.0, 1.0, 0.0, 0.0], 1),
            ([0.0, 0.0, 1.0, 1.0], 2),
        ];
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.2,
            momentum: 0.5,
            weight_decay: 0.0,
        });
        for _ in 0..300 {
            let mut g = Grads::zeros_like(&net);
            for (x, y) in &data {
                let t = net.forward_trace(x).unwrap();
                let (_, gl) = cross_entropy_grad(t.logits(), *y).unwrap();
                net.backward(&t, &gl, Some(&mut g));
            }
            g.scale(1.0 / 3.0);
            opt.step(&mut net, &g);
        }
        for (x, y) in &data {
            let z = net.forward(x).unwrap();
            let arg = (0..3).max_by(|&a, &b| z[a].total_cmp(&z[b])).unwrap();
            assert_eq!(arg, *y);
        }
    }

    proptest! {
        #[test]
        fn gradients_match_finite_differences(
            x in proptest::collection::vec(-2.0f64..2.0, 4),
            seed in 0u64..1000,
            target in 0usize..3,
        ) {
            let net = Mlp::new(&spec(false), seed).unwrap();
            let trace = net.forward_trace(&x).unwrap();
            // Finite differences are meaningless across a ReLU kink.
            prop_assume!(trace.pre.iter().flatten().all(|z| z.abs() > 1e-4));
            let (_, gl) = cross_entropy_grad(trace.logits(), target).unwrap();
            let mut grads = Grads::zeros_like(&net);
            let gx = net.backward(&trace, &gl, Some(&mut grads));
            let loss = |n: &Mlp, x: &[f64]| cross_entropy_grad(&n.forward(x).unwrap(), target).unwrap().0;
            let h = 1e-6;
            for d in 0..4 {
                let mut xp = x.clone();
                xp[d] += h;
                let mut xm = x.clone();
                xm[d] -= h;
                let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
                prop_assert!((fd - gx[d]).abs() <= 1e-5 * (1.0 + fd.abs()));
            }
            let p = net.params();
            let flat: Vec<f64> = grads.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias).copied()).collect();
            for k in (0..p.len()).step_by(7) {
                let mut up = net.clone();
                let mut pp = p.clone();
                pp[k] += h;
                up.set_params(&pp).unwrap();
                let mut dn = net.clone();
                pp[k] -= 2.0 * h;
                dn.set_params(&pp).unwrap();
                let fd = (loss(&up, &x) - loss(&dn, &x)) / (2.0 * h);
                prop_assert!((fd - flat[k]).abs() <= 1e-5 * (1.0 + fd.abs()));
            }
        }
    }
}
