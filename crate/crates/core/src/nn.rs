//! Minimal dense layers with manual backprop and a decoupled-weight-decay Adam.
//!
//! Everything runs in `f64` on the CPU, serially, so training traces are
//! bitwise reproducible for a fixed seed and data order.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A trainable tensor with its gradient accumulator and optimizer moments.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Param {
    pub value: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    #[serde(skip)]
    m: Vec<f64>,
    #[serde(skip)]
    v: Vec<f64>,
}

impl Param {
    pub fn new(value: Vec<f64>) -> Self {
        let n = value.len();
        Self {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.ensure_buffers();
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Clears optimizer moments, as when a fresh optimizer takes over.
    pub fn reset_moments(&mut self) {
        self.ensure_buffers();
        self.m.iter_mut().for_each(|v| *v = 0.0);
        self.v.iter_mut().for_each(|v| *v = 0.0);
    }

    // Buffers are skipped by serde; restore them lazily after a load.
    fn ensure_buffers(&mut self) {
        let n = self.value.len();
        if self.grad.len() != n {
            self.grad = vec![0.0; n];
        }
        if self.m.len() != n {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` for weights and biases.
    Uniform,
    Zero,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, init: Init, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut sample = |n: usize| -> Vec<f64> {
            match init {
                Init::Uniform => (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                Init::Zero => vec![0.0; n],
            }
        };
        let weight = sample(in_dim * out_dim);
        let bias = sample(out_dim);
        Self {
            in_dim,
            out_dim,
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn from_weights(in_dim: usize, out_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Self {
        assert_eq!(weight.len(), in_dim * out_dim);
        assert_eq!(bias.len(), out_dim);
        Self {
            in_dim,
            out_dim,
            weight: Param::new(weight),
            bias: Param::new(bias),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let w = &self.weight.value;
        (0..self.out_dim)
            .map(|o| {
                let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias.value[o] + dot(row, x)
            })
            .collect()
    }

    /// Accumulates parameter gradients; returns the gradient w.r.t. `x` when
    /// `want_input_grad` is set.
    pub fn backward(&mut self, x: &[f64], grad_out: &[f64], want_input_grad: bool) -> Option<Vec<f64>> {
        self.weight.ensure_buffers();
        self.bias.ensure_buffers();
        let mut grad_in = want_input_grad.then(|| vec![0.0; self.in_dim]);
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.bias.grad[o] += g;
            let offset = o * self.in_dim;
            let grow = &mut self.weight.grad[offset..offset + self.in_dim];
            for (gw, &xi) in grow.iter_mut().zip(x) {
                *gw += g * xi;
            }
            if let Some(gi) = grad_in.as_mut() {
                let row = &self.weight.value[offset..offset + self.in_dim];
                for (gx, &w) in gi.iter_mut().zip(row) {
                    *gx += g * w;
                }
            }
        }
        grad_in
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fully connected stack with ReLU between layers and a linear output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

/// Layer inputs recorded during a forward pass, consumed by `backward`.
pub struct Trace {
    inputs: Vec<Vec<f64>>,
}

impl Mlp {
    /// `widths` includes input and output sizes, e.g. `[256, 512, 128, 1]`.
    pub fn new<R: Rng>(widths: &[usize], final_init: Init, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i + 1 == n { final_init } else { Init::Uniform };
                Linear::new(w[0], w[1], init, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut widths = vec![self.layers[0].in_dim];
        widths.extend(self.layers.iter().map(|l| l.out_dim));
        widths
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_trace(x).0
    }

    pub fn forward_trace(&self, x: &[f64]) -> (Vec<f64>, Trace) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.forward(&h);
            if i != last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut h, out));
        }
        (h, Trace { inputs })
    }

    pub fn backward(&mut self, trace: &Trace, grad_out: &[f64]) -> Vec<f64> {
        let mut grad = grad_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let input = &trace.inputs[i];
            let gin = self.layers[i]
                .backward(input, &grad, true)
                .expect("input gradient requested");
            grad = gin;
            if i > 0 {
                // ReLU derivative w.r.t. this layer's input (the previous output).
                for (g, &a) in grad.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
        }
        grad
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// Adam with decoupled weight decay, PyTorch defaults apart from `lr`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update; gradients are divided by `grad_scale` (the batch size)
    /// and then cleared.
    pub fn step(&mut self, params: Vec<&mut Param>, grad_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params {
            p.ensure_buffers();
            for i in 0..p.value.len() {
                let g = p.grad[i] / grad_scale;
                p.value[i] -= self.lr * self.weight_decay * p.value[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                p.grad[i] = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(mlp: &Mlp, x: &[f64]) -> f64 {
        let y = mlp.forward(x);
        y.iter().map(|v| v * v).sum::<f64>() * 0.5
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(&[4, 6, 3, 2], Init::Uniform, &mut rng);
        let x = [0.3, -0.7, 0.2, 0.9];
        let (y, trace) = mlp.forward_trace(&x);
        let gin = mlp.backward(&trace, &y);

        let h = 1e-6;
        for l in 0..mlp.layers.len() {
            for i in 0..mlp.layers[l].weight.value.len() {
                let analytic = mlp.layers[l].weight.grad[i];
                let orig = mlp.layers[l].weight.value[i];
                mlp.layers[l].weight.value[i] = orig + h;
                let up = loss(&mlp, &x);
                mlp.layers[l].weight.value[i] = orig - h;
                let down = loss(&mlp, &x);
                mlp.layers[l].weight.value[i] = orig;
                let numeric = (up - down) / (2.0 * h);
                assert!((analytic - numeric).abs() < 1e-6, "layer {l} w{i}: {analytic} vs {numeric}");
            }
        }
        for i in 0..x.len() {
            let mut xp = x;
            xp[i] += h;
            let mut xm = x;
            xm[i] -= h;
            let numeric = (loss(&mlp, &xp) - loss(&mlp, &xm)) / (2.0 * h);
            assert!((gin[i] - numeric).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_final_layer_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[5, 8, 1], Init::Zero, &mut rng);
        assert_eq!(mlp.forward(&[1.0, 2.0, 3.0, 4.0, 5.0]), vec![0.0]);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Param::new(vec![1.0, -1.0]);
        p.grad = vec![0.5, -2.0];
        let mut opt = AdamW::new(0.1);
        opt.weight_decay = 0.0;
        opt.step(vec![&mut p], 1.0);
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 0.9).abs() < 1e-6);
        assert_eq!(p.grad, vec![0.0, 0.0]);
    }
}
