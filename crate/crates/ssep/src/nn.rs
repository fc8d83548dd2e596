//! Minimal dense feedforward networks in f64: batched forward pass,
//! backpropagation to parameters and to inputs, and Adam. Enough for the
//! 2x128-unit actor/critic networks; nothing more.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("network needs at least 2 layers with positive widths")]
    InvalidShapeSpec,
    #[error("input length {got} does not match first layer width {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("cache does not match this network (stale or from another net)")]
    StaleCache,
    #[error("gradient shapes do not match network parameters")]
    GradientShape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Linear => {}
        }
    }

    /// Derivative evaluated from the pre-activation value.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Linear => 1.0,
        }
    }
}

/// Fully connected network. `weights[l]` has shape (in_l, out_l) so a batch
/// of rows maps through `a_l = act(a_{l-1} . W_l + b_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

/// Per-layer pre-activations and layer inputs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// inputs[l] is the input to layer l (inputs[0] is the network input).
    inputs: Vec<Array2<f64>>,
    /// pre[l] is z_l before the activation of layer l.
    pre: Vec<Array2<f64>>,
}

/// Parameter gradients with the same shapes as the owning network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            *w *= factor;
        }
        for b in &mut self.biases {
            *b *= factor;
        }
    }

    pub fn norm(&self) -> f64 {
        let mut sq = 0.0;
        for w in &self.weights {
            sq += w.iter().map(|v| v * v).sum::<f64>();
        }
        for b in &self.biases {
            sq += b.iter().map(|v| v * v).sum::<f64>();
        }
        sq.sqrt()
    }

    fn matches(&self, net: &DenseNet) -> bool {
        self.weights.len() == net.weights.len()
            && self.biases.len() == net.biases.len()
            && self
                .weights
                .iter()
                .zip(&net.weights)
                .all(|(g, w)| g.dim() == w.dim())
            && self
                .biases
                .iter()
                .zip(&net.biases)
                .all(|(g, b)| g.len() == b.len())
    }
}

impl DenseNet {
    /// Fan-in scaled uniform weights, zero biases. Deterministic per rng.
    pub fn init<R: Rng + ?Sized>(
        layer_sizes: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(NnError::InvalidShapeSpec);
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| dist.sample(rng));
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            hidden_activation,
            output_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    fn activation_of(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Batched forward pass; rows of `input` are samples.
    pub fn forward_batch(&self, input: &Array2<f64>) -> Result<(Array2<f64>, ForwardCache), NnError> {
        if input.ncols() != self.input_dim() {
            return Err(NnError::InputDim {
                expected: self.input_dim(),
                got: input.ncols(),
            });
        }
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut a = input.clone();
        for l in 0..self.num_layers() {
            inputs.push(a.clone());
            let mut z = a.dot(&self.weights[l]) + &self.biases[l];
            pre.push(z.clone());
            self.activation_of(l).apply(&mut z);
            a = z;
        }
        Ok((a, ForwardCache { inputs, pre }))
    }

    /// Single-sample forward.
    pub fn forward(&self, input: ArrayView1<f64>) -> Result<(Array1<f64>, ForwardCache), NnError> {
        let row = input
            .to_owned()
            .into_shape_with_order((1, input.len()))
            .expect("row reshape");
        let (out, cache) = self.forward_batch(&row)?;
        Ok((out.row(0).to_owned(), cache))
    }

    /// Output of the network without keeping the cache.
    pub fn infer(&self, input: ArrayView1<f64>) -> Result<Array1<f64>, NnError> {
        self.forward(input).map(|(out, _)| out)
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<(), NnError> {
        if cache.inputs.len() != self.num_layers() || cache.pre.len() != self.num_layers() {
            return Err(NnError::StaleCache);
        }
        for l in 0..self.num_layers() {
            if cache.inputs[l].ncols() != self.weights[l].nrows()
                || cache.pre[l].ncols() != self.weights[l].ncols()
                || cache.inputs[l].nrows() != cache.pre[l].nrows()
            {
                return Err(NnError::StaleCache);
            }
        }
        Ok(())
    }

    /// Backprop the deltas down to (and including) layer `stop`, returning
    /// the per-sample delta at layer `stop`'s input.
    fn deltas(
        &self,
        cache: &ForwardCache,
        output_grad: &Array2<f64>,
        mut sink: impl FnMut(usize, &Array2<f64>, &Array2<f64>),
    ) -> Array2<f64> {
        let last = self.num_layers() - 1;
        let mut delta = output_grad.clone();
        for l in (0..=last).rev() {
            let act = self.activation_of(l);
            ndarray::Zip::from(&mut delta)
                .and(&cache.pre[l])
                .for_each(|d, &z| *d *= act.derivative(z));
            sink(l, &cache.inputs[l], &delta);
            delta = delta.dot(&self.weights[l].t());
        }
        delta
    }

    /// Gradient of sum_n (output_grad_n . output_n) w.r.t. every parameter.
    pub fn backward_params_batch(
        &self,
        cache: &ForwardCache,
        output_grad: &Array2<f64>,
    ) -> Result<Gradients, NnError> {
        self.check_cache(cache)?;
        if output_grad.dim() != cache.pre[self.num_layers() - 1].dim() {
            return Err(NnError::GradientShape);
        }
        let mut grads = Gradients::zeros_like(self);
        self.deltas(cache, output_grad, |l, layer_in, delta| {
            grads.weights[l] = layer_in.t().dot(delta);
            grads.biases[l] = delta.sum_axis(Axis(0));
        });
        Ok(grads)
    }

    pub fn backward_params(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView1<f64>,
    ) -> Result<Gradients, NnError> {
        let row = output_grad
            .to_owned()
            .into_shape_with_order((1, output_grad.len()))
            .expect("row reshape");
        self.backward_params_batch(cache, &row)
    }

    /// Gradient of sum_n (output_grad_n . output_n) w.r.t. the inputs;
    /// one row per sample.
    pub fn backward_input_batch(
        &self,
        cache: &ForwardCache,
        output_grad: &Array2<f64>,
    ) -> Result<Array2<f64>, NnError> {
        self.check_cache(cache)?;
        if output_grad.dim() != cache.pre[self.num_layers() - 1].dim() {
            return Err(NnError::GradientShape);
        }
        Ok(self.deltas(cache, output_grad, |_, _, _| {}))
    }

    pub fn backward_input(
        &self,
        cache: &ForwardCache,
        output_grad: ArrayView1<f64>,
    ) -> Result<Array1<f64>, NnError> {
        let row = output_grad
            .to_owned()
            .into_shape_with_order((1, output_grad.len()))
            .expect("row reshape");
        let g = self.backward_input_batch(cache, &row)?;
        Ok(g.row(0).to_owned())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(net: &DenseNet, learning_rate: f64) -> Self {
        Self {
            step_count: 0,
            first_moment: Gradients::zeros_like(net),
            second_moment: Gradients::zeros_like(net),
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam step on `net` along `grads` (a descent step; negate the gradient
/// for ascent).
pub fn adam_step(net: &mut DenseNet, grads: &Gradients, opt: &mut AdamState) -> Result<(), NnError> {
    if !grads.matches(net) || !opt.first_moment.matches(net) {
        return Err(NnError::GradientShape);
    }
    opt.step_count += 1;
    let t = opt.step_count as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let lr = opt.learning_rate;
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.epsilon);

    let mut update = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *param -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for l in 0..net.weights.len() {
        ndarray::Zip::from(&mut net.weights[l])
            .and(&grads.weights[l])
            .and(&mut opt.first_moment.weights[l])
            .and(&mut opt.second_moment.weights[l])
            .for_each(|p, &g, m, v| update(p, g, m, v));
        ndarray::Zip::from(&mut net.biases[l])
            .and(&grads.biases[l])
            .and(&mut opt.first_moment.biases[l])
            .and(&mut opt.second_moment.biases[l])
            .for_each(|p, &g, m, v| update(p, g, m, v));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// 1-1-1 net with the given weights, zero biases.
    fn tiny(w1: f64, w2: f64, hidden: Activation, output: Activation) -> DenseNet {
        DenseNet {
            layer_sizes: vec![1, 1, 1],
            weights: vec![array![[w1]], array![[w2]]],
            biases: vec![array![0.0], array![0.0]],
            hidden_activation: hidden,
            output_activation: output,
        }
    }

    fn random_net(rng: &mut ChaCha8Rng) -> (DenseNet, Array1<f64>) {
        let depth = rng.gen_range(2..=4);
        let mut sizes = vec![rng.gen_range(1..=8)];
        for _ in 0..depth {
            sizes.push(rng.gen_range(1..=8));
        }
        let output = if rng.gen_bool(0.5) {
            Activation::Tanh
        } else {
            Activation::Linear
        };
        let mut net = DenseNet::init(&sizes, Activation::Relu, output, rng).unwrap();
        // Random biases so the bias gradient path is exercised too.
        for b in &mut net.biases {
            b.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
        }
        let input = Array1::from_shape_fn(sizes[0], |_| rng.gen_range(-1.0..1.0));
        (net, input)
    }

    /// Central finite differences of g . f(x) w.r.t. a single scalar slot.
    fn fd_loss(net: &DenseNet, input: &Array1<f64>, g: &Array1<f64>) -> f64 {
        let out = net.infer(input.view()).unwrap();
        g.dot(&out)
    }

    #[test]
    fn init_deterministic_and_zero_biased() {
        let sizes = [2, 128, 128, 1];
        let a = DenseNet::init(
            &sizes,
            Activation::Relu,
            Activation::Tanh,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let b = DenseNet::init(
            &sizes,
            Activation::Relu,
            Activation::Tanh,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));

        let critic = DenseNet::init(
            &[3, 128, 128, 1],
            Activation::Relu,
            Activation::Linear,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(critic.weights[0].dim(), (3, 128));
        assert_eq!(critic.weights[2].dim(), (128, 1));
    }

    #[test]
    fn init_rejects_bad_spec() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(DenseNet::init(&[2], Activation::Relu, Activation::Linear, &mut rng).is_err());
        assert!(DenseNet::init(&[2, 0, 1], Activation::Relu, Activation::Linear, &mut rng).is_err());
    }

    #[test]
    fn forward_hand_cases() {
        // tanh(0) = 0 through zeroed parameters.
        let mut zero = tiny(0.0, 0.0, Activation::Relu, Activation::Tanh);
        zero.weights[0][[0, 0]] = 0.0;
        let (out, _) = zero.forward(array![0.7].view()).unwrap();
        assert_eq!(out[0], 0.0);

        // Rectifier clamps a negative input to zero.
        let net = tiny(1.0, 1.0, Activation::Relu, Activation::Linear);
        let (out, _) = net.forward(array![-3.0].view()).unwrap();
        assert_eq!(out[0], 0.0);

        let (out, _) = net.forward(array![2.0].view()).unwrap();
        assert_eq!(out[0], 2.0);

        assert!(net.forward(array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn backward_hand_chain_rule() {
        let net = tiny(1.0, 1.0, Activation::Relu, Activation::Linear);
        let (_, cache) = net.forward(array![2.0].view()).unwrap();
        let grads = net.backward_params(&cache, array![1.0].view()).unwrap();
        assert_eq!(grads.weights[1][[0, 0]], 2.0);
        assert_eq!(grads.weights[0][[0, 0]], 2.0);

        let zeros = net.backward_params(&cache, array![0.0].view()).unwrap();
        assert!(zeros.norm() == 0.0);

        let net = tiny(3.0, 2.0, Activation::Relu, Activation::Linear);
        let (_, cache) = net.forward(array![1.0].view()).unwrap();
        let gin = net.backward_input(&cache, array![1.0].view()).unwrap();
        assert_eq!(gin[0], 6.0);
    }

    #[test]
    fn backward_input_disconnected() {
        let mut net = tiny(1.0, 2.0, Activation::Relu, Activation::Linear);
        net.weights[0].fill(0.0);
        let (_, cache) = net.forward(array![1.5].view()).unwrap();
        let gin = net.backward_input(&cache, array![1.0].view()).unwrap();
        assert_eq!(gin[0], 0.0);
    }

    #[test]
    fn stale_cache_rejected() {
        let net = tiny(1.0, 1.0, Activation::Relu, Activation::Linear);
        let other = DenseNet::init(
            &[2, 3, 1],
            Activation::Relu,
            Activation::Linear,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let (_, cache) = other.forward(array![1.0, 2.0].view()).unwrap();
        assert!(net.backward_params(&cache, array![1.0].view()).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let h = 1e-5;
        for _ in 0..100 {
            let (net, input) = random_net(&mut rng);
            let g = Array1::from_shape_fn(net.output_dim(), |_| rng.gen_range(-1.0..1.0));
            let (_, cache) = net.forward(input.view()).unwrap();
            let grads = net.backward_params(&cache, g.view()).unwrap();
            let gin = net.backward_input(&cache, g.view()).unwrap();

            // Parameter gradients: check a handful of random slots per net.
            for _ in 0..10 {
                let l = rng.gen_range(0..net.num_layers());
                let (rows, cols) = net.weights[l].dim();
                let (i, j) = (rng.gen_range(0..rows), rng.gen_range(0..cols));
                let mut plus = net.clone();
                plus.weights[l][[i, j]] += h;
                let mut minus = net.clone();
                minus.weights[l][[i, j]] -= h;
                let fd = (fd_loss(&plus, &input, &g) - fd_loss(&minus, &input, &g)) / (2.0 * h);
                let an = grads.weights[l][[i, j]];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "weight grad mismatch: analytic {an}, fd {fd}"
                );
            }

            // Input gradient, every slot.
            for i in 0..input.len() {
                let mut plus = input.clone();
                plus[i] += h;
                let mut minus = input.clone();
                minus[i] -= h;
                let fd = (fd_loss(&net, &plus, &g) - fd_loss(&net, &minus, &g)) / (2.0 * h);
                let an = gin[i];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "input grad mismatch: analytic {an}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn tanh_output_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = DenseNet::init(
            &[2, 16, 1],
            Activation::Relu,
            Activation::Tanh,
            &mut rng,
        )
        .unwrap();
        for _ in 0..200 {
            let x = Array1::from_shape_fn(2, |_| rng.gen_range(-10.0..10.0));
            let out = net.infer(x.view()).unwrap();
            assert!(out[0] > -1.0 && out[0] < 1.0);
        }
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut net = tiny(1.0, 1.0, Activation::Relu, Activation::Linear);
        let mut opt = AdamState::new(&net, 0.01);
        let mut grads = Gradients::zeros_like(&net);
        grads.weights[0][[0, 0]] = 0.37;
        let before = net.weights[0][[0, 0]];
        adam_step(&mut net, &grads, &mut opt).unwrap();
        // First bias-corrected step is -lr * g/|g| up to epsilon.
        assert!((net.weights[0][[0, 0]] - (before - 0.01)).abs() < 1e-6);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn adam_zero_gradient_no_move() {
        let mut net = tiny(1.0, 1.0, Activation::Relu, Activation::Linear);
        let mut opt = AdamState::new(&net, 0.01);
        let snapshot = net.clone();
        adam_step(&mut net, &Gradients::zeros_like(&net), &mut opt).unwrap();
        assert_eq!(net, snapshot);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut net = tiny(1.0, 1.0, Activation::Relu, Activation::Linear);
        let other = DenseNet::init(
            &[2, 3, 1],
            Activation::Relu,
            Activation::Linear,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let mut opt = AdamState::new(&net, 0.01);
        assert!(adam_step(&mut net, &Gradients::zeros_like(&other), &mut opt).is_err());
    }

    #[test]
    fn adam_stays_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = DenseNet::init(
            &[2, 8, 1],
            Activation::Relu,
            Activation::Linear,
            &mut rng,
        )
        .unwrap();
        let mut opt = AdamState::new(&net, 0.1);
        for _ in 0..200 {
            let x = Array1::from_shape_fn(2, |_| rng.gen_range(-2.0..2.0));
            let (_, cache) = net.forward(x.view()).unwrap();
            let grads = net
                .backward_params(&cache, array![rng.gen_range(-100.0..100.0)].view())
                .unwrap();
            adam_step(&mut net, &grads, &mut opt).unwrap();
        }
        assert!(net.is_finite());
    }
}
