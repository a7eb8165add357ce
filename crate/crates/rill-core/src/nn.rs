//! Multi-head MLP classifiers, optimizers and learning-rate schedules.
//!
//! The model is a ReLU MLP trunk with one linear softmax head per labelled
//! attribute.  Parameters live outside the tape; each training step places
//! them as matrix leaves, so gradients come back through the leaf handles
//! in the canonical parameter order ([`Mlp::param_count`] entries: trunk
//! weight/bias pairs, then head weight/bias pairs).

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{MatHandle, Matrix, Tape, TapeError};

/// One classification head: a name for reporting and its class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadSpec {
    pub name: String,
    pub classes: usize,
}

impl HeadSpec {
    pub fn new(name: &str, classes: usize) -> Self {
        HeadSpec {
            name: String::from(name),
            classes,
        }
    }
}

/// Architecture of the classifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub heads: Vec<HeadSpec>,
}

impl MlpSpec {
    /// # Panics
    ///
    /// Panics on an empty hidden stack, empty head list, or a zero width
    /// anywhere.
    pub fn new(input_dim: usize, hidden: Vec<usize>, heads: Vec<HeadSpec>) -> Self {
        assert!(input_dim > 0, "input dimension must be positive");
        assert!(!hidden.is_empty(), "need at least one hidden layer");
        assert!(hidden.iter().all(|&w| w > 0), "hidden widths must be positive");
        assert!(!heads.is_empty(), "need at least one head");
        assert!(heads.iter().all(|h| h.classes >= 2), "heads need >= 2 classes");
        MlpSpec {
            input_dim,
            hidden,
            heads,
        }
    }
}

/// A trained or training model: trunk layers plus per-head linear layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    trunk: Vec<(Matrix, Matrix)>,
    heads: Vec<(Matrix, Matrix)>,
}

/// Handles of one recorded forward pass.
pub struct ForwardPass {
    /// Parameter leaves in canonical order.
    pub params: Vec<MatHandle>,
    /// Softmax probability rows, one matrix per head.
    pub head_probs: Vec<MatHandle>,
}

impl Mlp {
    /// Fan-in-scaled uniform initialisation, `U(-sqrt(6/fan_in),
    /// sqrt(6/fan_in))`, biases zero, deterministic per seed.
    pub fn init(spec: MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Vec::with_capacity(spec.hidden.len());
        let mut fan_in = spec.input_dim;
        for &width in &spec.hidden {
            trunk.push(Self::layer(&mut rng, fan_in, width));
            fan_in = width;
        }
        let heads = spec
            .heads
            .iter()
            .map(|h| Self::layer(&mut rng, fan_in, h.classes))
            .collect();
        Mlp { spec, trunk, heads }
    }

    fn layer(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> (Matrix, Matrix) {
        let limit = libm::sqrt(6.0 / fan_in as f64);
        let mut w = Matrix::zeros(fan_in, fan_out);
        for v in w.data_mut() {
            *v = rng.gen_range(-limit..limit);
        }
        (w, Matrix::zeros(1, fan_out))
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Number of parameter matrices (each trunk/head layer contributes a
    /// weight and a bias).
    pub fn param_count(&self) -> usize {
        2 * (self.trunk.len() + self.heads.len())
    }

    /// Parameters in canonical order.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in &self.trunk {
            out.push(w);
            out.push(b);
        }
        for (w, b) in &self.heads {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(2 * (self.trunk.len() + self.heads.len()));
        for (w, b) in &mut self.trunk {
            out.push(w);
            out.push(b);
        }
        for (w, b) in &mut self.heads {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Records the full forward pass; `inputs` is one sample per row.
    pub fn forward(&self, tape: &mut Tape, inputs: &Matrix) -> Result<ForwardPass, TapeError> {
        if inputs.cols() != self.spec.input_dim {
            return Err(TapeError::Shape {
                op: "forward",
                detail: alloc::format!(
                    "input width {} does not match model input {}",
                    inputs.cols(),
                    self.spec.input_dim
                ),
            });
        }
        let mut params = Vec::with_capacity(self.param_count());
        let mut h = tape.matrix_leaf(inputs.clone());
        for (w, b) in &self.trunk {
            let wh = tape.matrix_leaf(w.clone());
            let bh = tape.matrix_leaf(b.clone());
            params.push(wh);
            params.push(bh);
            let z = tape.matmul(h, wh)?;
            let z = tape.add_row_bias(z, bh)?;
            h = tape.relu_mat(z);
        }
        let mut head_probs = Vec::with_capacity(self.heads.len());
        for (w, b) in &self.heads {
            let wh = tape.matrix_leaf(w.clone());
            let bh = tape.matrix_leaf(b.clone());
            params.push(wh);
            params.push(bh);
            let z = tape.matmul(h, wh)?;
            let z = tape.add_row_bias(z, bh)?;
            head_probs.push(tape.softmax_rows(z));
        }
        Ok(ForwardPass { params, head_probs })
    }

    /// Forward pass without recording; used for evaluation.  Performs the
    /// same float operations in the same order as [`Mlp::forward`], so the
    /// probabilities agree bit for bit.
    pub fn forward_plain(&self, inputs: &Matrix) -> Vec<Matrix> {
        assert_eq!(inputs.cols(), self.spec.input_dim, "input width mismatch");
        let mut h = inputs.clone();
        for (w, b) in &self.trunk {
            h = h.matmul(w).add_row_bias(b).relu();
        }
        self.heads
            .iter()
            .map(|(w, b)| h.matmul(w).add_row_bias(b).softmax_rows())
            .collect()
    }
}

/// Optimizer family and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerSpec {
    /// Adam with decoupled weight decay (applied to the parameters, not the
    /// gradients).
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    MomentumSgd { lr: f64, momentum: f64 },
}

impl OptimizerSpec {
    /// AdamW with the usual moment coefficients.
    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!(weight_decay >= 0.0, "weight decay must be non-negative");
        OptimizerSpec::AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn momentum_sgd(lr: f64, momentum: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must lie in [0, 1)");
        OptimizerSpec::MomentumSgd { lr, momentum }
    }
}

/// Optimizer state over a fixed parameter list.
pub struct Optimizer {
    spec: OptimizerSpec,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec) -> Self {
        Optimizer {
            spec,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    /// One update over the canonical parameter list.  `lr_scale` comes from
    /// the schedule.
    ///
    /// # Panics
    ///
    /// Panics when the gradient list does not match the parameters.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&[f64]], lr_scale: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| alloc::vec![0.0; p.data().len()]).collect();
            if matches!(self.spec, OptimizerSpec::AdamW { .. }) {
                self.second = self.first.clone();
            }
        }
        self.step += 1;
        match self.spec {
            OptimizerSpec::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let lr = lr * lr_scale;
                let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
                let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads.iter())
                    .zip(self.first.iter_mut().zip(self.second.iter_mut()))
                {
                    let data = p.data_mut();
                    for i in 0..data.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        data[i] -= lr * mhat / (libm::sqrt(vhat) + eps);
                        data[i] -= lr * weight_decay * data[i];
                    }
                }
            }
            OptimizerSpec::MomentumSgd { lr, momentum } => {
                let lr = lr * lr_scale;
                for ((p, g), vel) in params.iter_mut().zip(grads.iter()).zip(self.first.iter_mut())
                {
                    let data = p.data_mut();
                    for i in 0..data.len() {
                        vel[i] = momentum * vel[i] + g[i];
                        data[i] -= lr * vel[i];
                    }
                }
            }
        }
    }
}

/// Learning-rate schedule, as a per-epoch multiplier on the base rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleSpec {
    StepDecay { decay_rate: f64, decay_step: usize },
    StepWithWarmup {
        decay_rate: f64,
        decay_step: usize,
        warmup_epochs: usize,
    },
}

impl ScheduleSpec {
    pub fn step_decay(decay_rate: f64, decay_step: usize) -> Self {
        assert!(decay_rate > 0.0 && decay_rate <= 1.0, "decay rate in (0, 1]");
        assert!(decay_step >= 1, "decay step must be >= 1");
        ScheduleSpec::StepDecay {
            decay_rate,
            decay_step,
        }
    }

    pub fn step_with_warmup(decay_rate: f64, decay_step: usize, warmup_epochs: usize) -> Self {
        assert!(decay_rate > 0.0 && decay_rate <= 1.0, "decay rate in (0, 1]");
        assert!(decay_step >= 1, "decay step must be >= 1");
        ScheduleSpec::StepWithWarmup {
            decay_rate,
            decay_step,
            warmup_epochs,
        }
    }

    /// Multiplier for `epoch` (0-based).  Warmup ramps linearly over the
    /// first `warmup_epochs` epochs, then the step decay restarts from the
    /// end of the ramp.
    pub fn lr_factor(&self, epoch: usize) -> f64 {
        match *self {
            ScheduleSpec::StepDecay {
                decay_rate,
                decay_step,
            } => libm::pow(decay_rate, (epoch / decay_step) as f64),
            ScheduleSpec::StepWithWarmup {
                decay_rate,
                decay_step,
                warmup_epochs,
            } => {
                if epoch < warmup_epochs {
                    (epoch + 1) as f64 / warmup_epochs as f64
                } else {
                    libm::pow(decay_rate, ((epoch - warmup_epochs) / decay_step) as f64)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn two_head_spec() -> MlpSpec {
        MlpSpec::new(
            3,
            vec![8],
            vec![HeadSpec::new("shape", 4), HeadSpec::new("colour", 4)],
        )
    }

    #[test]
    fn zero_weights_give_uniform_rows() {
        let spec = two_head_spec();
        let mut model = Mlp::init(spec, 0);
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v = 0.0;
            }
        }
        let x = Matrix::from_data(2, 3, vec![0.5, -1.0, 2.0, 0.0, 0.3, -0.7]);
        let probs = model.forward_plain(&x);
        assert_eq!(probs.len(), 2);
        for head in &probs {
            assert_eq!((head.rows(), head.cols()), (2, 4));
            for &p in head.data() {
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_and_plain_forward_agree_bitwise() {
        let model = Mlp::init(two_head_spec(), 42);
        let x = Matrix::from_data(3, 3, vec![0.1, 0.9, -0.4, 1.2, -0.8, 0.05, 0.6, 0.6, 0.6]);
        let plain = model.forward_plain(&x);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &x).unwrap();
        for (ph, pm) in pass.head_probs.iter().zip(plain.iter()) {
            let recorded = tape.matrix(*ph);
            for (a, b) in recorded.data().iter().zip(pm.data().iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let model = Mlp::init(two_head_spec(), 7);
        let x = Matrix::from_data(5, 3, (0..15).map(|i| (i as f64) / 7.0 - 1.0).collect());
        for head in model.forward_plain(&x) {
            for r in 0..head.rows() {
                let s: f64 = head.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row sums to {s}");
            }
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = Mlp::init(two_head_spec(), 2020);
        let b = Mlp::init(two_head_spec(), 2020);
        let c = Mlp::init(two_head_spec(), 2021);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn adamw_minimises_a_quadratic() {
        // minimise (w - 3)^2 elementwise via gradients 2(w - 3)
        let mut w = Matrix::from_data(1, 2, vec![0.0, 10.0]);
        let mut opt = Optimizer::new(OptimizerSpec::adamw(0.1, 0.0));
        for _ in 0..500 {
            let g: Vec<f64> = w.data().iter().map(|&v| 2.0 * (v - 3.0)).collect();
            opt.step(&mut [&mut w], &[&g], 1.0);
        }
        for &v in w.data() {
            assert!((v - 3.0).abs() < 1e-3, "converged to {v}");
        }
    }

    #[test]
    fn momentum_sgd_minimises_a_quadratic() {
        let mut w = Matrix::from_data(1, 1, vec![5.0]);
        let mut opt = Optimizer::new(OptimizerSpec::momentum_sgd(0.05, 0.9));
        for _ in 0..300 {
            let g: Vec<f64> = w.data().iter().map(|&v| 2.0 * v).collect();
            opt.step(&mut [&mut w], &[&g], 1.0);
        }
        assert!(w.get(0, 0).abs() < 1e-4);
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut w = Matrix::from_data(1, 1, vec![1.0]);
        let mut opt = Optimizer::new(OptimizerSpec::adamw(0.01, 0.1));
        let g = vec![0.0];
        for _ in 0..10 {
            opt.step(&mut [&mut w], &[&g], 1.0);
        }
        assert!(w.get(0, 0) < 1.0 && w.get(0, 0) > 0.98);
    }

    #[test]
    fn schedule_factors() {
        let s = ScheduleSpec::step_decay(0.7, 60);
        assert_eq!(s.lr_factor(0), 1.0);
        assert_eq!(s.lr_factor(59), 1.0);
        assert!((s.lr_factor(60) - 0.7).abs() < 1e-15);
        assert!((s.lr_factor(120) - 0.49).abs() < 1e-15);

        let w = ScheduleSpec::step_with_warmup(0.9, 45, 5);
        assert!((w.lr_factor(0) - 0.2).abs() < 1e-15);
        assert!((w.lr_factor(4) - 1.0).abs() < 1e-15);
        assert_eq!(w.lr_factor(5), 1.0);
        assert!((w.lr_factor(50) - 0.9).abs() < 1e-15);
    }
}
