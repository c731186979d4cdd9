//! Generator and per-arm discriminator networks.
//!
//! The generator maps isotropic Gaussian noise to synthetic feature rows.
//! Each discriminator produces an unbounded scalar critic value `v` per row;
//! the output transform `t = -2 + softplus(v)` keeps the critic inside the
//! domain where `t/2 + 1` is a valid (nonnegative) likelihood ratio.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tape::{softplus_scalar, NodeId, Tape};
use crate::tensor::Tensor;

/// Layer widths of a fully connected network with tanh hidden activations
/// and a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpConfig {
    pub widths: Vec<usize>,
}

impl MlpConfig {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::InvalidArgument(
                "MlpConfig needs at least one hidden layer (>= 3 widths)".into(),
            ));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("MlpConfig widths must be positive".into()));
        }
        Ok(MlpConfig { widths })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }
}

/// Dense parameters of one MLP: weight matrices and bias vectors per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub config: MlpConfig,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

/// Glorot-normal initialization: N(0, 2/(fan_in + fan_out)) weights, zero biases.
pub fn init_params(config: &MlpConfig, seed: u64) -> Mlp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for pair in config.widths.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let scale = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        weights.push(Tensor::matrix(fan_in, fan_out, data).expect("sized buffer"));
        biases.push(Tensor::vector(vec![0.0; fan_out]));
    }
    Mlp { config: config.clone(), weights, biases }
}

/// Parameter node ids of one MLP registered on a tape, interleaved as
/// (weight, bias) per layer.
pub struct MlpParams {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl Mlp {
    /// Registers all parameters on the tape as gradient-receiving leaves.
    pub fn register(&self, tape: &mut Tape) -> MlpParams {
        MlpParams {
            weights: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.param(b.clone())).collect(),
        }
    }

    /// tanh hidden layers, linear output.
    pub fn forward(&self, tape: &mut Tape, params: &MlpParams, input: NodeId) -> Result<NodeId> {
        let n_layers = self.weights.len();
        let mut h = input;
        for l in 0..n_layers {
            let z = tape.matmul(h, params.weights[l])?;
            let z = tape.add_bias(z, params.biases[l])?;
            h = if l + 1 < n_layers { tape.tanh(z)? } else { z };
        }
        Ok(h)
    }

    /// Forward pass without gradient tracking.
    pub fn eval(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let params = MlpParams {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        };
        let out = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(out).clone())
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().chain(self.biases.iter_mut()).collect()
    }
}

/// The generator G_theta: noise rows -> synthetic feature rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub net: Mlp,
}

impl Generator {
    pub fn new(noise_dim: usize, hidden: &[usize], feature_dim: usize, seed: u64) -> Result<Self> {
        let mut widths = vec![noise_dim];
        widths.extend_from_slice(hidden);
        widths.push(feature_dim);
        Ok(Generator { net: init_params(&MlpConfig::new(widths)?, seed) })
    }

    pub fn noise_dim(&self) -> usize {
        self.net.config.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.config.output_dim()
    }

    pub fn forward(&self, tape: &mut Tape, params: &MlpParams, z: NodeId) -> Result<NodeId> {
        let (_, cols) = tape.value(z).dims2()?;
        if cols != self.noise_dim() {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                details: format!("noise dim {} expected, got {}", self.noise_dim(), cols),
            });
        }
        self.net.forward(tape, params, z)
    }

    /// Synthetic rows for a noise batch, no gradient tracking.
    pub fn sample(&self, z: &Tensor) -> Result<Tensor> {
        let (_, cols) = z.dims2()?;
        if cols != self.noise_dim() {
            return Err(Error::ShapeMismatch {
                op: "generator_sample",
                details: format!("noise dim {} expected, got {}", self.noise_dim(), cols),
            });
        }
        self.net.eval(z)
    }
}

/// Draws an M x noise_dim batch from the isotropic standard Gaussian prior.
pub fn sample_noise(rng: &mut ChaCha8Rng, batch: usize, noise_dim: usize) -> Tensor {
    let data: Vec<f64> = (0..batch * noise_dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(batch, noise_dim, data).expect("sized buffer")
}

/// One arm's critic V_omega with its re-centering shift vector c.
///
/// Every input row (real or generated) is shifted to `x - c` before the
/// network sees it, so re-centering moves the critic's view onto the
/// current generator distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub net: Mlp,
    pub shift: Vec<f64>,
}

impl Discriminator {
    pub fn new(feature_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut widths = vec![feature_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(Discriminator {
            net: init_params(&MlpConfig::new(widths)?, seed),
            shift: vec![0.0; feature_dim],
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.net.config.input_dim()
    }

    /// Sets the re-centering shift to the given generator batch mean.
    pub fn set_recenter_shift(&mut self, generator_batch_mean: &[f64]) -> Result<()> {
        if generator_batch_mean.len() != self.feature_dim() {
            return Err(Error::ShapeMismatch {
                op: "set_recenter_shift",
                details: format!(
                    "shift length {} expected, got {}",
                    self.feature_dim(),
                    generator_batch_mean.len()
                ),
            });
        }
        self.shift.copy_from_slice(generator_batch_mean);
        Ok(())
    }

    fn shifted(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = x.dims2()?;
        if cols != self.feature_dim() {
            return Err(Error::ShapeMismatch {
                op: "discriminator_raw",
                details: format!("feature dim {} expected, got {}", self.feature_dim(), cols),
            });
        }
        let mut out = x.clone();
        for r in 0..rows {
            for c in 0..cols {
                out.data_mut()[r * cols + c] -= self.shift[c];
            }
        }
        Ok(out)
    }

    /// Raw critic values `v` per row (an [n, 1] column), gradient-tracked.
    /// The shift is applied to the tensor before it enters the tape; it is
    /// a constant w.r.t. both parameter sets.
    pub fn forward_data(&self, tape: &mut Tape, params: &MlpParams, x: &Tensor) -> Result<NodeId> {
        let shifted = self.shifted(x)?;
        let input = tape.leaf(shifted);
        self.net.forward(tape, params, input)
    }

    /// Critic values for an in-graph input (generator output). The shift is
    /// subtracted via a constant leaf so generator gradients flow through.
    pub fn forward_node(&self, tape: &mut Tape, params: &MlpParams, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = tape.value(x).dims2()?;
        if cols != self.feature_dim() {
            return Err(Error::ShapeMismatch {
                op: "discriminator_raw",
                details: format!("feature dim {} expected, got {}", self.feature_dim(), cols),
            });
        }
        let mut neg = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            neg.extend(self.shift.iter().map(|s| -s));
        }
        let neg_shift = tape.leaf(Tensor::matrix(rows, cols, neg)?);
        let shifted = tape.add(x, neg_shift)?;
        self.net.forward(tape, params, shifted)
    }

    /// Raw critic values without gradient tracking.
    pub fn raw(&self, x: &Tensor) -> Result<Vec<f64>> {
        let shifted = self.shifted(x)?;
        let out = self.net.eval(&shifted)?;
        Ok(out.data().to_vec())
    }
}

/// The chi-squared output transform t = g_f(v) = -2 + softplus(v).
///
/// t >= -2 for all finite v (exactly -2 only when softplus underflows below
/// half an ulp of 2), so the implied ratio t/2 + 1 is nonnegative.
pub fn gf_transform(v: f64) -> f64 {
    -2.0 + softplus_scalar(v)
}

/// In-graph g_f: shifts softplus(v) down by 2.
pub fn gf_node(tape: &mut Tape, v: NodeId) -> Result<NodeId> {
    let sp = tape.softplus(v)?;
    let t = tape.value(sp);
    let minus_two = Tensor::new(t.shape().to_vec(), vec![-2.0; t.len()])?;
    let c = tape.leaf(minus_two);
    tape.add(sp, c)
}

/// Joint per-feature mean and standard deviation used to standardize all
/// arms before training. Stored in the checkpoint so weight extraction sees
/// the same coordinates the model was trained in.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl StandardizationStats {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = x.dims2()?;
        if cols != self.mean.len() {
            return Err(Error::ShapeMismatch {
                op: "standardize_apply",
                details: format!("stats dim {} vs data dim {}", self.mean.len(), cols),
            });
        }
        let mut out = x.clone();
        for r in 0..rows {
            for c in 0..cols {
                let v = &mut out.data_mut()[r * cols + c];
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;

    #[test]
    fn gf_analytic_values() {
        assert!((gf_transform(0.0) - (-2.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert!((gf_transform(-40.0) - (-2.0)).abs() < 1e-12);
        assert!((gf_transform(40.0) - 38.0).abs() < 1e-12);
    }

    #[test]
    fn gf_monotone_and_bounded() {
        // below v ~ -36, softplus(v) is smaller than half an ulp of 2 and
        // the sum rounds to exactly -2.0, so the bound is >= there and the
        // strict versions are checked on the moderate range
        let mut prev = f64::NEG_INFINITY;
        for i in -100..=100 {
            let v = i as f64 * 0.37;
            let t = gf_transform(v);
            assert!(t >= -2.0);
            assert!(t >= prev);
            if v > -30.0 {
                assert!(t > -2.0);
                assert!(t > prev);
            }
            prev = t;
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = MlpConfig::new(vec![4, 8, 2]).unwrap();
        let a = init_params(&cfg, 7);
        let b = init_params(&cfg, 7);
        let c = init_params(&cfg, 8);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn init_scale_matches_glorot() {
        // empirical std of a 64x64 layer within 20% of sqrt(2/128), over seeds
        let cfg = MlpConfig::new(vec![64, 64, 1]).unwrap();
        let target = (2.0_f64 / 128.0).sqrt();
        for seed in 0..10 {
            let mlp = init_params(&cfg, seed);
            let w = mlp.weights[0].data();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
            let std = var.sqrt();
            assert!(
                (std - target).abs() / target < 0.2,
                "seed {}: std {} vs target {}",
                seed,
                std,
                target
            );
        }
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let mut gen = Generator::new(3, &[5], 2, 1).unwrap();
        let last = gen.net.weights.len() - 1;
        gen.net.weights[last] = Tensor::zeros(vec![5, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = sample_noise(&mut rng, 4, 3);
        let out = gen.sample(&z).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[4, 2]);
    }

    #[test]
    fn generator_output_shape() {
        let gen = Generator::new(16, &[64, 64], 10, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = sample_noise(&mut rng, 256, 16);
        let out = gen.sample(&z).unwrap();
        assert_eq!(out.shape(), &[256, 10]);
    }

    #[test]
    fn generator_deterministic_given_z() {
        let gen = Generator::new(4, &[8], 3, 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = sample_noise(&mut rng, 6, 4);
        assert_eq!(gen.sample(&z).unwrap(), gen.sample(&z).unwrap());
    }

    #[test]
    fn shift_is_subtraction_on_input() {
        let mut disc = Discriminator::new(2, &[6], 42).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.5, -0.5]).unwrap();
        let unshifted = disc.raw(&x).unwrap();

        disc.set_recenter_shift(&[1.5, -0.5]).unwrap();
        let at_shift = disc.raw(&x).unwrap();
        let zero = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();

        let mut fresh = Discriminator::new(2, &[6], 42).unwrap();
        fresh.set_recenter_shift(&[0.0, 0.0]).unwrap();
        let at_zero = fresh.raw(&zero).unwrap();
        assert!((at_shift[0] - at_zero[0]).abs() < 1e-14);

        // zero shift is a no-op
        let z = fresh.raw(&x).unwrap();
        assert!((z[0] - unshifted[0]).abs() < 1e-14);
    }

    #[test]
    fn shift_applied_symmetrically() {
        // the same subtraction path is used for data tensors and graph nodes
        let mut disc = Discriminator::new(2, &[4], 9).unwrap();
        disc.set_recenter_shift(&[0.3, -0.7]).unwrap();
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, -1.0, 0.5]).unwrap();
        let via_data = disc.raw(&x).unwrap();

        let mut tape = Tape::new();
        let params = disc.net.register(&mut tape);
        let xn = tape.leaf(x.clone());
        let v = disc.forward_node(&mut tape, &params, xn).unwrap();
        let via_node = tape.value(v).data().to_vec();
        for (a, b) in via_data.iter().zip(&via_node) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn recenter_rejects_wrong_length() {
        let mut disc = Discriminator::new(3, &[4], 0).unwrap();
        assert!(disc.set_recenter_shift(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn discriminator_mean_passes_grad_check() {
        let disc = Discriminator::new(3, &[8, 8], 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = sample_noise(&mut rng, 5, 3);
        let net = disc.net.clone();
        let n_layers = net.weights.len();
        let params: Vec<Tensor> = net
            .weights
            .iter()
            .chain(net.biases.iter())
            .cloned()
            .collect();
        let err = grad_check(
            |tape, ids| {
                let p = MlpParams {
                    weights: ids[..n_layers].to_vec(),
                    biases: ids[n_layers..].to_vec(),
                };
                let input = tape.leaf(x.clone());
                let v = net.forward(tape, &p, input)?;
                tape.mean(v)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "grad_check error {}", err);
    }
}
