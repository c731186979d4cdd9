//! Alternating adversarial optimization of the chi-squared objective.
//!
//! Per iteration, each arm's critic takes ascent steps on
//!   mean[g_f(V(x_gen))] + mean[-1/4 g_f(V(x_a))^2 - g_f(V(x_a))],
//! then the generator takes one descent step on
//!   sum_a mean[g_f(V_a(G(z)))].
//! The generator gradient is the true objective gradient; no surrogate
//! generator loss is used.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::StudyArm;
use crate::error::{Error, Result};
use crate::nets::{
    gf_node, sample_noise, Discriminator, Generator, MlpParams, StandardizationStats, STD_FLOOR,
};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub disc_steps: usize,
    pub lr_gen: f64,
    pub lr_disc: f64,
    /// Multiplier applied to both learning rates every 1000 iterations.
    pub lr_decay: f64,
    /// Iterations between re-centering every critic on a generator
    /// minibatch mean.
    pub recenter_period: usize,
    /// Moving-average window for the convergence check.
    pub convergence_window: usize,
    pub convergence_tol: f64,
    pub noise_dim: usize,
    pub gen_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_iters: 20_000,
            disc_steps: 1,
            lr_gen: 1e-4,
            lr_disc: 2e-4,
            lr_decay: 0.95,
            recenter_period: 500,
            convergence_window: 500,
            convergence_tol: 1e-4,
            noise_dim: 16,
            gen_hidden: vec![64, 64],
            disc_hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument("batch size must be >= 2".into()));
        }
        if self.lr_gen <= 0.0 || self.lr_disc <= 0.0 {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::InvalidArgument("lr decay must be in (0, 1]".into()));
        }
        if self.disc_steps == 0 || self.max_iters == 0 || self.recenter_period == 0
            || self.convergence_window == 0
        {
            return Err(Error::InvalidArgument("iteration counts must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the training trace.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub iteration: usize,
    pub per_arm: Vec<f64>,
    pub total: f64,
    pub lr_gen: f64,
    pub lr_disc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub generator: Generator,
    pub discriminators: Vec<Discriminator>,
    pub stats: StandardizationStats,
    pub trace: Vec<TraceRow>,
}

impl TrainedModel {
    pub fn feature_dim(&self) -> usize {
        self.generator.feature_dim()
    }

    pub fn n_arms(&self) -> usize {
        self.discriminators.len()
    }
}

/// Joint standardization over the concatenation of all arms.
pub fn standardize(arms: &[StudyArm]) -> Result<(Vec<StudyArm>, StandardizationStats)> {
    if arms.is_empty() {
        return Err(Error::InvalidArgument("no arms given".into()));
    }
    let d = arms[0].feature_dim();
    for arm in arms {
        if arm.feature_dim() != d {
            return Err(Error::DataValidation(format!(
                "arm {} has feature dim {}, expected {}",
                arm.id,
                arm.feature_dim(),
                d
            )));
        }
    }
    let total_rows: usize = arms.iter().map(|a| a.n_units()).sum();
    if total_rows < 2 {
        return Err(Error::DataValidation("need at least 2 pooled rows".into()));
    }

    let mut mean = vec![0.0; d];
    for arm in arms {
        for r in 0..arm.n_units() {
            for (c, v) in arm.row(r).iter().enumerate() {
                mean[c] += v;
            }
        }
    }
    for m in &mut mean {
        *m /= total_rows as f64;
    }
    let mut var = vec![0.0; d];
    for arm in arms {
        for r in 0..arm.n_units() {
            for (c, v) in arm.row(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
    }
    let std: Vec<f64> = var
        .iter()
        .map(|v| (v / total_rows as f64).sqrt().max(STD_FLOOR))
        .collect();

    let stats = StandardizationStats { mean, std };
    let standardized = arms
        .iter()
        .map(|arm| {
            let features = stats.apply(&arm.features)?;
            Ok(StudyArm { features, ..arm.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((standardized, stats))
}

/// Adam with GAN-style decay parameters (0.5, 0.999).
pub(crate) struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub(crate) fn new(sizes: &[usize]) -> Self {
        Adam {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one step. `direction` is +1 for ascent, -1 for descent.
    pub(crate) fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor], lr: f64, direction: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (i, gi) in g.data().iter().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                p.data_mut()[i] += direction * lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

pub(crate) fn param_sizes(weights: &[Tensor], biases: &[Tensor]) -> Vec<usize> {
    weights.iter().chain(biases).map(|t| t.len()).collect()
}

/// Cycles through shuffled epochs of one arm's rows without replacement.
struct MinibatchStream {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl MinibatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        MinibatchStream { order, cursor: 0, rng }
    }

    fn next_batch(&mut self, m: usize, features: &Tensor) -> Tensor {
        let (_, d) = features.dims2().expect("matrix");
        let mut data = Vec::with_capacity(m * d);
        for _ in 0..m {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            let r = self.order[self.cursor];
            self.cursor += 1;
            data.extend_from_slice(&features.data()[r * d..(r + 1) * d]);
        }
        Tensor::matrix(m, d, data).expect("sized buffer")
    }
}

/// One critic's loss on fixed generated and data batches, gradient-tracked
/// w.r.t. the critic parameters.
pub(crate) fn critic_loss_graph(
    tape: &mut Tape,
    disc: &Discriminator,
    params: &MlpParams,
    x_gen: &Tensor,
    x_data: &Tensor,
) -> Result<NodeId> {
    let v_gen = disc.forward_data(tape, params, x_gen)?;
    let t_gen = gf_node(tape, v_gen)?;
    let gen_term = tape.mean(t_gen)?;

    let v_data = disc.forward_data(tape, params, x_data)?;
    let t_data = gf_node(tape, v_data)?;
    let t_sq = tape.square(t_data)?;
    let neg_quarter_sq = tape.scale(t_sq, -0.25)?;
    let neg_t = tape.scale(t_data, -1.0)?;
    let data_inner = tape.add(neg_quarter_sq, neg_t)?;
    let data_term = tape.mean(data_inner)?;

    tape.add(gen_term, data_term)
}

/// The per-arm variational bound terms of the objective F, evaluated on
/// the given batches without tracking gradients.
pub fn discriminator_loss(disc: &Discriminator, x_gen: &Tensor, x_data: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let params = MlpParams {
        weights: disc.net.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
        biases: disc.net.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
    };
    let loss = critic_loss_graph(&mut tape, disc, &params, x_gen, x_data)?;
    Ok(tape.value(loss).scalar_value())
}

/// Generator loss sum_a mean[g_f(V_a(G(z)))] on a fixed noise batch,
/// without gradient tracking.
pub fn generator_loss(gen: &Generator, discs: &[Discriminator], z: &Tensor) -> Result<f64> {
    let x = gen.sample(z)?;
    let mut total = 0.0;
    for disc in discs {
        let v = disc.raw(&x)?;
        total += v.iter().map(|&vi| crate::nets::gf_transform(vi)).sum::<f64>() / v.len() as f64;
    }
    Ok(total)
}

struct ArmState {
    disc: Discriminator,
    adam: Adam,
    batches: MinibatchStream,
    z_rng: ChaCha8Rng,
}

/// Runs the alternating optimization and returns the trained model.
/// Arms are given in raw coordinates; joint standardization happens here.
pub fn train(arms: &[StudyArm], cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if arms.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 arms".into()));
    }
    for arm in arms {
        if arm.n_units() < cfg.batch_size {
            return Err(Error::InvalidArgument(format!(
                "arm {} has {} rows, smaller than batch size {}",
                arm.id,
                arm.n_units(),
                cfg.batch_size
            )));
        }
    }

    let (std_arms, stats) = standardize(arms)?;
    let d = std_arms[0].feature_dim();

    let mut generator = Generator::new(cfg.noise_dim, &cfg.gen_hidden, d, cfg.seed)?;
    let mut gen_adam = Adam::new(&param_sizes(&generator.net.weights, &generator.net.biases));
    let mut gen_z_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut recenter_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));

    let mut arm_states: Vec<ArmState> = std_arms
        .iter()
        .enumerate()
        .map(|(a, arm)| {
            let disc =
                Discriminator::new(d, &cfg.disc_hidden, cfg.seed.wrapping_add(100 + a as u64))?;
            let adam = Adam::new(&param_sizes(&disc.net.weights, &disc.net.biases));
            let batches =
                MinibatchStream::new(arm.n_units(), cfg.seed.wrapping_add(200 + a as u64));
            let z_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(300 + a as u64));
            Ok(ArmState { disc, adam, batches, z_rng })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut trace: Vec<TraceRow> = Vec::with_capacity(cfg.max_iters);
    let m = cfg.batch_size;

    for iter in 0..cfg.max_iters {
        let decay = cfg.lr_decay.powi((iter / 1000) as i32);
        let lr_gen = cfg.lr_gen * decay;
        let lr_disc = cfg.lr_disc * decay;

        // Periodic re-centering onto a noisy (minibatch) generator mean.
        if iter > 0 && iter % cfg.recenter_period == 0 {
            let z = sample_noise(&mut recenter_rng, m, cfg.noise_dim);
            let x = generator.sample(&z)?;
            let means = x.column_means()?;
            for state in &mut arm_states {
                state.disc.set_recenter_shift(&means)?;
            }
        }

        // Critic ascent, one arm at a time.
        let mut per_arm = Vec::with_capacity(arm_states.len());
        for (a, state) in arm_states.iter_mut().enumerate() {
            let z = sample_noise(&mut state.z_rng, m, cfg.noise_dim);
            let x_gen = generator.sample(&z)?;
            let x_data = state.batches.next_batch(m, &std_arms[a].features);

            let mut last_loss = 0.0;
            for _ in 0..cfg.disc_steps {
                let mut tape = Tape::new();
                let params = state.disc.net.register(&mut tape);
                let loss = critic_loss_graph(&mut tape, &state.disc, &params, &x_gen, &x_data)
                    .map_err(|e| wrap_non_finite(e, iter, a))?;
                last_loss = tape.value(loss).scalar_value();
                if !last_loss.is_finite() {
                    return Err(Error::NonFiniteObjective {
                        iteration: iter,
                        details: format!("arm {} critic loss", a),
                    });
                }
                let grads = tape.backward(loss)?;
                let ids: Vec<NodeId> =
                    params.weights.iter().chain(params.biases.iter()).copied().collect();
                let grad_refs: Vec<&Tensor> =
                    ids.iter().map(|id| grads.get(*id).expect("param grad")).collect();
                let mut param_refs = state.disc.net.param_tensors_mut();
                state.adam.step(&mut param_refs, &grad_refs, lr_disc, 1.0);
            }
            per_arm.push(last_loss);
        }

        // Generator descent on the true objective gradient.
        {
            let z = sample_noise(&mut gen_z_rng, m, cfg.noise_dim);
            let mut tape = Tape::new();
            let params = generator.net.register(&mut tape);
            let zn = tape.leaf(z);
            let x = generator.forward(&mut tape, &params, zn)?;
            let mut total: Option<NodeId> = None;
            for state in &arm_states {
                let disc_params = MlpParams {
                    weights: state.disc.net.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
                    biases: state.disc.net.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
                };
                let v = state.disc.forward_node(&mut tape, &disc_params, x)?;
                let t = gf_node(&mut tape, v)?;
                let mean = tape.mean(t)?;
                total = Some(match total {
                    Some(acc) => tape.add(acc, mean)?,
                    None => mean,
                });
            }
            let loss = total.expect("at least one arm");
            let loss_val = tape.value(loss).scalar_value();
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteObjective {
                    iteration: iter,
                    details: "generator loss".into(),
                });
            }
            let grads = tape.backward(loss)?;
            let ids: Vec<NodeId> =
                params.weights.iter().chain(params.biases.iter()).copied().collect();
            let grad_refs: Vec<&Tensor> =
                ids.iter().map(|id| grads.get(*id).expect("param grad")).collect();
            let mut param_refs = generator.net.param_tensors_mut();
            gen_adam.step(&mut param_refs, &grad_refs, lr_gen, -1.0);
        }

        let total: f64 = per_arm.iter().sum();
        trace.push(TraceRow { iteration: iter, per_arm, total, lr_gen, lr_disc });

        // Converged when the moving average of F stops moving.
        let w = cfg.convergence_window;
        if trace.len() >= 2 * w {
            let recent: f64 = trace[trace.len() - w..].iter().map(|r| r.total).sum::<f64>() / w as f64;
            let previous: f64 =
                trace[trace.len() - 2 * w..trace.len() - w].iter().map(|r| r.total).sum::<f64>()
                    / w as f64;
            if (recent - previous).abs() < cfg.convergence_tol {
                break;
            }
        }
    }

    Ok(TrainedModel {
        generator,
        discriminators: arm_states.into_iter().map(|s| s.disc).collect(),
        stats,
        trace,
    })
}

fn wrap_non_finite(e: Error, iteration: usize, arm: usize) -> Error {
    match e {
        Error::NonFinite { op, node } => Error::NonFiniteObjective {
            iteration,
            details: format!("arm {}: non-finite output of {} at node {}", arm, op, node),
        },
        other => other,
    }
}

/// Per-arm objective component estimates.
#[derive(Clone, Debug)]
pub struct ObjectiveEstimate {
    pub per_arm: Vec<f64>,
    pub total: f64,
}

/// Monte Carlo estimate of each arm's variational bound term (a lower bound
/// on chi-squared(P || Q_a)) using `n_mc` fresh generator samples and the
/// full arm data. Arms are given in raw coordinates.
pub fn objective_estimate(
    model: &TrainedModel,
    arms: &[StudyArm],
    n_mc: usize,
    seed: u64,
) -> Result<ObjectiveEstimate> {
    if arms.len() != model.n_arms() {
        return Err(Error::InvalidArgument(format!(
            "model has {} arms, got {}",
            model.n_arms(),
            arms.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_noise(&mut rng, n_mc, model.generator.noise_dim());
    let x_gen = model.generator.sample(&z)?;

    let mut per_arm = Vec::with_capacity(arms.len());
    for (arm, disc) in arms.iter().zip(&model.discriminators) {
        let x_data = model.stats.apply(&arm.features)?;
        per_arm.push(discriminator_loss(disc, &x_gen, &x_data)?);
    }
    let total = per_arm.iter().sum();
    Ok(ObjectiveEstimate { per_arm, total })
}
