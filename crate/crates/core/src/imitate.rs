//! Confidence-weighted imitation: weighted behavior cloning and a weighted
//! adversarial imitation variant with a score-function policy gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::demo::{Trajectory, TrajectorySet};
use crate::env::{expected_return_with, scripted_policy, Grade, Mdp, Policy, PolicyDescriptor};
use crate::error::{ensure_finite, Error, Result};
use crate::nn::{
    bce_with_logits_const, mse_loss, sigmoid, weighted_bce_with_logits, weighted_mse_loss,
    AdamConfig, Gradients, HiddenActivation, Matrix, Mlp, MlpDocument, OptState, OutputActivation,
    Standardizer,
};
use crate::par::Execution;
use crate::seed;
use crate::transfer::TransferModel;

/// State-action pairs with one confidence weight each.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedDataset {
    pub env_id: String,
    pub states: Matrix,
    pub actions: Matrix,
    pub weights: Vec<f64>,
    /// How many raw confidences fell outside `[0, 1]` and were clamped.
    pub clamped: usize,
}

impl WeightedDataset {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn state_dim(&self) -> usize {
        self.states.cols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.cols()
    }

    /// `[state, action]` rows.
    pub fn inputs(&self) -> Matrix {
        let (n, w) = (self.len(), self.state_dim() + self.action_dim());
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(self.states.row(i));
            data.extend_from_slice(self.actions.row(i));
        }
        Matrix::from_vec(n, w, data).expect("rows have the declared width")
    }

    /// Copy without the given pair.
    pub fn without(&self, index: usize) -> WeightedDataset {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| i != index).collect();
        let pick = |m: &Matrix| {
            let rows: Vec<&[f64]> = keep.iter().map(|&i| m.row(i)).collect();
            Matrix::from_rows(&rows).expect("uniform rows")
        };
        WeightedDataset {
            env_id: self.env_id.clone(),
            states: pick(&self.states),
            actions: pick(&self.actions),
            weights: keep.iter().map(|&i| self.weights[i]).collect(),
            clamped: self.clamped,
        }
    }
}

/// Where per-pair weights come from.
#[derive(Clone, Copy, Debug)]
pub enum WeightSource<'a> {
    Constant(f64),
    /// Ground-truth trajectory labels stored on the set.
    Oracle,
    /// Per-pair confidences stored on the set by an earlier prediction.
    Stored,
    Predictor(&'a TransferModel),
}

/// Tags every pair with a weight from `conf`, clamping to `[0, 1]`.
pub fn weight_dataset_with(
    set: &TrajectorySet,
    mut conf: impl FnMut(&Trajectory) -> Result<Vec<f64>>,
) -> Result<WeightedDataset> {
    let first = set
        .trajectories
        .iter()
        .find(|t| !t.is_empty())
        .ok_or_else(|| Error::InvalidArgument("set has no state-action pairs".into()))?;
    let (sd, ad) = (first.states[0].len(), first.actions[0].len());
    let n = set.num_pairs();
    let mut states = Vec::with_capacity(n * sd);
    let mut actions = Vec::with_capacity(n * ad);
    let mut weights = Vec::with_capacity(n);
    let mut clamped = 0;
    for t in &set.trajectories {
        let c = conf(t)?;
        if c.len() != t.len() {
            return Err(Error::Shape(format!(
                "{} confidences for a trajectory of {} pairs",
                c.len(),
                t.len()
            )));
        }
        for ((s, a), w) in t.states.iter().zip(&t.actions).zip(c) {
            if s.len() != sd || a.len() != ad {
                return Err(Error::Shape("inconsistent dimensions in set".into()));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite(format!("confidence {w}")));
            }
            if !(0.0..=1.0).contains(&w) {
                clamped += 1;
            }
            states.extend_from_slice(s);
            actions.extend_from_slice(a);
            weights.push(w.clamp(0.0, 1.0));
        }
    }
    if clamped > 0 {
        eprintln!("warning: clamped {clamped} confidences into [0, 1]");
    }
    Ok(WeightedDataset {
        env_id: set.env_id.clone(),
        states: Matrix::from_vec(n, sd, states)?,
        actions: Matrix::from_vec(n, ad, actions)?,
        weights,
        clamped,
    })
}

pub fn weight_dataset(set: &TrajectorySet, source: WeightSource<'_>) -> Result<WeightedDataset> {
    match source {
        WeightSource::Constant(c) => weight_dataset_with(set, |t| Ok(vec![c; t.len()])),
        WeightSource::Oracle => weight_dataset_with(set, |t| {
            let c = t.confidence.ok_or_else(|| {
                Error::InvalidArgument("oracle weights need labeled trajectories".into())
            })?;
            Ok(vec![c; t.len()])
        }),
        WeightSource::Stored => weight_dataset_with(set, |t| {
            t.pair_confidences.clone().ok_or_else(|| {
                Error::InvalidArgument("trajectory has no stored pair confidences".into())
            })
        }),
        WeightSource::Predictor(model) => weight_dataset_with(set, |t| model.predict_trajectory(t)),
    }
}

/// Deterministic or Gaussian policy around a network's output.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedPolicy {
    pub net: Mlp,
    pub state_norm: Standardizer,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub sigma: f64,
    /// Sample `N(mean, sigma^2)` per component instead of acting on the mean.
    pub stochastic: bool,
}

impl LearnedPolicy {
    pub fn new(net: Mlp, state_norm: Standardizer, env: &Mdp, sigma: f64) -> Result<Self> {
        if net.input_dim() != env.state_dim() || net.output_dim() != env.action_dim() {
            return Err(Error::Shape(format!(
                "policy network maps {} -> {}, environment needs {} -> {}",
                net.input_dim(),
                net.output_dim(),
                env.state_dim(),
                env.action_dim()
            )));
        }
        let (action_low, action_high) = env.bounds.box_limits();
        Ok(LearnedPolicy {
            net,
            state_norm,
            action_low,
            action_high,
            sigma,
            stochastic: false,
        })
    }

    pub fn mean_actions(&self, states: &Matrix) -> Result<Matrix> {
        self.net.predict(&self.state_norm.apply(states)?)
    }

    fn clamp(&self, a: &mut [f64]) {
        for ((x, &lo), &hi) in a.iter_mut().zip(&self.action_low).zip(&self.action_high) {
            *x = x.clamp(lo, hi);
        }
    }

    pub fn deterministic(&self) -> LearnedPolicy {
        LearnedPolicy {
            stochastic: false,
            ..self.clone()
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

impl Policy for LearnedPolicy {
    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(1, state.len(), state.to_vec())?;
        let mut a = self.mean_actions(&x)?.into_vec();
        ensure_finite(&a, "policy output")?;
        if self.stochastic {
            for v in a.iter_mut() {
                *v += self.sigma * gaussian(rng);
            }
        }
        self.clamp(&mut a);
        Ok(a)
    }

    fn descriptor(&self) -> PolicyDescriptor {
        PolicyDescriptor::Learned(format!("mlp{:?}", self.net.layer_dims()))
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyDocument {
    #[serde(flatten)]
    network: MlpDocument,
    state_norm: Standardizer,
    action_low: Vec<f64>,
    action_high: Vec<f64>,
    sigma: f64,
}

pub fn save_policy(policy: &LearnedPolicy) -> String {
    let doc = PolicyDocument {
        network: MlpDocument::from_params(&policy.net),
        state_norm: policy.state_norm.clone(),
        action_low: policy.action_low.clone(),
        action_high: policy.action_high.clone(),
        sigma: policy.sigma,
    };
    serde_json::to_string(&doc).expect("plain data serializes")
}

pub fn load_policy(text: &str) -> Result<LearnedPolicy> {
    let doc: PolicyDocument =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("policy checkpoint: {e}")))?;
    let net = doc.network.to_params()?;
    if doc.state_norm.dim() != net.input_dim()
        || doc.action_low.len() != net.output_dim()
        || doc.action_high.len() != net.output_dim()
    {
        return Err(Error::Shape("policy checkpoint fields disagree in size".into()));
    }
    Ok(LearnedPolicy {
        net,
        state_norm: doc.state_norm,
        action_low: doc.action_low,
        action_high: doc.action_high,
        sigma: doc.sigma,
        stochastic: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcHyper {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BcHyper {
    fn default() -> Self {
        BcHyper {
            hidden: vec![64, 64],
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Fresh policy network for `env`.
pub fn policy_network(env: &Mdp, hidden: &[usize], seed_value: u64) -> Result<Mlp> {
    let mut dims = vec![env.state_dim()];
    dims.extend_from_slice(hidden);
    dims.push(env.action_dim());
    Mlp::new(&dims, HiddenActivation::Tanh, OutputActivation::Linear, seed_value)
}

fn gather(m: &Matrix, rows: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    Matrix::from_vec(rows.len(), m.cols(), data).expect("gathered rows keep the width")
}

#[derive(Clone, Copy)]
enum BcLoss {
    Weighted,
    Plain,
}

fn train_bc(
    env: &Mdp,
    data: &WeightedDataset,
    hyper: &BcHyper,
    loss_kind: BcLoss,
) -> Result<(LearnedPolicy, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("behavior cloning needs data".into()));
    }
    if !(data.total_weight() > 0.0) {
        return Err(Error::InvalidArgument(
            "every imitation weight is zero".into(),
        ));
    }
    let norm = Standardizer::fit(&data.states)?;
    let states = norm.apply(&data.states)?;
    let mut net = policy_network(env, &hyper.hidden, seed::derive(hyper.seed, "bc_init"))?;
    let mut opt = OptState::new(&net, AdamConfig::with_lr(hyper.lr));
    let mut rng = seed::rng(seed::derive(hyper.seed, "bc_batches"));
    let n = data.len();
    let b = hyper.batch_size.min(n);
    let mut history = Vec::with_capacity(hyper.steps);
    let mut rows = Vec::with_capacity(b);
    for step in 0..hyper.steps {
        rows.clear();
        rows.extend((0..b).map(|_| rng.random_range(0..n)));
        let w: Vec<f64> = rows.iter().map(|&r| data.weights[r]).collect();
        if matches!(loss_kind, BcLoss::Weighted) && !(w.iter().sum::<f64>() > 0.0) {
            history.push(f64::NAN);
            continue;
        }
        let x = gather(&states, &rows);
        let y = gather(&data.actions, &rows);
        let (pred, tape) = net.forward(&x)?;
        let (loss, grad) = match loss_kind {
            BcLoss::Weighted => weighted_mse_loss(&pred, &y, &w)?,
            BcLoss::Plain => mse_loss(&pred, &y)?,
        };
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("behavior cloning loss {loss} at step {step}")));
        }
        let (g, _) = net.backward(tape, &grad)?;
        opt.step(&mut net, &g)?;
        history.push(loss);
    }
    Ok((LearnedPolicy::new(net, norm, env, 0.0)?, history))
}

/// Minimizes `sum_i c_i ||pi(s_i) - a_i||^2 / (A sum_i c_i)` over minibatches.
/// Batches whose weights are all zero are skipped (their loss is recorded as NaN).
pub fn train_weighted_bc(env: &Mdp, data: &WeightedDataset, hyper: &BcHyper) -> Result<(LearnedPolicy, Vec<f64>)> {
    train_bc(env, data, hyper, BcLoss::Weighted)
}

/// Plain mean-squared behavior cloning; the weights are ignored.
pub fn train_bc_unweighted(env: &Mdp, data: &WeightedDataset, hyper: &BcHyper) -> Result<(LearnedPolicy, Vec<f64>)> {
    train_bc(env, data, hyper, BcLoss::Plain)
}

/// Discriminator over `[state, action]`; its sigmoid output is the
/// probability that a pair came from the policy rather than the demonstrations.
#[derive(Clone, Debug, PartialEq)]
pub struct GailDiscriminator {
    pub d_omega: Mlp,
    pub input_norm: Standardizer,
}

impl GailDiscriminator {
    pub fn new(state_dim: usize, action_dim: usize, hidden: &[usize], seed_value: u64) -> Result<Self> {
        let mut dims = vec![state_dim + action_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        Ok(GailDiscriminator {
            d_omega: Mlp::new(&dims, HiddenActivation::Tanh, OutputActivation::Linear, seed_value)?,
            input_norm: Standardizer::identity(state_dim + action_dim),
        })
    }

    pub fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        self.d_omega.predict(&self.input_norm.apply(inputs)?)
    }

    /// Per-pair reward `-log D(s, a)`.
    pub fn rewards(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        // -log sigmoid(z) = softplus(-z)
        Ok(self
            .logits(inputs)?
            .as_slice()
            .iter()
            .map(|&z| (-z).max(0.0) + (-z.abs()).exp().ln_1p())
            .collect())
    }
}

#[derive(Clone, Debug)]
pub struct GailLoss {
    /// Log-form loss the discriminator minimizes.
    pub loss: f64,
    pub grads: Gradients,
    /// `E_pi[D] + E_demo[c (1 - D)]`, reported for diagnostics.
    pub expectation_objective: f64,
}

/// `mean_pi BCE(D, 1) + sum_i c_i BCE(D_i, 0) / sum_i c_i`. With every
/// demonstration weight zero the demonstration term vanishes.
pub fn gail_disc_loss(
    d: &GailDiscriminator,
    policy_batch: &Matrix,
    demo_batch: &Matrix,
    demo_weights: &[f64],
) -> Result<GailLoss> {
    if policy_batch.cols() != demo_batch.cols() {
        return Err(Error::Shape(format!(
            "policy pairs have width {}, demonstration pairs {}",
            policy_batch.cols(),
            demo_batch.cols()
        )));
    }
    let net = &d.d_omega;
    let (lp, tape_p) = net.forward(&d.input_norm.apply(policy_batch)?)?;
    let (ld, tape_d) = net.forward(&d.input_norm.apply(demo_batch)?)?;
    let (loss_p, g_p) = bce_with_logits_const(&lp, 1.0)?;
    let total_w: f64 = demo_weights.iter().sum();
    let (loss_d, g_d) = weighted_bce_with_logits(&ld, 0.0, demo_weights, total_w)?;
    let (mut grads, _) = net.backward(tape_p, &g_p)?;
    let (gd, _) = net.backward(tape_d, &g_d)?;
    grads.add_assign(&gd);
    let e_pi = lp.as_slice().iter().map(|&z| sigmoid(z)).sum::<f64>() / lp.rows() as f64;
    let e_demo = ld
        .as_slice()
        .iter()
        .zip(demo_weights)
        .map(|(&z, &c)| c * (1.0 - sigmoid(z)))
        .sum::<f64>()
        / ld.rows().max(1) as f64;
    Ok(GailLoss {
        loss: loss_p + loss_d,
        grads,
        expectation_objective: e_pi + e_demo,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GailHyper {
    pub policy_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub iterations: usize,
    pub rollouts_per_iter: usize,
    pub disc_steps: usize,
    pub disc_batch: usize,
    pub lr_policy: f64,
    pub lr_disc: f64,
    pub sigma: f64,
    /// Smoothing factor of the per-timestep baseline.
    pub baseline_decay: f64,
    pub eval_every: usize,
    pub eval_rollouts: usize,
    /// Consecutive evaluations below the random-policy floor before aborting.
    pub divergence_patience: usize,
    pub seed: u64,
}

impl Default for GailHyper {
    fn default() -> Self {
        GailHyper {
            policy_hidden: vec![64, 64],
            disc_hidden: vec![32, 32],
            iterations: 200,
            rollouts_per_iter: 8,
            disc_steps: 2,
            disc_batch: 128,
            lr_policy: 1e-3,
            lr_disc: 1e-3,
            sigma: 0.1,
            baseline_decay: 0.9,
            eval_every: 10,
            eval_rollouts: 20,
            divergence_patience: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GailHistory {
    pub disc_loss: Vec<f64>,
    pub expectation_objective: Vec<f64>,
    pub eval_returns: Vec<f64>,
}

/// Adversarial imitation on weighted demonstrations. `policy` supplies the
/// initial network and normalization; it is trained as a Gaussian policy
/// with fixed `sigma` using the reward `-log D(s, a)` and returned
/// deterministic.
pub fn train_weighted_gail(
    policy: &LearnedPolicy,
    env: &Mdp,
    data: &WeightedDataset,
    hyper: &GailHyper,
) -> Result<(LearnedPolicy, GailHistory)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("adversarial imitation needs data".into()));
    }
    if data.state_dim() != env.state_dim() || data.action_dim() != env.action_dim() {
        return Err(Error::Shape("demonstrations do not match the environment".into()));
    }
    let mut pol = policy.clone();
    pol.sigma = hyper.sigma;
    pol.stochastic = true;
    let mut history = GailHistory::default();
    if hyper.iterations == 0 {
        return Ok((pol.deterministic(), history));
    }
    let demo_inputs = data.inputs();
    let mut disc = GailDiscriminator::new(
        env.state_dim(),
        env.action_dim(),
        &hyper.disc_hidden,
        seed::derive(hyper.seed, "gail_disc"),
    )?;
    disc.input_norm = Standardizer::fit(&demo_inputs)?;
    let mut opt_d = OptState::new(&disc.d_omega, AdamConfig::with_lr(hyper.lr_disc));
    let mut opt_p = OptState::new(&pol.net, AdamConfig::with_lr(hyper.lr_policy));
    let mut rng = seed::rng(seed::derive(hyper.seed, "gail_batches"));
    let mut baseline = vec![0.0; env.horizon];
    let mut baseline_ready = false;

    let random = scripted_policy(env, Grade::Random)?;
    let (rand_mean, rand_std) = expected_return_with(
        Execution::Sequential,
        env,
        &random,
        hyper.eval_rollouts.max(2),
        seed::derive(hyper.seed, "gail_floor"),
    )?;
    let floor = rand_mean - rand_std;
    let mut below = 0;

    for it in 0..hyper.iterations {
        let base = seed::mix(seed::derive(hyper.seed, "gail_rollouts"), it as u64);
        let episodes = (0..hyper.rollouts_per_iter)
            .map(|i| sample_episode(env, &pol, base.wrapping_add(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        let mut states = Vec::new();
        let mut actions = Vec::new();
        let mut time_index = Vec::new();
        let mut lens = Vec::with_capacity(episodes.len());
        for (ep_states, ep_actions) in episodes {
            lens.push(ep_actions.len());
            time_index.extend(0..ep_actions.len());
            states.extend(ep_states);
            actions.extend(ep_actions);
        }
        let pair_rows: Vec<Vec<f64>> = states
            .iter()
            .zip(&actions)
            .map(|(s, a)| s.iter().chain(a).copied().collect())
            .collect();
        let policy_inputs = Matrix::from_rows(&pair_rows)?;

        for _ in 0..hyper.disc_steps {
            let pb: Vec<usize> = (0..hyper.disc_batch)
                .map(|_| rng.random_range(0..policy_inputs.rows()))
                .collect();
            let db: Vec<usize> = (0..hyper.disc_batch)
                .map(|_| rng.random_range(0..demo_inputs.rows()))
                .collect();
            let w: Vec<f64> = db.iter().map(|&i| data.weights[i]).collect();
            let l = gail_disc_loss(&disc, &gather(&policy_inputs, &pb), &gather(&demo_inputs, &db), &w)?;
            if !l.loss.is_finite() {
                return Err(Error::Divergence(format!("discriminator loss {} at iteration {it}", l.loss)));
            }
            opt_d.step(&mut disc.d_omega, &l.grads)?;
            history.disc_loss.push(l.loss);
            history.expectation_objective.push(l.expectation_objective);
        }

        // returns-to-go of the learned reward, per trajectory
        let rewards = disc.rewards(&policy_inputs)?;
        let mut advantages = vec![0.0; rewards.len()];
        let mut mean_rtg = vec![0.0; env.horizon];
        let mut count = vec![0usize; env.horizon];
        let mut offset = 0;
        for &n in &lens {
            let mut acc = 0.0;
            for i in (0..n).rev() {
                acc = rewards[offset + i] + env.gamma * acc;
                advantages[offset + i] = acc;
                mean_rtg[i] += acc;
                count[i] += 1;
            }
            offset += n;
        }
        for i in 0..env.horizon {
            if count[i] > 0 {
                mean_rtg[i] /= count[i] as f64;
            }
        }
        if !baseline_ready {
            baseline.copy_from_slice(&mean_rtg);
            baseline_ready = true;
        }
        for (a, &ti) in advantages.iter_mut().zip(&time_index) {
            *a -= baseline[ti];
        }
        for (b, m) in baseline.iter_mut().zip(&mean_rtg) {
            *b = hyper.baseline_decay * *b + (1.0 - hyper.baseline_decay) * m;
        }
        let scale = {
            let m = advantages.iter().sum::<f64>() / advantages.len() as f64;
            let v = advantages.iter().map(|a| (a - m).powi(2)).sum::<f64>() / advantages.len() as f64;
            if v.sqrt() > 1e-8 {
                v.sqrt()
            } else {
                1.0
            }
        };

        // Gaussian score: d log pi / d mean = (a - mean) / sigma^2
        let state_m = Matrix::from_rows(&states)?;
        let (mean, tape) = pol.net.forward(&pol.state_norm.apply(&state_m)?)?;
        let n = mean.rows() as f64;
        let mut upstream = Matrix::zeros(mean.rows(), mean.cols());
        let sigma2 = hyper.sigma * hyper.sigma;
        for r in 0..mean.rows() {
            let adv = advantages[r] / scale;
            for c in 0..mean.cols() {
                let diff = actions[r][c] - mean.get(r, c);
                upstream.set(r, c, -adv * diff / sigma2 / n);
            }
        }
        let (g, _) = pol.net.backward(tape, &upstream)?;
        if !g.is_finite() {
            return Err(Error::Divergence(format!("policy gradient at iteration {it}")));
        }
        opt_p.step(&mut pol.net, &g)?;

        if hyper.eval_every > 0 && (it + 1) % hyper.eval_every == 0 {
            let (ret, _) = expected_return_with(
                Execution::Sequential,
                env,
                &pol.deterministic(),
                hyper.eval_rollouts.max(1),
                seed::derive(hyper.seed, "gail_eval"),
            )?;
            history.eval_returns.push(ret);
            below = if ret < floor { below + 1 } else { 0 };
            if hyper.divergence_patience > 0 && below >= hyper.divergence_patience {
                return Err(Error::Divergence(format!(
                    "mean return {ret:.4} stayed below the random-policy floor {floor:.4} for {below} evaluations"
                )));
            }
        }
    }
    Ok((pol.deterministic(), history))
}

/// One stochastic episode; returns the visited states (without the final one)
/// and the unclamped sampled actions the score function needs.
fn sample_episode(env: &Mdp, pol: &LearnedPolicy, seed_value: u64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut init_rng = seed::rng(seed::derive(seed_value, "init"));
    let mut rng = seed::rng(seed::derive(seed_value, "act"));
    let mut state = env.sample_initial_state(&mut init_rng);
    let mut states = Vec::with_capacity(env.horizon);
    let mut actions = Vec::with_capacity(env.horizon);
    for _ in 0..env.horizon {
        let x = Matrix::from_vec(1, state.len(), state.clone())?;
        let mut a = pol.mean_actions(&x)?.into_vec();
        for v in a.iter_mut() {
            *v += pol.sigma * gaussian(&mut rng);
        }
        ensure_finite(&a, "policy action")?;
        let out = env.step(&state, &a)?;
        states.push(std::mem::replace(&mut state, out.next_state));
        actions.push(a);
        if out.done && env.terminate_on_success {
            break;
        }
    }
    Ok((states, actions))
}
