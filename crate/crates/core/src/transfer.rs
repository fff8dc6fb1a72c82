//! Adversarial confidence transfer.
//!
//! Stage one fits `F(E_src(s, a))` to the source confidence labels. Stage two
//! freezes `E_src` and `F` and trains `E_tar` so that, for every window length
//! `k = 1..K`, concatenated target latents and concatenated target confidences
//! are indistinguishable from their source counterparts. The target
//! confidence predictor is `F(E_tar(s, a))`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::demo::{Trajectory, TrajectorySet};
use crate::error::{Error, Result};
use crate::nn::{
    bce_with_logits_const, mse_loss, AdamConfig, Gradients, HiddenActivation, Matrix, Mlp,
    MlpDocument, OptState, OutputActivation, Standardizer, Tape,
};
use crate::seed;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Value of the discriminator loss when it cannot tell the domains apart.
pub const INDISTINGUISHABLE: f64 = 2.0 * std::f64::consts::LN_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// Minimize BCE of target inputs against the source label.
    NonSaturating,
    /// Maximize the discriminator's own loss on target inputs.
    Saturating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferHyper {
    pub latent_dim: usize,
    /// Longest window length `K`.
    pub max_len: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub disc_steps_per_enc_step: usize,
    pub lr_stage1: f64,
    pub lr_encoder: f64,
    pub lr_disc: f64,
    pub encoder_hidden: Vec<usize>,
    pub disc_hidden: Vec<usize>,
    pub generator_loss: GeneratorLoss,
    /// Stop stage two once every discriminator loss has stayed within
    /// `early_stop_tol` of `2 ln 2` for this many steps. 0 disables.
    pub early_stop_window: usize,
    pub early_stop_tol: f64,
    /// Start `E_tar` as a copy of the trained `E_src` (needs equal input widths).
    pub init_target_from_source: bool,
    /// Adam first-moment decay for every stage-two optimizer.
    pub beta1_stage2: f64,
    /// Standard deviation of Gaussian noise added to every discriminator
    /// input, annealed linearly to zero over stage two.
    pub instance_noise: f64,
    pub seed: u64,
}

impl Default for TransferHyper {
    fn default() -> Self {
        TransferHyper {
            latent_dim: 8,
            max_len: 5,
            lambda: 1.0,
            batch_size: 64,
            stage1_steps: 3000,
            stage2_steps: 12000,
            disc_steps_per_enc_step: 1,
            lr_stage1: 1e-3,
            lr_encoder: 1e-4,
            lr_disc: 1e-3,
            encoder_hidden: vec![32, 32],
            disc_hidden: vec![32, 32],
            generator_loss: GeneratorLoss::NonSaturating,
            early_stop_window: 500,
            early_stop_tol: 0.1,
            init_target_from_source: false,
            beta1_stage2: 0.5,
            instance_noise: 0.0,
            seed: 0,
        }
    }
}

impl TransferHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.max_len == 0 {
            return bad("max_len must be at least 1".into());
        }
        if self.latent_dim == 0 || self.batch_size == 0 {
            return bad("latent_dim and batch_size must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        for (name, lr) in [
            ("lr_stage1", self.lr_stage1),
            ("lr_encoder", self.lr_encoder),
            ("lr_disc", self.lr_disc),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.disc_steps_per_enc_step == 0 {
            return bad("disc_steps_per_enc_step must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1_stage2) {
            return bad(format!("beta1_stage2 must lie in [0, 1), got {}", self.beta1_stage2));
        }
        if !(self.instance_noise >= 0.0 && self.instance_noise.is_finite()) {
            return bad(format!("instance_noise must be non-negative, got {}", self.instance_noise));
        }
        Ok(())
    }
}

/// Encoders, decoder and the per-length discriminators.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferModel {
    pub hyper: TransferHyper,
    pub e_src: Mlp,
    pub e_tar: Mlp,
    pub f: Mlp,
    /// `D_k` for `k = 1..K`, over `k * latent_dim` inputs.
    pub feat_discs: Vec<Mlp>,
    /// `D'_k` for `k = 1..K`, over `k` confidences.
    pub conf_discs: Vec<Mlp>,
    pub src_norm: Standardizer,
    pub tar_norm: Standardizer,
    pub source_trained: bool,
}

fn dims(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut d = Vec::with_capacity(hidden.len() + 2);
    d.push(input);
    d.extend_from_slice(hidden);
    d.push(output);
    d
}

impl TransferModel {
    /// Fresh model for source pairs of width `src_in` and target pairs of width `tar_in`.
    pub fn new(src_in: usize, tar_in: usize, hyper: &TransferHyper) -> Result<Self> {
        hyper.validate()?;
        let s = |name: &str| seed::derive(hyper.seed, name);
        let z = hyper.latent_dim;
        let encoder = |input: usize, name: &str| {
            Mlp::new(
                &dims(input, &hyper.encoder_hidden, z),
                HiddenActivation::Tanh,
                OutputActivation::Linear,
                s(name),
            )
        };
        let disc = |input: usize, name: String| {
            Mlp::new(
                &dims(input, &hyper.disc_hidden, 1),
                HiddenActivation::Tanh,
                OutputActivation::Linear,
                s(&name),
            )
        };
        Ok(TransferModel {
            hyper: hyper.clone(),
            e_src: encoder(src_in, "e_src")?,
            e_tar: encoder(tar_in, "e_tar")?,
            f: Mlp::new(&[z, 1], HiddenActivation::Tanh, OutputActivation::Sigmoid, s("f"))?,
            feat_discs: (1..=hyper.max_len)
                .map(|k| disc(k * z, format!("feat_disc_{k}")))
                .collect::<Result<_>>()?,
            conf_discs: (1..=hyper.max_len)
                .map(|k| disc(k, format!("conf_disc_{k}")))
                .collect::<Result<_>>()?,
            src_norm: Standardizer::identity(src_in),
            tar_norm: Standardizer::identity(tar_in),
            source_trained: false,
        })
    }

    /// Builds a model sized for the given datasets.
    pub fn for_sets(src: &TrajectorySet, tar: &TrajectorySet, hyper: &TransferHyper) -> Result<Self> {
        TransferModel::new(pair_width(src)?, pair_width(tar)?, hyper)
    }

    pub fn max_len(&self) -> usize {
        self.feat_discs.len()
    }

    fn encode_src(&self, inputs: &Matrix) -> Result<Matrix> {
        self.e_src.predict(&self.src_norm.apply(inputs)?)
    }

    /// `F(E_tar(x))` for each row of raw `[state, action]` inputs.
    pub fn predict_inputs(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        let z = self.e_tar.predict(&self.tar_norm.apply(inputs)?)?;
        Ok(self.f.predict(&z)?.into_vec())
    }

    /// `F(E_src(x))` for each row of raw source inputs.
    pub fn predict_source_inputs(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        Ok(self.f.predict(&self.encode_src(inputs)?)?.into_vec())
    }

    /// Per-pair target confidences for one trajectory.
    pub fn predict_trajectory(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        if traj.is_empty() {
            return Ok(Vec::new());
        }
        self.predict_inputs(&trajectory_inputs(traj)?)
    }
}

/// Target confidence of a single state-action pair.
pub fn predict_confidence(model: &TransferModel, state: &[f64], action: &[f64]) -> Result<f64> {
    let row: Vec<f64> = state.iter().chain(action).copied().collect();
    let x = Matrix::from_vec(1, row.len(), row)?;
    Ok(model.predict_inputs(&x)?[0])
}

fn pair_width(set: &TrajectorySet) -> Result<usize> {
    let t = set
        .trajectories
        .iter()
        .find(|t| !t.is_empty())
        .ok_or_else(|| Error::InvalidArgument("set has no state-action pairs".into()))?;
    Ok(t.states[0].len() + t.actions[0].len())
}

/// All `[state, action]` rows of a trajectory.
pub fn trajectory_inputs(traj: &Trajectory) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = traj
        .actions
        .iter()
        .zip(&traj.states)
        .map(|(a, s)| s.iter().chain(a).copied().collect())
        .collect();
    Matrix::from_rows(&rows)
}

/// Every state-action pair of a set, trajectory by trajectory, with row offsets.
#[derive(Clone, Debug)]
pub struct PairTable {
    pub inputs: Matrix,
    pub labels: Vec<f64>,
    offsets: Vec<usize>,
    lens: Vec<usize>,
}

impl PairTable {
    pub fn new(set: &TrajectorySet) -> Result<Self> {
        let width = pair_width(set)?;
        let mut data = Vec::with_capacity(set.num_pairs() * width);
        let mut labels = Vec::with_capacity(set.num_pairs());
        let mut offsets = Vec::with_capacity(set.len());
        let mut lens = Vec::with_capacity(set.len());
        let mut row = 0;
        for t in &set.trajectories {
            offsets.push(row);
            lens.push(t.len());
            for (s, a) in t.states.iter().zip(&t.actions) {
                if s.len() + a.len() != width {
                    return Err(Error::Shape("inconsistent pair widths in set".into()));
                }
                data.extend_from_slice(s);
                data.extend_from_slice(a);
                labels.push(t.confidence.unwrap_or(f64::NAN));
                row += 1;
            }
        }
        Ok(PairTable {
            inputs: Matrix::from_vec(row, width, data)?,
            labels,
            offsets,
            lens,
        })
    }

    pub fn num_pairs(&self) -> usize {
        self.inputs.rows()
    }

    fn gather(&self, rows: &[usize]) -> Matrix {
        let w = self.inputs.cols();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(self.inputs.row(r));
        }
        Matrix::from_vec(rows.len(), w, data).expect("gathered rows have the table's width")
    }
}

/// Uniform sampler over all windows of a given length.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    table: PairTable,
    // cumulative[k - 1][i] = number of length-k windows in trajectories 0..=i
    cumulative: Vec<Vec<usize>>,
}

impl WindowSampler {
    pub fn new(table: PairTable, max_len: usize) -> Self {
        let cumulative = (1..=max_len)
            .map(|k| {
                let mut acc = 0;
                table
                    .lens
                    .iter()
                    .map(|&len| {
                        acc += (len + 1).saturating_sub(k);
                        acc
                    })
                    .collect()
            })
            .collect();
        WindowSampler { table, cumulative }
    }

    pub fn table(&self) -> &PairTable {
        &self.table
    }

    pub fn num_windows(&self, k: usize) -> usize {
        self.cumulative
            .get(k.wrapping_sub(1))
            .and_then(|c| c.last().copied())
            .unwrap_or(0)
    }

    pub fn sample(&self, k: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<PartialTrajBatch> {
        let total = self.num_windows(k);
        if total == 0 {
            return Err(Error::InvalidArgument(format!(
                "no trajectory has at least {k} state-action pairs"
            )));
        }
        let cum = &self.cumulative[k - 1];
        let mut windows = Vec::with_capacity(batch);
        let mut rows = Vec::with_capacity(batch * k);
        for _ in 0..batch {
            let w = rng.random_range(0..total);
            let traj = cum.partition_point(|&c| c <= w);
            let before = if traj == 0 { 0 } else { cum[traj - 1] };
            let start = w - before;
            debug_assert!(start + k <= self.table.lens[traj], "window crosses a boundary");
            windows.push((traj, start));
            let base = self.table.offsets[traj] + start;
            rows.extend(base..base + k);
        }
        let inputs = self.table.gather(&rows);
        Ok(PartialTrajBatch {
            k,
            windows,
            inputs,
        })
    }
}

/// `B` windows of `k` consecutive pairs. `inputs` holds the `B * k` raw
/// `[state, action]` rows window by window, earliest pair first.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialTrajBatch {
    pub k: usize,
    /// `(trajectory index, start index)` of each window.
    pub windows: Vec<(usize, usize)>,
    pub inputs: Matrix,
}

impl PartialTrajBatch {
    pub fn batch_size(&self) -> usize {
        self.windows.len()
    }
}

pub fn sample_partial_batch(
    set: &TrajectorySet,
    k: usize,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PartialTrajBatch> {
    if k == 0 {
        return Err(Error::InvalidArgument("window length must be positive".into()));
    }
    WindowSampler::new(PairTable::new(set)?, k).sample(k, batch, rng)
}

/// Discriminator loss on real (label 1) and fake (label 0) inputs with its gradient.
pub fn discriminator_loss(d: &Mlp, real: &Matrix, fake: &Matrix) -> Result<(f64, Gradients)> {
    let (lr, tape_r) = d.forward(real)?;
    let (lf, tape_f) = d.forward(fake)?;
    let (loss_r, g_r) = bce_with_logits_const(&lr, 1.0)?;
    let (loss_f, g_f) = bce_with_logits_const(&lf, 0.0)?;
    let (mut grads, _) = d.backward(tape_r, &g_r)?;
    let (gf, _) = d.backward(tape_f, &g_f)?;
    grads.add_assign(&gf);
    Ok((loss_r + loss_f, grads))
}

/// Loss the generator minimizes on fake inputs, with its gradient w.r.t. those inputs.
fn generator_input_grad(d: &Mlp, fake: &Matrix, form: GeneratorLoss) -> Result<(f64, Matrix)> {
    let (logits, tape) = d.forward(fake)?;
    let (loss, upstream) = match form {
        GeneratorLoss::NonSaturating => bce_with_logits_const(&logits, 1.0)?,
        GeneratorLoss::Saturating => {
            let (l, mut g) = bce_with_logits_const(&logits, 0.0)?;
            g.scale_in_place(-1.0);
            (-l, g)
        }
    };
    let (_, input_grad) = d.backward(tape, &upstream)?;
    Ok((loss, input_grad))
}

/// Result of one adversarial term for window length `k`.
#[derive(Clone, Debug)]
pub struct AdversarialLoss {
    /// Discriminator loss (source labeled 1, target 0).
    pub loss: f64,
    pub disc_grads: Gradients,
    /// Generator objective and its gradient w.r.t. the target encoder.
    pub gen_loss: f64,
    pub enc_grads: Gradients,
}

struct Encoded {
    z_src: Matrix,
    c_src: Matrix,
    z_tar: Matrix,
    tape_e: Tape,
    c_tar: Matrix,
    tape_f: Tape,
}

fn check_pair(model: &TransferModel, k: usize, src: &PartialTrajBatch, tar: &PartialTrajBatch) -> Result<()> {
    if k == 0 || k > model.max_len() {
        return Err(Error::Shape(format!("window length {k} outside 1..={}", model.max_len())));
    }
    if src.k != k || tar.k != k {
        return Err(Error::Shape(format!(
            "batches hold windows of length {} and {}, expected {k}",
            src.k, tar.k
        )));
    }
    Ok(())
}

fn encode(model: &TransferModel, src: &PartialTrajBatch, tar: &PartialTrajBatch) -> Result<Encoded> {
    let z_src = model.encode_src(&src.inputs)?;
    let c_src = model.f.predict(&z_src)?;
    let (z_tar, tape_e) = model.e_tar.forward(&model.tar_norm.apply(&tar.inputs)?)?;
    let (c_tar, tape_f) = model.f.forward(&z_tar)?;
    Ok(Encoded {
        z_src,
        c_src,
        z_tar,
        tape_e,
        c_tar,
        tape_f,
    })
}

fn jitter(mut m: Matrix, sigma: f64, rng: &mut ChaCha8Rng) -> Matrix {
    if sigma > 0.0 {
        for v in m.as_mut_slice() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

/// Concatenates each window's `k` rows into one row.
fn windows_to_rows(m: &Matrix, k: usize) -> Result<Matrix> {
    let (rows, cols) = m.shape();
    m.clone().reshape(rows / k, cols * k)
}

/// Feature-level term `L_fea^k`: `D_k` on concatenated latents.
pub fn feature_disc_loss(
    model: &TransferModel,
    k: usize,
    src: &PartialTrajBatch,
    tar: &PartialTrajBatch,
) -> Result<AdversarialLoss> {
    check_pair(model, k, src, tar)?;
    let enc = encode(model, src, tar)?;
    let d = &model.feat_discs[k - 1];
    let real = windows_to_rows(&enc.z_src, k)?;
    let fake = windows_to_rows(&enc.z_tar, k)?;
    let (loss, disc_grads) = discriminator_loss(d, &real, &fake)?;
    let (gen_loss, g_fake) = generator_input_grad(d, &fake, model.hyper.generator_loss)?;
    let upstream = g_fake.reshape(enc.z_tar.rows(), enc.z_tar.cols())?;
    let (enc_grads, _) = model.e_tar.backward(enc.tape_e, &upstream)?;
    Ok(AdversarialLoss {
        loss,
        disc_grads,
        gen_loss,
        enc_grads,
    })
}

/// Confidence-level term `L_con^k`: `D'_k` on concatenated confidences. The
/// encoder gradient flows through the frozen decoder `F`.
pub fn confidence_disc_loss(
    model: &TransferModel,
    k: usize,
    src: &PartialTrajBatch,
    tar: &PartialTrajBatch,
) -> Result<AdversarialLoss> {
    check_pair(model, k, src, tar)?;
    let enc = encode(model, src, tar)?;
    let d = &model.conf_discs[k - 1];
    let real = windows_to_rows(&enc.c_src, k)?;
    let fake = windows_to_rows(&enc.c_tar, k)?;
    let (loss, disc_grads) = discriminator_loss(d, &real, &fake)?;
    let (gen_loss, g_fake) = generator_input_grad(d, &fake, model.hyper.generator_loss)?;
    let upstream_c = g_fake.reshape(enc.c_tar.rows(), 1)?;
    let (_, upstream_z) = model.f.backward(enc.tape_f, &upstream_c)?;
    let (enc_grads, _) = model.e_tar.backward(enc.tape_e, &upstream_z)?;
    Ok(AdversarialLoss {
        loss,
        disc_grads,
        gen_loss,
        enc_grads,
    })
}

/// Generator objective `sum_k L_fea^k + lambda L_con^k` and its gradient for
/// `E_tar`, using one encoder pass per window length.
fn generator_step_grads(
    model: &TransferModel,
    batches: &[(PartialTrajBatch, PartialTrajBatch)],
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients)> {
    let lambda = model.hyper.lambda;
    let form = model.hyper.generator_loss;
    let mut total = Gradients::zeros_like(&model.e_tar);
    let mut objective = 0.0;
    for (i, (_, tar)) in batches.iter().enumerate() {
        let k = i + 1;
        let (z_tar, tape_e) = model.e_tar.forward(&model.tar_norm.apply(&tar.inputs)?)?;
        let (gen_fea, g_z) =
            generator_input_grad(&model.feat_discs[k - 1], &jitter(windows_to_rows(&z_tar, k)?, noise, rng), form)?;
        let mut upstream = g_z.reshape(z_tar.rows(), z_tar.cols())?;
        objective += gen_fea;
        if lambda != 0.0 {
            let (c_tar, tape_f) = model.f.forward(&z_tar)?;
            let (gen_con, g_c) =
                generator_input_grad(&model.conf_discs[k - 1], &jitter(windows_to_rows(&c_tar, k)?, noise, rng), form)?;
            let (_, mut g_zc) = model.f.backward(tape_f, &g_c.reshape(c_tar.rows(), 1)?)?;
            g_zc.scale_in_place(lambda);
            upstream.add_assign(&g_zc);
            objective += lambda * gen_con;
        }
        let (g, _) = model.e_tar.backward(tape_e, &upstream)?;
        total.add_assign(&g);
    }
    Ok((objective, total))
}

/// Stage-two losses recorded at one step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepLosses {
    pub step: usize,
    /// Discriminator losses per window length, after the step's updates.
    pub loss_fea: Vec<f64>,
    pub loss_con: Vec<f64>,
    pub generator: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransferHistory {
    pub stage1: Vec<f64>,
    pub stage2: Vec<StepLosses>,
    pub early_stopped_at: Option<usize>,
}

#[derive(Serialize)]
struct MetricLine {
    step: usize,
    stage: u8,
    k: Option<usize>,
    loss_fea: Option<f64>,
    loss_con: Option<f64>,
    loss_reg: Option<f64>,
}

impl TransferHistory {
    /// Metrics stream, one line per logged step (and per `k` in stage two).
    pub fn metrics_jsonl(&self, every: usize) -> String {
        let every = every.max(1);
        let mut out = String::new();
        let mut push = |line: MetricLine| {
            out.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
            out.push('\n');
        };
        let last1 = self.stage1.len().saturating_sub(1);
        for (step, &l) in self.stage1.iter().enumerate() {
            if step % every == 0 || step == last1 {
                push(MetricLine {
                    step,
                    stage: 1,
                    k: None,
                    loss_fea: None,
                    loss_con: None,
                    loss_reg: Some(l),
                });
            }
        }
        let last2 = self.stage2.len().saturating_sub(1);
        for (i, s) in self.stage2.iter().enumerate() {
            if i % every != 0 && i != last2 {
                continue;
            }
            for (k, (&f, &c)) in s.loss_fea.iter().zip(&s.loss_con).enumerate() {
                push(MetricLine {
                    step: s.step,
                    stage: 2,
                    k: Some(k + 1),
                    loss_fea: Some(f),
                    loss_con: Some(c),
                    loss_reg: None,
                });
            }
        }
        out
    }
}

/// Stage one: regress `F(E_src(s, a))` onto the source confidence labels.
/// Returns the per-step batch loss.
pub fn train_source(model: &mut TransferModel, labeled_src: &TrajectorySet) -> Result<Vec<f64>> {
    if !labeled_src.is_labeled() {
        return Err(Error::InvalidArgument(
            "source demonstrations must carry confidence labels".into(),
        ));
    }
    let table = PairTable::new(labeled_src)?;
    if table.inputs.cols() != model.e_src.input_dim() {
        return Err(Error::Shape(format!(
            "source pairs have width {}, encoder expects {}",
            table.inputs.cols(),
            model.e_src.input_dim()
        )));
    }
    let hyper = model.hyper.clone();
    model.src_norm = Standardizer::fit(&table.inputs)?;
    let inputs = model.src_norm.apply(&table.inputs)?;
    let adam = AdamConfig::with_lr(hyper.lr_stage1);
    let mut opt_e = OptState::new(&model.e_src, adam);
    let mut opt_f = OptState::new(&model.f, adam);
    let mut rng = seed::rng(seed::derive(hyper.seed, "stage1"));
    let n = table.num_pairs();
    let b = hyper.batch_size.min(n);
    let mut history = Vec::with_capacity(hyper.stage1_steps);
    let mut rows = Vec::with_capacity(b);
    for step in 0..hyper.stage1_steps {
        rows.clear();
        rows.extend((0..b).map(|_| rng.random_range(0..n)));
        let mut x = Vec::with_capacity(b * inputs.cols());
        for &r in &rows {
            x.extend_from_slice(inputs.row(r));
        }
        let x = Matrix::from_vec(b, inputs.cols(), x)?;
        let y = Matrix::from_vec(b, 1, rows.iter().map(|&r| table.labels[r]).collect())?;
        let (z, tape_e) = model.e_src.forward(&x)?;
        let (c, tape_f) = model.f.forward(&z)?;
        let (loss, g_c) = mse_loss(&c, &y)?;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("stage 1 loss {loss} at step {step}")));
        }
        let (g_f, g_z) = model.f.backward(tape_f, &g_c)?;
        let (g_e, _) = model.e_src.backward(tape_e, &g_z)?;
        opt_f.step(&mut model.f, &g_f)?;
        opt_e.step(&mut model.e_src, &g_e)?;
        history.push(loss);
    }
    model.source_trained = true;
    Ok(history)
}

/// Mean squared error of the source predictor on a labeled set.
pub fn source_mse(model: &TransferModel, labeled: &TrajectorySet) -> Result<f64> {
    let table = PairTable::new(labeled)?;
    let pred = model.predict_source_inputs(&table.inputs)?;
    Ok(pred
        .iter()
        .zip(&table.labels)
        .map(|(p, y)| (p - y) * (p - y))
        .sum::<f64>()
        / pred.len() as f64)
}

/// Stage two: multi-length feature- and confidence-level matching. `E_src`
/// and `F` are left untouched.
pub fn train_transfer(
    model: &mut TransferModel,
    labeled_src: &TrajectorySet,
    unlabeled_tar: &TrajectorySet,
) -> Result<Vec<StepLosses>> {
    train_transfer_with(model, labeled_src, unlabeled_tar, |_, _| {}).map(|(h, _)| h)
}

/// [`train_transfer`] with a per-step observer; also returns the early-stop step.
pub fn train_transfer_with(
    model: &mut TransferModel,
    labeled_src: &TrajectorySet,
    unlabeled_tar: &TrajectorySet,
    mut observe: impl FnMut(&StepLosses, &TransferModel),
) -> Result<(Vec<StepLosses>, Option<usize>)> {
    if !model.source_trained {
        return Err(Error::InvalidArgument(
            "train_source must run before train_transfer".into(),
        ));
    }
    let hyper = model.hyper.clone();
    let kmax = model.max_len();
    for (side, set) in [("source", labeled_src), ("target", unlabeled_tar)] {
        if set.is_empty() || set.min_len() < kmax {
            return Err(Error::InvalidArgument(format!(
                "every {side} trajectory needs at least K = {kmax} pairs (shortest has {})",
                set.min_len()
            )));
        }
    }
    // E_src and F are frozen, so source windows are drawn from precomputed
    // `[z, F(z)]` rows.
    let mut src_table = PairTable::new(labeled_src)?;
    if src_table.inputs.cols() != model.e_src.input_dim() {
        return Err(Error::Shape(format!(
            "source pairs have width {}, encoder expects {}",
            src_table.inputs.cols(),
            model.e_src.input_dim()
        )));
    }
    let z_all = model.encode_src(&src_table.inputs)?;
    let c_all = model.f.predict(&z_all)?;
    src_table.inputs = hcat(&z_all, &c_all)?;
    let latent = z_all.cols();
    let src = WindowSampler::new(src_table, kmax);
    let tar = WindowSampler::new(PairTable::new(unlabeled_tar)?, kmax);
    if tar.table().inputs.cols() != model.e_tar.input_dim() {
        return Err(Error::Shape(format!(
            "target pairs have width {}, encoder expects {}",
            tar.table().inputs.cols(),
            model.e_tar.input_dim()
        )));
    }
    if hyper.init_target_from_source {
        if model.e_tar.input_dim() != model.e_src.input_dim() {
            return Err(Error::Config(
                "init_target_from_source needs equal source and target pair widths".into(),
            ));
        }
        model.e_tar = model.e_src.clone();
        model.tar_norm = model.src_norm.clone();
    } else {
        model.tar_norm = Standardizer::fit(&tar.table().inputs)?;
    }

    let adam = |lr| AdamConfig {
        beta1: hyper.beta1_stage2,
        ..AdamConfig::with_lr(lr)
    };
    let mut opt_e = OptState::new(&model.e_tar, adam(hyper.lr_encoder));
    let disc_cfg = adam(hyper.lr_disc);
    let mut opt_fea: Vec<OptState> = model.feat_discs.iter().map(|d| OptState::new(d, disc_cfg)).collect();
    let mut opt_con: Vec<OptState> = model.conf_discs.iter().map(|d| OptState::new(d, disc_cfg)).collect();
    let mut rng = seed::rng(seed::derive(hyper.seed, "stage2"));
    let b = hyper.batch_size;
    let mut history = Vec::with_capacity(hyper.stage2_steps);
    let mut calm_steps = 0usize;
    let mut stopped = None;

    for step in 0..hyper.stage2_steps {
        let batches = (1..=kmax)
            .map(|k| Ok((src.sample(k, b, &mut rng)?, tar.sample(k, b, &mut rng)?)))
            .collect::<Result<Vec<_>>>()?;

        let noise = hyper.instance_noise * (1.0 - step as f64 / hyper.stage2_steps as f64);
        let (generator, g_enc) = generator_step_grads(model, &batches, noise, &mut rng)?;
        if !generator.is_finite() || !g_enc.is_finite() {
            return Err(Error::Divergence(format!(
                "generator objective {generator} at stage 2 step {step}"
            )));
        }
        opt_e.step(&mut model.e_tar, &g_enc)?;

        let mut loss_fea = vec![0.0; kmax];
        let mut loss_con = vec![0.0; kmax];
        for _ in 0..hyper.disc_steps_per_enc_step {
            for (i, (sb, tb)) in batches.iter().enumerate() {
                let k = i + 1;
                let (enc_s, c_s) = split_cols(&sb.inputs, latent)?;
                let enc_t = model.e_tar.predict(&model.tar_norm.apply(&tb.inputs)?)?;
                let c_t = model.f.predict(&enc_t)?;
                let (lf, gf) = discriminator_loss(
                    &model.feat_discs[i],
                    &jitter(windows_to_rows(&enc_s, k)?, noise, &mut rng),
                    &jitter(windows_to_rows(&enc_t, k)?, noise, &mut rng),
                )?;
                let (lc, gc) = discriminator_loss(
                    &model.conf_discs[i],
                    &jitter(windows_to_rows(&c_s, k)?, noise, &mut rng),
                    &jitter(windows_to_rows(&c_t, k)?, noise, &mut rng),
                )?;
                if !lf.is_finite() || !lc.is_finite() {
                    return Err(Error::Divergence(format!(
                        "discriminator loss (fea {lf}, con {lc}) for k = {k} at stage 2 step {step}"
                    )));
                }
                opt_fea[i].step(&mut model.feat_discs[i], &gf)?;
                opt_con[i].step(&mut model.conf_discs[i], &gc)?;
                loss_fea[i] = lf;
                loss_con[i] = lc;
            }
        }
        let record = StepLosses {
            step,
            loss_fea,
            loss_con,
            generator,
        };
        observe(&record, model);
        let calm = record
            .loss_fea
            .iter()
            .chain(&record.loss_con)
            .all(|l| (l - INDISTINGUISHABLE).abs() <= hyper.early_stop_tol);
        history.push(record);
        calm_steps = if calm { calm_steps + 1 } else { 0 };
        if hyper.early_stop_window > 0 && calm_steps >= hyper.early_stop_window {
            stopped = Some(step);
            break;
        }
    }
    Ok((history, stopped))
}

fn hcat(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut data = Vec::with_capacity(a.rows() * (a.cols() + b.cols()));
    for (ra, rb) in a.iter_rows().zip(b.iter_rows()) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    Matrix::from_vec(a.rows(), a.cols() + b.cols(), data)
}

fn split_cols(m: &Matrix, at: usize) -> Result<(Matrix, Matrix)> {
    let (mut left, mut right) = (Vec::with_capacity(m.rows() * at), Vec::new());
    for r in m.iter_rows() {
        left.extend_from_slice(&r[..at]);
        right.extend_from_slice(&r[at..]);
    }
    Ok((
        Matrix::from_vec(m.rows(), at, left)?,
        Matrix::from_vec(m.rows(), m.cols() - at, right)?,
    ))
}

/// Runs both stages on fresh networks.
pub fn fit(
    labeled_src: &TrajectorySet,
    unlabeled_tar: &TrajectorySet,
    hyper: &TransferHyper,
) -> Result<(TransferModel, TransferHistory)> {
    let mut model = TransferModel::for_sets(labeled_src, unlabeled_tar, hyper)?;
    let stage1 = train_source(&mut model, labeled_src)?;
    let (stage2, early_stopped_at) = train_transfer_with(&mut model, labeled_src, unlabeled_tar, |_, _| {})?;
    Ok((
        model,
        TransferHistory {
            stage1,
            stage2,
            early_stopped_at,
        },
    ))
}

/// Equilibrium discriminator for two categorical distributions.
pub fn optimal_discriminator(p_src: &[f64], p_tar: &[f64]) -> Result<Vec<f64>> {
    if p_src.len() != p_tar.len() {
        return Err(Error::Shape("distributions have different supports".into()));
    }
    for p in [p_src, p_tar] {
        if p.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("{p:?} is not a probability vector")));
        }
    }
    p_src
        .iter()
        .zip(p_tar)
        .enumerate()
        .map(|(i, (&s, &t))| {
            if s + t == 0.0 {
                Err(Error::InvalidArgument(format!("atom {i} has zero mass on both sides")))
            } else {
                Ok(s / (s + t))
            }
        })
        .collect()
}

/// Trains a discriminator alone on fixed real/fake samples with Adam,
/// resampling minibatches each step. Returns the per-step loss.
pub fn train_discriminator(
    d: &mut Mlp,
    real: &Matrix,
    fake: &Matrix,
    steps: usize,
    batch: usize,
    lr: f64,
    seed_value: u64,
) -> Result<Vec<f64>> {
    let mut opt = OptState::new(d, AdamConfig::with_lr(lr));
    let mut rng = seed::rng(seed_value);
    let mut losses = Vec::with_capacity(steps);
    let pick = |m: &Matrix, rng: &mut ChaCha8Rng| {
        let mut data = Vec::with_capacity(batch * m.cols());
        for _ in 0..batch {
            data.extend_from_slice(m.row(rng.random_range(0..m.rows())));
        }
        Matrix::from_vec(batch, m.cols(), data)
    };
    for _ in 0..steps {
        let r = pick(real, &mut rng)?;
        let f = pick(fake, &mut rng)?;
        let (loss, g) = discriminator_loss(d, &r, &f)?;
        opt.step(d, &g)?;
        losses.push(loss);
    }
    Ok(losses)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    hyper: TransferHyper,
    e_src: MlpDocument,
    e_tar: MlpDocument,
    f: MlpDocument,
    feat_discs: Vec<MlpDocument>,
    conf_discs: Vec<MlpDocument>,
    src_norm: Standardizer,
    tar_norm: Standardizer,
    source_trained: bool,
}

pub fn save_model(model: &TransferModel) -> String {
    let doc = Checkpoint {
        version: CHECKPOINT_VERSION,
        hyper: model.hyper.clone(),
        e_src: MlpDocument::from_params(&model.e_src),
        e_tar: MlpDocument::from_params(&model.e_tar),
        f: MlpDocument::from_params(&model.f),
        feat_discs: model.feat_discs.iter().map(MlpDocument::from_params).collect(),
        conf_discs: model.conf_discs.iter().map(MlpDocument::from_params).collect(),
        src_norm: model.src_norm.clone(),
        tar_norm: model.tar_norm.clone(),
        source_trained: model.source_trained,
    };
    serde_json::to_string(&doc).expect("plain data serializes")
}

pub fn load_model(text: &str) -> Result<TransferModel> {
    let probe: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("model checkpoint: {e}")))?;
    match probe.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        other => {
            return Err(Error::Parse(format!(
                "model checkpoint version {other:?}, expected {CHECKPOINT_VERSION}"
            )))
        }
    }
    let doc: Checkpoint =
        serde_json::from_value(probe).map_err(|e| Error::Parse(format!("model checkpoint: {e}")))?;
    doc.hyper.validate()?;
    let k = doc.hyper.max_len;
    if doc.feat_discs.len() != k || doc.conf_discs.len() != k {
        return Err(Error::Shape(format!(
            "checkpoint has {} and {} discriminators for K = {k}",
            doc.feat_discs.len(),
            doc.conf_discs.len()
        )));
    }
    let model = TransferModel {
        e_src: doc.e_src.to_params()?,
        e_tar: doc.e_tar.to_params()?,
        f: doc.f.to_params()?,
        feat_discs: doc.feat_discs.iter().map(MlpDocument::to_params).collect::<Result<_>>()?,
        conf_discs: doc.conf_discs.iter().map(MlpDocument::to_params).collect::<Result<_>>()?,
        src_norm: doc.src_norm,
        tar_norm: doc.tar_norm,
        source_trained: doc.source_trained,
        hyper: doc.hyper,
    };
    let z = model.hyper.latent_dim;
    let shapes_ok = model.e_src.output_dim() == z
        && model.e_tar.output_dim() == z
        && model.f.input_dim() == z
        && model.f.output_dim() == 1
        && model.src_norm.dim() == model.e_src.input_dim()
        && model.tar_norm.dim() == model.e_tar.input_dim()
        && (1..=k).all(|j| {
            model.feat_discs[j - 1].input_dim() == j * z && model.conf_discs[j - 1].input_dim() == j
        });
    if !shapes_ok {
        return Err(Error::Shape("checkpoint networks have inconsistent shapes".into()));
    }
    Ok(model)
}
