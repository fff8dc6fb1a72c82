//! Policy evaluation, predictor scoring, significance tests, and the two
//! experiment runners (method ablation, varying source composition).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::factorial::binomial;

use crate::demo::{
    generate_dataset_with, label_confidence, parse_composition, resolve_composition, Calibration,
    Trajectory, TrajectorySet,
};
use crate::env::{make_env_pair, mean_std, rollout, EnvPair, Mdp, PairConfig, Policy};
use crate::error::{Error, Result};
use crate::imitate::{
    policy_network, train_bc_unweighted, train_weighted_bc, train_weighted_gail, weight_dataset,
    BcHyper, GailHyper, LearnedPolicy, WeightSource, WeightedDataset,
};
use crate::nn::Standardizer;
use crate::par::Execution;
use crate::seed;
use crate::transfer::{fit, TransferHyper, TransferModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    GailUnweighted,
    OursFeature,
    OursConfidence,
    Ours,
    Oracle,
}

impl MethodId {
    /// The ablation ladder, weakest first.
    pub const ALL: [MethodId; 5] = [
        MethodId::GailUnweighted,
        MethodId::OursFeature,
        MethodId::OursConfidence,
        MethodId::Ours,
        MethodId::Oracle,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MethodId::GailUnweighted => "gail_unweighted",
            MethodId::OursFeature => "ours_feature",
            MethodId::OursConfidence => "ours_confidence",
            MethodId::Ours => "ours",
            MethodId::Oracle => "oracle",
        }
    }

    /// Transfer hyperparameters for the methods that learn a predictor.
    pub fn transfer_hyper(&self, base: &TransferHyper) -> Result<Option<TransferHyper>> {
        let mut h = base.clone();
        match self {
            MethodId::GailUnweighted | MethodId::Oracle => return Ok(None),
            MethodId::OursFeature => {
                h.lambda = 0.0;
                h.max_len = 1;
            }
            MethodId::OursConfidence => {
                if h.lambda == 0.0 {
                    return Err(Error::Config("ours_confidence needs lambda > 0".into()));
                }
                h.max_len = 1;
            }
            MethodId::Ours => {
                if h.lambda == 0.0 || h.max_len < 2 {
                    return Err(Error::Config("ours needs lambda > 0 and max_len > 1".into()));
                }
            }
        }
        Ok(Some(h))
    }
}

impl fmt::Display for MethodId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
}

/// `n` rollouts with seeds `seed..seed + n`.
pub fn eval_policy(env: &Mdp, policy: &dyn Policy, n: usize, seed_value: u64) -> Result<EvalResult> {
    eval_policy_with(Execution::Sequential, env, policy, n, seed_value)
}

pub fn eval_policy_with(
    exec: Execution,
    env: &Mdp,
    policy: &dyn Policy,
    n: usize,
    seed_value: u64,
) -> Result<EvalResult> {
    if n == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one rollout".into()));
    }
    let trajs = exec
        .map_range(n, |i| rollout(env, policy, seed_value.wrapping_add(i as u64)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let returns: Vec<f64> = trajs.iter().map(|t| t.total_return).collect();
    let successes = trajs.iter().filter(|t| env.success(t.final_state())).count();
    let (mean_return, std_return) = mean_std(&returns);
    Ok(EvalResult {
        mean_return,
        std_return,
        success_rate: successes as f64 / n as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorScore {
    /// `None` when the labels take fewer than three distinct values.
    pub spearman: Option<f64>,
    pub mae: f64,
}

/// Spearman correlation between each trajectory's mean predicted confidence
/// and its label, plus the per-pair mean absolute error.
pub fn score_confidence_predictor(
    mut pred: impl FnMut(&Trajectory) -> Result<Vec<f64>>,
    labeled: &TrajectorySet,
) -> Result<PredictorScore> {
    let mut means = Vec::with_capacity(labeled.len());
    let mut labels = Vec::with_capacity(labeled.len());
    let (mut abs_err, mut pairs) = (0.0, 0usize);
    for t in &labeled.trajectories {
        let label = t
            .confidence
            .ok_or_else(|| Error::InvalidArgument("scoring needs labeled trajectories".into()))?;
        let p = pred(t)?;
        if p.len() != t.len() {
            return Err(Error::Shape(format!(
                "{} predictions for a trajectory of {} pairs",
                p.len(),
                t.len()
            )));
        }
        if p.is_empty() {
            continue;
        }
        abs_err += p.iter().map(|c| (c - label).abs()).sum::<f64>();
        pairs += p.len();
        means.push(p.iter().sum::<f64>() / p.len() as f64);
        labels.push(label);
    }
    if pairs == 0 {
        return Err(Error::InvalidArgument("no state-action pairs to score".into()));
    }
    Ok(PredictorScore {
        spearman: spearman(&means, &labels),
        mae: abs_err / pairs as f64,
    })
}

/// 1-based ranks, ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation of `pred` against `labels`. Undefined (`None`) when the
/// labels have fewer than three distinct values; constant predictions score 0.
pub fn spearman(pred: &[f64], labels: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), labels.len(), "spearman needs paired samples");
    let mut distinct = labels.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return None;
    }
    let (rp, rl) = (average_ranks(pred), average_ranks(labels));
    let n = rp.len() as f64;
    let (mp, ml) = (rp.iter().sum::<f64>() / n, rl.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rp.iter().zip(&rl) {
        sxy += (a - mp) * (b - ml);
        sxx += (a - mp) * (a - mp);
        syy += (b - ml) * (b - ml);
    }
    if sxx == 0.0 {
        return Some(0.0);
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn sample_moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided t-test p-value: Welch's unequal-variance form, or the pooled
/// Student form when `pooled` is set.
pub fn t_test(a: &[f64], b: &[f64], pooled: bool) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "t-test needs two values per sample, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-test sample".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ((ma, va), (mb, vb)) = (sample_moments(a), sample_moments(b));
    let (se2, df) = if pooled {
        let sp = ((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0);
        (sp * (1.0 / na + 1.0 / nb), na + nb - 2.0)
    } else {
        let (qa, qb) = (va / na, vb / nb);
        let se2 = qa + qb;
        (se2, se2 * se2 / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0)))
    };
    if se2 == 0.0 {
        return Ok(if ma == mb { 1.0 } else { 0.0 });
    }
    let t2 = (ma - mb) * (ma - mb) / se2;
    Ok(beta_reg(df / 2.0, 0.5, df / (df + t2)).clamp(0.0, 1.0))
}

/// Welch t statistic and degrees of freedom, `a` minus `b`.
pub fn welch_statistic(a: &[f64], b: &[f64]) -> (f64, f64) {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let ((ma, va), (mb, vb)) = (sample_moments(a), sample_moments(b));
    let (qa, qb) = (va / na, vb / nb);
    let t = (ma - mb) / (qa + qb).sqrt();
    let df = (qa + qb) * (qa + qb) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
    (t, df)
}

/// Exact one-sided sign test: `P(X >= wins)` for `X ~ Binomial(trials, 1/2)`.
pub fn sign_test(wins: usize, trials: usize) -> Result<f64> {
    if wins > trials {
        return Err(Error::InvalidArgument(format!("{wins} wins out of {trials} trials")));
    }
    if trials == 0 {
        return Ok(1.0);
    }
    let tail: f64 = (wins..=trials).map(|k| binomial(trials as u64, k as u64)).sum();
    Ok((tail / 2f64.powi(trials as i32)).min(1.0))
}

/// Sign test that `a` beats `b` pair by pair; ties are dropped.
/// Returns `(wins, informative pairs, p)`.
pub fn paired_sign_test(a: &[f64], b: &[f64]) -> Result<(usize, usize, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape("sign test needs paired samples".into()));
    }
    let wins = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let trials = a.iter().zip(b).filter(|(x, y)| x != y).count();
    Ok((wins, trials, sign_test(wins, trials)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImitationAlgorithm {
    #[default]
    Bc,
    Gail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImitateHyper {
    pub algorithm: ImitationAlgorithm,
    pub bc: BcHyper,
    pub gail: GailHyper,
}

impl Default for ImitateHyper {
    fn default() -> Self {
        ImitateHyper {
            algorithm: ImitationAlgorithm::Bc,
            bc: BcHyper::default(),
            gail: GailHyper::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rollouts: usize,
    pub seed: u64,
    pub methods: Vec<MethodId>,
    /// Pooled-variance t-test instead of Welch.
    pub pooled: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rollouts: 100,
            seed: 0,
            methods: MethodId::ALL.to_vec(),
            pooled: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Compositions {
    pub source: String,
    pub target: String,
    /// Source compositions for the varying-composition study.
    pub varying: Vec<String>,
    /// Fixed target composition for that study.
    pub varying_target: String,
}

impl Default for Compositions {
    fn default() -> Self {
        Compositions {
            source: "94-5-1".into(),
            target: "94-5-1".into(),
            varying: ["1-5-94", "1-49-50", "1-94-5", "47-48-5", "94-1-5"]
                .map(String::from)
                .to_vec(),
            varying_target: "1-5-94".into(),
        }
    }
}

/// Everything an experiment needs besides file locations.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub pair: PairConfig,
    pub compositions: Compositions,
    pub transfer: TransferHyper,
    pub imitate: ImitateHyper,
    pub eval: EvalConfig,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: MethodId,
    pub seed: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
    /// Predictor quality on a held-out labeled target set (learned methods).
    pub spearman: Option<f64>,
    pub mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub pair: PairConfig,
    pub source_composition: String,
    pub target_composition: String,
    pub transfer: TransferHyper,
    pub imitate: ImitateHyper,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub metadata: TableMetadata,
    pub rows: Vec<ResultRow>,
    /// `"{a}_vs_{b}"` t-test p-values on per-seed mean returns, `a` above `b`
    /// on the ladder.
    pub p_values: BTreeMap<String, f64>,
}

pub const CSV_HEADER: &str = "method,seed,mean_return,std_return,success_rate";

impl ResultsTable {
    pub fn methods(&self) -> Vec<MethodId> {
        let mut m: Vec<MethodId> = self.rows.iter().map(|r| r.method).collect();
        m.sort();
        m.dedup();
        m
    }

    pub fn returns(&self, method: MethodId) -> Vec<f64> {
        self.rows.iter().filter(|r| r.method == method).map(|r| r.mean_return).collect()
    }

    pub fn spearmans(&self, method: MethodId) -> Vec<Option<f64>> {
        self.rows.iter().filter(|r| r.method == method).map(|r| r.spearman).collect()
    }

    pub fn mean_return(&self, method: MethodId) -> f64 {
        mean_std(&self.returns(method)).0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method, r.seed, r.mean_return, r.std_return, r.success_rate
            ));
        }
        out
    }

    /// Predictor scores, one line per learned (method, seed).
    pub fn predictor_csv(&self) -> String {
        let mut out = String::from("method,seed,spearman,mae\n");
        for r in self.rows.iter().filter(|r| r.mae.is_some()) {
            let s = r.spearman.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.method, r.seed, s, r.mae.unwrap_or(f64::NAN)));
        }
        out
    }

    pub fn p_values_json(&self) -> String {
        let doc = serde_json::json!({ "pairs": self.p_values });
        serde_json::to_string_pretty(&doc).expect("p-values serialize") + "\n"
    }
}

/// Pairwise p-values of per-seed mean returns, higher ladder rung first.
pub fn pairwise_p_values(rows: &[ResultRow], pooled: bool) -> Result<BTreeMap<String, f64>> {
    let mut methods: Vec<MethodId> = rows.iter().map(|r| r.method).collect();
    methods.sort();
    methods.dedup();
    let mut out = BTreeMap::new();
    let returns = |m: MethodId| -> Vec<f64> {
        rows.iter().filter(|r| r.method == m).map(|r| r.mean_return).collect()
    };
    for (i, &hi) in methods.iter().enumerate().rev() {
        for &lo in &methods[..i] {
            let (a, b) = (returns(hi), returns(lo));
            if a.len() >= 2 && b.len() >= 2 {
                out.insert(format!("{hi}_vs_{lo}"), t_test(&a, &b, pooled)?);
            }
        }
    }
    Ok(out)
}

/// Datasets for one seed. Every method in a run sees the same ones.
#[derive(Clone, Debug)]
pub struct SeedData {
    pub seed: u64,
    pub source: TrajectorySet,
    /// Target demonstrations with ground-truth labels attached; methods other
    /// than the oracle only see [`TrajectorySet::unlabeled`].
    pub target: TrajectorySet,
    /// Independent labeled target set for predictor scoring.
    pub holdout: TrajectorySet,
}

pub fn seed_data(
    pair: &EnvPair,
    source: &[(crate::env::Grade, usize)],
    target: &[(crate::env::Grade, usize)],
    seed_value: u64,
) -> Result<SeedData> {
    let exec = Execution::Sequential;
    Ok(SeedData {
        seed: seed_value,
        source: label_confidence(&generate_dataset_with(
            exec,
            &pair.source,
            source,
            seed::derive(seed_value, "source_demos"),
        )?)?,
        target: label_confidence(&generate_dataset_with(
            exec,
            &pair.target,
            target,
            seed::derive(seed_value, "target_demos"),
        )?)?,
        holdout: label_confidence(&generate_dataset_with(
            exec,
            &pair.target,
            target,
            seed::derive(seed_value, "target_holdout"),
        )?)?,
    })
}

/// Trains the imitation policy on `data`.
pub fn imitate(env: &Mdp, data: &WeightedDataset, hyper: &ImitateHyper, unweighted: bool) -> Result<LearnedPolicy> {
    let bc = |d: &WeightedDataset| {
        if unweighted {
            train_bc_unweighted(env, d, &hyper.bc)
        } else {
            train_weighted_bc(env, d, &hyper.bc)
        }
    };
    match hyper.algorithm {
        ImitationAlgorithm::Bc => Ok(bc(data)?.0),
        ImitationAlgorithm::Gail => {
            let net = policy_network(env, &hyper.gail.policy_hidden, seed::derive(hyper.gail.seed, "gail_init"))?;
            let init = LearnedPolicy::new(net, Standardizer::fit(&data.states)?, env, hyper.gail.sigma)?;
            let data = if unweighted {
                WeightedDataset {
                    weights: vec![1.0; data.len()],
                    ..data.clone()
                }
            } else {
                data.clone()
            };
            Ok(train_weighted_gail(&init, env, &data, &hyper.gail)?.0)
        }
    }
}

/// One (method, seed) cell: weights, imitation, evaluation, predictor score.
pub fn run_cell(
    pair: &EnvPair,
    data: &SeedData,
    method: MethodId,
    exp: &Experiment,
) -> Result<ResultRow> {
    let tar_unlabeled = data.target.unlabeled();
    let mut transfer = exp.transfer.clone();
    transfer.seed = seed::mix(exp.transfer.seed, data.seed);
    let model: Option<TransferModel> = match method.transfer_hyper(&transfer)? {
        Some(h) => Some(fit(&data.source, &tar_unlabeled, &h)?.0),
        None => None,
    };
    let weighted = match (&model, method) {
        (Some(m), _) => weight_dataset(&tar_unlabeled, WeightSource::Predictor(m))?,
        (None, MethodId::Oracle) => weight_dataset(&data.target, WeightSource::Oracle)?,
        (None, _) => weight_dataset(&tar_unlabeled, WeightSource::Constant(1.0))?,
    };
    let mut imitate_hyper = exp.imitate.clone();
    imitate_hyper.bc.seed = seed::mix(exp.imitate.bc.seed, data.seed);
    imitate_hyper.gail.seed = seed::mix(exp.imitate.gail.seed, data.seed);
    let policy = imitate(
        &pair.target,
        &weighted,
        &imitate_hyper,
        method == MethodId::GailUnweighted,
    )?;
    let eval = eval_policy(
        &pair.target,
        &policy,
        exp.eval.rollouts,
        seed::mix(exp.eval.seed, data.seed),
    )?;
    let score = match &model {
        Some(m) => Some(score_confidence_predictor(|t| m.predict_trajectory(t), &data.holdout)?),
        None => None,
    };
    Ok(ResultRow {
        method,
        seed: data.seed,
        mean_return: eval.mean_return,
        std_return: eval.std_return,
        success_rate: eval.success_rate,
        spearman: score.and_then(|s| s.spearman),
        mae: score.map(|s| s.mae),
    })
}

fn resolve(pair: &EnvPair, source: &str, target: &str) -> Result<(Vec<(crate::env::Grade, usize)>, Vec<(crate::env::Grade, usize)>)> {
    let cal = Calibration::default();
    Ok((
        resolve_composition(&pair.source, &parse_composition(source)?, &cal)?,
        resolve_composition(&pair.target, &parse_composition(target)?, &cal)?,
    ))
}

fn validate(exp: &Experiment) -> Result<()> {
    if exp.seeds.is_empty() {
        return Err(Error::Config("an experiment needs at least one seed".into()));
    }
    let mut seeds = exp.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.len() != exp.seeds.len() {
        return Err(Error::Config("seeds must be distinct".into()));
    }
    exp.transfer.validate()?;
    exp.pair.validate()
}

/// Ablation ladder: every configured method on every seed, paired by seed.
pub fn run_ablation(exp: &Experiment, exec: Execution) -> Result<ResultsTable> {
    validate(exp)?;
    if exp.eval.methods.is_empty() {
        return Err(Error::Config("no methods to run".into()));
    }
    let pair = make_env_pair(exp.pair.pair, &exp.pair)?;
    let (src, tar) = resolve(&pair, &exp.compositions.source, &exp.compositions.target)?;
    let data = exec
        .map_slice(&exp.seeds, |&s| seed_data(&pair, &src, &tar, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut methods = exp.eval.methods.clone();
    methods.sort();
    methods.dedup();
    let cells: Vec<(MethodId, usize)> = methods
        .iter()
        .flat_map(|&m| (0..data.len()).map(move |i| (m, i)))
        .collect();
    let rows = exec
        .map_slice(&cells, |&(m, i)| {
            run_cell(&pair, &data[i], m, exp)
                .map_err(|e| e.context(format!("method {m}, seed {}", data[i].seed)))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let p_values = pairwise_p_values(&rows, exp.eval.pooled)?;
    Ok(ResultsTable {
        metadata: TableMetadata {
            pair: exp.pair.clone(),
            source_composition: exp.compositions.source.clone(),
            target_composition: exp.compositions.target.clone(),
            transfer: exp.transfer.clone(),
            imitate: exp.imitate.clone(),
            eval: exp.eval.clone(),
        },
        rows,
        p_values,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub source_composition: String,
    pub seed: u64,
    pub mean_return: f64,
    pub std_return: f64,
    pub success_rate: f64,
    pub spearman: Option<f64>,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionSummary {
    pub source_composition: String,
    pub mean_return: f64,
    /// Standard deviation of per-seed mean returns.
    pub std_return: f64,
    /// Median predictor Spearman over seeds where it is defined.
    pub median_spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionTable {
    pub target_composition: String,
    pub rows: Vec<CompositionRow>,
}

impl CompositionTable {
    /// One summary per source composition, in the order run.
    pub fn summaries(&self) -> Vec<CompositionSummary> {
        let mut order: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.source_composition.as_str()) {
                order.push(&r.source_composition);
            }
        }
        order
            .into_iter()
            .map(|c| {
                let rows: Vec<&CompositionRow> =
                    self.rows.iter().filter(|r| r.source_composition == c).collect();
                let returns: Vec<f64> = rows.iter().map(|r| r.mean_return).collect();
                let (mean_return, std_return) = mean_std(&returns);
                let sp: Vec<f64> = rows.iter().filter_map(|r| r.spearman).collect();
                CompositionSummary {
                    source_composition: c.to_string(),
                    mean_return,
                    std_return,
                    median_spearman: median(&sp),
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("source_composition,seed,mean_return,std_return,success_rate,spearman\n");
        for r in &self.rows {
            let s = r.spearman.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.source_composition, r.seed, r.mean_return, r.std_return, r.success_rate, s
            ));
        }
        out
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Retrains `ours` for each source composition against one fixed target
/// composition. Rows come out in the order the compositions are listed.
pub fn run_varying_composition(exp: &Experiment, exec: Execution) -> Result<CompositionTable> {
    validate(exp)?;
    let comps = &exp.compositions.varying;
    if comps.is_empty() {
        return Err(Error::Config("no source compositions to vary over".into()));
    }
    let pair = make_env_pair(exp.pair.pair, &exp.pair)?;
    let resolved = comps
        .iter()
        .map(|c| resolve(&pair, c, &exp.compositions.varying_target))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, u64)> = (0..comps.len())
        .flat_map(|c| exp.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let rows = exec
        .map_slice(&cells, |&(c, s)| {
            let (src, tar) = &resolved[c];
            let data = seed_data(&pair, src, tar, s)?;
            let row = run_cell(&pair, &data, MethodId::Ours, exp)?;
            Ok(CompositionRow {
                source_composition: comps[c].clone(),
                seed: s,
                mean_return: row.mean_return,
                std_return: row.std_return,
                success_rate: row.success_rate,
                spearman: row.spearman,
                mae: row.mae.unwrap_or(f64::NAN),
            })
        })
        .into_iter()
        .zip(&cells)
        .map(|(r, (c, s)): (Result<CompositionRow>, _)| {
            r.map_err(|e| e.context(format!("composition {}, seed {s}", comps[*c])))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompositionTable {
        target_composition: exp.compositions.varying_target.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{scripted_policy, Grade, PairId};

    const A: [f64; 4] = [2.1, 2.5, 2.3, 2.2];
    const B: [f64; 4] = [3.1, 3.3, 3.0, 3.2];

    #[test]
    fn welch_matches_reference() {
        let p = t_test(&A, &B, false).unwrap();
        assert!((p - 0.0002598173979013418).abs() < 1e-6, "{p}");
        let (t, df) = welch_statistic(&A, &B);
        assert!((t + 8.174238913695998).abs() < 1e-9);
        assert!((df - 5.584615384615383).abs() < 1e-9);
        let pooled = t_test(&A, &B, true).unwrap();
        assert!((pooled - 0.00018050224360254406).abs() < 1e-6);
    }

    #[test]
    fn welch_unequal_sizes_matches_reference() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [2.0, 4.5, 5.0, 7.5, 9.0, 3.0];
        assert!((t_test(&a, &b, false).unwrap() - 0.13163745914680985).abs() < 1e-6);
        assert!((t_test(&a, &b, true).unwrap() - 0.14533412745942637).abs() < 1e-6);
    }

    #[test]
    fn t_test_edge_cases() {
        assert_eq!(t_test(&A, &A, false).unwrap(), 1.0);
        assert_eq!(t_test(&[1.0, 1.0], &[1.0, 1.0], false).unwrap(), 1.0);
        assert_eq!(t_test(&[1.0, 1.0], &[2.0, 2.0], false).unwrap(), 0.0);
        let a: Vec<f64> = (0..5).map(|i| i as f64 * 1e-9).collect();
        let b: Vec<f64> = (0..5).map(|i| 1.0 + i as f64 * 1e-9).collect();
        assert!(t_test(&a, &b, false).unwrap() < 1e-6);
        assert!(t_test(&[1.0], &[1.0, 2.0], false).is_err());
    }

    #[test]
    fn sign_test_matches_binomial_tail() {
        assert!((sign_test(9, 10).unwrap() - 0.0107421875).abs() < 1e-15);
        assert!((sign_test(8, 10).unwrap() - 0.0546875).abs() < 1e-15);
        assert_eq!(sign_test(0, 10).unwrap(), 1.0);
        assert_eq!(sign_test(0, 0).unwrap(), 1.0);
        assert!(sign_test(3, 2).is_err());
        let (w, n, _) = paired_sign_test(&[1.0, 2.0, 3.0], &[0.0, 2.0, 4.0]).unwrap();
        assert_eq!((w, n), (1, 2));
    }

    #[test]
    fn spearman_reference_and_degenerate_cases() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [5.0, 6.0, 7.0, 8.0, 7.0];
        assert!((spearman(&x, &y).unwrap() - 0.8207826816681233).abs() < 1e-12);
        let inv: Vec<f64> = x.iter().map(|v| 1.0 - v).collect();
        assert!((spearman(&inv, &x).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&x, &[0.0, 0.0, 1.0, 1.0, 0.0]), None);
        assert_eq!(spearman(&[0.5; 5], &x), Some(0.0));
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn scoring_with_labels_is_perfect() {
        let pair = make_env_pair(PairId::Identity, &PairConfig::new(PairId::Identity)).unwrap();
        let comp = [(Grade::Random, 6), (Grade::Partial(0.5), 3), (Grade::Optimal, 1)];
        let set = label_confidence(&generate_dataset_with(Execution::Sequential, &pair.target, &comp, 3).unwrap()).unwrap();
        let s = score_confidence_predictor(|t| Ok(vec![t.confidence.unwrap(); t.len()]), &set).unwrap();
        assert_eq!(s.spearman, Some(1.0));
        assert_eq!(s.mae, 0.0);
        let s = score_confidence_predictor(|t| Ok(vec![1.0 - t.confidence.unwrap(); t.len()]), &set).unwrap();
        assert!((s.spearman.unwrap() + 1.0).abs() < 1e-12);
        assert!(score_confidence_predictor(|_| Ok(vec![0.5]), &set).is_err());
    }

    #[test]
    fn eval_policy_on_scripted_grades() {
        let pair = make_env_pair(PairId::TwinReacher, &PairConfig::new(PairId::TwinReacher)).unwrap();
        let opt = scripted_policy(&pair.target, Grade::Optimal).unwrap();
        let rnd = scripted_policy(&pair.target, Grade::Random).unwrap();
        let a = eval_policy(&pair.target, &opt, 20, 0).unwrap();
        assert_eq!(a.success_rate, 1.0);
        let b = eval_policy(&pair.target, &rnd, 20, 0).unwrap();
        assert!(b.success_rate < a.success_rate);
        assert_eq!(eval_policy(&pair.target, &rnd, 20, 0).unwrap(), b);
        let one = eval_policy(&pair.target, &rnd, 1, 7).unwrap();
        assert_eq!(one.mean_return, rollout(&pair.target, &rnd, 7).unwrap().total_return);
        assert_eq!(
            eval_policy_with(Execution::Parallel, &pair.target, &rnd, 20, 0).unwrap(),
            b
        );
        assert!(eval_policy(&pair.target, &rnd, 0, 0).is_err());
    }

    #[test]
    fn method_ladder_hyper() {
        let base = TransferHyper::default();
        assert!(MethodId::Oracle.transfer_hyper(&base).unwrap().is_none());
        let f = MethodId::OursFeature.transfer_hyper(&base).unwrap().unwrap();
        assert_eq!((f.lambda, f.max_len), (0.0, 1));
        let c = MethodId::OursConfidence.transfer_hyper(&base).unwrap().unwrap();
        assert_eq!((c.lambda, c.max_len), (base.lambda, 1));
        assert_eq!(MethodId::Ours.transfer_hyper(&base).unwrap().unwrap(), base);
        for m in MethodId::ALL {
            assert_eq!(m.to_string().parse::<MethodId>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
        }
    }

    #[test]
    fn csv_and_p_value_formats() {
        let row = |method, seed, r| ResultRow {
            method,
            seed,
            mean_return: r,
            std_return: 0.5,
            success_rate: 0.25,
            spearman: None,
            mae: None,
        };
        let rows = vec![
            row(MethodId::GailUnweighted, 0, -3.0),
            row(MethodId::GailUnweighted, 1, -3.5),
            row(MethodId::Ours, 0, -1.0),
            row(MethodId::Ours, 1, -1.25),
        ];
        let p = pairwise_p_values(&rows, false).unwrap();
        assert_eq!(p.keys().collect::<Vec<_>>(), vec!["ours_vs_gail_unweighted"]);
        let table = ResultsTable {
            metadata: TableMetadata {
                pair: PairConfig::new(PairId::Identity),
                source_composition: "94-5-1".into(),
                target_composition: "94-5-1".into(),
                transfer: TransferHyper::default(),
                imitate: ImitateHyper::default(),
                eval: EvalConfig::default(),
            },
            rows,
            p_values: p,
        };
        let csv = table.to_csv();
        assert!(csv.starts_with("method,seed,mean_return,std_return,success_rate\n"));
        assert!(csv.contains("ours,1,-1.25,0.5,0.25\n"));
        let json: serde_json::Value = serde_json::from_str(&table.p_values_json()).unwrap();
        assert!(json["pairs"]["ours_vs_gail_unweighted"].as_f64().unwrap() < 0.05);
    }
}
