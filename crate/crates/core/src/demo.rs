//! Mixed-quality demonstration sets: generation, min-max confidence labels and
//! JSONL persistence.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::env::{expected_return_with, rollout, scripted_policy, Grade, Mdp};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub env_id: String,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    /// Discounted return.
    pub total_return: f64,
    pub grade: Option<Grade>,
    pub confidence: Option<f64>,
    /// Per-pair predicted confidences, when a predictor has been applied.
    pub pair_confidences: Option<Vec<f64>>,
}

impl Trajectory {
    /// Number of state-action pairs.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    fn validate(&self) -> Result<()> {
        if self.states.len() != self.actions.len() + 1 || self.rewards.len() != self.actions.len() {
            return Err(Error::Shape(format!(
                "{} states, {} actions, {} rewards",
                self.states.len(),
                self.actions.len(),
                self.rewards.len()
            )));
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
            }
        }
        if let Some(pc) = &self.pair_confidences {
            if pc.len() != self.actions.len() {
                return Err(Error::Shape(format!(
                    "{} pair confidences for {} pairs",
                    pc.len(),
                    self.actions.len()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectorySet {
    pub env_id: String,
    pub trajectories: Vec<Trajectory>,
    pub composition: Vec<(Grade, usize)>,
}

impl TrajectorySet {
    /// Builds a set, reconstructing the composition from runs of equal grades.
    pub fn from_trajectories(env_id: &str, trajectories: Vec<Trajectory>) -> Self {
        let mut composition: Vec<(Grade, usize)> = Vec::new();
        for t in &trajectories {
            let g = t.grade.unwrap_or(Grade::Random);
            match composition.last_mut() {
                Some((last, n)) if *last == g => *n += 1,
                _ => composition.push((g, 1)),
            }
        }
        if trajectories.iter().all(|t| t.grade.is_none()) {
            composition.clear();
        }
        TrajectorySet {
            env_id: env_id.to_string(),
            trajectories,
            composition,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_pairs(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn min_len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).min().unwrap_or(0)
    }

    pub fn is_labeled(&self) -> bool {
        !self.is_empty() && self.trajectories.iter().all(|t| t.confidence.is_some())
    }

    pub fn returns(&self) -> Vec<f64> {
        self.trajectories.iter().map(|t| t.total_return).collect()
    }

    /// Copy with every confidence field cleared.
    pub fn unlabeled(&self) -> Self {
        let mut out = self.clone();
        for t in &mut out.trajectories {
            t.confidence = None;
            t.pair_confidences = None;
        }
        out
    }
}

/// Seed of trajectory `index` of grade `grade` in a dataset.
pub fn trajectory_seed(dataset_seed: u64, grade: Grade, index: usize) -> u64 {
    dataset_seed ^ seed::mix(seed::derive(0, &grade.to_string()), index as u64)
}

/// Rolls out `count` trajectories per grade, in composition order.
pub fn generate_dataset(env: &Mdp, composition: &[(Grade, usize)], seed: u64) -> Result<TrajectorySet> {
    generate_dataset_with(Execution::default(), env, composition, seed)
}

pub fn generate_dataset_with(
    exec: Execution,
    env: &Mdp,
    composition: &[(Grade, usize)],
    seed: u64,
) -> Result<TrajectorySet> {
    if composition.iter().all(|(_, n)| *n == 0) {
        return Err(Error::InvalidArgument(
            "composition needs at least one positive count".into(),
        ));
    }
    let mut jobs = Vec::new();
    let mut kept = Vec::new();
    for &(grade, count) in composition {
        grade.validate()?;
        if count > 0 {
            kept.push((grade, count));
        }
        for _ in 0..count {
            jobs.push((grade, jobs.len()));
        }
    }
    let trajectories = exec
        .map_slice(&jobs, |&(grade, index)| {
            let policy = scripted_policy(env, grade)?;
            rollout(env, &policy, trajectory_seed(seed, grade, index))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectorySet {
        env_id: env.id.clone(),
        trajectories,
        composition: kept,
    })
}

/// Min-max normalized returns; a degenerate range maps to 1.
pub fn min_max_labels(returns: &[f64]) -> Result<Vec<f64>> {
    if returns.is_empty() {
        return Err(Error::InvalidArgument("cannot label an empty set".into()));
    }
    if let Some(r) = returns.iter().find(|r| !r.is_finite()) {
        return Err(Error::NonFinite(format!("trajectory return {r}")));
    }
    let lo = returns.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    Ok(returns
        .iter()
        .map(|r| {
            if range > 0.0 {
                ((r - lo) / range).clamp(0.0, 1.0)
            } else {
                1.0
            }
        })
        .collect())
}

pub fn label_confidence(set: &TrajectorySet) -> Result<TrajectorySet> {
    let labels = min_max_labels(&set.returns())?;
    let mut out = set.clone();
    for (t, c) in out.trajectories.iter_mut().zip(labels) {
        t.confidence = Some(c);
    }
    Ok(out)
}

/// Parses "94-5-1" into positional counts.
pub fn parse_composition(spec: &str) -> Result<Vec<usize>> {
    let counts = spec
        .split('-')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad count {p:?} in composition {spec:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if counts.len() < 2 {
        return Err(Error::Parse(format!(
            "composition {spec:?} needs at least two levels"
        )));
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::Parse(format!("composition {spec:?} is empty")));
    }
    Ok(counts)
}

/// Return fractions of the quality ladder for `levels` positions, from random (0) to optimal (1).
pub fn ladder_fractions(levels: usize) -> Vec<f64> {
    if levels < 2 {
        return vec![1.0; levels];
    }
    (0..levels).map(|i| i as f64 / (levels - 1) as f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub rollouts: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            rollouts: 200,
            iterations: 24,
            seed: 0x5eed,
        }
    }
}

/// Noise level whose expected return sits a fraction `frac` of the way from
/// the random policy's return to the optimal one. Found by bisection with
/// common random numbers, so the search is deterministic.
pub fn calibrate_epsilon(env: &Mdp, frac: f64, cal: &Calibration) -> Result<f64> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::InvalidArgument(format!("ladder fraction {frac} outside [0, 1]")));
    }
    let eval = |eps: f64| -> Result<f64> {
        let pol = scripted_policy(env, Grade::Partial(eps))?;
        expected_return_with(Execution::Sequential, env, &pol, cal.rollouts, cal.seed).map(|r| r.0)
    };
    let r_opt = eval(0.0)?;
    let r_rand = eval(1.0)?;
    let goal = r_rand + frac * (r_opt - r_rand);
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..cal.iterations {
        let mid = 0.5 * (lo + hi);
        if eval(mid)? > goal {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Maps positional counts onto grades: the ends are random and optimal, the
/// interior levels are calibrated noise blends.
pub fn resolve_composition(env: &Mdp, counts: &[usize], cal: &Calibration) -> Result<Vec<(Grade, usize)>> {
    let fracs = ladder_fractions(counts.len());
    let last = counts.len() - 1;
    counts
        .iter()
        .zip(fracs)
        .enumerate()
        .map(|(i, (&n, f))| {
            let grade = if i == 0 {
                Grade::Random
            } else if i == last {
                Grade::Optimal
            } else if n == 0 {
                Grade::Partial(1.0 - f)
            } else {
                Grade::Partial(calibrate_epsilon(env, f, cal)?)
            };
            Ok((grade, n))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    env: String,
    grade: Option<Grade>,
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
    #[serde(rename = "return")]
    total_return: f64,
    confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pair_confidences: Option<Vec<f64>>,
}

impl From<&Trajectory> for Line {
    fn from(t: &Trajectory) -> Self {
        Line {
            env: t.env_id.clone(),
            grade: t.grade,
            states: t.states.clone(),
            actions: t.actions.clone(),
            rewards: t.rewards.clone(),
            total_return: t.total_return,
            confidence: t.confidence,
            pair_confidences: t.pair_confidences.clone(),
        }
    }
}

impl From<Line> for Trajectory {
    fn from(l: Line) -> Self {
        Trajectory {
            env_id: l.env,
            states: l.states,
            actions: l.actions,
            rewards: l.rewards,
            total_return: l.total_return,
            grade: l.grade,
            confidence: l.confidence,
            pair_confidences: l.pair_confidences,
        }
    }
}

pub fn to_jsonl(set: &TrajectorySet) -> Result<String> {
    let mut out = String::new();
    for t in &set.trajectories {
        let line = serde_json::to_string(&Line::from(t))
            .map_err(|e| Error::Parse(format!("serializing trajectory: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(set: &TrajectorySet, path: &Path) -> Result<()> {
    let text = to_jsonl(set)?;
    crate::io::write_atomic(path, text.as_bytes())
}

/// Parses JSONL text; `origin` names the source in error messages.
pub fn parse_jsonl(text: &str, origin: &str) -> Result<TrajectorySet> {
    parse_lines(BufReader::new(text.as_bytes()), origin)
}

pub fn read_jsonl(path: &Path) -> Result<TrajectorySet> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_lines(BufReader::new(file), &path.display().to_string())
}

fn parse_lines<R: BufRead>(reader: R, origin: &str) -> Result<TrajectorySet> {
    let err = |line: usize, message: String| Error::ParseLine {
        path: origin.into(),
        line,
        message,
    };
    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| err(n, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| err(n, e.to_string()))?;
        let t = Trajectory::from(parsed);
        t.validate().map_err(|e| err(n, e.to_string()))?;
        let sd = t.states[0].len();
        let ad = t.actions.first().map(Vec::len);
        if t.states.iter().any(|s| s.len() != sd) || t.actions.iter().any(|a| Some(a.len()) != ad) {
            return Err(err(n, "ragged state or action vectors".into()));
        }
        match (dims, ad) {
            (None, Some(ad)) => dims = Some((sd, ad)),
            (Some((d_s, d_a)), Some(ad)) if (d_s, d_a) != (sd, ad) => {
                return Err(err(
                    n,
                    format!("dimensions ({sd}, {ad}) differ from earlier lines ({d_s}, {d_a})"),
                ))
            }
            _ => {}
        }
        if let Some(first) = trajectories.first() {
            if first.env_id != t.env_id {
                return Err(err(
                    n,
                    format!("environment {:?} differs from {:?}", t.env_id, first.env_id),
                ));
            }
        }
        trajectories.push(t);
    }
    if trajectories.is_empty() {
        return Err(Error::Parse(format!("{origin}: no trajectories")));
    }
    let env_id = trajectories[0].env_id.clone();
    Ok(TrajectorySet::from_trajectories(&env_id, trajectories))
}

/// Seeded shuffle and split at trajectory granularity. The holdout size is
/// `floor(n * frac)`, raised or lowered so both sides keep at least one trajectory.
pub fn split(set: &TrajectorySet, holdout_frac: f64, seed: u64) -> Result<(TrajectorySet, TrajectorySet)> {
    if !(holdout_frac > 0.0 && holdout_frac < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "holdout fraction {holdout_frac} outside (0, 1)"
        )));
    }
    let n = set.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} trajectories into two nonempty parts"
        )));
    }
    let n_hold = ((n as f64 * holdout_frac).floor() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed::derive(seed, "split")));
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        let trajs = ids.iter().map(|&i| set.trajectories[i].clone()).collect();
        TrajectorySet::from_trajectories(&set.env_id, trajs)
    };
    Ok((pick(&idx[n_hold..]), pick(&idx[..n_hold])))
}
