//! Deterministic finite-horizon MDPs, correspondent source/target pairs and
//! scripted demonstrators of graded quality.

mod mdp;
mod pairs;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use mdp::{wrap_angle, ActionBounds, Dynamics, Mdp, StepOutcome};
pub use pairs::{
    default_action_lift, default_lift, make_env_pair, oracle_check, CorrespondenceOracle, EnvPair,
    IdentityBase, OracleReport, PairConfig, PairId,
};

use crate::demo::Trajectory;
use crate::error::{ensure_finite, Error, Result};
use crate::par::Execution;
use crate::seed;

/// Quality level of a scripted demonstrator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Grade {
    Random,
    /// Random action with probability `eps`, otherwise the optimal one.
    Partial(f64),
    Optimal,
}

impl Grade {
    pub fn epsilon(&self) -> f64 {
        match self {
            Grade::Random => 1.0,
            Grade::Partial(e) => *e,
            Grade::Optimal => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.epsilon();
        if (0.0..=1.0).contains(&e) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("partial epsilon {e} outside [0, 1]")))
        }
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Grade::Random => f.write_str("random"),
            Grade::Optimal => f.write_str("optimal"),
            Grade::Partial(e) => write!(f, "partial({e})"),
        }
    }
}

impl FromStr for Grade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "random" => return Ok(Grade::Random),
            "optimal" => return Ok(Grade::Optimal),
            _ => {}
        }
        let inner = s
            .strip_prefix("partial(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::Parse(format!("unknown grade {s:?}")))?;
        let eps: f64 = inner
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad epsilon in grade {s:?}")))?;
        let g = Grade::Partial(eps);
        g.validate()?;
        Ok(g)
    }
}

impl Serialize for Grade {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Grade {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PolicyDescriptor {
    Scripted(Grade),
    Learned(String),
}

pub trait Policy: Sync {
    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;
    fn descriptor(&self) -> PolicyDescriptor;
}

/// Closed-form controller blended with uniform noise.
#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    env: Mdp,
    grade: Grade,
}

impl ScriptedPolicy {
    pub fn new(env: &Mdp, grade: Grade) -> Result<Self> {
        grade.validate()?;
        Ok(ScriptedPolicy {
            env: env.clone(),
            grade,
        })
    }

    pub fn grade(&self) -> Grade {
        self.grade
    }
}

pub fn scripted_policy(env: &Mdp, grade: Grade) -> Result<ScriptedPolicy> {
    ScriptedPolicy::new(env, grade)
}

impl Policy for ScriptedPolicy {
    fn act(&self, state: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let eps = self.grade.epsilon();
        // always draw so every grade consumes the stream identically
        let u: f64 = rng.random();
        if u < eps {
            Ok(self.env.bounds.sample(rng))
        } else {
            Ok(self.env.optimal_action(state))
        }
    }

    fn descriptor(&self) -> PolicyDescriptor {
        PolicyDescriptor::Scripted(self.grade)
    }
}

/// Runs one episode. The start state and the policy's noise come from
/// separate streams, so every policy sees the same start for a given seed.
pub fn rollout(env: &Mdp, policy: &dyn Policy, seed: u64) -> Result<Trajectory> {
    let mut init_rng = seed::rng(seed::derive(seed, "init"));
    let mut act_rng = seed::rng(seed::derive(seed, "act"));
    let mut state = env.sample_initial_state(&mut init_rng);
    let mut states = Vec::with_capacity(env.horizon + 1);
    let mut actions = Vec::with_capacity(env.horizon);
    let mut rewards = Vec::with_capacity(env.horizon);
    let mut total_return = 0.0;
    let mut discount = 1.0;
    states.push(state.clone());
    for _ in 0..env.horizon {
        let raw = policy.act(&state, &mut act_rng)?;
        ensure_finite(&raw, "policy action")?;
        let action = env.bounds.clamp(&raw);
        let out = env.step(&state, &action)?;
        total_return += discount * out.reward;
        discount *= env.gamma;
        rewards.push(out.reward);
        actions.push(action);
        state = out.next_state;
        states.push(state.clone());
        if out.done && env.terminate_on_success {
            break;
        }
    }
    let grade = match policy.descriptor() {
        PolicyDescriptor::Scripted(g) => Some(g),
        PolicyDescriptor::Learned(_) => None,
    };
    Ok(Trajectory {
        env_id: env.id.clone(),
        states,
        actions,
        rewards,
        total_return,
        grade,
        confidence: None,
        pair_confidences: None,
    })
}

/// Mean and sample standard deviation of returns over seeds `seed..seed + n`.
pub fn expected_return(env: &Mdp, policy: &dyn Policy, n: usize, seed: u64) -> Result<(f64, f64)> {
    expected_return_with(Execution::default(), env, policy, n, seed)
}

pub fn expected_return_with(
    exec: Execution,
    env: &Mdp,
    policy: &dyn Policy,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::InvalidArgument("expected_return needs n >= 1".into()));
    }
    let returns = exec
        .map_range(n, |i| {
            rollout(env, policy, seed.wrapping_add(i as u64)).map(|t| t.total_return)
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
    Ok(mean_std(&returns))
}

/// Mean and sample (n - 1) standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: PairId) -> EnvPair {
        make_env_pair(id, &PairConfig::new(id)).unwrap()
    }

    #[test]
    fn grade_strings_round_trip() {
        for g in [Grade::Random, Grade::Optimal, Grade::Partial(0.25)] {
            assert_eq!(g.to_string().parse::<Grade>().unwrap(), g);
        }
        assert!("partial(1.5)".parse::<Grade>().is_err());
        assert!("expert".parse::<Grade>().is_err());
    }

    #[test]
    fn lifted_step_golden() {
        let p = pair(PairId::LiftedLinear);
        let out = p.source.step(&[1.0, 0.0], &[-0.2, 0.0]).unwrap();
        assert_eq!(out.next_state, vec![0.8, 0.0]);
        assert!((out.reward - -0.8).abs() < 1e-15);
        let still = p.target.step(&[0.3, -0.1, 0.2, 0.5], &[0.0; 4]).unwrap();
        assert_eq!(still.next_state, vec![0.3, -0.1, 0.2, 0.5]);
    }

    #[test]
    fn reacher_at_goal_is_success() {
        let p = pair(PairId::TwinReacher);
        let s = [1.0, 0.0, 0.0];
        let out = p.source.step(&s, &[0.0]).unwrap();
        assert_eq!(out.reward, 0.0);
        assert!(out.done);
    }

    #[test]
    fn relate_state_examples() {
        let p = pair(PairId::LiftedLinear);
        assert_eq!(p.oracle.relate_state(&[1.0, 0.0]), vec![1.0, 0.0, 0.3, 0.7]);
        let id = pair(PairId::Identity);
        assert_eq!(id.oracle.relate_state(&[0.4, -0.2]), vec![0.4, -0.2]);
    }

    #[test]
    fn partial_zero_matches_optimal() {
        let p = pair(PairId::TwinReacher);
        let opt = scripted_policy(&p.target, Grade::Optimal).unwrap();
        let zero = scripted_policy(&p.target, Grade::Partial(0.0)).unwrap();
        for seed in 0..5 {
            let a = rollout(&p.target, &opt, seed).unwrap();
            let b = rollout(&p.target, &zero, seed).unwrap();
            assert_eq!(a.states, b.states);
            assert_eq!(a.actions, b.actions);
        }
    }

    #[test]
    fn horizon_zero_rollout() {
        let mut env = pair(PairId::LiftedLinear).source;
        env.horizon = 0;
        let pol = scripted_policy(&env, Grade::Random).unwrap();
        let t = rollout(&env, &pol, 3).unwrap();
        assert_eq!(t.states.len(), 1);
        assert!(t.actions.is_empty());
        assert_eq!(t.total_return, 0.0);
    }

    #[test]
    fn optimal_controllers_succeed() {
        for id in [PairId::LiftedLinear, PairId::TwinReacher] {
            let p = pair(id);
            for env in [&p.source, &p.target] {
                let pol = scripted_policy(env, Grade::Optimal).unwrap();
                for seed in 0..20 {
                    let t = rollout(env, &pol, seed).unwrap();
                    assert!(env.success(t.states.last().unwrap()), "{} seed {seed}", env.id);
                }
            }
        }
    }

    #[test]
    fn actions_respect_bounds() {
        for id in [PairId::LiftedLinear, PairId::TwinReacher] {
            let p = pair(id);
            for env in [&p.source, &p.target] {
                let pol = scripted_policy(env, Grade::Partial(0.5)).unwrap();
                let t = rollout(env, &pol, 11).unwrap();
                assert!(t.actions.iter().all(|a| env.bounds.contains(a, 1e-12)));
            }
        }
    }

    #[test]
    fn single_rollout_expected_return() {
        let p = pair(PairId::TwinReacher);
        let pol = scripted_policy(&p.source, Grade::Partial(0.3)).unwrap();
        let t = rollout(&p.source, &pol, 9).unwrap();
        let (m, s) = expected_return(&p.source, &pol, 1, 9).unwrap();
        assert_eq!(m, t.total_return);
        assert_eq!(s, 0.0);
        assert!(expected_return(&p.source, &pol, 0, 9).is_err());
    }

    #[test]
    fn oracle_closure() {
        let id = oracle_check(&pair(PairId::Identity), 1000, 1).unwrap();
        assert_eq!(id.max_violation(), 0.0);
        let lin = oracle_check(&pair(PairId::LiftedLinear), 1000, 1).unwrap();
        assert!(lin.max_violation() < 1e-9, "{lin:?}");
        let arm = oracle_check(&pair(PairId::TwinReacher), 1000, 1).unwrap();
        assert!(arm.max_violation_lift < 1e-6, "{arm:?}");
    }

    #[test]
    fn corrupted_lift_is_detected() {
        let mut p = pair(PairId::LiftedLinear);
        if let CorrespondenceOracle::Linear { lift, .. } = &mut p.oracle {
            for r in 0..lift.rows() {
                lift.set(r, 0, 5.0 * lift.get(r, 0));
            }
        }
        let report = oracle_check(&p, 1000, 2).unwrap();
        assert!(report.max_violation() > 0.1, "{report:?}");
    }
}
