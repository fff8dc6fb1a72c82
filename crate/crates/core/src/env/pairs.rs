use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::mdp::{mat_vec, two_link_state, wrap_angle, ActionBounds, Dynamics, Mdp};
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairId {
    LiftedLinear,
    TwinReacher,
    Identity,
}

impl fmt::Display for PairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PairId::LiftedLinear => "lifted_linear",
            PairId::TwinReacher => "twin_reacher",
            PairId::Identity => "identity",
        })
    }
}

impl FromStr for PairId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lifted_linear" => Ok(PairId::LiftedLinear),
            "twin_reacher" => Ok(PairId::TwinReacher),
            "identity" => Ok(PairId::Identity),
            other => Err(Error::Config(format!("unknown pair id {other:?}"))),
        }
    }
}

/// Environment the identity pair duplicates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IdentityBase {
    #[default]
    PointMass,
    OneJointArm,
}

/// JSON-configurable knobs for [`make_env_pair`]. Unset fields take the pair's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairConfig {
    pub pair: PairId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// Success threshold: absolute for point masses, a fraction of total arm
    /// length for the arms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_radius: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub terminate_on_success: bool,
    #[serde(default)]
    pub base: IdentityBase,
}

fn default_gamma() -> f64 {
    1.0
}

impl PairConfig {
    pub fn new(pair: PairId) -> Self {
        PairConfig {
            pair,
            horizon: None,
            goal_radius: None,
            seed: 0,
            gamma: 1.0,
            terminate_on_success: false,
            base: IdentityBase::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == Some(0) {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if let Some(r) = self.goal_radius {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!("goal_radius must be positive, got {r}")));
            }
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

/// Witness of the state relation plus the two cross-domain action maps.
#[derive(Clone, Debug, PartialEq)]
pub enum CorrespondenceOracle {
    Identity,
    /// `Phi = {(s, M s)}`, `H1(s, a) = L a`, `H2(s', a') = P a'`.
    Linear {
        lift: Matrix,
        action_lift: Matrix,
        action_proj: Matrix,
    },
    /// States are related when their end-effector-to-goal distances agree.
    Reacher { source_length: f64, l1: f64, l2: f64 },
}

impl CorrespondenceOracle {
    /// A target state related to `s_src`.
    pub fn relate_state(&self, s_src: &[f64]) -> Vec<f64> {
        match self {
            CorrespondenceOracle::Identity => s_src.to_vec(),
            CorrespondenceOracle::Linear { lift, .. } => mat_vec(lift, s_src),
            CorrespondenceOracle::Reacher { l1, l2, .. } => {
                let (t1, goal) = reacher_witness(s_src);
                let reach = l1 + l2;
                two_link_state(*l1, *l2, t1, 0.0, reach * goal.cos(), reach * goal.sin())
            }
        }
    }

    /// A source state related to `s_tar`.
    pub fn relate_target_state(&self, s_tar: &[f64]) -> Result<Vec<f64>> {
        match self {
            CorrespondenceOracle::Identity => Ok(s_tar.to_vec()),
            CorrespondenceOracle::Linear { lift, .. } => {
                let pinv = pseudo_inverse(lift)?;
                Ok(mat_vec(&pinv, s_tar))
            }
            CorrespondenceOracle::Reacher { source_length, .. } => {
                let d = reacher_distance(s_tar);
                let delta = chord_angle(d, *source_length);
                Ok(vec![1.0, 0.0, delta])
            }
        }
    }

    /// `H1`: source state-action to a target action.
    pub fn lift_action(&self, s_src: &[f64], a_src: &[f64]) -> Vec<f64> {
        match self {
            CorrespondenceOracle::Identity => a_src.to_vec(),
            CorrespondenceOracle::Linear { action_lift, .. } => mat_vec(action_lift, a_src),
            CorrespondenceOracle::Reacher { .. } => {
                let theta = s_src[1].atan2(s_src[0]);
                let (t1, _) = reacher_witness(s_src);
                // the mirrored witness turns the other way
                let sign = if (wrap_angle(t1 - theta)).abs() < 1e-12 {
                    1.0
                } else {
                    -1.0
                };
                vec![sign * a_src[0], 0.0]
            }
        }
    }

    /// `H2`: target state-action to a source action. For the reacher pair the
    /// source state is taken to be the [`Self::relate_target_state`] witness.
    pub fn project_action(&self, s_tar: &[f64], a_tar: &[f64], target: &Mdp) -> Vec<f64> {
        match self {
            CorrespondenceOracle::Identity => a_tar.to_vec(),
            CorrespondenceOracle::Linear { action_proj, .. } => mat_vec(action_proj, a_tar),
            CorrespondenceOracle::Reacher { source_length, .. } => {
                let delta = chord_angle(reacher_distance(s_tar), *source_length);
                let next = match target.step(s_tar, a_tar) {
                    Ok(o) => o.next_state,
                    Err(_) => return vec![0.0],
                };
                let delta_next = chord_angle(reacher_distance(&next), *source_length);
                vec![delta - delta_next]
            }
        }
    }

    /// How far a pair of states is from being related (0 when related).
    pub fn violation(&self, source: &Mdp, target: &Mdp, s_src: &[f64], s_tar: &[f64]) -> f64 {
        match self {
            CorrespondenceOracle::Identity => max_abs_diff(s_src, s_tar),
            CorrespondenceOracle::Linear { lift, .. } => max_abs_diff(&mat_vec(lift, s_src), s_tar),
            CorrespondenceOracle::Reacher { .. } => {
                (source.task_distance(s_src) - target.task_distance(s_tar)).abs()
            }
        }
    }
}

fn reacher_distance(s_tar: &[f64]) -> f64 {
    let dx = s_tar[4] - s_tar[6];
    let dy = s_tar[5] - s_tar[7];
    (dx * dx + dy * dy).sqrt()
}

/// Non-negative joint angle whose chord on a circle of radius `length` is `d`.
fn chord_angle(d: f64, length: f64) -> f64 {
    2.0 * (d / (2.0 * length)).clamp(0.0, 1.0).asin()
}

/// Straight-arm witness for a one-joint state: `(theta_1, goal_angle)`.
/// Of the two joint angles giving the same distance, prefer one in `[0, pi)`.
fn reacher_witness(s_src: &[f64]) -> (f64, f64) {
    let theta = s_src[1].atan2(s_src[0]);
    let goal = theta + s_src[2];
    let direct = wrap_angle(theta);
    let mirrored = wrap_angle(2.0 * goal - theta);
    let in_range = |x: f64| (0.0..std::f64::consts::PI).contains(&x);
    let t1 = if !in_range(direct) && in_range(mirrored) {
        mirrored
    } else {
        direct
    };
    (t1, goal)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn pseudo_inverse(m: &Matrix) -> Result<Matrix> {
    // (M^T M)^-1 M^T for a tall full-column-rank M with two columns
    if m.cols() != 2 {
        return Err(Error::Shape("pseudo-inverse implemented for two columns".into()));
    }
    let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
    for row in m.iter_rows() {
        a += row[0] * row[0];
        b += row[0] * row[1];
        d += row[1] * row[1];
    }
    let det = a * d - b * b;
    if det.abs() < 1e-12 {
        return Err(Error::InvalidArgument("lift matrix is rank deficient".into()));
    }
    let inv = [[d / det, -b / det], [-b / det, a / det]];
    let mut out = Matrix::zeros(2, m.rows());
    for (j, row) in m.iter_rows().enumerate() {
        for i in 0..2 {
            out.set(i, j, inv[i][0] * row[0] + inv[i][1] * row[1]);
        }
    }
    Ok(out)
}

/// Source MDP, target MDP and the correspondence relating them.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvPair {
    pub pair_id: PairId,
    pub source: Mdp,
    pub target: Mdp,
    pub oracle: CorrespondenceOracle,
    pub seed: u64,
}

const POINT_MASS_SPEED: f64 = 0.2;
const JOINT_SPEED: f64 = 0.3;

pub fn default_lift() -> Matrix {
    Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0], [0.3, -0.2], [0.7, 0.4]]).expect("static shape")
}

/// Orthonormal-column action lift; its transpose is the matching projection.
pub fn default_action_lift() -> Matrix {
    Matrix::from_rows(&[[0.5, 0.5], [0.5, -0.5], [0.5, 0.5], [0.5, -0.5]]).expect("static shape")
}

fn transpose(m: &Matrix) -> Matrix {
    let mut t = Matrix::zeros(m.cols(), m.rows());
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            t.set(c, r, m.get(r, c));
        }
    }
    t
}

fn point_mass(id: &str, horizon: usize, goal_radius: f64, config: &PairConfig) -> Mdp {
    Mdp {
        id: id.into(),
        dynamics: Dynamics::PointMass {
            dt: 1.0,
            init_half_width: 1.0,
        },
        bounds: ActionBounds::Ball {
            dim: 2,
            radius: POINT_MASS_SPEED,
        },
        horizon,
        gamma: config.gamma,
        success_distance: goal_radius,
        action_penalty: 0.0,
        terminate_on_success: config.terminate_on_success,
    }
}

fn one_joint_arm(id: &str, horizon: usize, goal_fraction: f64, config: &PairConfig) -> Mdp {
    let length = 1.0;
    Mdp {
        id: id.into(),
        dynamics: Dynamics::OneJointArm { length, dt: 1.0 },
        bounds: ActionBounds::symmetric_box(1, JOINT_SPEED),
        horizon,
        gamma: config.gamma,
        success_distance: goal_fraction * length,
        action_penalty: 0.01,
        terminate_on_success: config.terminate_on_success,
    }
}

/// Builds one of the built-in correspondent environment pairs.
pub fn make_env_pair(pair_id: PairId, config: &PairConfig) -> Result<EnvPair> {
    config.validate()?;
    if config.pair != pair_id {
        return Err(Error::Config(format!(
            "config describes {} but {pair_id} was requested",
            config.pair
        )));
    }
    let pair = match pair_id {
        PairId::LiftedLinear => {
            let horizon = config.horizon.unwrap_or(40);
            let goal_radius = config.goal_radius.unwrap_or(0.05);
            let source = point_mass("point_mass_2d", horizon, goal_radius, config);
            let lift = default_lift();
            let action_lift = default_action_lift();
            let action_proj = transpose(&action_lift);
            let target = Mdp {
                id: "lifted_point_mass_4d".into(),
                dynamics: Dynamics::LiftedPointMass {
                    lift_pinv: pseudo_inverse(&lift)?,
                    lift: lift.clone(),
                    action_proj: action_proj.clone(),
                    action_lift: action_lift.clone(),
                    dt: 1.0,
                    init_half_width: 1.0,
                },
                bounds: ActionBounds::Ball {
                    dim: 4,
                    radius: POINT_MASS_SPEED,
                },
                ..source.clone()
            };
            EnvPair {
                pair_id,
                source,
                target,
                oracle: CorrespondenceOracle::Linear {
                    lift,
                    action_lift,
                    action_proj,
                },
                seed: config.seed,
            }
        }
        PairId::TwinReacher => {
            let horizon = config.horizon.unwrap_or(50);
            let goal_fraction = config.goal_radius.unwrap_or(0.05);
            let source = one_joint_arm("reacher_1joint", horizon, goal_fraction, config);
            let (l1, l2) = (0.6, 0.4);
            let target = Mdp {
                id: "reacher_2joint".into(),
                dynamics: Dynamics::TwoJointArm {
                    l1,
                    l2,
                    dt: 1.0,
                    elbow_init: 0.5,
                    goal_radius_range: (0.5, 0.95),
                },
                bounds: ActionBounds::symmetric_box(2, JOINT_SPEED),
                success_distance: goal_fraction * (l1 + l2),
                ..source.clone()
            };
            EnvPair {
                pair_id,
                source,
                target,
                oracle: CorrespondenceOracle::Reacher {
                    source_length: 1.0,
                    l1,
                    l2,
                },
                seed: config.seed,
            }
        }
        PairId::Identity => {
            let source = match config.base {
                IdentityBase::PointMass => point_mass(
                    "point_mass_2d",
                    config.horizon.unwrap_or(40),
                    config.goal_radius.unwrap_or(0.05),
                    config,
                ),
                IdentityBase::OneJointArm => one_joint_arm(
                    "reacher_1joint",
                    config.horizon.unwrap_or(50),
                    config.goal_radius.unwrap_or(0.05),
                    config,
                ),
            };
            let mut target = source.clone();
            target.id = format!("{}_copy", source.id);
            EnvPair {
                pair_id,
                source,
                target,
                oracle: CorrespondenceOracle::Identity,
                seed: config.seed,
            }
        }
    };
    Ok(pair)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub steps: usize,
    /// Worst violation after stepping the source with `a` and the target with `H1(s, a)`.
    pub max_violation_lift: f64,
    /// Worst violation after stepping the target with `a'` and the source with `H2(s', a')`.
    pub max_violation_project: f64,
}

impl OracleReport {
    pub fn max_violation(&self) -> f64 {
        self.max_violation_lift.max(self.max_violation_project)
    }
}

/// Samples related state pairs and random actions and measures how well the
/// relation survives one step in each direction.
pub fn oracle_check(pair: &EnvPair, n_steps: usize, seed: u64) -> Result<OracleReport> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("oracle_check needs n_steps >= 1".into()));
    }
    let (src, tar, oracle) = (&pair.source, &pair.target, &pair.oracle);
    let mut rng = seed::rng(seed::derive(seed, "oracle_check"));
    let mut lift_worst = 0.0f64;
    let mut project_worst = 0.0f64;
    for _ in 0..n_steps {
        let s_src = src.sample_initial_state(&mut rng);
        let s_tar = oracle.relate_state(&s_src);
        let a_src = src.bounds.sample(&mut rng);
        let next_src = src.step(&s_src, &a_src)?.next_state;
        let next_tar = tar.step(&s_tar, &oracle.lift_action(&s_src, &a_src))?.next_state;
        lift_worst = lift_worst.max(oracle.violation(src, tar, &next_src, &next_tar));

        let t_state = tar.sample_initial_state(&mut rng);
        let s_back = oracle.relate_target_state(&t_state)?;
        let a_tar = tar.bounds.sample(&mut rng);
        let next_tar = tar.step(&t_state, &a_tar)?.next_state;
        let next_src = src
            .step(&s_back, &oracle.project_action(&t_state, &a_tar, tar))?
            .next_state;
        project_worst = project_worst.max(oracle.violation(src, tar, &next_src, &next_tar));
    }
    Ok(OracleReport {
        steps: n_steps,
        max_violation_lift: lift_worst,
        max_violation_project: project_worst,
    })
}
