use std::f64::consts::PI;

use rand::Rng;

use crate::error::{ensure_finite, Error, Result};
use crate::nn::Matrix;

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = (x + PI).rem_euclid(2.0 * PI) - PI;
    if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionBounds {
    /// Per-component interval.
    Box { low: Vec<f64>, high: Vec<f64> },
    /// Euclidean ball centred at the origin.
    Ball { dim: usize, radius: f64 },
}

impl ActionBounds {
    pub fn symmetric_box(dim: usize, limit: f64) -> Self {
        ActionBounds::Box {
            low: vec![-limit; dim],
            high: vec![limit; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ActionBounds::Box { low, .. } => low.len(),
            ActionBounds::Ball { dim, .. } => *dim,
        }
    }

    pub fn clamp(&self, action: &[f64]) -> Vec<f64> {
        match self {
            ActionBounds::Box { low, high } => action
                .iter()
                .zip(low.iter().zip(high))
                .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
                .collect(),
            ActionBounds::Ball { radius, .. } => {
                let norm = action.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm > *radius {
                    let s = radius / norm;
                    action.iter().map(|a| a * s).collect()
                } else {
                    action.to_vec()
                }
            }
        }
    }

    pub fn contains(&self, action: &[f64], tol: f64) -> bool {
        match self {
            ActionBounds::Box { low, high } => action
                .iter()
                .zip(low.iter().zip(high))
                .all(|(&a, (&lo, &hi))| a >= lo - tol && a <= hi + tol),
            ActionBounds::Ball { radius, .. } => {
                action.iter().map(|a| a * a).sum::<f64>().sqrt() <= radius + tol
            }
        }
    }

    /// Uniform sample from the admissible set.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self {
            ActionBounds::Box { low, high } => low
                .iter()
                .zip(high)
                .map(|(&lo, &hi)| rng.random_range(lo..=hi))
                .collect(),
            ActionBounds::Ball { dim, radius } => loop {
                // rejection from the enclosing cube; fine for the small dims used here
                let a: Vec<f64> = (0..*dim)
                    .map(|_| rng.random_range(-*radius..=*radius))
                    .collect();
                if a.iter().map(|v| v * v).sum::<f64>() <= radius * radius {
                    break a;
                }
            },
        }
    }

    /// Per-component box enclosing the admissible set.
    pub fn box_limits(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            ActionBounds::Box { low, high } => (low.clone(), high.clone()),
            ActionBounds::Ball { dim, radius } => (vec![-radius; *dim], vec![*radius; *dim]),
        }
    }
}

/// The environment families used by the built-in pairs.
#[derive(Clone, Debug, PartialEq)]
pub enum Dynamics {
    /// State is the 2-d position relative to the goal; the action is a velocity.
    PointMass { dt: f64, init_half_width: f64 },
    /// Point mass observed through a full-column-rank lift `s = M p` and driven
    /// through a projection: `s' = s + M P a dt`.
    LiftedPointMass {
        lift: Matrix,
        lift_pinv: Matrix,
        action_proj: Matrix,
        action_lift: Matrix,
        dt: f64,
        init_half_width: f64,
    },
    /// Planar single-link arm. State `[cos t, sin t, goal_delta]`.
    OneJointArm { length: f64, dt: f64 },
    /// Planar two-link arm. State
    /// `[cos t1, sin t1, cos t2, sin t2, goal_x, goal_y, ee_x, ee_y]`, `t2` relative to link 1.
    TwoJointArm {
        l1: f64,
        l2: f64,
        dt: f64,
        elbow_init: f64,
        goal_radius_range: (f64, f64),
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// A deterministic finite-horizon MDP.
#[derive(Clone, Debug, PartialEq)]
pub struct Mdp {
    pub id: String,
    pub dynamics: Dynamics,
    pub bounds: ActionBounds,
    pub horizon: usize,
    pub gamma: f64,
    /// Success threshold on the final task distance.
    pub success_distance: f64,
    pub action_penalty: f64,
    pub terminate_on_success: bool,
}

impl Mdp {
    pub fn state_dim(&self) -> usize {
        match &self.dynamics {
            Dynamics::PointMass { .. } => 2,
            Dynamics::LiftedPointMass { lift, .. } => lift.rows(),
            Dynamics::OneJointArm { .. } => 3,
            Dynamics::TwoJointArm { .. } => 8,
        }
    }

    pub fn action_dim(&self) -> usize {
        self.bounds.dim()
    }

    /// Distance between the controlled point and the goal.
    pub fn task_distance(&self, state: &[f64]) -> f64 {
        match &self.dynamics {
            Dynamics::PointMass { .. } => norm(state),
            Dynamics::LiftedPointMass { lift_pinv, .. } => norm(&mat_vec(lift_pinv, state)),
            Dynamics::OneJointArm { length, .. } => 2.0 * length * (state[2] / 2.0).sin().abs(),
            Dynamics::TwoJointArm { .. } => {
                let dx = state[4] - state[6];
                let dy = state[5] - state[7];
                (dx * dx + dy * dy).sqrt()
            }
        }
    }

    pub fn success(&self, state: &[f64]) -> bool {
        self.task_distance(state) < self.success_distance
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim() {
            return Err(Error::Shape(format!(
                "{}: state has {} entries, expected {}",
                self.id,
                state.len(),
                self.state_dim()
            )));
        }
        ensure_finite(state, "state")
    }

    /// One deterministic transition. The action is clamped to the bounds first;
    /// the reward is evaluated on the successor state.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<StepOutcome> {
        self.check_state(state)?;
        if action.len() != self.action_dim() {
            return Err(Error::Shape(format!(
                "{}: action has {} entries, expected {}",
                self.id,
                action.len(),
                self.action_dim()
            )));
        }
        ensure_finite(action, "action")?;
        let a = self.bounds.clamp(action);
        let next_state = self.transition(state, &a);
        let penalty = self.action_penalty * a.iter().map(|v| v * v).sum::<f64>();
        let reward = -self.task_distance(&next_state) - penalty;
        let done = self.success(&next_state);
        Ok(StepOutcome {
            next_state,
            reward,
            done,
        })
    }

    fn transition(&self, s: &[f64], a: &[f64]) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::PointMass { dt, .. } => vec![s[0] + a[0] * dt, s[1] + a[1] * dt],
            Dynamics::LiftedPointMass {
                lift,
                action_proj,
                dt,
                ..
            } => {
                let v = mat_vec(action_proj, a);
                let ds = mat_vec(lift, &v);
                s.iter().zip(ds).map(|(x, d)| x + d * dt).collect()
            }
            Dynamics::OneJointArm { dt, .. } => {
                let theta = s[1].atan2(s[0]) + a[0] * dt;
                vec![theta.cos(), theta.sin(), wrap_angle(s[2] - a[0] * dt)]
            }
            Dynamics::TwoJointArm { l1, l2, dt, .. } => {
                let t1 = s[1].atan2(s[0]) + a[0] * dt;
                let t2 = s[3].atan2(s[2]) + a[1] * dt;
                two_link_state(*l1, *l2, t1, t2, s[4], s[5])
            }
        }
    }

    /// Draws an initial state from the environment's start distribution.
    pub fn sample_initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.dynamics {
            Dynamics::PointMass {
                init_half_width, ..
            } => (0..2)
                .map(|_| rng.random_range(-*init_half_width..=*init_half_width))
                .collect(),
            Dynamics::LiftedPointMass {
                lift,
                init_half_width,
                ..
            } => {
                let p: Vec<f64> = (0..2)
                    .map(|_| rng.random_range(-*init_half_width..=*init_half_width))
                    .collect();
                mat_vec(lift, &p)
            }
            Dynamics::OneJointArm { .. } => {
                let theta = rng.random_range(-PI..PI);
                let goal = rng.random_range(-PI..PI);
                vec![theta.cos(), theta.sin(), wrap_angle(goal - theta)]
            }
            Dynamics::TwoJointArm {
                l1,
                l2,
                elbow_init,
                goal_radius_range: (r_lo, r_hi),
                ..
            } => {
                let t1 = rng.random_range(-PI..PI);
                let t2 = rng.random_range(-*elbow_init..=*elbow_init);
                let reach = l1 + l2;
                let r = reach * rng.random_range(*r_lo..=*r_hi);
                let phi = rng.random_range(-PI..PI);
                two_link_state(*l1, *l2, t1, t2, r * phi.cos(), r * phi.sin())
            }
        }
    }

    /// Closed-form proportional controller toward the goal, clamped to the bounds.
    pub fn optimal_action(&self, s: &[f64]) -> Vec<f64> {
        let raw = match &self.dynamics {
            Dynamics::PointMass { dt, .. } => vec![-s[0] / dt, -s[1] / dt],
            Dynamics::LiftedPointMass {
                lift_pinv,
                action_lift,
                dt,
                ..
            } => {
                let p = mat_vec(lift_pinv, s);
                let v: Vec<f64> = p.iter().map(|x| -x / dt).collect();
                let v = self.source_velocity_limit().clamp(&v);
                mat_vec(action_lift, &v)
            }
            Dynamics::OneJointArm { dt, .. } => vec![s[2] / dt],
            Dynamics::TwoJointArm { l1, l2, dt, .. } => {
                let t1 = s[1].atan2(s[0]);
                let t2 = s[3].atan2(s[2]);
                let (t1_star, t2_star) = two_link_ik(*l1, *l2, s[4], s[5], t2 >= 0.0);
                vec![
                    wrap_angle(t1_star - t1) / dt,
                    wrap_angle(t2_star - t2) / dt,
                ]
            }
        };
        self.bounds.clamp(&raw)
    }

    fn source_velocity_limit(&self) -> ActionBounds {
        match &self.bounds {
            ActionBounds::Ball { radius, .. } => ActionBounds::Ball {
                dim: 2,
                radius: *radius,
            },
            ActionBounds::Box { high, .. } => ActionBounds::Ball {
                dim: 2,
                radius: high[0],
            },
        }
    }
}

pub(crate) fn two_link_state(l1: f64, l2: f64, t1: f64, t2: f64, gx: f64, gy: f64) -> Vec<f64> {
    let ex = l1 * t1.cos() + l2 * (t1 + t2).cos();
    let ey = l1 * t1.sin() + l2 * (t1 + t2).sin();
    vec![t1.cos(), t1.sin(), t2.cos(), t2.sin(), gx, gy, ex, ey]
}

/// Joint angles placing the end effector at `(gx, gy)`; targets outside the
/// annulus of reach are projected onto it.
pub(crate) fn two_link_ik(l1: f64, l2: f64, gx: f64, gy: f64, elbow_positive: bool) -> (f64, f64) {
    let r2 = gx * gx + gy * gy;
    let c2 = ((r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)).clamp(-1.0, 1.0);
    let mut t2 = c2.acos();
    if !elbow_positive {
        t2 = -t2;
    }
    let t1 = gy.atan2(gx) - (l2 * t2.sin()).atan2(l1 + l2 * t2.cos());
    (wrap_angle(t1), t2)
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    m.iter_rows()
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}
