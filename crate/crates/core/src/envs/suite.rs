use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::envs::EgoMask;
use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    /// `s' = s + B a` in two dimensions.
    Linear,
    /// 2-D point mass; state is position, velocity and the goal as context.
    Nav2d,
}

impl FromStr for SuiteKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SuiteKind::Linear),
            "nav2d" => Ok(SuiteKind::Nav2d),
            other => Err(Error::Config(format!("unknown suite `{other}` (expected linear or nav2d)"))),
        }
    }
}

impl fmt::Display for SuiteKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SuiteKind::Linear => "linear",
            SuiteKind::Nav2d => "nav2d",
        })
    }
}

/// Parameters shared by every task of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub kind: SuiteKind,
    pub n_train: usize,
    pub n_test: usize,
    pub horizon: usize,
    pub success_radius: f64,
    pub reward_scale: f64,
    pub start_jitter: f64,
    pub goal_radius: f64,
    pub linear_perturbation: f64,
    pub nav_dt: f64,
    pub nav_max_accel: f64,
    pub nav_damping: f64,
    pub nav_gain_jitter: f64,
}

impl SuiteConfig {
    pub fn defaults_for(kind: SuiteKind) -> Self {
        match kind {
            SuiteKind::Linear => Self {
                kind,
                n_train: 10,
                n_test: 5,
                horizon: 10,
                success_radius: 1.0,
                reward_scale: 1.0,
                start_jitter: 0.5,
                goal_radius: 10.0,
                linear_perturbation: 0.05,
                nav_dt: 0.1,
                nav_max_accel: 2.0,
                nav_damping: 0.9,
                nav_gain_jitter: 0.0,
            },
            SuiteKind::Nav2d => Self {
                kind,
                n_train: 10,
                n_test: 5,
                horizon: 100,
                success_radius: 0.1,
                reward_scale: 1.0,
                start_jitter: 0.2,
                goal_radius: 0.7,
                linear_perturbation: 0.0,
                nav_dt: 0.1,
                nav_max_accel: 2.0,
                nav_damping: 0.9,
                nav_gain_jitter: 0.0,
            },
        }
    }

    pub fn state_dim(&self) -> usize {
        match self.kind {
            SuiteKind::Linear => 2,
            SuiteKind::Nav2d => 6,
        }
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    pub fn ego_mask(&self) -> EgoMask {
        match self.kind {
            SuiteKind::Linear => EgoMask::all(2),
            SuiteKind::Nav2d => EgoMask::new(vec![0, 1, 2, 3], 6).expect("static mask"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_train < 1 || self.n_test < 1 {
            return bad("suite needs at least one train and one test task");
        }
        if self.horizon < 1 {
            return bad("horizon must be >= 1");
        }
        if !(self.success_radius > 0.0) {
            return bad("success_radius must be > 0");
        }
        if !(self.reward_scale > 0.0) || !(self.goal_radius > 0.0) {
            return bad("reward_scale and goal_radius must be > 0");
        }
        if !(self.start_jitter >= 0.0) || !(self.linear_perturbation >= 0.0) || !(self.nav_gain_jitter >= 0.0) {
            return bad("jitter and perturbation must be >= 0");
        }
        if self.nav_gain_jitter >= 1.0 {
            return bad("nav_gain_jitter must be < 1");
        }
        if !(self.nav_dt > 0.0) || !(self.nav_max_accel > 0.0) || !(0.0..=1.0).contains(&self.nav_damping) {
            return bad("nav2d dynamics need dt > 0, max_accel > 0, damping in [0, 1]");
        }
        Ok(())
    }
}

/// One task: transition parameters plus goal-based reward parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub suite: SuiteKind,
    pub id: usize,
    /// Action-to-state map, row-major `state_dim × action_dim` (linear suite).
    pub b: Vec<f64>,
    pub goal: [f64; 2],
    pub success_radius: f64,
    pub horizon: usize,
    pub reward_scale: f64,
    pub arena_diameter: f64,
    pub start_jitter: f64,
    pub action_gain: f64,
    pub dt: f64,
    pub max_accel: f64,
    pub damping: f64,
}

impl TaskSpec {
    pub fn state_dim(&self) -> usize {
        match self.suite {
            SuiteKind::Linear => 2,
            SuiteKind::Nav2d => 6,
        }
    }

    pub fn action_dim(&self) -> usize {
        2
    }

    fn position<'a>(&self, s: &'a [f64]) -> &'a [f64] {
        &s[..2]
    }

    pub fn goal_distance(&self, s: &[f64]) -> f64 {
        let p = self.position(s);
        ((p[0] - self.goal[0]).powi(2) + (p[1] - self.goal[1]).powi(2)).sqrt()
    }

    /// `c · max(0, 1 − ‖pos − g‖ / D)`; never negative.
    pub fn reward(&self, s: &[f64]) -> f64 {
        (self.reward_scale * (1.0 - self.goal_distance(s) / self.arena_diameter)).max(0.0)
    }
}

/// Builds deterministic train and test task lists with pairwise-distinct goals.
///
/// Goals sit on a circle of radius `goal_radius` at evenly spaced angles with a
/// seeded rotation; the angles are shuffled and split, so train and test goals
/// never coincide.
pub fn make_suite(cfg: &SuiteConfig, seed: u64) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
    cfg.validate()?;
    let mut rng = rng_for(seed, &[stream::SUITE]);
    let n = cfg.n_train + cfg.n_test;
    let offset = rng.random_range(0.0..2.0 * PI);
    let mut angles: Vec<f64> = (0..n).map(|k| offset + 2.0 * PI * k as f64 / n as f64).collect();
    angles.shuffle(&mut rng);
    let (sd, ad) = (cfg.state_dim(), cfg.action_dim());
    let tasks: Vec<TaskSpec> = angles
        .iter()
        .enumerate()
        .map(|(id, &theta)| {
            let goal = [cfg.goal_radius * theta.cos(), cfg.goal_radius * theta.sin()];
            let b = (0..sd * ad)
                .map(|k| {
                    let identity = if k / ad == k % ad { 1.0 } else { 0.0 };
                    let noise = if cfg.kind == SuiteKind::Linear && cfg.linear_perturbation > 0.0 {
                        rng.random_range(-1.0..=1.0) * cfg.linear_perturbation
                    } else {
                        0.0
                    };
                    identity + noise
                })
                .collect();
            let action_gain = if cfg.nav_gain_jitter > 0.0 {
                1.0 + rng.random_range(-1.0..=1.0) * cfg.nav_gain_jitter
            } else {
                1.0
            };
            // disc spanning every goal and start
            let arena_diameter = 2.0 * (cfg.goal_radius + cfg.start_jitter);
            TaskSpec {
                suite: cfg.kind,
                id,
                b,
                goal,
                success_radius: cfg.success_radius,
                horizon: cfg.horizon,
                reward_scale: cfg.reward_scale,
                arena_diameter,
                start_jitter: cfg.start_jitter,
                action_gain,
                dt: cfg.nav_dt,
                max_accel: cfg.nav_max_accel,
                damping: cfg.nav_damping,
            }
        })
        .collect();
    let mut train = tasks;
    let mut test = train.split_off(cfg.n_train);
    for (i, t) in test.iter_mut().enumerate() {
        t.id = i;
    }
    Ok((train, test))
}

/// Environment state during one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub s: Vec<f64>,
    pub t: usize,
    pub success: bool,
    pub done: bool,
    /// Number of steps whose action had to be clamped into [−1, 1].
    pub clamp_warnings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: EnvState,
    pub r_ext: f64,
    pub done: bool,
    pub success: bool,
}

pub fn reset(task: &TaskSpec, seed: u64) -> EnvState {
    let mut rng = rng_for(seed, &[]);
    let mut jitter = || {
        if task.start_jitter > 0.0 {
            rng.random_range(-task.start_jitter..=task.start_jitter)
        } else {
            0.0
        }
    };
    let s = match task.suite {
        SuiteKind::Linear => vec![jitter(), jitter()],
        SuiteKind::Nav2d => {
            let (px, py) = (jitter(), jitter());
            vec![px, py, 0.0, 0.0, task.goal[0], task.goal[1]]
        }
    };
    EnvState {
        s,
        t: 0,
        success: false,
        done: false,
        clamp_warnings: 0,
    }
}

/// Advances one step. Episodes always run to the horizon; success latches.
pub fn step(env: &EnvState, task: &TaskSpec, action: &[f64]) -> Result<StepOutcome> {
    if env.done || env.t >= task.horizon {
        return Err(Error::Usage("step called on a finished episode".into()));
    }
    if action.len() != task.action_dim() {
        return Err(Error::dim("env step", &[action.len()], &[task.action_dim()]));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numeric("non-finite action".into()));
    }
    let clamped = action.iter().any(|a| a.abs() > 1.0);
    let a: Vec<f64> = action.iter().map(|x| x.clamp(-1.0, 1.0)).collect();
    let s = &env.s;
    let next = match task.suite {
        SuiteKind::Linear => {
            let ad = task.action_dim();
            (0..task.state_dim())
                .map(|i| s[i] + (0..ad).map(|j| task.b[i * ad + j] * a[j]).sum::<f64>())
                .collect::<Vec<f64>>()
        }
        SuiteKind::Nav2d => {
            let mut n = s.clone();
            for d in 0..2 {
                let v = task.damping * s[2 + d] + task.action_gain * task.max_accel * a[d] * task.dt;
                let mut p = s[d] + v * task.dt;
                let mut v = v;
                if p.abs() > 1.0 {
                    p = p.clamp(-1.0, 1.0);
                    v = 0.0;
                }
                n[d] = p;
                n[2 + d] = v;
            }
            n
        }
    };
    let t = env.t + 1;
    let r_ext = task.reward(&next);
    let success = env.success || task.goal_distance(&next) < task.success_radius;
    let done = t >= task.horizon;
    Ok(StepOutcome {
        state: EnvState {
            s: next,
            t,
            success,
            done,
            clamp_warnings: env.clamp_warnings + usize::from(clamped),
        },
        r_ext,
        done,
        success,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_cfg() -> SuiteConfig {
        SuiteConfig {
            linear_perturbation: 0.0,
            start_jitter: 0.0,
            ..SuiteConfig::defaults_for(SuiteKind::Linear)
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let cfg = SuiteConfig {
            n_train: 2,
            n_test: 1,
            ..SuiteConfig::defaults_for(SuiteKind::Nav2d)
        };
        let a = make_suite(&cfg, 42).unwrap();
        let b = make_suite(&cfg, 42).unwrap();
        assert_eq!(a, b);
        let goals: Vec<[f64; 2]> = a.0.iter().chain(&a.1).map(|t| t.goal).collect();
        assert_eq!(goals.len(), 3);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(goals[i], goals[j]);
            }
        }
    }

    #[test]
    fn zero_perturbation_gives_identity() {
        let (train, test) = make_suite(&linear_cfg(), 7).unwrap();
        for t in train.iter().chain(&test) {
            assert_eq!(t.b, vec![1.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn reset_cases() {
        let (train, _) = make_suite(&linear_cfg(), 1).unwrap();
        let e = reset(&train[0], 5);
        assert_eq!(e.s, vec![0.0, 0.0]);
        assert_eq!(e.t, 0);
        let cfg = SuiteConfig::defaults_for(SuiteKind::Nav2d);
        let (train, _) = make_suite(&cfg, 1).unwrap();
        assert_eq!(reset(&train[0], 9), reset(&train[0], 9));
        assert_ne!(reset(&train[0], 9), reset(&train[0], 10));
    }

    #[test]
    fn linear_step_and_closed_form() {
        let (train, _) = make_suite(&linear_cfg(), 1).unwrap();
        let task = &train[0];
        let mut e = reset(task, 0);
        let out = step(&e, task, &[1.0, 0.0]).unwrap();
        assert_eq!(out.state.s, vec![1.0, 0.0]);
        for _ in 0..3 {
            e = step(&e, task, &[1.0, 0.0]).unwrap().state;
        }
        assert_eq!(e.s, vec![3.0, 0.0]);
    }

    #[test]
    fn reward_is_max_at_goal() {
        let (train, _) = make_suite(&SuiteConfig::defaults_for(SuiteKind::Nav2d), 3).unwrap();
        let t = &train[0];
        let s = vec![t.goal[0], t.goal[1], 0.0, 0.0, t.goal[0], t.goal[1]];
        assert_eq!(t.reward(&s), t.reward_scale);
    }

    #[test]
    fn finished_episode_rejects_step() {
        let cfg = SuiteConfig {
            horizon: 1,
            ..linear_cfg()
        };
        let (train, _) = make_suite(&cfg, 1).unwrap();
        let e = reset(&train[0], 0);
        let out = step(&e, &train[0], &[0.0, 0.0]).unwrap();
        assert!(out.done);
        assert!(matches!(step(&out.state, &train[0], &[0.0, 0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn out_of_range_actions_are_clamped_and_counted() {
        let (train, _) = make_suite(&linear_cfg(), 1).unwrap();
        let e = reset(&train[0], 0);
        let out = step(&e, &train[0], &[3.0, -0.5]).unwrap();
        assert_eq!(out.state.s, vec![1.0, -0.5]);
        assert_eq!(out.state.clamp_warnings, 1);
    }

    #[test]
    fn unknown_suite_name() {
        assert!(matches!("mujoco".parse::<SuiteKind>(), Err(Error::Config(_))));
    }
}
