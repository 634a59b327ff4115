//! Episode rollouts and the trajectory record shared by every consumer.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::{IntrinsicScale, RunConfig, YDownstream};
use crate::envs::{avg_episode_success, ego_extract, reset, shape_reward, step, EgoMask, TaskSpec};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::highlevel::Mdp;
use crate::lowlevel::{intrinsic_reward, PolicyMode};
use crate::numerics::Mode;
use crate::rng::{derive_seed, rng_for, standard_normal_vec};
use crate::trainer::Model;

/// Per-step record. `y` and `z` are the values the policy acted on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub a: Vec<f64>,
    pub pre_squash: Vec<f64>,
    pub log_prob: f64,
    pub r_ext: f64,
    pub r_shaped: f64,
    pub r_in: f64,
    pub r_total: f64,
    /// Reward that scaled `r_in`.
    pub r_scale: f64,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub value: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task: usize,
    pub seed: u64,
    /// `steps.len() + 1` states; `states[t]` precedes `steps[t]`.
    pub states: Vec<Vec<f64>>,
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn success_flags(&self) -> Vec<bool> {
        self.steps.iter().map(|s| s.success).collect()
    }

    pub fn avg_success(&self) -> Result<f64> {
        Ok(avg_episode_success(&self.success_flags())?.average)
    }

    pub fn terminal_success(&self) -> bool {
        self.steps.last().is_some_and(|s| s.success)
    }

    /// Undiscounted sum of extrinsic reward.
    pub fn extrinsic_return(&self) -> f64 {
        self.steps.iter().map(|s| s.r_ext).sum()
    }

    pub fn ego_states(&self, mask: &EgoMask) -> Result<Vec<Vec<f64>>> {
        self.states.iter().map(|s| ego_extract(s, mask)).collect()
    }
}

/// Writes one JSON object per line.
pub fn write_trajectories<W: Write>(mut w: W, trajs: &[Trajectory]) -> Result<()> {
    for t in trajs {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trajectories<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutMode {
    /// Sample macro-actions and actions.
    Explore,
    /// Act with the distribution means.
    Greedy,
}

pub(crate) fn downstream_y(y: &[f64], how: YDownstream) -> Vec<f64> {
    match how {
        YDownstream::Soft => y.to_vec(),
        YDownstream::OneHot => {
            let best = y
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0;
            (0..y.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect()
        }
    }
}

/// Rolls one full episode. The task representation is reset at the start
/// and always runs without dropout.
pub fn run_episode(model: &Model, cfg: &RunConfig, task: &TaskSpec, seed: u64, mode: RolloutMode) -> Result<Trajectory> {
    let mut env = reset(task, derive_seed(seed, &[0]));
    let mut rng = rng_for(seed, &[1]);
    let ad = task.action_dim();
    let mut rep = model.hl.initial(&model.hl_params)?;
    let mut states = vec![env.s.clone()];
    let mut steps = Vec::with_capacity(task.horizon);
    while !env.done {
        let s = env.s.clone();
        let y = downstream_y(&rep.y, cfg.model.y_downstream);
        let (z, action) = match mode {
            RolloutMode::Explore => {
                let zn = standard_normal_vec(&mut rng, ad);
                let z = model.il.encode_macro(&model.il_params, &y, &s, &zn)?.z;
                let an = standard_normal_vec(&mut rng, ad);
                let act = model.pi.act(&model.pi_params, &y, &z, &s, &an, PolicyMode::Train)?;
                (z, act)
            }
            RolloutMode::Greedy => {
                let z = model.il.mean_macro(&model.il_params, &y, &s)?;
                let act = model.pi.act(&model.pi_params, &y, &z, &s, &vec![0.0; ad], PolicyMode::Eval)?;
                (z, act)
            }
        };
        let phase = env.t as f64 / task.horizon as f64;
        let value = model.hl.value_estimate(&model.hl_params, &y, &s, phase)?;
        let out = step(&env, task, &action.a)?;
        let r_shaped = shape_reward(out.r_ext, cfg.model.reward_shape_a)?;
        let r_scale = match cfg.model.intrinsic_scale {
            IntrinsicScale::Shaped => r_shaped,
            IntrinsicScale::Raw => out.r_ext,
        };
        let r_in = intrinsic_reward(&z, &action.a, r_scale)?;
        rep = model.hl.forward(
            &model.hl_params,
            Mdp {
                s: &s,
                a: &action.a,
                r: out.r_ext,
                s_next: &out.state.s,
            },
            &rep.h,
            &mut Mode::Eval,
        )?;
        steps.push(StepRecord {
            a: action.a,
            pre_squash: action.pre_squash,
            log_prob: action.log_prob,
            r_ext: out.r_ext,
            r_shaped,
            r_in,
            r_total: r_shaped + r_in,
            r_scale,
            y,
            z,
            value,
            success: out.success,
        });
        states.push(out.state.s.clone());
        env = out.state;
    }
    Ok(Trajectory {
        task: task.id,
        seed,
        states,
        steps,
    })
}

/// `episodes` rollouts per task, seeded by `(base, stream, iteration, task,
/// episode)`, returned task-major.
pub fn collect(
    model: &Model,
    cfg: &RunConfig,
    tasks: &[TaskSpec],
    episodes: usize,
    stream: u64,
    iteration: u64,
    mode: RolloutMode,
    exec: Exec,
) -> Result<Vec<Trajectory>> {
    let jobs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|t| (0..episodes).map(move |e| (t, e))).collect();
    let base = cfg.train.seed;
    exec.map(jobs, |(t, e)| {
        let seed = derive_seed(base, &[stream, iteration, t as u64, e as u64]);
        run_episode(model, cfg, &tasks[t], seed, mode)
    })
    .into_iter()
    .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitStats {
    pub avg_success_mean: f64,
    pub avg_success_std: f64,
    pub success_mean: f64,
    pub success_std: f64,
    pub return_mean: f64,
    pub return_std: f64,
}

impl SplitStats {
    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        if trajs.is_empty() {
            return Err(Error::Usage("no trajectories to summarise".into()));
        }
        let avg: Vec<f64> = trajs.iter().map(Trajectory::avg_success).collect::<Result<_>>()?;
        let term: Vec<f64> = trajs.iter().map(|t| f64::from(u8::from(t.terminal_success()))).collect();
        let ret: Vec<f64> = trajs.iter().map(Trajectory::extrinsic_return).collect();
        let (a, b, c) = (mean_std(&avg), mean_std(&term), mean_std(&ret));
        Ok(Self {
            avg_success_mean: a.0,
            avg_success_std: a.1,
            success_mean: b.0,
            success_std: b.1,
            return_mean: c.0,
            return_std: c.1,
        })
    }
}
