//! Independent reference computations: the closed-form macro-action of the
//! linear suite, Monte-Carlo returns, macro-action alignment, and gradient
//! checks of every layer loss.

use std::fmt;
use std::io::Write;

use crate::config::RunConfig;
use crate::envs::SuiteKind;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::highlevel::{hl_loss, HlLossWeights};
use crate::intermediate::{il_loss, IlLossWeights};
use crate::lowlevel::ppo_loss;
use crate::numerics::{finite_diff_check, GradCheckReport, Mode};
use crate::rng::{rng_for, stream};
use crate::trainer::{collect, hl_batch, il_batch, rollout_batch, Model, RolloutMode, RunState, Trajectory};

/// Closed form of `M` linear-suite steps from `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroOracle {
    pub goal: Vec<f64>,
    pub action_sum: Vec<f64>,
}

/// `s + B·Σa` and `Σa`, with `B` row-major `state_dim × action_dim`.
pub fn macro_oracle(s: &[f64], actions: &[Vec<f64>], b: &[f64]) -> Result<MacroOracle> {
    let ad = actions.first().map_or(0, Vec::len);
    if ad == 0 || b.len() != s.len() * ad || actions.iter().any(|a| a.len() != ad) {
        return Err(Error::dim("macro_oracle", &[s.len(), ad], &[b.len()]));
    }
    let mut sum = vec![0.0; ad];
    for a in actions {
        for (acc, x) in sum.iter_mut().zip(a) {
            *acc += x;
        }
    }
    let goal = (0..s.len())
        .map(|i| s[i] + (0..ad).map(|j| b[i * ad + j] * sum[j]).sum::<f64>())
        .collect();
    Ok(MacroOracle { goal, action_sum: sum })
}

/// `G_t = r_t + γ G_{t+1}`, computed backwards from `G_T = 0`.
pub fn mc_return(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for t in (0..rewards.len()).rev() {
        g = rewards[t] + gamma * g;
        out[t] = g;
    }
    out
}

/// One `(y, s, action window)` tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentSample {
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub actions: Vec<Vec<f64>>,
    /// Normaliser for the action sum.
    pub m: usize,
}

impl AlignmentSample {
    /// `tanh(Σa / M)`.
    pub fn target(&self) -> Vec<f64> {
        let ad = self.actions.first().map_or(0, Vec::len);
        (0..ad)
            .map(|j| (self.actions.iter().map(|a| a[j]).sum::<f64>() / self.m as f64).tanh())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentReport {
    pub mean: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    pub n: usize,
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Cosine between `encoder(sample)` and `tanh(Σa / M)` over `data`.
pub fn macro_alignment<F>(encoder: F, data: &[AlignmentSample]) -> Result<AlignmentReport>
where
    F: Fn(&AlignmentSample) -> Result<Vec<f64>>,
{
    if data.is_empty() {
        return Err(Error::Usage("macro_alignment needs a non-empty dataset".into()));
    }
    let mut cs = data
        .iter()
        .map(|d| Ok(cosine(&encoder(d)?, &d.target())))
        .collect::<Result<Vec<f64>>>()?;
    let mean = cs.iter().sum::<f64>() / cs.len() as f64;
    cs.sort_by(f64::total_cmp);
    Ok(AlignmentReport {
        mean,
        q10: quantile(&cs, 0.1),
        q50: quantile(&cs, 0.5),
        q90: quantile(&cs, 0.9),
        n: cs.len(),
    })
}

/// One tuple per step `t` with a full window `a_t … a_{t+M−1}` inside the
/// episode.
pub fn alignment_dataset(trajs: &[Trajectory], cfg: &RunConfig) -> Result<Vec<AlignmentSample>> {
    let m = cfg.model.goal_horizon;
    if m == 0 {
        return Err(Error::Config("goal_horizon must be >= 1".into()));
    }
    let mut out = Vec::new();
    for tr in trajs {
        for t in 0..(tr.len() + 1).saturating_sub(m) {
            out.push(AlignmentSample {
                y: tr.steps[t].y.clone(),
                s: tr.states[t].clone(),
                actions: tr.steps[t..t + m].iter().map(|s| s.a.clone()).collect(),
                m,
            });
        }
    }
    Ok(out)
}

/// Greedy rollouts on fresh seeds of the training tasks.
pub fn held_out_rollouts(state: &RunState, episodes: usize) -> Result<Vec<Trajectory>> {
    collect(
        &state.model,
        &state.cfg,
        &state.train_tasks,
        episodes,
        stream::ORACLE,
        state.iteration,
        RolloutMode::Greedy,
        state.cfg.train.exec,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub metric: String,
    pub oracle: f64,
    pub system: f64,
    pub tolerance: f64,
    /// `true` when `system` must reach `oracle − tolerance` rather than
    /// match it.
    pub threshold: bool,
    pub pass: bool,
}

impl OracleReport {
    pub fn difference(metric: &str, oracle: f64, system: f64, tolerance: f64) -> Self {
        Self {
            metric: metric.into(),
            oracle,
            system,
            tolerance,
            threshold: false,
            pass: (oracle - system).abs() <= tolerance,
        }
    }

    pub fn at_least(metric: &str, target: f64, system: f64) -> Self {
        Self {
            metric: metric.into(),
            oracle: target,
            system,
            tolerance: 0.0,
            threshold: true,
            pass: system >= target,
        }
    }

    pub const CSV_HEADER: &'static str = "metric,oracle,system,tolerance,pass";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.metric, self.oracle, self.system, self.tolerance, self.pass)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rel = if self.threshold { ">=" } else { "~" };
        write!(
            f,
            "{:<5} {:<26} system {:<12.6e} {rel} oracle {:<12.6e} tol {:.1e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.metric,
            self.system,
            self.oracle,
            self.tolerance
        )
    }
}

pub fn write_reports<W: Write>(mut w: W, reports: &[OracleReport]) -> Result<()> {
    writeln!(w, "{}", OracleReport::CSV_HEADER)?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

pub const ALIGNMENT_THRESHOLD: f64 = 0.8;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_DELTA: f64 = 1e-5;

/// Encoder used for the alignment row; defaults to the trained macro-action
/// layer's mean.
pub type EncoderFn<'a> = &'a dyn Fn(&AlignmentSample) -> Result<Vec<f64>>;

/// Narrow copy of `cfg` used for gradient checks.
fn gradcheck_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    let m = &mut c.model;
    m.gru_hidden = m.gru_hidden.min(6);
    for h in [
        &mut m.categorical_hidden,
        &mut m.value_hidden,
        &mut m.encoder_hidden,
        &mut m.decoder_hidden,
        &mut m.policy_hidden,
    ] {
        for w in h.iter_mut() {
            *w = (*w).min(5);
        }
    }
    m.embed_state = m.embed_state.min(4);
    m.embed_action = m.embed_action.min(3);
    m.embed_reward = m.embed_reward.min(2);
    m.ego_embed = m.ego_embed.min(3);
    c.suite.horizon = 3;
    c.model.goal_horizon = c.model.goal_horizon.min(3);
    c.suite.n_train = 2;
    c.train.episodes_per_task = 1;
    c
}

/// Central-difference reports for the HL, IL and PPO losses on narrow
/// networks and a three-step batch.
pub fn layer_gradient_checks(cfg: &RunConfig, exec: Exec) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let cfg = gradcheck_config(cfg);
    let state = RunState::new(cfg.clone())?;
    let model: &Model = &state.model;
    let trajs = state.collect_train()?;
    let picks: Vec<&Trajectory> = trajs.iter().collect();
    let hb = hl_batch(&picks, cfg.loss.gamma)?;
    let ys = model.hl.representations(&model.hl_params, &hb)?;
    let mut rng = rng_for(cfg.train.seed, &[stream::ORACLE]);
    let ib = il_batch(model, &cfg, &picks, &ys, &cfg.suite.ego_mask(), &mut rng)?;
    let rb = rollout_batch(model, &trajs, cfg.loss.gamma, cfg.loss.lambda)?;
    let all: Vec<usize> = (0..rb.len()).collect();
    let hw = HlLossWeights {
        value: cfg.loss.alpha_v,
        entropy: cfg.loss.alpha_ent,
        occupancy: cfg.loss.alpha_occ,
    };
    let iw = IlLossWeights {
        kl: cfg.loss.beta_kl,
        transition: cfg.loss.beta_t,
    };
    let seed = cfg.train.seed;
    let hl = finite_diff_check(
        &model.hl_params,
        |g, ps| {
            let mut r = rng_for(seed, &[stream::ORACLE, 1]);
            Ok(hl_loss(&model.hl, g, ps, &hb, &hw, &mut Mode::Train(&mut r))?.0)
        },
        GRADCHECK_DELTA,
        exec,
    )?;
    let il = finite_diff_check(
        &model.il_params,
        |g, ps| {
            let mut r = rng_for(seed, &[stream::ORACLE, 2]);
            Ok(il_loss(&model.il, g, ps, &ib, &iw, &mut Mode::Train(&mut r))?.0)
        },
        GRADCHECK_DELTA,
        exec,
    )?;
    let ppo = finite_diff_check(
        &model.pi_params,
        |g, ps| Ok(ppo_loss(&model.pi, g, ps, &rb, &all, cfg.loss.clip, cfg.loss.alpha_2)?.0),
        GRADCHECK_DELTA,
        exec,
    )?;
    Ok(vec![("gradcheck_hl_loss", hl), ("gradcheck_il_loss", il), ("gradcheck_ppo_loss", ppo)])
}

/// Layer-loss gradient rows, judged beyond the rounding bound of the
/// central difference.
pub fn gradient_checks(cfg: &RunConfig, exec: Exec) -> Result<Vec<OracleReport>> {
    Ok(layer_gradient_checks(cfg, exec)?
        .into_iter()
        .map(|(name, r)| OracleReport {
            metric: name.into(),
            oracle: 0.0,
            system: r.max_resolved_error,
            tolerance: GRADCHECK_TOLERANCE,
            threshold: false,
            pass: r.passes_resolved(GRADCHECK_TOLERANCE),
        })
        .collect())
}

/// Every oracle row for a linear-suite run.
pub fn run_oracle_checks(state: &RunState, encoder: Option<EncoderFn<'_>>, episodes: usize) -> Result<Vec<OracleReport>> {
    let cfg = &state.cfg;
    if cfg.suite.kind != SuiteKind::Linear {
        return Err(Error::Config(format!(
            "oracle checks need the linear suite, config has `{}`",
            cfg.suite.kind
        )));
    }
    let trajs = held_out_rollouts(state, episodes)?;
    let m = cfg.model.goal_horizon;

    let mut max_macro_err = 0.0f64;
    for tr in &trajs {
        let task = &state.train_tasks[tr.task];
        for t in 0..=tr.len().saturating_sub(m) {
            let acts: Vec<Vec<f64>> = tr.steps[t..t + m].iter().map(|s| s.a.clone()).collect();
            let o = macro_oracle(&tr.states[t], &acts, &task.b)?;
            for (x, y) in o.goal.iter().zip(&tr.states[t + m]) {
                max_macro_err = max_macro_err.max((x - y).abs());
            }
        }
    }

    let mut max_rec_err = 0.0f64;
    for tr in &trajs {
        let r: Vec<f64> = tr.steps.iter().map(|s| s.r_total).collect();
        let g = mc_return(&r, cfg.loss.gamma);
        for t in 0..r.len() {
            let next = if t + 1 < r.len() { g[t + 1] } else { 0.0 };
            max_rec_err = max_rec_err.max((g[t] - (r[t] + cfg.loss.gamma * next)).abs());
        }
    }

    let data = alignment_dataset(&trajs, cfg)?;
    let trained = |d: &AlignmentSample| state.model.il.mean_macro(&state.model.il_params, &d.y, &d.s);
    let align = match encoder {
        Some(f) => macro_alignment(f, &data)?,
        None => macro_alignment(trained, &data)?,
    };

    let mut reports = vec![
        OracleReport::difference("macro_oracle_vs_env", 0.0, max_macro_err, 1e-12),
        OracleReport::difference("mc_return_recurrence", 0.0, max_rec_err, 1e-9),
        OracleReport::at_least("macro_alignment_mean", ALIGNMENT_THRESHOLD, align.mean),
    ];
    reports.extend(gradient_checks(cfg, cfg.train.exec)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn macro_oracle_example() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let o = macro_oracle(&[0.5, -1.0], &[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], &eye).unwrap();
        assert_eq!(o.action_sum, vec![2.0, 1.0]);
        assert_eq!(o.goal, vec![2.5, 0.0]);
    }

    #[test]
    fn mc_return_examples() {
        assert_eq!(mc_return(&[1.0, 1.0, 1.0], 1.0), vec![3.0, 2.0, 1.0]);
        assert_eq!(mc_return(&[1.0, 0.0, 0.0], 0.99), vec![1.0, 0.0, 0.0]);
        let g = mc_return(&[0.0, 0.0, 1.0], 0.5);
        assert_abs_diff_eq!(g[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(g[1], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn ideal_encoder_is_perfectly_aligned() {
        let data = vec![
            AlignmentSample {
                y: vec![1.0],
                s: vec![0.0, 0.0],
                actions: vec![vec![0.3, -0.2], vec![0.5, 0.1]],
                m: 2,
            };
            3
        ];
        let r = macro_alignment(|d| Ok(d.target()), &data).unwrap();
        assert_abs_diff_eq!(r.mean, 1.0, epsilon = 1e-12);
        assert!(macro_alignment(|d| Ok(d.target()), &[]).is_err());
    }
}
