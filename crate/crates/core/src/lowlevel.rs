//! Low-level policy `π(a | y, z, s)`: a tanh-Gaussian actor trained with
//! clipped PPO on extrinsic plus sign-matching intrinsic reward.
//!
//! The policy has no value head; advantages use the task-representation
//! layer's value estimates.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numerics::layers::{bounded_std, gaussian_entropy, gaussian_log_prob, tanh_log_jacobian};
use crate::numerics::{Activation, AdamConfig, Graph, Linear, Mlp, Mode, ParameterSet, StdRange, Var};
use crate::rng::Rng;

/// Below this magnitude a component counts as sign 0.
pub const SIGN_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDims {
    pub k: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: Vec<usize>,
    pub std_range: StdRange,
}

impl PolicyDims {
    pub fn input_dim(&self) -> usize {
        self.k + self.action_dim + self.state_dim
    }
}

#[derive(Debug, Clone)]
pub struct PolicyNet {
    pub dims: PolicyDims,
    trunk: Mlp,
    mean_head: Linear,
    std_head: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyMode {
    /// Sample from the tanh-Gaussian.
    Train,
    /// Act with `tanh(mean)`.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Action {
    pub a: Vec<f64>,
    /// Pre-squash value whose density `log_prob` describes.
    pub pre_squash: Vec<f64>,
    pub log_prob: f64,
}

impl PolicyNet {
    pub fn new(dims: PolicyDims, ps: &mut ParameterSet, rng: &mut Rng) -> Result<Self> {
        let Some((&last, rest)) = dims.hidden.split_last() else {
            return Err(Error::Config("policy needs at least one hidden layer".into()));
        };
        let trunk = Mlp::new(ps, "pi.trunk", dims.input_dim(), rest, last, Activation::Tanh, 0.0, rng)?;
        let mean_head = Linear::new(ps, "pi.mean", last, dims.action_dim, 0.01, rng)?;
        let std_head = Linear::new(ps, "pi.std", last, dims.action_dim, 0.01, rng)?;
        Ok(Self {
            dims,
            trunk,
            mean_head,
            std_head,
        })
    }

    /// Pre-squash mean and bounded std. Inputs are treated as constants.
    pub fn dist<'p>(&self, g: &mut Graph<'p>, ps: &'p ParameterSet, y: Var, z: Var, s: Var) -> Result<(Var, Var)> {
        let x = g.concat(&[y, z, s])?;
        let x = g.detach(x);
        let h = self.trunk.forward(g, ps, x, &mut Mode::Eval)?;
        let h = g.tanh(h);
        let mean = self.mean_head.forward(g, ps, h)?;
        let raw = self.std_head.forward(g, ps, h)?;
        Ok((mean, bounded_std(g, raw, self.dims.std_range)))
    }

    /// Log-density of the squashed action whose pre-image is `u`.
    pub fn log_prob_of<'p>(&self, g: &mut Graph<'p>, u: Var, mean: Var, std: Var) -> Result<Var> {
        let lp = gaussian_log_prob(g, u, mean, std)?;
        let jac = tanh_log_jacobian(g, u);
        g.sub(lp, jac)
    }

    pub fn dist_values(&self, ps: &ParameterSet, y: &[f64], z: &[f64], s: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let (yv, zv, sv) = (g.constant_vec(y.to_vec()), g.constant_vec(z.to_vec()), g.constant_vec(s.to_vec()));
        let (m, sd) = self.dist(&mut g, ps, yv, zv, sv)?;
        Ok((g.value(m).to_vec(), g.value(sd).to_vec()))
    }

    /// `a = tanh(mean + std·noise)` in train mode, `tanh(mean)` in eval mode.
    pub fn act(&self, ps: &ParameterSet, y: &[f64], z: &[f64], s: &[f64], noise: &[f64], mode: PolicyMode) -> Result<Action> {
        if noise.len() != self.dims.action_dim {
            return Err(Error::dim("act", &[noise.len()], &[self.dims.action_dim]));
        }
        let mut g = Graph::new();
        let (yv, zv, sv) = (g.constant_vec(y.to_vec()), g.constant_vec(z.to_vec()), g.constant_vec(s.to_vec()));
        let (mean, std) = self.dist(&mut g, ps, yv, zv, sv)?;
        let u = match mode {
            PolicyMode::Train => {
                let n = g.constant_vec(noise.to_vec());
                let scaled = g.mul(std, n)?;
                g.add(mean, scaled)?
            }
            PolicyMode::Eval => mean,
        };
        let u = g.detach(u);
        let lp = self.log_prob_of(&mut g, u, mean, std)?;
        let pre_squash = g.value(u).to_vec();
        Ok(Action {
            a: pre_squash.iter().map(|v| v.tanh()).collect(),
            pre_squash,
            log_prob: g.scalar_value(lp),
        })
    }
}

fn sign(x: f64) -> i8 {
    if x.abs() < SIGN_EPS {
        0
    } else if x > 0.0 {
        1
    } else {
        -1
    }
}

/// `r · (1/|A|) Σᵢ [sgn zᵢ = sgn aᵢ]`.
pub fn intrinsic_reward(z: &[f64], a: &[f64], r: f64) -> Result<f64> {
    if z.len() != a.len() || z.is_empty() {
        return Err(Error::dim("intrinsic_reward", &[z.len()], &[a.len()]));
    }
    let matches = z.iter().zip(a).filter(|(zi, ai)| sign(**zi) == sign(**ai)).count();
    Ok(r * (matches as f64 / z.len() as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gae {
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// GAE(λ) over one or more concatenated episodes.
///
/// `values[t]` estimates `V(s_t)`. The step after `t` bootstraps from
/// `values[t + 1]` unless `dones[t]`; the final step uses `last_value`
/// when it is not terminal. Advantages are not normalized here.
pub fn gae(rewards: &[f64], values: &[f64], last_value: f64, dones: &[bool], gamma: f64, lambda: f64) -> Result<Gae> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Usage(format!(
            "gae: {n} rewards, {} values, {} done flags",
            values.len(),
            dones.len()
        )));
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let (next_v, cont) = if dones[t] {
            (0.0, 0.0)
        } else if t + 1 < n {
            (values[t + 1], 1.0)
        } else {
            (last_value, 1.0)
        };
        let delta = rewards[t] + gamma * next_v - values[t];
        running = delta + gamma * lambda * cont * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok(Gae { advantages: adv, returns })
}

/// Shifts to mean 0 and scales to std 1 (population std, `ε = 1e-8`).
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    for a in adv {
        *a = (*a - mean) / sd;
    }
}

/// One collected step as the policy saw it.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep {
    pub s: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub a: Vec<f64>,
    pub pre_squash: Vec<f64>,
    pub log_prob_old: f64,
    pub r_total: f64,
    pub value_old: f64,
    pub done: bool,
}

/// On-policy batch for one iteration's PPO update.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub dims: PolicyDims,
    pub steps: Vec<RolloutStep>,
    /// Index of the first step of every episode.
    pub episode_starts: Vec<usize>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    consumed: bool,
}

impl RolloutBatch {
    /// Computes GAE per episode (terminal bootstrap 0) and normalizes the
    /// advantages over the whole batch.
    pub fn new(dims: PolicyDims, episodes: Vec<Vec<RolloutStep>>, gamma: f64, lambda: f64) -> Result<Self> {
        let mut steps = Vec::new();
        let mut starts = Vec::new();
        let mut advantages = Vec::new();
        let mut returns = Vec::new();
        for ep in episodes {
            if ep.is_empty() {
                continue;
            }
            let r: Vec<f64> = ep.iter().map(|s| s.r_total).collect();
            let v: Vec<f64> = ep.iter().map(|s| s.value_old).collect();
            let mut d: Vec<bool> = ep.iter().map(|s| s.done).collect();
            *d.last_mut().expect("non-empty") = true;
            let out = gae(&r, &v, 0.0, &d, gamma, lambda)?;
            starts.push(steps.len());
            advantages.extend(out.advantages);
            returns.extend(out.returns);
            steps.extend(ep);
        }
        normalize_advantages(&mut advantages);
        Ok(Self {
            dims,
            steps,
            episode_starts: starts,
            advantages,
            returns,
            consumed: false,
        })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn gather(&self, idx: &[usize], f: impl Fn(&RolloutStep) -> &[f64]) -> Vec<f64> {
        idx.iter().flat_map(|&i| f(&self.steps[i]).iter().copied()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoConfig {
    pub clip: f64,
    pub entropy_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub adam: AdamConfig,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip: 0.2,
            entropy_coef: 1e-2,
            epochs: 5,
            minibatch: 256,
            adam: AdamConfig::with_lr(3e-7),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PpoReport {
    pub loss: f64,
    /// `−mean(min(ρA, clip(ρ)A))`.
    pub surrogate: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
    pub max_ratio_dev: f64,
    pub clip_fraction: f64,
}

/// Clipped surrogate minus the entropy bonus over the rows `idx`.
pub fn ppo_loss<'p>(
    net: &PolicyNet,
    g: &mut Graph<'p>,
    ps: &'p ParameterSet,
    batch: &RolloutBatch,
    idx: &[usize],
    clip: f64,
    entropy_coef: f64,
) -> Result<(Var, PpoReport)> {
    let n = idx.len();
    if n == 0 {
        return Err(Error::Usage("ppo_loss on an empty minibatch".into()));
    }
    let d = &net.dims;
    let y = g.constant_rows(n, d.k, batch.gather(idx, |s| &s.y))?;
    let z = g.constant_rows(n, d.action_dim, batch.gather(idx, |s| &s.z))?;
    let s = g.constant_rows(n, d.state_dim, batch.gather(idx, |s| &s.s))?;
    let u = g.constant_rows(n, d.action_dim, batch.gather(idx, |s| &s.pre_squash))?;
    let old = g.constant_rows(n, 1, idx.iter().map(|&i| batch.steps[i].log_prob_old).collect())?;
    let old = g.reshape(old, &[n])?;
    let adv = g.constant_rows(n, 1, idx.iter().map(|&i| batch.advantages[i]).collect())?;
    let adv = g.reshape(adv, &[n])?;

    let (mean, std) = net.dist(g, ps, y, z, s)?;
    let lp = net.log_prob_of(g, u, mean, std)?;
    let diff = g.sub(lp, old)?;
    let ratio = g.exp(diff);
    let clipped = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let unclipped_term = g.mul(ratio, adv)?;
    let clipped_term = g.mul(clipped, adv)?;
    let surr = g.minimum(unclipped_term, clipped_term)?;
    let surr = g.mean(surr);
    let surr = g.neg(surr);
    let ent = gaussian_entropy(g, std);
    let ent = g.mean(ent);
    let bonus = g.scale(ent, entropy_coef);
    let loss = g.sub(surr, bonus)?;

    let ratios = g.value(ratio);
    let report = PpoReport {
        loss: g.scalar_value(loss),
        surrogate: g.scalar_value(surr),
        entropy: g.scalar_value(ent),
        mean_ratio: ratios.iter().sum::<f64>() / n as f64,
        max_ratio_dev: ratios.iter().fold(0.0, |m, r| f64::max(m, (r - 1.0).abs())),
        clip_fraction: ratios.iter().filter(|r| (**r - 1.0).abs() > clip).count() as f64 / n as f64,
    };
    Ok((loss, report))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PpoStats {
    /// Pass over the whole batch before any update.
    pub initial: PpoReport,
    /// Minibatch reports averaged over every epoch.
    pub mean: PpoReport,
    pub epochs: usize,
    pub steps: usize,
}

/// `cfg.epochs` passes of shuffled minibatch Adam steps on the policy
/// parameters. The batch is marked consumed.
pub fn ll_update(
    net: &PolicyNet,
    ps: &mut ParameterSet,
    batch: &mut RolloutBatch,
    cfg: &PpoConfig,
    rng: &mut Rng,
) -> Result<PpoStats> {
    if batch.consumed {
        return Err(Error::Usage("rollout batch already used for a policy update".into()));
    }
    if batch.is_empty() {
        return Err(Error::Usage("empty rollout batch".into()));
    }
    if cfg.minibatch == 0 {
        return Err(Error::Config("ppo minibatch must be >= 1".into()));
    }
    batch.consumed = true;
    let all: Vec<usize> = (0..batch.len()).collect();
    let initial = {
        let mut g = Graph::new();
        ppo_loss(net, &mut g, ps, batch, &all, cfg.clip, cfg.entropy_coef)?.1
    };
    let mut stats = PpoStats {
        initial,
        ..Default::default()
    };
    let mut order = all;
    let mut sums = PpoReport::default();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch) {
            let (grads, rep) = {
                let mut g = Graph::new();
                let (loss, rep) = ppo_loss(net, &mut g, ps, batch, chunk, cfg.clip, cfg.entropy_coef)?;
                if !rep.loss.is_finite() {
                    return Err(Error::Numeric(format!("ppo loss is {}", rep.loss)));
                }
                (g.backward(loss)?, rep)
            };
            ps.accumulate(&grads)?;
            ps.adam_step(&cfg.adam)?;
            sums.loss += rep.loss;
            sums.surrogate += rep.surrogate;
            sums.entropy += rep.entropy;
            sums.mean_ratio += rep.mean_ratio;
            sums.max_ratio_dev = sums.max_ratio_dev.max(rep.max_ratio_dev);
            sums.clip_fraction += rep.clip_fraction;
            stats.steps += 1;
        }
        stats.epochs += 1;
    }
    let k = stats.steps.max(1) as f64;
    stats.mean = PpoReport {
        loss: sums.loss / k,
        surrogate: sums.surrogate / k,
        entropy: sums.entropy / k,
        mean_ratio: sums.mean_ratio / k,
        max_ratio_dev: sums.max_ratio_dev,
        clip_fraction: sums.clip_fraction / k,
    };
    Ok(stats)
}
