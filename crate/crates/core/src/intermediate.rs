//! Macro-action layer: a VAE whose encoder maps `(y, s)` to a tanh-Gaussian
//! macro-action `z` and whose decoder predicts the ego state at the assigned
//! goal step from `(y, z, s_ego)`.
//!
//! The latent prior is the current policy's action distribution (detached,
//! with a zero macro-action input), which keeps `z` inside the action space.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::layers::{bounded_std, gaussian_log_prob, tanh_log_jacobian};
use crate::numerics::{Activation, Graph, Linear, Mlp, Mode, ParameterSet, StdRange, Var};
use crate::rng::Rng;

/// Largest macro-action magnitude; keeps `z` strictly inside `(−1, 1)`.
pub const MACRO_BOUND: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct IlDims {
    pub k: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub ego_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub ego_embed: usize,
    pub decoder_dropout: f64,
    pub std_range: StdRange,
}

#[derive(Debug, Clone)]
pub struct IlNet {
    pub dims: IlDims,
    encoder: Mlp,
    mean_head: Linear,
    std_head: Linear,
    ego_embed: Linear,
    decoder: Mlp,
}

/// A sampled macro-action.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroAction {
    /// Squashed value, strictly inside (−1, 1).
    pub z: Vec<f64>,
    /// Pre-squash Gaussian sample.
    pub pre_squash: Vec<f64>,
    /// Log-density of `z` under the encoder, tanh-corrected.
    pub log_prob: f64,
    /// Encoder mean before squashing.
    pub mean: Vec<f64>,
}

/// Graph handles for a batch of encoder samples.
pub struct MacroVars {
    pub z: Var,
    pub pre_squash: Var,
    pub log_prob: Var,
    pub mean: Var,
    pub std: Var,
}

impl IlNet {
    pub fn new(dims: IlDims, ps: &mut ParameterSet, rng: &mut Rng) -> Result<Self> {
        let (trunk_hidden, trunk_out) = split_last(&dims.encoder_hidden)?;
        let encoder = Mlp::new(
            ps,
            "il.encoder",
            dims.k + dims.state_dim,
            trunk_hidden,
            trunk_out,
            Activation::Relu,
            0.0,
            rng,
        )?;
        let mean_head = Linear::new(ps, "il.encoder.mean", trunk_out, dims.action_dim, 0.1, rng)?;
        let std_head = Linear::new(ps, "il.encoder.std", trunk_out, dims.action_dim, 0.1, rng)?;
        let ego_embed = Linear::new(ps, "il.ego_embed", dims.ego_dim, dims.ego_embed, 1.0, rng)?;
        let decoder = Mlp::new(
            ps,
            "il.decoder",
            dims.k + dims.action_dim + dims.ego_dim + dims.ego_embed,
            &dims.decoder_hidden,
            dims.ego_dim,
            Activation::Relu,
            dims.decoder_dropout,
            rng,
        )?;
        Ok(Self {
            dims,
            encoder,
            mean_head,
            std_head,
            ego_embed,
            decoder,
        })
    }

    /// Encoder mean and bounded std for `(y, s)`.
    pub fn encoder_dist<'p>(&self, g: &mut Graph<'p>, ps: &'p ParameterSet, y: Var, s: Var) -> Result<(Var, Var)> {
        let x = g.concat(&[y, s])?;
        let h = self.encoder.forward(g, ps, x, &mut Mode::Eval)?;
        let h = g.relu(h);
        let mean = self.mean_head.forward(g, ps, h)?;
        let raw = self.std_head.forward(g, ps, h)?;
        let std = bounded_std(g, raw, self.dims.std_range);
        Ok((mean, std))
    }

    /// `z ~ tanh(N(μ(y, s), σ(y, s)))`, reparameterised with `noise`.
    pub fn encode<'p>(&self, g: &mut Graph<'p>, ps: &'p ParameterSet, y: Var, s: Var, noise: Var) -> Result<MacroVars> {
        let (mean, std) = self.encoder_dist(g, ps, y, s)?;
        let scaled = g.mul(std, noise)?;
        let pre_squash = g.add(mean, scaled)?;
        let lp = gaussian_log_prob(g, pre_squash, mean, std)?;
        let jac = tanh_log_jacobian(g, pre_squash);
        let log_prob = g.sub(lp, jac)?;
        let z = g.tanh(pre_squash);
        let z = g.clamp(z, -MACRO_BOUND, MACRO_BOUND);
        Ok(MacroVars {
            z,
            pre_squash,
            log_prob,
            mean,
            std,
        })
    }

    /// Predicted ego state at the goal step.
    pub fn decode<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParameterSet,
        y: Var,
        z: Var,
        s_ego: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let e = self.ego_embed.forward(g, ps, s_ego)?;
        let e = g.tanh(e);
        let x = g.concat(&[y, z, s_ego, e])?;
        self.decoder.forward(g, ps, x, mode)
    }

    pub fn encode_macro(&self, ps: &ParameterSet, y: &[f64], s: &[f64], noise: &[f64]) -> Result<MacroAction> {
        let mut g = Graph::new();
        let yv = g.constant_vec(y.to_vec());
        let sv = g.constant_vec(s.to_vec());
        let nv = g.constant_vec(noise.to_vec());
        let m = self.encode(&mut g, ps, yv, sv, nv)?;
        Ok(MacroAction {
            z: g.value(m.z).to_vec(),
            pre_squash: g.value(m.pre_squash).to_vec(),
            log_prob: g.scalar_value(m.log_prob),
            mean: g.value(m.mean).to_vec(),
        })
    }

    /// `tanh(μ(y, s))`: the deterministic macro-action.
    pub fn mean_macro(&self, ps: &ParameterSet, y: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let yv = g.constant_vec(y.to_vec());
        let sv = g.constant_vec(s.to_vec());
        let (mean, _) = self.encoder_dist(&mut g, ps, yv, sv)?;
        Ok(g.value(mean).iter().map(|m| m.tanh().clamp(-MACRO_BOUND, MACRO_BOUND)).collect())
    }

    pub fn decode_transition(
        &self,
        ps: &ParameterSet,
        y: &[f64],
        z: &[f64],
        s_ego: &[f64],
        mode: &mut Mode<'_>,
    ) -> Result<Vec<f64>> {
        if s_ego.len() != self.dims.ego_dim {
            return Err(Error::dim("decode_transition", &[s_ego.len()], &[self.dims.ego_dim]));
        }
        let mut g = Graph::new();
        let yv = g.constant_vec(y.to_vec());
        let zv = g.constant_vec(z.to_vec());
        let sv = g.constant_vec(s_ego.to_vec());
        let p = self.decode(&mut g, ps, yv, zv, sv, mode)?;
        Ok(g.value(p).to_vec())
    }
}

fn split_last(hidden: &[usize]) -> Result<(&[usize], usize)> {
    match hidden.split_last() {
        Some((&last, rest)) => Ok((rest, last)),
        None => Err(Error::Config("encoder needs at least one hidden layer".into())),
    }
}

/// Single-sample `ln ψ_z(z) − ln p(z)`.
pub fn il_kl_loss(macro_log_prob: f64, action_prior_logdensity: f64) -> f64 {
    macro_log_prob - action_prior_logdensity
}

/// Unit-variance Gaussian negative log-likelihood without the constant:
/// `0.5·‖pred − target‖²`.
pub fn il_transition_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::dim("il_transition_loss", &[pred.len()], &[target.len()]));
    }
    Ok(0.5 * pred.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IlLossWeights {
    pub kl: f64,
    pub transition: f64,
}

impl Default for IlLossWeights {
    fn default() -> Self {
        Self { kl: 1.0, transition: 1.0 }
    }
}

pub fn combine_il_terms(w: &IlLossWeights, kl: f64, transition: f64) -> f64 {
    w.kl * kl + w.transition * transition
}

/// How goal states are chosen along an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalStrategy {
    /// Constant discretisation: segments of length `M` share the goal at the
    /// segment end.
    Cd,
    /// Constant margin: the goal is always `M` steps ahead.
    Cm,
    /// Sub-task adaptive: the goal is the next step where `argmax y` changes.
    St,
}

impl FromStr for GoalStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cd" => Ok(Self::Cd),
            "cm" => Ok(Self::Cm),
            "st" => Ok(Self::St),
            other => Err(Error::Config(format!("unknown goal strategy `{other}` (cd, cm, st)"))),
        }
    }
}

impl fmt::Display for GoalStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cd => "cd",
            Self::Cm => "cm",
            Self::St => "st",
        })
    }
}

/// Goal step for every step `t` of an episode of length `T`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalAssignment {
    pub strategy: GoalStrategy,
    pub m: usize,
    /// `goals[t]` indexes the episode's state list (`0..=T`).
    pub goals: Vec<Option<usize>>,
}

impl GoalAssignment {
    /// Distinct goal indices, ascending.
    pub fn goal_indices(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.goals.iter().flatten().copied().collect();
        v.dedup();
        v
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Assigns a goal step `t < goal ≤ T` to every `t` in `0..T`.
///
/// `labels` holds one representation per step and is only read by
/// [`GoalStrategy::St`].
pub fn assign_goals(labels: Option<&[Vec<f64>]>, strategy: GoalStrategy, m: usize, horizon: usize) -> Result<GoalAssignment> {
    if m < 1 {
        return Err(Error::Config("goal horizon M must be >= 1".into()));
    }
    if m > horizon {
        return Err(Error::Config(format!("goal horizon M = {m} exceeds episode length {horizon}")));
    }
    let goals = match strategy {
        GoalStrategy::Cd => (0..horizon).map(|t| Some(((t / m + 1) * m).min(horizon))).collect(),
        GoalStrategy::Cm => (0..horizon).map(|t| Some((t + m).min(horizon))).collect(),
        GoalStrategy::St => {
            let ys = labels.ok_or_else(|| Error::Usage("ST goals need representations".into()))?;
            if ys.len() < horizon {
                return Err(Error::dim("assign_goals", &[ys.len()], &[horizon]));
            }
            let lab: Vec<usize> = ys[..horizon].iter().map(|y| argmax(y)).collect();
            let changes: Vec<usize> = (1..horizon).filter(|&i| lab[i] != lab[i - 1]).collect();
            (0..horizon)
                .map(|t| Some(changes.iter().copied().find(|&c| c > t).unwrap_or(horizon)))
                .collect()
        }
    };
    Ok(GoalAssignment { strategy, m, goals })
}

/// Flattened rows of `(y, s, s_ego, target ego, prior)` for the layer loss.
#[derive(Debug, Clone, Default)]
pub struct IlBatch {
    pub rows: usize,
    pub y: Vec<f64>,
    pub s: Vec<f64>,
    pub s_ego: Vec<f64>,
    pub target_ego: Vec<f64>,
    /// Pre-squash mean and std of the detached policy prior.
    pub prior_mean: Vec<f64>,
    pub prior_std: Vec<f64>,
    /// Standard-normal draws for the encoder.
    pub noise: Vec<f64>,
    /// Steps dropped because no goal was assigned.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IlLossReport {
    pub total: f64,
    pub kl: f64,
    pub transition: f64,
    pub skipped: usize,
}

/// Mean over rows of `β_KL·(ln ψ_z(z) − ln p(z)) + β_T·0.5‖ŝ − s_goal‖²`.
///
/// The prior density is evaluated at the encoder's own sample with the
/// policy's mean and std held constant, so gradients reach only `ψ`.
pub fn il_loss<'p>(
    net: &IlNet,
    g: &mut Graph<'p>,
    ps: &'p ParameterSet,
    batch: &IlBatch,
    weights: &IlLossWeights,
    mode: &mut Mode<'_>,
) -> Result<(Var, IlLossReport)> {
    let n = batch.rows;
    if n == 0 {
        return Err(Error::Usage("il_loss on an empty batch".into()));
    }
    let d = &net.dims;
    let y = g.constant_rows(n, d.k, batch.y.clone())?;
    let s = g.constant_rows(n, d.state_dim, batch.s.clone())?;
    let ego = g.constant_rows(n, d.ego_dim, batch.s_ego.clone())?;
    let target = g.constant_rows(n, d.ego_dim, batch.target_ego.clone())?;
    let noise = g.constant_rows(n, d.action_dim, batch.noise.clone())?;
    let pm = g.constant_rows(n, d.action_dim, batch.prior_mean.clone())?;
    let psd = g.constant_rows(n, d.action_dim, batch.prior_std.clone())?;

    let m = net.encode(g, ps, y, s, noise)?;
    let prior_lp = gaussian_log_prob(g, m.pre_squash, pm, psd)?;
    let jac = tanh_log_jacobian(g, m.pre_squash);
    let prior_lp = g.sub(prior_lp, jac)?;
    let kl = g.sub(m.log_prob, prior_lp)?;

    let pred = net.decode(g, ps, y, m.z, ego, mode)?;
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    let trans = g.sum_last(sq);
    let trans = g.scale(trans, 0.5);

    let kl_mean = g.value(kl).iter().sum::<f64>() / n as f64;
    let trans_mean = g.value(trans).iter().sum::<f64>() / n as f64;
    let wk = g.scale(kl, weights.kl);
    let wt = g.scale(trans, weights.transition);
    let per = g.add(wk, wt)?;
    let loss = g.mean(per);
    Ok((
        loss,
        IlLossReport {
            total: g.scalar_value(loss),
            kl: kl_mean,
            transition: trans_mean,
            skipped: batch.skipped,
        },
    ))
}

/// Transition loss alone with `z` at the encoder mean and dropout off.
pub fn eval_transition_loss(net: &IlNet, ps: &ParameterSet, batch: &IlBatch) -> Result<f64> {
    let n = batch.rows;
    if n == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    let d = &net.dims;
    let mut g = Graph::new();
    let y = g.constant_rows(n, d.k, batch.y.clone())?;
    let s = g.constant_rows(n, d.state_dim, batch.s.clone())?;
    let ego = g.constant_rows(n, d.ego_dim, batch.s_ego.clone())?;
    let target = g.constant_rows(n, d.ego_dim, batch.target_ego.clone())?;
    let (mean, _) = net.encoder_dist(&mut g, ps, y, s)?;
    let z = g.tanh(mean);
    let pred = net.decode(&mut g, ps, y, z, ego, &mut Mode::Eval)?;
    let diff = g.sub(pred, target)?;
    let sq = g.square(diff);
    let per = g.sum_last(sq);
    let m = g.mean(per);
    Ok(0.5 * g.scalar_value(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::AdamConfig;
    use crate::rng::{rng_for, standard_normal_vec};

    fn small(ps: &mut ParameterSet, seed: u64) -> IlNet {
        let dims = IlDims {
            k: 2,
            state_dim: 3,
            action_dim: 2,
            ego_dim: 2,
            encoder_hidden: vec![6, 4],
            decoder_hidden: vec![6],
            ego_embed: 3,
            decoder_dropout: 0.5,
            std_range: StdRange::new(0.5, 1.5).unwrap(),
        };
        IlNet::new(dims, ps, &mut rng_for(seed, &[])).unwrap()
    }

    fn batch(net: &IlNet, ps: &ParameterSet, rows: usize, seed: u64) -> IlBatch {
        let mut rng = rng_for(seed, &[9]);
        let mut b = IlBatch {
            rows,
            ..IlBatch::default()
        };
        for _ in 0..rows {
            let s = standard_normal_vec(&mut rng, 3);
            let y = vec![0.5, 0.5];
            let mut g = Graph::new();
            let yv = g.constant_vec(y.clone());
            let sv = g.constant_vec(s.clone());
            let (m, sd) = net.encoder_dist(&mut g, ps, yv, sv).unwrap();
            b.prior_mean.extend_from_slice(g.value(m));
            b.prior_std.extend_from_slice(g.value(sd));
            b.y.extend(y);
            b.s_ego.extend_from_slice(&s[..2]);
            b.target_ego.extend(s[..2].iter().map(|x| x + 0.3 * s[2]));
            b.s.extend(s);
            b.noise.extend(standard_normal_vec(&mut rng, 2));
        }
        b
    }

    #[test]
    fn goal_assignment_cases() {
        let cd = assign_goals(None, GoalStrategy::Cd, 5, 15).unwrap();
        assert_eq!(cd.goal_indices(), vec![5, 10, 15]);
        assert_eq!(cd.goals[7], Some(10));
        let cm = assign_goals(None, GoalStrategy::Cm, 5, 14).unwrap();
        assert_eq!(cm.goals[2], Some(7));
        assert_eq!(cm.goals[12], Some(14));
        let lab = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            v
        };
        let ys = vec![lab(0), lab(0), lab(1), lab(1), lab(2)];
        let st = assign_goals(Some(&ys), GoalStrategy::St, 1, 5).unwrap();
        assert_eq!(st.goals[0], Some(2));
        assert!(st.goal_indices().contains(&2) && st.goal_indices().contains(&4));
    }

    #[test]
    fn goal_assignment_errors() {
        assert!(matches!(assign_goals(None, GoalStrategy::Cd, 6, 5), Err(Error::Config(_))));
        assert!(matches!(assign_goals(None, GoalStrategy::Cm, 0, 5), Err(Error::Config(_))));
        assert!(matches!(assign_goals(None, GoalStrategy::St, 2, 5), Err(Error::Usage(_))));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [GoalStrategy::Cd, GoalStrategy::Cm, GoalStrategy::St] {
            assert_eq!(s.to_string().parse::<GoalStrategy>().unwrap(), s);
        }
        assert!("xx".parse::<GoalStrategy>().is_err());
    }

    #[test]
    fn scalar_losses() {
        assert_eq!(il_transition_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(il_transition_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(il_transition_loss(&[1.0], &[0.0, 0.0]).is_err());
        assert_eq!(il_kl_loss(-1.0, -1.0), 0.0);
        let w = IlLossWeights::default();
        assert_eq!(combine_il_terms(&w, 0.0, 0.0), 0.0);
        assert!((combine_il_terms(&w, 0.3, 0.7) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kl_vanishes_when_prior_matches_encoder() {
        let mut ps = ParameterSet::new();
        let net = small(&mut ps, 4);
        let b = batch(&net, &ps, 10_000, 1);
        let mut g = Graph::new();
        let (_, report) = il_loss(&net, &mut g, &ps, &b, &IlLossWeights::default(), &mut Mode::Eval).unwrap();
        assert!(report.kl.abs() < 0.02);
    }

    #[test]
    fn macro_actions_stay_inside_the_open_box() {
        let mut ps = ParameterSet::new();
        let net = small(&mut ps, 5);
        for p in ps.iter().map(|(n, _)| n.to_string()).collect::<Vec<_>>() {
            let id = ps.find(&p).unwrap();
            ps.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= 50.0);
        }
        let m = net.encode_macro(&ps, &[1.0, 0.0], &[3.0, -3.0, 3.0], &[4.0, -4.0]).unwrap();
        assert!(m.z.iter().all(|z| z.abs() < 1.0));
    }

    #[test]
    fn transition_loss_decreases_on_a_fixed_batch() {
        let mut ps = ParameterSet::new();
        let net = small(&mut ps, 2);
        let b = batch(&net, &ps, 64, 3);
        let w = IlLossWeights {
            kl: 0.0,
            transition: 1.0,
        };
        let adam = AdamConfig::with_lr(1e-3);
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let grads = {
                let mut g = Graph::new();
                let (loss, report) = il_loss(&net, &mut g, &ps, &b, &w, &mut Mode::Eval).unwrap();
                assert!(report.transition < last);
                last = report.transition;
                g.backward(loss).unwrap()
            };
            ps.zero_grads();
            ps.accumulate(&grads).unwrap();
            ps.adam_step(&adam).unwrap();
        }
    }
}
