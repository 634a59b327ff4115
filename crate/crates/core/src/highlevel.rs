//! Task-representation layer: a GRU over the transition stream feeding a
//! categorical head `y` and a value head `V(y, s)`.
//!
//! The representation is trained only through its own objective: a
//! Monte-Carlo value regression plus the entropy and occupancy terms, mixed
//! with the configured loss scalars.

use crate::error::{Error, Result};
use crate::numerics::{Activation, Graph, GruCell, Linear, Mlp, Mode, ParameterSet, Tensor, Var};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct HlDims {
    pub state_dim: usize,
    pub action_dim: usize,
    /// Task inference dimension `K`.
    pub k: usize,
    pub hidden: usize,
    pub categorical_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub embed_state: usize,
    pub embed_action: usize,
    pub embed_reward: usize,
    pub categorical_dropout: f64,
    /// Fixed multiplier on the value head output.
    pub value_scale: f64,
}

/// Architecture of the layer; parameters live in a separate [`ParameterSet`].
#[derive(Debug, Clone)]
pub struct HlNet {
    pub dims: HlDims,
    embed_s: Linear,
    embed_a: Linear,
    embed_r: Linear,
    gru: GruCell,
    categorical: Mlp,
    value: Mlp,
}

/// Categorical task belief and the recurrent state that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub y: Vec<f64>,
    pub h: Vec<f64>,
}

/// One transition `(s, a, r, s')` as seen by the encoder.
#[derive(Debug, Clone, Copy)]
pub struct Mdp<'a> {
    pub s: &'a [f64],
    pub a: &'a [f64],
    pub r: f64,
    pub s_next: &'a [f64],
}

/// Weights of the value, entropy and occupancy terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HlLossWeights {
    pub value: f64,
    pub entropy: f64,
    pub occupancy: f64,
}

impl Default for HlLossWeights {
    fn default() -> Self {
        Self {
            value: 20.0,
            entropy: 1.0,
            occupancy: 1.0,
        }
    }
}

impl HlNet {
    pub fn new(dims: HlDims, ps: &mut ParameterSet, rng: &mut Rng) -> Result<Self> {
        if dims.k < 1 {
            return Err(Error::Config("task inference dimension K must be >= 1".into()));
        }
        if !(dims.value_scale > 0.0 && dims.value_scale.is_finite()) {
            return Err(Error::Config("value_scale must be finite and > 0".into()));
        }
        let embed_s = Linear::new(ps, "hl.embed_state", dims.state_dim, dims.embed_state, 1.0, rng)?;
        let embed_a = Linear::new(ps, "hl.embed_action", dims.action_dim, dims.embed_action, 1.0, rng)?;
        let embed_r = Linear::new(ps, "hl.embed_reward", 1, dims.embed_reward, 1.0, rng)?;
        let gru_in = dims.embed_state + dims.embed_action + dims.embed_reward;
        let gru = GruCell::new(ps, "hl.gru", gru_in, dims.hidden, rng)?;
        let categorical = Mlp::new(
            ps,
            "hl.categorical",
            dims.hidden,
            &dims.categorical_hidden,
            dims.k,
            Activation::Relu,
            dims.categorical_dropout,
            rng,
        )?;
        let value = Mlp::new(
            ps,
            "hl.value",
            dims.k + dims.state_dim + 1,
            &dims.value_hidden,
            1,
            Activation::Tanh,
            0.0,
            rng,
        )?;
        Ok(Self {
            dims,
            embed_s,
            embed_a,
            embed_r,
            gru,
            categorical,
            value,
        })
    }

    /// Advances the recurrent state with one transition. `s_next`, `a` and `r`
    /// are embedded separately (tanh) and concatenated; `s_next` is the state
    /// at which the reward was observed.
    pub fn advance<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParameterSet,
        s_next: Var,
        a: Var,
        r: Var,
        h_prev: Var,
    ) -> Result<Var> {
        let es = self.embed_s.forward(g, ps, s_next)?;
        let es = g.tanh(es);
        let ea = self.embed_a.forward(g, ps, a)?;
        let ea = g.tanh(ea);
        let er = self.embed_r.forward(g, ps, r)?;
        let er = g.tanh(er);
        let x = g.concat(&[es, ea, er])?;
        self.gru.forward(g, ps, x, h_prev)
    }

    /// Categorical logits from a hidden state.
    pub fn logits<'p>(&self, g: &mut Graph<'p>, ps: &'p ParameterSet, h: Var, mode: &mut Mode<'_>) -> Result<Var> {
        self.categorical.forward(g, ps, h, mode)
    }

    /// `V(y, s, t/T)`; returns shape `[]` for a single sample or `[rows]`.
    pub fn value<'p>(&self, g: &mut Graph<'p>, ps: &'p ParameterSet, y: Var, s: Var, phase: Var) -> Result<Var> {
        let x = g.concat(&[y, s, phase])?;
        let v = self.value.forward(g, ps, x, &mut Mode::Eval)?;
        let v = g.scale(v, self.dims.value_scale);
        let shape = g.shape(v).to_vec();
        if shape.len() == 1 {
            g.reshape(v, &[])
        } else {
            g.reshape(v, &[shape[0]])
        }
    }

    /// Representation before any transition has been observed.
    pub fn initial(&self, ps: &ParameterSet) -> Result<Representation> {
        let mut g = Graph::new();
        let h = g.constant_vec(vec![0.0; self.dims.hidden]);
        let logits = self.logits(&mut g, ps, h, &mut Mode::Eval)?;
        let y = g.softmax(logits)?;
        Ok(Representation {
            y: g.value(y).to_vec(),
            h: vec![0.0; self.dims.hidden],
        })
    }

    /// Processes one transition from `h_prev`; the episode starts from a zero
    /// hidden state.
    pub fn forward(&self, ps: &ParameterSet, mdp: Mdp<'_>, h_prev: &[f64], mode: &mut Mode<'_>) -> Result<Representation> {
        let mut g = Graph::new();
        let sn = g.constant_vec(mdp.s_next.to_vec());
        let a = g.constant_vec(mdp.a.to_vec());
        let r = g.constant_vec(vec![mdp.r]);
        let h0 = g.constant_vec(h_prev.to_vec());
        let h = self.advance(&mut g, ps, sn, a, r, h0)?;
        let logits = self.logits(&mut g, ps, h, mode)?;
        let y = g.softmax(logits)?;
        Ok(Representation {
            y: g.value(y).to_vec(),
            h: g.value(h).to_vec(),
        })
    }

    /// Dropout-free representations `y_0 … y_{steps−1}` for every row of
    /// `batch`, time-major `[steps][batch × k]`.
    pub fn representations(&self, ps: &ParameterSet, batch: &HlBatch) -> Result<Vec<Vec<f64>>> {
        let b = batch.batch;
        let mut g = Graph::new();
        let mut h = g.constant_rows(b, self.dims.hidden, vec![0.0; b * self.dims.hidden])?;
        let mut out = Vec::with_capacity(batch.steps);
        for t in 0..batch.steps {
            let logits = self.logits(&mut g, ps, h, &mut Mode::Eval)?;
            let y = g.softmax(logits)?;
            out.push(g.value(y).to_vec());
            if t + 1 < batch.steps {
                let sn = g.constant_rows(b, batch.state_dim, batch.states[t + 1].clone())?;
                let a = g.constant_rows(b, batch.action_dim, batch.actions[t].clone())?;
                let r = g.constant_rows(b, 1, batch.rewards[t].clone())?;
                h = self.advance(&mut g, ps, sn, a, r, h)?;
            }
        }
        Ok(out)
    }

    /// Value at episode phase `t/T`.
    pub fn value_estimate(&self, ps: &ParameterSet, y: &[f64], s: &[f64], phase: f64) -> Result<f64> {
        let mut g = Graph::new();
        let yv = g.constant_vec(y.to_vec());
        let sv = g.constant_vec(s.to_vec());
        let pv = g.constant_vec(vec![phase]);
        let v = self.value(&mut g, ps, yv, sv, pv)?;
        Ok(g.scalar_value(v))
    }
}

/// `(estimate − target)²`.
pub fn value_loss(estimate: f64, target: f64) -> f64 {
    (estimate - target).powi(2)
}

/// `Σ_k y_k·ln(prior_k / y_k)` with `0·ln(0/·) = 0`.
pub fn entropy_regularizer(y: &[f64], prior: &[f64]) -> Result<f64> {
    if y.len() != prior.len() {
        return Err(Error::dim("entropy_regularizer", &[y.len()], &[prior.len()]));
    }
    Ok(y.iter()
        .zip(prior)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (q / p).ln())
        .sum())
}

/// Weights `e = [e^{−K+1}, …, e^{−1}, e^0]`.
pub fn occupancy_weights(k: usize) -> Vec<f64> {
    (0..k).map(|i| (i as f64 - (k as f64 - 1.0)).exp()).collect()
}

/// `−(eᵀy)·ln K`.
pub fn occupancy_loss(y: &[f64], k: usize) -> Result<f64> {
    if y.len() != k {
        return Err(Error::dim("occupancy_loss", &[y.len()], &[k]));
    }
    let ey: f64 = occupancy_weights(k).iter().zip(y).map(|(e, p)| e * p).sum();
    Ok(-ey * (k as f64).ln())
}

/// Weighted combination of the three per-step terms.
pub fn combine_hl_terms(w: &HlLossWeights, value: f64, entropy: f64, occupancy: f64) -> f64 {
    w.value * value + w.entropy * entropy + w.occupancy * occupancy
}

/// Equal-length sequences, one per trajectory, laid out time-major.
#[derive(Debug, Clone)]
pub struct HlBatch {
    pub batch: usize,
    pub steps: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// `steps + 1` entries of `[batch × state_dim]`.
    pub states: Vec<Vec<f64>>,
    /// `steps` entries of `[batch × action_dim]`.
    pub actions: Vec<Vec<f64>>,
    /// `steps` entries of `[batch]`: reward fed to the encoder.
    pub rewards: Vec<Vec<f64>>,
    /// `steps` entries of `[batch]`: Monte-Carlo return targets.
    pub targets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct HlLossReport {
    pub total: f64,
    pub value: f64,
    pub entropy: f64,
    pub occupancy: f64,
}

/// Builds the mean layer loss over every step of `batch` on `g`.
///
/// Returns the loss node and the per-term means.
pub fn hl_loss<'p>(
    net: &HlNet,
    g: &mut Graph<'p>,
    ps: &'p ParameterSet,
    batch: &HlBatch,
    weights: &HlLossWeights,
    mode: &mut Mode<'_>,
) -> Result<(Var, HlLossReport)> {
    if batch.batch == 0 || batch.steps == 0 {
        return Err(Error::Usage("hl_loss on an empty batch".into()));
    }
    let (b, k) = (batch.batch, net.dims.k);
    let prior = (1.0 / k as f64).ln();
    let log_prior = g.constant_rows(b, k, vec![prior; b * k])?;
    let e = occupancy_weights(k);
    let e_rows = g.constant_rows(b, k, e.iter().copied().cycle().take(b * k).collect())?;
    let mut h = g.constant_rows(b, net.dims.hidden, vec![0.0; b * net.dims.hidden])?;
    let mut terms: Vec<Var> = Vec::with_capacity(batch.steps);
    let mut parts = [0.0f64; 3];
    for t in 0..batch.steps {
        let logits = net.logits(g, ps, h, mode)?;
        let y = g.softmax(logits)?;
        let log_y = g.log_softmax(logits)?;
        let s = g.constant_rows(b, batch.state_dim, batch.states[t].clone())?;
        let phase = g.constant_rows(b, 1, vec![t as f64 / batch.steps as f64; b])?;
        let v = net.value(g, ps, y, s, phase)?;
        let target = g.constant(Tensor::vector(batch.targets[t].clone()));
        let diff = g.sub(v, target)?;
        let lv = g.square(diff);

        let ratio = g.sub(log_prior, log_y)?;
        let ent = g.mul(y, ratio)?;
        let lent = g.sum_last(ent);

        let ey = g.mul(y, e_rows)?;
        let ey = g.sum_last(ey);
        let locc = g.scale(ey, -(k as f64).ln());

        for (acc, var) in parts.iter_mut().zip([lv, lent, locc]) {
            *acc += g.value(var).iter().sum::<f64>();
        }
        let wv = g.scale(lv, weights.value);
        let we = g.scale(lent, weights.entropy);
        let wo = g.scale(locc, weights.occupancy);
        let step = g.add(wv, we)?;
        let step = g.add(step, wo)?;
        terms.push(g.sum(step));

        if t + 1 < batch.steps {
            let sn = g.constant_rows(b, batch.state_dim, batch.states[t + 1].clone())?;
            let a = g.constant_rows(b, batch.action_dim, batch.actions[t].clone())?;
            let r = g.constant_rows(b, 1, batch.rewards[t].clone())?;
            h = net.advance(g, ps, sn, a, r, h)?;
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    let n = (b * batch.steps) as f64;
    let loss = g.scale(total, 1.0 / n);
    let report = HlLossReport {
        total: g.scalar_value(loss),
        value: parts[0] / n,
        entropy: parts[1] / n,
        occupancy: parts[2] / n,
    };
    Ok((loss, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn small() -> HlDims {
        HlDims {
            state_dim: 2,
            action_dim: 2,
            k: 3,
            hidden: 4,
            categorical_hidden: vec![5],
            value_hidden: vec![4],
            embed_state: 3,
            embed_action: 2,
            embed_reward: 2,
            categorical_dropout: 0.5,
            value_scale: 1.0,
        }
    }

    #[test]
    fn loss_hand_values() {
        let e = entropy_regularizer(&[1.0, 0.0, 0.0, 0.0], &[0.25; 4]).unwrap();
        assert!((e + 1.38629).abs() < 1e-5);
        assert!((e + 4.0f64.ln()).abs() < 1e-12);
        assert!((occupancy_loss(&[0.0, 0.0, 1.0], 3).unwrap() + 1.09861).abs() < 1e-5);
        assert!((occupancy_loss(&[1.0, 0.0, 0.0], 3).unwrap() + 0.14869).abs() < 1e-5);
        assert_eq!(value_loss(2.0, 5.0), 9.0);
        assert_eq!(entropy_regularizer(&[0.25; 4], &[0.25; 4]).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(entropy_regularizer(&[1.0], &[0.5, 0.5]).is_err());
        assert!(occupancy_loss(&[1.0, 0.0], 3).is_err());
    }

    #[test]
    fn zero_parameters_give_uniform_belief() {
        let mut ps = ParameterSet::new();
        let net = HlNet::new(small(), &mut ps, &mut rng_for(0, &[])).unwrap();
        ps.fill(0.0);
        let rep = net
            .forward(
                &ps,
                Mdp {
                    s: &[0.0, 0.0],
                    a: &[0.3, -0.2],
                    r: 0.7,
                    s_next: &[0.3, -0.2],
                },
                &[0.0; 4],
                &mut Mode::Eval,
            )
            .unwrap();
        for &p in &rep.y {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn belief_is_a_distribution() {
        let mut ps = ParameterSet::new();
        let net = HlNet::new(small(), &mut ps, &mut rng_for(3, &[])).unwrap();
        let mut h = vec![0.0; 4];
        for t in 0..5 {
            let x = [t as f64 * 0.1, -0.2];
            let rep = net
                .forward(
                    &ps,
                    Mdp {
                        s: &x,
                        a: &[0.5, 0.5],
                        r: 1.0,
                        s_next: &x,
                    },
                    &h,
                    &mut Mode::Eval,
                )
                .unwrap();
            assert!(rep.y.iter().all(|&p| p >= 0.0));
            assert!((rep.y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            h = rep.h;
        }
    }

    #[test]
    fn loss_touches_only_its_own_parameters() {
        let mut ps = ParameterSet::new();
        let net = HlNet::new(small(), &mut ps, &mut rng_for(1, &[])).unwrap();
        let other = ParameterSet::new();
        let batch = HlBatch {
            batch: 2,
            steps: 3,
            state_dim: 2,
            action_dim: 2,
            states: vec![vec![0.0, 0.0, 0.1, 0.1], vec![0.2, 0.0, 0.1, 0.3], vec![0.4, 0.1, 0.0, 0.5], vec![0.5, 0.1, 0.0, 0.6]],
            actions: vec![vec![0.2, 0.0, 0.0, 0.2]; 3],
            rewards: vec![vec![0.5, 0.4]; 3],
            targets: vec![vec![1.2, 1.0], vec![0.8, 0.6], vec![0.4, 0.3]],
        };
        let mut g = Graph::new();
        let (loss, report) = hl_loss(&net, &mut g, &ps, &batch, &HlLossWeights::default(), &mut Mode::Eval).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.touches(ps.id()));
        assert!(!grads.touches(other.id()));
        let w = HlLossWeights::default();
        let combined = combine_hl_terms(&w, report.value, report.entropy, report.occupancy);
        assert!((combined - report.total).abs() < 1e-9);
    }
}
