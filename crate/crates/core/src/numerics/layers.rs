//! Network building blocks shared by the three layers.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParameterSet, Tensor, Var};
use crate::rng::Rng;

/// Added inside the log of the tanh Jacobian so saturated samples stay finite.
pub const TANH_LOG_EPS: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Softmax,
}

pub fn activate(g: &mut Graph<'_>, x: Var, kind: Activation) -> Result<Var> {
    match kind {
        Activation::Tanh => Ok(g.tanh(x)),
        Activation::Relu => Ok(g.relu(x)),
        Activation::Softmax => g.softmax(x),
    }
}

/// Dropout is only applied when a training RNG is supplied.
pub enum Mode<'r> {
    Eval,
    Train(&'r mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train(r) => Mode::Train(r),
        }
    }
}

/// Inverted dropout with drop probability `p`.
pub fn dropout(g: &mut Graph<'_>, x: Var, p: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let Mode::Train(rng) = mode else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let n = g.value(x).len();
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = g.constant(Tensor::new(g.shape(x).to_vec(), mask)?);
    g.mul(x, m)
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Uniform(−1/√fan_in, 1/√fan_in) initialisation, scaled by `gain`.
    pub fn new(
        ps: &mut ParameterSet,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let bound = gain / (inputs.max(1) as f64).sqrt();
        let w: Vec<f64> = (0..inputs * outputs)
            .map(|_| rng.random_range(-1.0..=1.0) * bound)
            .collect();
        let b: Vec<f64> = (0..outputs).map(|_| rng.random_range(-1.0..=1.0) * bound).collect();
        let weight = ps.insert(format!("{name}.weight"), Tensor::matrix(outputs, inputs, w)?)?;
        let bias = ps.insert(format!("{name}.bias"), Tensor::vector(b))?;
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParameterSet, x: Var) -> Result<Var> {
        let w = g.param(ps, self.weight);
        let b = g.param(ps, self.bias);
        g.affine(x, w, Some(b))
    }
}

/// Multi-layer perceptron: hidden layers with a shared activation and
/// optional dropout after each hidden activation; the output layer is linear.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Linear>,
    activation: Activation,
    dropout: f64,
}

impl Mlp {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParameterSet,
        name: &str,
        inputs: usize,
        hidden: &[usize],
        outputs: usize,
        activation: Activation,
        dropout: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = inputs;
        for (i, &h) in hidden.iter().enumerate() {
            layers.push(Linear::new(ps, &format!("{name}.{i}"), fan_in, h, 1.0, rng)?);
            fan_in = h;
        }
        layers.push(Linear::new(ps, &format!("{name}.out"), fan_in, outputs, 1.0, rng)?);
        Ok(Self {
            layers,
            activation,
            dropout,
        })
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("mlp has an output layer")
    }

    pub fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        ps: &'p ParameterSet,
        x: Var,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, ps, h)?;
            if i < last {
                h = activate(g, h, self.activation)?;
                h = dropout(g, h, self.dropout, mode)?;
            }
        }
        Ok(h)
    }
}

/// Single-layer GRU cell (reset gate, update gate, candidate).
#[derive(Debug, Clone)]
pub struct GruCell {
    ir: Linear,
    iz: Linear,
    inn: Linear,
    hr: Linear,
    hz: Linear,
    hn: Linear,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(ps: &mut ParameterSet, name: &str, inputs: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        let mut lin = |n: &str, i: usize| Linear::new(ps, &format!("{name}.{n}"), i, hidden, 1.0, rng);
        Ok(Self {
            ir: lin("ir", inputs)?,
            iz: lin("iz", inputs)?,
            inn: lin("in", inputs)?,
            hr: lin("hr", hidden)?,
            hz: lin("hz", hidden)?,
            hn: lin("hn", hidden)?,
            hidden,
        })
    }

    /// `h' = (1 − u)·n + u·h` with `r = σ(·)`, `u = σ(·)`, `n = tanh(W_in x + r·(W_hn h))`.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, ps: &'p ParameterSet, x: Var, h: Var) -> Result<Var> {
        if !g.value(x).iter().chain(g.value(h)).all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite GRU input".into()));
        }
        if crate::numerics::graph_last_dim(g.shape(h)) != self.hidden {
            return Err(Error::dim("gru hidden", g.shape(h), &[self.hidden]));
        }
        let a = self.ir.forward(g, ps, x)?;
        let b = self.hr.forward(g, ps, h)?;
        let r = g.add(a, b)?;
        let r = g.sigmoid(r);
        let a = self.iz.forward(g, ps, x)?;
        let b = self.hz.forward(g, ps, h)?;
        let u = g.add(a, b)?;
        let u = g.sigmoid(u);
        let a = self.inn.forward(g, ps, x)?;
        let b = self.hn.forward(g, ps, h)?;
        let rb = g.mul(r, b)?;
        let n = g.add(a, rb)?;
        let n = g.tanh(n);
        // (1 − u)·n + u·h = n + u·(h − n)
        let diff = g.sub(h, n)?;
        let ud = g.mul(u, diff)?;
        g.add(n, ud)
    }
}

/// Bounds for a sigmoid-interpolated standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StdRange {
    lo: f64,
    hi: f64,
}

impl StdRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || lo <= 0.0 || !hi.is_finite() {
            return Err(Error::Config(format!("std range needs 0 < lo < hi, got ({lo}, {hi})")));
        }
        Ok(Self { lo, hi })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn std(&self, raw: f64) -> f64 {
        self.lo + (self.hi - self.lo) / (1.0 + (-raw).exp())
    }
}

pub struct GaussianSample {
    pub sample: Var,
    pub log_prob: Var,
    pub std: Var,
}

pub fn bounded_std(g: &mut Graph<'_>, std_raw: Var, range: StdRange) -> Var {
    let s = g.sigmoid(std_raw);
    let s = g.scale(s, range.hi - range.lo);
    g.add_scalar(s, range.lo)
}

/// Diagonal Gaussian log-density of `x`, summed over the last axis.
pub fn gaussian_log_prob(g: &mut Graph<'_>, x: Var, mean: Var, std: Var) -> Result<Var> {
    let diff = g.sub(x, mean)?;
    let z = g.div(diff, std)?;
    let z2 = g.square(z);
    let half = g.scale(z2, -0.5);
    let ls = g.ln(std);
    let per = g.sub(half, ls)?;
    let per = g.add_scalar(per, -HALF_LN_2PI);
    Ok(g.sum_last(per))
}

/// Entropy of a diagonal Gaussian, summed over the last axis.
pub fn gaussian_entropy(g: &mut Graph<'_>, std: Var) -> Var {
    let ls = g.ln(std);
    let per = g.add_scalar(ls, 0.5 + HALF_LN_2PI);
    g.sum_last(per)
}

/// Reparameterised draw `mean + std·noise` with the std bounded to `range`.
pub fn gaussian_head(
    g: &mut Graph<'_>,
    mean_raw: Var,
    std_raw: Var,
    range: StdRange,
    noise: Var,
) -> Result<GaussianSample> {
    let std = bounded_std(g, std_raw, range);
    let scaled = g.mul(std, noise)?;
    let sample = g.add(mean_raw, scaled)?;
    let log_prob = gaussian_log_prob(g, sample, mean_raw, std)?;
    Ok(GaussianSample { sample, log_prob, std })
}

/// `Σ ln(1 − tanh(s)² + ε)` over the last axis.
pub fn tanh_log_jacobian(g: &mut Graph<'_>, sample: Var) -> Var {
    let t = g.tanh(sample);
    let t2 = g.square(t);
    let one_minus = g.scale(t2, -1.0);
    let one_minus = g.add_scalar(one_minus, 1.0 + TANH_LOG_EPS);
    let l = g.ln(one_minus);
    g.sum_last(l)
}

/// Squashes a Gaussian sample into (−1, 1) and corrects its log-density.
pub fn tanh_squash(g: &mut Graph<'_>, sample: Var, log_prob: Var) -> Result<(Var, Var)> {
    let squashed = g.tanh(sample);
    let jac = tanh_log_jacobian(g, sample);
    let corrected = g.sub(log_prob, jac)?;
    Ok((squashed, corrected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gru_halves_previous_state() {
        let mut ps = ParameterSet::new();
        let cell = GruCell::new(&mut ps, "gru", 3, 2, &mut rng_for(0, &[])).unwrap();
        ps.fill(0.0);
        let mut g = Graph::new();
        let x = g.constant_vec(vec![0.3, -2.0, 5.0]);
        let h = g.constant_vec(vec![1.0, 1.0]);
        let h2 = cell.forward(&mut g, &ps, x, h).unwrap();
        assert_eq!(g.value(h2), &[0.5, 0.5]);
        let z = g.constant_vec(vec![0.0, 0.0]);
        let h3 = cell.forward(&mut g, &ps, x, z).unwrap();
        assert_eq!(g.value(h3), &[0.0, 0.0]);
    }

    #[test]
    fn gru_rejects_non_finite() {
        let mut ps = ParameterSet::new();
        let cell = GruCell::new(&mut ps, "gru", 1, 2, &mut rng_for(0, &[])).unwrap();
        let mut g = Graph::new();
        let x = g.constant_vec(vec![f64::NAN]);
        let h = g.constant_vec(vec![0.0, 0.0]);
        assert!(matches!(cell.forward(&mut g, &ps, x, h), Err(Error::Numeric(_))));
    }

    #[test]
    fn gaussian_head_cases() {
        let mut g = Graph::new();
        let mean = g.constant_vec(vec![0.7, -0.2]);
        let raw = g.constant_vec(vec![0.0, 3.0]);
        let noise = g.constant_vec(vec![0.0, 0.0]);
        let range = StdRange::new(0.5, 1.5).unwrap();
        let s = gaussian_head(&mut g, mean, raw, range, noise).unwrap();
        assert_eq!(g.value(s.sample), &[0.7, -0.2]);

        let mut g = Graph::new();
        let mean = g.constant_vec(vec![0.0]);
        let raw = g.constant_vec(vec![0.0]);
        let noise = g.constant_vec(vec![1.0]);
        let range = StdRange::new(1.0, 1.0 + 1e-12).unwrap();
        let s = gaussian_head(&mut g, mean, raw, range, noise).unwrap();
        assert_relative_eq!(g.scalar_value(s.log_prob), -0.5 - 0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-9);
        assert_relative_eq!(g.scalar_value(s.log_prob), -1.4189385, epsilon = 1e-6);
    }

    #[test]
    fn std_range_must_be_ordered() {
        assert!(matches!(StdRange::new(1.5, 0.5), Err(Error::Config(_))));
        assert!(StdRange::new(1.0, 1.0).is_err());
    }

    #[test]
    fn tanh_squash_cases() {
        let mut g = Graph::new();
        let s = g.constant_vec(vec![0.0]);
        let lp = g.constant_scalar(-1.0);
        let (sq, corr) = tanh_squash(&mut g, s, lp).unwrap();
        assert_eq!(g.value(sq), &[0.0]);
        assert_relative_eq!(g.scalar_value(corr), -1.0 - (1.0f64 + TANH_LOG_EPS).ln(), epsilon = 1e-15);

        let s = g.constant_vec(vec![2.0]);
        let (sq, _) = tanh_squash(&mut g, s, lp).unwrap();
        assert_relative_eq!(g.value(sq)[0], 0.96403, epsilon = 1e-5);
    }

    #[test]
    fn dropout_only_in_train_mode() {
        let mut g = Graph::new();
        let x = g.constant_vec(vec![1.0; 1000]);
        let y = dropout(&mut g, x, 0.7, &mut Mode::Eval).unwrap();
        assert_eq!(y, x);
        let mut rng = rng_for(3, &[]);
        let y = dropout(&mut g, x, 0.7, &mut Mode::Train(&mut rng)).unwrap();
        let kept = g.value(y).iter().filter(|&&v| v != 0.0).count();
        assert!((200..400).contains(&kept), "{kept}");
        assert!(g.value(y).iter().all(|&v| v == 0.0 || (v - 1.0 / 0.3).abs() < 1e-12));
    }
}
