//! Run configuration: `key = value` lines grouped under `[suite]`, `[model]`,
//! `[loss]` and `[train]`, with `#` comments. Absent keys take the default
//! hyperparameters; suite-dependent defaults follow the `suite` key.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::envs::{SuiteConfig, SuiteKind};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::intermediate::GoalStrategy;

/// How `y` enters the macro-action and policy layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YDownstream {
    Soft,
    OneHot,
}

/// Scale used for the sign-matching bonus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntrinsicScale {
    Shaped,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub k: usize,
    pub goal_horizon: usize,
    pub goal_strategy: GoalStrategy,
    pub std_lo: f64,
    pub std_hi: f64,
    pub reward_shape_a: f64,
    pub gru_hidden: usize,
    pub categorical_hidden: Vec<usize>,
    pub categorical_dropout: f64,
    pub value_hidden: Vec<usize>,
    pub embed_state: usize,
    pub embed_action: usize,
    pub embed_reward: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub decoder_dropout: f64,
    pub ego_embed: usize,
    pub policy_hidden: Vec<usize>,
    pub y_downstream: YDownstream,
    pub intrinsic_scale: IntrinsicScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub alpha_v: f64,
    pub alpha_ent: f64,
    pub alpha_occ: f64,
    pub beta_kl: f64,
    pub beta_t: f64,
    pub alpha_2: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub k_epochs: usize,
    pub ppo_minibatch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_hl: f64,
    pub lr_il: f64,
    pub lr_policy: f64,
    pub buffer_capacity: usize,
    pub episodes_per_task: usize,
    pub test_episodes_per_task: usize,
    pub iterations: usize,
    pub seed: u64,
    pub hl_minibatch_trajectories: usize,
    pub hl_minibatches: usize,
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
    pub exec: Exec,
    /// Test hook: name of a loss (`hl`, `il`, `ppo`) forced to NaN.
    pub fault_injection: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 10,
            goal_horizon: 5,
            goal_strategy: GoalStrategy::Cd,
            std_lo: 0.5,
            std_hi: 1.5,
            reward_shape_a: 3.0,
            gru_hidden: 256,
            categorical_hidden: vec![512, 512],
            categorical_dropout: 0.7,
            value_hidden: vec![256, 256],
            embed_state: 64,
            embed_action: 32,
            embed_reward: 16,
            encoder_hidden: vec![128, 128, 64, 32],
            decoder_hidden: vec![32, 64, 128, 128],
            decoder_dropout: 0.7,
            ego_embed: 64,
            policy_hidden: vec![256, 256],
            y_downstream: YDownstream::Soft,
            intrinsic_scale: IntrinsicScale::Shaped,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_v: 20.0,
            alpha_ent: 1.0,
            alpha_occ: 1.0,
            beta_kl: 1.0,
            beta_t: 1.0,
            alpha_2: 1e-2,
            gamma: 0.99,
            lambda: 0.9,
            clip: 0.2,
            k_epochs: 5,
            ppo_minibatch: 256,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_hl: 5e-7,
            lr_il: 5e-7,
            lr_policy: 3e-7,
            buffer_capacity: 1000,
            episodes_per_task: 5,
            test_episodes_per_task: 1,
            iterations: 100,
            seed: 0,
            hl_minibatch_trajectories: 8,
            hl_minibatches: 4,
            checkpoint_every: 50,
            output_dir: PathBuf::from("runs/default"),
            exec: Exec::default(),
            fault_injection: None,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            suite: SuiteConfig::defaults_for(SuiteKind::Nav2d),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

const SECTIONS: [&str; 4] = ["suite", "model", "loss", "train"];

/// Every key with its section, in echo order.
const KEYS: &[(&str, &str)] = &[
    ("suite", "suite"),
    ("suite", "n_train"),
    ("suite", "n_test"),
    ("suite", "horizon"),
    ("suite", "success_radius"),
    ("suite", "reward_scale"),
    ("suite", "start_jitter"),
    ("suite", "goal_radius"),
    ("suite", "linear_perturbation"),
    ("suite", "nav_dt"),
    ("suite", "nav_max_accel"),
    ("suite", "nav_damping"),
    ("suite", "nav_gain_jitter"),
    ("model", "k"),
    ("model", "goal_horizon"),
    ("model", "goal_strategy"),
    ("model", "std_lo"),
    ("model", "std_hi"),
    ("model", "reward_shape_a"),
    ("model", "gru_hidden"),
    ("model", "categorical_hidden"),
    ("model", "categorical_dropout"),
    ("model", "value_hidden"),
    ("model", "embed_state"),
    ("model", "embed_action"),
    ("model", "embed_reward"),
    ("model", "encoder_hidden"),
    ("model", "decoder_hidden"),
    ("model", "decoder_dropout"),
    ("model", "ego_embed"),
    ("model", "policy_hidden"),
    ("model", "y_downstream"),
    ("model", "intrinsic_scale"),
    ("loss", "alpha_v"),
    ("loss", "alpha_ent"),
    ("loss", "alpha_occ"),
    ("loss", "beta_kl"),
    ("loss", "beta_t"),
    ("loss", "alpha_2"),
    ("loss", "gamma"),
    ("loss", "lambda"),
    ("loss", "clip"),
    ("loss", "k_epochs"),
    ("loss", "ppo_minibatch"),
    ("train", "lr_hl"),
    ("train", "lr_il"),
    ("train", "lr_policy"),
    ("train", "buffer_capacity"),
    ("train", "episodes_per_task"),
    ("train", "test_episodes_per_task"),
    ("train", "iterations"),
    ("train", "seed"),
    ("train", "hl_minibatch_trajectories"),
    ("train", "hl_minibatches"),
    ("train", "checkpoint_every"),
    ("train", "output_dir"),
    ("train", "exec"),
    ("train", "fault_injection"),
];

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

fn key_err(key: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::ConfigKey {
        key: key.to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_num<T: FromStr>(key: &str, line: usize, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| key_err(key, line, format!("cannot parse `{v}` as {}", std::any::type_name::<T>())))
}

fn parse_list(key: &str, line: usize, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_num(key, line, p.trim())).collect()
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn unquote(raw: &str) -> (&str, bool) {
    let raw = raw.trim();
    if raw.len() >= 2 && raw.starts_with('"') && raw.ends_with('"') {
        (&raw[1..raw.len() - 1], true)
    } else {
        (raw, false)
    }
}

/// Splits `key = value # comment`, honouring `#` inside double quotes.
fn split_line(line: &str) -> Option<(&str, &str)> {
    let mut in_quotes = false;
    let mut end = line.len();
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quotes = !in_quotes,
            '#' if !in_quotes => {
                end = i;
                break;
            }
            _ => {}
        }
    }
    let body = line[..end].trim();
    if body.is_empty() {
        return None;
    }
    Some(body.split_once('=').map_or((body, ""), |(k, v)| (k.trim(), v.trim())))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Parses config text; see the module docs for the format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String, usize)> = Vec::new();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = raw.trim();
            if trimmed.starts_with('[') {
                let name = trimmed
                    .strip_prefix('[')
                    .and_then(|s| s.split('#').next())
                    .map(str::trim)
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| key_err(trimmed, line_no, "malformed section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(key_err(name, line_no, "unknown section"));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = split_line(raw) else { continue };
            if value.is_empty() && !raw.contains('=') {
                return Err(key_err(key, line_no, "expected `key = value`"));
            }
            let Some(expected) = section_of(key) else {
                return Err(key_err(key, line_no, "unknown key"));
            };
            if let Some(sec) = &section {
                if sec != expected {
                    return Err(key_err(key, line_no, format!("belongs in [{expected}], found in [{sec}]")));
                }
            }
            if entries.iter().any(|(k, _, _)| k == key) {
                return Err(key_err(key, line_no, "duplicate key"));
            }
            entries.push((key.to_string(), value.to_string(), line_no));
        }

        let mut cfg = RunConfig::default();
        if let Some((_, v, line)) = entries.iter().find(|(k, _, _)| k == "suite") {
            let kind: SuiteKind = unquote(v).0.parse().map_err(|e: Error| key_err("suite", *line, e.to_string()))?;
            cfg.suite = SuiteConfig::defaults_for(kind);
        }
        let mut lines = HashMap::new();
        for (k, v, line) in &entries {
            cfg.set(k, v, *line)?;
            lines.insert(k.clone(), *line);
        }
        cfg.validate_with(&lines)?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, raw: &str, line: usize) -> Result<()> {
        let (v, _) = unquote(raw);
        let s = &mut self.suite;
        let m = &mut self.model;
        let l = &mut self.loss;
        let t = &mut self.train;
        let f = |v: &str| parse_num::<f64>(key, line, v);
        let u = |v: &str| parse_num::<usize>(key, line, v);
        match key {
            "suite" => s.kind = v.parse().map_err(|e: Error| key_err(key, line, e.to_string()))?,
            "n_train" => s.n_train = u(v)?,
            "n_test" => s.n_test = u(v)?,
            "horizon" => s.horizon = u(v)?,
            "success_radius" => s.success_radius = f(v)?,
            "reward_scale" => s.reward_scale = f(v)?,
            "start_jitter" => s.start_jitter = f(v)?,
            "goal_radius" => s.goal_radius = f(v)?,
            "linear_perturbation" => s.linear_perturbation = f(v)?,
            "nav_dt" => s.nav_dt = f(v)?,
            "nav_max_accel" => s.nav_max_accel = f(v)?,
            "nav_damping" => s.nav_damping = f(v)?,
            "nav_gain_jitter" => s.nav_gain_jitter = f(v)?,
            "k" => m.k = u(v)?,
            "goal_horizon" => m.goal_horizon = u(v)?,
            "goal_strategy" => m.goal_strategy = v.parse().map_err(|e: Error| key_err(key, line, e.to_string()))?,
            "std_lo" => m.std_lo = f(v)?,
            "std_hi" => m.std_hi = f(v)?,
            "reward_shape_a" => m.reward_shape_a = f(v)?,
            "gru_hidden" => m.gru_hidden = u(v)?,
            "categorical_hidden" => m.categorical_hidden = parse_list(key, line, v)?,
            "categorical_dropout" => m.categorical_dropout = f(v)?,
            "value_hidden" => m.value_hidden = parse_list(key, line, v)?,
            "embed_state" => m.embed_state = u(v)?,
            "embed_action" => m.embed_action = u(v)?,
            "embed_reward" => m.embed_reward = u(v)?,
            "encoder_hidden" => m.encoder_hidden = parse_list(key, line, v)?,
            "decoder_hidden" => m.decoder_hidden = parse_list(key, line, v)?,
            "decoder_dropout" => m.decoder_dropout = f(v)?,
            "ego_embed" => m.ego_embed = u(v)?,
            "policy_hidden" => m.policy_hidden = parse_list(key, line, v)?,
            "y_downstream" => {
                m.y_downstream = match v {
                    "soft" => YDownstream::Soft,
                    "onehot" => YDownstream::OneHot,
                    _ => return Err(key_err(key, line, "expected soft or onehot")),
                }
            }
            "intrinsic_scale" => {
                m.intrinsic_scale = match v {
                    "shaped" => IntrinsicScale::Shaped,
                    "raw" => IntrinsicScale::Raw,
                    _ => return Err(key_err(key, line, "expected shaped or raw")),
                }
            }
            "alpha_v" => l.alpha_v = f(v)?,
            "alpha_ent" => l.alpha_ent = f(v)?,
            "alpha_occ" => l.alpha_occ = f(v)?,
            "beta_kl" => l.beta_kl = f(v)?,
            "beta_t" => l.beta_t = f(v)?,
            "alpha_2" => l.alpha_2 = f(v)?,
            "gamma" => l.gamma = f(v)?,
            "lambda" => l.lambda = f(v)?,
            "clip" => l.clip = f(v)?,
            "k_epochs" => l.k_epochs = u(v)?,
            "ppo_minibatch" => l.ppo_minibatch = u(v)?,
            "lr_hl" => t.lr_hl = f(v)?,
            "lr_il" => t.lr_il = f(v)?,
            "lr_policy" => t.lr_policy = f(v)?,
            "buffer_capacity" => t.buffer_capacity = u(v)?,
            "episodes_per_task" => t.episodes_per_task = u(v)?,
            "test_episodes_per_task" => t.test_episodes_per_task = u(v)?,
            "iterations" => t.iterations = u(v)?,
            "seed" => t.seed = parse_num(key, line, v)?,
            "hl_minibatch_trajectories" => t.hl_minibatch_trajectories = u(v)?,
            "hl_minibatches" => t.hl_minibatches = u(v)?,
            "checkpoint_every" => t.checkpoint_every = u(v)?,
            "output_dir" => t.output_dir = PathBuf::from(v),
            "exec" => {
                t.exec = match v {
                    "parallel" => Exec::Parallel,
                    "sequential" => Exec::Sequential,
                    _ => return Err(key_err(key, line, "expected parallel or sequential")),
                }
            }
            "fault_injection" => {
                t.fault_injection = match v {
                    "" | "none" => None,
                    "hl" | "il" | "ppo" => Some(v.to_string()),
                    _ => return Err(key_err(key, line, "expected none, hl, il or ppo")),
                }
            }
            _ => return Err(key_err(key, line, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(&HashMap::new())
    }

    fn validate_with(&self, lines: &HashMap<String, usize>) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(key_err(key, lines.get(key).copied().unwrap_or(0), msg));
        let (s, m, l, t) = (&self.suite, &self.model, &self.loss, &self.train);
        if let Err(e) = s.validate() {
            return Err(key_err("suite", lines.get("suite").copied().unwrap_or(0), e.to_string()));
        }
        if m.k < 1 {
            return fail("k", "must be >= 1");
        }
        if m.goal_horizon < 1 || m.goal_horizon > s.horizon {
            return fail("goal_horizon", "must be in [1, horizon]");
        }
        if !(m.std_lo > 0.0 && m.std_lo < m.std_hi && m.std_hi.is_finite()) {
            return fail("std_lo", "std range needs 0 < std_lo < std_hi");
        }
        if !(m.reward_shape_a > 0.0) {
            return fail("reward_shape_a", "must be > 0");
        }
        for (key, v) in [
            ("categorical_dropout", m.categorical_dropout),
            ("decoder_dropout", m.decoder_dropout),
        ] {
            if !(0.0..1.0).contains(&v) {
                return fail(key, "must be in [0, 1)");
            }
        }
        for (key, v) in [
            ("gru_hidden", m.gru_hidden),
            ("embed_state", m.embed_state),
            ("embed_action", m.embed_action),
            ("embed_reward", m.embed_reward),
            ("ego_embed", m.ego_embed),
        ] {
            if v == 0 {
                return fail(key, "must be >= 1");
            }
        }
        for (key, v) in [
            ("categorical_hidden", &m.categorical_hidden),
            ("value_hidden", &m.value_hidden),
            ("encoder_hidden", &m.encoder_hidden),
            ("decoder_hidden", &m.decoder_hidden),
            ("policy_hidden", &m.policy_hidden),
        ] {
            if v.is_empty() || v.contains(&0) {
                return fail(key, "needs at least one layer and no zero widths");
            }
        }
        for (key, v) in [("alpha_ent", l.alpha_ent), ("alpha_occ", l.alpha_occ)] {
            if !v.is_finite() {
                return fail(key, "must be finite");
            }
        }
        for (key, v) in [
            ("alpha_v", l.alpha_v),
            ("beta_kl", l.beta_kl),
            ("beta_t", l.beta_t),
            ("alpha_2", l.alpha_2),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(key, "must be a finite value >= 0");
            }
        }
        if !(l.gamma > 0.0 && l.gamma <= 1.0) {
            return fail("gamma", "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&l.lambda) {
            return fail("lambda", "must be in [0, 1]");
        }
        if !(l.clip > 0.0 && l.clip < 1.0) {
            return fail("clip", "must be in (0, 1)");
        }
        if l.k_epochs < 1 {
            return fail("k_epochs", "must be >= 1");
        }
        if l.ppo_minibatch < 1 {
            return fail("ppo_minibatch", "must be >= 1");
        }
        for (key, v) in [("lr_hl", t.lr_hl), ("lr_il", t.lr_il), ("lr_policy", t.lr_policy)] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(key, "must be > 0");
            }
        }
        for (key, v) in [
            ("buffer_capacity", t.buffer_capacity),
            ("episodes_per_task", t.episodes_per_task),
            ("test_episodes_per_task", t.test_episodes_per_task),
            ("hl_minibatch_trajectories", t.hl_minibatch_trajectories),
            ("checkpoint_every", t.checkpoint_every),
        ] {
            if v < 1 {
                return fail(key, "must be >= 1");
            }
        }
        Ok(())
    }

    /// Full config text with every key; parses back to an equal value.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key) in KEYS {
            if *section != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{section}]");
                current = section;
            }
            let _ = writeln!(out, "{key} = {}", self.value_text(key));
        }
        out
    }

    fn value_text(&self, key: &str) -> String {
        let (s, m, l, t) = (&self.suite, &self.model, &self.loss, &self.train);
        match key {
            "suite" => s.kind.to_string(),
            "n_train" => s.n_train.to_string(),
            "n_test" => s.n_test.to_string(),
            "horizon" => s.horizon.to_string(),
            "success_radius" => s.success_radius.to_string(),
            "reward_scale" => s.reward_scale.to_string(),
            "start_jitter" => s.start_jitter.to_string(),
            "goal_radius" => s.goal_radius.to_string(),
            "linear_perturbation" => s.linear_perturbation.to_string(),
            "nav_dt" => s.nav_dt.to_string(),
            "nav_max_accel" => s.nav_max_accel.to_string(),
            "nav_damping" => s.nav_damping.to_string(),
            "nav_gain_jitter" => s.nav_gain_jitter.to_string(),
            "k" => m.k.to_string(),
            "goal_horizon" => m.goal_horizon.to_string(),
            "goal_strategy" => m.goal_strategy.to_string(),
            "std_lo" => m.std_lo.to_string(),
            "std_hi" => m.std_hi.to_string(),
            "reward_shape_a" => m.reward_shape_a.to_string(),
            "gru_hidden" => m.gru_hidden.to_string(),
            "categorical_hidden" => fmt_list(&m.categorical_hidden),
            "categorical_dropout" => m.categorical_dropout.to_string(),
            "value_hidden" => fmt_list(&m.value_hidden),
            "embed_state" => m.embed_state.to_string(),
            "embed_action" => m.embed_action.to_string(),
            "embed_reward" => m.embed_reward.to_string(),
            "encoder_hidden" => fmt_list(&m.encoder_hidden),
            "decoder_hidden" => fmt_list(&m.decoder_hidden),
            "decoder_dropout" => m.decoder_dropout.to_string(),
            "ego_embed" => m.ego_embed.to_string(),
            "policy_hidden" => fmt_list(&m.policy_hidden),
            "y_downstream" => match m.y_downstream {
                YDownstream::Soft => "soft".into(),
                YDownstream::OneHot => "onehot".into(),
            },
            "intrinsic_scale" => match m.intrinsic_scale {
                IntrinsicScale::Shaped => "shaped".into(),
                IntrinsicScale::Raw => "raw".into(),
            },
            "alpha_v" => l.alpha_v.to_string(),
            "alpha_ent" => l.alpha_ent.to_string(),
            "alpha_occ" => l.alpha_occ.to_string(),
            "beta_kl" => l.beta_kl.to_string(),
            "beta_t" => l.beta_t.to_string(),
            "alpha_2" => l.alpha_2.to_string(),
            "gamma" => l.gamma.to_string(),
            "lambda" => l.lambda.to_string(),
            "clip" => l.clip.to_string(),
            "k_epochs" => l.k_epochs.to_string(),
            "ppo_minibatch" => l.ppo_minibatch.to_string(),
            "lr_hl" => t.lr_hl.to_string(),
            "lr_il" => t.lr_il.to_string(),
            "lr_policy" => t.lr_policy.to_string(),
            "buffer_capacity" => t.buffer_capacity.to_string(),
            "episodes_per_task" => t.episodes_per_task.to_string(),
            "test_episodes_per_task" => t.test_episodes_per_task.to_string(),
            "iterations" => t.iterations.to_string(),
            "seed" => t.seed.to_string(),
            "hl_minibatch_trajectories" => t.hl_minibatch_trajectories.to_string(),
            "hl_minibatches" => t.hl_minibatches.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "output_dir" => format!("\"{}\"", t.output_dir.display()),
            "exec" => match t.exec {
                Exec::Parallel => "parallel".into(),
                Exec::Sequential => "sequential".into(),
            },
            "fault_injection" => t.fault_injection.clone().unwrap_or_else(|| "none".into()),
            _ => unreachable!("key table and value_text disagree on `{key}`"),
        }
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_config_text())
    }
}

/// Parses `path` with defaults for absent keys.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    RunConfig::from_file(path)
}
