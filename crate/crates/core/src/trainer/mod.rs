//! Training loop: on-policy collection, the refreshing trajectory buffer,
//! replayed updates of the representation and macro-action layers, and PPO
//! on the fresh batch.

mod buffer;
pub mod checkpoint;
mod rollout;

pub use buffer::ReplayBuffer;
pub use rollout::{
    collect, mean_std, read_trajectories, run_episode, write_trajectories, RolloutMode, SplitStats, StepRecord,
    Trajectory,
};

use crate::config::RunConfig;
use crate::envs::{ego_extract, make_suite, EgoMask, TaskSpec};
use crate::error::{Error, Result};
use crate::highlevel::{hl_loss, HlBatch, HlDims, HlLossReport, HlLossWeights, HlNet};
use crate::intermediate::{assign_goals, il_loss, IlBatch, IlDims, IlLossReport, IlLossWeights, IlNet};
use crate::lowlevel::{ll_update, PolicyDims, PolicyNet, PpoConfig, PpoStats, RolloutBatch, RolloutStep};
use crate::numerics::{AdamConfig, Graph, Mode, ParameterSet, StdRange};
use crate::oracle::mc_return;
use crate::rng::{rng_for, standard_normal_vec, stream};
use rollout::downstream_y;

/// The three layers and their disjoint parameter sets.
#[derive(Debug, Clone)]
pub struct Model {
    pub hl: HlNet,
    pub il: IlNet,
    pub pi: PolicyNet,
    /// Encoder, categorical head and value head.
    pub hl_params: ParameterSet,
    pub il_params: ParameterSet,
    pub pi_params: ParameterSet,
}

/// `Σ_{k<T} γᵏ`: the largest discounted return of unit rewards.
pub fn discounted_horizon(gamma: f64, horizon: usize) -> f64 {
    (0..horizon).fold((0.0, 1.0), |(acc, p), _| (acc + p, p * gamma)).0
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let m = &cfg.model;
        let (sd, ad) = (cfg.suite.state_dim(), cfg.suite.action_dim());
        let std_range = StdRange::new(m.std_lo, m.std_hi)?;
        let mut rng = rng_for(cfg.train.seed, &[stream::INIT]);
        let mut hl_params = ParameterSet::new();
        let hl = HlNet::new(
            HlDims {
                state_dim: sd,
                action_dim: ad,
                k: m.k,
                hidden: m.gru_hidden,
                categorical_hidden: m.categorical_hidden.clone(),
                value_hidden: m.value_hidden.clone(),
                embed_state: m.embed_state,
                embed_action: m.embed_action,
                embed_reward: m.embed_reward,
                categorical_dropout: m.categorical_dropout,
                value_scale: discounted_horizon(cfg.loss.gamma, cfg.suite.horizon),
            },
            &mut hl_params,
            &mut rng,
        )?;
        let mut il_params = ParameterSet::new();
        let il = IlNet::new(
            IlDims {
                k: m.k,
                state_dim: sd,
                action_dim: ad,
                ego_dim: cfg.suite.ego_mask().len(),
                encoder_hidden: m.encoder_hidden.clone(),
                decoder_hidden: m.decoder_hidden.clone(),
                ego_embed: m.ego_embed,
                decoder_dropout: m.decoder_dropout,
                std_range,
            },
            &mut il_params,
            &mut rng,
        )?;
        let mut pi_params = ParameterSet::new();
        let pi = PolicyNet::new(
            PolicyDims {
                k: m.k,
                state_dim: sd,
                action_dim: ad,
                hidden: m.policy_hidden.clone(),
                std_range,
            },
            &mut pi_params,
            &mut rng,
        )?;
        let model = Self {
            hl,
            il,
            pi,
            hl_params,
            il_params,
            pi_params,
        };
        model.check_partition()?;
        Ok(model)
    }

    /// No parameter name may belong to two optimizers.
    pub fn check_partition(&self) -> Result<()> {
        let sets = [&self.hl_params, &self.il_params, &self.pi_params];
        for (i, a) in sets.iter().enumerate() {
            for b in &sets[i + 1..] {
                if a.id() == b.id() {
                    return Err(Error::Usage("two layers share a parameter set".into()));
                }
                if let Some(n) = a.names().iter().find(|n| b.find(n).is_some()) {
                    return Err(Error::Usage(format!("parameter `{n}` is owned by two layers")));
                }
            }
        }
        Ok(())
    }
}

/// Time-major batch of equal-length trajectories for the representation loss.
pub fn hl_batch(trajs: &[&Trajectory], gamma: f64) -> Result<HlBatch> {
    let first = trajs.first().ok_or_else(|| Error::Usage("empty trajectory minibatch".into()))?;
    let steps = first.len();
    if trajs.iter().any(|t| t.len() != steps) {
        return Err(Error::Usage("trajectories in a minibatch must share a length".into()));
    }
    let sd = first.states[0].len();
    let ad = first.steps.first().map_or(0, |s| s.a.len());
    let targets: Vec<Vec<f64>> = trajs
        .iter()
        .map(|t| mc_return(&t.steps.iter().map(|s| s.r_total).collect::<Vec<_>>(), gamma))
        .collect();
    Ok(HlBatch {
        batch: trajs.len(),
        steps,
        state_dim: sd,
        action_dim: ad,
        states: (0..=steps).map(|t| trajs.iter().flat_map(|tr| tr.states[t].iter().copied()).collect()).collect(),
        actions: (0..steps).map(|t| trajs.iter().flat_map(|tr| tr.steps[t].a.iter().copied()).collect()).collect(),
        rewards: (0..steps).map(|t| trajs.iter().map(|tr| tr.steps[t].r_ext).collect()).collect(),
        targets: (0..steps).map(|t| targets.iter().map(|g| g[t]).collect()).collect(),
    })
}

/// Flattened macro-action rows: `y` from `ys` (time-major, see
/// [`HlNet::representations`]), goals from the representations stored at
/// collection time, prior from the current policy at `z = 0`.
pub fn il_batch(
    model: &Model,
    cfg: &RunConfig,
    trajs: &[&Trajectory],
    ys: &[Vec<f64>],
    mask: &EgoMask,
    rng: &mut crate::rng::Rng,
) -> Result<IlBatch> {
    let k = cfg.model.k;
    let ad = cfg.suite.action_dim();
    let mut b = IlBatch::default();
    for (i, tr) in trajs.iter().enumerate() {
        let stored: Vec<Vec<f64>> = tr.steps.iter().map(|s| s.y.clone()).collect();
        let goals = assign_goals(Some(&stored), cfg.model.goal_strategy, cfg.model.goal_horizon, tr.len())?;
        for (t, goal) in goals.goals.iter().enumerate() {
            let Some(gi) = *goal else {
                b.skipped += 1;
                continue;
            };
            let y = downstream_y(&ys[t][i * k..(i + 1) * k], cfg.model.y_downstream);
            b.y.extend(y);
            b.s.extend(&tr.states[t]);
            b.s_ego.extend(ego_extract(&tr.states[t], mask)?);
            b.target_ego.extend(ego_extract(&tr.states[gi], mask)?);
            b.rows += 1;
        }
    }
    if b.rows == 0 {
        return Err(Error::Usage("no macro-action rows in minibatch".into()));
    }
    let mut g = Graph::new();
    let y = g.constant_rows(b.rows, k, b.y.clone())?;
    let z = g.constant_rows(b.rows, ad, vec![0.0; b.rows * ad])?;
    let s = g.constant_rows(b.rows, cfg.suite.state_dim(), b.s.clone())?;
    let (mean, std) = model.pi.dist(&mut g, &model.pi_params, y, z, s)?;
    b.prior_mean = g.value(mean).to_vec();
    b.prior_std = g.value(std).to_vec();
    b.noise = standard_normal_vec(rng, b.rows * ad);
    Ok(b)
}

/// On-policy PPO batch from this iteration's trajectories.
pub fn rollout_batch(model: &Model, trajs: &[Trajectory], gamma: f64, lambda: f64) -> Result<RolloutBatch> {
    let episodes = trajs
        .iter()
        .map(|tr| {
            let last = tr.len().saturating_sub(1);
            tr.steps
                .iter()
                .enumerate()
                .map(|(t, st)| RolloutStep {
                    s: tr.states[t].clone(),
                    y: st.y.clone(),
                    z: st.z.clone(),
                    a: st.a.clone(),
                    pre_squash: st.pre_squash.clone(),
                    log_prob_old: st.log_prob,
                    r_total: st.r_total,
                    value_old: st.value,
                    done: t == last,
                })
                .collect()
        })
        .collect();
    RolloutBatch::new(model.pi.dims.clone(), episodes, gamma, lambda)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iteration: u64,
    pub train: SplitStats,
    pub test: SplitStats,
    pub hl: HlLossReport,
    pub il: IlLossReport,
    pub ppo: PpoStats,
    /// Collected steps where `r_in` exceeded `r_ext`.
    pub r_in_violations: usize,
}

fn check_loss(name: &str, value: f64, iteration: u64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("loss `{name}` is {value} at iteration {iteration}")))
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct RunState {
    pub cfg: RunConfig,
    pub model: Model,
    pub iteration: u64,
    pub buffer: ReplayBuffer,
    pub train_tasks: Vec<TaskSpec>,
    pub test_tasks: Vec<TaskSpec>,
}

impl RunState {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (train_tasks, test_tasks) = make_suite(&cfg.suite, cfg.train.seed)?;
        Ok(Self {
            model: Model::new(&cfg)?,
            buffer: ReplayBuffer::new(cfg.train.buffer_capacity)?,
            iteration: 0,
            train_tasks,
            test_tasks,
            cfg,
        })
    }

    pub fn tasks(&self, split: Split) -> &[TaskSpec] {
        match split {
            Split::Train => &self.train_tasks,
            Split::Test => &self.test_tasks,
        }
    }

    /// Greedy rollouts on `split`, `episodes` per task.
    pub fn evaluate(&self, split: Split, episodes: usize, iteration: u64) -> Result<Vec<Trajectory>> {
        collect(
            &self.model,
            &self.cfg,
            self.tasks(split),
            episodes,
            stream::EVAL,
            iteration,
            RolloutMode::Greedy,
            self.cfg.train.exec,
        )
    }

    /// On-policy collection for the current iteration.
    pub fn collect_train(&self) -> Result<Vec<Trajectory>> {
        collect(
            &self.model,
            &self.cfg,
            &self.train_tasks,
            self.cfg.train.episodes_per_task,
            stream::COLLECT,
            self.iteration,
            RolloutMode::Explore,
            self.cfg.train.exec,
        )
    }

    /// One pass of collect → push → replayed representation and
    /// macro-action updates → PPO on the fresh batch → greedy test rollouts.
    pub fn train_iteration(&mut self) -> Result<IterationStats> {
        let it = self.iteration;
        let trajs = self.collect_train()?;
        self.buffer.push(trajs.iter().cloned());
        let (hl, il) = self.hierarchical_update()?;
        let ppo = self.policy_update(&trajs)?;
        let test = self.evaluate(Split::Test, self.cfg.train.test_episodes_per_task, it)?;
        let r_in_violations = trajs
            .iter()
            .flat_map(|t| &t.steps)
            .filter(|s| s.r_in > s.r_ext)
            .count();
        let stats = IterationStats {
            iteration: it,
            train: SplitStats::from_trajectories(&trajs)?,
            test: SplitStats::from_trajectories(&test)?,
            hl,
            il,
            ppo,
            r_in_violations,
        };
        self.iteration += 1;
        Ok(stats)
    }

    /// Replayed minibatch steps on the representation and macro-action
    /// layers.
    fn hierarchical_update(&mut self) -> Result<(HlLossReport, IlLossReport)> {
        let it = self.iteration;
        let cfg = &self.cfg;
        let staged = &self.buffer;
        let mut rng = rng_for(cfg.train.seed, &[stream::HIER_TRAIN, it]);
        let hl_w = HlLossWeights {
            value: cfg.loss.alpha_v,
            entropy: cfg.loss.alpha_ent,
            occupancy: cfg.loss.alpha_occ,
        };
        let il_w = IlLossWeights {
            kl: cfg.loss.beta_kl,
            transition: cfg.loss.beta_t,
        };
        let mask = cfg.suite.ego_mask();
        let fault = cfg.train.fault_injection.as_deref();
        let mut hl_sum = HlLossReport::default();
        let mut il_sum = IlLossReport::default();
        let n = cfg.train.hl_minibatches;
        let model = &mut self.model;
        for _ in 0..n {
            let picks = staged.sample(cfg.train.hl_minibatch_trajectories, &mut rng);
            let hb = hl_batch(&picks, cfg.loss.gamma)?;
            let ys = model.hl.representations(&model.hl_params, &hb)?;
            let ib = il_batch(model, cfg, &picks, &ys, &mask, &mut rng)?;

            let (hl_grads, mut hl_rep) = {
                let mut g = Graph::new();
                let (loss, rep) = hl_loss(&model.hl, &mut g, &model.hl_params, &hb, &hl_w, &mut Mode::Train(&mut rng))?;
                (g.backward(loss)?, rep)
            };
            if fault == Some("hl") {
                hl_rep.total = f64::NAN;
            }
            check_loss("hl", hl_rep.total, it)?;
            let (il_grads, mut il_rep) = {
                let mut g = Graph::new();
                let (loss, rep) = il_loss(&model.il, &mut g, &model.il_params, &ib, &il_w, &mut Mode::Train(&mut rng))?;
                (g.backward(loss)?, rep)
            };
            if fault == Some("il") {
                il_rep.total = f64::NAN;
            }
            check_loss("il", il_rep.total, it)?;

            model.hl_params.accumulate(&hl_grads)?;
            model.hl_params.adam_step(&AdamConfig::with_lr(cfg.train.lr_hl))?;
            model.il_params.accumulate(&il_grads)?;
            model.il_params.adam_step(&AdamConfig::with_lr(cfg.train.lr_il))?;

            hl_sum.total += hl_rep.total;
            hl_sum.value += hl_rep.value;
            hl_sum.entropy += hl_rep.entropy;
            hl_sum.occupancy += hl_rep.occupancy;
            il_sum.total += il_rep.total;
            il_sum.kl += il_rep.kl;
            il_sum.transition += il_rep.transition;
            il_sum.skipped += il_rep.skipped;
        }
        let d = n.max(1) as f64;
        Ok((
            HlLossReport {
                total: hl_sum.total / d,
                value: hl_sum.value / d,
                entropy: hl_sum.entropy / d,
                occupancy: hl_sum.occupancy / d,
            },
            IlLossReport {
                total: il_sum.total / d,
                kl: il_sum.kl / d,
                transition: il_sum.transition / d,
                skipped: il_sum.skipped,
            },
        ))
    }

    fn policy_update(&mut self, trajs: &[Trajectory]) -> Result<PpoStats> {
        let cfg = &self.cfg;
        let mut batch = rollout_batch(&self.model, trajs, cfg.loss.gamma, cfg.loss.lambda)?;
        let ppo = PpoConfig {
            clip: cfg.loss.clip,
            entropy_coef: cfg.loss.alpha_2,
            epochs: cfg.loss.k_epochs,
            minibatch: cfg.loss.ppo_minibatch,
            adam: AdamConfig::with_lr(cfg.train.lr_policy),
        };
        let mut rng = rng_for(cfg.train.seed, &[stream::POLICY_TRAIN, self.iteration]);
        let mut stats = ll_update(&self.model.pi, &mut self.model.pi_params, &mut batch, &ppo, &mut rng)?;
        if cfg.train.fault_injection.as_deref() == Some("ppo") {
            stats.mean.loss = f64::NAN;
        }
        check_loss("ppo", stats.mean.loss, self.iteration)?;
        Ok(stats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split `{other}` (train or test)"))),
        }
    }
}
