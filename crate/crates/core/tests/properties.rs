use himeta::config::RunConfig;
use himeta::envs::{avg_episode_success, make_suite, reset, shape_reward, step, SuiteConfig, SuiteKind};
use himeta::intermediate::{assign_goals, GoalStrategy};
use himeta::lowlevel::{gae, intrinsic_reward, normalize_advantages};
use himeta::oracle::{macro_oracle, mc_return};
use himeta::trainer::{ReplayBuffer, Trajectory};
use proptest::prelude::*;

fn marker(i: u64) -> Trajectory {
    Trajectory {
        task: 0,
        seed: i,
        states: vec![vec![0.0]],
        steps: Vec::new(),
    }
}

fn latched(len: usize, first: Option<usize>) -> Vec<bool> {
    (0..len).map(|t| first.is_some_and(|f| t >= f)).collect()
}

fn linear_identity() -> SuiteConfig {
    SuiteConfig {
        linear_perturbation: 0.0,
        start_jitter: 0.0,
        ..SuiteConfig::defaults_for(SuiteKind::Linear)
    }
}

proptest! {
    #[test]
    fn buffer_keeps_the_newest_in_order(cap in 1usize..40, pushes in prop::collection::vec(0usize..25, 0..12)) {
        let mut buf = ReplayBuffer::new(cap).unwrap();
        let mut next = 0u64;
        for n in pushes {
            buf.push((next..next + n as u64).map(marker));
            next += n as u64;
        }
        let kept: Vec<u64> = buf.iter().map(|t| t.seed).collect();
        let expect: Vec<u64> = (next.saturating_sub(cap as u64)..next).collect();
        prop_assert_eq!(kept, expect);
        prop_assert_eq!(buf.inserted(), next);
    }

    #[test]
    fn intrinsic_reward_is_bounded_by_its_scale(
        z in prop::collection::vec(-1.0f64..1.0, 1..6),
        seed in any::<u64>(),
        r in 0.0f64..10.0,
    ) {
        let a: Vec<f64> = z.iter().enumerate().map(|(i, _)| if (seed >> i) & 1 == 1 { 0.5 } else { -0.5 }).collect();
        let v = intrinsic_reward(&z, &a, r).unwrap();
        prop_assert!((0.0..=r).contains(&v));
    }

    #[test]
    fn mc_return_satisfies_the_recurrence(rewards in prop::collection::vec(0.0f64..5.0, 1..80), gamma in 0.0f64..=1.0) {
        let g = mc_return(&rewards, gamma);
        for t in 0..rewards.len() {
            let next = g.get(t + 1).copied().unwrap_or(0.0);
            prop_assert!((g[t] - (rewards[t] + gamma * next)).abs() <= 1e-9 * (1.0 + g[t].abs()));
        }
    }

    #[test]
    fn goals_are_forward_looking(m in 1usize..8, extra in 0usize..30, labels in prop::collection::vec(0usize..3, 40)) {
        let horizon = m + extra;
        let ys: Vec<Vec<f64>> = labels[..horizon.min(40)].iter().map(|&l| {
            let mut v = vec![0.0; 3];
            v[l] = 1.0;
            v
        }).collect();
        prop_assume!(ys.len() == horizon);
        for strategy in [GoalStrategy::Cd, GoalStrategy::Cm, GoalStrategy::St] {
            let a = assign_goals(Some(&ys), strategy, m, horizon).unwrap();
            for (t, g) in a.goals.iter().enumerate() {
                let g = g.unwrap();
                prop_assert!(g > t && g <= horizon);
            }
        }
    }

    #[test]
    fn gae_returns_are_advantages_plus_values(
        rv in prop::collection::vec((0.0f64..2.0, -3.0f64..3.0), 1..50),
        last in -3.0f64..3.0,
    ) {
        let (r, v): (Vec<f64>, Vec<f64>) = rv.into_iter().unzip();
        let dones = vec![false; r.len()];
        let out = gae(&r, &v, last, &dones, 0.99, 0.9).unwrap();
        for t in 0..r.len() {
            prop_assert!((out.returns[t] - out.advantages[t] - v[t]).abs() < 1e-12);
        }
        let td = gae(&r, &v, last, &dones, 0.99, 0.0).unwrap();
        for t in 0..r.len() {
            let next = v.get(t + 1).copied().unwrap_or(last);
            prop_assert!((td.advantages[t] - (r[t] + 0.99 * next - v[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_advantages_are_standardized(mut adv in prop::collection::vec(-50.0f64..50.0, 2..100)) {
        let spread = adv.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - adv.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        normalize_advantages(&mut adv);
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var.sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn linear_steps_compose_to_the_closed_form(
        actions in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 1..=10),
        seed in any::<u64>(),
    ) {
        let (train, _) = make_suite(&linear_identity(), 5).unwrap();
        let task = &train[0];
        let mut env = reset(task, seed);
        let s0 = env.s.clone();
        for a in &actions {
            env = step(&env, task, a).unwrap().state;
        }
        let oracle = macro_oracle(&s0, &actions, &task.b).unwrap();
        for (x, y) in env.s.iter().zip(&oracle.goal) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn environment_steps_are_deterministic(
        actions in prop::collection::vec(prop::collection::vec(-1.5f64..1.5, 2), 1..20),
        seed in any::<u64>(),
    ) {
        let (train, _) = make_suite(&SuiteConfig::defaults_for(SuiteKind::Nav2d), 11).unwrap();
        let run = || {
            let mut env = reset(&train[1], seed);
            let mut out = Vec::new();
            for a in &actions {
                let o = step(&env, &train[1], a).unwrap();
                out.push((o.state.s.clone(), o.r_ext.to_bits(), o.success));
                env = o.state;
            }
            out
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn config_text_round_trips(
        gamma in 0.5f64..=1.0,
        lambda in 0.0f64..=1.0,
        k in 1usize..16,
        m in 1usize..10,
        strategy in prop_oneof![Just("cd"), Just("cm"), Just("st")],
        lr in 1e-8f64..1e-2,
        seed in any::<u64>(),
        hidden in prop::collection::vec(1usize..64, 1..4),
    ) {
        let text = format!(
            "[model]\nk = {k}\ngoal_horizon = {m}\ngoal_strategy = {strategy}\npolicy_hidden = {}\n[loss]\ngamma = {gamma}\nlambda = {lambda}\n[train]\nlr_policy = {lr}\nseed = {seed}\n",
            hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
        );
        let cfg = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(cfg.loss.gamma, gamma);
        prop_assert_eq!(&cfg.model.policy_hidden, &hidden);
        let again = RunConfig::parse(&cfg.to_config_text()).unwrap();
        prop_assert_eq!(again, cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn latched_success_is_monotone(len in 1usize..200, first in prop::option::of(0usize..200)) {
        let flags = latched(len, first.filter(|&f| f < len));
        prop_assert!(flags.windows(2).all(|w| !w[0] || w[1]));
        let s = avg_episode_success(&flags).unwrap();
        prop_assert!((0.0..=1.0).contains(&s.average));
        let terminal = f64::from(u8::from(s.terminal));
        prop_assert!(s.average <= terminal);
        let expect = first.filter(|&f| f < len).map_or(0.0, |f| (len - f) as f64 / len as f64);
        prop_assert_eq!(s.average, expect);
    }
}

#[test]
fn shaping_is_monotone_on_a_fine_grid() {
    let a = 3.0;
    let mut prev = shape_reward(0.0, a).unwrap();
    for i in 1..=30_000 {
        let x = i as f64 * 1e-3;
        let g = shape_reward(x, a).unwrap();
        assert!(g >= prev, "g({x}) = {g} < {prev}");
        prev = g;
    }
}
