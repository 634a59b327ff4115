use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use himeta::config::RunConfig;
use himeta::exec::Exec;
use himeta::oracle::layer_gradient_checks;
use himeta::rng::stream;
use himeta::trainer::{collect, RolloutMode, RunState};

const CONFIG: &str = "
[suite]
suite = nav2d
n_train = 4
horizon = 60
[model]
k = 4
gru_hidden = 32
categorical_hidden = 32
value_hidden = 32
encoder_hidden = 32,16
decoder_hidden = 32,32
policy_hidden = 32,32
";

fn strategies() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn rollouts(c: &mut Criterion) {
    let state = RunState::new(RunConfig::parse(CONFIG).unwrap()).unwrap();
    let mut group = c.benchmark_group("collect_20_episodes");
    group.sample_size(10);
    for (name, exec) in strategies() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                collect(
                    &state.model,
                    &state.cfg,
                    &state.train_tasks,
                    5,
                    stream::COLLECT,
                    0,
                    RolloutMode::Explore,
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

fn gradient_checks(c: &mut Criterion) {
    let cfg = RunConfig::parse(CONFIG).unwrap();
    let mut group = c.benchmark_group("layer_gradient_checks");
    group.sample_size(10);
    for (name, exec) in strategies() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| layer_gradient_checks(&cfg, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, rollouts, gradient_checks);
criterion_main!(benches);
