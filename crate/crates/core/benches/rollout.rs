use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use vldac::config::TrainConfig;
use vldac::envs::EnvKind;
use vldac::exec::Execution;
use vldac::policy::Policy;
use vldac::trainer::rollout::{collect_rollouts, evaluate, CollectConfig, GreedyAgent};

fn setup(kind: EnvKind) -> (TrainConfig, Policy) {
    let cfg = TrainConfig::parse(&format!("[env]\nkind = \"{}\"\n", kind.name())).expect("config");
    let policy = Policy::new(
        cfg.model.policy_config(),
        Arc::new(cfg.env.vocabulary()),
        cfg.env.obs_dims(),
        0,
    );
    (cfg, policy)
}

fn modes() -> [(&'static str, Execution); 2] {
    [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)]
}

fn bench_collect(c: &mut Criterion) {
    let mut g = c.benchmark_group("collect_rollouts");
    g.sample_size(10);
    for kind in [EnvKind::HallwayNav, EnvKind::RoomsNav] {
        let (cfg, policy) = setup(kind);
        let cc = CollectConfig {
            rollout_size: cfg.run.rollout_size,
            num_workers: cfg.run.num_workers,
            max_tokens: cfg.model.max_tokens,
            with_value: true,
            loo_group: None,
        };
        for (name, exec) in modes() {
            g.bench_with_input(BenchmarkId::new(name, kind.name()), &exec, |b, &exec| {
                let mut update = 0u64;
                b.iter(|| {
                    update += 1;
                    collect_rollouts(&policy, &cfg.env, &cc, 0, update, exec).expect("rollout")
                })
            });
        }
    }
    g.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let mut g = c.benchmark_group("evaluate");
    g.sample_size(10);
    let (cfg, policy) = setup(EnvKind::RoomsNav);
    let agent = GreedyAgent {
        policy: &policy,
        max_tokens: cfg.model.max_tokens,
    };
    for (name, exec) in modes() {
        g.bench_with_input(BenchmarkId::new(name, "rooms_nav"), &exec, |b, &exec| {
            b.iter(|| evaluate(&agent, &cfg.env, 16, exec).expect("eval"))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_collect, bench_evaluate);
criterion_main!(benches);
