use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use crowdcast_core::config::TrainConfig;
use crowdcast_core::data::{synth_generate, window_scene, Horizon, TrajectoryWindow};
use crowdcast_core::eval::{evaluate, EvalOptions};
use crowdcast_core::exec::Execution;
use crowdcast_core::metrics::MinSelection;
use crowdcast_core::model::HyperSttn;
use crowdcast_core::train::train;

fn windows() -> Vec<TrajectoryWindow> {
    let scenes = synth_generate(3, 2, (4, 6)).expect("synthetic scenes");
    let mut w: Vec<_> = scenes.iter().flat_map(|s| window_scene(s, Horizon::default(), 4)).collect();
    w.truncate(8);
    w
}

fn small_config() -> TrainConfig {
    TrainConfig::parse_str("epochs=1\nbatch_size=8\nd_model=16\nd_emb=16\nheads=4\nffn_hidden=32\nlayers=1\nd_z=8\ncvae_hidden=32\n")
        .expect("bench config")
}

fn bench(c: &mut Criterion) {
    let data = windows();
    let cfg = small_config();
    let model = HyperSttn::new(&cfg.model, 0).expect("model");
    let modes = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

    let mut g = c.benchmark_group("train_epoch");
    g.sample_size(10);
    for (label, exec) in modes {
        g.bench_with_input(BenchmarkId::from_parameter(label), &exec, |b, &exec| {
            b.iter(|| train(&cfg, &data, exec, &mut |_| {}).expect("train"));
        });
    }
    g.finish();

    let mut g = c.benchmark_group("eval_k20");
    g.sample_size(10);
    for (label, exec) in modes {
        let opts = EvalOptions { k: 20, seed: 0, selection: MinSelection::Independent, exec };
        g.bench_with_input(BenchmarkId::from_parameter(label), &opts, |b, &opts| {
            b.iter(|| evaluate(&model, &data, "bench", opts).expect("eval"));
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
