use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use xcs::ctc::{ctc_nll_with_grad, greedy_decode};
use xcs::harness::{Configurable, TrainConfig, Trainer};
use xcs::metrics::edit_distance;
use xcs::model::{Ablation, Model, ModelConfig};
use xcs::numerics::Trace;
use xcs::synthgen::Example;
use xcs_bench::{label_pair, lattice, sentence, target};

fn ctc(c: &mut Criterion) {
    let mut g = c.benchmark_group("ctc_nll_with_grad");
    for (frames, len) in [(24, 6), (60, 20), (200, 60)] {
        let lp = lattice(frames, 40);
        let y = target(len, 40);
        g.bench_with_input(BenchmarkId::from_parameter(format!("T{frames}_U{len}")), &(), |b, _| {
            b.iter(|| ctc_nll_with_grad(black_box(lp.tensor()), black_box(&y)).unwrap())
        });
    }
    g.finish();
    let lp = lattice(200, 40);
    c.bench_function("greedy_decode_T200", |b| b.iter(|| greedy_decode(black_box(lp.tensor()))));
}

fn edit(c: &mut Criterion) {
    let mut g = c.benchmark_group("edit_distance");
    for len in [20, 200] {
        let (a, b) = label_pair(len);
        g.bench_with_input(BenchmarkId::from_parameter(len), &(), |bn, _| {
            bn.iter(|| edit_distance(black_box(&a), black_box(&b)))
        });
    }
    g.finish();
}

fn model(c: &mut Criterion) {
    let example = Example::from_sample("s0".into(), &sentence(64, 0)).unwrap();
    let mut g = c.benchmark_group("forward");
    for mode in Ablation::ALL {
        let m = Model::new(ModelConfig { ablation: mode, ..ModelConfig::default() }, 1).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(mode.name()), &(), |b, _| {
            b.iter(|| {
                let mut tr = Trace::new();
                m.forward(&mut tr, black_box(&example.lip), black_box(&example.hand)).unwrap();
            })
        });
    }
    g.finish();

    let mut g = c.benchmark_group("train_step");
    g.sample_size(20);
    for mode in Ablation::ALL {
        let mut cfg = TrainConfig::default();
        cfg.set("mode", mode.name()).unwrap();
        let mut trainer = Trainer::new(cfg).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(mode.name()), &(), |b, _| {
            b.iter(|| trainer.step_on(black_box(&example)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, ctc, edit, model);
criterion_main!(benches);
