//! Sequential vs rayon executors on dataset generation and a batched forward.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drf_core::model::{Arch, DropoutMode, Model, ModelConfig, SequenceInput};
use drf_core::nn::Tape;
use drf_core::par::Exec;
use drf_core::pendulum::{generate_dataset, DatasetConfig, Sequence};

const EXECS: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn dataset(c: &mut Criterion) {
    let cfg = DatasetConfig::new(32, 75, 0.5, 1);
    let mut group = c.benchmark_group("generate_dataset");
    group.sample_size(10);
    for (name, exec) in EXECS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(&cfg, exec).unwrap())
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let model = Model::new(ModelConfig::new(Arch::Drf), 0).unwrap();
    let data = generate_dataset(&DatasetConfig::new(16, 20, 0.5, 2), Exec::default()).unwrap();
    let seqs: Vec<&Sequence> = data.sequences.iter().collect();
    let input = SequenceInput::from_sequences(&seqs).unwrap();
    let mut group = c.benchmark_group("drf_forward");
    group.sample_size(10);
    for (name, exec) in EXECS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let tape = Tape::inference().with_exec(exec);
                let p = model.bind(&tape);
                let out = model
                    .forward(&tape, &p, &input, &mut DropoutMode::Off)
                    .unwrap();
                tape.value(out.decoded.y).data.len()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, dataset, forward);
criterion_main!(benches);
