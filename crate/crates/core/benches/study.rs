//! Sequential versus parallel scheduling of the data-parallel stages.

use std::hint::black_box;
use std::path::Path;

use aggcate::aggdata::{load_meta_dataset, CovariateSample, EffectScale, MetaDataset, SampleRole};
use aggcate::par::Parallelism;
use aggcate::simulate::{run_study, scenario_set, StudyConfig};
use aggcate::synthpop::{self, CopulaSpec};
use aggcate::tilting::{solve_all_tilts, TiltConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

fn data(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join(name)
}

fn application_inputs(n: usize) -> (MetaDataset, CovariateSample, CopulaSpec) {
    let ds = load_meta_dataset(
        &data("sglt2_effects.csv"),
        &data("sglt2_moments.csv"),
        &data("sglt2_schema.toml"),
        EffectScale::Difference,
    )
    .unwrap();
    let mut spec = CopulaSpec::from_toml_str(&std::fs::read_to_string(data("pulse_copula.toml")).unwrap()).unwrap();
    spec.n = n;
    let base = synthpop::sample(&spec, SampleRole::Base, Parallelism::Parallel).unwrap();
    (ds, base, spec)
}

fn study(c: &mut Criterion) {
    let scenarios: Vec<_> = scenario_set("5trial").unwrap().into_iter().take(2).collect();
    let mut group = c.benchmark_group("run_study");
    group.sample_size(10);
    for (name, mode) in MODES {
        let cfg = StudyConfig { replications: Some(16), parallelism: mode, ..Default::default() };
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| black_box(run_study(&scenarios, cfg).unwrap()))
        });
    }
    group.finish();
}

fn tilts(c: &mut Criterion) {
    let (ds, base, _) = application_inputs(100_000);
    let mut group = c.benchmark_group("solve_all_tilts");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(solve_all_tilts(&ds, &base, &TiltConfig::default(), mode).unwrap()))
        });
    }
    group.finish();
}

fn synth(c: &mut Criterion) {
    let (_, _, spec) = application_inputs(1_000);
    let spec = CopulaSpec { n: 200_000, ..spec };
    let mut group = c.benchmark_group("synthpop_sample");
    group.sample_size(20);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(synthpop::sample(&spec, SampleRole::Target, mode).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, study, tilts, synth);
criterion_main!(benches);
