use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use scakernel::data::{linspace, ScaProblem, StiffnessSpec};
use scakernel::gkn::{predict_with, AggregationPlan, GknConfig, GknModel};
use scakernel::grid::{Domain1D, Grid1D};
use scakernel::ls::{strain_concentration, ReferenceMedium, StiffnessField};
use scakernel::sca::{interaction_tensor_with, kmeans_with};
use scakernel::spectral::{mean_relative_error_fno, FieldSample, FnoConfig, FnoModel};
use scakernel::Exec;

const MODES: [(&str, Exec); 2] = [
    ("sequential", Exec::Sequential),
    ("parallel", Exec::Parallel),
];

fn bar(n: usize) -> StiffnessField {
    StiffnessField::inverse_quadratic(
        &Grid1D::uniform(Domain1D::new(0.0, 10.0).unwrap(), n).unwrap(),
    )
    .unwrap()
}

fn offline(c: &mut Criterion) {
    let field = bar(16384);
    let reference = ReferenceMedium::midrange(&field);
    let a = strain_concentration(&field, &reference, 1e-10).unwrap();
    let clustering = kmeans_with(&a, 64, 0, 300, Exec::Sequential).unwrap();

    let mut g = c.benchmark_group("kmeans_k64_n16384");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| kmeans_with(&a, 64, 0, 300, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("interaction_tensor_k64_n16384");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| interaction_tensor_with(&clustering, &reference, exec))
        });
    }
    g.finish();
}

fn gkn(c: &mut Criterion) {
    let problem = ScaProblem::new(
        Domain1D::new(0.0, 10.0).unwrap(),
        4096,
        &StiffnessSpec::InverseQuadratic,
    )
    .unwrap();
    let off = problem.offline(300, 0).unwrap();
    let model = GknModel::init(GknConfig::default(), 0).unwrap();
    let graph = model
        .graph(problem.domain(), off.clustering.centroids(), 0.2)
        .unwrap();
    let plan = AggregationPlan::exact(&graph);

    let mut g = c.benchmark_group("gkn_predict_k300");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict_with(&model, &graph, &plan, exec).unwrap())
        });
    }
    g.finish();
}

fn fno(c: &mut Criterion) {
    let field = bar(256);
    let samples: Vec<FieldSample> = linspace(0.05, 0.35, 8)
        .into_iter()
        .map(|e| FieldSample::from_full_field(&field, e).unwrap())
        .collect();
    let model = FnoModel::init(FnoConfig::default(), 0).unwrap();

    let mut g = c.benchmark_group("fno_eval_8x256");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| mean_relative_error_fno(&model, &samples, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, offline, gkn, fno);
criterion_main!(benches);
