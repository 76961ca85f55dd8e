use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use curlgauge::decoding::{stress_test, Scheduler, StressConfig, UpdateOperator};
use curlgauge::pseudo_joint::{curl_scan, order_consistency_check, pseudo_joint_table};
use curlgauge::synthetic::{generate_joint, Family, SyntheticTaskSpec};
use curlgauge::{PartialContext, PerturbedConditionalModel, PseudoJointSpec, SamplingPlan, TabularJointModel};

fn joint(positions: usize, vocab_size: usize) -> TabularJointModel {
    generate_joint(&SyntheticTaskSpec { family: Family::Chain { beta: 1.0 }, positions, vocab_size, seed: 1 }).unwrap()
}

fn curl(c: &mut Criterion) {
    let mut group = c.benchmark_group("curl_scan");
    for (m, v) in [(3, 4), (4, 4), (6, 8)] {
        let oracle = PerturbedConditionalModel::new(joint(m, v), 0.5, 2).unwrap();
        let ctx = PartialContext::full_block(m);
        group.bench_with_input(BenchmarkId::new("exhaustive", format!("m{m}_v{v}")), &ctx, |b, ctx| {
            b.iter(|| curl_scan(&oracle, black_box(ctx), &SamplingPlan::Exhaustive, 1e-6).unwrap())
        });
        let plan = SamplingPlan::MonteCarlo { seed: 3, samples: 1000 };
        group.bench_with_input(BenchmarkId::new("monte_carlo_1000", format!("m{m}_v{v}")), &ctx, |b, ctx| {
            b.iter(|| curl_scan(&oracle, black_box(ctx), &plan, 1e-6).unwrap())
        });
    }
    group.finish();
}

fn consistency(c: &mut Criterion) {
    let mut group = c.benchmark_group("consistency_check");
    group.sample_size(10);
    for (block, v) in [(3, 4), (4, 4), (5, 4)] {
        let oracle = PerturbedConditionalModel::new(joint(block, v), 0.5, 2).unwrap();
        let ctx = PartialContext::full_block(block);
        group.bench_with_input(BenchmarkId::from_parameter(format!("b{block}_v{v}")), &ctx, |b, ctx| {
            b.iter(|| order_consistency_check(&oracle, black_box(ctx), 1e-8).unwrap())
        });
    }
    group.finish();
}

fn pseudo_joint(c: &mut Criterion) {
    let mut group = c.benchmark_group("pseudo_joint_table");
    for (m, v) in [(4, 4), (6, 6)] {
        let oracle = PerturbedConditionalModel::new(joint(m, v), 0.5, 2).unwrap();
        let spec = PseudoJointSpec::new(PartialContext::full_block(m), (0..m).rev().collect()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("m{m}_v{v}")), &spec, |b, spec| {
            b.iter(|| pseudo_joint_table(&oracle, black_box(spec)).unwrap())
        });
    }
    group.finish();
}

fn stress(c: &mut Criterion) {
    let j = joint(4, 3);
    let ctx = [PartialContext::full_block(4)];
    let cfg = StressConfig { operator: UpdateOperator::SampleCommit, runs: 200, seed: 1 };
    let mut group = c.benchmark_group("stress_test");
    group.sample_size(10);
    group.bench_function("bayes_m4_v3_runs200", |b| {
        b.iter(|| stress_test(&j, &j, &ctx, &[1, 2, 4], &[Scheduler::LeftToRight, Scheduler::Confidence], &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, curl, consistency, pseudo_joint, stress);
criterion_main!(benches);
