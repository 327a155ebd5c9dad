//! Rayon versus sequential chunked reduction on a 1e5-record preference
//! batch. `mpo_rm_loss` uses whichever backend the build enables; run once
//! with default features and once with `--no-default-features` to compare
//! it end to end.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use preflab::env::{random, sample_preference_dataset};
use preflab::losses::mpo_rm_loss;
use preflab::parallel::{chunked_reduce, chunked_reduce_sequential};
use preflab::{rng, PreferenceSample, Table, TabularPolicy};

fn pair_gradient(policy: &TabularPolicy, batch: &[PreferenceSample], parallel: bool) -> Table {
    let (c, v) = policy.shape();
    let init = || Table::zeros(c, v);
    let fold = |g: &mut Table, s: &PreferenceSample| {
        let p = policy.pairwise_pref(s.x, s.y_w, s.y_l).expect("valid pair");
        let coef = -(2.0 * s.indicator() - 1.0) * p * (1.0 - p);
        g.add(s.x, s.y_w, coef);
        g.add(s.x, s.y_l, -coef);
    };
    let merge = |a: &mut Table, b: Table| a.add_scaled(&b, 1.0);
    if parallel {
        chunked_reduce(batch, init, fold, merge)
    } else {
        chunked_reduce_sequential(batch, init, fold, merge)
    }
}

fn bench(c: &mut Criterion) {
    let mut r = rng::stream(1, 0);
    let env = random::env(&mut r, 8, 16, true);
    let policy = random::policy(&mut r, 8, 16, 2.0);
    let mut group = c.benchmark_group("pair_gradient");
    for n in [10_000usize, 100_000] {
        let batch = sample_preference_dataset(&env, n, 1).unwrap();
        group.bench_with_input(BenchmarkId::new("parallel", n), &batch, |b, batch| {
            b.iter(|| pair_gradient(black_box(&policy), black_box(batch), true))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &batch, |b, batch| {
            b.iter(|| pair_gradient(black_box(&policy), black_box(batch), false))
        });
        group.bench_with_input(BenchmarkId::new("mpo_rm_loss", n), &batch, |b, batch| {
            b.iter(|| mpo_rm_loss(black_box(&policy), black_box(batch)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
