use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use renewal_core::boosting::BoostConfig;
use renewal_core::exec;
use renewal_core::matching::impute;
use renewal_core::optimizer::{frontier_on, ActionSet, ChoiceTable};
use renewal_core::portfolio::{quantile_grid, synth_generate, trim_outliers, Portfolio, SynthConfig};
use renewal_core::propensity::{fit_discrete_ps, PsConfig};

fn book(n: usize) -> Portfolio {
    let cfg = SynthConfig {
        n,
        ..SynthConfig::default()
    };
    trim_outliers(&synth_generate(&cfg, 7).unwrap().portfolio).unwrap().0
}

fn ps_config() -> PsConfig {
    PsConfig {
        boost: BoostConfig {
            eta: 0.1,
            max_depth: 3,
            max_rounds: 20,
            early_stop_patience: 0,
            ..BoostConfig::default()
        },
        ..PsConfig::default()
    }
}

/// Runs `f` on the rayon path and on the forced sequential path.
fn both<F: FnMut()>(c: &mut Criterion, group: &str, n: usize, mut f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    for (label, sequential) in [("rayon", false), ("sequential", true)] {
        exec::force_sequential(sequential);
        g.bench_with_input(BenchmarkId::new(label, n), &n, |b, _| b.iter(&mut f));
    }
    exec::force_sequential(false);
    g.finish();
}

fn propensity(c: &mut Criterion) {
    let p = book(5000);
    let grid = quantile_grid(&p.rate_changes(), 5).unwrap();
    let cfg = ps_config();
    both(c, "fit_discrete_ps", p.len(), || {
        black_box(fit_discrete_ps(&p, &grid, &cfg).unwrap());
    });
}

fn matching(c: &mut Criterion) {
    let p = book(5000);
    let grid = quantile_grid(&p.rate_changes(), 5).unwrap();
    let ps = fit_discrete_ps(&p, &grid, &ps_config()).unwrap();
    both(c, "impute", p.len(), || {
        black_box(impute(&p, &ps, &grid, 10, 10, 3).unwrap());
    });
}

fn frontier(c: &mut Criterion) {
    let p = book(5000);
    let out = synth_generate(
        &SynthConfig {
            n: 10,
            ..SynthConfig::default()
        },
        7,
    )
    .unwrap();
    let truth = out.metadata.truth;
    let actions = ActionSet::continuous(-0.05, 0.2, 0.005).unwrap();
    let alphas: Vec<f64> = (0..10).map(|k| 0.12 + 0.01 * k as f64).collect();
    both(c, "frontier", p.len(), || {
        let table = ChoiceTable::build(&p, &truth, &actions);
        black_box(frontier_on(&table, &alphas).unwrap());
    });
}

criterion_group!(benches, propensity, matching, frontier);
criterion_main!(benches);
