use renewal_core::boosting::BoostConfig;
use renewal_core::portfolio::{quantile_grid, synth_generate, trim_outliers, AssignmentTruth, Portfolio, SynthConfig};
use renewal_core::propensity::*;
use renewal_core::stats::{norm_mass, norm_pdf};

fn config(max_rounds: usize, max_depth: usize) -> PsConfig {
    PsConfig {
        boost: BoostConfig {
            eta: 0.1,
            max_depth,
            max_rounds,
            early_stop_patience: 30,
            ..BoostConfig::default()
        },
        ..PsConfig::default()
    }
}

fn portfolio(n: usize, confounding: f64, seed: u64) -> Portfolio {
    let cfg = SynthConfig {
        n,
        assignment: AssignmentTruth {
            confounding,
            ..AssignmentTruth::default()
        },
        ..SynthConfig::default()
    };
    trim_outliers(&synth_generate(&cfg, seed).unwrap().portfolio).unwrap().0
}

#[test]
fn discrete_scores_are_distributions() {
    let p = portfolio(2000, 1.0, 3);
    let grid = quantile_grid(&p.rate_changes(), 5).unwrap();
    let model = fit_discrete_ps(&p, &grid, &config(40, 2)).unwrap();
    let s = model.interval_scores(&p.covariates()).unwrap();
    for i in 0..s.rows() {
        let total: f64 = s.row(i).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(s.row(i).iter().all(|&v| v > 0.0));
    }
}

#[test]
fn unconfounded_scores_match_interval_frequencies() {
    let p = portfolio(20_000, 0.0, 5);
    let grid = quantile_grid(&p.rate_changes(), 5).unwrap();
    // Few rounds and coarse leaves: otherwise the trees chase sampling noise
    // in small regions, which is a real deviation from the frequencies.
    let mut cfg = config(20, 2);
    cfg.boost.eta = 0.05;
    cfg.boost.min_child_weight = 1000;
    cfg.boost.early_stop_patience = 0;
    let model = fit_discrete_ps(&p, &grid, &cfg).unwrap();
    let s = model.interval_scores(&p.covariates()).unwrap();
    let occupancy = grid.occupancy(&p.rate_changes());
    let n = p.len() as f64;
    let mut worst = 0.0f64;
    for i in 0..s.rows() {
        for (c, &k) in occupancy.iter().enumerate() {
            worst = worst.max((s.get(i, c) - k as f64 / n).abs());
        }
    }
    assert!(worst < 0.05, "max deviation {worst}");
}

#[test]
fn confounded_scores_beat_the_frequency_baseline_out_of_sample() {
    let train = portfolio(5000, 2.0, 7);
    let test = portfolio(5000, 2.0, 8);
    let grid = quantile_grid(&train.rate_changes(), 5).unwrap();
    let model = fit_discrete_ps(&train, &grid, &config(150, 2)).unwrap();
    let freq: Vec<f64> = grid
        .occupancy(&train.rate_changes())
        .iter()
        .map(|&k| k as f64 / train.len() as f64)
        .collect();
    let cats = grid.categories(&test.rate_changes()).unwrap();
    let s = model.interval_scores(&test.covariates()).unwrap();
    let n = test.len() as f64;
    let model_loss: f64 = cats.iter().enumerate().map(|(i, &c)| -s.get(i, c).ln()).sum::<f64>() / n;
    let base_loss: f64 = cats.iter().map(|&c| -freq[c].ln()).sum::<f64>() / n;
    assert!(model_loss < base_loss, "model {model_loss} vs baseline {base_loss}");
}

fn continuous(p: &Portfolio, rounds: usize, depth: usize) -> ContinuousGps {
    let grid = quantile_grid(&p.rate_changes(), 5).unwrap();
    match fit_continuous_gps(p, &grid, grid.bounds(), &config(rounds, depth)).unwrap() {
        PropensityModel::Continuous(g) => g,
        PropensityModel::Discrete(_) => unreachable!(),
    }
}

/// Composite 5-point Gauss-Legendre rule on each interval piece; the nodes
/// stay strictly inside a piece, away from the jumps between pieces.
fn integrate(f: impl Fn(f64) -> f64, edges: &[f64]) -> f64 {
    const X: [f64; 5] = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let m = 200;
    edges
        .windows(2)
        .map(|w| {
            let h = (w[1] - w[0]) / m as f64;
            (0..m)
                .map(|k| {
                    let mid = w[0] + (k as f64 + 0.5) * h;
                    X.iter().zip(&W).map(|(x, wt)| wt * f(mid + 0.5 * h * x)).sum::<f64>() * 0.5 * h
                })
                .sum::<f64>()
        })
        .sum()
}

#[test]
fn gps_integrates_to_one() {
    let p = portfolio(3000, 1.0, 11);
    let gps = continuous(&p, 60, 2);
    let mut edges = gps.grid.boundaries().to_vec();
    edges[0] = gps.bounds.lower();
    let last = edges.len() - 1;
    edges[last] = gps.bounds.upper();
    for f in [-0.05, 0.02, 0.075, 0.15, 0.3] {
        let total = integrate(|t| gps.density_at(f, t).unwrap(), &edges);
        assert!((total - 1.0).abs() < 1e-6, "mean {f}: integral {total}");
    }
}

#[test]
fn constant_mean_gives_identical_gps() {
    let p = portfolio(1500, 1.0, 13);
    let gps = continuous(&p, 5, 0);
    let x = p.covariates();
    let g = gps.gps(&x, 0.05).unwrap();
    assert!(g.iter().all(|&v| v == g[0]));
}

#[test]
fn gps_beats_an_unconditional_truncated_normal_out_of_sample() {
    let train = portfolio(5000, 1.5, 17);
    let gps = continuous(&train, 200, 2);
    let test = portfolio(3000, 1.5, 18)
        .filter(|r| gps.bounds.contains(r.rate_change))
        .unwrap();
    let t_train = train.rate_changes();
    let n = t_train.len() as f64;
    let mu = t_train.iter().sum::<f64>() / n;
    let sd = (t_train.iter().map(|t| (t - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let (lo, hi) = (gps.bounds.lower(), gps.bounds.upper());
    let base = |t: f64| norm_pdf((t - mu) / sd) / (sd * norm_mass((lo - mu) / sd, (hi - mu) / sd));
    let t = test.rate_changes();
    let f = gps.mean(&test.covariates()).unwrap();
    let m = t.len() as f64;
    let model_nll: f64 = t
        .iter()
        .zip(&f)
        .map(|(&t, &f)| -gps.density_at(f, t).unwrap().ln())
        .sum::<f64>()
        / m;
    let base_nll: f64 = t.iter().map(|&t| -base(t).ln()).sum::<f64>() / m;
    assert!(model_nll < base_nll, "model {model_nll} vs baseline {base_nll}");
}

#[test]
fn two_intervals_on_unconfounded_data_split_evenly() {
    let p = portfolio(4000, 0.0, 19);
    let rows = convergence_study(&p, &[2], &config(40, 2), &config(40, 2)).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].score_diff.median < 0.05, "{:?}", rows[0].score_diff);
    let grid = quantile_grid(&p.rate_changes(), 2).unwrap();
    let model = fit_discrete_ps(&p, &grid, &config(40, 2)).unwrap();
    let s = model.interval_scores(&p.covariates()).unwrap();
    let mean0 = (0..s.rows()).map(|i| s.get(i, 0)).sum::<f64>() / s.rows() as f64;
    assert!((mean0 - 0.5).abs() < 0.02, "mean first-interval score {mean0}");
}

#[test]
fn balance_report_is_consistent_with_its_scores() {
    let p = portfolio(3000, 1.0, 23);
    let grid = quantile_grid(&p.rate_changes(), 5).unwrap();
    let model = fit_discrete_ps(&p, &grid, &config(80, 2)).unwrap();
    let report = asam(&p, &model, &grid).unwrap();
    assert_eq!(report.intervals.len(), 5);
    assert!(report.overall_after < report.overall_before);
    let tsv = report.to_tsv();
    assert!(tsv.lines().count() > 5);
}

#[test]
fn models_round_trip_as_json() {
    let p = portfolio(1500, 1.0, 29);
    let grid = quantile_grid(&p.rate_changes(), 5).unwrap();
    for model in [
        fit_discrete_ps(&p, &grid, &config(10, 2)).unwrap(),
        fit_continuous_gps(&p, &grid, grid.bounds(), &config(10, 2)).unwrap(),
    ] {
        let back = PropensityModel::from_json(&model.to_json().unwrap()).unwrap();
        assert_eq!(back, model);
        let x = p.covariates();
        assert_eq!(
            back.interval_scores(&x).unwrap().as_slice(),
            model.interval_scores(&x).unwrap().as_slice()
        );
    }
}
