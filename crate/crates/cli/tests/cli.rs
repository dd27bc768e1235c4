use std::path::Path;
use std::process::Command;

use renewal_cli::config::{published_grid_overrides, RunConfig};
use renewal_cli::stages::tune_dose_response;
use renewal_cli::tune::{TuneConfig, TuneGrid};
use renewal_core::boosting::BoostConfig;
use renewal_core::portfolio::{quantile_grid, synth_generate, Portfolio, SynthConfig};
use renewal_core::propensity::{fit_continuous_gps, PropensityModel, PsConfig};

fn run(out: &Path, args: &[&str]) -> i32 {
    let out = out.display().to_string();
    let mut v = vec!["renewal", "--out", &out];
    v.extend_from_slice(args);
    renewal_cli::run(v)
}

fn binary(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_renewal"))
        .args(args)
        .env("RUST_LOG", "error")
        .status()
        .unwrap()
        .code()
        .unwrap()
}

const SMALL: [&str; 2] = ["--synth.n=1500", "--seed=11"];

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_eq!(run(d.path(), &["simulate", SMALL[0], SMALL[1]]), 0);
    }
    for f in ["portfolio.csv", "portfolio.meta.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap()
        );
    }
    let c = tempfile::tempdir().unwrap();
    assert_eq!(run(c.path(), &["simulate", SMALL[0], "--seed=12"]), 0);
    assert_ne!(
        std::fs::read(a.path().join("portfolio.csv")).unwrap(),
        std::fs::read(c.path().join("portfolio.csv")).unwrap()
    );
}

#[test]
fn discrete_pipeline_writes_its_tables() {
    let d = tempfile::tempdir().unwrap();
    let code = run(
        d.path(),
        &[
            "pipeline",
            "--kind=discrete",
            SMALL[0],
            SMALL[1],
            "--response.lasso.folds=3",
            "--matching.imputations=3",
            "--optimizer.multiperiod.solver.max_iter=50",
        ],
    );
    assert_eq!(code, 0);
    for f in [
        "balance.tsv",
        "response.json",
        "coefficients.tsv",
        "surface.tsv",
        "frontier.tsv",
        "boundary.json",
        "multiperiod.tsv",
        "frontier.manifest.json",
    ] {
        assert!(d.path().join(f).exists(), "{f} missing");
    }
    let frontier = std::fs::read_to_string(d.path().join("frontier.tsv")).unwrap();
    assert!(frontier.lines().skip(1).any(|l| l.contains("\tsolved\t")));
}

#[test]
fn check_skips_current_stages_and_repairs_tampered_ones() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &["simulate", SMALL[0], SMALL[1]]), 0);
    assert_eq!(run(d.path(), &["trim", SMALL[0], SMALL[1]]), 0);
    let manifest = d.path().join("trim.manifest.json");
    let trimmed = d.path().join("trimmed.csv");
    let stamp = std::fs::metadata(&trimmed).unwrap().modified().unwrap();
    std::thread::sleep(std::time::Duration::from_millis(20));
    assert_eq!(run(d.path(), &["trim", "--check", SMALL[0], SMALL[1]]), 0);
    assert_eq!(std::fs::metadata(&trimmed).unwrap().modified().unwrap(), stamp);

    let good = std::fs::read(&trimmed).unwrap();
    std::fs::write(&trimmed, b"tampered").unwrap();
    assert_eq!(run(d.path(), &["trim", "--check", SMALL[0], SMALL[1]]), 0);
    assert_eq!(std::fs::read(&trimmed).unwrap(), good);
    assert!(manifest.exists());
}

#[test]
fn manifest_replays_the_same_outputs() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(run(d.path(), &["simulate", SMALL[0], SMALL[1]]), 0);
    let first = std::fs::read(d.path().join("portfolio.csv")).unwrap();
    let manifest = d.path().join("simulate.manifest.json").display().to_string();
    std::fs::remove_file(d.path().join("portfolio.csv")).unwrap();
    assert_eq!(run(d.path(), &["simulate", "--config", &manifest]), 0);
    assert_eq!(std::fs::read(d.path().join("portfolio.csv")).unwrap(), first);
}

#[test]
fn singleton_tune_grid_runs_one_candidate() {
    let d = tempfile::tempdir().unwrap();
    for stage in ["simulate", "trim", "grid"] {
        assert_eq!(run(d.path(), &[stage, SMALL[0], SMALL[1]]), 0);
    }
    let mut args = vec![
        "tune-ps",
        SMALL[0],
        SMALL[1],
        "--tune.folds=3",
        "--ps.boost.max_rounds=60",
    ];
    let sets = [
        "tune.grid.eta=[0.1]",
        "tune.grid.max_depth=[2]",
        "tune.grid.min_child_weight=[1]",
        "tune.grid.subsample=[1.0]",
        "tune.grid.colsample=[1.0]",
        "tune.grid.gamma=[0.0]",
        "tune.grid.lambda=[1.0]",
        "tune.grid.alpha=[0.0]",
    ];
    for s in &sets {
        args.extend(["--set", s]);
    }
    assert_eq!(run(d.path(), &args), 0);
    let tsv = std::fs::read_to_string(d.path().join("tune_ps.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 2);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.path().join("tune_ps.json")).unwrap()).unwrap();
    assert_eq!(report["evaluations"], 3);
    assert_eq!(report["best"]["max_depth"], 2);
}

/// Churn is the XOR of a high rate change and a high GPS, which no additive
/// model of stumps can represent.
#[test]
fn tuning_finds_the_depth_an_interaction_needs() {
    let synth = synth_generate(
        &SynthConfig {
            n: 3000,
            ..Default::default()
        },
        5,
    )
    .unwrap();
    let p = synth.portfolio;
    let grid = quantile_grid(&p.rate_changes(), 5).unwrap();
    let mut ps_cfg = PsConfig::default();
    ps_cfg.boost.max_depth = 2;
    ps_cfg.boost.eta = 0.1;
    ps_cfg.boost.max_rounds = 200;
    ps_cfg.boost.early_stop_patience = 20;
    let ps = fit_continuous_gps(&p, &grid, grid.bounds(), &ps_cfg).unwrap();
    let PropensityModel::Continuous(c) = &ps else {
        unreachable!()
    };
    let t = p.rate_changes();
    let gps = c.gps_at(&p.covariates(), &t).unwrap();
    let median = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    let (t0, g0) = (median(&t), median(&gps));
    let records = p
        .records()
        .iter()
        .zip(&gps)
        .map(|(r, &g)| {
            let mut r = r.clone();
            r.churn = (r.rate_change > t0) != (g > g0);
            r
        })
        .collect();
    let xor = Portfolio::new(records).unwrap();

    let base = BoostConfig {
        eta: 0.3,
        max_rounds: 150,
        early_stop_patience: 15,
        ..Default::default()
    };
    let config = TuneConfig {
        folds: 3,
        grid: TuneGrid {
            eta: vec![0.3],
            max_depth: vec![0, 1, 2],
            min_child_weight: vec![1],
            subsample: vec![1.0],
            colsample: vec![1.0],
            gamma: vec![0.0],
            lambda: vec![1.0],
            alpha: vec![0.0],
        },
    };
    let report = tune_dose_response(&xor, &ps, &base, &config, 9).unwrap();
    assert!(report.best.max_depth >= 2, "selected depth {}", report.best.max_depth);
    let by_depth = |d: usize| report.rows.iter().find(|r| r.config.max_depth == d).unwrap().mean;
    assert!(by_depth(2) < by_depth(1));
}

#[test]
fn published_grids_flag_loads_the_tuning_table() {
    let cfg = RunConfig::load(None, &published_grid_overrides()).unwrap();
    let g = &cfg.tune.grid;
    assert_eq!(g.eta, [0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.15, 0.2, 0.25, 0.5]);
    assert_eq!(g.max_depth, [0, 1, 2, 4, 6, 8, 10, 25, 50]);
    assert_eq!(g.min_child_weight, [0, 1, 2, 3, 4, 5, 10, 25, 50]);
    let tenths: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
    assert_eq!(g.subsample, tenths);
    assert_eq!(g.colsample, tenths);
    for v in [&g.gamma, &g.lambda, &g.alpha] {
        assert_eq!(*v, [0.0, 0.1, 1.0, 10.0, 100.0]);
    }
    assert_eq!(cfg.tune.folds, 10);
    assert_eq!(cfg.ps.boost.max_rounds, 10000);
    assert_eq!(cfg.ps.boost.early_stop_patience, 250);
    assert_eq!(cfg.response.lasso.folds, 10);
}

#[test]
fn exit_codes_separate_bad_input_from_success() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().display().to_string();
    assert_eq!(binary(&["--help"]), 0);
    assert_eq!(binary(&["no-such-stage"]), 1);
    assert_eq!(binary(&["grid", "--out", &out]), 1);
    assert_eq!(binary(&["simulate", "--out", &out, "--synth.n=-4"]), 1);
    assert_eq!(binary(&["simulate", "--out", &out, "--synth.n=300"]), 0);

    let bad = d.path().join("bad.csv");
    std::fs::write(&bad, "id,churn\n1,yes\n").unwrap();
    let bad = bad.display().to_string();
    assert_eq!(binary(&["trim", "--out", &out, "--input", &bad]), 1);
}
