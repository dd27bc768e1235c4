use renewal_core::portfolio::*;

#[test]
fn csv_round_trip_is_identity() {
    let out = synth_generate(
        &SynthConfig {
            n: 800,
            ..SynthConfig::default()
        },
        42,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("book.csv");
    save_csv(&path, &out.portfolio).unwrap();
    let back = load_csv(&path, &CsvSchema::default()).unwrap();
    assert_eq!(back, out.portfolio);
    let again = dir.path().join("again.csv");
    save_csv(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn same_seed_writes_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n: 500,
        ..SynthConfig::default()
    };
    let paths: Vec<_> = (0..2)
        .map(|k| {
            let p = dir.path().join(format!("{k}.csv"));
            save_csv(&p, &synth_generate(&cfg, 7).unwrap().portfolio).unwrap();
            p
        })
        .collect();
    assert_eq!(std::fs::read(&paths[0]).unwrap(), std::fs::read(&paths[1]).unwrap());
}

#[test]
fn trimmed_synthetic_data_lies_within_the_fences() {
    let out = synth_generate(&SynthConfig::default(), 1).unwrap();
    let (kept, report) = trim_outliers(&out.portfolio).unwrap();
    assert!(kept.len() < out.portfolio.len());
    for r in kept.records() {
        assert!(report.fences.admits(r));
    }
    let grid = quantile_grid(&kept.rate_changes(), 5).unwrap();
    let occ = grid.occupancy(&kept.rate_changes());
    let (lo, hi) = (*occ.iter().min().unwrap(), *occ.iter().max().unwrap());
    assert!(hi - lo <= kept.len() / 50, "unbalanced quintiles {occ:?}");
    assert_eq!(grid.medians().len(), 5);
}
