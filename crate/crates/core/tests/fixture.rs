use corrmeta::compare::{compare, parse_reference, Status};
use corrmeta::dataset::{Coding, CodedDataset, Factor, FactorMapping};
use corrmeta::fixture;
use corrmeta::report::{fmt3, run_pipeline, AnalysisConfig};
use corrmeta::Model;

fn dataset() -> CodedDataset {
    CodedDataset::bundled().apply_mapping()
}

#[test]
fn counts_per_factor() {
    let groups = dataset().group_by_factor();
    let expected = [
        (Factor::PerformanceExpectancy, 19, 7969),
        (Factor::EffortExpectancy, 16, 6549),
        (Factor::SocialInfluence, 15, 5535),
        (Factor::Attitude, 10, 3040),
        (Factor::FacilitatingConditions, 9, 3501),
        (Factor::HedonicMotivation, 8, 2823),
        (Factor::PerceivedCost, 5, 1734),
        (Factor::Habit, 5, 1844),
    ];
    assert_eq!(groups.len(), 8);
    for (factor, k, n) in expected {
        let g = &groups[&factor];
        assert_eq!((g.k(), g.total_n()), (k, n), "{factor}");
    }
    let total: usize = groups.values().map(|g| g.k()).sum();
    assert_eq!(total, 87);
}

#[test]
fn duong_row() {
    let ds = dataset();
    let e = ds
        .effects
        .iter()
        .find(|e| e.first_author == "Cong Doanh Duong" && e.raw_factor == "performance expectancy")
        .unwrap();
    assert_eq!(e.n, 1389);
    assert_eq!(e.effect_value, 0.528);
    assert_eq!(e.region_class, corrmeta::RegionClass::Developing);
}

#[test]
fn grouping_is_a_partition() {
    let ds = dataset();
    let mapped = ds
        .effects
        .iter()
        .filter(|e| matches!(e.coding, Coding::Mapped(_)))
        .count();
    let groups = ds.group_by_factor();
    let grouped: usize = groups.values().map(|g| g.k()).sum();
    assert_eq!(mapped, grouped);
    for (factor, g) in &groups {
        assert!(g.effects.iter().all(|e| e.factor() == Some(*factor)));
    }
}

#[test]
fn unmapped_variables_are_reported() {
    let ex = dataset().exclusions();
    assert!(!ex.unmapped.is_empty());
    assert!(ex.dropped_factors.is_empty());
}

#[test]
fn csv_round_trip() {
    let ds = dataset();
    let again = CodedDataset::parse_str(&ds.to_csv(), FactorMapping::standard())
        .unwrap()
        .apply_mapping();
    assert_eq!(again, ds);
    assert_eq!(again.to_csv(), ds.to_csv());
}

#[test]
fn file_entry_point() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let map = dir.path().join("m.csv");
    std::fs::write(&data, fixture::DATASET_CSV).unwrap();
    std::fs::write(&map, fixture::MAPPING_CSV).unwrap();
    let ds = corrmeta::dataset::parse_dataset(&data, &map).unwrap();
    assert_eq!(ds, CodedDataset::bundled());
    assert!(corrmeta::dataset::parse_dataset(dir.path().join("missing.csv"), &map).is_err());
}

#[test]
fn pipeline_on_fixture() {
    let report = run_pipeline(&CodedDataset::bundled(), &AnalysisConfig::default()).unwrap();
    assert_eq!(report.per_factor.len(), 8);
    let ks: Vec<usize> = report.per_factor.iter().map(|s| s.k).collect();
    assert_eq!(ks, vec![19, 16, 15, 10, 9, 8, 5, 5]);
    // ties at k = 5 ordered by name
    assert_eq!(report.per_factor[6].factor, Factor::Habit);
    assert!(report.per_factor.iter().all(|s| s.pooled.model == Model::Random));
    assert_eq!(report.dataset_summary.effects, 87);

    let pe = report.section(Factor::PerformanceExpectancy).unwrap();
    assert!((pe.pooled.r_pooled - 0.389).abs() < 5e-4);
    assert!((pe.pooled.ci_low - 0.298).abs() < 5e-4);
    assert!((pe.pooled.ci_high - 0.473).abs() < 5e-4);
    assert!((pe.pooled.z_stat - 7.789).abs() < 5e-4);

    let at = report.section(Factor::Attitude).unwrap();
    assert!((at.heterogeneity.q - 712.479).abs() < 5e-4);
    assert!((at.heterogeneity.i2 - 98.737).abs() < 5e-4);
    assert!((at.heterogeneity.tau2 - 0.265).abs() < 5e-4);

    let fc = report.section(Factor::FacilitatingConditions).unwrap();
    assert!((fc.bias.egger.intercept - -0.027).abs() < 5e-4);
    assert!((fc.bias.egger.p - 0.998).abs() < 5e-4);

    let ee = report.subgroup(Factor::EffortExpectancy).unwrap();
    assert!((ee.q_between - 12.238).abs() < 5e-4);
    assert!((ee.groups[1].estimate.r_pooled - 0.276).abs() < 5e-4);

    let hb = report.subgroup(Factor::Habit).unwrap();
    assert!((hb.q_between - 18.293).abs() < 5e-4);
    assert_eq!(hb.groups[0].estimate.k, 1);
    assert!((hb.groups[0].estimate.r_pooled - 0.559).abs() < 5e-4);

    let mr = report.meta_regression(Factor::Attitude).unwrap();
    assert!((mr.slope.estimate - 0.018).abs() < 1e-3);
    assert_eq!(fmt3(mr.slope.se), "0.008");
    assert!((mr.slope.p - 0.022).abs() < 5e-4);
}

#[test]
fn bundled_reference_passes_outside_known_discrepancies() {
    let report = run_pipeline(&CodedDataset::bundled(), &AnalysisConfig::default()).unwrap();
    let reference = parse_reference(fixture::REFERENCE_CSV).unwrap();
    let cmp = compare(&report, &reference, false);
    let failures: Vec<_> = cmp
        .failures()
        .map(|r| format!("{} {} {}", r.reference.table, r.reference.factor, r.reference.metric))
        .collect();
    assert!(failures.is_empty(), "{failures:?}");
    assert!(cmp.count(Status::Excluded) > 0);

    // the attitude Egger p cell is excluded by default
    let at_p = cmp
        .rows
        .iter()
        .find(|r| r.reference.factor == Factor::Attitude && r.reference.metric == "egger_p")
        .unwrap();
    assert_eq!(at_p.status, Status::Excluded);
}

#[test]
fn perturbed_reference_fails_one_cell() {
    let report = run_pipeline(&CodedDataset::bundled(), &AnalysisConfig::default()).unwrap();
    let text = fixture::REFERENCE_CSV.replace(
        "effect_size,Habit,r,0.296,",
        "effect_size,Habit,r,1.296,",
    );
    let cmp = compare(&report, &parse_reference(&text).unwrap(), false);
    assert!(!cmp.passed());
    assert_eq!(cmp.failures().count(), 1);
}

#[test]
fn missing_cell_fails() {
    let config = AnalysisConfig {
        factors: Some([Factor::Habit].into_iter().collect()),
        ..AnalysisConfig::default()
    };
    let report = run_pipeline(&CodedDataset::bundled(), &config).unwrap();
    assert_eq!(report.per_factor.len(), 1);
    let cmp = compare(&report, &parse_reference(fixture::REFERENCE_CSV).unwrap(), false);
    assert!(cmp.count(Status::Missing) > 0);
    assert!(!cmp.passed());
}
