use floquet_ris::estimation::OptimizerConfig;
use floquet_ris::eval::{experiment_fig3, experiment_fig4, experiment_table1, ExperimentConfig, Fig3Table, ModelKind};
use floquet_ris::measurement::MeasurementMode;
use floquet_ris::scenario::ScenarioConfig;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        scenario: ScenarioConfig {
            gt_harmonics: 5,
            retained_harmonics: 3,
            n_t: 2,
            n_r: 2,
            n_s: 3,
            n_states: 4,
            ..Default::default()
        },
        replicates: 2,
        optimizer: OptimizerConfig {
            iterations: 60,
            lr_start: 1e-2,
            ..Default::default()
        },
        eval_patterns: 12,
        k_list: vec![2, 6],
        snr_list: vec![Some(26.0), None],
        modes: vec![MeasurementMode::M1, MeasurementMode::M3],
        k_cal: 6,
        snr_cal_db: Some(26.0),
        q_eval: vec![1, 3],
        restarts: 2,
        ..Default::default()
    }
}

#[test]
fn fig3_emits_every_cell_in_key_order() {
    let cfg = tiny();
    let t = experiment_fig3(&cfg).unwrap();
    assert_eq!(t.rows.len(), 2 * 2 * 2 * 2 * 2);
    let keys: Vec<_> = t
        .rows
        .iter()
        .map(|r| (r.replicate, r.k, r.snr_db.is_none(), r.mode.name(), !r.mc_aware))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(keys, sorted);
    assert!(t.rows.iter().all(|r| r.outcome.is_ok()));

    let csv = t.to_csv();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    assert_eq!(reader.headers().unwrap().iter().collect::<Vec<_>>(), Fig3Table::HEADER);
    let records: Vec<_> = reader.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), t.rows.len());
    assert!(records.iter().any(|r| &r[3] == "noiseless"));
    assert!(records.iter().all(|r| &r[13] == "ok" && r[14].is_empty()));
    for r in &records {
        r[7].parse::<f64>().unwrap();
    }
}

#[test]
fn experiments_are_deterministic() {
    let cfg = tiny();
    assert_eq!(
        experiment_fig3(&cfg).unwrap().to_csv(),
        experiment_fig3(&cfg).unwrap().to_csv()
    );
    assert_eq!(
        experiment_table1(&cfg).unwrap().to_csv(),
        experiment_table1(&cfg).unwrap().to_csv()
    );
}

#[test]
fn fig4_at_the_calibration_period_matches_fig3() {
    let mut cfg = tiny();
    cfg.k_list = vec![cfg.k_cal];
    cfg.snr_list = vec![cfg.snr_cal_db];
    cfg.modes = vec![cfg.mode_cal];
    cfg.q_eval = vec![cfg.q_cal];
    let f3 = experiment_fig3(&cfg).unwrap();
    let f4 = experiment_fig4(&cfg).unwrap();
    assert_eq!(f3.rows.len(), f4.rows.len());
    for (a, b) in f3.rows.iter().zip(&f4.rows) {
        assert_eq!((a.replicate, a.mc_aware), (b.replicate, b.mc_aware));
        let (a, b) = (a.outcome.as_ref().unwrap(), b.outcome.as_ref().unwrap());
        assert!((a.zeta_aligned_db - b.zeta_aligned_db).abs() < 0.1);
        assert!((a.zeta_unaligned_db - b.zeta_unaligned_db).abs() < 0.1);
    }
}

#[test]
fn unaligned_proxies_are_accurate_only_for_static_patterns() {
    let t = experiment_fig4(&tiny()).unwrap();
    // without coupling the proxies are wrong even for static patterns
    for r in t.rows.iter().filter(|r| r.q_eval == 1 && r.mc_aware) {
        let at3 = t
            .rows
            .iter()
            .find(|o| o.replicate == r.replicate && o.mc_aware == r.mc_aware && o.q_eval == 3)
            .unwrap();
        let (one, three) = (r.outcome.as_ref().unwrap(), at3.outcome.as_ref().unwrap());
        assert!(
            one.zeta_unaligned_db > three.zeta_unaligned_db + 10.0,
            "{one:?} vs {three:?}"
        );
        assert!(one.zeta_truncated_gt_db.is_infinite());
    }
}

#[test]
fn table1_reports_every_model() {
    let mut cfg = tiny();
    cfg.models = vec![
        ModelKind::Gt,
        ModelKind::TruncGt,
        ModelKind::Aligned,
        ModelKind::Unaligned,
    ];
    let t = experiment_table1(&cfg).unwrap();
    // the ground truth has no coupling-unaware variant
    assert_eq!(t.rows.len(), 2 * 2 * (1 + 2 * 3));
    for r in t.rows.iter().filter(|r| r.model == ModelKind::Gt) {
        assert_eq!(r.gap_db(), Some(0.0));
    }
    // static patterns cannot convert frequency
    for r in t.rows.iter().filter(|r| r.q_eval == 1) {
        assert_eq!(r.outcome.as_ref().unwrap().true_gain_db, f64::NEG_INFINITY);
    }
    let (gain, gap) = t.medians(ModelKind::Aligned, true, 3);
    assert!(gain.is_some() && gap.is_some());
    let summary = t.to_json();
    assert!(summary.get("summary").is_some());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny();
    cfg.k_list.clear();
    assert!(experiment_fig3(&cfg).is_err());
    let mut cfg = tiny();
    cfg.replicates = 0;
    assert!(experiment_table1(&cfg).is_err());
}
