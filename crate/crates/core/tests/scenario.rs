use smtfl_core::adversary::AdversaryKind;
use smtfl_core::sim::{
    emit_metrics, run_scenario, simulate, Environment, RunMetrics, RunMode, ScenarioConfig,
    EPOCH_CSV, SCHEMA_VERSION, SUMMARY_JSON, TIMINGS_JSON,
};

fn small(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        seed,
        num_client: 15,
        epoch_global: 12,
        test_size: 600,
        ..ScenarioConfig::default()
    }
}

#[test]
fn no_malicious_clients_means_defended_equals_no_attack() {
    let config = ScenarioConfig {
        malicious_fraction: 0.0,
        ..small(3)
    };
    let m = run_scenario(&config).unwrap();
    assert!(m.malicious.is_empty());
    assert_eq!(m.acc_defended, m.acc_no_attack);
    assert_eq!(m.acc_attacked, m.acc_no_attack);
    assert_eq!(m.acc_loc, 1.0);
    assert_eq!(m.epochs_to_last_eviction, 0);
}

#[test]
fn clients_are_conserved_at_every_epoch() {
    let config = small(8);
    let env = Environment::build(&config).unwrap();
    for mode in [RunMode::NoAttack, RunMode::Attacked, RunMode::Defended] {
        let outcome = simulate(&env, mode, None).unwrap();
        let mut evicted = 0;
        for e in &outcome.epochs {
            let grouped = 3 * (e.accepted_groups + e.rejected_groups);
            // Eviction happens after grouping, so this epoch's evictions were still grouped.
            assert_eq!(
                evicted + grouped + e.excluded_clients,
                config.num_client,
                "{mode:?} epoch {}",
                e.epoch
            );
            evicted += e.evictions;
            assert_eq!(e.active_clients + evicted, config.num_client);
        }
    }
}

#[test]
fn defence_beats_the_attack_and_tracks_clean_retraining() {
    for seed in 0..3 {
        let config = small(seed);
        let m = run_scenario(&config).unwrap();
        assert!(m.acc_defended >= m.acc_attacked, "seed {seed}: {m:?}");
        assert!(
            m.surviving.is_empty(),
            "seed {seed}: survivors {:?}",
            m.surviving
        );

        let env = Environment::build(&config).unwrap();
        let clean = simulate(&env, RunMode::CleanRetrain, None).unwrap();
        assert!(
            (clean.final_accuracy() - m.acc_defended).abs() <= 0.02,
            "seed {seed}: clean {} defended {}",
            clean.final_accuracy(),
            m.acc_defended
        );
    }
}

#[test]
fn summary_roundtrips_and_csv_shape_is_fixed() {
    let m = run_scenario(&small(4)).unwrap();
    assert_eq!(m.schema_version, SCHEMA_VERSION);
    assert_eq!(RunMetrics::from_json(&m.to_json()).unwrap(), m);
    let csv = String::from_utf8(m.epochs_csv().unwrap()).unwrap();
    let widths: Vec<usize> = csv.lines().map(|l| l.split(',').count()).collect();
    assert_eq!(widths.len(), 13);
    assert!(widths.iter().all(|&w| w == 6));
}

#[test]
fn emitted_files_are_reproducible() {
    let config = small(6);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    emit_metrics(&run_scenario(&config).unwrap(), None, a.path()).unwrap();
    emit_metrics(&run_scenario(&config).unwrap(), None, b.path()).unwrap();
    for name in [EPOCH_CSV, SUMMARY_JSON] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap()
        );
    }
    assert!(!a.path().join(TIMINGS_JSON).exists());
}

#[test]
fn label_flipping_and_gradient_ascent_run_end_to_end() {
    for adversary in [
        AdversaryKind::LabelFlip {
            permutation_seed: None,
        },
        AdversaryKind::GradAscent { multiplier: -4.0 },
    ] {
        let config = ScenarioConfig {
            adversary,
            ..small(2)
        };
        let m = run_scenario(&config).unwrap();
        assert_eq!(m.epochs.len(), 12);
        assert!(
            m.acc_defended >= m.acc_attacked - 0.05,
            "{adversary:?}: {m:?}"
        );
    }
}

#[test]
fn different_seeds_change_the_outcome() {
    let a = run_scenario(&small(1)).unwrap();
    let b = run_scenario(&small(2)).unwrap();
    assert_ne!(a.malicious, b.malicious);
    assert_ne!(a.to_json(), b.to_json());
}
