mod common;

use edgefreq_core::anomaly::{
    anomaly_experiment_instance, generate_scenario, inject, networked_profile, rule_detect, run_detector, score,
    xz_check, DetectorConfig, Label, ManipulationSpec, ScenarioMode, ScenarioSpec, VerdictMode, STANDARD_THRESHOLDS,
};
use edgefreq_core::instances::Instance;
use edgefreq_core::kkt::reference_solve;
use edgefreq_core::optim::{admm_step, AdmmState, SolverConfig};
use edgefreq_core::trace::Phase;
use edgefreq_core::utility::presets;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn in_process() -> ScenarioMode {
    ScenarioMode::InProcess(SolverConfig::default())
}

/// Runs `pre` clean rounds, applies `spec`, runs `post` more; returns the z rows.
fn manipulated_stream(base: &Instance, spec: &ManipulationSpec, pre: usize, post: usize) -> Vec<Vec<f64>> {
    let cfg = SolverConfig::default();
    let attacked = inject(spec, base).unwrap();
    let mut state = AdmmState::initial(&base.budget);
    (0..pre + post)
        .map(|t| {
            let p = if t < pre { base } else { &attacked };
            admm_step(&mut state, &p.functions, &p.budget, &cfg).unwrap().z
        })
        .collect()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows[0].len();
    (0..n).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64).collect()
}

#[test]
fn input_shift_demo_matches_oracle_and_detector_thresholds() {
    let base = anomaly_experiment_instance();
    let spec = ManipulationSpec::input_only(0, -2.0);
    let before = reference_solve(&base.functions, &base.budget).unwrap().x;
    let attacked = inject(&spec, &base).unwrap();
    let after = reference_solve(&attacked.functions, &attacked.budget).unwrap().x;

    let change: Vec<f64> = before.iter().zip(&after).map(|(b, a)| 100.0 * (a - b) / b).collect();
    assert!(change[0] > 0.0 && change[1] < 0.0 && change[2] < 0.0, "{change:?}");
    for (got, quoted) in change.iter().zip([94.0, -35.0, -12.0]) {
        assert!((got - quoted).abs() <= 10.0, "{change:?}");
    }

    let z = manipulated_stream(&base, &spec, 100, 200);
    let last = z.last().unwrap();
    for (a, b) in last.iter().zip(&after) {
        assert!((a - b).abs() < 1e-3, "{last:?} vs {after:?}");
    }
    let z_normal = mean_rows(&z[80..100]);
    let gamma = base.budget.gamma();
    let at10 = rule_detect(&z, &z_normal, gamma, 0.10, VerdictMode::AnyAlarm).unwrap();
    let at50 = rule_detect(&z, &z_normal, gamma, 0.50, VerdictMode::AnyAlarm).unwrap();
    // the start-up transient is not part of the normal stream
    assert!(at10[80..100].iter().chain(&at50[80..100]).all(|v| v.predicted == 0));
    for v in &at10[250..] {
        assert_eq!(v.alarms, vec![true, true, true], "iteration {}", v.iteration);
    }
    for v in &at50[100..] {
        assert!(!v.alarms[1] && !v.alarms[2], "iteration {}: {:?}", v.iteration, v.deviation);
    }
    assert!(at50[250..].iter().all(|v| v.alarms[0]));
}

#[test]
fn slack_systemic_changes_are_invisible() {
    // the sufficient-resource pair: x* = (1, 4), sum 5 <= 10 and 2 + 12 = 14 <= 15
    let base = Instance { functions: presets::allocation_set()[..2].to_vec(), budget: common::two_device() };
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..50 {
        let spec = ManipulationSpec::systemic(Some(rng.random_range(-3.0..=3.0)), Some(rng.random_range(-0.9..=5.0)));
        let z = manipulated_stream(&base, &spec, 150, 150);
        let settled = &z[149];
        let drift = z[150..].iter().flat_map(|r| r.iter().zip(settled).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max);
        assert!(drift <= 1e-4, "{spec:?}: drift {drift}");
        let alarms = rule_detect(&z[150..], settled, base.budget.gamma(), 0.01, VerdictMode::AnyAlarm).unwrap();
        assert!(alarms.iter().all(|v| v.predicted == 0));
    }
}

#[test]
fn campaigns_are_reproducible() {
    let base = anomaly_experiment_instance();
    let spec = ScenarioSpec { labels: Label::ALL.to_vec(), ..Default::default() };
    let a = generate_scenario(99, 3600, &base, &spec, &in_process()).unwrap();
    let b = generate_scenario(99, 3600, &base, &spec, &in_process()).unwrap();
    assert_eq!(a.trace.to_text(), b.trace.to_text());
    assert_eq!(a.phases, b.phases);
    let c = generate_scenario(100, 3600, &base, &spec, &in_process()).unwrap();
    assert_ne!(a.trace.to_text(), c.trace.to_text());

    let (gateway, profile) = networked_profile(3);
    let mode = ScenarioMode::Networked { gateway, profile };
    let a = generate_scenario(99, 600, &base, &spec, &mode).unwrap();
    let b = generate_scenario(99, 600, &base, &spec, &mode).unwrap();
    assert_eq!(a.trace.to_text(), b.trace.to_text());
}

#[test]
fn single_label_mix_labels_every_attack() {
    let s = generate_scenario(1, 3600, &anomaly_experiment_instance(), &ScenarioSpec::only(Label::InputOnly), &in_process())
        .unwrap();
    let labels = s.trace.labels();
    assert!(labels.iter().all(|l| *l == 0 || *l == 3));
    assert!(s.phases.iter().filter(|p| p.phase == Phase::Anomalous).all(|p| p.label == Label::InputOnly));
    assert!(labels.iter().filter(|l| **l == 3).count() > 800);
}

#[test]
fn all_normal_campaign_raises_nothing() {
    let spec = ScenarioSpec { labels: vec![], ..Default::default() };
    let s = generate_scenario(4, 3600, &anomaly_experiment_instance(), &spec, &in_process()).unwrap();
    assert!(s.trace.labels().iter().all(|l| *l == 0));
    for tau in STANDARD_THRESHOLDS {
        let v = run_detector(&s.trace, &s.resets, &DetectorConfig::default().with_threshold(tau)).unwrap();
        let p: Vec<u8> = v.iter().map(|v| v.predicted).collect();
        assert!(v.iter().all(|v| v.alarms.iter().all(|a| !a)));
        assert_eq!(score(&p, &s.trace.labels(), 2).unwrap().accuracy, 1.0);
    }
}

/// Pearson statistic against the discrete uniform on `lo..=hi`.
fn chi_square_uniform(samples: &[u64], lo: u64, hi: u64) -> f64 {
    let bins = (hi - lo + 1) as usize;
    let mut counts = vec![0usize; bins];
    for s in samples {
        counts[(s - lo) as usize] += 1;
    }
    let expected = samples.len() as f64 / bins as f64;
    counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum()
}

#[test]
fn phase_lengths_are_uniform() {
    // 99th percentile of chi-square with 20 degrees of freedom
    const CRITICAL_DF20_P01: f64 = 37.566;
    let base = anomaly_experiment_instance();
    let (mut normal, mut attack) = (Vec::new(), Vec::new());
    for seed in 0..100 {
        let s = generate_scenario(seed, 3600, &base, &ScenarioSpec::default(), &in_process()).unwrap();
        // the final phase is cut off by the run length
        for p in &s.phases[..s.phases.len() - 1] {
            match p.phase {
                Phase::Normal => normal.push(p.len),
                Phase::Anomalous => attack.push(p.len),
            }
        }
    }
    assert!(normal.len() > 1500 && attack.len() > 1500);
    let (cn, ca) = (chi_square_uniform(&normal, 100, 120), chi_square_uniform(&attack, 50, 70));
    assert!(cn < CRITICAL_DF20_P01, "normal phases chi2 = {cn}");
    assert!(ca < CRITICAL_DF20_P01, "attack phases chi2 = {ca}");
}

#[test]
fn remediated_normal_phases_are_quiet() {
    let base = anomaly_experiment_instance();
    for label in [Label::FunctionAndInput, Label::DataSize, Label::InputOnly] {
        let s = generate_scenario(8, 3600, &base, &ScenarioSpec::only(label), &in_process()).unwrap();
        let first_attack = s.phases[1].start as usize;
        for tau in STANDARD_THRESHOLDS {
            let cfg = DetectorConfig { threshold: tau, mode: VerdictMode::AnyAlarm, ..Default::default() };
            let v = run_detector(&s.trace, &s.resets, &cfg).unwrap();
            for p in s.phases.iter().skip(2).filter(|p| p.phase == Phase::Normal) {
                let rows = &v[p.start as usize..(p.start + p.len) as usize];
                assert!(rows.iter().all(|r| r.predicted == 0), "label {label:?} tau {tau} phase at {}", p.start);
            }
            assert!(v[..first_attack].iter().skip(100).all(|r| r.predicted == 0));
        }
    }
}

#[test]
fn xz_check_is_quiet_on_settled_normal_rows() {
    let s = generate_scenario(2, 1200, &anomaly_experiment_instance(), &ScenarioSpec::only(Label::InputOnly), &in_process())
        .unwrap();
    for p in s.phases.iter().skip(2).filter(|p| p.phase == Phase::Normal) {
        for t in p.start as usize..(p.start + p.len) as usize {
            assert!(xz_check(&s.x[t], &s.trace.rows()[t].z, 1e-2).iter().all(|f| !f), "row {t}");
        }
    }
    // the attacked device's x runs ahead of consensus right after the shift
    let attack = s.phases[1].start as usize;
    assert!(xz_check(&s.x[attack], &s.trace.rows()[attack].z, 1e-2)[0]);
}

#[test]
fn label_one_beats_label_two_at_one_percent() {
    let base = anomaly_experiment_instance();
    let accuracy = |label| {
        let s = generate_scenario(21, 3600, &base, &ScenarioSpec::only(label), &in_process()).unwrap();
        let v = run_detector(&s.trace, &s.resets, &DetectorConfig::default().with_threshold(0.01)).unwrap();
        let p: Vec<u8> = v.iter().map(|v| v.predicted).collect();
        score(&p, &s.trace.labels(), 2).unwrap().accuracy
    };
    let (a1, a2) = (accuracy(Label::FunctionAndInput), accuracy(Label::DataSize));
    assert!(a1 >= 0.95, "{a1}");
    assert!(a2 < a1 - 0.15, "{a2} vs {a1}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn alarm_sets_shrink_as_threshold_grows(seed in 0u64..1000, label in 0u8..4, networked in any::<bool>()) {
        let base = anomaly_experiment_instance();
        let mode = if networked {
            let (gateway, profile) = networked_profile(seed);
            ScenarioMode::Networked { gateway, profile }
        } else {
            in_process()
        };
        let spec = ScenarioSpec::only(Label::try_from(label).unwrap());
        let s = generate_scenario(seed, 900, &base, &spec, &mode).unwrap();
        let mut prev: Option<Vec<Vec<bool>>> = None;
        for tau in STANDARD_THRESHOLDS {
            let v = run_detector(&s.trace, &s.resets, &DetectorConfig::default().with_threshold(tau)).unwrap();
            let alarms: Vec<Vec<bool>> = v.into_iter().map(|v| v.alarms).collect();
            if let Some(lower) = &prev {
                for (hi, lo) in alarms.iter().zip(lower) {
                    for (h, l) in hi.iter().zip(lo) {
                        prop_assert!(!h || *l);
                    }
                }
            }
            prev = Some(alarms);
        }
    }
}
