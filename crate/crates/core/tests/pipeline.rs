use antkit::llm::{FaultMode, FaultPlan};
use antkit::pipeline::*;
use antkit::RenderingMode;

fn cycle_config(dir: &std::path::Path, name: &str, approach: Approach) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        data: DataConfig {
            synthetic: Some(SyntheticData {
                grammar: SyntheticGrammar::cycle(6, 6, 7, 3).unwrap(),
                n_videos: 10,
                video_len: 30,
                test_fraction: 0.2,
                train_label_noise: 0.0,
            }),
            ..Default::default()
        },
        n_seg: 4,
        z: 6,
        k: 3,
        approach,
        output_dir: dir.to_path_buf(),
        ..Default::default()
    }
}

#[test]
fn bottom_up_ngram_learns_the_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&cycle_config(dir.path(), "ngram", Approach::BottomUpLocal), None).unwrap();
    let ed = out.report.ed.unwrap();
    assert_eq!((ed.verb_ed, ed.noun_ed, ed.action_ed), (0.0, 0.0, 0.0));
    for f in ["manifest.json", "report.json", "predictions.jsonl", "model.ngram.json"] {
        assert!(out.dir.join(f).is_file(), "{f}");
    }
    let model = LocalModel::load(&out.dir.join("model.ngram.json")).unwrap();
    assert!(matches!(model, LocalModel::Ngram(_)));
}

#[test]
fn rendering_does_not_affect_local_models() {
    let dir = tempfile::tempdir().unwrap();
    let mut noisy = cycle_config(dir.path(), "canon", Approach::BottomUpLocal);
    noisy.recognition_noise = 0.3;
    let a = run_experiment(&noisy, None).unwrap().report.ed;
    noisy.name = "shuffled".into();
    noisy.rendering = RenderingMode::Shuffled { seed: 9 };
    let b = run_experiment(&noisy, None).unwrap().report.ed;
    assert_eq!(a, b);
}

#[test]
fn oracle_icl_closes_the_loop() {
    let dir = tempfile::tempdir().unwrap();
    for approach in [Approach::LlmIcl, Approach::LlmCot] {
        let out = run_experiment(&cycle_config(dir.path(), &format!("{approach:?}"), approach), None).unwrap();
        let ed = out.report.ed.unwrap();
        assert_eq!(ed.action_ed, 0.0, "{approach:?}");
        let incidents = out.report.incidents.unwrap();
        for (k, v) in incidents.as_object().unwrap() {
            if k != "completions" {
                assert_eq!(v.as_f64(), Some(0.0), "{approach:?} {k}");
            }
        }
        assert!(out.dir.join("prompts").read_dir().unwrap().next().is_some());
        if approach == Approach::LlmCot {
            assert_eq!(out.report.goal_accuracy, Some(1.0));
        }
    }
}

#[test]
fn planted_faults_are_counted_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cycle_config(dir.path(), "faulty", Approach::LlmIcl);
    let rates = vec![
        (FaultMode::ShortSeq, 0.1),
        (FaultMode::LongSeq, 0.2),
        (FaultMode::InvalidSeq, 0.1),
        (FaultMode::InvalidVerb, 0.05),
        (FaultMode::InvalidNoun, 0.15),
    ];
    cfg.llm.backend =
        LlmBackendConfig::Mock(MockBehavior::Faulty { plan: FaultPlan { rates: rates.clone(), seed: 1 } });
    let out = run_experiment(&cfg, None).unwrap();
    let incidents = out.report.incidents.unwrap();
    let total = incidents["completions"].as_u64().unwrap() as f64;
    for (mode, rate) in rates {
        let name = mode.incident().unwrap().name();
        let expected = 100.0 * (total * rate).round() / total;
        assert!((incidents[name].as_f64().unwrap() - expected).abs() < 1e-9, "{name}");
    }
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cycle_config(dir.path().join("a").as_path(), "run", Approach::LlmIcl);
    cfg.recognition_noise = 0.2;
    cfg.llm.cache = Some("cache.jsonl".into());
    let first = run_experiment(&cfg, None).unwrap();
    let second = rerun_from_manifest(&first.dir.join("manifest.json"), &dir.path().join("b"), None).unwrap();
    for f in ["report.json", "predictions.jsonl", "incidents.json"] {
        assert_eq!(std::fs::read(first.dir.join(f)).unwrap(), std::fs::read(second.dir.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn top_down_with_inferred_goals() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cycle_config(dir.path(), "td", Approach::TopDownLocal);
    cfg.goal_source = GoalSource::Llm;
    let out = run_experiment(&cfg, None).unwrap();
    assert_eq!(out.report.goal_accuracy, Some(1.0));
    assert_eq!(out.report.ed.unwrap().action_ed, 0.0);
}

#[test]
fn finetune_export_writes_both_splits() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cycle_config(dir.path(), "ft", Approach::LlmFinetuneExport);
    cfg.llm.teacher_forcing_mix = antkit::llm::TeacherForcingMix::Both;
    let out = run_experiment(&cfg, None).unwrap();
    let n = out.report.exported_samples.unwrap();
    let lines: usize = ["finetune_train.jsonl", "finetune_test.jsonl"]
        .iter()
        .map(|f| std::fs::read_to_string(out.dir.join(f)).unwrap().lines().count())
        .sum();
    assert_eq!(n, lines);
    assert_eq!(n, 2 * (out.report.n_train_instances + out.report.n_test_instances));
}

#[test]
fn bad_data_config_is_a_config_error() {
    let cfg = ExperimentConfig::default();
    assert_eq!(run_experiment(&cfg, None).unwrap_err().class(), antkit::ErrorClass::Config);
}

#[test]
fn counterfactual_swaps_change_mock_answers() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cycle_config(dir.path(), "cf", Approach::LlmIcl);
    cfg.data.synthetic.as_mut().unwrap().grammar = SyntheticGrammar::goal_determined(8, 8, 3, 4, 4, 3, 2).unwrap();
    cfg.data.synthetic.as_mut().unwrap().n_videos = 20;
    let (dir, report) = run_counterfactual_experiment(&cfg, None).unwrap();
    assert!(dir.join("counterfactual.json").is_file());
    assert!(!report.records.is_empty());
    assert!(report.records.iter().all(|r| r.goal_a != r.goal_b && r.divergence > 0.0));
}

#[test]
fn alternative_goal_rotates() {
    let known = ["b", "a", "c", "a"].map(String::from);
    assert_eq!(alternative_goal(&known, "a"), "b");
    assert_eq!(alternative_goal(&known, "c"), "a");
    assert_eq!(alternative_goal(&known, "zzz"), "a");
}
