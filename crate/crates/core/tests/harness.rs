use std::fs;
use std::path::Path;

use thor::data::Split;
use thor::harness::{
    analyze_routing, analyze_telemetry, eval, gen_data, presets, read_jsonl, sweep_alpha, train,
    train_in_memory, variance, Checkpoint, EvalRequest, RunConfig, ValidationRecord, METRICS_FILE,
    RUN_ROOT_ENV, TELEMETRY_FILE,
};
use thor::inference::{DecodeConfig, InferenceMode};
use thor::routing::RoutingTelemetry;
use thor::training::{LossBreakdown, Objective};
use thor::Error;

/// A preset cut down to a few seconds of training.
fn quick(name: &str, dir: &Path) -> RunConfig {
    let mut c = presets::find(name).unwrap().config;
    c.run_dir = dir.to_path_buf();
    c.model.d_model = 16;
    c.model.d_head = 8;
    c.model.d_ff = 32;
    c.task.train_size = 40;
    c.task.valid_size = 10;
    c.task.test_size = 10;
    c.training.total_steps = 40;
    c.training.warmup_steps = 10;
    c.training.batch_tokens = 96;
    c.telemetry_interval = 10;
    c.validate_interval = 20;
    c
}

#[test]
fn every_preset_validates_and_round_trips() {
    for p in presets::all() {
        p.config.validate().unwrap();
        let text = p.config.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, p.config, "{}", p.name);
        assert_eq!(back.to_toml().unwrap(), text);
    }
    assert!(presets::find("no-such-preset").is_err());
}

#[test]
fn overrides_name_the_offending_field() {
    let mut c = presets::find("thor-tiny-cipher").unwrap().config;
    c.apply_overrides([("training.alpha", "2.5"), ("experts.n_experts", "4")])
        .unwrap();
    assert_eq!(c.training.alpha, 2.5);
    assert_eq!(c.experts.n_experts, 4);
    let err = c.apply_overrides([("training.alpha", "-1")]).unwrap_err();
    assert!(matches!(&err, Error::Config { path, .. } if path == "training.alpha"), "{err}");
    let err = c.set("training.no_such_field", "1").unwrap_err();
    assert!(err.to_string().contains("training.no_such_field"), "{err}");
    let mut c = presets::find("switch-no-balance").unwrap().config;
    assert!(c.apply_overrides([("training.objective", "thor_full")]).is_err());
}

#[test]
fn saved_config_files_reload_identically() {
    let dir = tempfile::tempdir().unwrap();
    let c = presets::find("gated-top2").unwrap().config;
    let path = dir.path().join("config.toml");
    c.save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), c);
}

#[test]
fn checkpoints_round_trip_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let c = quick("thor-tiny-cipher", dir.path());
    train(&c, None).unwrap();
    let path = dir.path().join("final.ckpt");
    let bytes = fs::read(&path).unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ck.to_bytes().unwrap(), bytes);
    assert_eq!(ck.step, 40);
    let again = dir.path().join("again.ckpt");
    Checkpoint::load(&path).unwrap().save(&again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), bytes);
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"NOT-A-CHECKPOINT\n").is_err());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let root = tempfile::tempdir().unwrap();
    let full_dir = root.path().join("full");
    let part_dir = root.path().join("part");
    let full = quick("thor-tiny-cipher", &full_dir);
    let full_out = train(&full, None).unwrap();

    let mut first = full.clone();
    first.run_dir = part_dir.clone();
    first.training.total_steps = 25;
    train(&first, None).unwrap();
    let mut rest = full.clone();
    rest.run_dir = part_dir.clone();
    let resumed = train(&rest, Some(&part_dir.join("final.ckpt"))).unwrap();

    for ((_, a), (_, b)) in full_out
        .trainer
        .model
        .store
        .iter()
        .zip(resumed.trainer.model.store.iter())
    {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    for file in [METRICS_FILE, TELEMETRY_FILE] {
        assert_eq!(
            fs::read(full_dir.join(file)).unwrap(),
            fs::read(part_dir.join(file)).unwrap(),
            "{file}"
        );
    }
    let a: Vec<LossBreakdown> = read_jsonl(&full_dir.join(METRICS_FILE)).unwrap();
    let b: Vec<LossBreakdown> = read_jsonl(&part_dir.join(METRICS_FILE)).unwrap();
    assert_eq!(a, b);
    let a: Vec<RoutingTelemetry> = read_jsonl(&full_dir.join(TELEMETRY_FILE)).unwrap();
    let b: Vec<RoutingTelemetry> = read_jsonl(&part_dir.join(TELEMETRY_FILE)).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(full_dir.join("final.ckpt")).unwrap(),
        fs::read(part_dir.join("final.ckpt"))
            .map(|bytes| {
                let mut ck = Checkpoint::from_bytes(&bytes).unwrap();
                ck.config.run_dir = full_dir.clone();
                ck.to_bytes().unwrap()
            })
            .unwrap()
    );
}

#[test]
fn resuming_with_a_different_model_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let c = quick("thor-tiny-cipher", dir.path());
    train(&c, None).unwrap();
    let mut other = c.clone();
    other.training.alpha = 1.0;
    assert!(train(&other, Some(&dir.path().join("final.ckpt"))).is_err());
}

#[test]
fn run_directory_holds_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let c = quick("switch-with-balance", dir.path());
    let out = train(&c, None).unwrap();
    for f in [
        "config.toml",
        "metrics.jsonl",
        "telemetry.jsonl",
        "validation.jsonl",
        "best.ckpt",
        "final.ckpt",
        "data/train.src",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let v: Vec<ValidationRecord> = read_jsonl(&dir.path().join("validation.jsonl")).unwrap();
    assert_eq!(v.iter().map(|r| r.step).collect::<Vec<_>>(), vec![20, 40]);
    assert_eq!(out.telemetry.len(), 4 * 2);
    let best = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(best.best_bleu, out.best_bleu);
}

#[test]
fn every_logged_step_composes_its_total() {
    let c = quick("thor-tiny-cipher", Path::new("unused"));
    let out = train_in_memory(&c).unwrap();
    assert_eq!(out.losses.len(), 40);
    for d in &out.losses {
        assert!((d.total - (d.ce1 + d.ce2 + c.training.alpha * d.cr)).abs() <= 1e-9);
        assert!(d.cr >= -1e-9);
    }
}

#[test]
fn self_test_scores_a_perfect_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let c = quick("thor-experts-4", dir.path());
    train(&c, None).unwrap();
    let ckpt = dir.path().join("final.ckpt");
    let req = |mode, self_test| EvalRequest {
        checkpoint: &ckpt,
        config: None,
        decode: Some(DecodeConfig {
            mode,
            beam_size: 1,
            ..c.decode.clone()
        }),
        split: Split::Test,
        self_test,
    };
    let r = eval(&req(InferenceMode::DispatchSentence, true)).unwrap();
    assert_eq!(r.bleu, 100.0);
    assert_eq!(r.exact_match, 1.0);
    let d = eval(&req(InferenceMode::DispatchSentence, false)).unwrap();
    let e = eval(&req(InferenceMode::Ensemble, false)).unwrap();
    assert_eq!(e.expert_flops, 4 * d.expert_flops);
    assert_eq!(d.sentences, 10);
}

#[test]
fn evaluating_with_a_mismatched_model_fails() {
    let dir = tempfile::tempdir().unwrap();
    let c = quick("thor-tiny-cipher", dir.path());
    train(&c, None).unwrap();
    let mut wrong = c.clone();
    wrong.model.d_ff = 48;
    let ckpt = dir.path().join("final.ckpt");
    let req = EvalRequest {
        checkpoint: &ckpt,
        config: Some(&wrong),
        decode: None,
        split: Split::Valid,
        self_test: false,
    };
    assert!(matches!(eval(&req), Err(Error::Checkpoint(_))));
    let mut fewer = c.clone();
    fewer.experts.n_experts = 3;
    let req = EvalRequest {
        config: Some(&fewer),
        ..req
    };
    assert!(matches!(eval(&req), Err(Error::Checkpoint(_))));
}

#[test]
fn random_routing_is_flagged_and_collapse_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let c = quick("switch-random", dir.path());
    train(&c, None).unwrap();
    let a = analyze_routing(dir.path(), 3, 0.05).unwrap();
    assert_eq!(a.layers.len(), 2);
    for l in &a.layers {
        assert!(!l.collapsed);
        assert!(!l.random_routing, "gateless routing reports no confidences");
    }
    assert!(a.table.lines().count() > 1);

    let record = |step, loads: Vec<f64>, conf: Vec<Option<f64>>| RoutingTelemetry {
        step,
        layer: 0,
        loads,
        confidences: conf,
    };
    let collapsed: Vec<_> = (1..=4)
        .map(|s| record(s, vec![0.95, 0.05], vec![Some(0.51), Some(0.52)]))
        .collect();
    let a = analyze_telemetry(&collapsed, 3, 0.05).unwrap();
    assert!(a.layers[0].collapsed && a.layers[0].random_routing);
    let blip = vec![
        record(1, vec![0.95, 0.05], vec![Some(0.9), None]),
        record(2, vec![0.5, 0.5], vec![Some(0.9), Some(0.7)]),
        record(3, vec![0.95, 0.05], vec![Some(0.9), None]),
    ];
    let a = analyze_telemetry(&blip, 2, 0.05).unwrap();
    assert!(!a.layers[0].collapsed && !a.layers[0].random_routing);

    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        analyze_routing(empty.path(), 3, 0.05),
        Err(Error::MissingTelemetry(_))
    ));
}

#[test]
fn alpha_sweep_reports_one_row_per_value() {
    let mut base = quick("thor-tiny-cipher", Path::new("unused"));
    base.training.total_steps = 20;
    let rows = sweep_alpha(&base, &[0.0, 3.0], false).unwrap();
    assert_eq!(rows.iter().map(|r| r.alpha).collect::<Vec<_>>(), vec![0.0, 3.0]);
    let mut ablation = base.clone();
    ablation.training.objective = Objective::Ce1Ce2;
    let v = *train_in_memory(&ablation).unwrap().final_validation().unwrap();
    assert_eq!((rows[0].bleu, rows[0].exact_match), (v.bleu, v.exact_match));
    assert!(sweep_alpha(&base, &[], false).is_err());
}

#[test]
fn single_expert_checkpoint_has_zero_variance() {
    let dir = tempfile::tempdir().unwrap();
    let c = quick("thor-experts-1", dir.path());
    train(&c, None).unwrap();
    let r = variance(&dir.path().join("final.ckpt"), &[0, 1, 2], Split::Valid, None).unwrap();
    assert_eq!(r.variance, 0.0);
    assert_eq!(r.scores.len(), 3);
}

#[test]
fn generated_data_is_written_as_parallel_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = presets::cipher_task(3);
    let ds = gen_data(&spec, dir.path()).unwrap();
    for split in ["train", "valid", "test"] {
        for side in ["src", "tgt"] {
            let text = fs::read_to_string(dir.path().join(format!("{split}.{side}"))).unwrap();
            let expected = match split {
                "train" => ds.train.len(),
                "valid" => ds.valid.len(),
                _ => ds.test.len(),
            };
            assert_eq!(text.lines().count(), expected);
        }
    }
}

#[test]
fn relative_run_directories_honor_the_run_root() {
    let root = tempfile::tempdir().unwrap();
    std::env::set_var(RUN_ROOT_ENV, root.path());
    let c = quick("vanilla-tiny-copy", Path::new("relative-run"));
    let mut c = c;
    c.training.total_steps = 5;
    c.validate_interval = 5;
    let result = train(&c, None);
    std::env::remove_var(RUN_ROOT_ENV);
    result.unwrap();
    assert!(root.path().join("relative-run/final.ckpt").exists());
}
