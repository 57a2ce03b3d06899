use std::fs;

use snnetc_core::config::RunConfig;
use snnetc_core::data::Dataset;
use snnetc_core::engine::{
    consistency_report, decode_checkpoint, dump_distributions, encode_checkpoint,
    eval_per_timestep, load_checkpoint, save_checkpoint, train, train_with, CheckpointError,
    EngineError, Model, TestEvaluation, Trainer,
};

const BASE: &str = "network.layers=8,12,3\nnetwork.timesteps=4\ntrain.epochs=4\n\
                    train.batch_size=16\ndata.synth.samples_per_class=20\ndata.synth.gain=1\n\
                    data.synth.drift=0.6\ndata.synth.noise=0.3\n";

fn cfg(extra: &[&str]) -> RunConfig {
    let overrides: Vec<String> = extra.iter().map(|s| s.to_string()).collect();
    RunConfig::parse(BASE, &overrides).unwrap()
}

fn data(cfg: &RunConfig) -> Dataset {
    cfg.data.load(cfg.network.timesteps).unwrap()
}

fn log_lines(cfg: &RunConfig) -> Vec<String> {
    let out = train(cfg, &data(cfg)).unwrap();
    out.metrics.iter().map(|m| m.to_json_line()).collect()
}

#[test]
fn identical_seeds_give_identical_logs_and_checkpoints() {
    let c = cfg(&[]);
    let ds = data(&c);
    let a = train(&c, &ds).unwrap();
    let b = train(&c, &ds).unwrap();
    let lines = |o: &snnetc_core::engine::TrainOutput| {
        o.metrics
            .iter()
            .map(|m| m.to_json_line())
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(lines(&a), lines(&b));
    assert_eq!(
        encode_checkpoint(&a.checkpoint),
        encode_checkpoint(&b.checkpoint)
    );

    let other = train(&cfg(&["train.seed=1"]), &ds).unwrap();
    assert_ne!(lines(&a), lines(&other));
}

#[test]
fn zero_lambda_matches_ce_only() {
    let with_etc = cfg(&["etc.lambda=0"]);
    let ce_only = cfg(&["train.loss_mode=ce_only"]);
    assert_eq!(log_lines(&with_etc), log_lines(&ce_only));
    let ds = data(&with_etc);
    assert_eq!(
        train(&with_etc, &ds).unwrap().checkpoint.params,
        train(&ce_only, &ds).unwrap().checkpoint.params
    );
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let c = cfg(&[]);
    let ds = data(&c);
    let full = train(&c, &ds).unwrap();

    let mut first = Trainer::new(c.clone()).unwrap();
    let mut log = vec![first.run_epoch(&ds).unwrap(), first.run_epoch(&ds).unwrap()];
    let bytes = encode_checkpoint(&first.checkpoint());
    drop(first);
    let mut resumed = Trainer::from_checkpoint(decode_checkpoint(&bytes).unwrap()).unwrap();
    log.extend(train_with(&mut resumed, &ds, |_, _| Ok(())).unwrap());

    assert_eq!(log, full.metrics);
    let json = |v: &[snnetc_core::engine::EpochMetrics]| {
        v.iter().map(|m| m.to_json_line()).collect::<Vec<_>>()
    };
    assert_eq!(json(&log), json(&full.metrics));
    assert_eq!(
        encode_checkpoint(&resumed.checkpoint()),
        encode_checkpoint(&full.checkpoint)
    );
}

#[test]
fn metrics_respect_loss_identity_and_ranges() {
    for mode in ["ce_plus_etc", "ce_only", "per_timestep_ce"] {
        let c = cfg(&[&format!("train.loss_mode={mode}"), "etc.lambda=0.5"]);
        let w = c.effective_etc_weight();
        for m in train(&c, &data(&c)).unwrap().metrics {
            let recomposed = m.loss_ce + w * m.loss_etc;
            assert!(
                (m.loss_total - recomposed).abs() <= 1e-12 * m.loss_total.abs().max(1.0),
                "{mode}: {} vs {recomposed}",
                m.loss_total
            );
            assert!((0.0..=1.0).contains(&m.test_acc_full_t));
            assert!(m
                .test_acc_per_eval_t
                .values()
                .all(|a| (0.0..=1.0).contains(a)));
            assert!(m.mean_pairwise_kl >= 0.0);
            assert!((0.0..=1.0).contains(&m.argmax_flip_rate));
        }
    }
    assert_eq!(
        cfg(&["train.loss_mode=ce_only"]).effective_etc_weight(),
        0.0
    );
    assert_eq!(cfg(&[]).effective_etc_weight(), 16.0);
}

#[test]
fn truncated_eval_agrees_with_logged_curve() {
    let c = cfg(&[]);
    let ds = data(&c);
    let out = train(&c, &ds).unwrap();
    let model = Model::from_checkpoint(&out.checkpoint).unwrap();
    let last = out.metrics.last().unwrap();
    for k in 1..=4 {
        assert_eq!(
            eval_per_timestep(&model, &ds.test, k).unwrap(),
            last.test_acc_per_eval_t[&k]
        );
    }
    assert_eq!(
        eval_per_timestep(&model, &ds.test, 4).unwrap(),
        last.test_acc_full_t
    );
    for bad in [0, 5] {
        assert!(matches!(
            eval_per_timestep(&model, &ds.test, bad),
            Err(EngineError::EvalRange { .. })
        ));
    }
}

#[test]
fn truncated_eval_reads_only_leading_slices() {
    let c = cfg(&[]);
    let ds = data(&c);
    let out = train(&c, &ds).unwrap();
    let model = Model::from_checkpoint(&out.checkpoint).unwrap();
    for k in 1..4 {
        let mut mutated = ds.test.clone();
        for s in &mut mutated {
            let d = s.input_dim();
            for (i, x) in s.input_seq.data_mut().iter_mut().enumerate() {
                if i / d >= k {
                    *x = 50.0 * ((i % 7) as f64 - 3.0);
                }
            }
        }
        assert_eq!(
            eval_per_timestep(&model, &ds.test, k).unwrap(),
            eval_per_timestep(&model, &mutated, k).unwrap()
        );
        let before = TestEvaluation::run(&model, &ds.test, &[k], 4.0).unwrap();
        let after = TestEvaluation::run(&model, &mutated, &[k], 4.0).unwrap();
        assert_eq!(before.accuracy_per_eval_t, after.accuracy_per_eval_t);
    }
}

#[test]
fn untrained_network_is_at_chance_on_two_classes() {
    let mut total = 0.0;
    let seeds = 20;
    for seed in 0..seeds {
        let c = RunConfig::parse(
            "network.layers=16,32,2\nnetwork.timesteps=4\ndata.synth.samples_per_class=100\n\
             data.synth.gain=2",
            &[
                format!("train.seed={seed}"),
                format!("data.synth.seed={}", seed + 100),
            ],
        )
        .unwrap();
        let ds = data(&c);
        let model = Trainer::new(c).unwrap().model();
        total += eval_per_timestep(&model, &ds.test, 4).unwrap();
    }
    let mean = total / seeds as f64;
    assert!((mean - 0.5).abs() <= 0.1, "mean untrained accuracy {mean}");
}

#[test]
fn constant_outputs_are_perfectly_consistent() {
    let c = cfg(&[
        "data.synth.gain=0",
        "data.synth.noise=0",
        "data.synth.drift=0",
    ]);
    let ds = data(&c);
    let model = Trainer::new(c).unwrap().model();
    let report = consistency_report(&model, &ds.test, 4.0, 8).unwrap();
    assert_eq!(report.mean_pairwise_kl, 0.0);
    assert_eq!(report.argmax_flip_rate, 0.0);
    assert_eq!(report.mean_distinct_argmax, 1.0);
    // No hidden spikes, so every output-weight gradient is exactly zero.
    assert_eq!(report.gradient_cosine, None);
}

#[test]
fn consistency_report_on_trained_model() {
    let c = cfg(&[]);
    let ds = data(&c);
    let out = train(&c, &ds).unwrap();
    let model = Model::from_checkpoint(&out.checkpoint).unwrap();
    let r = consistency_report(&model, &ds.test, 4.0, 16).unwrap();
    let last = out.metrics.last().unwrap();
    assert_eq!(r.mean_pairwise_kl, last.mean_pairwise_kl);
    assert_eq!(r.argmax_flip_rate, last.argmax_flip_rate);
    assert!((1.0..=4.0).contains(&r.mean_distinct_argmax));
    let cos = r.gradient_cosine.unwrap();
    assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&cos));
    assert_eq!(r.samples, ds.test.len());
}

#[test]
fn consistency_needs_two_steps() {
    let c = cfg(&["network.timesteps=1"]);
    let ds = data(&c);
    let model = Trainer::new(c).unwrap().model();
    assert!(matches!(
        consistency_report(&model, &ds.test, 4.0, 8),
        Err(EngineError::TooFewTimesteps(1))
    ));
}

#[test]
fn single_step_runs_skip_the_consistency_term() {
    let c = cfg(&["network.timesteps=1", "train.epochs=2"]);
    for m in train(&c, &data(&c)).unwrap().metrics {
        assert_eq!(m.loss_etc, 0.0);
        assert_eq!(m.loss_total, m.loss_ce);
        assert_eq!(m.mean_pairwise_kl, 0.0);
        assert_eq!(m.argmax_flip_rate, 0.0);
    }
}

#[test]
fn distribution_dump_rows_are_normalized() {
    let c = cfg(&[]);
    let ds = data(&c);
    let out = train(&c, &ds).unwrap();
    let model = Model::from_checkpoint(&out.checkpoint).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dist.csv");
    let picked: Vec<(usize, &_)> = ds.test.iter().enumerate().take(5).collect();
    dump_distributions(&model, &picked, &path).unwrap();

    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "sample_id,label,t,argmax,p_0,p_1,p_2"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5 * (4 + 1));
    let outputs = model
        .outputs(&ds.test.iter().take(5).collect::<Vec<_>>(), 4)
        .unwrap();
    for (r, row) in rows.iter().enumerate() {
        let (sample, t) = (r / 5, r % 5);
        assert_eq!(row[0], sample.to_string());
        assert_eq!(row[1], ds.test[sample].label.to_string());
        let p: Vec<f64> = row[4..].iter().map(|x| x.parse().unwrap()).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        let arg: usize = row[3].parse().unwrap();
        if t < 4 {
            assert_eq!(row[2], (t + 1).to_string());
            assert_eq!(arg, snnetc_core::engine::argmax(outputs.row(sample, t)));
        } else {
            assert_eq!(row[2], "mean");
            assert_eq!(
                arg,
                snnetc_core::engine::argmax(&outputs.prefix_mean(sample, 4))
            );
        }
    }
}

#[test]
fn checkpoint_files_round_trip_and_reject_truncation() {
    let c = cfg(&["train.epochs=1"]);
    let out = train(&c, &data(&c)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&out.checkpoint, &a).unwrap();
    let loaded = load_checkpoint(&a).unwrap();
    assert_eq!(loaded, out.checkpoint);
    save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let bytes = fs::read(&a).unwrap();
    fs::write(&b, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(
        load_checkpoint(&b),
        Err(CheckpointError::Truncated)
    ));
    assert!(matches!(
        load_checkpoint(dir.path().join("missing.ckpt")),
        Err(CheckpointError::Io { .. })
    ));
}

#[test]
fn mismatched_dataset_is_rejected() {
    let c = cfg(&[]);
    let other = cfg(&["network.layers=9,12,3", "data.synth.input_dim=9"]);
    let err = train(&c, &data(&other)).err().unwrap();
    assert!(matches!(err, EngineError::ShapeMismatch(_)));
}
