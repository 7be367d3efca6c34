//! End-to-end runs of the experiment driver on a tiny configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use pvad_core::corpus::{read_corpus_utterances, Corpus, ExampleBuilder};
use pvad_core::experiment::{
    build_test_set, infer, load_detector, plan_test_set, run_matrix, split_corpus, ExperimentConfig, SeedResult, ROWS,
};
use pvad_core::features::FeatureExtractor;
use pvad_core::nn::Checkpoint;
use pvad_core::pvad::ModelConfig;
use pvad_core::speaker::{PretrainConfig, SpeakerModel};
use pvad_core::PvadError;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seeds: vec![5],
        ..ExperimentConfig::default()
    };
    cfg.features.n_mels = 8;
    cfg.corpus.n_speakers = 3;
    cfg.corpus.utts_per_speaker = 10;
    cfg.corpus.noise_len_s = 2.0;
    cfg.corpus.noise_per_kind = 1;
    cfg.splits.train_per_speaker = 5;
    cfg.splits.val_per_speaker = 2;
    cfg.pretrain = PretrainConfig {
        hidden: 8,
        layers: 1,
        max_epochs: 2,
        crops_per_utterance: 1,
        ..PretrainConfig::default()
    };
    cfg.train.batch_size = 4;
    cfg.train.max_epochs = 2;
    cfg.train.model = ModelConfig { hidden: 4, layers: 1, dropout: 0.5 };
    cfg.test.snrs_db = vec![5.0, 20.0];
    cfg
}

struct Run {
    _tmp: tempfile::TempDir,
    out: PathBuf,
    seeds: Vec<SeedResult>,
}

fn shared() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().to_path_buf();
        let seeds = run_matrix(&tiny(), &out, false).unwrap();
        Run { _tmp: tmp, out, seeds }
    })
}

fn lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn matrix_writes_every_artifact() {
    let run = shared();
    let cfg = tiny();
    assert!(run.out.join(cfg.hash()).join("config.json").is_file());
    let dir = cfg.run_dir(&run.out, 5);
    for f in [
        "corpus/manifest.jsonl",
        "speaker.ckpt",
        "pretrain_history.csv",
        "similarity_hist.csv",
        "pr_curve.csv",
        "metrics.json",
        "table_clean.csv",
        "table_noisy.csv",
    ] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    assert_eq!(fs::read_dir(dir.join("models")).unwrap().count(), ROWS.len());

    let clean = lines(&dir.join("table_clean.csv"));
    assert!(clean[0].starts_with("# config_hash="));
    assert_eq!(clean[1], "method,AP (ns/nts),AP (ts),mAP");
    assert_eq!(clean.len(), 2 + ROWS.len());
    let noisy = lines(&dir.join("table_noisy.csv"));
    assert_eq!(noisy.len(), 2 + cfg.test.snrs_db.len());
    assert!(noisy[2].starts_with("5 dB,"));

    let s = &run.seeds[0];
    for m in s.clean.iter().chain(s.noisy.iter().map(|(_, m)| m)) {
        for v in [m.ap_ns_nts, m.ap_ts, m.map] {
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }
    assert_eq!(s.noisy.len(), 2 * cfg.test.snrs_db.len());
    assert_eq!(s.encoder_digest.0, s.encoder_digest.1);
}

#[test]
fn existing_runs_need_force() {
    let run = shared();
    match run_matrix(&tiny(), &run.out, false) {
        Err(PvadError::RunExists(p)) => assert!(p.ends_with("seed-5")),
        other => panic!("expected RunExists, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn saved_detector_reproduces_in_memory_posteriors() {
    let run = shared();
    let cfg = tiny();
    let dir = cfg.run_dir(&run.out, 5);
    let fx = FeatureExtractor::new(cfg.features).unwrap();
    let utts = read_corpus_utterances(&dir.join("corpus"), fx.framing()).unwrap();
    let speaker = SpeakerModel::from_checkpoint(Checkpoint::load(&dir.join("speaker.ckpt")).unwrap()).unwrap();
    let trained = run.seeds[0].trained.iter().find(|t| t.model.is_personalized()).unwrap();
    let key = pvad_core::experiment::row_key(trained.regime, trained.aug);
    let (model, params) = load_detector(&dir.join("models").join(format!("{key}.ckpt"))).unwrap();

    let (enroll, input) = (&utts[7], &utts[8]);
    let x = fx.extract(&input.audio).unwrap();
    let e = speaker.encode(&fx.extract(&enroll.audio).unwrap()).unwrap();
    let a = model.posteriors(&params, x.view(), Some(e.view())).unwrap();
    let b = trained.model.posteriors(&trained.params, x.view(), Some(e.view())).unwrap();
    assert_eq!(a, b);

    let inf = infer(&model, &params, Some(&speaker), &fx, Some(&enroll.audio), &input.audio).unwrap();
    assert_eq!(inf.frames, x.frames());
    assert_eq!(inf.decisions.len(), x.frames());
    let expected: Vec<u8> = a.rows().into_iter().map(|r| u8::from(r[1] > r[0])).collect();
    assert_eq!(inf.decisions, expected);
    let dur = input.audio.duration_s();
    assert!(inf.segments.iter().all(|&(s, e)| 0.0 <= s && s < e && e <= dur + 1e-9));

    // a personalized detector cannot run without an enrollment
    assert!(infer(&model, &params, Some(&speaker), &fx, None, &input.audio).is_err());
}

#[test]
fn test_sets_never_leak_enrollment() {
    let cfg = tiny();
    let corpus = Corpus::synthesize(&cfg.corpus, 9).unwrap();
    let splits = split_corpus(&corpus.utterances, &cfg.splits).unwrap();
    assert_eq!(splits.train.len(), 15);
    assert_eq!(splits.val.len(), 6);
    assert_eq!(splits.enrollment.len(), 3);
    assert_eq!(splits.test_inputs.len(), 6);
    for e in splits.enrollment.values() {
        assert!(splits.test_inputs.iter().all(|u| u.utterance_id != e.utterance_id));
        assert!(splits.train.iter().chain(&splits.val).all(|u| u.utterance_id != e.utterance_id));
    }

    let plans = plan_test_set(&splits, 2, 4);
    assert_eq!(plans.len(), 2 * splits.test_inputs.len());
    for p in &plans {
        assert!((1..=3).contains(&p.inputs.len()));
        for (&i, &t) in p.inputs.iter().zip(&p.is_target) {
            assert_eq!(t, splits.test_inputs[i].speaker_id.as_deref() == Some(p.speaker.as_str()));
        }
        assert!(p.is_target.iter().any(|&t| t));
    }
    assert_eq!(plans, plan_test_set(&splits, 2, 4));

    let fx = FeatureExtractor::new(cfg.features).unwrap();
    let test = build_test_set(&fx, &splits, &plans, None).unwrap();
    for (ex, p) in test.iter().zip(&plans) {
        assert_eq!(ex.conditioning.utterance_id, splits.enrollment[&p.speaker].utterance_id);
        assert!(!ex.input_utterance_ids.contains(&ex.conditioning.utterance_id));
    }

    // the builder itself refuses an enrollment that is also an input
    let u = splits.test_inputs[0];
    assert!(ExampleBuilder::new(&fx).build_test_example(&[u], &[true], u, 1).is_err());
}

#[test]
fn config_json_round_trip() {
    let cfg = tiny();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("c.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let back = ExperimentConfig::load(&path).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_ne!(cfg.hash(), ExperimentConfig::default().hash());

    fs::write(&path, r#"{"seeds": [1], "bogus": 3}"#).unwrap();
    assert!(matches!(ExperimentConfig::load(&path), Err(PvadError::Config(_))));
    // partial configs fill in defaults
    fs::write(&path, r#"{"seeds": [4]}"#).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap().seeds, vec![4]);
}
