//! End-to-end experiment driver: corpus, speaker pretraining, the detector
//! matrix, clean and noisy evaluation, the similarity study, and inference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{
    write_corpus, Corpus, CorpusConfig, ExampleBuilder, NoiseKind, NoisePlan, TrainingExample, Utterance,
};
use crate::error::{PvadError, Result};
use crate::eval::{evaluate_pvad, example_posteriors, pr_curve, similarity_study, Metrics, SimilarityStudy};
use crate::features::{FeatureConfig, FeatureExtractor, Waveform};
use crate::nn::Checkpoint;
use crate::pvad::PvadModel;
use crate::rng;
use crate::schedule::history_csv;
use crate::speaker::{pretrain_classifier, PretrainConfig, SpeakerModel};
use crate::training::{train, Regime, TrainConfig, TrainData, Trained};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Leading utterances of each speaker used for training.
    pub train_per_speaker: usize,
    /// Following utterances used for validation. The rest are test: the
    /// first as enrollment, the others as inputs.
    pub val_per_speaker: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_per_speaker: 35,
            val_per_speaker: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestConfig {
    pub snrs_db: Vec<f64>,
    /// Pseudo-random test compositions are drawn this many times per input.
    pub examples_per_input: usize,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            snrs_db: vec![5.0, 10.0, 15.0, 20.0],
            examples_per_input: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub features: FeatureConfig,
    pub corpus: CorpusConfig,
    pub splits: SplitConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub test: TestConfig,
    /// Write the synthesized corpus into each seed directory.
    pub save_corpus: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            features: FeatureConfig {
                n_mels: 24,
                context: 1,
                ..FeatureConfig::default()
            },
            corpus: CorpusConfig::default(),
            splits: SplitConfig::default(),
            pretrain: PretrainConfig::default(),
            // one laptop core cannot afford 100 epochs per detector
            train: TrainConfig {
                max_epochs: 30,
                ..TrainConfig::default()
            },
            test: TestConfig::default(),
            save_corpus: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| PvadError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.corpus.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(PvadError::Config("no seeds".into()));
        }
        let s = self.splits;
        if s.train_per_speaker < 2 || s.val_per_speaker < 2 || s.train_per_speaker + s.val_per_speaker + 2 > self.corpus.utts_per_speaker {
            return Err(PvadError::Config(format!(
                "splits {}+{} leave fewer than 2 test utterances of {} per speaker (train and val need 2 each)",
                s.train_per_speaker, s.val_per_speaker, self.corpus.utts_per_speaker
            )));
        }
        if self.corpus.n_speakers < 2 {
            return Err(PvadError::Config("experiments need at least 2 speakers".into()));
        }
        if self.test.examples_per_input == 0 {
            return Err(PvadError::Config("test.examples_per_input must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 prefix of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// `out/<hash>/seed-<seed>`.
    pub fn run_dir(&self, out: &Path, seed: u64) -> PathBuf {
        out.join(self.hash()).join(format!("seed-{seed}"))
    }
}

/// Corpus partition by utterance position within each speaker.
#[derive(Debug, Clone)]
pub struct Splits<'a> {
    pub train: Vec<&'a Utterance>,
    pub val: Vec<&'a Utterance>,
    pub test_inputs: Vec<&'a Utterance>,
    /// Enrollment per speaker, never used as a test input.
    pub enrollment: BTreeMap<String, &'a Utterance>,
}

pub fn split_corpus<'a>(utts: &'a [Utterance], cfg: &SplitConfig) -> Result<Splits<'a>> {
    let mut groups: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
    for u in utts {
        let s = u
            .speaker_id
            .as_deref()
            .ok_or_else(|| PvadError::invalid(format!("{} has no speaker label", u.utterance_id)))?;
        groups.entry(s).or_default().push(u);
    }
    let mut out = Splits {
        train: vec![],
        val: vec![],
        test_inputs: vec![],
        enrollment: BTreeMap::new(),
    };
    let (nt, nv) = (cfg.train_per_speaker, cfg.val_per_speaker);
    for (spk, g) in groups {
        if g.len() < nt + nv + 2 {
            return Err(PvadError::invalid(format!(
                "speaker {spk} has {} utterances, splits need {}",
                g.len(),
                nt + nv + 2
            )));
        }
        out.train.extend(&g[..nt]);
        out.val.extend(&g[nt..nt + nv]);
        out.enrollment.insert(spk.to_string(), g[nt + nv]);
        out.test_inputs.extend(&g[nt + nv + 1..]);
    }
    Ok(out)
}

/// Input composition of one test example.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPlan {
    pub inputs: Vec<usize>,
    pub is_target: Vec<bool>,
    pub speaker: String,
    pub seed: u64,
}

/// Each test input becomes the target utterance of an example with 0–2
/// random other test inputs; every utterance of the target speaker in the
/// input counts as target speech.
pub fn plan_test_set(splits: &Splits, examples_per_input: usize, seed: u64) -> Vec<TestPlan> {
    let pool = &splits.test_inputs;
    let mut r = rng::stream(seed, "test-plan", 0);
    let mut plans = Vec::new();
    for _ in 0..examples_per_input {
        for (anchor, u) in pool.iter().enumerate() {
            let k = r.gen_range(1..=3usize).min(pool.len());
            let mut inputs: Vec<usize> = sample(&mut r, pool.len() - 1, k - 1)
                .into_iter()
                .map(|i| if i >= anchor { i + 1 } else { i })
                .collect();
            inputs.push(anchor);
            inputs.shuffle(&mut r);
            let speaker = u.speaker_id.clone().unwrap_or_default();
            let is_target = inputs.iter().map(|&i| pool[i].speaker_id.as_deref() == Some(speaker.as_str())).collect();
            plans.push(TestPlan {
                inputs,
                is_target,
                speaker,
                seed: r.gen(),
            });
        }
    }
    plans
}

/// Builds the planned examples. With `noise`, example `i` is mixed with
/// `noise[i % len]` at `snr_db`; the composition and gaps match the clean set.
pub fn build_test_set(
    extractor: &FeatureExtractor,
    splits: &Splits,
    plans: &[TestPlan],
    noise: Option<(&[Waveform], f64)>,
) -> Result<Vec<TrainingExample>> {
    plans
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let plan = match noise {
                None => NoisePlan::Clean,
                Some((bank, _)) if bank.is_empty() => return Err(PvadError::invalid("empty test noise bank")),
                Some((bank, snr_db)) => NoisePlan::Fixed {
                    noise: &bank[i % bank.len()],
                    snr_db,
                },
            };
            let builder = ExampleBuilder::new(extractor).with_noise(plan);
            let utts: Vec<&Utterance> = p.inputs.iter().map(|&j| splits.test_inputs[j]).collect();
            let enrollment = splits
                .enrollment
                .get(&p.speaker)
                .ok_or_else(|| PvadError::invalid(format!("no enrollment for speaker {}", p.speaker)))?;
            builder.build_test_example(&utts, &p.is_target, enrollment, p.seed)
        })
        .collect()
}

/// The five detectors, in table order.
pub const ROWS: [(Regime, bool, &str); 5] = [
    (Regime::Vad, false, "VAD"),
    (Regime::EnrollFull, false, "Conventional PVAD (enroll-full w/o aug.)"),
    (Regime::EnrollFull, true, "PVAD (enroll-full w/ aug.)"),
    (Regime::EnrollLess, false, "PVAD (enroll-less w/o aug.)"),
    (Regime::EnrollLess, true, "Proposed PVAD (enroll-less w/ aug.)"),
];

/// Rows evaluated on noisy test data.
pub const NOISY_ROWS: [usize; 2] = [1, 4];

pub fn row_key(regime: Regime, aug: bool) -> String {
    format!("{regime}-{}", if aug { "aug" } else { "noaug" })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub regime: Regime,
    pub aug: bool,
    pub noise_condition: String,
    pub ap_ns_nts: f64,
    pub ap_ts: f64,
    pub map: f64,
    pub n_frames: usize,
}

impl MetricsRecord {
    pub fn metrics(&self) -> Metrics {
        Metrics {
            ap_ns_nts: self.ap_ns_nts,
            ap_ts: self.ap_ts,
            map: self.map,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: PathBuf,
    /// Clean metrics per row of [`ROWS`].
    pub clean: Vec<MetricsRecord>,
    /// `(snr_db, record)` for the [`NOISY_ROWS`].
    pub noisy: Vec<(f64, MetricsRecord)>,
    pub similarity: SimilarityStudy,
    /// SHA-256 of the encoder checkpoint right after pretraining and after
    /// all detector training.
    pub encoder_digest: (String, String),
    pub trained: Vec<Trained>,
    /// Wall-clock seconds spent in speaker pretraining (not written to disk).
    pub pretrain_seconds: f64,
}

impl SeedResult {
    pub fn clean_of(&self, regime: Regime, aug: bool) -> Option<&MetricsRecord> {
        self.clean.iter().find(|m| m.regime == regime && m.aug == aug)
    }

    pub fn noisy_of(&self, regime: Regime, aug: bool, snr_db: f64) -> Option<&MetricsRecord> {
        self.noisy
            .iter()
            .find(|(s, m)| *s == snr_db && m.regime == regime && m.aug == aug)
            .map(|(_, m)| m)
    }
}

pub fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Creates `dir`, refusing to reuse an existing one unless `force`.
pub fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(PvadError::RunExists(dir.to_path_buf()));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn fmt_metrics(m: &Metrics) -> String {
    format!("{:.6},{:.6},{:.6}", m.ap_ns_nts, m.ap_ts, m.map)
}

pub fn table_clean_csv(hash: &str, seed: u64, rows: &[MetricsRecord]) -> String {
    let mut out = format!("# config_hash={hash} seed={seed}\nmethod,AP (ns/nts),AP (ts),mAP\n");
    for (label, m) in ROWS.iter().map(|r| r.2).zip(rows) {
        let _ = writeln!(out, "{label},{}", fmt_metrics(&m.metrics()));
    }
    out
}

pub fn table_noisy_csv(hash: &str, seed: u64, snrs: &[f64], noisy: &[(f64, MetricsRecord)]) -> String {
    let mut out = format!("# config_hash={hash} seed={seed}\nnoise");
    for &r in &NOISY_ROWS {
        for col in ["AP (ns/nts)", "AP (ts)", "mAP"] {
            let _ = write!(out, ",{} {col}", ROWS[r].2);
        }
    }
    out.push('\n');
    for &snr in snrs {
        let _ = write!(out, "{snr} dB");
        for &r in &NOISY_ROWS {
            let (regime, aug, _) = ROWS[r];
            if let Some((_, m)) = noisy.iter().find(|(s, m)| *s == snr && m.regime == regime && m.aug == aug) {
                let _ = write!(out, ",{}", fmt_metrics(&m.metrics()));
            }
        }
        out.push('\n');
    }
    out
}

const PR_POINTS: usize = 200;

/// Both classes' PR curves, thinned to at most ~200 points each.
fn pr_curves_csv(
    hash: &str,
    model: &PvadModel,
    params: &crate::nn::ParamSet,
    test: &[TrainingExample],
    speaker: &SpeakerModel,
    extractor: &FeatureExtractor,
) -> Result<String> {
    let (mut s0, mut s1, mut q) = (vec![], vec![], vec![]);
    for ex in test {
        let post = example_posteriors(model, params, ex, speaker, extractor)?;
        s0.extend(post.column(0).iter());
        s1.extend(post.column(1).iter());
        q.extend(&ex.pvad_labels);
    }
    let nq: Vec<u8> = q.iter().map(|&v| 1 - v).collect();
    let mut out = format!("# config_hash={hash}\nclass,threshold,precision,recall\n");
    for (class, scores, labels) in [("ns/nts", &s0, &nq), ("ts", &s1, &q)] {
        let pts = pr_curve(scores, labels)?;
        let stride = pts.len().div_ceil(PR_POINTS).max(1);
        for (i, p) in pts.iter().enumerate() {
            if i % stride == 0 || i + 1 == pts.len() {
                let _ = writeln!(out, "{class},{:.8},{:.8},{:.8}", p.threshold, p.precision, p.recall);
            }
        }
    }
    Ok(out)
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Runs every stage for one seed and writes its artifacts under `dir`,
/// which must already exist.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedResult> {
    let hash = cfg.hash();
    let extractor = FeatureExtractor::new(cfg.features)?;
    let corpus = stage("synth-corpus", Corpus::synthesize(&cfg.corpus, seed))?;
    if cfg.save_corpus {
        stage("synth-corpus", write_corpus(&dir.join("corpus"), &corpus))?;
    }
    let splits = stage("split", split_corpus(&corpus.utterances, &cfg.splits))?;

    log::info!("seed {seed}: pretraining speaker encoder");
    let started = std::time::Instant::now();
    let pre = stage("pretrain-speaker", pretrain_classifier(&splits.train, &extractor, &cfg.pretrain, seed))?;
    let pretrain_seconds = started.elapsed().as_secs_f64();
    let speaker = pre.model;
    let speaker_bytes = speaker.checkpoint().to_bytes()?;
    fs::write(dir.join("speaker.ckpt"), &speaker_bytes)?;
    let mut ph = String::from("epoch,train_loss,val_loss,val_accuracy\n");
    for h in &pre.history {
        let _ = writeln!(ph, "{},{:.8},{:.8},{:.6}", h.epoch, h.train_loss, h.val_loss, h.val_accuracy);
    }
    fs::write(dir.join("pretrain_history.csv"), ph)?;

    let sim = stage(
        "similarity-study",
        similarity_study(
            &speaker,
            &extractor,
            &splits.enrollment.values().copied().chain(splits.test_inputs.iter().copied()).collect::<Vec<_>>(),
            &cfg.train.aug,
            rng::derive_seed(seed, "similarity", 0),
        ),
    )?;
    fs::write(dir.join("similarity_hist.csv"), sim.to_csv(&format!("config_hash={hash} seed={seed}")))?;

    let train_noise = corpus.noise_of(&NoiseKind::TRAIN);
    let test_noise = corpus.noise_of(&NoiseKind::HELD_OUT);
    let data = TrainData {
        train: &splits.train,
        val: &splits.val,
        noise: &train_noise,
    };
    let plans = plan_test_set(&splits, cfg.test.examples_per_input, rng::derive_seed(seed, "test", 0));
    let clean_test = stage("evaluate", build_test_set(&extractor, &splits, &plans, None))?;
    let n_frames: usize = clean_test.iter().map(|e| e.pvad_labels.len()).sum();

    fs::create_dir_all(dir.join("models"))?;
    let mut clean = Vec::new();
    let mut trained = Vec::new();
    for (regime, aug, label) in ROWS {
        log::info!("seed {seed}: training {label}");
        let key = row_key(regime, aug);
        let t = stage(
            "train",
            train(regime, aug, data, Some(&speaker), &extractor, &cfg.train, rng::derive_seed(seed, &key, 0)),
        )?;
        t.model
            .checkpoint(&t.params, t.best_epoch as u64)
            .save(&dir.join("models").join(format!("{key}.ckpt")))?;
        fs::write(dir.join(format!("history_{key}.csv")), history_csv(&t.history))?;
        let m = stage("evaluate", evaluate_pvad(&t.model, &t.params, &clean_test, &speaker, &extractor))?;
        clean.push(MetricsRecord {
            regime,
            aug,
            noise_condition: "clean".into(),
            ap_ns_nts: m.ap_ns_nts,
            ap_ts: m.ap_ts,
            map: m.map,
            n_frames,
        });
        if (regime, aug) == (Regime::EnrollLess, true) {
            fs::write(
                dir.join("pr_curve.csv"),
                pr_curves_csv(&hash, &t.model, &t.params, &clean_test, &speaker, &extractor)?,
            )?;
        }
        trained.push(t);
    }
    let after = digest(&speaker.checkpoint().to_bytes()?);

    let mut noisy = Vec::new();
    for &snr in &cfg.test.snrs_db {
        let test = stage("evaluate", build_test_set(&extractor, &splits, &plans, Some((&test_noise, snr))))?;
        let frames: usize = test.iter().map(|e| e.pvad_labels.len()).sum();
        for &r in &NOISY_ROWS {
            let t = &trained[r];
            let m = stage("evaluate", evaluate_pvad(&t.model, &t.params, &test, &speaker, &extractor))?;
            noisy.push((
                snr,
                MetricsRecord {
                    regime: t.regime,
                    aug: t.aug,
                    noise_condition: format!("{snr} dB"),
                    ap_ns_nts: m.ap_ns_nts,
                    ap_ts: m.ap_ts,
                    map: m.map,
                    n_frames: frames,
                },
            ));
        }
    }
    let all: Vec<&MetricsRecord> = clean.iter().chain(noisy.iter().map(|(_, m)| m)).collect();
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&all)?)?;
    fs::write(dir.join("table_clean.csv"), table_clean_csv(&hash, seed, &clean))?;
    fs::write(dir.join("table_noisy.csv"), table_noisy_csv(&hash, seed, &cfg.test.snrs_db, &noisy))?;
    Ok(SeedResult {
        seed,
        dir: dir.to_path_buf(),
        clean,
        noisy,
        similarity: sim,
        encoder_digest: (digest(&speaker_bytes), after),
        trained,
        pretrain_seconds,
    })
}

/// All seeds under `out/<hash>/`. Existing seed directories are refused
/// unless `force`.
pub fn run_matrix(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<Vec<SeedResult>> {
    cfg.validate()?;
    let root = out.join(cfg.hash());
    for &seed in &cfg.seeds {
        let dir = cfg.run_dir(out, seed);
        if dir.exists() && !force {
            return Err(PvadError::RunExists(dir));
        }
    }
    fs::create_dir_all(&root)?;
    fs::write(root.join("config.json"), serde_json::to_string_pretty(cfg)?)?;
    cfg.seeds
        .iter()
        .map(|&seed| {
            let dir = cfg.run_dir(out, seed);
            prepare_dir(&dir, force)?;
            run_seed(cfg, seed, &dir)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inference {
    pub frames: usize,
    pub decisions: Vec<u8>,
    /// `(start_s, end_s)` of each run of target-speech decisions.
    pub segments: Vec<(f64, f64)>,
}

/// Frame decisions `argmax` of the posteriors, plus run-length segments.
pub fn infer(
    model: &PvadModel,
    params: &crate::nn::ParamSet,
    speaker: Option<&SpeakerModel>,
    extractor: &FeatureExtractor,
    enrollment: Option<&Waveform>,
    input: &Waveform,
) -> Result<Inference> {
    let e = match (model.is_personalized(), speaker, enrollment) {
        (false, _, _) => None,
        (true, Some(s), Some(y)) => Some(s.encode(&extractor.extract(y)?)?),
        _ => return Err(PvadError::invalid("personalized model needs a speaker model and enrollment audio")),
    };
    let x = extractor.extract(input)?;
    let post = model.posteriors(params, x.view(), e.as_ref().map(|e| e.view()))?;
    let decisions: Vec<u8> = post.rows().into_iter().map(|r| u8::from(r[1] > r[0])).collect();
    let framing = extractor.framing();
    let sr = f64::from(extractor.config.sample_rate);
    let mut segments = Vec::new();
    let mut t = 0;
    while t < decisions.len() {
        if decisions[t] == 0 {
            t += 1;
            continue;
        }
        let a = t;
        while t < decisions.len() && decisions[t] == 1 {
            t += 1;
        }
        let (lo, _) = framing.frame_span(a);
        let (_, hi) = framing.frame_span(t - 1);
        segments.push((lo as f64 / sr, hi as f64 / sr));
    }
    Ok(Inference {
        frames: decisions.len(),
        decisions,
        segments,
    })
}

/// Loads a detector checkpoint.
pub fn load_detector(path: &Path) -> Result<(PvadModel, crate::nn::ParamSet)> {
    PvadModel::from_checkpoint(&Checkpoint::load(path)?)
}
