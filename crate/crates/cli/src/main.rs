use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use pvad_core::corpus::{read_corpus_utterances, read_noise_bank, write_corpus, Corpus, NoiseKind, Utterance};
use pvad_core::error::ErrorKind;
use pvad_core::eval::{evaluate_pvad, similarity_study};
use pvad_core::experiment::{
    build_test_set, infer, load_detector, plan_test_set, prepare_dir, row_key, run_matrix, split_corpus,
    ExperimentConfig,
};
use pvad_core::features::{read_wav, FeatureExtractor, Waveform};
use pvad_core::nn::{Checkpoint, GradCheckConfig};
use pvad_core::schedule::history_csv;
use pvad_core::speaker::{pretrain_classifier, SpeakerModel};
use pvad_core::training::{train, Regime, TrainData};
use pvad_core::{diagnostics, rng, PvadError, Result};

#[derive(Parser)]
#[command(name = "pvad-lab", version, about = "Personalized VAD experiments on synthetic speech")]
struct Cli {
    /// Experiment config (JSON); desk-scale defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed list with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root of all run directories.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Replace existing artifacts.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Vad,
    EnrollFull,
    EnrollLess,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Vad => Regime::Vad,
            RegimeArg::EnrollFull => Regime::EnrollFull,
            RegimeArg::EnrollLess => Regime::EnrollLess,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the corpus and noise bank into the run directory.
    SynthCorpus,
    /// Pretrain the speaker encoder on the training split.
    PretrainSpeaker,
    /// Train one detector.
    Train {
        #[arg(long, value_enum)]
        regime: RegimeArg,
        #[arg(long, value_enum, default_value = "off")]
        aug: Switch,
    },
    /// Evaluate a trained detector on the test split.
    Evaluate {
        #[arg(long, value_enum)]
        regime: RegimeArg,
        #[arg(long, value_enum, default_value = "off")]
        aug: Switch,
        /// Mix held-out noise at this SNR (dB).
        #[arg(long)]
        snr: Option<f64>,
    },
    /// Frame decisions and speech segments for one input.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        speaker: Option<PathBuf>,
        #[arg(long)]
        enrollment: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
    },
    /// Every stage for every seed, with clean and noisy tables.
    RunMatrix,
    /// Cosine-similarity histograms of encoder embeddings.
    SimilarityStudy,
    /// Finite-difference gradient checks of every block.
    GradCheck,
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    force: bool,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.cfg.seeds[0]
    }

    fn dir(&self) -> PathBuf {
        self.cfg.run_dir(&self.out, self.seed())
    }

    fn extractor(&self) -> Result<FeatureExtractor> {
        FeatureExtractor::new(self.cfg.features)
    }

    /// Refuses to replace `path` unless `--force`.
    fn guard(&self, path: &Path) -> Result<()> {
        if path.exists() && !self.force {
            return Err(PvadError::RunExists(path.to_path_buf()));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(())
    }

    fn corpus(&self, fx: &FeatureExtractor) -> Result<Vec<Utterance>> {
        let dir = self.dir().join("corpus");
        if !dir.exists() {
            return Err(PvadError::InvalidArgument(format!("no corpus at {} (run synth-corpus)", dir.display())));
        }
        read_corpus_utterances(&dir, fx.framing())
    }

    fn noise(&self, kinds: &[NoiseKind]) -> Result<Vec<Waveform>> {
        Ok(read_noise_bank(&self.dir().join("corpus"))?
            .into_iter()
            .filter(|n| n.kind.is_some_and(|k| kinds.contains(&k)))
            .map(|n| n.audio)
            .collect())
    }

    fn speaker(&self) -> Result<SpeakerModel> {
        SpeakerModel::from_checkpoint(Checkpoint::load(&self.dir().join("speaker.ckpt"))?)
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;
    let ctx = Ctx {
        cfg,
        out: cli.out,
        force: cli.force,
    };
    match cli.command {
        Command::SynthCorpus => {
            let dir = ctx.dir().join("corpus");
            prepare_dir(&dir, ctx.force)?;
            write_corpus(&dir, &Corpus::synthesize(&ctx.cfg.corpus, ctx.seed())?)?;
            println!("{}", dir.display());
        }
        Command::PretrainSpeaker => {
            let fx = ctx.extractor()?;
            let utts = ctx.corpus(&fx)?;
            let splits = split_corpus(&utts, &ctx.cfg.splits)?;
            let path = ctx.dir().join("speaker.ckpt");
            ctx.guard(&path)?;
            let pre = pretrain_classifier(&splits.train, &fx, &ctx.cfg.pretrain, ctx.seed())?;
            pre.model.checkpoint().save(&path)?;
            let mut csv = String::from("epoch,train_loss,val_loss,val_accuracy\n");
            for h in &pre.history {
                csv.push_str(&format!("{},{:.8},{:.8},{:.6}\n", h.epoch, h.train_loss, h.val_loss, h.val_accuracy));
            }
            fs::write(ctx.dir().join("pretrain_history.csv"), csv)?;
            println!("{}", path.display());
        }
        Command::Train { regime, aug } => {
            let (regime, aug) = (Regime::from(regime), matches!(aug, Switch::On));
            let key = row_key(regime, aug);
            let path = ctx.dir().join("models").join(format!("{key}.ckpt"));
            ctx.guard(&path)?;
            let fx = ctx.extractor()?;
            let utts = ctx.corpus(&fx)?;
            let splits = split_corpus(&utts, &ctx.cfg.splits)?;
            let speaker = if regime == Regime::Vad { None } else { Some(ctx.speaker()?) };
            let noise = ctx.noise(&NoiseKind::TRAIN)?;
            let data = TrainData {
                train: &splits.train,
                val: &splits.val,
                noise: &noise,
            };
            let seed = rng::derive_seed(ctx.seed(), &key, 0);
            let t = train(regime, aug, data, speaker.as_ref(), &fx, &ctx.cfg.train, seed)?;
            t.model.checkpoint(&t.params, t.best_epoch as u64).save(&path)?;
            fs::write(ctx.dir().join(format!("history_{key}.csv")), history_csv(&t.history))?;
            println!("{}", path.display());
        }
        Command::Evaluate { regime, aug, snr } => {
            let (regime, aug) = (Regime::from(regime), matches!(aug, Switch::On));
            let key = row_key(regime, aug);
            let fx = ctx.extractor()?;
            let utts = ctx.corpus(&fx)?;
            let splits = split_corpus(&utts, &ctx.cfg.splits)?;
            let (model, params) = load_detector(&ctx.dir().join("models").join(format!("{key}.ckpt")))?;
            let speaker = ctx.speaker()?;
            let plans = plan_test_set(
                &splits,
                ctx.cfg.test.examples_per_input,
                rng::derive_seed(ctx.seed(), "test", 0),
            );
            let noise = ctx.noise(&NoiseKind::HELD_OUT)?;
            let test = build_test_set(&fx, &splits, &plans, snr.map(|s| (noise.as_slice(), s)))?;
            let m = evaluate_pvad(&model, &params, &test, &speaker, &fx)?;
            let cond = snr.map_or("clean".to_string(), |s| format!("{s} dB"));
            let record = serde_json::json!({
                "config_hash": ctx.cfg.hash(),
                "regime": regime,
                "aug": aug,
                "noise_condition": cond,
                "ap_ns_nts": m.ap_ns_nts,
                "ap_ts": m.ap_ts,
                "map": m.map,
                "n_frames": test.iter().map(|e| e.pvad_labels.len()).sum::<usize>(),
            });
            let tag = snr.map_or("clean".to_string(), |s| format!("{s}dB"));
            let path = ctx.dir().join(format!("metrics_{key}_{tag}.json"));
            ctx.guard(&path)?;
            fs::write(&path, serde_json::to_string_pretty(&record)?)?;
            println!("{}", serde_json::to_string_pretty(&record)?);
        }
        Command::Infer {
            model,
            speaker,
            enrollment,
            input,
        } => {
            let fx = ctx.extractor()?;
            let (m, p) = load_detector(&model)?;
            let spk = speaker
                .map(|s| Checkpoint::load(&s).and_then(SpeakerModel::from_checkpoint))
                .transpose()?;
            let enroll = enrollment.map(|e| read_wav(&e)).transpose()?;
            let result = infer(&m, &p, spk.as_ref(), &fx, enroll.as_ref(), &read_wav(&input)?)?;
            println!("{}", serde_json::to_string(&result)?);
        }
        Command::RunMatrix => {
            for r in run_matrix(&ctx.cfg, &ctx.out, ctx.force)? {
                println!("{}", r.dir.display());
                print!("{}", fs::read_to_string(r.dir.join("table_clean.csv"))?);
            }
        }
        Command::SimilarityStudy => {
            let fx = ctx.extractor()?;
            let utts = ctx.corpus(&fx)?;
            let splits = split_corpus(&utts, &ctx.cfg.splits)?;
            let speaker = ctx.speaker()?;
            let test: Vec<&Utterance> =
                splits.enrollment.values().copied().chain(splits.test_inputs.iter().copied()).collect();
            let study = similarity_study(
                &speaker,
                &fx,
                &test,
                &ctx.cfg.train.aug,
                rng::derive_seed(ctx.seed(), "similarity", 0),
            )?;
            let path = ctx.dir().join("similarity_hist.csv");
            ctx.guard(&path)?;
            fs::write(&path, study.to_csv(&format!("config_hash={} seed={}", ctx.cfg.hash(), ctx.seed())))?;
            println!("{}", path.display());
        }
        Command::GradCheck => {
            let mut worst: Option<(String, f64)> = None;
            let reports = diagnostics::grad_check_suite(ctx.seed(), GradCheckConfig::default())?;
            for (block, rep) in &reports {
                println!("{block:<20} max rel error {:.3e}", rep.max_rel_error());
                if !rep.passed() && worst.as_ref().map_or(true, |w| rep.max_rel_error() > w.1) {
                    worst = Some((block.to_string(), rep.max_rel_error()));
                }
            }
            if let Some((param, max_rel_error)) = worst {
                return Err(PvadError::GradCheck { param, max_rel_error });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}
