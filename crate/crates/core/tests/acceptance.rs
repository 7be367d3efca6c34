//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. The desk-scale matrix is written to a temporary
//! directory, or to `PVAD_ACCEPTANCE_OUT` when set.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::Rng as _;

use pvad_core::corpus::{
    generate_noise, mix_noise, read_corpus_utterances, synth_utterance, ExampleBuilder, NoiseKind, SpeakerSpec,
    Utterance,
};
use pvad_core::diagnostics::grad_check_suite;
use pvad_core::eval::{average_precision, pooled_metrics};
use pvad_core::experiment::{digest, run_matrix, ExperimentConfig, SeedResult};
use pvad_core::features::{FeatureConfig, FeatureExtractor, Waveform};
use pvad_core::nn::{GradCheckConfig, ParamSet};
use pvad_core::pvad::{ModelConfig, PvadModel};
use pvad_core::rng;
use pvad_core::speaker::{PretrainConfig, SpeakerModel};
use pvad_core::training::Regime;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(label: &str, o: &Outcome) {
    println!("{label}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

// ---------------------------------------------------------------- oracles

/// Brute-force AP without sorting: element `i` sits at position
/// #{j : s_j > s_i} + #{j <= i : s_j == s_i} (ties keep their input order),
/// and AP averages the precision at each positive's position.
fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j <= i);
    let mut sum = 0.0;
    let mut positives = 0.0;
    for i in (0..scores.len()).filter(|&i| labels[i] == 1) {
        let rank = (0..scores.len()).filter(|&j| ahead(j, i)).count() as f64;
        let hits = (0..scores.len()).filter(|&j| labels[j] == 1 && ahead(j, i)).count() as f64;
        sum += hits / rank;
        positives += 1.0;
    }
    sum / positives
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

// ---------------------------------------------------------------- 1

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let reports = match grad_check_suite(1, GradCheckConfig { step: 1e-6, tolerance: 1e-5, max_entries_per_param: None }) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("grad check errored: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let (worst_block, worst) = reports
        .iter()
        .map(|(b, r)| (*b, r.max_rel_error()))
        .fold(("", 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let blocks: Vec<&str> = reports.iter().map(|r| r.0).collect();
    outcome(
        worst < 1e-5 && secs < 120.0,
        format!("{} blocks [{}], max rel error {worst:.2e} in {worst_block}, {secs:.1} s", blocks.len(), blocks.join(", ")),
    )
}

// ---------------------------------------------------------------- 2

fn ap_equivalence() -> Outcome {
    let mut r = rng::stream(2, "acceptance-ap", 0);
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 200 {
        let t = r.gen_range(1..=200usize);
        // coarse scores half the time so ties are common
        let coarse = r.gen_bool(0.5);
        let p1: Vec<f64> = (0..t)
            .map(|_| {
                let v: f64 = r.gen();
                if coarse {
                    (v * 10.0).round() / 10.0
                } else {
                    v
                }
            })
            .collect();
        let q: Vec<u8> = (0..t).map(|_| u8::from(r.gen_bool(0.4))).collect();
        if q.iter().all(|&v| v == q[0]) {
            continue;
        }
        n += 1;
        let ap = average_precision(&p1, &q).expect("ap defined");
        worst = worst.max((ap - ap_oracle(&p1, &q)).abs());

        let post = Array2::from_shape_fn((t, 2), |(i, c)| if c == 1 { p1[i] } else { 1.0 - p1[i] });
        let nq: Vec<u8> = q.iter().map(|&v| 1 - v).collect();
        let m = pooled_metrics([(post.view(), q.as_slice())]).expect("pooled metrics");
        let p0: Vec<f64> = post.column(0).to_vec();
        // pooled (frame, class) set, frame-major
        let all_scores: Vec<f64> = p0.iter().zip(&p1).flat_map(|(a, b)| [*a, *b]).collect();
        let all_labels: Vec<u8> = nq.iter().zip(&q).flat_map(|(a, b)| [*a, *b]).collect();
        worst = worst
            .max((m.ap_ts - ap_oracle(&p1, &q)).abs())
            .max((m.ap_ns_nts - ap_oracle(&p0, &nq)).abs())
            .max((m.map - ap_oracle(&all_scores, &all_labels)).abs());
    }
    outcome(worst < 1e-12, format!("{n} instances, max |diff| {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn random_span_utterance(r: &mut rng::Rng, id: usize, fx: &FeatureExtractor) -> Utterance {
    let len = r.gen_range(400..20_000usize);
    let mut spans = Vec::new();
    let mut pos = 0;
    for _ in 0..r.gen_range(0..=3) {
        if pos + 1 >= len {
            break;
        }
        let a = if r.gen_bool(0.2) { pos } else { r.gen_range(pos..len) };
        let b = if r.gen_bool(0.2) { len } else { r.gen_range(a + 1..=len) };
        spans.push((a, b));
        pos = b + 1;
    }
    let samples = (0..len).map(|_| r.gen_range(-0.1..0.1)).collect();
    Utterance::from_spans(
        format!("rand{id}"),
        None,
        Waveform::new(samples, 16_000).expect("waveform"),
        spans,
        fx.framing(),
    )
}

fn label_oracle() -> Outcome {
    let fx = FeatureExtractor::new(FeatureConfig { n_mels: 24, context: 1, ..FeatureConfig::default() }).expect("extractor");
    let win = 320usize; // 20 ms at 16 kHz
    let hop = 160usize; // 10 ms
    let mut r = rng::stream(3, "acceptance-labels", 0);
    let mut pool: Vec<Utterance> = Vec::new();
    for s in 0..4u64 {
        let spk = SpeakerSpec::sample(format!("s{s}"), s);
        for k in 0..3u64 {
            pool.push(synth_utterance(&spk, r.gen_range(0.5..1.0), s * 10 + k).expect("synth"));
        }
    }
    for i in 0..24 {
        pool.push(random_span_utterance(&mut r, i, &fx));
    }
    let builder = ExampleBuilder::new(&fx);
    let max_gap = (builder.gap_range_s.1 * 16_000.0).round() as usize;
    let mut mismatches = Vec::new();
    let mut target_frames = 0usize;
    for case in 0..500 {
        let k = r.gen_range(1..=3usize);
        let utts: Vec<&Utterance> = (0..k).map(|_| &pool[r.gen_range(0..pool.len())]).collect();
        let target = r.gen_range(0..k);
        let ex = match builder.build_enroll_less_example(&utts, target, r.gen()) {
            Ok(ex) => ex,
            Err(e) => {
                mismatches.push(format!("case {case}: {e}"));
                continue;
            }
        };
        // positional bookkeeping from the reported gaps
        let mut offsets = Vec::new();
        let mut cursor = 0;
        for (i, u) in utts.iter().enumerate() {
            offsets.push(cursor);
            cursor += u.audio.samples.len();
            if i + 1 < k {
                cursor += ex.gaps[i];
            }
        }
        let total = cursor;
        let frames = if total < win { 0 } else { (total - win) / hop + 1 };
        let offs = &offsets;
        let shifted = |i: usize| utts[i].speech_spans.iter().map(move |&(a, b)| (a + offs[i], b + offs[i]));
        let q: Vec<u8> = (0..frames)
            .map(|t| {
                let (lo, hi) = (t * hop, t * hop + win);
                u8::from(shifted(target).any(|(a, b)| a < hi && b > lo))
            })
            .collect();
        let s: Vec<u8> = (0..frames)
            .map(|t| {
                let (lo, hi) = (t * hop, t * hop + win);
                u8::from((0..k).flat_map(shifted).any(|(a, b)| a < hi && b > lo))
            })
            .collect();
        target_frames += q.iter().filter(|&&v| v == 1).count();
        if ex.gaps.len() != k - 1 || ex.gaps.iter().any(|&g| g > max_gap) {
            mismatches.push(format!("case {case}: gaps {:?}", ex.gaps));
        }
        if ex.offsets != offsets {
            mismatches.push(format!("case {case}: offsets {:?} vs {:?}", ex.offsets, offsets));
        }
        if ex.input.frames() != frames || ex.pvad_labels != q || ex.vad_labels != s {
            mismatches.push(format!("case {case}: labels differ ({} vs {frames} frames)", ex.pvad_labels.len()));
        }
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("500 concatenations, {target_frames} target frames, q identical")
        } else {
            format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
        },
    )
}

// ---------------------------------------------------------------- 4

fn snr_mixer() -> Outcome {
    let fx = FeatureExtractor::new(FeatureConfig::default()).expect("extractor");
    let (win, hop) = (320usize, 160usize);
    let mut utts = Vec::new();
    for s in 0..4u64 {
        let mut u = synth_utterance(&SpeakerSpec::sample(format!("n{s}"), 40 + s), 0.8, s).expect("synth");
        // headroom so the 0 dB mixes never clip
        u.audio.samples.iter_mut().for_each(|v| *v *= 0.25);
        utts.push(u);
    }
    let kinds: Vec<NoiseKind> = NoiseKind::TRAIN.iter().chain(&NoiseKind::HELD_OUT).copied().collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut clipped = 0;
    for &snr in &[0.0, 5.0, 10.0, 20.0, 30.0] {
        for (i, u) in utts.iter().enumerate() {
            for (j, &kind) in kinds.iter().enumerate() {
                let noise = generate_noise(kind, 24_000, 16_000, (i * 10 + j) as u64);
                let mixed = mix_noise(u, &noise, snr, (i * 100 + j) as u64, fx.framing()).expect("mix");
                if mixed.audio.samples.iter().any(|v| v.abs() >= 1.0) {
                    clipped += 1;
                }
                let mut mask = vec![false; u.audio.samples.len()];
                for (t, &l) in u.vad_labels.iter().enumerate() {
                    if l == 1 {
                        for m in &mut mask[t * hop..(t * hop + win).min(u.audio.samples.len())] {
                            *m = true;
                        }
                    }
                }
                let (mut ps, mut ns) = (0.0, 0usize);
                let mut pn = 0.0;
                for ((c, m), &on) in u.audio.samples.iter().zip(&mixed.audio.samples).zip(&mask) {
                    if on {
                        ps += c * c;
                        ns += 1;
                    }
                    pn += (m - c) * (m - c);
                }
                let measured = 10.0 * ((ps / ns as f64) / (pn / u.audio.samples.len() as f64)).log10();
                worst = worst.max((measured - snr).abs());
                checked += 1;
            }
        }
    }
    outcome(
        worst <= 0.1,
        format!("{checked} mixes at 0/5/10/20/30 dB, max |error| {worst:.2e} dB, {clipped} clipped"),
    )
}

// ---------------------------------------------------------------- 5

fn causality_check(
    model: &PvadModel,
    params: &ParamSet,
    x: &Array2<f64>,
    e: Option<&Array1<f64>>,
    r: &mut rng::Rng,
) -> (bool, f64) {
    let t = x.nrows();
    let full = model.posteriors(params, x.view(), e.map(|e| e.view())).expect("posteriors");
    let row_err = full.rows().into_iter().map(|row| (row.sum() - 1.0).abs()).fold(0.0, f64::max);
    let cut = r.gen_range(1..t);
    let mut y = x.clone();
    for i in cut..t {
        for v in y.row_mut(i) {
            *v += r.gen_range(-3.0..3.0);
        }
    }
    let pert = model.posteriors(params, y.view(), e.map(|e| e.view())).expect("posteriors");
    let same = (0..cut).all(|i| (0..2).all(|c| full[[i, c]].to_bits() == pert[[i, c]].to_bits()));
    (same, row_err)
}

fn causality(trained: Option<(&SeedResult, &SpeakerModel, &ExperimentConfig)>) -> Outcome {
    let mut r = rng::stream(5, "acceptance-causal", 0);
    let mut violations = 0;
    let mut worst_row = 0.0f64;
    let mut trials = 0;
    for trial in 0..60u64 {
        let embed = if trial % 3 == 0 { 0 } else { r.gen_range(1..8) };
        let dim = r.gen_range(1..10);
        let m = PvadModel::new(dim, embed, ModelConfig { hidden: r.gen_range(1..8), layers: r.gen_range(1..4), dropout: 0.5 });
        let mut p = ParamSet::new();
        m.init(&mut p, &mut r);
        let fit = Array2::from_shape_simple_fn((20, dim), || r.gen_range(-2.0..2.0));
        m.fit_normalization(&mut p, [fit.view()]).expect("normalization");
        let t = r.gen_range(2..80);
        let x = Array2::from_shape_simple_fn((t, dim), || r.gen_range(-4.0..4.0));
        let e = (embed > 0).then(|| Array1::from_shape_simple_fn(embed, || r.gen_range(-1.0..1.0)));
        let (same, row) = causality_check(&m, &p, &x, e.as_ref(), &mut r);
        violations += usize::from(!same);
        worst_row = worst_row.max(row);
        trials += 1;
    }
    let mut trained_models = 0;
    if let Some((seed, speaker, cfg)) = trained {
        let fx = FeatureExtractor::new(cfg.features).expect("extractor");
        let spk = SpeakerSpec::sample("probe", 77);
        let inputs: Vec<_> = (0..4)
            .map(|k| fx.extract(&synth_utterance(&spk, 0.9, 500 + k).expect("synth").audio).expect("features"))
            .collect();
        let emb = speaker.encode(&inputs[0]).expect("embedding");
        for t in &seed.trained {
            trained_models += 1;
            for x in &inputs {
                let e = t.model.is_personalized().then_some(&emb);
                let (same, row) = causality_check(&t.model, &t.params, &x.values, e, &mut r);
                violations += usize::from(!same);
                worst_row = worst_row.max(row);
                trials += 1;
            }
        }
    }
    outcome(
        violations == 0 && worst_row < 1e-9,
        format!(
            "{trials} checks ({trained_models} trained models), {violations} past-frame changes, max |row sum - 1| {worst_row:.2e}"
        ),
    )
}

/// Two training speakers' embeddings must move some posterior by > 0.1.
fn embedding_sensitivity(seed: &SeedResult, speaker: &SpeakerModel, cfg: &ExperimentConfig) -> Outcome {
    let fx = FeatureExtractor::new(cfg.features).expect("extractor");
    let utts = match read_corpus_utterances(&seed.dir.join("corpus"), fx.framing()) {
        Ok(u) => u,
        Err(e) => return outcome(false, format!("cannot read corpus: {e}")),
    };
    let mut by_speaker: BTreeMap<&str, &Utterance> = BTreeMap::new();
    for u in &utts {
        by_speaker.entry(u.speaker_id.as_deref().unwrap_or("")).or_insert(u);
    }
    let firsts: Vec<&Utterance> = by_speaker.values().copied().take(2).collect();
    let e: Vec<Array1<f64>> = firsts
        .iter()
        .map(|u| speaker.encode(&fx.extract(&u.audio).expect("features")).expect("embedding"))
        .collect();
    let x = fx.extract(&firsts[0].audio).expect("features");
    let mut diffs = Vec::new();
    for t in seed.trained.iter().filter(|t| t.model.is_personalized()) {
        let a = t.model.posteriors(&t.params, x.view(), Some(e[0].view())).expect("posteriors");
        let b = t.model.posteriors(&t.params, x.view(), Some(e[1].view())).expect("posteriors");
        diffs.push((&a - &b).iter().fold(0.0f64, |m, v| m.max(v.abs())));
    }
    let min = diffs.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        !diffs.is_empty() && min > 0.1,
        format!("max |posterior diff| per PVAD model {:?}", diffs.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>()),
    )
}

// ---------------------------------------------------------------- 6

fn similarity(seeds: &[SeedResult]) -> Outcome {
    let describe = |s: &SeedResult| {
        let st = &s.similarity;
        (
            quantile(&st.same_speaker, 0.5),
            quantile(&st.cross_speaker, 0.5),
            quantile(&st.cross_speaker, 0.9),
            quantile(&st.augmented_pairs, 0.5),
            quantile(&st.augmented_pairs, 0.95),
            st.self_similarity.iter().all(|&v| v == 1.0),
        )
    };
    let first = &seeds[0];
    let (same_med, cross_med, cross_p90, aug_med, aug_p95, self_one) = describe(first);
    let a = same_med > cross_med;
    let c = aug_p95 < 0.999 && aug_med > cross_p90;
    let time_ok = first.pretrain_seconds < 1800.0;
    let others: Vec<String> = seeds[1..]
        .iter()
        .map(|s| {
            let d = describe(s);
            format!("seed {}: aug median {:.3} vs cross p90 {:.3}", s.seed, d.3, d.2)
        })
        .collect();
    outcome(
        a && self_one && c && time_ok,
        format!(
            "seed {}: (a) same median {same_med:.3} > cross median {cross_med:.3}: {a}; (b) self all 1.0: {self_one}; \
             (c) aug p95 {aug_p95:.4} < 0.999, aug median {aug_med:.3} > cross p90 {cross_p90:.3}: {c}; \
             pretraining {:.0} s; [{}]",
            first.seed,
            first.pretrain_seconds,
            others.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 7, 8

fn clean_ordering(seeds: &[SeedResult], matrix_secs: f64) -> Outcome {
    let mut map_wins = 0;
    let mut ts_ok_all = true;
    let mut per_seed = Vec::new();
    for s in seeds {
        let get = |r, a| s.clean_of(r, a).expect("row present");
        let with = get(Regime::EnrollLess, true).map;
        let without = get(Regime::EnrollLess, false).map;
        let vad_ts = get(Regime::Vad, false).ap_ts;
        let min_pvad_ts = s
            .clean
            .iter()
            .filter(|m| m.regime != Regime::Vad)
            .map(|m| m.ap_ts)
            .fold(f64::INFINITY, f64::min);
        map_wins += usize::from(with > without);
        ts_ok_all &= min_pvad_ts > vad_ts;
        per_seed.push(format!(
            "seed {}: mAP aug {with:.4} vs no-aug {without:.4}, min PVAD AP(ts) {min_pvad_ts:.4} vs VAD {vad_ts:.4}",
            s.seed
        ));
    }
    outcome(
        map_wins >= 2 && ts_ok_all && matrix_secs < 7200.0,
        format!("{map_wins}/{} seeds aug wins; {}; matrix {matrix_secs:.0} s", seeds.len(), per_seed.join("; ")),
    )
}

fn noise_trend(seeds: &[SeedResult]) -> Outcome {
    let mut wins = 0;
    let mut per_seed = Vec::new();
    for s in seeds {
        let at = |snr| s.noisy_of(Regime::EnrollLess, true, snr).map(|m| m.map);
        match (at(20.0), at(5.0)) {
            (Some(hi), Some(lo)) => {
                wins += usize::from(hi >= lo);
                per_seed.push(format!("seed {}: 20 dB {hi:.4} vs 5 dB {lo:.4}", s.seed));
            }
            _ => per_seed.push(format!("seed {}: missing 5 or 20 dB row", s.seed)),
        }
    }
    outcome(wins >= 2, format!("{wins}/{} seeds; {}", seeds.len(), per_seed.join("; ")))
}

// ---------------------------------------------------------------- 9

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seeds: vec![11],
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

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).expect("read dir") {
            let p = entry.expect("dir entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).expect("prefix").to_path_buf(), std::fs::read(&p).expect("read"));
            }
        }
    }
    out
}

fn determinism(out: &Path) -> Outcome {
    let cfg = tiny_config();
    let (a, b) = (out.join("determinism-a"), out.join("determinism-b"));
    for dir in [&a, &b] {
        if let Err(e) = run_matrix(&cfg, dir, true) {
            return outcome(false, format!("tiny matrix failed: {e}"));
        }
    }
    let (fa, fb) = (files(&a), files(&b));
    let csvs = fa.keys().filter(|p| p.extension().is_some_and(|e| e == "csv")).count();
    let differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .filter(|p| fa.get(*p) != fb.get(*p))
        .map(|p| p.display().to_string())
        .collect();
    outcome(
        differing.is_empty() && csvs > 0,
        if differing.is_empty() {
            format!("{} files identical across reruns, {csvs} of them CSV", fa.len())
        } else {
            format!("differing: {}", differing.join(", "))
        },
    )
}

// ---------------------------------------------------------------- 10

fn frozen_encoder(seeds: &[SeedResult]) -> Outcome {
    let mut bad = Vec::new();
    for s in seeds {
        let on_disk = std::fs::read(s.dir.join("speaker.ckpt")).map(|b| digest(&b)).unwrap_or_default();
        let (before, after) = &s.encoder_digest;
        if before != after || *before != on_disk {
            bad.push(s.seed);
        }
    }
    outcome(
        bad.is_empty(),
        format!(
            "{} seeds x {} detector runs, encoder digest unchanged{}",
            seeds.len(),
            seeds.first().map_or(0, |s| s.trained.len()),
            if bad.is_empty() { String::new() } else { format!("; changed in seeds {bad:?}") }
        ),
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("tempdir");
    let out = std::env::var_os("PVAD_ACCEPTANCE_OUT").map_or_else(|| tmp.path().to_path_buf(), PathBuf::from);
    let mut results: Vec<(String, Outcome)> = Vec::new();
    let mut run = |label: &str, o: Outcome| {
        report(label, &o);
        results.push((label.to_string(), o));
    };

    run("criterion 1", gradient_fidelity());
    run("criterion 2", ap_equivalence());
    run("criterion 3", label_oracle());
    run("criterion 4", snr_mixer());

    let cfg = ExperimentConfig::default();
    let start = Instant::now();
    let matrix = run_matrix(&cfg, &out.join("matrix"), true);
    let matrix_secs = start.elapsed().as_secs_f64();
    match &matrix {
        Ok(seeds) => {
            let speaker = SpeakerModel::from_checkpoint(
                pvad_core::nn::Checkpoint::load(&seeds[0].dir.join("speaker.ckpt")).expect("speaker checkpoint"),
            )
            .expect("speaker model");
            run("criterion 5", causality(Some((&seeds[0], &speaker, &cfg))));
            run("criterion 6", similarity(seeds));
            run("criterion 7", clean_ordering(seeds, matrix_secs));
            run("criterion 8", noise_trend(seeds));
            run("criterion 9", determinism(&out));
            run("criterion 10", frozen_encoder(seeds));
            run("embedding sensitivity", embedding_sensitivity(&seeds[0], &speaker, &cfg));
        }
        Err(e) => {
            run("criterion 5", causality(None));
            for c in 6..=8 {
                run(&format!("criterion {c}"), outcome(false, format!("matrix failed: {e}")));
            }
            run("criterion 9", determinism(&out));
            run("criterion 10", outcome(false, format!("matrix failed: {e}")));
        }
    }

    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0.as_str()).collect();
    println!(
        "acceptance: {}/{} passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
