//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! to stderr as soon as it has been evaluated; the test fails if any
//! criterion fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use twostream::autodiff::{relative_error, Graph, ParamGroup, ParamStore};
use twostream::features::{generate_synthetic_corpus, Corpus, FeatureTrack, GeneratorConfig, Split, Utterance, VUV};
use twostream::frontend::{FrontendConfig, LanguageSpec};
use twostream::metrics::{evaluate, f0_metrics, mcd, vuv_err, EvalMode};
use twostream::model::{dump_encodings, EncodingRow, Generated, Model, ModelConfig, Stream};
use twostream::training::{
    batch_loss, make_batches, read_log, schedule_table, train, LogRow, Objective, TrainConfig, TrainOutcome, LOG_FILE,
};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Suite {
    results: Vec<(usize, bool)>,
}

impl Suite {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        let line = format!("criterion {n:>2}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
        // Bypass the test harness capture so the lines always reach the log.
        let _ = std::io::stderr().write_all(line.as_bytes());
        self.results.push((n, pass));
    }
}

fn gen(f: impl FnOnce(&mut GeneratorConfig)) -> GeneratorConfig {
    let mut g = GeneratorConfig::default();
    f(&mut g);
    g
}

fn eq1_gap(row: &LogRow, lambda: f64) -> f64 {
    (row.loss_total - (row.loss_rec - lambda * row.loss_spk)).abs()
}

// 1. Finite differences over the whole toy model.
fn gradient_check(s: &mut Suite) {
    let t = Instant::now();
    let g = gen(|g| {
        g.words_per_utterance = (1, 1);
        g.syllables_per_word = (2, 2);
        g.frames_per_phoneme = (2, 2);
        g.split_ratio = (1, 0, 0);
    });
    let c = generate_synthetic_corpus(&g, 11).unwrap();
    let batch: Vec<&Utterance> = (0..c.num_languages())
        .map(|l| c.utterances.iter().find(|u| u.sequence.language == l).unwrap())
        .collect();
    let max_l = batch.iter().map(|u| u.sequence.len()).max().unwrap();
    let max_t = batch.iter().map(|u| u.normalized.num_frames()).max().unwrap();
    let cfg = ModelConfig::toy(&c.frontend, c.num_speakers());
    let widest = [
        cfg.d_a, cfg.d_p, cfg.ipa_emb_dim, cfg.prosody_emb_dim, cfg.lang_emb_dim, cfg.spk_emb_dim,
        cfg.attention_dim, cfg.location_filters, cfg.attention_lstm_dim, cfg.dec_a_dim, cfg.dec_p_dim,
        cfg.classifier_hidden,
    ]
    .into_iter()
    .chain(cfg.prenet_dims.iter().copied())
    .max()
    .unwrap();
    let model = Model::new(cfg, 5).unwrap();
    let loss = |store: &ParamStore| {
        let mut gr = Graph::new(store);
        let n = batch_loss(&mut gr, &model, &batch, 0.05, Objective::Direct, 0).unwrap();
        gr.value(n.objective).data()[0]
    };
    let grads = {
        let mut gr = Graph::new(&model.params);
        let n = batch_loss(&mut gr, &model, &batch, 0.05, Objective::Direct, 0).unwrap();
        gr.backward(n.objective).unwrap()
    };
    // Every element is compared with a central difference. Where that
    // estimate is limited by rounding (gradients near 1e-8 against a loss
    // near 5), it is replaced by a fourth-order stencil with a larger step.
    let mut store = model.params.clone();
    let (mut worst, mut worst_at, mut checked, mut refined) = (0.0f64, String::new(), 0, 0);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            let mut at = |d: f64| {
                store.get_mut(id).data_mut()[i] = orig + d;
                let v = loss(&store);
                store.get_mut(id).data_mut()[i] = orig;
                v
            };
            let analytic = grads.get(id).data()[i];
            let h = 1e-4;
            let mut err = relative_error(analytic, (at(h) - at(-h)) / (2.0 * h));
            if err > 1e-5 {
                let h = 2e-3;
                let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                err = relative_error(analytic, numeric);
                refined += 1;
            }
            checked += 1;
            if err > worst {
                worst = err;
                worst_at = format!("{}[{i}]", model.params.name(id));
            }
        }
    }
    let elapsed = t.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(60) && widest <= 8 && max_l <= 4 && max_t <= 8;
    s.record(
        1,
        pass,
        format!(
            "max rel error {worst:.2e} (at {worst_at}) over all {checked} parameters ({refined} refined), widths <= {widest}, L={max_l}, T={max_t}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

// 2. The logged total matches loss_rec - λ·loss_spk on every row.
fn loss_bookkeeping(s: &mut Suite, overfit_logs: &[Vec<LogRow>]) {
    let dir = tempfile::tempdir().unwrap();
    let c = generate_synthetic_corpus(&GeneratorConfig::default(), 2).unwrap();
    let mut m = Model::new(ModelConfig::toy(&c.frontend, 2), 2).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        max_steps: 40,
        log_every: 1,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    train(&mut m, &c, &cfg, Some(dir.path()), false).unwrap();
    let rows = read_log(&dir.path().join(LOG_FILE)).unwrap();
    let all: Vec<&LogRow> = rows.iter().chain(overfit_logs.iter().flatten()).collect();
    let worst = all.iter().map(|r| eq1_gap(r, 0.05)).fold(0.0, f64::max);
    s.record(
        2,
        worst < 1e-9 && rows.len() == 40,
        format!("max |gap| {worst:.2e} over {} logged rows (lambda 0.05)", all.len()),
    );
}

// 3. Reversal layer versus the explicitly negated speaker loss.
fn grl_equivalence(s: &mut Suite) {
    let c = generate_synthetic_corpus(&GeneratorConfig::default(), 3).unwrap();
    let model = Model::new(ModelConfig::desk(&c.frontend, 2), 3).unwrap();
    let mut worst: f64 = 0.0;
    for u in c.utterances.iter().take(4) {
        let x = {
            let mut g = Graph::new(&model.params);
            let mut gen = Generated::new();
            let e = model.encode(&mut g, &mut gen, &u.sequence).unwrap();
            g.value(e.x).clone()
        };
        let len = x.shape()[1];
        let speakers = vec![u.sequence.speaker; len];
        let mut store = model.params.clone();
        let xid = store.add("probe.encoder_output", x, ParamGroup::Shared);
        for lambda in [0.01, 0.05, 1.0] {
            let grad = |grl: Option<f64>| {
                let mut g = Graph::new(&store);
                let x = g.param(xid);
                let logits = model.speaker_logits(&mut g, x, grl).unwrap();
                let ce = g.cross_entropy_logits(logits, &speakers, &vec![1.0; len]).unwrap();
                let obj = match grl {
                    Some(_) => ce,
                    None => g.affine(ce, -lambda, 0.0).unwrap(),
                };
                g.backward(obj).unwrap().get(xid).clone()
            };
            let (a, b) = (grad(Some(lambda)), grad(None));
            let d = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(a.data().iter().any(|v| *v != 0.0));
            worst = worst.max(d);
        }
    }
    s.record(3, worst < 1e-10, format!("max abs diff {worst:.2e} for lambda in {{0.01, 0.05, 1.0}}"));
}

// 4. Alignment rows are distributions.
fn attention_rows(s: &mut Suite, trained: Option<&Model>) {
    let c = generate_synthetic_corpus(&GeneratorConfig::default(), 4).unwrap();
    let fresh = Model::new(ModelConfig::desk(&c.frontend, 2), 4).unwrap();
    let mut worst: f64 = 0.0;
    let mut rows = 0;
    for m in std::iter::once(&fresh).chain(trained) {
        for u in &c.utterances {
            let tf = m.teacher_forced_forward(&u.sequence, &u.normalized).unwrap();
            for a in &tf.alignments {
                worst = worst.max((a.iter().sum::<f64>() - 1.0).abs());
                assert!(a.iter().all(|&v| v >= 0.0));
                rows += 1;
            }
        }
    }
    s.record(4, worst < 1e-9, format!("max |row sum - 1| {worst:.2e} over {rows} alignment rows"));
}

fn overfit_corpus(seed: u64) -> Corpus {
    generate_synthetic_corpus(&gen(|g| g.split_ratio = (1, 0, 0)), seed).unwrap()
}

fn overfit_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        max_steps: 3000,
        log_every: 1,
        checkpoint_every: 0,
        grad_clip: Some(1.0),
        stop_at_loss_rec: Some(0.05),
        seed,
        ..TrainConfig::default()
    }
}

// 5. Overfitting the eight-utterance corpus.
fn overfit(s: &mut Suite) -> Vec<(u64, Model, TrainOutcome)> {
    let t = Instant::now();
    let mut runs = Vec::new();
    for seed in SEEDS {
        let c = overfit_corpus(seed);
        assert_eq!(c.utterances.len(), 8);
        let mut m = Model::new(ModelConfig::desk(&c.frontend, 2), seed).unwrap();
        let o = train(&mut m, &c, &overfit_train_config(seed), None, false).unwrap();
        runs.push((seed, m, o));
    }
    let elapsed = t.elapsed();
    let reached = runs.iter().filter(|(_, _, o)| o.reached_target).count();
    let detail: Vec<String> = runs
        .iter()
        .map(|(seed, _, o)| format!("seed {seed}: {} steps, loss_rec {:.4}", o.steps, o.last.loss_rec))
        .collect();
    s.record(
        5,
        reached >= 4 && elapsed < Duration::from_secs(900),
        format!("{reached}/5 reached loss_rec < 0.05 in {:.0}s [{}]", elapsed.as_secs_f64(), detail.join("; ")),
    );
    runs
}

/// Held-out accuracy of a least-squares linear classifier. Rows of even
/// utterances train, rows of odd utterances test.
fn probe_accuracy(rows: &[EncodingRow], label: impl Fn(&EncodingRow) -> &str) -> f64 {
    let classes: BTreeMap<&str, usize> = {
        let mut names: Vec<&str> = rows.iter().map(&label).collect();
        names.sort();
        names.dedup();
        names.into_iter().enumerate().map(|(i, n)| (n, i)).collect()
    };
    let mut utts: Vec<&str> = rows.iter().map(|r| r.utterance.as_str()).collect();
    utts.dedup();
    let train_utts: std::collections::HashSet<&str> = utts.iter().copied().step_by(2).collect();
    let (train, test): (Vec<&EncodingRow>, Vec<&EncodingRow>) =
        rows.iter().partition(|r| train_utts.contains(r.utterance.as_str()));
    let dim = rows[0].vector.len() + 1;
    let design = |rs: &[&EncodingRow]| {
        DMatrix::from_fn(rs.len(), dim, |i, j| if j + 1 == dim { 1.0 } else { rs[i].vector[j] })
    };
    let x = design(&train);
    let y = DMatrix::from_fn(train.len(), classes.len(), |i, k| {
        if classes[label(train[i])] == k {
            1.0
        } else {
            0.0
        }
    });
    let ridge = DMatrix::<f64>::identity(dim, dim) * 1e-6;
    let w = (x.transpose() * &x + ridge).cholesky().expect("positive definite").solve(&(x.transpose() * y));
    let scores = design(&test) * w;
    let correct = (0..test.len())
        .filter(|&i| scores.row(i).transpose().argmax().0 == classes[label(test[i])])
        .count();
    100.0 * correct as f64 / test.len() as f64
}

// 6. Linear probes on the two encoders of an overfit model.
fn decoupling(s: &mut Suite, runs: &[(u64, Model, TrainOutcome)]) {
    let probe_corpus = generate_synthetic_corpus(&gen(|g| g.utterances_per_language = 60), 1000).unwrap();
    let utts: Vec<&Utterance> = probe_corpus.utterances.iter().collect();
    let mut holds = 0;
    let mut detail = Vec::new();
    for (seed, m, _) in runs {
        let a = dump_encodings(m, &probe_corpus.frontend, &utts, Stream::Pronunciation, None).unwrap();
        let p = dump_encodings(m, &probe_corpus.frontend, &utts, Stream::Prosody, None).unwrap();
        let pros_on_p = probe_accuracy(&p, |r| &r.label);
        let pros_on_a = probe_accuracy(&a, |r| &r.label);
        let ph_on_a = probe_accuracy(&a, |r| &r.phoneme);
        let ph_on_p = probe_accuracy(&p, |r| &r.phoneme);
        let ok = pros_on_p >= pros_on_a + 10.0 && ph_on_a >= ph_on_p + 10.0;
        holds += ok as usize;
        detail.push(format!(
            "seed {seed}: prosody label {pros_on_p:.1}% (prosody enc) vs {pros_on_a:.1}% (pronunciation enc), phoneme {ph_on_a:.1}% vs {ph_on_p:.1}%"
        ));
    }
    s.record(6, holds >= 3, format!("holds on {holds}/5 overfit models [{}]", detail.join("; ")));
}

const ABLATION_STEPS: usize = 1500;

fn ablation_corpus(seed: u64) -> Corpus {
    generate_synthetic_corpus(
        &gen(|g| {
            g.utterances_per_language = 24;
            g.split_ratio = (2, 1, 0);
        }),
        seed,
    )
    .unwrap()
}

// 7. Dev F0-RMSE of the two-stream model versus the single-stream ablation.
fn ablation(s: &mut Suite) {
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in SEEDS {
        let c = ablation_corpus(seed);
        let cfg = TrainConfig {
            batch_size: 8,
            max_steps: ABLATION_STEPS,
            log_every: 100,
            checkpoint_every: 0,
            grad_clip: Some(1.0),
            seed,
            ..TrainConfig::default()
        };
        let mut rmse = Vec::new();
        for single in [false, true] {
            let mc = ModelConfig {
                single_stream_ablation: single,
                ..ModelConfig::desk(&c.frontend, 2)
            };
            let mut m = Model::new(mc, seed).unwrap();
            train(&mut m, &c, &cfg, None, false).unwrap();
            let r = evaluate(&m, &c, Split::Dev, EvalMode::TeacherForced).unwrap();
            rmse.push(r.overall().f0_rmse_hz.unwrap_or(f64::INFINITY));
        }
        wins += (rmse[0] <= rmse[1]) as usize;
        detail.push(format!("seed {seed}: {:.2} vs {:.2} Hz", rmse[0], rmse[1]));
    }
    s.record(
        7,
        wins >= 4,
        format!("two-stream <= single-stream on {wins}/5 seeds [{}]", detail.join("; ")),
    );
}

fn track(frames: Vec<[f64; twostream::features::FRAME_DIM]>) -> FeatureTrack {
    FeatureTrack::new(frames).unwrap()
}

// 8. Metric oracles.
fn metric_oracles(s: &mut Suite) {
    let zero = [0.0; twostream::features::FRAME_DIM];
    let mut moved = zero;
    moved[5] = 1.0;
    let want = 10.0 / std::f64::consts::LN_10 * 2f64.sqrt();
    let mcd_err = (mcd(&track(vec![zero]), &track(vec![moved])).unwrap() - want).abs();

    let voiced = |hz: f64| {
        let mut f = zero;
        f[twostream::features::LOGF0] = hz.ln();
        f[VUV] = 1.0;
        f
    };
    let r = track(vec![voiced(100.0), voiced(140.0), voiced(120.0), zero]);
    let p = track(vec![voiced(100.0), voiced(140.0), voiced(120.0), voiced(130.0)]);
    let vuv = vuv_err(&r, &p).unwrap();

    let shifted = track(vec![voiced(125.0), voiced(165.0), voiced(145.0), zero]);
    let corr = f0_metrics(&r, &shifted).unwrap().corr.unwrap();
    let pass = mcd_err < 1e-9 && vuv == 25.0 && (corr - 1.0).abs() < 1e-12;
    s.record(
        8,
        pass,
        format!("MCD error {mcd_err:.1e}, V/UV-ERR {vuv}, F0-CORR of shifted contour {corr:.15}"),
    );
}

// 9. Learning-rate schedule.
fn schedule(s: &mut Suite) {
    let table = schedule_table(&TrainConfig::default(), 45001);
    let bad = table
        .iter()
        .filter(|&&(step, lr, lr_p)| {
            let expected = 1e-3 / (1u64 << (step / 15000)) as f64;
            lr != expected || lr_p != expected / 2.0
        })
        .count();
    let ends = (table[14999].1, table[15000].1, table[45000].1, table[45000].2);
    s.record(
        9,
        bad == 0 && table.len() == 45001,
        format!("{bad} mismatching rows of {}; lr at 14999/15000/45000 = {:e}/{:e}/{:e}, prosody {:e}", table.len(), ends.0, ends.1, ends.2, ends.3),
    );
}

// 10. Language balance of batches in a five-language corpus.
fn batch_balance(s: &mut Suite) {
    let base = FrontendConfig::default();
    let symbols = base.languages[0].symbols.clone();
    let mut frontend = base.clone();
    frontend.languages = (0..5)
        .map(|i| LanguageSpec {
            name: format!("l{i}"),
            tonal: i % 2 == 0,
            symbols: symbols.iter().skip(i % 3).cloned().collect(),
        })
        .collect();
    let c = generate_synthetic_corpus(
        &gen(|g| {
            g.frontend = frontend;
            g.utterances_per_language = 13;
        }),
        10,
    )
    .unwrap();
    let batches = make_batches(&c, 50, 10, 200).unwrap();
    let bad = batches
        .iter()
        .filter(|b| (0..5).any(|l| b.iter().filter(|&&i| c.utterances[i].sequence.language == l).count() != 10))
        .count();
    s.record(10, bad == 0, format!("{bad} unbalanced of {} batches of 50 over 5 languages", batches.len()));
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(files(&path));
        } else {
            out.push((path.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

// 11. Identical seeds give identical corpora and loss logs.
fn determinism(s: &mut Suite) {
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    let mut logs = Vec::new();
    for run in 0..2 {
        let dir = tmp.path().join(format!("run{run}"));
        let c = generate_synthetic_corpus(&GeneratorConfig::default(), 77).unwrap();
        c.save(&dir.join("data"), false).unwrap();
        let c = Corpus::load(&dir.join("data")).unwrap();
        let mut m = Model::new(ModelConfig::desk(&c.frontend, 2), 77).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            max_steps: 30,
            log_every: 1,
            checkpoint_every: 0,
            seed: 77,
            ..TrainConfig::default()
        };
        train(&mut m, &c, &cfg, Some(&dir.join("train")), false).unwrap();
        trees.push(files(&dir.join("data")));
        logs.push(std::fs::read(dir.join("train").join(LOG_FILE)).unwrap());
    }
    s.record(
        11,
        trees[0] == trees[1] && logs[0] == logs[1] && !logs[0].is_empty(),
        format!("{} corpus files byte-identical: {}, loss logs byte-identical: {}", trees[0].len(), trees[0] == trees[1], logs[0] == logs[1]),
    );
}

/// `ACCEPTANCE_CRITERIA=1,3,8` restricts the run to the listed criteria.
fn selected() -> impl Fn(usize) -> bool {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_CRITERIA")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    move |n| only.as_ref().is_none_or(|o| o.contains(&n))
}

#[test]
fn acceptance() {
    let want = selected();
    let mut s = Suite { results: Vec::new() };
    if want(1) {
        gradient_check(&mut s);
    }
    if want(3) {
        grl_equivalence(&mut s);
    }
    if want(8) {
        metric_oracles(&mut s);
    }
    if want(9) {
        schedule(&mut s);
    }
    if want(10) {
        batch_balance(&mut s);
    }
    if want(11) {
        determinism(&mut s);
    }
    let runs = if want(5) { overfit(&mut s) } else { Vec::new() };
    if want(2) {
        let logs: Vec<Vec<LogRow>> = runs.iter().map(|(_, _, o)| o.log.clone()).collect();
        loss_bookkeeping(&mut s, &logs);
    }
    if want(4) {
        attention_rows(&mut s, runs.first().map(|(_, m, _)| m));
    }
    if want(6) && !runs.is_empty() {
        decoupling(&mut s, &runs);
    }
    if want(7) {
        ablation(&mut s);
    }

    s.results.sort();
    let failed: Vec<usize> = s.results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    let _ = writeln!(
        std::io::stderr(),
        "acceptance: {}/{} criteria passed",
        s.results.len() - failed.len(),
        s.results.len()
    );
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
