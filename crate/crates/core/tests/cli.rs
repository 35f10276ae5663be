use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use twostream::training::read_log;

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twostream"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = cli(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(tree(&path));
        } else {
            out.push((path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let config = d.join("run.json");
    fs::write(
        &config,
        r#"{"seed": 4, "model": {"size": "toy"}, "train": {"batch_size": 2, "log_every": 1, "checkpoint_every": 0}}"#,
    )
    .unwrap();
    let (data, data2) = (d.join("data"), d.join("data2"));
    ok(&["gen-data", "--config", p(&config), "--out", p(&data)]);
    ok(&["gen-data", "--config", p(&config), "--out", p(&data2)]);
    let a = tree(&data);
    assert!(a.len() > 2);
    assert_eq!(a, tree(&data2));

    let o = cli(&["gen-data", "--config", p(&config), "--out", p(&data)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim().lines().count(), 1);
    assert!(err.contains("\"exit_code\":2"));
    ok(&["gen-data", "--config", p(&config), "--out", p(&data), "--force"]);

    let run = d.join("run");
    ok(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&run), "--steps", "1"]);
    let log = read_log(&run.join("metrics.csv")).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].step, 0);
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());
    assert_eq!(code(&cli(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&run), "--steps", "1"])), 2);

    let eval = d.join("eval");
    for mode in ["teacher-forced", "free-running"] {
        let table = ok(&[
            "eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "train", "--mode", mode, "--out", p(&eval),
        ]);
        assert!(table.contains("overall"));
        let csv = fs::read_to_string(eval.join(format!("eval_train_{mode}.csv"))).unwrap();
        let overall = csv.lines().last().unwrap();
        let mcd: f64 = overall.split(',').nth(2).unwrap().parse().unwrap();
        assert!(mcd.is_finite() && mcd > 0.0);
    }

    let dump = d.join("dump");
    for stream in ["pronunciation", "prosody"] {
        ok(&[
            "dump-encodings", "--checkpoint", p(&ckpt), "--data", p(&data), "--stream", stream, "--out", p(&dump),
        ]);
        let text = fs::read_to_string(dump.join(format!("encodings_{stream}_train.tsv"))).unwrap();
        assert!(text.starts_with("utterance\tposition\tphoneme\tlabel\tlanguage\tv0"));
        assert!(text.lines().count() > 1);
    }
    let o = cli(&["dump-encodings", "--checkpoint", p(&ckpt), "--data", p(&data), "--stream", "joint", "--out", p(&dump)]);
    assert_eq!(code(&o), 2);

    let manifest = fs::read_to_string(data.join("manifest.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(manifest.lines().next().unwrap()).unwrap();
    let line = serde_json::json!({
        "id": "probe",
        "language": first["language"],
        "speaker": first["speaker"],
        "words": first["words"],
        "marks": first["marks"],
    });
    let input = d.join("in.jsonl");
    fs::write(&input, format!("{line}\n")).unwrap();
    let synth = d.join("synth");
    ok(&["synth", "--checkpoint", p(&ckpt), "--input", p(&input), "--out", p(&synth), "--max-frames", "5"]);
    let track = twostream::features::read_features(&synth.join("probe.feat")).unwrap();
    assert!((1..=5).contains(&track.num_frames()));
    assert!(fs::read_to_string(synth.join("synth.jsonl")).unwrap().contains("\"probe\""));
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let o = cli(&["eval", "--checkpoint", p(&d.join("none.ckpt")), "--data", p(d), "--out", p(&d.join("o"))]);
    assert_eq!(code(&o), 3);
    let bad = d.join("bad.json");
    fs::write(&bad, r#"{"train": {"batchsize": 3}}"#).unwrap();
    assert_eq!(code(&cli(&["gen-data", "--config", p(&bad), "--out", p(&d.join("x"))])), 2);
    assert_eq!(code(&cli(&["gen-data"])), 2);
    assert_eq!(code(&cli(&["train", "--data", p(&d.join("missing")), "--out", p(&d.join("r"))])), 3);
}
