use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use voicerank_core::training::TrainConfig;

const BIN: &str = env!("CARGO_BIN_EXE_voicerank");

fn run(args: &[&str]) -> Output {
    let out = Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "voicerank {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 output")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn small_config() -> String {
    let mut cfg = TrainConfig::desk();
    cfg.ubm.components = 16;
    cfg.ppca.ivector_dim = 32;
    cfg.plda.speaker_dim = 10;
    toml::to_string(&cfg).expect("config serializes")
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    trained: PathBuf,
    indexed: PathBuf,
    ids: PathBuf,
}

impl Workspace {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// Synthetic corpus, trained models and a built index, shared by all tests.
fn workspace() -> &'static Workspace {
    static WS: OnceLock<Workspace> = OnceLock::new();
    WS.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let corpus = root.join("corpus");
        run(&[
            "synth",
            "--speakers",
            "12",
            "--enroll-per-speaker",
            "6",
            "--test-per-speaker",
            "2",
            "--separation",
            "1.0",
            "--test-seconds",
            "8",
            "--seed",
            "5",
            "-o",
            s(&corpus),
        ]);
        let config = root.join("train.toml");
        std::fs::write(&config, small_config()).expect("write config");
        let trained = root.join("trained.vrk1");
        let ids = root.join("train_ids.txt");
        run(&[
            "train",
            "--utterances",
            s(&corpus.join("enroll.csv")),
            "--config",
            s(&config),
            "--ids-out",
            s(&ids),
            "-o",
            s(&trained),
        ]);
        let embeddings = root.join("enroll.jsonl");
        run(&[
            "enroll",
            "--models",
            s(&trained),
            "--utterances",
            s(&corpus.join("enroll.csv")),
            "-o",
            s(&embeddings),
        ]);
        let indexed = root.join("indexed.vrk1");
        run(&[
            "build-index",
            "--models",
            s(&trained),
            "--embeddings",
            s(&embeddings),
            "--metadata",
            s(&corpus.join("metadata.jsonl")),
            "-o",
            s(&indexed),
        ]);
        Workspace {
            _dir: dir,
            root,
            config,
            trained,
            indexed,
            ids,
        }
    })
}

#[test]
fn synth_writes_a_complete_corpus() {
    let ws = workspace();
    let corpus = ws.path("corpus");
    for f in ["enroll.csv", "test.csv", "metadata.jsonl", "trials.csv", "plan.json"] {
        assert!(corpus.join(f).is_file(), "{f} missing");
    }
    let wavs = std::fs::read_dir(corpus.join("wav")).unwrap().count();
    assert_eq!(wavs, 12 * (6 + 2));
    let metadata = std::fs::read_to_string(corpus.join("metadata.jsonl")).unwrap();
    assert_eq!(metadata.lines().count(), 12 * 6);
    let trials = std::fs::read_to_string(corpus.join("trials.csv")).unwrap();
    assert_eq!(trials.lines().count(), 1 + 12 * 2 * 2 * 2);
}

#[test]
fn rank_test_places_strongly_separated_speakers_first() {
    let ws = workspace();
    let csv = ws.path("ranks.csv");
    let out = run(&[
        "rank-test",
        "--models",
        s(&ws.indexed),
        "--clips",
        s(&ws.path("corpus/test.csv")),
        "-o",
        s(&csv),
    ]);
    let table = stdout(&out);
    assert!(table.contains("total (%)"), "{table}");
    let text = std::fs::read_to_string(&csv).unwrap();
    let ranks: Vec<&str> = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(ranks.len(), 24);
    let first = ranks.iter().filter(|r| **r == "1").count();
    assert!(first * 10 >= ranks.len() * 9, "{table}");
}

#[test]
fn rank_test_rejects_unknown_speakers_unless_allowed() {
    let ws = workspace();
    let list = ws.path("unknown.csv");
    let test = std::fs::read_to_string(ws.path("corpus/test.csv")).unwrap();
    let mut lines = test.lines();
    let header = lines.next().unwrap();
    let row = lines.next().unwrap();
    let mut fields: Vec<String> = row.split(',').map(String::from).collect();
    fields[1] = "nobody".into();
    fields[2] = ws.path("corpus").join(&fields[2]).to_str().unwrap().to_string();
    std::fs::write(&list, format!("{header}\n{}\n", fields.join(","))).unwrap();

    let args = ["rank-test", "--models", s(&ws.indexed), "--clips", s(&list)];
    let failed = Command::new(BIN).args(args).output().unwrap();
    assert!(!failed.status.success());
    assert!(String::from_utf8_lossy(&failed.stderr).contains("nobody"));

    let mut allowed = args.to_vec();
    allowed.push("--allow-unknown");
    let table = stdout(&run(&allowed));
    assert!(table.lines().any(|l| l.starts_with("nobody") && l.contains(" x ")), "{table}");
}

#[test]
fn eval_eer_labels_the_split_from_training_ids() {
    let ws = workspace();
    let corpus = ws.path("corpus");
    let scored = ws.path("scored.csv");
    let (enroll, test, trials) = (corpus.join("enroll.csv"), corpus.join("test.csv"), corpus.join("trials.csv"));
    let base = [
        "eval-eer",
        "--models",
        s(&ws.trained),
        "--utterances",
        s(&enroll),
        "--utterances",
        s(&test),
        "--trials",
        s(&trials),
    ];
    let parse = |out: &str| -> (String, f64) {
        let row = out.lines().nth(1).unwrap().to_string();
        let f: Vec<&str> = row.split(',').collect();
        (f[3].to_string(), f[4].parse().unwrap())
    };

    let mut args = base.to_vec();
    args.extend(["--train-ids", s(&ws.ids), "-o", s(&scored)]);
    let (split, eer) = parse(&stdout(&run(&args)));
    assert_eq!(split, "contaminated");
    assert!(eer < 20.0, "eer {eer}");
    assert_eq!(std::fs::read_to_string(&scored).unwrap().lines().count(), 1 + 96);

    let empty = ws.path("no_ids.txt");
    std::fs::write(&empty, "").unwrap();
    let mut args = base.to_vec();
    args.extend(["--train-ids", s(&empty)]);
    assert_eq!(parse(&stdout(&run(&args))).0, "clean");
    assert_eq!(parse(&stdout(&run(&base))).0, "unlabeled");
}

#[test]
fn length_sweep_accuracy_does_not_fall_with_longer_clips() {
    let ws = workspace();
    let out = stdout(&run(&[
        "length-sweep",
        "--models",
        s(&ws.indexed),
        "--clips",
        s(&ws.path("corpus/test.csv")),
        "--lengths",
        "1,8",
    ]));
    let top1: Vec<f64> = out
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect::<Vec<_>>())
        .filter(|f| f[1] == "1")
        .map(|f| f[2].parse().unwrap())
        .collect();
    assert_eq!(top1.len(), 2, "{out}");
    assert!(top1[0] <= top1[1] && top1[1] >= 90.0, "{out}");
}

#[test]
fn bench_reports_all_stages_for_the_full_pipeline() {
    let ws = workspace();
    let csv = ws.path("bench.csv");
    run(&[
        "bench",
        "--models",
        s(&ws.trained),
        "--sizes",
        "500,2000",
        "--runs",
        "3",
        "--probe-seconds",
        "3",
        "-o",
        s(&csv),
    ]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "n,stage,median_ms,mean_ms,sd_ms");
    for n in ["500", "2000"] {
        let stages: Vec<&str> = text
            .lines()
            .skip(1)
            .filter(|l| l.starts_with(&format!("{n},")))
            .map(|l| l.split(',').nth(1).unwrap())
            .collect();
        assert_eq!(stages, voicerank_core::pipeline::STAGES.to_vec(), "{text}");
    }
}

#[test]
fn bench_without_models_times_scoring_only() {
    let out = stdout(&run(&[
        "bench",
        "--sizes",
        "1000,4000",
        "--runs",
        "3",
        "--ivector-dim",
        "40",
        "--speaker-dim",
        "16",
        "--precision",
        "f32",
    ]));
    assert!(out.contains("plda_score"), "{out}");
    assert!(!out.contains("audio_load_mfcc"), "{out}");
}

#[test]
fn retraining_with_the_same_seed_gives_identical_containers() {
    let ws = workspace();
    let again = ws.path("again.vrk1");
    run(&[
        "train",
        "--utterances",
        s(&ws.path("corpus/enroll.csv")),
        "--config",
        s(&ws.config),
        "-o",
        s(&again),
    ]);
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&ws.trained).unwrap());
}

#[test]
fn training_ids_cover_the_enrollment_list() {
    let ws = workspace();
    let ids = std::fs::read_to_string(&ws.ids).unwrap();
    assert_eq!(ids.lines().count(), 12 * 6);
}

#[test]
fn commands_fail_cleanly_on_bad_input() {
    let ws = workspace();
    let dup = ws.path("dup.csv");
    std::fs::write(&dup, "utterance_id,speaker_id,path\na,s,x.wav\na,s,y.wav\n").unwrap();
    let out = Command::new(BIN)
        .args(["train", "--utterances", s(&dup), "--preset", "desk", "-o", s(&ws.path("x.vrk1"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rows 2 and 3"));

    let out = Command::new(BIN)
        .args(["enroll", "--models", s(&ws.trained), "--utterances", s(&dup)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--output"));
}
