use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn resvox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resvox")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = resvox(args);
    assert_eq!(code(&o), 0, "{args:?}\n{}", stderr(&o));
    stdout(&o)
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL: &str = "[model]
hidden = 8
encoder_filters = 8
decoder_filters = 8
encoder_layers = 1
decoder_layers = 1
ref_filters = 2 2 2 2 2 2
gru_hidden = 4
style_tokens = 3
token_dim = 2
style_heads = 2
style_attention_hidden = 4
variance_filters = 8

[train]
batch_size = 4
warmup_steps = 2
";

#[test]
fn help_and_usage_errors() {
    let o = resvox(&["--help"]);
    assert_eq!(code(&o), 0);
    for sub in ["corpus", "train", "distill", "synth", "mix", "probe", "project", "eval-clusters", "gradcheck"] {
        assert!(stdout(&o).contains(sub), "{sub}");
    }
    let o = resvox(&["train", "--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for flag in ["--phase", "--seed", "--corpus", "--config", "--ckpt-in", "--ckpt-out", "[default: 4]"] {
        assert!(text.contains(flag), "{flag}\n{text}");
    }
    assert!(stdout(&resvox(&["synth", "--help"])).contains("[default: 1]"));
    assert!(stdout(&resvox(&["corpus", "gen", "--help"])).contains("[default: 0.02]"));

    assert_eq!(code(&resvox(&[])), 1);
    assert_eq!(code(&resvox(&["fly"])), 1);
    assert_eq!(code(&resvox(&["gradcheck", "--bogus"])), 1);
    let o = resvox(&["corpus", "gen", "--out", "/tmp/never"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("--seed"));
    let o = resvox(&["train", "--phase", "1", "--corpus", "c", "--ckpt-out", "o", "--seed", "1", "--threads", "2"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&resvox(&["mix", "--ckpt", "c", "--trace-a", "a", "--trace-b", "b", "--selector", "abx", "--out", "o"])), 1);
}

#[test]
fn phase_two_needs_a_phase_one_checkpoint() {
    let o = resvox(&["train", "--phase", "2", "--seed", "1", "--corpus", "c", "--ckpt-out", "o"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("phase-1 checkpoint"), "{}", stderr(&o));
}

#[test]
fn runtime_errors_exit_two() {
    let o = resvox(&["distill", "--ckpt-in", "/nonexistent/ck", "--corpus", "c", "--ckpt-out", "o"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/ck"));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--seeds", "1"]);
    let last = out.lines().last().unwrap();
    assert!(last.starts_with("max relative error"), "{out}");
    let v: f64 = last.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(v < 1e-4);
    assert!(out.contains("phase 2 forward"));
}

#[test]
fn corpus_generation_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let args = |p: &Path| vec!["corpus".to_string(), "gen".into(), "--seed".into(), "7".into(), "--per-pair".into(), "2".into(), "--out".into(), p.display().to_string()];
    for p in [&a, &b] {
        let v = args(p);
        ok(&v.iter().map(String::as_str).collect::<Vec<_>>());
    }
    assert_eq!(tree(&a), tree(&b));
    assert!(!tree(&a).is_empty());
    let o = resvox(&["corpus", "gen", "--seed", "7", "--speakers", "1", "--out", tmp.path().join("c").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |s: &str| tmp.path().join(s).display().to_string();
    fs::write(p("small.conf"), SMALL).unwrap();
    ok(&["corpus", "gen", "--seed", "3", "--per-pair", "3", "--out", &p("corpus")]);

    let (corpus, conf) = (p("corpus"), p("small.conf"));
    let train = |phase: &str, ckpt_in: Option<&str>, out: &str| {
        let mut args = vec![
            "train", "--phase", phase, "--seed", "5", "--corpus", &corpus, "--config", &conf,
            "--steps", "3", "--holdout", "1", "--ckpt-out", out,
        ];
        let log = format!("{out}.log");
        args.extend(["--log", &log]);
        if let Some(c) = ckpt_in {
            args.extend(["--ckpt-in", c]);
        }
        ok(&args);
        fs::read_to_string(&log).unwrap()
    };
    let log = train("1", None, &p("p1"));
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().skip(1).all(|l| l.split('\t').count() == 7));

    // Phase 2 refuses a checkpoint without tables.
    let o = resvox(&[
        "train", "--phase", "2", "--seed", "5", "--corpus", &p("corpus"), "--ckpt-in", &p("p1"), "--holdout", "1", "--ckpt-out", &p("x"),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("distilled tables"));

    ok(&["distill", "--ckpt-in", &p("p1"), "--corpus", &p("corpus"), "--holdout", "1", "--ckpt-out", &p("d1")]);
    train("2", Some(&p("d1")), &p("p2"));
    train("3", Some(&p("p2")), &p("p3"));

    // Same seed, same checkpoint.
    train("3", Some(&p("p2")), &p("p3b"));
    assert_eq!(tree(Path::new(&p("p3"))), tree(Path::new(&p("p3b"))));

    let out = ok(&[
        "synth", "--ckpt", &p("p3"), "--speaker", "1", "--emotion", "2", "--pitch-shift", "-0.2", "--energy-factor",
        "1.3", "--phonemes", "3 1 4 1 5", "--out", &p("a.mel"), "--trace", &p("a.trace"),
    ]);
    assert!(out.contains("frames"));
    ok(&[
        "synth", "--ckpt", &p("p3"), "--speaker", "2", "--emotion", "0", "--phonemes", "3 1 4 1 5", "--out",
        &p("b.mel"), "--trace", &p("b.trace"), "--threads", "4",
    ]);
    ok(&[
        "mix", "--ckpt", &p("p3"), "--trace-a", &p("a.trace"), "--trace-b", &p("b.trace"), "--selector", "abbbb",
        "--out", &p("m.mel"),
    ]);
    let o = resvox(&[
        "synth", "--ckpt", &p("p3"), "--speaker", "9", "--emotion", "0", "--phonemes", "1", "--out", &p("z.mel"),
    ]);
    assert_eq!(code(&o), 2);
    assert!(!Path::new(&p("z.mel")).exists());

    ok(&["probe", "--ckpt", &p("p3"), "--corpus", &p("corpus"), "--out-dir", &p("t1")]);
    ok(&["probe", "--ckpt", &p("p3"), "--corpus", &p("corpus"), "--out-dir", &p("t3"), "--threads", "3"]);
    let t1 = tree(Path::new(&p("t1")));
    assert_eq!(t1.len(), 36);
    assert_eq!(t1, tree(Path::new(&p("t3"))));

    let glob = format!("{}/*.bin", p("t1"));
    ok(&["project", "--trace-glob", &glob, "--stage-diff", "F-A", "--out", &p("fa.csv")]);
    let csv = fs::read_to_string(p("fa.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "id,label_speaker,label_emotion,x,y");
    assert_eq!(csv.lines().count(), 37);

    let out = ok(&["eval-clusters", "--csv", &p("fa.csv"), "--label", "speaker", "--out", &p("m.csv")]);
    assert!(out.starts_with("silhouette_speaker = "));
    assert!(fs::read_to_string(p("m.csv")).unwrap().starts_with("metric,value\nsilhouette_speaker,"));
    let full = ok(&["eval-clusters", "--trace-glob", &glob, "--stage-diff", "F-B", "--label", "emotion"]);
    let threaded = ok(&["eval-clusters", "--trace-glob", &glob, "--stage-diff", "F-B", "--label", "emotion", "--threads", "2"]);
    assert_eq!(full, threaded);
    assert_eq!(code(&resvox(&["eval-clusters", "--csv", &p("fa.csv"), "--label", "phoneme"])), 1);
}
