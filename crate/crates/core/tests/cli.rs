use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn glyphread(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_glyphread")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_words(dir: &Path) -> String {
    let p = dir.join("words.txt");
    fs::write(&p, "cat\ndog\nsun\nmap\nbox\n").unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &[&str] = &[
    "--epochs", "1", "--renders", "2", "--channels", "4,8,8", "--hidden", "8", "--embed", "4", "--attention", "4",
    "--quiet",
];

fn train_small(dir: &Path, name: &str, seed: &str, extra: &[&str]) -> String {
    let corpus = write_words(dir);
    let out = dir.join(name);
    let mut args = vec!["train", "--corpus", &corpus, "--out", out.to_str().unwrap(), "--seed", seed];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&glyphread(&args));
    out.to_str().unwrap().to_string()
}

#[test]
fn train_is_deterministic_and_writes_a_log() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_small(dir.path(), "a.bin", "7", &[]);
    let b = train_small(dir.path(), "b.bin", "7", &[]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let log = fs::read_to_string(format!("{a}.log.tsv")).unwrap();
    assert!(log.starts_with("epoch\tloss\tval_acc\tsecs\n"));
    assert_eq!(log.lines().count(), 2);
    let c = train_small(dir.path(), "c.bin", "8", &[]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn train_prints_progress_lines() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_words(dir.path());
    let out = dir.path().join("m.bin");
    let mut args = vec!["train", "--corpus", &corpus, "--out", out.to_str().unwrap()];
    args.extend(SMALL.iter().filter(|a| **a != "--quiet"));
    let stdout = ok(&glyphread(&args));
    let line = stdout.lines().next().unwrap();
    let f: Vec<&str> = line.split(' ').collect();
    assert_eq!((f[0], f[2], f[4], f[6]), ("epoch", "loss", "val_acc", "secs"), "{line}");
}

#[test]
fn missing_corpus_exits_2_and_names_the_path() {
    let out = glyphread(&["train", "--corpus", "/no/such/words.txt", "--out", "/tmp/x.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/words.txt"));
}

#[test]
fn gen_data_decode_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let model = train_small(d, "m.bin", "1", &[]);
    let corpus = write_words(d);
    let data = d.join("data");
    ok(&glyphread(&[
        "gen-data", "--corpus", &corpus, "--out", data.to_str().unwrap(), "--renders", "1", "--test-renders", "1",
    ]));
    let labels = fs::read_to_string(data.join("test/labels.tsv")).unwrap();
    assert_eq!(labels.lines().count(), 5);
    let (id, _) = labels.lines().next().unwrap().split_once('\t').unwrap();
    let image = data.join("test/images").join(format!("{id}.pgm"));
    let image = image.to_str().unwrap();

    let out = ok(&glyphread(&["decode", "--model", &model, image, "--top", "3"]));
    assert!(!out.is_empty() && out.lines().count() <= 3);
    for line in out.lines() {
        let (_, score) = line.split_once('\t').unwrap();
        assert!(score.parse::<f64>().unwrap() <= 0.0);
    }

    let lex = out.lines().count();
    let out = ok(&glyphread(&["decode", "--model", &model, image, "--lexicon", &corpus, "--lm", "--top", "5"]));
    let words = ["cat", "dog", "sun", "map", "box"];
    assert!(out.lines().all(|l| words.contains(&l.split('\t').next().unwrap())), "{out}");
    let out = ok(&glyphread(&["decode", "--model", &model, image, "--lexicon", &corpus, "--lexicon-mode", "edit"]));
    assert!(words.contains(&out.split('\t').next().unwrap()));
    assert!(lex > 0);

    let dump = d.join("att");
    let best = ok(&glyphread(&["decode", "--model", &model, image, "--dump-attention", dump.to_str().unwrap()]));
    let word = best.split('\t').next().unwrap();
    let csv = fs::read_to_string(dump.join("steps.csv")).unwrap();
    let steps = csv.lines().count();
    assert!(steps == word.len() + 1 || steps == 32, "{steps} rows for {word:?}");
    let maps = fs::read_dir(&dump).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(maps, steps);

    let per = d.join("per.tsv");
    let test = data.join("test");
    let out = ok(&glyphread(&[
        "eval", "--model", &model, "--data", test.to_str().unwrap(), "--jobs", "2", "--per-sample", per.to_str().unwrap(),
    ]));
    assert!(out.contains("total\t5\n"), "{out}");
    assert!(out.contains("accuracy\t"));
    assert_eq!(fs::read_to_string(&per).unwrap().lines().count(), 6);

    let baseline = train_small(d, "base.bin", "1", &["--baseline"]);
    let table = d.join("table.tsv");
    ok(&glyphread(&[
        "ablate", "--model", &model, "--baseline-model", &baseline, "--data", test.to_str().unwrap(), "--beam", "2",
        "--out", table.to_str().unwrap(),
    ]));
    let rows: Vec<String> = fs::read_to_string(&table).unwrap().lines().map(|l| l.split('\t').next().unwrap().to_string()).collect();
    assert_eq!(rows, ["config", "baseline", "attention", "attention+lm", "attention+lm+lexicon"]);
}

#[test]
fn decode_and_eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let model = train_small(dir.path(), "m.bin", "1", &[]);
    let out = glyphread(&["decode", "--model", &model, "/no/such.pgm"]);
    assert_eq!(out.status.code(), Some(2));
    let bad = dir.path().join("bad.pgm");
    fs::write(&bad, b"P2 1 1 255 0").unwrap();
    assert_eq!(glyphread(&["decode", "--model", &model, bad.to_str().unwrap()]).status.code(), Some(2));

    let empty = dir.path().join("empty");
    fs::create_dir_all(empty.join("images")).unwrap();
    fs::write(empty.join("labels.tsv"), "").unwrap();
    let out = glyphread(&["eval", "--model", &model, "--data", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = glyphread(&["decode", "--model", "/no/model.bin", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let out = glyphread(&["gradcheck", "--seed", "3"]);
    let text = ok(&out);
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().all(|l| l.ends_with("PASS")), "{text}");
    let out = glyphread(&["gradcheck", "--tol", "1e-14"]);
    assert_eq!(out.status.code(), Some(1));
}
