use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dcar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcar"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
base_metas = 2
downstream_metas = 2
subs_per_meta = 2
per_sub = 6
shots = 2
epochs = 1
pretrain_epochs = 1
batch_size = 4
pretrain_batch_size = 4
k = 2
q = 2
";

fn tiny(dir: &Path) {
    fs::write(dir.join("tiny.cfg"), TINY).unwrap();
}

fn entries(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn invalid_config_exits_one_without_side_effects() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("unknown.cfg"), "lambda3 = 0.5\n").unwrap();
    fs::write(dir.join("range.cfg"), "tau = -1\n").unwrap();
    fs::write(dir.join("dup.cfg"), "k = 2\nk = 3\n").unwrap();
    for cfg in ["unknown.cfg", "range.cfg", "dup.cfg"] {
        for cmd in ["gen-data", "pretrain", "train", "eval", "grad-check", "ablate"] {
            let o = dcar(dir, &["--config", cfg, cmd]);
            assert_eq!(code(&o), 1, "{cfg} {cmd}: {}", stderr(&o));
            assert!(stderr(&o).starts_with("error:"));
        }
    }
    for bad in [&["--set", "k"][..], &["--set", "shots=99"], &["--config", "absent.cfg"]] {
        let o = dcar(dir, &[bad, &["train"]].concat());
        assert_eq!(code(&o), 1, "{bad:?}");
    }
    assert_eq!(entries(dir), ["dup.cfg", "range.cfg", "unknown.cfg"]);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&dcar(tmp.path(), &["frobnicate"])), 1);
    assert_eq!(code(&dcar(tmp.path(), &["eval", "--split", "train"])), 1);
    assert_eq!(code(&dcar(tmp.path(), &["--help"])), 0);
    assert!(entries(tmp.path()).is_empty());
}

#[test]
fn missing_inputs_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny(dir);
    for cmd in ["pretrain", "train", "eval", "ablate", "report"] {
        let o = dcar(dir, &["--config", "tiny.cfg", cmd]);
        assert_eq!(code(&o), 1, "{cmd}: {}", stderr(&o));
    }
    assert_eq!(entries(dir), ["tiny.cfg"]);

    let o = dcar(dir, &["--config", "tiny.cfg", "--set", "dataset_dir=nowhere/data", "gen-data"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nowhere"));
    assert!(!dir.join("nowhere").exists());
}

#[test]
fn pipeline_artifacts_and_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    tiny(dir);
    let run = |args: &[&str]| dcar(dir, &[&["--config", "tiny.cfg"], args].concat());

    let o = run(&["gen-data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["manifest.jsonl", "taxonomy.json", "vocab.txt"] {
        assert!(dir.join("data").join(f).is_file());
    }
    // Data generated under another dataset seed is refused.
    let o = run(&["--set", "dataset_seed=99", "pretrain"]);
    assert_eq!(code(&o), 1);
    assert!(!dir.join("checkpoints").exists());

    assert_eq!(code(&run(&["pretrain"])), 0);
    let o = run(&["eval"]);
    assert_eq!(code(&o), 1, "eval before train needs --zero-shot");
    assert_eq!(code(&run(&["eval", "--zero-shot", "--dump-weights"])), 0);
    assert_eq!(code(&run(&["train"])), 0);
    assert_eq!(code(&run(&["eval"])), 0);

    let hash_line = |name: &str| -> String {
        let text = fs::read_to_string(dir.join("out").join(name)).unwrap();
        text.lines().next().unwrap().to_string()
    };
    let first = hash_line("pretrain.csv");
    assert!(first.starts_with("# config_hash="), "{first}");
    for f in ["metrics.csv", "retrieval.csv", "token_weights.csv"] {
        assert_eq!(hash_line(f), first, "{f}");
    }
    let report = fs::read_to_string(dir.join("out/retrieval.csv")).unwrap();
    let ks: Vec<&str> = report.lines().skip(2).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ks, ["1", "5", "10", "1", "5", "10"]);

    // A backbone pretrained over a different vocabulary is rejected.
    fs::write(dir.join("other.cfg"), TINY.replace("base_metas = 2", "base_metas = 3")).unwrap();
    let other = |cmd: &str| dcar(dir, &["--config", "other.cfg", "--set", "dataset_dir=data2", cmd]);
    assert_eq!(code(&other("gen-data")), 0);
    let o = other("train");
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}
