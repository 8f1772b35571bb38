use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_protolearn"))
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn full_stage_chain_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);

    // usage error: unknown flag
    let out = bin().args(["generate", "--nope"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // stage failure: missing input file
    let out = bin()
        .args(["label", "--in"])
        .arg(p("absent.jsonl"))
        .arg("--out")
        .arg(p("x.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let corpus = p("corpus.jsonl");
    let out = bin()
        .args(["generate", "--count", "120", "--seed", "9", "--out"])
        .arg(&corpus)
        .output()
        .unwrap();
    ok(&out);

    // identical seeds give byte-identical corpora
    let corpus2 = p("corpus2.jsonl");
    let out = bin()
        .args(["generate", "--count", "120", "--seed", "9", "--out"])
        .arg(&corpus2)
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(read(&corpus), read(&corpus2));

    let labeled = p("labeled.jsonl");
    let out = bin()
        .args([
            "label",
            "--session-bound",
            "1",
            "--budget-ms",
            "500",
            "--max-states",
            "10000",
            "--in",
        ])
        .arg(&corpus)
        .arg("--out")
        .arg(&labeled)
        .output()
        .unwrap();
    ok(&out);

    let augmented = p("augmented.jsonl");
    let out = bin()
        .args(["augment", "--per-item", "1", "--seed", "3", "--in"])
        .arg(&labeled)
        .arg("--out")
        .arg(&augmented)
        .output()
        .unwrap();
    ok(&out);

    let trainset = p("trainset.jsonl");
    let mut joined = read(&labeled);
    joined.extend(read(&augmented));
    std::fs::write(&trainset, joined).unwrap();

    for (arch, ckpt) in [("tree", "model.ckpt"), ("mlp", "mlp.ckpt")] {
        let out = bin()
            .args([
                "train", "--arch", arch, "--hidden", "8", "--embed", "8", "--steps", "10",
                "--batch", "10", "--in",
            ])
            .arg(&trainset)
            .arg("--out")
            .arg(p(ckpt))
            .output()
            .unwrap();
        ok(&out);

        let out = bin()
            .args(["eval", "--model"])
            .arg(p(ckpt))
            .arg("--in")
            .arg(&labeled)
            .output()
            .unwrap();
        ok(&out);
        assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy"));

        let out = bin()
            .args(["verify", "--model"])
            .arg(p(ckpt))
            .arg("--in")
            .arg(&corpus)
            .output()
            .unwrap();
        ok(&out);
        let lines = String::from_utf8_lossy(&out.stdout).lines().count();
        assert_eq!(lines, 120);
    }

    let pv_dir = p("pv");
    let out = bin()
        .args(["emit-proverif", "--in"])
        .arg(&corpus)
        .arg("--out-dir")
        .arg(&pv_dir)
        .output()
        .unwrap();
    ok(&out);
    assert!(std::fs::read_dir(&pv_dir).unwrap().count() > 0);

    let out = bin()
        .args(["bench", "--model"])
        .arg(p("model.ckpt"))
        .arg("--in")
        .arg(&corpus)
        .arg("--out")
        .arg(p("bench.csv"))
        .output()
        .unwrap();
    ok(&out);
    let csv = String::from_utf8_lossy(&read(&p("bench.csv"))).into_owned();
    assert!(csv.starts_with("protocol_size,wall_time_secs\n"));
    assert_eq!(csv.lines().count(), 121);
}

#[test]
fn pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    let write_config = |out: &str| {
        std::fs::write(
            &config,
            format!(
                r#"
out_dir = "{}"

[generate]
count = 80
seed = 13

[label]
session_bound = 1
budget_ms = 500
max_states = 10000

[train]
hidden = 8
embed = 8
batch = 10
steps = 5

[eval]
test_count = 20
"#,
                dir.path().join(out).display()
            ),
        )
        .unwrap();
    };

    write_config("a");
    let out = bin().args(["pipeline", "--config"]).arg(&config).output().unwrap();
    ok(&out);
    write_config("b");
    let out = bin().args(["pipeline", "--config"]).arg(&config).output().unwrap();
    ok(&out);

    for name in ["corpus.jsonl", "labeled.jsonl", "augmented.jsonl", "model.ckpt"] {
        assert_eq!(
            read(&dir.path().join("a").join(name)),
            read(&dir.path().join("b").join(name)),
            "{name} differs between identical runs"
        );
    }
    for name in ["report.json", "report.md", "timing.csv"] {
        assert!(dir.path().join("a").join(name).exists(), "{name} missing");
    }
}
