use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn molclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molclip")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SPEC: &str = "num_moas=2\ndrugs_per_moa=2\nsamples_per_drug=10\nframes=4\nframe_dim=6\n";
const CONFIG: &str = "epochs=2\nbatch_p=2\nbatch_k=4\nfinetune_batch_p=2\nfinetune_batch_k=4\n\
token_dim=8\nmol_hidden=8\nseq_hidden=8\nembed_dim=8\neval_every=1\n";

#[test]
fn train_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, cfg, data, out) = (
        dir.path().join("spec.txt"),
        dir.path().join("config.txt"),
        dir.path().join("data"),
        dir.path().join("run"),
    );
    fs::write(&spec, SPEC).unwrap();
    fs::write(&cfg, CONFIG).unwrap();

    let gen = stdout(&molclip(&["gen-data", "--spec", p(&spec), "--out", p(&data)]));
    assert!(gen.contains("wrote 40 samples"), "{gen}");
    assert!(data.join("manifest.csv").exists());

    let train = stdout(&molclip(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]));
    assert!(train.starts_with("epoch,accuracy,rank1,rank5,rank10,map"));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let cmc = dir.path().join("cmc.csv");
    let eval = stdout(&molclip(&[
        "eval",
        "--ckpt",
        p(&out.join("checkpoint.json")),
        "--data",
        p(&data),
        "--cmc-out",
        p(&cmc),
    ]));
    // evaluating the saved checkpoint reproduces the final training metrics
    let last = metrics.lines().last().unwrap();
    let tail = last.split_once(',').unwrap().1;
    assert_eq!(eval.lines().nth(1).unwrap(), tail);
    assert!(fs::read_to_string(&cmc).unwrap().starts_with("rank,cmc\n1,"));
}

#[test]
fn strategy_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let (spec, cfg, data) = (dir.path().join("spec.txt"), dir.path().join("config.txt"), dir.path().join("data"));
    fs::write(&spec, SPEC).unwrap();
    fs::write(&cfg, CONFIG).unwrap();
    stdout(&molclip(&["gen-data", "--spec", p(&spec), "--out", p(&data)]));

    let out = dir.path().join("s3");
    let s = stdout(&molclip(&["strategy", "--id", "S3", "--data", p(&data), "--config", p(&cfg), "--out", p(&out)]));
    assert!(s.lines().nth(1).unwrap().starts_with("S3,"));
    assert!(out.join("stage1/checkpoint.json").exists());
    assert!(out.join("stage2/checkpoint.json").exists());

    let table = dir.path().join("sweep.csv");
    let sweep = stdout(&molclip(&[
        "sweep", "--config", p(&cfg), "--weights", "0.0,0.1", "--data", p(&data), "--out", p(&table),
    ]));
    assert_eq!(sweep.lines().count(), 3);
    assert_eq!(fs::read_to_string(&table).unwrap(), sweep);
    assert!(sweep.lines().nth(2).unwrap().starts_with("0.1,"));
}

#[test]
fn gradcheck_passes() {
    let out = stdout(&molclip(&["gradcheck"]));
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 9);
    assert!(!out.contains("FAIL"));
}

#[test]
fn smiles_tools() {
    let t = stdout(&molclip(&["tokenize", "CC(=O)Cl", "[NH4+]"]));
    assert_eq!(t, "C C ( = O ) Cl\n[NH4+]\n");

    let c = stdout(&molclip(&["canonicalize", "OCC", "CCO"]));
    let lines: Vec<&str> = c.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], lines[1]);

    let mut child = Command::new(env!("CARGO_BIN_EXE_molclip"))
        .args(["canonicalize", "--skip-invalid"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"CCO\nC(C\nc1ccccc1\n").unwrap();
    let o = child.wait_with_output().unwrap();
    assert_eq!(stdout(&o).lines().count(), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("1 invalid entries skipped"));

    let bad = molclip(&["canonicalize", "C(C"]);
    assert!(!bad.status.success());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.txt");
    fs::write(&cfg, "epochs=2\nnot_a_key=1\n").unwrap();
    let o = molclip(&["train", "--config", p(&cfg), "--data", p(dir.path()), "--out", p(dir.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("not_a_key"));

    let o = molclip(&["strategy", "--id", "S9", "--data", p(dir.path())]);
    assert!(!o.status.success());
}
