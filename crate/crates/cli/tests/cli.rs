use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn condflow(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condflow"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn condflow")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const BINARY_SEG: &str = "\
# tiny binary segmentation run
task.kind = binary-seg
task.size = 8
task.train = 16
task.test = 4
model.L = 1
model.K = 1
model.n_c = 4
model.n_w = 8
model.hidden = 8
train.lr = 2e-4
train.batch = 2
train.iters = 5
train.seed = 3
io.outdir = run
";

#[test]
fn check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = condflow(&["check"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("round trip"));
    assert!(!table.contains("FAIL"));
}

#[test]
fn missing_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = BINARY_SEG.lines().filter(|l| !l.starts_with("train.lr")).map(|l| format!("{l}\n")).collect();
    fs::write(dir.path().join("run.cfg"), text).unwrap();
    let o = condflow(&["train", "--config", "run.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr"), "{}", stderr(&o));
}

#[test]
fn bad_usage_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(condflow(&["frobnicate"], dir.path()).status.code(), Some(1));
    fs::write(dir.path().join("run.cfg"), BINARY_SEG).unwrap();
    let o = condflow(&["predict", "--config", "run.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(1), "no checkpoint yet: {}", stderr(&o));
}

#[test]
fn train_predict_eval_sample() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), BINARY_SEG).unwrap();
    let run = dir.path().join("run");

    let o = condflow(&["gen", "--config", "run.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run.join("data/manifest.json").exists());

    let o = condflow(&["train", "--config", "run.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run.join("model.cfck").exists());
    let curve = fs::read_to_string(run.join("curve.csv")).unwrap();
    assert_eq!(curve.lines().count(), 6);

    let o = condflow(&["predict", "--config", "run.cfg", "--mode", "sample-mean", "--M", "10"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let summary = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let last = summary.lines().last().unwrap();
    assert!(last.contains("\"mean_iou\":") && !last.contains("\"mean_iou\":null"), "{last}");
    assert!(run.join("predictions.cft").exists());
    assert!(run.join("variance.cft").exists());
    assert!(run.join("images/0_pred.pgm").exists());

    let o = condflow(&["eval", "--config", "run.cfg"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("index,iou"));
    assert_eq!(csv.lines().count(), 1 + 4 + 1);

    let o = condflow(&["sample", "--config", "run.cfg", "--count", "2"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(run.join("samples/0_1.ppm").exists());

    let o = condflow(&["train", "--config", "run.cfg", "--resume", "run/model.cfck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}
