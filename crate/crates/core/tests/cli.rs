use std::path::Path;
use std::process::{Command, Output};

use deepctr::data::load_csv;
use deepctr::ModelFile;

fn deepctr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepctr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path, name: &str, rows: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let o = deepctr(&["synth", "--fields", "3", "--cardinality", "4", "--instances", rows, "--seed", seed, "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn train(dir: &Path, data: &Path, kind: &str) -> std::path::PathBuf {
    let model = dir.join(format!("{kind}.json"));
    let report = dir.join(format!("{kind}.csv"));
    let o = deepctr(&[
        "train", "--model", kind, "--data", path(data), "--hidden", "6,4", "--latent-dim", "3",
        "--max-epochs", "3", "--learning-rate", "0.05", "--out", path(&model), "--report", path(&report),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("test AUC"));
    model
}

#[test]
fn selfcheck_exits_zero() {
    let o = deepctr(&["selfcheck"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("checks passed"));
}

#[test]
fn train_predict_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data.csv", "600", "3");
    for kind in ["lr", "fm", "fnn", "snn-rbm", "snn-dae"] {
        let model = train(dir.path(), &data, kind);
        let scores = dir.path().join(format!("{kind}-scores.csv"));
        let o = deepctr(&["predict", "--model-file", path(&model), "--data", path(&data), "--out", path(&scores)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

        // Scores written by the CLI equal in-memory predictions of the loaded model bit for bit.
        let file = ModelFile::load(&model).unwrap();
        let ds = load_csv(&data, "click", Some(std::sync::Arc::new(file.schema.clone()))).unwrap();
        let expected = file.model.predict_all(&ds).unwrap();
        let mut rdr = csv::Reader::from_path(&scores).unwrap();
        assert_eq!(rdr.headers().unwrap(), vec!["row_index", "score", "label"]);
        let got: Vec<f64> = rdr.records().map(|r| r.unwrap()[1].parse().unwrap()).collect();
        assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(&expected) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let o = deepctr(&["eval", "--scores", path(&scores), "--labels-col", "label"]);
        assert!(o.status.success());
        let text = stdout(&o);
        let percent = text.split(['(', ')']).nth(1).unwrap();
        assert!(percent.ends_with('%') && percent.split('.').nth(1).unwrap().len() == 3, "{text}");
        assert!(text.contains("logloss"));
    }
}

#[test]
fn report_header_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data.csv", "300", "4");
    train(dir.path(), &data, "fm");
    let text = std::fs::read_to_string(dir.path().join("fm.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "model,learning_rate,keep_prob,l2_lambda,hidden,seed,epoch,train_loss,valid_loss,valid_auc"
    );
}

#[test]
fn gridsearch_writes_ranked_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data.csv", "400", "5");
    let grid = dir.path().join("grid.json");
    std::fs::write(
        &grid,
        r#"{"base": {"hidden": [4, 4], "max_epochs": 2, "latent_dim": 3}, "learning_rate": [0.05, 0.1], "keep_prob": [0.5, 1.0]}"#,
    )
    .unwrap();
    let table = dir.path().join("table.csv");
    let o = deepctr(&["gridsearch", "--model", "fnn", "--grid", path(&grid), "--data", path(&data), "--out", path(&table)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(&table).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), deepctr::train::GRID_COLUMNS.len());
    let aucs: Vec<f64> = rdr.records().map(|r| r.unwrap()[12].parse().unwrap()).collect();
    assert_eq!(aucs.len(), 4);
    assert!(aucs.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn error_paths_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data.csv", "300", "6");
    let model = train(dir.path(), &data, "lr");
    let out = dir.path().join("scores.csv");

    let unknown_flag = deepctr(&["train", "--model", "lr", "--frobnicate"]);
    assert_eq!(unknown_flag.status.code(), Some(2));

    let missing = deepctr(&["predict", "--model-file", "/nonexistent/model.json", "--data", path(&data), "--out", path(&out)]);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(String::from_utf8_lossy(&missing.stderr).lines().count(), 1);

    let garbage = dir.path().join("garbage.json");
    std::fs::write(&garbage, "{\"format\": 1}").unwrap();
    let bad_model = deepctr(&["predict", "--model-file", path(&garbage), "--data", path(&data), "--out", path(&out)]);
    assert_eq!(bad_model.status.code(), Some(4));

    let other = dir.path().join("other.csv");
    std::fs::write(&other, "colour,size,click\nred,small,1\nblue,large,0\n").unwrap();
    let mismatch = deepctr(&["predict", "--model-file", path(&model), "--data", path(&other), "--out", path(&out)]);
    assert_eq!(mismatch.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("schema mismatch"));

    let diverge = deepctr(&[
        "train", "--model", "fm", "--data", path(&data), "--learning-rate", "1e300", "--out", path(&dir.path().join("x.json")),
    ]);
    assert_eq!(diverge.status.code(), Some(6));
}
