use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn paraseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paraseg"))
        .args(args)
        .current_dir(dir)
        .env("PARASEG_BACKEND_PATH", Path::new(env!("CARGO_BIN_EXE_paraseg")).parent().unwrap())
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn phantom(dir: &Path) {
    let o = paraseg(dir, &["phantom", "--out", "data", "--sigma", "0.1", "--n-studies", "4", "--write-config", "run.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn pipeline_run_builds_the_artifact_tree() {
    let tmp = tempfile::tempdir().unwrap();
    phantom(tmp.path());
    let o = paraseg(tmp.path(), &["pipeline", "run", "--config", "run.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("run");
    for d in ["plans", "stage1_pseudolabels", "final_masks", "quant", "stats", "logs"] {
        assert!(run.join(d).is_dir(), "missing {d}");
    }
    for step in 1..=3 {
        assert!(run.join(format!("selection_reports/step{step}.json")).is_file());
        assert!(run.join(format!("models/step{step}.model")).is_file());
    }
    assert!(run.join("stats/ba/phantom_volume_ml_left.svg").is_file());

    let again = paraseg(tmp.path(), &["pipeline", "run", "--config", "run.json"]);
    assert!(again.status.success());
    assert_eq!(stderr(&again).matches("up to date").count(), 8, "{}", stderr(&again));

    let forced = paraseg(tmp.path(), &["stats", "--config", "run.json", "--force"]);
    assert!(forced.status.success());
    assert!(stderr(&forced).contains("stats: done"));
}

#[test]
fn stages_run_one_at_a_time() {
    let tmp = tempfile::tempdir().unwrap();
    phantom(tmp.path());
    for stage in ["plan", "segment", "select", "train", "quantify", "stats", "report"] {
        let o = paraseg(tmp.path(), &[stage, "--config", "run.json", "--out", "staged"]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    let quant = fs::read_to_string(tmp.path().join("staged/quant/phantom.csv")).unwrap();
    assert!(quant.starts_with("dataset_id,study_id,side,source,volume_ml,fat_ratio,mean_hu\n"));
    assert_eq!(quant.lines().count(), 1 + 4 * 2 * 2);
}

#[test]
fn missing_backend_exits_3_and_names_it() {
    let tmp = tempfile::tempdir().unwrap();
    phantom(tmp.path());
    let cfg = fs::read_to_string(tmp.path().join("run.json")).unwrap();
    let cfg = cfg.replace("\"executable\": \"memorizing-trainer\"", "\"executable\": \"no-such-trainer\"");
    fs::write(tmp.path().join("bad.json"), cfg).unwrap();
    let o = paraseg(tmp.path(), &["pipeline", "run", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("memorizing-trainer"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = paraseg(tmp.path(), &["pipeline", "run", "--config", "absent.json"]);
    assert_eq!(o.status.code(), Some(2));

    phantom(tmp.path());
    let cfg = fs::read_to_string(tmp.path().join("run.json")).unwrap();
    fs::write(tmp.path().join("extra.json"), cfg.replacen('{', "{\"colour\": 1,", 1)).unwrap();
    let o = paraseg(tmp.path(), &["pipeline", "run", "--config", "extra.json"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = paraseg(tmp.path(), &["phantom", "--out", "bad", "--sigma", "0.7"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn crashing_backend_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    phantom(tmp.path());
    // the feature extractor cannot answer a segmentation call
    let cfg = fs::read_to_string(tmp.path().join("run.json")).unwrap();
    let cfg = cfg.replacen("\"executable\": \"phantom-segmenter\"", "\"executable\": \"phantom-features\"", 1);
    fs::write(tmp.path().join("crash.json"), cfg).unwrap();
    let o = paraseg(tmp.path(), &["pipeline", "run", "--config", "crash.json"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("phantom-segmenter"));
}
