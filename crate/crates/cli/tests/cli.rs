use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn attnseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnseg"))
        .current_dir(dir)
        .env_remove("ATTNSEG_CONFIG")
        .env_remove("ATTNSEG_OUT")
        .env_remove("ATTNSEG_FIXTURES")
        .env_remove("ATTNSEG_CONTAINERS")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn make_fixtures(dir: &Path, count: usize) {
    fs::write(
        dir.join("set.json"),
        format!(r#"{{"random": {{"count": {count}, "base_seed": 3, "noise_level": 0.1}}}}"#),
    )
    .unwrap();
    ok(&attnseg(dir, &["fixtures", "make", "--spec", "set.json", "--out", "fx"]));
}

#[test]
fn generate_then_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_fixtures(dir, 2);
    assert!(dir.join("fx/gt/scene_000003.png").exists());
    assert!(dir.join("fx/vocab.json").exists());

    ok(&attnseg(dir, &["masks", "generate", "fx/containers", "--out", "masks", "--workers", "2"]));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("masks/report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    assert_eq!(report["config"]["tau"], 4);

    let table = ok(&attnseg(
        dir,
        &["eval", "miou", "--pred", "masks", "--gt", "fx/gt", "--classes", "fx/vocab.json", "--uncertain", "background", "--json", "eval.json"],
    ));
    assert!(table.contains("background") && table.contains("mIoU"));
    let eval: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("eval.json")).unwrap()).unwrap();
    assert!(eval["mean_iou"].as_f64().unwrap() > 0.8);
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_fixtures(dir, 1);
    fs::write(dir.join("cfg.json"), r#"{"tau": 2, "alpha": 0.4, "output_dir": "from_config"}"#).unwrap();
    ok(&attnseg(dir, &["masks", "generate", "fx/containers", "--config", "cfg.json", "--tau", "0"]));
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("from_config/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["tau"], 0);
    assert_eq!(report["config"]["alpha"], 0.4);
}

#[test]
fn failed_container_sets_exit_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_fixtures(dir, 1);
    fs::create_dir_all(dir.join("empty")).unwrap();
    let out = attnseg(dir, &["masks", "generate", "fx/containers", "empty", "--out", "masks"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(dir.join("masks/scene_000003.png").exists());
}

#[test]
fn invalid_thresholds_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let out = attnseg(tmp.path(), &["masks", "generate", ".", "--out", "m", "--alpha", "0.7", "--beta", "0.6"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}

#[test]
fn uncertain_pixels_need_a_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_fixtures(dir, 1);
    ok(&attnseg(dir, &["masks", "generate", "fx/containers", "--out", "masks", "--alpha", "0.1", "--beta", "0.9"]));
    let out = attnseg(dir, &["eval", "miou", "--pred", "masks", "--gt", "fx/gt"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--uncertain"));
}

#[test]
fn ablation_table() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_fixtures(dir, 2);
    fs::write(dir.join("grid.json"), r#"{"alpha_beta": [[0.4, 0.5], [0.5, 0.6], [0.4, 0.6]]}"#).unwrap();
    let table = ok(&attnseg(dir, &["ablate", "--fixtures", "fx", "--grid", "grid.json", "--json", "abl.json"]));
    assert_eq!(table.lines().count(), 4);
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("abl.json")).unwrap()).unwrap();
    assert_eq!(doc["rows"].as_array().unwrap().len(), 3);
    assert_eq!(doc["fixtures"], 2);
}

#[test]
fn prompt_plan() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(
        dir.join("captions.json"),
        r#"[{"caption": "a photograph of a kitchen inside a house", "classes": ["bottle", "person"]},
            {"caption": "a man with a dog", "classes": ["man", "dog"]}]"#,
    )
    .unwrap();
    let plan: serde_json::Value = serde_json::from_str(&ok(&attnseg(
        dir,
        &["prompts", "build", "--captions", "captions.json", "--per-class", "3", "--seed", "10"],
    )))
    .unwrap();
    let items = plan["items"].as_array().unwrap();
    assert_eq!(items[0]["seed"], 10);
    assert_eq!(
        items[0]["spec"]["prompt"],
        "a photograph of a kitchen inside a house; bottle person"
    );
    assert!(plan["per_class_counts"].as_object().unwrap().values().all(|v| v.as_u64().unwrap() >= 3));
}

#[test]
fn adopt_replaces_mask() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_fixtures(dir, 2);
    let out = attnseg(
        dir,
        &["masks", "adopt", "--original", "fx/gt/scene_000003.png", "--predicted", "fx/gt/scene_000004.png", "--out", "new.png"],
    );
    ok(&out);
    assert_eq!(fs::read(dir.join("new.png")).unwrap(), fs::read(dir.join("fx/gt/scene_000004.png")).unwrap());
}
