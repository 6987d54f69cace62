use std::process::{Command, Output};

fn vlb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vlb")).args(args).output().unwrap()
}

#[test]
fn compose_grid_lists_twelve_pairs() {
    let out = vlb(&["compose", "--grid"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "stack,image_ops,lang_ops,hard,easy");
    assert_eq!(lines.len(), 13);
    assert!(lines.contains(&"V1+L4,1,1,2,0"), "{text}");
    assert!(lines.contains(&"V2+L1,1,1,1,1"), "{text}");
}

#[test]
fn compose_labels_custom_stacks() {
    let out = vlb(&["compose", "--stack", "V1+V3+L4"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("V1+V3") && l.ends_with(",2,1,3,0")), "{text}");
}

#[test]
fn bad_stack_is_a_config_error() {
    let out = vlb(&["compose", "--stack", "V1+X9"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_exits_with_config_code() {
    let out = vlb(&["--config", "/nonexistent/vlb.toml", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn fixture_then_ingest_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = vlb(&["fixture", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let config = String::from_utf8(out.stdout).unwrap().trim().to_string();
    let out = vlb(&["--config", &config, "ingest"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let again = vlb(&["--config", &config, "ingest"]);
    assert!(String::from_utf8_lossy(&again.stderr).to_lowercase().contains("cached"), "{}", String::from_utf8_lossy(&again.stderr));
}
