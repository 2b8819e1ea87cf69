use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn rtcd(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rtcd"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn pendulum_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/pendulum.toml")
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    let text = std::fs::read_to_string(pendulum_config()).unwrap();
    std::fs::write(&cfg, format!("colour = \"red\"\n{text}")).unwrap();
    let out = rtcd(&["trajopt"], &cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

#[test]
fn verify_without_a_funnel_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = rtcd(&["verify"], &pendulum_config(), dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--funnel"));
}

#[test]
fn schedule_from_a_saved_trajectory_matches_the_solved_one() {
    let dir = tempfile::tempdir().unwrap();
    let solved = dir.path().join("solved");
    assert!(rtcd(&["trajopt"], &pendulum_config(), &solved).status.success());
    assert!(rtcd(&["tvlqr"], &pendulum_config(), &solved).status.success());
    let replay = dir.path().join("replay");
    let traj = solved.join("trajectory.csv");
    let out = rtcd(
        &["tvlqr", "--trajectory", traj.to_str().unwrap()],
        &pendulum_config(),
        &replay,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(solved.join("schedule.json")).unwrap(),
        std::fs::read(replay.join("schedule.json")).unwrap()
    );
}
