use std::path::Path;
use std::process::{Command, Output};

fn rramsim(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rramsim")).args(args).current_dir(dir).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn hash_line(text: &str) -> String {
    text.lines().find_map(|l| l.strip_prefix("bitstream sha256 ")).unwrap().to_string()
}

#[test]
fn read_prints_a_csv_record() {
    let dir = tempfile::tempdir().unwrap();
    let o = rramsim(&["read", "--addr", "1:20:300", "--seed", "4"], dir.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut rdr = csv::Reader::from_reader(o.stdout.as_slice());
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header[0], "address");
    assert_eq!(header.last().unwrap(), "true_r_ohms");
    let row = rdr.records().next().unwrap().unwrap();
    let col = |name: &str| row[header.iter().position(|h| h == name).unwrap()].to_string();
    let (r, truth): (f64, f64) = (col("r_ohms").parse().unwrap(), col("true_r_ohms").parse().unwrap());
    assert!((r / truth - 1.0).abs() < 0.01, "{r} vs {truth}");
    assert_eq!(col("flags"), "ok");
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // usage and input problems
    assert_eq!(code(&rramsim(&["read", "--bogus"], d)), 1);
    assert_eq!(code(&rramsim(&["read", "--addr", "not-an-address"], d)), 1);
    assert_eq!(code(&rramsim(&["populate"], d)), 1);
    // out of range
    let o = rramsim(&["read", "--addr", "0:600:1"], d);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert_eq!(code(&rramsim(&["write", "--addr", "0:1:1", "--volts", "1.5", "--width-ns", "4"], d)), 2);
    assert_eq!(code(&rramsim(&["read", "--addr", "0:1:1", "--v-read", "9"], d)), 2);
    // io
    assert_eq!(code(&rramsim(&["read", "--addr", "0:1:1", "--population", "missing.toml"], d)), 3);
    assert_eq!(code(&rramsim(&["replay", "missing.txt"], d)), 3);
    // framing
    std::fs::write(d.join("short.bin"), b"RRBT\x01\x00").unwrap();
    assert_eq!(code(&rramsim(&["decode", "short.bin"], d)), 4);
}

#[test]
fn recorded_session_replays_with_the_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = rramsim(
        &["write", "--addr", "2:7:31", "--volts", "1.6", "--seed", "9", "--transcript", "t.txt", "--trace", "t.bin"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let recorded = hash_line(&stderr(&o));

    let o = rramsim(&["replay", "t.txt", "--seed", "9"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(hash_line(&stdout), recorded);

    let o = rramsim(&["decode", "t.bin"], d);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!o.stdout.is_empty());

    // a different population breaks the recorded expectations
    let o = rramsim(&["replay", "t.txt", "--seed", "10"], d);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("warning:"));
}

#[test]
fn campaign_csv_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("spec.toml"),
        "kind = \"mass_characterize\"\naddress_range = [\"3:0-1:*\"]\noutput_path = \"out.csv\"\nseed = 12\n",
    )
    .unwrap();
    let a = rramsim(&["campaign", "spec.toml", "--out", "a.csv"], d);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let b = rramsim(&["campaign", "spec.toml", "--out", "b.csv", "--jobs", "4"], d);
    assert_eq!(code(&b), 0, "{}", stderr(&b));
    let (ca, cb) = (std::fs::read(d.join("a.csv")).unwrap(), std::fs::read(d.join("b.csv")).unwrap());
    assert_eq!(ca.iter().filter(|&&c| c == b'\n').count(), 1 + 2 * 512);
    assert_eq!(ca, cb);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("a.summary.json")).unwrap()).unwrap();
    assert_eq!(summary["records"], 1024);
}

#[test]
fn sweep_covers_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = rramsim(
        &["sweep", "--addr", "0:3:3", "--start", "0.1", "--stop", "0.5", "--step", "0.1", "--polarity", "both"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(o.stdout.iter().filter(|&&c| c == b'\n').count(), 1 + 10);
}
