use std::fs;
use std::path::Path;
use std::process::Command;

fn fbxlab(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_fbxlab")).args(args).current_dir(cwd).env_remove("FBXLAB_SEED").output().unwrap()
}

fn results(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("results.json")).unwrap()).unwrap()
}

#[test]
fn perron_1d_locates_free_boundary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("p.ini");
    fs::write(&cfg, "[run]\nexperiment = perron\ndim = 1\nh = 0.005\nout = o\n[datum]\nkind = step\nvalue = 0.5\n").unwrap();
    let out = fbxlab(&["run", "p.ini"], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let r = results(&tmp.path().join("o"));
    let fb = r["fb_location"].as_f64().unwrap();
    assert!((fb - 0.5).abs() <= 2.0 * 0.005, "{fb}");
    for f in ["config.ini", "meta.json", "fb.csv", "field", "field.txt", "field.csv"] {
        assert!(tmp.path().join("o").join(f).exists(), "{f}");
    }
    assert!(fs::read_to_string(tmp.path().join("o/fb.csv")).unwrap().starts_with("x0,fb0,n0,slope,g"));
}

#[test]
fn invariants_run_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("i.ini"), "[run]\nexperiment = invariants\nseed = 9\n[invariants]\nsamples = 200\n").unwrap();
    for dir in ["a", "b"] {
        let out = fbxlab(&["run", "i.ini", "--out", dir], tmp.path());
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(tmp.path().join("a/results.json")).unwrap();
    let b = fs::read(tmp.path().join("b/results.json")).unwrap();
    assert_eq!(a, b);
    let again = fbxlab(&["run", "i.ini", "--out", "a"], tmp.path());
    assert_eq!(again.status.code(), Some(2));
    assert_eq!(fbxlab(&["run", "i.ini", "--out", "a", "--force"], tmp.path()).status.code(), Some(0));
}

#[test]
fn malformed_config_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("m.ini"), "[run]\nout = o\n[operator]\nname = laplacee\n").unwrap();
    let out = fbxlab(&["run", "m.ini"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn failed_assertion_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = "[run]\nexperiment = hodograph\nh = 0.03125\nout = o\n[datum]\nkind = quadratic\ncurvature = 1\n[rhs]\nvalue = 0\n";
    fs::write(tmp.path().join("h.ini"), cfg).unwrap();
    let out = fbxlab(&["run", "h.ini"], tmp.path());
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("transformed operator residual"));
    assert_eq!(results(&tmp.path().join("o"))["passed"], false);
}

#[test]
fn selftest_passes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(fbxlab(&["selftest"], tmp.path()).status.code(), Some(0));
}
