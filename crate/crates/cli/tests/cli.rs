use std::fs;
use std::process::{Command, Output};

fn sparse_ct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparse-ct")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn gen_ingest_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ph = dir.path().join("ph");
    let ph_s = ph.to_str().unwrap();
    stdout(&sparse_ct(&["gen", "--kind", "shepp-logan", "--count", "2", "--size", "32", "--out", ph_s]));
    assert!(ph.join("phantom_000.tom").is_file());
    assert!(ph.join("phantoms.png").is_file());

    let norm = dir.path().join("norm");
    let text = stdout(&sparse_ct(&["ingest", ph_s, "--size", "32", "--out", norm.to_str().unwrap()]));
    assert!(text.starts_with("2 images of 32x32"), "{text}");

    let a = ph.join("phantom_000.tom");
    let text = stdout(&sparse_ct(&["metrics", a.to_str().unwrap(), a.to_str().unwrap()]));
    assert!(text.contains("ssim 1.000000"), "{text}");

    let bad = sparse_ct(&["ingest", dir.path().join("missing").to_str().unwrap()]);
    assert!(!bad.status.success());
    let bad = sparse_ct(&["gen", "--kind", "walnut"]);
    assert!(!bad.status.success());
}

#[test]
fn run_with_config_and_overrides_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\nmethods = fbp, tv\nangles = 8\nsize = 32\nimages = 2\ntv_iters = 20\ntv_lambdas = 0.5\nartifacts = false\n")
        .unwrap();
    let mut csv = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let text = stdout(&sparse_ct(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--angles",
            "8,16",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]));
        let file = fs::read_to_string(out.join("results.csv")).unwrap();
        assert_eq!(text, file);
        csv.push(file);
    }
    assert_eq!(csv[0], csv[1]);
    let rows: Vec<&str> = csv[0].lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.contains(",1000,4,1,3,") && r.ends_with(",ok")), "{rows:?}");

    fs::write(&cfg, "nonsense = 1\n").unwrap();
    assert!(!sparse_ct(&["run", "--config", cfg.to_str().unwrap()]).status.success());
}
