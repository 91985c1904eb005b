use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scch_core::synth::Roster;

fn scch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scch"))
        .args(args)
        .env("SCCH_THREADS", "1")
        .output()
        .expect("spawn scch")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Relative path → bytes for every file below `dir`.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn kv(path: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn generate(dir: &Path, n_train: &str, n_test: &str, size: &str) -> Output {
    scch(&["generate", "--out", p(dir), "--n-train", n_train, "--n-test", n_test, "--seed", "4", "--image-size", size])
}

#[test]
fn generate_is_deterministic_and_guards_output() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(generate(&a, "3", "2", "32").status.success());
    assert!(generate(&b, "3", "2", "32").status.success());
    let (mut sa, mut sb) = (snapshot(&a), snapshot(&b));
    // the run manifest carries wall-clock time
    sa.remove(Path::new("run_manifest.txt")).unwrap();
    sb.remove(Path::new("run_manifest.txt")).unwrap();
    assert_eq!(sa, sb);

    let again = generate(&a, "3", "2", "32");
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let forced = scch(&["generate", "--out", p(&a), "--n-train", "3", "--n-test", "2", "--seed", "4", "--image-size", "32", "--force"]);
    assert!(forced.status.success());
}

#[test]
fn default_roster_is_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert!(generate(&d, "0", "10", "32").status.success());
    let m = kv(&d.join("manifest.txt"));
    assert_eq!(m["spec_source"], "default");
    assert_eq!(m["spec_hash"], Roster::default().spec_hash());
    assert_eq!(m["train.count"], "0");
    assert_eq!(m["test.count"], "10");
    assert_eq!(fs::read_dir(d.join("test")).unwrap().count(), 11);
    assert_eq!(fs::read_to_string(d.join("train/annotations.csv")).unwrap().lines().count(), 1);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.txt");
    fs::write(&spec, "au.0.locations=0.5:0.5\nau.0.couplings=0:0.5\n").unwrap();
    let out = scch(&["generate", "--out", p(&tmp.path().join("x")), "--spec", p(&spec)]);
    assert_eq!(out.status.code(), Some(2));

    let missing = scch(&["generate", "--out", p(&tmp.path().join("y")), "--spec", p(&tmp.path().join("nope.txt"))]);
    assert_eq!(missing.status.code(), Some(3));

    let no_data = scch(&["train", "--data", p(&tmp.path().join("nothing")), "--out", p(&tmp.path().join("t"))]);
    assert_eq!(no_data.status.code(), Some(3));

    let d = tmp.path().join("d");
    assert!(generate(&d, "2", "2", "32").status.success());
    let cfg = tmp.path().join("cfg.txt");
    fs::write(&cfg, "epochs=1\nwarp_speed=9\n").unwrap();
    let unknown = scch(&["train", "--data", p(&d), "--config", p(&cfg), "--out", p(&tmp.path().join("t"))]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("warp_speed"));

    assert_eq!(scch(&["train"]).status.code(), Some(2));
}

#[test]
fn overfit_then_eval_dump_and_graph() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    // every AU is usually active, so all eight maps carry signal
    let roster = tmp.path().join("roster.txt");
    let active = Roster {
        marginals: [0.05, 0.15, 0.2, 0.2, 0.2, 0.2],
        ..Roster::default()
    };
    fs::write(&roster, active.render()).unwrap();
    let g = scch(&["generate", "--out", p(&d), "--spec", p(&roster), "--n-train", "8", "--n-test", "0", "--seed", "3", "--image-size", "32"]);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let cfg = tmp.path().join("cfg.txt");
    fs::write(
        &cfg,
        "# default widths at 32 px\ninput_size=32\nepochs=300\nbatch_size=8\nlearning_rate=0.002\neval_every=0\nseed=1\n",
    )
    .unwrap();
    let run = tmp.path().join("run");
    let t = scch(&["train", "--data", p(&d), "--config", p(&cfg), "--out", p(&run)]);
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    for f in ["checkpoint.scch", "loss_curve.csv", "config.txt", "run_manifest.txt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ckpt = run.join("checkpoint.scch");

    let ev = tmp.path().join("ev");
    let e = scch(&["eval", "--checkpoint", p(&ckpt), "--data", p(&d), "--split", "train", "--out", p(&ev)]);
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    let avg = fs::read_to_string(ev.join("report.jsonl")).unwrap().lines().last().unwrap().to_string();
    let rec: serde_json::Value = serde_json::from_str(&avg).unwrap();
    let icc = rec["icc"].as_f64().unwrap();
    assert!(icc > 0.95, "overfit ICC {icc}");

    let w = tmp.path().join("w");
    assert!(scch(&["dump", "--checkpoint", p(&ckpt), "--what", "weights", "--out", p(&w)]).status.success());
    assert_eq!(fs::read_to_string(w.join("weights.csv")).unwrap().lines().count(), 1 + 32 * 8);

    let img = d.join("train/000000.pgm");
    let g = tmp.path().join("g");
    assert!(scch(&["dump", "--checkpoint", p(&ckpt), "--what", "graph", "--input", p(&img), "--out", p(&g)]).status.success());
    let rows: Vec<String> = fs::read_to_string(g.join("graph.csv")).unwrap().lines().skip(1).map(String::from).collect();
    // 3 SCC layers × 32 channels × k = 5
    assert_eq!(rows.len(), 3 * 32 * 5);
    for layer in 0..3 {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{layer},"))).count(), 160);
    }

    let h = tmp.path().join("h");
    assert!(scch(&["dump", "--checkpoint", p(&ckpt), "--what", "heatmaps", "--input", p(&img), "--out", p(&h)]).status.success());
    assert!(h.join("heatmap.tnsr").exists() && h.join("heatmap_7.pgm").exists());

    let r = tmp.path().join("r");
    assert!(scch(&["dump", "--checkpoint", p(&ckpt), "--what", "responses", "--input", p(&img), "--out", p(&r)]).status.success());
    assert!(r.join("responses.tnsr").exists() && r.join("response_31.pgm").exists());

    let no_input = scch(&["dump", "--checkpoint", p(&ckpt), "--what", "graph", "--out", p(&tmp.path().join("n"))]);
    assert_eq!(no_input.status.code(), Some(2));
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert!(generate(&d, "4", "4", "32").status.success());
    let grid = tmp.path().join("grid.txt");
    fs::write(&grid, "encoder_channels=8,16,16\ndeconv_channels=12\nepochs=1\nbatch_size=4\nscc=on,off\ndeconv_layers=2,3\nk=3\n").unwrap();
    let out = tmp.path().join("abl");
    let a = scch(&["ablate", "--data", p(&d), "--grid", p(&grid), "--out", p(&out)]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    let deltas = fs::read_to_string(out.join("deltas.csv")).unwrap();
    assert_eq!(deltas.lines().filter(|l| l.starts_with("scc_on_minus_off")).count(), 2);
    assert_eq!(deltas.lines().filter(|l| l.starts_with("dl3_minus_dl2")).count(), 2);
}

#[test]
fn gradcheck_reports_and_validates_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = scch(&["gradcheck", "--tol", "-1", "--out", p(&tmp.path().join("g0"))]);
    assert_eq!(bad.status.code(), Some(2));
    // an absurdly tight tolerance must fail with exit code 4 and name the ops
    let tight = scch(&["gradcheck", "--scope", "ops", "--tol", "1e-12", "--out", p(&tmp.path().join("g1"))]);
    assert_eq!(tight.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&tight.stderr).contains("gradient check failed"));
}
