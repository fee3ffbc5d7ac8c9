//! End-to-end runs of the `bbm` binary on small simulated data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const Q: usize = 3;

fn bbm_threads(threads: usize, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bbm"))
        .args(["--threads", &threads.to_string()])
        .args(args)
        .output()
        .expect("spawn bbm")
}

fn bbm(args: &[&str]) -> Output {
    bbm_threads(2, args)
}

fn ok(args: &[&str]) {
    let out = bbm(args);
    assert!(
        out.status.success(),
        "bbm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// A small simulated population and its listing of `ses1,ses2` lines.
fn simulate(dir: &Path, n: usize, seed: u64) -> (PathBuf, Vec<String>) {
    let out = dir.join(format!("sim{seed}"));
    let n = n.to_string();
    let seed = seed.to_string();
    ok(&[
        "simulate",
        "--q",
        "3",
        "--v",
        "120",
        "--t",
        "160",
        "--n-subjects",
        &n,
        "--noise-sd",
        "1.0",
        "--seed",
        &seed,
        "--out",
        p(&out),
    ]);
    let listing = fs::read_to_string(out.join("subjects.txt")).unwrap();
    (out, listing.lines().map(str::to_owned).collect())
}

const SHORT_SCANS: [&str; 4] = ["--drop-initial", "0", "--min-duration-s", "0"];

fn estimate_prior(template: &Path, subjects: &[&str], extra: &[&str], out: &Path) -> Output {
    let mut args = vec!["estimate-prior", "--template", p(template)];
    for s in subjects {
        args.extend(["--subject", s]);
    }
    args.extend(SHORT_SCANS);
    args.extend(extra);
    args.extend(["--out", p(out)]);
    bbm(&args)
}

#[test]
fn estimate_prior_writes_bundle_for_three_subjects() {
    let tmp = TempDir::new().unwrap();
    let (sim, subjects) = simulate(tmp.path(), 3, 1);
    let refs: Vec<&str> = subjects.iter().map(String::as_str).collect();
    let out = tmp.path().join("prior");
    let res = estimate_prior(&sim.join("template.bbm"), &refs, &["--permutations", "4"], &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    for f in [
        "mean.bbm",
        "var.bbm",
        "fc.json",
        "fc_iw_psi.bbm",
        "fc_chol_scale.bbm",
        "run_manifest.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let screening = read_json(&out.join("screening.json"));
    assert_eq!(screening["included"].as_array().unwrap().len(), 3);
    assert!(screening["excluded"].as_array().unwrap().is_empty());
}

#[test]
fn split_sessions_accepts_single_scans() {
    let tmp = TempDir::new().unwrap();
    let (sim, subjects) = simulate(tmp.path(), 3, 2);
    let firsts: Vec<&str> = subjects.iter().map(|s| s.split(',').next().unwrap()).collect();
    let out = tmp.path().join("prior");
    let res = estimate_prior(
        &sim.join("template.bbm"),
        &firsts,
        &["--split-sessions", "--fc-prior", "iw"],
        &out,
    );
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("fc_iw_psi.bbm").exists());
    assert!(!out.join("fc_chol_mean.bbm").exists());
}

#[test]
fn single_subject_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let (sim, subjects) = simulate(tmp.path(), 1, 3);
    let res = estimate_prior(
        &sim.join("template.bbm"),
        &[&subjects[0]],
        &[],
        &tmp.path().join("prior"),
    );
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn wrong_session_count_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let (sim, subjects) = simulate(tmp.path(), 2, 4);
    let refs: Vec<&str> = subjects.iter().map(String::as_str).collect();
    let res = estimate_prior(
        &sim.join("template.bbm"),
        &refs,
        &["--split-sessions"],
        &tmp.path().join("prior"),
    );
    assert_eq!(res.status.code(), Some(2));
}

/// Trains a prior on a 4-subject population; returns (sim dir, prior dir, subject listing).
fn trained(tmp: &Path, seed: u64) -> (PathBuf, PathBuf, Vec<String>) {
    let (sim, subjects) = simulate(tmp, 4, seed);
    let refs: Vec<&str> = subjects.iter().map(String::as_str).collect();
    let prior = tmp.join("prior");
    let res = estimate_prior(&sim.join("template.bbm"), &refs, &["--permutations", "4"], &prior);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    (sim, prior, subjects)
}

#[test]
fn fit_and_engagements_run_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let (_, prior, subjects) = trained(tmp.path(), 5);
    let bold = subjects[0].split(',').next().unwrap().to_owned();

    for fc in ["none", "iw", "cholesky"] {
        let out = tmp.path().join(format!("fit_{fc}"));
        let mut args = vec![
            "fit",
            "--prior",
            p(&prior),
            "--bold",
            &bold,
            "--fc-prior",
            fc,
            "--cholesky-k",
            "200",
        ];
        args.extend(SHORT_SCANS);
        args.extend(["--out", p(&out)]);
        ok(&args);
        let fit = read_json(&out.join("fit.json"));
        assert_eq!(fit["converged"], Value::Bool(true), "fc prior {fc}");
        assert!(out.join("s_mean.bbm").exists());
    }

    let eng = tmp.path().join("eng");
    let fit = tmp.path().join("fit_none");
    ok(&[
        "engagements",
        "--fit",
        p(&fit),
        "--prior",
        p(&prior),
        "--z",
        "0",
        "--z",
        "1",
        "--z",
        "2",
        "--out",
        p(&eng),
    ]);
    let report = read_json(&eng.join("engagements.json"));
    let levels = report["levels"].as_array().unwrap();
    assert_eq!(levels.len(), 3);
    // Masks at larger effect sizes are subsets of those below.
    for w in levels.windows(2) {
        let lo = w[0]["counts"].as_array().unwrap();
        let hi = w[1]["counts"].as_array().unwrap();
        assert_eq!(lo.len(), Q);
        for (a, b) in lo.iter().zip(hi) {
            assert!(b.as_u64().unwrap() <= a.as_u64().unwrap());
        }
    }
    assert!(levels[0]["counts"]
        .as_array()
        .unwrap()
        .iter()
        .any(|c| c.as_u64().unwrap() > 0));
}

#[test]
fn fit_rejects_template_with_other_network_count() {
    let tmp = TempDir::new().unwrap();
    let (_, prior, subjects) = trained(tmp.path(), 6);
    let bold = subjects[0].split(',').next().unwrap().to_owned();
    let labels: String = (0..120).map(|i| format!("{}\n", i % 2 + 1)).collect();
    let parc = tmp.path().join("two.csv");
    fs::write(&parc, labels).unwrap();

    let mut args = vec!["fit", "--prior", p(&prior), "--bold", &bold];
    args.extend(["--template", p(&parc), "--template-kind", "parcellation"]);
    args.extend(SHORT_SCANS);
    let out = tmp.path().join("fit");
    args.extend(["--out", p(&out)]);
    let res = bbm(&args);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("networks"));
}

#[test]
fn parcellation_overlap_is_identity() {
    let tmp = TempDir::new().unwrap();
    let labels: String = (0..30).map(|i| format!("{}\n", i / 10 + 1)).collect();
    let parc = tmp.path().join("parc.csv");
    fs::write(&parc, labels).unwrap();
    let out = tmp.path().join("overlap");
    ok(&[
        "overlap",
        "--input",
        p(&parc),
        "--template-kind",
        "parcellation",
        "--out",
        p(&out),
    ]);

    let csv = fs::read_to_string(out.join("overlap.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "network,network1,network2,network3");
    for (i, line) in lines.enumerate() {
        let cells: Vec<f64> = line.split(',').skip(1).map(|c| c.parse().unwrap()).collect();
        let expected: Vec<f64> = (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect();
        assert_eq!(cells, expected);
    }
}

#[test]
fn simulate_is_reproducible() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (sa, _) = simulate(a.path(), 2, 9);
    let (sb, _) = simulate(b.path(), 2, 9);
    for f in [
        "template.bbm",
        "truth/var.bbm",
        "sub0001/ses2.bbm",
        "sub0001/fc.bbm",
    ] {
        assert_eq!(
            fs::read(sa.join(f)).unwrap(),
            fs::read(sb.join(f)).unwrap(),
            "{f} differs"
        );
    }
    let (sc, _) = simulate(a.path(), 2, 10);
    assert_ne!(
        fs::read(sa.join("sub0001/ses2.bbm")).unwrap(),
        fs::read(sc.join("sub0001/ses2.bbm")).unwrap()
    );
}

#[test]
fn thread_count_does_not_change_outputs() {
    let tmp = TempDir::new().unwrap();
    let (sim, subjects) = simulate(tmp.path(), 3, 11);
    let bold = subjects[0].split(',').next().unwrap().to_owned();
    let run = |threads: usize| {
        let prior = tmp.path().join(format!("prior{threads}"));
        let fit = tmp.path().join(format!("fit{threads}"));
        let template = sim.join("template.bbm");
        let mut args = vec![
            "estimate-prior",
            "--template",
            p(&template),
            "--permutations",
            "4",
        ];
        for s in &subjects {
            args.extend(["--subject", s.as_str()]);
        }
        args.extend(SHORT_SCANS);
        args.extend(["--out", p(&prior)]);
        assert!(bbm_threads(threads, &args).status.success());
        let mut args = vec!["fit", "--prior", p(&prior), "--bold", &bold];
        args.extend(["--fc-prior", "cholesky", "--cholesky-k", "200"]);
        args.extend(SHORT_SCANS);
        args.extend(["--out", p(&fit)]);
        assert!(bbm_threads(threads, &args).status.success());
    };
    run(1);
    run(3);
    let root = tmp.path();
    for f in ["mean.bbm", "var.bbm", "fc_iw_psi.bbm", "fc_chol_scale.bbm"] {
        let (a, b) = (root.join("prior1").join(f), root.join("prior3").join(f));
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{f} differs");
    }
    for f in ["s_mean.bbm", "A.bbm", "G.bbm", "fit.json"] {
        let (a, b) = (root.join("fit1").join(f), root.join("fit3").join(f));
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap(), "{f} differs");
    }
}
