use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const TINY: &[&str] = &[
    "--data.size",
    "16",
    "--regression.widths",
    "[8,8,16]",
    "--diffusion.widths",
    "[8,8,16]",
    "--diffusion.steps",
    "8",
];

fn qds(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qds"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn qds")
}

fn ok(args: &[&str]) -> Output {
    let out = qds(args);
    assert!(
        out.status.success(),
        "qds {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn tiny(args: &[&str]) -> Vec<String> {
    args.iter().chain(TINY).map(|s| s.to_string()).collect()
}

fn run_tiny(args: &[&str]) -> Output {
    let v = tiny(args);
    qds(&v.iter().map(String::as_str).collect::<Vec<_>>())
}

fn ok_tiny(args: &[&str]) -> Output {
    let v = tiny(args);
    ok(&v.iter().map(String::as_str).collect::<Vec<_>>())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Shared tiny dataset, regression run and classical/hybrid diffusion runs.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    reg: PathBuf,
    cls: PathBuf,
    hyb: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let p = |n: &str| dir.path().join(n);
        let (data, reg, cls, hyb) = (p("data"), p("reg"), p("cls"), p("hyb"));
        ok_tiny(&[
            "gen-data",
            "--out",
            s(&data),
            "--n-train",
            "16",
            "--n-val",
            "6",
            "--n-ood",
            "4",
            "--seed",
            "3",
        ]);
        ok_tiny(&[
            "train",
            "--stage",
            "regression",
            "--data",
            s(&data),
            "--out",
            s(&reg),
            "--steps",
            "3",
            "--batch",
            "4",
        ]);
        ok_tiny(&[
            "train",
            "--stage",
            "diffusion",
            "--data",
            s(&data),
            "--regression",
            s(&reg),
            "--out",
            s(&cls),
            "--steps",
            "3",
            "--batch",
            "4",
        ]);
        ok_tiny(&[
            "train",
            "--stage",
            "diffusion",
            "--data",
            s(&data),
            "--regression",
            s(&reg),
            "--out",
            s(&hyb),
            "--steps",
            "3",
            "--batch",
            "4",
            "--hybrid.enabled",
            "true",
            "--ansatz.n_qubits",
            "8",
        ]);
        Fixture {
            _dir: dir,
            data,
            reg,
            cls,
            hyb,
        }
    })
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in walk(dir) {
        let rel = e.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
        if rel.ends_with("resolved_config.json") {
            continue;
        }
        out.push((rel, fs::read(&e).unwrap()));
    }
    out.sort();
    out
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut v = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            v.extend(walk(&p));
        } else {
            v.push(p);
        }
    }
    v
}

#[test]
fn gen_data_without_out_is_a_config_error() {
    let out = qds(&["gen-data", "--n-train", "4"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"data": {"n_trian": 4}}"#).unwrap();
    let out = qds(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_data_writes_requested_split_sizes_and_replays_identically() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok_tiny(&[
        "gen-data",
        "--out",
        s(&a),
        "--n-train",
        "5",
        "--n-val",
        "100",
        "--n-ood",
        "3",
        "--seed",
        "11",
    ]);
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("val/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["count"], 100);
    let resolved = a.join("resolved_config.json");
    ok(&["rerun", s(&resolved), "--out", s(&b)]);
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
}

#[test]
fn ood_split_is_shifted() {
    let f = fixture();
    let mean_u = |split: &str| -> f64 {
        let meta: serde_json::Value = serde_json::from_str(
            &fs::read_to_string(f.data.join(split).join("meta.json")).unwrap(),
        )
        .unwrap();
        meta["spec"]["mean_u"].as_f64().unwrap()
    };
    assert!(mean_u("ood") > mean_u("val") + 0.5);
}

#[test]
fn diffusion_without_regression_is_a_config_error() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = run_tiny(&[
        "train",
        "--stage",
        "diffusion",
        "--data",
        s(&f.data),
        "--out",
        s(&dir.path().join("d")),
        "--steps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("regression checkpoint"));
}

#[test]
fn mismatched_resolution_is_a_config_error() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = qds(&[
        "train",
        "--stage",
        "regression",
        "--data",
        s(&f.data),
        "--out",
        s(&dir.path().join("r")),
        "--steps",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_training_is_a_numeric_error() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = run_tiny(&[
        "train",
        "--stage",
        "regression",
        "--data",
        s(&f.data),
        "--out",
        s(&dir.path().join("r")),
        "--steps",
        "20",
        "--batch",
        "4",
        "--train.lr",
        "1e300",
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let full = dir.path().join("full");
    let part = dir.path().join("part");
    let common = [
        "--stage",
        "regression",
        "--data",
        s(&f.data),
        "--batch",
        "4",
        "--seed",
        "5",
    ];
    let with = |extra: &[&str]| -> Vec<String> {
        let mut v = vec!["train".to_string()];
        v.extend(common.iter().map(|x| x.to_string()));
        v.extend(extra.iter().map(|x| x.to_string()));
        v
    };
    let call = |v: Vec<String>| ok_tiny(&v.iter().map(String::as_str).collect::<Vec<_>>());
    call(with(&[
        "--out",
        s(&full),
        "--steps",
        "6",
        "--train.checkpoint_every",
        "2",
    ]));
    call(with(&[
        "--out",
        s(&part),
        "--steps",
        "4",
        "--train.checkpoint_every",
        "2",
    ]));
    ok(&["train", "--resume", "--out", s(&part), "--steps", "6"]);
    assert_eq!(
        fs::read(full.join("loss.csv")).unwrap(),
        fs::read(part.join("loss.csv")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("model.ckpt")).unwrap(),
        fs::read(part.join("model.ckpt")).unwrap()
    );
}

#[test]
fn zero_members_is_a_config_error() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = qds(&[
        "evaluate",
        "--data",
        s(&f.data),
        "--members",
        "0",
        "--out",
        s(&dir.path().join("e")),
        s(&f.cls),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_member_crps_equals_mae() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("e");
    ok(&[
        "evaluate",
        "--data",
        s(&f.data),
        "--members",
        "1",
        "--limit",
        "3",
        "--out",
        s(&out),
        s(&f.cls),
    ]);
    let csv = fs::read_to_string(out.join("cls/metrics.csv")).unwrap();
    let mut rows: Vec<(String, String, String, String)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].into(), c[1].into(), c[2].into(), c[3].into())
        })
        .collect();
    rows.sort();
    assert_eq!(rows.len(), 3 * 2 * 2);
    for pair in rows.chunks(2) {
        assert_eq!(pair[0].2, "crps");
        assert_eq!(pair[1].2, "mae");
        assert_eq!(pair[0].3, pair[1].3);
    }
}

#[test]
fn evaluate_writes_table_wins_and_ensembles() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("e");
    let stdout = ok(&[
        "evaluate",
        "--data",
        s(&f.data),
        "--members",
        "2",
        "--out",
        s(&out),
        s(&f.cls),
        s(&f.hyb),
    ])
    .stdout;
    let table = String::from_utf8(stdout).unwrap();
    assert!(table.contains("| Model | u10m MAE"));
    assert!(table.contains("/24 ("), "{table}");
    let wins = fs::read_to_string(out.join("wins.csv")).unwrap();
    assert!(wins.starts_with("baseline,challenger,wins,total,percent\ncls,hyb,"));
    for label in ["cls", "hyb"] {
        for file in [
            "ensemble.json",
            "members.f32",
            "regression.f32",
            "metrics.csv",
            "summary.json",
        ] {
            assert!(out.join(label).join(file).exists(), "{label}/{file}");
        }
    }
    let bytes = fs::metadata(out.join("hyb/members.f32")).unwrap().len();
    assert_eq!(bytes, 6 * 2 * 2 * 16 * 16 * 4);
}

#[test]
fn evaluate_rerun_reproduces_csvs() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&[
        "evaluate",
        "--data",
        s(&f.data),
        "--members",
        "2",
        "--limit",
        "2",
        "--out",
        s(&a),
        s(&f.reg),
        s(&f.hyb),
    ]);
    ok(&["rerun", s(&a.join("resolved_config.json")), "--out", s(&b)]);
    assert_eq!(read_dir_bytes(&a), read_dir_bytes(&b));
}

#[test]
fn compare_on_a_classical_run_is_a_config_error() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = qds(&[
        "compare-backends",
        "--run",
        s(&f.cls),
        "--data",
        s(&f.data),
        "--out",
        s(&dir.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no quantum layer"));
}

#[test]
fn noiseless_noisy_backend_gives_zero_deltas() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("c");
    ok(&[
        "compare-backends",
        "--run",
        s(&f.hyb),
        "--data",
        s(&f.data),
        "--times",
        "2",
        "--members",
        "2",
        "--p-dep",
        "0,0.05",
        "--shots",
        "4",
        "--out",
        s(&out),
    ]);
    let delta = fs::read_to_string(out.join("delta_pdep_0e0.csv")).unwrap();
    let mut lines = delta.lines();
    assert_eq!(lines.next(), Some("time_id,variable,metric,delta"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 2 * 2);
    assert!(rows.iter().all(|l| l.ends_with(",0")), "{delta}");
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn diagnostics_needs_persisted_ensembles() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = qds(&["diagnostics", "--out", s(&dir.path().join("d")), s(&f.cls)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diagnostics_on_truth_only() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("d");
    ok(&["diagnostics", "--data", s(&f.data), "--out", s(&out)]);
    let spectra = fs::read_to_string(out.join("spectra.csv")).unwrap();
    assert!(spectra.starts_with("source,direction,k,power\n"));
    assert!(spectra.lines().skip(1).all(|l| l.starts_with("truth,")));
    for file in [
        "speed_pdf.csv",
        "joint.csv",
        "fss.csv",
        "diagnostics.json",
        "spectrum_zonal.svg",
    ] {
        assert!(out.join(file).exists(), "{file}");
    }
}

#[test]
fn unreadable_rerun_file_is_reported() {
    let dir = TempDir::new().unwrap();
    let out = qds(&["rerun", s(&dir.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(2));
}
