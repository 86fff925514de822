use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mmvm_harness::report::read_results_csv;

const TINY: &str = r#"{
  "seeds": [0, 1],
  "data": {"type": "synthetic", "config": {"n_subjects": 300, "label_count": 3, "base_rates": [0.3, 0.4, 0.5]}},
  "vae": {"latent_dim": 4, "hidden_sizes": [16], "epochs": 3},
  "probe": {"n_estimators": 10, "max_depth": 4},
  "supervised": {"hidden_sizes": [8], "epochs": 3},
  "sweep": {"fractions": [0.1, 1.0]},
  "generation": {"count": 5}
}"#;

fn mmvm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmvm"))
        .args(["--out", dir.join("out").to_str().unwrap(), "--threads", "1"])
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn with_config(json: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cfg.json"), json).unwrap();
    dir
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join("out").join(name)).unwrap()
}

#[test]
fn latent_experiment_is_reproducible_and_complete() {
    let a = with_config(TINY);
    let b = with_config(TINY);
    ok(&mmvm(a.path(), &["--config", "cfg.json", "latent-exp"]));
    ok(&mmvm(b.path(), &["--config", "cfg.json", "latent-exp"]));
    for f in ["latent_results.csv", "latent_summary.csv", "latent_macro.csv", "train_log.csv", "train_streams.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }

    // Six kinds on z_f and z_l, plus z_j for the four aggregating kinds.
    let table = read_results_csv(&a.path().join("out/latent_results.csv")).unwrap();
    assert_eq!(table.rows.len(), (6 * 2 + 4) * 2 * 3);

    // The macro table is the mean over labels, then over seeds.
    let macro_csv = read(a.path(), "latent_macro.csv");
    for line in macro_csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let seeds: Vec<f64> = [0u64, 1]
            .iter()
            .map(|&s| {
                let v: Vec<f64> = table
                    .rows
                    .iter()
                    .filter(|r| r.method == f[0] && r.representation == f[1] && r.seed == s)
                    .map(|r| r.auroc)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect();
        let mean: f64 = f[3].parse().unwrap();
        assert!((mean - (seeds[0] + seeds[1]) / 2.0).abs() < 1e-12, "{line}");
    }

    // Rebuilding from the results CSV reproduces the summaries byte for byte.
    let summary = read(a.path(), "latent_summary.csv");
    fs::remove_file(a.path().join("out/latent_summary.csv")).unwrap();
    ok(&mmvm(a.path(), &["report"]));
    assert_eq!(read(a.path(), "latent_summary.csv"), summary);
    assert_eq!(read(a.path(), "latent_macro.csv"), macro_csv);

    let c = with_config(TINY);
    ok(&mmvm(c.path(), &["--config", "cfg.json", "--seed", "5", "latent-exp"]));
    assert_ne!(read(a.path(), "latent_results.csv"), read(c.path(), "latent_results.csv"));
}

#[test]
fn full_label_sweep_point_matches_the_latent_probe() {
    let cfg = TINY
        .replace(r#""fractions": [0.1, 1.0]"#, r#""fractions": [1.0], "supervised": false"#)
        .replace(r#""seeds": [0, 1],"#, r#""seeds": [0, 1], "models": ["mmvm"],"#);
    let dir = with_config(&cfg);
    ok(&mmvm(dir.path(), &["--config", "cfg.json", "latent-exp"]));
    ok(&mmvm(dir.path(), &["--config", "cfg.json", "label-sweep"]));
    let latent = read_results_csv(&dir.path().join("out/latent_results.csv")).unwrap();
    let sweep = read_results_csv(&dir.path().join("out/sweep_results.csv")).unwrap();
    assert_eq!(latent.rows.len(), sweep.rows.len());
    for (l, s) in latent.rows.iter().zip(&sweep.rows) {
        assert_eq!((&l.method, &l.representation, &l.label, l.seed), (&s.method, &s.representation, &s.label, s.seed));
        assert_eq!(l.auroc, s.auroc);
    }
}

#[test]
fn label_sweep_writes_curves_for_every_method() {
    let dir = with_config(&TINY.replace(r#""seeds": [0, 1]"#, r#""seeds": [3]"#));
    ok(&mmvm(dir.path(), &["--config", "cfg.json", "label-sweep"]));
    let curve = read(dir.path(), "sweep_curve.dat");
    let header = curve.lines().next().unwrap();
    for m in ["mmvm", "supervised_unimodal", "supervised_ensemble", "supervised_multimodal"] {
        assert!(header.contains(&format!("{m}_mean")), "{header}");
    }
    assert_eq!(curve.lines().count(), 3);
    let table = read_results_csv(&dir.path().join("out/sweep_results.csv")).unwrap();
    // Per size: mmvm z_f, z_l; unimodal z_f, z_l; ensemble; multimodal.
    assert_eq!(table.rows.len(), 2 * 6 * 3);
}

#[test]
fn generation_outputs() {
    let dir = with_config(TINY);
    ok(&mmvm(dir.path(), &["--config", "cfg.json", "generate"]));
    let csv = read(dir.path(), "generation_mse.csv");
    assert_eq!(csv.lines().next().unwrap(), "method,seed,count,mse_conditional,mse_prior");
    assert_eq!(csv.lines().count(), 1 + 6 * 2);
    let generated = read(dir.path(), "generation/mmvm_seed0_generated.csv");
    assert_eq!(generated.lines().count(), 1 + 5);

    ok(&mmvm(dir.path(), &["--config", "cfg.json", "generate", "--count", "0"]));
    assert_eq!(read(dir.path(), "generation_mse.csv").lines().count(), 1);
}

#[test]
fn gen_data_and_train_write_their_files() {
    let dir = with_config(&TINY.replace(r#""seeds": [0, 1],"#, r#""seeds": [0], "models": ["poe", "mmvm"],"#));
    ok(&mmvm(dir.path(), &["--config", "cfg.json", "gen-data"]));
    assert!(read(dir.path(), "data/manifest.csv").starts_with("sample_id,subject_id,study_id,path_frontal,path_lateral,"));
    let splits = read(dir.path(), "data/splits.csv");
    assert!(splits.lines().skip(1).all(|l| l.ends_with(",train") || l.ends_with(",val") || l.ends_with(",test")));

    ok(&mmvm(dir.path(), &["--config", "cfg.json", "train"]));
    for f in ["models/poe_seed0.ckpt", "models/mmvm_seed0.ckpt"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
    let streams = read(dir.path(), "train_streams.csv");
    let digests: Vec<&str> = streams.lines().skip(1).map(|l| l.split_once(',').unwrap().1.split_once(',').unwrap().1).collect();
    assert_eq!(digests.len(), 2);
    assert_eq!(digests[0], digests[1]);

    // A manifest written by gen-data loads back as a data source.
    let manifest = dir.path().join("out/data/manifest.csv");
    let cfg = TINY
        .replace(
            r#"{"type": "synthetic", "config": {"n_subjects": 300, "label_count": 3, "base_rates": [0.3, 0.4, 0.5]}}"#,
            &format!(r#"{{"type": "manifest", "path": {:?}}}"#, manifest.to_str().unwrap()),
        )
        .replace(r#""seeds": [0, 1],"#, r#""seeds": [0], "models": ["mmvm"],"#);
    let again = with_config(&cfg);
    ok(&mmvm(again.path(), &["--config", "cfg.json", "train"]));
}

#[test]
fn exit_codes() {
    let dir = with_config("{ not json");
    assert_eq!(mmvm(dir.path(), &["--config", "cfg.json", "train"]).status.code(), Some(2));

    let dir = with_config(r#"{"vae": {"latent_dims": 3}}"#);
    let out = mmvm(dir.path(), &["--config", "cfg.json", "train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("latent_dims"));

    let dir = with_config(r#"{"vae": {"latent_dim": 0}}"#);
    assert_eq!(mmvm(dir.path(), &["--config", "cfg.json", "train"]).status.code(), Some(2));

    let dir = with_config(r#"{"data": {"type": "manifest", "path": "missing.csv"}}"#);
    assert_eq!(mmvm(dir.path(), &["--config", "cfg.json", "train"]).status.code(), Some(3));

    let dir = with_config("{}");
    assert_eq!(mmvm(dir.path(), &["report"]).status.code(), Some(3));
    assert_eq!(mmvm(dir.path(), &["--config", "absent.json", "report"]).status.code(), Some(2));
    assert_eq!(mmvm(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(mmvm(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn raw_label_codes_need_the_flag() {
    let dir = with_config(TINY);
    ok(&mmvm(dir.path(), &["--config", "cfg.json", "gen-data"]));
    let manifest = dir.path().join("out/data/manifest.csv");
    let text = fs::read_to_string(&manifest).unwrap();
    let mut lines = text.lines();
    let mut raw = format!("{}\n", lines.next().unwrap());
    for (i, line) in lines.enumerate() {
        let mut cells: Vec<String> = line.split(',').map(String::from).collect();
        let last = cells.len() - 1;
        if cells[last] == "0" {
            cells[last] = if i % 2 == 0 { "-1.0".into() } else { String::new() };
        } else {
            cells[last] = "1.0".into();
        }
        raw.push_str(&cells.join(","));
        raw.push('\n');
    }
    fs::write(&manifest, raw).unwrap();

    let cfg = format!(
        r#"{{"seeds": [0], "models": ["mmvm"], "data": {{"type": "manifest", "path": {:?}}}, "vae": {{"latent_dim": 2, "hidden_sizes": [8], "epochs": 1}}}}"#,
        manifest.to_str().unwrap()
    );
    let run = with_config(&cfg);
    assert_eq!(mmvm(run.path(), &["--config", "cfg.json", "train"]).status.code(), Some(3));
    ok(&mmvm(run.path(), &["--config", "cfg.json", "--raw-labels", "train"]));
    assert_eq!(mmvm(dir.path(), &["--config", "cfg.json", "--raw-labels", "train"]).status.code(), Some(2));
}
