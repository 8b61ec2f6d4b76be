use std::path::Path;
use std::process::{Command, Output};

fn s2cp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s2cp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn gen_small(root: &Path, domains: &str) {
    let o = s2cp(&[
        "gen-data",
        "--set",
        &format!("data.out={}", root.display()),
        "--set",
        &format!("data.domains={domains}"),
        "--set",
        "data.count=10",
        "--set",
        "data.size=32",
        "--set",
        "data.diameter=2,5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn manifest(root: &Path, d: usize) -> String {
    root.join(format!("domain-{d}/manifest.tsv")).display().to_string()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn out_of_range_style_is_a_config_error_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = s2cp(&[
        "gen-data",
        "--set",
        &format!("data.out={}", dir.path().display()),
        "--set",
        "style.beta=7",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("style.beta"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error() {
    let o = s2cp(&["train", "--set", "train.epoch=3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.epoch"));
}

#[test]
fn empty_manifest_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("manifest.tsv");
    std::fs::write(&m, "").unwrap();
    let o = s2cp(&[
        "train",
        "--out",
        &dir.path().join("run").display().to_string(),
        "--set",
        &format!("train.manifests={}", m.display()),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty manifest"), "{}", stderr(&o));
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = s2cp(&[
        "spectra",
        "--out",
        &dir.path().display().to_string(),
        "--set",
        "spectra.manifests=/nonexistent/manifest.tsv",
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    gen_small(&a, "0,2");
    gen_small(&b, "0,2");
    // resolved.conf echoes the differing output path; the dataset must match
    let data = |d: &Path| -> Vec<_> { read_tree(d).into_iter().filter(|(p, _)| p != "resolved.conf").collect() };
    let (ta, tb) = (data(&a), data(&b));
    assert_eq!(ta.len(), 2 * (2 * 10 + 1));
    assert_eq!(ta, tb);
}

#[test]
fn oracle_evaluation_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data, "1");
    let out = dir.path().join("eval");
    let o = s2cp(&[
        "eval",
        "--out",
        &out.display().to_string(),
        "--set",
        &format!("eval.manifest={}", manifest(&data, 1)),
        "--set",
        "eval.oracle=true",
        "--set",
        "eval.split=all",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let field = |k: &str| -> f64 { row[header.iter().position(|h| *h == k).unwrap()].parse().unwrap() };
    assert_eq!(field("iou"), 1.0);
    assert_eq!(field("pd"), 1.0);
    assert_eq!(field("fa_e6"), 0.0);
    assert!(out.join("roc.csv").exists() && out.join("resolved.conf").exists());
}

#[test]
fn training_then_evaluating_a_seen_domain_trips_the_guard() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data, "0,1");
    let run = dir.path().join("run").display().to_string();
    let common = [
        "--out",
        &run,
        "--set",
        "model.input_size=32",
        "--set",
        "model.base_channels=2",
        "--set",
        "train.epochs=1",
    ];
    let sources = format!("train.manifests={},{}", manifest(&data, 0), manifest(&data, 1));
    let mut args = vec!["train"];
    args.extend(common);
    args.extend(["--set", &sources]);
    let o = s2cp(&args);
    assert!(o.status.success(), "{}", stderr(&o));

    let target = format!("eval.manifest={}", manifest(&data, 1));
    let mut args = vec!["eval"];
    args.extend(common);
    args.extend(["--set", &target]);
    let o = s2cp(&args);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    args.extend(["--set", "eval.allow_seen_domains=true"]);
    let o = s2cp(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn duplicated_dataset_has_zero_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen_small(&data, "2");
    let m = manifest(&data, 2);
    let o = s2cp(&[
        "spectra",
        "--out",
        &dir.path().join("spectra").display().to_string(),
        "--set",
        &format!("spectra.manifests={m},{m}"),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("spectra/spectra_divergence.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2].parse::<f64>().unwrap(), 0.0);
    assert_eq!(row[3].parse::<f64>().unwrap(), 0.0);
}

#[test]
fn keys_lists_every_documented_key() {
    let o = s2cp(&["keys"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    for (k, _, _) in s2cp_cli::config::KEYS {
        assert!(text.contains(&format!("\n{k} = ")) || text.starts_with(&format!("{k} = ")), "{k}");
    }
}
