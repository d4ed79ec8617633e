//! The binary end to end on a tiny dataset: every subcommand, exit codes,
//! config echoes and byte-identical reruns.

use std::path::Path;
use std::process::{Command, Output};

fn pointview(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointview")).args(args).env_remove("POINTVIEW_OUT").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pointview(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const TINY_DATA: &[&str] = &[
    "--classes", "sphere,cube,torus", "--per_class", "4", "--points", "48", "--surface_samples", "256", "--views", "3", "--width", "16",
    "--height", "16",
];
const TINY_MODEL: &[&str] = &["--f2d_widths", "4,8", "--f3d_widths", "8,16", "--head_hidden", "16", "--embed_dim", "8", "--batch_size", "6"];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(tail).copied().collect()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn help_exits_zero_and_unknown_command_exits_one() {
    let out = pointview(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("gen-data"));
    let out = pointview(&["teleport"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("teleport"));
    assert_eq!(pointview(&["embed", "--bogus", "1"]).status.code(), Some(1));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["gradcheck", "--out", dir.path().to_str().unwrap()]);
    assert!(out.contains("end_to_end/stage2"));
    assert!(!out.contains("FAIL"));
    let csv = String::from_utf8(read(&dir.path().join("gradcheck.csv"))).unwrap();
    assert!(csv.starts_with("case,max_rel_error,passed\n"));
    assert!(dir.path().join("config.txt").exists());
}

#[test]
fn full_pipeline_through_the_binary() {
    let root = tempfile::tempdir().unwrap();
    let p = |s: &str| root.path().join(s).to_str().unwrap().to_string();
    let (data, data2, s1, s1b, s2, s2r, emb, probe, sweep, render) =
        (p("data"), p("data2"), p("s1"), p("s1b"), p("s2"), p("s2r"), p("emb"), p("probe"), p("sweep"), p("render"));

    ok(&with(&["gen-data", "--seed", "3", "--out", &data], TINY_DATA));
    ok(&with(&["gen-data", "--seed", "3", "--out", &data2], TINY_DATA));
    for f in ["manifest.txt", "config.txt", "objects/00000/cloud.pcd", "objects/00000/view00.ppm", "objects/00000/view02.csv"] {
        assert_eq!(read(&Path::new(&data).join(f)), read(&Path::new(&data2).join(f)), "{f}");
    }

    let cloud = format!("{data}/objects/00005/cloud.pcd");
    ok(&["render", "--input", &cloud, "--views", "4", "--width", "24", "--height", "24", "--out", &render]);
    for f in ["view03.ppm", "correspondences.csv", "matrices.csv", "config.txt"] {
        assert!(Path::new(&render).join(f).exists(), "{f}");
    }

    let stage1 = |out: &str, epochs: &str| ok(&with(&["pretrain-2d", "--data", &data, "--epochs", epochs, "--seed", "1", "--out", out], TINY_MODEL));
    stage1(&s1, "2");
    stage1(&s1b, "2");
    for f in ["checkpoint.pvssl", "loss_log.csv", "config.txt"] {
        assert_eq!(read(&Path::new(&s1).join(f)), read(&Path::new(&s1b).join(f)), "{f}");
    }
    let log = String::from_utf8(read(&Path::new(&s1).join("loss_log.csv"))).unwrap();
    assert!(log.starts_with("epoch,step,loss_total,loss_glb,loss_pnt,lr\n"));

    let init = format!("{s1}/checkpoint.pvssl");
    ok(&["pretrain-3d", "--data", &data, "--init", &init, "--epochs", "2", "--batch_size", "4", "--pair_batch", "8", "--seed", "1", "--out", &s2]);
    // one epoch, then resume to two: the second epoch's records must match
    let half = p("s2half");
    ok(&["pretrain-3d", "--data", &data, "--init", &init, "--epochs", "1", "--batch_size", "4", "--pair_batch", "8", "--seed", "1", "--out", &half]);
    ok(&["pretrain-3d", "--data", &data, "--resume", &format!("{half}/checkpoint.pvssl"), "--epochs", "2", "--out", &s2r]);
    let full = String::from_utf8(read(&Path::new(&s2).join("loss_log.csv"))).unwrap();
    let rest = String::from_utf8(read(&Path::new(&s2r).join("loss_log.csv"))).unwrap();
    let tail: Vec<&str> = full.lines().filter(|l| l.starts_with("2,")).collect();
    assert!(!tail.is_empty());
    assert_eq!(rest.lines().skip(1).collect::<Vec<_>>(), tail);
    assert_eq!(read(&Path::new(&s2).join("checkpoint.pvssl")), read(&Path::new(&s2r).join("checkpoint.pvssl")));

    ok(&["embed", "--data", &data, "--checkpoint", &format!("{s2}/checkpoint.pvssl"), "--out", &emb]);
    let emb_file = format!("{emb}/embeddings.csv");
    let out = ok(&["probe", "--embeddings", &emb_file, "--protocol", "knn", "--knn_k", "3", "--out", &probe]);
    assert!(out.contains("accuracy"));
    ok(&["sweep", "--embeddings", &emb_file, "--fractions", "0.5,1.0", "--seeds", "0,1", "--probe_epochs", "50", "--out", &sweep]);
    let results = String::from_utf8(read(&Path::new(&sweep).join("results.csv"))).unwrap();
    assert_eq!(results.lines().count(), 1 + 4);
    assert!(results.starts_with("protocol,fraction,seed,accuracy\n"));
    for d in [&emb, &probe, &sweep, &s2] {
        assert!(Path::new(d).join("config.txt").exists(), "{d}");
    }

    // wrong checkpoint kind and missing inputs are runtime and usage errors
    let out = pointview(&["pretrain-3d", "--data", &data, "--init", &format!("{s2}/checkpoint.pvssl"), "--out", &p("bad")]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(pointview(&["pretrain-3d", "--data", &data, "--out", &p("bad")]).status.code(), Some(1));
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_pointview"))
        .args(["gen-data", "--classes", "sphere,cube", "--per_class", "2", "--points", "32", "--surface_samples", "128", "--views", "2"])
        .env("POINTVIEW_OUT", &target)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(target.join("manifest.txt").exists());
}
