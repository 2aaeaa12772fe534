use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;
use ddinpaint::cli::{run, Cli, Outcome};
use ddinpaint::dataset::{self, read_manifest};
use ddinpaint::volume_io::{read_volume, write_volume};
use ddinpaint::{checkpoint, Error};
use ddinpaint_core::volume::{MaskedCase, Volume};

fn exec(args: &[&str]) -> (Result<Outcome, Error>, String, String) {
    let cli = Cli::try_parse_from(std::iter::once("ddinpaint").chain(args.iter().copied())).expect("valid arguments");
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let r = run(cli, &mut out, &mut err);
    (r, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (r, out, err) = exec(args);
    assert_eq!(r.unwrap(), Outcome::default(), "{err}");
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "unet": {"base_channels": 8, "channel_multipliers": [1, 2], "attention_resolutions": [8], "time_embed_dim": 16, "image_size": 16},
  "schedule": {"timesteps": 8},
  "train": {"steps": 2, "batch_size": 2, "checkpoint_every": 1},
  "synth": {"dims": [12, 16, 16], "mask_radius": [1.5, 2.5]},
  "sample": {"inpaint": {"batch_slices": 4}}
}"#;

/// Tiny dataset and a two-step checkpoint.
fn tiny_setup(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = root.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    ok(&["synth", "--out", s(&data), "--count", "2", "--seed", "5", "--config", s(&cfg)]);
    let ckpt = root.join("tiny.ckpt");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]);
    (cfg, data, ckpt)
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn synth_writes_reproducible_valid_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = ok(&["synth", "--out", s(d), "--count", "4", "--seed", "9", "--dims", "16,32,32"]);
        assert!(out.starts_with("config={"));
    }
    let m = read_manifest(&a).unwrap();
    assert_eq!(m.cases.len(), 4);
    for c in &m.cases {
        let dir = a.join(&c.dir);
        assert!(dir.is_dir());
        let (gt, mask) = dataset::read_training_volumes(&dir).unwrap();
        let base = read_volume(&dir.join("baseline.vvol")).unwrap();
        MaskedCase::new(Some(gt), mask, base).unwrap();
    }
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
    let c = tmp.path().join("c");
    ok(&["synth", "--out", s(&c), "--count", "4", "--seed", "10", "--dims", "16,32,32"]);
    assert_ne!(dir_bytes(&a), dir_bytes(&c));
}

#[test]
fn bad_dims_are_rejected_by_the_parser() {
    assert!(Cli::try_parse_from(["ddinpaint", "synth", "--out", "x", "--count", "1", "--dims", "4,4"]).is_err());
    assert!(Cli::try_parse_from(["ddinpaint", "synth", "--out", "x", "--count", "1", "--dims", "0,4,4"]).is_err());
}

#[test]
fn train_logs_steps_and_resume_continues_numbering() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, data, ckpt) = tiny_setup(tmp.path());
    assert_eq!(checkpoint::load(&ckpt).unwrap().step, 2);
    let out = ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt), "--resume", s(&ckpt), "--steps", "4"]);
    let steps: Vec<u64> = out
        .lines()
        .filter_map(|l| l.strip_prefix("step="))
        .map(|l| {
            let mut parts = l.split_whitespace();
            let k = parts.next().unwrap().parse().unwrap();
            let loss: f64 = parts.next().unwrap().strip_prefix("loss=").unwrap().parse().unwrap();
            assert!(loss.is_finite());
            k
        })
        .collect();
    assert_eq!(steps, vec![3, 4]);
    assert_eq!(checkpoint::load(&ckpt).unwrap().step, 4);
}

#[test]
fn train_rejects_empty_dataset_and_bad_config() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("empty");
    fs::create_dir_all(&data).unwrap();
    fs::write(data.join("manifest.json"), r#"{"cases": []}"#).unwrap();
    let ckpt = tmp.path().join("x.ckpt");
    let (r, _, _) = exec(&["train", "--data", s(&data), "--out", s(&ckpt), "--steps", "1"]);
    assert!(r.unwrap_err().to_string().contains("empty"));
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, "{\n  \"train\": {\"stepz\": 3}\n}").unwrap();
    let (r, _, _) = exec(&["train", "--data", s(&data), "--out", s(&ckpt), "--config", s(&cfg)]);
    let msg = r.unwrap_err().to_string();
    assert!(msg.contains("stepz") && msg.contains("line 2"), "{msg}");
}

#[test]
fn sample_is_seeded_and_ignores_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, data, ckpt) = tiny_setup(tmp.path());
    let case = data.join("case_0000");
    fs::remove_file(case.join("gt.vvol")).unwrap();
    let (o1, o2, o3) = (tmp.path().join("1.vvol"), tmp.path().join("2.vvol"), tmp.path().join("3.vvol"));
    ok(&["sample", "--ckpt", s(&ckpt), "--case", s(&case), "--out", s(&o1), "--seed", "4"]);
    ok(&["sample", "--ckpt", s(&ckpt), "--case", s(&case), "--out", s(&o2), "--seed", "4"]);
    ok(&["sample", "--ckpt", s(&ckpt), "--case", s(&case), "--out", s(&o3), "--seed", "5"]);
    assert_eq!(fs::read(&o1).unwrap(), fs::read(&o2).unwrap());
    assert_ne!(fs::read(&o1).unwrap(), fs::read(&o3).unwrap());
    let base = read_volume(&case.join("baseline.vvol")).unwrap();
    assert_eq!(read_volume(&o1).unwrap().dims(), base.dims());
}

#[test]
fn sample_with_empty_mask_copies_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, data, ckpt) = tiny_setup(tmp.path());
    let case = tmp.path().join("blank");
    fs::create_dir_all(&case).unwrap();
    let base = read_volume(&data.join("case_0001/baseline.vvol")).unwrap();
    let base = base.map(|v| v * 3.0 + 7.0).unwrap();
    write_volume(&case.join("baseline.vvol"), &base, None).unwrap();
    write_volume(&case.join("mask.vvol"), &Volume::zeros(base.dims()), None).unwrap();
    let out = tmp.path().join("o.vvol");
    ok(&["sample", "--ckpt", s(&ckpt), "--case", s(&case), "--out", s(&out)]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(case.join("baseline.vvol")).unwrap());
}

#[test]
fn sample_size_mismatch_names_both_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, _, ckpt) = tiny_setup(tmp.path());
    let data = tmp.path().join("big");
    ok(&["synth", "--out", s(&data), "--count", "1", "--dims", "12,20,20", "--seed", "1"]);
    let case = data.join("case_0000");
    let out = tmp.path().join("o.vvol");
    let (r, _, _) = exec(&["sample", "--ckpt", s(&ckpt), "--case", s(&case), "--out", s(&out)]);
    let msg = r.unwrap_err().to_string();
    assert!(msg.contains("20x20") && msg.contains("16x16"), "{msg}");
    ok(&["sample", "--ckpt", s(&ckpt), "--case", s(&case), "--out", s(&out), "--crop"]);
    assert_eq!(read_volume(&out).unwrap().dims(), [12, 20, 20]);
}

#[test]
fn eval_identity_two_cases_and_per_case_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--count", "2", "--seed", "3"]);
    let pred = tmp.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for id in ["case_0000", "case_0001"] {
        fs::copy(data.join(id).join("gt.vvol"), pred.join(format!("{id}.vvol"))).unwrap();
    }
    let csv = tmp.path().join("report.csv");
    let out = ok(&["eval", "--pred", s(&pred), "--gt", s(&data), "--mask", s(&data), "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "case_id,ssim,psnr,mse");
    assert_eq!(lines.len(), 2 + 3);
    assert_eq!(lines[1], "case_0000,1.000000,100.000000,0.000000");
    assert!(out.contains("1.0000 [±0.0000]") && out.contains("100.0000 [±0.0000]"), "{out}");

    // single-file form
    let one = tmp.path().join("one.csv");
    let gt = data.join("case_0001/gt.vvol");
    let mask = data.join("case_0001/mask.vvol");
    ok(&["eval", "--pred", s(&gt), "--gt", s(&gt), "--mask", s(&mask), "--out", s(&one)]);
    assert_eq!(fs::read_to_string(&one).unwrap().lines().count(), 4);

    // a case with the wrong dims is reported and skipped
    write_volume(&pred.join("case_0001.vvol"), &Volume::zeros([2, 2, 2]), None).unwrap();
    let (r, _, err) = exec(&["eval", "--pred", s(&pred), "--gt", s(&data), "--mask", s(&data), "--out", s(&csv)]);
    assert_eq!(r.unwrap().case_failures, 1);
    assert!(err.contains("case_0001"), "{err}");
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 4);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_ddinpaint");
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    let st = Command::new(bin).args(["synth", "--out", s(&data), "--count", "1", "--seed", "2"]).output().unwrap();
    assert!(st.status.success());
    let pred = tmp.path().join("p");
    fs::create_dir_all(&pred).unwrap();
    write_volume(&pred.join("case_0000.vvol"), &Volume::zeros([1, 1, 1]), None).unwrap();
    let st = Command::new(bin)
        .args(["eval", "--pred", s(&pred), "--gt", s(&data), "--mask", s(&data), "--out", s(&tmp.path().join("r.csv"))])
        .output()
        .unwrap();
    assert!(!st.status.success());
    let st = Command::new(bin).args(["sample"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
}

#[test]
fn desk_scale_training_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["synth", "--out", s(&data), "--count", "8", "--seed", "100", "--dims", "16,32,32"]);
    let cfg = tmp.path().join("desk.json");
    fs::write(&cfg, r#"{"schedule": {"timesteps": 100}, "train": {"steps": 300, "checkpoint_every": 100, "ema_rate": 0.99}, "log_every": 10}"#).unwrap();
    let ckpt = tmp.path().join("desk.ckpt");
    let out = ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt)]);
    let losses: Vec<f64> = out
        .lines()
        .filter(|l| l.starts_with("step="))
        .map(|l| l.split_whitespace().nth(1).unwrap().strip_prefix("loss=").unwrap().parse().unwrap())
        .collect();
    assert_eq!(losses.len(), 30);
    let head: f64 = losses[..3].iter().sum::<f64>() / 3.0;
    let tail: f64 = losses[27..].iter().sum::<f64>() / 3.0;
    assert!(tail < head, "loss did not fall: {head} -> {tail}");
    assert_eq!(out.lines().filter(|l| l.starts_with("checkpoint step=")).count(), 3);

    let loaded = checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.step, 300);
    assert_eq!(loaded.unet.image_size, 32);
    let sampled = tmp.path().join("s.vvol");
    ok(&["sample", "--ckpt", s(&ckpt), "--case", s(&data.join("case_0000")), "--out", s(&sampled)]);
    let v = read_volume(&sampled).unwrap();
    assert!(v.voxels().iter().all(|x| x.is_finite()));
}
