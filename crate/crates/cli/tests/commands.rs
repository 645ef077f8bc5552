use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use elf_core::{load_png, save_png, Tensor};

fn elf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_elf"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ELF_THREADS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    for sub in ["clean", "degraded", "map"] {
        for entry in fs::read_dir(dir.join(sub)).unwrap() {
            let p = entry.unwrap().path();
            files.push((format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()), fs::read(&p).unwrap()));
        }
    }
    files.push(("manifest".into(), fs::read(dir.join("manifest.tsv")).unwrap()));
    files.sort();
    files
}

const TINY_RUN: &str = "base_channels = 8\nrtb_depth = 1\nheads = 2\nca_reduction = 2\n\
epochs = 2\nbatch = 2\npatch = 32\nseed = 4\ntrain_dir = data\ncheckpoint_dir = ckpt\nlog_path = log.csv\n";

fn trained(dir: &Path) {
    let out = elf(&["synth", "--clean-count", "4", "--out", "data", "--seed", "9", "--size", "32"], dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    fs::write(dir.join("run.txt"), TINY_RUN).unwrap();
    let out = elf(&["train", "--config", "run.txt"], dir);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn synth_is_reproducible_and_manifest_regenerates_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a", "b"] {
        let out = elf(&["synth", "--clean-count", "3", "--out", name, "--seed", "7", "--size", "48"], d);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = read_tree(&d.join("a"));
    assert_eq!(a.len(), 10);
    assert_eq!(a, read_tree(&d.join("b")));
    let manifest = fs::read_to_string(d.join("a/manifest.tsv")).unwrap();
    assert_eq!(manifest, "0\t7\train\n1\t8\train\n2\t9\train\n");

    let out = elf(&["synth", "--manifest", "a/manifest.tsv", "--out", "c", "--size", "48"], d);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(a, read_tree(&d.join("c")));

    let img = load_png(&d.join("a/degraded/00000.png")).unwrap();
    assert_eq!(img.shape(), &[3, 48, 48]);
}

#[test]
fn synth_reads_spec_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.txt"), "streak_count = 0, 0\n").unwrap();
    let out = elf(&["synth", "--clean-count", "1", "--spec", "spec.txt", "--out", "o", "--size", "16"], d);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(fs::read(d.join("o/clean/00000.png")).unwrap(), fs::read(d.join("o/degraded/00000.png")).unwrap());

    fs::write(d.join("bad.txt"), "angle = 10, -10\n").unwrap();
    let out = elf(&["synth", "--clean-count", "1", "--spec", "bad.txt", "--out", "o"], d);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_infer_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    for f in ["ckpt/last.ckpt", "ckpt/epoch_0002.ckpt", "ckpt/config.txt", "log.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(d.join("log.csv")).unwrap();
    assert!(log.starts_with("epoch,step,loss,lr\n"));
    assert_eq!(log.lines().count(), 5);

    // same seed, same log
    fs::write(d.join("run2.txt"), TINY_RUN.replace("ckpt", "ckpt2").replace("log.csv", "log2.csv")).unwrap();
    assert_eq!(code(&elf(&["train", "--config", "run2.txt"], d)), 0);
    assert_eq!(log, fs::read_to_string(d.join("log2.csv")).unwrap());

    // arbitrary sizes survive inference unchanged
    fs::create_dir(d.join("in")).unwrap();
    let odd = Tensor::from_vec(vec![3, 100, 100], (0..30000).map(|i| (i % 97) as f32 / 96.0).collect()).unwrap();
    save_png(&odd, &d.join("in/odd.png")).unwrap();
    let small = Tensor::from_vec(vec![3, 5, 9], (0..135).map(|i| (i % 7) as f32 / 6.0).collect()).unwrap();
    save_png(&small, &d.join("in/small.png")).unwrap();
    for out_dir in ["out1", "out2"] {
        let out = elf(&["infer", "--checkpoint", "ckpt/last.ckpt", "--input", "in", "--output", out_dir], d);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(load_png(&d.join("out1/odd.png")).unwrap().shape(), &[3, 100, 100]);
    assert_eq!(load_png(&d.join("out1/small.png")).unwrap().shape(), &[3, 5, 9]);
    assert_eq!(fs::read(d.join("out1/odd.png")).unwrap(), fs::read(d.join("out2/odd.png")).unwrap());

    let out = elf(&["eval", "--pred", "data/clean", "--gt", "data/clean"], d);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out), "count,psnr,ssim\n4,inf,1.00000000\n");
    let out = elf(&["eval", "--pred", "data/degraded", "--gt", "data/clean"], d);
    let line = stdout(&out).lines().nth(1).unwrap().to_string();
    let psnr: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
    assert!(psnr > 5.0 && psnr < 40.0, "{line}");
}

#[test]
fn infer_needs_a_matching_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    fs::create_dir(d.join("in")).unwrap();
    fs::write(d.join("other.txt"), "base_channels = 4\nheads = 1\nca_reduction = 2\n").unwrap();
    let out = elf(
        &["infer", "--checkpoint", "ckpt/last.ckpt", "--input", "in", "--output", "o", "--config", "other.txt"],
        d,
    );
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("incompatible model"), "{}", stderr(&out));

    fs::copy(d.join("ckpt/last.ckpt"), d.join("lonely.ckpt")).unwrap();
    let out = elf(&["infer", "--checkpoint", "lonely.ckpt", "--input", "in", "--output", "o"], d);
    assert_eq!(code(&out), 3);

    let mut bytes = fs::read(d.join("ckpt/last.ckpt")).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    fs::write(d.join("ckpt/broken.ckpt"), bytes).unwrap();
    let out = elf(&["infer", "--checkpoint", "ckpt/broken.ckpt", "--input", "in", "--output", "o"], d);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("corrupt"), "{}", stderr(&out));
}

#[test]
fn exit_codes_and_one_line_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec![], 2),
        (vec!["frobnicate"], 2),
        (vec!["train"], 2),
        (vec!["eval", "--pred", "x"], 2),
        (vec!["train", "--config", "missing.txt"], 4),
        (vec!["eval", "--pred", "nowhere", "--gt", "nowhere"], 4),
    ];
    for (args, expected) in cases {
        let out = elf(&args, d);
        assert_eq!(code(&out), expected, "{args:?}: {}", stderr(&out));
        assert_eq!(stderr(&out).trim_end().lines().count(), 1, "{args:?}: {}", stderr(&out));
    }
    fs::write(d.join("bad.txt"), "batch = 4\nlearning_rate = 1\n").unwrap();
    let out = elf(&["train", "--config", "bad.txt"], d);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("unknown key `learning_rate`"));
    fs::write(d.join("nodata.txt"), "patch = 32\n").unwrap();
    assert_eq!(code(&elf(&["train", "--config", "nodata.txt"], d)), 3);
    assert_eq!(code(&elf(&["--help"], d)), 0);
}

#[test]
fn gradcheck_passes_and_reports_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = elf(&["gradcheck"], dir.path());
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.starts_with("check"));
    assert!(text.contains("pipeline.tiny"));
    assert!(text.trim_end().ends_with("0 failed"));

    let out = elf(&["gradcheck", "--tol", "1e-14"], dir.path());
    assert_eq!(code(&out), 5);
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn thread_cap_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let run = |value: &str| {
        Command::new(env!("CARGO_BIN_EXE_elf"))
            .args(["synth", "--clean-count", "2", "--out", "o", "--size", "16"])
            .current_dir(dir.path())
            .env("ELF_THREADS", value)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("1")), 0);
    assert_eq!(code(&run("0")), 3);
    assert_eq!(code(&run("many")), 3);
}
