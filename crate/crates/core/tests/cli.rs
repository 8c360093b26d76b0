//! End-to-end runs of the `tcnn` binary on a tiny synthetic MNIST-format
//! dataset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tcnn::pnm;
use tcnn::tensor::Tensor;

fn tcnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcnn")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn idx_images(n: usize, seed: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [2051u32, n as u32, 28, 28] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in 0..n {
        let label = img % 10;
        for p in 0..784 {
            let col = p % 28;
            let on = col / 3 == label;
            let jitter = ((p * 31 + img * 7 + seed) % 40) as u8;
            out.push(if on { 200 + jitter / 2 } else { jitter });
        }
    }
    out
}

fn idx_labels(n: usize) -> Vec<u8> {
    let mut out = Vec::new();
    for v in [2049u32, n as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend((0..n).map(|i| (i % 10) as u8));
    out
}

/// `<root>/mnist/` with 30 training and 20 test images.
fn synthetic_mnist(root: &Path) -> PathBuf {
    let dir = root.join("mnist");
    fs::create_dir_all(&dir).unwrap();
    fs::write(dir.join("train-images-idx3-ubyte"), idx_images(30, 0)).unwrap();
    fs::write(dir.join("train-labels-idx1-ubyte"), idx_labels(30)).unwrap();
    fs::write(dir.join("t10k-images-idx3-ubyte"), idx_images(20, 5)).unwrap();
    fs::write(dir.join("t10k-labels-idx1-ubyte"), idx_labels(20)).unwrap();
    root.to_path_buf()
}

fn train(data: &Path, out: &Path, arch: &str) -> Output {
    tcnn(&[
        "train",
        "--dataset",
        "mnist",
        "--arch",
        arch,
        "--epochs",
        "2",
        "--batch",
        "8",
        "--seed",
        "3",
        "--no-wall-time",
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ])
}

#[test]
fn train_eval_and_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synthetic_mnist(tmp.path());
    let runs = tmp.path().join("runs");
    for arch in ["conv-conv", "minps-maxps", "minpmax-maxpmin", "minps-conv"] {
        let o = train(&data, &runs, arch);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("best test accuracy"));
    }
    let run = runs.join("mnist-minps-maxps-seed3");
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,split,loss,accuracy,mults,adds,comparisons,wall_ms"));
    assert_eq!(lines.count(), 4);
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.contains("arch = minps-maxps") && manifest.contains("seed = 3"));

    // same seed, fresh directory: identical metrics and checkpoint
    let again = tmp.path().join("again");
    assert!(train(&data, &again, "minps-maxps").status.success());
    let rerun = again.join("mnist-minps-maxps-seed3");
    assert_eq!(csv, fs::read_to_string(rerun.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(run.join("best.ckpt")).unwrap(), fs::read(rerun.join("best.ckpt")).unwrap());

    let ck = run.join("best.ckpt");
    let o = tcnn(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--noise",
        "noise1,noise4:0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let acc = |label: &str| {
        text.lines()
            .find(|l| l.starts_with(label))
            .and_then(|l| l.split_whitespace().nth(1))
            .map(str::to_string)
    };
    assert!(acc("noise1").is_some());
    assert_eq!(acc("clean"), acc("noise4:0"), "{text}");

    let o = tcnn(&[
        "noise-sweep",
        "--dataset",
        "mnist",
        "--seed",
        "3",
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        runs.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(runs.join("noise-sweep-mnist-seed3.csv")).unwrap();
    assert!(table.starts_with("arch,clean_accuracy,control,noise1,noise2,noise3,noise4\n"));
    assert_eq!(table.lines().count(), 5);
    for line in table.lines().skip(1) {
        assert_eq!(line.split(',').nth(2), Some("0.00"), "{line}");
    }
    assert!(stdout(&o).contains("Noise4"));
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synthetic_mnist(tmp.path());
    let cfg = tmp.path().join("exp.cfg");
    fs::write(
        &cfg,
        format!(
            "# small run\narch = minps-conv\nepochs = 5\nbatch = 10\nseed = 8\nwall_time = false\ndata_dir = {}\nout_dir = {}\n",
            data.display(),
            tmp.path().join("runs").display()
        ),
    )
    .unwrap();
    let o = tcnn(&["train", "--config", cfg.to_str().unwrap(), "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = fs::read_to_string(tmp.path().join("runs/mnist-minps-conv-seed8/manifest.txt")).unwrap();
    assert!(manifest.contains("epochs = 1\n") && manifest.contains("batch = 10\n"), "{manifest}");
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let o = tcnn(&["train", "--data-dir", missing.to_str().unwrap(), "--epochs", "1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("does not exist"), "{}", stderr(&o));

    let o = tcnn(&["train", "--arch", "resnet"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown architecture"));

    let o = tcnn(&["noise-sweep", "--out-dir", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("missing checkpoint"));

    let o = tcnn(&["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn filter_demo_writes_pgms() {
    let tmp = tempfile::tempdir().unwrap();
    let img = Tensor::from_fn([40, 30, 3], |i| ((i * 13) % 256) as f64 / 255.0).unwrap();
    let path = tmp.path().join("small.ppm");
    pnm::write_ppm(&img, &path).unwrap();
    let out = tmp.path().join("demo");
    let o = tcnn(&[
        "filter-demo",
        "--image",
        path.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 8);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 8);
    for name in ["small-minp-s-ch0.pgm", "small-maxp-s-ch3.pgm"] {
        let t = pnm::read_pgm(&out.join(name)).unwrap();
        assert_eq!(t.dims(), &[25, 15, 1]);
        let raw = fs::read(out.join(name)).unwrap();
        assert!(String::from_utf8_lossy(&raw[..80]).contains("seed=4"));
    }

    let o = tcnn(&["filter-demo", "--image", path.to_str().unwrap(), "--kernel", "41"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("smaller than"));
}

#[test]
fn opcount_and_selftest() {
    let o = tcnn(&["opcount", "--dataset", "cifar10"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(!text.contains("MISMATCH"));
    assert_eq!(text.matches("one forward pass").count(), 4);

    let o = tcnn(&["selftest", "--cases", "70", "--grad-cases", "2", "--seed", "9"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}
