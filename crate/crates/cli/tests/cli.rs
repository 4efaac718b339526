use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use condflow_cli::imageio::{read_image, write_image};
use ndtensor::Tensor;

fn condflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_condflow")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

/// Writes `body` with `out` pointing into `dir`; returns the config path.
fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(format!("{}.toml", name));
    let out = dir.join(name);
    fs::write(&path, format!("[run]\nout = \"{}\"\n{}", out.display(), body)).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn metric(path: &Path, name: &str) -> f64 {
    csv_rows(path)
        .into_iter()
        .find(|r| r[0] == name)
        .unwrap_or_else(|| panic!("no {} in {}", name, path.display()))[1]
        .parse()
        .unwrap()
}

const TWO_D: &str = "[data]\nkind = \"two_d\"\n[model]\nsteps_per_level = 4\n[train]\niterations = 500\nbatch_size = 64\nsamples = 1000\neval_every = 250\n[eval]\ntest_samples = 200\n[sample]\nn = 2\n";

const VESSELS: &str = "[data]\nkind = \"toy_vessels\"\nsize = 16\n[model]\nhidden_channels = 8\ncond_features = 4\n[train]\niterations = 30\nbatch_size = 4\nsamples = 40\ndequant_hidden = 4\ndequant_features = 4\n[eval]\ntest_samples = 6\nsoft_samples = 4\npr_thresholds = 21\n[sample]\nn = 3\ninputs = 1\n";

#[test]
fn missing_required_field_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "bad", "[data]\nkind = \"two_d\"\n[train]\nbatch_size = 8\n");
    let o = condflow(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("iterations"), "{}", text(&o.stderr));

    let o = condflow(&["train", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn two_d_train_eval_sample_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "a", TWO_D);
    let c = cfg.to_str().unwrap();
    let start = Instant::now();
    let o = condflow(&["train", "--config", c, "--dtype", "f64", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(start.elapsed().as_secs() < 60);
    let out = dir.path().join("a");
    for f in ["loss.csv", "validation.csv", "model.ckpt", "config.resolved.toml"] {
        assert!(out.join(f).exists(), "{}", f);
    }
    assert_eq!(csv_rows(&out.join("loss.csv")).len(), 500);

    // The resolved snapshot reproduces the run byte for byte.
    let snapshot = out.join("config.resolved.toml");
    let again = dir.path().join("b");
    let o = condflow(&["train", "--config", snapshot.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert_eq!(fs::read(out.join("loss.csv")).unwrap(), fs::read(again.join("loss.csv")).unwrap());
    assert_eq!(fs::read(out.join("model.ckpt")).unwrap(), fs::read(again.join("model.ckpt")).unwrap());

    let o = condflow(&["eval", "--config", snapshot.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let final_val: f64 = csv_rows(&out.join("validation.csv")).last().unwrap()[1].parse().unwrap();
    let reloaded = metric(&out.join("eval.csv"), "validation_nll_nats");
    assert!((final_val - reloaded).abs() < 1e-6, "{} vs {}", final_val, reloaded);
    assert!(metric(&out.join("eval.csv"), "test_bpd").is_finite());

    let o = condflow(&["sample", "--config", snapshot.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let rows = csv_rows(&out.join("samples").join("samples.csv"));
    assert_eq!(rows.len(), 2 * 3 * 2);
    for input in ["0", "1"] {
        let at = |tau: &str| -> Vec<&Vec<String>> { rows.iter().filter(|r| r[0] == input && r[1] == tau).collect() };
        let cold = at("0");
        assert_eq!(cold.len(), 2);
        assert_eq!(cold[0][3..], cold[1][3..]);
        assert_eq!(at("0.5").len(), 2);
        assert_eq!(at("1").len(), 2);
    }
}

#[test]
fn vessel_eval_writes_monotone_pr_curve_and_mean_images() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "v", VESSELS);
    let c = cfg.to_str().unwrap();
    for cmd in ["train", "eval", "sample"] {
        let o = condflow(&[cmd, "--config", c]);
        assert_eq!(code(&o), 0, "{}: {}", cmd, text(&o.stderr));
    }
    let out = dir.path().join("v");
    let rows = csv_rows(&out.join("pr_curve.csv"));
    for pooling in ["micro", "macro"] {
        let ts: Vec<f64> = rows.iter().filter(|r| r[0] == pooling).map(|r| r[1].parse().unwrap()).collect();
        assert_eq!(ts.len(), 21);
        assert!(ts.windows(2).all(|w| w[0] < w[1]));
    }
    let f = metric(&out.join("eval.csv"), "f_score_best_micro");
    assert!((0.0..=1.0).contains(&f));

    let samples = out.join("samples");
    for tau in ["0.00", "0.50", "1.00"] {
        for k in 0..3 {
            let (img, max) = read_image(&samples.join(format!("input0_tau{}_s{}.pgm", tau, k))).unwrap();
            assert_eq!((img.shape(), max), (&[1usize, 16, 16][..], 255));
            assert!(img.data().iter().all(|&v| v == 0.0 || v == 255.0));
        }
        let (mean, _) = read_image(&samples.join(format!("input0_tau{}_mean.pgm", tau))).unwrap();
        assert!(mean.data().iter().all(|&v| (0.0..=255.0).contains(&v)));
    }
    assert!(samples.join("samples.cfd").exists());
}

#[test]
fn sr_eval_reports_each_image_and_the_mean() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[data]\nkind = \"toy_sr\"\nhr_size = 16\n[model]\nhidden_channels = 8\ncond_features = 4\n[train]\niterations = 20\nbatch_size = 4\nsamples = 20\n[eval]\ntest_samples = 3\n";
    let cfg = config(dir.path(), "sr", body);
    for cmd in ["train", "eval"] {
        let o = condflow(&[cmd, "--config", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}: {}", cmd, text(&o.stderr));
    }
    let rows = csv_rows(&dir.path().join("sr").join("sr_metrics.csv"));
    for image in ["0", "1", "2", "mean"] {
        for m in ["psnr", "ssim"] {
            assert_eq!(rows.iter().filter(|r| r[0] == image && r[1] == m).count(), 1, "{} {}", image, m);
        }
    }
}

#[test]
fn checkpoint_for_another_dataset_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "v", VESSELS);
    let o = condflow(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let other = config(dir.path(), "w", &VESSELS.replace("size = 16", "size = 32"));
    let ckpt = dir.path().join("v").join("model.ckpt");
    let o = condflow(&["eval", "--config", other.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("does not match"));
}

#[test]
fn nan_fault_aborts_with_exit_3_and_keeps_last_good_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "n", VESSELS);
    let o = condflow(&["train", "--config", cfg.to_str().unwrap(), "--inject-fault", "nan"]);
    assert_eq!(code(&o), 3, "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("coupling"), "{}", text(&o.stderr));
    let out = dir.path().join("n");
    assert_eq!(csv_rows(&out.join("loss.csv")).len(), 15);
    let ck = condflow::checkpoint::load::<f32>(&out.join("last_good.ckpt")).unwrap();
    assert_eq!(ck.iteration, 15);
    assert!(ck.model.params.params().iter().all(|p| p.value.is_finite()));
}

#[test]
fn check_scopes_and_fault_injection() {
    let o = condflow(&["check", "--scope", "normalization"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let lines: Vec<String> = text(&o.stdout).lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).map(str::to_string).collect();
    assert_eq!(lines.len(), 1);
    assert!(lines[0].contains("normalization"));

    let o = condflow(&["check", "--scope", "gradients", "--inject-fault", "wrong-gradient"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o.stderr).contains("grad_check"), "{}", text(&o.stderr));

    let dir = tempfile::tempdir().unwrap();
    let o = condflow(&["check", "--scope", "all", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}{}", text(&o.stdout), text(&o.stderr));
    let rows = csv_rows(&dir.path().join("check.csv"));
    assert!(rows.len() >= 12 && rows.iter().all(|r| r[1] == "true"));

    let o = condflow(&["check", "--scope", "everything"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn images_round_trip_in_both_depths() {
    let dir = tempfile::tempdir().unwrap();
    let gray = Tensor::from_fn([1, 3, 5], |i| (i * 17) as f64);
    write_image(&dir.path().join("g.pgm"), &gray, 255).unwrap();
    assert_eq!(read_image(&dir.path().join("g.pgm")).unwrap(), (gray, 255));

    let deep = Tensor::from_fn([3, 2, 2], |i| (i * 4000) as f64);
    write_image(&dir.path().join("d.ppm"), &deep, 65535).unwrap();
    assert_eq!(read_image(&dir.path().join("d.ppm")).unwrap(), (deep, 65535));
    let raw = fs::read(dir.path().join("d.ppm")).unwrap();
    assert!(raw.starts_with(b"P6\n2 2\n65535\n"));

    let clipped = Tensor::new([2, 2], vec![-3.0, 0.4, 0.6, 300.0]).unwrap();
    write_image(&dir.path().join("c.pgm"), &clipped, 255).unwrap();
    assert_eq!(read_image(&dir.path().join("c.pgm")).unwrap().0.data(), &[0.0, 0.0, 1.0, 255.0]);
    assert!(write_image(&dir.path().join("x.pgm"), &Tensor::zeros([2, 2, 2]), 255).is_err());
}
