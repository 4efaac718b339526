use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use condflow::checkpoint::{self, Checkpoint};
use condflow::config::{Precision, RunConfig};
use condflow::data::{write_container, PairedSample, TargetKind};
use condflow::dequant::Dequantizer;
use condflow::metrics::{pr_curve, psnr, ssim, thresholds, Pooling, PrCurve};
use condflow::rng::{stream_rng, Stream};
use condflow::train::{self, evaluate, to_batch, trace_csv, validation_rng, CnfObjective, EvalSummary};
use condflow::{FlowError, FlowModel};
use ndtensor::{Scalar, Tensor};

use crate::error::CliError;
use crate::imageio::write_image;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const CHECKPOINT: &str = "model.ckpt";
pub const LAST_GOOD: &str = "last_good.ckpt";

pub fn load_config(path: &Path, seed: Option<u64>, dtype: Option<Precision>, out: Option<PathBuf>) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {}", path.display(), e)))?;
    let mut cfg = RunConfig::from_toml_str(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e)))?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    if let Some(d) = dtype {
        cfg.run.dtype = d;
    }
    if let Some(o) = out {
        cfg.run.out = o;
    }
    Ok(cfg.resolved())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::config(format!("cannot write {}: {}", path.display(), e)))
}

fn validation_csv(rows: &[(usize, EvalSummary)]) -> String {
    let mut s = String::from("iteration,nll_nats,bpd\n");
    for (it, e) in rows {
        let _ = writeln!(s, "{},{:.17e},{:.17e}", it, e.nll_nats, e.bpd);
    }
    s
}

pub fn train(cfg: &RunConfig, inject_nan: bool) -> Result<(), CliError> {
    let out = &cfg.run.out;
    fs::create_dir_all(out).map_err(|e| CliError::config(format!("cannot create {}: {}", out.display(), e)))?;
    write(&out.join(RESOLVED_CONFIG), cfg.to_toml())?;
    match cfg.run.dtype {
        Precision::F32 => train_typed::<f32>(cfg, inject_nan),
        Precision::F64 => train_typed::<f64>(cfg, inject_nan),
    }
}

fn train_typed<T: Scalar>(cfg: &RunConfig, inject_nan: bool) -> Result<(), CliError> {
    let out = &cfg.run.out;
    let mc = cfg.model_config();
    let mut rng = stream_rng(cfg.run.seed, Stream::Init);
    let model = FlowModel::<T>::new(mc.clone(), &mut rng)?;
    let dequantizer = Dequantizer::build(cfg.dequant_spec(), &mc, &mut rng)?;
    let mut obj = CnfObjective { model, dequantizer };
    let (tr, val) = cfg.training_data();
    let mut tc = cfg.train_config();
    if inject_nan {
        tc.fault_at = Some(tc.iterations / 2);
    }
    eprintln!(
        "training {} parameters on {} items ({} validation), {} iterations, {}",
        obj.model.num_params() + obj.dequantizer.params().map_or(0, |p| p.num_trainable()),
        tr.len(),
        val.len(),
        tc.iterations,
        T::DTYPE.as_str()
    );
    let every = (tc.iterations / 10).max(1);
    let result = train::train(&mut obj, &tr, &val, cfg.conditional(), &tc, cfg.run.seed, |row| {
        if (row.iteration + 1) % every == 0 {
            eprintln!("iteration {:>6}  nll {:.4}  bpd {:.4}", row.iteration + 1, row.nll_nats, row.bpd);
        }
    });
    match result {
        Ok(report) => {
            write(&out.join("loss.csv"), trace_csv(&report.trace))?;
            write(&out.join("validation.csv"), validation_csv(&report.validation))?;
            checkpoint::save(&out.join(CHECKPOINT), &obj.model, &obj.dequantizer, tc.iterations as u64)?;
            if let Some((it, v)) = report.validation.last() {
                println!("validation after {} iterations: nll {:.6} nats, {:.6} bpd", it, v.nll_nats, v.bpd);
            }
            println!("wrote {}", out.join(CHECKPOINT).display());
            Ok(())
        }
        Err(abort) => {
            write(&out.join("loss.csv"), trace_csv(&abort.trace))?;
            checkpoint::save(&out.join(LAST_GOOD), &obj.model, &obj.dequantizer, abort.iteration as u64)?;
            eprintln!("wrote last good parameters to {}", out.join(LAST_GOOD).display());
            Err(CliError {
                code: if abort.error.is_numerical() {
                    crate::error::EXIT_NUMERICAL
                } else {
                    crate::error::EXIT_CONFIG
                },
                message: abort.to_string(),
            })
        }
    }
}

fn checkpoint_dtype(path: &Path) -> Result<String, CliError> {
    let mut f = fs::File::open(path).map_err(|e| CliError::config(format!("cannot open checkpoint {}: {}", path.display(), e)))?;
    Ok(checkpoint::read_header(&mut f)?.dtype)
}

/// Loads a checkpoint and checks it was trained for this configuration.
fn load_compatible<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<Checkpoint<T>, CliError> {
    let ck = checkpoint::load::<T>(path)?;
    let expected = cfg.model_config();
    if ck.model.config != expected {
        let c = &ck.model.config;
        return Err(CliError::config(format!(
            "checkpoint {} holds a model for [{}, {}, {}] targets (cond {:?}) that does not match the configuration ([{}, {}, {}], cond {:?})",
            path.display(),
            c.channels,
            c.height,
            c.width,
            c.cond,
            expected.channels,
            expected.height,
            expected.width,
            expected.cond
        )));
    }
    Ok(ck)
}

fn with_checkpoint(
    cfg: &RunConfig,
    path: Option<PathBuf>,
    f32_run: impl FnOnce(&Path) -> Result<(), CliError>,
    f64_run: impl FnOnce(&Path) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let path = path.unwrap_or_else(|| cfg.run.out.join(CHECKPOINT));
    fs::create_dir_all(&cfg.run.out)?;
    match checkpoint_dtype(&path)?.as_str() {
        "f32" => f32_run(&path),
        "f64" => f64_run(&path),
        other => Err(CliError::config(format!("checkpoint dtype `{}` is not supported", other))),
    }
}

pub fn eval(cfg: &RunConfig, path: Option<PathBuf>) -> Result<(), CliError> {
    with_checkpoint(cfg, path, |p| eval_typed::<f32>(cfg, p), |p| eval_typed::<f64>(cfg, p))
}

/// `n` copies of one item as a conditioning batch.
fn repeated<T: Scalar>(item: &PairedSample, n: usize, conditional: bool) -> Result<Option<Tensor<T>>, FlowError> {
    let refs = vec![item; n];
    Ok(to_batch::<T>(&refs, conditional)?.1)
}

fn plane(t: &Tensor<f64>) -> Result<Tensor<f64>, FlowError> {
    let s = t.shape();
    Ok(t.reshape([s[s.len() - 2], s[s.len() - 1]])?)
}

fn eval_typed<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<(), CliError> {
    let out = &cfg.run.out;
    let ck = load_compatible::<T>(cfg, path)?;
    let iteration = ck.iteration;
    let obj = CnfObjective {
        model: ck.model,
        dequantizer: ck.dequantizer,
    };
    let cond = cfg.conditional();
    let (_, val) = cfg.training_data();
    let test = cfg.test_data();
    let tc = cfg.train_config();
    let mut rows: Vec<(String, f64)> = vec![("checkpoint_iteration".into(), iteration as f64)];
    if !val.is_empty() {
        // Same randomness as the final validation pass of training.
        let mut rng = validation_rng(cfg.run.seed, (iteration as usize).saturating_sub(1));
        let v = evaluate(&obj, &val, cond, tc.eval_batch(), &mut rng)?;
        rows.push(("validation_nll_nats".into(), v.nll_nats));
        rows.push(("validation_bpd".into(), v.bpd));
    }
    let mut rng = stream_rng(cfg.run.seed, Stream::Eval);
    let t = evaluate(&obj, &test, cond, cfg.eval.batch_size, &mut rng)?;
    rows.push(("test_nll_nats".into(), t.nll_nats));
    rows.push(("test_bpd".into(), t.bpd));
    rows.push(("test_items".into(), t.items as f64));

    let mut rng = stream_rng(cfg.run.seed, Stream::Sampling);
    match cfg.data.target() {
        TargetKind::Integer { levels } => {
            let max_val = (levels - 1) as f64;
            let mut csv = String::from("image,metric,value\n");
            let (mut psnrs, mut ssims) = (Vec::new(), Vec::new());
            for (i, item) in test.iter().enumerate() {
                let x = repeated::<T>(item, 1, cond)?;
                let w = obj.model.sample(x.as_ref(), 1, 0.0, &mut rng)?;
                let pred = plane(&obj.dequantizer.quantize(&w).cast::<f64>())?;
                let gt = plane(&item.y)?;
                let p = psnr(&pred, &gt, max_val)?;
                let _ = writeln!(csv, "{},psnr,{}", i, p);
                psnrs.push(p);
                if gt.shape().iter().all(|&d| d >= 11) {
                    let s = ssim(&pred, &gt, max_val)?;
                    let _ = writeln!(csv, "{},ssim,{}", i, s);
                    ssims.push(s);
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            let _ = writeln!(csv, "mean,psnr,{}", mean(&psnrs));
            rows.push(("psnr_mean".into(), mean(&psnrs)));
            if !ssims.is_empty() {
                let _ = writeln!(csv, "mean,ssim,{}", mean(&ssims));
                rows.push(("ssim_mean".into(), mean(&ssims)));
            }
            write(&out.join("sr_metrics.csv"), csv)?;
        }
        TargetKind::Binary => {
            let n = cfg.eval.soft_samples;
            let mut softs = Vec::with_capacity(test.len());
            let mut gts = Vec::with_capacity(test.len());
            for item in &test {
                let x = repeated::<T>(item, n, cond)?;
                let w = obj.model.sample(x.as_ref(), n, 1.0, &mut rng)?;
                softs.push(plane(&mean_image(&obj.dequantizer.quantize(&w).cast::<f64>())?)?);
                gts.push(plane(&item.y)?);
            }
            let ts = thresholds(cfg.eval.pr_thresholds);
            let mut csv = String::from("pooling,threshold,precision,recall,f_score\n");
            for (name, pooling) in [("micro", Pooling::Micro), ("macro", Pooling::Macro)] {
                let curve = pr_curve(&softs, &gts, &ts, pooling)?;
                for p in &curve.points {
                    let _ = writeln!(csv, "{},{},{},{},{}", name, p.threshold, p.precision, p.recall, p.f_score());
                }
                push_best(&mut rows, name, &curve);
            }
            write(&out.join("pr_curve.csv"), csv)?;
        }
        TargetKind::Continuous => {}
    }

    let mut csv = String::from("metric,value\n");
    for (k, v) in &rows {
        let _ = writeln!(csv, "{},{:.17e}", k, v);
    }
    print!("{}", csv);
    write(&out.join("eval.csv"), csv)?;
    Ok(())
}

fn push_best(rows: &mut Vec<(String, f64)>, pooling: &str, curve: &PrCurve) {
    if let Some(best) = curve.best {
        rows.push((format!("f_score_best_{}", pooling), best.f_score()));
        rows.push((format!("threshold_best_{}", pooling), best.threshold));
    }
}

/// Mean over the leading axis of an `[N, C, H, W]` tensor: `[C, H, W]`.
fn mean_image(samples: &Tensor<f64>) -> Result<Tensor<f64>, FlowError> {
    let n = samples.shape()[0];
    let per = samples.numel() / n.max(1);
    let mut acc = vec![0.0; per];
    for chunk in samples.data().chunks(per) {
        for (a, v) in acc.iter_mut().zip(chunk) {
            *a += v / n as f64;
        }
    }
    Ok(Tensor::new(samples.shape()[1..].to_vec(), acc)?)
}

pub fn sample(cfg: &RunConfig, path: Option<PathBuf>) -> Result<(), CliError> {
    with_checkpoint(cfg, path, |p| sample_typed::<f32>(cfg, p), |p| sample_typed::<f64>(cfg, p))
}

fn tau_label(tau: f64) -> String {
    format!("{:.2}", tau)
}

fn sample_typed<T: Scalar>(cfg: &RunConfig, path: &Path) -> Result<(), CliError> {
    let ck = load_compatible::<T>(cfg, path)?;
    let dir = cfg.run.out.join("samples");
    fs::create_dir_all(&dir)?;
    let cond = cfg.conditional();
    let target = cfg.data.target();
    let image = cfg.data.y_shape()[1] > 1 || cfg.data.y_shape()[2] > 1;
    let test = cfg.test_data();
    let inputs = cfg.sample.inputs.min(test.len());
    let n = cfg.sample.n;
    let mut rng = stream_rng(cfg.run.seed, Stream::Sampling);
    let y_max: u16 = match target {
        TargetKind::Integer { levels } => (levels - 1) as u16,
        TargetKind::Binary => 1,
        TargetKind::Continuous => 255,
    };
    // Binary images are written 0/255 so they are visible.
    let display = |t: &Tensor<f64>| match target {
        TargetKind::Binary => (t.map(|v| v * 255.0), 255u16),
        _ => (t.clone(), y_max),
    };
    let mut drawn = Vec::new();
    let mut points = String::from("input,temperature,sample,y0,y1\n");
    for (i, item) in test.iter().take(inputs).enumerate() {
        if image {
            let (y, m) = display(&item.y);
            write_image(&dir.join(format!("input{}_y.pgm", i)), &y, m)?;
            if cond {
                let x_scale = match target {
                    TargetKind::Integer { .. } => 1.0,
                    _ => 255.0,
                };
                let m = if x_scale == 1.0 { y_max } else { 255 };
                write_image(&dir.join(format!("input{}_x.pgm", i)), &item.x.map(|v| v * x_scale), m)?;
            }
        }
        for &tau in &cfg.sample.temperatures {
            let x = repeated::<T>(item, n, cond)?;
            let w = ck.model.sample(x.as_ref(), n, tau, &mut rng)?;
            let y = ck.dequantizer.quantize(&w).cast::<f64>();
            for k in 0..n {
                let yk = y.item_at(k)?;
                let yk = yk.reshape(yk.shape()[1..].to_vec())?;
                if image {
                    let (d, m) = display(&yk);
                    write_image(&dir.join(format!("input{}_tau{}_s{}.pgm", i, tau_label(tau), k)), &d, m)?;
                } else {
                    let _ = writeln!(points, "{},{},{},{},{}", i, tau, k, yk.data()[0], yk.data()[1]);
                }
                drawn.push(PairedSample {
                    x: item.x.clone(),
                    y: yk,
                    seed: (i * 1_000_000 + k) as u64,
                    target,
                });
            }
            if image && target == TargetKind::Binary {
                let mean = mean_image(&y)?;
                write_image(
                    &dir.join(format!("input{}_tau{}_mean.pgm", i, tau_label(tau))),
                    &mean.map(|v| v * 255.0),
                    255,
                )?;
            }
        }
    }
    if !image {
        write(&dir.join("samples.csv"), points)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(dir.join("samples.cfd"))?);
    write_container(&mut f, "samples", cfg.run.seed, &drawn)?;
    println!(
        "wrote {} samples for {} inputs at temperatures {:?} to {}",
        drawn.len(),
        inputs,
        cfg.sample.temperatures,
        dir.display()
    );
    Ok(())
}
