use condflow::dequant::{
    requantize_binary, requantize_integer, uniform_dequantize, BinaryDequantConfig, BinaryDequantizer, Dequantizer,
};
use condflow::flow::{perturb_params, CondShape, Mode};
use condflow::rng::{randn, rng_from};
use condflow::{FlowError, FlowModel, ModelConfig};
use ndtensor::{Tape, Tensor};
use rand::Rng;

const COND1: Option<CondShape> = Some(CondShape {
    channels: 1,
    height: 1,
    width: 1,
});

fn scalar_dequantizer(seed: u64, perturb: f64) -> BinaryDequantizer<f64> {
    let mut dq = BinaryDequantizer::new(BinaryDequantConfig::default(), [1, 1, 1], COND1, &mut rng_from(seed)).unwrap();
    perturb_params(&mut dq.params, perturb, &mut rng_from(seed + 1000));
    dq
}

/// `∫ f` by the trapezoid rule on `n` intervals of `[a, b]`.
fn trapezoid(f: impl Fn(&[f64]) -> Vec<f64>, a: f64, b: f64, n: usize) -> f64 {
    let xs: Vec<f64> = (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect();
    let ys = f(&xs);
    let h = (b - a) / n as f64;
    h * (ys.iter().sum::<f64>() - 0.5 * (ys[0] + ys[n]))
}

fn column(v: &[f64]) -> Tensor<f64> {
    Tensor::new([v.len(), 1, 1, 1], v.to_vec()).unwrap()
}

#[test]
fn uniform_lift_support_and_mean() {
    let mut rng = rng_from(0);
    let y = Tensor::full([4, 1, 2, 2], 5.0);
    let s = uniform_dequantize(&y, 32, &mut rng).unwrap();
    assert!(s.v.data().iter().all(|&v| (5.0..6.0).contains(&v)));
    assert_eq!(requantize_integer(&s.v), y);
    assert!(s.logq.data().iter().all(|&l| l == 0.0));

    let zeros = Tensor::<f64>::zeros([100_000]);
    let s = uniform_dequantize(&zeros, 2, &mut rng).unwrap();
    assert!((s.v.mean() - 0.5).abs() < 0.01);

    let bad = Tensor::<f64>::full([1], 32.0);
    assert!(matches!(uniform_dequantize(&bad, 32, &mut rng), Err(FlowError::Domain(_))));
    let frac = Tensor::<f64>::full([1], 1.5);
    assert!(matches!(uniform_dequantize(&frac, 32, &mut rng), Err(FlowError::Domain(_))));
}

#[test]
fn binary_lift_signs_and_domain() {
    let dq = scalar_dequantizer(1, 0.05);
    let y = column(&[1.0, 0.0, 1.0, 0.0]);
    let x = column(&[0.2, -0.4, 1.0, 0.0]);
    let s = dq.dequantize(&y, Some(&x), &mut rng_from(2)).unwrap();
    assert_eq!(requantize_binary(&s.v), y);
    assert!(s.logq.is_finite());
    let bad = column(&[0.5]);
    assert!(matches!(dq.dequantize(&bad, Some(&column(&[0.0])), &mut rng_from(3)), Err(FlowError::Domain(_))));
}

#[test]
fn sampled_logq_matches_density_evaluation() {
    for seed in 0..5 {
        let dq = scalar_dequantizer(seed, 0.05);
        let y = column(&[1.0, 0.0, 1.0]);
        let x = column(&[0.5, -1.0, 2.0]);
        let s = dq.dequantize(&y, Some(&x), &mut rng_from(seed + 7)).unwrap();
        let lq = dq.log_q(&s.v, Some(&x)).unwrap();
        assert!(lq.max_abs_diff(&s.logq).unwrap() < 1e-8, "{:?} vs {:?}", lq, s.logq);
    }
}

#[test]
fn image_dequantizer_support_and_consistency() {
    let cond = Some(CondShape {
        channels: 1,
        height: 8,
        width: 8,
    });
    let mut dq = BinaryDequantizer::<f64>::new(BinaryDequantConfig::default(), [1, 8, 8], cond, &mut rng_from(4)).unwrap();
    perturb_params(&mut dq.params, 0.01, &mut rng_from(5));
    let mut rng = rng_from(6);
    let y = Tensor::from_fn([3, 1, 8, 8], |_| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
    let x = randn(&mut rng, &[3, 1, 8, 8]);
    let s = dq.dequantize(&y, Some(&x), &mut rng).unwrap();
    assert_eq!(requantize_binary(&s.v), y);
    let lq = dq.log_q(&s.v, Some(&x)).unwrap();
    assert!(lq.max_abs_diff(&s.logq).unwrap() < 1e-7, "{:?} vs {:?}", lq, s.logq);
}

#[test]
fn logq_integrates_to_one_on_each_half_line() {
    for seed in 0..5 {
        let dq = scalar_dequantizer(10 + seed, 0.05);
        for (label, a, b) in [(1.0, 0.5, 8.5), (0.0, -7.5, 0.5)] {
            let xv = 0.3 * seed as f64 - 0.5;
            let mass = trapezoid(
                |vs| {
                    let v = column(vs);
                    let x = column(&vec![xv; vs.len()]);
                    dq.log_q(&v, Some(&x)).unwrap().data().iter().map(|l| l.exp()).collect()
                },
                a,
                b,
                40_000,
            );
            assert!((mass - 1.0).abs() < 1e-3, "seed {} label {}: {}", seed, label, mass);
        }
    }
}

#[test]
fn histogram_of_lifts_matches_density() {
    let dq = scalar_dequantizer(20, 0.05);
    let n = 1_000_000;
    let s = dq
        .dequantize(&column(&vec![1.0; n]), Some(&column(&vec![0.4; n])), &mut rng_from(21))
        .unwrap();
    let (lo, hi, bins) = (0.5, 6.5, 120);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in s.v.data() {
        let b = ((v - lo) / width).floor();
        if b >= 0.0 && (b as usize) < bins {
            counts[b as usize] += 1;
        }
    }
    let centres: Vec<f64> = (0..bins).map(|i| lo + (i as f64 + 0.5) * width).collect();
    let dens = dq.log_q(&column(&centres), Some(&column(&vec![0.4; bins]))).unwrap();
    let worst = counts
        .iter()
        .zip(dens.data())
        .map(|(&c, l)| (c as f64 / (n as f64 * width) - l.exp()).abs())
        .fold(0.0, f64::max);
    assert!(worst < 2e-2, "max deviation {}", worst);
}

fn scalar_model(seed: u64) -> FlowModel<f64> {
    let cfg = ModelConfig {
        channels: 1,
        height: 1,
        width: 1,
        cond: COND1,
        levels: 1,
        steps_per_level: 0,
        squeeze: false,
        split: false,
        cond_features: 4,
        ..ModelConfig::default()
    };
    let mut m = FlowModel::new(cfg, &mut rng_from(seed)).unwrap();
    perturb_params(&mut m.params, 0.5, &mut rng_from(seed + 500));
    m
}

#[test]
fn expected_elbo_is_below_exact_log_likelihood() {
    for seed in 0..5 {
        let model = scalar_model(seed);
        let dq = scalar_dequantizer(seed + 40, 0.05);
        let xv = 0.5 * seed as f64 - 1.0;
        for (a, b) in [(0.5, 8.5), (-7.5, 0.5)] {
            let xs = |k: usize| column(&vec![xv; k]);
            // log p(v | x), model space is w = v - 0.5.
            let log_p = |vs: &[f64]| -> Vec<f64> {
                let w: Vec<f64> = vs.iter().map(|v| v - 0.5).collect();
                model.log_prob(&column(&w), Some(&xs(vs.len()))).unwrap().data().to_vec()
            };
            let exact = trapezoid(|vs| log_p(vs).iter().map(|l| l.exp()).collect(), a, b, 40_000).ln();
            let expected_elbo = trapezoid(
                |vs| {
                    let lq = dq.log_q(&column(vs), Some(&xs(vs.len()))).unwrap();
                    lq.data().iter().zip(log_p(vs)).map(|(q, p)| q.exp() * (p - q)).collect()
                },
                a,
                b,
                40_000,
            );
            assert!(expected_elbo <= exact + 1e-3, "seed {}: {} > {}", seed, expected_elbo, exact);
        }
    }
}

#[test]
fn uniform_elbo_is_log_density_of_lift() {
    let cfg = ModelConfig {
        channels: 1,
        height: 4,
        width: 4,
        levels: 1,
        steps_per_level: 1,
        hidden_channels: 4,
        ..ModelConfig::default()
    };
    let model = FlowModel::<f64>::new(cfg, &mut rng_from(0)).unwrap();
    let dq = Dequantizer::<f64>::Uniform { levels: 4 };
    let y = Tensor::from_fn([2, 1, 4, 4], |i| (i % 4) as f64);
    let elbo = dq.elbo(&model, &y, None, &mut rng_from(1)).unwrap();
    let lift = uniform_dequantize(&y, 4, &mut rng_from(1)).unwrap();
    let direct = model.log_prob(&dq.to_model_space(&lift.v), None).unwrap();
    let diff = elbo.zip_map(&direct, |a, b| a - b).unwrap();
    for d in diff.data() {
        assert!((d + 16.0 * 4f64.ln()).abs() < 1e-9);
    }
    assert_eq!(dq.quantize(&dq.to_model_space(&lift.v)), y);
}

#[test]
fn averaging_elbo_samples_reduces_variance() {
    let model = scalar_model(3);
    let dq = Dequantizer::Binary(Box::new(scalar_dequantizer(4, 0.05)));
    let reps = 400;
    let k = 64;
    let y = column(&vec![1.0; reps * k]);
    let x = column(&vec![0.2; reps * k]);
    let e = dq.elbo(&model, &y, Some(&x), &mut rng_from(5)).unwrap();
    let singles: Vec<f64> = e.data()[..reps].to_vec();
    let means: Vec<f64> = e.data().chunks(k).map(|c| c.iter().sum::<f64>() / k as f64).collect();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let ratio = var(&means) / var(&singles);
    assert!(ratio < 0.05, "variance ratio {}", ratio);
}

#[test]
fn elbo_on_tape_has_gradients_for_both_stores() {
    let cfg = ModelConfig {
        channels: 1,
        height: 4,
        width: 4,
        cond: Some(CondShape {
            channels: 1,
            height: 4,
            width: 4,
        }),
        levels: 1,
        steps_per_level: 0,
        hidden_channels: 4,
        cond_features: 4,
        ..ModelConfig::default()
    };
    let model = FlowModel::<f64>::new(cfg, &mut rng_from(0)).unwrap();
    let bd = BinaryDequantizer::new(BinaryDequantConfig::default(), [1, 4, 4], model.config.cond, &mut rng_from(1)).unwrap();
    let dq = Dequantizer::Binary(Box::new(bd));
    let tape = Tape::new();
    let pm = model.params.bind(&tape);
    let pd = dq.params().unwrap().bind(&tape);
    let y = Tensor::from_fn([2, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
    let x = tape.constant(randn(&mut rng_from(2), &[2, 1, 4, 4]));
    let elbo = dq.elbo_with(&model, &pm, Some(&pd), &y, Some(x), Mode::Train, &mut rng_from(3)).unwrap();
    let g = tape.backward(elbo.mean().unwrap()).unwrap();
    let nonzero = |b: &condflow::Bound<f64>| {
        b.gradients(&g).iter().flatten().any(|t| t.data().iter().any(|v| *v != 0.0))
    };
    assert!(nonzero(&pm));
    assert!(nonzero(&pd));
}
