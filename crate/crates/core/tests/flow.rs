use condflow::flow::oracle::{layer_logdet, layer_numerical_logdet, numerical_logdet};
use condflow::flow::{
    affine_couple, gaussian_log_prob, perturb_params, ActNorm, ActivationNorm, AffineCoupling, CondShape, Context,
    ContextAffine, FlowLayer, InstanceNormFlow, InvConv1x1, Mode, SplitPrior, Squeeze, Variant,
};
use condflow::rng::{randn, rng_from};
use condflow::{FlowError, FlowModel, ModelConfig, ParamStore};
use ndtensor::{Tape, Tensor};
use proptest::prelude::*;

const LN2: f64 = std::f64::consts::LN_2;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

fn round_trip(layer: &dyn FlowLayer<f64>, store: &ParamStore<f64>, y: &Tensor<f64>, feats: &[Tensor<f64>]) -> (f64, f64) {
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let ctx = Context::new(None, feats.iter().map(|f| tape.constant(f.clone())).collect(), Mode::Eval);
    let (z, ld) = layer.forward(&p, tape.constant(y.clone()), &ctx).unwrap();
    let (back, ld_inv) = layer.inverse(&p, z, &ctx).unwrap();
    let err = back.value().max_abs_diff(y).unwrap();
    let ld_sum = ld.value().zip_map(&ld_inv.value(), |a, b| a + b).unwrap();
    (err, ld_sum.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

#[test]
fn coupling_formula_hand_example() {
    let tape = Tape::<f64>::new();
    let y0 = tape.constant(t(&[1, 1, 1, 1], &[5.0]));
    let shift = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let log_s = tape.constant(t(&[1, 1, 1, 1], &[2f64.ln()]));
    let (z0, ld) = affine_couple(y0, shift, log_s).unwrap();
    assert!((z0.value().data()[0] - 2.0).abs() < 1e-12);
    assert!((ld.value().data()[0] + LN2).abs() < 1e-12);
}

#[test]
fn fresh_coupling_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let layer = AffineCoupling::new(&mut store, "c", [2, 1, 1], 0, 8, false, Variant::Affine, &mut rng_from(0)).unwrap();
    let y = t(&[1, 2, 1, 1], &[5.0, 3.0]);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (z, ld) = layer.forward(&p, tape.constant(y.clone()), &Context::unconditional(Mode::Eval)).unwrap();
    assert_eq!(*z.value(), y);
    assert_eq!(ld.value().data(), &[0.0]);
}

#[test]
fn odd_channel_coupling_is_a_config_error() {
    let mut store = ParamStore::<f64>::new();
    let err = AffineCoupling::new(&mut store, "c", [3, 2, 2], 0, 8, false, Variant::Affine, &mut rng_from(0)).unwrap_err();
    assert!(matches!(err, FlowError::Config(_)));
}

#[test]
fn volume_preserving_coupling_has_exactly_zero_logdet() {
    let mut store = ParamStore::<f64>::new();
    let layer = AffineCoupling::new(&mut store, "c", [4, 4, 4], 0, 8, true, Variant::VolumePreserving, &mut rng_from(1)).unwrap();
    perturb_params(&mut store, 0.5, &mut rng_from(2));
    let y = randn(&mut rng_from(3), &[3, 4, 4, 4]);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (z, ld) = layer.forward(&p, tape.constant(y.clone()), &Context::unconditional(Mode::Eval)).unwrap();
    assert!(ld.value().data().iter().all(|&v| v == 0.0));
    assert!(z.value().max_abs_diff(&y).unwrap() > 1e-3);
}

#[test]
fn invconv_closed_forms() {
    let mut store = ParamStore::<f64>::new();
    let ident = InvConv1x1::with_weight(&mut store, "id", Tensor::identity(3));
    let two = InvConv1x1::with_weight(&mut store, "two", t(&[1, 1], &[2.0]));
    let y = randn(&mut rng_from(4), &[2, 3, 2, 2]);
    assert_eq!(layer_logdet(&ident, &store, &y.item_at(0).unwrap().reshape([1, 3, 2, 2]).unwrap(), &[]).unwrap(), 0.0);
    let y1 = randn(&mut rng_from(5), &[1, 1, 2, 2]);
    let ld = layer_logdet(&two, &store, &y1, &[]).unwrap();
    assert!((ld - 4.0 * LN2).abs() < 1e-12, "{}", ld);
}

#[test]
fn singular_invconv_names_the_layer() {
    let mut store = ParamStore::<f64>::new();
    let layer = InvConv1x1::with_weight(&mut store, "level0.step0.invconv", t(&[2, 2], &[1.0, 2.0, 2.0, 4.0]));
    let tape = Tape::new();
    let p = store.bind(&tape);
    let err = layer
        .forward(&p, tape.constant(Tensor::zeros([1, 2, 1, 1])), &Context::unconditional(Mode::Eval))
        .unwrap_err();
    assert_eq!(err.layer(), Some("level0.step0.invconv"));
}

#[test]
fn squeeze_ordering_is_tl_tr_bl_br() {
    let store = ParamStore::<f64>::new();
    let sq = Squeeze::new("sq");
    let tape = Tape::new();
    let p = store.bind(&tape);
    let y = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let (z, ld) = sq.forward(&p, tape.constant(y), &Context::unconditional(Mode::Eval)).unwrap();
    assert_eq!(z.shape(), vec![1, 4, 1, 1]);
    assert_eq!(z.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(ld.value().data(), &[0.0]);
    let odd = sq.forward(&p, tape.constant(Tensor::zeros([1, 1, 3, 2])), &Context::unconditional(Mode::Eval));
    assert!(odd.is_err());
}

#[test]
fn actnorm_closed_form_and_zero_scale() {
    let mut store = ParamStore::<f64>::new();
    let an = ActNorm::new(&mut store, "an", 1);
    store.set(an.scale, t(&[1, 1, 1, 1], &[2.0])).unwrap();
    let y = randn(&mut rng_from(6), &[1, 1, 2, 2]);
    assert!((layer_logdet(&an, &store, &y, &[]).unwrap() - 4.0 * LN2).abs() < 1e-12);
    store.set(an.scale, t(&[1, 1, 1, 1], &[0.0])).unwrap();
    let err = layer_logdet(&an, &store, &y, &[]).unwrap_err();
    assert!(matches!(err, FlowError::Singular { .. }), "{}", err);
}

#[test]
fn actnorm_data_init_standardises_first_batch() {
    let mut store = ParamStore::<f64>::new();
    let an = ActNorm::new(&mut store, "an", 3);
    let y = randn(&mut rng_from(7), &[16, 3, 4, 4]).map(|v| 3.0 * v - 2.0);
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let ctx = Context::unconditional(Mode::Init);
    an.forward(&p, tape.constant(y.clone()), &ctx).unwrap();
    let records = ctx.take_records();
    drop(p);
    for (id, v) in records {
        store.set(id, v).unwrap();
    }
    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let (z, _) = an.forward(&p, tape.constant(y), &Context::unconditional(Mode::Eval)).unwrap();
    let z = z.value();
    for c in 0..3 {
        let vals: Vec<f64> = (0..16).flat_map(|n| z.data()[(n * 3 + c) * 16..(n * 3 + c + 1) * 16].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-5 && (var - 1.0).abs() < 1e-4, "channel {}: {} {}", c, m, var);
    }
}

#[test]
fn split_prior_closed_forms() {
    let mut store = ParamStore::<f64>::new();
    let split = SplitPrior::new(&mut store, "split", [4, 1, 1], 0, &mut rng_from(0)).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let ctx = Context::unconditional(Mode::Eval);
    let z = t(&[1, 4, 1, 1], &[0.3, -0.2, 0.0, 0.0]);
    let (_, _, lp) = split.forward(&p, tape.constant(z), &ctx).unwrap();
    assert!((lp.value().data()[0] + 2.0 * HALF_LN_2PI).abs() < 1e-12);
    let z = t(&[1, 4, 1, 1], &[0.3, -0.2, 1.0, 1.0]);
    let (z0, _, lp) = split.forward(&p, tape.constant(z), &ctx).unwrap();
    assert!((lp.value().data()[0] - (-(2.0 * std::f64::consts::PI).ln() - 1.0)).abs() < 1e-12);
    assert!((lp.value().data()[0] + 2.8379).abs() < 1e-4);
    let (full, z1) = split.sample(&p, z0, &ctx, 0.0, &mut rng_from(1)).unwrap();
    assert_eq!(z1.value().data(), &[0.0, 0.0]);
    assert_eq!(full.shape(), vec![1, 4, 1, 1]);
}

#[test]
fn gaussian_log_prob_of_scaled_variable() {
    // z = 2y with y = 0 under a standard normal prior: log p = -½ln 2π + ln 2.
    let mut store = ParamStore::<f64>::new();
    let an = ActNorm::new(&mut store, "an", 1);
    store.set(an.scale, t(&[1, 1, 1, 1], &[2.0])).unwrap();
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (z, ld) = an.forward(&p, tape.constant(Tensor::zeros([1, 1, 1, 1])), &Context::unconditional(Mode::Eval)).unwrap();
    let zero = tape.constant(Tensor::zeros([1, 1, 1, 1]));
    let lp = gaussian_log_prob(z, zero, zero).unwrap().add(&ld).unwrap();
    assert!((lp.value().data()[0] - (-HALF_LN_2PI + LN2)).abs() < 1e-12);
}

fn trivial_config() -> ModelConfig {
    ModelConfig {
        channels: 1,
        height: 1,
        width: 1,
        levels: 1,
        steps_per_level: 0,
        squeeze: false,
        split: false,
        ..ModelConfig::default()
    }
}

#[test]
fn trivial_model_is_standard_normal() {
    let model = FlowModel::<f64>::new(trivial_config(), &mut rng_from(0)).unwrap();
    let lp = model.log_prob(&Tensor::zeros([1, 1, 1, 1]), None).unwrap();
    assert!((lp.data()[0] + HALF_LN_2PI).abs() < 1e-12);
}

fn image_config(variant: Variant, cond: bool) -> ModelConfig {
    ModelConfig {
        channels: 1,
        height: 8,
        width: 8,
        cond: cond.then_some(CondShape {
            channels: 1,
            height: 4,
            width: 4,
        }),
        levels: 2,
        steps_per_level: 2,
        hidden_channels: 8,
        cond_features: 4,
        variant,
        ..ModelConfig::default()
    }
}

#[test]
fn temperature_zero_sampling_is_deterministic_and_decodes_prior_means() {
    let mut model = FlowModel::<f64>::new(image_config(Variant::Affine, true), &mut rng_from(1)).unwrap();
    perturb_params(&mut model.params, 0.05, &mut rng_from(2));
    let x = randn(&mut rng_from(3), &[2, 1, 4, 4]);
    let a = model.sample(Some(&x), 2, 0.0, &mut rng_from(10)).unwrap();
    let b = model.sample(Some(&x), 2, 0.0, &mut rng_from(11)).unwrap();
    assert_eq!(a, b);
    let c = model.sample(Some(&x), 2, 1.0, &mut rng_from(11)).unwrap();
    assert!(a.max_abs_diff(&c).unwrap() > 1e-3);
}

#[test]
fn samples_have_finite_likelihood() {
    let mut model = FlowModel::<f64>::new(image_config(Variant::Affine, true), &mut rng_from(4)).unwrap();
    perturb_params(&mut model.params, 0.05, &mut rng_from(5));
    let mut rng = rng_from(6);
    for i in 0..100 {
        let x = randn(&mut rng_from(100 + i), &[1, 1, 4, 4]);
        let y = model.sample(Some(&x), 1, 1.0, &mut rng).unwrap();
        let lp = model.log_prob(&y, Some(&x)).unwrap();
        assert!(lp.is_finite(), "draw {}", i);
    }
}

#[test]
fn model_round_trip_and_logdet_additivity() {
    for (variant, dtype_tol) in [(Variant::Affine, 1e-9), (Variant::VolumePreserving, 1e-9)] {
        let mut model = FlowModel::<f64>::new(image_config(variant, true), &mut rng_from(7)).unwrap();
        perturb_params(&mut model.params, 0.1, &mut rng_from(8));
        let y = randn(&mut rng_from(9), &[3, 1, 8, 8]);
        let x = randn(&mut rng_from(10), &[3, 1, 4, 4]);
        let (latents, logdet, _) = model.encode(&y, Some(&x)).unwrap();
        let back = model.decode(&latents, Some(&x)).unwrap();
        assert!(back.max_abs_diff(&y).unwrap() < dtype_tol);

        // Sum of per-layer log-dets in forward order equals the model's.
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let ctx = model.context(&p, Some(tape.constant(x.clone())), Mode::Eval).unwrap();
        let mut h = tape.constant(y.clone());
        let mut acc = tape.constant(Tensor::zeros([3]));
        for step in model.steps() {
            match step {
                condflow::flow::Step::Layer(l) => {
                    let (z, ld) = l.forward(&p, h, &ctx).unwrap();
                    acc = acc.add(&ld).unwrap();
                    h = z;
                }
                condflow::flow::Step::Split(s) => h = s.forward(&p, h, &ctx).unwrap().0,
            }
        }
        assert_eq!(acc.value().data(), logdet.data());
    }
}

#[test]
fn conditioning_shape_mismatch_is_config_error() {
    let model = FlowModel::<f64>::new(image_config(Variant::Affine, true), &mut rng_from(0)).unwrap();
    let y = Tensor::zeros([2, 1, 8, 8]);
    assert!(matches!(model.log_prob(&y, Some(&Tensor::zeros([2, 1, 8, 8]))), Err(FlowError::Config(_))));
    assert!(matches!(model.log_prob(&y, None), Err(FlowError::Config(_))));
    assert!(matches!(model.log_prob(&Tensor::zeros([2, 1, 4, 4]), Some(&Tensor::zeros([2, 1, 4, 4]))), Err(FlowError::Config(_))));
}

#[test]
fn nan_input_names_first_layer() {
    let model = FlowModel::<f64>::new(image_config(Variant::Affine, false), &mut rng_from(0)).unwrap();
    let mut y = Tensor::zeros([1, 1, 8, 8]);
    y.data_mut()[5] = f64::NAN;
    let err = model.log_prob(&y, None).unwrap_err();
    assert!(err.layer().is_some(), "{}", err);
}

#[test]
fn numerical_logdet_simple_maps() {
    let y = randn(&mut rng_from(1), &[3]);
    assert!(numerical_logdet(|v| Ok(v.clone()), &y, 1e-5).unwrap().abs() < 1e-10);
    let ld = numerical_logdet(|v| Ok(v.map(|a| 2.0 * a)), &y, 1e-5).unwrap();
    assert!((ld - 3.0 * LN2).abs() < 1e-9);
    let sing = numerical_logdet(|v| Ok(v.map(|_| 1.0)), &y, 1e-5);
    assert!(sing.is_err());
}

#[test]
fn coupling_and_context_affine_match_numerical_logdet() {
    for seed in 0..5u64 {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_from(seed);
        let coupling = AffineCoupling::new(&mut store, "c", [2, 2, 2], 3, 6, false, Variant::Affine, &mut rng).unwrap();
        let ca = ContextAffine::new(&mut store, "ca", [2, 2, 2], 3, 6, &mut rng).unwrap();
        perturb_params(&mut store, 0.4, &mut rng);
        let y = randn(&mut rng, &[1, 2, 2, 2]);
        let h = randn(&mut rng, &[1, 3, 2, 2]);
        for layer in [&coupling as &dyn FlowLayer<f64>, &ca] {
            let a = layer_logdet(layer, &store, &y, std::slice::from_ref(&h)).unwrap();
            let n = layer_numerical_logdet(layer, &store, &y, std::slice::from_ref(&h), 1e-5).unwrap();
            assert!((a - n).abs() / a.abs().max(1e-12) < 1e-5, "{} {} {}", layer.name(), a, n);
        }
    }
}

#[test]
fn instance_norm_flow_eval_round_trip_and_train_records() {
    let mut store = ParamStore::<f64>::new();
    let layer = InstanceNormFlow::new(&mut store, "in", 2);
    store.set(layer.running_std, t(&[1, 2, 1, 1], &[0.5, 2.0])).unwrap();
    let y = randn(&mut rng_from(3), &[2, 2, 3, 3]);
    let (err, ld) = round_trip(&layer, &store, &y, &[]);
    assert!(err < 1e-12 && ld < 1e-12);

    let tape = Tape::new();
    let p = store.bind_frozen(&tape);
    let ctx = Context::unconditional(Mode::Train);
    let (z, _) = layer.forward(&p, tape.constant(y), &ctx).unwrap();
    assert!(z.value().data()[..9].iter().sum::<f64>().abs() < 1e-10);
    assert_eq!(ctx.take_records().len(), 2);
}

#[test]
fn instance_norm_needs_more_than_one_pixel() {
    let cfg = ModelConfig {
        channels: 2,
        activation_norm: ActivationNorm::InstanceNorm,
        ..trivial_config()
    };
    let cfg = ModelConfig { steps_per_level: 1, ..cfg };
    assert!(matches!(FlowModel::<f64>::new(cfg, &mut rng_from(0)), Err(FlowError::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dimension_is_conserved(levels in 1usize..4, steps in 0usize..3, c in 1usize..3, side_pow in 0usize..2, split in any::<bool>()) {
        let side = 1usize << (levels + side_pow);
        let cfg = ModelConfig {
            channels: c,
            height: side,
            width: side,
            levels,
            steps_per_level: steps,
            split,
            hidden_channels: 4,
            ..ModelConfig::default()
        };
        let model = FlowModel::<f64>::new(cfg.clone(), &mut rng_from(0)).unwrap();
        let y = randn(&mut rng_from(1), &[1, cfg.channels, side, side]);
        let (latents, _, _) = model.encode(&y, None).unwrap();
        let total: usize = latents.iter().map(|z| z.numel()).sum();
        prop_assert_eq!(total, cfg.dim());
        let shapes: usize = model.latent_shapes().iter().map(|s| s[0] * s[1] * s[2]).sum();
        prop_assert_eq!(shapes, cfg.dim());
    }
}
