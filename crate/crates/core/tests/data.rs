use condflow::data::{
    augment, augment_with, blob_entropy, box_downsample, gen_2d_conditional, gen_toy_sr, gen_toy_vessels,
    read_container, write_container, AugmentParams, DataSpec, PairedSample, BLOB_MEAN,
};
use ndtensor::Tensor;
use proptest::prelude::*;
use std::f64::consts::PI;

#[test]
fn toy_sr_x_is_exact_downsample_of_y() {
    for s in gen_toy_sr(3, 50, 16, 2, 5) {
        assert_eq!(s.x.shape(), &[1, 8, 8]);
        assert_eq!(s.x, box_downsample(&s.y, 2).unwrap());
        assert!(s.y.data().iter().all(|v| v.fract() == 0.0 && (0.0..32.0).contains(v)));
    }
}

#[test]
fn constant_image_downsamples_to_constant() {
    let y = Tensor::full([1, 8, 8], 7.0);
    let x = box_downsample(&y, 4).unwrap();
    assert!(x.data().iter().all(|&v| v == 7.0));
    assert!(box_downsample(&y, 3).is_err());
}

#[test]
fn toy_sr_covers_all_levels() {
    let mut seen = [false; 32];
    for s in gen_toy_sr(0, 10_000, 16, 2, 5) {
        for v in s.y.data() {
            seen[*v as usize] = true;
        }
    }
    assert!(seen.iter().all(|&b| b));
}

#[test]
fn vessels_positive_rate() {
    let samples = gen_toy_vessels(1, 200, 64);
    let rate: f64 = samples.iter().map(|s| s.y.mean()).sum::<f64>() / samples.len() as f64;
    assert!((0.05..=0.15).contains(&rate), "positive rate {}", rate);
    assert!(samples.iter().all(|s| s.y.data().iter().all(|&v| v == 0.0 || v == 1.0)));
    assert!(samples.iter().all(|s| s.x.is_finite()));
}

#[test]
fn two_d_blob_and_moons() {
    let samples = gen_2d_conditional(5, 20_000);
    let (blob, moons): (Vec<&PairedSample>, Vec<&PairedSample>) =
        samples.iter().partition(|s| s.x.data()[0] == 0.0);
    let mean = |k: usize| blob.iter().map(|s| s.y.data()[k]).sum::<f64>() / blob.len() as f64;
    assert!((mean(0) - BLOB_MEAN[0]).abs() < 0.05 && (mean(1) - BLOB_MEAN[1]).abs() < 0.05);
    let left = moons.iter().filter(|s| s.y.data()[0] < 0.0).count() as f64 / moons.len() as f64;
    assert!((0.3..=0.7).contains(&left), "left fraction {}", left);
    assert!((blob_entropy() - 1.575).abs() < 1e-3);
}

#[test]
fn generation_is_order_and_thread_independent() {
    let spec = DataSpec::ToyVessels { size: 32 };
    let serial = spec.generate(9, 0..40);
    let (a, b) = std::thread::scope(|s| {
        let hi = s.spawn(|| spec.generate(9, 20..40));
        let lo = s.spawn(|| spec.generate(9, 0..20));
        (lo.join().unwrap(), hi.join().unwrap())
    });
    let parallel: Vec<_> = a.into_iter().chain(b).collect();
    assert_eq!(serial, parallel);
    assert_ne!(spec.generate(10, 0..1), spec.generate(9, 0..1));
}

#[test]
fn identity_and_full_turn_augmentation_preserve_the_sample() {
    let s = &gen_toy_vessels(2, 1, 32)[0];
    assert_eq!(&augment_with(s, AugmentParams::IDENTITY).unwrap(), s);
    let turn = AugmentParams {
        angle: 2.0 * PI,
        ..AugmentParams::IDENTITY
    };
    let t = augment_with(s, turn).unwrap();
    assert_eq!(t.y, s.y);
    assert!(t.x.max_abs_diff(&s.x).unwrap() < 1e-6);
}

#[test]
fn augmentation_rejects_points() {
    let s = &gen_2d_conditional(0, 1)[0];
    assert!(augment(s, 1).is_err());
}

#[test]
fn container_round_trip() {
    let samples = gen_toy_sr(4, 5, 8, 2, 3);
    let mut buf = Vec::new();
    write_container(&mut buf, "toy_sr", 4, &samples).unwrap();
    let (name, seed, back) = read_container(&mut buf.as_slice()).unwrap();
    assert_eq!((name.as_str(), seed), ("toy_sr", 4));
    assert_eq!(back, samples);
    buf[0] = b'X';
    assert!(read_container(&mut buf.as_slice()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmented_masks_stay_binary(seed in any::<u64>()) {
        let s = &gen_toy_vessels(seed, 1, 16)[0];
        let a = augment(s, seed ^ 1).unwrap();
        prop_assert!(a.y.data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(a.x.shape(), s.x.shape());
    }

    #[test]
    fn items_depend_only_on_seed_and_index(seed in any::<u64>(), i in 0u64..100) {
        let spec = DataSpec::ToySr { hr_size: 8, factor: 2, bits: 4 };
        prop_assert_eq!(spec.item(seed, i), spec.generate(seed, 0..i + 1).pop().unwrap());
    }
}
