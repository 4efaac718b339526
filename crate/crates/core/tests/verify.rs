use condflow::verify::{self, CheckSizes, Faults, Scope};

fn small() -> CheckSizes {
    CheckSizes {
        invertibility_configs: 18,
        logdet_configs: 3,
        normalization_iterations: 300,
        normalization_grid: 200,
        elbo_configs: 2,
        support_draws: 5_000,
        axiom_triples: 500,
    }
}

#[test]
fn every_scope_passes_on_a_fresh_build() {
    let results = verify::run_scope(Scope::All, &small(), 3, Faults::default());
    assert!(results.len() >= 12);
    for r in &results {
        assert!(r.passed, "{}", r);
    }
}

#[test]
fn scopes_select_their_suites() {
    let names = |s| -> Vec<String> {
        verify::run_scope(s, &small(), 0, Faults::default()).into_iter().map(|r| r.name).collect()
    };
    assert_eq!(names(Scope::Normalization), ["normalization"]);
    assert_eq!(names(Scope::Gradients), ["grad_check"]);
    assert_eq!(names(Scope::Dequant), ["elbo_bound", "support"]);
    assert!(names(Scope::Layers).iter().all(|n| n.starts_with("invertibility") || n.starts_with("logdet")));
}

#[test]
fn wrong_gradient_fixture_is_caught() {
    let r = verify::gradient_oracle(0, Faults { wrong_gradient: true });
    assert!(!r.passed);
    assert_eq!(r.name, "grad_check");
    assert!(r.measured > 0.1, "{}", r);
}

#[test]
fn round_trip_is_identical_across_precisions_of_the_same_case() {
    for kind in verify::LAYER_KINDS {
        let a = verify::layer_case::<f64>(kind, 5, 2, 64).unwrap();
        let b = verify::layer_case::<f32>(kind, 5, 2, 64).unwrap();
        assert_eq!(a.y.shape(), b.y.shape());
        assert_eq!(a.store.len(), b.store.len());
    }
}

#[test]
fn density_integral_detects_missing_mass() {
    // A flow trained for a handful of steps is still a density; integrating
    // over a window that cuts off most of it must not reach 1.
    let model = verify::train_2d_flow(1, 20).unwrap();
    let full = verify::integrate_density_2d(&model, 8.0, 200).unwrap();
    let clipped = verify::integrate_density_2d(&model, 0.25, 50).unwrap();
    assert!((full - 1.0).abs() < 5e-3, "{}", full);
    assert!(clipped < 0.5, "{}", clipped);
}
