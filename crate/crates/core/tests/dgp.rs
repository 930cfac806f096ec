use proptest::prelude::*;
use tmle_lens_core::dgp::{
    generate, generate_with_potential_outcomes, standardize, true_ate_oracle, DgpSpec, Family, ScalerParams,
    ORACLE_MIN_DRAWS,
};
use tmle_lens_core::{stats, Error};

#[test]
fn same_seed_same_data() {
    let spec = DgpSpec::ds1(500);
    assert_eq!(generate(&spec, 7).unwrap(), generate(&spec, 7).unwrap());
    assert_ne!(generate(&spec, 7).unwrap().y, generate(&spec, 8).unwrap().y);
}

#[test]
fn families_have_documented_shape() {
    let d1 = generate(&DgpSpec::ds1(100), 1).unwrap();
    let d2 = generate(&DgpSpec::ds2(100), 1).unwrap();
    assert_eq!((d1.dim(), d1.true_ate), (10, Some(2.0)));
    assert_eq!((d2.dim(), d2.true_ate), (6, Some(0.0)));
    assert_eq!(Family::Ds1.dim(), 10);
    assert!(d1.a.iter().all(|&a| a == 0.0 || a == 1.0));
}

#[test]
fn oracle_agrees_with_the_specified_effect() {
    for spec in [DgpSpec::ds1(10), DgpSpec::ds2(10)] {
        let est = true_ate_oracle(&spec, ORACLE_MIN_DRAWS, 5).unwrap();
        let tol = (3.0 * est.se).max(1e-9);
        assert!((est.estimate - spec.treatment_effect).abs() <= tol, "{est:?}");
    }
    assert!(matches!(
        true_ate_oracle(&DgpSpec::ds1(10), 10, 0),
        Err(Error::TooFewRows { .. })
    ));
}

#[test]
fn potential_outcomes_share_noise() {
    let spec = DgpSpec::ds1(200);
    let po = generate_with_potential_outcomes(&spec, 4).unwrap();
    for i in 0..200 {
        assert!((po.y1[i] - po.y0[i] - 2.0).abs() < 1e-12);
        let observed = if po.dataset.a[i] == 1.0 { po.y1[i] } else { po.y0[i] };
        assert_eq!(observed, po.dataset.y[i]);
    }
}

#[test]
fn zero_noise_gives_the_outcome_surface() {
    let spec = DgpSpec {
        noise_sd: 0.0,
        ..DgpSpec::ds2(50)
    };
    let data = generate(&spec, 2).unwrap();
    for i in 0..50 {
        assert_eq!(data.y[i], spec.outcome_mean(data.a[i], data.w.row(i)));
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = DgpSpec::ds1(10);
    s.noise_sd = -1.0;
    assert!(s.validate().is_err());
    let mut s = DgpSpec::ds1(10);
    s.propensity_coeffs.pop();
    assert!(matches!(s.validate(), Err(Error::DimensionMismatch { .. })));
    let mut s = DgpSpec::ds1(10);
    s.propensity_coeffs[0] = 8.0;
    assert!(s.validate().is_err(), "strong propensity breaks positivity");
    let s = DgpSpec::ds1(0);
    assert!(generate(&s, 0).is_err());
}

#[test]
fn positivity_holds_empirically() {
    let spec = DgpSpec::ds1(20_000);
    let data = generate(&spec, 9).unwrap();
    let outside = (0..data.n())
        .filter(|&i| {
            let g = spec.propensity(data.w.row(i));
            !(0.01..=0.99).contains(&g)
        })
        .count();
    assert!((outside as f64) / (data.n() as f64) <= 0.015);
    assert!(spec.positivity_tail_mass() <= 0.01);
}

#[test]
fn standardized_columns_have_zero_mean_unit_sd() {
    let data = generate(&DgpSpec::ds2(1000), 3).unwrap();
    let (z, params) = standardize(&data.w).unwrap();
    for j in 0..z.cols() {
        let col = z.column(j);
        assert!(stats::mean(&col).abs() < 1e-12);
        assert!((stats::population_sd(&col) - 1.0).abs() < 1e-12);
    }
    let back = params.inverse_transform(&z).unwrap();
    for (x, y) in back.as_slice().iter().zip(data.w.as_slice()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert!(params.transform(&tmle_lens_core::Matrix::zeros(2, 5)).is_err());
}

#[test]
fn constant_column_cannot_be_standardized() {
    let m = tmle_lens_core::Matrix::from_fn(5, 2, |i, j| if j == 0 { i as f64 } else { 3.0 });
    assert!(matches!(
        ScalerParams::fit(&m),
        Err(Error::ConstantColumn { column: 1 })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_a_function_of_spec_and_seed(seed in any::<u64>(), n in 1usize..200) {
        let spec = DgpSpec::ds2(n);
        let a = generate(&spec, seed).unwrap();
        let b = generate(&spec, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.n(), n);
        prop_assert!(a.y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn prefix_rows_do_not_depend_on_n(seed in any::<u64>(), n in 2usize..100) {
        let short = generate(&DgpSpec::ds1(n), seed).unwrap();
        let long = generate(&DgpSpec::ds1(n + 17), seed).unwrap();
        prop_assert_eq!(short.w.as_slice(), &long.w.as_slice()[..short.w.as_slice().len()]);
        prop_assert_eq!(&short.a[..], &long.a[..n]);
    }
}
