//! Randomized invariants of the scoring rules.

use dakit_core::{ensemble_moments, Ensemble, Normalization};
use dakit_scoring::{crps_ensemble, crps_gaussian, energy_score, quantile_score, Forecast};
use nalgebra::DVector;
use proptest::prelude::*;

fn scalar_ensemble(values: &[f64]) -> Ensemble {
    Ensemble::new(
        values
            .iter()
            .map(|&v| DVector::from_element(1, v))
            .collect(),
    )
    .unwrap()
}

fn ensemble_from_flat(d: usize, flat: &[f64]) -> Ensemble {
    Ensemble::new(
        flat.chunks_exact(d)
            .map(|c| DVector::from_row_slice(c))
            .collect(),
    )
    .unwrap()
}

fn ensemble_with_verification() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>)> {
    (1usize..=3, 2usize..12).prop_flat_map(|(d, n)| {
        (
            Just(d),
            prop::collection::vec(-5.0..5.0f64, d * n),
            prop::collection::vec(-5.0..5.0f64, d),
        )
    })
}

proptest! {
    #[test]
    fn gaussian_crps_is_nonnegative(
        m in -100.0..100.0f64,
        sigma in 1e-3..50.0f64,
        v in -100.0..100.0f64,
    ) {
        prop_assert!(crps_gaussian(m, sigma, v).unwrap() >= 0.0);
    }

    #[test]
    fn ensemble_crps_is_the_unit_exponent_energy_score(
        xs in prop::collection::vec(-5.0..5.0f64, 2..12),
        v in -5.0..5.0f64,
    ) {
        let e = scalar_ensemble(&xs);
        let crps = crps_ensemble(&e, v).unwrap();
        let es = energy_score(
            &e,
            &DVector::from_element(1, v),
            1.0,
            Normalization::Unbiased,
        )
        .unwrap();
        prop_assert_eq!(crps, es);
        prop_assert!(crps >= -1e-12);
    }

    #[test]
    fn per_member_quadratic_score_is_the_squared_mean_error(
        (d, flat, v) in ensemble_with_verification(),
    ) {
        let e = ensemble_from_flat(d, &flat);
        let v = DVector::from_row_slice(&v);
        let es = energy_score(&e, &v, 2.0, Normalization::PerMember).unwrap();
        let (mean, _) = ensemble_moments(&e);
        let direct = (&mean - &v).norm_squared();
        prop_assert!(
            (es - direct).abs() <= 1e-12 * (1.0 + direct.abs()),
            "score {} vs squared mean error {}", es, direct
        );
    }

    #[test]
    fn fair_pairwise_weighting_never_raises_the_score(
        (d, flat, v) in ensemble_with_verification(),
        beta in 0.2..=2.0f64,
    ) {
        let e = ensemble_from_flat(d, &flat);
        let v = DVector::from_row_slice(&v);
        let fair = energy_score(&e, &v, beta, Normalization::Unbiased).unwrap();
        let biased = energy_score(&e, &v, beta, Normalization::PerMember).unwrap();
        prop_assert!(fair <= biased + 1e-12);
    }

    #[test]
    fn quantile_scores_are_nonnegative(
        xs in prop::collection::vec(-5.0..5.0f64, 2..12),
        alpha in 0.01..0.99f64,
        v in -6.0..6.0f64,
        sigma in 0.1..3.0f64,
    ) {
        let from_members = Forecast::Ensemble(scalar_ensemble(&xs));
        prop_assert!(quantile_score(&from_members, alpha, v).unwrap() >= 0.0);
        let gaussian = Forecast::Gaussian(
            dakit_core::Gaussian::new(
                DVector::from_element(1, xs[0]),
                nalgebra::DMatrix::from_element(1, 1, sigma * sigma),
            )
            .unwrap(),
        );
        prop_assert!(quantile_score(&gaussian, alpha, v).unwrap() >= 0.0);
    }
}
