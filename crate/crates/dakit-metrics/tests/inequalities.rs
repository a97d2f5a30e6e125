//! Property tests: the classical inequality chain between distances,
//! symmetry, exponent monotonicity, and estimator identities.

use dakit_core::{Ensemble, Gaussian};
use dakit_metrics::{
    chi2_gaussian, energy_dist_sq_ensemble, hellinger_grid, kl_gaussian, mmd_sq_ensemble,
    tv_grid, wasserstein1_empirical_1d, wasserstein_p_quantile, GridDensity, Kernel,
};
use nalgebra::{DMatrix, DVector};
use proptest::collection::vec;
use proptest::prelude::*;

fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    let z = x - mean;
    (-(z * z) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}

fn grid_normal(mean: f64, var: f64) -> GridDensity {
    GridDensity::on_regular_grid(-14.0, 14.0, 14_000, |x| normal_pdf(x, mean, var)).unwrap()
}

fn scalar_gaussian(mean: f64, var: f64) -> Gaussian {
    Gaussian::new(
        DVector::from_element(1, mean),
        DMatrix::from_element(1, 1, var),
    )
    .unwrap()
}

fn ensemble_from_flat(flat: &[f64], dim: usize) -> Ensemble {
    Ensemble::new(
        flat.chunks_exact(dim)
            .map(DVector::from_row_slice)
            .collect(),
    )
    .unwrap()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    // The variance ranges keep 2*var_q - var_p positive, so the chi-squared
    // divergence is finite on every sampled pair.
    #[test]
    fn distances_respect_the_classical_inequality_chain(
        mp in -1.0..1.0f64,
        mq in -1.0..1.0f64,
        vp in 0.3..1.0f64,
        vq in 0.6..1.2f64,
    ) {
        let slack = 1e-8;
        let p = grid_normal(mp, vp);
        let q = grid_normal(mq, vq);
        let tv = tv_grid(&p, &q).unwrap();
        let h = hellinger_grid(&p, &q).unwrap();
        let gp = scalar_gaussian(mp, vp);
        let gq = scalar_gaussian(mq, vq);
        let kl = kl_gaussian(&gp, &gq).unwrap();
        let chi2 = chi2_gaussian(&gp, &gq).unwrap();

        prop_assert!(kl >= -1e-12);
        prop_assert!(chi2 >= 0.0);
        prop_assert!(tv / std::f64::consts::SQRT_2 <= h + slack);
        prop_assert!(h <= tv.sqrt() + slack);
        prop_assert!(h * h <= 0.5 * kl + slack);
        prop_assert!(tv * tv <= kl + slack);
        prop_assert!(kl <= (chi2 + 1.0).ln() + slack);
        prop_assert!((chi2 + 1.0).ln() <= chi2 + slack);
    }

    #[test]
    fn grid_distances_are_symmetric_and_exponent_monotone(
        mp in -1.0..1.0f64,
        mq in -1.0..1.0f64,
        vp in 0.3..1.0f64,
        vq in 0.6..1.2f64,
    ) {
        let p = grid_normal(mp, vp);
        let q = grid_normal(mq, vq);
        prop_assert_eq!(tv_grid(&p, &q).unwrap(), tv_grid(&q, &p).unwrap());
        prop_assert_eq!(
            hellinger_grid(&p, &q).unwrap(),
            hellinger_grid(&q, &p).unwrap()
        );
        let w1 = wasserstein_p_quantile(&p, &q, 1.0).unwrap();
        let w2 = wasserstein_p_quantile(&p, &q, 2.0).unwrap();
        prop_assert_eq!(w1, wasserstein_p_quantile(&q, &p, 1.0).unwrap());
        prop_assert!(w1 <= w2 + 1e-12);
    }

    #[test]
    fn kernel_estimators_are_symmetric_and_energy_matches_negdist_mmd(
        (dim, xs, ys) in (1..=3usize, 2..12usize, 2..12usize).prop_flat_map(|(d, nx, ny)| {
            (
                Just(d),
                vec(-5.0..5.0f64, d * nx),
                vec(-5.0..5.0f64, d * ny),
            )
        }),
    ) {
        let x = ensemble_from_flat(&xs, dim);
        let y = ensemble_from_flat(&ys, dim);

        let energy = energy_dist_sq_ensemble(&x, &y).unwrap();
        let negdist = mmd_sq_ensemble(&x, &y, Kernel::NegDistance).unwrap();
        prop_assert_eq!(energy, negdist);
        prop_assert!(close(energy, energy_dist_sq_ensemble(&y, &x).unwrap()));

        for kernel in [
            Kernel::Gaussian { bandwidth: 0.8 },
            Kernel::Linear,
            Kernel::NegDistance,
        ] {
            let forward = mmd_sq_ensemble(&x, &y, kernel).unwrap();
            let backward = mmd_sq_ensemble(&y, &x, kernel).unwrap();
            prop_assert!(close(forward, backward), "{forward} vs {backward}");
        }
    }

    #[test]
    fn empirical_w1_is_symmetric_and_duplication_invariant(
        xs in vec(-5.0..5.0f64, 2..40),
        ys in vec(-5.0..5.0f64, 2..40),
    ) {
        let x = ensemble_from_flat(&xs, 1);
        let y = ensemble_from_flat(&ys, 1);
        let forward = wasserstein1_empirical_1d(&x, &y).unwrap();
        let backward = wasserstein1_empirical_1d(&y, &x).unwrap();
        prop_assert_eq!(forward, backward);

        // Duplicating every sample leaves the empirical measure unchanged;
        // this drives the merged-breakpoint path against the plain one.
        let doubled: Vec<f64> = xs.iter().flat_map(|&v| [v, v]).collect();
        let xx = ensemble_from_flat(&doubled, 1);
        let dup = wasserstein1_empirical_1d(&xx, &y).unwrap();
        prop_assert!(close(forward, dup), "{forward} vs {dup}");
    }
}
