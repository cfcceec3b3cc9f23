//! Serial ensemble adjustment Kalman filter machinery: scalar observation
//! updates with linear regression onto the state, covariance localization,
//! and multiplicative inflation. The pieces are generic over what the state
//! vector holds; wrappers decide the packing.

use nalgebra::DMatrix;

/// Fifth-order piecewise localization taper with support `2 * half_width`.
pub fn gaspari_cohn(dist: f64, half_width: f64) -> f64 {
    assert!(half_width > 0.0, "localization half-width must be positive");
    let z = dist.abs() / half_width;
    if z >= 2.0 {
        0.0
    } else if z >= 1.0 {
        z.powi(5) / 12.0 - z.powi(4) / 2.0 + 5.0 * z.powi(3) / 8.0 + 5.0 * z.powi(2) / 3.0
            - 5.0 * z
            + 4.0
            - 2.0 / (3.0 * z)
    } else {
        -z.powi(5) / 4.0 + z.powi(4) / 2.0 + 5.0 * z.powi(3) / 8.0 - 5.0 * z.powi(2) / 3.0 + 1.0
    }
}

/// One scalar observation of a state component.
#[derive(Clone, Copy, Debug)]
pub struct ScalarObs {
    pub state_index: usize,
    pub value: f64,
    pub variance: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub assimilated: usize,
    pub skipped_zero_variance: usize,
}

/// Multiplicative covariance inflation about the ensemble mean.
pub fn inflate(ens: &mut DMatrix<f64>, factor: f64) {
    assert!(factor >= 1.0, "inflation must not deflate");
    let scale = factor.sqrt();
    let n_e = ens.ncols();
    for k in 0..ens.nrows() {
        let mean = ens.row(k).sum() / n_e as f64;
        for e in 0..n_e {
            ens[(k, e)] = mean + scale * (ens[(k, e)] - mean);
        }
    }
}

/// Assimilate scalar observations one at a time. Each observation adjusts
/// its own component deterministically toward the Kalman posterior and drags
/// every other component along its sample regression, tapered by
/// `localization(obs_state_index, state_index)`. Observations whose prior
/// ensemble has collapsed are skipped and counted.
pub fn serial_eakf_update<L>(
    ens: &mut DMatrix<f64>,
    obs: &[ScalarObs],
    localization: L,
) -> UpdateStats
where
    L: Fn(usize, usize) -> f64,
{
    let n_e = ens.ncols();
    assert!(n_e >= 2, "need at least two members for sample statistics");
    let mut stats = UpdateStats::default();
    for ob in obs {
        let hx: Vec<f64> = (0..n_e).map(|e| ens[(ob.state_index, e)]).collect();
        let h_mean = hx.iter().sum::<f64>() / n_e as f64;
        let h_var = hx.iter().map(|v| (v - h_mean).powi(2)).sum::<f64>() / (n_e - 1) as f64;
        if h_var <= 1e-14 * h_mean.mul_add(h_mean, 1.0) {
            stats.skipped_zero_variance += 1;
            continue;
        }
        let post_var = 1.0 / (1.0 / h_var + 1.0 / ob.variance);
        let post_mean = post_var * (h_mean / h_var + ob.value / ob.variance);
        let shrink = (post_var / h_var).sqrt();
        let dh: Vec<f64> = hx
            .iter()
            .map(|&v| post_mean + shrink * (v - h_mean) - v)
            .collect();
        for k in 0..ens.nrows() {
            let rho = localization(ob.state_index, k);
            if rho == 0.0 {
                continue;
            }
            let row_mean = ens.row(k).sum() / n_e as f64;
            let cov = (0..n_e)
                .map(|e| (ens[(k, e)] - row_mean) * (hx[e] - h_mean))
                .sum::<f64>()
                / (n_e - 1) as f64;
            let gain = rho * cov / h_var;
            for e in 0..n_e {
                ens[(k, e)] += gain * dh[e];
            }
        }
        stats.assimilated += 1;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taper_matches_hand_values_and_vanishes_outside_support() {
        assert!((gaspari_cohn(0.0, 1.0) - 1.0).abs() < 1e-15);
        assert!((gaspari_cohn(1.0, 1.0) - 5.0 / 24.0).abs() < 1e-15);
        assert_eq!(gaspari_cohn(2.0, 1.0), 0.0);
        assert_eq!(gaspari_cohn(5.0, 1.0), 0.0);
        // continuous across the piece boundary and monotone inside
        assert!((gaspari_cohn(1.0 - 1e-9, 1.0) - gaspari_cohn(1.0 + 1e-9, 1.0)).abs() < 1e-7);
        let samples: Vec<f64> = (0..=40).map(|i| gaspari_cohn(i as f64 * 0.05, 1.0)).collect();
        for w in samples.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "taper increased: {} -> {}", w[0], w[1]);
        }
        // scaling the half-width rescales distance
        assert!((gaspari_cohn(3.0, 3.0) - gaspari_cohn(1.0, 1.0)).abs() < 1e-15);
    }

    #[test]
    fn scalar_update_reproduces_the_kalman_posterior_exactly() {
        let mut ens = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 4.0]);
        let prior_mean: f64 = 7.0 / 3.0;
        let prior_var = ((1.0 - prior_mean).powi(2)
            + (2.0 - prior_mean).powi(2)
            + (4.0 - prior_mean).powi(2))
            / 2.0;
        let (y, r) = (3.0, 0.5);
        let stats = serial_eakf_update(
            &mut ens,
            &[ScalarObs { state_index: 0, value: y, variance: r }],
            |_, _| 1.0,
        );
        assert_eq!(stats, UpdateStats { assimilated: 1, skipped_zero_variance: 0 });

        let expect_var = 1.0 / (1.0 / prior_var + 1.0 / r);
        let expect_mean = expect_var * (prior_mean / prior_var + y / r);
        let mean = ens.row(0).sum() / 3.0;
        let var = (0..3).map(|e| (ens[(0, e)] - mean).powi(2)).sum::<f64>() / 2.0;
        assert!((mean - expect_mean).abs() < 1e-12);
        assert!((var - expect_var).abs() < 1e-12);
    }

    #[test]
    fn unobserved_components_move_by_their_regression() {
        // second row is exactly 2x the first plus 1: regression slope 2
        let mut ens = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 4.0, 3.0, 5.0, 9.0]);
        let before_mean0 = ens.row(0).sum() / 3.0;
        serial_eakf_update(
            &mut ens,
            &[ScalarObs { state_index: 0, value: 3.0, variance: 0.5 }],
            |_, _| 1.0,
        );
        let after_mean0 = ens.row(0).sum() / 3.0;
        let after_mean1 = ens.row(1).sum() / 3.0;
        let expect_mean1 = 17.0 / 3.0 + 2.0 * (after_mean0 - before_mean0);
        assert!((after_mean1 - expect_mean1).abs() < 1e-12);
        // the perfect linear relation is preserved member by member
        for e in 0..3 {
            assert!((ens[(1, e)] - (2.0 * ens[(0, e)] + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_localization_leaves_rows_untouched_bitwise() {
        let mut ens = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 4.0, -0.3, 0.7, 0.1]);
        let frozen: Vec<f64> = ens.row(1).iter().copied().collect();
        serial_eakf_update(
            &mut ens,
            &[ScalarObs { state_index: 0, value: 3.0, variance: 0.5 }],
            |_, k| if k == 1 { 0.0 } else { 1.0 },
        );
        let after: Vec<f64> = ens.row(1).iter().copied().collect();
        assert_eq!(frozen, after);
        assert!((ens.row(0).sum() / 3.0 - 7.0 / 3.0).abs() > 1e-3);
    }

    #[test]
    fn collapsed_observation_priors_are_skipped() {
        let mut ens = DMatrix::from_row_slice(2, 3, &[5.0, 5.0, 5.0, 1.0, 2.0, 3.0]);
        let stats = serial_eakf_update(
            &mut ens,
            &[
                ScalarObs { state_index: 0, value: 9.0, variance: 0.1 },
                ScalarObs { state_index: 1, value: 2.5, variance: 0.1 },
            ],
            |_, _| 1.0,
        );
        assert_eq!(stats.assimilated, 1);
        assert_eq!(stats.skipped_zero_variance, 1);
        assert_eq!(ens[(0, 0)], 5.0);
    }

    #[test]
    fn inflation_scales_spread_and_keeps_the_mean() {
        let mut ens = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 6.0]);
        let mean: f64 = 3.0;
        let var0 = (0..4).map(|e| (ens[(0, e)] - mean).powi(2)).sum::<f64>() / 3.0;
        inflate(&mut ens, 1.5);
        let mean1 = ens.row(0).sum() / 4.0;
        let var1 = (0..4).map(|e| (ens[(0, e)] - mean1).powi(2)).sum::<f64>() / 3.0;
        assert!((mean1 - mean).abs() < 1e-12);
        assert!((var1 - 1.5 * var0).abs() < 1e-12);
    }
}
