//! Structural invariants of the pipeline under randomized inputs.

use hma_core::data::{standardize_responses, CohortData, EffectBlock};
use hma_core::stage1::fit_cohort;
use hma_core::stage2::{pool_within_cohort, ConvergenceOptions};
use proptest::prelude::*;

const J: usize = 24;
const K: usize = 3;

/// Build a cohort from raw noise. The exposure and propensity get a
/// deterministic ramp on top of the noise so the design never collapses
/// to a singular matrix, whatever the random draw.
fn build_cohort(noise: &[f64], slopes: &[f64], holes: bool) -> CohortData {
    let exposure: Vec<f64> = (0..J)
        .map(|i| (i as f64 / J as f64) * 4.0 - 2.0 + 0.3 * noise[i])
        .collect();
    let propensity: Vec<f64> = (0..J)
        .map(|i| ((i * 7 % J) as f64 / J as f64) * 2.0 - 1.0 + 0.3 * noise[J + i])
        .collect();
    let mut responses = Vec::with_capacity(J * K);
    for j in 0..J {
        for k in 0..K {
            if holes && (j + 5 * k) % 6 == 1 {
                responses.push(f64::NAN);
            } else {
                responses
                    .push(slopes[k] * exposure[j] - 0.5 * propensity[j] + noise[2 * J + j * K + k]);
            }
        }
    }
    CohortData::new(
        "prop",
        (0..K).map(|k| format!("e{k}")).collect(),
        exposure,
        propensity,
        responses,
    )
    .unwrap()
}

fn noise_and_slopes() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        proptest::collection::vec(-1.0f64..1.0, 2 * J + J * K),
        proptest::collection::vec(-2.0f64..2.0, K),
    )
}

proptest! {
    /// Reordering rows must not change any first-stage output.
    #[test]
    fn row_order_is_irrelevant((noise, slopes) in noise_and_slopes(),
                               perm in Just((0..J).collect::<Vec<usize>>()).prop_shuffle()) {
        let base = build_cohort(&noise, &slopes, true);
        let shuffled = CohortData::new(
            "prop",
            base.endpoint_names.clone(),
            perm.iter().map(|&j| base.exposure[j]).collect(),
            perm.iter().map(|&j| base.propensity[j]).collect(),
            perm.iter()
                .flat_map(|&j| (0..K).map(move |k| j * K + k))
                .map(|idx| base.responses[idx])
                .collect(),
        )
        .unwrap();
        let a = fit_cohort(&base).unwrap().block;
        let b = fit_cohort(&shuffled).unwrap().block;
        for k in 0..K {
            prop_assert!((a.b_hat[k] - b.b_hat[k]).abs() <= 1e-8 * (1.0 + a.b_hat[k].abs()));
        }
        for i in 0..K * K {
            prop_assert!((a.gamma[i] - b.gamma[i]).abs() <= 1e-8 * (1.0 + a.gamma[i].abs()));
        }
    }

    /// Rescaling one endpoint by c rescales its effect by c, its variance
    /// entry by c^2 and its covariance entries by c.
    #[test]
    fn endpoint_scaling_is_equivariant((noise, slopes) in noise_and_slopes(),
                                       c in 0.5f64..4.0) {
        let base = build_cohort(&noise, &slopes, true);
        let target = 1usize;
        let mut scaled_resp = base.responses.clone();
        for j in 0..J {
            scaled_resp[j * K + target] *= c;
        }
        let scaled = CohortData::new(
            "prop",
            base.endpoint_names.clone(),
            base.exposure.clone(),
            base.propensity.clone(),
            scaled_resp,
        )
        .unwrap();
        let a = fit_cohort(&base).unwrap().block;
        let b = fit_cohort(&scaled).unwrap().block;
        for k in 0..K {
            let factor = if k == target { c } else { 1.0 };
            prop_assert!(
                (b.b_hat[k] - factor * a.b_hat[k]).abs() <= 1e-8 * (1.0 + a.b_hat[k].abs())
            );
            for l in 0..K {
                let gf = factor * if l == target { c } else { 1.0 };
                let want = gf * a.gamma[k * K + l];
                prop_assert!((b.gamma[k * K + l] - want).abs() <= 1e-8 * (1.0 + want.abs()));
            }
        }
    }

    /// Shifting one endpoint by a constant lands entirely in the intercept.
    #[test]
    fn endpoint_shifts_only_move_the_intercept((noise, slopes) in noise_and_slopes(),
                                               d in -50.0f64..50.0) {
        let base = build_cohort(&noise, &slopes, true);
        let mut shifted_resp = base.responses.clone();
        for j in 0..J {
            shifted_resp[j * K] += d;
        }
        let shifted = CohortData::new(
            "prop",
            base.endpoint_names.clone(),
            base.exposure.clone(),
            base.propensity.clone(),
            shifted_resp,
        )
        .unwrap();
        let a = fit_cohort(&base).unwrap();
        let b = fit_cohort(&shifted).unwrap();
        prop_assert!((b.fits[0].theta[0] - a.fits[0].theta[0] - d).abs() <= 1e-7);
        for k in 0..K {
            prop_assert!((a.block.b_hat[k] - b.block.b_hat[k]).abs() <= 1e-8);
        }
        for i in 0..K * K {
            prop_assert!((a.block.gamma[i] - b.block.gamma[i]).abs() <= 1e-7 * (1.0 + a.block.gamma[i].abs()));
        }
    }

    /// Standardizing and mapping back through the recorded scales is the
    /// identity on every observed cell.
    #[test]
    fn standardization_round_trips((noise, slopes) in noise_and_slopes()) {
        let base = build_cohort(&noise, &slopes, true);
        let (std, record) = standardize_responses(&base).unwrap();
        for j in 0..J {
            for k in 0..K {
                match (base.response(j, k), std.response(j, k)) {
                    (Some(orig), Some(z)) => {
                        let back = record.to_original(k, z);
                        prop_assert!((back - orig).abs() <= 1e-9 * (1.0 + orig.abs()));
                        let there = record.to_standardized(k, orig);
                        prop_assert!((there - z).abs() <= 1e-9 * (1.0 + z.abs()));
                    }
                    (None, None) => {}
                    _ => prop_assert!(false, "missingness pattern changed"),
                }
            }
        }
    }

    /// With complete data the residual cross-moments form a Gram matrix,
    /// so every off-diagonal obeys the Cauchy-Schwarz bound.
    #[test]
    fn residual_covariance_obeys_cauchy_schwarz((noise, slopes) in noise_and_slopes()) {
        let base = build_cohort(&noise, &slopes, false);
        let out = fit_cohort(&base).unwrap();
        let s = &out.residual_cov.sigma;
        for a in 0..K {
            for b in 0..K {
                let bound = (s[a * K + a] * s[b * K + b]).sqrt();
                prop_assert!(s[a * K + b].abs() <= bound * (1.0 + 1e-12));
            }
        }
    }

    /// Pooling is a convex combination: the estimate stays inside the hull
    /// of the per-endpoint effects and the weights are a probability vector.
    #[test]
    fn pooled_effect_stays_in_the_hull(b_hat in proptest::collection::vec(-5.0f64..5.0, 2..6),
                                       vars in proptest::collection::vec(0.01f64..2.0, 6)) {
        let k = b_hat.len();
        let mut gamma = vec![0.0; k * k];
        for i in 0..k {
            gamma[i * k + i] = vars[i];
        }
        let block = EffectBlock {
            cohort_id: "hull".into(),
            endpoints: (0..k).map(|i| format!("e{i}")).collect(),
            b_hat: b_hat.clone(),
            gamma,
            n_rows: 1,
            n_obs: vec![1; k],
            n_pairwise: vec![1; k * k],
            warnings: Vec::new(),
        };
        let pooled = pool_within_cohort(&block, &ConvergenceOptions::default()).unwrap();
        let lo = b_hat.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = b_hat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(pooled.beta >= lo - 1e-9 && pooled.beta <= hi + 1e-9);
        prop_assert!(pooled.weights.iter().all(|&w| w >= 0.0));
        let total: f64 = pooled.weights.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9);
        prop_assert!(pooled.se > 0.0);
    }
}
