//! Third stage: pool the per-cohort exposure effects into one global
//! effect with a between-cohort variance eta2.
//!
//! Structurally this is the second stage with a diagonal covariance: each
//! cohort contributes a scalar estimate and a scalar variance, so the
//! working covariance is diag(V_i) + eta2 I and the same alternation of
//! weighted mean and scalar likelihood search applies. A method-of-moments
//! DerSimonian-Laird variance is reported alongside for comparison with
//! standard random-effects meta-analysis output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::golden_section_max;
use crate::stage2::{CohortPooled, ConvergenceOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// One cohort reduced to an estimate and its sampling variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortSummary {
    pub label: String,
    pub beta: f64,
    pub variance: f64,
}

impl From<&CohortPooled> for CohortSummary {
    fn from(p: &CohortPooled) -> Self {
        CohortSummary {
            label: p.cohort_id.clone(),
            beta: p.beta,
            variance: p.se * p.se,
        }
    }
}

/// Globally pooled effect across cohorts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalPooled {
    pub cohorts: Vec<CohortSummary>,
    pub beta: f64,
    pub se: f64,
    pub eta2: f64,
    /// Curvature-based standard error of eta2; absent when the likelihood
    /// is flat or eta2 sits on the zero boundary with no identifiable
    /// curvature.
    pub se_eta2: Option<f64>,
    /// DerSimonian-Laird moment estimate of the same variance.
    pub eta2_dl: f64,
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub log_pl: f64,
}

fn loglik(beta: f64, eta2: f64, cohorts: &[CohortSummary]) -> f64 {
    let mut acc = 0.0;
    for c in cohorts {
        let v = c.variance + eta2;
        if !(v > 0.0) {
            return f64::NEG_INFINITY;
        }
        let d = c.beta - beta;
        acc += -0.5 * (LN_2PI + v.ln() + d * d / v);
    }
    acc
}

fn weighted_mean(eta2: f64, cohorts: &[CohortSummary]) -> (f64, Vec<f64>) {
    let mut weights: Vec<f64> = cohorts.iter().map(|c| 1.0 / (c.variance + eta2)).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    let beta = weights.iter().zip(cohorts).map(|(w, c)| w * c.beta).sum();
    (beta, weights)
}

/// DerSimonian-Laird moment estimator of the between-cohort variance.
pub fn dersimonian_laird(cohorts: &[CohortSummary]) -> f64 {
    let n = cohorts.len();
    if n < 2 {
        return 0.0;
    }
    let w: Vec<f64> = cohorts.iter().map(|c| 1.0 / c.variance).collect();
    let sw: f64 = w.iter().sum();
    let beta_fixed: f64 = w.iter().zip(cohorts).map(|(w, c)| w * c.beta).sum::<f64>() / sw;
    let q: f64 = w
        .iter()
        .zip(cohorts)
        .map(|(w, c)| w * (c.beta - beta_fixed) * (c.beta - beta_fixed))
        .sum();
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    let denom = sw - sw2 / sw;
    if denom <= 0.0 {
        return 0.0;
    }
    ((q - (n as f64 - 1.0)) / denom).max(0.0)
}

/// Pool cohort-level estimates into a global effect.
pub fn pool_across_cohorts(
    cohorts: &[CohortSummary],
    opts: &ConvergenceOptions,
) -> Result<GlobalPooled> {
    if cohorts.is_empty() {
        return Err(Error::Validation("no cohort estimates to pool".into()));
    }
    for c in cohorts {
        if !(c.variance >= 0.0) || !c.beta.is_finite() {
            return Err(Error::Validation(format!(
                "cohort '{}' has invalid estimate {} (variance {})",
                c.label, c.beta, c.variance
            )));
        }
    }
    let v_max = cohorts.iter().fold(0.0f64, |m, c| m.max(c.variance));
    let mean = cohorts.iter().map(|c| c.beta).sum::<f64>() / cohorts.len() as f64;
    let spread = cohorts
        .iter()
        .fold(0.0f64, |m, c| m.max((c.beta - mean) * (c.beta - mean)));
    let eta_hi = (100.0 * v_max).max(10.0 * spread).max(1e-8);

    let mut eta2 = 0.0;
    let mut beta = f64::NAN;
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let (beta_new, _) = weighted_mean(eta2, cohorts);
        let (mut eta_new, eta_pl) = golden_section_max(
            |e| loglik(beta_new, e, cohorts),
            0.0,
            eta_hi,
            opts.phi_search_tol,
            200,
        );
        if loglik(beta_new, eta2, cohorts) > eta_pl {
            eta_new = eta2;
        }
        let done = !beta.is_nan()
            && (beta_new - beta).abs() < opts.tol_beta
            && (eta_new - eta2).abs() < opts.tol_phi;
        beta = beta_new;
        eta2 = eta_new;
        if done {
            converged = true;
            break;
        }
    }

    let (beta_final, weights) = weighted_mean(eta2, cohorts);
    let precision: f64 = cohorts.iter().map(|c| 1.0 / (c.variance + eta2)).sum();
    let se = (1.0 / precision).sqrt();
    let se_eta2 = profile_curvature_se(eta2, cohorts);
    Ok(GlobalPooled {
        cohorts: cohorts.to_vec(),
        beta: beta_final,
        se,
        eta2,
        se_eta2,
        eta2_dl: dersimonian_laird(cohorts),
        weights,
        iterations,
        converged,
        log_pl: loglik(beta_final, eta2, cohorts),
    })
}

/// Standard error of eta2 from the curvature of the profile likelihood,
/// where beta is re-profiled at every probed eta2. Uses a central stencil
/// when eta2 is interior and a forward stencil on the zero boundary.
fn profile_curvature_se(eta2: f64, cohorts: &[CohortSummary]) -> Option<f64> {
    let profile = |e: f64| -> f64 {
        let (b, _) = weighted_mean(e, cohorts);
        loglik(b, e, cohorts)
    };
    let h = 1e-4 * (1.0 + eta2);
    let second = if eta2 >= h {
        (profile(eta2 + h) - 2.0 * profile(eta2) + profile(eta2 - h)) / (h * h)
    } else {
        (profile(eta2 + 2.0 * h) - 2.0 * profile(eta2 + h) + profile(eta2)) / (h * h)
    };
    if second < 0.0 {
        Some((-1.0 / second).sqrt())
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EffectBlock;
    use crate::stage2::pool_within_cohort;
    use approx::assert_relative_eq;

    fn summaries(betas: &[f64], vars: &[f64]) -> Vec<CohortSummary> {
        betas
            .iter()
            .zip(vars)
            .enumerate()
            .map(|(i, (b, v))| CohortSummary {
                label: format!("c{i}"),
                beta: *b,
                variance: *v,
            })
            .collect()
    }

    #[test]
    fn equal_variance_closed_form() {
        let cohorts = summaries(&[1.0, 2.0, 4.0, 5.0], &[0.1; 4]);
        let pooled = pool_across_cohorts(&cohorts, &ConvergenceOptions::default()).unwrap();
        assert!(pooled.converged);
        assert_relative_eq!(pooled.beta, 3.0, epsilon = 1e-8);
        assert_relative_eq!(pooled.eta2, 2.5 - 0.1, epsilon = 1e-6);
        assert_relative_eq!(pooled.se, (2.5f64 / 4.0).sqrt(), epsilon = 1e-6);
    }

    #[test]
    fn matches_stage2_on_a_diagonal_block() {
        let betas = [0.8, 1.9, 1.1, 2.6];
        let vars = [0.05, 0.12, 0.02, 0.3];
        let cohorts = summaries(&betas, &vars);
        let global = pool_across_cohorts(&cohorts, &ConvergenceOptions::default()).unwrap();

        // the same problem phrased as a single diagonal effect block with J = 1
        let k = betas.len();
        let mut gamma = vec![0.0; k * k];
        for i in 0..k {
            gamma[i * k + i] = vars[i];
        }
        let block = EffectBlock {
            cohort_id: "as-block".into(),
            endpoints: (0..k).map(|i| format!("c{i}")).collect(),
            b_hat: betas.to_vec(),
            gamma,
            n_rows: 1,
            n_obs: vec![1; k],
            n_pairwise: vec![1; k * k],
            warnings: Vec::new(),
        };
        let within = pool_within_cohort(&block, &ConvergenceOptions::default()).unwrap();
        assert!((global.beta - within.beta).abs() < 1e-8);
        assert!((global.eta2 - within.phi).abs() < 1e-8);
        assert!((global.se - within.se).abs() < 1e-8);
    }

    #[test]
    fn dersimonian_laird_hand_value() {
        let cohorts = summaries(&[0.0, 1.0], &[0.5, 0.5]);
        // w = 2 each, beta_fixed = 0.5, Q = 2*0.25 + 2*0.25 = 1
        // denom = 4 - 8/4 = 2, eta2 = (1 - 1)/2 = 0
        assert_relative_eq!(dersimonian_laird(&cohorts), 0.0, epsilon = 1e-12);
        let spread = summaries(&[0.0, 4.0], &[0.5, 0.5]);
        // Q = 2*4 + 2*4 = 16 -> eta2 = (16 - 1)/2 = 7.5
        assert_relative_eq!(dersimonian_laird(&spread), 7.5, epsilon = 1e-12);
    }

    #[test]
    fn se_eta2_present_on_well_spread_input() {
        let cohorts = summaries(&[0.2, 1.5, 2.9, 4.4, 6.0], &[0.05, 0.07, 0.04, 0.09, 0.06]);
        let pooled = pool_across_cohorts(&cohorts, &ConvergenceOptions::default()).unwrap();
        assert!(pooled.eta2 > 0.5);
        let se = pooled
            .se_eta2
            .expect("interior eta2 should have a curvature se");
        assert!(se.is_finite() && se > 0.0);
    }

    #[test]
    fn single_cohort_passes_through() {
        let cohorts = summaries(&[1.3], &[0.09]);
        let pooled = pool_across_cohorts(&cohorts, &ConvergenceOptions::default()).unwrap();
        assert_relative_eq!(pooled.beta, 1.3, epsilon = 1e-10);
        assert_relative_eq!(pooled.eta2, 0.0, epsilon = 1e-8);
        assert_relative_eq!(pooled.se, 0.3, epsilon = 1e-6);
    }

    #[test]
    fn invalid_variance_is_rejected() {
        let mut cohorts = summaries(&[1.0, 2.0], &[0.1, 0.2]);
        cohorts[1].variance = -0.5;
        assert!(pool_across_cohorts(&cohorts, &ConvergenceOptions::default()).is_err());
    }
}
