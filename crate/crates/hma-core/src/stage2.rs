//! Second stage: pool the correlated endpoint effects of one cohort into a
//! single exposure effect with a heterogeneity variance phi.
//!
//! The working covariance of the effect vector is Psi(phi) = Gamma/J + phi I.
//! Pooling alternates two steps until the estimates settle:
//!
//! * beta-step: a weighted mean of the effects with weights proportional to
//!   1 / (Gamma_kk/J + phi). Only marginal variances enter the weights;
//!   off-diagonal entries of Gamma are estimated from pairwise-overlapping
//!   residuals and inverting the full matrix is unstable exactly when
//!   missingness makes those entries noisy.
//! * phi-step: golden-section maximization of the pseudo-log-likelihood in
//!   phi with beta held fixed.
//!
//! The full-matrix generalized-least-squares solution is available as a
//! diagnostic through [`gls_diagnostic`]; its weights can be negative,
//! which is the instability the production path avoids.
//!
//! The reported standard error is sqrt(w' Psi(phi) w), the exact variance
//! of the weighted mean that was actually computed, evaluated at the
//! estimated Psi. The off-diagonal entries of Gamma therefore do enter the
//! uncertainty even though they are kept out of the weights.

use serde::{Deserialize, Serialize};

use crate::data::EffectBlock;
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, chol_solve, cholesky, pinv_sym, quad_form};
use crate::optim::golden_section_max;

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Tolerances and iteration budget for [`pool_within_cohort`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceOptions {
    /// Absolute tolerance on successive beta values.
    pub tol_beta: f64,
    /// Absolute tolerance on successive phi values.
    pub tol_phi: f64,
    /// Maximum alternation rounds before giving up.
    pub max_iter: usize,
    /// Bracket tolerance of the scalar phi search.
    pub phi_search_tol: f64,
}

impl Default for ConvergenceOptions {
    fn default() -> Self {
        ConvergenceOptions {
            tol_beta: 1e-8,
            tol_phi: 1e-8,
            max_iter: 500,
            phi_search_tol: 1e-10,
        }
    }
}

/// One recorded step of the alternating fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TracePoint {
    pub beta: f64,
    pub phi: f64,
    /// Pseudo-log-likelihood at (beta, phi); negative infinity when
    /// Psi(phi) is not positive definite (serialized as null).
    pub log_pl: f64,
}

/// Pooled within-cohort effect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortPooled {
    pub cohort_id: String,
    pub endpoints: Vec<String>,
    pub n_rows: usize,
    pub beta: f64,
    pub se: f64,
    pub phi: f64,
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub log_pl: f64,
    /// Alternating beta-step / phi-step log: entries 2i and 2i+1 share a
    /// beta value, so comparing them isolates the phi update.
    pub pl_trace: Vec<TracePoint>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Marginal variances Gamma_kk / J.
fn marginal_variances(block: &EffectBlock) -> Vec<f64> {
    (0..block.k()).map(|k| block.var_effect(k)).collect()
}

/// Pseudo-log-likelihood of (beta, phi) under B_hat ~ N(beta 1, Psi(phi)).
///
/// Fails when Psi(phi) is not positive definite, which can happen at small
/// phi because Gamma is assembled from pairwise moments and is not forced
/// to be positive semidefinite.
pub fn pseudo_loglik(beta: f64, phi: f64, block: &EffectBlock) -> Result<f64> {
    let k = block.k();
    let mut psi = block.effect_cov();
    for i in 0..k {
        psi[i * k + i] += phi;
    }
    let l = cholesky(&psi, k, "Psi(phi)")?;
    let logdet = chol_logdet(&l, k);
    let q: Vec<f64> = block.b_hat.iter().map(|b| b - beta).collect();
    let solved = chol_solve(&l, k, &q);
    let quad: f64 = q.iter().zip(&solved).map(|(a, b)| a * b).sum();
    Ok(-0.5 * (k as f64 * LN_2PI + logdet + quad))
}

/// Weighted mean of the effects with inverse marginal variance weights at
/// the given phi. Returns the pooled value and the normalized weights.
pub fn weighted_beta(phi: f64, block: &EffectBlock) -> Result<(f64, Vec<f64>)> {
    let vars = marginal_variances(block);
    let mut weights: Vec<f64> = Vec::with_capacity(vars.len());
    for (k, v) in vars.iter().enumerate() {
        let denom = v + phi;
        if !(denom > 0.0) {
            return Err(Error::Numerical(format!(
                "endpoint '{}' has nonpositive marginal variance {denom:.3e} at phi={phi:.3e}",
                block.endpoints[k]
            )));
        }
        weights.push(1.0 / denom);
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    let beta = weights.iter().zip(&block.b_hat).map(|(w, b)| w * b).sum();
    Ok((beta, weights))
}

/// Upper bracket for the phi search: generously above both the largest
/// sampling variance and the observed spread of the effects, so the
/// maximizer is interior whenever the data support any finite phi.
fn phi_upper(block: &EffectBlock) -> f64 {
    let vars = marginal_variances(block);
    let v_max = vars.iter().fold(0.0f64, |m, &v| m.max(v));
    let mean = block.b_hat.iter().sum::<f64>() / block.k() as f64;
    let spread = block
        .b_hat
        .iter()
        .fold(0.0f64, |m, &b| m.max((b - mean) * (b - mean)));
    (100.0 * v_max).max(10.0 * spread).max(1e-8)
}

/// Standard error of the weighted mean: sqrt(w' Psi(phi) w).
fn weighted_se(weights: &[f64], phi: f64, block: &EffectBlock) -> f64 {
    let k = block.k();
    let mut psi = block.effect_cov();
    for i in 0..k {
        psi[i * k + i] += phi;
    }
    quad_form(&psi, k, weights).max(0.0).sqrt()
}

/// Alternate beta and phi updates until both move less than their
/// tolerances. Exceeding the iteration budget is not an error: the result
/// comes back with `converged == false` so the caller can decide.
pub fn pool_within_cohort(block: &EffectBlock, opts: &ConvergenceOptions) -> Result<CohortPooled> {
    let k = block.k();
    if k == 0 {
        return Err(Error::Validation(
            "cannot pool an empty effect block".into(),
        ));
    }
    let pl = |beta: f64, phi: f64| pseudo_loglik(beta, phi, block).unwrap_or(f64::NEG_INFINITY);
    let phi_hi = phi_upper(block);

    let mut phi = 0.0;
    let mut beta = f64::NAN;
    let mut trace: Vec<TracePoint> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..opts.max_iter {
        iterations += 1;
        let (beta_new, _) = weighted_beta(phi, block)?;
        trace.push(TracePoint {
            beta: beta_new,
            phi,
            log_pl: pl(beta_new, phi),
        });
        let (mut phi_new, mut pl_new) =
            golden_section_max(|p| pl(beta_new, p), 0.0, phi_hi, opts.phi_search_tol, 200);
        // never let the scalar search move downhill from the incumbent
        let pl_old = pl(beta_new, phi);
        if pl_old > pl_new {
            phi_new = phi;
            pl_new = pl_old;
        }
        trace.push(TracePoint {
            beta: beta_new,
            phi: phi_new,
            log_pl: pl_new,
        });
        let done = !beta.is_nan()
            && (beta_new - beta).abs() < opts.tol_beta
            && (phi_new - phi).abs() < opts.tol_phi;
        beta = beta_new;
        phi = phi_new;
        if done {
            converged = true;
            break;
        }
    }

    let (beta_final, weights) = weighted_beta(phi, block)?;
    let se = weighted_se(&weights, phi, block);
    Ok(CohortPooled {
        cohort_id: block.cohort_id.clone(),
        endpoints: block.endpoints.clone(),
        n_rows: block.n_rows,
        beta: beta_final,
        se,
        phi,
        weights,
        iterations,
        converged,
        log_pl: pl(beta_final, phi),
        pl_trace: trace,
        warnings: block.warnings.clone(),
    })
}

/// Full-matrix generalized least squares pooling at a fixed phi.
#[derive(Debug, Clone, Serialize)]
pub struct GlsDiagnostic {
    pub beta: f64,
    pub se: f64,
    /// Generalized-inverse weights; may be negative, which is why this
    /// estimator is a diagnostic rather than the production path.
    pub weights: Vec<f64>,
}

/// Pool with the full Psi(phi) inverse: beta = (1' P 1)^{-1} 1' P B_hat
/// where P is the Moore-Penrose pseudo-inverse of Psi(phi).
pub fn gls_diagnostic(block: &EffectBlock, phi: f64) -> Result<GlsDiagnostic> {
    let k = block.k();
    let mut psi = block.effect_cov();
    for i in 0..k {
        psi[i * k + i] += phi;
    }
    let p = pinv_sym(&psi, k);
    let mut row_sums = vec![0.0; k];
    let mut total = 0.0;
    for a in 0..k {
        for b in 0..k {
            row_sums[a] += p[a * k + b];
            total += p[a * k + b];
        }
    }
    if !(total > 0.0) {
        return Err(Error::Numerical(format!(
            "generalized inverse weights do not normalize (1'P1 = {total:.3e})"
        )));
    }
    let weights: Vec<f64> = row_sums.iter().map(|r| r / total).collect();
    let beta = weights.iter().zip(&block.b_hat).map(|(w, b)| w * b).sum();
    Ok(GlsDiagnostic {
        beta,
        se: (1.0 / total).sqrt(),
        weights,
    })
}
