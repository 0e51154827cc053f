//! First stage: per-endpoint regressions and the joint covariance of the
//! resulting effect estimates under endpoint-wise missingness.
//!
//! Every endpoint k is regressed on (intercept, exposure, propensity) over
//! the rows where that endpoint is observed. The exposure coefficients
//! b_hat = (theta_1)_k across endpoints are the effect estimates handed to
//! the pooling stages. Because different endpoints are observed on
//! overlapping but unequal subsets, the covariance between b_hat_k and
//! b_hat_l is not the complete-data one: the residual cross moment is
//! computed on the n_kl jointly observed rows and enters scaled by
//! J * n_kl / (n_k * n_l). With complete data (n_k = n_l = n_kl = J) the
//! factor collapses to 1/J and the usual OLS covariance reappears.
//!
//! Variance estimates use maximum likelihood divisors (n_k, not n_k - 3),
//! so software that applies degree-of-freedom corrections will report
//! slightly larger values on small cohorts.

use serde::Serialize;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::data::{CohortData, EffectBlock, EndpointFit, MIN_OBS_PER_ENDPOINT};
use crate::error::{Error, Result};
use crate::linalg::{inv_sym_rank_revealing, pairwise_sum, solve_sym_rank_revealing};

/// Pairwise residual covariance of the endpoint fits.
#[derive(Debug, Clone, Serialize)]
pub struct ResidualCovariance {
    pub endpoints: Vec<String>,
    /// Row-major K x K matrix; entry (k, l) averages residual products
    /// over the jointly observed rows with divisor n_kl.
    pub sigma: Vec<f64>,
    /// Row-major K x K joint observation counts.
    pub n_pairwise: Vec<usize>,
    pub warnings: Vec<String>,
}

impl ResidualCovariance {
    pub fn k(&self) -> usize {
        self.endpoints.len()
    }
}

/// Second moment of the design shared by all endpoints.
#[derive(Debug, Clone)]
pub struct DesignMoment {
    /// Row-major 3 x 3 average of X X' over all J rows, X = (1, A, S).
    pub omega: [f64; 9],
    /// Its inverse.
    pub omega_inv: [f64; 9],
    pub n_rows: usize,
}

impl DesignMoment {
    /// The (exposure, exposure) entry of omega inverse, the factor that
    /// maps residual (co)variances onto effect (co)variances.
    pub fn exposure_precision(&self) -> f64 {
        self.omega_inv[4]
    }
}

fn design_row(data: &CohortData, j: usize) -> [f64; 3] {
    [1.0, data.exposure[j], data.propensity[j]]
}

/// Ordinary least squares for endpoint `k` over its observed rows.
pub fn fit_endpoint(data: &CohortData, k: usize) -> Result<EndpointFit> {
    let name = data.endpoint_names[k].clone();
    let n_obs = data.n_observed(k);
    if n_obs < MIN_OBS_PER_ENDPOINT {
        return Err(Error::Validation(format!(
            "endpoint '{name}' has only {n_obs} observed cells; at least {MIN_OBS_PER_ENDPOINT} are required"
        )));
    }
    let mut xtx = [0.0f64; 9];
    let mut xty = [0.0f64; 3];
    for j in 0..data.n_rows() {
        let Some(y) = data.response(j, k) else {
            continue;
        };
        let x = design_row(data, j);
        for a in 0..3 {
            for b in 0..3 {
                xtx[a * 3 + b] += x[a] * x[b];
            }
            xty[a] += x[a] * y;
        }
    }
    let theta_vec = solve_sym_rank_revealing(&xtx, 3, &xty, &format!("endpoint '{name}' design"))?;
    let theta = [theta_vec[0], theta_vec[1], theta_vec[2]];

    let mut residuals = vec![f64::NAN; data.n_rows()];
    let mut ss = Vec::with_capacity(n_obs);
    for j in 0..data.n_rows() {
        if let Some(y) = data.response(j, k) {
            let x = design_row(data, j);
            let r = y - (theta[0] * x[0] + theta[1] * x[1] + theta[2] * x[2]);
            residuals[j] = r;
            ss.push(r * r);
        }
    }
    let sigma2 = pairwise_sum(&ss) / n_obs as f64;
    Ok(EndpointFit {
        endpoint: name,
        theta,
        sigma2,
        n_obs,
        residuals,
    })
}

/// Fit every endpoint sequentially.
pub fn fit_all_endpoints_seq(data: &CohortData) -> Result<Vec<EndpointFit>> {
    (0..data.n_endpoints())
        .map(|k| fit_endpoint(data, k))
        .collect()
}

/// Fit every endpoint, in parallel when the `parallel` feature is active.
#[cfg(feature = "parallel")]
pub fn fit_all_endpoints(data: &CohortData) -> Result<Vec<EndpointFit>> {
    (0..data.n_endpoints())
        .into_par_iter()
        .map(|k| fit_endpoint(data, k))
        .collect()
}

/// Fit every endpoint, in parallel when the `parallel` feature is active.
#[cfg(not(feature = "parallel"))]
pub fn fit_all_endpoints(data: &CohortData) -> Result<Vec<EndpointFit>> {
    fit_all_endpoints_seq(data)
}

/// Pairwise residual covariance over jointly observed rows.
///
/// Pairs with zero overlap get covariance 0 and a warning rather than an
/// error: the pooled analysis can proceed treating those estimates as
/// uncorrelated, which is the only information the data carry. A pair
/// whose covariance breaches the Cauchy-Schwarz bound implied by the
/// marginal variances is also flagged; this can happen legitimately
/// because each moment is averaged over a different row subset.
pub fn estimate_residual_covariance(fits: &[EndpointFit]) -> ResidualCovariance {
    let k = fits.len();
    let j = fits.first().map(|f| f.residuals.len()).unwrap_or(0);
    let mut sigma = vec![0.0; k * k];
    let mut n_pairwise = vec![0usize; k * k];
    let mut warnings = Vec::new();
    for a in 0..k {
        debug_assert_eq!(fits[a].residuals.len(), j);
        for b in a..k {
            let mut products = Vec::new();
            for row in 0..j {
                let ra = fits[a].residuals[row];
                let rb = fits[b].residuals[row];
                if !ra.is_nan() && !rb.is_nan() {
                    products.push(ra * rb);
                }
            }
            let n_ab = products.len();
            n_pairwise[a * k + b] = n_ab;
            n_pairwise[b * k + a] = n_ab;
            let cov = if n_ab == 0 {
                warnings.push(format!(
                    "endpoints '{}' and '{}' share no observed rows; covariance set to 0",
                    fits[a].endpoint, fits[b].endpoint
                ));
                0.0
            } else {
                pairwise_sum(&products) / n_ab as f64
            };
            sigma[a * k + b] = cov;
            sigma[b * k + a] = cov;
        }
    }
    for a in 0..k {
        for b in (a + 1)..k {
            let bound = (sigma[a * k + a] * sigma[b * k + b]).sqrt();
            if sigma[a * k + b].abs() > bound * (1.0 + 1e-12) {
                warnings.push(format!(
                    "residual covariance of '{}' and '{}' ({:.6}) exceeds the Cauchy-Schwarz bound ({:.6}); caused by differing observation subsets",
                    fits[a].endpoint, fits[b].endpoint, sigma[a * k + b], bound
                ));
            }
        }
    }
    ResidualCovariance {
        endpoints: fits.iter().map(|f| f.endpoint.clone()).collect(),
        sigma,
        n_pairwise,
        warnings,
    }
}

/// Average design second moment over all rows, with its inverse.
pub fn design_moment(data: &CohortData) -> Result<DesignMoment> {
    let j = data.n_rows();
    let mut omega = [0.0f64; 9];
    for row in 0..j {
        let x = design_row(data, row);
        for a in 0..3 {
            for b in 0..3 {
                omega[a * 3 + b] += x[a] * x[b];
            }
        }
    }
    for v in omega.iter_mut() {
        *v /= j as f64;
    }
    let inv = inv_sym_rank_revealing(
        &omega,
        3,
        &format!("design moment of cohort '{}'", data.cohort_id),
    )?;
    let mut omega_inv = [0.0f64; 9];
    omega_inv.copy_from_slice(&inv);
    Ok(DesignMoment {
        omega,
        omega_inv,
        n_rows: j,
    })
}

/// Assemble the effect estimates and their scaled covariance.
///
/// `gamma[k][l]` estimates `Cov(sqrt(J) b_hat_k, sqrt(J) b_hat_l)` as
/// `sigma_kl * [omega_inv]_(A,A) * J * n_kl / (n_k * n_l)`; divide by J
/// (see [`EffectBlock::effect_cov`]) for the covariance of b_hat itself.
pub fn effect_covariance(
    data: &CohortData,
    fits: &[EndpointFit],
    rescov: &ResidualCovariance,
    moment: &DesignMoment,
) -> EffectBlock {
    let k = fits.len();
    let j = moment.n_rows as f64;
    debug_assert_eq!(data.n_rows(), moment.n_rows);
    let precision = moment.exposure_precision();
    let mut gamma = vec![0.0; k * k];
    for a in 0..k {
        for b in a..k {
            let n_ab = rescov.n_pairwise[a * k + b] as f64;
            let adj = j * n_ab / (fits[a].n_obs as f64 * fits[b].n_obs as f64);
            let value = rescov.sigma[a * k + b] * precision * adj;
            gamma[a * k + b] = value;
            gamma[b * k + a] = value;
        }
    }
    let mut warnings = data.warnings.clone();
    warnings.extend(rescov.warnings.iter().cloned());
    EffectBlock {
        cohort_id: data.cohort_id.clone(),
        endpoints: fits.iter().map(|f| f.endpoint.clone()).collect(),
        b_hat: fits.iter().map(|f| f.effect()).collect(),
        gamma,
        n_rows: moment.n_rows,
        n_obs: fits.iter().map(|f| f.n_obs).collect(),
        n_pairwise: rescov.n_pairwise.clone(),
        warnings,
    }
}

/// Everything the first stage produces for one cohort.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    pub fits: Vec<EndpointFit>,
    pub residual_cov: ResidualCovariance,
    pub moment: DesignMoment,
    pub block: EffectBlock,
}

/// Run the full first stage on one cohort.
pub fn fit_cohort(data: &CohortData) -> Result<Stage1Output> {
    let fits = fit_all_endpoints(data)?;
    let residual_cov = estimate_residual_covariance(&fits);
    let moment = design_moment(data)?;
    let block = effect_covariance(data, &fits, &residual_cov, &moment);
    Ok(Stage1Output {
        fits,
        residual_cov,
        moment,
        block,
    })
}
