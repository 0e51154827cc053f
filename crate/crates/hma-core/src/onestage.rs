//! One-stage comparator: a marginal mixed model fitted to the stacked
//! individual-level data of one cohort.
//!
//! Each endpoint keeps its own intercept and adjustment slope while the
//! exposure effect beta is shared. The endpoint-specific deviation of the
//! exposure slope is a random effect with variance phi, independent across
//! endpoints, and the residual vector of an individual is correlated
//! across endpoints with covariance Sigma. Marginalizing the random slope
//! within an individual gives
//!
//! ```text
//! V_j = Sigma[O_j, O_j] + phi * A_j^2 * I
//! ```
//!
//! on that individual's observed endpoint set O_j, and individuals enter
//! the likelihood independently. For fixed (Sigma, phi) all fixed effects
//! are profiled out in closed form by generalized least squares; the outer
//! search over the Cholesky factor of Sigma (log-diagonal encoding) and a
//! sign-free square-root encoding of phi is a bounded Nelder-Mead run from
//! a two-stage warm start plus a fixed number of seeded random restarts.
//!
//! The standard error of beta comes from the curvature of the profile
//! log-likelihood in beta, estimated by central finite differences with
//! the variance parameters held at their estimates; this matches the usual
//! mixed-model convention of conditioning on fitted variance components.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CohortData;
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, chol_solve, cholesky, pairwise_sum, sym_eigen};
use crate::optim::{nelder_mead_min, SimplexFit};
use crate::rng::stream_rng;
use crate::stage1::fit_cohort;
use crate::stage2::{pool_within_cohort, ConvergenceOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Hard cap on endpoints: beyond this the outer search space grows past
/// what a simplex method handles reliably.
pub const MAX_ONESTAGE_ENDPOINTS: usize = 12;

/// Full parameter set of the marginal model.
#[derive(Debug, Clone, Serialize)]
pub struct OneStageParams {
    /// Per-endpoint intercepts, length K.
    pub alpha: Vec<f64>,
    /// Per-endpoint adjustment slopes, length K.
    pub gamma: Vec<f64>,
    /// Shared exposure effect.
    pub beta: f64,
    /// Variance of the endpoint-specific exposure slope deviation.
    pub phi: f64,
    /// Row-major K x K residual covariance.
    pub sigma: Vec<f64>,
}

/// Search controls for [`fit_onestage`].
#[derive(Debug, Clone)]
pub struct OneStageOptions {
    /// Random restarts around the warm start, in addition to the warm
    /// start run itself.
    pub restarts: usize,
    /// Seed for the restart perturbations.
    pub seed: u64,
    /// Nelder-Mead iteration budget per start.
    pub nm_max_iter: usize,
    pub nm_tol_f: f64,
    pub nm_tol_x: f64,
    /// Fix phi at this value instead of estimating it.
    pub pin_phi: Option<f64>,
}

impl Default for OneStageOptions {
    fn default() -> Self {
        OneStageOptions {
            restarts: 5,
            seed: 7,
            nm_max_iter: 4000,
            nm_tol_f: 1e-10,
            nm_tol_x: 1e-8,
            pin_phi: None,
        }
    }
}

/// Fitted one-stage model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OneStageFit {
    pub cohort_id: String,
    pub endpoints: Vec<String>,
    pub beta: f64,
    pub se: f64,
    pub phi: f64,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    /// Row-major K x K residual covariance at the optimum.
    pub sigma: Vec<f64>,
    pub loglik: f64,
    /// Total Nelder-Mead iterations across all starts.
    pub iterations: usize,
    pub converged: bool,
}

/// Marginal log-likelihood of the full parameter set on one cohort.
pub fn marginal_loglik(params: &OneStageParams, data: &CohortData) -> Result<f64> {
    let k = data.n_endpoints();
    if params.alpha.len() != k || params.gamma.len() != k || params.sigma.len() != k * k {
        return Err(Error::Validation(
            "one-stage parameter dimensions do not match the data".into(),
        ));
    }
    if params.phi < 0.0 {
        return Err(Error::Validation("phi must be nonnegative".into()));
    }
    let mut total = Vec::with_capacity(data.n_rows());
    let mut obs = Vec::with_capacity(k);
    for j in 0..data.n_rows() {
        obs.clear();
        for kk in 0..k {
            if data.observed(j, kk) {
                obs.push(kk);
            }
        }
        if obs.is_empty() {
            continue;
        }
        let m = obs.len();
        let a = data.exposure[j];
        let s = data.propensity[j];
        let mut v = vec![0.0; m * m];
        for (ai, &ka) in obs.iter().enumerate() {
            for (bi, &kb) in obs.iter().enumerate() {
                v[ai * m + bi] = params.sigma[ka * k + kb];
            }
            v[ai * m + ai] += params.phi * a * a;
        }
        let l = cholesky(&v, m, "one-stage V_j")?;
        let mut resid = Vec::with_capacity(m);
        for &kk in &obs {
            let mu = params.alpha[kk] + params.beta * a + params.gamma[kk] * s;
            resid.push(data.response(j, kk).unwrap() - mu);
        }
        let solved = chol_solve(&l, m, &resid);
        let quad: f64 = resid.iter().zip(&solved).map(|(r, x)| r * x).sum();
        total.push(-0.5 * (m as f64 * LN_2PI + chol_logdet(&l, m) + quad));
    }
    Ok(pairwise_sum(&total))
}

/// Solve for the fixed effects by generalized least squares at fixed
/// (sigma, phi), returning `(alpha, gamma, beta, loglik)`. When
/// `fixed_beta` is given, beta stays at that value and only the intercepts
/// and adjustment slopes are solved, which is what the profile-curvature
/// standard error needs.
fn profile_fixed_effects(
    data: &CohortData,
    sigma: &[f64],
    phi: f64,
    fixed_beta: Option<f64>,
) -> Result<(Vec<f64>, Vec<f64>, f64, f64)> {
    let k = data.n_endpoints();
    let p = if fixed_beta.is_some() {
        2 * k
    } else {
        2 * k + 1
    };
    let mut normal = vec![0.0; p * p];
    let mut rhs = vec![0.0; p];

    // cache per-row Cholesky factors and observed sets for the second pass
    let mut factors: Vec<(Vec<usize>, Vec<f64>)> = Vec::with_capacity(data.n_rows());
    let mut logdets = Vec::with_capacity(data.n_rows());

    for j in 0..data.n_rows() {
        let mut obs = Vec::new();
        for kk in 0..k {
            if data.observed(j, kk) {
                obs.push(kk);
            }
        }
        if obs.is_empty() {
            factors.push((obs, Vec::new()));
            continue;
        }
        let m = obs.len();
        let a = data.exposure[j];
        let s = data.propensity[j];
        let mut v = vec![0.0; m * m];
        for (ai, &ka) in obs.iter().enumerate() {
            for (bi, &kb) in obs.iter().enumerate() {
                v[ai * m + bi] = sigma[ka * k + kb];
            }
            v[ai * m + ai] += phi * a * a;
        }
        let l = cholesky(&v, m, "one-stage V_j")?;
        logdets.push(chol_logdet(&l, m));

        // design row for observed endpoint ka: alpha_ka + gamma_ka * s (+ beta * a)
        let mut y = Vec::with_capacity(m);
        for &kk in &obs {
            let mut val = data.response(j, kk).unwrap();
            if let Some(b) = fixed_beta {
                val -= b * a;
            }
            y.push(val);
        }
        // W = V^{-1} D computed column-wise through the factor; D is sparse,
        // column indices: kk (alpha), k + kk (gamma), and 2k (beta)
        let col_of = |slot: usize, kk: usize| -> usize {
            match slot {
                0 => kk,
                1 => k + kk,
                _ => 2 * k,
            }
        };
        let n_slots = if fixed_beta.is_some() { 2 } else { 3 };
        // build dense D (m x p) on the observed block
        let mut d = vec![0.0; m * p];
        for (ai, &kk) in obs.iter().enumerate() {
            d[ai * p + col_of(0, kk)] = 1.0;
            d[ai * p + col_of(1, kk)] = s;
            if n_slots == 3 {
                d[ai * p + col_of(2, kk)] = a;
            }
        }
        // solve V w = d_col for every column the block touches
        let mut wd = vec![0.0; m * p];
        let mut touched: Vec<usize> = Vec::with_capacity(2 * m + 1);
        for &kk in &obs {
            touched.push(col_of(0, kk));
            touched.push(col_of(1, kk));
        }
        if n_slots == 3 {
            touched.push(2 * k);
        }
        for &col in &touched {
            let column: Vec<f64> = (0..m).map(|r| d[r * p + col]).collect();
            let solved = chol_solve(&l, m, &column);
            for r in 0..m {
                wd[r * p + col] = solved[r];
            }
        }
        for &ca in &touched {
            for &cb in &touched {
                if cb < ca {
                    continue;
                }
                let mut acc = 0.0;
                for r in 0..m {
                    acc += d[r * p + ca] * wd[r * p + cb];
                }
                normal[ca * p + cb] += acc;
                if ca != cb {
                    normal[cb * p + ca] += acc;
                }
            }
        }
        for &col in &touched {
            let mut acc = 0.0;
            for r in 0..m {
                acc += wd[r * p + col] * y[r];
            }
            rhs[col] += acc;
        }
        factors.push((obs, l));
    }

    let nl = cholesky(&normal, p, "one-stage normal equations")?;
    let theta = chol_solve(&nl, p, &rhs);

    let beta = fixed_beta.unwrap_or_else(|| theta[2 * k]);
    let alpha: Vec<f64> = theta[..k].to_vec();
    let gamma: Vec<f64> = theta[k..2 * k].to_vec();

    // second pass: log-likelihood at the solved fixed effects
    let mut terms = Vec::with_capacity(data.n_rows());
    let mut logdet_iter = logdets.into_iter();
    for (j, (obs, l)) in factors.iter().enumerate() {
        if obs.is_empty() {
            continue;
        }
        let m = obs.len();
        let a = data.exposure[j];
        let s = data.propensity[j];
        let mut resid = Vec::with_capacity(m);
        for &kk in obs {
            let mu = alpha[kk] + beta * a + gamma[kk] * s;
            resid.push(data.response(j, kk).unwrap() - mu);
        }
        let solved = chol_solve(l, m, &resid);
        let quad: f64 = resid.iter().zip(&solved).map(|(r, x)| r * x).sum();
        let logdet = logdet_iter.next().unwrap();
        terms.push(-0.5 * (m as f64 * LN_2PI + logdet + quad));
    }
    let loglik = pairwise_sum(&terms);
    Ok((alpha, gamma, beta, loglik))
}

/// Encoding of the outer search space: lower-triangular Cholesky factor of
/// Sigma with log diagonal, then sqrt(phi) unless phi is pinned.
struct Encoding {
    k: usize,
    pin_phi: Option<f64>,
}

impl Encoding {
    fn dim(&self) -> usize {
        self.k * (self.k + 1) / 2 + usize::from(self.pin_phi.is_none())
    }

    fn decode(&self, u: &[f64]) -> (Vec<f64>, f64) {
        let k = self.k;
        let mut l = vec![0.0; k * k];
        let mut idx = 0;
        for i in 0..k {
            for j in 0..=i {
                l[i * k + j] = if i == j {
                    u[idx].clamp(-40.0, 40.0).exp()
                } else {
                    u[idx].clamp(-1e6, 1e6)
                };
                idx += 1;
            }
        }
        let mut sigma = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let mut acc = 0.0;
                for c in 0..=i.min(j) {
                    acc += l[i * k + c] * l[j * k + c];
                }
                sigma[i * k + j] = acc;
            }
        }
        let phi = match self.pin_phi {
            Some(p) => p,
            None => {
                let root = u[self.dim() - 1].clamp(-1e6, 1e6);
                root * root
            }
        };
        (sigma, phi)
    }

    fn encode(&self, sigma_chol: &[f64], phi: f64) -> Vec<f64> {
        let k = self.k;
        let mut u = Vec::with_capacity(self.dim());
        for i in 0..k {
            for j in 0..=i {
                let v = sigma_chol[i * k + j];
                u.push(if i == j { v.max(1e-12).ln() } else { v });
            }
        }
        if self.pin_phi.is_none() {
            u.push(phi.max(0.0).sqrt());
        }
        u
    }
}

/// Project a symmetric matrix onto the positive definite cone by flooring
/// its eigenvalues, then return the Cholesky factor.
fn psd_chol(sigma: &[f64], k: usize) -> Vec<f64> {
    let (evals, q) = sym_eigen(sigma, k);
    let lmax = evals.first().copied().unwrap_or(1.0).max(1e-12);
    let floor = 1e-6 * lmax;
    let mut fixed = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut acc = 0.0;
            for c in 0..k {
                acc += q[i * k + c] * q[j * k + c] * evals[c].max(floor);
            }
            fixed[i * k + j] = acc;
            fixed[j * k + i] = acc;
        }
    }
    cholesky(&fixed, k, "psd projection").expect("floored matrix is positive definite")
}

/// Two-stage warm start: residual covariance from the per-endpoint fits
/// and the pooled heterogeneity variance.
fn warm_start(data: &CohortData) -> Result<(Vec<f64>, f64)> {
    let stage1 = fit_cohort(data)?;
    let phi = match pool_within_cohort(&stage1.block, &ConvergenceOptions::default()) {
        Ok(pooled) => pooled.phi,
        Err(_) => 0.0,
    };
    Ok((stage1.residual_cov.sigma, phi))
}

/// Fit the one-stage model.
pub fn fit_onestage(data: &CohortData, opts: &OneStageOptions) -> Result<OneStageFit> {
    let k = data.n_endpoints();
    if k > MAX_ONESTAGE_ENDPOINTS {
        return Err(Error::Validation(format!(
            "one-stage comparator supports at most {MAX_ONESTAGE_ENDPOINTS} endpoints, got {k}"
        )));
    }
    if let Some(p) = opts.pin_phi {
        if p < 0.0 {
            return Err(Error::Validation("pinned phi must be nonnegative".into()));
        }
    }
    let (sigma_warm, phi_warm) = warm_start(data)?;
    let enc = Encoding {
        k,
        pin_phi: opts.pin_phi,
    };
    let chol_warm = psd_chol(&sigma_warm, k);
    let u_warm = enc.encode(&chol_warm, opts.pin_phi.unwrap_or(phi_warm));

    let objective = |u: &[f64]| -> f64 {
        let (sigma, phi) = enc.decode(u);
        match profile_fixed_effects(data, &sigma, phi, None) {
            Ok((_, _, _, ll)) => -ll,
            Err(_) => f64::INFINITY,
        }
    };

    let mut starts = vec![u_warm.clone()];
    for r in 0..opts.restarts {
        let mut rng = stream_rng(opts.seed, r as u64);
        let mut chol = chol_warm.clone();
        for v in chol.iter_mut() {
            *v *= 0.5 + rng.gen::<f64>();
        }
        let phi_r = opts.pin_phi.unwrap_or(phi_warm * (0.5 + rng.gen::<f64>()));
        starts.push(enc.encode(&chol, phi_r));
    }

    let scale = {
        let mean_logdiag: f64 = (0..k)
            .map(|i| chol_warm[i * k + i].max(1e-12).ln())
            .sum::<f64>()
            / k as f64;
        mean_logdiag.exp()
    };
    let mut steps = Vec::with_capacity(enc.dim());
    for i in 0..k {
        for j in 0..=i {
            steps.push(if i == j { 0.25 } else { 0.25 * scale });
        }
    }
    if opts.pin_phi.is_none() {
        steps.push(0.25 * scale.max(1e-3));
    }

    let mut best: Option<SimplexFit> = None;
    let mut iterations = 0;
    for start in &starts {
        let fit = nelder_mead_min(
            objective,
            start,
            &steps,
            opts.nm_tol_f,
            opts.nm_tol_x,
            opts.nm_max_iter,
        );
        iterations += fit.iterations;
        let better = match &best {
            None => true,
            Some(b) => fit.fx < b.fx,
        };
        if better {
            best = Some(fit);
        }
    }
    let best = best.expect("at least one start");
    if !best.fx.is_finite() {
        return Err(Error::Numerical(
            "one-stage likelihood is not finite at any probed variance configuration".into(),
        ));
    }
    let converged = best.converged;
    let (sigma, phi) = enc.decode(&best.x);
    let (alpha, gamma, beta, loglik) = profile_fixed_effects(data, &sigma, phi, None)?;

    // profile curvature in beta with variance parameters held fixed
    let h = 1e-4 * (1.0 + beta.abs());
    let ll_plus = profile_fixed_effects(data, &sigma, phi, Some(beta + h))?.3;
    let ll_minus = profile_fixed_effects(data, &sigma, phi, Some(beta - h))?.3;
    let curvature = (2.0 * loglik - ll_plus - ll_minus) / (h * h);
    if !(curvature > 0.0) {
        return Err(Error::Numerical(format!(
            "profile log-likelihood is flat in beta (curvature {curvature:.3e}); no standard error"
        )));
    }
    let se = (1.0 / curvature).sqrt();

    Ok(OneStageFit {
        cohort_id: data.cohort_id.clone(),
        endpoints: data.endpoint_names.clone(),
        beta,
        se,
        phi,
        alpha,
        gamma,
        sigma,
        loglik,
        iterations,
        converged,
    })
}
