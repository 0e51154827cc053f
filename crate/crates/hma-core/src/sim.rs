//! Monte Carlo study of the two-stage and one-stage estimators.
//!
//! Each replicate simulates one cohort: endpoint slopes are drawn around a
//! shared exposure effect with between-endpoint variance tau2, responses
//! get correlated residuals, and both estimators are run on the result.
//! Replicates are seeded by counter, so the report is identical whether
//! the work ran on one thread or sixteen, and identical again on rerun.
//!
//! Reported per scenario and method: empirical bias of the pooled effect,
//! the average of the reported standard errors (ASE), the empirical
//! standard deviation of the estimates (ESE), and the fraction of nominal
//! 95% intervals (z = 1.96) covering the true effect, each with its Monte
//! Carlo standard error.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::data::CohortData;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, mean_sd, pairwise_sum};
use crate::onestage::{fit_onestage, OneStageOptions};
use crate::rng::{counter_rng_seed, stream_rng};
use crate::stage1::fit_cohort;
use crate::stage2::{pool_within_cohort, ConvergenceOptions};

/// Critical value of the nominal 95% intervals scored for coverage.
pub const Z_COVERAGE: f64 = 1.96;

/// Residual covariance structure of the simulated endpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SigmaSpec {
    /// Common variance and common pairwise correlation.
    Exchangeable { variance: f64, rho: f64 },
    /// Independent endpoints with per-endpoint variances.
    Diagonal { variances: Vec<f64> },
    /// Explicit row-major K x K matrix.
    Full { matrix: Vec<f64> },
}

impl SigmaSpec {
    /// Expand to a dense K x K matrix, validating dimensions and
    /// positive definiteness.
    pub fn materialize(&self, k: usize) -> Result<Vec<f64>> {
        let sigma = match self {
            SigmaSpec::Exchangeable { variance, rho } => {
                if !(*variance > 0.0) {
                    return Err(Error::Validation("sigma variance must be positive".into()));
                }
                if *rho <= -1.0 / (k.max(2) as f64 - 1.0) || *rho >= 1.0 {
                    return Err(Error::Validation(format!(
                        "exchangeable correlation {rho} is outside the positive definite range for k = {k}"
                    )));
                }
                let mut m = vec![0.0; k * k];
                for a in 0..k {
                    for b in 0..k {
                        m[a * k + b] = if a == b { *variance } else { rho * variance };
                    }
                }
                m
            }
            SigmaSpec::Diagonal { variances } => {
                if variances.len() != k {
                    return Err(Error::Validation(format!(
                        "diagonal sigma has {} entries, scenario has k = {k}",
                        variances.len()
                    )));
                }
                let mut m = vec![0.0; k * k];
                for (i, v) in variances.iter().enumerate() {
                    if !(positive_variance(*v)) {
                        return Err(Error::Validation("sigma variances must be positive".into()));
                    }
                    m[i * k + i] = *v;
                }
                m
            }
            SigmaSpec::Full { matrix } => {
                if matrix.len() != k * k {
                    return Err(Error::Validation(format!(
                        "full sigma has {} entries, expected {}",
                        matrix.len(),
                        k * k
                    )));
                }
                matrix.clone()
            }
        };
        cholesky(&sigma, k, "scenario sigma")?;
        Ok(sigma)
    }
}

fn positive_variance(v: f64) -> bool {
    v > 0.0 && v.is_finite()
}

/// Which estimators a scenario runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Methods {
    TwoStage,
    OneStage,
    Both,
}

impl Methods {
    fn runs_two_stage(self) -> bool {
        matches!(self, Methods::TwoStage | Methods::Both)
    }
    fn runs_one_stage(self) -> bool {
        matches!(self, Methods::OneStage | Methods::Both)
    }
}

/// One simulation cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    /// Number of endpoints.
    pub k: usize,
    /// Between-endpoint variance of the exposure slopes.
    pub tau2: f64,
    /// Individuals per replicate.
    pub n: usize,
    /// Monte Carlo replicates.
    pub reps: usize,
    /// Shared exposure effect the slopes are drawn around.
    pub beta_true: f64,
    /// Common endpoint intercept.
    pub alpha: f64,
    /// Common adjustment-covariate slope.
    pub gamma: f64,
    pub sigma: SigmaSpec,
    pub seed: u64,
    pub methods: Methods,
}

impl Scenario {
    /// Cell with the study defaults: 500 individuals, effect 3, unit
    /// exchangeable residuals with correlation 0.5.
    pub fn new(k: usize, tau2: f64) -> Self {
        Scenario {
            name: format!("k{k}_tau2_{tau2}"),
            k,
            tau2,
            n: 500,
            reps: 1000,
            beta_true: 3.0,
            alpha: 0.0,
            gamma: 1.0,
            sigma: SigmaSpec::Exchangeable {
                variance: 1.0,
                rho: 0.5,
            },
            seed: 42,
            methods: Methods::Both,
        }
    }
}

/// Simulate replicate `rep` of a scenario. The draw order per replicate is
/// fixed (slopes, then per individual: exposure, adjustment, residual
/// vector), so a given (seed, rep) pair always yields the same cohort.
pub fn generate_dataset(scenario: &Scenario, rep: u64) -> Result<CohortData> {
    let k = scenario.k;
    if k == 0 {
        return Err(Error::Validation(
            "scenario needs at least one endpoint".into(),
        ));
    }
    if scenario.tau2 < 0.0 {
        return Err(Error::Validation("tau2 must be nonnegative".into()));
    }
    let sigma = scenario.sigma.materialize(k)?;
    let chol = cholesky(&sigma, k, "scenario sigma")?;
    let mut rng = stream_rng(scenario.seed, rep);
    let normal = |rng: &mut rand_chacha::ChaCha12Rng| -> f64 { StandardNormal.sample(rng) };

    let slopes: Vec<f64> = (0..k)
        .map(|_| scenario.beta_true + scenario.tau2.sqrt() * normal(&mut rng))
        .collect();
    let j = scenario.n;
    let mut exposure = Vec::with_capacity(j);
    let mut propensity = Vec::with_capacity(j);
    let mut responses = Vec::with_capacity(j * k);
    let mut z = vec![0.0; k];
    for _ in 0..j {
        let x: f64 = normal(&mut rng);
        let s: f64 = normal(&mut rng);
        exposure.push(x);
        propensity.push(s);
        for zi in z.iter_mut() {
            *zi = normal(&mut rng);
        }
        for a in 0..k {
            let mut e = 0.0;
            for b in 0..=a {
                e += chol[a * k + b] * z[b];
            }
            responses.push(scenario.alpha + slopes[a] * x + scenario.gamma * s + e);
        }
    }
    CohortData::new(
        format!("{}-rep{rep}", scenario.name),
        (0..k).map(|i| format!("endpoint_{i}")).collect(),
        exposure,
        propensity,
        responses,
    )
}

#[derive(Debug, Clone, Copy, Default)]
struct RepOutcome {
    beta: f64,
    se: f64,
    phi: f64,
    converged: bool,
    failed: bool,
}

fn run_replicate(scenario: &Scenario, rep: u64) -> (Option<RepOutcome>, Option<RepOutcome>) {
    let data = match generate_dataset(scenario, rep) {
        Ok(d) => d,
        Err(_) => {
            let failed = RepOutcome {
                failed: true,
                ..RepOutcome::default()
            };
            return (
                scenario.methods.runs_two_stage().then_some(failed),
                scenario.methods.runs_one_stage().then_some(failed),
            );
        }
    };
    let two = scenario.methods.runs_two_stage().then(|| {
        fit_cohort(&data)
            .and_then(|s1| pool_within_cohort(&s1.block, &ConvergenceOptions::default()))
            .map(|pooled| RepOutcome {
                beta: pooled.beta,
                se: pooled.se,
                phi: pooled.phi,
                converged: pooled.converged,
                failed: false,
            })
            .unwrap_or(RepOutcome {
                failed: true,
                ..RepOutcome::default()
            })
    });
    let one = scenario.methods.runs_one_stage().then(|| {
        fit_onestage(&data, &OneStageOptions::default())
            .map(|fit| RepOutcome {
                beta: fit.beta,
                se: fit.se,
                phi: fit.phi,
                converged: fit.converged,
                failed: false,
            })
            .unwrap_or(RepOutcome {
                failed: true,
                ..RepOutcome::default()
            })
    });
    (two, one)
}

/// Monte Carlo summary of one estimator in one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub reps: usize,
    pub n_failed: usize,
    pub n_converged: usize,
    /// mean(beta_hat) - beta_true.
    pub ebias: f64,
    /// Mean of the reported standard errors.
    pub ase: f64,
    /// Standard deviation of the estimates (divisor reps - 1).
    pub ese: f64,
    /// Fraction of beta_hat +/- 1.96 se intervals covering beta_true.
    pub cp: f64,
    pub mean_phi: f64,
    pub mcse_ebias: f64,
    pub mcse_ase: f64,
    pub mcse_ese: f64,
    pub mcse_cp: f64,
}

fn summarize(method: &str, beta_true: f64, outcomes: &[RepOutcome]) -> MethodSummary {
    let ok: Vec<&RepOutcome> = outcomes.iter().filter(|o| !o.failed).collect();
    let r = ok.len();
    let n_failed = outcomes.len() - r;
    let betas: Vec<f64> = ok.iter().map(|o| o.beta).collect();
    let ses: Vec<f64> = ok.iter().map(|o| o.se).collect();
    let phis: Vec<f64> = ok.iter().map(|o| o.phi).collect();
    let (mean_beta, ese) = mean_sd(&betas);
    let (ase, sd_se) = mean_sd(&ses);
    let covered = ok
        .iter()
        .filter(|o| (o.beta - beta_true).abs() <= Z_COVERAGE * o.se)
        .count();
    let cp = covered as f64 / r as f64;
    let rf = r as f64;
    MethodSummary {
        method: method.to_string(),
        reps: outcomes.len(),
        n_failed,
        n_converged: ok.iter().filter(|o| o.converged).count(),
        ebias: mean_beta - beta_true,
        ase,
        ese,
        cp,
        mean_phi: pairwise_sum(&phis) / rf,
        mcse_ebias: ese / rf.sqrt(),
        mcse_ase: sd_se / rf.sqrt(),
        mcse_ese: ese / (2.0 * (rf - 1.0)).sqrt(),
        mcse_cp: (cp * (1.0 - cp) / rf).sqrt(),
    }
}

/// Results of one scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub scenario: Scenario,
    pub two_stage: Option<MethodSummary>,
    pub one_stage: Option<MethodSummary>,
}

fn collect_outcomes(
    scenario: &Scenario,
    outcomes: Vec<(Option<RepOutcome>, Option<RepOutcome>)>,
) -> ScenarioResult {
    let two: Vec<RepOutcome> = outcomes.iter().filter_map(|(t, _)| *t).collect();
    let one: Vec<RepOutcome> = outcomes.iter().filter_map(|(_, o)| *o).collect();
    ScenarioResult {
        scenario: scenario.clone(),
        two_stage: (!two.is_empty()).then(|| summarize("two_stage", scenario.beta_true, &two)),
        one_stage: (!one.is_empty()).then(|| summarize("one_stage", scenario.beta_true, &one)),
    }
}

/// Run a scenario on the current thread.
pub fn run_scenario_seq(scenario: &Scenario) -> Result<ScenarioResult> {
    if scenario.reps < 2 {
        return Err(Error::Validation(
            "a scenario needs at least 2 replicates".into(),
        ));
    }
    let outcomes: Vec<_> = (0..scenario.reps as u64)
        .map(|rep| run_replicate(scenario, rep))
        .collect();
    Ok(collect_outcomes(scenario, outcomes))
}

/// Run a scenario, spreading replicates over the rayon pool when the
/// `parallel` feature is active. Identical output to [`run_scenario_seq`].
#[cfg(feature = "parallel")]
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioResult> {
    if scenario.reps < 2 {
        return Err(Error::Validation(
            "a scenario needs at least 2 replicates".into(),
        ));
    }
    let outcomes: Vec<_> = (0..scenario.reps as u64)
        .into_par_iter()
        .map(|rep| run_replicate(scenario, rep))
        .collect();
    Ok(collect_outcomes(scenario, outcomes))
}

/// Run a scenario, spreading replicates over the rayon pool when the
/// `parallel` feature is active. Identical output to [`run_scenario_seq`].
#[cfg(not(feature = "parallel"))]
pub fn run_scenario(scenario: &Scenario) -> Result<ScenarioResult> {
    run_scenario_seq(scenario)
}

/// The 3 x 3 study grid: k in {3, 5, 10} by tau2 in {0.10, 0.25, 0.50}.
/// `template` supplies everything except k, tau2, name, and seed; each
/// cell gets an independent seed derived from the template seed.
pub fn run_scenario_grid(template: &Scenario) -> Result<Vec<ScenarioResult>> {
    let ks = [3usize, 5, 10];
    let tau2s = [0.10, 0.25, 0.50];
    let mut results = Vec::with_capacity(9);
    let mut cell = 0u64;
    for &tau2 in &tau2s {
        for &k in &ks {
            let scenario = Scenario {
                name: format!("k{k}_tau2_{tau2:.2}"),
                k,
                tau2,
                seed: counter_rng_seed(template.seed, 0xC0FFEE ^ cell),
                ..template.clone()
            };
            results.push(run_scenario(&scenario)?);
            cell += 1;
        }
    }
    Ok(results)
}

/// Render grid results as CSV with fixed six-decimal formatting, one row
/// per scenario and method.
pub fn grid_to_csv(results: &[ScenarioResult]) -> String {
    let mut out = String::from(
        "scenario,k,tau2,method,reps,n_failed,n_converged,ebias,ase,ese,cp,mean_phi,mcse_ebias,mcse_ase,mcse_ese,mcse_cp\n",
    );
    for r in results {
        for summary in [&r.two_stage, &r.one_stage].into_iter().flatten() {
            out.push_str(&format!(
                "{},{},{:.2},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.scenario.name,
                r.scenario.k,
                r.scenario.tau2,
                summary.method,
                summary.reps,
                summary.n_failed,
                summary.n_converged,
                summary.ebias,
                summary.ase,
                summary.ese,
                summary.cp,
                summary.mean_phi,
                summary.mcse_ebias,
                summary.mcse_ase,
                summary.mcse_ese,
                summary.mcse_cp,
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn generation_is_deterministic_per_counter() {
        let scenario = Scenario::new(3, 0.25);
        let a = generate_dataset(&scenario, 11).unwrap();
        let b = generate_dataset(&scenario, 11).unwrap();
        assert_eq!(a.exposure, b.exposure);
        assert_eq!(a.responses, b.responses);
        let c = generate_dataset(&scenario, 12).unwrap();
        assert_ne!(a.responses, c.responses);
    }

    #[test]
    fn generated_moments_match_the_recipe() {
        let mut scenario = Scenario::new(4, 0.0);
        scenario.n = 4000;
        scenario.alpha = 2.0;
        scenario.gamma = 1.0;
        let data = generate_dataset(&scenario, 0).unwrap();
        // with tau2 = 0 every slope equals beta_true; regress endpoint 0
        // residuals should have variance near 1
        let (mx, sx) = mean_sd(&data.exposure);
        assert!(mx.abs() < 0.1);
        assert_relative_eq!(sx, 1.0, epsilon = 0.06);
        let y0: Vec<f64> = (0..data.n_rows())
            .map(|j| data.response(j, 0).unwrap())
            .collect();
        let fitted: Vec<f64> = (0..data.n_rows())
            .map(|j| 2.0 + 3.0 * data.exposure[j] + 1.0 * data.propensity[j])
            .collect();
        let resid: Vec<f64> = y0.iter().zip(&fitted).map(|(y, f)| y - f).collect();
        let (mr, sr) = mean_sd(&resid);
        assert!(mr.abs() < 0.06, "residual mean {mr}");
        assert_relative_eq!(sr, 1.0, epsilon = 0.08);
    }

    #[test]
    fn exchangeable_sigma_respects_rho_bounds() {
        let bad = SigmaSpec::Exchangeable {
            variance: 1.0,
            rho: -0.6,
        };
        assert!(bad.materialize(4).is_err());
        let good = SigmaSpec::Exchangeable {
            variance: 1.0,
            rho: 0.5,
        };
        let m = good.materialize(3).unwrap();
        assert_relative_eq!(m[1], 0.5);
        assert_relative_eq!(m[4], 1.0);
    }

    #[test]
    fn small_scenario_runs_and_summarizes() {
        let mut scenario = Scenario::new(3, 0.25);
        scenario.reps = 24;
        scenario.n = 120;
        scenario.methods = Methods::TwoStage;
        let result = run_scenario_seq(&scenario).unwrap();
        let two = result.two_stage.expect("two-stage summary");
        assert!(result.one_stage.is_none());
        assert_eq!(two.reps, 24);
        assert_eq!(two.n_failed, 0);
        assert!(two.ebias.abs() < 1.0);
        assert!(two.ase > 0.0 && two.ese > 0.0);
        assert!(two.cp >= 0.0 && two.cp <= 1.0);
    }

    #[test]
    fn parallel_and_sequential_agree_bit_for_bit() {
        let mut scenario = Scenario::new(2, 0.1);
        scenario.reps = 10;
        scenario.n = 80;
        scenario.methods = Methods::TwoStage;
        let a = run_scenario(&scenario).unwrap();
        let b = run_scenario_seq(&scenario).unwrap();
        let (sa, sb) = (a.two_stage.unwrap(), b.two_stage.unwrap());
        assert_eq!(sa.ebias.to_bits(), sb.ebias.to_bits());
        assert_eq!(sa.ase.to_bits(), sb.ase.to_bits());
        assert_eq!(sa.ese.to_bits(), sb.ese.to_bits());
        assert_eq!(sa.cp.to_bits(), sb.cp.to_bits());
    }

    #[test]
    fn csv_rendering_is_stable() {
        let mut scenario = Scenario::new(2, 0.1);
        scenario.reps = 6;
        scenario.n = 60;
        scenario.methods = Methods::TwoStage;
        let result = run_scenario(&scenario).unwrap();
        let a = grid_to_csv(std::slice::from_ref(&result));
        let b = grid_to_csv(std::slice::from_ref(&result));
        assert_eq!(a, b);
        assert!(a.starts_with("scenario,k,tau2,method"));
        assert_eq!(a.lines().count(), 2);
    }
}
