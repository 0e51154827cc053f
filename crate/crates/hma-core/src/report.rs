//! Report assembly: JSON-serializable result bundles and aligned text
//! summaries for terminal output.

use serde::{Deserialize, Serialize};

use crate::data::{EffectBlock, StandardizationRecord};
use crate::onestage::OneStageFit;
use crate::stage1::Stage1Output;
use crate::stage2::CohortPooled;
use crate::stage3::GlobalPooled;

/// Per-endpoint line of the first-stage report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointSummary {
    pub name: String,
    pub intercept: f64,
    pub effect: f64,
    pub adjustment: f64,
    pub se_effect: f64,
    pub sigma2: f64,
    pub n_obs: usize,
}

/// Everything the first stage learned about one cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Stage1Report {
    pub cohort_id: String,
    pub n_rows: usize,
    pub standardization: Option<StandardizationRecord>,
    pub endpoints: Vec<EndpointSummary>,
    /// Row-major K x K scaled covariance of the effects.
    pub gamma: Vec<f64>,
    pub n_pairwise: Vec<usize>,
    pub warnings: Vec<String>,
}

impl Stage1Report {
    pub fn new(out: &Stage1Output, standardization: Option<StandardizationRecord>) -> Self {
        let block = &out.block;
        let endpoints = out
            .fits
            .iter()
            .enumerate()
            .map(|(k, fit)| EndpointSummary {
                name: fit.endpoint.clone(),
                intercept: fit.theta[0],
                effect: fit.theta[1],
                adjustment: fit.theta[2],
                se_effect: block.se_effect(k),
                sigma2: fit.sigma2,
                n_obs: fit.n_obs,
            })
            .collect();
        Stage1Report {
            cohort_id: block.cohort_id.clone(),
            n_rows: block.n_rows,
            standardization,
            endpoints,
            gamma: block.gamma.clone(),
            n_pairwise: block.n_pairwise.clone(),
            warnings: block.warnings.clone(),
        }
    }

    /// Rebuild the effect block this report captures, for pooling from
    /// saved first-stage output.
    pub fn to_effect_block(&self) -> EffectBlock {
        EffectBlock {
            cohort_id: self.cohort_id.clone(),
            endpoints: self.endpoints.iter().map(|e| e.name.clone()).collect(),
            b_hat: self.endpoints.iter().map(|e| e.effect).collect(),
            gamma: self.gamma.clone(),
            n_rows: self.n_rows,
            n_obs: self.endpoints.iter().map(|e| e.n_obs).collect(),
            n_pairwise: self.n_pairwise.clone(),
            warnings: self.warnings.clone(),
        }
    }
}

/// One endpoint's estimate and standard error, kept alongside the pooled
/// value so a forest plot can be drawn from the pool report alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointEffect {
    pub name: String,
    pub effect: f64,
    pub se: f64,
}

/// Pooling results for one cohort, one entry per requested method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortPoolReport {
    pub cohort_id: String,
    pub endpoints: Vec<EndpointEffect>,
    pub two_stage: Option<CohortPooled>,
    pub one_stage: Option<OneStageFit>,
}

impl CohortPoolReport {
    pub fn new(
        block: &EffectBlock,
        two_stage: Option<CohortPooled>,
        one_stage: Option<OneStageFit>,
    ) -> Self {
        let endpoints = block
            .endpoints
            .iter()
            .enumerate()
            .map(|(k, name)| EndpointEffect {
                name: name.clone(),
                effect: block.b_hat[k],
                se: block.se_effect(k),
            })
            .collect();
        CohortPoolReport {
            cohort_id: block.cohort_id.clone(),
            endpoints,
            two_stage,
            one_stage,
        }
    }
}

/// Cross-cohort pooling results, one entry per requested method. Cohorts
/// that failed to fit are listed by message; they do not stop the others.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalReport {
    pub two_stage: Option<GlobalPooled>,
    pub one_stage: Option<GlobalPooled>,
    #[serde(default)]
    pub failures: Vec<String>,
}

fn fmt_row(cols: &[String], widths: &[usize]) -> String {
    let mut line = String::new();
    for (i, (c, w)) in cols.iter().zip(widths).enumerate() {
        if i > 0 {
            line.push_str("  ");
        }
        if i == 0 {
            line.push_str(&format!("{c:<w$}"));
        } else {
            line.push_str(&format!("{c:>w$}"));
        }
    }
    line.push('\n');
    line
}

/// Aligned text rendering of a first-stage report.
pub fn stage1_text(report: &Stage1Report) -> String {
    let mut out = format!(
        "cohort {}  ({} rows, {} endpoints)\n",
        report.cohort_id,
        report.n_rows,
        report.endpoints.len()
    );
    let widths = [14usize, 10, 10, 10, 10, 10, 6];
    out.push_str(&fmt_row(
        &[
            "endpoint".into(),
            "effect".into(),
            "se".into(),
            "intercept".into(),
            "adjust".into(),
            "sigma2".into(),
            "n".into(),
        ],
        &widths,
    ));
    for e in &report.endpoints {
        out.push_str(&fmt_row(
            &[
                e.name.clone(),
                format!("{:.4}", e.effect),
                format!("{:.4}", e.se_effect),
                format!("{:.4}", e.intercept),
                format!("{:.4}", e.adjustment),
                format!("{:.4}", e.sigma2),
                format!("{}", e.n_obs),
            ],
            &widths,
        ));
    }
    for w in &report.warnings {
        out.push_str(&format!("warning: {w}\n"));
    }
    out
}

/// Aligned text rendering of within-cohort pooling.
pub fn pool_text(reports: &[CohortPoolReport]) -> String {
    let mut out = String::new();
    let widths = [14usize, 10, 10, 10, 10, 6, 10];
    out.push_str(&fmt_row(
        &[
            "cohort".into(),
            "method".into(),
            "beta".into(),
            "se".into(),
            "phi".into(),
            "iter".into(),
            "converged".into(),
        ],
        &widths,
    ));
    for r in reports {
        if let Some(p) = &r.two_stage {
            out.push_str(&fmt_row(
                &[
                    r.cohort_id.clone(),
                    "two-stage".into(),
                    format!("{:.4}", p.beta),
                    format!("{:.4}", p.se),
                    format!("{:.4}", p.phi),
                    format!("{}", p.iterations),
                    format!("{}", p.converged),
                ],
                &widths,
            ));
        }
        if let Some(p) = &r.one_stage {
            out.push_str(&fmt_row(
                &[
                    r.cohort_id.clone(),
                    "one-stage".into(),
                    format!("{:.4}", p.beta),
                    format!("{:.4}", p.se),
                    format!("{:.4}", p.phi),
                    format!("{}", p.iterations),
                    format!("{}", p.converged),
                ],
                &widths,
            ));
        }
    }
    out
}

/// Aligned text rendering of the global pooling step.
pub fn global_text(report: &GlobalReport) -> String {
    let mut out = String::new();
    for (label, pooled) in [
        ("two-stage", &report.two_stage),
        ("one-stage", &report.one_stage),
    ] {
        if let Some(g) = pooled {
            out.push_str(&format!(
                "{label}: global beta = {:.4} (se {:.4}), eta2 = {:.4}{}, eta2_DL = {:.4} over {} cohorts\n",
                g.beta,
                g.se,
                g.eta2,
                match g.se_eta2 {
                    Some(se) => format!(" (se {se:.4})"),
                    None => " (se n/a)".to_string(),
                },
                g.eta2_dl,
                g.cohorts.len()
            ));
        }
    }
    for f in &report.failures {
        out.push_str(&format!("failed: {f}\n"));
    }
    out
}
