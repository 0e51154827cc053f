//! Cohort data container, CSV ingestion, and response standardization.
//!
//! A cohort holds one exposure column, one propensity-style adjustment
//! column, and K endpoint columns measured on J individuals. Endpoint
//! cells may be missing; missing cells are stored as `f64::NAN` and the
//! observation indicator is derived from that encoding, so the mask can
//! never drift out of sync with the values. Exposure and the adjustment
//! column must be complete.
//!
//! Standardization rescales every endpoint to mean 100 and standard
//! deviation 15 over its observed cells only, mirroring how IQ-like scores
//! are aligned before effects are pooled across instruments. The returned
//! [`StandardizationRecord`] inverts the transform exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;

/// Minimum observed cells per endpoint for a three-parameter fit with at
/// least one residual degree of freedom.
pub const MIN_OBS_PER_ENDPOINT: usize = 4;

/// Minimum pairwise overlap below which a covariance is flagged as not
/// estimable in any stable sense.
pub const MIN_PAIRWISE_OVERLAP: usize = 2;

/// Target scale of standardized endpoints.
pub const STANDARD_MEAN: f64 = 100.0;
pub const STANDARD_SD: f64 = 15.0;

/// One cohort of individual-level data.
#[derive(Debug, Clone)]
pub struct CohortData {
    pub cohort_id: String,
    pub endpoint_names: Vec<String>,
    /// Exposure values, length J, complete.
    pub exposure: Vec<f64>,
    /// Adjustment covariate (e.g. a propensity or severity score), length J, complete.
    pub propensity: Vec<f64>,
    /// Row-major J x K response matrix; missing cells are NaN.
    pub responses: Vec<f64>,
    /// Soft validation findings (low pairwise overlap and the like).
    pub warnings: Vec<String>,
}

impl CohortData {
    /// Build a cohort and run full validation.
    pub fn new(
        cohort_id: impl Into<String>,
        endpoint_names: Vec<String>,
        exposure: Vec<f64>,
        propensity: Vec<f64>,
        responses: Vec<f64>,
    ) -> Result<Self> {
        let mut data = CohortData {
            cohort_id: cohort_id.into(),
            endpoint_names,
            exposure,
            propensity,
            responses,
            warnings: Vec::new(),
        };
        data.warnings = data.validate()?;
        Ok(data)
    }

    pub fn n_rows(&self) -> usize {
        self.exposure.len()
    }

    pub fn n_endpoints(&self) -> usize {
        self.endpoint_names.len()
    }

    /// Response for individual `j` on endpoint `k`, `None` when missing.
    pub fn response(&self, j: usize, k: usize) -> Option<f64> {
        let v = self.responses[j * self.n_endpoints() + k];
        if v.is_nan() {
            None
        } else {
            Some(v)
        }
    }

    /// Observation indicator R_jk.
    pub fn observed(&self, j: usize, k: usize) -> bool {
        !self.responses[j * self.n_endpoints() + k].is_nan()
    }

    /// Number of observed cells for endpoint `k`.
    pub fn n_observed(&self, k: usize) -> usize {
        (0..self.n_rows()).filter(|&j| self.observed(j, k)).count()
    }

    /// Number of rows where endpoints `k` and `l` are both observed.
    pub fn n_pairwise(&self, k: usize, l: usize) -> usize {
        (0..self.n_rows())
            .filter(|&j| self.observed(j, k) && self.observed(j, l))
            .count()
    }

    /// Re-run all structural checks. Returns the soft warnings; hard
    /// violations come back as errors. Calling this twice changes nothing.
    pub fn validate(&self) -> Result<Vec<String>> {
        let j = self.exposure.len();
        let k = self.endpoint_names.len();
        if k == 0 {
            return Err(Error::Validation("cohort has no endpoints".into()));
        }
        if j == 0 {
            return Err(Error::Validation("cohort has no rows".into()));
        }
        if self.propensity.len() != j {
            return Err(Error::Validation(format!(
                "propensity length {} does not match exposure length {}",
                self.propensity.len(),
                j
            )));
        }
        if self.responses.len() != j * k {
            return Err(Error::Validation(format!(
                "response matrix has {} cells, expected {} ({} rows x {} endpoints)",
                self.responses.len(),
                j * k,
                j,
                k
            )));
        }
        for (idx, name) in self.endpoint_names.iter().enumerate() {
            if name.is_empty() {
                return Err(Error::Validation(format!(
                    "endpoint {idx} has an empty name"
                )));
            }
            if self.endpoint_names[..idx].contains(name) {
                return Err(Error::Validation(format!(
                    "duplicate endpoint name '{name}'"
                )));
            }
        }
        for (row, (a, s)) in self.exposure.iter().zip(&self.propensity).enumerate() {
            if !a.is_finite() {
                return Err(Error::Validation(format!(
                    "exposure missing or non-finite at row {row} of cohort '{}'",
                    self.cohort_id
                )));
            }
            if !s.is_finite() {
                return Err(Error::Validation(format!(
                    "propensity missing or non-finite at row {row} of cohort '{}'",
                    self.cohort_id
                )));
            }
        }
        for (idx, v) in self.responses.iter().enumerate() {
            if v.is_infinite() {
                return Err(Error::Validation(format!(
                    "non-finite response at row {}, endpoint '{}'",
                    idx / k,
                    self.endpoint_names[idx % k]
                )));
            }
        }
        for (kk, name) in self.endpoint_names.iter().enumerate() {
            let n_k = self.n_observed(kk);
            if n_k < MIN_OBS_PER_ENDPOINT {
                return Err(Error::Validation(format!(
                    "endpoint '{name}' has only {n_k} observed cells; at least {MIN_OBS_PER_ENDPOINT} are required"
                )));
            }
        }
        let mut warnings = Vec::new();
        for a in 0..k {
            for b in (a + 1)..k {
                let overlap = self.n_pairwise(a, b);
                if overlap < MIN_PAIRWISE_OVERLAP {
                    warnings.push(format!(
                        "endpoints '{}' and '{}' overlap on {} rows; their covariance is not estimable",
                        self.endpoint_names[a], self.endpoint_names[b], overlap
                    ));
                }
            }
        }
        Ok(warnings)
    }
}

/// Per-endpoint location and scale captured when standardizing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointScale {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
}

/// Invertible record of the standardization applied to a cohort.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandardizationRecord {
    pub target_mean: f64,
    pub target_sd: f64,
    pub scales: Vec<EndpointScale>,
}

impl StandardizationRecord {
    /// Map an original-scale value on endpoint `k` to the standardized scale.
    pub fn to_standardized(&self, k: usize, y: f64) -> f64 {
        let s = &self.scales[k];
        self.target_mean + self.target_sd * (y - s.mean) / s.sd
    }

    /// Map a standardized value on endpoint `k` back to the original scale.
    pub fn to_original(&self, k: usize, y: f64) -> f64 {
        let s = &self.scales[k];
        s.mean + s.sd * (y - self.target_mean) / self.target_sd
    }
}

/// Rescale every endpoint to mean 100, standard deviation 15 over its
/// observed cells (divisor n - 1). Missing cells stay missing. Fails when
/// an endpoint has zero spread, naming the endpoint.
pub fn standardize_responses(data: &CohortData) -> Result<(CohortData, StandardizationRecord)> {
    let k = data.n_endpoints();
    let j = data.n_rows();
    let mut scales = Vec::with_capacity(k);
    for kk in 0..k {
        let observed: Vec<f64> = (0..j).filter_map(|jj| data.response(jj, kk)).collect();
        let n = observed.len() as f64;
        let mean = pairwise_sum(&observed) / n;
        let devs: Vec<f64> = observed.iter().map(|y| (y - mean) * (y - mean)).collect();
        let sd = (pairwise_sum(&devs) / (n - 1.0)).sqrt();
        if !(sd > 0.0) || sd < 1e-12 * (1.0 + mean.abs()) {
            return Err(Error::Validation(format!(
                "endpoint '{}' has zero standard deviation over its {} observed cells; cannot standardize",
                data.endpoint_names[kk], observed.len()
            )));
        }
        scales.push(EndpointScale {
            name: data.endpoint_names[kk].clone(),
            mean,
            sd,
        });
    }
    let record = StandardizationRecord {
        target_mean: STANDARD_MEAN,
        target_sd: STANDARD_SD,
        scales,
    };
    let mut responses = data.responses.clone();
    for jj in 0..j {
        for kk in 0..k {
            let idx = jj * k + kk;
            if !responses[idx].is_nan() {
                responses[idx] = record.to_standardized(kk, responses[idx]);
            }
        }
    }
    let standardized = CohortData {
        cohort_id: data.cohort_id.clone(),
        endpoint_names: data.endpoint_names.clone(),
        exposure: data.exposure.clone(),
        propensity: data.propensity.clone(),
        responses,
        warnings: data.warnings.clone(),
    };
    Ok((standardized, record))
}

/// Column mapping and parsing options for [`load_cohort_csv`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub exposure_col: String,
    pub propensity_col: String,
    pub endpoint_cols: Vec<String>,
    /// Cell contents (after trimming) that mean "missing".
    pub missing_tokens: Vec<String>,
    /// Single-byte field delimiter.
    pub delimiter: u8,
    /// Cohort label; defaults to the file stem when absent.
    pub cohort_id: Option<String>,
}

impl CsvSchema {
    pub fn new(
        exposure_col: impl Into<String>,
        propensity_col: impl Into<String>,
        endpoint_cols: Vec<String>,
    ) -> Self {
        CsvSchema {
            exposure_col: exposure_col.into(),
            propensity_col: propensity_col.into(),
            endpoint_cols,
            missing_tokens: vec![String::new(), "NA".to_string()],
            delimiter: b',',
            cohort_id: None,
        }
    }

    fn is_missing(&self, token: &str) -> bool {
        self.missing_tokens.iter().any(|t| t == token)
    }
}

/// Load one cohort from a headed CSV file.
///
/// Endpoint cells matching a missing token become NaN. A missing or
/// malformed exposure or propensity cell is an error, as is any numeric
/// cell that fails to parse; errors carry the 1-based file line.
pub fn load_cohort_csv(path: &Path, schema: &CsvSchema) -> Result<CohortData> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open '{}': {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let col_index = |name: &str| -> Result<usize> {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            Error::Validation(format!(
                "column '{name}' not found; file has columns: {}",
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })
    };
    let exposure_idx = col_index(&schema.exposure_col)?;
    let propensity_idx = col_index(&schema.propensity_col)?;
    let endpoint_idx: Vec<usize> = schema
        .endpoint_cols
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;

    let mut exposure = Vec::new();
    let mut propensity = Vec::new();
    let mut responses = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize| -> &str { record.get(idx).unwrap_or("") };

        let parse_required = |idx: usize, what: &str| -> Result<f64> {
            let token = field(idx);
            if schema.is_missing(token) {
                return Err(Error::Validation(format!(
                    "{what} is missing at line {line}; it must be complete"
                )));
            }
            token.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("cannot parse {what} value '{token}'"),
            })
        };
        exposure.push(parse_required(exposure_idx, "exposure")?);
        propensity.push(parse_required(propensity_idx, "propensity")?);
        for (&idx, name) in endpoint_idx.iter().zip(&schema.endpoint_cols) {
            let token = field(idx);
            if schema.is_missing(token) {
                responses.push(f64::NAN);
            } else {
                responses.push(token.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("cannot parse endpoint '{name}' value '{token}'"),
                })?);
            }
        }
    }

    let cohort_id = schema.cohort_id.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "cohort".to_string())
    });
    CohortData::new(
        cohort_id,
        schema.endpoint_cols.clone(),
        exposure,
        propensity,
        responses,
    )
}

/// List the columns of `path` that look like endpoint measurements: not
/// the exposure or propensity column, every cell numeric or a missing
/// token, and at least one cell actually numeric. Columns come back in
/// header order; `schema.endpoint_cols` is ignored.
pub fn detect_endpoints(path: &Path, schema: &CsvSchema) -> Result<Vec<String>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Validation(format!("cannot open '{}': {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut numeric = vec![true; headers.len()];
    let mut seen_value = vec![false; headers.len()];
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        for (i, cell) in record.iter().enumerate() {
            if schema.is_missing(cell) {
                continue;
            }
            if cell.parse::<f64>().is_ok() {
                seen_value[i] = true;
            } else {
                numeric[i] = false;
            }
        }
    }
    let detected: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| {
            numeric[*i]
                && seen_value[*i]
                && **h != schema.exposure_col
                && **h != schema.propensity_col
        })
        .map(|(_, h)| h.to_string())
        .collect();
    if detected.is_empty() {
        return Err(Error::Validation(format!(
            "no numeric endpoint columns detected in '{}'",
            path.display()
        )));
    }
    Ok(detected)
}

/// Per-endpoint regression fit from the first stage.
#[derive(Debug, Clone, Serialize)]
pub struct EndpointFit {
    pub endpoint: String,
    /// Coefficients for (intercept, exposure, propensity).
    pub theta: [f64; 3],
    /// Maximum likelihood residual variance (divisor n_k).
    pub sigma2: f64,
    /// Observed cells used in the fit.
    pub n_obs: usize,
    /// Residuals on all J rows; NaN where the endpoint is unobserved.
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

impl EndpointFit {
    /// Exposure coefficient, the endpoint-specific effect estimate.
    pub fn effect(&self) -> f64 {
        self.theta[1]
    }
}

/// Effect estimates for one cohort with their missingness-adjusted
/// covariance on the scaled-by-J convention: `gamma / J` estimates
/// `Cov(b_hat)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectBlock {
    pub cohort_id: String,
    pub endpoints: Vec<String>,
    /// Exposure coefficients, length K.
    pub b_hat: Vec<f64>,
    /// Row-major K x K scaled covariance: Cov(sqrt(J) b_hat).
    pub gamma: Vec<f64>,
    /// Rows in the cohort.
    pub n_rows: usize,
    /// Observed cells per endpoint.
    pub n_obs: Vec<usize>,
    /// Row-major K x K pairwise overlap counts.
    pub n_pairwise: Vec<usize>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl EffectBlock {
    pub fn k(&self) -> usize {
        self.b_hat.len()
    }

    /// Estimated variance of `b_hat[k]`.
    pub fn var_effect(&self, k: usize) -> f64 {
        self.gamma[k * self.k() + k] / self.n_rows as f64
    }

    /// Estimated standard error of `b_hat[k]`.
    pub fn se_effect(&self, k: usize) -> f64 {
        self.var_effect(k).sqrt()
    }

    /// The K x K covariance of `b_hat` itself (gamma divided by J).
    pub fn effect_cov(&self) -> Vec<f64> {
        let j = self.n_rows as f64;
        self.gamma.iter().map(|g| g / j).collect()
    }

    /// Overlap ratio n_kl / (n_k * n_l) that drives the missingness
    /// adjustment for the (k, l) covariance entry.
    pub fn pair_overlap_factor(&self, k: usize, l: usize) -> f64 {
        let n_kl = self.n_pairwise[k * self.k() + l] as f64;
        n_kl / (self.n_obs[k] as f64 * self.n_obs[l] as f64)
    }
}
