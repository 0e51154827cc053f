//! Deterministic synthetic multi-cohort data for tests, examples, and the
//! committed CSV fixtures.
//!
//! Six cohorts, two to four endpoints each, complete and balanced. Within
//! a cohort every endpoint shares the same exposure effect on the
//! standardized scale, so the within-cohort heterogeneity is zero by
//! construction and the two-stage and one-stage fits should agree closely;
//! effects differ across cohorts, so the third stage has real spread to
//! estimate. Endpoints are expressed on instrument-specific raw scales
//! (different means and spreads) that the standardization step aligns.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::data::CohortData;
use crate::error::Result;
use crate::rng::stream_rng;

/// Seed of the committed fixture; changing it changes the fixture files.
pub const FIXTURE_SEED: u64 = 2718;

struct CohortSpec {
    id: &'static str,
    n: usize,
    endpoints: &'static [&'static str],
    /// Exposure effect in standardized points per unit exposure.
    effect: f64,
    /// Raw-scale mean and standard deviation per endpoint.
    scales: &'static [(f64, f64)],
    /// Residual correlation between endpoints.
    rho: f64,
}

const SPECS: [CohortSpec; 6] = [
    CohortSpec {
        id: "avon",
        n: 480,
        endpoints: &["verbal", "performance", "memory"],
        effect: 1.2,
        scales: &[(100.0, 15.0), (98.0, 13.5), (52.0, 9.0)],
        rho: 0.45,
    },
    CohortSpec {
        id: "bergen",
        n: 360,
        endpoints: &["verbal", "motor"],
        effect: 2.1,
        scales: &[(102.0, 16.0), (0.0, 1.0)],
        rho: 0.35,
    },
    CohortSpec {
        id: "cork",
        n: 620,
        endpoints: &["verbal", "performance", "memory", "attention"],
        effect: 0.6,
        scales: &[(99.0, 14.0), (101.0, 15.5), (48.0, 8.0), (10.0, 2.5)],
        rho: 0.5,
    },
    CohortSpec {
        id: "delft",
        n: 540,
        endpoints: &["fullscale", "processing", "attention"],
        effect: 1.5,
        scales: &[(103.0, 15.0), (95.0, 12.0), (11.0, 3.0)],
        rho: 0.4,
    },
    CohortSpec {
        id: "espoo",
        n: 300,
        endpoints: &["fullscale", "memory"],
        effect: 2.8,
        scales: &[(97.0, 17.0), (50.0, 10.0)],
        rho: 0.3,
    },
    CohortSpec {
        id: "fargo",
        n: 700,
        endpoints: &["verbal", "performance", "motor", "processing"],
        effect: 1.0,
        scales: &[(100.5, 14.5), (99.5, 15.0), (0.2, 1.1), (96.0, 13.0)],
        rho: 0.55,
    },
];

/// True standardized-scale exposure effects of the six cohorts, in cohort
/// order. Useful for sanity checks in tests.
pub fn fixture_true_effects() -> Vec<f64> {
    SPECS.iter().map(|s| s.effect).collect()
}

/// Generate the six fixture cohorts on their raw scales.
pub fn six_cohort_fixture() -> Vec<CohortData> {
    SPECS
        .iter()
        .enumerate()
        .map(|(idx, spec)| generate_cohort(spec, idx as u64))
        .collect()
}

fn generate_cohort(spec: &CohortSpec, counter: u64) -> CohortData {
    let mut rng = stream_rng(FIXTURE_SEED, counter);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let k = spec.endpoints.len();
    let j = spec.n;
    // standardized-scale generation: effect per unit exposure, shared
    // adjustment slope, exchangeable residuals scaled to keep the total
    // spread near the instrument's nominal 15
    let gamma = 2.0;
    let resid_sd = 14.0;
    let mut exposure = Vec::with_capacity(j);
    let mut propensity = Vec::with_capacity(j);
    let mut responses = Vec::with_capacity(j * k);
    for _ in 0..j {
        let x = normal();
        let s = normal();
        exposure.push(x);
        propensity.push(s);
        let shared = normal();
        for kk in 0..k {
            let own = normal();
            let e = resid_sd * (spec.rho.sqrt() * shared + (1.0 - spec.rho).sqrt() * own);
            let standardized = 100.0 + spec.effect * x + gamma * s + e;
            // express on the instrument's raw scale
            let (m, sd) = spec.scales[kk];
            responses.push(m + sd * (standardized - 100.0) / 15.0);
        }
    }
    CohortData::new(
        spec.id,
        spec.endpoints.iter().map(|s| s.to_string()).collect(),
        exposure,
        propensity,
        responses,
    )
    .expect("fixture specs satisfy the validation rules")
}

/// Write one cohort as a CSV file with columns id, dose, score, then one
/// column per endpoint. Values are fixed to six decimals so the files are
/// byte-reproducible.
pub fn write_fixture_csv(data: &CohortData, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("id,dose,score");
    for name in &data.endpoint_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for j in 0..data.n_rows() {
        out.push_str(&format!(
            "{}-{:04},{:.6},{:.6}",
            data.cohort_id,
            j + 1,
            data.exposure[j],
            data.propensity[j]
        ));
        for k in 0..data.n_endpoints() {
            match data.response(j, k) {
                Some(v) => out.push_str(&format!(",{v:.6}")),
                None => out.push_str(",NA"),
            }
        }
        out.push('\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}
