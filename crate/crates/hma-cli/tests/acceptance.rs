//! Acceptance suite. Each test prints exactly one `criterion N: PASS/FAIL`
//! line (visible with `cargo test --test acceptance -- --nocapture`, or on
//! any failure) and then asserts, so the suite doubles as a scorecard.
//!
//! Reference values and tolerances live in [`refs`] and are not tuned to
//! the implementation: when a measured quantity genuinely disagrees with
//! its reference, the criterion is allowed to fail.

use std::path::{Path, PathBuf};
use std::time::Instant;

use hma_core::data::{
    detect_endpoints, load_cohort_csv, standardize_responses, CohortData, CsvSchema, EffectBlock,
};
use hma_core::onestage::{fit_onestage, OneStageOptions};
use hma_core::sim::{run_scenario, Methods, Scenario};
use hma_core::stage1::fit_cohort;
use hma_core::stage2::{pool_within_cohort, pseudo_loglik, ConvergenceOptions};
use hma_core::stage3::{pool_across_cohorts, CohortSummary};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

/// Reference values the suite checks against.
mod refs {
    /// Simulation grid cells under test: (tau2, k, reference ASE, reference ESE).
    pub const CELLS: [(f64, usize, f64, f64); 3] = [
        (0.25, 5, 0.13, 0.13),
        (0.10, 10, 0.16, 0.14),
        (0.50, 3, 0.23, 0.24),
    ];
    /// Relative tolerance on ASE and ESE against their references.
    pub const SE_RTOL: f64 = 0.15;
    /// Acceptable coverage band around the nominal 0.95.
    pub const CP_BAND: (f64, f64) = (0.93, 0.97);
    /// Replicates for the calibration cells.
    pub const CALIBRATION_REPS: usize = 1000;
    /// Wall-clock budget for the three calibration cells together.
    pub const CALIBRATION_BUDGET_SECS: u64 = 600;
    /// Grid search must agree with the iterative optimizer to this step.
    pub const GRID_RESOLUTION: f64 = 1e-3;
    /// Complete-data covariance must match the textbook value this tightly.
    pub const OLS_ATOL: f64 = 1e-10;
}

fn verdict(num: u32, ok: bool, detail: &str) {
    let word = if ok { "PASS" } else { "FAIL" };
    println!("criterion {num}: {word} - {detail}");
    assert!(ok, "criterion {num}: {word} - {detail}");
}

#[test]
fn c1_simulation_calibration_against_reference_cells() {
    let start = Instant::now();
    let mut all_ok = true;
    let mut lines = Vec::new();
    for &(tau2, k, ase_ref, ese_ref) in &refs::CELLS {
        let mut sc = Scenario::new(k, tau2);
        sc.reps = refs::CALIBRATION_REPS;
        sc.seed = 42;
        sc.methods = Methods::TwoStage;
        let sum = run_scenario(&sc).unwrap().two_stage.unwrap();
        let bias_ok = sum.ebias.abs() <= 3.0 * sum.mcse_ebias;
        let ase_ok = (sum.ase - ase_ref).abs() <= refs::SE_RTOL * ase_ref;
        let ese_ok = (sum.ese - ese_ref).abs() <= refs::SE_RTOL * ese_ref;
        let cp_ok = sum.cp >= refs::CP_BAND.0 && sum.cp <= refs::CP_BAND.1;
        all_ok &= bias_ok && ase_ok && ese_ok && cp_ok;
        lines.push(format!(
            "(tau2={tau2}, k={k}): ebias {:.4} (mcse {:.4}, {}), \
             ase {:.3} vs ref {ase_ref} ({}), ese {:.3} vs ref {ese_ref} ({}), \
             cp {:.3} in [{}, {}] ({})",
            sum.ebias,
            sum.mcse_ebias,
            if bias_ok { "ok" } else { "off" },
            sum.ase,
            if ase_ok { "ok" } else { "off" },
            sum.ese,
            if ese_ok { "ok" } else { "off" },
            sum.cp,
            refs::CP_BAND.0,
            refs::CP_BAND.1,
            if cp_ok { "ok" } else { "off" },
        ));
    }
    let elapsed = start.elapsed();
    let time_ok = elapsed.as_secs() < refs::CALIBRATION_BUDGET_SECS;
    all_ok &= time_ok;
    lines.push(format!(
        "runtime {:.0}s (budget {}s, {})",
        elapsed.as_secs_f64(),
        refs::CALIBRATION_BUDGET_SECS,
        if time_ok { "ok" } else { "over" }
    ));
    verdict(1, all_ok, &lines.join("; "));
}

#[test]
fn c2_two_stage_bias_beats_one_stage_at_high_heterogeneity() {
    let mut sc = Scenario::new(3, 0.50);
    sc.reps = 500;
    sc.seed = 42;
    sc.methods = Methods::Both;
    let result = run_scenario(&sc).unwrap();
    let two = result.two_stage.unwrap();
    let one = result.one_stage.unwrap();
    let ok = two.ebias.abs() < one.ebias.abs();
    verdict(
        2,
        ok,
        &format!(
            "(tau2=0.50, k=3, reps=500): two-stage |ebias| {:.4} vs one-stage |ebias| {:.4} \
             (mcse {:.4} / {:.4}; both estimators are unbiased by symmetry, so this \
             comparison is a seed-level coin flip)",
            two.ebias.abs(),
            one.ebias.abs(),
            two.mcse_ebias,
            one.mcse_ebias
        ),
    );
}

/// Argmax of `f` over a 2-D box by iterative grid refinement, down to a
/// step below `refs::GRID_RESOLUTION` in both coordinates.
fn grid_argmax(
    f: impl Fn(f64, f64) -> f64,
    (mut x_lo, mut x_hi): (f64, f64),
    (mut y_lo, mut y_hi): (f64, f64),
    y_floor: f64,
) -> (f64, f64) {
    let npts = 121usize;
    let mut best = (f64::NAN, f64::NAN);
    loop {
        let dx = (x_hi - x_lo) / (npts - 1) as f64;
        let dy = (y_hi - y_lo) / (npts - 1) as f64;
        let mut best_val = f64::NEG_INFINITY;
        for ix in 0..npts {
            let x = x_lo + ix as f64 * dx;
            for iy in 0..npts {
                let y = y_lo + iy as f64 * dy;
                let v = f(x, y);
                if v > best_val {
                    best_val = v;
                    best = (x, y);
                }
            }
        }
        if dx.max(dy) <= refs::GRID_RESOLUTION / 5.0 {
            return best;
        }
        x_lo = best.0 - 4.0 * dx;
        x_hi = best.0 + 4.0 * dx;
        y_lo = (best.1 - 4.0 * dy).max(y_floor);
        y_hi = best.1 + 4.0 * dy;
    }
}

fn diagonal_block(b_hat: Vec<f64>, vars: &[f64]) -> EffectBlock {
    let k = b_hat.len();
    let mut gamma = vec![0.0; k * k];
    for i in 0..k {
        gamma[i * k + i] = vars[i];
    }
    EffectBlock {
        cohort_id: "oracle".into(),
        endpoints: (0..k).map(|i| format!("e{i}")).collect(),
        b_hat,
        gamma,
        n_rows: 1,
        n_obs: vec![1; k],
        n_pairwise: vec![1; k * k],
        warnings: Vec::new(),
    }
}

#[test]
fn c3_pooling_matches_grid_search_oracles() {
    let opts = ConvergenceOptions::default();
    let mut rng = ChaCha12Rng::seed_from_u64(4242);
    let mut worst_stage2 = 0.0f64;
    let mut worst_stage3 = 0.0f64;

    for i in 0..20 {
        let k = 2 + i % 4;
        let tau = rng.gen_range(0.3..0.9);
        let b: Vec<f64> = (0..k)
            .map(|_| {
                1.0 + tau * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
            .collect();
        let v: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..0.30)).collect();
        let block = diagonal_block(b.clone(), &v);
        let fit = pool_within_cohort(&block, &opts).unwrap();

        let b_lo = b.iter().cloned().fold(f64::INFINITY, f64::min) - 0.5;
        let b_hi = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 0.5;
        let mean = b.iter().sum::<f64>() / k as f64;
        let spread = b.iter().fold(0.0f64, |m, x| m.max((x - mean) * (x - mean)));
        // the phi update is stationary only below 4x the squared spread,
        // so this domain always contains the fixed point
        let phi_hi = 6.0 * spread + 0.1;
        assert!(fit.phi <= phi_hi);
        let (bg, pg) = grid_argmax(
            |beta, phi| pseudo_loglik(beta, phi, &block).unwrap(),
            (b_lo, b_hi),
            (0.0, phi_hi),
            0.0,
        );
        worst_stage2 = worst_stage2
            .max((bg - fit.beta).abs())
            .max((pg - fit.phi).abs());
    }

    for i in 0..20 {
        let k = 2 + i % 4;
        let tau = rng.gen_range(0.3..0.9);
        let summaries: Vec<CohortSummary> = (0..k)
            .map(|c| CohortSummary {
                label: format!("c{c}"),
                beta: 1.0
                    + tau
                        * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
                variance: rng.gen_range(0.05..0.30),
            })
            .collect();
        let fit = pool_across_cohorts(&summaries, &opts).unwrap();

        // independent form of the across-cohort objective
        let obj = |beta: f64, eta2: f64| {
            summaries
                .iter()
                .map(|s| {
                    let v = s.variance + eta2;
                    -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (s.beta - beta).powi(2) / v)
                })
                .sum::<f64>()
        };
        let b_lo = summaries
            .iter()
            .map(|s| s.beta)
            .fold(f64::INFINITY, f64::min)
            - 0.5;
        let b_hi = summaries
            .iter()
            .map(|s| s.beta)
            .fold(f64::NEG_INFINITY, f64::max)
            + 0.5;
        let mean = summaries.iter().map(|s| s.beta).sum::<f64>() / k as f64;
        let spread = summaries
            .iter()
            .fold(0.0f64, |m, s| m.max((s.beta - mean) * (s.beta - mean)));
        let eta_hi = 6.0 * spread + 0.1;
        assert!(fit.eta2 <= eta_hi);
        let (bg, eg) = grid_argmax(obj, (b_lo, b_hi), (0.0, eta_hi), 0.0);
        worst_stage3 = worst_stage3
            .max((bg - fit.beta).abs())
            .max((eg - fit.eta2).abs());
    }

    let ok = worst_stage2 <= refs::GRID_RESOLUTION && worst_stage3 <= refs::GRID_RESOLUTION;
    verdict(
        3,
        ok,
        &format!(
            "20 within-cohort instances, worst |grid - iterative| {worst_stage2:.2e}; \
             20 across-cohort instances, worst {worst_stage3:.2e}; resolution {}",
            refs::GRID_RESOLUTION
        ),
    );
}

#[test]
fn c4_missingness_adjusted_covariance_matches_resimulation() {
    let reps = 5000;
    let j = 200;
    let (alpha, beta, gamma_z) = (0.5, 3.0, 1.0);
    let mut rng = ChaCha12Rng::seed_from_u64(777);
    let normal = |rng: &mut ChaCha12Rng| -> f64 { StandardNormal.sample(rng) };

    let mut b1 = Vec::with_capacity(reps);
    let mut b2 = Vec::with_capacity(reps);
    let mut model = Vec::with_capacity(reps);
    for _ in 0..reps {
        let x: Vec<f64> = (0..j).map(|_| normal(&mut rng)).collect();
        let z: Vec<f64> = (0..j).map(|_| normal(&mut rng)).collect();
        let mut responses = Vec::with_capacity(2 * j);
        for row in 0..j {
            let shared = 0.5f64.sqrt() * normal(&mut rng);
            let mean = alpha + beta * x[row] + gamma_z * z[row];
            let y1 = mean + shared + 0.5f64.sqrt() * normal(&mut rng);
            let y2 = mean + shared + 0.5f64.sqrt() * normal(&mut rng);
            responses.push(y1);
            responses.push(if rng.gen_range(0.0..1.0) < 0.30 {
                f64::NAN
            } else {
                y2
            });
        }
        let data = CohortData::new("resim", vec!["a".into(), "b".into()], x, z, responses).unwrap();
        let out = fit_cohort(&data).unwrap();
        b1.push(out.block.b_hat[0]);
        b2.push(out.block.b_hat[1]);
        model.push(out.block.gamma[1] / j as f64);
    }

    let r = reps as f64;
    let m1 = b1.iter().sum::<f64>() / r;
    let m2 = b2.iter().sum::<f64>() / r;
    let products: Vec<f64> = b1
        .iter()
        .zip(&b2)
        .map(|(&a, &b)| (a - m1) * (b - m2))
        .collect();
    let emp_cov = products.iter().sum::<f64>() / (r - 1.0);
    let var_products = products
        .iter()
        .map(|p| (p - emp_cov) * (p - emp_cov))
        .sum::<f64>()
        / (r - 1.0);
    let mcse_emp = (var_products / r).sqrt();
    let model_mean = model.iter().sum::<f64>() / r;
    let model_var = model
        .iter()
        .map(|g| (g - model_mean) * (g - model_mean))
        .sum::<f64>()
        / (r - 1.0);
    let mcse_model = (model_var / r).sqrt();
    let tol = 3.0 * (mcse_emp * mcse_emp + mcse_model * mcse_model).sqrt();

    let ok = (model_mean - emp_cov).abs() <= tol;
    verdict(
        4,
        ok,
        &format!(
            "k=2, j=200, 30% missing on one endpoint, {reps} resimulations: \
             mean model-based covariance {model_mean:.6} vs empirical {emp_cov:.6} \
             (difference {:.2e}, 3 mc-se tolerance {:.2e})",
            (model_mean - emp_cov).abs(),
            tol
        ),
    );
}

#[test]
fn c5_complete_data_reductions() {
    // (a) with no missing cells the effect variance is the textbook OLS one
    let j = 60;
    let exposure: Vec<f64> = (0..j).map(|i| (i as f64 * 0.61).sin() * 1.3).collect();
    let propensity: Vec<f64> = (0..j).map(|i| (i as f64 * 0.29).cos() + 0.4).collect();
    let responses: Vec<f64> = (0..j)
        .flat_map(|row| {
            let base = 0.8 * exposure[row] - 0.3 * propensity[row];
            [
                base + ((row * 7) as f64 * 0.37).sin(),
                base + ((row * 11) as f64 * 0.53).cos(),
            ]
        })
        .collect();
    let data = CohortData::new(
        "complete",
        vec!["a".into(), "b".into()],
        exposure.clone(),
        propensity.clone(),
        responses,
    )
    .unwrap();
    let out = fit_cohort(&data).unwrap();

    let mut xtx = [0.0f64; 9];
    for row in 0..j {
        let v = [1.0, exposure[row], propensity[row]];
        for a in 0..3 {
            for b in 0..3 {
                xtx[a * 3 + b] += v[a] * v[b];
            }
        }
    }
    let inv_aa = inv3_entry_11(&xtx);
    let mut ols_ok = true;
    let mut worst = 0.0f64;
    for k in 0..2 {
        let textbook = out.fits[k].sigma2 * inv_aa;
        let ours = out.block.gamma[k * 2 + k] / j as f64;
        let err = (ours - textbook).abs();
        worst = worst.max(err);
        ols_ok &= err <= refs::OLS_ATOL * (1.0 + textbook.abs());
    }

    // (b) a single endpoint pools to itself
    let single = diagonal_block(vec![1.234_567_89], &[0.3]);
    let pooled = pool_within_cohort(&single, &ConvergenceOptions::default()).unwrap();
    let passthrough_ok = pooled.beta == 1.234_567_89;

    // (c) no between-cohort spread pins eta2 at zero and the pooled value
    // collapses to fixed-effect weighting
    let summaries: Vec<CohortSummary> = [0.04, 0.09, 0.16]
        .iter()
        .enumerate()
        .map(|(i, &v)| CohortSummary {
            label: format!("c{i}"),
            beta: 1.5,
            variance: v,
        })
        .collect();
    let global = pool_across_cohorts(&summaries, &ConvergenceOptions::default()).unwrap();
    let wsum: f64 = summaries.iter().map(|s| 1.0 / s.variance).sum();
    let fixed: f64 = summaries.iter().map(|s| s.beta / s.variance).sum::<f64>() / wsum;
    let fixed_ok = global.eta2 == 0.0 && (global.beta - fixed).abs() <= 1e-12 * fixed.abs();

    let ok = ols_ok && passthrough_ok && fixed_ok;
    verdict(
        5,
        ok,
        &format!(
            "textbook OLS variance worst error {worst:.2e} (tol {:.0e}); \
             single-endpoint passthrough exact: {passthrough_ok}; \
             eta2 {} with fixed-effect agreement {:.2e}",
            refs::OLS_ATOL,
            global.eta2,
            (global.beta - fixed).abs()
        ),
    );
}

/// Entry (1,1) of the inverse of a symmetric 3x3 matrix, by cofactors.
fn inv3_entry_11(m: &[f64; 9]) -> f64 {
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    (m[0] * m[8] - m[2] * m[6]) / det
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

#[test]
fn c6_two_stage_and_one_stage_agree_on_the_fixture() {
    let opts = ConvergenceOptions::default();
    let mut two_stage = Vec::new();
    let mut one_stage = Vec::new();
    for name in ["avon", "bergen", "cork", "delft", "espoo", "fargo"] {
        let path = fixture_dir().join(format!("{name}.csv"));
        let mut schema = CsvSchema::new("dose", "score", Vec::new());
        schema.endpoint_cols = detect_endpoints(&path, &schema).unwrap();
        let raw = load_cohort_csv(&path, &schema).unwrap();
        let (std, _) = standardize_responses(&raw).unwrap();

        let pooled = pool_within_cohort(&fit_cohort(&std).unwrap().block, &opts).unwrap();
        two_stage.push(CohortSummary::from(&pooled));

        let fit = fit_onestage(&std, &OneStageOptions::default()).unwrap();
        one_stage.push(CohortSummary {
            label: name.to_string(),
            beta: fit.beta,
            variance: fit.se * fit.se,
        });
    }
    let g2 = pool_across_cohorts(&two_stage, &opts).unwrap();
    let g1 = pool_across_cohorts(&one_stage, &opts).unwrap();
    let beta_gap = (g2.beta - g1.beta).abs();
    let se_gap = (g2.se - g1.se).abs() / g2.se;
    let ok = beta_gap < 0.2 && se_gap < 0.10;
    verdict(
        6,
        ok,
        &format!(
            "six cohorts: global effect {:.4} (two-stage) vs {:.4} (one-stage), gap {beta_gap:.4} \
             (< 0.2); se {:.4} vs {:.4}, gap {:.1}% (< 10%)",
            g2.beta,
            g1.beta,
            g2.se,
            g1.se,
            100.0 * se_gap
        ),
    );
}

#[test]
fn c7_fixed_seed_simulation_is_byte_identical() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_hma"))
            .args([
                "simulate",
                "--seed",
                "42",
                "--reps",
                "200",
                "--method",
                "two-stage",
            ])
            .arg("--out-dir")
            .arg(dir.path())
            .output()
            .expect("spawning hma");
        assert!(out.status.success(), "simulate failed: {:?}", out.status);
    }
    let a = std::fs::read(dir_a.path().join("simulation.csv")).unwrap();
    let b = std::fs::read(dir_b.path().join("simulation.csv")).unwrap();
    let ok = a == b;
    verdict(
        7,
        ok,
        &format!(
            "two `simulate --seed 42` runs: {} bytes vs {} bytes, identical: {ok}",
            a.len(),
            b.len()
        ),
    );
}
