//! Scalar and simplex optimizers used by the pooling and one-stage fits.

/// Inverse golden ratio, the interval reduction factor per iteration.
const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Maximize a unimodal scalar function on `[lo, hi]` by golden-section
/// search. Returns `(x_max, f_max)` once the bracket is narrower than
/// `tol` or after `max_iter` shrink steps.
pub fn golden_section_max<F: FnMut(f64) -> f64>(
    mut f: F,
    lo: f64,
    hi: f64,
    tol: f64,
    max_iter: usize,
) -> (f64, f64) {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..max_iter {
        if (b - a).abs() < tol {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    // the midpoint can lose to an interior probe by a hair; keep the best seen
    if fc > fx && fc > fd {
        (c, fc)
    } else if fd > fx {
        (d, fd)
    } else {
        (x, fx)
    }
}

/// Result of a Nelder-Mead run.
#[derive(Debug, Clone)]
pub struct SimplexFit {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimize `f` with the Nelder-Mead simplex, starting from `x0` with
/// per-coordinate initial steps `steps`. Convergence is declared when the
/// function spread across the simplex drops below `tol_f` and the vertex
/// spread below `tol_x`.
pub fn nelder_mead_min<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    steps: &[f64],
    tol_f: f64,
    tol_x: f64,
    max_iter: usize,
) -> SimplexFit {
    let n = x0.len();
    assert_eq!(steps.len(), n);
    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);

    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += if steps[i] != 0.0 { steps[i] } else { 1e-4 };
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&i, &j| {
            values[i]
                .partial_cmp(&values[j])
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        let f_spread = (values[worst] - values[best]).abs();
        let x_spread = simplex
            .iter()
            .map(|v| {
                v.iter()
                    .zip(&simplex[best])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        if f_spread < tol_f && x_spread < tol_x {
            converged = true;
            break;
        }

        let mut centroid = vec![0.0; n];
        for (idx, v) in simplex.iter().enumerate() {
            if idx == worst {
                continue;
            }
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x;
            }
        }
        for c in centroid.iter_mut() {
            *c /= n as f64;
        }

        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&simplex[worst])
            .map(|(c, w)| c + alpha * (c - w))
            .collect();
        let f_reflect = f(&reflect);

        if f_reflect < values[best] {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(c, w)| c + gamma * (c - w))
                .collect();
            let f_expand = f(&expand);
            if f_expand < f_reflect {
                simplex[worst] = expand;
                values[worst] = f_expand;
            } else {
                simplex[worst] = reflect;
                values[worst] = f_reflect;
            }
        } else if f_reflect < values[second_worst] {
            simplex[worst] = reflect;
            values[worst] = f_reflect;
        } else {
            let contract: Vec<f64> = centroid
                .iter()
                .zip(&simplex[worst])
                .map(|(c, w)| c + rho * (w - c))
                .collect();
            let f_contract = f(&contract);
            if f_contract < values[worst] {
                simplex[worst] = contract;
                values[worst] = f_contract;
            } else {
                let best_point = simplex[best].clone();
                for idx in 0..=n {
                    if idx == best {
                        continue;
                    }
                    let shrunk: Vec<f64> = best_point
                        .iter()
                        .zip(&simplex[idx])
                        .map(|(b, v)| b + sigma * (v - b))
                        .collect();
                    values[idx] = f(&shrunk);
                    simplex[idx] = shrunk;
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=n {
        if values[i] < values[best] {
            best = i;
        }
    }
    SimplexFit {
        x: simplex.swap_remove(best),
        fx: values[best],
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn golden_section_finds_parabola_peak() {
        let (x, fx) = golden_section_max(|x| -(x - 2.5) * (x - 2.5) + 7.0, 0.0, 10.0, 1e-10, 200);
        // near the flat top the objective ties at f64 resolution, so the
        // argmax is only locatable to about sqrt(machine epsilon)
        assert_relative_eq!(x, 2.5, epsilon = 1e-7);
        assert_relative_eq!(fx, 7.0, epsilon = 1e-12);
    }

    #[test]
    fn golden_section_handles_boundary_maximum() {
        let (x, _) = golden_section_max(|x| -x, 0.0, 5.0, 1e-10, 200);
        assert!(x < 1e-8);
    }

    #[test]
    fn nelder_mead_minimizes_rosenbrock() {
        let rosen = |v: &[f64]| {
            let (x, y) = (v[0], v[1]);
            (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2)
        };
        let fit = nelder_mead_min(rosen, &[-1.2, 1.0], &[0.5, 0.5], 1e-12, 1e-8, 5000);
        assert!(fit.converged);
        assert_relative_eq!(fit.x[0], 1.0, epsilon = 1e-4);
        assert_relative_eq!(fit.x[1], 1.0, epsilon = 1e-4);
    }

    #[test]
    fn nelder_mead_reports_iteration_exhaustion() {
        let fit = nelder_mead_min(|v| v[0] * v[0], &[10.0], &[1.0], 1e-30, 1e-30, 3);
        assert!(!fit.converged);
        assert_eq!(fit.iterations, 3);
    }
}
