//! Small linear-algebra helpers: restarted GMRES on a matrix-free operator
//! with a dense LU fallback, and a power-iteration spectral radius estimate.

use nalgebra::{DMatrix, DVector};

use crate::error::{IrcError, Result};

/// Systems at or above this size are never densified.
pub const DENSE_LIMIT: usize = 50_000;

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol: f64,
    pub restart: usize,
    pub max_iter: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-12,
            restart: 60,
            max_iter: 2_000,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Restarted GMRES for `A x = b`, starting from zero. `apply(x, out)` writes
/// `A x` into `out`. Returns the solution and the final relative residual.
pub fn gmres<F>(apply: F, b: &[f64], opts: SolveOptions) -> (Vec<f64>, f64)
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut x = vec![0.0; n];
    let b_norm = norm(b);
    if b_norm == 0.0 {
        return (x, 0.0);
    }
    let m = opts.restart.max(1).min(n.max(1));
    let mut r = b.to_vec();
    let mut scratch = vec![0.0; n];
    let mut total = 0;
    let mut rel = 1.0;
    while total < opts.max_iter {
        let beta = norm(&r);
        rel = beta / b_norm;
        if rel <= opts.tol {
            break;
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut used = 0;
        for j in 0..m {
            apply(&basis[j], &mut scratch);
            let mut w = scratch.clone();
            // Modified Gram-Schmidt, twice for stability.
            for _ in 0..2 {
                for (i, v) in basis.iter().enumerate() {
                    let c = dot(&w, v);
                    h[i][j] += c;
                    for (wk, vk) in w.iter_mut().zip(v) {
                        *wk -= c * vk;
                    }
                }
            }
            let w_norm = norm(&w);
            h[j + 1][j] = w_norm;
            for i in 0..j {
                let t = cs[i] * h[i][j] + sn[i] * h[i + 1][j];
                h[i + 1][j] = -sn[i] * h[i][j] + cs[i] * h[i + 1][j];
                h[i][j] = t;
            }
            let denom = (h[j][j] * h[j][j] + h[j + 1][j] * h[j + 1][j]).sqrt();
            if denom == 0.0 {
                break;
            }
            cs[j] = h[j][j] / denom;
            sn[j] = h[j + 1][j] / denom;
            h[j][j] = denom;
            h[j + 1][j] = 0.0;
            g[j + 1] = -sn[j] * g[j];
            g[j] *= cs[j];
            used = j + 1;
            total += 1;
            rel = g[j + 1].abs() / b_norm;
            if rel <= opts.tol || w_norm == 0.0 || total >= opts.max_iter {
                break;
            }
            basis.push(w.iter().map(|v| v / w_norm).collect());
        }
        // Back-substitute the small triangular system.
        let mut y = vec![0.0; used];
        for i in (0..used).rev() {
            let mut s = g[i];
            for k in i + 1..used {
                s -= h[i][k] * y[k];
            }
            y[i] = s / h[i][i];
        }
        for (i, yi) in y.iter().enumerate() {
            for (xk, vk) in x.iter_mut().zip(&basis[i]) {
                *xk += yi * vk;
            }
        }
        apply(&x, &mut scratch);
        for k in 0..n {
            r[k] = b[k] - scratch[k];
        }
        rel = norm(&r) / b_norm;
        if rel <= opts.tol || used == 0 {
            break;
        }
    }
    (x, rel)
}

/// Materialize the operator column by column and solve with partial-pivot LU.
pub fn dense_solve<F>(apply: F, b: &[f64]) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    if n >= DENSE_LIMIT {
        return Err(IrcError::numerical(format!(
            "system with {n} unknowns is too large for a dense solve"
        )));
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        apply(&e, &mut col);
        for i in 0..n {
            a[(i, j)] = col[i];
        }
        e[j] = 0.0;
    }
    let lu = a.clone().lu();
    let x = lu.solve(&DVector::from_column_slice(b)).ok_or_else(|| IrcError::Numerical {
        message: "singular linear system".into(),
        condition_estimate: Some(f64::INFINITY),
    })?;
    let cond = condition_estimate(&a);
    if !(cond.is_finite() && cond < 1e14) {
        return Err(IrcError::Numerical {
            message: "ill-conditioned linear system".into(),
            condition_estimate: Some(cond),
        });
    }
    Ok(x.iter().copied().collect())
}

fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    let svd = a.clone().svd(false, false);
    let s = &svd.singular_values;
    let max = s.max();
    let min = s.min();
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve `A x = b`: GMRES first, dense LU when GMRES stalls on a system small
/// enough to densify.
pub fn solve<F>(apply: F, b: &[f64], opts: SolveOptions) -> Result<Vec<f64>>
where
    F: Fn(&[f64], &mut [f64]),
{
    let (x, rel) = gmres(&apply, b, opts);
    if rel <= opts.tol * 10.0 {
        return Ok(x);
    }
    if b.len() < DENSE_LIMIT {
        return dense_solve(&apply, b);
    }
    Err(IrcError::Numerical {
        message: format!("GMRES stalled at relative residual {rel:e}"),
        condition_estimate: None,
    })
}

/// Estimate the spectral radius of a linear operator by power iteration on
/// the growth rate `||A^k v||^(1/k)`.
pub fn spectral_radius<F>(apply: F, n: usize, iterations: usize) -> f64
where
    F: Fn(&[f64], &mut [f64]),
{
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let v_norm = norm(&v);
    v.iter_mut().for_each(|x| *x /= v_norm);
    let mut out = vec![0.0; n];
    let mut log_growth = 0.0;
    let mut counted = 0;
    for k in 0..iterations {
        apply(&v, &mut out);
        let g = norm(&out);
        if g == 0.0 {
            return 0.0;
        }
        // Skip the transient before averaging.
        if k >= iterations / 2 {
            log_growth += g.ln();
            counted += 1;
        }
        for (vi, oi) in v.iter_mut().zip(&out) {
            *vi = oi / g;
        }
    }
    (log_growth / counted.max(1) as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiagonal(x: &[f64], out: &mut [f64]) {
        let n = x.len();
        for i in 0..n {
            let mut s = 4.0 * x[i];
            if i > 0 {
                s -= x[i - 1];
            }
            if i + 1 < n {
                s -= 2.0 * x[i + 1];
            }
            out[i] = s;
        }
    }

    #[test]
    fn gmres_solves_nonsymmetric_system() {
        let b: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let (x, rel) = gmres(tridiagonal, &b, SolveOptions::default());
        assert!(rel < 1e-11);
        let mut check = vec![0.0; 200];
        tridiagonal(&x, &mut check);
        for (c, bi) in check.iter().zip(&b) {
            assert!((c - bi).abs() < 1e-9);
        }
    }

    #[test]
    fn dense_matches_gmres() {
        let b: Vec<f64> = (0..40).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let (x, _) = gmres(tridiagonal, &b, SolveOptions::default());
        let y = dense_solve(tridiagonal, &b).unwrap();
        for (a, c) in x.iter().zip(&y) {
            assert!((a - c).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_system_is_reported() {
        let zero = |_: &[f64], out: &mut [f64]| out.iter_mut().for_each(|o| *o = 0.0);
        assert!(matches!(
            dense_solve(zero, &[1.0, 2.0]),
            Err(IrcError::Numerical { .. })
        ));
    }

    #[test]
    fn power_iteration_on_diagonal() {
        let diag = |x: &[f64], out: &mut [f64]| {
            for (i, (o, v)) in out.iter_mut().zip(x).enumerate() {
                *o = v * (0.3 + 0.5 * i as f64 / x.len() as f64);
            }
        };
        let rho = spectral_radius(diag, 10, 400);
        assert!((rho - 0.75).abs() < 0.01, "{rho}");
    }
}
