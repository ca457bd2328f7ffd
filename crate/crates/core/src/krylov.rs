//! Matrix-free Krylov solvers.

use num_complex::Complex64;

use crate::spin::PlainSpinorField;

/// Outcome of an iterative linear solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveInfo {
    pub iterations: usize,
    pub relative_residual: f64,
    pub converged: bool,
}

fn cdot(a: &PlainSpinorField, b: &PlainSpinorField) -> Complex64 {
    a.values.iter().zip(&b.values).map(|(x, y)| x.conj() * y).sum()
}

/// Preconditioned MINRES for a Hermitian operator with a Hermitian
/// positive-definite preconditioner.
pub fn minres(
    op: impl Fn(&PlainSpinorField) -> PlainSpinorField,
    precond: impl Fn(&PlainSpinorField) -> PlainSpinorField,
    b: &PlainSpinorField,
    tol: f64,
    max_iter: usize,
) -> (PlainSpinorField, SolveInfo) {
    let mut x = b.scaled(0.0);
    let mut r1 = b.clone();
    let mut y = precond(&r1);
    let beta1 = cdot(&r1, &y).re.max(0.0).sqrt();
    if beta1 == 0.0 {
        return (
            x,
            SolveInfo {
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
            },
        );
    }
    let mut oldb = 0.0;
    let mut beta = beta1;
    let mut dbar = 0.0;
    let mut epsln = 0.0;
    let mut phibar = beta1;
    let mut cs = -1.0;
    let mut sn = 0.0;
    let mut w = b.scaled(0.0);
    let mut w2 = b.scaled(0.0);
    let mut r2 = r1.clone();
    for itn in 1..=max_iter {
        let v = y.scaled(1.0 / beta);
        y = op(&v);
        if itn >= 2 {
            y.axpy(-beta / oldb, &r1);
        }
        let alfa = cdot(&v, &y).re;
        y.axpy(-alfa / beta, &r2);
        r1 = std::mem::replace(&mut r2, y);
        y = precond(&r2);
        oldb = beta;
        beta = cdot(&r2, &y).re.max(0.0).sqrt();
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = gbar.hypot(beta).max(f64::MIN_POSITIVE);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let w1 = std::mem::replace(&mut w2, w);
        let mut wn = v;
        wn.axpy(-oldeps, &w1);
        wn.axpy(-delta, &w2);
        wn.scale(1.0 / gamma);
        x.axpy(phi, &wn);
        w = wn;
        let rel = phibar / beta1;
        if rel <= tol || beta == 0.0 {
            return (
                x,
                SolveInfo {
                    iterations: itn,
                    relative_residual: rel,
                    converged: true,
                },
            );
        }
    }
    (
        x,
        SolveInfo {
            iterations: max_iter,
            relative_residual: phibar / beta1,
            converged: false,
        },
    )
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Restarted GMRES for a general real operator.
pub fn gmres(
    op: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    tol: f64,
    restart: usize,
    max_iter: usize,
) -> (Vec<f64>, SolveInfo) {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return (
            x,
            SolveInfo {
                iterations: 0,
                relative_residual: 0.0,
                converged: true,
            },
        );
    }
    let mut total = 0;
    let mut rel = 1.0;
    while total < max_iter {
        let ax = op(&x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(a, c)| a - c).collect();
        let beta = dot(&r, &r).sqrt();
        rel = beta / bnorm;
        if rel <= tol {
            break;
        }
        let m = restart.min(max_iter - total);
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut hess = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            total += 1;
            let mut w = op(&basis[k]);
            for _ in 0..2 {
                for (j, q) in basis.iter().enumerate() {
                    let h = dot(&w, q);
                    hess[j][k] += h;
                    for (a, c) in w.iter_mut().zip(q) {
                        *a -= h * c;
                    }
                }
            }
            let hn = dot(&w, &w).sqrt();
            hess[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * hess[j][k] + sn[j] * hess[j + 1][k];
                hess[j + 1][k] = -sn[j] * hess[j][k] + cs[j] * hess[j + 1][k];
                hess[j][k] = t;
            }
            let d = hess[k][k].hypot(hess[k + 1][k]);
            if d == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = hess[k][k] / d;
            sn[k] = hess[k + 1][k] / d;
            hess[k][k] = d;
            hess[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            rel = g[k + 1].abs() / bnorm;
            if rel <= tol || hn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= hess[i][j] * y[j];
            }
            y[i] = s / hess[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for (a, q) in x.iter_mut().zip(&basis[j]) {
                *a += yj * q;
            }
        }
        if rel <= tol {
            let ax = op(&x);
            rel = b.iter().zip(&ax).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt() / bnorm;
            if rel <= tol * 10.0 {
                break;
            }
        }
    }
    (
        x,
        SolveInfo {
            iterations: total,
            relative_residual: rel,
            converged: rel <= tol * 10.0,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{SpinStructure, SurfaceDomain};
    use crate::spin;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn minres_solves_shifted_dirac() {
        let d = SurfaceDomain::new(8, 1.0, SpinStructure::from_signs(1, 1).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = PlainSpinorField {
            ambient_dim: 2,
            values: (0..d.vertex_count() * 4)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        };
        let sigma = -0.01;
        let op = |x: &PlainSpinorField| {
            let mut y = spin::untwisted_dirac(&d, x).unwrap();
            y.axpy(-sigma, x);
            y
        };
        let (x, info) = minres(op, |x| spin::resolvent_precondition(&d, x).unwrap(), &b, 1e-12, 500);
        assert!(info.converged);
        let r = op(&x).sub(&b);
        assert!(r.norm(&d) < 1e-9 * b.norm(&d));
    }

    #[test]
    fn gmres_solves_nonsymmetric_system() {
        let n = 30;
        let a: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 4.0 } else { 1.0 / (1.0 + (i as f64 - 2.0 * j as f64).abs()) }).collect())
            .collect();
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let op = |x: &[f64]| a.iter().map(|row| dot(row, x)).collect::<Vec<_>>();
        let (x, info) = gmres(op, &b, 1e-12, 10, 300);
        assert!(info.converged);
        let r: f64 = op(&x).iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        assert!(r < 1e-10);
    }
}
