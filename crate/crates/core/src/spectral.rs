//! Low-lying spectrum of the twisted Dirac operator `A = Pi D Pi` on spinors
//! tangent along a map, spectral projections, and the gap `lambda+`.
//!
//! Eigenpairs are computed by block shift-invert Krylov iteration with
//! locking: each restart starts from the best unconverged Ritz vectors of the
//! previous one (topped up with random vectors) orthogonal to the locked
//! vectors, builds a Krylov space of `(A - sigma)^{-1}` with preconditioned
//! MINRES solves, and locks the Ritz pairs whose true residual is small.
//! Restarts continue until the nearest remaining eigenvalue lies beyond the
//! requested count, so degenerate clusters are always complete.

use nalgebra::{Cholesky, DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::SurfaceDomain;
use crate::error::{Error, Result};
use crate::functional::{project_spinor, MapField};
use crate::krylov::minres;
use crate::spin::{self, PlainSpinorField};

/// Knobs of the eigensolver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EigenOptions {
    pub block_size: usize,
    pub krylov_steps: usize,
    pub max_restarts: usize,
    /// Residual bound for locking, relative to the spectral scale.
    pub lock_tolerance: f64,
    pub inner_tolerance: f64,
    pub inner_max_iter: usize,
    pub seed: u64,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            block_size: 16,
            krylov_steps: 10,
            max_restarts: 60,
            lock_tolerance: 1e-10,
            inner_tolerance: 1e-13,
            inner_max_iter: 600,
            seed: 0x5eed,
        }
    }
}

/// Spectral scale `2 pi / side_length`.
pub fn spectral_scale(domain: &SurfaceDomain) -> f64 {
    2.0 * std::f64::consts::PI / domain.side_length()
}

/// Default kernel threshold: `1e-6` times the spectral scale.
pub fn default_zero_threshold(domain: &SurfaceDomain) -> f64 {
    1e-6 * spectral_scale(domain)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectralSign {
    Negative,
    Zero,
    Positive,
}

/// Resolved low-lying spectrum of `D_phi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralData {
    /// Ordered by `|lambda|`, negative before positive within a tie.
    pub eigenvalues: Vec<f64>,
    pub eigenspinors: Vec<PlainSpinorField>,
    pub residuals: Vec<f64>,
    pub zero_threshold: f64,
    pub lambda_plus: Option<f64>,
    /// First positive eigenspinor, unit in the H^{1/2} norm.
    pub e_plus: Option<PlainSpinorField>,
    /// The H^{1/2}-unit minimizer of the `lambda+` problem.
    pub lambda_plus_direction: Option<PlainSpinorField>,
    pub map_fingerprint: u64,
    pub restarts: usize,
}

impl SpectralData {
    pub fn sign_of(&self, i: usize) -> SpectralSign {
        let l = self.eigenvalues[i];
        if l.abs() < self.zero_threshold {
            SpectralSign::Zero
        } else if l > 0.0 {
            SpectralSign::Positive
        } else {
            SpectralSign::Negative
        }
    }

    pub fn indices(&self, sign: SpectralSign) -> Vec<usize> {
        (0..self.eigenvalues.len()).filter(|&i| self.sign_of(i) == sign).collect()
    }

    pub fn kernel_dimension(&self) -> usize {
        self.indices(SpectralSign::Zero).len()
    }

    /// Smallest positive eigenvalue.
    pub fn smallest_positive(&self) -> Option<f64> {
        self.indices(SpectralSign::Positive)
            .into_iter()
            .map(|i| self.eigenvalues[i])
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |y| y.min(x))))
    }

    pub fn check_map(&self, phi: &MapField) -> Result<()> {
        if phi.fingerprint() != self.map_fingerprint {
            return Err(Error::StaleSpectralData);
        }
        Ok(())
    }
}

struct Operator<'a> {
    domain: &'a SurfaceDomain,
    phi: &'a MapField,
}

impl Operator<'_> {
    fn apply(&self, x: &PlainSpinorField) -> PlainSpinorField {
        let d = spin::untwisted_dirac(self.domain, x).expect("shape checked");
        project_spinor(self.domain, self.phi, &d)
    }

    /// Inputs are already tangent (MINRES only feeds residuals of tangent
    /// data), so only the output is projected.
    fn precondition(&self, x: &PlainSpinorField) -> PlainSpinorField {
        let r = spin::resolvent_precondition(self.domain, x).expect("shape checked");
        project_spinor(self.domain, self.phi, &r)
    }
}

fn orthonormalize_against(
    domain: &SurfaceDomain,
    x: &mut PlainSpinorField,
    sets: &[&[PlainSpinorField]],
) -> f64 {
    let before = x.norm(domain);
    let mut after = before;
    // Second pass only after heavy cancellation.
    for _ in 0..2 {
        let start = after;
        for set in sets {
            for q in set.iter() {
                let c = q.inner(domain, x);
                x.axpy_complex(-c, q);
            }
        }
        after = x.norm(domain);
        if after > 0.7 * start {
            break;
        }
    }
    if after > 0.0 {
        x.scale(1.0 / after);
    }
    if before > 0.0 {
        after / before
    } else {
        0.0
    }
}

fn random_tangent(domain: &SurfaceDomain, phi: &MapField, rng: &mut ChaCha8Rng) -> PlainSpinorField {
    let l = phi.ambient_dim();
    let values = (0..domain.vertex_count() * 2 * l)
        .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect();
    project_spinor(domain, phi, &PlainSpinorField { ambient_dim: l, values })
}

/// Small Hermitian eigenproblem, eigenvalues ascending.
fn hermitian_eigen(h: &DMatrix<Complex64>) -> (Vec<f64>, DMatrix<Complex64>) {
    let sym = (h + h.adjoint()) * Complex64::new(0.5, 0.0);
    let dim = sym.nrows();
    let eig = sym.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(dim, order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

fn combine(basis: &[PlainSpinorField], coef: impl Fn(usize) -> Complex64) -> PlainSpinorField {
    let mut out = basis[0].scaled(0.0);
    for (j, b) in basis.iter().enumerate() {
        out.axpy_complex(coef(j), b);
    }
    out
}

/// Locked eigenpair.
struct Pair {
    value: f64,
    vector: PlainSpinorField,
}

/// The `m` eigenpairs of `D_phi` nearest zero (clusters completed).
pub fn dirac_spectrum(domain: &SurfaceDomain, phi: &MapField, m: usize, zero_threshold: f64) -> Result<SpectralData> {
    dirac_spectrum_with(domain, phi, m, zero_threshold, &EigenOptions::default())
}

/// Unconverged Ritz vector kept across a restart, with its residual
/// `D x - lam x`.
struct Carried {
    vector: PlainSpinorField,
    residual: PlainSpinorField,
    value: f64,
}

/// Largest residual, as a fraction of the gap to the cut, at which an
/// unconverged leading Ritz pair certifies that the wanted set is complete.
const SEPARATION_FRACTION: f64 = 0.1;

pub fn dirac_spectrum_with(
    domain: &SurfaceDomain,
    phi: &MapField,
    m: usize,
    zero_threshold: f64,
    opts: &EigenOptions,
) -> Result<SpectralData> {
    if m == 0 {
        return Err(Error::config("spectrum.m", "number of eigenpairs must be at least 1"));
    }
    if !(zero_threshold >= 0.0) {
        return Err(Error::config("spectrum.zero_threshold", "threshold must be nonnegative"));
    }
    let op = Operator { domain, phi };
    let scale = spectral_scale(domain);
    let sigma = -1e-3 * scale;
    let lock_tol = opts.lock_tolerance * scale;
    let cluster_tol = 1e-8 * scale;
    let tangent_dim = domain.vertex_count() * 2 * 2;
    let m = m.min(tangent_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut locked: Vec<Pair> = Vec::new();
    let mut restarts = 0;
    let mut worst = f64::INFINITY;
    let mut carry: Vec<Carried> = Vec::new();
    let shifted = |x: &PlainSpinorField| {
        let mut y = op.apply(x);
        y.axpy(-sigma, x);
        y
    };
    let solve = |b: &PlainSpinorField| {
        let (t, _) = minres(&shifted, |x| op.precondition(x), b, opts.inner_tolerance, opts.inner_max_iter);
        project_spinor(domain, phi, &t)
    };
    loop {
        if restarts >= opts.max_restarts {
            return Err(Error::Eigensolver {
                iterations: restarts,
                converged: locked.len(),
                wanted: m,
                residual: worst,
            });
        }
        restarts += 1;
        let locked_vecs: Vec<PlainSpinorField> = locked.iter().map(|p| p.vector.clone()).collect();
        let remaining = tangent_dim.saturating_sub(locked.len());
        if remaining == 0 {
            break;
        }
        let block = opts.block_size.min(remaining);
        let budget = (opts.block_size * opts.krylov_steps).min(remaining);
        let mut basis: Vec<PlainSpinorField> = Vec::new();
        let mut images: Vec<PlainSpinorField> = Vec::new();
        let mut current: Vec<PlainSpinorField> = Vec::new();

        // Carried vectors enter with their images from a residual solve:
        // B x = (x - B r) / (lam - sigma) keeps full relative accuracy in
        // the new direction B r even when x is nearly converged.
        for c in carry.drain(..) {
            let mut x = c.vector;
            if orthonormalize_against(domain, &mut x, &[&locked_vecs, &basis]) < 0.5 {
                continue;
            }
            let w = solve(&c.residual);
            let mut bx = x.sub(&w);
            bx.scale(1.0 / (c.value - sigma));
            basis.push(x);
            images.push(bx);
            current.push(w);
        }
        let mut next = Vec::new();
        for mut w in current.drain(..) {
            if orthonormalize_against(domain, &mut w, &[&locked_vecs, &basis, &next]) > 1e-10 {
                next.push(w);
            }
        }
        current = next;
        let mut tries = 0;
        while current.len() < block && tries < 4 * block {
            tries += 1;
            let mut x = random_tangent(domain, phi, &mut rng);
            if orthonormalize_against(domain, &mut x, &[&locked_vecs, &basis, &current]) > 1e-6 {
                current.push(x);
            }
        }
        while !current.is_empty() && basis.len() < budget {
            let take = current.len().min(budget - basis.len());
            current.truncate(take);
            let next: Vec<PlainSpinorField> = current.iter().map(|v| solve(v)).collect();
            basis.append(&mut current);
            images.extend(next.iter().cloned());
            for mut x in next {
                if orthonormalize_against(domain, &mut x, &[&locked_vecs, &basis, &current]) > 1e-10 {
                    current.push(x);
                }
            }
        }
        if basis.is_empty() {
            break;
        }
        let k = basis.len();
        let mut h = DMatrix::<Complex64>::zeros(k, k);
        for i in 0..k {
            for j in i..k {
                let hij = basis[i].inner(domain, &images[j]);
                h[(i, j)] = hij;
                h[(j, i)] = hij.conj();
            }
        }
        let (theta, y) = hermitian_eigen(&h);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| theta[b].abs().partial_cmp(&theta[a].abs()).unwrap());
        let cut_before = cut_value(&locked, m);
        let mut top_converged = None;
        let mut lead: Option<(f64, f64)> = None;
        let mut newly: Vec<Pair> = Vec::new();
        for (rank, &i) in order.iter().enumerate() {
            if theta[i].abs() < 1e-300 {
                continue;
            }
            let mut x = combine(&basis, |j| y[(j, i)]);
            let newly_vecs: Vec<PlainSpinorField> = newly.iter().map(|p| p.vector.clone()).collect();
            if orthonormalize_against(domain, &mut x, &[&locked_vecs, &newly_vecs]) < 0.5 {
                continue;
            }
            x = project_spinor(domain, phi, &x);
            let nx = x.norm(domain);
            x.scale(1.0 / nx);
            let ax = op.apply(&x);
            let lam = x.dot_re(domain, &ax);
            let mut r = ax;
            r.axpy(-lam, &x);
            let res = r.norm(domain);
            if rank == 0 {
                worst = res;
            }
            if res <= lock_tol {
                if rank == 0 {
                    top_converged = Some(lam);
                }
                newly.push(Pair {
                    value: lam,
                    vector: x,
                });
            } else {
                if lead.is_none() {
                    lead = Some((lam, res));
                }
                if carry.len() < block {
                    carry.push(Carried {
                        vector: x,
                        residual: r,
                        value: lam,
                    });
                }
            }
            if rank > 2 * block + 8 && res > lock_tol {
                break;
            }
        }
        let found_inside = newly
            .iter()
            .any(|p| cut_before.is_none_or(|c| p.value.abs() <= c + cluster_tol));
        locked.extend(newly);
        if let (Some(cut), Some(top)) = (cut_before, top_converged) {
            if top.abs() > cut + cluster_tol && !found_inside {
                break;
            }
        }
        // The leading unlocked Ritz pair need not converge fully: once its
        // residual interval clears the cut by a margin, every eigenvalue
        // still unlocked lies outside the wanted set. Ritz values are
        // ordered by distance to the shift, hence the 2 |sigma| slack.
        if let (Some(cut), Some((lam, res))) = (cut_value(&locked, m), lead) {
            let gap = lam.abs() - 2.0 * sigma.abs() - cut;
            if gap - res > cluster_tol && res <= SEPARATION_FRACTION * gap {
                break;
            }
        }
    }
    finish(domain, phi, locked, m, zero_threshold, restarts)
}

fn cut_value(locked: &[Pair], m: usize) -> Option<f64> {
    if locked.len() < m {
        return None;
    }
    let mut a: Vec<f64> = locked.iter().map(|p| p.value.abs()).collect();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Some(a[m - 1])
}

/// Spinor translation by one cell with the seam sign: `(T psi)(v) = s psi(v + e)`.
fn shift_spinor(domain: &SurfaceDomain, psi: &PlainSpinorField, axis: usize, forward: bool) -> PlainSpinorField {
    let mut out = psi.scaled(0.0);
    for v in 0..domain.vertex_count() {
        let (u, s) = if forward {
            (domain.forward(v, axis), domain.spinor_sign_forward(v, axis))
        } else {
            (domain.backward(v, axis), domain.spinor_sign_backward(v, axis))
        };
        let src = psi.vertex(u).to_vec();
        for (o, z) in out.vertex_mut(v).iter_mut().zip(src) {
            *o = z * s;
        }
    }
    out
}

/// Hermitian operator used to pick a canonical basis inside degenerate
/// clusters; on flat targets its joint eigenvectors are plane waves.
fn tie_break(domain: &SurfaceDomain, psi: &PlainSpinorField) -> PlainSpinorField {
    const C: [f64; 4] = [0.913_5, 0.886_8, 0.715_2, 0.755_6];
    let half_i = Complex64::new(0.0, -0.5);
    let mut out = psi.scaled(0.0);
    for axis in 0..2 {
        let p = shift_spinor(domain, psi, axis, true);
        let m = shift_spinor(domain, psi, axis, false);
        let diff = p.sub(&m);
        let sum = p.add(&m);
        out.axpy_complex(half_i * C[2 * axis], &diff);
        out.axpy(0.5 * C[2 * axis + 1], &sum);
    }
    let l = psi.ambient_dim;
    for v in 0..domain.vertex_count() {
        for c in 0..l {
            for s in 0..2 {
                let k = psi.index(v, c, s);
                let w = 0.453_2 * (c as f64 + 1.0) + 0.189_4 * s as f64;
                out.values[k] += psi.values[k] * w;
            }
        }
    }
    out
}

fn normalize_phase(x: &mut PlainSpinorField) {
    let peak = x.max_abs();
    if let Some(z) = x.values.iter().find(|z| z.norm() > 0.5 * peak) {
        let ph = z.conj() / z.norm();
        x.scale_complex(ph);
    }
}

fn finish(
    domain: &SurfaceDomain,
    phi: &MapField,
    mut locked: Vec<Pair>,
    m: usize,
    zero_threshold: f64,
    restarts: usize,
) -> Result<SpectralData> {
    let scale = spectral_scale(domain);
    let cluster_tol = 1e-8 * scale;
    locked.sort_by(|a, b| a.value.partial_cmp(&b.value).unwrap());
    let mut clusters: Vec<Vec<Pair>> = Vec::new();
    for p in locked {
        match clusters.last_mut() {
            Some(c) if (p.value - c.last().unwrap().value).abs() <= cluster_tol => c.push(p),
            _ => clusters.push(vec![p]),
        }
    }
    let center = |c: &Vec<Pair>| c.iter().map(|p| p.value).sum::<f64>() / c.len() as f64;
    clusters.sort_by(|a, b| {
        let (ca, cb) = (center(a), center(b));
        if (ca.abs() - cb.abs()).abs() <= cluster_tol {
            ca.partial_cmp(&cb).unwrap()
        } else {
            ca.abs().partial_cmp(&cb.abs()).unwrap()
        }
    });
    let op = Operator { domain, phi };
    let mut values = Vec::new();
    let mut vectors = Vec::new();
    let mut residuals = Vec::new();
    let mut last_abs = 0.0f64;
    for cluster in clusters {
        // Clusters at the same |lambda| as the last included one are kept too.
        if values.len() >= m && center(&cluster).abs() > last_abs + cluster_tol {
            break;
        }
        last_abs = center(&cluster).abs();
        let basis: Vec<PlainSpinorField> = cluster.iter().map(|p| p.vector.clone()).collect();
        let k = basis.len();
        let rotated: Vec<PlainSpinorField> = if k == 1 {
            basis
        } else {
            let images: Vec<PlainSpinorField> = basis.iter().map(|b| tie_break(domain, b)).collect();
            let mut h = DMatrix::<Complex64>::zeros(k, k);
            for i in 0..k {
                for j in 0..k {
                    h[(i, j)] = basis[i].inner(domain, &images[j]);
                }
            }
            let (_, y) = hermitian_eigen(&h);
            (0..k).map(|c| combine(&basis, |j| y[(j, c)])).collect()
        };
        for mut x in rotated {
            let n = x.norm(domain);
            x.scale(1.0 / n);
            normalize_phase(&mut x);
            let ax = op.apply(&x);
            let lam = x.dot_re(domain, &ax);
            let mut r = ax;
            r.axpy(-lam, &x);
            values.push(lam);
            residuals.push(r.norm(domain));
            vectors.push(x);
        }
    }
    if values.is_empty() {
        return Err(Error::Eigensolver {
            iterations: restarts,
            converged: 0,
            wanted: m,
            residual: f64::INFINITY,
        });
    }
    let mut data = SpectralData {
        eigenvalues: values,
        eigenspinors: vectors,
        residuals,
        zero_threshold,
        lambda_plus: None,
        e_plus: None,
        lambda_plus_direction: None,
        map_fingerprint: phi.fingerprint(),
        restarts,
    };
    if let Some(i) = data.indices(SpectralSign::Positive).into_iter().next() {
        let e = &data.eigenspinors[i];
        let nh = spin::h_half_norm(domain, e)?;
        data.e_plus = Some(e.scaled(1.0 / nh));
        let (lp, dir) = solve_lambda_plus(domain, &data)?;
        data.lambda_plus = Some(lp);
        data.lambda_plus_direction = Some(dir);
    }
    Ok(data)
}

/// Projected generalized eigenproblem for `lambda+` on the resolved
/// positive subspace.
fn solve_lambda_plus(domain: &SurfaceDomain, data: &SpectralData) -> Result<(f64, PlainSpinorField)> {
    let idx = data.indices(SpectralSign::Positive);
    if idx.is_empty() {
        return Err(Error::EmptyPositiveSubspace);
    }
    let k = idx.len();
    let vecs: Vec<&PlainSpinorField> = idx.iter().map(|&i| &data.eigenspinors[i]).collect();
    let weighted: Vec<PlainSpinorField> = vecs
        .iter()
        .map(|e| spin::one_plus_abs_dirac(domain, e))
        .collect::<Result<_>>()?;
    let mut b = DMatrix::<Complex64>::zeros(k, k);
    let mut a = DMatrix::<Complex64>::zeros(k, k);
    for i in 0..k {
        a[(i, i)] = Complex64::new(data.eigenvalues[idx[i]], 0.0);
        for j in 0..k {
            b[(i, j)] = vecs[i].inner(domain, &weighted[j]);
        }
    }
    let b = (&b + b.adjoint()) * Complex64::new(0.5, 0.0);
    let chol = Cholesky::new(b).ok_or_else(|| Error::Experiment("H^{1/2} Gram matrix is not positive definite".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Experiment("singular Cholesky factor".into()))?;
    let c = &linv * a * linv.adjoint();
    let (vals, ys) = hermitian_eigen(&c);
    let y: DVector<Complex64> = ys.column(0).into_owned();
    let coef = linv.adjoint() * y;
    let mut dir = combine(&vecs.iter().map(|v| (*v).clone()).collect::<Vec<_>>(), |j| coef[j]);
    let nh = spin::h_half_norm(domain, &dir)?;
    dir.scale(1.0 / nh);
    normalize_phase(&mut dir);
    Ok((vals[0], dir))
}

/// `lambda+(phi)` from spectral data computed for `phi`.
pub fn lambda_plus(phi: &MapField, data: &SpectralData) -> Result<f64> {
    data.check_map(phi)?;
    data.lambda_plus.ok_or(Error::EmptyPositiveSubspace)
}

/// Outcome of [`lambda_plus_stabilized`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilizedLambdaPlus {
    pub value: f64,
    pub history: Vec<(usize, f64)>,
    pub stabilized: bool,
}

/// Recompute `lambda+` with `m` doubled until the value changes by at most
/// `1e-6` relative.
pub fn lambda_plus_stabilized(
    domain: &SurfaceDomain,
    phi: &MapField,
    m0: usize,
    max_m: usize,
) -> Result<(StabilizedLambdaPlus, SpectralData)> {
    let zt = default_zero_threshold(domain);
    let mut m = m0.max(1);
    let mut data = dirac_spectrum(domain, phi, m, zt)?;
    let mut history = vec![(data.eigenvalues.len(), lambda_plus(phi, &data)?)];
    loop {
        let next_m = 2 * m;
        if next_m > max_m {
            return Ok((
                StabilizedLambdaPlus {
                    value: history.last().unwrap().1,
                    history,
                    stabilized: false,
                },
                data,
            ));
        }
        let next = dirac_spectrum(domain, phi, next_m, zt)?;
        let v = lambda_plus(phi, &next)?;
        let prev = history.last().unwrap().1;
        history.push((next.eigenvalues.len(), v));
        data = next;
        m = next_m;
        if (v - prev).abs() <= 1e-6 * prev.abs() {
            return Ok((
                StabilizedLambdaPlus {
                    value: v,
                    history,
                    stabilized: true,
                },
                data,
            ));
        }
    }
}

/// Result of a spectral projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub field: PlainSpinorField,
    /// Set when `psi` has a component outside the resolved span.
    pub partial: bool,
}

/// `P^sign psi` within the resolved span.
pub fn spectral_projection(
    domain: &SurfaceDomain,
    phi: &MapField,
    data: &SpectralData,
    psi: &PlainSpinorField,
    sign: SpectralSign,
) -> Result<Projection> {
    data.check_map(phi)?;
    psi.check(domain)?;
    let mut field = psi.scaled(0.0);
    let mut all = psi.scaled(0.0);
    for (i, e) in data.eigenspinors.iter().enumerate() {
        let c = e.inner(domain, psi);
        all.axpy_complex(c, e);
        if data.sign_of(i) == sign {
            field.axpy_complex(c, e);
        }
    }
    let rest = psi.sub(&all).norm(domain);
    Ok(Projection {
        field,
        partial: rest > 1e-10 * psi.norm(domain).max(f64::MIN_POSITIVE),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SpinStructure;
    use crate::target::{FlatTorus2, Target};

    fn flat(n: usize, sx: i32, sy: i32) -> (SurfaceDomain, MapField) {
        let d = SurfaceDomain::new(n, 1.0, SpinStructure::from_signs(sx, sy).unwrap()).unwrap();
        let phi = MapField::affine_torus(&d, FlatTorus2::default(), [[1, 0], [0, 1]], [0.0, 0.0]).unwrap();
        (d, phi)
    }

    fn symbol_list(d: &SurfaceDomain, copies: usize) -> Vec<f64> {
        let mut s: Vec<f64> = spin::admissible_frequencies(d)
            .into_iter()
            .flat_map(|t| {
                let (a, b) = spin::dirac_symbol(d, t).unwrap();
                std::iter::repeat_n([a, b], copies).flatten()
            })
            .collect();
        let key = |x: f64| ((x.abs() * 1e9).round() as i64, x > 0.0);
        s.sort_by_key(|x| key(*x));
        s
    }

    #[test]
    fn flat_spectrum_matches_symbol() {
        for (sx, sy) in [(-1, -1), (1, -1), (1, 1)] {
            let (d, phi) = flat(8, sx, sy);
            let data = dirac_spectrum(&d, &phi, 20, default_zero_threshold(&d)).unwrap();
            let sym = symbol_list(&d, 2);
            assert!(data.eigenvalues.len() >= 20);
            for (a, b) in data.eigenvalues.iter().zip(&sym) {
                assert!((a - b).abs() < 1e-8, "({sx},{sy}) {a} vs {b}");
            }
            assert!(data.residuals.iter().all(|r| *r <= 1e-8));
            for i in 0..data.eigenspinors.len() {
                for j in 0..data.eigenspinors.len() {
                    let g = data.eigenspinors[i].inner(&d, &data.eigenspinors[j]);
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((g - Complex64::new(want, 0.0)).norm() < 1e-10);
                }
            }
            let kernel = data.kernel_dimension();
            if (sx, sy) == (1, 1) {
                assert_eq!(kernel, 16);
            } else {
                assert_eq!(kernel, 0);
            }
        }
    }

    #[test]
    fn flat_eigenspinors_are_plane_waves() {
        let (d, phi) = flat(8, -1, -1);
        let data = dirac_spectrum(&d, &phi, 8, default_zero_threshold(&d)).unwrap();
        let e = data.e_plus.as_ref().unwrap();
        let m = e.modulus_sqr();
        assert!(m.iter().all(|x| (x - m[0]).abs() < 1e-10 * m[0]));
        let lmin = data.smallest_positive().unwrap();
        let lp = data.lambda_plus.unwrap();
        assert!((lp - lmin / (1.0 + lmin)).abs() < 1e-8);
        let neg = data.eigenvalues.iter().copied().filter(|x| *x < 0.0).fold(f64::NEG_INFINITY, f64::max);
        assert!((lmin + neg).abs() < 1e-8);
    }

    #[test]
    fn sphere_spectrum_matches_dense_oracle() {
        let d = SurfaceDomain::new(6, 1.0, SpinStructure::from_signs(-1, 1).unwrap()).unwrap();
        let phi = MapField::smooth_sphere_map(&d, 0.6, 4).unwrap();
        let data = dirac_spectrum(&d, &phi, 10, default_zero_threshold(&d)).unwrap();
        let dim = d.vertex_count() * 6;
        let mut mat = DMatrix::<Complex64>::zeros(dim, dim);
        let mut e = PlainSpinorField::zeros(&d, 3);
        let op = Operator { domain: &d, phi: &phi };
        for c in 0..dim {
            e.values[c] = Complex64::new(1.0, 0.0);
            let p = project_spinor(&d, &phi, &e);
            let a = op.apply(&p);
            for r in 0..dim {
                mat[(r, c)] = a.values[r];
            }
            e.values[c] = Complex64::new(0.0, 0.0);
        }
        let mut eigs: Vec<f64> = mat.symmetric_eigen().eigenvalues.iter().copied().collect();
        eigs.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
        // The normal directions contribute one exact zero per vertex and spin.
        let nonzero: Vec<f64> = eigs.into_iter().skip(d.vertex_count() * 2).collect();
        let mut got = data.eigenvalues.clone();
        got.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap());
        for (a, b) in got.iter().zip(&nonzero) {
            assert!((a.abs() - b.abs()).abs() < 1e-8, "{a} vs {b}");
        }
        for (x, r) in data.eigenspinors.iter().zip(&data.residuals) {
            assert!(*r <= 1e-8);
            assert!(crate::functional::tangency_violation(&d, &phi, x) < 1e-12);
        }
        assert!(data.lambda_plus.unwrap() > 0.0);
        assert!(data.lambda_plus.unwrap() <= data.smallest_positive().unwrap());
    }

    #[test]
    fn projections_partition_the_span() {
        let (d, phi) = flat(8, 1, 1);
        let data = dirac_spectrum(&d, &phi, 24, default_zero_threshold(&d)).unwrap();
        let mut psi = data.eigenspinors[0].scaled(0.0);
        for (i, e) in data.eigenspinors.iter().enumerate() {
            psi.axpy_complex(Complex64::new((i as f64).sin(), (i as f64).cos()), e);
        }
        let mut sum = psi.scaled(0.0);
        for s in [SpectralSign::Negative, SpectralSign::Zero, SpectralSign::Positive] {
            let p = spectral_projection(&d, &phi, &data, &psi, s).unwrap();
            assert!(!p.partial);
            let pp = spectral_projection(&d, &phi, &data, &p.field, s).unwrap();
            assert!(pp.field.sub(&p.field).norm(&d) < 1e-10);
            sum = sum.add(&p.field);
        }
        assert!(sum.sub(&psi).norm(&d) <= 1e-10 * psi.norm(&d));
        let ip = data.indices(SpectralSign::Positive)[0];
        let e = data.eigenspinors[ip].clone();
        let p = spectral_projection(&d, &phi, &data, &e, SpectralSign::Positive).unwrap();
        assert!(p.field.sub(&e).norm(&d) < 1e-10);
        let n = spectral_projection(&d, &phi, &data, &e, SpectralSign::Negative).unwrap();
        assert!(n.field.norm(&d) < 1e-10);
        let far = spin::plane_wave(&d, 2, 0, [2.0, 2.0], 1.0).unwrap();
        let p = spectral_projection(&d, &phi, &data, &far, SpectralSign::Positive).unwrap();
        assert!(p.partial && p.field.norm(&d) < 1e-10);
        let other = MapField::affine_torus(&d, FlatTorus2::default(), [[1, 0], [0, 1]], [0.1, 0.0]).unwrap();
        assert!(matches!(
            spectral_projection(&d, &other, &data, &psi, SpectralSign::Zero),
            Err(Error::StaleSpectralData)
        ));
    }

    #[test]
    fn single_mode_lambda_plus() {
        let (d, phi) = flat(8, -1, 1);
        let data = dirac_spectrum(&d, &phi, 1, default_zero_threshold(&d)).unwrap();
        let lam = data.smallest_positive().unwrap();
        assert!((data.lambda_plus.unwrap() - lam / (1.0 + lam)).abs() < 1e-10);
        let e = data.e_plus.as_ref().unwrap();
        assert!((spin::h_half_norm(&d, e).unwrap() - 1.0).abs() < 1e-12);
        let _ = Target::torus();
    }

    #[test]
    fn no_positive_modes_is_an_error() {
        let (d, phi) = flat(8, -1, -1);
        let mut data = dirac_spectrum(&d, &phi, 1, default_zero_threshold(&d)).unwrap();
        data.eigenvalues.iter_mut().for_each(|x| *x = -x.abs());
        assert!(matches!(solve_lambda_plus(&d, &data), Err(Error::EmptyPositiveSubspace)));
    }
}
