//! Spinor algebra: Clifford frame, spinor fields with ambient components,
//! the untwisted Dirac operator and its Fourier functional calculus.
//!
//! A spinor field stores, at every vertex, one `C^2` spinor per ambient
//! coordinate of the target. The flat index of spin component `s` of ambient
//! component `l` at vertex `v` is `(v * L + l) * 2 + s`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::domain::SurfaceDomain;
use crate::error::{Error, Result};

const I: Complex64 = Complex64::new(0.0, 1.0);

/// Clifford multiplication by the orthonormal frame, `e1 = i sigma_1`,
/// `e2 = i sigma_2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CliffordFrame {
    pub e: [[[Complex64; 2]; 2]; 2],
}

impl Default for CliffordFrame {
    fn default() -> Self {
        let z = Complex64::new(0.0, 0.0);
        let one = Complex64::new(1.0, 0.0);
        Self {
            e: [[[z, I], [I, z]], [[z, one], [-one, z]]],
        }
    }
}

impl CliffordFrame {
    pub fn apply(&self, beta: usize, xi: [Complex64; 2]) -> [Complex64; 2] {
        let m = &self.e[beta];
        [m[0][0] * xi[0] + m[0][1] * xi[1], m[1][0] * xi[0] + m[1][1] * xi[1]]
    }
}

/// `e1 . xi` without going through the matrix.
#[inline]
pub(crate) fn e1(xi: [Complex64; 2]) -> [Complex64; 2] {
    [I * xi[1], I * xi[0]]
}

/// `e2 . xi`.
#[inline]
pub(crate) fn e2(xi: [Complex64; 2]) -> [Complex64; 2] {
    [xi[1], -xi[0]]
}

/// Clifford multiplication by the tangent vector `x = x1 e1 + x2 e2`.
pub fn clifford_mul(x: [f64; 2], xi: [Complex64; 2]) -> [Complex64; 2] {
    let a = e1(xi);
    let b = e2(xi);
    [a[0] * x[0] + b[0] * x[1], a[1] * x[0] + b[1] * x[1]]
}

/// Hermitian inner product on `C^2`, antilinear in the first slot.
pub fn spinor_inner(a: [Complex64; 2], b: [Complex64; 2]) -> Complex64 {
    a[0].conj() * b[0] + a[1].conj() * b[1]
}

/// Spinor field with values in `C^2 (x) R^L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainSpinorField {
    pub ambient_dim: usize,
    pub values: Vec<Complex64>,
}

impl PlainSpinorField {
    pub fn zeros(domain: &SurfaceDomain, ambient_dim: usize) -> Self {
        Self {
            ambient_dim,
            values: vec![Complex64::new(0.0, 0.0); domain.vertex_count() * ambient_dim * 2],
        }
    }

    pub fn from_values(domain: &SurfaceDomain, ambient_dim: usize, values: Vec<Complex64>) -> Result<Self> {
        let f = Self { ambient_dim, values };
        f.check(domain)?;
        Ok(f)
    }

    pub fn check(&self, domain: &SurfaceDomain) -> Result<()> {
        let expected = domain.vertex_count() * self.ambient_dim * 2;
        if self.values.len() != expected {
            return Err(Error::Shape {
                what: "spinor field",
                expected,
                found: self.values.len(),
            });
        }
        Ok(())
    }

    #[inline]
    pub fn index(&self, v: usize, l: usize, s: usize) -> usize {
        (v * self.ambient_dim + l) * 2 + s
    }

    #[inline]
    pub fn spinor(&self, v: usize, l: usize) -> [Complex64; 2] {
        let k = self.index(v, l, 0);
        [self.values[k], self.values[k + 1]]
    }

    #[inline]
    pub fn set_spinor(&mut self, v: usize, l: usize, xi: [Complex64; 2]) {
        let k = self.index(v, l, 0);
        self.values[k] = xi[0];
        self.values[k + 1] = xi[1];
    }

    /// The `2L` values at vertex `v`.
    pub fn vertex(&self, v: usize) -> &[Complex64] {
        let w = 2 * self.ambient_dim;
        &self.values[v * w..(v + 1) * w]
    }

    pub fn vertex_mut(&mut self, v: usize) -> &mut [Complex64] {
        let w = 2 * self.ambient_dim;
        &mut self.values[v * w..(v + 1) * w]
    }

    pub fn vertex_count(&self) -> usize {
        self.values.len() / (2 * self.ambient_dim)
    }

    /// `(self, other)_2`, antilinear in `self`.
    pub fn inner(&self, domain: &SurfaceDomain, other: &Self) -> Complex64 {
        let s: Complex64 = self.values.iter().zip(&other.values).map(|(a, b)| a.conj() * b).sum();
        s * domain.weight()
    }

    pub fn dot_re(&self, domain: &SurfaceDomain, other: &Self) -> f64 {
        self.inner(domain, other).re
    }

    pub fn norm_sqr(&self, domain: &SurfaceDomain) -> f64 {
        domain.weight() * self.values.iter().map(|z| z.norm_sqr()).sum::<f64>()
    }

    pub fn norm(&self, domain: &SurfaceDomain) -> f64 {
        self.norm_sqr(domain).sqrt()
    }

    /// Pointwise `|psi(v)|^2` summed over spin and ambient components.
    pub fn modulus_sqr(&self) -> Vec<f64> {
        self.values
            .chunks(2 * self.ambient_dim)
            .map(|c| c.iter().map(|z| z.norm_sqr()).sum())
            .collect()
    }

    pub fn scale(&mut self, c: f64) {
        for z in &mut self.values {
            *z *= c;
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    pub fn scale_complex(&mut self, c: Complex64) {
        for z in &mut self.values {
            *z *= c;
        }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b * c;
        }
    }

    pub fn axpy_complex(&mut self, c: Complex64, other: &Self) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b * c;
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, z| m.max(z.norm()))
    }
}

/// `D psi = sum_beta e_beta . (central difference along beta)`, with the
/// spin-structure sign applied across the seam.
pub fn untwisted_dirac(domain: &SurfaceDomain, psi: &PlainSpinorField) -> Result<PlainSpinorField> {
    psi.check(domain)?;
    let l_dim = psi.ambient_dim;
    let inv = 1.0 / (2.0 * domain.h());
    let mut out = PlainSpinorField::zeros(domain, l_dim);
    for v in 0..domain.vertex_count() {
        for beta in 0..2 {
            let f = domain.forward(v, beta);
            let b = domain.backward(v, beta);
            let sf = domain.spinor_sign_forward(v, beta) * inv;
            let sb = domain.spinor_sign_backward(v, beta) * inv;
            for l in 0..l_dim {
                let pf = psi.spinor(f, l);
                let pb = psi.spinor(b, l);
                let d = [pf[0] * sf - pb[0] * sb, pf[1] * sf - pb[1] * sb];
                let c = if beta == 0 { e1(d) } else { e2(d) };
                let k = out.index(v, l, 0);
                out.values[k] += c[0];
                out.values[k + 1] += c[1];
            }
        }
    }
    Ok(out)
}

/// Per-axis symbol `s_beta = sin(k_beta h) / h` at lattice frequency `theta`,
/// where `k = 2 pi theta / side_length`.
pub fn stencil_symbol(domain: &SurfaceDomain, theta: [f64; 2]) -> [f64; 2] {
    let h = domain.h();
    let l = domain.side_length();
    [
        (2.0 * std::f64::consts::PI * theta[0] / l * h).sin() / h,
        (2.0 * std::f64::consts::PI * theta[1] / l * h).sin() / h,
    ]
}

fn admissible(domain: &SurfaceDomain, theta: [f64; 2]) -> bool {
    let spin = domain.spin_structure();
    (0..2).all(|a| {
        let r = theta[a] - spin.axis(a).offset();
        (r - r.round()).abs() < 1e-12
    })
}

/// Eigenvalues `(-|s|, +|s|)` of the Fourier symbol of [`untwisted_dirac`].
pub fn dirac_symbol(domain: &SurfaceDomain, theta: [f64; 2]) -> Result<(f64, f64)> {
    if !admissible(domain, theta) {
        return Err(Error::InadmissibleFrequency(theta[0], theta[1]));
    }
    let s = stencil_symbol(domain, theta);
    let m = s[0].hypot(s[1]);
    Ok((-m, m))
}

/// Admissible frequencies of the grid: one representative per Fourier mode.
pub fn admissible_frequencies(domain: &SurfaceDomain) -> Vec<[f64; 2]> {
    let n = domain.n() as i64;
    let spin = domain.spin_structure();
    let lo = -(n / 2);
    let mut out = Vec::with_capacity((n * n) as usize);
    for my in lo..lo + n {
        for mx in lo..lo + n {
            out.push([mx as f64 + spin.x.offset(), my as f64 + spin.y.offset()]);
        }
    }
    out
}

/// Plane-wave eigenspinor of `D` in ambient slot `l`, with eigenvalue
/// `sign * |s(theta)|`, normalized to unit L2 norm.
pub fn plane_wave(
    domain: &SurfaceDomain,
    ambient_dim: usize,
    l: usize,
    theta: [f64; 2],
    sign: f64,
) -> Result<PlainSpinorField> {
    if !admissible(domain, theta) {
        return Err(Error::InadmissibleFrequency(theta[0], theta[1]));
    }
    let s = stencil_symbol(domain, theta);
    let angle = if s[0].hypot(s[1]) > 0.0 { s[1].atan2(s[0]) } else { 0.0 };
    // Eigenvector of -(sigma . s) for eigenvalue sign*|s|.
    let amp = 1.0 / (2.0f64.sqrt() * domain.side_length());
    let xi = [Complex64::new(amp, 0.0), -Complex64::from_polar(amp * sign.signum(), angle)];
    let mut psi = PlainSpinorField::zeros(domain, ambient_dim);
    let l_side = domain.side_length();
    for v in 0..domain.vertex_count() {
        let [x, y] = domain.position(v);
        let phase = Complex64::from_polar(
            1.0,
            2.0 * std::f64::consts::PI * (theta[0] * x + theta[1] * y) / l_side,
        );
        psi.set_spinor(v, l, [xi[0] * phase, xi[1] * phase]);
    }
    Ok(psi)
}

/// Apply a function of `|D|` through the twisted 2D FFT.
pub(crate) fn fourier_multiplier(
    domain: &SurfaceDomain,
    psi: &PlainSpinorField,
    f: impl Fn(f64) -> f64,
) -> Result<PlainSpinorField> {
    psi.check(domain)?;
    let n = domain.n();
    let spin = domain.spin_structure();
    let fft = domain.fft();
    let twist_x: Vec<Complex64> = (0..n)
        .map(|i| Complex64::from_polar(1.0, std::f64::consts::PI * 2.0 * spin.x.offset() * i as f64 / n as f64))
        .collect();
    let twist_y: Vec<Complex64> = (0..n)
        .map(|j| Complex64::from_polar(1.0, std::f64::consts::PI * 2.0 * spin.y.offset() * j as f64 / n as f64))
        .collect();
    let mult: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (mx, my) = (idx % n, idx / n);
            let s = stencil_symbol(
                domain,
                [mx as f64 + spin.x.offset(), my as f64 + spin.y.offset()],
            );
            f(s[0].hypot(s[1])) / (n * n) as f64
        })
        .collect();
    let comps = 2 * psi.ambient_dim;
    let mut out = PlainSpinorField::zeros(domain, psi.ambient_dim);
    let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..comps {
        for j in 0..n {
            for i in 0..n {
                let v = i + n * j;
                buf[v] = psi.values[v * comps + c] * (twist_x[i] * twist_y[j]).conj();
            }
        }
        fft2(&mut buf, &mut col, n, &*fft.forward);
        for (b, m) in buf.iter_mut().zip(&mult) {
            *b *= m;
        }
        fft2(&mut buf, &mut col, n, &*fft.inverse);
        for j in 0..n {
            for i in 0..n {
                let v = i + n * j;
                out.values[v * comps + c] = buf[v] * twist_x[i] * twist_y[j];
            }
        }
    }
    Ok(out)
}

/// Apply `f(-Lap_h)` to each of `comps` interleaved periodic scalar fields,
/// where `Lap_h` is the five-point Laplacian.
pub(crate) fn periodic_multiplier(domain: &SurfaceDomain, x: &[f64], comps: usize, f: impl Fn(f64) -> f64) -> Vec<f64> {
    let n = domain.n();
    let h = domain.h();
    let fft = domain.fft();
    let mult: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (mx, my) = (idx % n, idx / n);
            let sx = (std::f64::consts::PI * mx as f64 / n as f64).sin();
            let sy = (std::f64::consts::PI * my as f64 / n as f64).sin();
            f(4.0 * (sx * sx + sy * sy) / (h * h)) / (n * n) as f64
        })
        .collect();
    let mut out = vec![0.0; x.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..comps {
        for v in 0..n * n {
            buf[v] = Complex64::new(x[v * comps + c], 0.0);
        }
        fft2(&mut buf, &mut col, n, &*fft.forward);
        for (b, m) in buf.iter_mut().zip(&mult) {
            *b *= m;
        }
        fft2(&mut buf, &mut col, n, &*fft.inverse);
        for v in 0..n * n {
            out[v * comps + c] = buf[v].re;
        }
    }
    out
}

fn fft2(buf: &mut [Complex64], col: &mut [Complex64], n: usize, plan: &dyn rustfft::Fft<f64>) {
    for row in buf.chunks_mut(n) {
        plan.process(row);
    }
    for i in 0..n {
        for j in 0..n {
            col[j] = buf[i + n * j];
        }
        plan.process(col);
        for j in 0..n {
            buf[i + n * j] = col[j];
        }
    }
}

/// `|D| psi`.
pub fn abs_dirac(domain: &SurfaceDomain, psi: &PlainSpinorField) -> Result<PlainSpinorField> {
    fourier_multiplier(domain, psi, |a| a)
}

/// `(1 + |D|) psi`.
pub fn one_plus_abs_dirac(domain: &SurfaceDomain, psi: &PlainSpinorField) -> Result<PlainSpinorField> {
    fourier_multiplier(domain, psi, |a| 1.0 + a)
}

/// `(1 + |D|)^{-1} psi`.
pub fn resolvent_precondition(domain: &SurfaceDomain, psi: &PlainSpinorField) -> Result<PlainSpinorField> {
    fourier_multiplier(domain, psi, |a| 1.0 / (1.0 + a))
}

/// `Re((1 + |D|) a, b)_2`.
pub fn h_half_inner(domain: &SurfaceDomain, a: &PlainSpinorField, b: &PlainSpinorField) -> Result<f64> {
    b.check(domain)?;
    Ok(one_plus_abs_dirac(domain, a)?.dot_re(domain, b))
}

/// `||psi||_{1/2,2}`.
pub fn h_half_norm(domain: &SurfaceDomain, psi: &PlainSpinorField) -> Result<f64> {
    Ok(h_half_inner(domain, psi, psi)?.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{SpinStructure, Twist};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn random_field(domain: &SurfaceDomain, l: usize, seed: u64) -> PlainSpinorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..domain.vertex_count() * l * 2)
            .map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        PlainSpinorField { ambient_dim: l, values }
    }

    fn dense(domain: &SurfaceDomain, l: usize) -> DMatrix<Complex64> {
        let dim = domain.vertex_count() * l * 2;
        let mut m = DMatrix::zeros(dim, dim);
        let mut e = PlainSpinorField::zeros(domain, l);
        for col in 0..dim {
            e.values[col] = c(1.0, 0.0);
            let d = untwisted_dirac(domain, &e).unwrap();
            for row in 0..dim {
                m[(row, col)] = d.values[row];
            }
            e.values[col] = c(0.0, 0.0);
        }
        m
    }

    #[test]
    fn clifford_relations() {
        let frame = CliffordFrame::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let xi = [c(rng.random(), rng.random()), c(rng.random(), rng.random())];
            let eta = [c(rng.random(), rng.random()), c(rng.random(), rng.random())];
            for b in 0..2 {
                for g in 0..2 {
                    let a = frame.apply(b, frame.apply(g, xi));
                    let d = frame.apply(g, frame.apply(b, xi));
                    let target = if b == g { -2.0 } else { 0.0 };
                    for s in 0..2 {
                        assert!((a[s] + d[s] - xi[s] * target).norm() <= 1e-14);
                    }
                }
                let lhs = spinor_inner(frame.apply(b, xi), eta) + spinor_inner(xi, frame.apply(b, eta));
                assert!(lhs.norm() <= 1e-14);
            }
            let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let lhs = spinor_inner(clifford_mul(x, xi), eta) + spinor_inner(xi, clifford_mul(x, eta));
            assert!(lhs.norm() <= 1e-14);
            assert_eq!(clifford_mul([0.0, 0.0], xi), [c(0.0, 0.0); 2]);
            let twice = clifford_mul([1.0, 0.0], clifford_mul([1.0, 0.0], xi));
            assert!((twice[0] + xi[0]).norm() < 1e-15 && (twice[1] + xi[1]).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_spinor_is_harmonic_for_trivial_structure() {
        let d = SurfaceDomain::new(8, 1.0, SpinStructure::from_signs(1, 1).unwrap()).unwrap();
        let mut psi = PlainSpinorField::zeros(&d, 2);
        for v in 0..d.vertex_count() {
            psi.set_spinor(v, 1, [c(0.3, -0.2), c(1.0, 0.5)]);
        }
        assert!(untwisted_dirac(&d, &psi).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn dirac_is_symmetric() {
        for spin in SpinStructure::all() {
            let d = SurfaceDomain::new(10, 1.7, spin).unwrap();
            let a = random_field(&d, 3, 4);
            let b = random_field(&d, 3, 5);
            let lhs = untwisted_dirac(&d, &a).unwrap().dot_re(&d, &b);
            let rhs = a.dot_re(&d, &untwisted_dirac(&d, &b).unwrap());
            let scale = untwisted_dirac(&d, &a).unwrap().norm(&d) * b.norm(&d);
            assert!((lhs - rhs).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn spectrum_matches_symbol() {
        for n in [4usize, 6] {
            for spin in SpinStructure::all() {
                let d = SurfaceDomain::new(n, 1.0, spin).unwrap();
                let m = dense(&d, 1);
                let mut dense_eigs: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
                dense_eigs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let mut sym: Vec<f64> = admissible_frequencies(&d)
                    .into_iter()
                    .flat_map(|t| {
                        let (a, b) = dirac_symbol(&d, t).unwrap();
                        [a, b]
                    })
                    .collect();
                sym.sort_by(|a, b| a.partial_cmp(b).unwrap());
                for (a, b) in dense_eigs.iter().zip(&sym) {
                    assert!((a - b).abs() < 1e-10, "{spin} n={n}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn antiperiodic_operator_has_no_kernel() {
        let d = SurfaceDomain::new(8, 1.0, SpinStructure::new(Twist::Antiperiodic, Twist::Periodic)).unwrap();
        let eigs = dense(&d, 1).symmetric_eigen().eigenvalues;
        let smallest = eigs.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        let h = d.h();
        let expected = (std::f64::consts::PI * h).sin() / h;
        assert!((smallest - expected).abs() < 1e-10);
        assert!((smallest - std::f64::consts::PI).abs() <= 2.0 * std::f64::consts::PI.powi(3) * h * h);
    }

    #[test]
    fn symbol_examples() {
        let d = SurfaceDomain::new(256, 1.0, SpinStructure::from_signs(1, 1).unwrap()).unwrap();
        assert_eq!(dirac_symbol(&d, [0.0, 0.0]).unwrap(), (0.0, 0.0));
        let (lo, hi) = dirac_symbol(&d, [1.0, 0.0]).unwrap();
        assert!((hi - 2.0 * std::f64::consts::PI).abs() < 1e-3 && lo == -hi);
        assert!(matches!(dirac_symbol(&d, [0.5, 0.0]), Err(Error::InadmissibleFrequency(..))));
        let d = SurfaceDomain::new(256, 1.0, SpinStructure::from_signs(-1, -1).unwrap()).unwrap();
        let (_, hi) = dirac_symbol(&d, [0.5, 0.5]).unwrap();
        assert!((hi - std::f64::consts::PI * 2.0f64.sqrt()).abs() < 1e-3);
        assert!(dirac_symbol(&d, [0.0, 0.5]).is_err());
    }

    #[test]
    fn plane_waves_are_eigenspinors() {
        for spin in SpinStructure::all() {
            let d = SurfaceDomain::new(12, 1.3, spin).unwrap();
            for theta in admissible_frequencies(&d).into_iter().take(30) {
                for sign in [1.0, -1.0] {
                    let psi = plane_wave(&d, 2, 1, theta, sign).unwrap();
                    assert!((psi.norm(&d) - 1.0).abs() < 1e-12);
                    let (_, m) = dirac_symbol(&d, theta).unwrap();
                    let mut r = untwisted_dirac(&d, &psi).unwrap();
                    r.axpy(-sign * m, &psi);
                    assert!(r.norm(&d) < 1e-10);
                    let a = abs_dirac(&d, &psi).unwrap().sub(&psi.scaled(m));
                    assert!(a.norm(&d) < 1e-10);
                    let r = resolvent_precondition(&d, &psi).unwrap().sub(&psi.scaled(1.0 / (1.0 + m)));
                    assert!(r.norm(&d) < 1e-12);
                    assert!((h_half_norm(&d, &psi).unwrap().powi(2) - (1.0 + m)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn resolvent_round_trip_and_commutation() {
        for spin in SpinStructure::all() {
            let d = SurfaceDomain::new(8, 1.0, spin).unwrap();
            let psi = random_field(&d, 3, 7);
            let back = one_plus_abs_dirac(&d, &resolvent_precondition(&d, &psi).unwrap()).unwrap();
            assert!(back.sub(&psi).norm(&d) <= 1e-10 * psi.norm(&d));
            let a = resolvent_precondition(&d, &untwisted_dirac(&d, &psi).unwrap()).unwrap();
            let b = untwisted_dirac(&d, &resolvent_precondition(&d, &psi).unwrap()).unwrap();
            assert!(a.sub(&b).norm(&d) <= 1e-10 * psi.norm(&d));
            let z = PlainSpinorField::zeros(&d, 3);
            assert_eq!(resolvent_precondition(&d, &z).unwrap().max_abs(), 0.0);
            assert_eq!(h_half_norm(&d, &z).unwrap(), 0.0);
        }
    }

    #[test]
    fn constant_unit_spinor_norm() {
        let d = SurfaceDomain::new(8, 1.0, SpinStructure::from_signs(1, 1).unwrap()).unwrap();
        let mut psi = PlainSpinorField::zeros(&d, 1);
        for v in 0..d.vertex_count() {
            psi.set_spinor(v, 0, [c(1.0, 0.0), c(0.0, 0.0)]);
        }
        assert!((h_half_norm(&d, &psi).unwrap().powi(2) - 1.0).abs() < 1e-13);
    }

    #[test]
    fn shape_is_checked() {
        let d = SurfaceDomain::new(8, 1.0, SpinStructure::from_signs(1, 1).unwrap()).unwrap();
        let bad = PlainSpinorField { ambient_dim: 2, values: vec![c(0.0, 0.0); 5] };
        assert!(untwisted_dirac(&d, &bad).is_err());
        assert!(resolvent_precondition(&d, &bad).is_err());
    }
}
