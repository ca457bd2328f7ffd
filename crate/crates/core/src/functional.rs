//! The discrete action `L = E^alpha + 1/2 Re(psi, D_phi psi) - eps F(phi, psi)`
//! and its first and second variations.
//!
//! Map energies use the one-sided edge differences of the grid. With
//! `D+ phi(v) = (phi(v + e) - phi(v)) / h` and `D- phi(v) = D+ phi(v - e)`,
//! the energy density is `q = 1/2 sum_beta (|D+ phi|^2 + |D- phi|^2)`, which
//! equals `|A|^2` on affine lifts and vanishes only on constant maps.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::SurfaceDomain;
use crate::error::{Error, Result};
use crate::spin::{self, PlainSpinorField};
use crate::target::{FlatTorus2, HomotopyClass, Target, TargetManifold, MAX_AMBIENT};

/// Discrete map `phi: grid -> N`, stored vertex-major in ambient coordinates.
///
/// For the torus target the values are lifts to `R^2`; crossing the seam
/// along axis `beta` adds `period * A[:, beta]` where `A` is the winding
/// matrix of `class`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapField {
    pub target: Target,
    pub class: HomotopyClass,
    pub values: Vec<f64>,
}

/// Tangent vector field along a map, same layout as [`MapField::values`].
pub type TangentField = Vec<f64>;

impl MapField {
    pub fn new(domain: &SurfaceDomain, target: Target, class: HomotopyClass, values: Vec<f64>) -> Result<Self> {
        let l = target.ambient_dim();
        if values.len() != domain.vertex_count() * l {
            return Err(Error::Shape {
                what: "map field",
                expected: domain.vertex_count() * l,
                found: values.len(),
            });
        }
        match (&target, &class) {
            (Target::Torus(_), HomotopyClass::Winding(_)) | (Target::Sphere(_), HomotopyClass::Degree(_)) => {}
            _ => {
                return Err(Error::config(
                    "class",
                    format!("class {class} does not describe maps into the {}", target.name()),
                ))
            }
        }
        let phi = Self { target, class, values };
        for v in 0..domain.vertex_count() {
            let viol = target.manifold_violation(phi.point(v));
            if !(viol <= 1e-10) {
                return Err(Error::Projection(format!("vertex {v} is {viol:.3e} off the target")));
            }
        }
        Ok(phi)
    }

    pub fn ambient_dim(&self) -> usize {
        self.target.ambient_dim()
    }

    #[inline]
    pub fn point(&self, v: usize) -> &[f64] {
        let l = self.ambient_dim();
        &self.values[v * l..(v + 1) * l]
    }

    pub fn constant(domain: &SurfaceDomain, target: Target, p: &[f64]) -> Result<Self> {
        let l = target.ambient_dim();
        let mut q = vec![0.0; l];
        target.project(p, &mut q)?;
        let class = match target {
            Target::Torus(_) => HomotopyClass::TRIVIAL_TORUS,
            Target::Sphere(_) => HomotopyClass::Degree(0),
        };
        let values = (0..domain.vertex_count()).flat_map(|_| q.iter().copied()).collect();
        Self::new(domain, target, class, values)
    }

    /// Affine lift `phi(x) = (period / side_length) A x + offset`.
    pub fn affine_torus(domain: &SurfaceDomain, torus: FlatTorus2, a: [[i64; 2]; 2], offset: [f64; 2]) -> Result<Self> {
        let s = torus.period / domain.side_length();
        let mut values = Vec::with_capacity(2 * domain.vertex_count());
        for v in 0..domain.vertex_count() {
            let [x, y] = domain.position(v);
            values.push(offset[0] + s * (a[0][0] as f64 * x + a[0][1] as f64 * y));
            values.push(offset[1] + s * (a[1][0] as f64 * x + a[1][1] as f64 * y));
        }
        Self::new(domain, Target::Torus(torus), HomotopyClass::Winding(a), values)
    }

    /// Affine lift plus a smooth periodic perturbation of sup-norm `amplitude`.
    pub fn smooth_torus_map(
        domain: &SurfaceDomain,
        torus: FlatTorus2,
        a: [[i64; 2]; 2],
        amplitude: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut phi = Self::affine_torus(domain, torus, a, [0.0, 0.0])?;
        let bump = smooth_vector_noise(domain, 2, amplitude * torus.period, seed);
        for (x, b) in phi.values.iter_mut().zip(&bump) {
            *x += b;
        }
        Ok(phi)
    }

    /// Degree-zero sphere map: a smooth perturbation of a constant map by at
    /// most `amplitude < 1`, projected back to the sphere.
    pub fn smooth_sphere_map(domain: &SurfaceDomain, amplitude: f64, seed: u64) -> Result<Self> {
        let bump = smooth_vector_noise(domain, 3, amplitude, seed);
        let mut values = Vec::with_capacity(3 * domain.vertex_count());
        let s = Target::sphere();
        let mut out = [0.0; 3];
        for v in 0..domain.vertex_count() {
            let p = [bump[3 * v], bump[3 * v + 1], 1.0 + bump[3 * v + 2]];
            s.project(&p, &mut out)?;
            values.extend_from_slice(&out);
        }
        Self::new(domain, s, HomotopyClass::Degree(0), values)
    }

    /// Degree-one sphere map concentrated at `center` with scale `scale`,
    /// equal to the south pole outside the disk of radius `radius`.
    pub fn sphere_bubble(domain: &SurfaceDomain, center: [f64; 2], scale: f64, radius: f64) -> Result<Self> {
        if !(scale > 0.0) || !(radius > 0.0) || radius >= 0.5 * domain.side_length() {
            return Err(Error::config(
                "bubble",
                format!("need scale > 0 and 0 < radius < side_length / 2, got scale {scale}, radius {radius}"),
            ));
        }
        let mut values = Vec::with_capacity(3 * domain.vertex_count());
        for v in 0..domain.vertex_count() {
            let d = domain.periodic_displacement(center, domain.position(v));
            let rho = d[0].hypot(d[1]);
            if rho >= radius {
                values.extend_from_slice(&[0.0, 0.0, -1.0]);
                continue;
            }
            let stretched = rho / (1.0 - (rho / radius).powi(2));
            let theta = 2.0 * (stretched / scale).atan();
            let azimuth = d[1].atan2(d[0]);
            values.extend_from_slice(&[
                theta.sin() * azimuth.cos(),
                theta.sin() * azimuth.sin(),
                theta.cos(),
            ]);
        }
        Self::new(domain, Target::sphere(), HomotopyClass::Degree(1), values)
    }

    /// Edge difference `phi(v + e_axis) - phi(v)`, seam offset included.
    #[inline]
    pub fn edge_diff(&self, domain: &SurfaceDomain, v: usize, axis: usize, out: &mut [f64]) {
        let u = domain.forward(v, axis);
        let (p, q) = (self.point(v), self.point(u));
        for c in 0..p.len() {
            out[c] = q[c] - p[c];
        }
        if let (Target::Torus(t), HomotopyClass::Winding(a)) = (&self.target, &self.class) {
            if domain.wraps_forward(v, axis) {
                out[0] += t.period * a[0][axis] as f64;
                out[1] += t.period * a[1][axis] as f64;
            }
        }
    }

    /// Vertexwise retraction `R_phi(t X)`.
    pub fn retract(&self, domain: &SurfaceDomain, x: &[f64], t: f64) -> Result<Self> {
        self.check_tangent_field(domain, x)?;
        let l = self.ambient_dim();
        let mut values = vec![0.0; self.values.len()];
        let mut tx = [0.0; MAX_AMBIENT];
        for v in 0..domain.vertex_count() {
            for c in 0..l {
                tx[c] = t * x[v * l + c];
            }
            self.target.retract(self.point(v), &tx[..l], &mut values[v * l..(v + 1) * l]);
        }
        Ok(Self {
            target: self.target,
            class: self.class,
            values,
        })
    }

    /// Vertexwise exponential map `exp_phi(t X)`.
    pub fn exp(&self, domain: &SurfaceDomain, x: &[f64], t: f64) -> Result<Self> {
        self.check_tangent_field(domain, x)?;
        let l = self.ambient_dim();
        let mut values = vec![0.0; self.values.len()];
        for v in 0..domain.vertex_count() {
            self.target.geodesic(self.point(v), &x[v * l..(v + 1) * l], t, &mut values[v * l..(v + 1) * l]);
        }
        Ok(Self {
            target: self.target,
            class: self.class,
            values,
        })
    }

    pub fn check_tangent_field(&self, domain: &SurfaceDomain, x: &[f64]) -> Result<()> {
        if x.len() != self.values.len() {
            return Err(Error::Shape {
                what: "tangent field",
                expected: self.values.len(),
                found: x.len(),
            });
        }
        let _ = domain;
        Ok(())
    }

    /// Largest vertexwise geodesic distance to another map.
    pub fn sup_distance(&self, other: &Self) -> f64 {
        let l = self.ambient_dim();
        (0..self.values.len() / l)
            .map(|v| self.target.distance(self.point(v), other.point(v)))
            .fold(0.0, f64::max)
    }

    /// Project an ambient vector field onto the tangent spaces along the map.
    pub fn project_tangent_field(&self, x: &[f64]) -> TangentField {
        let l = self.ambient_dim();
        let mut out = vec![0.0; x.len()];
        for v in 0..x.len() / l {
            self.target
                .project_tangent(self.point(v), &x[v * l..(v + 1) * l], &mut out[v * l..(v + 1) * l]);
        }
        out
    }

    /// Stable 64-bit fingerprint of the map values.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u64| {
            for byte in b.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        eat(self.values.len() as u64);
        for x in &self.values {
            eat(x.to_bits());
        }
        h
    }
}

/// Smooth random vector field built from low Fourier modes, scaled to the
/// given sup norm.
pub(crate) fn smooth_vector_noise(domain: &SurfaceDomain, dim: usize, amplitude: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut modes = Vec::new();
    for kx in -2i32..=2 {
        for ky in -2i32..=2 {
            if kx == 0 && ky == 0 {
                continue;
            }
            let coef: Vec<[f64; 2]> = (0..dim)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            modes.push((kx, ky, coef));
        }
    }
    let l = domain.side_length();
    let mut out = vec![0.0; dim * domain.vertex_count()];
    for v in 0..domain.vertex_count() {
        let [x, y] = domain.position(v);
        for (kx, ky, coef) in &modes {
            let arg = 2.0 * std::f64::consts::PI * (*kx as f64 * x + *ky as f64 * y) / l;
            let (s, c) = arg.sin_cos();
            let decay = 1.0 / (1.0 + (kx * kx + ky * ky) as f64);
            for d in 0..dim {
                out[v * dim + d] += decay * (coef[d][0] * c + coef[d][1] * s);
            }
        }
    }
    let mut peak = 0.0f64;
    for v in 0..domain.vertex_count() {
        let n: f64 = out[v * dim..(v + 1) * dim].iter().map(|x| x * x).sum::<f64>().sqrt();
        peak = peak.max(n);
    }
    if peak > 0.0 {
        for x in &mut out {
            *x *= amplitude / peak;
        }
    }
    out
}

/// Smooth random tangent field along `phi` with unit sup norm scale.
pub fn random_tangent_field(domain: &SurfaceDomain, phi: &MapField, seed: u64) -> TangentField {
    let raw = smooth_vector_noise(domain, phi.ambient_dim(), 1.0, seed);
    phi.project_tangent_field(&raw)
}

/// Smooth random spinor respecting the spin structure, projected tangent
/// along `phi`, normalized to unit L2 norm.
pub fn random_tangent_spinor(domain: &SurfaceDomain, phi: &MapField, seed: u64) -> PlainSpinorField {
    let l = phi.ambient_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let spin_s = domain.spin_structure();
    let mut psi = PlainSpinorField::zeros(domain, l);
    let side = domain.side_length();
    for mx in -2i32..=1 {
        for my in -2i32..=1 {
            let theta = [mx as f64 + spin_s.x.offset(), my as f64 + spin_s.y.offset()];
            let coef: Vec<Complex64> = (0..2 * l)
                .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect();
            let decay = 1.0 / (1.0 + theta[0] * theta[0] + theta[1] * theta[1]);
            for v in 0..domain.vertex_count() {
                let [x, y] = domain.position(v);
                let ph = Complex64::from_polar(decay, 2.0 * std::f64::consts::PI * (theta[0] * x + theta[1] * y) / side);
                for (z, c) in psi.vertex_mut(v).iter_mut().zip(&coef) {
                    *z += c * ph;
                }
            }
        }
    }
    let mut psi = project_spinor(domain, phi, &psi);
    let n = psi.norm(domain);
    psi.scale(1.0 / n);
    psi
}

/// Apply the tangent projector along `phi` to every spin component.
pub fn project_spinor(domain: &SurfaceDomain, phi: &MapField, psi: &PlainSpinorField) -> PlainSpinorField {
    let l = phi.ambient_dim();
    if phi.target.is_flat() {
        return psi.clone();
    }
    let mut out = PlainSpinorField::zeros(domain, l);
    let (mut re, mut im, mut pr, mut pi) = ([0.0; MAX_AMBIENT], [0.0; MAX_AMBIENT], [0.0; MAX_AMBIENT], [0.0; MAX_AMBIENT]);
    for v in 0..domain.vertex_count() {
        let p = phi.point(v);
        for s in 0..2 {
            for c in 0..l {
                let z = psi.values[psi.index(v, c, s)];
                re[c] = z.re;
                im[c] = z.im;
            }
            phi.target.project_tangent(p, &re[..l], &mut pr[..l]);
            phi.target.project_tangent(p, &im[..l], &mut pi[..l]);
            for c in 0..l {
                let k = out.index(v, c, s);
                out.values[k] = Complex64::new(pr[c], pi[c]);
            }
        }
    }
    out
}

/// Largest pointwise distance of `psi` from the tangent bundle along `phi`.
pub fn tangency_violation(domain: &SurfaceDomain, phi: &MapField, psi: &PlainSpinorField) -> f64 {
    project_spinor(domain, phi, psi).sub(psi).max_abs()
}

fn check_spinor(domain: &SurfaceDomain, phi: &MapField, psi: &PlainSpinorField) -> Result<()> {
    psi.check(domain)?;
    if psi.ambient_dim != phi.ambient_dim() {
        return Err(Error::Shape {
            what: "spinor ambient dimension",
            expected: phi.ambient_dim(),
            found: psi.ambient_dim,
        });
    }
    let viol = tangency_violation(domain, phi, psi);
    let tol = 1e-10 * psi.max_abs().max(1.0);
    if viol > tol {
        return Err(Error::NotTangent { violation: viol, tolerance: tol });
    }
    Ok(())
}

/// Pointwise perturbation `F(phi(x), psi(x))` with its derivatives.
pub trait PerturbationHook: fmt::Debug + Send + Sync {
    fn name(&self) -> String;

    /// `F` at one vertex; `xi` holds the `2L` spinor values.
    fn density(&self, p: &[f64], xi: &[Complex64]) -> f64;

    /// Real gradient `F_psi` at one vertex.
    fn grad_psi(&self, p: &[f64], xi: &[Complex64], out: &mut [Complex64]);

    /// Ambient gradient of `F` in `phi` at fixed spinor values.
    fn grad_phi(&self, p: &[f64], xi: &[Complex64], out: &mut [f64]);
}

/// Built-in perturbations.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    /// `coefficient * |psi|^exponent`.
    Power { coefficient: f64, exponent: f64 },
    /// `(1 + kappa <a, phi>^2) |psi|^exponent`.
    Modulated { exponent: f64, kappa: f64, direction: Vec<f64> },
    #[serde(skip)]
    Custom(Arc<dyn PerturbationHook>),
}

impl Perturbation {
    pub fn canonical(exponent: f64) -> Self {
        Perturbation::Power {
            coefficient: 1.0,
            exponent,
        }
    }

    pub fn exponent(&self) -> Option<f64> {
        match self {
            Perturbation::Power { exponent, .. } | Perturbation::Modulated { exponent, .. } => Some(*exponent),
            Perturbation::Custom(_) => None,
        }
    }
}

fn modulus_sqr(xi: &[Complex64]) -> f64 {
    xi.iter().map(|z| z.norm_sqr()).sum()
}

impl PerturbationHook for Perturbation {
    fn name(&self) -> String {
        match self {
            Perturbation::Power { coefficient, exponent } => format!("{coefficient}*|psi|^{exponent}"),
            Perturbation::Modulated { exponent, kappa, .. } => format!("(1+{kappa}<a,phi>^2)|psi|^{exponent}"),
            Perturbation::Custom(h) => h.name(),
        }
    }

    fn density(&self, p: &[f64], xi: &[Complex64]) -> f64 {
        match self {
            Perturbation::Power { coefficient, exponent } => coefficient * modulus_sqr(xi).powf(0.5 * exponent),
            Perturbation::Modulated { exponent, kappa, direction } => {
                let ap: f64 = direction.iter().zip(p).map(|(a, b)| a * b).sum();
                (1.0 + kappa * ap * ap) * modulus_sqr(xi).powf(0.5 * exponent)
            }
            Perturbation::Custom(h) => h.density(p, xi),
        }
    }

    fn grad_psi(&self, p: &[f64], xi: &[Complex64], out: &mut [Complex64]) {
        let (scale, exponent) = match self {
            Perturbation::Power { coefficient, exponent } => (*coefficient, *exponent),
            Perturbation::Modulated { exponent, kappa, direction } => {
                let ap: f64 = direction.iter().zip(p).map(|(a, b)| a * b).sum();
                (1.0 + kappa * ap * ap, *exponent)
            }
            Perturbation::Custom(h) => return h.grad_psi(p, xi, out),
        };
        let m2 = modulus_sqr(xi);
        let f = if m2 > 0.0 { scale * exponent * m2.powf(0.5 * exponent - 1.0) } else { 0.0 };
        for (o, z) in out.iter_mut().zip(xi) {
            *o = z * f;
        }
    }

    fn grad_phi(&self, p: &[f64], xi: &[Complex64], out: &mut [f64]) {
        match self {
            Perturbation::Power { .. } => out.fill(0.0),
            Perturbation::Modulated { exponent, kappa, direction } => {
                let ap: f64 = direction.iter().zip(p).map(|(a, b)| a * b).sum();
                let m = modulus_sqr(xi).powf(0.5 * exponent);
                for (o, a) in out.iter_mut().zip(direction) {
                    *o = 2.0 * kappa * ap * a * m;
                }
            }
            Perturbation::Custom(h) => h.grad_phi(p, xi, out),
        }
    }
}

/// Parameters of the action.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActionConfig {
    pub alpha: f64,
    /// Perturbation scale `eps = 1/k`.
    pub epsilon: f64,
    pub perturbation: Perturbation,
    /// Growth exponents recorded for the growth-condition checks.
    pub growth_p: f64,
    pub growth_q: f64,
}

impl ActionConfig {
    /// `4 alpha / (3 alpha - 2)`.
    pub fn canonical_exponent(alpha: f64) -> f64 {
        4.0 * alpha / (3.0 * alpha - 2.0)
    }

    /// Canonical perturbation with the default exponent.
    pub fn new(alpha: f64, epsilon: f64) -> Result<Self> {
        Self::with_exponent(alpha, epsilon, Self::canonical_exponent(alpha))
    }

    pub fn with_exponent(alpha: f64, epsilon: f64, mu: f64) -> Result<Self> {
        let cfg = Self {
            alpha,
            epsilon,
            perturbation: Perturbation::canonical(mu),
            growth_p: mu,
            growth_q: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_perturbation(mut self, perturbation: Perturbation) -> Result<Self> {
        if let Some(mu) = perturbation.exponent() {
            self.growth_p = mu;
        }
        self.perturbation = perturbation;
        self.validate()?;
        Ok(self)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        let mut c = self.clone();
        c.epsilon = epsilon;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0 && self.alpha <= 2.0) {
            return Err(Error::config("alpha", format!("alpha must lie in (1, 2], got {}", self.alpha)));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::config("epsilon", format!("perturbation scale must be >= 0, got {}", self.epsilon)));
        }
        if let Some(mu) = self.perturbation.exponent() {
            if !(mu > 2.0) {
                return Err(Error::config(
                    "mu",
                    format!("perturbation exponent must exceed 2, got {mu}; supply mu > 2 explicitly"),
                ));
            }
            let lo = Self::canonical_exponent(self.alpha);
            let hi = 0.75 * self.growth_p + 1.0;
            if mu < lo - 1e-12 || mu > self.growth_p + 1e-12 || self.growth_p > hi + 1e-12 {
                return Err(Error::config(
                    "mu",
                    format!("exponent {mu} outside the window [{lo:.6}, {:.6}] for alpha = {}", hi.min(4.0), self.alpha),
                ));
            }
        }
        if let Perturbation::Power { coefficient, .. } = &self.perturbation {
            if !(*coefficient >= 0.0) {
                return Err(Error::config("perturbation.coefficient", "coefficient must be nonnegative"));
            }
        }
        if let Perturbation::Modulated { kappa, .. } = &self.perturbation {
            if !(*kappa >= 0.0) {
                return Err(Error::config("perturbation.kappa", "kappa must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// Decomposition `total = alpha_energy + dirac_action - epsilon * perturbation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionValue {
    pub total: f64,
    pub alpha_energy: f64,
    pub dirac_action: f64,
    pub perturbation: f64,
}

/// Energy density `q = 1/2 sum (|D+ phi|^2 + |D- phi|^2)` at every vertex.
pub fn energy_density(domain: &SurfaceDomain, phi: &MapField) -> Vec<f64> {
    let l = phi.ambient_dim();
    let inv_h2 = 1.0 / (domain.h() * domain.h());
    let mut edge_sq = [vec![0.0; domain.vertex_count()], vec![0.0; domain.vertex_count()]];
    let mut e = [0.0; MAX_AMBIENT];
    for axis in 0..2 {
        for v in 0..domain.vertex_count() {
            phi.edge_diff(domain, v, axis, &mut e[..l]);
            edge_sq[axis][v] = e[..l].iter().map(|x| x * x).sum::<f64>() * inv_h2;
        }
    }
    (0..domain.vertex_count())
        .map(|v| {
            0.5 * (0..2)
                .map(|a| edge_sq[a][v] + edge_sq[a][domain.backward(v, a)])
                .sum::<f64>()
        })
        .collect()
}

/// `E^alpha = 1/2 int (1 + |d phi|^2)^alpha`.
pub fn alpha_energy(domain: &SurfaceDomain, phi: &MapField, alpha: f64) -> f64 {
    let q = energy_density(domain, phi);
    0.5 * domain.weight() * q.iter().map(|x| (1.0 + x).powf(alpha)).sum::<f64>()
}

/// Dirichlet energy `1/2 int |d phi|^2`.
pub fn dirichlet_energy(domain: &SurfaceDomain, phi: &MapField) -> f64 {
    0.5 * domain.weight() * energy_density(domain, phi).iter().sum::<f64>()
}

/// Ambient L2 gradient of `E^alpha` (before tangent projection).
pub fn alpha_energy_gradient(domain: &SurfaceDomain, phi: &MapField, alpha: f64) -> Vec<f64> {
    let l = phi.ambient_dim();
    let h = domain.h();
    let q = energy_density(domain, phi);
    let w: Vec<f64> = q.iter().map(|x| alpha * (1.0 + x).powf(alpha - 1.0)).collect();
    let mut g = vec![0.0; phi.values.len()];
    let mut e = [0.0; MAX_AMBIENT];
    let inv_h2 = 1.0 / (h * h);
    for axis in 0..2 {
        for v in 0..domain.vertex_count() {
            let u = domain.forward(v, axis);
            let c = 0.5 * (w[v] + w[u]) * inv_h2;
            phi.edge_diff(domain, v, axis, &mut e[..l]);
            for k in 0..l {
                g[v * l + k] -= c * e[k];
                g[u * l + k] += c * e[k];
            }
        }
    }
    g
}

/// `D_phi psi = Pi(D psi)`.
pub fn twisted_dirac(domain: &SurfaceDomain, phi: &MapField, psi: &PlainSpinorField) -> Result<PlainSpinorField> {
    check_spinor(domain, phi, psi)?;
    Ok(project_spinor(domain, phi, &spin::untwisted_dirac(domain, psi)?))
}

/// `1/2 Re(psi, D_phi psi)_2`.
pub fn dirac_action(domain: &SurfaceDomain, phi: &MapField, psi: &PlainSpinorField) -> Result<f64> {
    check_spinor(domain, phi, psi)?;
    Ok(0.5 * psi.dot_re(domain, &spin::untwisted_dirac(domain, psi)?))
}

/// `int F(phi, psi)`.
pub fn perturbation_value(domain: &SurfaceDomain, phi: &MapField, psi: &PlainSpinorField, hook: &dyn PerturbationHook) -> f64 {
    domain.weight()
        * (0..domain.vertex_count())
            .map(|v| hook.density(phi.point(v), psi.vertex(v)))
            .sum::<f64>()
}

/// `F_psi` as a spinor field.
pub fn perturbation_grad_psi(
    domain: &SurfaceDomain,
    phi: &MapField,
    psi: &PlainSpinorField,
    hook: &dyn PerturbationHook,
) -> PlainSpinorField {
    let mut out = PlainSpinorField::zeros(domain, psi.ambient_dim);
    for v in 0..domain.vertex_count() {
        let xi = psi.vertex(v).to_vec();
        hook.grad_psi(phi.point(v), &xi, out.vertex_mut(v));
    }
    out
}

/// Ambient `F_phi` at fixed spinor.
pub fn perturbation_grad_phi(domain: &SurfaceDomain, phi: &MapField, psi: &PlainSpinorField, hook: &dyn PerturbationHook) -> Vec<f64> {
    let l = phi.ambient_dim();
    let mut out = vec![0.0; phi.values.len()];
    for v in 0..domain.vertex_count() {
        hook.grad_phi(phi.point(v), psi.vertex(v), &mut out[v * l..(v + 1) * l]);
    }
    out
}

pub fn action(domain: &SurfaceDomain, phi: &MapField, psi: &PlainSpinorField, cfg: &ActionConfig) -> Result<ActionValue> {
    let alpha_energy = alpha_energy(domain, phi, cfg.alpha);
    let dirac_action = dirac_action(domain, phi, psi)?;
    let perturbation = perturbation_value(domain, phi, psi, &cfg.perturbation);
    Ok(ActionValue {
        total: alpha_energy + dirac_action - cfg.epsilon * perturbation,
        alpha_energy,
        dirac_action,
        perturbation,
    })
}

/// `Re sum_s <dPi[e_m] psi_s, chi_s>` for every ambient direction `m`: the
/// L2 density of `X -> Re(dPi[X] psi, chi)`.
fn projector_variation(domain: &SurfaceDomain, phi: &MapField, psi: &PlainSpinorField, chi: &PlainSpinorField) -> Vec<f64> {
    let l = phi.ambient_dim();
    let mut out = vec![0.0; phi.values.len()];
    if phi.target.is_flat() {
        return out;
    }
    let (mut re, mut im, mut dre, mut dim) = ([0.0; MAX_AMBIENT], [0.0; MAX_AMBIENT], [0.0; MAX_AMBIENT], [0.0; MAX_AMBIENT]);
    let mut e = [0.0; MAX_AMBIENT];
    for v in 0..domain.vertex_count() {
        let p = phi.point(v);
        for s in 0..2 {
            for c in 0..l {
                let z = psi.values[psi.index(v, c, s)];
                re[c] = z.re;
                im[c] = z.im;
            }
            for m in 0..l {
                e[..l].fill(0.0);
                e[m] = 1.0;
                phi.target.projector_derivative(p, &e[..l], &re[..l], &mut dre[..l]);
                phi.target.projector_derivative(p, &e[..l], &im[..l], &mut dim[..l]);
                let mut acc = 0.0;
                for c in 0..l {
                    let w = chi.values[chi.index(v, c, s)];
                    acc += dre[c] * w.re + dim[c] * w.im;
                }
                out[v * l + m] += acc;
            }
        }
    }
    out
}

/// L2 gradient of the action in the map direction, for variations that
/// retract the map and transport the spinor.
pub fn horizontal_gradient(
    domain: &SurfaceDomain,
    phi: &MapField,
    psi: &PlainSpinorField,
    cfg: &ActionConfig,
) -> Result<TangentField> {
    check_spinor(domain, phi, psi)?;
    let mut g = alpha_energy_gradient(domain, phi, cfg.alpha);
    let dpsi = spin::untwisted_dirac(domain, psi)?;
    let gd = projector_variation(domain, phi, psi, &dpsi);
    for (a, b) in g.iter_mut().zip(&gd) {
        *a += b;
    }
    if cfg.epsilon != 0.0 {
        let fphi = perturbation_grad_phi(domain, phi, psi, &cfg.perturbation);
        let fpsi = perturbation_grad_psi(domain, phi, psi, &cfg.perturbation);
        let gf = projector_variation(domain, phi, psi, &fpsi);
        for ((a, b), c) in g.iter_mut().zip(&fphi).zip(&gf) {
            *a -= cfg.epsilon * (b + c);
        }
    }
    Ok(phi.project_tangent_field(&g))
}

/// `Pi(D psi) - eps Pi(F_psi)`: the L2 gradient in the spinor direction.
pub fn vertical_residual(
    domain: &SurfaceDomain,
    phi: &MapField,
    psi: &PlainSpinorField,
    cfg: &ActionConfig,
) -> Result<PlainSpinorField> {
    check_spinor(domain, phi, psi)?;
    let mut r = spin::untwisted_dirac(domain, psi)?;
    if cfg.epsilon != 0.0 {
        let f = perturbation_grad_psi(domain, phi, psi, &cfg.perturbation);
        r.axpy(-cfg.epsilon, &f);
    }
    Ok(project_spinor(domain, phi, &r))
}

/// `(1 + |D|)^{-1} (D_phi psi - eps F_psi)`, the H^{1/2} gradient.
pub fn vertical_gradient(
    domain: &SurfaceDomain,
    phi: &MapField,
    psi: &PlainSpinorField,
    cfg: &ActionConfig,
) -> Result<PlainSpinorField> {
    spin::resolvent_precondition(domain, &vertical_residual(domain, phi, psi, cfg)?)
}

/// Norms of the first variation: horizontal in L2, vertical in H^{1/2}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualNorms {
    pub horizontal: f64,
    pub vertical: f64,
    pub combined: f64,
}

pub fn residual_norms(domain: &SurfaceDomain, phi: &MapField, psi: &PlainSpinorField, cfg: &ActionConfig) -> Result<ResidualNorms> {
    let gh = horizontal_gradient(domain, phi, psi, cfg)?;
    let gv = vertical_gradient(domain, phi, psi, cfg)?;
    let horizontal = tangent_norm(domain, &gh);
    let vertical = spin::h_half_norm(domain, &gv)?;
    Ok(ResidualNorms {
        horizontal,
        vertical,
        combined: horizontal.hypot(vertical),
    })
}

/// L2 pairing of two ambient vector fields.
pub fn tangent_dot(domain: &SurfaceDomain, a: &[f64], b: &[f64]) -> f64 {
    domain.weight() * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

pub fn tangent_norm(domain: &SurfaceDomain, a: &[f64]) -> f64 {
    tangent_dot(domain, a, a).sqrt()
}

/// Exact mixed second derivative of `E^alpha` along `exp_phi(sV + tW)`.
pub fn second_variation(domain: &SurfaceDomain, phi: &MapField, v: &[f64], w: &[f64], alpha: f64) -> Result<f64> {
    let l = phi.ambient_dim();
    for x in [v, w] {
        phi.check_tangent_field(domain, x)?;
        let p = phi.project_tangent_field(x);
        let viol = p.iter().zip(x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let scale = x.iter().fold(1.0f64, |m, a| m.max(a.abs()));
        if viol > 1e-10 * scale {
            return Err(Error::NotTangent {
                violation: viol,
                tolerance: 1e-10 * scale,
            });
        }
    }
    let nv = domain.vertex_count();
    let inv_h = 1.0 / domain.h();
    let mut ii = vec![0.0; phi.values.len()];
    for x in 0..nv {
        phi.target.second_fundamental_form(
            phi.point(x),
            &v[x * l..(x + 1) * l],
            &w[x * l..(x + 1) * l],
            &mut ii[x * l..(x + 1) * l],
        );
    }
    // Forward-edge quantities: <dV, dW>, <dphi, dV>, <dphi, dW>, <dphi, dII>.
    let mut edges = vec![[0.0f64; 4]; 2 * nv];
    let mut e = [0.0; MAX_AMBIENT];
    for axis in 0..2 {
        for x in 0..nv {
            let y = domain.forward(x, axis);
            phi.edge_diff(domain, x, axis, &mut e[..l]);
            let mut acc = [0.0; 4];
            for c in 0..l {
                let dp = e[c] * inv_h;
                let dv = (v[y * l + c] - v[x * l + c]) * inv_h;
                let dw = (w[y * l + c] - w[x * l + c]) * inv_h;
                let di = (ii[y * l + c] - ii[x * l + c]) * inv_h;
                acc[0] += dv * dw;
                acc[1] += dp * dv;
                acc[2] += dp * dw;
                acc[3] += dp * di;
            }
            edges[axis * nv + x] = acc;
        }
    }
    let q = energy_density(domain, phi);
    let mut total = 0.0;
    for x in 0..nv {
        let mut s = [0.0; 4];
        for axis in 0..2 {
            let f = edges[axis * nv + x];
            let b = edges[axis * nv + domain.backward(x, axis)];
            for k in 0..4 {
                s[k] += 0.5 * (f[k] + b[k]);
            }
        }
        let base = 1.0 + q[x];
        total += alpha * base.powf(alpha - 1.0) * (s[0] + s[3])
            + 2.0 * alpha * (alpha - 1.0) * base.powf(alpha - 2.0) * s[1] * s[2];
    }
    Ok(total * domain.weight())
}

/// `int |grad V|^2` with the same one-sided stencil as the energy.
pub fn tangent_dirichlet(domain: &SurfaceDomain, phi: &MapField, v: &[f64]) -> f64 {
    let l = phi.ambient_dim();
    let inv_h = 1.0 / domain.h();
    let mut s = 0.0;
    for axis in 0..2 {
        for x in 0..domain.vertex_count() {
            let y = domain.forward(x, axis);
            for c in 0..l {
                s += ((v[y * l + c] - v[x * l + c]) * inv_h).powi(2);
            }
        }
    }
    s * domain.weight()
}

/// Central finite-difference derivatives of the action, for gradient checks.
pub mod fd {
    use super::*;
    use crate::target::transport_spinor;

    /// `d/dt L(R_phi(tX), P_t psi)` at `t = 0`.
    pub fn horizontal(
        domain: &SurfaceDomain,
        phi: &MapField,
        psi: &PlainSpinorField,
        cfg: &ActionConfig,
        x: &[f64],
        step: f64,
    ) -> Result<f64> {
        let eval = |t: f64| -> Result<f64> {
            let moved = phi.retract(domain, x, t)?;
            let moved_psi = transport_spinor(domain, phi, &moved, psi)?;
            Ok(action(domain, &moved, &moved_psi, cfg)?.total)
        };
        Ok((eval(step)? - eval(-step)?) / (2.0 * step))
    }

    /// `d/dt L(phi, psi + tY)` at `t = 0`.
    pub fn vertical(
        domain: &SurfaceDomain,
        phi: &MapField,
        psi: &PlainSpinorField,
        cfg: &ActionConfig,
        y: &PlainSpinorField,
        step: f64,
    ) -> Result<f64> {
        let eval = |t: f64| -> Result<f64> {
            let mut p = psi.clone();
            p.axpy(t, y);
            Ok(action(domain, phi, &p, cfg)?.total)
        };
        Ok((eval(step)? - eval(-step)?) / (2.0 * step))
    }

    /// Second central difference of `E^alpha(exp_phi(tV))`.
    pub fn hessian(domain: &SurfaceDomain, phi: &MapField, v: &[f64], alpha: f64, step: f64) -> Result<f64> {
        let e = |t: f64| -> Result<f64> { Ok(alpha_energy(domain, &phi.exp(domain, v, t)?, alpha)) };
        Ok((e(step)? - 2.0 * e(0.0)? + e(-step)?) / (step * step))
    }
}
