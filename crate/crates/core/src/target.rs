//! Embedded target manifolds.
//!
//! Points and tangent vectors are ambient coordinate slices. The flat torus
//! is stored through its universal cover `R^2`, so its ambient dimension is 2
//! and its tangent projector is the identity; the Clifford embedding into
//! `R^4` is provided for validating ambient formulas.

use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::domain::SurfaceDomain;
use crate::error::{Error, Result};
use crate::functional::MapField;
use crate::spin::PlainSpinorField;

/// Largest ambient dimension of a built-in target.
pub const MAX_AMBIENT: usize = 4;

pub const TANGENCY_TOL: f64 = 1e-10;

/// Embedded Riemannian manifold `N` in `R^L`.
pub trait TargetManifold {
    fn ambient_dim(&self) -> usize;

    fn injectivity_radius(&self) -> f64;

    fn is_flat(&self) -> bool;

    /// Nearest point on `N`.
    fn project(&self, p: &[f64], out: &mut [f64]) -> Result<()>;

    /// Orthogonal projection of `v` onto `T_p N`.
    fn project_tangent(&self, p: &[f64], v: &[f64], out: &mut [f64]);

    /// Derivative of the tangent projector at `p` in direction `x`, applied to `v`.
    fn projector_derivative(&self, p: &[f64], x: &[f64], v: &[f64], out: &mut [f64]);

    /// Second fundamental form `II_p(u, w)`, a normal vector.
    fn second_fundamental_form(&self, p: &[f64], u: &[f64], w: &[f64], out: &mut [f64]);

    /// Riemann curvature `R(x, y) z` for tangent `x, y, z` at `p`.
    fn curvature(&self, p: &[f64], x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) -> Result<()>;

    /// `exp_p(v)`.
    fn exp(&self, p: &[f64], v: &[f64], out: &mut [f64]);

    /// Parallel transport of `w` from `T_p N` to `T_q N` along the minimal geodesic.
    fn parallel_transport(&self, p: &[f64], q: &[f64], w: &[f64], out: &mut [f64]) -> Result<()>;

    /// First-order retraction `R_p(v)`.
    fn retract(&self, p: &[f64], v: &[f64], out: &mut [f64]);

    /// Geodesic distance.
    fn distance(&self, p: &[f64], q: &[f64]) -> f64;

    /// Distance from `N`, used for on-manifold checks.
    fn manifold_violation(&self, p: &[f64]) -> f64;

    fn geodesic(&self, p: &[f64], v: &[f64], t: f64, out: &mut [f64]) {
        let mut tv = [0.0; MAX_AMBIENT];
        for (a, b) in tv.iter_mut().zip(v) {
            *a = b * t;
        }
        self.exp(p, &tv[..v.len()], out);
    }

    /// Tangent projector as a row-major `L x L` matrix.
    fn tangent_projector(&self, p: &[f64]) -> Vec<f64> {
        let l = self.ambient_dim();
        let mut m = vec![0.0; l * l];
        let mut e = vec![0.0; l];
        let mut col = vec![0.0; l];
        for c in 0..l {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[c] = 1.0;
            self.project_tangent(p, &e, &mut col);
            for r in 0..l {
                m[r * l + c] = col[r];
            }
        }
        m
    }

    fn tangency_violation(&self, p: &[f64], v: &[f64]) -> f64 {
        let mut t = [0.0; MAX_AMBIENT];
        self.project_tangent(p, v, &mut t[..v.len()]);
        v.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit sphere `S^2` in `R^3`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundSphere {}

impl TargetManifold for RoundSphere {
    fn ambient_dim(&self) -> usize {
        3
    }

    fn injectivity_radius(&self) -> f64 {
        std::f64::consts::PI
    }

    fn is_flat(&self) -> bool {
        false
    }

    fn project(&self, p: &[f64], out: &mut [f64]) -> Result<()> {
        let r = norm(p);
        if !(r > 1e-8) || !r.is_finite() {
            return Err(Error::Projection(format!(
                "point at distance {r:.3e} from the centre of the sphere has no nearest point"
            )));
        }
        for (o, x) in out.iter_mut().zip(p) {
            *o = x / r;
        }
        Ok(())
    }

    fn project_tangent(&self, p: &[f64], v: &[f64], out: &mut [f64]) {
        let d = dot(p, v);
        for i in 0..3 {
            out[i] = v[i] - d * p[i];
        }
    }

    fn projector_derivative(&self, p: &[f64], x: &[f64], v: &[f64], out: &mut [f64]) {
        let pv = dot(p, v);
        let xv = dot(x, v);
        for i in 0..3 {
            out[i] = -(x[i] * pv + p[i] * xv);
        }
    }

    fn second_fundamental_form(&self, p: &[f64], u: &[f64], w: &[f64], out: &mut [f64]) {
        let d = dot(u, w);
        for i in 0..3 {
            out[i] = -d * p[i];
        }
    }

    fn curvature(&self, p: &[f64], x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) -> Result<()> {
        check_tangent(self, p, &[x, y, z])?;
        let yz = dot(y, z);
        let xz = dot(x, z);
        for i in 0..3 {
            out[i] = yz * x[i] - xz * y[i];
        }
        Ok(())
    }

    fn exp(&self, p: &[f64], v: &[f64], out: &mut [f64]) {
        let t = norm(v);
        if t < 1e-300 {
            out[..3].copy_from_slice(&p[..3]);
            return;
        }
        let (s, c) = t.sin_cos();
        for i in 0..3 {
            out[i] = c * p[i] + s * v[i] / t;
        }
    }

    fn parallel_transport(&self, p: &[f64], q: &[f64], w: &[f64], out: &mut [f64]) -> Result<()> {
        let denom = 1.0 + dot(p, q);
        if denom < 1e-6 {
            return Err(Error::Transport(format!(
                "points are nearly antipodal (1 + <p,q> = {denom:.3e})"
            )));
        }
        let c = dot(w, q) / denom;
        for i in 0..3 {
            out[i] = w[i] - c * (p[i] + q[i]);
        }
        Ok(())
    }

    fn retract(&self, p: &[f64], v: &[f64], out: &mut [f64]) {
        let mut s = [0.0; 3];
        for i in 0..3 {
            s[i] = p[i] + v[i];
        }
        let r = norm(&s);
        for i in 0..3 {
            out[i] = s[i] / r;
        }
    }

    fn distance(&self, p: &[f64], q: &[f64]) -> f64 {
        let mut c = [0.0; 3];
        c[0] = p[1] * q[2] - p[2] * q[1];
        c[1] = p[2] * q[0] - p[0] * q[2];
        c[2] = p[0] * q[1] - p[1] * q[0];
        norm(&c).atan2(dot(p, q))
    }

    fn manifold_violation(&self, p: &[f64]) -> f64 {
        (norm(p) - 1.0).abs()
    }
}

/// Flat torus `R^2 / (period Z)^2`, represented by lifts to `R^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatTorus2 {
    pub period: f64,
}

impl Default for FlatTorus2 {
    fn default() -> Self {
        Self { period: 1.0 }
    }
}

impl FlatTorus2 {
    pub fn new(period: f64) -> Result<Self> {
        if !(period > 0.0) || !period.is_finite() {
            return Err(Error::config("target.period", format!("period must be positive, got {period}")));
        }
        Ok(Self { period })
    }

    /// Radius of each circle factor of the Clifford embedding.
    pub fn clifford_radius(&self) -> f64 {
        self.period / (2.0 * std::f64::consts::PI)
    }

    /// Clifford embedding `R^2 -> R^4`.
    pub fn embed(&self, p: &[f64]) -> [f64; 4] {
        let r = self.clifford_radius();
        let (sa, ca) = (p[0] / r).sin_cos();
        let (sb, cb) = (p[1] / r).sin_cos();
        [r * ca, r * sa, r * cb, r * sb]
    }

    /// Differential of the embedding applied to a lift vector.
    pub fn embed_vector(&self, p: &[f64], v: &[f64]) -> [f64; 4] {
        let r = self.clifford_radius();
        let (sa, ca) = (p[0] / r).sin_cos();
        let (sb, cb) = (p[1] / r).sin_cos();
        [-sa * v[0], ca * v[0], -sb * v[1], cb * v[1]]
    }

    /// Tangent projector of the embedded torus at an embedded point.
    pub fn embedded_project_tangent(&self, q: &[f64; 4], v: &[f64; 4]) -> [f64; 4] {
        let r = self.clifford_radius();
        let t1 = [-q[1] / r, q[0] / r];
        let t2 = [-q[3] / r, q[2] / r];
        let a = t1[0] * v[0] + t1[1] * v[1];
        let b = t2[0] * v[2] + t2[1] * v[3];
        [a * t1[0], a * t1[1], b * t2[0], b * t2[1]]
    }

    /// Second fundamental form of the Clifford embedding.
    pub fn embedded_second_fundamental_form(&self, q: &[f64; 4], u: &[f64; 4], w: &[f64; 4]) -> [f64; 4] {
        let r = self.clifford_radius();
        let t1 = [-q[1] / r, q[0] / r];
        let t2 = [-q[3] / r, q[2] / r];
        let u1 = t1[0] * u[0] + t1[1] * u[1];
        let w1 = t1[0] * w[0] + t1[1] * w[1];
        let u2 = t2[0] * u[2] + t2[1] * u[3];
        let w2 = t2[0] * w[2] + t2[1] * w[3];
        let (n1, n2) = ([q[0] / r, q[1] / r], [q[2] / r, q[3] / r]);
        let c1 = -u1 * w1 / r;
        let c2 = -u2 * w2 / r;
        [c1 * n1[0], c1 * n1[1], c2 * n2[0], c2 * n2[1]]
    }

    /// Reduce a lift into the fundamental domain `[0, period)^2`.
    pub fn reduce(&self, p: &[f64]) -> [f64; 2] {
        [p[0].rem_euclid(self.period), p[1].rem_euclid(self.period)]
    }
}

impl TargetManifold for FlatTorus2 {
    fn ambient_dim(&self) -> usize {
        2
    }

    fn injectivity_radius(&self) -> f64 {
        0.5 * self.period
    }

    fn is_flat(&self) -> bool {
        true
    }

    fn project(&self, p: &[f64], out: &mut [f64]) -> Result<()> {
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(Error::Projection("non-finite torus coordinates".into()));
        }
        let r = self.reduce(p);
        out[..2].copy_from_slice(&r);
        Ok(())
    }

    fn project_tangent(&self, _p: &[f64], v: &[f64], out: &mut [f64]) {
        out[..2].copy_from_slice(&v[..2]);
    }

    fn projector_derivative(&self, _p: &[f64], _x: &[f64], _v: &[f64], out: &mut [f64]) {
        out[..2].fill(0.0);
    }

    fn second_fundamental_form(&self, _p: &[f64], _u: &[f64], _w: &[f64], out: &mut [f64]) {
        out[..2].fill(0.0);
    }

    fn curvature(&self, _p: &[f64], _x: &[f64], _y: &[f64], _z: &[f64], out: &mut [f64]) -> Result<()> {
        out[..2].fill(0.0);
        Ok(())
    }

    fn exp(&self, p: &[f64], v: &[f64], out: &mut [f64]) {
        out[0] = p[0] + v[0];
        out[1] = p[1] + v[1];
    }

    fn parallel_transport(&self, p: &[f64], q: &[f64], w: &[f64], out: &mut [f64]) -> Result<()> {
        let d = self.distance(p, q);
        if d >= self.injectivity_radius() {
            return Err(Error::Transport(format!("lifts are {d:.3e} apart")));
        }
        out[..2].copy_from_slice(&w[..2]);
        Ok(())
    }

    fn retract(&self, p: &[f64], v: &[f64], out: &mut [f64]) {
        self.exp(p, v, out);
    }

    fn distance(&self, p: &[f64], q: &[f64]) -> f64 {
        ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt()
    }

    fn manifold_violation(&self, p: &[f64]) -> f64 {
        if p[0].is_finite() && p[1].is_finite() {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

/// The built-in targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Sphere(RoundSphere),
    Torus(FlatTorus2),
}

impl Target {
    pub fn sphere() -> Self {
        Target::Sphere(RoundSphere {})
    }

    pub fn torus() -> Self {
        Target::Torus(FlatTorus2::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Target::Sphere(_) => "sphere",
            Target::Torus(_) => "torus",
        }
    }

    fn inner(&self) -> &dyn TargetManifold {
        match self {
            Target::Sphere(s) => s,
            Target::Torus(t) => t,
        }
    }
}

impl TargetManifold for Target {
    fn ambient_dim(&self) -> usize {
        self.inner().ambient_dim()
    }
    fn injectivity_radius(&self) -> f64 {
        self.inner().injectivity_radius()
    }
    fn is_flat(&self) -> bool {
        self.inner().is_flat()
    }
    fn project(&self, p: &[f64], out: &mut [f64]) -> Result<()> {
        self.inner().project(p, out)
    }
    fn project_tangent(&self, p: &[f64], v: &[f64], out: &mut [f64]) {
        self.inner().project_tangent(p, v, out)
    }
    fn projector_derivative(&self, p: &[f64], x: &[f64], v: &[f64], out: &mut [f64]) {
        self.inner().projector_derivative(p, x, v, out)
    }
    fn second_fundamental_form(&self, p: &[f64], u: &[f64], w: &[f64], out: &mut [f64]) {
        self.inner().second_fundamental_form(p, u, w, out)
    }
    fn curvature(&self, p: &[f64], x: &[f64], y: &[f64], z: &[f64], out: &mut [f64]) -> Result<()> {
        self.inner().curvature(p, x, y, z, out)
    }
    fn exp(&self, p: &[f64], v: &[f64], out: &mut [f64]) {
        self.inner().exp(p, v, out)
    }
    fn parallel_transport(&self, p: &[f64], q: &[f64], w: &[f64], out: &mut [f64]) -> Result<()> {
        self.inner().parallel_transport(p, q, w, out)
    }
    fn retract(&self, p: &[f64], v: &[f64], out: &mut [f64]) {
        self.inner().retract(p, v, out)
    }
    fn distance(&self, p: &[f64], q: &[f64]) -> f64 {
        self.inner().distance(p, q)
    }
    fn manifold_violation(&self, p: &[f64]) -> f64 {
        self.inner().manifold_violation(p)
    }
}

fn check_tangent(target: &dyn TargetManifold, p: &[f64], vs: &[&[f64]]) -> Result<()> {
    for v in vs {
        let viol = target.tangency_violation(p, v);
        let tol = TANGENCY_TOL * (1.0 + norm(v));
        if viol > tol {
            return Err(Error::NotTangent {
                violation: viol,
                tolerance: tol,
            });
        }
    }
    Ok(())
}

/// Curvature from the second fundamental form via the Gauss equation,
/// `<R(x,y)z, w> = <II(y,z), II(x,w)> - <II(x,z), II(y,w)>`.
pub fn gauss_curvature(
    ambient_dim: usize,
    project_tangent: impl Fn(&[f64]) -> Vec<f64>,
    sff: impl Fn(&[f64], &[f64]) -> Vec<f64>,
    x: &[f64],
    y: &[f64],
    z: &[f64],
) -> Vec<f64> {
    let iyz = sff(y, z);
    let ixz = sff(x, z);
    let mut out = vec![0.0; ambient_dim];
    for (k, o) in out.iter_mut().enumerate() {
        let mut e = vec![0.0; ambient_dim];
        e[k] = 1.0;
        let w = project_tangent(&e);
        *o = dot(&iyz, &sff(x, &w)) - dot(&ixz, &sff(y, &w));
    }
    out
}

/// Free homotopy class data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HomotopyClass {
    /// Columns are the images of the two domain generators.
    Winding([[i64; 2]; 2]),
    Degree(i64),
}

impl HomotopyClass {
    pub const IDENTITY: HomotopyClass = HomotopyClass::Winding([[1, 0], [0, 1]]);
    pub const TRIVIAL_TORUS: HomotopyClass = HomotopyClass::Winding([[0, 0], [0, 0]]);

    pub fn winding_matrix(&self) -> Option<[[i64; 2]; 2]> {
        match self {
            HomotopyClass::Winding(a) => Some(*a),
            HomotopyClass::Degree(_) => None,
        }
    }
}

impl fmt::Display for HomotopyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HomotopyClass::Winding(a) => write!(f, "winding [[{}, {}], [{}, {}]]", a[0][0], a[0][1], a[1][0], a[1][1]),
            HomotopyClass::Degree(d) => write!(f, "degree {d}"),
        }
    }
}

/// Winding matrix or degree computed from the vertex values alone.
pub fn winding_of(domain: &SurfaceDomain, phi: &MapField) -> Result<HomotopyClass> {
    match phi.target {
        Target::Torus(t) => torus_winding(domain, &t, phi),
        Target::Sphere(_) => sphere_degree(domain, phi),
    }
}

fn torus_winding(domain: &SurfaceDomain, t: &FlatTorus2, phi: &MapField) -> Result<HomotopyClass> {
    let n = domain.n();
    let per = t.period;
    let mut a = [[0i64; 2]; 2];
    for axis in 0..2 {
        let mut first: Option<[i64; 2]> = None;
        for line in 0..n {
            let mut sum = [0.0; 2];
            for step in 0..n {
                let v = if axis == 0 { domain.index(step, line) } else { domain.index(line, step) };
                let u = domain.forward(v, axis);
                for c in 0..2 {
                    let d = phi.point(u)[c] - phi.point(v)[c];
                    let r = d - per * (d / per).round();
                    if r.abs() > 0.4 * per {
                        return Err(Error::IllConditioned(format!(
                            "edge at vertex {v} along axis {axis} jumps {r:.3} (period {per})"
                        )));
                    }
                    sum[c] += r;
                }
            }
            let w = [(sum[0] / per).round() as i64, (sum[1] / per).round() as i64];
            for c in 0..2 {
                if (sum[c] / per - w[c] as f64).abs() > 1e-6 {
                    return Err(Error::IllConditioned(format!("non-integer winding {:.6}", sum[c] / per)));
                }
            }
            match first {
                None => first = Some(w),
                Some(f) if f != w => {
                    return Err(Error::IllConditioned("loops in the same class disagree".into()));
                }
                _ => {}
            }
        }
        let w = first.expect("n >= 4");
        a[0][axis] = w[0];
        a[1][axis] = w[1];
    }
    Ok(HomotopyClass::Winding(a))
}

fn solid_angle(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let cross = [
        b[1] * c[2] - b[2] * c[1],
        b[2] * c[0] - b[0] * c[2],
        b[0] * c[1] - b[1] * c[0],
    ];
    let num = dot(a, &cross);
    let den = 1.0 + dot(a, b) + dot(b, c) + dot(c, a);
    2.0 * num.atan2(den)
}

fn sphere_degree(domain: &SurfaceDomain, phi: &MapField) -> Result<HomotopyClass> {
    let n = domain.n();
    let mut total = 0.0;
    for j in 0..n {
        for i in 0..n {
            let a = phi.point(domain.index(i, j));
            let b = phi.point(domain.index(i + 1, j));
            let c = phi.point(domain.index(i + 1, j + 1));
            let d = phi.point(domain.index(i, j + 1));
            for (x, y) in [(a, b), (b, c), (c, d), (d, a), (a, c)] {
                if dot(x, y) < -0.9 {
                    return Err(Error::IllConditioned(format!(
                        "cell ({i}, {j}) spans nearly antipodal points"
                    )));
                }
            }
            total += solid_angle(a, b, c) + solid_angle(a, c, d);
        }
    }
    let deg = total / (4.0 * std::f64::consts::PI);
    let r = deg.round();
    if (deg - r).abs() > 1e-6 {
        return Err(Error::IllConditioned(format!("non-integer degree {deg:.6}")));
    }
    Ok(HomotopyClass::Degree(r as i64))
}

/// Parallel transport of a spinor along `old -> new`, fiberwise in the
/// ambient index.
pub fn transport_spinor(
    domain: &SurfaceDomain,
    old: &MapField,
    new: &MapField,
    psi: &PlainSpinorField,
) -> Result<PlainSpinorField> {
    psi.check(domain)?;
    let target = old.target;
    if target.is_flat() {
        for v in 0..domain.vertex_count() {
            let d = target.distance(old.point(v), new.point(v));
            if d >= target.injectivity_radius() {
                return Err(Error::Transport(format!("maps are {d:.3e} apart at vertex {v}")));
            }
        }
        return Ok(psi.clone());
    }
    let l = target.ambient_dim();
    let mut out = PlainSpinorField::zeros(domain, l);
    let mut re = [0.0; MAX_AMBIENT];
    let mut im = [0.0; MAX_AMBIENT];
    let mut tre = [0.0; MAX_AMBIENT];
    let mut tim = [0.0; MAX_AMBIENT];
    for v in 0..domain.vertex_count() {
        let (p, q) = (old.point(v), new.point(v));
        for s in 0..2 {
            for c in 0..l {
                let z = psi.values[psi.index(v, c, s)];
                re[c] = z.re;
                im[c] = z.im;
            }
            target.parallel_transport(p, q, &re[..l], &mut tre[..l])?;
            target.parallel_transport(p, q, &im[..l], &mut tim[..l])?;
            for c in 0..l {
                let k = out.index(v, c, s);
                out.values[k] = Complex64::new(tre[c], tim[c]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::SpinStructure;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
        loop {
            let p: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let r = norm(&p);
            if r > 0.1 && r < 1.0 {
                return [p[0] / r, p[1] / r, p[2] / r];
            }
        }
    }

    fn tangent(rng: &mut ChaCha8Rng, p: &[f64; 3]) -> [f64; 3] {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let mut out = [0.0; 3];
        RoundSphere {}.project_tangent(p, &v, &mut out);
        out
    }

    #[test]
    fn sphere_projection_examples() {
        let s = RoundSphere {};
        let mut out = [0.0; 3];
        s.project(&[2.0, 0.0, 0.0], &mut out).unwrap();
        assert_eq!(out, [1.0, 0.0, 0.0]);
        assert!(matches!(s.project(&[0.0, 0.0, 0.0], &mut out), Err(Error::Projection(_))));
        let t = FlatTorus2::new(2.0 * std::f64::consts::PI).unwrap();
        let mut o2 = [0.0; 2];
        t.project(&[7.0, -1.0], &mut o2).unwrap();
        assert!((o2[0] - (7.0 - 2.0 * std::f64::consts::PI)).abs() < 1e-14);
        assert!((o2[1] - (2.0 * std::f64::consts::PI - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn sphere_projector_is_symmetric_idempotent_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = RoundSphere {};
        for _ in 0..10 {
            let p = unit(&mut rng);
            let m = nalgebra::Matrix3::from_row_slice(&s.tangent_projector(&p));
            assert!((m - m.transpose()).norm() < 1e-15);
            assert!((m * m - m).norm() < 1e-14);
            assert!((m.trace() - 2.0).abs() < 1e-14);
        }
    }

    #[test]
    fn sphere_curvature_identities() {
        let s = RoundSphere {};
        let p = [0.0, 0.0, 1.0];
        let x = [1.0, 0.0, 0.0];
        let y = [0.0, 1.0, 0.0];
        let mut out = [0.0; 3];
        s.curvature(&p, &x, &y, &y, &mut out).unwrap();
        assert_eq!(out, x);
        assert!((dot(&out, &x) - 1.0).abs() < 1e-15);
        assert!(matches!(
            s.curvature(&p, &[0.0, 0.0, 1.0], &y, &y, &mut out),
            Err(Error::NotTangent { .. })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p = unit(&mut rng);
            let (x, y, z) = (tangent(&mut rng, &p), tangent(&mut rng, &p), tangent(&mut rng, &p));
            let mut a = [0.0; 3];
            let mut b = [0.0; 3];
            let mut c = [0.0; 3];
            s.curvature(&p, &x, &y, &z, &mut a).unwrap();
            s.curvature(&p, &y, &x, &z, &mut b).unwrap();
            for i in 0..3 {
                assert!((a[i] + b[i]).abs() < 1e-14);
            }
            s.curvature(&p, &y, &z, &x, &mut b).unwrap();
            s.curvature(&p, &z, &x, &y, &mut c).unwrap();
            for i in 0..3 {
                assert!((a[i] + b[i] + c[i]).abs() < 1e-12);
            }
            let g = gauss_curvature(
                3,
                |v| {
                    let mut o = vec![0.0; 3];
                    s.project_tangent(&p, v, &mut o);
                    o
                },
                |u, w| {
                    let mut o = vec![0.0; 3];
                    s.second_fundamental_form(&p, u, w, &mut o);
                    o
                },
                &x,
                &y,
                &z,
            );
            for i in 0..3 {
                assert!((g[i] - a[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clifford_torus_gauss_equation_is_flat() {
        let t = FlatTorus2::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let p = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let q = t.embed(&p);
            let lift = |rng: &mut ChaCha8Rng| {
                let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                t.embed_vector(&p, &v)
            };
            let (x, y, z) = (lift(&mut rng), lift(&mut rng), lift(&mut rng));
            let tx = t.embedded_project_tangent(&q, &x);
            assert!(x.iter().zip(&tx).all(|(a, b)| (a - b).abs() < 1e-14));
            let r = gauss_curvature(
                4,
                |v| t.embedded_project_tangent(&q, &[v[0], v[1], v[2], v[3]]).to_vec(),
                |u, w| {
                    t.embedded_second_fundamental_form(&q, &[u[0], u[1], u[2], u[3]], &[w[0], w[1], w[2], w[3]])
                        .to_vec()
                },
                &x,
                &y,
                &z,
            );
            assert!(r.iter().all(|c| c.abs() < 1e-12));
            let mut out = [1.0; 2];
            t.curvature(&p, &[1.0, 0.0], &[0.0, 1.0], &[0.0, 1.0], &mut out).unwrap();
            assert_eq!(out, [0.0, 0.0]);
        }
    }

    #[test]
    fn geodesic_quarter_turn() {
        let s = RoundSphere {};
        let mut out = [0.0; 3];
        s.geodesic(&[1.0, 0.0, 0.0], &[0.0, std::f64::consts::FRAC_PI_2, 0.0], 1.0, &mut out);
        assert!((out[0]).abs() < 1e-15 && (out[1] - 1.0).abs() < 1e-15);
        s.geodesic(&[1.0, 0.0, 0.0], &[0.0, 0.3, 0.0], 0.0, &mut out);
        assert_eq!(out, [1.0, 0.0, 0.0]);
    }

    #[test]
    fn geodesic_derivative_is_tangent() {
        let s = RoundSphere {};
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let p = unit(&mut rng);
            let v = tangent(&mut rng, &p);
            let t = rng.random_range(0.1..1.0);
            let (mut a, mut b, mut q) = ([0.0; 3], [0.0; 3], [0.0; 3]);
            let h = 1e-5;
            s.geodesic(&p, &v, t + h, &mut a);
            s.geodesic(&p, &v, t - h, &mut b);
            s.geodesic(&p, &v, t, &mut q);
            let d: Vec<f64> = (0..3).map(|i| (a[i] - b[i]) / (2.0 * h)).collect();
            assert!(s.tangency_violation(&q, &d) < 1e-8);
        }
    }

    #[test]
    fn transport_is_isometric_and_reversible() {
        let s = RoundSphere {};
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let p = unit(&mut rng);
            let q = unit(&mut rng);
            if dot(&p, &q) < -0.9 {
                continue;
            }
            let w = tangent(&mut rng, &p);
            let (mut a, mut b) = ([0.0; 3], [0.0; 3]);
            s.parallel_transport(&p, &q, &w, &mut a).unwrap();
            assert!((norm(&a) - norm(&w)).abs() < 1e-12);
            assert!(dot(&a, &q).abs() < 1e-12);
            s.parallel_transport(&q, &p, &a, &mut b).unwrap();
            for i in 0..3 {
                assert!((b[i] - w[i]).abs() < 1e-12);
            }
        }
        let mut o = [0.0; 3];
        assert!(matches!(
            s.parallel_transport(&[0.0, 0.0, 1.0], &[0.0, 0.0, -1.0], &[1.0, 0.0, 0.0], &mut o),
            Err(Error::Transport(_))
        ));
    }

    fn torus_map(d: &SurfaceDomain, a: [[i64; 2]; 2]) -> MapField {
        MapField::affine_torus(d, FlatTorus2::default(), a, [0.1, 0.2]).unwrap()
    }

    #[test]
    fn torus_winding_examples() {
        let d = SurfaceDomain::new(16, 1.0, SpinStructure::from_signs(1, 1).unwrap()).unwrap();
        assert_eq!(winding_of(&d, &torus_map(&d, [[1, 0], [0, 1]])).unwrap(), HomotopyClass::IDENTITY);
        assert_eq!(winding_of(&d, &torus_map(&d, [[0, 0], [0, 0]])).unwrap(), HomotopyClass::TRIVIAL_TORUS);
        assert_eq!(
            winding_of(&d, &torus_map(&d, [[2, 0], [0, 1]])).unwrap(),
            HomotopyClass::Winding([[2, 0], [0, 1]])
        );
        assert_eq!(
            winding_of(&d, &torus_map(&d, [[1, 1], [-1, 2]])).unwrap(),
            HomotopyClass::Winding([[1, 1], [-1, 2]])
        );
        assert!(matches!(winding_of(&d, &torus_map(&d, [[8, 0], [0, 1]])), Err(Error::IllConditioned(_))));
    }

    #[test]
    fn sphere_degree_examples() {
        let d = SurfaceDomain::new(16, 1.0, SpinStructure::from_signs(1, 1).unwrap()).unwrap();
        let c = MapField::constant(&d, Target::sphere(), &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(winding_of(&d, &c).unwrap(), HomotopyClass::Degree(0));
        let b = MapField::sphere_bubble(&d, [0.5, 0.5], 0.1, 0.4).unwrap();
        assert_eq!(winding_of(&d, &b).unwrap(), HomotopyClass::Degree(1));
    }

    #[test]
    fn spinor_transport_identity_and_scaling() {
        let d = SurfaceDomain::new(8, 1.0, SpinStructure::from_signs(1, 1).unwrap()).unwrap();
        let phi = MapField::smooth_sphere_map(&d, 0.4, 3).unwrap();
        let psi = crate::functional::random_tangent_spinor(&d, &phi, 4);
        let same = transport_spinor(&d, &phi, &phi, &psi).unwrap();
        assert!(same.sub(&psi).max_abs() < 1e-15);
        let mut ratios = Vec::new();
        for step in [0.02, 0.01, 0.005] {
            let x = crate::functional::random_tangent_field(&d, &phi, 6);
            let moved = phi.retract(&d, &x, step).unwrap();
            let out = transport_spinor(&d, &phi, &moved, &psi).unwrap();
            let m0 = psi.modulus_sqr();
            let m1 = out.modulus_sqr();
            assert!(m0.iter().zip(&m1).all(|(a, b)| (a - b).abs() < 1e-12 * (1.0 + a)));
            assert!(phi_tangent_violation(&d, &moved, &out) < 1e-12);
            let dist = phi.sup_distance(&moved);
            ratios.push(out.sub(&psi).norm(&d) / (dist * psi.norm(&d)));
        }
        assert!((ratios[2] / ratios[1] - 1.0).abs() < 0.05);
        assert!((ratios[1] / ratios[0] - 1.0).abs() < 0.05);
    }

    fn phi_tangent_violation(d: &SurfaceDomain, phi: &MapField, psi: &PlainSpinorField) -> f64 {
        crate::functional::tangency_violation(d, phi, psi)
    }

    #[test]
    fn flat_spinor_transport_is_identity() {
        let d = SurfaceDomain::new(8, 1.0, SpinStructure::from_signs(1, 1).unwrap()).unwrap();
        let phi = torus_map(&d, [[1, 0], [0, 1]]);
        let psi = crate::functional::random_tangent_spinor(&d, &phi, 1);
        let x = crate::functional::random_tangent_field(&d, &phi, 2);
        let moved = phi.retract(&d, &x, 0.01).unwrap();
        assert_eq!(transport_spinor(&d, &phi, &moved, &psi).unwrap(), psi);
    }

    proptest! {
        #[test]
        fn sphere_projection_is_idempotent(x in -3.0f64..3.0, y in -3.0f64..3.0, z in -3.0f64..3.0) {
            prop_assume!(x * x + y * y + z * z > 0.01);
            let s = RoundSphere {};
            let mut a = [0.0; 3];
            let mut b = [0.0; 3];
            s.project(&[x, y, z], &mut a).unwrap();
            s.project(&a, &mut b).unwrap();
            for i in 0..3 {
                prop_assert!((a[i] - b[i]).abs() < 1e-15);
            }
        }

        #[test]
        fn torus_projection_is_idempotent(x in -10.0f64..10.0, y in -10.0f64..10.0) {
            let t = FlatTorus2::default();
            let mut a = [0.0; 2];
            let mut b = [0.0; 2];
            t.project(&[x, y], &mut a).unwrap();
            t.project(&a, &mut b).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
